use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use condgen_core::grid::{parse_level, Domain};
use condgen_core::metrics::{sokoban_verdict, SokobanVerdict, SolveOutcome};

const SMALL: &str = r#"
seed = 3
[domain]
name = "binary"
height = 6
width = 6
[control]
controlled = [{ name = "regions", low = 1, high = 4 }]
[training]
total_frames = 128
workers = 2
segment_length = 32
[training.net]
conv_channels = [4, 4]
hidden = 16
[eval]
resolution = 4
episodes_per_cell = 3
step_cap = 200
"#;

fn condgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condgen"))
        .args(args)
        .env("CONDGEN_LOG", "warn")
        .output()
        .expect("spawn condgen")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

#[test]
fn evaluate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = condgen(&["evaluate", "--config", s(&cfg), "--greedy", "--out", s(&a)]);
    assert_eq!(
        code(&first),
        0,
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let second = condgen(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--greedy",
        "--out",
        s(&b),
        "--sequential",
    ]);
    assert_eq!(code(&second), 0);
    let csv_a = std::fs::read(a.join("sweep.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("sweep.csv")).unwrap());
    assert!(String::from_utf8(csv_a)
        .unwrap()
        .starts_with("regions,progress,diversity,episodes,"));
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 4);
    assert!(String::from_utf8_lossy(&first.stdout).contains("mean progress"));
}

#[test]
fn evaluate_without_agent_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    assert_eq!(code(&condgen(&["evaluate", "--config", s(&cfg)])), 2);
}

#[test]
fn bad_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let unknown_metric = write_config(
        dir.path(),
        "m.toml",
        "[domain]\nname = \"binary\"\n[control]\ncontrolled = [{ name = \"crate_count\" }]\n",
    );
    let unknown_key = write_config(dir.path(), "k.toml", &format!("{SMALL}\nbogus = 1\n"));
    for cfg in [unknown_metric, unknown_key] {
        let out = condgen(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
        assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(!dir.path().join("checkpoint.ckpt").exists());
}

#[test]
fn generate_count_zero_and_out_of_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("levels");
    let zero = condgen(&[
        "generate",
        "--config",
        s(&cfg),
        "--greedy",
        "--goal",
        "regions=2",
        "--count",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&zero), 0);
    assert!(!out.exists() || std::fs::read_dir(&out).unwrap().next().is_none());

    let oob = condgen(&[
        "generate",
        "--config",
        s(&cfg),
        "--greedy",
        "--goal",
        "regions=9",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&oob), 2);
    let unknown = condgen(&[
        "generate",
        "--config",
        s(&cfg),
        "--greedy",
        "--goal",
        "regions=2,nope=1",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&unknown), 2);
}

#[test]
fn generate_writes_levels_that_analyze_agrees_with() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("levels");
    let gen = condgen(&[
        "generate",
        "--config",
        s(&cfg),
        "--greedy",
        "--goal",
        "regions=1",
        "--goal",
        "regions=3",
        "--count",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    let mut txt: Vec<PathBuf> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    txt.sort();
    assert_eq!(txt.len(), 4);
    let mut args = vec!["analyze", "--domain", "binary"];
    args.extend(txt.iter().map(|p| s(p)));
    let analyzed = condgen(&args);
    assert_eq!(code(&analyzed), 0);
    let lines: Vec<serde_json::Value> = String::from_utf8(analyzed.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for (path, line) in txt.iter().zip(&lines) {
        let sidecar: serde_json::Value =
            serde_json::from_slice(&std::fs::read(path.with_extension("json")).unwrap()).unwrap();
        assert_eq!(sidecar["metrics"], line["metrics"]);
        if sidecar["satisfied"].as_bool().unwrap() {
            assert_eq!(sidecar["metrics"]["regions"], sidecar["goal"]["regions"]);
        }
    }
}

#[test]
fn sokoban_sidecar_solution_length_is_solver_verified() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.toml",
        r#"
seed = 11
[domain]
name = "sokoban"
[control]
controlled = [{ name = "crate_count" }, { name = "solution_length" }]
fixed = [{ name = "player_count", value = 1 }, { name = "target_count", value = 2 }]
[eval]
step_cap = 400
"#,
    );
    let out = dir.path().join("levels");
    let gen = condgen(&[
        "generate",
        "--config",
        s(&cfg),
        "--greedy",
        "--goal",
        "crate_count=2,solution_length=10",
        "--count",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    for i in 0..3 {
        let stem = out.join(format!("level_000_{i:03}"));
        let text = std::fs::read_to_string(stem.with_extension("txt")).unwrap();
        let sidecar: serde_json::Value =
            serde_json::from_slice(&std::fs::read(stem.with_extension("json")).unwrap()).unwrap();
        let grid = parse_level(Domain::Sokoban, &text).unwrap();
        let verdict = sokoban_verdict(&grid, 5_000_000);
        assert!(!matches!(
            verdict,
            SokobanVerdict::Searched(SolveOutcome::BudgetExhausted)
        ));
        assert_eq!(
            sidecar["metrics"]["solution_length"].as_i64().unwrap(),
            verdict.solution_length()
        );
        assert_eq!(sidecar["goal"]["solution_length"], 10);
    }
}

#[test]
fn checkpoint_hash_is_enforced_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let run = dir.path().join("run");
    let train = condgen(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(
        code(&train),
        0,
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    let ckpt = run.join("checkpoint.ckpt");
    let log = std::fs::read_to_string(run.join("metrics.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ok = condgen(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&dir.path().join("e1")),
    ]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));

    let other = write_config(
        dir.path(),
        "d.toml",
        &SMALL.replace("total_frames = 128", "total_frames = 256"),
    );
    let refused = condgen(&[
        "evaluate",
        "--config",
        s(&other),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&dir.path().join("e2")),
    ]);
    assert_eq!(code(&refused), 2);
    let forced = condgen(&[
        "evaluate",
        "--config",
        s(&other),
        "--checkpoint",
        s(&ckpt),
        "--force",
        "--out",
        s(&dir.path().join("e3")),
    ]);
    assert_eq!(code(&forced), 0);

    // resume continues the frame counter
    let resumed = condgen(&[
        "train",
        "--config",
        s(&other),
        "--checkpoint",
        s(&ckpt),
        "--force",
        "--out",
        s(&run),
    ]);
    assert_eq!(
        code(&resumed),
        0,
        "{}",
        String::from_utf8_lossy(&resumed.stderr)
    );
    let log = std::fs::read_to_string(run.join("metrics.ndjson")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["frames"], 256);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &SMALL.replace(
            "[training.net]",
            "[training.ppo]\nlearning_rate = 1e300\n[training.net]",
        ),
    );
    let out = condgen(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
