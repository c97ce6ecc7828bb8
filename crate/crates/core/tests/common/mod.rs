//! Independent reference implementations used by several test targets. None of
//! these share code with the library beyond the grid type.
#![allow(dead_code)]

use std::collections::HashMap;

use condgen_core::agent::net::log_softmax;
use condgen_core::agent::ppo::{loss_and_grad, loss_value, Batch, LossCoefs};
use condgen_core::agent::{InputShape, NetConfig, PolicyNet};
use condgen_core::curriculum::{normalize, sample_uniform, Teacher, TeacherConfig};
use condgen_core::grid::{TileGrid, TileType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ZIGZAG_14: &str = "\
......#.......
.####...#####.
.#...####...#.
.#.#..###.#.#.
.#..#.#...#.#.
..#.#...##..#.
#.#.####...##.
..##...#.####.
.##..#.#....#.
.##.#..####.#.
.##.#.#...#.#.
....#...#...#.
#############.
..............
";

fn open_mask(grid: &TileGrid, passable: &[TileType]) -> Vec<bool> {
    grid.cells().iter().map(|t| passable.contains(t)).collect()
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Union-find over right and down edges.
pub fn union_find_regions(grid: &TileGrid, passable: &[TileType]) -> usize {
    let (h, w) = (grid.height(), grid.width());
    let open = open_mask(grid, passable);
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !open[i] {
                continue;
            }
            for j in [(c + 1 < w).then(|| i + 1), (r + 1 < h).then(|| i + w)]
                .into_iter()
                .flatten()
            {
                if open[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a] = b;
                    }
                }
            }
        }
    }
    (0..h * w)
        .filter(|&i| open[i] && find(&mut parent, i) == i)
        .count()
}

/// All-pairs shortest paths, then the largest finite entry.
pub fn floyd_warshall_diameter(grid: &TileGrid, passable: &[TileType]) -> usize {
    let (h, w) = (grid.height(), grid.width());
    let n = h * w;
    let open = open_mask(grid, passable);
    const INF: usize = usize::MAX / 4;
    let mut d = vec![INF; n * n];
    for i in 0..n {
        if !open[i] {
            continue;
        }
        d[i * n + i] = 0;
        let (r, c) = (i / w, i % w);
        let adj = [
            (r > 0).then(|| i - w),
            (r + 1 < h).then(|| i + w),
            (c > 0).then(|| i - 1),
            (c + 1 < w).then(|| i + 1),
        ];
        for j in adj.into_iter().flatten() {
            if open[j] {
                d[i * n + j] = 1;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            let ik = d[i * n + k];
            if ik == INF {
                continue;
            }
            for j in 0..n {
                let via = ik + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    d.into_iter().filter(|&x| x < INF).max().unwrap_or(0)
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct SokoState {
    player: usize,
    crates: Vec<usize>,
}

struct Soko {
    h: usize,
    w: usize,
    walls: Vec<bool>,
    targets: Vec<usize>,
}

impl Soko {
    fn mv(&self, cell: usize, dir: usize) -> Option<usize> {
        let (r, c) = (cell / self.w, cell % self.w);
        let next = match dir {
            0 if r > 0 => cell - self.w,
            1 if r + 1 < self.h => cell + self.w,
            2 if c > 0 => cell - 1,
            3 if c + 1 < self.w => cell + 1,
            _ => return None,
        };
        (!self.walls[next]).then_some(next)
    }

    fn successors(&self, s: &SokoState) -> Vec<SokoState> {
        let mut out = Vec::new();
        for dir in 0..4 {
            let Some(next) = self.mv(s.player, dir) else {
                continue;
            };
            if let Some(k) = s.crates.iter().position(|&c| c == next) {
                let Some(beyond) = self.mv(next, dir) else {
                    continue;
                };
                if s.crates.contains(&beyond) {
                    continue;
                }
                let mut crates = s.crates.clone();
                crates[k] = beyond;
                crates.sort_unstable();
                out.push(SokoState {
                    player: next,
                    crates,
                });
            } else {
                out.push(SokoState {
                    player: next,
                    crates: s.crates.clone(),
                });
            }
        }
        out
    }

    /// Depth-limited DFS. `seen` holds the largest remaining budget each state
    /// was expanded with, which keeps every iteration polynomial. Returns
    /// (found, hit_limit).
    fn dfs(
        &self,
        s: &SokoState,
        budget: usize,
        seen: &mut HashMap<SokoState, usize>,
    ) -> (bool, bool) {
        if s.crates == self.targets {
            return (true, false);
        }
        if budget == 0 {
            return (false, true);
        }
        if let Some(&b) = seen.get(s) {
            if b >= budget {
                return (false, false);
            }
        }
        seen.insert(s.clone(), budget);
        let mut cut = false;
        for n in self.successors(s) {
            let (found, c) = self.dfs(&n, budget - 1, seen);
            if found {
                return (true, false);
            }
            cut |= c;
        }
        (false, cut)
    }
}

/// Minimum player moves by iterative deepening; `None` when no depth limit is
/// ever reached without a solution (the reachable space is exhausted).
/// Panics on grids that are not single-player with matching crates and targets.
pub fn iddfs_sokoban(grid: &TileGrid) -> Option<usize> {
    let pos = |t| -> Vec<usize> { (0..grid.len()).filter(|&i| grid.at(i) == t).collect() };
    let players = pos(TileType::Player);
    let crates = pos(TileType::Crate);
    let mut targets = pos(TileType::Target);
    assert_eq!(players.len(), 1);
    assert_eq!(crates.len(), targets.len());
    targets.sort_unstable();
    let soko = Soko {
        h: grid.height(),
        w: grid.width(),
        walls: grid.cells().iter().map(|t| *t == TileType::Wall).collect(),
        targets,
    };
    let start = SokoState {
        player: players[0],
        crates,
    };
    for limit in 0.. {
        let mut seen = HashMap::new();
        let (found, cut) = soko.dfs(&start, limit, &mut seen);
        if found {
            return Some(limit);
        }
        if !cut {
            return None;
        }
    }
    unreachable!()
}

pub fn random_grid<R: Rng>(h: usize, w: usize, tiles: &[TileType], rng: &mut R) -> TileGrid {
    let cells = (0..h * w)
        .map(|_| tiles[rng.random_range(0..tiles.len())])
        .collect();
    TileGrid::from_cells(h, w, cells).unwrap()
}

/// Binary grid with a random wall density, so sparse and dense maps both occur.
pub fn random_binary<R: Rng>(h: usize, w: usize, rng: &mut R) -> TileGrid {
    let p: f64 = rng.random_range(0.1..0.7);
    let cells = (0..h * w)
        .map(|_| {
            if rng.random_bool(p) {
                TileType::Wall
            } else {
                TileType::Floor
            }
        })
        .collect();
    TileGrid::from_cells(h, w, cells).unwrap()
}

/// One player, one or two crates with as many targets, some walls.
pub fn random_sokoban<R: Rng>(h: usize, w: usize, rng: &mut R) -> TileGrid {
    let n = h * w;
    let mut cells = vec![TileType::Empty; n];
    for c in cells.iter_mut() {
        if rng.random_bool(0.2) {
            *c = TileType::Wall;
        }
    }
    let crates = rng.random_range(1..=2);
    let mut free: Vec<usize> = (0..n).collect();
    let mut take = |rng: &mut R| free.swap_remove(rng.random_range(0..free.len()));
    cells[take(rng)] = TileType::Player;
    for _ in 0..crates {
        cells[take(rng)] = TileType::Crate;
        cells[take(rng)] = TileType::Target;
    }
    TileGrid::from_cells(h, w, cells).unwrap()
}

/// Two-sample Kolmogorov-Smirnov test; returns the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    let ne = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    // the series does not converge near zero, where Q is 1 to many digits
    if lambda < 0.2 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// Synthetic learner for the teacher: goals in the normalised window
/// [0.1, 0.3] give a coin-flip outcome (large learning progress), everything
/// else a constant outcome (none).
pub fn landscape_outcome<R: Rng>(x: f64, rng: &mut R) -> f64 {
    if (x - 0.2).abs() <= 0.1 {
        if rng.random_bool(0.5) {
            0.95
        } else {
            0.05
        }
    } else {
        0.5
    }
}

pub const BOUNDS: [(i64, i64); 1] = [(0, 100)];

pub fn in_window(x: f64) -> bool {
    (x - 0.2).abs() <= 0.1 + 1e-12
}

/// Runs the teacher against the synthetic landscape and returns the fraction
/// of the `draws` goals sampled after warm-up that land in the high-ALP window.
pub fn concentration(seed: u64, draws: usize) -> f64 {
    let cfg = TeacherConfig::default();
    let mut teacher = Teacher::new(cfg.clone(), BOUNDS.to_vec(), seed);
    let mut world = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let mut hits = 0;
    for i in 0..cfg.warmup + draws {
        let goal = teacher.sample();
        let x = normalize(&goal, &BOUNDS)[0];
        if i >= cfg.warmup && in_window(x) {
            hits += 1;
        }
        teacher.record(&goal, landscape_outcome(x, &mut world));
    }
    hits as f64 / draws as f64
}

/// Fraction of uniformly sampled goals that land in the high-ALP window.
pub fn uniform_window_rate(draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = (0..draws)
        .filter(|_| in_window(normalize(&sample_uniform(&BOUNDS, &mut rng), &BOUNDS)[0]))
        .count();
    hits as f64 / draws as f64
}

pub fn toy_net() -> PolicyNet {
    PolicyNet::new(
        NetConfig {
            conv_channels: vec![4, 4],
            kernel: 3,
            stride: 2,
            hidden: 32,
        },
        InputShape {
            height: 5,
            width: 5,
            channels: 3,
        },
        3,
    )
}

/// Random batch whose stored log-probabilities are offset from the current
/// policy so that some samples sit in the clipped region.
pub fn random_batch(net: &PolicyNet, params: &[f64], n: usize, offset: f64, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs: Vec<f64> = (0..n * net.input.len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let pass = net.forward(params, &obs, n);
    let logp = log_softmax(&pass.logits);
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..net.actions)).collect();
    Batch {
        old_log_probs: actions
            .iter()
            .enumerate()
            .map(|(i, a)| logp[[i, *a]] + rng.random_range(-offset..=offset))
            .collect(),
        actions,
        advantages: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        returns: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        obs,
    }
}

pub fn max_rel_error(net: &PolicyNet, params: &[f64], batch: &Batch, c: &LossCoefs) -> f64 {
    let (_, grad) = loss_and_grad(net, params, batch, c);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for i in 0..params.len() {
        p[i] = params[i] + h;
        let up = loss_value(net, &p, batch, c).total(c);
        p[i] = params[i] - h;
        let down = loss_value(net, &p, batch, c).total(c);
        p[i] = params[i];
        let fd = (up - down) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs());
        if scale > 1e-7 {
            worst = worst.max((grad[i] - fd).abs() / scale);
        }
    }
    worst
}

/// Max relative error of each loss term's gradient against central differences.
pub fn gradient_check_errors() -> Vec<(&'static str, f64)> {
    let net = toy_net();
    assert!((500..=1500).contains(&net.param_count()));
    let mut params = net.init_params(11);
    // the initial policy head is nearly zero, which makes the policy and entropy
    // gradients too small to difference reliably; give it unit scale
    let head = net
        .slots()
        .iter()
        .find(|s| s.name == "policy.weight")
        .unwrap()
        .clone();
    for v in &mut params[head.offset..head.offset + head.len()] {
        *v *= 100.0;
    }
    let batch = random_batch(&net, &params, 16, 0.3, 2);
    [
        (
            "policy",
            LossCoefs {
                clip_eps: 0.2,
                vf_coef: 0.0,
                ent_coef: 0.0,
            },
        ),
        (
            "value",
            LossCoefs {
                clip_eps: 0.2,
                vf_coef: 1.0,
                ent_coef: 0.0,
            },
        ),
        (
            "entropy",
            LossCoefs {
                clip_eps: 0.2,
                vf_coef: 0.0,
                ent_coef: 1.0,
            },
        ),
        (
            "total",
            LossCoefs {
                clip_eps: 0.2,
                vf_coef: 0.5,
                ent_coef: 0.01,
            },
        ),
    ]
    .into_iter()
    .map(|(name, c)| (name, max_rel_error(&net, &params, &batch, &c)))
    .collect()
}
