//! Exact level metrics: connectivity, corridor diameter, Zelda distances and
//! the Sokoban solver. Everything here is a pure function of the grid.

use std::collections::{BTreeMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::grid::{Domain, DomainSpec, TileGrid, TileType};

/// Value reported for a metric that is undefined on the current grid.
pub const UNDEFINED: i64 = -1;

pub const DEFAULT_SOKOBAN_BUDGET: usize = 200_000;

/// Integer metric values, index-aligned with the domain's metric names.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricVector(Vec<i64>);

impl MetricVector {
    pub fn new(values: Vec<i64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[i64] {
        &self.0
    }

    pub fn get(&self, i: usize) -> i64 {
        self.0[i]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn named(&self, domain: &DomainSpec) -> BTreeMap<String, i64> {
        domain
            .metric_names()
            .iter()
            .zip(&self.0)
            .map(|(n, v)| (n.to_string(), *v))
            .collect()
    }
}

fn passable_mask(grid: &TileGrid, passable: &[TileType]) -> Vec<bool> {
    grid.cells().iter().map(|t| passable.contains(t)).collect()
}

/// Number of 4-connected components formed by `passable` cells.
pub fn count_regions(grid: &TileGrid, passable: &[TileType]) -> usize {
    let open = passable_mask(grid, passable);
    let mut seen = vec![false; open.len()];
    let mut stack = Vec::new();
    let mut regions = 0;
    for start in 0..open.len() {
        if !open[start] || seen[start] {
            continue;
        }
        regions += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(cell) = stack.pop() {
            for n in grid.neighbors(cell) {
                if open[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
    }
    regions
}

/// Breadth-first distances (in edges) from `source` over `open` cells; `usize::MAX` marks unreachable.
fn bfs_distances(grid: &TileGrid, open: &[bool], source: usize, dist: &mut Vec<usize>) {
    dist.clear();
    dist.resize(open.len(), usize::MAX);
    let mut queue = VecDeque::with_capacity(open.len());
    dist[source] = 0;
    queue.push_back(source);
    while let Some(cell) = queue.pop_front() {
        let d = dist[cell] + 1;
        for n in grid.neighbors(cell) {
            if open[n] && dist[n] == usize::MAX {
                dist[n] = d;
                queue.push_back(n);
            }
        }
    }
}

/// Longest shortest path, in edges, between any two mutually reachable passable cells.
pub fn diameter_path_length(grid: &TileGrid, passable: &[TileType]) -> usize {
    let open = passable_mask(grid, passable);
    let mut dist = Vec::with_capacity(open.len());
    let mut best = 0;
    for source in 0..open.len() {
        if !open[source] {
            continue;
        }
        bfs_distances(grid, &open, source, &mut dist);
        best = dist
            .iter()
            .filter(|d| **d != usize::MAX)
            .fold(best, |acc, d| acc.max(*d));
    }
    best
}

fn distance_between(grid: &TileGrid, open: &[bool], from: usize, to: usize) -> Option<usize> {
    let mut dist = Vec::new();
    bfs_distances(grid, open, from, &mut dist);
    (dist[to] != usize::MAX).then_some(dist[to])
}

/// `[player_count, key_count, door_count, enemy_count, nearest_enemy, path_length]`.
///
/// Distances walk through every non-wall tile. `nearest_enemy` needs exactly one
/// player and at least one reachable enemy; `path_length` (player to key to door)
/// needs exactly one of each and both legs reachable.
pub fn zelda_metrics(grid: &TileGrid) -> MetricVector {
    let players = grid.positions(TileType::Player);
    let keys = grid.positions(TileType::Key);
    let doors = grid.positions(TileType::Door);
    let enemies = grid.positions(TileType::Enemy);
    let open: Vec<bool> = grid.cells().iter().map(|t| *t != TileType::Wall).collect();

    let mut nearest_enemy = UNDEFINED;
    let mut path_length = UNDEFINED;
    if let [player] = players[..] {
        let mut dist = Vec::new();
        bfs_distances(grid, &open, player, &mut dist);
        if let Some(d) = enemies
            .iter()
            .map(|e| dist[*e])
            .filter(|d| *d != usize::MAX)
            .min()
        {
            nearest_enemy = d as i64;
        }
        if let ([key], [door]) = (&keys[..], &doors[..]) {
            let to_key = dist[*key];
            if to_key != usize::MAX {
                if let Some(to_door) = distance_between(grid, &open, *key, *door) {
                    path_length = (to_key + to_door) as i64;
                }
            }
        }
    }
    MetricVector(vec![
        players.len() as i64,
        keys.len() as i64,
        doors.len() as i64,
        enemies.len() as i64,
        nearest_enemy,
        path_length,
    ])
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveOutcome {
    /// Minimum number of player moves.
    Solved(usize),
    /// Search space exhausted without reaching a solved state.
    Unsolvable,
    /// More than the node budget of states would have to be visited.
    BudgetExhausted,
}

/// A Sokoban position in solver form. Unlike the tile grid it can express
/// crates that already rest on targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SokobanPuzzle {
    pub height: usize,
    pub width: usize,
    pub walls: Vec<bool>,
    pub player: usize,
    pub crates: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Why a grid could not be handed to the solver.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Malformed {
    PlayerCount(usize),
    NoCrates,
    CrateTargetMismatch { crates: usize, targets: usize },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SokobanVerdict {
    Malformed(Malformed),
    Searched(SolveOutcome),
}

impl SokobanVerdict {
    pub fn solution_length(self) -> i64 {
        match self {
            SokobanVerdict::Searched(SolveOutcome::Solved(n)) => n as i64,
            _ => UNDEFINED,
        }
    }
}

impl SokobanPuzzle {
    pub fn from_grid(grid: &TileGrid) -> Result<Self, Malformed> {
        let players = grid.positions(TileType::Player);
        let crates = grid.positions(TileType::Crate);
        let targets = grid.positions(TileType::Target);
        if players.len() != 1 {
            return Err(Malformed::PlayerCount(players.len()));
        }
        if crates.is_empty() {
            return Err(Malformed::NoCrates);
        }
        if crates.len() != targets.len() {
            return Err(Malformed::CrateTargetMismatch {
                crates: crates.len(),
                targets: targets.len(),
            });
        }
        Ok(Self {
            height: grid.height(),
            width: grid.width(),
            walls: grid.cells().iter().map(|t| *t == TileType::Wall).collect(),
            player: players[0],
            crates,
            targets,
        })
    }

    fn step(&self, cell: usize, dir: usize) -> Option<usize> {
        let (r, c) = (cell / self.width, cell % self.width);
        let next = match dir {
            0 if r > 0 => cell - self.width,
            1 if r + 1 < self.height => cell + self.width,
            2 if c > 0 => cell - 1,
            3 if c + 1 < self.width => cell + 1,
            _ => return None,
        };
        (!self.walls[next]).then_some(next)
    }

    /// Breadth-first search over (player, crate set); every player step costs one move.
    pub fn solve(&self, node_budget: usize) -> SolveOutcome {
        let mut goal: Vec<u16> = self.targets.iter().map(|t| *t as u16).collect();
        goal.sort_unstable();
        let mut crates: Vec<u16> = self.crates.iter().map(|c| *c as u16).collect();
        crates.sort_unstable();
        if crates == goal {
            return SolveOutcome::Solved(0);
        }

        type State = (u16, Vec<u16>);
        let start: State = (self.player as u16, crates);
        let mut seen: HashSet<State> = HashSet::new();
        seen.insert(start.clone());
        let mut frontier = vec![start];
        let mut depth = 0;
        while !frontier.is_empty() {
            depth += 1;
            let mut next_frontier = Vec::new();
            for (player, crates) in &frontier {
                for dir in 0..4 {
                    let Some(to) = self.step(*player as usize, dir) else {
                        continue;
                    };
                    let to16 = to as u16;
                    let pushed = crates.binary_search(&to16);
                    let next_crates = match pushed {
                        Err(_) => None,
                        Ok(k) => {
                            let Some(beyond) = self.step(to, dir) else {
                                continue;
                            };
                            let beyond16 = beyond as u16;
                            if crates.binary_search(&beyond16).is_ok() {
                                continue;
                            }
                            let mut moved = crates.clone();
                            moved[k] = beyond16;
                            moved.sort_unstable();
                            Some(moved)
                        }
                    };
                    let state = match next_crates {
                        Some(moved) => {
                            if moved == goal {
                                return SolveOutcome::Solved(depth);
                            }
                            (to16, moved)
                        }
                        None => (to16, crates.clone()),
                    };
                    if seen.contains(&state) {
                        continue;
                    }
                    if seen.len() >= node_budget {
                        return SolveOutcome::BudgetExhausted;
                    }
                    seen.insert(state.clone());
                    next_frontier.push(state);
                }
            }
            frontier = next_frontier;
        }
        SolveOutcome::Unsolvable
    }
}

pub fn sokoban_verdict(grid: &TileGrid, node_budget: usize) -> SokobanVerdict {
    match SokobanPuzzle::from_grid(grid) {
        Ok(p) => SokobanVerdict::Searched(p.solve(node_budget)),
        Err(m) => SokobanVerdict::Malformed(m),
    }
}

/// `[player_count, crate_count, target_count, solution_length]`.
pub fn sokoban_metrics(grid: &TileGrid, node_budget: usize) -> MetricVector {
    assert!(node_budget > 0, "node budget must be positive");
    MetricVector(vec![
        grid.count(TileType::Player) as i64,
        grid.count(TileType::Crate) as i64,
        grid.count(TileType::Target) as i64,
        sokoban_verdict(grid, node_budget).solution_length(),
    ])
}

pub fn binary_metrics(grid: &TileGrid) -> MetricVector {
    let floor = [TileType::Floor];
    MetricVector(vec![
        count_regions(grid, &floor) as i64,
        diameter_path_length(grid, &floor) as i64,
    ])
}

pub fn metric_vector(domain: &DomainSpec, grid: &TileGrid, sokoban_budget: usize) -> MetricVector {
    match domain.domain {
        Domain::Binary => binary_metrics(grid),
        Domain::Zelda => zelda_metrics(grid),
        Domain::Sokoban => sokoban_metrics(grid, sokoban_budget),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_level;

    const FLOOR: [TileType; 1] = [TileType::Floor];

    fn bin(text: &str) -> TileGrid {
        parse_level(Domain::Binary, text).unwrap()
    }

    #[test]
    fn regions_basic() {
        assert_eq!(count_regions(&bin("...\n...\n...\n"), &FLOOR), 1);
        assert_eq!(count_regions(&bin("###\n###\n###\n"), &FLOOR), 0);
        // corners + centre, diagonals do not connect
        assert_eq!(count_regions(&bin(".#.\n#.#\n.#.\n"), &FLOOR), 5);
    }

    #[test]
    fn diameter_basic() {
        assert_eq!(diameter_path_length(&bin("...\n...\n...\n"), &FLOOR), 4);
        assert_eq!(diameter_path_length(&bin("###\n#.#\n###\n"), &FLOOR), 0);
        assert_eq!(diameter_path_length(&bin("###\n###\n###\n"), &FLOOR), 0);
        // two separate corridors: the longer one wins
        assert_eq!(diameter_path_length(&bin("....\n####\n..#.\n"), &FLOOR), 3);
    }

    #[test]
    fn zelda_examples() {
        let g = parse_level(Domain::Zelda, "###\nP.E\n###\n").unwrap();
        assert_eq!(zelda_metrics(&g).get(4), 2);
        let g = parse_level(Domain::Zelda, "###\nPKD\n###\n").unwrap();
        assert_eq!(zelda_metrics(&g).get(5), 2);
        let g = parse_level(Domain::Zelda, "PKD\n...\nP.E\n").unwrap();
        let m = zelda_metrics(&g);
        assert_eq!(m.values(), &[2, 1, 1, 1, UNDEFINED, UNDEFINED]);
    }

    #[test]
    fn zelda_unreachable_enemy() {
        let g = parse_level(Domain::Zelda, "P#E\n.#.\n.#.\n").unwrap();
        assert_eq!(zelda_metrics(&g).get(4), UNDEFINED);
    }

    #[test]
    fn sokoban_examples() {
        let g = parse_level(Domain::Sokoban, "###\nPCT\n###\n").unwrap();
        assert_eq!(sokoban_metrics(&g, 1000).values(), &[1, 1, 1, 1]);

        // crate stuck in the top-left corner
        let g = parse_level(Domain::Sokoban, "C..\n.P.\n..T\n").unwrap();
        assert_eq!(
            sokoban_verdict(&g, 10_000),
            SokobanVerdict::Searched(SolveOutcome::Unsolvable)
        );

        let g = parse_level(Domain::Sokoban, "PP.\n.C.\n..T\n").unwrap();
        assert_eq!(
            sokoban_verdict(&g, 10_000),
            SokobanVerdict::Malformed(Malformed::PlayerCount(2))
        );
        assert_eq!(sokoban_metrics(&g, 10).get(3), UNDEFINED);
    }

    #[test]
    fn crate_already_on_target() {
        let p = SokobanPuzzle {
            height: 3,
            width: 3,
            walls: vec![false; 9],
            player: 4,
            crates: vec![5],
            targets: vec![5],
        };
        assert_eq!(p.solve(10), SolveOutcome::Solved(0));
    }

    #[test]
    fn budget_exhaustion_is_distinct() {
        let g = parse_level(Domain::Sokoban, ".....\n.C.C.\n..P..\n.T.T.\n.....\n").unwrap();
        assert_eq!(
            sokoban_verdict(&g, 5),
            SokobanVerdict::Searched(SolveOutcome::BudgetExhausted)
        );
        assert!(matches!(
            sokoban_verdict(&g, DEFAULT_SOKOBAN_BUDGET),
            SokobanVerdict::Searched(SolveOutcome::Solved(_))
        ));
    }

    #[test]
    fn dispatch() {
        let d = crate::grid::DomainSpec::with_size(Domain::Binary, 3, 3).unwrap();
        let m = metric_vector(&d, &bin("...\n...\n...\n"), 1);
        assert_eq!(m.named(&d)["regions"], 1);
        assert_eq!(m.named(&d)["path_length"], 4);
    }
}
