//! Grid-world object navigation: a 3D occupancy grid, a partial-observation
//! model, waypoint policies and a breadth-first local policy.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Cell = [usize; 3];

pub const DEFAULT_SUCCESS_RADIUS: f64 = 1.0;
pub const DEFAULT_OBSERVE_RADIUS: usize = 3;

/// Neighbor offsets in tie-break order: x first, then y, then z.
const NEIGHBORS: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

#[derive(Debug, Error, PartialEq)]
pub enum NavError {
    #[error("grid dimensions must be positive, got {0:?}")]
    EmptyGrid([usize; 3]),
    #[error("cell {0:?} lies outside the grid")]
    OutOfGrid(Cell),
    #[error("{what} cell {cell:?} is occupied")]
    Occupied { what: &'static str, cell: Cell },
    #[error("waypoint {0:?} is unreachable")]
    Unreachable(Cell),
    #[error("policy returned waypoint {0:?} outside the grid")]
    InvalidWaypoint(Cell),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavTarget {
    pub cell: Cell,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavEnv {
    pub dims: [usize; 3],
    pub cell_size: f64,
    occupancy: Vec<bool>,
    pub start: Cell,
    pub target: NavTarget,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NavEnvRepr {
    dims: [usize; 3],
    cell_size: f64,
    obstacles: Vec<Cell>,
    start: Cell,
    target: NavTarget,
}

impl Serialize for NavEnv {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        NavEnvRepr {
            dims: self.dims,
            cell_size: self.cell_size,
            obstacles: self.obstacles(),
            start: self.start,
            target: self.target.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for NavEnv {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = NavEnvRepr::deserialize(d)?;
        NavEnv::new(r.dims, r.cell_size, &r.obstacles, r.start, r.target).map_err(serde::de::Error::custom)
    }
}

impl NavEnv {
    pub fn new(dims: [usize; 3], cell_size: f64, obstacles: &[Cell], start: Cell, target: NavTarget) -> Result<Self, NavError> {
        if dims.contains(&0) {
            return Err(NavError::EmptyGrid(dims));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(NavError::InvalidParameter(format!("cell_size must be positive, got {cell_size}")));
        }
        let mut env = Self { dims, cell_size, occupancy: vec![false; dims.iter().product()], start, target };
        for &c in obstacles {
            let i = env.index(c).ok_or(NavError::OutOfGrid(c))?;
            env.occupancy[i] = true;
        }
        for (what, cell) in [("start", start), ("target", env.target.cell)] {
            let i = env.index(cell).ok_or(NavError::OutOfGrid(cell))?;
            if env.occupancy[i] {
                return Err(NavError::Occupied { what, cell });
            }
        }
        Ok(env)
    }

    pub fn cell_count(&self) -> usize {
        self.occupancy.len()
    }

    pub fn in_grid(&self, c: Cell) -> bool {
        (0..3).all(|a| c[a] < self.dims[a])
    }

    pub fn index(&self, c: Cell) -> Option<usize> {
        self.in_grid(c).then(|| (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2])
    }

    pub fn cell_of(&self, i: usize) -> Cell {
        let z = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        [i / (self.dims[1] * self.dims[2]), y, z]
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.index(c).is_some_and(|i| !self.occupancy[i])
    }

    pub fn obstacles(&self) -> Vec<Cell> {
        (0..self.cell_count()).filter(|&i| self.occupancy[i]).map(|i| self.cell_of(i)).collect()
    }

    pub fn neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        NEIGHBORS.iter().filter_map(move |d| {
            let n = [c[0] as isize + d[0], c[1] as isize + d[1], c[2] as isize + d[2]];
            if n.iter().any(|v| *v < 0) {
                return None;
            }
            let n = [n[0] as usize, n[1] as usize, n[2] as usize];
            self.in_grid(n).then_some(n)
        })
    }

    /// Breadth-first distances from `from` through cells accepted by `passable`.
    pub fn bfs_distances(&self, from: Cell, passable: impl Fn(Cell) -> bool) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.cell_count()];
        let Some(s) = self.index(from) else { return dist };
        if !passable(from) {
            return dist;
        }
        dist[s] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(c) = queue.pop_front() {
            let d = dist[self.index(c).expect("in grid")].expect("visited");
            for n in self.neighbors(c) {
                let ni = self.index(n).expect("in grid");
                if dist[ni].is_none() && passable(n) {
                    dist[ni] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    pub fn shortest_distance(&self, from: Cell, to: Cell) -> Option<usize> {
        let i = self.index(to)?;
        self.bfs_distances(from, |c| self.is_free(c))[i]
    }
}

/// First step of a shortest 6-connected free path from `from` to `waypoint`.
pub fn local_policy(env: &NavEnv, from: Cell, waypoint: Cell) -> Result<Cell, NavError> {
    if !env.is_free(from) {
        return Err(NavError::Occupied { what: "agent", cell: from });
    }
    if !env.in_grid(waypoint) {
        return Err(NavError::InvalidWaypoint(waypoint));
    }
    if from == waypoint {
        return Ok(from);
    }
    let dist = env.bfs_distances(waypoint, |c| env.is_free(c));
    let here = dist[env.index(from).expect("free implies in grid")].ok_or(NavError::Unreachable(waypoint))?;
    env.neighbors(from)
        .find(|&n| dist[env.index(n).expect("in grid")] == Some(here - 1))
        .ok_or(NavError::Unreachable(waypoint))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub position: Cell,
    pub history: Vec<Cell>,
    pub observed: Vec<bool>,
}

impl AgentState {
    pub fn new(env: &NavEnv) -> Self {
        Self { position: env.start, history: vec![env.start], observed: vec![false; env.cell_count()] }
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|o| **o).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sighting {
    pub label: String,
    pub cell: Cell,
}

/// True when no occupied cell lies strictly between the centers of `a` and `b`.
pub fn line_of_sight(env: &NavEnv, a: Cell, b: Cell) -> bool {
    let d: Vec<f64> = (0..3).map(|k| b[k] as f64 - a[k] as f64).collect();
    let steps = (d.iter().fold(0.0f64, |m, v| m.max(v.abs())) * 4.0).ceil() as usize;
    for s in 1..steps {
        let t = s as f64 / steps as f64;
        let c = [0, 1, 2].map(|k| (a[k] as f64 + 0.5 + t * d[k]).floor() as usize);
        if c != a && c != b && !env.is_free(c) {
            return false;
        }
    }
    true
}

/// Marks cells within Chebyshev `radius` and in line of sight as observed and
/// returns the labeled cells seen so far.
pub fn observe(env: &NavEnv, state: &mut AgentState, radius: usize) -> Result<Vec<Sighting>, NavError> {
    if radius == 0 {
        return Err(NavError::InvalidParameter("observation radius must be >= 1".into()));
    }
    let p = state.position;
    let lo = p.map(|v| v.saturating_sub(radius));
    let hi = [0, 1, 2].map(|k| (p[k] + radius).min(env.dims[k] - 1));
    for x in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for z in lo[2]..=hi[2] {
                let c = [x, y, z];
                let i = env.index(c).expect("clamped to grid");
                if !state.observed[i] && line_of_sight(env, p, c) {
                    state.observed[i] = true;
                }
            }
        }
    }
    let t = env.target.cell;
    Ok(if state.observed[env.index(t).expect("validated")] { vec![Sighting { label: env.target.label.clone(), cell: t }] } else { vec![] })
}

/// What a waypoint policy may look at: the agent state, sightings, and the
/// occupancy of observed cells only.
pub struct PolicyInput<'a> {
    pub summary: &'a [Sighting],
    pub state: &'a AgentState,
    env: &'a NavEnv,
}

impl PolicyInput<'_> {
    pub fn dims(&self) -> [usize; 3] {
        self.env.dims
    }

    /// `Some(free)` for observed cells, `None` otherwise.
    pub fn known_free(&self, c: Cell) -> Option<bool> {
        let i = self.env.index(c)?;
        self.state.observed[i].then(|| !self.env.occupancy[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Waypoint(Cell),
    Stop,
}

pub trait WaypointPolicy {
    fn decide(&mut self, input: &PolicyInput<'_>) -> Decision;
}

/// Always heads for the true target and stops on arrival.
pub struct OracleWaypointPolicy {
    pub target: Cell,
}

impl WaypointPolicy for OracleWaypointPolicy {
    fn decide(&mut self, input: &PolicyInput<'_>) -> Decision {
        if input.state.position == self.target {
            Decision::Stop
        } else {
            Decision::Waypoint(self.target)
        }
    }
}

/// Explores the nearest frontier (a known-free cell next to an unobserved
/// cell) until the target label is sighted, then walks to it. A chosen
/// frontier is kept until it stops being a frontier.
pub struct FrontierWaypointPolicy {
    pub target_label: String,
    /// Stop once this close to the sighted target.
    pub stop_radius: f64,
    current: Option<Cell>,
}

impl FrontierWaypointPolicy {
    pub fn new(target_label: &str) -> Self {
        Self { target_label: target_label.to_owned(), stop_radius: DEFAULT_SUCCESS_RADIUS, current: None }
    }

    fn is_frontier(input: &PolicyInput<'_>, c: Cell) -> bool {
        input.known_free(c) == Some(true) && input.env.neighbors(c).any(|n| input.known_free(n).is_none())
    }
}

impl WaypointPolicy for FrontierWaypointPolicy {
    fn decide(&mut self, input: &PolicyInput<'_>) -> Decision {
        let pos = input.state.position;
        if let Some(s) = input.summary.iter().find(|s| s.label == self.target_label) {
            return if cell_distance(s.cell, pos) <= self.stop_radius { Decision::Stop } else { Decision::Waypoint(s.cell) };
        }
        if let Some(c) = self.current {
            if c != pos && Self::is_frontier(input, c) {
                return Decision::Waypoint(c);
            }
        }
        let env = input.env;
        let dist = env.bfs_distances(pos, |c| input.known_free(c) == Some(true));
        let frontier = (0..env.cell_count())
            .filter_map(|i| dist[i].map(|d| (d, i)))
            .filter(|&(_, i)| Self::is_frontier(input, env.cell_of(i)))
            .min();
        self.current = frontier.map(|(_, i)| env.cell_of(i));
        match self.current {
            Some(c) => Decision::Waypoint(c),
            None => Decision::Stop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    PolicyStop,
    StepBudget,
    UnreachableWaypoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub trajectory: Vec<Cell>,
    pub success: bool,
    pub steps: usize,
    pub stop_reason: StopReason,
    pub observed_cells: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    pub success_radius: f64,
    pub observe_radius: usize,
}

impl EpisodeConfig {
    pub fn new(max_steps: usize) -> Self {
        Self { max_steps, success_radius: DEFAULT_SUCCESS_RADIUS, observe_radius: DEFAULT_OBSERVE_RADIUS }
    }
}

pub fn cell_distance(a: Cell, b: Cell) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt()
}

/// Runs observe / decide / step until the policy stops, the budget runs out,
/// or the waypoint cannot be reached. `steps` counts moves.
pub fn run_episode(env: &NavEnv, policy: &mut dyn WaypointPolicy, cfg: &EpisodeConfig) -> Result<EpisodeResult, NavError> {
    if cfg.max_steps == 0 {
        return Err(NavError::InvalidParameter("max_steps must be >= 1".into()));
    }
    let mut state = AgentState::new(env);
    let finish = |state: AgentState, success: bool, reason: StopReason| EpisodeResult {
        steps: state.history.len() - 1,
        observed_cells: state.observed_count(),
        trajectory: state.history,
        success,
        stop_reason: reason,
    };
    loop {
        let summary = observe(env, &mut state, cfg.observe_radius)?;
        let decision = policy.decide(&PolicyInput { summary: &summary, state: &state, env });
        let waypoint = match decision {
            Decision::Stop => {
                let success = cell_distance(state.position, env.target.cell) <= cfg.success_radius;
                return Ok(finish(state, success, StopReason::PolicyStop));
            }
            Decision::Waypoint(w) if !env.in_grid(w) => return Err(NavError::InvalidWaypoint(w)),
            Decision::Waypoint(w) => w,
        };
        if state.history.len() > cfg.max_steps {
            return Ok(finish(state, false, StopReason::StepBudget));
        }
        match local_policy(env, state.position, waypoint) {
            Ok(next) => {
                state.position = next;
                state.history.push(next);
            }
            Err(NavError::Unreachable(_)) => return Ok(finish(state, false, StopReason::UnreachableWaypoint)),
            Err(e) => return Err(e),
        }
    }
}

/// Random obstacle field with every free cell connected to the start; the
/// target is a random free cell at least `dims.max() / 2` moves away when
/// such a cell exists.
pub fn random_maze(seed: u64, dims: [usize; 3], obstacle_prob: f64) -> Result<NavEnv, NavError> {
    if !(0.0..1.0).contains(&obstacle_prob) {
        return Err(NavError::InvalidParameter(format!("obstacle_prob must be in [0, 1), got {obstacle_prob}")));
    }
    if dims.contains(&0) {
        return Err(NavError::EmptyGrid(dims));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let occ: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < obstacle_prob).collect();
    let start_i = rng.random_range(0..n);
    let placeholder = NavTarget { cell: [0; 3], label: "target".into() };
    let mut env = NavEnv { dims, cell_size: 1.0, occupancy: occ, start: [0; 3], target: placeholder };
    env.occupancy[start_i] = false;
    env.start = env.cell_of(start_i);
    let dist = env.bfs_distances(env.start, |c| env.is_free(c));
    for (i, d) in dist.iter().enumerate() {
        if d.is_none() {
            env.occupancy[i] = true;
        }
    }
    let min_d = dims.iter().max().copied().unwrap_or(1) / 2;
    let far: Vec<usize> = (0..n).filter(|&i| dist[i].is_some_and(|d| d >= min_d)).collect();
    let pool: Vec<usize> = if far.is_empty() { (0..n).filter(|&i| dist[i].is_some()).collect() } else { far };
    let ti = pool[rng.random_range(0..pool.len())];
    env.target.cell = env.cell_of(ti);
    Ok(env)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_env(dims: [usize; 3], obstacles: &[Cell], start: Cell, target: Cell) -> NavEnv {
        NavEnv::new(dims, 1.0, obstacles, start, NavTarget { cell: target, label: "chair".into() }).unwrap()
    }

    /// Independent BFS on a plain 3D array with its own neighbor loop.
    fn oracle_bfs(env: &NavEnv, from: Cell, to: Cell) -> Option<usize> {
        let [nx, ny, nz] = env.dims;
        let mut dist = vec![vec![vec![usize::MAX; nz]; ny]; nx];
        let mut q = VecDeque::new();
        dist[from[0]][from[1]][from[2]] = 0;
        q.push_back(from);
        while let Some([x, y, z]) = q.pop_front() {
            if [x, y, z] == to {
                return Some(dist[x][y][z]);
            }
            let d = dist[x][y][z];
            let mut cand = vec![];
            if x > 0 { cand.push([x - 1, y, z]); }
            if y > 0 { cand.push([x, y - 1, z]); }
            if z > 0 { cand.push([x, y, z - 1]); }
            if x + 1 < nx { cand.push([x + 1, y, z]); }
            if y + 1 < ny { cand.push([x, y + 1, z]); }
            if z + 1 < nz { cand.push([x, y, z + 1]); }
            for c in cand {
                if env.is_free(c) && dist[c[0]][c[1]][c[2]] == usize::MAX {
                    dist[c[0]][c[1]][c[2]] = d + 1;
                    q.push_back(c);
                }
            }
        }
        None
    }

    fn assert_valid_trajectory(env: &NavEnv, r: &EpisodeResult) {
        assert_eq!(r.trajectory[0], env.start);
        for w in r.trajectory.windows(2) {
            assert!(env.is_free(w[1]));
            let diff: usize = (0..3).map(|k| w[0][k].abs_diff(w[1][k])).sum();
            assert_eq!(diff, 1, "{:?} -> {:?}", w[0], w[1]);
        }
        if r.success {
            assert!(cell_distance(*r.trajectory.last().unwrap(), env.target.cell) <= DEFAULT_SUCCESS_RADIUS);
        }
    }

    #[test]
    fn local_policy_basics() {
        let env = open_env([5, 1, 1], &[], [0, 0, 0], [4, 0, 0]);
        assert_eq!(local_policy(&env, [2, 0, 0], [2, 0, 0]).unwrap(), [2, 0, 0]);
        assert_eq!(local_policy(&env, [0, 0, 0], [4, 0, 0]).unwrap(), [1, 0, 0]);
        assert_eq!(local_policy(&env, [3, 0, 0], [0, 0, 0]).unwrap(), [2, 0, 0]);
        // Diagonal goal in open 3D space: x moves win ties.
        let env = open_env([3, 3, 3], &[], [0, 0, 0], [2, 2, 2]);
        assert_eq!(local_policy(&env, [1, 1, 1], [2, 2, 2]).unwrap(), [2, 1, 1]);
        assert_eq!(local_policy(&env, [1, 1, 1], [0, 2, 2]).unwrap(), [0, 1, 1]);
        let walled = open_env([3, 1, 1], &[[1, 0, 0]], [0, 0, 0], [2, 0, 0]);
        assert_eq!(local_policy(&walled, [0, 0, 0], [2, 0, 0]), Err(NavError::Unreachable([2, 0, 0])));
    }

    #[test]
    fn env_validation_and_json() {
        let t = NavTarget { cell: [1, 0, 0], label: "sofa".into() };
        assert!(matches!(NavEnv::new([0, 1, 1], 1.0, &[], [0; 3], t.clone()), Err(NavError::EmptyGrid(_))));
        assert!(matches!(NavEnv::new([2, 1, 1], 1.0, &[[1, 0, 0]], [0; 3], t.clone()), Err(NavError::Occupied { .. })));
        assert!(matches!(NavEnv::new([2, 1, 1], 1.0, &[[5, 0, 0]], [0; 3], t), Err(NavError::OutOfGrid(_))));
        let env = random_maze(4, [6, 2, 6], 0.3).unwrap();
        let json = serde_json::to_string(&env).unwrap();
        assert!(json.contains("\"obstacles\""));
        let back: NavEnv = serde_json::from_str(&json).unwrap();
        assert_eq!(back, env);
        assert!(serde_json::from_str::<NavEnv>(&json.replace("\"cell_size\"", "\"extra\":1,\"cell_size\"")).is_err());
    }

    #[test]
    fn observation_rules() {
        let env = open_env([4, 4, 4], &[], [0, 0, 0], [3, 3, 3]);
        let mut st = AgentState::new(&env);
        let seen = observe(&env, &mut st, 5).unwrap();
        assert_eq!(st.observed_count(), 64);
        assert_eq!(seen, vec![Sighting { label: "chair".into(), cell: [3, 3, 3] }]);

        // Wall at x = 2 separates start from target.
        let wall: Vec<Cell> = (0..3).flat_map(|y| (0..3).map(move |z| [2, y, z])).collect();
        let env = open_env([5, 3, 3], &wall, [0, 1, 1], [4, 1, 1]);
        let mut st = AgentState::new(&env);
        assert!(observe(&env, &mut st, 6).unwrap().is_empty());
        assert!(st.observed[env.index([2, 1, 1]).unwrap()]);
        assert!(!st.observed[env.index([3, 1, 1]).unwrap()]);
        assert!(observe(&env, &mut st, 0).is_err());
    }

    #[test]
    fn oracle_matches_bfs_on_random_mazes() {
        for seed in 0..20 {
            let env = random_maze(seed, [9, 3, 9], 0.3).unwrap();
            let want = oracle_bfs(&env, env.start, env.target.cell).unwrap();
            let mut pol = OracleWaypointPolicy { target: env.target.cell };
            let r = run_episode(&env, &mut pol, &EpisodeConfig::new(500)).unwrap();
            assert!(r.success);
            assert_eq!(r.steps, want);
            assert_eq!(r.stop_reason, StopReason::PolicyStop);
            assert_valid_trajectory(&env, &r);
            assert_eq!(env.shortest_distance(env.start, env.target.cell), Some(want));
        }
    }

    #[test]
    fn episode_edge_cases() {
        struct Quitter;
        impl WaypointPolicy for Quitter {
            fn decide(&mut self, _: &PolicyInput<'_>) -> Decision {
                Decision::Stop
            }
        }
        struct Wild;
        impl WaypointPolicy for Wild {
            fn decide(&mut self, _: &PolicyInput<'_>) -> Decision {
                Decision::Waypoint([99, 0, 0])
            }
        }
        let env = open_env([6, 1, 1], &[], [0, 0, 0], [5, 0, 0]);
        let r = run_episode(&env, &mut Quitter, &EpisodeConfig::new(10)).unwrap();
        assert_eq!((r.success, r.steps, r.stop_reason), (false, 0, StopReason::PolicyStop));
        assert_eq!(run_episode(&env, &mut Wild, &EpisodeConfig::new(10)), Err(NavError::InvalidWaypoint([99, 0, 0])));
        let r = run_episode(&env, &mut OracleWaypointPolicy { target: [5, 0, 0] }, &EpisodeConfig::new(3)).unwrap();
        assert_eq!((r.success, r.steps, r.stop_reason), (false, 3, StopReason::StepBudget));
        let r = run_episode(&env, &mut OracleWaypointPolicy { target: [5, 0, 0] }, &EpisodeConfig::new(5)).unwrap();
        assert!(r.success);

        let cut = open_env([5, 1, 1], &[[2, 0, 0]], [0, 0, 0], [4, 0, 0]);
        let r = run_episode(&cut, &mut OracleWaypointPolicy { target: [4, 0, 0] }, &EpisodeConfig::new(10)).unwrap();
        assert_eq!((r.success, r.stop_reason), (false, StopReason::UnreachableWaypoint));
    }

    #[test]
    fn frontier_policy_explores_and_observation_grows() {
        let mut successes = 0;
        for seed in 0..20 {
            let env = random_maze(seed, [9, 3, 9], 0.2).unwrap();
            let bfs = env.shortest_distance(env.start, env.target.cell).unwrap();
            let mut pol = FrontierWaypointPolicy::new("target");
            let r = run_episode(&env, &mut pol, &EpisodeConfig::new(4 * bfs.max(1))).unwrap();
            assert_valid_trajectory(&env, &r);
            successes += r.success as usize;

            let mut st = AgentState::new(&env);
            let mut last = 0;
            for &c in &r.trajectory {
                st.position = c;
                observe(&env, &mut st, DEFAULT_OBSERVE_RADIUS).unwrap();
                assert!(st.observed_count() >= last);
                last = st.observed_count();
            }
        }
        assert!(successes >= 18, "{successes}/20");
    }
}
