//! Walk from start to goal on a walled grid using `U D L R` moves.

use std::collections::VecDeque;
use std::sync::LazyLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{split_terminal, Generated, Outcome, ProblemMeta, Tier, TokenId, Vocabulary, EOT};

pub(super) static VOCAB: LazyLock<Vocabulary> =
    LazyLock::new(|| Vocabulary::new(["U", "D", "L", "R", EOT]).expect("static vocabulary"));

const TERMINAL: TokenId = 4;
/// Largest grid side; position features are laid out on this fixed board.
pub const MAX_SIDE: usize = 10;

// position one-hot + distance + goal direction(4) + blocked(4) + at goal + crashed
pub(super) const SUMMARY_DIM: usize = MAX_SIDE * MAX_SIDE + 1 + 4 + 4 + 1 + 1;

const MOVES: [(i32, i32); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridMeta {
    pub rows: u8,
    pub cols: u8,
    /// Wall cells as `[row, col]`.
    pub walls: Vec<[u8; 2]>,
    pub start: [u8; 2],
    pub goal: [u8; 2],
}

impl GridMeta {
    fn is_wall(&self, r: i32, c: i32) -> bool {
        self.walls.iter().any(|w| w[0] as i32 == r && w[1] as i32 == c)
    }

    fn open(&self, r: i32, c: i32) -> bool {
        r >= 0 && c >= 0 && r < self.rows as i32 && c < self.cols as i32 && !self.is_wall(r, c)
    }
}

/// Position after replaying `moves`, or `Err(reason)` on the first illegal move.
fn walk(meta: &GridMeta, moves: &[TokenId]) -> Result<(i32, i32), &'static str> {
    let (mut r, mut c) = (meta.start[0] as i32, meta.start[1] as i32);
    for &m in moves {
        let Some(&(dr, dc)) = MOVES.get(m as usize) else {
            return Err("terminal inside path");
        };
        let (nr, nc) = (r + dr, c + dc);
        if nr < 0 || nc < 0 || nr >= meta.rows as i32 || nc >= meta.cols as i32 {
            return Err("left the grid");
        }
        if meta.is_wall(nr, nc) {
            return Err("hit a wall");
        }
        (r, c) = (nr, nc);
    }
    Ok((r, c))
}

pub(super) fn check(meta: &GridMeta, max_len: usize, tokens: &[TokenId]) -> Outcome {
    let content = match split_terminal(tokens, TERMINAL, max_len) {
        Ok(c) => c,
        Err(outcome) => return outcome,
    };
    match walk(meta, content) {
        Err(e) => Outcome::failed(e),
        Ok((r, c)) if (r, c) == (meta.goal[0] as i32, meta.goal[1] as i32) => Outcome::solved(),
        Ok(_) => Outcome::failed("did not reach the goal"),
    }
}

pub(super) fn summary_features(meta: &GridMeta, prefix: &[TokenId], out: &mut Vec<f64>) {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let base = out.len();
    out.resize(base + MAX_SIDE * MAX_SIDE, 0.0);
    let (goal_r, goal_c) = (meta.goal[0] as i32, meta.goal[1] as i32);
    match walk(meta, prefix) {
        Ok((r, c)) => {
            out[base + r as usize * MAX_SIDE + c as usize] = 1.0;
            let dist = (goal_r - r).abs() + (goal_c - c).abs();
            out.push(dist as f64 / (2 * MAX_SIDE) as f64);
            out.extend([goal_r < r, goal_r > r, goal_c < c, goal_c > c].map(flag));
            out.extend(MOVES.map(|(dr, dc)| flag(!meta.open(r + dr, c + dc))));
            out.push(flag(dist == 0));
            out.push(0.0);
        }
        Err(_) => {
            out.extend([0.0; 10]);
            out.push(1.0);
        }
    }
}

/// Breadth-first distances from `start`; `usize::MAX` marks unreachable cells.
fn bfs(meta: &GridMeta, start: (i32, i32)) -> (Vec<usize>, Vec<Option<(usize, TokenId)>>) {
    let cols = meta.cols as usize;
    let n = meta.rows as usize * cols;
    let mut dist = vec![usize::MAX; n];
    let mut parent = vec![None; n];
    let at = |r: i32, c: i32| r as usize * cols + c as usize;
    dist[at(start.0, start.1)] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some((r, c)) = queue.pop_front() {
        for (m, (dr, dc)) in MOVES.iter().enumerate() {
            let (nr, nc) = (r + dr, c + dc);
            if meta.open(nr, nc) && dist[at(nr, nc)] == usize::MAX {
                dist[at(nr, nc)] = dist[at(r, c)] + 1;
                parent[at(nr, nc)] = Some((at(r, c), m as TokenId));
                queue.push_back((nr, nc));
            }
        }
    }
    (dist, parent)
}

pub(crate) fn shortest_path(meta: &GridMeta) -> Option<Vec<TokenId>> {
    let cols = meta.cols as usize;
    let (dist, parent) = bfs(meta, (meta.start[0] as i32, meta.start[1] as i32));
    let mut cell = meta.goal[0] as usize * cols + meta.goal[1] as usize;
    if dist[cell] == usize::MAX {
        return None;
    }
    let mut path = Vec::with_capacity(dist[cell]);
    while let Some((prev, m)) = parent[cell] {
        path.push(m);
        cell = prev;
    }
    path.reverse();
    Some(path)
}

pub(super) fn generate(tier: Tier, rng: &mut ChaCha8Rng) -> Generated {
    let (side, wall_p) = match tier {
        Tier::Easy => (4u8, 0.1),
        Tier::Medium => (7, 0.2),
        Tier::Hard => (MAX_SIDE as u8, 0.25),
    };
    let band = tier.length_band();
    let min_moves = (*band.start()).max(2);
    loop {
        let mut meta = GridMeta {
            rows: side,
            cols: side,
            walls: Vec::new(),
            start: [rng.gen_range(0..side), rng.gen_range(0..side)],
            goal: [0, 0],
        };
        for r in 0..side {
            for c in 0..side {
                if [r, c] != meta.start && rng.gen_bool(wall_p) {
                    meta.walls.push([r, c]);
                }
            }
        }
        let (dist, _) = bfs(&meta, (meta.start[0] as i32, meta.start[1] as i32));
        let candidates: Vec<usize> = (0..dist.len())
            .filter(|&i| dist[i] >= min_moves && dist[i] <= *band.end())
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let cell = candidates[rng.gen_range(0..candidates.len())];
        meta.goal = [(cell / side as usize) as u8, (cell % side as usize) as u8];
        let mut canonical = shortest_path(&meta).expect("goal reachable");
        let moves = canonical.len();
        canonical.push(TERMINAL);

        let mut prompt: Vec<String> = vec![
            "rows".into(),
            side.to_string(),
            "cols".into(),
            side.to_string(),
            "start".into(),
            format!("{},{}", meta.start[0], meta.start[1]),
            "goal".into(),
            format!("{},{}", meta.goal[0], meta.goal[1]),
            "walls".into(),
        ];
        prompt.extend(meta.walls.iter().map(|w| format!("{},{}", w[0], w[1])));
        return Generated {
            prompt,
            canonical,
            max_len: 2 * moves + 1,
            meta: ProblemMeta::Grid(meta),
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{check_solution, featurize, generate_problems, EnvKind, OutcomeKind, Problem};

    fn open_grid() -> Problem {
        Problem {
            id: "g".into(),
            env_kind: EnvKind::GridPath,
            tier: Tier::Easy,
            prompt: vec!["rows".into()],
            canonical: VOCAB.parse("R R <eot>").unwrap(),
            max_len: 6,
            meta: ProblemMeta::Grid(GridMeta {
                rows: 3,
                cols: 3,
                walls: vec![],
                start: [0, 0],
                goal: [0, 2],
            }),
        }
    }

    #[test]
    fn two_rights_reach_goal() {
        let p = open_grid();
        assert_eq!(check_solution(&p, &VOCAB.parse("R R <eot>").unwrap()).kind, OutcomeKind::Solved);
    }

    #[test]
    fn moving_up_leaves_bounds() {
        let p = open_grid();
        assert_eq!(check_solution(&p, &VOCAB.parse("U <eot>").unwrap()).kind, OutcomeKind::Failed);
        assert_eq!(
            check_solution(&p, &VOCAB.parse("R D U L R R").unwrap()).kind,
            OutcomeKind::Overlength
        );
    }

    #[test]
    fn walls_block_moves() {
        let mut p = open_grid();
        let ProblemMeta::Grid(m) = &mut p.meta else { unreachable!() };
        m.walls.push([0, 1]);
        assert_eq!(check_solution(&p, &VOCAB.parse("R R <eot>").unwrap()).kind, OutcomeKind::Failed);
        assert_eq!(
            check_solution(&p, &VOCAB.parse("D R R U <eot>").unwrap()).kind,
            OutcomeKind::Solved
        );
    }

    #[test]
    fn single_move_position_feature() {
        let p = open_grid();
        let f = featurize(&p, &VOCAB.parse("R").unwrap()).unwrap();
        let base = 3 * (VOCAB.size() + 1) + 1;
        let board = &f[base..base + MAX_SIDE * MAX_SIDE];
        assert_eq!(board.iter().sum::<f64>(), 1.0);
        assert_eq!(board[1], 1.0);
    }

    /// Independent BFS that explores a dense occupancy matrix.
    fn oracle_distance(m: &GridMeta) -> Option<usize> {
        let (rows, cols) = (m.rows as usize, m.cols as usize);
        let mut blocked = vec![vec![false; cols]; rows];
        for w in &m.walls {
            blocked[w[0] as usize][w[1] as usize] = true;
        }
        let mut seen = vec![vec![false; cols]; rows];
        let mut frontier = vec![(m.start[0] as usize, m.start[1] as usize)];
        seen[frontier[0].0][frontier[0].1] = true;
        for steps in 0.. {
            if frontier.is_empty() {
                return None;
            }
            if frontier.contains(&(m.goal[0] as usize, m.goal[1] as usize)) {
                return Some(steps);
            }
            let mut next = Vec::new();
            for (r, c) in frontier {
                let cand = [
                    (r.wrapping_sub(1), c),
                    (r + 1, c),
                    (r, c.wrapping_sub(1)),
                    (r, c + 1),
                ];
                for (nr, nc) in cand {
                    if nr < rows && nc < cols && !blocked[nr][nc] && !seen[nr][nc] {
                        seen[nr][nc] = true;
                        next.push((nr, nc));
                    }
                }
            }
            frontier = next;
        }
        unreachable!()
    }

    #[test]
    fn easy_canonical_is_shortest_path() {
        let p = &generate_problems(EnvKind::GridPath, Tier::Easy, 1, 7).unwrap()[0];
        let ProblemMeta::Grid(m) = &p.meta else { unreachable!() };
        assert!(p.content_len() <= 6);
        assert_eq!(oracle_distance(m), Some(p.content_len()));
        assert!(check_solution(p, &p.canonical).is_solved());
    }

    #[test]
    fn generated_paths_are_shortest() {
        for tier in Tier::ALL {
            for p in generate_problems(EnvKind::GridPath, tier, 20, 3).unwrap() {
                let ProblemMeta::Grid(m) = &p.meta else { unreachable!() };
                assert_eq!(oracle_distance(m), Some(p.content_len()));
            }
        }
    }

    #[test]
    fn same_window_different_position() {
        // brute force over short prefixes for a pair sharing the last three moves
        let p = open_grid();
        let mut prefixes: Vec<Vec<TokenId>> = vec![vec![]];
        for _ in 0..5 {
            prefixes = prefixes
                .iter()
                .flat_map(|pre| (0..4).map(move |m| [pre.clone(), vec![m]].concat()))
                .collect();
            let legal: Vec<_> = prefixes.iter().filter(|pre| walk_ok(&p, pre)).cloned().collect();
            for a in &legal {
                for b in &legal {
                    if a.len() >= 3 && b.len() >= 3 && a[a.len() - 3..] == b[b.len() - 3..] {
                        let (fa, fb) = (featurize(&p, a).unwrap(), featurize(&p, b).unwrap());
                        let ProblemMeta::Grid(m) = &p.meta else { unreachable!() };
                        if walk(m, a) != walk(m, b) {
                            assert_ne!(fa, fb);
                            return;
                        }
                    }
                }
            }
        }
        panic!("no pair found");
    }

    fn walk_ok(p: &Problem, prefix: &[TokenId]) -> bool {
        let ProblemMeta::Grid(m) = &p.meta else { unreachable!() };
        walk(m, prefix).is_ok()
    }
}
