//! MultiMatch: five-dimensional comparison of aligned saccade sequences.
//!
//! Coordinates and `screen_diag` must share units (the evaluator uses
//! pixels).

use serde::{Deserialize, Serialize};

use crate::gaze::{Fixation, Scanpath};

/// Consecutive saccades closer in direction than this are merged, radians.
pub const DIRECTION_THRESHOLD: f64 = std::f64::consts::FRAC_PI_4;
/// Consecutive saccades both shorter than this fraction of the screen
/// diagonal are merged.
pub const AMPLITUDE_FRACTION: f64 = 0.1;

/// Similarities in `[0, 1]`. Saccade-based dimensions are `None` when either
/// scanpath has fewer than two fixations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiMatch {
    pub shape: Option<f64>,
    pub length: Option<f64>,
    pub direction: Option<f64>,
    pub position: f64,
    pub duration: f64,
}

fn norm(v: (f64, f64)) -> f64 {
    (v.0 * v.0 + v.1 * v.1).sqrt()
}

fn angle_between(a: (f64, f64), b: (f64, f64)) -> f64 {
    let d = (b.1.atan2(b.0) - a.1.atan2(a.0)).abs();
    if d > std::f64::consts::PI {
        2.0 * std::f64::consts::PI - d
    } else {
        d
    }
}

fn saccades(f: &[Fixation]) -> Vec<(f64, f64)> {
    f.windows(2).map(|w| (w[1].x - w[0].x, w[1].y - w[0].y)).collect()
}

/// Merge consecutive saccades that continue in nearly the same direction or
/// are both short, until none qualify. The fixation between two merged
/// saccades is dropped and its duration added to the one before it.
pub fn simplify(fixations: &[Fixation], screen_diag: f64) -> Vec<Fixation> {
    let amp = AMPLITUDE_FRACTION * screen_diag;
    let mut f = fixations.to_vec();
    loop {
        let s = saccades(&f);
        let hit = (0..s.len().saturating_sub(1)).find(|&i| {
            let (a, b) = (s[i], s[i + 1]);
            angle_between(a, b) < DIRECTION_THRESHOLD || (norm(a) < amp && norm(b) < amp)
        });
        match hit {
            Some(i) => {
                let dropped = f.remove(i + 1);
                f[i].duration += dropped.duration;
            }
            None => return f,
        }
    }
}

/// Cheapest monotone path from `(0, 0)` to `(n-1, m-1)` moving right, down
/// or diagonally, where the cost is the sum of visited node weights. Ties
/// prefer the diagonal, then down, then right.
pub fn align(weights: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = weights.len();
    let m = weights[0].len();
    // cost[i][j]: cheapest path from (i, j) to the end, inclusive.
    let mut cost = vec![vec![f64::INFINITY; m]; n];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            let rest = if i == n - 1 && j == m - 1 {
                0.0
            } else {
                next_steps(i, j, n, m)
                    .into_iter()
                    .flatten()
                    .map(|(a, b)| cost[a][b])
                    .fold(f64::INFINITY, f64::min)
            };
            cost[i][j] = weights[i][j] + rest;
        }
    }
    let mut path = vec![(0, 0)];
    let (mut i, mut j) = (0, 0);
    while (i, j) != (n - 1, m - 1) {
        let mut best: Option<(usize, usize)> = None;
        for (a, b) in next_steps(i, j, n, m).into_iter().flatten() {
            if best.is_none_or(|(x, y)| cost[a][b] < cost[x][y]) {
                best = Some((a, b));
            }
        }
        (i, j) = best.expect("a step exists before the end");
        path.push((i, j));
    }
    path
}

fn next_steps(i: usize, j: usize, n: usize, m: usize) -> [Option<(usize, usize)>; 3] {
    [
        (i + 1 < n && j + 1 < m).then_some((i + 1, j + 1)),
        (i + 1 < n).then_some((i + 1, j)),
        (j + 1 < m).then_some((i, j + 1)),
    ]
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn duration_gap(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m > 0.0 {
        (a - b).abs() / m
    } else {
        0.0
    }
}

fn position_gap(a: &Fixation, b: &Fixation) -> f64 {
    norm((a.x - b.x, a.y - b.y))
}

/// Compare two scanpaths; `None` if either is empty.
pub fn multimatch(a: &Scanpath, b: &Scanpath, screen_diag: f64) -> Option<MultiMatch> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let sim = |d: f64| (1.0 - d).clamp(0.0, 1.0);
    if a.len() < 2 || b.len() < 2 {
        // Fixation-level lattice for the position and duration dimensions.
        let w: Vec<Vec<f64>> = a
            .fixations
            .iter()
            .map(|fa| b.fixations.iter().map(|fb| position_gap(fa, fb)).collect())
            .collect();
        let path = align(&w);
        let fa = &a.fixations;
        let fb = &b.fixations;
        return Some(MultiMatch {
            shape: None,
            length: None,
            direction: None,
            position: sim(mean(path.iter().map(|&(i, j)| position_gap(&fa[i], &fb[j]) / screen_diag))),
            duration: sim(mean(path.iter().map(|&(i, j)| duration_gap(fa[i].duration, fb[j].duration)))),
        });
    }
    let fa = simplify(&a.fixations, screen_diag);
    let fb = simplify(&b.fixations, screen_diag);
    let (sa, sb) = (saccades(&fa), saccades(&fb));
    let w: Vec<Vec<f64>> = sa
        .iter()
        .map(|&u| sb.iter().map(|&v| norm((u.0 - v.0, u.1 - v.1))).collect())
        .collect();
    let path = align(&w);
    let pairs = || path.iter().map(|&(i, j)| (i, j));
    Some(MultiMatch {
        shape: Some(sim(mean(pairs().map(|(i, j)| w[i][j] / (2.0 * screen_diag))))),
        length: Some(sim(mean(pairs().map(|(i, j)| (norm(sa[i]) - norm(sb[j])).abs() / screen_diag)))),
        direction: Some(sim(mean(pairs().map(|(i, j)| angle_between(sa[i], sb[j]) / std::f64::consts::PI)))),
        position: sim(mean(pairs().map(|(i, j)| position_gap(&fa[i], &fb[j]) / screen_diag))),
        duration: sim(mean(pairs().map(|(i, j)| duration_gap(fa[i].duration, fb[j].duration)))),
    })
}
