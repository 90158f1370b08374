//! Brute-force references for the alignment-based metrics.
#![allow(dead_code)]

use gazediff::gaze::Fixation;

/// Best score over every global alignment, by enumeration.
pub fn exhaustive_alignment<T>(a: &[T], b: &[T], sub: &dyn Fn(&T, &T) -> f64, gap: f64) -> f64 {
    match (a.split_first(), b.split_first()) {
        (None, None) => 0.0,
        (Some(_), None) => gap * a.len() as f64,
        (None, Some(_)) => gap * b.len() as f64,
        (Some((x, ra)), Some((y, rb))) => {
            let pair = sub(x, y) + exhaustive_alignment(ra, rb, sub, gap);
            let skip_a = gap + exhaustive_alignment(ra, b, sub, gap);
            let skip_b = gap + exhaustive_alignment(a, rb, sub, gap);
            pair.max(skip_a).max(skip_b)
        }
    }
}

pub fn norm(v: (f64, f64)) -> f64 {
    (v.0 * v.0 + v.1 * v.1).sqrt()
}

pub fn angle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let d = (b.1.atan2(b.0) - a.1.atan2(a.0)).abs();
    d.min(2.0 * std::f64::consts::PI - d)
}

/// Every monotone path from the top-left to the bottom-right cell.
pub fn lattice_paths(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    fn walk(i: usize, j: usize, n: usize, m: usize, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        cur.push((i, j));
        if (i, j) == (n - 1, m - 1) {
            out.push(cur.clone());
        } else {
            if i + 1 < n {
                walk(i + 1, j, n, m, cur, out);
            }
            if j + 1 < m {
                walk(i, j + 1, n, m, cur, out);
            }
            if i + 1 < n && j + 1 < m {
                walk(i + 1, j + 1, n, m, cur, out);
            }
        }
        cur.pop();
    }
    let mut out = Vec::new();
    walk(0, 0, n, m, &mut Vec::new(), &mut out);
    out
}

/// Shape, length, direction, position and duration similarities along the
/// cheapest lattice path, found by enumeration.
pub fn multimatch_oracle(a: &[Fixation], b: &[Fixation], diag: f64) -> [f64; 5] {
    let sac = |f: &[Fixation]| -> Vec<(f64, f64)> { f.windows(2).map(|w| (w[1].x - w[0].x, w[1].y - w[0].y)).collect() };
    let (sa, sb) = (sac(a), sac(b));
    let w = |i: usize, j: usize| norm((sa[i].0 - sb[j].0, sa[i].1 - sb[j].1));
    let best = lattice_paths(sa.len(), sb.len())
        .into_iter()
        .map(|p| (p.iter().map(|&(i, j)| w(i, j)).sum::<f64>(), p))
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .unwrap()
        .1;
    let k = best.len() as f64;
    let avg = |f: &dyn Fn(usize, usize) -> f64| 1.0 - best.iter().map(|&(i, j)| f(i, j)).sum::<f64>() / k;
    [
        avg(&|i, j| w(i, j) / (2.0 * diag)),
        avg(&|i, j| (norm(sa[i]) - norm(sb[j])).abs() / diag),
        avg(&|i, j| angle(sa[i], sb[j]) / std::f64::consts::PI),
        avg(&|i, j| norm((a[i].x - b[j].x, a[i].y - b[j].y)) / diag),
        avg(&|i, j| (a[i].duration - b[j].duration).abs() / a[i].duration.max(b[j].duration)),
    ]
}
