//! Needleman-Wunsch global alignment.

/// Best global alignment score of `a` against `b`.
///
/// Aligned pairs score `sub(x, y)`; every gap position scores `gap`.
pub fn needleman_wunsch<T>(a: &[T], b: &[T], sub: impl Fn(&T, &T) -> f64, gap: f64) -> f64 {
    let m = b.len();
    let mut prev: Vec<f64> = (0..=m).map(|j| j as f64 * gap).collect();
    let mut cur = vec![0.0; m + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = (i + 1) as f64 * gap;
        for (j, y) in b.iter().enumerate() {
            let diag = prev[j] + sub(x, y);
            let up = prev[j + 1] + gap;
            let left = cur[j] + gap;
            cur[j + 1] = diag.max(up).max(left);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Alignment score with match 1, mismatch 0 and no gap cost, divided by
/// the longer length.
pub fn normalized_match_score<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        return 1.0;
    }
    let s = needleman_wunsch(a, b, |x, y| if x == y { 1.0 } else { 0.0 }, 0.0);
    (s / n as f64).clamp(0.0, 1.0)
}
