//! Weighted pool-adjacent-violators for nondecreasing least-squares fits.

/// Nondecreasing sequence minimizing `Σ w_i (y_i - f_i)²`.
///
/// Panics if the lengths differ or a weight is not positive.
pub fn pava(y: &[f64], w: &[f64]) -> Vec<f64> {
    assert_eq!(y.len(), w.len());
    assert!(w.iter().all(|&wi| wi > 0.0), "weights must be positive");
    // blocks of (weighted mean, total weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&yi, &wi) in y.iter().zip(w) {
        let mut cur = (yi, wi, 1usize);
        while let Some(&(m, bw, n)) = blocks.last() {
            if m <= cur.0 {
                break;
            }
            blocks.pop();
            let tw = bw + cur.1;
            cur = ((m * bw + cur.0 * cur.1) / tw, tw, n + cur.2);
        }
        blocks.push(cur);
    }
    blocks.into_iter().flat_map(|(m, _, n)| std::iter::repeat_n(m, n)).collect()
}
