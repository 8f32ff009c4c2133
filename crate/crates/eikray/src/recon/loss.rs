//! Mean absolute error over a batch of rendered rays.

use crate::Vec3;

/// Mean |rendered - target| over rays and channels, with the per-ray
/// subgradient (zero at exact ties).
pub fn loss_l1(rendered: &[Vec3], target: &[Vec3]) -> (f64, Vec<Vec3>) {
    assert_eq!(rendered.len(), target.len());
    let denom = (rendered.len() * 3) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(rendered.len());
    for (r, t) in rendered.iter().zip(target) {
        let mut g = Vec3::zeros();
        for c in 0..3 {
            let d = r[c] - t[c];
            loss += d.abs() / denom;
            g[c] = if d > 0.0 {
                1.0 / denom
            } else if d < 0.0 {
                -1.0 / denom
            } else {
                0.0
            };
        }
        grads.push(g);
    }
    (loss, grads)
}
