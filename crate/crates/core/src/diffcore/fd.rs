use super::{DiffError, Result};

/// Central finite differences of a scalar function of several flat arrays.
///
/// Returns one gradient array per entry of `leaves`, in the same order.
pub fn finite_difference<F>(mut f: F, leaves: &[Vec<f64>], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Vec<f64>]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(DiffError::Invalid {
            op: "finite_difference",
            msg: format!("step must be positive, got {h}"),
        });
    }
    let mut point: Vec<Vec<f64>> = leaves.to_vec();
    let mut out = Vec::with_capacity(leaves.len());
    for l in 0..leaves.len() {
        let mut g = vec![0.0; leaves[l].len()];
        for k in 0..leaves[l].len() {
            let x0 = point[l][k];
            point[l][k] = x0 + h;
            let up = f(&point)?;
            point[l][k] = x0 - h;
            let down = f(&point)?;
            point[l][k] = x0;
            g[k] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}
