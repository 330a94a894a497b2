//! Regression deltas along the time axis.

use ndarray::Array2;

use crate::error::{DinError, Result};

/// Standard regression delta with edge-replication padding:
///
/// `delta(t) = sum_{d=1..W} d * (m(t+d) - m(t-d)) / (2 * sum_{d=1..W} d^2)`
///
/// where `W = (width - 1) / 2`. Indices outside [0, T) clamp to the edges.
/// The second delta is this operator applied twice.
pub fn compute_delta(m: &Array2<f64>, width: usize) -> Result<Array2<f64>> {
    if width < 3 || width % 2 == 0 {
        return Err(DinError::config(format!("delta width must be odd and >= 3, got {width}")));
    }
    let (rows, frames) = m.dim();
    if frames < 1 {
        return Err(DinError::shape("delta input has no frames"));
    }
    let w = (width - 1) / 2;
    let denom = 2.0 * (1..=w).map(|d| (d * d) as f64).sum::<f64>();
    let clamp = |t: isize| -> usize { t.clamp(0, frames as isize - 1) as usize };

    let mut out = Array2::<f64>::zeros((rows, frames));
    for i in 0..rows {
        let row = m.row(i);
        for t in 0..frames {
            let mut acc = 0.0;
            for d in 1..=w {
                let ahead = row[clamp(t as isize + d as isize)];
                let behind = row[clamp(t as isize - d as isize)];
                acc += d as f64 * (ahead - behind);
            }
            out[[i, t]] = acc / denom;
        }
    }
    Ok(out)
}
