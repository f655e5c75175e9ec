//! Knee detection by maximum distance to the chord.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knee {
    /// Index into the curve.
    pub index: usize,
    /// Normalized distance of the knee from the chord, in `[0, 1]`.
    pub confidence: f64,
}

fn normalize(v: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let lo = v.clone().fold(f64::INFINITY, f64::min);
    let hi = v.clone().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    v.map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 })
        .collect()
}

/// Finds the point farthest from the line joining the first and last
/// points, after scaling both axes to `[0, 1]`.
///
/// A curve with no bend (all points on the chord) returns the last index
/// with confidence 0.
pub fn detect_knee(curve: &[(usize, f64)]) -> Result<Knee> {
    if curve.len() < 4 {
        return Err(Error::TooFewPoints {
            needed: 4,
            got: curve.len(),
        });
    }
    let x = normalize(curve.iter().map(|p| p.0 as f64));
    let y = normalize(curve.iter().map(|p| p.1));
    let n = curve.len();
    let (x0, y0, dx, dy) = (x[0], y[0], x[n - 1] - x[0], y[n - 1] - y[0]);
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return Ok(Knee {
            index: n - 1,
            confidence: 0.0,
        });
    }
    let mut best = (n - 1, 0.0f64);
    for i in 0..n {
        let d = (dy * (x[i] - x0) - dx * (y[i] - y0)).abs() / len;
        if d > best.1 + 1e-12 {
            best = (i, d);
        }
    }
    if best.1 < 1e-9 {
        return Ok(Knee {
            index: n - 1,
            confidence: 0.0,
        });
    }
    Ok(Knee {
        index: best.0,
        confidence: (best.1 * std::f64::consts::SQRT_2).min(1.0),
    })
}
