//! Norm balls and box constraints.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Perturbation norm for threat models and projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

/// Optional coordinatewise value range, e.g. `[0, 1]` for pixel data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: f64,
    pub hi: f64,
    pub enabled: bool,
}

impl BoxDomain {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::Domain(format!(
                "box domain requires lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(BoxDomain {
            lo,
            hi,
            enabled: true,
        })
    }

    /// The unit box `[0, 1]`.
    pub fn unit() -> Self {
        BoxDomain {
            lo: 0.0,
            hi: 1.0,
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        BoxDomain {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
            enabled: false,
        }
    }

    /// Clamp a vector into the box in place; no-op when disabled.
    pub fn clamp(&self, x: &mut Array1<f64>) {
        if self.enabled {
            x.mapv_inplace(|v| v.clamp(self.lo, self.hi));
        }
    }

    pub fn contains(&self, x: &Array1<f64>) -> bool {
        !self.enabled || x.iter().all(|&v| v >= self.lo && v <= self.hi)
    }
}

impl Default for BoxDomain {
    fn default() -> Self {
        Self::disabled()
    }
}

/// Project `x` onto the `norm`-ball of radius `epsilon` around `center`,
/// intersected with `bounds`. L-inf clamps coordinatewise; L2 rescales
/// radially when outside. Idempotent, and exact for points already inside.
pub fn project_ball(
    x: &Array1<f64>,
    center: &Array1<f64>,
    norm: Norm,
    epsilon: f64,
    bounds: &BoxDomain,
) -> Array1<f64> {
    assert_eq!(x.len(), center.len(), "project_ball dimension mismatch");
    let mut out = match norm {
        Norm::Linf => Array1::from_shape_fn(x.len(), |i| {
            x[i].clamp(center[i] - epsilon, center[i] + epsilon)
        }),
        Norm::L2 => {
            // iterate the rescale: one pass can overshoot epsilon by an ulp,
            // and idempotence requires the result to measure inside the ball
            let mut current = x.clone();
            loop {
                let diff = &current - center;
                let dist = diff.dot(&diff).sqrt();
                if dist <= epsilon {
                    break current;
                }
                let factor = epsilon / dist;
                if factor >= 1.0 {
                    // dist exceeds epsilon by less than the factor's rounding
                    break current;
                }
                current = center + &(diff * factor);
            }
        }
    };
    bounds.clamp(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linf_clamps() {
        let out = project_ball(
            &array![0.3],
            &array![0.0],
            Norm::Linf,
            0.1,
            &BoxDomain::disabled(),
        );
        assert_eq!(out, array![0.1]);
    }

    #[test]
    fn l2_rescales_radially() {
        let out = project_ball(
            &array![3.0, 4.0],
            &array![0.0, 0.0],
            Norm::L2,
            1.0,
            &BoxDomain::disabled(),
        );
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn inside_point_is_unchanged() {
        let x = array![0.05, -0.02];
        let c = array![0.0, 0.0];
        let out = project_ball(&x, &c, Norm::Linf, 0.1, &BoxDomain::disabled());
        assert_eq!(out, x);
        let out2 = project_ball(&x, &c, Norm::L2, 1.0, &BoxDomain::disabled());
        assert_eq!(out2, x);
    }

    #[test]
    fn idempotent_with_box() {
        let x = array![1.7, -0.9, 0.4];
        let c = array![0.5, 0.5, 0.5];
        let b = BoxDomain::unit();
        for norm in [Norm::Linf, Norm::L2] {
            let once = project_ball(&x, &c, norm, 0.3, &b);
            let twice = project_ball(&once, &c, norm, 0.3, &b);
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn box_rejects_inverted_range() {
        assert!(BoxDomain::new(1.0, 0.0).is_err());
    }
}
