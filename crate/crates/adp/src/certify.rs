//! Randomized-smoothing certification of a (purified) classification
//! pipeline.
//!
//! Smoothing classifies by majority vote under Gaussian input noise; from the
//! top-2 empirical label frequencies `pA >= pB`, the pipeline carries a
//! certified L2 radius `R = (sigma/2) (phi^{-1}(pA) - phi^{-1}(pB))`. The
//! default mode uses the raw empirical frequencies ("approximate certified
//! accuracy"); an optional conservative mode shrinks `pA` by a Hoeffding
//! bound before evaluating the radius.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::numerics::{inv_std_normal_cdf, RngStream};
use crate::{Error, Result};

/// Empirical top-2 label frequencies under Gaussian input noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingEstimate {
    /// Most frequent label.
    pub top_label: usize,
    /// Second most frequent label.
    pub runner_up: usize,
    pub p_top: f64,
    pub p_runner_up: f64,
    pub samples: usize,
    /// The top two labels drew the same count.
    pub tie: bool,
}

/// One certified input: predicted label, correctness, and radius (absent on
/// abstention).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifiedPoint {
    pub index: usize,
    pub label: usize,
    pub correct: bool,
    /// Certified L2 radius; `None` means abstain.
    pub radius: Option<f64>,
}

/// How empirical frequencies enter the radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CertifyMode {
    /// Raw empirical frequencies (default).
    Empirical,
    /// One-sided Hoeffding lower bound on `pA` (and upper bound on `pB`)
    /// at confidence `1 - alpha`; abstains when the bounded `pA` drops to
    /// `0.5` or below.
    Hoeffding { alpha: f64 },
}

/// Estimate the top-2 label frequencies of `pipeline` at `x` from `n` draws
/// of `x + eps`, `eps ~ N(0, sigma^2 I)`. Count ties break to the lower
/// label index.
pub fn estimate_top2(
    mut pipeline: impl FnMut(&Array1<f64>) -> usize,
    x: &Array1<f64>,
    sigma: f64,
    n: usize,
    rng: &mut RngStream,
) -> Result<SmoothingEstimate> {
    if n < 2 {
        return Err(Error::Domain(format!(
            "smoothing estimate needs at least 2 samples, got {n}"
        )));
    }
    let mut counts: Vec<(usize, usize)> = Vec::new(); // (label, count)
    for _ in 0..n {
        let noisy = Array1::from_shape_fn(x.len(), |i| x[i] + sigma * rng.next_gaussian());
        let label = pipeline(&noisy);
        match counts.iter_mut().find(|(l, _)| *l == label) {
            Some((_, c)) => *c += 1,
            None => counts.push((label, 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let (top_label, top_count) = counts[0];
    let (runner_up, runner_count) = counts.get(1).copied().unwrap_or((top_label, 0));
    Ok(SmoothingEstimate {
        top_label,
        runner_up,
        p_top: top_count as f64 / n as f64,
        p_runner_up: runner_count as f64 / n as f64,
        samples: n,
        tie: counts.len() > 1 && top_count == runner_count,
    })
}

/// Certified L2 radius `(sigma/2)(phi^{-1}(pA) - phi^{-1}(pB))`.
/// `pA = pB` yields radius zero; both probabilities must lie strictly
/// inside `(0, 1)` (clip empirical boundary values first, see
/// [`clip_frequency`]).
pub fn certified_radius(p_top: f64, p_runner_up: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!(
            "smoothing noise level must be positive, got {sigma}"
        )));
    }
    if p_runner_up > p_top {
        return Err(Error::Domain(format!(
            "top probability {p_top} below runner-up {p_runner_up}"
        )));
    }
    if p_top == p_runner_up {
        return Ok(0.0);
    }
    let za = inv_std_normal_cdf(p_top)?;
    let zb = inv_std_normal_cdf(p_runner_up)?;
    Ok(sigma / 2.0 * (za - zb))
}

/// Clip an empirical frequency into `[1/(2n), 1 - 1/(2n)]` so the quantile
/// stays finite at observed 0 or 1.
pub fn clip_frequency(p: f64, n: usize) -> f64 {
    let edge = 1.0 / (2.0 * n as f64);
    p.clamp(edge, 1.0 - edge)
}

/// Certify one input from its smoothing estimate. Abstains on a top-2 count
/// tie, and additionally (in Hoeffding mode) when the lower-bounded `pA`
/// does not exceed the upper-bounded `pB` or 0.5.
pub fn certify_estimate(
    estimate: &SmoothingEstimate,
    sigma: f64,
    mode: CertifyMode,
    index: usize,
    true_label: usize,
) -> Result<CertifiedPoint> {
    let n = estimate.samples;
    let (pa, pb) = match mode {
        CertifyMode::Empirical => (
            clip_frequency(estimate.p_top, n),
            clip_frequency(estimate.p_runner_up, n),
        ),
        CertifyMode::Hoeffding { alpha } => {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::Domain(format!(
                    "Hoeffding alpha must be in (0,1), got {alpha}"
                )));
            }
            let margin = ((1.0 / alpha).ln() / (2.0 * n as f64)).sqrt();
            (
                clip_frequency(estimate.p_top - margin, n),
                clip_frequency(estimate.p_runner_up + margin, n),
            )
        }
    };
    let abstain = estimate.tie
        || pa < pb
        || matches!(mode, CertifyMode::Hoeffding { .. }) && pa <= 0.5;
    let radius = if abstain {
        None
    } else {
        Some(certified_radius(pa, pb, sigma)?)
    };
    Ok(CertifiedPoint {
        index,
        label: estimate.top_label,
        correct: estimate.top_label == true_label,
        radius,
    })
}

/// Certified-accuracy curve: for each radius `r`, the fraction of inputs
/// whose smoothed label is correct and whose certified radius reaches `r`.
/// Monotone non-increasing in `r`; the `r = 0` point equals the smoothed
/// clean accuracy.
pub fn certified_accuracy_curve(
    mut pipeline: impl FnMut(&Array1<f64>) -> usize,
    inputs: &[Array1<f64>],
    labels: &[usize],
    sigma: f64,
    n: usize,
    radii: &[f64],
    mode: CertifyMode,
    rng: &RngStream,
) -> Result<(Vec<(f64, f64)>, Vec<CertifiedPoint>)> {
    if inputs.len() != labels.len() {
        return Err(Error::Mismatch(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if radii.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Domain("radius grid must be non-decreasing".into()));
    }
    let mut points = Vec::with_capacity(inputs.len());
    for (i, (x, &y)) in inputs.iter().zip(labels.iter()).enumerate() {
        let mut stream = rng.substream(i as u64);
        let est = estimate_top2(&mut pipeline, x, sigma, n, &mut stream)?;
        points.push(certify_estimate(&est, sigma, mode, i, y)?);
    }
    let total = points.len() as f64;
    let curve = radii
        .iter()
        .map(|&r| {
            let certified = points
                .iter()
                .filter(|p| p.correct && p.radius.unwrap_or(0.0) >= r)
                .count();
            (r, certified as f64 / total)
        })
        .collect();
    Ok((curve, points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::std_normal_cdf;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn constant_pipeline_estimate() {
        let mut rng = RngStream::new(1);
        let est = estimate_top2(|_| 3usize, &array![0.0], 0.25, 100, &mut rng).unwrap();
        assert_eq!(est.top_label, 3);
        assert_eq!(est.p_top, 1.0);
        assert_eq!(est.p_runner_up, 0.0);
        assert!(!est.tie);
    }

    #[test]
    fn estimate_is_seed_reproducible() {
        let pipeline = |x: &Array1<f64>| usize::from(x[0] > 0.0);
        let a = estimate_top2(pipeline, &array![0.1], 0.5, 100, &mut RngStream::derive(7, 1)).unwrap();
        let b = estimate_top2(pipeline, &array![0.1], 0.5, 100, &mut RngStream::derive(7, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn radius_oracle_value() {
        // frozen from the quantile oracle: (0.25/2) * 2 * 1.2815515655446004
        let r = certified_radius(0.9, 0.1, 0.25).unwrap();
        assert_abs_diff_eq!(r, 0.3203878913861501, epsilon = 1e-10);
    }

    #[test]
    fn radius_zero_at_tied_probabilities() {
        assert_eq!(certified_radius(0.4, 0.4, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn radius_is_linear_in_sigma() {
        let base = certified_radius(0.8, 0.15, 0.25).unwrap();
        let doubled = certified_radius(0.8, 0.15, 0.5).unwrap();
        assert_eq!(doubled, 2.0 * base);
    }

    #[test]
    fn radius_monotone_in_probabilities() {
        let r0 = certified_radius(0.7, 0.2, 0.25).unwrap();
        assert!(certified_radius(0.8, 0.2, 0.25).unwrap() > r0);
        assert!(certified_radius(0.7, 0.1, 0.25).unwrap() > r0);
    }

    #[test]
    fn radius_rejects_bad_inputs() {
        assert!(certified_radius(0.3, 0.6, 0.25).is_err());
        assert!(certified_radius(0.9, 0.1, 0.0).is_err());
        assert!(certified_radius(1.0, 0.0, 0.25).is_err()); // must clip first
    }

    #[test]
    fn clipping_keeps_quantiles_finite() {
        let n = 100;
        let pa = clip_frequency(1.0, n);
        let pb = clip_frequency(0.0, n);
        assert_eq!(pa, 1.0 - 1.0 / 200.0);
        assert_eq!(pb, 1.0 / 200.0);
        assert!(certified_radius(pa, pb, 0.25).unwrap().is_finite());
    }

    #[test]
    fn threshold_pipeline_matches_gaussian_cdf() {
        // pipeline thresholds at 0; smoothed pA at x equals phi(x/sigma)
        let pipeline = |v: &Array1<f64>| usize::from(v[0] > 0.0);
        let (x, sigma, n) = (0.3, 0.25, 10_000usize);
        let mut rng = RngStream::new(33);
        let est = estimate_top2(pipeline, &array![x], sigma, n, &mut rng).unwrap();
        assert_eq!(est.top_label, 1);
        let expected = std_normal_cdf(x / sigma);
        assert!(
            (est.p_top - expected).abs() < 3.0 / (n as f64).sqrt(),
            "pA {} vs phi {}",
            est.p_top,
            expected
        );
    }

    #[test]
    fn curve_starts_at_clean_accuracy_and_decreases() {
        let pipeline = |v: &Array1<f64>| usize::from(v[0] > 0.0);
        let inputs: Vec<Array1<f64>> = vec![array![0.6], array![-0.7], array![0.05], array![-0.02]];
        let labels = vec![1usize, 0, 1, 1];
        let radii = vec![0.0, 0.1, 0.2, 0.4, 0.8];
        let rng = RngStream::new(2);
        let (curve, points) = certified_accuracy_curve(
            pipeline,
            &inputs,
            &labels,
            0.25,
            200,
            &radii,
            CertifyMode::Empirical,
            &rng,
        )
        .unwrap();
        let clean = points.iter().filter(|p| p.correct).count() as f64 / points.len() as f64;
        assert_eq!(curve[0].1, clean);
        for w in curve.windows(2) {
            assert!(w[1].1 <= w[0].1);
        }
        for (_, v) in &curve {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn constant_correct_pipeline_certifies_up_to_clipped_radius() {
        let pipeline = |_: &Array1<f64>| 0usize;
        let inputs = vec![array![0.0], array![1.0]];
        let labels = vec![0usize, 0];
        let n = 100;
        let sigma = 0.25;
        // pA = 1 - 1/2n, pB = 1/2n after clipping
        let max_r = certified_radius(
            clip_frequency(1.0, n),
            clip_frequency(0.0, n),
            sigma,
        )
        .unwrap();
        let radii = vec![0.0, max_r * 0.99, max_r * 1.01];
        let rng = RngStream::new(5);
        let (curve, _) = certified_accuracy_curve(
            pipeline,
            &inputs,
            &labels,
            sigma,
            n,
            &radii,
            CertifyMode::Empirical,
            &rng,
        )
        .unwrap();
        assert_eq!(curve[0].1, 1.0);
        assert_eq!(curve[1].1, 1.0);
        assert_eq!(curve[2].1, 0.0);
    }

    #[test]
    fn hoeffding_mode_abstains_near_half() {
        let est = SmoothingEstimate {
            top_label: 1,
            runner_up: 0,
            p_top: 0.55,
            p_runner_up: 0.45,
            samples: 100,
            tie: false,
        };
        let point =
            certify_estimate(&est, 0.25, CertifyMode::Hoeffding { alpha: 0.05 }, 0, 1).unwrap();
        assert!(point.radius.is_none());
        let relaxed = certify_estimate(&est, 0.25, CertifyMode::Empirical, 0, 1).unwrap();
        assert!(relaxed.radius.is_some());
    }

    #[test]
    fn tie_abstains() {
        let est = SmoothingEstimate {
            top_label: 0,
            runner_up: 1,
            p_top: 0.5,
            p_runner_up: 0.5,
            samples: 10,
            tie: true,
        };
        let point = certify_estimate(&est, 0.25, CertifyMode::Empirical, 3, 0).unwrap();
        assert_eq!(point.radius, None);
        assert!(point.correct);
    }
}
