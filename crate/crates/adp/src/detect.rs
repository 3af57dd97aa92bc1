//! Score-norm detection of adversarial inputs and the dual noise policy.
//!
//! Natural inputs sit near modes of the learned density, where the score is
//! small; attacked inputs are displaced off-manifold and carry larger score
//! norms. Thresholding the norm therefore separates the two, and the verdict
//! picks the injection level for purification: full noise for inputs flagged
//! as attacked, reduced noise (factor `beta`) for inputs that look natural,
//! preserving their classifiable detail.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::models::MlpModel;
use crate::purify::{ensemble_predict, EnsemblePrediction, PurifyConfig};
use crate::numerics::RngStream;
use crate::{Error, Result};

/// Detection threshold and dual-noise parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// Score-norm threshold; norms strictly above it flag an attack.
    pub s_th: f64,
    /// Injection shrink factor for natural-looking inputs, in (0, 1].
    pub beta: f64,
    /// Full injection level used when an attack is flagged.
    pub base_sigma: f64,
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_th > 0.0) {
            return Err(Error::Domain(format!(
                "detection threshold must be positive, got {}",
                self.s_th
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Domain(format!(
                "beta must lie in (0, 1], got {}",
                self.beta
            )));
        }
        if !(self.base_sigma >= 0.0) {
            return Err(Error::Domain(format!(
                "base sigma must be non-negative, got {}",
                self.base_sigma
            )));
        }
        Ok(())
    }
}

/// Detection verdict for one input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Attacked,
    Natural,
}

/// Euclidean norm of the conditioned score at `x`.
pub fn score_norm(score: impl Fn(&Array1<f64>) -> Array1<f64>, x: &Array1<f64>) -> f64 {
    let s = score(x);
    s.dot(&s).sqrt()
}

/// Flag `x` as attacked iff its score norm strictly exceeds the threshold.
pub fn detect(
    score: impl Fn(&Array1<f64>) -> Array1<f64>,
    x: &Array1<f64>,
    cfg: &DetectConfig,
) -> Verdict {
    if score_norm(score, x) > cfg.s_th {
        Verdict::Attacked
    } else {
        Verdict::Natural
    }
}

/// Detect once, then run the purification ensemble with the verdict-selected
/// injection level: `base_sigma` when attacked, `beta * base_sigma` when
/// natural.
pub fn dual_noise_purify(
    score: impl Fn(&Array1<f64>) -> Array1<f64>,
    classifier: &MlpModel,
    x: &Array1<f64>,
    purify_cfg: &PurifyConfig,
    detect_cfg: &DetectConfig,
    rng: &RngStream,
) -> Result<(EnsemblePrediction, Verdict)> {
    detect_cfg.validate()?;
    let verdict = detect(&score, x, detect_cfg);
    let sigma = match verdict {
        Verdict::Attacked => detect_cfg.base_sigma,
        Verdict::Natural => detect_cfg.beta * detect_cfg.base_sigma,
    };
    let cfg = PurifyConfig {
        sigma,
        ..purify_cfg.clone()
    };
    let prediction = ensemble_predict(score, classifier, x, &cfg, rng)?;
    Ok((prediction, verdict))
}

/// Per-set binned score-norm counts over one shared bin grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges shared by every set.
    pub edges: Vec<f64>,
    /// `(set name, counts per bin)`; counts sum to the set size.
    pub sets: Vec<(String, Vec<usize>)>,
}

impl Histogram {
    /// CSV rows `set,bin_lo,bin_hi,count` with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("set,bin_lo,bin_hi,count\n");
        for (name, counts) in &self.sets {
            for (i, c) in counts.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    name,
                    self.edges[i],
                    self.edges[i + 1],
                    c
                ));
            }
        }
        out
    }
}

/// Histogram the score norms of several labeled sets (rows of each matrix)
/// over a shared equal-width grid spanning all sets.
pub fn score_norm_histogram(
    score: impl Fn(&Array1<f64>) -> Array1<f64>,
    sets: &[(&str, &Array2<f64>)],
    bins: usize,
) -> Result<Histogram> {
    if sets.is_empty() || sets.iter().any(|(_, m)| m.nrows() == 0) {
        return Err(Error::InsufficientData(
            "histogram needs at least one nonempty set".into(),
        ));
    }
    if bins == 0 {
        return Err(Error::Domain("histogram needs at least one bin".into()));
    }
    let norms: Vec<Vec<f64>> = sets
        .iter()
        .map(|(_, m)| {
            m.axis_iter(Axis(0))
                .map(|row| score_norm(&score, &row.to_owned()))
                .collect()
        })
        .collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for ns in &norms {
        for &v in ns {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo == hi {
        hi = lo + 1.0; // single-valued data still gets a well-formed grid
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut out_sets = Vec::with_capacity(sets.len());
    for ((name, _), ns) in sets.iter().zip(norms.iter()) {
        let mut counts = vec![0usize; bins];
        for &v in ns {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        out_sets.push((name.to_string(), counts));
    }
    Ok(Histogram {
        edges,
        sets: out_sets,
    })
}

/// Calibrate the detection threshold as a quantile (default caller choice:
/// 0.95) of held-out natural score norms.
pub fn calibrate_threshold(
    score: impl Fn(&Array1<f64>) -> Array1<f64>,
    natural: &Array2<f64>,
    quantile: f64,
) -> Result<f64> {
    if natural.nrows() == 0 {
        return Err(Error::InsufficientData(
            "threshold calibration needs natural samples".into(),
        ));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::Domain(format!(
            "quantile must lie in [0,1], got {quantile}"
        )));
    }
    let mut norms: Vec<f64> = natural
        .axis_iter(Axis(0))
        .map(|row| score_norm(&score, &row.to_owned()))
        .collect();
    norms.sort_by(|a, b| a.partial_cmp(b).expect("finite norms"));
    let idx = ((norms.len() as f64 - 1.0) * quantile).round() as usize;
    Ok(norms[idx])
}

/// Area under the ROC curve of the score-norm statistic separating attacked
/// (positive) from natural (negative) inputs; rank statistic with midrank
/// tie handling.
pub fn detection_auc(natural_norms: &[f64], attacked_norms: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = natural_norms
        .iter()
        .map(|&v| (v, false))
        .chain(attacked_norms.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite norms"));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0; // 1-based average rank
        for item in &all[i..j] {
            if item.1 {
                rank_sum += midrank;
            }
        }
        i = j;
    }
    let n_pos = attacked_norms.len() as f64;
    let n_neg = natural_norms.len() as f64;
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}
