//! Experiment configuration: JSON schema, validation, and resolution into
//! concrete attack/purification settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, ThreatModel};
use crate::numerics::{median_heuristic_sigma, BoxDomain, Norm};
use crate::purify::{EnsembleMode, PurifyConfig, StopRule};
use crate::{Error, Result};

use super::dataset::{gen_synthetic, Dataset};

/// Where the evaluation dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Path { path: PathBuf },
    Synthetic { synthetic: SyntheticSpec },
}

/// Parameters of a generated blob dataset. When `manifold_dims` is set the
/// blob centers are confined to that many leading coordinates and the
/// remaining coordinates carry only `off_plane_std` noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub blobs: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub manifold_dims: Option<usize>,
    #[serde(default)]
    pub off_plane_std: Option<f64>,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Dataset> {
        match self.manifold_dims {
            Some(m) => super::dataset::gen_manifold_blobs(
                self.blobs,
                self.dim,
                m,
                self.per_class,
                self.separation,
                self.noise_std,
                self.off_plane_std.unwrap_or(0.0),
                self.seed,
            ),
            None => gen_synthetic(
                self.blobs,
                self.dim,
                self.per_class,
                self.separation,
                self.noise_std,
                self.seed,
            ),
        }
    }
}

impl DatasetSource {
    pub fn resolve(&self, base_dir: &Path) -> Result<Dataset> {
        match self {
            DatasetSource::Path { path } => {
                let full = if path.is_absolute() {
                    path.clone()
                } else {
                    base_dir.join(path)
                };
                Dataset::load(&full)
            }
            DatasetSource::Synthetic { synthetic } => synthetic.generate(),
        }
    }
}

/// Attack selection for an evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// No attack; robust accuracy equals clean accuracy.
    None,
    /// Preprocessor-blind PGD on the bare classifier.
    Pgd,
    /// BPDA against the purified pipeline (EOT when `eot_samples > 1`).
    Bpda,
    /// Black-box SPSA against the full pipeline loss.
    Spsa,
    /// Joint classifier-gradient / negative-score attack.
    JointScore,
    /// Joint classifier-gradient / purification-displacement attack.
    JointFull,
    /// Alternating attack-then-purify accumulation.
    ApproxInput,
    /// PGD through one unrolled purification step.
    Unroll,
}

/// Attack section of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    pub kind: AttackKind,
    #[serde(default = "default_norm")]
    pub norm: Norm,
    pub epsilon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Per-iteration step size; absent means `2.5 * epsilon / steps`.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_one")]
    pub eot_samples: usize,
    #[serde(default)]
    pub eot_sigma: f64,
    #[serde(default = "default_half")]
    pub joint_weight: f64,
    #[serde(default = "default_spsa_queries")]
    pub spsa_queries: usize,
    #[serde(default = "default_spsa_perturb")]
    pub spsa_perturb: f64,
    /// First-step size for the unrolling attack.
    #[serde(default = "default_unroll_alpha0")]
    pub unroll_alpha0: f64,
    /// BPDA attacker replays the defender's recorded step sizes instead of
    /// recomputing them adaptively.
    #[serde(default)]
    pub exact_steps: bool,
}

fn default_norm() -> Norm {
    Norm::Linf
}
fn default_steps() -> usize {
    40
}
fn default_one() -> usize {
    1
}
fn default_half() -> f64 {
    0.5
}
fn default_spsa_queries() -> usize {
    1280
}
fn default_spsa_perturb() -> f64 {
    0.01
}
fn default_unroll_alpha0() -> f64 {
    0.1
}

impl AttackSection {
    pub fn null() -> Self {
        AttackSection {
            kind: AttackKind::None,
            norm: Norm::Linf,
            epsilon: 0.0,
            steps: default_steps(),
            step_size: None,
            eot_samples: 1,
            eot_sigma: 0.0,
            joint_weight: 0.5,
            spsa_queries: default_spsa_queries(),
            spsa_perturb: default_spsa_perturb(),
            unroll_alpha0: default_unroll_alpha0(),
            exact_steps: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "attack.epsilon: must be non-negative, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack.steps: must be at least 1".into()));
        }
        if self.eot_samples == 0 {
            return Err(Error::Config("attack.eot_samples: must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.joint_weight) {
            return Err(Error::Config(format!(
                "attack.joint_weight: must lie in [0,1], got {}",
                self.joint_weight
            )));
        }
        if self.spsa_queries < 2 || self.spsa_queries % 2 != 0 {
            return Err(Error::Config(format!(
                "attack.spsa_queries: must be even and >= 2, got {}",
                self.spsa_queries
            )));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::Config(format!(
                    "attack.step_size: must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// Concrete attack configuration for one sample.
    pub fn build(&self, seed: u64, box_domain: BoxDomain) -> AttackConfig {
        let threat = ThreatModel {
            norm: self.norm,
            epsilon: self.epsilon,
        };
        let step_size = self
            .step_size
            .unwrap_or(2.5 * self.epsilon / self.steps as f64);
        AttackConfig {
            threat,
            steps: self.steps,
            step_size,
            eot_samples: self.eot_samples,
            eot_sigma: self.eot_sigma,
            joint_weight: self.joint_weight,
            spsa_queries: self.spsa_queries,
            spsa_perturb: self.spsa_perturb,
            seed,
            box_domain,
        }
    }
}

/// How the injection noise level is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSpec {
    /// Median pairwise distance over sqrt(D), computed on the dataset.
    Median,
    /// No injection.
    Zero,
    /// Explicit level.
    Fixed(f64),
}

/// Purification section of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurifySection {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_sigma_spec")]
    pub sigma: SigmaSpec,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_tau")]
    pub tau_stop: f64,
    #[serde(default = "default_stop_rule")]
    pub stop_rule: StopRule,
    #[serde(default = "default_ensemble")]
    pub ensemble: EnsembleMode,
}

fn default_lambda() -> f64 {
    0.05
}
fn default_delta() -> f64 {
    1e-5
}
fn default_sigma_spec() -> SigmaSpec {
    SigmaSpec::Median
}
fn default_runs() -> usize {
    10
}
fn default_max_steps() -> usize {
    10
}
fn default_tau() -> f64 {
    1e-3
}
fn default_stop_rule() -> StopRule {
    StopRule::ScoreNorm
}
fn default_ensemble() -> EnsembleMode {
    EnsembleMode::PostSoftmax
}

impl Default for PurifySection {
    fn default() -> Self {
        PurifySection {
            lambda: default_lambda(),
            delta: default_delta(),
            sigma: default_sigma_spec(),
            runs: default_runs(),
            max_steps: default_max_steps(),
            tau_stop: default_tau(),
            stop_rule: default_stop_rule(),
            ensemble: default_ensemble(),
        }
    }
}

impl PurifySection {
    /// Resolve into a concrete configuration against a dataset (for the
    /// median sigma and the box domain).
    pub fn resolve(&self, dataset: &Dataset) -> Result<PurifyConfig> {
        let sigma = match self.sigma {
            SigmaSpec::Median => median_heuristic_sigma(&dataset.features.view())?,
            SigmaSpec::Zero => 0.0,
            SigmaSpec::Fixed(v) => {
                if !(v >= 0.0) {
                    return Err(Error::Config(format!(
                        "purify.sigma: fixed level must be non-negative, got {v}"
                    )));
                }
                v
            }
        };
        let cfg = PurifyConfig {
            lambda: self.lambda,
            delta: self.delta,
            sigma,
            runs: self.runs,
            max_steps: self.max_steps,
            tau_stop: self.tau_stop,
            stop_rule: self.stop_rule,
            ensemble: self.ensemble,
            box_domain: dataset.box_domain,
        };
        cfg.validate()
            .map_err(|e| Error::Config(format!("purify: {e}")))?;
        Ok(cfg)
    }
}

/// Full evaluation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub classifier: PathBuf,
    pub score_model: PathBuf,
    #[serde(default = "default_sample_cap")]
    pub sample_cap: usize,
    pub attack: AttackSection,
    #[serde(default)]
    pub purify: PurifySection,
}

fn default_sample_cap() -> usize {
    200
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_cap == 0 {
            return Err(Error::Config("sample_cap: must be at least 1".into()));
        }
        self.attack.validate()?;
        if let DatasetSource::Synthetic { synthetic } = &self.dataset {
            if synthetic.blobs < 2 {
                return Err(Error::Config(
                    "dataset.synthetic.blobs: must be at least 2".into(),
                ));
            }
            if synthetic.dim == 0 || synthetic.per_class == 0 {
                return Err(Error::Config(
                    "dataset.synthetic: dim and per_class must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> String {
        r#"{
            "name": "demo",
            "seed": 7,
            "dataset": {"synthetic": {"blobs": 4, "dim": 16, "per_class": 20,
                         "separation": 6.0, "noise_std": 0.3, "seed": 7}},
            "classifier": "classifier.ckpt",
            "score_model": "score.ckpt",
            "attack": {"kind": "pgd", "epsilon": 1.0},
            "purify": {"sigma": "median"}
        }"#
        .to_string()
    }

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_json(&sample_json()).unwrap();
        assert_eq!(cfg.attack.kind, AttackKind::Pgd);
        assert_eq!(cfg.attack.steps, 40);
        assert_eq!(cfg.sample_cap, 200);
        assert_eq!(cfg.purify.sigma, SigmaSpec::Median);
        let json = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn fixed_sigma_spec_round_trips() {
        let cfg_json = sample_json().replace("\"median\"", "{\"fixed\": 0.25}");
        let cfg = ExperimentConfig::from_json(&cfg_json).unwrap();
        assert_eq!(cfg.purify.sigma, SigmaSpec::Fixed(0.25));
    }

    #[test]
    fn validation_names_field() {
        let bad = sample_json().replace("\"epsilon\": 1.0", "\"epsilon\": -1.0");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config(msg)) => assert!(msg.contains("attack.epsilon"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn attack_builds_default_step_size() {
        let cfg = ExperimentConfig::from_json(&sample_json()).unwrap();
        let attack = cfg.attack.build(1, BoxDomain::disabled());
        assert!((attack.step_size - 2.5 * 1.0 / 40.0).abs() < 1e-15);
    }

    #[test]
    fn purify_resolves_median_sigma() {
        let cfg = ExperimentConfig::from_json(&sample_json()).unwrap();
        let ds = match &cfg.dataset {
            DatasetSource::Synthetic { synthetic } => synthetic.generate().unwrap(),
            _ => unreachable!(),
        };
        let pc = cfg.purify.resolve(&ds).unwrap();
        let expected = median_heuristic_sigma(&ds.features.view()).unwrap();
        assert_eq!(pc.sigma, expected);
        assert!(pc.sigma > 0.0);
    }
}
