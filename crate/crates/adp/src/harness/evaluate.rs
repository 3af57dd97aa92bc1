//! Experiment orchestration: attack every selected sample, purify, and
//! report clean/robust accuracy with per-sample records.

use std::path::Path;
use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::Serialize;

use crate::attacks::{
    approximate_input_attack, bpda, joint_full_attack, joint_score_attack,
    one_step_unrolling_attack, pgd, spsa_attack, AttackResult,
};
use crate::detect::score_norm;
use crate::models::{argmax, conditioned_score, softmax_cross_entropy, MlpModel};
use crate::numerics::RngStream;
use crate::purify::{deterministic_purify, ensemble_predict, noisy_purify_run, PurifyConfig};
use crate::{Error, Result};

use super::checkpoint::{load_checkpoint_as, ModelKind};
use super::config::{AttackKind, AttackSection, ExperimentConfig};
use super::dataset::Dataset;

/// Per-sample evaluation record.
#[derive(Debug, Clone, Serialize)]
pub struct SampleRecord {
    pub index: usize,
    pub label: usize,
    /// Ensemble prediction on the clean input.
    pub clean_pred: usize,
    /// Bare-classifier prediction on the adversarial input.
    pub attacked_pred: usize,
    /// Ensemble prediction on the adversarial input.
    pub purified_pred: usize,
    pub attack_success: bool,
    pub score_norm_clean: f64,
    pub score_norm_attacked: f64,
}

/// Full evaluation outcome. Wall time is reported on stderr by the CLI and
/// excluded from the serialized report so reruns with the same seed are
/// byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub name: String,
    pub dataset: String,
    pub seed: u64,
    pub attack: AttackSection,
    pub purify_sigma: f64,
    pub purify_runs: usize,
    pub purify_max_steps: usize,
    pub sample_count: usize,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var("ADP_THREADS") {
        let n: usize = raw.parse().map_err(|_| {
            Error::Config(format!("ADP_THREADS: expected a positive integer, got {raw:?}"))
        })?;
        if n == 0 {
            return Err(Error::Config("ADP_THREADS: must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Run one attack kind against one sample. `purify_cfg` describes the
/// defense; attacks that simulate the defense use it with a single run.
#[allow(clippy::too_many_arguments)]
pub fn attack_sample(
    section: &AttackSection,
    classifier: &MlpModel,
    score_model: &MlpModel,
    sigma_finest: f64,
    purify_cfg: &PurifyConfig,
    x: &Array1<f64>,
    y: usize,
    attack_seed: u64,
) -> Result<AttackResult> {
    let score = conditioned_score(score_model, sigma_finest)?;
    let cfg = section.build(attack_seed, purify_cfg.box_domain);
    match section.kind {
        AttackKind::None => {
            let label = argmax(&classifier.forward(x)?);
            Ok(AttackResult {
                x_adv: x.clone(),
                success: label != y,
                queries: 1,
                loss_trace: Vec::new(),
            })
        }
        AttackKind::Pgd => pgd(classifier, x, y, &cfg),
        AttackKind::Bpda => {
            // the attacker simulates one purification run per gradient sample
            if section.exact_steps {
                // replay the defender's adaptive step sizes recorded on the
                // clean input
                let reference = deterministic_purify(&score, x, purify_cfg, None);
                let schedule = reference.step_sizes.clone();
                bpda(
                    |pt: &Array1<f64>, rng: &mut RngStream| {
                        let start = inject(pt, purify_cfg, rng);
                        deterministic_purify(&score, &start, purify_cfg, Some(&schedule))
                            .final_state()
                            .clone()
                    },
                    classifier,
                    x,
                    y,
                    &cfg,
                )
            } else {
                bpda(
                    |pt: &Array1<f64>, rng: &mut RngStream| {
                        noisy_purify_run(&score, pt, purify_cfg, rng)
                    },
                    classifier,
                    x,
                    y,
                    &cfg,
                )
            }
        }
        AttackKind::Spsa => {
            let query_rng = RngStream::derive(attack_seed, 0x5b0b);
            let counter = std::cell::Cell::new(0u64);
            spsa_attack(
                |pt: &Array1<f64>| {
                    let id = counter.get();
                    counter.set(id + 1);
                    let mut stream = query_rng.substream(id);
                    let purified = noisy_purify_run(&score, pt, purify_cfg, &mut stream);
                    let logits = classifier.forward(&purified).expect("pipeline dims");
                    let (loss, _) = softmax_cross_entropy(&logits, y).expect("label checked");
                    (loss, argmax(&logits))
                },
                x,
                y,
                &cfg,
            )
        }
        AttackKind::JointScore => joint_score_attack(classifier, &score, x, y, &cfg),
        AttackKind::JointFull => {
            let deterministic = no_injection(purify_cfg);
            joint_full_attack(
                classifier,
                |pt: &Array1<f64>| {
                    deterministic_purify(&score, pt, &deterministic, None)
                        .final_state()
                        .clone()
                },
                x,
                y,
                &cfg,
            )
        }
        AttackKind::ApproxInput => {
            let deterministic = no_injection(purify_cfg);
            approximate_input_attack(
                classifier,
                |pt: &Array1<f64>| {
                    deterministic_purify(&score, pt, &deterministic, None)
                        .final_state()
                        .clone()
                },
                x,
                y,
                &cfg,
            )
        }
        AttackKind::Unroll => {
            one_step_unrolling_attack(classifier, &score, x, y, &cfg, section.unroll_alpha0)
        }
    }
}

fn inject(x: &Array1<f64>, cfg: &PurifyConfig, rng: &mut RngStream) -> Array1<f64> {
    if cfg.sigma > 0.0 {
        let mut noisy = Array1::from_shape_fn(x.len(), |i| x[i] + cfg.sigma * rng.next_gaussian());
        cfg.box_domain.clamp(&mut noisy);
        noisy
    } else {
        x.clone()
    }
}

fn no_injection(cfg: &PurifyConfig) -> PurifyConfig {
    PurifyConfig {
        sigma: 0.0,
        ..cfg.clone()
    }
}

/// Deterministic sample selection: seeded shuffle, then the first `cap`.
pub fn select_samples(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::derive(seed, 0x5e1e);
    rng.shuffle(&mut idx);
    idx.truncate(cap.min(n));
    idx
}

/// Evaluate a resolved experiment (models and dataset already in memory).
pub fn evaluate_prepared(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    classifier: &MlpModel,
    score_model: &MlpModel,
    sigma_finest: f64,
    purify_cfg: &PurifyConfig,
) -> Result<EvaluationReport> {
    let start = Instant::now();
    dataset.validate()?;
    if classifier.spec().output_dim() < dataset.classes {
        return Err(Error::Config(format!(
            "classifier: has {} outputs but dataset declares {} classes",
            classifier.spec().output_dim(),
            dataset.classes
        )));
    }
    let chosen = select_samples(dataset.len(), cfg.sample_cap, cfg.seed);
    let score = conditioned_score(score_model, sigma_finest)?;
    let eval_root = RngStream::derive(cfg.seed, 0xea11);
    let seed_root = RngStream::derive(cfg.seed, 0xa77a);

    let pool = worker_pool()?;
    let records: Result<Vec<SampleRecord>> = pool.install(|| {
        chosen
            .par_iter()
            .map(|&idx| {
                let x = dataset.features.row(idx).to_owned();
                let y = dataset.labels[idx];
                let attack_seed = seed_root.substream(idx as u64).next_u64();
                let result = attack_sample(
                    &cfg.attack,
                    classifier,
                    score_model,
                    sigma_finest,
                    purify_cfg,
                    &x,
                    y,
                    attack_seed,
                )?;
                // the same evaluation stream serves the clean and attacked
                // ensembles, so a null attack reproduces the clean result
                // exactly
                let eval_stream = eval_root.substream(idx as u64);
                let clean = ensemble_predict(&score, classifier, &x, purify_cfg, &eval_stream)?;
                let purified =
                    ensemble_predict(&score, classifier, &result.x_adv, purify_cfg, &eval_stream)?;
                let attacked_pred = argmax(&classifier.forward(&result.x_adv)?);
                Ok(SampleRecord {
                    index: idx,
                    label: y,
                    clean_pred: clean.label,
                    attacked_pred,
                    purified_pred: purified.label,
                    attack_success: result.success,
                    score_norm_clean: score_norm(&score, &x),
                    score_norm_attacked: score_norm(&score, &result.x_adv),
                })
            })
            .collect()
    });
    let records = records?;
    let n = records.len() as f64;
    let clean_accuracy = records.iter().filter(|r| r.clean_pred == r.label).count() as f64 / n;
    let robust_accuracy =
        records.iter().filter(|r| r.purified_pred == r.label).count() as f64 / n;
    Ok(EvaluationReport {
        name: cfg.name.clone(),
        dataset: dataset.name.clone(),
        seed: cfg.seed,
        attack: cfg.attack.clone(),
        purify_sigma: purify_cfg.sigma,
        purify_runs: purify_cfg.runs,
        purify_max_steps: purify_cfg.max_steps,
        sample_count: records.len(),
        clean_accuracy,
        robust_accuracy,
        samples: records,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Resolve paths and run the experiment end to end.
pub fn run_evaluation(cfg: &ExperimentConfig, base_dir: &Path) -> Result<EvaluationReport> {
    cfg.validate()?;
    let dataset = cfg.dataset.resolve(base_dir)?;
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    };
    let classifier = load_checkpoint_as(&resolve(&cfg.classifier), ModelKind::Classifier)?;
    let score_ckpt = load_checkpoint_as(&resolve(&cfg.score_model), ModelKind::Score)?;
    let sigma_finest = score_ckpt.meta.noise_schedule()?.finest();
    let purify_cfg = cfg.purify.resolve(&dataset)?;
    evaluate_prepared(
        cfg,
        &dataset,
        &classifier.model,
        &score_ckpt.model,
        sigma_finest,
        &purify_cfg,
    )
}
