//! Command-line front end.
//!
//! Subcommands: `gen-data`, `train-score`, `train-classifier`, `attack`,
//! `purify`, `evaluate`, `certify`, `detect`, `calibrate-threshold`. Every
//! subcommand accepts `--config <path>` with a JSON file supplying the same
//! fields; explicit flags override config values. Exit codes: 0 on success,
//! 1 on usage/config errors, 2 on runtime errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2};
use serde::Deserialize;

use crate::certify::{certified_accuracy_curve, CertifyMode};
use crate::detect::{calibrate_threshold, detect, score_norm, score_norm_histogram, DetectConfig, Verdict};
use crate::models::{argmax, conditioned_score, Activation, MlpSpec};
use crate::numerics::{Norm, RngStream};
use crate::purify::{deterministic_purify, ensemble_predict, noisy_purify_run};
use crate::training::{
    classifier_accuracy, sigma1_from_data, train_classifier, train_score, NoiseSchedule,
    TrainConfig,
};
use crate::{Error, Result};

use super::checkpoint::{load_checkpoint_as, save_checkpoint, CheckpointMeta, ModelKind};
use super::config::{AttackKind, AttackSection, ExperimentConfig, PurifySection, SigmaSpec};
use super::dataset::Dataset;
use super::evaluate::{attack_sample, run_evaluation, select_samples};

#[derive(Parser)]
#[command(
    name = "adp",
    about = "Score-based adversarial purification: train, attack, purify, certify, detect",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic blob dataset.
    GenData(GenDataArgs),
    /// Train a score network with denoising score matching.
    TrainScore(TrainScoreArgs),
    /// Train a classifier with cross-entropy.
    TrainClassifier(TrainClassifierArgs),
    /// Attack a dataset and write adversarial examples.
    Attack(AttackArgs),
    /// Purify a dataset and report pipeline predictions.
    Purify(PurifyArgs),
    /// Run a full clean/robust evaluation from a JSON experiment config.
    Evaluate(EvaluateArgs),
    /// Certified accuracy via randomized smoothing.
    Certify(CertifyArgs),
    /// Score-norm detection verdicts and histograms.
    Detect(DetectArgs),
    /// Calibrate the detection threshold on natural data.
    CalibrateThreshold(CalibrateArgs),
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Cmd::GenData(a) => dispatch(a.resolve(), gen_data_exec),
        Cmd::TrainScore(a) => dispatch(a.resolve(), train_score_exec),
        Cmd::TrainClassifier(a) => dispatch(a.resolve(), train_classifier_exec),
        Cmd::Attack(a) => dispatch(a.resolve(), attack_exec),
        Cmd::Purify(a) => dispatch(a.resolve(), purify_exec),
        Cmd::Evaluate(a) => dispatch(a.resolve(), evaluate_exec),
        Cmd::Certify(a) => dispatch(a.resolve(), certify_exec),
        Cmd::Detect(a) => dispatch(a.resolve(), detect_exec),
        Cmd::CalibrateThreshold(a) => dispatch(a.resolve(), calibrate_exec),
    };
    match outcome {
        Ok(()) => 0,
        Err(Exit::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Exit::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

enum Exit {
    Usage(String),
    Runtime(String),
}

fn dispatch<P>(resolved: Result<P>, exec: fn(P) -> Result<()>) -> std::result::Result<(), Exit> {
    let params = resolved.map_err(|e| Exit::Usage(e.to_string()))?;
    exec(params).map_err(|e| Exit::Runtime(e.to_string()))
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let raw = fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&raw)
                .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn need<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file)
        .ok_or_else(|| Error::Config(format!("missing required flag --{name}")))
}

fn parse_hidden(spec: &str) -> Result<Vec<usize>> {
    if spec.trim().is_empty() {
        return Ok(Vec::new());
    }
    spec.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("--hidden: invalid layer width {tok:?}")))
        })
        .collect()
}

fn parse_activation(name: &str) -> Result<Activation> {
    match name {
        "tanh" => Ok(Activation::Tanh),
        "softplus" => Ok(Activation::Softplus),
        other => Err(Error::Config(format!(
            "--activation: expected tanh or softplus, got {other:?}"
        ))),
    }
}

fn parse_norm(name: &str) -> Result<Norm> {
    match name {
        "linf" => Ok(Norm::Linf),
        "l2" => Ok(Norm::L2),
        other => Err(Error::Config(format!(
            "--norm: expected linf or l2, got {other:?}"
        ))),
    }
}

fn parse_kind(name: &str) -> Result<AttackKind> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| Error::Config(format!("--kind: unknown attack {name:?}")))
}

fn parse_sigma_spec(raw: &str) -> Result<SigmaSpec> {
    match raw {
        "median" => Ok(SigmaSpec::Median),
        "zero" => Ok(SigmaSpec::Zero),
        other => other
            .parse::<f64>()
            .map(SigmaSpec::Fixed)
            .map_err(|_| Error::Config(format!("--sigma: expected median, zero, or a number, got {other:?}"))),
    }
}

fn write_or_print(path: &Option<PathBuf>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, content)?;
            Ok(())
        }
        None => {
            println!("{content}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    blobs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    /// Confine blob centers to this many leading coordinates.
    #[arg(long)]
    manifold_dims: Option<usize>,
    /// Noise level outside the manifold coordinates.
    #[arg(long)]
    off_plane_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct GenDataFile {
    blobs: Option<usize>,
    dim: Option<usize>,
    per_class: Option<usize>,
    separation: Option<f64>,
    noise_std: Option<f64>,
    manifold_dims: Option<usize>,
    off_plane_std: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

struct GenDataParams {
    spec: super::config::SyntheticSpec,
    out: PathBuf,
}

impl GenDataArgs {
    fn resolve(self) -> Result<GenDataParams> {
        let file: GenDataFile = read_config(&self.config)?;
        Ok(GenDataParams {
            spec: super::config::SyntheticSpec {
                blobs: pick(self.blobs, file.blobs, 4),
                dim: pick(self.dim, file.dim, 32),
                per_class: pick(self.per_class, file.per_class, 200),
                separation: pick(self.separation, file.separation, 6.0),
                noise_std: pick(self.noise_std, file.noise_std, 0.3),
                seed: pick(self.seed, file.seed, 0),
                manifold_dims: self.manifold_dims.or(file.manifold_dims),
                off_plane_std: self.off_plane_std.or(file.off_plane_std),
            },
            out: need(self.out, file.out, "out")?,
        })
    }
}

fn gen_data_exec(p: GenDataParams) -> Result<()> {
    let ds = p.spec.generate()?;
    ds.save(&p.out)?;
    eprintln!(
        "wrote {} samples ({} classes, dim {}) to {}",
        ds.len(),
        ds.classes,
        ds.dim(),
        p.out.display()
    );
    Ok(())
}

// -------------------------------------------------------------- train-score

#[derive(Args)]
struct TrainScoreArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated hidden widths, e.g. "96,96".
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    levels: Option<usize>,
    /// Coarsest noise level; defaults to the max pairwise distance.
    #[arg(long)]
    sigma1: Option<f64>,
    #[arg(long)]
    sigma_finest: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct TrainScoreFile {
    data: Option<PathBuf>,
    hidden: Option<String>,
    activation: Option<String>,
    levels: Option<usize>,
    sigma1: Option<f64>,
    sigma_finest: Option<f64>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

struct TrainScoreParams {
    data: PathBuf,
    hidden: Vec<usize>,
    activation: Activation,
    levels: usize,
    sigma1: Option<f64>,
    sigma_finest: f64,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    out: PathBuf,
}

impl TrainScoreArgs {
    fn resolve(self) -> Result<TrainScoreParams> {
        let file: TrainScoreFile = read_config(&self.config)?;
        Ok(TrainScoreParams {
            data: need(self.data, file.data, "data")?,
            hidden: parse_hidden(&pick(self.hidden, file.hidden, "96,96".into()))?,
            activation: parse_activation(&pick(self.activation, file.activation, "tanh".into()))?,
            levels: pick(self.levels, file.levels, 10),
            sigma1: self.sigma1.or(file.sigma1),
            sigma_finest: pick(self.sigma_finest, file.sigma_finest, 0.01),
            epochs: pick(self.epochs, file.epochs, 60),
            batch: pick(self.batch, file.batch, 64),
            lr: pick(self.lr, file.lr, 0.001),
            seed: pick(self.seed, file.seed, 0),
            out: need(self.out, file.out, "out")?,
        })
    }
}

fn train_score_exec(p: TrainScoreParams) -> Result<()> {
    let ds = Dataset::load(&p.data)?;
    let sigma1 = match p.sigma1 {
        Some(v) => v,
        None => sigma1_from_data(&ds.features.view())?,
    };
    if sigma1 <= 0.0 {
        return Err(Error::Domain(
            "coarsest noise level is zero; dataset rows are identical".into(),
        ));
    }
    let schedule = NoiseSchedule::geometric(sigma1, p.sigma_finest, p.levels)?;
    let mut dims = vec![ds.dim()];
    dims.extend(&p.hidden);
    dims.push(ds.dim());
    let spec = MlpSpec::new(dims, p.activation)?;
    let cfg = TrainConfig::new(p.epochs, p.batch, p.lr, p.seed, schedule.clone())?;
    let (model, report) = train_score(spec, &ds.features.view(), &cfg)?;
    let meta = CheckpointMeta {
        activation: p.activation,
        schedule: Some(schedule.levels().to_vec()),
        seed: p.seed,
        epochs: p.epochs,
    };
    save_checkpoint(&model, ModelKind::Score, &meta, &p.out)?;
    eprintln!(
        "trained score network for {} epochs; holdout loss {:.4} -> {:.4}; saved {}",
        p.epochs,
        report.holdout_initial,
        report.holdout_final,
        p.out.display()
    );
    Ok(())
}

// --------------------------------------------------------- train-classifier

#[derive(Args)]
struct TrainClassifierArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct TrainClassifierFile {
    data: Option<PathBuf>,
    hidden: Option<String>,
    activation: Option<String>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

struct TrainClassifierParams {
    data: PathBuf,
    hidden: Vec<usize>,
    activation: Activation,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    out: PathBuf,
}

impl TrainClassifierArgs {
    fn resolve(self) -> Result<TrainClassifierParams> {
        let file: TrainClassifierFile = read_config(&self.config)?;
        Ok(TrainClassifierParams {
            data: need(self.data, file.data, "data")?,
            hidden: parse_hidden(&pick(self.hidden, file.hidden, "32".into()))?,
            activation: parse_activation(&pick(self.activation, file.activation, "tanh".into()))?,
            epochs: pick(self.epochs, file.epochs, 40),
            batch: pick(self.batch, file.batch, 32),
            lr: pick(self.lr, file.lr, 0.01),
            seed: pick(self.seed, file.seed, 0),
            out: need(self.out, file.out, "out")?,
        })
    }
}

fn train_classifier_exec(p: TrainClassifierParams) -> Result<()> {
    let ds = Dataset::load(&p.data)?;
    let mut dims = vec![ds.dim()];
    dims.extend(&p.hidden);
    dims.push(ds.classes);
    let spec = MlpSpec::new(dims, p.activation)?;
    let schedule = NoiseSchedule::new(vec![1.0])?; // unused by the classifier loop
    let cfg = TrainConfig::new(p.epochs, p.batch, p.lr, p.seed, schedule)?;
    let (model, _) = train_classifier(spec, &ds.features.view(), &ds.labels, &cfg)?;
    let acc = classifier_accuracy(&model, &ds.features.view(), &ds.labels)?;
    let meta = CheckpointMeta {
        activation: p.activation,
        schedule: None,
        seed: p.seed,
        epochs: p.epochs,
    };
    save_checkpoint(&model, ModelKind::Classifier, &meta, &p.out)?;
    eprintln!(
        "trained classifier to {:.2}% training accuracy; saved {}",
        100.0 * acc,
        p.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- attack

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    score: Option<PathBuf>,
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    eot_samples: Option<usize>,
    #[arg(long)]
    eot_sigma: Option<f64>,
    #[arg(long)]
    joint_weight: Option<f64>,
    #[arg(long)]
    spsa_queries: Option<usize>,
    #[arg(long)]
    spsa_perturb: Option<f64>,
    #[arg(long)]
    unroll_alpha0: Option<f64>,
    #[arg(long)]
    exact_steps: bool,
    /// Injection level for the attacker's purifier simulation:
    /// median | zero | <number>.
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    sample_cap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path for the adversarial dataset.
    #[arg(long)]
    out_data: Option<PathBuf>,
    /// Output path for the summary JSON (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct AttackFile {
    data: Option<PathBuf>,
    classifier: Option<PathBuf>,
    score: Option<PathBuf>,
    kind: Option<String>,
    norm: Option<String>,
    epsilon: Option<f64>,
    steps: Option<usize>,
    step_size: Option<f64>,
    eot_samples: Option<usize>,
    eot_sigma: Option<f64>,
    joint_weight: Option<f64>,
    spsa_queries: Option<usize>,
    spsa_perturb: Option<f64>,
    unroll_alpha0: Option<f64>,
    exact_steps: Option<bool>,
    sigma: Option<String>,
    sample_cap: Option<usize>,
    seed: Option<u64>,
    out_data: Option<PathBuf>,
    out: Option<PathBuf>,
}

struct AttackParams {
    data: PathBuf,
    classifier: PathBuf,
    score: Option<PathBuf>,
    section: AttackSection,
    sigma: SigmaSpec,
    sample_cap: usize,
    seed: u64,
    out_data: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl AttackArgs {
    fn resolve(self) -> Result<AttackParams> {
        let file: AttackFile = read_config(&self.config)?;
        let kind = parse_kind(&pick(self.kind, file.kind, "pgd".into()))?;
        let norm = parse_norm(&pick(self.norm, file.norm, "linf".into()))?;
        let section = AttackSection {
            kind,
            norm,
            epsilon: need(self.epsilon, file.epsilon, "epsilon")?,
            steps: pick(self.steps, file.steps, 40),
            step_size: self.step_size.or(file.step_size),
            eot_samples: pick(self.eot_samples, file.eot_samples, 1),
            eot_sigma: pick(self.eot_sigma, file.eot_sigma, 0.0),
            joint_weight: pick(self.joint_weight, file.joint_weight, 0.5),
            spsa_queries: pick(self.spsa_queries, file.spsa_queries, 1280),
            spsa_perturb: pick(self.spsa_perturb, file.spsa_perturb, 0.01),
            unroll_alpha0: pick(self.unroll_alpha0, file.unroll_alpha0, 0.1),
            exact_steps: self.exact_steps || file.exact_steps.unwrap_or(false),
        };
        section.validate()?;
        let needs_score = !matches!(kind, AttackKind::None | AttackKind::Pgd);
        let score = self.score.or(file.score);
        if needs_score && score.is_none() {
            return Err(Error::Config(
                "missing required flag --score (this attack simulates the purifier)".into(),
            ));
        }
        Ok(AttackParams {
            data: need(self.data, file.data, "data")?,
            classifier: need(self.classifier, file.classifier, "classifier")?,
            score,
            section,
            sigma: parse_sigma_spec(&pick(self.sigma, file.sigma, "median".into()))?,
            sample_cap: pick(self.sample_cap, file.sample_cap, 200),
            seed: pick(self.seed, file.seed, 0),
            out_data: self.out_data.or(file.out_data),
            out: self.out.or(file.out),
        })
    }
}

fn attack_exec(p: AttackParams) -> Result<()> {
    let ds = Dataset::load(&p.data)?;
    let classifier = load_checkpoint_as(&p.classifier, ModelKind::Classifier)?;
    let (score_model, sigma_finest) = match &p.score {
        Some(path) => {
            let ckpt = load_checkpoint_as(path, ModelKind::Score)?;
            let finest = ckpt.meta.noise_schedule()?.finest();
            (Some(ckpt.model), finest)
        }
        None => (None, 1.0),
    };
    // a dummy D->D zero score stands in when the attack never touches it
    let fallback = crate::models::MlpModel::from_flat(
        MlpSpec::new(vec![ds.dim(), ds.dim()], Activation::Tanh)?,
        &vec![0.0; ds.dim() * ds.dim() + ds.dim()],
    )?;
    let score_ref = score_model.as_ref().unwrap_or(&fallback);
    let purify_section = PurifySection {
        sigma: p.sigma,
        ..PurifySection::default()
    };
    let purify_cfg = purify_section.resolve(&ds)?;

    let chosen = select_samples(ds.len(), p.sample_cap, p.seed);
    let seed_root = RngStream::derive(p.seed, 0xa77a);
    let mut adv_rows = Array2::zeros((chosen.len(), ds.dim()));
    let mut labels = Vec::with_capacity(chosen.len());
    let mut successes = 0usize;
    for (row, &idx) in chosen.iter().enumerate() {
        let x = ds.features.row(idx).to_owned();
        let y = ds.labels[idx];
        let attack_seed = seed_root.substream(idx as u64).next_u64();
        let result = attack_sample(
            &p.section,
            &classifier.model,
            score_ref,
            sigma_finest,
            &purify_cfg,
            &x,
            y,
            attack_seed,
        )?;
        successes += usize::from(result.success);
        adv_rows.row_mut(row).assign(&result.x_adv);
        labels.push(y);
    }
    if let Some(out_data) = &p.out_data {
        let adv = Dataset {
            features: adv_rows,
            labels: labels.clone(),
            classes: ds.classes,
            box_domain: ds.box_domain,
            name: format!("{}-adv", ds.name),
            seed: p.seed,
        };
        adv.save(out_data)?;
    }
    let summary = serde_json::json!({
        "attack": p.section,
        "samples": chosen.len(),
        "success_rate": successes as f64 / chosen.len() as f64,
        "adversarial_dataset": p.out_data.as_ref().map(|p| p.display().to_string()),
    });
    write_or_print(&p.out, &serde_json::to_string_pretty(&summary)?)
}

// ------------------------------------------------------------------- purify

#[derive(Args)]
struct PurifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    score: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    tau_stop: Option<f64>,
    #[arg(long)]
    sample_cap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path for the purified dataset.
    #[arg(long)]
    out_data: Option<PathBuf>,
    /// Output path for the summary JSON (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct PurifyFile {
    data: Option<PathBuf>,
    score: Option<PathBuf>,
    classifier: Option<PathBuf>,
    sigma: Option<String>,
    lambda: Option<f64>,
    delta: Option<f64>,
    runs: Option<usize>,
    max_steps: Option<usize>,
    tau_stop: Option<f64>,
    sample_cap: Option<usize>,
    seed: Option<u64>,
    out_data: Option<PathBuf>,
    out: Option<PathBuf>,
}

struct PurifyParams {
    data: PathBuf,
    score: PathBuf,
    classifier: Option<PathBuf>,
    section: PurifySection,
    sample_cap: usize,
    seed: u64,
    out_data: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl PurifyArgs {
    fn resolve(self) -> Result<PurifyParams> {
        let file: PurifyFile = read_config(&self.config)?;
        let section = PurifySection {
            lambda: pick(self.lambda, file.lambda, 0.05),
            delta: pick(self.delta, file.delta, 1e-5),
            sigma: parse_sigma_spec(&pick(self.sigma, file.sigma, "median".into()))?,
            runs: pick(self.runs, file.runs, 10),
            max_steps: pick(self.max_steps, file.max_steps, 10),
            tau_stop: pick(self.tau_stop, file.tau_stop, 1e-3),
            ..PurifySection::default()
        };
        Ok(PurifyParams {
            data: need(self.data, file.data, "data")?,
            score: need(self.score, file.score, "score")?,
            classifier: self.classifier.or(file.classifier),
            section,
            sample_cap: pick(self.sample_cap, file.sample_cap, 200),
            seed: pick(self.seed, file.seed, 0),
            out_data: self.out_data.or(file.out_data),
            out: self.out.or(file.out),
        })
    }
}

fn purify_exec(p: PurifyParams) -> Result<()> {
    let ds = Dataset::load(&p.data)?;
    let score_ckpt = load_checkpoint_as(&p.score, ModelKind::Score)?;
    let sigma_finest = score_ckpt.meta.noise_schedule()?.finest();
    let score = conditioned_score(&score_ckpt.model, sigma_finest)?;
    let classifier = match &p.classifier {
        Some(path) => Some(load_checkpoint_as(path, ModelKind::Classifier)?),
        None => None,
    };
    let purify_cfg = p.section.resolve(&ds)?;
    let chosen = select_samples(ds.len(), p.sample_cap, p.seed);
    let eval_root = RngStream::derive(p.seed, 0xea11);
    let mut purified_rows = Array2::zeros((chosen.len(), ds.dim()));
    let mut labels = Vec::with_capacity(chosen.len());
    let mut predictions = Vec::with_capacity(chosen.len());
    let mut hits = 0usize;
    for (row, &idx) in chosen.iter().enumerate() {
        let x = ds.features.row(idx).to_owned();
        let stream = eval_root.substream(idx as u64);
        let mut run_stream = stream.substream(0);
        let endpoint = noisy_purify_run(&score, &x, &purify_cfg, &mut run_stream);
        purified_rows.row_mut(row).assign(&endpoint);
        labels.push(ds.labels[idx]);
        if let Some(classifier) = &classifier {
            let pred = ensemble_predict(&score, &classifier.model, &x, &purify_cfg, &stream)?;
            hits += usize::from(pred.label == ds.labels[idx]);
            predictions.push(pred.label);
        }
    }
    if let Some(out_data) = &p.out_data {
        let purified = Dataset {
            features: purified_rows,
            labels: labels.clone(),
            classes: ds.classes,
            box_domain: ds.box_domain,
            name: format!("{}-purified", ds.name),
            seed: p.seed,
        };
        purified.save(out_data)?;
    }
    let mut summary = serde_json::json!({
        "samples": chosen.len(),
        "sigma": purify_cfg.sigma,
        "runs": purify_cfg.runs,
        "max_steps": purify_cfg.max_steps,
        "purified_dataset": p.out_data.as_ref().map(|p| p.display().to_string()),
    });
    if classifier.is_some() {
        summary["pipeline_accuracy"] =
            serde_json::json!(hits as f64 / chosen.len() as f64);
        summary["predictions"] = serde_json::json!(predictions);
    }
    write_or_print(&p.out, &serde_json::to_string_pretty(&summary)?)
}

// ----------------------------------------------------------------- evaluate

#[derive(Args)]
struct EvaluateArgs {
    /// Experiment JSON (required).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sample_cap: Option<usize>,
    /// Report path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

struct EvaluateParams {
    config: ExperimentConfig,
    base_dir: PathBuf,
    out: Option<PathBuf>,
}

impl EvaluateArgs {
    fn resolve(self) -> Result<EvaluateParams> {
        let path = self
            .config
            .ok_or_else(|| Error::Config("missing required flag --config".into()))?;
        let raw = fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config = ExperimentConfig::from_json(&raw)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(cap) = self.sample_cap {
            config.sample_cap = cap;
        }
        config.validate()?;
        let base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(EvaluateParams {
            config,
            base_dir,
            out: self.out,
        })
    }
}

fn evaluate_exec(p: EvaluateParams) -> Result<()> {
    let report = run_evaluation(&p.config, &p.base_dir)?;
    eprintln!(
        "evaluated {} samples in {:.1}s: clean {:.1}%, robust {:.1}%",
        report.sample_count,
        report.wall_time_secs,
        100.0 * report.clean_accuracy,
        100.0 * report.robust_accuracy
    );
    write_or_print(&p.out, &report.to_json()?)
}

// ------------------------------------------------------------------ certify

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Score checkpoint; when given, smoothing wraps the purified pipeline.
    #[arg(long)]
    score: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Noisy samples per input.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    radius_max: Option<f64>,
    #[arg(long)]
    radius_steps: Option<usize>,
    #[arg(long)]
    sample_cap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Hoeffding confidence parameter; raw empirical frequencies when absent.
    #[arg(long)]
    hoeffding_alpha: Option<f64>,
    /// Curve CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct CertifyFile {
    data: Option<PathBuf>,
    classifier: Option<PathBuf>,
    score: Option<PathBuf>,
    sigma: Option<f64>,
    samples: Option<usize>,
    radius_max: Option<f64>,
    radius_steps: Option<usize>,
    sample_cap: Option<usize>,
    seed: Option<u64>,
    hoeffding_alpha: Option<f64>,
    out: Option<PathBuf>,
}

struct CertifyParams {
    data: PathBuf,
    classifier: PathBuf,
    score: Option<PathBuf>,
    sigma: f64,
    samples: usize,
    radius_max: f64,
    radius_steps: usize,
    sample_cap: usize,
    seed: u64,
    mode: CertifyMode,
    out: Option<PathBuf>,
}

impl CertifyArgs {
    fn resolve(self) -> Result<CertifyParams> {
        let file: CertifyFile = read_config(&self.config)?;
        Ok(CertifyParams {
            data: need(self.data, file.data, "data")?,
            classifier: need(self.classifier, file.classifier, "classifier")?,
            score: self.score.or(file.score),
            sigma: pick(self.sigma, file.sigma, 0.25),
            samples: pick(self.samples, file.samples, 100),
            radius_max: pick(self.radius_max, file.radius_max, 1.0),
            radius_steps: pick(self.radius_steps, file.radius_steps, 20),
            sample_cap: pick(self.sample_cap, file.sample_cap, 100),
            seed: pick(self.seed, file.seed, 0),
            mode: match self.hoeffding_alpha.or(file.hoeffding_alpha) {
                Some(alpha) => CertifyMode::Hoeffding { alpha },
                None => CertifyMode::Empirical,
            },
            out: self.out.or(file.out),
        })
    }
}

fn certify_exec(p: CertifyParams) -> Result<()> {
    let ds = Dataset::load(&p.data)?;
    let classifier = load_checkpoint_as(&p.classifier, ModelKind::Classifier)?;
    let score_ckpt = match &p.score {
        Some(path) => Some(load_checkpoint_as(path, ModelKind::Score)?),
        None => None,
    };
    let chosen = select_samples(ds.len(), p.sample_cap, p.seed);
    let inputs: Vec<Array1<f64>> = chosen.iter().map(|&i| ds.features.row(i).to_owned()).collect();
    let labels: Vec<usize> = chosen.iter().map(|&i| ds.labels[i]).collect();
    let radii: Vec<f64> = (0..=p.radius_steps)
        .map(|i| p.radius_max * i as f64 / p.radius_steps as f64)
        .collect();
    let rng = RngStream::derive(p.seed, 0xce87);

    // the smoothing noise plays the injection role, so purification runs
    // deterministically from each noisy sample
    let curve = match &score_ckpt {
        Some(ckpt) => {
            let sigma_finest = ckpt.meta.noise_schedule()?.finest();
            let score = conditioned_score(&ckpt.model, sigma_finest)?;
            let purify_cfg = crate::purify::PurifyConfig {
                sigma: 0.0,
                box_domain: ds.box_domain,
                ..crate::purify::PurifyConfig::default()
            };
            let pipeline = |x: &Array1<f64>| {
                let traj = deterministic_purify(&score, x, &purify_cfg, None);
                argmax(&classifier.model.forward(traj.final_state()).expect("dims"))
            };
            certified_accuracy_curve(pipeline, &inputs, &labels, p.sigma, p.samples, &radii, p.mode, &rng)?
                .0
        }
        None => {
            let pipeline =
                |x: &Array1<f64>| argmax(&classifier.model.forward(x).expect("dims"));
            certified_accuracy_curve(pipeline, &inputs, &labels, p.sigma, p.samples, &radii, p.mode, &rng)?
                .0
        }
    };
    let mut csv = String::from("radius,certified_accuracy\n");
    for (r, acc) in &curve {
        csv.push_str(&format!("{r},{acc}\n"));
    }
    write_or_print(&p.out, csv.trim_end())
}

// ------------------------------------------------------------------- detect

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Natural dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Optional attacked dataset for side-by-side histograms.
    #[arg(long)]
    attacked: Option<PathBuf>,
    #[arg(long)]
    score: Option<PathBuf>,
    /// Detection threshold; calibrated from the natural set when omitted.
    #[arg(long)]
    s_th: Option<f64>,
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    sample_cap: Option<usize>,
    /// Histogram CSV path.
    #[arg(long)]
    out_histogram: Option<PathBuf>,
    /// Verdict JSON path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct DetectFile {
    data: Option<PathBuf>,
    attacked: Option<PathBuf>,
    score: Option<PathBuf>,
    s_th: Option<f64>,
    quantile: Option<f64>,
    beta: Option<f64>,
    bins: Option<usize>,
    sample_cap: Option<usize>,
    out_histogram: Option<PathBuf>,
    out: Option<PathBuf>,
}

struct DetectParams {
    data: PathBuf,
    attacked: Option<PathBuf>,
    score: PathBuf,
    s_th: Option<f64>,
    quantile: f64,
    beta: f64,
    bins: usize,
    sample_cap: usize,
    out_histogram: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl DetectArgs {
    fn resolve(self) -> Result<DetectParams> {
        let file: DetectFile = read_config(&self.config)?;
        Ok(DetectParams {
            data: need(self.data, file.data, "data")?,
            attacked: self.attacked.or(file.attacked),
            score: need(self.score, file.score, "score")?,
            s_th: self.s_th.or(file.s_th),
            quantile: pick(self.quantile, file.quantile, 0.95),
            beta: pick(self.beta, file.beta, 0.2),
            bins: pick(self.bins, file.bins, 30),
            sample_cap: pick(self.sample_cap, file.sample_cap, 400),
            out_histogram: self.out_histogram.or(file.out_histogram),
            out: self.out.or(file.out),
        })
    }
}

fn detect_exec(p: DetectParams) -> Result<()> {
    let natural = Dataset::load(&p.data)?;
    let attacked = match &p.attacked {
        Some(path) => Some(Dataset::load(path)?),
        None => None,
    };
    let ckpt = load_checkpoint_as(&p.score, ModelKind::Score)?;
    let sigma_finest = ckpt.meta.noise_schedule()?.finest();
    let score = conditioned_score(&ckpt.model, sigma_finest)?;

    let cap_rows = |ds: &Dataset| -> Array2<f64> {
        let take = p.sample_cap.min(ds.len());
        ds.features.slice(ndarray::s![..take, ..]).to_owned()
    };
    let natural_rows = cap_rows(&natural);
    let threshold = match p.s_th {
        Some(v) => v,
        None => calibrate_threshold(&score, &natural_rows, p.quantile)?,
    };
    let cfg = DetectConfig {
        s_th: threshold,
        beta: p.beta,
        base_sigma: 0.25,
    };
    cfg.validate()?;

    let verdicts = |rows: &Array2<f64>| -> (usize, usize) {
        let mut attacked_count = 0;
        for row in rows.rows() {
            if detect(&score, &row.to_owned(), &cfg) == Verdict::Attacked {
                attacked_count += 1;
            }
        }
        (attacked_count, rows.nrows())
    };
    let (nat_flagged, nat_total) = verdicts(&natural_rows);
    let mut summary = serde_json::json!({
        "threshold": threshold,
        "beta": p.beta,
        "natural": {"flagged_attacked": nat_flagged, "total": nat_total},
    });

    let mut sets: Vec<(&str, &Array2<f64>)> = vec![("natural", &natural_rows)];
    let attacked_rows = attacked.as_ref().map(cap_rows);
    if let Some(rows) = &attacked_rows {
        let (flagged, total) = verdicts(rows);
        summary["attacked"] = serde_json::json!({"flagged_attacked": flagged, "total": total});
        let nat_norms: Vec<f64> = natural_rows
            .rows()
            .into_iter()
            .map(|r| score_norm(&score, &r.to_owned()))
            .collect();
        let adv_norms: Vec<f64> = rows
            .rows()
            .into_iter()
            .map(|r| score_norm(&score, &r.to_owned()))
            .collect();
        summary["auc"] = serde_json::json!(crate::detect::detection_auc(&nat_norms, &adv_norms));
        sets.push(("attacked", rows));
    }
    if let Some(hist_path) = &p.out_histogram {
        let hist = score_norm_histogram(&score, &sets, p.bins)?;
        fs::write(hist_path, hist.to_csv())?;
    }
    write_or_print(&p.out, &serde_json::to_string_pretty(&summary)?)
}

// ------------------------------------------------------- calibrate-threshold

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    score: Option<PathBuf>,
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    sample_cap: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct CalibrateFile {
    data: Option<PathBuf>,
    score: Option<PathBuf>,
    quantile: Option<f64>,
    sample_cap: Option<usize>,
    out: Option<PathBuf>,
}

struct CalibrateParams {
    data: PathBuf,
    score: PathBuf,
    quantile: f64,
    sample_cap: usize,
    out: Option<PathBuf>,
}

impl CalibrateArgs {
    fn resolve(self) -> Result<CalibrateParams> {
        let file: CalibrateFile = read_config(&self.config)?;
        Ok(CalibrateParams {
            data: need(self.data, file.data, "data")?,
            score: need(self.score, file.score, "score")?,
            quantile: pick(self.quantile, file.quantile, 0.95),
            sample_cap: pick(self.sample_cap, file.sample_cap, 400),
            out: self.out.or(file.out),
        })
    }
}

fn calibrate_exec(p: CalibrateParams) -> Result<()> {
    let ds = Dataset::load(&p.data)?;
    let ckpt = load_checkpoint_as(&p.score, ModelKind::Score)?;
    let sigma_finest = ckpt.meta.noise_schedule()?.finest();
    let score = conditioned_score(&ckpt.model, sigma_finest)?;
    let take = p.sample_cap.min(ds.len());
    let rows = ds.features.slice(ndarray::s![..take, ..]).to_owned();
    let threshold = calibrate_threshold(&score, &rows, p.quantile)?;
    let summary = serde_json::json!({
        "threshold": threshold,
        "quantile": p.quantile,
        "samples": take,
    });
    write_or_print(&p.out, &serde_json::to_string_pretty(&summary)?)
}
