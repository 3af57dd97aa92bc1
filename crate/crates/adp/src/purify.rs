//! Purification by deterministic score-following.
//!
//! A purification run starts from a (possibly noise-injected) input and
//! repeatedly moves along the learned score field, which points toward the
//! data manifold:
//!
//! ```text
//! x_t = x_{t-1} + alpha_{t-1} * s(x_{t-1})
//! ```
//!
//! Step sizes come from a local probe: nudging the point by a tiny `delta`
//! along the score and measuring how much the score shrinks estimates the
//! local Gaussian width `c`, and the step `alpha = lambda * c` then contracts
//! the deviation from the local mode by a factor `(1 - lambda)` per step.
//! Runs stop early once the score norm (or the step size) falls below a
//! threshold. Predictions ensemble several independent noise-injected runs.
//! A stochastic Langevin update is included as the baseline it replaces.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::models::{argmax, softmax, MlpModel};
use crate::numerics::{BoxDomain, RngStream};
use crate::{Error, Result};

/// Which quantity the early-stopping threshold applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop when the score norm falls below the threshold.
    ScoreNorm,
    /// Stop when the adaptive step size falls below the threshold.
    StepSize,
}

/// How the ensemble combines per-run classifier outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Average raw logits.
    PreSoftmax,
    /// Average softmax probabilities (default).
    PostSoftmax,
    /// Average one-hot argmax votes.
    ArgmaxVote,
}

/// Everything that governs a purification run and its ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurifyConfig {
    /// Per-step contraction ratio target, in (0, 1).
    pub lambda: f64,
    /// Probe step for the curvature estimate.
    pub delta: f64,
    /// Injection noise standard deviation; 0 disables injection.
    pub sigma: f64,
    /// Number of independent purification runs in the ensemble.
    pub runs: usize,
    /// Maximum steps per run.
    pub max_steps: usize,
    /// Early-stopping threshold.
    pub tau_stop: f64,
    pub stop_rule: StopRule,
    pub ensemble: EnsembleMode,
    pub box_domain: BoxDomain,
}

impl Default for PurifyConfig {
    fn default() -> Self {
        PurifyConfig {
            lambda: 0.05,
            delta: 1e-5,
            sigma: 0.25,
            runs: 10,
            max_steps: 10,
            tau_stop: 1e-3,
            stop_rule: StopRule::ScoreNorm,
            ensemble: EnsembleMode::PostSoftmax,
            box_domain: BoxDomain::disabled(),
        }
    }
}

impl PurifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Domain(format!("lambda must be in (0,1), got {}", self.lambda)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Domain(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Domain(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.runs == 0 {
            return Err(Error::Domain("ensemble needs at least one run".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Domain("purification needs at least one step".into()));
        }
        if !(self.tau_stop >= 0.0) {
            return Err(Error::Domain(format!("tau_stop must be non-negative, got {}", self.tau_stop)));
        }
        Ok(())
    }
}

/// States, step sizes, and score norms of one purification run.
/// `step_sizes.len() == states.len() - 1` always holds.
#[derive(Debug, Clone)]
pub struct PurifyTrajectory {
    pub states: Vec<Array1<f64>>,
    pub step_sizes: Vec<f64>,
    pub score_norms: Vec<f64>,
    pub stopped_early: bool,
    /// Set when a degenerate curvature probe ended the run.
    pub degenerate: bool,
}

impl PurifyTrajectory {
    pub fn final_state(&self) -> &Array1<f64> {
        self.states.last().expect("trajectory holds at least x0")
    }

    pub fn steps_taken(&self) -> usize {
        self.step_sizes.len()
    }
}

/// Adaptive step size from the probe score.
///
/// With `s_probe = s(x + delta * s)`, the ratio `s . s_probe / ||s||^2`
/// measures how much the score shrinks along itself; the step
/// `lambda * delta / (1 - ratio)` equals `lambda * c` on a locally Gaussian
/// field of width `c` for any probe size. Fails with `DegenerateCurvature`
/// when the field is locally constant or expanding.
pub fn adaptive_step_size(
    s_t: &Array1<f64>,
    s_probe: &Array1<f64>,
    lambda: f64,
    delta: f64,
) -> Result<f64> {
    let norm_sq = s_t.dot(s_t);
    if norm_sq == 0.0 {
        return Err(Error::DegenerateCurvature);
    }
    let ratio = s_t.dot(s_probe) / norm_sq;
    let denom = 1.0 - ratio;
    if denom.abs() < 1e-12 {
        return Err(Error::DegenerateCurvature);
    }
    let alpha = lambda * delta / denom;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::DegenerateCurvature);
    }
    Ok(alpha)
}

/// Run deterministic score-following from `x0`.
///
/// Each iteration evaluates the score at the current state, applies the stop
/// rule, then updates with either the adaptive step size or the next entry of
/// `fixed_steps` when a manual schedule is supplied (the run ends when the
/// schedule is exhausted). A degenerate curvature probe ends the run
/// gracefully with the trajectory flagged. Box clamping applies after every
/// update when enabled.
pub fn deterministic_purify(
    score: impl Fn(&Array1<f64>) -> Array1<f64>,
    x0: &Array1<f64>,
    config: &PurifyConfig,
    fixed_steps: Option<&[f64]>,
) -> PurifyTrajectory {
    let mut traj = PurifyTrajectory {
        states: vec![x0.clone()],
        step_sizes: Vec::new(),
        score_norms: Vec::new(),
        stopped_early: false,
        degenerate: false,
    };
    let mut x = x0.clone();
    for t in 0..config.max_steps {
        let s = score(&x);
        let norm = s.dot(&s).sqrt();
        traj.score_norms.push(norm);
        if matches!(config.stop_rule, StopRule::ScoreNorm) && norm < config.tau_stop {
            traj.stopped_early = true;
            break;
        }
        let alpha = match fixed_steps {
            Some(schedule) => match schedule.get(t) {
                Some(&a) => a,
                None => {
                    traj.stopped_early = true;
                    break;
                }
            },
            None => {
                let probe = &x + &(&s * config.delta);
                match adaptive_step_size(&s, &score(&probe), config.lambda, config.delta) {
                    Ok(a) => a,
                    Err(_) => {
                        traj.stopped_early = true;
                        traj.degenerate = true;
                        break;
                    }
                }
            }
        };
        if matches!(config.stop_rule, StopRule::StepSize) && alpha < config.tau_stop {
            traj.stopped_early = true;
            break;
        }
        x = &x + &(&s * alpha);
        config.box_domain.clamp(&mut x);
        traj.states.push(x.clone());
        traj.step_sizes.push(alpha);
    }
    traj
}

/// One noise-injected purification run: `x0 = x + eps`, `eps ~ N(0, sigma^2 I)`,
/// clamped into the box, then deterministic updates. With `sigma = 0` the run
/// is bit-identical to [`deterministic_purify`] from `x`.
pub fn noisy_purify_run(
    score: impl Fn(&Array1<f64>) -> Array1<f64>,
    x: &Array1<f64>,
    config: &PurifyConfig,
    rng: &mut RngStream,
) -> Array1<f64> {
    let start = if config.sigma > 0.0 {
        let mut noisy =
            Array1::from_shape_fn(x.len(), |i| x[i] + config.sigma * rng.next_gaussian());
        config.box_domain.clamp(&mut noisy);
        noisy
    } else {
        x.clone()
    };
    deterministic_purify(score, &start, config, None)
        .states
        .pop()
        .expect("trajectory holds at least x0")
}

/// Ensemble prediction over independent purification runs.
#[derive(Debug, Clone)]
pub struct EnsemblePrediction {
    pub label: usize,
    /// Mean combined outputs per class (logits, probabilities, or votes
    /// depending on the ensemble mode).
    pub class_scores: Array1<f64>,
    /// Final state of every run, in run order.
    pub purified: Vec<Array1<f64>>,
}

/// Purify `x` in `S` independent runs on derived rng sub-streams and average
/// the classifier outputs. The combination is a symmetric mean, so the
/// prediction does not depend on run order; argmax ties break to the lowest
/// class index.
pub fn ensemble_predict(
    score: impl Fn(&Array1<f64>) -> Array1<f64>,
    classifier: &MlpModel,
    x: &Array1<f64>,
    config: &PurifyConfig,
    rng: &RngStream,
) -> Result<EnsemblePrediction> {
    config.validate()?;
    let classes = classifier.spec().output_dim();
    let mut acc = Array1::<f64>::zeros(classes);
    let mut purified = Vec::with_capacity(config.runs);
    for run in 0..config.runs {
        let mut stream = rng.substream(run as u64);
        let end = noisy_purify_run(&score, x, config, &mut stream);
        let logits = classifier.forward(&end)?;
        match config.ensemble {
            EnsembleMode::PreSoftmax => acc += &logits,
            EnsembleMode::PostSoftmax => acc += &softmax(&logits),
            EnsembleMode::ArgmaxVote => acc[argmax(&logits)] += 1.0,
        }
        purified.push(end);
    }
    acc.mapv_inplace(|v| v / config.runs as f64);
    Ok(EnsemblePrediction {
        label: argmax(&acc),
        class_scores: acc,
        purified,
    })
}

/// Stochastic Langevin baseline:
/// `x_t = x_{t-1} + (alpha/2) s(x_{t-1}) + sqrt(alpha) eps`, clamped per step.
/// The learned score stands in for the negative energy gradient.
pub fn langevin_purify(
    score: impl Fn(&Array1<f64>) -> Array1<f64>,
    x: &Array1<f64>,
    steps: usize,
    alpha: f64,
    rng: &mut RngStream,
    bounds: &BoxDomain,
) -> Array1<f64> {
    assert!(alpha >= 0.0, "langevin step size must be non-negative");
    let noise_scale = alpha.sqrt();
    let mut state = x.clone();
    for _ in 0..steps {
        let s = score(&state);
        let noise = Array1::from_shape_fn(state.len(), |_| rng.next_gaussian());
        state = &state + &(&s * (alpha / 2.0)) + &(&noise * noise_scale);
        bounds.clamp(&mut state);
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, MlpSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Analytic radial field s(x) = -(x - mu)/c: the score of N(mu, c I)
    /// up to the width convention used by the step-size derivation.
    fn radial(mu: Vec<f64>, c: f64) -> impl Fn(&Array1<f64>) -> Array1<f64> {
        let mu = Array1::from(mu);
        move |x: &Array1<f64>| (&mu - x) / c
    }

    fn cfg() -> PurifyConfig {
        PurifyConfig {
            sigma: 0.0,
            ..PurifyConfig::default()
        }
    }

    #[test]
    fn adaptive_step_on_radial_field() {
        let lambda = 0.05;
        for c in [0.1, 0.25, 1.0] {
            for delta in [1e-7, 1e-5, 1e-3] {
                let field = radial(vec![0.5, -0.2], c);
                let x = array![2.0, 1.0];
                let s = field(&x);
                let probe = &x + &(&s * delta);
                let alpha = adaptive_step_size(&s, &field(&probe), lambda, delta).unwrap();
                let expected = lambda * c;
                assert!(
                    (alpha - expected).abs() / expected < 1e-6,
                    "c={c} delta={delta}: {alpha} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn identical_probe_is_degenerate() {
        let s = array![1.0, 2.0];
        let err = adaptive_step_size(&s, &s, 0.05, 1e-5).unwrap_err();
        assert!(matches!(err, Error::DegenerateCurvature));
    }

    #[test]
    fn expanding_field_is_degenerate() {
        // probe score grows along s: denominator negative
        let s = array![1.0, 0.0];
        let probe = array![2.0, 0.0];
        assert!(adaptive_step_size(&s, &probe, 0.05, 1e-5).is_err());
    }

    #[test]
    fn zero_field_trajectory_is_constant() {
        let field = |_: &Array1<f64>| Array1::zeros(2);
        let x0 = array![0.3, -0.8];
        let traj = deterministic_purify(field, &x0, &cfg(), None);
        assert_eq!(traj.states.len(), 1);
        assert!(traj.stopped_early);
        assert_eq!(traj.final_state(), &x0);
        assert_eq!(traj.step_sizes.len(), traj.states.len() - 1);
    }

    #[test]
    fn radial_field_contracts_geometrically() {
        let mu = vec![1.0, -2.0, 0.5];
        let field = radial(mu.clone(), 0.25);
        let x0 = array![4.0, 3.0, -1.0];
        let config = cfg();
        let traj = deterministic_purify(&field, &x0, &config, None);
        assert_eq!(traj.steps_taken(), config.max_steps);
        let mu = Array1::from(mu);
        for w in traj.states.windows(2) {
            let d0 = (&w[0] - &mu).dot(&(&w[0] - &mu)).sqrt();
            let d1 = (&w[1] - &mu).dot(&(&w[1] - &mu)).sqrt();
            let ratio = d1 / d0;
            assert!(
                (ratio - (1.0 - config.lambda)).abs() < 1e-4,
                "contraction ratio {ratio}"
            );
        }
    }

    #[test]
    fn single_step_budget() {
        let field = radial(vec![0.0], 1.0);
        let config = PurifyConfig {
            max_steps: 1,
            ..cfg()
        };
        let traj = deterministic_purify(&field, &array![5.0], &config, None);
        assert_eq!(traj.steps_taken(), 1);
    }

    #[test]
    fn fixed_schedule_is_used_verbatim() {
        let field = radial(vec![0.0], 1.0);
        let schedule = [0.5, 0.25];
        let config = PurifyConfig {
            max_steps: 10,
            ..cfg()
        };
        let traj = deterministic_purify(&field, &array![8.0], &config, Some(&schedule));
        // ends when the schedule is exhausted
        assert_eq!(traj.step_sizes, vec![0.5, 0.25]);
        // x1 = 8 - 0.5*8 = 4; x2 = 4 - 0.25*4 = 3
        assert_abs_diff_eq!(traj.final_state()[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn step_size_stop_rule() {
        let field = radial(vec![0.0], 0.25);
        let config = PurifyConfig {
            stop_rule: StopRule::StepSize,
            tau_stop: 1.0, // adaptive step is lambda*c = 0.0125 < 1
            ..cfg()
        };
        let traj = deterministic_purify(&field, &array![5.0], &config, None);
        assert!(traj.stopped_early);
        assert_eq!(traj.steps_taken(), 0);
    }

    #[test]
    fn box_clamp_applies_per_step() {
        // field pushes strongly upward out of the box
        let field = |_: &Array1<f64>| array![1000.0];
        let config = PurifyConfig {
            box_domain: BoxDomain::unit(),
            max_steps: 3,
            ..cfg()
        };
        let traj = deterministic_purify(field, &array![0.5], &config, Some(&[1.0, 1.0, 1.0]));
        for state in &traj.states {
            assert!(state[0] >= 0.0 && state[0] <= 1.0);
        }
    }

    #[test]
    fn noisy_run_with_zero_sigma_is_deterministic_run() {
        let field = radial(vec![0.7, 0.1], 0.5);
        let x = array![2.0, -1.0];
        let config = cfg();
        let mut rng = RngStream::new(4);
        let noisy = noisy_purify_run(&field, &x, &config, &mut rng);
        let det = deterministic_purify(&field, &x, &config, None);
        assert_eq!(&noisy, det.final_state());
    }

    #[test]
    fn injection_clamps_start_into_box() {
        // huge sigma, tight box: the start state must be inside
        let calls = std::cell::RefCell::new(Vec::new());
        let field = |x: &Array1<f64>| {
            calls.borrow_mut().push(x.clone());
            Array1::zeros(1)
        };
        let config = PurifyConfig {
            sigma: 100.0,
            box_domain: BoxDomain::unit(),
            ..cfg()
        };
        let mut rng = RngStream::new(9);
        let _ = noisy_purify_run(&field, &array![0.9], &config, &mut rng);
        let first_seen = &calls.borrow()[0];
        assert!(first_seen[0] >= 0.0 && first_seen[0] <= 1.0);
    }

    #[test]
    fn noisy_run_is_seed_reproducible() {
        let field = radial(vec![0.0], 1.0);
        let config = PurifyConfig {
            sigma: 0.5,
            ..cfg()
        };
        let a = noisy_purify_run(&field, &array![1.0], &config, &mut RngStream::derive(3, 3));
        let b = noisy_purify_run(&field, &array![1.0], &config, &mut RngStream::derive(3, 3));
        assert_eq!(a, b);
    }

    fn identity_classifier(dim: usize) -> MlpModel {
        let eye = ndarray::Array2::eye(dim);
        MlpModel::from_parts(
            MlpSpec::new(vec![dim, dim], Activation::Tanh).unwrap(),
            vec![eye],
            vec![Array1::zeros(dim)],
        )
        .unwrap()
    }

    #[test]
    fn single_run_no_noise_matches_deterministic_endpoint() {
        let field = radial(vec![3.0, 0.0], 0.5);
        let classifier = identity_classifier(2);
        let config = PurifyConfig {
            runs: 1,
            sigma: 0.0,
            ..cfg()
        };
        let x = array![1.0, 0.2];
        let rng = RngStream::new(1);
        let pred = ensemble_predict(&field, &classifier, &x, &config, &rng).unwrap();
        let det = deterministic_purify(&field, &x, &config, None);
        let logits = classifier.forward(det.final_state()).unwrap();
        assert_eq!(pred.label, argmax(&logits));
        assert_eq!(&pred.purified[0], det.final_state());
    }

    #[test]
    fn ensemble_scores_are_run_order_invariant() {
        // recombine stored per-run outputs in shuffled order and compare
        let field = radial(vec![0.5, 0.5], 0.3);
        let classifier = identity_classifier(2);
        let config = PurifyConfig {
            runs: 6,
            sigma: 0.4,
            ..cfg()
        };
        let x = array![0.1, 0.9];
        let rng = RngStream::new(12);
        let pred = ensemble_predict(&field, &classifier, &x, &config, &rng).unwrap();

        let mut perm: Vec<usize> = (0..config.runs).collect();
        perm.reverse();
        let mut acc = Array1::<f64>::zeros(2);
        for &i in &perm {
            acc += &softmax(&classifier.forward(&pred.purified[i]).unwrap());
        }
        acc.mapv_inplace(|v| v / config.runs as f64);
        for (a, b) in acc.iter().zip(pred.class_scores.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(argmax(&acc), pred.label);
    }

    #[test]
    fn argmax_vote_mode_counts_votes() {
        let field = |_: &Array1<f64>| Array1::zeros(1);
        let classifier = MlpModel::from_parts(
            MlpSpec::new(vec![1, 2], Activation::Tanh).unwrap(),
            vec![array![[0.0], [1.0]]],
            vec![array![0.0, 1.0]],
        )
        .unwrap();
        let config = PurifyConfig {
            runs: 4,
            sigma: 0.0,
            ensemble: EnsembleMode::ArgmaxVote,
            ..cfg()
        };
        let pred =
            ensemble_predict(field, &classifier, &array![0.0], &config, &RngStream::new(0)).unwrap();
        // every run votes class 1
        assert_eq!(pred.label, 1);
        assert_eq!(pred.class_scores, array![0.0, 1.0]);
    }

    #[test]
    fn langevin_zero_alpha_is_identity() {
        let field = radial(vec![0.0, 0.0], 1.0);
        let x = array![1.5, -0.5];
        let mut rng = RngStream::new(7);
        let out = langevin_purify(&field, &x, 25, 0.0, &mut rng, &BoxDomain::disabled());
        assert_eq!(out, x);
    }

    #[test]
    fn langevin_is_seed_deterministic() {
        let field = radial(vec![0.0], 0.5);
        let x = array![2.0];
        let a = langevin_purify(&field, &x, 10, 0.01, &mut RngStream::derive(5, 1), &BoxDomain::disabled());
        let b = langevin_purify(&field, &x, 10, 0.01, &mut RngStream::derive(5, 1), &BoxDomain::disabled());
        assert_eq!(a, b);
    }

    #[test]
    fn langevin_drift_matches_deterministic_update_without_noise() {
        // one step, alpha chosen so alpha/2 equals the deterministic step
        let field = radial(vec![0.0], 1.0);
        let x = array![4.0];
        let s = field(&x);
        let alpha_det = 0.05; // lambda * c with c = 1
        let det_next = &x + &(&s * alpha_det);

        // zero-noise langevin: subtract the realized noise term
        let mut rng = RngStream::derive(8, 8);
        let noise: Array1<f64> = Array1::from_shape_fn(1, |_| rng.next_gaussian());
        let alpha_l = 2.0 * alpha_det;
        let mut rng2 = RngStream::derive(8, 8);
        let lang = langevin_purify(&field, &x, 1, alpha_l, &mut rng2, &BoxDomain::disabled());
        let drift_only = &lang - &(&noise * alpha_l.sqrt());
        assert_abs_diff_eq!(drift_only[0], det_next[0], epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = PurifyConfig::default();
        c.lambda = 1.0;
        assert!(c.validate().is_err());
        let mut c = PurifyConfig::default();
        c.runs = 0;
        assert!(c.validate().is_err());
        let mut c = PurifyConfig::default();
        c.delta = 0.0;
        assert!(c.validate().is_err());
        assert!(PurifyConfig::default().validate().is_ok());
    }
}
