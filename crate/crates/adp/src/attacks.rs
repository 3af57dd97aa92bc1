//! Attacks on the classifier and on the purification pipeline.
//!
//! The catalogue covers the threat levels a purification defense faces:
//!
//! - `pgd`: preprocessor-blind projected gradient ascent on the bare
//!   classifier (the attacker never sees the purifier).
//! - `bpda`: backward-pass differentiable approximation; the purifier is
//!   treated as the identity on the backward pass, so gradients are taken at
//!   the purified point but applied to the raw iterate. Optionally wrapped in
//!   EOT to average gradients over the defense's injection randomness.
//! - `spsa_attack`: black-box gradient estimation from paired finite
//!   differences along random sign directions.
//! - `joint_score_attack` / `joint_full_attack`: blend the classifier
//!   gradient with a term that counteracts purification (the negative score,
//!   or the purification displacement).
//! - `approximate_input_attack`: alternates gradient steps with purification,
//!   accumulating the attack on purified iterates.
//! - `one_step_unrolling_attack`: exact gradient through one unrolled
//!   purification step via a finite-difference score Jacobian.
//!
//! Every attack projects each iterate onto the threat ball intersected with
//! the box, so results satisfy the perturbation budget exactly.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::models::{argmax, softmax_cross_entropy, MlpModel};
use crate::numerics::{project_ball, BoxDomain, Norm, RngStream};
use crate::{Error, Result};

/// Norm ball defining the allowed perturbations around an input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub norm: Norm,
    pub epsilon: f64,
}

impl ThreatModel {
    pub fn linf(epsilon: f64) -> Self {
        ThreatModel {
            norm: Norm::Linf,
            epsilon,
        }
    }

    pub fn l2(epsilon: f64) -> Self {
        ThreatModel {
            norm: Norm::L2,
            epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Domain(format!(
                "threat epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn project(&self, x: &Array1<f64>, center: &Array1<f64>, bounds: &BoxDomain) -> Array1<f64> {
        project_ball(x, center, self.norm, self.epsilon, bounds)
    }
}

/// Attack hyperparameters shared across the catalogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub threat: ThreatModel,
    /// Attack iterations.
    pub steps: usize,
    /// Per-iteration step size along the (signed/normalized) direction.
    pub step_size: f64,
    /// Gradient samples per iteration for EOT wrapping; 1 disables EOT.
    pub eot_samples: usize,
    /// Std of extra Gaussian input noise per EOT sample; usually 0, with the
    /// averaged randomness coming from fresh purifier streams instead.
    pub eot_sigma: f64,
    /// Blend weight `w` for joint attacks, in [0, 1].
    pub joint_weight: f64,
    /// Loss-function queries per SPSA gradient estimate (two per direction).
    pub spsa_queries: usize,
    /// SPSA finite-difference radius.
    pub spsa_perturb: f64,
    pub seed: u64,
    pub box_domain: BoxDomain,
}

impl AttackConfig {
    /// Defaults: 40 iterations with step `2.5 eps / steps`, no EOT,
    /// `w = 0.5`, 1280 SPSA queries at radius 0.01.
    pub fn new(threat: ThreatModel) -> Self {
        let steps = 40;
        AttackConfig {
            threat,
            steps,
            step_size: 2.5 * threat.epsilon / steps as f64,
            eot_samples: 1,
            eot_sigma: 0.0,
            joint_weight: 0.5,
            spsa_queries: 1280,
            spsa_perturb: 0.01,
            seed: 0,
            box_domain: BoxDomain::disabled(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.threat.validate()?;
        if self.steps == 0 {
            return Err(Error::Domain("attack needs at least one step".into()));
        }
        if self.eot_samples == 0 {
            return Err(Error::Domain("EOT needs at least one sample".into()));
        }
        if !(0.0..=1.0).contains(&self.joint_weight) {
            return Err(Error::Domain(format!(
                "joint weight must lie in [0,1], got {}",
                self.joint_weight
            )));
        }
        if self.spsa_queries < 2 || self.spsa_queries % 2 != 0 {
            return Err(Error::Domain(format!(
                "SPSA query count must be even and >= 2, got {}",
                self.spsa_queries
            )));
        }
        Ok(())
    }
}

/// Outcome of one attack on one sample.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_adv: Array1<f64>,
    /// Whether the attacked model mislabels `x_adv`.
    pub success: bool,
    /// Model/loss evaluations consumed.
    pub queries: usize,
    pub loss_trace: Vec<f64>,
}

/// Elementwise sign with sign(0) = 0.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn normalize(v: &Array1<f64>) -> Array1<f64> {
    let norm = v.dot(v).sqrt();
    if norm > 0.0 {
        v / norm
    } else {
        Array1::zeros(v.len())
    }
}

/// Ascend `direction` by one step and project back into the threat ball
/// around `center`. L-inf threats take sign steps, L2 threats normalized
/// gradient steps.
fn attack_step(
    x: &Array1<f64>,
    direction: &Array1<f64>,
    center: &Array1<f64>,
    cfg: &AttackConfig,
) -> Array1<f64> {
    let step = match cfg.threat.norm {
        Norm::Linf => direction.mapv(sign) * cfg.step_size,
        Norm::L2 => normalize(direction) * cfg.step_size,
    };
    cfg.threat.project(&(x + &step), center, &cfg.box_domain)
}

fn classifier_loss_grad(
    classifier: &MlpModel,
    x: &Array1<f64>,
    y: usize,
) -> Result<(f64, Array1<f64>)> {
    let logits = classifier.forward(x)?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, y)?;
    Ok((loss, classifier.input_grad(x, &dlogits)?))
}

/// Projected gradient ascent on the bare classifier.
pub fn pgd(classifier: &MlpModel, x: &Array1<f64>, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let mut cur = x.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (loss, grad) = classifier_loss_grad(classifier, &cur, y)?;
        trace.push(loss);
        cur = attack_step(&cur, &grad, x, cfg);
    }
    let label = argmax(&classifier.forward(&cur)?);
    Ok(AttackResult {
        x_adv: cur,
        success: label != y,
        queries: cfg.steps,
        loss_trace: trace,
    })
}

/// Mean of vectors; when every sample is identical the first is returned
/// directly, which keeps the mean exact (summation then division can round
/// even for identical inputs).
fn mean_vectors(samples: &[Array1<f64>]) -> Array1<f64> {
    let first = &samples[0];
    if samples[1..].iter().all(|s| s == first) {
        return first.clone();
    }
    let mut acc = Array1::zeros(first.len());
    for s in samples {
        acc += s;
    }
    acc / samples.len() as f64
}

/// Average of `grad_fn` over `n` Gaussian-perturbed copies of `x`
/// (`sigma = 0` evaluates all samples at `x` itself).
pub fn eot_gradient(
    mut grad_fn: impl FnMut(&Array1<f64>) -> Array1<f64>,
    x: &Array1<f64>,
    n: usize,
    sigma: f64,
    rng: &mut RngStream,
) -> Array1<f64> {
    assert!(n >= 1, "EOT needs at least one sample");
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let point = if sigma > 0.0 {
            Array1::from_shape_fn(x.len(), |i| x[i] + sigma * rng.next_gaussian())
        } else {
            x.clone()
        };
        samples.push(grad_fn(&point));
    }
    mean_vectors(&samples)
}

/// EOT average of (loss, gradient) pairs where each sample gets a fresh
/// derived rng stream for its own randomness (e.g. purifier noise).
fn eot_loss_grad(
    n: usize,
    sigma: f64,
    stream: &RngStream,
    mut sample_fn: impl FnMut(&Array1<f64>, &mut RngStream) -> Result<(f64, Array1<f64>)>,
    x: &Array1<f64>,
) -> Result<(f64, Array1<f64>)> {
    let mut grads = Vec::with_capacity(n);
    let mut loss_sum = 0.0;
    for i in 0..n {
        let mut sub = stream.substream(i as u64);
        let point = if sigma > 0.0 {
            Array1::from_shape_fn(x.len(), |j| x[j] + sigma * sub.next_gaussian())
        } else {
            x.clone()
        };
        let (loss, grad) = sample_fn(&point, &mut sub)?;
        loss_sum += loss;
        grads.push(grad);
    }
    Ok((loss_sum / n as f64, mean_vectors(&grads)))
}

/// BPDA: per iteration the current iterate is purified, the classifier
/// gradient is evaluated at the purified point, and the update is applied to
/// the raw iterate (identity backward approximation). With
/// `cfg.eot_samples > 1` the gradient averages over fresh purifier streams.
/// Success is judged on the purified pipeline.
pub fn bpda(
    mut purifier: impl FnMut(&Array1<f64>, &mut RngStream) -> Array1<f64>,
    classifier: &MlpModel,
    x: &Array1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let master = RngStream::derive(cfg.seed, 0xb9da);
    let mut cur = x.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    for it in 0..cfg.steps {
        let iter_stream = master.substream(it as u64);
        let (loss, grad) = eot_loss_grad(
            cfg.eot_samples,
            cfg.eot_sigma,
            &iter_stream,
            |point, sub| {
                let purified = purifier(point, sub);
                let logits = classifier.forward(&purified)?;
                let (loss, dlogits) = softmax_cross_entropy(&logits, y)?;
                Ok((loss, classifier.input_grad(&purified, &dlogits)?))
            },
            &cur,
        )?;
        trace.push(loss);
        cur = attack_step(&cur, &grad, x, cfg);
    }
    let mut eval_stream = master.substream(cfg.steps as u64);
    let purified = purifier(&cur, &mut eval_stream);
    let label = argmax(&classifier.forward(&purified)?);
    Ok(AttackResult {
        x_adv: cur,
        success: label != y,
        queries: cfg.steps * cfg.eot_samples,
        loss_trace: trace,
    })
}

/// Next power of two >= n (n >= 1).
fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Sylvester-Hadamard entry at (row, col): +1 when popcount(row & col) is
/// even.
fn hadamard_sign(row: usize, col: usize) -> f64 {
    if (row & col).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Black-box gradient estimate from paired finite differences along sign
/// directions: `mean_i [(f(x + c v_i) - f(x - c v_i)) / 2c * v_i]` with
/// `queries/2` directions `v_i` in `{-1, +1}^D`.
///
/// Directions are drawn as randomized-sign Hadamard rows in blocks of
/// `next_pow2(D)`: each direction is marginally a uniform sign vector, and a
/// complete block is orthogonal, which makes the estimator exact on
/// quadratics and lowers its variance generally compared to independent
/// draws.
pub fn spsa_gradient(
    mut loss_fn: impl FnMut(&Array1<f64>) -> f64,
    x: &Array1<f64>,
    queries: usize,
    c: f64,
    rng: &mut RngStream,
) -> Result<Array1<f64>> {
    if queries < 2 || queries % 2 != 0 {
        return Err(Error::Domain(format!(
            "SPSA query count must be even and >= 2, got {queries}"
        )));
    }
    if !(c > 0.0) {
        return Err(Error::Domain(format!(
            "SPSA perturbation radius must be positive, got {c}"
        )));
    }
    let dim = x.len();
    let block = next_pow2(dim);
    let directions = queries / 2;
    let mut estimate = Array1::<f64>::zeros(dim);
    let mut signs: Vec<f64> = Vec::new();
    for i in 0..directions {
        let row = i % block;
        if row == 0 {
            signs = (0..block)
                .map(|_| if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 })
                .collect();
        }
        let v = Array1::from_shape_fn(dim, |j| hadamard_sign(row, j) * signs[j]);
        let plus = loss_fn(&(x + &(&v * c)));
        let minus = loss_fn(&(x - &(&v * c)));
        let fd = (plus - minus) / (2.0 * c);
        estimate.scaled_add(fd, &v);
    }
    Ok(estimate / directions as f64)
}

/// SPSA attack against a black-box pipeline. Each query returns the loss to
/// ascend and the predicted label; success is judged on the final query.
pub fn spsa_attack(
    mut pipeline: impl FnMut(&Array1<f64>) -> (f64, usize),
    x: &Array1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let master = RngStream::derive(cfg.seed, 0x59a5);
    let mut cur = x.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut queries = 0usize;
    for it in 0..cfg.steps {
        let mut iter_stream = master.substream(it as u64);
        let grad = spsa_gradient(
            |p| pipeline(p).0,
            &cur,
            cfg.spsa_queries,
            cfg.spsa_perturb,
            &mut iter_stream,
        )?;
        queries += cfg.spsa_queries;
        cur = attack_step(&cur, &grad, x, cfg);
        trace.push(pipeline(&cur).0);
        queries += 1;
    }
    let (_, label) = pipeline(&cur);
    queries += 1;
    Ok(AttackResult {
        x_adv: cur,
        success: label != y,
        queries,
        loss_trace: trace,
    })
}

/// Joint score attack: blends the normalized classifier gradient with the
/// normalized negative score, so iterates both raise the loss and move
/// against the purifier's pull.
pub fn joint_score_attack(
    classifier: &MlpModel,
    score: impl Fn(&Array1<f64>) -> Array1<f64>,
    x: &Array1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let w = cfg.joint_weight;
    let mut cur = x.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (loss, grad) = classifier_loss_grad(classifier, &cur, y)?;
        trace.push(loss);
        let direction = if w == 1.0 {
            // pure classifier gradient reproduces the preprocessor-blind
            // attack exactly
            grad
        } else {
            let s = score(&cur);
            normalize(&grad) * w - normalize(&s) * (1.0 - w)
        };
        cur = attack_step(&cur, &direction, x, cfg);
    }
    let label = argmax(&classifier.forward(&cur)?);
    Ok(AttackResult {
        x_adv: cur,
        success: label != y,
        queries: cfg.steps,
        loss_trace: trace,
    })
}

/// Joint full attack: blends the normalized classifier gradient with the
/// normalized purification displacement `x - purify(x)`.
pub fn joint_full_attack(
    classifier: &MlpModel,
    mut purifier: impl FnMut(&Array1<f64>) -> Array1<f64>,
    x: &Array1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let w = cfg.joint_weight;
    let mut cur = x.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (loss, grad) = classifier_loss_grad(classifier, &cur, y)?;
        trace.push(loss);
        let direction = if w == 1.0 {
            grad
        } else {
            let displacement = &cur - &purifier(&cur);
            normalize(&grad) * w + normalize(&displacement) * (1.0 - w)
        };
        cur = attack_step(&cur, &direction, x, cfg);
    }
    let purified = purifier(&cur);
    let label = argmax(&classifier.forward(&purified)?);
    Ok(AttackResult {
        x_adv: cur,
        success: label != y,
        queries: 2 * cfg.steps,
        loss_trace: trace,
    })
}

/// Approximate-input attack: gradient steps are taken at purified iterates
/// and accumulated there, alternating attack and purification. Returns the
/// last pre-purification iterate, which stays inside the threat ball.
pub fn approximate_input_attack(
    classifier: &MlpModel,
    mut purifier: impl FnMut(&Array1<f64>) -> Array1<f64>,
    x: &Array1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let mut carried = x.clone();
    let mut last_pre = x.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (loss, grad) = classifier_loss_grad(classifier, &carried, y)?;
        trace.push(loss);
        last_pre = attack_step(&carried, &grad, x, cfg);
        carried = cfg
            .threat
            .project(&purifier(&last_pre), x, &cfg.box_domain);
    }
    let purified = purifier(&last_pre);
    let label = argmax(&classifier.forward(&purified)?);
    Ok(AttackResult {
        x_adv: last_pre,
        success: label != y,
        queries: 2 * cfg.steps,
        loss_trace: trace,
    })
}

/// Jacobian of a vector field by central finite differences, column by
/// column.
pub fn score_jacobian_fd(
    score: impl Fn(&Array1<f64>) -> Array1<f64>,
    x: &Array1<f64>,
    h: f64,
) -> Array2<f64> {
    let dim = x.len();
    let mut jac = Array2::zeros((dim, dim));
    for j in 0..dim {
        let mut xp = x.clone();
        xp[j] += h;
        let mut xm = x.clone();
        xm[j] -= h;
        let col = (score(&xp) - score(&xm)) / (2.0 * h);
        jac.column_mut(j).assign(&col);
    }
    jac
}

/// PGD through the classifier composed with one unrolled purification step
/// `x -> x + alpha0 * s(x)`. The backward pass is exact:
/// `(I + alpha0 J_s)^T u`, with the score Jacobian taken by central finite
/// differences (step 1e-5). `alpha0 = 0` reduces to the plain classifier
/// gradient.
pub fn one_step_unrolling_attack(
    classifier: &MlpModel,
    score: impl Fn(&Array1<f64>) -> Array1<f64>,
    x: &Array1<f64>,
    y: usize,
    cfg: &AttackConfig,
    alpha0: f64,
) -> Result<AttackResult> {
    cfg.validate()?;
    const JAC_FD_STEP: f64 = 1e-5;
    let mut cur = x.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let stepped = if alpha0 == 0.0 {
            cur.clone()
        } else {
            &cur + &(score(&cur) * alpha0)
        };
        let logits = classifier.forward(&stepped)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, y)?;
        trace.push(loss);
        let upstream = classifier.input_grad(&stepped, &dlogits)?;
        let grad = if alpha0 == 0.0 {
            upstream
        } else {
            let jac = score_jacobian_fd(&score, &cur, JAC_FD_STEP);
            &upstream + &(jac.t().dot(&upstream) * alpha0)
        };
        cur = attack_step(&cur, &grad, x, cfg);
    }
    let stepped = if alpha0 == 0.0 {
        cur.clone()
    } else {
        &cur + &(score(&cur) * alpha0)
    };
    let label = argmax(&classifier.forward(&stepped)?);
    Ok(AttackResult {
        x_adv: cur,
        success: label != y,
        queries: cfg.steps,
        loss_trace: trace,
    })
}
