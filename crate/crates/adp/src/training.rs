//! Denoising-score-matching training across a noise schedule, plus
//! cross-entropy classifier training, both driven by Adam.
//!
//! The per-level objective is the denoising form
//! `E[ ||x~ + sigma^2 s(x~) - x||^2 / (2 sigma^4) ]` with `x~ = x + sigma z`,
//! `z ~ N(0, I)`, and `s` the noise-conditioned score `net(x~)/sigma`. The
//! multi-level objective weights each level by `sigma^2`, which equalizes the
//! per-level loss magnitudes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::models::{softmax_cross_entropy, MlpGrads, MlpModel, MlpSpec};
use crate::numerics::{max_pairwise_distance, RngStream};
use crate::{Error, Result};

/// Strictly decreasing positive noise levels `sigma_1 >= ... >= sigma_L > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    levels: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Domain("noise schedule must be nonempty".into()));
        }
        if levels.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Domain(format!(
                "noise levels must be positive: {levels:?}"
            )));
        }
        if levels.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Domain(format!(
                "noise levels must be non-increasing: {levels:?}"
            )));
        }
        Ok(NoiseSchedule { levels })
    }

    /// Geometric spacing from `sigma1` down to `sigma_l` in `count` levels.
    pub fn geometric(sigma1: f64, sigma_l: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Domain("schedule needs at least one level".into()));
        }
        if !(sigma_l > 0.0) || sigma1 < sigma_l {
            return Err(Error::Domain(format!(
                "need sigma1 >= sigma_l > 0, got sigma1={sigma1}, sigma_l={sigma_l}"
            )));
        }
        if count == 1 {
            return Self::new(vec![sigma1]);
        }
        let ratio = sigma_l / sigma1;
        let levels = (0..count)
            .map(|j| sigma1 * ratio.powf(j as f64 / (count - 1) as f64))
            .collect();
        Self::new(levels)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// The finest (smallest) level; the purifier and detector condition on it.
    pub fn finest(&self) -> f64 {
        *self.levels.last().unwrap()
    }

    pub fn coarsest(&self) -> f64 {
        self.levels[0]
    }
}

/// Coarsest schedule level from data: the maximum pairwise distance, so the
/// widest noise kernel bridges any two training points.
pub fn sigma1_from_data(data: &ArrayView2<'_, f64>) -> Result<f64> {
    max_pairwise_distance(data)
}

/// Adam hyperparameters; the defaults used throughout are
/// `lr = 0.001, (beta1, beta2) = (0.9, 0.999), eps = 1e-8`, no weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam accumulator state, shaped like the model parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    params: AdamParams,
    step: u64,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

impl AdamState {
    pub fn new(model: &MlpModel, params: AdamParams) -> Self {
        AdamState {
            params,
            step: 0,
            m_w: model.weights().iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            v_w: model.weights().iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            m_b: model.biases().iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            v_b: model.biases().iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update, applied to the model in place.
    pub fn step(&mut self, model: &mut MlpModel, grads: &MlpGrads) -> Result<()> {
        if grads.weights.len() != self.m_w.len() || grads.biases.len() != self.m_b.len() {
            return Err(Error::Shape("gradient layout does not match optimizer state".into()));
        }
        for (i, g) in grads.weights.iter().enumerate() {
            if g.raw_dim() != self.m_w[i].raw_dim() {
                return Err(Error::Shape(format!("weight gradient {i} has wrong shape")));
            }
        }
        for (i, g) in grads.biases.iter().enumerate() {
            if g.raw_dim() != self.m_b[i].raw_dim() {
                return Err(Error::Shape(format!("bias gradient {i} has wrong shape")));
            }
        }
        self.step += 1;
        let AdamParams { lr, beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..self.m_w.len() {
            let g = &grads.weights[i];
            self.m_w[i].zip_mut_with(g, |m, &gv| *m = beta1 * *m + (1.0 - beta1) * gv);
            self.v_w[i].zip_mut_with(g, |v, &gv| *v = beta2 * *v + (1.0 - beta2) * gv * gv);
        }
        for i in 0..self.m_b.len() {
            let g = &grads.biases[i];
            self.m_b[i].zip_mut_with(g, |m, &gv| *m = beta1 * *m + (1.0 - beta1) * gv);
            self.v_b[i].zip_mut_with(g, |v, &gv| *v = beta2 * *v + (1.0 - beta2) * gv * gv);
        }
        let (m_w, v_w, m_b, v_b) = (&self.m_w, &self.v_w, &self.m_b, &self.v_b);
        model.apply_update(|layer, is_weight, idx, value| {
            let (m, v) = if is_weight {
                (m_w[layer].as_slice().unwrap()[idx], v_w[layer].as_slice().unwrap()[idx])
            } else {
                (m_b[layer].as_slice().unwrap()[idx], v_b[layer].as_slice().unwrap()[idx])
            };
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            value - lr * m_hat / (v_hat.sqrt() + eps)
        });
        Ok(())
    }
}

/// Minibatch training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub schedule: NoiseSchedule,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64, seed: u64, schedule: NoiseSchedule) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        if !(lr > 0.0) {
            return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
        }
        Ok(TrainConfig { epochs, batch_size, lr, seed, schedule })
    }
}

/// Denoising loss and exact gradients for one batch at one level, with the
/// perturbations supplied explicitly (one standard-normal row per sample).
/// Freezing the noise makes the loss a deterministic function, which is what
/// finite-difference checks need.
pub fn dsm_loss_and_grad_with_noise(
    model: &MlpModel,
    batch: &ArrayView2<'_, f64>,
    sigma: f64,
    noise: &ArrayView2<'_, f64>,
) -> Result<(f64, MlpGrads)> {
    if sigma <= 0.0 {
        return Err(Error::Domain(format!("noise level must be positive, got {sigma}")));
    }
    if batch.dim() != noise.dim() {
        return Err(Error::Shape(format!(
            "batch {:?} and noise {:?} differ",
            batch.dim(),
            noise.dim()
        )));
    }
    let rows = batch.nrows();
    if rows == 0 {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let mut total = 0.0;
    let mut grads = MlpGrads::zeros_like(model);
    let inv = 1.0 / rows as f64;
    for (x, z) in batch.axis_iter(Axis(0)).zip(noise.axis_iter(Axis(0))) {
        let x = x.to_owned();
        let perturbed = &x + &(z.to_owned() * sigma);
        // residual of the denoiser: x~ + sigma^2 s(x~) - x with s = net/sigma
        let out = model.forward(&perturbed)?;
        let residual = &perturbed - &x + &(&out * sigma);
        let sq = residual.dot(&residual);
        total += sq / (2.0 * sigma.powi(4));
        // d/d(out) of the per-row loss = residual * sigma / sigma^4
        let upstream = residual * (1.0 / sigma.powi(3));
        let g = model.param_grad(&perturbed, &upstream)?;
        grads.scaled_add(inv, &g);
    }
    Ok((total * inv, grads))
}

/// Denoising loss over a batch with one fresh noise draw per row.
pub fn dsm_loss_and_grad(
    model: &MlpModel,
    batch: &ArrayView2<'_, f64>,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<(f64, MlpGrads)> {
    let noise = Array2::from_shape_fn(batch.dim(), |_| rng.next_gaussian());
    dsm_loss_and_grad_with_noise(model, batch, sigma, &noise.view())
}

/// Multi-level objective: `sum_j sigma_j^2 * loss_j`, independent noise per
/// level, all levels sharing the same batch rows.
pub fn ncsn_loss_and_grad(
    model: &MlpModel,
    batch: &ArrayView2<'_, f64>,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<(f64, MlpGrads)> {
    let mut total = 0.0;
    let mut grads = MlpGrads::zeros_like(model);
    for &sigma in schedule.levels() {
        let (loss, g) = dsm_loss_and_grad(model, batch, sigma, rng)?;
        let w = sigma * sigma;
        total += w * loss;
        grads.scaled_add(w, &g);
    }
    Ok((total, grads))
}

/// Outcome of a training run: the model plus the loss trajectory.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub holdout_initial: f64,
    pub holdout_final: f64,
}

/// Seeded shuffle + 90/10 split; the held-out tail tracks generalization.
fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::derive(seed, 0x5911);
    rng.shuffle(&mut idx);
    let holdout = (n / 10).max(1).min(n.saturating_sub(1));
    let train = idx[..n - holdout].to_vec();
    let held = idx[n - holdout..].to_vec();
    (train, held)
}

fn gather_rows(data: &ArrayView2<'_, f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), data.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&data.row(i));
    }
    out
}

/// Train a score network by minibatch Adam on the multi-level denoising
/// objective. Deterministic for a fixed config seed.
pub fn train_score(
    spec: MlpSpec,
    data: &ArrayView2<'_, f64>,
    config: &TrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    if data.nrows() == 0 {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if spec.input_dim() != data.ncols() || spec.output_dim() != data.ncols() {
        return Err(Error::Shape(format!(
            "score network must map D -> D with D = {}, spec is {:?}",
            data.ncols(),
            spec.dims
        )));
    }
    let mut init_rng = RngStream::derive(config.seed, 1);
    let mut model = MlpModel::init(spec, &mut init_rng);
    let mut adam = AdamState::new(&model, AdamParams { lr: config.lr, ..AdamParams::default() });

    let (train_idx, held_idx) = split_indices(data.nrows(), config.seed);
    let held = gather_rows(data, &held_idx);
    let mut eval_rng = RngStream::derive(config.seed, 2);
    let holdout_initial = ncsn_loss_and_grad(&model, &held.view(), &config.schedule, &mut eval_rng)?.0;

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng = RngStream::derive(config.seed, 1000 + epoch as u64);
        shuffle_rng.shuffle(&mut order);
        let mut noise_rng = RngStream::derive(config.seed, 2000 + epoch as u64);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = gather_rows(data, chunk);
            let (loss, grads) =
                ncsn_loss_and_grad(&model, &batch.view(), &config.schedule, &mut noise_rng)?;
            adam.step(&mut model, &grads)?;
            epoch_loss += loss;
            batches += 1.0;
        }
        epoch_losses.push(epoch_loss / batches);
    }

    let mut eval_rng = RngStream::derive(config.seed, 2);
    let holdout_final = ncsn_loss_and_grad(&model, &held.view(), &config.schedule, &mut eval_rng)?.0;
    Ok((
        model,
        TrainReport { epoch_losses, holdout_initial, holdout_final },
    ))
}

/// Train a classifier by minibatch Adam on softmax cross-entropy.
pub fn train_classifier(
    spec: MlpSpec,
    features: &ArrayView2<'_, f64>,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    if features.nrows() == 0 {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if features.nrows() != labels.len() {
        return Err(Error::Mismatch(format!(
            "{} rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if spec.input_dim() != features.ncols() {
        return Err(Error::Shape(format!(
            "classifier input width {} does not match data width {}",
            spec.input_dim(),
            features.ncols()
        )));
    }
    let classes = spec.output_dim();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index(format!("label {bad} out of range for {classes} classes")));
    }

    let mut init_rng = RngStream::derive(config.seed, 1);
    let mut model = MlpModel::init(spec, &mut init_rng);
    let mut adam = AdamState::new(&model, AdamParams { lr: config.lr, ..AdamParams::default() });

    let batch_loss = |model: &MlpModel, idx: &[usize]| -> Result<(f64, MlpGrads)> {
        let mut grads = MlpGrads::zeros_like(model);
        let mut total = 0.0;
        let inv = 1.0 / idx.len() as f64;
        for &i in idx {
            let x = features.row(i).to_owned();
            let logits = model.forward(&x)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, labels[i])?;
            total += loss;
            grads.scaled_add(inv, &model.param_grad(&x, &dlogits)?);
        }
        Ok((total * inv, grads))
    };

    let (train_idx, held_idx) = split_indices(features.nrows(), config.seed);
    let holdout_initial = batch_loss(&model, &held_idx)?.0;

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng = RngStream::derive(config.seed, 1000 + epoch as u64);
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (loss, grads) = batch_loss(&model, chunk)?;
            adam.step(&mut model, &grads)?;
            epoch_loss += loss;
            batches += 1.0;
        }
        epoch_losses.push(epoch_loss / batches);
    }

    let holdout_final = batch_loss(&model, &held_idx)?.0;
    Ok((
        model,
        TrainReport { epoch_losses, holdout_initial, holdout_final },
    ))
}

/// Fraction of rows whose argmax logit matches the label.
pub fn classifier_accuracy(
    model: &MlpModel,
    features: &ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<f64> {
    let mut hits = 0usize;
    for (row, &y) in features.axis_iter(Axis(0)).zip(labels.iter()) {
        let logits = model.forward(&row.to_owned())?;
        if crate::models::argmax(&logits) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Activation;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn geometric_schedule_interpolates() {
        let s = NoiseSchedule::geometric(1.0, 0.01, 3).unwrap();
        let l = s.levels();
        assert_abs_diff_eq!(l[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[1], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(l[2], 0.01, epsilon = 1e-15);
    }

    #[test]
    fn single_level_schedule() {
        let s = NoiseSchedule::geometric(0.5, 0.5, 1).unwrap();
        assert_eq!(s.levels(), &[0.5]);
    }

    #[test]
    fn schedule_rejects_increasing_order() {
        assert!(NoiseSchedule::geometric(0.01, 1.0, 3).is_err());
        assert!(NoiseSchedule::new(vec![0.1, 0.5]).is_err());
        assert!(NoiseSchedule::new(vec![0.1, 0.0]).is_err());
    }

    #[test]
    fn sigma1_is_max_pairwise() {
        let data = array![[0.0, 0.0], [3.0, 4.0]];
        assert_eq!(sigma1_from_data(&data.view()).unwrap(), 5.0);
        let degenerate = array![[1.0], [1.0]];
        assert_eq!(sigma1_from_data(&degenerate.view()).unwrap(), 0.0);
    }

    fn scalar_model(value: f64) -> MlpModel {
        MlpModel::from_parts(
            MlpSpec::new(vec![1, 1], Activation::Tanh).unwrap(),
            vec![array![[0.0]]],
            vec![array![value]],
        )
        .unwrap()
    }

    #[test]
    fn adam_first_step_matches_hand_rollout() {
        // theta = 0, g = 3: first bias-corrected step is -lr * g / (|g| + eps')
        let mut model = scalar_model(0.0);
        let mut adam = AdamState::new(&model, AdamParams::default());
        let grads = MlpGrads {
            weights: vec![array![[0.0]]],
            biases: vec![array![3.0]],
        };
        adam.step(&mut model, &grads).unwrap();
        let theta = model.biases()[0][0];
        assert_abs_diff_eq!(theta, -0.001 * 3.0 / (3.0 + 1e-8), epsilon = 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut model = scalar_model(0.7);
        let before = model.clone();
        let mut adam = AdamState::new(&model, AdamParams::default());
        let zeros = MlpGrads::zeros_like(&model);
        for _ in 0..5 {
            adam.step(&mut model, &zeros).unwrap();
        }
        assert_eq!(model, before);
    }

    #[test]
    fn adam_first_step_opposes_gradient_sign() {
        for g in [-4.0, -0.01, 0.3, 12.0] {
            let mut model = scalar_model(0.0);
            let mut adam = AdamState::new(&model, AdamParams::default());
            let grads = MlpGrads {
                weights: vec![array![[0.0]]],
                biases: vec![array![g]],
            };
            adam.step(&mut model, &grads).unwrap();
            let update = model.biases()[0][0];
            assert_eq!(update.signum(), -g.signum());
        }
    }

    /// A network that realizes the ideal denoiser for frozen noise: with
    /// raw output f(x~) = (x - x~)/sigma, the residual vanishes.
    #[test]
    fn perfect_denoiser_has_zero_loss() {
        // batch of one row x = b; noise z. Choose net(x~) = (x - x~)/sigma
        // via a linear layer: W = -I/sigma, bias = x/sigma.
        let sigma = 0.5;
        let x = 1.3;
        let model = MlpModel::from_parts(
            MlpSpec::new(vec![1, 1], Activation::Tanh).unwrap(),
            vec![array![[-1.0 / sigma]]],
            vec![array![x / sigma]],
        )
        .unwrap();
        let batch = array![[x]];
        let noise = array![[0.77]];
        let (loss, _) =
            dsm_loss_and_grad_with_noise(&model, &batch.view(), sigma, &noise.view()).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-24);
    }

    #[test]
    fn zero_model_loss_matches_noise_norm() {
        // zero net: residual = x~ - x = sigma * z; with z = (1, 0) the loss
        // is sigma^2 / (2 sigma^4).
        let sigma = 0.4;
        let model = MlpModel::from_parts(
            MlpSpec::new(vec![2, 2], Activation::Tanh).unwrap(),
            vec![Array2::zeros((2, 2))],
            vec![Array1::zeros(2)],
        )
        .unwrap();
        let batch = array![[0.2, -0.1]];
        let noise = array![[1.0, 0.0]];
        let (loss, _) =
            dsm_loss_and_grad_with_noise(&model, &batch.view(), sigma, &noise.view()).unwrap();
        assert_abs_diff_eq!(loss, 1.0 / (2.0 * sigma * sigma), epsilon = 1e-12);
    }

    #[test]
    fn dsm_rejects_nonpositive_sigma() {
        let model = scalar_model(0.0);
        let batch = array![[1.0]];
        let mut rng = RngStream::new(0);
        assert!(dsm_loss_and_grad(&model, &batch.view(), 0.0, &mut rng).is_err());
        assert!(dsm_loss_and_grad(&model, &batch.view(), -1.0, &mut rng).is_err());
    }

    #[test]
    fn dsm_gradients_match_finite_differences() {
        let mut rng = RngStream::new(3);
        let model = MlpModel::init(
            MlpSpec::new(vec![2, 6, 2], Activation::Tanh).unwrap(),
            &mut rng,
        );
        let batch = array![[0.4, -0.2], [1.1, 0.3], [-0.7, 0.9]];
        let noise = array![[0.3, -1.2], [0.5, 0.1], [-0.9, 0.4]];
        let sigma = 0.6;
        let (_, grads) =
            dsm_loss_and_grad_with_noise(&model, &batch.view(), sigma, &noise.view()).unwrap();

        let flat = model.flatten_params();
        let h = 1e-5;
        let mut fd = Vec::with_capacity(flat.len());
        for j in 0..flat.len() {
            let mut up = flat.clone();
            up[j] += h;
            let mut dn = flat.clone();
            dn[j] -= h;
            let lp = dsm_loss_and_grad_with_noise(
                &MlpModel::from_flat(model.spec().clone(), &up).unwrap(),
                &batch.view(),
                sigma,
                &noise.view(),
            )
            .unwrap()
            .0;
            let lm = dsm_loss_and_grad_with_noise(
                &MlpModel::from_flat(model.spec().clone(), &dn).unwrap(),
                &batch.view(),
                sigma,
                &noise.view(),
            )
            .unwrap()
            .0;
            fd.push((lp - lm) / (2.0 * h));
        }
        let mut flat_grads: Vec<f64> = Vec::new();
        for (w, b) in grads.weights.iter().zip(&grads.biases) {
            flat_grads.extend(w.iter());
            flat_grads.extend(b.iter());
        }
        for (a, b) in flat_grads.iter().zip(fd.iter()) {
            let scale = a.abs().max(b.abs()).max(1e-2);
            assert!((a - b).abs() / scale < 1e-5, "{a} vs fd {b}");
        }
    }

    #[test]
    fn ncsn_is_sigma_weighted_sum() {
        let mut rng = RngStream::new(8);
        let model = MlpModel::init(
            MlpSpec::new(vec![2, 4, 2], Activation::Tanh).unwrap(),
            &mut rng,
        );
        let batch = array![[0.1, 0.2], [0.6, -0.3]];
        let schedule = NoiseSchedule::new(vec![0.8, 0.2]).unwrap();

        // replay the same draws level by level
        let mut r1 = RngStream::derive(5, 9);
        let (total, _) = ncsn_loss_and_grad(&model, &batch.view(), &schedule, &mut r1).unwrap();

        let mut r2 = RngStream::derive(5, 9);
        let (l1, _) = dsm_loss_and_grad(&model, &batch.view(), 0.8, &mut r2).unwrap();
        let (l2, _) = dsm_loss_and_grad(&model, &batch.view(), 0.2, &mut r2).unwrap();
        assert_abs_diff_eq!(total, 0.64 * l1 + 0.04 * l2, epsilon = 1e-12);
    }

    #[test]
    fn ncsn_single_level_reduces_to_dsm() {
        let model = scalar_model(0.3);
        let batch = array![[0.5], [1.5]];
        let schedule = NoiseSchedule::new(vec![0.5]).unwrap();
        let mut r1 = RngStream::derive(4, 4);
        let (total, _) = ncsn_loss_and_grad(&model, &batch.view(), &schedule, &mut r1).unwrap();
        let mut r2 = RngStream::derive(4, 4);
        let (single, _) = dsm_loss_and_grad(&model, &batch.view(), 0.5, &mut r2).unwrap();
        assert_abs_diff_eq!(total, 0.25 * single, epsilon = 1e-15);
    }

    fn blob_data(seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = RngStream::new(seed);
        let n = 120;
        let mut feats = Array2::zeros((2 * n, 2));
        let mut labels = Vec::with_capacity(2 * n);
        for i in 0..2 * n {
            let class = i % 2;
            let center = if class == 0 { [-3.0, 0.0] } else { [3.0, 0.0] };
            feats[[i, 0]] = center[0] + 0.4 * rng.next_gaussian();
            feats[[i, 1]] = center[1] + 0.4 * rng.next_gaussian();
            labels.push(class);
        }
        (feats, labels)
    }

    #[test]
    fn classifier_separates_two_blobs() {
        let (feats, labels) = blob_data(17);
        let spec = MlpSpec::new(vec![2, 16, 2], Activation::Tanh).unwrap();
        let cfg = TrainConfig::new(
            30,
            16,
            0.01,
            7,
            NoiseSchedule::new(vec![1.0]).unwrap(),
        )
        .unwrap();
        let (model, report) = train_classifier(spec, &feats.view(), &labels, &cfg).unwrap();
        let acc = classifier_accuracy(&model, &feats.view(), &labels).unwrap();
        assert!(acc >= 0.99, "accuracy {acc}");
        assert!(report.holdout_final < report.holdout_initial);
    }

    #[test]
    fn single_class_dataset_is_trivially_learned() {
        let feats = array![[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [0.2, 0.1]];
        let labels = vec![0, 0, 0, 0];
        let spec = MlpSpec::new(vec![2, 4, 2], Activation::Tanh).unwrap();
        let cfg = TrainConfig::new(5, 2, 0.01, 1, NoiseSchedule::new(vec![1.0]).unwrap()).unwrap();
        let (model, _) = train_classifier(spec, &feats.view(), &labels, &cfg).unwrap();
        assert_eq!(classifier_accuracy(&model, &feats.view(), &labels).unwrap(), 1.0);
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let (feats, _) = blob_data(5);
        let spec = MlpSpec::new(vec![2, 8, 2], Activation::Tanh).unwrap();
        let cfg = TrainConfig::new(0, 16, 0.001, 11, NoiseSchedule::new(vec![0.5]).unwrap()).unwrap();
        let (trained, _) = train_score(spec.clone(), &feats.view(), &cfg).unwrap();
        let mut rng = RngStream::derive(11, 1);
        let init = MlpModel::init(spec, &mut rng);
        assert_eq!(trained, init);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (feats, labels) = blob_data(23);
        let spec = MlpSpec::new(vec![2, 8, 2], Activation::Tanh).unwrap();
        let cfg = TrainConfig::new(3, 16, 0.005, 99, NoiseSchedule::new(vec![0.5]).unwrap()).unwrap();
        let (a, _) = train_classifier(spec.clone(), &feats.view(), &labels, &cfg).unwrap();
        let (b, _) = train_classifier(spec.clone(), &feats.view(), &labels, &cfg).unwrap();
        assert_eq!(a, b);
        let (s1, _) = train_score(spec.clone(), &feats.view(), &cfg).unwrap();
        let (s2, _) = train_score(spec, &feats.view(), &cfg).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn score_training_loss_decreases_early() {
        let (feats, _) = blob_data(31);
        let spec = MlpSpec::new(vec![2, 16, 2], Activation::Tanh).unwrap();
        let cfg = TrainConfig::new(
            5,
            16,
            0.001,
            3,
            NoiseSchedule::geometric(2.0, 0.1, 4).unwrap(),
        )
        .unwrap();
        let (_, report) = train_score(spec, &feats.view(), &cfg).unwrap();
        for w in report.epoch_losses.windows(2) {
            assert!(
                w[1] <= w[0] * 1.02,
                "epoch losses increased: {:?}",
                report.epoch_losses
            );
        }
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
    }
}
