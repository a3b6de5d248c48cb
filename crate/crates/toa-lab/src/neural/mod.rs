//! Regression network for TOA: a shared convolutional feature extractor
//! and one fitting head per channel case, trained in two stages.
//!
//! Dimension schedule (input M × (1+N_RB) × 2):
//!   conv1 3×2 stride (2,1) pad (1,0) → M/2 × N_RB × 2, ReLU
//!   conv2 3×2 stride (2,2) pad (1,0) → M/4 × N_RB/2 × 2, ReLU
//!   flatten → M·N_RB/4 → fc 32 (ReLU) → fc 8 (ReLU) → fc 1 (linear)
//!
//! The scalar output is the TOA in nanoseconds relative to the feature
//! map's anchor; training minimizes the mean squared error in ns².
//! Stage 1 trains extractor and all heads jointly on mixed-environment
//! data; stage 2 freezes the extractor and fine-tunes one head, optionally
//! on a training set enlarged by perturbing the correlation observations
//! and re-extracting features.

pub mod layers;
pub mod tensor;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::channel::ChannelCase;
use crate::correlator::FeatureMap;
use crate::error::{Result, ToaError};
use layers::{relu_backward, relu_in_place, Conv2d, Linear};
use tensor::{Scalar, Tensor};

/// Samples per gradient chunk; the fixed-order reduction over chunks makes
/// batch gradients identical in sequential and parallel mode.
const GRAD_CHUNK: usize = 8;

pub fn case_index(case: ChannelCase) -> usize {
    match case {
        ChannelCase::Static => 0,
        ChannelCase::Epa5 => 1,
        ChannelCase::Eva5 => 2,
    }
}

/// Extractor output η.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<S> {
    pub values: Vec<S>,
}

/// One training record: the feature map plus its ground truth and scenario
/// tags. The anchor lives on the feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub feature_map: FeatureMap,
    pub toa_true_ns: f32,
    pub case: ChannelCase,
    pub snr_db: f32,
}

impl TrainSample {
    pub fn toa_true_s(&self) -> f64 {
        f64::from(self.toa_true_ns) * 1e-9
    }

    pub fn anchor(&self) -> i64 {
        self.feature_map.anchor
    }

    /// Regression target: TOA in ns relative to the anchor.
    pub fn target_rel_ns(&self, sample_period_s: f64) -> f64 {
        f64::from(self.toa_true_ns) - self.anchor() as f64 * sample_period_s * 1e9
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<S> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
    pub fc3: Linear<S>,
}

/// Extractor and per-case head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<S> {
    pub m: usize,
    pub n_rb: usize,
    pub conv1: Conv2d<S>,
    pub conv2: Conv2d<S>,
    /// Heads indexed by [`case_index`].
    pub heads: Vec<HeadParams<S>>,
    pub frozen_extractor: bool,
}

impl<S: Scalar> NetworkParams<S> {
    /// Tensors in serialization order; the first four belong to the
    /// extractor.
    pub const EXTRACTOR_TENSORS: usize = 4;

    pub fn flat_len(&self) -> usize {
        self.m * self.n_rb / 4
    }

    pub fn head(&self, case: ChannelCase) -> &HeadParams<S> {
        &self.heads[case_index(case)]
    }

    pub fn tensor_refs(&self) -> Vec<&Tensor<S>> {
        let mut refs = vec![
            &self.conv1.weights,
            &self.conv1.bias,
            &self.conv2.weights,
            &self.conv2.bias,
        ];
        for h in &self.heads {
            refs.extend([
                &h.fc1.weights,
                &h.fc1.bias,
                &h.fc2.weights,
                &h.fc2.bias,
                &h.fc3.weights,
                &h.fc3.bias,
            ]);
        }
        refs
    }

    pub fn tensor_refs_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut refs: Vec<&mut Tensor<S>> = vec![
            &mut self.conv1.weights,
            &mut self.conv1.bias,
            &mut self.conv2.weights,
            &mut self.conv2.bias,
        ];
        for h in &mut self.heads {
            refs.push(&mut h.fc1.weights);
            refs.push(&mut h.fc1.bias);
            refs.push(&mut h.fc2.weights);
            refs.push(&mut h.fc2.bias);
            refs.push(&mut h.fc3.weights);
            refs.push(&mut h.fc3.bias);
        }
        refs
    }

    pub fn zeros_like(&self) -> NetworkParams<S> {
        let mut out = self.clone();
        for t in out.tensor_refs_mut() {
            t.fill(S::ZERO);
        }
        out
    }

    fn add_assign(&mut self, other: &NetworkParams<S>) {
        let other_refs = other.tensor_refs();
        for (mine, theirs) in self.tensor_refs_mut().into_iter().zip(other_refs) {
            for (a, &b) in mine.data.iter_mut().zip(&theirs.data) {
                *a += b;
            }
        }
    }

    /// FNV-1a over the extractor parameter bit patterns; bit equality of
    /// θ_e is the stage-2 freeze contract.
    pub fn extractor_digest(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensor_refs().into_iter().take(Self::EXTRACTOR_TENSORS) {
            for v in &t.data {
                hash ^= v.to_bits_u64();
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash
    }
}

fn he_tensor<S: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            S::from_f64(z * std)
        })
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// He-initialized network for an M × (1+N_RB) × 2 feature map. Weights are
/// drawn from a seeded generator, biases start at zero.
pub fn init_network<S: Scalar>(m: usize, n_rb: usize, seed: u64) -> Result<NetworkParams<S>> {
    if m < 4 || m % 4 != 0 {
        return Err(ToaError::Shape(format!("M = {m} must be a multiple of 4")));
    }
    if n_rb < 2 || n_rb % 2 != 0 {
        return Err(ToaError::Shape(format!("N_RB = {n_rb} must be even")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv1 = Conv2d {
        weights: he_tensor(&[3, 2, 2, 2], 12, &mut rng),
        bias: Tensor::zeros(&[2]),
        stride: (2, 1),
        padding: (1, 0),
    };
    let conv2 = Conv2d {
        weights: he_tensor(&[3, 2, 2, 2], 12, &mut rng),
        bias: Tensor::zeros(&[2]),
        stride: (2, 2),
        padding: (1, 0),
    };
    if conv1.output_shape(&[m, 1 + n_rb, 2]) != [m / 2, n_rb, 2]
        || conv2.output_shape(&[m / 2, n_rb, 2]) != [m / 4, n_rb / 2, 2]
    {
        return Err(ToaError::Shape(format!(
            "dimension schedule unreachable for M = {m}, N_RB = {n_rb}"
        )));
    }
    let flat = m * n_rb / 4;
    let heads = (0..3)
        .map(|_| HeadParams {
            fc1: Linear {
                weights: he_tensor(&[flat, 32], flat, &mut rng),
                bias: Tensor::zeros(&[32]),
            },
            fc2: Linear {
                weights: he_tensor(&[32, 8], 32, &mut rng),
                bias: Tensor::zeros(&[8]),
            },
            fc3: Linear {
                weights: he_tensor(&[8, 1], 8, &mut rng),
                bias: Tensor::zeros(&[1]),
            },
        })
        .collect();
    Ok(NetworkParams {
        m,
        n_rb,
        conv1,
        conv2,
        heads,
        frozen_extractor: false,
    })
}

fn map_tensor<S: Scalar>(params: &NetworkParams<S>, map: &FeatureMap) -> Result<Tensor<S>> {
    if map.m != params.m || map.n_rb != params.n_rb {
        return Err(ToaError::Shape(format!(
            "feature map {}×{}×2 does not match network {}×{}×2",
            map.m,
            1 + map.n_rb,
            params.m,
            1 + params.n_rb
        )));
    }
    Ok(Tensor {
        shape: vec![map.m, 1 + map.n_rb, 2],
        data: map
            .planes
            .iter()
            .map(|&v| S::from_f64(f64::from(v)))
            .collect(),
    })
}

struct ExtractTrace<S> {
    input: Tensor<S>,
    hidden: Tensor<S>,
    eta: Vec<S>,
}

fn extract_trace<S: Scalar>(
    params: &NetworkParams<S>,
    map: &FeatureMap,
) -> Result<ExtractTrace<S>> {
    let input = map_tensor(params, map)?;
    let mut hidden = params.conv1.forward(&input);
    relu_in_place(&mut hidden.data);
    let mut out = params.conv2.forward(&hidden);
    relu_in_place(&mut out.data);
    Ok(ExtractTrace {
        input,
        hidden,
        eta: out.data,
    })
}

/// Run the feature extractor on one map.
pub fn extract<S: Scalar>(
    params: &NetworkParams<S>,
    map: &FeatureMap,
) -> Result<FeatureVector<S>> {
    Ok(FeatureVector {
        values: extract_trace(params, map)?.eta,
    })
}

struct HeadTrace<S> {
    h1: Vec<S>,
    h2: Vec<S>,
    output: S,
}

fn head_trace<S: Scalar>(head: &HeadParams<S>, eta: &[S]) -> HeadTrace<S> {
    let mut h1 = head.fc1.forward(eta);
    relu_in_place(&mut h1);
    let mut h2 = head.fc2.forward(&h1);
    relu_in_place(&mut h2);
    let output = head.fc3.forward(&h2)[0];
    HeadTrace { h1, h2, output }
}

/// Run the fitting head for `case`; the scalar is the TOA in ns relative
/// to the feature map anchor.
pub fn fit_head<S: Scalar>(
    params: &NetworkParams<S>,
    case: ChannelCase,
    eta: &FeatureVector<S>,
) -> S {
    head_trace(params.head(case), &eta.values).output
}

/// Extractor + head in one call.
pub fn predict<S: Scalar>(
    params: &NetworkParams<S>,
    case: ChannelCase,
    map: &FeatureMap,
) -> Result<f64> {
    let eta = extract(params, map)?;
    Ok(fit_head(params, case, &eta).to_f64())
}

/// Backpropagate one sample given d(loss)/d(output); accumulates into
/// `grads`. Skips extractor gradients when the extractor is frozen.
fn backward_sample<S: Scalar>(
    params: &NetworkParams<S>,
    trace: &ExtractTrace<S>,
    head_tr: &HeadTrace<S>,
    case: ChannelCase,
    d_out: S,
    grads: &mut NetworkParams<S>,
) {
    let head = params.head(case);
    let (mut g_h2, g_w3, g_b3) = head.fc3.backward(&head_tr.h2, &[d_out]);
    relu_backward(&head_tr.h2, &mut g_h2);
    let (mut g_h1, g_w2, g_b2) = head.fc2.backward(&head_tr.h1, &g_h2);
    relu_backward(&head_tr.h1, &mut g_h1);
    let (mut g_eta, g_w1, g_b1) = head.fc1.backward(&trace.eta, &g_h1);

    let gh = &mut grads.heads[case_index(case)];
    for (dst, src) in [
        (&mut gh.fc1.weights, g_w1),
        (&mut gh.fc1.bias, g_b1),
        (&mut gh.fc2.weights, g_w2),
        (&mut gh.fc2.bias, g_b2),
        (&mut gh.fc3.weights, g_w3),
        (&mut gh.fc3.bias, g_b3),
    ] {
        for (a, &b) in dst.data.iter_mut().zip(&src.data) {
            *a += b;
        }
    }

    if params.frozen_extractor {
        return;
    }
    relu_backward(&trace.eta, &mut g_eta);
    let g_conv2_out = Tensor {
        shape: vec![params.m / 4, params.n_rb / 2, 2],
        data: g_eta,
    };
    let (mut g_hidden, g_k2, g_c2) = params.conv2.backward(&trace.hidden, &g_conv2_out);
    relu_backward(&trace.hidden.data, &mut g_hidden.data);
    let (_, g_k1, g_c1) = params.conv1.backward(&trace.input, &g_hidden);
    for (dst, src) in [
        (&mut grads.conv1.weights, g_k1),
        (&mut grads.conv1.bias, g_c1),
        (&mut grads.conv2.weights, g_k2),
        (&mut grads.conv2.bias, g_c2),
    ] {
        for (a, &b) in dst.data.iter_mut().zip(&src.data) {
            *a += b;
        }
    }
}

fn chunk_loss_grad<S: Scalar>(
    params: &NetworkParams<S>,
    chunk: &[TrainSample],
    sample_period_s: f64,
    inv_batch: f64,
) -> Result<(f64, NetworkParams<S>)> {
    let mut grads = params.zeros_like();
    let mut sq_sum = 0.0;
    for sample in chunk {
        let trace = extract_trace(params, &sample.feature_map)?;
        let head_tr = head_trace(params.head(sample.case), &trace.eta);
        let err = head_tr.output.to_f64() - sample.target_rel_ns(sample_period_s);
        sq_sum += err * err;
        let d_out = S::from_f64(2.0 * err * inv_batch);
        backward_sample(params, &trace, &head_tr, sample.case, d_out, &mut grads);
    }
    Ok((sq_sum, grads))
}

/// Mean-squared-error loss (ns²) and gradients over a batch. Samples are
/// routed to their case's head; with a frozen extractor the θ_e gradients
/// are exactly zero. The chunked fixed-order reduction gives bit-identical
/// results in sequential and parallel mode.
pub fn loss_and_grad<S: Scalar>(
    params: &NetworkParams<S>,
    batch: &[TrainSample],
    sample_period_s: f64,
    parallel: bool,
) -> Result<(f64, NetworkParams<S>)> {
    if batch.is_empty() {
        return Err(ToaError::Argument("empty batch".into()));
    }
    let inv_batch = 1.0 / batch.len() as f64;
    let chunks: Vec<&[TrainSample]> = batch.chunks(GRAD_CHUNK).collect();
    let partials: Vec<(f64, NetworkParams<S>)> = if parallel {
        chunks
            .into_par_iter()
            .map(|c| chunk_loss_grad(params, c, sample_period_s, inv_batch))
            .collect::<Result<Vec<_>>>()?
    } else {
        chunks
            .into_iter()
            .map(|c| chunk_loss_grad(params, c, sample_period_s, inv_batch))
            .collect::<Result<Vec<_>>>()?
    };
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for (sq, g) in &partials {
        loss += sq;
        grads.add_assign(g);
    }
    Ok((loss * inv_batch, grads))
}

/// Loss/gradients over pre-extracted feature pairs; only head parameters
/// receive gradients.
fn head_loss_and_grad<S: Scalar>(
    params: &NetworkParams<S>,
    batch: &[(FeatureVector<S>, f64, ChannelCase)],
) -> (f64, NetworkParams<S>) {
    let inv_batch = 1.0 / batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut sq_sum = 0.0;
    for (eta, target, case) in batch {
        let head = params.head(*case);
        let tr = head_trace(head, &eta.values);
        let err = tr.output.to_f64() - target;
        sq_sum += err * err;
        let d_out = S::from_f64(2.0 * err * inv_batch);

        let (mut g_h2, g_w3, g_b3) = head.fc3.backward(&tr.h2, &[d_out]);
        relu_backward(&tr.h2, &mut g_h2);
        let (mut g_h1, g_w2, g_b2) = head.fc2.backward(&tr.h1, &g_h2);
        relu_backward(&tr.h1, &mut g_h1);
        let (_, g_w1, g_b1) = head.fc1.backward(&eta.values, &g_h1);
        let gh = &mut grads.heads[case_index(*case)];
        for (dst, src) in [
            (&mut gh.fc1.weights, g_w1),
            (&mut gh.fc1.bias, g_b1),
            (&mut gh.fc2.weights, g_w2),
            (&mut gh.fc2.bias, g_b2),
            (&mut gh.fc3.weights, g_w3),
            (&mut gh.fc3.bias, g_b3),
        ] {
            for (a, &b) in dst.data.iter_mut().zip(&src.data) {
                *a += b;
            }
        }
    }
    (sq_sum * inv_batch, grads)
}

/// Validation loss (ns²) without gradients.
pub fn mse_loss<S: Scalar>(
    params: &NetworkParams<S>,
    samples: &[TrainSample],
    sample_period_s: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(ToaError::Argument("empty sample set".into()));
    }
    let mut sq = 0.0;
    for s in samples {
        let pred = predict(params, s.case, &s.feature_map)?;
        let err = pred - s.target_rel_ns(sample_period_s);
        sq += err * err;
    }
    Ok(sq / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates shaped like the parameters.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: NetworkParams<S>,
    pub v: NetworkParams<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &NetworkParams<S>) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One Adam update in place. Frozen extractor tensors (and their moments)
/// are left untouched.
pub fn adam_step<S: Scalar>(
    params: &mut NetworkParams<S>,
    grads: &NetworkParams<S>,
    hyper: &AdamHyper,
    state: &mut AdamState<S>,
) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hyper.beta1.powf(t);
    let bc2 = 1.0 - hyper.beta2.powf(t);
    let frozen = params.frozen_extractor;
    let grad_refs = grads.tensor_refs();
    let mut m_refs = state.m.tensor_refs_mut();
    let mut v_refs = state.v.tensor_refs_mut();
    for (idx, p) in params.tensor_refs_mut().into_iter().enumerate() {
        if frozen && idx < NetworkParams::<S>::EXTRACTOR_TENSORS {
            continue;
        }
        let g = grad_refs[idx];
        let m = &mut m_refs[idx];
        let v = &mut v_refs[idx];
        for i in 0..p.data.len() {
            let gi = g.data[i].to_f64();
            let mi = hyper.beta1 * m.data[i].to_f64() + (1.0 - hyper.beta1) * gi;
            let vi = hyper.beta2 * v.data[i].to_f64() + (1.0 - hyper.beta2) * gi * gi;
            m.data[i] = S::from_f64(mi);
            v.data[i] = S::from_f64(vi);
            let update = hyper.lr * (mi / bc1) / ((vi / bc2).sqrt() + hyper.epsilon);
            p.data[i] = S::from_f64(p.data[i].to_f64() - update);
        }
    }
}

/// Training schedule knobs shared by both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    /// Peak learning rate; cosine-decays to `lr_min` over `max_epochs`.
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs without validation improvement.
    pub patience: usize,
    /// Fraction of the data held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    /// Parallel batch gradients (bit-identical to sequential).
    pub parallel: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 2e-2,
            lr_min: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 200,
            patience: 20,
            val_fraction: 0.1,
            seed: 0,
            parallel: false,
        }
    }
}

impl TrainHyper {
    fn adam(&self, epoch: usize) -> AdamHyper {
        let progress = (epoch as f64 / self.max_epochs.max(1) as f64).min(1.0);
        let lr = self.lr_min
            + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos());
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Trained parameters plus the per-epoch validation trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub params: NetworkParams<S>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn split_indices(n: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Stage 1: joint training of the extractor and all heads on mixed-case
/// data. Requires samples from every channel case.
pub fn train_stage1<S: Scalar>(
    samples: &[TrainSample],
    sample_period_s: f64,
    hyper: &TrainHyper,
) -> Result<TrainOutcome<S>> {
    for case in ChannelCase::ALL {
        if !samples.iter().any(|s| s.case == case) {
            return Err(ToaError::Dataset(format!(
                "stage 1 needs data for case {case}"
            )));
        }
    }
    let map = &samples[0].feature_map;
    let mut params = init_network::<S>(map.m, map.n_rb, hyper.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let (mut train_idx, val_idx) = split_indices(samples.len(), hyper.val_fraction, &mut rng);
    let val: Vec<TrainSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();

    let mut state = AdamState::new(&params);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut val_losses = Vec::new();
    for epoch in 0..hyper.max_epochs {
        train_idx.shuffle(&mut rng);
        let adam = hyper.adam(epoch);
        for batch_idx in train_idx.chunks(hyper.batch_size) {
            let batch: Vec<TrainSample> = batch_idx.iter().map(|&i| samples[i].clone()).collect();
            let (_, grads) = loss_and_grad(&params, &batch, sample_period_s, hyper.parallel)?;
            adam_step(&mut params, &grads, &adam, &mut state);
        }
        let val_loss = mse_loss(&params, &val, sample_period_s)?;
        val_losses.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            best = params.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch > hyper.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        val_losses,
        best_epoch,
        best_val_loss: best_val,
    })
}

/// Perturbation augmentation settings for stage 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Perturbation standard deviation relative to the per-column RMS of
    /// the correlation magnitudes.
    pub alpha: f64,
    /// Variants emitted per input sample.
    pub factor: usize,
    pub seed: u64,
}

/// Rebuild a feature map from perturbed correlation observations.
/// Returns `None` when the perturbed map violates the map invariants.
fn perturb_feature_map<R: Rng>(map: &FeatureMap, alpha: f64, rng: &mut R) -> Option<FeatureMap> {
    let n_cols = map.n_cols();
    let mut columns: Vec<Vec<num_complex::Complex64>> = (0..n_cols)
        .map(|col| {
            (0..map.m)
                .map(|m| {
                    num_complex::Complex64::from_polar(
                        f64::from(map.amplitude(m, col)),
                        f64::from(map.phase(m, col)),
                    )
                })
                .collect()
        })
        .collect();
    if alpha > 0.0 {
        for column in columns.iter_mut() {
            let rms =
                (column.iter().map(|c| c.norm_sqr()).sum::<f64>() / column.len() as f64).sqrt();
            let std = alpha * rms;
            for c in column.iter_mut() {
                let dr: f64 = rng.sample(StandardNormal);
                let di: f64 = rng.sample(StandardNormal);
                *c += num_complex::Complex64::new(std * dr, std * di);
            }
        }
    }
    let norm = columns[0].iter().map(|c| c.norm()).fold(0.0, f64::max);
    if norm <= 0.0 {
        return None;
    }
    let mut planes = vec![0.0f32; map.m * n_cols * 2];
    for m in 0..map.m {
        for (col, column) in columns.iter().enumerate() {
            let value = column[m];
            let amp = value.norm() / norm;
            if amp > 1.0 {
                return None;
            }
            planes[(m * n_cols + col) * 2] = amp as f32;
            planes[(m * n_cols + col) * 2 + 1] =
                if value.norm() == 0.0 { 0.0 } else { value.arg() as f32 };
        }
    }
    Some(FeatureMap {
        planes,
        m: map.m,
        n_rb: map.n_rb,
        anchor: map.anchor,
        norm_scale: map.norm_scale * norm,
    })
}

/// Enlarge a stage-2 training set: perturb each sample's correlation
/// observations `factor` times, re-extract features with the frozen
/// extractor, and pair them with the original TOA target.
pub fn augment<S: Scalar, R: Rng>(
    samples: &[TrainSample],
    params: &NetworkParams<S>,
    alpha: f64,
    factor: usize,
    sample_period_s: f64,
    rng: &mut R,
) -> Result<Vec<(FeatureVector<S>, f64, ChannelCase)>> {
    if !params.frozen_extractor {
        return Err(ToaError::Argument(
            "augmentation requires a frozen extractor".into(),
        ));
    }
    if factor == 0 {
        return Err(ToaError::Argument("augmentation factor must be ≥ 1".into()));
    }
    if !(alpha >= 0.0) {
        return Err(ToaError::Argument("perturbation scale must be ≥ 0".into()));
    }
    let mut pairs = Vec::with_capacity(samples.len() * factor);
    for sample in samples {
        let target = sample.target_rel_ns(sample_period_s);
        for _ in 0..factor {
            let Some(map) = perturb_feature_map(&sample.feature_map, alpha, rng) else {
                continue;
            };
            pairs.push((extract(params, &map)?, target, sample.case));
        }
    }
    Ok(pairs)
}

/// Stage 2: freeze the extractor and fine-tune the head of one case,
/// optionally with perturbation-augmented training pairs. θ_e and the
/// other heads are bit-identical before and after.
pub fn train_stage2<S: Scalar>(
    stage1_params: &NetworkParams<S>,
    case: ChannelCase,
    samples: &[TrainSample],
    sample_period_s: f64,
    hyper: &TrainHyper,
    augment_cfg: Option<AugmentConfig>,
) -> Result<TrainOutcome<S>> {
    if samples.is_empty() {
        return Err(ToaError::Dataset("stage 2 needs samples".into()));
    }
    if let Some(bad) = samples.iter().find(|s| s.case != case) {
        return Err(ToaError::Dataset(format!(
            "stage 2 for case {case} got a {} sample",
            bad.case
        )));
    }
    let mut params = stage1_params.clone();
    params.frozen_extractor = true;

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(2));
    let (train_idx, val_idx) = split_indices(samples.len(), hyper.val_fraction, &mut rng);
    let to_pair = |i: &usize| -> Result<(FeatureVector<S>, f64, ChannelCase)> {
        let s = &samples[*i];
        Ok((
            extract(&params, &s.feature_map)?,
            s.target_rel_ns(sample_period_s),
            s.case,
        ))
    };
    let mut train_pairs: Vec<_> = train_idx.iter().map(to_pair).collect::<Result<_>>()?;
    let val_pairs: Vec<_> = val_idx.iter().map(to_pair).collect::<Result<_>>()?;
    if let Some(cfg) = augment_cfg {
        let train_samples: Vec<TrainSample> =
            train_idx.iter().map(|&i| samples[i].clone()).collect();
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        train_pairs.extend(augment(
            &train_samples,
            &params,
            cfg.alpha,
            cfg.factor,
            sample_period_s,
            &mut aug_rng,
        )?);
    }

    let val_loss_of = |p: &NetworkParams<S>| -> f64 {
        let sq: f64 = val_pairs
            .iter()
            .map(|(eta, target, c)| {
                let err = fit_head(p, *c, eta).to_f64() - target;
                err * err
            })
            .sum();
        sq / val_pairs.len() as f64
    };

    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut state = AdamState::new(&params);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut val_losses = Vec::new();
    for epoch in 0..hyper.max_epochs {
        order.shuffle(&mut rng);
        let adam = hyper.adam(epoch);
        for batch_idx in order.chunks(hyper.batch_size) {
            let batch: Vec<_> = batch_idx.iter().map(|&i| train_pairs[i].clone()).collect();
            let (_, grads) = head_loss_and_grad(&params, &batch);
            adam_step(&mut params, &grads, &adam, &mut state);
        }
        let val_loss = val_loss_of(&params);
        val_losses.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            best = params.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch > hyper.patience {
            break;
        }
    }
    debug_assert_eq!(best.extractor_digest(), stage1_params.extractor_digest());
    Ok(TrainOutcome {
        params: best,
        val_losses,
        best_epoch,
        best_val_loss: best_val,
    })
}
