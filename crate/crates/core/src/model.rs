//! The classifier: token gates, Haar subband stack, ReLU state-space
//! recurrence and a linear head with an L2 penalty on its weights.
//!
//! Two evaluation routes exist. The per-patch functions (`gate_tokens`
//! through `classify`, composed by [`model_forward`]) work on plain values
//! and follow the pipeline one stage at a time. [`forward_batch`] records
//! the same computation for a whole mini-batch on a [`Tape`] so it can be
//! differentiated; training and bulk evaluation use it.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};
use crate::preprocess::{make_tokens, Patch, TokenPair};
use crate::volume::Volume;
use crate::wavelet::{decompose_tokens, Plane};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Softmax probabilities trained with categorical cross-entropy.
    #[default]
    Softmax,
    /// Independent per-class sigmoids trained one-vs-rest.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patch_side: usize,
    pub reduced_bands: usize,
    pub embed_dim: usize,
    pub state_dim: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub l2: f64,
    pub head: Head,
    /// Number of stacked recurrence blocks.
    pub depth: usize,
    /// When false the Haar stage is bypassed and the gated volumes feed the
    /// sequence directly.
    pub wavelet: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_side: 4,
            reduced_bands: 15,
            embed_dim: 64,
            state_dim: 128,
            num_classes: 2,
            dropout: 0.1,
            l2: 0.01,
            head: Head::Softmax,
            depth: 1,
            wavelet: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.patch_side < 2 || !self.patch_side.is_multiple_of(2) {
            return fail(format!("patch side {} must be even and >= 2", self.patch_side));
        }
        if self.reduced_bands == 0 || self.embed_dim == 0 || self.state_dim == 0 || self.depth == 0 {
            return fail("band count, embed_dim, state_dim and depth must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.l2 >= 0.0) {
            return fail(format!("l2 coefficient {} is negative", self.l2));
        }
        Ok(())
    }

    /// Sequence length: (P/2)² with the Haar stage, P² without.
    pub fn seq_len(&self) -> usize {
        let side = if self.wavelet {
            self.patch_side / 2
        } else {
            self.patch_side
        };
        side * side
    }

    /// Width of one raw sequence step before projection.
    pub fn raw_features(&self) -> usize {
        if self.wavelet {
            8 * self.reduced_bands
        } else {
            2 * self.reduced_bands
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmBlock {
    /// state×state, applied as `W_transition · h`.
    pub w_transition: Tensor,
    /// input×state, applied as `W_updateᵀ · E`.
    pub w_update: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_s: Tensor,
    pub b_s: Tensor,
    pub w_f: Tensor,
    pub b_f: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub blocks: Vec<SsmBlock>,
    pub w_classifier: Tensor,
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).unwrap().with_grad()
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(&[n]).with_grad()
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.reduced_bands;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let input = if i == 0 { cfg.embed_dim } else { cfg.state_dim };
                SsmBlock {
                    w_transition: glorot(rng, cfg.state_dim, cfg.state_dim),
                    w_update: glorot(rng, input, cfg.state_dim),
                }
            })
            .collect();
        Ok(Self {
            w_s: glorot(rng, c, c),
            b_s: zeros(c),
            w_f: glorot(rng, c, c),
            b_f: zeros(c),
            w_in: glorot(rng, cfg.raw_features(), cfg.embed_dim),
            b_in: zeros(cfg.embed_dim),
            blocks,
            w_classifier: glorot(rng, cfg.state_dim, cfg.num_classes),
        })
    }

    /// Parameters with their checkpoint names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("gate.w_s".to_string(), &self.w_s),
            ("gate.b_s".to_string(), &self.b_s),
            ("gate.w_f".to_string(), &self.w_f),
            ("gate.b_f".to_string(), &self.b_f),
            ("proj.w_in".to_string(), &self.w_in),
            ("proj.b_in".to_string(), &self.b_in),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("ssm.{i}.w_transition"), &b.w_transition));
            out.push((format!("ssm.{i}.w_update"), &b.w_update));
        }
        out.push(("head.w_classifier".to_string(), &self.w_classifier));
        out
    }

    /// Mutable view in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.w_s,
            &mut self.b_s,
            &mut self.w_f,
            &mut self.b_f,
            &mut self.w_in,
            &mut self.b_in,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.w_transition);
            out.push(&mut b.w_update);
        }
        out.push(&mut self.w_classifier);
        out
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds parameters from checkpoint tensors, checking every name and
    /// shape against `cfg`.
    pub fn from_named(cfg: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::init(cfg, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        let expected = template.named();
        if tensors.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, t), (want_name, want)) in tensors.iter().zip(&expected) {
            if name != want_name || t.shape() != want.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} {:?} does not match expected {want_name:?} {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t.with_grad());
        let mut next = || it.next().unwrap();
        let (w_s, b_s, w_f, b_f, w_in, b_in) = (next(), next(), next(), next(), next(), next());
        let blocks = (0..cfg.depth)
            .map(|_| SsmBlock {
                w_transition: next(),
                w_update: next(),
            })
            .collect();
        Ok(Self {
            w_s,
            b_s,
            w_f,
            b_f,
            w_in,
            b_in,
            blocks,
            w_classifier: next(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

impl HiddenState {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `W · x + b` for a rows×cols row-major `W`.
fn affine(w: &Tensor, x: &[f64], b: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    w.data()
        .chunks_exact(cols)
        .zip(b)
        .map(|(row, bias)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bias)
        .collect()
}

/// `Wᵀ · x` for a rows×cols row-major `W` and a length-rows `x`.
fn transpose_apply(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    let mut out = vec![0.0; cols];
    for (row, &xv) in w.data().chunks_exact(cols).zip(x) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * xv;
        }
    }
    out
}

/// Spectral and spatial gate activations from the shared context, the mean
/// spectrum over the patch pixels.
pub fn gate_values(tokens: &TokenPair, params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = &tokens.spectral;
    let c = f.cols;
    if params.w_s.shape() != [c, c] || params.w_f.shape() != [c, c] {
        return Err(Error::ShapeMismatch(format!(
            "gate weights {:?} for {c} bands",
            params.w_s.shape()
        )));
    }
    if tokens.spatial.rows != c || tokens.spatial.cols != f.rows {
        return Err(Error::ShapeMismatch("spatial tokens are not the transpose of spectral".into()));
    }
    let mut context = vec![0.0; c];
    for i in 0..f.rows {
        for j in 0..c {
            context[j] += f.get(i, j);
        }
    }
    context.iter_mut().for_each(|v| *v /= f.rows as f64);
    let gate = |w: &Tensor, b: &Tensor| affine(w, &context, b.data()).into_iter().map(sigmoid).collect();
    Ok((gate(&params.w_s, &params.b_s), gate(&params.w_f, &params.b_f)))
}

/// Gated tokens `(S̃, F̃)`: band row `j` of S and band column `j` of F are
/// scaled by their gate entry.
pub fn gate_tokens(tokens: &TokenPair, params: &ModelParams) -> Result<(Plane, Plane)> {
    let (gs, gf) = gate_values(tokens, params)?;
    let mut s = tokens.spatial.clone();
    for j in 0..s.rows {
        for i in 0..s.cols {
            s.set(j, i, s.get(j, i) * gs[j]);
        }
    }
    let mut f = tokens.spectral.clone();
    for i in 0..f.rows {
        for j in 0..f.cols {
            f.set(i, j, f.get(i, j) * gf[j]);
        }
    }
    Ok((s, f))
}

/// Lays gated tokens back onto the P×P grid.
pub fn reshape_gated(s: &Plane, f: &Plane, side: usize) -> Result<(Volume, Volume)> {
    let c = s.rows;
    if s.cols != side * side || f.rows != side * side || f.cols != c {
        return Err(Error::ShapeMismatch(format!(
            "tokens {}x{} / {}x{} for a {side}x{side} patch",
            s.rows, s.cols, f.rows, f.cols
        )));
    }
    let mut s_hat = Volume::zeros(side, side, c);
    for j in 0..c {
        for i in 0..side * side {
            s_hat.set(i / side, i % side, j, s.get(j, i));
        }
    }
    let f_hat = Volume::from_vec(side, side, c, f.data.clone());
    Ok((s_hat, f_hat))
}

/// Raw per-position features when the Haar stage is bypassed: Ŝ and F̂
/// concatenated channelwise.
pub fn concat_volumes(a: &Volume, b: &Volume) -> Volume {
    let (ca, cb) = (a.channels, b.channels);
    let data = a
        .data
        .chunks_exact(ca)
        .zip(b.data.chunks_exact(cb))
        .flat_map(|(x, y)| x.iter().chain(y).copied())
        .collect();
    Volume::from_vec(a.rows, a.cols, ca + cb, data)
}

/// Projects each spatial position (row-major) of `features` to an embedding
/// `E_t = W_inᵀ·raw + b_in`. Dropout is applied when `dropout` is given.
pub fn build_sequence(
    features: &Volume,
    params: &ModelParams,
    dropout: Option<(f64, &mut dyn RngCore)>,
) -> Result<Vec<Vec<f64>>> {
    if params.w_in.shape()[0] != features.channels {
        return Err(Error::ShapeMismatch(format!(
            "projection expects {} features, got {}",
            params.w_in.shape()[0],
            features.channels
        )));
    }
    let mut seq: Vec<Vec<f64>> = features
        .data
        .chunks_exact(features.channels)
        .map(|raw| {
            transpose_apply(&params.w_in, raw)
                .into_iter()
                .zip(params.b_in.data())
                .map(|(v, b)| v + b)
                .collect()
        })
        .collect();
    if let Some((rate, rng)) = dropout {
        if rate > 0.0 {
            let keep = 1.0 / (1.0 - rate);
            for v in seq.iter_mut().flatten() {
                *v *= if rng.gen::<f64>() < rate { 0.0 } else { keep };
            }
        }
    }
    Ok(seq)
}

/// Runs `h_t = ReLU(W_transition·h_{t-1} + W_updateᵀ·E_t)` over the
/// sequence through every block and returns the last hidden state.
pub fn ssm_forward(seq: &[Vec<f64>], params: &ModelParams, h0: &HiddenState) -> Result<HiddenState> {
    let mut inputs: Vec<Vec<f64>> = seq.to_vec();
    let mut last = h0.clone();
    for block in &params.blocks {
        let state = block.w_transition.shape()[0];
        if h0.0.len() != state {
            return Err(Error::ShapeMismatch(format!(
                "initial state of length {} for state dim {state}",
                h0.0.len()
            )));
        }
        let mut h = h0.0.clone();
        let mut outputs = Vec::with_capacity(inputs.len());
        for e in &inputs {
            let carried = affine(&block.w_transition, &h, &vec![0.0; state]);
            let update = transpose_apply(&block.w_update, e);
            h = carried.iter().zip(&update).map(|(a, b)| (a + b).max(0.0)).collect();
            outputs.push(h.clone());
        }
        last = HiddenState(h);
        inputs = outputs;
    }
    Ok(last)
}

/// Class probabilities from `W_classifierᵀ·h`.
pub fn classify(h: &HiddenState, params: &ModelParams, head: Head) -> Vec<f64> {
    let logits = transpose_apply(&params.w_classifier, &h.0);
    match head {
        Head::Softmax => softmax(&logits),
        Head::Sigmoid => logits.into_iter().map(sigmoid).collect(),
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Full per-patch pipeline: tokens, gates, reshape, subbands (or the
/// bypass), sequence, recurrence, head.
pub fn model_forward(
    patch: &Patch,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: Option<&mut dyn RngCore>,
) -> Result<Vec<f64>> {
    check_patch(patch, cfg)?;
    let tokens = make_tokens(patch);
    let (s, f) = gate_tokens(&tokens, params)?;
    let (s_hat, f_hat) = reshape_gated(&s, &f, cfg.patch_side)?;
    let features = if cfg.wavelet {
        decompose_tokens(&s_hat, &f_hat)?.data
    } else {
        concat_volumes(&s_hat, &f_hat)
    };
    let dropout = match (mode, rng) {
        (Mode::Train, Some(r)) => Some((cfg.dropout, r)),
        _ => None,
    };
    let seq = build_sequence(&features, params, dropout)?;
    let h = ssm_forward(&seq, params, &HiddenState::zeros(cfg.state_dim))?;
    Ok(classify(&h, params, cfg.head))
}

fn check_patch(patch: &Patch, cfg: &ModelConfig) -> Result<()> {
    let w = &patch.window;
    if (w.rows, w.cols, w.channels) != (cfg.patch_side, cfg.patch_side, cfg.reduced_bands) {
        return Err(Error::ShapeMismatch(format!(
            "patch {}x{}x{} for model expecting {}x{}x{}",
            w.rows, w.cols, w.channels, cfg.patch_side, cfg.patch_side, cfg.reduced_bands
        )));
    }
    Ok(())
}

/// Tape handles of one batched forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// One var per parameter, in [`ModelParams::named`] order.
    pub params: Vec<Var>,
    /// Gate activations `[batch, C*]`, spatial then spectral.
    pub gates: (Var, Var),
    /// Hidden states of the last block for every step, `[batch, state]`.
    pub hidden: Vec<Var>,
}

/// Records the batched model on `tape`. The input is a
/// `[batch, P, P, C*]` constant built from the patch windows.
pub fn forward_batch<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[&Patch],
    mode: Mode,
    rng: &mut R,
) -> Result<Forward> {
    if batch.is_empty() {
        return Err(Error::EmptySplit("batch"));
    }
    let (p, c) = (cfg.patch_side, cfg.reduced_bands);
    let mut input = Vec::with_capacity(batch.len() * p * p * c);
    for patch in batch {
        check_patch(patch, cfg)?;
        input.extend_from_slice(&patch.window.data);
    }
    let b = batch.len();
    let x = tape.constant(vec![b, p, p, c], input)?;
    let pv: Vec<Var> = params.named().iter().map(|(_, t)| tape.leaf(t)).collect();
    let (w_s, b_s, w_f, b_f, w_in, b_in) = (pv[0], pv[1], pv[2], pv[3], pv[4], pv[5]);
    let w_cls = *pv.last().unwrap();

    let context = tape.band_mean(x)?;
    let mut gate = |w: Var, bias: Var| -> Result<Var> {
        let wt = tape.transpose(w)?;
        let pre = tape.matmul(context, wt)?;
        let pre = tape.add_bias(pre, bias)?;
        Ok(tape.sigmoid(pre))
    };
    let g_s = gate(w_s, b_s)?;
    let g_f = gate(w_f, b_f)?;
    let s_hat = tape.scale_bands(x, g_s)?;
    let f_hat = tape.scale_bands(x, g_f)?;
    let features = if cfg.wavelet {
        let hs = tape.haar(s_hat)?;
        let hf = tape.haar(f_hat)?;
        tape.concat_last(hs, hf)?
    } else {
        tape.concat_last(s_hat, f_hat)?
    };
    let steps = cfg.seq_len();
    let raw = tape.reshape(features, vec![b * steps, cfg.raw_features()])?;
    let e = tape.matmul(raw, w_in)?;
    let e = tape.add_bias(e, b_in)?;
    let mut seq = tape.dropout(e, cfg.dropout, mode == Mode::Train, rng)?;

    let state = cfg.state_dim;
    let mut hidden = Vec::new();
    for (i, _) in params.blocks.iter().enumerate() {
        let (w_tr, w_up) = (pv[6 + 2 * i], pv[7 + 2 * i]);
        let update = tape.matmul(seq, w_up)?;
        let update = tape.reshape(update, vec![b, steps, state])?;
        let w_tr_t = tape.transpose(w_tr)?;
        let mut h = tape.constant(vec![b, state], vec![0.0; b * state])?;
        hidden.clear();
        for t in 0..steps {
            let u = tape.select_step(update, t)?;
            let carried = tape.matmul(h, w_tr_t)?;
            let pre = tape.add(carried, u)?;
            h = tape.relu(pre);
            hidden.push(h);
        }
        if i + 1 < params.blocks.len() {
            let stacked = tape.stack_steps(&hidden)?;
            seq = tape.reshape(stacked, vec![b * steps, state])?;
        }
    }
    let h_last = *hidden.last().expect("sequence has at least one step");
    let logits = tape.matmul(h_last, w_cls)?;
    Ok(Forward {
        logits,
        params: pv,
        gates: (g_s, g_f),
        hidden,
    })
}

/// Mean classification loss over the batch plus `λ·‖W_classifier‖²`.
pub fn training_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[&Patch],
    mode: Mode,
    rng: &mut R,
) -> Result<(Var, Forward)> {
    let fwd = forward_batch(tape, params, cfg, batch, mode, rng)?;
    let targets: Vec<usize> = batch.iter().map(|p| p.class_index()).collect();
    let data = match cfg.head {
        Head::Softmax => tape.softmax_cross_entropy(fwd.logits, &targets)?,
        Head::Sigmoid => tape.sigmoid_cross_entropy(fwd.logits, &targets)?,
    };
    let penalty = tape.l2_penalty(*fwd.params.last().unwrap(), cfg.l2)?;
    let loss = tape.add(data, penalty)?;
    Ok((loss, fwd))
}

/// Backpropagates `loss` and adds every parameter gradient into `params`.
pub fn accumulate_gradients(
    tape: &Tape,
    loss: Var,
    fwd: &Forward,
    params: &mut ModelParams,
) -> Result<()> {
    let grads = tape.backward(loss)?;
    for (var, tensor) in fwd.params.iter().zip(params.tensors_mut()) {
        grads.accumulate_into(*var, tensor)?;
    }
    Ok(())
}

/// Class probabilities for a batch in eval mode.
pub fn predict_batch(params: &ModelParams, cfg: &ModelConfig, batch: &[&Patch]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
    let fwd = forward_batch(&mut tape, params, cfg, batch, Mode::Eval, &mut no_rng)?;
    Ok(tape
        .value(fwd.logits)
        .chunks_exact(cfg.num_classes)
        .map(|z| match cfg.head {
            Head::Softmax => softmax(z),
            Head::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
        })
        .collect())
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
