//! Undercomplete feed-forward autoencoders trained with mini-batch Adam.
//!
//! Inputs arrive on the 0–100 % scale and are divided by 100 before entering
//! the network; reported losses are multiplied back to squared percent.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network input/output normalization: percent → unit interval.
const INPUT_SCALE: f64 = 100.0;
/// Loss conversion from unit-interval to squared percent.
const LOSS_SCALE: f64 = INPUT_SCALE * INPUT_SCALE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Tanh2x,
    Tanh3x,
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "tanh2x" => Ok(Self::Tanh2x),
            "tanh3x" => Ok(Self::Tanh3x),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    pub arch: Architecture,
    pub n_in: usize,
    pub p: usize,
}

impl AutoencoderSpec {
    pub fn new(arch: Architecture, n_in: usize, p: usize) -> Result<Self> {
        if p == 0 || n_in == 0 {
            return Err(Error::Config(format!("invalid autoencoder dims n_in={n_in}, p={p}")));
        }
        Ok(Self { arch, n_in, p })
    }

    /// Truncated average of input and latent widths.
    pub fn hidden_width(&self) -> usize {
        (self.n_in + self.p) / 2
    }

    fn hidden_layers(&self) -> usize {
        match self.arch {
            Architecture::Linear => 0,
            Architecture::Tanh2x => 1,
            Architecture::Tanh3x => 2,
        }
    }

    /// `(fan_in, fan_out, activation)` for each encoder layer.
    pub fn encoder_shape(&self) -> Vec<(usize, usize, Activation)> {
        let h = self.hidden_width();
        let mut dims = vec![self.n_in];
        dims.extend(std::iter::repeat_n(h, self.hidden_layers()));
        dims.push(self.p);
        chain(&dims)
    }

    pub fn decoder_shape(&self) -> Vec<(usize, usize, Activation)> {
        let h = self.hidden_width();
        let mut dims = vec![self.p];
        dims.extend(std::iter::repeat_n(h, self.hidden_layers()));
        dims.push(self.n_in);
        chain(&dims)
    }
}

/// Hidden layers are tanh; the bottleneck and output layers are affine.
fn chain(dims: &[usize]) -> Vec<(usize, usize, Activation)> {
    let last = dims.len() - 2;
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| (w[0], w[1], if i == last { Activation::Identity } else { Activation::Tanh }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Minimum validation improvement (squared percent) that resets patience.
    pub min_improvement: f64,
    pub validation_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Per-channel loss weights; `None` weighs every channel equally.
    pub channel_weights: Option<Vec<f64>>,
}

impl Default for TrainingHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 2000,
            patience: 20,
            min_improvement: 1e-6,
            validation_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            channel_weights: None,
        }
    }
}

impl TrainingHyper {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return Err(Error::Config("validation fraction must lie in (0, 0.5)".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Dense layer `a = act(W x + b)` with row-major `W` (`n_out × n_in`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr", into = "LayerRepr")]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub activation: Activation,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

impl From<Layer> for LayerRepr {
    fn from(l: Layer) -> Self {
        Self {
            activation: l.activation,
            weights: l.w.chunks(l.n_in).map(<[f64]>::to_vec).collect(),
            biases: l.b,
        }
    }
}

impl TryFrom<LayerRepr> for Layer {
    type Error = String;
    fn try_from(r: LayerRepr) -> std::result::Result<Self, String> {
        let n_out = r.weights.len();
        let n_in = r.weights.first().map_or(0, Vec::len);
        if n_out == 0 || n_in == 0 || r.weights.iter().any(|row| row.len() != n_in) || r.biases.len() != n_out {
            return Err("ragged or empty layer weights".into());
        }
        Ok(Self {
            n_in,
            n_out,
            activation: r.activation,
            w: r.weights.concat(),
            b: r.biases,
        })
    }
}

impl Layer {
    fn init(n_in: usize, n_out: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        Self {
            n_in,
            n_out,
            activation,
            w: (0..n_in * n_out).map(|_| rng.random_range(-limit..limit)).collect(),
            b: vec![0.0; n_out],
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.w.chunks_exact(self.n_in).zip(&self.b)) {
            let z = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            *o = match self.activation {
                Activation::Identity => z,
                Activation::Tanh => z.tanh(),
            };
        }
    }

    /// Activation derivative expressed through the activation output.
    fn slope(&self, a: f64) -> f64 {
        match self.activation {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn biases(&self) -> &[f64] {
        &self.b
    }
}

fn forward_chain(layers: &[Layer], x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    for l in layers {
        let mut next = vec![0.0; l.n_out];
        l.forward(&cur, &mut next);
        cur = next;
    }
    cur
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch, squared percent.
    pub train_mse: f64,
    pub validation_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    pub spec: AutoencoderSpec,
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_validation_mse: f64,
    pub seed: u64,
}

impl AutoencoderModel {
    /// Latent coordinates of one 0–100 % scaled sample.
    pub fn encode_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.n_in {
            return Err(Error::Dimension(format!(
                "encoder expects {} inputs, got {}",
                self.spec.n_in,
                x.len()
            )));
        }
        let scaled: Vec<f64> = x.iter().map(|v| v / INPUT_SCALE).collect();
        Ok(forward_chain(&self.encoder, &scaled))
    }

    /// Reconstruction on the 0–100 % scale.
    pub fn decode_row(&self, phi: &[f64]) -> Result<Vec<f64>> {
        if phi.len() != self.spec.p {
            return Err(Error::Dimension(format!(
                "decoder expects {} latents, got {}",
                self.spec.p,
                phi.len()
            )));
        }
        Ok(forward_chain(&self.decoder, phi).into_iter().map(|v| v * INPUT_SCALE).collect())
    }

    pub fn encode(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        map_rows(x, self.spec.p, |r| self.encode_row(r))
    }

    pub fn decode(&self, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        map_rows(phi, self.spec.n_in, |r| self.decode_row(r))
    }

    /// Analytic `∂decode/∂φ` (`n_in × p`, 0–100 % output scale).
    pub fn decode_jacobian(&self, phi: &[f64]) -> Result<DMatrix<f64>> {
        if phi.len() != self.spec.p {
            return Err(Error::Dimension(format!(
                "decoder expects {} latents, got {}",
                self.spec.p,
                phi.len()
            )));
        }
        let mut cur = phi.to_vec();
        let mut jac = DMatrix::<f64>::identity(self.spec.p, self.spec.p);
        for l in &self.decoder {
            let mut next = vec![0.0; l.n_out];
            l.forward(&cur, &mut next);
            let w = DMatrix::from_row_slice(l.n_out, l.n_in, &l.w);
            jac = w * jac;
            for (i, a) in next.iter().enumerate() {
                let s = l.slope(*a);
                jac.row_mut(i).scale_mut(s);
            }
            cur = next;
        }
        Ok(jac * INPUT_SCALE)
    }
}

pub(crate) fn map_rows(
    x: &DMatrix<f64>,
    n_out: usize,
    mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(x.nrows(), n_out);
    let mut row = vec![0.0; x.ncols()];
    for i in 0..x.nrows() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = x[(i, j)];
        }
        let y = f(&row)?;
        for (j, v) in y.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Adam moments and gradient accumulators for one layer.
struct LayerState {
    gw: Vec<f64>,
    gb: Vec<f64>,
    mw: Vec<f64>,
    vw: Vec<f64>,
    mb: Vec<f64>,
    vb: Vec<f64>,
}

impl LayerState {
    fn new(l: &Layer) -> Self {
        let nw = l.w.len();
        let nb = l.b.len();
        Self {
            gw: vec![0.0; nw],
            gb: vec![0.0; nb],
            mw: vec![0.0; nw],
            vw: vec![0.0; nw],
            mb: vec![0.0; nb],
            vb: vec![0.0; nb],
        }
    }
}

fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], h: &TrainingHyper, lr_t: f64) {
    for i in 0..p.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        p[i] -= lr_t * m[i] / (v[i].sqrt() + h.epsilon);
    }
}

/// Reusable forward/backward buffers for a fixed layer stack.
struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(layers: &[Layer]) -> Self {
        let mut acts = vec![vec![0.0; layers[0].n_in]];
        acts.extend(layers.iter().map(|l| vec![0.0; l.n_out]));
        let deltas = layers.iter().map(|l| vec![0.0; l.n_out]).collect();
        Self { acts, deltas }
    }

    fn forward(&mut self, layers: &[Layer], x: &[f64]) {
        self.acts[0].copy_from_slice(x);
        for (i, l) in layers.iter().enumerate() {
            let (head, tail) = self.acts.split_at_mut(i + 1);
            l.forward(&head[i], &mut tail[0]);
        }
    }

    /// Weighted squared error of the last forward pass against `x`.
    fn loss(&self, x: &[f64], weights: &[f64]) -> f64 {
        let out = self.acts.last().unwrap();
        out.iter()
            .zip(x)
            .zip(weights)
            .map(|((o, t), w)| w * (o - t) * (o - t))
            .sum()
    }

    /// Accumulates gradients of `scale · Σ w_j (out_j − x_j)²`.
    fn backward(&mut self, layers: &[Layer], states: &mut [LayerState], x: &[f64], weights: &[f64], scale: f64) {
        let n = layers.len();
        {
            let out = &self.acts[n];
            let last = &layers[n - 1];
            for j in 0..last.n_out {
                self.deltas[n - 1][j] = 2.0 * scale * weights[j] * (out[j] - x[j]) * last.slope(out[j]);
            }
        }
        for i in (0..n).rev() {
            let l = &layers[i];
            let input = &self.acts[i];
            let st = &mut states[i];
            for (r, d) in self.deltas[i].iter().enumerate() {
                st.gb[r] += d;
                let row = &mut st.gw[r * l.n_in..(r + 1) * l.n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if i > 0 {
                let prev = &layers[i - 1];
                let (lo, hi) = self.deltas.split_at_mut(i);
                let dprev = &mut lo[i - 1];
                dprev.iter_mut().for_each(|v| *v = 0.0);
                for (r, d) in hi[0].iter().enumerate() {
                    let row = &l.w[r * l.n_in..(r + 1) * l.n_in];
                    for (dp, w) in dprev.iter_mut().zip(row) {
                        *dp += w * d;
                    }
                }
                for (dp, a) in dprev.iter_mut().zip(&self.acts[i]) {
                    *dp *= prev.slope(*a);
                }
            }
        }
    }
}

/// Trains an autoencoder on 0–100 % scaled rows of `x`.
///
/// A seeded fraction of rows is held out for validation; training stops once
/// the validation loss fails to improve by `min_improvement` for `patience`
/// consecutive epochs, and the best-validation weights are returned.
pub fn train_autoencoder(x: &DMatrix<f64>, spec: &AutoencoderSpec, hyper: &TrainingHyper) -> Result<AutoencoderModel> {
    hyper.validate()?;
    let (n_s, n_in) = x.shape();
    if n_in != spec.n_in {
        return Err(Error::Dimension(format!("spec expects {} channels, data has {n_in}", spec.n_in)));
    }
    if n_s < 10 * spec.p {
        return Err(Error::Config(format!(
            "autoencoder with p = {} needs at least {} samples, got {n_s}",
            spec.p,
            10 * spec.p
        )));
    }
    let weights = match &hyper.channel_weights {
        Some(w) if w.len() == n_in => w.clone(),
        Some(w) => {
            return Err(Error::Dimension(format!("{} channel weights for {n_in} channels", w.len())));
        }
        None => vec![1.0; n_in],
    };
    let rows: Vec<Vec<f64>> = (0..n_s)
        .map(|i| x.row(i).iter().map(|v| v / INPUT_SCALE).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut layers: Vec<Layer> = spec
        .encoder_shape()
        .into_iter()
        .chain(spec.decoder_shape())
        .map(|(i, o, a)| Layer::init(i, o, a, &mut rng))
        .collect();
    let n_enc = spec.encoder_shape().len();

    let mut order: Vec<usize> = (0..n_s).collect();
    order.shuffle(&mut rng);
    let n_val = ((n_s as f64 * hyper.validation_fraction).round() as usize).clamp(1, n_s - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let mut states: Vec<LayerState> = layers.iter().map(LayerState::new).collect();
    let mut ws = Workspace::new(&layers);
    let norm = 1.0 / n_in as f64;
    let mut step = 0i32;
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, layers.clone());
    let mut stale = 0usize;

    for epoch in 0..hyper.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(hyper.batch_size) {
            for st in states.iter_mut() {
                st.gw.iter_mut().for_each(|g| *g = 0.0);
                st.gb.iter_mut().for_each(|g| *g = 0.0);
            }
            let scale = norm / batch.len() as f64;
            for &i in batch {
                ws.forward(&layers, &rows[i]);
                epoch_loss += ws.loss(&rows[i], &weights) * norm;
                ws.backward(&layers, &mut states, &rows[i], &weights, scale);
            }
            step += 1;
            let lr_t = hyper.learning_rate * (1.0 - hyper.beta2.powi(step)).sqrt() / (1.0 - hyper.beta1.powi(step));
            for (l, st) in layers.iter_mut().zip(states.iter_mut()) {
                adam_update(&mut l.w, &st.gw, &mut st.mw, &mut st.vw, hyper, lr_t);
                adam_update(&mut l.b, &st.gb, &mut st.mb, &mut st.vb, hyper, lr_t);
            }
        }
        let train_mse = epoch_loss / train_idx.len() as f64 * LOSS_SCALE;
        let mut val = 0.0;
        for &i in val_idx {
            ws.forward(&layers, &rows[i]);
            val += ws.loss(&rows[i], &weights) * norm;
        }
        let validation_mse = val / n_val as f64 * LOSS_SCALE;
        if !train_mse.is_finite() || !validation_mse.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        history.push(EpochLoss {
            epoch,
            train_mse,
            validation_mse,
        });
        if validation_mse < best.0 - hyper.min_improvement {
            best = (validation_mse, epoch, layers.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience {
                break;
            }
        }
    }
    let (best_validation_mse, best_epoch, mut best_layers) = best;
    let decoder = best_layers.split_off(n_enc);
    Ok(AutoencoderModel {
        spec: *spec,
        encoder: best_layers,
        decoder,
        history,
        best_epoch,
        best_validation_mse,
        seed: hyper.seed,
    })
}
