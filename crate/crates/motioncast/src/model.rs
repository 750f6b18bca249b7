//! The trajectory forecaster: an encoder-decoder transformer that reads
//! `T_OBS` DRR frames as patch tokens and emits `T_PRED` future normalized
//! tumor positions.
//!
//! The encoder embeds non-overlapping image patches (lexicographic
//! (frame, row, col) order) with a fixed sinusoidal spatio-temporal
//! encoding: the first half of each channel vector encodes the patch index
//! within its frame, the second half the frame index. The decoder runs
//! over linearly embedded 3-D position tokens under a strict causal mask,
//! cross-attending to the encoder memory; its last `T_PRED` head outputs
//! are the forecast. Training uses teacher forcing (ground-truth future
//! positions as decoder input); inference feeds the model its own
//! predictions back autoregressively, so no future information is
//! consumed.
//!
//! Layers are pre-norm (`x + Dropout(Sublayer(LayerNorm(x)))`) with a
//! final layer norm after each stack, GELU feed-forwards (smooth, so
//! finite-difference gradient audits are clean), and dropout on token
//! embeddings and sublayer outputs.

use std::collections::HashMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Element, Tape, Tensor};
use crate::dataset::mix_seed;
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Encoder and decoder depth (the stacks are equally deep).
    pub n_layers: usize,
    pub d_ff: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::paper()
    }
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn paper() -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            n_layers: 6,
            d_ff: 2048,
            patch_size: 16,
            image_size: 64,
            t_obs: 16,
            t_pred: 5,
            dropout: 0.1,
        }
    }

    /// Desk-scale configuration used by fast experiments and audits.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            ..ModelConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Parameter("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} must be even to split spatial/temporal encoding channels",
                self.d_model
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Parameter(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.t_obs == 0 || self.t_pred == 0 {
            return Err(Error::Parameter("t_obs and t_pred must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches_per_frame(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn n_encoder_tokens(&self) -> usize {
        self.t_obs * self.patches_per_frame()
    }

    /// Decoder length under teacher forcing: the observed positions plus
    /// all targets but the last (each token predicts its successor).
    pub fn n_decoder_tokens(&self) -> usize {
        self.t_obs + self.t_pred - 1
    }

    /// Total scalar parameter count, in closed form.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let p2 = self.patch_dim();
        let enc_layer = 4 * d * d + 2 * d * f + 9 * d + f;
        let dec_layer = 8 * d * d + 2 * d * f + 15 * d + f;
        (p2 * d + d)
            + self.n_layers * enc_layer
            + 2 * d
            + (3 * d + d)
            + self.n_layers * dec_layer
            + 2 * d
            + (3 * d + 3)
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    /// 2-D matrix, Glorot uniform.
    Weight,
    /// Zeros.
    Bias,
    /// Ones (layer-norm gains).
    Gain,
}

fn attention_params(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, d: usize) {
    for name in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.{name}"), vec![d, d], ParamKind::Weight));
        out.push((format!("{prefix}.b{}", &name[1..]), vec![d], ParamKind::Bias));
    }
}

fn norm_params(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gain"), vec![d], ParamKind::Gain));
    out.push((format!("{prefix}.bias"), vec![d], ParamKind::Bias));
}

fn ff_params(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, d: usize, f: usize) {
    out.push((format!("{prefix}.w1"), vec![d, f], ParamKind::Weight));
    out.push((format!("{prefix}.b1"), vec![f], ParamKind::Bias));
    out.push((format!("{prefix}.w2"), vec![f, d], ParamKind::Weight));
    out.push((format!("{prefix}.b2"), vec![d], ParamKind::Bias));
}

/// Ordered list of every parameter's name, shape, and init rule. The
/// order fixes both the init draw sequence and the checkpoint layout.
fn catalog(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let mut out = Vec::new();
    out.push(("patch_embed.w".into(), vec![cfg.patch_dim(), d], ParamKind::Weight));
    out.push(("patch_embed.b".into(), vec![d], ParamKind::Bias));
    for i in 0..cfg.n_layers {
        norm_params(&mut out, &format!("enc{i}.attn_norm"), d);
        attention_params(&mut out, &format!("enc{i}.attn"), d);
        norm_params(&mut out, &format!("enc{i}.ff_norm"), d);
        ff_params(&mut out, &format!("enc{i}.ff"), d, f);
    }
    norm_params(&mut out, "enc_out_norm", d);
    out.push(("pos_embed.w".into(), vec![3, d], ParamKind::Weight));
    out.push(("pos_embed.b".into(), vec![d], ParamKind::Bias));
    for i in 0..cfg.n_layers {
        norm_params(&mut out, &format!("dec{i}.self_norm"), d);
        attention_params(&mut out, &format!("dec{i}.self_attn"), d);
        norm_params(&mut out, &format!("dec{i}.cross_norm"), d);
        attention_params(&mut out, &format!("dec{i}.cross_attn"), d);
        norm_params(&mut out, &format!("dec{i}.ff_norm"), d);
        ff_params(&mut out, &format!("dec{i}.ff"), d, f);
    }
    norm_params(&mut out, "dec_out_norm", d);
    out.push(("head.w".into(), vec![d, 3], ParamKind::Weight));
    out.push(("head.b".into(), vec![3], ParamKind::Bias));
    out
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// All model parameters, in catalog order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// Glorot-uniform draw for a `rows × cols` matrix: uniform in
/// `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols)
        .map(|_| ((2.0 * rng.gen::<f64>() - 1.0) * bound) as f32)
        .collect()
}

impl ParamSet {
    fn from_entries(entries: Vec<ParamEntry>) -> Result<ParamSet> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let n: usize = e.shape.iter().product();
            if n != e.values.len() {
                return Err(Error::Shape(format!(
                    "parameter {} has {} values for shape {:?}",
                    e.name,
                    e.values.len(),
                    e.shape
                )));
            }
            if index.insert(e.name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate parameter name {}", e.name)));
            }
        }
        Ok(ParamSet { entries, index })
    }

    /// Initialize per the catalog: Glorot matrices, zero biases, unit
    /// gains. Deterministic per seed.
    pub fn init_glorot(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = catalog(cfg)
            .into_iter()
            .map(|(name, shape, kind)| {
                let n: usize = shape.iter().product();
                let values = match kind {
                    ParamKind::Weight => glorot_uniform(shape[0], shape[1], &mut rng),
                    ParamKind::Bias => vec![0.0; n],
                    ParamKind::Gain => vec![1.0; n],
                };
                ParamEntry { name, shape, values }
            })
            .collect();
        ParamSet::from_entries(entries)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    /// Total scalar count.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.values.iter().all(|v| v.is_finite()))
    }

    /// Put every parameter on a tape as a leaf tensor.
    pub fn bind<'t, E: Element>(&self, tape: &'t Tape<E>, requires_grad: bool) -> Result<Bound<'t, E>> {
        let mut names = Vec::with_capacity(self.entries.len());
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let values: Vec<E> = e.values.iter().map(|&v| E::from_f64(v as f64)).collect();
            tensors.push(tape.leaf(&e.shape, &values, requires_grad)?);
            names.push(e.name.clone());
        }
        Bound::from_parts(names, tensors)
    }
}

/// Parameters materialized on one tape, addressable by name.
pub struct Bound<'t, E: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<'t, E>>,
    index: HashMap<String, usize>,
}

impl<'t, E: Element> Bound<'t, E> {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<'t, E>>) -> Result<Bound<'t, E>> {
        if names.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "{} names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate parameter name {n}")));
            }
        }
        Ok(Bound { names, tensors, index })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<'t, E>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Contract(format!("model parameter {name} is not bound")))
    }

    /// Names and tensors in catalog order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<'t, E>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }
}

/// Dropout schedule for one forward pass: every site gets its own seed,
/// deterministically derived from a base seed and a running site counter.
#[derive(Debug, Clone)]
pub struct Dropout {
    p: f64,
    training: bool,
    base_seed: u64,
    counter: u64,
}

impl Dropout {
    pub fn training(p: f64, base_seed: u64) -> Dropout {
        Dropout {
            p,
            training: true,
            base_seed,
            counter: 0,
        }
    }

    /// Inference: every site is the identity.
    pub fn inference() -> Dropout {
        Dropout {
            p: 0.0,
            training: false,
            base_seed: 0,
            counter: 0,
        }
    }

    fn apply<'t, E: Element>(&mut self, x: &Tensor<'t, E>) -> Result<Tensor<'t, E>> {
        let site = self.counter;
        self.counter += 1;
        x.dropout(self.p, self.training, mix_seed(self.base_seed, "dropout-site", site))
    }
}

/// Standard sinusoidal table, row-major `n_pos × width`: channel pair
/// `(2i, 2i+1)` holds `sin`/`cos` of `pos / 10000^(2i/width)`.
pub fn sinusoid_table(n_pos: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_pos * width];
    for pos in 0..n_pos {
        for j in 0..width {
            let pair = (j - j % 2) as f64;
            let angle = pos as f64 / 10000.0_f64.powf(pair / width as f64);
            out[pos * width + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Fixed spatio-temporal encoding for the encoder tokens: the first
/// `d_model/2` channels encode the patch index within its frame, the last
/// half the frame index.
pub fn spatiotemporal_encoding(cfg: &ModelConfig) -> Vec<f64> {
    let half = cfg.d_model / 2;
    let n_patch = cfg.patches_per_frame();
    let spatial = sinusoid_table(n_patch, half);
    let temporal = sinusoid_table(cfg.t_obs, half);
    let mut out = vec![0.0; cfg.n_encoder_tokens() * cfg.d_model];
    for t in 0..cfg.t_obs {
        for p in 0..n_patch {
            let row = (t * n_patch + p) * cfg.d_model;
            out[row..row + half].copy_from_slice(&spatial[p * half..(p + 1) * half]);
            out[row + half..row + cfg.d_model].copy_from_slice(&temporal[t * half..(t + 1) * half]);
        }
    }
    out
}

fn to_elem<E: Element>(v: &[f64]) -> Vec<E> {
    v.iter().map(|&x| E::from_f64(x)).collect()
}

fn positions_matrix<E: Element>(positions: &[[f64; 3]]) -> Vec<E> {
    positions
        .iter()
        .flat_map(|p| p.iter().map(|&x| E::from_f64(x)))
        .collect()
}

/// Cut frames into patches and project them to `d_model`, producing
/// `t_obs · patches_per_frame` tokens in (frame, row, col) order.
pub fn tokenize_frames<'t, E: Element>(
    tape: &'t Tape<E>,
    cfg: &ModelConfig,
    params: &Bound<'t, E>,
    frames: &[&[f32]],
) -> Result<Tensor<'t, E>> {
    if frames.len() != cfg.t_obs {
        return Err(Error::Shape(format!(
            "expected {} frames, got {}",
            cfg.t_obs,
            frames.len()
        )));
    }
    let edge = cfg.image_size;
    let side = cfg.patches_per_side();
    let p = cfg.patch_size;
    let mut rows = Vec::with_capacity(cfg.n_encoder_tokens() * cfg.patch_dim());
    for (t, frame) in frames.iter().enumerate() {
        if frame.len() != edge * edge {
            return Err(Error::Shape(format!(
                "frame {t} holds {} pixels, expected {}",
                frame.len(),
                edge * edge
            )));
        }
        for pr in 0..side {
            for pc in 0..side {
                for py in 0..p {
                    let base = (pr * p + py) * edge + pc * p;
                    rows.extend(frame[base..base + p].iter().map(|&v| E::from_f64(v as f64)));
                }
            }
        }
    }
    let patches = tape.constant(&[cfg.n_encoder_tokens(), cfg.patch_dim()], &rows)?;
    patches
        .matmul(params.tensor("patch_embed.w")?)?
        .add_row(params.tensor("patch_embed.b")?)
}

/// Add the fixed spatio-temporal encoding onto the encoder tokens.
pub fn pos_encode<'t, E: Element>(
    tape: &'t Tape<E>,
    cfg: &ModelConfig,
    tokens: &Tensor<'t, E>,
) -> Result<Tensor<'t, E>> {
    if tokens.shape() != [cfg.n_encoder_tokens(), cfg.d_model] {
        return Err(Error::Shape(format!(
            "tokens have shape {:?}, expected [{}, {}]",
            tokens.shape(),
            cfg.n_encoder_tokens(),
            cfg.d_model
        )));
    }
    let table = tape.constant(
        &[cfg.n_encoder_tokens(), cfg.d_model],
        &to_elem::<E>(&spatiotemporal_encoding(cfg)),
    )?;
    tokens.add(&table)
}

/// Multi-head attention with separate query and key/value sources.
fn attention<'t, E: Element>(
    params: &Bound<'t, E>,
    prefix: &str,
    n_heads: usize,
    queries: &Tensor<'t, E>,
    keys_values: &Tensor<'t, E>,
    mask: Option<&Tensor<'t, E>>,
) -> Result<Tensor<'t, E>> {
    let d = queries.shape()[1];
    let dh = d / n_heads;
    let q = queries
        .matmul(params.tensor(&format!("{prefix}.wq"))?)?
        .add_row(params.tensor(&format!("{prefix}.bq"))?)?;
    let k = keys_values
        .matmul(params.tensor(&format!("{prefix}.wk"))?)?
        .add_row(params.tensor(&format!("{prefix}.bk"))?)?;
    let v = keys_values
        .matmul(params.tensor(&format!("{prefix}.wv"))?)?
        .add_row(params.tensor(&format!("{prefix}.bv"))?)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.slice_cols(h * dh..(h + 1) * dh)?;
        let kh = k.slice_cols(h * dh..(h + 1) * dh)?;
        let vh = v.slice_cols(h * dh..(h + 1) * dh)?;
        let mut scores = qh.matmul(&kh.transpose()?)?.scale(1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        heads.push(scores.softmax()?.matmul(&vh)?);
    }
    let refs: Vec<&Tensor<'t, E>> = heads.iter().collect();
    Tensor::concat_cols(&refs)?
        .matmul(params.tensor(&format!("{prefix}.wo"))?)?
        .add_row(params.tensor(&format!("{prefix}.bo"))?)
}

fn layer_norm_by<'t, E: Element>(
    params: &Bound<'t, E>,
    prefix: &str,
    x: &Tensor<'t, E>,
) -> Result<Tensor<'t, E>> {
    x.layer_norm(
        params.tensor(&format!("{prefix}.gain"))?,
        params.tensor(&format!("{prefix}.bias"))?,
        1e-5,
    )
}

fn feed_forward<'t, E: Element>(
    params: &Bound<'t, E>,
    prefix: &str,
    x: &Tensor<'t, E>,
) -> Result<Tensor<'t, E>> {
    x.matmul(params.tensor(&format!("{prefix}.w1"))?)?
        .add_row(params.tensor(&format!("{prefix}.b1"))?)?
        .gelu()?
        .matmul(params.tensor(&format!("{prefix}.w2"))?)?
        .add_row(params.tensor(&format!("{prefix}.b2"))?)
}

/// Run the encoder stack over position-encoded tokens.
pub fn encode<'t, E: Element>(
    cfg: &ModelConfig,
    params: &Bound<'t, E>,
    tokens: &Tensor<'t, E>,
    dropout: &mut Dropout,
) -> Result<Tensor<'t, E>> {
    let mut x = tokens.clone();
    for i in 0..cfg.n_layers {
        let normed = layer_norm_by(params, &format!("enc{i}.attn_norm"), &x)?;
        let att = attention(params, &format!("enc{i}.attn"), cfg.n_heads, &normed, &normed, None)?;
        x = x.add(&dropout.apply(&att)?)?;
        let normed = layer_norm_by(params, &format!("enc{i}.ff_norm"), &x)?;
        let ff = feed_forward(params, &format!("enc{i}.ff"), &normed)?;
        x = x.add(&dropout.apply(&ff)?)?;
        if !x.all_finite() {
            return Err(Error::Numeric(format!("encoder layer {i} produced non-finite values")));
        }
    }
    layer_norm_by(params, "enc_out_norm", &x)
}

/// Strictly causal additive mask: `0` at or below the diagonal, `−∞`
/// above, so masked attention weights are exactly zero after softmax.
fn causal_mask<'t, E: Element>(tape: &'t Tape<E>, n: usize) -> Result<Tensor<'t, E>> {
    let mut m = vec![E::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = E::neg_infinity();
        }
    }
    tape.constant(&[n, n], &m)
}

/// Embed position tokens and add the (full-width) sinusoidal encoding of
/// each token's time index.
fn embed_positions<'t, E: Element>(
    tape: &'t Tape<E>,
    cfg: &ModelConfig,
    params: &Bound<'t, E>,
    positions: &[[f64; 3]],
) -> Result<Tensor<'t, E>> {
    let n = positions.len();
    let raw = tape.constant(&[n, 3], &positions_matrix::<E>(positions))?;
    let embedded = raw
        .matmul(params.tensor("pos_embed.w")?)?
        .add_row(params.tensor("pos_embed.b")?)?;
    let table = tape.constant(&[n, cfg.d_model], &to_elem::<E>(&sinusoid_table(n, cfg.d_model)))?;
    embedded.add(&table)
}

/// Run the decoder stack over embedded position tokens.
fn decode_stack<'t, E: Element>(
    tape: &'t Tape<E>,
    cfg: &ModelConfig,
    params: &Bound<'t, E>,
    memory: &Tensor<'t, E>,
    tokens: &Tensor<'t, E>,
    dropout: &mut Dropout,
) -> Result<Tensor<'t, E>> {
    let n = tokens.shape()[0];
    let mask = causal_mask(tape, n)?;
    let mut x = tokens.clone();
    for i in 0..cfg.n_layers {
        let normed = layer_norm_by(params, &format!("dec{i}.self_norm"), &x)?;
        let att = attention(
            params,
            &format!("dec{i}.self_attn"),
            cfg.n_heads,
            &normed,
            &normed,
            Some(&mask),
        )?;
        x = x.add(&dropout.apply(&att)?)?;
        let normed = layer_norm_by(params, &format!("dec{i}.cross_norm"), &x)?;
        let att = attention(
            params,
            &format!("dec{i}.cross_attn"),
            cfg.n_heads,
            &normed,
            memory,
            None,
        )?;
        x = x.add(&dropout.apply(&att)?)?;
        let normed = layer_norm_by(params, &format!("dec{i}.ff_norm"), &x)?;
        let ff = feed_forward(params, &format!("dec{i}.ff"), &normed)?;
        x = x.add(&dropout.apply(&ff)?)?;
        if !x.all_finite() {
            return Err(Error::Numeric(format!("decoder layer {i} produced non-finite values")));
        }
    }
    layer_norm_by(params, "dec_out_norm", &x)
}

fn head<'t, E: Element>(params: &Bound<'t, E>, x: &Tensor<'t, E>) -> Result<Tensor<'t, E>> {
    x.matmul(params.tensor("head.w")?)?.add_row(params.tensor("head.b")?)
}

/// One parallel teacher-forced decode: input is the `t_obs` observed
/// positions followed by the first `t_pred − 1` targets; the result is
/// the last `t_pred` head outputs, where output `i` attends only to
/// tokens before time `t_obs + i`.
pub fn decode_teacher_forced<'t, E: Element>(
    tape: &'t Tape<E>,
    cfg: &ModelConfig,
    params: &Bound<'t, E>,
    memory: &Tensor<'t, E>,
    past_and_targets: &[[f64; 3]],
    dropout: &mut Dropout,
) -> Result<Tensor<'t, E>> {
    let n = cfg.n_decoder_tokens();
    if past_and_targets.len() != n {
        return Err(Error::Shape(format!(
            "teacher-forced decoder takes {} position tokens, got {}",
            n,
            past_and_targets.len()
        )));
    }
    let tokens = dropout.apply(&embed_positions(tape, cfg, params, past_and_targets)?)?;
    let out = decode_stack(tape, cfg, params, memory, &tokens, dropout)?;
    head(params, &out)?.slice_rows(n - cfg.t_pred..n)
}

/// Autoregressive decode: starting from the observed positions, feed each
/// prediction back as the next token, `t_pred` times. Inference-only —
/// consumes no target data.
pub fn decode_autoregressive<'t, E: Element>(
    tape: &'t Tape<E>,
    cfg: &ModelConfig,
    params: &Bound<'t, E>,
    memory: &Tensor<'t, E>,
    observed: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>> {
    if observed.len() != cfg.t_obs {
        return Err(Error::Shape(format!(
            "expected {} observed positions, got {}",
            cfg.t_obs,
            observed.len()
        )));
    }
    let mut dropout = Dropout::inference();
    let mut context = observed.to_vec();
    let mut out = Vec::with_capacity(cfg.t_pred);
    for _ in 0..cfg.t_pred {
        let tokens = embed_positions(tape, cfg, params, &context)?;
        let decoded = decode_stack(tape, cfg, params, memory, &tokens, &mut dropout)?;
        let last = head(params, &decoded)?
            .slice_rows(context.len() - 1..context.len())?
            .to_vec();
        let p = [last[0].to_f64(), last[1].to_f64(), last[2].to_f64()];
        out.push(p);
        context.push(p);
    }
    Ok(out)
}

/// Full teacher-forced forward pass: frames to `[t_pred, 3]` predictions.
/// This is the training graph; bind the parameters with gradients enabled
/// and attach a loss to the result.
pub fn forecast_graph<'t, E: Element>(
    tape: &'t Tape<E>,
    cfg: &ModelConfig,
    params: &Bound<'t, E>,
    frames: &[&[f32]],
    observed: &[[f64; 3]],
    target_prefix: &[[f64; 3]],
    dropout: &mut Dropout,
) -> Result<Tensor<'t, E>> {
    if observed.len() != cfg.t_obs {
        return Err(Error::Shape(format!(
            "expected {} observed positions, got {}",
            cfg.t_obs,
            observed.len()
        )));
    }
    if target_prefix.len() != cfg.t_pred - 1 {
        return Err(Error::Shape(format!(
            "teacher forcing needs the first {} targets, got {}",
            cfg.t_pred - 1,
            target_prefix.len()
        )));
    }
    let tokens = dropout.apply(&pos_encode(tape, cfg, &tokenize_frames(tape, cfg, params, frames)?)?)?;
    let memory = encode(cfg, params, &tokens, dropout)?;
    let mut sequence = Vec::with_capacity(cfg.n_decoder_tokens());
    sequence.extend_from_slice(observed);
    sequence.extend_from_slice(target_prefix);
    decode_teacher_forced(tape, cfg, params, &memory, &sequence, dropout)
}

/// A configured forecaster with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl ForecastModel {
    pub fn init_glorot(config: ModelConfig, seed: u64) -> Result<ForecastModel> {
        let params = ParamSet::init_glorot(&config, seed)?;
        Ok(ForecastModel { config, params })
    }

    /// Inference with ground-truth future positions as decoder input
    /// (used by audits; production inference is autoregressive).
    pub fn forward_teacher_forced(
        &self,
        frames: &[&[f32]],
        observed: &[[f64; 3]],
        target_prefix: &[[f64; 3]],
    ) -> Result<Vec<[f64; 3]>> {
        let tape: Tape<f32> = Tape::new();
        let params = self.params.bind(&tape, false)?;
        let mut dropout = Dropout::inference();
        let pred = forecast_graph(&tape, &self.config, &params, frames, observed, target_prefix, &mut dropout)?;
        Ok(rows3(&pred.to_vec()))
    }

    /// Standard inference: autoregressive decode over the encoder memory.
    pub fn forward_autoregressive(&self, frames: &[&[f32]], observed: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        let tape: Tape<f32> = Tape::new();
        let params = self.params.bind(&tape, false)?;
        let mut dropout = Dropout::inference();
        let tokens = dropout.apply(&pos_encode(&tape, &self.config, &tokenize_frames(&tape, &self.config, &params, frames)?)?)?;
        let memory = encode(&self.config, &params, &tokens, &mut dropout)?;
        decode_autoregressive(&tape, &self.config, &params, &memory, observed)
    }
}

fn rows3<E: Element>(flat: &[E]) -> Vec<[f64; 3]> {
    flat.chunks_exact(3)
        .map(|c| [c[0].to_f64(), c[1].to_f64(), c[2].to_f64()])
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "TMCK", version 1, little-endian; config header, then
// named parameter records with 32-bit float payloads, in catalog order.

const TMCK_MAGIC: &[u8; 4] = b"TMCK";
const TMCK_VERSION: u16 = 1;

pub fn save_checkpoint(model: &ForecastModel, path: &Path) -> Result<()> {
    if !model.params.all_finite() {
        return Err(Error::Numeric("refusing to checkpoint non-finite parameters".into()));
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(TMCK_MAGIC)?;
    w.write_all(&TMCK_VERSION.to_le_bytes())?;
    let c = &model.config;
    for v in [
        c.d_model,
        c.n_heads,
        c.n_layers,
        c.d_ff,
        c.patch_size,
        c.image_size,
        c.t_obs,
        c.t_pred,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&c.dropout.to_le_bytes())?;
    w.write_all(&(model.params.entries.len() as u32).to_le_bytes())?;
    for e in &model.params.entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[e.shape.len() as u8])?;
        for &d in &e.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &e.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format_at(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ForecastModel> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::InputNotFound(path.display().to_string())
            } else {
                Error::Io(e)
            }
        })?
        .read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != TMCK_MAGIC {
        return Err(Error::format_at(0, format!("bad magic {magic:02x?}, expected \"TMCK\"")));
    }
    let version = r.u16("version")?;
    if version != TMCK_VERSION {
        return Err(Error::format_at(4, format!("unsupported version {version}, expected {TMCK_VERSION}")));
    }
    let mut fields = [0_usize; 8];
    for f in fields.iter_mut() {
        *f = r.u32("config")? as usize;
    }
    let dropout = f64::from_le_bytes(r.take(8, "dropout")?.try_into().unwrap());
    let config = ModelConfig {
        d_model: fields[0],
        n_heads: fields[1],
        n_layers: fields[2],
        d_ff: fields[3],
        patch_size: fields[4],
        image_size: fields[5],
        t_obs: fields[6],
        t_pred: fields[7],
        dropout,
    };
    config
        .validate()
        .map_err(|e| Error::format_at(6, format!("checkpoint config is invalid: {e}")))?;
    let expected = catalog(&config);
    let n_records = r.u32("record count")? as usize;
    if n_records != expected.len() {
        return Err(Error::format_at(
            r.pos as u64 - 4,
            format!("{} parameter records, config requires {}", n_records, expected.len()),
        ));
    }
    let mut entries = Vec::with_capacity(n_records);
    for (want_name, want_shape, _) in expected {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::format_at(r.pos as u64, "parameter name is not UTF-8"))?;
        if name != want_name {
            return Err(Error::format_at(
                r.pos as u64,
                format!("parameter record {name:?} does not match config, expected {want_name:?}"),
            ));
        }
        let ndim = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        if shape != want_shape {
            return Err(Error::format_at(
                r.pos as u64,
                format!("parameter {name} has shape {shape:?}, config requires {want_shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 4, "values")?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push(ParamEntry { name, shape, values });
    }
    if r.pos != buf.len() {
        return Err(Error::format_at(
            r.pos as u64,
            format!("{} trailing bytes after the last parameter", buf.len() - r.pos),
        ));
    }
    Ok(ForecastModel {
        config,
        params: ParamSet::from_entries(entries)?,
    })
}
