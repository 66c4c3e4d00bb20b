use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{Backend, Eager, Matrix, Rng};

/// [EOS]-token feature after the final layer norm.
pub type PromptEmbedding = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// 6 layers, width 32, MLP width 128, 4 heads, 16 positions.
    pub fn toy(vocab_size: usize) -> Self {
        Self { n_layers: 6, d_model: 32, d_ff: 128, n_heads: 4, max_seq: 16, vocab_size }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Per-layer weights, generic over the handle type so the same struct holds
/// shared matrices or tape nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    /// `d_model × d_ff`, applied as `x · W_fc`.
    pub w_fc: T,
    pub b_fc: T,
    /// `d_model × d_ff`: the associative memory `v = W_proj · k`.
    pub w_proj: T,
}

const LAYER_TENSORS: [&str; 11] =
    ["ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w_fc", "b_fc", "w_proj"];

impl<T> LayerWeights<T> {
    fn as_array(&self) -> [&T; 11] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
        ]
    }

    fn from_array(a: [T; 11]) -> Self {
        let [ln1_gain, ln1_bias, w_q, w_k, w_v, w_o, ln2_gain, ln2_bias, w_fc, b_fc, w_proj] = a;
        Self { ln1_gain, ln1_bias, w_q, w_k, w_v, w_o, ln2_gain, ln2_bias, w_fc, b_fc, w_proj }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LayerWeights<U> {
        LayerWeights::from_array(self.as_array().map(&mut f))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
}

impl<T> EncoderWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderWeights<U> {
        EncoderWeights {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            lnf_gain: f(&self.lnf_gain),
            lnf_bias: f(&self.lnf_bias),
        }
    }

    /// Tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("encoder.tok_emb".to_string(), &self.tok_emb), ("encoder.pos_emb".to_string(), &self.pos_emb)];
        for (l, lw) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(lw.as_array()) {
                out.push((format!("encoder.layer{l}.{name}"), t));
            }
        }
        out.push(("encoder.lnf_gain".to_string(), &self.lnf_gain));
        out.push(("encoder.lnf_bias".to_string(), &self.lnf_bias));
        out
    }
}

/// Substitutes `v → v + δ` at one token of one layer's MLP output.
#[derive(Debug, Clone, PartialEq)]
pub struct HookSpec {
    pub layer: usize,
    pub position: usize,
    pub delta: Vec<f64>,
}

/// Intermediate activations of one eager forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Residual stream entering each layer.
    pub inputs: Vec<Arc<Matrix>>,
    /// Residual stream after attention, before the MLP.
    pub mids: Vec<Arc<Matrix>>,
    /// MLP keys `σ(W_fc · LN(h))`, one row per token.
    pub keys: Vec<Arc<Matrix>>,
    /// MLP outputs (after any hook), one row per token.
    pub values: Vec<Arc<Matrix>>,
    pub output: Arc<Matrix>,
    pub embedding: PromptEmbedding,
}

/// Toy causal transformer text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    weights: EncoderWeights<Arc<Matrix>>,
}

fn one_hot(indices: impl ExactSizeIterator<Item = usize>, width: usize) -> Matrix {
    let n = indices.len();
    let mut m = Matrix::zeros(n, width);
    for (i, j) in indices.enumerate() {
        m.set(i, j, 1.0);
    }
    m
}

pub(crate) fn embed<B: Backend>(
    b: &mut B,
    w: &EncoderWeights<B::T>,
    cfg: &EncoderConfig,
    ids: &[u32],
) -> B::T {
    let tok = Arc::new(one_hot(ids.iter().map(|&i| i as usize), cfg.vocab_size));
    let pos = Arc::new(one_hot(0..ids.len(), cfg.max_seq));
    let tok = b.input(&tok);
    let pos = b.input(&pos);
    let e = b.matmul(&tok, &w.tok_emb);
    let p = b.matmul(&pos, &w.pos_emb);
    b.add(&e, &p)
}

pub(crate) fn attention<B: Backend>(
    b: &mut B,
    lw: &LayerWeights<B::T>,
    cfg: &EncoderConfig,
    x: &B::T,
) -> B::T {
    let a = b.layer_norm(x, &lw.ln1_gain, &lw.ln1_bias);
    let q = b.matmul(&a, &lw.w_q);
    let k = b.matmul(&a, &lw.w_k);
    let v = b.matmul(&a, &lw.w_v);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = b.slice_cols(&q, h * dh, dh);
        let kh = b.slice_cols(&k, h * dh, dh);
        let vh = b.slice_cols(&v, h * dh, dh);
        let s = b.matmul_t(&qh, &kh);
        let s = b.scale(&s, scale);
        let p = b.softmax(&s, true);
        heads.push(b.matmul(&p, &vh));
    }
    let o = b.concat_cols(&heads);
    let o = b.matmul(&o, &lw.w_o);
    b.add(x, &o)
}

pub(crate) fn mlp_keys<B: Backend>(b: &mut B, lw: &LayerWeights<B::T>, mid: &B::T) -> B::T {
    let h = b.layer_norm(mid, &lw.ln2_gain, &lw.ln2_bias);
    let h = b.matmul(&h, &lw.w_fc);
    let h = b.add_row_broadcast(&h, &lw.b_fc);
    b.gelu(&h)
}

pub(crate) fn mlp_values<B: Backend>(b: &mut B, lw: &LayerWeights<B::T>, keys: &B::T) -> B::T {
    b.matmul_t(keys, &lw.w_proj)
}

/// Closes a layer: optional `v → v + δ` at `position`, then the residual add.
pub(crate) fn close_layer<B: Backend>(
    b: &mut B,
    mid: &B::T,
    values: &B::T,
    hook: Option<(usize, &B::T)>,
) -> (B::T, B::T) {
    let values = match hook {
        Some((pos, delta)) => b.add_to_row(values, pos, delta),
        None => values.clone(),
    };
    let out = b.add(mid, &values);
    (values, out)
}

pub(crate) fn readout<B: Backend>(b: &mut B, w: &EncoderWeights<B::T>, x: &B::T, last: usize) -> B::T {
    let eos = b.row(x, last);
    b.layer_norm(&eos, &w.lnf_gain, &w.lnf_bias)
}

/// Runs layers `from..` on the backend starting at a residual state.
pub(crate) fn run_layers<B: Backend>(
    b: &mut B,
    w: &EncoderWeights<B::T>,
    cfg: &EncoderConfig,
    mut x: B::T,
    from: usize,
) -> B::T {
    for lw in &w.layers[from..cfg.n_layers] {
        let mid = attention(b, lw, cfg, &x);
        let keys = mlp_keys(b, lw, &mid);
        let values = mlp_values(b, lw, &keys);
        x = close_layer(b, &mid, &values, None).1;
    }
    x
}

/// Eager prefix of a hooked forward pass: everything up to the hooked
/// layer's MLP output, which does not depend on δ.
#[derive(Debug, Clone)]
pub struct HookPrefix {
    pub layer: usize,
    pub position: usize,
    pub seq_len: usize,
    pub mid: Arc<Matrix>,
    pub values: Arc<Matrix>,
}

impl EncoderModel {
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Self {
        let d = config.d_model;
        let ff = config.d_ff;
        let ones = |n| Arc::new(Matrix::from_vec(1, n, vec![1.0; n]));
        let zeros = |n| Arc::new(Matrix::zeros(1, n));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut r = rng.split(l as u64);
            let std_d = 1.0 / (d as f64).sqrt();
            layers.push(LayerWeights {
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                w_q: Arc::new(r.normal_matrix(d, d, std_d)),
                w_k: Arc::new(r.normal_matrix(d, d, std_d)),
                w_v: Arc::new(r.normal_matrix(d, d, std_d)),
                w_o: Arc::new(r.normal_matrix(d, d, std_d)),
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
                w_fc: Arc::new(r.normal_matrix(d, ff, std_d)),
                b_fc: zeros(ff),
                w_proj: Arc::new(r.normal_matrix(d, ff, 1.0 / (ff as f64).sqrt())),
            });
        }
        let mut r = rng.split_str("embeddings");
        let weights = EncoderWeights {
            tok_emb: Arc::new(r.normal_matrix(config.vocab_size, d, 1.0)),
            pos_emb: Arc::new(r.normal_matrix(config.max_seq, d, 0.3)),
            layers,
            lnf_gain: ones(d),
            lnf_bias: zeros(d),
        };
        Self { config, weights }
    }

    pub fn from_weights(config: EncoderConfig, weights: EncoderWeights<Arc<Matrix>>) -> Result<Self> {
        let d = config.d_model;
        let ff = config.d_ff;
        let check = |name: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() != shape {
                return Err(Error::DimensionMismatch(format!("{name}: expected {shape:?}, got {:?}", m.shape())));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
            Ok(())
        };
        if config.d_model % config.n_heads != 0 {
            return Err(Error::InvalidConfig("d_model must be divisible by n_heads".into()));
        }
        if weights.layers.len() != config.n_layers {
            return Err(Error::DimensionMismatch("layer count".into()));
        }
        check("tok_emb", &weights.tok_emb, (config.vocab_size, d))?;
        check("pos_emb", &weights.pos_emb, (config.max_seq, d))?;
        check("lnf_gain", &weights.lnf_gain, (1, d))?;
        check("lnf_bias", &weights.lnf_bias, (1, d))?;
        for lw in &weights.layers {
            let shapes = [(1, d), (1, d), (d, d), (d, d), (d, d), (d, d), (1, d), (1, d), (d, ff), (1, ff), (d, ff)];
            for ((name, m), shape) in LAYER_TENSORS.iter().zip(lw.as_array()).zip(shapes) {
                check(name, m, shape)?;
            }
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn weights(&self) -> &EncoderWeights<Arc<Matrix>> {
        &self.weights
    }

    /// The editable memory `W_proj` of `layer` (`d_model × d_ff`).
    pub fn w_proj(&self, layer: usize) -> &Matrix {
        &self.weights.layers[layer].w_proj
    }

    /// A new model with `W_proj` of `layer` replaced. `self` is untouched.
    pub fn with_w_proj(&self, layer: usize, w: Matrix) -> Result<Self> {
        if layer >= self.config.n_layers {
            return Err(Error::InvalidHook(format!("layer {layer} out of range")));
        }
        if w.shape() != self.w_proj(layer).shape() {
            return Err(Error::DimensionMismatch(format!(
                "W_proj replacement {:?} vs {:?}",
                w.shape(),
                self.w_proj(layer).shape()
            )));
        }
        let mut out = self.clone();
        out.weights.layers[layer].w_proj = Arc::new(w);
        Ok(out)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() < 2 || ids.len() > self.config.max_seq {
            return Err(Error::InvalidHook(format!(
                "sequence length {} outside 2..={}",
                ids.len(),
                self.config.max_seq
            )));
        }
        if ids.iter().any(|&i| i as usize >= self.config.vocab_size) {
            return Err(Error::UnknownToken(format!("id beyond vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    pub fn validate_hook(&self, hook: &HookSpec, seq_len: usize) -> Result<()> {
        if hook.layer >= self.config.n_layers {
            return Err(Error::InvalidHook(format!("layer {} >= {}", hook.layer, self.config.n_layers)));
        }
        if hook.position >= seq_len {
            return Err(Error::InvalidHook(format!("position {} >= length {seq_len}", hook.position)));
        }
        if hook.delta.len() != self.config.d_model {
            return Err(Error::InvalidHook(format!(
                "offset has dimension {}, expected {}",
                hook.delta.len(),
                self.config.d_model
            )));
        }
        Ok(())
    }

    /// Eager forward pass recording every layer.
    pub fn trace(&self, ids: &[u32], hook: Option<&HookSpec>) -> Result<Trace> {
        self.check_ids(ids)?;
        if let Some(h) = hook {
            self.validate_hook(h, ids.len())?;
        }
        let cfg = &self.config;
        let w = &self.weights;
        let b = &mut Eager;
        let delta = hook.map(|h| Arc::new(Matrix::row_vector(&h.delta)));
        let mut x = embed(b, w, cfg, ids);
        let mut trace = Trace {
            inputs: Vec::with_capacity(cfg.n_layers),
            mids: Vec::with_capacity(cfg.n_layers),
            keys: Vec::with_capacity(cfg.n_layers),
            values: Vec::with_capacity(cfg.n_layers),
            output: Arc::clone(&x),
            embedding: Vec::new(),
        };
        for (l, lw) in w.layers.iter().enumerate() {
            let mid = attention(b, lw, cfg, &x);
            let keys = mlp_keys(b, lw, &mid);
            let values = mlp_values(b, lw, &keys);
            let hk = match (hook, &delta) {
                (Some(h), Some(d)) if h.layer == l => Some((h.position, d)),
                _ => None,
            };
            let (values, out) = close_layer(b, &mid, &values, hk);
            trace.inputs.push(x);
            trace.mids.push(mid);
            trace.keys.push(keys);
            trace.values.push(values);
            x = out;
        }
        let e = readout(b, w, &x, ids.len() - 1);
        trace.output = x;
        trace.embedding = e.data().to_vec();
        Ok(trace)
    }

    pub fn encode_ids(&self, ids: &[u32], hook: Option<&HookSpec>) -> Result<PromptEmbedding> {
        Ok(self.trace(ids, hook)?.embedding)
    }

    pub fn encode(&self, vocab: &Vocabulary, prompt: &str, hook: Option<&HookSpec>) -> Result<PromptEmbedding> {
        self.encode_ids(&vocab.tokenize(prompt)?, hook)
    }

    /// Runs the unhooked prefix up to `layer`'s MLP output.
    pub fn hook_prefix(&self, ids: &[u32], layer: usize, position: usize) -> Result<HookPrefix> {
        self.check_ids(ids)?;
        let probe = HookSpec { layer, position, delta: vec![0.0; self.config.d_model] };
        self.validate_hook(&probe, ids.len())?;
        let cfg = &self.config;
        let w = &self.weights;
        let b = &mut Eager;
        let mut x = embed(b, w, cfg, ids);
        x = run_layers_until(b, w, cfg, x, layer);
        let lw = &w.layers[layer];
        let mid = attention(b, lw, cfg, &x);
        let keys = mlp_keys(b, lw, &mid);
        let values = mlp_values(b, lw, &keys);
        Ok(HookPrefix { layer, position, seq_len: ids.len(), mid, values })
    }

    /// Finishes a hooked pass from its prefix with offset `delta` (a `1 × d`
    /// handle) on any backend. Matches [`trace`](Self::trace) with the same
    /// hook bit for bit.
    pub fn embed_from_prefix<B: Backend>(
        &self,
        b: &mut B,
        w: &EncoderWeights<B::T>,
        prefix: &HookPrefix,
        delta: &B::T,
    ) -> B::T {
        let mid = b.input(&prefix.mid);
        let values = b.input(&prefix.values);
        let (_, x) = close_layer(b, &mid, &values, Some((prefix.position, delta)));
        let x = run_layers(b, w, &self.config, x, prefix.layer + 1);
        readout(b, w, &x, prefix.seq_len - 1)
    }

    /// Weight handles on a backend (constants for both executors).
    pub fn weights_on<B: Backend>(&self, b: &mut B) -> EncoderWeights<B::T> {
        self.weights.map(|m| b.input(m))
    }

    /// Token position of the last subject token in a tokenized prompt.
    pub fn subject_position(vocab: &Vocabulary, prompt: &str, subject: &str) -> Result<usize> {
        subject_position(vocab, prompt, subject)
    }

    /// Mean over prompts of the layer-`layer` key at the last subject token.
    pub fn extract_key(&self, vocab: &Vocabulary, layer: usize, prompts: &[String], subject: &str) -> Result<Vec<f64>> {
        if layer >= self.config.n_layers {
            return Err(Error::InvalidHook(format!("layer {layer} out of range")));
        }
        if prompts.is_empty() {
            return Err(Error::InvalidRequest("key extraction needs at least one prompt".into()));
        }
        let mut acc = vec![0.0; self.config.d_ff];
        for p in prompts {
            let ids = vocab.tokenize(p)?;
            let pos = subject_position(vocab, p, subject)?;
            let trace = self.trace(&ids, None)?;
            for (a, k) in acc.iter_mut().zip(trace.keys[layer].row(pos)) {
                *a += k;
            }
        }
        let n = prompts.len() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    /// `v = W_proj(layer) · k`.
    pub fn read_value(&self, layer: usize, key: &[f64]) -> Result<Vec<f64>> {
        if layer >= self.config.n_layers {
            return Err(Error::InvalidHook(format!("layer {layer} out of range")));
        }
        self.w_proj(layer).matvec(key)
    }
}

fn run_layers_until<B: Backend>(
    b: &mut B,
    w: &EncoderWeights<B::T>,
    cfg: &EncoderConfig,
    mut x: B::T,
    until: usize,
) -> B::T {
    for lw in &w.layers[..until] {
        let mid = attention(b, lw, cfg, &x);
        let keys = mlp_keys(b, lw, &mid);
        let values = mlp_values(b, lw, &keys);
        x = close_layer(b, &mid, &values, None).1;
    }
    x
}

/// Position (in token ids, counting [BOS]) of the final token of the first
/// full occurrence of `subject` in `prompt`.
pub fn subject_position(vocab: &Vocabulary, prompt: &str, subject: &str) -> Result<usize> {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    let subj: Vec<&str> = subject.split_whitespace().collect();
    let not_found = || Error::SubjectNotFound { prompt: prompt.to_string(), subject: subject.to_string() };
    if subj.is_empty() || subj.len() > words.len() {
        return Err(not_found());
    }
    for w in &words {
        if vocab.id(w).is_none() {
            return Err(Error::UnknownToken(w.to_string()));
        }
    }
    let start = (0..=words.len() - subj.len())
        .find(|&s| words[s..s + subj.len()] == subj[..])
        .ok_or_else(not_found)?;
    Ok(start + subj.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GradTape, Matrix};

    fn setup() -> (Vocabulary, EncoderModel) {
        let vocab = Vocabulary::new(["a", "photo", "of", "red", "square", "blue", "ring", "big"]).unwrap();
        let model = EncoderModel::init(EncoderConfig::toy(vocab.len()), &mut Rng::new(3));
        (vocab, model)
    }

    #[test]
    fn zero_hook_is_bit_identical() {
        let (vocab, model) = setup();
        let plain = model.encode(&vocab, "a photo of red square", None).unwrap();
        for layer in 0..6 {
            let hook = HookSpec { layer, position: 5, delta: vec![0.0; 32] };
            let hooked = model.encode(&vocab, "a photo of red square", Some(&hook)).unwrap();
            assert_eq!(plain, hooked);
        }
    }

    #[test]
    fn hook_only_touches_its_position() {
        let (vocab, model) = setup();
        let ids = vocab.tokenize("a photo of red square").unwrap();
        let mut rng = Rng::new(1);
        let hook = HookSpec { layer: 2, position: 3, delta: rng.normal_vec(32) };
        let plain = model.trace(&ids, None).unwrap();
        let hooked = model.trace(&ids, Some(&hook)).unwrap();
        for i in 0..ids.len() {
            if i == 3 {
                let expect: Vec<f64> = plain.values[2].row(i).iter().zip(&hook.delta).map(|(v, d)| v + d).collect();
                assert_eq!(hooked.values[2].row(i), &expect[..]);
            } else {
                assert_eq!(hooked.values[2].row(i), plain.values[2].row(i));
            }
        }
        for l in 0..2 {
            assert_eq!(hooked.values[l], plain.values[l]);
        }
        assert_eq!(hooked.mids[2], plain.mids[2]);
        assert_ne!(hooked.embedding, plain.embedding);
    }

    #[test]
    fn invalid_hooks_are_rejected() {
        let (vocab, model) = setup();
        let bad = [
            HookSpec { layer: 6, position: 1, delta: vec![0.0; 32] },
            HookSpec { layer: 0, position: 9, delta: vec![0.0; 32] },
            HookSpec { layer: 0, position: 1, delta: vec![0.0; 3] },
        ];
        for h in bad {
            assert!(matches!(model.encode(&vocab, "red square", Some(&h)), Err(Error::InvalidHook(_))));
        }
    }

    #[test]
    fn prefix_path_matches_full_hooked_pass() {
        let (vocab, model) = setup();
        let ids = vocab.tokenize("a big blue ring").unwrap();
        let delta = Rng::new(4).normal_vec(32);
        let hook = HookSpec { layer: 1, position: 4, delta: delta.clone() };
        let full = model.encode_ids(&ids, Some(&hook)).unwrap();
        let prefix = model.hook_prefix(&ids, 1, 4).unwrap();
        let mut tape = GradTape::new();
        let w = model.weights_on(&mut tape);
        let d = tape.leaf(Matrix::row_vector(&delta));
        let e = model.embed_from_prefix(&mut tape, &w, &prefix, &d);
        assert_eq!(tape.value(e).data(), &full[..]);
    }

    #[test]
    fn subject_position_uses_last_subject_token() {
        let (vocab, _) = setup();
        assert_eq!(subject_position(&vocab, "a photo of red square", "red square").unwrap(), 5);
        assert_eq!(subject_position(&vocab, "red square", "square").unwrap(), 2);
        assert!(matches!(
            subject_position(&vocab, "a photo of red square", "blue ring"),
            Err(Error::SubjectNotFound { .. })
        ));
    }

    #[test]
    fn extract_key_is_mean_of_single_prompt_keys() {
        let (vocab, model) = setup();
        let p1 = vec!["a photo of red square".to_string()];
        let p2 = vec!["big red square".to_string()];
        let k1 = model.extract_key(&vocab, 2, &p1, "red square").unwrap();
        assert_eq!(k1, model.extract_key(&vocab, 2, &p1, "red square").unwrap());
        let k2 = model.extract_key(&vocab, 2, &p2, "red square").unwrap();
        let both = model.extract_key(&vocab, 2, &[p1[0].clone(), p2[0].clone()], "red square").unwrap();
        for i in 0..k1.len() {
            assert!((both[i] - 0.5 * (k1[i] + k2[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn read_value_basics() {
        let (_, model) = setup();
        assert_eq!(model.read_value(3, &vec![0.0; 128]).unwrap(), vec![0.0; 32]);
        let mut e = vec![0.0; 128];
        e[7] = 1.0;
        assert_eq!(model.read_value(3, &e).unwrap(), model.w_proj(3).col(7));
        assert!(matches!(model.read_value(3, &[1.0; 5]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn read_value_matches_forward_pass_output() {
        let (vocab, model) = setup();
        let prompts = vec!["a photo of red square".to_string(), "big red square".to_string()];
        let layer = 3;
        let key = model.extract_key(&vocab, layer, &prompts, "red square").unwrap();
        let v = model.read_value(layer, &key).unwrap();
        let mut expect = vec![0.0; 32];
        for p in &prompts {
            let ids = vocab.tokenize(p).unwrap();
            let pos = subject_position(&vocab, p, "red square").unwrap();
            let tr = model.trace(&ids, None).unwrap();
            for (e, x) in expect.iter_mut().zip(tr.values[layer].row(pos)) {
                *e += x / prompts.len() as f64;
            }
        }
        for (a, b) in v.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn editing_a_layer_is_local() {
        let (vocab, model) = setup();
        let prompts = vec!["a photo of red square".to_string()];
        let mut w = model.w_proj(2).clone();
        w.data_mut()[5] += 0.5;
        let edited = model.with_w_proj(2, w).unwrap();
        let ids = vocab.tokenize(&prompts[0]).unwrap();
        let (a, b) = (model.trace(&ids, None).unwrap(), edited.trace(&ids, None).unwrap());
        for l in 0..=2 {
            assert_eq!(a.inputs[l], b.inputs[l]);
            assert_eq!(a.mids[l], b.mids[l]);
            assert_eq!(a.keys[l], b.keys[l]);
        }
        assert_ne!(a.values[2], b.values[2]);
        let k2 = model.extract_key(&vocab, 2, &prompts, "red square").unwrap();
        assert_eq!(k2, edited.extract_key(&vocab, 2, &prompts, "red square").unwrap());
        let k3 = model.extract_key(&vocab, 3, &prompts, "red square").unwrap();
        assert_ne!(k3, edited.extract_key(&vocab, 3, &prompts, "red square").unwrap());
    }
}
