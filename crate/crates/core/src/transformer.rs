//! Decoder-only transformer over the fused vocabulary.
//!
//! Pre-norm blocks (layer norm → causal multi-head attention → residual,
//! layer norm → GELU MLP → residual), learned absolute positions, a final
//! layer norm and an output head that is *not* tied to the embedding, so its
//! rows can be trained independently. Backpropagation is written by hand.
//!
//! Linear weights are stored `[in × out]`; the head is stored `[vocab × d_model]`
//! so that row `i` produces logit `i`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{self, gelu, gelu_grad, layer_norm, layer_norm_backward};
use crate::optim::{Parameters, Sgd};
use crate::vocab::VocabLayout;
use crate::Real;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("model dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size == 0 {
            return bad("vocabulary must not be empty");
        }
        Ok(())
    }

    /// Cross-checks against a vocabulary layout: same size, and room for at
    /// least one image block plus sentinels.
    pub fn check_layout(&self, layout: &VocabLayout) -> Result<()> {
        if self.vocab_size != layout.total() as usize {
            return Err(Error::LayoutMismatch { layout: layout.total() as usize, model: self.vocab_size });
        }
        if self.max_seq_len < layout.block_len() + 4 {
            return Err(Error::InvalidConfig("max_seq_len must fit one image block plus sentinels".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    /// `[d × 3d]`: query, key and value projections side by side.
    pub w_qkv: Vec<T>,
    pub b_qkv: Vec<T>,
    pub w_o: Vec<T>,
    pub b_o: Vec<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
    pub w_ff1: Vec<T>,
    pub b_ff1: Vec<T>,
    pub w_ff2: Vec<T>,
    pub b_ff2: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    pub embed: Vec<T>,
    pub pos: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: Vec<T>,
    pub final_bias: Vec<T>,
    pub head_weight: Vec<T>,
    pub head_bias: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    /// Seeded Gaussian init (std 0.02), zero biases, unit norm gains.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let mut gauss = |n: usize| -> Vec<T> { (0..n).map(|_| T::of(normal.sample(&mut rng))).collect() };
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let embed = gauss(v * d);
        let pos = gauss(config.max_seq_len * d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: vec![T::one(); d],
                ln1_bias: vec![T::zero(); d],
                w_qkv: gauss(d * 3 * d),
                b_qkv: vec![T::zero(); 3 * d],
                w_o: gauss(d * d),
                b_o: vec![T::zero(); d],
                ln2_gain: vec![T::one(); d],
                ln2_bias: vec![T::zero(); d],
                w_ff1: gauss(d * f),
                b_ff1: vec![T::zero(); f],
                w_ff2: gauss(f * d),
                b_ff2: vec![T::zero(); d],
            })
            .collect();
        Ok(Self {
            config,
            embed,
            pos,
            layers,
            final_gain: vec![T::one(); d],
            final_bias: vec![T::zero(); d],
            head_weight: gauss(v * d),
            head_bias: vec![T::zero(); v],
        })
    }

    /// Same shapes, every entry zero. Used as the gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.param_slices_mut() {
            s.fill(T::zero());
        }
        z
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Tensor names and shapes in a fixed order, matching `param_slices`.
    pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut out = vec![
            ("lm.embed".into(), vec![v, d]),
            ("lm.pos".into(), vec![config.max_seq_len, d]),
        ];
        for i in 0..config.n_layers {
            let p = |n: &str| alloc::format!("lm.layer{i}.{n}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.out.weight"), vec![d, d]),
                (p("attn.out.bias"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, f]),
                (p("mlp.fc1.bias"), vec![f]),
                (p("mlp.fc2.weight"), vec![f, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("lm.final_norm.gain".into(), vec![d]),
            ("lm.final_norm.bias".into(), vec![d]),
            ("lm.head.weight".into(), vec![v, d]),
            ("lm.head.bias".into(), vec![v]),
        ]);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        Self::tensor_layout(&self.config)
            .into_iter()
            .zip(self.param_slices())
            .map(|((n, s), t)| (n, s, t))
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [T])> {
        let layout = Self::tensor_layout(&self.config);
        layout.into_iter().zip(self.param_slices_mut()).map(|((n, s), t)| (n, s, t)).collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: self.config.max_seq_len });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenRange { id, limit: self.config.vocab_size as u32 });
        }
        Ok(())
    }

    fn trunk(&self, tokens: &[u32]) -> Trace<T> {
        let c = &self.config;
        let (t_len, d, f, h) = (tokens.len(), c.d_model, c.d_ff, c.n_heads);
        let dh = c.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();

        let mut x = vec![T::zero(); t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = &self.embed[tok as usize * d..(tok as usize + 1) * d];
            let p = &self.pos[t * d..(t + 1) * d];
            for j in 0..d {
                x[t * d + j] = e[j] + p[j];
            }
        }

        let mut layers = Vec::with_capacity(self.layers.len());
        for lp in &self.layers {
            let mut ln1 = NormTrace::new(t_len, d);
            layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias, &mut ln1.out, &mut ln1.xhat, &mut ln1.rstd);

            let mut qkv = bias_rows(&lp.b_qkv, t_len);
            linalg::gemm_nn(&mut qkv, &ln1.out, &lp.w_qkv, t_len, d, 3 * d);

            let mut probs = vec![T::zero(); h * t_len * t_len];
            let mut attn = vec![T::zero(); t_len * d];
            for hd in 0..h {
                for t in 0..t_len {
                    let q = &qkv[t * 3 * d + hd * dh..t * 3 * d + (hd + 1) * dh];
                    let row = &mut probs[(hd * t_len + t) * t_len..(hd * t_len + t) * t_len + t + 1];
                    for (u, s) in row.iter_mut().enumerate() {
                        let k = &qkv[u * 3 * d + d + hd * dh..u * 3 * d + d + (hd + 1) * dh];
                        *s = linalg::dot(q, k) * scale;
                    }
                    linalg::softmax_in_place(row);
                    let out = &mut attn[t * d + hd * dh..t * d + (hd + 1) * dh];
                    for (u, &p) in row.iter().enumerate() {
                        let v = &qkv[u * 3 * d + 2 * d + hd * dh..u * 3 * d + 2 * d + (hd + 1) * dh];
                        linalg::axpy(p, v, out);
                    }
                }
            }
            let mut proj = bias_rows(&lp.b_o, t_len);
            linalg::gemm_nn(&mut proj, &attn, &lp.w_o, t_len, d, d);
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += *pv;
            }

            let mut ln2 = NormTrace::new(t_len, d);
            layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias, &mut ln2.out, &mut ln2.xhat, &mut ln2.rstd);
            let mut pre = bias_rows(&lp.b_ff1, t_len);
            linalg::gemm_nn(&mut pre, &ln2.out, &lp.w_ff1, t_len, d, f);
            let act: Vec<T> = pre.iter().map(|&a| gelu(a)).collect();
            let mut ff = bias_rows(&lp.b_ff2, t_len);
            linalg::gemm_nn(&mut ff, &act, &lp.w_ff2, t_len, f, d);
            for (xv, fv) in x.iter_mut().zip(&ff) {
                *xv += *fv;
            }
            layers.push(LayerTrace { ln1, qkv, probs, attn, ln2, pre, act });
        }

        let mut fin = NormTrace::new(t_len, d);
        layer_norm(&x, &self.final_gain, &self.final_bias, &mut fin.out, &mut fin.xhat, &mut fin.rstd);
        Trace { layers, fin }
    }

    fn head(&self, hidden: &[T], rows: usize) -> Vec<T> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let mut logits = bias_rows(&self.head_bias, rows);
        linalg::gemm_nt(&mut logits, hidden, &self.head_weight, rows, d, v);
        logits
    }

    /// Logits `T×V` for one sequence.
    pub fn forward_sequence(&self, tokens: &[u32]) -> Result<Vec<T>> {
        self.check_tokens(tokens)?;
        let trace = self.trunk(tokens);
        Ok(self.head(&trace.fin.out, tokens.len()))
    }

    /// Logits for the last position only.
    pub fn forward_last(&self, tokens: &[u32]) -> Result<Vec<T>> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let d = self.config.d_model;
        let trace = self.trunk(tokens);
        let last = &trace.fin.out[(tokens.len() - 1) * d..];
        Ok(self.head(last, 1))
    }

    /// Final hidden states `T×d` (input to the output head).
    pub fn hidden_states(&self, tokens: &[u32]) -> Result<Vec<T>> {
        self.check_tokens(tokens)?;
        Ok(self.trunk(tokens).fin.out)
    }

    /// Logits `B×T×V` for a row-major `B×T` token matrix.
    pub fn forward(&self, tokens: &[u32], batch_size: usize) -> Result<Vec<T>> {
        if batch_size == 0 || tokens.len() % batch_size != 0 {
            return Err(crate::error::shape_err(alloc::format!("multiple of batch {batch_size}"), tokens.len()));
        }
        let t_len = tokens.len() / batch_size;
        let mut out = Vec::with_capacity(tokens.len() * self.config.vocab_size);
        for row in tokens.chunks_exact(t_len.max(1)).take(batch_size) {
            out.extend(self.forward_sequence(row)?);
        }
        Ok(out)
    }

    /// Weighted mean cross-entropy of `batch` and its gradient.
    ///
    /// With [`GradScope::Head`] only the output head receives gradient; every
    /// other tensor in the returned container stays zero.
    pub fn loss_and_grad(&self, batch: &Batch, scope: GradScope) -> Result<(f64, Self)> {
        batch.validate(self.config.vocab_size)?;
        let total_weight: f64 = batch.weights.iter().map(|&w| w as f64).sum();
        if !(total_weight > 0.0) {
            return Err(Error::EmptyLoss);
        }
        let inv_w = 1.0 / total_weight;
        let mut grad = self.zeros_like();
        let mut loss_sum = 0.0;
        let t_len = batch.seq_len;
        for b in 0..batch.batch_size {
            let weights = &batch.weights[b * t_len..(b + 1) * t_len];
            // causal: trailing positions without loss weight cannot affect earlier ones
            let Some(last) = weights.iter().rposition(|&w| w > 0.0) else { continue };
            let used = last + 1;
            let tokens = &batch.inputs[b * t_len..b * t_len + used];
            let targets = &batch.targets[b * t_len..b * t_len + used];
            self.check_tokens(tokens)?;
            let trace = self.trunk(tokens);
            let logits = self.head(&trace.fin.out, used);
            let (loss, dlogits) = cross_entropy_grad(&logits, targets, &weights[..used], inv_w, self.config.vocab_size);
            loss_sum += loss;
            self.backward(&trace, tokens, &dlogits, &mut grad, scope);
        }
        let loss = loss_sum * inv_w;
        Ok((loss, grad))
    }

    fn backward(&self, trace: &Trace<T>, tokens: &[u32], dlogits: &[T], grad: &mut Self, scope: GradScope) {
        let c = &self.config;
        let (t_len, d, f, h, v) = (tokens.len(), c.d_model, c.d_ff, c.n_heads, c.vocab_size);
        let dh = c.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();

        linalg::gemm_tn(&mut grad.head_weight, dlogits, &trace.fin.out, v, t_len, d);
        add_row_sums(&mut grad.head_bias, dlogits, t_len);
        if scope == GradScope::Head {
            return;
        }
        let mut dfin = vec![T::zero(); t_len * d];
        linalg::gemm_nn(&mut dfin, dlogits, &self.head_weight, t_len, v, d);
        let mut dx = vec![T::zero(); t_len * d];
        layer_norm_backward(
            &dfin,
            &trace.fin.xhat,
            &trace.fin.rstd,
            &self.final_gain,
            &mut dx,
            &mut grad.final_gain,
            &mut grad.final_bias,
        );

        for li in (0..self.layers.len()).rev() {
            let lp = &self.layers[li];
            let lt = &trace.layers[li];
            let lg = &mut grad.layers[li];

            // MLP branch
            linalg::gemm_tn(&mut lg.w_ff2, &lt.act, &dx, f, t_len, d);
            add_row_sums(&mut lg.b_ff2, &dx, t_len);
            let mut dact = vec![T::zero(); t_len * f];
            linalg::gemm_nt(&mut dact, &dx, &lp.w_ff2, t_len, d, f);
            for (da, &p) in dact.iter_mut().zip(&lt.pre) {
                *da *= gelu_grad(p);
            }
            linalg::gemm_tn(&mut lg.w_ff1, &lt.ln2.out, &dact, d, t_len, f);
            add_row_sums(&mut lg.b_ff1, &dact, t_len);
            let mut dh2 = vec![T::zero(); t_len * d];
            linalg::gemm_nt(&mut dh2, &dact, &lp.w_ff1, t_len, f, d);
            layer_norm_backward(
                &dh2,
                &lt.ln2.xhat,
                &lt.ln2.rstd,
                &lp.ln2_gain,
                &mut dx,
                &mut lg.ln2_gain,
                &mut lg.ln2_bias,
            );

            // attention branch
            linalg::gemm_tn(&mut lg.w_o, &lt.attn, &dx, d, t_len, d);
            add_row_sums(&mut lg.b_o, &dx, t_len);
            let mut dattn = vec![T::zero(); t_len * d];
            linalg::gemm_nt(&mut dattn, &dx, &lp.w_o, t_len, d, d);
            let mut dqkv = vec![T::zero(); t_len * 3 * d];
            let mut dp = vec![T::zero(); t_len];
            for hd in 0..h {
                for t in 0..t_len {
                    let probs = &lt.probs[(hd * t_len + t) * t_len..(hd * t_len + t) * t_len + t + 1];
                    let dout = &dattn[t * d + hd * dh..t * d + (hd + 1) * dh];
                    let mut weighted = T::zero();
                    for u in 0..=t {
                        let vrow = &lt.qkv[u * 3 * d + 2 * d + hd * dh..u * 3 * d + 2 * d + (hd + 1) * dh];
                        dp[u] = linalg::dot(dout, vrow);
                        weighted += probs[u] * dp[u];
                        let dv = &mut dqkv[u * 3 * d + 2 * d + hd * dh..u * 3 * d + 2 * d + (hd + 1) * dh];
                        linalg::axpy(probs[u], dout, dv);
                    }
                    let q_off = t * 3 * d + hd * dh;
                    for u in 0..=t {
                        let ds = probs[u] * (dp[u] - weighted) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let k_off = u * 3 * d + d + hd * dh;
                        for j in 0..dh {
                            let kj = lt.qkv[k_off + j];
                            let qj = lt.qkv[q_off + j];
                            dqkv[q_off + j] += ds * kj;
                            dqkv[k_off + j] += ds * qj;
                        }
                    }
                }
            }
            linalg::gemm_tn(&mut lg.w_qkv, &lt.ln1.out, &dqkv, d, t_len, 3 * d);
            add_row_sums(&mut lg.b_qkv, &dqkv, t_len);
            let mut dh1 = vec![T::zero(); t_len * d];
            linalg::gemm_nt(&mut dh1, &dqkv, &lp.w_qkv, t_len, 3 * d, d);
            layer_norm_backward(
                &dh1,
                &lt.ln1.xhat,
                &lt.ln1.rstd,
                &lp.ln1_gain,
                &mut dx,
                &mut lg.ln1_gain,
                &mut lg.ln1_bias,
            );
        }

        for (t, &tok) in tokens.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            linalg::axpy(T::one(), row, &mut grad.embed[tok as usize * d..(tok as usize + 1) * d]);
            linalg::axpy(T::one(), row, &mut grad.pos[t * d..(t + 1) * d]);
        }
    }
}

impl<T: Real> Parameters<T> for ModelParams<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.embed, &self.pos];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain[..],
                &l.ln1_bias,
                &l.w_qkv,
                &l.b_qkv,
                &l.w_o,
                &l.b_o,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.w_ff1,
                &l.b_ff1,
                &l.w_ff2,
                &l.b_ff2,
            ]);
        }
        out.extend([&self.final_gain[..], &self.final_bias, &self.head_weight, &self.head_bias]);
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![&mut self.embed, &mut self.pos];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain[..],
                &mut l.ln1_bias,
                &mut l.w_qkv,
                &mut l.b_qkv,
                &mut l.w_o,
                &mut l.b_o,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w_ff1,
                &mut l.b_ff1,
                &mut l.w_ff2,
                &mut l.b_ff2,
            ]);
        }
        out.extend([
            &mut self.final_gain[..],
            &mut self.final_bias,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    Full,
    Head,
}

struct NormTrace<T> {
    out: Vec<T>,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> NormTrace<T> {
    fn new(rows: usize, d: usize) -> Self {
        Self { out: vec![T::zero(); rows * d], xhat: vec![T::zero(); rows * d], rstd: vec![T::zero(); rows] }
    }
}

struct LayerTrace<T> {
    ln1: NormTrace<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2: NormTrace<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

struct Trace<T> {
    layers: Vec<LayerTrace<T>>,
    fin: NormTrace<T>,
}

fn bias_rows<T: Real>(bias: &[T], rows: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * bias.len());
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

fn add_row_sums<T: Real>(acc: &mut [T], m: &[T], rows: usize) {
    let n = acc.len();
    for r in 0..rows {
        linalg::axpy(T::one(), &m[r * n..(r + 1) * n], acc);
    }
}

/// Per-row `-log softmax(logits)[target]`, computed stably in `f64`.
pub fn token_nll<T: Real>(logits: &[T], target: u32) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let sum: f64 = logits.iter().map(|v| num_traits::Float::exp(v.as_f64() - max)).sum();
    num_traits::Float::ln(sum) + max - logits[target as usize].as_f64()
}

/// Weighted NLL sum and `dlogits` scaled by `scale` (normally `1/Σw`).
fn cross_entropy_grad<T: Real>(logits: &[T], targets: &[u32], weights: &[f32], scale: f64, v: usize) -> (f64, Vec<T>) {
    let mut dlogits = vec![T::zero(); logits.len()];
    let mut loss = 0.0;
    for (t, (&target, &w)) in targets.iter().zip(weights).enumerate() {
        if w <= 0.0 {
            continue;
        }
        let row = &logits[t * v..(t + 1) * v];
        let drow = &mut dlogits[t * v..(t + 1) * v];
        loss += w as f64 * token_nll(row, target);
        drow.copy_from_slice(row);
        linalg::softmax_in_place(drow);
        drow[target as usize] -= T::one();
        let s = T::of(w as f64 * scale);
        for x in drow.iter_mut() {
            *x *= s;
        }
    }
    (loss, dlogits)
}

/// Mean cross-entropy over the positions where `mask` is true.
///
/// `logits` is `B×T×V` flattened, `targets` and `mask` are `B×T`.
pub fn loss<T: Real>(logits: &[T], targets: &[u32], mask: &[bool], vocab_size: usize) -> Result<f64> {
    if targets.len() != mask.len() || logits.len() != targets.len() * vocab_size {
        return Err(crate::error::shape_err(targets.len() * vocab_size, logits.len()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if target as usize >= vocab_size {
            return Err(Error::TokenRange { id: target, limit: vocab_size as u32 });
        }
        sum += token_nll(&logits[i * vocab_size..(i + 1) * vocab_size], target);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(sum / count as f64)
}

/// Next-token training batch. `targets[b][t]` is the token following
/// `inputs[b][t]`; a weight of zero removes the position from the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub weights: Vec<f32>,
}

impl Batch {
    /// Packs full sequences (`BOS … EOS`) into a padded batch of width
    /// `seq_len`; `weight` assigns a loss weight from the target token id.
    pub fn from_sequences(
        sequences: &[Vec<u32>],
        seq_len: usize,
        pad: u32,
        weight: impl Fn(u32) -> f32,
    ) -> Result<Self> {
        let b = sequences.len();
        let mut inputs = vec![pad; b * seq_len];
        let mut targets = vec![pad; b * seq_len];
        let mut weights = vec![0.0f32; b * seq_len];
        for (i, seq) in sequences.iter().enumerate() {
            let n = seq.len().saturating_sub(1);
            if n > seq_len {
                return Err(Error::SequenceTooLong { len: n, max: seq_len });
            }
            for t in 0..n {
                inputs[i * seq_len + t] = seq[t];
                targets[i * seq_len + t] = seq[t + 1];
                weights[i * seq_len + t] = if seq[t + 1] == pad { 0.0 } else { weight(seq[t + 1]) };
            }
        }
        Ok(Self { batch_size: b, seq_len, inputs, targets, weights })
    }

    pub fn mask(&self) -> Vec<bool> {
        self.weights.iter().map(|&w| w > 0.0).collect()
    }

    fn validate(&self, vocab: usize) -> Result<()> {
        let n = self.batch_size * self.seq_len;
        if self.inputs.len() != n || self.targets.len() != n || self.weights.len() != n {
            return Err(crate::error::shape_err(n, self.inputs.len()));
        }
        if let Some(&id) = self.targets.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::TokenRange { id, limit: vocab as u32 });
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::NonFinite("loss weights"));
        }
        Ok(())
    }
}

/// Optimizer state for full-model training.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub optimizer: Sgd<T>,
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(momentum: f64, clip_norm: Option<f64>) -> Self {
        Self { optimizer: Sgd::new(momentum, clip_norm), step: 0 }
    }
}

/// One SGD update of every parameter. Returns the pre-update loss.
pub fn train_step<T: Real>(
    params: &mut ModelParams<T>,
    state: &mut TrainState<T>,
    batch: &Batch,
    learning_rate: f64,
) -> Result<f64> {
    let (loss, grad) = params.loss_and_grad(batch, GradScope::Full)?;
    state.step += 1;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: state.step, learning_rate, loss });
    }
    state.optimizer.step(params.param_slices_mut(), grad.param_slices(), learning_rate);
    Ok(loss)
}
