//! Selective fine-tuning: only the output-head rows (weight row and bias
//! entry) of image token ids are updated, everything else stays frozen.
//!
//! The freeze is applied at update time. Frozen rows are never written and
//! no optimizer state exists for them, so the guarantee is exact for any
//! optimizer configuration.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::optim::Parameters;
use crate::transformer::{Batch, GradScope, ModelConfig, ModelParams};
use crate::vocab::{TokenClass, VocabLayout};
use crate::Real;

/// Which output-head rows are trainable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableMask {
    rows: Vec<bool>,
}

impl TrainableMask {
    pub fn rows(&self) -> &[bool] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count(&self) -> usize {
        self.rows.iter().filter(|&&r| r).count()
    }

    pub fn trainable_rows(&self) -> Vec<usize> {
        self.rows.iter().enumerate().filter_map(|(i, &r)| r.then_some(i)).collect()
    }
}

/// Mask that is true exactly on the image token ids.
pub fn build_mask(layout: &VocabLayout) -> TrainableMask {
    let rows = (0..layout.total()).map(|id| layout.is_image(id)).collect();
    TrainableMask { rows }
}

/// Variant that also trains the BOI and EOI rows.
pub fn build_mask_with_sentinels(layout: &VocabLayout) -> TrainableMask {
    let mut mask = build_mask(layout);
    mask.rows[layout.boi() as usize] = true;
    mask.rows[layout.eoi() as usize] = true;
    mask
}

/// `K · (d_model + 1)`: one head weight row and one bias entry per image id.
pub fn count_trainable(layout: &VocabLayout, config: &ModelConfig) -> u64 {
    layout.image_vocab() as u64 * (config.d_model as u64 + 1)
}

/// Loss weight used during fine-tuning: image tokens and the image
/// delimiters carry loss, text and other sentinels do not.
pub fn finetune_weight(layout: &VocabLayout, target: u32) -> f32 {
    match layout.classify(target) {
        Some(TokenClass::Image | TokenClass::Boi | TokenClass::Eoi) => 1.0,
        _ => 0.0,
    }
}

/// Momentum SGD restricted to the trainable head rows.
#[derive(Debug, Clone)]
pub struct HeadOptimizer<T> {
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    /// `(d_model + 1)` entries per trainable row, in row order.
    velocity: Vec<T>,
    step: u64,
}

impl<T: Real> HeadOptimizer<T> {
    pub fn new(momentum: f64, clip_norm: Option<f64>) -> Self {
        Self { momentum, clip_norm, velocity: Vec::new(), step: 0 }
    }

    pub fn plain() -> Self {
        Self::new(0.0, None)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Entries of optimizer state currently held.
    pub fn state_len(&self) -> usize {
        self.velocity.len()
    }
}

/// Full forward pass, head gradient, update of the masked rows only.
/// Returns the pre-update loss.
pub fn finetune_step<T: Real>(
    params: &mut ModelParams<T>,
    mask: &TrainableMask,
    opt: &mut HeadOptimizer<T>,
    batch: &Batch,
    learning_rate: f64,
) -> Result<f64> {
    let vocab = params.config().vocab_size;
    if mask.len() != vocab {
        return Err(Error::MaskMismatch { mask: mask.len(), vocab });
    }
    let (loss, grad) = params.loss_and_grad(batch, GradScope::Head)?;
    opt.step += 1;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: opt.step, learning_rate, loss });
    }
    let d = params.config().d_model;
    let rows = mask.trainable_rows();
    if opt.momentum != 0.0 && opt.velocity.len() != rows.len() * (d + 1) {
        opt.velocity = vec![T::zero(); rows.len() * (d + 1)];
    }

    let scale = match opt.clip_norm {
        Some(max) => {
            let sq: f64 = rows
                .iter()
                .flat_map(|&r| grad.head_weight[r * d..(r + 1) * d].iter().chain(core::iter::once(&grad.head_bias[r])))
                .map(|g| g.as_f64() * g.as_f64())
                .sum();
            let norm = sq.sqrt();
            if norm > max { T::of(max / norm) } else { T::one() }
        }
        None => T::one(),
    };
    let lr = T::of(learning_rate);
    let mu = T::of(opt.momentum);
    for (slot, &r) in rows.iter().enumerate() {
        let w = &mut params.head_weight[r * d..(r + 1) * d];
        let gw = &grad.head_weight[r * d..(r + 1) * d];
        if opt.momentum == 0.0 {
            for (p, &g) in w.iter_mut().zip(gw) {
                *p -= lr * (g * scale);
            }
            params.head_bias[r] -= lr * (grad.head_bias[r] * scale);
        } else {
            let v = &mut opt.velocity[slot * (d + 1)..(slot + 1) * (d + 1)];
            for j in 0..d {
                v[j] = mu * v[j] + gw[j] * scale;
                w[j] -= lr * v[j];
            }
            v[d] = mu * v[d] + grad.head_bias[r] * scale;
            params.head_bias[r] -= lr * v[d];
        }
    }
    Ok(loss)
}

/// Largest absolute change of every frozen tensor between two snapshots.
/// The head weight and bias are compared on their frozen rows only.
pub fn frozen_drift<T: Real>(
    before: &ModelParams<T>,
    after: &ModelParams<T>,
    mask: &TrainableMask,
) -> Vec<(String, f64)> {
    let d = before.config().d_model;
    let max_abs = |a: &[T], b: &[T]| a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x.as_f64() - y.as_f64()).abs()));
    let mut out = Vec::new();
    for ((name, _, a), b) in before.named_tensors().into_iter().zip(after.param_slices()) {
        let drift = match name.as_str() {
            "lm.head.weight" => (0..mask.len())
                .filter(|&r| !mask.rows[r])
                .fold(0.0f64, |m, r| m.max(max_abs(&a[r * d..(r + 1) * d], &b[r * d..(r + 1) * d]))),
            "lm.head.bias" => (0..mask.len())
                .filter(|&r| !mask.rows[r])
                .fold(0.0f64, |m, r| m.max((a[r].as_f64() - b[r].as_f64()).abs())),
            _ => max_abs(a, b),
        };
        out.push((name, drift));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    /// Upper bound on steps; the run also ends when the batches run out.
    pub max_steps: usize,
    /// Also train the BOI/EOI head rows.
    pub train_sentinel_rows: bool,
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        Self { learning_rate: 0.05, momentum: 0.9, clip_norm: Some(1.0), max_steps: 500, train_sentinel_rows: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub trainable_parameters: u64,
    pub frozen_drift: Vec<(String, f64)>,
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Error that ended the run early, if any.
    pub early_stop: Option<String>,
}

impl FinetuneReport {
    pub fn max_frozen_drift(&self) -> f64 {
        self.frozen_drift.iter().fold(0.0, |m, (_, d)| m.max(*d))
    }
}

/// Builds the mask, runs fine-tuning steps over `batches` and reports the
/// frozen-tensor drift. A failing step ends the run but still yields a report.
pub fn finetune_run<T: Real>(
    params: &mut ModelParams<T>,
    layout: &VocabLayout,
    batches: impl IntoIterator<Item = Batch>,
    hyper: &FinetuneHyper,
) -> Result<FinetuneReport> {
    params.config().check_layout(layout)?;
    let mask = if hyper.train_sentinel_rows { build_mask_with_sentinels(layout) } else { build_mask(layout) };
    let before = params.clone();
    let mut opt = HeadOptimizer::new(hyper.momentum, hyper.clip_norm);
    let mut report = FinetuneReport {
        trainable_parameters: mask.count() as u64 * (params.config().d_model as u64 + 1),
        frozen_drift: Vec::new(),
        steps: 0,
        initial_loss: None,
        final_loss: None,
        early_stop: None,
    };
    for batch in batches.into_iter().take(hyper.max_steps) {
        match finetune_step(params, &mask, &mut opt, &batch, hyper.learning_rate) {
            Ok(loss) => {
                report.initial_loss.get_or_insert(loss);
                report.final_loss = Some(loss);
                report.steps += 1;
            }
            Err(e) => {
                report.early_stop = Some(alloc::format!("{e}"));
                break;
            }
        }
    }
    report.frozen_drift = frozen_drift(&before, params, &mask);
    Ok(report)
}
