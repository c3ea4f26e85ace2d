//! Vector-quantized image tokenizer.
//!
//! A strided convolutional encoder maps an `H×W×3` image to a `Hg×Wg×D`
//! latent grid, every latent cell is replaced by the id of its nearest
//! codebook row, and a mirrored transposed-convolution decoder maps codebook
//! vectors back to pixels. Encoder and decoder train by Adam on
//! reconstruction plus commitment loss with a straight-through gradient; the
//! codebook follows exponential moving averages of its assigned latents.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{self, col2im, gelu, gelu_grad, im2col, ConvGeometry};
use crate::optim::{Adam, Parameters};
use crate::Real;

/// Value reported by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VqConfig {
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Spatial reduction between image and latent grid; a power of two ≥ 2.
    pub downsample: usize,
    pub hidden_channels: usize,
    /// Commitment weight β.
    pub commitment_weight: f64,
    /// EMA decay γ for codebook statistics.
    pub ema_decay: f64,
    pub learning_rate: f64,
    /// Codes whose EMA usage count falls below this are reseeded.
    pub dead_code_threshold: f64,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 256,
            latent_dim: 16,
            image_height: 32,
            image_width: 32,
            downsample: 4,
            hidden_channels: 32,
            commitment_weight: 0.25,
            ema_decay: 0.99,
            learning_rate: 2e-3,
            dead_code_threshold: 0.05,
            seed: 0,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.codebook_size == 0 || self.latent_dim == 0 || self.hidden_channels == 0 {
            return bad("codebook size, latent dim and hidden channels must be positive");
        }
        if self.downsample < 2 || !self.downsample.is_power_of_two() {
            return bad("downsample factor must be a power of two >= 2");
        }
        if self.image_height == 0
            || self.image_width == 0
            || self.image_height % self.downsample != 0
            || self.image_width % self.downsample != 0
        {
            return bad("image size must be a positive multiple of the downsample factor");
        }
        if !(self.commitment_weight >= 0.0 && self.commitment_weight.is_finite()) {
            return bad("commitment weight must be finite and non-negative");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("EMA decay must lie in (0, 1)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        Ok(())
    }

    pub fn grid_height(&self) -> usize {
        self.image_height / self.downsample
    }

    pub fn grid_width(&self) -> usize {
        self.image_width / self.downsample
    }

    /// Number of tokens one image occupies in a sequence.
    pub fn tokens_per_image(&self) -> usize {
        self.grid_height() * self.grid_width()
    }

    fn stride_layers(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

/// RGB image, row-major `H×W×3`, channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Builds an image, clamping every channel into `[0, 1]`. NaN maps to 0.
    pub fn new(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(shape_err(height * width * 3, pixels.len()));
        }
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width * 3]).expect("shape is consistent")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Peak signal-to-noise ratio in dB for images with values in `[0, 1]`.
/// Identical images report [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(shape_err(
            alloc::format!("{}x{}", a.height, a.width),
            alloc::format!("{}x{}", b.height, b.width),
        ));
    }
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm_log10(1.0 / mse)).min(PSNR_CAP))
}

fn libm_log10(x: f64) -> f64 {
    num_traits::Float::log10(x)
}

/// `K×D` table of code vectors; row `i` is local image token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    size: usize,
    dim: usize,
    entries: Vec<T>,
}

impl<T: Real> Codebook<T> {
    pub fn new(size: usize, dim: usize, entries: Vec<T>) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::InvalidConfig("codebook must have K >= 1 and D >= 1".into()));
        }
        if entries.len() != size * dim {
            return Err(shape_err(size * dim, entries.len()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook"));
        }
        Ok(Self { size, dim, entries })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> &[T] {
        &self.entries[id * self.dim..(id + 1) * self.dim]
    }

    /// Index of the nearest entry by squared Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, v: &[T]) -> u32 {
        let mut best = 0usize;
        let mut best_d = T::infinity();
        for (i, e) in self.entries.chunks_exact(self.dim).enumerate() {
            let mut d = T::zero();
            for (&a, &b) in v.iter().zip(e) {
                let t = a - b;
                d += t * t;
            }
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best as u32
    }
}

/// Continuous encoder output, cell-major `Hg×Wg×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T> {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Vec<T>,
}

impl<T: Real> LatentGrid<T> {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width * dim {
            return Err(shape_err(height * width * dim, values.len()));
        }
        Ok(Self { height, width, dim, values })
    }

    pub fn cell(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.width + x) * self.dim;
        &self.values[i..i + self.dim]
    }

    fn to_chw(&self) -> Vec<T> {
        let cells = self.height * self.width;
        let mut out = vec![T::zero(); self.values.len()];
        for c in 0..cells {
            for d in 0..self.dim {
                out[d * cells + c] = self.values[c * self.dim + d];
            }
        }
        out
    }

    fn from_chw(height: usize, width: usize, dim: usize, chw: &[T]) -> Self {
        let cells = height * width;
        let mut values = vec![T::zero(); chw.len()];
        for c in 0..cells {
            for d in 0..dim {
                values[c * dim + d] = chw[d * cells + c];
            }
        }
        Self { height, width, dim, values }
    }
}

/// Grid of local image-token ids, row-major `Hg×Wg`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(shape_err(height * width, ids.len()));
        }
        Ok(Self { height, width, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Nearest-neighbour assignment of every latent cell.
pub fn quantize<T: Real>(latent: &LatentGrid<T>, codebook: &Codebook<T>) -> Result<TokenGrid> {
    if latent.dim != codebook.dim {
        return Err(shape_err(
            alloc::format!("latent dim {}", codebook.dim),
            alloc::format!("latent dim {}", latent.dim),
        ));
    }
    if latent.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent grid"));
    }
    let ids = latent.values.chunks_exact(latent.dim).map(|c| codebook.nearest(c)).collect();
    Ok(TokenGrid { height: latent.height, width: latent.width, ids })
}

/// Codebook lookup: the inverse direction of [`quantize`].
pub fn embed<T: Real>(tokens: &TokenGrid, codebook: &Codebook<T>) -> Result<LatentGrid<T>> {
    let mut values = Vec::with_capacity(tokens.ids.len() * codebook.dim);
    for &id in &tokens.ids {
        if id as usize >= codebook.size {
            return Err(Error::TokenRange { id, limit: codebook.size as u32 });
        }
        values.extend_from_slice(codebook.entry(id as usize));
    }
    Ok(LatentGrid { height: tokens.height, width: tokens.width, dim: codebook.dim, values })
}

/// Square-kernel convolution, plain or transposed.
///
/// Plain weights are `[out × (in·k·k)]`; transposed weights are
/// `[in × (out·k·k)]` so the same `im2col` geometry serves both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

struct ConvTrace<T> {
    /// im2col of the input for plain convs, the raw input for transposed ones.
    saved: Vec<T>,
    in_h: usize,
    in_w: usize,
    /// Pre-activation output when the layer is followed by GELU.
    pre: Option<Vec<T>>,
}

impl<T: Real> Conv<T> {
    fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        transposed: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = if transposed {
            // each output pixel sees roughly in·k·k/stride² inputs
            in_channels * kernel * kernel / (stride * stride)
        } else {
            in_channels * kernel * kernel
        };
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = (0..in_channels * out_channels * kernel * kernel)
            .map(|_| T::of(normal.sample(rng)))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            transposed,
            weight,
            bias: vec![T::zero(); out_channels],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        if self.transposed {
            (
                (h - 1) * self.stride + self.kernel - 2 * self.pad,
                (w - 1) * self.stride + self.kernel - 2 * self.pad,
            )
        } else {
            (
                (h + 2 * self.pad - self.kernel) / self.stride + 1,
                (w + 2 * self.pad - self.kernel) / self.stride + 1,
            )
        }
    }

    /// Geometry of the *plain* convolution that this layer (or its adjoint) performs.
    fn geometry(&self, in_h: usize, in_w: usize) -> ConvGeometry {
        if self.transposed {
            let (oh, ow) = self.out_size(in_h, in_w);
            ConvGeometry {
                channels: self.out_channels,
                height: oh,
                width: ow,
                kernel: self.kernel,
                stride: self.stride,
                pad: self.pad,
            }
        } else {
            ConvGeometry {
                channels: self.in_channels,
                height: in_h,
                width: in_w,
                kernel: self.kernel,
                stride: self.stride,
                pad: self.pad,
            }
        }
    }

    fn forward(&self, input: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>, usize, usize) {
        let (oh, ow) = self.out_size(h, w);
        let g = self.geometry(h, w);
        let kk = self.kernel * self.kernel;
        let mut out = vec![T::zero(); self.out_channels * oh * ow];
        let saved;
        if self.transposed {
            let mut cols = vec![T::zero(); self.out_channels * kk * h * w];
            linalg::gemm_tn(&mut cols, &self.weight, input, self.out_channels * kk, self.in_channels, h * w);
            col2im(&cols, &g, &mut out);
            saved = input.to_vec();
        } else {
            let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
            im2col(input, &g, &mut cols);
            linalg::gemm_nn(&mut out, &self.weight, &cols, self.out_channels, g.col_rows(), oh * ow);
            saved = cols;
        }
        for (c, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
            let b = self.bias[c];
            for v in plane {
                *v += b;
            }
        }
        (out, saved, oh, ow)
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, grad: &mut Self, saved: &[T], in_h: usize, in_w: usize, dout: &[T]) -> Vec<T> {
        let (oh, ow) = self.out_size(in_h, in_w);
        let g = self.geometry(in_h, in_w);
        let kk = self.kernel * self.kernel;
        for (c, plane) in dout.chunks_exact(oh * ow).enumerate() {
            grad.bias[c] += plane.iter().copied().sum::<T>();
        }
        let mut dx = vec![T::zero(); self.in_channels * in_h * in_w];
        if self.transposed {
            let mut dcols = vec![T::zero(); self.out_channels * kk * in_h * in_w];
            im2col(dout, &g, &mut dcols);
            linalg::gemm_nt(&mut grad.weight, saved, &dcols, self.in_channels, in_h * in_w, self.out_channels * kk);
            linalg::gemm_nn(&mut dx, &self.weight, &dcols, self.in_channels, self.out_channels * kk, in_h * in_w);
        } else {
            linalg::gemm_nt(&mut grad.weight, dout, saved, self.out_channels, oh * ow, g.col_rows());
            let mut dcols = vec![T::zero(); g.col_rows() * oh * ow];
            linalg::gemm_tn(&mut dcols, &self.weight, dout, g.col_rows(), self.out_channels, oh * ow);
            col2im(&dcols, &g, &mut dx);
        }
        dx
    }
}

/// A conv stack with GELU between layers and a linear final layer.
fn stack_forward<T: Real>(
    layers: &[Conv<T>],
    input: &[T],
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<ConvTrace<T>>, usize, usize) {
    let mut x = input.to_vec();
    let (mut h, mut w) = (h, w);
    let mut traces = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let (mut out, saved, oh, ow) = layer.forward(&x, h, w);
        let pre = if i + 1 < layers.len() {
            let pre = out.clone();
            for v in &mut out {
                *v = gelu(*v);
            }
            Some(pre)
        } else {
            None
        };
        traces.push(ConvTrace { saved, in_h: h, in_w: w, pre });
        x = out;
        h = oh;
        w = ow;
    }
    (x, traces, h, w)
}

fn stack_backward<T: Real>(
    layers: &[Conv<T>],
    grads: &mut [Conv<T>],
    traces: &[ConvTrace<T>],
    dout: Vec<T>,
) -> Vec<T> {
    let mut d = dout;
    for i in (0..layers.len()).rev() {
        let t = &traces[i];
        if let Some(pre) = &t.pre {
            for (dv, &p) in d.iter_mut().zip(pre) {
                *dv *= gelu_grad(p);
            }
        }
        d = layers[i].backward(&mut grads[i], &t.saved, t.in_h, t.in_w, &d);
    }
    d
}

/// Encoder and decoder convolution stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct VqNet<T> {
    pub encoder: Vec<Conv<T>>,
    pub decoder: Vec<Conv<T>>,
}

impl<T: Real> VqNet<T> {
    fn new(config: &VqConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = config.hidden_channels;
        let n = config.stride_layers();
        let mut encoder = Vec::new();
        for i in 0..n {
            encoder.push(Conv::new(if i == 0 { 3 } else { c }, c, 4, 2, 1, false, rng));
        }
        encoder.push(Conv::new(c, config.latent_dim, 1, 1, 0, false, rng));
        let mut decoder = vec![Conv::new(config.latent_dim, c, 1, 1, 0, false, rng)];
        for i in 0..n {
            let out = if i + 1 == n { 3 } else { c };
            decoder.push(Conv::new(c, out, 4, 2, 1, true, rng));
        }
        Self { encoder, decoder }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.iter().map(Conv::zeros_like).collect(),
            decoder: self.decoder.iter().map(Conv::zeros_like).collect(),
        }
    }

    /// `(name, tensor)` pairs in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(alloc::string::String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (prefix, stack) in [("vq.encoder", &self.encoder), ("vq.decoder", &self.decoder)] {
            for (i, l) in stack.iter().enumerate() {
                let shape = if l.transposed {
                    vec![l.in_channels, l.out_channels, l.kernel, l.kernel]
                } else {
                    vec![l.out_channels, l.in_channels, l.kernel, l.kernel]
                };
                out.push((alloc::format!("{prefix}.conv{i}.weight"), shape, &l.weight[..]));
                out.push((alloc::format!("{prefix}.conv{i}.bias"), vec![l.out_channels], &l.bias[..]));
            }
        }
        out
    }
}

impl<T: Real> Parameters<T> for VqNet<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| [&l.weight[..], &l.bias[..]])
            .collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| [&mut l.weight[..], &mut l.bias[..]])
            .collect()
    }
}

/// Loss components of one tokenizer training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLoss {
    /// Mean squared pixel error.
    pub reconstruction: f64,
    /// β-weighted mean squared distance between latents and their codes.
    pub commitment: f64,
}

impl VqLoss {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.commitment
    }
}

/// Trained (or training) tokenizer: network plus codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct VqModel<T> {
    config: VqConfig,
    pub net: VqNet<T>,
    pub codebook: Codebook<T>,
}

impl<T: Real> VqModel<T> {
    pub fn new(config: VqConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = VqNet::new(&config, &mut rng);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let entries = (0..config.codebook_size * config.latent_dim)
            .map(|_| T::of(normal.sample(&mut rng)))
            .collect();
        let codebook = Codebook::new(config.codebook_size, config.latent_dim, entries)?;
        Ok(Self { config, net, codebook })
    }

    /// Reassembles a model from stored tensors, checking them against the config.
    pub fn from_parts(config: VqConfig, net: VqNet<T>, codebook: Codebook<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = VqNet::<T>::new(&config, &mut rng);
        let shapes_match = reference.encoder.len() == net.encoder.len()
            && reference.decoder.len() == net.decoder.len()
            && reference
                .param_slices()
                .iter()
                .zip(net.param_slices())
                .all(|(a, b)| a.len() == b.len());
        if !shapes_match {
            return Err(Error::InvalidConfig("tokenizer tensors do not match the config".into()));
        }
        if codebook.size != config.codebook_size || codebook.dim != config.latent_dim {
            return Err(shape_err(
                alloc::format!("{}x{}", config.codebook_size, config.latent_dim),
                alloc::format!("{}x{}", codebook.size, codebook.dim),
            ));
        }
        Ok(Self { config, net, codebook })
    }

    /// An untrained network skeleton with the config's layer shapes.
    pub fn skeleton(config: &VqConfig) -> Result<VqNet<T>> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(VqNet::new(config, &mut rng))
    }

    pub fn config(&self) -> &VqConfig {
        &self.config
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.height != self.config.image_height || image.width != self.config.image_width {
            return Err(shape_err(
                alloc::format!("{}x{}", self.config.image_height, self.config.image_width),
                alloc::format!("{}x{}", image.height, image.width),
            ));
        }
        Ok(())
    }

    fn image_to_chw(image: &Image) -> Vec<T> {
        let hw = image.height * image.width;
        let mut out = vec![T::zero(); hw * 3];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = T::of(image.pixels[p * 3 + c] as f64);
            }
        }
        out
    }

    pub fn encode(&self, image: &Image) -> Result<LatentGrid<T>> {
        self.check_image(image)?;
        let x = Self::image_to_chw(image);
        let (z, _, h, w) = stack_forward(&self.net.encoder, &x, image.height, image.width);
        let latent = LatentGrid::from_chw(h, w, self.config.latent_dim, &z);
        if latent.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output"));
        }
        Ok(latent)
    }

    pub fn quantize(&self, latent: &LatentGrid<T>) -> Result<TokenGrid> {
        quantize(latent, &self.codebook)
    }

    pub fn tokenize(&self, image: &Image) -> Result<TokenGrid> {
        self.quantize(&self.encode(image)?)
    }

    /// Decoder output for an arbitrary latent grid, unclamped, `H×W×3` layout.
    pub fn decode_latent(&self, latent: &LatentGrid<T>) -> Result<Vec<T>> {
        if latent.height != self.config.grid_height()
            || latent.width != self.config.grid_width()
            || latent.dim != self.config.latent_dim
        {
            return Err(shape_err(
                alloc::format!(
                    "{}x{}x{}",
                    self.config.grid_height(),
                    self.config.grid_width(),
                    self.config.latent_dim
                ),
                alloc::format!("{}x{}x{}", latent.height, latent.width, latent.dim),
            ));
        }
        let (y, _, h, w) = stack_forward(&self.net.decoder, &latent.to_chw(), latent.height, latent.width);
        Ok(chw_to_hwc(&y, h, w))
    }

    pub fn decode(&self, tokens: &TokenGrid) -> Result<Image> {
        let latent = embed(tokens, &self.codebook)?;
        let raw = self.decode_latent(&latent)?;
        Image::new(
            self.config.image_height,
            self.config.image_width,
            raw.iter().map(|v| v.as_f64() as f32).collect(),
        )
    }

    /// Loss and straight-through gradients for a batch at the current codebook.
    ///
    /// Returns the loss, the network gradient and, for EMA bookkeeping, the
    /// code assignment and latent vector of every cell in the batch.
    pub fn loss_and_grad(&self, batch: &[Image]) -> Result<(VqLoss, VqNet<T>, Vec<u32>, Vec<T>)> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty tokenizer batch".into()));
        }
        for img in batch {
            self.check_image(img)?;
        }
        let cfg = &self.config;
        let (hh, ww) = (cfg.image_height, cfg.image_width);
        let cells = cfg.tokens_per_image();
        let d = cfg.latent_dim;
        let pixel_count = (batch.len() * hh * ww * 3) as f64;
        let latent_count = (batch.len() * cells * d) as f64;
        let beta = T::of(cfg.commitment_weight);

        let mut grad = self.net.zeros_like();
        let mut rec_sum = 0.0f64;
        let mut commit_sum = 0.0f64;
        let mut assignments = Vec::with_capacity(batch.len() * cells);
        let mut latents = Vec::with_capacity(batch.len() * cells * d);

        for img in batch {
            let x = Self::image_to_chw(img);
            let (z, enc_traces, gh, gw) = stack_forward(&self.net.encoder, &x, hh, ww);
            // z is [D × cells]; build the quantized latent in the same layout
            let mut zq = vec![T::zero(); z.len()];
            let mut cell = vec![T::zero(); d];
            for c in 0..cells {
                for k in 0..d {
                    cell[k] = z[k * cells + c];
                }
                if cell.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("encoder output"));
                }
                let id = self.codebook.nearest(&cell);
                assignments.push(id);
                latents.extend_from_slice(&cell);
                let e = self.codebook.entry(id as usize);
                for k in 0..d {
                    zq[k * cells + c] = e[k];
                }
            }
            let (y, dec_traces, _, _) = stack_forward(&self.net.decoder, &zq, gh, gw);

            let scale = T::of(2.0 / pixel_count);
            let mut dy = vec![T::zero(); y.len()];
            for i in 0..y.len() {
                let diff = y[i] - x[i];
                rec_sum += (diff * diff).as_f64();
                dy[i] = scale * diff;
            }
            let mut dz = stack_backward(&self.net.decoder, &mut grad.decoder, &dec_traces, dy);
            // straight-through copy plus commitment pull toward the code
            let cscale = beta * T::of(2.0 / latent_count);
            for i in 0..z.len() {
                let diff = z[i] - zq[i];
                commit_sum += (diff * diff).as_f64();
                dz[i] += cscale * diff;
            }
            stack_backward(&self.net.encoder, &mut grad.encoder, &enc_traces, dz);
        }
        let loss = VqLoss {
            reconstruction: rec_sum / pixel_count,
            commitment: cfg.commitment_weight * commit_sum / latent_count,
        };
        Ok((loss, grad, assignments, latents))
    }
}

fn chw_to_hwc<T: Real>(y: &[T], h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let channels = y.len() / hw;
    let mut out = vec![T::zero(); y.len()];
    for p in 0..hw {
        for c in 0..channels {
            out[p * channels + c] = y[c * hw + p];
        }
    }
    out
}

/// Running EMA statistics behind the codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub counts: Vec<T>,
    pub sums: Vec<T>,
}

impl<T: Real> EmaState<T> {
    /// Statistics equivalent to having seen every code exactly once at its current value.
    pub fn from_codebook(codebook: &Codebook<T>) -> Self {
        Self { counts: vec![T::one(); codebook.size], sums: codebook.entries.clone() }
    }
}

/// Decays counts and sums by `decay`, mixes in this batch's assignments and
/// moves every code with positive count to `sum / count`.
pub fn ema_update<T: Real>(
    codebook: &mut Codebook<T>,
    state: &mut EmaState<T>,
    assignments: &[u32],
    latents: &[T],
    decay: f64,
) {
    let d = codebook.dim;
    let k = codebook.size;
    let mut batch_counts = vec![T::zero(); k];
    let mut batch_sums = vec![T::zero(); k * d];
    for (i, &id) in assignments.iter().enumerate() {
        let id = id as usize;
        batch_counts[id] += T::one();
        for j in 0..d {
            batch_sums[id * d + j] += latents[i * d + j];
        }
    }
    let g = T::of(decay);
    let rest = T::of(1.0 - decay);
    for i in 0..k {
        state.counts[i] = g * state.counts[i] + rest * batch_counts[i];
        for j in 0..d {
            state.sums[i * d + j] = g * state.sums[i * d + j] + rest * batch_sums[i * d + j];
        }
        let n = state.counts[i];
        if n > T::zero() {
            for j in 0..d {
                codebook.entries[i * d + j] = state.sums[i * d + j] / n;
            }
        }
    }
}

/// Owns a tokenizer and its optimizer state for training.
#[derive(Debug, Clone)]
pub struct VqTrainer<T> {
    pub model: VqModel<T>,
    pub ema: EmaState<T>,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    step: u64,
    initialized: bool,
}

impl<T: Real> VqTrainer<T> {
    pub fn new(model: VqModel<T>) -> Self {
        let ema = EmaState::from_codebook(&model.codebook);
        let rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5eed_c0de);
        Self { model, ema, adam: Adam::default(), rng, step: 0, initialized: false }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One Adam step on the network, one EMA step on the codebook, then
    /// reseeding of codes whose usage decayed below the dead-code threshold.
    ///
    /// The very first step seeds every code from the batch's latents.
    pub fn train_step(&mut self, batch: &[Image]) -> Result<VqLoss> {
        if !self.initialized {
            let mut latents = Vec::new();
            for img in batch {
                latents.extend(self.model.encode(img)?.values);
            }
            self.reseed(&latents, |_| true);
            self.initialized = true;
        }
        let (loss, grad, assignments, latents) = self.model.loss_and_grad(batch)?;
        self.step += 1;
        if !loss.total().is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                learning_rate: self.model.config.learning_rate,
                loss: loss.total(),
            });
        }
        let lr = self.model.config.learning_rate;
        self.adam.step(self.model.net.param_slices_mut(), grad.param_slices(), lr);
        ema_update(
            &mut self.model.codebook,
            &mut self.ema,
            &assignments,
            &latents,
            self.model.config.ema_decay,
        );
        let threshold = T::of(self.model.config.dead_code_threshold);
        let counts = self.ema.counts.clone();
        self.reseed(&latents, |i| counts[i] < threshold);
        Ok(loss)
    }

    fn reseed(&mut self, latents: &[T], mut dead: impl FnMut(usize) -> bool) {
        let d = self.model.codebook.dim;
        let n = latents.len() / d;
        if n == 0 {
            return;
        }
        for i in 0..self.model.codebook.size {
            if !dead(i) {
                continue;
            }
            let pick = self.rng.random_range(0..n);
            let src = &latents[pick * d..(pick + 1) * d];
            self.model.codebook.entries[i * d..(i + 1) * d].copy_from_slice(src);
            self.ema.sums[i * d..(i + 1) * d].copy_from_slice(src);
            self.ema.counts[i] = T::one();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> VqConfig {
        VqConfig {
            codebook_size: 8,
            latent_dim: 3,
            image_height: 8,
            image_width: 8,
            downsample: 2,
            hidden_channels: 4,
            ..VqConfig::default()
        }
    }

    #[test]
    fn nearest_neighbour_examples() {
        let cb = Codebook::new(2, 2, vec![0.0f32, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(cb.nearest(&[0.4, 0.4]), 0);
        assert_eq!(cb.nearest(&[0.5, 0.5]), 0);
        assert_eq!(cb.nearest(&[0.6, 0.5]), 1);
    }

    #[test]
    fn exact_codebook_row_maps_to_its_id() {
        let entries: Vec<f64> = (0..5 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let cb = Codebook::new(5, 4, entries).unwrap();
        let latent = LatentGrid::new(1, 1, 4, cb.entry(3).to_vec()).unwrap();
        assert_eq!(quantize(&latent, &cb).unwrap().ids, vec![3]);
    }

    #[test]
    fn quantize_rejects_bad_input() {
        let cb = Codebook::new(2, 2, vec![0.0f32; 4]).unwrap();
        let wrong_dim = LatentGrid::new(1, 1, 3, vec![0.0f32; 3]).unwrap();
        assert!(matches!(quantize(&wrong_dim, &cb), Err(Error::Shape { .. })));
        let nan = LatentGrid::new(1, 1, 2, vec![f32::NAN, 0.0]).unwrap();
        assert_eq!(quantize(&nan, &cb), Err(Error::NonFinite("latent grid")));
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let model = VqModel::<f32>::new(VqConfig::default()).unwrap();
        let img = Image::new(32, 32, (0..32 * 32 * 3).map(|i| (i % 17) as f32 / 16.0).collect()).unwrap();
        let a = model.encode(&img).unwrap();
        let b = model.encode(&img).unwrap();
        assert_eq!((a.height, a.width, a.dim), (8, 8, 16));
        assert_eq!(a, b);
        assert!(matches!(model.encode(&Image::filled(16, 32, 0.0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_image_encodes_to_final_bias() {
        let mut model = VqModel::<f64>::new(tiny_config()).unwrap();
        let last = model.net.encoder.last_mut().unwrap();
        last.bias = vec![0.25, -1.5, 3.0];
        let latent = model.encode(&Image::filled(8, 8, 0.0)).unwrap();
        for cell in latent.values.chunks_exact(3) {
            assert_eq!(cell, &[0.25, -1.5, 3.0]);
        }
    }

    #[test]
    fn decode_rejects_out_of_range_and_is_deterministic() {
        let model = VqModel::<f32>::new(tiny_config()).unwrap();
        let bad = TokenGrid::new(4, 4, vec![8; 16]).unwrap();
        assert_eq!(model.decode(&bad), Err(Error::TokenRange { id: 8, limit: 8 }));
        let good = TokenGrid::new(4, 4, (0..16).map(|i| i % 8).collect()).unwrap();
        let a = model.decode(&good).unwrap();
        let b = model.decode(&good).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn psnr_closed_forms() {
        let zeros = Image::filled(4, 4, 0.0);
        let ones = Image::filled(4, 4, 1.0);
        let half = Image::filled(4, 4, 0.5);
        assert_eq!(psnr(&zeros, &zeros).unwrap(), PSNR_CAP);
        assert!(psnr(&zeros, &ones).unwrap().abs() < 1e-12);
        assert!((psnr(&zeros, &half).unwrap() - 6.020_599_913_279_624).abs() < 1e-9);
        assert!(psnr(&zeros, &Image::filled(4, 5, 0.0)).is_err());
    }

    #[test]
    fn zero_commitment_weight_gives_zero_commitment() {
        let cfg = VqConfig { commitment_weight: 0.0, ..tiny_config() };
        let model = VqModel::<f32>::new(cfg).unwrap();
        let batch = [Image::filled(8, 8, 0.3), Image::filled(8, 8, 0.9)];
        let (loss, ..) = model.loss_and_grad(&batch).unwrap();
        assert_eq!(loss.commitment, 0.0);
        assert!(loss.reconstruction >= 0.0);
    }

    #[test]
    fn ema_with_unit_decay_is_a_no_op() {
        let model = VqModel::<f32>::new(tiny_config()).unwrap();
        let mut cb = model.codebook.clone();
        let mut state = EmaState::from_codebook(&cb);
        let latents: Vec<f32> = (0..6 * 3).map(|i| i as f32).collect();
        ema_update(&mut cb, &mut state, &[0, 1, 1, 5, 7, 7], &latents, 1.0);
        assert_eq!(cb, model.codebook);
    }

    #[test]
    fn ema_with_small_decay_converges_to_repeated_latent() {
        let model = VqModel::<f64>::new(tiny_config()).unwrap();
        let mut cb = model.codebook.clone();
        let mut state = EmaState::from_codebook(&cb);
        let target = [0.3, -0.2, 0.9];
        let latents: Vec<f64> = target.iter().copied().cycle().take(12).collect();
        for _ in 0..20 {
            let id = cb.nearest(&target);
            ema_update(&mut cb, &mut state, &[id; 4], &latents, 0.1);
        }
        let id = cb.nearest(&target) as usize;
        for (a, b) in cb.entry(id).iter().zip(target) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn training_reduces_reconstruction_error() {
        let mut trainer = VqTrainer::new(VqModel::<f32>::new(tiny_config()).unwrap());
        let batch: Vec<Image> = (0..4)
            .map(|k| {
                Image::new(8, 8, (0..8 * 8 * 3).map(|i| ((i * (k + 1)) % 7) as f32 / 6.0).collect()).unwrap()
            })
            .collect();
        let first = trainer.train_step(&batch).unwrap();
        let mut last = first;
        for _ in 0..150 {
            last = trainer.train_step(&batch).unwrap();
        }
        assert!(last.reconstruction < first.reconstruction * 0.5, "{first:?} -> {last:?}");
    }

    #[test]
    fn training_divergence_is_reported() {
        let cfg = VqConfig { learning_rate: 1e30, ..tiny_config() };
        let mut trainer = VqTrainer::new(VqModel::<f32>::new(cfg).unwrap());
        let batch = [Image::filled(8, 8, 0.7)];
        let mut result = Ok(VqLoss { reconstruction: 0.0, commitment: 0.0 });
        for _ in 0..20 {
            result = trainer.train_step(&batch);
            if result.is_err() {
                break;
            }
        }
        assert!(matches!(result, Err(Error::Divergence { .. }) | Err(Error::NonFinite(_))), "{result:?}");
    }
}
