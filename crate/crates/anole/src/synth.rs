//! Synthetic shape corpus and its label checker.

use std::fs;
use std::path::Path;

use anole_core::vq::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manifest::{Manifest, Order, Record};
use crate::ppm;

pub const IMAGE_SIZE: usize = 32;
pub const BACKGROUND: [f32; 3] = [0.12, 0.12, 0.14];
/// Fraction of records that put the image before its caption.
const IMAGE_FIRST_RATE: f64 = 0.125;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Magenta, Color::Cyan];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.90, 0.15, 0.12],
            Color::Green => [0.15, 0.80, 0.20],
            Color::Blue => [0.15, 0.30, 0.95],
            Color::Yellow => [0.95, 0.88, 0.15],
            Color::Magenta => [0.88, 0.20, 0.85],
            Color::Cyan => [0.15, 0.85, 0.90],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label {
    pub color: Color,
    pub shape: Shape,
}

impl Label {
    /// All 18 labels in a fixed order.
    pub fn all() -> Vec<Label> {
        Color::ALL
            .iter()
            .flat_map(|&color| Shape::ALL.iter().map(move |&shape| Label { color, shape }))
            .collect()
    }

    pub fn caption(self) -> String {
        format!("a {} {}", self.color.name(), self.shape.name())
    }

    pub fn from_caption(caption: &str) -> Option<Label> {
        Label::all().into_iter().find(|l| l.caption() == caption)
    }
}

/// Placement of one shape: center and half-extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub cx: f32,
    pub cy: f32,
    pub size: f32,
}

impl Placement {
    pub fn sample<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let c = IMAGE_SIZE as f32 / 2.0;
        let size = match shape {
            Shape::Circle => rng.random_range(6.0..9.0),
            Shape::Square => rng.random_range(5.0..8.0),
            Shape::Triangle => rng.random_range(7.5..10.5),
        };
        Self { cx: c + rng.random_range(-3.0..3.0), cy: c + rng.random_range(-3.0..3.0), size }
    }

    fn contains(&self, shape: Shape, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let s = self.size;
        match shape {
            Shape::Circle => dx * dx + dy * dy <= s * s,
            Shape::Square => dx.abs() <= s && dy.abs() <= s,
            // apex up, base as wide as it is tall
            Shape::Triangle => dy.abs() <= s && dx.abs() <= (dy + s) / 2.0,
        }
    }
}

pub fn render(label: Label, placement: Placement) -> Image {
    let n = IMAGE_SIZE;
    let fg = label.color.rgb();
    let mut pixels = Vec::with_capacity(n * n * 3);
    let step = 1.0 / SUPERSAMPLE as f32;
    for y in 0..n {
        for x in 0..n {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f32 + (sx as f32 + 0.5) * step;
                    let py = y as f32 + (sy as f32 + 0.5) * step;
                    hits += placement.contains(label.shape, px, py) as usize;
                }
            }
            let a = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            pixels.extend((0..3).map(|c| BACKGROUND[c] * (1.0 - a) + fg[c] * a));
        }
    }
    Image::new(n, n, pixels).expect("rendered image has the right size")
}

/// Writes `count` images and `manifest.jsonl` under `out`.
pub fn synth_corpus(count: usize, seed: u64, out: &Path) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Config("synth count must be at least 1".into()));
    }
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(Error::io(&images))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = Label::all();
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let label = labels[rng.random_range(0..labels.len())];
        let placement = Placement::sample(label.shape, &mut rng);
        let order = if rng.random_bool(IMAGE_FIRST_RATE) { Order::ImageFirst } else { Order::CaptionFirst };
        let rel = format!("images/img_{i:05}.ppm");
        ppm::write(&out.join(&rel), &render(label, placement))?;
        records.push(Record { image: Some(rel), caption: Some(label.caption()), order });
    }
    let path = out.join("manifest.jsonl");
    Manifest::write(&path, &records)?;
    Manifest::load(&path)
}

/// Foreground test: any channel far from the background.
fn is_foreground(p: [f32; 3]) -> bool {
    (0..3).any(|c| (p[c] - BACKGROUND[c]).abs() > 0.25)
}

/// Largest 4-connected foreground component, as pixel coordinates.
fn largest_component(image: &Image) -> Vec<(usize, usize)> {
    let (h, w) = (image.height(), image.width());
    let mut seen = vec![false; h * w];
    let mut best = Vec::new();
    for start in 0..h * w {
        if seen[start] || !is_foreground(image.pixel(start / w, start % w)) {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            comp.push((y, x));
            let neighbours = [
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
            ];
            for j in neighbours.into_iter().flatten() {
                if !seen[j] && is_foreground(image.pixel(j / w, j % w)) {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

/// Recovers the label of an image: nearest palette color to the mean
/// foreground, and the shape from vertical skew and bounding-box fill.
pub fn check_label(image: &Image) -> Option<Label> {
    let comp = largest_component(image);
    if comp.len() < 12 {
        return None;
    }
    let n = comp.len() as f64;
    let mut mean = [0.0f64; 3];
    for &(y, x) in &comp {
        let p = image.pixel(y, x);
        for c in 0..3 {
            mean[c] += p[c] as f64 / n;
        }
    }
    let dist = |col: Color| col.rgb().iter().zip(&mean).map(|(&a, &b)| (a as f64 - b).powi(2)).sum::<f64>();
    let color = *Color::ALL.iter().min_by(|&&a, &&b| dist(a).total_cmp(&dist(b)))?;

    let cy = comp.iter().map(|&(y, _)| y as f64).sum::<f64>() / n;
    let m2 = comp.iter().map(|&(y, _)| (y as f64 - cy).powi(2)).sum::<f64>() / n;
    let m3 = comp.iter().map(|&(y, _)| (y as f64 - cy).powi(3)).sum::<f64>() / n;
    let skew = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    let (y0, y1) = (comp.iter().map(|p| p.0).min()?, comp.iter().map(|p| p.0).max()?);
    let (x0, x1) = (comp.iter().map(|p| p.1).min()?, comp.iter().map(|p| p.1).max()?);
    let fill = n / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
    // an upright triangle keeps its mass low: negative vertical skew
    let shape = if skew < -0.25 {
        Shape::Triangle
    } else if fill > 0.88 {
        Shape::Square
    } else {
        Shape::Circle
    };
    Some(Label { color, shape })
}
