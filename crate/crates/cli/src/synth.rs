//! Synthetic tiny-object data: textured backgrounds, half of them carrying a
//! dark line segment 2–3 px thick and 8–20 px long.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use scaresnet_core::Tensor;

use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub seed: u64,
    /// Extents are multiples of this (the backbone's cumulative stride).
    pub size_step: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 200,
            size_min: 72,
            size_max: 128,
            seed: 0,
            size_step: 8,
        }
    }
}

/// Inclusive pixel box `[x0, y0, x1, y1]`.
pub type BBox = [usize; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub index: usize,
    pub image: Tensor<f32>,
    pub label: u8,
    pub seed: u64,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub config: SynthConfig,
    pub positives: usize,
}

impl SynthConfig {
    /// Admissible extents: multiples of `size_step` inside the range.
    pub fn sizes(&self) -> Vec<usize> {
        let step = self.size_step.max(1);
        (self.size_min.div_ceil(step)..=self.size_max / step)
            .map(|k| k * step)
            .collect()
    }

    /// `min_input` is the backbone's smallest accepted extent.
    pub fn validate(&self, min_input: usize) -> Result<()> {
        ensure!(self.n >= 2, "n must be at least 2, got {}", self.n);
        ensure!(
            self.size_min >= min_input,
            "size_min {} is below the backbone minimum input {min_input}",
            self.size_min
        );
        ensure!(
            !self.sizes().is_empty(),
            "no multiple of {} lies in [{}, {}]",
            self.size_step,
            self.size_min,
            self.size_max
        );
        Ok(())
    }
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Distance from `(px, py)` to the segment `a`–`b`.
fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn render(index: usize, label: u8, seed: u64, sizes: &[usize]) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = *sizes.choose(&mut rng).unwrap();
    let w = *sizes.choose(&mut rng).unwrap();

    // Background: a bright base with two low-frequency waves, a colour tint
    // and pixel noise.
    let base = rng.gen_range(0.55..0.8);
    let tint: [f64; 3] = [
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let theta = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(0.05..0.25);
            (
                theta.cos() * freq,
                theta.sin() * freq,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.02..0.06),
            )
        })
        .collect();
    let mut lum = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = base;
            for &(fx, fy, phase, amp) in &waves {
                v += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            }
            lum[y * w + x] = v + rng.gen_range(-0.03..0.03);
        }
    }

    // Clutter: soft bright blobs present in every sample.
    for _ in 0..rng.gen_range(2..6) {
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let r = rng.gen_range(2.0..6.0);
        let amp = rng.gen_range(0.05..0.15);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                lum[y * w + x] += amp * (-d2 / (2.0 * r * r)).exp();
            }
        }
    }

    let mut bbox = None;
    if label == 1 {
        let thickness = rng.gen_range(2..=3) as f64;
        let length = rng.gen_range(8.0..=20.0);
        let theta = rng.gen_range(0.0..PI);
        let (hx, hy) = (0.5 * length * theta.cos(), 0.5 * length * theta.sin());
        let margin = 0.5 * length + thickness + 1.0;
        let cx = rng.gen_range(margin..w as f64 - margin);
        let cy = rng.gen_range(margin..h as f64 - margin);
        let (a, b) = ((cx - hx, cy - hy), (cx + hx, cy + hy));
        let dark = rng.gen_range(0.05..0.2);
        let mut bb = [usize::MAX, usize::MAX, 0, 0];
        for y in 0..h {
            for x in 0..w {
                if segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b) <= thickness / 2.0 {
                    lum[y * w + x] = dark + rng.gen_range(-0.02..0.02);
                    bb = [bb[0].min(x), bb[1].min(y), bb[2].max(x), bb[3].max(y)];
                }
            }
        }
        bbox = Some(bb);
    }

    let image = Tensor::from_fn([3, h, w], |i| {
        let c = i / (h * w);
        (lum[i % (h * w)] + tint[c]).clamp(0.0, 1.0) as f32
    });
    SyntheticSample {
        index,
        image,
        label,
        seed,
        bbox,
    }
}

/// `n` samples with exactly `n / 2` positives in seeded order.
pub fn generate(cfg: &SynthConfig) -> Vec<SyntheticSample> {
    let mut labels: Vec<u8> = (0..cfg.n).map(|i| u8::from(i < cfg.n / 2)).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let sizes = cfg.sizes();
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| render(i, label, sample_seed(cfg.seed, i), &sizes))
        .collect()
}

/// Mean luminance of the ring of width `pad` around `bb`.
fn ring_mean(image: &Tensor<f32>, bb: BBox, pad: usize) -> f64 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (y0, y1) = (bb[1].saturating_sub(pad), (bb[3] + pad).min(h - 1));
    let (x0, x1) = (bb[0].saturating_sub(pad), (bb[2] + pad).min(w - 1));
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if y < bb[1] || y > bb[3] || x < bb[0] || x > bb[2] {
                sum += luminance(image, y, x);
                count += 1;
            }
        }
    }
    sum / count.max(1) as f64
}

fn luminance(image: &Tensor<f32>, y: usize, x: usize) -> f64 {
    (0..3).map(|c| image.at3(c, y, x) as f64).sum::<f64>() / 3.0
}

/// Scan a positive sample: its box must contain at least `2 · 8` pixels
/// (the thinnest, shortest line) darker than the surrounding background mean
/// by `margin`.
pub fn bbox_is_dark(sample: &SyntheticSample, margin: f64) -> bool {
    let Some(bb) = sample.bbox else {
        return false;
    };
    let bg = ring_mean(&sample.image, bb, 4);
    let mut dark = 0;
    for y in bb[1]..=bb[3] {
        for x in bb[0]..=bb[2] {
            if luminance(&sample.image, y, x) < bg - margin {
                dark += 1;
            }
        }
    }
    dark >= 16
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    index: usize,
    label: u8,
    seed: u64,
    bbox: Option<BBox>,
}

/// Write `samples/NNNN/{meta.json, data.bin}` plus `dataset.json`.
pub fn write_dataset(root: &Path, cfg: &SynthConfig, samples: &[SyntheticSample]) -> Result<()> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    for s in samples {
        let meta = SampleMeta {
            index: s.index,
            label: s.label,
            seed: s.seed,
            bbox: s.bbox,
        };
        let Value::Object(extra) = serde_json::to_value(&meta)? else {
            unreachable!("struct serialises to an object")
        };
        io::write_tensor(&io::sample_dir(root, s.index), &s.image, extra)?;
    }
    let info = DatasetInfo {
        config: *cfg,
        positives: samples.iter().filter(|s| s.label == 1).count(),
    };
    fs::write(root.join("dataset.json"), serde_json::to_vec_pretty(&info)?)?;
    Ok(())
}

pub fn read_info(root: &Path) -> Result<DatasetInfo> {
    let path = root.join("dataset.json");
    let raw = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&raw)?)
}

pub fn read_dataset(root: &Path) -> Result<Vec<SyntheticSample>> {
    let dir = root.join("samples");
    let mut names: Vec<_> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let (image, meta) = io::read_tensor::<f32>(&dir.join(&name))?;
        let meta: SampleMeta = serde_json::from_value(Value::Object(meta))
            .with_context(|| format!("sample {}", name.to_string_lossy()))?;
        ensure!(
            image.shape().len() == 3 && image.shape()[0] == 3,
            "sample {} is not 3×H×W",
            meta.index
        );
        out.push(SyntheticSample {
            index: meta.index,
            image,
            label: meta.label,
            seed: meta.seed,
            bbox: meta.bbox,
        });
    }
    if out.len() < 2 {
        bail!("{} holds {} samples, need at least 2", root.display(), out.len());
    }
    Ok(out)
}
