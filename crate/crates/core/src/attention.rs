//! Positional-encoding multi-head criss-cross attention.
//!
//! Each position attends to the `h + w - 1` positions sharing its row or
//! column. Channels are split into heads with their own query/key/value
//! projections; head outputs are concatenated, projected, scaled by a learnable
//! `gamma` and added back to the input. Two recurrent passes with shared
//! weights connect every pair of positions.
//!
//! The sinusoidal encoding is added once, to the stream the attention reads.
//! The residual output carries the input without the encoding, so with
//! `gamma = 0` the module is exactly the identity.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::init::Init;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MhccaConfig {
    pub channels: usize,
    pub heads: usize,
    pub qk_channels_per_head: usize,
    pub recurrence: usize,
    pub pe_base: f64,
    pub residual_scale_init: f64,
    pub positional_encoding: bool,
}

impl Default for MhccaConfig {
    fn default() -> Self {
        Self::new(64)
    }
}

impl MhccaConfig {
    /// Four heads, `max(1, C / 32)` query/key channels per head, two passes.
    pub fn new(channels: usize) -> Self {
        let heads = 4;
        Self {
            channels,
            heads,
            qk_channels_per_head: (channels / (8 * heads)).max(1),
            recurrence: 2,
            pe_base: 10_000.0,
            residual_scale_init: 0.0,
            positional_encoding: true,
        }
    }

    pub fn head_channels(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self, layer: &str) -> Result<()> {
        let fail = |reason: alloc::string::String| Error::Config {
            layer: layer.to_string(),
            reason,
        };
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(fail(format!(
                "{} heads do not divide {} channels",
                self.heads, self.channels
            )));
        }
        if self.qk_channels_per_head == 0 || self.recurrence == 0 {
            return Err(fail("query/key width and recurrence must be positive".into()));
        }
        if self.positional_encoding && !self.channels.is_multiple_of(4) {
            return Err(fail(format!(
                "positional encoding needs channels divisible by 4, found {}",
                self.channels
            )));
        }
        if !(self.pe_base > 0.0) || !self.residual_scale_init.is_finite() {
            return Err(fail("pe_base must be positive and gamma finite".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (c, hc, q) = (self.channels, self.head_channels(), self.qk_channels_per_head);
        self.heads * (2 * q * hc + q + hc * hc + hc) + c * c + c + 1
    }

    /// Multiply-adds of one forward pass on an `h`×`w` map.
    pub fn mult_adds(&self, h: usize, w: usize) -> usize {
        let (c, hc, q) = (self.channels, self.head_channels(), self.qk_channels_per_head);
        let hw = h * w;
        let cross = h + w - 1;
        let per_head = (2 * q * hc + hc * hc) * hw + q * hw * cross + hc * hw * cross;
        self.recurrence * (self.heads * per_head + c * c * hw)
    }
}

/// Sinusoidal encoding of shape `C×H×W`: the first `C/2` channels encode the
/// row index, the last `C/2` the column index, as (sin, cos) channel pairs
/// with wavelengths `pe_base^(2k / (C/2))`.
pub fn sinusoidal_pe<T: Scalar>(channels: usize, h: usize, w: usize, pe_base: f64) -> Result<Tensor<T>> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(Error::Attr {
            op: "sinusoidal-pe",
            reason: format!("channels must be a positive multiple of 4, found {channels}"),
        });
    }
    let half = channels / 2;
    let mut out = Tensor::zeros([channels, h, w]);
    let data = out.data_mut();
    for ch in 0..channels {
        let within = ch % half;
        let pair = (within / 2) * 2;
        let freq = Float::powf(pe_base, -(pair as f64) / half as f64);
        for y in 0..h {
            for x in 0..w {
                let pos = if ch < half { y } else { x } as f64;
                let angle = pos * freq;
                let v = if within.is_multiple_of(2) {
                    Float::sin(angle)
                } else {
                    Float::cos(angle)
                };
                data[(ch * h + y) * w + x] = T::of(v);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub query: (ParamId, ParamId),
    /// No bias: it would add the same term to every logit of a query.
    pub key: ParamId,
    pub value: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct MhccaWeights {
    pub heads: Vec<HeadWeights>,
    pub proj: (ParamId, ParamId),
    pub gamma: ParamId,
}

impl MhccaWeights {
    pub fn build<T: Scalar>(init: &mut Init<T>, prefix: &str, cfg: &MhccaConfig) -> Result<Self> {
        cfg.validate(prefix)?;
        let (c, hc, q) = (cfg.channels, cfg.head_channels(), cfg.qk_channels_per_head);
        let conv = |init: &mut Init<T>, name: &str, co: usize, ci: usize| {
            let w = init.fan_in(&format!("{prefix}.{name}.weight"), &[co, ci], ci);
            let b = init.zeros(&format!("{prefix}.{name}.bias"), &[co]);
            (w, b)
        };
        let heads = (0..cfg.heads)
            .map(|i| HeadWeights {
                query: conv(init, &format!("head{i}.query"), q, hc),
                key: init.fan_in(&format!("{prefix}.head{i}.key.weight"), &[q, hc], hc),
                value: conv(init, &format!("head{i}.value"), hc, hc),
            })
            .collect();
        let proj = conv(init, "proj", c, c);
        let gamma = init.constant(&format!("{prefix}.gamma"), &[1], cfg.residual_scale_init);
        Ok(Self { heads, proj, gamma })
    }

    /// Query and key weights to zero, value and projection to the identity,
    /// all biases to zero, and `gamma` set as given.
    pub fn set_uniform_identity<T: Scalar>(&self, store: &mut ParamStore<T>, gamma: f64) {
        let eye = |t: &mut Tensor<T>| {
            let n = t.shape()[1];
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = if i / n == i % n { T::one() } else { T::zero() };
            }
        };
        let zero = |t: &mut Tensor<T>| t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        for h in &self.heads {
            for id in [h.query.0, h.query.1, h.key, h.value.1] {
                zero(store.get_mut(id));
            }
            eye(store.get_mut(h.value.0));
        }
        eye(store.get_mut(self.proj.0));
        zero(store.get_mut(self.proj.1));
        store.get_mut(self.gamma).data_mut()[0] = T::of(gamma);
    }
}

fn check_input<T: Scalar>(g: &Graph<T>, x: Var, cfg: &MhccaConfig) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 3 {
        return Err(Error::Rank {
            op: "criss-cross",
            expected: 3,
            found: s.to_vec(),
        });
    }
    if s[0] != cfg.channels {
        return Err(Error::ShapeMismatch {
            op: "criss-cross",
            axis: 0,
            expected: cfg.channels,
            found: s[0],
        });
    }
    Ok(())
}

/// Projected multi-head attention output for `stream`, plus each head's
/// attention weights (`[h, w, h + w - 1]`).
fn attend<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    weights: &MhccaWeights,
    cfg: &MhccaConfig,
    stream: Var,
) -> Result<(Var, Vec<Var>)> {
    let hc = cfg.head_channels();
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut maps = Vec::with_capacity(cfg.heads);
    for (i, head) in weights.heads.iter().enumerate() {
        let xs = g.slice_channels(stream, i * hc, hc)?;
        let q = g.pointwise_conv2d(xs, p[head.query.0], Some(p[head.query.1]))?;
        let k = g.pointwise_conv2d(xs, p[head.key], None)?;
        let v = g.pointwise_conv2d(xs, p[head.value.0], Some(p[head.value.1]))?;
        let energy = g.criss_cross_affinity(q, k)?;
        let attn = g.softmax(energy)?;
        outs.push(g.criss_cross_aggregate(attn, v)?);
        maps.push(attn);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 0)? };
    let proj = g.pointwise_conv2d(cat, p[weights.proj.0], Some(p[weights.proj.1]))?;
    Ok((proj, maps))
}

/// One residual criss-cross pass: `x + gamma * attention(x)`.
pub fn criss_cross_step<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    weights: &MhccaWeights,
    cfg: &MhccaConfig,
    x: Var,
) -> Result<Var> {
    check_input(g, x, cfg)?;
    let (delta, _) = attend(g, p, weights, cfg, x)?;
    let scaled = g.scale(delta, p[weights.gamma])?;
    g.add(x, scaled)
}

/// Per-head attention weights of one pass over `x`, as `[h, w, h + w - 1]`
/// tensors whose last axis is a probability vector.
pub fn attention_maps<T: Scalar>(
    store: &ParamStore<T>,
    weights: &MhccaWeights,
    cfg: &MhccaConfig,
    x: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    check_input(&g, xv, cfg)?;
    let (_, maps) = attend(&mut g, &p, weights, cfg, xv)?;
    Ok(maps.into_iter().map(|m| g.tensor(m).clone()).collect())
}

/// Full module: the encoding from `cfg` (when enabled) then `recurrence`
/// passes with shared weights.
pub fn mhcca_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    weights: &MhccaWeights,
    cfg: &MhccaConfig,
    x: Var,
) -> Result<Var> {
    check_input(g, x, cfg)?;
    let pe = if cfg.positional_encoding {
        let s = g.shape(x);
        Some(sinusoidal_pe(cfg.channels, s[1], s[2], cfg.pe_base)?)
    } else {
        None
    };
    mhcca_forward_with_pe(g, p, weights, cfg, x, pe)
}

/// [`mhcca_forward`] with an explicit encoding tensor (or none).
pub fn mhcca_forward_with_pe<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    weights: &MhccaWeights,
    cfg: &MhccaConfig,
    x: Var,
    pe: Option<Tensor<T>>,
) -> Result<Var> {
    check_input(g, x, cfg)?;
    let pe = pe.map(|t| g.leaf(t));
    let mut y = x;
    for _ in 0..cfg.recurrence {
        let stream = match pe {
            Some(pe) => g.add(y, pe)?,
            None => y,
        };
        let (delta, _) = attend(g, p, weights, cfg, stream)?;
        let scaled = g.scale(delta, p[weights.gamma])?;
        y = g.add(y, scaled)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn module(cfg: &MhccaConfig, seed: u64) -> (ParamStore<f64>, MhccaWeights) {
        let mut init = Init::new(seed);
        let w = MhccaWeights::build(&mut init, "cca", cfg).unwrap();
        (init.finish(), w)
    }

    fn run(
        store: &ParamStore<f64>,
        w: &MhccaWeights,
        cfg: &MhccaConfig,
        x: &Tensor<f64>,
        single_step: bool,
    ) -> Tensor<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.leaf(x.clone());
        let y = if single_step {
            criss_cross_step(&mut g, &p, w, cfg, xv).unwrap()
        } else {
            mhcca_forward(&mut g, &p, w, cfg, xv).unwrap()
        };
        g.tensor(y).clone()
    }

    #[test]
    fn pe_origin_is_sin_zero_cos_one() {
        let pe = sinusoidal_pe::<f64>(16, 5, 7, 10_000.0).unwrap();
        assert_eq!(pe.shape(), &[16, 5, 7]);
        for ch in 0..16 {
            let expected = if ch % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.at3(ch, 0, 0), expected, "channel {ch}");
        }
    }

    #[test]
    fn pe_rejects_channels_not_divisible_by_four() {
        assert!(sinusoidal_pe::<f32>(6, 3, 3, 10_000.0).is_err());
    }

    #[test]
    fn pe_positions_are_distinct() {
        let pe = sinusoidal_pe::<f64>(8, 16, 16, 10_000.0).unwrap();
        let vec_at = |y: usize, x: usize| -> Vec<f64> { (0..8).map(|c| pe.at3(c, y, x)).collect() };
        let positions: Vec<Vec<f64>> = (0..256).map(|i| vec_at(i / 16, i % 16)).collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..positions.len() {
            for j in i + 1..positions.len() {
                let d: f64 = positions[i]
                    .iter()
                    .zip(&positions[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(d);
            }
        }
        assert!(min_dist > 0.0);
    }

    #[test]
    fn zero_gamma_is_identity() {
        let cfg = MhccaConfig::new(8);
        let (store, w) = module(&cfg, 3);
        let x = random(4, &[8, 5, 6]);
        assert_eq!(run(&store, &w, &cfg, &x, true).data(), x.data());
        assert_eq!(run(&store, &w, &cfg, &x, false).data(), x.data());
    }

    #[test]
    fn constant_input_gives_position_independent_output() {
        let mut cfg = MhccaConfig::new(8);
        cfg.heads = 2;
        cfg.residual_scale_init = 0.7;
        let (store, w) = module(&cfg, 5);
        let x = Tensor::from_fn([8, 4, 6], |i| (i / 24) as f64 * 0.25 - 0.5);
        let y = run(&store, &w, &cfg, &x, true);
        for c in 0..8 {
            let first = y.at3(c, 0, 0);
            for i in 0..4 {
                for j in 0..6 {
                    assert!((y.at3(c, i, j) - first).abs() < 1e-12);
                }
            }
        }
        for map in attention_maps(&store, &w, &cfg, &x).unwrap() {
            assert!(map.data().iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-12));
        }
    }

    #[test]
    fn uniform_weights_add_cross_mean() {
        let mut cfg = MhccaConfig::new(4);
        cfg.heads = 2;
        let (mut store, w) = module(&cfg, 6);
        w.set_uniform_identity(&mut store, 1.0);
        let x = random(7, &[4, 5, 5]);
        let y = run(&store, &w, &cfg, &x, true);
        for c in 0..4 {
            for i in 0..5 {
                for j in 0..5 {
                    let mut sum = 0.0;
                    for r in 0..5 {
                        sum += x.at3(c, r, j);
                    }
                    for col in (0..5).filter(|&col| col != j) {
                        sum += x.at3(c, i, col);
                    }
                    let expected = x.at3(c, i, j) + sum / 9.0;
                    assert!((y.at3(c, i, j) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_is_preserved() {
        let cfg = MhccaConfig::new(16);
        let mut init = Init::<f32>::new(1);
        let w = MhccaWeights::build(&mut init, "cca", &cfg).unwrap();
        let store = init.finish();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.leaf(Tensor::<f32>::zeros([16, 24, 40]));
        let y = mhcca_forward(&mut g, &p, &w, &cfg, x).unwrap();
        assert_eq!(g.shape(y), &[16, 24, 40]);
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        let mut cfg = MhccaConfig::new(8);
        cfg.heads = 2;
        cfg.qk_channels_per_head = 3;
        let (store, w) = module(&cfg, 9);
        let x = random(10, &[8, 6, 7]).cast::<f64>();
        let x = Tensor::from_fn(x.shape(), |i| x.data()[i] * 4.0);
        for map in attention_maps(&store, &w, &cfg, &x).unwrap() {
            assert_eq!(map.shape(), &[6, 7, 12]);
            for row in map.data().chunks(12) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let cfg = MhccaConfig::new(8);
        let (store, w) = module(&cfg, 1);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.leaf(Tensor::<f64>::zeros([4, 3, 3]));
        assert!(matches!(
            mhcca_forward(&mut g, &p, &w, &cfg, x),
            Err(Error::ShapeMismatch {
                axis: 0,
                expected: 8,
                found: 4,
                ..
            })
        ));
    }

    #[test]
    fn config_validation_names_layer() {
        let mut cfg = MhccaConfig::new(12);
        cfg.heads = 5;
        let err = cfg.validate("stage2.cca").unwrap_err();
        assert!(matches!(err, Error::Config { ref layer, .. } if layer == "stage2.cca"));
    }

    #[test]
    fn transposed_input_gives_transposed_output() {
        let mut cfg = MhccaConfig::new(8);
        cfg.heads = 2;
        cfg.residual_scale_init = 0.8;
        let (store, w) = module(&cfg, 11);
        let x = random(12, &[8, 5, 7]);
        let pe = sinusoidal_pe::<f64>(8, 5, 7, cfg.pe_base).unwrap();
        let pe_t = pe.transpose_hw();
        let forward = |input: &Tensor<f64>, pe: Tensor<f64>| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let xv = g.leaf(input.clone());
            let y = mhcca_forward_with_pe(&mut g, &p, &w, &cfg, xv, Some(pe)).unwrap();
            g.tensor(y).clone()
        };
        let direct = forward(&x, pe);
        let via_transpose = forward(&x.transpose_hw(), pe_t).transpose_hw();
        assert!(direct.max_abs_diff(&via_transpose) < 1e-12);
        assert!(direct.max_abs_diff(&x) > 1e-3, "attention must not be a no-op here");
    }

    #[test]
    fn param_count_matches_built_weights() {
        for (c, heads) in [(8, 2), (16, 4), (64, 4)] {
            let mut cfg = MhccaConfig::new(c);
            cfg.heads = heads;
            let mut init = Init::<f32>::new(0);
            MhccaWeights::build(&mut init, "cca", &cfg).unwrap();
            assert_eq!(init.store().numel(), cfg.param_count());
        }
    }
}
