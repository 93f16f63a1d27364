//! The SPPR layer and the cross-stage-partial block built around it.
//!
//! SPPR max-pools a `C×H×W` map to the three levels `x`, `y`, `z` using
//! per-axis parameters from [`pooling_params`], flattens each pooled map per
//! channel, concatenates them in descending level order and reshapes the
//! `x² + y² + z² = w²` values into a `C×w×w` map.
//!
//! SPPRCSP splits the input into two compressed branches. The main branch runs
//! DSEConv → SPPR → DSEConv; the skip branch runs a parameter-free SPPR so it
//! reaches the same `w×w` extent. The branches are concatenated and fused by a
//! 1×1 convolution.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, Window2d};
use crate::init::Init;
use crate::params::{Bound, ParamId};
use crate::sppr_math::{pooling_params, Interpretation, LevelQuadruple};
use crate::tensor::Scalar;
use crate::trace::{self, LayerKind, LayerRow};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpprConfig {
    pub levels: LevelQuadruple,
    pub interpretation: Interpretation,
}

impl SpprConfig {
    /// Max-pooling window taking an `h`×`w` map to `l`×`l`.
    pub fn window(&self, h: usize, w: usize, l: u64) -> Result<Window2d> {
        let ph = pooling_params(h as u64, l, self.interpretation)?;
        let pw = pooling_params(w as u64, l, self.interpretation)?;
        Ok(Window2d {
            kernel: [ph.kernel as usize, pw.kernel as usize],
            stride: [ph.stride as usize, pw.stride as usize],
            padding: [ph.padding as usize, pw.padding as usize],
        })
    }

    pub fn min_extent(&self) -> usize {
        self.levels.max_level() as usize
    }

    pub fn out_extent(&self) -> usize {
        self.levels.w as usize
    }

    fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let l = self.levels.max_level();
        for e in [h, w] {
            if (e as u64) < l {
                return Err(Error::BelowLevel { h: e as u64, l });
            }
        }
        Ok(())
    }

    /// Comparisons performed by the three pooling passes over `c` channels.
    pub fn mult_adds(&self, c: usize, h: usize, w: usize) -> Result<usize> {
        self.check_extent(h, w)?;
        let mut total = 0;
        for l in self.levels.levels() {
            let win = self.window(h, w, l)?;
            let l = l as usize;
            total += c * l * l * win.kernel[0] * win.kernel[1];
        }
        Ok(total)
    }
}

/// Pool, flatten, concatenate and reshape: `C×H×W -> C×w×w`.
pub fn sppr_forward<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &SpprConfig) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Rank {
            op: "sppr",
            expected: 3,
            found: s,
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    cfg.check_extent(h, w)?;
    let mut flat = Vec::with_capacity(3);
    for l in cfg.levels.levels() {
        let pooled = g.max_pool2d(x, cfg.window(h, w, l)?)?;
        let l = l as usize;
        flat.push(g.reshape(pooled, [c, l * l])?);
    }
    let cat = g.concat(&flat, 1)?;
    let side = cfg.out_extent();
    g.reshape(cat, [c, side, side])
}

pub fn se_hidden(channels: usize, ratio: usize) -> usize {
    (channels / ratio.max(1)).max(1)
}

#[derive(Debug, Clone)]
pub struct SeWeights {
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

impl SeWeights {
    pub fn build<T: Scalar>(init: &mut Init<T>, prefix: &str, channels: usize, ratio: usize) -> Self {
        let hidden = se_hidden(channels, ratio);
        let fc1 = (
            init.fan_in(&format!("{prefix}.fc1.weight"), &[hidden, channels], channels),
            init.zeros(&format!("{prefix}.fc1.bias"), &[hidden]),
        );
        let fc2 = (
            init.fan_in(&format!("{prefix}.fc2.weight"), &[channels, hidden], hidden),
            init.zeros(&format!("{prefix}.fc2.bias"), &[channels]),
        );
        Self { fc1, fc2 }
    }

    pub fn param_count(channels: usize, ratio: usize) -> usize {
        let hidden = se_hidden(channels, ratio);
        2 * channels * hidden + hidden + channels
    }
}

/// Squeeze (spatial mean), excite (linear, relu, linear, sigmoid) and gate.
pub fn se_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, w: &SeWeights, x: Var) -> Result<Var> {
    let squeezed = g.global_avg_pool(x)?;
    let hidden = g.linear(squeezed, p[w.fc1.0], Some(p[w.fc1.1]))?;
    let hidden = g.relu(hidden)?;
    let gates = g.linear(hidden, p[w.fc2.0], Some(p[w.fc2.1]))?;
    let gates = g.sigmoid(gates)?;
    g.scale(x, gates)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DseConvConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub se_ratio: usize,
    /// Without SE every gate is fixed at 1.
    pub se: bool,
}

impl DseConvConfig {
    /// Shape-preserving `k`×`k` block with padding `k / 2`.
    pub fn same(c_in: usize, c_out: usize, kernel: usize, se_ratio: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding: kernel / 2,
            se_ratio,
            se: true,
        }
    }

    pub fn window(&self) -> Window2d {
        Window2d::square(self.kernel, self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        dseconv_param_count(self.c_in, self.c_out, self.kernel)
            + self.c_out
            + if self.se {
                SeWeights::param_count(self.c_out, self.se_ratio)
            } else {
                0
            }
    }

    /// Same block with the depthwise and pointwise pair replaced by one dense
    /// `k`×`k` convolution.
    pub fn plain_param_count(&self) -> usize {
        plain_conv_param_count(self.c_in, self.c_out, self.kernel)
            + self.c_out
            + if self.se {
                SeWeights::param_count(self.c_out, self.se_ratio)
            } else {
                0
            }
    }

    pub fn layers(&self, prefix: &str, input: &[usize], plain: bool) -> Result<Vec<LayerRow>> {
        let (h, w) = (input[1], input[2]);
        let win = self.window();
        let oh = win
            .output_len(0, h)
            .ok_or(Error::EmptyOutput { op: "dseconv", axis: 1 })?;
        let ow = win
            .output_len(1, w)
            .ok_or(Error::EmptyOutput { op: "dseconv", axis: 2 })?;
        let k = self.kernel;
        let out = [self.c_out, oh, ow];
        let mut rows = if plain {
            vec![LayerRow::new(
                format!("{prefix}.conv"),
                LayerKind::Conv,
                input,
                &out,
                plain_conv_param_count(self.c_in, self.c_out, k) + self.c_out,
                trace::conv_mult_adds(self.c_in, self.c_out, k, k, oh, ow),
            )]
        } else {
            let mid = [self.c_in, oh, ow];
            vec![
                LayerRow::new(
                    format!("{prefix}.depthwise"),
                    LayerKind::Depthwise,
                    input,
                    &mid,
                    self.c_in * k * k,
                    trace::depthwise_mult_adds(self.c_in, k, k, oh, ow),
                ),
                LayerRow::new(
                    format!("{prefix}.pointwise"),
                    LayerKind::Pointwise,
                    &mid,
                    &out,
                    self.c_in * self.c_out + self.c_out,
                    trace::pointwise_mult_adds(self.c_in, self.c_out, oh, ow),
                ),
            ]
        };
        if self.se {
            let hidden = se_hidden(self.c_out, self.se_ratio);
            rows.push(LayerRow::new(
                format!("{prefix}.se"),
                LayerKind::Se,
                &out,
                &out,
                SeWeights::param_count(self.c_out, self.se_ratio),
                2 * self.c_out * oh * ow + 2 * self.c_out * hidden,
            ));
        }
        Ok(rows)
    }
}

/// Depthwise plus pointwise weights, biases excluded.
pub fn dseconv_param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
    c_in * kernel * kernel + c_in * c_out
}

/// Dense convolution weights, biases excluded.
pub fn plain_conv_param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
    c_in * c_out * kernel * kernel
}

#[derive(Debug, Clone)]
pub struct DseConvWeights {
    pub config: DseConvConfig,
    pub depthwise: ParamId,
    pub pointwise: (ParamId, ParamId),
    pub se: Option<SeWeights>,
}

impl DseConvWeights {
    pub fn build<T: Scalar>(init: &mut Init<T>, prefix: &str, config: DseConvConfig) -> Self {
        let k = config.kernel;
        let depthwise = init.fan_in(&format!("{prefix}.depthwise.weight"), &[config.c_in, k, k], k * k);
        let pointwise = (
            init.fan_in(
                &format!("{prefix}.pointwise.weight"),
                &[config.c_out, config.c_in],
                config.c_in,
            ),
            init.zeros(&format!("{prefix}.pointwise.bias"), &[config.c_out]),
        );
        let se = config
            .se
            .then(|| SeWeights::build(init, &format!("{prefix}.se"), config.c_out, config.se_ratio));
        Self {
            config,
            depthwise,
            pointwise,
            se,
        }
    }
}

/// Depthwise `k`×`k`, pointwise 1×1, then squeeze-and-excitation gating.
pub fn dseconv_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, w: &DseConvWeights, x: Var) -> Result<Var> {
    let y = g.depthwise_conv2d(x, p[w.depthwise], None, w.config.window())?;
    let y = g.pointwise_conv2d(y, p[w.pointwise.0], Some(p[w.pointwise.1]))?;
    match &w.se {
        Some(se) => se_forward(g, p, se, y),
        None => Ok(y),
    }
}

/// Block options that do not depend on the incoming channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpprcspOptions {
    pub levels: LevelQuadruple,
    pub interpretation: Interpretation,
    pub se_ratio: usize,
    pub dse_kernel: usize,
    /// Output channels; `None` keeps the input channel count.
    pub c_out: Option<usize>,
    pub dse_before_sppr: bool,
    pub dse_after_sppr: bool,
    pub se: bool,
}

impl Default for SpprcspOptions {
    fn default() -> Self {
        Self {
            levels: LevelQuadruple::default(),
            interpretation: Interpretation::Literal,
            se_ratio: 16,
            dse_kernel: 3,
            c_out: None,
            dse_before_sppr: true,
            dse_after_sppr: true,
            se: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpprcspConfig {
    pub in_channels: usize,
    pub options: SpprcspOptions,
}

impl SpprcspConfig {
    pub fn new(in_channels: usize, options: SpprcspOptions) -> Self {
        Self { in_channels, options }
    }

    pub fn c_out(&self) -> usize {
        self.options.c_out.unwrap_or(self.in_channels)
    }

    pub fn hidden(&self) -> usize {
        self.in_channels / 2
    }

    pub fn sppr(&self) -> SpprConfig {
        SpprConfig {
            levels: self.options.levels,
            interpretation: self.options.interpretation,
        }
    }

    pub fn dse(&self) -> DseConvConfig {
        let c = self.hidden();
        DseConvConfig {
            se: self.options.se,
            ..DseConvConfig::same(c, c, self.options.dse_kernel, self.options.se_ratio)
        }
    }

    pub fn validate(&self, layer: &str) -> Result<()> {
        let fail = |reason| Error::Config {
            layer: layer.to_string(),
            reason,
        };
        if self.in_channels < 2 || !self.in_channels.is_multiple_of(2) {
            return Err(fail(format!(
                "channel compression needs an even input channel count, found {}",
                self.in_channels
            )));
        }
        if self.c_out() == 0 || self.options.dse_kernel == 0 || self.options.se_ratio == 0 {
            return Err(fail("c_out, dse_kernel and se_ratio must be positive".into()));
        }
        if self.options.dse_kernel.is_multiple_of(2) {
            return Err(fail(format!(
                "dse_kernel must be odd to preserve shape, found {}",
                self.options.dse_kernel
            )));
        }
        Ok(())
    }

    /// Per-layer accounting for a `C×H×W` input; `plain` swaps each DSEConv
    /// for a dense convolution.
    pub fn layers(&self, prefix: &str, h: usize, w: usize, plain: bool) -> Result<Vec<LayerRow>> {
        self.validate(prefix)?;
        let sppr = self.sppr();
        sppr.check_extent(h, w)?;
        let (c, hid, co) = (self.in_channels, self.hidden(), self.c_out());
        let side = sppr.out_extent();
        let input = [c, h, w];
        let full = [hid, h, w];
        let fixed = [hid, side, side];
        let compress = |name: &str| {
            LayerRow::new(
                format!("{prefix}.{name}"),
                LayerKind::Pointwise,
                &input,
                &full,
                c * hid + hid,
                trace::pointwise_mult_adds(c, hid, h, w),
            )
        };
        let pool = |name: &str| -> Result<LayerRow> {
            Ok(LayerRow::new(
                format!("{prefix}.{name}"),
                LayerKind::Sppr,
                &full,
                &fixed,
                0,
                sppr.mult_adds(hid, h, w)?,
            ))
        };
        let mut rows = vec![compress("main.compress")];
        if self.options.dse_before_sppr {
            rows.extend(self.dse().layers(&format!("{prefix}.main.dse_pre"), &full, plain)?);
        }
        rows.push(pool("main.sppr")?);
        if self.options.dse_after_sppr {
            let post = self.dse().layers(&format!("{prefix}.main.dse_post"), &fixed, plain)?;
            rows.extend(post.into_iter().map(LayerRow::after_sppr));
        }
        rows.push(compress("skip.compress"));
        rows.push(pool("skip.sppr")?);
        rows.push(
            LayerRow::new(
                format!("{prefix}.concat"),
                LayerKind::Concat,
                &fixed,
                &[c, side, side],
                0,
                0,
            )
            .after_sppr(),
        );
        rows.push(
            LayerRow::new(
                format!("{prefix}.fuse"),
                LayerKind::Pointwise,
                &[c, side, side],
                &[co, side, side],
                c * co + co,
                trace::pointwise_mult_adds(c, co, side, side),
            )
            .after_sppr(),
        );
        Ok(rows)
    }

    pub fn param_count(&self) -> usize {
        let (c, hid, co) = (self.in_channels, self.hidden(), self.c_out());
        let dse = self.dse().param_count();
        let n_dse = self.options.dse_before_sppr as usize + self.options.dse_after_sppr as usize;
        2 * (c * hid + hid) + n_dse * dse + c * co + co
    }
}

#[derive(Debug, Clone)]
pub struct SpprcspWeights {
    pub compress_main: (ParamId, ParamId),
    pub compress_skip: (ParamId, ParamId),
    pub dse_pre: Option<DseConvWeights>,
    pub dse_post: Option<DseConvWeights>,
    pub fuse: (ParamId, ParamId),
}

impl SpprcspWeights {
    pub fn build<T: Scalar>(init: &mut Init<T>, prefix: &str, cfg: &SpprcspConfig) -> Result<Self> {
        cfg.validate(prefix)?;
        let (c, hid, co) = (cfg.in_channels, cfg.hidden(), cfg.c_out());
        let mut conv = |name: &str, o: usize, i: usize| {
            (
                init.fan_in(&format!("{prefix}.{name}.weight"), &[o, i], i),
                init.zeros(&format!("{prefix}.{name}.bias"), &[o]),
            )
        };
        let compress_main = conv("main.compress", hid, c);
        let compress_skip = conv("skip.compress", hid, c);
        let fuse = conv("fuse", co, c);
        let dse_pre = cfg
            .options
            .dse_before_sppr
            .then(|| DseConvWeights::build(init, &format!("{prefix}.main.dse_pre"), cfg.dse()));
        let dse_post = cfg
            .options
            .dse_after_sppr
            .then(|| DseConvWeights::build(init, &format!("{prefix}.main.dse_post"), cfg.dse()));
        Ok(Self {
            compress_main,
            compress_skip,
            dse_pre,
            dse_post,
            fuse,
        })
    }
}

pub fn spprcsp_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    w: &SpprcspWeights,
    cfg: &SpprcspConfig,
    x: Var,
) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 3 {
        return Err(Error::Rank {
            op: "spprcsp",
            expected: 3,
            found: s.to_vec(),
        });
    }
    if s[0] != cfg.in_channels {
        return Err(Error::ShapeMismatch {
            op: "spprcsp",
            axis: 0,
            expected: cfg.in_channels,
            found: s[0],
        });
    }
    let sppr = cfg.sppr();

    let mut main = g.pointwise_conv2d(x, p[w.compress_main.0], Some(p[w.compress_main.1]))?;
    if let Some(dse) = &w.dse_pre {
        main = dseconv_forward(g, p, dse, main)?;
    }
    main = sppr_forward(g, main, &sppr)?;
    if let Some(dse) = &w.dse_post {
        main = dseconv_forward(g, p, dse, main)?;
    }

    let skip = g.pointwise_conv2d(x, p[w.compress_skip.0], Some(p[w.compress_skip.1]))?;
    let skip = sppr_forward(g, skip, &sppr)?;

    let cat = g.concat(&[main, skip], 0)?;
    g.pointwise_conv2d(cat, p[w.fuse.0], Some(p[w.fuse.1]))
}
