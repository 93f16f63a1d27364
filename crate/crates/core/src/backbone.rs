//! ResNet-style stage stack with criss-cross attention after a chosen stage
//! and SPPRCSP after the last one.
//!
//! Every convolution uses padding `k / 2`, so an input whose extents are
//! multiples of the cumulative stride `S` reaches the last stage at exactly
//! `H / S`×`W / S`. That map must be at least as large as the biggest pyramid
//! level, hence the minimum input `S · max_level` per axis.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Deserializer, Serialize};

use crate::attention::{mhcca_forward, MhccaConfig, MhccaWeights};
use crate::autodiff::{Graph, Var, Window2d};
use crate::init::Init;
use crate::params::{Bound, ParamId, ParamStore};
use crate::spprcsp::{spprcsp_forward, SpprcspConfig, SpprcspOptions, SpprcspWeights};
use crate::tensor::Scalar;
use crate::trace::{self, LayerKind, LayerRow};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Mini,
    #[serde(rename = "scaresnet-50")]
    Scaresnet50,
    Custom,
}

impl Preset {
    pub fn config(self) -> BackboneConfig {
        match self {
            Preset::Mini | Preset::Custom => BackboneConfig::mini(),
            Preset::Scaresnet50 => BackboneConfig::scaresnet50(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockType {
    Basic,
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub max_pool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub block_type: BlockType,
    pub out_channels: usize,
    pub stride: usize,
    /// Expected incoming channels; checked against the previous layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
}

impl StageSpec {
    pub fn new(blocks: usize, block_type: BlockType, out_channels: usize, stride: usize) -> Self {
        Self {
            blocks,
            block_type,
            out_channels,
            stride,
            in_channels: None,
        }
    }
}

/// Attention hyperparameters that do not depend on the channel count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CcaOptions {
    pub heads: usize,
    /// `None` picks `max(1, C / (8 · heads))`.
    pub qk_channels_per_head: Option<usize>,
    pub recurrence: usize,
    pub pe_base: f64,
    pub residual_scale_init: f64,
    pub positional_encoding: bool,
}

impl Default for CcaOptions {
    fn default() -> Self {
        let base = MhccaConfig::new(64);
        Self {
            heads: base.heads,
            qk_channels_per_head: None,
            recurrence: base.recurrence,
            pe_base: base.pe_base,
            residual_scale_init: base.residual_scale_init,
            positional_encoding: base.positional_encoding,
        }
    }
}

impl CcaOptions {
    pub fn config(&self, channels: usize) -> MhccaConfig {
        let heads = self.heads.max(1);
        MhccaConfig {
            channels,
            heads: self.heads,
            qk_channels_per_head: self.qk_channels_per_head.unwrap_or((channels / (8 * heads)).max(1)),
            recurrence: self.recurrence,
            pe_base: self.pe_base,
            residual_scale_init: self.residual_scale_init,
            positional_encoding: self.positional_encoding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub preset: Preset,
    pub in_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    /// Stage indices followed by an attention module; a single index or a list.
    #[serde(deserialize_with = "one_or_many")]
    pub cca_insert_after: Vec<usize>,
    pub cca: CcaOptions,
    pub spprcsp: SpprcspOptions,
    /// Upper bound on group-norm groups; the actual count is `gcd(C, norm_groups)`.
    pub norm_groups: usize,
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> core::result::Result<Vec<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(usize),
        Many(Vec<usize>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(i) => vec![i],
        OneOrMany::Many(v) => v,
    })
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::mini()
    }
}

impl BackboneConfig {
    /// Two single-block basic stages after a stride-2 stem: total stride 8.
    pub fn mini() -> Self {
        Self {
            preset: Preset::Mini,
            in_channels: 3,
            stem: StemSpec {
                kernel: 3,
                stride: 2,
                out_channels: 16,
                max_pool: false,
            },
            stages: vec![
                StageSpec::new(1, BlockType::Basic, 16, 2),
                StageSpec::new(1, BlockType::Basic, 32, 2),
            ],
            cca_insert_after: vec![0],
            cca: CcaOptions::default(),
            spprcsp: SpprcspOptions {
                c_out: Some(32),
                ..Default::default()
            },
            norm_groups: 8,
        }
    }

    /// The 50-layer bottleneck layout (3, 4, 6, 3): total stride 32.
    pub fn scaresnet50() -> Self {
        Self {
            preset: Preset::Scaresnet50,
            in_channels: 3,
            stem: StemSpec {
                kernel: 7,
                stride: 2,
                out_channels: 64,
                max_pool: true,
            },
            stages: vec![
                StageSpec::new(3, BlockType::Bottleneck, 256, 1),
                StageSpec::new(4, BlockType::Bottleneck, 512, 2),
                StageSpec::new(6, BlockType::Bottleneck, 1024, 2),
                StageSpec::new(3, BlockType::Bottleneck, 2048, 2),
            ],
            cca_insert_after: vec![2],
            cca: CcaOptions::default(),
            spprcsp: SpprcspOptions {
                c_out: Some(2048),
                ..Default::default()
            },
            norm_groups: 8,
        }
    }

    pub fn total_stride(&self) -> usize {
        let pool = if self.stem.max_pool { 2 } else { 1 };
        self.stem.stride * pool * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn max_level(&self) -> usize {
        self.spprcsp.levels.max_level() as usize
    }

    /// Smallest accepted extent along either axis.
    pub fn min_input(&self) -> usize {
        self.total_stride() * self.max_level()
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.out_channels, |s| s.out_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.spprcsp.c_out.unwrap_or(self.final_channels())
    }

    pub fn out_extent(&self) -> usize {
        self.spprcsp.levels.w as usize
    }

    fn groups(&self, c: usize) -> usize {
        gcd(c, self.norm_groups.max(1))
    }

    fn spprcsp_config(&self) -> SpprcspConfig {
        SpprcspConfig::new(self.final_channels(), self.spprcsp)
    }

    fn stage_cca(&self, stage: usize) -> Option<MhccaConfig> {
        self.cca_insert_after
            .contains(&stage)
            .then(|| self.cca.config(self.stages[stage].out_channels))
    }

    /// Structural checks, naming the offending layer.
    pub fn validate(&self) -> Result<()> {
        let fail = |layer: &str, reason: String| Error::Config {
            layer: layer.to_string(),
            reason,
        };
        let s = &self.stem;
        if self.in_channels == 0 || s.out_channels == 0 || s.stride == 0 || s.kernel.is_multiple_of(2) {
            return Err(fail(
                "stem",
                "channels and stride must be positive and the kernel odd".into(),
            ));
        }
        if self.stages.is_empty() {
            return Err(fail("stages", "at least one stage is required".into()));
        }
        let mut c = s.out_channels;
        for (i, st) in self.stages.iter().enumerate() {
            let name = format!("stage{i}");
            if let Some(cin) = st.in_channels {
                if cin != c {
                    return Err(fail(&name, format!("expects {cin} input channels but receives {c}")));
                }
            }
            if st.blocks == 0 || st.stride == 0 || st.out_channels == 0 {
                return Err(fail(&name, "block count, stride and channels must be positive".into()));
            }
            if st.block_type == BlockType::Bottleneck && st.out_channels % 4 != 0 {
                return Err(fail(
                    &name,
                    format!(
                        "bottleneck output channels must be divisible by 4, found {}",
                        st.out_channels
                    ),
                ));
            }
            c = st.out_channels;
        }
        for &i in &self.cca_insert_after {
            if i >= self.stages.len() {
                return Err(fail(
                    "cca",
                    format!("insertion after stage {i} but only {} stages", self.stages.len()),
                ));
            }
            self.cca
                .config(self.stages[i].out_channels)
                .validate(&format!("stage{i}.cca"))?;
        }
        self.spprcsp_config().validate("spprcsp")
    }

    /// Rejects extents that are not multiples of the cumulative stride or
    /// fall below the minimum.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let (min, stride) = (self.min_input(), self.total_stride());
        if h < min || w < min || !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
            return Err(Error::InputSize { h, w, min, stride });
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Bias-free convolution followed by group norm.
#[derive(Debug, Clone)]
pub struct ConvNorm {
    pub conv: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub window: Window2d,
    pub groups: usize,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn build<T: Scalar>(
        init: &mut Init<T>,
        prefix: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        Self {
            conv: init.fan_in(&format!("{prefix}.conv.weight"), &[co, ci, k, k], ci * k * k),
            gamma: init.constant(&format!("{prefix}.norm.weight"), &[co], 1.0),
            beta: init.zeros(&format!("{prefix}.norm.bias"), &[co]),
            window: Window2d::square(k, stride, k / 2),
            groups,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.conv], None, self.window)?;
        g.group_norm(y, p[self.gamma], p[self.beta], self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub block_type: BlockType,
    pub convs: Vec<ConvNorm>,
    pub shortcut: Option<ConvNorm>,
}

#[derive(Debug, Clone)]
pub struct CcaSite {
    pub after_stage: usize,
    pub config: MhccaConfig,
    pub weights: MhccaWeights,
}

#[derive(Debug, Clone)]
pub struct BackboneWeights {
    pub stem: ConvNorm,
    pub stages: Vec<Vec<BlockWeights>>,
    pub cca: Vec<CcaSite>,
    pub spprcsp: SpprcspWeights,
}

/// A configured network and its parameters.
#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub params: ParamStore<T>,
    pub weights: BackboneWeights,
}

/// Block input/output channels and the per-conv (in, out, kernel, stride).
fn block_layout(bt: BlockType, ci: usize, co: usize, stride: usize) -> Vec<(usize, usize, usize, usize)> {
    match bt {
        BlockType::Basic => vec![(ci, co, 3, stride), (co, co, 3, 1)],
        BlockType::Bottleneck => {
            let mid = co / 4;
            vec![(ci, mid, 1, 1), (mid, mid, 3, stride), (mid, co, 1, 1)]
        }
    }
}

/// Deterministic seeded weights for the whole network.
pub fn build_scaresnet<T: Scalar>(config: &BackboneConfig, seed: u64) -> Result<Backbone<T>> {
    config.validate()?;
    let mut init = Init::new(seed);
    let s = &config.stem;
    let stem = ConvNorm::build(
        &mut init,
        "stem",
        config.in_channels,
        s.out_channels,
        s.kernel,
        s.stride,
        config.groups(s.out_channels),
    );
    let mut stages = Vec::with_capacity(config.stages.len());
    let mut cca = Vec::new();
    let mut c = s.out_channels;
    for (i, st) in config.stages.iter().enumerate() {
        let mut blocks = Vec::with_capacity(st.blocks);
        for b in 0..st.blocks {
            let prefix = format!("stage{i}.block{b}");
            let stride = if b == 0 { st.stride } else { 1 };
            let co = st.out_channels;
            let convs = block_layout(st.block_type, c, co, stride)
                .into_iter()
                .enumerate()
                .map(|(j, (ci, co, k, s))| {
                    ConvNorm::build(
                        &mut init,
                        &format!("{prefix}.conv{}", j + 1),
                        ci,
                        co,
                        k,
                        s,
                        config.groups(co),
                    )
                })
                .collect();
            let shortcut = (stride != 1 || c != co).then(|| {
                ConvNorm::build(
                    &mut init,
                    &format!("{prefix}.shortcut"),
                    c,
                    co,
                    1,
                    stride,
                    config.groups(co),
                )
            });
            blocks.push(BlockWeights {
                block_type: st.block_type,
                convs,
                shortcut,
            });
            c = co;
        }
        stages.push(blocks);
        if let Some(cfg) = config.stage_cca(i) {
            let weights = MhccaWeights::build(&mut init, &format!("stage{i}.cca"), &cfg)?;
            cca.push(CcaSite {
                after_stage: i,
                config: cfg,
                weights,
            });
        }
    }
    let spprcsp = SpprcspWeights::build(&mut init, "spprcsp", &config.spprcsp_config())?;
    Ok(Backbone {
        config: config.clone(),
        params: init.finish(),
        weights: BackboneWeights {
            stem,
            stages,
            cca,
            spprcsp,
        },
    })
}

/// Output shape after each top-level layer, keyed like [`ShapeTrace`] rows.
pub type Observed = Vec<(String, Vec<usize>)>;

/// `C_in×H×W -> C_out×w×w`.
pub fn backbone_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, net: &Backbone<T>, x: Var) -> Result<Var> {
    forward_inner(g, p, net, x, None)
}

/// [`backbone_forward`] that also records every top-level output shape.
pub fn backbone_forward_observed<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    net: &Backbone<T>,
    x: Var,
) -> Result<(Var, Observed)> {
    let mut seen = Vec::new();
    let y = forward_inner(g, p, net, x, Some(&mut seen))?;
    Ok((y, seen))
}

fn forward_inner<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    net: &Backbone<T>,
    x: Var,
    mut seen: Option<&mut Observed>,
) -> Result<Var> {
    let cfg = &net.config;
    let w = &net.weights;
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Rank {
            op: "backbone",
            expected: 3,
            found: s,
        });
    }
    if s[0] != cfg.in_channels {
        return Err(Error::ShapeMismatch {
            op: "backbone",
            axis: 0,
            expected: cfg.in_channels,
            found: s[0],
        });
    }
    cfg.check_input(s[1], s[2])?;

    let mut record = |g: &Graph<T>, name: &str, v: Var| {
        if let Some(seen) = seen.as_deref_mut() {
            seen.push((name.to_string(), g.shape(v).to_vec()));
        }
    };

    let mut y = w.stem.forward(g, p, x)?;
    y = g.relu(y)?;
    if cfg.stem.max_pool {
        y = g.max_pool2d(y, Window2d::square(3, 2, 1))?;
    }
    record(g, "stem", y);

    for (i, blocks) in w.stages.iter().enumerate() {
        for (b, block) in blocks.iter().enumerate() {
            let mut h = y;
            let last = block.convs.len() - 1;
            for (j, cn) in block.convs.iter().enumerate() {
                h = cn.forward(g, p, h)?;
                if j != last {
                    h = g.relu(h)?;
                }
            }
            let short = match &block.shortcut {
                Some(cn) => cn.forward(g, p, y)?,
                None => y,
            };
            let sum = g.add(h, short)?;
            y = g.relu(sum)?;
            record(g, &format!("stage{i}.block{b}"), y);
        }
        for site in w.cca.iter().filter(|s| s.after_stage == i) {
            y = mhcca_forward(g, p, &site.weights, &site.config, y)?;
            record(g, &format!("stage{i}.cca"), y);
        }
    }
    y = spprcsp_forward(g, p, &w.spprcsp, &cfg.spprcsp_config(), y)?;
    record(g, "spprcsp", y);
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub name: String,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub params: usize,
    pub mult_adds: usize,
    pub sublayers: Vec<LayerRow>,
}

impl TraceRow {
    fn from_layers(name: impl Into<String>, sublayers: Vec<LayerRow>) -> Self {
        let input = sublayers.first().map(|r| r.input.clone()).unwrap_or_default();
        let output = sublayers.last().map(|r| r.output.clone()).unwrap_or_default();
        Self {
            name: name.into(),
            input,
            output,
            params: sublayers.iter().map(|r| r.params).sum(),
            mult_adds: sublayers.iter().map(|r| r.mult_adds).sum(),
            sublayers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub params: usize,
    pub mult_adds: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeTrace {
    pub preset: Preset,
    pub input: Vec<usize>,
    pub rows: Vec<TraceRow>,
    pub total: Totals,
}

impl ShapeTrace {
    pub fn layers(&self) -> impl Iterator<Item = &LayerRow> {
        self.rows.iter().flat_map(|r| r.sublayers.iter())
    }

    /// True when each row's input equals the previous row's output.
    pub fn chains(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].output == w[1].input)
    }
}

fn conv_norm_rows(
    prefix: &str,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    h: usize,
    w: usize,
) -> (Vec<LayerRow>, usize, usize) {
    let win = Window2d::square(k, stride, k / 2);
    // Extents are multiples of the stride, so these never fail.
    let oh = win.output_len(0, h).unwrap_or(0);
    let ow = win.output_len(1, w).unwrap_or(0);
    let out = [co, oh, ow];
    let rows = vec![
        LayerRow::new(
            format!("{prefix}.conv"),
            LayerKind::Conv,
            &[ci, h, w],
            &out,
            co * ci * k * k,
            trace::conv_mult_adds(ci, co, k, k, oh, ow),
        ),
        LayerRow::new(
            format!("{prefix}.norm"),
            LayerKind::Norm,
            &out,
            &out,
            2 * co,
            2 * co * oh * ow,
        ),
    ];
    (rows, oh, ow)
}

fn elementwise(name: String, kind: LayerKind, shape: &[usize]) -> LayerRow {
    LayerRow::new(name, kind, shape, shape, 0, 0)
}

fn trace_rows(config: &BackboneConfig, h: usize, w: usize, plain: bool) -> Result<Vec<TraceRow>> {
    config.validate()?;
    config.check_input(h, w)?;
    let mut rows = Vec::new();

    let s = &config.stem;
    let (mut sub, mut h, mut w) = conv_norm_rows("stem", config.in_channels, s.out_channels, s.kernel, s.stride, h, w);
    let mut c = s.out_channels;
    sub.push(elementwise("stem.relu".into(), LayerKind::Activation, &[c, h, w]));
    if s.max_pool {
        let win = Window2d::square(3, 2, 1);
        let (oh, ow) = (win.output_len(0, h).unwrap_or(0), win.output_len(1, w).unwrap_or(0));
        sub.push(LayerRow::new(
            "stem.maxpool",
            LayerKind::Pool,
            &[c, h, w],
            &[c, oh, ow],
            0,
            c * 9 * oh * ow,
        ));
        (h, w) = (oh, ow);
    }
    rows.push(TraceRow::from_layers("stem", sub));

    for (i, st) in config.stages.iter().enumerate() {
        for b in 0..st.blocks {
            let prefix = format!("stage{i}.block{b}");
            let stride = if b == 0 { st.stride } else { 1 };
            let co = st.out_channels;
            let layout = block_layout(st.block_type, c, co, stride);
            let last = layout.len() - 1;
            let mut sub = Vec::new();
            let (mut bh, mut bw) = (h, w);
            for (j, (ci, cj, k, s)) in layout.into_iter().enumerate() {
                let name = format!("{prefix}.conv{}", j + 1);
                let (r, oh, ow) = conv_norm_rows(&name, ci, cj, k, s, bh, bw);
                sub.extend(r);
                if j != last {
                    sub.push(elementwise(
                        format!("{name}.relu"),
                        LayerKind::Activation,
                        &[cj, oh, ow],
                    ));
                }
                (bh, bw) = (oh, ow);
            }
            let out = [co, bh, bw];
            if stride != 1 || c != co {
                let (r, _, _) = conv_norm_rows(&format!("{prefix}.shortcut"), c, co, 1, stride, h, w);
                sub.extend(r);
            }
            sub.push(elementwise(format!("{prefix}.add"), LayerKind::Residual, &out));
            sub.push(elementwise(format!("{prefix}.relu"), LayerKind::Activation, &out));
            let mut row = TraceRow::from_layers(prefix, sub);
            row.input = vec![c, h, w];
            rows.push(row);
            (c, h, w) = (co, bh, bw);
        }
        if let Some(cca) = config.stage_cca(i) {
            let shape = [c, h, w];
            let row = LayerRow::new(
                format!("stage{i}.cca"),
                LayerKind::Attention,
                &shape,
                &shape,
                cca.param_count(),
                cca.mult_adds(h, w),
            );
            rows.push(TraceRow::from_layers(format!("stage{i}.cca"), vec![row]));
        }
    }

    let sub = config.spprcsp_config().layers("spprcsp", h, w, plain)?;
    let side = config.out_extent();
    let mut row = TraceRow::from_layers("spprcsp", sub);
    row.input = vec![c, h, w];
    row.output = vec![config.out_channels(), side, side];
    rows.push(row);
    Ok(rows)
}

/// Per-layer shapes, parameters and multiply-adds for a `C_in×H×W` input.
pub fn shape_trace(config: &BackboneConfig, h: usize, w: usize) -> Result<ShapeTrace> {
    let rows = trace_rows(config, h, w, false)?;
    let total = Totals {
        params: rows.iter().map(|r| r.params).sum(),
        mult_adds: rows.iter().map(|r| r.mult_adds).sum(),
    };
    Ok(ShapeTrace {
        preset: config.preset,
        input: vec![config.in_channels, h, w],
        rows,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainComparison {
    pub total: Totals,
    /// Depthwise-separable layers only, against their dense replacements.
    pub dse_params: usize,
    pub plain_conv_params: usize,
    pub dse_param_ratio: f64,
    pub param_ratio: f64,
    pub mult_add_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub preset: Preset,
    pub input: Vec<usize>,
    pub total: Totals,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plain: Option<PlainComparison>,
}

pub fn count_params_flops(
    config: &BackboneConfig,
    h: usize,
    w: usize,
    compare_plain: bool,
) -> Result<ParamCountReport> {
    let base = shape_trace(config, h, w)?;
    let plain = if compare_plain {
        let rows = trace_rows(config, h, w, true)?;
        let total = Totals {
            params: rows.iter().map(|r| r.params).sum(),
            mult_adds: rows.iter().map(|r| r.mult_adds).sum(),
        };
        let weights = |layers: &mut dyn Iterator<Item = &LayerRow>, kinds: &[LayerKind]| -> usize {
            layers
                .filter(|r| r.name.contains(".dse_") && kinds.contains(&r.kind))
                .map(|r| r.params)
                .sum()
        };
        let dse_params = weights(&mut base.layers(), &[LayerKind::Depthwise, LayerKind::Pointwise]);
        let plain_conv_params = weights(&mut rows.iter().flat_map(|r| r.sublayers.iter()), &[LayerKind::Conv]);
        Some(PlainComparison {
            total,
            dse_params,
            plain_conv_params,
            dse_param_ratio: dse_params as f64 / plain_conv_params as f64,
            param_ratio: base.total.params as f64 / total.params as f64,
            mult_add_ratio: base.total.mult_adds as f64 / total.mult_adds as f64,
        })
    } else {
        None
    };
    Ok(ParamCountReport {
        preset: config.preset,
        input: base.input,
        total: base.total,
        plain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn run(net: &Backbone<f32>, x: Tensor<f32>) -> Result<(Tensor<f32>, Observed)> {
        let mut g = Graph::new();
        let p = net.params.bind(&mut g);
        let xv = g.leaf(x);
        let (y, seen) = backbone_forward_observed(&mut g, &p, net, xv)?;
        Ok((g.tensor(y).clone(), seen))
    }

    #[test]
    fn presets_have_documented_strides() {
        assert_eq!(BackboneConfig::mini().total_stride(), 8);
        assert_eq!(BackboneConfig::mini().min_input(), 72);
        assert_eq!(BackboneConfig::scaresnet50().total_stride(), 32);
        assert_eq!(BackboneConfig::scaresnet50().min_input(), 288);
        BackboneConfig::scaresnet50().validate().unwrap();
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = BackboneConfig::mini();
        let a = build_scaresnet::<f32>(&cfg, 11).unwrap();
        let b = build_scaresnet::<f32>(&cfg, 11).unwrap();
        let c = build_scaresnet::<f32>(&cfg, 12).unwrap();
        let bits = |n: &Backbone<f32>| -> Vec<u32> {
            n.params
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn mini_accepts_96_and_reports_72_for_64() {
        let cfg = BackboneConfig::mini();
        let trace = shape_trace(&cfg, 96, 96).unwrap();
        let pre = trace.rows.iter().find(|r| r.name == "spprcsp").unwrap();
        assert_eq!(pre.input, vec![32, 12, 12]);
        assert_eq!(
            cfg.check_input(64, 64).unwrap_err(),
            Error::InputSize {
                h: 64,
                w: 64,
                min: 72,
                stride: 8
            }
        );
        assert!(cfg.check_input(72, 72).is_ok());
        assert!(cfg.check_input(76, 80).is_err());
    }

    #[test]
    fn mini_outputs_are_unified() {
        let net = build_scaresnet::<f32>(&BackboneConfig::mini(), 0).unwrap();
        for (h, w) in [(96, 96), (120, 168), (256, 200)] {
            let (y, _) = run(&net, Tensor::from_fn([3, h, w], |i| (i % 7) as f32 * 0.1)).unwrap();
            assert_eq!(y.shape(), &[32, 11, 11]);
        }
    }

    #[test]
    fn undersized_input_is_rejected() {
        let net = build_scaresnet::<f32>(&BackboneConfig::mini(), 0).unwrap();
        let err = run(&net, Tensor::zeros([3, 64, 96])).unwrap_err();
        assert!(matches!(err, Error::InputSize { min: 72, .. }));
    }

    #[test]
    fn trace_matches_forward() {
        let cfg = BackboneConfig::mini();
        let net = build_scaresnet::<f32>(&cfg, 3).unwrap();
        for (h, w) in [(96, 96), (72, 136)] {
            let trace = shape_trace(&cfg, h, w).unwrap();
            assert!(trace.chains());
            let (_, seen) = run(&net, Tensor::full([3, h, w], 0.5)).unwrap();
            let traced: Observed = trace.rows.iter().map(|r| (r.name.clone(), r.output.clone())).collect();
            assert_eq!(seen, traced);
            assert_eq!(trace.rows.last().unwrap().output, vec![32, 11, 11]);
        }
    }

    #[test]
    fn trace_params_equal_built_params() {
        let cfg = BackboneConfig::mini();
        let net = build_scaresnet::<f32>(&cfg, 0).unwrap();
        let trace = shape_trace(&cfg, 96, 96).unwrap();
        assert_eq!(trace.total.params, net.params.numel());
        assert_eq!(trace.total.params, trace.layers().map(|r| r.params).sum::<usize>());
    }

    #[test]
    fn pointwise_mult_adds() {
        let cfg = SpprcspConfig::new(16, SpprcspOptions::default());
        let rows = cfg.layers("b", 12, 12, false).unwrap();
        let compress = &rows[0];
        assert_eq!((compress.input[0], compress.output[0]), (16, 8));
        assert_eq!(compress.mult_adds, 8 * 16 * 12 * 12);
        assert_eq!(compress.mult_adds, 18432);
    }

    #[test]
    fn doubling_height_scales_spatial_layers_only() {
        for cfg in [BackboneConfig::mini(), BackboneConfig::scaresnet50()] {
            let s = cfg.min_input();
            let a = shape_trace(&cfg, s + cfg.total_stride(), s).unwrap();
            let b = shape_trace(&cfg, 2 * (s + cfg.total_stride()), s).unwrap();
            for (x, y) in a.layers().zip(b.layers()) {
                assert_eq!(x.name, y.name);
                if x.after_sppr {
                    assert_eq!(x.mult_adds, y.mult_adds, "{}", x.name);
                } else if x.kind.is_spatial() {
                    assert_eq!(2 * x.mult_adds, y.mult_adds, "{}", x.name);
                }
            }
        }
    }

    #[test]
    fn plain_comparison_favours_dse() {
        for cfg in [BackboneConfig::mini(), BackboneConfig::scaresnet50()] {
            let s = cfg.min_input();
            let r = count_params_flops(&cfg, s, s, true).unwrap();
            let plain = r.plain.unwrap();
            assert!(plain.dse_param_ratio < 1.0 && plain.param_ratio < 1.0);
            assert_eq!(r.total, count_params_flops(&cfg, s, s, false).unwrap().total);
        }
    }

    #[test]
    fn channel_chaining_error_names_stage() {
        let mut cfg = BackboneConfig::mini();
        cfg.stages[1].in_channels = Some(24);
        let err = build_scaresnet::<f32>(&cfg, 0).unwrap_err();
        assert!(
            matches!(err, Error::Config { ref layer, .. } if layer == "stage1"),
            "{err:?}"
        );
    }

    #[test]
    fn config_accepts_single_insertion_index() {
        let cfg: BackboneConfig = serde_json::from_str(r#"{"cca_insert_after": 1}"#).unwrap();
        assert_eq!(cfg.cca_insert_after, vec![1]);
        let cfg: BackboneConfig = serde_json::from_str(r#"{"cca_insert_after": [0, 1]}"#).unwrap();
        assert_eq!(cfg.cca_insert_after, vec![0, 1]);
    }
}
