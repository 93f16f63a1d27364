//! Per-layer shape, parameter and multiply-add accounting.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Depthwise,
    Pointwise,
    Pool,
    Norm,
    Activation,
    Residual,
    Attention,
    Se,
    Sppr,
    Concat,
    Linear,
}

impl LayerKind {
    /// Convolution and pooling layers: their multiply-adds scale with the
    /// spatial extent.
    pub fn is_spatial(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::Depthwise | LayerKind::Pointwise | LayerKind::Pool
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: LayerKind,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub params: usize,
    pub mult_adds: usize,
    /// Layer consumes the fixed-size output of an SPPR layer.
    pub after_sppr: bool,
}

impl LayerRow {
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        input: &[usize],
        output: &[usize],
        params: usize,
        mult_adds: usize,
    ) -> Self {
        Self {
            name: name.into(),
            kind,
            input: input.to_vec(),
            output: output.to_vec(),
            params,
            mult_adds,
            after_sppr: false,
        }
    }

    pub fn after_sppr(mut self) -> Self {
        self.after_sppr = true;
        self
    }
}

/// Multiply-adds of a dense convolution producing `co`×`oh`×`ow` from `ci`
/// channels with a `kh`×`kw` kernel.
pub fn conv_mult_adds(ci: usize, co: usize, kh: usize, kw: usize, oh: usize, ow: usize) -> usize {
    co * ci * kh * kw * oh * ow
}

pub fn depthwise_mult_adds(c: usize, kh: usize, kw: usize, oh: usize, ow: usize) -> usize {
    c * kh * kw * oh * ow
}

pub fn pointwise_mult_adds(ci: usize, co: usize, h: usize, w: usize) -> usize {
    ci * co * h * w
}
