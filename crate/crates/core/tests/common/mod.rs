//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use scaresnet_core::sppr_math::{pooling_params, Interpretation, LevelQuadruple};
use scaresnet_core::Tensor;

/// SPPR by explicit loops: per-axis windows from the pooling rule, maxima
/// over the in-range part of each window, blocks written level by level in
/// descending order, then read back as a `w`×`w` grid.
pub fn sppr_loops(x: &Tensor<f64>, levels: &LevelQuadruple, interp: Interpretation) -> Tensor<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut ls = levels.levels();
    ls.sort_unstable_by(|a, b| b.cmp(a));
    let side = levels.w as usize;
    let mut out = vec![0.0; c * side * side];
    for ch in 0..c {
        let mut flat = Vec::with_capacity(side * side);
        for &l in &ls {
            let py = pooling_params(h as u64, l, interp).unwrap();
            let px = pooling_params(w as u64, l, interp).unwrap();
            for oy in 0..l as i64 {
                for ox in 0..l as i64 {
                    let y0 = oy * py.stride as i64 - py.padding as i64;
                    let x0 = ox * px.stride as i64 - px.padding as i64;
                    let mut best = f64::NEG_INFINITY;
                    for y in y0..y0 + py.kernel as i64 {
                        for xx in x0..x0 + px.kernel as i64 {
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                best = best.max(x.data()[(ch * h + y as usize) * w + xx as usize]);
                            }
                        }
                    }
                    flat.push(best);
                }
            }
        }
        assert_eq!(flat.len(), side * side);
        out[ch * side * side..(ch + 1) * side * side].copy_from_slice(&flat);
    }
    Tensor::new([c, side, side], out).unwrap()
}

/// Witnesses `(a, b, c, d)` with all components in `1..=max` found by
/// searching level triples for `x² + y² + z² = w²` directly.
pub fn brute_force_witnesses(max: u64) -> BTreeSet<(u64, u64, u64, u64)> {
    let top = 2 * max;
    let mut out = BTreeSet::new();
    let squares: std::collections::HashMap<u64, u64> = (1..=4 * max + 1).map(|w| (w * w, w)).collect();
    for x in (2..=top).step_by(2) {
        for y in (2..=top).step_by(2) {
            for z in (1..top).step_by(2) {
                if let Some(&w) = squares.get(&(x * x + y * y + z * z)) {
                    if w > z {
                        let (a, b, c, d) = (x / 2, y / 2, z.div_ceil(2), (w - z) / 2);
                        if [a, b, c, d].iter().all(|v| (1..=max).contains(v)) {
                            out.insert((a, b, c, d));
                        }
                    }
                }
            }
        }
    }
    out
}
