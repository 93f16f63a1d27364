//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p scaresnet --test acceptance` (a release build is
//! not required; the test profile is optimised).

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scaresnet::synth::{generate, SynthConfig};
use scaresnet::train::{train_demo, DemoConfig};
use scaresnet_core::attention::{attention_maps, mhcca_forward, MhccaConfig, MhccaWeights};
use scaresnet_core::backbone::{backbone_forward, build_scaresnet, count_params_flops, BackboneConfig, Preset};
use scaresnet_core::gradcheck::{check_module, ModuleTag};
use scaresnet_core::init::Init;
use scaresnet_core::sppr_math::{enumerate_level_solutions, pooled_output_size, pooling_params, Interpretation};
use scaresnet_core::spprcsp::{dseconv_param_count, plain_conv_param_count, sppr_forward, SpprConfig};
use scaresnet_core::{Graph, Tensor};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn level_equations() -> Outcome {
    let sols = enumerate_level_solutions(20);
    ensure(sols.iter().any(|q| (q.x, q.y, q.z, q.w) == (9, 6, 2, 11)), || {
        "(9,6,2,11) missing".into()
    })?;
    for q in &sols {
        ensure(q.x * q.x + q.y * q.y + q.z * q.z == q.w * q.w, || {
            format!("{q} violates the equation")
        })?;
    }
    let got: BTreeSet<_> = sols.iter().map(|q| (q.a, q.b, q.c, q.d)).collect();
    ensure(got.len() == sols.len(), || "duplicate witnesses".into())?;
    ensure(got == common::brute_force_witnesses(20), || {
        "differs from brute force".into()
    })?;
    Ok(format!("{} solutions, brute force agrees", sols.len()))
}

fn pooling_sweep() -> Outcome {
    let mut cases = 0usize;
    for interp in [Interpretation::Literal, Interpretation::Swapped] {
        for l in [2u64, 6, 9] {
            for h in l..=4096 {
                let p = pooling_params(h, l, interp).map_err(|e| format!("h={h} l={l}: {e}"))?;
                let out = pooled_output_size(h, p.kernel, p.stride, p.padding);
                ensure(out == Ok(l), || format!("h={h} l={l} {interp:?}: output {out:?}"))?;
                ensure(2 * p.padding <= p.kernel, || {
                    format!("h={h} l={l} {interp:?}: padding {}", p.padding)
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases, 0 failures"))
}

fn sppr_oracle() -> Outcome {
    let mut non_square = 0;
    for interpretation in [Interpretation::Literal, Interpretation::Swapped] {
        let cfg = SpprConfig {
            interpretation,
            ..Default::default()
        };
        for seed in 0..25u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let c = rng.gen_range(1..=4);
            let h = rng.gen_range(9..=90);
            let w = if seed % 4 == 0 { h } else { rng.gen_range(9..=90) };
            non_square += usize::from(h != w);
            let x = Tensor::from_fn([c, h, w], |_| rng.gen_range(-5.0..5.0));
            let mut g = Graph::new();
            let v = g.leaf(x.clone());
            let y = sppr_forward(&mut g, v, &cfg).map_err(|e| e.to_string())?;
            let want = common::sppr_loops(&x, &cfg.levels, interpretation);
            let same = g.shape(y) == want.shape()
                && g.value(y)
                    .iter()
                    .zip(want.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("seed {seed} {c}x{h}x{w} {interpretation:?}"))?;
        }
    }
    Ok(format!("25 inputs x 2 readings bit-exact ({non_square} non-square)"))
}

fn gradient_suite() -> Outcome {
    let mut summary = Vec::new();
    for tag in ModuleTag::ALL {
        let mut worst = 0.0f64;
        let mut skipped = 0;
        for seed in 0..20 {
            let r = check_module(tag, seed).map_err(|e| format!("{tag} seed {seed}: {e}"))?;
            ensure(r.passed, || {
                format!("{tag} seed {seed}: {:.3e} > {:.0e}", r.max_rel_err, r.threshold)
            })?;
            worst = worst.max(r.max_rel_err);
            skipped += r.skipped_at_kinks;
        }
        summary.push(format!("{tag} {worst:.1e}/{:.0e} ({skipped} kinks)", tag.threshold()));
    }
    Ok(format!("20 seeds each: {}", summary.join(", ")))
}

fn size_unification() -> Outcome {
    let cfg = BackboneConfig::mini();
    let net = build_scaresnet::<f32>(&cfg, 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut shapes = BTreeSet::new();
    let mut sizes = BTreeSet::new();
    for _ in 0..30 {
        let (h, w) = (8 * rng.gen_range(9..=24), 8 * rng.gen_range(9..=24));
        sizes.insert((h, w));
        let mut g = Graph::new();
        let p = net.params.bind(&mut g);
        let x = g.leaf(Tensor::from_fn([3, h, w], |_| rng.gen_range(0.0..1.0)));
        let y = backbone_forward(&mut g, &p, &net, x).map_err(|e| format!("{h}x{w}: {e}"))?;
        shapes.insert(g.shape(y).to_vec());
    }
    let want = vec![cfg.out_channels(), 11, 11];
    ensure(shapes.len() == 1 && shapes.contains(&want), || {
        format!("shapes {shapes:?}")
    })?;
    Ok(format!("{} distinct sizes -> {want:?}", sizes.len()))
}

fn attention_properties() -> Outcome {
    let cfg = MhccaConfig::new(16);
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut init = Init::new(seed);
        let w = MhccaWeights::build(&mut init, "cca", &cfg).map_err(|e| e.to_string())?;
        let store = init.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, wd) = (6 + seed as usize, 13 - seed as usize);
        let x = Tensor::<f64>::from_fn([16, h, wd], |_| rng.gen_range(-3.0..3.0));
        for map in attention_maps(&store, &w, &cfg, &x).map_err(|e| e.to_string())? {
            for row in map.data().chunks(h + wd - 1) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("row sum off by {worst:.2e}"))?;

    let (h, w) = (7, 9);
    let reach = |recurrence: usize, uniform: bool, (py, px): (usize, usize)| -> Result<Vec<bool>, String> {
        let cfg = MhccaConfig {
            heads: 1,
            qk_channels_per_head: 1,
            recurrence,
            positional_encoding: false,
            residual_scale_init: 1.0,
            ..MhccaConfig::new(1)
        };
        let mut init = Init::new(3);
        let weights = MhccaWeights::build(&mut init, "cca", &cfg).map_err(|e| e.to_string())?;
        let mut store = init.finish();
        if uniform {
            weights.set_uniform_identity(&mut store, 1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Tensor::<f64>::from_fn([1, h, w], |_| rng.gen_range(-1.0..1.0));
        let mut bumped = base.clone();
        bumped.data_mut()[py * w + px] += 1.0;
        let run = |x: &Tensor<f64>| -> Result<Vec<f64>, String> {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let xv = g.leaf(x.clone());
            let y = mhcca_forward(&mut g, &p, &weights, &cfg, xv).map_err(|e| e.to_string())?;
            Ok(g.value(y).to_vec())
        };
        let (a, b) = (run(&base)?, run(&bumped)?);
        Ok(a.iter().zip(&b).map(|(u, v)| u != v).collect())
    };
    for uniform in [true, false] {
        for src in [(0, 0), (3, 4), (6, 8)] {
            let one = reach(1, uniform, src)?;
            for (i, moved) in one.iter().enumerate() {
                let on_cross = i / w == src.0 || i % w == src.1;
                ensure(*moved == on_cross, || {
                    format!("R=1 from {src:?}: position {i} moved={moved}")
                })?;
            }
            ensure(reach(2, uniform, src)?.iter().all(|m| *m), || {
                format!("R=2 from {src:?} misses positions")
            })?;
        }
    }
    Ok(format!("row sums within {worst:.1e}; R=1 cross only, R=2 everywhere"))
}

fn parameter_economy() -> Outcome {
    let (dse, plain) = (dseconv_param_count(64, 128, 3), plain_conv_param_count(64, 128, 3));
    ensure((dse, plain) == (8768, 73728), || {
        format!("64->128 k=3: {dse} vs {plain}")
    })?;
    let mut parts = vec![format!("64->128 k3 {dse}/{plain}")];
    for preset in [Preset::Mini, Preset::Scaresnet50] {
        let cfg = preset.config();
        let n = cfg.min_input();
        let report = count_params_flops(&cfg, n, n, true).map_err(|e| e.to_string())?;
        let p = report.plain.ok_or("no plain comparison")?;
        ensure(p.dse_param_ratio < 1.0 && p.param_ratio < 1.0, || {
            format!("{preset:?}: ratios {} / {}", p.dse_param_ratio, p.param_ratio)
        })?;
        parts.push(format!("{preset:?} {:.3}", p.dse_param_ratio));
    }
    Ok(parts.join(", "))
}

fn end_to_end_demo() -> Outcome {
    let data = generate(&SynthConfig::default());
    let sizes: BTreeSet<_> = data.iter().map(|s| (s.image.shape()[1], s.image.shape()[2])).collect();
    ensure(sizes.len() > 1, || "inputs do not vary in size".into())?;
    let r = train_demo(&data, &DemoConfig::default()).map_err(|e| e.to_string())?;
    let detail = format!(
        "loss {:.4} -> {:.4} (ratio {:.3}), accuracy {:.3}, {} input sizes",
        r.initial_loss,
        r.final_loss,
        r.final_loss / r.initial_loss,
        r.final_accuracy,
        sizes.len()
    );
    ensure(r.final_loss <= 0.5 * r.initial_loss && r.final_accuracy >= 0.9, || {
        detail.clone()
    })?;
    Ok(detail)
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("level-equations", Duration::from_secs(1), level_equations),
        ("pooling-sweep", Duration::from_secs(5), pooling_sweep),
        ("sppr-oracle", Duration::from_secs(10), sppr_oracle),
        ("gradient-suite", Duration::from_secs(300), gradient_suite),
        ("size-unification", Duration::from_secs(60), size_unification),
        ("attention-properties", Duration::from_secs(30), attention_properties),
        ("parameter-economy", Duration::from_secs(1), parameter_economy),
        ("end-to-end-demo", Duration::from_secs(600), end_to_end_demo),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > budget => Err(format!("{detail}; over budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {name} [{:.2}s] {detail}", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} [{:.2}s] {why}", took.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
