//! Finite-difference checks of every module's analytic gradients, in double
//! precision, against the loss `sum(out ⊙ R)` for a fixed random `R`.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{mhcca_forward, MhccaConfig, MhccaWeights};
use crate::autodiff::{Graph, Var};
use crate::backbone::{backbone_forward, build_scaresnet, BackboneConfig};
use crate::fd::{rel_err, DEFAULT_EPS};
use crate::init::Init;
use crate::params::{Bound, ParamStore};
use crate::spprcsp::{
    dseconv_forward, se_forward, sppr_forward, spprcsp_forward, DseConvConfig, DseConvWeights, SeWeights, SpprConfig,
    SpprcspConfig, SpprcspOptions, SpprcspWeights,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleTag {
    Cca,
    Sppr,
    Se,
    Dseconv,
    Spprcsp,
    BackboneMini,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 6] = [
        ModuleTag::Cca,
        ModuleTag::Sppr,
        ModuleTag::Se,
        ModuleTag::Dseconv,
        ModuleTag::Spprcsp,
        ModuleTag::BackboneMini,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleTag::Cca => "cca",
            ModuleTag::Sppr => "sppr",
            ModuleTag::Se => "se",
            ModuleTag::Dseconv => "dseconv",
            ModuleTag::Spprcsp => "spprcsp",
            ModuleTag::BackboneMini => "backbone-mini",
        }
    }

    /// Central-difference step. SPPRCSP input gradients reach 1e-8 (they
    /// flow only through the SE spatial mean), so a smaller step is lost in
    /// rounding noise.
    pub fn step(self) -> f64 {
        match self {
            ModuleTag::Spprcsp => 1e-4,
            _ => DEFAULT_EPS,
        }
    }

    pub fn threshold(self) -> f64 {
        match self {
            ModuleTag::BackboneMini => 1e-3,
            _ => 1e-4,
        }
    }
}

impl fmt::Display for ModuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModuleTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Attr {
                op: "grad-check",
                reason: alloc::format!("unknown module {s:?}"),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub module: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub threshold: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Probes discarded because they straddled a relu or max-pool kink.
    pub skipped_at_kinks: usize,
    pub passed: bool,
    /// Entry with the largest relative error.
    pub worst: Option<WorstEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Replacement candidates per sampled probe.
const CANDIDATES: usize = 8;

type Forward = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Tensors under test (input first, then parameters), the function of them
/// and which entries to probe: each group contributes its first kink-free
/// candidate (`None` probes every entry once).
struct Problem {
    names: Vec<String>,
    tensors: Vec<Tensor<f64>>,
    forward: Forward,
    groups: Option<Vec<Vec<(usize, usize)>>>,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn split(store: &ParamStore<f64>, x: Tensor<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    let mut names = alloc::vec!["input".to_string()];
    let mut tensors = alloc::vec![x];
    for (n, t) in store.iter() {
        names.push(n.to_string());
        tensors.push(t.clone());
    }
    (names, tensors)
}

fn bound(vars: &[Var]) -> Bound {
    Bound::from_vars(vars[1..].to_vec())
}

fn problem(tag: ModuleTag, rng: &mut ChaCha8Rng, seed: u64) -> Result<Problem> {
    Ok(match tag {
        ModuleTag::Cca => {
            let cfg = MhccaConfig {
                heads: 2,
                qk_channels_per_head: 2,
                ..MhccaConfig::new(8)
            };
            let mut init = Init::new(seed);
            let w = MhccaWeights::build(&mut init, "cca", &cfg)?;
            let mut store = init.finish();
            store.get_mut(w.gamma).data_mut()[0] = 0.5;
            let x = random(rng, &[8, 5, 6]);
            let (names, tensors) = split(&store, x);
            Problem {
                names,
                tensors,
                forward: Box::new(move |g, v| mhcca_forward(g, &bound(v), &w, &cfg, v[0])),
                groups: None,
            }
        }
        ModuleTag::Sppr => Problem {
            names: alloc::vec!["input".to_string()],
            tensors: alloc::vec![random(rng, &[2, 13, 17])],
            forward: Box::new(|g, v| sppr_forward(g, v[0], &SpprConfig::default())),
            groups: None,
        },
        ModuleTag::Se => {
            let mut init = Init::new(seed);
            let w = SeWeights::build(&mut init, "se", 3, 2);
            let x = random(rng, &[3, 4, 4]);
            let (names, tensors) = split(&init.finish(), x);
            Problem {
                names,
                tensors,
                forward: Box::new(move |g, v| se_forward(g, &bound(v), &w, v[0])),
                groups: None,
            }
        }
        ModuleTag::Dseconv => {
            let mut init = Init::new(seed);
            let w = DseConvWeights::build(&mut init, "dse", DseConvConfig::same(3, 4, 3, 2));
            let x = random(rng, &[3, 5, 5]);
            let (names, tensors) = split(&init.finish(), x);
            Problem {
                names,
                tensors,
                forward: Box::new(move |g, v| dseconv_forward(g, &bound(v), &w, v[0])),
                groups: None,
            }
        }
        ModuleTag::Spprcsp => {
            let cfg = SpprcspConfig::new(
                8,
                SpprcspOptions {
                    c_out: Some(8),
                    se_ratio: 2,
                    ..Default::default()
                },
            );
            let mut init = Init::new(seed);
            let w = SpprcspWeights::build(&mut init, "spprcsp", &cfg)?;
            let x = random(rng, &[8, 16, 18]);
            let (names, tensors) = split(&init.finish(), x);
            Problem {
                names,
                tensors,
                forward: Box::new(move |g, v| spprcsp_forward(g, &bound(v), &w, &cfg, v[0])),
                groups: None,
            }
        }
        ModuleTag::BackboneMini => {
            let mut net = build_scaresnet::<f64>(&BackboneConfig::mini(), seed)?;
            for site in &net.weights.cca {
                net.params.get_mut(site.weights.gamma).data_mut()[0] = 0.5;
            }
            let x = random(rng, &[3, 72, 80]);
            // Thirty input entries plus one entry of every parameter tensor.
            let mut groups: Vec<Vec<(usize, usize)>> = sample(rng, x.len(), 30 * CANDIDATES)
                .into_vec()
                .chunks(CANDIDATES)
                .map(|c| c.iter().map(|&i| (0, i)).collect())
                .collect();
            for (k, (_, t)) in net.params.iter().enumerate() {
                groups.push((0..CANDIDATES).map(|_| (k + 1, rng.gen_range(0..t.len()))).collect());
            }
            let (names, tensors) = split(&net.params, x);
            Problem {
                names,
                tensors,
                forward: Box::new(move |g, v| backbone_forward(g, &bound(v), &net, v[0])),
                groups: Some(groups),
            }
        }
    })
}

fn evaluate(p: &Problem, tensors: &[Tensor<f64>], proj: &Tensor<f64>) -> Result<(Graph<f64>, Vec<Var>, Var, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (p.forward)(&mut g, &vars)?;
    let r = g.leaf(proj.clone());
    let prod = g.mul(out, r)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, out, loss))
}

/// Compare analytic and central-difference gradients for one module.
pub fn check_module(tag: ModuleTag, seed: u64) -> Result<GradCheckReport> {
    check_module_with_step(tag, seed, tag.step())
}

/// [`check_module`] with an explicit central-difference step.
///
/// A probe whose `±eps` evaluations take a different relu or max-pool branch
/// than the unperturbed point straddles a kink, where the difference quotient
/// does not estimate the derivative; it is skipped and, in sampled mode,
/// replaced by the next candidate of its group.
pub fn check_module_with_step(tag: ModuleTag, seed: u64, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::BadStep);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = problem(tag, &mut rng, seed)?;

    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = p.tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = (p.forward)(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let proj = random(&mut rng, &shape);

    let (mut g, vars, _, loss) = evaluate(&p, &p.tensors, &proj)?;
    let base = g.branch_signature();
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map_or_else(|| alloc::vec![0.0; g.tensor(v).len()], <[f64]>::to_vec)
        })
        .collect();

    let groups = p.groups.clone().unwrap_or_else(|| {
        p.tensors
            .iter()
            .enumerate()
            .flat_map(|(k, t)| (0..t.len()).map(move |i| alloc::vec![(k, i)]))
            .collect()
    });

    let mut work = p.tensors.clone();
    // Outputs rather than the summed loss are differenced: the projection is
    // applied to `out(+eps) - out(-eps)`, which avoids cancelling two large
    // nearly equal sums.
    let mut probe = |k: usize, i: usize, delta: f64| -> Result<(Vec<f64>, u64)> {
        let orig = p.tensors[k].data()[i];
        work[k].data_mut()[i] = orig + delta;
        let r = evaluate(&p, &work, &proj);
        work[k].data_mut()[i] = orig;
        let (g, _, out, loss) = r?;
        if !g.value(loss)[0].is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        Ok((g.value(out).to_vec(), g.branch_signature()))
    };

    let mut report = GradCheckReport {
        module: tag.as_str().to_string(),
        seed,
        max_rel_err: 0.0,
        threshold: tag.threshold(),
        checked: 0,
        skipped_at_kinks: 0,
        passed: false,
        worst: None,
    };
    for group in &groups {
        for &(k, i) in group {
            let (up, s_up) = probe(k, i, eps)?;
            let (down, s_down) = probe(k, i, -eps)?;
            if s_up != base || s_down != base {
                report.skipped_at_kinks += 1;
                continue;
            }
            let diff: f64 = up
                .iter()
                .zip(&down)
                .zip(proj.data())
                .map(|((u, d), r)| (u - d) * r)
                .sum();
            let numeric = diff / (2.0 * eps);
            let e = rel_err(analytic[k][i], numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some(WorstEntry {
                    tensor: p.names[k].clone(),
                    index: i,
                    analytic: analytic[k][i],
                    numeric,
                });
            }
            break;
        }
    }
    report.passed = report.checked > 0 && report.max_rel_err <= report.threshold;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_modules_pass() {
        for tag in [ModuleTag::Cca, ModuleTag::Sppr, ModuleTag::Se, ModuleTag::Dseconv] {
            let r = check_module(tag, 1).unwrap();
            assert!(r.passed, "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn tags_round_trip() {
        for tag in ModuleTag::ALL {
            assert_eq!(tag.as_str().parse::<ModuleTag>().unwrap(), tag);
        }
        assert!("resnet".parse::<ModuleTag>().is_err());
    }
}
