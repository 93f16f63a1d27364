//! Binary classification demo: backbone, global average pool, one linear
//! unit, logistic loss; SGD over pairs of variable-size samples.

use std::time::Instant;

use anyhow::{bail, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use scaresnet_core::backbone::{backbone_forward, build_scaresnet, Backbone, BackboneConfig};
use scaresnet_core::init::Init;
use scaresnet_core::optim::{Sgd, SgdConfig};
use scaresnet_core::{Graph, ParamId, Var};

use crate::synth::SyntheticSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Samples whose gradients are averaged per step.
    pub batch: usize,
    /// Fixed balanced subset whose loss is recorded after every step.
    pub monitor: usize,
    pub backbone: BackboneConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            steps: 200,
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            seed: 0,
            batch: 2,
            monitor: 16,
            backbone: BackboneConfig::mini(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub steps: usize,
    pub samples: usize,
    /// Monitor-set loss after each step.
    pub losses: Vec<f64>,
    /// Mean loss of the batch consumed at each step, before its update.
    pub batch_losses: Vec<f64>,
    /// Mean loss over every sample before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub config: DemoConfig,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Equality ignoring the wall-clock field.
    pub fn same_run(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wall_clock_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("loss became non-finite at step {step}")]
pub struct Diverged {
    pub step: usize,
}

/// Backbone plus a single-logit head.
pub struct Classifier {
    pub net: Backbone<f32>,
    pub head: (ParamId, ParamId),
}

impl Classifier {
    pub fn new(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut net = build_scaresnet::<f32>(config, seed)?;
        let c = config.out_channels();
        let mut init = Init::<f32>::new(seed ^ 0x5e_ed0f_4ead);
        init.fan_in("head.weight", &[1, c], c);
        init.zeros("head.bias", &[1]);
        let mut ids = init
            .finish()
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect::<Vec<_>>();
        let bias = ids.pop().unwrap();
        let weight = ids.pop().unwrap();
        let head = (net.params.push(weight.0, weight.1), net.params.push(bias.0, bias.1));
        Ok(Self { net, head })
    }

    fn logit(&self, g: &mut Graph<f32>, x: &SyntheticSample) -> Result<(Var, scaresnet_core::Bound)> {
        let p = self.net.params.bind(g);
        let xv = g.leaf(x.image.clone());
        let feat = backbone_forward(g, &p, &self.net, xv)?;
        let pooled = g.global_avg_pool(feat)?;
        let logit = g.linear(pooled, p[self.head.0], Some(p[self.head.1]))?;
        Ok((logit, p))
    }

    /// Loss and whether the prediction is correct.
    pub fn evaluate(&self, x: &SyntheticSample) -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let (logit, _) = self.logit(&mut g, x)?;
        let z = g.value(logit)[0];
        let loss = g.bce_with_logits(logit, x.label as f64)?;
        Ok((g.value(loss)[0] as f64, (z > 0.0) == (x.label == 1)))
    }

    /// Loss and per-parameter gradients for one sample.
    pub fn gradients(&self, x: &SyntheticSample) -> Result<(f64, Vec<Vec<f32>>)> {
        let mut g = Graph::new();
        let (logit, p) = self.logit(&mut g, x)?;
        let loss = g.bce_with_logits(logit, x.label as f64)?;
        g.backward(loss)?;
        Ok((g.value(loss)[0] as f64, p.grads(&g)))
    }

    /// Mean loss and accuracy.
    pub fn score(&self, data: &[&SyntheticSample]) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut correct = 0usize;
        for x in data {
            let (l, ok) = self.evaluate(x)?;
            loss += l;
            correct += ok as usize;
        }
        Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
    }
}

/// The first `n / 2` samples of each label, in index order.
fn monitor_set(data: &[SyntheticSample], n: usize) -> Vec<&SyntheticSample> {
    let pick = |label| data.iter().filter(move |s| s.label == label).take(n.div_ceil(2));
    let mut out: Vec<_> = pick(1).chain(pick(0)).collect();
    out.truncate(n.max(1));
    out
}

pub fn train_demo(data: &[SyntheticSample], cfg: &DemoConfig) -> Result<TrainReport> {
    Ok(train_model(data, cfg)?.0)
}

/// As [`train_demo`], also returning the trained model.
pub fn train_model(data: &[SyntheticSample], cfg: &DemoConfig) -> Result<(TrainReport, Classifier)> {
    if data.len() < cfg.batch.max(1) {
        bail!(
            "dataset holds {} samples, fewer than one batch of {}",
            data.len(),
            cfg.batch
        );
    }
    let start = Instant::now();
    let mut model = Classifier::new(&cfg.backbone, cfg.seed)?;
    let sgd = SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = Sgd::new(sgd, &model.net.params);

    let all: Vec<&SyntheticSample> = data.iter().collect();
    let monitor = monitor_set(data, cfg.monitor);
    let (initial_loss, initial_accuracy) = model.score(&all)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut batch_losses = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch.max(1);
    for step in 0..cfg.steps {
        if order.len() < batch {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
        }
        let mut acc: Option<Vec<Vec<f32>>> = None;
        let mut batch_loss = 0.0;
        for i in order.split_off(order.len() - batch) {
            let (l, grads) = model.gradients(&data[i])?;
            batch_loss += l;
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => a
                    .iter_mut()
                    .flatten()
                    .zip(grads.iter().flatten())
                    .for_each(|(a, g)| *a += *g),
            }
        }
        let mut grads = acc.unwrap();
        let inv = 1.0 / batch as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        batch_loss /= batch as f64;
        if !batch_loss.is_finite() {
            return Err(Diverged { step }.into());
        }
        opt.step(&mut model.net.params, &grads);
        let (monitored, _) = model.score(&monitor)?;
        if !monitored.is_finite() {
            return Err(Diverged { step }.into());
        }
        batch_losses.push(batch_loss);
        losses.push(monitored);
    }

    let (final_loss, final_accuracy) = model.score(&all)?;
    let report = TrainReport {
        seed: cfg.seed,
        steps: cfg.steps,
        samples: data.len(),
        losses,
        batch_losses,
        initial_loss,
        final_loss,
        initial_accuracy,
        final_accuracy,
        config: cfg.clone(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((report, model))
}
