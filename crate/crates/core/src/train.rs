//! Training loop, evaluation, expert-count sweeps and run outputs.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::method_trainable_count;
use crate::config::RunConfig;
use crate::data::{gen_dataset, shuffled, Dataset, Item};
use crate::error::{Error, Result};
use crate::former::build_frozen_backbone;
use crate::ib::IbConfig;
use crate::model::{build_model, instruction_len, Ablation, Method, Model};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, Schedule};
use crate::params::Parameters;
use crate::tape::Tape;

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub method: Method,
    pub ablation: Ablation,
    pub mu: f64,
    pub eta: f64,
    pub temperature: f64,
    pub bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let ib = IbConfig::default();
        let adam = AdamWConfig::default();
        Self {
            epochs: 5,
            batch: 32,
            lr_start: 1e-4,
            lr_peak: 1e-2,
            warmup_steps: 10,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            clip_norm: 1.0,
            seed: 7,
            method: Method::Petal,
            ablation: Ablation::None,
            mu: ib.mu,
            eta: ib.eta,
            temperature: ib.temperature,
            bins: ib.bins,
        }
    }
}

impl TrainConfig {
    /// Warmup 1e-6 → 2e-5 over 1000 steps, as used for the full-scale model.
    pub fn paper_recipe() -> Self {
        Self {
            lr_start: 1e-6,
            lr_peak: 2e-5,
            warmup_steps: 1000,
            ..Self::default()
        }
    }

    pub fn ib(&self) -> IbConfig {
        IbConfig {
            eta: self.eta,
            mu: if self.ablation.uses_bottleneck() { self.mu } else { 0.0 },
            temperature: self.temperature,
            bins: self.bins,
            ..IbConfig::default()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.method != Method::Petal && self.ablation != Ablation::None {
            return Err(Error::config(format!(
                "ablation {} only applies to the petal method",
                self.ablation
            )));
        }
        self.ib().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train: SplitMetrics,
    pub val: SplitMetrics,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub seed: u64,
    pub method: Method,
    pub ablation: Ablation,
    pub trainable_params: usize,
    pub train_items: usize,
    pub steps: u64,
    /// Epoch 0 is the evaluation before any update.
    pub epochs: Vec<EpochMetrics>,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
    pub ib_evaluations: usize,
    pub wall_time: Duration,
    pub config_echo: String,
}

impl RunReport {
    pub fn initial(&self) -> &EpochMetrics {
        &self.epochs[0]
    }

    pub fn last(&self) -> &EpochMetrics {
        self.epochs.last().expect("epoch 0 is always present")
    }

    pub fn final_val_accuracy(&self) -> f64 {
        self.last().val.accuracy
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for e in &self.epochs {
            for (split, m) in [("train", e.train), ("val", e.val)] {
                writeln!(out, "{},{split},{:.12},{:.6}", e.epoch, m.loss, m.accuracy).expect("string write");
            }
        }
        out
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub model: Model,
}

/// Mean cross-entropy and accuracy over `items`, one item per forward.
pub fn evaluate(model: &Model, items: &[Item]) -> Result<SplitMetrics> {
    if items.is_empty() {
        return Err(Error::contract("evaluation on an empty split"));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for it in items {
        let logits = model.logits(&it.vision, it.question)?;
        let v = logits.data();
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - v[it.label];
        let pred = v
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
            .0;
        correct += usize::from(pred == it.label);
    }
    let n = items.len() as f64;
    Ok(SplitMetrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Builds the backbone, templates, model and dataset described by `cfg`.
pub fn prepare(cfg: &RunConfig) -> Result<(Model, Dataset)> {
    cfg.validate()?;
    let former = cfg.model.former();
    let backbone = build_frozen_backbone(&former, cfg.model.backbone_seed)?;
    let templates = cfg.templates()?;
    let ids = templates.token_ids(former.word_buckets);
    let has_question = cfg.task.kind == crate::instructions::TaskKind::VqaLike;
    let model = build_model(
        backbone,
        &cfg.model.adapters(),
        cfg.train.method,
        cfg.train.ablation,
        ids,
        has_question,
        cfg.train.seed,
    )?;
    let data = gen_dataset(&cfg.task, &former)?;
    Ok((model, data))
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (mut model, data) = prepare(cfg)?;
    let report = train_model(&mut model, &data, cfg)?;
    Ok(TrainOutcome { report, model })
}

/// Runs the optimizer over `data` for `cfg.train.epochs` epochs.
pub fn train_model(model: &mut Model, data: &Dataset, cfg: &RunConfig) -> Result<RunReport> {
    let tc = &cfg.train;
    tc.validate()?;
    let started = Instant::now();
    let ib = tc.ib();
    let has_question = data.train.first().is_some_and(|it| it.question.is_some());
    let expected = method_trainable_count(
        model.config(),
        &cfg.model.adapters(),
        model.method,
        model.ablation,
        instruction_len(&model.template_ids, has_question),
    );
    let trainable = model.trainable_count();
    if trainable != expected {
        return Err(Error::Invariant(format!(
            "trainable count {trainable} differs from closed form {expected}"
        )));
    }
    let hash_before = model.backbone.hash();
    let steps_per_epoch = tc.steps_per_epoch(data.train.len());
    let total = steps_per_epoch * tc.epochs;
    let schedule = Schedule::new(tc.lr_start, tc.lr_peak, tc.warmup_steps.min(total), total)?;
    let mut opt = AdamW::new(tc.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x0b5e_55ed);

    let mut epochs = vec![EpochMetrics {
        epoch: 0,
        train: evaluate(model, &data.train)?,
        val: evaluate(model, &data.val)?,
    }];
    let mut ib_evaluations = 0;
    let mut step = 0usize;
    for epoch in 1..=tc.epochs {
        let order = shuffled(data.train.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(tc.batch) {
            let items: Vec<&Item> = chunk.iter().map(|&i| &data.train[i]).collect();
            let mut tape = Tape::new();
            let out = model.batch_loss(&mut tape, &items, &ib)?;
            if out.ib.is_some() {
                ib_evaluations += 1;
            }
            let ce = tape.value(out.ce).item();
            if !ce.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            loss_sum += ce * items.len() as f64;
            correct += out.correct;
            tape.backward(out.loss)?;
            model.zero_grads();
            model.accumulate_grads(&tape)?;
            clip_grad_norm(model, tc.clip_norm);
            opt.step(model, schedule.lr(step));
            step += 1;
        }
        model.zero_grads();
        let n = data.train.len() as f64;
        epochs.push(EpochMetrics {
            epoch,
            train: SplitMetrics {
                loss: loss_sum / n,
                accuracy: correct as f64 / n,
            },
            val: evaluate(model, &data.val)?,
        });
    }

    let hash_after = model.backbone.hash();
    if model.method != Method::Full && hash_after != hash_before {
        return Err(Error::Invariant(format!(
            "frozen backbone changed during {} training",
            model.method
        )));
    }
    Ok(RunReport {
        seed: tc.seed,
        method: model.method,
        ablation: model.ablation,
        trainable_params: trainable,
        train_items: data.train.len(),
        steps: opt.steps(),
        epochs,
        backbone_hash_before: hash_before,
        backbone_hash_after: hash_after,
        ib_evaluations,
        wall_time: started.elapsed(),
        config_echo: cfg.to_toml()?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub experts: usize,
    pub accuracy: f64,
    pub loss: f64,
}

/// One training run per expert count; the final validation row of each.
pub fn sweep_experts(cfg: &RunConfig, ks: &[usize]) -> Result<Vec<SweepRow>> {
    ks.iter()
        .map(|&k| {
            if k == 0 {
                return Err(Error::config("expert count must be at least 1"));
            }
            let mut c = cfg.clone();
            c.model.experts = k;
            let out = train(&c)?;
            let last = out.report.last().val;
            Ok(SweepRow {
                experts: k,
                accuracy: last.accuracy,
                loss: last.loss,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("K,accuracy,loss\n");
    for r in rows {
        writeln!(out, "{},{:.6},{:.12}", r.experts, r.accuracy, r.loss).expect("string write");
    }
    out
}
