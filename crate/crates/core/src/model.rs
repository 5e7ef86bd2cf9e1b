//! A backbone plus the trainable pieces of one tuning method.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Item;
use crate::dma::{init_factor_bank, AttentionKind, BankSpec, FactorBank, ModalityTag, Slot};
use crate::error::{Error, Result};
use crate::former::{forward, Backbone, Block, Classifier, DmaBanks, FormerConfig, FormerOutput, Frozen, Projector};
use crate::ib::{attention_pool, ib_loss, IbConfig, IbTerms};
use crate::lora::{init_lora_set, LoraSet};
use crate::moe::{init_expert_set, ExpertConfig, ExpertForm, ExpertSet};
use crate::params::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Petal,
    Full,
    Head,
    Lora,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Petal, Method::Full, Method::Head, Method::Lora];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Petal => "petal",
            Method::Full => "full",
            Method::Head => "head",
            Method::Lora => "lora",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// Component removals applied on top of the full method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Raw stacked templates instead of the expert mixture.
    #[serde(alias = "V1")]
    V1,
    /// Bottleneck loss weight forced to zero.
    #[serde(alias = "V2")]
    V2,
    /// `V1` and `V2` together.
    #[serde(alias = "V3")]
    V3,
    /// Threshold `Γ` fixed at 1.
    #[serde(alias = "V4")]
    V4,
    /// A trainable random tensor replaces the enhanced instruction.
    RandomInstruction,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::V1,
        Ablation::V2,
        Ablation::V3,
        Ablation::V4,
        Ablation::RandomInstruction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::V1 => "v1",
            Ablation::V2 => "v2",
            Ablation::V3 => "v3",
            Ablation::V4 => "v4",
            Ablation::RandomInstruction => "random_instruction",
        }
    }

    pub fn uses_experts(self) -> bool {
        !matches!(self, Ablation::V1 | Ablation::V3 | Ablation::RandomInstruction)
    }

    pub fn uses_bottleneck(self) -> bool {
        !matches!(self, Ablation::V2 | Ablation::V3)
    }

    pub fn trains_threshold(self) -> bool {
        self != Ablation::V4
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == lower)
            .ok_or_else(|| Error::config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Third-mode extent; `None` means `rank²`.
    pub d_p: Option<usize>,
    pub experts: usize,
    pub middle: usize,
    pub expert_form: ExpertForm,
    pub lora_rank: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            d_p: None,
            experts: 3,
            middle: 4,
            expert_form: ExpertForm::Bottleneck,
            lora_rank: 4,
        }
    }
}

impl AdapterConfig {
    pub fn d_p(&self) -> usize {
        self.d_p.unwrap_or(self.rank * self.rank)
    }
}

/// Self bank: hidden → hidden for both streams. Cross bank: reads vision
/// tokens on the key/value slots, so its input side spans the vision width;
/// query/output slots use the leading `hidden` rows of `U`.
pub fn bank_specs(cfg: &FormerConfig, ad: &AdapterConfig) -> (BankSpec, BankSpec) {
    let self_spec = BankSpec {
        d_p: ad.d_p(),
        ..BankSpec::uniform(
            AttentionKind::SelfAttn,
            cfg.hidden,
            cfg.hidden,
            ad.rank,
            &[ModalityTag::QueryStream, ModalityTag::TextStream],
        )
    };
    let cross_spec = BankSpec {
        kind: AttentionKind::Cross,
        d_in: cfg.vision.max(cfg.hidden),
        d_out: cfg.hidden,
        rank: ad.rank,
        d_p: ad.d_p(),
        modalities: vec![ModalityTag::QueryStream],
        slots: Slot::ALL
            .iter()
            .map(|&s| (s, cfg.slot_in_dim(AttentionKind::Cross, s)))
            .collect(),
    };
    (self_spec, cross_spec)
}

#[derive(Clone, Debug)]
pub struct Banks {
    pub self_bank: FactorBank,
    pub cross_bank: FactorBank,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub method: Method,
    pub ablation: Ablation,
    /// Bucket ids of the stacked templates; `None` marks the question slot.
    pub template_ids: Vec<Option<usize>>,
    pub banks: Option<Banks>,
    pub experts: Option<ExpertSet>,
    pub lora: Option<LoraSet>,
    pub head: Option<(Block, Classifier)>,
    pub random_instruction: Option<Tensor>,
}

pub const RANDOM_INSTRUCTION: &str = "random_instruction";

/// Instruction length fed to the network for a template layout.
pub fn instruction_len(template_ids: &[Option<usize>], has_question: bool) -> usize {
    template_ids.iter().filter(|t| t.is_some() || has_question).count()
}

pub fn build_model(
    backbone: Backbone,
    adapters: &AdapterConfig,
    method: Method,
    ablation: Ablation,
    template_ids: Vec<Option<usize>>,
    has_question: bool,
    seed: u64,
) -> Result<Model> {
    if method != Method::Petal && ablation != Ablation::None {
        return Err(Error::config(format!("ablation {ablation} only applies to the petal method")));
    }
    let cfg = *backbone.config();
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut next = || rand::Rng::random::<u64>(&mut seeds);
    let mut model = Model {
        backbone,
        method,
        ablation,
        template_ids,
        banks: None,
        experts: None,
        lora: None,
        head: None,
        random_instruction: None,
    };
    match method {
        Method::Petal => {
            let (s, c) = bank_specs(&cfg, adapters);
            let mut self_bank = init_factor_bank(&s, next())?;
            let mut cross_bank = init_factor_bank(&c, next())?;
            if !ablation.trains_threshold() {
                self_bank.gamma.set_requires_grad(false);
                cross_bank.gamma.set_requires_grad(false);
            }
            model.banks = Some(Banks { self_bank, cross_bank });
            let expert_seed = next();
            if ablation.uses_experts() {
                model.experts = Some(init_expert_set(
                    &ExpertConfig {
                        form: adapters.expert_form,
                        hidden: cfg.hidden,
                        middle: adapters.middle,
                        experts: adapters.experts,
                    },
                    expert_seed,
                )?);
            }
            if ablation == Ablation::RandomInstruction {
                let t = instruction_len(&model.template_ids, has_question);
                let mut rng = ChaCha8Rng::seed_from_u64(next());
                model.random_instruction =
                    Some(Tensor::randn(&[t, cfg.hidden], crate::former::INIT_STD, &mut rng).trainable());
            }
        }
        Method::Full => {
            model.backbone.visit_mut(&mut |_, t| t.set_requires_grad(true));
        }
        Method::Head => {
            let last = cfg.layers - 1;
            let mut block = model.backbone.blocks[last].renamed(format!("head.layer{last}"));
            let mut cls = model.backbone.classifier.renamed("head.classifier");
            block.visit_mut(&mut |_, t| t.set_requires_grad(true));
            cls.visit_mut(&mut |_, t| t.set_requires_grad(true));
            model.head = Some((block, cls));
        }
        Method::Lora => {
            model.lora = Some(init_lora_set(&cfg, adapters.lora_rank, next())?);
        }
    }
    Ok(model)
}

/// Per-sample network outputs plus the instruction actually fed in.
pub struct SampleOutput {
    pub former: FormerOutput,
    pub gate: Option<Var>,
}

pub struct BatchLoss {
    pub loss: Var,
    pub ce: Var,
    pub ib: Option<IbTerms>,
    pub correct: usize,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

impl Model {
    pub fn config(&self) -> &FormerConfig {
        self.backbone.config()
    }

    /// Instruction tokens for one sample, after the expert mixture if any.
    pub fn instruction(&self, tape: &mut Tape, question: Option<usize>) -> Result<(Var, Option<Var>)> {
        if let Some(r) = &self.random_instruction {
            return Ok((tape.param(RANDOM_INSTRUCTION, r), None));
        }
        let x = self.backbone.embed_instruction(tape, &self.template_ids, question)?;
        match &self.experts {
            Some(e) => {
                let out = e.enhance(tape, x)?;
                Ok((out.tokens, Some(out.gate)))
            }
            None => Ok((x, None)),
        }
    }

    pub fn forward_sample(&self, tape: &mut Tape, vision: &Tensor, question: Option<usize>) -> Result<SampleOutput> {
        let (instr, gate) = self.instruction(tape, question)?;
        let mut view = self.backbone.view();
        if let Some((block, cls)) = &self.head {
            view = view.with_head(block, cls);
        }
        let banks;
        let proj: &dyn Projector = if let Some(b) = &self.banks {
            banks = DmaBanks {
                self_bank: &b.self_bank,
                cross_bank: &b.cross_bank,
            };
            &banks
        } else if let Some(l) = &self.lora {
            l
        } else {
            &Frozen
        };
        let former = forward(tape, &view, proj, vision, instr)?;
        Ok(SampleOutput { former, gate })
    }

    /// Logits as plain numbers.
    pub fn logits(&self, vision: &Tensor, question: Option<usize>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_sample(&mut tape, vision, question)?;
        Ok(tape.value(out.former.logits).clone())
    }

    /// Whether training adds the bottleneck term.
    pub fn bottleneck_active(&self, mu: f64) -> bool {
        self.method == Method::Petal && self.ablation.uses_bottleneck() && mu > 0.0
    }

    /// `mean CE + mu · ib_loss` over a batch. The bottleneck term is skipped
    /// when inactive or when the batch holds a single item.
    pub fn batch_loss(&self, tape: &mut Tape, items: &[&Item], ib: &IbConfig) -> Result<BatchLoss> {
        if items.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let vocab = self.config().vocab;
        let mut logit_rows = Vec::with_capacity(items.len());
        let mut pooled = Vec::with_capacity(items.len());
        let mut correct = 0;
        let use_ib = self.bottleneck_active(ib.mu) && items.len() >= 2;
        for it in items {
            let out = self.forward_sample(tape, &it.vision, it.question)?;
            if argmax(tape.value(out.former.logits).data()) == it.label {
                correct += 1;
            }
            logit_rows.push(tape.reshape(out.former.logits, &[1, vocab])?);
            if use_ib {
                let p = attention_pool(tape, out.former.instruction_rows)?;
                pooled.push(tape.reshape(p.h_hat, &[1, self.config().hidden])?);
            }
        }
        let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
        let logits = tape.concat(&logit_rows)?;
        let lsm = tape.log_softmax(logits)?;
        let picked = tape.pick(lsm, &labels)?;
        let mean = tape.mean(picked);
        let ce = tape.scale(mean, -1.0);
        let mut loss = ce;
        let mut terms = None;
        if use_ib {
            let z = tape.concat(&pooled)?;
            let cls = self.head.as_ref().map_or(&self.backbone.classifier, |(_, c)| c);
            let protos = tape.param(&format!("{}.w", cls.prefix()), &cls.w);
            let t = ib_loss(tape, z, &labels, protos, ib)?;
            let weighted = tape.scale(t.loss, ib.mu);
            loss = tape.add(ce, weighted)?;
            terms = Some(t);
        }
        Ok(BatchLoss {
            loss,
            ce,
            ib: terms,
            correct,
        })
    }
}

impl Parameters for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit(f);
        if let Some(b) = &self.banks {
            b.self_bank.visit(f);
            b.cross_bank.visit(f);
        }
        if let Some(e) = &self.experts {
            e.visit(f);
        }
        if let Some(l) = &self.lora {
            l.visit(f);
        }
        if let Some((b, c)) = &self.head {
            b.visit(f);
            c.visit(f);
        }
        if let Some(r) = &self.random_instruction {
            f(RANDOM_INSTRUCTION, r);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_mut(f);
        if let Some(b) = &mut self.banks {
            b.self_bank.visit_mut(f);
            b.cross_bank.visit_mut(f);
        }
        if let Some(e) = &mut self.experts {
            e.visit_mut(f);
        }
        if let Some(l) = &mut self.lora {
            l.visit_mut(f);
        }
        if let Some((b, c)) = &mut self.head {
            b.visit_mut(f);
            c.visit_mut(f);
        }
        if let Some(r) = &mut self.random_instruction {
            f(RANDOM_INSTRUCTION, r);
        }
    }
}
