//! Closed-form trainable-parameter accounting.
//!
//! The paper-mode subtotal counts the shared factors of both banks and the
//! expert weights:
//! `(H_v·R + H_t·R + R·d_p) + (2·H_t·R + R·d_p) + H_t·M·2·K`.
//! Coefficient vectors, thresholds and the gate are trainable too and are
//! itemized separately.

use std::fmt::Write as _;

use crate::former::{backbone_param_count, block_param_count, classifier_param_count, FormerConfig};
use crate::lora::lora_param_count;
use crate::model::{Ablation, AdapterConfig, Method};
use crate::moe::ExpertForm;

pub const BACKBONE_REFERENCE: u64 = 188_000_000;
pub const PAPER_LAYERS: u64 = 12;
pub const PAPER_LORA_RANK: u64 = 64;
/// Adapted matrices per layer assumed for the low-rank comparison row.
pub const LORA_MATRICES_PER_LAYER: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BudgetDims {
    pub h_v: u64,
    pub h_t: u64,
    pub rank: u64,
    pub middle: u64,
    pub experts: u64,
    pub d_p: u64,
    pub self_modalities: u64,
    pub cross_modalities: u64,
    pub slots: u64,
}

impl BudgetDims {
    /// `H_v = 1408, H_t = 768, R = 64, M = 64, K = 3`, `d_p = R²`.
    pub fn paper() -> Self {
        Self::new(1408, 768, 64, 64, 3)
    }

    pub fn new(h_v: u64, h_t: u64, rank: u64, middle: u64, experts: u64) -> Self {
        Self {
            h_v,
            h_t,
            rank,
            middle,
            experts,
            d_p: rank * rank,
            self_modalities: 2,
            cross_modalities: 1,
            slots: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BudgetLine {
    pub name: String,
    pub count: u64,
    /// Part of the paper-mode subtotal.
    pub paper_mode: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetReport {
    pub lines: Vec<BudgetLine>,
    pub paper_mode_subtotal: u64,
    pub full_itemized_total: u64,
    pub backbone_reference: u64,
    pub ratio: f64,
    pub warnings: Vec<String>,
}

impl BudgetReport {
    pub fn line(&self, name: &str) -> Option<u64> {
        self.lines.iter().find(|l| l.name == name).map(|l| l.count)
    }

    /// Cross bank plus self bank factors.
    pub fn former_part(&self) -> u64 {
        self.lines
            .iter()
            .filter(|l| l.paper_mode && !l.name.starts_with("experts"))
            .map(|l| l.count)
            .sum()
    }

    pub fn expert_part(&self) -> u64 {
        self.line("experts").unwrap_or(0)
    }

    pub fn to_text(&self) -> String {
        let width = self.lines.iter().map(|l| l.name.len()).max().unwrap_or(0).max(24);
        let mut out = String::new();
        for l in &self.lines {
            let tag = if l.paper_mode { "" } else { "  (itemized only)" };
            writeln!(out, "{:<width$} {:>14}{tag}", l.name, group_thousands(l.count)).expect("string write");
        }
        writeln!(out, "{:<width$} {:>14}", "query-former part", group_thousands(self.former_part())).expect("string write");
        writeln!(out, "{:<width$} {:>14}", "expert part", group_thousands(self.expert_part())).expect("string write");
        writeln!(out, "{:<width$} {:>14}", "subtotal", group_thousands(self.paper_mode_subtotal)).expect("string write");
        writeln!(out, "{:<width$} {:>14}", "itemized total", group_thousands(self.full_itemized_total)).expect("string write");
        writeln!(out, "{:<width$} {:>14}", "backbone reference", group_thousands(self.backbone_reference)).expect("string write");
        writeln!(out, "{:<width$} {:>13.4}%", "ratio", 100.0 * self.ratio).expect("string write");
        for w in &self.warnings {
            writeln!(out, "warning: {w}").expect("string write");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,count,paper_mode\n");
        for l in &self.lines {
            writeln!(out, "{},{},{}", l.name, l.count, l.paper_mode).expect("string write");
        }
        writeln!(out, "subtotal,{},true", self.paper_mode_subtotal).expect("string write");
        writeln!(out, "itemized_total,{},false", self.full_itemized_total).expect("string write");
        out
    }
}

pub fn group_thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn petal_budget(d: &BudgetDims) -> BudgetReport {
    petal_budget_with(d, ExpertForm::Bottleneck)
}

pub fn petal_budget_with(d: &BudgetDims, form: ExpertForm) -> BudgetReport {
    let r = d.rank;
    let line = |name: &str, count: u64, paper_mode: bool| BudgetLine {
        name: name.to_string(),
        count,
        paper_mode,
    };
    let experts = match form {
        ExpertForm::Bottleneck => d.h_t * d.middle * 2 * d.experts,
        ExpertForm::Affine => 2 * d.h_t * d.experts,
    };
    let lines = vec![
        line("cross.U", d.h_v.max(d.h_t) * r, true),
        line("cross.V", d.h_t * r, true),
        line("cross.P", d.d_p * r, true),
        line("self.U", d.h_t * r, true),
        line("self.V", d.h_t * r, true),
        line("self.P", d.d_p * r, true),
        line("experts", experts, true),
        line("cross.lambda", d.cross_modalities * r, false),
        line("self.lambda", d.self_modalities * r, false),
        line("cross.gamma", 1, false),
        line("self.gamma", 1, false),
        line("gate", 2 * d.h_t + 1, false),
        line("classifier head (frozen)", 0, false),
    ];
    let paper_mode_subtotal = lines.iter().filter(|l| l.paper_mode).map(|l| l.count).sum();
    let full_itemized_total = lines.iter().map(|l| l.count).sum();
    let mut warnings = Vec::new();
    if d.d_p != r * r {
        warnings.push(format!(
            "d_p = {} differs from R² = {}; the subtotal will not match the appendix formula",
            d.d_p,
            r * r
        ));
    }
    if d.slots > d.d_p {
        warnings.push(format!("{} slots cannot have orthonormal selectors in d_p = {}", d.slots, d.d_p));
    }
    if form == ExpertForm::Affine {
        warnings.push("affine experts: expert part is 2·H_t·K, not H_t·M·2·K".into());
    }
    BudgetReport {
        lines,
        paper_mode_subtotal,
        full_itemized_total,
        backbone_reference: BACKBONE_REFERENCE,
        ratio: paper_mode_subtotal as f64 / BACKBONE_REFERENCE as f64,
        warnings,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComparisonRow {
    pub method: &'static str,
    pub count: u64,
    pub note: String,
}

/// Trainable-parameter rows per method at the given dims.
pub fn compare_budgets(d: &BudgetDims) -> Vec<ComparisonRow> {
    let lora = PAPER_LAYERS * LORA_MATRICES_PER_LAYER * PAPER_LORA_RANK * (d.h_t + d.h_t);
    let head = block_param_count(d.h_t as usize, d.h_v as usize, 4) as u64;
    vec![
        ComparisonRow {
            method: "petal",
            count: petal_budget(d).paper_mode_subtotal,
            note: "paper-mode subtotal".into(),
        },
        ComparisonRow {
            method: "lora",
            count: lora,
            note: format!(
                "assumes {PAPER_LAYERS} layers x {LORA_MATRICES_PER_LAYER} adapted {0}x{0} matrices at R={PAPER_LORA_RANK}; reported figure is 5.0M, adapted set unstated",
                d.h_t
            ),
        },
        ComparisonRow {
            method: "head",
            count: head,
            note: "last block of this architecture at these widths".into(),
        },
        ComparisonRow {
            method: "full",
            count: BACKBONE_REFERENCE,
            note: "backbone reference".into(),
        },
    ]
}

pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    for r in rows {
        writeln!(out, "{:<6} {:>14}  {}", r.method, group_thousands(r.count), r.note).expect("string write");
    }
    out
}

/// Trainable tensors a built model of this kind should hold, counted in
/// closed form. `instruction_len` only matters for the random-instruction
/// ablation.
pub fn method_trainable_count(
    cfg: &FormerConfig,
    ad: &AdapterConfig,
    method: Method,
    ablation: Ablation,
    instruction_len: usize,
) -> usize {
    match method {
        Method::Full => backbone_param_count(cfg),
        Method::Head => block_param_count(cfg.hidden, cfg.vision, cfg.ffn_mult) + classifier_param_count(cfg),
        Method::Lora => lora_param_count(cfg, ad.lora_rank),
        Method::Petal => {
            let dims = BudgetDims {
                d_p: ad.d_p() as u64,
                ..BudgetDims::new(
                    cfg.vision as u64,
                    cfg.hidden as u64,
                    ad.rank as u64,
                    ad.middle as u64,
                    ad.experts as u64,
                )
            };
            let report = petal_budget_with(&dims, ad.expert_form);
            let mut n = report.full_itemized_total;
            if !ablation.uses_experts() {
                n -= report.expert_part() + report.line("gate").unwrap_or(0);
            }
            if !ablation.trains_threshold() {
                n -= 2;
            }
            if ablation == Ablation::RandomInstruction {
                n += (instruction_len * cfg.hidden) as u64;
            }
            n as usize
        }
    }
}
