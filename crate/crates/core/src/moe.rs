//! Adaptive instruction mixture of experts.
//!
//! `K` experts transform the stacked instruction tokens `x`; a linear gate
//! scores each expert from the mean-pooled `[x ; y_k]` and the softmax of those
//! scores mixes the expert outputs into the enhanced instruction
//! `I = Σ_k g_k · y_k`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertForm {
    /// `y = x + GELU(x · downᵀ) · upᵀ`; `up` starts at zero.
    #[default]
    Bottleneck,
    /// `y = γ ⊙ x + β`; starts at `γ = 1, β = 0`.
    Affine,
}

impl std::str::FromStr for ExpertForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottleneck" => Ok(Self::Bottleneck),
            "affine" => Ok(Self::Affine),
            other => Err(Error::Lookup {
                kind: "expert form",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertConfig {
    pub form: ExpertForm,
    pub hidden: usize,
    pub middle: usize,
    pub experts: usize,
}

#[derive(Clone, Debug)]
pub enum Expert {
    Bottleneck { down: Tensor, up: Tensor },
    Affine { gamma: Tensor, beta: Tensor },
}

#[derive(Clone, Debug)]
pub struct ExpertSet {
    form: ExpertForm,
    hidden: usize,
    pub experts: Vec<Expert>,
    /// Scorer weights over `[pool(x) ; pool(y_k)]`, length `2·hidden`.
    pub gate_w: Tensor,
    pub gate_b: Tensor,
}

/// Output of [`ExpertSet::enhance`].
#[derive(Clone, Copy, Debug)]
pub struct EnhancedInstruction {
    /// `T × hidden`.
    pub tokens: Var,
    /// `[K]` gate weights on the simplex.
    pub gate: Var,
}

pub fn init_expert_set(cfg: &ExpertConfig, seed: u64) -> Result<ExpertSet> {
    if cfg.experts == 0 {
        return Err(Error::config("expert count must be at least 1"));
    }
    if cfg.hidden == 0 || (cfg.form == ExpertForm::Bottleneck && cfg.middle == 0) {
        return Err(Error::config("expert widths must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let experts = (0..cfg.experts)
        .map(|_| match cfg.form {
            ExpertForm::Bottleneck => Expert::Bottleneck {
                down: Tensor::randn(&[cfg.middle, cfg.hidden], INIT_STD, &mut rng).trainable(),
                up: Tensor::zeros(&[cfg.hidden, cfg.middle]).trainable(),
            },
            ExpertForm::Affine => Expert::Affine {
                gamma: Tensor::ones(&[cfg.hidden]).trainable(),
                beta: Tensor::zeros(&[cfg.hidden]).trainable(),
            },
        })
        .collect();
    Ok(ExpertSet {
        form: cfg.form,
        hidden: cfg.hidden,
        experts,
        gate_w: Tensor::randn(&[2 * cfg.hidden], INIT_STD, &mut rng).trainable(),
        gate_b: Tensor::scalar(0.0).trainable(),
    })
}

fn expert_names(k: usize, e: &Expert) -> (String, String) {
    match e {
        Expert::Bottleneck { .. } => (format!("moe.expert{k}.down"), format!("moe.expert{k}.up")),
        Expert::Affine { .. } => (format!("moe.expert{k}.gamma"), format!("moe.expert{k}.beta")),
    }
}

impl ExpertSet {
    pub fn form(&self) -> ExpertForm {
        self.form
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Same experts in the order `perm[0], perm[1], ...`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            experts: perm.iter().map(|&i| self.experts[i].clone()).collect(),
            ..self.clone()
        }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        match tape.shape(x) {
            [_, h] if *h == self.hidden => Ok(()),
            s => Err(Error::dim("moe input", s, &[0, self.hidden])),
        }
    }

    pub fn expert_forward(&self, tape: &mut Tape, k: usize, x: Var) -> Result<Var> {
        let expert = self.experts.get(k).ok_or_else(|| Error::Lookup {
            kind: "expert",
            name: format!("{k} of {}", self.experts.len()),
        })?;
        self.check_input(tape, x)?;
        let (n1, n2) = expert_names(k, expert);
        match expert {
            Expert::Bottleneck { down, up } => {
                let d = tape.param(&n1, down);
                let u = tape.param(&n2, up);
                let hidden = tape.matmul_nt(x, d)?;
                let act = tape.gelu(hidden);
                let delta = tape.matmul_nt(act, u)?;
                tape.add(x, delta)
            }
            Expert::Affine { gamma, beta } => {
                let g = tape.param(&n1, gamma);
                let b = tape.param(&n2, beta);
                let scaled = tape.mul(x, g)?;
                tape.add(scaled, b)
            }
        }
    }

    /// Softmax over experts of `w · [pool(x) ; pool(y_k)] + b`.
    ///
    /// The `pool(x)` half of `w` and the bias add the same amount to every
    /// expert's score, so they are dropped before the softmax. Their gradient
    /// is exactly zero.
    pub fn gate_weights(&self, tape: &mut Tape, x: Var, ys: &[Var]) -> Result<Var> {
        if ys.is_empty() {
            return Err(Error::contract("gate needs at least one expert output"));
        }
        let xs = tape.shape(x).to_vec();
        if let Some(&bad) = ys.iter().find(|&&y| tape.shape(y) != xs.as_slice()) {
            return Err(Error::dim("gate", &xs, tape.shape(bad)));
        }
        let w = tape.param("moe.gate.w", &self.gate_w);
        let w_y = tape.slice_rows(w, self.hidden, 2 * self.hidden)?;
        let mut scores = Vec::with_capacity(ys.len());
        for &y in ys {
            let py = tape.mean_rows(y)?;
            let weighted = tape.mul(py, w_y)?;
            scores.push(tape.sum(weighted));
        }
        let stacked = tape.concat(&scores)?;
        tape.softmax(stacked, 0)
    }

    /// Raw score `w · [pool(x) ; pool(y_k)] + b` for each expert, without
    /// the softmax. Used for inspection.
    pub fn gate_scores(&self, x: &Tensor, ys: &[Tensor]) -> Result<Vec<f64>> {
        let pool = |t: &Tensor| -> Result<Vec<f64>> {
            let (r, c) = t.dims2()?;
            if c != self.hidden {
                return Err(Error::dim("gate", t.shape(), &[r, self.hidden]));
            }
            Ok((0..c).map(|j| (0..r).map(|i| t.at2(i, j)).sum::<f64>() / r as f64).collect())
        };
        let px = pool(x)?;
        let w = self.gate_w.data();
        let base: f64 = px.iter().zip(&w[..self.hidden]).map(|(a, b)| a * b).sum::<f64>() + self.gate_b.item();
        ys.iter()
            .map(|y| Ok(base + pool(y)?.iter().zip(&w[self.hidden..]).map(|(a, b)| a * b).sum::<f64>()))
            .collect()
    }

    pub fn enhance(&self, tape: &mut Tape, x: Var) -> Result<EnhancedInstruction> {
        self.check_input(tape, x)?;
        let ys = (0..self.experts.len())
            .map(|k| self.expert_forward(tape, k, x))
            .collect::<Result<Vec<_>>>()?;
        let gate = self.gate_weights(tape, x, &ys)?;
        let mut acc: Option<Var> = None;
        for (k, &y) in ys.iter().enumerate() {
            let gk = tape.slice_rows(gate, k, k + 1)?;
            let term = tape.mul(y, gk)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        Ok(EnhancedInstruction {
            tokens: acc.expect("at least one expert"),
            gate,
        })
    }

    /// Trainable weights inside the experts, excluding the gate.
    pub fn expert_param_count(&self) -> usize {
        self.experts
            .iter()
            .map(|e| match e {
                Expert::Bottleneck { down, up } => down.numel() + up.numel(),
                Expert::Affine { gamma, beta } => gamma.numel() + beta.numel(),
            })
            .sum()
    }
}

impl Parameters for ExpertSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (k, e) in self.experts.iter().enumerate() {
            let (n1, n2) = expert_names(k, e);
            match e {
                Expert::Bottleneck { down: a, up: b } | Expert::Affine { gamma: a, beta: b } => {
                    f(&n1, a);
                    f(&n2, b);
                }
            }
        }
        f("moe.gate.w", &self.gate_w);
        f("moe.gate.b", &self.gate_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (k, e) in self.experts.iter_mut().enumerate() {
            let (n1, n2) = expert_names(k, e);
            match e {
                Expert::Bottleneck { down: a, up: b } | Expert::Affine { gamma: a, beta: b } => {
                    f(&n1, a);
                    f(&n2, b);
                }
            }
        }
        f("moe.gate.w", &mut self.gate_w);
        f("moe.gate.b", &mut self.gate_b);
    }
}
