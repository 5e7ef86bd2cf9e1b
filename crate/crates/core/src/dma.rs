//! Dynamic mode approximation of attention weights.
//!
//! Each attention kind owns one [`FactorBank`] shared by every layer. For
//! modality `m` and slot `s` the bank yields
//!
//! ```text
//! ΔW[m, s] = Σ_r λ[m]_r · <p_r, e_s> · v_r u_rᵀ
//! H        = Γ · W0 · X + ΔW[m, s] · X
//! ```
//!
//! where `e_s` is a fixed orthonormal slot selector contracting the third CP
//! mode. `V` starts at zero, so every delta is exactly zero at init, and
//! `Γ = 1` makes the adapted projection equal to the frozen one.
//!
//! Slots whose input width is smaller than the bank's `d_in` (query and output
//! projections of cross-attention read text-width rows) use the leading rows
//! of `U`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModalityTag {
    QueryStream,
    TextStream,
}

impl ModalityTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModalityTag::QueryStream => "query",
            ModalityTag::TextStream => "text",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Query,
    Key,
    Value,
    Output,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Query, Slot::Key, Slot::Value, Slot::Output];

    pub fn as_str(self) -> &'static str {
        match self {
            Slot::Query => "q",
            Slot::Key => "k",
            Slot::Value => "v",
            Slot::Output => "o",
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Cross,
    SelfAttn,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Cross => "cross",
            AttentionKind::SelfAttn => "self",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BankSpec {
    pub kind: AttentionKind,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    /// Extent of the third CP mode. `rank²` reproduces the appendix count.
    pub d_p: usize,
    pub modalities: Vec<ModalityTag>,
    /// Adapted slots with the input width each one reads.
    pub slots: Vec<(Slot, usize)>,
}

impl BankSpec {
    /// Bank covering all four slots with a common input width.
    pub fn uniform(kind: AttentionKind, d_in: usize, d_out: usize, rank: usize, modalities: &[ModalityTag]) -> Self {
        Self {
            kind,
            d_in,
            d_out,
            rank,
            d_p: rank * rank,
            modalities: modalities.to_vec(),
            slots: Slot::ALL.iter().map(|&s| (s, d_in)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Selector {
    slot: Slot,
    in_dim: usize,
    /// `d_p × 1` unit column.
    e: Tensor,
}

#[derive(Clone, Debug)]
pub struct FactorBank {
    kind: AttentionKind,
    prefix: String,
    rank: usize,
    pub u: Tensor,
    pub v: Tensor,
    pub p: Tensor,
    pub lambda: Vec<(ModalityTag, Tensor)>,
    pub gamma: Tensor,
    selectors: Vec<Selector>,
}

fn orthonormal_columns(d: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let lead = v.iter().copied().fold(0.0, |m: f64, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        basis.push(v);
    }
    basis
}

/// Seeded bank with `U, P, λ ~ N(0, 0.02²)`, `V = 0` and `Γ = 1`.
pub fn init_factor_bank(spec: &BankSpec, seed: u64) -> Result<FactorBank> {
    if spec.d_in == 0 || spec.d_out == 0 || spec.rank == 0 || spec.d_p == 0 {
        return Err(Error::config(format!("bank extents must be positive: {spec:?}")));
    }
    if spec.modalities.is_empty() || spec.slots.is_empty() {
        return Err(Error::config("bank needs at least one modality and one slot"));
    }
    if spec.d_p < spec.slots.len() {
        return Err(Error::config(format!(
            "d_p = {} cannot hold {} orthonormal slot selectors",
            spec.d_p,
            spec.slots.len()
        )));
    }
    if let Some(&(s, w)) = spec.slots.iter().find(|&&(_, w)| w == 0 || w > spec.d_in) {
        return Err(Error::config(format!("slot {s} input width {w} outside 1..={}", spec.d_in)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = spec.rank;
    let u = Tensor::randn(&[spec.d_in, r], INIT_STD, &mut rng).trainable();
    let p = Tensor::randn(&[spec.d_p, r], INIT_STD, &mut rng).trainable();
    let lambda = spec
        .modalities
        .iter()
        .map(|&m| (m, Tensor::randn(&[r], INIT_STD, &mut rng).trainable()))
        .collect();
    let columns = orthonormal_columns(spec.d_p, spec.slots.len(), &mut rng);
    let selectors = spec
        .slots
        .iter()
        .zip(columns)
        .map(|(&(slot, in_dim), e)| Selector {
            slot,
            in_dim,
            e: Tensor::new(vec![spec.d_p, 1], e).expect("selector shape"),
        })
        .collect();
    Ok(FactorBank {
        kind: spec.kind,
        prefix: spec.kind.as_str().to_string(),
        rank: r,
        u,
        v: Tensor::zeros(&[spec.d_out, r]).trainable(),
        p,
        lambda,
        gamma: Tensor::scalar(1.0).trainable(),
        selectors,
    })
}

impl FactorBank {
    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn d_in(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn d_p(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.prefix = prefix.into();
        self
    }

    pub fn modalities(&self) -> impl Iterator<Item = ModalityTag> + '_ {
        self.lambda.iter().map(|(m, _)| *m)
    }

    pub fn slots(&self) -> impl Iterator<Item = (Slot, usize)> + '_ {
        self.selectors.iter().map(|s| (s.slot, s.in_dim))
    }

    pub fn slot_in_dim(&self, slot: Slot) -> Result<usize> {
        self.selector(slot).map(|s| s.in_dim)
    }

    pub fn selector_vector(&self, slot: Slot) -> Result<&[f64]> {
        self.selector(slot).map(|s| s.e.data())
    }

    pub fn lambda_of(&self, m: ModalityTag) -> Result<&Tensor> {
        self.lambda
            .iter()
            .find(|(tag, _)| *tag == m)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Lookup {
                kind: "modality",
                name: format!("{m:?}"),
            })
    }

    pub fn lambda_of_mut(&mut self, m: ModalityTag) -> Result<&mut Tensor> {
        self.lambda
            .iter_mut()
            .find(|(tag, _)| *tag == m)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Lookup {
                kind: "modality",
                name: format!("{m:?}"),
            })
    }

    fn selector(&self, slot: Slot) -> Result<&Selector> {
        self.selectors.iter().find(|s| s.slot == slot).ok_or_else(|| Error::Lookup {
            kind: "slot",
            name: slot.to_string(),
        })
    }

    fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    fn lambda_name(&self, m: ModalityTag) -> String {
        format!("{}.lambda.{}", self.prefix, m.as_str())
    }

    /// Per-rank coefficients `λ[m]_r · <p_r, e_s>` as an `[R]` vector.
    fn coefficients(&self, tape: &mut Tape, m: ModalityTag, s: Slot) -> Result<Var> {
        let lam = self.lambda_of(m)?;
        let sel = self.selector(s)?;
        let lam = tape.param(&self.lambda_name(m), lam);
        let p = tape.param(&self.name("P"), &self.p);
        let e = tape.constant(&sel.e);
        let pt = tape.transpose(p)?;
        let pe = tape.matmul(pt, e)?;
        let pe = tape.reshape(pe, &[self.rank])?;
        tape.mul(lam, pe)
    }

    fn u_for(&self, tape: &mut Tape, in_dim: usize) -> Result<Var> {
        let u = tape.param(&self.name("U"), &self.u);
        if in_dim == self.d_in() {
            Ok(u)
        } else {
            tape.slice_rows(u, 0, in_dim)
        }
    }

    pub fn gamma_var(&self, tape: &mut Tape) -> Var {
        tape.param(&self.name("gamma"), &self.gamma)
    }

    /// `ΔW[m, s]` as a `d_out × in_dim(s)` matrix on the tape.
    pub fn delta_weight(&self, tape: &mut Tape, m: ModalityTag, s: Slot) -> Result<Var> {
        let in_dim = self.slot_in_dim(s)?;
        let coeff = self.coefficients(tape, m, s)?;
        let v = tape.param(&self.name("V"), &self.v);
        let vc = tape.mul(v, coeff)?;
        let u = self.u_for(tape, in_dim)?;
        tape.matmul_nt(vc, u)
    }

    pub fn delta_weight_value(&self, m: ModalityTag, s: Slot) -> Result<Tensor> {
        let mut tape = Tape::new();
        let d = self.delta_weight(&mut tape, m, s)?;
        Ok(tape.value(d).clone())
    }

    /// Token-major projection `Γ · X W0ᵀ + ((X U) ⊙ c) Vᵀ` for `X: T × in_dim`.
    /// Never materializes `ΔW`.
    pub fn project_rows(&self, tape: &mut Tape, w0: Var, x: Var, m: ModalityTag, s: Slot) -> Result<Var> {
        let in_dim = self.slot_in_dim(s)?;
        let w0s = tape.shape(w0).to_vec();
        if w0s != [self.d_out(), in_dim] {
            return Err(Error::dim("dma project", &w0s, &[self.d_out(), in_dim]));
        }
        let base = tape.matmul_nt(x, w0)?;
        let gamma = self.gamma_var(tape);
        let scaled = tape.mul(base, gamma)?;
        let u = self.u_for(tape, in_dim)?;
        let xu = tape.matmul(x, u)?;
        let coeff = self.coefficients(tape, m, s)?;
        let xuc = tape.mul(xu, coeff)?;
        let v = tape.param(&self.name("V"), &self.v);
        let delta = tape.matmul_nt(xuc, v)?;
        tape.add(scaled, delta)
    }

    /// Fused inference weight `Γ · W0 + ΔW[m, s]`.
    pub fn merge_for_inference(&self, w0: &Tensor, m: ModalityTag, s: Slot) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = tape.constant(w0);
        let gamma = self.gamma_var(&mut tape);
        let scaled = tape.mul(w, gamma)?;
        let delta = self.delta_weight(&mut tape, m, s)?;
        let merged = tape.add(scaled, delta)?;
        Ok(tape.value(merged).clone())
    }
}

/// `Γ · W0 · X + ΔW[m, s] · X` for column-token input `X: d_in × T`.
///
/// `w0` must be frozen; gradients only reach bank parameters.
pub fn dma_forward(tape: &mut Tape, bank: &FactorBank, w0: &Tensor, x: Var, m: ModalityTag, s: Slot) -> Result<Var> {
    if w0.requires_grad() {
        return Err(Error::contract("backbone weight W0 must be frozen"));
    }
    let w = tape.constant(w0);
    let gamma = bank.gamma_var(tape);
    let base = tape.matmul(w, x)?;
    let scaled = tape.mul(base, gamma)?;
    let delta = bank.delta_weight(tape, m, s)?;
    let dx = tape.matmul(delta, x)?;
    tape.add(scaled, dx)
}

impl Parameters for FactorBank {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&self.name("U"), &self.u);
        f(&self.name("V"), &self.v);
        f(&self.name("P"), &self.p);
        for (m, t) in &self.lambda {
            f(&self.lambda_name(*m), t);
        }
        f(&self.name("gamma"), &self.gamma);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let prefix = self.prefix.clone();
        f(&format!("{prefix}.U"), &mut self.u);
        f(&format!("{prefix}.V"), &mut self.v);
        f(&format!("{prefix}.P"), &mut self.p);
        for (m, t) in &mut self.lambda {
            f(&format!("{prefix}.lambda.{}", m.as_str()), t);
        }
        f(&format!("{prefix}.gamma"), &mut self.gamma);
    }
}
