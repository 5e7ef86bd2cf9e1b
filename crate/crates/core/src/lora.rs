//! Low-rank baseline adapter: `ΔW = B·A` per adapted matrix, unshared across
//! layers, with `B` zero-initialized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dma::{AttentionKind, Slot};
use crate::error::{Error, Result};
use crate::former::{FormerConfig, Projector, Site};
use crate::params::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct LoraDelta {
    /// `rank × d_in`, Gaussian.
    pub a: Tensor,
    /// `d_out × rank`, zero.
    pub b: Tensor,
}

impl LoraDelta {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn delta(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let a = tape.constant(&self.a);
        let b = tape.constant(&self.b);
        let d = tape.matmul(b, a)?;
        Ok(tape.value(d).clone())
    }
}

/// One low-rank delta for a `d_out × d_in` weight.
pub fn lora_baseline_delta(d_out: usize, d_in: usize, rank: usize, seed: u64) -> Result<LoraDelta> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    new_delta(d_out, d_in, rank, &mut rng)
}

fn new_delta(d_out: usize, d_in: usize, rank: usize, rng: &mut ChaCha8Rng) -> Result<LoraDelta> {
    if rank == 0 || rank > d_out.min(d_in) {
        return Err(Error::config(format!(
            "lora rank {rank} outside 1..={} for a {d_out}x{d_in} weight",
            d_out.min(d_in)
        )));
    }
    Ok(LoraDelta {
        a: Tensor::randn(&[rank, d_in], INIT_STD, rng).trainable(),
        b: Tensor::zeros(&[d_out, rank]).trainable(),
    })
}

/// Deltas for every attention slot of every layer.
#[derive(Clone, Debug)]
pub struct LoraSet {
    rank: usize,
    /// Indexed `[layer][kind][slot]` with kind 0 = self, 1 = cross.
    deltas: Vec<[[LoraDelta; 4]; 2]>,
}

const KINDS: [AttentionKind; 2] = [AttentionKind::SelfAttn, AttentionKind::Cross];

fn kind_index(kind: AttentionKind) -> usize {
    match kind {
        AttentionKind::SelfAttn => 0,
        AttentionKind::Cross => 1,
    }
}

fn slot_index(slot: Slot) -> usize {
    Slot::ALL.iter().position(|&s| s == slot).expect("slot")
}

fn name(layer: usize, kind: AttentionKind, slot: Slot, part: &str) -> String {
    format!("lora.layer{layer}.{}.{}.{part}", kind.as_str(), slot.as_str())
}

pub fn init_lora_set(cfg: &FormerConfig, rank: usize, seed: u64) -> Result<LoraSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deltas = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let mut make = |kind| -> Result<[LoraDelta; 4]> {
            let mut d = |slot| new_delta(cfg.hidden, cfg.slot_in_dim(kind, slot), rank, &mut rng);
            Ok([d(Slot::Query)?, d(Slot::Key)?, d(Slot::Value)?, d(Slot::Output)?])
        };
        let s = make(AttentionKind::SelfAttn)?;
        let c = make(AttentionKind::Cross)?;
        deltas.push([s, c]);
    }
    Ok(LoraSet { rank, deltas })
}

/// `R·(m + n)` summed over every adapted `m × n` weight.
pub fn lora_param_count(cfg: &FormerConfig, rank: usize) -> usize {
    let per_layer: usize = KINDS
        .iter()
        .flat_map(|&k| Slot::ALL.iter().map(move |&s| rank * (cfg.hidden + cfg.slot_in_dim(k, s))))
        .sum();
    cfg.layers * per_layer
}

impl LoraSet {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn get(&self, layer: usize, kind: AttentionKind, slot: Slot) -> Option<&LoraDelta> {
        self.deltas.get(layer).map(|d| &d[kind_index(kind)][slot_index(slot)])
    }
}

impl Projector for LoraSet {
    fn project(&self, tape: &mut Tape, w0: Var, x: Var, site: Site) -> Result<Var> {
        let d = self.get(site.layer, site.kind, site.slot).ok_or_else(|| Error::Lookup {
            kind: "lora layer",
            name: site.layer.to_string(),
        })?;
        let base = tape.matmul_nt(x, w0)?;
        let a = tape.param(&name(site.layer, site.kind, site.slot, "A"), &d.a);
        let b = tape.param(&name(site.layer, site.kind, site.slot, "B"), &d.b);
        let xa = tape.matmul_nt(x, a)?;
        let delta = tape.matmul_nt(xa, b)?;
        tape.add(base, delta)
    }
}

impl Parameters for LoraSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (l, layer) in self.deltas.iter().enumerate() {
            for (k, kind) in KINDS.iter().enumerate() {
                for (s, slot) in Slot::ALL.iter().enumerate() {
                    let d = &layer[k][s];
                    f(&name(l, *kind, *slot, "A"), &d.a);
                    f(&name(l, *kind, *slot, "B"), &d.b);
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (l, layer) in self.deltas.iter_mut().enumerate() {
            for (k, kind) in KINDS.iter().enumerate() {
                for (s, slot) in Slot::ALL.iter().enumerate() {
                    let d = &mut layer[k][s];
                    f(&name(l, *kind, *slot, "A"), &mut d.a);
                    f(&name(l, *kind, *slot, "B"), &mut d.b);
                }
            }
        }
    }
}
