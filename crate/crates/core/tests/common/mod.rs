#![allow(dead_code)]

use petal::dma::{dma_forward, init_factor_bank, AttentionKind, BankSpec, FactorBank, ModalityTag, Slot};
use petal::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MODALITIES: [ModalityTag; 2] = [ModalityTag::QueryStream, ModalityTag::TextStream];

pub fn random_bank(rng: &mut ChaCha8Rng) -> FactorBank {
    let rank = rng.random_range(1..=4);
    let d_in = rng.random_range(1..=8);
    let d_out = rng.random_range(1..=8);
    let d_p = rank * rank;
    let n_slots = rng.random_range(1..=d_p.min(4));
    let spec = BankSpec {
        kind: AttentionKind::SelfAttn,
        d_in,
        d_out,
        rank,
        d_p,
        modalities: MODALITIES.to_vec(),
        slots: Slot::ALL[..n_slots].iter().map(|&s| (s, rng.random_range(1..=d_in))).collect(),
    };
    let mut bank = init_factor_bank(&spec, rng.random()).unwrap();
    let fill = |t: &mut Tensor, rng: &mut ChaCha8Rng| {
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    };
    fill(&mut bank.u, rng);
    fill(&mut bank.v, rng);
    fill(&mut bank.p, rng);
    for (_, l) in bank.lambda.iter_mut() {
        fill(l, rng);
    }
    bank.gamma = Tensor::scalar(rng.random_range(0.5..1.5)).trainable();
    bank
}

/// ΔW[i][j] = Σ_r Σ_p V[i,r] λ[r] P[p,r] e[p] U[j,r], four nested loops.
pub fn brute_delta(bank: &FactorBank, m: ModalityTag, s: Slot) -> Vec<Vec<f64>> {
    let r = bank.rank();
    let in_dim = bank.slot_in_dim(s).unwrap();
    let e = bank.selector_vector(s).unwrap();
    let lam = bank.lambda_of(m).unwrap().data();
    let (u, v, p) = (bank.u.data(), bank.v.data(), bank.p.data());
    let mut out = vec![vec![0.0; in_dim]; bank.d_out()];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..r {
                let mut pe = 0.0;
                for (q, eq) in e.iter().enumerate() {
                    pe += p[q * r + k] * eq;
                }
                acc += v[i * r + k] * lam[k] * pe * u[j * r + k];
            }
            *cell = acc;
        }
    }
    out
}


/// Max over 50 seeded instances of the entrywise gap between `delta_weight`
/// and the brute-force sum.
pub fn delta_oracle_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let bank = random_bank(&mut rng);
        let slots: Vec<Slot> = bank.slots().map(|(s, _)| s).collect();
        for m in MODALITIES {
            for &s in &slots {
                let got = bank.delta_weight_value(m, s).unwrap();
                let want = brute_delta(&bank, m, s);
                let (rows, cols) = got.dims2().unwrap();
                assert_eq!((rows, cols), (want.len(), want[0].len()));
                for (i, row) in want.iter().enumerate() {
                    for (j, w) in row.iter().enumerate() {
                        worst = worst.max((got.at2(i, j) - w).abs());
                    }
                }
            }
        }
    }
    worst
}

/// Max over 50 seeded instances of `dma_forward` against `(Γ W0 + ΔW) X`
/// with the brute-force `ΔW`, relative to the largest output entry.
pub fn forward_oracle_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let bank = random_bank(&mut rng);
        let (s, in_dim) = bank.slots().next().unwrap();
        let m = MODALITIES[rng.random_range(0..2)];
        let t = rng.random_range(1..=5);
        let w0 = Tensor::from_fn(&[bank.d_out(), in_dim], |_| rng.random_range(-1.0..1.0));
        let x = Tensor::from_fn(&[in_dim, t], |_| rng.random_range(-1.0..1.0));

        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let y = dma_forward(&mut tape, &bank, &w0, xv, m, s).unwrap();
        let y = tape.value(y).clone();

        let dw = brute_delta(&bank, m, s);
        let g = bank.gamma.item();
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for i in 0..bank.d_out() {
            for c in 0..t {
                let mut want = 0.0;
                for j in 0..in_dim {
                    want += (g * w0.at2(i, j) + dw[i][j]) * x.at2(j, c);
                }
                diff = diff.max((y.at2(i, c) - want).abs());
                scale = scale.max(want.abs());
            }
        }
        worst = worst.max(diff / scale.max(1e-300));
    }
    worst
}
