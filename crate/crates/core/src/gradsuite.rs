//! Finite-difference suite over the differentiable ops and over every
//! trainable tensor of a full toy model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::RunConfig;
use crate::data::{gen_dataset, Item, SyntheticTaskSpec};
use crate::error::Result;
use crate::gradcheck::{check_parameters, finite_diff_check, ParamCheck};
use crate::ib::IbConfig;
use crate::model::Model;
use crate::params::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::prepare;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_err: f64,
}

impl SuiteResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Redraws every trainable tensor of `p` as `N(0, std²)`, thresholds as
/// `1 + N(0, std²)`. Gradients at the zero-delta start are products with a
/// zero factor and mostly vanish, which says nothing about correctness.
pub fn randomize_trainable(p: &mut dyn Parameters, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.visit_mut(&mut |name, t| {
        if !t.requires_grad() {
            return;
        }
        let offset = if name.ends_with(".gamma") && t.numel() == 1 { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = offset + std * z;
        }
    });
}

type UnaryCase = (&'static str, Vec<usize>, fn(&mut Tape, Var) -> Result<Var>);

fn op_cases() -> Vec<UnaryCase> {
    fn weighted(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(t.shape(y), 1.0, &mut rng);
        let w = t.constant(&w);
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }
    vec![
        ("matmul chain", vec![5, 7], |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let b = t.constant(&Tensor::randn(&[7, 3], 1.0, &mut rng));
            let c = t.constant(&Tensor::randn(&[3, 4], 1.0, &mut rng));
            let y = t.matmul(x, b)?;
            let y = t.matmul(y, c)?;
            weighted(t, y, 2)
        }),
        ("softmax rows", vec![3, 6], |t, x| {
            let y = t.softmax(x, 1)?;
            weighted(t, y, 3)
        }),
        ("softmax columns", vec![4, 3], |t, x| {
            let y = t.softmax(x, 0)?;
            weighted(t, y, 4)
        }),
        ("log_softmax", vec![3, 5], |t, x| {
            let y = t.log_softmax(x)?;
            weighted(t, y, 5)
        }),
        ("gelu", vec![4, 4], |t, x| {
            let y = t.gelu(x);
            weighted(t, y, 6)
        }),
        ("tanh", vec![6], |t, x| {
            let y = t.tanh(x);
            weighted(t, y, 7)
        }),
        ("layer_norm", vec![3, 8], |t, x| {
            let y = t.layer_norm(x, 1e-5);
            weighted(t, y, 8)
        }),
        ("normalize_rows", vec![3, 4], |t, x| {
            let y = t.normalize_rows(x, 1e-12);
            weighted(t, y, 9)
        }),
        ("broadcast mul/add/sub", vec![4], |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let m = t.constant(&Tensor::randn(&[3, 4], 1.0, &mut rng));
            let a = t.mul(m, x)?;
            let b = t.add(a, x)?;
            let c = t.sub(x, b)?;
            weighted(t, c, 11)
        }),
        ("slices, concat, transpose", vec![4, 4], |t, x| {
            let a = t.slice_rows(x, 1, 3)?;
            let b = t.slice_cols(x, 0, 2)?;
            let bt = t.transpose(b)?;
            let c = t.concat(&[a, bt])?;
            let d = t.concat_cols(&[c, c])?;
            weighted(t, d, 12)
        }),
        ("reductions and pick", vec![3, 5], |t, x| {
            let r = t.mean_rows(x)?;
            let s = t.sum_last(x);
            let p = t.pick(x, &[4, 0, 2])?;
            let a = weighted(t, r, 13)?;
            let b = weighted(t, s, 14)?;
            let c = weighted(t, p, 15)?;
            let ab = t.add(a, b)?;
            let all = t.add(ab, c)?;
            let m = t.mean(x);
            t.add(all, m)
        }),
    ]
}

/// Relative error of every registered op at a seeded random point.
pub fn check_ops(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .map(|(name, shape, f)| {
            let theta = Tensor::randn(&shape, 1.0, &mut rng);
            Ok(SuiteResult {
                name: name.to_string(),
                max_rel_err: finite_diff_check(f, &theta, STEP)?,
            })
        })
        .collect()
}

/// The toy configuration the full-model check runs on.
pub fn toy_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.layers = 2;
    cfg.model.hidden = 32;
    cfg.model.vision = 56;
    cfg.model.rank = 4;
    cfg.model.experts = 3;
    cfg.model.middle = 4;
    cfg.train.seed = seed;
    cfg.task = SyntheticTaskSpec {
        n_train: 3,
        n_val: 1,
        teacher_seed: seed,
        ..SyntheticTaskSpec::default()
    };
    cfg
}

/// Model with randomized trainable tensors plus a small labelled batch.
pub fn toy_problem(cfg: &RunConfig, seed: u64) -> Result<(Model, Vec<Item>)> {
    let (mut model, _) = prepare(cfg)?;
    randomize_trainable(&mut model, 0.5, seed ^ 0xface);
    let data = gen_dataset(&cfg.task, &cfg.model.former())?;
    Ok((model, data.train))
}

/// Checks every trainable tensor against the full training loss
/// `CE + mu·ib_loss` on a small batch.
pub fn check_model(model: &mut Model, items: &[Item], ib: &IbConfig) -> Result<Vec<ParamCheck>> {
    let refs: Vec<&Item> = items.iter().collect();
    check_parameters(model, |m, tape| Ok(m.batch_loss(tape, &refs, ib)?.loss), STEP)
}

pub fn run_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = check_ops(seed)?;
    let cfg = toy_config(seed);
    let (mut model, items) = toy_problem(&cfg, seed)?;
    for c in check_model(&mut model, &items, &cfg.train.ib())? {
        out.push(SuiteResult {
            name: format!("model {} ({} entries)", c.name, c.numel),
            max_rel_err: c.max_rel_err,
        });
    }
    Ok(out)
}
