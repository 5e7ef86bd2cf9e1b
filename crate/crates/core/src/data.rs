//! Seeded synthetic tasks labelled by a frozen random teacher network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::former::FormerConfig;
use crate::instructions::TaskKind;
use crate::tensor::Tensor;

pub const FEW_SHOT_SIZES: [usize; 2] = [50, 150];
const TEACHER_HIDDEN: usize = 16;
const CALIBRATION_POOL: usize = 4096;
const CALIBRATION_ROUNDS: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub teacher_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub vision_tokens: usize,
    pub noise: f64,
    /// Input-weight scale of the teacher; larger values give sharper,
    /// harder to learn label boundaries.
    pub teacher_scale: f64,
    /// `Some(50)` or `Some(150)` replaces `n_train` by exactly that many items.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub few_shot: Option<usize>,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::VqaLike,
            teacher_seed: 11,
            n_train: 480,
            n_val: 240,
            vision_tokens: 8,
            noise: 0.0,
            teacher_scale: 2.0,
            few_shot: None,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(n) = self.few_shot {
            if !FEW_SHOT_SIZES.contains(&n) {
                return Err(Error::config(format!("few_shot must be 50 or 150, got {n}")));
            }
        }
        if self.train_size() < 1 {
            return Err(Error::contract("n_train must be at least 1"));
        }
        if self.n_val < 1 {
            return Err(Error::contract("n_val must be at least 1"));
        }
        if self.vision_tokens < 1 {
            return Err(Error::config("vision_tokens must be at least 1"));
        }
        if !(self.teacher_scale > 0.0 && self.teacher_scale.is_finite()) {
            return Err(Error::config(format!("teacher_scale must be positive, got {}", self.teacher_scale)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config(format!("noise rate {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }

    pub fn train_size(&self) -> usize {
        self.few_shot.unwrap_or(self.n_train)
    }
}

#[derive(Clone, Debug)]
pub struct Item {
    /// `Tv × vision`.
    pub vision: Tensor,
    pub question: Option<usize>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Item>,
    pub val: Vec<Item>,
}

/// `tanh` hidden layer on the mean vision token, then one linear head per
/// question. Output biases are calibrated so labels come out near uniform.
#[derive(Clone, Debug)]
pub struct Teacher {
    w1: Vec<f64>,
    b1: Vec<f64>,
    heads: Vec<Vec<f64>>,
    bias: Vec<Vec<f64>>,
    vision: usize,
    vocab: usize,
}

impl Teacher {
    pub fn new(cfg: &FormerConfig, kind: TaskKind, vision_tokens: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nq = match kind {
            TaskKind::CaptionLike => 1,
            TaskKind::VqaLike => cfg.questions,
        };
        // mean of Tv unit normals has per-dimension variance 1/Tv
        let w1_std = scale * (vision_tokens as f64 / cfg.vision as f64).sqrt();
        let w1 = Tensor::randn(&[TEACHER_HIDDEN, cfg.vision], w1_std, &mut rng).into_data();
        let b1 = Tensor::randn(&[TEACHER_HIDDEN], 0.5, &mut rng).into_data();
        let heads = (0..nq)
            .map(|_| Tensor::randn(&[cfg.vocab, TEACHER_HIDDEN], 1.0, &mut rng).into_data())
            .collect();
        let mut t = Self {
            w1,
            b1,
            heads,
            bias: vec![vec![0.0; cfg.vocab]; nq],
            vision: cfg.vision,
            vocab: cfg.vocab,
        };
        let pool: Vec<Tensor> = (0..CALIBRATION_POOL)
            .map(|_| Tensor::randn(&[vision_tokens, cfg.vision], 1.0, &mut rng))
            .collect();
        t.calibrate(&pool);
        t
    }

    fn hidden(&self, vision: &Tensor) -> Vec<f64> {
        let tv = vision.shape()[0];
        let mut mean = vec![0.0; self.vision];
        for row in vision.data().chunks(self.vision) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= tv as f64);
        (0..TEACHER_HIDDEN)
            .map(|j| {
                let w = &self.w1[j * self.vision..(j + 1) * self.vision];
                (w.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>() + self.b1[j]).tanh()
            })
            .collect()
    }

    fn scores(&self, hidden: &[f64], q: usize) -> Vec<f64> {
        let head = &self.heads[q];
        (0..self.vocab)
            .map(|c| {
                let w = &head[c * TEACHER_HIDDEN..(c + 1) * TEACHER_HIDDEN];
                w.iter().zip(hidden).map(|(a, b)| a * b).sum::<f64>() + self.bias[q][c]
            })
            .collect()
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0
    }

    pub fn label(&self, vision: &Tensor, question: Option<usize>) -> usize {
        let q = question.unwrap_or(0).min(self.heads.len() - 1);
        Self::argmax(&self.scores(&self.hidden(vision), q))
    }

    pub fn questions(&self) -> usize {
        self.heads.len()
    }

    /// Nudges each question's biases until argmax labels over `pool` are
    /// close to uniform.
    fn calibrate(&mut self, pool: &[Tensor]) {
        let hidden: Vec<Vec<f64>> = pool.iter().map(|v| self.hidden(v)).collect();
        let target = 1.0 / self.vocab as f64;
        for q in 0..self.heads.len() {
            for _ in 0..CALIBRATION_ROUNDS {
                let mut counts = vec![0usize; self.vocab];
                for h in &hidden {
                    counts[Self::argmax(&self.scores(h, q))] += 1;
                }
                for (c, &n) in counts.iter().enumerate() {
                    let freq = (n as f64 + 0.5) / (pool.len() as f64 + 0.5 * self.vocab as f64);
                    self.bias[q][c] += 0.5 * (target / freq).ln();
                }
            }
        }
    }
}

fn draw_item(teacher: &Teacher, kind: TaskKind, spec: &SyntheticTaskSpec, vocab: usize, rng: &mut ChaCha8Rng) -> Item {
    let vision = Tensor::randn(&[spec.vision_tokens, teacher.vision], 1.0, rng);
    let question = match kind {
        TaskKind::CaptionLike => None,
        TaskKind::VqaLike => Some(rng.random_range(0..teacher.questions())),
    };
    let mut label = teacher.label(&vision, question);
    if spec.noise > 0.0 && rng.random_bool(spec.noise) {
        label = rng.random_range(0..vocab);
    }
    Item { vision, question, label }
}

/// Deterministic by `teacher_seed`. Train items are drawn before validation
/// items from one stream, so the splits never share a sample.
pub fn gen_dataset(spec: &SyntheticTaskSpec, cfg: &FormerConfig) -> Result<Dataset> {
    spec.validate()?;
    let teacher = Teacher::new(cfg, spec.kind, spec.vision_tokens, spec.teacher_scale, spec.teacher_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.teacher_seed ^ 0x5eed_da7a);
    let train = (0..spec.train_size())
        .map(|_| draw_item(&teacher, spec.kind, spec, cfg.vocab, &mut rng))
        .collect();
    let val = (0..spec.n_val)
        .map(|_| draw_item(&teacher, spec.kind, spec, cfg.vocab, &mut rng))
        .collect();
    Ok(Dataset { train, val })
}

pub fn teacher_for(spec: &SyntheticTaskSpec, cfg: &FormerConfig) -> Teacher {
    Teacher::new(cfg, spec.kind, spec.vision_tokens, spec.teacher_scale, spec.teacher_seed)
}

/// Seeded permutation of `0..n`.
pub fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            n_train: 40,
            n_val: 20,
            ..SyntheticTaskSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let cfg = FormerConfig::default();
        let a = gen_dataset(&small(), &cfg).unwrap();
        let b = gen_dataset(&small(), &cfg).unwrap();
        for (x, y) in a.train.iter().zip(&b.train).chain(a.val.iter().zip(&b.val)) {
            assert!(x.vision.bit_eq(&y.vision));
            assert_eq!((x.question, x.label), (y.question, y.label));
        }
    }

    #[test]
    fn noiseless_labels_are_teacher_labels() {
        let cfg = FormerConfig::default();
        let spec = small();
        let d = gen_dataset(&spec, &cfg).unwrap();
        let t = teacher_for(&spec, &cfg);
        assert!(d.train.iter().chain(&d.val).all(|it| t.label(&it.vision, it.question) == it.label));
        assert!(d.train.iter().all(|it| it.question.is_some()));
    }

    #[test]
    fn few_shot_and_errors() {
        let cfg = FormerConfig::default();
        let spec = SyntheticTaskSpec {
            few_shot: Some(50),
            ..small()
        };
        assert_eq!(gen_dataset(&spec, &cfg).unwrap().train.len(), 50);
        let bad = SyntheticTaskSpec {
            few_shot: Some(60),
            ..small()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let empty = SyntheticTaskSpec { n_train: 0, ..small() };
        assert!(matches!(gen_dataset(&empty, &cfg), Err(Error::Contract(_))));
    }
}
