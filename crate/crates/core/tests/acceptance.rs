//! Runs every acceptance criterion and prints one PASS/FAIL line for each.
//! Exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use petal::budget::{petal_budget, BudgetDims};
use petal::checkpoint::{adapter_state, apply_adapter, decode, encode, load_adapter, save_adapter, Dtype};
use petal::config::RunConfig;
use petal::former::reference_logits;
use petal::gradsuite::{run_suite, TOLERANCE};
use petal::ib::mi_discrete;
use petal::model::{Ablation, Method};
use petal::moe::ExpertForm;
use petal::params::Parameters;
use petal::train::{evaluate, prepare, train};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_petal");

fn config_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn budget() -> Outcome {
    let t = Instant::now();
    let r = petal_budget(&BudgetDims::paper());
    let out = Command::new(BIN).args(["param-budget", "--paper-dims"]).output().unwrap();
    let elapsed = t.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let pass = r.paper_mode_subtotal == 1_056_768
        && r.former_part() == 761_856
        && r.expert_part() == 294_912
        && (0.005..=0.006).contains(&r.ratio)
        && out.status.success()
        && text.contains("1,056,768")
        && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "subtotal {} former {} experts {} ratio {:.4}% in {:.0} ms",
            r.paper_mode_subtotal,
            r.former_part(),
            r.expert_part(),
            100.0 * r.ratio,
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let results = run_suite(1).unwrap();
    let elapsed = t.elapsed();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed(TOLERANCE)).map(|r| r.name.as_str()).collect();
    outcome(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, max rel err {worst:.2e}, {} above {TOLERANCE:e}, {:.1} s",
            results.len(),
            failed.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn zero_delta() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut max_delta: f64 = 0.0;
    for form in [ExpertForm::Affine, ExpertForm::Bottleneck] {
        let mut cfg = RunConfig::default();
        cfg.model.expert_form = form;
        cfg.task.n_train = 16;
        cfg.task.n_val = 16;
        let (model, data) = prepare(&cfg).unwrap();
        let banks = model.banks.as_ref().unwrap();
        for bank in [&banks.self_bank, &banks.cross_bank] {
            let slots: Vec<_> = bank.slots().map(|(s, _)| s).collect();
            for m in bank.modalities() {
                for &s in &slots {
                    max_delta = max_delta.max(bank.delta_weight_value(m, s).unwrap().max_abs());
                }
            }
        }
        for it in data.train.iter().chain(&data.val) {
            let got = model.logits(&it.vision, it.question).unwrap();
            let instr = model.backbone.instruction_value(&model.template_ids, it.question).unwrap();
            let want = reference_logits(&model.backbone, &it.vision, &instr).unwrap();
            for (a, b) in got.data().iter().zip(&want) {
                worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-12));
            }
        }
    }
    outcome(
        worst <= 1e-9 && max_delta == 0.0,
        format!("max rel logit gap {worst:.2e}, max |dW| {max_delta:e}"),
    )
}

fn frozen_invariance() -> Outcome {
    let cfg = RunConfig::load(&config_path("toy.toml")).unwrap();
    let a = train(&cfg).unwrap().report;
    let b = train(&cfg).unwrap().report;
    let mut full = cfg.clone();
    full.train.method = Method::Full;
    full.train.epochs = 1;
    full.task.n_train = 32;
    let f = train(&full).unwrap().report;
    let frozen = a.backbone_hash_before == a.backbone_hash_after;
    let changed = f.backbone_hash_before != f.backbone_hash_after;
    let det = a.metrics_csv() == b.metrics_csv() && a.backbone_hash_after == b.backbone_hash_after;
    outcome(
        frozen && changed && det && a.epochs.len() == 6,
        format!("petal hash kept {frozen}, full hash changed {changed}, repeat identical {det}"),
    )
}

fn oracles() -> Outcome {
    let d = common::delta_oracle_gap(2024);
    let f = common::forward_oracle_gap(77);
    outcome(
        d <= 1e-12 && f <= 1e-9,
        format!("delta gap {d:.2e} (<= 1e-12), forward gap {f:.2e} (<= 1e-9)"),
    )
}

fn mutual_information() -> Outcome {
    // exact product table: every (z, y) pair equally often
    let z: Vec<usize> = (0..64).map(|i| i % 4).collect();
    let y: Vec<usize> = (0..64).map(|i| (i / 4) % 2).collect();
    let indep = mi_discrete(&z, &y).unwrap();

    let id: Vec<usize> = (0..400).map(|i| i % 4).collect();
    let ident = mi_discrete(&id, &id).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let n = 200_000;
    let x: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let noisy: Vec<usize> = x.iter().map(|&b| if rng.random_bool(0.25) { 1 - b } else { b }).collect();
    let h = |p: f64| -p * p.log2() - (1.0 - p) * (1.0 - p).log2();
    let want = 1.0 - h(0.25);
    let channel = mi_discrete(&x, &noisy).unwrap();

    let mut symmetric = true;
    let mut min_mi = f64::INFINITY;
    for _ in 0..200 {
        let len = rng.random_range(1..60);
        let a: Vec<usize> = (0..len).map(|_| rng.random_range(0..5)).collect();
        let b: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
        let ab = mi_discrete(&a, &b).unwrap();
        symmetric &= ab.to_bits() == mi_discrete(&b, &a).unwrap().to_bits();
        min_mi = min_mi.min(ab);
    }
    let pass = indep.abs() <= 1e-12
        && (ident - 2.0).abs() <= 1e-12
        && (channel - want).abs() <= 0.01
        && symmetric
        && min_mi >= -1e-12;
    outcome(
        pass,
        format!(
            "independent {indep:.2e}, identity {ident:.6}, channel {channel:.4} vs {want:.4}, symmetric {symmetric}, min {min_mi:.2e}"
        ),
    )
}

/// Peak learning rates picked on held-out seeds 101 and 102.
const PETAL_LR: f64 = 0.05;
const HEAD_LR: f64 = 0.003;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn relative_performance() -> Outcome {
    let t = Instant::now();
    let base = RunConfig::load(&config_path("reference.toml")).unwrap();
    let run = |method, ablation, lr, seed| {
        let mut c = base.clone();
        c.train.method = method;
        c.train.ablation = ablation;
        c.train.lr_peak = lr;
        c.train.seed = seed;
        train(&c).unwrap().report.final_val_accuracy()
    };
    let mut rows = Vec::new();
    for seed in SEEDS {
        let p = run(Method::Petal, Ablation::None, PETAL_LR, seed);
        let h = run(Method::Head, Ablation::None, HEAD_LR, seed);
        let v3 = run(Method::Petal, Ablation::V3, PETAL_LR, seed);
        rows.push((p, h, v3));
    }
    let elapsed = t.elapsed();
    let n = SEEDS.len() as f64;
    let mean = |f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let (mp, mh, mv) = (mean(|r| r.0), mean(|r| r.1), mean(|r| r.2));
    let over_head = rows.iter().filter(|r| r.0 >= r.1).count();
    let over_v3 = rows.iter().filter(|r| r.2 <= r.0).count();
    let pass = mp >= mh && mv <= mp && over_head >= 4 && over_v3 >= 4 && elapsed < Duration::from_secs(900);
    outcome(
        pass,
        format!(
            "mean val acc petal {mp:.4} head {mh:.4} v3 {mv:.4}; petal >= head on {over_head}/5, v3 <= petal on {over_v3}/5; {:.0} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn few_shot() -> Outcome {
    let mut ok = true;
    let mut sizes = Vec::new();
    for n in [50, 150] {
        let mut cfg = RunConfig::default();
        cfg.task.few_shot = Some(n);
        let a = train(&cfg).unwrap().report;
        let b = train(&cfg).unwrap().report;
        ok &= a.train_items == n && a.metrics_csv() == b.metrics_csv();
        sizes.push(a.train_items);
    }
    outcome(ok, format!("train items {sizes:?}, repeat reports identical {ok}"))
}

fn persistence() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 2;
    cfg.task.n_train = 64;
    cfg.task.n_val = 64;
    let out = train(&cfg).unwrap();
    let state = adapter_state(&out.model);
    let bytes = encode(&state, Dtype::F64).unwrap();
    let back = decode(&bytes).unwrap();
    let bitwise = back.len() == state.len() && state.iter().zip(&back).all(|((n1, a), (n2, b))| n1 == n2 && a.bit_eq(b));

    let mut caught = 0;
    for i in (0..bytes.len()).step_by(7) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x01;
        caught += usize::from(decode(&bad).is_err());
    }
    let probes = bytes.len().div_ceil(7);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_adapter(&state, &path, Dtype::F64).unwrap();
    let (mut fresh, data) = prepare(&cfg).unwrap();
    apply_adapter(&mut fresh, &load_adapter(&path).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    for it in &data.val {
        let a = out.model.logits(&it.vision, it.question).unwrap();
        let b = fresh.logits(&it.vision, it.question).unwrap();
        worst = worst.max(a.max_rel_diff(&b, 1e-12));
    }
    let same_eval = evaluate(&out.model, &data.val).unwrap().accuracy == evaluate(&fresh, &data.val).unwrap().accuracy;
    outcome(
        bitwise && caught == probes && worst <= 1e-9 && same_eval,
        format!(
            "{} tensors ({} trainable values) bitwise {bitwise}, corrupted {caught}/{probes} caught, resume gap {worst:.2e}",
            state.len(),
            out.model.trainable_count()
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(BIN)
            .args(["train", "--config"])
            .arg(config_path("toy.toml"))
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, String::from_utf8_lossy(&status.stderr).to_string());
        }
        csv.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    let same = csv[0] == csv[1];
    outcome(same, format!("metrics.csv {} bytes, identical {same}", csv[0].len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("budget exactness", budget),
        ("gradient suite", gradients),
        ("zero-delta start", zero_delta),
        ("frozen invariance", frozen_invariance),
        ("oracle equivalence", oracles),
        ("mutual information oracle", mutual_information),
        ("relative performance", relative_performance),
        ("few-shot protocol", few_shot),
        ("persistence", persistence),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f();
        failed += usize::from(!o.pass);
        println!(
            "criterion {:>2} {:<26} {}  {} [{:.1} s]",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
