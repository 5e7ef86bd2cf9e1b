use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_petal");

fn petal(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = "[task]\nn_train = 24\nn_val = 8\n[train]\nepochs = 1\nbatch = 8\n";

#[test]
fn paper_budget_prints_the_subtotal() {
    let out = petal(&["param-budget", "--paper-dims"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("1,056,768"), "{text}");

    let csv = petal(&["param-budget", "--paper-dims", "--csv"]);
    assert!(String::from_utf8(csv.stdout).unwrap().contains("1056768"));
}

#[test]
fn budget_flags_conflict_and_parse() {
    assert_eq!(petal(&["param-budget", "--paper-dims", "--rank", "8"]).status.code(), Some(2));
    assert_eq!(petal(&["param-budget", "--expert-form", "sideways"]).status.code(), Some(2));
    assert!(petal(&["param-budget", "--expert-form", "affine", "--compare"]).status.success());
}

#[test]
fn grad_check_passes() {
    let out = petal(&["grad-check", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(petal(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(petal(&["bogus"]).status.code(), Some(2));
    assert_eq!(petal(&[]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(petal(&["train", "--config", cfg, "--few-shot", "60"]).status.code(), Some(2));
    assert_eq!(petal(&["train", "--config", cfg, "--method", "head", "--ablation", "v3"]).status.code(), Some(2));
}

#[test]
fn bad_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    assert_eq!(petal(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(4));
    let cfg = write_config(dir.path(), "[model]\nbogus = 1\n");
    let code = petal(&["train", "--config", cfg.to_str().unwrap()]).status.code();
    assert!(matches!(code, Some(2) | Some(4)), "{code:?}");
}

#[test]
fn train_is_repeatable_and_eval_reads_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let cfg = cfg.to_str().unwrap();
    let mut csv = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let r = petal(&["train", "--config", cfg, "--out", out.to_str().unwrap()]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        for f in ["metrics.csv", "config.toml", "checkpoint.bin"] {
            assert!(out.join(f).exists(), "{f}");
        }
        csv.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csv[0], csv[1]);

    let a = dir.path().join("a");
    let ckpt = a.join("checkpoint.bin");
    let eval_dir = dir.path().join("eval");
    let r = petal(&[
        "eval",
        "--config",
        cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    // the evaluated val row equals the last val row of training
    let trained = String::from_utf8(csv.remove(0)).unwrap();
    let last_val = trained.lines().last().unwrap().split(',').skip(2).collect::<Vec<_>>().join(",");
    let eval = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    let eval_val = eval.lines().last().unwrap().split(',').skip(2).collect::<Vec<_>>().join(",");
    assert_eq!(last_val, eval_val);

    // damaged checkpoint
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[20] ^= 0x40;
    std::fs::write(&ckpt, &bytes).unwrap();
    let r = petal(&["eval", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(4));

    // checkpoint from a different rank
    let other = dir.path().join("r8");
    assert!(petal(&["train", "--config", cfg, "--rank", "8", "--out", other.to_str().unwrap()]).status.success());
    let r = petal(&[
        "eval",
        "--config",
        cfg,
        "--checkpoint",
        other.join("checkpoint.bin").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains(".U"));
}

#[test]
fn dump_sweep_and_ablate_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();

    assert!(petal(&["dump-attention", "--config", cfg, "--out", o]).status.success());
    let rows = std::fs::read_to_string(out.join("attention.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2 * 4 * 8);
    assert_eq!(petal(&["dump-attention", "--config", cfg, "--out", o, "--item", "99"]).status.code(), Some(2));

    assert!(petal(&["sweep-experts", "--config", cfg, "--out", o, "--ks", "1,2"]).status.success());
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next(), Some("K,accuracy,loss"));
    assert_eq!(sweep.lines().count(), 3);

    assert!(petal(&["ablate", "--config", cfg, "--out", o]).status.success());
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 6);
    assert!(out.join("v3").join("metrics.csv").exists());
}
