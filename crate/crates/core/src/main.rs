use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use petal::budget::{compare_budgets, comparison_text, petal_budget_with, BudgetDims};
use petal::checkpoint::{adapter_state, apply_adapter, load_adapter, save_adapter, Dtype};
use petal::config::RunConfig;
use petal::former::dump_attention;
use petal::gradsuite::{run_suite, TOLERANCE};
use petal::model::{Ablation, Method};
use petal::moe::ExpertForm;
use petal::train::{evaluate, prepare, sweep_csv, sweep_experts, train_model, RunReport};
use petal::{Error, Result, Tape};

#[derive(Parser)]
#[command(name = "petal", version, about = "Parameter-efficient adapters on a toy query transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write checkpoint, metrics and config echo
    Train(RunArgs),
    /// Evaluate a saved adapter checkpoint
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient suite on the toy model
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = TOLERANCE)]
        tolerance: f64,
    },
    /// Closed-form trainable-parameter report
    ParamBudget(BudgetArgs),
    /// Train once per expert count and tabulate final validation metrics
    SweepExperts {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
        ks: Vec<usize>,
    },
    /// Write cross-attention weights of one validation item as CSV
    DumpAttention {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        item: usize,
    },
    /// Train every ablation variant and tabulate final validation metrics
    Ablate(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["50", "150"]))]
    few_shot: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Store checkpoints as f32 instead of f64
    #[arg(long)]
    f32: bool,
}

#[derive(Args)]
struct BudgetArgs {
    /// H_v=1408 H_t=768 R=64 M=64 K=3
    #[arg(long, conflicts_with_all = ["h_v", "h_t", "rank", "middle", "experts"])]
    paper_dims: bool,
    #[arg(long, default_value_t = 56)]
    h_v: u64,
    #[arg(long, default_value_t = 32)]
    h_t: u64,
    #[arg(long, default_value_t = 4)]
    rank: u64,
    #[arg(long, default_value_t = 4)]
    middle: u64,
    #[arg(long, default_value_t = 3)]
    experts: u64,
    #[arg(long)]
    d_p: Option<u64>,
    #[arg(long, default_value = "bottleneck")]
    expert_form: ExpertForm,
    #[arg(long)]
    csv: bool,
    /// Append the per-method comparison rows
    #[arg(long)]
    compare: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(m) = self.method {
            cfg.train.method = m;
        }
        if let Some(a) = self.ablation {
            cfg.train.ablation = a;
        }
        if let Some(k) = self.experts {
            cfg.model.experts = k;
        }
        if let Some(r) = self.rank {
            cfg.model.rank = r;
        }
        if let Some(n) = &self.few_shot {
            cfg.task.few_shot = Some(n.parse().expect("validated by clap"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn dtype(&self) -> Dtype {
        if self.f32 {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }
}

fn write_run(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), report.metrics_csv())?;
    fs::write(dir.join("config.toml"), &report.config_echo)?;
    Ok(())
}

fn print_report(r: &RunReport) {
    println!(
        "method {} ablation {} seed {} trainable {} items {} steps {}",
        r.method, r.ablation, r.seed, r.trainable_params, r.train_items, r.steps
    );
    for e in &r.epochs {
        println!(
            "epoch {:>3}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}",
            e.epoch, e.train.loss, e.train.accuracy, e.val.loss, e.val.accuracy
        );
    }
    println!("wall time {:.2}s", r.wall_time.as_secs_f64());
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let (mut model, data) = prepare(&cfg)?;
    let report = train_model(&mut model, &data, &cfg)?;
    write_run(&args.out, &report)?;
    save_adapter(&adapter_state(&model), &args.out.join("checkpoint.bin"), args.dtype())?;
    print_report(&report);
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: &RunArgs, checkpoint: &Path) -> Result<()> {
    let cfg = args.config()?;
    let (mut model, data) = prepare(&cfg)?;
    apply_adapter(&mut model, &load_adapter(checkpoint)?)?;
    let train = evaluate(&model, &data.train)?;
    let val = evaluate(&model, &data.val)?;
    let csv = format!(
        "{}\n0,train,{:.12},{:.6}\n0,val,{:.12},{:.6}\n",
        petal::train::METRICS_HEADER,
        train.loss,
        train.accuracy,
        val.loss,
        val.accuracy
    );
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_grad_check(seed: u64, tol: f64) -> Result<()> {
    let results = run_suite(seed)?;
    let mut failed = 0;
    for r in &results {
        let ok = r.passed(tol);
        failed += usize::from(!ok);
        println!("{} {:<48} max rel err {:.3e}", if ok { "ok  " } else { "FAIL" }, r.name, r.max_rel_err);
    }
    if failed > 0 {
        return Err(Error::Invariant(format!("{failed} gradient checks above {tol:e}")));
    }
    println!("all {} checks within {tol:e}", results.len());
    Ok(())
}

fn cmd_budget(a: &BudgetArgs) {
    let base = if a.paper_dims {
        BudgetDims::paper()
    } else {
        BudgetDims::new(a.h_v, a.h_t, a.rank, a.middle, a.experts)
    };
    let dims = BudgetDims {
        d_p: a.d_p.unwrap_or(base.d_p),
        ..base
    };
    let report = petal_budget_with(&dims, a.expert_form);
    if a.csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.to_text());
    }
    if a.compare {
        print!("{}", comparison_text(&compare_budgets(&dims)));
    }
}

fn cmd_sweep(args: &RunArgs, ks: &[usize]) -> Result<()> {
    let cfg = args.config()?;
    let rows = sweep_experts(&cfg, ks)?;
    let csv = sweep_csv(&rows);
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_dump(args: &RunArgs, checkpoint: Option<&Path>, item: usize) -> Result<()> {
    let cfg = args.config()?;
    let (mut model, data) = prepare(&cfg)?;
    if let Some(p) = checkpoint {
        apply_adapter(&mut model, &load_adapter(p)?)?;
    }
    let it = data.val.get(item).ok_or_else(|| Error::Lookup {
        kind: "validation item",
        name: item.to_string(),
    })?;
    let mut tape = Tape::new();
    let out = model.forward_sample(&mut tape, &it.vision, it.question)?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("attention.csv");
    dump_attention(&out.former.attention, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let base = args.config()?;
    let mut table = String::from("ablation,trainable,accuracy,loss\n");
    for ab in Ablation::ALL {
        let mut cfg = base.clone();
        cfg.train.method = Method::Petal;
        cfg.train.ablation = ab;
        let (mut model, data) = prepare(&cfg)?;
        let report = train_model(&mut model, &data, &cfg)?;
        write_run(&args.out.join(ab.as_str()), &report)?;
        let last = report.last().val;
        table.push_str(&format!("{},{},{:.6},{:.12}\n", ab, report.trainable_params, last.accuracy, last.loss));
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Corruption { .. } => 4,
        Error::Config(_) | Error::Lookup { .. } | Error::Incompatible { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval { run, checkpoint } => cmd_eval(run, checkpoint),
        Command::GradCheck { seed, tolerance } => cmd_grad_check(*seed, *tolerance),
        Command::ParamBudget(a) => {
            cmd_budget(a);
            Ok(())
        }
        Command::SweepExperts { run, ks } => cmd_sweep(run, ks),
        Command::DumpAttention { run, checkpoint, item } => cmd_dump(run, checkpoint.as_deref(), *item),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
