use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;
use vcrd_core::dist::Categorical;
use vcrd_core::harness::{
    self, ablate, analyze_ratios, fit_student_sft, fit_teacher_policy, generate_data, prepare,
    run_distill, HarnessError, Prepared, RunConfig, Variant,
};
use vcrd_core::judge::TaskJudge;
use vcrd_core::policy::{load_checkpoint, save_checkpoint, TabularPolicy};
use vcrd_core::tasks::{final_answer_accuracy, read_dataset, write_dataset, TaskInstance};
use vcrd_core::trust_region::{
    solve_trust_region, verify_optimality, RewardVector, VerifyOptions, KL_TOLERANCE,
};

#[derive(Parser, Debug)]
#[command(
    name = "vcrd",
    version,
    about = "Validity-calibrated distillation of tabular policies"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rollout workers inside a run (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set alpha=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the train and probe splits as dataset files.
    GenData,
    /// Fit the teacher on the train split and save its checkpoint.
    TrainTeacher {
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Fit the warm-start student and save its checkpoint.
    SftStudent {
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Distill the student toward the teacher.
    Distill {
        #[command(flatten)]
        models: Models,
    },
    /// Final-answer accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        /// Dataset file; defaults to the probe split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reward-ratio distribution between teacher and student proposals.
    AnalyzeRatios {
        #[command(flatten)]
        models: Models,
    },
    /// Solve one teacher-anchored trust-region instance.
    TrustRegion {
        /// Comma-separated reference distribution.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        pi: Option<Vec<f64>>,
        /// Comma-separated reward per token.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        r: Option<Vec<f64>>,
        #[arg(long)]
        delta: Option<f64>,
        /// JSON file `{"pi": [...], "r": [...], "delta": x}`.
        #[arg(long, conflicts_with_all = ["pi", "r", "delta"])]
        payload: Option<PathBuf>,
        /// Also check optimality against sampled feasible distributions.
        #[arg(long)]
        verify: bool,
    },
    /// Run the ablation grid over several seeds.
    Ablate {
        /// Comma-separated subset of variants; all by default.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
}

#[derive(Args, Debug)]
struct Models {
    /// Teacher checkpoint; fitted from the config when absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Student checkpoint; the SFT student when absent.
    #[arg(long)]
    student: Option<PathBuf>,
    /// Train split dataset file.
    #[arg(long)]
    train: Option<PathBuf>,
}

struct UsageError(String);

impl std::fmt::Debug for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn load_run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => harness::load_config(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.set("workers", &w.to_string())?;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_policy(path: &Path) -> Result<TabularPolicy> {
    load_checkpoint(&read_text(path)?).with_context(|| format!("loading {}", path.display()))
}

fn train_split(
    cfg: &RunConfig,
    path: Option<&Path>,
) -> Result<(
    vcrd_core::tasks::TaskSpec,
    Vec<TaskInstance>,
    Vec<TaskInstance>,
)> {
    let (spec, train, probe) = generate_data(cfg)?;
    let train = match path {
        Some(p) => read_dataset(&spec, &read_text(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => train,
    };
    Ok((spec, train, probe))
}

/// Teacher, student and data, from checkpoints where given.
fn prepared_models(cfg: &RunConfig, models: &Models) -> Result<Prepared> {
    if models.teacher.is_none() && models.student.is_none() && models.train.is_none() {
        return Ok(prepare(cfg)?);
    }
    let (spec, train, probe) = train_split(cfg, models.train.as_deref())?;
    let teacher = match &models.teacher {
        Some(p) => load_policy(p)?,
        None => fit_teacher_policy(cfg, &spec, &train)?.0,
    };
    let student = match &models.student {
        Some(p) => load_policy(p)?,
        None => fit_student_sft(cfg, &spec, &train)?.0,
    };
    let teacher_probe_acc = final_answer_accuracy(&teacher, &probe)?;
    let student_probe_acc = final_answer_accuracy(&student, &probe)?;
    if teacher_probe_acc <= student_probe_acc {
        warn!("teacher probe accuracy {teacher_probe_acc:.4} does not exceed student {student_probe_acc:.4}");
    }
    Ok(Prepared {
        spec,
        train,
        probe,
        teacher,
        student,
        teacher_probe_acc,
        student_probe_acc,
    })
}

fn parse_payload(text: &str) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| usage(format!("payload: {e}")))?;
    let vec = |key: &str| -> Result<Vec<f64>> {
        v.get(key)
            .and_then(|x| x.as_array())
            .ok_or_else(|| usage(format!("payload: missing array {key:?}")))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| usage(format!("payload: non-numeric entry in {key:?}")))
            })
            .collect()
    };
    let delta = v
        .get("delta")
        .and_then(|x| x.as_f64())
        .ok_or_else(|| usage("payload: missing number \"delta\""))?;
    Ok((vec("pi")?, vec("r")?, delta))
}

fn fmt_vec(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| format!("{x:.10}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn run(cli: Cli) -> Result<()> {
    if let Command::TrustRegion {
        pi,
        r,
        delta,
        payload,
        verify,
    } = &cli.command
    {
        let (pi, r, delta) = match payload {
            Some(path) => parse_payload(&read_text(path)?)?,
            None => match (pi, r, delta) {
                (Some(pi), Some(r), Some(d)) => (pi.clone(), r.clone(), *d),
                _ => bail!(usage(
                    "trust-region needs --pi, --r and --delta, or --payload"
                )),
            },
        };
        let pi = Categorical::new(pi).map_err(|e| usage(format!("--pi: {e}")))?;
        let r = RewardVector::new(r).map_err(|e| usage(format!("--r: {e}")))?;
        let sol = solve_trust_region(&pi, &r, delta, KL_TOLERANCE)?;
        println!("eta = {:.10}", sol.eta);
        println!("achieved_kl = {:.10}", sol.achieved_kl);
        println!("expected_reward = {:.10}", sol.expected_reward);
        println!("active = {}", sol.active);
        println!("tilted = {}", fmt_vec(sol.tilted.probs()));
        if *verify {
            let seed = cli.common.seed.unwrap_or(0);
            let report = verify_optimality(
                &pi,
                &r,
                delta,
                &sol,
                VerifyOptions {
                    seed,
                    ..Default::default()
                },
            )?;
            println!(
                "verified = {} (accepted {}/{}, max_excess {:.3e}, stationarity_spread {:.3e})",
                report.passed,
                report.accepted_samples,
                report.proposed_samples,
                report.max_excess,
                report.stationarity_spread
            );
            if !report.passed {
                bail!("optimality check failed");
            }
        }
        return Ok(());
    }

    let cfg = load_run_config(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let (spec, train, probe) = generate_data(&cfg)?;
            let dir = out_dir(&cfg)?;
            write_text(&dir.join("train.txt"), &write_dataset(&spec, &train))?;
            write_text(&dir.join("probe.txt"), &write_dataset(&spec, &probe))?;
            println!(
                "wrote {} train and {} probe instances to {}",
                train.len(),
                probe.len(),
                dir.display()
            );
        }
        Command::TrainTeacher { train } => {
            let (spec, train, probe) = train_split(&cfg, train.as_deref())?;
            let (teacher, train_acc) = fit_teacher_policy(&cfg, &spec, &train)?;
            let probe_acc = final_answer_accuracy(&teacher, &probe)?;
            let path = out_dir(&cfg)?.join("teacher.ckpt");
            write_text(&path, &save_checkpoint(&teacher))?;
            println!(
                "teacher acc train={train_acc:.4} probe={probe_acc:.4} -> {}",
                path.display()
            );
        }
        Command::SftStudent { train } => {
            let (spec, train, probe) = train_split(&cfg, train.as_deref())?;
            let (student, train_acc) = fit_student_sft(&cfg, &spec, &train)?;
            let probe_acc = final_answer_accuracy(&student, &probe)?;
            let path = out_dir(&cfg)?.join("student_sft.ckpt");
            write_text(&path, &save_checkpoint(&student))?;
            println!(
                "sft student acc train={train_acc:.4} probe={probe_acc:.4} -> {}",
                path.display()
            );
        }
        Command::Distill { models } => {
            let prepared = prepared_models(&cfg, &models)?;
            let dir = out_dir(&cfg)?;
            let run = run_distill(&cfg, &prepared, Some(&dir))?;
            let t = &run.summary.terminal;
            println!(
                "run {}: eval acc {:.4} -> {:.4} (teacher {:.4}) in {}",
                run.summary.run_id,
                t.initial_eval_acc,
                t.final_eval_acc,
                t.teacher_probe_acc,
                dir.display()
            );
        }
        Command::Eval { policy, data } => {
            let (spec, _, probe) = generate_data(&cfg)?;
            let instances = match data {
                Some(p) => read_dataset(&spec, &read_text(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => probe,
            };
            let acc = final_answer_accuracy(&load_policy(&policy)?, &instances)?;
            println!("accuracy = {acc:.4} over {} instances", instances.len());
        }
        Command::AnalyzeRatios { models } => {
            let prepared = prepared_models(&cfg, &models)?;
            let judge = TaskJudge::new(cfg.judge_config(), Some(&prepared.teacher))?;
            let report = analyze_ratios(
                &prepared.teacher,
                &prepared.student,
                &prepared.probe,
                &judge,
                &cfg,
            )?;
            let dir = out_dir(&cfg)?;
            write_text(&dir.join("ratio_hist.csv"), &report.histogram_csv())?;
            write_text(&dir.join("ratio_summary.csv"), &report.summary_csv())?;
            print!("{}", report.summary_csv());
        }
        Command::Ablate { variants } => {
            let variants: Vec<Variant> = match variants {
                Some(names) => names
                    .iter()
                    .map(|n| n.parse())
                    .collect::<Result<_, HarnessError>>()?,
                None => Variant::ALL.to_vec(),
            };
            let report = ablate(&cfg, &variants)?;
            let dir = out_dir(&cfg)?;
            write_text(&dir.join("ablation.csv"), &report.to_csv())?;
            print!("{}", report.to_table());
        }
        Command::TrustRegion { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || e.downcast_ref::<HarnessError>()
                .is_some_and(HarnessError::is_usage)
    });
    if usage {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
