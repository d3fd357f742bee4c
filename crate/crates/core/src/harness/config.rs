//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys and repeated keys are errors.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::dist::SkewParam;
use crate::judge::{JudgeConfig, JudgeKind};
use crate::policy::OptimizerKind;
use crate::tasks::{TaskKind, TaskSpec};
use crate::vcrd::{TokenSource, TrainConfig, WeightRule};

use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task_kind: TaskKind,
    pub modulus: usize,
    pub chain_length: usize,
    pub operand_count: usize,
    pub train_size: usize,
    pub probe_size: usize,

    pub teacher_window: usize,
    pub student_window: usize,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub sft_epochs: usize,
    pub sft_lr: f64,

    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub alpha: f64,
    pub lambda_teacher: f64,
    pub lambda_student: f64,
    pub epsilon: f64,
    pub weight_rule: WeightRule,
    pub clamp_amplification: bool,
    pub weight_token_source: TokenSource,
    pub parity_band: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub eval_every: usize,
    pub workers: usize,
    pub log_weights: bool,
    pub record_wall_clock: bool,

    pub judge_kind: JudgeKind,
    pub r_floor: f64,
    pub noise_scale: f64,
    pub prm_k: usize,
    pub prm_gamma: f64,
    pub prm_clamp_lo: f64,
    pub prm_clamp_hi: f64,
    pub prm_epsilon: f64,

    pub hist_bins: usize,
    pub hist_lo: f64,
    pub hist_hi: f64,
    pub ablate_seeds: usize,

    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    /// The multipath reference configuration.
    fn default() -> Self {
        Self {
            task_kind: TaskKind::Multipath,
            modulus: 5,
            chain_length: 2,
            operand_count: 2,
            train_size: 200,
            probe_size: 200,

            teacher_window: 6,
            student_window: 5,
            teacher_epochs: 30,
            teacher_lr: 0.5,
            sft_epochs: 3,
            sft_lr: 0.5,

            optimizer: OptimizerKind::Adam,
            learning_rate: 0.05,
            alpha: 0.1,
            lambda_teacher: 1.0,
            lambda_student: 1.0,
            epsilon: 1e-8,
            weight_rule: WeightRule::Ratio,
            clamp_amplification: false,
            weight_token_source: TokenSource::Rollout,
            parity_band: 0.05,
            batch_size: 16,
            iterations: 200,
            eval_every: 20,
            workers: 1,
            log_weights: false,
            record_wall_clock: false,

            judge_kind: JudgeKind::Oracle,
            r_floor: 0.1,
            noise_scale: 0.0,
            prm_k: 128,
            prm_gamma: 0.5,
            prm_clamp_lo: 0.5,
            prm_clamp_hi: 2.0,
            prm_epsilon: 1e-8,

            hist_bins: 40,
            hist_lo: 0.01,
            hist_hi: 100.0,
            ablate_seeds: 5,

            seed: 0,
            out_dir: "out".to_string(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| HarnessError::Config(format!("{key}: {e}")))
}

fn parse_optimizer(key: &str, value: &str) -> Result<OptimizerKind, HarnessError> {
    match value {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        other => Err(HarnessError::Config(format!(
            "{key}: unknown optimizer {other:?} (sgd|adam)"
        ))),
    }
}

fn optimizer_name(kind: OptimizerKind) -> &'static str {
    match kind {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam => "adam",
    }
}

macro_rules! config_keys {
    ($($key:ident),* $(,)?) => {
        /// Every accepted key, in echo order.
        pub const KEYS: &[&str] = &[$(stringify!($key)),*];
    };
}

config_keys!(
    task_kind,
    modulus,
    chain_length,
    operand_count,
    train_size,
    probe_size,
    teacher_window,
    student_window,
    teacher_epochs,
    teacher_lr,
    sft_epochs,
    sft_lr,
    optimizer,
    learning_rate,
    alpha,
    lambda_teacher,
    lambda_student,
    epsilon,
    weight_rule,
    clamp_amplification,
    weight_token_source,
    parity_band,
    batch_size,
    iterations,
    eval_every,
    workers,
    log_weights,
    record_wall_clock,
    judge_kind,
    r_floor,
    noise_scale,
    prm_k,
    prm_gamma,
    prm_clamp_lo,
    prm_clamp_hi,
    prm_epsilon,
    hist_bins,
    hist_lo,
    hist_hi,
    ablate_seeds,
    seed,
    out_dir,
);

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value.trim();
        match key {
            "task_kind" => self.task_kind = parse(key, v)?,
            "modulus" => self.modulus = parse(key, v)?,
            "chain_length" => self.chain_length = parse(key, v)?,
            "operand_count" => self.operand_count = parse(key, v)?,
            "train_size" => self.train_size = parse(key, v)?,
            "probe_size" => self.probe_size = parse(key, v)?,
            "teacher_window" => self.teacher_window = parse(key, v)?,
            "student_window" => self.student_window = parse(key, v)?,
            "teacher_epochs" => self.teacher_epochs = parse(key, v)?,
            "teacher_lr" => self.teacher_lr = parse(key, v)?,
            "sft_epochs" => self.sft_epochs = parse(key, v)?,
            "sft_lr" => self.sft_lr = parse(key, v)?,
            "optimizer" => self.optimizer = parse_optimizer(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "lambda_teacher" => self.lambda_teacher = parse(key, v)?,
            "lambda_student" => self.lambda_student = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "weight_rule" => self.weight_rule = parse(key, v)?,
            "clamp_amplification" => self.clamp_amplification = parse(key, v)?,
            "weight_token_source" => self.weight_token_source = parse(key, v)?,
            "parity_band" => self.parity_band = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "log_weights" => self.log_weights = parse(key, v)?,
            "record_wall_clock" => self.record_wall_clock = parse(key, v)?,
            "judge_kind" => self.judge_kind = parse(key, v)?,
            "r_floor" => self.r_floor = parse(key, v)?,
            "noise_scale" => self.noise_scale = parse(key, v)?,
            "prm_k" => self.prm_k = parse(key, v)?,
            "prm_gamma" => self.prm_gamma = parse(key, v)?,
            "prm_clamp_lo" => self.prm_clamp_lo = parse(key, v)?,
            "prm_clamp_hi" => self.prm_clamp_hi = parse(key, v)?,
            "prm_epsilon" => self.prm_epsilon = parse(key, v)?,
            "hist_bins" => self.hist_bins = parse(key, v)?,
            "hist_lo" => self.hist_lo = parse(key, v)?,
            "hist_hi" => self.hist_hi = parse(key, v)?,
            "ablate_seeds" => self.ablate_seeds = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Textual value of one key, in a form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "task_kind" => self.task_kind.to_string(),
            "modulus" => self.modulus.to_string(),
            "chain_length" => self.chain_length.to_string(),
            "operand_count" => self.operand_count.to_string(),
            "train_size" => self.train_size.to_string(),
            "probe_size" => self.probe_size.to_string(),
            "teacher_window" => self.teacher_window.to_string(),
            "student_window" => self.student_window.to_string(),
            "teacher_epochs" => self.teacher_epochs.to_string(),
            "teacher_lr" => self.teacher_lr.to_string(),
            "sft_epochs" => self.sft_epochs.to_string(),
            "sft_lr" => self.sft_lr.to_string(),
            "optimizer" => optimizer_name(self.optimizer).to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "alpha" => self.alpha.to_string(),
            "lambda_teacher" => self.lambda_teacher.to_string(),
            "lambda_student" => self.lambda_student.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "weight_rule" => self.weight_rule.to_string(),
            "clamp_amplification" => self.clamp_amplification.to_string(),
            "weight_token_source" => self.weight_token_source.to_string(),
            "parity_band" => self.parity_band.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "iterations" => self.iterations.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "workers" => self.workers.to_string(),
            "log_weights" => self.log_weights.to_string(),
            "record_wall_clock" => self.record_wall_clock.to_string(),
            "judge_kind" => self.judge_kind.to_string(),
            "r_floor" => self.r_floor.to_string(),
            "noise_scale" => self.noise_scale.to_string(),
            "prm_k" => self.prm_k.to_string(),
            "prm_gamma" => self.prm_gamma.to_string(),
            "prm_clamp_lo" => self.prm_clamp_lo.to_string(),
            "prm_clamp_hi" => self.prm_clamp_hi.to_string(),
            "prm_epsilon" => self.prm_epsilon.to_string(),
            "hist_bins" => self.hist_bins.to_string(),
            "hist_lo" => self.hist_lo.to_string(),
            "hist_hi" => self.hist_hi.to_string(),
            "ablate_seeds" => self.ablate_seeds.to_string(),
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.clone(),
            _ => return None,
        })
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected `key = value`", i + 1))
            })?;
            let key = key.trim();
            if let Some(prev) = seen.insert(key.to_string(), i + 1) {
                return Err(HarnessError::Config(format!(
                    "line {}: key {key:?} already set on line {prev}",
                    i + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    /// Every key with its current value.
    pub fn echo(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }

    /// Config file text that parses back to `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn task_spec(&self) -> Result<TaskSpec, HarnessError> {
        Ok(TaskSpec::new(
            self.task_kind,
            self.modulus,
            self.chain_length,
            self.operand_count,
        )?)
    }

    pub fn judge_config(&self) -> JudgeConfig {
        JudgeConfig {
            kind: self.judge_kind,
            r_floor: self.r_floor,
            noise_scale: self.noise_scale,
            noise_seed: self.seed,
            prm_k: self.prm_k,
            prm_gamma: self.prm_gamma,
            prm_clamp_lo: self.prm_clamp_lo,
            prm_clamp_hi: self.prm_clamp_hi,
            prm_epsilon: self.prm_epsilon,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, HarnessError> {
        Ok(TrainConfig {
            lambda_teacher: self.lambda_teacher,
            lambda_student: self.lambda_student,
            alpha: SkewParam::new(self.alpha)
                .map_err(|e| HarnessError::Config(format!("alpha: {e}")))?,
            epsilon: self.epsilon,
            weight_rule: self.weight_rule,
            clamp_amplification: self.clamp_amplification,
            weight_token_source: self.weight_token_source,
            parity_band: self.parity_band,
            batch_size: self.batch_size,
            iterations: self.iterations,
            eval_every: self.eval_every,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            workers: self.workers,
            seed: self.seed,
            log_weights: self.log_weights,
            record_wall_clock: self.record_wall_clock,
            prm: self.judge_config(),
        })
    }

    /// Checks every derived config and the cross-field constraints.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let spec = self.task_spec()?;
        self.judge_config()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train_config()?
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.teacher_window < spec.min_window() {
            return bad(format!(
                "teacher_window {} cannot represent the task; needs >= {}",
                self.teacher_window,
                spec.min_window()
            ));
        }
        if self.student_window == 0 {
            return bad("student_window must be >= 1".into());
        }
        if self.train_size == 0 {
            return bad("train_size must be >= 1".into());
        }
        for (k, lr) in [("teacher_lr", self.teacher_lr), ("sft_lr", self.sft_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{k} must be > 0, got {lr}"));
            }
        }
        if self.hist_bins == 0 || !(self.hist_lo > 0.0 && self.hist_hi > self.hist_lo) {
            return bad("histogram needs hist_bins >= 1 and 0 < hist_lo < hist_hi".into());
        }
        if self.ablate_seeds == 0 {
            return bad("ablate_seeds must be >= 1".into());
        }
        Ok(())
    }
}
