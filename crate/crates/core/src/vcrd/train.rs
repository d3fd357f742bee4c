use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;

use super::{
    lv_skl_loss, lv_srkl_loss, total_loss, validity_weights, LossBreakdown, Regime, Result,
    RolloutPair, TrainConfig, VcrdError, WeightContext, WeightSeries,
};
use crate::judge::ValidityJudge;
use crate::policy::{apply_update, GradTable, OptimizerState, TabularPolicy};
use crate::rng::{self, domain};
use crate::tasks::{final_answer_accuracy, TaskInstance};

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub iteration: usize,
    pub lv_skl: f64,
    pub lv_srkl: f64,
    pub total: f64,
    pub mean_w_teacher: f64,
    pub mean_w_student: f64,
    pub f_parity: f64,
    pub f_atten: f64,
    pub f_amp: f64,
    pub eval_acc: Option<f64>,
    pub ms: u64,
}

/// A logged weight with the scores it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightLogRow {
    pub iteration: usize,
    pub prompt: usize,
    pub position: usize,
    /// `"teacher"` or `"student"`.
    pub prefix: &'static str,
    pub r_s: Option<f64>,
    pub r_t: Option<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptResult {
    /// Index into the training set.
    pub prompt_index: usize,
    pub pair: RolloutPair,
    pub weights: WeightSeries,
    pub breakdown: LossBreakdown,
    pub grad: GradTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub prompts: Vec<PromptResult>,
    /// Batch mean; per-position entries are scaled by `1 / batch` so they
    /// still sum to the loss.
    pub mean: LossBreakdown,
    pub grad: GradTable,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: TabularPolicy,
    pub records: Vec<MetricRecord>,
    pub initial_eval: f64,
    pub final_eval: f64,
}

/// Training-set indices for one iteration, ascending.
fn minibatch(n: usize, batch: usize, seed: u64, iteration: usize) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut r = rng::stream(seed, &[domain::MINIBATCH, iteration as u64]);
    let mut picked = index::sample(&mut r, n, batch).into_vec();
    picked.sort_unstable();
    picked
}

fn prompt_step<J: ValidityJudge + ?Sized>(
    teacher: &TabularPolicy,
    student: &TabularPolicy,
    instance: &TaskInstance,
    prompt_index: usize,
    judge: &J,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<PromptResult> {
    let coords = |d: u64| [d, iteration as u64, prompt_index as u64];
    let horizon = instance.horizon();
    let y_t = teacher.sample_rollout(
        &instance.prompt,
        horizon,
        &mut rng::stream(cfg.seed, &coords(domain::ROLLOUT_TEACHER)),
    )?;
    let y_s = student.sample_rollout(
        &instance.prompt,
        horizon,
        &mut rng::stream(cfg.seed, &coords(domain::ROLLOUT_STUDENT)),
    )?;
    let pair = RolloutPair::new(y_t, y_s)?;
    let ctx = WeightContext {
        judge,
        instance,
        teacher,
        student,
    };
    let weights = validity_weights(
        &ctx,
        &pair,
        cfg,
        &mut rng::stream(cfg.seed, &coords(domain::PROPOSAL)),
    )?;
    let skl = lv_skl_loss(
        teacher,
        student,
        &pair.teacher,
        &weights.w_teacher,
        cfg.alpha,
    )?;
    let srkl = lv_srkl_loss(
        teacher,
        student,
        &pair.student,
        &weights.w_student,
        cfg.alpha,
    )?;
    let (breakdown, grad) = total_loss(&skl, &srkl, cfg.lambda_teacher, cfg.lambda_student)?;
    Ok(PromptResult {
        prompt_index,
        pair,
        weights,
        breakdown,
        grad,
    })
}

fn batch_step_in<J: ValidityJudge + ?Sized>(
    pool: Option<&rayon::ThreadPool>,
    teacher: &TabularPolicy,
    student: &TabularPolicy,
    train: &[TaskInstance],
    judge: &J,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<BatchResult> {
    if train.is_empty() {
        return Err(VcrdError::EmptyTrainingSet);
    }
    let picked = minibatch(train.len(), cfg.batch_size, cfg.seed, iteration);
    let run = |&i: &usize| prompt_step(teacher, student, &train[i], i, judge, cfg, iteration);
    let results: Vec<Result<PromptResult>> = match pool {
        Some(pool) => pool.install(|| picked.par_iter().map(run).collect()),
        None => picked.iter().map(run).collect(),
    };
    let prompts = results.into_iter().collect::<Result<Vec<_>>>()?;

    let inv_b = 1.0 / prompts.len() as f64;
    let mut mean = LossBreakdown {
        lv_skl: 0.0,
        lv_srkl: 0.0,
        total: 0.0,
        skl_positions: Vec::new(),
        srkl_positions: Vec::new(),
    };
    let mut grad = GradTable::new();
    for p in &prompts {
        let b = &p.breakdown;
        mean.lv_skl += b.lv_skl * inv_b;
        mean.lv_srkl += b.lv_srkl * inv_b;
        mean.total += b.total * inv_b;
        mean.skl_positions
            .extend(b.skl_positions.iter().map(|x| x * inv_b));
        mean.srkl_positions
            .extend(b.srkl_positions.iter().map(|x| x * inv_b));
        grad.merge_scaled(&p.grad, inv_b);
    }
    Ok(BatchResult {
        prompts,
        mean,
        grad,
    })
}

/// Rollouts, weights and losses for one iteration's minibatch, evaluated
/// serially.
pub fn batch_step<J: ValidityJudge + ?Sized>(
    teacher: &TabularPolicy,
    student: &TabularPolicy,
    train: &[TaskInstance],
    judge: &J,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<BatchResult> {
    batch_step_in(None, teacher, student, train, judge, cfg, iteration)
}

fn summarize(iteration: usize, batch: &BatchResult, ms: u64) -> MetricRecord {
    let mut sum_t = 0.0;
    let mut sum_s = 0.0;
    let mut n_t = 0usize;
    let mut n_s = 0usize;
    let mut counts = [0usize; 3];
    for p in &batch.prompts {
        let w = &p.weights;
        sum_t += w.w_teacher.iter().sum::<f64>();
        sum_s += w.w_student.iter().sum::<f64>();
        n_t += w.w_teacher.len();
        n_s += w.w_student.len();
        for r in w.regimes_teacher.iter().chain(&w.regimes_student) {
            counts[match r {
                Regime::Parity => 0,
                Regime::Attenuation => 1,
                Regime::Amplification => 2,
            }] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let frac = |c: usize| {
        if total == 0 {
            0.0
        } else {
            c as f64 / total as f64
        }
    };
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    MetricRecord {
        iteration,
        lv_skl: batch.mean.lv_skl,
        lv_srkl: batch.mean.lv_srkl,
        total: batch.mean.total,
        mean_w_teacher: mean(sum_t, n_t),
        mean_w_student: mean(sum_s, n_s),
        f_parity: frac(counts[0]),
        f_atten: frac(counts[1]),
        f_amp: frac(counts[2]),
        eval_acc: None,
        ms,
    }
}

fn weight_rows(iteration: usize, batch: &BatchResult) -> Vec<WeightLogRow> {
    let mut rows = Vec::new();
    for p in &batch.prompts {
        let w = &p.weights;
        for (prefix, weights, scores) in [
            ("teacher", &w.w_teacher, &w.scores_teacher),
            ("student", &w.w_student, &w.scores_student),
        ] {
            for (position, (&weight, score)) in weights.iter().zip(scores).enumerate() {
                rows.push(WeightLogRow {
                    iteration,
                    prompt: p.prompt_index,
                    position,
                    prefix,
                    r_s: score.map(|s| s.r_s),
                    r_t: score.map(|s| s.r_t),
                    weight,
                });
            }
        }
    }
    rows
}

/// Runs the distillation loop.
///
/// Each iteration draws a minibatch, rolls out teacher and student once per
/// prompt, weights and scores both prefixes, and takes one optimizer step on
/// the batch-mean objective. `sink` receives every metric row (and the
/// iteration's weight log when `log_weights` is set) as soon as it exists.
pub fn distill<J, F>(
    teacher: &TabularPolicy,
    mut student: TabularPolicy,
    train: &[TaskInstance],
    probe: &[TaskInstance],
    judge: &J,
    cfg: &TrainConfig,
    mut sink: F,
) -> Result<DistillOutcome>
where
    J: ValidityJudge + ?Sized,
    F: FnMut(&MetricRecord, &[WeightLogRow]) -> std::result::Result<(), String>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(VcrdError::EmptyTrainingSet);
    }
    let pool = if cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| VcrdError::InvalidConfig(format!("worker pool: {e}")))?,
        )
    } else {
        None
    };
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate)?;
    let initial_eval = final_answer_accuracy(&student, probe)?;
    let mut final_eval = initial_eval;
    let mut records = Vec::with_capacity(cfg.iterations);

    for iteration in 1..=cfg.iterations {
        let started = Instant::now();
        let batch = batch_step_in(
            pool.as_ref(),
            teacher,
            &student,
            train,
            judge,
            cfg,
            iteration,
        )?;
        if !batch.mean.total.is_finite() || !batch.grad.max_abs().is_finite() {
            let worst = batch
                .prompts
                .iter()
                .find(|p| !p.breakdown.total.is_finite() || !p.grad.max_abs().is_finite())
                .map(|p| {
                    format!(
                        "prompt {} lv_skl={} lv_srkl={}",
                        p.prompt_index, p.breakdown.lv_skl, p.breakdown.lv_srkl
                    )
                })
                .unwrap_or_else(|| "batch gradient overflow".into());
            return Err(VcrdError::NonFinite {
                iteration,
                diagnostics: worst,
            });
        }
        apply_update(&mut student, &batch.grad, &mut opt)?;

        let ms = if cfg.record_wall_clock {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        let mut record = summarize(iteration, &batch, ms);
        if iteration % cfg.eval_every == 0 || iteration == cfg.iterations {
            let acc = final_answer_accuracy(&student, probe)?;
            record.eval_acc = Some(acc);
            final_eval = acc;
        }
        let rows = if cfg.log_weights {
            weight_rows(iteration, &batch)
        } else {
            Vec::new()
        };
        sink(&record, &rows).map_err(VcrdError::Sink)?;
        records.push(record);
    }
    Ok(DistillOutcome {
        student,
        records,
        initial_eval,
        final_eval,
    })
}
