use std::path::Path;

use log::info;

use super::metrics::{run_id, MetricsWriter, Summary, TerminalMetrics, WeightsWriter};
use super::{HarnessError, Result, RunConfig};
use crate::judge::TaskJudge;
use crate::policy::{save_checkpoint, TabularPolicy};
use crate::rng;
use crate::tasks::{
    final_answer_accuracy, fit_supervised, fit_teacher, generate, generate_one, TaskInstance,
    TaskSpec,
};
use crate::vcrd::{distill, DistillOutcome};

/// Train and probe splits. Probe instances continue the train index range, so
/// the two never share a generator coordinate.
pub fn generate_data(cfg: &RunConfig) -> Result<(TaskSpec, Vec<TaskInstance>, Vec<TaskInstance>)> {
    let spec = cfg.task_spec()?;
    let train = generate(&spec, cfg.seed, cfg.train_size);
    let start = cfg.train_size as u64;
    let probe = (start..start + cfg.probe_size as u64)
        .map(|i| generate_one(&spec, cfg.seed, i))
        .collect();
    Ok((spec, train, probe))
}

pub fn fit_teacher_policy(
    cfg: &RunConfig,
    spec: &TaskSpec,
    train: &[TaskInstance],
) -> Result<(TabularPolicy, f64)> {
    Ok(fit_teacher(
        spec,
        train,
        cfg.teacher_window,
        cfg.teacher_epochs,
        cfg.teacher_lr,
        cfg.seed,
    )?)
}

/// Supervised warm start for the student; zero epochs gives the uniform policy.
pub fn fit_student_sft(
    cfg: &RunConfig,
    spec: &TaskSpec,
    train: &[TaskInstance],
) -> Result<(TabularPolicy, f64)> {
    Ok(fit_supervised(
        spec,
        train,
        cfg.student_window,
        cfg.sft_epochs,
        cfg.sft_lr,
        rng::derive_key(cfg.seed, &[1]),
    )?)
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: TaskSpec,
    pub train: Vec<TaskInstance>,
    pub probe: Vec<TaskInstance>,
    pub teacher: TabularPolicy,
    pub student: TabularPolicy,
    pub teacher_probe_acc: f64,
    pub student_probe_acc: f64,
}

/// Data, teacher and SFT student for one seed. Fails unless the teacher beats
/// the student on the probe set.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (spec, train, probe) = generate_data(cfg)?;
    let (teacher, teacher_train_acc) = fit_teacher_policy(cfg, &spec, &train)?;
    let (student, student_train_acc) = fit_student_sft(cfg, &spec, &train)?;
    let teacher_probe_acc = final_answer_accuracy(&teacher, &probe)?;
    let student_probe_acc = final_answer_accuracy(&student, &probe)?;
    info!(
        "teacher acc train={teacher_train_acc:.4} probe={teacher_probe_acc:.4}; \
         sft student acc train={student_train_acc:.4} probe={student_probe_acc:.4}"
    );
    if teacher_probe_acc <= student_probe_acc {
        return Err(HarnessError::TeacherNotSuperior {
            teacher: teacher_probe_acc,
            student: student_probe_acc,
        });
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

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: Summary,
    pub outcome: DistillOutcome,
}

/// Distills `prepared.student` toward `prepared.teacher`.
///
/// With `out_dir`, writes `metrics.csv` (row by row), `weights.csv` when
/// weight logging is on, then `student.ckpt` and `summary.json`.
pub fn run_distill(
    cfg: &RunConfig,
    prepared: &Prepared,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let tcfg = cfg.train_config()?;
    let judge = TaskJudge::new(cfg.judge_config(), Some(&prepared.teacher))?;

    let mut writers = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
            let metrics = MetricsWriter::create(&dir.join("metrics.csv"))?;
            let weights = if cfg.log_weights {
                Some(WeightsWriter::create(&dir.join("weights.csv"))?)
            } else {
                None
            };
            Some((metrics, weights))
        }
        None => None,
    };

    let outcome = distill(
        &prepared.teacher,
        prepared.student.clone(),
        &prepared.train,
        &prepared.probe,
        &judge,
        &tcfg,
        |record, rows| {
            if let Some(acc) = record.eval_acc {
                info!(
                    "iter {} total={:.5} lv_skl={:.5} lv_srkl={:.5} eval_acc={acc:.4}",
                    record.iteration, record.total, record.lv_skl, record.lv_srkl
                );
            }
            if let Some((metrics, weights)) = writers.as_mut() {
                metrics.append(record).map_err(|e| e.to_string())?;
                if let Some(w) = weights.as_mut() {
                    w.append(rows).map_err(|e| e.to_string())?;
                }
            }
            Ok(())
        },
    )?;

    let last = outcome.records.last();
    let summary = Summary {
        run_id: run_id(cfg),
        units: "nats".into(),
        config: cfg.echo(),
        terminal: TerminalMetrics {
            iterations: outcome.records.len(),
            lv_skl: last.map(|r| r.lv_skl),
            lv_srkl: last.map(|r| r.lv_srkl),
            total: last.map(|r| r.total),
            initial_eval_acc: outcome.initial_eval,
            final_eval_acc: outcome.final_eval,
            teacher_probe_acc: prepared.teacher_probe_acc,
            student_sft_probe_acc: prepared.student_probe_acc,
        },
    };
    if let Some(dir) = out_dir {
        let ckpt = dir.join("student.ckpt");
        std::fs::write(&ckpt, save_checkpoint(&outcome.student))
            .map_err(|e| HarnessError::io(&ckpt, e))?;
        summary.write(&dir.join("summary.json"))?;
    }
    Ok(RunOutcome { summary, outcome })
}
