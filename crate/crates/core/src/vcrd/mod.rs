//! Validity-ratio weights and the weighted skew-KL distillation objective.

mod train;

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::dist::{self, Categorical, DistError, SkewParam};
use crate::judge::{prm_free_weight, JudgeConfig, JudgeError, ValidityJudge};
use crate::policy::{GradTable, OptimizerKind, PolicyError, Prefix, TabularPolicy, Trajectory};
use crate::tasks::{TaskError, TaskInstance};

pub use train::{
    batch_step, distill, BatchResult, DistillOutcome, MetricRecord, PromptResult, WeightLogRow,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VcrdError {
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("teacher and student rollouts do not share a prompt")]
    PromptMismatch,
    #[error("loss weight {name} must be >= 0, got {value}")]
    NegativeLambda { name: &'static str, value: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("weight rule {0} cannot be computed from scores alone")]
    RuleNeedsTeacher(WeightRule),
    #[error("invalid weight {value} at position {position}")]
    InvalidWeight { position: usize, value: f64 },
    #[error("non-finite loss at iteration {iteration}: {diagnostics}")]
    NonFinite {
        iteration: usize,
        diagnostics: String,
    },
    #[error("metrics sink failed: {0}")]
    Sink(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

pub type Result<T> = std::result::Result<T, VcrdError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRule {
    /// `r_s / (r_t + eps)`.
    Ratio,
    RsOnly,
    /// `exp(r_s - r_t)`.
    RsMinusRt,
    PrmFree,
    /// Every weight is 1.
    Uniform,
}

impl fmt::Display for WeightRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightRule::Ratio => "ratio",
            WeightRule::RsOnly => "rs_only",
            WeightRule::RsMinusRt => "rs_minus_rt",
            WeightRule::PrmFree => "prm_free",
            WeightRule::Uniform => "uniform",
        })
    }
}

impl std::str::FromStr for WeightRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ratio" => Ok(WeightRule::Ratio),
            "rs_only" => Ok(WeightRule::RsOnly),
            "rs_minus_rt" => Ok(WeightRule::RsMinusRt),
            "prm_free" => Ok(WeightRule::PrmFree),
            "uniform" => Ok(WeightRule::Uniform),
            other => Err(format!(
                "unknown weight rule {other:?} (ratio|rs_only|rs_minus_rt|prm_free|uniform)"
            )),
        }
    }
}

/// Where the scored tokens `a^S_t`, `a^T_t` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSource {
    /// The rollout tokens at position `t`.
    Rollout,
    /// Fresh proposals from each policy at the prefix being scored.
    Resample,
}

impl fmt::Display for TokenSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenSource::Rollout => "rollout",
            TokenSource::Resample => "resample",
        })
    }
}

impl std::str::FromStr for TokenSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rollout" => Ok(TokenSource::Rollout),
            "resample" => Ok(TokenSource::Resample),
            other => Err(format!("unknown token source {other:?} (rollout|resample)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Parity,
    Attenuation,
    Amplification,
}

pub fn classify_regime(w: f64, parity_band: f64) -> Regime {
    if (w - 1.0).abs() <= parity_band {
        Regime::Parity
    } else if w < 1.0 {
        Regime::Attenuation
    } else {
        Regime::Amplification
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_teacher: f64,
    pub lambda_student: f64,
    pub alpha: SkewParam,
    /// Validity smoothing in the ratio denominator.
    pub epsilon: f64,
    pub weight_rule: WeightRule,
    pub clamp_amplification: bool,
    pub weight_token_source: TokenSource,
    pub parity_band: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Probe evaluation cadence; the last iteration is always evaluated.
    pub eval_every: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub workers: usize,
    pub seed: u64,
    pub log_weights: bool,
    pub record_wall_clock: bool,
    /// Source of the `prm_*` parameters used by [`WeightRule::PrmFree`].
    pub prm: JudgeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_teacher: 1.0,
            lambda_student: 1.0,
            alpha: SkewParam::new(0.1).expect("valid"),
            epsilon: 1e-8,
            weight_rule: WeightRule::Ratio,
            clamp_amplification: false,
            weight_token_source: TokenSource::Rollout,
            parity_band: 0.05,
            batch_size: 16,
            iterations: 200,
            eval_every: 20,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            workers: 1,
            seed: 0,
            log_weights: false,
            record_wall_clock: false,
            prm: JudgeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambdas(self.lambda_teacher, self.lambda_student)?;
        let bad = |m: String| Err(VcrdError::InvalidConfig(m));
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.parity_band.is_finite() && self.parity_band >= 0.0) {
            return bad(format!(
                "parity_band must be >= 0, got {}",
                self.parity_band
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        self.prm.validate()?;
        Ok(())
    }
}

fn check_lambdas(lambda_teacher: f64, lambda_student: f64) -> Result<()> {
    for (name, value) in [
        ("lambda_teacher", lambda_teacher),
        ("lambda_student", lambda_student),
    ] {
        if !(value.is_finite() && value >= 0.0) {
            return Err(VcrdError::NegativeLambda { name, value });
        }
    }
    Ok(())
}

/// A teacher rollout and a student rollout from the same prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutPair {
    pub teacher: Trajectory,
    pub student: Trajectory,
}

impl RolloutPair {
    pub fn new(teacher: Trajectory, student: Trajectory) -> Result<Self> {
        if teacher.prompt != student.prompt {
            return Err(VcrdError::PromptMismatch);
        }
        Ok(Self { teacher, student })
    }

    pub fn prompt(&self) -> &[usize] {
        &self.teacher.prompt
    }

    /// Positions scored: the shorter rollout's length.
    pub fn horizon(&self) -> usize {
        self.teacher.len().min(self.student.len())
    }
}

/// Judge scores behind one weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorePair {
    pub r_s: f64,
    pub r_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSeries {
    pub w_teacher: Vec<f64>,
    pub w_student: Vec<f64>,
    pub regimes_teacher: Vec<Regime>,
    pub regimes_student: Vec<Regime>,
    /// Scores behind each weight, `None` for rules that do not consult the judge.
    pub scores_teacher: Vec<Option<ScorePair>>,
    pub scores_student: Vec<Option<ScorePair>>,
}

impl WeightSeries {
    /// Builds a series from explicit weights, classifying regimes.
    pub fn from_weights(
        w_teacher: Vec<f64>,
        w_student: Vec<f64>,
        parity_band: f64,
    ) -> Result<Self> {
        for (position, &value) in w_teacher.iter().chain(&w_student).enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(VcrdError::InvalidWeight { position, value });
            }
        }
        Ok(Self {
            regimes_teacher: w_teacher
                .iter()
                .map(|&w| classify_regime(w, parity_band))
                .collect(),
            regimes_student: w_student
                .iter()
                .map(|&w| classify_regime(w, parity_band))
                .collect(),
            scores_teacher: vec![None; w_teacher.len()],
            scores_student: vec![None; w_student.len()],
            w_teacher,
            w_student,
        })
    }

    pub fn len(&self) -> usize {
        self.w_teacher.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_teacher.is_empty()
    }

    fn reclassify(&mut self, parity_band: f64) {
        self.regimes_teacher = self
            .w_teacher
            .iter()
            .map(|&w| classify_regime(w, parity_band))
            .collect();
        self.regimes_student = self
            .w_student
            .iter()
            .map(|&w| classify_regime(w, parity_band))
            .collect();
    }
}

/// Weight from a pair of judge scores.
pub fn apply_weight_rule(r_s: f64, r_t: f64, rule: WeightRule, epsilon: f64) -> Result<f64> {
    Ok(match rule {
        WeightRule::Ratio => r_s / (r_t + epsilon),
        WeightRule::RsOnly => r_s,
        WeightRule::RsMinusRt => (r_s - r_t).exp(),
        WeightRule::Uniform => 1.0,
        WeightRule::PrmFree => return Err(VcrdError::RuleNeedsTeacher(rule)),
    })
}

/// Replaces every weight by `min(w, 1)`.
pub fn clamp_weights(series: &WeightSeries, parity_band: f64) -> WeightSeries {
    let mut out = series.clone();
    for w in out.w_teacher.iter_mut().chain(out.w_student.iter_mut()) {
        *w = w.min(1.0);
    }
    out.reclassify(parity_band);
    out
}

/// Policies and instance a weight computation reads from.
pub struct WeightContext<'a, J: ValidityJudge + ?Sized> {
    pub judge: &'a J,
    pub instance: &'a TaskInstance,
    pub teacher: &'a TabularPolicy,
    pub student: &'a TabularPolicy,
}

/// Per-position validity weights on both prefixes.
///
/// `rng` drives the fresh proposals of [`TokenSource::Resample`]; it is
/// advanced identically for every rule so streams stay aligned.
pub fn validity_weights<J, R>(
    ctx: &WeightContext<'_, J>,
    pair: &RolloutPair,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<WeightSeries>
where
    J: ValidityJudge + ?Sized,
    R: Rng + ?Sized,
{
    let horizon = pair.horizon();
    let mut series = WeightSeries {
        w_teacher: Vec::with_capacity(horizon),
        w_student: Vec::with_capacity(horizon),
        regimes_teacher: Vec::new(),
        regimes_student: Vec::new(),
        scores_teacher: Vec::with_capacity(horizon),
        scores_student: Vec::with_capacity(horizon),
    };
    for t in 0..horizon {
        for on_teacher_prefix in [true, false] {
            let prefix = if on_teacher_prefix {
                pair.teacher.prefix_at(t)
            } else {
                pair.student.prefix_at(t)
            };
            let (a_s, a_t) = match cfg.weight_token_source {
                TokenSource::Rollout => (pair.student.actions[t], pair.teacher.actions[t]),
                TokenSource::Resample => {
                    let a_s = ctx
                        .student
                        .next_dist(&prefix)?
                        .inverse_cdf(rng.random::<f64>());
                    let a_t = ctx
                        .teacher
                        .next_dist(&prefix)?
                        .inverse_cdf(rng.random::<f64>());
                    (a_s, a_t)
                }
            };
            let (w, scores) = weight_at(ctx, &prefix, a_s, a_t, cfg)?;
            if !(w.is_finite() && w >= 0.0) {
                return Err(VcrdError::InvalidWeight {
                    position: t,
                    value: w,
                });
            }
            let w = if cfg.clamp_amplification {
                w.min(1.0)
            } else {
                w
            };
            if on_teacher_prefix {
                series.w_teacher.push(w);
                series.scores_teacher.push(scores);
            } else {
                series.w_student.push(w);
                series.scores_student.push(scores);
            }
        }
    }
    series.reclassify(cfg.parity_band);
    Ok(series)
}

fn weight_at<J: ValidityJudge + ?Sized>(
    ctx: &WeightContext<'_, J>,
    prefix: &Prefix,
    a_s: usize,
    a_t: usize,
    cfg: &TrainConfig,
) -> Result<(f64, Option<ScorePair>)> {
    match cfg.weight_rule {
        WeightRule::Uniform => Ok((1.0, None)),
        WeightRule::PrmFree => {
            // the proxy scores the student's greedy proposal when resampling
            let token = match cfg.weight_token_source {
                TokenSource::Rollout => a_s,
                TokenSource::Resample => ctx.student.next_dist(prefix)?.argmax(),
            };
            let p = ctx.teacher.next_dist(prefix)?;
            Ok((prm_free_weight(&p, token, &cfg.prm)?, None))
        }
        rule => {
            let r_s = ctx.judge.score(ctx.instance, prefix, a_s)?.value();
            let r_t = ctx.judge.score(ctx.instance, prefix, a_t)?.value();
            let w = apply_weight_rule(r_s, r_t, rule, cfg.epsilon)?;
            Ok((w, Some(ScorePair { r_s, r_t })))
        }
    }
}

/// One weighted loss term with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    /// `w_t * D_t / T` per position; sums to `value`.
    pub per_position: Vec<f64>,
    pub grad: GradTable,
}

impl LossTerm {
    pub fn zero() -> Self {
        Self {
            value: 0.0,
            per_position: Vec::new(),
            grad: GradTable::new(),
        }
    }
}

#[derive(Clone, Copy)]
enum Divergence {
    Skl,
    Srkl,
}

fn weighted_loss(
    teacher: &TabularPolicy,
    student: &TabularPolicy,
    traj: &Trajectory,
    weights: &[f64],
    alpha: SkewParam,
    which: Divergence,
) -> Result<LossTerm> {
    if weights.len() != traj.len() {
        return Err(VcrdError::LengthMismatch {
            what: "weights",
            got: weights.len(),
            expected: traj.len(),
        });
    }
    if teacher.vocab_size() != student.vocab_size() {
        return Err(DistError::DimensionMismatch {
            left: teacher.vocab_size(),
            right: student.vocab_size(),
        }
        .into());
    }
    let horizon = traj.len();
    if horizon == 0 {
        return Ok(LossTerm::zero());
    }
    let inv_t = 1.0 / horizon as f64;
    let mut term = LossTerm {
        value: 0.0,
        per_position: Vec::with_capacity(horizon),
        grad: GradTable::new(),
    };
    for (t, &w) in weights.iter().enumerate() {
        let prefix = traj.prefix_at(t);
        let p = teacher.next_dist(&prefix)?;
        let key = student.state_key(&prefix)?;
        let z = student.logits_or_zero(&key);
        let q = Categorical::from_logits(&z)?;
        let (d, g) = match which {
            Divergence::Skl => (
                dist::skl(&p, &q, alpha)?,
                dist::skl_grad_logits(&p, &z, alpha)?,
            ),
            Divergence::Srkl => (
                dist::srkl(&p, &q, alpha)?,
                dist::srkl_grad_logits(&p, &z, alpha)?,
            ),
        };
        let c = w * d * inv_t;
        term.value += c;
        term.per_position.push(c);
        term.grad.add_scaled(&key, &g, w * inv_t);
    }
    Ok(term)
}

/// Teacher-prefix term: mean over positions of `w_t SKL(p || q)` along the
/// teacher rollout.
pub fn lv_skl_loss(
    teacher: &TabularPolicy,
    student: &TabularPolicy,
    teacher_traj: &Trajectory,
    weights: &[f64],
    alpha: SkewParam,
) -> Result<LossTerm> {
    weighted_loss(
        teacher,
        student,
        teacher_traj,
        weights,
        alpha,
        Divergence::Skl,
    )
}

/// Student-prefix term: mean over positions of `w_t SRKL(p || q)` along the
/// student rollout.
pub fn lv_srkl_loss(
    teacher: &TabularPolicy,
    student: &TabularPolicy,
    student_traj: &Trajectory,
    weights: &[f64],
    alpha: SkewParam,
) -> Result<LossTerm> {
    weighted_loss(
        teacher,
        student,
        student_traj,
        weights,
        alpha,
        Divergence::Srkl,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub lv_skl: f64,
    pub lv_srkl: f64,
    pub total: f64,
    pub skl_positions: Vec<f64>,
    pub srkl_positions: Vec<f64>,
}

/// `lambda_T * lv_skl + lambda_S * lv_srkl`, with the gradients combined the
/// same way.
pub fn total_loss(
    lv_skl: &LossTerm,
    lv_srkl: &LossTerm,
    lambda_teacher: f64,
    lambda_student: f64,
) -> Result<(LossBreakdown, GradTable)> {
    check_lambdas(lambda_teacher, lambda_student)?;
    let mut grad = GradTable::new();
    grad.merge_scaled(&lv_skl.grad, lambda_teacher);
    grad.merge_scaled(&lv_srkl.grad, lambda_student);
    Ok((
        LossBreakdown {
            lv_skl: lv_skl.value,
            lv_srkl: lv_srkl.value,
            total: lambda_teacher * lv_skl.value + lambda_student * lv_srkl.value,
            skl_positions: lv_skl.per_position.clone(),
            srkl_positions: lv_srkl.per_position.clone(),
        },
        grad,
    ))
}
