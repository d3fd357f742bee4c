//! Local validity judges `r(c, a)` in `[0, 1]`.

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::dist::{Categorical, DistError};
use crate::policy::{PolicyError, Prefix, TabularPolicy};
use crate::rng::{self, domain};
use crate::tasks::{valid_next, TaskError, TaskInstance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("validity score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("invalid judge config: {0}")]
    InvalidConfig(String),
    #[error("judge kind {0} requires a teacher policy")]
    MissingTeacher(JudgeKind),
    #[error("token {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: usize, size: usize },
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T> = std::result::Result<T, JudgeError>;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ValidityScore(f64);

impl ValidityScore {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(JudgeError::InvalidScore(value));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeKind {
    Oracle,
    NoisyOracle,
    /// Teacher likelihood of the scored token.
    PrmFree,
}

impl fmt::Display for JudgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JudgeKind::Oracle => "oracle",
            JudgeKind::NoisyOracle => "noisy_oracle",
            JudgeKind::PrmFree => "prm_free",
        })
    }
}

impl std::str::FromStr for JudgeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "oracle" => Ok(JudgeKind::Oracle),
            "noisy_oracle" => Ok(JudgeKind::NoisyOracle),
            "prm_free" => Ok(JudgeKind::PrmFree),
            other => Err(format!(
                "unknown judge kind {other:?} (oracle|noisy_oracle|prm_free)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeConfig {
    pub kind: JudgeKind,
    pub r_floor: f64,
    pub noise_scale: f64,
    /// Seed of the per-(prefix, token) noise.
    pub noise_seed: u64,
    pub prm_k: usize,
    pub prm_gamma: f64,
    pub prm_clamp_lo: f64,
    pub prm_clamp_hi: f64,
    pub prm_epsilon: f64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            kind: JudgeKind::Oracle,
            r_floor: 0.1,
            noise_scale: 0.0,
            noise_seed: 0,
            prm_k: 128,
            prm_gamma: 0.5,
            prm_clamp_lo: 0.5,
            prm_clamp_hi: 2.0,
            prm_epsilon: 1e-8,
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(JudgeError::InvalidConfig(m));
        if !(self.r_floor > 0.0 && self.r_floor < 1.0) {
            return bad(format!("r_floor must be in (0, 1), got {}", self.r_floor));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad(format!(
                "noise_scale must be >= 0, got {}",
                self.noise_scale
            ));
        }
        if self.prm_k == 0 {
            return bad("prm_k must be >= 1".into());
        }
        if !(self.prm_gamma.is_finite() && self.prm_gamma > 0.0) {
            return bad(format!("prm_gamma must be > 0, got {}", self.prm_gamma));
        }
        let (lo, hi) = (self.prm_clamp_lo, self.prm_clamp_hi);
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return bad(format!(
                "prm clamp needs 0 < lo <= 1 <= hi, got [{lo}, {hi}]"
            ));
        }
        if !(self.prm_epsilon.is_finite() && self.prm_epsilon > 0.0) {
            return bad(format!("prm_epsilon must be > 0, got {}", self.prm_epsilon));
        }
        Ok(())
    }
}

/// Scores a candidate next token under a prefix of a task instance.
pub trait ValidityJudge: Sync {
    fn score(
        &self,
        instance: &TaskInstance,
        prefix: &Prefix,
        token: usize,
    ) -> Result<ValidityScore>;
}

/// 1.0 for a token that continues some gold trajectory, `r_floor` otherwise.
pub fn oracle_score(
    instance: &TaskInstance,
    prefix: &Prefix,
    token: usize,
    r_floor: f64,
) -> Result<ValidityScore> {
    let valid = valid_next(instance, prefix)?;
    ValidityScore::new(if valid.contains(&token) { 1.0 } else { r_floor })
}

/// Multiplies `base` by a uniform factor in `[1 - s, 1 + s]` and clips to `[0, 1]`.
pub fn noisy_score<R: Rng + ?Sized>(
    base: ValidityScore,
    noise_scale: f64,
    rng: &mut R,
) -> ValidityScore {
    if noise_scale == 0.0 {
        return base;
    }
    let u: f64 = rng.random();
    let factor = 1.0 + noise_scale * (2.0 * u - 1.0);
    ValidityScore((base.0 * factor).clamp(0.0, 1.0))
}

/// Teacher-likelihood weight normalized by the top-k collision sum, smoothed
/// in log space by `gamma` and clamped to `[lo, hi]`.
pub fn prm_free_weight(
    teacher: &Categorical,
    student_token: usize,
    cfg: &JudgeConfig,
) -> Result<f64> {
    if teacher.is_empty() {
        return Err(DistError::Empty.into());
    }
    if student_token >= teacher.len() {
        return Err(JudgeError::TokenOutOfRange {
            token: student_token,
            size: teacher.len(),
        });
    }
    let (lo, hi) = (cfg.prm_clamp_lo, cfg.prm_clamp_hi);
    let mut sorted = teacher.probs().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = cfg.prm_k.min(sorted.len());
    let collision: f64 = sorted[..k].iter().map(|p| p * p).sum();
    let raw = teacher.prob(student_token) / (collision + cfg.prm_epsilon);
    let smoothed = cfg.prm_gamma * raw.ln();
    if smoothed <= lo.ln() {
        return Ok(lo);
    }
    if smoothed >= hi.ln() {
        return Ok(hi);
    }
    Ok(smoothed.exp().clamp(lo, hi))
}

/// The configured judge, with the teacher it needs for `prm_free` scoring.
#[derive(Debug, Clone)]
pub struct TaskJudge<'a> {
    cfg: JudgeConfig,
    teacher: Option<&'a TabularPolicy>,
}

impl<'a> TaskJudge<'a> {
    pub fn new(cfg: JudgeConfig, teacher: Option<&'a TabularPolicy>) -> Result<Self> {
        cfg.validate()?;
        if cfg.kind == JudgeKind::PrmFree && teacher.is_none() {
            return Err(JudgeError::MissingTeacher(cfg.kind));
        }
        Ok(Self { cfg, teacher })
    }

    pub fn config(&self) -> &JudgeConfig {
        &self.cfg
    }

    fn noise_rng(&self, prefix: &Prefix, token: usize) -> rng::StreamRng {
        let h = rng::hash_tokens(prefix.tokens());
        rng::stream(
            self.cfg.noise_seed,
            &[
                domain::JUDGE_NOISE,
                h,
                prefix.prompt.len() as u64,
                token as u64,
            ],
        )
    }
}

impl ValidityJudge for TaskJudge<'_> {
    fn score(
        &self,
        instance: &TaskInstance,
        prefix: &Prefix,
        token: usize,
    ) -> Result<ValidityScore> {
        match self.cfg.kind {
            JudgeKind::Oracle => oracle_score(instance, prefix, token, self.cfg.r_floor),
            JudgeKind::NoisyOracle => {
                let base = oracle_score(instance, prefix, token, self.cfg.r_floor)?;
                Ok(noisy_score(
                    base,
                    self.cfg.noise_scale,
                    &mut self.noise_rng(prefix, token),
                ))
            }
            JudgeKind::PrmFree => {
                if prefix.prompt != instance.prompt {
                    return Err(TaskError::ForeignPrompt.into());
                }
                let teacher = self
                    .teacher
                    .ok_or(JudgeError::MissingTeacher(self.cfg.kind))?;
                let dist = teacher.next_dist(prefix)?;
                if token >= dist.len() {
                    return Err(JudgeError::TokenOutOfRange {
                        token,
                        size: dist.len(),
                    });
                }
                ValidityScore::new(dist.prob(token))
            }
        }
    }
}
