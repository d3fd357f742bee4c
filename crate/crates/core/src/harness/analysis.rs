use rand::Rng;

use super::{HarnessError, Result, RunConfig};
use crate::judge::ValidityJudge;
use crate::policy::{Prefix, TabularPolicy};
use crate::rng::{self, domain};
use crate::tasks::TaskInstance;

/// Log-spaced bins over `[lo, hi)` with open tails on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub underflow: u64,
    pub counts: Vec<u64>,
    pub overflow: u64,
}

impl Histogram {
    pub fn new(bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || lo.is_nan() || lo <= 0.0 || hi.is_nan() || hi <= lo || hi.is_infinite() {
            return Err(HarnessError::Config(format!(
                "histogram needs bins > 0 and 0 < lo < hi, got {bins} bins over [{lo}, {hi}]"
            )));
        }
        let (a, b) = (lo.ln(), hi.ln());
        let mut edges: Vec<f64> = (0..=bins)
            .map(|k| (a + (b - a) * k as f64 / bins as f64).exp())
            .collect();
        edges[0] = lo;
        edges[bins] = hi;
        Ok(Self {
            edges,
            underflow: 0,
            counts: vec![0; bins],
            overflow: 0,
        })
    }

    pub fn add(&mut self, ratio: f64) {
        let n = self.counts.len();
        if ratio < self.edges[0] {
            self.underflow += 1;
        } else if ratio >= self.edges[n] {
            self.overflow += 1;
        } else {
            // first edge strictly above the ratio bounds its bin
            let k = self.edges.partition_point(|&e| e <= ratio) - 1;
            self.counts[k.min(n - 1)] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.underflow + self.overflow + self.counts.iter().sum::<u64>()
    }

    /// `(lower, upper, count)` rows, tails included.
    pub fn rows(&self) -> Vec<(f64, f64, u64)> {
        let n = self.counts.len();
        let mut rows = Vec::with_capacity(n + 2);
        rows.push((0.0, self.edges[0], self.underflow));
        for k in 0..n {
            rows.push((self.edges[k], self.edges[k + 1], self.counts[k]));
        }
        rows.push((self.edges[n], f64::INFINITY, self.overflow));
        rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioSummary {
    pub positions: u64,
    pub at_least_one: u64,
}

impl RatioSummary {
    pub fn fraction_ge_one(&self) -> f64 {
        if self.positions == 0 {
            0.0
        } else {
            self.at_least_one as f64 / self.positions as f64
        }
    }
}

/// Ratio statistics under both prefix conventions: the teacher's rollout
/// prefix and the student's.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioReport {
    pub teacher_prefix: RatioSummary,
    pub student_prefix: RatioSummary,
    pub hist_teacher_prefix: Histogram,
    pub hist_student_prefix: Histogram,
}

impl RatioReport {
    pub fn pooled(&self) -> RatioSummary {
        RatioSummary {
            positions: self.teacher_prefix.positions + self.student_prefix.positions,
            at_least_one: self.teacher_prefix.at_least_one + self.student_prefix.at_least_one,
        }
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("lower,upper,teacher_prefix,student_prefix\n");
        for ((lo, hi, a), (_, _, b)) in self
            .hist_teacher_prefix
            .rows()
            .into_iter()
            .zip(self.hist_student_prefix.rows())
        {
            out.push_str(&format!("{lo},{hi},{a},{b}\n"));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("prefix,positions,ge_one,fraction_ge_one\n");
        for (name, s) in [
            ("teacher", &self.teacher_prefix),
            ("student", &self.student_prefix),
            ("pooled", &self.pooled()),
        ] {
            out.push_str(&format!(
                "{name},{},{},{}\n",
                s.positions,
                s.at_least_one,
                s.fraction_ge_one()
            ));
        }
        out
    }
}

fn raw_ratio(r_s: f64, r_t: f64) -> f64 {
    if r_t > 0.0 {
        r_s / r_t
    } else if r_s > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// Reward ratio `r_s / r_t` at every position of both models' rollouts.
///
/// At each shared prefix both models propose a token by inverse CDF from one
/// common uniform draw, so identical policies always propose the same token.
pub fn analyze_ratios<J: ValidityJudge + ?Sized>(
    teacher: &TabularPolicy,
    student: &TabularPolicy,
    instances: &[TaskInstance],
    judge: &J,
    cfg: &RunConfig,
) -> Result<RatioReport> {
    if instances.is_empty() {
        return Err(HarnessError::EmptyInstances);
    }
    let mut report = RatioReport {
        teacher_prefix: RatioSummary {
            positions: 0,
            at_least_one: 0,
        },
        student_prefix: RatioSummary {
            positions: 0,
            at_least_one: 0,
        },
        hist_teacher_prefix: Histogram::new(cfg.hist_bins, cfg.hist_lo, cfg.hist_hi)?,
        hist_student_prefix: Histogram::new(cfg.hist_bins, cfg.hist_lo, cfg.hist_hi)?,
    };
    for (i, inst) in instances.iter().enumerate() {
        let i = i as u64;
        let horizon = inst.horizon();
        let mut rt = rng::stream(cfg.seed, &[domain::ANALYSIS, i, 0]);
        let mut rs = rng::stream(cfg.seed, &[domain::ANALYSIS, i, 1]);
        let rollouts = [
            teacher.sample_rollout(&inst.prompt, horizon, &mut rt)?,
            student.sample_rollout(&inst.prompt, horizon, &mut rs)?,
        ];
        for (conv, traj) in rollouts.iter().enumerate() {
            for t in 0..traj.len() {
                let prefix: Prefix = traj.prefix_at(t);
                let u: f64 =
                    rng::stream(cfg.seed, &[domain::ANALYSIS, i, 2, conv as u64, t as u64])
                        .random();
                let a_t = teacher.next_dist(&prefix)?.inverse_cdf(u);
                let a_s = student.next_dist(&prefix)?.inverse_cdf(u);
                let r_t = judge.score(inst, &prefix, a_t)?.value();
                let r_s = judge.score(inst, &prefix, a_s)?.value();
                let ratio = raw_ratio(r_s, r_t);
                let (summary, hist) = if conv == 0 {
                    (&mut report.teacher_prefix, &mut report.hist_teacher_prefix)
                } else {
                    (&mut report.student_prefix, &mut report.hist_student_prefix)
                };
                summary.positions += 1;
                if ratio >= 1.0 {
                    summary.at_least_one += 1;
                }
                hist.add(ratio);
            }
        }
    }
    Ok(report)
}
