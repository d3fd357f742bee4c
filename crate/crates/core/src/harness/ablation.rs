use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::pipeline::{prepare, run_distill};
use super::{HarnessError, Result, RunConfig};
use crate::vcrd::WeightRule;

/// One row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Vcrd,
    Uniform,
    Clamp,
    RsOnly,
    RsMinusRt,
    PrmFree,
    LvSklOnly,
    LvSrklOnly,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Vcrd,
        Variant::Uniform,
        Variant::Clamp,
        Variant::RsOnly,
        Variant::RsMinusRt,
        Variant::PrmFree,
        Variant::LvSklOnly,
        Variant::LvSrklOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vcrd => "vcrd",
            Variant::Uniform => "uniform",
            Variant::Clamp => "clamp",
            Variant::RsOnly => "rs_only",
            Variant::RsMinusRt => "rs_minus_rt",
            Variant::PrmFree => "prm_free",
            Variant::LvSklOnly => "lv_skl_only",
            Variant::LvSrklOnly => "lv_srkl_only",
        }
    }

    /// The base config with this variant's overrides. The loss-component
    /// rows keep the base weight rule.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.clamp_amplification = false;
        match self {
            Variant::Vcrd => cfg.weight_rule = WeightRule::Ratio,
            Variant::Uniform => cfg.weight_rule = WeightRule::Uniform,
            Variant::Clamp => {
                cfg.weight_rule = WeightRule::Ratio;
                cfg.clamp_amplification = true;
            }
            Variant::RsOnly => cfg.weight_rule = WeightRule::RsOnly,
            Variant::RsMinusRt => cfg.weight_rule = WeightRule::RsMinusRt,
            Variant::PrmFree => cfg.weight_rule = WeightRule::PrmFree,
            Variant::LvSklOnly => {
                cfg.weight_rule = WeightRule::Ratio;
                cfg.lambda_student = 0.0;
            }
            Variant::LvSrklOnly => {
                cfg.weight_rule = WeightRule::Ratio;
                cfg.lambda_teacher = 0.0;
            }
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantRow {
    pub variant: Variant,
    /// Final probe accuracy, one entry per seed.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub stdev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Per-seed table: `variant,seed,final_acc`, then mean and stdev rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,final_acc\n");
        for row in &self.rows {
            for (seed, acc) in self.seeds.iter().zip(&row.accuracies) {
                out.push_str(&format!("{},{seed},{acc}\n", row.variant));
            }
            out.push_str(&format!("{},mean,{}\n", row.variant, row.mean));
            out.push_str(&format!("{},stdev,{}\n", row.variant, row.stdev));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>8} {:>8}  (n={})\n",
            "variant",
            "mean",
            "stdev",
            self.seeds.len()
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>8.4} {:>8.4}\n",
                row.variant.name(),
                row.mean,
                row.stdev
            ));
        }
        out
    }
}

fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `variants` for seeds `base.seed .. base.seed + base.ablate_seeds`.
///
/// Each seed prepares its own data, teacher and SFT student once; every
/// variant starts from that same student. Runs execute concurrently when
/// `workers > 1`, each one serially inside, so results do not depend on
/// scheduling.
pub fn ablate(base: &RunConfig, variants: &[Variant]) -> Result<AblationReport> {
    base.validate()?;
    if variants.is_empty() {
        return Err(HarnessError::Config("no ablation variants selected".into()));
    }
    let seeds: Vec<u64> = (0..base.ablate_seeds as u64)
        .map(|s| base.seed + s)
        .collect();
    let run_seed = |seed: u64| -> Result<Vec<f64>> {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.workers = 1;
        cfg.log_weights = false;
        let prepared = prepare(&cfg)?;
        variants
            .iter()
            .map(|v| {
                Ok(run_distill(&v.apply(&cfg), &prepared, None)?
                    .outcome
                    .final_eval)
            })
            .collect()
    };
    let per_seed: Vec<Vec<f64>> = if base.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(base.workers)
            .build()
            .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
        pool.install(|| {
            seeds
                .par_iter()
                .map(|&s| run_seed(s))
                .collect::<Result<_>>()
        })?
    } else {
        seeds.iter().map(|&s| run_seed(s)).collect::<Result<_>>()?
    };
    let rows = variants
        .iter()
        .enumerate()
        .map(|(j, &variant)| {
            let accuracies: Vec<f64> = per_seed.iter().map(|accs| accs[j]).collect();
            let (mean, stdev) = mean_stdev(&accuracies);
            VariantRow {
                variant,
                accuracies,
                mean,
                stdev,
            }
        })
        .collect();
    Ok(AblationReport { seeds, rows })
}
