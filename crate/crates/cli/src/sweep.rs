//! Experiment grids: named arms expanded over bases, margin strengths,
//! and seeds, run in parallel, aggregated deterministically.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dbm_core::losses::{BaseLoss, BaselineMargin, GradientMode, MarginMode};
use dbm_core::model::HeadKind;
use dbm_core::{Error, Result};

use crate::config::{resolve_out_root, ExperimentConfig, MarginSection};
use crate::runner;

/// One sweep arm: a loss/head variant, optionally expanded over `k` and
/// `tau` lists. Unset fields fall back to the base config's choices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSection {
    pub name: String,
    /// Base losses to pair this arm with; defaults to the `[loss]` base.
    #[serde(default)]
    pub bases: Option<Vec<BaseLoss>>,
    #[serde(default)]
    pub head: Option<HeadKind>,
    /// Margin placement; omit for a margin-free arm.
    #[serde(default)]
    pub margin_mode: Option<MarginMode>,
    #[serde(default)]
    pub gradient: Option<GradientMode>,
    #[serde(default)]
    pub baseline: Option<BaselineMargin>,
    /// Margin-strength grid; meaningful only with `margin_mode`.
    #[serde(default)]
    pub k: Option<Vec<f64>>,
    #[serde(default)]
    pub tau: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub seeds: Vec<u64>,
    #[serde(rename = "arm")]
    pub arms: Vec<ArmSection>,
}

/// A sweep file is an ordinary experiment config plus a `[sweep]` table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub base: ExperimentConfig,
    pub sweep: SweepSection,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SweepConfig = toml::from_str(&text).map_err(|e| Error::parse(0, e.to_string()))?;
        cfg.base.validate()?;
        if cfg.sweep.seeds.is_empty() {
            return Err(Error::invalid("sweep needs at least one seed"));
        }
        if cfg.sweep.arms.is_empty() {
            return Err(Error::invalid("sweep needs at least one [[sweep.arm]]"));
        }
        for arm in &cfg.sweep.arms {
            if arm.baseline.is_some() && arm.margin_mode.is_some() {
                return Err(Error::invalid(format!(
                    "arm '{}' sets both a margin mode and a classic baseline",
                    arm.name
                )));
            }
        }
        Ok(cfg)
    }
}

/// One fully-specified (config, seed) cell of the grid.
#[derive(Debug, Clone)]
struct Cell {
    arm: String,
    base: BaseLoss,
    head: HeadKind,
    k: f64,
    tau: f64,
    seed: u64,
    cfg: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize)]
struct RowOut {
    arm: String,
    base: BaseLoss,
    head: HeadKind,
    k: f64,
    tau: f64,
    seed: u64,
    status: &'static str,
    overall: Option<f64>,
    many: Option<f64>,
    medium: Option<f64>,
    few: Option<f64>,
    final_loss: Option<f64>,
    error: String,
}

fn expand(cfg: &SweepConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for arm in &cfg.sweep.arms {
        let bases = arm
            .bases
            .clone()
            .unwrap_or_else(|| vec![cfg.base.loss.base]);
        let margined = arm.margin_mode.is_some_and(|m| m != MarginMode::None);
        let default_margin = cfg.base.loss.margin.unwrap_or_default();
        let ks = if margined {
            arm.k.clone().unwrap_or_else(|| vec![default_margin.k])
        } else {
            vec![0.0]
        };
        let taus = if margined {
            arm.tau.clone().unwrap_or_else(|| vec![default_margin.tau])
        } else {
            vec![1.0]
        };
        for &base in &bases {
            for &k in &ks {
                for &tau in &taus {
                    for &seed in &cfg.sweep.seeds {
                        let mut exp = cfg.base.clone();
                        exp.loss.base = base;
                        exp.loss.baseline = arm.baseline;
                        exp.loss.margin = arm.margin_mode.map(|mode| MarginSection {
                            k,
                            tau,
                            mode,
                            gradient: arm.gradient.unwrap_or_default(),
                        });
                        if let Some(head) = arm.head {
                            exp.model.head = head;
                        }
                        cells.push(Cell {
                            arm: arm.name.clone(),
                            base,
                            head: exp.model.head,
                            k,
                            tau,
                            seed,
                            cfg: exp,
                        });
                    }
                }
            }
        }
    }
    cells
}

fn run_cell(cell: &Cell) -> RowOut {
    let result = runner::load_or_generate(&cell.cfg, None, cell.seed)
        .and_then(|data| runner::execute(&cell.cfg, &data, cell.seed));
    match result {
        Ok(outcome) => RowOut {
            arm: cell.arm.clone(),
            base: cell.base,
            head: cell.head,
            k: cell.k,
            tau: cell.tau,
            seed: cell.seed,
            status: "ok",
            overall: Some(outcome.accuracy.overall),
            many: outcome.accuracy.many,
            medium: outcome.accuracy.medium,
            few: outcome.accuracy.few,
            final_loss: outcome.logs.last().map(|l| l.mean_loss),
            error: String::new(),
        },
        Err(e) => RowOut {
            arm: cell.arm.clone(),
            base: cell.base,
            head: cell.head,
            k: cell.k,
            tau: cell.tau,
            seed: cell.seed,
            status: "error",
            overall: None,
            many: None,
            medium: None,
            few: None,
            final_loss: None,
            error: e.to_string(),
        },
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn kebab<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| match j {
            serde_json::Value::String(s) => Some(s),
            serde_json::Value::Object(m) => {
                m.get("kind").and_then(|k| k.as_str().map(String::from))
            }
            _ => None,
        })
        .unwrap_or_else(|| "?".to_string())
}

fn runs_csv(rows: &[RowOut]) -> String {
    let mut out =
        String::from("arm,base,head,k,tau,seed,status,overall,many,medium,few,final_loss,error\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.arm,
            kebab(&r.base),
            kebab(&r.head),
            r.k,
            r.tau,
            r.seed,
            r.status,
            fmt_opt(r.overall),
            fmt_opt(r.many),
            fmt_opt(r.medium),
            fmt_opt(r.few),
            fmt_opt(r.final_loss),
            r.error.replace([',', '\n'], ";"),
        )
        .expect("string write");
    }
    out
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed-aggregated rows, in first-appearance order of the config cells.
fn aggregates_csv(rows: &[RowOut]) -> String {
    let mut order: Vec<(String, BaseLoss, f64, f64)> = Vec::new();
    for r in rows {
        let key = (r.arm.clone(), r.base, r.k, r.tau);
        if !order.contains(&key) {
            order.push(key);
        }
    }
    let mut out = String::from(
        "arm,base,k,tau,n,overall_mean,overall_std,few_mean,few_std\n",
    );
    for (arm, base, k, tau) in order {
        let ok: Vec<&RowOut> = rows
            .iter()
            .filter(|r| {
                r.arm == arm && r.base == base && r.k == k && r.tau == tau && r.status == "ok"
            })
            .collect();
        let overalls: Vec<f64> = ok.iter().filter_map(|r| r.overall).collect();
        let fews: Vec<f64> = ok.iter().filter_map(|r| r.few).collect();
        let (om, os) = if overalls.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_std(&overalls)
        };
        let few_cols = if fews.is_empty() {
            (String::new(), String::new())
        } else {
            let (fm, fs) = mean_std(&fews);
            (fm.to_string(), fs.to_string())
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            arm,
            kebab(&base),
            k,
            tau,
            overalls.len(),
            om,
            os,
            few_cols.0,
            few_cols.1,
        )
        .expect("string write");
    }
    out
}

pub fn sweep_cmd(config: &Path, out: Option<&Path>, threads: Option<usize>) -> Result<()> {
    let cfg = SweepConfig::load(config)?;
    let cells = expand(&cfg);
    let dir = resolve_out_root(out, cfg.base.out_root.as_deref()).join(&cfg.base.label);
    std::fs::create_dir_all(&dir)?;

    let rows: Vec<RowOut> = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(|| cells.par_iter().map(run_cell).collect()),
        None => cells.par_iter().map(run_cell).collect(),
    };

    std::fs::write(dir.join("runs.csv"), runs_csv(&rows))?;
    std::fs::write(dir.join("aggregates.csv"), aggregates_csv(&rows))?;

    let failures = rows.iter().filter(|r| r.status != "ok").count();
    println!(
        "{} runs ({} failed) -> {}",
        rows.len(),
        failures,
        dir.display()
    );
    Ok(())
}
