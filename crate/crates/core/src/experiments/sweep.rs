//! Multi-run protocols: seed sweeps, the (tau, p_active) grid and the width sweep.
//!
//! Runs are independent jobs. With the `parallel` feature they are spread
//! over a bounded rayon pool; each job still trains sequentially, so results
//! do not depend on the number of workers. When an output directory is given,
//! every finished run is stored under its config hash and reused on the next
//! invocation instead of being retrained.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Architecture;
use crate::randomout::RandomOutConfig;

use super::config::{Condition, DatasetSpec, TrainConfig};
use super::stats::{correlation, mean, median, std_dev};
use super::train::{self, load_run, run_dir, save_run, RunArtifact};

/// RandomOut settings used when a base config carries none.
pub fn default_randomout() -> RandomOutConfig {
    RandomOutConfig {
        tau: 1e-12,
        p_active: 1.0,
        check_every: 1,
    }
}

fn load_datasets(cfgs: &[TrainConfig]) -> Result<HashMap<DatasetSpec, (Dataset, Dataset)>> {
    let mut cache = HashMap::new();
    for cfg in cfgs {
        if !cache.contains_key(&cfg.dataset) {
            cache.insert(cfg.dataset.clone(), cfg.dataset.load()?);
        }
    }
    Ok(cache)
}

fn run_one(cfg: &TrainConfig, data: &HashMap<DatasetSpec, (Dataset, Dataset)>, out: Option<&Path>) -> Result<RunArtifact> {
    if let Some(out) = out {
        if let Some(done) = load_run(&run_dir(out, cfg))? {
            return Ok(done);
        }
    }
    let (tr, te) = &data[&cfg.dataset];
    let artifact = train::train_on(cfg, tr, te)?;
    if let Some(out) = out {
        save_run(&artifact, &run_dir(out, cfg))?;
    }
    Ok(artifact)
}

/// Runs every config one after another, in order.
pub fn run_jobs_sequential(cfgs: &[TrainConfig], out: Option<&Path>) -> Result<Vec<RunArtifact>> {
    let data = load_datasets(cfgs)?;
    cfgs.iter().map(|c| run_one(c, &data, out)).collect()
}

/// Runs every config on a pool of `jobs` workers; results come back in input order.
#[cfg(feature = "parallel")]
pub fn run_jobs(cfgs: &[TrainConfig], jobs: usize, out: Option<&Path>) -> Result<Vec<RunArtifact>> {
    use rayon::prelude::*;

    if jobs <= 1 {
        return run_jobs_sequential(cfgs, out);
    }
    let data = load_datasets(cfgs)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| cfgs.par_iter().map(|c| run_one(c, &data, out)).collect())
}

#[cfg(not(feature = "parallel"))]
pub fn run_jobs(cfgs: &[TrainConfig], _jobs: usize, out: Option<&Path>) -> Result<Vec<RunArtifact>> {
    run_jobs_sequential(cfgs, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub config_hash: String,
    pub seed: u64,
    pub condition: Condition,
    pub width: usize,
    pub tau: Option<f64>,
    pub p_active: Option<f64>,
    pub final_test_acc: f64,
    pub diverged: bool,
    pub failed: bool,
    pub total_resets: usize,
}

impl From<&RunArtifact> for RunRow {
    fn from(a: &RunArtifact) -> Self {
        let s = &a.summary;
        RunRow {
            config_hash: s.config_hash.clone(),
            seed: s.config.seed,
            condition: s.config.condition,
            width: s.config.model.conv_width,
            tau: s.config.randomout.map(|r| r.tau),
            p_active: s.config.randomout.map(|r| r.p_active),
            final_test_acc: s.final_test_acc,
            diverged: s.diverged,
            failed: s.failed,
            total_resets: s.total_resets,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    pub condition: Condition,
    pub runs: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub diverged: usize,
    /// Finished, but within the failure margin of chance.
    pub chance_level: usize,
    /// `(diverged + chance_level) / runs`
    pub failure_rate: f64,
}

impl ConditionStats {
    fn from_runs(condition: Condition, runs: &[&RunArtifact]) -> Self {
        let accs: Vec<f64> = runs.iter().map(|r| r.summary.final_test_acc).collect();
        let diverged = runs.iter().filter(|r| r.summary.diverged).count();
        let chance_level = runs.iter().filter(|r| r.summary.failed && !r.summary.diverged).count();
        ConditionStats {
            condition,
            runs: runs.len(),
            mean: mean(&accs),
            median: median(&accs),
            std: std_dev(&accs),
            diverged,
            chance_level,
            failure_rate: (diverged + chance_level) as f64 / runs.len().max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainStats {
    pub mean: f64,
    pub median: f64,
    pub wins: usize,
    pub losses: usize,
}

fn paired_gain(base: &[f64], treated: &[f64]) -> GainStats {
    let gains: Vec<f64> = treated.iter().zip(base).map(|(t, b)| t - b).collect();
    GainStats {
        mean: mean(&gains),
        median: median(&gains),
        wins: gains.iter().filter(|g| **g > 0.0).count(),
        losses: gains.iter().filter(|g| **g < 0.0).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSweepSummary {
    pub base_config_hash: String,
    pub seeds: Vec<u64>,
    pub conditions: Vec<ConditionStats>,
    /// RandomOut minus base, paired by seed; present when both conditions ran.
    pub randomout_gain: Option<GainStats>,
    pub runs: Vec<RunRow>,
}

pub struct SeedSweep {
    pub summary: SeedSweepSummary,
    /// Artifacts in `conditions x seeds` order.
    pub runs: Vec<RunArtifact>,
}

impl SeedSweep {
    pub fn runs_for(&self, condition: Condition) -> impl Iterator<Item = &RunArtifact> {
        self.runs.iter().filter(move |r| r.summary.config.condition == condition)
    }
}

fn require_seeds(seeds: &[u64], min: usize) -> Result<()> {
    if seeds.len() < min {
        return Err(Error::Config(format!("need at least {min} seeds, got {}", seeds.len())));
    }
    Ok(())
}

/// Every `(condition, seed)` pair from `base`; only the seed and condition differ between runs.
pub fn seed_sweep(
    base: &TrainConfig,
    seeds: &[u64],
    conditions: &[Condition],
    jobs: usize,
    out: Option<&Path>,
) -> Result<SeedSweep> {
    require_seeds(seeds, 2)?;
    let ro = base.randomout.unwrap_or_else(default_randomout);
    let cfgs: Vec<TrainConfig> = conditions
        .iter()
        .flat_map(|&c| {
            seeds.iter().map(move |&s| {
                let mut cfg = base.with_condition(c, ro);
                cfg.seed = s;
                cfg
            })
        })
        .collect();
    for c in &cfgs {
        c.validate()?;
    }
    let runs = run_jobs(&cfgs, jobs, out)?;

    let by_condition = |c: Condition| -> Vec<&RunArtifact> {
        runs.iter().filter(|r| r.summary.config.condition == c).collect()
    };
    let stats = conditions.iter().map(|&c| ConditionStats::from_runs(c, &by_condition(c))).collect();
    let accs = |c: Condition| -> Vec<f64> { by_condition(c).iter().map(|r| r.summary.final_test_acc).collect() };
    let randomout_gain = (conditions.contains(&Condition::Base) && conditions.contains(&Condition::RandomOut))
        .then(|| paired_gain(&accs(Condition::Base), &accs(Condition::RandomOut)));

    let summary = SeedSweepSummary {
        base_config_hash: base.hash(),
        seeds: seeds.to_vec(),
        conditions: stats,
        randomout_gain,
        runs: runs.iter().map(RunRow::from).collect(),
    };
    if let Some(out) = out {
        train::write_json(&out.join("seed_sweep_summary.json"), &summary)?;
    }
    Ok(SeedSweep { summary, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub base_config_hash: String,
    pub seeds: Vec<u64>,
    pub taus: Vec<f64>,
    pub ps: Vec<f64>,
    pub base_mean: f64,
    /// `mean_acc[i][j]` for `taus[i]`, `ps[j]`.
    pub mean_acc: Vec<Vec<f64>>,
    /// Mean over seeds of `acc(randomout) - acc(base)`, same layout.
    pub gain: Vec<Vec<f64>>,
    /// Correlation of gain with p_active along the smallest tau.
    pub gain_p_correlation_at_min_tau: Option<f64>,
    /// `(tau, p_active)` of the largest gain; ties go to the first cell in row-major order.
    pub best_cell: (f64, f64),
    pub runs: Vec<RunRow>,
}

impl GridSummary {
    /// Gain matrix with one row per tau and one column per p_active.
    pub fn heatmap_csv(&self) -> String {
        let mut s = String::from("tau");
        for p in &self.ps {
            let _ = write!(s, ",p={p}");
        }
        s.push('\n');
        for (tau, row) in self.taus.iter().zip(&self.gain) {
            let _ = write!(s, "{tau:e}");
            for g in row {
                let _ = write!(s, ",{g}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn default_grid() -> (Vec<f64>, Vec<f64>) {
    (
        vec![1e-14, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4],
        vec![0.25, 0.5, 0.75, 1.0],
    )
}

/// Mean paired accuracy gain of RandomOut over the base run for every `(tau, p_active)`.
pub fn grid_search(
    base: &TrainConfig,
    taus: &[f64],
    ps: &[f64],
    seeds: &[u64],
    jobs: usize,
    out: Option<&Path>,
) -> Result<GridSummary> {
    require_seeds(seeds, 1)?;
    if taus.is_empty() || ps.is_empty() {
        return Err(Error::Config("grid needs at least one tau and one p_active".into()));
    }
    let check_every = base.randomout.map_or(1, |r| r.check_every);
    let mut cfgs = Vec::new();
    for &s in seeds {
        let mut cfg = base.with_condition(Condition::Base, default_randomout());
        cfg.seed = s;
        cfgs.push(cfg);
    }
    for &tau in taus {
        for &p in ps {
            let ro = RandomOutConfig {
                tau,
                p_active: p,
                check_every,
            };
            ro.validate()?;
            for &s in seeds {
                let mut cfg = base.with_condition(Condition::RandomOut, ro);
                cfg.seed = s;
                cfgs.push(cfg);
            }
        }
    }
    let runs = run_jobs(&cfgs, jobs, out)?;
    let acc = |i: usize| runs[i].summary.final_test_acc;
    let n = seeds.len();
    let base_accs: Vec<f64> = (0..n).map(acc).collect();

    let mut mean_acc = vec![vec![0.0; ps.len()]; taus.len()];
    let mut gain = vec![vec![0.0; ps.len()]; taus.len()];
    for i in 0..taus.len() {
        for j in 0..ps.len() {
            let start = n + (i * ps.len() + j) * n;
            let cell: Vec<f64> = (start..start + n).map(acc).collect();
            mean_acc[i][j] = mean(&cell);
            gain[i][j] = paired_gain(&base_accs, &cell).mean;
        }
    }
    let mut best = (0, 0);
    for i in 0..taus.len() {
        for j in 0..ps.len() {
            if gain[i][j] > gain[best.0][best.1] {
                best = (i, j);
            }
        }
    }
    let min_tau = (0..taus.len())
        .min_by(|&a, &b| taus[a].total_cmp(&taus[b]))
        .expect("non-empty");
    let summary = GridSummary {
        base_config_hash: base.hash(),
        seeds: seeds.to_vec(),
        taus: taus.to_vec(),
        ps: ps.to_vec(),
        base_mean: mean(&base_accs),
        mean_acc,
        gain_p_correlation_at_min_tau: correlation(ps, &gain[min_tau]),
        best_cell: (taus[best.0], ps[best.1]),
        gain,
        runs: runs.iter().map(RunRow::from).collect(),
    };
    if let Some(out) = out {
        train::write_json(&out.join("grid_summary.json"), &summary)?;
        let path = out.join("heatmap.csv");
        std::fs::write(&path, summary.heatmap_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthRow {
    pub width: usize,
    pub base_mean: f64,
    pub randomout_mean: f64,
    /// Smallest swept width whose base accuracy reaches this width's RandomOut accuracy.
    pub matching_base_width: Option<usize>,
    /// `matching_base_width - width`: how many filters RandomOut is worth.
    pub effective_extra_filters: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthSummary {
    pub base_config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<WidthRow>,
    pub base_non_decreasing: bool,
    pub randomout_non_decreasing: bool,
    /// Widths where RandomOut's mean accuracy is at least the base mean.
    pub randomout_at_least_base: usize,
    pub runs: Vec<RunRow>,
}

impl WidthSummary {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("width,base_mean,randomout_mean,matching_base_width,effective_extra_filters\n");
        for r in &self.rows {
            let opt = |v: Option<String>| v.unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.width,
                r.base_mean,
                r.randomout_mean,
                opt(r.matching_base_width.map(|w| w.to_string())),
                opt(r.effective_extra_filters.map(|e| e.to_string()))
            );
        }
        s
    }
}

fn non_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] >= w[0])
}

/// Base and RandomOut CraterCNN at each width, averaged over `seeds`.
pub fn width_sweep(
    base: &TrainConfig,
    widths: &[usize],
    seeds: &[u64],
    jobs: usize,
    out: Option<&Path>,
) -> Result<WidthSummary> {
    require_seeds(seeds, 1)?;
    if base.model.name != Architecture::CraterCnn {
        return Err(Error::Config("width sweep is defined for CraterCNN".into()));
    }
    let ro = base.randomout.unwrap_or_else(default_randomout);
    let mut cfgs = Vec::new();
    for &w in widths {
        for cond in [Condition::Base, Condition::RandomOut] {
            for &s in seeds {
                let mut cfg = base.with_condition(cond, ro);
                cfg.model.conv_width = w;
                cfg.seed = s;
                cfgs.push(cfg);
            }
        }
    }
    let runs = run_jobs(&cfgs, jobs, out)?;
    let n = seeds.len();
    let cell_mean = |start: usize| mean(&runs[start..start + n].iter().map(|r| r.summary.final_test_acc).collect::<Vec<_>>());
    let base_means: Vec<f64> = (0..widths.len()).map(|i| cell_mean(2 * i * n)).collect();
    let ro_means: Vec<f64> = (0..widths.len()).map(|i| cell_mean(2 * i * n + n)).collect();

    let rows: Vec<WidthRow> = widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let matching = widths
                .iter()
                .zip(&base_means)
                .filter(|(_, &b)| b >= ro_means[i])
                .map(|(&k, _)| k)
                .min();
            WidthRow {
                width: w,
                base_mean: base_means[i],
                randomout_mean: ro_means[i],
                matching_base_width: matching,
                effective_extra_filters: matching.map(|k| k as i64 - w as i64),
            }
        })
        .collect();
    let summary = WidthSummary {
        base_config_hash: base.hash(),
        seeds: seeds.to_vec(),
        base_non_decreasing: non_decreasing(&base_means),
        randomout_non_decreasing: non_decreasing(&ro_means),
        randomout_at_least_base: rows.iter().filter(|r| r.randomout_mean >= r.base_mean).count(),
        rows,
        runs: runs.iter().map(RunRow::from).collect(),
    };
    if let Some(out) = out {
        train::write_json(&out.join("width_summary.json"), &summary)?;
        let path = out.join("width.csv");
        std::fs::write(&path, summary.table_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}
