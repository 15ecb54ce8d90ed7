//! Design-axis grids and the multi-seed runner.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use ddtr_core::metrics::{aggregate, MetricReport, MetricValues};
use ddtr_core::model::{count_params_and_flops, token_count};
use ddtr_core::QueryInit;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Splits;
use crate::eval::evaluate;
use crate::train::{train, LossTrace};
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Resolution,
    EncoderLayers,
    FeatureLevels,
    NumQueries,
    Decoding,
}

impl Axis {
    pub const ALL: [Axis; 5] =
        [Axis::Resolution, Axis::EncoderLayers, Axis::FeatureLevels, Axis::NumQueries, Axis::Decoding];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Resolution => "resolution",
            Axis::EncoderLayers => "encoder_layers",
            Axis::FeatureLevels => "feature_levels",
            Axis::NumQueries => "num_queries",
            Axis::Decoding => "decoding",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Axis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Axis::ALL.iter().map(|a| a.name()).collect();
            HarnessError::Config(format!("unknown axis `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

pub const QUERY_GRID: [usize; 8] = [5, 10, 25, 50, 100, 200, 400, 800];

/// One configuration of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub label: String,
    /// Abscissa for plot files.
    pub x: f64,
    pub config: ExperimentConfig,
}

/// The cells of `axis`, each a copy of `base` with that axis changed.
pub fn grid(axis: Axis, base: &ExperimentConfig) -> Vec<GridCell> {
    let cell = |label: String, x: f64, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut config = base.clone();
        f(&mut config);
        GridCell { label, x, config }
    };
    match axis {
        Axis::Resolution => ddtr_core::model::RESOLUTION_SCALES
            .iter()
            .map(|&s| cell(format!("scale={s}"), s, &|c| c.model.resolution_scale = s))
            .collect(),
        Axis::EncoderLayers => ddtr_core::model::ENCODER_DEPTHS
            .iter()
            .map(|&n| cell(format!("encoder_layers={n}"), n as f64, &|c| c.model.encoder_layers = n))
            .collect(),
        Axis::FeatureLevels => [vec![1, 2, 3, 4], vec![1], vec![2], vec![3]]
            .into_iter()
            .enumerate()
            .map(|(i, levels)| {
                let label = if levels.len() == 4 { "levels=all".to_string() } else { format!("levels={}", levels[0]) };
                cell(label, i as f64, &|c| c.model.feature_levels = levels.clone())
            })
            .collect(),
        Axis::NumQueries => {
            QUERY_GRID.iter().map(|&n| cell(format!("queries={n}"), n as f64, &|c| c.model.num_queries = n)).collect()
        }
        Axis::Decoding => [
            (QueryInit::Static, false),
            (QueryInit::Pure, false),
            (QueryInit::Mixed, false),
            (QueryInit::Static, true),
            (QueryInit::Pure, true),
        ]
        .into_iter()
        .enumerate()
        .map(|(i, (init, ibbr))| {
            let label = format!("{init}{}", if ibbr { "+ibbr" } else { "" });
            cell(label, i as f64, &|c| {
                c.model.query_init = init;
                c.model.ibbr = ibbr;
            })
        })
        .collect(),
    }
}

/// Outcome of one seed of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: MetricValues,
    pub trace: LossTrace,
    /// Training plus evaluation wall clock.
    pub seconds: f64,
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub axis: Option<Axis>,
    pub label: String,
    pub x: f64,
    pub digest: String,
    pub config: ExperimentConfig,
    pub report: MetricReport,
    pub params: usize,
    pub madds: u64,
    /// Wall clock summed over seeds.
    pub seconds: f64,
}

/// Trains and evaluates one seed.
pub fn run_seed(cfg: &ExperimentConfig, splits: &Splits, seed: u64) -> Result<SeedRun, HarnessError> {
    let start = std::time::Instant::now();
    let out = train(cfg, &splits.train, seed)?;
    let metrics = evaluate(&out.model, &splits.test, cfg.eval_class, None)?;
    Ok(SeedRun { seed, metrics, trace: out.trace, seconds: start.elapsed().as_secs_f64() })
}

/// Parallel job count: `DDTR_JOBS` if set to a positive integer, else 1.
pub fn job_count() -> usize {
    std::env::var("DDTR_JOBS").ok().and_then(|v| v.trim().parse().ok()).filter(|&n: &usize| n > 0).unwrap_or(1)
}

/// Runs `jobs` closures on up to `workers` threads; results keep input order.
pub fn run_parallel<T: Send, F: Fn(usize) -> T + Sync>(count: usize, workers: usize, f: F) -> Vec<T> {
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, count.max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("job counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= count {
                    break;
                }
                let r = f(i);
                results.lock().expect("results")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("results").into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Builds a row from finished seed runs.
pub fn make_row(
    axis: Option<Axis>,
    cell: &GridCell,
    runs: &[SeedRun],
    height: usize,
    width: usize,
) -> Result<ResultRow, HarnessError> {
    let cx = count_params_and_flops(&cell.config.model, height, width)?;
    let per_seed: Vec<MetricValues> = runs.iter().map(|r| r.metrics).collect();
    Ok(ResultRow {
        axis,
        label: cell.label.clone(),
        x: cell.x,
        digest: cell.config.digest(),
        config: cell.config.clone(),
        report: aggregate(&per_seed),
        params: cx.params,
        madds: cx.madds,
        seconds: runs.iter().map(|r| r.seconds).sum(),
    })
}

/// Runs every (cell, seed) job, `DDTR_JOBS` at a time, and returns one row per cell.
pub fn run_cells(axis: Option<Axis>, cells: &[GridCell], splits: &Splits) -> Result<Vec<ResultRow>, HarnessError> {
    let (h, w) = splits.test.first().or(splits.train.first()).map_or((64, 64), |img| (img.height, img.width));
    for c in cells {
        c.config.validate()?;
        let m = &c.config.model;
        let tokens = token_count(m, h, w);
        if m.query_init != QueryInit::Static && m.num_queries > tokens {
            return Err(HarnessError::Config(format!(
                "{}: {} queries need at least as many encoder tokens, but levels {:?} give only {tokens} on a {h}×{w} image",
                c.label, m.num_queries, m.feature_levels
            )));
        }
    }
    let jobs: Vec<(usize, u64)> =
        cells.iter().enumerate().flat_map(|(i, c)| c.config.seeds.iter().map(move |&s| (i, s))).collect();
    let results = run_parallel(jobs.len(), job_count(), |j| {
        let (i, seed) = jobs[j];
        run_seed(&cells[i].config, splits, seed)
    });
    let mut results = results.into_iter();
    cells
        .iter()
        .map(|cell| {
            let runs = (&mut results).take(cell.config.seeds.len()).collect::<Result<Vec<_>, _>>()?;
            make_row(axis, cell, &runs, h, w)
        })
        .collect()
}

/// Runs the standard grid for `axis` around `base`.
pub fn ablate(axis: Axis, base: &ExperimentConfig, splits: &Splits) -> Result<Vec<ResultRow>, HarnessError> {
    run_cells(Some(axis), &grid(axis, base), splits)
}
