//! CSV, JSON and plot-data rendering of result rows.

use std::fs;
use std::path::{Path, PathBuf};

use ddtr_core::metrics::{MetricValues, METRIC_NAMES};

use crate::ablate::ResultRow;
use crate::HarnessError;

pub const CSV_HEADER: [&str; 24] = [
    "axis",
    "label",
    "digest",
    "resolution_scale",
    "encoder_layers",
    "feature_levels",
    "num_queries",
    "query_init",
    "ibbr",
    "seeds",
    "fauc_1_10_mean",
    "fauc_1_10_sd",
    "ap_10_mean",
    "ap_10_sd",
    "ap_10_50_mean",
    "ap_10_50_sd",
    "loc_l_mean",
    "loc_l_sd",
    "loc_l_top10_mean",
    "loc_l_top10_sd",
    "params",
    "madds",
    "seconds",
    "x",
];

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| x.to_string())
}

fn csv_record(row: &ResultRow) -> Vec<String> {
    let m = &row.config.model;
    let levels: Vec<String> = m.feature_levels.iter().map(usize::to_string).collect();
    let mut rec = vec![
        row.axis.map_or_else(String::new, |a| a.to_string()),
        row.label.clone(),
        row.digest.clone(),
        m.resolution_scale.to_string(),
        m.encoder_layers.to_string(),
        levels.join(" "),
        m.num_queries.to_string(),
        m.query_init.to_string(),
        m.ibbr.to_string(),
        row.config.seeds.len().to_string(),
    ];
    let (mean, sd) = (row.report.mean.as_array(), row.report.sd.as_array());
    for i in 0..METRIC_NAMES.len() {
        rec.push(num(mean[i]));
        rec.push(num(sd[i]));
    }
    rec.push(row.params.to_string());
    rec.push(row.madds.to_string());
    rec.push(row.seconds.to_string());
    rec.push(row.x.to_string());
    rec
}

pub fn to_csv(rows: &[ResultRow]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(csv_record(r))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Config(format!("flushing CSV: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

pub fn to_json(rows: &[ResultRow]) -> String {
    let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
    s.push('\n');
    s
}

pub fn rows_from_json(text: &str) -> Result<Vec<ResultRow>, HarnessError> {
    serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("results file: {e}")))
}

fn metric(values: &MetricValues, i: usize) -> Option<f64> {
    values.as_array()[i]
}

/// `(file name, contents)` of one `x mean sd` table per metric.
pub fn plot_files(rows: &[ResultRow]) -> Vec<(String, String)> {
    let prefix = rows.first().and_then(|r| r.axis).map_or_else(|| "rows".to_string(), |a| a.to_string());
    METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut s = format!("# x mean sd ({name})\n");
            for r in rows {
                s.push_str(&format!("{} {} {}\n", r.x, num(metric(&r.report.mean, i)), num(metric(&r.report.sd, i))));
            }
            (format!("{prefix}_{name}.dat"), s)
        })
        .collect()
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, HarnessError> {
    fs::write(&path, contents).map_err(|source| HarnessError::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Writes `results.csv`, `results.json` and the plot tables into `dir`.
pub fn write_report(rows: &[ResultRow], dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::Config("no result rows to report".into()));
    }
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })?;
    let mut written =
        vec![write(dir.join("results.csv"), &to_csv(rows)?)?, write(dir.join("results.json"), &to_json(rows))?];
    for (name, contents) in plot_files(rows) {
        written.push(write(dir.join(name), &contents)?);
    }
    Ok(written)
}
