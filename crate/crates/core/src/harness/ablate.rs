use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::train::train;
use crate::{Error, Result};

pub const RUNS_FILE: &str = "runs.csv";
pub const REPORT_FILE: &str = "report.csv";

const METRIC_COLUMNS: [&str; 3] = ["miou", "aerr", "merr"];

/// One grid dimension: a config key and the values it takes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

fn default_values(key: &str) -> Option<&'static [&'static str]> {
    Some(match key {
        "setting" => &["onelabel", "random", "full"],
        "strategy" => &["gaussian", "vector", "pixel"],
        "extraction" => &["region", "patch"],
        "distance" => &["wasserstein", "jeffreys", "kl"],
        "cov_mode" => &["diag", "full"],
        "negative_source" => &["partner_map", "both_maps"],
        _ => return None,
    })
}

/// Parses `key` (every value of an enumerated key) or `key=v1,v2,...`.
pub fn parse_axis(text: &str) -> Result<Axis> {
    let (key, values) = match text.split_once('=') {
        Some((k, v)) => (
            k.trim(),
            v.split(',')
                .map(|s| s.trim().to_string())
                .collect::<Vec<_>>(),
        ),
        None => {
            let k = text.trim();
            let vals = default_values(k).ok_or_else(|| {
                Error::Config(format!(
                    "axis '{k}' needs explicit values (key=v1,v2); keys with implicit values: setting, strategy, extraction, distance, cov_mode, negative_source"
                ))
            })?;
            (k, vals.iter().map(|s| s.to_string()).collect())
        }
    };
    if matches!(key, "data_dir" | "out_dir" | "seed") {
        return Err(Error::Config(format!("'{key}' cannot be an ablation axis")));
    }
    if values.is_empty() || values.iter().any(String::is_empty) {
        return Err(Error::Config(format!("axis '{key}' has an empty value")));
    }
    let mut probe = RunConfig::new("");
    for v in &values {
        probe.set(key, v)?;
    }
    Ok(Axis {
        key: key.to_string(),
        values,
    })
}

fn cartesian(axes: &[Axis]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |cells, axis| {
        cells
            .iter()
            .flat_map(|c| {
                axis.values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect()
    })
}

fn run_name(axes: &[Axis], cell: &[String], seed: u64) -> String {
    let mut parts: Vec<String> = axes
        .iter()
        .zip(cell)
        .map(|(a, v)| format!("{}-{v}", a.key))
        .collect();
    parts.push(format!("seed{seed}"));
    parts
        .join("_")
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn runs_header(axes: &[Axis]) -> String {
    let mut cols: Vec<&str> = axes.iter().map(|a| a.key.as_str()).collect();
    cols.push("seed");
    cols.extend(METRIC_COLUMNS);
    cols.join(",")
}

/// Trains every cell of the grid once per seed under `base.out_dir/runs/`
/// and appends each final validation row to `runs.csv` as it finishes.
/// Cells already present in `runs.csv` are skipped, so an interrupted grid
/// resumes. `{seed}` in `base.data_dir` is replaced by the run seed.
/// Finishes by writing `report.csv`.
pub fn ablate(base: &RunConfig, axes: &[Axis], seeds: &[u64]) -> Result<PathBuf> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let root = base.out_dir.clone();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let runs_path = root.join(RUNS_FILE);
    let header = runs_header(axes);
    let mut done = HashSet::new();
    match fs::read_to_string(&runs_path) {
        Ok(text) => {
            let mut lines = text.lines();
            if lines.next() != Some(header.as_str()) {
                return Err(Error::Config(format!(
                    "{} was written for a different grid (expected header '{header}')",
                    runs_path.display()
                )));
            }
            for line in lines.filter(|l| !l.is_empty()) {
                let fields: Vec<&str> = line.split(',').collect();
                done.insert(fields[..=axes.len()].join(","));
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            fs::write(&runs_path, format!("{header}\n")).map_err(|e| Error::io(&runs_path, e))?;
        }
        Err(e) => return Err(Error::io(&runs_path, e)),
    }

    for cell in cartesian(axes) {
        for &seed in seeds {
            let mut key: Vec<String> = cell.clone();
            key.push(seed.to_string());
            let key = key.join(",");
            if done.contains(&key) {
                continue;
            }
            let mut cfg = base.clone();
            for (axis, v) in axes.iter().zip(&cell) {
                cfg.set(&axis.key, v)?;
            }
            cfg.seed = seed;
            cfg.data_dir = PathBuf::from(
                base.data_dir
                    .to_string_lossy()
                    .replace("{seed}", &seed.to_string()),
            );
            cfg.out_dir = root.join("runs").join(run_name(axes, &cell, seed));
            cfg.validate()?;
            let outcome = train(&cfg)?;
            let last = outcome
                .records
                .last()
                .ok_or_else(|| Error::Config("training produced no records".into()))?;
            let row = format!("{key},{:.6},{:.6},{:.6}\n", last.miou, last.aerr, last.merr);
            let mut f = OpenOptions::new()
                .append(true)
                .open(&runs_path)
                .map_err(|e| Error::io(&runs_path, e))?;
            f.write_all(row.as_bytes())
                .map_err(|e| Error::io(&runs_path, e))?;
        }
    }
    write_report(&root)?;
    Ok(root.join(REPORT_FILE))
}

/// Per-cell aggregate over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub values: Vec<String>,
    pub runs: usize,
    /// `[miou, aerr, merr]`.
    pub mean: [f64; 3],
    /// Sample standard deviation; 0 for a single run.
    pub std: [f64; 3],
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Rebuilds `report.csv` in `dir` from its `runs.csv`: one `run` row per
/// run, then one `summary` row per cell with seed means and deviations.
pub fn write_report(dir: &Path) -> Result<Vec<CellSummary>> {
    let runs_path = dir.join(RUNS_FILE);
    let text = fs::read_to_string(&runs_path).map_err(|e| Error::io(&runs_path, e))?;
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::format(&runs_path, "empty runs file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[cols.len() - 4..] != ["seed", "miou", "aerr", "merr"] {
        return Err(Error::format(
            &runs_path,
            format!("unexpected header '{header}'"),
        ));
    }
    let n_axes = cols.len() - 4;

    let mut cells: Vec<(Vec<String>, Vec<(u64, [f64; 3])>)> = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::format(&runs_path, format!("malformed row '{line}'")));
        }
        let bad = || Error::format(&runs_path, format!("malformed row '{line}'"));
        let seed: u64 = fields[n_axes].parse().map_err(|_| bad())?;
        let mut m = [0.0; 3];
        for (k, slot) in m.iter_mut().enumerate() {
            *slot = fields[n_axes + 1 + k].parse().map_err(|_| bad())?;
        }
        let values: Vec<String> = fields[..n_axes].iter().map(|s| s.to_string()).collect();
        match cells.iter_mut().find(|(v, _)| *v == values) {
            Some((_, runs)) => runs.push((seed, m)),
            None => cells.push((values, vec![(seed, m)])),
        }
    }

    let mut out = String::from("kind,");
    for c in &cols[..n_axes] {
        out.push_str(c);
        out.push(',');
    }
    out.push_str("seed,miou,aerr,merr,miou_std,aerr_std,merr_std\n");
    let prefix = |values: &[String]| values.iter().map(|v| format!("{v},")).collect::<String>();
    let mut summaries = Vec::with_capacity(cells.len());
    for (values, runs) in &mut cells {
        runs.sort_by_key(|r| r.0);
        for (seed, m) in runs.iter() {
            out.push_str(&format!(
                "run,{}{seed},{:.6},{:.6},{:.6},,,\n",
                prefix(values),
                m[0],
                m[1],
                m[2]
            ));
        }
    }
    for (values, runs) in &cells {
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for k in 0..3 {
            let xs: Vec<f64> = runs.iter().map(|r| r.1[k]).collect();
            (mean[k], std[k]) = mean_std(&xs);
        }
        out.push_str(&format!(
            "summary,{}all,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            prefix(values),
            mean[0],
            mean[1],
            mean[2],
            std[0],
            std[1],
            std[2]
        ));
        summaries.push(CellSummary {
            values: values.clone(),
            runs: runs.len(),
            mean,
            std,
        });
    }
    let report_path = dir.join(REPORT_FILE);
    fs::write(&report_path, out).map_err(|e| Error::io(&report_path, e))?;
    Ok(summaries)
}
