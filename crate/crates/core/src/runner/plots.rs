//! Plot-ready CSV series recomputed from per-seed results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{read_json, MeanStd, Method, SeedResult};
use crate::error::{Error, Result};
use crate::streams::StreamKind;

fn completed_results(out_dir: &Path) -> Result<Vec<(String, SeedResult)>> {
    let mut found = Vec::new();
    let entries = fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut exp_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    exp_dirs.sort();
    for exp in exp_dirs {
        let name = exp.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let Some((_, short_hash)) = name.rsplit_once('-') else {
            continue;
        };
        let mut seeds: Vec<PathBuf> = fs::read_dir(&exp)
            .map_err(|e| Error::io(&exp, e))?
            .filter_map(|e| e.ok().map(|e| e.path().join("result.json")))
            .filter(|p| p.is_file())
            .collect();
        seeds.sort();
        for path in seeds {
            let r: SeedResult = read_json(&path)?;
            if !r.config_hash.starts_with(short_hash) {
                return Err(Error::Integrity(format!(
                    "{} has config hash {} but sits under {}",
                    path.display(),
                    r.config_hash,
                    name
                )));
            }
            found.push((name.clone(), r));
        }
    }
    if found.is_empty() {
        return Err(Error::Inventory(format!("no completed runs under {}", out_dir.display())));
    }
    Ok(found)
}

/// Writes `plots/accuracy_vs_m.csv` (noisy runs only) and
/// `plots/task_curves.csv` under `out_dir`, returning the files written.
///
/// Every row is `series,x,y,y_err` with `y_err` the sample standard
/// deviation over seeds.
pub fn emit_plot_data(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let results = completed_results(out_dir)?;
    let plot_dir = out_dir.join("plots");
    fs::create_dir_all(&plot_dir).map_err(|e| Error::io(&plot_dir, e))?;
    let mut written = Vec::new();

    let mut by_m: BTreeMap<(Method, usize), Vec<f64>> = BTreeMap::new();
    for (_, r) in &results {
        if let (StreamKind::Noisy, Some(c)) = (r.kind, r.clean_accuracy) {
            by_m.entry((r.method, r.noisy_clients)).or_default().push(c);
        }
    }
    if !by_m.is_empty() {
        let mut csv = String::from("series,x,y,y_err\n");
        for ((method, m), ys) in &by_m {
            let s = MeanStd::of(ys);
            csv.push_str(&format!("{method},{m},{},{}\n", s.mean, s.std));
        }
        let path = plot_dir.join("accuracy_vs_m.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    let mut curves: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
    for (name, r) in &results {
        curves.entry(name).or_default().push(&r.per_step_accuracy);
    }
    let mut csv = String::from("series,x,y,y_err\n");
    for (name, runs) in &curves {
        let steps = runs.iter().map(|r| r.len()).min().unwrap_or(0);
        for t in 0..steps {
            let ys: Vec<f64> = runs.iter().map(|r| r[t]).collect();
            let s = MeanStd::of(&ys);
            csv.push_str(&format!("{name},{},{},{}\n", t + 1, s.mean, s.std));
        }
    }
    let path = plot_dir.join("task_curves.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
