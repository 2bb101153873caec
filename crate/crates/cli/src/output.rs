use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use cloplab_core::dynamics::TrajectoryRecord;
use cloplab_core::toy::TrainReport;

use crate::failure::{Failure, Outcome};

/// Shortest decimal that parses back to the same double.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Creates `dir`, refusing to overwrite an existing `marker` unless forced.
pub fn prepare_dir(dir: &Path, marker: &str, force: bool) -> Outcome<PathBuf> {
    let path = dir.join(marker);
    if path.exists() && !force {
        return Err(Failure::usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(path)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Outcome {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub const TRAJECTORY_HEADER: [&str; 6] = ["step", "loss", "mean_norm", "min_raw_norm", "max_raw_norm", "effective_rank"];
pub const SPECTRA_HEADER: [&str; 3] = ["step", "index", "singular_value"];
pub const PCA_HEADER: [&str; 4] = ["step", "point_id", "pc1", "pc2"];
pub const METRICS_HEADER: [&str; 6] = ["epoch", "loss", "eff_rank", "np_acc", "probe_acc", "mean_proto_cos"];

pub fn write_trajectory(dir: &Path, rec: &TrajectoryRecord) -> Outcome {
    write_csv(
        &dir.join("trajectory.csv"),
        &TRAJECTORY_HEADER,
        rec.points.iter().map(|p| {
            vec![
                p.step.to_string(),
                num(p.loss),
                num(p.mean_norm),
                num(p.min_raw_norm),
                num(p.max_raw_norm),
                p.effective_rank.to_string(),
            ]
        }),
    )?;
    write_csv(
        &dir.join("spectra.csv"),
        &SPECTRA_HEADER,
        rec.snapshots.iter().flat_map(|s| {
            s.spectrum
                .iter()
                .enumerate()
                .map(move |(i, &v)| vec![s.step.to_string(), i.to_string(), num(v)])
        }),
    )?;
    write_csv(
        &dir.join("pca.csv"),
        &PCA_HEADER,
        rec.snapshots.iter().flat_map(|s| {
            s.pca
                .iter_rows()
                .enumerate()
                .map(move |(i, r)| vec![s.step.to_string(), i.to_string(), num(r[0]), num(r[1])])
        }),
    )
}

pub fn write_metrics(path: &Path, report: &TrainReport) -> Outcome {
    write_csv(
        path,
        &METRICS_HEADER,
        report.epochs.iter().map(|m| {
            vec![
                m.epoch.to_string(),
                num(m.loss),
                m.eff_rank.to_string(),
                num(m.np_acc),
                num(m.probe_acc),
                num(m.mean_proto_cos),
            ]
        }),
    )
}
