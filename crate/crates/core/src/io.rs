//! On-disk formats: plain-text point clouds, instance bundles and
//! evaluation reports.
//!
//! Point clouds are one `x y z` triple per line, LF separated, with
//! `#` comment lines; floats use the shortest round-trip decimal form,
//! so write/read/write cycles are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose9, Rotation, Vec3};
use crate::metrics::MetricsReport;
use crate::synthgen::Instance;

fn parse_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Serializes a cloud in the text format.
pub fn format_point_cloud(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for p in &cloud.points {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, format_point_cloud(cloud))?;
    Ok(())
}

/// Parses the text format; empty and `#`-prefixed lines are skipped.
pub fn parse_point_cloud(path: &Path, text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_ascii_whitespace();
        let mut next = || -> Result<f64> {
            it.next()
                .ok_or_else(|| parse_err(path, format!("line {}: expected 3 values", lineno + 1)))?
                .parse::<f64>()
                .map_err(|e| parse_err(path, format!("line {}: {e}", lineno + 1)))
        };
        let p = Vec3::new(next()?, next()?, next()?);
        if it.next().is_some() {
            return Err(parse_err(
                path,
                format!("line {}: trailing data", lineno + 1),
            ));
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    parse_point_cloud(path, &text)
}

fn format_labels(labels: &[bool]) -> String {
    let mut out = String::new();
    for l in labels {
        out.push(if *l { '1' } else { '0' });
        out.push('\n');
    }
    out
}

fn parse_labels(path: &Path, text: &str) -> Result<Vec<bool>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(parse_err(path, format!("line {}: bad label `{other}`", i + 1))),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Instance bundles
// ---------------------------------------------------------------------------

const MANIFEST: &str = "manifest.txt";
const OBSERVED: &str = "observed.xyz";
const COORDS: &str = "coords.xyz";
const LABELS: &str = "labels.txt";
const INDEX: &str = "bundle.txt";

fn format_manifest(inst: &Instance) -> String {
    let r = inst.pose_gt.rotation.matrix();
    let mut out = String::new();
    let _ = writeln!(out, "category {}", inst.category);
    let _ = writeln!(out, "seed {}", inst.seed);
    let _ = writeln!(out, "theta {}", inst.theta);
    let _ = writeln!(out, "noise_sigma {}", inst.noise_sigma);
    let mut row_major = String::new();
    for i in 0..3 {
        for j in 0..3 {
            if !row_major.is_empty() {
                row_major.push(' ');
            }
            let _ = write!(row_major, "{}", r[(i, j)]);
        }
    }
    let _ = writeln!(out, "rotation {row_major}");
    let t = inst.pose_gt.translation;
    let _ = writeln!(out, "translation {} {} {}", t.x, t.y, t.z);
    let s = inst.pose_gt.size;
    let _ = writeln!(out, "size {} {} {}", s.x, s.y, s.z);
    out
}

fn parse_manifest(path: &Path, text: &str) -> Result<(String, u64, f64, f64, Pose9)> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| parse_err(path, format!("bad manifest line `{line}`")))?;
        fields.insert(key, value.trim());
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| parse_err(path, format!("missing key `{key}`")))
    };
    let floats = |key: &str, n: usize| -> Result<Vec<f64>> {
        let vals: Vec<f64> = get(key)?
            .split_ascii_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, format!("{key}: {e}")))?;
        if vals.len() != n {
            return Err(parse_err(
                path,
                format!("{key}: expected {n} values, got {}", vals.len()),
            ));
        }
        Ok(vals)
    };
    let category = get("category")?.to_string();
    let seed = get("seed")?
        .parse::<u64>()
        .map_err(|e| parse_err(path, format!("seed: {e}")))?;
    let theta = floats("theta", 1)?[0];
    let noise_sigma = floats("noise_sigma", 1)?[0];
    let r = floats("rotation", 9)?;
    let t = floats("translation", 3)?;
    let s = floats("size", 3)?;
    let rotation = Rotation::from_matrix(crate::geometry::Mat3::from_row_slice(&r))?;
    let pose = Pose9::new(
        rotation,
        Vec3::new(t[0], t[1], t[2]),
        Vec3::new(s[0], s[1], s[2]),
    )?;
    Ok((category, seed, theta, noise_sigma, pose))
}

/// Writes one instance into its own directory.
pub fn write_instance(dir: &Path, inst: &Instance) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), format_manifest(inst))?;
    write_point_cloud(&dir.join(OBSERVED), &inst.observed)?;
    write_point_cloud(&dir.join(COORDS), &inst.coords_gt)?;
    fs::write(dir.join(LABELS), format_labels(&inst.gt_inliers))?;
    Ok(())
}

pub fn read_instance(dir: &Path) -> Result<Instance> {
    let manifest_path = dir.join(MANIFEST);
    let (category, seed, theta, noise_sigma, pose_gt) =
        parse_manifest(&manifest_path, &fs::read_to_string(&manifest_path)?)?;
    let observed = read_point_cloud(&dir.join(OBSERVED))?;
    let coords_gt = read_point_cloud(&dir.join(COORDS))?;
    let labels_path = dir.join(LABELS);
    let gt_inliers = parse_labels(&labels_path, &fs::read_to_string(&labels_path)?)?;
    if observed.len() != coords_gt.len() || observed.len() != gt_inliers.len() {
        return Err(Error::CardinalityMismatch {
            left: observed.len(),
            right: coords_gt.len().min(gt_inliers.len()),
        });
    }
    Ok(Instance {
        category,
        seed,
        theta,
        noise_sigma,
        pose_gt,
        observed,
        coords_gt,
        gt_inliers,
    })
}

/// Writes a bundle directory: an ordered index plus one subdirectory
/// per instance.
pub fn write_bundle(dir: &Path, instances: &[Instance]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for inst in instances {
        let name = format!("{}-{}", inst.category, inst.seed);
        write_instance(&dir.join(&name), inst)?;
        index.push_str(&name);
        index.push('\n');
    }
    fs::write(dir.join(INDEX), index)?;
    Ok(())
}

/// Reads a bundle in index order.
pub fn read_bundle(dir: &Path) -> Result<Vec<Instance>> {
    let index_path = dir.join(INDEX);
    let index = fs::read_to_string(&index_path)?;
    let mut out = Vec::new();
    for name in index.lines().filter(|l| !l.trim().is_empty()) {
        let inst = read_instance(&dir.join(name.trim()))?;
        let expected = format!("{}-{}", inst.category, inst.seed);
        if expected != name.trim() {
            return Err(Error::IdentifierMismatch(format!(
                "directory `{}` holds instance `{expected}`",
                name.trim()
            )));
        }
        out.push(inst);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Evaluation reports
// ---------------------------------------------------------------------------

/// One fitted instance in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub category: String,
    pub seed: u64,
    pub preset: String,
    pub rotation_deg: f64,
    pub translation: f64,
    pub iou: f64,
    pub final_loss: f64,
}

/// Full evaluation report: the configuration it was produced with, one
/// record per (instance, preset) and per-preset aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config: serde_json::Value,
    pub per_instance: Vec<EvalRecord>,
    pub summary: BTreeMap<String, MetricsReport>,
}

pub fn write_report_json(path: &Path, report: &Report) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| parse_err(path, e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

const CSV_HEADER: &str = "category,seed,preset,rotation_deg,translation,iou,final_loss";

/// CSV mirror of the per-instance records.
pub fn write_report_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.category, r.seed, r.preset, r.rotation_deg, r.translation, r.iou, r.final_loss
        );
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(parse_err(
                path,
                format!("bad csv header: {:?}", other.unwrap_or("")),
            ))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(parse_err(path, format!("line {}: expected 7 columns", i + 2)));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| parse_err(path, format!("line {}: {e}", i + 2)))
        };
        out.push(EvalRecord {
            category: cols[0].to_string(),
            seed: cols[1]
                .parse::<u64>()
                .map_err(|e| parse_err(path, format!("line {}: {e}", i + 2)))?,
            preset: cols[2].to_string(),
            rotation_deg: f(cols[3])?,
            translation: f(cols[4])?,
            iou: f(cols[5])?,
            final_loss: f(cols[6])?,
        });
    }
    Ok(out)
}
