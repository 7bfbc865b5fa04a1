//! Command-line driver: generate bundles, fit them, run the closed-form
//! solver, evaluate ablations and verify gradients.
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pose9::config::{load_config, ExperimentConfig};
use pose9::error::Error;
use pose9::fitter::{fit_instance, FitConfig, Preset};
use pose9::geometry::world_location;
use pose9::io::{read_bundle, write_bundle, write_report_csv, write_report_json, EvalRecord, Report};
use pose9::metrics::{aggregate, pose_error, MetricsReport, PoseError};
use pose9::similarity::{pose_from_nocs, RansacConfig};
use pose9::symmetry::CategoryProfile;
use pose9::synthgen::{category_profile, make_instance, Instance};

#[derive(Parser)]
#[command(name = "pose9", version, about = "category-level 9DoF pose toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic instance bundle.
    Gen {
        /// Experiment configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output bundle directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit every instance of a bundle with one preset.
    Fit {
        /// Bundle directory produced by `gen`.
        bundle: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ablation preset (a1, a2, a3, b1, b2, c, d).
        #[arg(long, default_value = "d")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Report path (JSON; a CSV mirror is written next to it).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Closed-form RANSAC/Umeyama solve from ground-truth coordinates.
    Solve {
        bundle: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every configured preset and aggregate the ablation table.
    Eval {
        /// Optional bundle; instances are generated per the config when
        /// omitted.
        bundle: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Parse { .. } | Error::IdentifierMismatch(_) => 2,
        Error::Divergence { .. }
        | Error::NoConsensus { .. }
        | Error::NoInliers
        | Error::DegenerateInput(_) => 3,
        _ => 1, // validation: config, usage, malformed inputs
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too and are not errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_or_default(path: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.fit.seed = s;
    } else {
        cfg.fit.seed = cfg.seed;
    }
    Ok(cfg)
}

fn generate_instances(cfg: &ExperimentConfig) -> Result<Vec<Instance>, Error> {
    let mut out = Vec::new();
    for category in &cfg.categories {
        for i in 0..cfg.instances_per_category {
            out.push(make_instance(
                category,
                cfg.seed.wrapping_add(i as u64),
                &cfg.gen,
            )?);
        }
    }
    Ok(out)
}

fn profiles_for(
    instances: &[Instance],
    cfg: &ExperimentConfig,
) -> Result<BTreeMap<String, CategoryProfile>, Error> {
    let mut map = BTreeMap::new();
    for inst in instances {
        if !map.contains_key(&inst.category) {
            map.insert(
                inst.category.clone(),
                category_profile(&inst.category, cfg.gen.prior_points)?,
            );
        }
    }
    Ok(map)
}

/// Fits (instance, preset) pairs, optionally across threads; results
/// come back in deterministic input order.
fn fit_all(
    instances: &[Instance],
    profiles: &BTreeMap<String, CategoryProfile>,
    presets: &[Preset],
    base: &FitConfig,
    jobs: usize,
) -> Result<Vec<EvalRecord>, Error> {
    let tasks: Vec<(usize, &Instance, Preset)> = presets
        .iter()
        .flat_map(|p| instances.iter().map(move |i| (*p, i)))
        .enumerate()
        .map(|(k, (p, i))| (k, i, p))
        .collect();
    let jobs = jobs.max(1).min(tasks.len().max(1));
    let run_one = |inst: &Instance, preset: Preset| -> Result<EvalRecord, Error> {
        let profile = &profiles[&inst.category];
        let cfg = base.clone().with_preset(preset);
        let fit = fit_instance(inst, profile, &cfg)?;
        let err = pose_error(&fit.pose, &inst.pose_gt, &profile.symmetry);
        Ok(EvalRecord {
            category: inst.category.clone(),
            seed: inst.seed,
            preset: preset.name().to_string(),
            rotation_deg: err.rotation_deg,
            translation: err.translation,
            iou: err.iou,
            final_loss: fit.report.total,
        })
    };
    if jobs == 1 {
        return tasks
            .iter()
            .map(|(_, inst, preset)| run_one(inst, *preset))
            .collect();
    }
    let mut results: Vec<Option<Result<EvalRecord, Error>>> =
        (0..tasks.len()).map(|_| None).collect();
    let chunks: Vec<Vec<&(usize, &Instance, Preset)>> = (0..jobs)
        .map(|w| tasks.iter().skip(w).step_by(jobs).collect())
        .collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|(k, inst, preset)| (*k, run_one(inst, *preset)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("worker panicked") {
                results[k] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.unwrap()).collect()
}

fn summarize(records: &[EvalRecord]) -> BTreeMap<String, MetricsReport> {
    let mut by_preset: BTreeMap<String, Vec<PoseError>> = BTreeMap::new();
    for r in records {
        by_preset.entry(r.preset.clone()).or_default().push(PoseError {
            rotation_deg: r.rotation_deg,
            translation: r.translation,
            iou: r.iou,
        });
    }
    by_preset
        .into_iter()
        .map(|(k, v)| (k, aggregate(&v)))
        .collect()
}

fn write_reports(
    out: &Path,
    cfg: &ExperimentConfig,
    records: Vec<EvalRecord>,
) -> Result<(), Error> {
    let summary = summarize(&records);
    for (preset, m) in &summary {
        println!(
            "{preset}: rot {:.2} deg, trans {:.1} cm, iou {:.3} ({} instances)",
            m.mean_rotation_deg,
            m.mean_translation * 100.0,
            m.mean_iou,
            m.count
        );
    }
    let report = Report {
        config: serde_json::to_value(cfg).map_err(|e| Error::Parse {
            path: out.display().to_string(),
            detail: e.to_string(),
        })?,
        per_instance: records,
        summary,
    };
    write_report_json(out, &report)?;
    write_report_csv(&out.with_extension("csv"), &report.per_instance)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.cmd {
        Cmd::Gen { config, seed, out } => {
            let cfg = load_or_default(&config, seed)?;
            let instances = generate_instances(&cfg)?;
            write_bundle(&out, &instances)?;
            println!("wrote {} instances to {}", instances.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Fit {
            bundle,
            config,
            preset,
            seed,
            out,
            jobs,
        } => {
            let cfg = load_or_default(&config, seed)?;
            let preset: Preset = preset.parse()?;
            let instances = read_bundle(&bundle)?;
            let profiles = profiles_for(&instances, &cfg)?;
            let records = fit_all(&instances, &profiles, &[preset], &cfg.fit, jobs)?;
            write_reports(&out, &cfg, records)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Solve { bundle, seed, out } => {
            let cfg = load_or_default(&None, seed)?;
            let instances = read_bundle(&bundle)?;
            let profiles = profiles_for(&instances, &cfg)?;
            let mut records = Vec::new();
            for inst in &instances {
                let ransac = RansacConfig {
                    seed: cfg.seed,
                    ..RansacConfig::default()
                };
                let (pose, mask) = pose_from_nocs(&inst.coords_gt, &inst.observed, &ransac)?;
                let err = pose_error(&pose, &inst.pose_gt, &profiles[&inst.category].symmetry);
                let mut residual = 0.0;
                let mut n_in = 0usize;
                for ((c, p), m) in inst
                    .coords_gt
                    .points
                    .iter()
                    .zip(&inst.observed.points)
                    .zip(&mask)
                {
                    if *m {
                        residual += (world_location(c, &pose) - p).norm();
                        n_in += 1;
                    }
                }
                records.push(EvalRecord {
                    category: inst.category.clone(),
                    seed: inst.seed,
                    preset: "solve".to_string(),
                    rotation_deg: err.rotation_deg,
                    translation: err.translation,
                    iou: err.iou,
                    final_loss: residual / n_in.max(1) as f64,
                });
            }
            write_reports(&out, &cfg, records)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            bundle,
            config,
            seed,
            out,
            jobs,
        } => {
            let cfg = load_or_default(&config, seed)?;
            let instances = match bundle {
                Some(dir) => read_bundle(&dir)?,
                None => generate_instances(&cfg)?,
            };
            let profiles = profiles_for(&instances, &cfg)?;
            let records = fit_all(&instances, &profiles, &cfg.presets, &cfg.fit, jobs)?;
            write_reports(&out, &cfg, records)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck { seed } => {
            let reports = pose9::gradcheck::standard_battery(seed)?;
            let mut all_ok = true;
            for r in &reports {
                println!(
                    "{} [{}]: max error {:.3e} over {} dims",
                    if r.passed { "pass" } else { "FAIL" },
                    r.label,
                    r.max_error,
                    r.dimensions
                );
                all_ok &= r.passed;
            }
            if all_ok {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
    }
}
