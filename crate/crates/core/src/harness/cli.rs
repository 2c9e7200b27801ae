//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::ExperimentConfig;
use super::report::RunReport;
use super::run::{
    evaluate_checkpoint, load_dataset, load_datasets, predict_split, run_gradcheck, run_supervised, run_zero_shot,
    zero_shot_report,
};
use super::HarnessError;
use crate::backbone::{load_checkpoint, save_checkpoint, CityView, ModelError, TrainError};
use crate::ingest::formats::{read_pings, write_dataset_dir, write_locations, write_visits, LOCATIONS_FILE, VISITS_FILE};
use crate::ingest::{extract_staypoints_by_user, grid_staypoints, CoordKind, SplitPart, StaypointParams};
use crate::poi::PoiCatalog;

pub const CHECKPOINT_FILE: &str = "model.nxll";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "nextloc", version, about = "Next-location prediction: data prep, training and evaluation")]
struct Cli {
    /// Experiment config (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (the city seed for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Raw pings to staypoints, grid locations and visit records.
    Preprocess {
        #[arg(long)]
        pings: PathBuf,
        #[arg(long, default_value_t = 500.0)]
        cell_m: f64,
        #[arg(long, default_value_t = StaypointParams::default().time_gap_max_s)]
        time_gap_s: i64,
        #[arg(long, default_value_t = StaypointParams::default().dist_max_m)]
        dist_m: f64,
        #[arg(long, default_value_t = StaypointParams::default().min_stay_s)]
        min_stay_s: i64,
    },
    /// Writes the configured synthetic city as a dataset directory.
    Synth,
    /// Trains on the configured data and writes a checkpoint and report.
    Train {
        /// Dataset directories (repeatable); overrides the config.
        #[arg(long)]
        data: Vec<PathBuf>,
    },
    /// Evaluates a checkpoint on its training city.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Accept a mismatched config digest or location table.
        #[arg(long)]
        force: bool,
    },
    /// Writes ranked location ids for every pair of a split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        #[arg(long)]
        force: bool,
    },
    /// Tests on an unseen city, refitting only normalization statistics.
    ZeroShot {
        #[arg(long)]
        target: PathBuf,
        /// Use this model instead of training on the configured data.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Vec<PathBuf>,
    },
    /// Checks analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        pairs: usize,
    },
}

fn exit_code(e: &HarnessError) -> i32 {
    match e {
        HarnessError::Config(_) | HarnessError::Model(ModelError::Config(_)) => EXIT_USAGE,
        HarnessError::Model(ModelError::NonFinite { .. })
        | HarnessError::Train(TrainError::Divergence { .. })
        | HarnessError::Train(TrainError::Model(ModelError::NonFinite { .. })) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

fn print_summary(report: &RunReport) {
    for c in &report.cities {
        for s in &c.splits {
            let hits: Vec<String> = s.hits.iter().map(|h| format!("Hit@{}={:.4}", h.k, h.hit)).collect();
            println!("{} {} n={} {} dist={:.1}m", c.name, s.split, s.queries, hits.join(" "), s.mean_distance_m);
        }
    }
}

fn execute(cli: Cli) -> Result<i32, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Synth => cfg.synth.seed = seed,
            _ => cfg.seed = seed,
        }
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::Preprocess { pings, cell_m, time_gap_s, dist_m, min_stay_s } => {
            let params = StaypointParams { time_gap_max_s: time_gap_s, dist_max_m: dist_m, min_stay_s };
            let by_user = extract_staypoints_by_user(read_pings(&pings)?, &params);
            let rejected: usize = by_user.values().map(|o| o.rejected).sum();
            let (locations, users) = grid_staypoints(&by_user, None, cell_m, PoiCatalog::xian_chengdu().len())?;
            fs::create_dir_all(out).map_err(io_err(out))?;
            write_locations(&out.join(LOCATIONS_FILE), &locations, CoordKind::Geographic)?;
            write_visits(&out.join(VISITS_FILE), &users)?;
            let visits: usize = users.iter().map(|u| u.visits.len()).sum();
            println!("{} users, {visits} visits, {} locations, {rejected} pings rejected", users.len(), locations.len());
        }
        Command::Synth => {
            cfg.synth.validate()?;
            let ds = super::synth::synth_generate(&cfg.synth, cfg.dataset_options())?;
            write_dataset_dir(out, &ds)?;
            println!("{}: {} locations, {} users, {} visits", ds.name, ds.locations.len(), ds.users.len(), ds.visit_count());
        }
        Command::Train { data } => {
            if !data.is_empty() {
                cfg.data.dirs = data;
            }
            cfg.validate()?;
            let datasets = load_datasets(&cfg)?;
            let run = run_supervised(&cfg, &datasets)?;
            fs::create_dir_all(out).map_err(io_err(out))?;
            save_checkpoint(&out.join(CHECKPOINT_FILE), &run.state, &datasets[0].locations_digest())?;
            run.report.write(out)?;
            print_summary(&run.report);
        }
        Command::Evaluate { checkpoint, data, force } => {
            let ds = dataset_for(&cfg, data.as_deref())?;
            let expected = cli.config.as_ref().map(|_| cfg.model_config(ds.catalog.len()).digest());
            let ckpt = load_checkpoint(&checkpoint, expected.as_deref(), force)?;
            let report = evaluate_checkpoint(&cfg, &ckpt, &ds, force)?;
            report.write(out)?;
            print_summary(&report);
        }
        Command::Predict { checkpoint, data, k, split, force } => {
            if k == 0 {
                return Err(HarnessError::Config("k must be positive".into()));
            }
            let ds = dataset_for(&cfg, data.as_deref())?;
            let expected = cli.config.as_ref().map(|_| cfg.model_config(ds.catalog.len()).digest());
            let ckpt = load_checkpoint(&checkpoint, expected.as_deref(), force)?;
            ckpt.check_locations(&ds.locations_digest(), force)?;
            let state = &ckpt.state;
            let view = CityView::new(&ds, state.norm_stats, state.dur_bounds, &state.config.poi);
            let part = match split.as_str() {
                "train" => SplitPart::Train,
                "val" => SplitPart::Val,
                _ => SplitPart::Test,
            };
            let preds = predict_split(&cfg, state, &view, part, k)?;
            fs::create_dir_all(out).map_err(io_err(out))?;
            let path = out.join(PREDICTIONS_FILE);
            let mut text = String::from("#nextloc-format v1\nuser_id,start,pred_x,pred_y");
            for r in 1..=k {
                text += &format!(",rank_{r}");
            }
            text.push('\n');
            for (i, p) in preds.pairs.iter().zip(&preds.ranked) {
                let pair = &ds.pairs[*i];
                text += &format!("{},{},{},{}", ds.users[pair.user].user_id, pair.start, p.xy_o.x, p.xy_o.y);
                let ids = p.ids();
                for r in 0..k {
                    text.push(',');
                    if let Some(id) = ids.get(r) {
                        text += &id.to_string();
                    }
                }
                text.push('\n');
            }
            fs::write(&path, text).map_err(io_err(&path))?;
            println!("{} predictions written to {}", preds.ranked.len(), path.display());
        }
        Command::ZeroShot { target, checkpoint, data } => {
            let target_ds = load_dataset(&cfg, &target)?;
            let report = match checkpoint {
                Some(p) => {
                    let ckpt = load_checkpoint(&p, None, false)?;
                    zero_shot_report(&cfg, &ckpt.state, &target_ds)?
                }
                None => {
                    if !data.is_empty() {
                        cfg.data.dirs = data;
                    }
                    cfg.validate()?;
                    let sources = load_datasets(&cfg)?;
                    let run = run_zero_shot(&cfg, &sources, &target_ds)?;
                    fs::create_dir_all(out).map_err(io_err(out))?;
                    save_checkpoint(&out.join(CHECKPOINT_FILE), &run.state, &sources[0].locations_digest())?;
                    run.report
                }
            };
            report.write(out)?;
            print_summary(&report);
        }
        Command::Gradcheck { pairs } => {
            cfg.validate()?;
            let datasets = load_datasets(&cfg)?;
            let r = run_gradcheck(&cfg, &datasets, pairs)?;
            println!(
                "{} entries checked, max relative error {:.3e}, resolution {:.1e}, {} frozen tensors, {} failures",
                r.entries.len(),
                r.max_rel_err,
                r.resolution,
                r.frozen_tensors,
                r.failures.len() + r.frozen_nonzero.len()
            );
            for e in r.entries.iter().filter(|e| r.failures.contains(&format!("{}[{}]", e.param, e.index))) {
                eprintln!(
                    "failed: {}[{}] analytic {:.6e} numeric {:.6e} rel err {:.3e}",
                    e.param, e.index, e.analytic, e.numeric, e.rel_err
                );
            }
            for f in &r.frozen_nonzero {
                eprintln!("failed: {f} is frozen but has a non-zero gradient");
            }
            if !r.passed() {
                return Ok(EXIT_NUMERIC);
            }
        }
    }
    Ok(0)
}

fn dataset_for(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<crate::ingest::CityDataset, HarnessError> {
    match dir {
        Some(d) => load_dataset(cfg, d),
        None => Ok(load_datasets(cfg)?.remove(0)),
    }
}
