use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use fedpoison::attack::AttackPlan;
use fedpoison::config::ExperimentConfig;
use fedpoison::data::{generate_synthetic, load_dataset, Dataset, RatingRange};
use fedpoison::eval::{rank_items_for_user, run_threshold_experiment, threshold_csv, Predictor, ThresholdExperiment};
use fedpoison::model::{load_checkpoint, save_checkpoint};
use fedpoison::numerics::SimRng;
use fedpoison::orchestrator::{
    matrix_csv, prepare as prepare_data, reports_jsonl, run_prepared, summary_csv, timings_csv, ExperimentOutcome,
    Prepared, SweepAxis, SweepRun,
};
use fedpoison::Error;

use crate::rundir::{self, DirLock, RunManifest};
use crate::{Cli, PrepareArgs};

/// Bad invocation: missing input, conflicting runs, busy directory.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 2 usage or configuration, 3 data, 4 anything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config { .. } | Error::Plan(_) => 2,
                Error::Parse { .. } | Error::Validation(_) | Error::Io { .. } => 3,
                _ => 4,
            };
        }
    }
    4
}

fn require_file(path: &Path) -> Result<PathBuf> {
    if !path.is_file() {
        return Err(UsageError(format!("{}: no such file", path.display())).into());
    }
    Ok(std::path::absolute(path)?)
}

fn load_config(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let path = require_file(path)?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_stats(d: &Dataset) {
    let s = d.stats();
    println!("users               {}", s.users);
    println!("items               {}", s.items);
    println!("ratings             {}", s.ratings);
    println!("rating density      {:.4}%", 100.0 * s.rating_density);
    println!("social connections  {}", s.social_connections);
    println!("social density      {:.4}%", 100.0 * s.social_density);
}

pub fn prepare(cli: &Cli, args: &PrepareArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let dataset = match (&args.ratings, &args.trust, &args.synthetic) {
        (Some(r), Some(t), None) => {
            let (r, t) = (require_file(r)?, require_file(t)?);
            let range = RatingRange::new(args.rating_min, args.rating_max).map_err(|e| UsageError(e.to_string()))?;
            load_dataset(&r, &t, range)?
        }
        (None, None, Some(preset)) => {
            let spec = fedpoison::config::SyntheticSpec::Preset(preset.clone());
            let params = spec.resolve()?;
            generate_synthetic(&params, &mut SimRng::new(seed))?
        }
        _ => bail!(UsageError("give --ratings and --trust, or --synthetic".into())),
    };
    let prep = Prepared::new(dataset, seed)?;
    let out = &cli.out;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let _lock = DirLock::acquire(out)?;
    let d = &prep.dataset;
    rundir::write(out, "ratings.tsv", d.ratings_tsv())?;
    rundir::write(out, "trust.tsv", d.trust_tsv())?;
    rundir::write(out, "ids.tsv", d.id_map_tsv())?;
    for (name, bucket) in [
        ("train.tsv", &prep.split.train),
        ("validation.tsv", &prep.split.validation),
        ("test.tsv", &prep.split.test),
    ] {
        let subset = Dataset {
            ratings: bucket.clone(),
            trust_edges: Vec::new(),
            ..d.clone()
        };
        rundir::write(out, name, subset.ratings_tsv())?;
    }
    let stats = serde_json::json!({
        "stats": d.stats(),
        "seed": seed,
        "dataset_checksum": d.checksum(),
        "split_checksum": prep.split.checksum(),
        "cold_item_ratings": prep.split.cold_item_ratings(),
    });
    rundir::write(out, "stats.json", serde_json::to_string_pretty(&stats)? + "\n")?;
    print_stats(d);
    println!(
        "split               {} / {} / {}",
        prep.split.train.len(),
        prep.split.validation.len(),
        prep.split.test.len()
    );
    Ok(())
}

/// Writes the manifest, trains, then writes every report file.
fn execute(cfg: &ExperimentConfig, prep: &Prepared, dir: &Path) -> Result<ExperimentOutcome> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let outputs = [
        rundir::CONFIG,
        rundir::PLAN,
        rundir::REPORTS,
        rundir::SUMMARY,
        rundir::RESULT,
        rundir::CHECKPOINT,
        rundir::TIMINGS,
    ];
    let manifest = RunManifest {
        format_version: 1,
        code_version: env!("CARGO_PKG_VERSION").into(),
        name: cfg.name.clone(),
        seed: cfg.seed,
        dataset: cfg.data.name.clone(),
        dataset_checksum: prep.dataset.checksum(),
        split_checksum: prep.split.checksum(),
        config: rundir::CONFIG.into(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    rundir::write(dir, rundir::MANIFEST, serde_json::to_string_pretty(&manifest)? + "\n")?;
    rundir::write(dir, rundir::CONFIG, cfg.to_toml())?;

    let outcome = run_prepared(cfg, prep)?;
    rundir::write(dir, rundir::PLAN, serde_json::to_string_pretty(&outcome.plan)? + "\n")?;
    rundir::write(dir, rundir::REPORTS, reports_jsonl(&outcome.reports))?;
    rundir::write(dir, rundir::SUMMARY, summary_csv(&outcome.reports))?;
    rundir::write(
        dir,
        rundir::RESULT,
        serde_json::to_string_pretty(&outcome.summary)? + "\n",
    )?;
    rundir::write(dir, rundir::TIMINGS, timings_csv(&outcome.round_seconds))?;
    save_checkpoint(&dir.join(rundir::CHECKPOINT), &outcome.best_table, &outcome.best_params)?;
    Ok(outcome)
}

fn print_summary(o: &ExperimentOutcome) {
    let s = &o.summary;
    println!(
        "{}: rounds {}, best round {}, validation rmse {:.4}, test rmse {:.4}, test mae {:.4}{}",
        s.name,
        s.rounds_run,
        s.best_round,
        s.best_validation_rmse,
        s.test_rmse,
        s.test_mae,
        s.test_fcr.map(|f| format!(", fcr {f:.2}")).unwrap_or_default()
    );
}

pub fn run(cli: &Cli, config: &Path) -> Result<()> {
    let cfg = load_config(cli, config)?;
    let dir = cli.out.join(&cfg.name);
    let _lock = DirLock::acquire(&dir)?;
    let prep = prepare_data(&cfg)?;
    let outcome = execute(&cfg, &prep, &dir)?;
    print_summary(&outcome);
    println!("outputs in {}", dir.display());
    Ok(())
}

pub fn sweep(cli: &Cli, config: &Path, axis: &str, values: &[String]) -> Result<()> {
    let axis: SweepAxis = axis.parse()?;
    if values.is_empty() {
        bail!(UsageError("--values needs at least one value".into()));
    }
    let base = load_config(cli, config)?;
    let configs = values
        .iter()
        .map(|v| axis.apply(&base, v))
        .collect::<fedpoison::Result<Vec<_>>>()?;
    let dir = cli.out.join(&base.name);
    let _lock = DirLock::acquire(&dir)?;
    let prep = prepare_data(&base)?;
    let mut runs = Vec::new();
    for (value, config) in values.iter().zip(configs) {
        info!("{axis} = {value}");
        let sub = dir.join(format!("{axis}={value}"));
        let outcome = execute(&config, &prep, &sub)?;
        print_summary(&outcome);
        runs.push(SweepRun {
            value: value.clone(),
            config,
            outcome,
        });
    }
    rundir::write(&dir, "matrix.csv", matrix_csv(axis, &runs))?;
    println!("matrix in {}", dir.join("matrix.csv").display());
    Ok(())
}

struct LoadedRun {
    manifest: RunManifest,
    config: ExperimentConfig,
    plan: AttackPlan,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest = RunManifest::load(dir)?;
    let config = ExperimentConfig::load(&dir.join(rundir::CONFIG))?;
    let plan_path = dir.join(rundir::PLAN);
    let plan = serde_json::from_str(
        &fs::read_to_string(&plan_path).with_context(|| format!("cannot read {}", plan_path.display()))?,
    )
    .with_context(|| format!("malformed {}", plan_path.display()))?;
    Ok(LoadedRun { manifest, config, plan })
}

fn ranked_for(clean: &LoadedRun, clean_dir: &Path, user: usize) -> Result<(Prepared, Vec<usize>)> {
    let prep = prepare_data(&clean.config)?;
    if prep.split.checksum() != clean.manifest.split_checksum {
        bail!(Error::Validation(format!(
            "dataset behind {} changed since the run",
            clean_dir.display()
        )));
    }
    if user >= prep.graphs.len() {
        bail!(UsageError(format!("target user {user} does not exist")));
    }
    let (table, params) = load_checkpoint(&clean_dir.join(rundir::CHECKPOINT))?;
    let ranking = rank_items_for_user(&table, &params, &prep.graphs[user])?;
    Ok((prep, ranking))
}

pub fn threshold_eval(
    clean_dir: &Path,
    attacked_dir: &Path,
    target_user: Option<usize>,
    output: Option<&Path>,
) -> Result<()> {
    let clean = load_run(clean_dir)?;
    let attacked = load_run(attacked_dir)?;
    if clean.manifest.dataset_checksum != attacked.manifest.dataset_checksum
        || clean.manifest.split_checksum != attacked.manifest.split_checksum
    {
        bail!(UsageError(format!(
            "{} and {} use different data splits",
            clean_dir.display(),
            attacked_dir.display()
        )));
    }
    let user = target_user
        .or(attacked.plan.target_user)
        .ok_or_else(|| UsageError("no --target-user given and the attacked run has none".into()))?;
    let (prep, ranking) = ranked_for(&clean, clean_dir, user)?;
    let exp = ThresholdExperiment::from_ranking(&ranking, &prep.graphs[user], 10);
    let (table, params) = load_checkpoint(&attacked_dir.join(rundir::CHECKPOINT))?;
    let predictor = Predictor::new(&table, &params, &prep.graphs)?;
    let rows = run_threshold_experiment(&predictor, clean.config.data.rating_max, &exp)?;
    let csv = threshold_csv(&rows);
    let path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| attacked_dir.join("threshold.csv"));
    fs::write(&path, &csv).with_context(|| format!("cannot write {}", path.display()))?;
    print!("{csv}");
    Ok(())
}

pub fn targets(clean_dir: &Path, user: usize, direction: &str, count: usize) -> Result<()> {
    let clean = load_run(clean_dir)?;
    let (prep, ranking) = ranked_for(&clean, clean_dir, user)?;
    let exp = ThresholdExperiment::from_ranking(&ranking, &prep.graphs[user], count);
    let (items, rating) = match direction {
        "promote" => (exp.promote_items, clean.config.data.rating_max),
        "demote" => (exp.demote_items, clean.config.data.rating_min),
        other => bail!(UsageError(format!(
            "unknown direction `{other}`; allowed: promote, demote"
        ))),
    };
    println!("[attack]");
    println!("mode = \"backdoor\"");
    println!("target_user = {user}");
    println!("target_items = {items:?}");
    println!("forged_ratings = {:?}", vec![rating; items.len()]);
    Ok(())
}
