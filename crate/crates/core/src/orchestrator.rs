//! The federated training loop and parameter sweeps.
//!
//! Every random draw comes from a stream derived from the experiment seed and
//! a fixed stream label (plus round and client ids where relevant), so a run
//! is a pure function of its configuration. Clients of a round run in
//! parallel against the same snapshot; their updates are collected in client
//! id order before aggregation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_round, DefenseDiagnostics, DefenseKind};
use crate::attack::{
    lie_updates, malicious_local_round_adversarial, malicious_local_round_backdoor, AttackMode, AttackPlan,
};
use crate::client::{apply_ldp, honest_gradients, local_round, sample_pseudo_items, ClientUpdate, Neighborhood};
use crate::config::ExperimentConfig;
use crate::data::{
    build_local_graphs, generate_synthetic, load_dataset, split_dataset, Dataset, LocalGraph, Rating, Split,
};
use crate::defense::{apply_defended_aggregate, DefenseState, Layout};
use crate::error::{Error, Result};
use crate::eval::{accuracy, backdoor_fcr, rmse, Accuracy, Predictor};
use crate::model::{EmbeddingTable, GradientBundle, ModelParams};
use crate::numerics::{DenseMatrix, SimRng};

/// Labels of the derived random streams.
mod stream {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const MALICIOUS: u64 = 4;
    pub const TARGET: u64 = 5;
    pub const SCHEDULE: u64 = 6;
    pub const CLIENT: u64 = 7;
    pub const SERVER: u64 = 8;
}

/// Number of target items picked when a backdoor plan names none.
pub const DEFAULT_TARGET_ITEMS: usize = 10;

/// Dataset, split and local graphs shared by runs with the same seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: Split,
    pub graphs: Vec<LocalGraph>,
}

impl Prepared {
    pub fn new(dataset: Dataset, seed: u64) -> Result<Self> {
        dataset.validate()?;
        let split = split_dataset(&dataset, &mut SimRng::derive(seed, &[stream::SPLIT]))?;
        let graphs = build_local_graphs(&dataset, &split);
        Ok(Self { dataset, split, graphs })
    }

    pub fn participants(&self) -> Vec<usize> {
        self.graphs
            .iter()
            .filter(|g| g.participates())
            .map(|g| g.owner)
            .collect()
    }

    /// RMSE of predicting the mean training rating for every rating in `ratings`.
    pub fn mean_baseline_rmse(&self, ratings: &[Rating]) -> Result<f64> {
        let mean = self.split.train.iter().map(|r| r.value).sum::<f64>() / self.split.train.len() as f64;
        let targets: Vec<f64> = ratings.iter().map(|r| r.value).collect();
        rmse(&vec![mean; targets.len()], &targets)
    }
}

/// Loads or generates the configured dataset and splits it.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let dataset = match (&cfg.data.ratings, &cfg.data.trust, &cfg.data.synthetic) {
        (Some(r), Some(t), _) => load_dataset(r, t, cfg.data.range()?)?,
        (_, _, Some(spec)) => generate_synthetic(&spec.resolve()?, &mut SimRng::derive(cfg.seed, &[stream::DATA]))?,
        _ => return Err(Error::config("data", "no dataset source configured")),
    };
    Prepared::new(dataset, cfg.seed)
}

/// `floor(fraction * n)` clients drawn uniformly without replacement.
pub fn select_malicious(clients: &[usize], fraction: f64, rng: &mut SimRng) -> Result<BTreeSet<usize>> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(Error::Plan(format!(
            "attacker fraction {fraction} outside [0, 0.5]; the defenses assume an honest majority"
        )));
    }
    let k = (fraction * clients.len() as f64 + 1e-9).floor() as usize;
    let mut pool = clients.to_vec();
    for i in 0..k {
        let j = i + rng.index(pool.len() - i);
        pool.swap(i, j);
    }
    Ok(pool[..k].iter().copied().collect())
}

/// Fills in the parts of the plan the configuration left open: the target
/// user and items of a backdoor, default forged ratings (the rating maximum)
/// and the malicious set, which never contains the target user.
pub fn resolve_plan(cfg: &ExperimentConfig, prep: &Prepared) -> Result<AttackPlan> {
    let mut plan = cfg.attack.clone();
    if plan.mode == AttackMode::None {
        plan.malicious_clients.clear();
        return Ok(plan);
    }
    let participants = prep.participants();
    let mut rng = SimRng::derive(cfg.seed, &[stream::TARGET]);
    if plan.mode == AttackMode::Backdoor {
        if plan.target_user.is_none() {
            if participants.is_empty() {
                return Err(Error::Plan("no participating user to target".into()));
            }
            plan.target_user = Some(participants[rng.index(participants.len())]);
        }
        let target = plan.target_user.expect("set above");
        if target >= prep.graphs.len() {
            return Err(Error::Plan(format!("target user {target} does not exist")));
        }
        if plan.target_items.is_empty() {
            let mut pool: Vec<usize> = (0..prep.dataset.n_items())
                .filter(|&i| !prep.graphs[target].has_item(i))
                .collect();
            let k = DEFAULT_TARGET_ITEMS.min(pool.len());
            for i in 0..k {
                let j = i + rng.index(pool.len() - i);
                pool.swap(i, j);
            }
            plan.target_items = pool[..k].to_vec();
            plan.target_items.sort_unstable();
        }
        if plan.forged_ratings.is_empty() {
            plan.forged_ratings = vec![prep.dataset.rating_range.max; plan.target_items.len()];
        }
    }
    if plan.malicious_clients.is_empty() {
        let eligible: Vec<usize> = participants
            .into_iter()
            .filter(|&c| Some(c) != plan.target_user)
            .collect();
        let mut rng = SimRng::derive(cfg.seed, &[stream::MALICIOUS]);
        plan.malicious_clients = select_malicious(&eligible, plan.attacker_fraction, &mut rng)?;
    }
    plan.validate(&prep.graphs, prep.dataset.rating_range)?;
    Ok(plan)
}

/// Metrics of one round. Round 0 evaluates the initial model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<Accuracy>,
    /// Favorable-case rate on the validation residuals (backdoor runs).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fcr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_validation_rmse: Option<f64>,
    pub malicious_scheduled: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defense: Option<DefenseDiagnostics>,
    /// Test metrics of the best-validation checkpoint; final report only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<Accuracy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_fcr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub dataset: String,
    pub defense: DefenseKind,
    pub attack: AttackMode,
    pub seed: u64,
    pub rounds_run: usize,
    pub best_round: usize,
    pub best_validation_rmse: f64,
    pub test_rmse: f64,
    pub test_mae: f64,
    pub test_fcr: Option<f64>,
    pub mean_baseline_validation_rmse: f64,
    pub mean_baseline_test_rmse: f64,
    pub malicious_clients: usize,
    pub cold_item_ratings: usize,
    pub split_checksum: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub summary: RunSummary,
    pub plan: AttackPlan,
    pub best_table: EmbeddingTable,
    pub best_params: ModelParams,
    /// Wall-clock seconds per round, kept apart from the reports so that
    /// reports stay reproducible.
    pub round_seconds: Vec<f64>,
}

enum Outgoing {
    Update(ClientUpdate),
    LieTemplate {
        client: usize,
        grads: GradientBundle,
        samples: usize,
    },
}

struct RoundCtx<'a> {
    cfg: &'a ExperimentConfig,
    plan: &'a AttackPlan,
    graphs: &'a [LocalGraph],
    hood: Neighborhood<'a>,
    table: &'a EmbeddingTable,
    params: &'a ModelParams,
    round: usize,
}

impl RoundCtx<'_> {
    fn client_rng(&self, client: usize, phase: u64) -> SimRng {
        SimRng::derive(
            self.cfg.seed,
            &[stream::CLIENT, self.round as u64, client as u64, phase],
        )
    }

    fn run_client(&self, client: usize) -> Result<Outgoing> {
        let mut rng = self.client_rng(client, 0);
        let graph = &self.graphs[client];
        let cc = &self.cfg.client;
        if !self.plan.is_malicious(client) {
            return local_round(self.table, self.params, graph, &self.hood, cc, &mut rng).map(Outgoing::Update);
        }
        let update = match self.plan.mode {
            AttackMode::Adversarial | AttackMode::GaussianBaseline => {
                malicious_local_round_adversarial(self.table, self.params, graph, &self.hood, cc, self.plan, &mut rng)?
            }
            AttackMode::Backdoor => {
                let target = self
                    .plan
                    .target_user
                    .ok_or_else(|| Error::Plan("backdoor mode needs a target user".into()))?;
                let target_graph = self
                    .graphs
                    .get(target)
                    .ok_or_else(|| Error::Plan(format!("target user {target} is out of range")))?;
                malicious_local_round_backdoor(self.table, self.params, graph, target_graph, cc, self.plan, &mut rng)?
            }
            AttackMode::LieBaseline => {
                let pseudo = sample_pseudo_items(graph, &self.hood, cc.pseudo_item_count, &mut rng)?;
                let (grads, samples) = honest_gradients(self.table, self.params, graph, &pseudo)?;
                return Ok(Outgoing::LieTemplate { client, grads, samples });
            }
            AttackMode::None => unreachable!("is_malicious is false without an attack"),
        };
        Ok(Outgoing::Update(update))
    }

    /// Replaces the LIE templates with the forged updates, privatized per client.
    fn finish(&self, outgoing: Vec<Outgoing>) -> Result<Vec<ClientUpdate>> {
        let n = outgoing.len();
        let templates: Vec<(usize, &GradientBundle, usize)> = outgoing
            .iter()
            .filter_map(|o| match o {
                Outgoing::LieTemplate { client, grads, samples } => Some((*client, grads, *samples)),
                Outgoing::Update(_) => None,
            })
            .collect();
        let mut forged = Vec::new();
        if !templates.is_empty() {
            let raw: Vec<GradientBundle> = templates.iter().map(|t| t.1.clone()).collect();
            let lie = lie_updates(&raw, n, raw.len())?;
            for ((client, _, samples), g) in templates.iter().zip(lie) {
                let grads = apply_ldp(g, &self.cfg.client, &mut self.client_rng(*client, 1))?;
                forged.push(ClientUpdate::from_grads(*client, grads, *samples));
            }
        }
        let mut forged = forged.into_iter();
        Ok(outgoing
            .into_iter()
            .map(|o| match o {
                Outgoing::Update(u) => u,
                Outgoing::LieTemplate { .. } => forged.next().expect("one forged update per template"),
            })
            .collect())
    }
}

fn schedule(cfg: &ExperimentConfig, participants: &[usize], round: usize) -> Vec<usize> {
    let k = cfg.training.clients_per_round;
    if k == 0 || k >= participants.len() {
        return participants.to_vec();
    }
    let mut pool = participants.to_vec();
    let mut rng = SimRng::derive(cfg.seed, &[stream::SCHEDULE, round as u64]);
    for i in 0..k {
        let j = i + rng.index(pool.len() - i);
        pool.swap(i, j);
    }
    let mut chosen = pool[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

fn initial_model(cfg: &ExperimentConfig, prep: &Prepared) -> (EmbeddingTable, ModelParams) {
    let mut rng = SimRng::derive(cfg.seed, &[stream::INIT]);
    let d = cfg.model.embedding_dim;
    let std = cfg.model.init_std;
    let users = DenseMatrix::gaussian(prep.dataset.n_users(), d, std, &mut rng);
    let items = DenseMatrix::gaussian(prep.dataset.n_items(), d, std, &mut rng);
    let params = ModelParams::init(d, &mut rng);
    (EmbeddingTable { users, items }, params)
}

struct Evaluation {
    accuracy: Accuracy,
    fcr: Option<f64>,
}

fn evaluate(
    table: &EmbeddingTable,
    params: &ModelParams,
    prep: &Prepared,
    plan: &AttackPlan,
    ratings: &[Rating],
) -> Result<Evaluation> {
    let predictor = Predictor::new(table, params, &prep.graphs)?;
    let fcr = match (plan.mode, plan.target_user) {
        (AttackMode::Backdoor, Some(t)) => Some(backdoor_fcr(
            &predictor,
            ratings,
            t,
            &plan.target_items,
            &plan.forged_ratings,
        )?),
        _ => None,
    };
    Ok(Evaluation {
        accuracy: accuracy(&predictor, ratings)?,
        fcr,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    run_prepared(cfg, &prep)
}

/// Runs one experiment on already prepared data. The data must come from
/// [`prepare`] with the same seed for the run to be reproducible from `cfg`.
pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if prep.split.validation.is_empty() || prep.split.test.is_empty() {
        return Err(Error::Validation("validation and test sets must be nonempty".into()));
    }
    let plan = resolve_plan(cfg, prep)?;
    let participants = prep.participants();
    if participants.is_empty() {
        return Err(Error::Validation("no user has training ratings".into()));
    }
    let (mut table, mut params) = initial_model(cfg, prep);
    let layout = Layout::of(&table);
    let hood = Neighborhood {
        graphs: &prep.graphs,
        n_items: prep.dataset.n_items(),
    };
    let mut state = DefenseState::default();

    let first = evaluate(&table, &params, prep, &plan, &prep.split.validation)?;
    let mut best = (0usize, first.accuracy.rmse, table.clone(), params.clone());
    let mut reports = vec![RoundReport {
        round: 0,
        validation: Some(first.accuracy),
        fcr: first.fcr,
        best_validation_rmse: Some(first.accuracy.rmse),
        malicious_scheduled: 0,
        defense: None,
        test: None,
        test_fcr: None,
    }];
    let mut round_seconds = Vec::new();
    let mut stale = 0usize;

    for round in 1..=cfg.training.max_rounds {
        let started = Instant::now();
        let scheduled = schedule(cfg, &participants, round);
        let ctx = RoundCtx {
            cfg,
            plan: &plan,
            graphs: &prep.graphs,
            hood,
            table: &table,
            params: &params,
            round,
        };
        let outgoing = scheduled
            .par_iter()
            .map(|&c| ctx.run_client(c))
            .collect::<Result<Vec<_>>>()?;
        let updates = ctx.finish(outgoing)?;
        let malicious_scheduled = scheduled.iter().filter(|&&c| plan.is_malicious(c)).count();

        let mut server_rng = SimRng::derive(cfg.seed, &[stream::SERVER, round as u64]);
        let agg = aggregate_round(
            &updates,
            &layout,
            &cfg.defense,
            plan.attacker_fraction,
            &mut state,
            &mut server_rng,
        )?;
        apply_defended_aggregate(&agg.grads, &mut table, &mut params, cfg.training.learning_rate)?;
        if !table.is_finite() || params.validate(table.dim()).is_err() {
            return Err(Error::Parameter(format!("training diverged in round {round}")));
        }

        let mut report = RoundReport {
            round,
            validation: None,
            fcr: None,
            best_validation_rmse: None,
            malicious_scheduled,
            defense: Some(agg.diagnostics),
            test: None,
            test_fcr: None,
        };
        let mut stop = false;
        if round % cfg.training.validation_interval == 0 || round == cfg.training.max_rounds {
            let ev = evaluate(&table, &params, prep, &plan, &prep.split.validation)?;
            if ev.accuracy.rmse < best.1 {
                best = (round, ev.accuracy.rmse, table.clone(), params.clone());
                stale = 0;
            } else {
                stale += 1;
            }
            report.validation = Some(ev.accuracy);
            report.fcr = ev.fcr;
            report.best_validation_rmse = Some(best.1);
            debug!(
                "round {round}: validation rmse {:.4} (best {:.4} at {})",
                ev.accuracy.rmse, best.1, best.0
            );
            stop = stale > cfg.training.early_stop_patience;
        }
        reports.push(report);
        round_seconds.push(started.elapsed().as_secs_f64());
        if stop {
            info!("early stop after round {round}; best round {}", best.0);
            break;
        }
    }

    let (best_round, best_rmse, best_table, best_params) = best;
    let test = evaluate(&best_table, &best_params, prep, &plan, &prep.split.test)?;
    let last = reports.last_mut().expect("round 0 is always reported");
    last.test = Some(test.accuracy);
    last.test_fcr = test.fcr;

    let summary = RunSummary {
        name: cfg.name.clone(),
        dataset: cfg.data.name.clone(),
        defense: cfg.defense.kind,
        attack: plan.mode,
        seed: cfg.seed,
        rounds_run: reports.len() - 1,
        best_round,
        best_validation_rmse: best_rmse,
        test_rmse: test.accuracy.rmse,
        test_mae: test.accuracy.mae,
        test_fcr: test.fcr,
        mean_baseline_validation_rmse: prep.mean_baseline_rmse(&prep.split.validation)?,
        mean_baseline_test_rmse: prep.mean_baseline_rmse(&prep.split.test)?,
        malicious_clients: plan.malicious_clients.len(),
        cold_item_ratings: prep.split.cold_item_ratings(),
        split_checksum: prep.split.checksum(),
    };
    Ok(ExperimentOutcome {
        reports,
        summary,
        plan,
        best_table,
        best_params,
        round_seconds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    AttackerFraction,
    PseudoItemCount,
    Defense,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 3] = [
        SweepAxis::AttackerFraction,
        SweepAxis::PseudoItemCount,
        SweepAxis::Defense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::AttackerFraction => "attacker_fraction",
            SweepAxis::PseudoItemCount => "pseudo_item_count",
            SweepAxis::Defense => "defense",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let bad = |e: String| Error::config(self.name(), e);
        match self {
            SweepAxis::AttackerFraction => {
                cfg.attack.attacker_fraction = value.parse().map_err(|e| bad(format!("`{value}`: {e}")))?;
                cfg.attack.malicious_clients.clear();
            }
            SweepAxis::PseudoItemCount => {
                cfg.client.pseudo_item_count = value.parse().map_err(|e| bad(format!("`{value}`: {e}")))?;
            }
            SweepAxis::Defense => cfg.defense.kind = value.parse()?,
        }
        cfg.name = format!("{}-{}-{}", base.name, self.name(), value);
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::config(
                "axis",
                format!("unknown axis `{s}`; allowed: attacker_fraction, pseudo_item_count, defense"),
            )
        })
    }
}

/// One cell of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub value: String,
    pub config: ExperimentConfig,
    pub outcome: ExperimentOutcome,
}

/// Runs `base` once per value on one shared data split.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRun>> {
    if values.is_empty() {
        return Err(Error::config("values", "sweep needs at least one value"));
    }
    let configs = values.iter().map(|v| axis.apply(base, v)).collect::<Result<Vec<_>>>()?;
    base.validate()?;
    let prep = prepare(base)?;
    values
        .iter()
        .zip(configs)
        .map(|(value, config)| {
            info!("sweep {axis} = {value}");
            let outcome = run_prepared(&config, &prep)?;
            Ok(SweepRun {
                value: value.clone(),
                config,
                outcome,
            })
        })
        .collect()
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).expect("writing CSV to memory cannot fail");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One JSON object per line.
pub fn reports_jsonl(reports: &[RoundReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("reports serialize") + "\n")
        .collect()
}

/// One row per validation step.
pub fn summary_csv(reports: &[RoundReport]) -> String {
    csv_string(|w| {
        w.write_record([
            "round",
            "validation_rmse",
            "validation_mae",
            "fcr",
            "best_validation_rmse",
        ])?;
        for r in reports {
            if let Some(v) = r.validation {
                w.write_record([
                    r.round.to_string(),
                    v.rmse.to_string(),
                    v.mae.to_string(),
                    opt(r.fcr),
                    opt(r.best_validation_rmse),
                ])?;
            }
        }
        Ok(())
    })
}

/// Combined sweep table, one row per value.
pub fn matrix_csv(axis: SweepAxis, runs: &[SweepRun]) -> String {
    csv_string(|w| {
        w.write_record([axis.name(), "dataset", "defense", "rmse", "mae", "fcr"])?;
        for run in runs {
            let s = &run.outcome.summary;
            w.write_record([
                run.value.clone(),
                s.dataset.clone(),
                s.defense.to_string(),
                s.test_rmse.to_string(),
                s.test_mae.to_string(),
                opt(s.test_fcr),
            ])?;
        }
        Ok(())
    })
}

pub fn timings_csv(seconds: &[f64]) -> String {
    csv_string(|w| {
        w.write_record(["round", "seconds"])?;
        for (i, s) in seconds.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{s:.6}")])?;
        }
        Ok(())
    })
}
