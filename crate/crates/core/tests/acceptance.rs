//! Acceptance criteria on Filmtrust-scale synthetic data.
//!
//! Criteria 1 to 8 train Filmtrust-scale models (about sixty runs across
//! the file), so they are ignored by default:
//!
//! ```text
//! cargo test --release -p fedpoison-core --test acceptance -- --ignored --test-threads 1
//! ```
//!
//! Each criterion writes one `criterion N: PASS|FAIL` line to stderr,
//! bypassing the test harness's output capture.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use fedpoison::aggregation::DefenseKind;
use fedpoison::attack::AttackMode;
use fedpoison::config::{ExperimentConfig, SyntheticSpec};
use fedpoison::data::Rating;
use fedpoison::defense::{krum, trimmed_mean, FlattenedUpdate, SparseVec};
use fedpoison::eval::{
    backdoor_fcr, favorable_case_rate, rank_items_for_user, run_threshold_experiment, standard_error_of_estimate,
    Direction, Predictor, ResidualKind, Residuals, ThresholdExperiment,
};
use fedpoison::numerics::{sample_gaussian, sample_laplacian, SimRng};
use fedpoison::orchestrator::{prepare, reports_jsonl, run_prepared, ExperimentOutcome, Prepared};

const SEEDS: [u64; 3] = [1, 2, 3];
const ROBUST: [DefenseKind; 4] = [
    DefenseKind::FoolsGold,
    DefenseKind::Flame,
    DefenseKind::Krum,
    DefenseKind::TrimmedMean,
];

fn report(criterion: u32, pass: bool, detail: &str) {
    let line = format!(
        "criterion {criterion}: {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Setup {
    seed: u64,
    defense: DefenseKind,
    mode: AttackMode,
    fraction: f64,
    pseudo: usize,
}

impl Setup {
    fn new(seed: u64, defense: DefenseKind, mode: AttackMode) -> Self {
        Self {
            seed,
            defense,
            mode,
            fraction: 0.3,
            pseudo: 10,
        }
    }

    fn key(&self) -> String {
        format!(
            "{}-{}-{}-{}-{}",
            self.seed,
            self.defense,
            self.mode.name(),
            self.fraction,
            self.pseudo
        )
    }

    fn config(&self) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            name: self.key(),
            seed: self.seed,
            ..ExperimentConfig::default()
        };
        cfg.data.synthetic = Some(SyntheticSpec::Preset("filmtrust".into()));
        cfg.defense.kind = self.defense;
        cfg.attack.mode = self.mode;
        cfg.attack.attacker_fraction = self.fraction;
        cfg.client.pseudo_item_count = self.pseudo;
        cfg
    }
}

struct Run {
    outcome: ExperimentOutcome,
    seconds: f64,
}

type Slot<T> = Arc<OnceLock<T>>;

fn slot<T>(map: &Mutex<HashMap<String, Slot<T>>>, key: String) -> Slot<T> {
    map.lock().unwrap().entry(key).or_default().clone()
}

fn prepared(seed: u64) -> Arc<Prepared> {
    static CACHE: OnceLock<Mutex<HashMap<String, Slot<Arc<Prepared>>>>> = OnceLock::new();
    let s = slot(CACHE.get_or_init(Default::default), seed.to_string());
    s.get_or_init(|| Arc::new(prepare(&Setup::new(seed, DefenseKind::None, AttackMode::None).config()).unwrap()))
        .clone()
}

/// Each distinct setup trains once per test binary.
fn run_cfg(key: String, cfg: ExperimentConfig) -> Arc<Run> {
    static CACHE: OnceLock<Mutex<HashMap<String, Slot<Arc<Run>>>>> = OnceLock::new();
    let s = slot(CACHE.get_or_init(Default::default), key);
    s.get_or_init(|| {
        let prep = prepared(cfg.seed);
        let start = Instant::now();
        let outcome = run_prepared(&cfg, &prep).unwrap();
        Arc::new(Run {
            outcome,
            seconds: start.elapsed().as_secs_f64(),
        })
    })
    .clone()
}

fn run(setup: Setup) -> Arc<Run> {
    run_cfg(setup.key(), setup.config())
}

fn test_rmse(setup: Setup) -> f64 {
    run(setup).outcome.summary.test_rmse
}

fn mean_predictor_rmse(train: &[Rating], eval: &[Rating]) -> f64 {
    let mu = train.iter().map(|r| r.value).sum::<f64>() / train.len() as f64;
    (eval.iter().map(|r| (r.value - mu).powi(2)).sum::<f64>() / eval.len() as f64).sqrt()
}

#[test]
#[ignore = "trains Filmtrust-scale models; run with --ignored"]
fn criterion_1_training_sanity() {
    let r = run(Setup::new(1, DefenseKind::None, AttackMode::None));
    let prep = prepared(1);
    let baseline = mean_predictor_rmse(&prep.split.train, &prep.split.validation);
    let best = r.outcome.summary.best_validation_rmse;
    let pass = best <= 0.9 * baseline && r.seconds <= 600.0;
    report(
        1,
        pass,
        &format!(
            "best validation RMSE {best:.4} vs mean predictor {baseline:.4} (ratio {:.3}, need <= 0.900); {:.1}s (limit 600s)",
            best / baseline,
            r.seconds
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "trains Filmtrust-scale models; run with --ignored"]
fn criterion_2_pseudo_items_do_not_hurt() {
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let with = test_rmse(Setup::new(seed, DefenseKind::None, AttackMode::None));
        let without = test_rmse(Setup {
            pseudo: 0,
            ..Setup::new(seed, DefenseKind::None, AttackMode::None)
        });
        pass &= with <= 1.02 * without;
        detail.push(format!(
            "seed {seed}: p=10 {with:.4} / p=0 {without:.4} = {:.3}",
            with / without
        ));
    }
    report(2, pass, &format!("{} (need <= 1.020)", detail.join("; ")));
    assert!(pass);
}

#[test]
#[ignore = "trains Filmtrust-scale models; run with --ignored"]
fn criterion_3_adversarial_effect_against_defenses() {
    let mut pass = true;
    let mut detail = Vec::new();
    for defense in ROBUST {
        for seed in SEEDS {
            let attacked = test_rmse(Setup::new(seed, defense, AttackMode::Adversarial));
            let clean = test_rmse(Setup::new(seed, defense, AttackMode::None));
            let ratio = attacked / clean;
            pass &= ratio >= 1.3;
            detail.push(format!("{defense}/{seed} {ratio:.3}"));
        }
    }
    report(
        3,
        pass,
        &format!("attacked/clean test RMSE: {} (need >= 1.300 each)", detail.join(", ")),
    );
    assert!(pass);
}

#[test]
#[ignore = "trains Filmtrust-scale models; run with --ignored"]
fn criterion_4_gaussian_baseline_null_effect() {
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let noisy = test_rmse(Setup::new(seed, DefenseKind::None, AttackMode::GaussianBaseline));
        let clean = test_rmse(Setup::new(seed, DefenseKind::None, AttackMode::None));
        let rel = (noisy - clean).abs() / clean;
        pass &= rel <= 0.05;
        detail.push(format!(
            "seed {seed}: {noisy:.4} vs {clean:.4} ({:+.2}%)",
            100.0 * (noisy - clean) / clean
        ));
    }
    report(4, pass, &format!("{} (need |change| <= 5%)", detail.join("; ")));
    assert!(pass);
}

#[test]
#[ignore = "trains Filmtrust-scale models; run with --ignored"]
fn criterion_5_lie_weaker_than_adversarial() {
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in SEEDS {
        // LIE on the scenario without pseudo items, adversarial mode on the
        // scenario with them, each against its own clean run.
        let base = Setup {
            pseudo: 0,
            ..Setup::new(seed, DefenseKind::None, AttackMode::None)
        };
        let lie = test_rmse(Setup {
            mode: AttackMode::LieBaseline,
            ..base
        }) / test_rmse(base);
        let adv = test_rmse(Setup::new(seed, DefenseKind::None, AttackMode::Adversarial))
            / test_rmse(Setup::new(seed, DefenseKind::None, AttackMode::None));
        pass &= lie < adv;
        detail.push(format!("seed {seed}: LIE {lie:.3} vs adversarial {adv:.3}"));
    }
    report(
        5,
        pass,
        &format!("test RMSE inflation {} (need LIE < adversarial)", detail.join("; ")),
    );
    assert!(pass);
}

#[test]
#[ignore = "trains Filmtrust-scale models; run with --ignored"]
fn criterion_6_backdoor_effectiveness() {
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let prep = prepared(seed);
        let none = run(Setup::new(seed, DefenseKind::None, AttackMode::Backdoor));
        let plan = &none.outcome.plan;
        let target = plan.target_user.unwrap();
        let clean = run(Setup::new(seed, DefenseKind::None, AttackMode::None));
        let p = Predictor::new(&clean.outcome.best_table, &clean.outcome.best_params, &prep.graphs).unwrap();
        let clean_fcr = backdoor_fcr(&p, &prep.split.test, target, &plan.target_items, &plan.forged_ratings).unwrap();
        pass &= clean_fcr <= 0.3;
        detail.push(format!("seed {seed}: no-attack FCR {clean_fcr:.2}"));
        for defense in DefenseKind::ALL {
            let attacked = run(Setup::new(seed, defense, AttackMode::Backdoor));
            assert_eq!(&attacked.outcome.plan.target_items, &plan.target_items);
            let fcr = attacked.outcome.summary.test_fcr.unwrap();
            let rmse = attacked.outcome.summary.test_rmse;
            let clean_rmse = test_rmse(Setup::new(seed, defense, AttackMode::None));
            let ok = fcr >= 0.7 && rmse <= 1.05 * clean_rmse;
            pass &= ok;
            detail.push(format!(
                "{defense}: FCR {fcr:.2}, RMSE {rmse:.4}/{clean_rmse:.4} = {:.3}{}",
                rmse / clean_rmse,
                if ok { "" } else { " !" }
            ));
        }
    }
    report(
        6,
        pass,
        &format!(
            "{} (need FCR >= 0.70, RMSE ratio <= 1.050, no-attack FCR <= 0.30)",
            detail.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "trains Filmtrust-scale models; run with --ignored"]
fn criterion_7_threshold_shape() {
    let seed = 1;
    let prep = prepared(seed);
    let clean = run(Setup::new(seed, DefenseKind::None, AttackMode::None));
    let base = run(Setup::new(seed, DefenseKind::None, AttackMode::Backdoor));
    let user = base.outcome.plan.target_user.unwrap();
    let ranking = rank_items_for_user(
        &clean.outcome.best_table,
        &clean.outcome.best_params,
        &prep.graphs[user],
    )
    .unwrap();
    let exp = ThresholdExperiment::from_ranking(&ranking, &prep.graphs[user], 10);

    let attacked = |direction: Direction, items: &[usize], rating: f64| {
        let mut cfg = Setup::new(seed, DefenseKind::None, AttackMode::Backdoor).config();
        cfg.attack.target_user = Some(user);
        cfg.attack.target_items = items.to_vec();
        cfg.attack.forged_ratings = vec![rating; items.len()];
        let r = run_cfg(format!("threshold-{direction:?}"), cfg);
        let p = Predictor::new(&r.outcome.best_table, &r.outcome.best_params, &prep.graphs).unwrap();
        run_threshold_experiment(&p, 8.0, &exp)
            .unwrap()
            .into_iter()
            .filter(|row| row.direction == direction)
            .collect::<Vec<_>>()
    };
    let promote = attacked(Direction::Promote, &exp.promote_items, 8.0);
    let demote = attacked(Direction::Demote, &exp.demote_items, 1.0);
    let mut pass = true;
    let mut detail = Vec::new();
    for row in promote.iter().chain(&demote) {
        let required = match row.direction {
            Direction::Promote => row.threshold <= 0.7 + 1e-9,
            Direction::Demote => row.threshold >= 0.4 - 1e-9,
        };
        if required {
            pass &= row.success_rate == 1.0;
        }
        detail.push(format!(
            "{:?} {:.1}: {:.0}%{}",
            row.direction,
            row.threshold,
            100.0 * row.success_rate,
            if required { "*" } else { "" }
        ));
    }
    report(7, pass, &format!("{} (* must be 100%)", detail.join(", ")));
    assert!(pass);
}

#[test]
#[ignore = "trains Filmtrust-scale models; run with --ignored"]
fn criterion_8_attack_strength_trends() {
    let seed = 1;
    let by_fraction: Vec<(f64, f64)> = [0.1, 0.2, 0.3, 0.4, 0.5]
        .iter()
        .map(|&fraction| {
            (
                fraction,
                test_rmse(Setup {
                    fraction,
                    ..Setup::new(seed, DefenseKind::None, AttackMode::Adversarial)
                }),
            )
        })
        .collect();
    let monotone = by_fraction.windows(2).all(|w| w[1].1 >= 0.97 * w[0].1);
    let by_p: Vec<(usize, f64)> = [10, 25, 50, 100]
        .iter()
        .map(|&pseudo| {
            (
                pseudo,
                test_rmse(Setup {
                    pseudo,
                    ..Setup::new(seed, DefenseKind::None, AttackMode::Adversarial)
                }),
            )
        })
        .collect();
    let lo = by_p.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let hi = by_p.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let spread = (hi - lo) / lo;
    let pass = monotone && spread < 0.15;
    let fmt = |v: Vec<String>| v.join(" ");
    report(
        8,
        pass,
        &format!(
            "fraction -> RMSE [{}] nondecreasing within 3%: {monotone}; p -> RMSE [{}] spread {:.1}% (need < 15%)",
            fmt(by_fraction.iter().map(|(f, r)| format!("{f}:{r:.4}")).collect()),
            fmt(by_p.iter().map(|(p, r)| format!("{p}:{r:.4}")).collect()),
            100.0 * spread
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_numerical_oracles() {
    // (a) finite differences.
    let mut rng = SimRng::new(99);
    let grad_err = (0..100)
        .map(|_| common::max_error(&common::instance(rng.next_u64())))
        .fold(0.0, f64::max);
    let a = grad_err <= 1e-4;

    // (b) robust aggregators against brute force.
    let mut b = true;
    for _ in 0..1000 {
        let n = 3 + rng.index(4);
        let dim = 1 + rng.index(4);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        if rng.uniform() < 0.3 {
                            0.0
                        } else {
                            (rng.index(7) as f64) - 3.0
                        }
                    })
                    .collect()
            })
            .collect();
        let ups: Vec<FlattenedUpdate> = rows
            .iter()
            .enumerate()
            .map(|(client, r)| FlattenedUpdate {
                client,
                vector: SparseVec::from_dense(r),
            })
            .collect();
        let m = rng.index(n - 2);
        b &= krum(&ups, m).unwrap().client == common::brute_krum(&rows, m);
        let m = rng.index(n);
        let got = trimmed_mean(&ups, m).unwrap().to_dense();
        b &= got
            .iter()
            .zip(common::brute_trimmed(&rows, m))
            .all(|(g, w)| (g - w).abs() <= 1e-12);
    }

    // (c) sampler moments within three standard errors.
    let k = 100_000;
    let lap: Vec<f64> = (0..k).map(|_| sample_laplacian(&mut rng, 0.0, 1.0).unwrap()).collect();
    let gau: Vec<f64> = (0..k).map(|_| sample_gaussian(&mut rng, 0.0, 1.0).unwrap()).collect();
    let (lm, lv) = common::moments(&lap);
    let (gm, gv) = common::moments(&gau);
    let kf = k as f64;
    let c = lm.abs() <= 3.0 * (2.0 / kf).sqrt()
        && (lv - 2.0).abs() <= 3.0 * (20.0 / kf).sqrt()
        && gm.abs() <= 3.0 * (1.0 / kf).sqrt()
        && (gv - 1.0).abs() <= 3.0 * (2.0 / kf).sqrt();

    // (d) SEE and FCR hand examples.
    let benign = Residuals::new(ResidualKind::Benign, &[0.3, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap();
    let see = standard_error_of_estimate(&benign).unwrap();
    let target = Residuals::new(ResidualKind::Target, &[0.1, 0.5], &[0.0, 0.0]).unwrap();
    let at_see = Residuals::new(ResidualKind::Target, &[see], &[0.0]).unwrap();
    let d = (see - 0.3).abs() < 1e-12
        && favorable_case_rate(&benign, &target).unwrap() == 0.5
        && favorable_case_rate(&benign, &at_see).unwrap() == 0.0;

    // (e) byte-identical reports for a repeated seed.
    let mut cfg = ExperimentConfig {
        seed: 8,
        ..ExperimentConfig::default()
    };
    cfg.training.max_rounds = 20;
    cfg.attack.mode = AttackMode::Adversarial;
    cfg.attack.attacker_fraction = 0.2;
    cfg.defense.kind = DefenseKind::Flame;
    let prep = prepare(&cfg).unwrap();
    let once = reports_jsonl(&run_prepared(&cfg, &prep).unwrap().reports);
    let twice = reports_jsonl(&run_prepared(&cfg, &prepare(&cfg).unwrap()).unwrap().reports);
    let e = once == twice;

    let pass = a && b && c && d && e;
    report(
        9,
        pass,
        &format!(
            "(a) max gradient error {grad_err:.2e}: {a}; (b) Krum/TrimmedMean brute force: {b}; (c) sampler moments: {c}; (d) SEE/FCR examples: {d}; (e) identical reports: {e}"
        ),
    );
    assert!(pass);
}
