//! Accuracy metrics, the favorable-case rate of a backdoor, and the
//! recommendation-threshold experiment.

use serde::{Deserialize, Serialize};

use crate::data::{LocalGraph, Rating};
use crate::error::{Error, Result};
use crate::model::{aggregate_user_embedding, EmbeddingTable, ModelParams, ModelView};
use crate::numerics::dot_unchecked;

fn check_pair(preds: &[f64], targets: &[f64]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Parameter("metric over an empty batch".into()));
    }
    Ok(())
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets)?;
    let sq: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / preds.len() as f64).sqrt())
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets)?;
    let abs: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum();
    Ok(abs / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    Benign,
    Target,
}

/// Absolute prediction errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub kind: ResidualKind,
    pub values: Vec<f64>,
}

impl Residuals {
    pub fn new(kind: ResidualKind, preds: &[f64], targets: &[f64]) -> Result<Self> {
        if preds.len() != targets.len() {
            return Err(Error::Shape("residual inputs differ in length".into()));
        }
        Ok(Self {
            kind,
            values: preds.iter().zip(targets).map(|(p, t)| (t - p).abs()).collect(),
        })
    }
}

/// `sqrt(sum r^2 / (n - 2))`.
pub fn standard_error_of_estimate(res: &Residuals) -> Result<f64> {
    let n = res.values.len();
    if n < 3 {
        return Err(Error::Parameter(format!(
            "standard error of estimate needs at least 3 residuals, got {n}"
        )));
    }
    let sq: f64 = res.values.iter().map(|r| r * r).sum();
    Ok((sq / (n - 2) as f64).sqrt())
}

/// Fraction of target residuals strictly below the benign SEE.
pub fn favorable_case_rate(benign: &Residuals, target: &Residuals) -> Result<f64> {
    if target.values.is_empty() {
        return Err(Error::Parameter("favorable case rate needs target residuals".into()));
    }
    let see = standard_error_of_estimate(benign)?;
    let hits = target.values.iter().filter(|&&r| r < see).count();
    Ok(hits as f64 / target.values.len() as f64)
}

/// Server-side predictor: each user's representation is aggregated once
/// from their local graph, without pseudo items.
pub struct Predictor<'a> {
    table: &'a EmbeddingTable,
    reprs: Vec<Vec<f64>>,
}

impl<'a> Predictor<'a> {
    pub fn new(table: &'a EmbeddingTable, params: &'a ModelParams, graphs: &[LocalGraph]) -> Result<Self> {
        if graphs.len() != table.n_users() {
            return Err(Error::Shape(format!(
                "{} graphs for {} users",
                graphs.len(),
                table.n_users()
            )));
        }
        let view = ModelView::new(table, params);
        let reprs = graphs
            .iter()
            .map(|g| aggregate_user_embedding(&view, g, &[]))
            .collect::<Result<_>>()?;
        Ok(Self { table, reprs })
    }

    pub fn predict(&self, user: usize, item: usize) -> f64 {
        dot_unchecked(&self.reprs[user], self.table.item(item))
    }

    pub fn predict_all(&self, ratings: &[Rating]) -> Vec<f64> {
        ratings.iter().map(|r| self.predict(r.user, r.item)).collect()
    }

    pub fn user_repr(&self, user: usize) -> &[f64] {
        &self.reprs[user]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub rmse: f64,
    pub mae: f64,
}

pub fn accuracy(predictor: &Predictor<'_>, ratings: &[Rating]) -> Result<Accuracy> {
    let preds = predictor.predict_all(ratings);
    let targets: Vec<f64> = ratings.iter().map(|r| r.value).collect();
    Ok(Accuracy {
        rmse: rmse(&preds, &targets)?,
        mae: mae(&preds, &targets)?,
    })
}

/// Backdoor success: target residuals `|forged - prediction|` for the target
/// user, compared against the benign residuals of `benign_ratings`.
pub fn backdoor_fcr(
    predictor: &Predictor<'_>,
    benign_ratings: &[Rating],
    target_user: usize,
    target_items: &[usize],
    forged: &[f64],
) -> Result<f64> {
    let preds = predictor.predict_all(benign_ratings);
    let targets: Vec<f64> = benign_ratings.iter().map(|r| r.value).collect();
    let benign = Residuals::new(ResidualKind::Benign, &preds, &targets)?;
    let tpreds: Vec<f64> = target_items
        .iter()
        .map(|&i| predictor.predict(target_user, i))
        .collect();
    let target = Residuals::new(ResidualKind::Target, &tpreds, forged)?;
    favorable_case_rate(&benign, &target)
}

/// Every item ordered by predicted rating for `graph.owner`, highest first,
/// ties by ascending item id.
pub fn rank_items_for_user(table: &EmbeddingTable, params: &ModelParams, graph: &LocalGraph) -> Result<Vec<usize>> {
    let h = aggregate_user_embedding(&ModelView::new(table, params), graph, &[])?;
    let scores: Vec<f64> = (0..table.n_items()).map(|i| dot_unchecked(&h, table.item(i))).collect();
    let mut order: Vec<usize> = (0..table.n_items()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Promote,
    Demote,
}

/// Strict comparison of a prediction against `threshold * rating_max`.
pub fn threshold_success(predicted: f64, rating_max: f64, threshold: f64, direction: Direction) -> bool {
    match direction {
        Direction::Promote => predicted > threshold * rating_max,
        Direction::Demote => predicted < threshold * rating_max,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdExperiment {
    pub delta_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub target_user: usize,
    pub promote_items: Vec<usize>,
    pub demote_items: Vec<usize>,
}

pub const DELTA_GRID: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
pub const GAMMA_GRID: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

impl ThresholdExperiment {
    /// Promote the `k` lowest-ranked and demote the `k` highest-ranked items
    /// of the clean model's ranking, skipping items the user already rated.
    pub fn from_ranking(ranking: &[usize], graph: &LocalGraph, k: usize) -> Self {
        let candidates: Vec<usize> = ranking.iter().copied().filter(|&i| !graph.has_item(i)).collect();
        let demote_items = candidates.iter().copied().take(k).collect();
        let promote_items = candidates.iter().rev().copied().take(k).collect();
        Self {
            delta_grid: DELTA_GRID.to_vec(),
            gamma_grid: GAMMA_GRID.to_vec(),
            target_user: graph.owner,
            promote_items,
            demote_items,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.promote_items.is_empty() || self.demote_items.is_empty() {
            return Err(Error::Parameter(
                "threshold experiment needs promote and demote items".into(),
            ));
        }
        let bad = self
            .delta_grid
            .iter()
            .chain(&self.gamma_grid)
            .find(|&&t| !(t > 0.0 && t <= 1.0));
        if let Some(t) = bad {
            return Err(Error::Parameter(format!("threshold {t} outside (0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub direction: Direction,
    pub threshold: f64,
    pub success_rate: f64,
}

/// Success rate of the attacked model's predictions for each threshold.
/// The clean model only supplies the item lists, through `exp`.
pub fn run_threshold_experiment(
    attacked: &Predictor<'_>,
    rating_max: f64,
    exp: &ThresholdExperiment,
) -> Result<Vec<ThresholdRow>> {
    exp.validate()?;
    let rate = |items: &[usize], t: f64, dir: Direction| {
        let hits = items
            .iter()
            .filter(|&&i| threshold_success(attacked.predict(exp.target_user, i), rating_max, t, dir))
            .count();
        hits as f64 / items.len() as f64
    };
    let promote = exp.delta_grid.iter().map(|&t| ThresholdRow {
        direction: Direction::Promote,
        threshold: t,
        success_rate: rate(&exp.promote_items, t, Direction::Promote),
    });
    let demote = exp.gamma_grid.iter().map(|&t| ThresholdRow {
        direction: Direction::Demote,
        threshold: t,
        success_rate: rate(&exp.demote_items, t, Direction::Demote),
    });
    Ok(promote.chain(demote).collect())
}

/// `direction,threshold,success_rate`, promote rows first.
pub fn threshold_csv(rows: &[ThresholdRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut write = || -> csv::Result<()> {
        w.write_record(["direction", "threshold", "success_rate"])?;
        for r in rows {
            let dir = match r.direction {
                Direction::Promote => "promote",
                Direction::Demote => "demote",
            };
            w.write_record([dir.to_string(), r.threshold.to_string(), r.success_rate.to_string()])?;
        }
        Ok(())
    };
    write().expect("writing CSV to memory cannot fail");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SimRng;

    fn res(v: &[f64]) -> Residuals {
        Residuals {
            kind: ResidualKind::Benign,
            values: v.to_vec(),
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[1.0, 3.0]).unwrap() - 5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert!(rmse(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn see_and_fcr_examples() {
        assert_eq!(standard_error_of_estimate(&res(&[0.0; 3])).unwrap(), 0.0);
        assert!((standard_error_of_estimate(&res(&[1.0; 4])).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(standard_error_of_estimate(&res(&[1.0, 1.0])).is_err());

        let benign = res(&[0.3, 0.0, 0.0]);
        let see = standard_error_of_estimate(&benign).unwrap();
        assert!((see - 0.3).abs() < 1e-12);
        let target = Residuals {
            kind: ResidualKind::Target,
            values: vec![0.1, 0.5],
        };
        assert_eq!(favorable_case_rate(&benign, &target).unwrap(), 0.5);
        let zero = Residuals {
            kind: ResidualKind::Target,
            values: vec![0.0; 4],
        };
        assert_eq!(favorable_case_rate(&benign, &zero).unwrap(), 1.0);
        let at = Residuals {
            kind: ResidualKind::Target,
            values: vec![see],
        };
        assert_eq!(favorable_case_rate(&benign, &at).unwrap(), 0.0);
        let empty = Residuals {
            kind: ResidualKind::Target,
            values: vec![],
        };
        assert!(favorable_case_rate(&benign, &empty).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert!(threshold_success(6.0, 10.0, 0.5, Direction::Promote));
        assert!(!threshold_success(5.0, 10.0, 0.5, Direction::Promote));
        assert!(threshold_success(3.0, 10.0, 0.4, Direction::Demote));
        assert!(!threshold_success(4.0, 10.0, 0.4, Direction::Demote));
    }

    #[test]
    fn ranking_is_permutation_with_scaled_item_first() {
        let mut rng = SimRng::new(4);
        let mut table = EmbeddingTable::gaussian(1, 5, 3, &mut rng);
        let params = ModelParams::zeros(3);
        let graph = LocalGraph {
            owner: 0,
            rated_items: vec![],
            neighbors: vec![],
        };
        // With zero attention the representation is the user's own embedding.
        let u = table.user(0).to_vec();
        table.items.row_mut(0).copy_from_slice(&u);
        let doubled: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
        table.items.row_mut(1).copy_from_slice(&doubled);
        let order = rank_items_for_user(&table, &params, &graph).unwrap();
        let pos = |i: usize| order.iter().position(|&x| x == i).unwrap();
        assert!(pos(1) < pos(0));
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..5).collect::<Vec<_>>());
    }
}
