//! Adversary behaviour: crafted fake pseudo items (adversarial mode),
//! forged target ratings (backdoor mode), and the LIE and Gaussian-noise
//! baselines.
//!
//! Malicious clients only see the public embedding table, the model
//! parameters and their own local graph. Their output is a plain
//! [`ClientUpdate`] that goes through the same privacy step as everyone else.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::client::{apply_ldp, label_extra, sample_pseudo_items, ClientConfig, ClientUpdate, Neighborhood};
use crate::data::{LocalGraph, RatingRange};
use crate::error::{Error, Result};
use crate::model::{
    backward, grad_wrt_extra_embeddings, objective_loss, EmbeddingTable, ForeignTargets, GradientBundle,
    LocalObjective, ModelParams, ModelView, Node,
};
use crate::numerics::{axpy, inverse_normal_cdf, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    #[default]
    None,
    Adversarial,
    Backdoor,
    LieBaseline,
    GaussianBaseline,
}

impl AttackMode {
    pub const ALL: [AttackMode; 5] = [
        AttackMode::None,
        AttackMode::Adversarial,
        AttackMode::Backdoor,
        AttackMode::LieBaseline,
        AttackMode::GaussianBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackMode::None => "none",
            AttackMode::Adversarial => "adversarial",
            AttackMode::Backdoor => "backdoor",
            AttackMode::LieBaseline => "lie_baseline",
            AttackMode::GaussianBaseline => "gaussian_baseline",
        }
    }
}

/// Attacker configuration shared by every malicious client of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackPlan {
    pub mode: AttackMode,
    /// Filled in by the orchestrator from `attacker_fraction` when empty.
    pub malicious_clients: BTreeSet<usize>,
    pub attacker_fraction: f64,
    /// Fake pseudo items per malicious client; `None` replaces every sampled
    /// pseudo item.
    pub fake_item_count: Option<usize>,
    pub craft_steps: usize,
    pub craft_lr: f64,
    pub target_user: Option<usize>,
    pub target_items: Vec<usize>,
    pub forged_ratings: Vec<f64>,
}

impl Default for AttackPlan {
    fn default() -> Self {
        Self {
            mode: AttackMode::None,
            malicious_clients: BTreeSet::new(),
            attacker_fraction: 0.0,
            fake_item_count: None,
            craft_steps: 5,
            craft_lr: 1.0,
            target_user: None,
            target_items: Vec::new(),
            forged_ratings: Vec::new(),
        }
    }
}

impl AttackPlan {
    pub fn is_malicious(&self, client: usize) -> bool {
        self.mode != AttackMode::None && self.malicious_clients.contains(&client)
    }

    /// Checks the plan against the federation it will run in.
    pub fn validate(&self, graphs: &[LocalGraph], range: RatingRange) -> Result<()> {
        if !(0.0..=0.5).contains(&self.attacker_fraction) {
            return Err(Error::Plan(format!(
                "attacker fraction {} outside [0, 0.5]",
                self.attacker_fraction
            )));
        }
        if !(self.craft_lr >= 0.0 && self.craft_lr.is_finite()) {
            return Err(Error::Plan("craft_lr must be finite and >= 0".into()));
        }
        for &c in &self.malicious_clients {
            if c >= graphs.len() || !graphs[c].participates() {
                return Err(Error::Plan(format!("malicious client {c} does not participate")));
            }
        }
        if self.mode != AttackMode::Backdoor {
            return Ok(());
        }
        let target = self
            .target_user
            .ok_or_else(|| Error::Plan("backdoor mode needs a target user".into()))?;
        if target >= graphs.len() {
            return Err(Error::Plan(format!("target user {target} does not exist")));
        }
        if self.target_items.is_empty() {
            return Err(Error::Plan("backdoor mode needs target items".into()));
        }
        if self.forged_ratings.len() != self.target_items.len() {
            return Err(Error::Plan(format!(
                "{} forged ratings for {} target items",
                self.forged_ratings.len(),
                self.target_items.len()
            )));
        }
        if let Some(r) = self.forged_ratings.iter().find(|&&r| !range.contains(r)) {
            return Err(Error::Plan(format!(
                "forged rating {r} outside [{}, {}]",
                range.min, range.max
            )));
        }
        let distinct: BTreeSet<_> = self.target_items.iter().collect();
        if distinct.len() != self.target_items.len() {
            return Err(Error::Plan("duplicate target items".into()));
        }
        if let Some(i) = self.target_items.iter().find(|&&i| graphs[target].has_item(i)) {
            return Err(Error::Plan(format!(
                "target item {i} already belongs to the target user's local items"
            )));
        }
        Ok(())
    }
}

/// Embeddings standing in for pseudo items that do not exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeEmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
}

/// `count` vectors with i.i.d. standard normal entries.
pub fn gaussian_baseline_embeddings(count: usize, dim: usize, rng: &mut SimRng) -> FakeEmbeddingSet {
    FakeEmbeddingSet {
        vectors: (0..count)
            .map(|_| (0..dim).map(|_| rng.standard_normal()).collect())
            .collect(),
    }
}

/// Objective over the client's real items plus the fake vectors, with fake
/// labels taken from the frozen model's current predictions.
fn fake_objective<'g>(view: &ModelView<'_>, graph: &'g LocalGraph, extra: Vec<Node>) -> Result<LocalObjective<'g>> {
    let labels = label_extra(view, graph, &extra)?;
    Ok(LocalObjective::with_labeled_extra(graph, extra, &labels))
}

/// Local RMSE with the given fake vectors mixed in as pseudo items.
pub fn loss_with_fakes(
    table: &EmbeddingTable,
    params: &ModelParams,
    graph: &LocalGraph,
    fakes: &FakeEmbeddingSet,
) -> Result<f64> {
    let view = ModelView::new(table, params).with_raws(&fakes.vectors);
    let extra = (0..fakes.vectors.len()).map(Node::Raw).collect();
    objective_loss(&view, &fake_objective(&view, graph, extra)?)
}

/// Gradient ascent on the local loss with respect to the fake vectors only.
/// The table and parameters are borrowed immutably and never change.
pub fn craft_adversarial_embeddings(
    table: &EmbeddingTable,
    params: &ModelParams,
    graph: &LocalGraph,
    count: usize,
    steps: usize,
    lr: f64,
    rng: &mut SimRng,
) -> Result<FakeEmbeddingSet> {
    let mut fakes = gaussian_baseline_embeddings(count, table.dim(), rng);
    if count == 0 {
        return Ok(fakes);
    }
    let extra: Vec<Node> = (0..count).map(Node::Raw).collect();
    for _ in 0..steps {
        let view = ModelView::new(table, params).with_raws(&fakes.vectors);
        let obj = fake_objective(&view, graph, extra.clone())?;
        let grads = grad_wrt_extra_embeddings(&view, &obj)?;
        for (v, g) in fakes.vectors.iter_mut().zip(&grads) {
            axpy(lr, g, v);
        }
    }
    Ok(fakes)
}

/// A malicious round where some sampled pseudo items are replaced by fake
/// embeddings. The fakes' gradients are reported under the ids of the
/// pseudo items they replaced, so they land on real table rows.
pub fn malicious_local_round_adversarial(
    table: &EmbeddingTable,
    params: &ModelParams,
    graph: &LocalGraph,
    hood: &Neighborhood<'_>,
    cfg: &ClientConfig,
    plan: &AttackPlan,
    rng: &mut SimRng,
) -> Result<ClientUpdate> {
    let steps = match plan.mode {
        AttackMode::Adversarial => plan.craft_steps,
        AttackMode::GaussianBaseline => 0,
        other => {
            return Err(Error::Plan(format!(
                "fake pseudo items are not used in {} mode",
                other.name()
            )))
        }
    };
    let pseudo = sample_pseudo_items(graph, hood, cfg.pseudo_item_count, rng)?;
    let k = plan.fake_item_count.unwrap_or(pseudo.len()).min(pseudo.len());
    let fakes = craft_adversarial_embeddings(table, params, graph, k, steps, plan.craft_lr, rng)?;

    let view = ModelView::new(table, params).with_raws(&fakes.vectors);
    let extra: Vec<Node> = (0..k)
        .map(Node::Raw)
        .chain(pseudo[k..].iter().map(|&i| Node::Item(i)))
        .collect();
    let obj = fake_objective(&view, graph, extra)?;
    let n = obj.len();
    let b = backward(&view, &obj)?;
    let mut grads = b.grads;
    for (&item, g) in pseudo[..k].iter().zip(&b.raw_grads) {
        let row = grads.item_grads.entry(item).or_insert_with(|| vec![0.0; g.len()]);
        axpy(1.0, g, row);
    }
    let grads = apply_ldp(grads, cfg, rng)?;
    Ok(ClientUpdate::from_grads(graph.owner, grads, n))
}

/// Raw gradients of the backdoor objective: own ratings predicted from the
/// client's aggregated representation, plus forged ratings of the target
/// items predicted from the target user's representation, aggregated over
/// `target_graph`.
///
/// A target item the client rated itself only appears through its forged
/// rating.
pub fn backdoor_gradients(
    table: &EmbeddingTable,
    params: &ModelParams,
    graph: &LocalGraph,
    target_graph: &LocalGraph,
    plan: &AttackPlan,
) -> Result<(GradientBundle, usize)> {
    let target = plan
        .target_user
        .ok_or_else(|| Error::Plan("backdoor mode needs a target user".into()))?;
    if target_graph.owner != target {
        return Err(Error::Plan(format!(
            "target graph belongs to user {}, plan targets user {target}",
            target_graph.owner
        )));
    }
    if plan.forged_ratings.len() != plan.target_items.len() {
        return Err(Error::Plan("forged ratings do not match target items".into()));
    }
    let forged: BTreeMap<usize, f64> = plan
        .target_items
        .iter()
        .copied()
        .zip(plan.forged_ratings.iter().copied())
        .collect();
    let obj = LocalObjective {
        graph,
        extra: Vec::new(),
        targets: graph
            .rated_items
            .iter()
            .filter(|(i, _)| !forged.contains_key(i))
            .map(|&(i, r)| (Node::Item(i), r))
            .collect(),
        foreign: Some(ForeignTargets {
            graph: target_graph,
            targets: plan
                .target_items
                .iter()
                .zip(&plan.forged_ratings)
                .map(|(&i, &r)| (Node::Item(i), r))
                .collect(),
        }),
    };
    let view = ModelView::new(table, params);
    let n = obj.len();
    Ok((backward(&view, &obj)?.grads, n))
}

pub fn malicious_local_round_backdoor(
    table: &EmbeddingTable,
    params: &ModelParams,
    graph: &LocalGraph,
    target_graph: &LocalGraph,
    cfg: &ClientConfig,
    plan: &AttackPlan,
    rng: &mut SimRng,
) -> Result<ClientUpdate> {
    if plan.mode != AttackMode::Backdoor {
        return Err(Error::Plan(format!("plan mode is {}", plan.mode.name())));
    }
    let (grads, n) = backdoor_gradients(table, params, graph, target_graph, plan)?;
    let grads = apply_ldp(grads, cfg, rng)?;
    Ok(ClientUpdate::from_grads(graph.owner, grads, n))
}

/// LIE replication: coordinate-wise `mu - z * sigma` over the templates,
/// densified over the union of their rows, repeated `m` times.
///
/// `n` counts all clients, `m` the malicious ones; `z` is the normal quantile
/// of `(n - m - s) / (n - m)` with `s = floor(n/2) + 1 - m`.
pub fn lie_updates(templates: &[GradientBundle], n: usize, m: usize) -> Result<Vec<GradientBundle>> {
    if m == 0 {
        return Err(Error::Parameter("LIE needs at least one malicious client".into()));
    }
    if n <= m {
        return Err(Error::Parameter(format!("LIE needs n > m, got n={n}, m={m}")));
    }
    if templates.is_empty() {
        return Err(Error::Parameter("LIE needs template updates".into()));
    }
    let z = lie_z(n, m)?;
    let dim = templates[0].model_grads.len();
    let count = templates.len() as f64;

    let perturb = |column: &mut dyn Iterator<Item = Option<&Vec<f64>>>, width: usize| -> Vec<f64> {
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        for v in column.flatten() {
            for (k, x) in v.iter().enumerate() {
                sum[k] += x;
                sq[k] += x * x;
            }
        }
        (0..width)
            .map(|k| {
                let mu = sum[k] / count;
                let var = (sq[k] / count - mu * mu).max(0.0);
                mu - z * var.sqrt()
            })
            .collect()
    };

    let model_grads = perturb(&mut templates.iter().map(|t| Some(&t.model_grads)), dim);
    let rows = |pick: fn(&GradientBundle) -> &BTreeMap<usize, Vec<f64>>| {
        let keys: BTreeSet<usize> = templates.iter().flat_map(|t| pick(t).keys().copied()).collect();
        keys.into_iter()
            .map(|key| {
                let width = templates
                    .iter()
                    .find_map(|t| pick(t).get(&key).map(Vec::len))
                    .unwrap_or(0);
                let row = perturb(&mut templates.iter().map(|t| pick(t).get(&key)), width);
                (key, row)
            })
            .collect::<BTreeMap<_, _>>()
    };
    let out = GradientBundle {
        item_grads: rows(|t| &t.item_grads),
        user_grads: rows(|t| &t.user_grads),
        model_grads,
    };
    Ok(vec![out; m])
}

pub fn lie_z(n: usize, m: usize) -> Result<f64> {
    if n <= m {
        return Err(Error::Parameter(format!("LIE needs n > m, got n={n}, m={m}")));
    }
    let s = (n / 2 + 1) as f64 - m as f64;
    let honest = (n - m) as f64;
    inverse_normal_cdf((honest - s) / honest)
}
