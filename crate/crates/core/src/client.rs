//! Honest client round: pseudo-item sampling, semi-supervised labels, local
//! gradients and local differential privacy on the uploaded update.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::LocalGraph;
use crate::error::{Error, Result};
use crate::model::{
    backward, objective_predictions, EmbeddingTable, GradientBundle, LocalObjective, ModelParams, ModelView, Node,
};
use crate::numerics::{l2_norm, sample_laplacian, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    pub pseudo_item_count: usize,
    /// L2 clipping limit applied to each gradient group.
    pub clip_threshold: f64,
    /// Laplace scale multiplier on the mean absolute clipped gradient.
    pub noise_strength: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            pseudo_item_count: 10,
            clip_threshold: 0.3,
            noise_strength: 0.1,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_threshold > 0.0) {
            return Err(Error::Parameter(format!(
                "clip threshold must be positive, got {}",
                self.clip_threshold
            )));
        }
        if !(self.noise_strength >= 0.0 && self.noise_strength.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise strength must be finite and >= 0, got {}",
                self.noise_strength
            )));
        }
        Ok(())
    }
}

/// What the server receives from one client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client: usize,
    pub grads: GradientBundle,
    /// Every item the client's objective touched; real and pseudo items alike.
    pub touched_items: BTreeSet<usize>,
    pub sample_count: usize,
}

impl ClientUpdate {
    pub(crate) fn from_grads(client: usize, grads: GradientBundle, sample_count: usize) -> Self {
        let touched_items = grads.item_grads.keys().copied().collect();
        Self {
            client,
            grads,
            touched_items,
            sample_count,
        }
    }
}

/// Read-only view of all local graphs, used to build sampling pools.
#[derive(Debug, Clone, Copy)]
pub struct Neighborhood<'a> {
    pub graphs: &'a [LocalGraph],
    pub n_items: usize,
}

impl<'a> Neighborhood<'a> {
    /// Items rated by the graph's neighbors and not by the owner, ascending.
    pub fn pool(&self, graph: &LocalGraph) -> Vec<usize> {
        let pool: BTreeSet<usize> = graph
            .neighbors
            .iter()
            .flat_map(|&v| self.graphs[v].rated_items.iter().map(|&(i, _)| i))
            .filter(|&i| !graph.has_item(i))
            .collect();
        pool.into_iter().collect()
    }
}

/// `p` distinct items from the neighbors' item pool, or from every item the
/// owner has not rated when that pool is too small.
pub fn sample_pseudo_items(
    graph: &LocalGraph,
    hood: &Neighborhood<'_>,
    p: usize,
    rng: &mut SimRng,
) -> Result<Vec<usize>> {
    if p == 0 {
        return Ok(Vec::new());
    }
    let mut pool = hood.pool(graph);
    if pool.len() < p {
        pool = (0..hood.n_items).filter(|&i| !graph.has_item(i)).collect();
        if pool.len() < p {
            return Err(Error::Sampling(format!(
                "client {} needs {p} pseudo items but only {} unrated items exist",
                graph.owner,
                pool.len()
            )));
        }
    }
    for k in 0..p {
        let j = k + rng.index(pool.len() - k);
        pool.swap(k, j);
    }
    pool.truncate(p);
    Ok(pool)
}

/// Predicted ratings of the pseudo items under the current snapshot, using
/// the same aggregation (graph plus pseudo items) as local training.
pub fn pseudo_label(
    table: &EmbeddingTable,
    params: &ModelParams,
    graph: &LocalGraph,
    pseudo_items: &[usize],
) -> Result<Vec<f64>> {
    let extra: Vec<Node> = pseudo_items.iter().map(|&i| Node::Item(i)).collect();
    label_extra(&ModelView::new(table, params), graph, &extra)
}

/// Current predictions for arbitrary extra nodes inside the aggregation.
pub(crate) fn label_extra(view: &ModelView<'_>, graph: &LocalGraph, extra: &[Node]) -> Result<Vec<f64>> {
    let obj = LocalObjective {
        graph,
        extra: extra.to_vec(),
        targets: extra.iter().map(|&n| (n, 0.0)).collect(),
        foreign: None,
    };
    objective_predictions(view, &obj)
}

/// Raw (pre-privacy) gradients of an honest client's objective.
pub fn honest_gradients(
    table: &EmbeddingTable,
    params: &ModelParams,
    graph: &LocalGraph,
    pseudo_items: &[usize],
) -> Result<(GradientBundle, usize)> {
    let view = ModelView::new(table, params);
    let extra: Vec<Node> = pseudo_items.iter().map(|&i| Node::Item(i)).collect();
    let labels = label_extra(&view, graph, &extra)?;
    let obj = LocalObjective::with_labeled_extra(graph, extra, &labels);
    let n = obj.len();
    Ok((backward(&view, &obj)?.grads, n))
}

/// One honest round: sample, label, differentiate, privatize.
pub fn local_round(
    table: &EmbeddingTable,
    params: &ModelParams,
    graph: &LocalGraph,
    hood: &Neighborhood<'_>,
    cfg: &ClientConfig,
    rng: &mut SimRng,
) -> Result<ClientUpdate> {
    if !graph.participates() {
        return Err(Error::Parameter(format!(
            "client {} has no training ratings",
            graph.owner
        )));
    }
    let pseudo = sample_pseudo_items(graph, hood, cfg.pseudo_item_count, rng)?;
    let (grads, n) = honest_gradients(table, params, graph, &pseudo)?;
    let grads = apply_ldp(grads, cfg, rng)?;
    Ok(ClientUpdate::from_grads(graph.owner, grads, n))
}

/// Per-group clipping to `clip_threshold` followed by Laplace noise with
/// scale `noise_strength * mean(|clipped entries|)`. Groups are processed
/// in the order items, users, model; rows within a group by ascending id.
pub fn apply_ldp(mut g: GradientBundle, cfg: &ClientConfig, rng: &mut SimRng) -> Result<GradientBundle> {
    cfg.validate()?;
    privatize_group(g.item_grads.values_mut(), cfg, rng)?;
    privatize_group(g.user_grads.values_mut(), cfg, rng)?;
    privatize_group(std::iter::once(&mut g.model_grads), cfg, rng)?;
    Ok(g)
}

fn privatize_group<'a>(
    rows: impl Iterator<Item = &'a mut Vec<f64>>,
    cfg: &ClientConfig,
    rng: &mut SimRng,
) -> Result<()> {
    let mut rows: Vec<&mut Vec<f64>> = rows.collect();
    let count: usize = rows.iter().map(|r| r.len()).sum();
    if count == 0 {
        return Ok(());
    }
    let norm = rows.iter().map(|r| l2_norm(r).powi(2)).sum::<f64>().sqrt();
    if norm > cfg.clip_threshold {
        let s = cfg.clip_threshold / norm;
        rows.iter_mut().for_each(|r| r.iter_mut().for_each(|x| *x *= s));
    }
    let mean_abs = rows.iter().flat_map(|r| r.iter()).map(|x| x.abs()).sum::<f64>() / count as f64;
    let scale = cfg.noise_strength * mean_abs;
    if scale > 0.0 {
        for r in rows.iter_mut() {
            for x in r.iter_mut() {
                *x = sample_laplacian(rng, *x, scale)?;
            }
        }
    }
    Ok(())
}
