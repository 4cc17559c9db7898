//! Attention-aggregated user representation over a client's local graph,
//! dot-product rating prediction, RMSE loss and its exact gradients.
//!
//! For a client owning user `u`, the aggregation set is `{u}` plus its
//! neighbors, its rated items and any extra nodes (pseudo items or raw
//! vectors). Each member `v` is scored with
//! `s_v = LeakyReLU(a . E_u + b . E_v)` where `w = [a; b]` is the attention
//! vector, and the user representation is `h = sum_v softmax(s)_v E_v`.
//! A rating is predicted as `h . E_i`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LocalGraph;
use crate::error::{Error, Result};
use crate::numerics::{all_finite, axpy, dot, dot_unchecked, DenseMatrix, SimRng};

/// Server-held embeddings for every user and item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub users: DenseMatrix,
    pub items: DenseMatrix,
}

impl EmbeddingTable {
    /// Entries i.i.d. standard normal.
    pub fn gaussian(n_users: usize, n_items: usize, dim: usize, rng: &mut SimRng) -> Self {
        Self {
            users: DenseMatrix::gaussian(n_users, dim, 1.0, rng),
            items: DenseMatrix::gaussian(n_items, dim, 1.0, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn n_users(&self) -> usize {
        self.users.rows()
    }

    pub fn n_items(&self) -> usize {
        self.items.rows()
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.users.row(u)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.items.row(i)
    }

    pub fn is_finite(&self) -> bool {
        all_finite(self.users.as_slice()) && all_finite(self.items.as_slice())
    }
}

/// Shared attention parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `[a; b]`, length `2d`.
    pub attention: Vec<f64>,
    pub leaky_slope: f64,
}

impl ModelParams {
    pub const DEFAULT_SLOPE: f64 = 0.2;

    /// Attention entries i.i.d. `N(0, 1/(2d))`.
    pub fn init(dim: usize, rng: &mut SimRng) -> Self {
        let std = (1.0 / (2 * dim) as f64).sqrt();
        Self {
            attention: (0..2 * dim).map(|_| std * rng.standard_normal()).collect(),
            leaky_slope: Self::DEFAULT_SLOPE,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            attention: vec![0.0; 2 * dim],
            leaky_slope: Self::DEFAULT_SLOPE,
        }
    }

    pub fn dim(&self) -> usize {
        self.attention.len() / 2
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.attention.len() != 2 * dim {
            return Err(Error::Shape(format!(
                "attention vector has length {}, expected {}",
                self.attention.len(),
                2 * dim
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Parameter(format!(
                "leaky slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        if !all_finite(&self.attention) {
            return Err(Error::Parameter("attention weights must be finite".into()));
        }
        Ok(())
    }
}

/// Gradients of one local objective, sparse over table rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradientBundle {
    pub item_grads: BTreeMap<usize, Vec<f64>>,
    pub user_grads: BTreeMap<usize, Vec<f64>>,
    pub model_grads: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(dim: usize) -> Self {
        Self {
            item_grads: BTreeMap::new(),
            user_grads: BTreeMap::new(),
            model_grads: vec![0.0; 2 * dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.model_grads)
            && self.item_grads.values().all(|g| all_finite(g))
            && self.user_grads.values().all(|g| all_finite(g))
    }

    fn add_row(map: &mut BTreeMap<usize, Vec<f64>>, key: usize, alpha: f64, x: &[f64]) {
        let row = map.entry(key).or_insert_with(|| vec![0.0; x.len()]);
        axpy(alpha, x, row);
    }
}

/// A member of the aggregation set or a prediction target.
///
/// `Raw(k)` refers to the `k`-th vector of the raw-embedding slice passed
/// alongside; raw vectors behave exactly like item embeddings but their
/// gradients are reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Node {
    User(usize),
    Item(usize),
    Raw(usize),
}

/// Read-only view over everything a forward pass touches.
#[derive(Clone, Copy)]
pub struct ModelView<'a> {
    pub table: &'a EmbeddingTable,
    pub params: &'a ModelParams,
    pub raws: &'a [Vec<f64>],
}

impl<'a> ModelView<'a> {
    pub fn new(table: &'a EmbeddingTable, params: &'a ModelParams) -> Self {
        Self {
            table,
            params,
            raws: &[],
        }
    }

    pub fn with_raws(mut self, raws: &'a [Vec<f64>]) -> Self {
        self.raws = raws;
        self
    }

    #[inline]
    pub fn embedding(&self, node: Node) -> &'a [f64] {
        match node {
            Node::User(u) => self.table.user(u),
            Node::Item(i) => self.table.item(i),
            Node::Raw(k) => &self.raws[k],
        }
    }

    fn check(&self, nodes: impl IntoIterator<Item = Node>) -> Result<()> {
        let d = self.table.dim();
        if self.params.attention.len() != 2 * d {
            return Err(Error::Shape(format!(
                "attention length {} does not match embedding dim {d}",
                self.params.attention.len()
            )));
        }
        for node in nodes {
            let ok = match node {
                Node::User(u) => u < self.table.n_users(),
                Node::Item(i) => i < self.table.n_items(),
                Node::Raw(k) => k < self.raws.len() && self.raws[k].len() == d,
            };
            if !ok {
                return Err(Error::Shape(format!("node {node:?} is out of range")));
            }
        }
        Ok(())
    }
}

/// Forward state of one aggregation.
#[derive(Debug, Clone)]
pub struct Aggregation {
    pub owner: usize,
    pub members: Vec<Node>,
    /// Pre-activation attention logits.
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub repr: Vec<f64>,
}

fn members_of(graph: &LocalGraph, extra: &[Node]) -> Vec<Node> {
    let mut members = Vec::with_capacity(1 + graph.neighbors.len() + graph.rated_items.len() + extra.len());
    members.push(Node::User(graph.owner));
    members.extend(graph.neighbors.iter().map(|&v| Node::User(v)));
    members.extend(graph.rated_items.iter().map(|&(i, _)| Node::Item(i)));
    members.extend_from_slice(extra);
    members
}

#[inline]
fn leaky(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        slope * z
    }
}

impl Aggregation {
    pub fn compute(view: &ModelView<'_>, graph: &LocalGraph, extra: &[Node]) -> Result<Self> {
        let members = members_of(graph, extra);
        view.check(members.iter().copied())?;
        Ok(Self::compute_unchecked(view, graph.owner, members))
    }

    fn compute_unchecked(view: &ModelView<'_>, owner: usize, members: Vec<Node>) -> Self {
        let d = view.table.dim();
        let (a, b) = view.params.attention.split_at(d);
        let owner_term = dot_unchecked(a, view.table.user(owner));
        let logits: Vec<f64> = members
            .iter()
            .map(|&m| owner_term + dot_unchecked(b, view.embedding(m)))
            .collect();
        let scores: Vec<f64> = logits.iter().map(|&z| leaky(z, view.params.leaky_slope)).collect();
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mut repr = vec![0.0; d];
        for (&m, &w) in members.iter().zip(&weights) {
            axpy(w, view.embedding(m), &mut repr);
        }
        Self {
            owner,
            members,
            logits,
            weights,
            repr,
        }
    }
}

/// Attention-weighted user representation. `extra` nodes join the
/// aggregation set alongside neighbors and rated items.
pub fn aggregate_user_embedding(view: &ModelView<'_>, graph: &LocalGraph, extra: &[Node]) -> Result<Vec<f64>> {
    Ok(Aggregation::compute(view, graph, extra)?.repr)
}

pub fn predict_rating(user_repr: &[f64], item_embedding: &[f64]) -> Result<f64> {
    dot(user_repr, item_embedding)
}

/// Root mean squared error.
pub fn loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Parameter("loss of an empty batch".into()));
    }
    let sq: f64 = predictions.iter().zip(targets).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok((sq / predictions.len() as f64).sqrt())
}

/// A client's local RMSE objective.
#[derive(Debug, Clone)]
pub struct LocalObjective<'g> {
    pub graph: &'g LocalGraph,
    /// Aggregation members beyond the graph itself.
    pub extra: Vec<Node>,
    /// Targets predicted against the aggregated representation.
    pub targets: Vec<(Node, f64)>,
    /// Targets predicted against another user's representation.
    pub foreign: Option<ForeignTargets<'g>>,
}

/// Ratings scored against the representation aggregated over `graph`, whose
/// owner is usually not the client computing the objective.
#[derive(Debug, Clone)]
pub struct ForeignTargets<'g> {
    pub graph: &'g LocalGraph,
    pub targets: Vec<(Node, f64)>,
}

impl<'g> LocalObjective<'g> {
    /// Own rated items with their ratings plus `extra` with the given labels.
    pub fn with_labeled_extra(graph: &'g LocalGraph, extra: Vec<Node>, labels: &[f64]) -> Self {
        debug_assert_eq!(extra.len(), labels.len());
        let mut targets: Vec<(Node, f64)> = graph.rated_items.iter().map(|&(i, r)| (Node::Item(i), r)).collect();
        targets.extend(extra.iter().copied().zip(labels.iter().copied()));
        Self {
            graph,
            extra,
            targets,
            foreign: None,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len() + self.foreign_targets().len()
    }

    fn foreign_targets(&self) -> &[(Node, f64)] {
        self.foreign.as_ref().map_or(&[], |f| &f.targets)
    }

    fn labels(&self) -> impl Iterator<Item = f64> + '_ {
        self.targets.iter().chain(self.foreign_targets()).map(|t| t.1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss value with its gradients.
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub grads: GradientBundle,
    /// One entry per raw vector in the view, zero when not touched.
    pub raw_grads: Vec<Vec<f64>>,
}

/// Forward predictions of an objective, own targets first.
pub fn objective_predictions(view: &ModelView<'_>, obj: &LocalObjective<'_>) -> Result<Vec<f64>> {
    let (agg, foreign) = forward(view, obj)?;
    Ok(predictions_of(view, obj, &agg, foreign.as_ref()))
}

fn forward(view: &ModelView<'_>, obj: &LocalObjective<'_>) -> Result<(Aggregation, Option<Aggregation>)> {
    let agg = Aggregation::compute(view, obj.graph, &obj.extra)?;
    let foreign = match &obj.foreign {
        Some(f) => Some(Aggregation::compute(view, f.graph, &[])?),
        None => None,
    };
    view.check(obj.targets.iter().chain(obj.foreign_targets()).map(|t| t.0))?;
    Ok((agg, foreign))
}

fn predictions_of(
    view: &ModelView<'_>,
    obj: &LocalObjective<'_>,
    agg: &Aggregation,
    foreign: Option<&Aggregation>,
) -> Vec<f64> {
    let score = |repr: &[f64], targets: &[(Node, f64)]| -> Vec<f64> {
        targets
            .iter()
            .map(|&(n, _)| dot_unchecked(repr, view.embedding(n)))
            .collect()
    };
    let mut preds = score(&agg.repr, &obj.targets);
    if let Some(f) = foreign {
        preds.extend(score(&f.repr, obj.foreign_targets()));
    }
    preds
}

pub fn objective_loss(view: &ModelView<'_>, obj: &LocalObjective<'_>) -> Result<f64> {
    let preds = objective_predictions(view, obj)?;
    let targets: Vec<f64> = obj.labels().collect();
    loss(&preds, &targets)
}

struct Sink {
    table_grads: bool,
    grads: GradientBundle,
    raws: Vec<Vec<f64>>,
}

impl Sink {
    fn add(&mut self, node: Node, alpha: f64, x: &[f64]) {
        match node {
            Node::Raw(k) => axpy(alpha, x, &mut self.raws[k]),
            Node::User(u) if self.table_grads => GradientBundle::add_row(&mut self.grads.user_grads, u, alpha, x),
            Node::Item(i) if self.table_grads => GradientBundle::add_row(&mut self.grads.item_grads, i, alpha, x),
            _ => {}
        }
    }
}

/// Exact gradients of the objective's RMSE with respect to every touched
/// user row, item row, raw vector and the attention vector.
pub fn backward(view: &ModelView<'_>, obj: &LocalObjective<'_>) -> Result<Backward> {
    backward_impl(view, obj, true)
}

/// Gradients with respect to the raw vectors only; table and attention
/// gradients are skipped.
pub fn grad_wrt_extra_embeddings(view: &ModelView<'_>, obj: &LocalObjective<'_>) -> Result<Vec<Vec<f64>>> {
    if view.raws.is_empty() {
        return Ok(Vec::new());
    }
    Ok(backward_impl(view, obj, false)?.raw_grads)
}

fn backward_impl(view: &ModelView<'_>, obj: &LocalObjective<'_>, table_grads: bool) -> Result<Backward> {
    if obj.is_empty() {
        return Err(Error::Parameter("objective has no targets".into()));
    }
    let d = view.table.dim();
    let (agg, foreign) = forward(view, obj)?;
    let preds = predictions_of(view, obj, &agg, foreign.as_ref());
    let residuals: Vec<f64> = preds.iter().zip(obj.labels()).map(|(p, t)| p - t).collect();
    let n = residuals.len() as f64;
    let loss = (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();

    let mut sink = Sink {
        table_grads,
        grads: GradientBundle::zeros(d),
        raws: vec![vec![0.0; d]; view.raws.len()],
    };
    // Register every touched row so sparse keys reflect the forward pass
    // even when the gradient happens to vanish.
    if table_grads {
        let zero = vec![0.0; d];
        let members = agg.members.iter().chain(foreign.iter().flat_map(|f| &f.members));
        for &m in members.chain(obj.targets.iter().chain(obj.foreign_targets()).map(|t| &t.0)) {
            sink.add(m, 0.0, &zero);
        }
    }
    if loss == 0.0 {
        return Ok(Backward {
            loss,
            grads: sink.grads,
            raw_grads: sink.raws,
        });
    }

    // dL/dpred_k = r_k / (n L)
    let scale = 1.0 / (n * loss);
    let (own_res, foreign_res) = residuals.split_at(obj.targets.len());
    attention_backward(view, &agg, &obj.targets, own_res, scale, &mut sink);
    if let Some(f) = &foreign {
        attention_backward(view, f, obj.foreign_targets(), foreign_res, scale, &mut sink);
    }

    Ok(Backward {
        loss,
        grads: sink.grads,
        raw_grads: sink.raws,
    })
}

/// Backpropagates the residuals of targets scored against `agg.repr`
/// through the prediction and the softmax attention.
fn attention_backward(
    view: &ModelView<'_>,
    agg: &Aggregation,
    targets: &[(Node, f64)],
    residuals: &[f64],
    scale: f64,
    sink: &mut Sink,
) {
    let d = view.table.dim();
    let mut grad_repr = vec![0.0; d];
    for (&(node, _), &r) in targets.iter().zip(residuals) {
        let delta = r * scale;
        axpy(delta, view.embedding(node), &mut grad_repr);
        sink.add(node, delta, &agg.repr);
    }

    let (a, b) = view.params.attention.split_at(d);
    let slope = view.params.leaky_slope;
    let centre = dot_unchecked(&grad_repr, &agg.repr);
    let owner_emb = view.table.user(agg.owner);
    let mut owner_acc = 0.0;
    let mut grad_b = vec![0.0; d];
    for ((&m, &w), &z) in agg.members.iter().zip(&agg.weights).zip(&agg.logits) {
        let emb = view.embedding(m);
        let d_score = w * (dot_unchecked(&grad_repr, emb) - centre);
        let d_logit = if z > 0.0 { d_score } else { slope * d_score };
        sink.add(m, w, &grad_repr);
        sink.add(m, d_logit, b);
        owner_acc += d_logit;
        if sink.table_grads {
            axpy(d_logit, emb, &mut grad_b);
        }
    }
    sink.add(Node::User(agg.owner), owner_acc, a);
    if sink.table_grads {
        let (ga, gb) = sink.grads.model_grads.split_at_mut(d);
        axpy(owner_acc, owner_emb, ga);
        axpy(1.0, &grad_b, gb);
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FPCKPT\0\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint, all fields little-endian:
///
/// ```text
/// magic     8 bytes  "FPCKPT\0\0"
/// version   u32      1
/// dim       u32
/// n_users   u64
/// n_items   u64
/// slope     f64
/// attention 2*dim f64
/// users     n_users*dim f64, row-major
/// items     n_items*dim f64, row-major
/// ```
pub fn encode_checkpoint(table: &EmbeddingTable, params: &ModelParams) -> Vec<u8> {
    let d = table.dim();
    let mut out = Vec::with_capacity(40 + 8 * (2 * d + (table.n_users() + table.n_items()) * d));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(table.n_users() as u64).to_le_bytes());
    out.extend_from_slice(&(table.n_items() as u64).to_le_bytes());
    out.extend_from_slice(&params.leaky_slope.to_le_bytes());
    for x in params
        .attention
        .iter()
        .chain(table.users.as_slice())
        .chain(table.items.as_slice())
    {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(EmbeddingTable, ModelParams)> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let m = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let slope = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let mut floats = |count: usize| -> Result<Vec<f64>> {
        let raw = take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let attention = floats(2 * d)?;
    let users = floats(n * d)?;
    let items = floats(m * d)?;
    if !cur.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let params = ModelParams {
        attention,
        leaky_slope: slope,
    };
    params.validate(d)?;
    let table = EmbeddingTable {
        users: DenseMatrix::from_vec(n, d, users)?,
        items: DenseMatrix::from_vec(m, d, items)?,
    };
    Ok((table, params))
}

pub fn save_checkpoint(path: &Path, table: &EmbeddingTable, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(table, params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(EmbeddingTable, ModelParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
