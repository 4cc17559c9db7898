//! Robust aggregation rules: Krum, TrimmedMean, FoolsGold and FLAME, plus
//! the undefended per-row mean and the server SGD step.
//!
//! Defenses that compare whole updates work on [`FlattenedUpdate`]s. The
//! flattened coordinate order is fixed: the attention vector first, then
//! user rows by ascending index, then item rows by ascending index, each row
//! `d` wide. Rows a client did not touch are zero and are not stored.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::ClientUpdate;
use crate::error::{Error, Result};
use crate::model::{EmbeddingTable, GradientBundle, ModelParams};
use crate::numerics::{axpy, sample_gaussian, SimRng};

/// Coordinate layout of a flattened update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub dim: usize,
    pub n_users: usize,
    pub n_items: usize,
}

impl Layout {
    pub fn of(table: &EmbeddingTable) -> Self {
        Self {
            dim: table.dim(),
            n_users: table.n_users(),
            n_items: table.n_items(),
        }
    }

    pub fn len(&self) -> usize {
        self.dim * (2 + self.n_users + self.n_items)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn user_offset(&self, u: usize) -> usize {
        self.dim * (2 + u)
    }

    pub fn item_offset(&self, i: usize) -> usize {
        self.dim * (2 + self.n_users + i)
    }
}

/// Sparse real vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVec {
    pub dim: usize,
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseVec {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            idx: Vec::new(),
            val: Vec::new(),
        }
    }

    pub fn from_dense(v: &[f64]) -> Self {
        let (idx, val) = v
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != 0.0)
            .map(|(i, &x)| (i, x))
            .unzip();
        Self { dim: v.len(), idx, val }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &x) in self.idx.iter().zip(&self.val) {
            out[i] = x;
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn norm(&self) -> f64 {
        self.val.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.val.iter_mut().for_each(|x| *x *= s);
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &SparseVec) -> SparseVec {
        let (mut i, mut j) = (0, 0);
        let mut out = SparseVec::zeros(self.dim);
        while i < self.nnz() || j < other.nnz() {
            let a = self.idx.get(i).copied().unwrap_or(usize::MAX);
            let b = other.idx.get(j).copied().unwrap_or(usize::MAX);
            let (k, x) = if a < b {
                i += 1;
                (a, self.val[i - 1])
            } else if b < a {
                j += 1;
                (b, alpha * other.val[j - 1])
            } else {
                i += 1;
                j += 1;
                (a, self.val[i - 1] + alpha * other.val[j - 1])
            };
            out.idx.push(k);
            out.val.push(x);
        }
        out
    }

    /// `(dot, squared distance)` in one merge pass.
    pub fn dot_and_dist2(&self, other: &SparseVec) -> (f64, f64) {
        let (mut i, mut j) = (0, 0);
        let (mut dot, mut dist) = (0.0, 0.0);
        while i < self.nnz() && j < other.nnz() {
            let (a, b) = (self.idx[i], other.idx[j]);
            if a < b {
                dist += self.val[i] * self.val[i];
                i += 1;
            } else if b < a {
                dist += other.val[j] * other.val[j];
                j += 1;
            } else {
                let diff = self.val[i] - other.val[j];
                dot += self.val[i] * other.val[j];
                dist += diff * diff;
                i += 1;
                j += 1;
            }
        }
        dist += self.val[i..].iter().map(|x| x * x).sum::<f64>();
        dist += other.val[j..].iter().map(|x| x * x).sum::<f64>();
        (dot, dist)
    }
}

/// One client's update as a single vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlattenedUpdate {
    pub client: usize,
    pub vector: SparseVec,
}

pub fn flatten_bundle(g: &GradientBundle, layout: &Layout) -> SparseVec {
    let mut out = SparseVec::zeros(layout.len());
    let mut push_row = |offset: usize, row: &[f64]| {
        for (k, &x) in row.iter().enumerate() {
            if x != 0.0 {
                out.idx.push(offset + k);
                out.val.push(x);
            }
        }
    };
    push_row(0, &g.model_grads);
    for (&u, row) in &g.user_grads {
        push_row(layout.user_offset(u), row);
    }
    for (&i, row) in &g.item_grads {
        push_row(layout.item_offset(i), row);
    }
    out
}

pub fn flatten(update: &ClientUpdate, layout: &Layout) -> FlattenedUpdate {
    FlattenedUpdate {
        client: update.client,
        vector: flatten_bundle(&update.grads, layout),
    }
}

/// Inverse of [`flatten_bundle`]; rows whose coordinates are all zero are
/// left out.
pub fn unflatten(v: &SparseVec, layout: &Layout) -> GradientBundle {
    let d = layout.dim;
    let mut g = GradientBundle::zeros(d);
    let user_start = 2 * d;
    let item_start = layout.item_offset(0);
    for (&k, &x) in v.idx.iter().zip(&v.val) {
        if k < user_start {
            g.model_grads[k] = x;
        } else if k < item_start {
            let u = (k - user_start) / d;
            g.user_grads.entry(u).or_insert_with(|| vec![0.0; d])[(k - user_start) % d] = x;
        } else {
            let i = (k - item_start) / d;
            g.item_grads.entry(i).or_insert_with(|| vec![0.0; d])[(k - item_start) % d] = x;
        }
    }
    g
}

/// Undefended aggregation: the model gradient is averaged over every
/// client, each table row over the clients that touched it.
pub fn aggregate_plain(updates: &[ClientUpdate]) -> Result<GradientBundle> {
    let weights = vec![1.0; updates.len()];
    aggregate_weighted(updates, &weights)
}

/// Per-row weighted mean: `sum w_i g_i / sum w_i` over the clients touching
/// each row (all clients for the model gradient). Rows whose touching
/// clients all have weight zero receive no update.
pub fn aggregate_weighted(updates: &[ClientUpdate], weights: &[f64]) -> Result<GradientBundle> {
    if updates.is_empty() {
        return Err(Error::Parameter("aggregation needs at least one update".into()));
    }
    if weights.len() != updates.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    let d = updates[0].grads.model_grads.len();
    let mut out = GradientBundle {
        model_grads: vec![0.0; d],
        ..GradientBundle::default()
    };
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        for (u, &w) in updates.iter().zip(weights) {
            if u.grads.model_grads.len() != d {
                return Err(Error::Shape("model gradient lengths differ".into()));
            }
            axpy(w / total, &u.grads.model_grads, &mut out.model_grads);
        }
    }
    fn rows(
        updates: &[ClientUpdate],
        weights: &[f64],
        pick: fn(&GradientBundle) -> &BTreeMap<usize, Vec<f64>>,
    ) -> BTreeMap<usize, Vec<f64>> {
        let mut acc: BTreeMap<usize, (Vec<f64>, f64)> = BTreeMap::new();
        for (u, &w) in updates.iter().zip(weights) {
            for (&key, row) in pick(&u.grads) {
                let e = acc.entry(key).or_insert_with(|| (vec![0.0; row.len()], 0.0));
                axpy(w, row, &mut e.0);
                e.1 += w;
            }
        }
        acc.into_iter()
            .filter(|(_, (_, w))| *w > 0.0)
            .map(|(k, (mut row, w))| {
                row.iter_mut().for_each(|x| *x /= w);
                (k, row)
            })
            .collect()
    }
    out.user_grads = rows(updates, weights, |g| &g.user_grads);
    out.item_grads = rows(updates, weights, |g| &g.item_grads);
    Ok(out)
}

fn pairwise<T: Send + Copy + Default>(
    vectors: &[&SparseVec],
    f: impl Fn(&SparseVec, &SparseVec) -> T + Sync,
) -> Vec<Vec<T>> {
    let n = vectors.len();
    let upper: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|j| f(vectors[i], vectors[j])).collect())
        .collect();
    let mut full = vec![vec![T::default(); n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = upper[i][j - i - 1];
            full[i][j] = v;
            full[j][i] = v;
        }
    }
    full
}

/// Krum scores: for each update, the sum of squared distances to its
/// `n - m - 2` nearest other updates.
pub fn krum_scores(updates: &[FlattenedUpdate], m: usize) -> Result<Vec<f64>> {
    let n = updates.len();
    if n < m + 3 {
        return Err(Error::Parameter(format!("Krum needs n >= m + 3, got n={n}, m={m}")));
    }
    let vectors: Vec<&SparseVec> = updates.iter().map(|u| &u.vector).collect();
    let dist = pairwise(&vectors, |a, b| a.dot_and_dist2(b).1);
    let keep = n - m - 2;
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row[..keep].iter().sum()
        })
        .collect())
}

/// Index of the Krum winner; ties go to the lowest client id.
pub fn krum_select(updates: &[FlattenedUpdate], m: usize) -> Result<usize> {
    let scores = krum_scores(updates, m)?;
    Ok((0..updates.len())
        .min_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then(updates[a].client.cmp(&updates[b].client))
        })
        .expect("n >= 3"))
}

pub fn krum(updates: &[FlattenedUpdate], m: usize) -> Result<FlattenedUpdate> {
    Ok(updates[krum_select(updates, m)?].clone())
}

/// Mean of the `k` values closest to the median, ties by value ascending.
/// `sorted` must be ascending.
pub(crate) fn trimmed_mean_sorted(sorted: &[f64], k: usize) -> f64 {
    let n = sorted.len();
    debug_assert!(k >= 1 && k <= n);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mut hi = sorted.partition_point(|&x| x < median);
    let mut lo = hi;
    let mut sum = 0.0;
    for _ in 0..k {
        let take_left = match (lo > 0, hi < n) {
            (true, true) => {
                let (l, r) = (sorted[lo - 1], sorted[hi]);
                // Equal distance: the smaller value wins.
                (median - l) <= (r - median)
            }
            (true, false) => true,
            (false, true) => false,
            (false, false) => unreachable!("k <= n"),
        };
        if take_left {
            lo -= 1;
            sum += sorted[lo];
        } else {
            sum += sorted[hi];
            hi += 1;
        }
    }
    sum / k as f64
}

/// Coordinate-wise mean of the `n - m` values nearest each coordinate's median.
pub fn trimmed_mean(updates: &[FlattenedUpdate], m: usize) -> Result<SparseVec> {
    let n = updates.len();
    if n <= m {
        return Err(Error::Parameter(format!("TrimmedMean needs n > m, got n={n}, m={m}")));
    }
    let dim = updates[0].vector.dim;
    if updates.iter().any(|u| u.vector.dim != dim) {
        return Err(Error::Shape("flattened updates differ in length".into()));
    }
    let k = n - m;
    let mut columns: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for u in updates {
        for (&i, &x) in u.vector.idx.iter().zip(&u.vector.val) {
            columns.entry(i).or_default().push(x);
        }
    }
    let columns: Vec<(usize, Vec<f64>)> = columns.into_iter().collect();
    let values: Vec<(usize, f64)> = columns
        .into_par_iter()
        .map(|(i, mut nonzero)| {
            nonzero.sort_by(f64::total_cmp);
            let zeros = n - nonzero.len();
            let split = nonzero.partition_point(|&x| x < 0.0);
            let mut sorted = Vec::with_capacity(n);
            sorted.extend_from_slice(&nonzero[..split]);
            sorted.extend(std::iter::repeat_n(0.0, zeros));
            sorted.extend_from_slice(&nonzero[split..]);
            (i, trimmed_mean_sorted(&sorted, k))
        })
        .collect();
    let mut out = SparseVec::zeros(dim);
    for (i, x) in values {
        if x != 0.0 {
            out.idx.push(i);
            out.val.push(x);
        }
    }
    Ok(out)
}

/// FoolsGold history: running sum of every update a client has sent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DefenseState {
    pub histories: BTreeMap<usize, SparseVec>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoolsGoldOutcome {
    /// One weight per input update, in input order.
    pub weights: Vec<f64>,
    /// `sum w_i u_i / sum w_i`, or the plain mean when every weight is zero.
    pub aggregate: SparseVec,
    pub fallback: bool,
}

fn cosine(dot: f64, na: f64, nb: f64) -> f64 {
    if na > 0.0 && nb > 0.0 {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// FoolsGold weights from the clients' cumulative update histories.
pub fn foolsgold_weights(histories: &[&SparseVec]) -> Vec<f64> {
    let n = histories.len();
    if n == 1 {
        return vec![1.0];
    }
    let norms: Vec<f64> = histories.iter().map(|h| h.norm()).collect();
    let dots = pairwise(histories, |a, b| a.dot_and_dist2(b).0);
    let mut cs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        cosine(dots[i][j], norms[i], norms[j])
                    }
                })
                .collect()
        })
        .collect();
    let row_max = |row: &[f64], i: usize| {
        row.iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let maxcs: Vec<f64> = (0..n).map(|i| row_max(&cs[i], i)).collect();
    // Pardoning: damp similarity towards clients that look more sybil-like.
    for i in 0..n {
        for j in 0..n {
            if i != j && maxcs[j] > maxcs[i] && maxcs[j] > 0.0 {
                cs[i][j] *= maxcs[i] / maxcs[j];
            }
        }
    }
    let mut w: Vec<f64> = (0..n)
        .map(|i| {
            let x = (1.0 - row_max(&cs[i], i)).clamp(0.0, 1.0);
            // Rounding noise in the cosine of identical histories.
            if x < 1e-12 {
                0.0
            } else {
                x
            }
        })
        .collect();
    let top = w.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return vec![0.0; n];
    }
    for x in &mut w {
        *x /= top;
        if *x >= 1.0 {
            *x = 0.99;
        }
        *x = if *x <= 0.0 {
            0.0
        } else {
            ((*x / (1.0 - *x)).ln() + 0.5).clamp(0.0, 1.0)
        };
    }
    w
}

/// Updates the histories with this round's updates and returns the
/// similarity-based weights with the weighted aggregate.
pub fn foolsgold(updates: &[FlattenedUpdate], state: &mut DefenseState) -> Result<FoolsGoldOutcome> {
    if updates.is_empty() {
        return Err(Error::Parameter("FoolsGold needs at least one update".into()));
    }
    for u in updates {
        let h = state
            .histories
            .entry(u.client)
            .or_insert_with(|| SparseVec::zeros(u.vector.dim));
        if h.dim != u.vector.dim {
            return Err(Error::Shape("history length does not match update".into()));
        }
        *h = h.add_scaled(1.0, &u.vector);
    }
    let histories: Vec<&SparseVec> = updates.iter().map(|u| &state.histories[&u.client]).collect();
    let weights = foolsgold_weights(&histories);
    let total: f64 = weights.iter().sum();
    let (coeffs, fallback) = if total > 0.0 {
        (weights.iter().map(|w| w / total).collect::<Vec<_>>(), false)
    } else {
        warn!("FoolsGold assigned zero weight to every client; falling back to the plain mean");
        (vec![1.0 / updates.len() as f64; updates.len()], true)
    };
    let mut aggregate = SparseVec::zeros(updates[0].vector.dim);
    for (u, &c) in updates.iter().zip(&coeffs) {
        if c != 0.0 {
            aggregate = aggregate.add_scaled(c, &u.vector);
        }
    }
    Ok(FoolsGoldOutcome {
        weights,
        aggregate,
        fallback,
    })
}

/// Which clients FLAME admitted and how their updates were clipped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlameFilter {
    /// Input positions of admitted updates, ascending.
    pub admitted: Vec<usize>,
    /// Median L2 norm of the admitted updates.
    pub clip_bound: f64,
    /// Multiplier applied to each admitted update (`min(1, S / norm)`).
    pub scales: Vec<f64>,
    pub fallback: bool,
}

/// Single-linkage clustering under cosine distance.
///
/// Edges are merged in order of increasing distance. Once some component
/// holds `min_size` points, every later merge is a candidate cut; the cut
/// taken is the one followed by the widest jump in merge distance, and the
/// largest component at that cut is returned. Without any positive jump
/// every point ends up in one component.
pub fn cosine_cluster(vectors: &[&SparseVec], min_size: usize) -> Option<Vec<usize>> {
    let n = vectors.len();
    if n == 0 || min_size > n {
        return None;
    }
    if min_size <= 1 || n == 1 {
        return Some((0..n).collect());
    }
    let norms: Vec<f64> = vectors.iter().map(|v| v.norm()).collect();
    let dots = pairwise(vectors, |a, b| a.dot_and_dist2(b).0);
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((1.0 - cosine(dots[i][j], norms[i], norms[j]), i, j));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut forest = Forest::new(n);
    // (distance, largest component size) after each successful merge.
    let mut merges: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    let mut largest = 1;
    for &(dist, i, j) in &edges {
        if let Some(size) = forest.union(i, j) {
            largest = largest.max(size);
            merges.push((dist, largest));
        }
    }
    let first = merges.iter().position(|m| m.1 >= min_size)?;
    // Merges at equal distance are never split.
    let mut cut = merges.len() - 1;
    let mut widest = 0.0;
    for t in first..merges.len() - 1 {
        let gap = merges[t + 1].0 - merges[t].0;
        if gap > widest {
            widest = gap;
            cut = t;
        }
    }

    let mut forest = Forest::new(n);
    let mut done = 0;
    for &(_, i, j) in &edges {
        if done > cut {
            break;
        }
        if forest.union(i, j).is_some() {
            done += 1;
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| forest.find(i)).collect();
    let best = (0..n)
        .filter(|&r| roots[r] == r)
        .max_by_key(|&r| (forest.size[r], std::cmp::Reverse(r)))?;
    Some((0..n).filter(|&i| roots[i] == best).collect())
}

struct Forest {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl Forest {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Size of the merged component, or `None` when already joined.
    fn union(&mut self, a: usize, b: usize) -> Option<usize> {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return None;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        Some(self.size[big])
    }
}

/// FLAME filtering and clipping.
pub fn flame_filter(updates: &[FlattenedUpdate]) -> Result<FlameFilter> {
    let n = updates.len();
    if n < 2 {
        return Err(Error::Parameter(format!("FLAME needs n >= 2, got {n}")));
    }
    let vectors: Vec<&SparseVec> = updates.iter().map(|u| &u.vector).collect();
    let (admitted, fallback) = match cosine_cluster(&vectors, n / 2 + 1) {
        Some(c) => (c, false),
        None => {
            warn!("FLAME found no majority cluster; admitting every update");
            ((0..n).collect(), true)
        }
    };
    let norms: Vec<f64> = admitted.iter().map(|&i| vectors[i].norm()).collect();
    let mut sorted = norms.clone();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let clip_bound = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    };
    let scales = norms
        .iter()
        .map(|&nm| {
            if nm > clip_bound && nm > 0.0 {
                clip_bound / nm
            } else {
                1.0
            }
        })
        .collect();
    Ok(FlameFilter {
        admitted,
        clip_bound,
        scales,
        fallback,
    })
}

/// Full FLAME: filter, clip to the median norm, average the admitted
/// updates and add `N(0, (noise_factor * S)^2)` to every coordinate.
pub fn flame(updates: &[FlattenedUpdate], noise_factor: f64, rng: &mut SimRng) -> Result<(SparseVec, FlameFilter)> {
    let filter = flame_filter(updates)?;
    let dim = updates[0].vector.dim;
    let mut sum = SparseVec::zeros(dim);
    for (&i, &s) in filter.admitted.iter().zip(&filter.scales) {
        sum = sum.add_scaled(s / filter.admitted.len() as f64, &updates[i].vector);
    }
    let std = noise_factor * filter.clip_bound;
    if std == 0.0 {
        return Ok((sum, filter));
    }
    let mut dense = sum.to_dense();
    for x in &mut dense {
        *x = sample_gaussian(rng, *x, std)?;
    }
    Ok((SparseVec::from_dense(&dense), filter))
}

/// Server SGD step `param -= lr * grad` on every row present in `grad`.
pub fn apply_defended_aggregate(
    grad: &GradientBundle,
    table: &mut EmbeddingTable,
    params: &mut ModelParams,
    lr: f64,
) -> Result<()> {
    let d = table.dim();
    if grad.model_grads.len() != params.attention.len() {
        return Err(Error::Shape(format!(
            "model gradient of length {} for {} attention weights",
            grad.model_grads.len(),
            params.attention.len()
        )));
    }
    let check = |map: &BTreeMap<usize, Vec<f64>>, rows: usize, what: &str| -> Result<()> {
        match map.iter().find(|(&k, v)| k >= rows || v.len() != d) {
            Some((k, _)) => Err(Error::Shape(format!("{what} gradient row {k} does not fit the table"))),
            None => Ok(()),
        }
    };
    check(&grad.user_grads, table.n_users(), "user")?;
    check(&grad.item_grads, table.n_items(), "item")?;
    axpy(-lr, &grad.model_grads, &mut params.attention);
    for (&u, g) in &grad.user_grads {
        axpy(-lr, g, table.users.row_mut(u));
    }
    for (&i, g) in &grad.item_grads {
        axpy(-lr, g, table.items.row_mut(i));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(client: usize, v: &[f64]) -> FlattenedUpdate {
        FlattenedUpdate {
            client,
            vector: SparseVec::from_dense(v),
        }
    }

    #[test]
    fn trimmed_mean_drops_outlier() {
        let ups: Vec<_> = [1.0, 2.0, 3.0, 4.0, 100.0]
            .iter()
            .enumerate()
            .map(|(c, &x)| upd(c, &[x]))
            .collect();
        let out = trimmed_mean(&ups, 1).unwrap().to_dense();
        assert_eq!(out, vec![2.5]);
        let mean = trimmed_mean(&ups, 0).unwrap().to_dense();
        assert!((mean[0] - 22.0).abs() < 1e-12);
        assert!(trimmed_mean(&ups, 5).is_err());
    }

    #[test]
    fn krum_identical_picks_lowest_id() {
        let ups: Vec<_> = [3, 1, 2, 0].iter().map(|&c| upd(c, &[1.0, 2.0])).collect();
        assert_eq!(krum(&ups, 1).unwrap().client, 0);
        assert!(krum(&ups[..3], 1).is_err());
    }

    #[test]
    fn plain_mean_examples() {
        let mk = |c: usize, model: f64, item: usize| ClientUpdate {
            client: c,
            grads: GradientBundle {
                item_grads: [(item, vec![model])].into_iter().collect(),
                user_grads: BTreeMap::new(),
                model_grads: vec![model],
            },
            touched_items: [item].into_iter().collect(),
            sample_count: 1,
        };
        let out = aggregate_plain(&[mk(0, 1.0, 0), mk(1, 2.0, 1), mk(2, 6.0, 1)]).unwrap();
        assert_eq!(out.model_grads, vec![3.0]);
        assert_eq!(out.item_grads[&0], vec![1.0]);
        assert_eq!(out.item_grads[&1], vec![4.0]);
        assert!(aggregate_plain(&[]).is_err());
        let one = mk(7, 0.5, 3);
        assert_eq!(aggregate_plain(std::slice::from_ref(&one)).unwrap(), one.grads);
    }

    #[test]
    fn foolsgold_degenerate_cases() {
        let same = [upd(0, &[1.0, 1.0]), upd(1, &[1.0, 1.0])];
        let out = foolsgold(&same, &mut DefenseState::default()).unwrap();
        assert_eq!(out.weights, vec![0.0, 0.0]);
        assert!(out.fallback);
        assert_eq!(out.aggregate.to_dense(), vec![1.0, 1.0]);

        let ortho = [
            upd(0, &[1.0, 0.0, 0.0]),
            upd(1, &[0.0, 2.0, 0.0]),
            upd(2, &[0.0, 0.0, 3.0]),
        ];
        let out = foolsgold(&ortho, &mut DefenseState::default()).unwrap();
        assert_eq!(out.weights, vec![1.0; 3]);
        assert!(!out.fallback);
        let agg = out.aggregate.to_dense();
        assert!((agg[0] - 1.0 / 3.0).abs() < 1e-12 && (agg[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flame_identity_on_identical_updates() {
        let ups: Vec<_> = (0..5).map(|c| upd(c, &[0.5, -1.0, 2.0])).collect();
        let (agg, filter) = flame(&ups, 0.0, &mut SimRng::new(0)).unwrap();
        assert_eq!(filter.admitted, vec![0, 1, 2, 3, 4]);
        let dense = agg.to_dense();
        for (a, b) in dense.iter().zip([0.5, -1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(flame(&ups[..1], 0.0, &mut SimRng::new(0)).is_err());
    }

    #[test]
    fn sgd_step_examples() {
        let mut rng = SimRng::new(2);
        let mut table = EmbeddingTable::gaussian(2, 2, 1, &mut rng);
        let mut params = ModelParams::zeros(1);
        let before = table.clone();
        let mut g = GradientBundle::zeros(1);
        apply_defended_aggregate(&g, &mut table, &mut params, 0.5).unwrap();
        assert_eq!(table, before);
        g.item_grads.insert(1, vec![2.0]);
        apply_defended_aggregate(&g, &mut table, &mut params, 0.0).unwrap();
        assert_eq!(table, before);
        apply_defended_aggregate(&g, &mut table, &mut params, 0.01).unwrap();
        assert!((before.item(1)[0] - table.item(1)[0] - 0.02).abs() < 1e-12);
        g.item_grads.insert(5, vec![1.0]);
        assert!(apply_defended_aggregate(&g, &mut table, &mut params, 0.01).is_err());
    }

    #[test]
    fn flatten_roundtrip_layout() {
        let layout = Layout {
            dim: 2,
            n_users: 3,
            n_items: 2,
        };
        let g = GradientBundle {
            item_grads: [(1, vec![1.0, 2.0])].into_iter().collect(),
            user_grads: [(2, vec![0.0, 3.0])].into_iter().collect(),
            model_grads: vec![0.5, 0.0, 0.0, -1.0],
        };
        let v = flatten_bundle(&g, &layout);
        assert_eq!(v.dim, 14);
        assert_eq!(v.idx, vec![0, 3, 9, 12, 13]);
        assert_eq!(unflatten(&v, &layout), g);
    }
}
