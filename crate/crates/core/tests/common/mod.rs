//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use fedpoison::data::LocalGraph;
use fedpoison::model::{
    backward, grad_wrt_extra_embeddings, objective_loss, EmbeddingTable, ForeignTargets, LocalObjective, ModelParams,
    ModelView, Node,
};
use fedpoison::numerics::SimRng;

pub struct Instance {
    table: EmbeddingTable,
    params: ModelParams,
    raws: Vec<Vec<f64>>,
    graph: LocalGraph,
    foreign_graph: LocalGraph,
    extra: Vec<Node>,
    targets: Vec<(Node, f64)>,
    foreign: Vec<(Node, f64)>,
}

fn subset(rng: &mut SimRng, pool: impl Iterator<Item = usize>, p: f64) -> Vec<usize> {
    pool.filter(|_| rng.uniform() < p).collect()
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = SimRng::new(seed);
    let d = 1 + rng.index(4);
    let n_users = 3 + rng.index(4);
    let n_items = 3 + rng.index(6);
    let table = EmbeddingTable::gaussian(n_users, n_items, d, &mut rng);
    let mut params = ModelParams::init(d, &mut rng);
    params.attention.iter_mut().for_each(|w| *w *= 3.0);
    let n_raws = rng.index(3);
    let raws: Vec<Vec<f64>> = (0..n_raws)
        .map(|_| (0..d).map(|_| rng.standard_normal()).collect())
        .collect();

    let graph_of = |owner: usize, rng: &mut SimRng| {
        let neighbors = subset(rng, (0..n_users).filter(|&u| u != owner), 0.5);
        let rated_items = subset(rng, 0..n_items, 0.5)
            .into_iter()
            .map(|i| (i, 1.0 + 4.0 * rng.uniform()))
            .collect();
        LocalGraph {
            owner,
            rated_items,
            neighbors,
        }
    };
    let graph = graph_of(0, &mut rng);
    let foreign_graph = graph_of(1, &mut rng);

    let mut extra: Vec<Node> = subset(&mut rng, (0..n_items).filter(|&i| !graph.has_item(i)), 0.4)
        .into_iter()
        .map(Node::Item)
        .collect();
    extra.extend((0..n_raws).map(Node::Raw));
    let mut targets: Vec<(Node, f64)> = graph.rated_items.iter().map(|&(i, r)| (Node::Item(i), r)).collect();
    targets.extend(extra.iter().map(|&n| (n, 5.0 * rng.uniform())));
    let foreign = if rng.uniform() < 0.5 {
        subset(&mut rng, 0..n_items, 0.4)
            .into_iter()
            .map(|i| (Node::Item(i), 1.0 + 4.0 * rng.uniform()))
            .collect()
    } else {
        Vec::new()
    };
    if targets.is_empty() && foreign.is_empty() {
        targets.push((Node::Item(0), 3.0));
    }
    Instance {
        table,
        params,
        raws,
        graph,
        foreign_graph,
        extra,
        targets,
        foreign,
    }
}

fn loss_of(inst: &Instance, table: &EmbeddingTable, params: &ModelParams, raws: &[Vec<f64>]) -> f64 {
    let view = ModelView::new(table, params).with_raws(raws);
    objective_loss(&view, &objective(inst)).unwrap()
}

fn objective(inst: &Instance) -> LocalObjective<'_> {
    LocalObjective {
        graph: &inst.graph,
        extra: inst.extra.clone(),
        targets: inst.targets.clone(),
        foreign: (!inst.foreign.is_empty()).then(|| ForeignTargets {
            graph: &inst.foreign_graph,
            targets: inst.foreign.clone(),
        }),
    }
}

const H: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter of the instance.
pub fn max_error(inst: &Instance) -> f64 {
    let view = ModelView::new(&inst.table, &inst.params).with_raws(&inst.raws);
    let obj = objective(inst);
    let b = backward(&view, &obj).unwrap();
    let d = inst.table.dim();
    let mut worst: f64 = 0.0;

    for u in 0..inst.table.n_users() {
        for k in 0..d {
            let mut t = inst.table.clone();
            t.users.row_mut(u)[k] += H;
            let up = loss_of(inst, &t, &inst.params, &inst.raws);
            t.users.row_mut(u)[k] -= 2.0 * H;
            let down = loss_of(inst, &t, &inst.params, &inst.raws);
            let a = b.grads.user_grads.get(&u).map_or(0.0, |r| r[k]);
            worst = worst.max(rel_err(a, (up - down) / (2.0 * H)));
        }
    }
    for i in 0..inst.table.n_items() {
        for k in 0..d {
            let mut t = inst.table.clone();
            t.items.row_mut(i)[k] += H;
            let up = loss_of(inst, &t, &inst.params, &inst.raws);
            t.items.row_mut(i)[k] -= 2.0 * H;
            let down = loss_of(inst, &t, &inst.params, &inst.raws);
            let a = b.grads.item_grads.get(&i).map_or(0.0, |r| r[k]);
            worst = worst.max(rel_err(a, (up - down) / (2.0 * H)));
        }
    }
    for k in 0..2 * d {
        let mut p = inst.params.clone();
        p.attention[k] += H;
        let up = loss_of(inst, &inst.table, &p, &inst.raws);
        p.attention[k] -= 2.0 * H;
        let down = loss_of(inst, &inst.table, &p, &inst.raws);
        worst = worst.max(rel_err(b.grads.model_grads[k], (up - down) / (2.0 * H)));
    }
    let raw_only = grad_wrt_extra_embeddings(&view, &obj).unwrap();
    for (r, grad) in raw_only.iter().enumerate() {
        for k in 0..d {
            let mut raws = inst.raws.clone();
            raws[r][k] += H;
            let up = loss_of(inst, &inst.table, &inst.params, &raws);
            raws[r][k] -= 2.0 * H;
            let down = loss_of(inst, &inst.table, &inst.params, &raws);
            let numeric = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(grad[k], numeric));
            worst = worst.max(rel_err(b.raw_grads[r][k], numeric));
        }
    }
    worst
}

/// Index of the Krum winner by exhaustive dense computation.
pub fn brute_krum(rows: &[Vec<f64>], m: usize) -> usize {
    let n = rows.len();
    let score = |i: usize| -> f64 {
        let mut d: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d.iter().take(n - m - 2).sum()
    };
    let mut best = 0;
    for i in 1..n {
        if score(i) < score(best) {
            best = i;
        }
    }
    best
}

pub fn brute_trimmed(rows: &[Vec<f64>], m: usize) -> Vec<f64> {
    let n = rows.len();
    let k = n - m;
    (0..rows[0].len())
        .map(|c| {
            let mut col: Vec<(f64, usize)> = rows.iter().enumerate().map(|(id, r)| (r[c], id)).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = if n % 2 == 1 {
                col[n / 2].0
            } else {
                (col[n / 2 - 1].0 + col[n / 2].0) / 2.0
            };
            col.sort_by(|a, b| {
                (a.0 - med)
                    .abs()
                    .partial_cmp(&(b.0 - med).abs())
                    .unwrap()
                    .then(a.0.partial_cmp(&b.0).unwrap())
                    .then(a.1.cmp(&b.1))
            });
            col[..k].iter().map(|x| x.0).sum::<f64>() / k as f64
        })
        .collect()
}

/// Standard normal CDF by composite Simpson integration of the density.
pub fn simpson_cdf(z: f64) -> f64 {
    let steps = 20_000;
    let h = z / steps as f64;
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = phi(0.0) + phi(z);
    for k in 1..steps {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * phi(k as f64 * h);
    }
    0.5 + s * h / 3.0
}

/// Unbiased sample mean and variance.
pub fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}
