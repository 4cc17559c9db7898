//! Server round step: turns the round's client updates into one gradient
//! using the configured defense.
//!
//! Under [`AggregationScope::Flattened`] Krum, TrimmedMean and FLAME see each
//! update as one zero-filled vector. Under [`AggregationScope::RowWise`]
//! Krum and TrimmedMean run separately on the attention block and on every
//! table row, among the clients that actually sent that row, and FLAME
//! averages each row over the admitted clients that sent it.
//! FoolsGold and the undefended mean always average per row.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::client::ClientUpdate;
use crate::defense::{
    aggregate_plain, aggregate_weighted, flame, flame_filter, flatten, foolsgold, krum_select, trimmed_mean, unflatten,
    DefenseState, FlattenedUpdate, Layout, SparseVec,
};
use crate::error::{Error, Result};
use crate::model::GradientBundle;
use crate::numerics::{sample_gaussian, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    #[default]
    None,
    Krum,
    TrimmedMean,
    #[serde(rename = "foolsgold")]
    FoolsGold,
    Flame,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 5] = [
        DefenseKind::None,
        DefenseKind::Krum,
        DefenseKind::TrimmedMean,
        DefenseKind::FoolsGold,
        DefenseKind::Flame,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Krum => "krum",
            DefenseKind::TrimmedMean => "trimmed_mean",
            DefenseKind::FoolsGold => "foolsgold",
            DefenseKind::Flame => "flame",
        }
    }
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let allowed: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::config(
                "defense.kind",
                format!("unknown defense `{s}`; allowed: {}", allowed.join(", ")),
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationScope {
    Flattened,
    #[default]
    RowWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub scope: AggregationScope,
    pub flame_noise_factor: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kind: DefenseKind::None,
            scope: AggregationScope::default(),
            flame_noise_factor: 0.001,
        }
    }
}

/// What the defense did this round.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DefenseDiagnostics {
    /// Clients whose update entered the aggregate (Krum winner, FLAME
    /// cluster, nonzero FoolsGold weight). Empty when not applicable.
    pub admitted: Vec<usize>,
    pub filtered: Vec<usize>,
    /// FoolsGold weights by client id.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<(usize, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_bound: Option<f64>,
    /// Blocks aggregated with the plain mean because too few clients sent them.
    pub mean_fallback_blocks: usize,
    pub fallback: bool,
}

pub struct RoundAggregate {
    pub grads: GradientBundle,
    pub diagnostics: DefenseDiagnostics,
}

/// `floor(fraction * n)`.
pub fn assumed_malicious(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Aggregates one round. `updates` must be sorted by client id.
pub fn aggregate_round(
    updates: &[ClientUpdate],
    layout: &Layout,
    cfg: &DefenseConfig,
    attacker_fraction: f64,
    state: &mut DefenseState,
    rng: &mut SimRng,
) -> Result<RoundAggregate> {
    if updates.is_empty() {
        return Err(Error::Parameter("no client updates to aggregate".into()));
    }
    if updates.windows(2).any(|w| w[0].client >= w[1].client) {
        return Err(Error::Parameter("updates must be sorted by distinct client id".into()));
    }
    let n = updates.len();
    let ids: Vec<usize> = updates.iter().map(|u| u.client).collect();
    let mut diag = DefenseDiagnostics::default();
    let flat = || -> Vec<FlattenedUpdate> { updates.iter().map(|u| flatten(u, layout)).collect() };

    let grads = match (cfg.kind, cfg.scope) {
        (DefenseKind::None, _) => aggregate_plain(updates)?,
        (DefenseKind::FoolsGold, _) => {
            let out = foolsgold(&flat(), state)?;
            diag.weights = ids.iter().copied().zip(out.weights.iter().copied()).collect();
            diag.fallback = out.fallback;
            let weights = if out.fallback { vec![1.0; n] } else { out.weights };
            let (admitted, filtered) = ids.iter().zip(&weights).partition::<Vec<_>, _>(|(_, &w)| w > 0.0);
            diag.admitted = admitted.into_iter().map(|(&c, _)| c).collect();
            diag.filtered = filtered.into_iter().map(|(&c, _)| c).collect();
            aggregate_weighted(updates, &weights)?
        }
        (DefenseKind::Krum, AggregationScope::Flattened) => {
            let flat = flat();
            let m = assumed_malicious(attacker_fraction, n);
            let pick = krum_select(&flat, m)?;
            diag.admitted = vec![flat[pick].client];
            diag.filtered = ids.iter().copied().filter(|&c| c != flat[pick].client).collect();
            unflatten(&flat[pick].vector, layout)
        }
        (DefenseKind::TrimmedMean, AggregationScope::Flattened) => {
            let m = assumed_malicious(attacker_fraction, n);
            unflatten(&trimmed_mean(&flat(), m)?, layout)
        }
        (DefenseKind::Flame, AggregationScope::Flattened) => {
            let (agg, filter) = flame(&flat(), cfg.flame_noise_factor, rng)?;
            record_flame(&mut diag, &ids, &filter.admitted, filter.clip_bound, filter.fallback);
            unflatten(&agg, layout)
        }
        (DefenseKind::Krum | DefenseKind::TrimmedMean, AggregationScope::RowWise) => {
            rowwise_robust(updates, cfg.kind, attacker_fraction, &mut diag)?
        }
        (DefenseKind::Flame, AggregationScope::RowWise) => {
            let filter = flame_filter(&flat())?;
            record_flame(&mut diag, &ids, &filter.admitted, filter.clip_bound, filter.fallback);
            let scaled: Vec<ClientUpdate> = filter
                .admitted
                .iter()
                .zip(&filter.scales)
                .map(|(&i, &s)| scale_update(&updates[i], s))
                .collect();
            let mut grads = aggregate_plain(&scaled)?;
            let std = cfg.flame_noise_factor * filter.clip_bound;
            if std > 0.0 {
                add_noise(&mut grads, std, rng)?;
            }
            grads
        }
    };
    Ok(RoundAggregate {
        grads,
        diagnostics: diag,
    })
}

fn record_flame(diag: &mut DefenseDiagnostics, ids: &[usize], admitted: &[usize], bound: f64, fallback: bool) {
    diag.admitted = admitted.iter().map(|&i| ids[i]).collect();
    diag.filtered = (0..ids.len())
        .filter(|i| admitted.binary_search(i).is_err())
        .map(|i| ids[i])
        .collect();
    diag.clip_bound = Some(bound);
    diag.fallback = fallback;
}

fn scale_update(u: &ClientUpdate, s: f64) -> ClientUpdate {
    let mut out = u.clone();
    let scale = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x *= s);
    scale(&mut out.grads.model_grads);
    out.grads.user_grads.values_mut().for_each(scale);
    out.grads.item_grads.values_mut().for_each(scale);
    out
}

fn add_noise(g: &mut GradientBundle, std: f64, rng: &mut SimRng) -> Result<()> {
    let rows = std::iter::once(&mut g.model_grads)
        .chain(g.user_grads.values_mut())
        .chain(g.item_grads.values_mut());
    for row in rows {
        for x in row.iter_mut() {
            *x = sample_gaussian(rng, *x, std)?;
        }
    }
    Ok(())
}

/// Krum or TrimmedMean on one block of equal-length vectors, with the plain
/// mean as fallback when the block has too few senders.
fn robust_block(kind: DefenseKind, rows: &[(usize, &[f64])], fraction: f64, fallbacks: &mut usize) -> Result<Vec<f64>> {
    let k = rows.len();
    let m = assumed_malicious(fraction, k);
    let usable = match kind {
        DefenseKind::Krum => k >= m + 3,
        _ => k > m,
    };
    if !usable || (m == 0 && kind == DefenseKind::TrimmedMean) {
        if !usable {
            *fallbacks += 1;
        }
        let mut mean = vec![0.0; rows[0].1.len()];
        for (_, r) in rows {
            mean.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += b / k as f64);
        }
        return Ok(mean);
    }
    let flat: Vec<FlattenedUpdate> = rows
        .iter()
        .map(|&(client, r)| FlattenedUpdate {
            client,
            vector: SparseVec::from_dense(r),
        })
        .collect();
    let out = match kind {
        DefenseKind::Krum => flat[krum_select(&flat, m)?].vector.clone(),
        _ => trimmed_mean(&flat, m)?,
    };
    Ok(out.to_dense())
}

fn rowwise_robust(
    updates: &[ClientUpdate],
    kind: DefenseKind,
    fraction: f64,
    diag: &mut DefenseDiagnostics,
) -> Result<GradientBundle> {
    let model_rows: Vec<(usize, &[f64])> = updates
        .iter()
        .map(|u| (u.client, u.grads.model_grads.as_slice()))
        .collect();
    let mut fallbacks = 0;
    let model_grads = robust_block(kind, &model_rows, fraction, &mut fallbacks)?;

    let mut rows = |pick: fn(&GradientBundle) -> &BTreeMap<usize, Vec<f64>>| -> Result<BTreeMap<usize, Vec<f64>>> {
        let mut blocks: BTreeMap<usize, Vec<(usize, &[f64])>> = BTreeMap::new();
        for u in updates {
            for (&key, row) in pick(&u.grads) {
                blocks.entry(key).or_default().push((u.client, row.as_slice()));
            }
        }
        blocks
            .into_iter()
            .map(|(key, block)| Ok((key, robust_block(kind, &block, fraction, &mut fallbacks)?)))
            .collect()
    };
    let user_grads = rows(|g| &g.user_grads)?;
    let item_grads = rows(|g| &g.item_grads)?;
    diag.mean_fallback_blocks = fallbacks;
    Ok(GradientBundle {
        item_grads,
        user_grads,
        model_grads,
    })
}
