//! Rating/trust datasets, the 60/20/20 split and per-client local graphs.
//!
//! Input files are tab-separated text:
//!
//! * ratings: `user_id<TAB>item_id<TAB>rating`
//! * trust: `user_id<TAB>user_id`
//!
//! Blank lines and lines starting with `#` are skipped. External ids are
//! arbitrary strings; users and items are re-indexed densely from 0 in order
//! of first appearance in the ratings file.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

/// Closed interval of admissible rating values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingRange {
    pub min: f64,
    pub max: f64,
}

impl RatingRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::Parameter(format!(
                "rating range must satisfy min < max, got ({min}, {max})"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub ratings: Vec<Rating>,
    pub trust_edges: Vec<(usize, usize)>,
    pub rating_range: RatingRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub ratings: usize,
    pub rating_density: f64,
    pub social_connections: usize,
    pub social_density: f64,
}

impl Dataset {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn stats(&self) -> DatasetStats {
        let n = self.n_users() as f64;
        let m = self.n_items() as f64;
        DatasetStats {
            users: self.n_users(),
            items: self.n_items(),
            ratings: self.ratings.len(),
            rating_density: self.ratings.len() as f64 / (n * m).max(1.0),
            social_connections: self.trust_edges.len(),
            social_density: self.trust_edges.len() as f64 / (n * n).max(1.0),
        }
    }

    /// Checks every dataset invariant.
    pub fn validate(&self) -> Result<()> {
        if self.ratings.is_empty() {
            return Err(Error::Validation("dataset has no ratings".into()));
        }
        let mut seen = HashSet::with_capacity(self.ratings.len());
        for r in &self.ratings {
            if r.user >= self.n_users() || r.item >= self.n_items() {
                return Err(Error::Validation(format!(
                    "rating references unknown index ({}, {})",
                    r.user, r.item
                )));
            }
            if !self.rating_range.contains(r.value) {
                return Err(Error::Validation(format!(
                    "rating {} of ({}, {}) outside [{}, {}]",
                    r.value, self.users[r.user], self.items[r.item], self.rating_range.min, self.rating_range.max
                )));
            }
            if !seen.insert((r.user, r.item)) {
                return Err(Error::Validation(format!(
                    "duplicate rating for ({}, {})",
                    self.users[r.user], self.items[r.item]
                )));
            }
        }
        for &(a, b) in &self.trust_edges {
            if a >= self.n_users() || b >= self.n_users() {
                return Err(Error::Validation(format!(
                    "trust edge ({a}, {b}) references an unknown user"
                )));
            }
            if a == b {
                return Err(Error::Validation(format!("trust self-loop on {}", self.users[a])));
            }
        }
        Ok(())
    }

    pub fn ratings_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.ratings {
            let _ = writeln!(out, "{}\t{}\t{}", self.users[r.user], self.items[r.item], r.value);
        }
        out
    }

    pub fn trust_tsv(&self) -> String {
        let mut out = String::new();
        for &(a, b) in &self.trust_edges {
            let _ = writeln!(out, "{}\t{}", self.users[a], self.users[b]);
        }
        out
    }

    /// `kind<TAB>external_id<TAB>index`, users first.
    pub fn id_map_tsv(&self) -> String {
        let mut out = String::from("# kind\texternal_id\tindex\n");
        for (i, u) in self.users.iter().enumerate() {
            let _ = writeln!(out, "user\t{u}\t{i}");
        }
        for (i, it) in self.items.iter().enumerate() {
            let _ = writeln!(out, "item\t{it}\t{i}");
        }
        out
    }

    /// Stable fingerprint of the ratings and trust edges.
    pub fn checksum(&self) -> String {
        let mut h = Fnv::new();
        h.feed_bytes(self.ratings_tsv().as_bytes());
        h.feed_bytes(b"\0");
        h.feed_bytes(self.trust_tsv().as_bytes());
        h.hex()
    }

    pub fn write(&self, ratings_path: &Path, trust_path: &Path) -> Result<()> {
        fs::write(ratings_path, self.ratings_tsv()).map_err(|e| Error::io(ratings_path, e))?;
        fs::write(trust_path, self.trust_tsv()).map_err(|e| Error::io(trust_path, e))?;
        Ok(())
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            None
        } else {
            let fields = if line.contains('\t') {
                line.split('\t').map(str::trim).collect()
            } else {
                line.split_whitespace().collect()
            };
            Some((i + 1, fields))
        }
    })
}

fn intern(ids: &mut Vec<String>, index: &mut HashMap<String, usize>, key: &str) -> usize {
    if let Some(&i) = index.get(key) {
        return i;
    }
    let i = ids.len();
    ids.push(key.to_owned());
    index.insert(key.to_owned(), i);
    i
}

/// Parses and validates a ratings file plus a trust file.
pub fn load_dataset(ratings_path: &Path, trust_path: &Path, range: RatingRange) -> Result<Dataset> {
    let ratings_text = fs::read_to_string(ratings_path).map_err(|e| Error::io(ratings_path, e))?;
    let trust_text = fs::read_to_string(trust_path).map_err(|e| Error::io(trust_path, e))?;
    parse_dataset(&ratings_text, &trust_text, range, ratings_path, trust_path)
}

pub fn parse_dataset(
    ratings_text: &str,
    trust_text: &str,
    range: RatingRange,
    ratings_path: &Path,
    trust_path: &Path,
) -> Result<Dataset> {
    let mut users = Vec::new();
    let mut user_index = HashMap::new();
    let mut items = Vec::new();
    let mut item_index = HashMap::new();
    let mut ratings = Vec::new();
    let mut seen = HashSet::new();

    for (line, fields) in data_lines(ratings_text) {
        let parse_err = |message: String| Error::Parse {
            path: ratings_path.to_path_buf(),
            line,
            message,
        };
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(parse_err(format!(
                "expected `user<TAB>item<TAB>rating`, found {} field(s)",
                fields.len()
            )));
        }
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("rating `{}` is not a number", fields[2])))?;
        if !value.is_finite() {
            return Err(parse_err(format!("rating `{}` is not finite", fields[2])));
        }
        if !range.contains(value) {
            return Err(Error::Validation(format!(
                "{}:{line}: rating {value} outside [{}, {}]",
                ratings_path.display(),
                range.min,
                range.max
            )));
        }
        let user = intern(&mut users, &mut user_index, fields[0]);
        let item = intern(&mut items, &mut item_index, fields[1]);
        if !seen.insert((user, item)) {
            return Err(Error::Validation(format!(
                "{}:{line}: duplicate rating for ({}, {})",
                ratings_path.display(),
                fields[0],
                fields[1]
            )));
        }
        ratings.push(Rating { user, item, value });
    }

    let mut trust_edges = Vec::new();
    let mut seen_edges = HashSet::new();
    for (line, fields) in data_lines(trust_text) {
        // A third column (trust value) is accepted and ignored.
        if !(2..=3).contains(&fields.len()) || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: trust_path.to_path_buf(),
                line,
                message: format!("expected `user<TAB>user[<TAB>value]`, found {} field(s)", fields.len()),
            });
        }
        let lookup = |id: &str| {
            user_index.get(id).copied().ok_or_else(|| {
                Error::Validation(format!(
                    "{}:{line}: trust edge references unknown user `{id}`",
                    trust_path.display()
                ))
            })
        };
        let a = lookup(fields[0])?;
        let b = lookup(fields[1])?;
        if a == b {
            return Err(Error::Validation(format!(
                "{}:{line}: trust self-loop on `{}`",
                trust_path.display(),
                fields[0]
            )));
        }
        if seen_edges.insert((a, b)) {
            trust_edges.push((a, b));
        }
    }

    let dataset = Dataset {
        users,
        items,
        ratings,
        trust_edges,
        rating_range: range,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// One client's private star graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalGraph {
    pub owner: usize,
    /// Training ratings of the owner, sorted by item id.
    pub rated_items: Vec<(usize, f64)>,
    /// Trusted users, sorted, never containing the owner.
    pub neighbors: Vec<usize>,
}

impl LocalGraph {
    pub fn participates(&self) -> bool {
        !self.rated_items.is_empty()
    }

    pub fn has_item(&self, item: usize) -> bool {
        self.rated_items.binary_search_by_key(&item, |&(i, _)| i).is_ok()
    }
}

/// 64-bit FNV-1a.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn feed_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn hex(&self) -> String {
        format!("{:016x}", self.0)
    }
}

/// Global random 60/20/20 partition of the rating list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<Rating>,
    pub validation: Vec<Rating>,
    pub test: Vec<Rating>,
}

impl Split {
    /// Validation/test ratings whose item has no training rating.
    pub fn cold_item_ratings(&self) -> usize {
        let seen: HashSet<usize> = self.train.iter().map(|r| r.item).collect();
        self.validation
            .iter()
            .chain(&self.test)
            .filter(|r| !seen.contains(&r.item))
            .count()
    }

    /// Stable fingerprint of the partition, used to pair runs.
    pub fn checksum(&self) -> String {
        let mut h = Fnv::new();
        for (tag, bucket) in [(1u64, &self.train), (2, &self.validation), (3, &self.test)] {
            h.feed_bytes(&tag.to_le_bytes());
            for r in bucket.iter() {
                h.feed_bytes(&(r.user as u64).to_le_bytes());
                h.feed_bytes(&(r.item as u64).to_le_bytes());
                h.feed_bytes(&r.value.to_bits().to_le_bytes());
            }
        }
        h.hex()
    }
}

pub fn split_dataset(d: &Dataset, rng: &mut SimRng) -> Result<Split> {
    if d.ratings.is_empty() {
        return Err(Error::Validation("cannot split an empty dataset".into()));
    }
    let n = d.ratings.len();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_train = (0.6 * n as f64).round() as usize;
    let n_val = ((0.2 * n as f64).round() as usize).min(n - n_train);
    let pick = |range: std::ops::Range<usize>| -> Vec<Rating> {
        let mut v: Vec<Rating> = order[range].iter().map(|&i| d.ratings[i]).collect();
        v.sort_by_key(|r| (r.user, r.item));
        v
    };
    Ok(Split {
        train: pick(0..n_train),
        validation: pick(n_train..n_train + n_val),
        test: pick(n_train + n_val..n),
    })
}

/// One graph per user, indexed by user id. Neighborhoods use the undirected
/// closure of the trust edges; rated items come from the training bucket only.
pub fn build_local_graphs(d: &Dataset, s: &Split) -> Vec<LocalGraph> {
    let mut items: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d.n_users()];
    for r in &s.train {
        items[r.user].push((r.item, r.value));
    }
    let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); d.n_users()];
    for &(a, b) in &d.trust_edges {
        if a != b {
            neighbors[a].insert(b);
            neighbors[b].insert(a);
        }
    }
    items
        .into_iter()
        .zip(neighbors)
        .enumerate()
        .map(|(owner, (mut rated_items, nb))| {
            rated_items.sort_by_key(|&(i, _)| i);
            LocalGraph {
                owner,
                rated_items,
                neighbors: nb.into_iter().collect(),
            }
        })
        .collect()
}

/// Generator settings for synthetic rating/trust data.
///
/// A rating is `item_mean + user_bias + <user_factor, item_factor> + noise`,
/// clipped to the rating range and optionally snapped to `rating_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub n_users: usize,
    pub n_items: usize,
    pub density: f64,
    pub social_density: f64,
    pub rating_min: f64,
    pub rating_max: f64,
    /// Center of the item-mean distribution; `None` means mid-range.
    pub mean_center: Option<f64>,
    pub item_mean_std: f64,
    pub user_bias_std: f64,
    pub latent_rank: usize,
    pub latent_std: f64,
    pub noise_std: f64,
    pub rating_step: Option<f64>,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n_users: 100,
            n_items: 200,
            density: 0.05,
            social_density: 0.01,
            rating_min: 1.0,
            rating_max: 5.0,
            mean_center: None,
            item_mean_std: 1.0,
            user_bias_std: 0.5,
            latent_rank: 2,
            latent_std: 0.6,
            noise_std: 0.5,
            rating_step: None,
        }
    }
}

impl SyntheticParams {
    /// Same user/item/rating/trust counts as the public Filmtrust release.
    pub fn filmtrust() -> Self {
        Self {
            n_users: 874,
            n_items: 1957,
            density: 18_662.0 / (874.0 * 1957.0),
            social_density: 1853.0 / (874.0 * 874.0),
            rating_min: 1.0,
            rating_max: 8.0,
            mean_center: Some(4.5),
            item_mean_std: 1.2,
            user_bias_std: 0.6,
            latent_rank: 2,
            latent_std: 0.7,
            noise_std: 0.7,
            rating_step: None,
        }
    }

    /// Small instance for unit tests and quick experiments.
    pub fn small() -> Self {
        Self {
            n_users: 60,
            n_items: 120,
            density: 0.08,
            social_density: 0.03,
            ..Self::filmtrust()
        }
    }
}

pub fn generate_synthetic(p: &SyntheticParams, rng: &mut SimRng) -> Result<Dataset> {
    let range = RatingRange::new(p.rating_min, p.rating_max)?;
    for (name, v) in [("density", p.density), ("social_density", p.social_density)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Parameter(format!("{name} must lie in (0, 1], got {v}")));
        }
    }
    if p.n_users < 2 || p.n_items == 0 {
        return Err(Error::Parameter("need at least 2 users and 1 item".into()));
    }
    for (name, v) in [
        ("item_mean_std", p.item_mean_std),
        ("user_bias_std", p.user_bias_std),
        ("latent_std", p.latent_std),
        ("noise_std", p.noise_std),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Parameter(format!("{name} must be finite and >= 0")));
        }
    }
    if let Some(step) = p.rating_step {
        if !(step > 0.0) {
            return Err(Error::Parameter("rating_step must be positive".into()));
        }
    }

    let (n, m) = (p.n_users, p.n_items);
    let center = p.mean_center.unwrap_or(0.5 * (range.min + range.max));
    let item_mean: Vec<f64> = (0..m)
        .map(|_| center + p.item_mean_std * rng.standard_normal())
        .collect();
    let user_bias: Vec<f64> = (0..n).map(|_| p.user_bias_std * rng.standard_normal()).collect();
    let k = p.latent_rank;
    let user_f: Vec<f64> = (0..n * k).map(|_| p.latent_std * rng.standard_normal()).collect();
    let item_f: Vec<f64> = (0..m * k).map(|_| p.latent_std * rng.standard_normal()).collect();

    let pairs = sample_distinct_pairs(n * m, (p.density * (n * m) as f64).round() as usize, rng);
    let mut ratings = Vec::with_capacity(pairs.len());
    for code in pairs {
        let (u, i) = (code / m, code % m);
        let interaction: f64 = (0..k).map(|f| user_f[u * k + f] * item_f[i * k + f]).sum();
        let mut v = item_mean[i] + user_bias[u] + interaction + p.noise_std * rng.standard_normal();
        if let Some(step) = p.rating_step {
            v = range.min + ((v - range.min) / step).round() * step;
        }
        ratings.push(Rating {
            user: u,
            item: i,
            value: range.clamp(v),
        });
    }
    ratings.sort_by_key(|r| (r.user, r.item));

    // Unordered pairs {a, b}, a != b, encoded over the upper triangle.
    let total_pairs = n * (n - 1) / 2;
    let n_edges = ((p.social_density * (n * n) as f64).round() as usize).min(total_pairs);
    let mut trust_edges: Vec<(usize, usize)> = sample_distinct_pairs(total_pairs, n_edges, rng)
        .into_iter()
        .map(|code| triangle_pair(code, n))
        .map(|(a, b)| if rng.uniform() < 0.5 { (a, b) } else { (b, a) })
        .collect();
    trust_edges.sort_unstable();

    let d = Dataset {
        users: (0..n).map(|u| format!("u{u}")).collect(),
        items: (0..m).map(|i| format!("i{i}")).collect(),
        ratings,
        trust_edges,
        rating_range: range,
    };
    d.validate()?;
    Ok(d)
}

/// `count` distinct codes from `0..total`, in ascending order.
fn sample_distinct_pairs(total: usize, count: usize, rng: &mut SimRng) -> Vec<usize> {
    let count = count.min(total);
    let mut out: Vec<usize> = if count * 4 >= total {
        let mut all: Vec<usize> = (0..total).collect();
        for i in 0..count {
            let j = i + rng.index(total - i);
            all.swap(i, j);
        }
        all.truncate(count);
        all
    } else {
        let mut chosen = HashSet::with_capacity(count * 2);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let c = rng.index(total);
            if chosen.insert(c) {
                out.push(c);
            }
        }
        out
    };
    out.sort_unstable();
    out
}

/// Maps `0..n(n-1)/2` onto pairs `(a, b)` with `a < b`.
fn triangle_pair(mut code: usize, n: usize) -> (usize, usize) {
    let mut a = 0;
    let mut row = n - 1;
    while code >= row {
        code -= row;
        a += 1;
        row -= 1;
    }
    (a, a + 1 + code)
}
