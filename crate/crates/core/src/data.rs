//! Event logs, leave-one-out preprocessing and the synthetic generator.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Record {
    pub user: u64,
    pub item: u64,
    pub rating: f32,
    pub timestamp: i64,
}

impl Record {
    pub fn new(user: u64, item: u64, rating: f32, timestamp: i64) -> Self {
        Self {
            user,
            item,
            rating,
            timestamp,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventLog {
    pub records: Vec<Record>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    /// `user::item::rating::timestamp`
    DoubleColon,
    /// Tab- or comma-separated `user item rating timestamp`; a non-numeric
    /// first line is taken as a header.
    Delimited,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParseReport {
    pub records: usize,
    pub malformed: usize,
    /// 1-based line numbers of the first few malformed lines.
    pub malformed_lines: Vec<usize>,
}

impl ParseReport {
    pub fn malformed_fraction(&self) -> f64 {
        let total = self.records + self.malformed;
        if total == 0 {
            0.0
        } else {
            self.malformed as f64 / total as f64
        }
    }
}

/// Fraction of malformed lines above which parsing fails.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

pub fn parse_line(line: &str, format: LogFormat) -> Option<Record> {
    let mut fields: Vec<&str> = match format {
        LogFormat::DoubleColon => line.split("::").collect(),
        LogFormat::Delimited => line.split(['\t', ',']).collect(),
    };
    if fields.len() != 4 {
        return None;
    }
    for f in fields.iter_mut() {
        *f = f.trim();
    }
    let user = fields[0].parse().ok()?;
    let item = fields[1].parse().ok()?;
    let rating: f32 = fields[2].parse().ok()?;
    let timestamp = fields[3].parse().ok()?;
    rating
        .is_finite()
        .then(|| Record::new(user, item, rating, timestamp))
}

/// Parses a whole log. Blank lines are ignored; malformed lines are
/// counted, and more than 1% of them is an error.
pub fn parse_log(text: &str, format: LogFormat) -> Result<(EventLog, ParseReport)> {
    let mut log = EventLog::default();
    let mut report = ParseReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, format) {
            Some(r) => log.records.push(r),
            None if i == 0 && format == LogFormat::Delimited => {}
            None => {
                report.malformed += 1;
                if report.malformed_lines.len() < 10 {
                    report.malformed_lines.push(i + 1);
                }
            }
        }
    }
    report.records = log.records.len();
    if report.malformed_fraction() > MAX_MALFORMED_FRACTION {
        return Err(Error::config(alloc::format!(
            "{} of {} lines malformed (first at line {})",
            report.malformed,
            report.records + report.malformed,
            report.malformed_lines[0]
        )));
    }
    Ok((log, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PreprocessConfig {
    pub min_user: usize,
    pub min_item: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_user: 20,
            min_item: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: u64,
    /// Chronological dense item ids, test item excluded.
    pub train: Vec<usize>,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDataset {
    pub users: Vec<UserSequence>,
    /// Raw id of each dense item index, ascending.
    pub item_ids: Vec<u64>,
}

impl SplitDataset {
    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.users.iter().map(|u| u.train.len() + 1).sum()
    }

    /// Back to a log; timestamps are chronological positions.
    pub fn to_event_log(&self) -> EventLog {
        let mut records = Vec::with_capacity(self.n_interactions());
        for u in &self.users {
            for (t, &i) in u.train.iter().chain(core::iter::once(&u.test)).enumerate() {
                records.push(Record::new(u.user, self.item_ids[i], 1.0, t as i64));
            }
        }
        EventLog { records }
    }
}

/// Iterative user/item filtering to a fixpoint, chronological ordering,
/// dense item ids and a leave-one-out split. Ties in time keep file order.
pub fn preprocess(log: &EventLog, cfg: PreprocessConfig) -> Result<SplitDataset> {
    let mut alive: Vec<bool> = vec![true; log.records.len()];
    loop {
        let mut users: BTreeMap<u64, usize> = BTreeMap::new();
        let mut items: BTreeMap<u64, usize> = BTreeMap::new();
        for (r, _) in log.records.iter().zip(&alive).filter(|(_, &a)| a) {
            *users.entry(r.user).or_default() += 1;
            *items.entry(r.item).or_default() += 1;
        }
        let mut changed = false;
        for (r, a) in log.records.iter().zip(alive.iter_mut()) {
            if *a && (users[&r.user] < cfg.min_user || items[&r.item] < cfg.min_item) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let kept: Vec<(usize, &Record)> = log
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| alive[*i])
        .collect();
    let item_ids: Vec<u64> = kept
        .iter()
        .map(|(_, r)| r.item)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let dense: BTreeMap<u64, usize> = item_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let mut per_user: BTreeMap<u64, Vec<(i64, usize, usize)>> = BTreeMap::new();
    for (pos, r) in kept {
        per_user
            .entry(r.user)
            .or_default()
            .push((r.timestamp, pos, dense[&r.item]));
    }
    let mut users = Vec::with_capacity(per_user.len());
    for (user, mut ev) in per_user {
        ev.sort_unstable();
        let mut seq: Vec<usize> = ev.into_iter().map(|(_, _, i)| i).collect();
        let test = seq.pop().ok_or(Error::EmptyDataset)?;
        if seq.is_empty() {
            continue;
        }
        users.push(UserSequence {
            user,
            train: seq,
            test,
        });
    }
    if users.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(SplitDataset { users, item_ids })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub items_per_cluster: usize,
    pub users: usize,
    pub seq_len: usize,
    /// Per-step probability of jumping to another cluster.
    pub switch_prob: f64,
    /// Probability that the next item follows the cluster's transition rule
    /// rather than the user's taste distribution.
    pub rule_prob: f64,
    /// Size of each user's personal favourite set inside a cluster.
    pub favourites: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: 4,
            items_per_cluster: 500,
            users: 400,
            seq_len: 50,
            switch_prob: 0.05,
            rule_prob: 0.6,
            favourites: 12,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn n_items(&self) -> usize {
        self.clusters * self.items_per_cluster
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.items_per_cluster < 4 || self.users == 0 {
            return Err(Error::config(
                "synthetic spec needs clusters ≥ 1, items_per_cluster ≥ 4, users ≥ 1",
            ));
        }
        if self.seq_len < 20 {
            return Err(Error::config("synthetic seq_len must be at least 20"));
        }
        if !(0.0..=1.0).contains(&self.switch_prob) || !(0.0..=1.0).contains(&self.rule_prob) {
            return Err(Error::config("probabilities must lie in [0, 1]"));
        }
        if self.favourites == 0 || self.favourites > self.items_per_cluster {
            return Err(Error::config("favourites must be in 1..=items_per_cluster"));
        }
        Ok(())
    }
}

/// A generated log with the ground truth needed by statistical checks.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLog {
    pub log: EventLog,
    /// Cluster of every generated event, per user in order.
    pub clusters: Vec<Vec<usize>>,
    /// Positions where a user's regime switched, per user.
    pub switches: Vec<Vec<usize>>,
}

impl SyntheticLog {
    /// Fraction of events whose cluster equals the preceding event's.
    pub fn purity(&self) -> f64 {
        let (mut same, mut total) = (0usize, 0usize);
        for seq in &self.clusters {
            for w in seq.windows(2) {
                total += 1;
                same += (w[0] == w[1]) as usize;
            }
        }
        if total == 0 {
            1.0
        } else {
            same as f64 / total as f64
        }
    }
}

/// Per-cluster transition rules. Clusters cycle through the four kinds, so
/// the best network differs by cluster: some need one step of context,
/// some two, some none.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rule {
    /// Next item is a fixed successor of the current one.
    FirstOrder,
    /// Next item is a fixed function of the previous two.
    SecondOrder,
    /// Repeat the item three steps back.
    Periodic,
    /// No sequential rule: taste only.
    Taste,
}

const RULES: [Rule; 4] = [
    Rule::FirstOrder,
    Rule::SecondOrder,
    Rule::Periodic,
    Rule::Taste,
];

/// Generates a multi-interest log; item ids are `cluster·items_per_cluster
/// + local`, users are `0..users`, timestamps are event positions.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticLog> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let ipc = spec.items_per_cluster;
    // Zipf-like popularity within a cluster, shared by every cluster.
    let pop: Vec<f64> = (0..ipc)
        .map(|i| 1.0 / libm::pow(1.0 + i as f64, 0.8))
        .collect();
    let mut world = root.fork(0x57_4f52_4c44);
    let succ: Vec<Vec<usize>> = (0..spec.clusters)
        .map(|_| (0..ipc).map(|_| world.below(ipc)).collect())
        .collect();
    let pair_key: Vec<u64> = (0..spec.clusters)
        .map(|_| rand_core::RngCore::next_u64(&mut world))
        .collect();

    let mut records = Vec::with_capacity(spec.users * spec.seq_len);
    let mut clusters = Vec::with_capacity(spec.users);
    let mut switches = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let mut r = root.fork(u as u64 + 1);
        let mut c = r.below(spec.clusters);
        let mut favs = favourites(&mut r, &pop, spec.favourites);
        let mut local: Vec<usize> = Vec::with_capacity(spec.seq_len);
        let mut cl = Vec::with_capacity(spec.seq_len);
        let mut sw = Vec::new();
        for t in 0..spec.seq_len {
            if t > 0 && spec.clusters > 1 && r.chance(spec.switch_prob) {
                let mut next = r.below(spec.clusters - 1);
                if next >= c {
                    next += 1;
                }
                c = next;
                favs = favourites(&mut r, &pop, spec.favourites);
                local.clear();
                sw.push(t);
            }
            let taste = favs[r.below(favs.len())];
            let ruled = r.chance(spec.rule_prob);
            let item = match (RULES[c % RULES.len()], local.as_slice()) {
                (Rule::FirstOrder, [.., last]) if ruled => succ[c][*last],
                (Rule::SecondOrder, [.., a, b]) if ruled => {
                    (mix(pair_key[c] ^ ((*a as u64) << 32 | *b as u64)) % ipc as u64) as usize
                }
                (Rule::Periodic, [.., x, _, _]) if ruled => *x,
                _ => taste,
            };
            local.push(item);
            cl.push(c);
            records.push(Record::new(
                u as u64,
                (c * ipc + item) as u64,
                1.0,
                t as i64,
            ));
        }
        clusters.push(cl);
        switches.push(sw);
    }
    Ok(SyntheticLog {
        log: EventLog { records },
        clusters,
        switches,
    })
}

fn favourites(r: &mut RngState, pop: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = pop.iter().sum();
    let mut out: Vec<usize> = Vec::with_capacity(n);
    while out.len() < n {
        let mut x = r.uniform() as f64 * total;
        let mut pick = pop.len() - 1;
        for (i, p) in pop.iter().enumerate() {
            if x < *p {
                pick = i;
                break;
            }
            x -= p;
        }
        if !out.contains(&pick) {
            out.push(pick);
        }
    }
    out
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Preprocessing thresholds for generated logs: users keep the usual
/// minimum, items are not filtered (the catalog is sparse by design).
pub fn synthetic_preprocess_config(spec: &SyntheticSpec) -> PreprocessConfig {
    PreprocessConfig {
        min_user: spec.seq_len.min(20),
        min_item: 1,
    }
}

/// Items of a cluster, as raw ids.
pub fn cluster_of(spec: &SyntheticSpec, raw_item: u64) -> usize {
    raw_item as usize / spec.items_per_cluster
}
