//! Behavioral analyses of repeat and exploration consumption: repeat-ratio
//! curves, exploration counts, repeat-ratio CDFs, and the historical and
//! collaborative influence correlations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{label_repeat_flags, InteractionLog, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::situsim::{pearson, KeyTables, PreferenceIndex};

/// Influence is only computed with at least this many comparison interactions.
pub const MIN_SEQUENCE: usize = 5;
pub const N_BINS: usize = 41;
const CDF_POINTS: usize = 101;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CurveSeries {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kind {
    Repeat,
    Exploration,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Repeat => "repeat",
            Kind::Exploration => "exploration",
        }
    }

    fn of(repeat: bool) -> Self {
        if repeat {
            Kind::Repeat
        } else {
            Kind::Exploration
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfluenceRecord {
    /// Position of the interaction in the log.
    pub pos: usize,
    pub kind: Kind,
    /// `None` when either similarity sequence is constant.
    pub influence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub max_n: usize,
    pub cdf_window_s: i64,
    pub k: usize,
    pub t_delta_s: i64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            max_n: 20,
            cdf_window_s: 14 * SECONDS_PER_DAY,
            k: 10,
            t_delta_s: 7 * SECONDS_PER_DAY,
        }
    }
}

/// `y[n]`: fraction of users whose n-th order is a repeat, among users with at
/// least n orders. Points run from n = 1.
pub fn repeat_ratio_by_order_index(log: &InteractionLog, max_n: usize) -> Result<CurveSeries> {
    if max_n < 2 {
        return Err(Error::invalid("max_n must be at least 2"));
    }
    let flags = label_repeat_flags(log);
    let mut hits = vec![0usize; max_n];
    let mut n = vec![0usize; max_n];
    for (_, pos) in log.users() {
        for (i, &p) in pos.iter().take(max_n).enumerate() {
            n[i] += 1;
            hits[i] += usize::from(flags[p]);
        }
    }
    Ok(series((1..=max_n).map(|i| i as f64).collect(), &hits, n))
}

/// `y[n]`: mean number of distinct stores among the first n orders, over users
/// with at least n orders.
pub fn explored_store_counts(log: &InteractionLog, max_n: usize) -> Result<CurveSeries> {
    if max_n < 1 {
        return Err(Error::invalid("max_n must be positive"));
    }
    let flags = label_repeat_flags(log);
    let mut sum = vec![0usize; max_n];
    let mut n = vec![0usize; max_n];
    for (_, pos) in log.users() {
        let mut distinct = 0;
        for (i, &p) in pos.iter().take(max_n).enumerate() {
            distinct += usize::from(!flags[p]);
            n[i] += 1;
            sum[i] += distinct;
        }
    }
    Ok(series((1..=max_n).map(|i| i as f64).collect(), &sum, n))
}

fn series(x: Vec<f64>, num: &[usize], n: Vec<usize>) -> CurveSeries {
    let y = num
        .iter()
        .zip(&n)
        .map(|(&a, &b)| if b == 0 { 0.0 } else { a as f64 / b as f64 })
        .collect();
    CurveSeries { x, y, n }
}

/// Repeat-ratio CDFs over the last `window_s` seconds, for users and for
/// stores. At grid point r the value is the fraction of the population whose
/// repeat ratio is at least r; equivalently, whose exploration ratio is at most
/// 1 - r.
pub fn repeat_exploration_cdf(log: &InteractionLog, window_s: i64) -> Result<(CurveSeries, CurveSeries)> {
    if window_s <= 0 || window_s > log.span().max(1) {
        return Err(Error::invalid(format!(
            "window of {window_s}s must be positive and at most the {}s span",
            log.span()
        )));
    }
    let Some(end) = log.last_time() else {
        return Ok(Default::default());
    };
    let flags = label_repeat_flags(log);
    let start = log.interactions().partition_point(|x| x.time < end - window_s);
    let mut users: std::collections::BTreeMap<&str, (usize, usize)> = Default::default();
    let mut stores: std::collections::BTreeMap<&str, (usize, usize)> = Default::default();
    for (p, x) in log.interactions().iter().enumerate().skip(start) {
        for e in [
            users.entry(x.user_id.as_str()).or_default(),
            stores.entry(x.store_id.as_str()).or_default(),
        ] {
            e.0 += usize::from(flags[p]);
            e.1 += 1;
        }
    }
    let cdf = |m: &std::collections::BTreeMap<&str, (usize, usize)>| -> CurveSeries {
        if m.is_empty() {
            return CurveSeries::default();
        }
        let ratios: Vec<f64> = m.values().map(|&(r, t)| r as f64 / t as f64).collect();
        let x: Vec<f64> = (0..CDF_POINTS).map(|k| k as f64 / (CDF_POINTS - 1) as f64).collect();
        let y = x
            .iter()
            .map(|&r| {
                // Grid points are rounded; compare with a tolerance so a ratio of
                // exactly 0.07 counts at r = 0.07.
                ratios.iter().filter(|&&v| v >= r - 1e-12).count() as f64 / ratios.len() as f64
            })
            .collect();
        CurveSeries {
            x,
            y,
            n: vec![ratios.len(); CDF_POINTS],
        }
    };
    Ok((cdf(&users), cdf(&stores)))
}

/// Correlation, for every interaction with at least five earlier orders by the
/// same user, between situation similarity and store similarity against each
/// of those earlier orders.
pub fn historical_influence(log: &InteractionLog) -> Result<Vec<InfluenceRecord>> {
    let keys = KeyTables::build(log)?;
    let flags = label_repeat_flags(log);
    let mut out = Vec::new();
    let mut mu = Vec::new();
    let mut tau = Vec::new();
    for (_, pos) in log.users() {
        for (k, &p) in pos.iter().enumerate().skip(MIN_SEQUENCE) {
            mu.clear();
            tau.clear();
            let (sp, tp) = (&keys.situations[p], &keys.stores[keys.store_of[p] as usize]);
            for &q in &pos[..k] {
                mu.push(sp.similarity(&keys.situations[q]));
                tau.push(tp.similarity(&keys.stores[keys.store_of[q] as usize]));
            }
            out.push(InfluenceRecord {
                pos: p,
                kind: Kind::of(flags[p]),
                influence: pearson(&mu, &tau)?,
            });
        }
    }
    out.sort_by_key(|r| r.pos);
    Ok(out)
}

/// Correlation, per interaction at time t, between situation similarity and
/// store similarity against the interactions its K collaborative users made in
/// `(t - t_delta_s, t)`. Neighbors are found from preferences strictly before t.
pub fn collaborative_influence(log: &InteractionLog, k: usize, t_delta_s: i64) -> Result<Vec<InfluenceRecord>> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if t_delta_s <= 0 {
        return Err(Error::invalid("t_delta must be positive"));
    }
    let keys = KeyTables::build(log)?;
    let flags = label_repeat_flags(log);
    let xs = log.interactions();
    let user_list: Vec<&[usize]> = log.users().map(|(_, p)| p).collect();
    let user_of: std::collections::HashMap<&str, u32> =
        log.users().enumerate().map(|(i, (u, _))| (u, i as u32)).collect();
    let mut index = PreferenceIndex::new(user_list.len(), log.catalog().len());
    let mut scratch = index.scratch();
    let mut out = Vec::new();
    let mut mu = Vec::new();
    let mut tau = Vec::new();
    let mut g = 0;
    while g < xs.len() {
        let t = xs[g].time;
        let end = g + xs[g..].partition_point(|x| x.time == t);
        for p in g..end {
            let u = user_of[xs[p].user_id.as_str()];
            let neighbors = index.neighbors(u, k, &mut scratch);
            mu.clear();
            tau.clear();
            let (sp, tp) = (&keys.situations[p], &keys.stores[keys.store_of[p] as usize]);
            for &(v, _) in &neighbors {
                let hist = user_list[v as usize];
                let lo = hist.partition_point(|&q| xs[q].time <= t - t_delta_s);
                let hi = hist.partition_point(|&q| xs[q].time < t);
                for &q in &hist[lo..hi] {
                    mu.push(sp.similarity(&keys.situations[q]));
                    tau.push(tp.similarity(&keys.stores[keys.store_of[q] as usize]));
                }
            }
            if mu.len() < MIN_SEQUENCE {
                continue;
            }
            out.push(InfluenceRecord {
                pos: p,
                kind: Kind::of(flags[p]),
                influence: pearson(&mu, &tau)?,
            });
        }
        for p in g..end {
            index.add(user_of[xs[p].user_id.as_str()], keys.store_of[p]);
        }
        g = end;
    }
    Ok(out)
}

/// Histogram bin of an influence value over `[-1, 1]`.
pub fn influence_bin(v: f64) -> usize {
    let w = 2.0 / N_BINS as f64;
    (((v + 1.0) / w).floor().max(0.0) as usize).min(N_BINS - 1)
}

/// Mean influence and counts for one kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfluenceSummary {
    pub records: usize,
    pub defined: usize,
    pub mean: Option<f64>,
}

pub fn summarize(records: &[InfluenceRecord], kind: Kind) -> InfluenceSummary {
    let mut records_n = 0;
    let mut sum = 0.0;
    let mut defined = 0;
    for r in records.iter().filter(|r| r.kind == kind) {
        records_n += 1;
        if let Some(v) = r.influence {
            sum += v;
            defined += 1;
        }
    }
    InfluenceSummary {
        records: records_n,
        defined,
        mean: (defined > 0).then(|| sum / defined as f64),
    }
}

/// Everything the analysis writes.
#[derive(Debug, Clone, Default)]
pub struct AnalysisOutputs {
    pub repeat_ratio: CurveSeries,
    pub explored: CurveSeries,
    pub cdf_users: CurveSeries,
    pub cdf_stores: CurveSeries,
    pub inf_his: Vec<InfluenceRecord>,
    pub inf_col: Vec<InfluenceRecord>,
}

pub fn run_analysis(log: &InteractionLog, cfg: &AnalysisConfig) -> Result<AnalysisOutputs> {
    let window = cfg.cdf_window_s.min(log.span().max(1));
    let (cdf_users, cdf_stores) = repeat_exploration_cdf(log, window)?;
    Ok(AnalysisOutputs {
        repeat_ratio: repeat_ratio_by_order_index(log, cfg.max_n)?,
        explored: explored_store_counts(log, cfg.max_n)?,
        cdf_users,
        cdf_stores,
        inf_his: historical_influence(log)?,
        inf_col: collaborative_influence(log, cfg.k, cfg.t_delta_s)?,
    })
}

fn curve_csv(c: &CurveSeries) -> String {
    let mut s = String::from("x,y,n\n");
    for i in 0..c.x.len() {
        let _ = writeln!(s, "{},{},{}", c.x[i], c.y[i], c.n[i]);
    }
    s
}

fn histogram_csv(records: &[InfluenceRecord]) -> String {
    let mut s = String::from("kind,bin,lo,hi,count,density\n");
    let w = 2.0 / N_BINS as f64;
    for kind in [Kind::Repeat, Kind::Exploration] {
        let mut counts = [0usize; N_BINS];
        for v in records.iter().filter(|r| r.kind == kind).filter_map(|r| r.influence) {
            counts[influence_bin(v)] += 1;
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            continue;
        }
        for (b, &c) in counts.iter().enumerate() {
            let lo = -1.0 + b as f64 * w;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                kind.name(),
                b,
                lo,
                lo + w,
                c,
                c as f64 / (total as f64 * w)
            );
        }
    }
    s
}

fn summary_csv(out: &AnalysisOutputs) -> String {
    let mut s = String::from("analysis,kind,records,defined,mean\n");
    for (name, recs) in [("inf_his", &out.inf_his), ("inf_col", &out.inf_col)] {
        for kind in [Kind::Repeat, Kind::Exploration] {
            let m = summarize(recs, kind);
            if m.records == 0 {
                continue;
            }
            let mean = m.mean.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{name},{},{},{},{mean}", kind.name(), m.records, m.defined);
        }
    }
    s
}

/// Write the analysis CSVs into `out_dir`.
pub fn emit_analysis_report(out: &AnalysisOutputs, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = [
        ("repeat_ratio.csv", curve_csv(&out.repeat_ratio)),
        ("explored.csv", curve_csv(&out.explored)),
        ("cdf_users.csv", curve_csv(&out.cdf_users)),
        ("cdf_stores.csv", curve_csv(&out.cdf_stores)),
        ("inf_his.csv", histogram_csv(&out.inf_his)),
        ("inf_col.csv", histogram_csv(&out.inf_col)),
        ("summary.csv", summary_csv(out)),
    ];
    for (name, body) in files {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
