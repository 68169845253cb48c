//! Candidate construction for the repeat, exploration and combined protocols,
//! and HR@K / NDCG@K evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataio::Partition;
use crate::error::{Error, Result};
use crate::features::Encoded;

/// Candidate list size for the exploration and combined protocols.
pub const MAX_CANDIDATES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Repeat,
    Exploration,
    Combined,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Repeat, Protocol::Exploration, Protocol::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Repeat => "repeat",
            Protocol::Exploration => "exploration",
            Protocol::Combined => "combined",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown protocol {s}")))
    }
}

/// One ranking task: score `candidates` for the interaction at `pos`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub pos: usize,
    pub protocol: Protocol,
    /// Ascending store indices, target included, no duplicates.
    pub candidates: Vec<u32>,
    pub target: u32,
    pub rng_seed: u64,
}

/// The case generator for `pos` draws from stream `pos` of `seed`, so a case
/// does not depend on which other cases are built.
fn case_rng(seed: u64, pos: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pos as u64);
    rng
}

fn unvisited_pool(n_stores: usize, prior: &[u32], target: u32) -> Vec<u32> {
    let mut visited = vec![false; n_stores];
    for &s in prior {
        visited[s as usize] = true;
    }
    visited[target as usize] = true;
    (0..n_stores as u32).filter(|&s| !visited[s as usize]).collect()
}

fn draw(pool: &[u32], k: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    if k >= pool.len() {
        return pool.to_vec();
    }
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Build the case for `pos` under `protocol`, or `None` when the interaction
/// does not belong to that protocol.
pub fn build_case(enc: &Encoded, pos: usize, protocol: Protocol, seed: u64) -> Result<Option<EvalCase>> {
    let target = enc.store[pos];
    let repeat = enc.repeat[pos];
    let prior = enc.prior_stores(pos);
    if repeat != prior.binary_search(&target).is_ok() {
        return Err(Error::invalid(format!("repeat flag of interaction {pos} disagrees with its history")));
    }
    let mut rng = case_rng(seed, pos);
    let mut candidates = match protocol {
        Protocol::Repeat => {
            if !repeat {
                return Ok(None);
            }
            prior
        }
        Protocol::Exploration => {
            if repeat {
                return Ok(None);
            }
            let pool = unvisited_pool(enc.n_stores(), &prior, target);
            let mut c = draw(&pool, MAX_CANDIDATES - 1, &mut rng);
            c.push(target);
            c
        }
        Protocol::Combined => {
            let mut c = prior.clone();
            if !repeat {
                c.push(target);
            }
            let pool = unvisited_pool(enc.n_stores(), &prior, target);
            let fill = MAX_CANDIDATES.saturating_sub(c.len());
            c.extend(draw(&pool, fill, &mut rng));
            c
        }
    };
    candidates.sort_unstable();
    Ok(Some(EvalCase {
        pos,
        protocol,
        candidates,
        target,
        rng_seed: seed,
    }))
}

/// Cases for every test interaction matching `protocol`.
pub fn build_cases(enc: &Encoded, protocol: Protocol, seed: u64) -> Result<Vec<EvalCase>> {
    build_cases_in(enc, Partition::Test, protocol, seed)
}

pub fn build_cases_in(enc: &Encoded, part: Partition, protocol: Protocol, seed: u64) -> Result<Vec<EvalCase>> {
    let range = enc.partition_range(part);
    if range.is_empty() {
        return Err(Error::EmptyPartition(part.name()));
    }
    let built: Vec<Result<Option<EvalCase>>> = range
        .into_par_iter()
        .map(|pos| build_case(enc, pos, protocol, seed))
        .collect();
    let mut out = Vec::new();
    for c in built {
        if let Some(c) = c? {
            out.push(c);
        }
    }
    Ok(out)
}

/// At most `cap` cases, chosen uniformly with `seed` and kept in log order.
pub fn subsample_cases(cases: Vec<EvalCase>, cap: usize, seed: u64) -> Vec<EvalCase> {
    if cases.len() <= cap {
        return cases;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, cases.len(), cap).into_vec();
    keep.sort_unstable();
    let mut it = keep.into_iter().peekable();
    cases
        .into_iter()
        .enumerate()
        .filter(|(i, _)| it.next_if_eq(i).is_some())
        .map(|(_, c)| c)
        .collect()
}

/// `(hit, ndcg)` of `target` at cutoff `k`. The rank counts every other
/// candidate scoring at least as high as the target, so ties go against it.
pub fn rank_metrics(candidates: &[u32], scores: &[f64], target: u32, k: usize) -> Result<(f64, f64)> {
    if candidates.len() != scores.len() {
        return Err(Error::Shape(format!("{} candidates, {} scores", candidates.len(), scores.len())));
    }
    let t = candidates
        .iter()
        .position(|&c| c == target)
        .ok_or_else(|| Error::invalid("target missing from slate"))?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("slate scores".into()));
    }
    let ts = scores[t];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != t && s >= ts)
        .count();
    let rank = ahead + 1;
    if rank <= k {
        Ok((1.0, 1.0 / ((rank + 1) as f64).log2()))
    } else {
        Ok((0.0, 0.0))
    }
}

/// A frozen model that scores candidate stores for the interaction at `pos`
/// using only what precedes it.
pub trait Scorer: Sync {
    fn score(&self, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>>;

    /// Protocols whose candidate sets the model can score.
    fn supports(&self, _protocol: Protocol) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMetrics {
    pub hr: f64,
    pub ndcg: f64,
    pub n: usize,
}

/// Mean HR@K and NDCG@K over `cases`; scoring runs in parallel, the sums in case order.
pub fn evaluate(scorer: &dyn Scorer, enc: &Encoded, cases: &[EvalCase], k: usize) -> Result<ProtocolMetrics> {
    let per_case: Vec<Result<(f64, f64)>> = cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let wrap = |e: Error| Error::Scoring {
                case: i,
                message: format!("interaction {}: {e}", c.pos),
            };
            let scores = scorer.score(enc, c.pos, &c.candidates).map_err(wrap)?;
            rank_metrics(&c.candidates, &scores, c.target, k).map_err(wrap)
        })
        .collect();
    let (mut hr, mut ndcg) = (0.0, 0.0);
    for r in per_case {
        let (h, n) = r?;
        hr += h;
        ndcg += n;
    }
    let n = cases.len();
    let d = n.max(1) as f64;
    Ok(ProtocolMetrics {
        hr: hr / d,
        ndcg: ndcg / d,
        n,
    })
}

/// Uniform random scores, reproducible per `(seed, pos)`.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, _enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>> {
        let mut rng = case_rng(self.seed, pos);
        Ok(candidates.iter().map(|_| rng.gen::<f64>()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub seed: u64,
    pub k: usize,
    pub protocols: BTreeMap<Protocol, ProtocolMetrics>,
    pub parameter_count: Option<usize>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut protocols = serde_json::Map::new();
        for (p, m) in &self.protocols {
            protocols.insert(
                p.name().to_string(),
                json!({ format!("hr@{}", self.k): m.hr, format!("ndcg@{}", self.k): m.ndcg, "n": m.n }),
            );
        }
        let v = json!({
            "model": self.model,
            "seed": self.seed,
            "k": self.k,
            "parameter_count": self.parameter_count,
            "protocols": Value::Object(protocols),
        });
        let mut s = serde_json::to_string_pretty(&v).expect("json values serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("metrics report: {m}"));
        let v: Value = serde_json::from_str(text).map_err(|e| bad(&e.to_string()))?;
        let k = v["k"].as_u64().ok_or_else(|| bad("missing k"))? as usize;
        let mut protocols = BTreeMap::new();
        if let Some(obj) = v["protocols"].as_object() {
            for (name, m) in obj {
                let get = |key: &str| m[key].as_f64().ok_or_else(|| bad(&format!("{name}: missing {key}")));
                protocols.insert(
                    name.parse()?,
                    ProtocolMetrics {
                        hr: get(&format!("hr@{k}"))?,
                        ndcg: get(&format!("ndcg@{k}"))?,
                        n: get("n")? as usize,
                    },
                );
            }
        }
        Ok(MetricsReport {
            model: v["model"].as_str().ok_or_else(|| bad("missing model"))?.to_string(),
            seed: v["seed"].as_u64().ok_or_else(|| bad("missing seed"))?,
            k,
            protocols,
            parameter_count: v["parameter_count"].as_u64().map(|c| c as usize),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::fixtures::split_of;

    fn catalog(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:04}")).collect()
    }

    /// One user visits `visited` stores in train, then explores `s0999`-ish and
    /// repeats `s0000` in test.
    fn enc_with(n_catalog: usize, visited: usize) -> Encoded {
        let cat = catalog(n_catalog);
        let mut rows: Vec<(String, String, i64, i64, String)> = (0..visited)
            .map(|i| ("u".to_string(), cat[i].clone(), (i % 5) as i64, 12, "l".to_string()))
            .collect();
        rows.push(("u".into(), cat[n_catalog - 1].clone(), 8, 12, "l".into()));
        rows.push(("u".into(), cat[0].clone(), 12, 12, "l".into()));
        rows.push(("v".into(), cat[1].clone(), 6, 12, "l".into()));
        let rows_ref: Vec<(&str, &str, i64, i64, &str)> = rows
            .iter()
            .map(|(u, s, d, h, l)| (u.as_str(), s.as_str(), *d, *h, l.as_str()))
            .collect();
        let cat_ref: Vec<&str> = cat.iter().map(String::as_str).collect();
        let split = split_of(&rows_ref, &cat_ref, 5, 3);
        Encoded::new(&split).unwrap()
    }

    #[test]
    fn exploration_case_sizes() {
        let e = enc_with(2000, 10);
        let cases = build_cases(&e, Protocol::Exploration, 1).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].candidates.len(), 1000);
        // 50 stores and 10 visited counting the target leave 40 never visited.
        let e = enc_with(50, 9);
        let c = &build_cases(&e, Protocol::Exploration, 1).unwrap()[0];
        assert_eq!(c.candidates.len(), 41);
        let prior = e.prior_stores(c.pos);
        assert!(c.candidates.iter().all(|s| prior.binary_search(s).is_err()));
    }

    #[test]
    fn repeat_and_combined_cases() {
        let e = enc_with(2000, 10);
        let r = build_cases(&e, Protocol::Repeat, 1).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].candidates.len(), 11);
        assert_eq!(r[0].target, 0);
        let c = build_cases(&e, Protocol::Combined, 1).unwrap();
        assert_eq!(c.len(), 2);
        for case in &c {
            assert_eq!(case.candidates.len(), 1000);
            let prior = e.prior_stores(case.pos);
            assert!(prior.iter().all(|s| case.candidates.binary_search(s).is_ok()));
            assert!(case.candidates.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn same_seed_same_cases_and_streams_are_independent() {
        let e = enc_with(2000, 10);
        let a = build_cases(&e, Protocol::Combined, 5).unwrap();
        assert_eq!(a, build_cases(&e, Protocol::Combined, 5).unwrap());
        assert_ne!(a, build_cases(&e, Protocol::Combined, 6).unwrap());
        let single = build_case(&e, a[1].pos, Protocol::Combined, 5).unwrap().unwrap();
        assert_eq!(single, a[1]);
    }

    #[test]
    fn rank_metric_cases() {
        let c = [1, 2, 3, 4, 5];
        assert_eq!(rank_metrics(&c, &[9.0, 1.0, 2.0, 3.0, 4.0], 1, 3).unwrap(), (1.0, 1.0));
        let (h, n) = rank_metrics(&c, &[3.0, 5.0, 4.0, 1.0, 0.0], 1, 3).unwrap();
        assert_eq!(h, 1.0);
        assert!((n - 0.5).abs() < 1e-12);
        assert_eq!(rank_metrics(&c, &[2.0, 5.0, 4.0, 3.0, 0.0], 1, 3).unwrap(), (0.0, 0.0));
        assert_eq!(rank_metrics(&c, &[1.0; 5], 1, 3).unwrap(), (0.0, 0.0));
        assert!(rank_metrics(&c, &[1.0; 5], 9, 3).is_err());
        assert!(rank_metrics(&c, &[1.0; 4], 1, 3).is_err());
    }

    struct Oracle;
    impl Scorer for Oracle {
        fn score(&self, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>> {
            Ok(candidates.iter().map(|&c| f64::from(c == enc.store[pos])).collect())
        }
    }

    struct Constant;
    impl Scorer for Constant {
        fn score(&self, _: &Encoded, _: usize, candidates: &[u32]) -> Result<Vec<f64>> {
            Ok(vec![0.0; candidates.len()])
        }
    }

    #[test]
    fn oracle_and_constant_scorers() {
        let e = enc_with(2000, 10);
        let cases = build_cases(&e, Protocol::Combined, 1).unwrap();
        let m = evaluate(&Oracle, &e, &cases, 3).unwrap();
        assert_eq!((m.hr, m.ndcg, m.n), (1.0, 1.0, 2));
        let m = evaluate(&Constant, &e, &cases, 3).unwrap();
        assert_eq!((m.hr, m.ndcg), (0.0, 0.0));
    }

    #[test]
    fn subsample_keeps_order() {
        let e = enc_with(200, 10);
        let mut cases = Vec::new();
        for pos in 0..e.len() {
            if let Some(c) = build_case(&e, pos, Protocol::Combined, 1).unwrap() {
                cases.push(c);
            }
        }
        let n = cases.len();
        let sub = subsample_cases(cases.clone(), 5, 3);
        assert_eq!(sub.len(), 5.min(n));
        assert!(sub.windows(2).all(|w| w[0].pos < w[1].pos));
        assert_eq!(subsample_cases(cases.clone(), 100, 3), cases);
    }

    #[test]
    fn report_json_roundtrip() {
        let mut protocols = BTreeMap::new();
        protocols.insert(Protocol::Repeat, ProtocolMetrics { hr: 0.5, ndcg: 0.25, n: 10 });
        let r = MetricsReport {
            model: "hispop".into(),
            seed: 3,
            k: 3,
            protocols,
            parameter_count: None,
        };
        let text = r.to_json();
        assert!(text.contains("\"hr@3\": 0.5"));
        assert_eq!(MetricsReport::from_json(&text).unwrap(), r);
    }
}
