//! Situation and store similarity kernels, Pearson correlation, and
//! collaborative-user discovery over store preference vectors.

use std::collections::{BTreeMap, HashMap};

use crate::dataio::{Interaction, InteractionLog, SituationFeatures, StoreMeta};
use crate::error::{Error, Result};

const DATE_CAP_DAYS: i64 = 30;
const SNAP: f64 = 1e12;

fn kernel(dday: i64, ha: u8, hb: u8, da: u8, db: u8, same_loc: bool) -> f64 {
    let d_date = dday.abs().min(DATE_CAP_DAYS) as f64 / DATE_CAP_DAYS as f64;
    let dh = (i32::from(ha) - i32::from(hb)).abs();
    let d_hour = dh.min(24 - dh) as f64 / 12.0;
    let dd = (i32::from(da) - i32::from(db)).abs();
    let d_dow = dd.min(7 - dd) as f64 / 3.0;
    let mismatch = if same_loc { 0.0 } else { 1.0 };
    1.0 - 0.25 * (d_date + d_hour + d_dow + mismatch)
}

/// Similarity of two order situations in `[0, 1]`. Date distance is capped at
/// 30 days, hour and weekday distances are circular.
pub fn situation_similarity(a: &SituationFeatures, b: &SituationFeatures) -> f64 {
    kernel(
        a.day_index - b.day_index,
        a.hour,
        b.hour,
        a.day_of_week,
        b.day_of_week,
        a.location_id == b.location_id,
    )
}

/// Fraction of matching attributes among brand, cuisine and store location.
pub fn store_similarity(a: &StoreMeta, b: &StoreMeta) -> f64 {
    let m = u8::from(a.brand_id == b.brand_id)
        + u8::from(a.cuisine_id == b.cuisine_id)
        + u8::from(a.store_location_id == b.store_location_id);
    f64::from(m) / 3.0
}

/// Situation facets with the location interned, for hot loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SituationKey {
    pub day: i64,
    pub hour: u8,
    pub dow: u8,
    pub loc: u32,
}

impl SituationKey {
    pub fn similarity(&self, o: &SituationKey) -> f64 {
        kernel(self.day - o.day, self.hour, o.hour, self.dow, o.dow, self.loc == o.loc)
    }
}

/// Store attributes interned to integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreKey {
    pub brand: u32,
    pub cuisine: u32,
    pub loc: u32,
}

impl StoreKey {
    pub fn similarity(&self, o: &StoreKey) -> f64 {
        let m = u8::from(self.brand == o.brand) + u8::from(self.cuisine == o.cuisine) + u8::from(self.loc == o.loc);
        f64::from(m) / 3.0
    }
}

/// Interns situations and catalog attributes of a log so kernels run on integers.
#[derive(Debug, Clone)]
pub struct KeyTables {
    pub situations: Vec<SituationKey>,
    /// Catalog index of each interaction's store.
    pub store_of: Vec<u32>,
    pub stores: Vec<StoreKey>,
}

impl KeyTables {
    pub fn build(log: &InteractionLog) -> Result<Self> {
        fn intern<'a>(m: &mut HashMap<&'a str, u32>, k: &'a str) -> u32 {
            let n = m.len() as u32;
            *m.entry(k).or_insert(n)
        }
        let catalog = log.catalog();
        let mut locs = HashMap::new();
        let mut brands = HashMap::new();
        let mut cuisines = HashMap::new();
        let stores = catalog
            .stores()
            .iter()
            .map(|s| StoreKey {
                brand: intern(&mut brands, &s.brand_id),
                cuisine: intern(&mut cuisines, &s.cuisine_id),
                loc: intern(&mut locs, &s.store_location_id),
            })
            .collect();
        let mut situations = Vec::with_capacity(log.len());
        let mut store_of = Vec::with_capacity(log.len());
        for (i, x) in log.interactions().iter().enumerate() {
            let f = log.situation(i);
            situations.push(SituationKey {
                day: f.day_index,
                hour: f.hour,
                dow: f.day_of_week,
                loc: intern(&mut locs, &x.location_id),
            });
            let s = catalog
                .index_of(&x.store_id)
                .ok_or_else(|| Error::invalid(format!("store {} has no catalog entry", x.store_id)))?;
            store_of.push(s as u32);
        }
        Ok(KeyTables {
            situations,
            store_of,
            stores,
        })
    }
}

/// Sample Pearson correlation. `Ok(None)` when either sequence is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("pearson over lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) || sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

pub type PreferenceVector = BTreeMap<String, f64>;

/// Relative frequency of each store in `history`.
pub fn preference_vector(history: &[Interaction]) -> Result<PreferenceVector> {
    if history.is_empty() {
        return Err(Error::invalid("preference vector of an empty history"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for x in history {
        *counts.entry(x.store_id.clone()).or_default() += 1;
    }
    let n = history.len() as f64;
    Ok(counts.into_iter().map(|(s, c)| (s, c as f64 / n)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub user_id: String,
    pub similarity: f64,
}

/// Up to K neighbors, by similarity descending then user id ascending.
pub type NeighborList = Vec<Neighbor>;

/// Store counts per user with an inverted index, supporting incremental
/// updates and exact Pearson neighbor queries.
///
/// Users are dense indices in ascending id order, so index order is id order.
#[derive(Debug, Clone)]
pub struct PreferenceIndex {
    counts: Vec<HashMap<u32, u32>>,
    visitors: Vec<Vec<u32>>,
    total: Vec<i64>,
    sumsq: Vec<i64>,
}

/// Reusable accumulators for [`PreferenceIndex::neighbors`].
#[derive(Debug, Clone, Default)]
pub struct NeighborScratch {
    dot: Vec<i64>,
    shared: Vec<u32>,
    touched: Vec<u32>,
}

impl PreferenceIndex {
    pub fn new(n_users: usize, n_stores: usize) -> Self {
        PreferenceIndex {
            counts: vec![HashMap::new(); n_users],
            visitors: vec![Vec::new(); n_stores],
            total: vec![0; n_users],
            sumsq: vec![0; n_users],
        }
    }

    pub fn n_users(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, user: u32, store: u32) {
        let c = self.counts[user as usize].entry(store).or_insert(0);
        if *c == 0 {
            self.visitors[store as usize].push(user);
        }
        let old = i64::from(*c);
        *c += 1;
        self.total[user as usize] += 1;
        self.sumsq[user as usize] += 2 * old + 1;
    }

    pub fn history_len(&self, user: u32) -> i64 {
        self.total[user as usize]
    }

    pub fn scratch(&self) -> NeighborScratch {
        NeighborScratch {
            dot: vec![0; self.n_users()],
            shared: vec![0; self.n_users()],
            touched: Vec::new(),
        }
    }

    /// Top-`k` neighbors of `target` as `(user, similarity)`. Users sharing no
    /// store, and users with undefined correlation, have similarity 0.
    pub fn neighbors(&self, target: u32, k: usize, scratch: &mut NeighborScratch) -> Vec<(u32, f64)> {
        let t = target as usize;
        if k == 0 || self.total[t] == 0 {
            return Vec::new();
        }
        if scratch.dot.len() != self.n_users() {
            *scratch = self.scratch();
        }
        for (&s, &ca) in &self.counts[t] {
            for &v in &self.visitors[s as usize] {
                if v == target {
                    continue;
                }
                let vi = v as usize;
                if scratch.shared[vi] == 0 {
                    scratch.touched.push(v);
                }
                scratch.shared[vi] += 1;
                scratch.dot[vi] += i64::from(ca) * i64::from(self.counts[vi][&s]);
            }
        }
        let na = i128::from(self.total[t]);
        let qa = i128::from(self.sumsq[t]);
        let sa = self.counts[t].len() as i128;
        let mut out: Vec<(u32, f64)> = Vec::with_capacity(scratch.touched.len() + k);
        for &v in &scratch.touched {
            let vi = v as usize;
            let n = sa + self.counts[vi].len() as i128 - i128::from(scratch.shared[vi]);
            let nb = i128::from(self.total[vi]);
            let qb = i128::from(self.sumsq[vi]);
            let num = n * i128::from(scratch.dot[vi]) - na * nb;
            let va = n * qa - na * na;
            let vb = n * qb - nb * nb;
            let r = if va == 0 || vb == 0 {
                0.0
            } else {
                let r = num as f64 / ((va as f64) * (vb as f64)).sqrt();
                // Snap so that mathematically equal correlations tie exactly and
                // fall back to the id order.
                ((r * SNAP).round() / SNAP).clamp(-1.0, 1.0)
            };
            out.push((v, r));
        }
        // Zero-similarity fill: only the smallest ids can survive truncation.
        let mut filled = 0;
        for u in 0..self.n_users() as u32 {
            if filled == k {
                break;
            }
            if u == target || scratch.shared[u as usize] > 0 {
                continue;
            }
            out.push((u, 0.0));
            filled += 1;
        }
        for &v in &scratch.touched {
            scratch.dot[v as usize] = 0;
            scratch.shared[v as usize] = 0;
        }
        scratch.touched.clear();
        let order = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if out.len() > k {
            out.select_nth_unstable_by(k - 1, order);
            out.truncate(k);
        }
        out.sort_by(order);
        out
    }
}

/// The `k` users whose store preferences, from interactions strictly before
/// `as_of`, correlate most with the target's.
pub fn collaborative_users(target: &str, log: &InteractionLog, k: usize, as_of: i64) -> Result<NeighborList> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let users: Vec<&str> = log.users().map(|(u, _)| u).collect();
    let t = users
        .binary_search(&target)
        .map_err(|_| Error::invalid(format!("unknown user {target}")))?;
    let mut stores: HashMap<&str, u32> = HashMap::new();
    let mut index = PreferenceIndex::new(users.len(), log.referenced_stores().len());
    for x in log.interactions().iter().take_while(|x| x.time < as_of) {
        let n = stores.len() as u32;
        let s = *stores.entry(x.store_id.as_str()).or_insert(n);
        let u = users.binary_search(&x.user_id.as_str()).expect("user indexed") as u32;
        index.add(u, s);
    }
    let mut scratch = index.scratch();
    Ok(index
        .neighbors(t as u32, k, &mut scratch)
        .into_iter()
        .map(|(u, similarity)| Neighbor {
            user_id: users[u as usize].to_string(),
            similarity,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sf(day: i64, hour: u8, dow: u8, loc: &str) -> SituationFeatures {
        SituationFeatures {
            day_index: day,
            hour,
            day_of_week: dow,
            location_id: loc.into(),
        }
    }

    fn meta(b: &str, c: &str, l: &str) -> StoreMeta {
        StoreMeta {
            store_id: "s".into(),
            brand_id: b.into(),
            cuisine_id: c.into(),
            store_location_id: l.into(),
        }
    }

    #[test]
    fn situation_kernel_cases() {
        let a = sf(5, 12, 2, "x");
        assert_eq!(situation_similarity(&a, &a), 1.0);
        assert_eq!(situation_similarity(&sf(0, 0, 0, "x"), &sf(40, 12, 3, "y")), 0.0);
        let v = situation_similarity(&sf(0, 9, 1, "x"), &sf(3, 9, 4, "x"));
        assert!((v - 0.725).abs() < 1e-12);
        // Circular hour: 23 and 1 are two hours apart.
        let v = situation_similarity(&sf(0, 23, 0, "x"), &sf(0, 1, 0, "x"));
        assert!((v - (1.0 - 0.25 * (2.0 / 12.0))).abs() < 1e-12);
    }

    #[test]
    fn store_kernel_cases() {
        assert_eq!(store_similarity(&meta("b", "c", "l"), &meta("b", "c", "l")), 1.0);
        assert_eq!(store_similarity(&meta("b", "c", "l"), &meta("B", "C", "L")), 0.0);
        assert!((store_similarity(&meta("b", "c", "l"), &meta("B", "c", "L")) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1., 2., 3.], &[1., 2., 3.]).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap().unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap().unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(pearson(&[1., 1., 1.], &[1., 2., 3.]).unwrap(), None);
        assert!(pearson(&[1.], &[1.]).is_err());
        assert!(pearson(&[1., 2.], &[1.]).is_err());
    }

    #[test]
    fn preference_vector_counts() {
        let h = |ss: &[&str]| -> Vec<Interaction> {
            ss.iter()
                .enumerate()
                .map(|(i, s)| Interaction {
                    user_id: "u".into(),
                    store_id: s.to_string(),
                    time: 1 + i as i64,
                    location_id: "l".into(),
                })
                .collect()
        };
        let p = preference_vector(&h(&["s1", "s1", "s2"])).unwrap();
        assert!((p["s1"] - 2.0 / 3.0).abs() < 1e-15 && (p["s2"] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(preference_vector(&h(&["s"])).unwrap()["s"], 1.0);
        let p = preference_vector(&h(&["a", "a", "a", "b", "b", "c"])).unwrap();
        assert!((p["a"] - 0.5).abs() < 1e-15);
        assert!((p["b"] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p["c"] - 1.0 / 6.0).abs() < 1e-15);
        assert!((p.values().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(preference_vector(&[]).is_err());
    }

    fn log_of(rows: &[(&str, &str, i64)]) -> InteractionLog {
        InteractionLog::from_interactions(
            rows.iter()
                .map(|&(u, s, t)| Interaction {
                    user_id: u.into(),
                    store_id: s.into(),
                    time: t,
                    location_id: "l".into(),
                })
                .collect(),
            0,
        )
        .unwrap()
    }

    /// Pearson over the aligned zero-filled union support, or 0 when undefined
    /// or the supports are disjoint.
    fn brute_similarity(log: &InteractionLog, a: &str, b: &str, as_of: i64) -> f64 {
        let hist = |u: &str| -> Vec<Interaction> {
            log.interactions()
                .iter()
                .filter(|x| x.user_id == u && x.time < as_of)
                .cloned()
                .collect()
        };
        let (ha, hb) = (hist(a), hist(b));
        if ha.is_empty() || hb.is_empty() {
            return 0.0;
        }
        let (pa, pb) = (preference_vector(&ha).unwrap(), preference_vector(&hb).unwrap());
        if !pa.keys().any(|k| pb.contains_key(k)) {
            return 0.0;
        }
        let support: std::collections::BTreeSet<&String> = pa.keys().chain(pb.keys()).collect();
        if support.len() < 2 {
            return 0.0;
        }
        let x: Vec<f64> = support.iter().map(|k| pa.get(*k).copied().unwrap_or(0.0)).collect();
        let y: Vec<f64> = support.iter().map(|k| pb.get(*k).copied().unwrap_or(0.0)).collect();
        pearson(&x, &y).unwrap().unwrap_or(0.0)
    }

    fn brute_neighbors(log: &InteractionLog, target: &str, k: usize, as_of: i64) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = log
            .users()
            .filter(|(u, _)| *u != target)
            .map(|(u, _)| (u.to_string(), brute_similarity(log, target, u, as_of)))
            .collect();
        // Rounded so mathematically equal similarities tie on id.
        all.sort_by_key(|(u, s)| (std::cmp::Reverse((s * 1e9).round() as i64), u.clone()));
        all.truncate(k);
        all
    }

    #[test]
    fn clone_is_top_neighbor() {
        let log = log_of(&[
            ("a", "s1", 1),
            ("a", "s2", 2),
            ("a", "s1", 3),
            ("b", "s1", 4),
            ("b", "s2", 5),
            ("b", "s1", 6),
            ("c", "s3", 7),
            ("c", "s1", 8),
        ]);
        let n = collaborative_users("a", &log, 5, i64::MAX).unwrap();
        assert_eq!(n.len(), 2);
        assert_eq!(n[0].user_id, "b");
        assert!((n[0].similarity - 1.0).abs() < 1e-12);
        assert!(n.iter().all(|x| x.user_id != "a"));
        assert!(collaborative_users("a", &log, 0, i64::MAX).is_err());
        assert!(collaborative_users("a", &log, 3, 1).unwrap().is_empty());
    }

    #[test]
    fn three_user_fixture_matches_brute_force() {
        let log = log_of(&[
            ("a", "s1", 1),
            ("a", "s1", 2),
            ("a", "s2", 3),
            ("a", "s3", 4),
            ("b", "s1", 5),
            ("b", "s2", 6),
            ("b", "s2", 7),
            ("c", "s3", 8),
            ("c", "s3", 9),
            ("c", "s1", 10),
        ]);
        for u in ["a", "b", "c"] {
            let got = collaborative_users(u, &log, 10, i64::MAX).unwrap();
            let want = brute_neighbors(&log, u, 10, i64::MAX);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.user_id, w.0);
                assert!((g.similarity - w.1).abs() < 1e-12, "{u}: {g:?} vs {w:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn kernels_symmetric_and_bounded(
            d1 in 0i64..100, d2 in 0i64..100, h1 in 0u8..24, h2 in 0u8..24,
            w1 in 0u8..7, w2 in 0u8..7, l1 in 0u8..3, l2 in 0u8..3,
        ) {
            let a = sf(d1, h1, w1, &l1.to_string());
            let b = sf(d2, h2, w2, &l2.to_string());
            let ab = situation_similarity(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, situation_similarity(&b, &a));
            prop_assert_eq!(situation_similarity(&a, &a), 1.0);
        }

        #[test]
        fn pearson_affine_invariant(
            x in proptest::collection::vec(-10.0f64..10.0, 3..20),
            seed in any::<u64>(),
            a in 0.1f64..10.0, b in -10.0f64..10.0,
        ) {
            let y: Vec<f64> = x.iter().enumerate()
                .map(|(i, v)| v * 0.5 + ((seed.wrapping_mul(i as u64 + 7) % 97) as f64) / 10.0)
                .collect();
            let r0 = pearson(&x, &y).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let r1 = pearson(&xs, &y).unwrap();
            if let (Some(r0), Some(r1)) = (r0, r1) {
                prop_assert!((r0 - r1).abs() <= 1e-9);
                prop_assert!((-1.0..=1.0).contains(&r0));
            }
        }

        #[test]
        fn index_matches_brute_force(
            rows in proptest::collection::vec((0u8..6, 0u8..5), 1..40),
            k in 1usize..7,
            cut in 0usize..40,
        ) {
            let rows: Vec<(String, String, i64)> = rows.iter().enumerate()
                .map(|(i, (u, s))| (format!("u{u}"), format!("s{s}"), 1 + i as i64))
                .collect();
            let refs: Vec<(&str, &str, i64)> = rows.iter().map(|(u, s, t)| (u.as_str(), s.as_str(), *t)).collect();
            let log = log_of(&refs);
            let as_of = 1 + cut as i64;
            for (u, _) in log.users() {
                let got = collaborative_users(u, &log, k, as_of).unwrap();
                let has_history = log.interactions().iter().any(|x| x.user_id == u && x.time < as_of);
                if !has_history {
                    prop_assert!(got.is_empty());
                    continue;
                }
                let want = brute_neighbors(&log, u, k, as_of);
                prop_assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(&want) {
                    prop_assert!((g.similarity - w.1).abs() < 1e-9);
                    prop_assert_eq!(&g.user_id, &w.0);
                }
            }
        }
    }
}
