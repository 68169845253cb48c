//! Interaction logs and store catalogs: parsing, filtering, repeat labelling,
//! global-timeline splitting and synthetic generation.
//!
//! Logs are kept sorted by `(time, input order)`. Every transformation here
//! preserves the per-user order, so position `i` of a user's index always
//! precedes position `i + 1` in time.

mod split;
mod synth;
mod tsv;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

pub use split::{split_global_timeline, DatasetSplit, Partition};
pub use synth::{generate_synthetic, generate_synthetic_with_truth, hour_band, SynthConfig, SynthTruth, N_BANDS};
pub use tsv::{parse_catalog, parse_interactions, write_catalog, write_interactions};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// One order event: `user` ordered from `store` at `time` for delivery to `location`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user_id: String,
    pub store_id: String,
    /// Unix seconds, UTC.
    pub time: i64,
    pub location_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreMeta {
    pub store_id: String,
    pub brand_id: String,
    pub cuisine_id: String,
    pub store_location_id: String,
}

/// Calendar and location facets of an order's situation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SituationFeatures {
    /// Days since the dataset epoch, in local time.
    pub day_index: i64,
    /// 0..=23
    pub hour: u8,
    /// 0 = Monday .. 6 = Sunday
    pub day_of_week: u8,
    pub location_id: String,
}

impl SituationFeatures {
    /// Derive facets from a UTC timestamp with a fixed UTC offset.
    pub fn derive(time: i64, location_id: &str, epoch: i64, tz_offset_minutes: i32) -> Self {
        let offset = i64::from(tz_offset_minutes) * 60;
        let local = time + offset;
        let day = local.div_euclid(SECONDS_PER_DAY);
        let epoch_day = (epoch + offset).div_euclid(SECONDS_PER_DAY);
        let hour = local.rem_euclid(SECONDS_PER_DAY) / 3600;
        // 1970-01-01 was a Thursday.
        let day_of_week = (day + 3).rem_euclid(7);
        SituationFeatures {
            day_index: day - epoch_day,
            hour: hour as u8,
            day_of_week: day_of_week as u8,
            location_id: location_id.to_string(),
        }
    }
}

/// Store catalog, sorted by store id. A store's position in the catalog is its
/// canonical dense index everywhere else in the crate.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    stores: Vec<StoreMeta>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(mut stores: Vec<StoreMeta>) -> Result<Self> {
        stores.sort_by(|a, b| a.store_id.cmp(&b.store_id));
        let mut index = HashMap::with_capacity(stores.len());
        for (i, s) in stores.iter().enumerate() {
            if s.store_id.is_empty() {
                return Err(Error::invalid("empty store id in catalog"));
            }
            if index.insert(s.store_id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate store id {} in catalog", s.store_id)));
            }
        }
        Ok(Catalog { stores, index })
    }

    pub fn len(&self) -> usize {
        self.stores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stores.is_empty()
    }

    pub fn get(&self, store_id: &str) -> Option<&StoreMeta> {
        self.index.get(store_id).map(|&i| &self.stores[i])
    }

    pub fn index_of(&self, store_id: &str) -> Option<usize> {
        self.index.get(store_id).copied()
    }

    pub fn by_index(&self, i: usize) -> &StoreMeta {
        &self.stores[i]
    }

    pub fn stores(&self) -> &[StoreMeta] {
        &self.stores
    }

    fn restrict(&self, keep: &HashSet<&str>) -> Catalog {
        let stores: Vec<StoreMeta> = self
            .stores
            .iter()
            .filter(|s| keep.contains(s.store_id.as_str()))
            .cloned()
            .collect();
        // Already sorted and unique.
        let index = stores
            .iter()
            .enumerate()
            .map(|(i, s)| (s.store_id.clone(), i))
            .collect();
        Catalog { stores, index }
    }
}

/// A time-ordered interaction log with a per-user index and its store catalog.
#[derive(Debug, Clone)]
pub struct InteractionLog {
    interactions: Vec<Interaction>,
    user_index: BTreeMap<String, Vec<usize>>,
    catalog: Catalog,
    epoch: i64,
    tz_offset_minutes: i32,
}

impl InteractionLog {
    /// Build a log from interactions in input order. Sorting is stable, so
    /// equal timestamps keep their input order.
    pub fn from_interactions(mut interactions: Vec<Interaction>, tz_offset_minutes: i32) -> Result<Self> {
        for x in &interactions {
            if x.time <= 0 {
                return Err(Error::invalid(format!("non-positive time {}", x.time)));
            }
            if x.user_id.is_empty() || x.store_id.is_empty() || x.location_id.is_empty() {
                return Err(Error::invalid("empty id in interaction"));
            }
        }
        interactions.sort_by_key(|x| x.time);
        let mut user_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, x) in interactions.iter().enumerate() {
            user_index.entry(x.user_id.clone()).or_default().push(i);
        }
        let epoch = interactions.first().map_or(0, |x| x.time);
        Ok(InteractionLog {
            interactions,
            user_index,
            catalog: Catalog::default(),
            epoch,
            tz_offset_minutes,
        })
    }

    /// Attach a catalog; every store referenced by an interaction must be present.
    pub fn with_catalog(mut self, catalog: Catalog) -> Result<Self> {
        for x in &self.interactions {
            if catalog.get(&x.store_id).is_none() {
                return Err(Error::invalid(format!("store {} has no catalog entry", x.store_id)));
            }
        }
        self.catalog = catalog;
        Ok(self)
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn get(&self, pos: usize) -> &Interaction {
        &self.interactions[pos]
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    /// Unix seconds of the earliest interaction (0 for an empty log).
    pub fn epoch(&self) -> i64 {
        self.epoch
    }

    pub fn tz_offset_minutes(&self) -> i32 {
        self.tz_offset_minutes
    }

    pub fn first_time(&self) -> Option<i64> {
        self.interactions.first().map(|x| x.time)
    }

    pub fn last_time(&self) -> Option<i64> {
        self.interactions.last().map(|x| x.time)
    }

    /// Seconds between the first and last interaction.
    pub fn span(&self) -> i64 {
        match (self.first_time(), self.last_time()) {
            (Some(a), Some(b)) => b - a,
            _ => 0,
        }
    }

    /// Users in ascending id order with their time-ordered positions.
    pub fn users(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.user_index.iter().map(|(u, p)| (u.as_str(), p.as_slice()))
    }

    pub fn n_users(&self) -> usize {
        self.user_index.len()
    }

    pub fn user_positions(&self, user_id: &str) -> Option<&[usize]> {
        self.user_index.get(user_id).map(Vec::as_slice)
    }

    pub fn situation(&self, pos: usize) -> SituationFeatures {
        self.situation_of(&self.interactions[pos])
    }

    pub fn situation_of(&self, x: &Interaction) -> SituationFeatures {
        SituationFeatures::derive(x.time, &x.location_id, self.epoch, self.tz_offset_minutes)
    }

    /// Distinct store ids referenced by the interactions.
    pub fn referenced_stores(&self) -> BTreeSet<&str> {
        self.interactions.iter().map(|x| x.store_id.as_str()).collect()
    }
}

/// Keep exactly the users with at least `min_orders` interactions. Single
/// pass: stores are not re-filtered and users are not re-checked afterwards.
/// The catalog is restricted to the stores still referenced.
pub fn filter_users(log: &InteractionLog, min_orders: usize) -> Result<InteractionLog> {
    if min_orders == 0 {
        return Err(Error::invalid("min_orders must be at least 1"));
    }
    let keep: HashSet<&str> = log
        .users()
        .filter(|(_, p)| p.len() >= min_orders)
        .map(|(u, _)| u)
        .collect();
    let interactions: Vec<Interaction> = log
        .interactions
        .iter()
        .filter(|x| keep.contains(x.user_id.as_str()))
        .cloned()
        .collect();
    let mut out = InteractionLog::from_interactions(interactions, log.tz_offset_minutes)?;
    let referenced: HashSet<&str> = out.interactions.iter().map(|x| x.store_id.as_str()).collect();
    let catalog = log.catalog.restrict(&referenced);
    out.catalog = catalog;
    Ok(out)
}

/// `flags[i]` is true iff the same (user, store) pair occurs strictly earlier
/// in the log. Each user is labelled independently of every other user.
pub fn label_repeat_flags(log: &InteractionLog) -> Vec<bool> {
    let mut flags = vec![false; log.len()];
    for (_, positions) in log.users() {
        let mut seen: HashSet<&str> = HashSet::with_capacity(positions.len());
        for &p in positions {
            flags[p] = !seen.insert(log.interactions[p].store_id.as_str());
        }
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ix(user: &str, store: &str, time: i64) -> Interaction {
        Interaction {
            user_id: user.into(),
            store_id: store.into(),
            time,
            location_id: "l0".into(),
        }
    }

    #[test]
    fn situation_facets_from_utc() {
        // 2024-01-01 00:00 UTC is a Monday.
        let t = 1_704_067_200;
        let s = SituationFeatures::derive(t + 13 * 3600, "x", t, 0);
        assert_eq!((s.day_index, s.hour, s.day_of_week), (0, 13, 0));
        // +120 minutes pushes 23:00 UTC to 01:00 the next local day.
        let s = SituationFeatures::derive(t + 23 * 3600, "x", t, 120);
        assert_eq!((s.day_index, s.hour, s.day_of_week), (1, 1, 1));
        // Negative offsets roll back across the day boundary.
        let s = SituationFeatures::derive(t + 3600, "x", t + 3600, -120);
        assert_eq!((s.day_index, s.hour, s.day_of_week), (0, 23, 6));
    }

    #[test]
    fn log_sorted_and_epoch_is_minimum() {
        let log = InteractionLog::from_interactions(
            vec![ix("a", "s1", 100), ix("a", "s2", 50), ix("b", "s1", 70)],
            0,
        )
        .unwrap();
        let times: Vec<i64> = log.interactions().iter().map(|x| x.time).collect();
        assert_eq!(times, vec![50, 70, 100]);
        assert_eq!(log.epoch(), 50);
        assert_eq!(log.user_positions("a").unwrap(), &[0, 2]);
    }

    #[test]
    fn equal_times_keep_input_order() {
        let log = InteractionLog::from_interactions(
            vec![ix("a", "s2", 10), ix("a", "s1", 10), ix("a", "s3", 5)],
            0,
        )
        .unwrap();
        let stores: Vec<&str> = log.interactions().iter().map(|x| x.store_id.as_str()).collect();
        assert_eq!(stores, vec!["s3", "s2", "s1"]);
    }

    #[test]
    fn filter_threshold_and_identity() {
        let mut xs = Vec::new();
        for t in 0..12 {
            xs.push(ix("A", "s1", 100 + t));
        }
        for t in 0..9 {
            xs.push(ix("B", "s2", 200 + t));
        }
        let catalog = Catalog::new(
            ["s1", "s2"]
                .iter()
                .map(|s| StoreMeta {
                    store_id: s.to_string(),
                    brand_id: "b".into(),
                    cuisine_id: "c".into(),
                    store_location_id: "l".into(),
                })
                .collect(),
        )
        .unwrap();
        let log = InteractionLog::from_interactions(xs, 0).unwrap().with_catalog(catalog).unwrap();
        let f = filter_users(&log, 10).unwrap();
        assert_eq!(f.n_users(), 1);
        assert!(f.interactions().iter().all(|x| x.user_id == "A"));
        assert_eq!(f.catalog().len(), 1);
        let same = filter_users(&log, 1).unwrap();
        assert_eq!(same.interactions(), log.interactions());
        assert!(filter_users(&log, 0).is_err());
    }

    #[test]
    fn repeat_flags_definition() {
        let log = InteractionLog::from_interactions(
            vec![ix("u", "s1", 1), ix("u", "s2", 2), ix("u", "s1", 3), ix("v", "s1", 4)],
            0,
        )
        .unwrap();
        assert_eq!(label_repeat_flags(&log), vec![false, false, true, false]);
        let distinct = InteractionLog::from_interactions(
            vec![ix("u", "s1", 1), ix("u", "s2", 2), ix("u", "s3", 3)],
            0,
        )
        .unwrap();
        assert!(label_repeat_flags(&distinct).iter().all(|f| !f));
    }

    #[test]
    fn catalog_rejects_duplicates_and_missing_stores() {
        let meta = |s: &str| StoreMeta {
            store_id: s.into(),
            brand_id: "b".into(),
            cuisine_id: "c".into(),
            store_location_id: "l".into(),
        };
        assert!(Catalog::new(vec![meta("a"), meta("a")]).is_err());
        let log = InteractionLog::from_interactions(vec![ix("u", "zz", 1)], 0).unwrap();
        assert!(log.with_catalog(Catalog::new(vec![meta("a")]).unwrap()).is_err());
    }
}
