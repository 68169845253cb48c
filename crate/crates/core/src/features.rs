//! Dense integer encoding of a split log, shared by every model.

use std::collections::{BTreeSet, HashMap};

use crate::dataio::{DatasetSplit, Partition};
use crate::diffcore::{embed_backward, embed_lookup, Grads, Init, ModelState, ParamId, Params};
use crate::error::{Error, Result};
use crate::situsim::SituationKey;

/// Model-side situation indices: hour 0..24, day of week 0..7, and a location
/// row where `n_locations` (one past the last train location) is the shared
/// fallback for locations never seen in train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SitIdx {
    pub hour: u8,
    pub dow: u8,
    pub loc: u32,
}

/// A split log with users, stores and train locations mapped to dense indices.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub users: Vec<String>,
    pub stores: Vec<String>,
    /// Locations seen in train, sorted. Index `locations.len()` is the fallback row.
    pub locations: Vec<String>,
    pub user: Vec<u32>,
    pub store: Vec<u32>,
    pub sit: Vec<SitIdx>,
    /// Full situation facets (all locations distinct) for similarity kernels.
    pub key: Vec<SituationKey>,
    pub repeat: Vec<bool>,
    /// Index of each interaction within its user's sequence.
    pub seq: Vec<u32>,
    pub user_positions: Vec<Vec<usize>>,
    pub time: Vec<i64>,
    pub valid_start: usize,
    pub test_start: usize,
    pub valid_boundary: i64,
    store_index: HashMap<String, u32>,
    user_index: HashMap<String, u32>,
    loc_index: HashMap<String, u32>,
}

impl Encoded {
    /// Store vocabulary is the catalog when present, otherwise the stores the
    /// log references; both sorted by id.
    pub fn new(split: &DatasetSplit) -> Result<Self> {
        let log = split.log();
        let stores: Vec<String> = if log.catalog().is_empty() {
            log.referenced_stores().into_iter().map(str::to_string).collect()
        } else {
            log.catalog().stores().iter().map(|s| s.store_id.clone()).collect()
        };
        let store_index: HashMap<String, u32> = stores.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        let users: Vec<String> = log.users().map(|(u, _)| u.to_string()).collect();
        let user_index: HashMap<String, u32> = users.iter().enumerate().map(|(i, u)| (u.clone(), i as u32)).collect();
        let locations: Vec<String> = split
            .view(Partition::Train)
            .iter()
            .map(|x| x.location_id.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_string)
            .collect();
        let loc_index: HashMap<String, u32> =
            locations.iter().enumerate().map(|(i, l)| (l.clone(), i as u32)).collect();
        let mut all_locs: HashMap<&str, u32> = HashMap::new();
        let n = log.len();
        let (mut user, mut store, mut sit, mut key, mut time) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for (pos, x) in log.interactions().iter().enumerate() {
            user.push(user_index[&x.user_id]);
            store.push(
                *store_index
                    .get(&x.store_id)
                    .ok_or_else(|| Error::invalid(format!("store {} has no catalog entry", x.store_id)))?,
            );
            let f = log.situation(pos);
            let next = all_locs.len() as u32;
            let raw = *all_locs.entry(x.location_id.as_str()).or_insert(next);
            sit.push(SitIdx {
                hour: f.hour,
                dow: f.day_of_week,
                loc: loc_index.get(&x.location_id).copied().unwrap_or(locations.len() as u32),
            });
            key.push(SituationKey {
                day: f.day_index,
                hour: f.hour,
                dow: f.day_of_week,
                loc: raw,
            });
            time.push(x.time);
        }
        let mut seq = vec![0u32; n];
        let mut user_positions = Vec::with_capacity(users.len());
        for (_, positions) in log.users() {
            for (i, &p) in positions.iter().enumerate() {
                seq[p] = i as u32;
            }
            user_positions.push(positions.to_vec());
        }
        let valid = split.range(Partition::Valid);
        Ok(Encoded {
            users,
            stores,
            locations,
            user,
            store,
            sit,
            key,
            repeat: split.repeat_flags().to_vec(),
            seq,
            user_positions,
            time,
            valid_start: valid.start,
            test_start: valid.end,
            valid_boundary: split.boundaries().0,
            store_index,
            user_index,
            loc_index,
        })
    }

    pub fn len(&self) -> usize {
        self.user.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user.is_empty()
    }

    pub fn n_stores(&self) -> usize {
        self.stores.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    /// Location rows including the fallback.
    pub fn n_location_rows(&self) -> usize {
        self.locations.len() + 1
    }

    pub fn store_of(&self, id: &str) -> Option<u32> {
        self.store_index.get(id).copied()
    }

    pub fn user_of(&self, id: &str) -> Option<u32> {
        self.user_index.get(id).copied()
    }

    /// Model location row, falling back for unseen locations.
    pub fn location_row(&self, id: &str) -> u32 {
        self.loc_index.get(id).copied().unwrap_or(self.locations.len() as u32)
    }

    pub fn partition_range(&self, p: Partition) -> std::ops::Range<usize> {
        match p {
            Partition::Train => 0..self.valid_start,
            Partition::Valid => self.valid_start..self.test_start,
            Partition::Test => self.test_start..self.len(),
        }
    }

    /// Positions of the user's interactions strictly before `pos` in their sequence.
    pub fn history(&self, pos: usize) -> &[usize] {
        let u = self.user[pos] as usize;
        &self.user_positions[u][..self.seq[pos] as usize]
    }

    /// Distinct stores of [`Self::history`], ascending.
    pub fn prior_stores(&self, pos: usize) -> Vec<u32> {
        let mut s: Vec<u32> = self.history(pos).iter().map(|&p| self.store[p]).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// The last `limit` history positions.
    pub fn recent_history(&self, pos: usize, limit: usize) -> &[usize] {
        let h = self.history(pos);
        &h[h.len().saturating_sub(limit)..]
    }
}

/// Sum of hour, day-of-week and location embeddings.
#[derive(Debug, Clone, Copy)]
pub struct SituationEmbed {
    pub hour: ParamId,
    pub dow: ParamId,
    pub loc: ParamId,
    pub dim: usize,
}

impl SituationEmbed {
    pub fn new(state: &mut ModelState, location_rows: usize, dim: usize) -> Result<Self> {
        Ok(SituationEmbed {
            hour: state.add("sit.hour", &[24, dim], Init::Embedding)?,
            dow: state.add("sit.dow", &[7, dim], Init::Embedding)?,
            loc: state.add("sit.loc", &[location_rows, dim], Init::Embedding)?,
            dim,
        })
    }

    pub fn vector(&self, p: &Params, s: SitIdx) -> Result<Vec<f64>> {
        let d = self.dim;
        let h = embed_lookup(p.get(self.hour), d, s.hour as usize)?;
        let w = embed_lookup(p.get(self.dow), d, s.dow as usize)?;
        let l = embed_lookup(p.get(self.loc), d, s.loc as usize)?;
        Ok((0..d).map(|i| h[i] + w[i] + l[i]).collect())
    }

    pub fn backward(&self, g: &mut Grads, s: SitIdx, dv: &[f64]) -> Result<()> {
        embed_backward(g.get(self.hour), self.dim, s.hour as usize, dv)?;
        embed_backward(g.get(self.dow), self.dim, s.dow as usize, dv)?;
        embed_backward(g.get(self.loc), self.dim, s.loc as usize, dv)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use crate::dataio::{split_global_timeline, Catalog, DatasetSplit, Interaction, InteractionLog, StoreMeta};

    /// `rows` are `(user, store, day, hour, location)`; every store in
    /// `catalog` gets a catalog entry.
    pub fn split_of(rows: &[(&str, &str, i64, i64, &str)], catalog: &[&str], test_days: i64, valid_days: i64) -> DatasetSplit {
        let base = 1_704_067_200; // 2024-01-01 00:00 UTC, a Monday
        let xs = rows
            .iter()
            .map(|&(u, s, d, h, l)| Interaction {
                user_id: u.into(),
                store_id: s.into(),
                time: base + d * 86_400 + h * 3600,
                location_id: l.into(),
            })
            .collect();
        let cat = Catalog::new(
            catalog
                .iter()
                .map(|s| StoreMeta {
                    store_id: s.to_string(),
                    brand_id: format!("b{s}"),
                    cuisine_id: "c".into(),
                    store_location_id: "l".into(),
                })
                .collect(),
        )
        .unwrap();
        let log = InteractionLog::from_interactions(xs, 0).unwrap().with_catalog(cat).unwrap();
        split_global_timeline(log, test_days * 86_400, valid_days * 86_400).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::split_of;
    use super::*;

    #[test]
    fn encoding_indices_and_fallback_location() {
        let split = split_of(
            &[
                ("u1", "a", 0, 12, "home"),
                ("u2", "b", 0, 18, "work"),
                ("u1", "b", 2, 9, "home"),
                ("u1", "a", 10, 12, "gym"),
                ("u2", "c", 12, 20, "work"),
            ],
            &["a", "b", "c", "d"],
            3,
            9,
        );
        let e = Encoded::new(&split).unwrap();
        assert_eq!(e.stores, vec!["a", "b", "c", "d"]);
        assert_eq!(e.users, vec!["u1", "u2"]);
        assert_eq!(e.locations, vec!["home", "work"]);
        assert_eq!(e.n_location_rows(), 3);
        assert_eq!(e.sit[3].loc, 2);
        assert_eq!(e.location_row("gym"), 2);
        assert_eq!(e.sit[0], SitIdx { hour: 12, dow: 0, loc: 0 });
        assert_ne!(e.key[3].loc, e.key[0].loc);
        assert_eq!(e.history(3), &[0, 2]);
        assert_eq!(e.prior_stores(3), vec![0, 1]);
        assert_eq!(e.recent_history(3, 1), &[2]);
        assert!(e.repeat[3] && !e.repeat[4]);
        assert_eq!(e.partition_range(Partition::Test), 3..5);
    }

    #[test]
    fn situation_vector_is_field_sum_with_routed_gradient() {
        let mut s = ModelState::new(1);
        let se = SituationEmbed::new(&mut s, 3, 4).unwrap();
        let idx = SitIdx { hour: 5, dow: 2, loc: 1 };
        let p = s.params();
        let v = se.vector(&p, idx).unwrap();
        for i in 0..4 {
            let want = p.get(se.hour)[5 * 4 + i] + p.get(se.dow)[2 * 4 + i] + p.get(se.loc)[4 + i];
            assert_eq!(v[i], want);
        }
        assert!(se.vector(&p, SitIdx { hour: 24, dow: 0, loc: 0 }).is_err());
        drop(p);
        let (_, mut g) = s.split();
        se.backward(&mut g, idx, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        drop(g);
        assert_eq!(&s.tensor(se.loc).grad[4..8], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&s.tensor(se.hour).grad[20..24], &[1.0, 2.0, 3.0, 4.0]);
    }
}
