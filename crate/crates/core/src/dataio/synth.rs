//! Synthetic order logs with planted repeat, situation and collaborative effects.
//!
//! Every user belongs to a latent cluster and has a few routines, each a
//! (time-of-day band, center hour, delivery location) triple. An order first
//! draws repeat versus explore. Repeat orders revisit a past store, weighted by
//! how closely the current situation matches that store's past order
//! situations. Explore orders pick an unvisited store, weighted by an affinity
//! that the whole cluster shares for the current band and trend period, or now and
//! then by the user's own favorite cuisine.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Catalog, Interaction, InteractionLog, StoreMeta, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::situsim::SituationKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_stores: usize,
    pub n_orders_per_user: usize,
    pub repeat_prob: f64,
    pub situation_coupling: f64,
    /// Exponent applied to the situation similarity in repeat weights; 1
    /// keeps the weight linear in the similarity.
    pub repeat_sharpness: f64,
    pub collab_coupling: f64,
    /// Probability that an exploration order picks an unvisited store of the
    /// user's own favorite cuisine instead of following the cluster.
    pub taste_prob: f64,
    pub n_locations: usize,
    pub n_brands: usize,
    pub n_cuisines: usize,
    pub n_clusters: usize,
    pub routines_per_user: usize,
    /// Weekdays on which each routine occurs.
    pub routine_days: usize,
    /// Probability that a routine follows its cluster's shared schedule for
    /// that band (delivery location and weekdays) rather than a private one.
    pub cluster_routine_prob: f64,
    /// Number of distinct shared schedules; cluster `c` follows schedule
    /// `c % schedule_groups`, so fewer groups hide clusters from situations.
    pub schedule_groups: usize,
    /// Stores each cluster favors in each band regardless of week.
    pub stable_favorites: usize,
    /// Stores each cluster favors in each band for one trend period only.
    pub trend_favorites: usize,
    /// Length of a trend period in days.
    pub trend_period_days: i64,
    /// Size of the per-cluster, per-band pool that trending sets are drawn
    /// from; 0 draws from the whole catalog.
    pub trend_pool: usize,
    pub span_days: i64,
    /// Unix seconds of the first simulated day.
    pub start_time: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 10_000,
            n_stores: 500,
            n_orders_per_user: 30,
            repeat_prob: 0.4,
            situation_coupling: 0.9,
            repeat_sharpness: 8.0,
            collab_coupling: 0.9,
            taste_prob: 0.0,
            n_locations: 60,
            n_brands: 200,
            n_cuisines: 40,
            n_clusters: 8,
            routines_per_user: 3,
            routine_days: 1,
            cluster_routine_prob: 1.0,
            schedule_groups: 1,
            stable_favorites: 0,
            trend_favorites: 2,
            trend_pool: 30,
            trend_period_days: 1,
            span_days: 120,
            start_time: 1_704_067_200,
        }
    }
}

pub const N_BANDS: usize = 4;

/// Coarse time-of-day band: breakfast, lunch, afternoon, evening and night.
pub fn hour_band(hour: u8) -> usize {
    match hour {
        6..=10 => 0,
        11..=14 => 1,
        15..=17 => 2,
        _ => 3,
    }
}

/// Hours of a band that keep `center ± 1` inside the band.
fn band_centers(band: usize) -> Vec<u8> {
    match band {
        0 => vec![7, 8, 9],
        1 => vec![12, 13],
        2 => vec![16],
        _ => (19..=28).map(|h| (h % 24) as u8).collect(),
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, name: &str| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("synth.{name} must lie in [0, 1], got {v}")))
            }
        };
        unit(self.repeat_prob, "repeat_prob")?;
        unit(self.situation_coupling, "situation_coupling")?;
        unit(self.collab_coupling, "collab_coupling")?;
        unit(self.taste_prob, "taste_prob")?;
        unit(self.cluster_routine_prob, "cluster_routine_prob")?;
        if !(self.repeat_sharpness >= 1.0 && self.repeat_sharpness.is_finite()) {
            return Err(Error::Config("synth.repeat_sharpness must be finite and at least 1".into()));
        }
        if !(1..=7).contains(&self.routine_days) {
            return Err(Error::Config("synth.routine_days must lie in 1..=7".into()));
        }
        for (v, name) in [
            (self.n_users, "n_users"),
            (self.n_stores, "n_stores"),
            (self.n_orders_per_user, "n_orders_per_user"),
            (self.n_locations, "n_locations"),
            (self.n_brands, "n_brands"),
            (self.n_cuisines, "n_cuisines"),
            (self.n_clusters, "n_clusters"),
            (self.routines_per_user, "routines_per_user"),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("synth.{name} must be positive")));
            }
        }
        if !(1..=self.n_clusters).contains(&self.schedule_groups) {
            return Err(Error::Config("synth.schedule_groups must lie in 1..=n_clusters".into()));
        }
        if self.routines_per_user > N_BANDS {
            return Err(Error::Config(format!("synth.routines_per_user must be at most {N_BANDS}")));
        }
        if self.trend_period_days < 1 {
            return Err(Error::Config("synth.trend_period_days must be positive".into()));
        }
        if self.span_days < 1 || self.start_time <= 0 {
            return Err(Error::Config("synth.span_days and synth.start_time must be positive".into()));
        }
        if self.repeat_prob == 0.0 && self.n_orders_per_user > self.n_stores {
            return Err(Error::Config(format!(
                "{} distinct stores per user requested from a catalog of {} with repeat_prob 0",
                self.n_orders_per_user, self.n_stores
            )));
        }
        Ok(())
    }
}

struct Routine {
    band: usize,
    center: u8,
    loc: u32,
    days: Vec<i64>,
}

/// Latent structure behind a generated log.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    /// Cluster of each user, in ascending user id order.
    pub clusters: Vec<usize>,
}

/// Generate a log and its catalog. Deterministic in `(cfg, seed)`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<(InteractionLog, Catalog)> {
    generate_synthetic_with_truth(cfg, seed).map(|(log, catalog, _)| (log, catalog))
}

pub fn generate_synthetic_with_truth(cfg: &SynthConfig, seed: u64) -> Result<(InteractionLog, Catalog, SynthTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_stores = cfg.n_stores;

    let mut cuisine_of = Vec::with_capacity(n_stores);
    let stores: Vec<StoreMeta> = (0..n_stores)
        .map(|s| {
            let brand = rng.gen_range(0..cfg.n_brands);
            let cuisine = rng.gen_range(0..cfg.n_cuisines);
            cuisine_of.push(cuisine);
            StoreMeta {
                store_id: format!("s{s:04}"),
                brand_id: format!("b{brand:02}"),
                cuisine_id: format!("c{cuisine:02}"),
                store_location_id: format!("l{:02}", rng.gen_range(0..cfg.n_locations)),
            }
        })
        .collect();
    let all: Vec<usize> = (0..n_stores).collect();
    let period = cfg.trend_period_days;
    let n_periods = ((cfg.span_days + period - 1) / period) as usize;
    // affinity[cluster][band][period]: favorite-set membership scaled to mean 1.
    let mut affinity = vec![vec![vec![Vec::<f64>::new(); n_periods]; N_BANDS]; cfg.n_clusters];
    for cluster_aff in affinity.iter_mut() {
        for band_aff in cluster_aff.iter_mut() {
            let stable: Vec<usize> = all
                .choose_multiple(&mut rng, cfg.stable_favorites.min(n_stores))
                .copied()
                .collect();
            let pool: Vec<usize> = if cfg.trend_pool == 0 {
                all.clone()
            } else {
                all.choose_multiple(&mut rng, cfg.trend_pool.min(n_stores)).copied().collect()
            };
            for period_aff in band_aff.iter_mut() {
                let mut fav = vec![false; n_stores];
                for &s in &stable {
                    fav[s] = true;
                }
                for &s in pool.choose_multiple(&mut rng, cfg.trend_favorites) {
                    fav[s] = true;
                }
                let size = fav.iter().filter(|&&f| f).count().max(1);
                let hi = n_stores as f64 / size as f64;
                *period_aff = fav.iter().map(|&f| if f { hi } else { 0.0 }).collect();
            }
        }
    }

    let weekdays: Vec<i64> = (0..7).collect();
    let cluster_schedules: Vec<Vec<(u32, Vec<i64>)>> = (0..cfg.schedule_groups)
        .map(|_| {
            (0..N_BANDS)
                .map(|_| {
                    let loc = rng.gen_range(0..cfg.n_locations) as u32;
                    (loc, weekdays.choose_multiple(&mut rng, cfg.routine_days).copied().collect())
                })
                .collect()
        })
        .collect();
    let start_dow = (cfg.start_time.div_euclid(SECONDS_PER_DAY) + 3).rem_euclid(7);
    let mut clusters = Vec::with_capacity(cfg.n_users);

    let width = cfg.n_users.to_string().len().max(4);
    let mut interactions = Vec::with_capacity(cfg.n_users * cfg.n_orders_per_user);
    let bands: Vec<usize> = (0..N_BANDS).collect();
    let mut weights = vec![0.0; n_stores];
    for u in 0..cfg.n_users {
        let user_id = format!("u{u:0width$}");
        let cluster = rng.gen_range(0..cfg.n_clusters);
        let taste = rng.gen_range(0..cfg.n_cuisines);
        clusters.push(cluster);
        let chosen: Vec<usize> = bands.choose_multiple(&mut rng, cfg.routines_per_user).copied().collect();
        let mut routines = Vec::with_capacity(chosen.len());
        for band in chosen {
            let center = *band_centers(band).choose(&mut rng).expect("band has hours");
            let (loc, dows) = if rng.gen_bool(cfg.cluster_routine_prob) {
                cluster_schedules[cluster % cfg.schedule_groups][band].clone()
            } else {
                let loc = rng.gen_range(0..cfg.n_locations) as u32;
                (loc, weekdays.choose_multiple(&mut rng, cfg.routine_days).copied().collect())
            };
            let mut days: Vec<i64> = (0..cfg.span_days)
                .filter(|d| dows.contains(&(start_dow + d).rem_euclid(7)))
                .collect();
            if days.is_empty() {
                days = (0..cfg.span_days).collect();
            }
            routines.push(Routine { band, center, loc, days });
        }

        let mut orders: Vec<(i64, usize)> = (0..cfg.n_orders_per_user)
            .map(|_| {
                let r = rng.gen_range(0..routines.len());
                let day = *routines[r].days.choose(&mut rng).expect("routine has days");
                let hour = (i64::from(routines[r].center) + rng.gen_range(-1..=1)).rem_euclid(24);
                let t = cfg.start_time + day * SECONDS_PER_DAY + hour * 3600 + rng.gen_range(0..3600);
                (t, r)
            })
            .collect();
        orders.sort_unstable();

        let mut visited = vec![false; n_stores];
        let mut n_visited = 0;
        // Past situations per visited store.
        let mut past: Vec<(usize, SituationKey)> = Vec::with_capacity(orders.len());
        for (k, &(t, r)) in orders.iter().enumerate() {
            let rt = &routines[r];
            let day = t.div_euclid(SECONDS_PER_DAY);
            let now = SituationKey {
                day,
                hour: (t.rem_euclid(SECONDS_PER_DAY) / 3600) as u8,
                dow: (day + 3).rem_euclid(7) as u8,
                loc: rt.loc,
            };
            let trend = ((t - cfg.start_time).div_euclid(SECONDS_PER_DAY) / period) as usize;
            let explore_possible = n_visited < n_stores;
            let repeat = k > 0 && (!explore_possible || rng.gen_bool(cfg.repeat_prob));
            if repeat {
                weights.iter_mut().for_each(|w| *w = 0.0);
                for &(s, sit) in &past {
                    let w = (1.0 - cfg.situation_coupling) + cfg.situation_coupling * now.similarity(&sit).powf(cfg.repeat_sharpness);
                    if w > weights[s] {
                        weights[s] = w;
                    }
                }
            } else {
                let by_taste = cfg.taste_prob > 0.0
                    && rng.gen_bool(cfg.taste_prob)
                    && (0..n_stores).any(|s| !visited[s] && cuisine_of[s] == taste);
                let aff = &affinity[cluster][rt.band][trend.min(n_periods - 1)];
                for s in 0..n_stores {
                    weights[s] = if visited[s] {
                        0.0
                    } else if by_taste {
                        f64::from(u8::from(cuisine_of[s] == taste))
                    } else {
                        (1.0 - cfg.collab_coupling) + cfg.collab_coupling * aff[s]
                    };
                }
            }
            let s = pick(&mut rng, &weights, &visited, repeat);
            if !visited[s] {
                visited[s] = true;
                n_visited += 1;
            }
            past.push((s, now));
            interactions.push(Interaction {
                user_id: user_id.clone(),
                store_id: stores[s].store_id.clone(),
                time: t,
                location_id: format!("l{:02}", rt.loc),
            });
        }
    }

    let catalog = Catalog::new(stores)?;
    let log = InteractionLog::from_interactions(interactions, 0)?.with_catalog(catalog.clone())?;
    Ok((log, catalog, SynthTruth { clusters }))
}

/// Weighted draw; falls back to a uniform draw over the eligible stores when
/// every weight is zero.
fn pick(rng: &mut ChaCha8Rng, weights: &[f64], visited: &[bool], repeat: bool) -> usize {
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        let mut x = rng.gen::<f64>() * total;
        let mut last = 0;
        for (s, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                if x < w {
                    return s;
                }
                x -= w;
                last = s;
            }
        }
        return last;
    }
    let eligible: Vec<usize> = (0..weights.len()).filter(|&s| visited[s] == repeat).collect();
    *eligible.choose(rng).expect("an eligible store exists")
}
