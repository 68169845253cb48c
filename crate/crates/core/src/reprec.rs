//! RepRec: repeat recommendation by situation-similarity attention over the
//! user's own history.
//!
//! For history entries `i` with situation vectors `μ_i` and store embeddings
//! `s_i`, and the current situation `μ_n`:
//! `w_i = cos(μ_i, μ_n)`, `s_r = Σ_i w_i s_i`, `score(c) = s_c · s_r`.
//! The weights are raw cosines, so they can be negative and do not sum to one.

use serde::{Deserialize, Serialize};

use crate::baselines::uniform_other;
use crate::dataio::Partition;
use crate::diffcore::{axpy, bpr_loss, cosine, cosine_backward, dot, embed_backward, embed_lookup, Checkpoint, Grads, Init, ModelState, ParamId, Params};
use crate::error::{Error, Result};
use crate::evalharness::{build_cases_in, subsample_cases, Protocol};
use crate::features::{Encoded, SitIdx, SituationEmbed};
use crate::training::{check_vocab, checkpoint_with_vocab, fit, validation_hr, FitReport, Model, Net, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepRecParams {
    pub dim: usize,
    /// Most recent history entries attended to.
    pub history_limit: usize,
}

impl Default for RepRecParams {
    fn default() -> Self {
        RepRecParams {
            dim: 64,
            history_limit: 50,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RepRecNet {
    pub store: ParamId,
    pub sit: SituationEmbed,
    pub dim: usize,
    pub history_limit: usize,
}

pub type RepRec = Model<RepRecNet>;

/// Forward quantities reused by the backward pass.
struct Attention {
    mu_now: Vec<f64>,
    mu: Vec<Vec<f64>>,
    w: Vec<f64>,
    s_r: Vec<f64>,
}

impl RepRecNet {
    pub fn build(state: &mut ModelState, n_stores: usize, location_rows: usize, p: &RepRecParams) -> Result<Self> {
        if p.dim == 0 || p.history_limit == 0 {
            return Err(Error::Config("reprec dim and history_limit must be positive".into()));
        }
        Ok(RepRecNet {
            store: state.add("store", &[n_stores, p.dim], Init::Embedding)?,
            sit: SituationEmbed::new(state, location_rows, p.dim)?,
            dim: p.dim,
            history_limit: p.history_limit,
        })
    }

    fn attend(&self, p: &Params, history: &[(u32, SitIdx)], now: SitIdx) -> Result<Attention> {
        let mu_now = self.sit.vector(p, now)?;
        let table = p.get(self.store);
        let mut s_r = vec![0.0; self.dim];
        let mut mu = Vec::with_capacity(history.len());
        let mut w = Vec::with_capacity(history.len());
        for &(store, sit) in history {
            let m = self.sit.vector(p, sit)?;
            let wi = cosine(&m, &mu_now);
            axpy(wi, embed_lookup(table, self.dim, store as usize)?, &mut s_r);
            mu.push(m);
            w.push(wi);
        }
        Ok(Attention { mu_now, mu, w, s_r })
    }

    /// Scores for `candidates`, each of which must occur in `history`.
    pub fn forward(&self, p: &Params, history: &[(u32, SitIdx)], now: SitIdx, candidates: &[u32]) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Err(Error::invalid("reprec needs a non-empty history"));
        }
        if let Some(c) = candidates.iter().find(|c| !history.iter().any(|(s, _)| s == *c)) {
            return Err(Error::invalid(format!("reprec candidate {c} is not in the history")));
        }
        self.forward_unchecked(p, history, now, candidates)
    }

    fn forward_unchecked(&self, p: &Params, history: &[(u32, SitIdx)], now: SitIdx, candidates: &[u32]) -> Result<Vec<f64>> {
        let a = self.attend(p, history, now)?;
        let table = p.get(self.store);
        candidates
            .iter()
            .map(|&c| Ok(dot(embed_lookup(table, self.dim, c as usize)?, &a.s_r)))
            .collect()
    }

    /// BPR loss of `pos` over `neg`; gradients accumulated into `g`.
    pub fn bpr_step(&self, p: &Params, g: &mut Grads, history: &[(u32, SitIdx)], now: SitIdx, pos: u32, neg: u32) -> Result<f64> {
        let d = self.dim;
        let a = self.attend(p, history, now)?;
        let table = p.get(self.store);
        let ep = embed_lookup(table, d, pos as usize)?;
        let en = embed_lookup(table, d, neg as usize)?;
        let (loss, dpos) = bpr_loss(dot(ep, &a.s_r), dot(en, &a.s_r));
        let mut ds_r = vec![0.0; d];
        axpy(dpos, ep, &mut ds_r);
        axpy(-dpos, en, &mut ds_r);
        let gs = g.get(self.store);
        embed_backward(gs, d, pos as usize, &a.s_r.iter().map(|x| dpos * x).collect::<Vec<_>>())?;
        embed_backward(gs, d, neg as usize, &a.s_r.iter().map(|x| -dpos * x).collect::<Vec<_>>())?;
        let mut dmu_now = vec![0.0; d];
        for (i, &(store, sit)) in history.iter().enumerate() {
            let es = embed_lookup(table, d, store as usize)?;
            embed_backward(g.get(self.store), d, store as usize, &ds_r.iter().map(|x| a.w[i] * x).collect::<Vec<_>>())?;
            let dw = dot(es, &ds_r);
            let mut dmu = vec![0.0; d];
            cosine_backward(&a.mu[i], &a.mu_now, dw, &mut dmu, &mut dmu_now);
            self.sit.backward(g, sit, &dmu)?;
        }
        self.sit.backward(g, now, &dmu_now)?;
        Ok(loss)
    }

    fn history_of(&self, enc: &Encoded, pos: usize) -> Vec<(u32, SitIdx)> {
        enc.recent_history(pos, self.history_limit)
            .iter()
            .map(|&h| (enc.store[h], enc.sit[h]))
            .collect()
    }
}

impl Net for RepRecNet {
    /// Candidates must be among the user's prior stores; attention covers the
    /// most recent `history_limit` entries.
    fn score(&self, p: &Params, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>> {
        let prior = enc.prior_stores(pos);
        if prior.is_empty() {
            return Err(Error::invalid("reprec needs a non-empty history"));
        }
        if let Some(c) = candidates.iter().find(|c| prior.binary_search(c).is_err()) {
            return Err(Error::invalid(format!("reprec candidate {c} is not in the history")));
        }
        self.forward_unchecked(p, &self.history_of(enc, pos), enc.sit[pos], candidates)
    }

    fn supports(&self, protocol: Protocol) -> bool {
        protocol == Protocol::Repeat
    }
}

impl RepRec {
    pub const NAME: &'static str = "reprec";

    pub fn init(enc: &Encoded, params: &RepRecParams, seed: u64) -> Result<Self> {
        let mut state = ModelState::new(seed);
        let net = RepRecNet::build(&mut state, enc.n_stores(), enc.n_location_rows(), params)?;
        Ok(Model { net, state })
    }

    /// BPR on repeat train interactions, the negative drawn uniformly from the
    /// user's other prior stores; early stopping on validation repeat HR@3.
    pub fn train(enc: &Encoded, params: &RepRecParams, cfg: &TrainConfig) -> Result<(Self, FitReport)> {
        let mut m = Self::init(enc, params, cfg.seed)?;
        let instances: Vec<(usize, Vec<u32>)> = enc
            .partition_range(Partition::Train)
            .filter(|&pos| enc.repeat[pos])
            .map(|pos| (pos, enc.prior_stores(pos)))
            .filter(|(_, prior)| prior.len() >= 2)
            .collect();
        if instances.is_empty() {
            return Err(Error::invalid("reprec has no trainable instances"));
        }
        let valid = subsample_cases(
            build_cases_in(enc, Partition::Valid, Protocol::Repeat, cfg.seed)?,
            cfg.valid_cases,
            cfg.seed,
        );
        let net = m.net;
        let report = fit(
            &mut m.state,
            instances.len(),
            cfg,
            |p, g, i, rng| {
                let (pos, prior) = &instances[i];
                let target = enc.store[*pos];
                let t = prior.binary_search(&target).expect("repeat target is a prior store");
                let k = uniform_other(rng, prior.len(), t as u32);
                net.bpr_step(p, g, &net.history_of(enc, *pos), enc.sit[*pos], target, prior[k as usize])
            },
            |s| validation_hr(&net, s, enc, &valid),
        )?;
        Ok((m, report))
    }

    pub fn checkpoint(&self, enc: &Encoded) -> Checkpoint {
        let mut ck = checkpoint_with_vocab(Self::NAME, &self.state, enc);
        ck.meta.insert("dim".into(), self.net.dim.to_string());
        ck.meta.insert("history_limit".into(), self.net.history_limit.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, enc: &Encoded) -> Result<Self> {
        check_vocab(ck, Self::NAME, enc)?;
        let params = RepRecParams {
            dim: ck.meta_value("dim")?,
            history_limit: ck.meta_value("history_limit")?,
        };
        let mut m = Self::init(enc, &params, ck.meta_value("seed")?)?;
        ck.apply_to(&mut m.state)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_difference_check;

    fn net(dim: usize, seed: u64) -> (ModelState, RepRecNet) {
        let mut s = ModelState::new(seed);
        let n = RepRecNet::build(&mut s, 6, 3, &RepRecParams { dim, history_limit: 50 }).unwrap();
        (s, n)
    }

    fn sit(hour: u8, dow: u8, loc: u32) -> SitIdx {
        SitIdx { hour, dow, loc }
    }

    #[test]
    fn single_identical_entry_scores_squared_norm() {
        let (s, n) = net(4, 1);
        let p = s.params();
        let now = sit(12, 3, 1);
        let got = n.forward(&p, &[(2, now)], now, &[2]).unwrap();
        let e = &p.get(n.store)[8..12];
        assert!((got[0] - dot(e, e)).abs() < 1e-12);
    }

    #[test]
    fn duplicated_history_doubles_and_permutation_is_irrelevant() {
        let (s, n) = net(4, 2);
        let p = s.params();
        let h = vec![(0, sit(8, 0, 0)), (1, sit(19, 4, 1)), (0, sit(12, 6, 2))];
        let now = sit(9, 1, 0);
        let base = n.forward(&p, &h, now, &[0, 1]).unwrap();
        let doubled: Vec<_> = h.iter().chain(h.iter()).copied().collect();
        let d = n.forward(&p, &doubled, now, &[0, 1]).unwrap();
        for (a, b) in base.iter().zip(&d) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        let mut rev = h.clone();
        rev.reverse();
        for (a, b) in base.iter().zip(n.forward(&p, &rev, now, &[0, 1]).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_situation_tables_leaves_scores_unchanged() {
        let (mut s, n) = net(4, 3);
        let h = vec![(0, sit(8, 0, 0)), (1, sit(19, 4, 1))];
        let now = sit(9, 1, 2);
        let before = n.forward(&s.params(), &h, now, &[0, 1]).unwrap();
        for id in [n.sit.hour, n.sit.dow, n.sit.loc] {
            s.tensor_mut(id).values.iter_mut().for_each(|v| *v *= 3.5);
        }
        let after = n.forward(&s.params(), &h, now, &[0, 1]).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_brute_force_on_hand_set_embeddings() {
        let (mut s, n) = net(2, 4);
        for id in [n.sit.hour, n.sit.dow, n.sit.loc, n.store] {
            s.tensor_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
        }
        // hour rows give the situation direction; dow/loc stay zero.
        let hour = s.tensor_mut(n.sit.hour);
        hour.values[8 * 2..8 * 2 + 2].copy_from_slice(&[1.0, 0.0]);
        hour.values[12 * 2..12 * 2 + 2].copy_from_slice(&[1.0, 1.0]);
        hour.values[20 * 2..20 * 2 + 2].copy_from_slice(&[0.0, -2.0]);
        let store = s.tensor_mut(n.store);
        store.values[0..2].copy_from_slice(&[1.0, 2.0]);
        store.values[2..4].copy_from_slice(&[-1.0, 0.5]);
        store.values[4..6].copy_from_slice(&[0.0, 3.0]);
        let h = vec![(0, sit(8, 0, 0)), (1, sit(20, 0, 0)), (2, sit(12, 0, 0))];
        let now = sit(12, 0, 0);
        let got = n.forward(&s.params(), &h, now, &[0, 1, 2]).unwrap();
        let r = 0.5f64.sqrt();
        let w = [r, -r, 1.0];
        let st = [[1.0, 2.0], [-1.0, 0.5], [0.0, 3.0]];
        let s_r = [
            w[0] * st[0][0] + w[1] * st[1][0] + w[2] * st[2][0],
            w[0] * st[0][1] + w[1] * st[1][1] + w[2] * st[2][1],
        ];
        for c in 0..3 {
            let want = st[c][0] * s_r[0] + st[c][1] * s_r[1];
            assert!((got[c] - want).abs() < 1e-9, "{c}: {} vs {want}", got[c]);
        }
    }

    #[test]
    fn zero_norm_situation_has_zero_weight() {
        let (mut s, n) = net(2, 5);
        for id in [n.sit.hour, n.sit.dow, n.sit.loc] {
            s.tensor_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
        }
        let got = n.forward(&s.params(), &[(0, sit(1, 1, 1))], sit(2, 2, 2), &[0]).unwrap();
        assert_eq!(got, vec![0.0]);
    }

    #[test]
    fn candidate_and_history_preconditions() {
        let (s, n) = net(2, 6);
        let p = s.params();
        assert!(n.forward(&p, &[], sit(1, 1, 1), &[0]).is_err());
        assert!(n.forward(&p, &[(0, sit(1, 1, 1))], sit(1, 1, 1), &[3]).is_err());
    }

    #[test]
    fn full_loss_gradient_on_five_interactions() {
        let (mut s, n) = net(4, 7);
        let h = vec![
            (0, sit(8, 0, 0)),
            (1, sit(19, 4, 1)),
            (0, sit(12, 6, 2)),
            (2, sit(13, 2, 1)),
            (3, sit(7, 5, 0)),
        ];
        let now = sit(9, 1, 2);
        let err = finite_difference_check(
            &mut s,
            |s| {
                let sc = n.forward(&s.params(), &h, now, &[1, 2])?;
                Ok(bpr_loss(sc[0], sc[1]).0)
            },
            |s| {
                let (p, mut g) = s.split();
                n.bpr_step(&p, &mut g, &h, now, 1, 2)
            },
            1e-5,
            300,
            9,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
