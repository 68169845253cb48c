//! ExpRec: exploration recommendation over unvisited stores.
//!
//! Four triggers are built for the current situation `e_μ`:
//! the situation itself, a GRU encoding of recent history `e_h`, the user
//! embedding conditioned on the situation `e_{u|μ}`, and a similarity-weighted
//! sum of conditioned collaborative-user embeddings `e_{cu|μ}`.
//!
//! Conditioning: `a = softmax(Θ^μ e_μ + β^μ)`, `e_{u|μ} = Σ_j a_j A_j(e_u)`
//! with activations (identity, tanh, sigmoid, relu).
//! Fusion: `w = softmax(Θ^e (e_μ ⊕ e_{u|μ}) + β^e)` over the triggers that are
//! not ablated, `s_e = Σ_k w_k T_k`, and `score(c) = s_e · s_c`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Partition;
use crate::diffcore::{
    axpy, bpr_loss, dot, embed_backward, embed_lookup, softmax, softmax_backward, Activation, Checkpoint, Dense, Grads, Gru, GruTrace, Init, ModelState,
    ParamId, Params,
};
use crate::error::{Error, Result};
use crate::evalharness::{build_cases_in, subsample_cases, Protocol};
use crate::features::{Encoded, SitIdx, SituationEmbed};
use crate::situsim::PreferenceIndex;
use crate::training::{check_vocab, checkpoint_with_vocab, fit, validation_hr, FitReport, Model, Net, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trigger {
    Situation,
    History,
    User,
    Collab,
}

impl Trigger {
    pub const ALL: [Trigger; 4] = [Trigger::Situation, Trigger::History, Trigger::User, Trigger::Collab];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Trigger::Situation => "situation",
            Trigger::History => "history",
            Trigger::User => "user",
            Trigger::Collab => "collab",
        }
    }
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Trigger {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Trigger::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown trigger {s:?}; expected situation, history, user or collab")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpRecParams {
    pub dim: usize,
    /// Most recent history entries fed to the GRU.
    pub history_limit: usize,
    /// Collaborative users per user.
    pub neighbors: usize,
    /// Triggers removed from the fusion softmax.
    pub ablate: Vec<Trigger>,
}

impl Default for ExpRecParams {
    fn default() -> Self {
        ExpRecParams {
            dim: 64,
            history_limit: 20,
            neighbors: 10,
            ablate: Vec::new(),
        }
    }
}

impl ExpRecParams {
    /// Per-trigger mask, `true` meaning ablated.
    pub fn mask(&self) -> Result<[bool; 4]> {
        if self.dim == 0 || self.history_limit == 0 {
            return Err(Error::Config("exprec dim and history_limit must be positive".into()));
        }
        let mut m = [false; 4];
        for t in &self.ablate {
            m[t.index()] = true;
        }
        if m.iter().all(|&x| x) {
            return Err(Error::Config("exprec cannot ablate all four triggers".into()));
        }
        Ok(m)
    }
}

/// `max(sim, 0)` normalized to sum 1; uniform when no similarity is positive.
pub fn collab_weights(sims: &[f64]) -> Vec<f64> {
    let pos: Vec<f64> = sims.iter().map(|s| s.max(0.0)).collect();
    let total: f64 = pos.iter().sum();
    if total > 0.0 {
        pos.into_iter().map(|s| s / total).collect()
    } else {
        vec![1.0 / sims.len() as f64; sims.len()]
    }
}

/// Element-wise `Σ_j a_j A_j(x)`.
fn mix(a: &[f64], x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| Activation::ALL.iter().zip(a).map(|(f, aj)| aj * f.apply(v)).sum())
        .collect()
}

fn mix_backward(a: &[f64], x: &[f64], dout: &[f64], dx: &mut [f64], da: &mut [f64]) {
    for i in 0..x.len() {
        for (j, f) in Activation::ALL.iter().enumerate() {
            dx[i] += a[j] * f.derivative(x[i]) * dout[i];
            da[j] += f.apply(x[i]) * dout[i];
        }
    }
}

/// Softmax over the unmasked entries; masked entries get weight 0.
fn masked_softmax(z: &[f64], masked: &[bool; 4]) -> Vec<f64> {
    let live: Vec<usize> = (0..4).filter(|&k| !masked[k]).collect();
    let y = softmax(&live.iter().map(|&k| z[k]).collect::<Vec<_>>());
    let mut w = vec![0.0; 4];
    for (&k, v) in live.iter().zip(y) {
        w[k] = v;
    }
    w
}

fn masked_softmax_backward(w: &[f64], dw: &[f64], masked: &[bool; 4], dz: &mut [f64]) {
    let live: Vec<usize> = (0..4).filter(|&k| !masked[k]).collect();
    let y: Vec<f64> = live.iter().map(|&k| w[k]).collect();
    let dy: Vec<f64> = live.iter().map(|&k| dw[k]).collect();
    let mut d = vec![0.0; live.len()];
    softmax_backward(&y, &dy, &mut d);
    for (&k, v) in live.iter().zip(d) {
        dz[k] += v;
    }
}

#[derive(Debug, Clone)]
pub struct ExpRecNet {
    pub store: ParamId,
    pub user: ParamId,
    pub sit: SituationEmbed,
    pub gru: Gru,
    /// Θ^μ, β^μ: situation to activation logits.
    pub cond: Dense,
    /// Θ^e, β^e: situation and conditioned user to trigger logits.
    pub fusion: Dense,
    pub dim: usize,
    pub history_limit: usize,
    pub masked: [bool; 4],
    /// Frozen collaborative users of every user as `(user, similarity)`.
    pub neighbors: Vec<Vec<(u32, f64)>>,
}

pub type ExpRec = Model<ExpRecNet>;

/// Forward quantities reused by the backward pass.
pub struct Pass {
    e_mu: Vec<f64>,
    trace: Option<GruTrace>,
    a: Vec<f64>,
    e_user: Vec<f64>,
    nb_weights: Vec<f64>,
    fusion_in: Vec<f64>,
    /// Situation, history, user and collaborative triggers.
    pub triggers: [Vec<f64>; 4],
    pub weights: Vec<f64>,
    pub s_e: Vec<f64>,
}

impl ExpRecNet {
    pub fn build(state: &mut ModelState, n_users: usize, n_stores: usize, location_rows: usize, p: &ExpRecParams) -> Result<Self> {
        let masked = p.mask()?;
        let d = p.dim;
        Ok(ExpRecNet {
            store: state.add("store", &[n_stores, d], Init::Embedding)?,
            user: state.add("user", &[n_users, d], Init::Embedding)?,
            sit: SituationEmbed::new(state, location_rows, d)?,
            gru: Gru::new(state, "gru", 2 * d, d)?,
            cond: Dense::new(state, "cond", Activation::ALL.len(), d)?,
            fusion: Dense::new(state, "fusion", 4, 2 * d)?,
            dim: d,
            history_limit: p.history_limit,
            masked,
            neighbors: vec![Vec::new(); n_users],
        })
    }

    fn activation_weights(&self, p: &Params, e_mu: &[f64]) -> Result<Vec<f64>> {
        let mut z = vec![0.0; Activation::ALL.len()];
        self.cond.forward(p, e_mu, &mut z)?;
        Ok(softmax(&z))
    }

    /// Conditional user encoder applied to `user_vec` under `sit_vec`.
    pub fn condition_user(&self, p: &Params, user_vec: &[f64], sit_vec: &[f64]) -> Result<Vec<f64>> {
        if user_vec.len() != self.dim {
            return Err(Error::Shape(format!("user vector has {} entries, expected {}", user_vec.len(), self.dim)));
        }
        Ok(mix(&self.activation_weights(p, sit_vec)?, user_vec))
    }

    /// Weighted sum of conditioned neighbor embeddings; zero without neighbors.
    pub fn collaborative_embedding(&self, p: &Params, neighbors: &[(u32, f64)], sit_vec: &[f64]) -> Result<Vec<f64>> {
        let a = self.activation_weights(p, sit_vec)?;
        let sims: Vec<f64> = neighbors.iter().map(|n| n.1).collect();
        let mut out = vec![0.0; self.dim];
        for (&(v, _), w) in neighbors.iter().zip(collab_weights(&sims)) {
            axpy(w, &mix(&a, embed_lookup(p.get(self.user), self.dim, v as usize)?), &mut out);
        }
        Ok(out)
    }

    /// GRU over the last `history_limit` entries of `(store, situation)` inputs.
    pub fn encode_history(&self, p: &Params, history: &[(u32, SitIdx)]) -> Result<Vec<f64>> {
        let xs = self.history_inputs(p, history)?;
        Ok(self.gru.run(p, &xs)?.output().to_vec())
    }

    fn recent<'h>(&self, history: &'h [(u32, SitIdx)]) -> &'h [(u32, SitIdx)] {
        &history[history.len().saturating_sub(self.history_limit)..]
    }

    fn history_inputs(&self, p: &Params, history: &[(u32, SitIdx)]) -> Result<Vec<Vec<f64>>> {
        self.recent(history)
            .iter()
            .map(|&(s, sit)| {
                let mut x = embed_lookup(p.get(self.store), self.dim, s as usize)?.to_vec();
                x.extend(self.sit.vector(p, sit)?);
                Ok(x)
            })
            .collect()
    }

    /// Fusion weights and fused vector for `e_mu`, `e_{u|μ}` and the triggers.
    pub fn fuse(&self, p: &Params, e_mu: &[f64], e_u_mu: &[f64], triggers: &[Vec<f64>; 4]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut x = e_mu.to_vec();
        x.extend_from_slice(e_u_mu);
        let mut z = vec![0.0; 4];
        self.fusion.forward(p, &x, &mut z)?;
        let w = masked_softmax(&z, &self.masked);
        let mut s_e = vec![0.0; self.dim];
        for k in 0..4 {
            if !self.masked[k] {
                axpy(w[k], &triggers[k], &mut s_e);
            }
        }
        Ok((w, s_e))
    }

    /// Every trigger and the fused vector for one user and situation.
    pub fn pass(&self, p: &Params, user: u32, history: &[(u32, SitIdx)], now: SitIdx, neighbors: &[(u32, f64)]) -> Result<Pass> {
        let d = self.dim;
        let e_mu = self.sit.vector(p, now)?;
        let (trace, e_h) = if self.masked[Trigger::History.index()] {
            (None, vec![0.0; d])
        } else {
            let xs = self.history_inputs(p, history)?;
            let tr = self.gru.run(p, &xs)?;
            let h = tr.output().to_vec();
            (Some(tr), h)
        };
        let a = self.activation_weights(p, &e_mu)?;
        let e_user = embed_lookup(p.get(self.user), d, user as usize)?.to_vec();
        let e_u_mu = mix(&a, &e_user);
        let (nb_weights, e_cu) = if self.masked[Trigger::Collab.index()] {
            (Vec::new(), vec![0.0; d])
        } else {
            let sims: Vec<f64> = neighbors.iter().map(|n| n.1).collect();
            let w = collab_weights(&sims);
            let mut out = vec![0.0; d];
            for (&(v, _), &wn) in neighbors.iter().zip(&w) {
                axpy(wn, &mix(&a, embed_lookup(p.get(self.user), d, v as usize)?), &mut out);
            }
            (w, out)
        };
        let triggers = [e_mu.clone(), e_h, e_u_mu, e_cu];
        let (weights, s_e) = self.fuse(p, &e_mu, &triggers[2], &triggers)?;
        let mut fusion_in = e_mu.clone();
        fusion_in.extend_from_slice(&triggers[2]);
        Ok(Pass {
            e_mu,
            trace,
            a,
            e_user,
            nb_weights,
            fusion_in,
            triggers,
            weights,
            s_e,
        })
    }

    /// Backpropagate `ds_e` through a [`Pass`] into `g`.
    #[allow(clippy::too_many_arguments)]
    fn backward(&self, p: &Params, g: &mut Grads, ps: &Pass, user: u32, history: &[(u32, SitIdx)], now: SitIdx, neighbors: &[(u32, f64)], ds_e: &[f64]) -> Result<()> {
        let d = self.dim;
        let mut dw = vec![0.0; 4];
        for k in 0..4 {
            if !self.masked[k] {
                dw[k] = dot(&ps.triggers[k], ds_e);
            }
        }
        let mut dz = vec![0.0; 4];
        masked_softmax_backward(&ps.weights, &dw, &self.masked, &mut dz);
        let mut dx = vec![0.0; 2 * d];
        self.fusion.backward(p, g, &ps.fusion_in, &dz, Some(&mut dx));
        let mut de_mu = dx[..d].to_vec();
        let mut de_umu = dx[d..].to_vec();
        axpy(ps.weights[0], ds_e, &mut de_mu);
        axpy(ps.weights[2], ds_e, &mut de_umu);

        if let Some(tr) = &ps.trace {
            let dh: Vec<f64> = ds_e.iter().map(|x| ps.weights[1] * x).collect();
            let dxs = self.gru.backward(p, g, tr, &dh);
            for (&(s, sit), dxt) in self.recent(history).iter().zip(&dxs) {
                embed_backward(g.get(self.store), d, s as usize, &dxt[..d])?;
                self.sit.backward(g, sit, &dxt[d..])?;
            }
        }

        let mut da = vec![0.0; Activation::ALL.len()];
        let mut du = vec![0.0; d];
        mix_backward(&ps.a, &ps.e_user, &de_umu, &mut du, &mut da);
        embed_backward(g.get(self.user), d, user as usize, &du)?;
        if !self.masked[Trigger::Collab.index()] {
            for (&(v, _), &wn) in neighbors.iter().zip(&ps.nb_weights) {
                let dout: Vec<f64> = ds_e.iter().map(|x| wn * ps.weights[3] * x).collect();
                let ev = embed_lookup(p.get(self.user), d, v as usize)?;
                let mut dv = vec![0.0; d];
                mix_backward(&ps.a, ev, &dout, &mut dv, &mut da);
                embed_backward(g.get(self.user), d, v as usize, &dv)?;
            }
        }
        let mut dzc = vec![0.0; Activation::ALL.len()];
        softmax_backward(&ps.a, &da, &mut dzc);
        self.cond.backward(p, g, &ps.e_mu, &dzc, Some(&mut de_mu));
        self.sit.backward(g, now, &de_mu)
    }

    /// Scores of `candidates`, none of which may occur in `history`.
    pub fn forward(&self, p: &Params, user: u32, history: &[(u32, SitIdx)], now: SitIdx, neighbors: &[(u32, f64)], candidates: &[u32]) -> Result<Vec<f64>> {
        if let Some(c) = candidates.iter().find(|c| history.iter().any(|(s, _)| s == *c)) {
            return Err(Error::invalid(format!("exprec candidate {c} is in the history")));
        }
        self.score_unchecked(p, user, history, now, neighbors, candidates)
    }

    fn score_unchecked(&self, p: &Params, user: u32, history: &[(u32, SitIdx)], now: SitIdx, neighbors: &[(u32, f64)], candidates: &[u32]) -> Result<Vec<f64>> {
        let ps = self.pass(p, user, history, now, neighbors)?;
        let table = p.get(self.store);
        candidates
            .iter()
            .map(|&c| Ok(dot(embed_lookup(table, self.dim, c as usize)?, &ps.s_e)))
            .collect()
    }

    /// BPR loss of `pos` over `neg`; gradients accumulated into `g`.
    #[allow(clippy::too_many_arguments)]
    pub fn bpr_step(&self, p: &Params, g: &mut Grads, user: u32, history: &[(u32, SitIdx)], now: SitIdx, neighbors: &[(u32, f64)], pos: u32, neg: u32) -> Result<f64> {
        let d = self.dim;
        let ps = self.pass(p, user, history, now, neighbors)?;
        let table = p.get(self.store);
        let ep = embed_lookup(table, d, pos as usize)?;
        let en = embed_lookup(table, d, neg as usize)?;
        let (loss, dpos) = bpr_loss(dot(ep, &ps.s_e), dot(en, &ps.s_e));
        let mut ds_e = vec![0.0; d];
        axpy(dpos, ep, &mut ds_e);
        axpy(-dpos, en, &mut ds_e);
        let gs = g.get(self.store);
        embed_backward(gs, d, pos as usize, &ps.s_e.iter().map(|x| dpos * x).collect::<Vec<_>>())?;
        embed_backward(gs, d, neg as usize, &ps.s_e.iter().map(|x| -dpos * x).collect::<Vec<_>>())?;
        self.backward(p, g, &ps, user, history, now, neighbors, &ds_e)?;
        Ok(loss)
    }

    fn history_of(&self, enc: &Encoded, pos: usize) -> Vec<(u32, SitIdx)> {
        enc.recent_history(pos, self.history_limit)
            .iter()
            .map(|&h| (enc.store[h], enc.sit[h]))
            .collect()
    }

    fn neighbors_of(&self, user: u32) -> &[(u32, f64)] {
        self.neighbors.get(user as usize).map_or(&[], Vec::as_slice)
    }
}

impl Net for ExpRecNet {
    /// Candidates must all be stores the user has not visited before `pos`.
    fn score(&self, p: &Params, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>> {
        let prior = enc.prior_stores(pos);
        if let Some(c) = candidates.iter().find(|c| prior.binary_search(c).is_ok()) {
            return Err(Error::invalid(format!("exprec candidate {c} is in the history")));
        }
        let user = enc.user[pos];
        self.score_unchecked(p, user, &self.history_of(enc, pos), enc.sit[pos], self.neighbors_of(user), candidates)
    }

    fn supports(&self, protocol: Protocol) -> bool {
        protocol == Protocol::Exploration
    }
}

/// Collaborative users of every user from the train partition alone.
pub fn train_neighbors(enc: &Encoded, k: usize) -> Vec<Vec<(u32, f64)>> {
    let mut idx = PreferenceIndex::new(enc.n_users(), enc.n_stores());
    for pos in enc.partition_range(Partition::Train) {
        idx.add(enc.user[pos], enc.store[pos]);
    }
    (0..enc.n_users() as u32)
        .into_par_iter()
        .map_init(|| idx.scratch(), |scratch, u| idx.neighbors(u, k, scratch))
        .collect()
}

impl ExpRec {
    pub const NAME: &'static str = "exprec";

    pub fn init(enc: &Encoded, params: &ExpRecParams, seed: u64) -> Result<Self> {
        let mut state = ModelState::new(seed);
        let mut net = ExpRecNet::build(&mut state, enc.n_users(), enc.n_stores(), enc.n_location_rows(), params)?;
        net.neighbors = train_neighbors(enc, params.neighbors);
        Ok(Model { net, state })
    }

    pub fn params(&self) -> ExpRecParams {
        ExpRecParams {
            dim: self.net.dim,
            history_limit: self.net.history_limit,
            neighbors: self.net.neighbors.iter().map(Vec::len).max().unwrap_or(0),
            ablate: Trigger::ALL.into_iter().filter(|t| self.net.masked[t.index()]).collect(),
        }
    }

    /// BPR on exploration train interactions with a negative drawn uniformly
    /// from stores the user has not visited; early stopping on validation
    /// exploration HR@3.
    pub fn train(enc: &Encoded, params: &ExpRecParams, cfg: &TrainConfig) -> Result<(Self, FitReport)> {
        let mut m = Self::init(enc, params, cfg.seed)?;
        let n_stores = enc.n_stores();
        let instances: Vec<usize> = enc
            .partition_range(Partition::Train)
            .filter(|&pos| !enc.repeat[pos] && n_stores >= enc.prior_stores(pos).len() + 2)
            .collect();
        if instances.is_empty() {
            return Err(Error::invalid("exprec has no exploration instances in train"));
        }
        let valid = subsample_cases(
            build_cases_in(enc, Partition::Valid, Protocol::Exploration, cfg.seed)?,
            cfg.valid_cases,
            cfg.seed,
        );
        let net = &m.net;
        let report = fit(
            &mut m.state,
            instances.len(),
            cfg,
            |p, g, i, rng| {
                let pos = instances[i];
                let target = enc.store[pos];
                let prior = enc.prior_stores(pos);
                let neg = loop {
                    let s = rng.gen_range(0..n_stores as u32);
                    if s != target && prior.binary_search(&s).is_err() {
                        break s;
                    }
                };
                let user = enc.user[pos];
                net.bpr_step(p, g, user, &net.history_of(enc, pos), enc.sit[pos], net.neighbors_of(user), target, neg)
            },
            |s| validation_hr(net, s, enc, &valid),
        )?;
        Ok((m, report))
    }

    pub fn checkpoint(&self, enc: &Encoded) -> Checkpoint {
        let mut ck = checkpoint_with_vocab(Self::NAME, &self.state, enc);
        let p = self.params();
        ck.meta.insert("dim".into(), p.dim.to_string());
        ck.meta.insert("history_limit".into(), p.history_limit.to_string());
        ck.meta.insert("neighbors".into(), p.neighbors.to_string());
        let ablate: Vec<&str> = p.ablate.iter().map(|t| t.name()).collect();
        ck.meta.insert("ablate".into(), if ablate.is_empty() { "none".into() } else { ablate.join(",") });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, enc: &Encoded) -> Result<Self> {
        check_vocab(ck, Self::NAME, enc)?;
        let ablate = match ck.meta.get("ablate").map(String::as_str) {
            None | Some("none") => Vec::new(),
            Some(s) => s.split(',').map(str::parse).collect::<Result<_>>()?,
        };
        let params = ExpRecParams {
            dim: ck.meta_value("dim")?,
            history_limit: ck.meta_value("history_limit")?,
            neighbors: ck.meta_value("neighbors")?,
            ablate,
        };
        let mut m = Self::init(enc, &params, ck.meta_value("seed")?)?;
        ck.apply_to(&mut m.state)?;
        Ok(m)
    }
}
