//! HisPop (situation-weighted history frequency) and SOnly (situation-only
//! matrix factorization).

use rand::Rng;

use crate::dataio::Partition;
use crate::diffcore::{axpy, bpr_loss, dot, embed_backward, embed_lookup, Checkpoint, Grads, Init, ModelState, ParamId, Params};
use crate::error::{Error, Result};
use crate::evalharness::{build_cases_in, subsample_cases, Protocol, Scorer};
use crate::features::{Encoded, SitIdx, SituationEmbed};
use crate::situsim::SituationKey;
use crate::training::{check_vocab, checkpoint_with_vocab, fit, validation_hr, FitReport, Model, Net, TrainConfig};

/// `score(s) = Σ sim(now, entry)` over history entries of store `s`.
/// Every candidate must occur in `history`.
pub fn hispop_score(history: &[(u32, SituationKey)], now: &SituationKey, candidates: &[u32]) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|&c| {
            let mut found = false;
            let mut s = 0.0;
            for (store, key) in history {
                if *store == c {
                    found = true;
                    s += now.similarity(key);
                }
            }
            if found {
                Ok(s)
            } else {
                Err(Error::invalid(format!("hispop candidate {c} is not in the history")))
            }
        })
        .collect()
}

/// Training-free repeat scorer over the user's full prior history.
#[derive(Debug, Clone, Copy, Default)]
pub struct HisPop;

impl Scorer for HisPop {
    fn score(&self, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>> {
        let history: Vec<(u32, SituationKey)> = enc.history(pos).iter().map(|&h| (enc.store[h], enc.key[h])).collect();
        hispop_score(&history, &enc.key[pos], candidates)
    }

    fn supports(&self, protocol: Protocol) -> bool {
        protocol == Protocol::Repeat
    }
}

/// Store embeddings scored against a summed situation embedding.
#[derive(Debug, Clone, Copy)]
pub struct SOnlyNet {
    pub store: ParamId,
    pub sit: SituationEmbed,
    pub dim: usize,
}

pub type SOnly = Model<SOnlyNet>;

impl SOnlyNet {
    pub fn build(state: &mut ModelState, n_stores: usize, location_rows: usize, dim: usize) -> Result<Self> {
        Ok(SOnlyNet {
            store: state.add("store", &[n_stores, dim], Init::Embedding)?,
            sit: SituationEmbed::new(state, location_rows, dim)?,
            dim,
        })
    }

    /// Dot products of the situation vector with each candidate embedding.
    pub fn score_situation(&self, p: &Params, now: SitIdx, candidates: &[u32]) -> Result<Vec<f64>> {
        let v = self.sit.vector(p, now)?;
        let table = p.get(self.store);
        candidates
            .iter()
            .map(|&c| Ok(dot(embed_lookup(table, self.dim, c as usize)?, &v)))
            .collect()
    }

    /// BPR loss for one (situation, positive, negative) triple; gradients accumulated.
    pub fn bpr_step(&self, p: &Params, g: &mut Grads, now: SitIdx, pos: u32, neg: u32) -> Result<f64> {
        let d = self.dim;
        let v = self.sit.vector(p, now)?;
        let table = p.get(self.store);
        let ep = embed_lookup(table, d, pos as usize)?;
        let en = embed_lookup(table, d, neg as usize)?;
        let (loss, dpos) = bpr_loss(dot(ep, &v), dot(en, &v));
        let gs = g.get(self.store);
        embed_backward(gs, d, pos as usize, &v.iter().map(|x| dpos * x).collect::<Vec<_>>())?;
        embed_backward(gs, d, neg as usize, &v.iter().map(|x| -dpos * x).collect::<Vec<_>>())?;
        let mut dv = vec![0.0; d];
        axpy(dpos, ep, &mut dv);
        axpy(-dpos, en, &mut dv);
        self.sit.backward(g, now, &dv)?;
        Ok(loss)
    }
}

impl Net for SOnlyNet {
    fn score(&self, p: &Params, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>> {
        self.score_situation(p, enc.sit[pos], candidates)
    }
}

/// Uniform draw from `0..n` other than `exclude`.
pub(crate) fn uniform_other<R: Rng>(rng: &mut R, n: usize, exclude: u32) -> u32 {
    loop {
        let s = rng.gen_range(0..n as u32);
        if s != exclude {
            return s;
        }
    }
}

impl SOnly {
    pub const NAME: &'static str = "sonly";

    pub fn init(enc: &Encoded, dim: usize, seed: u64) -> Result<Self> {
        let mut state = ModelState::new(seed);
        let net = SOnlyNet::build(&mut state, enc.n_stores(), enc.n_location_rows(), dim)?;
        Ok(Model { net, state })
    }

    /// BPR over every train interaction with a uniform negative from the
    /// catalog; early stopping on validation exploration HR@3.
    pub fn train(enc: &Encoded, dim: usize, cfg: &TrainConfig) -> Result<(Self, FitReport)> {
        if enc.n_stores() < 2 {
            return Err(Error::invalid("sonly needs at least two stores"));
        }
        let mut m = Self::init(enc, dim, cfg.seed)?;
        let instances: Vec<usize> = enc.partition_range(Partition::Train).collect();
        let valid = subsample_cases(
            build_cases_in(enc, Partition::Valid, Protocol::Exploration, cfg.seed)?,
            cfg.valid_cases,
            cfg.seed,
        );
        let net = m.net;
        let n_stores = enc.n_stores();
        let report = fit(
            &mut m.state,
            instances.len(),
            cfg,
            |p, g, i, rng| {
                let pos = instances[i];
                let target = enc.store[pos];
                net.bpr_step(p, g, enc.sit[pos], target, uniform_other(rng, n_stores, target))
            },
            |s| validation_hr(&net, s, enc, &valid),
        )?;
        Ok((m, report))
    }

    pub fn checkpoint(&self, enc: &Encoded) -> Checkpoint {
        let mut ck = checkpoint_with_vocab(Self::NAME, &self.state, enc);
        ck.meta.insert("dim".into(), self.net.dim.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, enc: &Encoded) -> Result<Self> {
        check_vocab(ck, Self::NAME, enc)?;
        let mut m = Self::init(enc, ck.meta_value("dim")?, ck.meta_value("seed")?)?;
        ck.apply_to(&mut m.state)?;
        Ok(m)
    }
}
