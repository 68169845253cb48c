//! Intent-aware ensemble of the repeat and exploration recommenders.
//!
//! An intent predictor estimates `(repeat_prob, explore_prob)` from the user's
//! past repeat flags, the situation and the user. Each candidate is the pair
//! (min-max normalized base score, origin flag). The pairs are lifted to
//! `attn_dim`, pass one self-attention layer over all candidates, then one
//! cross-attention layer whose keys and values come from two intent tokens
//! `repeat_prob · e_r` and `explore_prob · e_e`, and a projection with a
//! sigmoid gives a weight `w_i`. The final score is `w_i · p̂_i`.
//!
//! The lift is affine in `x̃ = (score, flag, 1)`, so self-attention logits are
//! the bilinear form `x̃_i^T M x̃_j` with `M = (W_q L̃)^T (W_k L̃) / √attn_dim`,
//! and attention outputs are `W_v L̃` applied to averages of `x̃_j`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Partition;
use crate::diffcore::{
    axpy, bpr_loss, dot, embed_backward, embed_lookup, sigmoid, softmax, softmax_backward, Checkpoint, Dense, Grads, Gru, GruTrace, Init, ModelState, ParamId,
    Params,
};
use crate::error::{Error, Result};
use crate::evalharness::{build_case, build_cases_in, subsample_cases, Protocol, Scorer};
use crate::exprec::ExpRec;
use crate::features::{Encoded, SitIdx, SituationEmbed};
use crate::reprec::RepRec;
use crate::training::{check_vocab, checkpoint_with_vocab, fit, FitReport, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleParams {
    /// Embedding and GRU size of the intent predictor.
    pub dim: usize,
    pub attn_dim: usize,
    /// Most recent repeat flags fed to the intent GRU.
    pub history_limit: usize,
    /// Weight of the intent cross-entropy in the second stage.
    pub intent_weight: f64,
    /// Most recent train interactions used per stage; 0 uses all of them.
    pub max_train_instances: usize,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        EnsembleParams {
            dim: 64,
            attn_dim: 32,
            history_limit: 20,
            intent_weight: 1.0,
            max_train_instances: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntentEstimate {
    pub repeat_prob: f64,
    pub explore_prob: f64,
}

/// Min-max scaling to `[0, 1]`; a constant slate maps to 0.5.
pub fn normalize_slate(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot normalize an empty slate"));
    }
    if let Some(x) = scores.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("slate score {x}")));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.5; scores.len()]);
    }
    Ok(scores.iter().map(|x| (x - lo) / (hi - lo)).collect())
}

/// Ensembled slate: repeat candidates first, then exploration candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedSlate {
    pub repeat: Vec<u32>,
    pub exploration: Vec<u32>,
    /// Normalized base scores `p̂`, in slate order.
    pub base: Vec<f64>,
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
}

/// `r×c` row-major times `x`.
fn matvec(a: &[f64], c: usize, x: &[f64]) -> Vec<f64> {
    a.chunks_exact(c).map(|row| dot(row, x)).collect()
}

/// Transposed product `aᵀ y` for `a` of `y.len()×c`.
fn matvec_t(a: &[f64], c: usize, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for (row, &v) in a.chunks_exact(c).zip(y) {
        axpy(v, row, &mut out);
    }
    out
}

/// `a (r×k) b (k×c)`.
fn matmul(a: &[f64], b: &[f64], k: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() / k * c);
    for row in a.chunks_exact(k) {
        let mut o = vec![0.0; c];
        for (j, &v) in row.iter().enumerate() {
            axpy(v, &b[j * c..(j + 1) * c], &mut o);
        }
        out.extend(o);
    }
    out
}

/// `out += x yᵀ`.
fn outer_add(out: &mut [f64], x: &[f64], y: &[f64]) {
    for (row, &v) in out.chunks_exact_mut(y.len()).zip(x) {
        axpy(v, y, row);
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleNet {
    pub flag: ParamId,
    pub intent_gru: Gru,
    pub sit: SituationEmbed,
    pub user: ParamId,
    pub head: Dense,
    pub lift: Dense,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// Rows `e_r` and `e_e`.
    pub tokens: ParamId,
    pub cq: ParamId,
    pub ck: ParamId,
    pub cv: ParamId,
    pub proj: Dense,
    pub dim: usize,
    pub attn_dim: usize,
    pub history_limit: usize,
}

pub struct IntentPass {
    flags: Vec<usize>,
    trace: GruTrace,
    user: u32,
    now: SitIdx,
    x: Vec<f64>,
    pub probs: Vec<f64>,
}

impl IntentPass {
    pub fn estimate(&self) -> IntentEstimate {
        IntentEstimate {
            repeat_prob: self.probs[0],
            explore_prob: self.probs[1],
        }
    }
}

/// Shared matrices of one attention evaluation.
struct Mats {
    /// `L̃ = [lift.w | lift.b]`, `attn_dim×3`.
    lt: Vec<f64>,
    qt: Vec<f64>,
    kt: Vec<f64>,
    vt: Vec<f64>,
    /// `3×3`, scaled.
    m: Vec<f64>,
    tokens: [Vec<f64>; 2],
    kc: [Vec<f64>; 2],
    vc: [Vec<f64>; 2],
}

struct Row {
    i: usize,
    alpha: Vec<f64>,
    mbar: Vec<f64>,
    h: Vec<f64>,
    qc: Vec<f64>,
    beta: Vec<f64>,
    z: Vec<f64>,
    w: f64,
}

impl EnsembleNet {
    pub fn build(state: &mut ModelState, n_users: usize, location_rows: usize, p: &EnsembleParams) -> Result<Self> {
        if p.dim == 0 || p.attn_dim == 0 || p.history_limit == 0 {
            return Err(Error::Config("ensemble dim, attn_dim and history_limit must be positive".into()));
        }
        if !(p.intent_weight >= 0.0 && p.intent_weight.is_finite()) {
            return Err(Error::Config("ensemble intent_weight must be finite and non-negative".into()));
        }
        let (d, a) = (p.dim, p.attn_dim);
        Ok(EnsembleNet {
            flag: state.add("intent.flag", &[2, d], Init::Embedding)?,
            intent_gru: Gru::new(state, "intent.gru", d, d)?,
            sit: SituationEmbed::new(state, location_rows, d)?,
            user: state.add("intent.user", &[n_users, d], Init::Embedding)?,
            head: Dense::new(state, "intent.head", 2, 3 * d)?,
            lift: Dense::new(state, "attn.lift", a, 2)?,
            wq: state.add("attn.q", &[a, a], Init::FanIn)?,
            wk: state.add("attn.k", &[a, a], Init::FanIn)?,
            wv: state.add("attn.v", &[a, a], Init::FanIn)?,
            tokens: state.add("cross.tokens", &[2, a], Init::Embedding)?,
            cq: state.add("cross.q", &[a, a], Init::FanIn)?,
            ck: state.add("cross.k", &[a, a], Init::FanIn)?,
            cv: state.add("cross.v", &[a, a], Init::FanIn)?,
            proj: Dense::new(state, "proj", 1, a)?,
            dim: d,
            attn_dim: a,
            history_limit: p.history_limit,
        })
    }

    /// Intent from past repeat flags (oldest first), situation and user.
    pub fn intent_pass(&self, p: &Params, user: u32, flags: &[bool], now: SitIdx) -> Result<IntentPass> {
        let d = self.dim;
        let flags: Vec<usize> = flags[flags.len().saturating_sub(self.history_limit)..]
            .iter()
            .map(|&f| usize::from(f))
            .collect();
        let xs: Vec<&[f64]> = flags
            .iter()
            .map(|&f| embed_lookup(p.get(self.flag), d, f))
            .collect::<Result<_>>()?;
        let trace = self.intent_gru.run(p, &xs)?;
        let mut x = trace.output().to_vec();
        x.extend(self.sit.vector(p, now)?);
        x.extend_from_slice(embed_lookup(p.get(self.user), d, user as usize)?);
        let mut z = vec![0.0; 2];
        self.head.forward(p, &x, &mut z)?;
        Ok(IntentPass {
            flags,
            trace,
            user,
            now,
            x,
            probs: softmax(&z),
        })
    }

    pub fn predict_intent(&self, p: &Params, user: u32, flags: &[bool], now: SitIdx) -> Result<IntentEstimate> {
        Ok(self.intent_pass(p, user, flags, now)?.estimate())
    }

    /// Backpropagate logit gradients `dz` of the intent head.
    fn intent_backward(&self, p: &Params, g: &mut Grads, ip: &IntentPass, dz: &[f64]) -> Result<()> {
        let d = self.dim;
        let mut dx = vec![0.0; 3 * d];
        self.head.backward(p, g, &ip.x, dz, Some(&mut dx));
        let dxs = self.intent_gru.backward(p, g, &ip.trace, &dx[..d]);
        for (&f, dxt) in ip.flags.iter().zip(&dxs) {
            embed_backward(g.get(self.flag), d, f, dxt)?;
        }
        self.sit.backward(g, ip.now, &dx[d..2 * d])?;
        embed_backward(g.get(self.user), d, ip.user as usize, &dx[2 * d..])
    }

    fn mats(&self, p: &Params, intent: &[f64]) -> Mats {
        let a = self.attn_dim;
        let (lw, lb) = (p.get(self.lift.w), p.get(self.lift.b));
        let mut lt = Vec::with_capacity(3 * a);
        for r in 0..a {
            lt.extend_from_slice(&[lw[2 * r], lw[2 * r + 1], lb[r]]);
        }
        let qt = matmul(p.get(self.wq), &lt, a, 3);
        let kt = matmul(p.get(self.wk), &lt, a, 3);
        let vt = matmul(p.get(self.wv), &lt, a, 3);
        let scale = 1.0 / (a as f64).sqrt();
        let mut m = vec![0.0; 9];
        for r in 0..a {
            for x in 0..3 {
                for y in 0..3 {
                    m[x * 3 + y] += scale * qt[r * 3 + x] * kt[r * 3 + y];
                }
            }
        }
        let tok = p.get(self.tokens);
        let tokens = [
            tok[..a].iter().map(|v| intent[0] * v).collect::<Vec<_>>(),
            tok[a..].iter().map(|v| intent[1] * v).collect::<Vec<_>>(),
        ];
        let kc = [matvec(p.get(self.ck), a, &tokens[0]), matvec(p.get(self.ck), a, &tokens[1])];
        let vc = [matvec(p.get(self.cv), a, &tokens[0]), matvec(p.get(self.cv), a, &tokens[1])];
        Mats {
            lt,
            qt,
            kt,
            vt,
            m,
            tokens,
            kc,
            vc,
        }
    }

    fn row(&self, p: &Params, mt: &Mats, xt: &[[f64; 3]], i: usize) -> Result<Row> {
        let a = self.attn_dim;
        let xi = &xt[i];
        let u: Vec<f64> = (0..3).map(|y| (0..3).map(|x| xi[x] * mt.m[x * 3 + y]).sum()).collect();
        let logits: Vec<f64> = xt.iter().map(|xj| u[0] * xj[0] + u[1] * xj[1] + u[2] * xj[2]).collect();
        let alpha = softmax(&logits);
        let mut mbar = vec![0.0; 3];
        for (w, xj) in alpha.iter().zip(xt) {
            axpy(*w, xj, &mut mbar);
        }
        let mut h = matvec(&mt.lt, 3, xi);
        let att = matvec(&mt.vt, 3, &mbar);
        axpy(1.0, &att, &mut h);
        let qc = matvec(p.get(self.cq), a, &h);
        let scale = 1.0 / (a as f64).sqrt();
        let beta = softmax(&[scale * dot(&qc, &mt.kc[0]), scale * dot(&qc, &mt.kc[1])]);
        let mut z = h.clone();
        axpy(beta[0], &mt.vc[0], &mut z);
        axpy(beta[1], &mt.vc[1], &mut z);
        let mut o = [0.0];
        self.proj.forward(p, &z, &mut o)?;
        Ok(Row {
            i,
            alpha,
            mbar,
            h,
            qc,
            beta,
            z,
            w: sigmoid(o[0]),
        })
    }

    fn items(base: &[f64], n_repeat: usize) -> Vec<[f64; 3]> {
        base.iter()
            .enumerate()
            .map(|(i, &s)| [s, if i < n_repeat { 1.0 } else { 0.0 }, 1.0])
            .collect()
    }

    /// Per-item weights for normalized scores `base`, the first `n_repeat` of
    /// which come from the repeat slate.
    pub fn item_weights(&self, p: &Params, base: &[f64], n_repeat: usize, intent: IntentEstimate) -> Result<Vec<f64>> {
        let mt = self.mats(p, &[intent.repeat_prob, intent.explore_prob]);
        let xt = Self::items(base, n_repeat);
        (0..xt.len()).map(|i| Ok(self.row(p, &mt, &xt, i)?.w)).collect()
    }

    /// Weights and final scores for normalized repeat and exploration slates.
    pub fn combine(&self, p: &Params, repeat: (&[u32], &[f64]), exploration: (&[u32], &[f64]), intent: IntentEstimate) -> Result<CombinedSlate> {
        if repeat.0.len() != repeat.1.len() || exploration.0.len() != exploration.1.len() {
            return Err(Error::Shape("slate ids and scores differ in length".into()));
        }
        if let Some(c) = repeat.0.iter().find(|c| exploration.0.contains(c)) {
            return Err(Error::invalid(format!("store {c} is in both slates")));
        }
        let base: Vec<f64> = repeat.1.iter().chain(exploration.1).copied().collect();
        if base.is_empty() {
            return Err(Error::invalid("both slates are empty"));
        }
        let weights = self.item_weights(p, &base, repeat.0.len(), intent)?;
        let scores = weights.iter().zip(&base).map(|(w, s)| w * s).collect();
        Ok(CombinedSlate {
            repeat: repeat.0.to_vec(),
            exploration: exploration.0.to_vec(),
            base,
            weights,
            scores,
        })
    }

    /// Gradients of `Σ_r dw_r · w_r` over the given rows. Returns the gradient
    /// with respect to the intent probabilities.
    fn rows_backward(&self, p: &Params, g: &mut Grads, mt: &Mats, xt: &[[f64; 3]], rows: &[Row], dws: &[f64], intent: &[f64]) -> Vec<f64> {
        let a = self.attn_dim;
        let scale = 1.0 / (a as f64).sqrt();
        let (cq, ck, cv) = (p.get(self.cq), p.get(self.ck), p.get(self.cv));
        let mut dlt = vec![0.0; 3 * a];
        let mut dvt = vec![0.0; 3 * a];
        let mut dm = [0.0; 9];
        let mut dkc = [vec![0.0; a], vec![0.0; a]];
        let mut dvc = [vec![0.0; a], vec![0.0; a]];
        let mut dcq = vec![0.0; a * a];
        for (row, &dw) in rows.iter().zip(dws) {
            let dpre = [dw * row.w * (1.0 - row.w)];
            let mut dz = vec![0.0; a];
            self.proj.backward(p, g, &row.z, &dpre, Some(&mut dz));
            let mut dh = dz.clone();
            let dbeta = [dot(&dz, &mt.vc[0]), dot(&dz, &mt.vc[1])];
            axpy(row.beta[0], &dz, &mut dvc[0]);
            axpy(row.beta[1], &dz, &mut dvc[1]);
            let mut dl = vec![0.0; 2];
            softmax_backward(&row.beta, &dbeta, &mut dl);
            let mut dqc = vec![0.0; a];
            for t in 0..2 {
                axpy(scale * dl[t], &mt.kc[t], &mut dqc);
                axpy(scale * dl[t], &row.qc, &mut dkc[t]);
            }
            outer_add(&mut dcq, &dqc, &row.h);
            axpy(1.0, &matvec_t(cq, a, &dqc), &mut dh);

            let xi = &xt[row.i];
            outer_add(&mut dlt, &dh, xi);
            outer_add(&mut dvt, &dh, &row.mbar);
            let dmbar = matvec_t(&mt.vt, 3, &dh);
            let dalpha: Vec<f64> = xt.iter().map(|xj| dot(&dmbar, xj)).collect();
            let mut dlog = vec![0.0; xt.len()];
            softmax_backward(&row.alpha, &dalpha, &mut dlog);
            let mut du = [0.0; 3];
            for (d, xj) in dlog.iter().zip(xt) {
                for y in 0..3 {
                    du[y] += d * xj[y];
                }
            }
            for x in 0..3 {
                for y in 0..3 {
                    dm[x * 3 + y] += xi[x] * du[y];
                }
            }
        }
        axpy(1.0, &dcq, g.get(self.cq));
        // Cross-attention keys and values back to the intent tokens.
        let mut dintent = vec![0.0; 2];
        let tok = p.get(self.tokens);
        let mut dtok = vec![0.0; 2 * a];
        for t in 0..2 {
            outer_add(g.get(self.ck), &dkc[t], &mt.tokens[t]);
            outer_add(g.get(self.cv), &dvc[t], &mt.tokens[t]);
            let mut dtau = matvec_t(ck, a, &dkc[t]);
            axpy(1.0, &matvec_t(cv, a, &dvc[t]), &mut dtau);
            let e = &tok[t * a..(t + 1) * a];
            dintent[t] = dot(e, &dtau);
            axpy(intent[t], &dtau, &mut dtok[t * a..(t + 1) * a]);
        }
        axpy(1.0, &dtok, g.get(self.tokens));
        // M = scale · Q̃ᵀ K̃.
        let mut dqt = vec![0.0; 3 * a];
        let mut dkt = vec![0.0; 3 * a];
        for r in 0..a {
            for x in 0..3 {
                for y in 0..3 {
                    let v = scale * dm[x * 3 + y];
                    dqt[r * 3 + x] += v * mt.kt[r * 3 + y];
                    dkt[r * 3 + y] += v * mt.qt[r * 3 + x];
                }
            }
        }
        for (w, dmat) in [(self.wq, &dqt), (self.wk, &dkt), (self.wv, &dvt)] {
            let gw = g.get(w);
            for r in 0..a {
                for c in 0..a {
                    gw[r * a + c] += dot(&dmat[r * 3..r * 3 + 3], &mt.lt[c * 3..c * 3 + 3]);
                }
            }
            let wv = p.get(w);
            for c in 0..a {
                for r in 0..a {
                    let coef = wv[r * a + c];
                    for k in 0..3 {
                        dlt[c * 3 + k] += coef * dmat[r * 3 + k];
                    }
                }
            }
        }
        let (glw, glb) = g.pair(self.lift.w, self.lift.b);
        for r in 0..a {
            glw[2 * r] += dlt[r * 3];
            glw[2 * r + 1] += dlt[r * 3 + 1];
            glb[r] += dlt[r * 3 + 2];
        }
        dintent
    }

    /// BPR of the ensembled score of slate item `pos` over item `neg` plus
    /// `intent_weight` times the intent cross-entropy against `label`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_step(&self, p: &Params, g: &mut Grads, ip: &IntentPass, base: &[f64], n_repeat: usize, pos: usize, neg: usize, label: bool, intent_weight: f64) -> Result<f64> {
        let mt = self.mats(p, &ip.probs);
        let xt = Self::items(base, n_repeat);
        let rows = [self.row(p, &mt, &xt, pos)?, self.row(p, &mt, &xt, neg)?];
        let (loss, dpos) = bpr_loss(rows[0].w * base[pos], rows[1].w * base[neg]);
        let dws = [dpos * base[pos], -dpos * base[neg]];
        let dprobs = self.rows_backward(p, g, &mt, &xt, &rows, &dws, &ip.probs);
        let mut dz = vec![0.0; 2];
        softmax_backward(&ip.probs, &dprobs, &mut dz);
        let y = usize::from(!label);
        for (k, v) in dz.iter_mut().enumerate() {
            *v += intent_weight * (ip.probs[k] - if k == y { 1.0 } else { 0.0 });
        }
        self.intent_backward(p, g, ip, &dz)?;
        Ok(loss - intent_weight * ip.probs[y].ln())
    }

    /// Intent cross-entropy alone.
    fn intent_step(&self, p: &Params, g: &mut Grads, ip: &IntentPass, label: bool) -> Result<f64> {
        let y = usize::from(!label);
        let dz: Vec<f64> = (0..2).map(|k| ip.probs[k] - if k == y { 1.0 } else { 0.0 }).collect();
        self.intent_backward(p, g, ip, &dz)?;
        Ok(-ip.probs[y].ln())
    }

    fn flags_of(enc: &Encoded, pos: usize, limit: usize) -> Vec<bool> {
        enc.recent_history(pos, limit).iter().map(|&h| enc.repeat[h]).collect()
    }
}

/// Split `candidates` into prior and unvisited stores, score each part with
/// its base model and normalize. Returns `(repeat ids, p̂_r, exploration ids, p̂_e)`.
type Slates = (Vec<u32>, Vec<f64>, Vec<u32>, Vec<f64>);

fn base_slates(reprec: &RepRec, exprec: &ExpRec, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Slates> {
    let prior = enc.prior_stores(pos);
    let (rep, exp): (Vec<u32>, Vec<u32>) = candidates.iter().partition(|c| prior.binary_search(c).is_ok());
    let norm = |ids: &[u32], s: &dyn Scorer| -> Result<Vec<f64>> {
        if ids.is_empty() {
            Ok(Vec::new())
        } else {
            normalize_slate(&s.score(enc, pos, ids)?)
        }
    };
    let pr = norm(&rep, reprec)?;
    let pe = norm(&exp, exprec)?;
    Ok((rep, pr, exp, pe))
}

/// Reorder slate scores back to the order of `candidates`.
fn to_candidate_order(candidates: &[u32], ids: &[u32], scores: &[f64]) -> Vec<f64> {
    let mut by: Vec<(u32, f64)> = ids.iter().copied().zip(scores.iter().copied()).collect();
    by.sort_unstable_by_key(|x| x.0);
    candidates
        .iter()
        .map(|c| by[by.binary_search_by_key(c, |x| x.0).expect("candidate is in a slate")].1)
        .collect()
}

/// Normalized base slates concatenated with unit weights.
pub struct Concat<'a> {
    pub reprec: &'a RepRec,
    pub exprec: &'a ExpRec,
}

impl Scorer for Concat<'_> {
    fn score(&self, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>> {
        let (rep, pr, exp, pe) = base_slates(self.reprec, self.exprec, enc, pos, candidates)?;
        let ids: Vec<u32> = rep.into_iter().chain(exp).collect();
        let s: Vec<f64> = pr.into_iter().chain(pe).collect();
        Ok(to_candidate_order(candidates, &ids, &s))
    }
}

/// The trained ensemble together with its frozen base models.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub net: EnsembleNet,
    pub state: ModelState,
    pub reprec: RepRec,
    pub exprec: ExpRec,
}

fn ensemble_score(net: &EnsembleNet, p: &Params, reprec: &RepRec, exprec: &ExpRec, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>> {
    let (rep, pr, exp, pe) = base_slates(reprec, exprec, enc, pos, candidates)?;
    let flags = EnsembleNet::flags_of(enc, pos, net.history_limit);
    let intent = net.predict_intent(p, enc.user[pos], &flags, enc.sit[pos])?;
    let slate = net.combine(p, (&rep, &pr), (&exp, &pe), intent)?;
    let ids: Vec<u32> = rep.into_iter().chain(exp).collect();
    Ok(to_candidate_order(candidates, &ids, &slate.scores))
}

struct FrozenEnsemble<'a> {
    net: &'a EnsembleNet,
    state: &'a ModelState,
    reprec: &'a RepRec,
    exprec: &'a ExpRec,
}

impl Scorer for FrozenEnsemble<'_> {
    fn score(&self, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>> {
        ensemble_score(self.net, &self.state.params(), self.reprec, self.exprec, enc, pos, candidates)
    }
}

impl Scorer for Ensemble {
    fn score(&self, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>> {
        ensemble_score(&self.net, &self.state.params(), &self.reprec, &self.exprec, enc, pos, candidates)
    }
}

/// Training reports of both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    pub intent: FitReport,
    pub combine: FitReport,
}

impl Ensemble {
    pub const NAME: &'static str = "ensemble";

    pub fn init(enc: &Encoded, params: &EnsembleParams, seed: u64, reprec: RepRec, exprec: ExpRec) -> Result<Self> {
        let mut state = ModelState::new(seed);
        let net = EnsembleNet::build(&mut state, enc.n_users(), enc.n_location_rows(), params)?;
        Ok(Ensemble { net, state, reprec, exprec })
    }

    pub fn parameter_count(&self) -> usize {
        self.state.parameter_count()
    }

    /// Stage one fits the intent predictor with cross-entropy on repeat flags.
    /// Stage two fits everything with BPR of the ensembled target score over
    /// one other combined-protocol candidate, plus the weighted intent loss,
    /// with early stopping on validation combined HR@3. Half of the negatives
    /// are drawn from the ten best-scoring other candidates, the rest
    /// uniformly.
    pub fn train(enc: &Encoded, params: &EnsembleParams, cfg: &TrainConfig, reprec: RepRec, exprec: ExpRec) -> Result<(Self, EnsembleReport)> {
        let mut m = Self::init(enc, params, cfg.seed, reprec, exprec)?;
        let train = enc.partition_range(Partition::Train);
        let cap = if params.max_train_instances == 0 { train.len() } else { params.max_train_instances };
        let instances: Vec<usize> = train.clone().skip(train.len().saturating_sub(cap)).collect();
        if instances.is_empty() {
            return Err(Error::invalid("ensemble has no train interactions"));
        }
        let net = &m.net;
        let limit = net.history_limit;
        let valid_pos: Vec<usize> = subsample_positions(enc.partition_range(Partition::Valid).collect(), cfg.valid_cases, cfg.seed);
        let intent = fit(
            &mut m.state,
            instances.len(),
            cfg,
            |p, g, i, _| {
                let pos = instances[i];
                let ip = net.intent_pass(p, enc.user[pos], &EnsembleNet::flags_of(enc, pos, limit), enc.sit[pos])?;
                net.intent_step(p, g, &ip, enc.repeat[pos])
            },
            |s| {
                if valid_pos.is_empty() {
                    return Ok(None);
                }
                let p = s.params();
                let mut ce = 0.0;
                for &pos in &valid_pos {
                    let e = net.predict_intent(&p, enc.user[pos], &EnsembleNet::flags_of(enc, pos, limit), enc.sit[pos])?;
                    ce -= if enc.repeat[pos] { e.repeat_prob } else { e.explore_prob }.ln();
                }
                Ok(Some(-ce / valid_pos.len() as f64))
            },
        )?;

        let valid = subsample_cases(
            build_cases_in(enc, Partition::Valid, Protocol::Combined, cfg.seed)?,
            cfg.valid_cases,
            cfg.seed,
        );
        let (reprec, exprec) = (&m.reprec, &m.exprec);
        let combine = fit(
            &mut m.state,
            instances.len(),
            cfg,
            |p, g, i, rng| {
                let pos = instances[i];
                let Some(case) = build_case(enc, pos, Protocol::Combined, cfg.seed)? else {
                    return Ok(0.0);
                };
                if case.candidates.len() < 2 {
                    return Ok(0.0);
                }
                let (rep, pr, exp, pe) = base_slates(reprec, exprec, enc, pos, &case.candidates)?;
                let ids: Vec<u32> = rep.iter().chain(&exp).copied().collect();
                let base: Vec<f64> = pr.into_iter().chain(pe).collect();
                let t = ids.iter().position(|&c| c == case.target).expect("target is a candidate");
                let neg = if rng.gen_bool(0.5) {
                    let pool = hard_pool(&base, t);
                    pool[rng.gen_range(0..pool.len())]
                } else {
                    loop {
                        let k = rng.gen_range(0..ids.len());
                        if k != t {
                            break k;
                        }
                    }
                };
                let ip = net.intent_pass(p, enc.user[pos], &EnsembleNet::flags_of(enc, pos, limit), enc.sit[pos])?;
                net.loss_step(p, g, &ip, &base, rep.len(), t, neg, enc.repeat[pos], params.intent_weight)
            },
            |s| {
                if valid.is_empty() {
                    return Ok(None);
                }
                let scorer = FrozenEnsemble {
                    net,
                    state: s,
                    reprec,
                    exprec,
                };
                Ok(Some(crate::evalharness::evaluate(&scorer, enc, &valid, 3)?.hr))
            },
        )?;
        Ok((m, EnsembleReport { intent, combine }))
    }

    pub fn params(&self) -> EnsembleParams {
        EnsembleParams {
            dim: self.net.dim,
            attn_dim: self.net.attn_dim,
            history_limit: self.net.history_limit,
            ..EnsembleParams::default()
        }
    }

    pub fn checkpoint(&self, enc: &Encoded) -> Checkpoint {
        let mut ck = checkpoint_with_vocab(Self::NAME, &self.state, enc);
        ck.meta.insert("dim".into(), self.net.dim.to_string());
        ck.meta.insert("attn_dim".into(), self.net.attn_dim.to_string());
        ck.meta.insert("history_limit".into(), self.net.history_limit.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, enc: &Encoded, reprec: RepRec, exprec: ExpRec) -> Result<Self> {
        check_vocab(ck, Self::NAME, enc)?;
        let params = EnsembleParams {
            dim: ck.meta_value("dim")?,
            attn_dim: ck.meta_value("attn_dim")?,
            history_limit: ck.meta_value("history_limit")?,
            ..EnsembleParams::default()
        };
        let mut m = Self::init(enc, &params, ck.meta_value("seed")?, reprec, exprec)?;
        ck.apply_to(&mut m.state)?;
        Ok(m)
    }
}

/// Number of top-scoring candidates hard negatives are drawn from.
const HARD_POOL: usize = 10;

/// The `HARD_POOL` highest-scoring items other than `t`, best first.
fn hard_pool(base: &[f64], t: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..base.len()).filter(|&i| i != t).collect();
    idx.sort_by(|&a, &b| base[b].total_cmp(&base[a]).then(a.cmp(&b)));
    idx.truncate(HARD_POOL);
    idx
}

fn subsample_positions(mut pos: Vec<usize>, cap: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if pos.len() > cap {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        pos.shuffle(&mut rng);
        pos.truncate(cap);
        pos.sort_unstable();
    }
    pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_difference_check;

    fn net(seed: u64) -> (ModelState, EnsembleNet) {
        let mut s = ModelState::new(seed);
        let p = EnsembleParams {
            dim: 3,
            attn_dim: 4,
            history_limit: 5,
            ..EnsembleParams::default()
        };
        let n = EnsembleNet::build(&mut s, 4, 3, &p).unwrap();
        (s, n)
    }

    fn sit(hour: u8, dow: u8, loc: u32) -> SitIdx {
        SitIdx { hour, dow, loc }
    }

    fn randomize(s: &mut ModelState, seed: u64) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for i in 0..s.tensors().len() {
            let id = s.id(&s.tensors()[i].name.clone()).unwrap();
            s.tensor_mut(id).values.iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_slate(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_slate(&[3.3; 3]).unwrap(), vec![0.5; 3]);
        assert!(normalize_slate(&[]).is_err());
        assert!(normalize_slate(&[1.0, f64::NAN]).is_err());
        let x = [0.3, -1.2, 5.0, 2.2];
        let y: Vec<f64> = x.iter().map(|v| 7.5 * v - 3.0).collect();
        for (a, b) in normalize_slate(&x).unwrap().iter().zip(normalize_slate(&y).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_gives_even_intent() {
        let (mut s, n) = net(1);
        for id in [n.head.w, n.head.b] {
            s.tensor_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
        }
        let e = n.predict_intent(&s.params(), 2, &[true, false, true], sit(12, 3, 1)).unwrap();
        assert_eq!((e.repeat_prob, e.explore_prob), (0.5, 0.5));
    }

    #[test]
    fn intent_is_a_distribution() {
        use rand::SeedableRng;
        let (mut s, n) = net(2);
        randomize(&mut s, 3);
        let p = s.params();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let len = rng.gen_range(0..9);
            let flags: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.5)).collect();
            let now = sit(rng.gen_range(0..24), rng.gen_range(0..7), rng.gen_range(0..3));
            let e = n.predict_intent(&p, rng.gen_range(0..4), &flags, now).unwrap();
            assert!((e.repeat_prob + e.explore_prob - 1.0).abs() <= 1e-9);
            assert!((0.0..=1.0).contains(&e.repeat_prob));
        }
    }

    /// Direct attention with explicit queries, keys and values per item.
    fn brute_weights(s: &ModelState, n: &EnsembleNet, base: &[f64], n_repeat: usize, intent: [f64; 2]) -> Vec<f64> {
        let p = s.params();
        let a = n.attn_dim;
        let x: Vec<Vec<f64>> = base
            .iter()
            .enumerate()
            .map(|(i, &sc)| {
                let f = if i < n_repeat { 1.0 } else { 0.0 };
                (0..a).map(|r| p.get(n.lift.w)[2 * r] * sc + p.get(n.lift.w)[2 * r + 1] * f + p.get(n.lift.b)[r]).collect()
            })
            .collect();
        let mv = |w: ParamId, v: &[f64]| -> Vec<f64> { (0..a).map(|r| (0..a).map(|c| p.get(w)[r * a + c] * v[c]).sum()).collect() };
        let q: Vec<_> = x.iter().map(|v| mv(n.wq, v)).collect();
        let k: Vec<_> = x.iter().map(|v| mv(n.wk, v)).collect();
        let v: Vec<_> = x.iter().map(|v| mv(n.wv, v)).collect();
        let sc = 1.0 / (a as f64).sqrt();
        let tok = p.get(n.tokens);
        let taus: Vec<Vec<f64>> = (0..2).map(|t| tok[t * a..(t + 1) * a].iter().map(|e| intent[t] * e).collect()).collect();
        let kc: Vec<_> = taus.iter().map(|t| mv(n.ck, t)).collect();
        let vc: Vec<_> = taus.iter().map(|t| mv(n.cv, t)).collect();
        (0..x.len())
            .map(|i| {
                let l: Vec<f64> = k.iter().map(|kj| sc * (0..a).map(|r| q[i][r] * kj[r]).sum::<f64>()).collect();
                let mx = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|z| (z - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                let h: Vec<f64> = (0..a).map(|r| x[i][r] + (0..x.len()).map(|j| e[j] / tot * v[j][r]).sum::<f64>()).collect();
                let qc = mv(n.cq, &h);
                let l2: Vec<f64> = kc.iter().map(|kt| sc * (0..a).map(|r| qc[r] * kt[r]).sum::<f64>()).collect();
                let b0 = 1.0 / (1.0 + (l2[1] - l2[0]).exp());
                let z: Vec<f64> = (0..a).map(|r| h[r] + b0 * vc[0][r] + (1.0 - b0) * vc[1][r]).collect();
                let o = p.get(n.proj.b)[0] + (0..a).map(|r| p.get(n.proj.w)[r] * z[r]).sum::<f64>();
                1.0 / (1.0 + (-o).exp())
            })
            .collect()
    }

    #[test]
    fn attention_matches_brute_force() {
        let (mut s, n) = net(5);
        randomize(&mut s, 6);
        let base = [0.0, 1.0, 0.25, 0.9, 0.6, 0.5, 0.1];
        let intent = IntentEstimate {
            repeat_prob: 0.7,
            explore_prob: 0.3,
        };
        let got = n.item_weights(&s.params(), &base, 3, intent).unwrap();
        let want = brute_weights(&s, &n, &base, 3, [0.7, 0.3]);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "{g} vs {w}");
        }
    }

    #[test]
    fn combine_structure() {
        let (s, n) = net(7);
        let p = s.params();
        let intent = IntentEstimate {
            repeat_prob: 0.4,
            explore_prob: 0.6,
        };
        let slate = n.combine(&p, (&[], &[]), (&[4, 9, 2], &[0.0, 1.0, 0.3]), intent).unwrap();
        assert_eq!(slate.scores.len(), 3);
        for i in 0..3 {
            assert!(slate.weights[i] > 0.0 && slate.weights[i] < 1.0);
            assert_eq!(slate.scores[i], slate.weights[i] * slate.base[i]);
        }
        let slate = n.combine(&p, (&[1, 5], &[0.2, 1.0]), (&[4], &[0.7]), intent).unwrap();
        assert_eq!(slate.base, vec![0.2, 1.0, 0.7]);
        for i in 0..3 {
            assert_eq!(slate.scores[i], slate.weights[i] * slate.base[i]);
        }
        let one = n.combine(&p, (&[], &[]), (&[3], &[0.5]), intent).unwrap();
        assert!(one.scores[0] > 0.0);
        assert!(n.combine(&p, (&[1], &[0.5]), (&[1], &[0.5]), intent).is_err());
        assert!(n.combine(&p, (&[], &[]), (&[], &[]), intent).is_err());
    }

    #[test]
    fn attention_and_intent_gradient() {
        let (mut s, n) = net(8);
        randomize(&mut s, 9);
        let base = [0.0, 1.0, 0.25, 0.9, 0.6, 0.5];
        let flags = [false, true, true, false];
        let now = sit(18, 5, 2);
        let err = finite_difference_check(
            &mut s,
            |s| {
                let p = s.params();
                let ip = n.intent_pass(&p, 1, &flags, now)?;
                let w = n.item_weights(&p, &base, 2, ip.estimate())?;
                Ok(bpr_loss(w[1] * base[1], w[4] * base[4]).0 - 0.7 * ip.probs[0].ln())
            },
            |s| {
                let (p, mut g) = s.split();
                let ip = n.intent_pass(&p, 1, &flags, now)?;
                n.loss_step(&p, &mut g, &ip, &base, 2, 1, 4, true, 0.7)
            },
            1e-6,
            400,
            10,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn hard_pool_takes_best_other_items() {
        let base: Vec<f64> = (0..15).map(|i| i as f64 / 14.0).collect();
        let pool = hard_pool(&base, 14);
        assert_eq!(pool, (4..14).rev().collect::<Vec<_>>());
        assert_eq!(hard_pool(&[0.3, 0.9], 1), vec![0]);
    }

    /// Users 0..10 repeat with probability 0.9, users 10..20 with 0.1.
    #[test]
    fn intent_learns_planted_propensity() {
        use rand::SeedableRng;
        let (mut s, n) = net(11);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let mut draw = |n_per_user: usize| -> Vec<(u32, Vec<bool>, bool)> {
            let mut out = Vec::new();
            for u in 0..20u32 {
                let p = if u < 10 { 0.9 } else { 0.1 };
                for _ in 0..n_per_user {
                    let flags: Vec<bool> = (0..6).map(|_| rng.gen_bool(p)).collect();
                    out.push((u % 4, flags, rng.gen_bool(p)));
                }
            }
            out
        };
        let train = draw(40);
        let test = draw(20);
        let now = sit(12, 2, 0);
        let cfg = TrainConfig {
            lr: 0.01,
            batch_size: 16,
            max_epochs: 15,
            patience: 15,
            ..TrainConfig::default()
        };
        fit(
            &mut s,
            train.len(),
            &cfg,
            |p, g, i, _| {
                let (u, f, y) = &train[i];
                let ip = n.intent_pass(p, *u, f, now)?;
                n.intent_step(p, g, &ip, *y)
            },
            |_| Ok(None),
        )
        .unwrap();
        let p = s.params();
        let scored: Vec<(f64, bool)> = test.iter().map(|(u, f, y)| (n.predict_intent(&p, *u, f, now).unwrap().repeat_prob, *y)).collect();
        let (mut hits, mut pairs) = (0.0, 0.0);
        for (a, ya) in &scored {
            for (b, yb) in &scored {
                if *ya && !*yb {
                    pairs += 1.0;
                    hits += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        let auc = hits / pairs;
        assert!(auc > 0.75, "{auc}");
    }
}
