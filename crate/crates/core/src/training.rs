//! Mini-batch Adam training with early stopping on a validation metric.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, Checkpoint, Grads, ModelState, Params};
use crate::error::{Error, Result};
use crate::evalharness::{evaluate, Protocol, Scorer};
use crate::features::Encoded;

/// A fixed model topology whose parameters live in a separate [`ModelState`].
pub trait Net: Sync {
    fn score(&self, p: &Params, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>>;

    fn supports(&self, _protocol: Protocol) -> bool {
        true
    }
}

/// A topology bound to its parameters.
#[derive(Debug, Clone)]
pub struct Model<N> {
    pub net: N,
    pub state: ModelState,
}

impl<N> Model<N> {
    pub fn parameter_count(&self) -> usize {
        self.state.parameter_count()
    }
}

/// Borrowed counterpart of [`Model`], used to validate mid-training.
pub struct Frozen<'a, N> {
    pub net: &'a N,
    pub state: &'a ModelState,
}

impl<N: Net> Scorer for Frozen<'_, N> {
    fn score(&self, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>> {
        self.net.score(&self.state.params(), enc, pos, candidates)
    }

    fn supports(&self, protocol: Protocol) -> bool {
        self.net.supports(protocol)
    }
}

impl<N: Net> Scorer for Model<N> {
    fn score(&self, enc: &Encoded, pos: usize, candidates: &[u32]) -> Result<Vec<f64>> {
        self.net.score(&self.state.params(), enc, pos, candidates)
    }

    fn supports(&self, protocol: Protocol) -> bool {
        self.net.supports(protocol)
    }
}

/// HR@3 of `net` on prepared validation cases, `None` when there are none.
pub fn validation_hr<N: Net>(
    net: &N,
    state: &ModelState,
    enc: &Encoded,
    cases: &[crate::evalharness::EvalCase],
) -> Result<Option<f64>> {
    if cases.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(&Frozen { net, state }, enc, cases, 3)?.hr))
}

/// Checkpoint with the user, store and location vocabularies of `enc`.
pub fn checkpoint_with_vocab(model: &str, state: &ModelState, enc: &Encoded) -> Checkpoint {
    let mut ck = Checkpoint::from_state(model, state);
    ck.vocabs.insert("users".into(), enc.users.clone());
    ck.vocabs.insert("stores".into(), enc.stores.clone());
    ck.vocabs.insert("locations".into(), enc.locations.clone());
    ck
}

/// Reject a checkpoint trained on different vocabularies than `enc`.
pub fn check_vocab(ck: &Checkpoint, model: &str, enc: &Encoded) -> Result<()> {
    if ck.model != model {
        return Err(Error::Checkpoint(format!("expected a {model} checkpoint, found {}", ck.model)));
    }
    for (name, ours) in [("users", &enc.users), ("stores", &enc.stores), ("locations", &enc.locations)] {
        if ck.vocab(name)? != ours.as_slice() {
            return Err(Error::Checkpoint(format!("{name} vocabulary differs from the dataset")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub seed: u64,
    /// Cap on validation cases scored after each epoch.
    pub valid_cases: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 256,
            max_epochs: 100,
            patience: 10,
            seed: 1,
            valid_cases: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.valid_cases == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs, patience and valid_cases must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub valid_hr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_hr: f64,
}

/// Train over `n_instances` examples. `step` adds the gradient of one
/// instance's loss to the buffers and returns the loss; gradients are
/// averaged over each batch. After every epoch `validate` scores the model
/// (higher is better); the best-scoring parameters are restored at the end.
/// When `validate` has nothing to score it returns `None` and the negated
/// mean training loss of the epoch is used instead.
pub fn fit(
    state: &mut ModelState,
    n_instances: usize,
    cfg: &TrainConfig,
    mut step: impl FnMut(&Params, &mut Grads, usize, &mut ChaCha8Rng) -> Result<f64>,
    mut validate: impl FnMut(&ModelState) -> Result<Option<f64>>,
) -> Result<FitReport> {
    cfg.validate()?;
    if n_instances == 0 {
        return Err(Error::invalid("no training instances"));
    }
    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_instances).collect();
    let initial = validate(state)?.unwrap_or(f64::NEG_INFINITY);
    let mut best = (initial, 0usize, state.values_snapshot());
    let mut epochs = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            {
                let (p, mut g) = state.split();
                for &i in batch {
                    total += step(&p, &mut g, i, &mut rng)?;
                }
            }
            state.scale_grad(1.0 / batch.len() as f64);
            state.adam_step(&adam);
        }
        state.check_finite()?;
        let mean_loss = total / n_instances as f64;
        let hr = validate(state)?.unwrap_or(-mean_loss);
        epochs.push(EpochLog {
            epoch,
            mean_loss,
            valid_hr: hr,
        });
        if hr > best.0 {
            best = (hr, epoch, state.values_snapshot());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    state.restore_values(&best.2)?;
    Ok(FitReport {
        epochs,
        best_epoch: best.1,
        best_valid_hr: best.0,
    })
}
