//! Mini-batch training with Adam and best-on-dev model selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Var};
use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, Mode};
use crate::rng::SeedKey;
use crate::{Graph, ParameterStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-size model.
    #[default]
    Paper,
    /// Small encoder for single-core runs.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!("unknown profile {s:?} (paper|desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    pub profile: Profile,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Encoder sizes; `None` means the profile's sizes.
    pub encoder: Option<EncoderConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 100,
            lr: 0.002,
            dropout: 0.33,
            seed: 1,
            profile: Profile::Paper,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            encoder: None,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            profile: Profile::Desk,
            ..TrainConfig::paper()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => TrainConfig::paper(),
            Profile::Desk => TrainConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.profile == Profile::Desk && self.epochs > 200 {
            return Err(Error::Config(format!("desk profile allows at most 200 epochs, got {}", self.epochs)));
        }
        self.encoder_config().validate()
    }

    /// Encoder sizes for this run, with the run's dropout.
    pub fn encoder_config(&self) -> EncoderConfig {
        let base = self.encoder.clone().unwrap_or_else(|| match self.profile {
            Profile::Paper => EncoderConfig::paper(),
            Profile::Desk => EncoderConfig::desk(),
        });
        EncoderConfig {
            dropout: self.dropout,
            ..base
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn key(&self) -> SeedKey {
        SeedKey::new(self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub best_epoch: usize,
    pub best_score: f64,
    pub history: Vec<EpochLog>,
}

/// Train `n_items` examples for `cfg.epochs` epochs.
///
/// * `loss(graph, item, mode)` builds one example's scalar loss.
/// * `score(store)` is the dev metric checked after every epoch (higher is
///   better); parameters from the first best epoch are restored at the end.
/// * `on_epoch(epoch, store)` runs before each epoch (freezing schedules).
///
/// Batch order and dropout masks are drawn from `key`, so a run is a pure
/// function of its inputs.
pub fn fit<L, E, H>(
    store: &mut ParameterStore,
    cfg: &TrainConfig,
    key: SeedKey,
    n_items: usize,
    loss: L,
    mut score: E,
    mut on_epoch: H,
) -> Result<FitReport>
where
    L: Fn(&mut Graph<'_>, usize, &Mode) -> Result<Var>,
    E: FnMut(&ParameterStore) -> Result<f64>,
    H: FnMut(usize, &mut ParameterStore),
{
    if n_items == 0 {
        return Err(Error::Data("no training examples".into()));
    }
    let adam = cfg.adam();
    let mut best: Option<(usize, f64, Vec<crate::Tensor>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        on_epoch(epoch, store);
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut key.stream_for(&format!("shuffle/{epoch}")));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &item in batch {
                let mode = Mode::train(key.derive(&format!("dropout/{epoch}/{item}")));
                let grads = {
                    let mut g = Graph::new(store);
                    let l = loss(&mut g, item, &mode)?;
                    let v = g.value(l).item();
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!("loss {v} on training example {item}, epoch {epoch}")));
                    }
                    total += v;
                    g.backward(l)?
                };
                store.accumulate(&grads, scale);
            }
            if let Some(c) = cfg.clip_norm {
                store.clip_grad_norm(c);
            }
            store.adam_step(&adam);
        }
        let dev = score(store)?;
        log::debug!("epoch {epoch}: loss {:.4} dev {dev:.4}", total / n_items as f64);
        history.push(EpochLog {
            epoch,
            train_loss: total / n_items as f64,
            dev_score: dev,
        });
        if best.as_ref().is_none_or(|(_, b, _)| dev > *b) {
            best = Some((epoch, dev, store.snapshot()));
        }
    }
    let (best_epoch, best_score, snap) = best.expect("at least one epoch");
    store.restore(&snap);
    Ok(FitReport {
        best_epoch,
        best_score,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn paper_profile_constants() {
        let c = TrainConfig::paper();
        assert_eq!((c.batch_size, c.epochs, c.lr, c.dropout), (16, 100, 0.002, 0.33));
        let e = c.encoder_config();
        assert_eq!(
            (e.word_dim, e.char_dim, e.char_filters, e.char_kernel, e.lstm_hidden, e.lstm_layers),
            (300, 100, 100, 3, 1024, 2)
        );
        let d = TrainConfig::desk().encoder_config();
        assert_eq!((d.lstm_hidden, d.word_dim, d.char_filters), (64, 32, 16));
    }

    #[test]
    fn validation() {
        assert!(TrainConfig { epochs: 201, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { dropout: 1.0, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig::paper().validate().is_ok());
    }

    fn quadratic_fit(seed: u64) -> (FitReport, Vec<f64>) {
        let mut store = ParameterStore::new();
        let w = store.add("w", Tensor::vector(vec![0.5, -0.5])).unwrap();
        let targets = [1.0, 2.0, 3.0, -1.0, 0.0];
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 2,
            lr: 0.05,
            seed,
            ..TrainConfig::desk()
        };
        let report = fit(
            &mut store,
            &cfg,
            cfg.key(),
            targets.len(),
            |g, item, mode| {
                let x = g.param(w);
                let x = mode.dropout(g, x, 0.3, "w")?;
                let d = g.affine_const(x, 1.0, -targets[item]);
                let sq = g.mul(d, d)?;
                Ok(g.sum(sq))
            },
            |s| Ok(-s.value(w).data().iter().map(|v| (v - 1.0).powi(2)).sum::<f64>()),
            |_, _| {},
        )
        .unwrap();
        (report, store.value(w).data().to_vec())
    }

    #[test]
    fn fit_is_deterministic_and_restores_best() {
        let (a, wa) = quadratic_fit(3);
        let (b, wb) = quadratic_fit(3);
        assert_eq!(a, b);
        assert_eq!(wa, wb);
        let (c, _) = quadratic_fit(4);
        assert_ne!(a.history, c.history);
        let best = a.history.iter().map(|e| e.dev_score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best_score, best);
        let restored: f64 = -wa.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>();
        assert_eq!(restored, best);
    }

    #[test]
    fn fit_reports_non_finite_loss() {
        let mut store = ParameterStore::new();
        let w = store.add("w", Tensor::scalar(1.0)).unwrap();
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::desk() };
        let r = fit(
            &mut store,
            &cfg,
            cfg.key(),
            1,
            |g, _, _| {
                let x = g.param(w);
                Ok(g.affine_const(x, f64::NAN, 0.0))
            },
            |_| Ok(0.0),
            |_, _| {},
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(fit(&mut store, &cfg, cfg.key(), 0, |g, _, _| Ok(g.param(w)), |_| Ok(0.0), |_, _| {}).is_err());
    }
}
