//! Minibatch training loop shared by the autoencoders.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::batch::Batch;
use crate::data::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::model::{stream_rng, SequenceModel};
use crate::nn::Optimizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Rescale the gradient when its global norm exceeds this value.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to continue an interrupted run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    pub epoch: usize,
    /// Mean training loss of each finished epoch.
    pub losses: Vec<f64>,
    pub optimizer: Optimizer,
}

impl FitState {
    pub fn new<M: SequenceModel + ?Sized>(model: &M, cfg: &FitConfig) -> Self {
        Self {
            epoch: 0,
            losses: Vec::new(),
            optimizer: Optimizer::adam(model.params(), cfg.lr, cfg.beta1, cfg.beta2),
        }
    }
}

/// Trains until `state.epoch == cfg.epochs`. Epoch `e` draws its shuffle and
/// any sampling decisions from stream `e` of `seed`, so resuming from a saved
/// state reproduces the uninterrupted run. `on_epoch` runs after every epoch.
///
/// A non-finite loss stops training with [`Error::Training`]; the model keeps
/// the parameters of the last finished update.
pub fn fit<M, F>(model: &mut M, data: &Dataset, cfg: &FitConfig, seed: u64, state: &mut FitState, mut on_epoch: F) -> Result<()>
where
    M: SequenceModel + ?Sized,
    F: FnMut(&M, &FitState) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let layout = model.layout().clone();
    while state.epoch < cfg.epochs {
        let mut rng = stream_rng(seed, state.epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Instance> = chunk.iter().map(|&i| &data.instances[i]).collect();
            let batch = Batch::new(&refs, &layout);
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &batch, &mut rng);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {}", state.epoch)));
            }
            let mut grads = g.backward(loss);
            if let Some(max) = cfg.grad_clip {
                grads.clip_norm(model.params(), max);
            }
            state.optimizer.step(model.params_mut(), &grads);
            total += value * chunk.len() as f64;
        }
        state.losses.push(total / data.len() as f64);
        state.epoch += 1;
        log::debug!("epoch {} loss {:.6}", state.epoch, state.losses[state.epoch - 1]);
        on_epoch(model, state)?;
    }
    Ok(())
}

/// Exponential moving average of a trace, `alpha = 2 / (window + 1)`.
pub fn smooth(trace: &[f64], window: usize) -> Vec<f64> {
    let alpha = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = None;
    for &v in trace {
        let next = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{AeConfig, Autoencoder, Feeding};
    use crate::testutil::complete_sines;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(feeding: Feeding) -> (Autoencoder, Dataset, FitConfig) {
        let ds = complete_sines(10, 6, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ae = Autoencoder::new(
            &ds.schema,
            AeConfig {
                layers: 2,
                hidden: 8,
                feeding,
            },
            &mut rng,
        )
        .unwrap();
        let cfg = FitConfig {
            epochs: 40,
            batch_size: 4,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: None,
        };
        (ae, ds, cfg)
    }

    #[test]
    fn loss_decreases_on_a_toy_set() {
        let (mut ae, ds, cfg) = setup(Feeding::Sampling { teacher_prob: 0.5 });
        let mut state = FitState::new(&ae, &cfg);
        fit(&mut ae, &ds, &cfg, 7, &mut state, |_, _| Ok(())).unwrap();
        assert_eq!(state.losses.len(), 40);
        assert!(state.losses[39] < 0.5 * state.losses[0], "{:?}", state.losses);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (ae0, ds, cfg) = setup(Feeding::Sampling { teacher_prob: 0.5 });
        let mut full = ae0.clone();
        let mut state = FitState::new(&full, &cfg);
        fit(&mut full, &ds, &cfg, 1, &mut state, |_, _| Ok(())).unwrap();

        let mut part = ae0.clone();
        let mut saved = None;
        let mut st = FitState::new(&part, &cfg);
        let _ = fit(&mut part, &ds, &cfg, 1, &mut st, |m, s| {
            if s.epoch == 15 {
                saved = Some((m.clone(), s.clone()));
                return Err(Error::Training("stop".into()));
            }
            Ok(())
        });
        let (mut resumed, mut st) = saved.unwrap();
        fit(&mut resumed, &ds, &cfg, 1, &mut st, |_, _| Ok(())).unwrap();
        assert_eq!(st, state);
        assert_eq!(resumed.params().digest(), full.params().digest());
    }

    #[test]
    fn divergence_is_reported() {
        let (mut ae, ds, cfg) = setup(Feeding::Teacher);
        let id = ae.params().ids().next().unwrap();
        ae.params_mut().get_mut(id)[[0, 0]] = f64::NAN;
        let mut state = FitState::new(&ae, &cfg);
        let err = fit(&mut ae, &ds, &cfg, 0, &mut state, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn smoothing_keeps_constants() {
        assert_eq!(smooth(&[2.0; 5], 3), vec![2.0; 5]);
    }
}
