//! Minibatch Adam training loop.

use std::collections::BTreeMap;

use log::debug;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Gradients;
use crate::error::{config_err, Error, Result};
use crate::networks::params::ParamStore;
use crate::seeds::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Checkpoint callback period in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        if !(self.lr >= 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return config_err("invalid optimizer constants");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Adam {
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    step: usize,
}

impl Adam {
    /// Applies one bias-corrected update from the store's gradient slots.
    pub fn update(&mut self, store: &mut ParamStore, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (name, entry) in store.entries_mut() {
            let n = entry.value.len();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                let g = entry.grad.data[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                entry.value.data[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn head_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses[..k.min(self.losses.len())].iter().sum::<f64>() / k as f64
    }

    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(k)..]
            .iter()
            .sum::<f64>()
            / k as f64
    }
}

/// Runs `cfg.steps` Adam steps. `item_loss` receives the current parameters, the
/// step, the batch item index and an rng seeded from `(seed, step, item)`.
/// Item gradients are averaged in item order.
pub fn train<F, C>(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    mut item_loss: F,
    mut on_checkpoint: C,
) -> Result<TrainReport>
where
    F: FnMut(&ParamStore, usize, usize, &mut ChaCha8Rng) -> Result<(f64, Gradients)>,
    C: FnMut(usize, &ParamStore) -> Result<()>,
{
    cfg.validate()?;
    let mut adam = Adam::default();
    let mut report = TrainReport::default();
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        store.zero_grads();
        let mut loss = 0.0;
        for item in 0..cfg.batch_size {
            let mut rng = rng_for(cfg.seed, &[step as u64, item as u64]);
            let (l, grads) = item_loss(store, step, item, &mut rng)?;
            loss += l * scale;
            store.accumulate(&grads, scale)?;
        }
        if let Some(param) = first_non_finite(store, loss) {
            return Err(Error::NonFinite { step, param });
        }
        adam.update(store, cfg);
        report.losses.push(loss);
        if step % 50 == 0 {
            debug!("step {step}: loss {loss:.6}");
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, store)?;
        }
    }
    Ok(report)
}

fn first_non_finite(store: &ParamStore, loss: f64) -> Option<String> {
    let bad = store
        .entries()
        .find(|(_, e)| e.grad.data.iter().any(|v| !v.is_finite()));
    match bad {
        Some((name, _)) => Some(name.clone()),
        None if !loss.is_finite() => Some("<loss>".to_string()),
        None => None,
    }
}
