//! Adam and reduce-on-plateau learning-rate control.

use std::collections::BTreeMap;

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f32]> {
        self.first.get(name).map(Vec::as_slice)
    }

    /// One bias-corrected Adam update of every trainable parameter.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f64,
    ) -> Result<()> {
        let names: Vec<String> = params.trainable_names().map(str::to_string).collect();
        for name in &names {
            let n = params.get(name)?.len();
            match grads.get(name) {
                None => {
                    return Err(Error::Contract(format!(
                        "no gradient for parameter {name:?}"
                    )))
                }
                Some(g) if g.len() != n => {
                    return Err(Error::Dimension(format!(
                        "gradient for {name:?} has {} entries, parameter has {n}",
                        g.len()
                    )))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for name in names {
            let g = &grads[&name];
            let p = params.get_mut(&name)?;
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name)
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g)
            {
                let gi = gi as f64;
                let m_new = b1 * *mi as f64 + (1.0 - b1) * gi;
                let v_new = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + self.eps);
                *pi = (*pi as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step(params, grads, lr)
}

/// Reduce-on-plateau schedule: after `patience` consecutive epochs without a
/// strict improvement of the validation loss, the rate is multiplied by
/// `factor` and floored at `min_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrPlateau {
    pub initial_lr: f64,
    pub current_lr: f64,
    pub best: f64,
    pub since_improvement: usize,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl LrPlateau {
    pub fn new(initial_lr: f64) -> Self {
        Self {
            initial_lr,
            current_lr: initial_lr,
            best: f64::INFINITY,
            since_improvement: 0,
            factor: 0.1,
            patience: 4,
            min_lr: 1e-7,
        }
    }

    pub fn update(&mut self, validation_loss: f64) -> f64 {
        if validation_loss < self.best {
            self.best = validation_loss;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
            if self.since_improvement >= self.patience {
                self.current_lr = snap_decimal(self.current_lr * self.factor).max(self.min_lr);
                self.since_improvement = 0;
            }
        }
        self.current_lr
    }
}

pub fn lr_plateau_update(state: &mut LrPlateau, validation_loss: f64) -> f64 {
    state.update(validation_loss)
}

/// Rounds to 12 significant digits so repeated decimal scaling lands on the
/// nearest double of the intended decimal (1e-4 · 0.1 · 0.1 → 1e-6).
fn snap_decimal(x: f64) -> f64 {
    format!("{x:.11e}").parse().unwrap_or(x)
}
