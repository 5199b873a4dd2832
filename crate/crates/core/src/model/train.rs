use super::forward::{loss, predict, Graph};
use super::{Example, MmonModel, Mode, ModelError, MODULE_COUNT};
use crate::puzzle::derive_seed;
use crate::tensor::AdamState;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub mode: Mode,
    /// Margin weight λ.
    pub lambda: f64,
    /// Rule-alignment weight μ (meta mode only).
    pub mu: f64,
    /// Drop probability inside the attribute modules; 0 disables dropout.
    pub dropout: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Meta,
            lambda: 0.01,
            mu: 0.1,
            dropout: 0.0,
        }
    }
}

/// Loss, correctness and parameter gradients of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGrad {
    pub loss: f64,
    pub correct: bool,
    /// Indexed like [`MmonModel::params`]; `None` for parameters the example
    /// never touched.
    pub grads: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
    pub frozen: [bool; MODULE_COUNT],
}

/// Modules whose (slot, attribute) appears in no example's meta-target.
pub fn frozen_modules<'a>(batch: impl IntoIterator<Item = &'a Example>) -> [bool; MODULE_COUNT] {
    let mut seen = [false; MODULE_COUNT];
    for ex in batch {
        for (s, m) in seen.iter_mut().zip(ex.meta_modules()) {
            *s |= m;
        }
    }
    seen.map(|s| !s)
}

impl MmonModel {
    /// The training objective of one example: the scoring loss plus, in meta
    /// mode, μ times the rule-alignment term.
    pub fn instance_gradient(
        &self,
        ex: &Example,
        cfg: &StepConfig,
        dropout_seed: u64,
    ) -> Result<InstanceGrad, ModelError> {
        let mut g = Graph::new(self, true, cfg.dropout, dropout_seed);
        let out = g.run(ex, cfg.mode)?;
        let label = ex.label as usize;
        let mut objective = loss(&mut g.tape, out.scores, label, cfg.lambda)?;
        if cfg.mode == Mode::Meta && cfg.mu > 0.0 {
            let align = g.alignment(ex, &out)?;
            let weighted = g.tape.scale(align, cfg.mu);
            objective = g.tape.add(objective, weighted)?;
        }
        let correct = predict(g.tape.data(out.scores)) == label;
        let value = g.tape.data(objective)[0];
        g.tape.backward(objective)?;
        let grads = g
            .vars
            .clone()
            .into_iter()
            .map(|v| v.and_then(|v| g.tape.take_grad(v)))
            .collect();
        Ok(InstanceGrad {
            loss: value,
            correct,
            grads,
        })
    }

    /// Averages per-example gradients in order, freezes the masked modules and
    /// takes one Adam step.
    pub fn apply_gradients(
        &mut self,
        grads: &[InstanceGrad],
        frozen: &[bool; MODULE_COUNT],
        state: &mut AdamState,
    ) -> Result<StepStats, ModelError> {
        if grads.is_empty() {
            return Err(ModelError::BadInput("empty batch".into()));
        }
        let scale = 1.0 / grads.len() as f64;
        for (i, p) in self.params.iter_mut().enumerate() {
            let mut sum = vec![0.0; p.numel()];
            for g in grads {
                if let Some(gi) = &g.grads[i] {
                    sum.iter_mut().zip(gi).for_each(|(s, v)| *s += v);
                }
            }
            sum.iter_mut().for_each(|s| *s *= scale);
            p.grad = Some(sum);
        }
        let frozen_params: Vec<usize> = (0..MODULE_COUNT)
            .filter(|&j| frozen[j])
            .flat_map(|j| self.module_params(j))
            .collect();
        for &i in &frozen_params {
            self.params[i].requires_grad = false;
            self.params[i].grad = None;
        }
        let result = state.step(&mut self.params);
        for &i in &frozen_params {
            self.params[i].requires_grad = true;
        }
        result?;
        let n = grads.len() as f64;
        Ok(StepStats {
            loss: grads.iter().map(|g| g.loss).sum::<f64>() / n,
            accuracy: grads.iter().filter(|g| g.correct).count() as f64 / n,
            frozen: *frozen,
        })
    }

    /// One optimisation step over a batch. Modules absent from every
    /// example's meta-target are left bit-identical; encoders, relation head and
    /// rule table always update.
    pub fn masked_train_step(
        &mut self,
        batch: &[Example],
        state: &mut AdamState,
        cfg: &StepConfig,
        seed: u64,
    ) -> Result<StepStats, ModelError> {
        let grads = batch
            .iter()
            .enumerate()
            .map(|(i, ex)| self.instance_gradient(ex, cfg, derive_seed(seed, i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        self.apply_gradients(&grads, &frozen_modules(batch), state)
    }
}
