//! Minibatch Adam loop with periodic validation, best-checkpoint keeping and
//! patience-based early stopping. Model-specific code supplies two closures:
//! one returning the batch loss and gradient for a given step, one returning
//! the validation loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Number of consecutive non-improving evaluations tolerated before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 4,
            max_steps: 2000,
            eval_every: 100,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::config("batch_size, max_steps and eval_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    /// Mean batch loss since the previous row. At step 0 this is the loss of
    /// the first batch before any update.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Whether this evaluation replaced the kept checkpoint.
    pub saved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ParamSet,
    pub best_val: f64,
    pub log: Vec<LogRow>,
    pub steps_run: usize,
}

/// Runs the loop. `batch` receives the current parameters and the 1-based
/// step number and returns `(loss, grads)` for that step's minibatch.
/// The step-0 evaluation is logged as a baseline; patience counts only the
/// evaluations that follow training steps, so `patience = 0` stops after the
/// first of those.
pub fn fit<B, V>(mut params: ParamSet, cfg: &TrainConfig, mut batch: B, mut val: V) -> Result<TrainOutcome>
where
    B: FnMut(&ParamSet, usize) -> Result<(f64, ParamSet)>,
    V: FnMut(&ParamSet) -> Result<f64>,
{
    cfg.validate()?;
    let mut adam = AdamState::new(&params, AdamConfig::default());
    let mut log = Vec::new();
    let mut best: Option<(ParamSet, f64)> = None;
    let mut since_best = 0usize;
    let mut window = 0.0;
    let mut window_n = 0usize;
    let mut steps_run = 0;

    for step in 1..=cfg.max_steps {
        let (loss, grads) = batch(&params, step)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        if step == 1 {
            log.push(LogRow {
                step: 0,
                train_loss: loss,
                val_loss: val(&params)?,
                saved: false,
            });
        }
        adam_step(&mut params, &grads, &mut adam, cfg.lr)?;
        steps_run = step;
        window += loss;
        window_n += 1;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let v = val(&params)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("validation loss at step {step}")));
            }
            let improved = best.as_ref().is_none_or(|(_, b)| v < *b);
            if improved {
                best = Some((params.clone(), v));
                since_best = 0;
            } else {
                since_best += 1;
            }
            log.push(LogRow {
                step,
                train_loss: window / window_n as f64,
                val_loss: v,
                saved: improved,
            });
            window = 0.0;
            window_n = 0;
            if !improved && since_best >= cfg.patience || cfg.patience == 0 {
                break;
            }
        }
    }
    let (best, best_val) = best.expect("at least one evaluation runs");
    Ok(TrainOutcome {
        best,
        best_val,
        log,
        steps_run,
    })
}

/// Writes `step,train_loss,val_loss,saved` rows.
pub fn write_log(path: &std::path::Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
