use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A validation metric must beat the best so far by more than this to count.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

/// Reduce-on-plateau learning rate plus early stopping, both driven by one
/// higher-is-better validation metric.
///
/// Two counters: `plateau_count` resets on improvement *and* on every reduction,
/// `epochs_since_improvement` only on improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_initial: f64,
    pub lr_current: f64,
    pub factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub best_metric: f64,
    pub plateau_count: usize,
    pub epochs_since_improvement: usize,
    pub reductions: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScheduleEvent {
    pub improved: bool,
    pub reduced: bool,
    pub stop: bool,
}

impl Schedule {
    pub fn new(lr: f64, factor: f64, plateau_patience: usize, early_stop_patience: usize) -> Self {
        Self {
            lr_initial: lr,
            lr_current: lr,
            factor,
            plateau_patience,
            early_stop_patience,
            best_metric: f64::NEG_INFINITY,
            plateau_count: 0,
            epochs_since_improvement: 0,
            reductions: 0,
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_improvement >= self.early_stop_patience
    }
}

/// Feeds one end-of-epoch metric into the schedule.
pub fn scheduler_step(state: &mut Schedule, val_metric: f64) -> Result<ScheduleEvent> {
    if !val_metric.is_finite() {
        return Err(Error::Numeric(format!("validation metric is {val_metric}")));
    }
    let mut ev = ScheduleEvent::default();
    if val_metric > state.best_metric + IMPROVEMENT_THRESHOLD {
        state.best_metric = val_metric;
        state.plateau_count = 0;
        state.epochs_since_improvement = 0;
        ev.improved = true;
    } else {
        state.plateau_count += 1;
        state.epochs_since_improvement += 1;
        if state.plateau_count >= state.plateau_patience {
            state.lr_current *= state.factor;
            state.reductions += 1;
            state.plateau_count = 0;
            ev.reduced = true;
        }
    }
    ev.stop = state.should_stop();
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(metrics: &[f64]) -> Schedule {
        let mut s = Schedule::new(1e-3, 0.1, 5, 15);
        for &m in metrics {
            scheduler_step(&mut s, m).unwrap();
        }
        s
    }

    #[test]
    fn monotone_improvement_keeps_lr() {
        let s = run(&[0.1, 0.2, 0.3]);
        assert_eq!(s.lr_current, 1e-3);
        assert_eq!(s.best_metric, 0.3);
    }

    #[test]
    fn tiny_gains_are_not_improvements() {
        let s = run(&[0.5, 0.5 + 5e-7]);
        assert_eq!(s.best_metric, 0.5);
        assert_eq!(s.plateau_count, 1);
    }

    #[test]
    fn nan_metric_is_a_fault() {
        let mut s = Schedule::new(1e-3, 0.1, 5, 15);
        assert!(matches!(scheduler_step(&mut s, f64::NAN), Err(Error::Numeric(_))));
    }
}
