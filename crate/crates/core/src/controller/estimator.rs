use serde::{Deserialize, Serialize};

use crate::controller::clock::BudgetClock;
use crate::error::{Error, Result};

/// Exponentially weighted estimate of a worker's round duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochCostEstimator {
    pub history: Vec<f64>,
    pub ewma: f64,
    pub ewma_decay: f64,
    pub safety_factor: f64,
}

impl Default for EpochCostEstimator {
    fn default() -> Self {
        EpochCostEstimator {
            history: Vec::new(),
            ewma: 0.0,
            ewma_decay: 0.3,
            safety_factor: 1.2,
        }
    }
}

impl EpochCostEstimator {
    /// Records a round. The first observation initializes the average.
    pub fn observe(&mut self, seconds: f64) -> Result<()> {
        if !(seconds >= 0.0) || !seconds.is_finite() {
            return Err(Error::Argument(format!("invalid round duration {seconds}")));
        }
        self.ewma = if self.history.is_empty() {
            seconds
        } else {
            self.ewma_decay * seconds + (1.0 - self.ewma_decay) * self.ewma
        };
        self.history.push(seconds);
        Ok(())
    }

    /// Time that must remain, beyond the reserve, to start another round.
    pub fn required(&self) -> f64 {
        self.safety_factor * self.ewma
    }
}

pub fn estimate_round_cost(mut est: EpochCostEstimator, new_duration: f64) -> Result<EpochCostEstimator> {
    est.observe(new_duration)?;
    Ok(est)
}

/// Continue iff `remaining > safety * ewma + reserve`. Always true before
/// the first observation.
pub fn should_continue_with(remaining: f64, est: &EpochCostEstimator, reserve: f64) -> bool {
    est.history.is_empty() || remaining > est.required() + reserve
}

pub fn should_continue(clock: &BudgetClock, est: &EpochCostEstimator, reserve: f64) -> bool {
    should_continue_with(clock.remaining(), est, reserve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ewma_updates() {
        let est = estimate_round_cost(EpochCostEstimator::default(), 10.0).unwrap();
        assert_eq!(est.ewma, 10.0);
        let est = estimate_round_cost(est, 20.0).unwrap();
        assert!((est.ewma - 13.0).abs() < 1e-12);
        assert_eq!(est.history, vec![10.0, 20.0]);
        assert!(estimate_round_cost(est, -1.0).is_err());
    }

    #[test]
    fn constant_durations_converge() {
        // ewma_t - c = 0.7^t (ewma_0 - c); starting from 1 toward 7.5
        let mut est = EpochCostEstimator::default();
        est.observe(1.0).unwrap();
        for _ in 0..50 {
            est.observe(7.5).unwrap();
        }
        let bound = 6.5 * 0.7f64.powi(50);
        assert!((est.ewma - 7.5).abs() <= bound + 1e-12);
        assert!((est.ewma - 7.5).abs() < 1e-6);
    }

    #[test]
    fn continue_rule() {
        let mut est = EpochCostEstimator::default();
        assert!(should_continue_with(0.0, &est, 5.0));
        est.observe(10.0).unwrap();
        assert!(!should_continue_with(15.0, &est, 5.0));
        assert!(should_continue_with(10000.0, &est, 5.0));
        // exactly at the threshold: stop
        assert!(!should_continue_with(17.0, &est, 5.0));
        assert!(should_continue_with(17.000001, &est, 5.0));
    }
}
