use serde::{Deserialize, Serialize};

/// Guards the relative change against a vanishing loss.
const REL_FLOOR: f64 = 1e-12;

/// Threshold comparisons are strict beyond rounding noise: a change that equals
/// a threshold in decimal but lands a few ulps below it in binary still fails.
const BOUNDARY_SLACK: f64 = 1e-9;

fn strictly_below(v: f64, threshold: f64) -> bool {
    v < threshold * (1.0 - BOUNDARY_SLACK)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerParams {
    pub decay: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub floor: f64,
    /// Compare the signed change instead of its magnitude.
    pub signed: bool,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        Self {
            decay: 0.5,
            eps_abs: 1e-4,
            eps_rel: 1e-4,
            floor: 1e-6,
            signed: false,
        }
    }
}

/// Plateau scheduler: decays the step size when the epoch loss stops moving,
/// both in absolute and relative terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub params: SchedulerParams,
    pub lr: f64,
    pub prev_loss: Option<f64>,
}

impl SchedulerState {
    pub fn new(initial_lr: f64, params: SchedulerParams) -> Self {
        Self {
            params,
            lr: initial_lr,
            prev_loss: None,
        }
    }

    /// Feeds the loss of the finished epoch. Returns whether the rate decayed.
    pub fn update(&mut self, loss: f64) -> bool {
        let decayed = match self.prev_loss {
            Some(prev) => {
                let p = &self.params;
                let delta = prev - loss;
                let d = if p.signed { delta } else { delta.abs() };
                strictly_below(d, p.eps_abs) && strictly_below(d / loss.abs().max(REL_FLOOR), p.eps_rel)
            }
            None => false,
        };
        if decayed {
            self.lr = (self.lr * self.params.decay).max(self.params.floor);
        }
        self.prev_loss = Some(loss);
        decayed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn primed(prev: f64, lr: f64) -> SchedulerState {
        SchedulerState {
            lr,
            prev_loss: Some(prev),
            params: SchedulerParams::default(),
        }
    }

    #[test]
    fn flat_loss_decays() {
        let mut s = primed(1.0, 0.03);
        assert!(s.update(1.0));
        assert_eq!(s.lr, 0.015);
        assert_eq!(s.prev_loss, Some(1.0));
    }

    #[test]
    fn large_drop_keeps_rate() {
        let mut s = primed(1.0, 0.03);
        assert!(!s.update(0.7));
        assert_eq!(s.lr, 0.03);
        assert_eq!(s.prev_loss, Some(0.7));
    }

    #[test]
    fn absolute_change_at_epsilon_keeps_rate() {
        let mut s = primed(0.50005, 0.03);
        assert!(!s.update(0.5));
        assert_eq!(s.lr, 0.03);
    }

    #[test]
    fn signed_mode_decays_on_increase() {
        let mut s = primed(0.5, 0.03);
        s.params.signed = true;
        assert!(s.update(0.9));
        let mut s = primed(0.5, 0.03);
        assert!(!s.update(0.9));
    }

    #[test]
    fn first_epoch_only_records() {
        let mut s = SchedulerState::new(0.03, SchedulerParams::default());
        assert!(!s.update(2.0));
        assert_eq!(s.prev_loss, Some(2.0));
    }

    #[test]
    fn rate_never_drops_below_floor() {
        let mut s = primed(1.0, 2e-6);
        for _ in 0..5 {
            s.update(1.0);
        }
        assert_eq!(s.lr, 1e-6);
    }
}
