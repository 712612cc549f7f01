use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::AdversarialPatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    #[default]
    Adam,
    Sgd,
    Bim,
    Pgd,
    Mim,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 5] = [Self::Adam, Self::Sgd, Self::Bim, Self::Pgd, Self::Mim];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
            Self::Bim => "bim",
            Self::Pgd => "pgd",
            Self::Mim => "mim",
        }
    }
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown attack method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    pub method: AttackMethod,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Momentum decay for the accumulated normalized gradient.
    pub mim_decay: f64,
    /// Half-width of the uniform start perturbation; `None` uses `lr`.
    pub pgd_init_radius: Option<f64>,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            method: AttackMethod::Adam,
            lr: 0.03,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            mim_decay: 1.0,
            pgd_init_radius: None,
        }
    }
}

/// Optimizer state that survives across steps and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackState {
    pub params: AttackParams,
    /// Current step size; the scheduler writes here.
    pub lr: f64,
    /// Applied (non-skipped) updates so far.
    pub step: u64,
    /// Steps skipped because the gradient was not finite.
    pub incidents: u64,
    first: Vec<f64>,
    second: Vec<f64>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

impl AttackState {
    pub fn new(params: AttackParams, seed: u64) -> Self {
        Self {
            params,
            lr: params.lr,
            step: 0,
            incidents: 0,
            first: Vec::new(),
            second: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn method(&self) -> AttackMethod {
        self.params.method
    }
}

/// Applies one update of `state.params.method` to `patch` in place and clamps
/// it to [0,1]. A gradient with any non-finite entry leaves everything
/// untouched except the incident counter.
pub fn attack_step(
    patch: &mut AdversarialPatch,
    grad: &[f64],
    state: &mut AttackState,
) -> Result<StepOutcome> {
    let n = patch.pixels().len();
    if grad.len() != n {
        return Err(Error::shape(n.to_string(), grad.len().to_string()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        state.incidents += 1;
        log::warn!("non-finite patch gradient; step skipped");
        return Ok(StepOutcome::SkippedNonFinite);
    }
    if state.first.len() != n {
        state.first = vec![0.0; n];
        state.second = vec![0.0; n];
    }
    let lr = state.lr;
    let mut x: Vec<f64> = patch.pixels().iter().map(|&v| v as f64).collect();
    match state.params.method {
        AttackMethod::Sgd => {
            for (xi, g) in x.iter_mut().zip(grad) {
                *xi -= lr * g;
            }
        }
        AttackMethod::Adam => {
            let (b1, b2) = state.params.adam_betas;
            let t = (state.step + 1) as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for i in 0..n {
                let g = grad[i];
                state.first[i] = b1 * state.first[i] + (1.0 - b1) * g;
                state.second[i] = b2 * state.second[i] + (1.0 - b2) * g * g;
                let m = state.first[i] / c1;
                let v = state.second[i] / c2;
                x[i] -= lr * m / (v.sqrt() + state.params.adam_eps);
            }
        }
        AttackMethod::Bim => {
            for (xi, g) in x.iter_mut().zip(grad) {
                *xi -= lr * sign(*g);
            }
        }
        AttackMethod::Pgd => {
            if state.step == 0 {
                let r = state.params.pgd_init_radius.unwrap_or(lr);
                if r > 0.0 {
                    for xi in x.iter_mut() {
                        *xi = (*xi + state.rng.gen_range(-r..=r)).clamp(0.0, 1.0);
                    }
                }
            }
            for (xi, g) in x.iter_mut().zip(grad) {
                *xi -= lr * sign(*g);
            }
        }
        AttackMethod::Mim => {
            let l1: f64 = grad.iter().map(|g| g.abs()).sum();
            let norm = if l1 > 0.0 { l1 } else { 1.0 };
            let m = state.params.mim_decay;
            for i in 0..n {
                state.first[i] = m * state.first[i] + grad[i] / norm;
                x[i] -= lr * sign(state.first[i]);
            }
        }
    }
    patch.assign(&x)?;
    state.step += 1;
    Ok(StepOutcome::Applied)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(v: f32) -> AdversarialPatch {
        AdversarialPatch::from_pixels(2, 2, vec![v; 12]).unwrap()
    }

    fn state(method: AttackMethod, lr: f64) -> AttackState {
        AttackState::new(
            AttackParams {
                method,
                lr,
                ..AttackParams::default()
            },
            0,
        )
    }

    #[test]
    fn zero_gradient_sgd_is_a_no_op() {
        let mut p = patch(0.3);
        let before = p.clone();
        let mut s = state(AttackMethod::Sgd, 0.1);
        attack_step(&mut p, &[0.0; 12], &mut s).unwrap();
        assert_eq!(p.pixels(), before.pixels());
    }

    #[test]
    fn bim_clamps_at_one() {
        let mut p = patch(0.999);
        let mut s = state(AttackMethod::Bim, 0.01);
        attack_step(&mut p, &[-1.0; 12], &mut s).unwrap();
        assert!(p.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        for m in AttackMethod::ALL {
            let mut p = patch(0.5);
            let mut s = state(m, 0.1);
            let mut g = vec![1.0; 12];
            g[3] = f64::NAN;
            assert_eq!(attack_step(&mut p, &g, &mut s).unwrap(), StepOutcome::SkippedNonFinite);
            assert_eq!(s.incidents, 1);
            assert_eq!(s.step, 0);
            assert!(p.pixels().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = patch(0.5);
        let mut s = state(AttackMethod::Adam, 0.1);
        assert!(matches!(attack_step(&mut p, &[0.0; 3], &mut s), Err(Error::Shape { .. })));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = patch(0.5);
        let mut s = state(AttackMethod::Adam, 0.01);
        let g: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 3.0 } else { -0.2 }).collect();
        attack_step(&mut p, &g, &mut s).unwrap();
        for (i, &v) in p.pixels().iter().enumerate() {
            let expected = if i % 2 == 0 { 0.49 } else { 0.51 };
            assert!((v as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn pgd_start_is_random_and_bounded() {
        let mut p = patch(0.5);
        let mut s = state(AttackMethod::Pgd, 0.05);
        attack_step(&mut p, &[0.0; 12], &mut s).unwrap();
        assert!(p.pixels().iter().all(|&v| (v - 0.5).abs() <= 0.05 + 1e-6));
        assert!(p.pixels().iter().any(|&v| v != 0.5));
        let snapshot = p.clone();
        attack_step(&mut p, &[0.0; 12], &mut s).unwrap();
        assert_eq!(p.pixels(), snapshot.pixels());
    }

    #[test]
    fn method_names_round_trip() {
        for m in AttackMethod::ALL {
            assert_eq!(m.as_str().parse::<AttackMethod>().unwrap(), m);
        }
        assert!("fgsm".parse::<AttackMethod>().is_err());
    }
}
