//! Stochastic rescaling of residual branches.
//!
//! Forward: `z_out = z + (β + α − βα) · F(z)` with `β ~ Bernoulli(p)` and
//! `α ~ U(1 − e, 1 + e)`. Backward replaces `β` by an independently drawn
//! `γ` with the same distribution, so the branch gradient is scaled by
//! `(γ + α − γα)` while the identity path passes the upstream gradient through.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShakeDropGranularity {
    /// One α per block per forward pass.
    #[default]
    Scalar,
    /// One α per channel of the block output.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShakeDropConfig {
    /// P(β = 1). A value of 1 keeps the plain residual sum.
    pub prob: f64,
    /// Half-width `e` of the α interval.
    pub range: f64,
    pub granularity: ShakeDropGranularity,
}

impl Default for ShakeDropConfig {
    fn default() -> Self {
        Self {
            prob: 0.5,
            range: 1.0,
            granularity: ShakeDropGranularity::Scalar,
        }
    }
}

impl ShakeDropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::Config(format!(
                "shakedrop probability {} not in [0,1]",
                self.prob
            )));
        }
        if !(self.range >= 0.0) {
            return Err(Error::Config(format!(
                "shakedrop range {} must be >= 0",
                self.range
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn mix_factor(gate: f64, alpha: f64) -> f64 {
    gate + alpha - gate * alpha
}

/// One forward draw for a block.
#[derive(Debug, Clone, PartialEq)]
pub struct ShakeDropSample {
    pub beta: f64,
    /// Length 1 (scalar) or the number of channels.
    pub alpha: Vec<f64>,
}

impl ShakeDropSample {
    pub fn fixed(beta: f64, alpha: f64) -> Self {
        Self {
            beta,
            alpha: vec![alpha],
        }
    }

    pub fn draw(cfg: &ShakeDropConfig, channels: usize, rng: &mut dyn RngCore) -> Self {
        let beta = draw_gate(cfg.prob, rng);
        let n = match cfg.granularity {
            ShakeDropGranularity::Scalar => 1,
            ShakeDropGranularity::PerChannel => channels.max(1),
        };
        let alpha = (0..n)
            .map(|_| draw_alpha(cfg.range, rng))
            .collect();
        Self { beta, alpha }
    }

    /// Forward factor for element `i` of a tensor of length `len`.
    #[inline]
    fn factor_at(&self, gate: f64, i: usize, len: usize) -> f64 {
        let plane = len / self.alpha.len();
        mix_factor(gate, self.alpha[i / plane])
    }
}

pub fn draw_gate(prob: f64, rng: &mut dyn RngCore) -> f64 {
    if rng.gen::<f64>() < prob {
        1.0
    } else {
        0.0
    }
}

fn draw_alpha(range: f64, rng: &mut dyn RngCore) -> f64 {
    if range == 0.0 {
        1.0
    } else {
        rng.gen_range(1.0 - range..=1.0 + range)
    }
}

fn check_layout(len: usize, sample: &ShakeDropSample) -> Result<()> {
    if sample.alpha.is_empty() || len % sample.alpha.len() != 0 {
        return Err(Error::shape(
            format!("length divisible by {} alpha values", sample.alpha.len()),
            len.to_string(),
        ));
    }
    Ok(())
}

/// `z + (β + α − βα) · f_out`, elementwise.
pub fn shakedrop_forward(z: &[f64], f_out: &[f64], sample: &ShakeDropSample) -> Result<Vec<f64>> {
    if z.len() != f_out.len() {
        return Err(Error::shape(z.len().to_string(), f_out.len().to_string()));
    }
    check_layout(z.len(), sample)?;
    let n = z.len();
    Ok(z.iter()
        .zip(f_out)
        .enumerate()
        .map(|(i, (&a, &f))| {
            if sample.beta == 1.0 {
                a + f
            } else {
                a + sample.factor_at(sample.beta, i, n) * f
            }
        })
        .collect())
}

/// `∂E/∂z = ∂E/∂z_out · (1 + (γ + α − γα) · ∂F/∂z)`.
///
/// `branch_vjp` maps a gradient at the branch output to the gradient at the
/// block input (the transposed Jacobian of `F` applied to it).
pub fn shakedrop_backward<V>(
    upstream: &[f64],
    sample: &ShakeDropSample,
    gamma: f64,
    branch_vjp: V,
) -> Result<Vec<f64>>
where
    V: FnOnce(&[f64]) -> Vec<f64>,
{
    check_layout(upstream.len(), sample)?;
    let n = upstream.len();
    let scaled: Vec<f64> = upstream
        .iter()
        .enumerate()
        .map(|(i, &g)| g * sample.factor_at(gamma, i, n))
        .collect();
    let through_branch = branch_vjp(&scaled);
    if through_branch.len() != n {
        return Err(Error::shape(n.to_string(), through_branch.len().to_string()));
    }
    Ok(upstream
        .iter()
        .zip(through_branch)
        .map(|(&g, b)| g + b)
        .collect())
}

/// Per-block state that pairs a forward draw with its backward pass.
#[derive(Debug, Clone, Default)]
pub struct ShakeDropGate {
    recorded: Option<ShakeDropSample>,
}

impl ShakeDropGate {
    pub fn forward(
        &mut self,
        z: &[f64],
        f_out: &[f64],
        sample: ShakeDropSample,
    ) -> Result<Vec<f64>> {
        let out = shakedrop_forward(z, f_out, &sample)?;
        self.recorded = Some(sample);
        Ok(out)
    }

    pub fn recorded(&self) -> Option<&ShakeDropSample> {
        self.recorded.as_ref()
    }

    /// Scale for the branch gradient given a freshly drawn γ, consuming the
    /// recorded forward sample.
    pub fn take_backward_scales(&mut self, gamma: f64, len: usize) -> Result<Vec<f64>> {
        let sample = self
            .recorded
            .take()
            .ok_or_else(|| Error::State("shakedrop backward without a recorded forward".into()))?;
        check_layout(len, &sample)?;
        Ok(sample
            .alpha
            .iter()
            .map(|&a| mix_factor(gamma, a))
            .collect())
    }

    pub fn backward<V>(
        &mut self,
        upstream: &[f64],
        gamma: f64,
        branch_vjp: V,
    ) -> Result<Vec<f64>>
    where
        V: FnOnce(&[f64]) -> Vec<f64>,
    {
        let sample = self
            .recorded
            .take()
            .ok_or_else(|| Error::State("shakedrop backward without a recorded forward".into()))?;
        shakedrop_backward(upstream, &sample, gamma, branch_vjp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gate_open_is_plain_residual_bitwise() {
        let z = [0.1, -2.5, 3.75, 1e-17];
        let f = [0.3, 0.7, -1.1, 5.0];
        for alpha in [0.0, 0.37, 1.9, 2.0] {
            let out = shakedrop_forward(&z, &f, &ShakeDropSample::fixed(1.0, alpha)).unwrap();
            let plain: Vec<f64> = z.iter().zip(&f).map(|(a, b)| a + b).collect();
            assert_eq!(out, plain);
        }
    }

    #[test]
    fn gate_closed_examples() {
        let z = [1.0, 2.0];
        let f = [0.5, -0.25];
        let dropped = shakedrop_forward(&z, &f, &ShakeDropSample::fixed(0.0, 0.0)).unwrap();
        assert_eq!(dropped, vec![1.0, 2.0]);
        let doubled = shakedrop_forward(&z, &f, &ShakeDropSample::fixed(0.0, 2.0)).unwrap();
        assert_eq!(doubled, vec![2.0, 1.5]);
    }

    #[test]
    fn forward_shape_mismatch() {
        let err = shakedrop_forward(&[1.0], &[1.0, 2.0], &ShakeDropSample::fixed(1.0, 1.0));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_gamma_one_and_zero() {
        let up = [1.0, -2.0];
        let sample = ShakeDropSample::fixed(0.0, 0.0);
        // F(z) = 3z, so the plain residual gradient is 4·up.
        let vjp = |g: &[f64]| g.iter().map(|v| 3.0 * v).collect::<Vec<_>>();
        assert_eq!(
            shakedrop_backward(&up, &sample, 1.0, vjp).unwrap(),
            vec![4.0, -8.0]
        );
        assert_eq!(
            shakedrop_backward(&up, &sample, 0.0, vjp).unwrap(),
            vec![1.0, -2.0]
        );
    }

    #[test]
    fn backward_requires_forward() {
        let mut gate = ShakeDropGate::default();
        let err = gate.backward(&[1.0], 1.0, |g| g.to_vec());
        assert!(matches!(err, Err(Error::State(_))));
        gate.forward(&[1.0], &[1.0], ShakeDropSample::fixed(1.0, 1.0))
            .unwrap();
        assert!(gate.backward(&[1.0], 1.0, |g| g.to_vec()).is_ok());
        assert!(gate.backward(&[1.0], 1.0, |g| g.to_vec()).is_err());
    }

    #[test]
    fn per_channel_alpha_layout() {
        let cfg = ShakeDropConfig {
            prob: 0.0,
            range: 1.0,
            granularity: ShakeDropGranularity::PerChannel,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ShakeDropSample::draw(&cfg, 2, &mut rng);
        assert_eq!(s.alpha.len(), 2);
        let out = shakedrop_forward(&[0.0; 4], &[1.0; 4], &s).unwrap();
        assert_eq!(out, vec![s.alpha[0], s.alpha[0], s.alpha[1], s.alpha[1]]);
    }

    #[test]
    fn draws_respect_ranges() {
        let cfg = ShakeDropConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = ShakeDropSample::draw(&cfg, 4, &mut rng);
            assert!(s.beta == 0.0 || s.beta == 1.0);
            assert!((0.0..=2.0).contains(&s.alpha[0]));
        }
    }
}
