//! DDPM noise schedule, forward noising and ancestral sampling for
//! clean-signal (x0) predictors.

use hoimotion_nn::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// `ᾱ_{t-1}`, with `ᾱ_{-1} = 1`.
    pub alpha_bars_prev: Vec<f64>,
    /// Posterior variances; zero at `t = 0`.
    pub posterior_variance: Vec<f64>,
    /// Coefficient of the clean estimate in the posterior mean.
    pub posterior_coef_x0: Vec<f64>,
    /// Coefficient of `x_t` in the posterior mean.
    pub posterior_coef_xt: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(CoreError::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(CoreError::InvalidArgument(format!("betas must lie in (0, 1), got {b}")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let alpha_bars_prev: Vec<f64> =
            std::iter::once(1.0).chain(alpha_bars[..alpha_bars.len() - 1].iter().copied()).collect();
        let n = betas.len();
        let mut posterior_variance = Vec::with_capacity(n);
        let mut posterior_coef_x0 = Vec::with_capacity(n);
        let mut posterior_coef_xt = Vec::with_capacity(n);
        for t in 0..n {
            let denom = 1.0 - alpha_bars[t];
            posterior_variance.push(betas[t] * (1.0 - alpha_bars_prev[t]) / denom);
            posterior_coef_x0.push(betas[t] * alpha_bars_prev[t].sqrt() / denom);
            posterior_coef_xt.push((1.0 - alpha_bars_prev[t]) * alphas[t].sqrt() / denom);
        }
        Ok(Self { betas, alphas, alpha_bars, alpha_bars_prev, posterior_variance, posterior_coef_x0, posterior_coef_xt })
    }

    /// Cosine schedule with offset `s = 0.008`, betas clipped to 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(CoreError::InvalidArgument("schedule needs at least one step".into()));
        }
        let s = 0.008;
        let f = |t: f64| (((t / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let betas = (0..steps)
            .map(|t| (1.0 - f(t as f64 + 1.0) / f(t as f64)).clamp(1e-8, 0.999))
            .collect();
        Self::from_betas(betas)
    }

    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(CoreError::InvalidArgument("schedule needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|t| if steps == 1 { start } else { start + (end - start) * t as f64 / (steps - 1) as f64 })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(CoreError::InvalidArgument(format!("step {t} outside schedule of {} steps", self.steps())));
        }
        Ok(())
    }

    /// `c0 · x0_hat + ct · x_t`
    pub fn posterior_mean(&self, x0_hat: &Matrix, x_t: &Matrix, t: usize) -> Matrix {
        let (c0, ct) = (self.posterior_coef_x0[t], self.posterior_coef_xt[t]);
        x0_hat.zip_map(x_t, |a, b| c0 * a + ct * b)
    }
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · noise`
pub fn forward_diffuse(x0: &Matrix, t: usize, noise: &Matrix, schedule: &DiffusionSchedule) -> Result<Matrix> {
    schedule.check_t(t)?;
    if x0.shape() != noise.shape() {
        return Err(CoreError::Shape(format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape())));
    }
    Ok(forward_diffuse_at(x0, schedule.alpha_bars[t], noise))
}

/// Forward noising at an explicit `ᾱ`.
pub fn forward_diffuse_at(x0: &Matrix, alpha_bar: f64, noise: &Matrix) -> Matrix {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).max(0.0).sqrt());
    x0.zip_map(noise, |x, n| a * x + b * n)
}

pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `t = 0`.
///
/// `predict(x_t, t)` returns the clean estimate. `refine(t, μ, x0_hat, x_t)`
/// may adjust the posterior mean in place before noise is added. Noise is
/// added only for `t > 0`, so the result at `t = 0` is the (refined) mean.
pub fn sample_ancestral<P, H>(
    rows: usize,
    cols: usize,
    schedule: &DiffusionSchedule,
    seed: u64,
    mut predict: P,
    mut refine: H,
) -> Result<Matrix>
where
    P: FnMut(&Matrix, usize) -> Result<Matrix>,
    H: FnMut(usize, &mut Matrix, &Matrix, &Matrix) -> Result<()>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian(rows, cols, &mut rng);
    for t in (0..schedule.steps()).rev() {
        let x0_hat = predict(&x, t)?;
        if x0_hat.shape() != (rows, cols) {
            return Err(CoreError::Shape(format!("predictor returned {:?}, expected {:?}", x0_hat.shape(), (rows, cols))));
        }
        if !x0_hat.is_finite() {
            return Err(CoreError::SamplingDiverged { step: t });
        }
        let mut mean = schedule.posterior_mean(&x0_hat, &x, t);
        refine(t, &mut mean, &x0_hat, &x)?;
        if !mean.is_finite() {
            return Err(CoreError::SamplingDiverged { step: t });
        }
        if t > 0 {
            let sd = schedule.posterior_variance[t].sqrt();
            let noise = gaussian(rows, cols, &mut rng);
            mean.axpy(sd, &noise);
        }
        x = mean;
    }
    Ok(x)
}

/// Sampling without mean refinement.
pub fn sample_plain<P>(rows: usize, cols: usize, schedule: &DiffusionSchedule, seed: u64, predict: P) -> Result<Matrix>
where
    P: FnMut(&Matrix, usize) -> Result<Matrix>,
{
    sample_ancestral(rows, cols, schedule, seed, predict, |_, _, _, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_alpha_bar_decreases_from_one() {
        let s = DiffusionSchedule::cosine(300).unwrap();
        assert!(s.alpha_bars[0] > 0.999);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.posterior_variance[0], 0.0);
        assert!((s.posterior_coef_x0[0] - 1.0).abs() < 1e-12);
        assert_eq!(s.posterior_coef_xt[0], 0.0);
    }

    #[test]
    fn forward_limits() {
        let x0 = Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let noise = Matrix::from_vec(1, 3, vec![0.3, 0.1, -0.7]);
        assert_eq!(forward_diffuse_at(&x0, 1.0, &noise), x0);
        assert_eq!(forward_diffuse_at(&x0, 0.0, &noise), noise);
        let s = DiffusionSchedule::cosine(10).unwrap();
        assert!(forward_diffuse(&x0, 10, &noise, &s).is_err());
        assert!(forward_diffuse(&x0, 0, &Matrix::zeros(1, 2), &s).is_err());
    }

    #[test]
    fn visits_every_step_once() {
        let s = DiffusionSchedule::cosine(7).unwrap();
        let mut seen = Vec::new();
        sample_plain(2, 2, &s, 3, |x, t| {
            seen.push(t);
            Ok(x.clone())
        })
        .unwrap();
        assert_eq!(seen, vec![6, 5, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn nan_reports_step() {
        let s = DiffusionSchedule::cosine(5).unwrap();
        let err = sample_plain(1, 1, &s, 0, |x, t| {
            Ok(if t == 2 { Matrix::filled(1, 1, f64::NAN) } else { x.clone() })
        })
        .unwrap_err();
        assert!(matches!(err, CoreError::SamplingDiverged { step: 2 }));
    }
}
