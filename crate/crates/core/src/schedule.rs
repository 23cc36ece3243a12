//! Forward noising process and deterministic DDIM stepping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentClip;
use crate::scalar::Scalar;

/// How betas are interpolated between `beta_start` and `beta_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpacing {
    /// Linear in beta.
    Linear,
    /// Linear in sqrt(beta), then squared.
    Scaled,
}

/// Discrete forward process over timesteps `1..=T` plus the DDIM ladder.
///
/// Timestep `0` denotes clean data with `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    total_steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    ddim_timesteps: Vec<usize>,
}

impl NoiseSchedule {
    /// Builds a schedule from an explicit beta sequence.
    pub fn from_betas(betas: Vec<f64>, ddim_steps: usize) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Param("schedule needs at least 2 steps".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Param(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let mut s = Self {
            total_steps: betas.len(),
            betas,
            alpha_bars,
            ddim_timesteps: Vec::new(),
        };
        s.set_ddim_steps(ddim_steps)?;
        Ok(s)
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// DDIM timesteps, strictly descending, last entry `>= 1`.
    pub fn ddim_timesteps(&self) -> &[usize] {
        &self.ddim_timesteps
    }

    pub fn num_ddim_steps(&self) -> usize {
        self.ddim_timesteps.len()
    }

    /// Replaces the DDIM ladder with `steps` uniformly spaced timesteps
    /// `1, 1 + T/S, 1 + 2T/S, ...` (descending). `steps = 0` gives an
    /// empty ladder.
    pub fn set_ddim_steps(&mut self, steps: usize) -> Result<()> {
        if steps > self.total_steps {
            return Err(Error::Param(format!(
                "{steps} DDIM steps exceed {} training steps",
                self.total_steps
            )));
        }
        self.ddim_timesteps = if steps == 0 {
            Vec::new()
        } else {
            let stride = self.total_steps / steps;
            (0..steps).rev().map(|i| 1 + i * stride).collect()
        };
        Ok(())
    }

    pub fn with_ddim_steps(mut self, steps: usize) -> Result<Self> {
        self.set_ddim_steps(steps)?;
        Ok(self)
    }

    /// `alpha_bar(t)`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.total_steps => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::Param(format!("timestep {t} outside [0, {}]", self.total_steps))),
        }
    }

    /// Position of `t` on the denoising ladder (0 = first, noisiest step).
    pub fn ladder_index(&self, t: usize) -> Option<usize> {
        self.ddim_timesteps.iter().position(|&s| s == t)
    }

    /// `t_prev` for a denoising step starting at ladder entry `i`.
    pub fn prev_timestep(&self, i: usize) -> usize {
        self.ddim_timesteps.get(i + 1).copied().unwrap_or(0)
    }

    /// Whether `t` lies inside the first `ceil(ratio * S)` denoising steps.
    pub fn in_leading_window(&self, t: usize, ratio: f64) -> bool {
        let s = self.num_ddim_steps();
        let active = leading_steps(ratio, s);
        self.ladder_index(t).is_some_and(|i| i < active)
    }
}

/// `ceil(ratio * steps)`, robust to the representation error of `ratio`.
pub fn leading_steps(ratio: f64, steps: usize) -> usize {
    let x = ratio * steps as f64;
    let r = x.round();
    let n = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (n.max(0.0) as usize).min(steps)
}

/// Standard DDPM forward-process construction.
pub fn build_schedule(
    total_steps: usize,
    beta_start: f64,
    beta_end: f64,
    spacing: BetaSpacing,
    ddim_steps: usize,
) -> Result<NoiseSchedule> {
    if total_steps < 2 {
        return Err(Error::Param(format!("T = {total_steps} < 2")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Param(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let denom = (total_steps - 1) as f64;
    let betas = (0..total_steps)
        .map(|i| {
            let f = i as f64 / denom;
            match spacing {
                BetaSpacing::Linear => beta_start + f * (beta_end - beta_start),
                BetaSpacing::Scaled => {
                    let s = beta_start.sqrt() + f * (beta_end.sqrt() - beta_start.sqrt());
                    s * s
                }
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas, ddim_steps)
}

/// `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn add_noise<T: Scalar>(
    z0: &LatentClip<T>,
    eps: &LatentClip<T>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentClip<T>> {
    z0.ensure_same_shape(eps, "add_noise")?;
    if t == 0 {
        return Err(Error::Param("add_noise needs t >= 1".into()));
    }
    let a = schedule.alpha_bar(t)?;
    Ok(z0.lin_comb(T::lit(a.sqrt()), eps, T::lit((1.0 - a).sqrt())))
}

/// Deterministic DDIM transition from `from` to `to` under a fixed noise
/// estimate: predict the clean latent, then re-noise it to level `to`.
fn ddim_transition<T: Scalar>(
    z: &LatentClip<T>,
    eps_hat: &LatentClip<T>,
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentClip<T>> {
    z.ensure_same_shape(eps_hat, "ddim")?;
    let a_from = schedule.alpha_bar(from)?;
    let a_to = schedule.alpha_bar(to)?;
    let z0_hat = z.lin_comb(
        T::lit(1.0 / a_from.sqrt()),
        eps_hat,
        T::lit(-(1.0 - a_from).sqrt() / a_from.sqrt()),
    );
    Ok(z0_hat.lin_comb(T::lit(a_to.sqrt()), eps_hat, T::lit((1.0 - a_to).sqrt())))
}

/// One denoising step `t -> t_prev` (`t_prev = 0` yields the clean estimate).
pub fn ddim_step<T: Scalar>(
    z_t: &LatentClip<T>,
    eps_hat: &LatentClip<T>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentClip<T>> {
    if t <= t_prev {
        return Err(Error::Ordering(format!(
            "ddim_step needs t > t_prev, got {t} <= {t_prev}"
        )));
    }
    ddim_transition(z_t, eps_hat, t, t_prev, schedule)
}

/// One inversion step `t -> t_next`, the exact inverse of [`ddim_step`]
/// for the same noise estimate.
pub fn ddim_invert_step<T: Scalar>(
    z_t: &LatentClip<T>,
    eps_hat: &LatentClip<T>,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentClip<T>> {
    if t_next <= t {
        return Err(Error::Ordering(format!(
            "ddim_invert_step needs t_next > t, got {t_next} <= {t}"
        )));
    }
    ddim_transition(z_t, eps_hat, t, t_next, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Grid;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_clip(v: f64) -> LatentClip<f64> {
        LatentClip::from_fn(Grid::new(1, 1, 1), 1, |_| v)
    }

    fn default_schedule() -> NoiseSchedule {
        build_schedule(1000, 1e-4, 0.02, BetaSpacing::Linear, 50).unwrap()
    }

    #[test]
    fn two_step_running_product() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2], 2).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn long_schedule_matches_product_loop() {
        let s = default_schedule();
        // independent oracle: rebuild betas from the closed form, multiply
        let mut prod = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bars()[999] - prod).abs() < 1e-15 * prod.max(1.0) + 1e-18);
        assert!(prod > 0.0 && prod < 1e-4);
    }

    #[test]
    fn invalid_ranges_rejected() {
        for (t, a, b) in [(1, 1e-4, 0.02), (10, 0.02, 1e-4), (10, 0.0, 0.1), (10, 0.1, 1.0)] {
            assert!(matches!(
                build_schedule(t, a, b, BetaSpacing::Linear, 1),
                Err(Error::Param(_))
            ));
        }
    }

    #[test]
    fn ddim_ladder_shape() {
        let s = default_schedule();
        let ts = s.ddim_timesteps();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 981);
        assert_eq!(*ts.last().unwrap(), 1);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn add_noise_cases() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2], 2).unwrap();
        let out = add_noise(&scalar_clip(1.0), &scalar_clip(1.0), 2, &s).unwrap();
        let expected = 0.72f64.sqrt() + 0.28f64.sqrt();
        assert!((out.data()[[0, 0]] - expected).abs() < 1e-12);
        assert!((out.data()[[0, 0]] - 1.3777).abs() < 1e-4);
        let zero = add_noise(&scalar_clip(2.0), &scalar_clip(0.0), 1, &s).unwrap();
        assert!((zero.data()[[0, 0]] - 2.0 * 0.9f64.sqrt()).abs() < 1e-12);
        let tiny = NoiseSchedule::from_betas(vec![1e-12, 0.5], 1).unwrap();
        let near = add_noise(&scalar_clip(3.0), &scalar_clip(1.0), 1, &tiny).unwrap();
        assert!((near.data()[[0, 0]] - 3.0).abs() < 1e-5);
        let wrong = LatentClip::<f64>::zeros(Grid::new(1, 2, 1), 1);
        assert!(matches!(
            add_noise(&scalar_clip(1.0), &wrong, 1, &s),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ddim_step_zero_noise_and_exact_recovery() {
        let s = default_schedule();
        let z = scalar_clip(0.7);
        let out = ddim_step(&z, &scalar_clip(0.0), 500, 250, &s).unwrap();
        let ratio = (s.alpha_bar(250).unwrap() / s.alpha_bar(500).unwrap()).sqrt();
        assert!((out.data()[[0, 0]] - 0.7 * ratio).abs() < 1e-12);

        let z0 = scalar_clip(0.3);
        let eps = scalar_clip(-1.2);
        let zt = add_noise(&z0, &eps, 700, &s).unwrap();
        let back = ddim_step(&zt, &eps, 700, 0, &s).unwrap();
        assert!((back.data()[[0, 0]] - 0.3).abs() < 1e-12);
        assert!(matches!(ddim_step(&z, &z, 10, 10, &s), Err(Error::Ordering(_))));
        assert!(matches!(ddim_invert_step(&z, &z, 10, 5, &s), Err(Error::Ordering(_))));
    }

    #[test]
    fn ddim_step_matches_two_line_oracle() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = Grid::new(2, 3, 3);
        let z = LatentClip::<f64>::gaussian(grid, 2, &mut rng);
        let e = LatentClip::<f64>::gaussian(grid, 2, &mut rng);
        let (t, tp) = (641, 321);
        let out = ddim_step(&z, &e, t, tp, &s).unwrap();
        let (a, ap) = (s.alpha_bars()[t - 1], s.alpha_bars()[tp - 1]);
        for ((o, zv), ev) in out.data().iter().zip(z.data()).zip(e.data()) {
            let x0 = (zv - (1.0 - a).sqrt() * ev) / a.sqrt();
            let want = ap.sqrt() * x0 + (1.0 - ap).sqrt() * ev;
            assert!((o - want).abs() < 1e-12);
        }
    }

    #[test]
    fn invert_zero_noise() {
        let s = default_schedule();
        let out = ddim_invert_step(&scalar_clip(1.5), &scalar_clip(0.0), 21, 41, &s).unwrap();
        let ratio = (s.alpha_bar(41).unwrap() / s.alpha_bar(21).unwrap()).sqrt();
        assert!((out.data()[[0, 0]] - 1.5 * ratio).abs() < 1e-12);
    }

    #[test]
    fn leading_window_counts() {
        assert_eq!(leading_steps(0.8, 50), 40);
        assert_eq!(leading_steps(0.0, 50), 0);
        assert_eq!(leading_steps(1.0, 50), 50);
        assert_eq!(leading_steps(0.81, 10), 9);
        let s = default_schedule();
        let active = s
            .ddim_timesteps()
            .iter()
            .filter(|&&t| s.in_leading_window(t, 0.8))
            .count();
        assert_eq!(active, 40);
        assert!(s.in_leading_window(981, 0.8));
        assert!(!s.in_leading_window(1, 0.8));
    }

    proptest! {
        #[test]
        fn alpha_bars_strictly_decreasing(
            t in 2usize..400,
            start in 1e-5f64..0.01,
            span in 1e-4f64..0.5,
            scaled in any::<bool>(),
        ) {
            let end = (start + span).min(0.999);
            let spacing = if scaled { BetaSpacing::Scaled } else { BetaSpacing::Linear };
            let s = build_schedule(t, start, end, spacing, 1).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
        }

        #[test]
        fn invert_then_step_is_identity(seed in any::<u64>(), i in 0usize..49) {
            let s = default_schedule();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = Grid::new(2, 4, 4);
            let z = LatentClip::<f64>::gaussian(grid, 3, &mut rng);
            let e = LatentClip::<f64>::gaussian(grid, 3, &mut rng);
            let ts = s.ddim_timesteps();
            let (t_hi, t_lo) = (ts[i], ts[i + 1]);
            let up = ddim_invert_step(&z, &e, t_lo, t_hi, &s).unwrap();
            let back = ddim_step(&up, &e, t_hi, t_lo, &s).unwrap();
            let rel = back.lin_comb(1.0, &z, -1.0).norm() / z.norm();
            prop_assert!(rel < 1e-6, "relative error {rel}");
        }
    }
}
