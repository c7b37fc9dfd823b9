//! Diffusion noise schedules.

use crate::error::{ModelError, Result};

/// Per-step alphas and their cumulative products. Step indices run
/// 1..=steps; `alpha_bar(0)` is defined as 1 (no noise).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub name: String,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Squared-cosine schedule with the usual 0.008 offset; betas clipped
    /// to 0.999 so every alpha stays positive.
    pub fn cosine(steps: usize) -> Self {
        assert!(steps >= 1);
        let s = 0.008;
        let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let mut alphas = Vec::with_capacity(steps);
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prev_bar = 1.0;
        for t in 1..=steps {
            let bar = f(t as f64) / f0;
            let beta = (1.0 - bar / prev_bar).clamp(0.0, 0.999);
            let alpha = 1.0 - beta;
            let cum = prev_bar * alpha;
            alphas.push(alpha);
            alpha_bars.push(cum);
            prev_bar = cum;
        }
        Self {
            name: "cosine".to_string(),
            alphas,
            alpha_bars,
        }
    }

    pub fn by_name(name: &str, steps: usize) -> Result<Self> {
        match name {
            "cosine" => Ok(Self::cosine(steps)),
            other => Err(ModelError::Invalid(format!("unknown noise schedule '{other}'"))),
        }
    }

    /// Build directly from cumulative products (tests and extreme cases).
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Self {
        let mut alphas = Vec::with_capacity(alpha_bars.len());
        let mut prev = 1.0;
        for &b in &alpha_bars {
            alphas.push(if prev > 0.0 { b / prev } else { 0.0 });
            prev = b;
        }
        Self {
            name: "custom".to_string(),
            alphas,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to step `t`; `t = 0` gives exactly 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(ModelError::Invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}
