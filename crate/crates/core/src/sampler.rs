//! Adaptive sampling interval driven by a weighted least squares predictor.
//!
//! Each interval the controller predicts the next traffic volume from a
//! line fitted to the recent window (newest observation weighted 1, older
//! ones decayed by `lambda` per step). A large relative prediction error
//! halves the interval; a small one doubles it.

use std::collections::VecDeque;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

impl LineFit {
    pub fn at(&self, t: f64) -> f64 {
        self.slope * t + self.intercept
    }
}

/// Weighted least squares line through `points` (oldest first), weights
/// `lambda^(n-i)` for the i-th of n points. When all `t` coincide the fit
/// is flat at the weighted mean.
pub fn wls_fit(points: &[(f64, f64)], lambda: f64) -> LineFit {
    let n = points.len();
    if n == 0 {
        return LineFit { slope: 0.0, intercept: 0.0 };
    }
    let weights: Vec<f64> = (0..n).map(|i| lambda.powi((n - 1 - i) as i32)).collect();
    let sw: f64 = weights.iter().sum();
    let t_mean = points.iter().zip(&weights).map(|(p, w)| w * p.0).sum::<f64>() / sw;
    let y_mean = points.iter().zip(&weights).map(|(p, w)| w * p.1).sum::<f64>() / sw;
    if points.iter().all(|p| p.0 == points[0].0) {
        return LineFit {
            slope: 0.0,
            intercept: y_mean,
        };
    }
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (p, w) in points.iter().zip(&weights) {
        let dt = p.0 - t_mean;
        sxx += w * dt * dt;
        sxy += w * dt * (p.1 - y_mean);
    }
    let slope = sxy / sxx;
    LineFit {
        slope,
        intercept: y_mean - slope * t_mean,
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub lambda: f64,
    pub window: usize,
    pub t_init_ms: u64,
    pub t_min_ms: u64,
    pub t_max_ms: u64,
    pub theta_low: f64,
    pub theta_high: f64,
    pub epsilon: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            lambda: 0.9,
            window: 8,
            t_init_ms: 1000,
            t_min_ms: 125,
            t_max_ms: 16_000,
            theta_low: 0.1,
            theta_high: 0.5,
            epsilon: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SamplerConfigError {
    #[error("lambda must be in (0, 1]")]
    Lambda,
    #[error("window must hold at least 2 observations")]
    Window,
    #[error("intervals must satisfy 0 < t_min_ms <= t_init_ms <= t_max_ms")]
    Interval,
    #[error("thresholds must satisfy 0 <= theta_low < theta_high")]
    Thresholds,
    #[error("epsilon must be positive")]
    Epsilon,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerConfigError> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(SamplerConfigError::Lambda);
        }
        if self.window < 2 {
            return Err(SamplerConfigError::Window);
        }
        if !(0 < self.t_min_ms && self.t_min_ms <= self.t_init_ms && self.t_init_ms <= self.t_max_ms) {
            return Err(SamplerConfigError::Interval);
        }
        if !(0.0 <= self.theta_low && self.theta_low < self.theta_high) {
            return Err(SamplerConfigError::Thresholds);
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(SamplerConfigError::Epsilon);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalChange {
    Halved,
    Doubled,
    Unchanged,
}

#[derive(Debug, Clone)]
pub struct Sampler {
    cfg: SamplerConfig,
    window: VecDeque<(f64, f64)>,
    interval_ms: u64,
    /// Time of the latest observation; the next one lands one interval later.
    clock_ms: u64,
    last_change: IntervalChange,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Result<Self, SamplerConfigError> {
        cfg.validate()?;
        Ok(Sampler {
            interval_ms: cfg.t_init_ms,
            window: VecDeque::with_capacity(cfg.window),
            clock_ms: 0,
            last_change: IntervalChange::Unchanged,
            cfg,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn interval_ms(&self) -> u64 {
        self.interval_ms
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn last_change(&self) -> IntervalChange {
        self.last_change
    }

    pub fn window(&self) -> impl Iterator<Item = &(f64, f64)> {
        self.window.iter()
    }

    /// Volume expected at the end of the current interval.
    pub fn predict_next(&self) -> f64 {
        match self.window.len() {
            0 => 0.0,
            1 => self.window[0].1,
            _ => {
                let points: Vec<(f64, f64)> = self.window.iter().copied().collect();
                let t_next = (self.clock_ms + self.interval_ms) as f64;
                wls_fit(&points, self.cfg.lambda).at(t_next).max(0.0)
            }
        }
    }

    /// Relative error of the current prediction against `observed`.
    pub fn relative_error(&self, observed: f64) -> f64 {
        (self.predict_next() - observed).abs() / observed.abs().max(self.cfg.epsilon)
    }

    /// Records the volume observed over the current interval and picks the
    /// next interval length.
    pub fn update_interval(&mut self, observed: f64) -> u64 {
        let err = self.relative_error(observed);
        self.clock_ms += self.interval_ms;
        self.window.push_back((self.clock_ms as f64, observed));
        while self.window.len() > self.cfg.window {
            self.window.pop_front();
        }
        self.last_change = if err > self.cfg.theta_high {
            self.interval_ms = (self.interval_ms / 2).max(self.cfg.t_min_ms);
            IntervalChange::Halved
        } else if err < self.cfg.theta_low {
            self.interval_ms = (self.interval_ms * 2).min(self.cfg.t_max_ms);
            IntervalChange::Doubled
        } else {
            IntervalChange::Unchanged
        };
        self.interval_ms
    }
}
