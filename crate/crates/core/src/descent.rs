//! Plain gradient descent on the Hoyer-Square penalty alone, recording the
//! path of every coordinate and the trimming threshold `Σw²/Σ|w|`.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regularizers::{hoyer_square_grad, trimming_threshold};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    pub dim: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Record every `stride`-th step (the last step is always recorded).
    pub stride: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            dim: 20,
            steps: 100_000,
            lr: 1e-3,
            seed: 0,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentPoint {
    pub step: usize,
    pub weights: Vec<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentTrace {
    pub points: Vec<DescentPoint>,
}

impl DescentTrace {
    pub fn initial(&self) -> &[f64] {
        &self.points[0].weights
    }

    pub fn last(&self) -> &[f64] {
        &self.points.last().expect("at least the start").weights
    }

    pub fn count_below(&self, eps: f64) -> usize {
        self.last().iter().filter(|w| w.abs() < eps).count()
    }

    /// Final over initial magnitude of the initially largest coordinate.
    pub fn dominant_retention(&self) -> f64 {
        let init = self.initial();
        let j = (0..init.len())
            .max_by(|&a, &b| init[a].abs().total_cmp(&init[b].abs()))
            .expect("non-empty");
        self.last()[j].abs() / init[j].abs()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let dim = self.initial().len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string()];
        header.extend((0..dim).map(|i| format!("w{i}")));
        header.push("threshold".into());
        w.write_record(&header)?;
        for p in &self.points {
            let mut row = vec![p.step.to_string()];
            row.extend(p.weights.iter().map(f64::to_string));
            row.push(p.threshold.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Descends `H_S` from `w ~ N(0, I)` with fixed step size.
pub fn hoyer_square_descent(config: &DescentConfig) -> Result<DescentTrace> {
    if config.dim < 2 || config.stride == 0 || !(config.lr > 0.0) {
        return Err(Error::Argument(format!(
            "descent needs dim >= 2, stride >= 1 and a positive step size, got {config:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w: Vec<f64> = (0..config.dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut grad = vec![0.0; config.dim];
    let record = |step: usize, w: &[f64]| DescentPoint {
        step,
        weights: w.to_vec(),
        threshold: trimming_threshold(w),
    };
    let mut points = vec![record(0, &w)];
    for step in 1..=config.steps {
        hoyer_square_grad(&w, &mut grad);
        for (x, g) in w.iter_mut().zip(&grad) {
            *x -= config.lr * g;
        }
        if step % config.stride == 0 || step == config.steps {
            points.push(record(step, &w));
        }
    }
    Ok(DescentTrace { points })
}
