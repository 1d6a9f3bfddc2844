use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{rotate_feature, CyclicGroup};
use crate::model::Model;
use crate::tensor::{Float, Tensor};

/// Equivariance error of one map on one input batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivError {
    /// `(1 / M) * sqrt(sum d^2)` with `M = C*H*W`, averaged over the batch.
    pub epsilon: f64,
    /// `epsilon / rms(f(x))`, averaged over the batch.
    pub normalized: f64,
}

/// Quarter turns for a grid rotation given in degrees.
pub fn quarter_turns_for_angle(deg: f64) -> Result<i64> {
    let q = deg / 90.0;
    if !deg.is_finite() || q.round() != q {
        return Err(Error::invalid(format!(
            "equivariance error is defined only for multiples of 90 degrees, got {deg}"
        )));
    }
    Ok(q as i64)
}

/// Compare `f(R x)` with `R'(f(x))`, where `R'` is the regular action of a
/// `quarter_turns` clockwise rotation.
pub fn equiv_error_pair<T: Float>(
    fx: &Tensor<T>,
    f_rx: &Tensor<T>,
    group: CyclicGroup,
    quarter_turns: i64,
) -> Result<EquivError> {
    let expected = rotate_feature(fx, group, quarter_turns)?;
    if expected.shape() != f_rx.shape() {
        return Err(Error::shape(format!(
            "f(Rx) has shape {:?}, R'f(x) has {:?}",
            f_rx.shape(),
            expected.shape()
        )));
    }
    let batch = *fx.shape().first().ok_or_else(|| Error::shape("empty feature shape"))?;
    if batch == 0 {
        return Err(Error::shape("empty batch"));
    }
    let m = fx.numel() / batch;
    let (mut eps, mut norm) = (0.0, 0.0);
    for ((a, b), f) in f_rx
        .data()
        .chunks_exact(m)
        .zip(expected.data().chunks_exact(m))
        .zip(fx.data().chunks_exact(m))
    {
        let d2: f64 = a.iter().zip(b).map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2)).sum();
        let f2: f64 = f.iter().map(|v| v.as_f64().powi(2)).sum();
        let e = d2.sqrt() / m as f64;
        let rms = (f2 / m as f64).sqrt();
        eps += e;
        norm += if e == 0.0 {
            0.0
        } else if rms == 0.0 {
            f64::INFINITY
        } else {
            e / rms
        };
    }
    Ok(EquivError {
        epsilon: eps / batch as f64,
        normalized: norm / batch as f64,
    })
}

/// Equivariance error of `f` at `x` under a clockwise grid rotation.
pub fn equiv_error<T: Float, F>(f: F, x: &Tensor<T>, group: CyclicGroup, quarter_turns: i64) -> Result<EquivError>
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let fx = f(x)?;
    let f_rx = f(&x.rot90(quarter_turns, (2, 3))?)?;
    equiv_error_pair(&fx, &f_rx, group, quarter_turns)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub angle_deg: f64,
    pub epsilon: f64,
    pub epsilon_normalized: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivErrorReport {
    pub entries: Vec<StageError>,
    pub input: String,
    pub fingerprint: String,
}

impl EquivErrorReport {
    /// Largest normalized error at `stage` over all angles.
    pub fn worst(&self, stage: &str) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| e.stage == stage)
            .map(|e| e.epsilon_normalized)
            .reduce(f64::max)
    }

    /// Largest normalized error over everything measured.
    pub fn worst_overall(&self) -> f64 {
        self.entries.iter().map(|e| e.epsilon_normalized).fold(0.0, f64::max)
    }

    pub fn stages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.stage) {
                out.push(e.stage.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        super::report::rows_to_csv(&self.entries)
    }

    pub fn from_csv(text: &str) -> Result<Vec<StageError>> {
        super::report::rows_from_csv(text)
    }
}

/// Error at every tap of `model` (evaluation mode) for each grid angle.
pub fn stagewise_error(model: &Model, inputs: &Tensor<f32>, angles_deg: &[f64]) -> Result<EquivErrorReport> {
    let turns = angles_deg
        .iter()
        .map(|&a| quarter_turns_for_angle(a))
        .collect::<Result<Vec<_>>>()?;
    let base = model.features(inputs)?;
    let mut entries = Vec::new();
    for (&deg, &q) in angles_deg.iter().zip(&turns) {
        let rotated = model.features(&inputs.rot90(q, (2, 3))?)?;
        for ((name, fx), (_, frx)) in base.iter().zip(&rotated) {
            let e = equiv_error_pair(fx, frx, model.group(), q)?;
            entries.push(StageError {
                stage: name.clone(),
                angle_deg: deg,
                epsilon: e.epsilon,
                epsilon_normalized: e.normalized,
            });
        }
    }
    let s = inputs.shape();
    Ok(EquivErrorReport {
        entries,
        input: format!("{} images of {}x{}x{}", s[0], s[1], s[2], s[3]),
        fingerprint: model.fingerprint(),
    })
}
