use serde::{Deserialize, Serialize};

use super::dataset::Samples;
use super::train::evaluate;
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

/// Rotate `[B, C, H, W]` images clockwise by `deg` about their centre.
/// Multiples of 90 degrees are exact pixel permutations; other angles use
/// bilinear sampling with zero fill on the original canvas, which equals
/// rotating onto an enlarged canvas and cropping the centre.
pub fn rotate_images(x: &Tensor<f32>, deg: f64) -> Result<Tensor<f32>> {
    let q = deg / 90.0;
    if q.round() == q {
        return x.rot90(q as i64, (2, 3));
    }
    let (b, c, h, w) = x.dims4()?;
    let phi = deg.to_radians();
    let (cos, sin) = (phi.cos(), phi.sin());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Tensor::zeros(x.shape());
    let plane = h * w;
    for p in 0..b * c {
        let src = &x.data()[p * plane..(p + 1) * plane];
        let dst = &mut out.data_mut()[p * plane..(p + 1) * plane];
        for r in 0..h {
            for col in 0..w {
                let (xo, yo) = (col as f64 - cx, r as f64 - cy);
                let sx = xo * cos + yo * sin + cx;
                let sy = -xo * sin + yo * cos + cy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let mut acc = 0.0f64;
                for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let (yy, xx) = (y0 + dy, x0 + dx);
                        if yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w {
                            acc += wy * wx * src[yy as usize * w + xx as usize] as f64;
                        }
                    }
                }
                dst[r * w + col] = acc as f32;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub angle_deg: f64,
    pub accuracy: f64,
    pub mean_angular_error_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessCurve {
    pub points: Vec<RobustnessPoint>,
    /// Predicted classes per angle, in sample order.
    pub predictions: Vec<Vec<usize>>,
}

impl RobustnessCurve {
    pub fn to_csv(&self) -> Result<String> {
        super::report::rows_to_csv(&self.points)
    }

    pub fn from_csv(text: &str) -> Result<Vec<RobustnessPoint>> {
        super::report::rows_from_csv(text)
    }
}

/// Accuracy and angular error of `model` on `samples` rotated by each angle;
/// target angles turn with the images.
pub fn robustness_sweep(model: &Model, samples: &Samples, angles_deg: &[f64], batch_size: usize) -> Result<RobustnessCurve> {
    let mut points = Vec::with_capacity(angles_deg.len());
    let mut predictions = Vec::with_capacity(angles_deg.len());
    for &deg in angles_deg {
        let rotated = Samples {
            images: rotate_images(&samples.images, deg)?,
            labels: samples.labels.clone(),
            thetas: samples.thetas.iter().map(|t| (t + deg.to_radians()).rem_euclid(std::f64::consts::TAU)).collect(),
            orders: samples.orders.clone(),
        };
        let ev = evaluate(model, &rotated, batch_size, 1.0)?;
        points.push(RobustnessPoint {
            angle_deg: deg,
            accuracy: ev.accuracy,
            mean_angular_error_deg: ev.angular_error_deg,
        });
        predictions.push(ev.classes);
    }
    Ok(RobustnessCurve { points, predictions })
}
