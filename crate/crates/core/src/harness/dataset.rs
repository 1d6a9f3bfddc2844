//! Synthetic oriented-shape images.
//!
//! Each sample is one filled shape on a dark background, drawn with 4x4
//! supersampling. Angles are clockwise in image coordinates (x right, y
//! down). A shape at angle `theta` is drawn at the residual
//! `theta mod 90deg` and then turned by whole quarter turns, so images at
//! `theta` and `theta + 90deg` are exact `rot90` copies of each other.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Bar,
    Ellipse,
    Triangle,
    LShape,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::Bar, ShapeClass::Ellipse, ShapeClass::Triangle, ShapeClass::LShape];

    /// Order of the shape's rotational symmetry; its orientation is defined
    /// modulo `360 / order` degrees.
    pub fn symmetry_order(self) -> u32 {
        match self {
            ShapeClass::Bar | ShapeClass::Ellipse => 2,
            ShapeClass::Triangle | ShapeClass::LShape => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Bar => "bar",
            ShapeClass::Ellipse => "ellipse",
            ShapeClass::Triangle => "triangle",
            ShapeClass::LShape => "l_shape",
        }
    }

    /// Membership in shape-local coordinates, in units of the shape size:
    /// `u` along the orientation, `v` perpendicular to it.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeClass::Bar => u.abs() <= 0.32 && v.abs() <= 0.06,
            ShapeClass::Ellipse => (u / 0.28).powi(2) + (v / 0.14).powi(2) <= 1.0,
            ShapeClass::Triangle => (-0.18..=0.30).contains(&u) && v.abs() <= 0.16 * (0.30 - u) / 0.48,
            ShapeClass::LShape => {
                ((-0.22..=0.28).contains(&u) && (0.10..=0.22).contains(&v))
                    || ((-0.22..=-0.10).contains(&u) && (-0.16..=0.22).contains(&v))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub seed: u64,
    pub noise_std: f64,
    /// Draw angles from `[0, max_angle_deg)` instead of the full circle.
    #[serde(default)]
    pub max_angle_deg: Option<f64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_train: 2000,
            n_test: 500,
            image_size: 64,
            seed: 0,
            noise_std: 0.05,
            max_angle_deg: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::invalid(format!("image_size {} below 8", self.image_size)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be finite and >= 0"));
        }
        if let Some(m) = self.max_angle_deg {
            if !(m > 0.0 && m <= 360.0) {
                return Err(Error::invalid(format!("max_angle_deg {m} outside (0, 360]")));
            }
        }
        Ok(())
    }
}

/// Everything that determines one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleParams {
    pub class: ShapeClass,
    /// Radians in `[0, 2pi)`, clockwise.
    pub theta: f64,
    /// Shape centre offset from the image centre, pixels.
    pub offset: (f64, f64),
    /// Shape size relative to the image side.
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Parameters of sample `index` of `split`; independent of every other
/// sample.
pub fn sample_params(spec: &DatasetSpec, split: Split, index: usize) -> SampleParams {
    let tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64 << 40,
    };
    let mut rng = Rng::new(spec.seed).fork(tag + index as u64);
    let class = ShapeClass::ALL[index % ShapeClass::ALL.len()];
    let max = spec.max_angle_deg.map_or(TAU, f64::to_radians);
    let theta = rng.uniform() * max;
    let jitter = spec.image_size as f64 * 0.06;
    let offset = (rng.uniform_range(-jitter, jitter), rng.uniform_range(-jitter, jitter));
    let scale = rng.uniform_range(0.85, 1.1);
    SampleParams {
        class,
        theta,
        offset,
        scale,
    }
}

/// Clockwise quarter turn of a centred offset, matching `rot90` on arrays.
fn turn(p: (f64, f64), quarter_turns: i64) -> (f64, f64) {
    (0..quarter_turns.rem_euclid(4)).fold(p, |(x, y), _| (-y, x))
}

/// Draw one sample without noise: `[1, S, S]` with values in `[0, 1]`.
pub fn render(params: &SampleParams, size: usize) -> Result<Tensor<f32>> {
    const SS: usize = 4;
    let theta = params.theta.rem_euclid(TAU);
    let q = ((theta / FRAC_PI_2).floor() as i64).clamp(0, 3);
    // Round the residual so theta and theta + 90deg draw the same residual.
    let residual = ((theta - q as f64 * FRAC_PI_2) * 1e12).round() / 1e12;
    let (ox, oy) = turn(params.offset, -q);
    let s = size as f64;
    let (cx, cy) = (s / 2.0 + ox, s / 2.0 + oy);
    let unit = params.scale * s;
    let (cos, sin) = (residual.cos(), residual.sin());
    let mut img = Tensor::<f32>::zeros(&[1, size, size]);
    let data = img.data_mut();
    for r in 0..size {
        for c in 0..size {
            let mut hits = 0;
            for a in 0..SS {
                for b in 0..SS {
                    let x = c as f64 + (b as f64 + 0.5) / SS as f64 - cx;
                    let y = r as f64 + (a as f64 + 0.5) / SS as f64 - cy;
                    let u = (x * cos + y * sin) / unit;
                    let v = (-x * sin + y * cos) / unit;
                    hits += params.class.contains(u, v) as usize;
                }
            }
            data[r * size + c] = hits as f32 / (SS * SS) as f32;
        }
    }
    img.rot90(q, (1, 2))
}

/// One split as batched tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    /// `[n, 1, S, S]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Radians in `[0, 2pi)`.
    pub thetas: Vec<f64>,
    pub orders: Vec<u32>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Samples> {
        let plane: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok(Samples {
            images: Tensor::new(shape, data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            thetas: indices.iter().map(|&i| self.thetas[i]).collect(),
            orders: indices.iter().map(|&i| self.orders[i]).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Samples,
    pub test: Samples,
}

/// Render `n` samples of one split.
pub fn gen_split(spec: &DatasetSpec, split: Split, n: usize) -> Result<Samples> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("a split needs at least one sample"));
    }
    let size = spec.image_size;
    let plane = size * size;
    let mut data = Vec::with_capacity(n * plane);
    let (mut labels, mut thetas, mut orders) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let p = sample_params(spec, split, i);
        let img = render(&p, size)?;
        if spec.noise_std > 0.0 {
            let mut noise = Rng::new(spec.seed).fork(((split == Split::Test) as u64) << 41 | (1 << 42) | i as u64);
            data.extend(img.data().iter().map(|&v| v + (spec.noise_std * noise.normal()) as f32));
        } else {
            data.extend_from_slice(img.data());
        }
        labels.push(ShapeClass::ALL.iter().position(|&c| c == p.class).unwrap());
        thetas.push(p.theta);
        orders.push(p.class.symmetry_order());
    }
    Ok(Samples {
        images: Tensor::new(vec![n, 1, size, size], data)?,
        labels,
        thetas,
        orders,
    })
}

pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        spec: spec.clone(),
        train: gen_split(spec, Split::Train, spec.n_train)?,
        test: gen_split(spec, Split::Test, spec.n_test)?,
    })
}

/// Smallest angle between a prediction and a target for a shape of the given
/// symmetry order, in degrees.
pub fn angular_error_deg(pred: f64, target: f64, order: u32) -> f64 {
    let m = order.max(1) as f64;
    let d = (m * (pred - target)).rem_euclid(TAU);
    let d = if d > PI { TAU - d } else { d };
    (d / m).to_degrees()
}
