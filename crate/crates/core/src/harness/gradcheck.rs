//! Finite-difference checks for every differentiable operation. All checks
//! run in 64-bit with central differences of step `1e-3`.
//!
//! Each check reports the elementwise relative error, which decides `pass`,
//! and a normwise error (largest absolute deviation over the largest
//! gradient entry). Layers with batch statistics produce gradient entries
//! many orders of magnitude below their largest one; on those entries the
//! step's truncation error alone can exceed the elementwise tolerance while
//! the normwise error stays near `1e-6`.
//!
//! The whole-model check (`"model"`) is separate: through a dozen stacked
//! normalisations the step-`1e-3` truncation error is around `1e-2`, so it
//! uses step `1e-4` and passes on the normwise error.

use std::rc::Rc;

use crate::autodiff::check::{finite_diff_report, GradErrors};
use crate::autodiff::PoolKind;
use crate::error::{Error, Result};
use crate::group::{expansion_map, CyclicGroup, Expansion};
use crate::layers::{
    gradcheck_layer_report, merge_orientations, rearrange_by_orientation, Block, ConvKind, ConvModule, DownsampleBlock,
    DownsampleMode, EquivBatchNorm, EquivConv, NaiveChannelAttention, NormKind, NormLayout, ParamStore,
    REChannelAttention,
};
use crate::model::{Model, NetworkConfig};
use crate::rng::Rng;
use crate::tensor::{ConvSpec, Tensor};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const POINTS: usize = 10;
pub const MODEL_STEP: f64 = 1e-4;

type Check = fn(&mut Rng) -> Result<GradErrors>;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

/// Random values kept at least `margin` away from every point in `kinks`.
fn away_from(shape: &[usize], rng: &mut Rng, scale: f64, kinks: &[f64], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = scale * rng.normal();
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            break v;
        }
    })
}

/// Values whose pairwise gaps within each orientation block exceed the
/// finite-difference step, so max pooling has a unique, stable winner.
fn distinct(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| 0.05 * i as f64 - 0.025 * n as f64).collect();
    rng.shuffle(&mut v);
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

fn unary(x: Tensor<f64>, f: impl for<'g> Fn(crate::autodiff::Var<'g, f64>) -> Result<crate::autodiff::Var<'g, f64>>) -> Result<GradErrors> {
    finite_diff_report(|_, v| f(v[0]), &[x], STEP)
}

fn binary(
    a: Tensor<f64>,
    b: Tensor<f64>,
    f: impl for<'g> Fn(crate::autodiff::Var<'g, f64>, crate::autodiff::Var<'g, f64>) -> Result<crate::autodiff::Var<'g, f64>>,
) -> Result<GradErrors> {
    finite_diff_report(|_, v| f(v[0], v[1]), &[a, b], STEP)
}

fn c(n: usize) -> CyclicGroup {
    CyclicGroup::new(n).expect("valid order")
}

fn tiny_model_config() -> NetworkConfig {
    let mut cfg = NetworkConfig::default().with_orientations(4);
    cfg.input_size = 8;
    cfg.stem.channels = 4;
    cfg.stages.truncate(2);
    for s in &mut cfg.stages {
        s.channels = 4;
    }
    cfg.head.branch_modules = 2;
    cfg.head.hidden_channels = 4;
    cfg.task.num_classes = 2;
    cfg
}

fn model_check(rng: &mut Rng, train: bool) -> Result<GradErrors> {
    let model = Model::build(&tiny_model_config(), rng)?;
    let store: ParamStore<f64> = model.params().cast();
    let x = randn(&[2, 1, 8, 8], rng);
    let labels = [0usize, 1];
    let targets = [0.4, 2.5];
    let orders = [1u32, 2];
    gradcheck_layer_report(&store, &x, train, MODEL_STEP, |ctx, v| {
        let out = model.forward(ctx, v)?;
        let ce = out.logits.cross_entropy(&labels)?;
        ce.add(out.angle.angular_loss(&targets, &orders)?)
    })
}

/// `(name, check)` for every differentiable operation.
pub fn registry() -> Vec<(&'static str, Check)> {
    vec![
        ("add", |r| binary(randn(&[2, 3], r), randn(&[2, 3], r), |a, b| a.add(b))),
        ("sub", |r| binary(randn(&[2, 3], r), randn(&[2, 3], r), |a, b| a.sub(b))),
        ("mul", |r| binary(randn(&[2, 3], r), randn(&[2, 3], r), |a, b| a.mul(b))),
        ("scale", |r| unary(randn(&[5], r), |v| v.scale(-1.7))),
        ("sum", |r| unary(randn(&[2, 4], r), |v| v.sum())),
        ("mean", |r| unary(randn(&[2, 4], r), |v| v.mean())),
        ("reshape", |r| unary(randn(&[2, 6], r), |v| v.reshape(&[3, 4]))),
        ("silu", |r| unary(randn(&[3, 4], r), |v| v.silu())),
        ("relu", |r| unary(away_from(&[3, 4], r, 1.0, &[0.0], 0.01), |v| v.relu())),
        ("hard_sigmoid", |r| {
            unary(away_from(&[3, 4], r, 3.0, &[-3.0, 3.0], 0.01), |v| v.hard_sigmoid())
        }),
        ("conv2d", |r| {
            binary(randn(&[2, 2, 5, 5], r), randn(&[3, 2, 3, 3], r), |x, k| {
                x.conv2d(k, ConvSpec::new(3, 1, 2))
            })
        }),
        ("conv2d_grouped", |r| {
            binary(randn(&[1, 4, 4, 4], r), randn(&[4, 2, 2, 2], r), |x, k| {
                x.conv2d_grouped(k, ConvSpec::new(2, 1, 1), 2)
            })
        }),
        ("kernel_expansion", |r| {
            let map = Rc::new(expansion_map(&[2, 8, 3, 3], Expansion::Group, c(8))?);
            unary(randn(&[2, 8, 3, 3], r), move |v| v.sparse_linear(map.clone()))
        }),
        ("add_channel_bias", |r| binary(randn(&[2, 3, 2, 2], r), randn(&[3], r), |x, b| x.add_channel_bias(b))),
        ("scale_channels", |r| binary(randn(&[2, 3, 2, 2], r), randn(&[2, 3], r), |x, s| x.scale_channels(s))),
        ("repeat_blocks", |r| unary(randn(&[2, 3], r), |v| v.repeat_blocks(4))),
        ("global_avg_pool", |r| unary(randn(&[2, 3, 3, 2], r), |v| v.global_avg_pool())),
        ("permute_channels", |r| {
            unary(randn(&[2, 4, 2, 2], r), |v| v.permute_channels(Rc::new(vec![2, 0, 3, 1])))
        }),
        ("select_channels", |r| unary(randn(&[2, 5, 2, 2], r), |v| v.select_channels(1, 4))),
        ("matmul", |r| binary(randn(&[3, 4], r), randn(&[4, 2], r), |a, b| a.matmul(b))),
        ("transpose", |r| unary(randn(&[3, 4], r), |v| v.transpose())),
        ("add_row_bias", |r| binary(randn(&[3, 4], r), randn(&[4], r), |a, b| a.add_row_bias(b))),
        ("batch_norm_train", |r| {
            let x = randn(&[2, 4, 3, 3], r);
            let gamma = Tensor::from_fn(&[2], |_| 1.0 + 0.3 * r.normal());
            let beta = randn(&[2], r);
            finite_diff_report(
                |_, v| Ok(v[0].batch_norm_train(v[1], v[2], Rc::new(vec![0, 0, 1, 1]))?.0),
                &[x, gamma, beta],
                STEP,
            )
        }),
        ("batch_norm_eval", |r| {
            let x = randn(&[2, 4, 3, 3], r);
            let gamma = randn(&[4], r);
            let beta = randn(&[4], r);
            let mean = randn(&[4], r);
            let var = Tensor::from_fn(&[4], |_| 0.5 + r.uniform());
            finite_diff_report(
                move |_, v| v[0].batch_norm_eval(v[1], v[2], Rc::new(vec![0, 1, 2, 3]), &mean, &var),
                &[x, gamma, beta],
                STEP,
            )
        }),
        ("orientation_pool_mean", |r| unary(randn(&[2, 8, 2, 2], r), |v| v.orientation_pool(4, PoolKind::Mean))),
        ("orientation_pool_max", |r| unary(distinct(&[2, 8, 2, 2], r), |v| v.orientation_pool(4, PoolKind::Max))),
        ("cross_entropy", |r| unary(randn(&[3, 4], r), |v| v.cross_entropy(&[0, 3, 1]))),
        ("angular_loss", |r| unary(randn(&[3], r), |v| v.angular_loss(&[0.3, -2.0, 1.0], &[1, 2, 1]))),
        ("angle_readout", |r| unary(randn(&[2, 8], r), |v| v.angle_readout())),
        ("rearrange_merge", |r| {
            unary(randn(&[2, 8, 2, 2], r), |v| merge_orientations(rearrange_by_orientation(v, 4)?.scale(2.0)?, 4))
        }),
        ("lift_conv", |r| {
            let mut s = ParamStore::new();
            let l = EquivConv::new(&mut s, "l", ConvKind::Lift, c(4), 2, 8, ConvSpec::new(3, 1, 1), true, r)?;
            gradcheck_layer_report(&s, &randn(&[2, 2, 4, 4], r), true, STEP, |ctx, v| l.forward(ctx, v))
        }),
        ("group_conv", |r| {
            let mut s = ParamStore::new();
            let l = EquivConv::new(&mut s, "g", ConvKind::Group, c(8), 8, 16, ConvSpec::new(3, 1, 1), true, r)?;
            gradcheck_layer_report(&s, &randn(&[1, 8, 4, 4], r), true, STEP, |ctx, v| l.forward(ctx, v))
        }),
        ("branch_conv", |r| {
            let mut s = ParamStore::new();
            let l = EquivConv::new(&mut s, "b", ConvKind::Branch, c(4), 8, 8, ConvSpec::new(3, 1, 1), false, r)?;
            gradcheck_layer_report(&s, &randn(&[2, 8, 3, 3], r), true, STEP, |ctx, v| l.forward(ctx, v))
        }),
        ("equiv_batch_norm", |r| {
            let mut s = ParamStore::new();
            let l = EquivBatchNorm::new(&mut s, "n", 8, NormLayout::Fields { n: 4 })?;
            gradcheck_layer_report(&s, &randn(&[2, 8, 3, 3], r), true, STEP, |ctx, v| l.forward(ctx, v))
        }),
        ("conv_module", |r| {
            let mut s = ParamStore::new();
            let l = ConvModule::new(&mut s, "m", ConvKind::Group, c(4), 4, 8, ConvSpec::new(3, 1, 1), NormKind::Field, r)?;
            gradcheck_layer_report(&s, &randn(&[2, 4, 4, 4], r), true, STEP, |ctx, v| l.forward(ctx, v))
        }),
        ("residual_block", |r| {
            let mut s = ParamStore::new();
            let l = Block::new(&mut s, "b", c(4), 4, NormKind::Field, r)?;
            gradcheck_layer_report(&s, &randn(&[2, 4, 4, 4], r), false, STEP, |ctx, v| l.forward(ctx, v))
        }),
        ("downsample_strict", |r| {
            let mut s = ParamStore::new();
            let l = DownsampleBlock::new(&mut s, "d", c(4), 4, 4, DownsampleMode::Strict, 6, NormKind::Field, r)?;
            gradcheck_layer_report(&s, &randn(&[2, 4, 6, 6], r), true, STEP, |ctx, v| l.forward(ctx, v))
        }),
        ("downsample_approx", |r| {
            let mut s = ParamStore::new();
            let l = DownsampleBlock::new(&mut s, "d", c(4), 4, 4, DownsampleMode::Approx, 6, NormKind::Field, r)?;
            gradcheck_layer_report(&s, &randn(&[2, 4, 6, 6], r), true, STEP, |ctx, v| l.forward(ctx, v))
        }),
        ("re_channel_attention", |r| {
            let mut s = ParamStore::new();
            let l = REChannelAttention::new(&mut s, "a", c(4), 8, r)?;
            gradcheck_layer_report(&s, &randn(&[2, 8, 3, 3], r), false, STEP, |ctx, v| l.forward(ctx, v))
        }),
        ("naive_channel_attention", |r| {
            let mut s = ParamStore::new();
            let l = NaiveChannelAttention::new(&mut s, "a", 8, r)?;
            gradcheck_layer_report(&s, &randn(&[2, 8, 3, 3], r), false, STEP, |ctx, v| l.forward(ctx, v))
        }),
    ]
}

pub fn op_names() -> Vec<&'static str> {
    registry().into_iter().map(|(n, _)| n).collect()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GradcheckResult {
    pub op: String,
    pub points: usize,
    pub step: f64,
    pub max_rel_error: f64,
    pub max_normwise_error: f64,
    pub pass: bool,
}

fn key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn run_one(name: &str, check: impl Fn(&mut Rng) -> Result<GradErrors>, points: usize, seed: u64) -> Result<GradErrors> {
    // Keyed by name so one op sees the same points alone or in "all".
    let root = Rng::new(seed);
    let mut worst = GradErrors::default();
    for p in 0..points {
        worst = worst.max(check(&mut root.fork(key(name).wrapping_add(p as u64)))?);
    }
    Ok(worst)
}

/// Run `op` (or every op for `"all"`) at `points` random points each.
/// `"model"` runs the whole-model check in training and evaluation mode.
pub fn run_gradcheck(op: &str, points: usize, seed: u64) -> Result<Vec<GradcheckResult>> {
    if op == "model" {
        return [("model_train_mode", true), ("model_eval_mode", false)]
            .into_iter()
            .map(|(name, train)| {
                let worst = run_one(name, |r| model_check(r, train), points, seed)?;
                Ok(GradcheckResult {
                    op: name.to_string(),
                    points,
                    step: MODEL_STEP,
                    max_rel_error: worst.elementwise,
                    max_normwise_error: worst.normwise,
                    pass: worst.normwise <= TOLERANCE,
                })
            })
            .collect();
    }
    let selected: Vec<_> = registry().into_iter().filter(|(n, _)| op == "all" || *n == op).collect();
    if selected.is_empty() {
        return Err(Error::invalid(format!("unknown op {op:?}; known: all, model, {}", op_names().join(", "))));
    }
    selected
        .into_iter()
        .map(|(name, check)| {
            let worst = run_one(name, check, points, seed)?;
            Ok(GradcheckResult {
                op: name.to_string(),
                points,
                step: STEP,
                max_rel_error: worst.elementwise,
                max_normwise_error: worst.normwise,
                pass: worst.elementwise <= TOLERANCE,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique() {
        let mut names = op_names();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(run_gradcheck("nope", 1, 0).is_err());
    }

    #[test]
    fn single_op() {
        let r = run_gradcheck("silu", 2, 0).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].pass, "{r:?}");
        assert_eq!(r[0].step, STEP);
    }

    #[test]
    fn whole_model_normwise() {
        let r = run_gradcheck("model", 1, 0).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|r| r.pass && r.step == MODEL_STEP), "{r:?}");
    }
}
