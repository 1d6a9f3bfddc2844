//! Central finite-difference oracle for the backward rules.

use super::{Graph, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Relative error used throughout: `|a - b| / (|a| + |b| + 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-8)
}

/// Compare analytic and central-difference gradients of a single-input op.
/// The op's output is reduced to a scalar by a fixed random weighting, so
/// every output element contributes. Returns the maximum relative error
/// over input elements.
pub fn finite_diff_check<F>(op: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    finite_diff_check_multi(|_, xs| op(xs[0]), std::slice::from_ref(input), eps)
}

/// Multi-input variant; the error is the maximum over all elements of all
/// inputs.
pub fn finite_diff_check_multi<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    Ok(finite_diff_report(op, inputs, eps)?.elementwise)
}

/// Both error measures of one finite-difference comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradErrors {
    /// Max over elements of [`rel_error`].
    pub elementwise: f64,
    /// Max over inputs of `max|a - cd| / (max|a| + 1e-8)`, each input's
    /// error relative to its largest gradient entry.
    pub normwise: f64,
}

impl GradErrors {
    pub fn max(self, other: GradErrors) -> GradErrors {
        GradErrors {
            elementwise: self.elementwise.max(other.elementwise),
            normwise: self.normwise.max(other.normwise),
        }
    }
}

pub fn finite_diff_report<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradErrors>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let g = Graph::inference();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let y = op(&g, &vars)?;
        Ok((*y.value()).clone())
    };
    let y0 = eval(inputs)?;
    let mut rng = Rng::new(0x5eed_f1d0);
    let weights = Tensor::<f64>::randn(y0.shape(), &mut rng);
    let weighted = |y: &Tensor<f64>| -> f64 {
        y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let g = Graph::new();
    let leaves: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let y = op(&g, &leaves)?;
    let w = g.constant(weights.clone());
    let grads = g.backward(y.mul(w)?.sum()?)?;

    let mut out = GradErrors::default();
    let mut xs = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf);
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for e in 0..xs[k].numel() {
            let orig = xs[k].data()[e];
            xs[k].data_mut()[e] = orig + eps;
            let plus = weighted(&eval(&xs)?);
            xs[k].data_mut()[e] = orig - eps;
            let minus = weighted(&eval(&xs)?);
            xs[k].data_mut()[e] = orig;
            let cd = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[e];
            out.elementwise = out.elementwise.max(rel_error(a, cd));
            diff = diff.max((a - cd).abs());
            scale = scale.max(a.abs());
        }
        out.normwise = out.normwise.max(diff / (scale + 1e-8));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvSpec;

    #[test]
    fn linear_op_is_exact() {
        let mut rng = Rng::new(2);
        let x = Tensor::randn(&[6], &mut rng);
        let err = finite_diff_check(|v| v.scale(3.0), &x, 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn silu_within_tolerance() {
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let x = Tensor::randn(&[8], &mut rng);
            let err = finite_diff_check(|v| v.silu(), &x, 1e-3).unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }

    #[test]
    fn two_layer_conv_net() {
        let mut rng = Rng::new(5);
        let x = Tensor::randn(&[2, 2, 6, 6], &mut rng);
        let w1 = Tensor::randn(&[3, 2, 3, 3], &mut rng).scale(0.5).unwrap();
        let w2 = Tensor::randn(&[2, 3, 3, 3], &mut rng).scale(0.5).unwrap();
        let spec = ConvSpec::new(3, 1, 1);
        let err = finite_diff_check_multi(
            |_, v| v[0].conv2d(v[1], spec)?.silu()?.conv2d(v[2], ConvSpec::new(3, 0, 2)),
            &[x, w1, w2],
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
