use std::rc::Rc;

use super::{Ctx, ParamId, ParamKind, ParamStore, BN_MOMENTUM};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Which channels share normalisation statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// One set of statistics and affine terms per field, shared by its N
    /// orientation channels.
    #[default]
    Field,
    /// Independent statistics per channel (ablation; breaks equivariance).
    PerChannel,
}

/// Channel-to-block assignment for a concrete layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormLayout {
    /// Field-major regular features, `c = f*N + o`.
    Fields { n: usize },
    /// Orientation-major features, `c = o*F + f`.
    OrientationMajor { fields: usize },
    PerChannel,
}

impl NormLayout {
    pub fn blocks(self, channels: usize) -> Result<Vec<usize>> {
        let div = |d: usize| {
            if d == 0 || !channels.is_multiple_of(d) {
                Err(Error::invalid(format!("{channels} channels not divisible by {d}")))
            } else {
                Ok(())
            }
        };
        match self {
            NormLayout::Fields { n } => {
                div(n)?;
                Ok((0..channels).map(|c| c / n).collect())
            }
            NormLayout::OrientationMajor { fields } => {
                div(fields)?;
                Ok((0..channels).map(|c| c % fields).collect())
            }
            NormLayout::PerChannel => Ok((0..channels).collect()),
        }
    }
}

/// Batch normalisation with statistics pooled per block of channels.
#[derive(Clone, Debug)]
pub struct EquivBatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    blocks: Rc<Vec<usize>>,
    num_blocks: usize,
}

impl EquivBatchNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, layout: NormLayout) -> Result<Self> {
        let blocks = layout.blocks(channels)?;
        let nb = blocks.iter().max().map_or(0, |m| m + 1);
        Ok(EquivBatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[nb]), ParamKind::NoDecay)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[nb]), ParamKind::NoDecay)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[nb]), ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[nb]), ParamKind::Buffer)?,
            blocks: Rc::new(blocks),
            num_blocks: nb,
        })
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    pub fn param_count(&self) -> usize {
        2 * self.num_blocks
    }

    /// Training mode normalises with batch statistics and records updated
    /// running statistics on the context; eval mode uses the running ones.
    pub fn forward<'g, T: Float>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if !ctx.is_train() {
            let store = ctx.store();
            return x.batch_norm_eval(
                gamma,
                beta,
                self.blocks.clone(),
                store.get(self.running_mean),
                store.get(self.running_var),
            );
        }
        let (y, mean, var) = x.batch_norm_train(gamma, beta, self.blocks.clone())?;
        let shape = x.shape();
        let per_block = shape[0] * shape[2..].iter().product::<usize>() * shape[1] / self.num_blocks;
        let unbias = if per_block > 1 {
            per_block as f64 / (per_block - 1) as f64
        } else {
            1.0
        };
        let store = ctx.store();
        let blend = |old: &Tensor<T>, new: &Tensor<T>, scale: f64| {
            let data = old
                .data()
                .iter()
                .zip(new.data())
                .map(|(&o, &n)| T::from_f64((1.0 - BN_MOMENTUM) * o.as_f64() + BN_MOMENTUM * scale * n.as_f64()))
                .collect();
            Tensor::new(old.shape().to_vec(), data)
        };
        ctx.push_update(self.running_mean, blend(store.get(self.running_mean), &mean, 1.0)?);
        ctx.push_update(self.running_var, blend(store.get(self.running_var), &var, unbias)?);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::layers::gradcheck_layer;
    use crate::rng::Rng;

    #[test]
    fn layouts() {
        assert_eq!(NormLayout::Fields { n: 4 }.blocks(8).unwrap(), vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(
            NormLayout::OrientationMajor { fields: 2 }.blocks(8).unwrap(),
            vec![0, 1, 0, 1, 0, 1, 0, 1]
        );
        assert_eq!(NormLayout::PerChannel.blocks(3).unwrap(), vec![0, 1, 2]);
        assert!(NormLayout::Fields { n: 3 }.blocks(8).is_err());
    }

    #[test]
    fn constant_input_gives_shift() {
        let mut store = ParamStore::<f32>::new();
        let bn = EquivBatchNorm::new(&mut store, "bn", 8, NormLayout::Fields { n: 4 }).unwrap();
        store.set(bn.beta(), Tensor::new(vec![2], vec![0.5, -3.0]).unwrap()).unwrap();
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, true);
        let y = bn.forward(&ctx, g.constant(Tensor::full(&[2, 8, 3, 3], 7.0))).unwrap().value();
        for (i, plane) in y.data().chunks_exact(9).enumerate() {
            let expect = if i % 8 < 4 { 0.5 } else { -3.0 };
            assert!(plane.iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn running_stats_update_and_eval() {
        let mut store = ParamStore::<f64>::new();
        let bn = EquivBatchNorm::new(&mut store, "bn", 2, NormLayout::PerChannel).unwrap();
        let x = Tensor::<f64>::new(vec![2, 2, 1, 1], vec![1.0, 10.0, 3.0, 20.0]).unwrap();
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, true);
        bn.forward(&ctx, g.constant(x.clone())).unwrap();
        let updates = ctx.take_updates();
        drop(ctx);
        store.apply_updates(updates).unwrap();
        let m = store.get(store.find("bn.running_mean").unwrap()).data().to_vec();
        let v = store.get(store.find("bn.running_var").unwrap()).data().to_vec();
        assert!((m[0] - 0.2).abs() < 1e-12 && (m[1] - 1.5).abs() < 1e-12);
        // unbiased batch variances 2 and 50
        assert!((v[0] - (0.9 + 0.2)).abs() < 1e-12 && (v[1] - (0.9 + 5.0)).abs() < 1e-12);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        let y = bn.forward(&ctx, g.constant(x)).unwrap().value();
        let expect0 = (1.0 - 0.2) / (1.1f64 + 1e-5).sqrt();
        assert!((y.data()[0] - expect0).abs() < 1e-12);
    }

    #[test]
    fn gradients_in_both_modes() {
        let mut rng = Rng::new(0);
        let mut store = ParamStore::<f64>::new();
        let bn = EquivBatchNorm::new(&mut store, "bn", 8, NormLayout::Fields { n: 4 }).unwrap();
        store.set(bn.gamma(), Tensor::new(vec![2], vec![1.3, 0.7]).unwrap()).unwrap();
        for _ in 0..3 {
            let x = Tensor::<f64>::randn(&[2, 8, 3, 3], &mut rng);
            for train in [true, false] {
                let err = gradcheck_layer(&store, &x, train, |ctx, v| bn.forward(ctx, v)).unwrap();
                assert!(err <= 1e-4, "train={train}: {err}");
            }
        }
    }
}
