use super::{Ctx, ParamId, ParamKind, ParamStore, PoolKind};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::group::CyclicGroup;
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

fn small_normal<T: Float>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(std * rng.normal()))
}

/// Channel attention producing one gate per field, repeated over the N
/// orientation channels of that field.
///
/// The squeezed descriptor `z` is first replaced by its per-field
/// orientation mean (block-repeated back to length C). A rotation permutes
/// `z` within each field, so this is what makes `W z` invariant for an
/// arbitrary `W` of shape `(C/N) x C`.
#[derive(Clone, Debug)]
pub struct REChannelAttention {
    weight: ParamId,
    bias: ParamId,
    n: usize,
    channels: usize,
}

impl REChannelAttention {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        group: CyclicGroup,
        channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n = group.order();
        if channels == 0 || !channels.is_multiple_of(n) {
            return Err(Error::invalid(format!("{name}: {channels} channels not a multiple of N={n}")));
        }
        let f = channels / n;
        Ok(REChannelAttention {
            weight: store.add(format!("{name}.weight"), small_normal(&[f, channels], channels, rng), ParamKind::Weight)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[f]), ParamKind::NoDecay)?,
            n,
            channels,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// `C^2/N + C/N`.
    pub fn param_count(&self) -> usize {
        let f = self.channels / self.n;
        f * self.channels + f
    }

    /// Gate vector before repetition, `[B, C/N]`.
    pub fn gates<'g, T: Float>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let z = x.global_avg_pool()?;
        let z = z.orientation_pool(self.n, PoolKind::Mean)?.repeat_blocks(self.n)?;
        let w = ctx.param(self.weight).transpose()?;
        z.matmul(w)?.add_row_bias(ctx.param(self.bias))?.hard_sigmoid()
    }

    pub fn forward<'g, T: Float>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "attention over {} channels got {shape:?}",
                self.channels
            )));
        }
        let s = self.gates(ctx, x)?.repeat_blocks(self.n)?;
        x.scale_channels(s)
    }
}

/// Squeeze-excitation with one independent gate per channel (ablation).
#[derive(Clone, Debug)]
pub struct NaiveChannelAttention {
    weight: ParamId,
    bias: ParamId,
    channels: usize,
}

impl NaiveChannelAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(NaiveChannelAttention {
            weight: store.add(
                format!("{name}.weight"),
                small_normal(&[channels, channels], channels, rng),
                ParamKind::Weight,
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), ParamKind::NoDecay)?,
            channels,
        })
    }

    /// `C^2 + C`.
    pub fn param_count(&self) -> usize {
        self.channels * self.channels + self.channels
    }

    pub fn forward<'g, T: Float>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let z = x.global_avg_pool()?;
        let w = ctx.param(self.weight).transpose()?;
        let s = z.matmul(w)?.add_row_bias(ctx.param(self.bias))?.hard_sigmoid()?;
        x.scale_channels(s)
    }
}
