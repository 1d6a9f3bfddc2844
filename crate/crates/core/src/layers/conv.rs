use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::norm::{EquivBatchNorm, NormKind, NormLayout};
use super::{Ctx, ParamId, ParamKind, ParamStore};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::group::{expansion_map, CyclicGroup, Expansion};
use crate::rng::Rng;
use crate::tensor::{ConvSpec, Float, SparseLinear, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Plain input channels to regular features.
    Lift,
    /// Regular features to regular features.
    Group,
    /// Orientation-major features, one shared kernel turned per orientation
    /// group (head branches).
    Branch,
}

/// Convolution whose kernel bank is expanded from a learnable base kernel.
#[derive(Clone, Debug)]
pub struct EquivConv {
    kind: ConvKind,
    group: CyclicGroup,
    spec: ConvSpec,
    in_channels: usize,
    out_channels: usize,
    weight: ParamId,
    bias: Option<ParamId>,
    map: Rc<SparseLinear>,
}

impl EquivConv {
    /// `out_channels` counts expanded channels and must be a multiple of N.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: ConvKind,
        group: CyclicGroup,
        in_channels: usize,
        out_channels: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let n = group.order();
        if out_channels == 0 || !out_channels.is_multiple_of(n) {
            return Err(Error::invalid(format!(
                "{name}: {out_channels} output channels not a positive multiple of N={n}"
            )));
        }
        let f_out = out_channels / n;
        let (base_in, expansion) = match kind {
            ConvKind::Lift => (in_channels, Expansion::Lift),
            ConvKind::Group => {
                if !in_channels.is_multiple_of(n) {
                    return Err(Error::invalid(format!(
                        "{name}: {in_channels} input channels not a multiple of N={n}"
                    )));
                }
                (in_channels, Expansion::Group)
            }
            ConvKind::Branch => {
                if !in_channels.is_multiple_of(n) {
                    return Err(Error::invalid(format!(
                        "{name}: {in_channels} input channels not a multiple of N={n}"
                    )));
                }
                if bias {
                    return Err(Error::invalid(format!("{name}: branch convolutions take no bias")));
                }
                (in_channels / n, Expansion::PerOrientation)
            }
        };
        let shape = [f_out, base_in, spec.k, spec.k];
        let fan_in = base_in * spec.k * spec.k;
        let weight = store.add_kaiming(format!("{name}.weight"), &shape, fan_in, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[f_out]), ParamKind::NoDecay)?)
        } else {
            None
        };
        let map = Rc::new(expansion_map(&shape, expansion, group)?);
        Ok(EquivConv {
            kind,
            group,
            spec,
            in_channels,
            out_channels,
            weight,
            bias,
            map,
        })
    }

    pub fn kind(&self) -> ConvKind {
        self.kind
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    fn groups(&self) -> usize {
        match self.kind {
            ConvKind::Branch => self.group.order(),
            _ => 1,
        }
    }

    /// The full kernel bank derived from the current base kernel.
    pub fn expanded_kernel<T: Float>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        self.map.apply(store.get(self.weight))
    }

    pub fn param_count<T: Float>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).numel() + self.bias.map_or(0, |b| store.get(b).numel())
    }

    pub fn forward<'g, T: Float>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape(format!(
                "convolution expects {} input channels, got shape {shape:?}",
                self.in_channels
            )));
        }
        let kernel = ctx.param(self.weight).sparse_linear(self.map.clone())?;
        let y = x.conv2d_grouped(kernel, self.spec, self.groups())?;
        match self.bias {
            None => Ok(y),
            Some(b) => {
                let per_channel = ctx.param(b).repeat_blocks(self.group.order())?;
                y.add_channel_bias(per_channel)
            }
        }
    }
}

/// Convolution (no bias), batch normalisation, SiLU.
#[derive(Clone, Debug)]
pub struct ConvModule {
    conv: EquivConv,
    norm: EquivBatchNorm,
}

impl ConvModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: ConvKind,
        group: CyclicGroup,
        in_channels: usize,
        out_channels: usize,
        spec: ConvSpec,
        norm: NormKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        let conv = EquivConv::new(
            store,
            &format!("{name}.conv"),
            kind,
            group,
            in_channels,
            out_channels,
            spec,
            false,
            rng,
        )?;
        let n = group.order();
        let layout = match (norm, kind) {
            (NormKind::PerChannel, _) => NormLayout::PerChannel,
            (NormKind::Field, ConvKind::Branch) => NormLayout::OrientationMajor {
                fields: out_channels / n,
            },
            (NormKind::Field, _) => NormLayout::Fields { n },
        };
        let norm = EquivBatchNorm::new(store, &format!("{name}.bn"), out_channels, layout)?;
        Ok(ConvModule { conv, norm })
    }

    pub fn conv(&self) -> &EquivConv {
        &self.conv
    }

    pub fn norm(&self) -> &EquivBatchNorm {
        &self.norm
    }

    pub fn param_count<T: Float>(&self, store: &ParamStore<T>) -> usize {
        self.conv.param_count(store) + self.norm.param_count()
    }

    pub fn forward<'g, T: Float>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.conv.forward(ctx, x)?;
        self.norm.forward(ctx, y)?.silu()
    }
}

/// Residual unit `x + module(x)` with a 3x3 group convolution.
#[derive(Clone, Debug)]
pub struct Block {
    module: ConvModule,
}

impl Block {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        group: CyclicGroup,
        channels: usize,
        norm: NormKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        let module = ConvModule::new(
            store,
            name,
            ConvKind::Group,
            group,
            channels,
            channels,
            ConvSpec::new(3, 1, 1),
            norm,
            rng,
        )?;
        Ok(Block { module })
    }

    pub fn module(&self) -> &ConvModule {
        &self.module
    }

    pub fn forward<'g, T: Float>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.add(self.module.forward(ctx, x)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownsampleMode {
    /// Insert a tuning convolution before the stride-2 convolution whenever
    /// the incoming extent is even.
    Strict,
    /// Stride-2 convolution only.
    Approx,
}

impl std::fmt::Display for DownsampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DownsampleMode::Strict => "strict",
            DownsampleMode::Approx => "approx",
        })
    }
}

impl std::str::FromStr for DownsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(DownsampleMode::Strict),
            "approx" => Ok(DownsampleMode::Approx),
            other => Err(Error::invalid(format!(
                "unknown downsample mode {other:?} (expected strict or approx)"
            ))),
        }
    }
}

/// Halving block: optional tuning convolution (k=4, p=1, s=1) then the
/// stride-2 convolution (k=3, p=1, s=2).
#[derive(Clone, Debug)]
pub struct DownsampleBlock {
    mode: DownsampleMode,
    tuning: Option<ConvModule>,
    down: ConvModule,
    in_extent: usize,
}

impl DownsampleBlock {
    pub const TUNING: ConvSpec = ConvSpec::new(4, 1, 1);
    pub const DOWN: ConvSpec = ConvSpec::new(3, 1, 2);

    /// Whether a strict block on `extent` needs the tuning convolution.
    pub fn needs_tuning(mode: DownsampleMode, extent: usize) -> bool {
        mode == DownsampleMode::Strict && extent.is_multiple_of(2)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        group: CyclicGroup,
        in_channels: usize,
        out_channels: usize,
        mode: DownsampleMode,
        in_extent: usize,
        norm: NormKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        if in_extent < 2 {
            return Err(Error::invalid(format!("{name}: cannot downsample extent {in_extent}")));
        }
        let tuning = if Self::needs_tuning(mode, in_extent) {
            Some(ConvModule::new(
                store,
                &format!("{name}.tuning"),
                ConvKind::Group,
                group,
                in_channels,
                in_channels,
                Self::TUNING,
                norm,
                rng,
            )?)
        } else {
            None
        };
        let down = ConvModule::new(
            store,
            &format!("{name}.down"),
            ConvKind::Group,
            group,
            in_channels,
            out_channels,
            Self::DOWN,
            norm,
            rng,
        )?;
        let block = DownsampleBlock {
            mode,
            tuning,
            down,
            in_extent,
        };
        block.out_extent()?;
        Ok(block)
    }

    pub fn mode(&self) -> DownsampleMode {
        self.mode
    }

    pub fn has_tuning(&self) -> bool {
        self.tuning.is_some()
    }

    pub fn in_extent(&self) -> usize {
        self.in_extent
    }

    pub fn out_extent(&self) -> Result<usize> {
        let mid = match self.tuning {
            Some(_) => Self::TUNING.out_size(self.in_extent)?,
            None => self.in_extent,
        };
        Self::DOWN.out_size(mid)
    }

    pub fn modules(&self) -> impl Iterator<Item = &ConvModule> {
        self.tuning.iter().chain(std::iter::once(&self.down))
    }

    pub fn forward<'g, T: Float>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = match &self.tuning {
            Some(t) => t.forward(ctx, x)?,
            None => x,
        };
        self.down.forward(ctx, h)
    }
}
