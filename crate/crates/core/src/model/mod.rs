//! Configurable equivariant backbone with the orientation-grouped head.
//!
//! Layout: lift stem, then one stage per config entry (downsample, residual
//! blocks, optional channel attention), then the head. The head rearranges
//! the last stage into N orientation groups, runs a branch of
//! `branch_modules - 1` modules whose kernel is shared across groups (turned
//! by each group's angle), merges back, and aggregates with a 1x1 group
//! convolution into class and orientation responses.

mod checkpoint;
mod config;

pub use checkpoint::Checkpoint;
pub use config::{
    AblationConfig, AttentionKind, HeadConfig, HeadKind, NetworkConfig, PlannedLayer, StageConfig, StemConfig,
    TaskConfig, BRANCH_MODULE_CHOICES,
};

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, PoolKind, Var};
use crate::error::{Error, Result};
use crate::group::CyclicGroup;
use crate::layers::{
    merge_orientations, rearrange_by_orientation, Block, ConvKind, ConvModule, ConvSpec, Ctx, DownsampleBlock,
    EquivConv, NaiveChannelAttention, ParamStore, REChannelAttention,
};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
enum Attention {
    Equivariant(REChannelAttention),
    Naive(NaiveChannelAttention),
}

impl Attention {
    fn forward<'g, T: Float>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            Attention::Equivariant(a) => a.forward(ctx, x),
            Attention::Naive(a) => a.forward(ctx, x),
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: DownsampleBlock,
    blocks: Vec<Block>,
    attention: Option<Attention>,
}

#[derive(Clone, Debug)]
struct Head {
    kind: HeadKind,
    branch: Vec<ConvModule>,
    aggregate: EquivConv,
}

/// Graph-level outputs of one forward pass.
pub struct ForwardVars<'g, T: Float> {
    /// `[B, num_classes]`, invariant.
    pub logits: Var<'g, T>,
    /// `[B]` radians in `(-pi, pi]`, equivariant.
    pub angle: Var<'g, T>,
    /// Named intermediate features in forward order: `S0` (stem), `S1`...
    /// (stages) and `head` (merged branch output), all field-major.
    pub taps: Vec<(String, Var<'g, T>)>,
}

/// Materialised outputs of an evaluation-mode forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor<f32>,
    pub angle: Vec<f64>,
    pub taps: Vec<(String, Tensor<f32>)>,
}

impl Prediction {
    pub fn classes(&self) -> Vec<usize> {
        let k = self.logits.shape()[1];
        self.logits
            .data()
            .chunks_exact(k)
            .map(|row| {
                // first maximum, so ties resolve identically on both sides of a comparison
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: NetworkConfig,
    group: CyclicGroup,
    params: ParamStore<f32>,
    stem: ConvModule,
    stages: Vec<Stage>,
    head: Head,
}

impl Model {
    pub fn build(config: &NetworkConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let group = CyclicGroup::new(config.orientations)?;
        let n = group.order();
        let norm = config.ablation.norm;
        let mut params = ParamStore::new();
        let same = ConvSpec::new(3, 1, 1);

        let stem = ConvModule::new(
            &mut params,
            "stem",
            ConvKind::Lift,
            group,
            config.in_channels,
            config.stem.channels,
            same,
            norm,
            rng,
        )?;
        let mut channels = config.stem.channels;
        let mut extent = config.input_size;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, sc) in config.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let down = DownsampleBlock::new(
                &mut params,
                &format!("{name}.down"),
                group,
                channels,
                sc.channels,
                sc.downsample_mode,
                extent,
                norm,
                rng,
            )?;
            extent = down.out_extent()?;
            channels = sc.channels;
            let blocks = (0..sc.num_blocks)
                .map(|b| Block::new(&mut params, &format!("{name}.block{}", b + 1), group, channels, norm, rng))
                .collect::<Result<Vec<_>>>()?;
            let attention = if sc.attention {
                let aname = format!("{name}.attn");
                Some(match config.ablation.attention {
                    AttentionKind::Equivariant => {
                        Attention::Equivariant(REChannelAttention::new(&mut params, &aname, group, channels, rng)?)
                    }
                    AttentionKind::Naive => {
                        Attention::Naive(NaiveChannelAttention::new(&mut params, &aname, channels, rng)?)
                    }
                })
            } else {
                None
            };
            stages.push(Stage {
                down,
                blocks,
                attention,
            });
        }

        let hidden = config.head.hidden_channels;
        let branch_kind = match config.head.kind {
            HeadKind::MultiBranch => ConvKind::Branch,
            HeadKind::SingleBranch => ConvKind::Group,
        };
        let mut branch = Vec::new();
        let mut width = channels;
        for j in 0..config.head.branch_modules - 1 {
            branch.push(ConvModule::new(
                &mut params,
                &format!("head.branch{}", j + 1),
                branch_kind,
                group,
                width,
                hidden,
                same,
                norm,
                rng,
            )?);
            width = hidden;
        }
        let out_fields = config.task.num_classes + config.angle_channels() / n;
        let aggregate = EquivConv::new(
            &mut params,
            "head.aggregate",
            ConvKind::Group,
            group,
            width,
            out_fields * n,
            ConvSpec::new(1, 0, 1),
            true,
            rng,
        )?;
        Ok(Model {
            config: config.clone(),
            group,
            params,
            stem,
            stages,
            head: Head {
                kind: config.head.kind,
                branch,
                aggregate,
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn group(&self) -> CyclicGroup {
        self.group
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    /// Names of the feature taps, in forward order.
    pub fn tap_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..=self.stages.len()).map(|i| format!("S{i}")).collect();
        names.push("head".into());
        names
    }

    /// Forward pass on any graph and parameter precision. `ctx` decides
    /// between batch statistics (train) and running statistics (eval).
    pub fn forward<'g, T: Float>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<ForwardVars<'g, T>> {
        let shape = x.shape();
        let cfg = &self.config;
        if shape.len() != 4
            || shape[1] != cfg.in_channels
            || shape[2] != cfg.input_size
            || shape[3] != cfg.input_size
        {
            return Err(Error::shape(format!(
                "model expects [B, {}, {s}, {s}], got {shape:?}",
                cfg.in_channels,
                s = cfg.input_size
            )));
        }
        let n = self.group.order();
        let mut taps = Vec::with_capacity(self.stages.len() + 2);
        let mut h = self.stem.forward(ctx, x)?;
        taps.push(("S0".to_string(), h));
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.down.forward(ctx, h)?;
            for b in &stage.blocks {
                h = b.forward(ctx, h)?;
            }
            if let Some(a) = &stage.attention {
                h = a.forward(ctx, h)?;
            }
            taps.push((format!("S{}", i + 1), h));
        }

        let mut h = match self.head.kind {
            HeadKind::MultiBranch => rearrange_by_orientation(h, n)?,
            HeadKind::SingleBranch => h,
        };
        for m in &self.head.branch {
            h = m.forward(ctx, h)?;
        }
        if self.head.kind == HeadKind::MultiBranch {
            h = merge_orientations(h, n)?;
        }
        taps.push(("head".to_string(), h));

        let out = self.head.aggregate.forward(ctx, h)?.global_avg_pool()?;
        let class_width = cfg.task.num_classes * n;
        let logits = out
            .select_channels(0, class_width)?
            .orientation_pool(n, PoolKind::Mean)?;
        let angle = out
            .select_channels(class_width, class_width + cfg.angle_channels())?
            .angle_readout()?;
        Ok(ForwardVars { logits, angle, taps })
    }

    /// Evaluation-mode forward on a batch, without recording gradients.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Prediction> {
        let graph = Graph::inference();
        let ctx = Ctx::new(&graph, &self.params, false);
        let out = self.forward(&ctx, graph.constant(x.clone()))?;
        let logits = (*out.logits.value()).clone();
        if !logits.all_finite() {
            return Err(Error::NonFinite("model forward".into()));
        }
        Ok(Prediction {
            logits,
            angle: out.angle.value().data().iter().map(|v| v.as_f64()).collect(),
            taps: out.taps.iter().map(|(k, v)| (k.clone(), (*v.value()).clone())).collect(),
        })
    }

    /// Evaluation-mode tap tensors for `x`.
    pub fn features(&self, x: &Tensor<f32>) -> Result<Vec<(String, Tensor<f32>)>> {
        Ok(self.predict(x)?.taps)
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Trainable scalars per top-level module (`stem`, `stage1`, ..., `head`)
    /// followed by `total`.
    pub fn param_counts(&self) -> Vec<(String, usize)> {
        let mut out = vec![("stem".to_string(), self.params.trainable_count_prefix("stem."))];
        for i in 1..=self.stages.len() {
            let p = format!("stage{i}");
            let c = self.params.trainable_count_prefix(&format!("{p}."));
            out.push((p, c));
        }
        out.push(("head".into(), self.head_param_count()));
        out.push(("total".into(), self.param_count()));
        out
    }

    pub fn head_param_count(&self) -> usize {
        self.params.trainable_count_prefix("head.")
    }

    /// Trainable scalars of the attention units alone.
    pub fn attention_param_count(&self) -> usize {
        (1..=self.stages.len())
            .map(|i| self.params.trainable_count_prefix(&format!("stage{i}.attn.")))
            .sum()
    }

    /// SHA-256 over the configuration text and every named tensor.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.to_toml_string().as_bytes());
        for (_, p) in self.params.iter() {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copy named tensors into the store; every parameter and buffer must be
    /// present with a matching shape.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        let ids: Vec<_> = self.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = tensors
                .iter()
                .find(|(k, _)| *k == format!("param/{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor param/{name}")))?;
            self.params
                .set(id, t.1.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    /// All parameters and buffers as `param/<name>` tensors.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.params
            .iter()
            .map(|(_, p)| (format!("param/{}", p.name), p.value.clone()))
            .collect()
    }
}
