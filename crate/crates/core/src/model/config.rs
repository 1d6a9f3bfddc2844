//! Network configuration and its TOML text form.
//!
//! ```toml
//! orientations = 8
//! input_size = 64
//! in_channels = 1
//!
//! [stem]
//! channels = 16
//!
//! [[stages]]
//! channels = 32
//! num_blocks = 1
//! downsample_mode = "strict"
//! attention = true
//!
//! [head]
//! kind = "multi_branch"
//! branch_modules = 3
//! hidden_channels = 64
//!
//! [task]
//! num_classes = 4
//! orientation_bins = 8
//!
//! [ablation]
//! attention = "equivariant"
//! norm = "field"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{out_size, ConvSpec, DownsampleBlock, DownsampleMode, NormKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub num_blocks: usize,
    pub downsample_mode: DownsampleMode,
    pub attention: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Orientation groups routed through one shared branch.
    #[default]
    MultiBranch,
    /// Group convolutions over all channels (comparison baseline).
    SingleBranch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default)]
    pub kind: HeadKind,
    pub branch_modules: usize,
    pub hidden_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub num_classes: usize,
    /// Soft-argmax bins; must equal `orientations` unless that is 1.
    pub orientation_bins: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Equivariant,
    /// One gate per channel (ablation).
    Naive,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default)]
    pub attention: AttentionKind,
    #[serde(default)]
    pub norm: NormKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub orientations: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
    pub head: HeadConfig,
    pub task: TaskConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_input_size() -> usize {
    64
}

fn default_in_channels() -> usize {
    1
}

pub const BRANCH_MODULE_CHOICES: [usize; 5] = [2, 3, 5, 7, 9];

impl Default for NetworkConfig {
    fn default() -> Self {
        let stage = |channels| StageConfig {
            channels,
            num_blocks: 1,
            downsample_mode: DownsampleMode::Strict,
            attention: true,
        };
        NetworkConfig {
            orientations: 8,
            input_size: 64,
            in_channels: 1,
            stem: StemConfig { channels: 16 },
            stages: vec![stage(32), stage(64), stage(96), stage(128)],
            head: HeadConfig {
                kind: HeadKind::MultiBranch,
                branch_modules: 3,
                hidden_channels: 64,
            },
            task: TaskConfig {
                num_classes: 4,
                orientation_bins: 8,
            },
            ablation: AblationConfig::default(),
        }
    }
}

/// One convolution as seen by static size propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub in_extent: usize,
    pub out_extent: usize,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

fn toml_error(text: &str, e: toml::de::Error) -> Error {
    Error::Config {
        message: e.message().to_string(),
        location: e.span().map(|s| line_col(text, s.start)),
    }
}

impl NetworkConfig {
    /// Set every stage to `mode`.
    pub fn with_mode(mut self, mode: DownsampleMode) -> Self {
        for s in &mut self.stages {
            s.downsample_mode = mode;
        }
        self
    }

    /// Change N, keeping `orientation_bins` consistent.
    pub fn with_orientations(mut self, n: usize) -> Self {
        self.orientations = n;
        if n > 1 {
            self.task.orientation_bins = n;
        }
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = toml::from_str(text).map_err(|e| toml_error(text, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Apply `key=value` overrides with dotted keys. Array elements are
    /// addressed by index (`stages.1.channels=48`) or all at once with `*`
    /// (`stages.*.downsample_mode=approx`). Values are parsed as TOML
    /// scalars and fall back to bare strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {item:?} is not key=value")))?;
            let value = parse_scalar(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            set_path(&mut root, &path, &value, key)?;
        }
        let cfg: NetworkConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("after overrides: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.orientations;
        let err = |m: String| Err(Error::config(m));
        if n == 0 {
            return err("orientations must be >= 1".into());
        }
        if self.input_size == 0 || self.in_channels == 0 {
            return err("input_size and in_channels must be >= 1".into());
        }
        if self.stem.channels == 0 || !self.stem.channels.is_multiple_of(n) {
            return err(format!(
                "stem.channels = {} must be a positive multiple of orientations = {n}",
                self.stem.channels
            ));
        }
        if self.stages.is_empty() {
            return err("at least one stage (downsampling) is required".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.channels % n != 0 {
                return err(format!(
                    "stages[{i}].channels = {} must be a positive multiple of orientations = {n}",
                    s.channels
                ));
            }
        }
        if !BRANCH_MODULE_CHOICES.contains(&self.head.branch_modules) {
            return err(format!(
                "head.branch_modules = {} must be one of {BRANCH_MODULE_CHOICES:?}",
                self.head.branch_modules
            ));
        }
        if self.head.hidden_channels == 0 || !self.head.hidden_channels.is_multiple_of(n) {
            return err(format!(
                "head.hidden_channels = {} must be a positive multiple of orientations = {n}",
                self.head.hidden_channels
            ));
        }
        if self.task.num_classes == 0 {
            return err("task.num_classes must be >= 1".into());
        }
        if n > 1 && self.task.orientation_bins != n {
            return err(format!(
                "task.orientation_bins = {} must equal orientations = {n}",
                self.task.orientation_bins
            ));
        }
        if self.task.orientation_bins < 2 {
            return err("task.orientation_bins must be >= 2".into());
        }
        self.layer_plan()?;
        Ok(())
    }

    /// Channels of the angle readout.
    pub fn angle_channels(&self) -> usize {
        if self.orientations > 1 {
            self.orientations
        } else {
            self.task.orientation_bins
        }
    }

    /// Every convolution with its input and output extent, in forward order.
    pub fn layer_plan(&self) -> Result<Vec<PlannedLayer>> {
        let mut plan = Vec::new();
        let mut extent = self.input_size;
        let mut push = |name: String, spec: ConvSpec, extent: &mut usize| -> Result<()> {
            let out = out_size(spec, *extent).map_err(|e| Error::config(format!("{name}: {e}")))?;
            plan.push(PlannedLayer {
                name,
                spec,
                in_extent: *extent,
                out_extent: out,
            });
            *extent = out;
            Ok(())
        };
        let same = ConvSpec::new(3, 1, 1);
        push("stem".into(), same, &mut extent)?;
        for (i, s) in self.stages.iter().enumerate() {
            let prefix = format!("stage{}", i + 1);
            if extent < 2 {
                return Err(Error::config(format!("{prefix}: extent {extent} too small to downsample")));
            }
            if DownsampleBlock::needs_tuning(s.downsample_mode, extent) {
                push(format!("{prefix}.down.tuning"), DownsampleBlock::TUNING, &mut extent)?;
            }
            push(format!("{prefix}.down.down"), DownsampleBlock::DOWN, &mut extent)?;
            for b in 0..s.num_blocks {
                push(format!("{prefix}.block{}", b + 1), same, &mut extent)?;
            }
        }
        for j in 0..self.head.branch_modules - 1 {
            push(format!("head.branch{}", j + 1), same, &mut extent)?;
        }
        push("head.aggregate".into(), ConvSpec::new(1, 0, 1), &mut extent)?;
        Ok(plan)
    }

    /// Spatial extent after the stem and after each stage.
    pub fn stage_extents(&self) -> Result<Vec<usize>> {
        let plan = self.layer_plan()?;
        let mut out = vec![plan[0].out_extent];
        for i in 1..=self.stages.len() {
            let prefix = format!("stage{i}.");
            let last = plan
                .iter()
                .rev()
                .find(|l| l.name.starts_with(&prefix))
                .expect("every stage plans a downsample");
            out.push(last.out_extent);
        }
        Ok(out)
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(node: &mut toml::Value, path: &[&str], value: &toml::Value, key: &str) -> Result<()> {
    let unknown = || Error::config(format!("override key {key:?} does not name a config field"));
    let (head, rest) = path.split_first().ok_or_else(unknown)?;
    match node {
        toml::Value::Table(t) => {
            let child = t.get_mut(*head).ok_or_else(unknown)?;
            if rest.is_empty() {
                *child = value.clone();
                Ok(())
            } else {
                set_path(child, rest, value, key)
            }
        }
        toml::Value::Array(items) => {
            let targets: Vec<usize> = if *head == "*" {
                (0..items.len()).collect()
            } else {
                vec![head.parse::<usize>().map_err(|_| unknown())?]
            };
            for i in targets {
                let child = items.get_mut(i).ok_or_else(unknown)?;
                if rest.is_empty() {
                    *child = value.clone();
                } else {
                    set_path(child, rest, value, key)?;
                }
            }
            Ok(())
        }
        _ => Err(unknown()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = NetworkConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        assert_eq!(NetworkConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn doc_example_parses() {
        let text = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let cfg = NetworkConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.stages.len(), 1);
        assert_eq!(cfg.head.branch_modules, 3);
    }

    #[test]
    fn parse_error_has_location() {
        let text = "orientations = 8\nstem = { channels = 16 }\nstages = [\n  { channels = 32, num_blocks = x }\n]\n";
        match NetworkConfig::from_toml_str(text) {
            Err(Error::Config { location: Some((line, _)), .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let mut text = NetworkConfig::default().to_toml_string();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(matches!(NetworkConfig::from_toml_str(&text), Err(Error::Config { .. })));
    }

    #[test]
    fn validation_messages() {
        let bad = |f: &dyn Fn(&mut NetworkConfig)| {
            let mut c = NetworkConfig::default();
            f(&mut c);
            c.validate().unwrap_err().to_string()
        };
        assert!(bad(&|c| c.stages[1].channels = 60).contains("stages[1].channels"));
        assert!(bad(&|c| c.head.branch_modules = 4).contains("branch_modules"));
        assert!(bad(&|c| c.stages.clear()).contains("at least one stage"));
        assert!(bad(&|c| c.task.orientation_bins = 4).contains("orientation_bins"));
        assert!(bad(&|c| c.input_size = 4).contains("too small") || bad(&|c| c.input_size = 4).contains("stage"));
    }

    #[test]
    fn overrides() {
        let cfg = NetworkConfig::default();
        let o = cfg
            .with_overrides(&[
                "stages.*.downsample_mode=approx".into(),
                "stages.1.channels=48".into(),
                "head.branch_modules=5".into(),
            ])
            .unwrap();
        assert!(o.stages.iter().all(|s| s.downsample_mode == DownsampleMode::Approx));
        assert_eq!(o.stages[1].channels, 48);
        assert_eq!(o.head.branch_modules, 5);
        assert!(cfg.with_overrides(&["nope.x=1".into()]).is_err());
        assert!(cfg.with_overrides(&["stages.0.channels=30".into()]).is_err());
        assert!(cfg.with_overrides(&["orientations".into()]).is_err());
    }

    #[test]
    fn default_plan_sizes() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.stage_extents().unwrap(), vec![64, 32, 16, 8, 4]);
        let plan = cfg.layer_plan().unwrap();
        let t = plan.iter().find(|l| l.name == "stage1.down.tuning").unwrap();
        assert_eq!((t.in_extent, t.out_extent), (64, 63));
        let approx = cfg.clone().with_mode(DownsampleMode::Approx);
        assert_eq!(approx.stage_extents().unwrap(), vec![64, 32, 16, 8, 4]);
        assert!(approx.layer_plan().unwrap().iter().all(|l| !l.name.ends_with("tuning")));
    }
}
