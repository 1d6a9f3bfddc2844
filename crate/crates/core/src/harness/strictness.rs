use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::NetworkConfig;

/// One convolution in the static size propagation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub name: String,
    /// Input extent plus both paddings.
    pub padded_in: usize,
    pub k: usize,
    pub s: usize,
    /// `(padded_in - k) mod s`.
    pub residue: usize,
    pub verdict: Verdict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrictnessReport {
    pub input_size: usize,
    pub layers: Vec<LayerCheck>,
}

impl StrictnessReport {
    pub fn is_strict(&self) -> bool {
        self.layers.iter().all(|l| l.verdict == Verdict::Pass)
    }

    pub fn first_failure(&self) -> Option<&LayerCheck> {
        self.layers.iter().find(|l| l.verdict == Verdict::Fail)
    }

    pub fn to_csv(&self) -> Result<String> {
        super::report::rows_to_csv(&self.layers)
    }

    pub fn from_csv(text: &str) -> Result<Vec<LayerCheck>> {
        super::report::rows_from_csv(text)
    }
}

/// Propagate spatial extents through every convolution of `config` at
/// `input_size` and test each strided layer for a symmetric sampling
/// lattice. Pure arithmetic; nothing is built.
pub fn check_strictness(config: &NetworkConfig, input_size: usize) -> Result<StrictnessReport> {
    let mut cfg = config.clone();
    cfg.input_size = input_size;
    let layers = cfg
        .layer_plan()?
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let padded_in = l.in_extent + 2 * l.spec.p;
            let residue = l.spec.residue(l.in_extent);
            LayerCheck {
                layer: i,
                name: l.name,
                padded_in,
                k: l.spec.k,
                s: l.spec.s,
                residue,
                verdict: if l.spec.s > 1 && residue != 0 {
                    Verdict::Fail
                } else {
                    Verdict::Pass
                },
            }
        })
        .collect();
    Ok(StrictnessReport { input_size, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::DownsampleMode;

    #[test]
    fn default_strict_passes() {
        let r = check_strictness(&NetworkConfig::default(), 64).unwrap();
        assert!(r.is_strict());
        let strided: Vec<_> = r.layers.iter().filter(|l| l.s == 2).map(|l| l.padded_in).collect();
        // tuned extents 63, 31, 15, 7, padded by 2
        assert_eq!(strided, vec![65, 33, 17, 9]);
    }

    #[test]
    fn approx_flags_first_downsample() {
        let cfg = NetworkConfig::default().with_mode(DownsampleMode::Approx);
        let r = check_strictness(&cfg, 64).unwrap();
        assert!(!r.is_strict());
        let f = r.first_failure().unwrap();
        assert_eq!((f.name.as_str(), f.padded_in, f.k, f.s, f.residue), ("stage1.down.down", 66, 3, 2, 1));
    }

    #[test]
    fn odd_input_is_strict_without_tuning() {
        // 65 -> 33 -> 17 -> 9 -> 5: every stride-2 input is odd.
        let cfg = NetworkConfig::default().with_mode(DownsampleMode::Approx);
        assert!(check_strictness(&cfg, 65).unwrap().is_strict());
    }

    #[test]
    fn collapse_is_an_error() {
        assert!(check_strictness(&NetworkConfig::default(), 3).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let cfg = NetworkConfig::default().with_mode(DownsampleMode::Approx);
        let r = check_strictness(&cfg, 64).unwrap();
        let text = r.to_csv().unwrap();
        assert!(text.starts_with("layer,name,padded_in,k,s,residue,verdict\n"));
        assert_eq!(StrictnessReport::from_csv(&text).unwrap(), r.layers);
    }
}
