use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::airway_prep::{LungParams, PreprocessParams, TracheaWeights};
use crate::bronchi::BronchiParams;
use crate::bundle_tree::GrowParams;
use crate::error::{BroncoError, Result};
use crate::gmm::GmmParams;
use crate::skeleton::SkeletonParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Lung,
    Trachea,
    Preprocess,
    Gmm,
    Bundle,
    Skeleton,
    Graph,
    Directions,
    Grow,
    Hierarchy,
    Bronchi,
    Volumes,
    Qa,
}

impl Stage {
    pub const ALL: [Stage; 13] = [
        Stage::Lung,
        Stage::Trachea,
        Stage::Preprocess,
        Stage::Gmm,
        Stage::Bundle,
        Stage::Skeleton,
        Stage::Graph,
        Stage::Directions,
        Stage::Grow,
        Stage::Hierarchy,
        Stage::Bronchi,
        Stage::Volumes,
        Stage::Qa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Lung => "lung",
            Stage::Trachea => "trachea",
            Stage::Preprocess => "preprocess",
            Stage::Gmm => "gmm",
            Stage::Bundle => "bundle",
            Stage::Skeleton => "skeleton",
            Stage::Graph => "graph",
            Stage::Directions => "directions",
            Stage::Grow => "grow",
            Stage::Hierarchy => "hierarchy",
            Stage::Bronchi => "bronchi",
            Stage::Volumes => "volumes",
            Stage::Qa => "qa",
        }
    }

    fn position(self) -> usize {
        Stage::ALL.iter().position(|s| *s == self).expect("listed")
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = BroncoError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| BroncoError::Usage(format!("unknown stage `{s}`")))
    }
}

/// Parse `a,b,c`, `a..c` or `all` into a validated stage list.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    let s = s.trim();
    if s == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    let stages = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (Stage::from_str(a)?, Stage::from_str(b)?);
        if a > b {
            return Err(BroncoError::Usage(format!("empty stage range {a}..{b}")));
        }
        Stage::ALL[a.position()..=b.position()].to_vec()
    } else {
        s.split(',').map(Stage::from_str).collect::<Result<Vec<_>>>()?
    };
    validate_stages(&stages)?;
    Ok(stages)
}

/// A stage list must be a non-empty run of consecutive stages in canonical
/// order. Stages before it are resumed from the output directory.
pub fn validate_stages(stages: &[Stage]) -> Result<()> {
    if stages.is_empty() {
        return Err(BroncoError::Usage("no stages selected".into()));
    }
    for w in stages.windows(2) {
        if w[1].position() != w[0].position() + 1 {
            return Err(BroncoError::Usage(format!(
                "stages must be consecutive in pipeline order; `{}` cannot follow `{}`",
                w[1], w[0]
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KneeMethod {
    /// Largest perpendicular distance to the chord of the count curve.
    Chord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub lung_mask: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub stages: Vec<Stage>,
    pub lung: LungParams,
    pub trachea_weights: TracheaWeights,
    pub preprocess: PreprocessParams,
    pub gmm: GmmParams,
    pub knee_method: KneeMethod,
    pub skeleton: SkeletonParams,
    pub grow: GrowParams,
    pub bronchi: BronchiParams,
    pub regression: Option<PathBuf>,
    pub interval_level: f64,
    /// Seeds every random step; overrides `gmm.seed`.
    pub seed: u64,
    pub flip_axial: bool,
    pub export: ExportFlags,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: PathBuf::new(),
            lung_mask: None,
            out_dir: PathBuf::from("out"),
            stages: Stage::ALL.to_vec(),
            lung: LungParams::default(),
            trachea_weights: TracheaWeights::default(),
            preprocess: PreprocessParams::default(),
            gmm: GmmParams::default(),
            knee_method: KneeMethod::Chord,
            skeleton: SkeletonParams::default(),
            grow: GrowParams::default(),
            bronchi: BronchiParams::default(),
            regression: None,
            interval_level: 0.95,
            seed: 0,
            flip_axial: false,
            export: ExportFlags::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        validate_stages(&self.stages)?;
        if !(self.interval_level > 0.0 && self.interval_level < 1.0) {
            return Err(BroncoError::param("interval_level must be in (0, 1)"));
        }
        if self.gmm.k == 0 {
            return Err(BroncoError::param("gmm.k must be >= 1"));
        }
        if !(self.bronchi.stop_factor > 0.0) {
            return Err(BroncoError::param("bronchi.stop_factor must be > 0"));
        }
        Ok(())
    }

    /// GMM parameters with the run seed applied.
    pub fn gmm_params(&self) -> GmmParams {
        GmmParams {
            seed: self.seed,
            ..self.gmm.clone()
        }
    }

    pub fn bronchi_params(&self) -> BronchiParams {
        BronchiParams {
            flip_axial: self.flip_axial,
            ..self.bronchi.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportFlags {
    /// 0/1 mask of vessels and bronchi.
    pub binary: bool,
    /// uint16 branch label map.
    pub labeled: bool,
}
