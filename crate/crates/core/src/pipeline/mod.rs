//! Staged, resumable execution of the whole pipeline.
//!
//! Every stage writes its outputs into the output directory. A later
//! invocation that starts further down the stage order reloads what it needs
//! from there, so `lung..gmm` followed by `bundle..qa` produces the same
//! files as a single full run.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::airway_prep::{
    extract_mediastinum, fallback_lung_segmentation, preprocess_masks, segment_trachea, TracheaCandidateScore,
};
use crate::bronchi::{model_bronchi, node_log_jsonl, parse_node_log, NodeLog};
use crate::bundle_tree::{build_hierarchy, compute_directions, grow_labels, Directions, Hierarchy};
use crate::error::{BroncoError, Result};
use crate::gmm::{assign_classes, extract_bundle, fit_gmm, masked_intensities, GmmModel, KneeSelection};
use crate::grid::{BinaryMask, LabelMap, ScalarVolume};
use crate::io::{load_labels, load_mask, load_volume, save_labels, save_mask};
use crate::skeleton::{build_graph, skeletonize_with, Skeleton, SkeletonGraph};
use crate::volume_qa::{mask_volume, qa_verdict, QaVerdict, RegressionModel, Verdict};

pub use config::{parse_stages, validate_stages, ExportFlags, KneeMethod, PipelineConfig, Stage};

/// File names inside the output directory.
pub mod artifacts {
    pub const LUNG: &str = "lung_mask.nii.gz";
    pub const MEDIASTINUM: &str = "mediastinum_mask.nii.gz";
    pub const TRACHEA: &str = "trachea_mask.nii.gz";
    pub const TRACHEA_SCORES: &str = "trachea_candidates.json";
    pub const PREPROCESSED: &str = "preprocessed_mask.nii.gz";
    pub const GMM_MODEL: &str = "gmm_model.json";
    pub const GMM_LABELS: &str = "gmm_labels.nii.gz";
    pub const BUNDLE: &str = "bundle_mask.nii.gz";
    pub const KNEE: &str = "bundle_knee.json";
    pub const SKELETON: &str = "skeleton_mask.nii.gz";
    pub const GRAPH: &str = "graph.json";
    pub const GRAPHML: &str = "graph.graphml";
    pub const DIRECTIONS: &str = "directions.json";
    pub const BRANCH_LABELS: &str = "branch_labels.nii.gz";
    pub const GROWTH: &str = "growth.json";
    pub const HIERARCHY: &str = "hierarchy.json";
    pub const BRONCHI: &str = "bronchi_mask.nii.gz";
    pub const BRONCHI_LOG: &str = "bronchi_nodes.jsonl";
    pub const VOLUMES: &str = "volumes.json";
    pub const QA: &str = "qa.json";
    pub const REPORT: &str = "report.json";
    /// Wall-clock stage timings; the only output that differs between runs.
    pub const TIMINGS: &str = "timings.json";
    pub const BINARY_EXPORT: &str = "export_binary.nii.gz";
    pub const LABELED_EXPORT: &str = "export_labeled.nii.gz";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volumes {
    pub lung_ml: f64,
    pub bundle_ml: f64,
    pub bronchi_ml: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthSummary {
    pub directional_iterations: usize,
    pub isotropic_iterations: usize,
    pub unreached: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    #[serde(skip)]
    pub seconds: f64,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageRecord>,
    pub bronchi_log: Vec<NodeLog>,
    pub volumes: Option<Volumes>,
    pub qa: Option<QaVerdict>,
    pub warnings: Vec<String>,
    pub exports: Vec<String>,
}

impl RunReport {
    /// 0 when QA passed or did not run, 2 on a QA warning.
    pub fn exit_code(&self) -> i32 {
        match &self.qa {
            Some(q) if q.verdict != Verdict::Ok => 2,
            _ => 0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Lazily loaded inputs and in-memory stage results of one run.
struct Run<'a> {
    config: &'a PipelineConfig,
    stage: Stage,
    ct: Option<ScalarVolume>,
    masks: BTreeMap<&'static str, BinaryMask>,
    labels: BTreeMap<&'static str, LabelMap>,
    gmm: Option<GmmModel>,
    graph: Option<SkeletonGraph>,
    directions: Option<Directions>,
    outputs: Vec<String>,
}

impl<'a> Run<'a> {
    fn path(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(BroncoError::MissingDependency {
                stage: self.stage.to_string(),
                artifact: name.to_string(),
            })
        }
    }

    fn ct(&mut self) -> Result<&ScalarVolume> {
        if self.ct.is_none() {
            self.ct = Some(load_volume(&self.config.input)?);
        }
        Ok(self.ct.as_ref().expect("loaded"))
    }

    fn mask(&mut self, name: &'static str) -> Result<BinaryMask> {
        if let Some(m) = self.masks.get(name) {
            return Ok(m.clone());
        }
        let m = load_mask(self.require(name)?)?;
        self.masks.insert(name, m.clone());
        Ok(m)
    }

    fn label_map(&mut self, name: &'static str) -> Result<LabelMap> {
        if let Some(m) = self.labels.get(name) {
            return Ok(m.clone());
        }
        let m = load_labels(self.require(name)?)?;
        self.labels.insert(name, m.clone());
        Ok(m)
    }

    fn gmm(&mut self) -> Result<GmmModel> {
        if self.gmm.is_none() {
            self.gmm = Some(GmmModel::from_json(&fs::read_to_string(
                self.require(artifacts::GMM_MODEL)?,
            )?)?);
        }
        Ok(self.gmm.clone().expect("loaded"))
    }

    fn graph(&mut self) -> Result<SkeletonGraph> {
        if self.graph.is_none() {
            self.graph = Some(SkeletonGraph::from_json(&fs::read_to_string(
                self.require(artifacts::GRAPH)?,
            )?)?);
        }
        Ok(self.graph.clone().expect("loaded"))
    }

    fn directions(&mut self) -> Result<Directions> {
        if self.directions.is_none() {
            self.directions = Some(serde_json::from_str(&fs::read_to_string(
                self.require(artifacts::DIRECTIONS)?,
            )?)?);
        }
        Ok(self.directions.clone().expect("loaded"))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        fs::write(self.path(name), serde_json::to_string_pretty(value)?)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn text(&mut self, name: &str, s: &str) -> Result<()> {
        fs::write(self.path(name), s)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn put_mask(&mut self, name: &'static str, m: BinaryMask) -> Result<()> {
        save_mask(&m, self.path(name))?;
        self.outputs.push(name.to_string());
        self.masks.insert(name, m);
        Ok(())
    }

    fn put_labels(&mut self, name: &'static str, m: LabelMap) -> Result<()> {
        save_labels(&m, self.path(name))?;
        self.outputs.push(name.to_string());
        self.labels.insert(name, m);
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TracheaRecord {
    selected: u32,
    window: (f64, f64),
    candidates: Vec<TracheaCandidateScore>,
}

fn run_stage(run: &mut Run, stage: Stage, report: &mut RunReport) -> Result<()> {
    let cfg = run.config;
    match stage {
        Stage::Lung => {
            let lung = match &cfg.lung_mask {
                Some(p) => {
                    let m = load_mask(p)?;
                    run.ct()?.geometry().require_same(m.geometry(), "lung mask")?;
                    m
                }
                None => fallback_lung_segmentation(run.ct()?, &cfg.lung)?,
            };
            run.put_mask(artifacts::LUNG, lung)?;
        }
        Stage::Trachea => {
            let lung = run.mask(artifacts::LUNG)?;
            let mediastinum = extract_mediastinum(&lung)?;
            let seg = segment_trachea(run.ct()?, &mediastinum, cfg.trachea_weights)?;
            run.put_mask(artifacts::MEDIASTINUM, mediastinum)?;
            run.json(
                artifacts::TRACHEA_SCORES,
                &TracheaRecord {
                    selected: seg.selected,
                    window: seg.window,
                    candidates: seg.candidates,
                },
            )?;
            run.put_mask(artifacts::TRACHEA, seg.mask)?;
        }
        Stage::Preprocess => {
            let lung = run.mask(artifacts::LUNG)?;
            let trachea = run.mask(artifacts::TRACHEA)?;
            let region = preprocess_masks(&lung, &trachea, &cfg.preprocess)?;
            if region.none() {
                return Err(BroncoError::param("preprocessed region is empty"));
            }
            run.put_mask(artifacts::PREPROCESSED, region)?;
        }
        Stage::Gmm => {
            let region = run.mask(artifacts::PREPROCESSED)?;
            let ct = run.ct()?;
            let model = fit_gmm(&masked_intensities(ct, &region)?, &cfg.gmm_params())?;
            if !model.converged {
                report
                    .warnings
                    .push(format!("gmm did not converge within {} iterations", model.iterations));
            }
            let labels = assign_classes(&model, ct, &region)?;
            run.text(artifacts::GMM_MODEL, &model.to_json()?)?;
            run.gmm = Some(model);
            run.put_labels(artifacts::GMM_LABELS, labels)?;
        }
        Stage::Bundle => {
            let labels = run.label_map(artifacts::GMM_LABELS)?;
            let k = run.gmm()?.k as u32;
            let KneeMethod::Chord = cfg.knee_method;
            let (bundle, knee): (BinaryMask, KneeSelection) = extract_bundle(&labels, k)?;
            run.json(artifacts::KNEE, &knee)?;
            run.put_mask(artifacts::BUNDLE, bundle)?;
        }
        Stage::Skeleton => {
            let bundle = run.mask(artifacts::BUNDLE)?;
            let skel = skeletonize_with(&bundle, &cfg.skeleton)?;
            run.put_mask(artifacts::SKELETON, skel.mask)?;
        }
        Stage::Graph => {
            let skel = Skeleton {
                mask: run.mask(artifacts::SKELETON)?,
            };
            let graph = build_graph(&skel);
            run.text(artifacts::GRAPH, &graph.to_json()?)?;
            run.text(artifacts::GRAPHML, &graph.to_graphml())?;
            run.graph = Some(graph);
        }
        Stage::Directions => {
            let graph = run.graph()?;
            let dirs = compute_directions(&graph)?;
            run.json(artifacts::DIRECTIONS, &dirs)?;
            run.directions = Some(dirs);
        }
        Stage::Grow => {
            let graph = run.graph()?;
            let dirs = run.directions()?;
            let bundle = run.mask(artifacts::BUNDLE)?;
            let growth = grow_labels(&graph, &dirs, &bundle, &cfg.grow)?;
            if growth.unreached > 0 {
                report.warnings.push(format!(
                    "{} bundle voxels were not reached by any branch",
                    growth.unreached
                ));
            }
            run.json(
                artifacts::GROWTH,
                &GrowthSummary {
                    directional_iterations: growth.directional_iterations,
                    isotropic_iterations: growth.isotropic_iterations,
                    unreached: growth.unreached,
                },
            )?;
            run.put_labels(artifacts::BRANCH_LABELS, growth.labels)?;
        }
        Stage::Hierarchy => {
            let graph = run.graph()?;
            let dirs = run.directions()?;
            let labels = run.label_map(artifacts::BRANCH_LABELS)?;
            let trachea = run.mask(artifacts::TRACHEA)?;
            let tree = build_hierarchy(&graph, &dirs, &labels, &trachea, cfg.flip_axial)?;
            run.text(artifacts::HIERARCHY, &tree.hierarchy.to_json()?)?;
        }
        Stage::Bronchi => {
            let labels = run.label_map(artifacts::GMM_LABELS)?;
            let k = run.gmm()?.k as u32;
            let region = run.mask(artifacts::PREPROCESSED)?;
            let trachea = run.mask(artifacts::TRACHEA)?;
            let result = model_bronchi(run.ct()?, &labels, k, &region, &trachea, &cfg.bronchi_params())?;
            let removed = result
                .log
                .iter()
                .filter(|l| l.action != crate::bronchi::NodeAction::Accepted)
                .count();
            if removed > 0 {
                report.warnings.push(format!(
                    "bronchi: {removed} node(s) repaired or removed for suspected leaks"
                ));
            }
            run.text(artifacts::BRONCHI_LOG, &node_log_jsonl(&result.log)?)?;
            report.bronchi_log = result.log;
            run.put_mask(artifacts::BRONCHI, result.mask)?;
        }
        Stage::Volumes => {
            let v = Volumes {
                lung_ml: mask_volume(&run.mask(artifacts::LUNG)?),
                bundle_ml: mask_volume(&run.mask(artifacts::BUNDLE)?),
                bronchi_ml: mask_volume(&run.mask(artifacts::BRONCHI)?),
            };
            run.json(artifacts::VOLUMES, &v)?;
            report.volumes = Some(v);
        }
        Stage::Qa => {
            let v: Volumes = match &report.volumes {
                Some(v) => v.clone(),
                None => serde_json::from_str(&fs::read_to_string(run.require(artifacts::VOLUMES)?)?)?,
            };
            match &cfg.regression {
                None => report
                    .warnings
                    .push("no regression model given; volume QA skipped".to_string()),
                Some(p) => {
                    let model = RegressionModel::from_json(&fs::read_to_string(p)?)?;
                    let verdict = qa_verdict(&model, v.lung_ml, v.bundle_ml, cfg.interval_level)?;
                    run.json(artifacts::QA, &verdict)?;
                    if verdict.verdict != Verdict::Ok {
                        report.warnings.push(format!(
                            "qa: {} (bundle {:.2} ml, expected {:.2} ml in [{:.2}, {:.2}])",
                            verdict.verdict.as_str(),
                            verdict.measured_volume,
                            verdict.predicted_volume,
                            verdict.interval.0,
                            verdict.interval.1
                        ));
                    }
                    report.qa = Some(verdict);
                }
            }
        }
    }
    Ok(())
}

/// Run the configured stages and write `report.json`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)?;
    let mut run = Run {
        config,
        stage: config.stages[0],
        ct: None,
        masks: BTreeMap::new(),
        labels: BTreeMap::new(),
        gmm: None,
        graph: None,
        directions: None,
        outputs: Vec::new(),
    };
    let mut report = RunReport::default();
    for &stage in &config.stages {
        run.stage = stage;
        let t0 = Instant::now();
        run_stage(&mut run, stage, &mut report).map_err(|e| match e {
            e @ BroncoError::MissingDependency { .. } => e,
            e => BroncoError::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        })?;
        report.stages.push(StageRecord {
            stage,
            seconds: t0.elapsed().as_secs_f64(),
            outputs: std::mem::take(&mut run.outputs),
        });
    }
    if report.bronchi_log.is_empty() {
        if let Ok(s) = fs::read_to_string(run.path(artifacts::BRONCHI_LOG)) {
            report.bronchi_log = parse_node_log(&s)?;
        }
    }
    report.exports = export_outputs(&config.out_dir, config.export)?;
    fs::write(config.out_dir.join(artifacts::REPORT), report.to_json()?)?;
    let timings: BTreeMap<String, f64> = report.stages.iter().map(|s| (s.stage.to_string(), s.seconds)).collect();
    fs::write(
        config.out_dir.join(artifacts::TIMINGS),
        serde_json::to_string_pretty(&timings)?,
    )?;
    Ok(report)
}

/// Write the requested export files from the artifacts in `out_dir`.
pub fn export_outputs(out_dir: &Path, flags: ExportFlags) -> Result<Vec<String>> {
    let need = |name: &str| {
        let p = out_dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(BroncoError::MissingDependency {
                stage: "export".into(),
                artifact: name.into(),
            })
        }
    };
    let mut written = Vec::new();
    if flags.binary {
        let vessels = load_mask(need(artifacts::BUNDLE)?)?;
        let bronchi = load_mask(need(artifacts::BRONCHI)?)?;
        save_mask(&vessels.union(&bronchi)?, out_dir.join(artifacts::BINARY_EXPORT))?;
        written.push(artifacts::BINARY_EXPORT.to_string());
    }
    if flags.labeled {
        let labels = load_labels(need(artifacts::BRANCH_LABELS)?)?;
        save_labels(&labels, out_dir.join(artifacts::LABELED_EXPORT))?;
        written.push(artifacts::LABELED_EXPORT.to_string());
    }
    Ok(written)
}

/// Parse the hierarchy written by the `hierarchy` stage.
pub fn load_hierarchy(out_dir: &Path) -> Result<Hierarchy> {
    Hierarchy::from_json(&fs::read_to_string(out_dir.join(artifacts::HIERARCHY))?)
}
