use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use bronco::bundle_tree::{branch_label, UNREACHED_LABEL};
use bronco::io::{load_labels, load_mask, save_mask, save_volume, ScalarType};
use bronco::phantom::{generate, ChestParams, PhantomSpec};
use bronco::pipeline::{
    artifacts, export_outputs, load_hierarchy, parse_stages, run_pipeline, ExportFlags, PipelineConfig, Stage,
};
use bronco::skeleton::SkeletonGraph;
use bronco::BroncoError;

fn write_phantom(dir: &Path, dims: usize) {
    let spec = PhantomSpec::chest(&ChestParams {
        dims: [dims; 3],
        ..Default::default()
    })
    .unwrap();
    let p = generate(&spec).unwrap();
    save_volume(&p.ct, dir.join("ct.nii.gz"), ScalarType::I16).unwrap();
    save_mask(&p.lung, dir.join("lung.nii.gz")).unwrap();
}

fn config(dir: &Path) -> PipelineConfig {
    PipelineConfig {
        input: dir.join("ct.nii.gz"),
        lung_mask: Some(dir.join("lung.nii.gz")),
        out_dir: dir.join("out"),
        export: ExportFlags {
            binary: true,
            labeled: true,
        },
        ..Default::default()
    }
}

#[test]
fn full_run_writes_consistent_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    write_phantom(tmp.path(), 96);
    let cfg = config(tmp.path());
    let report = run_pipeline(&cfg).unwrap();
    let out = &cfg.out_dir;

    // No regression model: QA is skipped, not failed.
    assert!(report.qa.is_none());
    assert_eq!(report.exit_code(), 0);
    assert_eq!(report.stages.len(), 13);
    for rec in &report.stages {
        for name in &rec.outputs {
            assert!(out.join(name).is_file(), "{} missing after {}", name, rec.stage);
        }
    }
    for name in [
        artifacts::REPORT,
        artifacts::TIMINGS,
        artifacts::BINARY_EXPORT,
        artifacts::LABELED_EXPORT,
    ] {
        assert!(out.join(name).is_file(), "{name}");
    }

    let graph: SkeletonGraph = serde_json::from_str(&fs::read_to_string(out.join(artifacts::GRAPH)).unwrap()).unwrap();
    let xml = fs::read_to_string(out.join(artifacts::GRAPHML)).unwrap();
    let doc = roxmltree::Document::parse(&xml).unwrap();
    let count = |tag: &str| doc.descendants().filter(|n| n.has_tag_name(tag)).count();
    assert_eq!(count("node"), graph.nodes.len());
    assert_eq!(count("edge"), graph.edges.len());

    let hierarchy = load_hierarchy(out).unwrap();
    let labeled = load_labels(out.join(artifacts::LABELED_EXPORT)).unwrap();
    let found: BTreeSet<u32> = labeled.data().iter().copied().filter(|&l| l != 0).collect();
    let mut expected: BTreeSet<u32> = hierarchy.branches.iter().map(|b| branch_label(b.branch_id)).collect();
    if hierarchy.unreached_voxels > 0 {
        expected.insert(UNREACHED_LABEL);
    }
    assert!(found.is_subset(&expected), "{found:?} vs {expected:?}");
    assert_eq!(found.contains(&UNREACHED_LABEL), hierarchy.unreached_voxels > 0);

    let bundle = load_mask(out.join(artifacts::BUNDLE)).unwrap();
    let bronchi = load_mask(out.join(artifacts::BRONCHI)).unwrap();
    let binary = load_mask(out.join(artifacts::BINARY_EXPORT)).unwrap();
    assert_eq!(binary, bundle.union(&bronchi).unwrap());
    for (&l, &b) in labeled.data().iter().zip(bundle.data()) {
        assert_eq!(l != 0, b);
    }

    let v = report.volumes.unwrap();
    assert!(v.lung_ml > v.bundle_ml && v.bundle_ml > 0.0);

    // Re-running the tail from disk reproduces the same outputs.
    let first = fs::read(out.join(artifacts::HIERARCHY)).unwrap();
    let tail = PipelineConfig {
        stages: parse_stages("directions..volumes").unwrap(),
        export: ExportFlags::default(),
        ..cfg.clone()
    };
    let again = run_pipeline(&tail).unwrap();
    assert_eq!(again.stages.first().map(|s| s.stage), Some(Stage::Directions));
    assert_eq!(fs::read(out.join(artifacts::HIERARCHY)).unwrap(), first);
    assert_eq!(
        export_outputs(out, ExportFlags::default()).unwrap(),
        Vec::<String>::new()
    );
}

#[test]
fn resuming_without_inputs_names_the_missing_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    write_phantom(tmp.path(), 64);
    let cfg = PipelineConfig {
        stages: parse_stages("gmm..bundle").unwrap(),
        ..config(tmp.path())
    };
    match run_pipeline(&cfg) {
        Err(BroncoError::MissingDependency { stage, artifact }) => {
            assert_eq!(stage, "gmm");
            assert_eq!(artifact, artifacts::PREPROCESSED);
        }
        other => panic!("expected a missing dependency, got {other:?}"),
    }
}

#[test]
fn lung_mask_with_other_geometry_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    write_phantom(tmp.path(), 64);
    let other = tempfile::tempdir().unwrap();
    write_phantom(other.path(), 72);
    let cfg = PipelineConfig {
        lung_mask: Some(other.path().join("lung.nii.gz")),
        stages: vec![Stage::Lung],
        ..config(tmp.path())
    };
    assert!(run_pipeline(&cfg).is_err());
}
