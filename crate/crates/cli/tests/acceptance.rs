//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion fails. Every tolerance is pinned in the constants next to the
//! check that uses it.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use bronco::bronchi::{
    fast_march, initial_bronchi_mask, model_bronchi, repair_leak, BronchiParams, LeakRepair, NodeAction,
};
use bronco::bundle_tree::{
    branch_label, compute_directions, grow_labels, select_axis, BaseAxis, GrowParams, UNREACHED_LABEL,
};
use bronco::components::{connected_components, count_components};
use bronco::gmm::{assign_classes, fit_gmm, fit_gmm_traced, masked_intensities, GmmParams};
use bronco::io::{save_mask, save_volume, ScalarType};
use bronco::morphology::{dilate, erode, StructuringElement};
use bronco::phantom::{generate, ChestParams, PhantomSpec, AIRWAY_POCKET};
use bronco::pipeline::Volumes;
use bronco::skeleton::{build_graph, skeletonize, SkeletonEdge, SkeletonGraph, SkeletonNode};
use bronco::volume_qa::{chauvenet_z, fit_regression, predict_with_interval, RegressionModel};
use bronco::{BinaryMask, Connectivity, Geometry, Grid, LabelMap};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_bronco")
}

fn dims_geometry(d: [usize; 3]) -> Geometry {
    Geometry::with_dims(d).unwrap()
}

// ---------------------------------------------------------------- 1

fn oracle_morph(m: &BinaryMask, offsets: &[[i64; 3]], dilation: bool) -> BinaryMask {
    let g = *m.geometry();
    Grid::from_fn(g, |x, y, z| {
        let mut hits = offsets.iter().map(|o| {
            let p = [x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]];
            g.contains(p) && *m.get(p[0] as usize, p[1] as usize, p[2] as usize)
        });
        if dilation {
            hits.any(|h| h)
        } else {
            hits.all(|h| h)
        }
    })
}

fn oracle_offsets(r: i64, ball: bool) -> Vec<[i64; 3]> {
    let mut v = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if !ball || dx * dx + dy * dy + dz * dz <= r * r {
                    v.push([dx, dy, dz]);
                }
            }
        }
    }
    v
}

/// Flood fill labels in first-voxel order.
fn oracle_components(m: &BinaryMask, full: bool) -> Vec<u32> {
    let g = *m.geometry();
    let mut labels = vec![0u32; g.len()];
    let mut next = 0;
    for start in 0..g.len() {
        if !m.data()[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut q = VecDeque::from([start]);
        while let Some(i) = q.pop_front() {
            let c = g.coords(i);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let manhattan = dx.abs() + dy.abs() + dz.abs();
                        if manhattan == 0 || (!full && manhattan > 1) {
                            continue;
                        }
                        let p = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                        if let Some(j) = g.index_of(p) {
                            if m.data()[j] && labels[j] == 0 {
                                labels[j] = next;
                                q.push_back(j);
                            }
                        }
                    }
                }
            }
        }
    }
    labels
}

fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut ab = BTreeMap::new();
    let mut ba = BTreeMap::new();
    a.iter()
        .zip(b)
        .all(|(&x, &y)| (x == 0) == (y == 0) && *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x)
}

fn criterion_1() -> Outcome {
    const MASKS: u64 = 50;
    const RUNTIME_S: f64 = 10.0;
    let t0 = Instant::now();
    let g = dims_geometry([24; 3]);
    let mut mismatches = 0;
    for seed in 0..MASKS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.random_range(0.1..0.6);
        let m = Grid::from_fn(g, |_, _, _| rng.random_bool(p));
        for (elem, offs) in [
            (StructuringElement::ball(1), oracle_offsets(1, true)),
            (StructuringElement::ball(2), oracle_offsets(2, true)),
            (StructuringElement::box3d(1), oracle_offsets(1, false)),
        ] {
            mismatches += (dilate(&m, &elem).unwrap() != oracle_morph(&m, &offs, true)) as usize;
            mismatches += (erode(&m, &elem).unwrap() != oracle_morph(&m, &offs, false)) as usize;
        }
        for (conn, full) in [(Connectivity::Six, false), (Connectivity::TwentySix, true)] {
            let cc = connected_components(&m, conn);
            mismatches += !same_partition(cc.labels.data(), &oracle_components(&m, full)) as usize;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < RUNTIME_S,
        format!("{MASKS} masks, {mismatches} mismatches, {secs:.2} s (limit {RUNTIME_S} s)"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    const MEANS: [f64; 3] = [-950.0, -700.0, -100.0];
    const SIGMA: f64 = 30.0;
    const SAMPLES: usize = 100_000;
    const MEAN_TOL: f64 = 10.0;
    const WEIGHT_TOL: f64 = 0.03;
    const RUNTIME_S: f64 = 5.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let values: Vec<f64> = (0..SAMPLES)
        .map(|i| Normal::new(MEANS[i % 3], SIGMA).unwrap().sample(&mut rng))
        .collect();
    let t0 = Instant::now();
    let fit = fit_gmm_traced(
        &values,
        &GmmParams {
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let m = &fit.model;
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| m.means[a].total_cmp(&m.means[b]));
    let mean_err = order
        .iter()
        .zip(MEANS)
        .map(|(&j, t)| (m.means[j] - t).abs())
        .fold(0.0, f64::max);
    let weight_err = order
        .iter()
        .map(|&j| (m.weights[j] - 1.0 / 3.0).abs())
        .fold(0.0, f64::max);
    let decreases = fit
        .log_likelihoods
        .windows(2)
        .filter(|w| w[1] < w[0] - 1e-9 * w[0].abs())
        .count();
    check(
        mean_err <= MEAN_TOL && weight_err <= WEIGHT_TOL && decreases == 0 && secs < RUNTIME_S,
        format!(
            "max mean error {mean_err:.2} HU (<= {MEAN_TOL}), max weight error {weight_err:.4} (<= {WEIGHT_TOL}), \
             {decreases} log-likelihood decreases over {} iterations, {secs:.2} s (< {RUNTIME_S} s)",
            fit.log_likelihoods.len()
        ),
    )
}

// ---------------------------------------------------------------- 3, 4

struct TreeCase {
    spec: PhantomSpec,
    mask: BinaryMask,
}

fn tree_cases() -> Vec<TreeCase> {
    (0..10u64)
        .map(|i| {
            let branches = [3, 5, 7][i as usize % 3];
            let spec = PhantomSpec::random_tree(100 + i, branches, [96; 3]).unwrap();
            let p = generate(&spec).unwrap();
            TreeCase {
                mask: p.truth.branch_labels.nonzero(),
                spec,
            }
        })
        .collect()
}

/// Chebyshev distance (voxels) from `p` to the polyline set, by sampling
/// every segment axis at 1/50 voxel.
fn chebyshev_to_axes(spec: &PhantomSpec, p: [f64; 3]) -> f64 {
    let mut best = f64::INFINITY;
    for s in &spec.segments {
        let n = (s.length() * 50.0).ceil() as usize;
        for k in 0..=n {
            let t = k as f64 / n as f64;
            let q = [0, 1, 2].map(|a| s.start[a] + t * (s.end[a] - s.start[a]));
            let d = (0..3).map(|a| (p[a] - q[a]).abs()).fold(0.0, f64::max);
            best = best.min(d);
        }
    }
    best
}

fn criterion_3(cases: &[TreeCase]) -> Outcome {
    const MAX_DIST: f64 = 2.0;
    const MIN_FRACTION: f64 = 0.95;
    let mut worst = 1.0f64;
    let mut component_changes = 0;
    for c in cases {
        let skel = skeletonize(&c.mask).unwrap();
        let pts = skel.mask.indices();
        let g = *skel.mask.geometry();
        let near = pts
            .iter()
            .filter(|&&i| {
                let v = g.coords(i);
                chebyshev_to_axes(&c.spec, [v[0] as f64, v[1] as f64, v[2] as f64]) <= MAX_DIST
            })
            .count();
        worst = worst.min(near as f64 / pts.len() as f64);
        if count_components(&skel.mask, Connectivity::TwentySix) != count_components(&c.mask, Connectivity::TwentySix) {
            component_changes += 1;
        }
    }
    check(
        worst >= MIN_FRACTION && component_changes == 0,
        format!(
            "{} phantoms, worst fraction within {MAX_DIST} voxels {:.4} (>= {MIN_FRACTION}), {component_changes} component count changes",
            cases.len(),
            worst
        ),
    )
}

fn nearest_truth_node(nodes: &[[f64; 3]], p: [f64; 3]) -> usize {
    let d = |q: &[f64; 3]| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
    (0..nodes.len())
        .min_by(|&a, &b| d(&nodes[a]).total_cmp(&d(&nodes[b])))
        .unwrap()
}

fn criterion_4(cases: &[TreeCase]) -> Outcome {
    const LENGTH_TOL: f64 = 0.15;
    let mut count_mismatch = 0;
    let mut unmatched = 0;
    let mut edges = 0;
    let mut outside = 0;
    let mut worst: f64 = 0.0;
    for c in cases {
        let truth = c.spec.truth_graph();
        let graph = build_graph(&skeletonize(&c.mask).unwrap());
        if graph.nodes.len() != truth.nodes.len() || graph.edges.len() != truth.edges.len() {
            count_mismatch += 1;
            continue;
        }
        for e in &graph.edges {
            edges += 1;
            let a = nearest_truth_node(&truth.nodes, graph.nodes[e.node_a].center_mm);
            let b = nearest_truth_node(&truth.nodes, graph.nodes[e.node_b].center_mm);
            let Some(&(_, _, seg)) = truth
                .edges
                .iter()
                .find(|t| (t.0, t.1) == (a, b) || (t.0, t.1) == (b, a))
            else {
                unmatched += 1;
                continue;
            };
            let rel = (e.length_mm - c.spec.segments[seg].length()) / c.spec.segments[seg].length();
            worst = if rel.abs() > worst.abs() { rel } else { worst };
            if rel.abs() > LENGTH_TOL {
                outside += 1;
            }
        }
    }
    check(
        count_mismatch == 0 && unmatched == 0 && outside == 0,
        format!(
            "{count_mismatch} phantoms with wrong node/edge counts, {unmatched} unmatched edges, \
             {outside}/{edges} edge lengths outside ±{:.0}% (worst {:+.1}%)",
            LENGTH_TOL * 100.0,
            worst * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    const VECTORS: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut violations = 0;
    for _ in 0..VECTORS {
        let u: [f64; 3] = std::array::from_fn(|_| normal.sample(&mut rng));
        // Oracle: axis of the largest |component|; z is axial, x sagittal, y coronal.
        let k = (0..3).max_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs())).unwrap();
        let want = [BaseAxis::Sagittal, BaseAxis::Coronal, BaseAxis::Axial][k];
        let scaled = rng.random_range(0.01..100.0);
        for v in [u, u.map(|c| c * scaled), u.map(|c| -c)] {
            if select_axis(v) != want {
                violations += 1;
            }
        }
    }
    check(violations == 0, format!("{VECTORS} vectors, {violations} violations"))
}

// ---------------------------------------------------------------- 6

fn cylinder(g: Geometry, cx: f64, cy: f64, r: f64, z: std::ops::RangeInclusive<usize>) -> BinaryMask {
    Grid::from_fn(g, |x, y, zz| {
        z.contains(&zz) && (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r
    })
}

fn coverage_holds(labels: &LabelMap, bundle: &BinaryMask) -> bool {
    labels.data().iter().zip(bundle.data()).all(|(&l, &b)| (l != 0) == b)
}

/// Two vertical branches at x = 10 and x = 18 with hand-built centerlines.
fn parallel_graph(g: Geometry) -> SkeletonGraph {
    let node = |id: usize, p: [usize; 3]| {
        let c = p.map(|v| v as f64);
        SkeletonNode {
            id,
            center: c,
            center_mm: c,
            voxels: vec![p],
        }
    };
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for (b, x) in [10usize, 18].into_iter().enumerate() {
        nodes.push(node(2 * b, [x, 16, 3]));
        nodes.push(node(2 * b + 1, [x, 16, 28]));
        edges.push(SkeletonEdge {
            branch_id: b,
            node_a: 2 * b,
            node_b: 2 * b + 1,
            path: (4..28).map(|z| [x, 16, z]).collect(),
            attach: [[x, 16, 3], [x, 16, 28]],
            length_mm: 25.0,
        });
    }
    SkeletonGraph {
        geometry: g,
        nodes,
        edges,
    }
}

fn criterion_6() -> Outcome {
    const MIN_BOUNDARY_FRACTION: f64 = 0.9;
    let g = dims_geometry([32, 32, 32]);

    let single = cylinder(g, 16.0, 16.0, 4.0, 3..=28);
    let graph = build_graph(&skeletonize(&single).unwrap());
    let dirs = compute_directions(&graph).unwrap();
    let grown = grow_labels(&graph, &dirs, &single, &GrowParams::default()).unwrap();
    let single_ok = graph.edges.len() == 1
        && grown.unreached == 0
        && single
            .indices()
            .iter()
            .all(|&i| grown.labels.data()[i] == branch_label(0));
    let mut coverage = coverage_holds(&grown.labels, &single);

    let merged = cylinder(g, 10.0, 16.0, 4.5, 3..=28)
        .union(&cylinder(g, 18.0, 16.0, 4.5, 3..=28))
        .unwrap();
    let graph = parallel_graph(g);
    let dirs = compute_directions(&graph).unwrap();
    let grown = grow_labels(&graph, &dirs, &merged, &GrowParams::default()).unwrap();
    coverage &= coverage_holds(&grown.labels, &merged);
    let l = &grown.labels;
    let (mut boundary, mut near) = (0, 0);
    for i in merged.indices() {
        let c = g.coords(i);
        let li = l.data()[i];
        let differs = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]].iter().any(|d| {
            g.offset(i, *d)
                .is_some_and(|j| l.data()[j] != 0 && l.data()[j] != UNREACHED_LABEL && l.data()[j] != li)
        });
        if differs {
            boundary += 1;
            if (c[0] as f64 - 14.0).abs() <= 1.0 {
                near += 1;
            }
        }
    }
    let frac = near as f64 / boundary.max(1) as f64;
    check(
        single_ok && coverage && boundary > 0 && frac >= MIN_BOUNDARY_FRACTION,
        format!(
            "single cylinder fully labeled: {single_ok}; boundary voxels within 1 of midplane {near}/{boundary} \
             ({frac:.3} >= {MIN_BOUNDARY_FRACTION}); coverage identity: {coverage}"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    const REL_TOL: f64 = 0.10;
    const MIN_RADIUS: f64 = 3.0;
    const SCALE_TOL: f64 = 1e-9;
    const RUNTIME_S: f64 = 5.0;
    let g = dims_geometry([64; 3]);
    let seed = g.index(32, 32, 32);
    let t0 = Instant::now();
    let one = fast_march(&Grid::filled(g, 1.0), seed, f64::INFINITY, None).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    for i in 0..g.len() {
        let c = g.coords(i).map(|v| v as f64 - 32.0);
        let r = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        if r >= MIN_RADIUS {
            worst = worst.max((one.arrival.data()[i] - r).abs() / r);
        }
    }
    let c = 2.5;
    let fast = fast_march(&Grid::filled(g, c), seed, f64::INFINITY, None).unwrap();
    let scale_err = one
        .arrival
        .data()
        .iter()
        .zip(fast.arrival.data())
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| ((a / c) - b).abs() / (a / c))
        .fold(0.0, f64::max);
    check(
        worst <= REL_TOL && scale_err <= SCALE_TOL && secs < RUNTIME_S,
        format!(
            "max relative error {worst:.4} for r >= {MIN_RADIUS} (<= {REL_TOL}), scaling error {scale_err:.2e} \
             (<= {SCALE_TOL:e}), {secs:.2} s (< {RUNTIME_S} s)"
        ),
    )
}

// ---------------------------------------------------------------- 8

fn ball(g: Geometry, c: [f64; 3], r: f64) -> BinaryMask {
    Grid::from_fn(g, |x, y, z| {
        (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2) <= r * r
    })
}

fn criterion_8() -> Outcome {
    const MAX_SPLIT_EROSIONS: usize = 2;
    const BUDGET: usize = 5;
    let g = dims_geometry([48, 24, 24]);
    let neck = Grid::from_fn(g, |x, y, z| (12..=36).contains(&x) && y == 12 && z == 12);
    let dumbbell = ball(g, [12.0, 12.0, 12.0], 7.0)
        .union(&ball(g, [36.0, 12.0, 12.0], 7.0))
        .unwrap()
        .union(&neck)
        .unwrap();
    let seed = g.index(12, 12, 12);
    let (split_ok, detail) = match repair_leak(&dumbbell, seed, BUDGET).unwrap() {
        LeakRepair::Split {
            erosions,
            separation,
            kept,
        } => {
            let excludes_seed_side = !separation.data()[seed]
                && separation.intersection(&kept).unwrap().none()
                && separation.data()[g.index(36, 12, 12)]
                && kept.data()[seed];
            (
                erosions <= MAX_SPLIT_EROSIONS && excludes_seed_side,
                format!("dumbbell split after {erosions} erosion(s), separation excludes seed component: {excludes_seed_side}"),
            )
        }
        LeakRepair::Unrepairable { erosions } => (false, format!("dumbbell unrepairable after {erosions}")),
    };
    let solid = ball(g, [24.0, 12.0, 12.0], 10.0);
    let r = repair_leak(&solid, g.index(24, 12, 12), BUDGET).unwrap();
    let solid_ok = matches!(r, LeakRepair::Unrepairable { erosions } if erosions == BUDGET);
    check(
        split_ok && solid_ok,
        format!(
            "{detail}; solid ball: {:?} after {} erosions (expected unrepairable at {BUDGET})",
            r.outcome(),
            r.erosions()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    const MIN_DICE: f64 = 0.90;
    const MIN_EXCLUSION: f64 = 0.95;
    let run = |hole: bool| {
        let p = generate(&PhantomSpec::airway_tree(hole, 20.0, 7)).unwrap();
        let gmm = fit_gmm(&masked_intensities(&p.ct, &p.lung).unwrap(), &GmmParams::default()).unwrap();
        let labels = assign_classes(&gmm, &p.ct, &p.lung).unwrap();
        let trachea = p
            .truth
            .branch_labels
            .map(|&l| l == 1)
            .intersection(&p.truth.airway_lumen)
            .unwrap();
        let params = BronchiParams::default();
        assert!(initial_bronchi_mask(&labels, &p.lung, 3, &params).is_ok());
        let r = model_bronchi(&p.ct, &labels, 3, &p.lung, &trachea, &params).unwrap();
        (p, r)
    };
    let (p, clean) = run(false);
    let truth = &p.truth.airway_lumen;
    let inter = clean.mask.intersection(truth).unwrap().count() as f64;
    let dice = 2.0 * inter / (clean.mask.count() + truth.count()) as f64;

    let (p, holed) = run(true);
    let (c, r) = AIRWAY_POCKET;
    let pocket = ball(*p.ct.geometry(), c, r).difference(&p.truth.airway_lumen).unwrap();
    let exclusion = 1.0 - holed.mask.intersection(&pocket).unwrap().count() as f64 / pocket.count() as f64;
    let flagged = holed.log.iter().filter(|l| l.action != NodeAction::Accepted).count();
    check(
        dice >= MIN_DICE && exclusion >= MIN_EXCLUSION && flagged >= 1,
        format!(
            "clean Dice {dice:.3} (>= {MIN_DICE}); pocket exclusion {exclusion:.3} (>= {MIN_EXCLUSION}), \
             {flagged} node(s) repaired or removed"
        ),
    )
}

// ---------------------------------------------------------------- 10

/// erfc by composite Simpson integration of the normal density on [z, z + 12].
fn erfc_oracle(x: f64) -> f64 {
    let z = x * std::f64::consts::SQRT_2;
    let n = 20_000;
    let h = 12.0 / n as f64;
    let f = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(z) + f(z + 12.0);
    for k in 1..n {
        s += f(z + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    2.0 * s * h / 3.0
}

fn criterion_10() -> Outcome {
    const SLOPE_TOL: f64 = 0.01;
    const COVERAGE: f64 = 0.95;
    const COVERAGE_TOL: f64 = 0.02;
    const DRAWS: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let noise = Normal::new(0.0, 10.0).unwrap();
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| {
                let x = rng.random_range(2000.0..6000.0);
                (x, 0.08 * x + 40.0 + noise.sample(rng))
            })
            .collect()
    };
    let big = fit_regression(&draw(200, &mut rng)).unwrap();
    let slope_err = (big.slope - 0.08).abs();

    let mut covered = 0;
    for _ in 0..DRAWS {
        let train = draw(20, &mut rng);
        let m = fit_regression(&train).unwrap();
        let (x, y) = draw(1, &mut rng)[0];
        let (_, lo, hi) = predict_with_interval(&m, x, COVERAGE).unwrap();
        covered += (lo <= y && y <= hi) as usize;
    }
    let coverage = covered as f64 / DRAWS as f64;

    let cases = [(100, 3.5, true), (4, 1.0, false)];
    let chauvenet_ok = cases.iter().all(|&(n, z, want)| {
        let oracle = n as f64 * erfc_oracle(z / std::f64::consts::SQRT_2) < 0.5;
        chauvenet_z(n, z) == want && oracle == want
    });
    let model_ok = RegressionModel::from_json(&big.to_json().unwrap()).is_ok();
    check(
        slope_err <= SLOPE_TOL && (coverage - COVERAGE).abs() <= COVERAGE_TOL && chauvenet_ok && model_ok,
        format!(
            "slope error {slope_err:.4} (<= {SLOPE_TOL}), coverage {coverage:.4} ({COVERAGE} ± {COVERAGE_TOL}), \
             Chauvenet hand cases agree with erfc oracle: {chauvenet_ok}"
        ),
    )
}

// ---------------------------------------------------------------- 11, 12

fn write_phantom(dir: &Path, cp: &ChestParams) -> (PathBuf, PathBuf) {
    let p = generate(&PhantomSpec::chest(cp).unwrap()).unwrap();
    fs::create_dir_all(dir).unwrap();
    let ct = dir.join("ct.nii.gz");
    let lung = dir.join("lung_mask.nii.gz");
    save_volume(&p.ct, &ct, ScalarType::I16).unwrap();
    save_mask(&p.lung, &lung).unwrap();
    (ct, lung)
}

fn bronco(args: &[&str], threads: Option<usize>) -> (i32, String) {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    if let Some(n) = threads {
        cmd.env("BRONCO_THREADS", n.to_string());
    }
    let out = cmd.output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn run_args<'a>(ct: &'a str, lung: &'a str, out: &'a str) -> Vec<&'a str> {
    vec!["run", "--input", ct, "--lung-mask", lung, "--out", out]
}

fn criterion_11(root: &Path) -> Outcome {
    const TRAINING: u64 = 8;
    const MIN_BLOB_SIGMAS: f64 = 3.0;
    let mut train_dirs = Vec::new();
    let handles: Vec<_> = (0..TRAINING)
        .map(|i| {
            let dir = root.join(format!("train{i}"));
            train_dirs.push(dir.join("out"));
            std::thread::spawn(move || {
                let cp = ChestParams {
                    scale: 0.8 + 0.2 * i as f64 / (TRAINING - 1) as f64,
                    seed: 100 + i,
                    ..Default::default()
                };
                let (ct, lung) = write_phantom(&dir, &cp);
                let out = dir.join("out");
                let args = run_args(ct.to_str().unwrap(), lung.to_str().unwrap(), out.to_str().unwrap());
                let mut args = args.clone();
                args.extend(["--stages", "lung..volumes"]);
                bronco(&args, Some(1))
            })
        })
        .collect();
    for h in handles {
        let (code, err) = h.join().unwrap();
        if code != 0 {
            return Err(format!("training run exited {code}: {err}"));
        }
    }
    let model = root.join("model.json");
    let mut args = vec![
        "fit-regression".to_string(),
        "--out".into(),
        model.to_str().unwrap().into(),
    ];
    args.extend(train_dirs.iter().map(|d| d.to_str().unwrap().to_string()));
    let (code, err) = bronco(&args.iter().map(String::as_str).collect::<Vec<_>>(), None);
    if code != 0 {
        return Err(format!("fit-regression exited {code}: {err}"));
    }
    let m = RegressionModel::from_json(&fs::read_to_string(&model).unwrap()).unwrap();

    let mut results = Vec::new();
    for (name, blob) in [("clean", false), ("blob", true)] {
        let dir = root.join(name);
        let (ct, lung) = write_phantom(
            &dir,
            &ChestParams {
                scale: 0.9,
                seed: 7,
                blob,
                ..Default::default()
            },
        );
        let out = dir.join("out");
        let mut args = run_args(ct.to_str().unwrap(), lung.to_str().unwrap(), out.to_str().unwrap());
        args.extend(["--regression", model.to_str().unwrap()]);
        let (code, stderr) = bronco(&args, None);
        let qa: serde_json::Value = fs::read_to_string(out.join("qa.json"))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        let v: Volumes = serde_json::from_str(&fs::read_to_string(out.join("volumes.json")).unwrap()).unwrap();
        let sigmas = (v.bundle_ml - m.predict(v.lung_ml)) / m.residual_std;
        results.push((
            code,
            qa["verdict"].as_str().unwrap_or("none").to_string(),
            sigmas,
            stderr,
        ));
    }
    let (clean, blob) = (&results[0], &results[1]);
    check(
        clean.0 == 0
            && clean.1 == "ok"
            && blob.0 == 2
            && blob.1 == "suspected_oversegmentation"
            && blob.2 >= MIN_BLOB_SIGMAS
            && blob.3.contains("suspected_oversegmentation"),
        format!(
            "regression n={TRAINING}, residual std {:.3} ml; clean: exit {} {} ({:+.2} σ); blob: exit {} {} ({:+.2} σ, needs >= {MIN_BLOB_SIGMAS})",
            m.residual_std, clean.0, clean.1, clean.2, blob.0, blob.1, blob.2
        ),
    )
}

/// Files of `dir` except the ones allowed to differ.
fn artifact_bytes(dir: &Path, skip: &[&str]) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .filter(|(n, _)| !skip.contains(&n.as_str()))
        .map(|(n, p)| (n, fs::read(p).unwrap()))
        .collect()
}

fn criterion_12(root: &Path) -> Outcome {
    const RUNTIME_S: f64 = 60.0;
    let (ct, lung) = write_phantom(&root.join("input"), &ChestParams::default());
    let (ct, lung) = (ct.to_str().unwrap(), lung.to_str().unwrap());
    let outs: Vec<PathBuf> = ["a", "b", "staged"].iter().map(|n| root.join(n)).collect();
    let s: Vec<&str> = outs.iter().map(|p| p.to_str().unwrap()).collect();

    let t0 = Instant::now();
    let (c1, e1) = bronco(
        &[&run_args(ct, lung, s[0])[..], &["--binary", "--labeled"]].concat(),
        Some(1),
    );
    let secs = t0.elapsed().as_secs_f64();
    let (c2, e2) = bronco(
        &[&run_args(ct, lung, s[1])[..], &["--binary", "--labeled"]].concat(),
        None,
    );
    let (c3, e3) = bronco(
        &[&run_args(ct, lung, s[2])[..], &["--stages", "lung..gmm"]].concat(),
        None,
    );
    let (c4, e4) = bronco(
        &[
            &run_args(ct, lung, s[2])[..],
            &["--stages", "bundle..qa", "--binary", "--labeled"],
        ]
        .concat(),
        None,
    );
    if [c1, c2, c3, c4].iter().any(|&c| c != 0) {
        return Err(format!("runs exited {c1} {c2} {c3} {c4}: {e1}{e2}{e3}{e4}"));
    }
    let a = artifact_bytes(&outs[0], &["timings.json"]);
    let b = artifact_bytes(&outs[1], &["timings.json"]);
    let staged = artifact_bytes(&outs[2], &["timings.json", "report.json"]);
    let mut single = a.clone();
    single.remove("report.json");
    let repeat_ok = a == b;
    let staged_ok = staged == single;
    check(
        repeat_ok && staged_ok && secs < RUNTIME_S,
        format!(
            "repeat run identical over {} files: {repeat_ok}; staged lung..gmm + bundle..qa identical: {staged_ok}; \
             128³ single-threaded run {secs:.1} s (< {RUNTIME_S} s)",
            a.len()
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let trees = tree_cases();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("morphology and components match oracles", Box::new(criterion_1)),
        ("GMM recovers a three-class mixture", Box::new(criterion_2)),
        ("skeleton stays on the centerline", Box::new(|| criterion_3(&trees))),
        ("graph topology and edge lengths", Box::new(|| criterion_4(&trees))),
        ("base-plane selection", Box::new(criterion_5)),
        ("label growing", Box::new(criterion_6)),
        ("fast marching accuracy", Box::new(criterion_7)),
        ("leak repair", Box::new(criterion_8)),
        ("bronchi end to end", Box::new(criterion_9)),
        ("regression and Chauvenet", Box::new(criterion_10)),
        (
            "QA warning exit codes",
            Box::new(|| criterion_11(&tmp.path().join("qa"))),
        ),
        (
            "determinism and resumability",
            Box::new(|| criterion_12(&tmp.path().join("det"))),
        ),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let r = f();
        let secs = t0.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d} [{secs:.1} s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {d} [{secs:.1} s]", i + 1)
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
