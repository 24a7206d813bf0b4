use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::components::connected_components;
use crate::error::{BroncoError, Result};
use crate::grid::{BinaryMask, Connectivity, LabelMap, ScalarVolume};
use crate::morphology::{dilate, erode, StructuringElement};
use crate::skeleton::{build_graph, skeletonize, SkeletonGraph};

use super::fmm::fast_march;
use super::leak::{repair_leak, LeakRepair, DEFAULT_MAX_EROSIONS};
use super::speed::{block, speed_image, BLOCKED_SPEED};

/// Which GMM classes count as airway candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateClasses {
    /// Every class except the highest-mean one.
    AllButLast,
    /// Only the lowest-mean (air) class.
    AirOnly,
}

/// Edge length a node's stop time is proportional to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReference {
    MaxIncidentEdge,
    MinIncidentEdge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BronchiParams {
    pub candidates: CandidateClasses,
    pub initial_erosion_radius: usize,
    pub stop_reference: StopReference,
    /// Stop time = `stop_factor` times the reference edge length (mm),
    /// divided by the median speed of the candidate region so that it
    /// reads as a distance at typical in-region speed.
    pub stop_factor: f64,
    pub max_erosions: usize,
    /// Ball radius blocked around a removed node's center.
    pub block_radius: usize,
    /// Ball dilation applied to the union of accepted fronts, clipped to the
    /// un-eroded candidate region. Undoes the initial erosion at the walls.
    pub recovery_dilation: usize,
    /// Treat the lowest axial slice as the top of the trachea.
    pub flip_axial: bool,
}

impl Default for BronchiParams {
    fn default() -> Self {
        BronchiParams {
            candidates: CandidateClasses::AllButLast,
            initial_erosion_radius: 1,
            stop_reference: StopReference::MinIncidentEdge,
            stop_factor: 1.0,
            max_erosions: DEFAULT_MAX_EROSIONS,
            block_radius: 1,
            recovery_dilation: 1,
            flip_axial: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeAction {
    Accepted,
    Repaired,
    Removed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeLog {
    pub node_id: usize,
    pub predecessor: Option<usize>,
    pub seed: [usize; 3],
    pub stop_time: f64,
    /// Sprawl of the front that was kept, or of the last attempt if removed.
    pub sprawl: f64,
    pub previous_sprawl: Option<f64>,
    pub action: NodeAction,
    pub erosions: Option<usize>,
}

/// One JSON object per line.
pub fn node_log_jsonl(log: &[NodeLog]) -> Result<String> {
    let mut s = String::new();
    for entry in log {
        let _ = writeln!(s, "{}", serde_json::to_string(entry)?);
    }
    Ok(s)
}

pub fn parse_node_log(s: &str) -> Result<Vec<NodeLog>> {
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Clone, Debug)]
pub struct BronchiResult {
    pub mask: BinaryMask,
    /// Eroded candidate region the fronts were confined to.
    pub initial: BinaryMask,
    /// Graph of the candidate component nearest the trachea.
    pub graph: SkeletonGraph,
    pub start_node: usize,
    pub log: Vec<NodeLog>,
    /// Voxels whose speed was blocked during the walk.
    pub blocked: BinaryMask,
}

fn candidate_region(labels: &LabelMap, lung: &BinaryMask, k: u32, which: CandidateClasses) -> Result<BinaryMask> {
    labels.geometry().require_same(lung.geometry(), "lung")?;
    let keep = |l: u32| match which {
        CandidateClasses::AllButLast => l != k,
        CandidateClasses::AirOnly => l == 1,
    };
    BinaryMask::from_vec(
        *lung.geometry(),
        labels
            .data()
            .iter()
            .zip(lung.data())
            .map(|(&l, &m)| m && keep(l))
            .collect(),
    )
}

/// `(lung ∧ ¬class k)` eroded by a ball.
pub fn initial_bronchi_mask(
    labels: &LabelMap,
    lung: &BinaryMask,
    k: u32,
    params: &BronchiParams,
) -> Result<BinaryMask> {
    let region = candidate_region(labels, lung, k, params.candidates)?;
    let out = if params.initial_erosion_radius == 0 {
        region
    } else {
        erode(&region, &StructuringElement::ball(params.initial_erosion_radius))?
    };
    if out.none() {
        return Err(BroncoError::NoAirwayCandidate);
    }
    Ok(out)
}

/// Top of the trachea: the skeleton node with the highest axial index
/// (lowest with `flip_axial`), in voxel coordinates.
fn trachea_top(trachea: &BinaryMask, flip_axial: bool) -> Result<[f64; 3]> {
    if trachea.none() {
        return Err(BroncoError::BronchiFailed("trachea mask is empty".into()));
    }
    let graph = build_graph(&skeletonize(trachea)?);
    let key = |c: [f64; 3]| if flip_axial { -c[2] } else { c[2] };
    graph
        .nodes
        .iter()
        .map(|n| n.center)
        .max_by(|a, b| key(*a).total_cmp(&key(*b)))
        .ok_or_else(|| BroncoError::BronchiFailed("trachea skeleton has no nodes".into()))
}

fn nearest_index(mask: &BinaryMask, p: [f64; 3]) -> Option<usize> {
    let g = mask.geometry();
    let target = g.to_mm(p);
    let mut best: Option<(f64, usize)> = None;
    for (i, &m) in mask.data().iter().enumerate() {
        if !m {
            continue;
        }
        let c = g.coords(i);
        let q = g.to_mm([c[0] as f64, c[1] as f64, c[2] as f64]);
        let d: f64 = (0..3).map(|a| (q[a] - target[a]).powi(2)).sum();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|b| b.1)
}

fn median_speed(speed: &ScalarVolume, region: &BinaryMask) -> f64 {
    let mut v: Vec<f64> = speed
        .data()
        .iter()
        .zip(region.data())
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .collect();
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Walk the candidate graph from the trachea, growing a front per node and
/// cutting or dropping nodes whose front outgrows their predecessor's.
pub fn model_bronchi(
    ct: &ScalarVolume,
    labels: &LabelMap,
    k: u32,
    lung: &BinaryMask,
    trachea: &BinaryMask,
    params: &BronchiParams,
) -> Result<BronchiResult> {
    let g = *ct.geometry();
    g.require_same(labels.geometry(), "labels")?;
    g.require_same(lung.geometry(), "lung")?;
    g.require_same(trachea.geometry(), "trachea")?;

    let initial = initial_bronchi_mask(labels, lung, k, params)?;
    let top = trachea_top(trachea, params.flip_axial)?;
    let anchor = nearest_index(&initial, top)
        .ok_or_else(|| BroncoError::BronchiFailed("no candidate voxel near the trachea".into()))?;

    // Only the candidate component touching the anchor can be walked.
    let cc = connected_components(&initial, Connectivity::TwentySix);
    let component = cc.mask_of(cc.labels.data()[anchor]);
    let graph = build_graph(&skeletonize(&component)?);
    let start_node = graph
        .nodes
        .iter()
        .min_by(|a, b| {
            let d = |c: [f64; 3]| (0..3).map(|i| (g.to_mm(c)[i] - g.to_mm(top)[i]).powi(2)).sum::<f64>();
            d(a.center).total_cmp(&d(b.center)).then(a.id.cmp(&b.id))
        })
        .map(|n| n.id)
        .ok_or_else(|| BroncoError::BronchiFailed(format!("candidate graph near {top:?} has no nodes")))?;

    let mut speed = speed_image(ct);
    let typical_speed = median_speed(&speed, &initial);
    let mut blocked = BinaryMask::empty(g);
    let mut mask = BinaryMask::empty(g);
    let mut log = Vec::new();
    let mut sprawl_of = vec![None::<f64>; graph.nodes.len()];
    let mut visited = vec![false; graph.nodes.len()];
    let mut queue = VecDeque::from([(start_node, None::<usize>)]);
    visited[start_node] = true;
    let block_ball = StructuringElement::ball(params.block_radius);

    while let Some((u, pred)) = queue.pop_front() {
        let node = &graph.nodes[u];
        let lengths: Vec<f64> = graph
            .incident_edges(u)
            .into_iter()
            .map(|b| graph.edges[b].length_mm)
            .collect();
        let reference = match params.stop_reference {
            StopReference::MaxIncidentEdge => lengths.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            StopReference::MinIncidentEdge => lengths.iter().copied().fold(f64::INFINITY, f64::min),
        };
        let reference = if reference.is_finite() {
            reference
        } else {
            g.spacing.iter().copied().fold(0.0, f64::max)
        };
        let stop_time = params.stop_factor * reference / typical_speed;
        let previous = pred.and_then(|p| sprawl_of[p]);

        // Member voxel nearest the node center that can still seed a front.
        let seed = node
            .voxels
            .iter()
            .map(|v| g.index(v[0], v[1], v[2]))
            .filter(|&i| initial.data()[i] && speed.data()[i] > BLOCKED_SPEED)
            .min_by(|&a, &b| {
                let d = |i: usize| {
                    let c = g.coords(i);
                    (0..3).map(|k| (c[k] as f64 - node.center[k]).powi(2)).sum::<f64>()
                };
                d(a).total_cmp(&d(b)).then(a.cmp(&b))
            });
        let Some(seed) = seed else {
            log.push(NodeLog {
                node_id: u,
                predecessor: pred,
                seed: g.coords(g.index(node.voxels[0][0], node.voxels[0][1], node.voxels[0][2])),
                stop_time,
                sprawl: 0.0,
                previous_sprawl: previous,
                action: NodeAction::Removed,
                erosions: None,
            });
            continue;
        };

        let first = fast_march(&speed, seed, stop_time, Some(&initial))?;
        let mut entry = NodeLog {
            node_id: u,
            predecessor: pred,
            seed: g.coords(seed),
            stop_time,
            sprawl: first.sprawl,
            previous_sprawl: previous,
            action: NodeAction::Accepted,
            erosions: None,
        };
        let kept = match previous {
            Some(prev) if first.sprawl > prev => {
                let repair = repair_leak(&first.segmentation, seed, params.max_erosions)?;
                entry.erosions = Some(repair.erosions());
                let mut retry = None;
                if let LeakRepair::Split { separation, .. } = &repair {
                    block(&mut speed, separation);
                    blocked = blocked.union(separation)?;
                    if speed.data()[seed] > BLOCKED_SPEED {
                        let again = fast_march(&speed, seed, stop_time, Some(&initial))?;
                        entry.sprawl = again.sprawl;
                        if again.sprawl <= prev {
                            retry = Some(again);
                        }
                    }
                }
                match retry {
                    Some(again) => {
                        entry.action = NodeAction::Repaired;
                        Some(again)
                    }
                    None => {
                        entry.action = NodeAction::Removed;
                        let mut center = BinaryMask::empty(g);
                        center.data_mut()[seed] = true;
                        let region = dilate(&center, &block_ball)?;
                        block(&mut speed, &region);
                        blocked = blocked.union(&region)?;
                        None
                    }
                }
            }
            _ => Some(first),
        };
        log.push(entry);
        if let Some(front) = kept {
            sprawl_of[u] = Some(front.sprawl);
            mask = mask.union(&front.segmentation)?;
            for w in graph.neighbors(u) {
                if !visited[w] {
                    visited[w] = true;
                    queue.push_back((w, Some(u)));
                }
            }
        }
    }

    if params.recovery_dilation > 0 && !mask.none() {
        let region = candidate_region(labels, lung, k, params.candidates)?;
        mask = dilate(&mask, &StructuringElement::ball(params.recovery_dilation))?.intersection(&region)?;
    }

    Ok(BronchiResult {
        mask,
        initial,
        graph,
        start_node,
        log,
        blocked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Geometry, Grid};

    #[test]
    fn empty_candidate_region_is_an_error() {
        let g = Geometry::with_dims([6, 6, 6]).unwrap();
        let labels = Grid::filled(g, 3u32);
        let lung = Grid::filled(g, true);
        assert!(matches!(
            initial_bronchi_mask(&labels, &lung, 3, &BronchiParams::default()),
            Err(BroncoError::NoAirwayCandidate)
        ));
    }

    #[test]
    fn uniform_lung_keeps_the_eroded_lung() {
        let g = Geometry::with_dims([9, 9, 9]).unwrap();
        let labels = Grid::filled(g, 2u32);
        let lung = Grid::from_fn(g, |x, y, z| {
            (1..8).contains(&x) && (1..8).contains(&y) && (1..8).contains(&z)
        });
        let m = initial_bronchi_mask(&labels, &lung, 3, &BronchiParams::default()).unwrap();
        let expect = erode(&lung, &StructuringElement::ball(1)).unwrap();
        assert_eq!(m, expect);
    }

    #[test]
    fn node_log_round_trips_as_lines() {
        let log = vec![
            NodeLog {
                node_id: 0,
                predecessor: None,
                seed: [1, 2, 3],
                stop_time: 4.0,
                sprawl: 10.5,
                previous_sprawl: None,
                action: NodeAction::Accepted,
                erosions: None,
            },
            NodeLog {
                node_id: 3,
                predecessor: Some(0),
                seed: [1, 2, 9],
                stop_time: 4.0,
                sprawl: 30.0,
                previous_sprawl: Some(10.5),
                action: NodeAction::Removed,
                erosions: Some(5),
            },
        ];
        let s = node_log_jsonl(&log).unwrap();
        assert_eq!(s.lines().count(), 2);
        assert!(s.contains("\"action\":\"removed\""));
        assert_eq!(parse_node_log(&s).unwrap(), log);
    }
}
