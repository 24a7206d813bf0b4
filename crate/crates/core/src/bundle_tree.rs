//! Branch directions, direction-aware label growing and the branch hierarchy.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BroncoError, Result};
use crate::grid::{neighbor_offsets_26, BinaryMask, LabelMap};
use crate::skeleton::SkeletonGraph;

/// Label of bundle voxels that no branch reached. Fits in a uint16 export.
pub const UNREACHED_LABEL: u32 = u16::MAX as u32;

/// Map label of a branch.
pub fn branch_label(branch_id: usize) -> u32 {
    branch_id as u32 + 1
}

/// Inverse of [`branch_label`]; `None` for background and unreached voxels.
pub fn label_branch(label: u32) -> Option<usize> {
    match label {
        0 | UNREACHED_LABEL => None,
        l => Some(l as usize - 1),
    }
}

/// Plane normals of the volume axes. Axial is z, sagittal x, coronal y.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseAxis {
    Axial,
    Sagittal,
    Coronal,
}

impl BaseAxis {
    /// Tie-break priority order.
    pub const ALL: [BaseAxis; 3] = [BaseAxis::Axial, BaseAxis::Sagittal, BaseAxis::Coronal];

    pub fn normal(self) -> [f64; 3] {
        match self {
            BaseAxis::Axial => [0.0, 0.0, 1.0],
            BaseAxis::Sagittal => [1.0, 0.0, 0.0],
            BaseAxis::Coronal => [0.0, 1.0, 0.0],
        }
    }

    pub fn axis_index(self) -> usize {
        match self {
            BaseAxis::Sagittal => 0,
            BaseAxis::Coronal => 1,
            BaseAxis::Axial => 2,
        }
    }

    /// The 8 neighbor offsets of the plane orthogonal to this normal.
    pub fn growth_offsets(self) -> Vec<[i64; 3]> {
        let n = self.axis_index();
        neighbor_offsets_26().into_iter().filter(|d| d[n] == 0).collect()
    }
}

/// Normal most aligned with `u` by `|u·N|`; ties go axial, sagittal, coronal.
pub fn select_axis(u: [f64; 3]) -> BaseAxis {
    let mut best = BaseAxis::Axial;
    let mut best_cos = f64::NEG_INFINITY;
    for axis in BaseAxis::ALL {
        let c = dot(u, axis.normal()).abs();
        if c > best_cos {
            best_cos = c;
            best = axis;
        }
    }
    best
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchDirection {
    pub branch_id: usize,
    pub unit_vector: [f64; 3],
    pub principal: BaseAxis,
    pub growth_dirs: Vec<[i64; 3]>,
}

/// Direction of a branch running from `start` to `end` (mm).
pub fn main_direction(branch_id: usize, start: [f64; 3], end: [f64; 3]) -> Result<BranchDirection> {
    let d = [end[0] - start[0], end[1] - start[1], end[2] - start[2]];
    let norm = dot(d, d).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(BroncoError::ZeroLengthBranch);
    }
    let u = [d[0] / norm, d[1] / norm, d[2] / norm];
    let principal = select_axis(u);
    Ok(BranchDirection {
        branch_id,
        unit_vector: u,
        principal,
        growth_dirs: principal.growth_offsets(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Directions {
    /// One entry per surviving branch, ascending branch id.
    pub directions: Vec<BranchDirection>,
    /// Collapsed zero-length branch → branch that absorbed it.
    pub merged: BTreeMap<usize, usize>,
}

impl Directions {
    pub fn get(&self, branch_id: usize) -> Option<&BranchDirection> {
        self.directions
            .binary_search_by_key(&branch_id, |d| d.branch_id)
            .ok()
            .map(|i| &self.directions[i])
    }

    /// Branch whose label `branch_id`'s voxels carry.
    pub fn resolve(&self, branch_id: usize) -> usize {
        let mut b = branch_id;
        while let Some(&t) = self.merged.get(&b) {
            b = t;
        }
        b
    }
}

/// Directions for every edge of the graph.
///
/// Branches whose two node centers coincide are merged into the incident
/// branch with the longest path. A zero-length branch with no incident
/// branch to merge into keeps its own label, directed from its first attach
/// voxel to its farthest path voxel (axial if the path is a single point).
pub fn compute_directions(graph: &SkeletonGraph) -> Result<Directions> {
    let mut out = Directions::default();
    let center = |n: usize| graph.nodes[n].center_mm;
    let mut zero_length = Vec::new();
    for e in &graph.edges {
        match main_direction(e.branch_id, center(e.node_a), center(e.node_b)) {
            Ok(d) => out.directions.push(d),
            Err(BroncoError::ZeroLengthBranch) => zero_length.push(e.branch_id),
            Err(err) => return Err(err),
        }
    }
    for &b in &zero_length {
        let e = &graph.edges[b];
        let target = graph
            .edges
            .iter()
            .filter(|o| o.branch_id != b && !zero_length.contains(&o.branch_id))
            .filter(|o| [o.node_a, o.node_b].iter().any(|n| *n == e.node_a || *n == e.node_b))
            // Longest path first, then lowest id.
            .min_by_key(|o| (std::cmp::Reverse(o.path.len()), o.branch_id));
        match target {
            Some(t) => {
                out.merged.insert(b, t.branch_id);
            }
            None => {
                let g = &graph.geometry;
                let to_mm = |v: [usize; 3]| g.to_mm([v[0] as f64, v[1] as f64, v[2] as f64]);
                let start = to_mm(e.attach[0]);
                let far = e
                    .path
                    .iter()
                    .chain(&[e.attach[1]])
                    .map(|&v| to_mm(v))
                    .max_by(|p, q| {
                        let dp = dist2(*p, start);
                        let dq = dist2(*q, start);
                        dp.partial_cmp(&dq).unwrap()
                    })
                    .unwrap_or(start);
                let d = main_direction(b, start, far).unwrap_or_else(|_| BranchDirection {
                    branch_id: b,
                    unit_vector: [0.0, 0.0, 1.0],
                    principal: BaseAxis::Axial,
                    growth_dirs: BaseAxis::Axial.growth_offsets(),
                });
                out.directions.push(d);
            }
        }
    }
    out.directions.sort_by_key(|d| d.branch_id);
    Ok(out)
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrowParams {
    /// After directional growth stalls, keep growing every label through
    /// the 26-neighborhood so voxels outside all growth planes (caps,
    /// junction blobs) still get a branch. Without it they stay unreached.
    pub isotropic_fill: bool,
}

impl Default for GrowParams {
    fn default() -> Self {
        GrowParams { isotropic_fill: true }
    }
}

#[derive(Clone, Debug)]
pub struct Growth {
    pub labels: LabelMap,
    pub directional_iterations: usize,
    pub isotropic_iterations: usize,
    pub unreached: usize,
}

/// Grow branch labels from the skeleton paths through the bundle mask.
///
/// Each iteration every label expands by its own growth offsets into
/// unlabeled bundle voxels; a voxel claimed by several labels in the same
/// iteration goes to the smallest branch id.
pub fn grow_labels(
    graph: &SkeletonGraph,
    directions: &Directions,
    bundle: &BinaryMask,
    params: &GrowParams,
) -> Result<Growth> {
    let g = *bundle.geometry();
    g.require_same(&graph.geometry, "skeleton graph")?;
    if graph.edges.len() >= UNREACHED_LABEL as usize {
        return Err(BroncoError::param(format!(
            "{} branches do not fit the uint16 label range",
            graph.edges.len()
        )));
    }
    let mut labels = LabelMap::filled(g, 0);
    let bundle_data = bundle.data();

    let seed = |labels: &mut LabelMap, v: [usize; 3], label: u32| {
        let i = g.index(v[0], v[1], v[2]);
        if bundle_data[i] {
            let slot = &mut labels.data_mut()[i];
            if *slot == 0 || label < *slot {
                *slot = label;
            }
        }
    };
    for e in &graph.edges {
        let owner = directions.resolve(e.branch_id);
        if directions.get(owner).is_none() {
            return Err(BroncoError::param(format!("branch {} has no direction", e.branch_id)));
        }
        let label = branch_label(owner);
        if e.path.is_empty() {
            for v in e.attach {
                seed(&mut labels, v, label);
            }
        } else {
            for &v in &e.path {
                seed(&mut labels, v, label);
            }
        }
    }

    let offsets_of: BTreeMap<u32, Vec<isize>> = directions
        .directions
        .iter()
        .map(|d| {
            (
                branch_label(d.branch_id),
                d.growth_dirs.iter().map(|&o| flat(&g, o)).collect(),
            )
        })
        .collect();
    let frontier: Vec<usize> = (0..g.len()).filter(|&i| labels.data()[i] != 0).collect();
    let budget = bundle.count();

    let directional_iterations = grow(&mut labels, bundle_data, frontier, budget, |l| &offsets_of[&l])?;

    let mut isotropic_iterations = 0;
    if params.isotropic_fill {
        let all: Vec<isize> = neighbor_offsets_26().into_iter().map(|o| flat(&g, o)).collect();
        let frontier: Vec<usize> = (0..g.len()).filter(|&i| labels.data()[i] != 0).collect();
        isotropic_iterations = grow(&mut labels, bundle_data, frontier, budget, |_| &all)?;
    }

    let mut unreached = 0;
    for (l, &b) in labels.data_mut().iter_mut().zip(bundle_data) {
        if b && *l == 0 {
            *l = UNREACHED_LABEL;
            unreached += 1;
        }
    }
    Ok(Growth {
        labels,
        directional_iterations,
        isotropic_iterations,
        unreached,
    })
}

fn flat(g: &crate::grid::Geometry, o: [i64; 3]) -> isize {
    let [nx, ny, _] = g.dims;
    o[0] as isize + nx as isize * (o[1] as isize + ny as isize * o[2] as isize)
}

/// Frontier growth with propose/commit; returns the number of iterations
/// that labeled at least one voxel.
fn grow<'a>(
    labels: &mut LabelMap,
    bundle: &[bool],
    mut frontier: Vec<usize>,
    budget: usize,
    offsets: impl Fn(u32) -> &'a Vec<isize> + Sync,
) -> Result<usize> {
    let g = *labels.geometry();
    let [nx, ny, nz] = g.dims;
    let mut iterations = 0;
    while !frontier.is_empty() {
        let current = labels.data();
        let mut proposals: Vec<(usize, u32)> = frontier
            .par_chunks(4096)
            .flat_map_iter(|chunk| {
                let mut local = Vec::new();
                for &i in chunk {
                    let l = current[i];
                    let [x, y, z] = g.coords(i);
                    for &d in offsets(l) {
                        let j = i as isize + d;
                        if j < 0 || j as usize >= current.len() {
                            continue;
                        }
                        let j = j as usize;
                        // Reject offsets that wrapped around a face.
                        let [jx, jy, jz] = g.coords(j);
                        if jx.abs_diff(x) > 1 || jy.abs_diff(y) > 1 || jz.abs_diff(z) > 1 {
                            continue;
                        }
                        debug_assert!(jx < nx && jy < ny && jz < nz);
                        if bundle[j] && current[j] == 0 {
                            local.push((j, l));
                        }
                    }
                }
                local
            })
            .collect();
        if proposals.is_empty() {
            break;
        }
        proposals.sort_unstable();
        proposals.dedup_by_key(|p| p.0);
        let data = labels.data_mut();
        frontier = proposals
            .into_iter()
            .map(|(j, l)| {
                data[j] = l;
                j
            })
            .collect();
        iterations += 1;
        if iterations > budget {
            return Err(BroncoError::Degenerate("label growing did not terminate".into()));
        }
    }
    Ok(iterations)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub branch_id: usize,
    pub parent_id: Option<usize>,
    /// Node the traversal entered the branch from.
    pub start_node: usize,
    pub end_node: usize,
    pub direction: BaseAxis,
    pub voxel_count: usize,
    pub length_mm: f64,
    /// Edge closing a cycle; it keeps a parent but is not a spanning-tree edge.
    pub cross_link: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    /// Root node of every graph component, nearest to the trachea first.
    pub root_nodes: Vec<usize>,
    /// Ascending branch id; merged zero-length branches are absent.
    pub branches: Vec<BranchRecord>,
    pub merged: BTreeMap<usize, usize>,
    pub unreached_label: u32,
    pub unreached_voxels: usize,
}

impl Hierarchy {
    pub fn get(&self, branch_id: usize) -> Option<&BranchRecord> {
        self.branches
            .binary_search_by_key(&branch_id, |b| b.branch_id)
            .ok()
            .map(|i| &self.branches[i])
    }

    pub fn children(&self, branch_id: usize) -> Vec<usize> {
        self.branches
            .iter()
            .filter(|b| b.parent_id == Some(branch_id))
            .map(|b| b.branch_id)
            .collect()
    }

    /// Branches without a parent.
    pub fn root_branches(&self) -> Vec<usize> {
        self.branches
            .iter()
            .filter(|b| b.parent_id.is_none())
            .map(|b| b.branch_id)
            .collect()
    }

    /// Labels the labeled map may contain: branch labels plus unreached.
    pub fn label_set(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.branches.iter().map(|b| branch_label(b.branch_id)).collect();
        out.push(self.unreached_label);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug)]
pub struct BundleTree {
    pub labels: LabelMap,
    pub hierarchy: Hierarchy,
}

/// Point the hierarchy is rooted at: the centroid of the trachea's most
/// inferior slice. With `flip_axial` false, z grows towards the head, so
/// inferior is the lowest z. An empty trachea falls back to the center of
/// the most superior slice of the volume.
pub fn trachea_anchor(trachea: &BinaryMask, flip_axial: bool) -> [f64; 3] {
    let g = trachea.geometry();
    let [nx, ny, nz] = g.dims;
    let slice = (0..nz).filter(|&z| (0..nx * ny).any(|i| trachea.data()[z * nx * ny + i]));
    let slice = if flip_axial { slice.max() } else { slice.min() };
    match slice {
        Some(z) => {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for y in 0..ny {
                for x in 0..nx {
                    if *trachea.get(x, y, z) {
                        sx += x as f64;
                        sy += y as f64;
                        n += 1.0;
                    }
                }
            }
            g.to_mm([sx / n, sy / n, z as f64])
        }
        None => {
            let z = if flip_axial { 0 } else { nz - 1 };
            g.to_mm([(nx - 1) as f64 / 2.0, (ny - 1) as f64 / 2.0, z as f64])
        }
    }
}

/// Breadth-first branch hierarchy rooted near the trachea.
///
/// The parent of a branch is the branch through which the traversal first
/// reached the node the branch starts from. Neighbors are visited by
/// ascending branch id.
pub fn build_hierarchy(
    graph: &SkeletonGraph,
    directions: &Directions,
    labels: &LabelMap,
    trachea: &BinaryMask,
    flip_axial: bool,
) -> Result<BundleTree> {
    if graph.nodes.is_empty() {
        return Err(BroncoError::param("cannot build a hierarchy from an empty graph"));
    }
    labels.geometry().require_same(&graph.geometry, "skeleton graph")?;
    trachea.geometry().require_same(&graph.geometry, "skeleton graph")?;
    let anchor = trachea_anchor(trachea, flip_axial);

    let mut voxel_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut unreached_voxels = 0;
    for &l in labels.data() {
        if l == UNREACHED_LABEL {
            unreached_voxels += 1;
        } else if let Some(b) = label_branch(l) {
            *voxel_counts.entry(b).or_default() += 1;
        }
    }

    // Contract merged branches so their nodes share one traversal vertex.
    let live: Vec<usize> = graph
        .edges
        .iter()
        .map(|e| e.branch_id)
        .filter(|b| !directions.merged.contains_key(b))
        .collect();
    let n = graph.nodes.len();
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &b in &live {
        let e = &graph.edges[b];
        incident[e.node_a].push(b);
        if e.node_b != e.node_a {
            incident[e.node_b].push(b);
        }
    }

    // Components of the node graph, by live edges and merged edges alike.
    let mut comp = vec![usize::MAX; n];
    let mut ncomp = 0;
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        let mut q = VecDeque::from([s]);
        comp[s] = ncomp;
        while let Some(u) = q.pop_front() {
            for e in graph.edges.iter().filter(|e| e.node_a == u || e.node_b == u) {
                for w in [e.node_a, e.node_b] {
                    if comp[w] == usize::MAX {
                        comp[w] = ncomp;
                        q.push_back(w);
                    }
                }
            }
        }
        ncomp += 1;
    }
    let mut roots: Vec<Option<usize>> = vec![None; ncomp];
    let d = |u: usize| dist2(graph.nodes[u].center_mm, anchor);
    for u in 0..n {
        let c = comp[u];
        match roots[c] {
            Some(r) if d(r) <= d(u) => {}
            _ => roots[c] = Some(u),
        }
    }
    let mut root_nodes: Vec<usize> = roots.into_iter().flatten().collect();
    root_nodes.sort_by(|&a, &b| d(a).partial_cmp(&d(b)).unwrap().then(a.cmp(&b)));

    let mut reached_by: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut records: BTreeMap<usize, BranchRecord> = BTreeMap::new();
    for &r in &root_nodes {
        visited[r] = true;
        let mut q = VecDeque::from([r]);
        while let Some(u) = q.pop_front() {
            // Nodes joined by a merged branch are entered together.
            let mut group = vec![u];
            for (&m, _) in &directions.merged {
                let e = &graph.edges[m];
                for (p, o) in [(e.node_a, e.node_b), (e.node_b, e.node_a)] {
                    if p == u && !visited[o] {
                        visited[o] = true;
                        reached_by[o] = reached_by[u];
                        group.push(o);
                    }
                }
            }
            let mut inc: Vec<(usize, usize)> = group
                .iter()
                .flat_map(|&v| incident[v].iter().map(move |&b| (b, v)))
                .collect();
            inc.sort_unstable();
            inc.dedup_by_key(|p| p.0);
            for (b, v) in inc {
                if records.contains_key(&b) {
                    continue;
                }
                let e = &graph.edges[b];
                let w = if e.node_a == v { e.node_b } else { e.node_a };
                let cross_link = visited[w];
                if !cross_link {
                    visited[w] = true;
                    reached_by[w] = Some(b);
                    q.push_back(w);
                }
                let dir = directions
                    .get(b)
                    .ok_or_else(|| BroncoError::param(format!("branch {b} has no direction")))?;
                records.insert(
                    b,
                    BranchRecord {
                        branch_id: b,
                        parent_id: reached_by[v],
                        start_node: v,
                        end_node: w,
                        direction: dir.principal,
                        voxel_count: voxel_counts.get(&b).copied().unwrap_or(0),
                        length_mm: e.length_mm,
                        cross_link,
                    },
                );
            }
            for v in group.into_iter().skip(1) {
                q.push_back(v);
            }
        }
    }

    Ok(BundleTree {
        labels: labels.clone(),
        hierarchy: Hierarchy {
            root_nodes,
            branches: records.into_values().collect(),
            merged: directions.merged.clone(),
            unreached_label: UNREACHED_LABEL,
            unreached_voxels,
        },
    })
}
