//! Conversion of a thin skeleton into a node/edge graph.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{BroncoError, Result};
use crate::grid::{neighbor_offsets_26, Geometry};

use super::thinning::Skeleton;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonNode {
    pub id: usize,
    /// Mean of the member voxel coordinates (voxel units).
    pub center: [f64; 3],
    pub center_mm: [f64; 3],
    pub voxels: Vec<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonEdge {
    pub branch_id: usize,
    /// Lower node id.
    pub node_a: usize,
    pub node_b: usize,
    /// Edge voxels ordered from `node_a` to `node_b`, node voxels excluded.
    pub path: Vec<[usize; 3]>,
    /// Node voxels the path attaches to, at the `node_a` and `node_b` ends.
    pub attach: [[usize; 3]; 2],
    /// Spacing-weighted length from `attach[0]` through `path` to `attach[1]`.
    pub length_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    pub geometry: Geometry,
    pub nodes: Vec<SkeletonNode>,
    pub edges: Vec<SkeletonEdge>,
}

impl SkeletonGraph {
    pub fn degree(&self, node: usize) -> usize {
        self.edges
            .iter()
            .map(|e| (e.node_a == node) as usize + (e.node_b == node) as usize)
            .sum()
    }

    /// Branch ids of the edges touching `node`, ascending.
    pub fn incident_edges(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.node_a == node || e.node_b == node)
            .map(|e| e.branch_id)
            .collect()
    }

    /// Neighboring node ids of `node`, ascending and deduplicated.
    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|e| {
                if e.node_a == node {
                    Some(e.node_b)
                } else if e.node_b == node {
                    Some(e.node_a)
                } else {
                    None
                }
            })
            .filter(|&n| n != node)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Number of skeleton voxels covered by nodes and edge paths.
    pub fn voxel_count(&self) -> usize {
        self.nodes.iter().map(|n| n.voxels.len()).sum::<usize>()
            + self.edges.iter().map(|e| e.path.len()).sum::<usize>()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// GraphML with node centers and edge lengths; voxel paths are omitted.
    pub fn to_graphml(&self) -> String {
        let mut s = String::new();
        s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        s.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n");
        for (id, target, name, ty) in [
            ("d0", "node", "x", "double"),
            ("d1", "node", "y", "double"),
            ("d2", "node", "z", "double"),
            ("d3", "node", "voxels", "int"),
            ("d4", "edge", "branch_id", "int"),
            ("d5", "edge", "length_mm", "double"),
            ("d6", "edge", "path_voxels", "int"),
        ] {
            let _ = writeln!(
                s,
                "  <key id=\"{id}\" for=\"{target}\" attr.name=\"{name}\" attr.type=\"{ty}\"/>"
            );
        }
        s.push_str("  <graph id=\"skeleton\" edgedefault=\"undirected\">\n");
        for n in &self.nodes {
            let _ = writeln!(s, "    <node id=\"n{}\">", n.id);
            for (k, v) in ["d0", "d1", "d2"].iter().zip(n.center_mm) {
                let _ = writeln!(s, "      <data key=\"{k}\">{v}</data>");
            }
            let _ = writeln!(s, "      <data key=\"d3\">{}</data>", n.voxels.len());
            s.push_str("    </node>\n");
        }
        for e in &self.edges {
            let _ = writeln!(
                s,
                "    <edge id=\"e{}\" source=\"n{}\" target=\"n{}\">",
                e.branch_id, e.node_a, e.node_b
            );
            let _ = writeln!(s, "      <data key=\"d4\">{}</data>", e.branch_id);
            let _ = writeln!(s, "      <data key=\"d5\">{}</data>", e.length_mm);
            let _ = writeln!(s, "      <data key=\"d6\">{}</data>", e.path.len());
            s.push_str("    </edge>\n");
        }
        s.push_str("  </graph>\n</graphml>\n");
        s
    }
}

struct Raw {
    a: usize,
    b: usize,
    attach_a: usize,
    attach_b: usize,
    path: Vec<usize>,
}

/// Build the skeleton graph.
///
/// Voxels with a neighbor count other than two are node voxels; 26-adjacent
/// node voxels form one node. Chains of two-neighbor voxels become edge
/// paths. A closed ring without node voxels gets a node at its first voxel
/// in scan order. Node ids follow the scan order of each node's first voxel;
/// branch ids follow `(node_a, node_b, first path voxel)`.
pub fn build_graph(skel: &Skeleton) -> SkeletonGraph {
    let g = *skel.mask.geometry();
    let data = skel.mask.data();
    let offs = neighbor_offsets_26();
    let neighbors = |i: usize| -> Vec<usize> {
        offs.iter()
            .filter_map(|&d| g.offset(i, d))
            .filter(|&j| data[j])
            .collect()
    };

    let voxels: Vec<usize> = skel.mask.indices();
    let mut degree = vec![0u8; g.len()];
    for &i in &voxels {
        degree[i] = neighbors(i).len() as u8;
    }

    // Node clusters, labelled in scan order of their first voxel.
    const NONE: usize = usize::MAX;
    let mut node_of = vec![NONE; g.len()];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let is_node_voxel = |i: usize, node_of: &[usize]| data[i] && (degree[i] != 2 || node_of[i] != NONE);
    for &i in &voxels {
        if degree[i] == 2 || node_of[i] != NONE {
            continue;
        }
        let id = clusters.len();
        let mut members = vec![i];
        node_of[i] = id;
        let mut k = 0;
        while k < members.len() {
            for j in neighbors(members[k]) {
                if degree[j] != 2 && node_of[j] == NONE {
                    node_of[j] = id;
                    members.push(j);
                }
            }
            k += 1;
        }
        members.sort_unstable();
        clusters.push(members);
    }

    let mut visited = vec![false; g.len()];
    let mut raws: Vec<Raw> = Vec::new();
    let trace = |start_node_voxel: usize, first: usize, visited: &mut Vec<bool>, node_of: &Vec<usize>| -> Raw {
        let mut path = vec![first];
        visited[first] = true;
        let mut prev = start_node_voxel;
        let mut cur = first;
        loop {
            let next = match neighbors(cur).into_iter().find(|&j| j != prev) {
                Some(n) => n,
                None => {
                    // Both neighbors are the same voxel only in degenerate rings.
                    return Raw {
                        a: node_of[start_node_voxel],
                        b: node_of[start_node_voxel],
                        attach_a: start_node_voxel,
                        attach_b: start_node_voxel,
                        path,
                    };
                }
            };
            if is_node_voxel(next, node_of) {
                return Raw {
                    a: node_of[start_node_voxel],
                    b: node_of[next],
                    attach_a: start_node_voxel,
                    attach_b: next,
                    path,
                };
            }
            if visited[next] {
                // Closed back onto this path (ring without a node).
                return Raw {
                    a: node_of[start_node_voxel],
                    b: node_of[start_node_voxel],
                    attach_a: start_node_voxel,
                    attach_b: start_node_voxel,
                    path,
                };
            }
            visited[next] = true;
            path.push(next);
            prev = cur;
            cur = next;
        }
    };

    for cid in 0..clusters.len() {
        for m in clusters[cid].clone() {
            for j in neighbors(m) {
                if degree[j] == 2 && node_of[j] == NONE && !visited[j] {
                    // A two-neighbor voxel touching the same node on both
                    // sides belongs to that node.
                    let nbs = neighbors(j);
                    if nbs.iter().all(|&k| node_of[k] == cid) {
                        node_of[j] = cid;
                        clusters[cid].push(j);
                        continue;
                    }
                    raws.push(trace(m, j, &mut visited, &node_of));
                }
            }
        }
    }

    // Rings without node voxels.
    for &i in &voxels {
        if degree[i] == 2 && node_of[i] == NONE && !visited[i] {
            let id = clusters.len();
            clusters.push(vec![i]);
            node_of[i] = id;
            visited[i] = true;
            if let Some(first) = neighbors(i).into_iter().find(|&j| !visited[j]) {
                let mut r = trace(i, first, &mut visited, &node_of);
                r.b = id;
                r.attach_b = i;
                raws.push(r);
            }
        }
    }

    // Short self-loops hugging their node are junction artifacts.
    raws.retain(|r| {
        if r.a != r.b {
            return true;
        }
        let cid = r.a;
        let hugging = r
            .path
            .iter()
            .all(|&p| neighbors(p).iter().any(|&k| node_of[k] == cid && !r.path.contains(&k)));
        if hugging {
            for &p in &r.path {
                node_of[p] = cid;
                clusters[cid].push(p);
            }
            false
        } else {
            true
        }
    });

    // Renumber nodes by first voxel.
    for c in &mut clusters {
        c.sort_unstable();
    }
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by_key(|&c| clusters[c][0]);
    let mut new_id = vec![0; clusters.len()];
    for (nid, &c) in order.iter().enumerate() {
        new_id[c] = nid;
    }
    let nodes: Vec<SkeletonNode> = order
        .iter()
        .enumerate()
        .map(|(nid, &c)| {
            let coords: Vec<[usize; 3]> = clusters[c].iter().map(|&i| g.coords(i)).collect();
            let mut center = [0.0; 3];
            for p in &coords {
                for k in 0..3 {
                    center[k] += p[k] as f64;
                }
            }
            for v in &mut center {
                *v /= coords.len() as f64;
            }
            SkeletonNode {
                id: nid,
                center,
                center_mm: g.to_mm(center),
                voxels: coords,
            }
        })
        .collect();

    let mut keyed: Vec<((usize, usize, usize), Raw)> = raws
        .into_iter()
        .map(|mut r| {
            r.a = new_id[r.a];
            r.b = new_id[r.b];
            let flip = r.a > r.b || (r.a == r.b && r.path.first() > r.path.last());
            if flip {
                std::mem::swap(&mut r.a, &mut r.b);
                std::mem::swap(&mut r.attach_a, &mut r.attach_b);
                r.path.reverse();
            }
            ((r.a, r.b, r.path[0]), r)
        })
        .collect();
    keyed.sort_by_key(|(k, _)| *k);
    let edges = keyed
        .into_iter()
        .enumerate()
        .map(|(bid, (_, r))| {
            let mut chain = Vec::with_capacity(r.path.len() + 2);
            chain.push(r.attach_a);
            chain.extend_from_slice(&r.path);
            chain.push(r.attach_b);
            let length_mm = chain.windows(2).map(|w| g.distance_mm(w[0], w[1])).sum();
            SkeletonEdge {
                branch_id: bid,
                node_a: r.a,
                node_b: r.b,
                path: r.path.iter().map(|&i| g.coords(i)).collect(),
                attach: [g.coords(r.attach_a), g.coords(r.attach_b)],
                length_mm,
            }
        })
        .collect();
    SkeletonGraph {
        geometry: g,
        nodes,
        edges,
    }
}

/// Node degree histogram, keyed by degree.
pub fn degree_histogram(graph: &SkeletonGraph) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for n in &graph.nodes {
        *h.entry(graph.degree(n.id)).or_insert(0) += 1;
    }
    h
}

/// Fail unless every graph voxel is covered exactly once.
pub fn check_coverage(graph: &SkeletonGraph, skel: &Skeleton) -> Result<()> {
    let g = graph.geometry;
    let mut seen = vec![false; g.len()];
    let all = graph
        .nodes
        .iter()
        .flat_map(|n| n.voxels.iter())
        .chain(graph.edges.iter().flat_map(|e| e.path.iter()));
    for p in all {
        let i = g.index(p[0], p[1], p[2]);
        if seen[i] || !skel.mask.data()[i] {
            return Err(BroncoError::Degenerate(format!(
                "graph voxel {p:?} duplicated or off-skeleton"
            )));
        }
        seen[i] = true;
    }
    if seen.iter().filter(|&&s| s).count() != skel.mask.count() {
        return Err(BroncoError::Degenerate("graph does not cover the skeleton".into()));
    }
    Ok(())
}
