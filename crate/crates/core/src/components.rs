//! Connected component labelling with a union-find over a single raster scan.

use crate::grid::{BinaryMask, Connectivity, Grid, LabelMap};

struct DisjointSet {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra as usize].cmp(&self.rank[rb as usize]) {
            std::cmp::Ordering::Less => self.parent[ra as usize] = rb,
            std::cmp::Ordering::Greater => self.parent[rb as usize] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb as usize] = ra;
                self.rank[ra as usize] += 1;
            }
        }
    }
}

/// Labelled components of a mask.
///
/// Label `l` (1-based) has `sizes[l - 1]` voxels. Labels are ordered by
/// decreasing size; ties go to the component whose first voxel has the
/// smaller linear index.
#[derive(Clone, Debug)]
pub struct Components {
    pub labels: LabelMap,
    pub sizes: Vec<usize>,
    pub first_index: Vec<usize>,
}

impl Components {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn mask_of(&self, label: u32) -> BinaryMask {
        self.labels.mask_of(label)
    }

    /// Mask of all components whose label is in `keep`.
    pub fn mask_of_labels(&self, keep: &[u32]) -> BinaryMask {
        let mut flags = vec![false; self.len() + 1];
        for &l in keep {
            if (l as usize) < flags.len() {
                flags[l as usize] = true;
            }
        }
        self.labels.map(|&l| l != 0 && flags[l as usize])
    }
}

pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Components {
    let g = *mask.geometry();
    let n = g.len();
    let data = mask.data();

    // Neighbors that precede the current voxel in scan order.
    let backward: Vec<[i64; 3]> = connectivity
        .offsets()
        .into_iter()
        .filter(|d| (d[2], d[1], d[0]) < (0, 0, 0))
        .collect();

    let mut ds = DisjointSet::new(n);
    let [nx, ny, nz] = g.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = g.index(x, y, z);
                if !data[i] {
                    continue;
                }
                for d in &backward {
                    let p = [x as i64 + d[0], y as i64 + d[1], z as i64 + d[2]];
                    if let Some(j) = g.index_of(p) {
                        if data[j] {
                            ds.union(i as u32, j as u32);
                        }
                    }
                }
            }
        }
    }

    // root -> (size, first index)
    let mut root_of = vec![u32::MAX; n];
    let mut stats: Vec<(usize, usize, u32)> = Vec::new();
    let mut slot_of_root = vec![u32::MAX; n];
    for i in 0..n {
        if !data[i] {
            continue;
        }
        let r = ds.find(i as u32);
        root_of[i] = r;
        if slot_of_root[r as usize] == u32::MAX {
            slot_of_root[r as usize] = stats.len() as u32;
            stats.push((0, i, r));
        }
        stats[slot_of_root[r as usize] as usize].0 += 1;
    }
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| stats[b].0.cmp(&stats[a].0).then(stats[a].1.cmp(&stats[b].1)));
    let mut label_of_slot = vec![0u32; stats.len()];
    for (rank, &slot) in order.iter().enumerate() {
        label_of_slot[slot] = rank as u32 + 1;
    }
    let labels = (0..n)
        .map(|i| {
            if data[i] {
                label_of_slot[slot_of_root[root_of[i] as usize] as usize]
            } else {
                0
            }
        })
        .collect();
    Components {
        labels: Grid::from_vec(g, labels).expect("same geometry"),
        sizes: order.iter().map(|&s| stats[s].0).collect(),
        first_index: order.iter().map(|&s| stats[s].1).collect(),
    }
}

pub fn count_components(mask: &BinaryMask, connectivity: Connectivity) -> usize {
    connected_components(mask, connectivity).len()
}

/// The largest component, or an empty mask.
pub fn largest_component(mask: &BinaryMask, connectivity: Connectivity) -> BinaryMask {
    let cc = connected_components(mask, connectivity);
    if cc.is_empty() {
        BinaryMask::empty(*mask.geometry())
    } else {
        cc.mask_of(1)
    }
}
