//! Lee-Kashyap-Chu 3D thinning with six directional subiterations.
//!
//! The 3x3x3 neighborhood of a voxel is packed into a `u32`, bit
//! `(dx+1) + 3(dy+1) + 9(dz+1)`; the center is bit 13 and is never set in
//! the packed value.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BroncoError, Result};
use crate::grid::BinaryMask;

const CENTER: usize = 13;

#[inline]
fn bit(dx: i64, dy: i64, dz: i64) -> usize {
    ((dx + 1) + 3 * (dy + 1) + 9 * (dz + 1)) as usize
}

struct Tables {
    /// Cells of the center cube's boundary (vertices, edges, faces), each as
    /// the set of neighbors that share it, with the sign of its Euler term.
    cells: Vec<(u32, i32)>,
    /// 26-adjacency between neighborhood positions (center excluded).
    adjacent: [u32; 27],
    /// 6-adjacency between neighborhood positions (center excluded).
    face_adjacent: [u32; 27],
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let mut cells = Vec::new();
        // A boundary cell is given by s in {-1,0,1}^3 minus the origin: the
        // number of nonzero components is 3 (vertex), 2 (edge) or 1 (face).
        // It is shared by the neighbors whose offsets lie in the box spanned
        // by 0 and s.
        for sz in -1..=1i64 {
            for sy in -1..=1i64 {
                for sx in -1..=1i64 {
                    let nonzero = [sx, sy, sz].iter().filter(|&&s| s != 0).count();
                    if nonzero == 0 {
                        continue;
                    }
                    let sign = if nonzero == 2 { -1 } else { 1 };
                    let mut m = 0u32;
                    for dz in [0, sz] {
                        for dy in [0, sy] {
                            for dx in [0, sx] {
                                let b = bit(dx, dy, dz);
                                if b != CENTER {
                                    m |= 1 << b;
                                }
                            }
                        }
                    }
                    cells.push((m, sign));
                }
            }
        }
        let mut adjacent = [0u32; 27];
        let mut face_adjacent = [0u32; 27];
        for a in 0..27usize {
            if a == CENTER {
                continue;
            }
            let pa = [(a % 3) as i64, ((a / 3) % 3) as i64, (a / 9) as i64];
            for b in 0..27usize {
                if b == a || b == CENTER {
                    continue;
                }
                let pb = [(b % 3) as i64, ((b / 3) % 3) as i64, (b / 9) as i64];
                if (0..3).all(|k| (pa[k] - pb[k]).abs() <= 1) {
                    adjacent[a] |= 1 << b;
                }
                if (0..3).map(|k| (pa[k] - pb[k]).abs()).sum::<i64>() == 1 {
                    face_adjacent[a] |= 1 << b;
                }
            }
        }
        Tables {
            cells,
            adjacent,
            face_adjacent,
        }
    })
}

/// Whether deleting the center keeps the Euler characteristic of the
/// foreground (as a union of closed unit cubes) unchanged.
pub(crate) fn is_euler_invariant(nb: u32) -> bool {
    let chi: i32 = tables().cells.iter().filter(|(m, _)| nb & m != 0).map(|(_, s)| s).sum();
    chi == 1
}

/// Number of 26-connected components formed by the set neighbors.
pub(crate) fn neighbor_components(nb: u32) -> usize {
    let adj = &tables().adjacent;
    let mut left = nb;
    let mut count = 0;
    while left != 0 {
        let mut comp = left & left.wrapping_neg();
        loop {
            let mut grown = comp;
            let mut bits = comp;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                grown |= adj[b] & nb;
            }
            if grown == comp {
                break;
            }
            comp = grown;
        }
        left &= !comp;
        count += 1;
    }
    count
}

/// End of a curve: one neighbor, or two face-adjacent neighbors (the tip of
/// a two-voxel-thick end, which would otherwise be peeled away one voxel at
/// a time within a single subiteration).
pub(crate) fn is_endpoint(nb: u32) -> bool {
    match nb.count_ones() {
        1 => true,
        2 => {
            let a = nb.trailing_zeros() as usize;
            tables().face_adjacent[a] & nb != 0
        }
        _ => false,
    }
}

/// Deletable under the thinning rules: not an endpoint, Euler invariant and
/// simple.
#[inline]
fn deletable(nb: u32) -> bool {
    !is_endpoint(nb) && is_euler_invariant(nb) && neighbor_components(nb) == 1
}

/// Directions checked for border voxels, one per subiteration.
const BORDERS: [[i64; 3]; 6] = [[0, -1, 0], [0, 1, 0], [1, 0, 0], [-1, 0, 0], [0, 0, 1], [0, 0, -1]];

/// A thinned mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub mask: BinaryMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkeletonParams {
    /// Terminal spurs of at most this many voxels that end on a junction
    /// voxel are removed after thinning; 0 disables pruning.
    pub spur_length: usize,
}

impl Default for SkeletonParams {
    fn default() -> Self {
        SkeletonParams { spur_length: 4 }
    }
}

/// Padded working image for thinning.
struct Work {
    img: Vec<bool>,
    fg: Vec<usize>,
    offsets: [isize; 27],
}

impl Work {
    #[inline]
    fn pack(&self, i: usize) -> u32 {
        let mut nb = 0u32;
        for (b, &o) in self.offsets.iter().enumerate() {
            if b != CENTER && self.img[(i as isize + o) as usize] {
                nb |= 1 << b;
            }
        }
        nb
    }

    /// Run directional subiterations until six consecutive ones delete
    /// nothing.
    fn thin(&mut self) {
        let mut unchanged = 0;
        let mut dir = 0;
        while unchanged < BORDERS.len() {
            let d = BORDERS[dir];
            let border_off = self.offsets[bit(d[0], d[1], d[2])];
            let candidates: Vec<usize> = self
                .fg
                .par_iter()
                .copied()
                .filter(|&i| !self.img[(i as isize + border_off) as usize] && deletable(self.pack(i)))
                .collect();
            let mut removed = false;
            for i in candidates {
                if deletable(self.pack(i)) {
                    self.img[i] = false;
                    removed = true;
                }
            }
            if removed {
                let img = &self.img;
                self.fg.retain(|&i| img[i]);
                unchanged = 0;
            } else {
                unchanged += 1;
            }
            dir = (dir + 1) % BORDERS.len();
        }
    }

    /// Remove short terminal chains that end on a voxel with three or more
    /// neighbors. Returns whether anything was removed.
    fn prune(&mut self, max_len: usize) -> bool {
        let neighbors = |w: &Work, i: usize| -> Vec<usize> {
            w.offsets
                .iter()
                .enumerate()
                .filter(|&(b, _)| b != CENTER)
                .map(|(_, &o)| (i as isize + o) as usize)
                .filter(|&j| w.img[j])
                .collect()
        };
        let mut doomed = Vec::new();
        for &e in &self.fg {
            let nbs = neighbors(self, e);
            if nbs.len() == 2 && is_endpoint(self.pack(e)) {
                // Bump on the side of a curve.
                if nbs.iter().any(|&n| neighbors(self, n).len() >= 3) {
                    doomed.push(e);
                }
                continue;
            }
            if nbs.len() != 1 {
                continue;
            }
            let mut chain = vec![e];
            let mut prev = usize::MAX;
            let mut cur = e;
            loop {
                let next: Vec<usize> = neighbors(self, cur).into_iter().filter(|&j| j != prev).collect();
                if next.len() != 1 {
                    break;
                }
                let n = next[0];
                if neighbors(self, n).len() >= 3 {
                    if chain.len() <= max_len {
                        doomed.extend_from_slice(&chain);
                    }
                    break;
                }
                if chain.len() >= max_len {
                    break;
                }
                chain.push(n);
                prev = cur;
                cur = n;
            }
        }
        for &i in &doomed {
            self.img[i] = false;
        }
        let img = &self.img;
        self.fg.retain(|&i| img[i]);
        !doomed.is_empty()
    }
}

/// Thin `mask` to a one-voxel-wide skeleton preserving topology.
pub fn skeletonize(mask: &BinaryMask) -> Result<Skeleton> {
    skeletonize_with(mask, &SkeletonParams::default())
}

/// Thin `mask` to a one-voxel-wide skeleton preserving topology.
///
/// Each subiteration collects the border voxels that are deletable against
/// the current image, then removes them one by one in scan order, re-testing
/// every condition against the partially thinned image.
pub fn skeletonize_with(mask: &BinaryMask, params: &SkeletonParams) -> Result<Skeleton> {
    if mask.none() {
        return Err(BroncoError::param("cannot skeletonize an empty mask"));
    }
    let [nx, ny, nz] = mask.dims();
    // One voxel of background padding on every side.
    let (px, py) = (nx + 2, ny + 2);
    let pad = |x: usize, y: usize, z: usize| (x + 1) + px * ((y + 1) + py * (z + 1));
    let mut img = vec![false; px * py * (nz + 2)];
    let mut fg = Vec::with_capacity(mask.count());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if *mask.get(x, y, z) {
                    let i = pad(x, y, z);
                    img[i] = true;
                    fg.push(i);
                }
            }
        }
    }
    let mut offsets = [0isize; 27];
    for (b, o) in offsets.iter_mut().enumerate() {
        let (dx, dy, dz) = ((b % 3) as isize - 1, ((b / 3) % 3) as isize - 1, (b / 9) as isize - 1);
        *o = dx + px as isize * (dy + py as isize * dz);
    }
    let mut work = Work { img, fg, offsets };
    work.thin();
    if params.spur_length > 0 {
        for _ in 0..8 {
            if !work.prune(params.spur_length) {
                break;
            }
            work.thin();
        }
    }
    let out = BinaryMask::from_fn(*mask.geometry(), |x, y, z| work.img[pad(x, y, z)]);
    Ok(Skeleton { mask: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::count_components;
    use crate::grid::{Connectivity, Geometry, Grid};

    #[test]
    fn single_voxel_survives() {
        let mut m = BinaryMask::empty(Geometry::with_dims([5, 5, 5]).unwrap());
        m.set(2, 2, 2, true);
        assert_eq!(skeletonize(&m).unwrap().mask, m);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = BinaryMask::empty(Geometry::with_dims([3, 3, 3]).unwrap());
        assert!(skeletonize(&m).is_err());
    }

    #[test]
    fn solid_cube_keeps_a_voxel() {
        let g = Geometry::with_dims([8, 8, 8]).unwrap();
        let m = Grid::from_fn(g, |x, y, z| {
            (1..7).contains(&x) && (1..7).contains(&y) && (1..7).contains(&z)
        });
        let s = skeletonize(&m).unwrap().mask;
        assert!(s.count() >= 1);
        assert_eq!(count_components(&s, Connectivity::TwentySix), 1);
    }

    #[test]
    fn isolated_point_is_not_euler_invariant() {
        assert!(!is_euler_invariant(0));
        assert_eq!(neighbor_components(0), 0);
    }

    #[test]
    fn face_neighbor_is_a_disk() {
        let nb = 1 << bit(1, 0, 0);
        assert!(is_euler_invariant(nb));
        assert_eq!(neighbor_components(nb), 1);
    }

    #[test]
    fn opposite_neighbors_are_two_components() {
        let nb = (1 << bit(1, 0, 0)) | (1 << bit(-1, 0, 0));
        assert_eq!(neighbor_components(nb), 2);
        assert!(!is_euler_invariant(nb));
    }

    #[test]
    fn thinning_a_thin_line_is_identity() {
        let g = Geometry::with_dims([12, 5, 5]).unwrap();
        let m = Grid::from_fn(g, |x, y, z| (1..11).contains(&x) && y == 2 && z == 2);
        assert_eq!(skeletonize(&m).unwrap().mask, m);
    }
}
