//! Filled 2D convex hulls of axial slices, computed in voxel coordinates.

use rayon::prelude::*;

use crate::grid::BinaryMask;

type Pt = (i64, i64);

#[inline]
fn cross(o: Pt, a: Pt, b: Pt) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise hull vertices (monotone chain). Collinear points are
/// dropped; a degenerate hull has one or two vertices.
pub fn convex_hull_2d(points: &[Pt]) -> Vec<Pt> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut hull: Vec<Pt> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Whether `p` lies inside or on the boundary of a CCW hull.
pub fn hull_contains(hull: &[Pt], p: Pt) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            cross(a, b, p) == 0
                && p.0 >= a.0.min(b.0)
                && p.0 <= a.0.max(b.0)
                && p.1 >= a.1.min(b.1)
                && p.1 <= a.1.max(b.1)
        }
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0),
    }
}

/// Replace every axial slice with the filled convex hull of its set voxels.
pub fn slice_convex_hull(mask: &BinaryMask) -> BinaryMask {
    let [nx, ny, _] = mask.dims();
    let src = mask.data();
    let mut out = mask.clone();
    out.data_mut()
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slice)| {
            let base = z * nx * ny;
            let pts: Vec<Pt> = (0..nx * ny)
                .filter(|&i| src[base + i])
                .map(|i| ((i % nx) as i64, (i / nx) as i64))
                .collect();
            if pts.is_empty() {
                return;
            }
            let hull = convex_hull_2d(&pts);
            let (x0, x1) = (
                hull.iter().map(|p| p.0).min().unwrap(),
                hull.iter().map(|p| p.0).max().unwrap(),
            );
            let (y0, y1) = (
                hull.iter().map(|p| p.1).min().unwrap(),
                hull.iter().map(|p| p.1).max().unwrap(),
            );
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if hull_contains(&hull, (x, y)) {
                        slice[x as usize + nx * y as usize] = true;
                    }
                }
            }
        });
    out
}
