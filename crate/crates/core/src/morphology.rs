//! Binary dilation and erosion with box and ball structuring elements.
//!
//! Voxels outside the grid count as background for both operations, so
//! erosion always clears the border band that the element reaches past.
//! Elements with zero half-extent along `z` act slice-by-slice in the axial
//! plane.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BroncoError, Result};
use crate::grid::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementShape {
    Box,
    Ball,
}

/// A centered, symmetric structuring element given by per-axis half-extents
/// in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    pub shape: ElementShape,
    pub radius: [usize; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphOp {
    Dilate,
    Erode,
}

impl StructuringElement {
    pub fn box3d(radius: usize) -> Self {
        StructuringElement {
            shape: ElementShape::Box,
            radius: [radius; 3],
        }
    }

    /// In-slice box of half-extent `radius` (a `(2r+1)^2` square).
    pub fn box2d(radius: usize) -> Self {
        StructuringElement {
            shape: ElementShape::Box,
            radius: [radius, radius, 0],
        }
    }

    /// Box covering at least `extent` voxels per axis (half-extent `extent / 2`).
    pub fn box_with_extent(extent: [usize; 3]) -> Self {
        StructuringElement {
            shape: ElementShape::Box,
            radius: [extent[0] / 2, extent[1] / 2, extent[2] / 2],
        }
    }

    pub fn ball(radius: usize) -> Self {
        StructuringElement {
            shape: ElementShape::Ball,
            radius: [radius; 3],
        }
    }

    pub fn ball2d(radius: usize) -> Self {
        StructuringElement {
            shape: ElementShape::Ball,
            radius: [radius, radius, 0],
        }
    }

    pub fn is_planar(&self) -> bool {
        self.radius[2] == 0
    }

    /// Offsets contained in the element, center included.
    pub fn offsets(&self) -> Vec<[i64; 3]> {
        let r = self.radius.map(|v| v as i64);
        let mut out = Vec::new();
        for dz in -r[2]..=r[2] {
            for dy in -r[1]..=r[1] {
                for dx in -r[0]..=r[0] {
                    let inside = match self.shape {
                        ElementShape::Box => true,
                        ElementShape::Ball => {
                            let term = |d: i64, r: i64| {
                                if r == 0 {
                                    0.0
                                } else {
                                    (d as f64 / r as f64).powi(2)
                                }
                            };
                            term(dx, r[0]) + term(dy, r[1]) + term(dz, r[2]) <= 1.0 + 1e-12
                        }
                    };
                    if inside {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

pub fn dilate(mask: &BinaryMask, elem: &StructuringElement) -> Result<BinaryMask> {
    morphology(mask, elem, MorphOp::Dilate)
}

pub fn erode(mask: &BinaryMask, elem: &StructuringElement) -> Result<BinaryMask> {
    morphology(mask, elem, MorphOp::Erode)
}

/// Erosion followed by dilation.
pub fn opening(mask: &BinaryMask, elem: &StructuringElement) -> Result<BinaryMask> {
    dilate(&erode(mask, elem)?, elem)
}

/// Dilation followed by erosion.
pub fn closing(mask: &BinaryMask, elem: &StructuringElement) -> Result<BinaryMask> {
    erode(&dilate(mask, elem)?, elem)
}

/// Fill background regions of each axial slice that are not 4-connected to
/// the slice border.
pub fn fill_holes_2d(mask: &BinaryMask) -> BinaryMask {
    let g = *mask.geometry();
    let [nx, ny, _] = g.dims;
    let plane = nx * ny;
    let mut out = mask.clone();
    out.data_mut().par_chunks_mut(plane).for_each(|slice| {
        let mut outside = vec![false; plane];
        let mut stack: Vec<usize> = (0..plane)
            .filter(|&i| {
                let (x, y) = (i % nx, i / nx);
                (x == 0 || y == 0 || x == nx - 1 || y == ny - 1) && !slice[i]
            })
            .collect();
        for &i in &stack {
            outside[i] = true;
        }
        while let Some(i) = stack.pop() {
            let (x, y) = (i % nx, i / nx);
            let mut visit = |j: usize| {
                if !slice[j] && !outside[j] {
                    outside[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
        }
        for (v, o) in slice.iter_mut().zip(&outside) {
            *v = !o;
        }
    });
    out
}

pub fn morphology(mask: &BinaryMask, elem: &StructuringElement, op: MorphOp) -> Result<BinaryMask> {
    let dims = mask.dims();
    for a in 0..3 {
        if 2 * elem.radius[a] + 1 > dims[a] {
            return Err(BroncoError::param(format!(
                "structuring element {:?} is larger than the volume {:?} along axis {a}",
                elem.radius, dims
            )));
        }
    }
    Ok(match elem.shape {
        ElementShape::Box => box_separable(mask, elem.radius, op),
        ElementShape::Ball => by_offsets(mask, &elem.offsets(), op),
    })
}

fn box_separable(mask: &BinaryMask, radius: [usize; 3], op: MorphOp) -> BinaryMask {
    let mut cur = mask.clone();
    for axis in 0..3 {
        if radius[axis] > 0 {
            cur = box_pass(&cur, axis, radius[axis], op);
        }
    }
    cur
}

/// One 1D window pass of half-width `r` along `axis`.
fn box_pass(mask: &BinaryMask, axis: usize, r: usize, op: MorphOp) -> BinaryMask {
    let g = *mask.geometry();
    let [nx, ny, nz] = g.dims;
    let n = g.dims[axis];
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let src = mask.data();
    let mut out = mask.clone();

    // Lines along `axis` are enumerated by their start index.
    let starts: Vec<usize> = match axis {
        0 => (0..ny * nz).map(|l| l * nx).collect(),
        1 => (0..nz).flat_map(|z| (0..nx).map(move |x| x + nx * ny * z)).collect(),
        _ => (0..nx * ny).collect(),
    };
    let full = 2 * r + 1;
    let results: Vec<(usize, Vec<bool>)> = starts
        .par_iter()
        .map(|&s| {
            let mut prefix = vec![0usize; n + 1];
            for i in 0..n {
                prefix[i + 1] = prefix[i] + src[s + i * stride] as usize;
            }
            let line = (0..n)
                .map(|i| {
                    let lo = i.saturating_sub(r);
                    let hi = (i + r).min(n - 1);
                    let cnt = prefix[hi + 1] - prefix[lo];
                    match op {
                        MorphOp::Dilate => cnt > 0,
                        MorphOp::Erode => cnt == full,
                    }
                })
                .collect();
            (s, line)
        })
        .collect();
    let dst = out.data_mut();
    for (s, line) in results {
        for (i, v) in line.into_iter().enumerate() {
            dst[s + i * stride] = v;
        }
    }
    out
}

fn by_offsets(mask: &BinaryMask, offsets: &[[i64; 3]], op: MorphOp) -> BinaryMask {
    let g = *mask.geometry();
    let [nx, ny, nz] = g.dims;
    let src = mask.data();
    let mut out = mask.clone();
    out.data_mut()
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slice)| {
            for y in 0..ny {
                for x in 0..nx {
                    let probe = |o: &[i64; 3]| {
                        let (px, py, pz) = (x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]);
                        if px < 0 || py < 0 || pz < 0 || px >= nx as i64 || py >= ny as i64 || pz >= nz as i64 {
                            false
                        } else {
                            src[px as usize + nx * (py as usize + ny * pz as usize)]
                        }
                    };
                    slice[x + nx * y] = match op {
                        MorphOp::Dilate => offsets.iter().any(probe),
                        MorphOp::Erode => offsets.iter().all(probe),
                    };
                }
            }
        });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Geometry, Grid};

    fn single(dims: [usize; 3], p: [usize; 3]) -> BinaryMask {
        let mut m = BinaryMask::empty(Geometry::with_dims(dims).unwrap());
        m.set(p[0], p[1], p[2], true);
        m
    }

    #[test]
    fn single_voxel_box_dilation_gives_27() {
        let m = single([7, 7, 7], [3, 3, 3]);
        let d = dilate(&m, &StructuringElement::box3d(1)).unwrap();
        assert_eq!(d.count(), 27);
    }

    #[test]
    fn ball_radius_one_is_the_six_cross() {
        assert_eq!(StructuringElement::ball(1).offsets().len(), 7);
        assert_eq!(StructuringElement::ball(2).offsets().len(), 33);
        assert!(StructuringElement::ball(3).offsets().contains(&[0, 0, 0]));
    }

    #[test]
    fn element_larger_than_volume_is_rejected() {
        let m = single([4, 4, 4], [1, 1, 1]);
        assert!(dilate(&m, &StructuringElement::box3d(2)).is_err());
        assert!(erode(&m, &StructuringElement::box2d(1)).is_ok());
    }

    #[test]
    fn erosion_treats_outside_as_background() {
        let m = Grid::filled(Geometry::with_dims([5, 5, 5]).unwrap(), true);
        let e = erode(&m, &StructuringElement::box3d(1)).unwrap();
        assert_eq!(e.count(), 27);
    }

    #[test]
    fn planar_element_keeps_slices_independent() {
        let m = single([5, 5, 5], [2, 2, 2]);
        let d = dilate(&m, &StructuringElement::box2d(1)).unwrap();
        assert_eq!(d.count(), 9);
        assert!((0..5).all(|x| (0..5).all(|y| !*d.get(x, y, 1) && !*d.get(x, y, 3))));
    }

    #[test]
    fn even_extent_box_covers_at_least_extent() {
        let e = StructuringElement::box_with_extent([20, 20, 20]);
        assert!(e.offsets().len() >= 20 * 20 * 20);
    }

    #[test]
    fn ring_is_filled_but_open_ring_is_not() {
        let g = Geometry::with_dims([9, 9, 2]).unwrap();
        let ring = Grid::from_fn(g, |x, y, z| {
            let edge = (x == 2 || x == 6) && (2..=6).contains(&y) || (y == 2 || y == 6) && (2..=6).contains(&x);
            edge && !(z == 1 && x == 6 && y == 4)
        });
        let f = fill_holes_2d(&ring);
        assert!(*f.get(4, 4, 0));
        assert_eq!(f.count() - ring.count(), 9);
        assert!(!*f.get(4, 4, 1));
    }
}
