//! Voxel grids sharing a common geometry.
//!
//! Data is stored with `x` varying fastest, then `y`, then `z`:
//! `index = x + nx * (y + ny * z)`. The `z` axis is the slice axis, so an
//! axial slice is the contiguous block of `nx * ny` voxels at fixed `z`.

use serde::{Deserialize, Serialize};

use crate::error::{BroncoError, Result};

/// Dimensions, voxel spacing (mm) and origin (mm) of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(BroncoError::param(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(BroncoError::param(format!(
                "spacing must be finite and > 0, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(BroncoError::param("origin must be finite"));
        }
        Ok(Geometry { dims, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Geometry::new(dims, [1.0; 3], [0.0; 3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a])
    }

    /// Index of `p`, or `None` when it falls outside the grid.
    #[inline]
    pub fn index_of(&self, p: [i64; 3]) -> Option<usize> {
        if self.contains(p) {
            Some(self.index(p[0] as usize, p[1] as usize, p[2] as usize))
        } else {
            None
        }
    }

    /// Index of the voxel at `idx + d`, or `None` when it leaves the grid.
    #[inline]
    pub fn offset(&self, idx: usize, d: [i64; 3]) -> Option<usize> {
        let c = self.coords(idx);
        self.index_of([c[0] as i64 + d[0], c[1] as i64 + d[1], c[2] as i64 + d[2]])
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Physical position (mm) of a continuous voxel coordinate.
    pub fn to_mm(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + p[0] * self.spacing[0],
            self.origin[1] + p[1] * self.spacing[1],
            self.origin[2] + p[2] * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinate of a physical position (mm).
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Spacing-weighted distance (mm) between two voxel indices.
    pub fn distance_mm(&self, a: usize, b: usize) -> f64 {
        let ca = self.coords(a);
        let cb = self.coords(b);
        (0..3)
            .map(|k| {
                let d = (ca[k] as f64 - cb[k] as f64) * self.spacing[k];
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn same_as(&self, other: &Geometry) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    pub fn require_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(BroncoError::param(format!(
                "geometry mismatch for {what}: {self:?} vs {other:?}"
            )))
        }
    }
}

/// A dense 3D grid of values with its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    geometry: Geometry,
    data: Vec<T>,
}

/// Scalar intensities (HU for CT) or derived scalar fields.
pub type ScalarVolume = Grid<f64>;
/// Binary mask, `true` = set.
pub type BinaryMask = Grid<bool>;
/// Non-negative integer labels, `0` = background.
pub type LabelMap = Grid<u32>;

impl<T: Clone> Grid<T> {
    pub fn filled(geometry: Geometry, value: T) -> Self {
        Grid {
            data: vec![value; geometry.len()],
            geometry,
        }
    }

    pub fn from_vec(geometry: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(BroncoError::param(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(Grid { geometry, data })
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Grid { geometry, data }
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            geometry: self.geometry,
            data: self.data.iter().map(f).collect(),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> &T {
        &self.data[self.geometry.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.geometry.index(x, y, z);
        self.data[i] = value;
    }
}

impl<T> Grid<T> {
    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Replace the geometry while keeping the data (dims must agree).
    pub fn with_geometry(mut self, geometry: Geometry) -> Result<Self> {
        if geometry.dims != self.geometry.dims {
            return Err(BroncoError::param("with_geometry cannot change dims"));
        }
        self.geometry = geometry;
        Ok(self)
    }
}

impl BinaryMask {
    pub fn empty(geometry: Geometry) -> Self {
        Grid::filled(geometry, false)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn none(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Linear indices of set voxels in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        self.geometry.require_same(&other.geometry, "mask combination")?;
        Ok(Grid {
            geometry: self.geometry,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> BinaryMask {
        self.map(|&b| !b)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.geometry.same_as(&other.geometry) && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Set voxels as an `f64` mask (0 or 1).
    pub fn to_scalar(&self) -> ScalarVolume {
        self.map(|&b| if b { 1.0 } else { 0.0 })
    }
}

impl LabelMap {
    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn mask_of(&self, label: u32) -> BinaryMask {
        self.map(|&l| l == label)
    }

    pub fn nonzero(&self) -> BinaryMask {
        self.map(|&l| l != 0)
    }

    /// Sorted distinct labels including `0` when present.
    pub fn label_set(&self) -> Vec<u32> {
        let mut labels: Vec<u32> = self.data.clone();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

/// The 6 face-neighbor offsets.
pub const FACE_OFFSETS: [[i64; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// All 26 neighbor offsets in z, y, x scan order.
pub fn neighbor_offsets_26() -> Vec<[i64; 3]> {
    let mut out = Vec::with_capacity(26);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dx, dy, dz) != (0, 0, 0) {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Voxel connectivity used by component labelling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[i64; 3]> {
        match self {
            Connectivity::Six => FACE_OFFSETS.to_vec(),
            Connectivity::TwentySix => neighbor_offsets_26(),
        }
    }

    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(BroncoError::param(format!("connectivity must be 6 or 26, got {other}"))),
        }
    }
}
