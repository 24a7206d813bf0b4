use rayon::prelude::*;

use crate::grid::{BinaryMask, ScalarVolume};

/// Speed assigned to blocked voxels. Positive so the eikonal update stays
/// defined; arrival times through it are effectively infinite.
pub const BLOCKED_SPEED: f64 = 1e-6;

/// Gradient magnitude by central differences, one-sided at the borders.
pub fn gradient_magnitude(ct: &ScalarVolume) -> ScalarVolume {
    let g = *ct.geometry();
    let [nx, ny, nz] = g.dims;
    let data = ct.data();
    let dims = g.dims;
    let strides = [1, nx, nx * ny];
    let mut out = vec![0.0; g.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x, y, z];
                let i = x + nx * (y + ny * z);
                let mut sum = 0.0;
                for a in 0..3 {
                    if dims[a] < 2 {
                        continue;
                    }
                    let s = strides[a];
                    let h = g.spacing[a];
                    let d = if p[a] == 0 {
                        (data[i + s] - data[i]) / h
                    } else if p[a] == dims[a] - 1 {
                        (data[i] - data[i - s]) / h
                    } else {
                        (data[i + s] - data[i - s]) / (2.0 * h)
                    };
                    sum += d * d;
                }
                slab[x + nx * y] = sum.sqrt();
            }
        }
    });
    let _ = nz;
    ScalarVolume::from_vec(g, out).expect("same geometry")
}

/// `1 / (1 + |∇I|)`, in `(0, 1]`.
pub fn speed_image(ct: &ScalarVolume) -> ScalarVolume {
    gradient_magnitude(ct).map(|&m| 1.0 / (1.0 + m))
}

/// Set every voxel of `region` to [`BLOCKED_SPEED`].
pub fn block(speed: &mut ScalarVolume, region: &BinaryMask) {
    for (s, &r) in speed.data_mut().iter_mut().zip(region.data()) {
        if r {
            *s = BLOCKED_SPEED;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Geometry, Grid};

    #[test]
    fn constant_volume_has_unit_speed() {
        let g = Geometry::with_dims([5, 6, 7]).unwrap();
        let s = speed_image(&Grid::filled(g, -300.0));
        assert!(s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn linear_ramp_including_borders() {
        let g = Geometry::new([8, 5, 4], [0.5, 1.0, 2.0], [0.0; 3]).unwrap();
        // I = 3 * x_mm
        let ct = Grid::from_fn(g, |x, _, _| 3.0 * 0.5 * x as f64);
        let s = speed_image(&ct);
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn single_voxel_axes_are_ignored() {
        let g = Geometry::with_dims([4, 1, 1]).unwrap();
        let ct = Grid::from_fn(g, |x, _, _| x as f64);
        assert!(gradient_magnitude(&ct).data().iter().all(|&m| (m - 1.0).abs() < 1e-12));
    }
}
