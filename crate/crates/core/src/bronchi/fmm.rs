use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{BroncoError, Result};
use crate::grid::{BinaryMask, ScalarVolume};

use super::speed::BLOCKED_SPEED;

#[derive(Clone, Debug)]
pub struct MarchResult {
    pub seed: usize,
    pub stop_time: f64,
    /// First arrival times; `INFINITY` where the front never got.
    pub arrival: ScalarVolume,
    /// `arrival <= stop_time`.
    pub segmentation: BinaryMask,
    /// Sum of the speed values inside the segmentation.
    pub sprawl: f64,
}

#[derive(Clone, Copy, PartialEq)]
struct Trial {
    t: f64,
    idx: usize,
}

impl Eq for Trial {}

impl Ord for Trial {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on time, then index.
        other.t.total_cmp(&self.t).then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Trial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// First-order upwind solution of `sum_a ((T - t_a)^+ / h_a)^2 = 1 / f^2`
/// given the smallest known neighbor time `t_a` along each axis.
fn solve(mut known: [(f64, f64); 3], f: f64) -> f64 {
    known.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rhs = 1.0 / (f * f);
    let (mut a, mut b, mut c) = (0.0, 0.0, -rhs);
    let mut t = f64::INFINITY;
    for (k, &(tk, h)) in known.iter().enumerate() {
        if !tk.is_finite() {
            break;
        }
        let w = 1.0 / (h * h);
        a += w;
        b += -2.0 * w * tk;
        c += w * tk * tk;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            break;
        }
        let cand = (-b + disc.sqrt()) / (2.0 * a);
        t = cand;
        let next = known.get(k + 1).map(|n| n.0).unwrap_or(f64::INFINITY);
        if cand <= next {
            break;
        }
    }
    t
}

/// Radius (voxels) of the seed neighborhood that gets analytic arrival times.
pub const DEFAULT_SOURCE_RADIUS: f64 = 2.5;

/// Fast marching from `seed` until the smallest trial time exceeds
/// `stop_time`. With a `domain`, the front never enters voxels outside it.
pub fn fast_march(
    speed: &ScalarVolume,
    seed: usize,
    stop_time: f64,
    domain: Option<&BinaryMask>,
) -> Result<MarchResult> {
    fast_march_with(speed, seed, stop_time, domain, DEFAULT_SOURCE_RADIUS)
}

/// [`fast_march`] with an explicit source radius. Voxels within
/// `source_radius` voxels of the seed, reachable from it inside that ball,
/// start as trial points with the straight-line time `d / f` (`f` the mean
/// of the seed and voxel speeds). This removes most of the point-source
/// error of the first-order scheme; 0 starts from the seed alone.
pub fn fast_march_with(
    speed: &ScalarVolume,
    seed: usize,
    stop_time: f64,
    domain: Option<&BinaryMask>,
    source_radius: f64,
) -> Result<MarchResult> {
    let g = *speed.geometry();
    if let Some(d) = domain {
        g.require_same(d.geometry(), "march domain")?;
    }
    if seed >= g.len() {
        return Err(BroncoError::param(format!("seed {seed} lies outside the volume")));
    }
    if speed.data()[seed] <= BLOCKED_SPEED {
        return Err(BroncoError::param("seed voxel is blocked"));
    }
    if domain.is_some_and(|d| !d.data()[seed]) {
        return Err(BroncoError::param("seed voxel lies outside the march domain"));
    }
    if !(stop_time >= 0.0) {
        return Err(BroncoError::param("stop time must be non-negative"));
    }
    if !(source_radius >= 0.0) {
        return Err(BroncoError::param("source radius must be non-negative"));
    }

    let [nx, ny, nz] = g.dims;
    let strides = [1usize, nx, nx * ny];
    let dims = g.dims;
    let f = speed.data();
    let inside = |i: usize| domain.is_none_or(|d| d.data()[i]);

    let mut t = vec![f64::INFINITY; g.len()];
    let mut done = vec![false; g.len()];
    let mut heap = BinaryHeap::new();
    t[seed] = 0.0;
    heap.push(Trial { t: 0.0, idx: seed });
    let s = [seed % nx, (seed / nx) % ny, seed / (nx * ny)];
    let mut stack = vec![seed];
    while let Some(i) = stack.pop() {
        let p = [i % nx, (i / nx) % ny, i / (nx * ny)];
        for a in 0..3 {
            for forward in [false, true] {
                if (forward && p[a] + 1 >= dims[a]) || (!forward && p[a] == 0) {
                    continue;
                }
                let j = if forward { i + strides[a] } else { i - strides[a] };
                if t[j].is_finite() || !inside(j) || f[j] <= BLOCKED_SPEED {
                    continue;
                }
                let q = [j % nx, (j / nx) % ny, j / (nx * ny)];
                let d2: f64 = (0..3).map(|b| (q[b] as f64 - s[b] as f64).powi(2)).sum();
                if d2 > source_radius * source_radius {
                    continue;
                }
                let mm: f64 = (0..3)
                    .map(|b| ((q[b] as f64 - s[b] as f64) * g.spacing[b]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                t[j] = mm / (0.5 * (f[seed] + f[j]));
                heap.push(Trial { t: t[j], idx: j });
                stack.push(j);
            }
        }
    }
    let mut last = 0.0f64;
    let mut segmentation = BinaryMask::empty(g);
    let mut sprawl = 0.0;

    while let Some(Trial { t: ti, idx }) = heap.pop() {
        if done[idx] || ti > t[idx] {
            continue;
        }
        if ti > stop_time {
            break;
        }
        debug_assert!(ti >= last - 1e-9 * last.max(1.0), "non-monotone finalization");
        last = ti;
        done[idx] = true;
        segmentation.data_mut()[idx] = true;
        sprawl += f[idx];

        let p = [idx % nx, (idx / nx) % ny, idx / (nx * ny)];
        for a in 0..3 {
            for forward in [false, true] {
                if (forward && p[a] + 1 >= dims[a]) || (!forward && p[a] == 0) {
                    continue;
                }
                let j = if forward { idx + strides[a] } else { idx - strides[a] };
                if done[j] || !inside(j) || f[j] <= 0.0 {
                    continue;
                }
                let q = [j % nx, (j / nx) % ny, j / (nx * ny)];
                let mut known = [(f64::INFINITY, 1.0); 3];
                for (b, slot) in known.iter_mut().enumerate() {
                    let mut best = f64::INFINITY;
                    if q[b] > 0 && done[j - strides[b]] {
                        best = best.min(t[j - strides[b]]);
                    }
                    if q[b] + 1 < dims[b] && done[j + strides[b]] {
                        best = best.min(t[j + strides[b]]);
                    }
                    *slot = (best, g.spacing[b]);
                }
                let cand = solve(known, f[j]);
                if cand < t[j] {
                    t[j] = cand;
                    heap.push(Trial { t: cand, idx: j });
                }
            }
        }
    }
    let _ = nz;
    // Trial values beyond the stop are not final.
    for (ti, &d) in t.iter_mut().zip(&done) {
        if !d {
            *ti = f64::INFINITY;
        }
    }
    Ok(MarchResult {
        seed,
        stop_time,
        arrival: ScalarVolume::from_vec(g, t)?,
        segmentation,
        sprawl,
    })
}
