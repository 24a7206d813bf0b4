//! Lung, mediastinum and trachea masks, and the preprocessed working mask.

use serde::{Deserialize, Serialize};

use crate::components::connected_components;
use crate::error::{BroncoError, Result};
use crate::grid::{BinaryMask, Connectivity, ScalarVolume};
use crate::hull::slice_convex_hull;
use crate::morphology::{closing, dilate, erode, fill_holes_2d, StructuringElement};

/// Parameters of the classical lung segmentation used when no lung mask is
/// supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LungParams {
    /// Voxels strictly below this HU value count as air.
    pub air_threshold: f64,
    /// Smallest component volume (ml) accepted as a lung.
    pub min_lung_ml: f64,
    pub closing_radius: usize,
    /// Fill enclosed holes (vessels) slice by slice after closing.
    pub fill_holes: bool,
}

impl Default for LungParams {
    fn default() -> Self {
        LungParams {
            air_threshold: -320.0,
            min_lung_ml: 100.0,
            closing_radius: 2,
            fill_holes: true,
        }
    }
}

/// Threshold, drop air connected to the lateral image borders, keep the
/// (up to) two largest remaining air components, close them and fill holes.
pub fn fallback_lung_segmentation(ct: &ScalarVolume, params: &LungParams) -> Result<BinaryMask> {
    let g = *ct.geometry();
    let air = ct.map(|&v| v < params.air_threshold);
    let cc = connected_components(&air, Connectivity::TwentySix);
    if cc.is_empty() {
        return Err(BroncoError::NoLungsFound("no voxel below the air threshold".into()));
    }

    let [nx, ny, nz] = g.dims;
    let mut touches_border = vec![false; cc.len() + 1];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if x == 0 || y == 0 || x == nx - 1 || y == ny - 1 {
                    let l = *cc.labels.get(x, y, z);
                    touches_border[l as usize] = true;
                }
            }
        }
    }

    let ml_per_voxel = g.voxel_volume_mm3() / 1000.0;
    let keep: Vec<u32> = (1..=cc.len() as u32)
        .filter(|&l| !touches_border[l as usize])
        .filter(|&l| cc.sizes[l as usize - 1] as f64 * ml_per_voxel >= params.min_lung_ml)
        .take(2)
        .collect();
    if keep.is_empty() {
        return Err(BroncoError::NoLungsFound(format!(
            "no interior air component of at least {} ml",
            params.min_lung_ml
        )));
    }
    let lungs = closing(
        &cc.mask_of_labels(&keep),
        &StructuringElement::ball(params.closing_radius),
    )?;
    Ok(if params.fill_holes {
        fill_holes_2d(&lungs)
    } else {
        lungs
    })
}

/// The region between the lungs: per-slice convex hull minus the lungs.
pub fn extract_mediastinum(lung: &BinaryMask) -> Result<BinaryMask> {
    if lung.none() {
        return Err(BroncoError::param("lung mask is empty"));
    }
    slice_convex_hull(lung).difference(lung)
}

/// Score of one trachea candidate component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracheaCandidateScore {
    pub label: u32,
    /// Min-max normalized voxel count.
    pub area: f64,
    /// Min-max normalized distance from the axial image center line.
    pub center_distance: f64,
    /// `|1 - center_distance|`.
    pub inverted_distance: f64,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracheaWeights {
    pub area: f64,
    pub centrality: f64,
}

impl Default for TracheaWeights {
    fn default() -> Self {
        TracheaWeights {
            area: 2.0,
            centrality: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TracheaSegmentation {
    pub mask: BinaryMask,
    pub candidates: Vec<TracheaCandidateScore>,
    pub selected: u32,
    /// HU window `[lo, hi]` used for the air threshold.
    pub window: (f64, f64),
}

fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Score candidates from raw areas and raw center distances.
pub fn score_candidates(areas: &[f64], distances: &[f64], weights: TracheaWeights) -> Vec<TracheaCandidateScore> {
    let a = min_max_normalize(areas);
    let d = min_max_normalize(distances);
    let total = weights.area + weights.centrality;
    (0..areas.len())
        .map(|i| {
            let inverted = (1.0 - d[i]).abs();
            TracheaCandidateScore {
                label: i as u32 + 1,
                area: a[i],
                center_distance: d[i],
                inverted_distance: inverted,
                score: (weights.area * a[i] + weights.centrality * inverted) / total,
            }
        })
        .collect()
}

/// Pick the largest, most central air component inside the mediastinum.
pub fn segment_trachea(
    ct: &ScalarVolume,
    mediastinum: &BinaryMask,
    weights: TracheaWeights,
) -> Result<TracheaSegmentation> {
    ct.geometry().require_same(mediastinum.geometry(), "mediastinum")?;
    if mediastinum.none() {
        return Err(BroncoError::param("mediastinum mask is empty"));
    }
    let lo = ct
        .data()
        .iter()
        .zip(mediastinum.data())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::INFINITY, f64::min);
    let hi = lo / 3.0;
    let air = BinaryMask::from_vec(
        *ct.geometry(),
        ct.data()
            .iter()
            .zip(mediastinum.data())
            .map(|(&v, &m)| m && v >= lo && v <= hi)
            .collect(),
    )?;
    let cc = connected_components(&air, Connectivity::TwentySix);
    if cc.is_empty() {
        return Err(BroncoError::NoAirInMediastinum);
    }

    let g = ct.geometry();
    let cx = g.dims[0] as f64 / 2.0;
    let cy = g.dims[1] as f64 / 2.0;
    let mut dist = vec![f64::INFINITY; cc.len()];
    for (i, &l) in cc.labels.data().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let [x, y, _] = g.coords(i);
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        let slot = &mut dist[l as usize - 1];
        if d < *slot {
            *slot = d;
        }
    }
    let areas: Vec<f64> = cc.sizes.iter().map(|&s| s as f64).collect();
    let candidates = score_candidates(&areas, &dist, weights);
    // First maximum wins, i.e. the larger component on ties.
    let best = candidates
        .iter()
        .fold(None::<&TracheaCandidateScore>, |best, c| match best {
            Some(b) if b.score >= c.score => Some(b),
            _ => Some(c),
        })
        .expect("at least one candidate");
    Ok(TracheaSegmentation {
        mask: cc.mask_of(best.label),
        selected: best.label,
        candidates,
        window: (lo, hi),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessParams {
    /// Box extent (voxels per axis) used to dilate the trachea.
    pub trachea_dilation_extent: [usize; 3],
    /// Half-extent of the in-slice box used for noise erosion.
    pub noise_erosion_radius: usize,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            trachea_dilation_extent: [20, 20, 20],
            noise_erosion_radius: 1,
        }
    }
}

/// Dilate the trachea, add it to the lungs, then erode every axial slice.
pub fn preprocess_masks(lung: &BinaryMask, trachea: &BinaryMask, params: &PreprocessParams) -> Result<BinaryMask> {
    lung.geometry().require_same(trachea.geometry(), "trachea")?;
    let grown = if trachea.none() {
        trachea.clone()
    } else {
        dilate(
            trachea,
            &StructuringElement::box_with_extent(params.trachea_dilation_extent),
        )?
    };
    let merged = lung.union(&grown)?;
    if params.noise_erosion_radius == 0 {
        return Ok(merged);
    }
    erode(&merged, &StructuringElement::box2d(params.noise_erosion_radius))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Geometry, Grid};

    #[test]
    fn score_is_weighted_average() {
        let s = score_candidates(&[10.0, 30.0, 20.0], &[4.0, 0.0, 8.0], TracheaWeights::default());
        for c in &s {
            assert!((c.score - (2.0 * c.area + c.inverted_distance) / 3.0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&c.score));
        }
        assert_eq!(s[1].score, 1.0);
    }

    #[test]
    fn equal_areas_leave_centrality_to_decide() {
        let s = score_candidates(&[50.0, 50.0], &[0.0, 7.0], TracheaWeights::default());
        assert!(s[0].score > s[1].score);
    }

    #[test]
    fn empty_lung_has_no_mediastinum() {
        let m = BinaryMask::empty(Geometry::with_dims([4, 4, 4]).unwrap());
        assert!(extract_mediastinum(&m).is_err());
    }

    #[test]
    fn convex_lung_has_empty_mediastinum() {
        let g = Geometry::with_dims([10, 10, 3]).unwrap();
        let m = Grid::from_fn(g, |x, y, _| (2..8).contains(&x) && (3..7).contains(&y));
        assert!(extract_mediastinum(&m).unwrap().none());
    }

    #[test]
    fn all_air_volume_has_no_lungs() {
        let g = Geometry::with_dims([12, 12, 12]).unwrap();
        let ct = Grid::filled(g, -1000.0);
        assert!(matches!(
            fallback_lung_segmentation(&ct, &LungParams::default()),
            Err(BroncoError::NoLungsFound(_))
        ));
    }

    #[test]
    fn preprocess_rejects_geometry_mismatch() {
        let a = BinaryMask::empty(Geometry::with_dims([30, 30, 30]).unwrap());
        let b = BinaryMask::empty(Geometry::with_dims([30, 30, 31]).unwrap());
        assert!(preprocess_masks(&a, &b, &PreprocessParams::default()).is_err());
    }
}
