//! One-dimensional Gaussian mixture quantization of lung intensities and
//! extraction of the raw bronchovascular bundle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::connected_components;
use crate::error::{BroncoError, Result};
use crate::grid::{BinaryMask, Connectivity, Grid, LabelMap, ScalarVolume};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Samples per partial sum; fixed so reductions do not depend on thread count.
const CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmParams {
    pub k: usize,
    pub seed: u64,
    pub max_iterations: usize,
    /// Relative log-likelihood change that counts as converged.
    pub tolerance: f64,
    /// Larger inputs are subsampled (seeded) to this many values.
    pub max_samples: usize,
    pub variance_floor: f64,
    /// Also run EM from means at the 1%..99% spread quantiles and keep the
    /// fit with the higher likelihood. Quantile-chunk starts alone settle on
    /// a split of the dominant mode when a class holds only a few percent
    /// of the samples.
    pub spread_start: bool,
}

impl Default for GmmParams {
    fn default() -> Self {
        GmmParams {
            k: 3,
            seed: 0,
            max_iterations: 500,
            tolerance: 1e-6,
            max_samples: 250_000,
            variance_floor: 1e-2,
            spread_start: true,
        }
    }
}

/// A fitted mixture; components are sorted by ascending mean, so class 1 is
/// the darkest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub converged: bool,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl GmmModel {
    /// `ln(w_j * N(x | mu_j, var_j))` for every component.
    #[inline]
    fn log_joint(&self, x: f64, out: &mut [f64]) {
        for j in 0..self.k {
            let d = x - self.means[j];
            out[j] = self.weights[j].ln() - 0.5 * (LN_2PI + self.variances[j].ln()) - d * d / (2.0 * self.variances[j]);
        }
    }

    /// 1-based class of the most likely component; ties go to the lower class.
    pub fn classify(&self, x: f64) -> u32 {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..self.k {
            let d = x - self.means[j];
            let v = self.weights[j].ln() - 0.5 * (LN_2PI + self.variances[j].ln()) - d * d / (2.0 * self.variances[j]);
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        best as u32 + 1
    }

    /// Mixture density at `x`.
    pub fn density(&self, x: f64) -> f64 {
        let mut buf = vec![0.0; self.k];
        self.log_joint(x, &mut buf);
        buf.iter().map(|v| v.exp()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: GmmModel = serde_json::from_str(s)?;
        if m.k == 0 || m.weights.len() != m.k || m.means.len() != m.k || m.variances.len() != m.k {
            return Err(BroncoError::format("k", "component arrays do not match k"));
        }
        Ok(m)
    }
}

/// Model plus the log-likelihood after every EM iteration.
#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihoods: Vec<f64>,
}

pub fn fit_gmm(intensities: &[f64], params: &GmmParams) -> Result<GmmModel> {
    fit_gmm_traced(intensities, params).map(|f| f.model)
}

struct Stats {
    ll: f64,
    n: Vec<f64>,
    sum_d: Vec<f64>,
    sum_d2: Vec<f64>,
}

fn e_step(values: &[f64], model: &GmmModel) -> Stats {
    let k = model.k;
    let partials: Vec<Stats> = values
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut s = Stats {
                ll: 0.0,
                n: vec![0.0; k],
                sum_d: vec![0.0; k],
                sum_d2: vec![0.0; k],
            };
            let mut lj = vec![0.0; k];
            for &x in chunk {
                model.log_joint(x, &mut lj);
                let m = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + lj.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                s.ll += lse;
                for j in 0..k {
                    let r = (lj[j] - lse).exp();
                    let d = x - model.means[j];
                    s.n[j] += r;
                    s.sum_d[j] += r * d;
                    s.sum_d2[j] += r * d * d;
                }
            }
            s
        })
        .collect();
    let mut total = Stats {
        ll: 0.0,
        n: vec![0.0; k],
        sum_d: vec![0.0; k],
        sum_d2: vec![0.0; k],
    };
    for p in partials {
        total.ll += p.ll;
        for j in 0..k {
            total.n[j] += p.n[j];
            total.sum_d[j] += p.sum_d[j];
            total.sum_d2[j] += p.sum_d2[j];
        }
    }
    total
}

fn initial_model(sorted: &[f64], params: &GmmParams) -> GmmModel {
    let k = params.k;
    let n = sorted.len();
    let mut means = Vec::with_capacity(k);
    let mut within = 0.0;
    for j in 0..k {
        let chunk = &sorted[j * n / k..(j + 1) * n / k];
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        within += chunk.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        means.push(mean);
    }
    let pooled = (within / n as f64).max(params.variance_floor);
    GmmModel {
        k,
        weights: vec![1.0 / k as f64; k],
        means,
        variances: vec![pooled; k],
        converged: false,
        log_likelihood: f64::NEG_INFINITY,
        iterations: 0,
        seed: params.seed,
    }
}

/// Same pooled variance, means at evenly spaced quantiles from 1% to 99%.
fn spread_model(sorted: &[f64], chunked: &GmmModel) -> GmmModel {
    let k = chunked.k;
    let n = sorted.len();
    let means = (0..k)
        .map(|j| {
            let q = 0.01 + 0.98 * j as f64 / (k - 1) as f64;
            sorted[((q * (n - 1) as f64).round() as usize).min(n - 1)]
        })
        .collect();
    GmmModel {
        means,
        ..chunked.clone()
    }
}

fn run_em(values: &[f64], mut model: GmmModel, params: &GmmParams) -> (GmmModel, Vec<f64>) {
    let k = model.k;
    let n = values.len() as f64;
    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iterations {
        let s = e_step(values, &model);
        trace.push(s.ll);
        if iterations > 0 && (s.ll - prev_ll).abs() < params.tolerance * s.ll.abs() {
            converged = true;
            model.log_likelihood = s.ll;
            break;
        }
        prev_ll = s.ll;
        for j in 0..k {
            if s.n[j] <= f64::MIN_POSITIVE {
                model.weights[j] = 0.0;
                continue;
            }
            let shift = s.sum_d[j] / s.n[j];
            model.weights[j] = s.n[j] / n;
            model.means[j] += shift;
            model.variances[j] = (s.sum_d2[j] / s.n[j] - shift * shift).max(params.variance_floor);
        }
        iterations += 1;
    }
    if !converged {
        model.log_likelihood = e_step(values, &model).ll;
        trace.push(model.log_likelihood);
    }
    model.converged = converged;
    model.iterations = iterations;
    (model, trace)
}

/// Fit by expectation-maximization from quantile initialization.
pub fn fit_gmm_traced(intensities: &[f64], params: &GmmParams) -> Result<GmmFit> {
    let k = params.k;
    if k == 0 {
        return Err(BroncoError::param("k must be >= 1"));
    }
    if intensities.len() < 10 * k {
        return Err(BroncoError::param(format!(
            "need at least {} samples for k = {k}, got {}",
            10 * k,
            intensities.len()
        )));
    }
    if intensities.iter().any(|v| !v.is_finite()) {
        return Err(BroncoError::param("intensities must be finite"));
    }
    let first = intensities[0];
    if intensities.iter().all(|&v| v == first) {
        return Err(BroncoError::Degenerate("all intensities are identical".into()));
    }

    let mut values: Vec<f64> = if intensities.len() > params.max_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut idx = sample(&mut rng, intensities.len(), params.max_samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| intensities[i]).collect()
    } else {
        intensities.to_vec()
    };
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let start = initial_model(&sorted, params);
    let spread = (params.spread_start && k > 1).then(|| spread_model(&sorted, &start));
    drop(sorted);
    values.shrink_to_fit();

    let (mut model, mut trace) = run_em(&values, start, params);
    if let Some(spread) = spread {
        let (alt, alt_trace) = run_em(&values, spread, params);
        if alt.log_likelihood > model.log_likelihood {
            model = alt;
            trace = alt_trace;
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| model.means[a].total_cmp(&model.means[b]));
    model.weights = order.iter().map(|&j| model.weights[j]).collect();
    model.means = order.iter().map(|&j| model.means[j]).collect();
    model.variances = order.iter().map(|&j| model.variances[j]).collect();
    let wsum: f64 = model.weights.iter().sum();
    for w in &mut model.weights {
        *w /= wsum;
    }
    Ok(GmmFit {
        model,
        log_likelihoods: trace,
    })
}

/// Intensities of the voxels inside `mask`, in scan order.
pub fn masked_intensities(ct: &ScalarVolume, mask: &BinaryMask) -> Result<Vec<f64>> {
    ct.geometry().require_same(mask.geometry(), "mask")?;
    Ok(ct
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect())
}

/// Label in-mask voxels with their most likely component (1..=k).
pub fn assign_classes(model: &GmmModel, ct: &ScalarVolume, mask: &BinaryMask) -> Result<LabelMap> {
    ct.geometry().require_same(mask.geometry(), "mask")?;
    let data: Vec<u32> = ct
        .data()
        .par_iter()
        .zip(mask.data().par_iter())
        .map(|(&v, &m)| if m { model.classify(v) } else { 0 })
        .collect();
    Grid::from_vec(*ct.geometry(), data)
}

/// Outcome of the knee-based component selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KneeSelection {
    /// Component voxel counts, descending.
    pub sorted_counts: Vec<usize>,
    /// Index of the knee in `sorted_counts`; equal to its length when every
    /// component is kept (all counts equal).
    pub knee_index: usize,
    pub kept_labels: Vec<u32>,
}

impl KneeSelection {
    /// Count at the knee (0 when everything is kept).
    pub fn knee_count(&self) -> usize {
        self.sorted_counts.get(self.knee_index).copied().unwrap_or(0)
    }
}

/// Knee of a descending curve: the point farthest from the chord joining
/// its first and last points, on axes scaled to `[0, 1]`.
pub fn find_knee(sorted_counts: &[usize]) -> usize {
    let m = sorted_counts.len();
    if m == 0 || sorted_counts.iter().all(|&c| c == sorted_counts[0]) {
        return m;
    }
    let top = sorted_counts[0] as f64;
    let xs = |i: usize| i as f64 / (m - 1) as f64;
    let ys = |i: usize| sorted_counts[i] as f64 / top;
    let (x0, y0, x1, y1) = (0.0f64, ys(0), 1.0f64, ys(m - 1));
    let norm = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
    let mut best = m - 1;
    let mut best_d = 0.0;
    for i in 0..m {
        let d = ((y1 - y0) * xs(i) - (x1 - x0) * ys(i) + x1 * y0 - y1 * x0).abs() / norm;
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Keep the components of the brightest class that lie above the knee of
/// the sorted size curve.
pub fn extract_bundle(labels: &LabelMap, bundle_class: u32) -> Result<(BinaryMask, KneeSelection)> {
    let class_mask = labels.mask_of(bundle_class);
    let cc = connected_components(&class_mask, Connectivity::TwentySix);
    if cc.is_empty() {
        return Err(BroncoError::NoBundleVoxels(bundle_class));
    }
    let knee_index = find_knee(&cc.sizes);
    let knee_count = cc.sizes.get(knee_index).copied().unwrap_or(0);
    let kept_labels: Vec<u32> = (1..=cc.len() as u32)
        .filter(|&l| cc.sizes[l as usize - 1] > knee_count)
        .collect();
    let mask = cc.mask_of_labels(&kept_labels);
    Ok((
        mask,
        KneeSelection {
            sorted_counts: cc.sizes.clone(),
            knee_index,
            kept_labels,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(weights: &[f64], means: &[f64], vars: &[f64]) -> GmmModel {
        GmmModel {
            k: weights.len(),
            weights: weights.to_vec(),
            means: means.to_vec(),
            variances: vars.to_vec(),
            converged: true,
            log_likelihood: 0.0,
            iterations: 0,
            seed: 0,
        }
    }

    #[test]
    fn too_few_samples() {
        let p = GmmParams::default();
        assert!(matches!(fit_gmm(&[1.0; 29], &p), Err(BroncoError::Parameter(_))));
    }

    #[test]
    fn constant_data_is_degenerate() {
        let p = GmmParams {
            k: 1,
            ..Default::default()
        };
        assert!(matches!(fit_gmm(&[5.0; 100], &p), Err(BroncoError::Degenerate(_))));
    }

    #[test]
    fn classify_at_component_mean() {
        let m = model(&[0.3, 0.4, 0.3], &[-900.0, -600.0, -100.0], &[900.0; 3]);
        assert_eq!(m.classify(-600.0), 2);
    }

    #[test]
    fn tie_goes_to_lower_class() {
        let m = model(&[0.5, 0.5], &[-10.0, 10.0], &[4.0, 4.0]);
        assert_eq!(m.classify(0.0), 1);
    }

    #[test]
    fn knee_of_single_component_keeps_it() {
        assert_eq!(find_knee(&[42]), 1);
        assert_eq!(find_knee(&[7, 7, 7]), 3);
    }

    #[test]
    fn json_round_trip() {
        let m = model(&[0.25, 0.75], &[-812.125, -3.0], &[17.5, 1e-2]);
        assert_eq!(GmmModel::from_json(&m.to_json().unwrap()).unwrap(), m);
    }
}
