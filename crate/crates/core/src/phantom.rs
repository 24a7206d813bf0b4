//! Synthetic chest CT phantoms with exact ground truth.
//!
//! A phantom is an optional elliptic-cylinder body, ellipsoidal lungs, and
//! a tree of capsule segments (vessels, or airways with a lumen and a wall),
//! plus optional defects. All geometry is given in mm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{BroncoError, Result};
use crate::grid::{BinaryMask, Geometry, Grid, LabelMap, ScalarVolume};

/// Tissue labels of the ground-truth map.
pub mod tissue {
    pub const EXTERIOR: u32 = 0;
    pub const BODY: u32 = 1;
    pub const PARENCHYMA: u32 = 2;
    pub const AIR: u32 = 3;
    /// Vessels and airway walls.
    pub const DENSE: u32 = 4;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Vessel,
    Airway,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: [f64; 3],
    pub end: [f64; 3],
    /// Outer radius; for airways the lumen radius is `radius - wall`.
    pub radius: f64,
    #[serde(default)]
    pub parent: Option<usize>,
    pub kind: SegmentKind,
    #[serde(default)]
    pub wall: f64,
}

impl Segment {
    pub fn vessel(start: [f64; 3], end: [f64; 3], radius: f64, parent: Option<usize>) -> Self {
        Segment {
            start,
            end,
            radius,
            parent,
            kind: SegmentKind::Vessel,
            wall: 0.0,
        }
    }

    pub fn airway(start: [f64; 3], end: [f64; 3], radius: f64, wall: f64, parent: Option<usize>) -> Self {
        Segment {
            start,
            end,
            radius,
            parent,
            kind: SegmentKind::Airway,
            wall,
        }
    }

    pub fn length(&self) -> f64 {
        dist(self.start, self.end)
    }

    /// Distance (mm) from `p` to the segment axis.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        point_segment_distance(p, self.start, self.end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|k| ((p[k] - self.center[k]) / self.radii[k]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Elliptic cylinder along `z` spanning the whole volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub air: f64,
    pub parenchyma: f64,
    pub dense: f64,
    pub body: f64,
    pub exterior: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            air: -1000.0,
            parenchyma: -850.0,
            dense: -50.0,
            body: 40.0,
            exterior: -1000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Defect {
    /// Sphere of air.
    AirPocket { center: [f64; 3], radius: f64 },
    /// Sphere turned to air around the point at fraction `t` of an airway
    /// segment, offset by `offset` mm from the axis.
    WallHole {
        segment: usize,
        t: f64,
        offset: [f64; 3],
        radius: f64,
    },
    /// Sphere of dense tissue (nodule or consolidation-like blob).
    Blob { center: [f64; 3], radius: f64 },
    /// Small dense clusters of 1 to 3 voxels scattered in the parenchyma.
    Specks { count: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    #[serde(default)]
    pub body: Option<Body>,
    #[serde(default)]
    pub lungs: Vec<Ellipsoid>,
    #[serde(default)]
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub intensities: Intensities,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub defects: Vec<Defect>,
    #[serde(default)]
    pub seed: u64,
}

/// Analytic centerline graph: segment end points and the segments between
/// them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthGraph {
    pub nodes: Vec<[f64; 3]>,
    /// `(node_a, node_b, segment index)`.
    pub edges: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct PhantomTruth {
    pub tissue: LabelMap,
    pub lung: BinaryMask,
    /// Segment index + 1 for every voxel inside some segment capsule.
    pub branch_labels: LabelMap,
    /// Airway lumen voxels (trachea included, defects excluded).
    pub airway_lumen: BinaryMask,
    pub graph: TruthGraph,
}

impl PhantomTruth {
    pub fn mask_of(&self, label: u32) -> BinaryMask {
        self.tissue.mask_of(label)
    }
}

pub struct Phantom {
    pub ct: ScalarVolume,
    pub lung: BinaryMask,
    pub truth: PhantomTruth,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]])
}

impl PhantomSpec {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, self.origin)
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.geometry()?;
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.radius > 0.0) {
                return Err(BroncoError::Spec(format!("segment {i}: radius must be > 0")));
            }
            if s.kind == SegmentKind::Airway && !(s.wall >= 0.0 && s.wall < s.radius) {
                return Err(BroncoError::Spec(format!("segment {i}: wall must be in [0, radius)")));
            }
            if let Some(p) = s.parent {
                let parent = self
                    .segments
                    .get(p)
                    .filter(|_| p != i)
                    .ok_or_else(|| BroncoError::Spec(format!("segment {i}: invalid parent {p}")))?;
                if s.radius > parent.radius + 1e-9 {
                    return Err(BroncoError::Spec(format!(
                        "segment {i}: radius {} exceeds parent radius {}",
                        s.radius, parent.radius
                    )));
                }
            }
            for end in [s.start, s.end] {
                let v = g.to_voxel(end);
                for k in 0..3 {
                    let r = s.radius / g.spacing[k];
                    if v[k] - r < 2.0 || v[k] + r > (g.dims[k] - 3) as f64 {
                        return Err(BroncoError::Spec(format!(
                            "segment {i} does not fit inside the volume with a 2-voxel margin"
                        )));
                    }
                }
            }
        }
        for d in &self.defects {
            if let Defect::WallHole { segment, .. } = d {
                if self.segments.get(*segment).map(|s| s.kind) != Some(SegmentKind::Airway) {
                    return Err(BroncoError::Spec(format!("wall hole on non-airway segment {segment}")));
                }
            }
        }
        Ok(())
    }

    /// Distance (mm) from `p` to the nearest segment axis.
    pub fn centerline_distance(&self, p: [f64; 3]) -> f64 {
        self.segments
            .iter()
            .map(|s| s.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn truth_graph(&self) -> TruthGraph {
        let mut nodes: Vec<[f64; 3]> = Vec::new();
        let node_for = |p: [f64; 3], nodes: &mut Vec<[f64; 3]>| -> usize {
            if let Some(i) = nodes.iter().position(|&q| dist(p, q) < 1e-6) {
                i
            } else {
                nodes.push(p);
                nodes.len() - 1
            }
        };
        let edges = self
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let a = node_for(s.start, &mut nodes);
                let b = node_for(s.end, &mut nodes);
                (a, b, i)
            })
            .collect();
        TruthGraph { nodes, edges }
    }

    /// A random bifurcating vessel tree with `branches` segments (odd, 3 to
    /// 7 are typical) in an otherwise empty parenchyma block. Branches do not
    /// touch except at their shared junctions.
    pub fn random_tree(seed: u64, branches: usize, dims: [usize; 3]) -> Result<PhantomSpec> {
        PhantomSpec::random_tree_with(seed, branches, dims, &TreeParams::default())
    }

    /// [`PhantomSpec::random_tree`] with explicit shape ranges.
    pub fn random_tree_with(seed: u64, branches: usize, dims: [usize; 3], tp: &TreeParams) -> Result<PhantomSpec> {
        if branches == 0 || branches % 2 == 0 {
            return Err(BroncoError::Spec("a bifurcating tree has an odd branch count".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ext = dims.map(|d| d as f64);
        for _attempt in 0..2000 {
            let r0: f64 = rng.random_range(tp.root_radius.0..=tp.root_radius.1);
            let len0 = rng.random_range(tp.length_factor.0..tp.length_factor.1) * r0;
            let start = [ext[0] / 2.0, ext[1] / 2.0, ext[2] - 10.0];
            let dir0 = unit([
                rng.random_range(-tp.root_tilt..=tp.root_tilt),
                rng.random_range(-tp.root_tilt..=tp.root_tilt),
                -1.0,
            ]);
            let mut segs = vec![Segment::vessel(start, add(start, scale(dir0, len0)), r0, None)];
            let mut open = vec![0usize];
            let mut ok = true;
            while segs.len() < branches {
                let p = open.remove(0);
                let parent = segs[p].clone();
                let pdir = unit(sub(parent.end, parent.start));
                let perp = unit(cross(
                    pdir,
                    unit([
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]),
                ));
                let angle: f64 = rng.random_range(tp.branch_angle.0..tp.branch_angle.1);
                for sign in [1.0, -1.0] {
                    let r = (parent.radius * rng.random_range(0.75..1.0)).max(tp.min_radius);
                    let len = rng.random_range(tp.length_factor.0..tp.length_factor.1) * r.max(3.0);
                    let d = unit(add(scale(pdir, angle.cos()), scale(perp, sign * angle.sin())));
                    segs.push(Segment::vessel(parent.end, add(parent.end, scale(d, len)), r, Some(p)));
                    open.push(segs.len() - 1);
                }
            }
            // Non-adjacent segments must stay clearly apart.
            for i in 0..segs.len() {
                for j in i + 1..segs.len() {
                    let (a, b) = (&segs[i], &segs[j]);
                    let adjacent =
                        a.parent == Some(j) || b.parent == Some(i) || (a.parent.is_some() && a.parent == b.parent);
                    if adjacent {
                        continue;
                    }
                    if segment_distance(a, b) < a.radius + b.radius + 4.0 {
                        ok = false;
                    }
                }
            }
            let spec = PhantomSpec {
                dims,
                spacing: [1.0; 3],
                origin: [0.0; 3],
                body: None,
                lungs: vec![Ellipsoid {
                    center: [ext[0] / 2.0, ext[1] / 2.0, ext[2] / 2.0],
                    radii: [ext[0], ext[1], ext[2]],
                }],
                segments: segs,
                intensities: Intensities::default(),
                noise_std: 0.0,
                defects: vec![],
                seed,
            };
            if ok && spec.validate().is_ok() {
                return Ok(spec);
            }
        }
        Err(BroncoError::Spec("could not place a random tree in the volume".into()))
    }
}

/// Knobs of [`PhantomSpec::chest`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChestParams {
    pub dims: [usize; 3],
    /// Anatomy size relative to the smallest grid extent; about 0.8 to 1.0.
    pub scale: f64,
    /// Relative random perturbation of vessel radii.
    pub jitter: f64,
    pub noise_std: f64,
    /// Add a dense blob attached to the right vessel tree.
    pub blob: bool,
    pub seed: u64,
}

impl Default for ChestParams {
    fn default() -> Self {
        ChestParams {
            dims: [128, 128, 128],
            scale: 1.0,
            jitter: 0.08,
            noise_std: 20.0,
            blob: false,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// A chest: body, two lungs, a walled airway tree entering through the
    /// mediastinum and a vessel tree running beside each main bronchus.
    pub fn chest(p: &ChestParams) -> Result<PhantomSpec> {
        let [nx, ny, nz] = p.dims.map(|d| d as f64);
        let u = nx.min(ny).min(nz) * p.scale;
        let (cx, cy, cz) = (nx / 2.0, ny / 2.0, nz / 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut jit = |r: f64| r * (1.0 + p.jitter * rng.random_range(-1.0..=1.0));

        let tr = 0.047 * u;
        let top = (cz + 0.40 * u).min(nz - 4.0 - tr);
        let carina = [cx, cy, cz + 0.08 * u];
        let mut segments = vec![Segment::airway([cx, cy, top], carina, tr, 2.0, None)];
        let mut vessel_roots = Vec::new();
        for side in [-1.0, 1.0] {
            let main_end = [cx + side * 0.2 * u, cy, cz - 0.04 * u];
            segments.push(Segment::airway(carina, main_end, 0.036 * u, 1.8, Some(0)));
            let m = segments.len() - 1;
            segments.push(Segment::airway(
                main_end,
                [cx + side * 0.27 * u, cy + 0.02 * u, cz - 0.24 * u],
                0.03 * u,
                1.8,
                Some(m),
            ));
            segments.push(Segment::airway(
                main_end,
                [cx + side * 0.18 * u, cy + 0.12 * u, cz - 0.2 * u],
                0.03 * u,
                1.8,
                Some(m),
            ));
            vessel_roots.push(side);
        }
        let dy = -0.085 * u;
        for side in vessel_roots {
            let root_r = jit(0.034 * u);
            let start = [cx + side * 0.07 * u, cy + dy, cz + 0.04 * u];
            let end = [cx + side * 0.2 * u, cy + dy, cz - 0.04 * u];
            segments.push(Segment::vessel(start, end, root_r, None));
            let v = segments.len() - 1;
            for (ex, ey, ez) in [(0.29, -0.06, -0.26), (0.2, 0.05, -0.28), (0.26, 0.0, 0.12)] {
                let r = jit(0.027 * u).min(root_r);
                segments.push(Segment::vessel(
                    end,
                    [cx + side * ex * u, cy + dy + ey * u, cz + ez * u],
                    r,
                    Some(v),
                ));
            }
        }
        let mut defects = Vec::new();
        if p.blob {
            defects.push(Defect::Blob {
                center: [cx + 0.24 * u, cy + dy - 0.03 * u, cz - 0.12 * u],
                radius: 0.095 * u,
            });
        }
        let spec = PhantomSpec {
            dims: p.dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            body: Some(Body {
                center: [cx, cy],
                semi_axes: [0.47 * nx, 0.42 * ny],
            }),
            lungs: [-1.0, 1.0]
                .iter()
                .map(|side| Ellipsoid {
                    center: [cx + side * 0.22 * u, cy, cz - 0.05 * u],
                    radii: [0.17 * u, 0.3 * u, 0.38 * u],
                })
                .collect(),
            segments,
            intensities: Intensities::default(),
            noise_std: p.noise_std,
            defects,
            seed: p.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A five-segment walled airway tree with a long trachea inside one
    /// lung block. With `hole`, a wall hole on segment 2 opens into an air
    /// pocket centered at [`AIRWAY_POCKET`].
    pub fn airway_tree(hole: bool, noise_std: f64, seed: u64) -> PhantomSpec {
        let mut spec = PhantomSpec {
            dims: [64, 64, 100],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            body: None,
            lungs: vec![Ellipsoid {
                center: [32.0, 32.0, 50.0],
                radii: [30.0, 30.0, 48.0],
            }],
            segments: vec![
                Segment::airway([32.0, 32.0, 90.0], [32.0, 32.0, 50.0], 5.0, 1.5, None),
                Segment::airway([32.0, 32.0, 50.0], [20.0, 32.0, 36.0], 4.0, 1.2, Some(0)),
                Segment::airway([32.0, 32.0, 50.0], [44.0, 32.0, 36.0], 4.0, 1.2, Some(0)),
                Segment::airway([20.0, 32.0, 36.0], [12.0, 28.0, 22.0], 3.5, 1.0, Some(1)),
                Segment::airway([20.0, 32.0, 36.0], [24.0, 38.0, 22.0], 3.5, 1.0, Some(1)),
            ],
            intensities: Intensities::default(),
            noise_std,
            defects: vec![],
            seed,
        };
        if hole {
            spec.defects = vec![
                Defect::AirPocket {
                    center: AIRWAY_POCKET.0,
                    radius: AIRWAY_POCKET.1,
                },
                Defect::WallHole {
                    segment: 2,
                    t: 0.5,
                    offset: [2.4, -3.2, 0.0],
                    radius: 2.5,
                },
            ];
        }
        spec
    }
}

/// Center (mm) and radius of the air pocket of [`PhantomSpec::airway_tree`].
pub const AIRWAY_POCKET: ([f64; 3], f64) = ([45.0, 20.0, 43.0], 7.0);

/// Shape ranges of [`PhantomSpec::random_tree_with`]; lengths are in
/// multiples of the segment radius, angles in radians from the parent axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub root_radius: (f64, f64),
    pub min_radius: f64,
    pub length_factor: (f64, f64),
    pub branch_angle: (f64, f64),
    /// Largest lateral component of the (unnormalized) root direction.
    pub root_tilt: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            root_radius: (3.0, 4.0),
            min_radius: 2.0,
            length_factor: (5.5, 7.0),
            branch_angle: (0.55, 0.85),
            root_tilt: 0.2,
        }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = dist(a, [0.0; 3]);
    scale(a, 1.0 / n)
}

/// Approximate distance between two segments by dense sampling.
fn segment_distance(a: &Segment, b: &Segment) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=64 {
        let t = i as f64 / 64.0;
        let p = add(a.start, scale(sub(a.end, a.start), t));
        best = best.min(b.distance(p));
    }
    best
}

/// Voxel index range covering `[lo, hi]` (mm) along axis `k`.
fn span(g: &Geometry, k: usize, lo: f64, hi: f64) -> std::ops::Range<usize> {
    let a = ((lo - g.origin[k]) / g.spacing[k]).floor().max(0.0) as usize;
    let b = (((hi - g.origin[k]) / g.spacing[k]).ceil() + 1.0).max(0.0) as usize;
    a.min(g.dims[k])..b.min(g.dims[k])
}

/// Visit the voxels whose centers lie within `radius` of segment `a`-`b`.
fn for_capsule(g: &Geometry, a: [f64; 3], b: [f64; 3], radius: f64, mut f: impl FnMut(usize, f64)) {
    let rx = span(g, 0, a[0].min(b[0]) - radius, a[0].max(b[0]) + radius);
    let ry = span(g, 1, a[1].min(b[1]) - radius, a[1].max(b[1]) + radius);
    let rz = span(g, 2, a[2].min(b[2]) - radius, a[2].max(b[2]) + radius);
    for z in rz {
        for y in ry.clone() {
            for x in rx.clone() {
                let p = g.to_mm([x as f64, y as f64, z as f64]);
                let d = point_segment_distance(p, a, b);
                if d <= radius {
                    f(g.index(x, y, z), d);
                }
            }
        }
    }
}

/// Rasterize a phantom.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let g = spec.geometry()?;
    let n = g.len();
    let mut tissue = vec![tissue::EXTERIOR; n];
    let mut lung = vec![false; n];

    for i in 0..n {
        let c = g.coords(i);
        let p = g.to_mm([c[0] as f64, c[1] as f64, c[2] as f64]);
        tissue[i] = match &spec.body {
            None => tissue::BODY,
            Some(b) => {
                let e =
                    ((p[0] - b.center[0]) / b.semi_axes[0]).powi(2) + ((p[1] - b.center[1]) / b.semi_axes[1]).powi(2);
                if e <= 1.0 {
                    tissue::BODY
                } else {
                    tissue::EXTERIOR
                }
            }
        };
        if spec.lungs.iter().any(|l| l.contains(p)) {
            lung[i] = true;
            tissue[i] = tissue::PARENCHYMA;
        }
    }

    // Per voxel: nearest segment (by axis distance) and tissue hits.
    let mut nearest = vec![(f64::INFINITY, 0u32); n];
    let mut vessel = vec![false; n];
    let mut wall = vec![false; n];
    let mut lumen = vec![false; n];
    for (si, s) in spec.segments.iter().enumerate() {
        for_capsule(&g, s.start, s.end, s.radius, |i, d| {
            if d < nearest[i].0 {
                nearest[i] = (d, si as u32 + 1);
            }
            match s.kind {
                SegmentKind::Vessel => vessel[i] = true,
                SegmentKind::Airway => {
                    if d <= s.radius - s.wall {
                        lumen[i] = true;
                    } else {
                        wall[i] = true;
                    }
                }
            }
        });
    }
    for i in 0..n {
        if vessel[i] && lumen[i] {
            let c = g.coords(i);
            return Err(BroncoError::Spec(format!(
                "vessel overlaps an airway lumen at voxel {c:?}"
            )));
        }
        if lumen[i] {
            tissue[i] = tissue::AIR;
        } else if vessel[i] || wall[i] {
            tissue[i] = tissue::DENSE;
        }
    }
    let airway_lumen = lumen.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for d in &spec.defects {
        match d {
            Defect::AirPocket { center, radius } => {
                for_capsule(&g, *center, *center, *radius, |i, _| tissue[i] = tissue::AIR);
            }
            Defect::WallHole {
                segment,
                t,
                offset,
                radius,
            } => {
                let s = &spec.segments[*segment];
                let c = add(add(s.start, scale(sub(s.end, s.start), *t)), *offset);
                for_capsule(&g, c, c, *radius, |i, _| {
                    if tissue[i] != tissue::EXTERIOR {
                        tissue[i] = tissue::AIR
                    }
                });
            }
            Defect::Blob { center, radius } => {
                for_capsule(&g, *center, *center, *radius, |i, _| tissue[i] = tissue::DENSE);
            }
            Defect::Specks { count } => {
                let parenchyma: Vec<usize> = (0..n).filter(|&i| tissue[i] == tissue::PARENCHYMA).collect();
                if parenchyma.is_empty() {
                    continue;
                }
                let mut placed = 0;
                let mut tries = 0;
                while placed < *count && tries < 100 * count {
                    tries += 1;
                    let i = parenchyma[rng.random_range(0..parenchyma.len())];
                    let size = rng.random_range(1..=3usize);
                    // Keep specks isolated from other dense tissue.
                    let clear = (-2..=4i64).all(|dz| {
                        (-2..=2i64).all(|dy| {
                            (-2..=2i64).all(|dx| {
                                g.offset(i, [dx, dy, dz])
                                    .is_some_and(|j| tissue[j] == tissue::PARENCHYMA)
                            })
                        })
                    });
                    if !clear {
                        continue;
                    }
                    for k in 0..size {
                        if let Some(j) = g.offset(i, [0, 0, k as i64]) {
                            tissue[j] = tissue::DENSE;
                        }
                    }
                    placed += 1;
                }
            }
        }
    }

    let hu = &spec.intensities;
    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).map_err(|e| BroncoError::Spec(e.to_string()))?)
    } else {
        None
    };
    let ct: Vec<f64> = tissue
        .iter()
        .map(|&t| {
            let base = match t {
                tissue::EXTERIOR => hu.exterior,
                tissue::BODY => hu.body,
                tissue::PARENCHYMA => hu.parenchyma,
                tissue::AIR => hu.air,
                _ => hu.dense,
            };
            match &noise {
                Some(nd) => base + nd.sample(&mut rng),
                None => base,
            }
        })
        .collect();

    let lung_mask = Grid::from_vec(g, lung)?;
    let truth = PhantomTruth {
        tissue: Grid::from_vec(g, tissue)?,
        lung: lung_mask.clone(),
        branch_labels: Grid::from_vec(g, nearest.into_iter().map(|(_, l)| l).collect())?,
        airway_lumen: Grid::from_vec(g, airway_lumen)?,
        graph: spec.truth_graph(),
    };
    Ok(Phantom {
        ct: Grid::from_vec(g, ct)?,
        lung: lung_mask,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(dims: [usize; 3], segments: Vec<Segment>) -> PhantomSpec {
        PhantomSpec {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            body: None,
            lungs: vec![],
            segments,
            intensities: Intensities::default(),
            noise_std: 0.0,
            defects: vec![],
            seed: 1,
        }
    }

    #[test]
    fn single_vessel_matches_capsule_membership() {
        let s = Segment::vessel([10.0, 10.0, 5.0], [10.0, 10.0, 25.0], 3.0, None);
        let spec = block([21, 21, 31], vec![s.clone()]);
        let p = generate(&spec).unwrap();
        let dense = p.truth.mask_of(tissue::DENSE);
        let g = *dense.geometry();
        for i in 0..g.len() {
            let c = g.coords(i);
            let inside = s.distance([c[0] as f64, c[1] as f64, c[2] as f64]) <= 3.0;
            assert_eq!(dense.data()[i], inside);
        }
    }

    #[test]
    fn child_wider_than_parent_is_rejected() {
        let a = Segment::vessel([10.0, 10.0, 5.0], [10.0, 10.0, 15.0], 2.0, None);
        let b = Segment::vessel([10.0, 10.0, 15.0], [10.0, 10.0, 25.0], 3.0, Some(0));
        assert!(matches!(
            generate(&block([21, 21, 31], vec![a, b])),
            Err(BroncoError::Spec(_))
        ));
    }

    #[test]
    fn segment_outside_margin_is_rejected() {
        let a = Segment::vessel([1.0, 10.0, 5.0], [10.0, 10.0, 15.0], 2.0, None);
        assert!(generate(&block([21, 21, 31], vec![a])).is_err());
    }

    #[test]
    fn vessel_through_lumen_is_rejected() {
        let a = Segment::airway([10.0, 10.0, 5.0], [10.0, 10.0, 25.0], 4.0, 1.0, None);
        let b = Segment::vessel([4.0, 10.0, 15.0], [16.0, 10.0, 15.0], 1.0, None);
        assert!(matches!(
            generate(&block([21, 21, 31], vec![a, b])),
            Err(BroncoError::Spec(_))
        ));
    }

    #[test]
    fn noisy_generation_is_deterministic() {
        let mut spec = block([16, 16, 16], vec![]);
        spec.noise_std = 20.0;
        assert_eq!(generate(&spec).unwrap().ct, generate(&spec).unwrap().ct);
    }

    #[test]
    fn random_tree_is_valid() {
        for seed in 0..5 {
            let spec = PhantomSpec::random_tree(seed, 5, [96, 96, 96]).unwrap();
            assert_eq!(spec.segments.len(), 5);
            assert_eq!(spec.truth_graph().nodes.len(), 6);
        }
    }
}
