//! Synthetic CT phantoms with known bone labels.
//!
//! Geometry is given in normalized coordinates (`[0, 1]` per axis). Radii of
//! tubes and cylinders, and shell thickness, are fractions of the smallest
//! extent. Randomness comes from one ChaCha8 stream seeded with the phantom
//! seed: jitter first, then one bone draw per bone voxel and one noise draw
//! per voxel, in scan order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// HU floor of the default threshold; phantom bone must stay at or above it.
const BONE_FLOOR_HU: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    /// Solid ellipsoid, or a shell of the given thickness.
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        #[serde(default)]
        shell: Option<f64>,
        class: u16,
    },
    /// Polyline with a circular cross-section.
    Tube { points: Vec<[f64; 3]>, radius: f64, class: u16 },
    /// `count` z-aligned discs evenly spread over `z_range`, separated by gaps.
    CylinderStack {
        center: [f64; 2],
        z_range: [f64; 2],
        count: usize,
        radius: f64,
        /// Fraction of each slot left empty.
        gap: f64,
        class: u16,
    },
}

impl Primitive {
    fn class(&self) -> u16 {
        match self {
            Primitive::Ellipsoid { class, .. } | Primitive::Tube { class, .. } | Primitive::CylinderStack { class, .. } => {
                *class
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// `[X, Y, Z]`.
    pub shape: [usize; 3],
    pub classes: usize,
    /// Soft-tissue ellipsoid; everything outside is air.
    pub body_center: [f64; 3],
    pub body_radii: [f64; 3],
    /// Rasterized in order; later primitives overwrite earlier ones.
    pub primitives: Vec<Primitive>,
    pub bone_mean: f64,
    pub bone_std: f64,
    pub bone_min: f64,
    pub bone_max: f64,
    pub soft_tissue_hu: f64,
    pub air_hu: f64,
    /// Standard deviation of additive noise, clamped to ±3 std.
    pub noise_std: f64,
    /// Maximum fraction of bone voxels.
    pub occupancy_ceiling: f64,
    /// Relative magnitude of per-phantom shifts and radius changes.
    pub jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::torso([64, 64, 64])
    }
}

fn rib(side: f64, z: f64) -> Primitive {
    // Elliptical arc from beside the spine round to the front, dropping slightly.
    let (cx, cy, rx, ry) = (0.5, 0.52, 0.34, 0.28);
    let (start, end) = (70f64.to_radians(), (-50f64).to_radians());
    let segments = 6;
    let points = (0..=segments)
        .map(|i| {
            let t = i as f64 / segments as f64;
            let theta = start + (end - start) * t;
            [cx + side * rx * theta.cos(), cy + ry * theta.sin(), z - 0.05 * t]
        })
        .collect();
    Primitive::Tube { points, radius: 0.025, class: 1 }
}

impl PhantomSpec {
    /// Ribs (class 1), stacked vertebrae (class 2) and a pelvic shell (class 3) inside a body.
    pub fn torso(shape: [usize; 3]) -> Self {
        let mut primitives =
            vec![Primitive::Ellipsoid { center: [0.5, 0.5, 0.16], radii: [0.30, 0.24, 0.13], shell: Some(0.035), class: 3 }];
        for z in [0.58, 0.68, 0.78, 0.88] {
            primitives.push(rib(1.0, z));
            primitives.push(rib(-1.0, z));
        }
        primitives.push(Primitive::CylinderStack {
            center: [0.5, 0.72],
            z_range: [0.05, 0.95],
            count: 9,
            radius: 0.075,
            gap: 0.25,
            class: 2,
        });
        Self {
            shape,
            classes: 4,
            body_center: [0.5, 0.5, 0.5],
            body_radii: [0.46, 0.40, 0.56],
            primitives,
            bone_mean: 700.0,
            bone_std: 150.0,
            bone_min: 250.0,
            bone_max: 1500.0,
            soft_tissue_hu: 40.0,
            air_hu: -1000.0,
            noise_std: 10.0,
            occupancy_ceiling: 0.05,
            jitter: 0.06,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.shape.contains(&0) {
            return bad(format!("phantom shape {:?} has an empty axis", self.shape));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if let Some(p) = self.primitives.iter().find(|p| p.class() == 0 || usize::from(p.class()) >= self.classes) {
            return Err(Error::LabelOutOfRange { label: p.class(), classes: self.classes });
        }
        if !(self.bone_std >= 0.0 && self.noise_std >= 0.0 && self.bone_min <= self.bone_max) {
            return bad("bone intensity distribution is invalid".into());
        }
        if self.bone_min - 3.0 * self.noise_std < BONE_FLOOR_HU {
            return bad(format!(
                "bone may fall below {BONE_FLOOR_HU} HU: minimum {} with noise std {}",
                self.bone_min, self.noise_std
            ));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad(format!("jitter {} outside [0, 1)", self.jitter));
        }
        if self.primitives.iter().any(|p| matches!(p, Primitive::CylinderStack { count: 0, .. })) {
            return bad("cylinder stack needs at least one cylinder".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub hu: Volume<f32>,
    pub labels: Volume<u16>,
}

impl LabeledVolume {
    /// Fraction of voxels carrying a foreground label.
    pub fn occupancy(&self) -> f64 {
        self.labels.data.iter().filter(|&&l| l > 0).count() as f64 / self.labels.len() as f64
    }
}

/// Voxel-space geometry after jitter.
struct Raster {
    shape: [usize; 3],
    unit: f64,
}

impl Raster {
    fn to_voxels(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|d| p[d] * self.shape[d] as f64)
    }

    /// Inclusive voxel index ranges covering `[lo, hi]` in voxel space.
    fn bbox(&self, lo: [f64; 3], hi: [f64; 3]) -> [std::ops::Range<usize>; 3] {
        [0, 1, 2].map(|d| {
            let a = (lo[d] - 0.5).floor().max(0.0) as usize;
            let b = ((hi[d] + 0.5).ceil().max(0.0) as usize).min(self.shape[d]);
            a.min(b)..b
        })
    }

    fn paint(&self, labels: &mut Volume<u16>, class: u16, lo: [f64; 3], hi: [f64; 3], inside: impl Fn([f64; 3]) -> bool) {
        let [rx, ry, rz] = self.bbox(lo, hi);
        for z in rz {
            for y in ry.clone() {
                for x in rx.clone() {
                    if inside([x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]) {
                        labels.set(x, y, z, class);
                    }
                }
            }
        }
    }
}

fn ellipsoid_q(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|d| ((p[d] - c[d]) / r[d]).powi(2)).sum()
}

fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 { (ap.iter().zip(&ab).map(|(u, v)| u * v).sum::<f64>() / len2).clamp(0.0, 1.0) } else { 0.0 };
    (0..3).map(|d| (ap[d] - t * ab[d]).powi(2)).sum::<f64>().sqrt()
}

fn rasterize(raster: &Raster, prim: &Primitive, labels: &mut Volume<u16>) {
    match prim {
        Primitive::Ellipsoid { center, radii, shell, class } => {
            let c = raster.to_voxels(*center);
            let r = raster.to_voxels(*radii);
            let inner = shell.map(|t| r.map(|v| (v - t * raster.unit).max(1e-9)));
            let lo = [0, 1, 2].map(|d| c[d] - r[d]);
            let hi = [0, 1, 2].map(|d| c[d] + r[d]);
            raster.paint(labels, *class, lo, hi, |p| {
                ellipsoid_q(p, c, r) <= 1.0 && inner.is_none_or(|ir| ellipsoid_q(p, c, ir) > 1.0)
            });
        }
        Primitive::Tube { points, radius, class } => {
            let rad = radius * raster.unit;
            for seg in points.windows(2) {
                let (a, b) = (raster.to_voxels(seg[0]), raster.to_voxels(seg[1]));
                let lo = [0, 1, 2].map(|d| a[d].min(b[d]) - rad);
                let hi = [0, 1, 2].map(|d| a[d].max(b[d]) + rad);
                raster.paint(labels, *class, lo, hi, |p| segment_distance(p, a, b) <= rad);
            }
        }
        Primitive::CylinderStack { center, z_range, count, radius, gap, class } => {
            let c = raster.to_voxels([center[0], center[1], 0.0]);
            let rad = radius * raster.unit;
            let zs = z_range.map(|z| z * raster.shape[2] as f64);
            let slot = (zs[1] - zs[0]) / *count as f64;
            for i in 0..*count {
                let mid = zs[0] + (i as f64 + 0.5) * slot;
                let half = 0.5 * slot * (1.0 - gap);
                let lo = [c[0] - rad, c[1] - rad, mid - half];
                let hi = [c[0] + rad, c[1] + rad, mid + half];
                raster.paint(labels, *class, lo, hi, |p| {
                    (p[0] - c[0]).hypot(p[1] - c[1]) <= rad && (p[2] - mid).abs() <= half
                });
            }
        }
    }
}

fn jittered(prim: &Primitive, shift: [f64; 3], rng: &mut ChaCha8Rng, jitter: f64) -> Primitive {
    let mut scale = || if jitter > 0.0 { rng.random_range(1.0 - jitter..=1.0 + jitter) } else { 1.0 };
    let moved = |p: [f64; 3]| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]];
    match prim {
        Primitive::Ellipsoid { center, radii, shell, class } => {
            let s = scale();
            Primitive::Ellipsoid { center: moved(*center), radii: radii.map(|r| r * s), shell: *shell, class: *class }
        }
        Primitive::Tube { points, radius, class } => {
            let s = scale();
            Primitive::Tube { points: points.iter().map(|&p| moved(p)).collect(), radius: radius * s, class: *class }
        }
        Primitive::CylinderStack { center, z_range, count, radius, gap, class } => {
            let s = scale();
            Primitive::CylinderStack {
                center: [center[0] + shift[0], center[1] + shift[1]],
                z_range: z_range.map(|z| z + shift[2]),
                count: *count,
                radius: radius * s,
                gap: *gap,
                class: *class,
            }
        }
    }
}

/// Rasterizes `spec` with per-phantom jitter, then assigns HU values with noise.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<LabeledVolume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = [0, 1, 2].map(|_| if spec.jitter > 0.0 { rng.random_range(-0.5 * spec.jitter..=0.5 * spec.jitter) } else { 0.0 });
    let primitives: Vec<Primitive> = spec.primitives.iter().map(|p| jittered(p, shift, &mut rng, spec.jitter)).collect();

    let raster = Raster { shape: spec.shape, unit: *spec.shape.iter().min().expect("three axes") as f64 };
    let mut labels = Volume::filled(spec.shape, 0u16);
    for prim in &primitives {
        rasterize(&raster, prim, &mut labels);
    }

    let phantom_occupancy = labels.data.iter().filter(|&&l| l > 0).count() as f64 / labels.len() as f64;
    if phantom_occupancy > spec.occupancy_ceiling {
        return Err(Error::OccupancyExceeded { occupancy: phantom_occupancy, ceiling: spec.occupancy_ceiling });
    }

    let body_c = raster.to_voxels(spec.body_center);
    let body_r = raster.to_voxels(spec.body_radii);
    let bone = Normal::new(spec.bone_mean, spec.bone_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut hu = Vec::with_capacity(labels.len());
    for (i, &label) in labels.data.iter().enumerate() {
        let [x, y, z] = labels.position(i);
        let base = if label > 0 {
            bone.sample(&mut rng).clamp(spec.bone_min, spec.bone_max)
        } else if ellipsoid_q([x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5], body_c, body_r) <= 1.0 {
            spec.soft_tissue_hu
        } else {
            spec.air_hu
        };
        let n = noise.sample(&mut rng).clamp(-3.0 * spec.noise_std, 3.0 * spec.noise_std);
        hu.push((base + n).round() as f32);
    }
    Ok(LabeledVolume { hu: Volume::new(spec.shape, hu)?, labels })
}
