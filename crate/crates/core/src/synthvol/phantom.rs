//! Condyle-like bone phantom: an off-center ellipsoid head on a cylindrical
//! neck, a cortical shell, trabecular interior, soft-tissue halo and air.

use rand::Rng;

use super::{mirror_data, SegMask, Volume, LABEL_BACKGROUND, LABEL_BONE, LABEL_SOFT};
use crate::error::{Error, Result};
use crate::rng::{keyed, streams, uniform};

/// Physical field of view along each axis.
pub const FIELD_OF_VIEW_MM: f64 = 80.0;

pub const CORTICAL_HU: (f64, f64) = (1100.0, 1300.0);
pub const TRABECULAR_HU: (f64, f64) = (150.0, 450.0);
pub const SOFT_HU: (f64, f64) = (-80.0, 80.0);
pub const AIR_HU: (f64, f64) = (-1000.0, -950.0);

/// Axis along which left and right joints are mirror images.
pub const CHIRALITY_AXIS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chirality {
    Left,
    Right,
}

/// Geometry of one phantom in normalized coordinates (`[-1, 1]` per axis).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomParams {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Rotation of the head in the (axis 0, axis 2) plane, radians.
    pub tilt: f64,
    pub neck_radius: f64,
    /// Scaled radius beyond which bone is cortical.
    pub cortical_from: f64,
    /// Scaled radius up to which soft tissue surrounds the bone.
    pub halo_to: f64,
}

const RANGES: [(f64, f64); 10] = [
    (-0.35, -0.15), // center 0
    (-0.10, 0.10),  // center 1
    (0.10, 0.25),   // center 2, lateral offset that makes chirality visible
    (0.34, 0.48),   // semi-axis 0
    (0.34, 0.48),   // semi-axis 1
    (0.28, 0.40),   // semi-axis 2
    (-0.35, 0.35),  // tilt
    (0.14, 0.22),   // neck radius
    (0.70, 0.80),   // cortical_from
    (1.40, 1.70),   // halo_to
];

impl PhantomParams {
    pub fn sample(seed: u64) -> Self {
        let mut rng = keyed(seed, streams::PHANTOM, 0);
        let v: Vec<f64> = RANGES.iter().map(|(lo, hi)| uniform(&mut rng, *lo, *hi)).collect();
        Self::from_slice(&v)
    }

    fn from_slice(v: &[f64]) -> Self {
        PhantomParams {
            center: [v[0], v[1], v[2]],
            semi_axes: [v[3], v[4], v[5]],
            tilt: v[6],
            neck_radius: v[7],
            cortical_from: v[8],
            halo_to: v[9],
        }
    }

    fn to_vec(self) -> Vec<f64> {
        let [c0, c1, c2] = self.center;
        let [a0, a1, a2] = self.semi_axes;
        vec![
            c0,
            c1,
            c2,
            a0,
            a1,
            a2,
            self.tilt,
            self.neck_radius,
            self.cortical_from,
            self.halo_to,
        ]
    }

    /// Same anatomy with every parameter moved by up to `amount` of its
    /// sampling range, clamped to the range. Used to derive a contralateral
    /// joint of the same patient.
    pub fn jittered<R: Rng>(&self, rng: &mut R, amount: f64) -> Self {
        let v: Vec<f64> = self
            .to_vec()
            .iter()
            .zip(RANGES)
            .map(|(x, (lo, hi))| (x + amount * (hi - lo) * uniform(rng, -1.0, 1.0)).clamp(lo, hi))
            .collect();
        Self::from_slice(&v)
    }

    /// Scaled distance: `<= 1` inside bone, growing outward.
    fn level(&self, u: [f64; 3]) -> f64 {
        let d = [u[0] - self.center[0], u[1] - self.center[1], u[2] - self.center[2]];
        let (s, c) = self.tilt.sin_cos();
        let r = [c * d[0] + s * d[2], d[1], -s * d[0] + c * d[2]];
        let head = r
            .iter()
            .zip(self.semi_axes)
            .map(|(x, a)| (x / a) * (x / a))
            .sum::<f64>()
            .sqrt();
        let neck = if r[0] >= 0.0 {
            (r[1] * r[1] + r[2] * r[2]).sqrt() / self.neck_radius
        } else {
            f64::INFINITY
        };
        head.min(neck)
    }
}

fn check_size(size: [usize; 3], patch: usize) -> Result<()> {
    if patch == 0 {
        return Err(Error::Config("patch size must be >= 1".into()));
    }
    if let Some(bad) = size.iter().find(|s| **s < 8 || **s % patch != 0) {
        return Err(Error::Config(format!(
            "volume dimension {bad} must be >= 8 and divisible by the patch size {patch}"
        )));
    }
    Ok(())
}

/// Deterministic phantom for `seed`. The left joint is the voxelwise mirror
/// of the right one.
pub fn gen_phantom(seed: u64, size: [usize; 3], patch: usize, chirality: Chirality) -> Result<(Volume, SegMask)> {
    gen_phantom_from(&PhantomParams::sample(seed), seed, size, patch, chirality)
}

/// Renders explicit geometry; `noise_seed` keys the intensity noise.
pub fn gen_phantom_from(
    params: &PhantomParams,
    noise_seed: u64,
    size: [usize; 3],
    patch: usize,
    chirality: Chirality,
) -> Result<(Volume, SegMask)> {
    check_size(size, patch)?;
    let mut rng = keyed(noise_seed, streams::PHANTOM, 1);
    let n: usize = size.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let coord = |i: usize, len: usize| (2 * i + 1) as f64 / len as f64 - 1.0;
    for z in 0..size[0] {
        for y in 0..size[1] {
            for x in 0..size[2] {
                let s = params.level([coord(z, size[0]), coord(y, size[1]), coord(x, size[2])]);
                let (label, band) = if s <= 1.0 {
                    let band = if s >= params.cortical_from {
                        CORTICAL_HU
                    } else {
                        TRABECULAR_HU
                    };
                    (LABEL_BONE, band)
                } else if s <= params.halo_to {
                    (LABEL_SOFT, SOFT_HU)
                } else {
                    (LABEL_BACKGROUND, AIR_HU)
                };
                labels.push(label);
                data.push(uniform(&mut rng, band.0, band.1));
            }
        }
    }
    let spacing = FIELD_OF_VIEW_MM / size[0] as f64;
    let mut vol = Volume::new(size, spacing, data)?;
    let mut mask = SegMask::new(size, labels)?;
    if chirality == Chirality::Left {
        vol.data = mirror_data(&vol.data, size, CHIRALITY_AXIS)?;
        mask.labels = mirror_data(&mask.labels, size, CHIRALITY_AXIS)?;
    }
    Ok((vol, mask))
}
