//! Synthetic bone phantoms, HU normalization and binary morphology.

mod io;
mod morph;
mod norm;
mod phantom;

pub use io::{read_mask, read_volume, write_mask, write_volume};
pub use morph::{dilate, dilate_with_boundary, erode, erode_with_boundary};
pub use norm::{compute_norm_stats, hu_normalize, percentile, NormStats};
pub use phantom::{gen_phantom, gen_phantom_from, Chirality, PhantomParams, CHIRALITY_AXIS};

use crate::error::{Error, Result};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_BONE: u8 = 1;
pub const LABEL_SOFT: u8 = 2;

/// Dense scalar grid in HU-like units, `data[(z * H + y) * W + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub size: [usize; 3],
    pub spacing_mm: f64,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    pub size: [usize; 3],
    pub labels: Vec<u8>,
}

impl Volume {
    pub fn new(size: [usize; 3], spacing_mm: f64, data: Vec<f64>) -> Result<Self> {
        check_len(size, data.len())?;
        Ok(Volume { size, spacing_mm, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn mirror(&self, axis: usize) -> Result<Self> {
        Ok(Volume {
            size: self.size,
            spacing_mm: self.spacing_mm,
            data: mirror_data(&self.data, self.size, axis)?,
        })
    }
}

impl SegMask {
    pub fn new(size: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        check_len(size, labels.len())?;
        if let Some(bad) = labels.iter().find(|l| **l > LABEL_SOFT) {
            return Err(Error::Contract(format!("segmentation label {bad} outside {{0,1,2}}")));
        }
        Ok(SegMask { size, labels })
    }

    pub fn mirror(&self, axis: usize) -> Result<Self> {
        Ok(SegMask {
            size: self.size,
            labels: mirror_data(&self.labels, self.size, axis)?,
        })
    }

    /// Binary mask of voxels carrying `label`.
    pub fn select(&self, label: u8) -> Vec<bool> {
        self.labels.iter().map(|l| *l == label).collect()
    }

    pub fn fraction(&self, label: u8) -> f64 {
        self.labels.iter().filter(|l| **l == label).count() as f64 / self.labels.len().max(1) as f64
    }
}

fn check_len(size: [usize; 3], len: usize) -> Result<()> {
    let n: usize = size.iter().product();
    if n != len {
        return Err(Error::Dimension(format!(
            "grid {size:?} needs {n} voxels, buffer has {len}"
        )));
    }
    Ok(())
}

/// Reverses index order along `axis` of a `[D, H, W]` buffer.
pub fn mirror_data<T: Copy>(data: &[T], size: [usize; 3], axis: usize) -> Result<Vec<T>> {
    if axis > 2 {
        return Err(Error::Config(format!("mirror axis must be 0, 1 or 2, got {axis}")));
    }
    check_len(size, data.len())?;
    let [d, h, w] = size;
    let mut out = Vec::with_capacity(data.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = match axis {
                    0 => (d - 1 - z, y, x),
                    1 => (z, h - 1 - y, x),
                    _ => (z, y, w - 1 - x),
                };
                out.push(data[(sz * h + sy) * w + sx]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_moves_single_voxel() {
        let size = [3, 4, 5];
        let mut data = vec![0.0; 60];
        data[(4 + 1) * 5 + 3] = 1.0;
        let m = mirror_data(&data, size, 2).unwrap();
        assert_eq!(m[(4 + 1) * 5 + (5 - 1 - 3)], 1.0);
        let m = mirror_data(&data, size, 0).unwrap();
        assert_eq!(m[(4 + 1) * 5 + 3], 1.0);
        let m = mirror_data(&data, size, 1).unwrap();
        assert_eq!(m[(4 + 2) * 5 + 3], 1.0);
    }

    #[test]
    fn mirror_rejects_bad_axis() {
        assert!(matches!(mirror_data(&[0u8; 8], [2, 2, 2], 3), Err(Error::Config(_))));
    }

    #[test]
    fn mirror_of_symmetric_volume_is_identity() {
        let size = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|i| ((i % 4) as f64 - 1.5).abs()).collect();
        assert_eq!(mirror_data(&data, size, 2).unwrap(), data);
    }

    #[test]
    fn labels_are_validated() {
        assert!(SegMask::new([1, 1, 2], vec![0, 3]).is_err());
        assert!(SegMask::new([1, 1, 2], vec![0, 2]).is_ok());
    }
}
