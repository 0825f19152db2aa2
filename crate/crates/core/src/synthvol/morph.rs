//! Binary morphology with a cube structuring element of side `2k + 1`.
//!
//! Implemented as three separable 1-D passes. Voxels outside the grid take
//! a fixed boundary value; the public `erode`/`dilate` treat them as unset.

use crate::error::{Error, Result};

pub fn erode(mask: &[bool], size: [usize; 3], k: usize) -> Result<Vec<bool>> {
    erode_with_boundary(mask, size, k, false)
}

pub fn dilate(mask: &[bool], size: [usize; 3], k: usize) -> Result<Vec<bool>> {
    dilate_with_boundary(mask, size, k, false)
}

/// Erosion where out-of-grid voxels read as `outside`.
pub fn erode_with_boundary(mask: &[bool], size: [usize; 3], k: usize, outside: bool) -> Result<Vec<bool>> {
    filter(mask, size, k, outside, true)
}

/// Dilation where out-of-grid voxels read as `outside`.
pub fn dilate_with_boundary(mask: &[bool], size: [usize; 3], k: usize, outside: bool) -> Result<Vec<bool>> {
    filter(mask, size, k, outside, false)
}

fn filter(mask: &[bool], size: [usize; 3], k: usize, outside: bool, all: bool) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::Config("morphology radius must be >= 1".into()));
    }
    let n: usize = size.iter().product();
    if mask.len() != n {
        return Err(Error::Dimension(format!(
            "mask of {} voxels for grid {size:?}",
            mask.len()
        )));
    }
    let mut cur = mask.to_vec();
    let strides = [size[1] * size[2], size[2], 1];
    for axis in 0..3 {
        let len = size[axis];
        let stride = strides[axis];
        let mut next = vec![false; n];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / stride) % len;
            let base = i - pos * stride;
            let lo = pos as isize - k as isize;
            let hi = pos as isize + k as isize;
            let clipped = lo < 0 || hi >= len as isize;
            let mut acc = if clipped { outside } else { all };
            if clipped && acc != all {
                *out = acc;
                continue;
            }
            for j in lo.max(0) as usize..=(hi as usize).min(len - 1) {
                let v = cur[base + j * stride];
                if v != all {
                    acc = v;
                    break;
                }
            }
            *out = acc;
        }
        cur = next;
    }
    Ok(cur)
}
