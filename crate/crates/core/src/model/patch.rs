use rand::Rng;

use super::visible_count;
use crate::error::{Error, Result};
use crate::rng::{keyed, streams};
use crate::tensor::Tensor;

fn check_divisible(size: [usize; 3], patch: usize) -> Result<[usize; 3]> {
    if patch == 0 || size.iter().any(|s| s % patch != 0 || *s == 0) {
        return Err(Error::Config(format!(
            "volume {size:?} is not divisible into {patch}^3 patches"
        )));
    }
    Ok(size.map(|s| s / patch))
}

/// Cuts a `[D, H, W]` buffer into `patch^3` blocks in lexicographic (z, y, x)
/// block order; each row holds one block in row-major voxel order.
pub fn patchify(data: &[f64], size: [usize; 3], patch: usize) -> Result<Tensor> {
    let g = check_divisible(size, patch)?;
    if data.len() != size.iter().product::<usize>() {
        return Err(Error::Dimension(format!(
            "buffer of {} voxels for volume {size:?}",
            data.len()
        )));
    }
    let p3 = patch * patch * patch;
    let mut out = Vec::with_capacity(data.len());
    for bz in 0..g[0] {
        for by in 0..g[1] {
            for bx in 0..g[2] {
                for z in 0..patch {
                    for y in 0..patch {
                        let row = ((bz * patch + z) * size[1] + by * patch + y) * size[2] + bx * patch;
                        out.extend_from_slice(&data[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.iter().product(), p3], out)
}

pub fn unpatchify(patches: &Tensor, size: [usize; 3], patch: usize) -> Result<Vec<f64>> {
    let g = check_divisible(size, patch)?;
    let n: usize = g.iter().product();
    if patches.shape() != [n, patch * patch * patch] {
        return Err(Error::Dimension(format!(
            "patch tensor {:?} does not tile volume {size:?}",
            patches.shape()
        )));
    }
    let mut out = vec![0.0; size.iter().product()];
    let src = patches.data();
    let mut k = 0;
    for bz in 0..g[0] {
        for by in 0..g[1] {
            for bx in 0..g[2] {
                for z in 0..patch {
                    for y in 0..patch {
                        let row = ((bz * patch + z) * size[1] + by * patch + y) * size[2] + bx * patch;
                        out[row..row + patch].copy_from_slice(&src[k..k + patch]);
                        k += patch;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Partition of token positions into visible and masked sets, both sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n_tokens: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn from_visible(n_tokens: usize, mut visible: Vec<usize>) -> Result<Self> {
        visible.sort_unstable();
        if visible.windows(2).any(|w| w[0] == w[1]) || visible.last().is_some_and(|v| *v >= n_tokens) {
            return Err(Error::Contract(format!(
                "visible set must hold unique positions below {n_tokens}"
            )));
        }
        let mut is_vis = vec![false; n_tokens];
        for v in &visible {
            is_vis[*v] = true;
        }
        let masked = (0..n_tokens).filter(|i| !is_vis[*i]).collect();
        Ok(MaskPlan {
            n_tokens,
            visible,
            masked,
        })
    }

    /// Every position visible.
    pub fn all_visible(n_tokens: usize) -> Self {
        MaskPlan {
            n_tokens,
            visible: (0..n_tokens).collect(),
            masked: vec![],
        }
    }

    pub fn is_masked(&self) -> Vec<bool> {
        let mut m = vec![true; self.n_tokens];
        for v in &self.visible {
            m[*v] = false;
        }
        m
    }
}

pub fn sample_mask(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    sample_mask_with(n_tokens, ratio, &mut keyed(seed, streams::MASK, 0))
}

/// Uniform sample without replacement of `round((1 - ratio) n)` visible
/// positions.
pub fn sample_mask_with<R: Rng>(n_tokens: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} must lie in (0, 1)")));
    }
    if n_tokens == 0 {
        return Err(Error::Config("cannot mask an empty token grid".into()));
    }
    let k = visible_count(n_tokens, ratio);
    let visible = rand::seq::index::sample(rng, n_tokens, k).into_vec();
    MaskPlan::from_visible(n_tokens, visible)
}

/// Rows of `patches` at the plan's visible positions, in plan order.
pub fn gather_visible_patches(patches: &Tensor, plan: &MaskPlan) -> Result<Tensor> {
    if patches.shape().first() != Some(&plan.n_tokens) {
        return Err(Error::Contract(format!(
            "{:?} patches for a plan over {} tokens",
            patches.shape(),
            plan.n_tokens
        )));
    }
    let w = patches.shape()[1];
    let mut out = Vec::with_capacity(plan.visible.len() * w);
    for v in &plan.visible {
        out.extend_from_slice(&patches.data()[v * w..(v + 1) * w]);
    }
    Tensor::new(vec![plan.visible.len(), w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        let t = patchify(&vec![0.0; 32 * 32 * 32], [32; 3], 8).unwrap();
        assert_eq!(t.shape(), &[64, 512]);
        assert!(patchify(&[0.0; 1000], [10; 3], 8).is_err());
    }

    #[test]
    fn first_patch_holds_the_corner_block() {
        let size = [4, 4, 4];
        let data: Vec<f64> = (0..64).map(f64::from).collect();
        let t = patchify(&data, size, 2).unwrap();
        assert_eq!(&t.data()[..8], &[0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]);
        // second patch is the next block along x
        assert_eq!(t.data()[8], 2.0);
    }

    #[test]
    fn mask_counts_and_determinism() {
        assert_eq!(sample_mask(2744, 0.75, 0).unwrap().visible.len(), 686);
        let a = sample_mask(64, 0.75, 9).unwrap();
        assert_eq!(a.visible.len(), 16);
        assert_eq!(a.masked.len(), 48);
        assert_eq!(a, sample_mask(64, 0.75, 9).unwrap());
        assert!(sample_mask(64, 0.0, 9).is_err());
    }

    #[test]
    fn plan_rejects_duplicates() {
        assert!(MaskPlan::from_visible(4, vec![1, 1]).is_err());
        assert!(MaskPlan::from_visible(4, vec![4]).is_err());
    }
}
