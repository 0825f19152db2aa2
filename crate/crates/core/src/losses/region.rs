//! Anatomical region masks and the region-weighted objective.

use serde::{Deserialize, Serialize};

use super::{mvc_region, BlockSpec, MvcWeights, RegionTerm};
use crate::error::{Error, Result};
use crate::model::MaskPlan;
use crate::synthvol::{dilate, erode, Volume};

/// Closed soft-tissue band in HU.
pub const SOFT_HU_MIN: f64 = -300.0;
pub const SOFT_HU_MAX: f64 = 300.0;
/// Shell half-widths: outward dilation and inward erosion.
pub const SHELL_DILATE: usize = 4;
pub const SHELL_ERODE: usize = 2;

/// Voxels inside the soft-tissue band; expects raw HU, before normalization.
pub fn make_soft_tissue_mask(hu: &Volume) -> Vec<bool> {
    hu.data
        .iter()
        .map(|v| (SOFT_HU_MIN..=SOFT_HU_MAX).contains(v))
        .collect()
}

/// `dilate(bone, 4) ∧ ¬erode(bone, 2)`.
pub fn make_bone_shell_mask(bone: &[bool], size: [usize; 3]) -> Result<Vec<bool>> {
    let outer = dilate(bone, size, SHELL_DILATE)?;
    let inner = erode(bone, size, SHELL_ERODE)?;
    Ok(outer.iter().zip(&inner).map(|(o, i)| *o && !*i).collect())
}

/// Voxels that belong to masked patches of `plan`.
pub fn patch_voxel_mask(size: [usize; 3], patch: usize, plan: &MaskPlan) -> Result<Vec<bool>> {
    if patch == 0 || size.iter().any(|s| s % patch != 0) {
        return Err(Error::Config(format!(
            "volume {size:?} is not divisible by patch {patch}"
        )));
    }
    let g = [size[0] / patch, size[1] / patch, size[2] / patch];
    if g.iter().product::<usize>() != plan.n_tokens {
        return Err(Error::Contract(format!(
            "plan over {} tokens for a {g:?} patch grid",
            plan.n_tokens
        )));
    }
    let masked = plan.is_masked();
    let mut out = Vec::with_capacity(size.iter().product());
    for z in 0..size[0] {
        for y in 0..size[1] {
            for x in 0..size[2] {
                let t = ((z / patch) * g[1] + y / patch) * g[2] + x / patch;
                out.push(masked[t]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysWeights {
    pub lambda_global: f64,
    pub lambda_soft: f64,
    pub lambda_surf: f64,
}

impl Default for PhysWeights {
    fn default() -> Self {
        PhysWeights {
            lambda_global: 0.3,
            lambda_soft: 0.5,
            lambda_surf: 0.2,
        }
    }
}

impl PhysWeights {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_global, self.lambda_soft, self.lambda_surf];
        if l.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!(
                "region weights must be finite and >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Region selections over one volume. `omega` restricts the global term;
/// `None` means every voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub omega: Option<Vec<bool>>,
    pub soft: Vec<bool>,
    pub surf: Vec<bool>,
}

impl RegionMasks {
    pub fn new(soft: Vec<bool>, surf: Vec<bool>) -> Self {
        RegionMasks {
            omega: None,
            soft,
            surf,
        }
    }

    /// Intersects every region with `keep`.
    pub fn restricted(&self, keep: &[bool]) -> Self {
        let and = |m: &[bool]| m.iter().zip(keep).map(|(a, b)| *a && *b).collect();
        RegionMasks {
            omega: Some(self.omega.as_deref().map_or_else(|| keep.to_vec(), and)),
            soft: and(&self.soft),
            surf: and(&self.surf),
        }
    }
}

/// Per-region terms and the weighted total. A region without a
/// contributing block is listed in `skipped` and adds nothing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub global: Option<RegionTerm>,
    pub soft: Option<RegionTerm>,
    pub surf: Option<RegionTerm>,
    pub skipped: Vec<String>,
}

pub fn phys_loss_grad(
    pred: &[f64],
    target: &[f64],
    spec: &BlockSpec,
    masks: &RegionMasks,
    lambda: &PhysWeights,
    w: &MvcWeights,
) -> Result<(LossReport, Vec<f64>)> {
    let mut report = LossReport::default();
    let mut grad = vec![0.0; pred.len()];
    let regions: [(&str, f64, Option<&[bool]>); 3] = [
        ("global", lambda.lambda_global, masks.omega.as_deref()),
        ("soft", lambda.lambda_soft, Some(&masks.soft)),
        ("surf", lambda.lambda_surf, Some(&masks.surf)),
    ];
    for (name, lam, region) in regions {
        let slot = match name {
            "global" => &mut report.global,
            "soft" => &mut report.soft,
            _ => &mut report.surf,
        };
        match mvc_region(pred, target, spec, w, region) {
            Ok((term, g)) => {
                report.total += lam * term.loss;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += lam * b);
                *slot = Some(term);
            }
            Err(Error::EmptyRegion(_)) => report.skipped.push(name.to_string()),
            Err(e) => return Err(e),
        }
    }
    Ok((report, grad))
}

pub fn phys_loss(
    pred: &[f64],
    target: &[f64],
    spec: &BlockSpec,
    masks: &RegionMasks,
    lambda: &PhysWeights,
    w: &MvcWeights,
) -> Result<LossReport> {
    phys_loss_grad(pred, target, spec, masks, lambda, w).map(|(r, _)| r)
}

/// Mean squared error over voxels of masked patches, with its gradient.
pub fn masked_recon_l2_grad(
    pred: &[f64],
    target: &[f64],
    size: [usize; 3],
    patch: usize,
    plan: &MaskPlan,
) -> Result<(f64, Vec<f64>)> {
    let keep = patch_voxel_mask(size, patch, plan)?;
    if pred.len() != keep.len() || target.len() != keep.len() {
        return Err(Error::Dimension(format!(
            "volume {size:?}: pred {} and target {} voxels",
            pred.len(),
            target.len()
        )));
    }
    let count = keep.iter().filter(|k| **k).count();
    if count == 0 {
        return Err(Error::EmptyRegion("no masked patch to score".into()));
    }
    let nf = count as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in (0..keep.len()).filter(|i| keep[*i]) {
        let d = pred[i] - target[i];
        loss += d * d;
        grad[i] = 2.0 * d / nf;
    }
    Ok((loss / nf, grad))
}

pub fn masked_recon_l2(pred: &[f64], target: &[f64], size: [usize; 3], patch: usize, plan: &MaskPlan) -> Result<f64> {
    masked_recon_l2_grad(pred, target, size, patch, plan).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_band_is_closed() {
        let v = Volume::new([1, 1, 5], 1.0, vec![-1000.0, -300.0, 0.0, 300.0, 300.000001]).unwrap();
        assert_eq!(make_soft_tissue_mask(&v), vec![false, true, true, true, false]);
    }

    #[test]
    fn two_patch_hand_case() {
        // 2x1 patches of side 2 along x; second patch masked
        let size = [2, 2, 4];
        let plan = MaskPlan::from_visible(2, vec![0]).unwrap();
        let target = vec![0.0; 16];
        let mut pred = vec![0.0; 16];
        for (i, p) in pred.iter_mut().enumerate() {
            *p = if i % 4 >= 2 { 1.0 } else { 5.0 };
        }
        pred[3] = 3.0;
        // masked voxels: 8 of them, seven at 1.0, one at 3.0 -> (7 + 9) / 8
        assert_eq!(masked_recon_l2(&pred, &target, size, 2, &plan).unwrap(), 2.0);
        let all = MaskPlan::from_visible(2, vec![]).unwrap();
        let mse = pred.iter().map(|p| p * p).sum::<f64>() / 16.0;
        assert_eq!(masked_recon_l2(&pred, &target, size, 2, &all).unwrap(), mse);
    }

    #[test]
    fn restriction_intersects() {
        let m = RegionMasks::new(vec![true, true, false], vec![false, true, true]);
        let r = m.restricted(&[true, false, true]);
        assert_eq!(r.omega, Some(vec![true, false, true]));
        assert_eq!(r.soft, vec![true, false, false]);
        assert_eq!(r.surf, vec![false, false, true]);
    }
}
