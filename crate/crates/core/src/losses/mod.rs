//! Brightness/contrast/structure decomposition of the squared error,
//! region-restricted block losses built on it, masked reconstruction L2 and
//! single-window SSIM.
//!
//! All statistics are population (1/N) moments; with sample moments the
//! three terms would no longer sum to the MSE.

mod region;

pub use region::{
    make_bone_shell_mask, make_soft_tissue_mask, masked_recon_l2, masked_recon_l2_grad, patch_voxel_mask, phys_loss,
    phys_loss_grad, LossReport, PhysWeights, RegionMasks, SHELL_DILATE, SHELL_ERODE, SOFT_HU_MAX, SOFT_HU_MIN,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Guard added to `σx·σy` in the correlation denominator.
pub const RHO_EPS: f64 = 1e-8;
/// Below this standard deviation the correlation is not meaningful.
pub const SIGMA_FLOOR: f64 = 1e-8;
/// Blocks with fewer selected voxels are skipped.
pub const MIN_VOXELS: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MvcComponents {
    pub brightness: f64,
    pub contrast: f64,
    pub structure: f64,
    pub mse: f64,
}

impl MvcComponents {
    pub fn weighted(&self, w: &MvcWeights) -> f64 {
        w.w_br * self.brightness + w.w_cntr * self.contrast + w.w_str * self.structure
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MvcWeights {
    pub w_br: f64,
    pub w_cntr: f64,
    pub w_str: f64,
}

impl Default for MvcWeights {
    fn default() -> Self {
        MvcWeights {
            w_br: 0.3,
            w_cntr: 0.2,
            w_str: 0.5,
        }
    }
}

impl MvcWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_br, self.w_cntr, self.w_str]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::Config(format!(
                "MVC weights must be finite and >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Population moments of a pair of equal-length samples.
#[derive(Clone, Copy, Debug)]
struct Moments {
    mu_x: f64,
    mu_y: f64,
    sd_x: f64,
    sd_y: f64,
    cov: f64,
    /// Population variance of `x − y`.
    var_d: f64,
    mse: f64,
}

fn moments<I>(pairs: I) -> Moments
where
    I: Iterator<Item = (f64, f64)> + Clone,
{
    let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
    for (x, y) in pairs.clone() {
        n += 1;
        sx += x;
        sy += y;
    }
    let nf = n as f64;
    let (mu_x, mu_y) = (sx / nf, sy / nf);
    let (mut vx, mut vy, mut cxy, mut vd, mut se) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in pairs {
        let (dx, dy) = (x - mu_x, y - mu_y);
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
        vd += (dx - dy) * (dx - dy);
        se += (x - y) * (x - y);
    }
    Moments {
        mu_x,
        mu_y,
        sd_x: (vx / nf).sqrt(),
        sd_y: (vy / nf).sqrt(),
        cov: cxy / nf,
        var_d: vd / nf,
        mse: se / nf,
    }
}

impl Moments {
    fn components(&self) -> MvcComponents {
        let brightness = (self.mu_x - self.mu_y).powi(2);
        let contrast = (self.sd_x - self.sd_y).powi(2);
        // 2σxσy(1 − ρ) = var(x − y) − (σx − σy)^2 without dividing by σxσy;
        // it is exactly 0 for identical inputs and never negative in exact
        // arithmetic, so rounding below 0 is clamped.
        let structure = if self.sd_x < SIGMA_FLOOR || self.sd_y < SIGMA_FLOOR {
            self.mse - brightness - contrast
        } else {
            self.var_d - contrast
        }
        .max(0.0);
        MvcComponents {
            brightness,
            contrast,
            structure,
            mse: self.mse,
        }
    }
}

/// Pearson correlation with the guarded denominator.
pub fn correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let m = moments(x.iter().copied().zip(y.iter().copied()));
    Ok(m.cov / (m.sd_x * m.sd_y + RHO_EPS))
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "sample lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Contract(format!("need at least 2 samples, got {}", x.len())));
    }
    Ok(())
}

/// Splits the mean squared error of `x` against `y` into brightness,
/// contrast and structure terms that sum to it.
pub fn mvc_decompose(x: &[f64], y: &[f64]) -> Result<MvcComponents> {
    check_pair(x, y)?;
    Ok(moments(x.iter().copied().zip(y.iter().copied())).components())
}

/// Adds `w`-weighted component gradients with respect to `x` for the
/// voxels `idx` into `grad`, each scaled by `scale`.
fn accumulate_grad(x: &[f64], y: &[f64], idx: &[usize], m: &Moments, w: &MvcWeights, scale: f64, grad: &mut [f64]) {
    let nf = idx.len() as f64;
    let db = 2.0 * (m.mu_x - m.mu_y) / nf;
    // σx below the floor: its derivative is taken as 0, which keeps the sum
    // of the three gradients equal to the MSE gradient
    let live = m.sd_x >= SIGMA_FLOOR;
    for &i in idx {
        let (dx, dy) = (x[i] - m.mu_x, y[i] - m.mu_y);
        let dsx = if live { dx / (nf * m.sd_x) } else { 0.0 };
        let dc = 2.0 * (m.sd_x - m.sd_y) * dsx;
        let ds = if m.sd_x < SIGMA_FLOOR || m.sd_y < SIGMA_FLOOR {
            // residual form: d(mse) − d(br) − d(cntr)
            2.0 * (x[i] - y[i]) / nf - db - dc
        } else {
            2.0 * (m.sd_y * dsx - dy / nf)
        };
        grad[i] += scale * (w.w_br * db + w.w_cntr * dc + w.w_str * ds);
    }
}

/// Block partition settings for [`mvc_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub size: [usize; 3],
    pub sub_patch: usize,
    pub min_voxels: usize,
}

impl BlockSpec {
    pub fn new(size: [usize; 3], sub_patch: usize) -> Result<Self> {
        if sub_patch == 0 || size.iter().any(|s| s % sub_patch != 0 || *s == 0) {
            return Err(Error::Config(format!(
                "volume {size:?} is not divisible into {sub_patch}^3 sub-patches"
            )));
        }
        Ok(BlockSpec {
            size,
            sub_patch,
            min_voxels: MIN_VOXELS,
        })
    }

    pub fn numel(&self) -> usize {
        self.size.iter().product()
    }

    /// Voxel indices of each block, restricted to `region`, in block order.
    pub fn blocks(&self, region: Option<&[bool]>) -> Vec<Vec<usize>> {
        let [d, h, w] = self.size;
        let s = self.sub_patch;
        let mut out = Vec::new();
        for bz in (0..d).step_by(s) {
            for by in (0..h).step_by(s) {
                for bx in (0..w).step_by(s) {
                    let mut idx = Vec::with_capacity(s * s * s);
                    for z in bz..bz + s {
                        for y in by..by + s {
                            for x in bx..bx + s {
                                let i = (z * h + y) * w + x;
                                if region.is_none_or(|r| r[i]) {
                                    idx.push(i);
                                }
                            }
                        }
                    }
                    out.push(idx);
                }
            }
        }
        out
    }
}

fn check_volumes(pred: &[f64], target: &[f64], spec: &BlockSpec, region: Option<&[bool]>) -> Result<()> {
    let n = spec.numel();
    if pred.len() != n || target.len() != n || region.is_some_and(|r| r.len() != n) {
        return Err(Error::Dimension(format!(
            "volume {:?} needs {n} voxels; pred {}, target {}, region {:?}",
            spec.size,
            pred.len(),
            target.len(),
            region.map(<[bool]>::len)
        )));
    }
    Ok(())
}

/// Per-region loss with the block-averaged components behind it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionTerm {
    pub loss: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub structure: f64,
    pub blocks: usize,
}

/// Mean over contributing blocks of the weighted MVC terms, with the
/// gradient with respect to `pred`.
pub fn mvc_region(
    pred: &[f64],
    target: &[f64],
    spec: &BlockSpec,
    w: &MvcWeights,
    region: Option<&[bool]>,
) -> Result<(RegionTerm, Vec<f64>)> {
    check_volumes(pred, target, spec, region)?;
    let blocks: Vec<Vec<usize>> = spec
        .blocks(region)
        .into_iter()
        .filter(|b| b.len() >= spec.min_voxels.max(2))
        .collect();
    if blocks.is_empty() {
        return Err(Error::EmptyRegion(format!(
            "no {}^3 block holds {} selected voxels",
            spec.sub_patch, spec.min_voxels
        )));
    }
    let scale = 1.0 / blocks.len() as f64;
    let mut grad = vec![0.0; pred.len()];
    let mut term = RegionTerm {
        blocks: blocks.len(),
        ..RegionTerm::default()
    };
    for idx in &blocks {
        let m = moments(idx.iter().map(|&i| (pred[i], target[i])));
        let c = m.components();
        term.loss += c.weighted(w);
        term.brightness += c.brightness;
        term.contrast += c.contrast;
        term.structure += c.structure;
        accumulate_grad(pred, target, idx, &m, w, scale, &mut grad);
    }
    for v in [
        &mut term.loss,
        &mut term.brightness,
        &mut term.contrast,
        &mut term.structure,
    ] {
        *v *= scale;
    }
    Ok((term, grad))
}

pub fn mvc_loss_grad(
    pred: &[f64],
    target: &[f64],
    spec: &BlockSpec,
    w: &MvcWeights,
    region: Option<&[bool]>,
) -> Result<(f64, Vec<f64>)> {
    mvc_region(pred, target, spec, w, region).map(|(t, g)| (t.loss, g))
}

pub fn mvc_loss(
    pred: &[f64],
    target: &[f64],
    spec: &BlockSpec,
    w: &MvcWeights,
    region: Option<&[bool]>,
) -> Result<f64> {
    mvc_region(pred, target, spec, w, region).map(|(t, _)| t.loss)
}

/// Places a precomputed `(value, d value / d pred)` pair on the graph.
pub fn attach_loss(g: &mut Graph, pred: Var, (value, grad): (f64, Vec<f64>)) -> Result<Var> {
    g.scalar_fn(pred, value, grad)
}

/// Single-window SSIM with population statistics.
pub fn ssim(x: &[f64], y: &[f64], c1: f64, c2: f64) -> Result<f64> {
    check_pair(x, y)?;
    let m = moments(x.iter().copied().zip(y.iter().copied()));
    let num = (2.0 * m.mu_x * m.mu_y + c1) * (2.0 * m.cov + c2);
    let den = (m.mu_x.powi(2) + m.mu_y.powi(2) + c1) * (m.sd_x.powi(2) + m.sd_y.powi(2) + c2);
    if den == 0.0 {
        return Err(Error::Undefined(
            "SSIM of two zero signals with zero stabilizers".into(),
        ));
    }
    Ok(num / den)
}

/// Conventional stabilizers `(0.01 L)^2` and `(0.03 L)^2` for dynamic range `L`.
pub fn ssim_constants(range: f64) -> (f64, f64) {
    ((0.01 * range).powi(2), (0.03 * range).powi(2))
}
