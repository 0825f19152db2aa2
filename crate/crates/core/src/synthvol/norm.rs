use std::fmt::Write as _;

use super::Volume;
use crate::error::{Error, Result};

pub const CLIP_LO_PERCENTILE: f64 = 0.5;
pub const CLIP_HI_PERCENTILE: f64 = 99.5;

/// Z-normalization statistics pooled over training volumes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub mean: f64,
    pub std: f64,
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn compute_norm_stats(volumes: &[&Volume]) -> Result<NormStats> {
    let mut pool: Vec<f64> = volumes.iter().flat_map(|v| v.data.iter().copied()).collect();
    if pool.is_empty() {
        return Err(Error::Contract("norm stats need at least one non-empty volume".into()));
    }
    if pool.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("norm stats over non-finite intensities".into()));
    }
    pool.sort_by(f64::total_cmp);
    let clip_lo = percentile(&pool, CLIP_LO_PERCENTILE);
    let clip_hi = percentile(&pool, CLIP_HI_PERCENTILE);
    let n = pool.len() as f64;
    let clipped = || pool.iter().map(|v| v.clamp(clip_lo, clip_hi));
    let mean = clipped().sum::<f64>() / n;
    let std = (clipped().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let stats = NormStats {
        clip_lo,
        clip_hi,
        mean,
        std,
    };
    stats.validate()?;
    Ok(stats)
}

pub fn hu_normalize(v: &Volume, s: &NormStats) -> Volume {
    Volume {
        size: v.size,
        spacing_mm: v.spacing_mm,
        data: v.data.iter().map(|x| s.normalize(*x)).collect(),
    }
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::Undefined(format!(
                "clip range [{}, {}] is empty",
                self.clip_lo, self.clip_hi
            )));
        }
        if !(self.std > 0.0) || !self.mean.is_finite() {
            return Err(Error::Undefined(format!("std {} is not positive", self.std)));
        }
        Ok(())
    }

    pub fn normalize(&self, hu: f64) -> f64 {
        (hu.clamp(self.clip_lo, self.clip_hi) - self.mean) / self.std
    }

    /// Maps an HU value into normalized units without clamping.
    pub fn to_normalized(&self, hu: f64) -> f64 {
        (hu - self.mean) / self.std
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("clip_lo", self.clip_lo),
            ("clip_hi", self.clip_hi),
            ("mean", self.mean),
            ("std", self.std),
        ] {
            // {:?} on f64 round-trips exactly
            let _ = writeln!(s, "{k}={v:?}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vals = [None; 4];
        let keys = ["clip_lo", "clip_hi", "mean", "std"];
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("norm stats", format!("line {}: expected key=value", n + 1)))?;
            let slot = keys
                .iter()
                .position(|key| *key == k.trim())
                .ok_or_else(|| Error::parse("norm stats", format!("unknown key `{}`", k.trim())))?;
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::parse("norm stats", format!("`{}` is not a number", v.trim())))?;
            vals[slot] = Some(x);
        }
        let get = |i: usize| vals[i].ok_or_else(|| Error::parse("norm stats", format!("missing `{}`", keys[i])));
        let s = NormStats {
            clip_lo: get(0)?,
            clip_hi: get(1)?,
            mean: get(2)?,
            std: get(3)?,
        };
        s.validate().map_err(|e| Error::parse("norm stats", e.to_string()))?;
        Ok(s)
    }
}
