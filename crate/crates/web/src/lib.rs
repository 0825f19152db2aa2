//! Browser bindings for three interactive views: a synthetic phantom slice,
//! the analytic FLOPs crossover and the MVC split of a perturbed signal.
//!
//! The plain functions carry the logic and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors to `JsError`.

use bertswin::complexity::crossover_table;
use bertswin::losses::{make_bone_shell_mask, mvc_decompose, MvcComponents};
use bertswin::rng::{keyed, normal};
use bertswin::synthvol::{gen_phantom, Chirality, LABEL_BONE};
use bertswin::{Error, Result};
use wasm_bindgen::prelude::*;

/// Display window in HU: air maps to black, dense bone to white.
const HU_LO: f64 = -1000.0;
const HU_HI: f64 = 1500.0;

/// RGBA pixels of one axial, coronal or sagittal slice, `size * size * 4`
/// bytes. With `overlay`, the bone surface shell is tinted red.
pub fn slice_rgba(seed: u64, size: usize, axis: usize, index: usize, left: bool, overlay: bool) -> Result<Vec<u8>> {
    if axis > 2 || index >= size {
        return Err(Error::Config(format!(
            "slice {index} on axis {axis} outside a {size}^3 volume"
        )));
    }
    let chirality = if left { Chirality::Left } else { Chirality::Right };
    let patch = if size.is_multiple_of(8) { 8 } else { size };
    let (hu, seg) = gen_phantom(seed, [size; 3], patch, chirality)?;
    let shell = if overlay {
        make_bone_shell_mask(&seg.select(LABEL_BONE), [size; 3])?
    } else {
        vec![false; hu.data.len()]
    };
    let mut out = Vec::with_capacity(size * size * 4);
    for r in 0..size {
        for c in 0..size {
            let (z, y, x) = match axis {
                0 => (index, r, c),
                1 => (r, index, c),
                _ => (r, c, index),
            };
            let i = (z * size + y) * size + x;
            let g = ((hu.data[i] - HU_LO) / (HU_HI - HU_LO)).clamp(0.0, 1.0) * 255.0;
            let g = g.round() as u8;
            if shell[i] {
                out.extend_from_slice(&[g.saturating_add(60).max(180), g / 2, g / 2, 255]);
            } else {
                out.extend_from_slice(&[g, g, g, 255]);
            }
        }
    }
    Ok(out)
}

/// Crossover report for the given resolutions at one patch size, as JSON.
pub fn flops_json(volumes: &[usize], patch: usize) -> Result<String> {
    Ok(serde_json::to_string(&crossover_table(volumes, &[patch])?)?)
}

/// Splits the error of `a * x + b + noise` against a smooth reference `x`.
/// The three terms sum to the MSE.
pub fn mvc_explore(gain: f64, offset: f64, noise: f64, seed: u64) -> Result<MvcComponents> {
    let n = 256;
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / n as f64 * std::f64::consts::TAU;
            t.sin() + 0.4 * (3.0 * t).cos()
        })
        .collect();
    let mut rng = keyed(seed, 0, 0);
    let y: Vec<f64> = x.iter().map(|v| gain * v + offset + noise * normal(&mut rng)).collect();
    mvc_decompose(&y, &x)
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = phantomSlice)]
pub fn phantom_slice(
    seed: u32,
    size: usize,
    axis: usize,
    index: usize,
    left: bool,
    overlay: bool,
) -> std::result::Result<Vec<u8>, JsError> {
    slice_rgba(u64::from(seed), size, axis, index, left, overlay).map_err(js)
}

#[wasm_bindgen(js_name = flopsTable)]
pub fn flops_table(volumes: Vec<u32>, patch: usize) -> std::result::Result<String, JsError> {
    let v: Vec<usize> = volumes.into_iter().map(|v| v as usize).collect();
    flops_json(&v, patch).map_err(js)
}

#[wasm_bindgen(js_name = mvcSplit)]
pub fn mvc_split(gain: f64, offset: f64, noise: f64, seed: u32) -> std::result::Result<String, JsError> {
    let c = mvc_explore(gain, offset, noise, u64::from(seed)).map_err(js)?;
    serde_json::to_string(&c).map_err(|e| JsError::new(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_has_one_pixel_per_voxel() {
        let px = slice_rgba(3, 32, 0, 16, false, true).unwrap();
        assert_eq!(px.len(), 32 * 32 * 4);
        assert!(px.chunks(4).all(|p| p[3] == 255));
        // the phantom centre is not air
        assert!(px.chunks(4).any(|p| p[0] > 0));
        assert!(slice_rgba(3, 32, 3, 0, false, false).is_err());
        assert!(slice_rgba(3, 32, 0, 32, false, false).is_err());
    }

    #[test]
    fn left_slice_mirrors_right_on_the_sagittal_axis() {
        let r = slice_rgba(5, 16, 0, 8, false, false).unwrap();
        let l = slice_rgba(5, 16, 0, 8, true, false).unwrap();
        for row in 0..16 {
            for c in 0..16 {
                let a = &r[(row * 16 + c) * 4..][..4];
                let b = &l[(row * 16 + 15 - c) * 4..][..4];
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn flops_json_round_trips() {
        let text = flops_json(&[224, 512], 16).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["rows"].as_array().unwrap().len(), 6);
        assert_eq!(v["ratios"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn mvc_terms_isolate_each_perturbation() {
        let c = mvc_explore(1.0, 0.7, 0.0, 0).unwrap();
        assert!((c.brightness - 0.49).abs() < 1e-12);
        assert!(c.contrast < 1e-24 && c.structure.abs() < 1e-12);
        let c = mvc_explore(2.0, 0.0, 0.0, 0).unwrap();
        assert!(c.brightness < 1e-24 && c.structure.abs() < 1e-12 && c.contrast > 0.0);
        let c = mvc_explore(1.0, 0.0, 0.5, 1).unwrap();
        assert!(c.structure > 0.0);
        assert!((c.mse - (c.brightness + c.contrast + c.structure)).abs() < 1e-12);
    }
}
