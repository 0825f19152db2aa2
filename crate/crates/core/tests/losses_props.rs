use bertswin::losses::*;
use bertswin::model::{forward, init_params, sample_mask, ModelConfig, Variant};
use bertswin::rng::{keyed, uniform};
use bertswin::synthvol::{compute_norm_stats, gen_phantom, hu_normalize, Chirality, Volume, LABEL_BONE, LABEL_SOFT};
use bertswin::tensor::{finite_diff_check, finite_diff_check_many, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn noise(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = keyed(seed, 123, 0);
    (0..n).map(|_| uniform(&mut rng, -scale, scale)).collect()
}

/// Textbook form: squared mean gap, squared sd gap, 2 σx σy (1 − ρ).
fn textbook(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n).sqrt();
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let rho = cov / (sx * sy);
    ((mx - my).powi(2), (sx - sy).powi(2), 2.0 * sx * sy * (1.0 - rho))
}

#[test]
fn decomposition_identity_over_1000_pairs() {
    let mut rng = keyed(2024, 11, 0);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let n = rng.random_range(8..=512);
        let scale = 10f64.powf(uniform(&mut rng, -3.0, 3.0));
        let x: Vec<f64> = (0..n).map(|_| uniform(&mut rng, -scale, scale)).collect();
        let y: Vec<f64> = match k % 4 {
            0 => (0..n).map(|_| uniform(&mut rng, -scale, scale)).collect(),
            1 => x.iter().map(|v| 0.7 * v + 0.1 * scale).collect(),
            2 => vec![uniform(&mut rng, -scale, scale); n],
            _ => x.iter().map(|v| -v + uniform(&mut rng, -0.01, 0.01) * scale).collect(),
        };
        let c = mvc_decompose(&x, &y).unwrap();
        let err = (c.mse - (c.brightness + c.contrast + c.structure)).abs() / c.mse.max(1.0);
        worst = worst.max(err);
        assert!(c.brightness >= 0.0 && c.contrast >= 0.0);
        assert!(c.structure >= -1e-9 * c.mse.max(1.0), "structure {}", c.structure);
    }
    assert!(worst <= 1e-9, "worst {worst}");
}

#[test]
fn components_match_textbook_form() {
    for seed in 0..50 {
        let x = noise(64, seed, 2.0);
        let y = noise(64, seed + 1000, 1.0);
        let c = mvc_decompose(&x, &y).unwrap();
        let (b, ct, s) = textbook(&x, &y);
        assert!((c.brightness - b).abs() < 1e-12);
        assert!((c.contrast - ct).abs() < 1e-12);
        assert!((c.structure - s).abs() < 1e-12);
    }
}

fn desk_phantom(seed: u64) -> (Volume, Vec<f64>, Vec<bool>, Vec<bool>) {
    let (hu, seg) = gen_phantom(seed, [32; 3], 8, Chirality::Right).unwrap();
    let stats = compute_norm_stats(&[&hu]).unwrap();
    let norm = hu_normalize(&hu, &stats).data;
    let soft = make_soft_tissue_mask(&hu);
    let surf = make_bone_shell_mask(&seg.select(LABEL_BONE), [32; 3]).unwrap();
    (hu, norm, soft, surf)
}

/// Brute per-region oracle: loop over 4^3 blocks, keep blocks with >= 8
/// selected voxels, average the textbook weighted terms.
fn region_oracle(pred: &[f64], target: &[f64], region: Option<&[bool]>, w: &MvcWeights) -> Option<f64> {
    let mut vals = Vec::new();
    for bz in 0..8 {
        for by in 0..8 {
            for bx in 0..8 {
                let (mut x, mut y) = (Vec::new(), Vec::new());
                for z in 0..4 {
                    for yy in 0..4 {
                        for xx in 0..4 {
                            let i = ((bz * 4 + z) * 32 + by * 4 + yy) * 32 + bx * 4 + xx;
                            if region.is_none_or(|r| r[i]) {
                                x.push(pred[i]);
                                y.push(target[i]);
                            }
                        }
                    }
                }
                if x.len() >= 8 {
                    let (b, c, s) = textbook(&x, &y);
                    vals.push(w.w_br * b + w.w_cntr * c + w.w_str * s);
                }
            }
        }
    }
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[test]
fn phys_loss_matches_region_oracle_with_two_block_masks() {
    let (_, target, _, _) = desk_phantom(3);
    let pred: Vec<f64> = target.iter().zip(noise(32768, 4, 0.3)).map(|(t, e)| t + e).collect();
    let spec = BlockSpec::new([32; 3], 4).unwrap();
    // soft: all of block (0,0,0) plus 10 voxels of block (0,0,1); surf: block (7,7,7)
    let mut soft = vec![false; 32768];
    let mut surf = vec![false; 32768];
    for z in 0..4 {
        for y in 0..4 {
            for x in 0..4 {
                soft[(z * 32 + y) * 32 + x] = true;
                surf[((28 + z) * 32 + 28 + y) * 32 + 28 + x] = true;
            }
        }
    }
    for k in 0..10 {
        soft[((k / 4) * 32 + k % 4) * 32 + 4] = true;
    }
    let masks = RegionMasks::new(soft.clone(), surf.clone());
    let (w, lam) = (MvcWeights::default(), PhysWeights::default());
    let report = phys_loss(&pred, &target, &spec, &masks, &lam, &w).unwrap();
    let g = region_oracle(&pred, &target, None, &w).unwrap();
    let s = region_oracle(&pred, &target, Some(&soft), &w).unwrap();
    let f = region_oracle(&pred, &target, Some(&surf), &w).unwrap();
    assert_eq!(report.soft.unwrap().blocks, 2);
    assert_eq!(report.surf.unwrap().blocks, 1);
    let want = 0.3 * g + 0.5 * s + 0.2 * f;
    assert!((report.total - want).abs() < 1e-10, "{} vs {want}", report.total);
    assert!(report.skipped.is_empty());
}

#[test]
fn lambda_global_only_reduces_to_mvc_loss() {
    let (_, target, soft, surf) = desk_phantom(5);
    let pred: Vec<f64> = target
        .iter()
        .zip(noise(32768, 6, 0.5))
        .map(|(t, e)| t * 0.9 + e)
        .collect();
    let spec = BlockSpec::new([32; 3], 4).unwrap();
    let w = MvcWeights::default();
    let lam = PhysWeights {
        lambda_global: 1.0,
        lambda_soft: 0.0,
        lambda_surf: 0.0,
    };
    let r = phys_loss(&pred, &target, &spec, &RegionMasks::new(soft, surf), &lam, &w).unwrap();
    assert_eq!(r.total, mvc_loss(&pred, &target, &spec, &w, None).unwrap());
}

#[test]
fn identical_prediction_gives_zero_everywhere() {
    let (_, target, soft, surf) = desk_phantom(7);
    let spec = BlockSpec::new([32; 3], 4).unwrap();
    let r = phys_loss(
        &target,
        &target,
        &spec,
        &RegionMasks::new(soft, surf),
        &PhysWeights::default(),
        &MvcWeights::default(),
    )
    .unwrap();
    assert_eq!(r.total, 0.0);
    for t in [r.global, r.soft, r.surf] {
        assert_eq!(t.unwrap().loss, 0.0);
    }
}

#[test]
fn empty_regions_are_flagged_not_fatal() {
    let (_, target, _, _) = desk_phantom(8);
    let pred = noise(32768, 9, 1.0);
    let spec = BlockSpec::new([32; 3], 4).unwrap();
    let masks = RegionMasks::new(vec![false; 32768], vec![false; 32768]);
    let r = phys_loss(
        &pred,
        &target,
        &spec,
        &masks,
        &PhysWeights::default(),
        &MvcWeights::default(),
    )
    .unwrap();
    assert_eq!(r.skipped, vec!["soft".to_string(), "surf".to_string()]);
    assert!(r.soft.is_none() && r.surf.is_none());
    assert_eq!(r.total, 0.3 * r.global.unwrap().loss);
}

#[test]
fn mvc_and_phys_gradients_match_finite_differences() {
    let (_, target, soft, surf) = desk_phantom(10);
    let pred: Vec<f64> = target.iter().zip(noise(32768, 11, 0.4)).map(|(t, e)| t + e).collect();
    let spec = BlockSpec::new([32; 3], 4).unwrap();
    let w = MvcWeights::default();
    let masks = RegionMasks::new(soft, surf);
    let lam = PhysWeights::default();
    let (_, g_mvc) = mvc_loss_grad(&pred, &target, &spec, &w, None).unwrap();
    let (_, g_phys) = phys_loss_grad(&pred, &target, &spec, &masks, &lam, &w).unwrap();
    let h = 1e-5;
    let mut probe = pred.clone();
    for i in (0..32768).step_by(331) {
        let orig = probe[i];
        probe[i] = orig + h;
        let (mp, pp) = (
            mvc_loss(&probe, &target, &spec, &w, None).unwrap(),
            phys_loss(&probe, &target, &spec, &masks, &lam, &w).unwrap().total,
        );
        probe[i] = orig - h;
        let (mm, pm) = (
            mvc_loss(&probe, &target, &spec, &w, None).unwrap(),
            phys_loss(&probe, &target, &spec, &masks, &lam, &w).unwrap().total,
        );
        probe[i] = orig;
        for (ad, fd) in [(g_mvc[i], (mp - mm) / (2.0 * h)), (g_phys[i], (pp - pm) / (2.0 * h))] {
            let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
            assert!(rel <= 1e-3, "voxel {i}: ad {ad} fd {fd}");
        }
    }
}

#[test]
fn attached_loss_chains_through_the_graph() {
    let spec = BlockSpec::new([4, 4, 4], 2).unwrap();
    let target = noise(64, 1, 1.0);
    let x = Tensor::from_vec(noise(64, 2, 1.0));
    let w = MvcWeights::default();
    let err = finite_diff_check(
        |g, v| {
            let y = g.scale(v, 1.7);
            let y = g.gelu(y);
            let pair = mvc_loss_grad(g.value(y).data(), &target, &spec, &w, None)?;
            attach_loss(g, y, pair)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

fn end_to_end(loss: &str) -> f64 {
    let cfg = ModelConfig {
        variant: Variant::Bertswin,
        ..ModelConfig::default()
    };
    let params = init_params(&cfg, 41).unwrap();
    let (_, target, soft, surf) = desk_phantom(12);
    let plan = sample_mask(64, 0.75, 13).unwrap();
    let spec = BlockSpec::new([32; 3], 4).unwrap();
    let keep = patch_voxel_mask([32; 3], 8, &plan).unwrap();
    let masks = RegionMasks::new(soft, surf).restricted(&keep);
    finite_diff_check_many(
        |g, vars| {
            let p = params.bind_vars(vars.to_vec())?;
            let out = forward(g, &p, &cfg, &[&target], std::slice::from_ref(&plan))?;
            let pred = g.value(out.recon).data();
            let pair = match loss {
                "l2" => masked_recon_l2_grad(pred, &target, [32; 3], 8, &plan)?,
                "mvc" => mvc_loss_grad(pred, &target, &spec, &MvcWeights::default(), Some(&keep))?,
                _ => {
                    let (r, grad) = phys_loss_grad(
                        pred,
                        &target,
                        &spec,
                        &masks,
                        &PhysWeights::default(),
                        &MvcWeights::default(),
                    )?;
                    (r.total, grad)
                }
            };
            attach_loss(g, out.recon, pair)
        },
        params.tensors(),
        1e-4,
        2,
    )
    .unwrap()
}

#[test]
fn end_to_end_gradients_for_each_loss() {
    for loss in ["l2", "mvc", "phys"] {
        let err = end_to_end(loss);
        println!("{loss}: max rel err {err:.3e}");
        assert!(err <= 1e-3, "{loss}: {err}");
    }
}

fn brute_morph(mask: &[bool], n: usize, k: isize, erode: bool) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for z in 0..n as isize {
        for y in 0..n as isize {
            for x in 0..n as isize {
                let mut all = true;
                let mut any = false;
                for dz in -k..=k {
                    for dy in -k..=k {
                        for dx in -k..=k {
                            let (a, b, c) = (z + dz, y + dy, x + dx);
                            let inside = [a, b, c].iter().all(|v| *v >= 0 && *v < n as isize);
                            let v = inside && mask[((a * n as isize + b) * n as isize + c) as usize];
                            all &= v;
                            any |= v;
                        }
                    }
                }
                out[((z * n as isize + y) * n as isize + x) as usize] = if erode { all } else { any };
            }
        }
    }
    out
}

#[test]
fn shell_of_solid_cube_matches_composed_oracle() {
    let n = 16;
    let mut bone = vec![false; n * n * n];
    for z in 4..12 {
        for y in 4..12 {
            for x in 4..12 {
                bone[(z * n + y) * n + x] = true;
            }
        }
    }
    let shell = make_bone_shell_mask(&bone, [n; 3]).unwrap();
    let outer = brute_morph(&bone, n, 4, false);
    let inner = brute_morph(&bone, n, 2, true);
    let want: Vec<bool> = outer.iter().zip(&inner).map(|(o, i)| *o && !*i).collect();
    assert_eq!(shell, want);
    // bone voxels with an unset 6-neighbour lie in the shell
    for z in 4..12usize {
        for y in 4..12usize {
            for x in 4..12usize {
                if [z, y, x].iter().any(|c| *c == 4 || *c == 11) {
                    assert!(shell[(z * n + y) * n + x]);
                }
            }
        }
    }
    assert!(make_bone_shell_mask(&vec![false; 4096], [n; 3])
        .unwrap()
        .iter()
        .all(|v| !v));
}

#[test]
fn soft_mask_covers_phantom_halo_and_skips_air() {
    let (hu, seg) = gen_phantom(4, [32; 3], 8, Chirality::Left).unwrap();
    let soft = make_soft_tissue_mask(&hu);
    for (i, l) in seg.labels.iter().enumerate() {
        if *l == LABEL_SOFT {
            assert!(soft[i]);
        }
    }
    let air = Volume::new([4; 3], 1.0, vec![-1000.0; 64]).unwrap();
    assert!(make_soft_tissue_mask(&air).iter().all(|v| !v));
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(32) })]

    #[test]
    fn block_loss_ignores_voxel_order_within_blocks(seed in 0u64..10_000) {
        let spec = BlockSpec::new([4, 4, 8], 4).unwrap();
        let x = noise(128, seed, 1.0);
        let y = noise(128, seed + 1, 1.0);
        // swap voxels inside the first 4^3 block only
        let first = &spec.blocks(None)[0];
        let mut xp = x.clone();
        let mut yp = y.clone();
        for (a, b) in [(0usize, 27usize), (5, 60), (9, 52)] {
            xp.swap(first[a], first[b]);
            yp.swap(first[a], first[b]);
        }
        let w = MvcWeights::default();
        let l1 = mvc_loss(&x, &y, &spec, &w, None).unwrap();
        let l2 = mvc_loss(&xp, &yp, &spec, &w, None).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-12 * l1.max(1.0));
    }

    #[test]
    fn brightness_and_contrast_are_shift_invariant(seed in 0u64..10_000, c in -50.0f64..50.0) {
        let x = noise(40, seed, 3.0);
        let y = noise(40, seed + 7, 1.0);
        let xs: Vec<f64> = x.iter().map(|v| v + c).collect();
        let ys: Vec<f64> = y.iter().map(|v| v + c).collect();
        let a = mvc_decompose(&x, &y).unwrap();
        let b = mvc_decompose(&xs, &ys).unwrap();
        prop_assert!((a.brightness - b.brightness).abs() < 1e-9);
        prop_assert!((a.contrast - b.contrast).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_bounded(seed in 0u64..10_000) {
        let x = noise(30, seed, 1.0);
        let y = noise(30, seed + 3, 1.0);
        let s = ssim(&x, &y, 1e-4, 9e-4).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}

#[test]
fn all_masked_l2_is_plain_mse() {
    let t = noise(32768, 1, 1.0);
    let p = noise(32768, 2, 1.0);
    let plan = bertswin::model::MaskPlan::from_visible(64, vec![]).unwrap();
    let mse = t.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 32768.0;
    let l2 = masked_recon_l2(&p, &t, [32; 3], 8, &plan).unwrap();
    assert!((l2 - mse).abs() < 1e-12);
    assert_eq!(masked_recon_l2(&t, &t, [32; 3], 8, &plan).unwrap(), 0.0);
}
