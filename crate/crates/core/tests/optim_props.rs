use bertswin::optim::*;
use bertswin::rng::{keyed, uniform};
use bertswin::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

/// Straight-line reference on nested vectors.
struct Reference {
    m: Vec<Vec<f64>>,
    t: i32,
}

impl Reference {
    fn step(&mut self, p: &mut [Vec<f64>], g: &[Vec<f64>], h: &GcondHyper) -> Vec<f64> {
        let mut out = Vec::new();
        for k in 0..p.len() {
            let mut mh = vec![0.0; p[k].len()];
            for i in 0..p[k].len() {
                self.m[k][i] = h.beta1 * self.m[k][i] + (1.0 - h.beta1) * g[k][i];
                mh[i] = self.m[k][i] / (1.0 - h.beta1.powi(self.t + 1));
            }
            let mut pn = 0.0;
            let mut mn = 0.0;
            for i in 0..p[k].len() {
                pn += p[k][i] * p[k][i];
                mn += mh[i] * mh[i];
            }
            let (pn, mn) = (pn.sqrt(), mn.sqrt());
            let mut lam = if pn > 0.0 { pn / (mn + h.eps) } else { 0.0 };
            if lam > h.lambda_clip {
                lam = h.lambda_clip;
            }
            for i in 0..p[k].len() {
                let s = if mh[i] > 0.0 {
                    1.0
                } else if mh[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                p[k][i] -= h.eta_gamma * lam * s;
                p[k][i] *= 1.0 - h.eta_gamma * h.weight_decay;
            }
            out.push(lam);
        }
        self.t += 1;
        out
    }
}

fn random_problem(seed: u64) -> (Vec<Tensor>, GcondHyper) {
    let mut rng = keyed(seed, 31, 0);
    let shapes = [vec![3, 4], vec![7], vec![2, 2, 2], vec![1]];
    let params = shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| uniform(&mut rng, -1.0, 1.0)))
        .collect();
    let h = GcondHyper {
        eta_gamma: uniform(&mut rng, 1e-4, 1e-2),
        beta1: uniform(&mut rng, 0.5, 0.99),
        eps: 1e-8,
        lambda_clip: uniform(&mut rng, 0.5, 20.0),
        weight_decay: uniform(&mut rng, 0.0, 0.1),
    };
    (params, h)
}

fn random_grads(params: &[Tensor], rng: &mut impl Rng) -> Vec<Tensor> {
    params
        .iter()
        .map(|p| {
            Tensor::from_fn(p.shape(), |_| {
                // exact zeros exercise sign(0) = 0
                if rng.random::<f64>() < 0.1 {
                    0.0
                } else {
                    uniform(rng, -2.0, 2.0)
                }
            })
        })
        .collect()
}

#[test]
fn matches_scalar_reference_for_100_steps() {
    for seed in 0..5 {
        let (mut params, h) = random_problem(seed);
        let mut state = GcondState::new(&params);
        let mut rp: Vec<Vec<f64>> = params.iter().map(|t| t.data().to_vec()).collect();
        let mut reference = Reference {
            m: rp.iter().map(|v| vec![0.0; v.len()]).collect(),
            t: 0,
        };
        let mut rng = keyed(seed, 32, 0);
        for step in 0..100 {
            let grads = random_grads(&params, &mut rng);
            let gv: Vec<Vec<f64>> = grads.iter().map(|t| t.data().to_vec()).collect();
            let lam = gcond_step(&mut params, &grads, &mut state, &h).unwrap();
            let lam_ref = reference.step(&mut rp, &gv, &h);
            for (a, b) in lam.iter().zip(&lam_ref) {
                assert!((a - b).abs() <= 1e-12 * b.max(1.0), "seed {seed} step {step}");
            }
            for (t, r) in params.iter().zip(&rp) {
                for (a, b) in t.data().iter().zip(r) {
                    assert!((a - b).abs() <= 1e-12, "seed {seed} step {step}: {a} vs {b}");
                }
            }
        }
        assert_eq!(state.t, 100);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(32) })]

    #[test]
    fn sign_ratio_and_magnitude_laws(seed in 0u64..100_000, steps in 1usize..30) {
        let (mut params, h) = random_problem(seed);
        let h = GcondHyper { weight_decay: 0.0, ..h };
        let mut state = GcondState::new(&params);
        let mut rng = keyed(seed, 33, 0);
        for _ in 0..steps {
            let grads = random_grads(&params, &mut rng);
            let before = params.clone();
            let lam = gcond_step(&mut params, &grads, &mut state, &h).unwrap();
            let corr = 1.0 - h.beta1.powi(state.t as i32);
            for (k, m) in state.m.iter().enumerate() {
                prop_assert!(lam[k] >= 0.0 && lam[k] <= h.lambda_clip);
                for v in m.data() {
                    prop_assert_eq!((v / corr).signum() == v.signum(), true);
                }
                let step = params[k].max_abs_diff(&before[k]);
                prop_assert!(step <= h.eta_gamma * h.lambda_clip * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn direction_ignores_gradient_scale(seed in 0u64..100_000, c in 0.001f64..1000.0) {
        let (params, h) = random_problem(seed);
        let mut rng = keyed(seed, 34, 0);
        let grads: Vec<Vec<Tensor>> = (0..10).map(|_| random_grads(&params, &mut rng)).collect();
        let mut s1 = GcondState::new(&params);
        let mut s2 = GcondState::new(&params);
        let (mut p1, mut p2) = (params.clone(), params.clone());
        for g in &grads {
            let scaled: Vec<Tensor> = g
                .iter()
                .map(|t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap())
                .collect();
            gcond_step(&mut p1, g, &mut s1, &h).unwrap();
            gcond_step(&mut p2, &scaled, &mut s2, &h).unwrap();
            for (a, b) in s1.m.iter().zip(&s2.m) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert_eq!(x.signum(), y.signum());
                    prop_assert_eq!(*x == 0.0, *y == 0.0);
                }
            }
        }
    }
}

#[test]
fn one_buffer_versus_two() {
    let (params, _) = random_problem(0);
    let n: usize = params.iter().map(Tensor::numel).sum();
    let g = state_memory_report(&OptState::Gcond(GcondState::new(&params)));
    let a = state_memory_report(&OptState::AdamW(AdamState::new(&params)));
    assert_eq!(g.aux_scalars, n);
    assert_eq!(a.aux_scalars, 2 * n);
    assert_eq!(OptState::Gcond(GcondState::new(&params)).buffers().len(), 1);
    assert_eq!(OptState::AdamW(AdamState::new(&params)).buffers().len(), 2);
}
