use bertswin::complexity::{
    crossover_table, empirical_op_count, fit_exponent, flops_model, reference_models, scaling_exponents, ArchParams,
};
use bertswin::model::{ModelConfig, Variant};
use bertswin::tensor::{count_macs, Graph, Tensor};

/// Published totals per (volume, patch): BertsWin Base, BertsWin Small, ViT Base.
const TABLE: [(usize, usize, [f64; 3]); 3] = [
    (224, 16, [223.8, 123.9, 228.3]),
    (512, 16, [2673.1, 1479.9, 11035.5]),
    (512, 32, [1272.7, 1122.4, 658.1]),
];

fn argmin(v: &[f64]) -> usize {
    (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

#[test]
fn reference_totals_within_fifteen_percent() {
    let report = crossover_table(&[224, 512], &[16, 32]).unwrap();
    for (v, p, want) in TABLE {
        let got: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.volume == v && r.patch == p)
            .map(|r| r.total)
            .collect();
        assert_eq!(got.len(), 3);
        for (g, w) in got.iter().zip(want) {
            assert!((g / w - 1.0).abs() <= 0.15, "{v}^3 P{p}: {g} vs {w}");
        }
        assert_eq!(argmin(&got), argmin(&want), "{v}^3 P{p} cheapest model");
        assert_eq!(got[0] < got[2], want[0] < want[2], "{v}^3 P{p} base vs baseline");
        assert_eq!(got[1] < got[0], want[1] < want[0], "{v}^3 P{p} small vs base");
    }
}

#[test]
fn crossover_ratios() {
    let report = crossover_table(&[224, 512], &[16, 32]).unwrap();
    let ratio = |v, p| {
        report
            .ratios
            .iter()
            .find(|r| r.volume == v && r.patch == p)
            .unwrap()
            .vit_over_bertswin
    };
    assert!((0.87..=1.17).contains(&ratio(224, 16)), "{}", ratio(224, 16));
    assert!((3.5..=4.7).contains(&ratio(512, 16)), "{}", ratio(512, 16));
    assert!(ratio(512, 32) < 1.0);
}

#[test]
fn report_parts_sum_and_are_nonnegative() {
    let report = crossover_table(&[224, 448, 512], &[16, 32]).unwrap();
    for r in &report.rows {
        assert!(r.stem >= 0.0 && r.encoder >= 0.0 && r.decoder >= 0.0);
        assert!((r.total - (r.stem + r.encoder + r.decoder)).abs() <= 1e-9 * r.total);
    }
    assert_eq!(report.rows.len(), 3 * 3 * 2);
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 1 + report.rows.len());
    assert!(report.to_text().contains("BertsWin Small"));
}

#[test]
fn scaling_exponents_linear_vs_quadratic() {
    // grid sides 70, 98, 140, 196: multiples of the 7^3 window
    let (win, glob) = scaling_exponents(&[1120, 1568, 2240, 3136]).unwrap();
    assert!((0.95..=1.05).contains(&win), "windowed {win}");
    assert!((1.9..=2.1).contains(&glob), "global {glob}");
}

#[test]
fn exponent_fit_rejects_degenerate_input() {
    assert!(fit_exponent(&[1.0], &[1.0]).is_err());
    assert!(fit_exponent(&[1.0, 2.0], &[1.0, 0.0]).is_err());
    assert!(fit_exponent(&[2.0, 2.0], &[1.0, 3.0]).is_err());
}

fn desk(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        ..ModelConfig::default()
    }
}

fn analytic_macs(cfg: &ModelConfig) -> f64 {
    flops_model(cfg, &ArchParams::executed(cfg)).unwrap().total * 1e9 / 2.0
}

#[test]
fn desk_analytic_matches_counter() {
    let configs = [
        desk(Variant::Bertswin),
        desk(Variant::VitSparse),
        ModelConfig {
            volume_size: 48,
            window: 3,
            ..desk(Variant::Bertswin)
        },
        ModelConfig {
            patch_size: 16,
            volume_size: 64,
            ..desk(Variant::Bertswin)
        },
    ];
    for cfg in configs {
        let counted = empirical_op_count(&cfg, 3).unwrap() as f64;
        let analytic = analytic_macs(&cfg);
        let rel = (analytic / counted - 1.0).abs();
        assert!(rel <= 0.10, "{cfg:?}: analytic {analytic} counted {counted}");
    }
}

#[test]
fn doubling_depth_doubles_encoder() {
    for variant in [Variant::Bertswin, Variant::VitSparse] {
        let one = desk(variant);
        let two = ModelConfig {
            depth: 4,
            ..one.clone()
        };
        let zero = ModelConfig {
            depth: 0,
            ..one.clone()
        };
        let enc = |c: &ModelConfig| {
            empirical_op_count(c, 1).unwrap() - empirical_op_count(&ModelConfig { depth: 0, ..c.clone() }, 1).unwrap()
        };
        assert_eq!(enc(&two), 2 * enc(&one));
        assert_eq!(enc(&zero), 0);
        let a = |c: &ModelConfig| flops_model(c, &ArchParams::executed(c)).unwrap().encoder;
        assert!((a(&two) - 2.0 * a(&one)).abs() < 1e-15);
    }
}

#[test]
fn linear_toy_counts_exactly() {
    let (n, din, dout) = (7, 5, 3);
    let ((), macs) = count_macs(|| {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[n, din]));
        let w1 = g.constant(Tensor::zeros(&[din, dout]));
        let w2 = g.constant(Tensor::zeros(&[dout, din]));
        let h = g.linear(x, w1, None).unwrap();
        g.linear(h, w2, None).unwrap();
    });
    assert_eq!(macs, (2 * n * din * dout) as u64);
}

#[test]
fn reference_models_share_the_grid() {
    for (_, cfg) in reference_models(512, 32) {
        assert_eq!(cfg.n_tokens(), 16usize.pow(3));
        assert_eq!(cfg.n_visible(), 1024);
    }
}

#[test]
fn stem_and_encoder_columns_within_one_percent() {
    // (volume, patch, row, stem, encoder) for rows whose layer inventory is fully specified
    let cols = [
        (224, 16, 0, 81.7, 125.2),
        (224, 16, 1, 80.9, 33.5),
        (512, 16, 0, 976.0, 1495.2),
        (512, 16, 1, 966.4, 399.7),
        (512, 32, 0, 1026.8, 186.9),
        (512, 32, 1, 1024.4, 50.0),
        (512, 16, 2, 206.2, 3866.2),
    ];
    let report = crossover_table(&[224, 512], &[16, 32]).unwrap();
    for (v, p, row, stem, enc) in cols {
        let r = &report
            .rows
            .iter()
            .filter(|r| r.volume == v && r.patch == p)
            .nth(row)
            .unwrap();
        assert!(
            (r.stem / stem - 1.0).abs() < 0.01,
            "{} {v} P{p} stem {}",
            r.label,
            r.stem
        );
        assert!(
            (r.encoder / enc - 1.0).abs() < 0.01,
            "{} {v} P{p} encoder {}",
            r.label,
            r.encoder
        );
    }
}
