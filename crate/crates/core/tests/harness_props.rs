use bertswin::harness::*;
use bertswin::model::TensorArchive;
use bertswin::Error;
use proptest::prelude::*;

/// Desk model, shortened schedule.
fn short(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.schedule.steps = steps;
    cfg.schedule.val_every = 2;
    cfg
}

#[test]
fn identical_configs_give_identical_streams_and_checkpoints() {
    let cfg = short(4);
    let a = run_pretrain(&cfg).unwrap();
    let b = run_pretrain(&cfg).unwrap();
    assert_eq!(a.lines, b.lines);
    assert_eq!(a.checkpoint_digest, b.checkpoint_digest);
    assert!(!a.lines.is_empty());
}

#[test]
fn every_line_is_standalone_json_with_monotone_steps() {
    let mut cfg = short(4);
    cfg.loss.kind = LossKind::Phys;
    let s = run_pretrain(&cfg).unwrap();
    let mut last = 0;
    for line in &s.lines {
        let rec: MetricsRecord = serde_json::from_str(line).unwrap();
        assert!(rec.step >= last);
        last = rec.step;
        assert!(rec.components.is_some());
    }
    let val = s.records.iter().find(|r| r.split == Split::Val).unwrap();
    assert!(val.mvc_soft.is_some() && val.mvc_surf.is_some());
}

#[test]
fn wall_time_is_opt_in() {
    let mut cfg = short(1);
    assert!(!run_pretrain(&cfg).unwrap().lines[0].contains("wall_ms"));
    cfg.record_wall_time = true;
    assert!(run_pretrain(&cfg).unwrap().lines[0].contains("wall_ms"));
}

#[test]
fn resume_reproduces_the_uninterrupted_suffix() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [OptimizerKind::Gcond, OptimizerKind::Adamw] {
        let mut full = short(6);
        full.optimizer.kind = kind;
        let whole = run_pretrain(&full).unwrap();

        let mut first = full.clone();
        first.schedule.steps = 3;
        first.out_dir = Some(dir.path().join(format!("{kind:?}")));
        run_pretrain(&first).unwrap();

        let mut rest = full.clone();
        rest.out_dir = first.out_dir.clone();
        let ck = dir.path().join(format!("{kind:?}")).join("checkpoint");
        let resumed = resume_pretrain(&rest, &ck).unwrap();

        let after = |s: &RunSummary| -> Vec<String> {
            s.records
                .iter()
                .zip(&s.lines)
                .filter(|(r, _)| r.step > 3)
                .map(|(_, l)| l.clone())
                .collect()
        };
        assert_eq!(after(&resumed), after(&whole), "{kind:?}");
        assert_eq!(resumed.checkpoint.tensors, whole.checkpoint.tensors, "{kind:?}");

        // the appended file holds the first segment followed by the resumed one
        let text = std::fs::read_to_string(first.out_dir.unwrap().join("metrics.jsonl")).unwrap();
        assert!(text.lines().count() > resumed.lines.len());
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&short(2)).unwrap();
    t.train_step().unwrap();
    let a = t.checkpoint().unwrap();
    a.save(dir.path()).unwrap();
    let b = TensorArchive::load(dir.path()).unwrap();
    assert_eq!(a, b);
    for ((_, x), (_, y)) in a.tensors.iter().zip(&b.tensors) {
        let bits = |t: &bertswin::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x), bits(y));
    }
    let back = Trainer::resume(&short(2), &b).unwrap();
    assert_eq!(back.params, t.params);
    assert_eq!(back.opt, t.opt);
    assert_eq!(back.step, 1);
}

#[test]
fn corrupted_manifest_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    Trainer::new(&short(1))
        .unwrap()
        .checkpoint()
        .unwrap()
        .save(dir.path())
        .unwrap();
    let path = dir.path().join("manifest.txt");
    let text = std::fs::read_to_string(&path).unwrap();
    let line = text.lines().find(|l| l.starts_with("tensor ")).unwrap();
    let mut parts: Vec<&str> = line.split(' ').collect();
    parts[3] = "many";
    std::fs::write(&path, text.replacen(line, &parts.join(" "), 1)).unwrap();
    let e = TensorArchive::load(dir.path()).unwrap_err();
    assert!(e.to_string().contains("tensor.count"), "{e}");
}

#[test]
fn resume_rejects_a_different_model() {
    let a = Trainer::new(&short(1)).unwrap().checkpoint().unwrap();
    let mut other = short(1);
    other.model.depth = 1;
    match Trainer::resume(&other, &a) {
        Err(Error::Config(m)) => assert!(m.contains("model"), "{m}"),
        r => panic!("expected a config error, got {:?}", r.map(|t| t.step)),
    }
}

#[test]
fn early_stop_fires_after_patience_validations() {
    let mut cfg = short(10);
    cfg.schedule.val_every = 1;
    // nothing can improve by 1e9, so the first validation sets the best and
    // the next two count against patience
    cfg.schedule.early_stop = EarlyStop {
        metric: ValMetric::MaskedL2,
        patience: 2,
        threshold: 1e9,
    };
    let s = run_pretrain(&cfg).unwrap();
    assert!(s.stopped_early);
    assert_eq!(s.final_step, 3);
}

#[test]
fn compare_identical_configs_is_parity() {
    let cfg = short(4);
    let r = run_compare(
        &cfg,
        &cfg,
        CompareTarget {
            metric: ValMetric::MaskedL2,
            value: 1e6,
        },
    )
    .unwrap();
    assert_eq!(r.speedups[0].ratio, Some(1.0));
    assert_eq!(r.cells[0].steps_to_target, Some(2));
}

#[test]
fn zero_learning_rate_never_reaches_target() {
    let a = short(4);
    let mut b = a.clone();
    b.optimizer = b.optimizer.clone().with_lr(0.0);
    // the untouched model scores exactly its initial value forever
    let start = Trainer::new(&b).unwrap().validate().unwrap().masked_l2;
    let r = run_compare(
        &a,
        &b,
        CompareTarget {
            metric: ValMetric::MaskedL2,
            value: start - 1e-9,
        },
    )
    .unwrap();
    assert!(r.cells[0].steps_to_target.is_some());
    assert_eq!(r.cells[1].steps_to_target, None);
    assert!(r.speedups[0].ratio.is_none());
    assert!(r.to_text().contains("not reached"));
}

#[test]
fn config_is_written_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short(1);
    cfg.out_dir = Some(dir.path().to_path_buf());
    run_pretrain(&cfg).unwrap();
    let text = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    assert!(dir.path().join("checkpoint/manifest.txt").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn train_and_val_seeds_are_disjoint(seed in any::<u64>(), n_train in 1usize..64, n_val in 1usize..16) {
        let mut cfg = RunConfig::default();
        cfg.data.seed = seed;
        cfg.data.n_train = n_train;
        cfg.data.n_val = n_val;
        let (tr, va) = split_seeds(&cfg);
        prop_assert_eq!(tr.len(), n_train);
        prop_assert!(va.iter().all(|v| !tr.contains(v)));
    }

    #[test]
    fn batches_are_within_range(seed in any::<u64>(), step in 1u64..10_000) {
        let mut cfg = RunConfig::default();
        cfg.data.seed = seed;
        let (idx, plans) = batch_for_step(&cfg, step).unwrap();
        prop_assert_eq!(idx.len(), cfg.data.batch);
        prop_assert!(idx.iter().all(|i| *i < cfg.data.n_train));
        prop_assert!(plans.iter().all(|p| p.visible.len() == cfg.model.n_visible()));
    }
}
