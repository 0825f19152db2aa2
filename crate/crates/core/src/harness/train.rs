//! Deterministic pretraining loop, validation, early stopping and
//! checkpoints.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::RngCore;

use super::config::{LossKind, OptimizerKind, RunConfig, ValMetric};
use super::metrics::{MetricsRecord, MetricsSink, Split};
use crate::error::{Error, Result};
use crate::losses::{
    attach_loss, make_bone_shell_mask, make_soft_tissue_mask, masked_recon_l2, masked_recon_l2_grad, mvc_region,
    patch_voxel_mask, phys_loss_grad, BlockSpec, LossReport, RegionMasks, RegionTerm,
};
use crate::model::{forward, init_params, sample_mask_with, MaskPlan, ParamStore, TensorArchive};
use crate::optim::{adamw_step, gcond_step, AdamState, GcondState, OptState};
use crate::rng::{keyed, streams};
use crate::synthvol::{compute_norm_stats, gen_phantom, hu_normalize, Chirality, NormStats, LABEL_BONE};
use crate::tensor::{Graph, Tensor};

/// One phantom in normalized units with its raw-HU region masks.
#[derive(Clone, Debug)]
pub struct Sample {
    pub seed: u64,
    pub volume: Vec<f64>,
    pub soft: Vec<bool>,
    pub shell: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// Fixed per validation phantom so every validation scores the same voxels.
    pub val_plans: Vec<MaskPlan>,
    pub stats: NormStats,
}

/// Phantom seeds for the train and validation splits. Validation ids follow
/// the training ids, so the two sets cannot overlap.
pub fn split_seeds(cfg: &RunConfig) -> (Vec<u64>, Vec<u64>) {
    let base = keyed(cfg.data.seed, streams::PHANTOM, 0).next_u64();
    let n = cfg.data.n_train as u64;
    let train = (0..n).map(|i| base.wrapping_add(i)).collect();
    let val = (0..cfg.data.n_val as u64).map(|i| base.wrapping_add(n + i)).collect();
    (train, val)
}

fn chirality(i: usize) -> Chirality {
    if i.is_multiple_of(2) {
        Chirality::Right
    } else {
        Chirality::Left
    }
}

impl Dataset {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let (train_seeds, val_seeds) = split_seeds(cfg);
        let train_set: BTreeSet<u64> = train_seeds.iter().copied().collect();
        if train_set.len() != train_seeds.len() || val_seeds.iter().any(|s| train_set.contains(s)) {
            return Err(Error::Contract("train and validation phantom seeds overlap".into()));
        }
        let m = &cfg.model;
        let size = [m.volume_size; 3];
        let render = |seeds: &[u64]| {
            seeds
                .iter()
                .enumerate()
                .map(|(i, s)| gen_phantom(*s, size, m.patch_size, chirality(i)))
                .collect::<Result<Vec<_>>>()
        };
        let raw_train = render(&train_seeds)?;
        let raw_val = render(&val_seeds)?;
        // statistics come from the training split only
        let stats = compute_norm_stats(&raw_train.iter().map(|(v, _)| v).collect::<Vec<_>>())?;
        let prepare = |raw: Vec<(crate::synthvol::Volume, crate::synthvol::SegMask)>, seeds: &[u64]| {
            raw.into_iter()
                .zip(seeds)
                .map(|((v, mask), s)| {
                    Ok(Sample {
                        seed: *s,
                        soft: make_soft_tissue_mask(&v),
                        shell: make_bone_shell_mask(&mask.select(LABEL_BONE), size)?,
                        volume: hu_normalize(&v, &stats).data,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        let train = prepare(raw_train, &train_seeds)?;
        let val = prepare(raw_val, &val_seeds)?;
        let val_plans = (0..val.len() as u64)
            .map(|i| {
                sample_mask_with(
                    m.n_tokens(),
                    m.mask_ratio,
                    &mut keyed(cfg.data.seed, streams::VAL_MASK, i),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            train,
            val,
            val_plans,
            stats,
        })
    }
}

/// Training-set indices and mask plans for `step`, keyed only by
/// `(seed, stream, step)`.
pub fn batch_for_step(cfg: &RunConfig, step: u64) -> Result<(Vec<usize>, Vec<MaskPlan>)> {
    let d = &cfg.data;
    let idx = rand::seq::index::sample(&mut keyed(d.seed, streams::BATCH, step), d.n_train, d.batch).into_vec();
    let mut rng = keyed(d.seed, streams::MASK, step);
    let plans = (0..d.batch)
        .map(|_| sample_mask_with(cfg.model.n_tokens(), cfg.model.mask_ratio, &mut rng))
        .collect::<Result<_>>()?;
    Ok((idx, plans))
}

struct Scored {
    loss: f64,
    grad: Vec<f64>,
    report: LossReport,
    masked_l2: f64,
}

fn score(cfg: &RunConfig, pred: &[f64], s: &Sample, plan: &MaskPlan) -> Result<Scored> {
    let m = &cfg.model;
    let size = [m.volume_size; 3];
    let masked_l2 = masked_recon_l2(pred, &s.volume, size, m.patch_size, plan)?;
    let keep = patch_voxel_mask(size, m.patch_size, plan)?;
    let spec = BlockSpec::new(size, cfg.loss.sub_patch)?;
    let l = &cfg.loss;
    let (report, grad) = match l.kind {
        LossKind::L2 => {
            let (v, g) = masked_recon_l2_grad(pred, &s.volume, size, m.patch_size, plan)?;
            (
                LossReport {
                    total: v,
                    ..LossReport::default()
                },
                g,
            )
        }
        LossKind::Mvc => {
            let region = (!l.all_patches).then_some(keep.as_slice());
            let (term, g) = mvc_region(pred, &s.volume, &spec, &l.mvc, region)?;
            (
                LossReport {
                    total: term.loss,
                    global: Some(term),
                    ..LossReport::default()
                },
                g,
            )
        }
        LossKind::Phys => {
            let masks = RegionMasks::new(s.soft.clone(), s.shell.clone());
            let masks = if l.all_patches { masks } else { masks.restricted(&keep) };
            phys_loss_grad(pred, &s.volume, &spec, &masks, &l.phys, &l.mvc)?
        }
    };
    Ok(Scored {
        loss: report.total,
        grad,
        report,
        masked_l2,
    })
}

/// Mean of per-sample reports; a region term averages over the samples
/// where it contributed.
fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let avg = |pick: fn(&LossReport) -> Option<RegionTerm>| {
        let terms: Vec<RegionTerm> = reports.iter().filter_map(pick).collect();
        (!terms.is_empty()).then(|| {
            let k = terms.len() as f64;
            RegionTerm {
                loss: terms.iter().map(|t| t.loss).sum::<f64>() / k,
                brightness: terms.iter().map(|t| t.brightness).sum::<f64>() / k,
                contrast: terms.iter().map(|t| t.contrast).sum::<f64>() / k,
                structure: terms.iter().map(|t| t.structure).sum::<f64>() / k,
                blocks: terms.iter().map(|t| t.blocks).sum(),
            }
        })
    };
    let mut skipped: Vec<String> = reports.iter().flat_map(|r| r.skipped.iter().cloned()).collect();
    skipped.sort();
    skipped.dedup();
    LossReport {
        total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        global: avg(|r| r.global),
        soft: avg(|r| r.soft),
        surf: avg(|r| r.surf),
        skipped,
    }
}

fn first_non_finite(data: &[f64]) -> bool {
    data.iter().any(|v| !v.is_finite())
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct EarlyState {
    best: f64,
    bad: u64,
    stopped: bool,
}

/// Result of [`run_pretrain`] and [`Trainer::run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<MetricsRecord>,
    /// Serialized metrics, one JSON object per line.
    pub lines: Vec<String>,
    pub final_step: u64,
    pub stopped_early: bool,
    pub checkpoint: TensorArchive,
    pub checkpoint_digest: String,
}

impl RunSummary {
    pub fn train_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.loss)
            .collect()
    }

    /// First validation step at which `metric <= target`.
    pub fn steps_to_target(&self, metric: ValMetric, target: f64) -> Option<u64> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Val)
            .find(|r| r.metric(metric).is_some_and(|v| v <= target))
            .map(|r| r.step)
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub params: ParamStore,
    pub opt: OptState,
    pub step: u64,
    early: EarlyState,
    clock: Instant,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = Dataset::generate(cfg)?;
        let params = init_params(&cfg.model, cfg.data.seed)?;
        let opt = match cfg.optimizer.kind {
            OptimizerKind::Gcond => OptState::Gcond(GcondState::new(params.tensors())),
            OptimizerKind::Adamw => OptState::AdamW(AdamState::new(params.tensors())),
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            params,
            opt,
            step: 0,
            early: EarlyState {
                best: f64::INFINITY,
                bad: 0,
                stopped: false,
            },
            clock: Instant::now(),
        })
    }

    fn wall_ms(&self) -> Option<u64> {
        self.cfg
            .record_wall_time
            .then(|| u64::try_from(self.clock.elapsed().as_millis()).unwrap_or(u64::MAX))
    }

    /// One optimizer update; the record carries the pre-update batch loss.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let step = self.step + 1;
        let (idx, plans) = batch_for_step(&self.cfg, step)?;
        let batch: Vec<&[f64]> = idx.iter().map(|i| self.data.train[*i].volume.as_slice()).collect();
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, true);
        let out = forward(&mut g, &bound, &self.cfg.model, &batch, &plans)?;
        let recon = g.value(out.recon).data().to_vec();
        if first_non_finite(&recon) {
            return Err(Error::NonFinite {
                step,
                tensor: "recon".into(),
            });
        }
        let n = recon.len() / batch.len();
        let nb = batch.len() as f64;
        let mut grad = vec![0.0; recon.len()];
        let mut reports = Vec::with_capacity(batch.len());
        let (mut loss, mut l2) = (0.0, 0.0);
        for (b, (&i, plan)) in idx.iter().zip(&plans).enumerate() {
            let s = score(&self.cfg, &recon[b * n..(b + 1) * n], &self.data.train[i], plan)?;
            loss += s.loss / nb;
            l2 += s.masked_l2 / nb;
            grad[b * n..(b + 1) * n]
                .iter_mut()
                .zip(&s.grad)
                .for_each(|(d, v)| *d = v / nb);
            reports.push(s.report);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                tensor: "loss".into(),
            });
        }
        let lv = attach_loss(&mut g, out.recon, (loss, grad))?;
        g.backward(lv)?;
        let grads = bound.grads(&g);
        drop(bound);
        for (name, gr) in self.params.names().iter().zip(&grads) {
            if first_non_finite(gr.data()) {
                return Err(Error::NonFinite {
                    step,
                    tensor: format!("grad.{name}"),
                });
            }
        }
        let params = self.params.tensors_mut();
        match &mut self.opt {
            OptState::Gcond(s) => {
                gcond_step(params, &grads, s, &self.cfg.optimizer.gcond)?;
            }
            OptState::AdamW(s) => adamw_step(params, &grads, s, &self.cfg.optimizer.adamw)?,
        }
        for (name, p) in self.params.iter() {
            if first_non_finite(p.data()) {
                return Err(Error::NonFinite {
                    step,
                    tensor: name.to_string(),
                });
            }
        }
        self.step = step;
        let components = (self.cfg.loss.kind != LossKind::L2).then(|| mean_report(&reports));
        Ok(MetricsRecord {
            step,
            split: Split::Train,
            loss,
            masked_l2: l2,
            components,
            mvc_soft: None,
            mvc_surf: None,
            wall_ms: self.wall_ms(),
        })
    }

    /// Validation at the current step: configured loss, masked L2 and MVC
    /// over the soft-tissue and bone-shell regions.
    pub fn validate(&self) -> Result<MetricsRecord> {
        let cfg = &self.cfg;
        let size = [cfg.model.volume_size; 3];
        let batch: Vec<&[f64]> = self.data.val.iter().map(|s| s.volume.as_slice()).collect();
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let out = forward(&mut g, &bound, &cfg.model, &batch, &self.data.val_plans)?;
        let recon = g.value(out.recon).data();
        let n = recon.len() / batch.len();
        let spec = BlockSpec::new(size, cfg.loss.sub_patch)?;
        let (mut loss, mut l2) = (0.0, 0.0);
        let mut reports = Vec::new();
        let (mut soft, mut surf) = (Vec::new(), Vec::new());
        for (b, (s, plan)) in self.data.val.iter().zip(&self.data.val_plans).enumerate() {
            let pred = &recon[b * n..(b + 1) * n];
            let sc = score(cfg, pred, s, plan)?;
            loss += sc.loss;
            l2 += sc.masked_l2;
            reports.push(sc.report);
            let masks = RegionMasks::new(s.soft.clone(), s.shell.clone());
            let masks = if cfg.loss.all_patches {
                masks
            } else {
                masks.restricted(&patch_voxel_mask(size, cfg.model.patch_size, plan)?)
            };
            for (region, acc) in [(&masks.soft, &mut soft), (&masks.surf, &mut surf)] {
                match mvc_region(pred, &s.volume, &spec, &cfg.loss.mvc, Some(region)) {
                    Ok((t, _)) => acc.push(t.loss),
                    Err(Error::EmptyRegion(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        let nv = batch.len() as f64;
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Ok(MetricsRecord {
            step: self.step,
            split: Split::Val,
            loss: loss / nv,
            masked_l2: l2 / nv,
            components: (cfg.loss.kind != LossKind::L2).then(|| mean_report(&reports)),
            mvc_soft: mean(&soft),
            mvc_surf: mean(&surf),
            wall_ms: self.wall_ms(),
        })
    }

    fn observe(&mut self, rec: &MetricsRecord) {
        let es = &self.cfg.schedule.early_stop;
        match rec.metric(es.metric) {
            Some(v) if v < self.early.best - es.threshold => {
                self.early.best = v;
                self.early.bad = 0;
            }
            _ => self.early.bad += 1,
        }
        if es.patience > 0 && self.early.bad >= es.patience as u64 {
            self.early.stopped = true;
        }
    }

    pub fn stopped_early(&self) -> bool {
        self.early.stopped
    }

    /// Trains until `schedule.steps` or early stop, streaming every record
    /// into `sink`. A non-finite value writes an abort record first.
    pub fn run(&mut self, sink: &mut MetricsSink) -> Result<()> {
        let (steps, every) = (self.cfg.schedule.steps, self.cfg.schedule.val_every);
        while self.step < steps && !self.early.stopped {
            let rec = match self.train_step() {
                Ok(r) => r,
                Err(Error::NonFinite { step, tensor }) => {
                    sink.abort(step, &tensor)?;
                    return Err(Error::NonFinite { step, tensor });
                }
                Err(e) => return Err(e),
            };
            sink.push(&rec)?;
            let scheduled = every > 0 && self.step.is_multiple_of(every);
            if scheduled || (every > 0 && self.step == steps) {
                let v = self.validate()?;
                sink.push(&v)?;
                // the closing validation stays out of early stopping so a run
                // cut short at step k and resumed matches an uninterrupted one
                if scheduled {
                    self.observe(&v);
                }
            }
        }
        Ok(())
    }

    /// Parameters, optimizer buffers and loop state. Floating state is
    /// stored as tensors so it round-trips bit-exactly.
    pub fn checkpoint(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::default();
        a.meta.insert("config".into(), self.cfg.to_toml()?);
        a.meta.insert("step".into(), self.step.to_string());
        a.meta.insert("optimizer.t".into(), self.opt.step_count().to_string());
        a.meta.insert("early.bad".into(), self.early.bad.to_string());
        a.meta.insert("early.stopped".into(), self.early.stopped.to_string());
        a.tensors.push(("early.best".into(), Tensor::scalar(self.early.best)));
        for (name, t) in self.params.iter() {
            a.tensors.push((format!("param.{name}"), t.clone()));
        }
        let bufs = self.opt.buffers();
        for (slot, buf) in ["m", "v"].iter().zip(&bufs) {
            for (name, t) in self.params.names().iter().zip(buf.iter()) {
                a.tensors.push((format!("opt.{slot}.{name}"), t.clone()));
            }
        }
        Ok(a)
    }

    /// Rebuilds a trainer from `archive`. The model, loss, optimizer and data
    /// sections of `cfg` must match the checkpoint; the schedule may differ.
    pub fn resume(cfg: &RunConfig, archive: &TensorArchive) -> Result<Self> {
        let meta = |k: &str| {
            archive
                .meta
                .get(k)
                .ok_or_else(|| Error::parse("checkpoint", format!("missing meta field `{k}`")))
        };
        let num = |k: &str| {
            meta(k)?
                .parse::<u64>()
                .map_err(|e| Error::parse("checkpoint", format!("meta field `{k}`: {e}")))
        };
        let saved = RunConfig::from_toml(meta("config")?)?;
        for (name, same) in [
            ("model", saved.model == cfg.model),
            ("loss", saved.loss == cfg.loss),
            ("optimizer", saved.optimizer == cfg.optimizer),
            ("data", saved.data == cfg.data),
        ] {
            if !same {
                return Err(Error::Config(format!(
                    "checkpoint was written with a different `{name}` section"
                )));
            }
        }
        let mut t = Trainer::new(cfg)?;
        let tensor = |name: String| {
            archive
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::parse("checkpoint", format!("missing tensor `{name}`")))
        };
        let names = t.params.names().to_vec();
        for (name, slot) in names.iter().zip(t.params.tensors_mut()) {
            let v = tensor(format!("param.{name}"))?;
            if v.shape() != slot.shape() {
                return Err(Error::parse(
                    "checkpoint",
                    format!("tensor `param.{name}` has shape {:?}", v.shape()),
                ));
            }
            *slot = v;
        }
        let load = |slot: &str| {
            names
                .iter()
                .map(|n| tensor(format!("opt.{slot}.{n}")))
                .collect::<Result<Vec<_>>>()
        };
        let opt_t = num("optimizer.t")?;
        t.opt = match cfg.optimizer.kind {
            OptimizerKind::Gcond => OptState::Gcond(GcondState {
                m: load("m")?,
                t: opt_t,
            }),
            OptimizerKind::Adamw => OptState::AdamW(AdamState {
                m: load("m")?,
                v: load("v")?,
                t: opt_t,
            }),
        };
        t.step = num("step")?;
        t.early = EarlyState {
            best: tensor("early.best".into())?.data()[0],
            bad: num("early.bad")?,
            stopped: meta("early.stopped")? == "true",
        };
        Ok(t)
    }

    pub fn summary(&self, sink: &MetricsSink) -> Result<RunSummary> {
        let checkpoint = self.checkpoint()?;
        Ok(RunSummary {
            records: sink.records().to_vec(),
            lines: sink.lines().to_vec(),
            final_step: self.step,
            stopped_early: self.early.stopped,
            checkpoint_digest: checkpoint.digest()?,
            checkpoint,
        })
    }
}

fn open_sink(cfg: &RunConfig, append: bool) -> Result<MetricsSink> {
    match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            MetricsSink::to_file(&dir.join("metrics.jsonl"), append)
        }
        None => Ok(MetricsSink::memory()),
    }
}

fn finish(t: &Trainer, sink: &MetricsSink) -> Result<RunSummary> {
    let summary = t.summary(sink)?;
    if let Some(dir) = &t.cfg.out_dir {
        summary.checkpoint.save(&dir.join("checkpoint"))?;
    }
    Ok(summary)
}

/// Full pretraining run. With `out_dir` set, writes `config.toml`,
/// `metrics.jsonl` and `checkpoint/` there.
pub fn run_pretrain(cfg: &RunConfig) -> Result<RunSummary> {
    let mut t = Trainer::new(cfg)?;
    let mut sink = open_sink(cfg, false)?;
    t.run(&mut sink)?;
    finish(&t, &sink)
}

/// Continues the run saved in `checkpoint` up to `cfg.schedule.steps`,
/// appending to the metrics stream in `out_dir`.
pub fn resume_pretrain(cfg: &RunConfig, checkpoint: &Path) -> Result<RunSummary> {
    let archive = TensorArchive::load(checkpoint)?;
    let mut t = Trainer::resume(cfg, &archive)?;
    let mut sink = open_sink(cfg, true)?;
    t.run(&mut sink)?;
    finish(&t, &sink)
}
