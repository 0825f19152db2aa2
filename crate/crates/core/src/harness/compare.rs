//! Steps-to-target comparisons and the desk experiment matrix.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{LossKind, OptimizerKind, RunConfig, ValMetric};
use super::train::{run_pretrain, RunSummary};
use crate::error::{Error, Result};
use crate::model::Variant;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareTarget {
    pub metric: ValMetric,
    pub value: f64,
}

/// Validation masked L2 the desk cells are compared at.
pub const DESK_TARGET: CompareTarget = CompareTarget {
    metric: ValMetric::MaskedL2,
    value: 0.5,
};

/// Trailing window for the smoke reduction.
pub const SMOKE_WINDOW: usize = 10;

/// Mean of the last `window` train losses over the first one. Averaging the
/// tail keeps single noisy batches from deciding the outcome.
pub fn smoke_reduction(train_losses: &[f64], window: usize) -> Result<f64> {
    if window == 0 || train_losses.len() < window || train_losses[0] == 0.0 {
        return Err(Error::Contract(format!(
            "smoke reduction needs {window} losses and a non-zero first loss"
        )));
    }
    let tail = &train_losses[train_losses.len() - window..];
    Ok(tail.iter().sum::<f64>() / window as f64 / train_losses[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub label: String,
    /// `None` when the target was not reached.
    pub steps_to_target: Option<u64>,
    pub steps_run: u64,
    pub best_val: Option<f64>,
    pub first_train_loss: f64,
    /// Tail-mean train loss over the first one.
    pub train_reduction: f64,
}

impl CellOutcome {
    pub fn from_summary(label: &str, s: &RunSummary, target: CompareTarget) -> Result<Self> {
        let losses = s.train_losses();
        let best_val = s
            .records
            .iter()
            .filter_map(|r| {
                (r.split == super::Split::Val)
                    .then(|| r.metric(target.metric))
                    .flatten()
            })
            .min_by(f64::total_cmp);
        Ok(CellOutcome {
            label: label.to_string(),
            steps_to_target: s.steps_to_target(target.metric, target.value),
            steps_run: s.final_step,
            best_val,
            first_train_loss: losses.first().copied().unwrap_or(f64::NAN),
            train_reduction: smoke_reduction(&losses, SMOKE_WINDOW.min(losses.len()))?,
        })
    }

    fn steps_text(&self) -> String {
        self.steps_to_target
            .map_or_else(|| format!("not reached ({} steps)", self.steps_run), |s| s.to_string())
    }
}

/// Steps-to-target ratio of `baseline` over `candidate`; above 1 means the
/// candidate got there in fewer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub candidate: String,
    pub baseline: String,
    pub ratio: Option<f64>,
    /// Set when only the candidate reached the target: the ratio is at
    /// least this value.
    pub lower_bound: Option<f64>,
}

impl Speedup {
    pub fn between(candidate: &CellOutcome, baseline: &CellOutcome) -> Self {
        let (ratio, lower_bound) = match (candidate.steps_to_target, baseline.steps_to_target) {
            (Some(c), Some(b)) => (Some(b as f64 / c as f64), None),
            (Some(c), None) => (None, Some(baseline.steps_run as f64 / c as f64)),
            _ => (None, None),
        };
        Speedup {
            candidate: candidate.label.clone(),
            baseline: baseline.label.clone(),
            ratio,
            lower_bound,
        }
    }

    pub fn describe(&self) -> String {
        match (self.ratio, self.lower_bound) {
            (Some(r), _) if r > 1.0 => format!("{r:.2}x (candidate faster)"),
            (Some(r), _) if r < 1.0 => format!("{r:.2}x (baseline faster)"),
            (Some(r), _) => format!("{r:.2}x (parity)"),
            (None, Some(lb)) => format!("> {lb:.2}x (candidate faster, baseline not reached)"),
            _ => "not reached".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub target: CompareTarget,
    pub cells: Vec<CellOutcome>,
    pub speedups: Vec<Speedup>,
}

impl CompareReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "target: validation {:?} <= {}",
            self.target.metric, self.target.value
        );
        let _ = writeln!(
            s,
            "{:<26} {:>22} {:>10} {:>12}",
            "cell", "steps to target", "best val", "train drop"
        );
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<26} {:>22} {:>10} {:>11.1}%",
                c.label,
                c.steps_text(),
                c.best_val.map_or_else(|| "-".into(), |v| format!("{v:.4}")),
                100.0 * (1.0 - c.train_reduction)
            );
        }
        for sp in &self.speedups {
            let _ = writeln!(s, "speedup {} vs {}: {}", sp.candidate, sp.baseline, sp.describe());
        }
        s
    }
}

fn comparable(a: &RunConfig, b: &RunConfig) -> Result<()> {
    if a.data != b.data || a.schedule.val_every != b.schedule.val_every || a.schedule.steps != b.schedule.steps {
        return Err(Error::Config(
            "compared runs must share data seeds and the validation schedule".into(),
        ));
    }
    if a.schedule.val_every == 0 {
        return Err(Error::Config("comparison needs schedule.val_every > 0".into()));
    }
    Ok(())
}

/// Runs `a` (candidate) and `b` (baseline) and reports steps-to-target.
pub fn run_compare(a: &RunConfig, b: &RunConfig, target: CompareTarget) -> Result<CompareReport> {
    comparable(a, b)?;
    let sa = run_pretrain(a)?;
    let sb = run_pretrain(b)?;
    let ca = CellOutcome::from_summary("A", &sa, target)?;
    let cb = CellOutcome::from_summary("B", &sb, target)?;
    let speedups = vec![Speedup::between(&ca, &cb)];
    Ok(CompareReport {
        target,
        cells: vec![ca, cb],
        speedups,
    })
}

/// The five desk cells: both architectures under both optimizers with the
/// L2 objective, plus BertsWin with the region-weighted loss under GCond.
pub fn desk_cells(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let cell = |variant: Variant, loss: LossKind, opt: OptimizerKind| {
        let mut c = base.clone();
        c.model.variant = variant;
        c.loss.kind = loss;
        c.optimizer.kind = opt;
        c
    };
    vec![
        (
            "bertswin-l2-gcond".into(),
            cell(Variant::Bertswin, LossKind::L2, OptimizerKind::Gcond),
        ),
        (
            "bertswin-l2-adamw".into(),
            cell(Variant::Bertswin, LossKind::L2, OptimizerKind::Adamw),
        ),
        (
            "vit-l2-gcond".into(),
            cell(Variant::VitSparse, LossKind::L2, OptimizerKind::Gcond),
        ),
        (
            "vit-l2-adamw".into(),
            cell(Variant::VitSparse, LossKind::L2, OptimizerKind::Adamw),
        ),
        (
            "bertswin-phys-gcond".into(),
            cell(Variant::Bertswin, LossKind::Phys, OptimizerKind::Gcond),
        ),
    ]
}

/// Outcomes for already-run desk cells, with the architecture speedup
/// (both under AdamW) and the architecture-plus-optimizer speedup
/// (BertsWin/GCond against ViT/AdamW).
pub fn desk_report(runs: &[(String, RunSummary)], target: CompareTarget) -> Result<CompareReport> {
    let cells = runs
        .iter()
        .map(|(l, s)| CellOutcome::from_summary(l, s, target))
        .collect::<Result<Vec<_>>>()?;
    let find = |l: &str| cells.iter().find(|c| c.label == l);
    let mut speedups = Vec::new();
    for (cand, base) in [
        ("bertswin-l2-adamw", "vit-l2-adamw"),
        ("bertswin-l2-gcond", "vit-l2-adamw"),
    ] {
        if let (Some(c), Some(b)) = (find(cand), find(base)) {
            speedups.push(Speedup::between(c, b));
        }
    }
    Ok(CompareReport {
        target,
        cells,
        speedups,
    })
}

/// Runs every desk cell and reports them together.
pub fn run_desk_matrix(base: &RunConfig, target: CompareTarget) -> Result<(CompareReport, Vec<(String, RunSummary)>)> {
    let mut runs = Vec::new();
    for (label, mut cfg) in desk_cells(base) {
        cfg.out_dir = base.out_dir.as_ref().map(|d| d.join(&label));
        runs.push((label, run_pretrain(&cfg)?));
    }
    Ok((desk_report(&runs, target)?, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_uses_the_tail_mean() {
        let l = [2.0, 1.5, 1.0, 0.5, 1.5];
        assert_eq!(smoke_reduction(&l, 2).unwrap(), 0.5);
        assert!(smoke_reduction(&l, 6).is_err());
    }

    fn outcome(label: &str, steps: Option<u64>) -> CellOutcome {
        CellOutcome {
            label: label.into(),
            steps_to_target: steps,
            steps_run: 200,
            best_val: None,
            first_train_loss: 1.0,
            train_reduction: 0.5,
        }
    }

    #[test]
    fn speedup_cases() {
        let s = Speedup::between(&outcome("a", Some(50)), &outcome("b", Some(150)));
        assert_eq!(s.ratio, Some(3.0));
        let s = Speedup::between(&outcome("a", Some(50)), &outcome("b", None));
        assert_eq!((s.ratio, s.lower_bound), (None, Some(4.0)));
        assert_eq!(s.describe(), "> 4.00x (candidate faster, baseline not reached)");
        let s = Speedup::between(&outcome("a", None), &outcome("b", Some(10)));
        assert_eq!(s.describe(), "not reached");
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.data.seed = 1;
        assert!(run_compare(&a, &b, DESK_TARGET).unwrap_err().is_config());
    }
}
