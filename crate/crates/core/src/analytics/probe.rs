//! Per-token segmentation probes on frozen features.

use serde::{Deserialize, Serialize};

use super::dice;
use crate::error::{Error, Result};
use crate::model::patchify;
use crate::optim::{adamw_step, AdamHyper, AdamState};
use crate::rng::{keyed, normal, streams};
use crate::synthvol::{SegMask, LABEL_BACKGROUND, LABEL_BONE, LABEL_SOFT};
use crate::tensor::{Graph, Tensor, Var};

/// Per-token label by majority vote over each `patch^3` block, in the
/// model's token order. Ties go to bone, then soft tissue, then background.
pub fn downsample_labels(mask: &SegMask, patch: usize) -> Result<Vec<u8>> {
    let as_f: Vec<f64> = mask.labels.iter().map(|l| f64::from(*l)).collect();
    let blocks = patchify(&as_f, mask.size, patch)?;
    Ok(blocks
        .rows()
        .map(|row| {
            let mut counts = [0usize; 3];
            for v in row {
                counts[*v as usize] += 1;
            }
            // max_by_key keeps the last maximum, so list in rising priority
            [LABEL_BACKGROUND, LABEL_SOFT, LABEL_BONE]
                .into_iter()
                .max_by_key(|l| counts[*l as usize])
                .unwrap_or(LABEL_BACKGROUND)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One projection per token (a 1×1×1 convolution).
    Linear,
    /// Projection, GELU, projection.
    TwoLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeOptions {
    pub head: HeadKind,
    pub steps: usize,
    pub lr: f64,
    pub hidden: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            head: HeadKind::Linear,
            steps: 500,
            lr: 1e-3,
            hidden: 32,
            n_classes: 3,
            seed: 0,
        }
    }
}

/// Frozen `[n_tokens, C]` features and the matching token labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSample {
    pub features: Tensor,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    pub kind: HeadKind,
    /// `[w, b]` or `[w1, b1, w2, b2]`.
    pub params: Vec<Tensor>,
}

impl ProbeHead {
    fn init(opts: &ProbeOptions, c: usize) -> Self {
        let mut rng = keyed(opts.seed, streams::PROBE, 0);
        let mut mat = |din: usize, dout: usize| {
            let s = 1.0 / (din as f64).sqrt();
            Tensor::from_fn(&[din, dout], |_| s * normal(&mut rng))
        };
        let params = match opts.head {
            HeadKind::Linear => vec![mat(c, opts.n_classes), Tensor::zeros(&[opts.n_classes])],
            HeadKind::TwoLayer => vec![
                mat(c, opts.hidden),
                Tensor::zeros(&[opts.hidden]),
                mat(opts.hidden, opts.n_classes),
                Tensor::zeros(&[opts.n_classes]),
            ],
        };
        ProbeHead {
            kind: opts.head,
            params,
        }
    }

    fn logits(&self, g: &mut Graph, x: Tensor, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<_> = self
            .params
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let x = g.constant(x);
        let out = match self.kind {
            HeadKind::Linear => g.linear(x, vars[0], Some(vars[1]))?,
            HeadKind::TwoLayer => {
                let h = g.linear(x, vars[0], Some(vars[1]))?;
                let h = g.gelu(h);
                g.linear(h, vars[2], Some(vars[3]))?
            }
        };
        Ok((out, vars))
    }

    /// Argmax class per token.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<u8>> {
        let mut g = Graph::new();
        let (out, _) = self.logits(&mut g, features.clone(), false)?;
        Ok(g.value(out)
            .rows()
            .map(|r| {
                (0..r.len())
                    .max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a)))
                    .unwrap_or(0) as u8
            })
            .collect())
    }
}

/// Mean softmax cross-entropy over rows and its gradient in the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    let sh = logits.shape();
    if sh.len() != 2 || sh[0] != labels.len() || sh[0] == 0 || labels.iter().any(|y| *y as usize >= sh[1]) {
        return Err(Error::Contract(format!(
            "cross-entropy of logits {sh:?} against {} labels",
            labels.len()
        )));
    }
    let (n, k) = (sh[0], sh[1]);
    let mut grad = vec![0.0; logits.numel()];
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.rows().zip(labels).enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y as usize];
        for c in 0..k {
            let p = (row[c] - m).exp() / z;
            grad[i * k + c] = (p - if c == y as usize { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub head: ProbeHead,
    /// Dice per class on the held-out samples, indexed by label.
    pub dice: Vec<f64>,
    pub first_loss: f64,
    pub final_loss: f64,
}

fn stack(samples: &[ProbeSample], n_classes: usize) -> Result<(Tensor, Vec<u8>)> {
    let c = samples
        .first()
        .map(|s| s.features.shape().get(1).copied().unwrap_or(0))
        .ok_or_else(|| Error::Contract("probe needs at least one sample".into()))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        let sh = s.features.shape();
        if sh.len() != 2 || sh[1] != c || sh[0] != s.labels.len() {
            return Err(Error::Contract(format!(
                "probe features {:?} do not match {} labels of width {c}",
                sh,
                s.labels.len()
            )));
        }
        if let Some(bad) = s.labels.iter().find(|l| **l as usize >= n_classes) {
            return Err(Error::Contract(format!("label {bad} outside {n_classes} classes")));
        }
        data.extend_from_slice(s.features.data());
        labels.extend_from_slice(&s.labels);
    }
    Ok((Tensor::new(vec![labels.len(), c], data)?, labels))
}

/// Trains a head on frozen `train` features with AdamW, full batch, and
/// scores per-class Dice on `test`.
pub fn probe_head_train(train: &[ProbeSample], test: &[ProbeSample], opts: &ProbeOptions) -> Result<ProbeOutcome> {
    if opts.n_classes < 2 || opts.steps == 0 || (opts.head == HeadKind::TwoLayer && opts.hidden == 0) {
        return Err(Error::Config(format!("invalid probe options {opts:?}")));
    }
    let (x, y) = stack(train, opts.n_classes)?;
    let (xt, yt) = stack(test, opts.n_classes)?;
    if xt.shape()[1] != x.shape()[1] {
        return Err(Error::Contract("train and test features differ in width".into()));
    }
    let mut head = ProbeHead::init(opts, x.shape()[1]);
    let hyper = AdamHyper {
        lr: opts.lr,
        ..AdamHyper::default()
    };
    hyper.validate()?;
    let mut state = AdamState::new(&head.params);
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    for step in 0..opts.steps {
        let mut g = Graph::new();
        let (logits, vars) = head.logits(&mut g, x.clone(), true)?;
        let (loss, grad) = softmax_cross_entropy(g.value(logits), &y)?;
        if step == 0 {
            first = loss;
        }
        last = loss;
        let l = g.scalar_fn(logits, loss, grad)?;
        g.backward(l)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(&head.params)
            .map(|(v, p)| g.grad_tensor(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        adamw_step(&mut head.params, &grads, &mut state, &hyper)?;
    }
    let pred = head.predict(&xt)?;
    let dice = (0..opts.n_classes as u8)
        .map(|c| {
            let a: Vec<bool> = pred.iter().map(|p| *p == c).collect();
            let b: Vec<bool> = yt.iter().map(|t| *t == c).collect();
            dice(&a, &b)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeOutcome {
        head,
        dice,
        first_loss: first,
        final_loss: last,
    })
}
