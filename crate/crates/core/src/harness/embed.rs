//! Frozen-encoder features for the embedding and segmentation probes.

use super::config::RunConfig;
use crate::analytics::{
    downsample_labels, probe_head_train, transform_set, EmbeddingLabel, EmbeddingSet, ProbeOptions, ProbeOutcome,
    ProbeSample, View,
};
use crate::error::{Error, Result};
use crate::model::{forward, pooled_features, MaskPlan, ModelConfig, ParamStore, TensorArchive};
use crate::rng::{keyed, streams};
use crate::synthvol::{
    gen_phantom_from, hu_normalize, Chirality, NormStats, PhantomParams, SegMask, Volume, CHIRALITY_AXIS,
};
use crate::tensor::{Graph, Tensor};

/// Contralateral parameters drift by this fraction of each sampling range.
pub const CONTRALATERAL_JITTER: f64 = 0.05;

/// Parameters and normalization saved in a pretraining checkpoint.
pub struct FrozenEncoder {
    pub run: RunConfig,
    pub params: ParamStore,
}

impl FrozenEncoder {
    pub fn from_checkpoint(archive: &TensorArchive) -> Result<Self> {
        let text = archive
            .meta
            .get("config")
            .ok_or_else(|| Error::parse("checkpoint", "missing meta field `config`"))?;
        let run = RunConfig::from_toml(text)?;
        let mut params = crate::model::init_params(&run.model, 0)?;
        let names = params.names().to_vec();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = archive
                .get(&format!("param.{name}"))
                .ok_or_else(|| Error::parse("checkpoint", format!("missing tensor `param.{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::parse(
                    "checkpoint",
                    format!("tensor `param.{name}` has shape {:?}", t.shape()),
                ));
            }
            *slot = t.clone();
        }
        Ok(FrozenEncoder { run, params })
    }

    /// Randomly initialized encoder, the untrained reference.
    pub fn untrained(run: &RunConfig) -> Result<Self> {
        Ok(FrozenEncoder {
            run: run.clone(),
            params: crate::model::init_params(&run.model, run.data.seed)?,
        })
    }

    pub fn model(&self) -> &ModelConfig {
        &self.run.model
    }

    /// `[n_tokens, C]` features of one normalized volume with nothing masked.
    pub fn token_features(&self, volume: &[f64]) -> Result<Tensor> {
        let cfg = self.model();
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let plan = MaskPlan::all_visible(cfg.n_tokens());
        let out = forward(&mut g, &bound, cfg, &[volume], &[plan])?;
        Ok(g.value(out.features).clone())
    }

    pub fn pooled(&self, volume: &[f64]) -> Result<Tensor> {
        pooled_features(&self.token_features(volume)?)
    }
}

/// A patient: the right joint and a slightly different left joint.
pub struct Patient {
    pub id: u64,
    pub right: (Volume, SegMask),
    pub left: (Volume, SegMask),
}

pub fn patient(seed: u64, id: u64, cfg: &ModelConfig) -> Result<Patient> {
    let size = [cfg.volume_size; 3];
    let base = PhantomParams::sample(id);
    let other = base.jittered(&mut keyed(seed, streams::AUGMENT, id), CONTRALATERAL_JITTER);
    Ok(Patient {
        id,
        right: gen_phantom_from(&base, id, size, cfg.patch_size, Chirality::Right)?,
        left: gen_phantom_from(&other, id ^ 1 << 63, size, cfg.patch_size, Chirality::Left)?,
    })
}

/// Pooled embeddings of `n` patients in every view the probe suite pairs:
/// both originals, both mirrored, and each geometric/intensity transform of
/// the right joint.
pub fn embedding_set(enc: &FrozenEncoder, stats: &NormStats, seed: u64, ids: &[u64]) -> Result<EmbeddingSet> {
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    let mut push = |v: &Volume, phantom: u64, chirality: Chirality, view: View| -> Result<()> {
        vectors.push(enc.pooled(&v.data)?);
        labels.push(EmbeddingLabel {
            phantom,
            chirality,
            view,
        });
        Ok(())
    };
    for &id in ids {
        let p = patient(seed, id, enc.model())?;
        let right = hu_normalize(&p.right.0, stats);
        let left = hu_normalize(&p.left.0, stats);
        push(&right, id, Chirality::Right, View::Original)?;
        push(&left, id, Chirality::Left, View::Original)?;
        push(&right.mirror(CHIRALITY_AXIS)?, id, Chirality::Right, View::Mirrored)?;
        push(&left.mirror(CHIRALITY_AXIS)?, id, Chirality::Left, View::Mirrored)?;
        for t in transform_set() {
            push(&t.apply(&right)?, id, Chirality::Right, View::Transformed(t.tag()))?;
        }
    }
    EmbeddingSet::new(vectors, labels)
}

/// Per-token features and majority labels for the right joints of `ids`.
pub fn seg_samples(enc: &FrozenEncoder, stats: &NormStats, seed: u64, ids: &[u64]) -> Result<Vec<ProbeSample>> {
    ids.iter()
        .map(|&id| {
            let p = patient(seed, id, enc.model())?;
            Ok(ProbeSample {
                features: enc.token_features(&hu_normalize(&p.right.0, stats).data)?,
                labels: downsample_labels(&p.right.1, enc.model().patch_size)?,
            })
        })
        .collect()
}

/// Trains a segmentation head on frozen features of `train` patients and
/// scores it on `test` patients.
pub fn seg_probe(
    enc: &FrozenEncoder,
    stats: &NormStats,
    seed: u64,
    train: &[u64],
    test: &[u64],
    opts: &ProbeOptions,
) -> Result<ProbeOutcome> {
    let tr = seg_samples(enc, stats, seed, train)?;
    let te = seg_samples(enc, stats, seed, test)?;
    probe_head_train(&tr, &te, opts)
}
