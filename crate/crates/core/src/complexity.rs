//! Closed-form FLOPs model (2 × MACs) for both architectures, the
//! resolution/patch crossover table, and instrumented counts for checking
//! the model against an executed forward pass.
//!
//! Norms, softmax, activations, biases and residual adds are not counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, init_params, sample_mask, ModelConfig, Variant};
use crate::tensor::{count_macs, Graph};

/// Which patches the embedding runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemScope {
    AllPatches,
    VisibleOnly,
}

/// Which tokens the encoder blocks are charged for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderScope {
    /// Visible tokens only (the 75%-masked accounting).
    Visible,
    /// Every grid position.
    FullGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Transposed-conv stack `C -> widths[0] -> widths[1] -> 1` with
    /// kernel = stride.
    ConvHead { widths: [usize; 2] },
    /// Token decoder over every grid position: linear `C -> dim`, `depth`
    /// global blocks with MLP width `mlp`, linear `dim -> patch^3`.
    Transformer { dim: usize, depth: usize, mlp: usize },
}

/// Internals the FLOPs model needs beyond [`ModelConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    /// Conv stem output channels per stride-2 stage; empty means a single
    /// linear patch embedding.
    pub stem_channels: Vec<usize>,
    pub stem_scope: StemScope,
    pub encoder_scope: EncoderScope,
    pub decoder: DecoderKind,
}

impl ArchParams {
    /// Reference accounting for the full-scale comparison: embeddings over
    /// every patch, encoders charged for visible tokens, the conv head for
    /// BertsWin and the token decoder for the sparse baseline.
    pub fn reference(cfg: &ModelConfig) -> Self {
        match cfg.variant {
            Variant::Bertswin => ArchParams {
                stem_channels: cfg.stem_widths()[1..].to_vec(),
                stem_scope: StemScope::AllPatches,
                encoder_scope: EncoderScope::Visible,
                decoder: DecoderKind::ConvHead { widths: [48, 16] },
            },
            Variant::VitSparse => ArchParams {
                stem_channels: vec![],
                stem_scope: StemScope::AllPatches,
                encoder_scope: EncoderScope::Visible,
                decoder: DecoderKind::Transformer {
                    dim: 384,
                    depth: 4,
                    mlp: 512,
                },
            },
        }
    }

    /// What [`model::forward`] actually executes for `cfg`.
    pub fn executed(cfg: &ModelConfig) -> Self {
        let dw = cfg.decoder_widths();
        let head = DecoderKind::ConvHead { widths: [dw[1], dw[2]] };
        match cfg.variant {
            Variant::Bertswin => ArchParams {
                stem_channels: cfg.stem_widths()[1..].to_vec(),
                stem_scope: StemScope::VisibleOnly,
                encoder_scope: EncoderScope::FullGrid,
                decoder: head,
            },
            Variant::VitSparse => ArchParams {
                stem_channels: vec![],
                stem_scope: StemScope::VisibleOnly,
                encoder_scope: EncoderScope::Visible,
                decoder: head,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub label: String,
    pub volume: usize,
    pub patch: usize,
    pub variant: Variant,
    pub mask_ratio: f64,
    /// GFLOPs.
    pub stem: f64,
    pub encoder: f64,
    pub decoder: f64,
    pub total: f64,
}

/// Per-token MACs of one transformer block's projections and MLP.
fn block_linear_macs(c: f64, hidden: f64) -> f64 {
    4.0 * c * c + 2.0 * c * hidden
}

/// Stem MACs for one patch.
fn stem_macs_per_patch(cfg: &ModelConfig, arch: &ArchParams) -> Result<f64> {
    let p = cfg.patch_size;
    if arch.stem_channels.is_empty() {
        return Ok((p.pow(3) * cfg.embed_dim) as f64);
    }
    if arch.stem_channels.len() != cfg.stem_stages() {
        return Err(Error::Config(format!(
            "{} stem stages cannot reduce a {p}^3 patch to 1^3",
            arch.stem_channels.len()
        )));
    }
    let mut macs = 0.0;
    let (mut side, mut c_in) = (p, 1);
    for &c_out in &arch.stem_channels {
        side /= 2;
        macs += (side.pow(3) * c_in * 27 * c_out) as f64;
        c_in = c_out;
    }
    Ok(macs + (c_in * cfg.embed_dim) as f64)
}

/// Analytic GFLOPs of one forward pass on one volume.
///
/// The grid need not divide into windows: a ragged grid is padded, and each
/// real token is still charged a full `window^3` attention span.
pub fn flops_model(cfg: &ModelConfig, arch: &ArchParams) -> Result<FlopsReport> {
    ModelConfig {
        window: 1,
        ..cfg.clone()
    }
    .validate()?;
    if cfg.window == 0 || cfg.window > cfg.grid_side() {
        return Err(Error::Config(format!(
            "window {} must lie in 1..={} for grid side {}",
            cfg.window,
            cfg.grid_side(),
            cfg.grid_side()
        )));
    }
    let n = cfg.n_tokens() as f64;
    let n_vis = cfg.n_visible() as f64;
    let c = cfg.embed_dim as f64;
    let depth = cfg.depth as f64;
    let hidden = cfg.hidden_dim() as f64;

    let stem_tokens = match arch.stem_scope {
        StemScope::AllPatches => n,
        StemScope::VisibleOnly => n_vis,
    };
    let stem = stem_tokens * stem_macs_per_patch(cfg, arch)?;

    let encoder = match cfg.variant {
        Variant::Bertswin => {
            let tokens = match arch.encoder_scope {
                EncoderScope::Visible => n_vis,
                EncoderScope::FullGrid => n,
            };
            let win = cfg.window.pow(3) as f64;
            depth * tokens * (block_linear_macs(c, hidden) + 2.0 * win * c)
        }
        Variant::VitSparse => {
            let tokens = match arch.encoder_scope {
                EncoderScope::Visible => n_vis,
                EncoderScope::FullGrid => n,
            };
            depth * (tokens * block_linear_macs(c, hidden) + 2.0 * tokens * tokens * c)
        }
    };

    let decoder = match &arch.decoder {
        DecoderKind::ConvHead { widths } => {
            let strides = cfg.decoder_strides();
            let chans = [cfg.embed_dim, widths[0], widths[1], 1];
            let mut side = cfg.grid_side();
            let mut macs = 0.0;
            for (i, s) in strides.iter().enumerate() {
                macs += (side.pow(3) * chans[i] * chans[i + 1] * s.pow(3)) as f64;
                side *= s;
            }
            macs
        }
        DecoderKind::Transformer { dim, depth, mlp } => {
            let (d, m) = (*dim as f64, *mlp as f64);
            let blocks = *depth as f64 * (n * block_linear_macs(d, m) + 2.0 * n * n * d);
            n * c * d + blocks + n * d * cfg.patch_size.pow(3) as f64
        }
    };

    let g = |macs: f64| 2.0 * macs / 1e9;
    let (stem, encoder, decoder) = (g(stem), g(encoder), g(decoder));
    Ok(FlopsReport {
        label: String::new(),
        volume: cfg.volume_size,
        patch: cfg.patch_size,
        variant: cfg.variant,
        mask_ratio: cfg.mask_ratio,
        stem,
        encoder,
        decoder,
        total: stem + encoder + decoder,
    })
}

/// Named full-scale configurations used in the comparison table.
pub fn reference_models(volume: usize, patch: usize) -> Vec<(String, ModelConfig)> {
    let base = ModelConfig {
        volume_size: volume,
        patch_size: patch,
        ..ModelConfig::canonical()
    };
    let small = ModelConfig {
        embed_dim: 384,
        heads: 6,
        ..base.clone()
    };
    let vit = ModelConfig {
        variant: Variant::VitSparse,
        ..base.clone()
    };
    vec![
        ("BertsWin Base".into(), base),
        ("BertsWin Small".into(), small),
        ("ViT Base (sparse)".into(), vit),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub volume: usize,
    pub patch: usize,
    /// Sparse baseline total over BertsWin Base total.
    pub vit_over_bertswin: f64,
    pub cheaper: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub rows: Vec<FlopsReport>,
    pub ratios: Vec<RatioRow>,
}

/// Every (resolution, patch, model) total plus the baseline/BertsWin ratio
/// per setting.
pub fn crossover_table(resolutions: &[usize], patches: &[usize]) -> Result<CrossoverReport> {
    if resolutions.is_empty() || patches.is_empty() {
        return Err(Error::Config(
            "crossover table needs at least one resolution and patch size".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for &v in resolutions {
        for &p in patches {
            let mut setting = Vec::new();
            for (label, cfg) in reference_models(v, p) {
                let cfg = fit_window(cfg);
                let mut r = flops_model(&cfg, &ArchParams::reference(&cfg))?;
                r.label = label;
                setting.push(r);
            }
            let (bw, vit) = (setting[0].total, setting[2].total);
            let cheapest = setting
                .iter()
                .min_by(|a, b| a.total.total_cmp(&b.total))
                .map(|r| r.label.clone())
                .unwrap_or_default();
            ratios.push(RatioRow {
                volume: v,
                patch: p,
                vit_over_bertswin: vit / bw,
                cheaper: cheapest,
            });
            rows.extend(setting);
        }
    }
    Ok(CrossoverReport { rows, ratios })
}

/// Window side capped at the grid side.
fn fit_window(mut cfg: ModelConfig) -> ModelConfig {
    cfg.window = cfg.window.min(cfg.grid_side());
    cfg
}

impl CrossoverReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>7} {:>5} {:>10} {:>10} {:>10} {:>10}",
            "model", "volume", "patch", "stem", "encoder", "decoder", "total"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>7} {:>5} {:>10.1} {:>10.1} {:>10.1} {:>10.1}",
                r.label,
                format!("{}^3", r.volume),
                r.patch,
                r.stem,
                r.encoder,
                r.decoder,
                r.total
            );
        }
        let _ = writeln!(s, "\nbaseline / BertsWin Base (GFLOPs ratio)");
        for q in &self.ratios {
            let _ = writeln!(
                s,
                "{:>5}^3 P{:<3} {:>7.3}  cheapest: {}",
                q.volume, q.patch, q.vit_over_bertswin, q.cheaper
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,volume,patch,variant,stem_gflops,encoder_gflops,decoder_gflops,total_gflops\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.4},{:.4},{:.4},{:.4}",
                r.label,
                r.volume,
                r.patch,
                r.variant.as_str(),
                r.stem,
                r.encoder,
                r.decoder,
                r.total
            );
        }
        s
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract("exponent fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Contract("exponent fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("exponent fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Encoder scaling exponents in the token count at patch 16:
/// `(windowed, global)`.
pub fn scaling_exponents(resolutions: &[usize]) -> Result<(f64, f64)> {
    let mut tokens = Vec::new();
    let (mut win, mut glob) = (Vec::new(), Vec::new());
    for &v in resolutions {
        let models = reference_models(v, 16);
        let bw = fit_window(models[0].1.clone());
        let vit = models[2].1.clone();
        tokens.push(bw.n_tokens() as f64);
        win.push(flops_model(&bw, &ArchParams::reference(&bw))?.encoder);
        glob.push(flops_model(&vit, &ArchParams::reference(&vit))?.encoder);
    }
    Ok((fit_exponent(&tokens, &win)?, fit_exponent(&tokens, &glob)?))
}

/// MACs recorded by the instrumented primitives during one forward pass of
/// a freshly initialized model on a zero volume, batch 1.
pub fn empirical_op_count(cfg: &ModelConfig, seed: u64) -> Result<u64> {
    let params = init_params(cfg, seed)?;
    let plan = sample_mask(cfg.n_tokens(), cfg.mask_ratio, seed)?;
    let vol = vec![0.0; cfg.volume_size.pow(3)];
    let (out, macs) = count_macs(|| {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        model::forward(&mut g, &p, cfg, &[&vol], std::slice::from_ref(&plan)).map(|_| ())
    });
    out?;
    Ok(macs)
}
