use std::rc::Rc;

use super::params::Bound;
use super::patch::{gather_visible_patches, patchify, MaskPlan};
use super::posemb::sincos_3d;
use super::window::{window_layout, WindowLayout};
use super::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

pub struct ForwardOut {
    /// Reconstruction `[B, 1, D, D, D]`.
    pub recon: Var,
    /// Encoder output `[B * tokens_per_sample, C]`.
    pub features: Var,
    pub tokens_per_sample: usize,
}

fn check_batch(cfg: &ModelConfig, volumes: &[&[f64]], plans: &[MaskPlan]) -> Result<()> {
    if volumes.is_empty() || volumes.len() != plans.len() {
        return Err(Error::Contract(format!(
            "{} volumes for {} mask plans",
            volumes.len(),
            plans.len()
        )));
    }
    let n_vis = plans[0].visible.len();
    for p in plans {
        if p.n_tokens != cfg.n_tokens() || p.visible.len() != n_vis {
            return Err(Error::Contract(format!(
                "mask plan over {} tokens with {} visible does not fit the batch",
                p.n_tokens,
                p.visible.len()
            )));
        }
    }
    Ok(())
}

/// Visible patches of every sample, stacked `[B * n_vis, patch^3]`.
fn visible_patch_rows(cfg: &ModelConfig, volumes: &[&[f64]], plans: &[MaskPlan]) -> Result<Tensor> {
    let size = [cfg.volume_size; 3];
    let p3 = cfg.patch_size.pow(3);
    let mut rows = Vec::new();
    for (v, plan) in volumes.iter().zip(plans) {
        let patches = patchify(v, size, cfg.patch_size)?;
        rows.extend(gather_visible_patches(&patches, plan)?.into_data());
    }
    let n = rows.len() / p3;
    Tensor::new(vec![n, p3], rows)
}

fn grid_positions(cfg: &ModelConfig, plans: &[MaskPlan]) -> Rc<Vec<usize>> {
    let n = cfg.n_tokens();
    Rc::new(
        plans
            .iter()
            .enumerate()
            .flat_map(|(b, p)| p.visible.iter().map(move |v| b * n + v))
            .collect(),
    )
}

fn tiled(n: usize, batch: usize) -> Rc<Vec<usize>> {
    Rc::new((0..batch).flat_map(|_| 0..n).collect())
}

/// Strided-conv patch embedding: `[n, patch^3] -> [n, C]`.
///
/// Each stage is conv(k3, s2, p1) + bias, layer norm over the per-patch
/// feature map, and GELU; a final linear maps the `1^3` map to `C`.
pub fn stem_embed(g: &mut Graph, p: &Bound, cfg: &ModelConfig, patches: Var) -> Result<Var> {
    let ps = cfg.patch_size;
    if ps < 4 || !ps.is_power_of_two() {
        return Err(Error::Config(format!("stem needs a power-of-two patch >= 4, got {ps}")));
    }
    let n = g.shape(patches)[0];
    let mut x = g.reshape(patches, &[n, 1, ps, ps, ps])?;
    let widths = cfg.stem_widths();
    let mut side = ps;
    for st in 0..cfg.stem_stages() {
        x = g.conv3d(x, p.var(&format!("stem.{st}.w"))?, [2; 3], [1; 3])?;
        x = g.channel_bias(x, p.var(&format!("stem.{st}.b"))?, true)?;
        side /= 2;
        let c = widths[st + 1];
        let feat = c * side * side * side;
        let flat = g.reshape(x, &[n, feat])?;
        let one = g.constant(Tensor::ones(&[feat]));
        let zero = g.constant(Tensor::zeros(&[feat]));
        let normed = g.layernorm(flat, one, zero, LN_EPS)?;
        let act = g.gelu(normed);
        x = g.reshape(act, &[n, c, side, side, side])?;
    }
    let last = *widths.last().expect("stem widths");
    let flat = g.reshape(x, &[n, last])?;
    g.linear(flat, p.var("stem.proj.w")?, Some(p.var("stem.proj.b")?))
}

/// Pre-norm transformer block on `[batch * n, C]` tokens with attention
/// restricted to the windows of `layout` (`n == layout.n_tokens()`).
pub fn attention_block(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    layout: &WindowLayout,
    batch: usize,
) -> Result<Var> {
    let pre = format!("blocks.{layer}");
    let v = |name: &str| p.var(&format!("{pre}.{name}"));
    let (c, h, dh) = (cfg.embed_dim, cfg.heads, cfg.head_dim());
    let (nw, len) = (layout.n_win, layout.win_len);

    let ln = g.layernorm(x, v("ln1.g")?, v("ln1.b")?, LN_EPS)?;
    let (fwd, inv) = layout.batched_order(batch);
    let xw = g.gather_rows(ln, fwd)?;
    let mut heads = Vec::with_capacity(3);
    for m in ["q", "k", "v"] {
        let t = g.linear(xw, v(&format!("attn.{m}.w"))?, Some(v(&format!("attn.{m}.b"))?))?;
        let t = g.reshape(t, &[nw * batch, len, h, dh])?;
        heads.push(g.permute(t, &[0, 2, 1, 3])?);
    }
    let att = g.attention(heads[0], heads[1], heads[2], layout.mask.as_ref())?;
    let att = g.permute(att, &[0, 2, 1, 3])?;
    let att = g.reshape(att, &[nw * batch * len, c])?;
    let out = g.linear(att, v("attn.proj.w")?, Some(v("attn.proj.b")?))?;
    let out = g.gather_rows(out, inv)?;
    let x = g.add(x, out)?;

    let ln = g.layernorm(x, v("ln2.g")?, v("ln2.b")?, LN_EPS)?;
    let hdn = g.linear(ln, v("mlp.fc1.w")?, Some(v("mlp.fc1.b")?))?;
    let hdn = g.gelu(hdn);
    let out = g.linear(hdn, v("mlp.fc2.w")?, Some(v("mlp.fc2.b")?))?;
    g.add(x, out)
}

/// All encoder blocks followed by the final norm. `windowed` selects
/// shifted-window attention over the full grid; otherwise every block
/// attends globally over the `n` tokens of each sample.
pub fn encoder_blocks(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    mut x: Var,
    batch: usize,
    windowed: bool,
) -> Result<Var> {
    let n = g.shape(x)[0] / batch;
    for layer in 0..cfg.depth {
        let layout = if windowed {
            window_layout(cfg.grid_side(), cfg.window, cfg.shift_for(layer))?
        } else {
            WindowLayout::global(n)
        };
        if layout.n_tokens() != n {
            return Err(Error::Contract(format!(
                "window layout covers {} tokens, samples hold {n}",
                layout.n_tokens()
            )));
        }
        x = attention_block(g, p, cfg, layer, x, &layout, batch)?;
    }
    g.layernorm(x, p.var("norm.g")?, p.var("norm.b")?, LN_EPS)
}

/// Full-grid encoder: stem on visible patches, scatter next to mask tokens,
/// add position embeddings, shifted-window blocks. Returns `[B * N, C]`.
pub fn encode(g: &mut Graph, p: &Bound, cfg: &ModelConfig, volumes: &[&[f64]], plans: &[MaskPlan]) -> Result<Var> {
    if cfg.variant != Variant::Bertswin {
        return Err(Error::Config("encode needs the bertswin variant".into()));
    }
    check_batch(cfg, volumes, plans)?;
    let batch = volumes.len();
    let n = cfg.n_tokens();
    let rows = visible_patch_rows(cfg, volumes, plans)?;
    let patches = g.constant(rows);
    let emb = stem_embed(g, p, cfg, patches)?;
    let grid = g.scatter_tokens(emb, p.var("mask_token")?, grid_positions(cfg, plans), batch * n)?;
    let pos = g.gather_rows(p.var("pos_embed")?, tiled(n, batch))?;
    let x = g.add(grid, pos)?;
    encoder_blocks(g, p, cfg, x, batch, true)
}

/// Sparse baseline encoder over visible tokens only. Returns
/// `[B * n_vis, C]`.
pub fn vit_sparse_encode(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    volumes: &[&[f64]],
    plans: &[MaskPlan],
) -> Result<Var> {
    if cfg.variant != Variant::VitSparse {
        return Err(Error::Config("vit_sparse_encode needs the vit_sparse variant".into()));
    }
    check_batch(cfg, volumes, plans)?;
    let batch = volumes.len();
    let rows = visible_patch_rows(cfg, volumes, plans)?;
    let patches = g.constant(rows);
    let emb = g.linear(patches, p.var("embed.w")?, Some(p.var("embed.b")?))?;
    let table = sincos_3d(cfg.grid_side(), cfg.embed_dim);
    let c = cfg.embed_dim;
    let pos_rows = grid_positions(cfg, plans)
        .iter()
        .flat_map(|gp| {
            let r = gp % cfg.n_tokens();
            table.data()[r * c..(r + 1) * c].to_vec()
        })
        .collect();
    let pos = g.constant(Tensor::new(g.shape(emb).to_vec(), pos_rows)?);
    let x = g.add(emb, pos)?;
    encoder_blocks(g, p, cfg, x, batch, false)
}

/// Transposed-conv head: `[B * N, C]` tokens to a `[B, 1, D, D, D]` volume.
pub fn decode(g: &mut Graph, p: &Bound, cfg: &ModelConfig, tokens: Var, batch: usize) -> Result<Var> {
    let strides = cfg.decoder_strides();
    if strides.iter().product::<usize>() != cfg.patch_size {
        return Err(Error::Config(format!(
            "decoder strides {strides:?} do not multiply to patch size {}",
            cfg.patch_size
        )));
    }
    let (n, c, gs) = (cfg.n_tokens(), cfg.embed_dim, cfg.grid_side());
    if g.shape(tokens) != [batch * n, c] {
        return Err(Error::Dimension(format!(
            "decoder expects [{}, {c}] tokens, got {:?}",
            batch * n,
            g.shape(tokens)
        )));
    }
    let t = g.reshape(tokens, &[batch, n, c])?;
    let t = g.permute(t, &[0, 2, 1])?;
    let mut x = g.reshape(t, &[batch, c, gs, gs, gs])?;
    for (i, s) in strides.iter().enumerate() {
        x = g.conv_transpose3d(x, p.var(&format!("dec.{i}.w"))?, [*s; 3], [0; 3])?;
        x = g.channel_bias(x, p.var(&format!("dec.{i}.b"))?, true)?;
        if i + 1 < strides.len() {
            x = g.gelu(x);
        }
    }
    Ok(x)
}

/// Encoder plus reconstruction for either variant.
pub fn forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    volumes: &[&[f64]],
    plans: &[MaskPlan],
) -> Result<ForwardOut> {
    let batch = volumes.len();
    match cfg.variant {
        Variant::Bertswin => {
            let features = encode(g, p, cfg, volumes, plans)?;
            let recon = decode(g, p, cfg, features, batch)?;
            Ok(ForwardOut {
                recon,
                features,
                tokens_per_sample: cfg.n_tokens(),
            })
        }
        Variant::VitSparse => {
            let features = vit_sparse_encode(g, p, cfg, volumes, plans)?;
            let n = cfg.n_tokens();
            let grid = g.scatter_tokens(features, p.var("mask_token")?, grid_positions(cfg, plans), batch * n)?;
            let table = sincos_3d(cfg.grid_side(), cfg.embed_dim);
            let tiled_table: Vec<f64> = (0..batch).flat_map(|_| table.data().iter().copied()).collect();
            let pos = g.constant(Tensor::new(vec![batch * n, cfg.embed_dim], tiled_table)?);
            let grid = g.add(grid, pos)?;
            let recon = decode(g, p, cfg, grid, batch)?;
            Ok(ForwardOut {
                recon,
                features,
                tokens_per_sample: plans[0].visible.len(),
            })
        }
    }
}

/// Mean over the token axis of a `[n, C]` feature matrix.
pub fn pooled_features(features: &Tensor) -> Result<Tensor> {
    if features.ndim() != 2 || features.shape()[0] == 0 {
        return Err(Error::Contract(format!(
            "pooling needs a non-empty [n, C] token set, got {:?}",
            features.shape()
        )));
    }
    let (n, c) = (features.shape()[0], features.shape()[1]);
    let mut out = vec![0.0; c];
    for row in features.data().chunks(c) {
        out.iter_mut().zip(row).for_each(|(o, r)| *o += r);
    }
    Ok(Tensor::from_vec(out.into_iter().map(|s| s / n as f64).collect()))
}
