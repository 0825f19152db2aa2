//! Forward/backward numeric kernels on flat buffers. The graph owns shape
//! checking; these assume consistent sizes.

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Normalizes each row of width `d` to zero mean and unit population
/// variance. Returns `(xhat, rstd)` with one `rstd` per row.
pub fn layernorm_rows(x: &[f64], d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for (r, row) in x.chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    (xhat, rstd)
}

/// Gradient of the un-affine layernorm given upstream `dxhat`.
pub(crate) fn layernorm_rows_backward(xhat: &[f64], rstd: &[f64], dxhat: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; xhat.len()];
    let inv_d = 1.0 / d as f64;
    for (r, rs) in rstd.iter().enumerate() {
        let xh = &xhat[r * d..(r + 1) * d];
        let dxh = &dxhat[r * d..(r + 1) * d];
        let sum_d: f64 = dxh.iter().sum();
        let sum_dx: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        for i in 0..d {
            dx[r * d + i] = rs * (dxh[i] - inv_d * sum_d - xh[i] * inv_d * sum_dx);
        }
    }
    dx
}

/// Max-subtracted softmax over rows of width `k`.
pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(k).zip(out.chunks_mut(k)) {
        softmax_into(row, o);
    }
    out
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = if v.is_finite() { (v - m).exp() } else { 0.0 };
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub(crate) fn softmax_rows_backward(y: &[f64], dy: &[f64], k: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y.chunks(k).zip(dy.chunks(k)).zip(dx.chunks_mut(k)) {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for i in 0..k {
            dxr[i] = yr[i] * (dyr[i] - dot);
        }
    }
    dx
}

/// `out[n, m] += a[n, k] · b[k, m]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n, k] += a[n, m] · b[k, m]ᵀ`
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            out[i * k + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, m] += a[n, k]ᵀ · b[n, m]`
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Scaled dot-product attention over `batch` independent heads.
///
/// `mask` holds `mask_count` `[n, n]` additive masks; head `b` uses mask
/// `b / (batch / mask_count)`. Returns `(out, probs)`; `None` signals a
/// row with no attendable key.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: Option<(&[f64], usize)>,
    batch: usize,
    n: usize,
    d: usize,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; batch * n * n];
    let mut out = vec![0.0; batch * n * d];
    let group = mask.map(|(_, count)| batch / count);
    for b in 0..batch {
        let qb = &q[b * n * d..(b + 1) * n * d];
        let kb = &k[b * n * d..(b + 1) * n * d];
        let vb = &v[b * n * d..(b + 1) * n * d];
        let pb = &mut probs[b * n * n..(b + 1) * n * n];
        matmul_bt_acc(qb, kb, pb, n, d, n);
        for s in pb.iter_mut() {
            *s *= scale;
        }
        if let (Some((m, _)), Some(g)) = (mask, group) {
            let mb = &m[(b / g) * n * n..(b / g + 1) * n * n];
            for (s, mv) in pb.iter_mut().zip(mb) {
                *s += mv;
            }
        }
        for row in pb.chunks_mut(n) {
            if row.iter().all(|s| *s == f64::NEG_INFINITY) {
                return None;
            }
            let tmp = row.to_vec();
            softmax_into(&tmp, row);
        }
        matmul_acc(pb, vb, &mut out[b * n * d..(b + 1) * n * d], n, n, d);
    }
    Some((out, probs))
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    batch: usize,
    n: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; n * n];
    for b in 0..batch {
        let r = b * n * d..(b + 1) * n * d;
        let pb = &probs[b * n * n..(b + 1) * n * n];
        let gb = &dout[r.clone()];
        matmul_at_acc(pb, gb, &mut dv[r.clone()], n, n, d);
        dp.iter_mut().for_each(|x| *x = 0.0);
        matmul_bt_acc(gb, &v[r.clone()], &mut dp, n, d, n);
        let ds = softmax_rows_backward(pb, &dp, n);
        let ds: Vec<f64> = ds.into_iter().map(|x| x * scale).collect();
        matmul_acc(&ds, &k[r.clone()], &mut dq[r.clone()], n, n, d);
        matmul_at_acc(&ds, &q[r.clone()], &mut dk[r], n, n, d);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_closed_form_at_one() {
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let expected = 0.5 * (1.0 + (0.797_884_560_802_865_4_f64 * 1.044_715).tanh());
        assert!((gelu_scalar(1.0) - expected).abs() < 1e-15);
        assert!((gelu_scalar(1.0) - 0.841_191_990_608_09).abs() < 1e-12);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax_rows(&[1000.0, 1000.0], 2);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let q = [1.0, 1.0];
        let mask = [f64::NEG_INFINITY; 4];
        assert!(attention_forward(&q, &q, &q, Some((&mask, 1)), 1, 2, 1).is_none());
    }
}
