//! Window layouts over a cubic token grid, with the cyclic-shift scheme:
//! the grid is rolled by `-shift` on every axis, cut into `window^3` blocks,
//! and pairs that were not neighbors before the roll are masked out.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub grid: usize,
    pub window: usize,
    pub shift: usize,
    pub n_win: usize,
    /// Tokens per window.
    pub win_len: usize,
    /// `order[w * win_len + t]` is the grid position of token `t` of window `w`.
    pub order: Vec<usize>,
    /// Additive `[n_win, win_len, win_len]` mask; `None` when nothing is masked.
    pub mask: Option<Tensor>,
}

pub fn window_layout(grid: usize, window: usize, shift: usize) -> Result<WindowLayout> {
    if window == 0 || grid == 0 || !grid.is_multiple_of(window) {
        return Err(Error::Config(format!(
            "grid side {grid} is not divisible by window {window}"
        )));
    }
    if shift >= window {
        return Err(Error::Config(format!(
            "shift {shift} must be smaller than window {window}"
        )));
    }
    let nw = grid / window;
    let n_win = nw * nw * nw;
    let win_len = window * window * window;
    let mut order = vec![0; grid * grid * grid];
    // region index of a rolled coordinate along one axis
    let region = |r: usize| {
        if r < grid - window {
            0
        } else if r < grid - shift {
            1
        } else {
            2
        }
    };
    let mut labels = vec![0usize; order.len()];
    for rz in 0..grid {
        for ry in 0..grid {
            for rx in 0..grid {
                let win = ((rz / window) * nw + ry / window) * nw + rx / window;
                let local = ((rz % window) * window + ry % window) * window + rx % window;
                let src = |r: usize| (r + shift) % grid;
                let pos = (src(rz) * grid + src(ry)) * grid + src(rx);
                order[win * win_len + local] = pos;
                labels[win * win_len + local] = (region(rz) * 3 + region(ry)) * 3 + region(rx);
            }
        }
    }
    let mask = (shift > 0).then(|| {
        let mut m = vec![0.0; n_win * win_len * win_len];
        for w in 0..n_win {
            let lab = &labels[w * win_len..(w + 1) * win_len];
            for i in 0..win_len {
                for j in 0..win_len {
                    if lab[i] != lab[j] {
                        m[(w * win_len + i) * win_len + j] = f64::NEG_INFINITY;
                    }
                }
            }
        }
        Tensor::new(vec![n_win, win_len, win_len], m).expect("mask shape")
    });
    Ok(WindowLayout {
        grid,
        window,
        shift,
        n_win,
        win_len,
        order,
        mask,
    })
}

impl WindowLayout {
    /// A single window holding `n` tokens in their given order.
    pub fn global(n: usize) -> Self {
        WindowLayout {
            grid: 0,
            window: 0,
            shift: 0,
            n_win: 1,
            win_len: n,
            order: (0..n).collect(),
            mask: None,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.order.len()
    }

    /// Row gather indices for a `[batch * n, C]` token matrix arranged
    /// window-major (`window, sample, token`), and the inverse gather.
    pub fn batched_order(&self, batch: usize) -> (Rc<Vec<usize>>, Rc<Vec<usize>>) {
        let n = self.n_tokens();
        let mut fwd = Vec::with_capacity(batch * n);
        for w in 0..self.n_win {
            for b in 0..batch {
                for t in 0..self.win_len {
                    fwd.push(b * n + self.order[w * self.win_len + t]);
                }
            }
        }
        let mut inv = vec![0; fwd.len()];
        for (i, &src) in fwd.iter().enumerate() {
            inv[src] = i;
        }
        (Rc::new(fwd), Rc::new(inv))
    }
}

/// Splits `[grid^3, C]` tokens into windows. Returns the windows
/// `[n_win, window^3, C]` and the additive mask `[n_win, window^3, window^3]`
/// (all zeros without a shift).
pub fn window_partition(tokens: &Tensor, grid: usize, window: usize, shift: usize) -> Result<(Tensor, Tensor)> {
    let layout = window_layout(grid, window, shift)?;
    if tokens.ndim() != 2 || tokens.shape()[0] != layout.n_tokens() {
        return Err(Error::Dimension(format!(
            "tokens {:?} do not cover a {grid}^3 grid",
            tokens.shape()
        )));
    }
    let c = tokens.shape()[1];
    let mut out = Vec::with_capacity(tokens.numel());
    for p in &layout.order {
        out.extend_from_slice(&tokens.data()[p * c..(p + 1) * c]);
    }
    let mask = layout
        .mask
        .clone()
        .unwrap_or_else(|| Tensor::zeros(&[layout.n_win, layout.win_len, layout.win_len]));
    Ok((Tensor::new(vec![layout.n_win, layout.win_len, c], out)?, mask))
}

/// Inverse of [`window_partition`].
pub fn window_inverse(windows: &Tensor, grid: usize, window: usize, shift: usize) -> Result<Tensor> {
    let layout = window_layout(grid, window, shift)?;
    if windows.ndim() != 3 || windows.shape()[0] * windows.shape()[1] != layout.n_tokens() {
        return Err(Error::Dimension(format!(
            "windows {:?} do not cover a {grid}^3 grid",
            windows.shape()
        )));
    }
    let c = windows.shape()[2];
    let mut out = vec![0.0; windows.numel()];
    for (i, p) in layout.order.iter().enumerate() {
        out[p * c..(p + 1) * c].copy_from_slice(&windows.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(vec![layout.n_tokens(), c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unshifted_mask_is_zero() {
        let t = Tensor::from_fn(&[64, 3], |i| i as f64);
        let (_, m) = window_partition(&t, 4, 2, 0).unwrap();
        assert!(m.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn partition_round_trip() {
        let t = Tensor::from_fn(&[216, 2], |i| (i * 7 % 13) as f64);
        for (w, s) in [(2, 0), (2, 1), (3, 1), (6, 0), (3, 0)] {
            let (win, _) = window_partition(&t, 6, w, s).unwrap();
            assert_eq!(window_inverse(&win, 6, w, s).unwrap(), t);
        }
    }

    #[test]
    fn order_is_a_permutation() {
        let l = window_layout(4, 2, 1).unwrap();
        let mut o = l.order.clone();
        o.sort_unstable();
        assert_eq!(o, (0..64).collect::<Vec<_>>());
        let (fwd, inv) = l.batched_order(3);
        for i in 0..fwd.len() {
            assert_eq!(inv[fwd[i]], i);
        }
    }
}
