//! Direct 3-D convolution and its adjoint.
//!
//! Layout: input `[B, C_in, D, H, W]`, kernel `[C_out, C_in, kd, kh, kw]`.
//! The transposed convolution reuses the same kernel tensor with the channel
//! roles swapped, which makes it the exact adjoint of `conv3d_forward`.

use super::counter::record_macs;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    /// Channels and spatial size on the "dense" (conv input) side.
    pub c_in: usize,
    pub in_size: [usize; 3],
    /// Channels and spatial size on the "coarse" (conv output) side.
    pub c_out: usize,
    pub out_size: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    fn in_vol(&self) -> usize {
        self.in_size.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out_size.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visits every (output voxel, kernel tap) pair whose input position is
    /// inside the volume, passing flat spatial indices `(out, tap, input)`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [od, oh, ow] = self.out_size;
        let [kd, kh, kw] = self.kernel;
        let [id, ih, iw] = self.in_size;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let o = (z * oh + y) * ow + x;
                    for a in 0..kd {
                        let iz = (z * self.stride[0] + a) as isize - self.pad[0] as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for b in 0..kh {
                            let iy = (y * self.stride[1] + b) as isize - self.pad[1] as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            for c in 0..kw {
                                let ix = (x * self.stride[2] + c) as isize - self.pad[2] as isize;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                let tap = (a * kh + b) * kw + c;
                                let i = ((iz as usize) * ih + iy as usize) * iw + ix as usize;
                                f(o, tap, i);
                            }
                        }
                    }
                }
            }
        }
    }

    fn nominal_macs(&self) -> u64 {
        (self.batch * self.out_vol() * self.c_out * self.c_in * self.k_vol()) as u64
    }
}

/// Tap table shared by all channel pairs of one geometry.
fn taps(g: &ConvGeom) -> Vec<(usize, usize, usize)> {
    let mut t = Vec::new();
    g.for_each_tap(|o, k, i| t.push((o, k, i)));
    t
}

/// `y[b, co, o] = Σ_{ci, tap} x[b, ci, i(o, tap)] · k[co, ci, tap]`
pub(crate) fn conv3d_forward(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    record_macs(g.nominal_macs());
    conv3d_forward_uncounted(x, k, g)
}

/// [`conv3d_forward`] without touching the MAC counter; backward passes are
/// not part of the forward op count.
pub(crate) fn conv3d_forward_uncounted(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (iv, ov, kv) = (g.in_vol(), g.out_vol(), g.k_vol());
    let table = taps(g);
    let mut y = vec![0.0; g.batch * g.c_out * ov];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let yb = &mut y[(b * g.c_out + co) * ov..(b * g.c_out + co + 1) * ov];
            for ci in 0..g.c_in {
                let xb = &x[(b * g.c_in + ci) * iv..(b * g.c_in + ci + 1) * iv];
                let kb = &k[(co * g.c_in + ci) * kv..(co * g.c_in + ci + 1) * kv];
                for &(o, t, i) in &table {
                    yb[o] += xb[i] * kb[t];
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv3d_forward`] in `x`: maps a coarse-side buffer back to
/// the dense side.
pub(crate) fn conv3d_adjoint(y: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (iv, ov, kv) = (g.in_vol(), g.out_vol(), g.k_vol());
    let table = taps(g);
    let mut x = vec![0.0; g.batch * g.c_in * iv];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let yb = &y[(b * g.c_out + co) * ov..(b * g.c_out + co + 1) * ov];
            for ci in 0..g.c_in {
                let xb = &mut x[(b * g.c_in + ci) * iv..(b * g.c_in + ci + 1) * iv];
                let kb = &k[(co * g.c_in + ci) * kv..(co * g.c_in + ci + 1) * kv];
                for &(o, t, i) in &table {
                    xb[i] += yb[o] * kb[t];
                }
            }
        }
    }
    x
}

/// Kernel gradient: `dk[co, ci, tap] = Σ_{b, o} x[b, ci, i] · y[b, co, o]`.
pub(crate) fn conv3d_kernel_grad(x: &[f64], y: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (iv, ov, kv) = (g.in_vol(), g.out_vol(), g.k_vol());
    let table = taps(g);
    let mut dk = vec![0.0; g.c_out * g.c_in * kv];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let yb = &y[(b * g.c_out + co) * ov..(b * g.c_out + co + 1) * ov];
            for ci in 0..g.c_in {
                let xb = &x[(b * g.c_in + ci) * iv..(b * g.c_in + ci + 1) * iv];
                let kb = &mut dk[(co * g.c_in + ci) * kv..(co * g.c_in + ci + 1) * kv];
                for &(o, t, i) in &table {
                    kb[t] += xb[i] * yb[o];
                }
            }
        }
    }
    dk
}

/// Transposed convolution forward: the adjoint applied as a layer.
pub(crate) fn conv_transpose3d_forward(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    record_macs(g.nominal_macs());
    conv3d_adjoint(x, k, g)
}
