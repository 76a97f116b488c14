//! Direct (loop-based) convolution and pooling kernels over NCHW buffers.

use crate::error::{GhnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: usize,
    /// Zero padding as (rows, cols).
    pub padding: (usize, usize),
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dCfg {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dCfg {
            stride,
            padding: (padding, padding),
            dilation,
            groups: 1,
        }
    }

    /// Stride-1 convolution padded to keep the spatial extent.
    pub fn same(kh: usize, kw: usize, dilation: usize) -> Self {
        Conv2dCfg {
            stride: 1,
            padding: (dilation * (kh - 1) / 2, dilation * (kw - 1) / 2),
            dilation,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Conv2dCfg::new(1, 0, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolCfg {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolCfg {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolCfg {
            kernel,
            stride,
            padding,
        }
    }
}

/// Output extent of a sliding window, or `None` when it would be < 1.
pub fn out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || padded < span {
        None
    } else {
        Some((padded - span) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub cfg: Conv2dCfg,
}

impl ConvGeom {
    pub fn out_len(&self) -> usize {
        self.n * self.c_out * self.oh * self.ow
    }
}

/// `x` is `[N, C, H, W]`, `w` is `[C_out, C_in / groups, kh, kw]`.
pub(crate) fn conv_geom(x: &[usize], w: &[usize], cfg: Conv2dCfg) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 {
        return Err(GhnError::dim(format!(
            "conv2d expects 4-d input and kernel, got {x:?} and {w:?}"
        )));
    }
    if cfg.stride == 0 || cfg.dilation == 0 || cfg.groups == 0 {
        return Err(GhnError::dim(
            "conv2d stride, dilation and groups must be >= 1",
        ));
    }
    let (n, c_in, h, wd) = (x[0], x[1], x[2], x[3]);
    let (c_out, c_in_g, kh, kw) = (w[0], w[1], w[2], w[3]);
    if c_in % cfg.groups != 0 || c_out % cfg.groups != 0 || c_in / cfg.groups != c_in_g {
        return Err(GhnError::dim(format!(
            "conv2d channel mismatch: input {x:?}, kernel {w:?}, groups {}",
            cfg.groups
        )));
    }
    let oh = out_extent(h, kh, cfg.stride, cfg.padding.0, cfg.dilation);
    let ow = out_extent(wd, kw, cfg.stride, cfg.padding.1, cfg.dilation);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            oh,
            ow,
            cfg,
        }),
        _ => Err(GhnError::dim(format!(
            "conv2d output extent < 1 for input {x:?}, kernel {w:?}, {cfg:?}"
        ))),
    }
}

/// Range of output indices `o` for which `o * stride + offset` lands in `[0, len)`.
#[inline]
fn valid_range(offset: isize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        (-offset + s - 1) / s
    };
    let room = len as isize - offset;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let hi = (hi as usize).min(out);
    (lo as usize, hi.max(lo as usize))
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.out_len()];
    let groups = g.cfg.groups;
    let (cin_g, cout_g) = (g.c_in / groups, g.c_out / groups);
    let (s, d) = (g.cfg.stride, g.cfg.dilation);
    let (ph, pw) = (g.cfg.padding.0 as isize, g.cfg.padding.1 as isize);
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    for n in 0..g.n {
        for co in 0..g.c_out {
            let grp = co / cout_g;
            let o_base = (n * g.c_out + co) * plane_out;
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let x_base = (n * g.c_in + ci) * plane_in;
                let w_base = (co * cin_g + cl) * g.kh * g.kw;
                for ki in 0..g.kh {
                    let off_h = (ki * d) as isize - ph;
                    let (oh_lo, oh_hi) = valid_range(off_h, s, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wv = w[w_base + ki * g.kw + kj];
                        let off_w = (kj * d) as isize - pw;
                        let (ow_lo, ow_hi) = valid_range(off_w, s, g.w, g.ow);
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * s) as isize + off_h;
                            let xr = x_base + ih as usize * g.w;
                            let or = o_base + oh * g.ow;
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * s) as isize + off_w) as usize;
                                out[or + ow] += wv * x[xr + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let groups = g.cfg.groups;
    let (cin_g, cout_g) = (g.c_in / groups, g.c_out / groups);
    let (s, d) = (g.cfg.stride, g.cfg.dilation);
    let (ph, pw) = (g.cfg.padding.0 as isize, g.cfg.padding.1 as isize);
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    for n in 0..g.n {
        for co in 0..g.c_out {
            let grp = co / cout_g;
            let o_base = (n * g.c_out + co) * plane_out;
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let x_base = (n * g.c_in + ci) * plane_in;
                let w_base = (co * cin_g + cl) * g.kh * g.kw;
                for ki in 0..g.kh {
                    let off_h = (ki * d) as isize - ph;
                    let (oh_lo, oh_hi) = valid_range(off_h, s, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wi = w_base + ki * g.kw + kj;
                        let wv = w[wi];
                        let off_w = (kj * d) as isize - pw;
                        let (ow_lo, ow_hi) = valid_range(off_w, s, g.w, g.ow);
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * s) as isize + off_h;
                            let xr = x_base + ih as usize * g.w;
                            let or = o_base + oh * g.ow;
                            if let Some(dx) = dx.as_deref_mut() {
                                for ow in ow_lo..ow_hi {
                                    let iw = ((ow * s) as isize + off_w) as usize;
                                    dx[xr + iw] += wv * dout[or + ow];
                                }
                            }
                            if dw.is_some() {
                                for ow in ow_lo..ow_hi {
                                    let iw = ((ow * s) as isize + off_w) as usize;
                                    acc += x[xr + iw] * dout[or + ow];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[wi] += acc;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub nc: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub cfg: PoolCfg,
}

pub(crate) fn pool_geom(x: &[usize], cfg: PoolCfg) -> Result<PoolGeom> {
    if x.len() != 4 {
        return Err(GhnError::dim(format!(
            "pool2d expects 4-d input, got {x:?}"
        )));
    }
    if cfg.kernel == 0 || cfg.stride == 0 {
        return Err(GhnError::dim("pool2d kernel and stride must be >= 1"));
    }
    let oh = out_extent(x[2], cfg.kernel, cfg.stride, cfg.padding, 1);
    let ow = out_extent(x[3], cfg.kernel, cfg.stride, cfg.padding, 1);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(PoolGeom {
            nc: x[0] * x[1],
            h: x[2],
            w: x[3],
            oh,
            ow,
            cfg,
        }),
        _ => Err(GhnError::dim(format!(
            "pool2d output extent < 1 for input {x:?}, {cfg:?}"
        ))),
    }
}

/// Returns the pooled values and, per output element, either the flat argmax
/// index (max) or the number of in-bounds window elements (avg).
pub(crate) fn pool2d_forward(x: &[f64], kind: PoolKind, g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let k = g.cfg.kernel;
    let s = g.cfg.stride;
    let p = g.cfg.padding as isize;
    let mut out = vec![0.0; g.nc * g.oh * g.ow];
    let mut aux = vec![0usize; out.len()];
    for c in 0..g.nc {
        let base = c * g.h * g.w;
        for oh in 0..g.oh {
            let (r_lo, r_hi) = window(oh, s, p, k, g.h);
            for ow in 0..g.ow {
                let (c_lo, c_hi) = window(ow, s, p, k, g.w);
                let o = (c * g.oh + oh) * g.ow + ow;
                match kind {
                    PoolKind::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = usize::MAX;
                        for r in r_lo..r_hi {
                            for col in c_lo..c_hi {
                                let i = base + r * g.w + col;
                                if arg == usize::MAX || x[i] > best {
                                    best = x[i];
                                    arg = i;
                                }
                            }
                        }
                        out[o] = best;
                        aux[o] = arg;
                    }
                    PoolKind::Avg => {
                        let mut sum = 0.0;
                        for r in r_lo..r_hi {
                            for col in c_lo..c_hi {
                                sum += x[base + r * g.w + col];
                            }
                        }
                        let count = (r_hi - r_lo) * (c_hi - c_lo);
                        out[o] = sum / count as f64;
                        aux[o] = count;
                    }
                }
            }
        }
    }
    (out, aux)
}

pub(crate) fn pool2d_backward(
    dout: &[f64],
    aux: &[usize],
    kind: PoolKind,
    g: &PoolGeom,
    dx: &mut [f64],
) {
    match kind {
        PoolKind::Max => {
            for (o, &arg) in aux.iter().enumerate() {
                dx[arg] += dout[o];
            }
        }
        PoolKind::Avg => {
            let k = g.cfg.kernel;
            let s = g.cfg.stride;
            let p = g.cfg.padding as isize;
            for c in 0..g.nc {
                let base = c * g.h * g.w;
                for oh in 0..g.oh {
                    let (r_lo, r_hi) = window(oh, s, p, k, g.h);
                    for ow in 0..g.ow {
                        let (c_lo, c_hi) = window(ow, s, p, k, g.w);
                        let o = (c * g.oh + oh) * g.ow + ow;
                        let share = dout[o] / aux[o] as f64;
                        for r in r_lo..r_hi {
                            for col in c_lo..c_hi {
                                dx[base + r * g.w + col] += share;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn window(o: usize, stride: usize, pad: isize, k: usize, len: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad;
    let lo = start.max(0) as usize;
    let hi = ((start + k as isize).min(len as isize)).max(0) as usize;
    (lo, hi.max(lo))
}
