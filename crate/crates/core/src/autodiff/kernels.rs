//! Raw forward/backward kernels on flat row-major buffers.
//!
//! Everything here is direct and unvectorized: loops are written in the
//! order that keeps the innermost access contiguous, nothing more.

/// Spatial geometry of a 2-d cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// `y[b,c] = Σ_d x[b,d] w[d,c]`
pub fn matmul(x: &[f64], w: &[f64], b: usize, d: usize, c: usize) -> Vec<f64> {
    let mut y = vec![0.0; b * c];
    for i in 0..b {
        let yr = &mut y[i * c..(i + 1) * c];
        for k in 0..d {
            let xv = x[i * d + k];
            if xv == 0.0 {
                continue;
            }
            let wr = &w[k * c..(k + 1) * c];
            for (yv, wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Returns `(dx, dw)` for `y = x w`.
pub fn matmul_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    b: usize,
    d: usize,
    c: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; b * d];
    let mut dw = vec![0.0; d * c];
    for i in 0..b {
        let dyr = &dy[i * c..(i + 1) * c];
        for k in 0..d {
            let wr = &w[k * c..(k + 1) * c];
            dx[i * d + k] = wr.iter().zip(dyr).map(|(a, b)| a * b).sum();
            let xv = x[i * d + k];
            let dwr = &mut dw[k * c..(k + 1) * c];
            for (g, dv) in dwr.iter_mut().zip(dyr) {
                *g += xv * dv;
            }
        }
    }
    (dx, dw)
}

pub fn conv2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.batch * g.c_out * g.oh * g.ow];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let ybase = (b * g.c_out + co) * g.oh * g.ow;
            for ci in 0..g.c_in {
                let xbase = (b * g.c_in + ci) * g.h * g.w;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = k[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                        for o_i in 0..g.oh {
                            let ih = (o_i * g.stride + ki) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * g.w;
                            let yrow = ybase + o_i * g.ow;
                            for o_j in 0..g.ow {
                                let iw = (o_j * g.stride + kj) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                y[yrow + o_j] += wv * x[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, dk)` for [`conv2d`].
pub fn conv2d_backward(x: &[f64], k: &[f64], dy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let ybase = (b * g.c_out + co) * g.oh * g.ow;
            for ci in 0..g.c_in {
                let xbase = (b * g.c_in + ci) * g.h * g.w;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let widx = ((co * g.c_in + ci) * g.kh + ki) * g.kw + kj;
                        let wv = k[widx];
                        let mut acc = 0.0;
                        for o_i in 0..g.oh {
                            let ih = (o_i * g.stride + ki) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * g.w;
                            let yrow = ybase + o_i * g.ow;
                            for o_j in 0..g.ow {
                                let iw = (o_j * g.stride + kj) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                let d = dy[yrow + o_j];
                                acc += d * x[xrow + iw as usize];
                                dx[xrow + iw as usize] += d * wv;
                            }
                        }
                        dk[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Per-channel layout of a `[B, C, ...spatial]` buffer.
#[derive(Clone, Copy, Debug)]
pub struct ChannelLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl ChannelLayout {
    pub fn per_channel(&self) -> usize {
        self.batch * self.spatial
    }

    /// Calls `f(flat_index)` for every element of channel `c`.
    #[inline]
    pub fn for_each(&self, c: usize, mut f: impl FnMut(usize)) {
        for b in 0..self.batch {
            let base = (b * self.channels + c) * self.spatial;
            for s in 0..self.spatial {
                f(base + s);
            }
        }
    }
}

/// Biased per-channel mean and variance.
pub fn channel_moments(x: &[f64], l: &ChannelLayout) -> (Vec<f64>, Vec<f64>) {
    let m = l.per_channel() as f64;
    let mut mean = vec![0.0; l.channels];
    let mut var = vec![0.0; l.channels];
    for c in 0..l.channels {
        let mut s = 0.0;
        l.for_each(c, |i| s += x[i]);
        let mu = s / m;
        let mut v = 0.0;
        l.for_each(c, |i| {
            let d = x[i] - mu;
            v += d * d;
        });
        mean[c] = mu;
        var[c] = v / m;
    }
    (mean, var)
}

/// Argmax with ties going to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `log softmax` of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}
