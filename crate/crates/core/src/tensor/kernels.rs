//! Raw forward and backward kernels over flat NCHW buffers.

/// `c = a · b + beta · c` for row-major operands, with optional transposes.
/// `a` is `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds checked above; strides describe dense row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw_out = g.ho * g.wo;
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * hw_out;
    let mut out = vec![0.0; g.batch * out_per];
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch() * hw_out]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let ob = &mut out[b * out_per..(b + 1) * out_per];
        for (co, plane) in ob.chunks_mut(hw_out).enumerate() {
            plane.fill(bias[co]);
        }
        let src = if g.pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        gemm(
            g.cout,
            g.patch(),
            hw_out,
            weight,
            false,
            src,
            false,
            1.0,
            ob,
        );
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw_out = g.ho * g.wo;
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * hw_out;
    let patch = g.patch();
    let mut dx = vec![0.0; g.batch * in_per];
    let mut dw = vec![0.0; g.cout * patch];
    let mut db = vec![0.0; g.cout];
    let mut cols = vec![0.0; patch * hw_out];
    let mut dcols = vec![0.0; patch * hw_out];
    for b in 0..g.batch {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let gb = &dout[b * out_per..(b + 1) * out_per];
        for (co, plane) in gb.chunks(hw_out).enumerate() {
            db[co] += plane.iter().sum::<f64>();
        }
        let dxb = &mut dx[b * in_per..(b + 1) * in_per];
        if g.pointwise() {
            gemm(g.cout, hw_out, patch, gb, false, xb, true, 1.0, &mut dw);
            gemm(patch, g.cout, hw_out, weight, true, gb, false, 0.0, dxb);
        } else {
            im2col(g, xb, &mut cols);
            gemm(g.cout, hw_out, patch, gb, false, &cols, true, 1.0, &mut dw);
            gemm(
                patch, g.cout, hw_out, weight, true, gb, false, 0.0, &mut dcols,
            );
            col2im(g, &dcols, dxb);
        }
    }
    (dx, dw, db)
}

/// Per-(sample, channel) plane normalization. Returns output, the
/// normalized planes and the inverse standard deviations.
pub(crate) fn channel_norm_forward(
    dims: [usize; 4],
    x: &[f64],
    gain: &[f64],
    shift: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = dims;
    let n = h * w;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; b * c];
    for p in 0..b * c {
        let ch = p % c;
        let plane = &x[p * n..(p + 1) * n];
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[p] = inv;
        for i in 0..n {
            let xh = (plane[i] - mean) * inv;
            xhat[p * n + i] = xh;
            out[p * n + i] = gain[ch] * xh + shift[ch];
        }
    }
    (out, xhat, inv_std)
}

/// Returns `(d_input, d_gain, d_shift)`.
pub(crate) fn channel_norm_backward(
    dims: [usize; 4],
    xhat: &[f64],
    inv_std: &[f64],
    gain: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = dims;
    let n = h * w;
    let nf = n as f64;
    let mut dx = vec![0.0; xhat.len()];
    let mut dgain = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for p in 0..b * c {
        let ch = p % c;
        let xh = &xhat[p * n..(p + 1) * n];
        let gy = &dout[p * n..(p + 1) * n];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in 0..n {
            sum_g += gy[i];
            sum_gx += gy[i] * xh[i];
        }
        dgain[ch] += sum_gx;
        dshift[ch] += sum_g;
        // d xhat = gain * dy, folded into the closed form below
        let scale = gain[ch] * inv_std[p] / nf;
        for i in 0..n {
            dx[p * n + i] = scale * (nf * gy[i] - sum_g - xh[i] * sum_gx);
        }
    }
    (dx, dgain, dshift)
}

/// Source coordinate taps for align-corners-false bilinear resampling.
fn taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward(dims: [usize; 4], x: &[f64], factor: usize) -> Vec<f64> {
    let [b, c, h, w] = dims;
    let (ho, wo) = (h * factor, w * factor);
    let ty = taps(ho, h, factor);
    let tx = taps(wo, w, factor);
    let mut out = vec![0.0; b * c * ho * wo];
    for p in 0..b * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dims: [usize; 4], dout: &[f64], factor: usize) -> Vec<f64> {
    let [b, c, h, w] = dims;
    let (ho, wo) = (h * factor, w * factor);
    let ty = taps(ho, h, factor);
    let tx = taps(wo, w, factor);
    let mut dx = vec![0.0; b * c * h * w];
    for p in 0..b * c {
        let g = &dout[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[oy * wo + ox];
                d[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                d[y0 * w + x1] += v * (1.0 - ly) * lx;
                d[y1 * w + x0] += v * ly * (1.0 - lx);
                d[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    dx
}

pub(crate) fn log_softmax_forward(dims: [usize; 4], x: &[f64]) -> Vec<f64> {
    let [b, k, h, w] = dims;
    let n = h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let base = bi * k * n;
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(x[base + c * n + i]);
            }
            let mut sum = 0.0;
            for c in 0..k {
                sum += (x[base + c * n + i] - max).exp();
            }
            let lse = max + sum.ln();
            for c in 0..k {
                out[base + c * n + i] = x[base + c * n + i] - lse;
            }
        }
    }
    out
}

pub(crate) fn log_softmax_backward(dims: [usize; 4], y: &[f64], dout: &[f64]) -> Vec<f64> {
    let [b, k, h, w] = dims;
    let n = h * w;
    let mut dx = vec![0.0; y.len()];
    for bi in 0..b {
        let base = bi * k * n;
        for i in 0..n {
            let mut sum = 0.0;
            for c in 0..k {
                sum += dout[base + c * n + i];
            }
            for c in 0..k {
                let j = base + c * n + i;
                dx[j] = dout[j] - y[j].exp() * sum;
            }
        }
    }
    dx
}
