//! Forward and adjoint kernels for the layer types used by the networks.
//!
//! Convolutions go through im2col + GEMM. All reductions run in a fixed order
//! so results are bit-reproducible for a given input.

use crate::tensor::Tensor;

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            kernel,
            stride,
            pad,
        }
    }

    /// Output extent of a forward convolution over `input` pixels, if valid.
    pub fn conv_out(&self, input: usize) -> Option<usize> {
        let span = input + 2 * self.pad;
        if span < self.kernel {
            return None;
        }
        Some((span - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution over `input` pixels.
    pub fn transpose_out(&self, input: usize) -> Option<usize> {
        ((input - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the stride patterns
    // (checked by debug assertions at each call site via slice lengths).
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

/// Unfolds one `[C, H, W]` image into a `[C·k·k, Ho·Wo]` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let k = g.kernel;
    let plane = ho * wo;
    debug_assert_eq!(cols.len(), c * k * k * plane);
    for ch in 0..c {
        let img = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `[C, H, W]` image.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    dst: &mut [f64],
) {
    let k = g.kernel;
    let plane = ho * wo;
    for ch in 0..c {
        let img = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let img_row = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y = W ⋆ x (+ b)`; `weight` is `[Cout, Cin, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let cout = weight.batch();
    let ho = g.conv_out(h).expect("conv height");
    let wo = g.conv_out(w).expect("conv width");
    let kdim = cin * g.kernel * g.kernel;
    let plane = ho * wo;
    let mut y = Tensor::zeros([n, cout, ho, wo]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kdim * plane]
    };
    for b in 0..n {
        let xb = &x.data()[b * cin * h * w..(b + 1) * cin * h * w];
        let colref: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, cin, h, w, g, ho, wo, &mut cols);
            &cols
        };
        let yb = &mut y.data_mut()[b * cout * plane..(b + 1) * cout * plane];
        gemm(
            cout,
            kdim,
            plane,
            weight.data(),
            (kdim as isize, 1),
            colref,
            (plane as isize, 1),
            0.0,
            yb,
        );
        if let Some(bias) = bias {
            for (co, chunk) in yb.chunks_mut(plane).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

/// Gradients of [`conv2d`] given the upstream gradient `dy`.
///
/// Returns `(dx, dweight, dbias)`; `dx` is skipped when `want_dx` is false.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    g: ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let [n, cin, h, w] = x.shape();
    let [_, cout, ho, wo] = dy.shape();
    let kdim = cin * g.kernel * g.kernel;
    let plane = ho * wo;
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(weight.shape()));
    let mut db = Tensor::zeros([1, cout, 1, 1]);
    let pointwise = g.is_pointwise();
    let mut cols = vec![0.0; if pointwise { 0 } else { kdim * plane }];
    for b in 0..n {
        let dyb = &dy.data()[b * cout * plane..(b + 1) * cout * plane];
        for (co, chunk) in dyb.chunks(plane).enumerate() {
            db.data_mut()[co] += chunk.iter().sum::<f64>();
        }
        let xb = &x.data()[b * cin * h * w..(b + 1) * cin * h * w];
        if let Some(dw) = dw.as_mut() {
            let colref: &[f64] = if pointwise {
                xb
            } else {
                im2col(xb, cin, h, w, g, ho, wo, &mut cols);
                &cols
            };
            // dW[cout×kdim] += dy[cout×plane] · colsᵀ[plane×kdim]
            gemm(
                cout,
                plane,
                kdim,
                dyb,
                (plane as isize, 1),
                colref,
                (1, plane as isize),
                1.0,
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[b * cin * h * w..(b + 1) * cin * h * w];
            if pointwise {
                gemm(
                    kdim,
                    cout,
                    plane,
                    weight.data(),
                    (1, kdim as isize),
                    dyb,
                    (plane as isize, 1),
                    0.0,
                    dxb,
                );
            } else {
                // dcols[kdim×plane] = Wᵀ[kdim×cout] · dy[cout×plane]
                gemm(
                    kdim,
                    cout,
                    plane,
                    weight.data(),
                    (1, kdim as isize),
                    dyb,
                    (plane as isize, 1),
                    0.0,
                    &mut cols,
                );
                col2im(&cols, cin, h, w, g, ho, wo, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution; `weight` is `[Cin, Cout, k, k]`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let [n, cin, hi, wi] = x.shape();
    let cout = weight.channels();
    let ho = g.transpose_out(hi).expect("transpose height");
    let wo = g.transpose_out(wi).expect("transpose width");
    let kdim = cout * g.kernel * g.kernel;
    let plane_in = hi * wi;
    let mut y = Tensor::zeros([n, cout, ho, wo]);
    let mut cols = vec![0.0; kdim * plane_in];
    for b in 0..n {
        let xb = &x.data()[b * cin * plane_in..(b + 1) * cin * plane_in];
        // cols[kdim×plane_in] = Wᵀ[kdim×cin] · x[cin×plane_in]
        gemm(
            kdim,
            cin,
            plane_in,
            weight.data(),
            (1, kdim as isize),
            xb,
            (plane_in as isize, 1),
            0.0,
            &mut cols,
        );
        let yb = &mut y.data_mut()[b * cout * ho * wo..(b + 1) * cout * ho * wo];
        col2im(&cols, cout, ho, wo, g, hi, wi, yb);
        if let Some(bias) = bias {
            for (co, chunk) in yb.chunks_mut(ho * wo).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    g: ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let [n, cin, hi, wi] = x.shape();
    let [_, cout, ho, wo] = dy.shape();
    let kdim = cout * g.kernel * g.kernel;
    let plane_in = hi * wi;
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(weight.shape()));
    let mut db = Tensor::zeros([1, cout, 1, 1]);
    let mut cols = vec![0.0; kdim * plane_in];
    for b in 0..n {
        let dyb = &dy.data()[b * cout * ho * wo..(b + 1) * cout * ho * wo];
        for (co, chunk) in dyb.chunks(ho * wo).enumerate() {
            db.data_mut()[co] += chunk.iter().sum::<f64>();
        }
        im2col(dyb, cout, ho, wo, g, hi, wi, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[b * cin * plane_in..(b + 1) * cin * plane_in];
            gemm(
                cin,
                kdim,
                plane_in,
                weight.data(),
                (kdim as isize, 1),
                &cols,
                (plane_in as isize, 1),
                0.0,
                dxb,
            );
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x.data()[b * cin * plane_in..(b + 1) * cin * plane_in];
            gemm(
                cin,
                plane_in,
                kdim,
                xb,
                (plane_in as isize, 1),
                &cols,
                (1, plane_in as isize),
                1.0,
                dw.data_mut(),
            );
        }
    }
    (dx, dw, db)
}

/// Non-overlapping `k×k` average pooling.
pub fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut y = Tensor::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.channel(b, ch);
            let dst = y.channel_mut(b, ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        let row = &src[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                        acc += row.iter().sum::<f64>();
                    }
                    dst[oy * wo + ox] = acc * norm;
                }
            }
        }
    }
    y
}

pub fn avg_pool_backward(dy: &Tensor, k: usize, input_shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = input_shape;
    let wo = w / k;
    let norm = 1.0 / (k * k) as f64;
    let mut dx = Tensor::zeros(input_shape);
    for b in 0..n {
        for ch in 0..c {
            let src = dy.channel(b, ch);
            let dst = dx.channel_mut(b, ch);
            for y in 0..h - h % k {
                for x in 0..w - w % k {
                    dst[y * w + x] = src[(y / k) * wo + x / k] * norm;
                }
            }
        }
    }
    dx
}

/// Source taps for one axis of half-pixel-centred bilinear resampling.
#[derive(Clone, Debug)]
pub struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LinearTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        LinearTaps { lo, hi, frac }
    }
}

/// Bilinear resize of every channel plane to `out_h × out_w`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let ty = LinearTaps::new(h, out_h);
    let tx = LinearTaps::new(w, out_w);
    let mut y = Tensor::zeros([n, c, out_h, out_w]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.channel(b, ch);
            let dst = y.channel_mut(b, ch);
            for oy in 0..out_h {
                let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                for ox in 0..out_w {
                    let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    y
}

pub fn resize_bilinear_backward(dy: &Tensor, input_shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = input_shape;
    let [_, _, out_h, out_w] = dy.shape();
    let ty = LinearTaps::new(h, out_h);
    let tx = LinearTaps::new(w, out_w);
    let mut dx = Tensor::zeros(input_shape);
    for b in 0..n {
        for ch in 0..c {
            let src = dy.channel(b, ch);
            let dst = dx.channel_mut(b, ch);
            for oy in 0..out_h {
                let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                for ox in 0..out_w {
                    let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let g = src[oy * out_w + ox];
                    dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                    dst[y1 * w + x0] += g * fy * (1.0 - fx);
                    dst[y1 * w + x1] += g * fy * fx;
                }
            }
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;

/// Batch normalisation with batch statistics. Returns `(y, xhat, inv_std)`.
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, Tensor, Vec<f64>) {
    let [n, c, _, _] = x.shape();
    let m = (n * x.plane()) as f64;
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_stds = Vec::with_capacity(c);
    for ch in 0..c {
        let mut mean = 0.0;
        for b in 0..n {
            mean += x.channel(b, ch).iter().sum::<f64>();
        }
        mean /= m;
        let mut var = 0.0;
        for b in 0..n {
            var += x.channel(b, ch).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        var /= m;
        let inv_std = 1.0 / (var + BN_EPS).sqrt();
        inv_stds.push(inv_std);
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            let src = x.channel(b, ch).to_vec();
            let xh = xhat.channel_mut(b, ch);
            for (o, v) in xh.iter_mut().zip(&src) {
                *o = (v - mean) * inv_std;
            }
            let xh = xhat.channel(b, ch).to_vec();
            for (o, v) in y.channel_mut(b, ch).iter_mut().zip(xh) {
                *o = gm * v + bt;
            }
        }
    }
    (y, xhat, inv_stds)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    dy: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, _, _] = dy.shape();
    let m = (n * dy.plane()) as f64;
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros([1, c, 1, 1]);
    let mut dbeta = Tensor::zeros([1, c, 1, 1]);
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            for (g, xh) in dy.channel(b, ch).iter().zip(xhat.channel(b, ch)) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
        }
        dbeta.data_mut()[ch] = sum_dy;
        dgamma.data_mut()[ch] = sum_dy_xhat;
        let k = gamma.data()[ch] * inv_std[ch] / m;
        for b in 0..n {
            let g = dy.channel(b, ch).to_vec();
            let xh = xhat.channel(b, ch).to_vec();
            for ((o, gv), xv) in dx.channel_mut(b, ch).iter_mut().zip(g).zip(xh) {
                *o = k * (m * gv - sum_dy - xv * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}
