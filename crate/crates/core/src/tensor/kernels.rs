//! Raw numeric loops shared by forward and backward passes. All buffers are
//! row-major; matrix arguments carry explicit dimensions.

/// out = a(n×k) · b(k×m)
pub fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    matmul_nn_acc(&mut out, a, b, n, k, m);
    out
}

/// out += a(n×k) · b(k×m)
pub fn matmul_nn_acc(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a(n×k) · b(m×k)ᵀ
pub fn matmul_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out += a(k×n)ᵀ · b(k×m)
pub fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dimensions of a 2-D cross-correlation with zero padding.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvDims {
    /// Output extent along one axis, or `None` when the padded input is
    /// smaller than the kernel.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }
}

impl ConvDims {
    /// Pointwise convs skip the patch-matrix build entirely.
    fn is_identity_patch(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Patch matrix: row (ci,ky,kx), column (oy,ox); zero where the window
/// hangs over the padding. Stride-1 rows copy contiguous runs.
fn im2col(input: &[f64], d: &ConvDims) -> Vec<f64> {
    let hw = d.hout * d.wout;
    let mut cols = vec![0.0; d.cin * d.kh * d.kw * hw];
    for ci in 0..d.cin {
        let ibase = ci * d.h * d.w;
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let rbase = ((ci * d.kh + ky) * d.kw + kx) * hw;
                for oy in 0..d.hout {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let irow = ibase + iy as usize * d.w;
                    let orow = rbase + oy * d.wout;
                    if d.stride == 1 {
                        let lo = d.pad.saturating_sub(kx);
                        let hi = (d.w + d.pad).saturating_sub(kx).min(d.wout);
                        if lo < hi {
                            let src = irow + lo + kx - d.pad;
                            cols[orow + lo..orow + hi]
                                .copy_from_slice(&input[src..src + hi - lo]);
                        }
                    } else {
                        for ox in 0..d.wout {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && (ix as usize) < d.w {
                                cols[orow + ox] = input[irow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a patch-matrix gradient back onto the input grid.
fn col2im_acc(gin: &mut [f64], gcols: &[f64], d: &ConvDims) {
    let hw = d.hout * d.wout;
    for ci in 0..d.cin {
        let ibase = ci * d.h * d.w;
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let rbase = ((ci * d.kh + ky) * d.kw + kx) * hw;
                for oy in 0..d.hout {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let irow = ibase + iy as usize * d.w;
                    let orow = rbase + oy * d.wout;
                    if d.stride == 1 {
                        let lo = d.pad.saturating_sub(kx);
                        let hi = (d.w + d.pad).saturating_sub(kx).min(d.wout);
                        if lo < hi {
                            let dst = irow + lo + kx - d.pad;
                            for (x, &g) in
                                gin[dst..dst + hi - lo].iter_mut().zip(&gcols[orow + lo..orow + hi])
                            {
                                *x += g;
                            }
                        }
                    } else {
                        for ox in 0..d.wout {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && (ix as usize) < d.w {
                                gin[irow + ix as usize] += gcols[orow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// input `[cin,h,w]`, kernel `[cout,cin,kh,kw]` → `[cout,hout,wout]`.
/// Computed as the matrix product kernel(cout×cin·kh·kw) · patch-matrix.
pub fn conv2d_fwd(input: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let ckk = d.cin * d.kh * d.kw;
    let hw = d.hout * d.wout;
    if d.is_identity_patch() {
        return matmul_nn(kernel, input, d.cout, ckk, hw);
    }
    matmul_nn(kernel, &im2col(input, d), d.cout, ckk, hw)
}

/// Gradient of `conv2d_fwd` with respect to its input: kernelᵀ · grad,
/// scattered back through the patch map.
pub fn conv2d_bwd_input(grad_out: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let ckk = d.cin * d.kh * d.kw;
    let hw = d.hout * d.wout;
    if d.is_identity_patch() {
        let mut gin = vec![0.0; d.cin * d.h * d.w];
        matmul_tn_acc(&mut gin, kernel, grad_out, ckk, d.cout, hw);
        return gin;
    }
    let mut gcols = vec![0.0; ckk * hw];
    matmul_tn_acc(&mut gcols, kernel, grad_out, ckk, d.cout, hw);
    let mut gin = vec![0.0; d.cin * d.h * d.w];
    col2im_acc(&mut gin, &gcols, d);
    gin
}

/// Gradient of `conv2d_fwd` with respect to its kernel: grad · patch-matrixᵀ.
pub fn conv2d_bwd_kernel(grad_out: &[f64], input: &[f64], d: &ConvDims) -> Vec<f64> {
    let ckk = d.cin * d.kh * d.kw;
    let hw = d.hout * d.wout;
    let mut gk = vec![0.0; d.cout * ckk];
    if d.is_identity_patch() {
        matmul_nt_acc(&mut gk, grad_out, input, d.cout, hw, ckk);
    } else {
        matmul_nt_acc(&mut gk, grad_out, &im2col(input, d), d.cout, hw, ckk);
    }
    gk
}

/// input `[c,h,w]`, per-channel kernel `[c,kh,kw]` → `[c,hout,wout]`.
pub fn depthwise_fwd(input: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    debug_assert_eq!(d.cin, d.cout);
    let mut out = vec![0.0; d.cin * d.hout * d.wout];
    for c in 0..d.cin {
        let ibase = c * d.h * d.w;
        let kbase = c * d.kh * d.kw;
        for oy in 0..d.hout {
            for ox in 0..d.wout {
                let mut acc = 0.0;
                for ky in 0..d.kh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let irow = ibase + iy as usize * d.w;
                    let krow = kbase + ky * d.kw;
                    for kx in 0..d.kw {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix as usize >= d.w {
                            continue;
                        }
                        acc += input[irow + ix as usize] * kernel[krow + kx];
                    }
                }
                out[(c * d.hout + oy) * d.wout + ox] = acc;
            }
        }
    }
    out
}

/// Gradients of `depthwise_fwd` for input and kernel.
pub fn depthwise_bwd(
    grad_out: &[f64],
    input: &[f64],
    kernel: &[f64],
    d: &ConvDims,
    want_input: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut gin = vec![0.0; if want_input { d.cin * d.h * d.w } else { 0 }];
    let mut gk = vec![0.0; d.cin * d.kh * d.kw];
    for c in 0..d.cin {
        let ibase = c * d.h * d.w;
        let kbase = c * d.kh * d.kw;
        for oy in 0..d.hout {
            for ox in 0..d.wout {
                let g = grad_out[(c * d.hout + oy) * d.wout + ox];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..d.kh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let irow = ibase + iy as usize * d.w;
                    let krow = kbase + ky * d.kw;
                    for kx in 0..d.kw {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix as usize >= d.w {
                            continue;
                        }
                        gk[krow + kx] += g * input[irow + ix as usize];
                        if want_input {
                            gin[irow + ix as usize] += g * kernel[krow + kx];
                        }
                    }
                }
            }
        }
    }
    (gin, gk)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of an n×m matrix, written into `out`.
pub fn softmax_rows(x: &[f64], n: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let orow = &mut out[i * m..(i + 1) * m];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
}
