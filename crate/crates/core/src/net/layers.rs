//! Per-layer compute kernels. Convolutions run as im2col + GEMM per sample;
//! activations are laid out [batch, channels, h, w] row-major.

use crate::tensor::Scalar;

/// Geometry of one conv application.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
    pub fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }
    pub fn out_len(&self) -> usize {
        self.f * self.oh * self.ow
    }
}

/// Expand one sample into the [k, oh*ow] patch matrix. Out-of-bounds taps
/// (from zero padding) contribute zeros. Stride-1 rows move as slice copies.
pub(crate) fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, col: &mut [T]) {
    debug_assert_eq!(col.len(), g.k() * g.oh * g.ow);
    im2col_strided(input, g, col, g.oh * g.ow, 0)
}

/// im2col writing into a wider column-block matrix: row r of the patch
/// matrix lands at `col[r * row_stride + col_offset ..]`. Lets several
/// samples share one GEMM as adjacent column blocks.
pub(crate) fn im2col_strided<T: Scalar>(
    input: &[T],
    g: &ConvGeom,
    col: &mut [T],
    row_stride: usize,
    col_offset: usize,
) {
    debug_assert_eq!(input.len(), g.in_len());
    let ohow = g.oh * g.ow;
    debug_assert!(col_offset + ohow <= row_stride);
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col
                    [((c * g.kh + ky) * g.kw + kx) * row_stride + col_offset..][..ohow];
                // valid ox range for this (kx): ix = ox*sw + kx - pw in [0, w)
                let off = kx as isize - g.pw as isize;
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.sw == 1 {
                        let lo = (-off).max(0) as usize;
                        let hi = ((g.w as isize - off).max(0) as usize).min(g.ow);
                        dst[..lo.min(g.ow)].fill(T::zero());
                        if lo < hi {
                            dst[lo..hi].copy_from_slice(
                                &src_row[(lo as isize + off) as usize
                                    ..(hi as isize + off) as usize],
                            );
                        }
                        dst[hi..].fill(T::zero());
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.sw) as isize + off;
                            *d = if ix >= 0 && ix < g.w as isize {
                                src_row[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto the input gradient.
pub(crate) fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dinput: &mut [T]) {
    let ohow = g.oh * g.ow;
    for c in 0..g.c {
        let plane = &mut dinput[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((c * g.kh + ky) * g.kw + kx) * ohow..][..ohow];
                let off = kx as isize - g.pw as isize;
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    if g.sw == 1 {
                        let lo = (-off).max(0) as usize;
                        let hi = ((g.w as isize - off).max(0) as usize).min(g.ow);
                        for ox in lo..hi {
                            let ix = (ox as isize + off) as usize;
                            dst_row[ix] = dst_row[ix] + src[ox];
                        }
                    } else {
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.sw) as isize + off;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// out[f, oh*ow] = weight[f, k] . col[k, oh*ow] + bias[f]
pub(crate) fn conv_sample_forward<T: Scalar>(
    weight: &[T],
    bias: &[T],
    col: &[T],
    g: &ConvGeom,
    out: &mut [T],
) {
    let (fk, k, n) = (g.f, g.k(), g.oh * g.ow);
    unsafe {
        T::gemm(
            fk,
            k,
            n,
            T::one(),
            weight.as_ptr(),
            k as isize,
            1,
            col.as_ptr(),
            n as isize,
            1,
            T::zero(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    for f in 0..fk {
        let b = bias[f];
        for v in &mut out[f * n..(f + 1) * n] {
            *v = *v + b;
        }
    }
}

/// Forward a group of samples through one GEMM; `col` holds them as
/// adjacent column blocks of width oh*ow with the given row stride.
/// `out` covers the group's output slices back to back.
pub(crate) fn conv_group_forward<T: Scalar>(
    weight: &[T],
    bias: &[T],
    col: &[T],
    g: &ConvGeom,
    group: usize,
    col_row_stride: usize,
    out: &mut [T],
) {
    let (fk, k, ohow) = (g.f, g.k(), g.oh * g.ow);
    let n = group * ohow;
    let mut tmp = vec![T::zero(); fk * n];
    unsafe {
        T::gemm(
            fk,
            k,
            n,
            T::one(),
            weight.as_ptr(),
            k as isize,
            1,
            col.as_ptr(),
            col_row_stride as isize,
            1,
            T::zero(),
            tmp.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    for j in 0..group {
        let dst = &mut out[j * g.out_len()..(j + 1) * g.out_len()];
        for f in 0..fk {
            let b = bias[f];
            let src = &tmp[f * n + j * ohow..f * n + (j + 1) * ohow];
            for (d, &s) in dst[f * ohow..(f + 1) * ohow].iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
}

/// Accumulate parameter gradients and produce dcol for one sample.
pub(crate) fn conv_sample_backward<T: Scalar>(
    weight: &[T],
    dout: &[T],
    col: &[T],
    g: &ConvGeom,
    dweight: &mut [T],
    dbias: &mut [T],
    dcol: &mut [T],
) {
    let (fk, k, n) = (g.f, g.k(), g.oh * g.ow);
    // dW += dout . col^T
    unsafe {
        T::gemm(
            fk,
            n,
            k,
            T::one(),
            dout.as_ptr(),
            n as isize,
            1,
            col.as_ptr(),
            1,
            n as isize,
            T::one(),
            dweight.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    // dcol = W^T . dout
    unsafe {
        T::gemm(
            k,
            fk,
            n,
            T::one(),
            weight.as_ptr(),
            1,
            k as isize,
            dout.as_ptr(),
            n as isize,
            1,
            T::zero(),
            dcol.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    for f in 0..fk {
        let mut s = T::zero();
        for &v in &dout[f * n..(f + 1) * n] {
            s = s + v;
        }
        dbias[f] = dbias[f] + s;
    }
}

/// y[b, u] = x[b, d] . W[u, d]^T + bias[u]
pub(crate) fn fc_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    batch: usize,
    d: usize,
    units: usize,
    out: &mut [T],
) {
    unsafe {
        T::gemm(
            batch,
            d,
            units,
            T::one(),
            x.as_ptr(),
            d as isize,
            1,
            weight.as_ptr(),
            1,
            d as isize,
            T::zero(),
            out.as_mut_ptr(),
            units as isize,
            1,
        );
    }
    for b in 0..batch {
        for u in 0..units {
            out[b * units + u] = out[b * units + u] + bias[u];
        }
    }
}

pub(crate) fn fc_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    batch: usize,
    d: usize,
    units: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    // dW += dy^T . x
    unsafe {
        T::gemm(
            units,
            batch,
            d,
            T::one(),
            dy.as_ptr(),
            1,
            units as isize,
            x.as_ptr(),
            d as isize,
            1,
            T::one(),
            dweight.as_mut_ptr(),
            d as isize,
            1,
        );
    }
    // dx = dy . W
    unsafe {
        T::gemm(
            batch,
            units,
            d,
            T::one(),
            dy.as_ptr(),
            units as isize,
            1,
            weight.as_ptr(),
            d as isize,
            1,
            T::zero(),
            dx.as_mut_ptr(),
            d as isize,
            1,
        );
    }
    for b in 0..batch {
        for u in 0..units {
            dbias[u] = dbias[u] + dy[b * units + u];
        }
    }
}

/// Max pooling over one sample plane set; records the argmax spatial index
/// per output element for the backward scatter.
pub(crate) fn pool_forward<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
    argmax: &mut [u32],
) {
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        let out_plane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        let arg_plane = &mut argmax[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0u32;
                for ky in 0..kh {
                    let iy = oy * sh + ky;
                    for kx in 0..kw {
                        let ix = ox * sw + kx;
                        let v = plane[iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = (iy * w + ix) as u32;
                        }
                    }
                }
                out_plane[oy * ow + ox] = best;
                arg_plane[oy * ow + ox] = best_idx;
            }
        }
    }
}

pub(crate) fn pool_backward<T: Scalar>(
    dy: &[T],
    argmax: &[u32],
    c: usize,
    hw: usize,
    ohow: usize,
    dx: &mut [T],
) {
    for ch in 0..c {
        let dplane = &mut dx[ch * hw..(ch + 1) * hw];
        let dy_plane = &dy[ch * ohow..(ch + 1) * ohow];
        let arg_plane = &argmax[ch * ohow..(ch + 1) * ohow];
        for (g, &idx) in dy_plane.iter().zip(arg_plane) {
            dplane[idx as usize] = dplane[idx as usize] + *g;
        }
    }
}

/// Nearest-neighbor repetition by (fy, fx).
pub(crate) fn upsample_forward<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    fy: usize,
    fx: usize,
    out: &mut [T],
) {
    let (oh, ow) = (h * fy, w * fx);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        let out_plane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let iy = oy / fy;
            for ox in 0..ow {
                out_plane[oy * ow + ox] = plane[iy * w + ox / fx];
            }
        }
    }
}

pub(crate) fn upsample_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    fy: usize,
    fx: usize,
    dx: &mut [T],
) {
    let (oh, ow) = (h * fy, w * fx);
    for ch in 0..c {
        let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
        let dy_plane = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let iy = oy / fy;
            for ox in 0..ow {
                let i = iy * w + ox / fx;
                dplane[i] = dplane[i] + dy_plane[oy * ow + ox];
            }
        }
    }
}

pub(crate) fn elu_forward<T: Scalar>(x: &[T], alpha: T, out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > T::zero() {
            v
        } else {
            alpha * (v.exp() - T::one())
        };
    }
}

/// ELU derivative recovered from the output: y > 0 ? 1 : y + alpha.
pub(crate) fn elu_backward<T: Scalar>(y: &[T], dy: &[T], alpha: T, dx: &mut [T]) {
    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
        *d = if yv > T::zero() { g } else { g * (yv + alpha) };
    }
}

/// Row-wise numerically stable softmax over the channel dimension.
pub(crate) fn softmax_forward<T: Scalar>(x: &[T], rows: usize, c: usize, out: &mut [T]) {
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let out_row = &mut out[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum = sum + *o;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], rows: usize, c: usize, dx: &mut [T]) {
    for r in 0..rows {
        let y_row = &y[r * c..(r + 1) * c];
        let dy_row = &dy[r * c..(r + 1) * c];
        let mut dot = T::zero();
        for (&yv, &g) in y_row.iter().zip(dy_row) {
            dot = dot + yv * g;
        }
        for ((d, &yv), &g) in dx[r * c..(r + 1) * c].iter_mut().zip(y_row).zip(dy_row) {
            *d = yv * (g - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(c: usize, h: usize, w: usize, f: usize, k: usize, pad: usize) -> ConvGeom {
        ConvGeom {
            c,
            h,
            w,
            f,
            kh: k,
            kw: k,
            sh: 1,
            sw: 1,
            ph: pad,
            pw: pad,
            oh: h + 2 * pad - k + 1,
            ow: w + 2 * pad - k + 1,
        }
    }

    /// Direct nested-loop convolution used as the oracle for the GEMM path.
    fn conv_direct(input: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.out_len()];
        for f in 0..g.f {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = bias[f];
                    for c in 0..g.c {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                                let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                                if iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize {
                                    acc += input[(c * g.h + iy as usize) * g.w + ix as usize]
                                        * weight[((f * g.c + c) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                    }
                    out[(f * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_gemm_matches_direct_convolution() {
        let g = geom(3, 7, 6, 4, 3, 1);
        let mut rng = crate::rng::substream(11, "conv-test");
        let input: Vec<f64> = (0..g.in_len()).map(|_| crate::rng::normal(&mut rng)).collect();
        let weight: Vec<f64> = (0..g.f * g.k()).map(|_| crate::rng::normal(&mut rng)).collect();
        let bias: Vec<f64> = (0..g.f).map(|_| crate::rng::normal(&mut rng)).collect();
        let mut col = vec![0.0; g.k() * g.oh * g.ow];
        im2col(&input, &g, &mut col);
        let mut out = vec![0.0; g.out_len()];
        conv_sample_forward(&weight, &bias, &col, &g, &mut out);
        let expect = conv_direct(&input, &weight, &bias, &g);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_conv_passes_input_through() {
        // 1x1 conv, identity kernel, zero bias
        let g = geom(1, 4, 4, 1, 1, 0);
        let input: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut col = vec![0.0; g.k() * g.oh * g.ow];
        im2col(&input, &g, &mut col);
        let mut out = vec![0.0; 16];
        conv_sample_forward(&[1.0], &[0.0], &col, &g, &mut out);
        assert_eq!(out, input);
    }

    #[test]
    fn maxpool_of_full_window_takes_global_max() {
        let input = [1.0f64, 2.0, 3.0, 4.0];
        let mut out = [0.0];
        let mut argmax = [0u32];
        pool_forward(&input, 1, 2, 2, 2, 2, 2, 2, 1, 1, &mut out, &mut argmax);
        assert_eq!(out[0], 4.0);
        assert_eq!(argmax[0], 3);
    }

    #[test]
    fn elu_saturates_to_minus_alpha() {
        let mut out = [0.0f64];
        elu_forward(&[-1000.0], 1.0, &mut out);
        assert!((out[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [0.3f64, -2.0, 1.5, 0.0, 0.0, 0.0];
        let mut y = [0.0; 6];
        softmax_forward(&x, 2, 3, &mut y);
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((y[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_repeats_blocks() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let mut y = [0.0; 16];
        upsample_forward(&x, 1, 2, 2, 2, 2, &mut y);
        assert_eq!(y[0], 1.0);
        assert_eq!(y[1], 1.0);
        assert_eq!(y[4], 1.0);
        assert_eq!(y[5], 1.0);
        assert_eq!(y[15], 4.0);
    }
}
