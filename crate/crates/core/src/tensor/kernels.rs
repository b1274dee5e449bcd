//! Raw numeric kernels over flat row-major slices.

use crate::scalar::Scalar;

/// `row += a0*b0 + a1*b1 + a2*b2 + a3*b3`, the inner step of the matmuls.
#[inline(always)]
fn axpy4<T: Scalar>(row: &mut [T], a: [T; 4], b: [&[T]; 4]) {
    let n = row.len();
    let (b0, b1, b2, b3) = (&b[0][..n], &b[1][..n], &b[2][..n], &b[3][..n]);
    for j in 0..n {
        row[j] += a[0] * b0[j] + a[1] * b1[j] + a[2] * b2[j] + a[3] * b3[j];
    }
}

#[inline(always)]
fn axpy<T: Scalar>(row: &mut [T], a: T, b: &[T]) {
    for (o, &bv) in row.iter_mut().zip(b) {
        *o += a * bv;
    }
}

/// `out[m,n] += a[m,k] @ b[k,n]`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let k4 = k - k % 4;
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for p in (0..k4).step_by(4) {
            let bs = [&b[p * n..], &b[(p + 1) * n..], &b[(p + 2) * n..], &b[(p + 3) * n..]];
            axpy4(row, [arow[p], arow[p + 1], arow[p + 2], arow[p + 3]], bs);
        }
        for p in k4..k {
            axpy(row, arow[p], &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[m,n] += a[k,m]^T @ b[k,n]`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let k4 = k - k % 4;
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in (0..k4).step_by(4) {
            let bs = [&b[p * n..], &b[(p + 1) * n..], &b[(p + 2) * n..], &b[(p + 3) * n..]];
            axpy4(row, [a[p * m + i], a[(p + 1) * m + i], a[(p + 2) * m + i], a[(p + 3) * m + i]], bs);
        }
        for p in k4..k {
            axpy(row, a[p * m + i], &b[p * n..(p + 1) * n]);
        }
    }
}

#[cfg(test)]
fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Dot product with eight interleaved partial sums.
#[inline(always)]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// `out[m,n] += a[m,k] @ b[n,k]^T`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in out[i * n..(i + 1) * n].iter_mut().enumerate() {
            *o += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

impl ConvGeom {
    /// Output range `[lo, hi)` along one axis whose input index
    /// `o * stride + k - pad` lies inside `[0, size)`.
    fn valid(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi = if size + self.pad > k { ((size + self.pad - k - 1) / self.stride + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Unfolds one image `[C,H,W]` into columns `[C*k*k, Ho*Wo]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            let (y0, y1) = g.valid(ky, g.height, oh);
            for kx in 0..g.kernel {
                let (x0, x1) = g.valid(kx, g.width, ow);
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                dst[..y0 * ow].fill(T::zero());
                dst[y1 * ow..].fill(T::zero());
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    line[..x0].fill(T::zero());
                    line[x1..].fill(T::zero());
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    let ix0 = x0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for (o, i) in line[x0..x1].iter_mut().zip((ix0..).step_by(g.stride)) {
                            *o = src[i];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_acc<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            let (y0, y1) = g.valid(ky, g.height, oh);
            for kx in 0..g.kernel {
                let (x0, x1) = g.valid(kx, g.width, ow);
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let line = &src[oy * ow + x0..oy * ow + x1];
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let ix0 = x0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (&v, i) in line.iter().zip((ix0..).step_by(g.stride)) {
                            dst[i] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution, `x: [B,Cin,H,W]`, `w: [Cout,Cin,k,k]`, `bias: [Cout]`.
pub fn conv2d<T: Scalar>(x: &[T], w: &[T], bias: &[T], batch: usize, g: &ConvGeom) -> Vec<T> {
    let hw = g.out_h() * g.out_w();
    let in_sz = g.in_ch * g.height * g.width;
    let mut out = vec![T::zero(); batch * g.out_ch * hw];
    let mut cols = vec![T::zero(); g.patch() * hw];
    for b in 0..batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        let o = &mut out[b * g.out_ch * hw..(b + 1) * g.out_ch * hw];
        for (co, chunk) in o.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[co]);
        }
        matmul_acc(w, &cols, o, g.out_ch, g.patch(), hw);
    }
    out
}

/// Gradients of [`conv2d`]; any of the outputs may be skipped.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    batch: usize,
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let hw = g.out_h() * g.out_w();
    let in_sz = g.in_ch * g.height * g.width;
    let patch = g.patch();
    let mut cols = vec![T::zero(); patch * hw];
    let mut dcols = vec![T::zero(); patch * hw];
    for b in 0..batch {
        let dob = &dout[b * g.out_ch * hw..(b + 1) * g.out_ch * hw];
        if let Some(db) = dbias.as_deref_mut() {
            for (co, chunk) in dob.chunks(hw).enumerate() {
                db[co] += T::of(crate::scalar::sum64(chunk));
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
            matmul_nt_acc(dob, &cols, dw, g.out_ch, hw, patch);
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.iter_mut().for_each(|v| *v = T::zero());
            matmul_tn_acc(w, dob, &mut dcols, g.out_ch, patch, hw);
            col2im_acc(&dcols, g, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Multi-head scaled dot-product attention over row-major `[B*len, width]`
/// projections. Returns the output and the attention probabilities
/// `[B, heads, q_len, kv_len]`.
pub fn attention<T: Scalar>(q: &[T], k: &[T], v: &[T], g: &AttnGeom) -> (Vec<T>, Vec<T>) {
    let dh = g.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![T::zero(); g.batch * g.q_len * g.width];
    let mut probs = vec![T::zero(); g.batch * g.heads * g.q_len * g.kv_len];
    let mut row = vec![0f64; g.kv_len];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let off = h * dh;
            for i in 0..g.q_len {
                let qi = &q[(b * g.q_len + i) * g.width + off..][..dh];
                let mut max = f64::NEG_INFINITY;
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[(b * g.kv_len + j) * g.width + off..][..dh];
                    let s: f64 = qi.iter().zip(kj).map(|(a, c)| a.to_f64_lossy() * c.to_f64_lossy()).sum::<f64>() * scale;
                    *r = s;
                    max = max.max(s);
                }
                let mut denom = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    denom += *r;
                }
                let p = &mut probs[((b * g.heads + h) * g.q_len + i) * g.kv_len..][..g.kv_len];
                let o = &mut out[(b * g.q_len + i) * g.width + off..][..dh];
                for (j, r) in row.iter().enumerate() {
                    let pj = T::of(r / denom);
                    p[j] = pj;
                    let vj = &v[(b * g.kv_len + j) * g.width + off..][..dh];
                    for (ov, &vv) in o.iter_mut().zip(vj) {
                        *ov += pj * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Accumulates gradients of [`attention`] into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    g: &AttnGeom,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let dh = g.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dp = vec![T::zero(); g.kv_len];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let off = h * dh;
            for i in 0..g.q_len {
                let qrow = (b * g.q_len + i) * g.width + off;
                let doi = &dout[qrow..qrow + dh];
                let p = &probs[((b * g.heads + h) * g.q_len + i) * g.kv_len..][..g.kv_len];
                let mut dot = 0f64;
                for j in 0..g.kv_len {
                    let krow = (b * g.kv_len + j) * g.width + off;
                    let vj = &v[krow..krow + dh];
                    let d: f64 = doi.iter().zip(vj).map(|(a, c)| a.to_f64_lossy() * c.to_f64_lossy()).sum();
                    dp[j] = T::of(d);
                    dot += d * p[j].to_f64_lossy();
                    for (dvv, &dov) in dv[krow..krow + dh].iter_mut().zip(doi) {
                        *dvv += p[j] * dov;
                    }
                }
                let dot = T::of(dot);
                for j in 0..g.kv_len {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let krow = (b * g.kv_len + j) * g.width + off;
                    for d in 0..dh {
                        dq[qrow + d] += ds * k[krow + d];
                        dk[krow + d] += ds * q[qrow + d];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
        let mut nt = [0.0; 4];
        // b^T as [2,3]
        matmul_nt_acc(&a, &transpose(&b, 3, 2), &mut nt, 2, 3, 2);
        assert_eq!(nt, out);
        let mut tn = [0.0; 4];
        matmul_tn_acc(&transpose(&a, 2, 3), &b, &mut tn, 3, 2, 2);
        assert_eq!(tn, out);
    }

    #[test]
    fn conv_identity_kernel() {
        let g = ConvGeom { in_ch: 1, out_ch: 1, height: 3, width: 3, kernel: 3, stride: 1, pad: 1 };
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let y = conv2d(&x, &w, &[0.5], 1, &g);
        let expect: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
        assert_eq!(y, expect);
    }

    #[test]
    fn strided_conv_shape() {
        let g = ConvGeom { in_ch: 2, out_ch: 3, height: 8, width: 8, kernel: 3, stride: 2, pad: 1 };
        assert_eq!((g.out_h(), g.out_w()), (4, 4));
        let y = conv2d(&vec![1.0f32; 2 * 64], &vec![0.0; 3 * 2 * 9], &[0.0; 3], 1, &g);
        assert_eq!(y.len(), 3 * 16);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let g = AttnGeom { batch: 2, q_len: 3, kv_len: 5, width: 4, heads: 2 };
        let q: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..40).map(|i| (i as f64 * 0.91).cos()).collect();
        let v = k.clone();
        let (_, p) = attention(&q, &k, &v, &g);
        for row in p.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
