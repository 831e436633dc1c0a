//! Dense numeric kernels behind the graph ops: matrix products and same-padded
//! stride-1 convolution over NHWC images.

use crate::par;
use crate::scalar::Scalar;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    par::for_each_chunk(&mut out, n, |i, row| matmul_row(a, b, i, k, n, row));
    out
}

pub fn matmul_seq<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    par::for_each_chunk_seq(&mut out, n, |i, row| matmul_row(a, b, i, k, n, row));
    out
}

#[inline]
fn matmul_row<T: Scalar>(a: &[T], b: &[T], i: usize, k: usize, n: usize, row: &mut [T]) {
    let arow = &a[i * k..(i + 1) * k];
    for (p, &av) in arow.iter().enumerate() {
        if av == T::zero() {
            continue;
        }
        let brow = &b[p * n..(p + 1) * n];
        for (o, &bv) in row.iter_mut().zip(brow) {
            *o = *o + av * bv;
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a same-padded, stride-1 convolution over NHWC input with
/// `[k, k, c_in, c_out]` weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }
    fn in_image(&self) -> usize {
        self.height * self.width * self.c_in
    }
    fn out_image(&self) -> usize {
        self.height * self.width * self.c_out
    }
    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.c_in * self.c_out
    }
}

pub fn conv2d_forward<T: Scalar>(g: ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    par::for_each_chunk(&mut out, g.out_image(), |b, o| {
        conv_forward_image(g, &x[b * g.in_image()..(b + 1) * g.in_image()], w, bias, o)
    });
    out
}

pub fn conv2d_forward_seq<T: Scalar>(g: ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    par::for_each_chunk_seq(&mut out, g.out_image(), |b, o| {
        conv_forward_image(g, &x[b * g.in_image()..(b + 1) * g.in_image()], w, bias, o)
    });
    out
}

fn conv_forward_image<T: Scalar>(g: ConvGeom, x: &[T], w: &[T], bias: &[T], out: &mut [T]) {
    let (h, wd, ci, co, k) = (g.height, g.width, g.c_in, g.c_out, g.kernel);
    let pad = g.pad();
    for oy in 0..h {
        for ox in 0..wd {
            let o = &mut out[(oy * wd + ox) * co..(oy * wd + ox + 1) * co];
            o.copy_from_slice(bias);
            for ky in 0..k {
                let iy = oy as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize - pad;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xp = &x[(iy as usize * wd + ix as usize) * ci..][..ci];
                    let wbase = (ky * k + kx) * ci * co;
                    for (c, &xv) in xp.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let wr = &w[wbase + c * co..wbase + (c + 1) * co];
                        for (ov, &wv) in o.iter_mut().zip(wr) {
                            *ov = *ov + xv * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to input, weights and bias.
pub struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(g: ConvGeom, x: &[T], w: &[T], dout: &[T]) -> ConvGrads<T> {
    let w_t = transpose_taps(g, w);
    let parts = par::map_range(g.batch, |b| conv_backward_image(g, x, &w_t, dout, b));
    reduce_conv_parts(g, parts)
}

pub fn conv2d_backward_seq<T: Scalar>(
    g: ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
) -> ConvGrads<T> {
    let w_t = transpose_taps(g, w);
    let parts = (0..g.batch)
        .map(|b| conv_backward_image(g, x, &w_t, dout, b))
        .collect();
    reduce_conv_parts(g, parts)
}

fn reduce_conv_parts<T: Scalar>(g: ConvGeom, parts: Vec<ConvGrads<T>>) -> ConvGrads<T> {
    let mut dx = Vec::with_capacity(g.batch * g.in_image());
    let mut dw = vec![T::zero(); g.weight_len()];
    let mut db = vec![T::zero(); g.c_out];
    // fixed image order keeps the reduction bitwise reproducible
    for p in parts {
        dx.extend_from_slice(&p.dx);
        for (a, v) in dw.iter_mut().zip(&p.dw) {
            *a = *a + *v;
        }
        for (a, v) in db.iter_mut().zip(&p.db) {
            *a = *a + *v;
        }
    }
    ConvGrads { dx, dw, db }
}

fn conv_backward_image<T: Scalar>(
    g: ConvGeom,
    x: &[T],
    w_t: &[T],
    dout: &[T],
    b: usize,
) -> ConvGrads<T> {
    let (h, wd, ci, co, k) = (g.height, g.width, g.c_in, g.c_out, g.kernel);
    let pad = g.pad();
    let x = &x[b * g.in_image()..(b + 1) * g.in_image()];
    let dout = &dout[b * g.out_image()..(b + 1) * g.out_image()];
    let mut dx = vec![T::zero(); g.in_image()];
    let mut dw = vec![T::zero(); g.weight_len()];
    let mut db = vec![T::zero(); co];
    for oy in 0..h {
        for ox in 0..wd {
            let d = &dout[(oy * wd + ox) * co..(oy * wd + ox + 1) * co];
            for (a, &v) in db.iter_mut().zip(d) {
                *a = *a + v;
            }
            for ky in 0..k {
                let iy = oy as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize - pad;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let pix = (iy as usize * wd + ix as usize) * ci;
                    let tap = (ky * k + kx) * ci * co;
                    // dx[pix, :] += Σ_o d[o] · wᵀ[tap, o, :]
                    let dxp = &mut dx[pix..pix + ci];
                    for (o, &dv) in d.iter().enumerate() {
                        if dv == T::zero() {
                            continue;
                        }
                        let wr = &w_t[tap + o * ci..tap + (o + 1) * ci];
                        for (a, &wv) in dxp.iter_mut().zip(wr) {
                            *a = *a + dv * wv;
                        }
                    }
                    for c in 0..ci {
                        let xv = x[pix + c];
                        if xv != T::zero() {
                            let dwr = &mut dw[tap + c * co..tap + (c + 1) * co];
                            for (a, &dv) in dwr.iter_mut().zip(d) {
                                *a = *a + xv * dv;
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Weights `[k, k, ci, co]` rearranged to `[k, k, co, ci]`.
fn transpose_taps<T: Scalar>(g: ConvGeom, w: &[T]) -> Vec<T> {
    let (ci, co) = (g.c_in, g.c_out);
    let mut out = Vec::with_capacity(w.len());
    for tap in w.chunks(ci * co) {
        out.extend(transpose(tap, ci, co));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_paths_agree_bitwise() {
        let g = ConvGeom {
            batch: 3,
            height: 5,
            width: 4,
            c_in: 2,
            c_out: 3,
            kernel: 3,
        };
        let x: Vec<f32> = (0..g.batch * g.in_image())
            .map(|i| ((i * 37 % 11) as f32 - 5.0) / 7.0)
            .collect();
        let w: Vec<f32> = (0..g.weight_len())
            .map(|i| ((i * 13 % 7) as f32 - 3.0) / 5.0)
            .collect();
        let bias = vec![0.1f32, -0.2, 0.3];
        let a = conv2d_forward(g, &x, &w, &bias);
        let b = conv2d_forward_seq(g, &x, &w, &bias);
        assert_eq!(a, b);
        let ga = conv2d_backward(g, &x, &w, &a);
        let gb = conv2d_backward_seq(g, &x, &w, &b);
        assert_eq!(ga.dx, gb.dx);
        assert_eq!(ga.dw, gb.dw);
        assert_eq!(ga.db, gb.db);

        let m = matmul(&x[..12], &w[..12], 4, 3, 4);
        let s = matmul_seq(&x[..12], &w[..12], 4, 3, 4);
        assert_eq!(m, s);
    }
}
