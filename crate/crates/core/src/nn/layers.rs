//! Per-sample layer kernels, generic over the float type so the same code
//! serves `f32` training and the `f64` finite-difference reference.

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::Float;

pub trait Scalar: Float + AddAssign + Default + Debug + Send + Sync + 'static {
    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dot product with a fixed eight-lane accumulation order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Unfold one sample `[cin, h, w]` into `[cin*k*k, h*w]` with zero padding.
pub fn im2col<T: Scalar>(input: &[T], g: ConvGeom, col: &mut [T]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k as isize);
    let pad = k / 2;
    let hw = g.hw();
    for ic in 0..g.cin {
        let plane = &input[ic * hw..(ic + 1) * hw];
        for ky in 0..k {
            let dy = ky - pad;
            for kx in 0..k {
                let dx = kx - pad;
                let r = (ic * g.k * g.k) + (ky * k + kx) as usize;
                let row = &mut col[r * hw..(r + 1) * hw];
                let x0 = (-dx).max(0);
                let x1 = (w - dx).min(w);
                for y in 0..h {
                    let sy = y + dy;
                    let dst = &mut row[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    dst[..x0 as usize].fill(T::zero());
                    dst[x1 as usize..].fill(T::zero());
                    let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    dst[x0 as usize..x1 as usize]
                        .copy_from_slice(&src[(x0 + dx) as usize..(x1 + dx) as usize]);
                }
            }
        }
    }
}

/// Fold `[cin*k*k, h*w]` gradients back onto `[cin, h, w]` (accumulating).
pub fn col2im<T: Scalar>(col: &[T], g: ConvGeom, out: &mut [T]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k as isize);
    let pad = k / 2;
    let hw = g.hw();
    for ic in 0..g.cin {
        let plane = &mut out[ic * hw..(ic + 1) * hw];
        for ky in 0..k {
            let dy = ky - pad;
            for kx in 0..k {
                let dx = kx - pad;
                let r = (ic * g.k * g.k) + (ky * k + kx) as usize;
                let row = &col[r * hw..(r + 1) * hw];
                let x0 = (-dx).max(0);
                let x1 = (w - dx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let src = &row[(y * w + x0) as usize..(y * w + x1) as usize];
                    let dst = &mut plane[(sy * w + x0 + dx) as usize..(sy * w + x1 + dx) as usize];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// One sample: `out[cout, h*w] = weight[cout, rows] * col[rows, h*w] + bias`.
pub fn conv_forward<T: Scalar>(col: &[T], weight: &[T], bias: &[T], g: ConvGeom, out: &mut [T]) {
    let hw = g.hw();
    let rows = g.rows();
    for oc in 0..g.cout {
        let dst = &mut out[oc * hw..(oc + 1) * hw];
        dst.fill(bias[oc]);
        let wrow = &weight[oc * rows..(oc + 1) * rows];
        for (r, &wv) in wrow.iter().enumerate() {
            if wv == T::zero() {
                continue;
            }
            axpy(wv, &col[r * hw..(r + 1) * hw], dst);
        }
    }
}

/// One sample of conv backward. `gcol` receives the column gradient
/// (overwritten); weight and bias gradients accumulate.
pub fn conv_backward<T: Scalar>(
    col: &[T],
    weight: &[T],
    gout: &[T],
    g: ConvGeom,
    gweight: &mut [T],
    gbias: &mut [T],
    gcol: Option<&mut [T]>,
) {
    let hw = g.hw();
    let rows = g.rows();
    for oc in 0..g.cout {
        let go = &gout[oc * hw..(oc + 1) * hw];
        let mut s = T::zero();
        for &v in go {
            s += v;
        }
        gbias[oc] += s;
        let gw = &mut gweight[oc * rows..(oc + 1) * rows];
        for (r, gwv) in gw.iter_mut().enumerate() {
            *gwv += dot(go, &col[r * hw..(r + 1) * hw]);
        }
    }
    if let Some(gcol) = gcol {
        gcol.fill(T::zero());
        for oc in 0..g.cout {
            let go = &gout[oc * hw..(oc + 1) * hw];
            let wrow = &weight[oc * rows..(oc + 1) * rows];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                axpy(wv, go, &mut gcol[r * hw..(r + 1) * hw]);
            }
        }
    }
}

/// One sample: `out[o] = bias[o] + weight[o, :] . x`.
pub fn dense_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let nin = x.len();
    for (o, dst) in out.iter_mut().enumerate() {
        *dst = bias[o] + dot(&weight[o * nin..(o + 1) * nin], x);
    }
}

pub fn dense_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    gweight: &mut [T],
    gbias: &mut [T],
    gx: Option<&mut [T]>,
) {
    let nin = x.len();
    for (o, &go) in gout.iter().enumerate() {
        gbias[o] += go;
        if go != T::zero() {
            axpy(go, x, &mut gweight[o * nin..(o + 1) * nin]);
        }
    }
    if let Some(gx) = gx {
        gx.fill(T::zero());
        for (o, &go) in gout.iter().enumerate() {
            if go != T::zero() {
                axpy(go, &weight[o * nin..(o + 1) * nin], gx);
            }
        }
    }
}

/// 2x2 max pooling over `[c, h, w]`; `argmax` receives the flat input index
/// of each output (first maximum in row-major window order).
pub fn maxpool_forward<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [T],
    argmax: &mut [u32],
) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i0 = base + (2 * y) * w + 2 * x;
                let cands = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = cands[0];
                for &ci in &cands[1..] {
                    if input[ci] > input[best] {
                        best = ci;
                    }
                }
                let o = ch * oh * ow + y * ow + x;
                out[o] = input[best];
                argmax[o] = best as u32;
            }
        }
    }
}

pub fn relu_forward<T: Scalar>(x: &mut [T]) {
    for v in x {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_center_row_is_identity() {
        let g = ConvGeom {
            cin: 1,
            cout: 1,
            h: 3,
            w: 3,
            k: 3,
        };
        let input: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let mut col = vec![0.0f32; 9 * 9];
        im2col(&input, g, &mut col);
        // kernel tap (1,1) is the unshifted image
        assert_eq!(&col[4 * 9..5 * 9], &input[..]);
        // tap (0,0) reads the up-left neighbour
        assert_eq!(&col[0..9], &[0., 0., 0., 0., 1., 2., 0., 4., 5.]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            cin: 2,
            cout: 1,
            h: 4,
            w: 5,
            k: 3,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..18 * 20).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; 18 * 20];
        im2col(&x, g, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 40];
        col2im(&y, g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn maxpool_takes_first_max() {
        let input = [1.0f32, 3.0, 3.0, 0.0];
        let mut out = [0.0f32];
        let mut arg = [0u32];
        maxpool_forward(&input, 1, 2, 2, &mut out, &mut arg);
        assert_eq!(out[0], 3.0);
        assert_eq!(arg[0], 1);
    }
}
