//! Stride-1 "same" convolution.
//!
//! Two lowerings onto matrix products. The common one gathers image patches
//! into columns (im2col) restricted to the kernel taps that can ever touch
//! the image. When that live window is larger than the image itself, most
//! gathered entries would be padding, so the layer is instead expanded into
//! one dense operator from input pixels to output pixels and the whole
//! batch goes through a single product.

use super::gemm::{gemm, Op};
use super::{LayerState, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense operators above this many entries fall back to im2col.
const OPERATOR_LIMIT: usize = 12 << 20;

/// Top/left and bottom/right padding for a "same" convolution. Even kernels
/// pad one more on the bottom/right.
pub fn same_padding(kernel: usize) -> (usize, usize) {
    let before = (kernel - 1) / 2;
    (before, kernel - 1 - before)
}

/// Kernel taps that can touch the image along one axis.
#[derive(Debug, Clone, Copy)]
struct TapWindow {
    lo: usize,
    len: usize,
}

impl TapWindow {
    fn new(kernel: usize, pad: usize, size: usize) -> Self {
        let lo = pad.saturating_sub(size - 1);
        let hi = (pad + size - 1).min(kernel - 1);
        Self {
            lo,
            len: hi + 1 - lo,
        }
    }

    /// Output positions `p` reading input position `q` through a live tap,
    /// as `p0..p1`. The tap index is `q + pad - p`.
    #[inline]
    fn outputs_for(&self, q: usize, pad: usize, size: usize) -> (usize, usize) {
        let p1 = (q + pad + 1 - self.lo).min(size);
        let p0 = (q + pad + 1).saturating_sub(self.lo + self.len);
        (p0, p1.max(p0))
    }
}

struct Geometry {
    batch: usize,
    in_c: usize,
    out_c: usize,
    height: usize,
    width: usize,
    kernel: usize,
    pad: usize,
    rows: TapWindow,
    cols: TapWindow,
}

impl Geometry {
    fn of<T: Scalar>(input: &Tensor<T>, state: &LayerState<T>) -> Result<Self> {
        let w = state.weights.shape();
        if w.len() != 4 || w[2] != w[3] {
            return Err(Error::Shape(format!(
                "conv2d weights must be [out, in, k, k], got {w:?}"
            )));
        }
        let s = input.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d input must be [N, C, H, W], got {s:?}"
            )));
        }
        if s[1] != w[1] {
            return Err(Error::Shape(format!(
                "conv2d expects {} input channels, got {}",
                w[1], s[1]
            )));
        }
        let pad = same_padding(w[2]).0;
        Ok(Self {
            batch: s[0],
            in_c: s[1],
            out_c: w[0],
            height: s[2],
            width: s[3],
            kernel: w[2],
            pad,
            rows: TapWindow::new(w[2], pad, s[2]),
            cols: TapWindow::new(w[2], pad, s[3]),
        })
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn taps(&self) -> usize {
        self.rows.len * self.cols.len
    }

    fn use_operator(&self) -> bool {
        let p = self.plane();
        p < self.taps() && self.in_c * p * self.out_c * p <= OPERATOR_LIMIT
    }

    /// Visits every (input pixel, output pixel) pair joined by a live tap as
    /// `(q, p, dy, dx)`.
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (h, w, pad) = (self.height, self.width, self.pad);
        for qy in 0..h {
            let (py0, py1) = self.rows.outputs_for(qy, pad, h);
            for qx in 0..w {
                let (px0, px1) = self.cols.outputs_for(qx, pad, w);
                for py in py0..py1 {
                    for px in px0..px1 {
                        f(qy * w + qx, py * w + px, qy + pad - py, qx + pad - px);
                    }
                }
            }
        }
    }

    /// Pairs as flat offsets: `(q, p, tap offset within one (o, c) kernel)`.
    fn pairs(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let k = self.kernel;
        self.for_each_pair(|q, p, dy, dx| out.push((q, p, dy * k + dx)));
        out
    }
}

/// Stride-1 "same" convolution: `out[n,o,y,x] = b[o] + sum over c,dy,dx of
/// in_padded[n,c,y+dy,x+dx] * w[o,c,dy,dx]`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, state: &LayerState<T>) -> Result<Tensor<T>> {
    let g = Geometry::of(input, state)?;
    let (o_n, plane) = (g.out_c, g.plane());
    let mut out = vec![T::zero(); g.batch * o_n * plane];
    if g.use_operator() {
        let op = operator(&g, state.weights.data());
        let cq = g.in_c * plane;
        gemm(
            g.batch,
            cq,
            o_n * plane,
            input.data(),
            Op::N,
            &op,
            Op::N,
            &mut out,
            false,
        );
    } else {
        let packed = pack(&g, state.weights.data());
        let ckk = g.in_c * g.taps();
        let mut cols = vec![T::zero(); plane * ckk];
        for n in 0..g.batch {
            im2col(
                &g,
                &input.data()[n * g.in_c * plane..][..g.in_c * plane],
                &mut cols,
            );
            let dst = &mut out[n * o_n * plane..][..o_n * plane];
            gemm(o_n, ckk, plane, &packed, Op::T, &cols, Op::T, dst, false);
        }
    }
    let biases = state.biases.data();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = biases[i % o_n];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Tensor::new(vec![g.batch, o_n, g.height, g.width], out)
}

/// Fills the weight and bias gradients of `state` and returns the gradient
/// with respect to the layer input.
pub fn conv2d_backward<T: Scalar>(
    upstream: &Tensor<T>,
    cached_input: Option<&Tensor<T>>,
    state: &mut LayerState<T>,
) -> Result<Tensor<T>> {
    let input = cached_input
        .ok_or_else(|| Error::Usage("conv2d backward called without a cached input".into()))?;
    let g = Geometry::of(input, state)?;
    let (o_n, plane) = (g.out_c, g.plane());
    if upstream.shape() != [g.batch, o_n, g.height, g.width] {
        return Err(Error::Shape(format!(
            "conv2d upstream gradient {:?} does not match output [{}, {o_n}, {}, {}]",
            upstream.shape(),
            g.batch,
            g.height,
            g.width
        )));
    }
    let up = upstream.data();
    let x = input.data();
    let mut grad_b = vec![T::zero(); o_n];
    for (i, chunk) in up.chunks(plane).enumerate() {
        grad_b[i % o_n] += chunk.iter().copied().sum::<T>();
    }
    let cq = g.in_c * plane;
    let mut grad_in = vec![T::zero(); x.len()];
    let grad_w = if g.use_operator() {
        let op = operator(&g, state.weights.data());
        let op_p = o_n * plane;
        gemm(
            g.batch,
            op_p,
            cq,
            up,
            Op::N,
            &op,
            Op::T,
            &mut grad_in,
            false,
        );
        let mut grad_op = vec![T::zero(); cq * op_p];
        gemm(cq, g.batch, op_p, x, Op::T, up, Op::N, &mut grad_op, false);
        unoperator(&g, &grad_op)
    } else {
        let packed = pack(&g, state.weights.data());
        let ckk = g.in_c * g.taps();
        let mut cols = vec![T::zero(); plane * ckk];
        let mut grad_cols = vec![T::zero(); plane * ckk];
        let mut grad_packed = vec![T::zero(); ckk * o_n];
        for n in 0..g.batch {
            let x_n = &x[n * cq..][..cq];
            let up_n = &up[n * o_n * plane..][..o_n * plane];
            im2col(&g, x_n, &mut cols);
            gemm(
                ckk,
                plane,
                o_n,
                &cols,
                Op::T,
                up_n,
                Op::T,
                &mut grad_packed,
                true,
            );
            gemm(
                plane,
                o_n,
                ckk,
                up_n,
                Op::T,
                &packed,
                Op::T,
                &mut grad_cols,
                false,
            );
            col2im(&g, &grad_cols, &mut grad_in[n * cq..][..cq]);
        }
        unpack(&g, &grad_packed, state.weights.len())
    };
    state.weight_gradients = Tensor::new(state.weights.shape().to_vec(), grad_w)?;
    state.bias_gradients = Tensor::new(vec![o_n], grad_b)?;
    Tensor::new(input.shape().to_vec(), grad_in)
}

/// Offset of tap `(dy, dx)` of channel `c` in the packed layout
/// `[in_c, live rows, live cols]`.
#[inline]
fn packed_tap(g: &Geometry, c: usize, dy: usize, dx: usize) -> usize {
    (c * g.rows.len + dy - g.rows.lo) * g.cols.len + dx - g.cols.lo
}

/// Weights `[out, in, k, k]` cut to the live taps, as a `[in*taps, out]`
/// matrix.
fn pack<T: Scalar>(g: &Geometry, weights: &[T]) -> Vec<T> {
    let k = g.kernel;
    let mut packed = vec![T::zero(); g.in_c * g.taps() * g.out_c];
    for o in 0..g.out_c {
        for c in 0..g.in_c {
            for dy in g.rows.lo..g.rows.lo + g.rows.len {
                for dx in g.cols.lo..g.cols.lo + g.cols.len {
                    packed[packed_tap(g, c, dy, dx) * g.out_c + o] =
                        weights[((o * g.in_c + c) * k + dy) * k + dx];
                }
            }
        }
    }
    packed
}

/// Inverse of [`pack`]; taps outside the live window get zero.
fn unpack<T: Scalar>(g: &Geometry, packed: &[T], len: usize) -> Vec<T> {
    let k = g.kernel;
    let mut weights = vec![T::zero(); len];
    for o in 0..g.out_c {
        for c in 0..g.in_c {
            for dy in g.rows.lo..g.rows.lo + g.rows.len {
                for dx in g.cols.lo..g.cols.lo + g.cols.len {
                    weights[((o * g.in_c + c) * k + dy) * k + dx] =
                        packed[packed_tap(g, c, dy, dx) * g.out_c + o];
                }
            }
        }
    }
    weights
}

/// Patches of one image as a `[pixels, in*taps]` matrix, zero where a tap
/// reads padding.
fn im2col<T: Scalar>(g: &Geometry, image: &[T], cols: &mut [T]) {
    cols.fill(T::zero());
    let plane = g.plane();
    let row_len = g.in_c * g.taps();
    for c in 0..g.in_c {
        let channel = &image[c * plane..][..plane];
        g.for_each_pair(|q, p, dy, dx| {
            cols[p * row_len + packed_tap(g, c, dy, dx)] = channel[q];
        });
    }
}

/// Adds patch gradients back onto the image they were gathered from.
fn col2im<T: Scalar>(g: &Geometry, cols: &[T], image: &mut [T]) {
    let plane = g.plane();
    let row_len = g.in_c * g.taps();
    for c in 0..g.in_c {
        let channel = &mut image[c * plane..][..plane];
        g.for_each_pair(|q, p, dy, dx| {
            channel[q] += cols[p * row_len + packed_tap(g, c, dy, dx)];
        });
    }
}

/// The layer as a dense `[in*pixels, out*pixels]` operator.
fn operator<T: Scalar>(g: &Geometry, weights: &[T]) -> Vec<T> {
    let (plane, kk) = (g.plane(), g.kernel * g.kernel);
    let row_len = g.out_c * plane;
    let pairs = g.pairs();
    let mut op = vec![T::zero(); g.in_c * plane * row_len];
    for c in 0..g.in_c {
        for o in 0..g.out_c {
            let kernel = &weights[(o * g.in_c + c) * kk..][..kk];
            for &(q, p, t) in &pairs {
                op[(c * plane + q) * row_len + o * plane + p] = kernel[t];
            }
        }
    }
    op
}

/// Weight gradients from the gradient of the dense operator: each tap sums
/// the operator entries it fills.
fn unoperator<T: Scalar>(g: &Geometry, grad_op: &[T]) -> Vec<T> {
    let (plane, kk) = (g.plane(), g.kernel * g.kernel);
    let row_len = g.out_c * plane;
    let pairs = g.pairs();
    let mut grad = vec![T::zero(); g.out_c * g.in_c * kk];
    for c in 0..g.in_c {
        for o in 0..g.out_c {
            let kernel = &mut grad[(o * g.in_c + c) * kk..][..kk];
            for &(q, p, t) in &pairs {
                kernel[t] += grad_op[(c * plane + q) * row_len + o * plane + p];
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    /// Straight from the definition, no lowering.
    fn reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
        let (s, ws) = (x.shape(), w.shape());
        let (n_n, c_n, h, wd, o_n, k) = (s[0], s[1], s[2], s[3], ws[0], ws[2]);
        let pad = same_padding(k).0 as isize;
        let mut out = vec![0.0; n_n * o_n * h * wd];
        for n in 0..n_n {
            for o in 0..o_n {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[o];
                        for c in 0..c_n {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let iy = y as isize + dy as isize - pad;
                                    let ix = xx as isize + dx as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((n * c_n + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * c_n + c) * k + dy) * k + dx];
                                }
                            }
                        }
                        out[((n * o_n + o) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_case(
        seed: u64,
        n: usize,
        c: usize,
        o: usize,
        h: usize,
        w: usize,
        k: usize,
    ) -> (Tensor<f64>, LayerState<f64>) {
        let mut rng = seeded(seed);
        let x = Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0..1.0)).unwrap();
        let wt = Tensor::from_fn(&[o, c, k, k], |_| rng.random_range(-1.0..1.0)).unwrap();
        let b = Tensor::from_fn(&[o], |_| rng.random_range(-1.0..1.0)).unwrap();
        (x, LayerState::new(wt, b).unwrap())
    }

    #[test]
    fn both_lowerings_match_the_definition() {
        // (n, c, o, h, w, k): small kernels take im2col, large ones the
        // dense operator, including rectangular images and even kernels.
        let cases = [
            (2, 3, 4, 5, 5, 3),
            (1, 2, 3, 4, 6, 2),
            (3, 2, 2, 4, 4, 9),
            (2, 3, 2, 3, 5, 50),
            (1, 1, 1, 1, 1, 1),
            (2, 2, 3, 6, 6, 8),
        ];
        for (i, &(n, c, o, h, w, k)) in cases.iter().enumerate() {
            let (x, st) = random_case(i as u64, n, c, o, h, w, k);
            let got = conv2d_forward(&x, &st).unwrap();
            let want = reference(&x, &st.weights, st.biases.data());
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn lowerings_agree_on_gradients() {
        let (x, st) = random_case(7, 2, 3, 2, 4, 4, 7);
        let g = Geometry::of(&x, &st).unwrap();
        assert!(g.use_operator());
        let up = Tensor::from_fn(&[2, 2, 4, 4], |i| (i as f64 * 0.37).sin()).unwrap();
        let mut a = st.clone();
        let gin_a = conv2d_backward(&up, Some(&x), &mut a).unwrap();
        // Same layer through im2col by forcing the other branch.
        let packed = pack(&g, st.weights.data());
        let ckk = g.in_c * g.taps();
        let plane = g.plane();
        let mut cols = vec![0.0; plane * ckk];
        let mut grad_cols = vec![0.0; plane * ckk];
        let mut grad_packed = vec![0.0; ckk * 2];
        let mut gin_b = vec![0.0; x.len()];
        for n in 0..2 {
            let cq = 3 * plane;
            im2col(&g, &x.data()[n * cq..][..cq], &mut cols);
            let up_n = &up.data()[n * 2 * plane..][..2 * plane];
            gemm(
                ckk,
                plane,
                2,
                &cols,
                Op::T,
                up_n,
                Op::T,
                &mut grad_packed,
                true,
            );
            gemm(
                plane,
                2,
                ckk,
                up_n,
                Op::T,
                &packed,
                Op::T,
                &mut grad_cols,
                false,
            );
            col2im(&g, &grad_cols, &mut gin_b[n * cq..][..cq]);
        }
        let gw_b = unpack(&g, &grad_packed, st.weights.len());
        for (p, q) in gin_a.data().iter().zip(&gin_b) {
            assert!((p - q).abs() < 1e-12);
        }
        for (p, q) in a.weight_gradients.data().iter().zip(&gw_b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn tap_window_examples() {
        // k = 50 on 8 pixels: pad 24, live taps 17..=31.
        let t = TapWindow::new(50, 24, 8);
        assert_eq!((t.lo, t.len), (17, 15));
        assert_eq!(t.outputs_for(0, 24, 8), (0, 8));
        // k = 3 on 8 pixels: every tap live, neighbours only.
        let t = TapWindow::new(3, 1, 8);
        assert_eq!((t.lo, t.len), (0, 3));
        assert_eq!(t.outputs_for(0, 1, 8), (0, 2));
        assert_eq!(t.outputs_for(7, 1, 8), (6, 8));
    }
}
