//! Batched layer kernels with hand-written backward passes.
//!
//! Spatial activations use a channel-major batch layout `[C, N, H, W]` so a
//! whole batch of instances goes through one GEMM per convolution.

use super::tensor::{matmul, Op, Real, Tensor};

/// Activation map in `[C, N, H, W]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Spatial<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Spatial<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![T::zero(); c * n * h * w] }
    }

    /// Builds a batch from per-instance `[C, H, W]` buffers.
    pub fn from_instances<S: Copy>(
        c: usize,
        h: usize,
        w: usize,
        instances: &[&[S]],
        conv: impl Fn(S) -> T,
    ) -> Self {
        let n = instances.len();
        let plane = h * w;
        let mut out = Self::zeros(c, n, h, w);
        for (i, inst) in instances.iter().enumerate() {
            assert_eq!(inst.len(), c * plane, "instance has wrong size");
            for ch in 0..c {
                let dst = &mut out.data[(ch * n + i) * plane..(ch * n + i + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(&inst[ch * plane..(ch + 1) * plane]) {
                    *d = conv(s);
                }
            }
        }
        out
    }

    /// Copies instance `i` out as a `[C, H, W]` buffer.
    pub fn instance(&self, i: usize) -> Vec<T> {
        let plane = self.h * self.w;
        let mut out = Vec::with_capacity(self.c * plane);
        for ch in 0..self.c {
            let start = (ch * self.n + i) * plane;
            out.extend_from_slice(&self.data[start..start + plane]);
        }
        out
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c, self.n, self.h, self.w]
    }
}

/// Target number of scalars in one im2col chunk; keeps the column buffer
/// cache-sized instead of materializing it for the whole batch.
const COLS_CHUNK: usize = 1 << 18;

fn chunk_len(ckk: usize, plane_out: usize, n: usize) -> usize {
    (COLS_CHUNK / (ckk * plane_out).max(1)).clamp(1, n.max(1))
}

/// Valid output columns `[lo, hi)` for kernel offset `kx` with padding.
fn valid_range(kx: usize, pad: usize, w_in: usize, w_out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w_in + pad).saturating_sub(kx).min(w_out);
    (lo, hi.max(lo))
}

/// Columns for instances `n0..n1`: `[C*k*k, (n1-n0)*ho*wo]`.
fn im2col<T: Real>(x: &Spatial<T>, k: usize, pad: usize, ho: usize, wo: usize, n0: usize, n1: usize, cols: &mut Vec<T>) {
    let nb = n1 - n0;
    let cols_w = nb * ho * wo;
    cols.clear();
    cols.resize(x.c * k * k * cols_w, T::zero());
    let plane = x.h * x.w;
    for c in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst_row = &mut cols[row * cols_w..(row + 1) * cols_w];
                let (lo, hi) = valid_range(kx, pad, x.w, wo);
                for (j, n) in (n0..n1).enumerate() {
                    let src = &x.data[(c * x.n + n) * plane..(c * x.n + n + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy + ky;
                        if iy < pad || iy >= x.h + pad || lo >= hi {
                            continue;
                        }
                        let src_row = &src[(iy - pad) * x.w..(iy - pad + 1) * x.w];
                        let dst = &mut dst_row[(j * ho + oy) * wo..(j * ho + oy + 1) * wo];
                        dst[lo..hi].copy_from_slice(&src_row[lo + kx - pad..hi + kx - pad]);
                    }
                }
            }
        }
    }
}

/// Scatters columns of instances `n0..n1` back into `x` (accumulating).
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], x: &mut Spatial<T>, k: usize, pad: usize, ho: usize, wo: usize, n0: usize, n1: usize) {
    let nb = n1 - n0;
    let cols_w = nb * ho * wo;
    let plane = x.h * x.w;
    let (c_in, n_in, h, w) = (x.c, x.n, x.h, x.w);
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src_row = &cols[row * cols_w..(row + 1) * cols_w];
                let (lo, hi) = valid_range(kx, pad, w, wo);
                for (j, n) in (n0..n1).enumerate() {
                    let dst = &mut x.data[(c * n_in + n) * plane..(c * n_in + n + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad || lo >= hi {
                            continue;
                        }
                        let src = &src_row[(j * ho + oy) * wo..(j * ho + oy + 1) * wo];
                        let dst_row = &mut dst[(iy - pad) * w..(iy - pad + 1) * w];
                        for (d, &s) in dst_row[lo + kx - pad..hi + kx - pad].iter_mut().zip(&src[lo..hi]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// Saved state for the backward pass of [`conv2d_forward`]: the input
/// itself, from which columns are rebuilt chunk by chunk.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    input: Spatial<T>,
}

impl<T> ConvCache<T> {
    pub fn new(input: Spatial<T>) -> Self {
        Self { input }
    }
}

/// Copies rows of an `[O, N*P]` map for instances `n0..n1` into `[O, nb*P]`.
fn gather_instances<T: Real>(data: &[T], o: usize, n: usize, plane: usize, n0: usize, n1: usize) -> Vec<T> {
    let nb = n1 - n0;
    let mut out = Vec::with_capacity(o * nb * plane);
    for oc in 0..o {
        out.extend_from_slice(&data[(oc * n + n0) * plane..(oc * n + n1) * plane]);
    }
    out
}

/// Stride-1 convolution. `weight` is `[O, C, k, k]`, `bias` is `[O]`.
pub fn conv2d_forward<T: Real>(
    x: &Spatial<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> (Spatial<T>, ConvCache<T>) {
    let out = conv2d_infer(x, weight, bias, pad);
    (out, ConvCache { input: x.clone() })
}

/// Forward pass without keeping anything for backprop.
pub fn conv2d_infer<T: Real>(x: &Spatial<T>, weight: &Tensor<T>, bias: &Tensor<T>, pad: usize) -> Spatial<T> {
    let &[o, c, k, k2] = weight.shape() else {
        panic!("conv weight must be rank 4, got {:?}", weight.shape());
    };
    assert_eq!(k, k2, "square kernels only");
    assert_eq!(c, x.c, "conv input channels");
    let ho = x.h + 2 * pad + 1 - k;
    let wo = x.w + 2 * pad + 1 - k;
    let plane_out = ho * wo;
    let ckk = c * k * k;
    let mut out = Spatial::zeros(o, x.n, ho, wo);
    let step = chunk_len(ckk, plane_out, x.n);
    let mut cols = Vec::new();
    let mut tmp = Vec::new();
    for n0 in (0..x.n).step_by(step) {
        let n1 = (n0 + step).min(x.n);
        let w_chunk = (n1 - n0) * plane_out;
        im2col(x, k, pad, ho, wo, n0, n1, &mut cols);
        tmp.clear();
        tmp.resize(o * w_chunk, T::zero());
        matmul(o, ckk, w_chunk, weight.data(), Op::N, &cols, Op::N, &mut tmp, false);
        for oc in 0..o {
            let b = bias.data()[oc];
            let dst = &mut out.data[(oc * x.n + n0) * plane_out..(oc * x.n + n1) * plane_out];
            for (d, &v) in dst.iter_mut().zip(&tmp[oc * w_chunk..(oc + 1) * w_chunk]) {
                *d = v + b;
            }
        }
    }
    out
}

/// Returns `(d_weight, d_bias, d_input)`; `d_input` only when requested.
pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    d_out: &Spatial<T>,
    pad: usize,
    need_input_grad: bool,
) -> (Vec<T>, Vec<T>, Option<Spatial<T>>) {
    let &[o, c, k, _] = weight.shape() else { unreachable!() };
    let x = &cache.input;
    let (ho, wo) = (d_out.h, d_out.w);
    let plane_out = ho * wo;
    let ckk = c * k * k;
    let mut d_w = vec![T::zero(); o * ckk];
    let d_b = d_out.data.chunks(x.n * plane_out).map(|row| row.iter().copied().sum()).collect();
    let mut d_x = need_input_grad.then(|| Spatial::zeros(x.c, x.n, x.h, x.w));
    let step = chunk_len(ckk, plane_out, x.n);
    let mut cols = Vec::new();
    let mut d_cols = Vec::new();
    for n0 in (0..x.n).step_by(step) {
        let n1 = (n0 + step).min(x.n);
        let w_chunk = (n1 - n0) * plane_out;
        let g = gather_instances(&d_out.data, o, x.n, plane_out, n0, n1);
        im2col(x, k, pad, ho, wo, n0, n1, &mut cols);
        matmul(o, w_chunk, ckk, &g, Op::N, &cols, Op::T, &mut d_w, true);
        if let Some(dx) = d_x.as_mut() {
            d_cols.clear();
            d_cols.resize(ckk * w_chunk, T::zero());
            matmul(ckk, o, w_chunk, weight.data(), Op::T, &g, Op::N, &mut d_cols, false);
            col2im(&d_cols, dx, k, pad, ho, wo, n0, n1);
        }
    }
    (d_w, d_b, d_x)
}

/// Non-overlapping transposed convolution (kernel = stride = `s`).
/// `weight` is `[C, O, s, s]`, `bias` is `[O]`.
pub fn tconv_forward<T: Real>(x: &Spatial<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Spatial<T> {
    let &[c, o, s, s2] = weight.shape() else {
        panic!("tconv weight must be rank 4, got {:?}", weight.shape());
    };
    assert_eq!(s, s2);
    assert_eq!(c, x.c, "tconv input channels");
    let nhw = x.n * x.h * x.w;
    let oss = o * s * s;
    let mut tmp = vec![T::zero(); oss * nhw];
    matmul(oss, c, nhw, weight.data(), Op::T, &x.data, Op::N, &mut tmp, false);
    let (ho, wo) = (x.h * s, x.w * s);
    let mut out = Spatial::zeros(o, x.n, ho, wo);
    for oc in 0..o {
        let b = bias.data()[oc];
        for dy in 0..s {
            for dx in 0..s {
                let row = &tmp[((oc * s + dy) * s + dx) * nhw..((oc * s + dy) * s + dx + 1) * nhw];
                for n in 0..x.n {
                    let dst = &mut out.data[(oc * x.n + n) * ho * wo..(oc * x.n + n + 1) * ho * wo];
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            dst[(y * s + dy) * wo + xx * s + dx] =
                                row[(n * x.h + y) * x.w + xx] + b;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn tconv_backward<T: Real>(
    x: &Spatial<T>,
    weight: &Tensor<T>,
    d_out: &Spatial<T>,
    need_input_grad: bool,
) -> (Vec<T>, Vec<T>, Option<Spatial<T>>) {
    let &[c, o, s, _] = weight.shape() else { unreachable!() };
    let nhw = x.n * x.h * x.w;
    let oss = o * s * s;
    let (ho, wo) = (d_out.h, d_out.w);
    let mut d_tmp = vec![T::zero(); oss * nhw];
    let mut d_b = vec![T::zero(); o];
    for oc in 0..o {
        for dy in 0..s {
            for dx in 0..s {
                let row = &mut d_tmp
                    [((oc * s + dy) * s + dx) * nhw..((oc * s + dy) * s + dx + 1) * nhw];
                for n in 0..x.n {
                    let src = &d_out.data[(oc * x.n + n) * ho * wo..(oc * x.n + n + 1) * ho * wo];
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            let g = src[(y * s + dy) * wo + xx * s + dx];
                            row[(n * x.h + y) * x.w + xx] = g;
                            d_b[oc] = d_b[oc] + g;
                        }
                    }
                }
            }
        }
    }
    let mut d_w = vec![T::zero(); c * oss];
    matmul(c, nhw, oss, &x.data, Op::N, &d_tmp, Op::T, &mut d_w, false);
    let d_x = need_input_grad.then(|| {
        let mut d = Spatial::zeros(c, x.n, x.h, x.w);
        matmul(c, oss, nhw, weight.data(), Op::N, &d_tmp, Op::N, &mut d.data, false);
        d
    });
    (d_w, d_b, d_x)
}

pub fn avgpool2_forward<T: Real>(x: &Spatial<T>) -> Spatial<T> {
    assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "pooling needs even spatial dims");
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut out = Spatial::zeros(x.c, x.n, ho, wo);
    let quarter = T::lit(0.25);
    for (src, dst) in x.data.chunks(x.h * x.w).zip(out.data.chunks_mut(ho * wo)) {
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * x.w + 2 * xx;
                dst[y * wo + xx] =
                    (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avgpool2_backward<T: Real>(d_out: &Spatial<T>) -> Spatial<T> {
    let (h, w) = (d_out.h * 2, d_out.w * 2);
    let mut d_x = Spatial::zeros(d_out.c, d_out.n, h, w);
    let quarter = T::lit(0.25);
    for (src, dst) in d_out.data.chunks(d_out.h * d_out.w).zip(d_x.data.chunks_mut(h * w)) {
        for y in 0..d_out.h {
            for xx in 0..d_out.w {
                let g = src[y * d_out.w + xx] * quarter;
                let i = 2 * y * w + 2 * xx;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    d_x
}

/// 2x2 max pooling. Returns the pooled map and the flat argmax of every window.
pub fn maxpool2_forward<T: Real>(x: &Spatial<T>) -> (Spatial<T>, Vec<u32>) {
    assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "pooling needs even spatial dims");
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut out = Spatial::zeros(x.c, x.n, ho, wo);
    let mut arg = vec![0u32; out.data.len()];
    let plane = x.h * x.w;
    for (p, (src, dst)) in x.data.chunks(plane).zip(out.data.chunks_mut(ho * wo)).enumerate() {
        for y in 0..ho {
            for xx in 0..wo {
                let base = 2 * y * x.w + 2 * xx;
                let mut best = base;
                for cand in [base + 1, base + x.w, base + x.w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[y * wo + xx] = src[best];
                arg[p * ho * wo + y * wo + xx] = (p * plane + best) as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(d_out: &Spatial<T>, argmax: &[u32]) -> Spatial<T> {
    let mut d_x = Spatial::zeros(d_out.c, d_out.n, d_out.h * 2, d_out.w * 2);
    for (&g, &i) in d_out.data.iter().zip(argmax) {
        d_x.data[i as usize] = d_x.data[i as usize] + g;
    }
    d_x
}

/// `[C, N, H, W]` to row-major `[N, C*H*W]` with per-instance `(c, y, x)` order.
pub fn flatten<T: Real>(x: &Spatial<T>) -> Vec<T> {
    let plane = x.h * x.w;
    let feat = x.c * plane;
    let mut out = vec![T::zero(); x.n * feat];
    for c in 0..x.c {
        for n in 0..x.n {
            let src = &x.data[(c * x.n + n) * plane..(c * x.n + n + 1) * plane];
            out[n * feat + c * plane..n * feat + (c + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

pub fn unflatten<T: Real>(d: &[T], shape: [usize; 4]) -> Spatial<T> {
    let [c_n, n_n, h, w] = shape;
    let plane = h * w;
    let feat = c_n * plane;
    let mut out = Spatial::zeros(c_n, n_n, h, w);
    for c in 0..c_n {
        for n in 0..n_n {
            out.data[(c * n_n + n) * plane..(c * n_n + n + 1) * plane]
                .copy_from_slice(&d[n * feat + c * plane..n * feat + (c + 1) * plane]);
        }
    }
    out
}

/// `y = x W^T + b` for `x: [N, In]`, `W: [Out, In]`.
pub fn linear_forward<T: Real>(x: &[T], n: usize, weight: &Tensor<T>, bias: &Tensor<T>) -> Vec<T> {
    let &[out_f, in_f] = weight.shape() else {
        panic!("linear weight must be rank 2, got {:?}", weight.shape());
    };
    let mut y = vec![T::zero(); n * out_f];
    matmul(n, in_f, out_f, x, Op::N, weight.data(), Op::T, &mut y, false);
    for row in y.chunks_mut(out_f) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    y
}

/// Returns `(d_weight, d_bias, d_input)`.
pub fn linear_backward<T: Real>(
    x: &[T],
    n: usize,
    weight: &Tensor<T>,
    d_y: &[T],
    need_input_grad: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let &[out_f, in_f] = weight.shape() else { unreachable!() };
    let mut d_w = vec![T::zero(); out_f * in_f];
    matmul(out_f, n, in_f, d_y, Op::T, x, Op::N, &mut d_w, false);
    let mut d_b = vec![T::zero(); out_f];
    for row in d_y.chunks(out_f) {
        for (acc, &g) in d_b.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    let d_x = need_input_grad.then(|| {
        let mut d = vec![T::zero(); n * in_f];
        matmul(n, out_f, in_f, d_y, Op::N, weight.data(), Op::N, &mut d, false);
        d
    });
    (d_w, d_b, d_x)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `tanh(x) = 1 - 2 / (exp(2x) + 1)`; several times faster than the libm
/// call and saturates cleanly to +-1.
#[inline]
pub fn tanh<T: Real>(x: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * x).exp() + T::one())
}

pub fn tanh_inplace<T: Real>(x: &mut [T]) {
    x.iter_mut().for_each(|v| *v = tanh(*v));
}

/// Backward through tanh given its output `y`.
pub fn tanh_backward<T: Real>(y: &[T], d_y: &mut [T]) {
    for (g, &o) in d_y.iter_mut().zip(y) {
        *g = *g * (T::one() - o * o);
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
}

pub fn relu_backward<T: Real>(y: &[T], d_y: &mut [T]) {
    for (g, &o) in d_y.iter_mut().zip(y) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_hand_computed_4x4() {
        // 1 channel 4x4 input 0..16, 2x2 kernel [[1,0],[0,-1]], bias 0.5.
        let x = Spatial { c: 1, n: 1, h: 4, w: 4, data: (0..16).map(f64::from).collect() };
        let w = t(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, -1.0]);
        let b = t(&[1], vec![0.5]);
        let (y, _) = conv2d_forward(&x, &w, &b, 0);
        assert_eq!((y.h, y.w), (3, 3));
        // y[i][j] = x[i][j] - x[i+1][j+1] + 0.5 = -5 + 0.5 everywhere.
        assert!(y.data.iter().all(|&v| (v + 4.5).abs() < 1e-12));
    }

    #[test]
    fn conv_padding_keeps_size_and_zero_fills() {
        let x = Spatial { c: 1, n: 1, h: 2, w: 2, data: vec![1.0, 2.0, 3.0, 4.0] };
        let w = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let b = t(&[1], vec![0.0]);
        let (y, _) = conv2d_forward(&x, &w, &b, 1);
        // With 3x3 all-ones kernel and padding 1 every output sees the full 2x2 input.
        assert_eq!(y.data, vec![10.0; 4]);
    }

    #[test]
    fn tconv_hand_computed() {
        // 1x1 input of value 2 into 1 channel, 2x2 kernel [1,2,3,4], bias 1.
        let x = Spatial { c: 1, n: 1, h: 1, w: 1, data: vec![2.0] };
        let w = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1], vec![1.0]);
        let y = tconv_forward(&x, &w, &b);
        assert_eq!(y.data, vec![3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn pools_hand_computed() {
        let x = Spatial { c: 1, n: 1, h: 2, w: 2, data: vec![1.0, 5.0, -2.0, 4.0] };
        assert_eq!(avgpool2_forward(&x).data, vec![2.0]);
        let (m, arg) = maxpool2_forward(&x);
        assert_eq!(m.data, vec![5.0]);
        assert_eq!(arg, vec![1]);
        let d = maxpool2_backward(&Spatial { c: 1, n: 1, h: 1, w: 1, data: vec![3.0] }, &arg);
        assert_eq!(d.data, vec![0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn flatten_roundtrip() {
        let x = Spatial { c: 2, n: 3, h: 2, w: 2, data: (0..24).map(f64::from).collect() };
        let f = flatten(&x);
        // instance 1, channel 1, pixel 0 lives at (c=1,n=1) plane start = (1*3+1)*4.
        assert_eq!(f[8 + 4], 16.0);
        assert_eq!(unflatten(&f, x.shape()), x);
    }

    #[test]
    fn linear_hand_computed() {
        let w = t(&[2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.0]);
        let b = t(&[2], vec![0.5, -0.5]);
        let y = linear_forward(&[1.0, 2.0, 3.0], 1, &w, &b);
        assert_eq!(y, vec![-1.5, 3.5]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
