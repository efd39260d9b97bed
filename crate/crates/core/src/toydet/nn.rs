//! Minimal single-image convolution layers with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so the same network runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub trait Real:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// `C = alpha * op(A) * op(B) + beta * C`, all row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the asserts above bound every index the kernel touches
                // given these row/column strides.
                unsafe {
                    $gemm(
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Channel-major feature map of a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::ZERO; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// 2-D convolution with square kernel, zero padding `k / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out_c][in_c * k * k]`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// What the backward pass needs from a forward call.
pub struct ConvCache<T> {
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
    /// im2col matrix, or the input itself for 1x1 stride-1 kernels.
    cols: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    /// He-normal initialization, zero bias.
    pub fn new<R: Rng>(in_c: usize, out_c: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (in_c * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = (0..out_c * in_c * kernel * kernel)
            .map(|_| T::from_f64(std * standard_normal(rng)))
            .collect();
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            weight,
            bias: vec![T::ZERO; out_c],
        }
    }

    /// Small-std initialization for prediction layers.
    pub fn new_output<R: Rng>(in_c: usize, out_c: usize, kernel: usize, std: f64, bias: f64, rng: &mut R) -> Self {
        let weight = (0..out_c * in_c * kernel * kernel)
            .map(|_| T::from_f64(std * standard_normal(rng)))
            .collect();
        Self {
            in_c,
            out_c,
            kernel,
            stride: 1,
            weight,
            bias: vec![T::from_f64(bias); out_c],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![T::ZERO; self.weight.len()],
            bias: vec![T::ZERO; self.bias.len()],
            ..self.clone()
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let cols = if self.is_pointwise() {
            x.data.clone()
        } else {
            im2col(x, self.kernel, self.stride, oh, ow)
        };
        let n = oh * ow;
        let mut out = vec![T::ZERO; self.out_c * n];
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.fill(self.bias[o]);
        }
        let kk = self.in_c * self.kernel * self.kernel;
        T::gemm(self.out_c, kk, n, &self.weight, false, &cols, false, T::ONE, &mut out);
        (
            Tensor::from_vec(self.out_c, oh, ow, out),
            ConvCache {
                in_shape: (x.c, x.h, x.w),
                out_hw: (oh, ow),
                cols,
            },
        )
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, cache: &ConvCache<T>, dout: &Tensor<T>, grad: &mut Conv2d<T>) -> Tensor<T> {
        let (oh, ow) = cache.out_hw;
        let n = oh * ow;
        let kk = self.in_c * self.kernel * self.kernel;
        T::gemm(
            self.out_c,
            n,
            kk,
            &dout.data,
            false,
            &cache.cols,
            true,
            T::ONE,
            &mut grad.weight,
        );
        for (o, row) in dout.data.chunks(n).enumerate() {
            let mut s = T::ZERO;
            for &v in row {
                s += v;
            }
            grad.bias[o] += s;
        }
        let mut dcols = vec![T::ZERO; kk * n];
        T::gemm(
            kk,
            self.out_c,
            n,
            &self.weight,
            true,
            &dout.data,
            false,
            T::ZERO,
            &mut dcols,
        );
        let (c, h, w) = cache.in_shape;
        if self.is_pointwise() {
            Tensor::from_vec(c, h, w, dcols)
        } else {
            col2im(&dcols, c, h, w, self.kernel, self.stride, oh, ow)
        }
    }
}

fn im2col<T: Real>(x: &Tensor<T>, k: usize, stride: usize, oh: usize, ow: usize) -> Vec<T> {
    let pad = k / 2;
    let n = oh * ow;
    let mut cols = vec![T::ZERO; x.c * k * k * n];
    for c in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = (c * x.h + iy as usize) * x.w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < x.w as isize {
                            cols[dst + ox] = x.data[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    dcols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let pad = k / 2;
    let n = oh * ow;
    let mut dx = Tensor::zeros(c_in, h, w);
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (c * h + iy as usize) * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx.data[dst + ix as usize] += dcols[src + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn relu<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
}

/// Zeroes `grad` where the (post-activation) output was not positive.
pub fn relu_backward<T: Real>(activated: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= T::ZERO {
            *g = T::ZERO;
        }
    }
}

pub fn add_into<T: Real>(acc: &mut Tensor<T>, other: &Tensor<T>) {
    for (a, &b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
}

/// Box-Muller standard normal.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn conv_naive(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let pad = (conv.kernel / 2) as isize;
        let oh = (x.h + 2 * pad as usize - conv.kernel) / conv.stride + 1;
        let ow = (x.w + 2 * pad as usize - conv.kernel) / conv.stride + 1;
        let mut out = Tensor::zeros(conv.out_c, oh, ow);
        for o in 0..conv.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = conv.bias[o];
                    for c in 0..conv.in_c {
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride + ky) as isize - pad;
                                let ix = (ox * conv.stride + kx) as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    let wi = ((o * conv.in_c + c) * conv.kernel + ky) * conv.kernel + kx;
                                    s += conv.weight[wi] * x.at(c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.data[(o * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1), (1, 2)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, s, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor(&mut rng, 3, 7, 6);
            let (y, _) = conv.forward(&x);
            let want = conv_naive(&conv, &x);
            assert_eq!((y.c, y.h, y.w), (want.c, want.h, want.w));
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let conv = Conv2d::<f64>::new(2, 3, k, s, &mut rng);
            let x = random_tensor(&mut rng, 2, 5, 5);
            let (y, cache) = conv.forward(&x);
            // L = sum(r * y) for a fixed random r.
            let r = random_tensor(&mut rng, y.c, y.h, y.w);
            let mut grad = conv.zeros_like();
            let dx = conv.backward(&cache, &r, &mut grad);
            let loss = |conv: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
                conv.forward(x).0.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            for i in [0, 3, x.data.len() - 1] {
                let mut xp = x.clone();
                xp.data[i] += h;
                let mut xm = x.clone();
                xm.data[i] -= h;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
                assert!((fd - dx.data[i]).abs() < 1e-7, "dx[{i}] {fd} vs {}", dx.data[i]);
            }
            for i in [0, 5, conv.weight.len() - 1] {
                let mut cp = conv.clone();
                cp.weight[i] += h;
                let mut cm = conv.clone();
                cm.weight[i] -= h;
                let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
                assert!((fd - grad.weight[i]).abs() < 1e-7);
            }
            let mut cp = conv.clone();
            cp.bias[1] += h;
            let mut cm = conv.clone();
            cm.bias[1] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - grad.bias[1]).abs() < 1e-7);
        }
    }

    #[test]
    fn f32_and_f64_gemm_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0];
        let mut c64 = [0.0f64; 4];
        f64::gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c64);
        assert_eq!(c64, [-1.0, 7.5, -1.0, 18.0]);
        let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let mut c32 = [0.0f32; 4];
        f32::gemm(2, 3, 2, &a32, false, &b32, false, 0.0, &mut c32);
        assert_eq!(c32, [-1.0, 7.5, -1.0, 18.0]);
        // Transposed A: A^T is 3x2 here read as [[1,4],[2,5],[3,6]].
        let mut ct = [0.0f64; 4];
        f64::gemm(2, 3, 2, &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0], true, &b, false, 0.0, &mut ct);
        assert_eq!(ct, [-1.0, 7.5, -1.0, 18.0]);
    }
}
