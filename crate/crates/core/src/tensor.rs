//! Dense row-major tensors and the shared numeric kernels: 2D convolution,
//! softmax along an axis, and dilated window gathers.
//!
//! Everything here is channels-first. Feature maps are `C×H×W`, 3D cost
//! volumes `D×H×W` and 4D cost volumes `C×D×H×W`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Scalar type the kernels are generic over. Production code runs in `f32`,
/// gradient checks in `f64`.
pub trait Real:
    Float + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `2·ln(epsilon)`: below this exponent `exp` is negligible at working
    /// precision.
    fn exp_floor() -> Self;

    /// `exp(self)`, or zero below [`Real::exp_floor`]. Keeps subnormals out
    /// of downstream products.
    #[inline]
    fn flushed_exp(self) -> Self {
        if self < Self::exp_floor() { Self::zero() } else { self.exp() }
    }

    /// Row-major `C = A·B + beta·C` with `A` `m×k` and `B` `k×n`; `ta`/`tb`
    /// mean the operand is stored transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]);
}

/// Element strides `(row, col)` of a row-major operand, possibly transposed.
fn gemm_strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed { (1, rows as isize) } else { (cols as isize, 1) }
}

macro_rules! gemm_impl {
    ($t:ty, $f:path) => {
        fn gemm(m: usize, k: usize, n: usize, a: &[$t], ta: bool, b: &[$t], tb: bool, beta: $t, c: &mut [$t]) {
            assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
            let (rsa, csa) = gemm_strides(m, k, ta);
            let (rsb, csb) = gemm_strides(k, n, tb);
            // SAFETY: the asserted lengths cover every index the strides reach.
            unsafe {
                $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
            }
        }
    };
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp_floor() -> Self {
        -31.88
    }
    gemm_impl!(f32, matrixmultiply::sgemm);
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp_floor() -> Self {
        -72.09
    }
    gemm_impl!(f64, matrixmultiply::dgemm);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::config(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Builds a tensor from a function of the flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::config(format!(
                "expected a rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// `(C, D, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [c, d, h, w] => Ok((c, d, h, w)),
            _ => Err(Error::config(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|x| x * a)
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &a| m.max(a.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::config(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Odd window side `size` with tap spacing `dilation`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    size: usize,
    dilation: usize,
}

impl WindowSpec {
    pub fn new(size: usize, dilation: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::config(format!("window size must be odd, got {size}")));
        }
        if dilation == 0 {
            return Err(Error::config("window dilation must be positive"));
        }
        Ok(WindowSpec { size, dilation })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn taps(&self) -> usize {
        self.size * self.size
    }

    /// Side length covered in pixels, `(s - 1)·r + 1`.
    pub fn extent(&self) -> usize {
        (self.size - 1) * self.dilation + 1
    }

    /// `(dy, dx)` of every tap in row-major order.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let half = (self.size / 2) as isize;
        let r = self.dilation as isize;
        let mut out = Vec::with_capacity(self.taps());
        for ky in -half..=half {
            for kx in -half..=half {
                out.push((ky * r, kx * r));
            }
        }
        out
    }

    /// Index of the centre tap in [`offsets`](Self::offsets).
    pub fn center_tap(&self) -> usize {
        self.taps() / 2
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            size: 5,
            dilation: 2,
        }
    }
}

/// Geometry of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    /// Stride-1 convolution whose output has the input's spatial extent.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            dilation,
            pad: dilation * (kernel - 1) / 2,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            dilation: 1,
            pad: 0,
        }
    }
}

struct ConvGeom {
    c_in: usize,
    c_out: usize,
    k: usize,
    h: usize,
    w: usize,
    h_out: usize,
    w_out: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn new<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, spec: Conv2dSpec) -> Result<Self> {
        let (c_in, h, w) = input.dims3()?;
        let (c_out, kc_in, k, k2) = kernel.dims4()?;
        if kc_in != c_in {
            return Err(Error::config(format!(
                "kernel expects {kc_in} input channels, input has {c_in}"
            )));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::config(format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::config("stride and dilation must be positive"));
        }
        let (h_out, w_out) = match (spec.output_len(h, k), spec.output_len(w, k)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::config(format!(
                    "{h}x{w} input too small for kernel {k} with {spec:?}"
                )))
            }
        };
        Ok(ConvGeom {
            c_in,
            c_out,
            k,
            h,
            w,
            h_out,
            w_out,
            spec,
        })
    }

    /// Input coordinate for output index `o` and kernel index `kk`, if in range.
    #[inline]
    fn src(&self, o: usize, kk: usize, len: usize) -> Option<usize> {
        let i = (o * self.spec.stride + kk * self.spec.dilation) as isize - self.spec.pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }

    /// Range of output columns whose tap `kx` lands inside the input row.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.spec.stride as isize;
        let shift = (kx * self.spec.dilation) as isize - self.spec.pad as isize;
        // need 0 <= ox*s + shift <= w-1
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi_num = self.w as isize - 1 - shift;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        let lo = lo.clamp(0, self.w_out as isize) as usize;
        let hi = hi.clamp(0, self.w_out as isize) as usize;
        (lo, hi.max(lo))
    }
}

impl ConvGeom {
    /// Unfolds the input into a `(C_in·k·k)×(H'·W')` patch matrix.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let kk = self.k * self.k;
        let plane = self.h_out * self.w_out;
        let mut cols = vec![T::zero(); self.c_in * kk * plane];
        cols.par_chunks_mut(plane).enumerate().for_each(|(r, dst)| {
            let (ic, t) = (r / kk, r % kk);
            let (ky, kx) = (t / self.k, t % self.k);
            let src = &x[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            let (lo, hi) = self.valid_cols(kx);
            let shift = (kx * self.spec.dilation) as isize - self.spec.pad as isize;
            for oy in 0..self.h_out {
                let Some(iy) = self.src(oy, ky, self.h) else { continue };
                let row = &src[iy * self.w..(iy + 1) * self.w];
                let drow = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                if self.spec.stride == 1 {
                    let start = (lo as isize + shift) as usize;
                    drow[lo..hi].copy_from_slice(&row[start..start + hi - lo]);
                } else {
                    for ox in lo..hi {
                        drow[ox] = row[(ox as isize * self.spec.stride as isize + shift) as usize];
                    }
                }
            }
        });
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds patches back to the image.
    fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let kk = self.k * self.k;
        let plane = self.h_out * self.w_out;
        let in_plane = self.h * self.w;
        let mut out = vec![T::zero(); self.c_in * in_plane];
        out.par_chunks_mut(in_plane).enumerate().for_each(|(ic, dst)| {
            for t in 0..kk {
                let (ky, kx) = (t / self.k, t % self.k);
                let src = &cols[(ic * kk + t) * plane..(ic * kk + t + 1) * plane];
                let (lo, hi) = self.valid_cols(kx);
                let shift = (kx * self.spec.dilation) as isize - self.spec.pad as isize;
                for oy in 0..self.h_out {
                    let Some(iy) = self.src(oy, ky, self.h) else { continue };
                    let srow = &src[oy * self.w_out..(oy + 1) * self.w_out];
                    let drow = &mut dst[iy * self.w..(iy + 1) * self.w];
                    if self.spec.stride == 1 {
                        let start = (lo as isize + shift) as usize;
                        for (d, &v) in drow[start..start + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            drow[(ox as isize * self.spec.stride as isize + shift) as usize] += srow[ox];
                        }
                    }
                }
            }
        });
        out
    }
}

/// Cross-correlation of `input` (`C_in×H×W`) with `kernel` (`C_out×C_in×k×k`)
/// plus per-output-channel `bias`. Out-of-image taps read zero.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &[T],
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernel, spec)?;
    if bias.len() != g.c_out {
        return Err(Error::config(format!(
            "bias has {} entries for {} output channels",
            bias.len(),
            g.c_out
        )));
    }
    let plane = g.h_out * g.w_out;
    let r = g.c_in * g.k * g.k;
    let cols = g.im2col(input.data());
    let mut out: Vec<T> = bias.iter().flat_map(|&b| std::iter::repeat_n(b, plane)).collect();
    T::gemm(g.c_out, r, plane, kernel.data(), false, &cols, false, T::one(), &mut out);
    Tensor::new(vec![g.c_out, g.h_out, g.w_out], out)
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

/// Vector-Jacobian product of [`conv2d`] for the upstream gradient `upstream`
/// (`C_out×H'×W'`).
pub fn conv2d_vjp<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: Conv2dSpec,
    upstream: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeom::new(input, kernel, spec)?;
    if upstream.shape() != [g.c_out, g.h_out, g.w_out] {
        return Err(Error::config(format!(
            "upstream shape {:?} does not match conv output {:?}",
            upstream.shape(),
            [g.c_out, g.h_out, g.w_out]
        )));
    }
    let plane = g.h_out * g.w_out;
    let r = g.c_in * g.k * g.k;
    let up = upstream.data();
    let bias: Vec<T> = up.chunks(plane).map(|c| c.iter().copied().sum()).collect();

    let cols = g.im2col(input.data());
    let mut gk = vec![T::zero(); g.c_out * r];
    T::gemm(g.c_out, plane, r, up, false, &cols, true, T::zero(), &mut gk);

    let mut gcols = vec![T::zero(); r * plane];
    T::gemm(r, g.c_out, plane, kernel.data(), true, up, false, T::zero(), &mut gcols);
    let gi = g.col2im(&gcols);

    Ok(Conv2dGrads {
        input: Tensor::new(input.shape().to_vec(), gi)?,
        kernel: Tensor::new(kernel.shape().to_vec(), gk)?,
        bias,
    })
}

fn axis_strides(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::config(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let n = shape[axis];
    if n == 0 {
        return Err(Error::domain("softmax over an empty axis"));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, n, inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Real>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_strides(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let m = (0..n).fold(T::neg_infinity(), |m, k| m.max(x[base + k * inner]));
            let mut z = T::zero();
            for k in 0..n {
                let e = (x[base + k * inner] - m).flushed_exp();
                out[base + k * inner] = e;
                z += e;
            }
            for k in 0..n {
                out[base + k * inner] /= z;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Gradient of softmax given its *output* `y`: `y ⊙ (g − ⟨g, y⟩)` per slice.
pub fn softmax_vjp<T: Real>(output: &Tensor<T>, axis: usize, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != upstream.shape() {
        return Err(Error::config("softmax_vjp: upstream shape differs from output"));
    }
    let (outer, n, inner) = axis_strides(output.shape(), axis)?;
    let y = output.data();
    let g = upstream.data();
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: T = (0..n).map(|k| y[base + k * inner] * g[base + k * inner]).sum();
            for k in 0..n {
                let idx = base + k * inner;
                out[idx] = y[idx] * (g[idx] - dot);
            }
        }
    }
    Tensor::new(output.shape().to_vec(), out)
}



/// One tap returned by [`window_gather`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tap<T> {
    pub dy: isize,
    pub dx: isize,
    /// The tap fell outside the image; `value` is all zeros.
    pub padded: bool,
    pub value: Vec<T>,
}

/// Channel vectors of the `s×s` dilated window centred on column `u`, row `v`.
pub fn window_gather<T: Real>(
    input: &Tensor<T>,
    center: (usize, usize),
    win: WindowSpec,
) -> Result<Vec<Tap<T>>> {
    let (c, h, w) = input.dims3()?;
    let (u, v) = center;
    if u >= w || v >= h {
        return Err(Error::Index(format!("centre ({u},{v}) outside {w}x{h} image")));
    }
    let x = input.data();
    Ok(win
        .offsets()
        .into_iter()
        .map(|(dy, dx)| {
            let yy = v as isize + dy;
            let xx = u as isize + dx;
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                Tap {
                    dy,
                    dx,
                    padded: true,
                    value: vec![T::zero(); c],
                }
            } else {
                let p = yy as usize * w + xx as usize;
                Tap {
                    dy,
                    dx,
                    padded: false,
                    value: (0..c).map(|ch| x[ch * h * w + p]).collect(),
                }
            }
        })
        .collect())
}

/// In-image neighbour of pixel `p` (flat `y*w + x`) at offset `(dy, dx)`.
#[inline]
/// Ranges `(rows, cols)` of pixels whose `(dy, dx)` neighbour lies inside an
/// `h×w` image.
pub(crate) fn tap_span(dy: isize, dx: isize, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let span = |d: isize, n: usize| {
        let lo = (-d).clamp(0, n as isize) as usize;
        let hi = (n as isize - d).clamp(0, n as isize) as usize;
        lo..hi.max(lo)
    };
    (span(dy, h), span(dx, w))
}

/// Runs `f(i, j)` over every pixel `i` whose `(dy, dx)` neighbour `j` is
/// inside the image, one contiguous row segment at a time.
#[inline]
pub(crate) fn for_tap_rows(dy: isize, dx: isize, h: usize, w: usize, mut f: impl FnMut(std::ops::Range<usize>, usize)) {
    let (rows, cols) = tap_span(dy, dx, h, w);
    if cols.is_empty() {
        return;
    }
    for y in rows {
        let i0 = y * w + cols.start;
        let j0 = (i0 as isize + dy * w as isize + dx) as usize;
        f(i0..i0 + cols.len(), j0);
    }
}

pub(crate) fn neighbor(y: usize, x: usize, dy: isize, dx: isize, h: usize, w: usize) -> Option<usize> {
    let yy = y as isize + dy;
    let xx = x as isize + dx;
    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
        None
    } else {
        Some(yy as usize * w + xx as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flushed_exp_zeroes_only_negligible_tails() {
        assert_eq!(f32::exp_floor(), (2.0 * f32::EPSILON.ln() * 100.0).round() / 100.0);
        assert_eq!((2.0 * f64::EPSILON.ln() * 100.0).round() / 100.0, f64::exp_floor());
        assert_eq!((-1.0f64).flushed_exp(), (-1.0f64).exp());
        assert_eq!((-30.0f32).flushed_exp(), (-30.0f32).exp());
        assert_eq!((-32.0f32).flushed_exp(), 0.0);
        assert_eq!((-80.0f64).flushed_exp(), 0.0);
        assert!((-72.0f64).flushed_exp() > 0.0);
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    /// Six nested loops straight from the definition.
    fn conv_reference(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], s: Conv2dSpec) -> Tensor<f64> {
        let (ci, h, w) = x.dims3().unwrap();
        let (co, _, kk, _) = k.dims4().unwrap();
        let ho = (h + 2 * s.pad - s.dilation * (kk - 1) - 1) / s.stride + 1;
        let wo = (w + 2 * s.pad - s.dilation * (kk - 1) - 1) / s.stride + 1;
        let mut out = Tensor::zeros(vec![co, ho, wo]);
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let iy = (oy * s.stride + ky * s.dilation) as isize - s.pad as isize;
                                let ix = (ox * s.stride + kx * s.dilation) as isize - s.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += k.data()[((o * ci + c) * kk + ky) * kk + kx]
                                    * x.data()[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::full(vec![1, 3, 3], 1.0f32);
        let k = Tensor::full(vec![1, 1, 3, 3], 1.0f32);
        let y = conv2d(&x, &k, &[0.0], Conv2dSpec::same(3, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 4, 5], &mut rng);
        let k = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &k, &[0.0], Conv2dSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [
            Conv2dSpec::same(3, 1),
            Conv2dSpec { stride: 2, dilation: 1, pad: 1 },
            Conv2dSpec { stride: 1, dilation: 2, pad: 2 },
            Conv2dSpec { stride: 3, dilation: 2, pad: 0 },
        ] {
            let x = random(&[2, 5, 7], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let b = vec![0.1, -0.2, 0.3];
            let fast = conv2d(&x, &k, &b, spec).unwrap();
            let slow = conv_reference(&x, &k, &b, spec);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f32>::zeros(vec![2, 4, 4]);
        let k = Tensor::<f32>::zeros(vec![1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, &[0.0], Conv2dSpec::same(3, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_vjp_matches_adjoint_identity() {
        // <conv(x), g> must equal <x, vjp_x(g)> + <k, vjp_k(g)>/... by linearity in x.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = Conv2dSpec { stride: 2, dilation: 1, pad: 1 };
        let x = random(&[2, 6, 7], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let y = conv2d(&x, &k, &[0.0; 3], spec).unwrap();
        let g = random(y.shape(), &mut rng);
        let grads = conv2d_vjp(&x, &k, spec, &g).unwrap();
        let lhs = y.dot(&g).unwrap();
        assert!((lhs - x.dot(&grads.input).unwrap()).abs() < 1e-12);
        assert!((lhs - k.dot(&grads.kernel).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&Tensor::new(vec![3], vec![0.0f64, 0.0, 0.0]).unwrap(), 0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&Tensor::new(vec![3], vec![10.0f64, 0.0, 0.0]).unwrap(), 0).unwrap();
        let e = (-10.0f64).exp();
        let z = 1.0 + 2.0 * e;
        assert!((y.data()[0] - 1.0 / z).abs() < 1e-15);
        assert!((y.data()[0] - 0.99991).abs() < 1e-5);
        assert!((y.data()[1] - 4.54e-5).abs() < 1e-7);
        let y = softmax(&Tensor::new(vec![1], vec![-3.5f64]).unwrap(), 0).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn softmax_empty_axis() {
        let t = Tensor::<f64>::zeros(vec![2, 0]);
        assert!(matches!(softmax(&t, 1), Err(Error::Domain(_))));
        assert!(matches!(softmax(&t, 2), Err(Error::Config(_))));
    }

    #[test]
    fn window_single_tap() {
        let x = Tensor::from_fn(vec![2, 3, 3], |i| i as f64);
        let taps = window_gather(&x, (1, 2), WindowSpec::new(1, 1).unwrap()).unwrap();
        assert_eq!(taps.len(), 1);
        assert_eq!(taps[0].value, vec![7.0, 16.0]);
        assert!(!taps[0].padded);
    }

    #[test]
    fn window_constant_interior() {
        let x = Tensor::full(vec![1, 5, 5], 7.0f32);
        let taps = window_gather(&x, (2, 2), WindowSpec::new(3, 1).unwrap()).unwrap();
        assert_eq!(taps.len(), 9);
        assert!(taps.iter().all(|t| !t.padded && t.value == vec![7.0]));
    }

    #[test]
    fn window_dilated_corner() {
        // ramp value = 5*y + x
        let x = Tensor::from_fn(vec![1, 5, 5], |i| i as f64);
        let taps = window_gather(&x, (0, 0), WindowSpec::new(3, 2).unwrap()).unwrap();
        let padded = taps.iter().filter(|t| t.padded).count();
        assert_eq!(padded, 5);
        let vals: Vec<f64> = taps.iter().filter(|t| !t.padded).map(|t| t.value[0]).collect();
        assert_eq!(vals, vec![0.0, 2.0, 10.0, 12.0]);
        assert!(taps.iter().filter(|t| t.padded).all(|t| t.value == vec![0.0]));
    }

    #[test]
    fn window_rejects_even_size() {
        assert!(WindowSpec::new(4, 1).is_err());
        assert!(WindowSpec::new(3, 0).is_err());
        assert_eq!(WindowSpec::new(5, 2).unwrap().extent(), 9);
    }
}
