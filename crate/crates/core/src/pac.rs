//! Pixel-adaptive convolution: a shared learned kernel `W` modulated per pixel
//! by a Gaussian of adapting-feature differences,
//! `y_i = Σ_j exp(-½|f_i - f_j|²)·W[j - i]·x_j + b`.
//!
//! Taps use the same indexing as [`conv2d`](crate::tensor::conv2d), so with a
//! constant adapting field the operator reduces to a dilated convolution.

use rayon::prelude::*;

use crate::cost_volume::{CostVolume, VolumeKind};
use crate::error::{Error, Result};
use crate::tensor::{neighbor, Real, Tensor, WindowSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct PacParams<T> {
    /// `C_y×C_x×s×s`
    pub weight: Tensor<T>,
    /// `C_y`
    pub bias: Tensor<T>,
}

impl<T: Real> PacParams<T> {
    /// Identity filter: centre tap 1 on the channel diagonal.
    pub fn delta(channels: usize, win: WindowSpec) -> Self {
        let s = win.size();
        let c = win.center_tap();
        PacParams {
            weight: Tensor::from_fn(vec![channels, channels, s, s], |i| {
                let t = i % (s * s);
                let ci = (i / (s * s)) % channels;
                let co = i / (s * s * channels);
                if t == c && ci == co { T::one() } else { T::zero() }
            }),
            bias: Tensor::zeros(vec![channels]),
        }
    }

    fn dims(&self, win: WindowSpec) -> Result<(usize, usize)> {
        let (cy, cx, s, s2) = self.weight.dims4()?;
        if s != win.size() || s2 != win.size() {
            return Err(Error::config(format!(
                "PAC kernel is {s}x{s2}, window is {}",
                win.size()
            )));
        }
        if self.bias.shape() != [cy] {
            return Err(Error::config("PAC bias length must equal output channels"));
        }
        Ok((cy, cx))
    }
}

pub fn pac_kernel<T: Real>(f_i: &[T], f_j: &[T]) -> T {
    let d2: T = f_i.iter().zip(f_j).map(|(&a, &b)| (a - b) * (a - b)).sum();
    (-T::lit(0.5) * d2).flushed_exp()
}

/// Adapting kernel per pixel and tap; zero on padded taps.
#[derive(Clone, Debug)]
pub struct PacField<T> {
    height: usize,
    width: usize,
    window: WindowSpec,
    k: Vec<T>,
}

impl<T: Real> PacField<T> {
    pub fn new(adapt: &Tensor<T>, window: WindowSpec) -> Result<Self> {
        let (c, h, w) = adapt.dims3()?;
        let plane = h * w;
        let offsets = window.offsets();
        let taps = offsets.len();
        let a = adapt.data();
        let mut k = vec![T::zero(); plane * taps];
        k.par_chunks_mut(taps).enumerate().for_each(|(i, dst)| {
            let (y, x) = (i / w, i % w);
            for (t, &(dy, dx)) in offsets.iter().enumerate() {
                if let Some(j) = neighbor(y, x, dy, dx, h, w) {
                    let mut d2 = T::zero();
                    for ch in 0..c {
                        let diff = a[ch * plane + i] - a[ch * plane + j];
                        d2 += diff * diff;
                    }
                    dst[t] = (-T::lit(0.5) * d2).flushed_exp();
                }
            }
        });
        Ok(PacField {
            height: h,
            width: w,
            window,
            k,
        })
    }

    pub fn value(&self, i: usize, t: usize) -> T {
        self.k[i * self.window.taps() + t]
    }

    /// Filters one `C_x×H×W` slice.
    pub fn apply(&self, x: &Tensor<T>, p: &PacParams<T>) -> Result<Tensor<T>> {
        let (cy, cx) = p.dims(self.window)?;
        let (c, h, w) = x.dims3()?;
        if c != cx || (h, w) != (self.height, self.width) {
            return Err(Error::config(format!(
                "PAC slice {:?} does not match kernel ({cx} channels) or adapting field {}x{}",
                x.shape(),
                self.height,
                self.width
            )));
        }
        let plane = h * w;
        let offsets = self.window.offsets();
        let taps = offsets.len();
        let (src, wt, b) = (x.data(), p.weight.data(), p.bias.data());
        let mut out = vec![T::zero(); cy * plane];
        out.par_chunks_mut(plane).enumerate().for_each(|(o, dst)| {
            dst.fill(b[o]);
            for ic in 0..cx {
                let xp = &src[ic * plane..(ic + 1) * plane];
                for (t, &(dy, dx)) in offsets.iter().enumerate() {
                    let wv = wt[(o * cx + ic) * taps + t];
                    for y in 0..h {
                        for xx in 0..w {
                            let i = y * w + xx;
                            if let Some(j) = neighbor(y, xx, dy, dx, h, w) {
                                dst[i] += (self.k[i * taps + t] * wv) * xp[j];
                            }
                        }
                    }
                }
            }
        });
        Tensor::new(vec![cy, h, w], out)
    }
}

pub fn pac_filter<T: Real>(slice: &Tensor<T>, adapt: &Tensor<T>, p: &PacParams<T>, win: WindowSpec) -> Result<Tensor<T>> {
    let field = PacField::new(adapt, win)?;
    field.apply(slice, p)
}

#[derive(Clone, Debug)]
pub struct PacGrads<T> {
    pub slice: Tensor<T>,
    pub adapt: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Accumulates weight/bias/kernel-field gradients of one slice; returns the
/// slice gradient.
fn slice_backward<T: Real>(
    field: &PacField<T>,
    x: &Tensor<T>,
    p: &PacParams<T>,
    g: &Tensor<T>,
    gk: &mut [T],
    gw: &mut [T],
    gb: &mut [T],
) -> Result<Tensor<T>> {
    let (cy, cx) = p.dims(field.window)?;
    let (_, h, w) = x.dims3()?;
    if g.shape() != [cy, h, w] {
        return Err(Error::config("pac_vjp: upstream shape mismatch"));
    }
    let plane = h * w;
    let offsets = field.window.offsets();
    let taps = offsets.len();
    let (src, wt, gd) = (x.data(), p.weight.data(), g.data());

    for o in 0..cy {
        gb[o] += gd[o * plane..(o + 1) * plane].iter().copied().sum();
    }

    let mut gx = vec![T::zero(); cx * plane];
    gx.par_chunks_mut(plane).enumerate().for_each(|(ic, dst)| {
        for o in 0..cy {
            let gp = &gd[o * plane..(o + 1) * plane];
            for (t, &(dy, dx)) in offsets.iter().enumerate() {
                let wv = wt[(o * cx + ic) * taps + t];
                for y in 0..h {
                    for xx in 0..w {
                        let i = y * w + xx;
                        if let Some(j) = neighbor(y, xx, dy, dx, h, w) {
                            dst[j] += gp[i] * field.k[i * taps + t] * wv;
                        }
                    }
                }
            }
        }
    });

    // weight gradient, parallel over (o, ic) blocks
    gw.par_chunks_mut(taps).enumerate().for_each(|(oc, dst)| {
        let (o, ic) = (oc / cx, oc % cx);
        let gp = &gd[o * plane..(o + 1) * plane];
        let xp = &src[ic * plane..(ic + 1) * plane];
        for (t, &(dy, dx)) in offsets.iter().enumerate() {
            let mut acc = T::zero();
            for y in 0..h {
                for xx in 0..w {
                    let i = y * w + xx;
                    if let Some(j) = neighbor(y, xx, dy, dx, h, w) {
                        acc += gp[i] * field.k[i * taps + t] * xp[j];
                    }
                }
            }
            dst[t] += acc;
        }
    });

    gk.par_chunks_mut(taps).enumerate().for_each(|(i, dst)| {
        let (y, xx) = (i / w, i % w);
        for (t, &(dy, dx)) in offsets.iter().enumerate() {
            let Some(j) = neighbor(y, xx, dy, dx, h, w) else { continue };
            let mut acc = T::zero();
            for o in 0..cy {
                let go = gd[o * plane + i];
                for ic in 0..cx {
                    acc += go * wt[(o * cx + ic) * taps + t] * src[ic * plane + j];
                }
            }
            dst[t] += acc;
        }
    });

    Tensor::new(x.shape().to_vec(), gx)
}

/// Pushes a kernel-field gradient through `K = exp(-½|f_i - f_j|²)`.
fn field_backward<T: Real>(field: &PacField<T>, adapt: &Tensor<T>, gk: &[T]) -> Result<Tensor<T>> {
    let (c, h, w) = adapt.dims3()?;
    let plane = h * w;
    let offsets = field.window.offsets();
    let taps = offsets.len();
    let a = adapt.data();
    let mut ga = vec![T::zero(); c * plane];
    ga.par_chunks_mut(plane).enumerate().for_each(|(ch, dst)| {
        let ap = &a[ch * plane..(ch + 1) * plane];
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                for (t, &(dy, dx)) in offsets.iter().enumerate() {
                    let Some(j) = neighbor(y, xx, dy, dx, h, w) else { continue };
                    if j == i {
                        continue;
                    }
                    let q = gk[i * taps + t] * field.k[i * taps + t];
                    let diff = ap[i] - ap[j];
                    dst[i] -= q * diff;
                    dst[j] += q * diff;
                }
            }
        }
    });
    Tensor::new(adapt.shape().to_vec(), ga)
}

pub fn pac_vjp<T: Real>(
    slice: &Tensor<T>,
    adapt: &Tensor<T>,
    p: &PacParams<T>,
    win: WindowSpec,
    upstream: &Tensor<T>,
) -> Result<PacGrads<T>> {
    let field = PacField::new(adapt, win)?;
    let plane = adapt.shape()[1] * adapt.shape()[2];
    let mut gk = vec![T::zero(); plane * win.taps()];
    let mut gw = vec![T::zero(); p.weight.len()];
    let mut gb = vec![T::zero(); p.bias.len()];
    let gs = slice_backward(&field, slice, p, upstream, &mut gk, &mut gw, &mut gb)?;
    Ok(PacGrads {
        slice: gs,
        adapt: field_backward(&field, adapt, &gk)?,
        weight: Tensor::new(p.weight.shape().to_vec(), gw)?,
        bias: Tensor::new(p.bias.shape().to_vec(), gb)?,
    })
}

fn slice_shape<T: Real>(cv: &CostVolume<T>) -> (usize, usize, usize, usize) {
    let (d, h, w) = cv.dims();
    (cv.channels(), d, h, w)
}

fn gather_slice<T: Real>(data: &[T], c: usize, d: usize, k: usize, plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let base = (ch * d + k) * plane;
        out.extend_from_slice(&data[base..base + plane]);
    }
    out
}

fn scatter_slice<T: Real>(dst: &mut [T], src: &[T], c: usize, d: usize, k: usize, plane: usize) {
    for ch in 0..c {
        let base = (ch * d + k) * plane;
        dst[base..base + plane].copy_from_slice(&src[ch * plane..(ch + 1) * plane]);
    }
}

/// Filters every disparity slice with one shared adapting field. Output
/// channels per entry equal `C_y`.
pub fn pac_filter_volume<T: Real>(cv: &CostVolume<T>, adapt: &Tensor<T>, p: &PacParams<T>, win: WindowSpec) -> Result<CostVolume<T>> {
    let field = PacField::new(adapt, win)?;
    let (c, d, h, w) = slice_shape(cv);
    let plane = h * w;
    let cy = p.weight.shape()[0];
    let mut out = vec![T::zero(); cy * d * plane];
    for k in 0..d {
        let s = Tensor::new(vec![c, h, w], gather_slice(cv.data().data(), c, d, k, plane))?;
        let y = field.apply(&s, p)?;
        scatter_slice(&mut out, y.data(), cy, d, k, plane);
    }
    match cv.kind() {
        VolumeKind::Correlation3d if cy == 1 => CostVolume::correlation(Tensor::new(vec![d, h, w], out)?),
        _ => CostVolume::concat(Tensor::new(vec![cy, d, h, w], out)?),
    }
}

/// Gradients of [`pac_filter_volume`]; `slice` in the result holds the
/// gradient of the whole volume data.
pub fn pac_volume_vjp<T: Real>(
    cv: &CostVolume<T>,
    adapt: &Tensor<T>,
    p: &PacParams<T>,
    win: WindowSpec,
    upstream: &Tensor<T>,
) -> Result<PacGrads<T>> {
    let field = PacField::new(adapt, win)?;
    let (c, d, h, w) = slice_shape(cv);
    let plane = h * w;
    let cy = p.weight.shape()[0];
    if upstream.len() != cy * d * plane {
        return Err(Error::config("pac_volume_vjp: upstream shape mismatch"));
    }
    let mut gk = vec![T::zero(); plane * win.taps()];
    let mut gw = vec![T::zero(); p.weight.len()];
    let mut gb = vec![T::zero(); p.bias.len()];
    let mut gcv = vec![T::zero(); cv.data().len()];
    for k in 0..d {
        let s = Tensor::new(vec![c, h, w], gather_slice(cv.data().data(), c, d, k, plane))?;
        let g = Tensor::new(vec![cy, h, w], gather_slice(upstream.data(), cy, d, k, plane))?;
        let gs = slice_backward(&field, &s, p, &g, &mut gk, &mut gw, &mut gb)?;
        scatter_slice(&mut gcv, gs.data(), c, d, k, plane);
    }
    Ok(PacGrads {
        slice: Tensor::new(cv.data().shape().to_vec(), gcv)?,
        adapt: field_backward(&field, adapt, &gk)?,
        weight: Tensor::new(p.weight.shape().to_vec(), gw)?,
        bias: Tensor::new(p.bias.shape().to_vec(), gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, Conv2dSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn kernel_values() {
        assert_eq!(pac_kernel(&[0.4f64, 1.0], &[0.4, 1.0]), 1.0);
        let k = pac_kernel(&[0.0f64, 0.0], &[1.0, 1.0]);
        assert!((k - (-1.0f64).exp()).abs() < 1e-15);
        assert!((k - 0.367879).abs() < 1e-6);
        assert!(pac_kernel(&[0.0f64], &[30.0]) < 1e-100);
    }

    #[test]
    fn constant_adapt_is_convolution() {
        for (s, r) in [(3, 1), (5, 2)] {
            let win = WindowSpec::new(s, r).unwrap();
            let x = rand_t(&[2, 6, 7], 1);
            let p = PacParams {
                weight: rand_t(&[3, 2, s, s], 2),
                bias: rand_t(&[3], 3),
            };
            let adapt = Tensor::full(vec![4, 6, 7], 0.7f64);
            let y = pac_filter(&x, &adapt, &p, win).unwrap();
            let z = conv2d(&x, &p.weight, p.bias.data(), Conv2dSpec::same(s, r)).unwrap();
            assert!(y.max_abs_diff(&z).unwrap() < 1e-12);
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let win = WindowSpec::new(5, 2).unwrap();
        let x = rand_t(&[2, 6, 6], 4);
        let y = pac_filter(&x, &rand_t(&[3, 6, 6], 5), &PacParams::delta(2, win), win).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn constant_adapt_zero_adapt_grad() {
        let win = WindowSpec::new(3, 1).unwrap();
        let x = rand_t(&[2, 5, 6], 6);
        let p = PacParams {
            weight: rand_t(&[2, 2, 3, 3], 7),
            bias: rand_t(&[2], 8),
        };
        let adapt = Tensor::full(vec![3, 5, 6], -0.4f64);
        let g = pac_vjp(&x, &adapt, &p, win, &rand_t(&[2, 5, 6], 9)).unwrap();
        assert!(g.adapt.max_abs() < 1e-12);
        let z = pac_vjp(&x, &adapt, &p, win, &Tensor::zeros(vec![2, 5, 6])).unwrap();
        assert_eq!(z.slice.max_abs() + z.adapt.max_abs() + z.weight.max_abs() + z.bias.max_abs(), 0.0);
    }

    #[test]
    fn brute_force_taps() {
        let win = WindowSpec::new(3, 2).unwrap();
        let (h, w) = (6, 6);
        let x = rand_t(&[1, h, w], 10);
        let adapt = rand_t(&[2, h, w], 11);
        let p = PacParams {
            weight: rand_t(&[1, 1, 3, 3], 12),
            bias: Tensor::new(vec![1], vec![0.25]).unwrap(),
        };
        let y = pac_filter(&x, &adapt, &p, win).unwrap();
        let f = |c: usize, y: usize, x: usize| adapt.data()[(c * h + y) * w + x];
        for v in 0..h {
            for u in 0..w {
                let mut e = 0.25;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let yy = v as isize + 2 * (ky as isize - 1);
                        let xx = u as isize + 2 * (kx as isize - 1);
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        let k = pac_kernel(&[f(0, v, u), f(1, v, u)], &[f(0, yy, xx), f(1, yy, xx)]);
                        e += k * p.weight.data()[ky * 3 + kx] * x.data()[yy * w + xx];
                    }
                }
                assert!((y.data()[v * w + u] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extent_mismatch_rejected() {
        let win = WindowSpec::new(3, 1).unwrap();
        let p = PacParams::<f64>::delta(1, win);
        let r = pac_filter(&Tensor::zeros(vec![1, 4, 4]), &Tensor::zeros(vec![2, 4, 5]), &p, win);
        assert!(matches!(r, Err(Error::Config(_))));
        let r = pac_filter(&Tensor::zeros(vec![1, 4, 4]), &Tensor::zeros(vec![2, 4, 4]), &p, WindowSpec::new(5, 1).unwrap());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
