//! Disparity regression, training loss and upsampling.

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn fiber_probs<T: Real>(c: &[T], plane: usize, i: usize, d: usize, out: &mut [T]) {
    let m = (0..d).fold(T::neg_infinity(), |m, k| m.max(-c[k * plane + i]));
    let mut z = T::zero();
    for k in 0..d {
        let e = (-c[k * plane + i] - m).flushed_exp();
        out[k] = e;
        z += e;
    }
    for p in out.iter_mut() {
        *p /= z;
    }
}

/// Expected disparity under `softmax(-cost)` along `d`; every pixel valid.
pub fn soft_argmin<T: Real>(cv: &Tensor<T>) -> Result<DisparityMap<T>> {
    let (d, h, w) = cv.dims3()?;
    if d == 0 {
        return Err(Error::config("soft_argmin needs at least one disparity"));
    }
    let plane = h * w;
    let c = cv.data();
    let mut p = vec![T::zero(); d];
    let values = (0..plane)
        .map(|i| {
            fiber_probs(c, plane, i, d, &mut p);
            p.iter().enumerate().map(|(k, &pk)| T::lit(k as f64) * pk).sum()
        })
        .collect();
    DisparityMap::dense(w, h, values)
}

/// `∂D/∂c_k = -p_k (k - D)` contracted with a per-pixel upstream gradient.
pub fn soft_argmin_vjp<T: Real>(cv: &Tensor<T>, upstream: &[T]) -> Result<Tensor<T>> {
    let (d, h, w) = cv.dims3()?;
    let plane = h * w;
    if upstream.len() != plane {
        return Err(Error::config("soft_argmin_vjp: upstream must have one value per pixel"));
    }
    let c = cv.data();
    let mut p = vec![T::zero(); d];
    let mut g = vec![T::zero(); c.len()];
    for i in 0..plane {
        fiber_probs(c, plane, i, d, &mut p);
        let mean: T = p.iter().enumerate().map(|(k, &pk)| T::lit(k as f64) * pk).sum();
        for k in 0..d {
            g[k * plane + i] = -upstream[i] * p[k] * (T::lit(k as f64) - mean);
        }
    }
    Tensor::new(cv.shape().to_vec(), g)
}

fn smooth_l1_term<T: Real>(x: T) -> (T, T) {
    let a = x.abs();
    if a < T::one() {
        (T::lit(0.5) * x * x, x)
    } else {
        (a - T::lit(0.5), x.signum())
    }
}

/// Mean smooth-L1 over pixels valid in `gt`, with its gradient on `pred`.
pub fn smooth_l1_grad<T: Real>(pred: &DisparityMap<T>, gt: &DisparityMap<T>) -> Result<(T, Vec<T>)> {
    if !pred.same_dims(gt) {
        return Err(Error::config("smooth_l1: prediction and ground truth differ in size"));
    }
    let n = gt.valid_count();
    if n == 0 {
        return Err(Error::domain("smooth_l1: no valid ground-truth pixels"));
    }
    let inv = T::one() / T::lit(n as f64);
    let mut sum = T::zero();
    let mut grad = vec![T::zero(); pred.values().len()];
    for (i, (&p, &g)) in pred.values().iter().zip(gt.values()).enumerate() {
        if gt.valid()[i] {
            let (l, dl) = smooth_l1_term(p - g);
            sum += l;
            grad[i] = dl * inv;
        }
    }
    Ok((sum * inv, grad))
}

pub fn smooth_l1<T: Real>(pred: &DisparityMap<T>, gt: &DisparityMap<T>) -> Result<T> {
    Ok(smooth_l1_grad(pred, gt)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    coeffs: Vec<f64>,
}

impl LossWeights {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        if !coeffs.iter().any(|&c| c > 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        Ok(LossWeights { coeffs })
    }

    pub fn single() -> Self {
        LossWeights { coeffs: vec![1.0] }
    }

    pub fn psmnet() -> Self {
        LossWeights { coeffs: vec![0.5, 0.7, 1.0] }
    }

    pub fn ganet() -> Self {
        LossWeights { coeffs: vec![0.2, 0.6, 1.0] }
    }

    pub fn dispnetc() -> Self {
        LossWeights {
            coeffs: vec![0.05, 0.10, 0.14, 0.19, 0.24, 0.29],
        }
    }

    /// Main disparity loss plus the segmentation embedding loss.
    pub fn with_embedding() -> Self {
        LossWeights { coeffs: vec![1.0, 0.06] }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightMode {
    #[default]
    SumNormalized,
    Plain,
}

pub fn weighted_loss<T: Real>(losses: &[T], w: &LossWeights, mode: WeightMode) -> Result<T> {
    if losses.len() != w.coeffs.len() {
        return Err(Error::config(format!(
            "{} losses but {} weights",
            losses.len(),
            w.coeffs.len()
        )));
    }
    let total: T = losses.iter().zip(&w.coeffs).map(|(&l, &c)| T::lit(c) * l).sum();
    Ok(match mode {
        WeightMode::Plain => total,
        WeightMode::SumNormalized => total / T::lit(w.coeffs.iter().sum()),
    })
}

/// Source sample for output coordinate `x` (half-pixel centres, clamped).
fn source(x: usize, k: usize, n: usize) -> (usize, usize, f64) {
    let s = ((x as f64 + 0.5) / k as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear `k×` upsampling; values are multiplied by `k`, validity is
/// taken from the nearest source pixel.
pub fn upsample_disparity<T: Real>(map: &DisparityMap<T>, k: usize) -> Result<DisparityMap<T>> {
    if k == 0 {
        return Err(Error::config("upsampling factor must be at least 1"));
    }
    if k == 1 {
        return Ok(map.clone());
    }
    let (w, h) = (map.width(), map.height());
    let (ow, oh) = (w * k, h * k);
    let src = map.values();
    let scale = T::lit(k as f64);
    let xs: Vec<_> = (0..ow).map(|x| source(x, k, w)).collect();
    let mut values = Vec::with_capacity(ow * oh);
    let mut valid = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let (y0, y1, fy) = source(y, k, h);
        let fy = T::lit(fy);
        for &(x0, x1, fx) in &xs {
            let fx = T::lit(fx);
            let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
            values.push(scale * (top * (T::one() - fy) + bot * fy));
        }
        for x in 0..ow {
            valid.push(map.valid()[(y / k) * w + x / k]);
        }
    }
    DisparityMap::new(ow, oh, values, valid)
}

/// Gradient of [`upsample_disparity`] with respect to the source values.
pub fn upsample_vjp<T: Real>(width: usize, height: usize, k: usize, upstream: &[T]) -> Result<Vec<T>> {
    let (ow, oh) = (width * k, height * k);
    if upstream.len() != ow * oh || k == 0 {
        return Err(Error::config("upsample_vjp: upstream size mismatch"));
    }
    if k == 1 {
        return Ok(upstream.to_vec());
    }
    let scale = T::lit(k as f64);
    let mut g = vec![T::zero(); width * height];
    let xs: Vec<_> = (0..ow).map(|x| source(x, k, width)).collect();
    for y in 0..oh {
        let (y0, y1, fy) = source(y, k, height);
        let fy = T::lit(fy);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let fx = T::lit(fx);
            let u = scale * upstream[y * ow + x];
            g[y0 * width + x0] += u * (T::one() - fy) * (T::one() - fx);
            g[y0 * width + x1] += u * (T::one() - fy) * fx;
            g[y1 * width + x0] += u * fy * (T::one() - fx);
            g[y1 * width + x1] += u * fy * fx;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fiber(c: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![c.len(), 1, 1], c.to_vec()).unwrap()
    }

    #[test]
    fn soft_argmin_examples() {
        assert!((soft_argmin(&fiber(&[2.0, 2.0, 2.0])).unwrap().values()[0] - 1.0).abs() < 1e-15);
        let v = soft_argmin(&fiber(&[-10.0, 0.0, 0.0])).unwrap().values()[0];
        let e = (-10.0f64).exp();
        assert!((v - 3.0 * e / (1.0 + 2.0 * e)).abs() < 1e-18);
        assert!((v - 1.362e-4).abs() < 1e-7);
        let one = soft_argmin(&Tensor::<f64>::full(vec![1, 2, 3], 5.0)).unwrap();
        assert!(one.values().iter().all(|&v| v == 0.0) && one.valid_count() == 6);
    }

    #[test]
    fn soft_argmin_vjp_uniform_sums_to_zero() {
        let g = soft_argmin_vjp(&fiber(&[0.3, 0.3, 0.3, 0.3]), &[1.7]).unwrap();
        assert!(g.data().iter().sum::<f64>().abs() < 1e-15);
        let z = soft_argmin_vjp(&fiber(&[0.1, -2.0, 0.5]), &[0.0]).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn smooth_l1_examples() {
        let gt = DisparityMap::dense(2, 1, vec![1.0f64, 1.0]).unwrap();
        let d = |a: f64, b: f64| DisparityMap::dense(2, 1, vec![a, b]).unwrap();
        assert_eq!(smooth_l1(&d(1.5, 0.5), &gt).unwrap(), 0.125);
        assert_eq!(smooth_l1(&d(4.0, -2.0), &gt).unwrap(), 2.5);
        assert_eq!(smooth_l1(&d(1.5, 4.0), &gt).unwrap(), 1.3125);
        let (_, g) = smooth_l1_grad(&d(1.5, 4.0), &gt).unwrap();
        assert_eq!(g, vec![0.25, 0.5]);
        let none = DisparityMap::new(2, 1, vec![0.0, 0.0], vec![false, false]).unwrap();
        assert!(matches!(smooth_l1(&d(0.0, 0.0), &none), Err(Error::Domain(_))));
    }

    #[test]
    fn smooth_l1_kink_is_c1() {
        let below = smooth_l1_term(1.0f64 - 1e-12);
        let above = smooth_l1_term(1.0f64);
        assert!((below.0 - above.0).abs() < 1e-11);
        assert!((below.1 - above.1).abs() < 1e-11);
    }

    #[test]
    fn weighted_loss_examples() {
        let m = WeightMode::SumNormalized;
        assert_eq!(weighted_loss(&[0.7f64], &LossWeights::single(), m).unwrap(), 0.7);
        assert!((weighted_loss(&[1.0f64, 1.0, 1.0], &LossWeights::psmnet(), m).unwrap() - 1.0).abs() < 1e-15);
        let v = weighted_loss(&[2.0f64, 0.0, 0.0], &LossWeights::psmnet(), m).unwrap();
        assert!((v - 1.0 / 2.2).abs() < 1e-15);
        let plain = weighted_loss(&[2.0f64, 0.0, 0.0], &LossWeights::psmnet(), WeightMode::Plain).unwrap();
        assert_eq!(plain, 1.0);
        assert!(matches!(
            weighted_loss(&[1.0f64], &LossWeights::psmnet(), m),
            Err(Error::Config(_))
        ));
        assert!(LossWeights::new(vec![0.0, 0.0]).is_err());
        assert!(LossWeights::new(vec![-1.0, 1.0]).is_err());
    }

    #[test]
    fn upsample_constant_and_identity() {
        let m = DisparityMap::constant(3, 2, 1.25f64);
        let u = upsample_disparity(&m, 2).unwrap();
        assert_eq!((u.width(), u.height()), (6, 4));
        assert!(u.values().iter().all(|&v| v == 2.5));
        let r = DisparityMap::dense(2, 2, vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(upsample_disparity(&r, 1).unwrap(), r);
    }

    #[test]
    fn upsample_ramp_by_hand() {
        let r = DisparityMap::dense(2, 2, vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let u = upsample_disparity(&r, 2).unwrap();
        #[rustfmt::skip]
        let expect = [
            0.0, 0.5, 1.5, 2.0,
            1.0, 1.5, 2.5, 3.0,
            3.0, 3.5, 4.5, 5.0,
            4.0, 4.5, 5.5, 6.0,
        ];
        assert_eq!(u.values(), &expect);
    }

    #[test]
    fn upsample_validity_nearest() {
        let m = DisparityMap::new(2, 1, vec![1.0f64, 1.0], vec![true, false]).unwrap();
        let u = upsample_disparity(&m, 2).unwrap();
        assert_eq!(u.valid(), &[true, true, false, false, true, true, false, false]);
    }

    #[test]
    fn upsample_adjoint() {
        let (w, h, k) = (3, 2, 2);
        let a: Vec<f64> = (0..w * h).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..w * h * k * k).map(|i| (i as f64 * 0.3).cos()).collect();
        let up = upsample_disparity(&DisparityMap::dense(w, h, a.clone()).unwrap(), k).unwrap();
        let lhs: f64 = up.values().iter().zip(&b).map(|(x, y)| x * y).sum();
        let g = upsample_vjp(w, h, k, &b).unwrap();
        let rhs: f64 = a.iter().zip(&g).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
