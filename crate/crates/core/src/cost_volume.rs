//! Correlation (`D×H×W`) and concatenation (`2F×D×H×W`) cost volumes.
//!
//! Candidate `d` at pixel `(u, v)` pairs the left feature at `(u, v)` with the
//! right feature at `(u - d, v)`. Candidates with `u - d < 0` read zero features.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    Correlation3d,
    Concat4d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume<T> {
    kind: VolumeKind,
    data: Tensor<T>,
}

impl<T: Real> CostVolume<T> {
    /// Wraps a `D×H×W` tensor.
    pub fn correlation(data: Tensor<T>) -> Result<Self> {
        data.dims3()?;
        Ok(CostVolume {
            kind: VolumeKind::Correlation3d,
            data,
        })
    }

    /// Wraps a `C×D×H×W` tensor.
    pub fn concat(data: Tensor<T>) -> Result<Self> {
        data.dims4()?;
        Ok(CostVolume {
            kind: VolumeKind::Concat4d,
            data,
        })
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<T> {
        self.data
    }

    /// Number of feature channels per entry (1 for correlation volumes).
    pub fn channels(&self) -> usize {
        match self.kind {
            VolumeKind::Correlation3d => 1,
            VolumeKind::Concat4d => self.data.shape()[0],
        }
    }

    /// `(D, H, W)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        match self.kind {
            VolumeKind::Correlation3d => (s[0], s[1], s[2]),
            VolumeKind::Concat4d => (s[1], s[2], s[3]),
        }
    }

    pub fn max_disp(&self) -> usize {
        self.dims().0
    }
}

fn check_pair<T: Real>(fl: &Tensor<T>, fr: &Tensor<T>, max_disp: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = fl.dims3()?;
    if fl.shape() != fr.shape() {
        return Err(Error::config(format!(
            "left features {:?} and right features {:?} differ in shape",
            fl.shape(),
            fr.shape()
        )));
    }
    if max_disp == 0 {
        return Err(Error::config("disparity range must be at least 1"));
    }
    if max_disp > w {
        return Err(Error::config(format!(
            "disparity range {max_disp} exceeds feature width {w}"
        )));
    }
    Ok((c, h, w))
}

/// `C[d,v,u] = Σ_c fL[c,v,u]·fR[c,v,u-d]`, optionally divided by `F`.
pub fn build_correlation<T: Real>(fl: &Tensor<T>, fr: &Tensor<T>, max_disp: usize, normalize: bool) -> Result<CostVolume<T>> {
    let (c, h, w) = check_pair(fl, fr, max_disp)?;
    let plane = h * w;
    let (l, r) = (fl.data(), fr.data());
    let norm = if normalize { T::lit(c as f64) } else { T::one() };
    let mut out = vec![T::zero(); max_disp * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(d, dst)| {
        for ch in 0..c {
            let lp = &l[ch * plane..(ch + 1) * plane];
            let rp = &r[ch * plane..(ch + 1) * plane];
            for y in 0..h {
                let row = y * w;
                for x in d..w {
                    dst[row + x] += lp[row + x] * rp[row + x - d];
                }
            }
        }
        if normalize {
            for v in dst.iter_mut() {
                *v /= norm;
            }
        }
    });
    CostVolume::correlation(Tensor::new(vec![max_disp, h, w], out)?)
}

/// Gradients of [`build_correlation`] w.r.t. both feature maps.
pub fn correlation_vjp<T: Real>(
    fl: &Tensor<T>,
    fr: &Tensor<T>,
    max_disp: usize,
    normalize: bool,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = check_pair(fl, fr, max_disp)?;
    if upstream.shape() != [max_disp, h, w] {
        return Err(Error::config("correlation_vjp: upstream shape mismatch"));
    }
    let plane = h * w;
    let norm = if normalize { T::one() / T::lit(c as f64) } else { T::one() };
    let (l, r, g) = (fl.data(), fr.data(), upstream.data());
    let mut gl = vec![T::zero(); c * plane];
    let mut gr = vec![T::zero(); c * plane];
    gl.par_chunks_mut(plane)
        .zip(gr.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(ch, (dl, dr))| {
            let lp = &l[ch * plane..(ch + 1) * plane];
            let rp = &r[ch * plane..(ch + 1) * plane];
            for d in 0..max_disp {
                let gp = &g[d * plane..(d + 1) * plane];
                for y in 0..h {
                    let row = y * w;
                    for x in d..w {
                        let gv = gp[row + x] * norm;
                        dl[row + x] += gv * rp[row + x - d];
                        dr[row + x - d] += gv * lp[row + x];
                    }
                }
            }
        });
    Ok((
        Tensor::new(fl.shape().to_vec(), gl)?,
        Tensor::new(fr.shape().to_vec(), gr)?,
    ))
}

/// Channels `0..F` hold `fL(u,v)`, channels `F..2F` hold `fR(u-d,v)`.
pub fn build_concat<T: Real>(fl: &Tensor<T>, fr: &Tensor<T>, max_disp: usize) -> Result<CostVolume<T>> {
    let (c, h, w) = check_pair(fl, fr, max_disp)?;
    let plane = h * w;
    let (l, r) = (fl.data(), fr.data());
    let mut out = vec![T::zero(); 2 * c * max_disp * plane];
    out.par_chunks_mut(max_disp * plane)
        .enumerate()
        .for_each(|(ch, dst)| {
            for d in 0..max_disp {
                let dp = &mut dst[d * plane..(d + 1) * plane];
                if ch < c {
                    dp.copy_from_slice(&l[ch * plane..(ch + 1) * plane]);
                } else {
                    let rp = &r[(ch - c) * plane..(ch - c + 1) * plane];
                    for y in 0..h {
                        for x in d..w {
                            dp[y * w + x] = rp[y * w + x - d];
                        }
                    }
                }
            }
        });
    CostVolume::concat(Tensor::new(vec![2 * c, max_disp, h, w], out)?)
}

/// Gradients of [`build_concat`] w.r.t. both feature maps.
pub fn concat_vjp<T: Real>(upstream: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c2, dmax, h, w) = upstream.dims4()?;
    if c2 % 2 != 0 {
        return Err(Error::config("concat volume must have an even channel count"));
    }
    let c = c2 / 2;
    let plane = h * w;
    let g = upstream.data();
    let mut gl = vec![T::zero(); c * plane];
    let mut gr = vec![T::zero(); c * plane];
    for ch in 0..c2 {
        for d in 0..dmax {
            let gp = &g[(ch * dmax + d) * plane..(ch * dmax + d + 1) * plane];
            if ch < c {
                for (a, &b) in gl[ch * plane..(ch + 1) * plane].iter_mut().zip(gp) {
                    *a += b;
                }
            } else {
                let dst = &mut gr[(ch - c) * plane..(ch - c + 1) * plane];
                for y in 0..h {
                    for x in d..w {
                        dst[y * w + x - d] += gp[y * w + x];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![c, h, w], gl)?,
        Tensor::new(vec![c, h, w], gr)?,
    ))
}

/// Copy of the slice at disparity `d`: `1×H×W` or `2F×H×W`.
pub fn slice<T: Real>(cv: &CostVolume<T>, d: usize) -> Result<Tensor<T>> {
    let (dmax, h, w) = cv.dims();
    if d >= dmax {
        return Err(Error::Index(format!("disparity {d} outside 0..{dmax}")));
    }
    let plane = h * w;
    let c = cv.channels();
    let src = cv.data.data();
    let mut out = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let base = (ch * dmax + d) * plane;
        out.extend_from_slice(&src[base..base + plane]);
    }
    Tensor::new(vec![c, h, w], out)
}

/// Copy of the fiber at pixel `(u, v)`: shape `D` for correlation volumes,
/// `C×D` for concat volumes.
pub fn fiber<T: Real>(cv: &CostVolume<T>, u: usize, v: usize) -> Result<Tensor<T>> {
    let (dmax, h, w) = cv.dims();
    if u >= w || v >= h {
        return Err(Error::Index(format!("pixel ({u},{v}) outside {w}x{h}")));
    }
    let plane = h * w;
    let c = cv.channels();
    let src = cv.data.data();
    let vals = (0..c * dmax)
        .map(|cd| src[cd * plane + v * w + u])
        .collect();
    match cv.kind {
        VolumeKind::Correlation3d => Tensor::new(vec![dmax], vals),
        VolumeKind::Concat4d => Tensor::new(vec![c, dmax], vals),
    }
}

fn check_proj<T: Real>(cv: &CostVolume<T>, proj: &Tensor<T>) -> Result<usize> {
    if cv.kind != VolumeKind::Concat4d {
        return Err(Error::config("projection requires a concat volume"));
    }
    let c = cv.channels();
    if proj.shape() != [1, c, 1, 1] {
        return Err(Error::config(format!(
            "projection kernel must be 1x{c}x1x1, got {:?}",
            proj.shape()
        )));
    }
    Ok(c)
}

/// Learned 1×1 reduction of a concat volume to `D×H×W`:
/// `out[d,v,u] = Σ_c proj[c]·cv[c,d,v,u] + bias`.
pub fn project_4d_to_3d<T: Real>(cv: &CostVolume<T>, proj: &Tensor<T>, bias: T) -> Result<CostVolume<T>> {
    let c = check_proj(cv, proj)?;
    let (dmax, h, w) = cv.dims();
    let n = dmax * h * w;
    let src = cv.data.data();
    let wts = proj.data();
    let mut out = vec![bias; n];
    for (ch, &wc) in wts.iter().enumerate().take(c) {
        for (o, &s) in out.iter_mut().zip(&src[ch * n..(ch + 1) * n]) {
            *o += wc * s;
        }
    }
    CostVolume::correlation(Tensor::new(vec![dmax, h, w], out)?)
}

/// Gradients of [`project_4d_to_3d`] w.r.t. the volume, kernel and bias.
pub fn project_vjp<T: Real>(cv: &CostVolume<T>, proj: &Tensor<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, T)> {
    let c = check_proj(cv, proj)?;
    let (dmax, h, w) = cv.dims();
    if upstream.shape() != [dmax, h, w] {
        return Err(Error::config("project_vjp: upstream shape mismatch"));
    }
    let n = dmax * h * w;
    let src = cv.data.data();
    let g = upstream.data();
    let mut gcv = vec![T::zero(); c * n];
    let mut gp = vec![T::zero(); c];
    for ch in 0..c {
        let wc = proj.data()[ch];
        let s = &src[ch * n..(ch + 1) * n];
        let mut acc = T::zero();
        for i in 0..n {
            gcv[ch * n + i] = wc * g[i];
            acc += g[i] * s[i];
        }
        gp[ch] = acc;
    }
    let gb = g.iter().copied().sum();
    Ok((
        Tensor::new(cv.data.shape().to_vec(), gcv)?,
        Tensor::new(proj.shape().to_vec(), gp)?,
        gb,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn self_correlation_of_unit_feature() {
        let f = Tensor::from_fn(vec![2, 3, 4], |i| if i < 12 { 1.0f64 } else { 0.0 });
        let cv = build_correlation(&f, &f, 3, false).unwrap();
        let s = slice(&cv, 0).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dot_product_entry() {
        let fl = Tensor::new(vec![2, 1, 1], vec![1.0f64, 2.0]).unwrap();
        let fr = Tensor::new(vec![2, 1, 1], vec![3.0f64, 4.0]).unwrap();
        let cv = build_correlation(&fl, &fr, 1, false).unwrap();
        assert_eq!(cv.data().data(), &[11.0]);
        let cvn = build_correlation(&fl, &fr, 1, true).unwrap();
        assert_eq!(cvn.data().data(), &[5.5]);
    }

    #[test]
    fn correlation_matches_triple_loop() {
        let (c, h, w, dmax) = (4, 6, 8, 3);
        let fl = rand_t(&[c, h, w], 1);
        let fr = rand_t(&[c, h, w], 2);
        let cv = build_correlation(&fl, &fr, dmax, false).unwrap();
        for d in 0..dmax {
            for v in 0..h {
                for u in 0..w {
                    let mut e = 0.0;
                    if u >= d {
                        for ch in 0..c {
                            e += fl.data()[(ch * h + v) * w + u] * fr.data()[(ch * h + v) * w + u - d];
                        }
                    }
                    let got = cv.data().data()[(d * h + v) * w + u];
                    assert!((got - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn range_larger_than_width_rejected() {
        let f = Tensor::<f32>::zeros(vec![1, 2, 3]);
        assert!(matches!(build_correlation(&f, &f, 4, false), Err(Error::Config(_))));
        assert!(matches!(build_concat(&f, &f, 0), Err(Error::Config(_))));
    }

    #[test]
    fn concat_layout() {
        let (c, h, w, dmax) = (3, 5, 6, 4);
        let fl = rand_t(&[c, h, w], 3);
        let fr = rand_t(&[c, h, w], 4);
        let cv = build_concat(&fl, &fr, dmax).unwrap();
        assert_eq!(cv.data().shape(), &[6, 4, 5, 6]);
        let s0 = slice(&cv, 0).unwrap();
        assert_eq!(&s0.data()[..c * h * w], fl.data());
        assert_eq!(&s0.data()[c * h * w..], fr.data());
        let s2 = slice(&cv, 2).unwrap();
        for ch in c..2 * c {
            for v in 0..h {
                for u in 0..2 {
                    assert_eq!(s2.data()[(ch * h + v) * w + u], 0.0);
                }
            }
        }
    }

    #[test]
    fn fibers_and_index_errors() {
        let cv = CostVolume::correlation(Tensor::full(vec![5, 2, 3], 2.0f32)).unwrap();
        let f = fiber(&cv, 2, 1).unwrap();
        assert_eq!(f.len(), 5);
        assert!(f.data().iter().all(|&v| v == 2.0));
        assert!(matches!(fiber(&cv, 3, 0), Err(Error::Index(_))));
        assert!(matches!(slice(&cv, 5), Err(Error::Index(_))));
        let mut s = slice(&cv, 1).unwrap();
        s.data_mut()[0] = 9.0;
        assert_eq!(cv.data().data()[6], 2.0);
    }

    #[test]
    fn projection_cases() {
        let (c, h, w, dmax) = (3, 4, 5, 3);
        let fl = rand_t(&[c, h, w], 5);
        let fr = rand_t(&[c, h, w], 6);
        let cv = build_concat(&fl, &fr, dmax).unwrap();

        let ones = Tensor::from_fn(vec![1, 2 * c, 1, 1], |i| if i < c { 1.0 } else { 0.0 });
        let p = project_4d_to_3d(&cv, &ones, 0.0).unwrap();
        for d in 0..dmax {
            for px in 0..h * w {
                let s: f64 = (0..c).map(|ch| fl.data()[ch * h * w + px]).sum();
                assert!((p.data().data()[d * h * w + px] - s).abs() < 1e-12);
            }
        }

        let p = project_4d_to_3d(&cv, &Tensor::zeros(vec![1, 2 * c, 1, 1]), 3.0).unwrap();
        assert!(p.data().data().iter().all(|&v| v == 3.0));

        // fR-half weights = fL(u0,v0) recovers the correlation at that pixel
        let (u0, v0) = (4, 2);
        let wts = Tensor::from_fn(vec![1, 2 * c, 1, 1], |i| {
            if i < c { 0.0 } else { fl.data()[((i - c) * h + v0) * w + u0] }
        });
        let p = project_4d_to_3d(&cv, &wts, 0.0).unwrap();
        let corr = build_correlation(&fl, &fr, dmax, false).unwrap();
        for d in 0..dmax {
            let i = (d * h + v0) * w + u0;
            assert!((p.data().data()[i] - corr.data().data()[i]).abs() < 1e-12);
        }

        assert!(project_4d_to_3d(&cv, &Tensor::zeros(vec![1, c, 1, 1]), 0.0).is_err());
    }

    #[test]
    fn correlation_vjp_adjoint() {
        let (c, h, w, dmax) = (3, 4, 6, 4);
        let fl = rand_t(&[c, h, w], 7);
        let fr = rand_t(&[c, h, w], 8);
        let g = rand_t(&[dmax, h, w], 9);
        let cv = build_correlation(&fl, &fr, dmax, true).unwrap();
        let (gl, gr) = correlation_vjp(&fl, &fr, dmax, true, &g).unwrap();
        // bilinear: <C(fl,fr), g> = <fl, gl> = <fr, gr>
        let lhs = cv.data().dot(&g).unwrap();
        assert!((lhs - fl.dot(&gl).unwrap()).abs() < 1e-12);
        assert!((lhs - fr.dot(&gr).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn concat_vjp_adjoint() {
        let (c, h, w, dmax) = (2, 3, 5, 3);
        let fl = rand_t(&[c, h, w], 10);
        let fr = rand_t(&[c, h, w], 11);
        let cv = build_concat(&fl, &fr, dmax).unwrap();
        let g = rand_t(cv.data().shape(), 12);
        let (gl, gr) = concat_vjp(&g).unwrap();
        let lhs = cv.data().dot(&g).unwrap();
        assert!((lhs - fl.dot(&gl).unwrap() - fr.dot(&gr).unwrap()).abs() < 1e-12);
    }
}
