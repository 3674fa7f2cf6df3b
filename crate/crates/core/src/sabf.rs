//! Segmentation-aware bilateral filtering of cost slices.
//!
//! The kernel between pixel `i` and neighbour `j` combines a spatial Gaussian
//! with a Gaussian of the squared L2 distance between learned embeddings:
//!
//! ```text
//! K(i,j) = exp(-|p_i - p_j|² / 2σs² - |e_i - e_j|² / 2σr²)
//! y_i    = Σ_j K(i,j) x_j / Σ_j K(i,j)        (j over the dilated s×s window)
//! ```
//!
//! Out-of-image taps are dropped from both sums. The kernel field depends only
//! on the embedding, so it is computed once and shared by every channel and
//! every disparity slice.

use rayon::prelude::*;

use crate::cost_volume::{CostVolume, VolumeKind};
use crate::error::{Error, Result};
use crate::tensor::{for_tap_rows, Real, Tensor, WindowSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SabfConfig {
    pub sigma_s: f64,
    pub sigma_r: f64,
    pub window: WindowSpec,
}

impl SabfConfig {
    pub fn new(sigma_s: f64, sigma_r: f64, window: WindowSpec) -> Result<Self> {
        if !(sigma_s > 0.0 && sigma_r > 0.0) {
            return Err(Error::config(format!(
                "SABF standard deviations must be positive (got {sigma_s}, {sigma_r})"
            )));
        }
        Ok(SabfConfig {
            sigma_s,
            sigma_r,
            window,
        })
    }
}

impl Default for SabfConfig {
    fn default() -> Self {
        SabfConfig {
            sigma_s: 0.7,
            sigma_r: 0.1,
            window: WindowSpec::default(),
        }
    }
}

/// Kernel value between pixels at `(u, v)` positions `pos_i`, `pos_j`.
pub fn sabf_kernel<T: Real>(pos_i: (usize, usize), pos_j: (usize, usize), e_i: &[T], e_j: &[T], cfg: &SabfConfig) -> T {
    let du = pos_i.0 as f64 - pos_j.0 as f64;
    let dv = pos_i.1 as f64 - pos_j.1 as f64;
    let spatial = T::lit((du * du + dv * dv) / (2.0 * cfg.sigma_s * cfg.sigma_s));
    let range: T = e_i.iter().zip(e_j).map(|(&a, &b)| (a - b) * (a - b)).sum();
    (-spatial - range / T::lit(2.0 * cfg.sigma_r * cfg.sigma_r)).flushed_exp()
}

/// Per-tap kernel weights over the image (zero for padded taps) and their
/// per-pixel sums.
#[derive(Clone, Debug)]
pub struct SabfField<T> {
    height: usize,
    width: usize,
    window: WindowSpec,
    /// `taps × plane`
    weights: Vec<T>,
    /// `plane`
    norm: Vec<T>,
}

impl<T: Real> SabfField<T> {
    pub fn new(emb: &Tensor<T>, cfg: &SabfConfig) -> Result<Self> {
        let (e, h, w) = emb.dims3()?;
        let plane = h * w;
        let offsets = cfg.window.offsets();
        let taps = offsets.len();
        let inv2s = 1.0 / (2.0 * cfg.sigma_s * cfg.sigma_s);
        let inv2r = T::lit(1.0 / (2.0 * cfg.sigma_r * cfg.sigma_r));
        let ed = emb.data();
        let mut weights = vec![T::zero(); taps * plane];
        weights.par_chunks_mut(plane).enumerate().for_each(|(t, wt)| {
            let (dy, dx) = offsets[t];
            let spatial = T::lit(((dy * dy + dx * dx) as f64) * inv2s);
            let mut dist = vec![T::zero(); plane];
            for ch in 0..e {
                let ep = &ed[ch * plane..(ch + 1) * plane];
                for_tap_rows(dy, dx, h, w, |r, j0| {
                    let n = r.len();
                    for ((d, &a), &b) in dist[r.clone()].iter_mut().zip(&ep[r]).zip(&ep[j0..j0 + n]) {
                        *d += (a - b) * (a - b);
                    }
                });
            }
            for_tap_rows(dy, dx, h, w, |r, _| {
                for (k, &d) in wt[r.clone()].iter_mut().zip(&dist[r]) {
                    *k = (-spatial - d * inv2r).flushed_exp();
                }
            });
        });
        let mut norm = vec![T::zero(); plane];
        for wt in weights.chunks(plane) {
            for (n, &k) in norm.iter_mut().zip(wt) {
                *n += k;
            }
        }
        Ok(SabfField {
            height: h,
            width: w,
            window: cfg.window,
            weights,
            norm,
        })
    }

    /// Kernel weight of tap `t` at flat pixel `i`.
    pub fn weight(&self, i: usize, t: usize) -> T {
        self.weights[t * self.height * self.width + i]
    }

    /// Filters every channel of a `C×H×W` tensor with this field.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = x.dims3()?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::config(format!(
                "slice is {h}x{w}, embedding is {}x{}",
                self.height, self.width
            )));
        }
        let plane = h * w;
        let offsets = self.window.offsets();
        let src = x.data();
        let mut out = vec![T::zero(); c * plane];
        out.par_chunks_mut(plane).enumerate().for_each(|(ch, dst)| {
            let xp = &src[ch * plane..(ch + 1) * plane];
            for (t, &(dy, dx)) in offsets.iter().enumerate() {
                let wt = &self.weights[t * plane..(t + 1) * plane];
                for_tap_rows(dy, dx, h, w, |r, j0| {
                    let n = r.len();
                    for ((d, &k), &v) in dst[r.clone()].iter_mut().zip(&wt[r]).zip(&xp[j0..j0 + n]) {
                        *d += k * v;
                    }
                });
            }
            for (d, &n) in dst.iter_mut().zip(&self.norm) {
                *d = *d / n;
            }
        });
        Tensor::new(x.shape().to_vec(), out)
    }
}

/// Filters a `C×H×W` slice (or any stack of slices) guided by a `E×H×W` embedding.
pub fn sabf_filter<T: Real>(slice: &Tensor<T>, emb: &Tensor<T>, cfg: &SabfConfig) -> Result<Tensor<T>> {
    SabfField::new(emb, cfg)?.apply(slice)
}

/// Filters every slice and channel of a cost volume with one shared field.
pub fn sabf_filter_volume<T: Real>(cv: &CostVolume<T>, emb: &Tensor<T>, cfg: &SabfConfig) -> Result<CostVolume<T>> {
    let (d, h, w) = cv.dims();
    let stacked = cv.data().clone().reshape(vec![cv.channels() * d, h, w])?;
    let out = sabf_filter(&stacked, emb, cfg)?;
    match cv.kind() {
        VolumeKind::Correlation3d => CostVolume::correlation(out),
        VolumeKind::Concat4d => CostVolume::concat(out.reshape(cv.data().shape().to_vec())?),
    }
}

/// Vector-Jacobian product of [`sabf_filter`]: gradients w.r.t. the slice and
/// the embedding.
pub fn sabf_vjp<T: Real>(
    slice: &Tensor<T>,
    emb: &Tensor<T>,
    cfg: &SabfConfig,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let field = SabfField::new(emb, cfg)?;
    let y = field.apply(slice)?;
    field.vjp(slice, &y, emb, cfg.sigma_r, upstream)
}

impl<T: Real> SabfField<T> {
    /// [`sabf_vjp`] reusing this field and the forward output `y`.
    pub fn vjp(&self, slice: &Tensor<T>, y: &Tensor<T>, emb: &Tensor<T>, sigma_r: f64, upstream: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        vjp_impl(self, slice, y, emb, sigma_r, upstream)
    }
}

fn vjp_impl<T: Real>(
    field: &SabfField<T>,
    slice: &Tensor<T>,
    y: &Tensor<T>,
    emb: &Tensor<T>,
    sigma_r: f64,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if upstream.shape() != slice.shape() || y.shape() != slice.shape() {
        return Err(Error::config("sabf_vjp: upstream shape mismatch"));
    }
    let (c, h, w) = slice.dims3()?;
    let (e, eh, ew) = emb.dims3()?;
    if (eh, ew) != (field.height, field.width) || (h, w) != (eh, ew) {
        return Err(Error::config("sabf_vjp: embedding and slice extents differ"));
    }
    let plane = h * w;
    let offsets = field.window.offsets();
    let taps = offsets.len();
    let (xs, ys, g) = (slice.data(), y.data(), upstream.data());

    // upstream divided by the normalizer
    let gn: Vec<T> = g
        .par_chunks(plane)
        .flat_map_iter(|gp| gp.iter().zip(&field.norm).map(|(&a, &n)| a / n))
        .collect();

    // d/dx_j: scatter normalized weights
    let mut gx = vec![T::zero(); c * plane];
    gx.par_chunks_mut(plane).enumerate().for_each(|(ch, dst)| {
        let gp = &gn[ch * plane..(ch + 1) * plane];
        for (t, &(dy, dx)) in offsets.iter().enumerate() {
            let wt = &field.weights[t * plane..(t + 1) * plane];
            for_tap_rows(dy, dx, h, w, |r, j0| {
                let n = r.len();
                for ((d, &k), &s) in dst[j0..j0 + n].iter_mut().zip(&wt[r.clone()]).zip(&gp[r]) {
                    *d += k * s;
                }
            });
        }
    });

    // dL/dK(i,t) scaled by K·(1/σr²): the coefficient multiplying (e_i - e_j)
    let inv_r2 = T::lit(1.0 / (sigma_r * sigma_r));
    let mut coef = vec![T::zero(); taps * plane];
    coef.par_chunks_mut(plane).enumerate().for_each(|(t, dst)| {
        let (dy, dx) = offsets[t];
        if dy == 0 && dx == 0 {
            return;
        }
        for ch in 0..c {
            let gp = &gn[ch * plane..(ch + 1) * plane];
            let xp = &xs[ch * plane..(ch + 1) * plane];
            let yp = &ys[ch * plane..(ch + 1) * plane];
            for_tap_rows(dy, dx, h, w, |r, j0| {
                let n = r.len();
                for (((d, &gi), &yi), &xj) in dst[r.clone()].iter_mut().zip(&gp[r.clone()]).zip(&yp[r]).zip(&xp[j0..j0 + n]) {
                    *d += gi * (xj - yi);
                }
            });
        }
        let wt = &field.weights[t * plane..(t + 1) * plane];
        for (d, &k) in dst.iter_mut().zip(wt) {
            *d = *d * k * inv_r2;
        }
    });

    // Gather form of the symmetric scatter: the pair (i, j) contributes to
    // both ends, and tap t of i is the reverse tap of j.
    let ed = emb.data();
    let mut ge = vec![T::zero(); e * plane];
    ge.par_chunks_mut(plane).enumerate().for_each(|(ch, dst)| {
        let ep = &ed[ch * plane..(ch + 1) * plane];
        for (t, &(dy, dx)) in offsets.iter().enumerate() {
            if dy == 0 && dx == 0 {
                continue;
            }
            let ci = &coef[t * plane..(t + 1) * plane];
            let cj = &coef[(taps - 1 - t) * plane..(taps - t) * plane];
            for_tap_rows(dy, dx, h, w, |r, j0| {
                let n = r.len();
                let it = dst[r.clone()].iter_mut().zip(&ci[r.clone()]).zip(&ep[r]);
                for ((((d, &qi), &a), &qj), &b) in it.zip(&cj[j0..j0 + n]).zip(&ep[j0..j0 + n]) {
                    *d -= (qi + qj) * (a - b);
                }
            });
        }
    });

    Ok((
        Tensor::new(slice.shape().to_vec(), gx)?,
        Tensor::new(emb.shape().to_vec(), ge)?,
    ))
}
