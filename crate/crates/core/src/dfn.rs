//! Dynamic local filtering: a generator network maps guidance features to one
//! `s×s` filter per pixel and channel group, applied to every cost slice.
//!
//! Generated logits are softmax-normalized over the window taps, so each
//! filter is a convex combination of its (zero-padded) neighbourhood.

use rand::Rng;
use rayon::prelude::*;

use crate::cost_volume::{CostVolume, VolumeKind};
use crate::error::{Error, Result};
use crate::nn::{ConvStack, LayerGrads, StackTape};
use crate::tensor::{neighbor, softmax, softmax_vjp, Real, Tensor, WindowSpec};

/// Guidance `F -> 32 -> s²·C_B` generator.
#[derive(Clone, Debug, PartialEq)]
pub struct DfnGeneratorParams<T> {
    pub stack: ConvStack<T>,
}

impl<T: Real> DfnGeneratorParams<T> {
    pub fn init(guidance_channels: usize, win: WindowSpec, groups: usize, rng: &mut impl Rng) -> Self {
        DfnGeneratorParams {
            stack: ConvStack::init(&[guidance_channels, 32, win.taps() * groups], &[1, 1], rng),
        }
    }
}

/// Per-pixel filters, laid out `(group, tap, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicFilters<T> {
    theta: Tensor<T>,
    window: WindowSpec,
    groups: usize,
}

impl<T: Real> DynamicFilters<T> {
    /// Normalizes raw `(C_B·s²)×H×W` logits over the taps of each group.
    pub fn from_logits(logits: &Tensor<T>, window: WindowSpec) -> Result<Self> {
        let (ch, h, w) = logits.dims3()?;
        let taps = window.taps();
        if ch == 0 || ch % taps != 0 {
            return Err(Error::config(format!(
                "{ch} logit channels is not a multiple of {taps} window taps"
            )));
        }
        let groups = ch / taps;
        let grouped = logits.clone().reshape(vec![groups, taps, h * w])?;
        let theta = softmax(&grouped, 1)?.reshape(vec![ch, h, w])?;
        Ok(DynamicFilters {
            theta,
            window,
            groups,
        })
    }

    pub fn theta(&self) -> &Tensor<T> {
        &self.theta
    }

    pub fn window(&self) -> WindowSpec {
        self.window
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    fn spatial(&self) -> (usize, usize) {
        let s = self.theta.shape();
        (s[1], s[2])
    }

    /// Back-propagates a gradient on `theta` to the generator logits.
    pub fn logits_vjp(&self, grad_theta: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self.spatial();
        let taps = self.window.taps();
        let y = self.theta.clone().reshape(vec![self.groups, taps, h * w])?;
        let g = grad_theta.clone().reshape(vec![self.groups, taps, h * w])?;
        softmax_vjp(&y, 1, &g)?.reshape(self.theta.shape().to_vec())
    }
}

/// Generator forward pass with its tape.
pub fn dfn_generate_tape<T: Real>(
    guidance: &Tensor<T>,
    p: &DfnGeneratorParams<T>,
    win: WindowSpec,
) -> Result<(DynamicFilters<T>, StackTape<T>)> {
    let (logits, tape) = p.stack.forward_tape(guidance)?;
    Ok((DynamicFilters::from_logits(&logits, win)?, tape))
}

pub fn dfn_generate<T: Real>(guidance: &Tensor<T>, p: &DfnGeneratorParams<T>, win: WindowSpec) -> Result<DynamicFilters<T>> {
    Ok(dfn_generate_tape(guidance, p, win)?.0)
}

/// Back-propagates a logits gradient through the generator.
pub fn dfn_generator_vjp<T: Real>(
    p: &DfnGeneratorParams<T>,
    tape: &StackTape<T>,
    grad_logits: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<LayerGrads<T>>)> {
    p.stack.backward(tape, grad_logits)
}

/// Applies group `group_of(c)` filters to channel `c` of a `C×H×W` stack.
fn apply_grouped<T: Real>(
    x: &Tensor<T>,
    f: &DynamicFilters<T>,
    group_of: impl Fn(usize) -> usize + Sync,
) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if f.spatial() != (h, w) {
        return Err(Error::config(format!(
            "filters are {:?}, slice is {h}x{w}",
            f.spatial()
        )));
    }
    let plane = h * w;
    let offsets = f.window.offsets();
    let taps = offsets.len();
    let theta = f.theta.data();
    let src = x.data();
    let mut out = vec![T::zero(); c * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(ch, dst)| {
        let g = group_of(ch);
        let xp = &src[ch * plane..(ch + 1) * plane];
        for (t, &(dy, dx)) in offsets.iter().enumerate() {
            let th = &theta[(g * taps + t) * plane..(g * taps + t + 1) * plane];
            for y in 0..h {
                for xx in 0..w {
                    if let Some(j) = neighbor(y, xx, dy, dx, h, w) {
                        dst[y * w + xx] += th[y * w + xx] * xp[j];
                    }
                }
            }
        }
    });
    Tensor::new(x.shape().to_vec(), out)
}

fn vjp_grouped<T: Real>(
    x: &Tensor<T>,
    f: &DynamicFilters<T>,
    upstream: &Tensor<T>,
    group_of: impl Fn(usize) -> usize + Sync,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = x.dims3()?;
    if upstream.shape() != x.shape() || f.spatial() != (h, w) {
        return Err(Error::config("dfn_vjp: shape mismatch"));
    }
    let plane = h * w;
    let offsets = f.window.offsets();
    let taps = offsets.len();
    let theta = f.theta.data();
    let (src, g) = (x.data(), upstream.data());

    let mut gx = vec![T::zero(); c * plane];
    gx.par_chunks_mut(plane).enumerate().for_each(|(ch, dst)| {
        let grp = group_of(ch);
        let gp = &g[ch * plane..(ch + 1) * plane];
        for (t, &(dy, dx)) in offsets.iter().enumerate() {
            let th = &theta[(grp * taps + t) * plane..(grp * taps + t + 1) * plane];
            for y in 0..h {
                for xx in 0..w {
                    if let Some(j) = neighbor(y, xx, dy, dx, h, w) {
                        dst[j] += th[y * w + xx] * gp[y * w + xx];
                    }
                }
            }
        }
    });

    let mut gt = vec![T::zero(); f.theta.len()];
    gt.par_chunks_mut(plane).enumerate().for_each(|(gt_idx, dst)| {
        let (grp, t) = (gt_idx / taps, gt_idx % taps);
        let (dy, dx) = offsets[t];
        for ch in (0..c).filter(|&ch| group_of(ch) == grp) {
            let gp = &g[ch * plane..(ch + 1) * plane];
            let xp = &src[ch * plane..(ch + 1) * plane];
            for y in 0..h {
                for xx in 0..w {
                    if let Some(j) = neighbor(y, xx, dy, dx, h, w) {
                        dst[y * w + xx] += gp[y * w + xx] * xp[j];
                    }
                }
            }
        }
    });
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(f.theta.shape().to_vec(), gt)?,
    ))
}

/// Filters a `C_B×H×W` slice, channel `g` with filter group `g`.
pub fn dfn_apply<T: Real>(slice: &Tensor<T>, filters: &DynamicFilters<T>) -> Result<Tensor<T>> {
    let (c, _, _) = slice.dims3()?;
    if c != filters.groups {
        return Err(Error::config(format!(
            "slice has {c} channels, filters have {} groups",
            filters.groups
        )));
    }
    apply_grouped(slice, filters, |ch| ch)
}

/// Gradients of [`dfn_apply`] w.r.t. the slice and the generator logits.
pub fn dfn_vjp<T: Real>(slice: &Tensor<T>, filters: &DynamicFilters<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, _, _) = slice.dims3()?;
    if c != filters.groups {
        return Err(Error::config("dfn_vjp: channel/group mismatch"));
    }
    let (gx, gtheta) = vjp_grouped(slice, filters, upstream, |ch| ch)?;
    Ok((gx, filters.logits_vjp(&gtheta)?))
}

fn volume_groups<T: Real>(cv: &CostVolume<T>, filters: &DynamicFilters<T>) -> Result<(Tensor<T>, usize)> {
    let (d, h, w) = cv.dims();
    if filters.groups != cv.channels() {
        return Err(Error::config(format!(
            "volume has {} channels per entry, filters have {} groups",
            cv.channels(),
            filters.groups
        )));
    }
    Ok((cv.data().clone().reshape(vec![cv.channels() * d, h, w])?, d))
}

/// Applies shared filters to every disparity slice of a volume.
pub fn dfn_apply_volume<T: Real>(cv: &CostVolume<T>, filters: &DynamicFilters<T>) -> Result<CostVolume<T>> {
    let (stacked, d) = volume_groups(cv, filters)?;
    let out = apply_grouped(&stacked, filters, |ch| ch / d)?;
    match cv.kind() {
        VolumeKind::Correlation3d => CostVolume::correlation(out),
        VolumeKind::Concat4d => CostVolume::concat(out.reshape(cv.data().shape().to_vec())?),
    }
}

/// Gradients of [`dfn_apply_volume`] w.r.t. the volume data and the logits.
pub fn dfn_volume_vjp<T: Real>(cv: &CostVolume<T>, filters: &DynamicFilters<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (stacked, d) = volume_groups(cv, filters)?;
    let up = upstream.clone().reshape(stacked.shape().to_vec())?;
    let (gx, gtheta) = vjp_grouped(&stacked, filters, &up, |ch| ch / d)?;
    Ok((gx.reshape(cv.data().shape().to_vec())?, filters.logits_vjp(&gtheta)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn delta_logits(win: WindowSpec, groups: usize, h: usize, w: usize, boost: f64) -> Tensor<f64> {
        let taps = win.taps();
        Tensor::from_fn(vec![groups * taps, h, w], |i| {
            let t = (i / (h * w)) % taps;
            if t == win.center_tap() { boost } else { 0.0 }
        })
    }

    #[test]
    fn zero_generator_is_uniform() {
        let win = WindowSpec::new(3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DfnGeneratorParams::<f64>::init(4, win, 1, &mut rng);
        let p = DfnGeneratorParams { stack: p.stack.zeroed() };
        let f = dfn_generate(&rand_t(&[4, 5, 6], 2), &p, win).unwrap();
        assert_eq!(f.theta().shape(), &[9, 5, 6]);
        assert!(f.theta().data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn boosted_center_is_near_delta() {
        let win = WindowSpec::new(5, 2).unwrap();
        let f = DynamicFilters::from_logits(&delta_logits(win, 1, 3, 4, 20.0), win).unwrap();
        let c = win.center_tap();
        let expect = 1.0 / (1.0 + 24.0 * (-20.0f64).exp());
        for px in 0..12 {
            let v = f.theta().data()[c * 12 + px];
            assert!((v - expect).abs() < 1e-15);
            assert!(v >= 1.0 - 5e-8);
        }
    }

    #[test]
    fn delta_filters_identity_and_grad() {
        let win = WindowSpec::new(3, 2).unwrap();
        let f = DynamicFilters::from_logits(&delta_logits(win, 2, 4, 5, 800.0), win).unwrap();
        let x = rand_t(&[2, 4, 5], 3);
        assert!(dfn_apply(&x, &f).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
        let g = rand_t(&[2, 4, 5], 4);
        let (gx, _) = dfn_vjp(&x, &f, &g).unwrap();
        assert!(gx.max_abs_diff(&g).unwrap() < 1e-12);
    }

    #[test]
    fn uniform_on_constant() {
        let win = WindowSpec::new(3, 1).unwrap();
        let f = DynamicFilters::from_logits(&Tensor::zeros(vec![9, 5, 5]), win).unwrap();
        let y = dfn_apply(&Tensor::full(vec![1, 5, 5], 2.0f64), &f).unwrap();
        assert!((y.data()[12] - 2.0).abs() < 1e-12);
        // corner sees 4 of 9 taps
        assert!((y.data()[0] - 2.0 * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn direct_loop_oracle() {
        let win = WindowSpec::new(3, 2).unwrap();
        let (h, w) = (6, 6);
        let f = DynamicFilters::from_logits(&rand_t(&[9, h, w], 5), win).unwrap();
        let x = rand_t(&[1, h, w], 6);
        let y = dfn_apply(&x, &f).unwrap();
        for v in 0..h {
            for u in 0..w {
                let mut e = 0.0;
                let mut t = 0;
                for ky in -1isize..=1 {
                    for kx in -1isize..=1 {
                        let (yy, xx) = (v as isize + 2 * ky, u as isize + 2 * kx);
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            e += f.theta().data()[(t * h + v) * w + u] * x.data()[yy as usize * w + xx as usize];
                        }
                        t += 1;
                    }
                }
                assert!((y.data()[v * w + u] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_groups_rejected() {
        let win = WindowSpec::new(3, 1).unwrap();
        let f = DynamicFilters::from_logits(&Tensor::<f64>::zeros(vec![9, 3, 3]), win).unwrap();
        assert!(matches!(dfn_apply(&Tensor::zeros(vec![2, 3, 3]), &f), Err(Error::Config(_))));
        assert!(DynamicFilters::from_logits(&Tensor::<f64>::zeros(vec![10, 3, 3]), win).is_err());
    }

    #[test]
    fn volume_matches_per_slice() {
        let win = WindowSpec::new(3, 1).unwrap();
        let (d, h, w) = (3, 4, 5);
        let f = DynamicFilters::from_logits(&rand_t(&[9, h, w], 7), win).unwrap();
        let cv = CostVolume::correlation(rand_t(&[d, h, w], 8)).unwrap();
        let out = dfn_apply_volume(&cv, &f).unwrap();
        for k in 0..d {
            let s = crate::cost_volume::slice(&cv, k).unwrap();
            let y = dfn_apply(&s, &f).unwrap();
            assert_eq!(y.data(), &out.data().data()[k * h * w..(k + 1) * h * w]);
        }
    }
}
