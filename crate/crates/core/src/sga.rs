//! Semi-global aggregation: four scanline recursions over a `D×H×W` volume
//!
//! `C'_r(p,d) = w0·C(p,d) + w1·C'_r(p-r,d) + w2·C'_r(p-r,d-1)
//!            + w3·C'_r(p-r,d+1) + w4·max_i C'_r(p-r,i)`
//!
//! fused by an elementwise max over directions. The first pixel of every
//! scanline passes the raw cost through, `d±1` is clamped into range and all
//! maxima break ties towards the lowest index.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{ConvStack, LayerGrads, StackTape};
use crate::tensor::{softmax, softmax_vjp, Real, Tensor};

pub const DIRECTIONS: usize = 4;
pub const TERMS: usize = 5;

/// Aggregation direction `r = (du, dv)`; the predecessor of `p` is `p - r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; DIRECTIONS] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn vector(self) -> (isize, isize) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Up => (0, 1),
            Direction::Down => (0, -1),
        }
    }

    pub fn from_vector(r: (isize, isize)) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|d| d.vector() == r)
            .ok_or_else(|| Error::config(format!("{r:?} is not an aggregation direction")))
    }

    fn horizontal(self) -> bool {
        matches!(self, Direction::Left | Direction::Right)
    }

    /// Number of scanlines and their length.
    fn lines(self, h: usize, w: usize) -> (usize, usize) {
        if self.horizontal() { (h, w) } else { (w, h) }
    }

    /// Flat pixel index of step `t` on scanline `line`, in scan order.
    fn pixel(self, line: usize, t: usize, h: usize, w: usize) -> usize {
        match self {
            Direction::Left => line * w + (w - 1 - t),
            Direction::Right => line * w + t,
            Direction::Up => t * w + line,
            Direction::Down => (h - 1 - t) * w + line,
        }
    }
}

/// Normalized weights `4×5×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgaWeights<T> {
    w: Tensor<T>,
}

impl<T: Real> SgaWeights<T> {
    pub fn new(w: Tensor<T>) -> Result<Self> {
        let (r, n, _, _) = w.dims4()?;
        if r != DIRECTIONS || n != TERMS {
            return Err(Error::config(format!("SGA weights must be 4x5xHxW, got {:?}", w.shape())));
        }
        let s = w.shape();
        let plane = s[2] * s[3];
        let tol = T::lit(1e-6);
        for dir in 0..DIRECTIONS {
            for i in 0..plane {
                let mut sum = T::zero();
                for j in 0..TERMS {
                    let v = w.data()[(dir * TERMS + j) * plane + i];
                    if !(v >= T::zero()) {
                        return Err(Error::domain("SGA weights must be nonnegative"));
                    }
                    sum += v;
                }
                if (sum - T::one()).abs() > tol {
                    return Err(Error::domain("SGA weights must sum to 1 per direction and pixel"));
                }
            }
        }
        Ok(SgaWeights { w })
    }

    /// Softmax over the five terms of `20×H×W` (or `4×5×H×W`) logits.
    pub fn from_logits(logits: &Tensor<T>) -> Result<Self> {
        let s = logits.shape();
        let (h, w) = match *s {
            [c, h, w] if c == DIRECTIONS * TERMS => (h, w),
            [r, n, h, w] if r == DIRECTIONS && n == TERMS => (h, w),
            _ => return Err(Error::config(format!("SGA logits must have 20 channels, got {s:?}"))),
        };
        let l = logits.clone().reshape(vec![DIRECTIONS, TERMS, h, w])?;
        Ok(SgaWeights { w: softmax(&l, 1)? })
    }

    /// Every direction uses the given five weights at every pixel.
    pub fn uniform_terms(terms: [T; TERMS], h: usize, w: usize) -> Result<Self> {
        let plane = h * w;
        Self::new(Tensor::from_fn(vec![DIRECTIONS, TERMS, h, w], |i| terms[(i / plane) % TERMS]))
    }

    /// `w0 = 1`: aggregation reproduces its input.
    pub fn identity(h: usize, w: usize) -> Self {
        let plane = h * w;
        SgaWeights {
            w: Tensor::from_fn(vec![DIRECTIONS, TERMS, h, w], |i| {
                if (i / plane) % TERMS == 0 { T::one() } else { T::zero() }
            }),
        }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.w
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.w.shape()[2], self.w.shape()[3])
    }

    fn at(&self, dir: usize, j: usize, i: usize) -> T {
        let (h, w) = self.spatial();
        self.w.data()[(dir * TERMS + j) * h * w + i]
    }

    /// Back-propagates a gradient on the weights to the `20×H×W` logits.
    pub fn logits_vjp(&self, grad_w: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self.spatial();
        let g = softmax_vjp(&self.w, 1, grad_w)?;
        g.reshape(vec![DIRECTIONS * TERMS, h, w])
    }
}

/// Guidance `F -> 32 -> 20` network.
#[derive(Clone, Debug, PartialEq)]
pub struct SgaGuidanceParams<T> {
    pub stack: ConvStack<T>,
}

impl<T: Real> SgaGuidanceParams<T> {
    pub fn init(guidance_channels: usize, rng: &mut impl Rng) -> Self {
        SgaGuidanceParams {
            stack: ConvStack::init(&[guidance_channels, 32, DIRECTIONS * TERMS], &[1, 1], rng),
        }
    }
}

pub fn sga_guidance_tape<T: Real>(guidance: &Tensor<T>, p: &SgaGuidanceParams<T>) -> Result<(SgaWeights<T>, StackTape<T>)> {
    if p.stack.out_channels() != DIRECTIONS * TERMS {
        return Err(Error::config("SGA guidance network must emit 20 channels"));
    }
    let (logits, tape) = p.stack.forward_tape(guidance)?;
    Ok((SgaWeights::from_logits(&logits)?, tape))
}

pub fn sga_guidance<T: Real>(guidance: &Tensor<T>, p: &SgaGuidanceParams<T>) -> Result<SgaWeights<T>> {
    Ok(sga_guidance_tape(guidance, p)?.0)
}

pub fn sga_guidance_vjp<T: Real>(
    p: &SgaGuidanceParams<T>,
    tape: &StackTape<T>,
    grad_logits: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<LayerGrads<T>>)> {
    p.stack.backward(tape, grad_logits)
}

fn check_shapes<T: Real>(cv: &Tensor<T>, w: &SgaWeights<T>) -> Result<(usize, usize, usize)> {
    let (d, h, wd) = cv.dims3()?;
    if d == 0 {
        return Err(Error::config("SGA needs at least one disparity"));
    }
    if w.spatial() != (h, wd) {
        return Err(Error::config(format!(
            "SGA weights are {:?}, volume is {h}x{wd}",
            w.spatial()
        )));
    }
    Ok((d, h, wd))
}

fn argmax<T: Real>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// One scanline forward: returns `L×D` outputs in scan order and the argmax
/// of each predecessor fiber (unused at `t = 0`).
fn line_forward<T: Real>(cv: &[T], w: &SgaWeights<T>, dir: Direction, line: usize, d: usize, h: usize, wd: usize) -> (Vec<T>, Vec<u32>) {
    let plane = h * wd;
    let (_, len) = dir.lines(h, wd);
    let k = dir.index();
    let mut out = vec![T::zero(); len * d];
    let mut idx = vec![0u32; len];
    for t in 0..len {
        let p = dir.pixel(line, t, h, wd);
        if t == 0 {
            for dd in 0..d {
                out[dd] = cv[dd * plane + p];
            }
            continue;
        }
        let (done, cur) = out.split_at_mut(t * d);
        let prev = &done[(t - 1) * d..];
        let m = argmax(prev);
        idx[t] = m as u32;
        let mx = prev[m];
        let [w0, w1, w2, w3, w4] = [0, 1, 2, 3, 4].map(|j| w.at(k, j, p));
        for dd in 0..d {
            let lo = prev[dd.saturating_sub(1)];
            let hi = prev[(dd + 1).min(d - 1)];
            cur[dd] = w0 * cv[dd * plane + p] + w1 * prev[dd] + w2 * lo + w3 * hi + w4 * mx;
        }
    }
    (out, idx)
}

/// Forward intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SgaTape<T> {
    /// Per-direction aggregated volumes `D×H×W`.
    pub directional: Vec<Tensor<T>>,
    /// Per-direction argmax of the predecessor fiber, `H×W`.
    pub pred_argmax: Vec<Vec<u32>>,
    /// Winning direction per entry, `D×H×W`.
    pub argdir: Vec<u8>,
}

fn direction_forward<T: Real>(cv: &Tensor<T>, w: &SgaWeights<T>, dir: Direction) -> Result<(Tensor<T>, Vec<u32>)> {
    let (d, h, wd) = check_shapes(cv, w)?;
    let (n, len) = dir.lines(h, wd);
    let plane = h * wd;
    let lines: Vec<(Vec<T>, Vec<u32>)> = (0..n)
        .into_par_iter()
        .map(|line| line_forward(cv.data(), w, dir, line, d, h, wd))
        .collect();
    let mut out = vec![T::zero(); d * plane];
    let mut idx = vec![0u32; plane];
    for (line, (vals, am)) in lines.into_iter().enumerate() {
        for t in 0..len {
            let p = dir.pixel(line, t, h, wd);
            idx[p] = am[t];
            for dd in 0..d {
                out[dd * plane + p] = vals[t * d + dd];
            }
        }
    }
    Ok((Tensor::new(vec![d, h, wd], out)?, idx))
}

/// Single-direction aggregation.
pub fn sga_direction<T: Real>(cv: &Tensor<T>, w: &SgaWeights<T>, dir: Direction) -> Result<Tensor<T>> {
    Ok(direction_forward(cv, w, dir)?.0)
}

pub fn sga_aggregate_tape<T: Real>(cv: &Tensor<T>, w: &SgaWeights<T>) -> Result<(Tensor<T>, SgaTape<T>)> {
    check_shapes(cv, w)?;
    let per: Vec<(Tensor<T>, Vec<u32>)> = Direction::ALL
        .par_iter()
        .map(|&dir| direction_forward(cv, w, dir))
        .collect::<Result<_>>()?;
    let n = cv.len();
    let mut out = per[0].0.data().to_vec();
    let mut argdir = vec![0u8; n];
    for (k, (vol, _)) in per.iter().enumerate().skip(1) {
        for (i, &v) in vol.data().iter().enumerate() {
            if v > out[i] {
                out[i] = v;
                argdir[i] = k as u8;
            }
        }
    }
    let (directional, pred_argmax) = per.into_iter().unzip();
    Ok((
        Tensor::new(cv.shape().to_vec(), out)?,
        SgaTape {
            directional,
            pred_argmax,
            argdir,
        },
    ))
}

/// Aggregated volume and the winning direction index per entry.
pub fn sga_aggregate<T: Real>(cv: &Tensor<T>, w: &SgaWeights<T>) -> Result<(Tensor<T>, Vec<u8>)> {
    let (out, tape) = sga_aggregate_tape(cv, w)?;
    Ok((out, tape.argdir))
}

/// Scanline backward in reverse order; returns the cost gradient (`L×D`,
/// scan order) and the weight gradient (`L×5`).
#[allow(clippy::too_many_arguments)]
fn line_backward<T: Real>(
    cv: &[T],
    w: &SgaWeights<T>,
    dir: Direction,
    line: usize,
    out: &[T],
    pred_argmax: &[u32],
    g_dir: &[T],
    d: usize,
    h: usize,
    wd: usize,
) -> (Vec<T>, Vec<T>) {
    let plane = h * wd;
    let (_, len) = dir.lines(h, wd);
    let k = dir.index();
    let mut acc = vec![T::zero(); len * d];
    for t in 0..len {
        let p = dir.pixel(line, t, h, wd);
        for dd in 0..d {
            acc[t * d + dd] = g_dir[dd * plane + p];
        }
    }
    let mut gcv = vec![T::zero(); len * d];
    let mut gw = vec![T::zero(); len * TERMS];
    for t in (0..len).rev() {
        let p = dir.pixel(line, t, h, wd);
        if t == 0 {
            gcv[..d].copy_from_slice(&acc[..d]);
            break;
        }
        let q = dir.pixel(line, t - 1, h, wd);
        let [w0, w1, w2, w3, w4] = [0, 1, 2, 3, 4].map(|j| w.at(k, j, p));
        let m = pred_argmax[p] as usize;
        let mx = out[m * plane + q];
        let (before, here) = acc.split_at_mut(t * d);
        let gp = &here[..d];
        let gprev = &mut before[(t - 1) * d..];
        let mut sw = [T::zero(); TERMS];
        let mut gsum = T::zero();
        for dd in 0..d {
            let g = gp[dd];
            let lo = dd.saturating_sub(1);
            let hi = (dd + 1).min(d - 1);
            gcv[t * d + dd] = w0 * g;
            sw[0] += g * cv[dd * plane + p];
            sw[1] += g * out[dd * plane + q];
            sw[2] += g * out[lo * plane + q];
            sw[3] += g * out[hi * plane + q];
            gsum += g;
            gprev[dd] += w1 * g;
            gprev[lo] += w2 * g;
            gprev[hi] += w3 * g;
        }
        sw[4] = gsum * mx;
        gprev[m] += w4 * gsum;
        gw[t * TERMS..(t + 1) * TERMS].copy_from_slice(&sw);
    }
    (gcv, gw)
}

#[derive(Clone, Debug)]
pub struct SgaGrads<T> {
    pub cv: Tensor<T>,
    /// Gradient on the normalized weights, `4×5×H×W`.
    pub weights: Tensor<T>,
    /// Gradient on the pre-softmax logits, `20×H×W`.
    pub logits: Tensor<T>,
}

pub fn sga_vjp_with_tape<T: Real>(cv: &Tensor<T>, w: &SgaWeights<T>, tape: &SgaTape<T>, upstream: &Tensor<T>) -> Result<SgaGrads<T>> {
    let (d, h, wd) = check_shapes(cv, w)?;
    if upstream.shape() != cv.shape() {
        return Err(Error::config("sga_vjp: upstream shape mismatch"));
    }
    let plane = h * wd;
    let per: Vec<(Vec<(Vec<T>, Vec<T>)>, Direction)> = Direction::ALL
        .par_iter()
        .map(|&dir| {
            let k = dir.index() as u8;
            let g_dir: Vec<T> = upstream
                .data()
                .iter()
                .zip(&tape.argdir)
                .map(|(&g, &a)| if a == k { g } else { T::zero() })
                .collect();
            let (n, _) = dir.lines(h, wd);
            let lines = (0..n)
                .into_par_iter()
                .map(|line| {
                    line_backward(
                        cv.data(),
                        w,
                        dir,
                        line,
                        tape.directional[dir.index()].data(),
                        &tape.pred_argmax[dir.index()],
                        &g_dir,
                        d,
                        h,
                        wd,
                    )
                })
                .collect();
            (lines, dir)
        })
        .collect();
    let mut gcv = vec![T::zero(); cv.len()];
    let mut gw = vec![T::zero(); DIRECTIONS * TERMS * plane];
    for (lines, dir) in per {
        let (_, len) = dir.lines(h, wd);
        let k = dir.index();
        for (line, (lc, lw)) in lines.into_iter().enumerate() {
            for t in 0..len {
                let p = dir.pixel(line, t, h, wd);
                for dd in 0..d {
                    gcv[dd * plane + p] += lc[t * d + dd];
                }
                for j in 0..TERMS {
                    gw[(k * TERMS + j) * plane + p] = lw[t * TERMS + j];
                }
            }
        }
    }
    let weights = Tensor::new(vec![DIRECTIONS, TERMS, h, wd], gw)?;
    Ok(SgaGrads {
        cv: Tensor::new(cv.shape().to_vec(), gcv)?,
        logits: w.logits_vjp(&weights)?,
        weights,
    })
}

pub fn sga_vjp<T: Real>(cv: &Tensor<T>, w: &SgaWeights<T>, upstream: &Tensor<T>) -> Result<SgaGrads<T>> {
    let (_, tape) = sga_aggregate_tape(cv, w)?;
    sga_vjp_with_tape(cv, w, &tape, upstream)
}

fn channel_views<T: Real>(cv4d: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let (c, d, h, w) = cv4d.dims4()?;
    let n = d * h * w;
    (0..c)
        .map(|ch| Tensor::new(vec![d, h, w], cv4d.data()[ch * n..(ch + 1) * n].to_vec()))
        .collect()
}

/// Aggregates every feature channel of a `C×D×H×W` volume with shared weights.
pub fn apply_to_4d<T: Real>(cv4d: &Tensor<T>, w: &SgaWeights<T>) -> Result<Tensor<T>> {
    let mut out = Vec::with_capacity(cv4d.len());
    for ch in channel_views(cv4d)? {
        out.extend(sga_aggregate(&ch, w)?.0.into_data());
    }
    Tensor::new(cv4d.shape().to_vec(), out)
}

/// Gradients of [`apply_to_4d`]; weight gradients are summed over channels.
pub fn apply_to_4d_vjp<T: Real>(cv4d: &Tensor<T>, w: &SgaWeights<T>, upstream: &Tensor<T>) -> Result<SgaGrads<T>> {
    if upstream.shape() != cv4d.shape() {
        return Err(Error::config("apply_to_4d_vjp: upstream shape mismatch"));
    }
    let (h, wd) = w.spatial();
    let mut gcv = Vec::with_capacity(cv4d.len());
    let mut gw = Tensor::zeros(vec![DIRECTIONS, TERMS, h, wd]);
    let gviews = channel_views(upstream)?;
    for (ch, g) in channel_views(cv4d)?.iter().zip(&gviews) {
        let grads = sga_vjp(ch, w, g)?;
        gcv.extend(grads.cv.into_data());
        gw.add_assign(&grads.weights)?;
    }
    Ok(SgaGrads {
        cv: Tensor::new(cv4d.shape().to_vec(), gcv)?,
        logits: w.logits_vjp(&gw)?,
        weights: gw,
    })
}
