//! Direct-loop reference implementations shared by the integration tests.
//! Written against the defining formulas, not the production code paths.
#![allow(dead_code)]

use costfilter::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random `4×5×H×W` weights, normalized over the five terms.
pub fn random_sga_weights(rng: &mut impl Rng, h: usize, w: usize) -> Tensor<f64> {
    let plane = h * w;
    let mut data = vec![0.0; 20 * plane];
    for dir in 0..4 {
        for i in 0..plane {
            let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (j, r) in raw.iter().enumerate() {
                data[(dir * 5 + j) * plane + i] = r / s;
            }
        }
    }
    Tensor::new(vec![4, 5, h, w], data).unwrap()
}

/// Window offsets `(dy, dx)` in row-major tap order.
pub fn window(s: usize, r: usize) -> Vec<(isize, isize)> {
    let half = (s / 2) as isize;
    let r = r as isize;
    let mut out = Vec::new();
    for ky in -half..=half {
        for kx in -half..=half {
            out.push((ky * r, kx * r));
        }
    }
    out
}

fn inside(y: isize, x: isize, h: usize, w: usize) -> bool {
    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w
}

/// One direction of the scanline recursion, evaluated pixel by pixel by
/// walking back along `-r` to the image border and replaying forward.
/// `r = (du, dv)`; the predecessor of `(u, v)` is `(u - du, v - dv)`.
pub fn naive_sga_direction(cv: &Tensor<f64>, weights: &Tensor<f64>, dir: usize, r: (isize, isize)) -> Tensor<f64> {
    let s = cv.shape();
    let (d, h, w) = (s[0], s[1], s[2]);
    let c = |k: usize, v: usize, u: usize| cv.data()[(k * h + v) * w + u];
    let wt = |j: usize, v: usize, u: usize| weights.data()[((dir * 5 + j) * h + v) * w + u];
    let mut out = vec![0.0; d * h * w];
    for v0 in 0..h {
        for u0 in 0..w {
            // chain of pixels from the scanline start to (u0, v0)
            let mut chain = vec![(u0, v0)];
            let (mut u, mut v) = (u0 as isize, v0 as isize);
            loop {
                let (pu, pv) = (u - r.0, v - r.1);
                if !inside(pv, pu, h, w) {
                    break;
                }
                chain.push((pu as usize, pv as usize));
                u = pu;
                v = pv;
            }
            chain.reverse();
            let (su, sv) = chain[0];
            let mut prev: Vec<f64> = (0..d).map(|k| c(k, sv, su)).collect();
            for &(u, v) in &chain[1..] {
                let m = prev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let cur: Vec<f64> = (0..d)
                    .map(|k| {
                        let lo = if k == 0 { 0 } else { k - 1 };
                        let hi = if k + 1 == d { d - 1 } else { k + 1 };
                        wt(0, v, u) * c(k, v, u)
                            + wt(1, v, u) * prev[k]
                            + wt(2, v, u) * prev[lo]
                            + wt(3, v, u) * prev[hi]
                            + wt(4, v, u) * m
                    })
                    .collect();
                prev = cur;
            }
            for k in 0..d {
                out[(k * h + v0) * w + u0] = prev[k];
            }
        }
    }
    Tensor::new(vec![d, h, w], out).unwrap()
}

/// Elementwise maximum over the given directional results; the first
/// maximal entry wins.
pub fn naive_max(parts: &[Tensor<f64>]) -> (Tensor<f64>, Vec<u8>) {
    let n = parts[0].len();
    let mut out = vec![0.0; n];
    let mut arg = vec![0u8; n];
    for i in 0..n {
        let mut best = parts[0].data()[i];
        for (k, p) in parts.iter().enumerate().skip(1) {
            if p.data()[i] > best {
                best = p.data()[i];
                arg[i] = k as u8;
            }
        }
        out[i] = best;
    }
    (Tensor::new(parts[0].shape().to_vec(), out).unwrap(), arg)
}

/// Normalized bilateral filter with squared-L2 spatial and embedding terms.
/// `sigma_r = None` drops the range term (pure spatial Gaussian).
pub fn naive_bilateral(
    x: &Tensor<f64>,
    emb: Option<&Tensor<f64>>,
    sigma_s: f64,
    sigma_r: Option<f64>,
    s: usize,
    r: usize,
) -> Tensor<f64> {
    let sh = x.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut num = vec![0.0; c];
            let mut den = 0.0;
            for (dy, dx) in window(s, r) {
                let (yj, xj) = (y as isize + dy, xx as isize + dx);
                if !inside(yj, xj, h, w) {
                    continue;
                }
                let (yj, xj) = (yj as usize, xj as usize);
                let mut expo = -((dy * dy + dx * dx) as f64) / (2.0 * sigma_s * sigma_s);
                if let (Some(e), Some(sr)) = (emb, sigma_r) {
                    let ec = e.shape()[0];
                    let mut dist = 0.0;
                    for k in 0..ec {
                        let a = e.data()[(k * h + y) * w + xx];
                        let b = e.data()[(k * h + yj) * w + xj];
                        dist += (a - b) * (a - b);
                    }
                    expo -= dist / (2.0 * sr * sr);
                }
                let k = expo.exp();
                den += k;
                for ch in 0..c {
                    num[ch] += k * x.data()[(ch * h + yj) * w + xj];
                }
            }
            for ch in 0..c {
                out[(ch * h + y) * w + xx] = num[ch] / den;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

/// Per-pixel dynamic filtering; `theta` is `(C·taps)×H×W`, zero padding.
pub fn naive_dfn(x: &Tensor<f64>, theta: &Tensor<f64>, s: usize, r: usize) -> Tensor<f64> {
    let sh = x.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let offs = window(s, r);
    let taps = offs.len();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (t, &(dy, dx)) in offs.iter().enumerate() {
                    let (yj, xj) = (y as isize + dy, xx as isize + dx);
                    if !inside(yj, xj, h, w) {
                        continue;
                    }
                    let th = theta.data()[((ch * taps + t) * h + y) * w + xx];
                    acc += th * x.data()[(ch * h + yj as usize) * w + xj as usize];
                }
                out[(ch * h + y) * w + xx] = acc;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

/// Pixel-adaptive convolution with a Gaussian of adapting-feature
/// differences; `kernel` is `C_y×C_x×s×s`, zero padding.
pub fn naive_pac(x: &Tensor<f64>, adapt: &Tensor<f64>, kernel: &Tensor<f64>, bias: &[f64], s: usize, r: usize) -> Tensor<f64> {
    let sh = x.shape();
    let (cx, h, w) = (sh[0], sh[1], sh[2]);
    let cy = kernel.shape()[0];
    let fa = adapt.shape()[0];
    let offs = window(s, r);
    let mut out = vec![0.0; cy * h * w];
    for co in 0..cy {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias[co];
                for (t, &(dy, dx)) in offs.iter().enumerate() {
                    let (yj, xj) = (y as isize + dy, xx as isize + dx);
                    if !inside(yj, xj, h, w) {
                        continue;
                    }
                    let (yj, xj) = (yj as usize, xj as usize);
                    let mut dist = 0.0;
                    for k in 0..fa {
                        let a = adapt.data()[(k * h + y) * w + xx];
                        let b = adapt.data()[(k * h + yj) * w + xj];
                        dist += (a - b) * (a - b);
                    }
                    let kval = (-0.5 * dist).exp();
                    for ci in 0..cx {
                        let wv = kernel.data()[(co * cx + ci) * s * s + t];
                        acc += kval * wv * x.data()[(ci * h + yj) * w + xj];
                    }
                }
                out[(co * h + y) * w + xx] = acc;
            }
        }
    }
    Tensor::new(vec![cy, h, w], out).unwrap()
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
