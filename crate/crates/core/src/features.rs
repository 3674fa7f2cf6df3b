//! Unary matching features, the 64-d segmentation embedding and its
//! pairwise hinge loss.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::ConvStack;
use crate::tensor::{for_tap_rows, Real, Tensor};

pub const EMBEDDING_DIM: usize = 64;
pub const DEFAULT_FEATURE_CHANNELS: usize = 16;

/// Siamese 2-layer extractor `3 -> 16 -> F`; layer 1 carries the downsample stride.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractorParams<T> {
    pub stack: ConvStack<T>,
}

impl<T: Real> FeatureExtractorParams<T> {
    pub fn init(feature_channels: usize, downsample: usize, rng: &mut impl Rng) -> Self {
        FeatureExtractorParams {
            stack: ConvStack::init(&[3, 16, feature_channels], &[downsample, 1], rng),
        }
    }

    pub fn downsample(&self) -> usize {
        self.stack.layers[0].spec.stride
    }

    pub fn channels(&self) -> usize {
        self.stack.out_channels()
    }
}

pub fn check_divisible(h: usize, w: usize, k: usize) -> Result<()> {
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} is not divisible by downsample factor {k}"
        )));
    }
    Ok(())
}

/// `F×(H/k)×(W/k)` features. The same params are used for both views.
pub fn extract_features<T: Real>(image: &Tensor<T>, p: &FeatureExtractorParams<T>) -> Result<Tensor<T>> {
    let (_, h, w) = image.dims3()?;
    check_divisible(h, w, p.downsample())?;
    p.stack.forward(image)
}

/// Stride-1 embedding stack `3 -> 16 -> 16 -> 64`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams<T> {
    pub stack: ConvStack<T>,
}

impl<T: Real> EmbeddingParams<T> {
    pub fn init(rng: &mut impl Rng) -> Self {
        EmbeddingParams {
            stack: ConvStack::init(&[3, 16, 16, EMBEDDING_DIM], &[1, 1, 1], rng),
        }
    }
}

/// Full-resolution `64×H×W` embedding.
pub fn embed<T: Real>(image: &Tensor<T>, p: &EmbeddingParams<T>) -> Result<Tensor<T>> {
    p.stack.forward(image)
}

/// Hinge thresholds of the pairwise embedding loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margins {
    /// Same-label pairs are free below this L1 distance.
    pub alpha: f64,
    /// Different-label pairs are free above this L1 distance.
    pub beta: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Margins {
            alpha: 0.5,
            beta: 2.0,
        }
    }
}

fn l1<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum()
}

pub fn pair_loss<T: Real>(e_i: &[T], e_j: &[T], same_label: bool, m: Margins) -> T {
    let d = l1(e_i, e_j);
    let v = if same_label {
        d - T::lit(m.alpha)
    } else {
        T::lit(m.beta) - d
    };
    v.max(T::zero())
}

/// Integer label per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::config("label count does not match dimensions"));
        }
        Ok(LabelMap {
            width,
            height,
            labels,
        })
    }

    pub fn get(&self, u: usize, v: usize) -> u32 {
        self.labels[v * self.width + u]
    }
}

/// Dilations of the three overlapping 3×3 neighbourhood rings.
pub const RING_DILATIONS: [usize; 3] = [1, 2, 5];

/// All ordered neighbour offsets `(dy, dx)` of the three rings.
pub fn ring_offsets() -> Vec<(isize, isize)> {
    let mut out = Vec::with_capacity(24);
    for &r in &RING_DILATIONS {
        let r = r as isize;
        for dy in [-r, 0, r] {
            for dx in [-r, 0, r] {
                if dy != 0 || dx != 0 {
                    out.push((dy, dx));
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingLoss<T> {
    pub sum: T,
    pub pairs: usize,
}

impl<T: Real> EmbeddingLoss<T> {
    pub fn mean(&self) -> T {
        if self.pairs == 0 {
            T::zero()
        } else {
            self.sum / T::lit(self.pairs as f64)
        }
    }
}

fn check_labels<T: Real>(emb: &Tensor<T>, labels: &LabelMap) -> Result<(usize, usize, usize)> {
    let (c, h, w) = emb.dims3()?;
    if labels.width != w || labels.height != h {
        return Err(Error::config(format!(
            "labels are {}x{}, embedding is {w}x{h}",
            labels.width, labels.height
        )));
    }
    Ok((c, h, w))
}

/// Sum of [`pair_loss`] over ordered pairs `(i, j)` with `j` in the three
/// dilated rings of `i`; out-of-image neighbours are skipped.
pub fn embedding_loss<T: Real>(emb: &Tensor<T>, labels: &LabelMap) -> Result<EmbeddingLoss<T>> {
    Ok(embedding_loss_impl(emb, labels, Margins::default(), false)?.0)
}

/// [`embedding_loss`] together with the (sub)gradient of its sum w.r.t. `emb`.
pub fn embedding_loss_grad<T: Real>(emb: &Tensor<T>, labels: &LabelMap) -> Result<(EmbeddingLoss<T>, Tensor<T>)> {
    let (loss, grad) = embedding_loss_impl(emb, labels, Margins::default(), true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn embedding_loss_impl<T: Real>(
    emb: &Tensor<T>,
    labels: &LabelMap,
    m: Margins,
    want_grad: bool,
) -> Result<(EmbeddingLoss<T>, Option<Tensor<T>>)> {
    let (c, h, w) = check_labels(emb, labels)?;
    let plane = h * w;
    let e = emb.data();
    let lab = &labels.labels;
    let offsets = ring_offsets();
    let (alpha, beta) = (T::lit(m.alpha), T::lit(m.beta));
    // per offset: the hinge slope (+1, -1 or 0) at every pixel, the loss sum
    // and the pair count
    let per_offset: Vec<(Vec<T>, T, usize)> = offsets
        .par_iter()
        .map(|&(dy, dx)| {
            let mut d = vec![T::zero(); plane];
            for ch in 0..c {
                let ep = &e[ch * plane..(ch + 1) * plane];
                for_tap_rows(dy, dx, h, w, |r, j0| {
                    let n = r.len();
                    for ((acc, &a), &b) in d[r.clone()].iter_mut().zip(&ep[r]).zip(&ep[j0..j0 + n]) {
                        *acc += (a - b).abs();
                    }
                });
            }
            let mut slope = vec![T::zero(); plane];
            let mut sum = T::zero();
            let mut pairs = 0;
            for_tap_rows(dy, dx, h, w, |r, j0| {
                pairs += r.len();
                for (k, i) in r.enumerate() {
                    let same = lab[i] == lab[j0 + k];
                    let di = d[i];
                    if same && di > alpha {
                        sum += di - alpha;
                        slope[i] = T::one();
                    } else if !same && di < beta {
                        sum += beta - di;
                        slope[i] = -T::one();
                    }
                }
            });
            (slope, sum, pairs)
        })
        .collect();
    let sum = per_offset.iter().fold(T::zero(), |acc, p| acc + p.1);
    let pairs = per_offset.iter().map(|p| p.2).sum();
    let grad = if want_grad {
        let mut g = vec![T::zero(); c * plane];
        g.par_chunks_mut(plane).enumerate().for_each(|(ch, dst)| {
            let ep = &e[ch * plane..(ch + 1) * plane];
            let mut sg = vec![T::zero(); w];
            for (&(dy, dx), (slope, _, _)) in offsets.iter().zip(&per_offset) {
                for_tap_rows(dy, dx, h, w, |r, j0| {
                    let n = r.len();
                    let it = sg[..n].iter_mut().zip(&slope[r.clone()]).zip(&ep[r.clone()]);
                    for (((o, &s), &a), &b) in it.zip(&ep[j0..j0 + n]) {
                        let pos = if a > b { s } else { T::zero() };
                        let neg = if a < b { s } else { T::zero() };
                        *o = pos - neg;
                    }
                    for (d, &v) in dst[r].iter_mut().zip(&sg[..n]) {
                        *d += v;
                    }
                    for (d, &v) in dst[j0..j0 + n].iter_mut().zip(&sg[..n]) {
                        *d -= v;
                    }
                });
            }
        });
        Some(Tensor::new(emb.shape().to_vec(), g)?)
    } else {
        None
    };
    Ok((EmbeddingLoss { sum, pairs }, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, Conv2dSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pair_loss_examples() {
        let m = Margins::default();
        let a = [0.0f64, 0.0];
        assert_eq!(pair_loss(&a, &[0.1, 0.2], true, m), 0.0);
        assert!((pair_loss(&a, &[0.7, -0.5], false, m) - 0.8).abs() < 1e-12);
        assert_eq!(pair_loss(&a, &[0.25, 0.25], true, m), 0.0);
        assert!((pair_loss(&a, &[1.0, 0.0], true, m) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn embedding_loss_constant_uniform() {
        let emb = Tensor::full(vec![64, 4, 5], 0.3f64);
        let labels = LabelMap::new(5, 4, vec![1; 20]).unwrap();
        let l = embedding_loss(&emb, &labels).unwrap();
        assert_eq!(l.sum, 0.0);
        assert!(l.pairs > 0);
    }

    #[test]
    fn embedding_loss_two_pixels() {
        let emb = Tensor::full(vec![64, 1, 2], 1.0f64);
        let labels = LabelMap::new(2, 1, vec![0, 1]).unwrap();
        let l = embedding_loss(&emb, &labels).unwrap();
        assert_eq!(l.pairs, 2);
        assert_eq!(l.sum, 4.0);
    }

    #[test]
    fn embedding_loss_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w, c) = (6, 6, 5);
        let emb = Tensor::from_fn(vec![c, h, w], |_| rng.gen_range(-1.0..1.0));
        let labels = LabelMap::new(w, h, (0..36).map(|_| rng.gen_range(0..2)).collect()).unwrap();
        // all ordered pixel pairs, keeping those on one of the rings
        let mut expect = 0.0;
        let mut pairs = 0;
        for i in 0..h * w {
            for j in 0..h * w {
                let (yi, xi) = ((i / w) as isize, (i % w) as isize);
                let (yj, xj) = ((j / w) as isize, (j % w) as isize);
                let (dy, dx) = (yj - yi, xj - xi);
                let mult = RING_DILATIONS
                    .iter()
                    .filter(|&&r| {
                        let r = r as isize;
                        (dy, dx) != (0, 0) && [-r, 0, r].contains(&dy) && [-r, 0, r].contains(&dx)
                    })
                    .count();
                let ei: Vec<f64> = (0..c).map(|ch| emb.data()[ch * 36 + i]).collect();
                let ej: Vec<f64> = (0..c).map(|ch| emb.data()[ch * 36 + j]).collect();
                let same = labels.labels[i] == labels.labels[j];
                expect += mult as f64 * pair_loss(&ei, &ej, same, Margins::default());
                pairs += mult;
            }
        }
        let l = embedding_loss(&emb, &labels).unwrap();
        assert_eq!(l.pairs, pairs);
        assert!((l.sum - expect).abs() < 1e-9);
    }

    #[test]
    fn embedding_loss_grad_matches_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let emb = Tensor::from_fn(vec![3, 5, 5], |_| rng.gen_range(-1.0f64..1.0));
        let labels = LabelMap::new(5, 5, (0..25).map(|i| u32::from(i % 5 > 2)).collect()).unwrap();
        let (l, g) = embedding_loss_grad(&emb, &labels).unwrap();
        let dir = Tensor::from_fn(emb.shape().to_vec(), |_| rng.gen_range(-1.0..1.0));
        let eps = 1e-7;
        let l2 = embedding_loss(&emb.add(&dir.scale(eps)).unwrap(), &labels).unwrap();
        let fd = (l2.sum - l.sum) / eps;
        assert!((fd - g.dot(&dir).unwrap()).abs() < 1e-4);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = FeatureExtractorParams::<f32>::init(8, 2, &mut rng);
        let f = extract_features(&Tensor::zeros(vec![3, 6, 8]), &p).unwrap();
        assert_eq!(f.shape(), &[8, 3, 4]);
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            extract_features(&Tensor::zeros(vec![3, 5, 8]), &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn features_match_layerwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = FeatureExtractorParams::<f64>::init(4, 1, &mut rng);
        let img = Tensor::from_fn(vec![3, 5, 6], |_| rng.gen_range(0.0..1.0));
        let f = extract_features(&img, &p).unwrap();
        let l = &p.stack.layers;
        let h = conv2d(&img, &l[0].weight, l[0].bias.data(), Conv2dSpec::same(3, 1))
            .unwrap()
            .map(|v| v.max(0.0));
        let o = conv2d(&h, &l[1].weight, l[1].bias.data(), Conv2dSpec::same(3, 1)).unwrap();
        assert!(f.max_abs_diff(&o).unwrap() < 1e-12);
    }

    #[test]
    fn embedding_is_shift_equivariant_in_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EmbeddingParams::<f64>::init(&mut rng);
        let (h, w, shift) = (8, 14, 2);
        let img = Tensor::from_fn(vec![3, h, w], |_| rng.gen_range(0.0..1.0));
        // shifted[x] = img[x - shift], zero on the left
        let shifted = Tensor::from_fn(vec![3, h, w], |i| {
            let x = i % w;
            if x >= shift { img.data()[i - shift] } else { 0.0 }
        });
        let a = embed(&img, &p).unwrap();
        let b = embed(&shifted, &p).unwrap();
        assert_eq!(a.shape(), &[64, h, w]);
        let margin = 3; // three 3x3 layers
        for c in 0..64 {
            for y in 0..h {
                for x in shift + margin..w - margin {
                    let va = a.data()[(c * h + y) * w + x - shift];
                    let vb = b.data()[(c * h + y) * w + x];
                    if y >= margin && y < h - margin {
                        assert!((va - vb).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
