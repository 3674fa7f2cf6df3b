//! Synthetic training data and the momentum-SGD loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::features::{embedding_loss_grad, ring_offsets, EmbeddingParams, LabelMap};
use crate::metrics::epe;
use crate::model::{standardize, FilterKind, Model, ModelConfig};
use crate::tensor::{neighbor, Real, Tensor, WindowSpec};

/// Random-dot stereogram: textured background at disparity 0 and a central
/// square at disparity `disparity`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereogramSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub disparity: usize,
    /// Square side as a fraction of `min(height, width)`.
    pub fraction: f64,
    /// Amplitude of the uniform per-view noise.
    pub noise: f64,
}

impl Default for StereogramSpec {
    fn default() -> Self {
        StereogramSpec {
            seed: 7,
            height: 64,
            width: 128,
            disparity: 6,
            fraction: 0.5,
            noise: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stereogram {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub gt: DisparityMap<f32>,
    /// 1 inside the square, 0 elsewhere (left view).
    pub labels: LabelMap,
}

impl StereogramSpec {
    /// Top-left corner and side of the square.
    pub fn square(&self) -> Result<(usize, usize, usize)> {
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::config(format!("square fraction {} is outside (0, 1)", self.fraction)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise amplitude must be finite and nonnegative"));
        }
        let side = (self.fraction * self.height.min(self.width) as f64).round() as usize;
        if side == 0 {
            return Err(Error::config("square is empty at this size"));
        }
        let y0 = (self.height - side) / 2;
        let x0 = (self.width - side) / 2;
        if x0 < self.disparity || x0 + side + self.disparity > self.width {
            return Err(Error::config(format!(
                "square of side {side} with disparity {} does not fit in width {}",
                self.disparity, self.width
            )));
        }
        Ok((x0, y0, side))
    }
}

pub fn make_stereogram(spec: &StereogramSpec) -> Result<Stereogram> {
    let (x0, y0, side) = spec.square()?;
    let (h, w, dl) = (spec.height, spec.width, spec.disparity);
    let plane = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut left: Vec<f32> = (0..3 * plane).map(|_| rng.gen::<f32>()).collect();
    let mut right = left.clone();
    let in_square = |u: usize, v: usize| (y0..y0 + side).contains(&v) && (x0..x0 + side).contains(&u);

    for v in y0..y0 + side {
        for ch in 0..3 {
            let row = ch * plane + v * w;
            for u in x0..x0 + side {
                right[row + u - dl] = left[row + u];
            }
            // background revealed in the right view only
            for u in x0 + side - dl..x0 + side {
                right[row + u] = rng.gen::<f32>();
            }
        }
    }

    let mut values = vec![0.0f32; plane];
    let mut valid = vec![true; plane];
    let mut labels = vec![0u32; plane];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if in_square(u, v) {
                values[i] = dl as f32;
                labels[i] = 1;
            } else if (y0..y0 + side).contains(&v) && u + dl >= x0 && u < x0 {
                // background hidden behind the shifted square in the right view
                valid[i] = false;
            }
        }
    }

    if spec.noise > 0.0 {
        let a = spec.noise as f32;
        for x in left.iter_mut() {
            *x += rng.gen_range(-a..=a);
        }
        for x in right.iter_mut() {
            *x += rng.gen_range(-a..=a);
        }
    }
    Ok(Stereogram {
        left: Tensor::new(vec![3, h, w], left)?,
        right: Tensor::new(vec![3, h, w], right)?,
        gt: DisparityMap::new(w, h, values, valid)?,
        labels: LabelMap::new(w, h, labels)?,
    })
}

/// Straight boundary `u = a + b·v`; pixels with `u >= a + b·v` get label 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentationBoundary {
    pub a: f64,
    pub b: f64,
}

pub const SEGMENTATION_NOISE: f64 = 0.05;

pub fn make_segmentation_toy(seed: u64, height: usize, width: usize) -> Result<(Tensor<f32>, LabelMap)> {
    let (img, labels, _) = make_segmentation_toy_with(seed, height, width, SEGMENTATION_NOISE)?;
    Ok((img, labels))
}

/// Two-region image with a seeded colour per region and per-pixel noise.
pub fn make_segmentation_toy_with(seed: u64, height: usize, width: usize, noise: f64) -> Result<(Tensor<f32>, LabelMap, SegmentationBoundary)> {
    if height == 0 || width < 2 {
        return Err(Error::config("segmentation toy needs at least a 1x2 image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(-0.5..=0.5);
    let a = rng.gen_range(0.3 * width as f64..=0.7 * width as f64);
    let c0: [f64; 3] = rng.gen();
    let mut c1: [f64; 3] = rng.gen();
    // keep the two colours clearly apart
    while c0.iter().zip(&c1).map(|(x, y)| (x - y).abs()).sum::<f64>() < 0.6 {
        c1 = rng.gen();
    }
    let plane = height * width;
    let labels: Vec<u32> = (0..plane)
        .map(|i| u32::from((i % width) as f64 >= a + b * (i / width) as f64))
        .collect();
    let mut img = vec![0.0f32; 3 * plane];
    for ch in 0..3 {
        for i in 0..plane {
            let base = if labels[i] == 1 { c1[ch] } else { c0[ch] };
            let n = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
            img[ch * plane + i] = (base + n) as f32;
        }
    }
    Ok((
        Tensor::new(vec![3, height, width], img)?,
        LabelMap::new(width, height, labels)?,
        SegmentationBoundary { a, b },
    ))
}

/// `v' = momentum·v + g`, `p' = p - lr·v'`, in place.
pub fn sgd_step<T: Real>(params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], velocity: &mut [Tensor<T>], lr: T, momentum: T) -> Result<()> {
    if params.len() != grads.len() || grads.len() != velocity.len() {
        return Err(Error::config("parameter, gradient and velocity lists differ in length"));
    }
    for ((p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || g.shape() != v.shape() {
            return Err(Error::config("parameter and gradient shapes differ"));
        }
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

pub fn zero_velocity<T: Real>(grads_like: &[&mut Tensor<T>]) -> Vec<Tensor<T>> {
    grads_like.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
    pub stereogram: StereogramSpec,
}

impl TrainConfig {
    /// Desk-scale setting: 64×128 stereogram, 16 disparities, full resolution.
    pub fn standard(filter: FilterKind) -> Self {
        TrainConfig {
            model: ModelConfig {
                filter,
                max_disp: 16,
                downsample: 1,
                window: WindowSpec::default(),
                ..ModelConfig::default()
            },
            steps: 2000,
            lr: 0.01,
            momentum: 0.9,
            init_seed: 7,
            stereogram: StereogramSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(Error::config("training needs at least one step"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.stereogram.disparity >= self.model.max_disp {
            return Err(Error::config(format!(
                "stereogram disparity {} is outside the range {}",
                self.stereogram.disparity, self.model.max_disp
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Loss at every step, evaluated before that step's update.
    pub losses: Vec<f64>,
    /// Training-pair EPE after the last update.
    pub final_epe: f64,
    pub data: Stereogram,
}

pub fn train_pipeline(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_pipeline_with(cfg, |_, _| {})
}

/// [`train_pipeline`] with a per-step `(step, loss)` observer.
pub fn train_pipeline_with(cfg: &TrainConfig, mut observe: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = make_stereogram(&cfg.stereogram)?;
    let mut model = Model::<f32>::init(cfg.model, cfg.init_seed)?;
    let labels = (cfg.model.filter == FilterKind::Sabf).then_some(&data.labels);
    let mut velocity = zero_velocity(&model.params_mut());
    let mut losses = Vec::with_capacity(cfg.steps);
    let (lr, mom) = (cfg.lr as f32, cfg.momentum as f32);
    for step in 0..cfg.steps {
        let ev = model.loss_and_grad(&data.left, &data.right, &data.gt, labels)?;
        let loss = ev.loss.total as f64;
        if !loss.is_finite() || ev.grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Training {
                step,
                msg: format!("loss became {loss}"),
            });
        }
        losses.push(loss);
        observe(step, loss);
        sgd_step(model.params_mut(), &ev.grads, &mut velocity, lr, mom)?;
    }
    let pred = model.predict(&data.left, &data.right)?;
    let final_epe = epe(&pred, &data.gt, None)?;
    Ok(TrainOutcome {
        model,
        losses,
        final_epe,
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingTrainConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for EmbeddingTrainConfig {
    fn default() -> Self {
        EmbeddingTrainConfig {
            seed: 3,
            height: 24,
            width: 32,
            steps: 500,
            lr: 0.05,
            momentum: 0.9,
        }
    }
}

/// Trains the embedding network alone on one segmentation toy image by
/// descending the mean pairwise loss. Returns the parameters and losses.
pub fn train_embedding(cfg: &EmbeddingTrainConfig) -> Result<(EmbeddingParams<f32>, Vec<f64>)> {
    if cfg.steps == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::config("embedding training needs steps >= 1 and lr >= 0"));
    }
    let (img, labels) = make_segmentation_toy(cfg.seed, cfg.height, cfg.width)?;
    let x = standardize(&img)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let p64 = EmbeddingParams::<f64>::init(&mut rng);
    let mut p = EmbeddingParams { stack: p64.stack.cast::<f32>() };
    let mut velocity = zero_velocity(&p.stack.params_mut());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (emb, tape) = p.stack.forward_tape(&x)?;
        let (loss, g) = embedding_loss_grad(&emb, &labels)?;
        let mean = loss.mean() as f64;
        if !mean.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("embedding loss became {mean}"),
            });
        }
        losses.push(mean);
        let g = g.scale(1.0 / loss.pairs.max(1) as f32);
        let (_, lg) = p.stack.backward(&tape, &g)?;
        let grads: Vec<Tensor<f32>> = lg.into_iter().flat_map(|l| [l.weight, l.bias]).collect();
        sgd_step(p.stack.params_mut(), &grads, &mut velocity, cfg.lr as f32, cfg.momentum as f32)?;
    }
    Ok((p, losses))
}

/// Mean L1 embedding distance over same-label and different-label ring
/// neighbour pairs.
pub fn embedding_separation<T: Real>(emb: &Tensor<T>, labels: &LabelMap) -> Result<(f64, f64)> {
    let (c, h, w) = emb.dims3()?;
    if labels.width != w || labels.height != h {
        return Err(Error::config("labels do not match the embedding"));
    }
    let plane = h * w;
    let e = emb.data();
    let (mut intra, mut ni, mut inter, mut no) = (0.0, 0usize, 0.0, 0usize);
    let offsets = ring_offsets();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for &(dy, dx) in &offsets {
                let Some(j) = neighbor(y, x, dy, dx, h, w) else { continue };
                let d: f64 = (0..c).map(|ch| (e[ch * plane + i] - e[ch * plane + j]).abs().as_f64()).sum();
                if labels.labels[i] == labels.labels[j] {
                    intra += d;
                    ni += 1;
                } else {
                    inter += d;
                    no += 1;
                }
            }
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::domain("need both same-label and different-label pairs"));
    }
    Ok((intra / ni as f64, inter / no as f64))
}
