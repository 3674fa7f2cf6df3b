//! The end-to-end stereo pipeline:
//! standardize → siamese features → correlation volume → filter →
//! soft argmin over the negated volume → upsample → smooth-L1.
//!
//! The correlation volume scores similarity (high at the match), so the
//! filtered volume is negated before regression.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost_volume::{build_correlation, correlation_vjp, CostVolume};
use crate::dfn::{dfn_apply_volume, dfn_generate_tape, dfn_generator_vjp, dfn_volume_vjp, DfnGeneratorParams};
use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::features::{check_divisible, embedding_loss_grad, EmbeddingParams, FeatureExtractorParams, LabelMap, DEFAULT_FEATURE_CHANNELS};
use crate::io::WeightsFile;
use crate::nn::LayerGrads;
use crate::pac::{pac_filter_volume, pac_volume_vjp, PacParams};
use crate::regression::{smooth_l1_grad, soft_argmin, soft_argmin_vjp, upsample_disparity, upsample_vjp, weighted_loss, LossWeights, WeightMode};
use crate::sabf::{SabfConfig, SabfField};
use crate::sga::{sga_aggregate_tape, sga_guidance_tape, sga_guidance_vjp, sga_vjp_with_tape, SgaGuidanceParams};
use crate::tensor::{Real, Tensor, WindowSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    None,
    Sabf,
    Dfn,
    Pac,
    #[default]
    Sga,
}

impl FilterKind {
    pub const ALL: [FilterKind; 5] = [FilterKind::None, FilterKind::Sabf, FilterKind::Dfn, FilterKind::Pac, FilterKind::Sga];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::None => "none",
            FilterKind::Sabf => "sabf",
            FilterKind::Dfn => "dfn",
            FilterKind::Pac => "pac",
            FilterKind::Sga => "sga",
        }
    }

    /// Whether the filter has parameters that must come from training.
    pub fn is_learned(self) -> bool {
        self != FilterKind::None
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown filter {s:?} (expected none|sabf|dfn|pac|sga)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub filter: FilterKind,
    /// Disparity range at input resolution.
    pub max_disp: usize,
    pub downsample: usize,
    pub window: WindowSpec,
    pub sigma_s: f64,
    pub sigma_r: f64,
    pub feature_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            filter: FilterKind::Sga,
            max_disp: 192,
            downsample: 2,
            window: WindowSpec::default(),
            sigma_s: 0.7,
            sigma_r: 0.1,
            feature_channels: DEFAULT_FEATURE_CHANNELS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 {
            return Err(Error::config("downsample factor must be at least 1"));
        }
        if self.max_disp < self.downsample || self.max_disp % self.downsample != 0 {
            return Err(Error::config(format!(
                "max disparity {} must be a positive multiple of the downsample factor {}",
                self.max_disp, self.downsample
            )));
        }
        if self.feature_channels == 0 {
            return Err(Error::config("feature channels must be positive"));
        }
        self.sabf()?;
        Ok(())
    }

    /// Disparity candidates at feature resolution.
    pub fn disparities(&self) -> usize {
        self.max_disp / self.downsample
    }

    pub fn sabf(&self) -> Result<SabfConfig> {
        SabfConfig::new(self.sigma_s, self.sigma_r, self.window)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FilterParams<T> {
    None,
    Sabf(EmbeddingParams<T>),
    Dfn(DfnGeneratorParams<T>),
    Pac(PacParams<T>),
    Sga(SgaGuidanceParams<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub features: FeatureExtractorParams<T>,
    pub filter: FilterParams<T>,
}

/// Per-channel standardization to zero mean and unit variance.
pub fn standardize<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = image.dims3()?;
    let plane = h * w;
    let mut out = image.data().to_vec();
    for ch in out.chunks_mut(plane).take(c) {
        let n = plane as f64;
        let mean = ch.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = ch.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        for v in ch.iter_mut() {
            *v = T::lit((v.as_f64() - mean) * inv);
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Mean over `k×k` blocks.
fn box_down<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if k == 1 {
        return Ok(x.clone());
    }
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (h / k, w / k);
    let inv = T::lit(1.0 / (k * k) as f64);
    let d = x.data();
    Ok(Tensor::from_fn(vec![c, oh, ow], |i| {
        let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let mut s = T::zero();
        for dy in 0..k {
            for dx in 0..k {
                s += d[(ch * h + y * k + dy) * w + xx * k + dx];
            }
        }
        s * inv
    }))
}

fn box_down_vjp<T: Real>(g: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if k == 1 {
        return Ok(g.clone());
    }
    let (c, oh, ow) = g.dims3()?;
    let (h, w) = (oh * k, ow * k);
    let inv = T::lit(1.0 / (k * k) as f64);
    let d = g.data();
    Ok(Tensor::from_fn(vec![c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        d[(ch * oh + y / k) * ow + x / k] * inv
    }))
}

/// Loss terms of one training evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub disparity: T,
    /// Mean pairwise embedding loss (SABF with labels only).
    pub embedding: Option<T>,
}

/// Result of [`Model::loss_and_grad`]; `grads` is aligned with
/// [`Model::param_names`].
#[derive(Clone, Debug)]
pub struct TrainingEval<T> {
    pub loss: LossBreakdown<T>,
    pub grads: Vec<Tensor<T>>,
    pub prediction: DisparityMap<T>,
}

fn stack_grads<T: Real>(g: Vec<LayerGrads<T>>) -> Vec<Tensor<T>> {
    g.into_iter().flat_map(|l| [l.weight, l.bias]).collect()
}

impl<T: Real> Model<T> {
    /// Seeded initialization. Parameters are drawn in 64-bit and cast, so
    /// `f32` and `f64` models built from one seed agree up to rounding.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = FeatureExtractorParams::<f64>::init(config.feature_channels, config.downsample, &mut rng);
        let f = config.feature_channels;
        let filter = match config.filter {
            FilterKind::None => FilterParams::None,
            FilterKind::Sabf => FilterParams::Sabf(EmbeddingParams::<f64>::init(&mut rng)),
            FilterKind::Dfn => FilterParams::Dfn(DfnGeneratorParams::<f64>::init(f, config.window, 1, &mut rng)),
            FilterKind::Pac => FilterParams::Pac(PacParams::<f64>::delta(1, config.window)),
            FilterKind::Sga => FilterParams::Sga(SgaGuidanceParams::<f64>::init(f, &mut rng)),
        };
        Ok(Model {
            config,
            features: FeatureExtractorParams {
                stack: features.stack.cast(),
            },
            filter: cast_filter(&filter),
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            features: FeatureExtractorParams {
                stack: self.features.stack.cast(),
            },
            filter: cast_filter(&self.filter),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.features.stack.param_names("feat");
        match &self.filter {
            FilterParams::None => {}
            FilterParams::Sabf(p) => names.extend(p.stack.param_names("emb")),
            FilterParams::Dfn(p) => names.extend(p.stack.param_names("dfn")),
            FilterParams::Pac(_) => names.extend(["pac.w".to_string(), "pac.b".to_string()]),
            FilterParams::Sga(p) => names.extend(p.stack.param_names("sga")),
        }
        names
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.features.stack.params_mut();
        match &mut self.filter {
            FilterParams::None => {}
            FilterParams::Sabf(p) => out.extend(p.stack.params_mut()),
            FilterParams::Dfn(p) => out.extend(p.stack.params_mut()),
            FilterParams::Pac(p) => out.extend([&mut p.weight, &mut p.bias]),
            FilterParams::Sga(p) => out.extend(p.stack.params_mut()),
        }
        out
    }

    pub fn to_weights(&self) -> Result<WeightsFile> {
        let mut wf = WeightsFile::default();
        self.features.stack.export("feat", &mut wf)?;
        match &self.filter {
            FilterParams::None => {}
            FilterParams::Sabf(p) => p.stack.export("emb", &mut wf)?,
            FilterParams::Dfn(p) => p.stack.export("dfn", &mut wf)?,
            FilterParams::Pac(p) => {
                wf.insert("pac.w", p.weight.cast())?;
                wf.insert("pac.b", p.bias.cast())?;
            }
            FilterParams::Sga(p) => p.stack.export("sga", &mut wf)?,
        }
        Ok(wf)
    }

    /// Builds the architecture for `config` and loads every tensor from `wf`.
    pub fn from_weights(config: ModelConfig, wf: &WeightsFile) -> Result<Self> {
        let mut m = Model::init(config, 0)?;
        m.features.stack.import("feat", wf)?;
        match &mut m.filter {
            FilterParams::None => {}
            FilterParams::Sabf(p) => p.stack.import("emb", wf)?,
            FilterParams::Dfn(p) => p.stack.import("dfn", wf)?,
            FilterParams::Pac(p) => {
                for (name, dst) in [("pac.w", &mut p.weight), ("pac.b", &mut p.bias)] {
                    let src = wf
                        .get(name)
                        .ok_or_else(|| Error::config(format!("weights file lacks tensor {name:?}")))?;
                    if src.shape() != dst.shape() {
                        return Err(Error::config(format!(
                            "tensor {name:?} has shape {:?}, expected {:?}",
                            src.shape(),
                            dst.shape()
                        )));
                    }
                    *dst = src.cast();
                }
            }
            FilterParams::Sga(p) => p.stack.import("sga", wf)?,
        }
        Ok(m)
    }

    fn check_pair(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<()> {
        let (c, h, w) = left.dims3()?;
        if left.shape() != right.shape() {
            return Err(Error::config(format!(
                "left image is {:?}, right image is {:?}",
                left.shape(),
                right.shape()
            )));
        }
        if c != 3 {
            return Err(Error::config(format!("expected 3-channel images, got {c}")));
        }
        check_divisible(h, w, self.config.downsample)
    }

    /// Full-resolution disparity for a raw image pair.
    pub fn predict(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<DisparityMap<T>> {
        Ok(self.run(left, right, None, false)?.prediction)
    }

    /// [`Model::predict`] with the wall time of every pipeline stage.
    pub fn predict_profiled(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<(DisparityMap<T>, Vec<(&'static str, Duration)>)> {
        self.check_pair(left, right)?;
        let cfg = &self.config;
        let mut times = Vec::with_capacity(5);
        let mut clock = Instant::now();
        let mut lap = |name: &'static str, times: &mut Vec<(&'static str, Duration)>| {
            let now = Instant::now();
            times.push((name, now - clock));
            clock = now;
        };
        let sl = standardize(left)?;
        let sr = standardize(right)?;
        lap("standardize", &mut times);
        let fl = self.features.stack.forward(&sl)?;
        let fr = self.features.stack.forward(&sr)?;
        lap("features", &mut times);
        let cv = build_correlation(&fl, &fr, cfg.disparities(), false)?;
        lap("correlation", &mut times);
        let state = FilterState::forward(&self.filter, cfg, &cv, &fl, &sl)?;
        lap("filter", &mut times);
        let coarse = soft_argmin(&state.output().scale(-T::one()))?;
        let prediction = upsample_disparity(&coarse, cfg.downsample)?;
        lap("regression", &mut times);
        Ok((prediction, times))
    }

    /// Loss and parameter gradients. `labels` enables the embedding loss on
    /// the SABF path.
    pub fn loss_and_grad(&self, left: &Tensor<T>, right: &Tensor<T>, gt: &DisparityMap<T>, labels: Option<&LabelMap>) -> Result<TrainingEval<T>> {
        self.run(left, right, Some((gt, labels)), true)
    }

    fn run(
        &self,
        left: &Tensor<T>,
        right: &Tensor<T>,
        target: Option<(&DisparityMap<T>, Option<&LabelMap>)>,
        want_grad: bool,
    ) -> Result<TrainingEval<T>> {
        self.check_pair(left, right)?;
        let cfg = &self.config;
        let k = cfg.downsample;
        let d = cfg.disparities();
        let sl = standardize(left)?;
        let sr = standardize(right)?;
        let (fl, tape_l) = self.features.stack.forward_tape(&sl)?;
        let (fr, tape_r) = self.features.stack.forward_tape(&sr)?;
        let cv = build_correlation(&fl, &fr, d, false)?;

        let state = FilterState::forward(&self.filter, cfg, &cv, &fl, &sl)?;
        let neg = state.output().scale(-T::one());
        let coarse = soft_argmin(&neg)?;
        let prediction = upsample_disparity(&coarse, k)?;

        let Some((gt, labels)) = target else {
            return Ok(TrainingEval {
                loss: LossBreakdown {
                    total: T::zero(),
                    disparity: T::zero(),
                    embedding: None,
                },
                grads: Vec::new(),
                prediction,
            });
        };
        let (disp_loss, g_full) = smooth_l1_grad(&prediction, gt)?;
        let emb = match (&state, labels) {
            (FilterState::Sabf { emb_full, .. }, Some(l)) => Some(embedding_loss_grad(emb_full, l)?),
            _ => None,
        };
        let loss = match &emb {
            Some((e, _)) => LossBreakdown {
                total: weighted_loss(&[disp_loss, e.mean()], &LossWeights::with_embedding(), WeightMode::Plain)?,
                disparity: disp_loss,
                embedding: Some(e.mean()),
            },
            None => LossBreakdown {
                total: disp_loss,
                disparity: disp_loss,
                embedding: None,
            },
        };
        if !want_grad {
            return Ok(TrainingEval {
                loss,
                grads: Vec::new(),
                prediction,
            });
        }

        let g_coarse = upsample_vjp(coarse.width(), coarse.height(), k, &g_full)?;
        let g_filtered = soft_argmin_vjp(&neg, &g_coarse)?.scale(-T::one());
        let emb_grad = emb.map(|(e, g)| {
            let w = LossWeights::with_embedding().coeffs()[1];
            let scale = if e.pairs == 0 { 0.0 } else { w / e.pairs as f64 };
            g.scale(T::lit(scale))
        });
        let back = state.backward(&self.filter, cfg, &cv, &g_filtered, emb_grad)?;

        let (mut g_fl, g_fr) = correlation_vjp(&fl, &fr, d, false, &back.cv)?;
        if let Some(g) = &back.guidance {
            g_fl.add_assign(g)?;
        }
        let (_, gl) = self.features.stack.backward(&tape_l, &g_fl)?;
        let (_, gr) = self.features.stack.backward(&tape_r, &g_fr)?;
        let mut grads = stack_grads(gl);
        for (a, b) in grads.iter_mut().zip(stack_grads(gr)) {
            a.add_assign(&b)?;
        }
        grads.extend(back.params);
        Ok(TrainingEval {
            loss,
            grads,
            prediction,
        })
    }
}

fn cast_filter<T: Real, U: Real>(f: &FilterParams<T>) -> FilterParams<U> {
    match f {
        FilterParams::None => FilterParams::None,
        FilterParams::Sabf(p) => FilterParams::Sabf(EmbeddingParams { stack: p.stack.cast() }),
        FilterParams::Dfn(p) => FilterParams::Dfn(DfnGeneratorParams { stack: p.stack.cast() }),
        FilterParams::Pac(p) => FilterParams::Pac(PacParams {
            weight: p.weight.cast(),
            bias: p.bias.cast(),
        }),
        FilterParams::Sga(p) => FilterParams::Sga(SgaGuidanceParams { stack: p.stack.cast() }),
    }
}

/// Forward intermediates of the filter stage.
enum FilterState<T> {
    None(Tensor<T>),
    Sabf {
        out: Tensor<T>,
        emb_full: Tensor<T>,
        emb: Tensor<T>,
        field: SabfField<T>,
        tape: crate::nn::StackTape<T>,
    },
    Dfn {
        out: Tensor<T>,
        filters: crate::dfn::DynamicFilters<T>,
        tape: crate::nn::StackTape<T>,
    },
    Pac {
        out: Tensor<T>,
        adapt: Tensor<T>,
    },
    Sga {
        out: Tensor<T>,
        weights: crate::sga::SgaWeights<T>,
        tape: crate::nn::StackTape<T>,
        sga: crate::sga::SgaTape<T>,
    },
}

struct FilterBackward<T> {
    cv: Tensor<T>,
    /// Extra gradient on the left features from the guidance branch.
    guidance: Option<Tensor<T>>,
    params: Vec<Tensor<T>>,
}

impl<T: Real> FilterState<T> {
    fn forward(p: &FilterParams<T>, cfg: &ModelConfig, cv: &CostVolume<T>, fl: &Tensor<T>, image: &Tensor<T>) -> Result<Self> {
        Ok(match p {
            FilterParams::None => FilterState::None(cv.data().clone()),
            FilterParams::Sabf(e) => {
                let (emb_full, tape) = e.stack.forward_tape(image)?;
                let emb = box_down(&emb_full, cfg.downsample)?;
                let field = SabfField::new(&emb, &cfg.sabf()?)?;
                let out = field.apply(cv.data())?;
                FilterState::Sabf {
                    out,
                    emb_full,
                    emb,
                    field,
                    tape,
                }
            }
            FilterParams::Dfn(g) => {
                let (filters, tape) = dfn_generate_tape(fl, g, cfg.window)?;
                let out = dfn_apply_volume(cv, &filters)?.into_data();
                FilterState::Dfn { out, filters, tape }
            }
            FilterParams::Pac(pp) => FilterState::Pac {
                out: pac_filter_volume(cv, fl, pp, cfg.window)?.into_data(),
                adapt: fl.clone(),
            },
            FilterParams::Sga(g) => {
                let (weights, tape) = sga_guidance_tape(fl, g)?;
                let (out, sga) = sga_aggregate_tape(cv.data(), &weights)?;
                FilterState::Sga { out, weights, tape, sga }
            }
        })
    }

    fn output(&self) -> &Tensor<T> {
        match self {
            FilterState::None(out)
            | FilterState::Sabf { out, .. }
            | FilterState::Dfn { out, .. }
            | FilterState::Pac { out, .. }
            | FilterState::Sga { out, .. } => out,
        }
    }

    fn backward(
        &self,
        p: &FilterParams<T>,
        cfg: &ModelConfig,
        cv: &CostVolume<T>,
        g: &Tensor<T>,
        emb_grad: Option<Tensor<T>>,
    ) -> Result<FilterBackward<T>> {
        Ok(match (self, p) {
            (FilterState::None(_), _) => FilterBackward {
                cv: g.clone(),
                guidance: None,
                params: Vec::new(),
            },
            (FilterState::Sabf { out, emb, field, tape, .. }, FilterParams::Sabf(e)) => {
                let (g_cv, g_emb) = field.vjp(cv.data(), out, emb, cfg.sigma_r, g)?;
                let mut g_full = box_down_vjp(&g_emb, cfg.downsample)?;
                if let Some(extra) = emb_grad {
                    g_full.add_assign(&extra)?;
                }
                let (_, lg) = e.stack.backward(tape, &g_full)?;
                FilterBackward {
                    cv: g_cv,
                    guidance: None,
                    params: stack_grads(lg),
                }
            }
            (FilterState::Dfn { filters, tape, .. }, FilterParams::Dfn(gen)) => {
                let (g_cv, g_logits) = dfn_volume_vjp(cv, filters, g)?;
                let (g_guid, lg) = dfn_generator_vjp(gen, tape, &g_logits)?;
                FilterBackward {
                    cv: g_cv,
                    guidance: Some(g_guid),
                    params: stack_grads(lg),
                }
            }
            (FilterState::Pac { adapt, .. }, FilterParams::Pac(pp)) => {
                let pg = pac_volume_vjp(cv, adapt, pp, cfg.window, g)?;
                FilterBackward {
                    cv: pg.slice,
                    guidance: Some(pg.adapt),
                    params: vec![pg.weight, pg.bias],
                }
            }
            (FilterState::Sga { weights, tape, sga, .. }, FilterParams::Sga(gp)) => {
                let sg = sga_vjp_with_tape(cv.data(), weights, sga, g)?;
                let (g_guid, lg) = sga_guidance_vjp(gp, tape, &sg.logits)?;
                FilterBackward {
                    cv: sg.cv,
                    guidance: Some(g_guid),
                    params: stack_grads(lg),
                }
            }
            _ => unreachable!("filter state built from these params"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config(filter: FilterKind) -> ModelConfig {
        ModelConfig {
            filter,
            max_disp: 4,
            downsample: 1,
            window: WindowSpec::new(3, 1).unwrap(),
            sigma_s: 0.7,
            sigma_r: 2.0,
            feature_channels: 4,
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn filter_names_round_trip() {
        for k in FilterKind::ALL {
            assert_eq!(k.name().parse::<FilterKind>().unwrap(), k);
        }
        assert!("gauss".parse::<FilterKind>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            max_disp: 7,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn standardize_moments() {
        let s = standardize(&image(5, 7, 1)).unwrap();
        for ch in s.data().chunks(35) {
            let m: f64 = ch.iter().sum::<f64>() / 35.0;
            let v: f64 = ch.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 35.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
        let flat = standardize(&Tensor::full(vec![3, 2, 2], 0.5f64)).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn box_down_adjoint() {
        let x = image(4, 6, 2);
        let g = image(2, 3, 3);
        let lhs = box_down(&x, 2).unwrap().dot(&g).unwrap();
        let rhs = x.dot(&box_down_vjp(&g, 2).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn weights_round_trip_every_filter() {
        for k in FilterKind::ALL {
            let m = Model::<f32>::init(small_config(k), 3).unwrap();
            let wf = m.to_weights().unwrap();
            assert_eq!(wf.entries().iter().map(|e| e.0.clone()).collect::<Vec<_>>(), m.param_names());
            let back = Model::<f32>::from_weights(small_config(k), &wf).unwrap();
            assert_eq!(back, m);
        }
        let wf = Model::<f32>::init(small_config(FilterKind::None), 3).unwrap().to_weights().unwrap();
        assert!(Model::<f32>::from_weights(small_config(FilterKind::Sga), &wf).is_err());
    }

    #[test]
    fn prediction_shape_and_range() {
        let cfg = ModelConfig {
            max_disp: 8,
            downsample: 2,
            ..small_config(FilterKind::Sga)
        };
        let m = Model::<f64>::init(cfg, 4).unwrap();
        let p = m.predict(&image(8, 12, 5), &image(8, 12, 6)).unwrap();
        assert_eq!((p.width(), p.height()), (12, 8));
        assert!(p.values().iter().all(|&v| (0.0..=6.0).contains(&v)));
    }

    /// Directional derivative of the full loss against the analytic gradient.
    #[test]
    fn loss_gradient_matches_difference() {
        for k in FilterKind::ALL {
            let cfg = small_config(k);
            let m = Model::<f64>::init(cfg, 7).unwrap();
            let (l, r) = (image(6, 8, 8), image(6, 8, 9));
            let gt = DisparityMap::constant(8, 6, 1.3);
            let labels = LabelMap::new(8, 6, (0..48).map(|i| u32::from(i % 8 > 3)).collect()).unwrap();
            let ev = m.loss_and_grad(&l, &r, &gt, Some(&labels)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let dirs: Vec<Tensor<f64>> = ev
                .grads
                .iter()
                .map(|g| Tensor::from_fn(g.shape().to_vec(), |_| rng.gen_range(-1.0..1.0)))
                .collect();
            let eps = 1e-6;
            let shifted = |s: f64| {
                let mut mm = m.clone();
                for (p, d) in mm.params_mut().into_iter().zip(&dirs) {
                    *p = p.add(&d.scale(s)).unwrap();
                }
                mm.loss_and_grad(&l, &r, &gt, Some(&labels)).unwrap().loss.total
            };
            let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            let an: f64 = ev.grads.iter().zip(&dirs).map(|(g, d)| g.dot(d).unwrap()).sum();
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{k}: fd {fd} vs analytic {an}");
        }
    }
}
