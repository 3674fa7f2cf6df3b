//! Finite-difference certification of the hand-written backward passes.
//!
//! Every registered op draws seeded 64-bit inputs and a random cotangent `g`,
//! then compares its analytic VJP against central differences of `⟨g, f(x)⟩`.
//! Ops with piecewise branches (max, ReLU, the smooth-L1 kink) expose a branch
//! signature; a finite-difference step that changes it is discarded and the
//! inputs are re-drawn with seeded jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cost_volume::{build_correlation, correlation_vjp, project_4d_to_3d, project_vjp, CostVolume};
use crate::dfn::{dfn_apply, dfn_generate_tape, dfn_generator_vjp, dfn_vjp, DfnGeneratorParams};
use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::nn::{ConvLayer, ConvStack};
use crate::pac::{pac_filter, pac_vjp, PacParams};
use crate::regression::{smooth_l1_grad, soft_argmin, soft_argmin_vjp};
use crate::sabf::{sabf_filter, sabf_vjp, SabfConfig};
use crate::sga::{sga_aggregate_tape, sga_vjp, SgaWeights};
use crate::tensor::{conv2d, conv2d_vjp, softmax, softmax_vjp, Conv2dSpec, Tensor, WindowSpec};

pub const FD_STEP: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_ABS_FLOOR: f64 = 1e-8;
/// Magnitude of the seeded tie-breaking noise.
pub const JITTER: f64 = 1e-2;
const MAX_ATTEMPTS: usize = 8;

/// Seeded inputs of one check. `variant` selects per-seed op settings.
#[derive(Clone, Debug)]
pub struct Sample {
    pub variant: u64,
    pub names: Vec<&'static str>,
    pub inputs: Vec<Tensor<f64>>,
    /// Non-differentiated data such as ground truth.
    pub fixed: Vec<Tensor<f64>>,
}

/// A forward function paired with its VJP.
pub trait DiffOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn sample(&self, seed: u64) -> Sample;
    fn forward(&self, s: &Sample, x: &[Tensor<f64>]) -> Result<Tensor<f64>>;
    fn vjp(&self, s: &Sample, x: &[Tensor<f64>], cotangent: &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;
    /// Discrete state of every piecewise branch taken at `x`.
    fn branches(&self, _s: &Sample, _x: &[Tensor<f64>]) -> Result<Vec<u32>> {
        Ok(Vec::new())
    }
    /// Whether the op contains a max and always needs tie jitter.
    fn has_max(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InputReport {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub seed: u64,
    pub inputs: Vec<InputReport>,
    pub jitter: bool,
    pub pass: bool,
    pub error: Option<String>,
}

/// Central differences of `⟨cotangent, f(x)⟩` for every scalar input
/// coordinate.
pub fn fd_gradient(
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
    cotangent: &Tensor<f64>,
    h: f64,
) -> Result<Vec<Tensor<f64>>> {
    fd_guarded(&|x| Ok(Some(contract(&f(x)?, cotangent)?)), inputs, h)?
        .ok_or_else(|| Error::domain("unexpected branch change"))
}

fn contract(y: &Tensor<f64>, g: &Tensor<f64>) -> Result<f64> {
    if y.shape() != g.shape() {
        return Err(Error::config(format!("cotangent {:?} for output {:?}", g.shape(), y.shape())));
    }
    let v = y.dot(g)?;
    if !v.is_finite() {
        return Err(Error::domain("non-finite forward value"));
    }
    Ok(v)
}

/// `Ok(None)` when `eval` reports a branch change at some perturbed point.
fn fd_guarded(
    eval: &dyn Fn(&[Tensor<f64>]) -> Result<Option<f64>>,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<Option<Vec<Tensor<f64>>>> {
    let mut x = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for a in 0..inputs.len() {
        let mut g = vec![0.0; inputs[a].len()];
        for (k, gk) in g.iter_mut().enumerate() {
            let x0 = inputs[a].data()[k];
            x[a].data_mut()[k] = x0 + h;
            let Some(fp) = eval(&x)? else { return Ok(None) };
            x[a].data_mut()[k] = x0 - h;
            let Some(fm) = eval(&x)? else { return Ok(None) };
            x[a].data_mut()[k] = x0;
            *gk = (fp - fm) / (2.0 * h);
        }
        grads.push(Tensor::new(inputs[a].shape().to_vec(), g)?);
    }
    Ok(Some(grads))
}

fn jitter(inputs: &mut [Tensor<f64>], rng: &mut ChaCha8Rng) {
    for t in inputs {
        for v in t.data_mut() {
            *v += rng.gen_range(-JITTER..JITTER);
        }
    }
}

fn compare(name: &str, a: &Tensor<f64>, n: &Tensor<f64>, tol: f64, abs_floor: f64) -> Result<InputReport> {
    if a.shape() != n.shape() {
        return Err(Error::config(format!(
            "{name}: analytic gradient {:?} for input {:?}",
            a.shape(),
            n.shape()
        )));
    }
    let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(n.data()) {
        let d = (x - y).abs();
        max_abs = max_abs.max(d);
        max_rel = max_rel.max(d / x.abs().max(y.abs()).max(abs_floor));
    }
    if !(max_rel.is_finite() && max_abs.is_finite()) {
        return Err(Error::domain(format!("{name}: non-finite gradient")));
    }
    Ok(InputReport {
        name: name.to_string(),
        max_rel,
        max_abs,
        pass: max_rel <= tol || max_abs <= abs_floor,
    })
}

fn check_inner(op: &dyn DiffOp, seed: u64, tol: f64, abs_floor: f64, jittered: &mut bool) -> Result<Vec<InputReport>> {
    let mut s = op.sample(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x6a09_e667);
    if op.has_max() {
        jitter(&mut s.inputs, &mut rng);
        *jittered = true;
    }
    for _ in 0..MAX_ATTEMPTS {
        let x = s.inputs.clone();
        let y = op.forward(&s, &x)?;
        let cot = Tensor::from_fn(y.shape().to_vec(), |_| rng.gen_range(-1.0..1.0));
        let base = op.branches(&s, &x)?;
        let eval = |p: &[Tensor<f64>]| -> Result<Option<f64>> {
            if op.branches(&s, p)? != base {
                return Ok(None);
            }
            Ok(Some(contract(&op.forward(&s, p)?, &cot)?))
        };
        let Some(numeric) = fd_guarded(&eval, &x, FD_STEP)? else {
            jitter(&mut s.inputs, &mut rng);
            *jittered = true;
            continue;
        };
        let analytic = op.vjp(&s, &x, &cot)?;
        if analytic.len() != x.len() {
            return Err(Error::config(format!("{}: VJP returned {} gradients for {} inputs", op.name(), analytic.len(), x.len())));
        }
        return s
            .names
            .iter()
            .zip(analytic.iter().zip(&numeric))
            .map(|(name, (a, n))| compare(name, a, n, tol, abs_floor))
            .collect();
    }
    Err(Error::domain(format!("could not avoid a branch change in {MAX_ATTEMPTS} attempts")))
}

/// Compares the analytic VJP of `op` with finite differences on the seeded
/// sample. Failures are reported, not returned as errors.
pub fn check(op: &dyn DiffOp, seed: u64, tol: f64, abs_floor: f64) -> GradCheckReport {
    let mut jittered = false;
    let outcome = check_inner(op, seed, tol, abs_floor, &mut jittered);
    let (inputs, error) = match outcome {
        Ok(r) => (r, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    GradCheckReport {
        op: op.name().to_string(),
        seed,
        pass: error.is_none() && inputs.iter().all(|r| r.pass),
        inputs,
        jitter: jittered,
        error,
    }
}

fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

fn rng_for(name: &str, seed: u64) -> ChaCha8Rng {
    let tag = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    ChaCha8Rng::seed_from_u64(tag ^ seed)
}

/// Window size 3 or 5 and dilation 1 or 2, cycling with the seed.
fn window_for(variant: u64) -> WindowSpec {
    let size = if variant % 2 == 0 { 3 } else { 5 };
    let dilation = 1 + ((variant / 2) % 2) as usize;
    WindowSpec::new(size, dilation).expect("odd window")
}

const C: usize = 2;
const D: usize = 6;
const H: usize = 5;
const W: usize = 6;

struct SabfOp;

impl SabfOp {
    fn cfg(s: &Sample) -> SabfConfig {
        SabfConfig::new(0.7, 0.8, window_for(s.variant)).expect("positive sigmas")
    }
}

impl DiffOp for SabfOp {
    fn name(&self) -> &'static str {
        "sabf_filter"
    }

    fn sample(&self, seed: u64) -> Sample {
        let mut rng = rng_for(self.name(), seed);
        Sample {
            variant: seed,
            names: vec!["slice", "embedding"],
            inputs: vec![uniform(&[C, H, W], 1.0, &mut rng), uniform(&[3, H, W], 0.5, &mut rng)],
            fixed: Vec::new(),
        }
    }

    fn forward(&self, s: &Sample, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        sabf_filter(&x[0], &x[1], &Self::cfg(s))
    }

    fn vjp(&self, s: &Sample, x: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (gs, ge) = sabf_vjp(&x[0], &x[1], &Self::cfg(s), g)?;
        Ok(vec![gs, ge])
    }
}

/// Generator `2 -> 8 -> 2·taps` (one filter group per slice channel) with the layer tensors taken from `x[2..6]`.
struct DfnOp;

impl DfnOp {
    fn generator(x: &[Tensor<f64>]) -> DfnGeneratorParams<f64> {
        let layer = |w: &Tensor<f64>, b: &Tensor<f64>| ConvLayer {
            weight: w.clone(),
            bias: b.clone(),
            spec: Conv2dSpec::same(3, 1),
        };
        DfnGeneratorParams {
            stack: ConvStack {
                layers: vec![layer(&x[2], &x[3]), layer(&x[4], &x[5])],
            },
        }
    }
}

impl DiffOp for DfnOp {
    fn name(&self) -> &'static str {
        "dfn_generate_apply"
    }

    fn sample(&self, seed: u64) -> Sample {
        let mut rng = rng_for(self.name(), seed);
        let taps = window_for(seed).taps();
        let hidden = 8;
        Sample {
            variant: seed,
            names: vec!["slice", "guidance", "l1.w", "l1.b", "l2.w", "l2.b"],
            inputs: vec![
                uniform(&[C, H, W], 1.0, &mut rng),
                uniform(&[C, H, W], 1.0, &mut rng),
                uniform(&[hidden, C, 3, 3], 0.4, &mut rng),
                uniform(&[hidden], 0.2, &mut rng),
                uniform(&[C * taps, hidden, 3, 3], 0.3, &mut rng),
                uniform(&[C * taps], 0.2, &mut rng),
            ],
            fixed: Vec::new(),
        }
    }

    fn forward(&self, s: &Sample, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let (filters, _) = dfn_generate_tape(&x[1], &Self::generator(x), window_for(s.variant))?;
        dfn_apply(&x[0], &filters)
    }

    fn vjp(&self, s: &Sample, x: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let p = Self::generator(x);
        let (filters, tape) = dfn_generate_tape(&x[1], &p, window_for(s.variant))?;
        let (gs, glogits) = dfn_vjp(&x[0], &filters, g)?;
        let (gguide, layers) = dfn_generator_vjp(&p, &tape, &glogits)?;
        let mut out = vec![gs, gguide];
        for l in layers {
            out.push(l.weight);
            out.push(l.bias);
        }
        Ok(out)
    }

    fn branches(&self, s: &Sample, x: &[Tensor<f64>]) -> Result<Vec<u32>> {
        let (_, tape) = dfn_generate_tape(&x[1], &Self::generator(x), window_for(s.variant))?;
        Ok(tape.relu_pattern())
    }
}

struct PacOp;

impl DiffOp for PacOp {
    fn name(&self) -> &'static str {
        "pac_filter"
    }

    fn sample(&self, seed: u64) -> Sample {
        let mut rng = rng_for(self.name(), seed);
        let s = window_for(seed).size();
        let c_out = 3;
        Sample {
            variant: seed,
            names: vec!["slice", "adapt", "weight", "bias"],
            inputs: vec![
                uniform(&[C, H, W], 1.0, &mut rng),
                uniform(&[C, H, W], 0.7, &mut rng),
                uniform(&[c_out, C, s, s], 0.5, &mut rng),
                uniform(&[c_out], 0.5, &mut rng),
            ],
            fixed: Vec::new(),
        }
    }

    fn forward(&self, s: &Sample, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let p = PacParams {
            weight: x[2].clone(),
            bias: x[3].clone(),
        };
        pac_filter(&x[0], &x[1], &p, window_for(s.variant))
    }

    fn vjp(&self, s: &Sample, x: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let p = PacParams {
            weight: x[2].clone(),
            bias: x[3].clone(),
        };
        let r = pac_vjp(&x[0], &x[1], &p, window_for(s.variant), g)?;
        Ok(vec![r.slice, r.adapt, r.weight, r.bias])
    }
}

struct SgaOp;

impl DiffOp for SgaOp {
    fn name(&self) -> &'static str {
        "sga_aggregate"
    }

    fn sample(&self, seed: u64) -> Sample {
        let mut rng = rng_for(self.name(), seed);
        Sample {
            variant: seed,
            names: vec!["cost", "logits"],
            inputs: vec![uniform(&[D, H, W], 1.0, &mut rng), uniform(&[20, H, W], 1.0, &mut rng)],
            fixed: Vec::new(),
        }
    }

    fn forward(&self, _s: &Sample, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(sga_aggregate_tape(&x[0], &SgaWeights::from_logits(&x[1])?)?.0)
    }

    fn vjp(&self, _s: &Sample, x: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let r = sga_vjp(&x[0], &SgaWeights::from_logits(&x[1])?, g)?;
        Ok(vec![r.cv, r.logits])
    }

    fn branches(&self, _s: &Sample, x: &[Tensor<f64>]) -> Result<Vec<u32>> {
        let (_, tape) = sga_aggregate_tape(&x[0], &SgaWeights::from_logits(&x[1])?)?;
        let mut sig: Vec<u32> = tape.pred_argmax.concat();
        sig.extend(tape.argdir.iter().map(|&d| d as u32));
        Ok(sig)
    }

    fn has_max(&self) -> bool {
        true
    }
}

struct SoftArgminOp;

impl DiffOp for SoftArgminOp {
    fn name(&self) -> &'static str {
        "soft_argmin"
    }

    fn sample(&self, seed: u64) -> Sample {
        let mut rng = rng_for(self.name(), seed);
        Sample {
            variant: seed,
            names: vec!["cost"],
            inputs: vec![uniform(&[D, H, W], 2.0, &mut rng)],
            fixed: Vec::new(),
        }
    }

    fn forward(&self, _s: &Sample, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(soft_argmin(&x[0])?.to_tensor())
    }

    fn vjp(&self, _s: &Sample, x: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![soft_argmin_vjp(&x[0], g.data())?])
    }
}

/// Mean smooth-L1 of a prediction against fixed ground truth with some
/// invalid pixels. Errors are drawn away from the `|e| = 1` kink.
struct SmoothL1Op;

impl SmoothL1Op {
    fn maps(s: &Sample, pred: &Tensor<f64>) -> Result<(DisparityMap<f64>, DisparityMap<f64>)> {
        let gt = &s.fixed[0];
        let valid = s.fixed[1].data().iter().map(|&v| v > 0.5).collect();
        Ok((
            DisparityMap::dense(W, H, pred.data().to_vec())?,
            DisparityMap::new(W, H, gt.data().to_vec(), valid)?,
        ))
    }
}

impl DiffOp for SmoothL1Op {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn sample(&self, seed: u64) -> Sample {
        let mut rng = rng_for(self.name(), seed);
        let gt = Tensor::from_fn(vec![H, W], |_| rng.gen_range(0.0..10.0));
        let pred = Tensor::from_fn(vec![H, W], |i| {
            let mag = if rng.gen_bool(0.5) { rng.gen_range(0.05..0.9) } else { rng.gen_range(1.1..3.0) };
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            gt.data()[i] + sign * mag
        });
        let mut valid = Tensor::from_fn(vec![H, W], |_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 });
        valid.data_mut()[0] = 1.0;
        Sample {
            variant: seed,
            names: vec!["pred"],
            inputs: vec![pred],
            fixed: vec![gt, valid],
        }
    }

    fn forward(&self, s: &Sample, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let (pred, gt) = Self::maps(s, &x[0])?;
        Tensor::new(vec![1], vec![smooth_l1_grad(&pred, &gt)?.0])
    }

    fn vjp(&self, s: &Sample, x: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (pred, gt) = Self::maps(s, &x[0])?;
        let (_, grad) = smooth_l1_grad(&pred, &gt)?;
        let scaled = grad.iter().map(|&v| v * g.data()[0]).collect();
        Ok(vec![Tensor::new(vec![H, W], scaled)?])
    }

    fn branches(&self, s: &Sample, x: &[Tensor<f64>]) -> Result<Vec<u32>> {
        Ok(x[0]
            .data()
            .iter()
            .zip(s.fixed[0].data())
            .map(|(&p, &g)| u32::from((p - g).abs() < 1.0))
            .collect())
    }
}

struct Conv2dOp;

impl Conv2dOp {
    fn spec(variant: u64) -> (usize, Conv2dSpec) {
        let k = if variant % 2 == 0 { 3 } else { 1 };
        let dilation = 1 + ((variant / 2) % 2) as usize;
        let stride = 1 + ((variant / 4) % 2) as usize;
        let pad = (variant % 3) as usize;
        (k, Conv2dSpec { stride, dilation, pad })
    }
}

impl DiffOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn sample(&self, seed: u64) -> Sample {
        let mut rng = rng_for(self.name(), seed);
        let (k, _) = Self::spec(seed);
        Sample {
            variant: seed,
            names: vec!["input", "kernel", "bias"],
            inputs: vec![
                uniform(&[C, H, W], 1.0, &mut rng),
                uniform(&[3, C, k, k], 1.0, &mut rng),
                uniform(&[3], 1.0, &mut rng),
            ],
            fixed: Vec::new(),
        }
    }

    fn forward(&self, s: &Sample, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        conv2d(&x[0], &x[1], x[2].data(), Self::spec(s.variant).1)
    }

    fn vjp(&self, s: &Sample, x: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let r = conv2d_vjp(&x[0], &x[1], Self::spec(s.variant).1, g)?;
        Ok(vec![r.input, r.kernel, Tensor::new(vec![r.bias.len()], r.bias)?])
    }
}

struct SoftmaxOp;

impl DiffOp for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn sample(&self, seed: u64) -> Sample {
        let mut rng = rng_for(self.name(), seed);
        Sample {
            variant: seed,
            names: vec!["input"],
            inputs: vec![uniform(&[3, H, W], 2.0, &mut rng)],
            fixed: Vec::new(),
        }
    }

    fn forward(&self, s: &Sample, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        softmax(&x[0], (s.variant % 3) as usize)
    }

    fn vjp(&self, s: &Sample, x: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let axis = (s.variant % 3) as usize;
        Ok(vec![softmax_vjp(&softmax(&x[0], axis)?, axis, g)?])
    }
}

struct CorrelationOp;

impl DiffOp for CorrelationOp {
    fn name(&self) -> &'static str {
        "build_correlation"
    }

    fn sample(&self, seed: u64) -> Sample {
        let mut rng = rng_for(self.name(), seed);
        Sample {
            variant: seed,
            names: vec!["left", "right"],
            inputs: vec![uniform(&[C, H, W], 1.0, &mut rng), uniform(&[C, H, W], 1.0, &mut rng)],
            fixed: Vec::new(),
        }
    }

    fn forward(&self, s: &Sample, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(build_correlation(&x[0], &x[1], D, s.variant % 2 == 1)?.into_data())
    }

    fn vjp(&self, s: &Sample, x: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (gl, gr) = correlation_vjp(&x[0], &x[1], D, s.variant % 2 == 1, g)?;
        Ok(vec![gl, gr])
    }
}

struct ProjectOp;

impl DiffOp for ProjectOp {
    fn name(&self) -> &'static str {
        "project_4d_to_3d"
    }

    fn sample(&self, seed: u64) -> Sample {
        let mut rng = rng_for(self.name(), seed);
        Sample {
            variant: seed,
            names: vec!["volume", "proj", "bias"],
            inputs: vec![
                uniform(&[C, D, H, W], 1.0, &mut rng),
                uniform(&[1, C, 1, 1], 1.0, &mut rng),
                uniform(&[1], 1.0, &mut rng),
            ],
            fixed: Vec::new(),
        }
    }

    fn forward(&self, _s: &Sample, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let cv = CostVolume::concat(x[0].clone())?;
        Ok(project_4d_to_3d(&cv, &x[1], x[2].data()[0])?.into_data())
    }

    fn vjp(&self, _s: &Sample, x: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let cv = CostVolume::concat(x[0].clone())?;
        let (gc, gp, gb) = project_vjp(&cv, &x[1], g)?;
        Ok(vec![gc, gp, Tensor::new(vec![1], vec![gb])?])
    }
}

/// Wraps an op and adds `1e-2` to the first component of its first gradient.
/// Used to show that the harness detects a wrong backward pass.
pub struct Corrupted<O>(pub O);

impl<O: DiffOp> DiffOp for Corrupted<O> {
    fn name(&self) -> &'static str {
        "corrupted"
    }

    fn sample(&self, seed: u64) -> Sample {
        self.0.sample(seed)
    }

    fn forward(&self, s: &Sample, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        self.0.forward(s, x)
    }

    fn vjp(&self, s: &Sample, x: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let mut grads = self.0.vjp(s, x, g)?;
        if let Some(v) = grads.first_mut().and_then(|t| t.data_mut().first_mut()) {
            *v += 1e-2;
        }
        Ok(grads)
    }

    fn branches(&self, s: &Sample, x: &[Tensor<f64>]) -> Result<Vec<u32>> {
        self.0.branches(s, x)
    }

    fn has_max(&self) -> bool {
        self.0.has_max()
    }
}

/// The ten certified ops.
pub fn registry() -> Vec<Box<dyn DiffOp>> {
    vec![
        Box::new(SabfOp),
        Box::new(DfnOp),
        Box::new(PacOp),
        Box::new(SgaOp),
        Box::new(SoftArgminOp),
        Box::new(SmoothL1Op),
        Box::new(Conv2dOp),
        Box::new(SoftmaxOp),
        Box::new(CorrelationOp),
        Box::new(ProjectOp),
    ]
}

/// A registered op by name, or the `corrupted` sentinel.
pub fn lookup(name: &str) -> Option<Box<dyn DiffOp>> {
    if name == "corrupted" {
        return Some(Box::new(Corrupted(SoftArgminOp)));
    }
    registry().into_iter().find(|op| op.name() == name)
}
