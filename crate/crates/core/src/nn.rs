//! Stacks of 3×3 convolutions with ReLU between layers (the last layer is
//! linear), with a recorded forward pass and a hand-written backward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::WeightsFile;
use crate::tensor::{conv2d, conv2d_vjp, Conv2dSpec, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `C_out×C_in×k×k`
    pub weight: Tensor<T>,
    /// `C_out`
    pub bias: Tensor<T>,
    pub spec: Conv2dSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack<T> {
    pub layers: Vec<ConvLayer<T>>,
}

/// Per-layer intermediates of a forward pass.
#[derive(Clone, Debug)]
pub struct StackTape<T> {
    /// Input of every layer (post-ReLU output of the previous layer).
    inputs: Vec<Tensor<T>>,
    /// Pre-activation output of every layer but the last.
    pre: Vec<Tensor<T>>,
}

impl<T: Real> StackTape<T> {
    /// Which hidden units were active, flattened over layers. Used by the
    /// gradient checker to detect finite-difference steps across a ReLU kink.
    pub fn relu_pattern(&self) -> Vec<u32> {
        self.pre
            .iter()
            .flat_map(|t| t.data().iter().map(|&v| u32::from(v > T::zero())))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

impl<T: Real> ConvStack<T> {
    /// Random stack with `channels[i] -> channels[i+1]` 3×3 layers and the
    /// given per-layer strides. Weights are uniform in `±1/√fan_in`, biases zero.
    pub fn init(channels: &[usize], strides: &[usize], rng: &mut impl Rng) -> Self {
        assert_eq!(channels.len(), strides.len() + 1, "one stride per layer");
        let k = 3;
        let layers = channels
            .windows(2)
            .zip(strides)
            .map(|(io, &stride)| {
                let (c_in, c_out) = (io[0], io[1]);
                let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
                ConvLayer {
                    weight: Tensor::from_fn(vec![c_out, c_in, k, k], |_| {
                        T::lit(rng.gen_range(-bound..bound))
                    }),
                    bias: Tensor::zeros(vec![c_out]),
                    spec: Conv2dSpec {
                        stride,
                        dilation: 1,
                        pad: 1,
                    },
                }
            })
            .collect();
        ConvStack { layers }
    }

    /// Same architecture with every parameter zero.
    pub fn zeroed(&self) -> Self {
        ConvStack {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    weight: Tensor::zeros(l.weight.shape().to_vec()),
                    bias: Tensor::zeros(l.bias.shape().to_vec()),
                    spec: l.spec,
                })
                .collect(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("non-empty stack").weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_tape(x)?.0)
    }

    pub fn forward_tape(&self, x: &Tensor<T>) -> Result<(Tensor<T>, StackTape<T>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let y = conv2d(&cur, &l.weight, l.bias.data(), l.spec)?;
            inputs.push(cur);
            if i == last {
                cur = y;
            } else {
                cur = relu(&y);
                pre.push(y);
            }
        }
        Ok((cur, StackTape { inputs, pre }))
    }

    /// Returns the gradient w.r.t. the stack input and per-layer parameter grads.
    pub fn backward(&self, tape: &StackTape<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, Vec<LayerGrads<T>>)> {
        let mut g = upstream.clone();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                let pre = &tape.pre[i];
                for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
                    if p <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            let cg = conv2d_vjp(&tape.inputs[i], &l.weight, l.spec, &g)?;
            grads.push(LayerGrads {
                weight: cg.kernel,
                bias: Tensor::new(vec![cg.bias.len()], cg.bias)?,
            });
            g = cg.input;
        }
        grads.reverse();
        Ok((g, grads))
    }

    pub fn cast<U: Real>(&self) -> ConvStack<U> {
        ConvStack {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    spec: l.spec,
                })
                .collect(),
        }
    }

    /// Mutable views of all parameters in `prefix.l{i}.{w,b}` order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (1..=self.layers.len())
            .flat_map(|i| [format!("{prefix}.l{i}.w"), format!("{prefix}.l{i}.b")])
            .collect()
    }

    pub fn export(&self, prefix: &str, wf: &mut WeightsFile) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            wf.insert(format!("{prefix}.l{}.w", i + 1), l.weight.cast())?;
            wf.insert(format!("{prefix}.l{}.b", i + 1), l.bias.cast())?;
        }
        Ok(())
    }

    /// Overwrites parameters from `wf`; shapes must match this architecture.
    pub fn import(&mut self, prefix: &str, wf: &WeightsFile) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, dst) in [("w", &mut l.weight), ("b", &mut l.bias)] {
                let name = format!("{prefix}.l{}.{suffix}", i + 1);
                let src = wf
                    .get(&name)
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
        Ok(())
    }
}
