//! The primitive operation catalog: shape rules, forward evaluation and
//! reverse-mode gradients for every op the three networks need.

use super::array::{NdArray, Scalar};
use super::kernels;
use crate::error::{Error, Result};
use std::fmt;
use std::sync::Arc;

/// Extension point for fused operations defined outside this module
/// (the per-patch MLP evaluator registers through this).
pub trait CustomOp<F: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn output_shape(&self, input_shapes: &[&[usize]]) -> Result<Vec<usize>>;
    fn forward(&self, inputs: &[&NdArray<F>]) -> Result<NdArray<F>>;
    /// One gradient per input; entries where `needs[i]` is false may be `None`.
    fn backward(
        &self,
        inputs: &[&NdArray<F>],
        output: &NdArray<F>,
        grad_out: &NdArray<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<NdArray<F>>>>;
}

/// A primitive operation node. Input arity is fixed per variant.
#[derive(Clone)]
pub enum Prim<F: Scalar> {
    /// x [B,I], w [O,I], b [O] -> [B,O]
    Linear,
    /// x [B,C,H,W], w [O,C,KH,KW], b [O] -> [B,O,OH,OW]
    Conv2d { stride: usize, pad: usize },
    LeakyRelu { slope: f64 },
    Relu,
    Tanh,
    Sin,
    Cos,
    Abs,
    Add,
    Sub,
    Mul,
    /// Multiply by a compile-time constant.
    Scale { c: f64 },
    /// Elementwise sigmoid cross-entropy with logits: (logits, targets).
    SigmoidCeLogits,
    /// Mean over all elements -> rank-0 scalar.
    Mean,
    /// Channel concatenation along axis 1 (variadic).
    ConcatChannels,
    Reshape { shape: Vec<usize> },
    /// Keep the top-left sample of every factor x factor block.
    Downsample { factor: usize },
    /// Identity forward, zero gradient: detaches the input from the graph.
    StopGrad,
    Custom(Arc<dyn CustomOp<F>>),
}

impl<F: Scalar> fmt::Debug for Prim<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl<F: Scalar> Prim<F> {
    pub fn name(&self) -> String {
        match self {
            Prim::Linear => "linear".into(),
            Prim::Conv2d { stride, pad } => format!("conv2d(s{},p{})", stride, pad),
            Prim::LeakyRelu { .. } => "leaky_relu".into(),
            Prim::Relu => "relu".into(),
            Prim::Tanh => "tanh".into(),
            Prim::Sin => "sin".into(),
            Prim::Cos => "cos".into(),
            Prim::Abs => "abs".into(),
            Prim::Add => "add".into(),
            Prim::Sub => "sub".into(),
            Prim::Mul => "mul".into(),
            Prim::Scale { c } => format!("scale({})", c),
            Prim::SigmoidCeLogits => "sigmoid_ce_logits".into(),
            Prim::Mean => "mean".into(),
            Prim::ConcatChannels => "concat_channels".into(),
            Prim::Reshape { .. } => "reshape".into(),
            Prim::Downsample { factor } => format!("downsample({})", factor),
            Prim::StopGrad => "stop_grad".into(),
            Prim::Custom(op) => op.name().to_string(),
        }
    }

    /// Validates input shapes and returns the output shape.
    pub fn output_shape(&self, ins: &[&[usize]]) -> Result<Vec<usize>> {
        let same_shape = |what: &str| -> Result<Vec<usize>> {
            if ins[0] != ins[1] {
                return Err(Error::shape(what, format!("{:?} vs {:?}", ins[0], ins[1])));
            }
            Ok(ins[0].to_vec())
        };
        match self {
            Prim::Linear => {
                expect_arity(ins, 3, "linear")?;
                if ins[0].len() != 2 || ins[1].len() != 2 || ins[2].len() != 1 {
                    return Err(Error::shape("linear", format!("ranks {:?}", ins)));
                }
                let (b, i) = (ins[0][0], ins[0][1]);
                let (o, iw) = (ins[1][0], ins[1][1]);
                if iw != i || ins[2][0] != o {
                    return Err(Error::shape(
                        "linear",
                        format!("x {:?}, w {:?}, b {:?}", ins[0], ins[1], ins[2]),
                    ));
                }
                Ok(vec![b, o])
            }
            Prim::Conv2d { stride, pad } => {
                expect_arity(ins, 3, "conv2d")?;
                if ins[0].len() != 4 || ins[1].len() != 4 || ins[2].len() != 1 {
                    return Err(Error::shape("conv2d", format!("ranks {:?}", ins)));
                }
                let (b, c, h, w) = (ins[0][0], ins[0][1], ins[0][2], ins[0][3]);
                let (o, cw, kh, kw) = (ins[1][0], ins[1][1], ins[1][2], ins[1][3]);
                if cw != c || ins[2][0] != o {
                    return Err(Error::shape(
                        "conv2d",
                        format!("x {:?}, w {:?}, b {:?}", ins[0], ins[1], ins[2]),
                    ));
                }
                let oh = kernels::conv_out_extent(h, kh, *stride, *pad);
                let ow = kernels::conv_out_extent(w, kw, *stride, *pad);
                match (oh, ow) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(vec![b, o, oh, ow]),
                    _ => Err(Error::shape(
                        "conv2d",
                        format!("input {}x{} undersized for kernel {}x{}", h, w, kh, kw),
                    )),
                }
            }
            Prim::LeakyRelu { .. }
            | Prim::Relu
            | Prim::Tanh
            | Prim::Sin
            | Prim::Cos
            | Prim::Abs
            | Prim::Scale { .. }
            | Prim::StopGrad => {
                expect_arity(ins, 1, "unary op")?;
                Ok(ins[0].to_vec())
            }
            Prim::Add => {
                expect_arity(ins, 2, "add")?;
                same_shape("add")
            }
            Prim::Sub => {
                expect_arity(ins, 2, "sub")?;
                same_shape("sub")
            }
            Prim::Mul => {
                expect_arity(ins, 2, "mul")?;
                same_shape("mul")
            }
            Prim::SigmoidCeLogits => {
                expect_arity(ins, 2, "sigmoid_ce_logits")?;
                same_shape("sigmoid_ce_logits")
            }
            Prim::Mean => {
                expect_arity(ins, 1, "mean")?;
                if ins[0].iter().product::<usize>() == 0 {
                    return Err(Error::shape("mean", "empty input".into()));
                }
                Ok(vec![])
            }
            Prim::ConcatChannels => {
                if ins.len() < 2 {
                    return Err(Error::shape("concat_channels", "needs at least 2 inputs".into()));
                }
                let first = ins[0];
                if first.len() != 4 {
                    return Err(Error::shape("concat_channels", format!("rank {:?}", first)));
                }
                let mut c = 0;
                for s in ins {
                    if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                        return Err(Error::shape("concat_channels", format!("incompatible {:?}", ins)));
                    }
                    c += s[1];
                }
                Ok(vec![first[0], c, first[2], first[3]])
            }
            Prim::Reshape { shape } => {
                expect_arity(ins, 1, "reshape")?;
                let from: usize = ins[0].iter().product();
                let to: usize = shape.iter().product();
                if from != to {
                    return Err(Error::shape(
                        "reshape",
                        format!("cannot view {:?} as {:?}", ins[0], shape),
                    ));
                }
                Ok(shape.clone())
            }
            Prim::Downsample { factor } => {
                expect_arity(ins, 1, "downsample")?;
                if ins[0].len() != 4 {
                    return Err(Error::shape("downsample", format!("rank {:?}", ins[0])));
                }
                let (h, w) = (ins[0][2], ins[0][3]);
                if *factor == 0 || h % factor != 0 || w % factor != 0 {
                    return Err(Error::shape(
                        "downsample",
                        format!("extent {}x{} not divisible by {}", h, w, factor),
                    ));
                }
                Ok(vec![ins[0][0], ins[0][1], h / factor, w / factor])
            }
            Prim::Custom(op) => op.output_shape(ins),
        }
    }

    pub fn forward(&self, inputs: &[&NdArray<F>]) -> Result<NdArray<F>> {
        match self {
            Prim::Linear => kernels::linear_forward(inputs[0], inputs[1], inputs[2]),
            Prim::Conv2d { stride, pad } => {
                kernels::conv2d_forward(inputs[0], inputs[1], inputs[2], *stride, *pad)
            }
            Prim::LeakyRelu { slope } => {
                let s = F::from_f64(*slope);
                Ok(inputs[0].map(|v| if v > F::zero() { v } else { v * s }))
            }
            Prim::Relu => Ok(inputs[0].map(|v| if v > F::zero() { v } else { F::zero() })),
            Prim::Tanh => Ok(inputs[0].map(|v| v.tanh())),
            Prim::Sin => Ok(inputs[0].map(|v| v.sin())),
            Prim::Cos => Ok(inputs[0].map(|v| v.cos())),
            Prim::Abs => Ok(inputs[0].map(|v| v.abs())),
            Prim::Add => zip_map(inputs[0], inputs[1], |a, b| a + b),
            Prim::Sub => zip_map(inputs[0], inputs[1], |a, b| a - b),
            Prim::Mul => zip_map(inputs[0], inputs[1], |a, b| a * b),
            Prim::Scale { c } => {
                let s = F::from_f64(*c);
                Ok(inputs[0].map(|v| v * s))
            }
            Prim::SigmoidCeLogits => zip_map(inputs[0], inputs[1], sigmoid_ce),
            Prim::Mean => {
                let n = F::from_f64(inputs[0].numel() as f64);
                let sum = inputs[0].data().iter().copied().sum::<F>();
                Ok(NdArray::scalar(sum / n))
            }
            Prim::ConcatChannels => kernels::concat_channels_forward(inputs),
            Prim::Reshape { shape } => inputs[0].reshaped(shape.clone()),
            Prim::Downsample { factor } => kernels::downsample_forward(inputs[0], *factor),
            Prim::StopGrad => Ok(inputs[0].clone()),
            Prim::Custom(op) => op.forward(inputs),
        }
    }

    /// Gradients w.r.t. each input, given the upstream gradient.
    /// `needs[i]` marks inputs whose gradient is actually consumed.
    pub fn backward(
        &self,
        inputs: &[&NdArray<F>],
        output: &NdArray<F>,
        grad: &NdArray<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<NdArray<F>>>> {
        match self {
            Prim::Linear => {
                let (gx, gw, gb) =
                    kernels::linear_backward(inputs[0], inputs[1], grad, needs[0], needs[1], needs[2])?;
                Ok(vec![gx, gw, gb])
            }
            Prim::Conv2d { stride, pad } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    inputs[0], inputs[1], grad, *stride, *pad, needs[0], needs[1], needs[2],
                )?;
                Ok(vec![gx, gw, gb])
            }
            Prim::LeakyRelu { slope } => {
                let s = F::from_f64(*slope);
                Ok(vec![Some(zip_map_ref(inputs[0], grad, |x, g| {
                    if x > F::zero() {
                        g
                    } else {
                        g * s
                    }
                }))])
            }
            Prim::Relu => Ok(vec![Some(zip_map_ref(inputs[0], grad, |x, g| {
                if x > F::zero() {
                    g
                } else {
                    F::zero()
                }
            }))]),
            Prim::Tanh => Ok(vec![Some(zip_map_ref(output, grad, |y, g| {
                g * (F::one() - y * y)
            }))]),
            Prim::Sin => Ok(vec![Some(zip_map_ref(inputs[0], grad, |x, g| g * x.cos()))]),
            Prim::Cos => Ok(vec![Some(zip_map_ref(inputs[0], grad, |x, g| {
                -g * x.sin()
            }))]),
            // Subgradient at zero fixed to 0.
            Prim::Abs => Ok(vec![Some(zip_map_ref(inputs[0], grad, |x, g| {
                if x > F::zero() {
                    g
                } else if x < F::zero() {
                    -g
                } else {
                    F::zero()
                }
            }))]),
            Prim::Add => Ok(vec![Some(grad.clone()), Some(grad.clone())]),
            Prim::Sub => Ok(vec![Some(grad.clone()), Some(grad.map(|g| -g))]),
            Prim::Mul => Ok(vec![
                Some(zip_map_ref(inputs[1], grad, |b, g| g * b)),
                Some(zip_map_ref(inputs[0], grad, |a, g| g * a)),
            ]),
            Prim::Scale { c } => {
                let s = F::from_f64(*c);
                Ok(vec![Some(grad.map(|g| g * s))])
            }
            Prim::SigmoidCeLogits => {
                let gl = if needs[0] {
                    let mut out = NdArray::zeros(inputs[0].shape().to_vec());
                    for ((o, (&l, &t)), &g) in out
                        .data_mut()
                        .iter_mut()
                        .zip(inputs[0].data().iter().zip(inputs[1].data()))
                        .zip(grad.data())
                    {
                        *o = g * (sigmoid(l) - t);
                    }
                    Some(out)
                } else {
                    None
                };
                let gt = if needs[1] {
                    Some(zip_map_ref(inputs[0], grad, |l, g| -g * l))
                } else {
                    None
                };
                Ok(vec![gl, gt])
            }
            Prim::Mean => {
                let n = F::from_f64(inputs[0].numel() as f64);
                let g = grad.item() / n;
                Ok(vec![Some(NdArray::full(inputs[0].shape().to_vec(), g))])
            }
            Prim::ConcatChannels => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|a| a.shape()).collect();
                Ok(kernels::concat_channels_backward(&shapes, grad, needs))
            }
            Prim::Reshape { .. } => Ok(vec![Some(grad.reshaped(inputs[0].shape().to_vec())?)]),
            Prim::Downsample { factor } => Ok(vec![Some(kernels::downsample_backward(
                inputs[0].shape(),
                grad,
                *factor,
            )?)]),
            Prim::StopGrad => Ok(vec![None]),
            Prim::Custom(op) => op.backward(inputs, output, grad, needs),
        }
    }

    /// StopGrad blocks gradient flow entirely.
    pub fn blocks_grad(&self) -> bool {
        matches!(self, Prim::StopGrad)
    }
}

fn expect_arity(ins: &[&[usize]], n: usize, what: &str) -> Result<()> {
    if ins.len() != n {
        return Err(Error::shape(what, format!("expected {} inputs, got {}", n, ins.len())));
    }
    Ok(())
}

fn zip_map<F: Scalar>(a: &NdArray<F>, b: &NdArray<F>, f: impl Fn(F, F) -> F) -> Result<NdArray<F>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "elementwise",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(zip_map_ref(a, b, f))
}

fn zip_map_ref<F: Scalar>(a: &NdArray<F>, b: &NdArray<F>, f: impl Fn(F, F) -> F) -> NdArray<F> {
    debug_assert_eq!(a.numel(), b.numel());
    let mut out = NdArray::zeros(a.shape().to_vec());
    for (o, (&x, &y)) in out.data_mut().iter_mut().zip(a.data().iter().zip(b.data())) {
        *o = f(x, y);
    }
    out
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Numerically stable sigmoid cross-entropy with logits:
/// max(l, 0) - l*t + ln(1 + exp(-|l|)).
fn sigmoid_ce<F: Scalar>(l: F, t: F) -> F {
    let pos = if l > F::zero() { l } else { F::zero() };
    pos - l * t + (F::one() + (-l.abs()).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let p = Prim::<f64>::Relu;
        let x = NdArray::new(vec![2], vec![-0.5, 0.5]).unwrap();
        let y = p.forward(&[&x]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5]);
    }

    #[test]
    fn ce_at_zero_logits_is_ln2() {
        let p = Prim::<f64>::SigmoidCeLogits;
        let l = NdArray::zeros(vec![4]);
        let t = NdArray::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let y = p.forward(&[&l, &t]).unwrap();
        for &v in y.data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let p = Prim::<f64>::Abs;
        let x = NdArray::new(vec![3], vec![-2.0, 0.0, 3.0]).unwrap();
        let y = p.forward(&[&x]).unwrap();
        let g = NdArray::full(vec![3], 1.0);
        let gx = p.backward(&[&x], &y, &g, &[true]).unwrap();
        assert_eq!(gx[0].as_ref().unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_backward_spreads_evenly() {
        let p = Prim::<f64>::Mean;
        let x = NdArray::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = p.forward(&[&x]).unwrap();
        assert_eq!(y.item(), 2.5);
        let g = p
            .backward(&[&x], &y, &NdArray::scalar(2.0), &[true])
            .unwrap();
        assert_eq!(g[0].as_ref().unwrap().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn shape_rule_rejects_mismatched_add() {
        let p = Prim::<f64>::Add;
        let a = [2usize, 3];
        let b = [3usize, 2];
        assert!(p.output_shape(&[&a, &b]).is_err());
    }
}
