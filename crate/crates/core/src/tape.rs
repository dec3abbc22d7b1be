//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every differentiable operation appends one node to the tape; the node owns
//! the output buffer, a same-shape gradient buffer, and a record of the
//! operation with the ids of its inputs. Because an operation can only consume
//! ids that already exist, nodes are stored in topological order and a single
//! reverse sweep visits every operation exactly once.
//!
//! All forward values are f32. Scalar reductions accumulate in f64 before
//! rounding to f32, which keeps loss values stable enough for central
//! finite-difference checks. Loop orders are fixed everywhere so repeated runs
//! produce bit-identical values and gradients.

use crate::error::{Error, Result};
use crate::tensor::{idx3, Tensor};
use crate::threads;

/// Probabilities and confidences are clamped to this floor before `log`.
pub const LOG_CLAMP: f32 = 1e-12;

/// Largest f32 strictly below 1.0; sigmoid outputs are clamped into
/// [MIN_POSITIVE, SIGMOID_CEIL] so downstream log terms stay finite.
const SIGMOID_CEIL: f32 = 1.0 - f32::EPSILON / 2.0;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
        dilation: usize,
    },
    Relu { input: NodeId },
    LeakyRelu { input: NodeId, slope: f32 },
    Sigmoid { input: NodeId },
    SoftmaxChannels { input: NodeId },
    UpsampleNearest2x { input: NodeId },
    GlobalAvgPool { input: NodeId },
    Add { lhs: NodeId, rhs: NodeId },
    MulElem { lhs: NodeId, rhs: NodeId },
    Scale { input: NodeId, factor: f32 },
    SumAll { input: NodeId },
    /// Negative log-likelihood of per-pixel probabilities against integer
    /// class targets; pixels labelled `ignore_label` contribute nothing.
    MaskedNll {
        probs: NodeId,
        targets: Vec<u8>,
        ignore_label: u8,
        valid: usize,
        mean: bool,
    },
    /// Binary cross entropy of a confidence map against a constant target
    /// plane of all ones or all zeros.
    BceConst { conf: NodeId, target_one: bool, mean: bool },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f32>,
    grad: Vec<f32>,
    op: Op,
    /// Full-precision copy of scalar reduction results, kept so
    /// finite-difference checks are not limited by f32 loss quantization.
    scalar_f64: Option<f64>,
}

/// Ordered record of executed differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f32>, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node { shape, values, grad, op, scalar_f64: None });
        NodeId(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, value: f64, op: Op) -> NodeId {
        let id = self.push(vec![1], vec![value as f32], op);
        self.nodes[id.0].scalar_f64 = Some(value);
        id
    }

    /// Registers a constant or parameter tensor as a differentiable leaf.
    pub fn leaf(&mut self, tensor: &Tensor) -> NodeId {
        self.push(tensor.shape().to_vec(), tensor.values().to_vec(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, values: Vec<f32>) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(shape, values, Op::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].grad
    }

    pub fn value_scalar(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Scalar value at the precision it was reduced in (f64 for reductions,
    /// widened f32 otherwise).
    pub fn value_scalar_f64(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0]
            .scalar_f64
            .unwrap_or(self.nodes[id.0].values[0] as f64)
    }

    /// Extracts the node's value as an owned tensor (no gradient attached).
    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].values.clone()).unwrap()
    }

    // ── forward operations ──────────────────────────────────────────────

    /// 2-D cross-correlation with zero padding.
    ///
    /// input [C_in,H,W] * kernel [C_out,C_in,kH,kW] + bias [C_out]
    /// -> [C_out,H',W'] with H' = (H + 2·pad − dilation·(kH−1) − 1)/stride + 1.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<NodeId> {
        if stride == 0 || dilation == 0 {
            return Err(Error::Geometry("stride and dilation must be positive".into()));
        }
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 3 || kshape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects input rank 3 and kernel rank 4, got {ishape:?} and {kshape:?}"
            )));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, kc_in, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc_in != c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv2d input has {c_in} channels but kernel expects {kc_in}"
            )));
        }
        if bshape != [c_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias shape {bshape:?} does not match {c_out} output channels"
            )));
        }
        let out_h = conv_out_extent(h, kh, stride, pad, dilation)?;
        let out_w = conv_out_extent(w, kw, stride, pad, dilation)?;
        let geom = ConvGeom { c_in, h, w, c_out, kh, kw, out_h, out_w, stride, pad, dilation };

        let mut out = vec![0.0; c_out * out_h * out_w];
        conv2d_forward(
            self.values(input),
            self.values(kernel),
            self.values(bias),
            &geom,
            &mut out,
        );
        Ok(self.push(
            vec![c_out, out_h, out_w],
            out,
            Op::Conv2d { input, kernel, bias, stride, pad, dilation },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let values = self.values(input).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        self.push(shape, values, Op::Relu { input })
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f32) -> NodeId {
        let values = self
            .values(input)
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let shape = self.shape(input).to_vec();
        self.push(shape, values, Op::LeakyRelu { input, slope })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let values = self.values(input).iter().map(|&x| stable_sigmoid(x)).collect();
        let shape = self.shape(input).to_vec();
        self.push(shape, values, Op::Sigmoid { input })
    }

    /// Per-pixel softmax over the channel axis of a [C,H,W] tensor,
    /// stabilized by max subtraction.
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 || shape[0] < 2 {
            return Err(Error::ShapeMismatch(format!(
                "softmax_channels expects [C,H,W] with C >= 2, got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let x = self.values(input);
        let mut out = vec![0.0f32; x.len()];
        let plane = h * w;
        for p in 0..plane {
            let mut m = f32::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(x[ch * plane + p]);
            }
            let mut denom = 0.0f64;
            for ch in 0..c {
                let e = ((x[ch * plane + p] - m) as f64).exp();
                out[ch * plane + p] = e as f32;
                denom += e;
            }
            let inv = 1.0 / denom;
            for ch in 0..c {
                out[ch * plane + p] = ((out[ch * plane + p] as f64) * inv) as f32;
            }
        }
        Ok(self.push(shape, out, Op::SoftmaxChannels { input }))
    }

    /// Nearest-neighbour 2x upsampling: [C,H,W] -> [C,2H,2W].
    pub fn upsample_nearest2x(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "upsample_nearest2x expects [C,H,W], got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let x = self.values(input);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for xcol in 0..w {
                    let v = x[idx3(ch, y, xcol, h, w)];
                    out[idx3(ch, 2 * y, 2 * xcol, oh, ow)] = v;
                    out[idx3(ch, 2 * y, 2 * xcol + 1, oh, ow)] = v;
                    out[idx3(ch, 2 * y + 1, 2 * xcol, oh, ow)] = v;
                    out[idx3(ch, 2 * y + 1, 2 * xcol + 1, oh, ow)] = v;
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::UpsampleNearest2x { input }))
    }

    /// Spatial mean per channel: [C,H,W] -> [C,1,1].
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "global_avg_pool expects [C,H,W], got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let plane = h * w;
        let x = self.values(input);
        let mut out = vec![0.0f32; c];
        for ch in 0..c {
            let mut acc = 0.0f64;
            for p in 0..plane {
                acc += x[ch * plane + p] as f64;
            }
            out[ch] = (acc / plane as f64) as f32;
        }
        Ok(self.push(vec![c, 1, 1], out, Op::GlobalAvgPool { input }))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::ShapeMismatch(format!(
                "add requires equal shapes, got {:?} and {:?}",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let values: Vec<f32> = self
            .values(lhs)
            .iter()
            .zip(self.values(rhs))
            .map(|(a, b)| a + b)
            .collect();
        let shape = self.shape(lhs).to_vec();
        let scalar = if values.len() == 1 {
            Some(self.value_scalar_f64(lhs) + self.value_scalar_f64(rhs))
        } else {
            None
        };
        let id = self.push(shape, values, Op::Add { lhs, rhs });
        self.nodes[id.0].scalar_f64 = scalar;
        Ok(id)
    }

    pub fn mul_elem(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::ShapeMismatch(format!(
                "mul_elem requires equal shapes, got {:?} and {:?}",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let values = self
            .values(lhs)
            .iter()
            .zip(self.values(rhs))
            .map(|(a, b)| a * b)
            .collect();
        let shape = self.shape(lhs).to_vec();
        Ok(self.push(shape, values, Op::MulElem { lhs, rhs }))
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        let values: Vec<f32> = self.values(input).iter().map(|&x| x * factor).collect();
        let shape = self.shape(input).to_vec();
        let scalar = if values.len() == 1 {
            Some(self.value_scalar_f64(input) * factor as f64)
        } else {
            None
        };
        let id = self.push(shape, values, Op::Scale { input, factor });
        self.nodes[id.0].scalar_f64 = scalar;
        id
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let acc: f64 = self.values(input).iter().map(|&x| x as f64).sum();
        self.push_scalar(acc, Op::SumAll { input })
    }

    /// -sum over non-ignored pixels of log(clamp(p[target])), optionally
    /// divided by the number of valid pixels.
    pub fn masked_nll(
        &mut self,
        probs: NodeId,
        targets: &[u8],
        ignore_label: u8,
        mean: bool,
    ) -> Result<NodeId> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "masked_nll expects probabilities [C,H,W], got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if targets.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "masked_nll targets length {} does not match {}x{} pixels",
                targets.len(),
                h,
                w
            )));
        }
        let plane = h * w;
        let mut valid = 0usize;
        let mut acc = 0.0f64;
        let x = self.values(probs);
        for p in 0..plane {
            let t = targets[p];
            if t == ignore_label {
                continue;
            }
            if (t as usize) >= c {
                return Err(Error::ClassOutOfRange { id: t, classes: c });
            }
            valid += 1;
            let prob = x[t as usize * plane + p].max(LOG_CLAMP);
            acc -= (prob as f64).ln();
        }
        if valid == 0 {
            return Err(Error::AllPixelsIgnored);
        }
        if mean {
            acc /= valid as f64;
        }
        Ok(self.push_scalar(
            acc,
            Op::MaskedNll { probs, targets: targets.to_vec(), ignore_label, valid, mean },
        ))
    }

    /// Binary cross entropy against a constant all-ones or all-zeros target:
    /// -sum log(c) or -sum log(1-c), optionally averaged over elements.
    pub fn bce_const(&mut self, conf: NodeId, target_one: bool, mean: bool) -> NodeId {
        let x = self.values(conf);
        let mut acc = 0.0f64;
        for &v in x {
            let p = if target_one { v } else { 1.0 - v };
            acc -= (p.max(LOG_CLAMP) as f64).ln();
        }
        if mean {
            acc /= x.len() as f64;
        }
        self.push_scalar(acc, Op::BceConst { conf, target_one, mean })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; fills every node's gradient buffer.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, kernel, bias, stride, pad, dilation } => {
                    let ishape = &before[input.0].shape;
                    let kshape = &before[kernel.0].shape;
                    let geom = ConvGeom {
                        c_in: ishape[0],
                        h: ishape[1],
                        w: ishape[2],
                        c_out: kshape[0],
                        kh: kshape[2],
                        kw: kshape[3],
                        out_h: node.shape[1],
                        out_w: node.shape[2],
                        stride: *stride,
                        pad: *pad,
                        dilation: *dilation,
                    };
                    // Inputs may alias (e.g. conv of a tensor with itself is
                    // not expressible here since kernel/input/bias ids are
                    // distinct buffers by construction of the networks).
                    let (iv, kv) = (&before[input.0].values, &before[kernel.0].values);
                    let mut d_in = vec![0.0f32; iv.len()];
                    let mut d_k = vec![0.0f32; kv.len()];
                    let mut d_b = vec![0.0f32; geom.c_out];
                    conv2d_backward(iv, kv, &node.grad, &geom, &mut d_in, &mut d_k, &mut d_b);
                    accumulate(&mut before[input.0].grad, &d_in);
                    accumulate(&mut before[kernel.0].grad, &d_k);
                    accumulate(&mut before[bias.0].grad, &d_b);
                }
                Op::Relu { input } => {
                    let src = &before[input.0];
                    let d: Vec<f32> = src
                        .values
                        .iter()
                        .zip(&node.grad)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut before[input.0].grad, &d);
                }
                Op::LeakyRelu { input, slope } => {
                    let slope = *slope;
                    let src = &before[input.0];
                    let d: Vec<f32> = src
                        .values
                        .iter()
                        .zip(&node.grad)
                        .map(|(&x, &g)| if x >= 0.0 { g } else { slope * g })
                        .collect();
                    accumulate(&mut before[input.0].grad, &d);
                }
                Op::Sigmoid { input } => {
                    let d: Vec<f32> = node
                        .values
                        .iter()
                        .zip(&node.grad)
                        .map(|(&y, &g)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut before[input.0].grad, &d);
                }
                Op::SoftmaxChannels { input } => {
                    let (c, h, w) = (node.shape[0], node.shape[1], node.shape[2]);
                    let plane = h * w;
                    let y = &node.values;
                    let g = &node.grad;
                    let mut d = vec![0.0f32; y.len()];
                    for p in 0..plane {
                        let mut dot = 0.0f64;
                        for ch in 0..c {
                            let i = ch * plane + p;
                            dot += (g[i] as f64) * (y[i] as f64);
                        }
                        for ch in 0..c {
                            let i = ch * plane + p;
                            d[i] = ((g[i] as f64 - dot) * y[i] as f64) as f32;
                        }
                    }
                    accumulate(&mut before[input.0].grad, &d);
                }
                Op::UpsampleNearest2x { input } => {
                    let (c, oh, ow) = (node.shape[0], node.shape[1], node.shape[2]);
                    let (h, w) = (oh / 2, ow / 2);
                    let g = &node.grad;
                    let mut d = vec![0.0f32; c * h * w];
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                d[idx3(ch, y, x, h, w)] = g[idx3(ch, 2 * y, 2 * x, oh, ow)]
                                    + g[idx3(ch, 2 * y, 2 * x + 1, oh, ow)]
                                    + g[idx3(ch, 2 * y + 1, 2 * x, oh, ow)]
                                    + g[idx3(ch, 2 * y + 1, 2 * x + 1, oh, ow)];
                            }
                        }
                    }
                    accumulate(&mut before[input.0].grad, &d);
                }
                Op::GlobalAvgPool { input } => {
                    let src_shape = &before[input.0].shape;
                    let (c, h, w) = (src_shape[0], src_shape[1], src_shape[2]);
                    let plane = h * w;
                    let inv = 1.0 / plane as f32;
                    let g = &node.grad;
                    let mut d = vec![0.0f32; c * plane];
                    for ch in 0..c {
                        let gv = g[ch] * inv;
                        for p in 0..plane {
                            d[ch * plane + p] = gv;
                        }
                    }
                    accumulate(&mut before[input.0].grad, &d);
                }
                Op::Add { lhs, rhs } => {
                    let g = node.grad.clone();
                    accumulate(&mut before[lhs.0].grad, &g);
                    accumulate(&mut before[rhs.0].grad, &g);
                }
                Op::MulElem { lhs, rhs } => {
                    let dl: Vec<f32> = before[rhs.0]
                        .values
                        .iter()
                        .zip(&node.grad)
                        .map(|(&b, &g)| b * g)
                        .collect();
                    let dr: Vec<f32> = before[lhs.0]
                        .values
                        .iter()
                        .zip(&node.grad)
                        .map(|(&a, &g)| a * g)
                        .collect();
                    accumulate(&mut before[lhs.0].grad, &dl);
                    accumulate(&mut before[rhs.0].grad, &dr);
                }
                Op::Scale { input, factor } => {
                    let factor = *factor;
                    let d: Vec<f32> = node.grad.iter().map(|&g| g * factor).collect();
                    accumulate(&mut before[input.0].grad, &d);
                }
                Op::SumAll { input } => {
                    let g = node.grad[0];
                    let dst = &mut before[input.0].grad;
                    for v in dst.iter_mut() {
                        *v += g;
                    }
                }
                Op::MaskedNll { probs, targets, ignore_label, valid, mean } => {
                    let g = node.grad[0];
                    let scale = if *mean { g / *valid as f32 } else { g };
                    let src = &before[probs.0];
                    let (_, h, w) = (src.shape[0], src.shape[1], src.shape[2]);
                    let plane = h * w;
                    let values = src.values.clone();
                    let dst = &mut before[probs.0].grad;
                    for p in 0..plane {
                        let t = targets[p];
                        if t == *ignore_label {
                            continue;
                        }
                        let i = t as usize * plane + p;
                        let prob = values[i];
                        if prob >= LOG_CLAMP {
                            dst[i] += -scale / prob;
                        }
                    }
                }
                Op::BceConst { conf, target_one, mean } => {
                    let g = node.grad[0];
                    let n = before[conf.0].values.len();
                    let scale = if *mean { g / n as f32 } else { g };
                    let values = before[conf.0].values.clone();
                    let dst = &mut before[conf.0].grad;
                    if *target_one {
                        for (d, &v) in dst.iter_mut().zip(&values) {
                            if v >= LOG_CLAMP {
                                *d += -scale / v;
                            }
                        }
                    } else {
                        for (d, &v) in dst.iter_mut().zip(&values) {
                            if 1.0 - v >= LOG_CLAMP {
                                *d += scale / (1.0 - v);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn accumulate(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn stable_sigmoid(x: f32) -> f32 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f32::MIN_POSITIVE, SIGMOID_CEIL)
}

fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Result<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = extent + 2 * pad;
    if span > padded {
        return Err(Error::Geometry(format!(
            "kernel span {span} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - span) / stride + 1)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
}

/// Output index range [lo, hi) for which 0 <= o*stride + offset < extent.
#[inline]
fn valid_range(extent_in: usize, extent_out: usize, offset: isize, stride: usize) -> (usize, usize) {
    let lo = if offset < 0 {
        ((-offset) as usize).div_ceil(stride)
    } else {
        0
    };
    let last = extent_in as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(extent_out);
    (lo.min(hi), hi)
}

/// Forward cross-correlation. Each output element accumulates its terms in
/// ascending (ci, kh, kw) order regardless of threading, so results are
/// bit-identical to the sequential path.
fn conv2d_forward(input: &[f32], kernel: &[f32], bias: &[f32], geom: &ConvGeom, out: &mut [f32]) {
    let per_channel = geom.out_h * geom.out_w;
    let run = |co_range: std::ops::Range<usize>, out_block: &mut [f32]| {
        for (slot, co) in co_range.enumerate() {
            let out_ch = &mut out_block[slot * per_channel..(slot + 1) * per_channel];
            out_ch.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..geom.c_in {
                for kh in 0..geom.kh {
                    let off_h = (kh * geom.dilation) as isize - geom.pad as isize;
                    let (oh_lo, oh_hi) = valid_range(geom.h, geom.out_h, off_h, geom.stride);
                    for kw in 0..geom.kw {
                        let wgt = kernel
                            [((co * geom.c_in + ci) * geom.kh + kh) * geom.kw + kw];
                        let off_w = (kw * geom.dilation) as isize - geom.pad as isize;
                        let (ow_lo, ow_hi) = valid_range(geom.w, geom.out_w, off_w, geom.stride);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * geom.stride) as isize + off_h;
                            let in_row =
                                &input[idx3(ci, ih as usize, 0, geom.h, geom.w)..][..geom.w];
                            let out_row =
                                &mut out_ch[oh * geom.out_w..(oh + 1) * geom.out_w];
                            if geom.stride == 1 {
                                let iw0 = (ow_lo as isize + off_w) as usize;
                                let src = &in_row[iw0..iw0 + (ow_hi - ow_lo)];
                                for (o, &x) in out_row[ow_lo..ow_hi].iter_mut().zip(src) {
                                    *o += wgt * x;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = (ow * geom.stride) as isize + off_w;
                                    out_row[ow] += wgt * in_row[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    threads::split_run(geom.c_out, per_channel, out, run);
}

/// Gradients for input, kernel and bias. Threaded splits keep each element's
/// accumulation order identical to the sequential loops.
fn conv2d_backward(
    input: &[f32],
    kernel: &[f32],
    upstream: &[f32],
    geom: &ConvGeom,
    d_in: &mut [f32],
    d_k: &mut [f32],
    d_b: &mut [f32],
) {
    // d_kernel and d_bias: parallel over output channels (disjoint slices).
    let k_per_co = geom.c_in * geom.kh * geom.kw;
    {
        let run = |co_range: std::ops::Range<usize>, dk_block: &mut [f32]| {
            for (slot, co) in co_range.enumerate() {
                let dk_ch = &mut dk_block[slot * k_per_co..(slot + 1) * k_per_co];
                let up_ch =
                    &upstream[co * geom.out_h * geom.out_w..][..geom.out_h * geom.out_w];
                for ci in 0..geom.c_in {
                    for kh in 0..geom.kh {
                        let off_h = (kh * geom.dilation) as isize - geom.pad as isize;
                        let (oh_lo, oh_hi) = valid_range(geom.h, geom.out_h, off_h, geom.stride);
                        for kw in 0..geom.kw {
                            let off_w = (kw * geom.dilation) as isize - geom.pad as isize;
                            let (ow_lo, ow_hi) =
                                valid_range(geom.w, geom.out_w, off_w, geom.stride);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let mut acc = 0.0f32;
                            for oh in oh_lo..oh_hi {
                                let ih = (oh * geom.stride) as isize + off_h;
                                let in_row =
                                    &input[idx3(ci, ih as usize, 0, geom.h, geom.w)..][..geom.w];
                                let up_row = &up_ch[oh * geom.out_w..(oh + 1) * geom.out_w];
                                if geom.stride == 1 {
                                    let iw0 = (ow_lo as isize + off_w) as usize;
                                    let src = &in_row[iw0..iw0 + (ow_hi - ow_lo)];
                                    for (&u, &x) in up_row[ow_lo..ow_hi].iter().zip(src) {
                                        acc += u * x;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = (ow * geom.stride) as isize + off_w;
                                        acc += up_row[ow] * in_row[iw as usize];
                                    }
                                }
                            }
                            dk_ch[(ci * geom.kh + kh) * geom.kw + kw] += acc;
                        }
                    }
                }
            }
        };
        threads::split_run(geom.c_out, k_per_co, d_k, run);
    }
    for co in 0..geom.c_out {
        let mut acc = 0.0f32;
        for oh in 0..geom.out_h {
            for ow in 0..geom.out_w {
                acc += upstream[idx3(co, oh, ow, geom.out_h, geom.out_w)];
            }
        }
        d_b[co] += acc;
    }
    // d_input: parallel over input channels (disjoint slices); the co loop
    // stays inside so each element keeps the sequential accumulation order.
    {
        let per_ci = geom.h * geom.w;
        let run = |ci_range: std::ops::Range<usize>, din_block: &mut [f32]| {
            for (slot, ci) in ci_range.enumerate() {
                let din_ch = &mut din_block[slot * per_ci..(slot + 1) * per_ci];
                for co in 0..geom.c_out {
                    let up_ch =
                        &upstream[co * geom.out_h * geom.out_w..][..geom.out_h * geom.out_w];
                    for kh in 0..geom.kh {
                        let off_h = (kh * geom.dilation) as isize - geom.pad as isize;
                        let (oh_lo, oh_hi) = valid_range(geom.h, geom.out_h, off_h, geom.stride);
                        for kw in 0..geom.kw {
                            let wgt = kernel
                                [((co * geom.c_in + ci) * geom.kh + kh) * geom.kw + kw];
                            let off_w = (kw * geom.dilation) as isize - geom.pad as isize;
                            let (ow_lo, ow_hi) =
                                valid_range(geom.w, geom.out_w, off_w, geom.stride);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            for oh in oh_lo..oh_hi {
                                let ih = (oh * geom.stride) as isize + off_h;
                                let din_row = &mut din_ch[(ih as usize) * geom.w..][..geom.w];
                                let up_row = &up_ch[oh * geom.out_w..(oh + 1) * geom.out_w];
                                if geom.stride == 1 {
                                    let iw0 = (ow_lo as isize + off_w) as usize;
                                    let dst = &mut din_row[iw0..iw0 + (ow_hi - ow_lo)];
                                    for (d, &u) in dst.iter_mut().zip(&up_row[ow_lo..ow_hi]) {
                                        *d += wgt * u;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = (ow * geom.stride) as isize + off_w;
                                        din_row[iw as usize] += wgt * up_row[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
        threads::split_run(geom.c_in, per_ci, d_in, run);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: &[usize], values: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    /// Independent quadruple-loop convolution used as the test oracle.
    fn conv_oracle(
        input: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Vec<f32> {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (c_out, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let out_h = (h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
        let out_w = (w + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
        let mut out = vec![0.0f32; c_out * out_h * out_w];
        for co in 0..c_out {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = bias.values()[co];
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let ih = (oh * stride + ky * dilation) as isize - pad as isize;
                                let iw = (ow * stride + kx * dilation) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                acc += kernel.values()
                                    [((co * c_in + ci) * kh + ky) * kw + kx]
                                    * input.at3(ci, ih as usize, iw as usize);
                            }
                        }
                    }
                    out[idx3(co, oh, ow, out_h, out_w)] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let k = tape.leaf(&tensor(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(&tensor(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0, 1).unwrap();
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![1, 3, 3], 1.0));
        let k = tape.leaf(&Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = tape.leaf(&tensor(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.values(y), &[9.0]);
    }

    #[test]
    fn conv_dilation_matches_oracle() {
        let values: Vec<f32> = (0..25).map(|v| v as f32).collect();
        let input = tensor(&[1, 5, 5], &values);
        let kernel = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let bias = tensor(&[1], &[0.0]);
        let expect = conv_oracle(&input, &kernel, &bias, 1, 0, 2);

        let mut tape = Tape::new();
        let x = tape.leaf(&input);
        let k = tape.leaf(&kernel);
        let b = tape.leaf(&bias);
        let y = tape.conv2d(x, k, b, 1, 0, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.values(y), expect.as_slice());
        // 0+2+4 + 10+12+14 + 20+22+24
        assert_eq!(tape.values(y), &[108.0]);
    }

    #[test]
    fn conv_matches_oracle_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let c_in = rng.gen_range(1..=4);
            let c_out = rng.gen_range(1..=4);
            let kh = rng.gen_range(1..=3);
            let kw = rng.gen_range(1..=3);
            let h = rng.gen_range(kh..=9);
            let w = rng.gen_range(kw..=9);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1);
            let dilation = if dil_fits(h, w, kh, kw, pad) { rng.gen_range(1..=2) } else { 1 };
            if dilation * (kh - 1) + 1 > h + 2 * pad || dilation * (kw - 1) + 1 > w + 2 * pad {
                continue;
            }
            let input = Tensor::randn(vec![c_in, h, w], 1.0, &mut rng);
            let kernel = Tensor::randn(vec![c_out, c_in, kh, kw], 0.5, &mut rng);
            let bias = Tensor::randn(vec![c_out], 0.2, &mut rng);
            let expect = conv_oracle(&input, &kernel, &bias, stride, pad, dilation);

            let mut tape = Tape::new();
            let x = tape.leaf(&input);
            let k = tape.leaf(&kernel);
            let b = tape.leaf(&bias);
            let y = tape.conv2d(x, k, b, stride, pad, dilation).unwrap();
            assert_eq!(tape.values(y), expect.as_slice(), "conv must match oracle bit-exactly");
        }
    }

    fn dil_fits(h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> bool {
        2 * (kh - 1) + 1 <= h + 2 * pad && 2 * (kw - 1) + 1 <= w + 2 * pad
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_bad_geometry() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 4, 4]));
        let k = tape.leaf(&Tensor::zeros(vec![1, 3, 3, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![1]));
        assert!(matches!(tape.conv2d(x, k, b, 1, 0, 1), Err(Error::ShapeMismatch(_))));

        let k2 = tape.leaf(&Tensor::zeros(vec![1, 2, 5, 5]));
        let b2 = tape.leaf(&Tensor::zeros(vec![1]));
        assert!(matches!(tape.conv2d(x, k2, b2, 1, 0, 1), Err(Error::Geometry(_))));
    }

    #[test]
    fn activations_match_definitions() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[4], &[-2.0, 3.5, 0.0, -1.0]));
        let r = tape.relu(x);
        assert_eq!(tape.values(r), &[0.0, 3.5, 0.0, 0.0]);
        let l = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.values(l), &[-0.4, 3.5, 0.0, -0.2]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.values(s)[2], 0.5);
        assert!(tape.values(s).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn sigmoid_saturated_stays_interior() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1000.0, -1000.0]));
        let s = tape.sigmoid(x);
        let v = tape.values(s);
        assert!(v[0] < 1.0 && v[0] > 0.999);
        assert!(v[1] > 0.0 && v[1] < 1e-3);
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![4, 2, 2]));
        let y = tape.softmax_channels(x).unwrap();
        assert!(tape.values(y).iter().all(|&v| (v - 0.25).abs() < 1e-7));

        let z = tape.leaf(&tensor(&[2, 1, 1], &[1000.0, 0.0]));
        let s = tape.softmax_channels(z).unwrap();
        let v = tape.values(s);
        assert!(v[0] > 0.999_999);
        assert!(v[1] < 1e-6);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[3, 1, 1], &[1.0, 2.0, 3.0]));
        let y = tape.softmax_channels(x).unwrap();
        let denom = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        for (c, &v) in tape.values(y).iter().enumerate() {
            let expect = ((c as f64 + 1.0).exp() / denom) as f32;
            assert!((v - expect).abs() < 1e-6, "channel {c}: {v} vs {expect}");
        }
    }

    #[test]
    fn softmax_sums_to_one_for_extreme_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = rng.gen_range(2..=6);
            let mut vals = Vec::new();
            for _ in 0..c * 9 {
                vals.push(rng.gen_range(-1e4f32..1e4));
            }
            let mut tape = Tape::new();
            let x = tape.leaf(&tensor(&[c, 3, 3], &vals));
            let y = tape.softmax_channels(x).unwrap();
            let out = tape.values(y);
            for p in 0..9 {
                let sum: f32 = (0..c).map(|ch| out[ch * 9 + p]).sum();
                assert!((sum - 1.0).abs() < 1e-6, "pixel {p} sums to {sum}");
            }
        }
    }

    #[test]
    fn upsample_replicates_and_sums_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[1, 1, 1], &[5.0]));
        let y = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(tape.values(y), &[5.0, 5.0, 5.0, 5.0]);

        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[4.0]);
    }

    #[test]
    fn upsample_matches_index_oracle() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.upsample_nearest2x(x).unwrap();
        let out = tape.values(y);
        for oy in 0..4 {
            for ox in 0..4 {
                let expect = [1.0, 2.0, 3.0, 4.0][(oy / 2) * 2 + ox / 2];
                assert_eq!(out[oy * 4 + ox], expect);
            }
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_square_gives_double() {
        let mut tape = Tape::new();
        let w = tape.leaf(&tensor(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum_all(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(&tensor(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul_elem(w, w).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(&tensor(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let input = Tensor::randn(vec![2, 6, 6], 1.0, &mut rng);
            let kernel = Tensor::randn(vec![3, 2, 3, 3], 0.4, &mut rng);
            let bias = Tensor::randn(vec![3], 0.1, &mut rng);
            let mut tape = Tape::new();
            let x = tape.leaf(&input);
            let k = tape.leaf(&kernel);
            let b = tape.leaf(&bias);
            let c = tape.conv2d(x, k, b, 1, 1, 1).unwrap();
            let a = tape.relu(c);
            let sq = tape.mul_elem(a, a).unwrap();
            let loss = tape.sum_all(sq);
            tape.backward(loss).unwrap();
            (tape.grad(x).to_vec(), tape.grad(k).to_vec(), tape.grad(b).to_vec())
        };
        let (a1, a2) = (run(), run());
        assert_eq!(a1.0, a2.0);
        assert_eq!(a1.1, a2.1);
        assert_eq!(a1.2, a2.2);
    }

    #[test]
    fn unreached_leaves_keep_zero_grad() {
        let mut tape = Tape::new();
        let used = tape.leaf(&tensor(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(&tensor(&[2], &[3.0, 4.0]));
        let s = tape.sum_all(used);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused), &[0.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_means_and_spreads_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[1, 2, 2], &[1.0, 2.0, 3.0, 6.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert!((tape.value_scalar(y) - 3.0).abs() < 1e-7);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).iter().all(|&g| (g - 0.25).abs() < 1e-7));
    }
}
