//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every forward pass builds a fresh [`Graph`]; values are computed eagerly
//! as nodes are pushed, and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients. The op set is exactly what the stereo pipeline
//! needs — nothing generic beyond that.

use crate::conv::{
    conv3d_forward, conv3d_input_grad, conv3d_weight_grad, convt3d_forward, convt3d_input_grad,
    convt3d_weight_grad, ConvGeom,
};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    /// x `[C, ...]` plus a per-channel bias `[C]`.
    AddBias(NodeId, NodeId),
    /// x `[C, ...]` scaled by constant per-channel factors (flipout signs).
    ScaleChannels(NodeId, Tensor),
    /// 3D (or wrapped 2D) convolution; parents are (input, weight).
    Conv {
        input: NodeId,
        weight: NodeId,
        geom: ConvGeom,
        transposed: bool,
    },
    /// Concatenation cost volume; parents are (left, right) feature maps.
    CostVolume {
        left: NodeId,
        right: NodeId,
        levels: usize,
    },
    /// Softmax-expectation disparity readout over axis 0 of `[D, H, W]`.
    SoftArgmin(NodeId),
    /// Mean over axis 0 of `[D, H, W]`.
    MeanAxis0(NodeId),
    /// Select channel `i` of `[C, rest...]`, dropping the channel axis.
    SelectChannel(NodeId, usize),
    /// Full reduction to a scalar.
    Sum(NodeId),
    /// Scalar `sum(w ⊙ x)` with constant weights (masked means).
    WeightedSum(NodeId, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node, indexed by id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let b = &self.nodes[bias].value;
        let channels = x.shape()[0];
        assert_eq!(b.shape(), &[channels], "bias shape");
        let inner: usize = x.shape()[1..].iter().product();
        let mut out = x.clone();
        for c in 0..channels {
            let bc = b.data()[c];
            for v in &mut out.data_mut()[c * inner..(c + 1) * inner] {
                *v += bc;
            }
        }
        self.push(out, Op::AddBias(a, bias))
    }

    pub fn scale_channels(&mut self, a: NodeId, factors: Tensor) -> NodeId {
        let x = &self.nodes[a].value;
        let channels = x.shape()[0];
        assert_eq!(factors.len(), channels, "channel factor count");
        let inner: usize = x.shape()[1..].iter().product();
        let mut out = x.clone();
        for c in 0..channels {
            let fc = factors.data()[c];
            for v in &mut out.data_mut()[c * inner..(c + 1) * inner] {
                *v *= fc;
            }
        }
        self.push(out, Op::ScaleChannels(a, factors))
    }

    /// 3D convolution, `input [C,D,H,W]`, `weight [O,C,kd,kh,kw]`.
    pub fn conv3d(&mut self, name: &str, input: NodeId, weight: NodeId, geom: ConvGeom) -> Result<NodeId> {
        let x = &self.nodes[input].value;
        let w = &self.nodes[weight].value;
        self.check_conv_shapes(name, x, w, &geom, false)?;
        let y = conv3d_forward(x, w, &geom);
        Ok(self.push(
            y,
            Op::Conv {
                input,
                weight,
                geom,
                transposed: false,
            },
        ))
    }

    /// 2D convolution as a depth-1 3D convolution: `input [C,H,W]`,
    /// `weight [O,C,kh,kw]`, output `[O,H',W']`.
    pub fn conv2d(
        &mut self,
        name: &str,
        input: NodeId,
        weight: NodeId,
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<NodeId> {
        let x = &self.nodes[input].value;
        let w = &self.nodes[weight].value;
        if x.rank() != 3 || w.rank() != 4 {
            return Err(Error::shape(
                name,
                format!("conv2d expects [C,H,W] x [O,C,kh,kw], got {:?} x {:?}", x.shape(), w.shape()),
            ));
        }
        let x3 = x.clone().reshaped(vec![x.shape()[0], 1, x.shape()[1], x.shape()[2]]);
        let w3 = w.clone().reshaped(vec![w.shape()[0], w.shape()[1], 1, w.shape()[2], w.shape()[3]]);
        let geom = ConvGeom::new([1, w3.shape()[3], w3.shape()[4]], [1, stride[0], stride[1]], [0, pad[0], pad[1]]);
        self.check_conv_shapes(name, &x3, &w3, &geom, false)?;
        let y = conv3d_forward(&x3, &w3, &geom);
        let out_shape = vec![y.shape()[0], y.shape()[2], y.shape()[3]];
        let y = y.reshaped(out_shape);
        Ok(self.push(
            y,
            Op::Conv {
                input,
                weight,
                geom,
                transposed: false,
            },
        ))
    }

    /// Transposed 3D convolution, `weight [C,O,kd,kh,kw]`.
    pub fn conv_transpose3d(
        &mut self,
        name: &str,
        input: NodeId,
        weight: NodeId,
        geom: ConvGeom,
    ) -> Result<NodeId> {
        let x = &self.nodes[input].value;
        let w = &self.nodes[weight].value;
        self.check_conv_shapes(name, x, w, &geom, true)?;
        let y = convt3d_forward(x, w, &geom);
        Ok(self.push(
            y,
            Op::Conv {
                input,
                weight,
                geom,
                transposed: true,
            },
        ))
    }

    fn check_conv_shapes(
        &self,
        name: &str,
        x: &Tensor,
        w: &Tensor,
        geom: &ConvGeom,
        transposed: bool,
    ) -> Result<()> {
        if x.rank() != 4 || w.rank() != 5 {
            return Err(Error::shape(
                name,
                format!("expected [C,D,H,W] x rank-5 weight, got {:?} x {:?}", x.shape(), w.shape()),
            ));
        }
        let in_ch = if transposed { w.shape()[0] } else { w.shape()[1] };
        if x.shape()[0] != in_ch {
            return Err(Error::shape(
                name,
                format!("input has {} channels, weight expects {}", x.shape()[0], in_ch),
            ));
        }
        let dims = [x.shape()[1], x.shape()[2], x.shape()[3]];
        let ok = if transposed {
            geom.convt_out_dims(dims).is_some()
        } else {
            geom.conv_out_dims(dims).is_some()
        };
        if !ok {
            return Err(Error::shape(
                name,
                format!("kernel {:?} does not fit input dims {:?} with pad {:?}", geom.kernel, dims, geom.pad),
            ));
        }
        Ok(())
    }

    /// Concatenation cost volume from left/right feature maps `[C,H,W]`:
    /// output `[2C, levels, H, W]` with out-of-bounds right features zero.
    pub fn cost_volume(&mut self, name: &str, left: NodeId, right: NodeId, levels: usize) -> Result<NodeId> {
        let l = &self.nodes[left].value;
        let r = &self.nodes[right].value;
        if l.shape() != r.shape() || l.rank() != 3 {
            return Err(Error::shape(
                name,
                format!("feature maps must be equal [C,H,W], got {:?} vs {:?}", l.shape(), r.shape()),
            ));
        }
        let (c, h, w) = (l.shape()[0], l.shape()[1], l.shape()[2]);
        if levels > w {
            return Err(Error::shape(
                name,
                format!("{levels} disparity levels exceed feature width {w}: no valid overlap"),
            ));
        }
        let mut out = Tensor::zeros(&[2 * c, levels, h, w]);
        let plane = h * w;
        {
            let data = out.data_mut();
            for ch in 0..c {
                let lch = &l.data()[ch * plane..(ch + 1) * plane];
                let rch = &r.data()[ch * plane..(ch + 1) * plane];
                for d in 0..levels {
                    let lbase = (ch * levels + d) * plane;
                    let rbase = ((c + ch) * levels + d) * plane;
                    for y in 0..h {
                        for x in 0..w {
                            data[lbase + y * w + x] = lch[y * w + x];
                            if x >= d {
                                data[rbase + y * w + x] = rch[y * w + x - d];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::CostVolume { left, right, levels }))
    }

    /// Disparity expectation under a softmax over negated costs:
    /// `d̂(y,x) = Σ_d d · softmax_d(-cost)[d,y,x]`, input `[D,H,W]`.
    pub fn soft_argmin(&mut self, cost: NodeId) -> NodeId {
        let c = &self.nodes[cost].value;
        assert_eq!(c.rank(), 3, "soft_argmin expects [D,H,W]");
        let (d, h, w) = (c.shape()[0], c.shape()[1], c.shape()[2]);
        let plane = h * w;
        let mut out = Tensor::zeros(&[h, w]);
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for di in 0..d {
                m = m.max(-c.data()[di * plane + p]);
            }
            let mut z = 0.0;
            let mut acc = 0.0;
            for di in 0..d {
                let e = (-c.data()[di * plane + p] - m).exp();
                z += e;
                acc += di as f64 * e;
            }
            out.data_mut()[p] = acc / z;
        }
        self.push(out, Op::SoftArgmin(cost))
    }

    pub fn mean_axis0(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        assert_eq!(x.rank(), 3, "mean_axis0 expects [D,H,W]");
        let (d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let plane = h * w;
        let mut out = Tensor::zeros(&[h, w]);
        for di in 0..d {
            for p in 0..plane {
                out.data_mut()[p] += x.data()[di * plane + p];
            }
        }
        out.scale_assign(1.0 / d as f64);
        self.push(out, Op::MeanAxis0(a))
    }

    pub fn select_channel(&mut self, a: NodeId, index: usize) -> NodeId {
        let x = &self.nodes[a].value;
        let channels = x.shape()[0];
        assert!(index < channels, "channel index out of range");
        let inner: usize = x.shape()[1..].iter().product();
        let data = x.data()[index * inner..(index + 1) * inner].to_vec();
        let shape = x.shape()[1..].to_vec();
        self.push(Tensor::new(shape, data), Op::SelectChannel(a, index))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[a].value.sum());
        self.push(v, Op::Sum(a))
    }

    /// `sum(weights ⊙ x)` with constant weights; masked means use
    /// `weights = mask / N`.
    pub fn weighted_sum(&mut self, a: NodeId, weights: Tensor) -> NodeId {
        let x = &self.nodes[a].value;
        assert_eq!(x.shape(), weights.shape(), "weighted_sum shape");
        let v: f64 = x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(v), Op::WeightedSum(a, weights))
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::filled(self.nodes[root].value.shape(), 1.0));

        for id in (0..=root).rev() {
            let gout = match grads[id].as_ref() {
                Some(_) => grads[id].clone().unwrap(),
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gout.clone());
                    accumulate(&mut grads, *b, gout);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, gout.clone());
                    accumulate(&mut grads, *b, gout.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = gout.zip_map(&self.nodes[*b].value, |g, v| g * v);
                    let gb = gout.zip_map(&self.nodes[*a].value, |g, v| g * v);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Neg(a) => accumulate(&mut grads, *a, gout.map(|v| -v)),
                Op::Exp(a) => {
                    let g = gout.zip_map(&self.nodes[id].value, |g, y| g * y);
                    accumulate(&mut grads, *a, g);
                }
                Op::Ln(a) => {
                    let g = gout.zip_map(&self.nodes[*a].value, |g, x| g / x);
                    accumulate(&mut grads, *a, g);
                }
                Op::Softplus(a) => {
                    let g = gout.zip_map(&self.nodes[*a].value, |g, x| g * sigmoid(x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let g = gout.zip_map(&self.nodes[*a].value, |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, g);
                }
                Op::Abs(a) => {
                    let g = gout.zip_map(&self.nodes[*a].value, |g, x| g * sign0(x));
                    accumulate(&mut grads, *a, g);
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, gout),
                Op::MulScalar(a, c) => accumulate(&mut grads, *a, gout.map(|v| v * c)),
                Op::AddBias(a, bias) => {
                    let channels = self.nodes[*bias].value.len();
                    let inner = gout.len() / channels;
                    let mut gb = Tensor::zeros(&[channels]);
                    for c in 0..channels {
                        gb.data_mut()[c] = gout.data()[c * inner..(c + 1) * inner].iter().sum();
                    }
                    accumulate(&mut grads, *a, gout);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::ScaleChannels(a, factors) => {
                    let channels = factors.len();
                    let inner = gout.len() / channels;
                    let mut g = gout.clone();
                    for c in 0..channels {
                        let fc = factors.data()[c];
                        for v in &mut g.data_mut()[c * inner..(c + 1) * inner] {
                            *v *= fc;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Conv {
                    input,
                    weight,
                    geom,
                    transposed,
                } => {
                    let x = &self.nodes[*input].value;
                    let w = &self.nodes[*weight].value;
                    // 2D convs keep [C,H,W] node shapes; view as depth-1 3D.
                    let (x3, w3, g3, two_d) = if x.rank() == 3 {
                        (
                            x.clone().reshaped(vec![x.shape()[0], 1, x.shape()[1], x.shape()[2]]),
                            w.clone().reshaped(vec![w.shape()[0], w.shape()[1], 1, w.shape()[2], w.shape()[3]]),
                            gout.clone().reshaped(vec![gout.shape()[0], 1, gout.shape()[1], gout.shape()[2]]),
                            true,
                        )
                    } else {
                        (x.clone(), w.clone(), gout.clone(), false)
                    };
                    let in_dims = [x3.shape()[1], x3.shape()[2], x3.shape()[3]];
                    let (gx3, gw3) = if *transposed {
                        (
                            convt3d_input_grad(&g3, &w3, geom, in_dims),
                            convt3d_weight_grad(&x3, &g3, geom),
                        )
                    } else {
                        (
                            conv3d_input_grad(&g3, &w3, geom, in_dims),
                            conv3d_weight_grad(&x3, &g3, geom),
                        )
                    };
                    let (gx, gw) = if two_d {
                        (gx3.reshaped(x.shape().to_vec()), gw3.reshaped(w.shape().to_vec()))
                    } else {
                        (gx3, gw3)
                    };
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *weight, gw);
                }
                Op::CostVolume { left, right, levels } => {
                    let lshape = self.nodes[*left].value.shape().to_vec();
                    let (c, h, w) = (lshape[0], lshape[1], lshape[2]);
                    let plane = h * w;
                    let mut gl = Tensor::zeros(&lshape);
                    let mut gr = Tensor::zeros(&lshape);
                    for ch in 0..c {
                        for d in 0..*levels {
                            let lbase = (ch * levels + d) * plane;
                            let rbase = ((c + ch) * levels + d) * plane;
                            for y in 0..h {
                                for x in 0..w {
                                    gl.data_mut()[ch * plane + y * w + x] += gout.data()[lbase + y * w + x];
                                    if x >= d {
                                        gr.data_mut()[ch * plane + y * w + x - d] +=
                                            gout.data()[rbase + y * w + x];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *left, gl);
                    accumulate(&mut grads, *right, gr);
                }
                Op::SoftArgmin(a) => {
                    let cost = &self.nodes[*a].value;
                    let (d, h, w) = (cost.shape()[0], cost.shape()[1], cost.shape()[2]);
                    let plane = h * w;
                    let dhat = &self.nodes[id].value;
                    let mut g = Tensor::zeros(cost.shape());
                    for p in 0..plane {
                        let mut m = f64::NEG_INFINITY;
                        for di in 0..d {
                            m = m.max(-cost.data()[di * plane + p]);
                        }
                        let mut z = 0.0;
                        for di in 0..d {
                            z += (-cost.data()[di * plane + p] - m).exp();
                        }
                        let go = gout.data()[p];
                        let dh = dhat.data()[p];
                        for di in 0..d {
                            let pd = (-cost.data()[di * plane + p] - m).exp() / z;
                            // ∂d̂/∂cost_d = p_d (d̂ - d)
                            g.data_mut()[di * plane + p] = go * pd * (dh - di as f64);
                        }
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::MeanAxis0(a) => {
                    let x = &self.nodes[*a].value;
                    let d = x.shape()[0];
                    let plane = x.len() / d;
                    let mut g = Tensor::zeros(x.shape());
                    for di in 0..d {
                        for p in 0..plane {
                            g.data_mut()[di * plane + p] = gout.data()[p] / d as f64;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::SelectChannel(a, index) => {
                    let x = &self.nodes[*a].value;
                    let inner: usize = x.shape()[1..].iter().product();
                    let mut g = Tensor::zeros(x.shape());
                    g.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(gout.data());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sum(a) => {
                    let g = Tensor::filled(self.nodes[*a].value.shape(), gout.item());
                    accumulate(&mut grads, *a, g);
                }
                Op::WeightedSum(a, weights) => {
                    let s = gout.item();
                    let g = weights.map(|w| w * s);
                    accumulate(&mut grads, *a, g);
                }
            }
        }
        Gradients { grads }
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}
