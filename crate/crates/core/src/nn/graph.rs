use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};

use super::conv::{col2im, conv_out_size, im2col};
use super::params::{ParamId, ParamStore, Side};
use crate::RiftError;

pub type NodeId = usize;

const IN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Tanh {
        x: NodeId,
    },
    Upsample2x {
        x: NodeId,
    },
    ConcatC {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    AddScalar {
        x: NodeId,
    },
    Square {
        x: NodeId,
    },
    Abs {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    AddN {
        xs: Vec<NodeId>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs: bool,
    // op-specific cache filled during forward (e.g. inverse std for
    // instance norm), avoids recomputation in backward
    aux: Option<ArrayD<f64>>,
}

/// Per-parameter gradients produced by [`Graph::backward`]. Parameters that
/// were frozen or unused in the graph have `None` (exactly zero gradient).
pub struct Gradients {
    pub by_param: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.by_param.get(id).and_then(|g| g.as_ref())
    }
}

/// One forward tape. `trainable` selects which parameter side receives
/// gradients; the other side participates in the forward pass as constants.
pub struct Graph {
    nodes: Vec<Node>,
    n_params: usize,
    trainable: Option<Side>,
}

impl Graph {
    pub fn new(store: &ParamStore, trainable: Option<Side>) -> Self {
        Graph {
            nodes: Vec::new(),
            n_params: store.len(),
            trainable,
        }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs,
            aux: None,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        *self.nodes[id].value.first().expect("scalar node")
    }

    pub fn constant(&mut self, v: ArrayD<f64>) -> NodeId {
        self.push(v, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let needs = self.trainable == Some(store.meta(id).side);
        self.push(store.value(id).clone(), Op::Param(id), needs)
    }

    /// Re-enter a computed value as a constant leaf (stop-gradient).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.push(v, Op::Leaf, false)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let wv = as4(&self.nodes[w].value);
        let (n, c, h, wd) = xv.dim();
        let (o, cw, kh, kw) = wv.dim();
        assert_eq!(c, cw, "conv2d channel mismatch");
        let oh = conv_out_size(h, kh, stride, pad);
        let ow = conv_out_size(wd, kw, stride, pad);
        let col = im2col(&xv.view(), kh, kw, stride, pad);
        let wmat = wv
            .to_shape((o, c * kh * kw))
            .expect("weight reshape")
            .to_owned();
        let omat = wmat.dot(&col); // [o, n*oh*ow]
        let bias = self.nodes[b].value.clone();
        let mut out = Array4::<f64>::zeros((n, o, oh, ow));
        for ni in 0..n {
            for oc in 0..o {
                let bv = bias[[oc]];
                for oi in 0..oh {
                    for oj in 0..ow {
                        out[[ni, oc, oi, oj]] = omat[[oc, (ni * oh + oi) * ow + oj]] + bv;
                    }
                }
            }
        }
        let needs =
            self.nodes[x].needs || self.nodes[w].needs || self.nodes[b].needs;
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    /// Per-sample, per-channel normalization over the spatial dims (no
    /// affine part; a following conv absorbs any scale/shift).
    pub fn instance_norm(&mut self, x: NodeId) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let (n, c, h, w) = xv.dim();
        let hw = (h * w) as f64;
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        let mut inv_std = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let ch = xv.index_axis(Axis(0), ni);
                let ch = ch.index_axis(Axis(0), ci);
                let mean = ch.sum() / hw;
                let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / hw;
                let is = 1.0 / (var + IN_EPS).sqrt();
                inv_std[[ni, ci]] = is;
                for i in 0..h {
                    for j in 0..w {
                        out[[ni, ci, i, j]] = (xv[[ni, ci, i, j]] - mean) * is;
                    }
                }
            }
        }
        let needs = self.nodes[x].needs;
        let id = self.push(out.into_dyn(), Op::InstanceNorm { x }, needs);
        self.nodes[id].aux = Some(inv_std.into_dyn());
        id
    }

    /// Per-sample normalization over all channels and spatial positions.
    /// Unlike [`Graph::instance_norm`] this keeps relative channel levels,
    /// which carry flat-color information on synthetic imagery.
    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let (n, c, h, w) = xv.dim();
        let chw = (c * h * w) as f64;
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        let mut inv_std = ndarray::Array1::<f64>::zeros(n);
        for ni in 0..n {
            let s = xv.index_axis(Axis(0), ni);
            let mean = s.sum() / chw;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / chw;
            let is = 1.0 / (var + IN_EPS).sqrt();
            inv_std[ni] = is;
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out[[ni, ci, i, j]] = (xv[[ni, ci, i, j]] - mean) * is;
                    }
                }
            }
        }
        let needs = self.nodes[x].needs;
        let id = self.push(out.into_dyn(), Op::LayerNorm { x }, needs);
        self.nodes[id].aux = Some(inv_std.into_dyn());
        id
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a.max(0.0));
        let needs = self.nodes[x].needs;
        self.push(v, Op::Relu { x }, needs)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.nodes[x]
            .value
            .mapv(|a| if a >= 0.0 { a } else { slope * a });
        let needs = self.nodes[x].needs;
        self.push(v, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(f64::tanh);
        let needs = self.nodes[x].needs;
        self.push(v, Op::Tanh { x }, needs)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        out[[ni, ci, i, j]] = xv[[ni, ci, i / 2, j / 2]];
                    }
                }
            }
        }
        let needs = self.nodes[x].needs;
        self.push(out.into_dyn(), Op::Upsample2x { x }, needs)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as4(&self.nodes[a].value);
        let bv = as4(&self.nodes[b].value);
        let (n, ca, h, w) = av.dim();
        let (nb, cb, hb, wb) = bv.dim();
        assert!(
            n == nb && h == hb && w == wb,
            "concat shape mismatch: {:?} vs {:?}",
            av.dim(),
            bv.dim()
        );
        let mut out = Array4::<f64>::zeros((n, ca + cb, h, w));
        out.slice_mut(ndarray::s![.., 0..ca, .., ..]).assign(&av);
        out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(&bv);
        let needs = self.nodes[a].needs || self.nodes[b].needs;
        self.push(out.into_dyn(), Op::ConcatC { a, b }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let needs = self.nodes[a].needs || self.nodes[b].needs;
        self.push(v, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let needs = self.nodes[a].needs || self.nodes[b].needs;
        self.push(v, Op::Sub { a, b }, needs)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a * c);
        let needs = self.nodes[x].needs;
        self.push(v, Op::Scale { x, c }, needs)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a + c);
        let needs = self.nodes[x].needs;
        self.push(v, Op::AddScalar { x }, needs)
    }

    /// c - x, elementwise.
    pub fn one_minus(&mut self, x: NodeId, c: f64) -> NodeId {
        let s = self.scale(x, -1.0);
        self.add_scalar(s, c)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a * a);
        let needs = self.nodes[x].needs;
        self.push(v, Op::Square { x }, needs)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(f64::abs);
        let needs = self.nodes[x].needs;
        self.push(v, Op::Abs { x }, needs)
    }

    /// Sum over all elements, producing a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[x].value.sum());
        let needs = self.nodes[x].needs;
        self.push(v, Op::Sum { x }, needs)
    }

    /// Mean over all elements.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean absolute difference between two tensors.
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    /// Mean over the batch axis of the per-sample sum of squares.
    pub fn batch_mean_sq_norm(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.shape()[0] as f64;
        let sq = self.square(x);
        let s = self.sum(sq);
        self.scale(s, 1.0 / n)
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let mut v = self.nodes[xs[0]].value.clone();
        for &x in &xs[1..] {
            v = v + &self.nodes[x].value;
        }
        let needs = xs.iter().any(|&x| self.nodes[x].needs);
        self.push(v, Op::AddN { xs: xs.to_vec() }, needs)
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// trainable parameter reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> crate::Result<Gradients> {
        if self.nodes[loss].value.ndim() != 0 {
            return Err(RiftError::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<ArrayD<f64>>> =
            (0..self.n_params).map(|_| None).collect();
        grads[loss] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs && !matches!(self.nodes[id].op, Op::Param(_)) {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    if self.nodes[id].needs {
                        acc_opt(&mut param_grads[*pid], &g);
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let xv = as4(&self.nodes[x].value);
                    let wv = as4(&self.nodes[w].value);
                    let (n, c, h, wd) = xv.dim();
                    let (o, _, kh, kw) = wv.dim();
                    let oh = conv_out_size(h, kh, stride, pad);
                    let ow = conv_out_size(wd, kw, stride, pad);
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    // [o, n*oh*ow] layout matching im2col columns
                    let mut gmat = Array2::<f64>::zeros((o, n * oh * ow));
                    for ni in 0..n {
                        for oc in 0..o {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    gmat[[oc, (ni * oh + oi) * ow + oj]] =
                                        g4[[ni, oc, oi, oj]];
                                }
                            }
                        }
                    }
                    if self.nodes[w].needs || self.nodes[x].needs {
                        let col = im2col(&xv.view(), kh, kw, stride, pad);
                        if self.nodes[w].needs {
                            let dw = gmat.dot(&col.t());
                            let dw = dw
                                .into_shape_with_order((o, c, kh, kw))
                                .unwrap()
                                .into_dyn();
                            acc_node(&mut grads, w, dw);
                        }
                        if self.nodes[x].needs {
                            let wmat = wv.to_shape((o, c * kh * kw)).unwrap().to_owned();
                            let dcol = wmat.t().dot(&gmat);
                            let dx = col2im(&dcol, n, c, h, wd, kh, kw, stride, pad);
                            acc_node(&mut grads, x, dx.into_dyn());
                        }
                    }
                    if self.nodes[b].needs {
                        let mut db = ndarray::Array1::<f64>::zeros(o);
                        for oc in 0..o {
                            db[oc] = gmat.row(oc).sum();
                        }
                        acc_node(&mut grads, b, db.into_dyn());
                    }
                }
                Op::InstanceNorm { x } => {
                    let x = *x;
                    let y = as4(&self.nodes[id].value);
                    let inv_std = self.nodes[id]
                        .aux
                        .as_ref()
                        .unwrap()
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let (n, c, h, w) = y.dim();
                    let hw = (h * w) as f64;
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let mut gsum = 0.0;
                            let mut gysum = 0.0;
                            for i in 0..h {
                                for j in 0..w {
                                    gsum += g4[[ni, ci, i, j]];
                                    gysum += g4[[ni, ci, i, j]] * y[[ni, ci, i, j]];
                                }
                            }
                            let gmean = gsum / hw;
                            let gymean = gysum / hw;
                            let is = inv_std[[ni, ci]];
                            for i in 0..h {
                                for j in 0..w {
                                    dx[[ni, ci, i, j]] = is
                                        * (g4[[ni, ci, i, j]]
                                            - gmean
                                            - y[[ni, ci, i, j]] * gymean);
                                }
                            }
                        }
                    }
                    acc_node(&mut grads, x, dx.into_dyn());
                }
                Op::LayerNorm { x } => {
                    let x = *x;
                    let y = as4(&self.nodes[id].value);
                    let inv_std = self.nodes[id]
                        .aux
                        .as_ref()
                        .unwrap()
                        .view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .unwrap();
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let (n, c, h, w) = y.dim();
                    let chw = (c * h * w) as f64;
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        let gs = g4.index_axis(Axis(0), ni);
                        let ys = y.index_axis(Axis(0), ni);
                        let gmean = gs.sum() / chw;
                        let gymean = gs
                            .iter()
                            .zip(ys.iter())
                            .map(|(&gv, &yv)| gv * yv)
                            .sum::<f64>()
                            / chw;
                        let is = inv_std[ni];
                        for ci in 0..c {
                            for i in 0..h {
                                for j in 0..w {
                                    dx[[ni, ci, i, j]] = is
                                        * (g4[[ni, ci, i, j]]
                                            - gmean
                                            - y[[ni, ci, i, j]] * gymean);
                                }
                            }
                        }
                    }
                    acc_node(&mut grads, x, dx.into_dyn());
                }
                Op::Relu { x } => {
                    let x = *x;
                    let mask = self.nodes[x].value.mapv(|a| if a >= 0.0 { 1.0 } else { 0.0 });
                    acc_node(&mut grads, x, &g * &mask);
                }
                Op::LeakyRelu { x, slope } => {
                    let (x, slope) = (*x, *slope);
                    let mask = self.nodes[x]
                        .value
                        .mapv(|a| if a >= 0.0 { 1.0 } else { slope });
                    acc_node(&mut grads, x, &g * &mask);
                }
                Op::Tanh { x } => {
                    let x = *x;
                    let d = self.nodes[id].value.mapv(|y| 1.0 - y * y);
                    acc_node(&mut grads, x, &g * &d);
                }
                Op::Upsample2x { x } => {
                    let x = *x;
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let (n, c, h2, w2) = g4.dim();
                    let mut dx = Array4::<f64>::zeros((n, c, h2 / 2, w2 / 2));
                    for ni in 0..n {
                        for ci in 0..c {
                            for i in 0..h2 {
                                for j in 0..w2 {
                                    dx[[ni, ci, i / 2, j / 2]] += g4[[ni, ci, i, j]];
                                }
                            }
                        }
                    }
                    acc_node(&mut grads, x, dx.into_dyn());
                }
                Op::ConcatC { a, b } => {
                    let (a, b) = (*a, *b);
                    let ca = self.nodes[a].value.shape()[1];
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    if self.nodes[a].needs {
                        let da = g4.slice(ndarray::s![.., 0..ca, .., ..]).to_owned();
                        acc_node(&mut grads, a, da.into_dyn());
                    }
                    if self.nodes[b].needs {
                        let db = g4.slice(ndarray::s![.., ca.., .., ..]).to_owned();
                        acc_node(&mut grads, b, db.into_dyn());
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].needs {
                        acc_node(&mut grads, a, g.clone());
                    }
                    if self.nodes[b].needs {
                        acc_node(&mut grads, b, g.clone());
                    }
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].needs {
                        acc_node(&mut grads, a, g.clone());
                    }
                    if self.nodes[b].needs {
                        acc_node(&mut grads, b, g.mapv(|v| -v));
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    acc_node(&mut grads, x, g.mapv(|v| v * c));
                }
                Op::AddScalar { x, .. } => {
                    let x = *x;
                    acc_node(&mut grads, x, g);
                }
                Op::Square { x } => {
                    let x = *x;
                    let d = self.nodes[x].value.mapv(|a| 2.0 * a);
                    acc_node(&mut grads, x, &g * &d);
                }
                Op::Abs { x } => {
                    let x = *x;
                    let d = self.nodes[x].value.mapv(|a| {
                        if a > 0.0 {
                            1.0
                        } else if a < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc_node(&mut grads, x, &g * &d);
                }
                Op::Sum { x } => {
                    let x = *x;
                    let gv = *g.first().unwrap();
                    let d = ArrayD::from_elem(self.nodes[x].value.raw_dim(), gv);
                    acc_node(&mut grads, x, d);
                }
                Op::AddN { xs } => {
                    for &x in &xs.clone() {
                        if self.nodes[x].needs {
                            acc_node(&mut grads, x, g.clone());
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            by_param: param_grads,
        })
    }
}

fn as4(v: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("expected a 4-d NCHW tensor")
}

fn acc_node(grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn acc_opt(slot: &mut Option<ArrayD<f64>>, delta: &ArrayD<f64>) {
    match slot {
        Some(g) => *g += delta,
        None => *slot = Some(delta.clone()),
    }
}
