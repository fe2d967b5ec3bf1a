//! Minimal reverse-mode autodiff tape over `ndarray` tensors, covering
//! exactly the operations MD-Net needs: 3D convolution (im2col + GEMM),
//! batch normalization, LeakyReLU/ReLU/sigmoid, 2× max pooling, 2×
//! trilinear upsampling, channel concatenation, squeeze-excitation
//! primitives, and the segmentation losses.
//!
//! Node ids are creation-ordered, so a single reverse sweep is a valid
//! topological backward pass. Fan-out (a node consumed by several later
//! ops) accumulates gradients automatically.

use crate::scalar::Real;
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

pub type NodeId = usize;

enum Op<T: Real> {
    Leaf,
    /// Parameter node; the payload is the parameter-store index.
    Param(usize),
    Conv {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        kernel: usize,
    },
    BatchNormTrain {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Array1<T>,
        inv_std: Array1<T>,
    },
    /// Per-channel `x * mul + add`; used for inference-mode batch norm.
    /// Only `mul` survives to the backward pass.
    ChannelAffine {
        input: NodeId,
        mul: Array1<T>,
    },
    LeakyRelu {
        input: NodeId,
        slope: T,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: NodeId,
    },
    ConcatC {
        a: NodeId,
        b: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    ChannelScale {
        input: NodeId,
        scale: NodeId,
    },
    DiceLoss {
        pred: NodeId,
        target: ArrayD<T>,
        eps: T,
    },
    BceLoss {
        pred: NodeId,
        target: ArrayD<T>,
        clamp: T,
    },
    SumScalars {
        inputs: Vec<NodeId>,
    },
    WeightedSumScalars {
        inputs: Vec<NodeId>,
        weights: Vec<T>,
    },
    SumAll {
        input: NodeId,
    },
}

struct Node<T: Real> {
    value: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    op: Op<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn scalar<T: Real>(v: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        *self.nodes[id].value.first().expect("scalar node")
    }

    pub fn leaf(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, value: ArrayD<T>, store_index: usize) -> NodeId {
        self.push(value, Op::Param(store_index))
    }

    /// Iterates `(store_index, grad)` over all parameter nodes.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &ArrayD<T>)> {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Param(idx) => n.grad.as_ref().map(|g| (idx, g)),
            _ => None,
        })
    }

    // ---- forward ops ----

    /// Same-padding 3D convolution, kernel 3 or 1. Weights are stored as
    /// `(c_out, c_in·k³)`, biases as `(c_out,)`.
    pub fn conv(&mut self, input: NodeId, weight: NodeId, bias: NodeId, kernel: usize) -> NodeId {
        assert!(kernel == 1 || kernel == 3, "unsupported kernel {kernel}");
        let x = view4(&self.nodes[input].value);
        let w2 = self.nodes[weight].value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.nodes[bias].value.view().into_dimensionality::<Ix1>().unwrap();
        let (_, d, h, wd) = x.dim();
        let co = w2.nrows();
        let mut out2: Array2<T> = if kernel == 1 {
            let x2 = flatten2(&self.nodes[input].value);
            w2.dot(&x2)
        } else {
            let col = im2col(&x);
            w2.dot(&col)
        };
        out2 += &b.insert_axis(Axis(1));
        let out = out2.into_shape_with_order((co, d, h, wd)).unwrap();
        self.push(out.into_dyn(), Op::Conv { input, weight, bias, kernel })
    }

    /// Training-mode batch norm over the spatial axes of a single volume
    /// (mini-batch size one). Returns the node plus the batch statistics so
    /// the caller can maintain running averages.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> (NodeId, Array1<T>, Array1<T>) {
        let x = view4(&self.nodes[input].value);
        let (c, d, h, w) = x.dim();
        let n = T::from_usize(d * h * w).unwrap();
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ch in 0..c {
            let xc = x.index_axis(Axis(0), ch);
            let m = xc.sum() / n;
            let v = xc.fold(T::zero(), |acc, &e| acc + (e - m) * (e - m)) / n;
            mean[ch] = m;
            var[ch] = v;
        }
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let g = self.nodes[gamma].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let b = self.nodes[beta].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut out = x.to_owned();
        for ch in 0..c {
            let scale = g[ch] * inv_std[ch];
            let shift = b[ch] - mean[ch] * scale;
            out.index_axis_mut(Axis(0), ch).mapv_inplace(|e| e * scale + shift);
        }
        let id = self.push(
            out.into_dyn(),
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
            },
        );
        (id, mean, var)
    }

    /// Inference-mode batch norm folded into a per-channel affine map.
    pub fn channel_affine(&mut self, input: NodeId, mul: Array1<T>, add: Array1<T>) -> NodeId {
        let x = view4(&self.nodes[input].value);
        let mut out = x.to_owned();
        let c = out.dim().0;
        for ch in 0..c {
            let (m, a) = (mul[ch], add[ch]);
            out.index_axis_mut(Axis(0), ch).mapv_inplace(|e| e * m + a);
        }
        self.push(out.into_dyn(), Op::ChannelAffine { input, mul })
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: T) -> NodeId {
        let out = self.nodes[input]
            .value
            .mapv(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu { input, slope })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.nodes[input].value.mapv(|v| v.max(T::zero()));
        self.push(out, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = self.nodes[input]
            .value
            .mapv(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid { input })
    }

    /// 2×2×2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, input: NodeId) -> NodeId {
        let x = view4(&self.nodes[input].value);
        let (c, d, h, w) = x.dim();
        assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "odd spatial dims");
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let mut out = Array4::zeros((c, od, oh, ow));
        let mut argmax = vec![0u32; c * od * oh * ow];
        let mut flat = 0usize;
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let (sz, sy, sx) = (2 * z + dz, 2 * y + dy, 2 * xx + dx);
                                    let v = x[[ch, sz, sy, sx]];
                                    if v > best {
                                        best = v;
                                        best_idx = ((ch * d + sz) * h + sy) * w + sx;
                                    }
                                }
                            }
                        }
                        out[[ch, z, y, xx]] = best;
                        argmax[flat] = best_idx as u32;
                        flat += 1;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::MaxPool2 { input, argmax })
    }

    /// 2× trilinear upsampling (align-corners false), separable per axis.
    pub fn upsample2(&mut self, input: NodeId) -> NodeId {
        let x = view4(&self.nodes[input].value).to_owned();
        let out = upsample_axis(&upsample_axis(&upsample_axis(&x, 1), 2), 3);
        self.push(out.into_dyn(), Op::Upsample2 { input })
    }

    /// Concatenation along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = view4(&self.nodes[a].value);
        let vb = view4(&self.nodes[b].value);
        assert_eq!(&va.shape()[1..], &vb.shape()[1..], "concat spatial dims");
        let out = ndarray::concatenate(Axis(0), &[va, vb]).unwrap();
        self.push(
            out.as_standard_layout().to_owned().into_dyn(),
            Op::ConcatC { a, b },
        )
    }

    /// Global average pooling `(C, D, H, W) → (C,)`.
    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        let x = view4(&self.nodes[input].value);
        let (c, d, h, w) = x.dim();
        let n = T::from_usize(d * h * w).unwrap();
        let out = Array1::from_shape_fn(c, |ch| x.index_axis(Axis(0), ch).sum() / n);
        self.push(out.into_dyn(), Op::GlobalAvgPool { input })
    }

    /// Fully connected layer on a vector: `W x + b`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let x = self.nodes[input].value.view().into_dimensionality::<Ix1>().unwrap();
        let w = self.nodes[weight].value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.nodes[bias].value.view().into_dimensionality::<Ix1>().unwrap();
        let out = w.dot(&x) + b;
        self.push(out.into_dyn(), Op::Dense { input, weight, bias })
    }

    /// Per-channel gating: `out[c, ...] = input[c, ...] * scale[c]`.
    pub fn channel_scale(&mut self, input: NodeId, scale: NodeId) -> NodeId {
        let x = view4(&self.nodes[input].value);
        let s = self.nodes[scale].value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = x.to_owned();
        for ch in 0..out.dim().0 {
            let k = s[ch];
            out.index_axis_mut(Axis(0), ch).mapv_inplace(|e| e * k);
        }
        self.push(out.into_dyn(), Op::ChannelScale { input, scale })
    }

    /// Soft Dice loss `−2Σpt / (Σp + Σt + ε)`, a scalar node.
    pub fn dice_loss(&mut self, pred: NodeId, target: ArrayD<T>, eps: T) -> NodeId {
        let p = &self.nodes[pred].value;
        assert_eq!(p.shape(), target.shape());
        let inter: T = p.iter().zip(target.iter()).map(|(&a, &b)| a * b).sum();
        let denom: T = p.sum() + target.sum() + eps;
        let two = T::from_f64_c(2.0);
        let value = -two * inter / denom;
        self.push(scalar(value), Op::DiceLoss { pred, target, eps })
    }

    /// Mean binary cross-entropy with probability clamping.
    pub fn bce_loss(&mut self, pred: NodeId, target: ArrayD<T>, clamp: T) -> NodeId {
        let p = &self.nodes[pred].value;
        assert_eq!(p.shape(), target.shape());
        let n = T::from_usize(p.len()).unwrap();
        let one = T::one();
        let mut acc = T::zero();
        for (&pv, &tv) in p.iter().zip(target.iter()) {
            let q = pv.max(clamp).min(one - clamp);
            acc += -(tv * q.ln() + (one - tv) * (one - q).ln());
        }
        self.push(scalar(acc / n), Op::BceLoss { pred, target, clamp })
    }

    pub fn sum_scalars(&mut self, inputs: Vec<NodeId>) -> NodeId {
        let v = inputs.iter().map(|&i| self.scalar_value(i)).sum();
        self.push(scalar(v), Op::SumScalars { inputs })
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum_scalars(&mut self, inputs: Vec<NodeId>, weights: Vec<T>) -> NodeId {
        assert_eq!(inputs.len(), weights.len());
        let v = inputs
            .iter()
            .zip(&weights)
            .map(|(&i, &w)| w * self.scalar_value(i))
            .sum();
        self.push(scalar(v), Op::WeightedSumScalars { inputs, weights })
    }

    /// Sum of all elements; handy for tests.
    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let v = self.nodes[input].value.sum();
        self.push(scalar(v), Op::SumAll { input })
    }

    // ---- backward ----

    /// Reverse sweep from `root` (a scalar node).
    pub fn backward(&mut self, root: NodeId) {
        assert!(self.nodes[root].value.ndim() == 0, "root must be scalar");
        self.nodes[root].grad = Some(scalar(T::one()));
        for i in (0..=root).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_backward(i, &grad);
            for (pid, contrib) in contributions {
                match &mut self.nodes[pid].grad {
                    Some(g) => *g += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
            self.nodes[i].grad = Some(grad);
        }
    }

    fn local_backward(&self, i: NodeId, grad: &ArrayD<T>) -> Vec<(NodeId, ArrayD<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv { input, weight, bias, kernel } => {
                let x = view4(&self.nodes[*input].value);
                let w2 = self.nodes[*weight].value.view().into_dimensionality::<Ix2>().unwrap();
                let (ci, d, h, wd) = x.dim();
                let n = d * h * wd;
                let co = w2.nrows();
                let g2 = grad.view().into_shape_with_order((co, n)).unwrap();
                let db = g2.sum_axis(Axis(1));
                let (dw, dx) = if *kernel == 1 {
                    let x2 = flatten2(&self.nodes[*input].value);
                    let dw = g2.dot(&x2.t());
                    let dx = w2.t().dot(&g2);
                    let dx = dx.into_shape_with_order((ci, d, h, wd)).unwrap();
                    (dw, dx)
                } else {
                    let col = im2col(&x);
                    let dw = g2.dot(&col.t());
                    let dcol = w2.t().dot(&g2);
                    let dx = col2im(&dcol, ci, d, h, wd);
                    (dw, dx)
                };
                vec![
                    (*input, dx.into_dyn()),
                    (*weight, dw.into_dyn()),
                    (*bias, db.into_dyn()),
                ]
            }
            Op::BatchNormTrain { input, gamma, beta, mean, inv_std } => {
                let x = view4(&self.nodes[*input].value);
                let g4 = view4(grad);
                let gam = self.nodes[*gamma].value.view().into_dimensionality::<Ix1>().unwrap();
                let (c, d, h, w) = x.dim();
                let n = T::from_usize(d * h * w).unwrap();
                let mut dgamma = Array1::zeros(c);
                let mut dbeta = Array1::zeros(c);
                let mut dx = Array4::zeros((c, d, h, w));
                for ch in 0..c {
                    let xc = x.index_axis(Axis(0), ch);
                    let gc = g4.index_axis(Axis(0), ch);
                    let (m, is) = (mean[ch], inv_std[ch]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    ndarray::Zip::from(&xc).and(&gc).for_each(|&xv, &gv| {
                        sum_g += gv;
                        sum_gx += gv * (xv - m) * is;
                    });
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let mg = sum_g / n;
                    let mgx = sum_gx / n;
                    let k = gam[ch] * is;
                    let mut dxc = dx.index_axis_mut(Axis(0), ch);
                    ndarray::Zip::from(&mut dxc).and(&xc).and(&gc).for_each(|o, &xv, &gv| {
                        let xhat = (xv - m) * is;
                        *o = k * (gv - mg - xhat * mgx);
                    });
                }
                vec![
                    (*input, dx.into_dyn()),
                    (*gamma, dgamma.into_dyn()),
                    (*beta, dbeta.into_dyn()),
                ]
            }
            Op::ChannelAffine { input, mul } => {
                let g4 = view4(grad);
                let mut dx = g4.to_owned();
                for ch in 0..dx.dim().0 {
                    let m = mul[ch];
                    dx.index_axis_mut(Axis(0), ch).mapv_inplace(|e| e * m);
                }
                vec![(*input, dx.into_dyn())]
            }
            Op::LeakyRelu { input, slope } => {
                let x = &self.nodes[*input].value;
                let mut dx = grad.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|g, &xv| {
                    if xv <= T::zero() {
                        *g *= *slope;
                    }
                });
                vec![(*input, dx)]
            }
            Op::Relu { input } => {
                let x = &self.nodes[*input].value;
                let mut dx = grad.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|g, &xv| {
                    if xv <= T::zero() {
                        *g = T::zero();
                    }
                });
                vec![(*input, dx)]
            }
            Op::Sigmoid { input } => {
                let y = &node.value;
                let mut dx = grad.clone();
                ndarray::Zip::from(&mut dx).and(y).for_each(|g, &yv| {
                    *g = *g * yv * (T::one() - yv);
                });
                vec![(*input, dx)]
            }
            Op::MaxPool2 { input, argmax } => {
                let shape = self.nodes[*input].value.shape().to_vec();
                let mut dx = ArrayD::zeros(IxDyn(&shape));
                let dx_flat = dx.as_slice_mut().unwrap();
                for (g, &idx) in grad.iter().zip(argmax.iter()) {
                    dx_flat[idx as usize] += *g;
                }
                vec![(*input, dx)]
            }
            Op::Upsample2 { input } => {
                let in_shape = self.nodes[*input].value.shape().to_vec();
                let g4 = view4(grad).to_owned();
                let g3 = downsample_adjoint(&g4, 3, in_shape[3]);
                let g2 = downsample_adjoint(&g3, 2, in_shape[2]);
                let g1 = downsample_adjoint(&g2, 1, in_shape[1]);
                vec![(*input, g1.into_dyn())]
            }
            Op::ConcatC { a, b } => {
                let ca = self.nodes[*a].value.shape()[0];
                let g4 = view4(grad);
                let ga = g4.slice(ndarray::s![..ca, .., .., ..]).to_owned();
                let gb = g4.slice(ndarray::s![ca.., .., .., ..]).to_owned();
                vec![(*a, ga.into_dyn()), (*b, gb.into_dyn())]
            }
            Op::GlobalAvgPool { input } => {
                let shape = self.nodes[*input].value.shape().to_vec();
                let n = T::from_usize(shape[1] * shape[2] * shape[3]).unwrap();
                let g1 = grad.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array4::zeros((shape[0], shape[1], shape[2], shape[3]));
                for ch in 0..shape[0] {
                    dx.index_axis_mut(Axis(0), ch).fill(g1[ch] / n);
                }
                vec![(*input, dx.into_dyn())]
            }
            Op::Dense { input, weight, bias } => {
                let x = self.nodes[*input].value.view().into_dimensionality::<Ix1>().unwrap();
                let w = self.nodes[*weight].value.view().into_dimensionality::<Ix2>().unwrap();
                let g1 = grad.view().into_dimensionality::<Ix1>().unwrap();
                let mut dw = Array2::zeros(w.raw_dim());
                for r in 0..w.nrows() {
                    for c in 0..w.ncols() {
                        dw[[r, c]] = g1[r] * x[c];
                    }
                }
                let dx = w.t().dot(&g1);
                vec![
                    (*input, dx.into_dyn()),
                    (*weight, dw.into_dyn()),
                    (*bias, g1.to_owned().into_dyn()),
                ]
            }
            Op::ChannelScale { input, scale } => {
                let x = view4(&self.nodes[*input].value);
                let s = self.nodes[*scale].value.view().into_dimensionality::<Ix1>().unwrap();
                let g4 = view4(grad);
                let c = x.dim().0;
                let mut dx = g4.to_owned();
                let mut ds = Array1::zeros(c);
                for ch in 0..c {
                    let k = s[ch];
                    dx.index_axis_mut(Axis(0), ch).mapv_inplace(|e| e * k);
                    let gx = g4.index_axis(Axis(0), ch);
                    let xc = x.index_axis(Axis(0), ch);
                    let mut acc = T::zero();
                    ndarray::Zip::from(&gx).and(&xc).for_each(|&g, &xv| acc += g * xv);
                    ds[ch] = acc;
                }
                vec![(*input, dx.into_dyn()), (*scale, ds.into_dyn())]
            }
            Op::DiceLoss { pred, target, eps } => {
                let p = &self.nodes[*pred].value;
                let g = *grad.first().unwrap();
                let two = T::from_f64_c(2.0);
                let denom: T = p.sum() + target.sum() + *eps;
                let loss = self.scalar_value(i);
                // dL/dp_i = (−2 t_i − L) / denom
                let dp = target.mapv(|t| g * (-two * t - loss) / denom);
                vec![(*pred, dp)]
            }
            Op::BceLoss { pred, target, clamp } => {
                let p = &self.nodes[*pred].value;
                let g = *grad.first().unwrap();
                let n = T::from_usize(p.len()).unwrap();
                let one = T::one();
                let mut dp = ArrayD::zeros(p.raw_dim());
                ndarray::Zip::from(&mut dp).and(p).and(target).for_each(|o, &pv, &tv| {
                    if pv > *clamp && pv < one - *clamp {
                        let q = pv;
                        *o = g * (q - tv) / (q * (one - q)) / n;
                    }
                });
                vec![(*pred, dp)]
            }
            Op::SumScalars { inputs } => {
                let g = grad.clone();
                inputs.iter().map(|&id| (id, g.clone())).collect()
            }
            Op::WeightedSumScalars { inputs, weights } => {
                let g = *grad.first().unwrap();
                inputs
                    .iter()
                    .zip(weights)
                    .map(|(&id, &w)| (id, scalar(g * w)))
                    .collect()
            }
            Op::SumAll { input } => {
                let g = *grad.first().unwrap();
                let shape = self.nodes[*input].value.shape().to_vec();
                vec![(*input, ArrayD::from_elem(IxDyn(&shape), g))]
            }
        }
    }
}

fn view4<T: Real>(a: &ArrayD<T>) -> ndarray::ArrayView4<'_, T> {
    a.view().into_dimensionality::<Ix4>().unwrap()
}

/// Flattens `(C, D, H, W)` to `(C, D·H·W)` without copying.
fn flatten2<T: Real>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    let s = a.shape();
    a.view()
        .into_shape_with_order((s[0], s[1] * s[2] * s[3]))
        .unwrap()
}

/// im2col for a 3×3×3 same-padding convolution: output `(C·27, D·H·W)`.
fn im2col<T: Real>(x: &ndarray::ArrayView4<'_, T>) -> Array2<T> {
    let (c, d, h, w) = x.dim();
    let n = d * h * w;
    let src = x.as_slice().expect("standard layout");
    let mut col = Array2::zeros((c * 27, n));
    {
        let col_flat = col.as_slice_mut().unwrap();
        for ch in 0..c {
            for kz in 0..3usize {
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let row = ((ch * 3 + kz) * 3 + ky) * 3 + kx;
                        let row_base = row * n;
                        let x0 = 1usize.saturating_sub(kx);
                        let x1 = w - (kx.saturating_sub(1));
                        for z in 0..d {
                            let sz = z as isize + kz as isize - 1;
                            if sz < 0 || sz >= d as isize {
                                continue;
                            }
                            for y in 0..h {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let dst_base = row_base + (z * h + y) * w;
                                let src_base =
                                    ((ch * d + sz as usize) * h + sy as usize) * w;
                                let sx0 = (x0 as isize + kx as isize - 1) as usize;
                                col_flat[dst_base + x0..dst_base + x1].copy_from_slice(
                                    &src[src_base + sx0..src_base + sx0 + (x1 - x0)],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of `im2col`: scatter-adds `(C·27, N)` back to `(C, D, H, W)`.
fn col2im<T: Real>(dcol: &Array2<T>, c: usize, d: usize, h: usize, w: usize) -> Array4<T> {
    let n = d * h * w;
    let mut dx = Array4::zeros((c, d, h, w));
    let dst = dx.as_slice_mut().unwrap();
    let src = dcol.as_slice().expect("standard layout");
    for ch in 0..c {
        for kz in 0..3usize {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let row = ((ch * 3 + kz) * 3 + ky) * 3 + kx;
                    let row_base = row * n;
                    let x0 = 1usize.saturating_sub(kx);
                    let x1 = w - (kx.saturating_sub(1));
                    for z in 0..d {
                        let sz = z as isize + kz as isize - 1;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let col_base = row_base + (z * h + y) * w;
                            let dst_base = ((ch * d + sz as usize) * h + sy as usize) * w;
                            let sx0 = (x0 as isize + kx as isize - 1) as usize;
                            for t in 0..(x1 - x0) {
                                dst[dst_base + sx0 + t] += src[col_base + x0 + t];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Linear interpolation weights for 2× upsampling (align-corners false):
/// source coordinate of output `o` is `(o + 0.5)/2 − 0.5`, clamped.
fn interp_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let x = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (x.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let t = x - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

fn upsample_axis<T: Real>(x: &Array4<T>, axis: usize) -> Array4<T> {
    let mut shape = [x.dim().0, x.dim().1, x.dim().2, x.dim().3];
    let in_len = shape[axis];
    shape[axis] = in_len * 2;
    let taps = interp_taps(in_len * 2, in_len);
    let mut out = Array4::zeros(shape);
    for (o, &(i0, i1, t)) in taps.iter().enumerate() {
        let (w0, w1) = (T::from_f64_c(1.0 - t), T::from_f64_c(t));
        let a = x.index_axis(Axis(axis), i0);
        let b = x.index_axis(Axis(axis), i1);
        let mut dst = out.index_axis_mut(Axis(axis), o);
        ndarray::Zip::from(&mut dst).and(&a).and(&b).for_each(|d, &av, &bv| {
            *d = av * w0 + bv * w1;
        });
    }
    out
}

fn downsample_adjoint<T: Real>(g: &Array4<T>, axis: usize, in_len: usize) -> Array4<T> {
    let mut shape = [g.dim().0, g.dim().1, g.dim().2, g.dim().3];
    shape[axis] = in_len;
    let taps = interp_taps(in_len * 2, in_len);
    let mut out = Array4::zeros(shape);
    for (o, &(i0, i1, t)) in taps.iter().enumerate() {
        let (w0, w1) = (T::from_f64_c(1.0 - t), T::from_f64_c(t));
        let go = g.index_axis(Axis(axis), o);
        {
            let mut d0 = out.index_axis_mut(Axis(axis), i0);
            ndarray::Zip::from(&mut d0).and(&go).for_each(|d, &gv| *d += gv * w0);
        }
        let mut d1 = out.index_axis_mut(Axis(axis), i1);
        ndarray::Zip::from(&mut d1).and(&go).for_each(|d, &gv| *d += gv * w1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr4(rng: &mut ChaCha8Rng, c: usize, d: usize, h: usize, w: usize) -> ArrayD<f64> {
        Array4::from_shape_fn((c, d, h, w), |_| rng.gen_range(-1.0..1.0)).into_dyn()
    }

    #[test]
    fn weighted_sum_scalars_value_and_grad() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(scalar(2.0));
        let b = t.leaf(scalar(-1.5));
        let xa = t.sum_all(a);
        let xb = t.sum_all(b);
        let root = t.weighted_sum_scalars(vec![xa, xb], vec![3.0, 0.5]);
        assert!((t.scalar_value(root) - (3.0 * 2.0 + 0.5 * -1.5)).abs() < 1e-12);
        t.backward(root);
        assert!((t.grad(a).unwrap().first().unwrap() - 3.0).abs() < 1e-12);
        assert!((t.grad(b).unwrap().first().unwrap() - 0.5).abs() < 1e-12);
    }

    /// Central finite differences of `f` w.r.t. a leaf's elements.
    fn finite_diff(
        build: &dyn Fn(&ArrayD<f64>) -> f64,
        x: &ArrayD<f64>,
        h: f64,
    ) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (build(&xp) - build(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_grad_close(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, tol: f64) {
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!(
                (a - n).abs() / denom < tol,
                "grad mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn conv3_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_arr4(&mut rng, 2, 3, 4, 3);
        let w = Array2::from_shape_fn((3, 2 * 27), |_| rng.gen_range(-0.3..0.3)).into_dyn();
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-0.3..0.3)).into_dyn();

        let eval = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| {
            let mut t = Tape::<f64>::new();
            let xi = t.leaf(x.clone());
            let wi = t.leaf(w.clone());
            let bi = t.leaf(b.clone());
            let c = t.conv(xi, wi, bi, 3);
            let s = t.sigmoid(c);
            let root = t.sum_all(s);
            (t, xi, wi, bi, root)
        };

        let (mut t, xi, wi, bi, root) = eval(&x, &w, &b);
        t.backward(root);
        let fd_x = finite_diff(&|xx| {
            let (t, _, _, _, r) = eval(xx, &w, &b);
            t.scalar_value(r)
        }, &x, 1e-5);
        let fd_w = finite_diff(&|ww| {
            let (t, _, _, _, r) = eval(&x, ww, &b);
            t.scalar_value(r)
        }, &w, 1e-5);
        let fd_b = finite_diff(&|bb| {
            let (t, _, _, _, r) = eval(&x, &w, bb);
            t.scalar_value(r)
        }, &b, 1e-5);
        assert_grad_close(t.grad(xi).unwrap(), &fd_x, 1e-5);
        assert_grad_close(t.grad(wi).unwrap(), &fd_w, 1e-5);
        assert_grad_close(t.grad(bi).unwrap(), &fd_b, 1e-5);
    }

    #[test]
    fn composite_block_gradients_match_finite_differences() {
        // conv1 → BN → leaky ReLU → SE gating → upsample → maxpool → dice+bce
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_arr4(&mut rng, 2, 2, 2, 2);
        let gamma = Array1::from_shape_fn(2, |_| rng.gen_range(0.5..1.5)).into_dyn();
        let beta = Array1::from_shape_fn(2, |_| rng.gen_range(-0.2..0.2)).into_dyn();
        let fc1w = Array2::from_shape_fn((2, 2), |_| rng.gen_range(-0.5..0.5)).into_dyn();
        let fc1b = Array1::from_shape_fn(2, |_| rng.gen_range(-0.2..0.2)).into_dyn();
        let target = Array4::from_shape_fn((2, 2, 2, 2), |_| {
            if rng.gen_bool(0.5) { 1.0 } else { 0.0 }
        })
        .into_dyn();

        let eval = |x: &ArrayD<f64>, gamma: &ArrayD<f64>, fc1w: &ArrayD<f64>| {
            let mut t = Tape::<f64>::new();
            let xi = t.leaf(x.clone());
            let gi = t.leaf(gamma.clone());
            let bi = t.leaf(beta.clone());
            let w1 = t.leaf(fc1w.clone());
            let b1 = t.leaf(fc1b.clone());
            let (bn, _, _) = t.batch_norm_train(xi, gi, bi, 1e-5);
            let lr = t.leaky_relu(bn, 0.01);
            let gap = t.global_avg_pool(lr);
            let fc = t.dense(gap, w1, b1);
            let fr = t.relu(fc);
            let sg = t.sigmoid(fr);
            let gated = t.channel_scale(lr, sg);
            let up = t.upsample2(gated);
            let down = t.max_pool2(up);
            let prob = t.sigmoid(down);
            let dice = t.dice_loss(prob, target.clone(), 1e-5);
            let bce = t.bce_loss(prob, target.clone(), 1e-7);
            let root = t.sum_scalars(vec![dice, bce]);
            (t, xi, gi, w1, root)
        };

        let (mut t, xi, gi, w1, root) = eval(&x, &gamma, &fc1w);
        t.backward(root);
        let fd_x = finite_diff(&|v| {
            let (t, _, _, _, r) = eval(v, &gamma, &fc1w);
            t.scalar_value(r)
        }, &x, 1e-6);
        let fd_g = finite_diff(&|v| {
            let (t, _, _, _, r) = eval(&x, v, &fc1w);
            t.scalar_value(r)
        }, &gamma, 1e-6);
        let fd_w = finite_diff(&|v| {
            let (t, _, _, _, r) = eval(&x, &gamma, v);
            t.scalar_value(r)
        }, &fc1w, 1e-6);
        assert_grad_close(t.grad(xi).unwrap(), &fd_x, 1e-3);
        assert_grad_close(t.grad(gi).unwrap(), &fd_g, 1e-3);
        assert_grad_close(t.grad(w1).unwrap(), &fd_w, 1e-3);
    }

    #[test]
    fn concat_routes_gradients_to_both_parents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_arr4(&mut rng, 1, 2, 2, 2);
        let b = rand_arr4(&mut rng, 2, 2, 2, 2);
        let mut t = Tape::<f64>::new();
        let ai = t.leaf(a);
        let bi = t.leaf(b);
        let c = t.concat_channels(ai, bi);
        let root = t.sum_all(c);
        t.backward(root);
        assert!(t.grad(ai).unwrap().iter().all(|&g| g == 1.0));
        assert!(t.grad(bi).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x) + sum(x) → dx = 2 everywhere.
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Array4::from_elem((1, 2, 2, 2), 0.5).into_dyn());
        let s1 = t.sum_all(x);
        let s2 = t.sum_all(x);
        let root = t.sum_scalars(vec![s1, s2]);
        t.backward(root);
        assert!(t.grad(x).unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn upsample_doubles_and_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_arr4(&mut rng, 2, 2, 3, 4);
        let mut t = Tape::<f64>::new();
        let xi = t.leaf(x.clone());
        let up = t.upsample2(xi);
        assert_eq!(t.value(up).shape(), &[2, 4, 6, 8]);
        // Interior mass is preserved by linear interpolation; just check
        // the constant-volume case exactly.
        let c = t.leaf(Array4::from_elem((1, 2, 2, 2), 3.0).into_dyn());
        let upc = t.upsample2(c);
        assert!(t.value(upc).iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn maxpool_selects_maximum() {
        let mut x = Array4::zeros((1, 2, 2, 2));
        x[[0, 1, 0, 1]] = 7.0;
        let mut t = Tape::<f64>::new();
        let xi = t.leaf(x.into_dyn());
        let p = t.max_pool2(xi);
        assert_eq!(t.value(p).shape(), &[1, 1, 1, 1]);
        assert_eq!(t.value(p)[[0, 0, 0, 0]], 7.0);
        let root = t.sum_all(p);
        t.backward(root);
        let g = t.grad(xi).unwrap();
        assert_eq!(g[[0, 1, 0, 1]], 1.0);
        assert_eq!(g.sum(), 1.0);
    }
}
