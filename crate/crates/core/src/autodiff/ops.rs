use super::kernels::{self, PlaneGeom};
use super::{Op, Tape, Var};
use crate::error::TensorError;
use crate::tensor::{gemm, split_at_axis, Layout, Scalar, Tensor};

/// Spatial padding of a correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on each side; requires odd kernels.
    Same,
    /// No padding.
    Valid,
}

impl Padding {
    fn amount(self, op: &'static str, k: usize) -> Result<usize, TensorError> {
        match self {
            Padding::Valid => Ok(0),
            Padding::Same if k % 2 == 1 => Ok((k - 1) / 2),
            Padding::Same => Err(TensorError::InvalidArgument {
                op,
                msg: format!("`same` padding needs an odd kernel, got {k}"),
            }),
        }
    }
}

fn require_same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

fn require_rank(op: &'static str, shape: &[usize], ranks: &[usize]) -> Result<(), TensorError> {
    if !ranks.contains(&shape.len()) {
        return Err(TensorError::InvalidShape {
            op,
            msg: format!("expected rank in {ranks:?}, got shape {shape:?}"),
        });
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        require_same_shape("add", va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape(), data)?;
        self.push("add", value, Op::Add(ia, ib), &[ia, ib])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        require_same_shape("mul", va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape(), data)?;
        self.push("mul", value, Op::Mul(ia, ib), &[ia, ib])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let value = Tensor::new(va.shape(), va.data().iter().map(|&x| x * s).collect())?;
        self.push("scale", value, Op::Scale(ia, s), &[ia])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        self.push("sum", value, Op::Sum(ia), &[ia])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(ia), &[ia])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let inputs = parts
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>, _>>()?;
        let Some(&first) = inputs.first() else {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            });
        };
        let base = self.nodes[first].value.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &i in &inputs {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &i in &inputs {
                let v = &self.nodes[i].value;
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.clone(),
                axis,
            },
            &inputs,
        )
    }

    /// Keeps only the last index along `axis` (the axis is retained with extent 1).
    pub fn slice_last(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if axis >= v.rank() || v.shape()[axis] == 0 {
            return Err(TensorError::InvalidArgument {
                op: "slice_last",
                msg: format!("axis {axis} unusable for shape {:?}", v.shape()),
            });
        }
        let (outer, len, inner) = split_at_axis(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * len + len - 1) * inner;
            data.extend_from_slice(&v.data()[start..start + inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, data)?;
        self.push("slice_last", value, Op::SliceLast { input: ia, axis }, &[ia])
    }

    /// Dense 2D cross-correlation: `(Cin, H, W) ⋆ (Cout, Cin, kh, kw) -> (Cout, Ho, Wo)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: Padding,
        stride: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let (ii, iw) = (self.check(input)?, self.check(weight)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let (x, w) = (&self.nodes[ii].value, &self.nodes[iw].value);
        require_rank(OP, x.shape(), &[3])?;
        require_rank(OP, w.shape(), &[4])?;
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        if w.shape()[1] != cin {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        if stride < 1 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "stride must be at least 1".into(),
            });
        }
        let pads = (padding.amount(OP, kh)?, padding.amount(OP, kw)?);
        let geom = PlaneGeom::new((h, wd), (kh, kw), stride, pads).ok_or_else(|| {
            TensorError::InvalidShape {
                op: OP,
                msg: format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            }
        })?;
        let plane_in = h * wd;
        let plane_out = geom.ho * geom.wo;
        let mut out = vec![T::zero(); cout * plane_out];
        for ci in 0..cin {
            let xin = &x.data()[ci * plane_in..(ci + 1) * plane_in];
            let active = kernels::active_rows(xin, wd);
            for co in 0..cout {
                let k = &w.data()[(co * cin + ci) * kh * kw..][..kh * kw];
                kernels::correlate_plane(
                    &geom,
                    xin,
                    Some(&active),
                    k,
                    &mut out[co * plane_out..(co + 1) * plane_out],
                );
            }
        }
        if let Some(ib) = ib {
            let b = &self.nodes[ib].value;
            require_same_shape(OP, b.shape(), &[cout])?;
            for (co, chunk) in out.chunks_exact_mut(plane_out).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let value = Tensor::new([cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![ii, iw];
        inputs.extend(ib);
        self.push(
            OP,
            value,
            Op::Conv2d {
                input: ii,
                weight: iw,
                bias: ib,
                geom,
            },
            &inputs,
        )
    }

    /// Per-channel correlation with `valid` temporal and `same` spatial padding.
    ///
    /// Accepts `(C, T, H, W)` with a `(C, kt, kh, kw)` kernel, or `(C, H, W)`
    /// with a `(C, kh, kw)` kernel. A spatial `stride` of 2 halves H and W.
    pub fn depthwise(&mut self, input: Var, weight: Var, stride: usize) -> Result<Var, TensorError> {
        const OP: &str = "depthwise";
        let (ii, iw) = (self.check(input)?, self.check(weight)?);
        let (x, w) = (&self.nodes[ii].value, &self.nodes[iw].value);
        require_rank(OP, x.shape(), &[3, 4])?;
        if w.rank() != x.rank() || w.shape()[0] != x.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let temporal = x.rank() == 4;
        let (c, t, h, wd) = if temporal {
            (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3])
        } else {
            (x.shape()[0], 1, x.shape()[1], x.shape()[2])
        };
        let (kt, kh, kw) = if temporal {
            (w.shape()[1], w.shape()[2], w.shape()[3])
        } else {
            (1, w.shape()[1], w.shape()[2])
        };
        if kt == 0 || t < kt {
            return Err(TensorError::InvalidShape {
                op: OP,
                msg: format!(
                    "temporal extent {t} is smaller than the temporal kernel {kt}: \
                     an unpadded convolution would leave {t} - {kt} + 1 <= 0 frames"
                ),
            });
        }
        if stride < 1 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "stride must be at least 1".into(),
            });
        }
        let pads = (Padding::Same.amount(OP, kh)?, Padding::Same.amount(OP, kw)?);
        let geom = PlaneGeom::new((h, wd), (kh, kw), stride, pads).ok_or_else(|| {
            TensorError::InvalidShape {
                op: OP,
                msg: format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            }
        })?;
        let t_out = t - kt + 1;
        let plane_in = h * wd;
        let plane_out = geom.ho * geom.wo;
        let active = kernels::active_rows(x.data(), wd);
        let mut out = vec![T::zero(); c * t_out * plane_out];
        for ch in 0..c {
            for to in 0..t_out {
                let dst = &mut out[(ch * t_out + to) * plane_out..][..plane_out];
                for dt in 0..kt {
                    let src_plane = ch * t + to + dt;
                    let src = &x.data()[src_plane * plane_in..][..plane_in];
                    let rows = &active[src_plane * h..][..h];
                    let k = &w.data()[(ch * kt + dt) * kh * kw..][..kh * kw];
                    kernels::correlate_plane(&geom, src, Some(rows), k, dst);
                }
            }
        }
        let shape: Vec<usize> = if temporal {
            vec![c, t_out, geom.ho, geom.wo]
        } else {
            vec![c, geom.ho, geom.wo]
        };
        let value = Tensor::new(shape, out)?;
        self.push(
            OP,
            value,
            Op::Depthwise {
                input: ii,
                weight: iw,
                kt,
                geom,
            },
            &[ii, iw],
        )
    }

    /// Channel mixing `(Cin, ...) -> (Cout, ...)` with a `(Cout, Cin)` matrix.
    pub fn pointwise(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        const OP: &str = "pointwise";
        let (ii, iw) = (self.check(input)?, self.check(weight)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let (x, w) = (&self.nodes[ii].value, &self.nodes[iw].value);
        if x.rank() < 1 || w.rank() != 2 || w.shape()[1] != x.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let (cout, cin) = (w.shape()[0], w.shape()[1]);
        let n = x.len() / cin.max(1);
        let mut out = vec![T::zero(); cout * n];
        gemm((cout, cin, n), w.data(), Layout::Normal, x.data(), Layout::Normal, T::zero(), &mut out);
        if let Some(ib) = ib {
            let b = &self.nodes[ib].value;
            require_same_shape(OP, b.shape(), &[cout])?;
            for (co, row) in out.chunks_exact_mut(n.max(1)).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = cout;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![ii, iw];
        inputs.extend(ib);
        self.push(
            OP,
            value,
            Op::Pointwise {
                input: ii,
                weight: iw,
                bias: ib,
            },
            &inputs,
        )
    }

    /// Max pooling with window and stride `k` over the last two axes.
    ///
    /// Ties resolve to the first element in row-major window order.
    pub fn maxpool2d(&mut self, input: Var, k: usize) -> Result<Var, TensorError> {
        const OP: &str = "maxpool2d";
        let ii = self.check(input)?;
        let x = &self.nodes[ii].value;
        let r = x.rank();
        if r < 2 || k == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: format!("need rank >= 2 and k >= 1, got shape {:?}, k {k}", x.shape()),
            });
        }
        let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
        if h % k != 0 || w % k != 0 {
            return Err(TensorError::InvalidShape {
                op: OP,
                msg: format!("spatial dims {h}x{w} not divisible by pooling stride {k}"),
            });
        }
        let planes = x.len() / (h * w).max(1);
        let (values, argmax) = kernels::maxpool_planes(x.data(), planes, (h, w), k);
        let mut shape = x.shape().to_vec();
        shape[r - 2] = h / k;
        shape[r - 1] = w / k;
        let value = Tensor::new(shape, values)?;
        self.push(OP, value, Op::MaxPool { input: ii, argmax }, &[ii])
    }

    /// Nearest-neighbour upsampling of the last two axes by an integer factor.
    pub fn upsample_nn(&mut self, input: Var, factor: usize) -> Result<Var, TensorError> {
        const OP: &str = "upsample_nn";
        let ii = self.check(input)?;
        let x = &self.nodes[ii].value;
        let r = x.rank();
        if r < 2 || factor == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: format!("need rank >= 2 and factor >= 1, got shape {:?}, factor {factor}", x.shape()),
            });
        }
        let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
        let planes = x.len() / (h * w).max(1);
        let data = kernels::upsample_planes(x.data(), planes, (h, w), factor);
        let mut shape = x.shape().to_vec();
        shape[r - 2] = h * factor;
        shape[r - 1] = w * factor;
        let value = Tensor::new(shape, data)?;
        self.push(OP, value, Op::Upsample { input: ii, factor }, &[ii])
    }

    pub(super) fn propagate(&mut self, index: usize, grad: &[T]) {
        let mut out: Vec<(usize, Vec<T>)> = Vec::new();
        {
            let node = &self.nodes[index];
            let value = |i: usize| &self.nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    out.push((*a, grad.to_vec()));
                    out.push((*b, grad.to_vec()));
                }
                Op::Mul(a, b) => {
                    if self.wants(*a) {
                        let g = grad.iter().zip(value(*b).data()).map(|(&g, &y)| g * y).collect();
                        out.push((*a, g));
                    }
                    if self.wants(*b) {
                        let g = grad.iter().zip(value(*a).data()).map(|(&g, &x)| g * x).collect();
                        out.push((*b, g));
                    }
                }
                Op::Scale(a, s) => out.push((*a, grad.iter().map(|&g| g * *s).collect())),
                Op::Sum(a) => out.push((*a, vec![grad[0]; value(*a).len()])),
                Op::Reshape(a) => out.push((*a, grad.to_vec())),
                Op::Concat { inputs, axis } => {
                    let (outer, _, inner) = split_at_axis(node.value.shape(), *axis);
                    let mut parts: Vec<Vec<T>> =
                        inputs.iter().map(|&i| Vec::with_capacity(value(i).len())).collect();
                    let mut cursor = 0;
                    for _ in 0..outer {
                        for (p, &i) in parts.iter_mut().zip(inputs) {
                            let block = value(i).shape()[*axis] * inner;
                            p.extend_from_slice(&grad[cursor..cursor + block]);
                            cursor += block;
                        }
                    }
                    out.extend(inputs.iter().copied().zip(parts));
                }
                Op::SliceLast { input, axis } => {
                    let x = value(*input);
                    let (outer, len, inner) = split_at_axis(x.shape(), *axis);
                    let mut g = vec![T::zero(); x.len()];
                    for o in 0..outer {
                        let start = (o * len + len - 1) * inner;
                        g[start..start + inner].copy_from_slice(&grad[o * inner..(o + 1) * inner]);
                    }
                    out.push((*input, g));
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let (x, w) = (value(*input), value(*weight));
                    let (cin, cout) = (x.shape()[0], w.shape()[0]);
                    let (plane_in, plane_out) = (geom.h * geom.w, geom.ho * geom.wo);
                    let ksz = geom.kh * geom.kw;
                    let want_x = self.wants(*input);
                    let want_w = self.wants(*weight);
                    let mut gx = vec![T::zero(); if want_x { x.len() } else { 0 }];
                    let mut gw = vec![T::zero(); if want_w { w.len() } else { 0 }];
                    for ci in 0..cin {
                        let xin = &x.data()[ci * plane_in..][..plane_in];
                        let active = kernels::active_rows(xin, geom.w);
                        for co in 0..cout {
                            let go = &grad[co * plane_out..][..plane_out];
                            let kofs = (co * cin + ci) * ksz;
                            if want_x {
                                kernels::correlate_plane_grad_input(
                                    geom,
                                    go,
                                    &w.data()[kofs..kofs + ksz],
                                    &mut gx[ci * plane_in..(ci + 1) * plane_in],
                                );
                            }
                            if want_w {
                                kernels::correlate_plane_grad_kernel(
                                    geom,
                                    go,
                                    xin,
                                    Some(&active),
                                    &mut gw[kofs..kofs + ksz],
                                );
                            }
                        }
                    }
                    if want_x {
                        out.push((*input, gx));
                    }
                    if want_w {
                        out.push((*weight, gw));
                    }
                    if let Some(b) = bias {
                        let gb = grad.chunks_exact(plane_out).map(|c| c.iter().fold(T::zero(), |s, &v| s + v)).collect();
                        out.push((*b, gb));
                    }
                }
                Op::Depthwise {
                    input,
                    weight,
                    kt,
                    geom,
                } => {
                    let (x, w) = (value(*input), value(*weight));
                    let c = x.shape()[0];
                    let t = if x.rank() == 4 { x.shape()[1] } else { 1 };
                    let t_out = t - kt + 1;
                    let (plane_in, plane_out) = (geom.h * geom.w, geom.ho * geom.wo);
                    let ksz = geom.kh * geom.kw;
                    let want_x = self.wants(*input);
                    let want_w = self.wants(*weight);
                    let active = if want_w { kernels::active_rows(x.data(), geom.w) } else { Vec::new() };
                    let mut gx = vec![T::zero(); if want_x { x.len() } else { 0 }];
                    let mut gw = vec![T::zero(); if want_w { w.len() } else { 0 }];
                    for ch in 0..c {
                        for to in 0..t_out {
                            let go = &grad[(ch * t_out + to) * plane_out..][..plane_out];
                            for dt in 0..*kt {
                                let src_plane = ch * t + to + dt;
                                let kofs = (ch * kt + dt) * ksz;
                                if want_x {
                                    kernels::correlate_plane_grad_input(
                                        geom,
                                        go,
                                        &w.data()[kofs..kofs + ksz],
                                        &mut gx[src_plane * plane_in..][..plane_in],
                                    );
                                }
                                if want_w {
                                    kernels::correlate_plane_grad_kernel(
                                        geom,
                                        go,
                                        &x.data()[src_plane * plane_in..][..plane_in],
                                        Some(&active[src_plane * geom.h..][..geom.h]),
                                        &mut gw[kofs..kofs + ksz],
                                    );
                                }
                            }
                        }
                    }
                    if want_x {
                        out.push((*input, gx));
                    }
                    if want_w {
                        out.push((*weight, gw));
                    }
                }
                Op::Pointwise { input, weight, bias } => {
                    let (x, w) = (value(*input), value(*weight));
                    let (cout, cin) = (w.shape()[0], w.shape()[1]);
                    let n = x.len() / cin.max(1);
                    if self.wants(*input) {
                        let mut gx = vec![T::zero(); x.len()];
                        gemm((cin, cout, n), w.data(), Layout::Transposed, grad, Layout::Normal, T::zero(), &mut gx);
                        out.push((*input, gx));
                    }
                    if self.wants(*weight) {
                        let mut gw = vec![T::zero(); w.len()];
                        gemm((cout, n, cin), grad, Layout::Normal, x.data(), Layout::Transposed, T::zero(), &mut gw);
                        out.push((*weight, gw));
                    }
                    if let Some(b) = bias {
                        let gb = grad.chunks_exact(n.max(1)).map(|c| c.iter().fold(T::zero(), |s, &v| s + v)).collect();
                        out.push((*b, gb));
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let mut g = vec![T::zero(); value(*input).len()];
                    for (&src, &gv) in argmax.iter().zip(grad) {
                        g[src] = g[src] + gv;
                    }
                    out.push((*input, g));
                }
                Op::Upsample { input, factor } => {
                    let x = value(*input);
                    let r = x.rank();
                    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
                    let planes = x.len() / (h * w).max(1);
                    out.push((*input, kernels::upsample_planes_adjoint(grad, planes, (h, w), *factor)));
                }
                Op::Custom { inputs, backward } => {
                    for (&i, g) in inputs.iter().zip(backward(grad)) {
                        if let Some(g) = g {
                            out.push((i, g));
                        }
                    }
                }
            }
        }
        for (i, g) in out {
            self.accumulate(i, g);
        }
    }
}
