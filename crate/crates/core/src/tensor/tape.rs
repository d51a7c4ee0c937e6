use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    SumPerChannel(NodeId),
    ChannelAffine {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Select(NodeId, usize),
    Stack(Vec<NodeId>),
    Upsample2x(NodeId),
    CumsumExclusive(NodeId, usize),
    InstanceNorm {
        x: NodeId,
        inv_std: Vec<T>,
    },
    Conv3d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    Trilinear {
        vol: NodeId,
        coords: NodeId,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation recording for one forward pass.
///
/// Nodes are appended in execution order, so every op's inputs precede it and
/// reverse index order is a valid backward schedule.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

fn spatial_of(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, [usize; 3]), TensorError> {
    if t.ndim() != 4 {
        return Err(invalid(
            op,
            format!("expected [C, D, H, W], got {:?}", t.shape()),
        ));
    }
    let s = t.shape();
    Ok((s[0], [s[1], s[2], s[3]]))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf that gradients are tracked for.
    pub fn param(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(t), Op::Leaf, true)
    }

    /// Records a leaf treated as a constant.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(t), Op::Leaf, false)
    }

    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Rc::new(t), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var<'_, T>) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.id].value.clone()
    }

    fn push(&self, value: Rc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(
        &self,
        name: &'static str,
        out: Tensor<T>,
        op: Op<T>,
        inputs: &[NodeId],
    ) -> Result<Var<'_, T>, TensorError> {
        if !out.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = self.requires(inputs);
        Ok(self.push(Rc::new(out), op, rg))
    }

    /// Reverse pass from a scalar root. The tape is left intact, so repeated
    /// calls produce identical gradients.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if root_val.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_val.shape().to_vec()));
        }
        if !root_val.all_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(root_val.shape()));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            for (input, contrib) in backward_op(&nodes, id, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Contributions of node `id`'s output gradient `g` to each of its inputs.
fn backward_op<T: Real>(nodes: &[Node<T>], id: NodeId, g: &Tensor<T>) -> Vec<(NodeId, Tensor<T>)> {
    let val = |i: NodeId| nodes[i].value.as_ref();
    let needs = |i: NodeId| nodes[i].requires_grad;
    let out = val(id);
    let like = |i: NodeId, data: Vec<T>| Tensor {
        shape: val(i).shape.clone(),
        data,
    };
    // reduce a gradient to a broadcast scalar operand if needed
    let fit = |i: NodeId, data: Vec<T>| {
        if val(i).numel() == 1 && data.len() != 1 {
            like(i, vec![data.iter().copied().sum()])
        } else {
            like(i, data)
        }
    };
    let bget = |t: &Tensor<T>, k: usize| if t.numel() == 1 { t.data[0] } else { t.data[k] };
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, fit(*a, gd.to_vec())), (*b, fit(*b, gd.to_vec()))],
        Op::Sub(a, b) => vec![
            (*a, fit(*a, gd.to_vec())),
            (*b, fit(*b, gd.iter().map(|&v| -v).collect())),
        ],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let mut res = vec![];
            if needs(*a) {
                res.push((
                    *a,
                    fit(*a, (0..gd.len()).map(|k| gd[k] * bget(vb, k)).collect()),
                ));
            }
            if needs(*b) {
                res.push((
                    *b,
                    fit(*b, (0..gd.len()).map(|k| gd[k] * bget(va, k)).collect()),
                ));
            }
            res
        }
        Op::Div(a, b) => {
            let vb = val(*b);
            let mut res = vec![];
            if needs(*a) {
                res.push((
                    *a,
                    fit(*a, (0..gd.len()).map(|k| gd[k] / bget(vb, k)).collect()),
                ));
            }
            if needs(*b) {
                // d(a/b)/db = -out / b
                let d = (0..gd.len())
                    .map(|k| -gd[k] * out.data[k] / bget(vb, k))
                    .collect();
                res.push((*b, fit(*b, d)));
            }
            res
        }
        Op::Neg(x) => vec![(*x, like(*x, gd.iter().map(|&v| -v).collect()))],
        Op::Scale(x, c) => vec![(*x, like(*x, gd.iter().map(|&v| v * *c).collect()))],
        Op::AddScalar(x) => vec![(*x, like(*x, gd.to_vec()))],
        Op::Square(x) => {
            let two = T::lit(2.0);
            let d = gd
                .iter()
                .zip(&val(*x).data)
                .map(|(&g, &v)| two * v * g)
                .collect();
            vec![(*x, like(*x, d))]
        }
        Op::Sqrt(x) => {
            let half = T::lit(0.5);
            let d = gd
                .iter()
                .zip(&out.data)
                .map(|(&g, &y)| half * g / y)
                .collect();
            vec![(*x, like(*x, d))]
        }
        Op::Sigmoid(x) => {
            let d = gd
                .iter()
                .zip(&out.data)
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect();
            vec![(*x, like(*x, d))]
        }
        Op::LeakyRelu(x, slope) => {
            let d = gd
                .iter()
                .zip(&val(*x).data)
                .map(|(&g, &v)| if v >= T::zero() { g } else { g * *slope })
                .collect();
            vec![(*x, like(*x, d))]
        }
        Op::Sum(x) => vec![(*x, like(*x, vec![gd[0]; val(*x).numel()]))],
        Op::Mean(x) => {
            let n = T::from_usize(val(*x).numel()).unwrap();
            vec![(*x, like(*x, vec![gd[0] / n; val(*x).numel()]))]
        }
        Op::SumPerChannel(x) => {
            let vx = val(*x);
            let inner = vx.numel() / vx.shape[0];
            let d = (0..vx.numel()).map(|k| gd[k / inner]).collect();
            vec![(*x, like(*x, d))]
        }
        Op::ChannelAffine { x, weight, bias } => {
            let vx = val(*x);
            let vw = val(*weight);
            let c = vx.shape[0];
            let inner = vx.numel() / c;
            let mut res = vec![];
            if needs(*x) {
                let d = (0..vx.numel())
                    .map(|k| gd[k] * vw.data[k / inner])
                    .collect();
                res.push((*x, like(*x, d)));
            }
            if needs(*weight) {
                let d = (0..c)
                    .map(|ch| {
                        let r = ch * inner..(ch + 1) * inner;
                        gd[r.clone()]
                            .iter()
                            .zip(&vx.data[r])
                            .map(|(&a, &b)| a * b)
                            .sum()
                    })
                    .collect();
                res.push((*weight, like(*weight, d)));
            }
            if needs(*bias) {
                let d = gd
                    .chunks(inner)
                    .map(|ch| ch.iter().copied().sum())
                    .collect();
                res.push((*bias, like(*bias, d)));
            }
            res
        }
        Op::Select(x, c) => {
            let vx = val(*x);
            let inner = vx.numel() / vx.shape[0];
            let mut d = vec![T::zero(); vx.numel()];
            d[c * inner..(c + 1) * inner].copy_from_slice(gd);
            vec![(*x, like(*x, d))]
        }
        Op::Stack(parts) => {
            let inner = gd.len() / parts.len();
            parts
                .iter()
                .enumerate()
                .filter(|(_, p)| needs(**p))
                .map(|(k, &p)| (p, like(p, gd[k * inner..(k + 1) * inner].to_vec())))
                .collect()
        }
        Op::Upsample2x(x) => {
            let vx = val(*x);
            let s = [vx.shape[1], vx.shape[2], vx.shape[3]];
            vec![(
                *x,
                like(*x, kernels::upsample2x_backward(gd, vx.shape[0], s)),
            )]
        }
        Op::CumsumExclusive(x, axis) => {
            let vx = val(*x);
            vec![(
                *x,
                like(*x, kernels::cumsum_exclusive_backward(gd, &vx.shape, *axis)),
            )]
        }
        Op::InstanceNorm { x, inv_std } => {
            vec![(
                *x,
                like(*x, kernels::instance_norm_backward(&out.data, inv_std, gd)),
            )]
        }
        Op::Conv3d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let mut res = vec![];
            if needs(*input) {
                let d = kernels::conv3d_backward_input(geom, &val(*kernel).data, gd);
                res.push((*input, like(*input, d)));
            }
            if needs(*kernel) || needs(*bias) {
                let (gw, gb) = kernels::conv3d_backward_params(geom, &val(*input).data, gd);
                res.push((*kernel, like(*kernel, gw)));
                res.push((*bias, like(*bias, gb)));
            }
            res
        }
        Op::Trilinear { vol, coords } => {
            let vv = val(*vol);
            let vc = val(*coords);
            let vs = [vv.shape[1], vv.shape[2], vv.shape[3]];
            let os = [vc.shape[1], vc.shape[2], vc.shape[3]];
            let (gvol, gcoord) = kernels::trilinear_backward(
                &vv.data,
                vv.shape[0],
                vs,
                &vc.data,
                os,
                gd,
                needs(*vol),
                needs(*coords),
            );
            let mut res = vec![];
            if let Some(d) = gvol {
                res.push((*vol, like(*vol, d)));
            }
            if let Some(d) = gcoord {
                res.push((*coords, like(*coords, d)));
            }
            res
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> T {
        self.value().data[0]
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let a = self.value();
        let b = other.value();
        let out = if a.shape == b.shape {
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else if b.numel() == 1 {
            let s = b.data[0];
            a.map(|x| f(x, s))
        } else if a.numel() == 1 {
            let s = a.data[0];
            b.map(|y| f(s, y))
        } else {
            return Err(mismatch(name, &a.shape, &b.shape));
        };
        self.tape.record(name, out, op, &[self.id, other.id])
    }

    fn unary(
        self,
        name: &'static str,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let out = self.value().map(f);
        self.tape.record(name, out, op, &[self.id])
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Result<Var<'t, T>, TensorError> {
        self.unary("neg", |a| -a, Op::Neg(self.id))
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>, TensorError> {
        self.unary("scale", |a| a * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>, TensorError> {
        self.unary("add_scalar", |a| a + c, Op::AddScalar(self.id))
    }

    pub fn square(self) -> Result<Var<'t, T>, TensorError> {
        self.unary("square", |a| a * a, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t, T>, TensorError> {
        self.unary("sqrt", |a| a.sqrt(), Op::Sqrt(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>, TensorError> {
        self.unary("sigmoid", kernels::sigmoid, Op::Sigmoid(self.id))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise. The derivative at zero is 1.
    pub fn leaky_relu(self, slope: T) -> Result<Var<'t, T>, TensorError> {
        if !(slope > T::zero() && slope < T::one()) {
            return Err(invalid(
                "leaky_relu",
                format!("slope {slope} outside (0, 1)"),
            ));
        }
        self.unary(
            "leaky_relu",
            |a| if a >= T::zero() { a } else { a * slope },
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>, TensorError> {
        let s = self.value().sum();
        self.tape
            .record("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        let m = v.sum() / T::from_usize(v.numel()).unwrap();
        self.tape
            .record("mean", Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    /// Sums a `[C, ...]` tensor over everything but the leading axis.
    pub fn sum_per_channel(self) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        if v.ndim() < 2 {
            return Err(invalid("sum_per_channel", "need at least two axes"));
        }
        let c = v.shape[0];
        let inner = v.numel() / c;
        let data = v
            .data
            .chunks(inner)
            .map(|ch| ch.iter().copied().sum())
            .collect();
        let out = Tensor {
            shape: vec![c],
            data,
        };
        self.tape.record(
            "sum_per_channel",
            out,
            Op::SumPerChannel(self.id),
            &[self.id],
        )
    }

    /// `y[c] = x[c] * weight[c] + bias[c]` over a `[C, ...]` tensor.
    pub fn channel_affine(
        self,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        let (w, b) = (weight.value(), bias.value());
        let c = v.shape[0];
        if w.shape != [c] || b.shape != [c] {
            return Err(mismatch("channel_affine", &[c], &w.shape));
        }
        let inner = v.numel() / c;
        let data = v
            .data
            .iter()
            .enumerate()
            .map(|(k, &x)| x * w.data[k / inner] + b.data[k / inner])
            .collect();
        let out = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let op = Op::ChannelAffine {
            x: self.id,
            weight: weight.id,
            bias: bias.id,
        };
        self.tape
            .record("channel_affine", out, op, &[self.id, weight.id, bias.id])
    }

    /// Slice `c` of the leading axis, dropping that axis.
    pub fn select(self, c: usize) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        if v.ndim() < 2 || c >= v.shape[0] {
            return Err(invalid(
                "select",
                format!("index {c} out of range for {:?}", v.shape),
            ));
        }
        self.tape
            .record("select", v.channel(c), Op::Select(self.id, c), &[self.id])
    }

    pub fn stack(parts: &[Var<'t, T>]) -> Result<Var<'t, T>, TensorError> {
        let first = parts.first().ok_or_else(|| invalid("stack", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| (*p.value()).clone()).collect();
        let out = Tensor::stack(&values)?;
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        tape.record("stack", out, Op::Stack(ids.clone()), &ids)
    }

    /// Nearest-neighbour 2x upsampling of the three spatial axes.
    pub fn upsample2x(self) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        let (c, s) = spatial_of("upsample2x", &v)?;
        let data = kernels::upsample2x_forward(&v.data, c, s);
        let out = Tensor {
            shape: vec![c, 2 * s[0], 2 * s[1], 2 * s[2]],
            data,
        };
        self.tape
            .record("upsample2x", out, Op::Upsample2x(self.id), &[self.id])
    }

    /// `y[i] = sum_{k < i} x[k]` along `axis`.
    pub fn cumsum_exclusive(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        if axis >= v.ndim() {
            return Err(invalid(
                "cumsum_exclusive",
                format!("axis {axis} for {:?}", v.shape),
            ));
        }
        let data = kernels::cumsum_exclusive_forward(&v.data, &v.shape, axis);
        let out = Tensor {
            shape: v.shape.clone(),
            data,
        };
        self.tape.record(
            "cumsum_exclusive",
            out,
            Op::CumsumExclusive(self.id, axis),
            &[self.id],
        )
    }

    /// Per-channel standardization of a `[C, D, H, W]` tensor.
    pub fn instance_norm(self, eps: T) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        let (c, s) = spatial_of("instance_norm", &v)?;
        if s.iter().product::<usize>() < 2 {
            return Err(invalid(
                "instance_norm",
                "need at least two voxels per channel",
            ));
        }
        let (y, inv_std) = kernels::instance_norm_forward(&v.data, c, eps);
        let out = Tensor {
            shape: v.shape.clone(),
            data: y,
        };
        let op = Op::InstanceNorm {
            x: self.id,
            inv_std,
        };
        self.tape.record("instance_norm", out, op, &[self.id])
    }

    /// 3D cross-correlation with a cubic kernel `[Cout, Cin, k, k, k]`.
    pub fn conv3d(
        self,
        kernel: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let w = kernel.value();
        let b = bias.value();
        let (cin, inp) = spatial_of("conv3d", &x)?;
        if w.ndim() != 5 || w.shape[2] != w.shape[3] || w.shape[3] != w.shape[4] {
            return Err(invalid(
                "conv3d",
                format!("kernel must be [Cout, Cin, k, k, k], got {:?}", w.shape),
            ));
        }
        let (cout, k) = (w.shape[0], w.shape[2]);
        if w.shape[1] != cin {
            return Err(invalid(
                "conv3d",
                format!(
                    "input has {cin} channels but kernel {:?} expects {}",
                    w.shape, w.shape[1]
                ),
            ));
        }
        if b.shape != [cout] {
            return Err(mismatch("conv3d", &[cout], &b.shape));
        }
        if stride == 0 {
            return Err(invalid("conv3d", "stride must be positive"));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = kernels::conv_output_extent(inp[a], k, stride, padding).ok_or_else(|| {
                invalid(
                    "conv3d",
                    format!("kernel {k} larger than padded input {:?}", inp),
                )
            })?;
        }
        let geom = ConvGeom {
            cin,
            cout,
            k,
            stride,
            padding,
            inp,
            out,
        };
        let data = kernels::conv3d_forward(&geom, &x.data, &w.data, &b.data);
        let t = Tensor {
            shape: vec![cout, out[0], out[1], out[2]],
            data,
        };
        let op = Op::Conv3d {
            input: self.id,
            kernel: kernel.id,
            bias: bias.id,
            geom,
        };
        self.tape
            .record("conv3d", t, op, &[self.id, kernel.id, bias.id])
    }

    /// Trilinear resampling of `self` (`[C, D, H, W]`) at voxel coordinates
    /// `coords` (`[3, D', H', W']`). Out-of-range coordinates clamp to the
    /// border.
    pub fn trilinear_sample(self, coords: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        let c = coords.value();
        let (ch, vs) = spatial_of("trilinear_sample", &v)?;
        let (three, os) = spatial_of("trilinear_sample", &c)?;
        if three != 3 {
            return Err(mismatch(
                "trilinear_sample",
                &[3, os[0], os[1], os[2]],
                &c.shape,
            ));
        }
        let data = kernels::trilinear_forward(&v.data, ch, vs, &c.data, os);
        let out = Tensor {
            shape: vec![ch, os[0], os[1], os[2]],
            data,
        };
        let op = Op::Trilinear {
            vol: self.id,
            coords: coords.id,
        };
        self.tape
            .record("trilinear_sample", out, op, &[self.id, coords.id])
    }
}
