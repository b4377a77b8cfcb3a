use std::collections::HashMap;

use super::{gemm, AutodiffError, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Ln(Var, f64),
    Reshape(Var, Vec<usize>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Concat(Vec<Var>, usize),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Ln(..) => "ln",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat(..) => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input(_) | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::LeakyRelu(x, _)
            | Op::Ln(x, _)
            | Op::Reshape(x, _)
            | Op::Slice { x, .. }
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

/// A computation recorded as a topologically ordered list of primitives.
///
/// Nodes are appended by the builder methods, so every node's inputs precede
/// it. Named inputs are bound on each call to [`Graph::forward`], which lets
/// the same graph be re-evaluated for every batch or optimizer iteration.
///
/// Primitives: `matmul`, `add`, `sub`, `mul`, `add_row` (bias broadcast),
/// `mul_row`, `scale`, `add_scalar`, `tanh`, `sigmoid`, `leaky_relu`, `ln`,
/// `reshape`, `slice`, `concat`, `sum`, `mean`.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> Var {
        self.nodes.push(Node { op, value: None });
        Var(self.nodes.len() - 1)
    }

    /// A named placeholder. Declaring the same name twice returns the same node.
    pub fn input(&mut self, name: &str) -> Var {
        if let Some(&v) = self.inputs.get(name) {
            return v;
        }
        let v = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), v);
        v
    }

    pub fn input_var(&self, name: &str) -> Option<Var> {
        self.inputs.get(name).copied()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    /// `x[i, j] + b[j]` for `x: [n, m]`, `b: [m]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        self.push(Op::AddRow(x, b))
    }

    /// `x[i, j] * w[j]` for `x: [n, m]`, `w: [m]`.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Var {
        self.push(Op::MulRow(x, w))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.push(Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.push(Op::AddScalar(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.push(Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.push(Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, negative_slope: f64) -> Var {
        self.push(Op::LeakyRelu(x, negative_slope))
    }

    /// Natural log of `max(x, floor)`. Pass `0.0` for the plain logarithm.
    pub fn ln(&mut self, x: Var, floor: f64) -> Var {
        self.push(Op::Ln(x, floor))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        self.push(Op::Reshape(x, shape.to_vec()))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        self.push(Op::Slice { x, axis, start, end })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        self.push(Op::Concat(xs.to_vec(), axis))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.push(Op::Mean(x))
    }

    /// `a · x + b` with constant `a`, `b`; convenience over `scale`/`add_scalar`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let s = self.scale(x, a);
        self.add_scalar(s, b)
    }

    /// Cached value of `v` from the last forward pass.
    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.nodes[v.0]
            .value
            .as_ref()
            .ok_or(AutodiffError::NotEvaluated(v.0))
    }

    /// Evaluates every node in order, binding named inputs from `inputs`.
    pub fn forward(&mut self, inputs: &[(&str, &Tensor)]) -> Result<()> {
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Constant => continue,
                Op::Input(name) => inputs
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| (*t).clone())
                    .ok_or_else(|| AutodiffError::Unbound(name.clone()))?,
                op => self.eval(i, op)?,
            };
            if cfg!(debug_assertions) && !value.all_finite() {
                return Err(AutodiffError::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = Some(value);
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &Tensor {
        // Inputs precede their consumers, so this is always populated during
        // an in-order forward pass.
        self.nodes[v.0].value.as_ref().expect("input evaluated")
    }

    fn eval(&self, node: usize, op: &Op) -> Result<Tensor> {
        let shape_err = |detail: String| AutodiffError::Shape {
            node,
            op: op.name(),
            detail,
        };
        let out = match op {
            Op::Input(_) | Op::Constant => unreachable!(),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
                    return Err(shape_err(format!("{:?} x {:?}", a.shape, b.shape)));
                }
                let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut c = vec![0.0; n * m];
                gemm(&a.data, false, &b.data, false, n, k, m, &mut c, false);
                Tensor {
                    shape: vec![n, m],
                    data: c,
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape != b.shape {
                    return Err(shape_err(format!("{:?} vs {:?}", a.shape, b.shape)));
                }
                match op {
                    Op::Add(..) => a.zip_map(b, |x, y| x + y),
                    Op::Sub(..) => a.zip_map(b, |x, y| x - y),
                    _ => a.zip_map(b, |x, y| x * y),
                }
            }
            Op::AddRow(x, r) | Op::MulRow(x, r) => {
                let (x, r) = (self.val(*x), self.val(*r));
                if x.ndim() != 2 || r.ndim() != 1 || x.shape[1] != r.shape[0] {
                    return Err(shape_err(format!("{:?} with row {:?}", x.shape, r.shape)));
                }
                let m = x.shape[1];
                let mut out = x.clone();
                let add = matches!(op, Op::AddRow(..));
                for row in out.data.chunks_mut(m.max(1)) {
                    for (o, &w) in row.iter_mut().zip(&r.data) {
                        if add {
                            *o += w;
                        } else {
                            *o *= w;
                        }
                    }
                }
                out
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.val(*x).map(|v| v * c)
            }
            Op::AddScalar(x, c) => {
                let c = *c;
                self.val(*x).map(|v| v + c)
            }
            Op::Tanh(x) => self.val(*x).map(f64::tanh),
            Op::Sigmoid(x) => self.val(*x).map(sigmoid),
            Op::LeakyRelu(x, s) => {
                let s = *s;
                self.val(*x).map(|v| if v > 0.0 { v } else { s * v })
            }
            Op::Ln(x, floor) => {
                let floor = *floor;
                self.val(*x).map(|v| v.max(floor).ln())
            }
            Op::Reshape(x, shape) => {
                let x = self.val(*x);
                if shape.iter().product::<usize>() != x.len() {
                    return Err(shape_err(format!("{:?} -> {:?}", x.shape, shape)));
                }
                Tensor {
                    shape: shape.clone(),
                    data: x.data.clone(),
                }
            }
            Op::Slice { x, axis, start, end } => {
                let x = self.val(*x);
                if *axis >= x.ndim() || start > end || *end > x.shape[*axis] {
                    return Err(shape_err(format!(
                        "{:?}[axis {axis}: {start}..{end}]",
                        x.shape
                    )));
                }
                slice_forward(x, *axis, *start, *end)
            }
            Op::Concat(xs, axis) => {
                let parts: Vec<&Tensor> = xs.iter().map(|v| self.val(*v)).collect();
                concat_forward(&parts, *axis).map_err(shape_err)?
            }
            Op::Sum(x) => Tensor::scalar(self.val(*x).data.iter().sum()),
            Op::Mean(x) => {
                let x = self.val(*x);
                if x.is_empty() {
                    return Err(shape_err("mean of empty tensor".into()));
                }
                Tensor::scalar(x.data.iter().sum::<f64>() / x.len() as f64)
            }
        };
        Ok(out)
    }

    /// Reverse pass from the scalar `output`.
    ///
    /// Every input node connected to `output` receives its adjoint; inputs not
    /// on any path to `output` receive zeros.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output)?;
        if out.ndim() != 0 {
            return Err(AutodiffError::NotScalar(out.shape.clone()));
        }
        let n = output.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.nodes[i].op {
                Op::Input(_) => true,
                Op::Constant => false,
                op => op.inputs().iter().any(|v| needs[v.0]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..n).rev() {
            let op = &self.nodes[i].op;
            if matches!(op, Op::Input(_) | Op::Constant) || !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, op, &g, &needs, &mut grads)?;
        }

        let mut by_input = HashMap::new();
        for (name, &v) in &self.inputs {
            if v.0 >= n {
                continue;
            }
            let g = match grads[v.0].take() {
                Some(g) => g,
                None => Tensor::zeros(&self.value(v)?.shape),
            };
            by_input.insert(name.clone(), (v, g));
        }
        Ok(Gradients { by_input })
    }

    fn propagate(
        &self,
        i: usize,
        op: &Op,
        g: &Tensor,
        needs: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let y = self.value(Var(i))?;
        let mut send = |v: Var, t: Tensor| {
            if needs[v.0] {
                accumulate(&mut grads[v.0], t);
            }
        };
        match op {
            Op::Input(_) | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a)?, self.value(*b)?);
                let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
                if needs[a.0] {
                    let mut da = vec![0.0; n * k];
                    gemm(&g.data, false, &bv.data, true, n, m, k, &mut da, false);
                    send(*a, Tensor { shape: vec![n, k], data: da });
                }
                if needs[b.0] {
                    let mut db = vec![0.0; k * m];
                    gemm(&av.data, true, &g.data, false, k, n, m, &mut db, false);
                    send(*b, Tensor { shape: vec![k, m], data: db });
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a)?, self.value(*b)?);
                if needs[a.0] {
                    send(*a, g.zip_map(bv, |x, y| x * y));
                }
                if needs[b.0] {
                    send(*b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::AddRow(x, r) => {
                let m = g.shape[1];
                if needs[r.0] {
                    let mut dr = vec![0.0; m];
                    for row in g.data.chunks(m.max(1)) {
                        for (d, &v) in dr.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(*r, Tensor::vector(dr));
                }
                send(*x, g.clone());
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (self.value(*x)?, self.value(*r)?);
                let m = g.shape[1];
                if needs[r.0] {
                    let mut dr = vec![0.0; m];
                    for (grow, xrow) in g.data.chunks(m.max(1)).zip(xv.data.chunks(m.max(1))) {
                        for ((d, &gv), &xv) in dr.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                    send(*r, Tensor::vector(dr));
                }
                if needs[x.0] {
                    let mut dx = g.clone();
                    for row in dx.data.chunks_mut(m.max(1)) {
                        for (d, &w) in row.iter_mut().zip(&rv.data) {
                            *d *= w;
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                send(*x, g.map(|v| v * c));
            }
            Op::AddScalar(x, _) => send(*x, g.clone()),
            Op::Tanh(x) => send(*x, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Sigmoid(x) => send(*x, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::LeakyRelu(x, s) => {
                let s = *s;
                let xv = self.value(*x)?;
                send(*x, g.zip_map(xv, |gv, v| if v > 0.0 { gv } else { gv * s }));
            }
            Op::Ln(x, floor) => {
                let floor = *floor;
                let xv = self.value(*x)?;
                send(
                    *x,
                    g.zip_map(xv, |gv, v| if v > floor { gv / v } else { 0.0 }),
                );
            }
            Op::Reshape(x, _) => {
                let shape = self.value(*x)?.shape.clone();
                send(
                    *x,
                    Tensor {
                        shape,
                        data: g.data.clone(),
                    },
                );
            }
            Op::Slice { x, axis, start, .. } => {
                let xv = self.value(*x)?;
                let mut dx = Tensor::zeros(&xv.shape);
                slice_scatter(&mut dx, g, *axis, *start);
                send(*x, dx);
            }
            Op::Concat(xs, axis) => {
                let mut offset = 0;
                for v in xs {
                    let shape = &self.value(*v)?.shape;
                    let width = shape[*axis];
                    if needs[v.0] {
                        send(*v, slice_forward(g, *axis, offset, offset + width));
                    }
                    offset += width;
                }
            }
            Op::Sum(x) => {
                let shape = &self.value(*x)?.shape;
                send(*x, Tensor::full(shape, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x)?;
                send(*x, Tensor::full(&xv.shape, g.item() / xv.len() as f64));
            }
        }
        Ok(())
    }
}

/// Adjoints of a scalar output with respect to each named input.
#[derive(Clone, Debug)]
pub struct Gradients {
    by_input: HashMap<String, (Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_input.get(name).map(|(_, t)| t)
    }

    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.by_input
            .values()
            .find(|(var, _)| *var == v)
            .map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        self.by_input.remove(name).map(|(_, t)| t)
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        None => *slot = Some(t),
        Some(s) => {
            for (a, b) in s.data.iter_mut().zip(&t.data) {
                *a += b;
            }
        }
    }
}

fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn slice_forward(x: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let (outer, len, inner) = split_dims(&x.shape, axis);
    let w = end - start;
    let mut data = Vec::with_capacity(outer * w * inner);
    for o in 0..outer {
        let base = o * len * inner;
        data.extend_from_slice(&x.data[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = w;
    Tensor { shape, data }
}

fn slice_scatter(dst: &mut Tensor, src: &Tensor, axis: usize, start: usize) {
    let (outer, len, inner) = split_dims(&dst.shape, axis);
    let w = src.shape[axis];
    for o in 0..outer {
        let base = o * len * inner + start * inner;
        let chunk = &src.data[o * w * inner..(o + 1) * w * inner];
        for (d, s) in dst.data[base..base + w * inner].iter_mut().zip(chunk) {
            *d += s;
        }
    }
}

fn concat_forward(parts: &[&Tensor], axis: usize) -> std::result::Result<Tensor, String> {
    let first = parts.first().ok_or("concat of zero tensors")?;
    if axis >= first.ndim() {
        return Err(format!("axis {axis} out of range for {:?}", first.shape));
    }
    for p in parts {
        let ok = p.ndim() == first.ndim()
            && p
                .shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(format!("{:?} vs {:?} along axis {axis}", p.shape, first.shape));
        }
    }
    let (outer, _, inner) = split_dims(&first.shape, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let w = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}
