use std::cell::{Cell, RefCell};

use super::kernels;
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Vec<f64>),
    Param(usize),
}

enum Op {
    Leaf,
    Constant,
    Param,
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Dot(Var, Var),
    Expand(Var),
    Concat(Vec<Var>, usize),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Slice(Var, usize),
    Pick(Var, usize),
    SoftmaxMasked(Var, Vec<bool>),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    WindowScores {
        keys: Var,
        query: Var,
        v: Var,
        lo: usize,
        activations: Vec<f64>,
    },
    LstmGates {
        gates: Var,
        cell: Var,
        // [i, f, g, o, tanh(c_new)] activations, each of width `hidden`
        acts: Vec<f64>,
    },
    Columns(Var, usize),
}

struct Node {
    dims: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass and replays them backward.
///
/// Operations take `&self`, so expressions can nest freely. A tape is a
/// single logical stream: it is not `Sync`, but distinct tapes are independent.
pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<Vec<Option<Var>>>,
    score_calls: Cell<u64>,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape<'static> {
    pub fn new() -> Self {
        Tape::with_params(&[])
    }
}

impl<'p> Tape<'p> {
    /// A tape whose [`Tape::param`] leaves read from `params` without copying.
    pub fn with_params(params: &'p [Tensor]) -> Self {
        Tape {
            params,
            nodes: RefCell::new(Vec::with_capacity(1024)),
            param_vars: RefCell::new(vec![None; params.len()]),
            score_calls: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of individual score-function evaluations performed by
    /// [`Tape::window_scores`] on this tape.
    pub fn score_calls(&self) -> u64 {
        self.score_calls.get()
    }

    pub fn leaf(&self, t: Tensor) -> Var {
        let dims = t.dims().to_vec();
        self.push_unchecked(dims, t.into_values(), Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        let dims = t.dims().to_vec();
        self.push_unchecked(dims, t.into_values(), Op::Constant, false)
    }

    pub fn constant_vec(&self, values: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::vector(values)?))
    }

    /// Leaf for parameter `index`; repeated calls return the same handle.
    pub fn param(&self, index: usize) -> Var {
        if let Some(v) = self.param_vars.borrow()[index] {
            return v;
        }
        let dims = self.params[index].dims().to_vec();
        let mut nodes = self.nodes.borrow_mut();
        let var = Var(nodes.len());
        nodes.push(Node {
            dims,
            value: Value::Param(index),
            op: Op::Param,
            requires_grad: true,
        });
        self.param_vars.borrow_mut()[index] = Some(var);
        var
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].dims.clone()
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        self.data(&nodes, v).to_vec()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.0].dims.clone(), self.data(&nodes, v).to_vec())
            .expect("recorded values are finite and well-shaped")
    }

    /// First element of `v`; intended for scalar results.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        self.data(&nodes, v)[0]
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&[f64]) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(self.data(&nodes, v))
    }

    fn data<'a>(&'a self, nodes: &'a [Node], v: Var) -> &'a [f64] {
        match &nodes[v.0].value {
            Value::Owned(x) => x,
            Value::Param(i) => self.params[*i].values(),
        }
    }

    fn push_unchecked(&self, dims: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let var = Var(nodes.len());
        nodes.push(Node {
            dims,
            value: Value::Owned(values),
            op,
            requires_grad,
        });
        var
    }

    fn push(&self, name: &'static str, dims: Vec<usize>, values: Vec<f64>, op: Op) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            operands(&op).iter().any(|o| nodes[o.0].requires_grad)
        };
        Ok(self.push_unchecked(dims, values, op, requires_grad))
    }

    fn same_dims(&self, name: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let nodes = self.nodes.borrow();
        let (da, db) = (&nodes[a.0].dims, &nodes[b.0].dims);
        if da != db {
            return Err(TensorError::Shape {
                op: name,
                left: da.clone(),
                right: db.clone(),
            });
        }
        Ok(da.clone())
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let (dims, out) = {
            let nodes = self.nodes.borrow();
            let x = self.data(&nodes, a);
            (nodes[a.0].dims.clone(), x.iter().map(|&v| f(v)).collect())
        };
        self.push(name, dims, out, op)
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let dims = self.same_dims(name, a, b)?;
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (self.data(&nodes, a), self.data(&nodes, b));
            x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
        };
        self.push(name, dims, out, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let bad = self.with_value(a, |x| x.iter().copied().find(|&v| v <= 0.0));
        if let Some(v) = bad {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("argument {v} is not positive"),
            });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.with_value(a, |x| x.iter().sum());
        self.push("sum", vec![1], vec![s], Op::Sum(a))
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("dot", a, b)?;
        let s = {
            let nodes = self.nodes.borrow();
            kernels::dot(self.data(&nodes, a), self.data(&nodes, b))
        };
        self.push("dot", vec![1], vec![s], Op::Dot(a, b))
    }

    /// Repeats a one-element tensor `n` times.
    pub fn expand(&self, a: Var, n: usize) -> Result<Var> {
        let (dims, x) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].dims.clone(), self.data(&nodes, a).to_vec())
        };
        if x.len() != 1 {
            return Err(TensorError::Shape {
                op: "expand",
                left: dims,
                right: vec![1],
            });
        }
        self.push("expand", vec![n], vec![x[0]; n], Op::Expand(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, out) = {
            let nodes = self.nodes.borrow();
            let (da, db) = (&nodes[a.0].dims, &nodes[b.0].dims);
            if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
                return Err(TensorError::Shape {
                    op: "matmul",
                    left: da.clone(),
                    right: db.clone(),
                });
            }
            let (m, k, n) = (da[0], da[1], db[1]);
            let (x, y) = (self.data(&nodes, a), self.data(&nodes, b));
            let mut out = vec![0.0; m * n];
            for (arow, orow) in x.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
                kernels::vecmat_acc(arow, y, orow);
            }
            (m, k, n, out)
        };
        let _ = k;
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// `w · x` for `w: [m × k]`, `x: [k]`.
    pub fn matvec(&self, w: Var, x: Var) -> Result<Var> {
        let (m, out) = {
            let nodes = self.nodes.borrow();
            let (dw, dx) = (&nodes[w.0].dims, &nodes[x.0].dims);
            if dw.len() != 2 || dx.len() != 1 || dw[1] != dx[0] {
                return Err(TensorError::Shape {
                    op: "matvec",
                    left: dw.clone(),
                    right: dx.clone(),
                });
            }
            let mut out = vec![0.0; dw[0]];
            kernels::matvec(self.data(&nodes, w), self.data(&nodes, x), &mut out);
            (dw[0], out)
        };
        self.push("matvec", vec![m], out, Op::MatVec(w, x))
    }

    /// `xᵀ · w` for `x: [m]`, `w: [m × n]`; a weighted sum of the rows of `w`.
    pub fn vecmat(&self, x: Var, w: Var) -> Result<Var> {
        let (n, out) = {
            let nodes = self.nodes.borrow();
            let (dx, dw) = (&nodes[x.0].dims, &nodes[w.0].dims);
            if dw.len() != 2 || dx.len() != 1 || dw[0] != dx[0] {
                return Err(TensorError::Shape {
                    op: "vecmat",
                    left: dx.clone(),
                    right: dw.clone(),
                });
            }
            let mut out = vec![0.0; dw[1]];
            kernels::vecmat_acc(self.data(&nodes, x), self.data(&nodes, w), &mut out);
            (dw[1], out)
        };
        self.push("vecmat", vec![n], out, Op::VecMat(x, w))
    }

    /// Juxtaposes `parts` along `axis`. Rank-1 parts use axis 0; rank-2 parts
    /// use axis 0 (stack rows) or 1 (append columns).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let shape_err = |left: &Vec<usize>, right: &Vec<usize>| TensorError::Shape {
            op: "concat",
            left: left.clone(),
            right: right.clone(),
        };
        let (dims, out) = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .map(|p| nodes[p.0].dims.clone())
                .ok_or_else(|| shape_err(&vec![], &vec![]))?;
            let rank = first.len();
            if axis >= rank || rank > 2 {
                return Err(shape_err(&first, &vec![axis]));
            }
            for p in &parts[1..] {
                let d = &nodes[p.0].dims;
                let agree = d.len() == rank && (0..rank).all(|i| i == axis || d[i] == first[i]);
                if !agree {
                    return Err(shape_err(&first, d));
                }
            }
            let mut dims = first.clone();
            dims[axis] = parts.iter().map(|p| nodes[p.0].dims[axis]).sum();
            let mut out = Vec::with_capacity(dims.iter().product());
            if rank == 1 || axis == 0 {
                for p in parts {
                    out.extend_from_slice(self.data(&nodes, *p));
                }
            } else {
                for r in 0..first[0] {
                    for p in parts {
                        let c = nodes[p.0].dims[1];
                        out.extend_from_slice(&self.data(&nodes, *p)[r * c..(r + 1) * c]);
                    }
                }
            }
            (dims, out)
        };
        self.push("concat", dims, out, Op::Concat(parts.to_vec(), axis))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&self, rows: &[Var]) -> Result<Var> {
        let (dims, out) = {
            let nodes = self.nodes.borrow();
            let width = rows.first().map_or(0, |r| nodes[r.0].dims.iter().product());
            let mut out = Vec::with_capacity(rows.len() * width);
            for r in rows {
                let d = &nodes[r.0].dims;
                if d.len() != 1 || d[0] != width {
                    return Err(TensorError::Shape {
                        op: "stack_rows",
                        left: vec![width],
                        right: d.clone(),
                    });
                }
                out.extend_from_slice(self.data(&nodes, *r));
            }
            (vec![rows.len(), width], out)
        };
        if rows.is_empty() {
            return Err(TensorError::Shape {
                op: "stack_rows",
                left: vec![],
                right: vec![],
            });
        }
        self.push("stack_rows", dims, out, Op::StackRows(rows.to_vec()))
    }

    /// Row `index` of a matrix (embedding lookup).
    pub fn row(&self, m: Var, index: usize) -> Result<Var> {
        let (cols, out) = {
            let nodes = self.nodes.borrow();
            let d = &nodes[m.0].dims;
            if d.len() != 2 {
                return Err(TensorError::Shape {
                    op: "row",
                    left: d.clone(),
                    right: vec![index],
                });
            }
            if index >= d[0] {
                return Err(TensorError::Index {
                    op: "row",
                    index,
                    extent: d[0],
                });
            }
            let c = d[1];
            (c, self.data(&nodes, m)[index * c..(index + 1) * c].to_vec())
        };
        self.push("row", vec![cols], out, Op::Row(m, index))
    }

    /// Contiguous sub-vector `[start, start + len)` of a rank-1 tensor.
    pub fn slice(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let d = &nodes[a.0].dims;
            if d.len() != 1 || start + len > d[0] || len == 0 {
                return Err(TensorError::Shape {
                    op: "slice",
                    left: d.clone(),
                    right: vec![start, len],
                });
            }
            self.data(&nodes, a)[start..start + len].to_vec()
        };
        self.push("slice", vec![len], out, Op::Slice(a, start))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn columns(&self, m: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, out) = {
            let nodes = self.nodes.borrow();
            let d = &nodes[m.0].dims;
            if d.len() != 2 || start + len > d[1] || len == 0 {
                return Err(TensorError::Shape {
                    op: "columns",
                    left: d.clone(),
                    right: vec![start, len],
                });
            }
            let x = self.data(&nodes, m);
            let mut out = Vec::with_capacity(d[0] * len);
            for r in x.chunks_exact(d[1]) {
                out.extend_from_slice(&r[start..start + len]);
            }
            (d[0], out)
        };
        self.push("columns", vec![rows, len], out, Op::Columns(m, start))
    }

    pub fn pick(&self, a: Var, index: usize) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let x = self.data(&nodes, a);
            *x.get(index).ok_or(TensorError::Index {
                op: "pick",
                index,
                extent: x.len(),
            })?
        };
        self.push("pick", vec![1], vec![v], Op::Pick(a, index))
    }

    /// Softmax over the positions where `mask` is true; masked positions are
    /// exactly zero. The kept maximum is subtracted before exponentiation.
    pub fn softmax_masked(&self, logits: Var, mask: &[bool]) -> Result<Var> {
        let (dims, out) = {
            let nodes = self.nodes.borrow();
            let d = &nodes[logits.0].dims;
            if d.len() != 1 || d[0] != mask.len() {
                return Err(TensorError::Shape {
                    op: "softmax_masked",
                    left: d.clone(),
                    right: vec![mask.len()],
                });
            }
            let out = masked_softmax(self.data(&nodes, logits), mask).ok_or(TensorError::EmptyWindow {
                op: "softmax_masked",
            })?;
            (d.clone(), out)
        };
        self.push("softmax_masked", dims, out, Op::SoftmaxMasked(logits, mask.to_vec()))
    }

    pub fn softmax(&self, logits: Var) -> Result<Var> {
        let n = self.nodes.borrow()[logits.0].dims.iter().product();
        self.softmax_masked(logits, &vec![true; n])
    }

    /// `-log softmax(logits)[target]`, computed stably.
    pub fn cross_entropy(&self, logits: Var, target: usize) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let x = self.data(&nodes, logits);
            if target >= x.len() {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: target,
                    extent: x.len(),
                });
            }
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = x.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            let probs: Vec<f64> = x.iter().map(|v| (v - lse).exp()).collect();
            (lse - x[target], probs)
        };
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        )
    }

    /// Additive attention scores `v · tanh(keys[s] + query)` for `s` in
    /// `lo..=hi`; positions outside the window are left at zero and are not
    /// evaluated. Each evaluated position increments [`Tape::score_calls`].
    pub fn window_scores(&self, keys: Var, query: Var, v: Var, lo: usize, hi: usize) -> Result<Var> {
        let (len, out, activations) = {
            let nodes = self.nodes.borrow();
            let (dk, dq, dv) = (&nodes[keys.0].dims, &nodes[query.0].dims, &nodes[v.0].dims);
            if dk.len() != 2 || dq.len() != 1 || dq != dv || dk[1] != dq[0] {
                return Err(TensorError::Shape {
                    op: "window_scores",
                    left: dk.clone(),
                    right: dq.clone(),
                });
            }
            if lo > hi || hi >= dk[0] {
                return Err(TensorError::Index {
                    op: "window_scores",
                    index: hi,
                    extent: dk[0],
                });
            }
            let a = dq[0];
            let (k, q, vv) = (self.data(&nodes, keys), self.data(&nodes, query), self.data(&nodes, v));
            let mut out = vec![0.0; dk[0]];
            let mut activations = vec![0.0; (hi - lo + 1) * a];
            for (s, act) in (lo..=hi).zip(activations.chunks_exact_mut(a)) {
                let row = &k[s * a..(s + 1) * a];
                for ((t, &kr), &qr) in act.iter_mut().zip(row).zip(q) {
                    *t = (kr + qr).tanh();
                }
                out[s] = kernels::dot(act, vv);
            }
            (dk[0], out, activations)
        };
        self.score_calls.set(self.score_calls.get() + (hi - lo + 1) as u64);
        self.push(
            "window_scores",
            vec![len],
            out,
            Op::WindowScores {
                keys,
                query,
                v,
                lo,
                activations,
            },
        )
    }

    /// Fused LSTM cell update. `gates` is the `[4H]` pre-activation in
    /// (input, forget, candidate, output) order and `cell` the previous `[H]`
    /// cell state. Returns `[2H]`: the new hidden state followed by the new cell.
    pub fn lstm_gates(&self, gates: Var, cell: Var) -> Result<Var> {
        let (h, out, acts) = {
            let nodes = self.nodes.borrow();
            let (dg, dc) = (&nodes[gates.0].dims, &nodes[cell.0].dims);
            if dg.len() != 1 || dc.len() != 1 || dg[0] != 4 * dc[0] {
                return Err(TensorError::Shape {
                    op: "lstm_gates",
                    left: dg.clone(),
                    right: dc.clone(),
                });
            }
            let h = dc[0];
            let (z, c) = (self.data(&nodes, gates), self.data(&nodes, cell));
            let mut acts = vec![0.0; 5 * h];
            let mut out = vec![0.0; 2 * h];
            for j in 0..h {
                let i = kernels::sigmoid(z[j]);
                let f = kernels::sigmoid(z[h + j]);
                let g = z[2 * h + j].tanh();
                let o = kernels::sigmoid(z[3 * h + j]);
                let c_new = f * c[j] + i * g;
                let tc = c_new.tanh();
                acts[j] = i;
                acts[h + j] = f;
                acts[2 * h + j] = g;
                acts[3 * h + j] = o;
                acts[4 * h + j] = tc;
                out[j] = o * tc;
                out[h + j] = c_new;
            }
            (h, out, acts)
        };
        self.push("lstm_gates", vec![2 * h], out, Op::LstmGates { gates, cell, acts })
    }

    /// Reverse pass from a one-element output. Leaf gradients accumulate
    /// additively over every use of the leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_len: usize = nodes[output.0].dims.iter().product();
        if out_len != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                left: nodes[output.0].dims.clone(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(&nodes, node, i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite {
                        op: op_name(&nodes[i].op),
                    });
                }
            }
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.borrow().clone(),
        })
    }

    fn backprop_node(&self, nodes: &[Node], node: &Node, index: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = self.data(nodes, Var(index));
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(accumulator(nodes, grads, v))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    kernels::axpy(1.0, g, da);
                }
                if let Some(db) = acc!(*b) {
                    kernels::axpy(1.0, g, db);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc!(*a) {
                    kernels::axpy(1.0, g, da);
                }
                if let Some(db) = acc!(*b) {
                    kernels::axpy(-1.0, g, db);
                }
            }
            Op::Mul(a, b) => {
                let (x, z) = (self.data(nodes, *a).to_vec(), self.data(nodes, *b).to_vec());
                if let Some(da) = acc!(*a) {
                    for ((d, gi), zi) in da.iter_mut().zip(g).zip(&z) {
                        *d += gi * zi;
                    }
                }
                if let Some(db) = acc!(*b) {
                    for ((d, gi), xi) in db.iter_mut().zip(g).zip(&x) {
                        *d += gi * xi;
                    }
                }
            }
            Op::Neg(a) => {
                if let Some(da) = acc!(*a) {
                    kernels::axpy(-1.0, g, da);
                }
            }
            Op::Scale(a, f) => {
                if let Some(da) = acc!(*a) {
                    kernels::axpy(*f, g, da);
                }
            }
            Op::Tanh(a) => {
                if let Some(da) = acc!(*a) {
                    for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = acc!(*a) {
                    for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(da) = acc!(*a) {
                    for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                        *d += gi * yi;
                    }
                }
            }
            Op::Log(a) => {
                let x = self.data(nodes, *a).to_vec();
                if let Some(da) = acc!(*a) {
                    for ((d, gi), xi) in da.iter_mut().zip(g).zip(&x) {
                        *d += gi / xi;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = acc!(*a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Dot(a, b) => {
                let (x, z) = (self.data(nodes, *a).to_vec(), self.data(nodes, *b).to_vec());
                if let Some(da) = acc!(*a) {
                    kernels::axpy(g[0], &z, da);
                }
                if let Some(db) = acc!(*b) {
                    kernels::axpy(g[0], &x, db);
                }
            }
            Op::Expand(a) => {
                if let Some(da) = acc!(*a) {
                    da[0] += g.iter().sum::<f64>();
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].dims[0], nodes[a.0].dims[1]);
                let n = nodes[b.0].dims[1];
                let x = self.data(nodes, *a);
                let w = self.data(nodes, *b);
                if nodes[a.0].requires_grad {
                    let mut tmp = vec![0.0; m * k];
                    for (grow, trow) in g.chunks_exact(n).zip(tmp.chunks_exact_mut(k)) {
                        kernels::matvec(w, grow, trow);
                    }
                    kernels::axpy(1.0, &tmp, accumulator(nodes, grads, *a));
                }
                if nodes[b.0].requires_grad {
                    let mut tmp = vec![0.0; k * n];
                    for (xrow, grow) in x.chunks_exact(k).zip(g.chunks_exact(n)) {
                        kernels::outer_acc(xrow, grow, &mut tmp);
                    }
                    kernels::axpy(1.0, &tmp, accumulator(nodes, grads, *b));
                }
            }
            Op::MatVec(w, x) => {
                let wv = self.data(nodes, *w);
                let xv = self.data(nodes, *x);
                if nodes[w.0].requires_grad {
                    let xv = xv.to_vec();
                    kernels::outer_acc(g, &xv, accumulator(nodes, grads, *w));
                }
                if nodes[x.0].requires_grad {
                    let mut tmp = vec![0.0; xv.len()];
                    kernels::vecmat_acc(g, wv, &mut tmp);
                    kernels::axpy(1.0, &tmp, accumulator(nodes, grads, *x));
                }
            }
            Op::VecMat(x, w) => {
                let wv = self.data(nodes, *w);
                let xv = self.data(nodes, *x);
                if nodes[x.0].requires_grad {
                    let mut tmp = vec![0.0; xv.len()];
                    kernels::matvec(wv, g, &mut tmp);
                    kernels::axpy(1.0, &tmp, accumulator(nodes, grads, *x));
                }
                if nodes[w.0].requires_grad {
                    let xv = xv.to_vec();
                    kernels::outer_acc(&xv, g, accumulator(nodes, grads, *w));
                }
            }
            Op::Concat(parts, axis) => {
                let out_dims = &node.dims;
                if out_dims.len() == 1 || *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let n: usize = nodes[p.0].dims.iter().product();
                        if let Some(dp) = acc!(*p) {
                            kernels::axpy(1.0, &g[off..off + n], dp);
                        }
                        off += n;
                    }
                } else {
                    let total = out_dims[1];
                    let mut col = 0;
                    for p in parts {
                        let c = nodes[p.0].dims[1];
                        if let Some(dp) = acc!(*p) {
                            for (r, drow) in dp.chunks_exact_mut(c).enumerate() {
                                kernels::axpy(1.0, &g[r * total + col..r * total + col + c], drow);
                            }
                        }
                        col += c;
                    }
                }
            }
            Op::StackRows(rows) => {
                let w = node.dims[1];
                for (r, p) in rows.iter().enumerate() {
                    if let Some(dp) = acc!(*p) {
                        kernels::axpy(1.0, &g[r * w..(r + 1) * w], dp);
                    }
                }
            }
            Op::Row(m, r) => {
                let c = node.dims[0];
                if let Some(dm) = acc!(*m) {
                    kernels::axpy(1.0, g, &mut dm[r * c..(r + 1) * c]);
                }
            }
            Op::Slice(a, start) => {
                if let Some(da) = acc!(*a) {
                    kernels::axpy(1.0, g, &mut da[*start..*start + g.len()]);
                }
            }
            Op::Columns(m, start) => {
                let len = node.dims[1];
                let total = nodes[m.0].dims[1];
                if let Some(dm) = acc!(*m) {
                    for (grow, drow) in g.chunks_exact(len).zip(dm.chunks_exact_mut(total)) {
                        kernels::axpy(1.0, grow, &mut drow[*start..*start + len]);
                    }
                }
            }
            Op::Pick(a, idx) => {
                if let Some(da) = acc!(*a) {
                    da[*idx] += g[0];
                }
            }
            Op::SoftmaxMasked(a, mask) => {
                if let Some(da) = acc!(*a) {
                    let inner = kernels::dot(g, y);
                    for (((d, gi), yi), &keep) in da.iter_mut().zip(g).zip(y).zip(mask) {
                        if keep {
                            *d += yi * (gi - inner);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                if let Some(da) = acc!(*logits) {
                    kernels::axpy(g[0], probs, da);
                    da[*target] -= g[0];
                }
            }
            Op::WindowScores {
                keys,
                query,
                v,
                lo,
                activations,
            } => {
                let a = nodes[query.0].dims[0];
                let vv = self.data(nodes, *v).to_vec();
                let mut dpre = vec![0.0; activations.len()];
                let mut dv = vec![0.0; a];
                for (w, act) in activations.chunks_exact(a).enumerate() {
                    let gs = g[lo + w];
                    if gs == 0.0 {
                        continue;
                    }
                    kernels::axpy(gs, act, &mut dv);
                    for ((d, t), vj) in dpre[w * a..(w + 1) * a].iter_mut().zip(act).zip(&vv) {
                        *d = gs * vj * (1.0 - t * t);
                    }
                }
                if let Some(dk) = acc!(*keys) {
                    kernels::axpy(1.0, &dpre, &mut dk[lo * a..lo * a + dpre.len()]);
                }
                if let Some(dq) = acc!(*query) {
                    for row in dpre.chunks_exact(a) {
                        kernels::axpy(1.0, row, dq);
                    }
                }
                if let Some(dvv) = acc!(*v) {
                    kernels::axpy(1.0, &dv, dvv);
                }
            }
            Op::LstmGates { gates, cell, acts } => {
                let h = node.dims[0] / 2;
                let c_prev = self.data(nodes, *cell).to_vec();
                let (dh, dc_out) = g.split_at(h);
                let mut dz = vec![0.0; 4 * h];
                let mut dc_prev = vec![0.0; h];
                for j in 0..h {
                    let (i, f, gg, o, tc) = (acts[j], acts[h + j], acts[2 * h + j], acts[3 * h + j], acts[4 * h + j]);
                    let dc = dc_out[j] + dh[j] * o * (1.0 - tc * tc);
                    dz[j] = dc * gg * i * (1.0 - i);
                    dz[h + j] = dc * c_prev[j] * f * (1.0 - f);
                    dz[2 * h + j] = dc * i * (1.0 - gg * gg);
                    dz[3 * h + j] = dh[j] * tc * o * (1.0 - o);
                    dc_prev[j] = dc * f;
                }
                if let Some(dg) = acc!(*gates) {
                    kernels::axpy(1.0, &dz, dg);
                }
                if let Some(dcp) = acc!(*cell) {
                    kernels::axpy(1.0, &dc_prev, dcp);
                }
            }
        }
    }
}

fn accumulator<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].dims.iter().product()])
}

fn operands(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Constant | Op::Param => vec![],
        Op::MatMul(a, b) | Op::MatVec(a, b) | Op::VecMat(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Dot(a, b) => {
            vec![*a, *b]
        }
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sum(a)
        | Op::Expand(a)
        | Op::Row(a, _)
        | Op::Slice(a, _)
        | Op::Columns(a, _)
        | Op::Pick(a, _)
        | Op::SoftmaxMasked(a, _) => vec![*a],
        Op::Concat(parts, _) | Op::StackRows(parts) => parts.clone(),
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::WindowScores { keys, query, v, .. } => vec![*keys, *query, *v],
        Op::LstmGates { gates, cell, .. } => vec![*gates, *cell],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Constant => "constant",
        Op::Param => "param",
        Op::MatMul(..) => "matmul",
        Op::MatVec(..) => "matvec",
        Op::VecMat(..) => "vecmat",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Neg(..) => "neg",
        Op::Scale(..) => "scale",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sum(..) => "sum",
        Op::Dot(..) => "dot",
        Op::Expand(..) => "expand",
        Op::Concat(..) => "concat",
        Op::StackRows(..) => "stack_rows",
        Op::Row(..) => "row",
        Op::Slice(..) => "slice",
        Op::Columns(..) => "columns",
        Op::Pick(..) => "pick",
        Op::SoftmaxMasked(..) => "softmax_masked",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::WindowScores { .. } => "window_scores",
        Op::LstmGates { .. } => "lstm_gates",
    }
}

/// Stabilized softmax restricted to `mask`; `None` when no position is kept.
pub(crate) fn masked_softmax(logits: &[f64], mask: &[bool]) -> Option<Vec<f64>> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { (x - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    Some(out)
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for parameter `index` of the tape's parameter slice.
    pub fn param(&self, index: usize) -> Option<&[f64]> {
        self.param_vars.get(index).copied().flatten().and_then(|v| self.wrt(v))
    }

    pub fn num_params(&self) -> usize {
        self.param_vars.len()
    }
}
