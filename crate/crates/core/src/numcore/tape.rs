//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`]; [`Tape::backward`] walks
//! the nodes in reverse insertion order and accumulates adjoints. Nodes are
//! only ever appended, so insertion order is a topological order.

use crate::error::{Error, Result};
use crate::numcore::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `[.., m, k] x [.., k, n]` (or `[.., n, k]` when `trans_b`), `batch` leading matrices.
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Log(Var),
    Log1p(Var),
    Exp(Var),
    Pow(Var, f64),
    ClampMax(Var, f64),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MaskFill(Var, Vec<bool>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    ///
    /// `None` for values that do not require gradients or before `backward`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let g = self.grads.get(v.0)?.clone()?;
        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad has value shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        self.matmul_impl(a, b, 1, sa[0], sa[1], sb[1], false, vec![sa[0], sb[1]])
    }

    /// Batched product over the leading axis: `[b, m, k] x [b, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        self.matmul_impl(a, b, sa[0], sa[1], sa[2], sb[2], false, vec![sa[0], sa[1], sb[2]])
    }

    /// Batched product with the second operand transposed: `[b, m, k] x [b, n, k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::Dimension {
                op: "bmm_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        self.matmul_impl(a, b, sa[0], sa[1], sa[2], sb[1], true, vec![sa[0], sa[1], sb[1]])
    }

    /// `x [.., k] x wᵀ` for `w [n, k]`; used for the tied output projection.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: sx,
                rhs: sw,
            });
        }
        self.matmul_impl(x, w, 1, sx[0], sx[1], sw[0], true, vec![sx[0], sw[0]])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = self.value(b).numel() == 1 || (sb.len() <= sa.len() && sa.ends_with(sb));
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check_broadcast(op_name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// `a + b` where `b` has the shape of a trailing block of `a` or is a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.unary(x, v, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.unary(x, v, Op::AddScalar(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let v = self.value(x).map(f64::ln);
        Ok(self.unary(x, v, Op::Log(x)))
    }

    /// `ln(1 + x)`, defined for `x > -1` (`x = -1` yields `-inf`).
    pub fn log1p(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| !(**v >= -1.0)) {
            return Err(Error::Domain {
                op: "log1p",
                msg: format!("input {bad} below -1"),
            });
        }
        let v = self.value(x).map(f64::ln_1p);
        Ok(self.unary(x, v, Op::Log1p(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.unary(x, v, Op::Exp(x))
    }

    /// `x^e` for a constant exponent. Negative bases are rejected unless
    /// `e` is an integer.
    pub fn pow(&mut self, x: Var, e: f64) -> Result<Var> {
        if e.fract() != 0.0 {
            if let Some(bad) = self.value(x).data().iter().find(|v| **v < 0.0) {
                return Err(Error::Domain {
                    op: "pow",
                    msg: format!("negative base {bad} with exponent {e}"),
                });
            }
        }
        let v = self.value(x).map(|a| a.powf(e));
        Ok(self.unary(x, v, Op::Pow(x, e)))
    }

    pub fn clamp_max(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a.min(c));
        self.unary(x, v, Op::ClampMax(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| {
            let u = GELU_C * (a + GELU_K * a * a * a);
            0.5 * a * (1.0 + u.tanh())
        });
        self.unary(x, v, Op::Gelu(x))
    }

    /// Replaces entries where `mask` is true with `value`. The mask carries
    /// no gradient; filled positions pass none back to `x`.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(Error::Dimension {
                op: "mask_fill",
                lhs: xv.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(&a, &m)| if m { value } else { a })
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.unary(x, v, Op::MaskFill(x, mask.to_vec())))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.unary(x, Tensor::scalar(s), Op::Mean(x))
    }

    /// Sums over the trailing axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let shape = xv.shape()[..xv.shape().len().saturating_sub(1)].to_vec();
        let data = xv.data().chunks(n).map(|r| r.iter().sum()).collect();
        let v = Tensor::new(shape, data).expect("reduced shape");
        self.unary(x, v, Op::SumLast(x))
    }

    // ---- normalisations -------------------------------------------------

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op,
                msg: "NaN input".into(),
            });
        }
        Ok(())
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("softmax", x)?;
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            softmax_row(row, &mut data);
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.unary(x, v, Op::Softmax(x)))
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("log_softmax", x)?;
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            log_softmax_row(row, &mut data);
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.unary(x, v, Op::LogSoftmax(x)))
    }

    /// Zero-mean, unit-variance normalisation over the trailing axis (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.numel() / n);
        for row in xv.data().chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|v| (v - mu) * is));
        }
        let v = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.unary(x, v, Op::LayerNorm { x, inv_std })
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Dimension {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let data = permute_data(self.value(x).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let v = Tensor::new(out_shape, data)?;
        Ok(self.unary(x, v, Op::Permute { x, axes: axes.to_vec() }))
    }

    /// Row lookup: `table [n, d]`, `ids` of shape `id_shape` → `id_shape ++ [d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 || id_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: tv.shape().to_vec(),
                rhs: id_shape.to_vec(),
            });
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Range(format!("row {id} of a {rows}-row table")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        let v = Tensor::new(shape, data)?;
        Ok(self.unary(
            table,
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Selects one entry of the trailing axis per leading position.
    pub fn pick(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if xv.numel() / n != ids.len() {
            return Err(Error::Dimension {
                op: "pick",
                lhs: xv.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let mut data = Vec::with_capacity(ids.len());
        for (row, &id) in xv.data().chunks(n).zip(ids) {
            if id >= n {
                return Err(Error::Range(format!("index {id} in axis of length {n}")));
            }
            data.push(row[id]);
        }
        let shape = xv.shape()[..xv.shape().len() - 1].to_vec();
        let v = Tensor::new(shape, data)?;
        Ok(self.unary(x, v, Op::Pick { x, ids: ids.to_vec() }))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from the scalar `root`, replacing any previous gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let ga = self.acc(grads, *a);
                    for bi in 0..batch {
                        let boff = bi * k * n;
                        // dA = dC · Bᵀ  (or dC · B when B was transposed)
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &bv[boff..boff + k * n],
                            !*trans_b,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            true,
                        );
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.acc(grads, *b);
                    for bi in 0..batch {
                        let boff = bi * k * n;
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let a_blk = &av[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            // B is [n, k]: dB = dCᵀ · A
                            gemm(n, m, k, gs, true, a_blk, false, &mut gb[boff..boff + k * n], true);
                        } else {
                            // dB = Aᵀ · dC
                            gemm(k, m, n, a_blk, true, gs, false, &mut gb[boff..boff + k * n], true);
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.requires_grad(*a) {
                    let ga = self.acc(grads, *a);
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if self.requires_grad(*b) {
                    let gb = self.acc(grads, *b);
                    let nb = gb.len();
                    for (j, s) in g.iter().enumerate() {
                        gb[j % nb] += sign * s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                if self.requires_grad(*a) {
                    let ga = self.acc(grads, *a);
                    for (j, s) in g.iter().enumerate() {
                        ga[j] += s * bv[j % nb];
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.acc(grads, *b);
                    for (j, s) in g.iter().enumerate() {
                        gb[j % nb] += s * av[j];
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc_map(grads, *x, g, |_, s| s * c);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.acc_map(grads, *x, g, |_, s| s);
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |j, s| s / xv[j]);
            }
            Op::Log1p(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |j, s| s / (1.0 + xv[j]));
            }
            Op::Exp(x) => {
                self.acc_map(grads, *x, g, |j, s| s * y[j]);
            }
            Op::Pow(x, e) => {
                let e = *e;
                let xv = self.value(*x).data();
                // The derivative at a zero base is taken as 0.
                self.acc_map(
                    grads,
                    *x,
                    g,
                    |j, s| {
                        if xv[j] == 0.0 {
                            0.0
                        } else {
                            s * e * xv[j].powf(e - 1.0)
                        }
                    }
                );
            }
            Op::ClampMax(x, c) => {
                let c = *c;
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |j, s| if xv[j] <= c { s } else { 0.0 });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc_map(
                    grads,
                    *x,
                    g,
                    |j, s| {
                        let a = xv[j];
                        let u = GELU_C * (a + GELU_K * a * a * a);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * a * a);
                        s * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du)
                    }
                );
            }
            Op::MaskFill(x, mask) => {
                self.acc_map(grads, *x, g, |j, s| if mask[j] { 0.0 } else { s });
            }
            Op::Sum(x) => {
                let s = g[0];
                self.acc_fill(grads, *x, |_| s);
            }
            Op::Mean(x) => {
                let s = g[0] / self.value(*x).numel() as f64;
                self.acc_fill(grads, *x, |_| s);
            }
            Op::SumLast(x) => {
                let n = self.value(*x).last_dim();
                self.acc_fill(grads, *x, |j| g[j / n]);
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                let gx = self.acc(grads, *x);
                for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = node.value.last_dim();
                let gx = self.acc(grads, *x);
                for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let n = node.value.last_dim();
                let nf = n as f64;
                let gx = self.acc(grads, *x);
                for (r, ((gr, yr), dr)) in g
                    .chunks(n)
                    .zip(y.chunks(n))
                    .zip(gx.chunks_mut(n))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / nf;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..n {
                        dr[j] += inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                let gx = self.acc(grads, *x);
                gx.iter_mut().zip(back).for_each(|(d, s)| *d += s);
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).last_dim();
                let gt = self.acc(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::Pick { x, ids } => {
                let n = self.value(*x).last_dim();
                let gx = self.acc(grads, *x);
                for (r, &id) in ids.iter().enumerate() {
                    gx[r * n + id] += g[r];
                }
            }
        }
    }

    /// Mutable gradient buffer of `v`, allocated on first use.
    #[allow(clippy::mut_from_ref)]
    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn acc_map(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.requires_grad(x) {
            return;
        }
        let gx = self.acc(grads, x);
        for (j, (d, s)) in gx.iter_mut().zip(g).enumerate() {
            *d += f(j, *s);
        }
    }

    fn acc_fill(&self, grads: &mut [Option<Vec<f64>>], x: Var, f: impl Fn(usize) -> f64) {
        if !self.requires_grad(x) {
            return;
        }
        let gx = self.acc(grads, x);
        for (j, d) in gx.iter_mut().enumerate() {
            *d += f(j);
        }
    }
}

pub(crate) fn softmax_row(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut z = 0.0;
    for &v in row {
        let e = (v - max).exp();
        z += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|v| *v /= z);
}

pub(crate) fn log_softmax_row(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    out.extend(row.iter().map(|v| v - lse));
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
