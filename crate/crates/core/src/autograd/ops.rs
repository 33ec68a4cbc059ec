use std::sync::Arc;

use super::tape::{Node, Var};
use super::tensor::gemm;
use super::{AutogradError, Tensor};

type Result<T> = std::result::Result<T, AutogradError>;

/// Recorded operation together with whatever its backward rule needs.
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// `R×C + C`, the bias broadcast.
    AddRow(usize, usize),
    /// `R×C ⊙ R`, scaling each row by its own factor.
    MulCol(usize, usize),
    /// `R×C ⊘ R`, dividing each row by its own divisor.
    DivCol(usize, usize),
    MulConst(usize, Arc<Tensor>),
    AddConst(usize),
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Transpose(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    SelectPerRow {
        input: usize,
        indices: Vec<usize>,
    },
    SumAll(usize),
    SumAxis {
        input: usize,
        axis: usize,
    },
    Exp(usize),
    Log(usize),
    Relu(usize),
    Tanh(usize),
    Recip(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2NormRows(usize),
    StopGradient,
    StraightThrough(usize),
    CosineSim {
        z: usize,
        e: usize,
        z_unit: Tensor,
        z_norm: Vec<f64>,
        e_unit: Tensor,
        e_norm: Vec<f64>,
        e_mask: Option<Arc<Tensor>>,
    },
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn wants(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

impl Op {
    pub(crate) fn backward(
        &self,
        nodes: &[Node],
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let val = |id: usize| -> &Tensor { &nodes[id].value };
        match self {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                accumulate(nodes, grads, *a, g.clone());
                accumulate(nodes, grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(nodes, grads, *a, g.clone());
                if wants(nodes, *b) {
                    accumulate(nodes, grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(nodes, *a) {
                    accumulate(nodes, grads, *a, zip_map(g, val(*b), |x, y| x * y));
                }
                if wants(nodes, *b) {
                    accumulate(nodes, grads, *b, zip_map(g, val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => accumulate(nodes, grads, *a, g.map(|x| x * s)),
            Op::AddRow(a, b) => {
                accumulate(nodes, grads, *a, g.clone());
                if wants(nodes, *b) {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (acc, x) in gb.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    let gb = Tensor::new(val(*b).shape(), gb).expect("bias shape");
                    accumulate(nodes, grads, *b, gb);
                }
            }
            Op::MulCol(a, s) => {
                let sv = val(*s).data();
                if wants(nodes, *a) {
                    let mut ga = g.clone();
                    for (r, &f) in sv.iter().enumerate() {
                        for x in ga.row_mut(r) {
                            *x *= f;
                        }
                    }
                    accumulate(nodes, grads, *a, ga);
                }
                if wants(nodes, *s) {
                    let av = val(*a);
                    let gs: Vec<f64> = (0..sv.len())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    let gs = Tensor::new(val(*s).shape(), gs).expect("scale shape");
                    accumulate(nodes, grads, *s, gs);
                }
            }
            Op::DivCol(a, s) => {
                let sv = val(*s).data();
                if wants(nodes, *a) {
                    let mut ga = g.clone();
                    for (r, &d) in sv.iter().enumerate() {
                        for x in ga.row_mut(r) {
                            *x /= d;
                        }
                    }
                    accumulate(nodes, grads, *a, ga);
                }
                if wants(nodes, *s) {
                    // d(a/s)/ds = −out/s
                    let gs: Vec<f64> = (0..sv.len())
                        .map(|r| {
                            -g.row(r).iter().zip(out.row(r)).map(|(x, y)| x * y).sum::<f64>() / sv[r]
                        })
                        .collect();
                    let gs = Tensor::new(val(*s).shape(), gs).expect("divisor shape");
                    accumulate(nodes, grads, *s, gs);
                }
            }
            Op::MulConst(a, c) => {
                accumulate(nodes, grads, *a, zip_map(g, c, |x, y| x * y));
            }
            Op::AddConst(a) => accumulate(nodes, grads, *a, g.clone()),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = g.cols();
                if wants(nodes, *a) {
                    // dA = G·Bᵀ (or G·B when B was used transposed)
                    let mut ga = vec![0.0; m * k];
                    let b_strides = if *trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    gemm(m, n, k, g.data(), (n as isize, 1), bv.data(), b_strides, &mut ga, 0.0);
                    accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga).unwrap());
                }
                if wants(nodes, *b) {
                    let mut gb = vec![0.0; k * n];
                    if *trans_b {
                        // B is n×k: dB = Gᵀ·A
                        gemm(n, m, k, g.data(), (1, n as isize), av.data(), (k as isize, 1), &mut gb, 0.0);
                    } else {
                        // dB = Aᵀ·G
                        gemm(k, m, n, av.data(), (1, k as isize), g.data(), (n as isize, 1), &mut gb, 0.0);
                    }
                    accumulate(nodes, grads, *b, Tensor::new(bv.shape(), gb).unwrap());
                }
            }
            Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose2()),
            Op::Reshape(a) => {
                let ga = g.clone().reshaped(val(*a).shape()).expect("reshape back");
                accumulate(nodes, grads, *a, ga);
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for &id in inputs {
                    let shape = val(id).shape().to_vec();
                    let part = slice_tensor(g, *axis, offset, shape[*axis]);
                    offset += shape[*axis];
                    accumulate(nodes, grads, id, part);
                }
            }
            Op::Slice { input, axis, start } => {
                if wants(nodes, *input) {
                    let src = val(*input);
                    let mut full = Tensor::zeros(src.shape());
                    let c = src.cols();
                    let gc = g.cols();
                    for r in 0..g.rows() {
                        let (dst_r, dst_c) = if *axis == 0 { (r + start, 0) } else { (r, *start) };
                        full.data_mut()[dst_r * c + dst_c..dst_r * c + dst_c + gc]
                            .copy_from_slice(g.row(r));
                    }
                    accumulate(nodes, grads, *input, full);
                }
            }
            Op::GatherRows { table, indices } => {
                if wants(nodes, *table) {
                    let mut gt = Tensor::zeros(val(*table).shape());
                    for (r, &idx) in indices.iter().enumerate() {
                        for (acc, x) in gt.row_mut(idx).iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    accumulate(nodes, grads, *table, gt);
                }
            }
            Op::SelectPerRow { input, indices } => {
                if wants(nodes, *input) {
                    let mut gi = Tensor::zeros(val(*input).shape());
                    let c = gi.cols();
                    for (r, &idx) in indices.iter().enumerate() {
                        gi.data_mut()[r * c + idx] += g.data()[r];
                    }
                    accumulate(nodes, grads, *input, gi);
                }
            }
            Op::SumAll(a) => {
                accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), g.data()[0]));
            }
            Op::SumAxis { input, axis } => {
                let src = val(*input);
                let (r, c) = (src.rows(), src.cols());
                let mut gi = Tensor::zeros(src.shape());
                for i in 0..r {
                    for j in 0..c {
                        gi.data_mut()[i * c + j] = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                    }
                }
                accumulate(nodes, grads, *input, gi);
            }
            Op::Exp(a) => accumulate(nodes, grads, *a, zip_map(g, out, |x, y| x * y)),
            Op::Log(a) => accumulate(nodes, grads, *a, zip_map(g, val(*a), |x, y| x / y)),
            Op::Relu(a) => accumulate(
                nodes,
                grads,
                *a,
                zip_map(g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::Tanh(a) => accumulate(nodes, grads, *a, zip_map(g, out, |x, y| x * (1.0 - y * y))),
            Op::Recip(a) => accumulate(nodes, grads, *a, zip_map(g, out, |x, y| -x * y * y)),
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dst, &yi), &gi) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *dst = yi * (gi - dot);
                    }
                }
                accumulate(nodes, grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let gsum: f64 = gr.iter().sum();
                    for ((dst, &yi), &gi) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *dst = gi - yi.exp() * gsum;
                    }
                }
                accumulate(nodes, grads, *a, ga);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let rows = out.rows();
                let gam = val(*gamma).data();
                if wants(nodes, *x) {
                    let mut gx = Tensor::zeros(val(*x).shape());
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * c..(r + 1) * c];
                        let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, dst) in gx.row_mut(r).iter_mut().enumerate() {
                            *dst = rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(nodes, grads, *x, gx);
                }
                if wants(nodes, *gamma) {
                    let mut gg = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g.row(r)[j] * xhat[r * c + j];
                        }
                    }
                    let gg = Tensor::new(val(*gamma).shape(), gg).unwrap();
                    accumulate(nodes, grads, *gamma, gg);
                }
                if wants(nodes, *beta) {
                    let mut gb = vec![0.0; c];
                    for r in 0..rows {
                        for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    let gb = Tensor::new(val(*beta).shape(), gb).unwrap();
                    accumulate(nodes, grads, *beta, gb);
                }
            }
            Op::L2NormRows(a) => {
                let src = val(*a);
                let mut ga = Tensor::zeros(src.shape());
                for r in 0..src.rows() {
                    let n = out.data()[r];
                    if n > 0.0 {
                        let f = g.data()[r] / n;
                        for (dst, &xv) in ga.row_mut(r).iter_mut().zip(src.row(r)) {
                            *dst = f * xv;
                        }
                    }
                }
                accumulate(nodes, grads, *a, ga);
            }
            Op::StraightThrough(a) => accumulate(nodes, grads, *a, g.clone()),
            Op::CosineSim {
                z,
                e,
                z_unit,
                z_norm,
                e_unit,
                e_norm,
                e_mask,
            } => {
                let (t, v, d) = (z_unit.rows(), e_unit.rows(), z_unit.cols());
                if wants(nodes, *z) {
                    // dz_t = (Σ_j G_tj ê_j − (Σ_j G_tj S_tj) ẑ_t) / |z_t|
                    let mut gz = vec![0.0; t * d];
                    gemm(t, v, d, g.data(), (v as isize, 1), e_unit.data(), (d as isize, 1), &mut gz, 0.0);
                    for r in 0..t {
                        let dot: f64 = g.row(r).iter().zip(out.row(r)).map(|(a, b)| a * b).sum();
                        for (j, dst) in gz[r * d..(r + 1) * d].iter_mut().enumerate() {
                            *dst = (*dst - dot * z_unit.row(r)[j]) / z_norm[r];
                        }
                    }
                    accumulate(nodes, grads, *z, Tensor::new(val(*z).shape(), gz).unwrap());
                }
                if wants(nodes, *e) {
                    let masked;
                    let ge_up = match e_mask {
                        Some(m) => {
                            masked = zip_map(g, m, |x, y| x * y);
                            &masked
                        }
                        None => g,
                    };
                    let mut ge = vec![0.0; v * d];
                    gemm(v, t, d, ge_up.data(), (1, v as isize), z_unit.data(), (d as isize, 1), &mut ge, 0.0);
                    for j in 0..v {
                        let dot: f64 = (0..t).map(|r| ge_up.get2(r, j) * out.get2(r, j)).sum();
                        for (k, dst) in ge[j * d..(j + 1) * d].iter_mut().enumerate() {
                            *dst = (*dst - dot * e_unit.row(j)[k]) / e_norm[j];
                        }
                    }
                    accumulate(nodes, grads, *e, Tensor::new(val(*e).shape(), ge).unwrap());
                }
            }
        }
    }
}

fn slice_tensor(src: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (r, c) = (src.rows(), src.cols());
    if axis == 0 {
        let data = src.data()[start * c..(start + len) * c].to_vec();
        Tensor::new(&[len, c], data).unwrap()
    } else {
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        Tensor::new(&[r, len], data).unwrap()
    }
}

fn unit_rows(t: &Tensor, op: &'static str, operand: &'static str) -> Result<(Tensor, Vec<f64>)> {
    let mut unit = t.clone();
    let mut norms = Vec::with_capacity(t.rows());
    for r in 0..t.rows() {
        let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(AutogradError::ZeroNorm { op, operand, index: r });
        }
        for x in unit.row_mut(r) {
            *x /= n;
        }
        norms.push(n);
    }
    Ok((unit, norms))
}

/// Cosine similarity matrix between the rows of `z` (T×D) and `e` (V×D).
///
/// Shared by the tape op and by value-level callers (probing, top-k
/// selection) so both see identical numbers.
pub fn cosine_similarity_values(z: &Tensor, e: &Tensor) -> Result<Tensor> {
    Ok(cosine_parts(z, e)?.0)
}

#[allow(clippy::type_complexity)]
fn cosine_parts(z: &Tensor, e: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>, Tensor, Vec<f64>)> {
    if !is_matrix(z) || !is_matrix(e) || z.cols() != e.cols() {
        return Err(AutogradError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: z.shape().to_vec(),
            rhs: e.shape().to_vec(),
        });
    }
    let (z_unit, z_norm) = unit_rows(z, "cosine_similarity", "queries")?;
    let (e_unit, e_norm) = unit_rows(e, "cosine_similarity", "codebook")?;
    let sims = z_unit.matmul(&e_unit, true)?;
    Ok((sims, z_unit, z_norm, e_unit, e_norm))
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutogradError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if !is_matrix(a) {
        return Err(AutogradError::InvalidShape {
            op,
            detail: format!("expected a matrix, got shape {:?}", a.shape()),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(Arc::new(value), rg, op)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(Arc::new(value), rg, op)
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same(name, &a, &b)?;
        Ok(self.binary(other, zip_map(&a, &b, f), op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "subtract", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "multiply", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x * s);
        Ok(self.unary(v, Op::Scale(self.id, s)))
    }

    /// Adds a length-C vector to every row of an R×C matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        if b.len() != a.cols() {
            return Err(AutogradError::ShapeMismatch {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = (*a).clone();
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(self.binary(bias, out, Op::AddRow(self.id, bias.id)))
    }

    /// Multiplies row `r` of an R×C matrix by `scales[r]`.
    pub fn mul_col(self, scales: Var<'t>) -> Result<Var<'t>> {
        let (a, s) = (self.value(), scales.value());
        if s.len() != a.rows() {
            return Err(AutogradError::ShapeMismatch {
                op: "mul_col",
                lhs: a.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let mut out = (*a).clone();
        for (r, &f) in s.data().iter().enumerate() {
            for x in out.row_mut(r) {
                *x *= f;
            }
        }
        Ok(self.binary(scales, out, Op::MulCol(self.id, scales.id)))
    }

    /// Divides row `r` of an R×C matrix by `divisors[r]`.
    pub fn div_col(self, divisors: Var<'t>) -> Result<Var<'t>> {
        let (a, s) = (self.value(), divisors.value());
        if s.len() != a.rows() {
            return Err(AutogradError::ShapeMismatch {
                op: "div_col",
                lhs: a.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let mut out = (*a).clone();
        for (r, &d) in s.data().iter().enumerate() {
            for x in out.row_mut(r) {
                *x /= d;
            }
        }
        Ok(self.binary(divisors, out, Op::DivCol(self.id, divisors.id)))
    }

    /// Elementwise product with a constant (e.g. a 0/1 mask).
    pub fn mul_const(self, c: Arc<Tensor>) -> Result<Var<'t>> {
        let a = self.value();
        check_same("mul_const", &a, &c)?;
        let out = zip_map(&a, &c, |x, y| x * y);
        Ok(self.unary(out, Op::MulConst(self.id, c)))
    }

    /// Elementwise sum with a constant (e.g. an additive attention mask).
    pub fn add_const(self, c: &Tensor) -> Result<Var<'t>> {
        let a = self.value();
        check_same("add_const", &a, c)?;
        let out = zip_map(&a, c, |x, y| x + y);
        Ok(self.unary(out, Op::AddConst(self.id)))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if !is_matrix(&a) || !is_matrix(&b) {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = a.matmul(&b, trans_b)?;
        Ok(self.binary(
            other,
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        check_matrix("transpose", &a)?;
        Ok(self.unary(a.transpose2(), Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = (*self.value()).clone().reshaped(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    /// Concatenates matrices along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(AutogradError::InvalidShape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        if axis > 1 {
            return Err(AutogradError::InvalidShape {
                op: "concat",
                detail: format!("axis {axis} unsupported"),
            });
        }
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let other_axis = 1 - axis;
        let fixed = values[0].shape().get(other_axis).copied();
        for v in &values {
            if !is_matrix(v) || v.shape().get(other_axis).copied() != fixed {
                return Err(AutogradError::ShapeMismatch {
                    op: "concat",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let out = if axis == 0 {
            let rows: usize = values.iter().map(|v| v.rows()).sum();
            let mut data = Vec::with_capacity(rows * values[0].cols());
            for v in &values {
                data.extend_from_slice(v.data());
            }
            Tensor::new(&[rows, values[0].cols()], data)?
        } else {
            let rows = values[0].rows();
            let cols: usize = values.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in &values {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::new(&[rows, cols], data)?
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first.tape.push(
            Arc::new(out),
            rg,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Contiguous range `[start, start+len)` of rows (`axis` 0) or columns (`axis` 1).
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_matrix("slice", &a)?;
        if axis > 1 || len == 0 || start + len > a.shape()[axis] {
            return Err(AutogradError::InvalidShape {
                op: "slice",
                detail: format!("range {start}..{} on axis {axis} of {:?}", start + len, a.shape()),
            });
        }
        let out = slice_tensor(&a, axis, start, len);
        Ok(self.unary(
            out,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    /// Embedding lookup: row `indices[i]` of this V×D table becomes output row `i`.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        check_matrix("gather_rows", &table)?;
        if indices.is_empty() {
            return Err(AutogradError::InvalidShape {
                op: "gather_rows",
                detail: "empty index list".into(),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * table.cols());
        for &i in indices {
            if i >= table.rows() {
                return Err(AutogradError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: table.rows(),
                });
            }
            data.extend_from_slice(table.row(i));
        }
        let out = Tensor::new(&[indices.len(), table.cols()], data)?;
        Ok(self.unary(
            out,
            Op::GatherRows {
                table: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Picks `self[r, indices[r]]` for every row, giving a length-R vector.
    pub fn select_per_row(self, indices: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if indices.len() != a.rows() {
            return Err(AutogradError::InvalidShape {
                op: "select_per_row",
                detail: format!("{} indices for {} rows", indices.len(), a.rows()),
            });
        }
        let mut data = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            if i >= a.cols() {
                return Err(AutogradError::IndexOutOfRange {
                    op: "select_per_row",
                    index: i,
                    bound: a.cols(),
                });
            }
            data.push(a.row(r)[i]);
        }
        Ok(self.unary(
            Tensor::vector(data),
            Op::SelectPerRow {
                input: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let s = self.value().sum();
        Ok(self.unary(Tensor::scalar(s), Op::SumAll(self.id)))
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    /// Matrix reduction: axis 0 sums over rows (result has C entries),
    /// axis 1 sums over columns (result has R entries).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_matrix("sum_axis", &a)?;
        let (r, c) = (a.rows(), a.cols());
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (s, x) in acc.iter_mut().zip(a.row(i)) {
                        *s += x;
                    }
                }
                acc
            }
            1 => (0..r).map(|i| a.row(i).iter().sum()).collect(),
            _ => {
                return Err(AutogradError::InvalidShape {
                    op: "sum_axis",
                    detail: format!("axis {axis} unsupported"),
                })
            }
        };
        Ok(self.unary(Tensor::vector(out), Op::SumAxis { input: self.id, axis }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_matrix("mean_axis", &a)?;
        let n = a.shape()[axis] as f64;
        self.sum_axis(axis)?.scale(1.0 / n)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::exp);
        Ok(self.unary(v, Op::Exp(self.id)))
    }

    pub fn log(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::ln);
        Ok(self.unary(v, Op::Log(self.id)))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let a = self.value();
        if self.requires_grad() {
            let margin = a.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
            self.tape.note_kink(margin);
        }
        let v = a.map(|x| if x > 0.0 || x.is_nan() { x } else { 0.0 });
        Ok(self.unary(v, Op::Relu(self.id)))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::tanh);
        Ok(self.unary(v, Op::Tanh(self.id)))
    }

    pub fn recip(self) -> Result<Var<'t>> {
        let v = self.value().map(|x| 1.0 / x);
        Ok(self.unary(v, Op::Recip(self.id)))
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let mut out = (*self.value()).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        Ok(self.unary(out, Op::SoftmaxRows(self.id)))
    }

    pub fn log_softmax_rows(self) -> Result<Var<'t>> {
        let mut out = (*self.value()).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        Ok(self.unary(out, Op::LogSoftmaxRows(self.id)))
    }

    /// Row-wise layer normalization with learnable `gamma`/`beta` (length C).
    pub fn layer_norm_rows(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (g, b) = (gamma.value(), beta.value());
        let c = x.cols();
        if g.len() != c || b.len() != c {
            return Err(AutogradError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(x.shape());
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out.data_mut()[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            Arc::new(out),
            rg,
            Op::LayerNormRows {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Euclidean norm of every row, shaped R×1.
    pub fn l2_norm_rows(self) -> Result<Var<'t>> {
        let a = self.value();
        let norms: Vec<f64> = (0..a.rows())
            .map(|r| a.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let n = norms.len();
        Ok(self.unary(Tensor::new(&[n, 1], norms)?, Op::L2NormRows(self.id)))
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(self) -> Var<'t> {
        self.tape.push(self.value(), false, Op::StopGradient)
    }

    /// Straight-through estimator: forwards `replacement`'s value exactly while
    /// routing the upstream gradient to `self` unchanged. Equivalent to
    /// `self + sg(replacement - self)` without the rounding of the add/sub pair.
    pub fn straight_through(self, replacement: &Tensor) -> Result<Var<'t>> {
        let a = self.value();
        check_same("straight_through", &a, replacement)?;
        Ok(self.unary(replacement.clone(), Op::StraightThrough(self.id)))
    }

    /// Cosine similarity between rows of `self` (T×D) and rows of `codebook` (V×D).
    ///
    /// `codebook_mask` (T×V of 0/1) restricts which (frame, entry) pairs
    /// propagate gradient into the codebook; the query side always receives
    /// the full gradient.
    pub fn cosine_similarity(
        self,
        codebook: Var<'t>,
        codebook_mask: Option<Arc<Tensor>>,
    ) -> Result<Var<'t>> {
        let (z, e) = (self.value(), codebook.value());
        let (sims, z_unit, z_norm, e_unit, e_norm) = cosine_parts(&z, &e)?;
        if let Some(m) = &codebook_mask {
            check_same("cosine_similarity", &sims, m)?;
        }
        Ok(self.binary(
            codebook,
            sims,
            Op::CosineSim {
                z: self.id,
                e: codebook.id,
                z_unit,
                z_norm,
                e_unit,
                e_norm,
                e_mask: codebook_mask,
            },
        ))
    }
}
