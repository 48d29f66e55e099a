//! Column-wise evaluation and reverse-mode differentiation of expressions.
//!
//! An expression is compiled to a post-order instruction list. A forward pass
//! evaluates every instruction over all rows at once (constant subtrees stay
//! scalar); the backward pass pushes per-row adjoints from the output back to
//! constant leaves and input columns.

use std::collections::HashMap;

use super::{ExprError, Expression, FeatureWindow, Node, Operator, VarRef};

/// Anything that can hand out one column of values per (stream, lag).
pub trait ColumnSource {
    fn column(&self, var: &VarRef) -> Option<&[f64]>;
    fn n_rows(&self) -> usize;
}

/// Owned column storage.
#[derive(Debug, Clone, Default)]
pub struct Columns {
    index: HashMap<VarRef, usize>,
    data: Vec<Vec<f64>>,
    rows: usize,
}

impl Columns {
    pub fn new(rows: usize) -> Self {
        Self { index: HashMap::new(), data: Vec::new(), rows }
    }

    pub fn insert(&mut self, var: VarRef, values: Vec<f64>) -> Result<(), ExprError> {
        if values.len() != self.rows {
            return Err(ExprError::ColumnLength { expected: self.rows, got: values.len() });
        }
        match self.index.get(&var) {
            Some(&i) => self.data[i] = values,
            None => {
                self.index.insert(var, self.data.len());
                self.data.push(values);
            }
        }
        Ok(())
    }

    pub fn vars(&self) -> impl Iterator<Item = &VarRef> {
        self.index.keys()
    }
}

impl ColumnSource for Columns {
    fn column(&self, var: &VarRef) -> Option<&[f64]> {
        self.index.get(var).map(|&i| self.data[i].as_slice())
    }

    fn n_rows(&self) -> usize {
        self.rows
    }
}

#[derive(Debug, Clone, Copy)]
enum Instr {
    Const(usize),
    Input(usize),
    Unary(Operator, usize),
    Binary(Operator, usize, usize),
}

/// A compiled expression.
#[derive(Debug, Clone)]
pub struct Program {
    instrs: Vec<Instr>,
    consts: Vec<f64>,
    inputs: Vec<VarRef>,
}

#[derive(Debug, Clone)]
enum Val {
    Scalar(f64),
    Input(usize),
    Vector(Vec<f64>),
}

/// Values of every instruction after a forward pass.
#[derive(Debug)]
pub struct Forward<'c> {
    vals: Vec<Val>,
    cols: Vec<&'c [f64]>,
    rows: usize,
    output: Vec<f64>,
}

impl Forward<'_> {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn into_output(self) -> Vec<f64> {
        self.output
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    fn at(&self, i: usize, r: usize) -> f64 {
        match &self.vals[i] {
            Val::Scalar(c) => *c,
            Val::Input(k) => self.cols[*k][r],
            Val::Vector(v) => v[r],
        }
    }
}

/// Per-row adjoints of every instruction.
#[derive(Debug)]
pub struct Backward<'p> {
    program: &'p Program,
    adjoints: Vec<Vec<f64>>,
}

impl Backward<'_> {
    /// Σ_rows seed·∂output/∂c_j for every constant leaf, in pre-order.
    pub fn constant_gradients(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.program.consts.len()];
        for (i, instr) in self.program.instrs.iter().enumerate() {
            if let Instr::Const(k) = instr {
                out[*k] = self.adjoints[i].iter().sum();
            }
        }
        out
    }

    /// Per-row ∂output/∂c_j (scaled by the seed); outer index is the constant.
    pub fn constant_jacobian(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.program.consts.len()];
        for (i, instr) in self.program.instrs.iter().enumerate() {
            if let Instr::Const(k) = instr {
                out[*k] = self.adjoints[i].clone();
            }
        }
        out
    }

    /// Per-row ∂output/∂input, one vector per entry of [`Program::inputs`].
    pub fn input_gradients(&self) -> Vec<Vec<f64>> {
        let rows = self.adjoints.first().map_or(0, Vec::len);
        let mut out = vec![vec![0.0; rows]; self.program.inputs.len()];
        for (i, instr) in self.program.instrs.iter().enumerate() {
            if let Instr::Input(k) = instr {
                for (o, a) in out[*k].iter_mut().zip(&self.adjoints[i]) {
                    *o += a;
                }
            }
        }
        out
    }
}

impl Program {
    pub fn compile(expr: &Expression) -> Self {
        let mut p = Program { instrs: Vec::new(), consts: Vec::new(), inputs: Vec::new() };
        let mut input_slots = HashMap::new();
        p.emit(expr.root(), &mut input_slots);
        p
    }

    fn emit(&mut self, node: &Node, slots: &mut HashMap<VarRef, usize>) -> usize {
        let instr = match node {
            Node::Const(c) => {
                self.consts.push(*c);
                Instr::Const(self.consts.len() - 1)
            }
            Node::Var(v) => {
                let next = self.inputs.len();
                let slot = *slots.entry(v.clone()).or_insert_with(|| {
                    self.inputs.push(v.clone());
                    next
                });
                Instr::Input(slot)
            }
            Node::Unary(op, c) => {
                let a = self.emit(c, slots);
                Instr::Unary(*op, a)
            }
            Node::Binary(op, l, r) => {
                let a = self.emit(l, slots);
                let b = self.emit(r, slots);
                Instr::Binary(*op, a, b)
            }
        };
        self.instrs.push(instr);
        self.instrs.len() - 1
    }

    /// Distinct inputs in order of first appearance.
    pub fn inputs(&self) -> &[VarRef] {
        &self.inputs
    }

    pub fn constants(&self) -> &[f64] {
        &self.consts
    }

    pub fn set_constants(&mut self, values: &[f64]) -> Result<(), ExprError> {
        if values.len() != self.consts.len() {
            return Err(ExprError::ConstantCount { expected: self.consts.len(), got: values.len() });
        }
        self.consts.copy_from_slice(values);
        Ok(())
    }

    /// Resolves every input against `src`.
    pub fn bind<'a, S: ColumnSource + ?Sized>(&self, src: &'a S) -> Result<Vec<&'a [f64]>, ExprError> {
        let rows = src.n_rows();
        self.inputs
            .iter()
            .map(|v| {
                let col = src.column(v).ok_or_else(|| ExprError::MissingInput(v.clone()))?;
                if col.len() != rows {
                    return Err(ExprError::ColumnLength { expected: rows, got: col.len() });
                }
                Ok(col)
            })
            .collect()
    }

    pub fn forward<'a, S: ColumnSource + ?Sized>(&self, src: &'a S) -> Result<Forward<'a>, ExprError> {
        let cols = self.bind(src)?;
        Ok(self.run(cols, src.n_rows()))
    }

    /// Evaluates on pre-bound columns (aligned with [`inputs`](Self::inputs)).
    pub fn forward_slices<'a>(&self, cols: &[&'a [f64]]) -> Result<Forward<'a>, ExprError> {
        if cols.len() != self.inputs.len() {
            return Err(ExprError::ConstantCount { expected: self.inputs.len(), got: cols.len() });
        }
        let rows = cols.first().map_or(1, |c| c.len());
        for c in cols {
            if c.len() != rows {
                return Err(ExprError::ColumnLength { expected: rows, got: c.len() });
            }
        }
        Ok(self.run(cols.to_vec(), rows))
    }

    pub fn evaluate<S: ColumnSource + ?Sized>(&self, src: &S) -> Result<Vec<f64>, ExprError> {
        Ok(self.forward(src)?.into_output())
    }

    pub(crate) fn window_columns(&self, window: &FeatureWindow) -> Result<Vec<[f64; 1]>, ExprError> {
        self.inputs
            .iter()
            .map(|v| window.get(v).map(|x| [x]).ok_or_else(|| ExprError::MissingInput(v.clone())))
            .collect()
    }

    fn run<'a>(&self, cols: Vec<&'a [f64]>, rows: usize) -> Forward<'a> {
        let mut vals: Vec<Val> = Vec::with_capacity(self.instrs.len());
        for instr in &self.instrs {
            let v = match *instr {
                Instr::Const(k) => Val::Scalar(self.consts[k]),
                Instr::Input(k) => Val::Input(k),
                Instr::Unary(op, a) => match &vals[a] {
                    Val::Scalar(x) => Val::Scalar(op.apply_unary(*x)),
                    Val::Input(k) => Val::Vector(cols[*k].iter().map(|&x| op.apply_unary(x)).collect()),
                    Val::Vector(xs) => Val::Vector(xs.iter().map(|&x| op.apply_unary(x)).collect()),
                },
                Instr::Binary(op, a, b) => binary_vals(op, &vals[a], &vals[b], &cols),
            };
            vals.push(v);
        }
        let output = match vals.last() {
            Some(Val::Scalar(c)) => vec![*c; rows],
            Some(Val::Input(k)) => cols[*k].to_vec(),
            Some(Val::Vector(v)) => v.clone(),
            None => vec![f64::NAN; rows],
        };
        Forward { vals, cols, rows, output }
    }

    /// Reverse pass seeded with per-row output adjoints. A seed of length 1
    /// is broadcast to every row.
    pub fn backward<'p>(&'p self, fwd: &Forward<'_>, seed: &[f64]) -> Backward<'p> {
        let rows = fwd.rows;
        let n = self.instrs.len();
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); n];
        adj[n - 1] = if seed.len() == rows {
            seed.to_vec()
        } else {
            vec![seed[0]; rows]
        };
        for i in (0..n).rev() {
            if adj[i].is_empty() {
                adj[i] = vec![0.0; rows];
                continue;
            }
            match self.instrs[i] {
                Instr::Const(_) | Instr::Input(_) => {}
                Instr::Unary(op, a) => {
                    let mut da = std::mem::take(&mut adj[a]);
                    if da.is_empty() {
                        da = vec![0.0; rows];
                    }
                    for r in 0..rows {
                        let g = adj[i][r];
                        if g != 0.0 {
                            let x = fwd.at(a, r);
                            let y = fwd.at(i, r);
                            da[r] += g * op.unary_derivative(x, y);
                        }
                    }
                    adj[a] = da;
                }
                Instr::Binary(op, a, b) => {
                    let mut da = std::mem::take(&mut adj[a]);
                    if da.is_empty() {
                        da = vec![0.0; rows];
                    }
                    let mut db = if a == b { Vec::new() } else { std::mem::take(&mut adj[b]) };
                    if db.is_empty() {
                        db = vec![0.0; rows];
                    }
                    for r in 0..rows {
                        let g = adj[i][r];
                        if g != 0.0 {
                            let x = fwd.at(a, r);
                            let y = fwd.at(b, r);
                            let (dx, dy) = op.binary_derivative(x, y, fwd.at(i, r));
                            da[r] += g * dx;
                            db[r] += g * dy;
                        }
                    }
                    if a == b {
                        for (x, y) in da.iter_mut().zip(&db) {
                            *x += y;
                        }
                        adj[a] = da;
                    } else {
                        adj[a] = da;
                        adj[b] = db;
                    }
                }
            }
        }
        Backward { program: self, adjoints: adj }
    }
}

fn binary_vals(op: Operator, a: &Val, b: &Val, cols: &[&[f64]]) -> Val {
    fn slice<'v>(v: &'v Val, cols: &[&'v [f64]]) -> Option<&'v [f64]> {
        match v {
            Val::Input(k) => Some(cols[*k]),
            Val::Vector(xs) => Some(xs.as_slice()),
            Val::Scalar(_) => None,
        }
    }
    match (a, b) {
        (Val::Scalar(x), Val::Scalar(y)) => Val::Scalar(op.apply_binary(*x, *y)),
        (Val::Scalar(x), _) => {
            let ys = slice(b, cols).expect("non-scalar");
            let x = *x;
            Val::Vector(match op {
                Operator::Add => ys.iter().map(|&y| x + y).collect(),
                Operator::Mul => ys.iter().map(|&y| x * y).collect(),
                _ => ys.iter().map(|&y| op.apply_binary(x, y)).collect(),
            })
        }
        (_, Val::Scalar(y)) => {
            let xs = slice(a, cols).expect("non-scalar");
            let y = *y;
            Val::Vector(match op {
                Operator::Add => xs.iter().map(|&x| x + y).collect(),
                Operator::Mul => xs.iter().map(|&x| x * y).collect(),
                _ => xs.iter().map(|&x| op.apply_binary(x, y)).collect(),
            })
        }
        _ => {
            let xs = slice(a, cols).expect("non-scalar");
            let ys = slice(b, cols).expect("non-scalar");
            Val::Vector(match op {
                Operator::Add => xs.iter().zip(ys).map(|(x, y)| x + y).collect(),
                Operator::Sub => xs.iter().zip(ys).map(|(x, y)| x - y).collect(),
                Operator::Mul => xs.iter().zip(ys).map(|(x, y)| x * y).collect(),
                _ => xs.iter().zip(ys).map(|(&x, &y)| op.apply_binary(x, y)).collect(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols(pairs: &[(&str, usize, Vec<f64>)]) -> Columns {
        let rows = pairs[0].2.len();
        let mut c = Columns::new(rows);
        for (s, l, v) in pairs {
            c.insert(VarRef::new(*s, *l), v.clone()).unwrap();
        }
        c
    }

    #[test]
    fn batch_matches_scalar_evaluation() {
        let e = Expression::parse("tanh(1.5*g[0])+g[1]/sqrt_s(g[0]-3)", 20).unwrap();
        let g0 = vec![0.5, -1.0, 2.0, 7.0];
        let g1 = vec![1.0, 0.25, -3.0, 0.0];
        let c = cols(&[("g", 0, g0.clone()), ("g", 1, g1.clone())]);
        let out = e.compile().evaluate(&c).unwrap();
        for r in 0..4 {
            let mut w = FeatureWindow::new(20);
            w.set("g", vec![g0[r], g1[r]]);
            assert_eq!(out[r].to_bits(), e.evaluate(&w).unwrap().to_bits());
        }
    }

    #[test]
    fn constant_expression_broadcasts() {
        let e = Expression::parse("2*3", 20).unwrap();
        let c = cols(&[("g", 0, vec![1.0, 2.0, 3.0])]);
        assert_eq!(e.compile().evaluate(&c).unwrap(), vec![6.0; 3]);
    }

    #[test]
    fn repeated_operand_gradient() {
        // g*g: the same input feeds both operands of one instruction.
        let e = Expression::parse("g[0]*g[0]+2*g[0]", 20).unwrap();
        let c = cols(&[("g", 0, vec![3.0, -1.0])]);
        let p = e.compile();
        let fwd = p.forward(&c).unwrap();
        let g = p.backward(&fwd, &[1.0]).input_gradients();
        assert_eq!(g[0], vec![8.0, 0.0]);
    }

    #[test]
    fn jacobian_rows_sum_to_gradient() {
        let e = Expression::parse("1.5*tanh(0.5*g[0])+0.25*g[1]", 20).unwrap();
        let c = cols(&[("g", 0, vec![0.3, -2.0, 1.0]), ("g", 1, vec![1.0, 2.0, 3.0])]);
        let p = e.compile();
        let fwd = p.forward(&c).unwrap();
        let b = p.backward(&fwd, &[1.0]);
        let jac = b.constant_jacobian();
        let sum: Vec<f64> = jac.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(sum, b.constant_gradients());
        assert_eq!(jac[2], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn missing_column_is_reported() {
        let e = Expression::parse("ghat[1]", 20).unwrap();
        let c = cols(&[("g", 0, vec![1.0])]);
        assert_eq!(
            e.compile().evaluate(&c).unwrap_err(),
            ExprError::MissingInput(VarRef::new("ghat", 1))
        );
    }
}
