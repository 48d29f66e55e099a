//! Symbolic update rules over lagged optimization features.
//!
//! An [`Expression`] is an immutable operator tree whose leaves are constants
//! or lagged feature references such as `mhat[3]` (the `mhat` stream three
//! steps in the past). Expressions can be evaluated on a single
//! [`FeatureWindow`] or, through a compiled [`Program`], on whole columns of
//! records at once; the compiled form also provides reverse-mode gradients
//! with respect to constants and inputs.

mod ops;
mod parse;
mod program;
mod simplify;
mod window;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ops::{pow_s, sign, Operator};
pub use program::{Backward, ColumnSource, Columns, Forward, Program};
pub use window::FeatureWindow;

/// FIR horizon used when nothing else is specified.
pub const DEFAULT_HORIZON: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown operator `{name}` at byte {pos}")]
    UnknownOperator { name: String, pos: usize },
    #[error("lag {lag} of stream `{stream}` is outside the horizon {horizon}")]
    LagOutOfRange { stream: String, lag: usize, horizon: usize },
    #[error("operator `{op}` expects {expected} operand(s), got {got}")]
    Arity { op: Operator, expected: usize, got: usize },
    #[error("input `{0}` is not available")]
    MissingInput(VarRef),
    #[error("expression output is not finite")]
    NonFinite,
    #[error("expected {expected} constants, got {got}")]
    ConstantCount { expected: usize, got: usize },
    #[error("column length mismatch: expected {expected}, got {got}")]
    ColumnLength { expected: usize, got: usize },
}

/// A lagged reference into a named feature stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarRef {
    pub stream: String,
    pub lag: usize,
}

impl VarRef {
    pub fn new(stream: impl Into<String>, lag: usize) -> Self {
        Self { stream: stream.into(), lag }
    }
}

impl fmt::Display for VarRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.stream, self.lag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(VarRef),
    Unary(Operator, Box<Node>),
    Binary(Operator, Box<Node>, Box<Node>),
}

impl Node {
    pub fn constant(value: f64) -> Node {
        Node::Const(value)
    }

    pub fn var(stream: impl Into<String>, lag: usize) -> Node {
        Node::Var(VarRef::new(stream, lag))
    }

    pub fn unary(op: Operator, child: Node) -> Node {
        Node::Unary(op, Box::new(child))
    }

    pub fn binary(op: Operator, left: Node, right: Node) -> Node {
        Node::Binary(op, Box::new(left), Box::new(right))
    }

    pub fn add(left: Node, right: Node) -> Node {
        Node::binary(Operator::Add, left, right)
    }

    pub fn sub(left: Node, right: Node) -> Node {
        Node::binary(Operator::Sub, left, right)
    }

    pub fn mul(left: Node, right: Node) -> Node {
        Node::binary(Operator::Mul, left, right)
    }

    pub fn div(left: Node, right: Node) -> Node {
        Node::binary(Operator::Div, left, right)
    }

    pub fn node_count(&self) -> usize {
        match self {
            Node::Const(_) | Node::Var(_) => 1,
            Node::Unary(_, c) => 1 + c.node_count(),
            Node::Binary(_, l, r) => 1 + l.node_count() + r.node_count(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Const(_) | Node::Var(_) => 1,
            Node::Unary(_, c) => 1 + c.depth(),
            Node::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    pub fn is_const(&self) -> bool {
        matches!(self, Node::Const(_))
    }

    /// Pre-order traversal.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Node)) {
        f(self);
        match self {
            Node::Const(_) | Node::Var(_) => {}
            Node::Unary(_, c) => c.visit(f),
            Node::Binary(_, l, r) => {
                l.visit(f);
                r.visit(f);
            }
        }
    }

    /// Pre-order traversal with mutable access.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Node)) {
        f(self);
        match self {
            Node::Const(_) | Node::Var(_) => {}
            Node::Unary(_, c) => c.visit_mut(f),
            Node::Binary(_, l, r) => {
                l.visit_mut(f);
                r.visit_mut(f);
            }
        }
    }

    fn check(&self, horizon: usize) -> Result<(), ExprError> {
        match self {
            Node::Const(_) => Ok(()),
            Node::Var(v) => {
                if v.lag >= horizon {
                    Err(ExprError::LagOutOfRange {
                        stream: v.stream.clone(),
                        lag: v.lag,
                        horizon,
                    })
                } else {
                    Ok(())
                }
            }
            Node::Unary(op, c) => {
                if op.arity() != 1 {
                    return Err(ExprError::Arity { op: *op, expected: op.arity(), got: 1 });
                }
                c.check(horizon)
            }
            Node::Binary(op, l, r) => {
                if op.arity() != 2 {
                    return Err(ExprError::Arity { op: *op, expected: op.arity(), got: 2 });
                }
                l.check(horizon)?;
                r.check(horizon)
            }
        }
    }
}

/// Additive weights on top of the node count.
///
/// The default (both zero) makes complexity equal to the number of nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComplexityWeights {
    /// Added once per distinct operator kind used.
    pub operator_diversity: usize,
    /// Added once per distinct (stream, lag) input used.
    pub distinct_variables: usize,
}

/// A well-formed expression tree with a fixed FIR horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Node,
    horizon: usize,
}

impl Expression {
    pub fn new(root: Node, horizon: usize) -> Result<Self, ExprError> {
        root.check(horizon)?;
        Ok(Self { root, horizon })
    }

    pub fn constant(value: f64, horizon: usize) -> Self {
        Self { root: Node::Const(value), horizon }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn into_root(self) -> Node {
        self.root
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Same tree with a different horizon; fails if a lag no longer fits.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self, ExprError> {
        Self::new(self.root.clone(), horizon)
    }

    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Complexity under the default convention (node count).
    pub fn complexity(&self) -> usize {
        self.node_count()
    }

    pub fn complexity_with(&self, weights: &ComplexityWeights) -> usize {
        let mut score = self.node_count();
        if weights.operator_diversity > 0 {
            score += weights.operator_diversity * self.operators().len();
        }
        if weights.distinct_variables > 0 {
            score += weights.distinct_variables * self.variables().len();
        }
        score
    }

    /// Constant leaves in pre-order (left to right).
    pub fn constants(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.root.visit(&mut |n| {
            if let Node::Const(c) = n {
                out.push(*c);
            }
        });
        out
    }

    pub fn n_constants(&self) -> usize {
        let mut n = 0;
        self.root.visit(&mut |node| {
            if node.is_const() {
                n += 1;
            }
        });
        n
    }

    /// Replaces the constant leaves, in the order returned by [`constants`](Self::constants).
    pub fn with_constants(&self, values: &[f64]) -> Result<Self, ExprError> {
        let expected = self.n_constants();
        if values.len() != expected {
            return Err(ExprError::ConstantCount { expected, got: values.len() });
        }
        let mut root = self.root.clone();
        let mut it = values.iter();
        root.visit_mut(&mut |n| {
            if let Node::Const(c) = n {
                *c = *it.next().expect("counted above");
            }
        });
        Ok(Self { root, horizon: self.horizon })
    }

    pub fn variables(&self) -> BTreeSet<VarRef> {
        let mut out = BTreeSet::new();
        self.root.visit(&mut |n| {
            if let Node::Var(v) = n {
                out.insert(v.clone());
            }
        });
        out
    }

    pub fn streams(&self) -> BTreeSet<String> {
        self.variables().into_iter().map(|v| v.stream).collect()
    }

    pub fn operators(&self) -> BTreeSet<Operator> {
        let mut out = BTreeSet::new();
        self.root.visit(&mut |n| match n {
            Node::Unary(op, _) | Node::Binary(op, _, _) => {
                out.insert(*op);
            }
            _ => {}
        });
        out
    }

    pub fn compile(&self) -> Program {
        Program::compile(self)
    }

    /// Evaluates on a single window. Missing inputs are a structural error;
    /// a non-finite result is returned as is.
    pub fn evaluate(&self, window: &FeatureWindow) -> Result<f64, ExprError> {
        eval_node(&self.root, window)
    }

    /// ∂output/∂constant for every constant leaf, in pre-order.
    pub fn grad_constants(&self, window: &FeatureWindow) -> Result<Vec<f64>, ExprError> {
        let program = self.compile();
        let owned = program.window_columns(window)?;
        let columns: Vec<&[f64]> = owned.iter().map(|c| c.as_slice()).collect();
        let fwd = program.forward_slices(&columns)?;
        if !fwd.output()[0].is_finite() {
            return Err(ExprError::NonFinite);
        }
        let bwd = program.backward(&fwd, &[1.0]);
        Ok(bwd.constant_gradients())
    }

    /// ∂output/∂input for every referenced (stream, lag).
    pub fn grad_inputs(&self, window: &FeatureWindow) -> Result<BTreeMap<VarRef, f64>, ExprError> {
        let program = self.compile();
        let owned = program.window_columns(window)?;
        let columns: Vec<&[f64]> = owned.iter().map(|c| c.as_slice()).collect();
        let fwd = program.forward_slices(&columns)?;
        if !fwd.output()[0].is_finite() {
            return Err(ExprError::NonFinite);
        }
        let bwd = program.backward(&fwd, &[1.0]);
        let grads = bwd.input_gradients();
        Ok(program
            .inputs()
            .iter()
            .cloned()
            .zip(grads.into_iter().map(|g| g[0]))
            .collect())
    }

    /// Light canonicalization: constant folding and collection of constant
    /// factors in products. Never changes the represented function beyond
    /// floating-point rounding.
    pub fn simplified(&self) -> Self {
        Self { root: simplify::simplify(&self.root), horizon: self.horizon }
    }

    /// Replaces every variable reference `v` with `f(v)`.
    pub fn map_vars(&self, f: &mut impl FnMut(&VarRef) -> Node) -> Result<Self, ExprError> {
        fn go(n: &Node, f: &mut impl FnMut(&VarRef) -> Node) -> Node {
            match n {
                Node::Const(c) => Node::Const(*c),
                Node::Var(v) => f(v),
                Node::Unary(op, c) => Node::unary(*op, go(c, f)),
                Node::Binary(op, l, r) => Node::binary(*op, go(l, f), go(r, f)),
            }
        }
        Self::new(go(&self.root, f), self.horizon)
    }

    pub fn parse(text: &str, horizon: usize) -> Result<Self, ExprError> {
        let root = parse::parse_infix(text)?;
        Self::new(root, horizon)
    }

    pub fn parse_sexpr(text: &str, horizon: usize) -> Result<Self, ExprError> {
        let root = parse::parse_sexpr(text)?;
        Self::new(root, horizon)
    }

    /// Canonical infix text.
    pub fn to_infix(&self) -> String {
        parse::render_infix(&self.root)
    }

    pub fn to_sexpr(&self) -> String {
        parse::render_sexpr(&self.root)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_infix())
    }
}

fn eval_node(node: &Node, window: &FeatureWindow) -> Result<f64, ExprError> {
    Ok(match node {
        Node::Const(c) => *c,
        Node::Var(v) => window.get(v).ok_or_else(|| ExprError::MissingInput(v.clone()))?,
        Node::Unary(op, c) => op.apply_unary(eval_node(c, window)?),
        Node::Binary(op, l, r) => op.apply_binary(eval_node(l, window)?, eval_node(r, window)?),
    })
}

/// Serialized form used in JSON artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializedExpression {
    pub infix: String,
    pub sexpr: String,
    pub horizon: usize,
}

impl From<&Expression> for SerializedExpression {
    fn from(e: &Expression) -> Self {
        Self { infix: e.to_infix(), sexpr: e.to_sexpr(), horizon: e.horizon() }
    }
}

impl TryFrom<&SerializedExpression> for Expression {
    type Error = ExprError;

    fn try_from(s: &SerializedExpression) -> Result<Self, ExprError> {
        Expression::parse_sexpr(&s.sexpr, s.horizon)
    }
}

impl Serialize for Expression {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        SerializedExpression::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Expression {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = SerializedExpression::deserialize(deserializer)?;
        Expression::try_from(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_g(values: &[f64]) -> FeatureWindow {
        let mut w = FeatureWindow::new(DEFAULT_HORIZON);
        w.set("g", values.to_vec());
        w
    }

    #[test]
    fn complexity_counts_nodes() {
        assert_eq!(Expression::parse("0.5", 20).unwrap().complexity(), 1);
        assert_eq!(Expression::parse("-0.01*g[0]", 20).unwrap().complexity(), 3);
        let e = Expression::parse("tanh(g[0])+g[0]*g[1]", 20).unwrap();
        assert_eq!(e.complexity(), 6);
        let w = ComplexityWeights { operator_diversity: 1, distinct_variables: 2 };
        // ops {tanh, add, mul}, vars {g[0], g[1]}
        assert_eq!(e.complexity_with(&w), 6 + 3 + 4);
    }

    #[test]
    fn constants_are_preorder_and_replaceable() {
        let e = Expression::parse("1.5*g[0]+tanh(2*g[1])-3", 20).unwrap();
        assert_eq!(e.constants(), vec![1.5, 2.0, 3.0]);
        let e2 = e.with_constants(&[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(e2.to_infix(), "4*g[0]+tanh(5*g[1])-6");
        assert!(matches!(
            e.with_constants(&[1.0]),
            Err(ExprError::ConstantCount { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn missing_input_is_structural() {
        let e = Expression::parse("mhat[2]", 20).unwrap();
        let err = e.evaluate(&window_g(&[1.0])).unwrap_err();
        assert_eq!(err, ExprError::MissingInput(VarRef::new("mhat", 2)));
    }

    #[test]
    fn non_finite_propagates() {
        let e = Expression::parse("exp(1000*g[0])", 20).unwrap();
        assert!(e.evaluate(&window_g(&[1.0])).unwrap().is_infinite());
        let e = Expression::parse("g[0]/g[1]", 20).unwrap();
        assert!(e.evaluate(&window_g(&[0.0, 0.0])).unwrap().is_nan());
    }

    #[test]
    fn linearity_gradients() {
        let e = Expression::parse("2.5*g[0]", 20).unwrap();
        assert_eq!(e.grad_constants(&window_g(&[2.0])).unwrap(), vec![2.0]);
        let e = Expression::parse("tanh(0*g[0])", 20).unwrap();
        assert_eq!(e.grad_constants(&window_g(&[5.0])).unwrap(), vec![5.0]);
        let e = Expression::parse("sq(g[0])", 20).unwrap();
        let g = e.grad_inputs(&window_g(&[3.0])).unwrap();
        assert_eq!(g[&VarRef::new("g", 0)], 6.0);
    }

    #[test]
    fn gradient_of_non_finite_output_is_an_error() {
        let e = Expression::parse("1/g[0]", 20).unwrap();
        assert_eq!(e.grad_constants(&window_g(&[0.0])).unwrap_err(), ExprError::NonFinite);
    }

    #[test]
    fn linear_lag_sum_input_gradient_is_coefficients() {
        let coeffs: Vec<f64> = (0..20).map(|i| 0.3 - 0.05 * i as f64).collect();
        let text = coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c}*g[{i}]"))
            .collect::<Vec<_>>()
            .join("+");
        let e = Expression::parse(&text, 20).unwrap();
        let values: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let g = e.grad_inputs(&window_g(&values)).unwrap();
        for (i, c) in coeffs.iter().enumerate() {
            assert_eq!(g[&VarRef::new("g", i)], *c);
        }
    }

    #[test]
    fn lag_beyond_horizon_rejected() {
        let err = Expression::parse("g[20]", 20).unwrap_err();
        assert!(matches!(err, ExprError::LagOutOfRange { lag: 20, horizon: 20, .. }));
        assert!(Expression::parse("g[4]", 5).is_ok());
    }

    #[test]
    fn serde_round_trip() {
        let e = Expression::parse("-0.01*g[0]+asinh(mhat[3])", 20).unwrap();
        let json = serde_json::to_string(&e).unwrap();
        let back: Expression = serde_json::from_str(&json).unwrap();
        assert_eq!(back, e);
    }
}
