//! Random tree construction and tree-edit mutations.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::expr::{Node, Operator, VarRef};

/// Relative frequencies of the mutation kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MutationWeights {
    pub replace_operator: f64,
    pub perturb_constant: f64,
    pub insert_node: f64,
    pub replace_subtree: f64,
    pub delete_node: f64,
    pub swap_subtrees: f64,
    pub crossover: f64,
}

impl Default for MutationWeights {
    fn default() -> Self {
        Self {
            replace_operator: 1.0,
            perturb_constant: 2.0,
            insert_node: 2.5,
            replace_subtree: 1.0,
            delete_node: 1.0,
            swap_subtrees: 0.5,
            crossover: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationKind {
    ReplaceOperator,
    PerturbConstant,
    InsertNode,
    ReplaceSubtree,
    DeleteNode,
    SwapSubtrees,
    Crossover,
}

impl MutationWeights {
    pub fn pick(&self, rng: &mut impl Rng) -> MutationKind {
        let w = [
            self.replace_operator,
            self.perturb_constant,
            self.insert_node,
            self.replace_subtree,
            self.delete_node,
            self.swap_subtrees,
            self.crossover,
        ];
        let total: f64 = w.iter().map(|v| v.max(0.0)).sum();
        let mut u = rng.random::<f64>() * total;
        let kinds = [
            MutationKind::ReplaceOperator,
            MutationKind::PerturbConstant,
            MutationKind::InsertNode,
            MutationKind::ReplaceSubtree,
            MutationKind::DeleteNode,
            MutationKind::SwapSubtrees,
            MutationKind::Crossover,
        ];
        for (k, wi) in kinds.iter().zip(w) {
            u -= wi.max(0.0);
            if u < 0.0 {
                return *k;
            }
        }
        MutationKind::PerturbConstant
    }
}

/// What a mutation may draw from.
#[derive(Debug, Clone)]
pub struct Grammar {
    pub unary: Vec<Operator>,
    pub binary: Vec<Operator>,
    pub vars: Vec<VarRef>,
}

impl Grammar {
    pub fn new(ops: &[Operator], vars: Vec<VarRef>) -> Self {
        Self {
            unary: ops.iter().copied().filter(|o| o.arity() == 1).collect(),
            binary: ops.iter().copied().filter(|o| o.arity() == 2).collect(),
            vars,
        }
    }

    pub fn leaf(&self, rng: &mut impl Rng) -> Node {
        if !self.vars.is_empty() && rng.random::<f64>() < 0.6 {
            Node::Var(self.vars[rng.random_range(0..self.vars.len())].clone())
        } else {
            Node::Const(rng.sample(StandardNormal))
        }
    }

    /// `c * v` for a random variable `v`.
    pub fn scaled_var(&self, rng: &mut impl Rng) -> Node {
        if self.vars.is_empty() {
            return Node::Const(rng.sample(StandardNormal));
        }
        let v = self.vars[rng.random_range(0..self.vars.len())].clone();
        Node::mul(Node::Const(rng.sample(StandardNormal)), Node::Var(v))
    }

    /// Random tree of depth at most `depth` (a leaf has depth 1).
    pub fn random_tree(&self, depth: usize, rng: &mut impl Rng) -> Node {
        if depth <= 1 || rng.random::<f64>() < 0.3 {
            return self.leaf(rng);
        }
        let use_unary = !self.unary.is_empty() && (self.binary.is_empty() || rng.random::<f64>() < 0.35);
        if use_unary {
            let op = self.unary[rng.random_range(0..self.unary.len())];
            Node::unary(op, self.random_tree(depth - 1, rng))
        } else if !self.binary.is_empty() {
            let op = self.binary[rng.random_range(0..self.binary.len())];
            Node::binary(op, self.random_tree(depth - 1, rng), self.random_tree(depth - 1, rng))
        } else {
            self.leaf(rng)
        }
    }
}

pub(crate) fn node_at(root: &Node, index: usize) -> &Node {
    fn go<'a>(n: &'a Node, i: &mut usize) -> Option<&'a Node> {
        if *i == 0 {
            return Some(n);
        }
        *i -= 1;
        match n {
            Node::Const(_) | Node::Var(_) => None,
            Node::Unary(_, c) => go(c, i),
            Node::Binary(_, l, r) => go(l, i).or_else(|| go(r, i)),
        }
    }
    let mut i = index;
    go(root, &mut i).expect("index within tree")
}

pub(crate) fn node_at_mut(root: &mut Node, index: usize) -> &mut Node {
    fn go<'a>(n: &'a mut Node, i: &mut usize) -> Option<&'a mut Node> {
        if *i == 0 {
            return Some(n);
        }
        *i -= 1;
        match n {
            Node::Const(_) | Node::Var(_) => None,
            Node::Unary(_, c) => go(c, i),
            Node::Binary(_, l, r) => match go(l, i) {
                Some(found) => Some(found),
                None => go(r, i),
            },
        }
    }
    let mut i = index;
    go(root, &mut i).expect("index within tree")
}

fn indices_where(root: &Node, pred: impl Fn(&Node) -> bool) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    root.visit(&mut |n| {
        if pred(n) {
            out.push(i);
        }
        i += 1;
    });
    out
}

fn pick<T: Copy>(xs: &[T], rng: &mut impl Rng) -> Option<T> {
    if xs.is_empty() {
        None
    } else {
        Some(xs[rng.random_range(0..xs.len())])
    }
}

/// Multiplies one constant by a log-normal factor; zero constants are redrawn.
pub fn perturb_constant(root: &Node, rng: &mut impl Rng) -> Option<Node> {
    let idx = pick(&indices_where(root, Node::is_const), rng)?;
    let mut out = root.clone();
    if let Node::Const(c) = node_at_mut(&mut out, idx) {
        if *c == 0.0 {
            *c = rng.sample(StandardNormal);
        } else {
            let jitter = Normal::new(0.0, 0.5).expect("finite");
            let f: f64 = jitter.sample(rng);
            *c *= f.exp();
        }
    }
    Some(out)
}

fn replace_operator(root: &Node, g: &Grammar, rng: &mut impl Rng) -> Option<Node> {
    let idx = pick(&indices_where(root, |n| matches!(n, Node::Unary(..) | Node::Binary(..))), rng)?;
    let mut out = root.clone();
    match node_at_mut(&mut out, idx) {
        Node::Unary(op, _) => {
            let alts: Vec<Operator> = g.unary.iter().copied().filter(|o| o != op).collect();
            *op = pick(&alts, rng)?;
        }
        Node::Binary(op, _, _) => {
            let alts: Vec<Operator> = g.binary.iter().copied().filter(|o| o != op).collect();
            *op = pick(&alts, rng)?;
        }
        _ => return None,
    }
    Some(out)
}

/// Wraps a random node in a unary operator, or combines it with a new
/// leaf through a binary operator (half of those are `+ c*v` terms).
fn insert_node(root: &Node, g: &Grammar, rng: &mut impl Rng) -> Option<Node> {
    let idx = rng.random_range(0..root.node_count());
    let mut out = root.clone();
    let target = node_at_mut(&mut out, idx);
    let old = target.clone();
    let unary = !g.unary.is_empty() && (g.binary.is_empty() || rng.random::<f64>() < 0.4);
    *target = if unary {
        Node::unary(pick(&g.unary, rng)?, old)
    } else if g.binary.contains(&Operator::Add) && rng.random::<f64>() < 0.5 {
        Node::add(old, g.scaled_var(rng))
    } else {
        let op = pick(&g.binary, rng)?;
        let leaf = g.leaf(rng);
        if rng.random::<bool>() {
            Node::binary(op, old, leaf)
        } else {
            Node::binary(op, leaf, old)
        }
    };
    Some(out)
}

fn replace_subtree(root: &Node, g: &Grammar, rng: &mut impl Rng) -> Option<Node> {
    let idx = rng.random_range(0..root.node_count());
    let mut out = root.clone();
    *node_at_mut(&mut out, idx) = g.random_tree(3, rng);
    Some(out)
}

fn delete_node(root: &Node, rng: &mut impl Rng) -> Option<Node> {
    let idx = pick(&indices_where(root, |n| matches!(n, Node::Unary(..) | Node::Binary(..))), rng)?;
    let mut out = root.clone();
    let target = node_at_mut(&mut out, idx);
    let child = match target {
        Node::Unary(_, c) => (**c).clone(),
        Node::Binary(_, l, r) => {
            if rng.random::<bool>() {
                (**l).clone()
            } else {
                (**r).clone()
            }
        }
        _ => return None,
    };
    *target = child;
    Some(out)
}

/// Pre-order index ranges [start, end) of every subtree.
fn spans(root: &Node) -> Vec<(usize, usize)> {
    fn go(n: &Node, next: &mut usize, out: &mut Vec<(usize, usize)>) {
        let me = *next;
        out.push((me, 0));
        *next += 1;
        match n {
            Node::Const(_) | Node::Var(_) => {}
            Node::Unary(_, c) => go(c, next, out),
            Node::Binary(_, l, r) => {
                go(l, next, out);
                go(r, next, out);
            }
        }
        out[me].1 = *next;
    }
    let mut out = Vec::new();
    let mut next = 0;
    go(root, &mut next, &mut out);
    out
}

fn swap_subtrees(root: &Node, rng: &mut impl Rng) -> Option<Node> {
    let sp = spans(root);
    let mut pairs = Vec::new();
    for (i, &(_, end_i)) in sp.iter().enumerate() {
        for (j, _) in sp.iter().enumerate().skip(end_i.max(i + 1)) {
            pairs.push((i, j));
        }
    }
    let (i, j) = pick(&pairs, rng)?;
    let a = node_at(root, i).clone();
    let b = node_at(root, j).clone();
    let mut out = root.clone();
    // j lies after i's subtree, so replacing it first leaves index i valid.
    *node_at_mut(&mut out, j) = a;
    *node_at_mut(&mut out, i) = b;
    Some(out)
}

/// Replaces a random subtree of `root` with a random subtree of `donor`.
pub fn crossover(root: &Node, donor: &Node, rng: &mut impl Rng) -> Node {
    let i = rng.random_range(0..root.node_count());
    let j = rng.random_range(0..donor.node_count());
    let mut out = root.clone();
    *node_at_mut(&mut out, i) = node_at(donor, j).clone();
    out
}

pub(crate) fn apply(kind: MutationKind, root: &Node, donor: &Node, g: &Grammar, rng: &mut impl Rng) -> Option<Node> {
    match kind {
        MutationKind::ReplaceOperator => replace_operator(root, g, rng),
        MutationKind::PerturbConstant => perturb_constant(root, rng),
        MutationKind::InsertNode => insert_node(root, g, rng),
        MutationKind::ReplaceSubtree => replace_subtree(root, g, rng),
        MutationKind::DeleteNode => delete_node(root, rng),
        MutationKind::SwapSubtrees => swap_subtrees(root, rng),
        MutationKind::Crossover => Some(crossover(root, donor, rng)),
    }
}
