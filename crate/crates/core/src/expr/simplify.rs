//! Algebraic clean-up used after rescaling and before display.

use super::{Node, Operator};

pub(crate) fn simplify(node: &Node) -> Node {
    let mut cur = pass(node);
    for _ in 0..4 {
        let next = pass(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

fn pass(node: &Node) -> Node {
    match node {
        Node::Const(_) | Node::Var(_) => node.clone(),
        Node::Unary(op, c) => {
            let c = pass(c);
            if let Node::Const(x) = c {
                let y = op.apply_unary(x);
                if y.is_finite() {
                    return Node::Const(y);
                }
            }
            Node::unary(*op, c)
        }
        Node::Binary(op, l, r) => {
            let l = pass(l);
            let r = pass(r);
            if let (Node::Const(a), Node::Const(b)) = (&l, &r) {
                let y = op.apply_binary(*a, *b);
                if y.is_finite() {
                    return Node::Const(y);
                }
            }
            match op {
                Operator::Mul | Operator::Div => product(Node::binary(*op, l, r)),
                Operator::Add => match (&l, &r) {
                    (Node::Const(z), _) if *z == 0.0 => r,
                    (_, Node::Const(z)) if *z == 0.0 => l,
                    _ => Node::add(l, r),
                },
                Operator::Sub => match &r {
                    Node::Const(z) if *z == 0.0 => l,
                    _ => Node::sub(l, r),
                },
                _ => Node::binary(*op, l, r),
            }
        }
    }
}

/// Splits a product/quotient chain into its constant factor and the
/// remaining factors (in order).
fn factors(node: &Node) -> (f64, Vec<Node>) {
    match node {
        Node::Const(c) => (*c, Vec::new()),
        Node::Binary(Operator::Mul, l, r) => {
            let (a, mut fa) = factors(l);
            let (b, fb) = factors(r);
            fa.extend(fb);
            (a * b, fa)
        }
        Node::Binary(Operator::Div, l, r) => match r.as_ref() {
            Node::Const(d) if *d != 0.0 => {
                let (a, fa) = factors(l);
                (a / d, fa)
            }
            _ => (1.0, vec![node.clone()]),
        },
        _ => (1.0, vec![node.clone()]),
    }
}

fn product(node: Node) -> Node {
    let (c, rest) = factors(&node);
    if !c.is_finite() {
        return node;
    }
    if rest.is_empty() {
        return Node::Const(c);
    }
    if rest.len() == 1 && c != 1.0 {
        if let Some(d) = distribute(&rest[0], c) {
            return d;
        }
    }
    let body = rest.into_iter().reduce(Node::mul).expect("non-empty");
    if c == 1.0 {
        body
    } else {
        Node::mul(Node::Const(c), body)
    }
}

/// c·(t1 ± t2 ± ...) → c·t1 ± c·t2 ± ... when every term already carries a
/// constant factor, so that the result has no more constants than before.
fn distribute(node: &Node, c: f64) -> Option<Node> {
    match node {
        Node::Binary(op @ (Operator::Add | Operator::Sub), l, r) => {
            let l = distribute(l, c)?;
            let r = distribute(r, c)?;
            Some(Node::binary(*op, l, r))
        }
        _ => {
            let (k, rest) = factors(node);
            if rest.is_empty() {
                return Some(Node::Const(k * c));
            }
            let has_factor = matches!(node, Node::Binary(Operator::Mul | Operator::Div, _, _)) && k != 1.0;
            if !has_factor {
                return None;
            }
            let body = rest.into_iter().reduce(Node::mul).expect("non-empty");
            Some(Node::mul(Node::Const(k * c), body))
        }
    }
}
