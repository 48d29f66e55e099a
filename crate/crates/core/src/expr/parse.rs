//! Infix and s-expression text forms.
//!
//! Infix grammar:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' NUMBER | '-' unary | primary
//! primary := NUMBER | IDENT '[' INT ']' | IDENT '(' expr (',' expr)? ')' | '(' expr ')'
//! ```
//!
//! A minus directly in front of a number is part of the literal; in front of
//! anything else it becomes a multiplication by -1.

use super::{ExprError, Node, Operator, VarRef};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s = &text[start..i];
            let v: f64 = s.parse().map_err(|_| ExprError::Syntax {
                pos: start,
                msg: format!("bad number `{s}`"),
            })?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let s = &text[start..i];
            match s {
                "inf" => out.push((Tok::Num(f64::INFINITY), start)),
                "NaN" | "nan" => out.push((Tok::Num(f64::NAN), start)),
                _ => out.push((Tok::Ident(s.to_string()), start)),
            }
        } else if "+-*/()[],".contains(c) {
            out.push((Tok::Sym(c), i));
            i += 1;
        } else {
            return Err(ExprError::Syntax { pos: i, msg: format!("unexpected character `{c}`") });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(_, p)| *p)
    }

    fn err(&self, msg: impl Into<String>) -> ExprError {
        ExprError::Syntax { pos: self.offset(), msg: msg.into() }
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}`")))
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                Operator::Add
            } else if self.eat('-') {
                Operator::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = Node::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                Operator::Mul
            } else if self.eat('/') {
                Operator::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Node::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat('-') {
            if let Some(Tok::Num(v)) = self.peek() {
                let v = -*v;
                self.pos += 1;
                return Ok(Node::Const(v));
            }
            let inner = self.unary()?;
            return Ok(Node::mul(Node::Const(-1.0), inner));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Node, ExprError> {
        let at = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Node::Const(v))
            }
            Some(Tok::Sym('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.eat('[') {
                    let lag = match self.peek() {
                        Some(Tok::Num(v)) if v.fract() == 0.0 && *v >= 0.0 => *v as usize,
                        _ => return Err(self.err("expected a non-negative integer lag")),
                    };
                    self.pos += 1;
                    self.expect(']')?;
                    return Ok(Node::Var(VarRef::new(name, lag)));
                }
                if !self.eat('(') {
                    return Err(ExprError::Syntax {
                        pos: at,
                        msg: format!("`{name}` must be followed by `[` or `(`"),
                    });
                }
                let op = Operator::from_name(&name)
                    .filter(|op| !matches!(op, Operator::Add | Operator::Sub | Operator::Mul | Operator::Div))
                    .ok_or(ExprError::UnknownOperator { name: name.clone(), pos: at })?;
                let mut args = vec![self.expr()?];
                while self.eat(',') {
                    args.push(self.expr()?);
                }
                self.expect(')')?;
                build(op, args)
            }
            Some(Tok::Sym(c)) => Err(self.err(format!("unexpected `{c}`"))),
            None => Err(self.err("unexpected end of input")),
        }
    }
}

fn build(op: Operator, mut args: Vec<Node>) -> Result<Node, ExprError> {
    if args.len() != op.arity() {
        return Err(ExprError::Arity { op, expected: op.arity(), got: args.len() });
    }
    Ok(if args.len() == 1 {
        Node::unary(op, args.pop().expect("one arg"))
    } else {
        let r = args.pop().expect("two args");
        let l = args.pop().expect("two args");
        Node::binary(op, l, r)
    })
}

pub(crate) fn parse_infix(text: &str) -> Result<Node, ExprError> {
    let mut p = Parser { toks: lex(text)?, pos: 0, end: text.len() };
    let node = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(p.err("trailing input"));
    }
    Ok(node)
}

pub(crate) fn format_number(v: f64) -> String {
    let debug = format!("{v:?}");
    if debug.contains('e') {
        debug
    } else {
        format!("{v}")
    }
}

fn precedence(node: &Node) -> u8 {
    match node {
        Node::Binary(Operator::Add | Operator::Sub, _, _) => 1,
        Node::Binary(Operator::Mul | Operator::Div, _, _) => 2,
        _ => 3,
    }
}

fn is_negative_literal(node: &Node) -> bool {
    matches!(node, Node::Const(c) if c.is_sign_negative() || c.is_nan())
}

pub(crate) fn render_infix(node: &Node) -> String {
    let mut s = String::new();
    write_infix(node, &mut s);
    s
}

fn write_infix(node: &Node, out: &mut String) {
    match node {
        Node::Const(c) => out.push_str(&format_number(*c)),
        Node::Var(v) => out.push_str(&v.to_string()),
        Node::Unary(op, c) => {
            out.push_str(op.name());
            out.push('(');
            write_infix(c, out);
            out.push(')');
        }
        Node::Binary(op @ (Operator::Add | Operator::Sub | Operator::Mul | Operator::Div), l, r) => {
            let p = precedence(node);
            let wrap_l = precedence(l) < p;
            let wrap_r = precedence(r) <= p || is_negative_literal(r);
            wrap(l, wrap_l, out);
            out.push(match op {
                Operator::Add => '+',
                Operator::Sub => '-',
                Operator::Mul => '*',
                _ => '/',
            });
            wrap(r, wrap_r, out);
        }
        Node::Binary(op, l, r) => {
            out.push_str(op.name());
            out.push('(');
            write_infix(l, out);
            out.push(',');
            write_infix(r, out);
            out.push(')');
        }
    }
}

fn wrap(node: &Node, parens: bool, out: &mut String) {
    if parens {
        out.push('(');
        write_infix(node, out);
        out.push(')');
    } else {
        write_infix(node, out);
    }
}

pub(crate) fn render_sexpr(node: &Node) -> String {
    match node {
        Node::Const(c) => format_number(*c),
        Node::Var(v) => v.to_string(),
        Node::Unary(op, c) => format!("({} {})", op.name(), render_sexpr(c)),
        Node::Binary(op, l, r) => format!("({} {} {})", op.name(), render_sexpr(l), render_sexpr(r)),
    }
}

pub(crate) fn parse_sexpr(text: &str) -> Result<Node, ExprError> {
    let mut atoms = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == b'(' || c == b')' {
            atoms.push((&text[i..i + 1], i));
            i += 1;
        } else {
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'(' && bytes[i] != b')' {
                i += 1;
            }
            atoms.push((&text[start..i], start));
        }
    }
    let mut pos = 0;
    let node = sexpr_node(&atoms, &mut pos, text.len())?;
    if pos != atoms.len() {
        return Err(ExprError::Syntax { pos: atoms[pos].1, msg: "trailing input".into() });
    }
    Ok(node)
}

fn sexpr_node(atoms: &[(&str, usize)], pos: &mut usize, end: usize) -> Result<Node, ExprError> {
    let Some(&(tok, at)) = atoms.get(*pos) else {
        return Err(ExprError::Syntax { pos: end, msg: "unexpected end of input".into() });
    };
    *pos += 1;
    match tok {
        "(" => {
            let Some(&(name, name_at)) = atoms.get(*pos) else {
                return Err(ExprError::Syntax { pos: end, msg: "unexpected end of input".into() });
            };
            *pos += 1;
            let op = Operator::from_name(name)
                .ok_or(ExprError::UnknownOperator { name: name.to_string(), pos: name_at })?;
            let mut args = Vec::new();
            loop {
                match atoms.get(*pos) {
                    Some(&(")", _)) => {
                        *pos += 1;
                        break;
                    }
                    Some(_) => args.push(sexpr_node(atoms, pos, end)?),
                    None => {
                        return Err(ExprError::Syntax { pos: end, msg: "missing `)`".into() });
                    }
                }
            }
            build(op, args)
        }
        ")" => Err(ExprError::Syntax { pos: at, msg: "unexpected `)`".into() }),
        _ => {
            if let Some(open) = tok.find('[') {
                let lag = tok[open + 1..]
                    .strip_suffix(']')
                    .and_then(|l| l.parse::<usize>().ok())
                    .ok_or_else(|| ExprError::Syntax { pos: at, msg: format!("bad variable `{tok}`") })?;
                return Ok(Node::Var(VarRef::new(&tok[..open], lag)));
            }
            let v = match tok {
                "inf" => f64::INFINITY,
                "-inf" => f64::NEG_INFINITY,
                "NaN" | "nan" => f64::NAN,
                _ => tok
                    .parse::<f64>()
                    .map_err(|_| ExprError::Syntax { pos: at, msg: format!("bad atom `{tok}`") })?,
            };
            Ok(Node::Const(v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rt(text: &str) -> String {
        render_infix(&parse_infix(text).unwrap())
    }

    #[test]
    fn canonical_rendering() {
        assert_eq!(rt("-0.01 * g[0]"), "-0.01*g[0]");
        assert_eq!(rt("a[0] - (b[0] - c[0])"), "a[0]-(b[0]-c[0])");
        assert_eq!(rt("(a[0] - b[0]) - c[0]"), "a[0]-b[0]-c[0]");
        assert_eq!(rt("a[0] * (b[0] + c[0])"), "a[0]*(b[0]+c[0])");
        assert_eq!(rt("a[0] / (b[0] * c[0])"), "a[0]/(b[0]*c[0])");
        assert_eq!(rt("pow_s(g[0], 0)"), "pow_s(g[0],0)");
        assert_eq!(rt("square(g[0])"), "sq(g[0])");
        assert_eq!(rt("g[0] - -2"), "g[0]-(-2)");
        assert_eq!(rt("1e-7*g[0]"), "1e-7*g[0]");
    }

    #[test]
    fn leading_minus_on_expression() {
        let n = parse_infix("-g[0]").unwrap();
        assert_eq!(n, Node::mul(Node::Const(-1.0), Node::var("g", 0)));
    }

    #[test]
    fn sexpr_round_trip() {
        let n = parse_infix("-0.01*g[0]+tanh(mhat[3])").unwrap();
        let s = render_sexpr(&n);
        assert_eq!(s, "(add (mul -0.01 g[0]) (tanh mhat[3]))");
        assert_eq!(parse_sexpr(&s).unwrap(), n);
    }

    #[test]
    fn errors_carry_positions() {
        assert!(matches!(parse_infix("g[0] +"), Err(ExprError::Syntax { pos: 6, .. })));
        assert!(matches!(
            parse_infix("1 + cosh(g[0])"),
            Err(ExprError::UnknownOperator { pos: 4, .. })
        ));
        assert!(matches!(parse_infix("tanh(g[0], g[1])"), Err(ExprError::Arity { .. })));
        assert!(matches!(parse_infix("g[0] $"), Err(ExprError::Syntax { pos: 5, .. })));
        assert!(matches!(parse_sexpr("(frob g[0])"), Err(ExprError::UnknownOperator { .. })));
    }
}
