//! The closed operator set and its scalar semantics.
//!
//! `sqrt_s` and `pow_s` are the sign-preserving extensions of the square root
//! and the power function to negative inputs. Non-finite values are never
//! clamped: overflow and division by zero propagate as `inf`/`NaN`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

/// An operator of the expression language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Add,
    Sub,
    Mul,
    Div,
    Square,
    SqrtS,
    Exp,
    PowS,
    Tanh,
    Asinh,
    Sinh,
    Relu,
    Erfc,
}

impl Operator {
    pub const ALL: [Operator; 13] = [
        Operator::Add,
        Operator::Sub,
        Operator::Mul,
        Operator::Div,
        Operator::Square,
        Operator::SqrtS,
        Operator::Exp,
        Operator::PowS,
        Operator::Tanh,
        Operator::Asinh,
        Operator::Sinh,
        Operator::Relu,
        Operator::Erfc,
    ];

    /// Operators removed by the "without hyperbolic" ablation.
    pub const HYPERBOLIC: [Operator; 4] =
        [Operator::Tanh, Operator::Asinh, Operator::Sinh, Operator::Erfc];

    pub fn arity(self) -> usize {
        match self {
            Operator::Add | Operator::Sub | Operator::Mul | Operator::Div | Operator::PowS => 2,
            _ => 1,
        }
    }

    pub fn is_hyperbolic(self) -> bool {
        Self::HYPERBOLIC.contains(&self)
    }

    /// Name used in function-call syntax and in s-expressions.
    pub fn name(self) -> &'static str {
        match self {
            Operator::Add => "add",
            Operator::Sub => "sub",
            Operator::Mul => "mul",
            Operator::Div => "div",
            Operator::Square => "sq",
            Operator::SqrtS => "sqrt_s",
            Operator::Exp => "exp",
            Operator::PowS => "pow_s",
            Operator::Tanh => "tanh",
            Operator::Asinh => "asinh",
            Operator::Sinh => "sinh",
            Operator::Relu => "relu",
            Operator::Erfc => "erfc",
        }
    }

    pub fn from_name(name: &str) -> Option<Operator> {
        let op = match name {
            "add" => Operator::Add,
            "sub" => Operator::Sub,
            "mul" => Operator::Mul,
            "div" => Operator::Div,
            "sq" | "square" => Operator::Square,
            "sqrt_s" => Operator::SqrtS,
            "exp" => Operator::Exp,
            "pow_s" => Operator::PowS,
            "tanh" => Operator::Tanh,
            "asinh" => Operator::Asinh,
            "sinh" => Operator::Sinh,
            "relu" => Operator::Relu,
            "erfc" => Operator::Erfc,
            _ => return None,
        };
        Some(op)
    }

    /// Applies a unary operator. Panics in debug builds for binary kinds.
    #[inline]
    pub fn apply_unary(self, x: f64) -> f64 {
        match self {
            Operator::Square => x * x,
            Operator::SqrtS => sign(x) * x.abs().sqrt(),
            Operator::Exp => x.exp(),
            Operator::Tanh => x.tanh(),
            Operator::Asinh => x.asinh(),
            Operator::Sinh => x.sinh(),
            Operator::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Operator::Erfc => libm::erfc(x),
            _ => {
                debug_assert!(false, "{self} is not unary");
                f64::NAN
            }
        }
    }

    #[inline]
    pub fn apply_binary(self, a: f64, b: f64) -> f64 {
        match self {
            Operator::Add => a + b,
            Operator::Sub => a - b,
            Operator::Mul => a * b,
            Operator::Div => a / b,
            Operator::PowS => pow_s(a, b),
            _ => {
                debug_assert!(false, "{self} is not binary");
                f64::NAN
            }
        }
    }

    /// d f(x) / dx given the input `x` and the output `y = f(x)`.
    ///
    /// Non-differentiable points (relu at 0, sqrt_s at 0) use subgradient 0.
    #[inline]
    pub(crate) fn unary_derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Operator::Square => 2.0 * x,
            Operator::SqrtS => {
                if x == 0.0 {
                    0.0
                } else {
                    0.5 / x.abs().sqrt()
                }
            }
            Operator::Exp => y,
            Operator::Tanh => 1.0 - y * y,
            Operator::Asinh => 1.0 / (1.0 + x * x).sqrt(),
            Operator::Sinh => x.cosh(),
            Operator::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Operator::Erfc => -2.0 / PI.sqrt() * (-x * x).exp(),
            _ => f64::NAN,
        }
    }

    /// Partial derivatives of a binary operator w.r.t. both operands.
    #[inline]
    pub(crate) fn binary_derivative(self, a: f64, b: f64, y: f64) -> (f64, f64) {
        match self {
            Operator::Add => (1.0, 1.0),
            Operator::Sub => (1.0, -1.0),
            Operator::Mul => (b, a),
            Operator::Div => (1.0 / b, -a / (b * b)),
            Operator::PowS => {
                if a == 0.0 {
                    (0.0, 0.0)
                } else {
                    let mag = a.abs();
                    (b * mag.powf(b - 1.0), y * mag.ln())
                }
            }
            _ => (f64::NAN, f64::NAN),
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// sign(x) with sign(0) = 0.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// sign(x) * |x|^y.
#[inline]
pub fn pow_s(x: f64, y: f64) -> f64 {
    sign(x) * x.abs().powf(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extended_roots_and_powers() {
        assert_eq!(Operator::SqrtS.apply_unary(-4.0), -2.0);
        assert_eq!(Operator::SqrtS.apply_unary(9.0), 3.0);
        assert!((pow_s(-8.0, 1.0 / 3.0) + 2.0).abs() < 1e-12);
        assert_eq!(pow_s(0.0, 0.0), 0.0);
        assert_eq!(pow_s(-3.0, 0.0), -1.0);
    }

    #[test]
    fn erfc_at_zero() {
        assert_eq!(Operator::Erfc.apply_unary(0.0), 1.0);
    }

    #[test]
    fn names_round_trip() {
        for op in Operator::ALL {
            assert_eq!(Operator::from_name(op.name()), Some(op));
        }
    }

    #[test]
    fn subgradients_at_kinks() {
        assert_eq!(Operator::Relu.unary_derivative(0.0, 0.0), 0.0);
        assert_eq!(Operator::SqrtS.unary_derivative(0.0, 0.0), 0.0);
        assert_eq!(Operator::PowS.binary_derivative(0.0, 1.5, 0.0), (0.0, 0.0));
    }

    #[test]
    fn overflow_is_not_clamped() {
        assert!(Operator::Exp.apply_unary(1000.0).is_infinite());
        assert!(Operator::Sinh.apply_unary(1000.0).is_infinite());
        assert!(Operator::Div.apply_binary(1.0, 0.0).is_infinite());
    }
}
