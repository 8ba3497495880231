//! Arithmetic expressions for declaring plant hooks in configuration files.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term   (('+' | '-') term)*
//! term    := unary  (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?          (right associative)
//! primary := number | var | func '(' expr ')' | '(' expr ')'
//! var     := 'x0[' i ']' | 'xi[' k '][' j ']' | 'y[' k ']' | 'u[' j ']' | 't'
//! ```
//!
//! Indices are 1-based. Functions: sin cos tan tanh exp log abs sqrt.

mod eval;
mod parser;

use std::fmt;

use thiserror::Error;

pub use eval::{bind, BoundExpr, FlatEnv, Slot, VarClass, VarEnv};
pub use parser::parse;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Tanh,
    Exp,
    Log,
    Abs,
    Sqrt,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "tanh" => Func::Tanh,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
        }
    }
}

/// Variable reference as written in the source (1-based indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X0(usize),
    Xi(usize, usize),
    Y(usize),
    U(usize),
    T,
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::X0(i) => write!(f, "x0[{i}]"),
            Var::Xi(k, j) => write!(f, "xi[{k}][{j}]"),
            Var::Y(k) => write!(f, "y[{k}]"),
            Var::U(j) => write!(f, "u[{j}]"),
            Var::T => write!(f, "t"),
        }
    }
}

/// Expression tree, generic over the leaf variable representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Node<V> {
    Num(f64),
    Var(V),
    Neg(Box<Node<V>>),
    Bin(BinOp, Box<Node<V>>, Box<Node<V>>),
    Call(Func, Box<Node<V>>),
}

pub type Expr = Node<Var>;

impl<V> Node<V> {
    pub fn vars(&self) -> Vec<&V> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut Vec<&'a V>) {
        match self {
            Node::Num(_) => {}
            Node::Var(v) => out.push(v),
            Node::Neg(e) | Node::Call(_, e) => e.collect_vars(out),
            Node::Bin(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }
}

// Fully parenthesized so that printing and re-parsing is structurally exact.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Num(v) => write!(f, "{v:?}"),
            Node::Var(v) => write!(f, "{v}"),
            Node::Neg(e) => write!(f, "(-{e})"),
            Node::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Node::Call(func, e) => write!(f, "{}({e})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnexpectedChar(char),
    UnexpectedToken(String),
    UnexpectedEnd,
    UnknownFunction(String),
    UnknownVariable(String),
    InvalidNumber(String),
    InvalidIndex(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at byte {offset}: {kind:?}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound variable {0}")]
    Unbound(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite result from {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BindError {
    #[error("variable {0} is out of range for this plant")]
    OutOfRange(String),
    #[error("variable {var} is not allowed in {context}")]
    NotAllowed { var: String, context: String },
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval_const(src: &str) -> f64 {
        parse(src).unwrap().eval(&VarEnv::default()).unwrap()
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval_const("1+2*3"), 7.0);
        assert_eq!(eval_const("2^3^2"), 512.0);
        assert_eq!(eval_const("-2^2"), -4.0);
        assert_eq!(eval_const("(-2)^2"), 4.0);
        assert_eq!(eval_const("8/4/2"), 1.0);
        assert_eq!(eval_const("10-4-3"), 3.0);
        assert_eq!(eval_const("2^-1"), 0.5);
        assert_eq!(eval_const("-3*-2"), 6.0);
        assert_eq!(eval_const("1.5e1 + 2E-1"), 15.2);
    }

    #[test]
    fn variables_bind_to_env() {
        let env = VarEnv {
            x0: vec![2.0],
            xi: vec![vec![0.0, 0.0], vec![3.0, 0.0, 0.0]],
            ..Default::default()
        };
        assert_eq!(parse("x0[1]*xi[2][1]").unwrap().eval(&env).unwrap(), 6.0);
        assert_eq!(parse("sin(xi[1][2])/3").unwrap().eval(&env).unwrap(), 0.0);
        let env = VarEnv { xi: vec![vec![0.0, std::f64::consts::FRAC_PI_2]], ..Default::default() };
        let v = parse("sin(xi[1][2])/3").unwrap().eval(&env).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        let env = VarEnv { xi: vec![vec![0.0]], ..Default::default() };
        assert_eq!(parse("cos(y[1])").unwrap().eval(&env).unwrap(), 1.0);
    }

    #[test]
    fn error_locations() {
        let e = parse("1 + * 2").unwrap_err();
        assert_eq!(e.offset, 4);
        let e = parse("foo(1)").unwrap_err();
        assert_eq!((e.offset, e.kind), (0, ParseErrorKind::UnknownFunction("foo".into())));
        let e = parse("2 * zeta").unwrap_err();
        assert_eq!((e.offset, e.kind), (4, ParseErrorKind::UnknownVariable("zeta".into())));
        let e = parse("(1 + 2").unwrap_err();
        assert_eq!((e.offset, e.kind), (6, ParseErrorKind::UnexpectedEnd));
        let e = parse("1 + 2)").unwrap_err();
        assert_eq!(e.offset, 5);
        let e = parse("3 $ 4").unwrap_err();
        assert_eq!((e.offset, e.kind), (2, ParseErrorKind::UnexpectedChar('$')));
        let e = parse("x0[0]").unwrap_err();
        assert_eq!(e.offset, 3);
        let e = parse("xi[1]").unwrap_err();
        assert_eq!(e.offset, 5);
    }

    #[test]
    fn domain_errors_are_reported() {
        let env = VarEnv::default();
        assert!(matches!(parse("log(0)").unwrap().eval(&env), Err(EvalError::Domain(_))));
        assert!(matches!(parse("1/0").unwrap().eval(&env), Err(EvalError::Domain(_))));
        assert!(matches!(parse("sqrt(-1)").unwrap().eval(&env), Err(EvalError::Domain(_))));
        assert!(matches!(parse("exp(1000)").unwrap().eval(&env), Err(EvalError::NonFinite(_))));
        assert!(matches!(parse("x0[3]").unwrap().eval(&env), Err(EvalError::Unbound(_))));
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..100.0).prop_map(Node::Num),
            (1usize..3).prop_map(|i| Node::Var(Var::X0(i))),
            ((1usize..3), (1usize..3)).prop_map(|(k, j)| Node::Var(Var::Xi(k, j))),
            (1usize..3).prop_map(|k| Node::Var(Var::Y(k))),
            Just(Node::Var(Var::T)),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Node::Neg(Box::new(e))),
                (inner.clone(), inner.clone(), 0usize..5).prop_map(|(a, b, o)| {
                    let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Pow][o];
                    Node::Bin(op, Box::new(a), Box::new(b))
                }),
                (inner, 0usize..8).prop_map(|(e, f)| {
                    let func = [
                        Func::Sin, Func::Cos, Func::Tan, Func::Tanh,
                        Func::Exp, Func::Log, Func::Abs, Func::Sqrt,
                    ][f];
                    Node::Call(func, Box::new(e))
                }),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_fixpoint(e in arb_expr()) {
            let printed = e.to_string();
            let reparsed = parse(&printed).unwrap();
            prop_assert_eq!(&reparsed, &e);
            prop_assert_eq!(parse(&reparsed.to_string()).unwrap(), reparsed);
        }
    }
}
