use super::{BinOp, BindError, EvalError, Expr, Func, Node, Var};
use crate::normal_form::StructureIndices;

/// Resolved variable: 0-based position inside the flat evaluation buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    X0(usize),
    Xi(usize),
    U(usize),
    Y(usize),
    T,
}

pub type BoundExpr = Node<Slot>;

/// Which variable families an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarClass {
    pub state: bool,
    pub output: bool,
    pub input: bool,
    pub time: bool,
}

impl VarClass {
    pub const STATE_INPUT: Self = Self { state: true, output: true, input: true, time: false };
    pub const STATE: Self = Self { state: true, output: true, input: false, time: false };
    pub const OUTPUT: Self = Self { state: false, output: true, input: false, time: false };
}

pub trait Lookup<V> {
    fn get(&self, v: &V) -> Result<f64, EvalError>;
}

/// Ragged environment keyed by the source (1-based) variable names.
#[derive(Debug, Clone, Default)]
pub struct VarEnv {
    pub x0: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub t: Option<f64>,
}

impl Lookup<Var> for VarEnv {
    fn get(&self, v: &Var) -> Result<f64, EvalError> {
        let found = match *v {
            Var::X0(i) => self.x0.get(i - 1).copied(),
            Var::Xi(k, j) => self.xi.get(k - 1).and_then(|c| c.get(j - 1)).copied(),
            Var::Y(k) => self.xi.get(k - 1).and_then(|c| c.first()).copied(),
            Var::U(j) => self.u.get(j - 1).copied(),
            Var::T => self.t,
        };
        found.ok_or_else(|| EvalError::Unbound(v.to_string()))
    }
}

/// Flat environment for bound expressions.
#[derive(Debug, Clone, Copy)]
pub struct FlatEnv<'a> {
    pub x0: &'a [f64],
    pub xi: &'a [f64],
    pub u: &'a [f64],
    /// Outputs, used only by output-only expressions.
    pub y: &'a [f64],
    pub t: f64,
}

impl Lookup<Slot> for FlatEnv<'_> {
    fn get(&self, v: &Slot) -> Result<f64, EvalError> {
        let found = match *v {
            Slot::X0(i) => self.x0.get(i).copied(),
            Slot::Xi(i) => self.xi.get(i).copied(),
            Slot::U(i) => self.u.get(i).copied(),
            Slot::Y(i) => self.y.get(i).copied(),
            Slot::T => Some(self.t),
        };
        found.ok_or_else(|| EvalError::Unbound(format!("{v:?}")))
    }
}

fn finite(v: f64, what: &str) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite(what.to_string()))
    }
}

impl<V> Node<V> {
    pub fn eval<L: Lookup<V>>(&self, env: &L) -> Result<f64, EvalError> {
        match self {
            Node::Num(v) => Ok(*v),
            Node::Var(v) => env.get(v),
            Node::Neg(e) => Ok(-e.eval(env)?),
            Node::Bin(op, a, b) => {
                let (x, y) = (a.eval(env)?, b.eval(env)?);
                let v = match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => {
                        if y == 0.0 {
                            return Err(EvalError::Domain("division by zero".into()));
                        }
                        x / y
                    }
                    BinOp::Pow => {
                        if x < 0.0 && y.fract() != 0.0 {
                            return Err(EvalError::Domain(format!("{x}^{y}")));
                        }
                        if x == 0.0 && y < 0.0 {
                            return Err(EvalError::Domain(format!("{x}^{y}")));
                        }
                        x.powf(y)
                    }
                };
                finite(v, op.symbol())
            }
            Node::Call(func, e) => {
                let x = e.eval(env)?;
                let v = match func {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Tan => x.tan(),
                    Func::Tanh => x.tanh(),
                    Func::Exp => x.exp(),
                    Func::Log => {
                        if x <= 0.0 {
                            return Err(EvalError::Domain(format!("log({x})")));
                        }
                        x.ln()
                    }
                    Func::Abs => x.abs(),
                    Func::Sqrt => {
                        if x < 0.0 {
                            return Err(EvalError::Domain(format!("sqrt({x})")));
                        }
                        x.sqrt()
                    }
                };
                finite(v, func.name())
            }
        }
    }

    fn map_vars<W, E>(&self, f: &impl Fn(&V) -> Result<W, E>) -> Result<Node<W>, E> {
        Ok(match self {
            Node::Num(v) => Node::Num(*v),
            Node::Var(v) => Node::Var(f(v)?),
            Node::Neg(e) => Node::Neg(Box::new(e.map_vars(f)?)),
            Node::Bin(op, a, b) => Node::Bin(*op, Box::new(a.map_vars(f)?), Box::new(b.map_vars(f)?)),
            Node::Call(func, e) => Node::Call(*func, Box::new(e.map_vars(f)?)),
        })
    }
}

/// Resolves source variables against the plant structure, rejecting
/// out-of-range indices and variable families not allowed in `context`.
pub fn bind(
    e: &Expr,
    ix: &StructureIndices,
    allowed: VarClass,
    context: &str,
) -> Result<BoundExpr, BindError> {
    e.map_vars(&|v: &Var| {
        let not_allowed = || BindError::NotAllowed { var: v.to_string(), context: context.to_string() };
        let oob = || BindError::OutOfRange(v.to_string());
        match *v {
            Var::X0(i) => {
                if !allowed.state {
                    return Err(not_allowed());
                }
                if i > ix.n0() {
                    return Err(oob());
                }
                Ok(Slot::X0(i - 1))
            }
            Var::Xi(k, j) => {
                if !allowed.state {
                    return Err(not_allowed());
                }
                if k > ix.m() || j > ix.r()[k - 1] {
                    return Err(oob());
                }
                Ok(Slot::Xi(ix.xi_offset(k - 1) + j - 1))
            }
            Var::Y(k) => {
                if !allowed.output {
                    return Err(not_allowed());
                }
                if k > ix.m() {
                    return Err(oob());
                }
                if allowed.state {
                    Ok(Slot::Xi(ix.xi_offset(k - 1)))
                } else {
                    Ok(Slot::Y(k - 1))
                }
            }
            Var::U(j) => {
                if !allowed.input {
                    return Err(not_allowed());
                }
                if j > ix.m() {
                    return Err(oob());
                }
                Ok(Slot::U(j - 1))
            }
            Var::T => {
                if !allowed.time {
                    return Err(not_allowed());
                }
                Ok(Slot::T)
            }
        }
    })
}
