//! Bundled plants and the expression-defined plant.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::expr::{bind, parse, BindError, BoundExpr, FlatEnv, ParseError, VarClass};
use crate::normal_form::{ModelError, PlantHooks, PlantModel, StructureIndices};

pub const PAPER_EXAMPLE: &str = "paper_example_2x2";

pub fn bundled_names() -> &'static [&'static str] {
    &[PAPER_EXAMPLE]
}

pub fn bundled(name: &str) -> Option<PlantModel> {
    match name {
        PAPER_EXAMPLE => Some(paper_example_2x2()),
        _ => None,
    }
}

/// Two-channel example with orders (2, 3), two zero-dynamics states,
/// a gain matrix with an off-diagonal `sin(ξ₁₂)/3` and the multiplier
/// `δ¹₂₃(y) = cos y₁`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PaperExample;

impl PlantHooks for PaperExample {
    fn f0(&self, x0: &[f64], xi: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        let s = xi[1] * u[1];
        out[0] = -x0[0] + x0[1] * s + xi[1];
        out[1] = -x0[1] - x0[0] * s + xi[0];
        Ok(())
    }

    fn a(&self, x0: &[f64], xi: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        out[0] = x0[0] * xi[2];
        out[1] = x0[1];
        Ok(())
    }

    fn b(&self, _x0: &[f64], xi: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        out[0] = 1.0;
        out[1] = xi[1].sin() / 3.0;
        out[2] = 0.0;
        out[3] = 1.0;
        Ok(())
    }

    fn multiplier(&self, k: usize, i: usize, j: usize, y: &[f64]) -> Result<f64, ModelError> {
        Ok(match (k, i, j) {
            (1, 0, 1) => y[0].cos(),
            _ => 0.0,
        })
    }
}

pub fn paper_example_2x2() -> PlantModel {
    let ix = StructureIndices::new(2, vec![2, 3]).expect("valid structure");
    PlantModel::new(ix, Arc::new(PaperExample)).expect("a(0) = 0")
}

/// Expression sources of the example plant, used to cross-check the DSL.
pub fn paper_example_source() -> PlantSource {
    PlantSource {
        n0: 2,
        r: vec![2, 3],
        f0: vec![
            "-x0[1] + x0[2]*xi[1][2]*u[2] + xi[1][2]".into(),
            "-x0[2] - x0[1]*xi[1][2]*u[2] + xi[1][1]".into(),
        ],
        a: vec!["x0[1]*xi[2][1]".into(), "x0[2]".into()],
        b: vec![
            vec!["1".into(), "sin(xi[1][2])/3".into()],
            vec!["0".into(), "1".into()],
        ],
        delta: vec![DeltaSource { k: 2, i: 1, j: 3, expr: "cos(y[1])".into() }],
    }
}

/// Linear plant: `ẋ₀ = F₀ x`, `a(x) = L x`, constant `b` and multipliers.
#[derive(Debug, Clone)]
pub struct LinearChains {
    pub f0: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `(k, i, j, value)` with 0-based channels and 0-based entry of `Mₖⁱ`.
    pub multipliers: Vec<(usize, usize, usize, f64)>,
}

impl LinearChains {
    /// Zero drift, identity gain, no multipliers, and `ẋ₀ = −x₀`.
    pub fn new(n0: usize, r: &[usize]) -> Self {
        let n = n0 + r.iter().sum::<usize>();
        let m = r.len();
        let mut f0 = DMatrix::zeros(n0, n);
        for i in 0..n0 {
            f0[(i, i)] = -1.0;
        }
        Self {
            f0,
            a: DMatrix::zeros(m, n),
            b: DMatrix::identity(m, m),
            multipliers: Vec::new(),
        }
    }

    pub fn plant(n0: usize, r: Vec<usize>) -> PlantModel {
        Self::new(n0, &r).build(n0, r).expect("linear plant is valid")
    }

    pub fn build(self, n0: usize, r: Vec<usize>) -> Result<PlantModel, ModelError> {
        let ix = StructureIndices::new(n0, r)?;
        let (m, n) = (ix.m(), ix.n());
        if self.f0.shape() != (n0, n) || self.a.shape() != (m, n) || self.b.shape() != (m, m) {
            return Err(ModelError::Dimension("linear plant matrices do not match the structure".into()));
        }
        PlantModel::new(ix, Arc::new(self))
    }
}

fn mat_vec(m: &DMatrix<f64>, x0: &[f64], xi: &[f64], out: &mut [f64]) {
    let n0 = x0.len();
    for (r, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (c, v) in x0.iter().chain(xi).enumerate() {
            s += m[(r, c)] * v;
        }
        debug_assert!(n0 <= m.ncols());
        *o = s;
    }
}

impl PlantHooks for LinearChains {
    fn f0(&self, x0: &[f64], xi: &[f64], _u: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        mat_vec(&self.f0, x0, xi, out);
        Ok(())
    }

    fn a(&self, x0: &[f64], xi: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        mat_vec(&self.a, x0, xi, out);
        Ok(())
    }

    fn b(&self, _x0: &[f64], _xi: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        let m = self.b.nrows();
        for r in 0..m {
            for c in 0..m {
                out[r * m + c] = self.b[(r, c)];
            }
        }
        Ok(())
    }

    fn multiplier(&self, k: usize, i: usize, j: usize, _y: &[f64]) -> Result<f64, ModelError> {
        Ok(self
            .multipliers
            .iter()
            .find(|(mk, mi, mj, _)| (*mk, *mi, *mj) == (k, i, j))
            .map_or(0.0, |e| e.3))
    }
}

/// Multiplier `δⁱ_{k,j}(y)` in 1-based notation, `r_i + 1 ≤ j ≤ r_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSource {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    pub expr: String,
}

/// Textual plant definition as it appears in configuration files.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantSource {
    pub n0: usize,
    pub r: Vec<usize>,
    pub f0: Vec<String>,
    pub a: Vec<String>,
    pub b: Vec<Vec<String>>,
    pub delta: Vec<DeltaSource>,
}

#[derive(Debug, thiserror::Error)]
pub enum PlantSourceError {
    #[error("{field}: {source}")]
    Parse { field: String, source: ParseError },
    #[error("{field}: {source}")]
    Bind { field: String, source: BindError },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Plant whose hooks are bound expressions.
#[derive(Debug, Clone)]
pub struct ExprPlant {
    f0: Vec<BoundExpr>,
    a: Vec<BoundExpr>,
    b: Vec<BoundExpr>,
    /// Indexed by (k, i, j) with 0-based entry j of `Mₖⁱ`.
    delta: Vec<((usize, usize, usize), BoundExpr)>,
}

fn compile(
    src: &str,
    field: String,
    ix: &StructureIndices,
    class: VarClass,
) -> Result<BoundExpr, PlantSourceError> {
    let e = parse(src).map_err(|source| PlantSourceError::Parse { field: field.clone(), source })?;
    bind(&e, ix, class, &field).map_err(|source| PlantSourceError::Bind { field, source })
}

impl ExprPlant {
    pub fn from_source(src: &PlantSource) -> Result<PlantModel, PlantSourceError> {
        let ix = StructureIndices::new(src.n0, src.r.clone())?;
        let m = ix.m();
        if src.f0.len() != ix.n0() {
            return Err(PlantSourceError::Shape(format!(
                "plant.f0 has {} entries, expected n0 = {}",
                src.f0.len(),
                ix.n0()
            )));
        }
        if src.a.len() != m {
            return Err(PlantSourceError::Shape(format!("plant.a has {} entries, expected m = {m}", src.a.len())));
        }
        if src.b.len() != m || src.b.iter().any(|row| row.len() != m) {
            return Err(PlantSourceError::Shape(format!("plant.b must be {m}x{m}")));
        }
        let f0 = src
            .f0
            .iter()
            .enumerate()
            .map(|(i, s)| compile(s, format!("plant.f0[{}]", i + 1), &ix, VarClass::STATE_INPUT))
            .collect::<Result<_, _>>()?;
        let a = src
            .a
            .iter()
            .enumerate()
            .map(|(i, s)| compile(s, format!("plant.a[{}]", i + 1), &ix, VarClass::STATE))
            .collect::<Result<_, _>>()?;
        let mut b = Vec::with_capacity(m * m);
        for (r, row) in src.b.iter().enumerate() {
            for (c, s) in row.iter().enumerate() {
                b.push(compile(s, format!("plant.b[{}][{}]", r + 1, c + 1), &ix, VarClass::STATE)?);
            }
        }
        let mut delta = Vec::new();
        for d in &src.delta {
            let field = format!("plant.delta[k={}, i={}, j={}]", d.k, d.i, d.j);
            let valid = d.k >= 2
                && d.k <= m
                && d.i >= 1
                && d.i < d.k
                && d.j > ix.r()[d.i - 1]
                && d.j <= ix.r()[d.k - 1];
            if !valid {
                return Err(PlantSourceError::Shape(format!(
                    "{field}: need 2 <= k <= m, 1 <= i < k and r_i + 1 <= j <= r_k"
                )));
            }
            let key = (d.k - 1, d.i - 1, d.j - 2);
            if delta.iter().any(|(k, _)| *k == key) {
                return Err(PlantSourceError::Shape(format!("{field} defined twice")));
            }
            delta.push((key, compile(&d.expr, field, &ix, VarClass::OUTPUT)?));
        }
        let plant = ExprPlant { f0, a, b, delta };
        Ok(PlantModel::new(ix, Arc::new(plant))?)
    }
}

fn eval_all(exprs: &[BoundExpr], env: &FlatEnv<'_>, out: &mut [f64]) -> Result<(), ModelError> {
    for (e, o) in exprs.iter().zip(out.iter_mut()) {
        *o = e.eval(env)?;
    }
    Ok(())
}

impl PlantHooks for ExprPlant {
    fn f0(&self, x0: &[f64], xi: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        eval_all(&self.f0, &FlatEnv { x0, xi, u, y: &[], t: 0.0 }, out)
    }

    fn a(&self, x0: &[f64], xi: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        eval_all(&self.a, &FlatEnv { x0, xi, u: &[], y: &[], t: 0.0 }, out)
    }

    fn b(&self, x0: &[f64], xi: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        eval_all(&self.b, &FlatEnv { x0, xi, u: &[], y: &[], t: 0.0 }, out)
    }

    fn multiplier(&self, k: usize, i: usize, j: usize, y: &[f64]) -> Result<f64, ModelError> {
        match self.delta.iter().find(|(key, _)| *key == (k, i, j)) {
            Some((_, e)) => Ok(e.eval(&FlatEnv { x0: &[], xi: &[], u: &[], y, t: 0.0 })?),
            None => Ok(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normal_form::PlantState;
    use crate::region::seeded_rng;
    use rand::Rng;

    fn max_rhs_gap(a: &PlantModel, b: &PlantModel, samples: usize, seed: u64) -> f64 {
        let n = a.indices().n();
        let m = a.indices().m();
        let mut rng = seeded_rng(seed);
        let (mut wa, mut wb) = (a.workspace(), b.workspace());
        let (mut oa, mut ob) = (vec![0.0; n], vec![0.0; n]);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let u: Vec<f64> = (0..m).map(|_| rng.random_range(-25.0..25.0)).collect();
            let t = rng.random_range(0.0..30.0);
            a.rhs_into(&x, &u, t, &mut oa, &mut wa).unwrap();
            b.rhs_into(&x, &u, t, &mut ob, &mut wb).unwrap();
            for (p, q) in oa.iter().zip(&ob) {
                worst = worst.max((p - q).abs());
            }
        }
        worst
    }

    #[test]
    fn dsl_example_matches_native() {
        let native = paper_example_2x2();
        let dsl = ExprPlant::from_source(&paper_example_source()).unwrap();
        assert!(max_rhs_gap(&native, &dsl, 10_000, 11) <= 1e-12);
    }

    #[test]
    fn dsl_example_matches_native_with_disturbance() {
        let d = vec![crate::normal_form::Sinusoid { channel: 1, amplitude: 1.0, omega: 1.0, phase: 0.0 }];
        let native = paper_example_2x2().with_disturbances(d.clone()).unwrap();
        let dsl = ExprPlant::from_source(&paper_example_source()).unwrap().with_disturbances(d).unwrap();
        assert!(max_rhs_gap(&native, &dsl, 1000, 12) <= 1e-12);
    }

    #[test]
    fn linear_chains_default_is_decoupled() {
        let p = LinearChains::plant(1, vec![2, 2]);
        let x = PlantState { x0: vec![1.0], xi: vec![vec![0.5, -1.0], vec![2.0, 3.0]] };
        let dx = p.plant_rhs(&x, &[0.25, -0.5], 0.0).unwrap();
        assert_eq!(dx.x0, vec![-1.0]);
        assert_eq!(dx.xi, vec![vec![-1.0, 0.25], vec![3.0, -0.5]]);
    }

    #[test]
    fn source_shape_errors_are_reported() {
        let mut src = paper_example_source();
        src.a.pop();
        assert!(matches!(ExprPlant::from_source(&src), Err(PlantSourceError::Shape(_))));

        let mut src = paper_example_source();
        src.delta[0].j = 2;
        let err = ExprPlant::from_source(&src).unwrap_err();
        assert!(err.to_string().contains("plant.delta[k=2, i=1, j=2]"));

        let mut src = paper_example_source();
        src.delta.push(src.delta[0].clone());
        assert!(ExprPlant::from_source(&src).unwrap_err().to_string().contains("defined twice"));
    }

    #[test]
    fn source_parse_errors_name_the_field() {
        let mut src = paper_example_source();
        src.b[0][1] = "sin(xi[1][2]/3".into();
        let err = ExprPlant::from_source(&src).unwrap_err();
        assert!(matches!(err, PlantSourceError::Parse { .. }));
        assert!(err.to_string().starts_with("plant.b[1][2]"), "{err}");
    }

    #[test]
    fn multipliers_may_not_read_the_state() {
        let mut src = paper_example_source();
        src.delta[0].expr = "x0[1]".into();
        assert!(matches!(ExprPlant::from_source(&src), Err(PlantSourceError::Bind { .. })));
    }

    #[test]
    fn drift_must_vanish_at_origin() {
        let mut src = paper_example_source();
        src.a[1] = "x0[2] + 1".into();
        assert!(matches!(
            ExprPlant::from_source(&src),
            Err(PlantSourceError::Model(ModelError::DriftAtOrigin(_)))
        ));
    }
}
