//! Invertible MIMO systems in multivariable normal form.
//!
//! ```text
//! ẋ₀ = f₀(x₀, ξ, u)
//! ξ̇ₖ = A_{rₖ} ξₖ + B_{rₖ}[aₖ(x) + bₖ(x)u] + Σ_{i<k} Mₖⁱ(y)[aᵢ(x) + bᵢ(x)u]
//! yₖ = ξₖ,₁
//! ```
//!
//! Channels are 0-based in this API. The multiplier vector `Mₖⁱ(y) ∈ ℝ^{rₖ}`
//! has zeros in its first `rᵢ − 1` entries and in its last entry; plants only
//! supply the entries in between (0-based positions `rᵢ − 1 ..= rₖ − 2`).
//! In 1-based notation the entry at 0-based position `j` is `δⁱ_{k,j+2}`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::EvalError;
use crate::matrices::min_singular_value;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid structure: {0}")]
    InvalidStructure(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("a(0) must vanish, found |a(0)| = {0:e}")]
    DriftAtOrigin(f64),
    #[error("b(x) is singular (smallest singular value {0:e})")]
    SingularGain(f64),
    #[error("hook evaluation failed: {0}")]
    Evaluation(#[from] EvalError),
}

/// Channel count, zero-dynamics dimension and per-channel chain orders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureIndices {
    n0: usize,
    r: Vec<usize>,
    #[serde(skip)]
    offsets: Vec<usize>,
}

impl StructureIndices {
    pub fn new(n0: usize, r: Vec<usize>) -> Result<Self, ModelError> {
        if r.is_empty() {
            return Err(ModelError::InvalidStructure("at least one channel is required".into()));
        }
        if let Some(k) = r.iter().position(|&rk| rk < 2) {
            return Err(ModelError::InvalidStructure(format!(
                "r[{}] = {} but every order must be at least 2",
                k + 1,
                r[k]
            )));
        }
        if r.windows(2).any(|w| w[0] > w[1]) {
            return Err(ModelError::InvalidStructure(format!(
                "orders {r:?} must be nondecreasing"
            )));
        }
        let mut offsets = Vec::with_capacity(r.len() + 1);
        let mut acc = 0;
        for &rk in &r {
            offsets.push(acc);
            acc += rk;
        }
        offsets.push(acc);
        Ok(Self { n0, r, offsets })
    }

    pub fn m(&self) -> usize {
        self.r.len()
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn r(&self) -> &[usize] {
        &self.r
    }

    /// Total order `𝐫 = Σ rₖ`.
    pub fn total_order(&self) -> usize {
        self.offsets[self.r.len()]
    }

    /// State dimension `n = n₀ + 𝐫`.
    pub fn n(&self) -> usize {
        self.n0 + self.total_order()
    }

    /// Offset of `ξₖ` inside the flattened `ξ`.
    pub fn xi_offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    pub fn output(&self, xi: &[f64]) -> Vec<f64> {
        (0..self.m()).map(|k| xi[self.offsets[k]]).collect()
    }

    pub fn output_into(&self, xi: &[f64], y: &mut [f64]) {
        for (k, yk) in y.iter_mut().enumerate() {
            *yk = xi[self.offsets[k]];
        }
    }
}

/// Plant state `x = col(x₀, ξ)` with ragged chains.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub x0: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
}

impl PlantState {
    pub fn zeros(ix: &StructureIndices) -> Self {
        Self {
            x0: vec![0.0; ix.n0()],
            xi: ix.r().iter().map(|&rk| vec![0.0; rk]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.x0.clone();
        for chain in &self.xi {
            v.extend_from_slice(chain);
        }
        v
    }

    pub fn unflatten(ix: &StructureIndices, flat: &[f64]) -> Result<Self, ModelError> {
        if flat.len() != ix.n() {
            return Err(ModelError::Dimension(format!(
                "state has length {}, expected n = {}",
                flat.len(),
                ix.n()
            )));
        }
        let x0 = flat[..ix.n0()].to_vec();
        let xi_flat = &flat[ix.n0()..];
        let xi = (0..ix.m())
            .map(|k| xi_flat[ix.xi_offset(k)..ix.xi_offset(k + 1)].to_vec())
            .collect();
        Ok(Self { x0, xi })
    }

    pub fn xi_flat(&self) -> Vec<f64> {
        self.xi.concat()
    }

    pub fn output(&self) -> Vec<f64> {
        self.xi.iter().map(|c| c[0]).collect()
    }

    pub fn check(&self, ix: &StructureIndices) -> Result<(), ModelError> {
        let shape_ok = self.x0.len() == ix.n0()
            && self.xi.len() == ix.m()
            && self.xi.iter().zip(ix.r()).all(|(c, &rk)| c.len() == rk);
        if shape_ok {
            Ok(())
        } else {
            Err(ModelError::Dimension(format!(
                "state shape ({}, {:?}) does not match n0 = {}, r = {:?}",
                self.x0.len(),
                self.xi.iter().map(Vec::len).collect::<Vec<_>>(),
                ix.n0(),
                ix.r()
            )))
        }
    }
}

/// Evaluation hooks of a normal-form plant. `xi` is the flattened `ξ`.
pub trait PlantHooks: Send + Sync {
    fn f0(&self, x0: &[f64], xi: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), ModelError>;
    fn a(&self, x0: &[f64], xi: &[f64], out: &mut [f64]) -> Result<(), ModelError>;
    /// Row-major `m × m`.
    fn b(&self, x0: &[f64], xi: &[f64], out: &mut [f64]) -> Result<(), ModelError>;
    /// Entry `j` (0-based) of `Mₖⁱ(y)`; only queried for `rᵢ − 1 ≤ j ≤ rₖ − 2`.
    fn multiplier(&self, k: usize, i: usize, j: usize, y: &[f64]) -> Result<f64, ModelError>;
}

/// Additive sinusoid `amplitude·sin(omega·t + phase)` on `a_channel(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub channel: usize,
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

impl Sinusoid {
    pub fn value(&self, t: f64) -> f64 {
        self.amplitude * (self.omega * t + self.phase).sin()
    }
}

#[derive(Clone)]
pub struct PlantModel {
    indices: StructureIndices,
    hooks: Arc<dyn PlantHooks>,
    disturbances: Vec<Sinusoid>,
    /// Start of `M_k^i` for pair (k, i), i < k, in the flat multiplier buffer.
    pair_offsets: Vec<Vec<usize>>,
    multiplier_len: usize,
}

impl std::fmt::Debug for PlantModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlantModel")
            .field("indices", &self.indices)
            .field("disturbances", &self.disturbances)
            .finish_non_exhaustive()
    }
}

/// Scratch buffers for allocation-free evaluation of the plant.
#[derive(Debug, Clone)]
pub struct PlantWorkspace {
    pub y: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub forcing: Vec<f64>,
    pub multipliers: Vec<f64>,
}

impl PlantModel {
    pub fn new(indices: StructureIndices, hooks: Arc<dyn PlantHooks>) -> Result<Self, ModelError> {
        let m = indices.m();
        let mut pair_offsets = vec![Vec::new(); m];
        let mut acc = 0;
        for (k, offs) in pair_offsets.iter_mut().enumerate() {
            for _ in 0..k {
                offs.push(acc);
                acc += indices.r()[k];
            }
        }
        let model = Self {
            indices,
            hooks,
            disturbances: Vec::new(),
            pair_offsets,
            multiplier_len: acc,
        };
        let zero = PlantState::zeros(&model.indices);
        let a0 = model.a(&zero.x0, &zero.xi_flat())?;
        let drift = a0.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(drift <= 1e-12) {
            return Err(ModelError::DriftAtOrigin(drift));
        }
        Ok(model)
    }

    pub fn with_disturbances(mut self, disturbances: Vec<Sinusoid>) -> Result<Self, ModelError> {
        if let Some(d) = disturbances.iter().find(|d| d.channel >= self.indices.m()) {
            return Err(ModelError::IndexOutOfRange(format!(
                "disturbance channel {} (0-based) with m = {}",
                d.channel,
                self.indices.m()
            )));
        }
        self.disturbances = disturbances;
        Ok(self)
    }

    pub fn without_disturbances(&self) -> Self {
        let mut p = self.clone();
        p.disturbances.clear();
        p
    }

    pub fn indices(&self) -> &StructureIndices {
        &self.indices
    }

    pub fn disturbances(&self) -> &[Sinusoid] {
        &self.disturbances
    }

    pub fn hooks(&self) -> &Arc<dyn PlantHooks> {
        &self.hooks
    }

    pub fn workspace(&self) -> PlantWorkspace {
        let m = self.indices.m();
        PlantWorkspace {
            y: vec![0.0; m],
            a: vec![0.0; m],
            b: vec![0.0; m * m],
            forcing: vec![0.0; m],
            multipliers: vec![0.0; self.multiplier_len],
        }
    }

    /// Undisturbed drift `a(x)`.
    pub fn a(&self, x0: &[f64], xi: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; self.indices.m()];
        self.hooks.a(x0, xi, &mut out)?;
        Ok(out)
    }

    /// Drift including the configured disturbances at time `t`.
    pub fn a_disturbed(&self, x0: &[f64], xi: &[f64], t: f64) -> Result<Vec<f64>, ModelError> {
        let mut out = self.a(x0, xi)?;
        self.add_disturbance(t, &mut out);
        Ok(out)
    }

    pub fn add_disturbance(&self, t: f64, a: &mut [f64]) {
        for d in &self.disturbances {
            a[d.channel] += d.value(t);
        }
    }

    pub fn b(&self, x0: &[f64], xi: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        let m = self.indices.m();
        let mut buf = vec![0.0; m * m];
        self.hooks.b(x0, xi, &mut buf)?;
        Ok(DMatrix::from_row_slice(m, m, &buf))
    }

    /// `b(x)⁻¹`, failing when the smallest singular value is ≤ 1e-10.
    pub fn b_inverse(&self, x0: &[f64], xi: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        let b = self.b(x0, xi)?;
        let smin = min_singular_value(&b);
        if !(smin > 1e-10) {
            return Err(ModelError::SingularGain(smin));
        }
        b.try_inverse().ok_or(ModelError::SingularGain(smin))
    }

    fn check_pair(&self, k: usize, i: usize) -> Result<(), ModelError> {
        let m = self.indices.m();
        if k >= m || i >= k {
            return Err(ModelError::IndexOutOfRange(format!(
                "multiplier M_k^i needs 0 <= i < k < m, got k = {k}, i = {i}, m = {m}"
            )));
        }
        Ok(())
    }

    /// `Mₖⁱ(y)`.
    pub fn multiplier_vector(&self, k: usize, i: usize, y: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_pair(k, i)?;
        if y.len() != self.indices.m() {
            return Err(ModelError::Dimension(format!("y has length {}", y.len())));
        }
        let r = self.indices.r();
        let mut v = vec![0.0; r[k]];
        for (j, vj) in v.iter_mut().enumerate().take(r[k] - 1).skip(r[i] - 1) {
            *vj = self.hooks.multiplier(k, i, j, y)?;
        }
        Ok(v)
    }

    /// Evaluates every `Mₖⁱ(y)` into `out` (layout given by [`Self::multiplier_slice`]).
    pub fn multipliers_into(&self, y: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        let r = self.indices.r();
        for k in 1..self.indices.m() {
            for i in 0..k {
                let off = self.pair_offsets[k][i];
                let v = &mut out[off..off + r[k]];
                v.fill(0.0);
                for j in (r[i] - 1)..(r[k] - 1) {
                    v[j] = self.hooks.multiplier(k, i, j, y)?;
                }
            }
        }
        Ok(())
    }

    /// View of `Mₖⁱ` inside a buffer filled by [`Self::multipliers_into`].
    pub fn multiplier_slice<'a>(&self, buf: &'a [f64], k: usize, i: usize) -> &'a [f64] {
        let off = self.pair_offsets[k][i];
        &buf[off..off + self.indices.r()[k]]
    }

    /// Block lower-triangular `𝐁(y) ∈ ℝ^{𝐫×m}`.
    pub fn big_b_matrix(&self, y: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        let ix = &self.indices;
        let mut out = DMatrix::zeros(ix.total_order(), ix.m());
        for k in 0..ix.m() {
            let row0 = ix.xi_offset(k);
            out[(row0 + ix.r()[k] - 1, k)] = 1.0;
            for i in 0..k {
                let mv = self.multiplier_vector(k, i, y)?;
                for (j, v) in mv.iter().enumerate() {
                    out[(row0 + j, i)] = *v;
                }
            }
        }
        Ok(out)
    }

    /// Plant vector field on a flat state `col(x₀, ξ)`.
    pub fn rhs_into(
        &self,
        x: &[f64],
        u: &[f64],
        t: f64,
        out: &mut [f64],
        ws: &mut PlantWorkspace,
    ) -> Result<(), ModelError> {
        let ix = &self.indices;
        let (n0, m) = (ix.n0(), ix.m());
        let (x0, xi) = x.split_at(n0);
        let (dx0, dxi) = out.split_at_mut(n0);
        self.hooks.f0(x0, xi, u, dx0)?;
        self.hooks.a(x0, xi, &mut ws.a)?;
        self.add_disturbance(t, &mut ws.a);
        self.hooks.b(x0, xi, &mut ws.b)?;
        for k in 0..m {
            let row = &ws.b[k * m..(k + 1) * m];
            ws.forcing[k] = ws.a[k] + row.iter().zip(u).map(|(bk, uj)| bk * uj).sum::<f64>();
        }
        ix.output_into(xi, &mut ws.y);
        if m > 1 {
            self.multipliers_into(&ws.y, &mut ws.multipliers)?;
        }
        for k in 0..m {
            let off = ix.xi_offset(k);
            let rk = ix.r()[k];
            for j in 0..rk - 1 {
                dxi[off + j] = xi[off + j + 1];
            }
            dxi[off + rk - 1] = ws.forcing[k];
            for i in 0..k {
                let mv = self.multiplier_slice(&ws.multipliers, k, i);
                for j in 0..rk {
                    dxi[off + j] += mv[j] * ws.forcing[i];
                }
            }
        }
        Ok(())
    }

    pub fn plant_rhs(&self, state: &PlantState, u: &[f64], t: f64) -> Result<PlantState, ModelError> {
        state.check(&self.indices)?;
        if u.len() != self.indices.m() {
            return Err(ModelError::Dimension(format!("u has length {}", u.len())));
        }
        let x = state.flatten();
        let mut out = vec![0.0; x.len()];
        let mut ws = self.workspace();
        self.rhs_into(&x, u, t, &mut out, &mut ws)?;
        PlantState::unflatten(&self.indices, &out)
    }
}
