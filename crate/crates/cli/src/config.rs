//! JSON run configuration and its resolution into a runnable scenario.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use elphgo::control_law::{estimate_mu0, ControllerConfig, DEFAULT_SAFETY_FACTOR};
use elphgo::gain_design::{design_k, saturation_level, DesignOptions, SamplingOptions};
use elphgo::normal_form::{PlantModel, PlantState, Sinusoid};
use elphgo::observer::{default_gamma, ObserverState};
use elphgo::plants::{self, DeltaSource, ExprPlant, PlantSource};
use elphgo::region::{paper_example_lyapunov, seeded_rng, QuadraticForm, Region};
use elphgo::simulator::{suggest_dt, IntegratorConfig, DEFAULT_C_STAB, DEFAULT_ESCAPE_RADIUS};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const FULL_PROFILE: &str = "full";
/// `dt` used by full-state runs when the config asks for `"auto"`.
pub const IDEAL_AUTO_DT: f64 = 1e-3;
const DEFAULT_RECORD_INTERVAL: f64 = 0.01;

const BUNDLED_CONFIGS: &[(&str, &str)] =
    &[(plants::PAPER_EXAMPLE, include_str!("../configs/paper_example_2x2.json"))];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub plant: PlantSection,
    pub controller: ControllerSection,
    pub observer: ObserverSection,
    pub integrator: IntegratorSection,
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignSection>,
    /// Named overrides; the base sections form the `full` profile.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub profiles: BTreeMap<String, Profile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSection {
    Bundled(String),
    Expr(ExprPlantSection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExprPlantSection {
    pub n0: usize,
    pub r: Vec<usize>,
    pub f0: Vec<String>,
    pub a: Vec<String>,
    pub b: Vec<Vec<String>>,
    #[serde(default)]
    pub delta: Vec<DeltaSection>,
}

/// 1-based indices as in `δⁱ_{k,j}(y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaSection {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    pub expr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub bhat: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poles: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<Vec<f64>>>,
    pub eps0: f64,
    /// Computed from the design region when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sat_level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cascade: Option<CascadeSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeSection {
    pub g: Vec<f64>,
    pub kappa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DtSetting {
    Fixed(f64),
    Keyword(DtKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtKeyword {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    pub dt: DtSetting,
    pub t_final: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_stride: Option<usize>,
    /// Seconds between recorded samples; converted to a stride.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_interval: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_stab: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escape_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// Flat `col(x₀, ξ₁, …, ξ_m)`.
    pub x_init: Vec<f64>,
    /// Flat observer state; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_init: Option<Vec<f64>>,
    /// Apply `disturbances` without `--perturb`.
    #[serde(default)]
    pub disturbance: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub disturbances: Vec<DisturbanceSection>,
    #[serde(default)]
    pub seed: u64,
}

/// `amplitude·sin(omega·t + phase)` added to `a_channel` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    pub channel: usize,
    pub amplitude: f64,
    #[serde(default = "one")]
    pub omega: f64,
    #[serde(default)]
    pub phase: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub region: RegionSection,
    /// Bound used instead of the sampled estimate (which must not exceed it).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub samples: SampleCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleCounts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu0: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saturation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dissipation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_draws: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auxiliary: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionSection {
    Sublevel { form: FormSection, level: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FormSection {
    Bundled(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer: Option<ObserverSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorSection>,
}

/// Where a config came from, recorded in manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigSource {
    Bundled(String),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source: ConfigSource,
    /// SHA-256 of the canonical JSON serialization.
    pub sha256: String,
}

pub fn bundled_config_names() -> Vec<&'static str> {
    BUNDLED_CONFIGS.iter().map(|(n, _)| *n).collect()
}

pub fn bundled_config_text(name: &str) -> Option<&'static str> {
    BUNDLED_CONFIGS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Parses and validates every profile of a config given as JSON text.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config file, or a bundled config by name when no such file exists.
pub fn load_config(path_or_name: &str) -> Result<LoadedConfig, CliError> {
    let path = Path::new(path_or_name);
    let (text, source) = if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        (text, ConfigSource::File(path.to_path_buf()))
    } else if let Some(text) = bundled_config_text(path_or_name) {
        (text.to_string(), ConfigSource::Bundled(path_or_name.to_string()))
    } else {
        return Err(CliError::Config(format!(
            "`{path_or_name}` is neither a readable file nor a bundled config ({})",
            bundled_config_names().join(", ")
        )));
    };
    let config = parse_config(&text)?;
    let sha256 = config.sha256();
    Ok(LoadedConfig { config, source, sha256 })
}

/// Everything a command needs, resolved for one profile.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub profile: String,
    /// Nominal plant; see [`Scenario::plant_for`].
    pub plant: PlantModel,
    pub disturbances: Vec<Sinusoid>,
    pub disturbance_default: bool,
    pub controller: ControllerConfig,
    pub gamma: Vec<Vec<(f64, f64)>>,
    pub ell: Vec<f64>,
    /// Cascade inputs; derived from an explicit `ℓ` with `g_m = 1` and `κ = ℓ_m`.
    pub cascade_g: Vec<f64>,
    pub kappa: f64,
    pub integrator: IntegratorSection,
    pub x_init: PlantState,
    pub eta_init: ObserverState,
    pub seed: u64,
    pub region: Option<Region>,
    pub design: DesignOptions,
    pub output: OutputSection,
    pub warnings: Vec<String>,
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn matrix(rows: &[Vec<f64>], n: usize, field: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(cfg_err(format!("{field} must be {n}x{n}")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(cfg_err(format!("{field} has non-finite entries")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn build_plant(section: &PlantSection) -> Result<PlantModel, CliError> {
    match section {
        PlantSection::Bundled(name) => plants::bundled(name).ok_or_else(|| {
            cfg_err(format!(
                "plant.bundled: unknown plant `{name}` (available: {})",
                plants::bundled_names().join(", ")
            ))
        }),
        PlantSection::Expr(e) => {
            if e.r.windows(2).any(|w| w[0] > w[1]) {
                return Err(cfg_err(format!("plant.expr.r = {:?}: r must be nondecreasing", e.r)));
            }
            let src = PlantSource {
                n0: e.n0,
                r: e.r.clone(),
                f0: e.f0.clone(),
                a: e.a.clone(),
                b: e.b.clone(),
                delta: e
                    .delta
                    .iter()
                    .map(|d| DeltaSource { k: d.k, i: d.i, j: d.j, expr: d.expr.clone() })
                    .collect(),
            };
            ExprPlant::from_source(&src).map_err(|e| cfg_err(e.to_string()))
        }
    }
}

fn build_k(section: &ControllerSection, r: &[usize]) -> Result<Vec<Vec<f64>>, CliError> {
    let blocks = match (&section.poles, &section.k) {
        (Some(_), Some(_)) => {
            return Err(cfg_err("controller: give either `poles` or `k`, not both"));
        }
        (None, None) => return Err(cfg_err("controller: one of `poles` or `k` is required")),
        (Some(poles), None) => {
            if poles.len() != r.len() {
                return Err(cfg_err(format!("controller.poles has {} sets for {} channels", poles.len(), r.len())));
            }
            poles
                .iter()
                .zip(r)
                .enumerate()
                .map(|(k, (p, &rk))| {
                    if p.len() != rk {
                        return Err(cfg_err(format!("controller.poles[{k}] needs {rk} poles, got {}", p.len())));
                    }
                    design_k(rk, p).map_err(|e| cfg_err(format!("controller.poles[{k}]: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        (None, Some(k)) => k.clone(),
    };
    if blocks.len() != r.len() || blocks.iter().zip(r).any(|(b, &rk)| b.len() != rk) {
        return Err(cfg_err(format!("controller.k must have one row of length r_k per channel (r = {r:?})")));
    }
    Ok(blocks)
}

fn build_gamma(section: &ObserverSection, r: &[usize], field: &str) -> Result<Vec<Vec<(f64, f64)>>, CliError> {
    match &section.gamma {
        Some(g) => {
            if g.len() != r.len() || g.iter().zip(r).any(|(row, &rk)| row.len() != rk) {
                return Err(cfg_err(format!("{field}.gamma must have r_k pairs for each channel (r = {r:?})")));
            }
            Ok(g.iter().map(|row| row.iter().map(|p| (p[0], p[1])).collect()).collect())
        }
        None => r
            .iter()
            .map(|&rk| {
                default_gamma(rk).ok_or_else(|| cfg_err(format!("{field}.gamma: no default for order {rk}, give it explicitly")))
            })
            .collect(),
    }
}

/// Cascade inputs `(g, κ)` and the resulting `ℓ`.
fn build_ell(section: &ObserverSection, r: &[usize], field: &str) -> Result<(Vec<f64>, Vec<f64>, f64), CliError> {
    match (&section.ell, &section.cascade) {
        (Some(_), Some(_)) => Err(cfg_err(format!(
            "{field}: both `ell` and `cascade` are present; give explicit gains with `ell` or cascade inputs with `cascade`, not both"
        ))),
        (None, None) => Err(cfg_err(format!("{field}: one of `ell` or `cascade` is required"))),
        (Some(ell), None) => {
            if ell.len() != r.len() {
                return Err(cfg_err(format!("{field}.ell has {} entries for {} channels", ell.len(), r.len())));
            }
            if let Some(k) = ell.iter().position(|l| !(*l >= 1.0 && l.is_finite())) {
                return Err(cfg_err(format!("{field}.ell[{k}] = {} must be >= 1", ell[k])));
            }
            let m = r.len();
            let mut g = vec![1.0; m];
            for i in 0..m - 1 {
                g[i] = ell[i] / ell[i + 1].powi((r[i + 1] - r[i] + 1) as i32);
            }
            Ok((ell.clone(), g, ell[m - 1]))
        }
        (None, Some(c)) => {
            let ell = elphgo::gain_design::gain_cascade(&c.g, c.kappa, r)
                .map_err(|e| cfg_err(format!("{field}.cascade: {e}")))?;
            Ok((ell, c.g.clone(), c.kappa))
        }
    }
}

fn build_region(section: &RegionSection, n: usize) -> Result<Region, CliError> {
    match section {
        RegionSection::Sublevel { form, level } => {
            let form = match form {
                FormSection::Bundled(name) if name == plants::PAPER_EXAMPLE => paper_example_lyapunov(),
                FormSection::Bundled(name) => {
                    return Err(cfg_err(format!("design.region.sublevel.form: unknown bundled form `{name}`")))
                }
                FormSection::Matrix(rows) => QuadraticForm::new(matrix(rows, n, "design.region.sublevel.form.matrix")?)
                    .ok_or_else(|| cfg_err("design.region.sublevel.form.matrix must be symmetric positive definite"))?,
            };
            if form.dim() != n {
                return Err(cfg_err(format!("design.region: form has dimension {}, state has {n}", form.dim())));
            }
            if !(*level > 0.0 && level.is_finite()) {
                return Err(cfg_err("design.region.sublevel.level must be positive"));
            }
            Ok(Region::Sublevel { form, level: *level })
        }
        RegionSection::Box { lo, hi } => {
            if lo.len() != n || hi.len() != n || lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
                return Err(cfg_err(format!("design.region.box needs lo <= hi with {n} entries each")));
            }
            Ok(Region::Box { lo: lo.clone(), hi: hi.clone() })
        }
    }
}

fn design_options(section: Option<&DesignSection>, seed: u64) -> DesignOptions {
    let d = DesignOptions::default();
    let Some(s) = section else { return DesignOptions { seed, ..d } };
    let c = &s.samples;
    DesignOptions {
        seed,
        mu0_samples: c.mu0.unwrap_or(d.mu0_samples),
        mu0_override: s.mu0,
        saturation_samples: c.saturation.unwrap_or(d.saturation_samples),
        sweep_points: c.sweep_points.unwrap_or(d.sweep_points),
        dissipation_samples: c.dissipation.unwrap_or(d.dissipation_samples),
        eta_samples: c.eta.unwrap_or(d.eta_samples),
        delta_draws: c.delta_draws.unwrap_or(d.delta_draws),
        psi_samples: c.psi.unwrap_or(d.psi_samples),
        aux: SamplingOptions { samples: c.auxiliary.unwrap_or(d.aux.samples), ..d.aux },
        kappa: s.kappa,
    }
}

impl RunConfig {
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn profile_names(&self) -> Vec<String> {
        let mut names = vec![FULL_PROFILE.to_string()];
        names.extend(self.profiles.keys().filter(|k| k.as_str() != FULL_PROFILE).cloned());
        names
    }

    fn validate(&self) -> Result<(), CliError> {
        for name in self.profile_names() {
            self.scenario(Some(&name))?;
        }
        Ok(())
    }

    /// Resolves the base sections overridden by `profile` (`None` or `"full"` is the base).
    pub fn scenario(&self, profile: Option<&str>) -> Result<Scenario, CliError> {
        let profile_name = profile.unwrap_or(FULL_PROFILE).to_string();
        let (observer, integrator, field) = match self.profiles.get(&profile_name) {
            Some(p) => (
                p.observer.as_ref().unwrap_or(&self.observer),
                p.integrator.as_ref().unwrap_or(&self.integrator),
                format!("profiles.{profile_name}"),
            ),
            None if profile_name == FULL_PROFILE => (&self.observer, &self.integrator, String::new()),
            None => {
                return Err(cfg_err(format!(
                    "unknown profile `{profile_name}` (available: {})",
                    self.profile_names().join(", ")
                )))
            }
        };
        let prefixed = |s: &str| if field.is_empty() { s.to_string() } else { format!("{field}.{s}") };

        let plant = build_plant(&self.plant)?;
        let ix = plant.indices().clone();
        let (m, n) = (ix.m(), ix.n());

        let c = &self.controller;
        let k_blocks = build_k(c, ix.r())?;
        let bhat = matrix(&c.bhat, m, "controller.bhat")?;
        let seed = self.scenario.seed;
        let region = self.design.as_ref().map(|d| build_region(&d.region, n)).transpose()?;
        let mut warnings = Vec::new();
        let controller = match c.sat_level {
            Some(l) => ControllerConfig::new(bhat, k_blocks, l, c.eps0).map_err(|e| cfg_err(format!("controller: {e}")))?,
            None => {
                let region = region
                    .as_ref()
                    .ok_or_else(|| cfg_err("controller.sat_level is required when no design region is given"))?;
                let provisional =
                    ControllerConfig::new(bhat.clone(), k_blocks, 1.0, c.eps0).map_err(|e| cfg_err(format!("controller: {e}")))?;
                let opts = design_options(self.design.as_ref(), seed);
                let mut rng = seeded_rng(seed);
                let mu0 = match opts.mu0_override {
                    Some(mu0) => mu0,
                    None => {
                        estimate_mu0(&plant, &bhat, region, opts.mu0_samples, DEFAULT_SAFETY_FACTOR, &mut rng)
                            .map_err(|e| cfg_err(format!("controller.sat_level: {e}")))?
                            .mu0
                    }
                };
                let sat = saturation_level(&plant, &provisional, region, mu0, opts.saturation_samples, &mut rng)
                    .map_err(|e| cfg_err(format!("controller.sat_level: {e}")))?;
                warnings.push(format!("saturation level computed from the design region: l = {}", sat.level));
                provisional.with_sat_level(sat.level).map_err(|e| cfg_err(format!("controller: {e}")))?
            }
        };

        let gamma = build_gamma(observer, ix.r(), &prefixed("observer"))?;
        let (ell, cascade_g, kappa) = build_ell(observer, ix.r(), &prefixed("observer"))?;
        elphgo::observer::ObserverGains::new(gamma.clone(), ell.clone())
            .map_err(|e| cfg_err(format!("{}: {e}", prefixed("observer"))))?;

        check_integrator(integrator, &prefixed("integrator"))?;

        let s = &self.scenario;
        if s.x_init.len() != n {
            return Err(cfg_err(format!("scenario.x_init has {} entries, the state has n = {n}", s.x_init.len())));
        }
        let x_init = PlantState::unflatten(&ix, &s.x_init).map_err(|e| cfg_err(format!("scenario.x_init: {e}")))?;
        let eta_init = match &s.eta_init {
            None => ObserverState::zeros(&ix),
            Some(v) if v.len() == 2 * ix.total_order() => {
                ObserverState::unflatten(&ix, v).map_err(|e| cfg_err(format!("scenario.eta_init: {e}")))?
            }
            Some(v) => {
                return Err(cfg_err(format!(
                    "scenario.eta_init has {} entries, expected {}",
                    v.len(),
                    2 * ix.total_order()
                )))
            }
        };
        let disturbances = s
            .disturbances
            .iter()
            .enumerate()
            .map(|(i, d)| {
                if d.channel == 0 || d.channel > m {
                    return Err(cfg_err(format!("scenario.disturbances[{i}].channel must lie in 1..={m}")));
                }
                Ok(Sinusoid { channel: d.channel - 1, amplitude: d.amplitude, omega: d.omega, phase: d.phase })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if s.disturbance && disturbances.is_empty() {
            return Err(cfg_err("scenario.disturbance is set but no disturbances are listed"));
        }
        if let Some(r) = &region {
            if !r.contains(&s.x_init) {
                warnings.push("scenario.x_init lies outside the design region".into());
            }
        }

        Ok(Scenario {
            name: self.name.clone().unwrap_or_else(|| "scenario".into()),
            profile: profile_name,
            plant,
            disturbances,
            disturbance_default: s.disturbance,
            controller,
            gamma,
            ell,
            cascade_g,
            kappa,
            integrator: integrator.clone(),
            x_init,
            eta_init,
            seed,
            region,
            design: design_options(self.design.as_ref(), seed),
            output: self.output.clone(),
            warnings,
        })
    }
}

fn check_integrator(s: &IntegratorSection, field: &str) -> Result<(), CliError> {
    if let DtSetting::Fixed(dt) = s.dt {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(cfg_err(format!("{field}.dt must be positive or \"auto\"")));
        }
    }
    if !(s.t_final >= 0.0 && s.t_final.is_finite()) {
        return Err(cfg_err(format!("{field}.t_final must be nonnegative")));
    }
    match (s.record_stride, s.record_interval) {
        (Some(_), Some(_)) => return Err(cfg_err(format!("{field}: give `record_stride` or `record_interval`, not both"))),
        (Some(0), None) => return Err(cfg_err(format!("{field}.record_stride must be >= 1"))),
        (None, Some(i)) if !(i > 0.0) => return Err(cfg_err(format!("{field}.record_interval must be positive"))),
        _ => {}
    }
    if s.c_stab.is_some_and(|c| !(c > 0.0)) || s.escape_radius.is_some_and(|r| !(r > 0.0)) {
        return Err(cfg_err(format!("{field}: c_stab and escape_radius must be positive")));
    }
    Ok(())
}

impl Scenario {
    pub fn plant_for(&self, perturb: bool) -> PlantModel {
        if perturb || self.disturbance_default {
            self.plant.clone().with_disturbances(self.disturbances.clone()).expect("validated channels")
        } else {
            self.plant.clone()
        }
    }

    pub fn c_stab(&self) -> f64 {
        self.integrator.c_stab.unwrap_or(DEFAULT_C_STAB)
    }

    /// Integrator settings for the observer-based loop with gains `ell`.
    pub fn closed_loop_integrator(&self, ell: &[f64]) -> IntegratorConfig {
        let bound = suggest_dt(ell, &self.gamma, self.c_stab());
        let dt = match self.integrator.dt {
            DtSetting::Fixed(dt) => dt,
            DtSetting::Keyword(DtKeyword::Auto) => bound,
        };
        self.integrator_with_dt(dt)
    }

    pub fn ideal_integrator(&self) -> IntegratorConfig {
        let dt = match self.integrator.dt {
            DtSetting::Fixed(dt) => dt,
            DtSetting::Keyword(DtKeyword::Auto) => IDEAL_AUTO_DT,
        };
        self.integrator_with_dt(dt)
    }

    fn integrator_with_dt(&self, dt: f64) -> IntegratorConfig {
        let s = &self.integrator;
        let stride = match (s.record_stride, s.record_interval) {
            (Some(k), _) => k,
            (None, interval) => ((interval.unwrap_or(DEFAULT_RECORD_INTERVAL) / dt).round() as usize).max(1),
        };
        IntegratorConfig {
            dt,
            t_final: s.t_final,
            record_stride: stride,
            c_stab: self.c_stab(),
            escape_radius: s.escape_radius.unwrap_or(DEFAULT_ESCAPE_RADIUS),
        }
    }
}
