//! Batch experiment configuration and orchestration.
//!
//! A run executes requested stages in dependency order (fields, norms,
//! solver, analyses), writes every artifact under its own output directory
//! and records a manifest with the config echo, versions, timings, artifact
//! paths and a combined content hash (timestamps and timings excluded from
//! the hash, so identical config and seed reproduce identical hashes).
//! Unknown configuration keys are rejected, never ignored.

use crate::bounds::{
    convergence_study, fit_gaussian, harnack_scan, holder_fit, mass_conservation,
    mollify_coefficients, operator_norms, FitFilter, HarnackParams, HolderWindow, Side,
};
use crate::catalog::{
    catalog_entries, sample_drift, sample_matrix, DriftSpec, MatrixSpec,
};
use crate::duhamel::{
    assemble_upper, contraction_estimate, duhamel_series, lower_diagonal, verify_lower_diagonal,
    verify_upper, DuhamelOptions, GaussianBase,
};
use crate::error::{Error, Result};
use crate::grid::{EllipticityWindow, GridSpec, SampledField};
use crate::nashfn::{aux_identities, nash_n, UpperEnvelope};
use crate::norms::{
    eta_bound, fractional_nash_norm, holomorphy_angle, kato_norm_d, kato_norm_d1,
    mollifier_stability_check, nash_norm_e, nash_norm_phi, DriftInput, GenericConstants,
    NormReport, PhiWeight,
};
use crate::quad::QuadraturePlan;
use crate::solver::{
    assemble, fundamental_solution, DeltaMode, DriftScheme, DtPolicy, Stepper,
};
use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// 0 = leave the global thread pool alone.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_node_budget")]
    pub node_budget: usize,
    pub grid: GridConfig,
    pub matrix: MatrixConfig,
    pub drift: DriftConfig,
    #[serde(default)]
    pub constants: Option<ConstantsConfig>,
    #[serde(default)]
    pub norms: Option<NormsConfig>,
    #[serde(default)]
    pub identities: Option<IdentitiesConfig>,
    #[serde(default)]
    pub solver: Option<SolverConfig>,
    #[serde(default)]
    pub nash: Option<NashConfig>,
    #[serde(default)]
    pub duhamel: Option<DuhamelConfig>,
    #[serde(default)]
    pub fits: Option<FitsConfig>,
    #[serde(default)]
    pub harnack: Option<HarnackConfig>,
    #[serde(default)]
    pub holder: Option<HolderConfig>,
    #[serde(default)]
    pub opnorms: Option<OpNormsConfig>,
    #[serde(default)]
    pub convergence: Option<ConvergenceConfig>,
    #[serde(default)]
    pub mollifier: Option<MollifierConfig>,
}

fn default_node_budget() -> usize {
    crate::grid::DEFAULT_NODE_BUDGET
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dimension: usize,
    pub half_width: f64,
    pub points_per_axis: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub kind: String,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub xi: Option<f64>,
    #[serde(default)]
    pub cell: Option<f64>,
    #[serde(default)]
    pub angle: Option<f64>,
    #[serde(default)]
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub kind: String,
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default)]
    pub exponent: Option<f64>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub positive: Option<bool>,
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    #[serde(default = "one")]
    pub resolvent_m: f64,
    #[serde(default = "one")]
    pub mu0: f64,
    #[serde(default = "one")]
    pub lambda0: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormsConfig {
    pub requests: Vec<NormRequest>,
    #[serde(default)]
    pub plan: Option<QuadraturePlan>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormRequest {
    pub functional: String,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub phi: Option<PhiWeight>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub damping: Option<f64>,
    /// Evaluate eta / the holomorphy angle from this norm (requires
    /// constants).
    #[serde(default)]
    pub derive_constants: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitiesConfig {
    #[serde(default = "default_a1")]
    pub a1_tuples: usize,
    #[serde(default = "default_ineq")]
    pub inequality_tuples: usize,
    #[serde(default = "default_a3")]
    pub a3_points: usize,
}

fn default_a1() -> usize {
    20
}
fn default_ineq() -> usize {
    10_000
}
fn default_a3() -> usize {
    1000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Source positions (nearest grid nodes are used).
    pub sources: Vec<Vec<f64>>,
    pub ladder: Vec<f64>,
    #[serde(default = "default_stepper")]
    pub stepper: Stepper,
    #[serde(default = "default_scheme")]
    pub scheme: DriftScheme,
    #[serde(default)]
    pub dt: DtPolicy,
    #[serde(default)]
    pub mollified_delta_cells: Option<f64>,
}

fn default_stepper() -> Stepper {
    Stepper::ImplicitEuler
}
fn default_scheme() -> DriftScheme {
    DriftScheme::Auto
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NashConfig {
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DuhamelConfig {
    pub lambda: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub horizon: f64,
    /// Empirical Nash-function constants (from a previous or current nash
    /// stage; required here to keep the stage self-contained).
    pub c0: f64,
    pub c0_hat: f64,
    /// Build series terms (identity-matrix base only).
    #[serde(default)]
    pub series_times: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitsConfig {
    #[serde(default)]
    pub upper_mu: Option<f64>,
    #[serde(default)]
    pub lower_mu: Option<f64>,
    #[serde(default)]
    pub min_time: f64,
    #[serde(default)]
    pub boundary_margin: f64,
    #[serde(default = "default_range_factor")]
    pub range_factor: f64,
}

fn default_range_factor() -> f64 {
    8.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnackConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub radius: f64,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolderConfig {
    pub center: Vec<f64>,
    pub radius: f64,
    pub s: f64,
    pub alpha: f64,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpNormsConfig {
    pub c6: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub eps_ladder: Vec<f64>,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifierConfig {
    pub horizon: f64,
    pub eps_ladder: Vec<f64>,
    #[serde(default = "default_mollifier_tol")]
    pub tolerance: f64,
}

fn default_mollifier_tol() -> f64 {
    1e-3
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build_grid(&self) -> Result<GridSpec> {
        GridSpec::with_node_budget(
            self.grid.dimension,
            self.grid.half_width,
            self.grid.points_per_axis,
            self.node_budget,
        )
    }

    pub fn build_matrix_spec(&self) -> Result<MatrixSpec> {
        let d = self.grid.dimension;
        let m = &self.matrix;
        match m.kind.as_str() {
            "identity" => MatrixSpec::identity(d),
            "scaled_identity" => MatrixSpec::scaled_identity(
                d,
                m.mu
                    .ok_or_else(|| Error::Config("matrix.mu required for scaled_identity".into()))?,
            ),
            "checkerboard" => MatrixSpec::checkerboard(
                d,
                m.sigma
                    .ok_or_else(|| Error::Config("matrix.sigma required for checkerboard".into()))?,
                m.xi
                    .ok_or_else(|| Error::Config("matrix.xi required for checkerboard".into()))?,
                m.cell
                    .ok_or_else(|| Error::Config("matrix.cell required for checkerboard".into()))?,
            ),
            "smooth_anisotropic" => MatrixSpec::smooth_anisotropic(
                d,
                m.sigma.ok_or_else(|| {
                    Error::Config("matrix.sigma required for smooth_anisotropic".into())
                })?,
                m.xi.ok_or_else(|| {
                    Error::Config("matrix.xi required for smooth_anisotropic".into())
                })?,
                m.angle.unwrap_or(0.5),
            ),
            other => Err(Error::Config(format!("matrix.kind: unknown kind '{other}'"))),
        }
    }

    pub fn build_drift_spec(&self) -> Result<DriftSpec> {
        let d = self.grid.dimension;
        let c = &self.drift;
        let need = |v: Option<f64>, field: &str| {
            v.ok_or_else(|| Error::Config(format!("drift.{field} required for kind '{}'", c.kind)))
        };
        match c.kind.as_str() {
            "zero" => DriftSpec::zero(d),
            "constant" => {
                DriftSpec::constant(d, need(c.amplitude, "amplitude")?, c.direction.clone())
            }
            "lp_power" => DriftSpec::lp_power(
                d,
                need(c.amplitude, "amplitude")?,
                need(c.exponent, "exponent")?,
                c.radius.unwrap_or(1.0),
            ),
            "log_refined" => DriftSpec::log_refined(
                d,
                need(c.amplitude, "amplitude")?,
                need(c.exponent, "exponent")?,
                c.direction.clone(),
            ),
            "hardy" => DriftSpec::hardy(d, need(c.delta, "delta")?, c.positive.unwrap_or(true)),
            "kato_slab" => DriftSpec::kato_slab(
                d,
                need(c.amplitude, "amplitude")?,
                need(c.exponent, "exponent")?,
                c.direction.clone(),
            ),
            "logarithmic_d" => DriftSpec::logarithmic_d(
                d,
                need(c.amplitude, "amplitude")?,
                need(c.exponent, "exponent")?,
            ),
            other => Err(Error::Config(format!("drift.kind: unknown kind '{other}'"))),
        }
    }

    pub fn build_constants(&self) -> Result<Option<GenericConstants>> {
        let Some(cc) = &self.constants else {
            return Ok(None);
        };
        let spec = self.build_matrix_spec()?;
        let (sigma, xi) = spec.bounds();
        // identity-like matrices have a degenerate window; widen marginally
        let (sigma, xi) = if sigma == xi {
            (sigma * (1.0 - 1e-9), xi * (1.0 + 1e-9))
        } else {
            (sigma, xi)
        };
        Ok(Some(GenericConstants::new(
            self.grid.dimension,
            sigma,
            xi,
            [cc.c1, cc.c2, cc.c3, cc.c4, cc.c5, cc.c6],
            cc.resolvent_m,
            cc.mu0,
            cc.lambda0,
        )?))
    }

    /// Stage-dependency and cross-field validation.
    pub fn validate(&self) -> Result<()> {
        // Catch unknown kinds and parameter gaps early.
        self.build_grid()?;
        self.build_matrix_spec()?;
        self.build_drift_spec()?;
        self.build_constants()?;
        let needs_solver: [(&str, bool); 5] = [
            ("nash", self.nash.is_some()),
            ("fits", self.fits.is_some()),
            ("harnack", self.harnack.is_some()),
            ("holder", self.holder.is_some()),
            ("opnorms", self.opnorms.is_some()),
        ];
        for (name, requested) in needs_solver {
            if requested && self.solver.is_none() {
                return Err(Error::Config(format!(
                    "analysis stage '{name}' requires a kernel table: add a [solver] section"
                )));
            }
        }
        if let Some(dh) = &self.duhamel {
            if self.constants.is_none() {
                return Err(Error::Config(
                    "duhamel stage requires a [constants] section".into(),
                ));
            }
            if !dh.series_times.is_empty() {
                let spec = self.build_matrix_spec()?;
                let (s, x) = spec.bounds();
                if s != x {
                    return Err(Error::Config(
                        "duhamel.series_times: series terms are built on a constant-coefficient \
                         base (identity or scaled identity matrix)"
                            .into(),
                    ));
                }
                if self.solver.is_none() {
                    return Err(Error::Config(
                        "duhamel.series_times requires a [solver] section for the comparison table"
                            .into(),
                    ));
                }
            }
        }
        if let Some(n) = &self.norms {
            for r in &n.requests {
                match r.functional.as_str() {
                    "nash_e" | "kato_d1" | "kato_d" => {
                        if r.horizon.is_none() {
                            return Err(Error::Config(format!(
                                "norms request '{}' needs a horizon",
                                r.functional
                            )));
                        }
                    }
                    "nash_phi" => {
                        if r.horizon.is_none() || r.phi.is_none() {
                            return Err(Error::Config(
                                "nash_phi request needs horizon and phi".into(),
                            ));
                        }
                    }
                    "nash_frac_alpha" => {
                        if r.alpha.is_none() || r.damping.is_none() {
                            return Err(Error::Config(
                                "nash_frac_alpha request needs alpha and damping".into(),
                            ));
                        }
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "norms.requests: unknown functional '{other}'"
                        )))
                    }
                }
                if r.derive_constants && self.constants.is_none() {
                    return Err(Error::Config(
                        "derive_constants requires a [constants] section".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run orchestration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub path: String,
    pub content_hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_echo: String,
    pub artifacts: Vec<ArtifactRecord>,
    /// Hash over the config echo and all artifact hashes (timings excluded).
    pub combined_hash: String,
    pub certification_failures: Vec<String>,
    pub stage_timings_ms: Vec<(String, u128)>,
}

/// Outcome of [`run`]; exit-code mapping is the caller's concern.
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest_path: PathBuf,
    pub certification_failures: Vec<String>,
}

struct ArtifactSink {
    dir: PathBuf,
    records: Vec<ArtifactRecord>,
}

impl ArtifactSink {
    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes)?;
        let mut h = DefaultHasher::new();
        bytes.hash(&mut h);
        self.records.push(ArtifactRecord {
            name: name.to_string(),
            path: path.display().to_string(),
            content_hash: format!("{:016x}", h.finish()),
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Numerical(format!("serialization failed: {e}")))?;
        self.write_bytes(name, text.as_bytes())
    }
}

/// Execute the configured stages and write artifacts plus a manifest under
/// `out_dir` (created; must not already contain a manifest).
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let manifest_path = out_dir.join("manifest.json");
    if manifest_path.exists() {
        return Err(Error::Config(format!(
            "output directory already owned by a run: {} exists",
            manifest_path.display()
        )));
    }
    if config.threads > 0 {
        // Best effort; the global pool may already be initialised.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global();
    }

    let mut sink = ArtifactSink {
        dir: out_dir.to_path_buf(),
        records: Vec::new(),
    };
    let mut timings: Vec<(String, u128)> = Vec::new();
    let mut cert_failures: Vec<String> = Vec::new();

    let grid = config.build_grid()?;
    let matrix_spec = config.build_matrix_spec()?;
    let drift_spec = config.build_drift_spec()?;
    let consts = config.build_constants()?;
    let (sigma, xi) = matrix_spec.bounds();
    let window = if sigma == xi {
        EllipticityWindow::new(sigma * (1.0 - 1e-9), xi * (1.0 + 1e-9))?
    } else {
        EllipticityWindow::new(sigma, xi)?
    };

    // Stage: fields.
    let t0 = Instant::now();
    let a_field = sample_matrix(&matrix_spec, grid)?;
    let b_field = sample_drift(&drift_spec, grid)?;
    sink.write_bytes("matrix_field.nlf", &crate::io::field_to_bytes(&a_field))?;
    sink.write_bytes("drift_field.nlf", &crate::io::field_to_bytes(&b_field))?;
    if grid.node_count() <= 100_000 {
        sink.write_bytes(
            "drift_field.csv",
            crate::io::field_to_csv(&b_field).as_bytes(),
        )?;
    }
    timings.push(("fields".into(), t0.elapsed().as_millis()));

    // Stage: norms.
    if let Some(nc) = &config.norms {
        let t0 = Instant::now();
        let plan = nc.plan.unwrap_or_default();
        let mut reports: Vec<NormReport> = Vec::new();
        let mut derived = Vec::new();
        for req in &nc.requests {
            let input = DriftInput::Spec(&drift_spec);
            let report = match req.functional.as_str() {
                "nash_e" => nash_norm_e(input, grid, req.horizon.unwrap(), &plan)?,
                "kato_d1" => kato_norm_d1(input, grid, req.horizon.unwrap(), &plan)?,
                "kato_d" => kato_norm_d(input, grid, req.horizon.unwrap(), &plan)?,
                "nash_phi" => {
                    nash_norm_phi(input, grid, req.horizon.unwrap(), req.phi.unwrap(), &plan)?
                }
                "nash_frac_alpha" => fractional_nash_norm(
                    input,
                    grid,
                    req.alpha.unwrap(),
                    req.damping.unwrap(),
                    &plan,
                )?,
                _ => unreachable!("validated"),
            };
            if req.derive_constants {
                let cs = consts.as_ref().expect("validated");
                // The derived constants use the norm at horizon h c4.
                let scaled = nash_norm_e(
                    DriftInput::Spec(&drift_spec),
                    grid,
                    req.horizon.unwrap() * cs.c4,
                    &plan,
                )?;
                let eta = eta_bound(scaled.value, req.horizon.unwrap(), cs.mu0, cs)?;
                let eta_term = (cs.c0 / (cs.sigma * cs.c4)).sqrt() * scaled.value;
                let angle = if eta_term < 1.0 {
                    Some(holomorphy_angle(eta_term, cs.resolvent_m)?)
                } else {
                    cert_failures
                        .push(format!("smallness violated: eta term {eta_term:.6} >= 1"));
                    None
                };
                if !eta.within_threshold {
                    cert_failures.push(format!(
                        "nash norm {:.6} not below the smallness threshold {:.6}",
                        scaled.value, eta.threshold
                    ));
                }
                derived.push(serde_json::json!({
                    "functional": req.functional,
                    "nash_at_h_c4": scaled.value,
                    "eta": eta,
                    "angle": angle,
                }));
            }
            reports.push(report);
        }
        sink.write_json("norm_reports.json", &reports)?;
        let mut csv = String::from(
            "functional,value,quadrature_error,verdict,horizon,switch_time\n",
        );
        for r in &reports {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        sink.write_bytes("norm_reports.csv", csv.as_bytes())?;
        if !derived.is_empty() {
            sink.write_json("derived_constants.json", &derived)?;
        }
        timings.push(("norms".into(), t0.elapsed().as_millis()));
    }

    // Stage: identities.
    if let Some(ic) = &config.identities {
        let t0 = Instant::now();
        let rep = aux_identities(
            ic.a1_tuples,
            ic.inequality_tuples,
            ic.a3_points,
            config.seed,
        )?;
        if rep.a2_violations + rep.a4_minus_violations + rep.a4_plus_violations > 0 {
            cert_failures.push(format!(
                "kernel identity violations: a2={}, a4-={}, a4+={}",
                rep.a2_violations, rep.a4_minus_violations, rep.a4_plus_violations
            ));
        }
        sink.write_json("identities.json", &rep)?;
        timings.push(("identities".into(), t0.elapsed().as_millis()));
    }

    // Stage: mollifier stability.
    if let Some(mc) = &config.mollifier {
        let t0 = Instant::now();
        let plan = config
            .norms
            .as_ref()
            .and_then(|n| n.plan)
            .unwrap_or_default();
        let rep = mollifier_stability_check(
            &drift_spec,
            grid,
            mc.horizon,
            &mc.eps_ladder,
            &plan,
            mc.tolerance,
        )?;
        if !rep.linear_bound_ok {
            cert_failures.push("mollifier excess exceeds the fitted linear bound".into());
        }
        sink.write_json("mollifier_stability.json", &rep)?;
        timings.push(("mollifier".into(), t0.elapsed().as_millis()));
    }

    // Stage: solver.
    let mut table = None;
    if let Some(sc) = &config.solver {
        let t0 = Instant::now();
        let op = assemble(&a_field, &b_field, grid, window, sc.scheme)?;
        let sources: Vec<usize> = sc.sources.iter().map(|p| grid.nearest_node(p)).collect();
        let delta_mode = match sc.mollified_delta_cells {
            Some(w) => DeltaMode::Mollified { width_cells: w },
            None => DeltaMode::Raw,
        };
        let tb = fundamental_solution(&op, &sources, &sc.ladder, sc.dt, sc.stepper, delta_mode)?;
        sink.write_bytes("kernel_table.nlkt", &crate::io::table_to_bytes(&tb))?;
        sink.write_bytes(
            "kernel_diagnostics.csv",
            crate::io::table_diagnostics_csv(&tb).as_bytes(),
        )?;
        let mass = mass_conservation(tb.diagnostics());
        if let Some(bad) = mass.iter().find(|m| !m.pass) {
            cert_failures.push(format!(
                "mass conservation failed at t={}: deviation {:.3e}",
                bad.time, bad.deviation
            ));
        }
        sink.write_json("mass_conservation.json", &mass)?;
        table = Some(tb);
        timings.push(("solver".into(), t0.elapsed().as_millis()));
    }

    // Stage: nash functions.
    let mut nash_c0 = None;
    if let Some(nc) = &config.nash {
        let t0 = Instant::now();
        let tb = table.as_ref().expect("validated");
        let trace = nash_n(tb, &a_field, window, nc.delta, None)?;
        nash_c0 = Some(trace.empirical_c0);
        sink.write_bytes("nash_trace.csv", trace.csv().as_bytes())?;
        sink.write_json(
            "nash_summary.json",
            &serde_json::json!({
                "delta": nc.delta,
                "empirical_c0": trace.empirical_c0,
                "points": trace.points.len(),
            }),
        )?;
        timings.push(("nash".into(), t0.elapsed().as_millis()));
    }

    // Stage: duhamel.
    if let Some(dc) = &config.duhamel {
        let t0 = Instant::now();
        let cs = consts.as_ref().expect("validated");
        let plan = config
            .norms
            .as_ref()
            .and_then(|n| n.plan)
            .unwrap_or_default();
        let contraction = contraction_estimate(
            DriftInput::Spec(&drift_spec),
            grid,
            cs,
            dc.lambda,
            dc.delta,
            dc.epsilon,
            dc.horizon,
            dc.c0,
            dc.c0_hat,
            &plan,
        )?;
        sink.write_json("contraction.json", &contraction)?;
        if !contraction.below_one {
            cert_failures.push(format!(
                "contraction constant {:.6} >= 1: no series certificate",
                contraction.c_hat
            ));
        } else {
            let upper = assemble_upper(contraction.c_hat, cs.c3, dc.lambda, dc.horizon)?;
            sink.write_json("upper_certificate.json", &upper)?;
            match lower_diagonal(contraction.c_hat, cs, dc.horizon) {
                Ok(lower) => {
                    sink.write_json("lower_diagonal.json", &lower)?;
                    if let Some(tb) = table.as_ref() {
                        let vu = verify_upper(&upper, tb);
                        let vl = verify_lower_diagonal(&lower, tb);
                        if vu.violations > 0 {
                            cert_failures.push(format!(
                                "upper envelope violated on {} of {} samples",
                                vu.violations, vu.samples
                            ));
                        }
                        if vl.violations > 0 {
                            cert_failures.push(format!(
                                "lower diagonal bound violated on {} of {} samples",
                                vl.violations, vl.samples
                            ));
                        }
                        sink.write_json(
                            "certificate_verification.json",
                            &serde_json::json!({"upper": vu, "lower": vl}),
                        )?;
                    }
                }
                Err(Error::NoCertificate(msg)) => {
                    cert_failures.push(format!("lower diagonal: {msg}"));
                }
                Err(e) => return Err(e),
            }
        }
        if !dc.series_times.is_empty() {
            let (s, _x) = matrix_spec.bounds();
            let base = GaussianBase::new(grid, s, grid.center_index())?;
            let series = duhamel_series(
                &base,
                &b_field,
                &dc.series_times,
                cs.c4,
                &DuhamelOptions::default(),
            )?;
            sink.write_bytes("duhamel_series.csv", series.diagnostics_csv().as_bytes())?;
        }
        timings.push(("duhamel".into(), t0.elapsed().as_millis()));
    }
    let _ = nash_c0;

    // Stage: envelope fits.
    let mut fitted_upper: Option<UpperEnvelope> = None;
    if let Some(fc) = &config.fits {
        let t0 = Instant::now();
        let tb = table.as_ref().expect("validated");
        let filter = FitFilter {
            min_time: fc.min_time,
            boundary_margin: fc.boundary_margin,
            range_factor: fc.range_factor,
            value_floor_rel: 1e-11,
        };
        let mut out = serde_json::Map::new();
        if let Some(mu) = fc.upper_mu {
            match fit_gaussian(tb, Side::Upper, mu, window, filter) {
                Ok(fit) => {
                    if fit.residual > 0.0 {
                        cert_failures.push("upper envelope scan has violations".into());
                    }
                    fitted_upper = Some(UpperEnvelope {
                        multiplier: fit.multiplier,
                        mu: fit.mu,
                        rate: fit.rate,
                    });
                    out.insert("upper".into(), serde_json::to_value(fit).unwrap());
                }
                Err(Error::NoCertificate(msg)) | Err(Error::Input(msg)) => {
                    cert_failures.push(format!("upper envelope fit failed: {msg}"));
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(mu) = fc.lower_mu {
            match fit_gaussian(tb, Side::Lower, mu, window, filter) {
                Ok(fit) => {
                    if fit.residual > 0.0 {
                        cert_failures.push("lower envelope scan has violations".into());
                    }
                    out.insert("lower".into(), serde_json::to_value(fit).unwrap());
                }
                Err(Error::NoCertificate(msg)) | Err(Error::Input(msg)) => {
                    cert_failures.push(format!("lower envelope fit failed: {msg}"));
                }
                Err(e) => return Err(e),
            }
        }
        sink.write_json("gaussian_fits.json", &out)?;
        timings.push(("fits".into(), t0.elapsed().as_millis()));
    }
    let _ = fitted_upper;

    // Stage: harnack.
    if let Some(hc) = &config.harnack {
        let t0 = Instant::now();
        let tb = table.as_ref().expect("validated");
        let params = HarnackParams {
            alpha: hc.alpha,
            beta: hc.beta,
            gamma: hc.gamma,
            radius: hc.radius,
        };
        let rep = harnack_scan(tb, 0, params, hc.stride)?;
        let rep2 = harnack_scan(tb, 0, params, (hc.stride / 2).max(1))?;
        let drift = (rep2.k - rep.k).abs() / rep.k;
        sink.write_json(
            "harnack.json",
            &serde_json::json!({"scan": rep, "denser": rep2, "relative_drift": drift}),
        )?;
        timings.push(("harnack".into(), t0.elapsed().as_millis()));
    }

    // Stage: holder.
    if let Some(hc) = &config.holder {
        let t0 = Instant::now();
        let tb = table.as_ref().expect("validated");
        let mut center = [0.0; 3];
        for (k, &v) in hc.center.iter().take(3).enumerate() {
            center[k] = v;
        }
        let rep = holder_fit(
            tb,
            0,
            HolderWindow {
                center,
                radius: hc.radius,
                s: hc.s,
                alpha: hc.alpha,
            },
            hc.stride,
        )?;
        if let Some(beta) = rep.beta {
            if !(0.0 < beta) || rep.r_squared < 0.9 {
                cert_failures.push(format!(
                    "holder fit out of range: beta={beta:.4}, R2={:.4}",
                    rep.r_squared
                ));
            }
        }
        sink.write_json("holder.json", &rep)?;
        timings.push(("holder".into(), t0.elapsed().as_millis()));
    }

    // Stage: operator norms.
    if let Some(oc) = &config.opnorms {
        let t0 = Instant::now();
        let tb = table.as_ref().expect("validated");
        let trace = operator_norms(tb, oc.c6)?;
        let mut csv = String::from("t,grad_l1,sqrt_t_grad\n");
        for i in 0..trace.times.len() {
            csv.push_str(&format!(
                "{:.16e},{:.16e},{:.16e}\n",
                trace.times[i], trace.grad_l1[i], trace.sqrt_t_grad[i]
            ));
        }
        sink.write_bytes("operator_norms.csv", csv.as_bytes())?;
        sink.write_json(
            "operator_norms.json",
            &serde_json::json!({
                "dt_envelope_c5": trace.dt_envelope_c5,
                "c6": trace.c6,
            }),
        )?;
        timings.push(("opnorms".into(), t0.elapsed().as_millis()));
    }

    // Stage: convergence study.
    if let Some(cc) = &config.convergence {
        let t0 = Instant::now();
        let mut ops = Vec::new();
        for &eps in &cc.eps_ladder {
            let (a_eps, b_eps) = mollify_coefficients(&a_field, &b_field, eps, eps)?;
            ops.push(assemble(&a_eps, &b_eps, grid, window, DriftScheme::Auto)?);
        }
        let datum = SampledField::from_scalar_fn(grid, |x| {
            (-x.iter().map(|v| v * v).sum::<f64>()).exp()
        })?;
        let policy = config.solver.as_ref().map(|s| s.dt).unwrap_or_default();
        let rep = convergence_study(&ops, &[datum], &cc.times, policy, Stepper::ImplicitEuler)?;
        for oks in &rep.cauchy_ok {
            if oks.iter().any(|ok| !ok) {
                cert_failures.push("convergence study: distances not Cauchy within noise".into());
            }
        }
        sink.write_json("convergence.json", &rep)?;
        timings.push(("convergence".into(), t0.elapsed().as_millis()));
    }

    // Manifest.
    let config_echo = toml::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("config echo failed: {e}")))?;
    let mut h = DefaultHasher::new();
    config_echo.hash(&mut h);
    for rec in &sink.records {
        rec.content_hash.hash(&mut h);
    }
    let manifest = Manifest {
        tool_version: crate::version().to_string(),
        config_echo,
        artifacts: sink.records.clone(),
        combined_hash: format!("{:016x}", h.finish()),
        certification_failures: cert_failures.clone(),
        stage_timings_ms: timings,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Numerical(format!("manifest serialization failed: {e}")))?;
    std::fs::write(&manifest_path, text)?;

    Ok(RunOutcome {
        manifest_path,
        certification_failures: cert_failures,
    })
}

/// Text or JSON catalog listing, optionally filtered by dimension.
pub fn list_catalog(json: bool, dimension: Option<usize>) -> String {
    let entries: Vec<_> = catalog_entries()
        .into_iter()
        .filter(|e| match dimension {
            None => true,
            Some(d) => match e.dimensions {
                "1..3" => (1..=3).contains(&d),
                "3" => d == 3,
                _ => true,
            },
        })
        .collect();
    if json {
        serde_json::to_string_pretty(&entries).unwrap()
    } else {
        let mut out = format!(
            "{:<18} {:<7} {:<38} {:<22} {}\n",
            "name", "family", "parameters", "admissible", "notes"
        );
        for e in &entries {
            out.push_str(&format!(
                "{:<18} {:<7} {:<38} {:<22} {}\n",
                e.name, e.family, e.parameters, e.admissible, e.notes
            ));
        }
        out
    }
}

/// A small full-battery preset: checkerboard matrix with a refined-log drift
/// in d = 2, norms, solver, fits, Harnack, Hölder, operator norms and the
/// convergence study.
pub fn paper_suite_config() -> ExperimentConfig {
    let toml_text = r#"
seed = 7
[grid]
dimension = 2
half_width = 3.0
points_per_axis = 81

[matrix]
kind = "checkerboard"
sigma = 1.0
xi = 4.0
cell = 0.5

[drift]
kind = "log_refined"
amplitude = 0.05
exponent = 1.0

[constants]
c1 = 0.2
c2 = 0.8
c3 = 2.5
c4 = 4.4
c5 = 2.0
c6 = 4.4

[norms]
requests = [
  { functional = "nash_e", horizon = 0.2, derive_constants = true },
  { functional = "kato_d1", horizon = 0.2 },
  { functional = "kato_d", horizon = 0.2 },
]

[identities]

[solver]
sources = [[0.0, 0.0]]
ladder = [0.06, 0.066, 0.0726, 0.08, 0.088, 0.0968, 0.1064, 0.1171, 0.1288, 0.1417, 0.1558, 0.1714, 0.1885, 0.2074, 0.2281, 0.2509]

[fits]
upper_mu = 4.4
lower_mu = 0.8
min_time = 0.06
boundary_margin = 0.4

[harnack]
alpha = 0.35
beta = 0.8
gamma = 0.5
radius = 0.42
stride = 3

[holder]
center = [0.3, 0.2]
radius = 0.4
s = 0.22
alpha = 0.4
stride = 3

[opnorms]
c6 = 4.4

[convergence]
eps_ladder = [0.04, 0.02, 0.01, 0.005]
times = [0.05, 0.1, 0.2]
"#;
    ExperimentConfig::from_toml(toml_text).expect("preset config is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_runs_and_reproduces() {
        let toml_text = r#"
seed = 3
[grid]
dimension = 2
half_width = 2.0
points_per_axis = 33
[matrix]
kind = "identity"
[drift]
kind = "zero"
[norms]
requests = [{ functional = "nash_e", horizon = 0.5 }]
"#;
        let cfg = ExperimentConfig::from_toml(toml_text).unwrap();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let out1 = run(&cfg, dir1.path()).unwrap();
        let out2 = run(&cfg, dir2.path()).unwrap();
        assert!(out1.certification_failures.is_empty());
        let m1: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&out1.manifest_path).unwrap()).unwrap();
        let m2: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&out2.manifest_path).unwrap()).unwrap();
        assert_eq!(m1["combined_hash"], m2["combined_hash"]);
        // zero drift: the norm report carries value 0
        let reports: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir1.path().join("norm_reports.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(reports[0]["value"], 0.0);
    }

    #[test]
    fn unknown_keys_and_kinds_are_config_errors() {
        let bad_key = r#"
[grid]
dimension = 2
half_width = 2.0
points_per_axis = 33
unknown_field = 1
[matrix]
kind = "identity"
[drift]
kind = "zero"
"#;
        assert!(matches!(
            ExperimentConfig::from_toml(bad_key),
            Err(Error::Config(_))
        ));
        let bad_kind = r#"
[grid]
dimension = 2
half_width = 2.0
points_per_axis = 33
[matrix]
kind = "identity"
[drift]
kind = "vortex"
"#;
        let err = ExperimentConfig::from_toml(bad_kind).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("drift.kind"), "message: {msg}");
    }

    #[test]
    fn analysis_without_solver_fails_fast() {
        let toml_text = r#"
[grid]
dimension = 2
half_width = 2.0
points_per_axis = 33
[matrix]
kind = "identity"
[drift]
kind = "zero"
[harnack]
alpha = 0.3
beta = 0.8
gamma = 0.5
radius = 0.4
"#;
        let err = ExperimentConfig::from_toml(toml_text).unwrap_err();
        assert!(err.to_string().contains("requires a kernel table"));
    }

    #[test]
    fn catalog_listing_formats() {
        let text = list_catalog(false, None);
        assert!(text.contains("hardy"));
        assert!(text.contains("checkerboard"));
        let json = list_catalog(true, Some(2));
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(parsed.as_array().unwrap().iter().all(|e| e["name"] != "hardy"));
    }
}
