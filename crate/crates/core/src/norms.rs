//! Drift-class functionals with controlled quadrature: the Nash norm, the
//! two Kato norms, the weighted and fractional variants, plus the derived
//! constants (eta, the smallness threshold, the holomorphy angle), the
//! form-bound envelope and the mollifier stability check.
//!
//! Every functional has the shape
//! `sup_x int_0^h F(e^{mu t Delta} |b|^p (x)) w(t) dt`. The time axis splits
//! at the grid's resolved scale: above it the heat transform is the discrete
//! convolution, below it the integrand freezes at the cell value, except at
//! the singular anchor of a catalog field, where the semi-analytic profile
//! reduction continues the integral down to zero with dyadic shells and an
//! explicit finite/divergent classification. The `sup` is a grid max and is
//! reported as such, never extrapolated.

use crate::catalog::{
    heat_profile_at_anchor, sample_magnitude_power, DriftKind, DriftSpec, Singularity,
};
use crate::error::{Error, Result};
use crate::grid::{FieldRank, GridSpec, SampledField};
use crate::heat::{heat_convolve, min_resolved_time, mollify, truncate, CutoffParams};
use crate::quad::{dyadic_singular, gauss_legendre, DyadicOptions, QuadraturePlan, SingularVerdict};
use serde::{Deserialize, Serialize};

/// Which drift functional a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    NashE,
    KatoD1,
    KatoD,
    NashPhi,
    NashFracAlpha,
}

/// Weight family for the weighted Nash norm: `phi(t) = t^theta` or
/// `phi(t) = t^theta |log t|^{-beta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiWeight {
    pub theta: f64,
    #[serde(default)]
    pub log_beta: f64,
}

impl PhiWeight {
    pub fn new(theta: f64, log_beta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::input(format!(
                "phi weight requires theta in (0, 1], got {theta}"
            )));
        }
        if log_beta < 0.0 {
            return Err(Error::input("phi log exponent must be nonnegative"));
        }
        Ok(PhiWeight { theta, log_beta })
    }

    pub fn value(&self, t: f64) -> f64 {
        let base = t.powf(self.theta);
        if self.log_beta == 0.0 {
            base
        } else {
            base * t.ln().abs().powf(-self.log_beta)
        }
    }

    /// Numerical admissibility: `phi(0) = 0` by construction, and
    /// `phi(t)/t` must be integrable on `(0, 1]`.
    pub fn check_admissible(&self) -> Result<f64> {
        let w = *self;
        let r = dyadic_singular(move |t| w.value(t) / t, 1.0, DyadicOptions::default());
        if r.is_divergent() {
            Err(Error::input(format!(
                "weight phi(t)=t^{} |log t|^-{} fails the phi(t)/t integrability test",
                self.theta, self.log_beta
            )))
        } else {
            Ok(r.value)
        }
    }

    /// `int_0^h phi(t)/t dt` with verdict (the Cauchy-Schwarz bridge factor).
    pub fn phi_over_t_integral(&self, h: f64) -> crate::quad::SingularIntegral {
        let w = *self;
        dyadic_singular(move |t| w.value(t) / t, h, DyadicOptions::default())
    }
}

/// Value + quadrature error + finiteness verdict of a drift functional.
#[derive(Debug, Clone, Serialize)]
pub struct NormReport {
    pub functional: Functional,
    pub value: f64,
    pub quadrature_error: f64,
    pub verdict: SingularVerdict,
    /// Time horizon of the integral.
    pub horizon: f64,
    /// Heat-flow diffusivity used inside the transform (1 unless rescaled).
    pub heat_mu: f64,
    /// Switch time below which the integrand is frozen or continued
    /// analytically.
    pub switch_time: f64,
    /// Node index attaining the grid sup.
    pub sup_node: usize,
    /// True when the small-time freeze used raw sampled cell values (purely
    /// sampled field without closed-form data).
    pub raw_small_time_freeze: bool,
    /// Values of the refinement ladder (last entry = reported value).
    pub refinement_ladder: Vec<f64>,
    /// Optional weight / order parameters.
    pub phi: Option<PhiWeight>,
    pub alpha: Option<f64>,
    pub damping_mu: Option<f64>,
}

impl NormReport {
    pub fn is_divergent_report(&self) -> bool {
        self.verdict == SingularVerdict::NumericallyDivergent
    }

    /// Single CSV row: functional, value, error, verdict, horizon, switch.
    pub fn csv_row(&self) -> String {
        format!(
            "{:?},{:.17e},{:.17e},{:?},{:.17e},{:.17e}",
            self.functional,
            self.value,
            self.quadrature_error,
            self.verdict,
            self.horizon,
            self.switch_time
        )
    }
}

/// A drift given either analytically (catalog spec) or as vector samples.
#[derive(Debug, Clone, Copy)]
pub enum DriftInput<'a> {
    Spec(&'a DriftSpec),
    Field(&'a SampledField),
}

impl<'a> DriftInput<'a> {
    fn magnitude_power(&self, grid: GridSpec, power: u32) -> Result<(SampledField, bool, f64)> {
        match self {
            DriftInput::Spec(spec) => {
                let s = sample_magnitude_power(spec, grid, power)?;
                Ok((s.field, s.divergent, s.error))
            }
            DriftInput::Field(f) => {
                if f.grid() != grid {
                    return Err(Error::input("sampled drift grid does not match request"));
                }
                if f.rank() != FieldRank::Vector {
                    return Err(Error::input("sampled drift must be a vector field"));
                }
                let m = if power == 1 {
                    f.magnitude()
                } else {
                    f.magnitude_squared()
                };
                Ok((m, false, 0.0))
            }
        }
    }

    fn spec(&self) -> Option<&DriftSpec> {
        match self {
            DriftInput::Spec(s) => Some(s),
            DriftInput::Field(_) => None,
        }
    }
}

/// Internal description of one functional's integrand.
struct FunctionalShape {
    functional: Functional,
    /// Magnitude power fed to the heat flow (1 or 2).
    power: u32,
    /// Apply sqrt to the heat transform before weighting.
    outer_sqrt: bool,
    /// Time weight w(t).
    weight: WeightKind,
}

#[derive(Clone, Copy)]
enum WeightKind {
    InvSqrtT,
    One,
    Phi(PhiWeight),
    FracExp { alpha: f64, mu: f64 },
}

impl WeightKind {
    fn eval(&self, t: f64) -> f64 {
        match self {
            WeightKind::InvSqrtT => t.sqrt().recip(),
            WeightKind::One => 1.0,
            WeightKind::Phi(phi) => phi.value(t).recip(),
            WeightKind::FracExp { alpha, mu } => (-mu * t).exp() * t.powf((alpha - 3.0) / 2.0),
        }
    }
}

/// `n_e(b, h) = sup_x int_0^h sqrt(e^{t Delta} |b|^2 (x)) dt / sqrt(t)`.
pub fn nash_norm_e(
    input: DriftInput,
    grid: GridSpec,
    h: f64,
    plan: &QuadraturePlan,
) -> Result<NormReport> {
    evaluate_functional(
        input,
        grid,
        h,
        1.0,
        plan,
        FunctionalShape {
            functional: Functional::NashE,
            power: 2,
            outer_sqrt: true,
            weight: WeightKind::InvSqrtT,
        },
    )
}

/// Rescaled Nash integral `sup_x int_0^h sqrt(e^{mu t Delta}|b|^2) dt/sqrt(t)`,
/// which equals `n_e(b, mu h)/sqrt(mu)`; used by the contraction estimate.
pub fn nash_norm_e_scaled(
    input: DriftInput,
    grid: GridSpec,
    h: f64,
    mu: f64,
    plan: &QuadraturePlan,
) -> Result<NormReport> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::input("heat rescaling must be positive"));
    }
    evaluate_functional(
        input,
        grid,
        h,
        mu,
        plan,
        FunctionalShape {
            functional: Functional::NashE,
            power: 2,
            outer_sqrt: true,
            weight: WeightKind::InvSqrtT,
        },
    )
}

/// `kappa_{d+1}(b, h) = sup_x int_0^h e^{t Delta} |b| (x) dt / sqrt(t)`.
pub fn kato_norm_d1(
    input: DriftInput,
    grid: GridSpec,
    h: f64,
    plan: &QuadraturePlan,
) -> Result<NormReport> {
    evaluate_functional(
        input,
        grid,
        h,
        1.0,
        plan,
        FunctionalShape {
            functional: Functional::KatoD1,
            power: 1,
            outer_sqrt: false,
            weight: WeightKind::InvSqrtT,
        },
    )
}

/// `kappa_d(b, h) = sup_x int_0^h e^{t Delta} |b|^2 (x) dt`.
pub fn kato_norm_d(
    input: DriftInput,
    grid: GridSpec,
    h: f64,
    plan: &QuadraturePlan,
) -> Result<NormReport> {
    evaluate_functional(
        input,
        grid,
        h,
        1.0,
        plan,
        FunctionalShape {
            functional: Functional::KatoD,
            power: 2,
            outer_sqrt: false,
            weight: WeightKind::One,
        },
    )
}

/// `n_phi(b, h) = sup_x int_0^h e^{t Delta} |b|^2 (x) dt / phi(t)`.
pub fn nash_norm_phi(
    input: DriftInput,
    grid: GridSpec,
    h: f64,
    phi: PhiWeight,
    plan: &QuadraturePlan,
) -> Result<NormReport> {
    phi.check_admissible()?;
    evaluate_functional(
        input,
        grid,
        h,
        1.0,
        plan,
        FunctionalShape {
            functional: Functional::NashPhi,
            power: 2,
            outer_sqrt: false,
            weight: WeightKind::Phi(phi),
        },
    )
}

/// Fractional-order norm
/// `sup_y int_0^inf e^{-mu t} sqrt(e^{t Delta}|b|^2(y)) dt / t^{(3-alpha)/2}`,
/// truncated where the damping factor falls below 1e-16 (tail reported in the
/// error budget).
pub fn fractional_nash_norm(
    input: DriftInput,
    grid: GridSpec,
    alpha: f64,
    mu: f64,
    plan: &QuadraturePlan,
) -> Result<NormReport> {
    if !(alpha > 1.0 && alpha < 2.0) {
        return Err(Error::input(format!(
            "fractional order must satisfy 1 < alpha < 2, got {alpha}"
        )));
    }
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::input("fractional damping rate must be positive"));
    }
    let horizon = -(1e-16f64.ln()) / mu;
    evaluate_functional(
        input,
        grid,
        horizon,
        1.0,
        plan,
        FunctionalShape {
            functional: Functional::NashFracAlpha,
            power: 2,
            outer_sqrt: true,
            weight: WeightKind::FracExp { alpha, mu },
        },
    )
}

fn evaluate_functional(
    input: DriftInput,
    grid: GridSpec,
    horizon: f64,
    heat_mu: f64,
    plan: &QuadraturePlan,
    shape: FunctionalShape,
) -> Result<NormReport> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::input("norm horizon must be positive"));
    }
    let (alpha, damping_mu, phi) = match shape.weight {
        WeightKind::FracExp { alpha, mu } => (Some(alpha), Some(mu), None),
        WeightKind::Phi(p) => (None, None, Some(p)),
        _ => (None, None, None),
    };

    // Exact path for spatially constant catalog fields: the heat transform
    // is the identity on constants, so the whole integral reduces to the
    // weight integral.
    if let Some(spec) = input.spec() {
        if matches!(spec.kind, DriftKind::Zero | DriftKind::Constant) {
            let g0 = spec.amplitude.powi(shape.power as i32);
            let f0 = apply_outer(g0, shape.outer_sqrt);
            let w = shape.weight;
            // Dyadic shells belong to the singularity-dominated range; the
            // smooth remainder of a long horizon goes to adaptive panels.
            let split = horizon.min(1.0);
            let mut integral = dyadic_singular(move |t| w.eval(t), split, DyadicOptions::default());
            if split < horizon && !integral.is_divergent() {
                let (smooth, err) = crate::quad::adaptive_gl(
                    |t| w.eval(t),
                    split,
                    horizon,
                    1e-12 * integral.value.abs().max(1e-30),
                );
                integral.value += smooth;
                integral.error += err;
            }
            let (value, verdict) = if f0 == 0.0 {
                (0.0, SingularVerdict::Finite)
            } else {
                (f0 * integral.value, integral.verdict)
            };
            return Ok(NormReport {
                functional: shape.functional,
                value,
                quadrature_error: f0 * integral.error,
                verdict,
                horizon,
                heat_mu,
                switch_time: horizon,
                sup_node: grid.center_index(),
                raw_small_time_freeze: false,
                refinement_ladder: vec![value],
                phi,
                alpha,
                damping_mu,
            });
        }
    }

    let (b_pow, samples_divergent, sample_err) = input.magnitude_power(grid, shape.power)?;
    let t_switch = min_resolved_time(grid, heat_mu);
    if t_switch >= horizon {
        return Err(Error::resolution(
            format!("horizon {horizon} is below the grid's resolved time {t_switch}"),
            Some(t_switch),
        ));
    }

    // The grid part cannot run past the time at which the kernel no longer
    // fits the box at all (center in-box mass erf(L/sqrt(4 mu t)) at one
    // sigma); beyond it the transform is bounded analytically and the bound
    // goes into the reported error budget. Leakage inside the range is
    // tracked separately per quadrature node.
    let l = grid.half_width();
    let t_box = l * l / (4.0 * heat_mu);
    let t_grid_max = horizon.min(t_box.max(2.0 * t_switch));

    let mut ladder: Vec<f64> = Vec::new();
    let mut leak_err = 0.0;
    let mut n_nodes = plan.base_nodes;
    let mut totals: Vec<f64> = Vec::new();
    for _ in 0..=plan.max_refinements {
        let (tot, leak) =
            grid_part_all(&b_pow, grid, t_switch, t_grid_max, heat_mu, n_nodes, &shape)?;
        let v = tot.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        totals = tot;
        leak_err = leak;
        ladder.push(v);
        if ladder.len() >= 2 {
            let prev = ladder[ladder.len() - 2];
            if (v - prev).abs() <= plan.rel_tol * v.abs().max(1e-300) {
                break;
            }
        }
        n_nodes *= 2;
    }
    let grid_quad_err = if ladder.len() >= 2 {
        (ladder[ladder.len() - 1] - ladder[ladder.len() - 2]).abs()
    } else {
        0.0
    };

    // Small-time completion: frozen cell value times the exact weight
    // integral over (0, t_switch].
    let w = shape.weight;
    let small_weight = dyadic_singular(move |t| w.eval(t), t_switch, DyadicOptions::default());
    let mut verdict = if samples_divergent {
        SingularVerdict::NumericallyDivergent
    } else {
        SingularVerdict::Finite
    };
    let raw_freeze = matches!(input, DriftInput::Field(_));

    let mut small: Vec<f64> = Vec::with_capacity(totals.len());
    for idx in 0..totals.len() {
        let g0 = b_pow.at(idx);
        if g0 == 0.0 {
            small.push(0.0);
        } else {
            if small_weight.is_divergent() {
                verdict = SingularVerdict::NumericallyDivergent;
            }
            small.push(apply_outer(g0, shape.outer_sqrt) * small_weight.value);
        }
    }

    // Anchor continuation for singular catalog fields: replace the frozen
    // small part at the anchor node by the profile-reduced integral, which
    // can certify divergence.
    let mut anchor_err = 0.0;
    if let Some(spec) = input.spec() {
        if spec.singularity() != Singularity::None {
            let anchor = grid.center_index();
            let probe = heat_profile_at_anchor(spec, shape.power, 0.5 * t_switch * heat_mu);
            match probe {
                Some(p) if p.is_divergent() => {
                    verdict = SingularVerdict::NumericallyDivergent;
                }
                Some(_) => {
                    let spec2 = spec.clone();
                    let pw = shape.power;
                    let sqrt_outer = shape.outer_sqrt;
                    let hm = heat_mu;
                    let anchor_integral = dyadic_singular(
                        move |t| match heat_profile_at_anchor(&spec2, pw, hm * t) {
                            Some(p) if !p.is_divergent() => {
                                apply_outer(p.value, sqrt_outer) * w.eval(t)
                            }
                            _ => f64::INFINITY,
                        },
                        t_switch,
                        DyadicOptions::default(),
                    );
                    if anchor_integral.is_divergent() {
                        verdict = SingularVerdict::NumericallyDivergent;
                    }
                    anchor_err = anchor_integral.error;
                    small[anchor] = anchor_integral.value;
                }
                None => {}
            }
        }
    }

    let mut best = f64::NEG_INFINITY;
    let mut best_node = grid.center_index();
    for (idx, (&t, &s)) in totals.iter().zip(small.iter()).enumerate() {
        let tot = t + s;
        if tot > best {
            best = tot;
            best_node = idx;
        }
    }

    // Truncated tail beyond the grid range (fractional norm with a long
    // horizon): bound e^{t Delta}|b|^p <= min(max, (4 pi mu t)^{-d/2} L1).
    let mut tail_err = 0.0;
    if t_grid_max < horizon {
        let d = grid.dimension() as f64;
        let l1: f64 = b_pow.values().iter().map(|v| v.abs()).sum::<f64>() * grid.cell_volume();
        let vmax = b_pow.max_value();
        let (tail, _) = crate::quad::adaptive_gl(
            |t| {
                let bound =
                    vmax.min((4.0 * std::f64::consts::PI * heat_mu * t).powf(-d / 2.0) * l1);
                apply_outer(bound, shape.outer_sqrt) * w.eval(t)
            },
            t_grid_max,
            horizon,
            1e-10,
        );
        tail_err = tail;
    }

    ladder.push(best);
    Ok(NormReport {
        functional: shape.functional,
        value: best,
        quadrature_error: grid_quad_err
            + leak_err
            + sample_err
            + anchor_err
            + tail_err
            + small_weight.error * apply_outer(b_pow.max_value(), shape.outer_sqrt),
        verdict,
        horizon,
        heat_mu,
        switch_time: t_switch,
        sup_node: best_node,
        raw_small_time_freeze: raw_freeze,
        refinement_ladder: ladder,
        phi,
        alpha,
        damping_mu,
    })
}

fn apply_outer(v: f64, sqrt: bool) -> f64 {
    if sqrt {
        v.max(0.0).sqrt()
    } else {
        v
    }
}

/// Per-node grid-part integrals over `[t_lo, t_hi]` using the substitution
/// `t = s^2` and Gauss-Legendre in `s`. One heat convolution per quadrature
/// node serves every grid node.
fn grid_part_all(
    b_pow: &SampledField,
    grid: GridSpec,
    t_lo: f64,
    t_hi: f64,
    heat_mu: f64,
    n_quad: usize,
    shape: &FunctionalShape,
) -> Result<(Vec<f64>, f64)> {
    let (gl_nodes, gl_weights) = gauss_legendre(n_quad);
    let s_lo = t_lo.sqrt();
    let s_hi = t_hi.sqrt();
    let mid = 0.5 * (s_lo + s_hi);
    let half = 0.5 * (s_hi - s_lo);
    let mut totals = vec![0.0f64; grid.node_count()];
    let mut leak_bound = 0.0f64;
    let max_pow = b_pow.max_value();
    for (xq, wq) in gl_nodes.iter().zip(gl_weights) {
        let s = mid + half * xq;
        let t = s * s;
        let conv = heat_convolve(b_pow, t, heat_mu)?;
        let w_total = wq * half * 2.0 * s * shape.weight.eval(t);
        let vals = conv.field.component(0);
        use rayon::prelude::*;
        totals
            .par_iter_mut()
            .zip(vals.par_iter())
            .for_each(|(tot, &v)| {
                *tot += w_total * apply_outer(v, shape.outer_sqrt);
            });
        // What truncation could have removed at the sup node, bounded by the
        // max field value times the lost kernel mass.
        leak_bound += w_total * apply_outer(conv.max_leakage() * max_pow, shape.outer_sqrt);
    }
    Ok((totals, leak_bound))
}

// ---------------------------------------------------------------------------
// Generic constants and derived quantities
// ---------------------------------------------------------------------------

/// The constant set of the two-sided kernel bounds `c1 k_{c2} <= p <= c3 k_{c4}`
/// and `t |dt p| <= c5 k_{c6}`, with the derived `c0 = 2 c3 c5 + d/2` and the
/// resolvent constant `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenericConstants {
    pub dimension: usize,
    pub sigma: f64,
    pub xi: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    /// Derived: `2 c3 c5 + d/2`, stored exactly as computed.
    pub c0: f64,
    pub resolvent_m: f64,
    pub mu0: f64,
    pub lambda0: f64,
}

impl GenericConstants {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dimension: usize,
        sigma: f64,
        xi: f64,
        c: [f64; 6],
        resolvent_m: f64,
        mu0: f64,
        lambda0: f64,
    ) -> Result<Self> {
        if !(0.0 < sigma && sigma < xi) {
            return Err(Error::input("constants require 0 < sigma < xi"));
        }
        let [c1, c2, c3, c4, c5, c6] = c;
        if !(c2 > 0.0 && c2 < sigma) {
            return Err(Error::input(format!("c2 must lie in (0, sigma), got {c2}")));
        }
        if c4 <= xi {
            return Err(Error::input(format!("c4 must exceed xi, got {c4}")));
        }
        if c6 <= xi {
            return Err(Error::input(format!("c6 must exceed xi, got {c6}")));
        }
        if c1 <= 0.0 || c3 <= 0.0 || c5 <= 0.0 {
            return Err(Error::input("c1, c3, c5 must be positive"));
        }
        if resolvent_m < 1.0 {
            return Err(Error::input("resolvent constant M must be >= 1"));
        }
        let c0 = 2.0 * c3 * c5 + dimension as f64 / 2.0;
        Ok(GenericConstants {
            dimension,
            sigma,
            xi,
            c1,
            c2,
            c3,
            c4,
            c5,
            c6,
            c0,
            resolvent_m,
            mu0,
            lambda0,
        })
    }

    /// The smallness threshold `sqrt(sigma c4 / c0)` on `n_e(b, h c4)`.
    pub fn smallness_threshold(&self) -> f64 {
        (self.sigma * self.c4 / self.c0).sqrt()
    }
}

/// Result of [`eta_bound`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EtaReport {
    pub eta: f64,
    pub threshold: f64,
    /// The smallness verdict `n_e(b, h c4) < sqrt(sigma c4 / c0)`.
    pub within_threshold: bool,
}

/// Relative-bound constant
/// `eta = (1 - e^{-mu h})^{-1} sqrt(c0/(sigma c4)) n_e(b, h c4)`.
///
/// `nash_value` must be the Nash norm evaluated at horizon `h * c4`.
pub fn eta_bound(nash_value: f64, h: f64, mu: f64, consts: &GenericConstants) -> Result<EtaReport> {
    if !(nash_value >= 0.0 && nash_value.is_finite()) {
        return Err(Error::input("nash_value must be finite and nonnegative"));
    }
    if !(h > 0.0 && mu > 0.0) {
        return Err(Error::input("eta bound requires h > 0 and mu > 0"));
    }
    let prefactor = (1.0 - (-mu * h).exp()).recip();
    let ratio = (consts.c0 / (consts.sigma * consts.c4)).sqrt();
    let threshold = consts.smallness_threshold();
    Ok(EtaReport {
        eta: prefactor * ratio * nash_value,
        threshold,
        within_threshold: nash_value < threshold,
    })
}

/// Result of [`holomorphy_angle`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AngleReport {
    pub tan_theta: f64,
    pub theta: f64,
    pub sector_half_angle: f64,
}

/// Holomorphy angle `tan theta = sqrt(2) (M / (1 - eta_term) - 1)` where
/// `eta_term = sqrt(c0/(sigma c4)) n_e(b, h c4)`.
pub fn holomorphy_angle(eta_term: f64, resolvent_m: f64) -> Result<AngleReport> {
    if !(0.0..1.0).contains(&eta_term) {
        return Err(Error::Smallness(format!(
            "holomorphy requires sqrt(c0/(sigma c4)) n_e < 1, got {eta_term}"
        )));
    }
    if resolvent_m < 1.0 {
        return Err(Error::input("resolvent constant M must be >= 1"));
    }
    let tan_theta = std::f64::consts::SQRT_2 * (resolvent_m / (1.0 - eta_term) - 1.0);
    let theta = tan_theta.atan();
    Ok(AngleReport {
        tan_theta,
        theta,
        sector_half_angle: std::f64::consts::FRAC_PI_2 - theta,
    })
}

// ---------------------------------------------------------------------------
// Form-bound envelope
// ---------------------------------------------------------------------------

/// Built-in trial family: single Gaussians over a width ladder plus dyadic
/// superposition stacks approximating the critical-profile optimizers.
#[derive(Debug, Clone)]
pub struct TrialFamily {
    pub widths: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    /// Depths of the dyadic width stacks (entries < 2 are ignored).
    pub stack_depths: Vec<usize>,
}

impl TrialFamily {
    pub fn default_for(grid: GridSpec) -> Self {
        let h = grid.spacing();
        let l = grid.half_width();
        let w_min = 2.0 * h;
        let w_max = l / 3.0;
        let n = 6;
        let ratio = (w_max / w_min).powf(1.0 / (n - 1) as f64);
        let widths: Vec<f64> = (0..n).map(|k| w_min * ratio.powi(k)).collect();
        TrialFamily {
            widths,
            centers: vec![vec![0.0; grid.dimension()]],
            stack_depths: vec![2, 3, 4, 5],
        }
    }
}

/// Least envelope `(delta_hat, c_hat)` of the form-bound inequality over the
/// trial family; a certified lower estimate of the true form bound.
#[derive(Debug, Clone, Serialize)]
pub struct FormBoundReport {
    pub delta_hat: f64,
    pub c_hat: f64,
    /// Trial points `(D/N, Q/N)` with `Q = <b_a^2 f, f>`,
    /// `D = <a grad f, grad f>`, `N = ||f||_2^2`.
    pub points: Vec<(f64, f64)>,
}

/// Estimate the form bound `b_a^2 <= delta A + c(delta)` from below on a
/// family of analytic trial functions, via the upper convex hull of the
/// trial ratios; the rightmost hull edge carries the asymptotic slope.
pub fn form_bound_estimate(
    b: DriftInput,
    a: Option<&SampledField>,
    grid: GridSpec,
    trials: &TrialFamily,
) -> Result<FormBoundReport> {
    let d = grid.dimension();
    let b_a_sq = b_a_squared(b, a, grid)?;
    let a_quad = |node: usize, g: &[f64; 3]| -> f64 {
        match a {
            None => g[..d].iter().map(|v| v * v).sum(),
            Some(af) => {
                let m = af.matrix_at(node);
                let mut acc = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        acc += g[i] * m[i][j] * g[j];
                    }
                }
                acc
            }
        }
    };

    // Gaussian stack: f = sum_j w_j^-gamma exp(-|x-c|^2/(2 w_j^2)), the
    // dyadic superposition approximating the |x|^{-(d-2)/2} profile.
    let gamma = (((d as f64) - 2.0) / 2.0).max(0.0);
    let eval_stack = |x: &[f64], center: &[f64], widths: &[f64]| -> (f64, [f64; 3]) {
        let mut f = 0.0;
        let mut g = [0.0; 3];
        for &w in widths {
            let coef = w.powf(-gamma);
            let mut q = 0.0;
            for k in 0..d {
                let z = x[k] - center[k];
                q += z * z;
            }
            let e = coef * (-q / (2.0 * w * w)).exp();
            f += e;
            for k in 0..d {
                let z = x[k] - center[k];
                g[k] += -z / (w * w) * e;
            }
        }
        (f, g)
    };

    let mut trial_sets: Vec<Vec<f64>> = trials.widths.iter().map(|&w| vec![w]).collect();
    for &depth in &trials.stack_depths {
        if depth >= 2 {
            let w_max = trials.widths.last().copied().unwrap_or(1.0);
            // Truncate the stack at the resolution floor: the trial then
            // concentrates as deep as this grid can represent.
            let stack: Vec<f64> = (0..depth)
                .map(|j| w_max * 0.5f64.powi(j as i32))
                .filter(|&w| w >= grid.spacing())
                .collect();
            if stack.len() >= 2 {
                trial_sets.push(stack);
            }
        }
    }

    let vol = grid.cell_volume();
    let mut points: Vec<(f64, f64)> = Vec::new();
    for center in &trials.centers {
        for widths in &trial_sets {
            if widths.iter().any(|&w| w < grid.spacing()) {
                // not resolvable on this grid; skip rather than fake
                continue;
            }
            let mut q = 0.0;
            let mut dd = 0.0;
            let mut nn = 0.0;
            let mut x = [0.0; 3];
            for idx in 0..grid.node_count() {
                grid.position(idx, &mut x[..d]);
                let (f, g) = eval_stack(&x[..d], center, widths);
                q += b_a_sq.at(idx) * f * f;
                dd += a_quad(idx, &g);
                nn += f * f;
            }
            q *= vol;
            dd *= vol;
            nn *= vol;
            if nn > 0.0 {
                points.push((dd / nn, q / nn));
            }
        }
    }

    let (xmin, xmax) = points
        .iter()
        .map(|p| p.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if points.len() < 2 || (xmax - xmin) < 1e-9 * xmax.abs().max(1.0) {
        return Err(Error::input(
            "degenerate trial set: need at least two distinct Dirichlet/mass ratios",
        ));
    }

    let mut pts = points.clone();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let (delta_hat, c_hat) = if hull.len() >= 2 {
        let a = hull[hull.len() - 2];
        let b = hull[hull.len() - 1];
        let slope = (b.1 - a.1) / (b.0 - a.0);
        let intercept = b.1 - slope * b.0;
        (slope.max(0.0), intercept.max(0.0))
    } else {
        (0.0, hull.first().map(|p| p.1).unwrap_or(0.0).max(0.0))
    };

    Ok(FormBoundReport {
        delta_hat,
        c_hat,
        points,
    })
}

/// `b . a^{-1} . b` samples; plain `|b|^2` when `a` is omitted (identity).
pub fn b_a_squared(
    b: DriftInput,
    a: Option<&SampledField>,
    grid: GridSpec,
) -> Result<SampledField> {
    match a {
        None => {
            let (f, _div, _err) = b.magnitude_power(grid, 2)?;
            Ok(f)
        }
        Some(af) => {
            let bv = match b {
                DriftInput::Field(f) => f.clone(),
                DriftInput::Spec(spec) => crate::catalog::sample_drift(spec, grid)?,
            };
            let d = grid.dimension();
            let nodes = grid.node_count();
            let mut vals = vec![0.0; nodes];
            for (idx, val) in vals.iter_mut().enumerate() {
                let inv = af.matrix_inverse_at(idx)?;
                let mut acc = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        acc += bv.value(idx, i) * inv[i][j] * bv.value(idx, j);
                    }
                }
                *val = acc;
            }
            SampledField::from_values(grid, FieldRank::Scalar, vals)
        }
    }
}

// ---------------------------------------------------------------------------
// Mollifier stability
// ---------------------------------------------------------------------------

/// One rung of the mollifier ladder.
#[derive(Debug, Clone, Serialize)]
pub struct MollifierRung {
    pub eps: f64,
    pub nu: f64,
    pub value: f64,
    pub excess: f64,
    pub g1_l2: f64,
    pub g2_lq: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MollifierReport {
    pub base_value: f64,
    pub rungs: Vec<MollifierRung>,
    pub fitted_slope: f64,
    /// Every rung satisfies `excess <= slope * eps + tol`.
    pub linear_bound_ok: bool,
}

/// Track the Nash norm along a mollifier ladder `b_eps = E_nu (1_eps b)`,
/// with smoothing times chosen so the discrete analogues of
/// `||g_1||_2 <= eps` and `||g_2||_q <= eps^2` hold, and check the excess
/// `n_e(b_eps, h) - n_e(b, h)` against a fitted linear-in-eps bound.
///
/// Base and rungs both use the sampled-field norm path so the comparison is
/// like for like.
pub fn mollifier_stability_check(
    spec: &DriftSpec,
    grid: GridSpec,
    h: f64,
    eps_ladder: &[f64],
    plan: &QuadraturePlan,
    tol: f64,
) -> Result<MollifierReport> {
    let b_vec = crate::catalog::sample_drift(spec, grid)?;
    let b_sq = sample_magnitude_power(spec, grid, 2)?;
    mollifier_stability_check_fields(&b_vec, &b_sq.field, grid, h, eps_ladder, plan, tol)
}

/// Field-level mollifier ladder (see [`mollifier_stability_check`]); takes
/// the drift samples and the squared-magnitude samples directly.
pub fn mollifier_stability_check_fields(
    b_vec: &SampledField,
    b_sq: &SampledField,
    grid: GridSpec,
    h: f64,
    eps_ladder: &[f64],
    plan: &QuadraturePlan,
    tol: f64,
) -> Result<MollifierReport> {
    if eps_ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::input("eps ladder must be strictly decreasing"));
    }
    let d = grid.dimension();
    let q = d as f64;
    let base = nash_norm_e(DriftInput::Field(b_vec), grid, h, plan)?;
    let nu_min = min_resolved_time(grid, 1.0);

    let lq_norm = |f: &SampledField, q: f64| -> f64 {
        (f.values().iter().map(|v| v.abs().powf(q)).sum::<f64>() * f.grid().cell_volume())
            .powf(1.0 / q)
    };

    let mut rungs = Vec::new();
    let mut nu_start = 64.0 * nu_min;
    for &eps in eps_ladder {
        if eps == 0.0 {
            rungs.push(MollifierRung {
                eps,
                nu: 0.0,
                value: base.value,
                excess: 0.0,
                g1_l2: 0.0,
                g2_lq: 0.0,
            });
            continue;
        }
        let cutoff = CutoffParams::from_epsilon(eps)?;
        let sq_cutoff = CutoffParams {
            space_radius: cutoff.space_radius,
            magnitude_cap: cutoff.magnitude_cap * cutoff.magnitude_cap,
        };
        let truncated = truncate(b_vec, cutoff);
        let truncated_sq = truncate(b_sq, sq_cutoff);
        // The smoothing schedule is non-increasing along the ladder.
        let mut nu = nu_start;
        let b_eps = loop {
            let b_eps = mollify(b_vec, nu, cutoff)?.field;
            let sq_eps = mollify(b_sq, nu, sq_cutoff)?.field;
            let g1f = b_eps.linear_comb(1.0, &truncated, -1.0)?;
            let g1 = lq_norm(&g1f.magnitude(), 2.0);
            let g2f = sq_eps.linear_comb(1.0, &truncated_sq, -1.0)?;
            let g2 = lq_norm(&g2f, q);
            if g1 <= eps && g2 <= eps * eps {
                break (b_eps, g1, g2);
            }
            nu *= 0.5;
            if nu < nu_min {
                return Err(Error::resolution(
                    format!(
                        "mollifier schedule infeasible at eps={eps}: nu fell below the resolved \
                         time {nu_min} with g1={g1:.3e}, g2={g2:.3e}"
                    ),
                    Some(nu_min),
                ));
            }
        };
        let (b_eps, g1, g2) = b_eps;
        nu_start = nu;
        let v = nash_norm_e(DriftInput::Field(&b_eps), grid, h, plan)?;
        rungs.push(MollifierRung {
            eps,
            nu,
            value: v.value,
            excess: v.value - base.value,
            g1_l2: g1,
            g2_lq: g2,
        });
    }

    // Least squares slope through the origin on positive-eps rungs.
    let num: f64 = rungs
        .iter()
        .filter(|r| r.eps > 0.0)
        .map(|r| r.eps * r.excess)
        .sum();
    let den: f64 = rungs
        .iter()
        .filter(|r| r.eps > 0.0)
        .map(|r| r.eps * r.eps)
        .sum();
    let slope = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
    let ok = rungs.iter().all(|r| r.excess <= slope * r.eps + tol);
    Ok(MollifierReport {
        base_value: base.value,
        rungs,
        fitted_slope: slope,
        linear_bound_ok: ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_plan() -> QuadraturePlan {
        QuadraturePlan {
            base_nodes: 32,
            max_refinements: 1,
            rel_tol: 1e-7,
        }
    }

    #[test]
    fn nash_norm_zero_field() {
        let g = GridSpec::new(2, 2.0, 33).unwrap();
        let spec = DriftSpec::zero(2).unwrap();
        let r = nash_norm_e(DriftInput::Spec(&spec), g, 1.0, &small_plan()).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.verdict, SingularVerdict::Finite);
    }

    #[test]
    fn nash_norm_constant_closed_form() {
        // |b| = c constant: n_e = 2 c sqrt(h). Exact analytic path.
        let g = GridSpec::new(2, 2.0, 33).unwrap();
        let spec = DriftSpec::constant(2, 1.0, None).unwrap();
        let r = nash_norm_e(DriftInput::Spec(&spec), g, 1.0, &small_plan()).unwrap();
        assert_relative_eq!(r.value, 2.0, max_relative = 1e-6);
        // Sampled-field path agrees within the leakage budget.
        let g2 = GridSpec::new(2, 8.0, 129).unwrap();
        let bf = crate::catalog::sample_drift(&spec, g2).unwrap();
        let r2 = nash_norm_e(DriftInput::Field(&bf), g2, 1.0, &small_plan()).unwrap();
        assert!(r2.raw_small_time_freeze);
        assert_relative_eq!(r2.value, 2.0, max_relative = 1e-6);
    }

    #[test]
    fn kato_norms_constant_closed_forms() {
        let g = GridSpec::new(2, 2.0, 33).unwrap();
        let spec = DriftSpec::constant(2, 3.0, None).unwrap();
        let k1 = kato_norm_d1(DriftInput::Spec(&spec), g, 0.49, &small_plan()).unwrap();
        assert_relative_eq!(k1.value, 2.0 * 3.0 * 0.49f64.sqrt(), max_relative = 1e-8);
        let kd = kato_norm_d(DriftInput::Spec(&spec), g, 0.49, &small_plan()).unwrap();
        assert_relative_eq!(kd.value, 9.0 * 0.49, max_relative = 1e-8);
    }

    #[test]
    fn nash_phi_weight_divergence_and_value() {
        let g = GridSpec::new(1, 2.0, 65).unwrap();
        let spec = DriftSpec::constant(1, 1.0, None).unwrap();
        // phi(t) = t: logarithmically divergent for constant fields.
        let phi = PhiWeight::new(1.0, 0.0).unwrap();
        let r = nash_norm_phi(DriftInput::Spec(&spec), g, 1.0, phi, &small_plan()).unwrap();
        assert!(r.is_divergent_report());
        // phi(t) = sqrt(t): integral c^2 * 2 sqrt(h).
        let phi = PhiWeight::new(0.5, 0.0).unwrap();
        let r = nash_norm_phi(DriftInput::Spec(&spec), g, 1.0, phi, &small_plan()).unwrap();
        assert_relative_eq!(r.value, 2.0, max_relative = 1e-8);
    }

    #[test]
    fn fractional_norm_gamma_closed_form() {
        // c=1, alpha=1.5, mu=1 -> Gamma(1/4), frozen from a 50-digit oracle.
        let g = GridSpec::new(1, 2.0, 33).unwrap();
        let spec = DriftSpec::constant(1, 1.0, None).unwrap();
        let r = fractional_nash_norm(DriftInput::Spec(&spec), g, 1.5, 1.0, &small_plan()).unwrap();
        assert_relative_eq!(r.value, 3.625609908221908311930685, max_relative = 1e-5);
    }

    #[test]
    fn fractional_norm_alpha_continuity_toward_two() {
        // As alpha -> 2^-, the weight approaches e^{-mu t}/sqrt(t), the
        // mu-damped Nash weight; values converge accordingly.
        let g = GridSpec::new(1, 2.0, 33).unwrap();
        let spec = DriftSpec::constant(1, 1.0, None).unwrap();
        let damped_nash = {
            // int_0^inf e^{-t}/sqrt(t) dt = Gamma(1/2) = sqrt(pi)
            std::f64::consts::PI.sqrt()
        };
        let mut prev_gap = f64::INFINITY;
        for alpha in [1.7, 1.85, 1.95, 1.99] {
            let r =
                fractional_nash_norm(DriftInput::Spec(&spec), g, alpha, 1.0, &small_plan()).unwrap();
            let gap = (r.value - damped_nash).abs();
            assert!(gap <= prev_gap + 1e-12, "gap grew at alpha={alpha}");
            prev_gap = gap;
        }
        assert!(prev_gap < 0.02, "alpha->2 limit gap {prev_gap}");
    }

    #[test]
    fn fractional_norm_rejects_bad_order() {
        let g = GridSpec::new(1, 2.0, 33).unwrap();
        let spec = DriftSpec::constant(1, 1.0, None).unwrap();
        assert!(fractional_nash_norm(DriftInput::Spec(&spec), g, 2.3, 1.0, &small_plan()).is_err());
        assert!(
            fractional_nash_norm(DriftInput::Spec(&spec), g, 1.5, -1.0, &small_plan()).is_err()
        );
    }

    #[test]
    fn log_refined_verdicts_by_alpha() {
        let g = GridSpec::new(2, 1.0, 41).unwrap();
        let fine = DriftSpec::log_refined(2, 1.0, 1.0, None).unwrap();
        let r = nash_norm_e(DriftInput::Spec(&fine), g, 0.2, &small_plan()).unwrap();
        assert_eq!(r.verdict, SingularVerdict::Finite, "alpha=1 should be finite");
        let rough = DriftSpec::log_refined(2, 1.0, 0.4, None).unwrap();
        let r = nash_norm_e(DriftInput::Spec(&rough), g, 0.2, &small_plan()).unwrap();
        assert!(r.is_divergent_report());
    }

    #[test]
    fn hardy_norms_are_divergent_with_partial_values() {
        // e^{t Delta}|b|^2(0) = delta/(8t) and e^{t Delta}|b|(0) ~ t^{-1/2}:
        // both the Nash and the Kato integrands behave like 1/t, so the
        // critical Hardy field sits outside both classes (it is only
        // form-bounded). The reports carry finite partial values.
        let g = GridSpec::new(3, 1.0, 21).unwrap();
        let spec = DriftSpec::hardy(3, 1.0, true).unwrap();
        let r = nash_norm_e(DriftInput::Spec(&spec), g, 0.1, &small_plan()).unwrap();
        assert!(r.is_divergent_report());
        assert!(r.value.is_finite() && r.value > 0.0);
        let k = kato_norm_d1(DriftInput::Spec(&spec), g, 0.1, &small_plan()).unwrap();
        assert!(k.is_divergent_report());
        assert!(k.value.is_finite() && k.value > 0.0);
    }

    #[test]
    fn logarithmic_d_kato_d1_divergent() {
        let g = GridSpec::new(3, 1.0, 21).unwrap();
        let spec = DriftSpec::logarithmic_d(3, 1.0, 0.5).unwrap();
        let k = kato_norm_d1(DriftInput::Spec(&spec), g, 0.1, &small_plan()).unwrap();
        assert!(k.is_divergent_report());
    }

    #[test]
    fn norm_scaling_homogeneity() {
        // n_e(c b, h) = c n_e(b, h); kappa_d(c b, h) = c^2 kappa_d(b, h).
        let g = GridSpec::new(2, 1.5, 41).unwrap();
        let b1 = DriftSpec::lp_power(2, 1.0, 0.5, 1.0).unwrap();
        let b3 = DriftSpec::lp_power(2, 3.0, 0.5, 1.0).unwrap();
        let p = small_plan();
        let n1 = nash_norm_e(DriftInput::Spec(&b1), g, 0.25, &p).unwrap();
        let n3 = nash_norm_e(DriftInput::Spec(&b3), g, 0.25, &p).unwrap();
        assert_relative_eq!(n3.value, 3.0 * n1.value, max_relative = 1e-10);
        let k1 = kato_norm_d(DriftInput::Spec(&b1), g, 0.25, &p).unwrap();
        let k3 = kato_norm_d(DriftInput::Spec(&b3), g, 0.25, &p).unwrap();
        assert_relative_eq!(k3.value, 9.0 * k1.value, max_relative = 1e-10);
    }

    #[test]
    fn norm_monotone_in_horizon() {
        let g = GridSpec::new(2, 1.5, 41).unwrap();
        let b = DriftSpec::lp_power(2, 1.0, 0.5, 1.0).unwrap();
        let p = small_plan();
        let mut prev = 0.0;
        for h in [0.05, 0.1, 0.2, 0.4] {
            let r = nash_norm_e(DriftInput::Spec(&b), g, h, &p).unwrap();
            assert!(r.value >= prev - 1e-12, "norm decreased at h={h}");
            prev = r.value;
        }
    }

    #[test]
    fn domination_kato_d1_by_nash() {
        // kappa_{d+1} <= n_e on any field.
        let g = GridSpec::new(2, 1.5, 41).unwrap();
        let b = DriftSpec::lp_power(2, 1.0, 0.7, 1.0).unwrap();
        let p = small_plan();
        let n = nash_norm_e(DriftInput::Spec(&b), g, 0.25, &p).unwrap();
        let k = kato_norm_d1(DriftInput::Spec(&b), g, 0.25, &p).unwrap();
        assert!(
            k.value <= n.value + k.quadrature_error + n.quadrature_error,
            "kato {} vs nash {}",
            k.value,
            n.value
        );
    }

    #[test]
    fn lp_power_example_bound() {
        // n_e(b,h) <= sqrt(C) (2p/(p-d)) h^{(p-d)/(2p)} ||b||_p with
        // C = (4 pi)^{-d/(2r)} r'^{-d/(2 r')}, r = p/2, from the
        // L^{p/2} -> L^inf smoothing bound.
        let d = 3usize;
        let g = GridSpec::new(3, 1.5, 41).unwrap();
        let spec = DriftSpec::lp_power(d, 1.0, 0.3, 1.0).unwrap();
        let p = small_plan();
        let h = 0.25;
        let n = nash_norm_e(DriftInput::Spec(&spec), g, h, &p).unwrap();
        for pp in [4.0, 6.0, 8.0] {
            let r = pp / 2.0;
            let rp = r / (r - 1.0);
            let c = (4.0 * std::f64::consts::PI).powf(-(d as f64) / (2.0 * r))
                * rp.powf(-(d as f64) / (2.0 * rp));
            let bound = c.sqrt() * (2.0 * pp / (pp - d as f64))
                * h.powf((pp - d as f64) / (2.0 * pp))
                * spec.lp_norm(pp).unwrap();
            assert!(
                n.value <= bound,
                "p={pp}: nash {v} exceeds the L^p bound {bound}",
                v = n.value
            );
        }
    }

    #[test]
    fn cauchy_schwarz_bridge_nphi() {
        // n_e <= sqrt(n_phi) sqrt(int phi/t) within errors.
        let g = GridSpec::new(2, 1.5, 41).unwrap();
        let b = DriftSpec::lp_power(2, 0.8, 0.6, 1.0).unwrap();
        let p = small_plan();
        let h = 0.25;
        let phi = PhiWeight::new(0.5, 0.0).unwrap();
        let ne = nash_norm_e(DriftInput::Spec(&b), g, h, &p).unwrap();
        let nphi = nash_norm_phi(DriftInput::Spec(&b), g, h, phi, &p).unwrap();
        let bridge = phi.phi_over_t_integral(h);
        assert_eq!(bridge.verdict, SingularVerdict::Finite);
        let rhs = (nphi.value * bridge.value).sqrt();
        assert!(
            ne.value <= rhs + ne.quadrature_error + nphi.quadrature_error,
            "bridge violated: {} vs {}",
            ne.value,
            rhs
        );
    }

    #[test]
    fn generic_constants_arithmetic() {
        // sigma=1, c4=2, c3=c5=1, d=3: c0 = 3.5, threshold sqrt(2/3.5).
        let c = GenericConstants::new(3, 1.0, 1.5, [1.0, 0.5, 1.0, 2.0, 1.0, 2.0], 1.0, 1.0, 1.0)
            .unwrap();
        assert_eq!(c.c0, 3.5);
        assert_relative_eq!(
            c.smallness_threshold(),
            0.7559289460184544544290331,
            max_relative = 1e-15
        );
        assert!(GenericConstants::new(3, 1.0, 1.5, [1.0, 1.2, 1.0, 2.0, 1.0, 2.0], 1.0, 1.0, 1.0)
            .is_err());
    }

    #[test]
    fn eta_bound_examples() {
        let c = GenericConstants::new(3, 1.0, 1.5, [1.0, 0.5, 1.0, 2.0, 1.0, 2.0], 1.0, 1.0, 1.0)
            .unwrap();
        let r = eta_bound(0.0, 1.0, 1.0, &c).unwrap();
        assert_eq!(r.eta, 0.0);
        assert!(r.within_threshold);
        // mu h -> infinity: the prefactor tends to 1.
        let r = eta_bound(0.3, 1.0, 800.0, &c).unwrap();
        assert_relative_eq!(r.eta, (3.5f64 / 2.0).sqrt() * 0.3, max_relative = 1e-12);
    }

    #[test]
    fn holomorphy_angle_examples() {
        let r = holomorphy_angle(0.0, 1.0).unwrap();
        assert_eq!(r.tan_theta, 0.0);
        assert_relative_eq!(r.sector_half_angle, std::f64::consts::FRAC_PI_2);
        let r = holomorphy_angle(0.0, 2.0).unwrap();
        assert_relative_eq!(r.tan_theta, std::f64::consts::SQRT_2, max_relative = 1e-15);
        let r = holomorphy_angle(0.5, 1.5).unwrap();
        assert_relative_eq!(
            r.tan_theta,
            2.0 * std::f64::consts::SQRT_2,
            max_relative = 1e-15
        );
        assert!(matches!(holomorphy_angle(1.2, 1.5), Err(Error::Smallness(_))));
    }

    #[test]
    fn form_bound_zero_and_constant() {
        let g = GridSpec::new(2, 3.0, 41).unwrap();
        let trials = TrialFamily::default_for(g);
        let z = DriftSpec::zero(2).unwrap();
        let r = form_bound_estimate(DriftInput::Spec(&z), None, g, &trials).unwrap();
        assert_eq!(r.delta_hat, 0.0);
        assert_eq!(r.c_hat, 0.0);

        let c = DriftSpec::constant(2, 2.0, None).unwrap();
        let r = form_bound_estimate(DriftInput::Spec(&c), None, g, &trials).unwrap();
        assert!(r.delta_hat < 1e-10, "delta_hat {}", r.delta_hat);
        assert_relative_eq!(r.c_hat, 4.0, max_relative = 1e-6);
    }

    #[test]
    fn form_bound_hardy_concentration() {
        // delta_hat increases toward delta as the stacks deepen (c(delta)=0
        // for the critical field).
        let g = GridSpec::new(3, 2.0, 81).unwrap();
        let delta = 0.64;
        let spec = DriftSpec::hardy(3, delta, true).unwrap();
        let mut last = 0.0;
        for depth in [2usize, 3, 4] {
            let trials = TrialFamily {
                widths: vec![g.half_width() / 3.0],
                centers: vec![vec![0.0; 3]],
                stack_depths: vec![depth],
            };
            let r = form_bound_estimate(DriftInput::Spec(&spec), None, g, &trials).unwrap();
            assert!(
                r.delta_hat >= last - 1e-9,
                "delta_hat not increasing: {} after {}",
                r.delta_hat,
                last
            );
            assert!(r.delta_hat <= delta * 1.05, "overshoot: {}", r.delta_hat);
            last = r.delta_hat;
        }
        assert!(last >= 0.4 * delta, "too far from delta: {last}");
    }

    #[test]
    fn form_bound_degenerate_trials_rejected() {
        let g = GridSpec::new(2, 3.0, 41).unwrap();
        let z = DriftSpec::zero(2).unwrap();
        let trials = TrialFamily {
            widths: vec![1.0],
            centers: vec![vec![0.0, 0.0]],
            stack_depths: vec![],
        };
        assert!(form_bound_estimate(DriftInput::Spec(&z), None, g, &trials).is_err());
    }

    #[test]
    fn mollifier_smooth_field_no_excess() {
        // Bounded smooth compactly supported drift: the cutoff is inactive
        // and mollification changes the norm only at the smoothing level.
        let g = GridSpec::new(2, 3.0, 129).unwrap();
        let bump = |x: &[f64]| {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            (-r2).exp()
        };
        let b_vec = SampledField::from_vector_fn(g, |x, c| if c == 0 { bump(x) } else { 0.0 })
            .unwrap();
        let b_sq = SampledField::from_scalar_fn(g, |x| bump(x) * bump(x)).unwrap();
        let r = mollifier_stability_check_fields(
            &b_vec,
            &b_sq,
            g,
            0.25,
            &[0.4, 0.3, 0.2, 0.15],
            &small_plan(),
            1e-3,
        )
        .unwrap();
        assert!(r.linear_bound_ok);
        for rung in &r.rungs {
            // The lemma controls the excess from above only; smoothing can
            // lower the norm by the mollification scale.
            assert!(rung.excess <= r.fitted_slope * rung.eps + 1e-3);
            assert!(rung.excess.abs() < 0.12, "excess {}", rung.excess);
        }
    }
}
