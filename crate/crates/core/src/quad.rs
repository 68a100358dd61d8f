//! Quadrature primitives: Gauss–Legendre rules, adaptive panels, and a dyadic
//! shell integrator for endpoint singularities that classifies an integral as
//! numerically finite or numerically divergent.

use crate::error::{Error, Result};
use std::sync::{Mutex, OnceLock};

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
///
/// Computed by Newton iteration on the Legendre polynomial and cached.
pub fn gauss_legendre(n: usize) -> &'static (Vec<f64>, Vec<f64>) {
    static CACHE: OnceLock<Mutex<std::collections::HashMap<usize, &'static (Vec<f64>, Vec<f64>)>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(std::collections::HashMap::new()));
    let mut guard = cache.lock().unwrap();
    if let Some(rule) = guard.get(&n) {
        return rule;
    }
    let rule: &'static (Vec<f64>, Vec<f64>) = Box::leak(Box::new(compute_gauss_legendre(n)));
    guard.insert(n, rule);
    rule
}

fn compute_gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrate `f` over `[a, b]` with the `n`-point Gauss–Legendre rule.
pub fn integrate_gl<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(weights) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

/// Adaptive Gauss–Legendre quadrature by panel bisection.
///
/// The error indicator on a panel is the difference between the 15-point rule
/// on the panel and the summed 15-point rules on its halves.
pub fn adaptive_gl<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64, tol: f64) -> (f64, f64) {
    fn recurse<F: Fn(f64) -> f64 + Copy>(
        f: F,
        a: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> (f64, f64) {
        let mid = 0.5 * (a + b);
        let left = integrate_gl(f, a, mid, 15);
        let right = integrate_gl(f, mid, b, 15);
        let err = (left + right - whole).abs();
        if err < tol || depth >= 48 {
            return (left + right, err);
        }
        let (vl, el) = recurse(f, a, mid, left, 0.5 * tol, depth + 1);
        let (vr, er) = recurse(f, mid, b, right, 0.5 * tol, depth + 1);
        (vl + vr, el + er)
    }
    let whole = integrate_gl(f, a, b, 15);
    recurse(f, a, b, whole, tol, 0)
}

/// Verdict of a quadrature with a possibly non-integrable singularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SingularVerdict {
    Finite,
    NumericallyDivergent,
}

/// Result of [`dyadic_singular`]: partial value, error estimate and verdict.
///
/// For a divergent verdict the value is the last stable partial sum, never an
/// extrapolated infinity.
#[derive(Debug, Clone, Copy)]
pub struct SingularIntegral {
    pub value: f64,
    pub error: f64,
    pub verdict: SingularVerdict,
    /// Number of dyadic shells evaluated.
    pub shells: usize,
}

impl SingularIntegral {
    pub fn exact_zero() -> Self {
        SingularIntegral {
            value: 0.0,
            error: 0.0,
            verdict: SingularVerdict::Finite,
            shells: 0,
        }
    }

    pub fn is_divergent(&self) -> bool {
        self.verdict == SingularVerdict::NumericallyDivergent
    }
}

/// Options for the dyadic shell integrator.
#[derive(Debug, Clone, Copy)]
pub struct DyadicOptions {
    /// Relative tolerance on the geometric tail before an early stop.
    pub rel_tol: f64,
    /// Hard cap on the number of shells.
    pub max_shells: usize,
    /// Nodes of the per-shell Gauss–Legendre rule.
    pub shell_nodes: usize,
}

impl Default for DyadicOptions {
    fn default() -> Self {
        DyadicOptions {
            rel_tol: 1e-10,
            max_shells: 240,
            shell_nodes: 16,
        }
    }
}

/// Integrate a nonnegative integrand over `(0, upper]` whose only possible
/// singularity sits at the origin, by geometric (dyadic) shells.
///
/// Shell sums that decay geometrically terminate early with a certified tail.
/// Otherwise the tail exponent `q` of `s_k ~ k^-q` is fitted on the deepest
/// shells: `q <= 1.1` is classified as numerically divergent (the shell series
/// behaves like a divergent p-series), larger `q` yields a finite value with
/// an integral-comparison tail added to the error budget. Hard geometric
/// growth of the shell sums is flagged divergent immediately.
pub fn dyadic_singular<F: Fn(f64) -> f64>(f: F, upper: f64, opts: DyadicOptions) -> SingularIntegral {
    assert!(upper > 0.0 && upper.is_finite());
    let mut shell_sums: Vec<f64> = Vec::with_capacity(64);
    let mut total = 0.0f64;
    let mut grow_streak = 0usize;
    let mut hi = upper;
    for k in 0..opts.max_shells {
        let lo = 0.5 * hi;
        let s = integrate_gl(&f, lo, hi, opts.shell_nodes);
        if !s.is_finite() {
            // A non-finite shell sum means the integrand is not evaluable at
            // this scale; treat as divergent with the partial value.
            return SingularIntegral {
                value: total,
                error: total.abs(),
                verdict: SingularVerdict::NumericallyDivergent,
                shells: k,
            };
        }
        shell_sums.push(s);
        total += s;
        hi = lo;

        if k >= 1 {
            let prev = shell_sums[k - 1];
            // Hard growth toward the singularity; the dominance condition
            // keeps integrands peaked away from zero (with negligible outer
            // shells) from tripping the detector.
            if prev > 0.0 && s > 1.2 * prev && s >= 0.25 * total && k >= 6 {
                grow_streak += 1;
                if grow_streak >= 4 {
                    return SingularIntegral {
                        value: total,
                        error: s,
                        verdict: SingularVerdict::NumericallyDivergent,
                        shells: k + 1,
                    };
                }
            } else {
                grow_streak = 0;
            }
        }

        // Geometric early exit: the last few ratios are uniformly below 0.85
        // and the implied tail is negligible.
        if k >= 6 {
            let window = &shell_sums[k - 3..=k];
            let mut rmax = 0.0f64;
            let mut geometric = true;
            for pair in window.windows(2) {
                if pair[0] <= 0.0 {
                    geometric = pair[1] == 0.0;
                    break;
                }
                let r = pair[1] / pair[0];
                rmax = rmax.max(r);
                if r > 0.85 {
                    geometric = false;
                    break;
                }
            }
            if geometric {
                let tail = if rmax > 0.0 {
                    shell_sums[k] * rmax / (1.0 - rmax)
                } else {
                    0.0
                };
                if tail <= opts.rel_tol * total.abs().max(f64::MIN_POSITIVE) {
                    return SingularIntegral {
                        value: total + tail,
                        error: tail + 1e-14 * total.abs(),
                        verdict: SingularVerdict::Finite,
                        shells: k + 1,
                    };
                }
            }
        }
    }

    // Shell budget exhausted: classify by the fitted tail exponent of
    // s_k ~ C k^-q over the deepest third of the shells.
    let kmax = shell_sums.len();
    let fit_from = (2 * kmax / 3).max(4);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, &s) in shell_sums.iter().enumerate().skip(fit_from) {
        if s > 0.0 {
            xs.push((k as f64 + 1.0).ln());
            ys.push(s.ln());
        }
    }
    if xs.len() < 8 {
        // Nearly all deep shells vanished: the integrand is compactly
        // supported away from zero at this scale.
        return SingularIntegral {
            value: total,
            error: 1e-14 * total.abs(),
            verdict: SingularVerdict::Finite,
            shells: kmax,
        };
    }
    let (slope, _intercept) = least_squares_line(&xs, &ys);
    let q = -slope;
    let last = *shell_sums.last().unwrap();
    if q <= 1.1 {
        SingularIntegral {
            value: total,
            error: last.max(1e-14 * total.abs()),
            verdict: SingularVerdict::NumericallyDivergent,
            shells: kmax,
        }
    } else {
        let tail = last * (kmax as f64) / (q - 1.0);
        SingularIntegral {
            value: total + tail,
            error: tail + 1e-14 * total.abs(),
            verdict: SingularVerdict::Finite,
            shells: kmax,
        }
    }
}

/// Least squares fit `y = slope * x + intercept`; returns `(slope, intercept)`.
pub fn least_squares_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return (0.0, sy / n);
    }
    let slope = (n * sxy - sx * sy) / denom;
    (slope, (sy - slope * sx) / n)
}

/// Integrate `f` over the box `[0, a]^d` when the only singularity of `f`
/// sits at the origin corner. Dyadic corner shells `[0, a 2^-k]^d \
/// [0, a 2^-k-1]^d` are decomposed into `d` rectangular slabs, each clear of
/// the singularity and handled by a tensor Gauss–Legendre rule.
///
/// The shell series is classified exactly as in [`dyadic_singular`].
pub fn corner_box_singular<F: Fn(&[f64]) -> f64>(
    f: F,
    a: f64,
    d: usize,
    opts: DyadicOptions,
) -> Result<SingularIntegral> {
    if !(1..=3).contains(&d) {
        return Err(Error::input(format!(
            "corner_box_singular supports d in 1..=3, got {d}"
        )));
    }
    assert!(a > 0.0 && a.is_finite());
    let nodes1d = 8usize;
    let shell = |size: f64| -> f64 {
        // Box [0,size]^d minus [0,size/2]^d as d slabs:
        //   slab_j = [0,size/2]^(j) x [size/2,size] x [0,size]^(d-1-j)
        let mut acc = 0.0;
        for j in 0..d {
            let mut lo = vec![0.0; d];
            let mut hi = vec![size; d];
            for (axis, hi_axis) in hi.iter_mut().enumerate().take(j) {
                let _ = axis;
                *hi_axis = 0.5 * size;
            }
            lo[j] = 0.5 * size;
            hi[j] = size;
            acc += tensor_gl(&f, &lo, &hi, nodes1d);
        }
        acc
    };

    let mut shell_sums: Vec<f64> = Vec::new();
    let mut total = 0.0f64;
    let mut size = a;
    let mut grow_streak = 0usize;
    for k in 0..opts.max_shells {
        let s = shell(size);
        if !s.is_finite() {
            return Ok(SingularIntegral {
                value: total,
                error: total.abs(),
                verdict: SingularVerdict::NumericallyDivergent,
                shells: k,
            });
        }
        shell_sums.push(s);
        total += s;
        size *= 0.5;

        if k >= 6 && shell_sums[k - 1] > 0.0 && s > 1.2 * shell_sums[k - 1] && s >= 0.25 * total {
            grow_streak += 1;
            if grow_streak >= 4 {
                return Ok(SingularIntegral {
                    value: total,
                    error: s,
                    verdict: SingularVerdict::NumericallyDivergent,
                    shells: k + 1,
                });
            }
        } else if k >= 1 {
            grow_streak = 0;
        }

        if k >= 6 {
            let window = &shell_sums[k - 3..=k];
            let mut rmax = 0.0f64;
            let mut geometric = true;
            for pair in window.windows(2) {
                if pair[0] <= 0.0 {
                    geometric = pair[1] == 0.0;
                    break;
                }
                let r = pair[1] / pair[0];
                rmax = rmax.max(r);
                if r > 0.85 {
                    geometric = false;
                    break;
                }
            }
            if geometric {
                let tail = if rmax > 0.0 {
                    shell_sums[k] * rmax / (1.0 - rmax)
                } else {
                    0.0
                };
                if tail <= opts.rel_tol * total.abs().max(f64::MIN_POSITIVE) {
                    return Ok(SingularIntegral {
                        value: total + tail,
                        error: tail + 1e-14 * total.abs(),
                        verdict: SingularVerdict::Finite,
                        shells: k + 1,
                    });
                }
            }
        }
    }

    let kmax = shell_sums.len();
    let fit_from = (2 * kmax / 3).max(4);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, &s) in shell_sums.iter().enumerate().skip(fit_from) {
        if s > 0.0 {
            xs.push((k as f64 + 1.0).ln());
            ys.push(s.ln());
        }
    }
    if xs.len() < 8 {
        return Ok(SingularIntegral {
            value: total,
            error: 1e-14 * total.abs(),
            verdict: SingularVerdict::Finite,
            shells: kmax,
        });
    }
    let (slope, _) = least_squares_line(&xs, &ys);
    let q = -slope;
    let last = *shell_sums.last().unwrap();
    if q <= 1.1 {
        Ok(SingularIntegral {
            value: total,
            error: last.max(1e-14 * total.abs()),
            verdict: SingularVerdict::NumericallyDivergent,
            shells: kmax,
        })
    } else {
        let tail = last * (kmax as f64) / (q - 1.0);
        Ok(SingularIntegral {
            value: total + tail,
            error: tail + 1e-14 * total.abs(),
            verdict: SingularVerdict::Finite,
            shells: kmax,
        })
    }
}

fn tensor_gl<F: Fn(&[f64]) -> f64>(f: &F, lo: &[f64], hi: &[f64], n: usize) -> f64 {
    let d = lo.len();
    let (nodes, weights) = gauss_legendre(n);
    let mut point = vec![0.0; d];
    let mut acc = 0.0;
    let mut idx = vec![0usize; d];
    'outer: loop {
        let mut w = 1.0;
        for k in 0..d {
            let mid = 0.5 * (lo[k] + hi[k]);
            let half = 0.5 * (hi[k] - lo[k]);
            point[k] = mid + half * nodes[idx[k]];
            w *= weights[idx[k]] * half;
        }
        acc += w * f(&point);
        for k in 0..d {
            idx[k] += 1;
            if idx[k] < n {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    acc
}

/// Refinement plan for the drift-norm quadratures.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadraturePlan {
    /// Gauss–Legendre node count of the first pass over the substituted
    /// time variable.
    pub base_nodes: usize,
    /// Node-doubling refinements to attempt.
    pub max_refinements: usize,
    /// Stop refining when the relative change drops below this.
    pub rel_tol: f64,
}

impl Default for QuadraturePlan {
    fn default() -> Self {
        QuadraturePlan {
            base_nodes: 64,
            max_refinements: 3,
            rel_tol: 1e-6,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gl_integrates_polynomials_exactly() {
        // 2n-1 exactness: x^9 with 5 nodes.
        let v = integrate_gl(|x| x.powi(9) + 3.0 * x * x, -1.0, 2.0, 5);
        let exact = (2.0f64.powi(10) - 1.0) / 10.0 + (8.0 + 1.0);
        assert_relative_eq!(v, exact, max_relative = 1e-13);
    }

    #[test]
    fn adaptive_handles_mild_singularity() {
        // integral of 1/sqrt(x) over (0,1] = 2
        let (v, _e) = adaptive_gl(|x| x.sqrt().recip(), 1e-12, 1.0, 1e-10);
        assert_relative_eq!(v, 2.0 - 2e-6, max_relative = 1e-5);
    }

    #[test]
    fn dyadic_integrable_power() {
        // 1/sqrt(t) over (0, 4]: exact 4
        let r = dyadic_singular(|t| t.sqrt().recip(), 4.0, DyadicOptions::default());
        assert_eq!(r.verdict, SingularVerdict::Finite);
        assert_relative_eq!(r.value, 4.0, max_relative = 1e-9);
    }

    #[test]
    fn dyadic_flags_hard_divergence() {
        // 1/t^2 diverges fast: caught by the growth streak.
        let r = dyadic_singular(|t| t.powi(-2), 1.0, DyadicOptions::default());
        assert!(r.is_divergent());
        assert!(r.shells < 20);
    }

    #[test]
    fn dyadic_flags_logarithmic_divergence() {
        // 1/t: constant shells, tail exponent ~ 0.
        let r = dyadic_singular(|t| t.recip(), 1.0, DyadicOptions::default());
        assert!(r.is_divergent());
    }

    #[test]
    fn dyadic_flags_marginal_log_divergence() {
        // 1/(t (log 1/t)^0.8): shell sums ~ k^-0.8, divergent p-series.
        let r = dyadic_singular(
            |t: f64| (t * (1.0 / t).ln().powf(0.8)).recip(),
            0.25,
            DyadicOptions::default(),
        );
        assert!(r.is_divergent());
    }

    #[test]
    fn dyadic_accepts_marginal_log_convergence() {
        // 1/(t (log 1/t)^2): shell sums ~ k^-2; integral over (0, 1/e] is 1.
        let r = dyadic_singular(
            |t: f64| (t * (1.0 / t).ln().powi(2)).recip(),
            (-1.0f64).exp(),
            DyadicOptions::default(),
        );
        assert_eq!(r.verdict, SingularVerdict::Finite);
        assert_relative_eq!(r.value, 1.0, max_relative = 2e-2);
    }

    #[test]
    fn corner_box_matches_radial_powers() {
        // integral over [0,1]^3 of |x|^-2: integrable; compare against a
        // high-resolution Monte-Carlo-free reference from 1D radial bounds.
        let r = corner_box_singular(
            |x| (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).recip(),
            1.0,
            3,
            DyadicOptions::default(),
        )
        .unwrap();
        assert_eq!(r.verdict, SingularVerdict::Finite);
        // Reference: Hubbard-style constant for the unit-cube integral of
        // |x|^-2 with corner singularity, computed independently below by
        // adaptive radial-slab quadrature.
        let reference = reference_cube_inverse_square();
        assert_relative_eq!(r.value, reference, max_relative = 1e-6);
    }

    #[test]
    fn corner_box_flags_nonintegrable() {
        let r = corner_box_singular(
            |x| (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).powf(-1.7),
            1.0,
            3,
            DyadicOptions::default(),
        )
        .unwrap();
        assert!(r.is_divergent());
    }

    /// Independent evaluation of the cube integral of |x|^-2 used above:
    /// slice along x3 and integrate the 2-D square integrals adaptively.
    fn reference_cube_inverse_square() -> f64 {
        let inner = |z: f64| {
            let f2 = |y: f64, z: f64| {
                // integral over x in [0,1] of 1/(x^2+y^2+z^2) = atan(1/r)/r
                let r = (y * y + z * z).sqrt();
                (1.0 / r).atan() / r
            };
            adaptive_gl(|y| f2(y, z), 1e-9, 1.0, 1e-11).0
        };
        adaptive_gl(inner, 1e-9, 1.0, 1e-10).0
    }
}
