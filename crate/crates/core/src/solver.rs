//! Inner subproblems (beamforming and surface stages), exact common-rate
//! share allocation and the alternating-optimization outer loop.
//!
//! Both stages maximize a max-min objective over the concave surrogate rates.
//! Given the decision vector the optimal shares are found exactly by
//! bisection on the objective level; the decision vector itself is updated
//! by projected gradient ascent on a log-sum-exp smoothed min with quadratic
//! penalties for the min-rate and common-cap constraints, under a
//! continuation schedule on the smoothing and penalty weights.

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{compose_all, ChannelSet, ElementMode, StarRisState};
use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::numerics::{clamp_unit, ComplexMatrix};
use crate::rates::{common_cap, raw_rates, report_from_raw, user_power, BeamformerSet, RateReport};
use crate::surrogate::{
    bf_quadratic, build_bf_constants, build_ris_constants, ris_quadratic, update_eta,
    ComplexVector, EtaVector, QuadForm,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Log-sum-exp smoothing weights, one per continuation stage.
    pub rho: Vec<f64>,
    /// Penalty weights, one per continuation stage.
    pub mu: Vec<f64>,
    pub step_init: f64,
    pub step_shrink: f64,
    pub armijo_slope: f64,
    pub inner_max_iters: usize,
    pub inner_tol: f64,
    pub ao_tol: f64,
    pub ao_max_iters: usize,
    pub bisection_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            rho: vec![10.0, 100.0, 1000.0],
            mu: vec![1.0, 10.0, 100.0, 1e3, 1e4],
            step_init: 1.0,
            step_shrink: 0.5,
            armijo_slope: 1e-4,
            inner_max_iters: 500,
            inner_tol: 1e-6,
            ao_tol: 1e-5,
            ao_max_iters: 50,
            bisection_tol: 1e-10,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("rho", &self.rho), ("mu", &self.mu)] {
            if s.is_empty() || s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!(
                    "{name} schedule must be non-empty and positive"
                )));
            }
            if s.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config(format!(
                    "{name} schedule must be strictly increasing"
                )));
            }
        }
        let positive = [
            ("step_init", self.step_init),
            ("inner_tol", self.inner_tol),
            ("ao_tol", self.ao_tol),
            ("bisection_tol", self.bisection_tol),
            ("armijo_slope", self.armijo_slope),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return Err(Error::Config("step_shrink must lie in (0, 1)".into()));
        }
        if self.armijo_slope >= 1.0 {
            return Err(Error::Config("armijo_slope must be below 1".into()));
        }
        if self.inner_max_iters == 0 || self.ao_max_iters == 0 {
            return Err(Error::Config("iteration limits must be positive".into()));
        }
        Ok(())
    }

    fn stages(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.rho.len().max(self.mu.len());
        (0..n).map(move |i| {
            (
                self.rho[i.min(self.rho.len() - 1)],
                self.mu[i.min(self.mu.len() - 1)],
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIters,
    InfeasibleMinRate,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIters => "max-iters",
            SolveStatus::InfeasibleMinRate => "infeasible-min-rate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub ws: BeamformerSet,
    pub ris: StarRisState,
    pub q: Vec<f64>,
    pub report: RateReport,
    /// True min-EE after initialization and after every AO iteration.
    pub trajectory: Vec<f64>,
    pub iterations: usize,
    pub status: SolveStatus,
}

/// Which variables the optimizer may touch.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    /// `false` pins `W_c` and the shares to zero (TIN).
    pub common_stream: bool,
    pub surface: Surface,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Surface {
    /// Coefficients optimized under the given element modes.
    Optimized(Vec<ElementMode>),
    /// Coefficients held fixed; the surface stage is skipped.
    Fixed(StarRisState),
}

impl Problem {
    pub fn mask(&self) -> &[ElementMode] {
        match &self.surface {
            Surface::Optimized(mask) => mask,
            Surface::Fixed(ris) => &ris.mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Start {
    pub ws: BeamformerSet,
    pub ris: StarRisState,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Default,
    /// The start with the best true objective is used.
    Given(Vec<Start>),
}

/// Smoothed minimum `−(1/ρ) ln Σ exp(−ρ f_k)`; within `ln(K)/ρ` of `min f`.
pub fn softmin(values: &[f64], rho: f64) -> f64 {
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = values.iter().map(|v| (-rho * (v - m)).exp()).sum();
    m - s.ln() / rho
}

fn softmin_weights(values: &[f64], rho: f64) -> (f64, Vec<f64>) {
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = values.iter().map(|v| (-rho * (v - m)).exp()).collect();
    let s: f64 = e.iter().sum();
    (m - s.ln() / rho, e.into_iter().map(|v| v / s).collect())
}

/// Shares reaching the highest common level `t`: `q_k(t) = max(0, r_th − r_k, need_k(t) − r_k)`
/// where `need_k` is increasing and `need_k(t)` is the rate user k requires
/// to reach level `t`. Feasible iff `Σ q_k(t) ≤ cap`.
fn allocate_by_level(
    rates: &[f64],
    cap: f64,
    r_th: f64,
    tol: f64,
    level_of: impl Fn(usize, f64) -> f64,
    need: impl Fn(usize, f64) -> f64,
) -> Result<Vec<f64>> {
    let base: Vec<f64> = rates.iter().map(|r| (r_th - r).max(0.0)).collect();
    let base_sum: f64 = base.iter().sum();
    if base_sum > cap * (1.0 + 1e-12) + 1e-12 {
        return Err(Error::InfeasibleMinRate(format!(
            "min-rate shortfall {base_sum} exceeds common budget {cap}"
        )));
    }
    let shares = |t: f64| -> Vec<f64> {
        rates
            .iter()
            .zip(&base)
            .enumerate()
            .map(|(k, (r, b))| (need(k, t) - r).max(*b))
            .collect()
    };
    let fits = |t: f64| shares(t).iter().sum::<f64>() <= cap;
    let mut lo = (0..rates.len())
        .map(|k| level_of(k, rates[k] + base[k]))
        .fold(f64::INFINITY, f64::min);
    if !lo.is_finite() || cap <= base_sum {
        return Ok(base);
    }
    let mut width = lo.abs().max(1.0);
    let mut hi = lo + width;
    let mut guard = 0;
    while fits(hi) {
        lo = hi;
        width *= 2.0;
        hi = lo + width;
        guard += 1;
        if guard > 200 {
            return Err(Error::domain("share allocation level is unbounded"));
        }
    }
    while hi - lo > tol * lo.abs().max(1.0) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(shares(lo))
}

/// Exact maximizer of `min_k (r_k + q_k)/p_k` over `q ≥ 0`, `Σ q ≤ cap`,
/// `r_k + q_k ≥ r_th`.
pub fn allocate_common_rate(
    private_rates: &[f64],
    powers: &[f64],
    cap: f64,
    r_th: f64,
) -> Result<Vec<f64>> {
    allocate_common_rate_tol(
        private_rates,
        powers,
        cap,
        r_th,
        SolverSettings::default().bisection_tol,
    )
}

fn allocate_common_rate_tol(
    private_rates: &[f64],
    powers: &[f64],
    cap: f64,
    r_th: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    if private_rates.len() != powers.len() {
        return Err(Error::dims(format!(
            "{} rates for {} powers",
            private_rates.len(),
            powers.len()
        )));
    }
    if !(cap >= 0.0 && cap.is_finite()) {
        return Err(Error::invalid(format!(
            "common cap must be non-negative, got {cap}"
        )));
    }
    if private_rates.iter().any(|r| !r.is_finite())
        || powers.iter().any(|p| !(*p > 0.0 && p.is_finite()))
    {
        return Err(Error::invalid("rates must be finite and powers positive"));
    }
    allocate_by_level(
        private_rates,
        cap,
        r_th,
        tol,
        |k, s| s / powers[k],
        |k, t| t * powers[k],
    )
}

const SQRT_FLOOR: f64 = 1e-6;

/// `√s` continued linearly below a small floor so it stays finite and concave.
fn ext_sqrt(s: f64) -> (f64, f64) {
    if s >= SQRT_FLOOR {
        let r = s.sqrt();
        (r, 0.5 / r)
    } else {
        let r = SQRT_FLOOR.sqrt();
        (r + (s - SQRT_FLOOR) * 0.5 / r, 0.5 / r)
    }
}

fn ext_sqrt_inverse(y: f64) -> f64 {
    let r = SQRT_FLOOR.sqrt();
    if y >= r {
        y * y
    } else {
        SQRT_FLOOR + (y - r) * 2.0 * r
    }
}

#[derive(Debug, Clone)]
enum Objective {
    /// `2 η_k √s_k − η_k² p_k(x)` with `p_k` the beamformer power model.
    Transform {
        eta: Vec<f64>,
        static_power: f64,
        beta: f64,
        layout: PowerLayout,
    },
    /// `s_k / p_k` with fixed powers.
    Ratio { p: Vec<f64> },
}

/// Index ranges of `W_c` and each `W_k` in the stacked beamformer vector.
#[derive(Debug, Clone)]
struct PowerLayout {
    common: std::ops::Range<usize>,
    private: Vec<std::ops::Range<usize>>,
}

impl PowerLayout {
    fn of(ws: &BeamformerSet) -> Self {
        let c = ws.wc.len();
        let mut offset = c;
        let private = ws
            .wk
            .iter()
            .map(|w| {
                let r = offset..offset + w.len();
                offset += w.len();
                r
            })
            .collect();
        PowerLayout {
            common: 0..c,
            private,
        }
    }

    fn powers(&self, x: &ComplexVector) -> (f64, Vec<f64>) {
        let sq = |r: &std::ops::Range<usize>| x.rows(r.start, r.len()).norm_squared();
        (sq(&self.common), self.private.iter().map(sq).collect())
    }
}

#[derive(Debug, Clone)]
enum Projection {
    /// Power ball; the first `pinned` coordinates are held at zero.
    Power {
        budget: f64,
        pinned: usize,
    },
    UnitDisk,
}

impl Projection {
    fn apply(&self, x: &mut ComplexVector) {
        match self {
            Projection::Power { budget, pinned } => {
                for v in x.iter_mut().take(*pinned) {
                    *v = Complex64::new(0.0, 0.0);
                }
                let total = x.norm_squared();
                if total > *budget {
                    *x *= Complex64::new((budget / total).sqrt(), 0.0);
                }
            }
            Projection::UnitDisk => {
                for v in x.iter_mut() {
                    *v = clamp_unit(*v);
                }
            }
        }
    }
}

/// Sharpness of the smoothed common cap relative to the smoothed min.
const CAP_SHARPNESS: f64 = 10.0;

struct Smoothed {
    phi: f64,
    weights: Vec<f64>,
    rate_gap: Vec<f64>,
    cap_weights: Vec<f64>,
    s: Vec<f64>,
}

struct Stage {
    forms: Vec<[QuadForm; 2]>,
    objective: Objective,
    r_th: f64,
    common: bool,
    projection: Projection,
    tol: f64,
}

/// Surrogate rates and per-user objective values at one point.
struct Point {
    /// Private surrogate rates clamped at zero, matching the reported rates.
    private: Vec<f64>,
    /// Whether the unclamped private surrogate is positive.
    live: Vec<bool>,
    common: Vec<f64>,
    q_private: Vec<ComplexVector>,
    q_common: Vec<ComplexVector>,
    powers: Vec<f64>,
}

impl Stage {
    fn users(&self) -> usize {
        self.forms.len()
    }

    fn point(&self, x: &ComplexVector) -> Point {
        let mut private = Vec::with_capacity(self.users());
        let mut live = Vec::with_capacity(self.users());
        let mut common = Vec::with_capacity(self.users());
        let mut q_private = Vec::with_capacity(self.users());
        let mut q_common = Vec::with_capacity(self.users());
        for [p, c] in &self.forms {
            let (v, qx) = p.eval(x);
            private.push(v.max(0.0));
            live.push(v > 0.0);
            q_private.push(qx);
            if self.common {
                let (v, qx) = c.eval(x);
                common.push(v);
                q_common.push(qx);
            }
        }
        let powers = match &self.objective {
            Objective::Transform {
                static_power,
                beta,
                layout,
                ..
            } => {
                let (pc, pk) = layout.powers(x);
                let k = self.users() as f64;
                pk.iter()
                    .map(|p| static_power + beta * (pc / k + p))
                    .collect()
            }
            Objective::Ratio { p } => p.clone(),
        };
        Point {
            private,
            live,
            common,
            q_private,
            q_common,
            powers,
        }
    }

    fn cap(&self, pt: &Point) -> f64 {
        if self.common {
            common_cap(&pt.common)
        } else {
            0.0
        }
    }

    /// Smoothed common cap (never above the hard one) and its weights over
    /// the users' common-rate bounds.
    fn soft_cap(&self, pt: &Point, rho: f64) -> (f64, Vec<f64>) {
        if !self.common {
            return (0.0, vec![0.0; self.users()]);
        }
        let (c, w) = softmin_weights(&pt.common, CAP_SHARPNESS * rho);
        if c > 0.0 {
            (c, w)
        } else {
            (0.0, vec![0.0; self.users()])
        }
    }

    fn value(&self, k: usize, s: f64, power: f64) -> f64 {
        match &self.objective {
            Objective::Transform { eta, .. } => {
                2.0 * eta[k] * ext_sqrt(s).0 - eta[k] * eta[k] * power
            }
            Objective::Ratio { .. } => s / power,
        }
    }

    fn slope(&self, k: usize, s: f64) -> f64 {
        match &self.objective {
            Objective::Transform { eta, .. } => 2.0 * eta[k] * ext_sqrt(s).1,
            Objective::Ratio { p } => 1.0 / p[k],
        }
    }

    fn need(&self, k: usize, t: f64, power: f64) -> f64 {
        match &self.objective {
            Objective::Transform { eta, .. } => {
                let e = eta[k];
                if e > 0.0 {
                    ext_sqrt_inverse((t + e * e * power) / (2.0 * e))
                } else if t <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    f64::INFINITY
                }
            }
            Objective::Ratio { .. } => t * power,
        }
    }

    /// Exact shares for the hard objective under `cap`; `None` if the
    /// min-rate constraints cannot be met.
    fn allocate(&self, pt: &Point, cap: f64) -> Option<Vec<f64>> {
        allocate_by_level(
            &pt.private,
            cap,
            self.r_th,
            self.tol,
            |k, s| self.value(k, s, pt.powers[k]),
            |k, t| self.need(k, t, pt.powers[k]),
        )
        .ok()
    }

    /// Cap fractions used inside the smoothed iterations: from the exact
    /// shares when feasible, otherwise the min-rate shortfall scaled into
    /// the budget.
    fn fractions(&self, pt: &Point, cap: f64) -> Vec<f64> {
        if cap <= 0.0 {
            return vec![0.0; self.users()];
        }
        let q = self.allocate(pt, cap).unwrap_or_else(|| {
            let short: Vec<f64> = pt
                .private
                .iter()
                .map(|r| (self.r_th - r).max(0.0))
                .collect();
            let total: f64 = short.iter().sum();
            short.iter().map(|s| s * cap / total).collect()
        });
        q.iter().map(|v| (v / cap).clamp(0.0, 1.0)).collect()
    }

    fn hard_objective(&self, pt: &Point, q: &[f64]) -> f64 {
        (0..self.users())
            .map(|k| self.value(k, pt.private[k] + q[k], pt.powers[k]))
            .fold(f64::INFINITY, f64::min)
    }

    fn smoothed(&self, pt: &Point, pi: &[f64], rho: f64, mu: f64) -> f64 {
        self.smoothed_parts(pt, pi, rho, mu).phi
    }

    /// Smoothed penalized objective with shares `q_k = π_k C(x)`.
    fn smoothed_parts(&self, pt: &Point, pi: &[f64], rho: f64, mu: f64) -> Smoothed {
        let (cap, cap_weights) = self.soft_cap(pt, rho);
        let s: Vec<f64> = (0..self.users())
            .map(|k| pt.private[k] + pi[k] * cap)
            .collect();
        let f: Vec<f64> = (0..self.users())
            .map(|k| self.value(k, s[k], pt.powers[k]))
            .collect();
        let (sm, weights) = softmin_weights(&f, rho);
        let rate_gap: Vec<f64> = s.iter().map(|v| (self.r_th - v).max(0.0)).collect();
        let penalty: f64 = rate_gap.iter().map(|g| g * g).sum();
        Smoothed {
            phi: sm - 0.5 * mu * penalty,
            weights,
            rate_gap,
            cap_weights,
            s,
        }
    }

    /// Gradient of the smoothed objective and a positive definite curvature
    /// model `M` (its negative Hessian with rank-one terms symmetrized).
    fn ascent(
        &self,
        x: &ComplexVector,
        pt: &Point,
        pi: &[f64],
        rho: f64,
        mu: f64,
    ) -> (f64, ComplexVector, ComplexMatrix) {
        let sm = self.smoothed_parts(pt, pi, rho, mu);
        let n = x.len();
        let users = self.users();
        let c = |v: f64| Complex64::new(v, 0.0);
        let mut m = ComplexMatrix::zeros(n, n);
        let rank_one = |m: &mut ComplexMatrix, v: &ComplexVector, weight: f64| {
            if weight > 0.0 {
                m.gerc(c(0.5 * weight), v, v, c(1.0));
            }
        };

        // Smoothed cap: gradient and curvature.
        let cap_grads: Vec<Option<ComplexVector>> = (0..users)
            .map(|j| {
                (sm.cap_weights[j] > 0.0).then(|| {
                    let [_, form] = &self.forms[j];
                    (&form.b - &pt.q_common[j]) * c(2.0)
                })
            })
            .collect();
        let mut cap_grad = ComplexVector::zeros(n);
        for (g, w) in cap_grads.iter().zip(&sm.cap_weights) {
            if let Some(g) = g {
                cap_grad += g * c(*w);
            }
        }
        let through_cap: f64 = (0..users)
            .map(|k| (sm.weights[k] * self.slope(k, sm.s[k]) + mu * sm.rate_gap[k]) * pi[k])
            .sum();
        if through_cap > 0.0 {
            let rho_c = CAP_SHARPNESS * rho;
            for (j, g) in cap_grads.iter().enumerate() {
                if let Some(g) = g {
                    let [_, form] = &self.forms[j];
                    m += &form.q * c(2.0 * through_cap * sm.cap_weights[j]);
                    rank_one(
                        &mut m,
                        &(g - &cap_grad),
                        through_cap * rho_c * sm.cap_weights[j],
                    );
                }
            }
        }

        let mut f_grads = Vec::with_capacity(users);
        let mut g = ComplexVector::zeros(n);
        for k in 0..users {
            let [form, _] = &self.forms[k];
            let mut gs = if pt.live[k] {
                (&form.b - &pt.q_private[k]) * c(2.0)
            } else {
                ComplexVector::zeros(n)
            };
            if pi[k] > 0.0 {
                gs += &cap_grad * c(pi[k]);
            }
            let slope = self.slope(k, sm.s[k]);
            let outer = sm.weights[k] * slope + mu * sm.rate_gap[k];
            if pt.live[k] {
                m += &form.q * c(2.0 * outer);
            }
            rank_one(&mut m, &gs, mu * (sm.rate_gap[k] > 0.0) as u8 as f64);
            let mut gf = &gs * c(slope);
            if let Objective::Transform {
                eta, beta, layout, ..
            } = &self.objective
            {
                let e2 = eta[k] * eta[k];
                if sm.s[k] >= SQRT_FLOOR {
                    rank_one(
                        &mut m,
                        &gs,
                        sm.weights[k] * eta[k] / (2.0 * sm.s[k].powf(1.5)),
                    );
                }
                let pw = 2.0 * beta * e2;
                for i in layout.private[k].clone() {
                    gf[i] -= x[i] * pw;
                    m[(i, i)] += c(sm.weights[k] * pw);
                }
                for i in layout.common.clone() {
                    gf[i] -= x[i] * (pw / users as f64);
                    m[(i, i)] += c(sm.weights[k] * pw / users as f64);
                }
            }
            g += &gf * c(sm.weights[k]);
            if sm.rate_gap[k] > 0.0 {
                g += &gs * c(mu * sm.rate_gap[k]);
            }
            f_grads.push(gf);
        }
        let mut mean = ComplexVector::zeros(n);
        for (gf, w) in f_grads.iter().zip(&sm.weights) {
            mean += gf * c(*w);
        }
        for (gf, w) in f_grads.iter().zip(&sm.weights) {
            rank_one(&mut m, &(gf - &mean), rho * w);
        }
        let scale = (0..n).map(|i| m[(i, i)].re).sum::<f64>() / n as f64;
        let ridge = 1e-10 * scale.max(0.0) + 1e-300;
        for i in 0..n {
            m[(i, i)] += c(ridge);
        }
        (sm.phi, g, m)
    }

    /// Continuation over (ρ, μ) with block updates: exact cap fractions,
    /// then one projected ascent step on `x`. The step direction is the
    /// curvature-scaled gradient with Armijo backtracking from `step_init`;
    /// when that fails a plain projected-gradient step is taken.
    fn run(&self, x0: &ComplexVector, settings: &SolverSettings) -> ComplexVector {
        let mut x = x0.clone();
        let mut step = settings.step_init;
        for (rho, mu) in settings.stages() {
            for _ in 0..settings.inner_max_iters {
                let pt = self.point(&x);
                let pi = self.fractions(&pt, self.soft_cap(&pt, rho).0);
                let (phi, g, m) = self.ascent(&x, &pt, &pi, rho, mu);
                let try_dir = |dir: &ComplexVector, alpha0: f64, tries: usize| {
                    let mut alpha = alpha0;
                    for _ in 0..tries {
                        let mut xn = &x + dir * Complex64::new(alpha, 0.0);
                        self.projection.apply(&mut xn);
                        let slope = g.dotc(&(&xn - &x)).re;
                        if !(slope > 0.0) {
                            return None;
                        }
                        let phi_n = self.smoothed(&self.point(&xn), &pi, rho, mu);
                        if phi_n.is_finite() && phi_n >= phi + settings.armijo_slope * slope {
                            return Some((xn, slope, alpha));
                        }
                        alpha *= settings.step_shrink;
                    }
                    None
                };
                let scaled = m.cholesky().map(|ch| ch.solve(&g));
                let mut accepted = scaled.and_then(|dir| try_dir(&dir, settings.step_init, 30));
                if accepted.is_none() {
                    accepted = try_dir(&g, step, 60);
                    if let Some((_, _, alpha)) = &accepted {
                        step = alpha * 2.0;
                    }
                }
                let Some((xn, slope, _)) = accepted else {
                    break;
                };
                x = xn;
                if slope <= settings.inner_tol * phi.abs().max(1.0) {
                    break;
                }
            }
        }
        x
    }

    /// Runs the engine from `x0` and keeps the result only if it improves the
    /// hard surrogate objective (or restores min-rate feasibility).
    fn solve(
        &self,
        x0: &ComplexVector,
        settings: &SolverSettings,
    ) -> Result<(ComplexVector, Vec<f64>)> {
        let start = self.point(x0);
        if start
            .private
            .iter()
            .chain(&start.common)
            .any(|v| !v.is_finite())
        {
            return Err(Error::domain(
                "surrogate objective is not finite at the expansion point",
            ));
        }
        let base = self.allocate(&start, self.cap(&start));
        let x = self.run(x0, settings);
        let pt = self.point(&x);
        let candidate = self.allocate(&pt, self.cap(&pt));
        let keep_new = match (&base, &candidate) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some(q0), Some(q1)) => self.hard_objective(&pt, q1) > self.hard_objective(&start, q0),
        };
        if keep_new {
            Ok((x, candidate.unwrap()))
        } else {
            let q = base.unwrap_or_else(|| {
                let cap = self.cap(&start);
                self.fractions(&start, cap)
                    .iter()
                    .map(|f| f * cap)
                    .collect()
            });
            Ok((x0.clone(), q))
        }
    }
}

fn stack(ws: &BeamformerSet) -> ComplexVector {
    ComplexVector::from_iterator(
        ws.wc.len() + ws.wk.iter().map(|w| w.len()).sum::<usize>(),
        std::iter::once(&ws.wc)
            .chain(&ws.wk)
            .flat_map(|m| m.iter().copied()),
    )
}

fn unstack(template: &BeamformerSet, x: &ComplexVector) -> BeamformerSet {
    let mut offset = 0;
    let mut take = |m: &ComplexMatrix| {
        let out = ComplexMatrix::from_iterator(
            m.nrows(),
            m.ncols(),
            x.iter().skip(offset).take(m.len()).copied(),
        );
        offset += m.len();
        out
    };
    let wc = take(&template.wc);
    let wk = template.wk.iter().map(&mut take).collect();
    BeamformerSet::new(wc, wk)
}

fn floor_eta(eta: &EtaVector) -> Vec<f64> {
    // A zero weight flattens that user's objective; a small positive weight
    // keeps the smoothed min sensitive to its rate.
    let top = eta.0.iter().copied().fold(0.0, f64::max);
    let floor = 1e-6 * top.max(1e-12);
    eta.0.iter().map(|e| e.max(floor)).collect()
}

/// Beamforming stage with the surface fixed. Returns the new beamformers
/// and the surrogate-optimal shares.
pub fn solve_beamforming(
    cs: &ChannelSet,
    ris: &StarRisState,
    ws: &BeamformerSet,
    eta: &EtaVector,
    cfg: &ScenarioConfig,
    settings: &SolverSettings,
    common_stream: bool,
) -> Result<(BeamformerSet, Vec<f64>)> {
    if eta.0.len() != cfg.users {
        return Err(Error::dims(format!(
            "{} weights for {} users",
            eta.0.len(),
            cfg.users
        )));
    }
    if eta.0.iter().all(|e| *e == 0.0) {
        // Constant objective: every feasible point is optimal, keep the current one.
        let frozen = SolverSettings {
            inner_max_iters: 0,
            ..settings.clone()
        };
        let objective = Objective::Transform {
            eta: eta.0.clone(),
            static_power: cfg.static_power,
            beta: cfg.beta,
            layout: PowerLayout::of(ws),
        };
        return bf_stage(cs, ris, ws, cfg, &frozen, common_stream, objective);
    }
    let objective = Objective::Transform {
        eta: floor_eta(eta),
        static_power: cfg.static_power,
        beta: cfg.beta,
        layout: PowerLayout::of(ws),
    };
    bf_stage(cs, ris, ws, cfg, settings, common_stream, objective)
}

fn bf_stage(
    cs: &ChannelSet,
    ris: &StarRisState,
    ws: &BeamformerSet,
    cfg: &ScenarioConfig,
    settings: &SolverSettings,
    common_stream: bool,
    objective: Objective,
) -> Result<(BeamformerSet, Vec<f64>)> {
    let consts = build_bf_constants(cs, ris, ws, cfg)?;
    let stage = Stage {
        forms: bf_quadratic(&consts),
        objective,
        r_th: cfg.r_th,
        common: common_stream,
        projection: Projection::Power {
            budget: cfg.power_budget,
            pinned: if common_stream { 0 } else { ws.wc.len() },
        },
        tol: settings.bisection_tol,
    };
    let mut x0 = stack(ws);
    stage.projection.apply(&mut x0);
    let (x, q) = stage.solve(&x0, settings)?;
    Ok((unstack(ws, &x), q))
}

/// Surface stage with the beamformers fixed. Returns the new coefficients
/// and the surrogate-optimal shares.
pub fn solve_ris(
    cs: &ChannelSet,
    ws: &BeamformerSet,
    ris: &StarRisState,
    cfg: &ScenarioConfig,
    settings: &SolverSettings,
    common_stream: bool,
) -> Result<(StarRisState, Vec<f64>)> {
    let p = (0..cfg.users)
        .map(|k| user_power(ws, k, cfg.static_power, cfg.beta))
        .collect();
    ris_stage(
        cs,
        ws,
        ris,
        cfg,
        settings,
        common_stream,
        Objective::Ratio { p },
    )
}

fn ris_stage(
    cs: &ChannelSet,
    ws: &BeamformerSet,
    ris: &StarRisState,
    cfg: &ScenarioConfig,
    settings: &SolverSettings,
    common_stream: bool,
    objective: Objective,
) -> Result<(StarRisState, Vec<f64>)> {
    let ris = ris.projected();
    let consts = build_ris_constants(cs, ws, &ris, cfg)?;
    let stage = Stage {
        forms: ris_quadratic(&consts, cs, &ris),
        objective,
        r_th: cfg.r_th,
        common: common_stream,
        projection: Projection::UnitDisk,
        tol: settings.bisection_tol,
    };
    let x0 = ComplexVector::from_vec(ris.active_values());
    let (x, q) = stage.solve(&x0, settings)?;
    Ok((
        StarRisState::from_active(ris.mask.clone(), x.as_slice())?,
        q,
    ))
}

/// True rates at a point with the exact share allocation.
/// The flag is `false` when the min-rate constraints cannot be met; the
/// shares are then allocated without them.
pub fn evaluate_allocated(
    cs: &ChannelSet,
    ris: &StarRisState,
    ws: &BeamformerSet,
    cfg: &ScenarioConfig,
    common_stream: bool,
) -> Result<(RateReport, bool)> {
    let hs = compose_all(cs, ris)?;
    let (private, common) = raw_rates(&hs, ws, cfg)?;
    let rates: Vec<f64> = private.iter().map(|r| r.max(0.0)).collect();
    let powers: Vec<f64> = (0..cfg.users)
        .map(|k| user_power(ws, k, cfg.static_power, cfg.beta))
        .collect();
    let cap = if common_stream {
        common_cap(&common)
    } else {
        0.0
    };
    let (q, feasible) = match allocate_common_rate(&rates, &powers, cap, cfg.r_th) {
        Ok(q) => (q, true),
        Err(Error::InfeasibleMinRate(_)) => {
            (allocate_common_rate(&rates, &powers, cap, 0.0)?, false)
        }
        Err(e) => return Err(e),
    };
    Ok((report_from_raw(private, common, ws, &q, cfg)?, feasible))
}

fn dominant_directions(gram: &ComplexMatrix, count: usize) -> ComplexMatrix {
    let n = gram.nrows();
    let eig = SymmetricEigen::new(crate::numerics::hermitian_part(gram));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let mut out = ComplexMatrix::zeros(n, count);
    for (j, &i) in order.iter().take(count).enumerate() {
        out.set_column(j, &eig.eigenvectors.column(i));
    }
    out
}

/// Unit-modulus coefficients aligning each element's cascade with the direct
/// channel of the first user on the side it serves.
pub fn initial_surface(cs: &ChannelSet, mask: &[ElementMode]) -> Result<StarRisState> {
    let values: Vec<Complex64> = mask
        .iter()
        .enumerate()
        .map(|(m, mode)| {
            let Some(k) = (0..cs.users()).find(|&k| mode.serves(cs.side[k])) else {
                return Complex64::new(1.0, 0.0);
            };
            // Tr(G_k^H a c) = conj(a^H G_k c^H) for a = D_k[:, m], c = D[m, :].
            let a = cs.dk[k].column(m);
            let c = cs.d.row(m);
            let t = (a.adjoint() * &cs.gk[k] * c.adjoint())[(0, 0)];
            if t.norm() > 0.0 {
                t / t.norm()
            } else {
                Complex64::new(1.0, 0.0)
            }
        })
        .collect();
    StarRisState::from_active(mask.to_vec(), &values)
}

/// Matched-filter beamformers: dominant eigen-directions of `H_k^H H_k`
/// (normalized sum over users for `W_c`), equal power per message.
pub fn initial_beamformers(
    cs: &ChannelSet,
    ris: &StarRisState,
    cfg: &ScenarioConfig,
    common_stream: bool,
) -> Result<BeamformerSet> {
    let hs = compose_all(cs, ris)?;
    let messages = cfg.users + common_stream as usize;
    let per_message = cfg.power_budget / messages as f64;
    let shaped = |dirs: ComplexMatrix, d: usize| {
        let norm = dirs.norm();
        if norm > 0.0 {
            dirs * Complex64::new((per_message).sqrt() / norm, 0.0)
        } else {
            ComplexMatrix::from_element(
                cfg.bs_antennas,
                d,
                Complex64::new((per_message / (cfg.bs_antennas * d) as f64).sqrt(), 0.0),
            )
        }
    };
    let wk = hs
        .iter()
        .map(|h| shaped(dominant_directions(&(h.adjoint() * h), cfg.d_p), cfg.d_p))
        .collect();
    let wc = if common_stream {
        let mut gram = ComplexMatrix::zeros(cfg.bs_antennas, cfg.bs_antennas);
        for h in &hs {
            let g = h.adjoint() * h;
            let scale = g.trace().re;
            if scale > 0.0 {
                gram += g / Complex64::new(scale, 0.0);
            }
        }
        shaped(dominant_directions(&gram, cfg.d_c), cfg.d_c)
    } else {
        ComplexMatrix::zeros(cfg.bs_antennas, cfg.d_c)
    };
    Ok(BeamformerSet::new(wc, wk))
}

/// The deterministic starting point for a problem.
pub fn default_start(cs: &ChannelSet, cfg: &ScenarioConfig, problem: &Problem) -> Result<Start> {
    let ris = match &problem.surface {
        Surface::Optimized(mask) => initial_surface(cs, mask)?,
        Surface::Fixed(ris) => ris.clone(),
    };
    let ws = initial_beamformers(cs, &ris, cfg, problem.common_stream)?;
    Ok(Start { ws, ris })
}

struct Iterate {
    ws: BeamformerSet,
    ris: StarRisState,
    report: RateReport,
    feasible: bool,
}

impl Iterate {
    fn new(
        cs: &ChannelSet,
        cfg: &ScenarioConfig,
        problem: &Problem,
        mut start: Start,
    ) -> Result<Self> {
        if !problem.common_stream {
            start.ws.wc.fill(Complex64::new(0.0, 0.0));
        }
        if let Surface::Fixed(ris) = &problem.surface {
            start.ris = ris.clone();
        }
        if start.ris.mask != problem.mask() {
            return Err(Error::invalid("start surface uses a different mode mask"));
        }
        start.ris = start.ris.projected();
        start.ws.validate(cfg.power_budget)?;
        let ws = crate::numerics::project_power(&start.ws, cfg.power_budget)?;
        let (report, feasible) =
            evaluate_allocated(cs, &start.ris, &ws, cfg, problem.common_stream)?;
        Ok(Iterate {
            ws,
            ris: start.ris,
            report,
            feasible,
        })
    }

    fn min_rate(&self) -> f64 {
        self.report
            .r_k
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Lexicographic preference: feasible first, then min-EE.
    fn better_than(&self, other: &Iterate) -> bool {
        match (self.feasible, other.feasible) {
            (true, false) => true,
            (false, true) => false,
            (true, true) => self.report.min_ee > other.report.min_ee,
            (false, false) => self.min_rate() > other.min_rate(),
        }
    }
}

/// One AO iteration maximizing the worst user's rate; used to reach
/// min-rate feasibility.
fn feasibility_step(
    cs: &ChannelSet,
    cfg: &ScenarioConfig,
    settings: &SolverSettings,
    problem: &Problem,
    it: &Iterate,
) -> Result<Iterate> {
    let ones = Objective::Ratio {
        p: vec![1.0; cfg.users],
    };
    let (ws, _) = bf_stage(
        cs,
        &it.ris,
        &it.ws,
        cfg,
        settings,
        problem.common_stream,
        ones.clone(),
    )?;
    let ris = match &problem.surface {
        Surface::Optimized(_) => {
            ris_stage(cs, &ws, &it.ris, cfg, settings, problem.common_stream, ones)?.0
        }
        Surface::Fixed(r) => r.clone(),
    };
    let (report, feasible) = evaluate_allocated(cs, &ris, &ws, cfg, problem.common_stream)?;
    Ok(Iterate {
        ws,
        ris,
        report,
        feasible,
    })
}

/// Alternating optimization of beamformers and surface coefficients.
pub fn optimize(
    cs: &ChannelSet,
    cfg: &ScenarioConfig,
    settings: &SolverSettings,
    problem: &Problem,
    init: Init,
) -> Result<SolveResult> {
    cfg.validate()?;
    settings.validate()?;
    if cs.users() != cfg.users || problem.mask().len() != cs.d.nrows() {
        return Err(Error::dims(
            "channels, scenario and surface disagree in size",
        ));
    }
    let starts = match init {
        Init::Default => vec![default_start(cs, cfg, problem)?],
        Init::Given(s) if s.is_empty() => return Err(Error::invalid("no starting points given")),
        Init::Given(s) => s,
    };
    let mut best: Option<Iterate> = None;
    for s in starts {
        let it = Iterate::new(cs, cfg, problem, s)?;
        if best.as_ref().is_none_or(|b| it.better_than(b)) {
            best = Some(it);
        }
    }
    let mut cur = best.expect("at least one start");

    if !cur.feasible {
        for _ in 0..settings.ao_max_iters {
            let next = feasibility_step(cs, cfg, settings, problem, &cur)?;
            let progressed =
                next.min_rate() > cur.min_rate() * (1.0 + settings.ao_tol) || next.feasible;
            if next.better_than(&cur) {
                cur = next;
            }
            if cur.feasible || !progressed {
                break;
            }
        }
        if !cur.feasible {
            return Ok(SolveResult {
                q: cur.report.q.clone(),
                trajectory: vec![cur.report.min_ee],
                ws: cur.ws,
                ris: cur.ris,
                report: cur.report,
                iterations: 0,
                status: SolveStatus::InfeasibleMinRate,
            });
        }
    }

    let mut trajectory = vec![cur.report.min_ee];
    let mut status = SolveStatus::MaxIters;
    let mut iterations = 0;
    for _ in 0..settings.ao_max_iters {
        iterations += 1;
        let prev = cur.report.min_ee;
        let eta = update_eta(&cur.report);
        let (ws, _) = solve_beamforming(
            cs,
            &cur.ris,
            &cur.ws,
            &eta,
            cfg,
            settings,
            problem.common_stream,
        )?;
        let (report, feasible) = evaluate_allocated(cs, &cur.ris, &ws, cfg, problem.common_stream)?;
        if feasible && report.min_ee >= cur.report.min_ee {
            cur = Iterate {
                ws,
                ris: cur.ris,
                report,
                feasible,
            };
        }
        if let Surface::Optimized(_) = problem.surface {
            let (ris, _) = solve_ris(cs, &cur.ws, &cur.ris, cfg, settings, problem.common_stream)?;
            let (report, feasible) =
                evaluate_allocated(cs, &ris, &cur.ws, cfg, problem.common_stream)?;
            if feasible && report.min_ee >= cur.report.min_ee {
                cur = Iterate {
                    ws: cur.ws,
                    ris,
                    report,
                    feasible,
                };
            }
        }
        trajectory.push(cur.report.min_ee);
        let gain = cur.report.min_ee - prev;
        if gain <= settings.ao_tol * prev.abs().max(f64::MIN_POSITIVE) {
            status = SolveStatus::Converged;
            break;
        }
    }
    Ok(SolveResult {
        q: cur.report.q.clone(),
        ws: cur.ws,
        ris: cur.ris,
        report: cur.report,
        trajectory,
        iterations,
        status,
    })
}
