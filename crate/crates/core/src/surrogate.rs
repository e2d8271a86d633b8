//! Concave minorizers of the finite-blocklength rates.
//!
//! Every rate is a function of the received stream factors `X_i = H_k W_i`.
//! Around an expansion point `X̄` the bound
//!
//! ```text
//! r ≥ a + 2 Σ_i Re Tr(A_i X_i^H) − Tr(B (σ² I + Σ_{i∈Q} X_i X_i^H))
//! ```
//!
//! holds for every `X`, with equality and matching first derivatives at
//! `X̄`. The capacity part is the standard log-det minorizer; the dispersion
//! part combines the tangent of `√v` with the joint convexity of
//! `Tr(X^H Y^{-1} X)` to lower-bound `Tr(N T^{-1})`. Since `B` is positive
//! semidefinite the bound is concave in `X`.
//!
//! Beamforming constants expand in `W` with the surface fixed (`X_i = H̄_k W_i`).
//! Surface constants expand in `H_k` with the beamformers fixed
//! (`X_i = H_k W̄_i`), and `H_k` is affine in the coefficients.

use num_complex::Complex64;

use crate::channel::{compose_all, compose_channel, ChannelSet, StarRisState};
use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::numerics::{hermitian_part, re_inner, re_trace, ComplexMatrix, HpdMatrix};
use crate::rates::{BeamformerSet, FblParams, RateReport, Streams};

/// Below this dispersion argument the tangent of `√v` is not usable.
pub const DEGENERATE_V: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpansionKind {
    /// Expanded in the beamformers at a fixed surface configuration.
    Beamforming,
    /// Expanded in the composed channels at fixed beamformers.
    Ris,
}

/// Which rate a surrogate stands in for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateKind {
    Private(usize),
    Common(usize),
}

impl RateKind {
    pub fn user(self) -> usize {
        match self {
            RateKind::Private(k) | RateKind::Common(k) => k,
        }
    }
}

/// One concave lower bound of a single rate.
///
/// For the private rate of user k, `linear_private[k]` is `A_k` and
/// `linear_private[i]` (i ≠ k) is `A_ki`; `linear_common` is zero. For the
/// common rate, `linear_common` is `A_ck` and `linear_private[i]` is `A_cki`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateBound {
    pub a: f64,
    pub linear_private: Vec<ComplexMatrix>,
    pub linear_common: ComplexMatrix,
    pub b: ComplexMatrix,
    /// Whether `X_c X_c^H` enters the quadratic term (common bounds only).
    pub quadratic_common: bool,
    pub v: f64,
    /// Set when `v` was too small for the tangent; the dispersion is then a
    /// fixed worst-case constant.
    pub degenerate: bool,
}

impl RateBound {
    pub(crate) fn value(&self, s: &Streams, sigma2: f64) -> f64 {
        let mut val = self.a - sigma2 * re_trace(&self.b);
        for (l, x) in self.linear_private.iter().zip(&s.private) {
            val += 2.0 * re_inner(l, x) - re_inner(x, &(&self.b * x));
        }
        val += 2.0 * re_inner(&self.linear_common, &s.common);
        if self.quadratic_common {
            val -= re_inner(&s.common, &(&self.b * &s.common));
        }
        val
    }

    /// Adds `weight ×` the gradient with respect to each stream factor.
    pub(crate) fn accumulate(
        &self,
        s: &Streams,
        weight: f64,
        g_private: &mut [ComplexMatrix],
        g_common: &mut ComplexMatrix,
    ) {
        if weight == 0.0 {
            return;
        }
        let w = Complex64::new(2.0 * weight, 0.0);
        for ((g, l), x) in g_private
            .iter_mut()
            .zip(&self.linear_private)
            .zip(&s.private)
        {
            *g += (l - &self.b * x) * w;
        }
        if self.quadratic_common {
            *g_common += (&self.linear_common - &self.b * &s.common) * w;
        } else {
            *g_common += &self.linear_common * w;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserBounds {
    pub private: RateBound,
    pub common: RateBound,
}

impl UserBounds {
    pub fn get(&self, kind: RateKind) -> &RateBound {
        match kind {
            RateKind::Private(_) => &self.private,
            RateKind::Common(_) => &self.common,
        }
    }
}

/// All bound constants for one expansion point.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateConstants {
    pub kind: ExpansionKind,
    /// Composed channels `H̄_k` at the expansion point.
    pub channels: Vec<ComplexMatrix>,
    /// Beamformers `W̄` at the expansion point.
    pub beamformers: BeamformerSet,
    pub users: Vec<UserBounds>,
    /// `min(N_BS, N_u)`.
    pub rank: usize,
    pub sigma2: f64,
}

impl SurrogateConstants {
    pub fn degenerate_users(&self) -> Vec<usize> {
        self.users
            .iter()
            .enumerate()
            .filter(|(_, u)| u.private.degenerate)
            .map(|(k, _)| k)
            .collect()
    }
}

struct Dispersion {
    factor: f64,
    rank: usize,
}

fn private_bound(s: &Streams, k: usize, sigma2: f64, disp: &Dispersion) -> Result<RateBound> {
    let dim = s.rx_dim();
    let users = s.private.len();
    let total = HpdMatrix::noise_plus_grams(dim, sigma2, s.private.iter());
    let interference = HpdMatrix::noise_plus_grams(
        dim,
        sigma2,
        s.private
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .map(|(_, x)| x),
    );
    let tf = total.factor()?;
    let nf = interference.factor()?;
    let t_inv = tf.inverse();
    let n_inv = nf.inverse();
    let xk = &s.private[k];
    let shannon = tf.logdet() - nf.logdet();
    let tr_ns = re_inner(xk, &(&n_inv * xk));
    let v = 2.0 * re_inner(xk, &(&t_inv * xk));
    let zero = ComplexMatrix::zeros(xk.nrows(), xk.ncols());

    let mut linear_private = vec![zero.clone(); users];
    linear_private[k] = &n_inv * xk;
    let mut b = &n_inv - &t_inv;
    let a;
    let degenerate = !(v > DEGENERATE_V);
    if degenerate {
        a = shannon - tr_ns - disp.factor * (2.0 * disp.rank as f64).sqrt();
    } else {
        let g = disp.factor / v.sqrt();
        for (i, x) in s.private.iter().enumerate() {
            if i != k {
                linear_private[i] = &t_inv * x * Complex64::new(g, 0.0);
            }
        }
        b += &t_inv * interference.as_matrix() * &t_inv * Complex64::new(g, 0.0);
        a = shannon
            - tr_ns
            - 0.5 * disp.factor * v.sqrt()
            - g * (dim as f64 - 2.0 * sigma2 * re_trace(&t_inv));
    }
    Ok(RateBound {
        a,
        linear_private,
        linear_common: ComplexMatrix::zeros(s.common.nrows(), s.common.ncols()),
        b: hermitian_part(&b),
        quadratic_common: false,
        v,
        degenerate,
    })
}

fn common_bound(s: &Streams, sigma2: f64, disp: &Dispersion) -> Result<RateBound> {
    let dim = s.rx_dim();
    let private = HpdMatrix::noise_plus_grams(dim, sigma2, s.private.iter());
    let all = HpdMatrix::noise_plus_grams(
        dim,
        sigma2,
        s.private.iter().chain(std::iter::once(&s.common)),
    );
    let tf = private.factor()?;
    let uf = all.factor()?;
    let t_inv = tf.inverse();
    let u_inv = uf.inverse();
    let xc = &s.common;
    let shannon = uf.logdet() - tf.logdet();
    let tr_tc = re_inner(xc, &(&t_inv * xc));
    let v = 2.0 * re_inner(xc, &(&u_inv * xc));

    let mut linear_private: Vec<ComplexMatrix> = s
        .private
        .iter()
        .map(|x| ComplexMatrix::zeros(x.nrows(), x.ncols()))
        .collect();
    let mut b = &t_inv - &u_inv;
    let a;
    let degenerate = !(v > DEGENERATE_V);
    if degenerate {
        a = shannon - tr_tc - disp.factor * (2.0 * disp.rank as f64).sqrt();
    } else {
        let g = disp.factor / v.sqrt();
        for (l, x) in linear_private.iter_mut().zip(&s.private) {
            *l = &u_inv * x * Complex64::new(g, 0.0);
        }
        b += &u_inv * private.as_matrix() * &u_inv * Complex64::new(g, 0.0);
        a = shannon
            - tr_tc
            - 0.5 * disp.factor * v.sqrt()
            - g * (dim as f64 - 2.0 * sigma2 * re_trace(&u_inv));
    }
    Ok(RateBound {
        a,
        linear_private,
        linear_common: &t_inv * xc,
        b: hermitian_part(&b),
        quadratic_common: true,
        v,
        degenerate,
    })
}

fn build(
    kind: ExpansionKind,
    channels: Vec<ComplexMatrix>,
    ws: &BeamformerSet,
    cfg: &ScenarioConfig,
) -> Result<SurrogateConstants> {
    if ws.users() != channels.len() {
        return Err(Error::dims(format!(
            "{} beamformers for {} users",
            ws.users(),
            channels.len()
        )));
    }
    let fbl = FblParams::from_config(cfg)?;
    let rank = cfg.bs_antennas.min(cfg.user_antennas);
    let private = Dispersion {
        factor: fbl.private_factor()?,
        rank,
    };
    let common = Dispersion {
        factor: fbl.common_factor()?,
        rank,
    };
    let users = channels
        .iter()
        .enumerate()
        .map(|(k, h)| {
            let s = Streams::new(h, ws);
            Ok(UserBounds {
                private: private_bound(&s, k, cfg.sigma2, &private)?,
                common: common_bound(&s, cfg.sigma2, &common)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SurrogateConstants {
        kind,
        channels,
        beamformers: ws.clone(),
        users,
        rank,
        sigma2: cfg.sigma2,
    })
}

/// Beamforming-stage constants expanded at `expansion` with the surface fixed.
pub fn build_bf_constants(
    cs: &ChannelSet,
    ris: &StarRisState,
    expansion: &BeamformerSet,
    cfg: &ScenarioConfig,
) -> Result<SurrogateConstants> {
    expansion.validate(cfg.power_budget)?;
    build(
        ExpansionKind::Beamforming,
        compose_all(cs, ris)?,
        expansion,
        cfg,
    )
}

/// Surface-stage constants expanded at `expansion` with the beamformers fixed.
pub fn build_ris_constants(
    cs: &ChannelSet,
    ws: &BeamformerSet,
    expansion: &StarRisState,
    cfg: &ScenarioConfig,
) -> Result<SurrogateConstants> {
    expansion.validate()?;
    build(ExpansionKind::Ris, compose_all(cs, expansion)?, ws, cfg)
}

fn check_shape(consts: &SurrogateConstants, ws: &BeamformerSet, kind: RateKind) -> Result<()> {
    let k = kind.user();
    if k >= consts.users.len() {
        return Err(Error::invalid(format!("user index {k} out of range")));
    }
    let template = &consts.beamformers;
    let same = ws.users() == template.users()
        && ws.wc.shape() == template.wc.shape()
        && ws
            .wk
            .iter()
            .zip(&template.wk)
            .all(|(a, b)| a.shape() == b.shape());
    if !same {
        return Err(Error::dims(
            "beamformer shapes differ from the expansion point",
        ));
    }
    Ok(())
}

fn zero_stream_grads(s: &Streams) -> (Vec<ComplexMatrix>, ComplexMatrix) {
    (
        s.private
            .iter()
            .map(|x| ComplexMatrix::zeros(x.nrows(), x.ncols()))
            .collect(),
        ComplexMatrix::zeros(s.common.nrows(), s.common.ncols()),
    )
}

/// Value and beamformer gradient of a beamforming-stage surrogate.
///
/// The gradient is returned in the shape of a [`BeamformerSet`]; each entry
/// holds `∂/∂Re + j ∂/∂Im` of the corresponding beamformer entry.
pub fn eval_bf_surrogate(
    consts: &SurrogateConstants,
    ws: &BeamformerSet,
    kind: RateKind,
) -> Result<(f64, BeamformerSet)> {
    check_shape(consts, ws, kind)?;
    let k = kind.user();
    let h = &consts.channels[k];
    let s = Streams::new(h, ws);
    let bound = consts.users[k].get(kind);
    let value = bound.value(&s, consts.sigma2);
    let (mut gp, mut gc) = zero_stream_grads(&s);
    bound.accumulate(&s, 1.0, &mut gp, &mut gc);
    let ha = h.adjoint();
    let grad = BeamformerSet::new(&ha * gc, gp.iter().map(|g| &ha * g).collect());
    Ok((value, grad))
}

/// Gradient with respect to user k's surface coefficients given the
/// gradient `g_h` with respect to the composed channel `H_k`.
///
/// Entry `m` is `(D_k^H G_H D^H)_{mm}` for elements that serve the user's
/// side and zero otherwise.
pub(crate) fn channel_grad_to_ris(
    cs: &ChannelSet,
    mask_serves: &[bool],
    k: usize,
    g_h: &ComplexMatrix,
    out: &mut [Complex64],
) {
    let left = cs.dk[k].adjoint() * g_h;
    for (m, o) in out.iter_mut().enumerate() {
        if mask_serves[m] {
            let mut acc = Complex64::new(0.0, 0.0);
            for b in 0..cs.d.ncols() {
                acc += left[(m, b)] * cs.d[(m, b)].conj();
            }
            *o += acc;
        }
    }
}

/// Value and coefficient gradient of a surface-stage surrogate.
///
/// The gradient has one entry per element (the element's active
/// coefficient); entries for elements on the other side are zero.
pub fn eval_ris_surrogate(
    consts: &SurrogateConstants,
    cs: &ChannelSet,
    ris: &StarRisState,
    kind: RateKind,
) -> Result<(f64, Vec<Complex64>)> {
    let k = kind.user();
    if k >= consts.users.len() {
        return Err(Error::invalid(format!("user index {k} out of range")));
    }
    let ws = &consts.beamformers;
    let h = compose_channel(cs, ris, k)?;
    let s = Streams::new(&h, ws);
    let bound = consts.users[k].get(kind);
    let value = bound.value(&s, consts.sigma2);
    let (mut gp, mut gc) = zero_stream_grads(&s);
    bound.accumulate(&s, 1.0, &mut gp, &mut gc);
    let mut g_h = gc * ws.wc.adjoint();
    for (g, w) in gp.iter().zip(&ws.wk) {
        g_h += g * w.adjoint();
    }
    let serves: Vec<bool> = ris.mask.iter().map(|m| m.serves(cs.side[k])).collect();
    let mut grad = vec![Complex64::new(0.0, 0.0); ris.len()];
    channel_grad_to_ris(cs, &serves, k, &g_h, &mut grad);
    Ok((value, grad))
}

/// A bound written over a stacked complex vector as
/// `c + 2 Re(b^H x) − x^H Q x` with `Q` Hermitian positive semidefinite.
#[derive(Debug, Clone)]
pub(crate) struct QuadForm {
    pub c: f64,
    pub b: ComplexVector,
    pub q: ComplexMatrix,
}

pub(crate) type ComplexVector = nalgebra::DVector<Complex64>;

impl QuadForm {
    /// Value and `Q x` (the gradient is `2 (b − Q x)`).
    pub fn eval(&self, x: &ComplexVector) -> (f64, ComplexVector) {
        let qx = &self.q * x;
        let value = self.c + 2.0 * self.b.dotc(x).re - x.dotc(&qx).re;
        (value, qx)
    }
}

fn stack_columns<'a>(blocks: impl Iterator<Item = &'a ComplexMatrix>) -> ComplexVector {
    let data: Vec<Complex64> = blocks.flat_map(|m| m.iter().copied()).collect();
    ComplexVector::from_vec(data)
}

/// Rewrites the beamforming bounds over `x = [vec W_c; vec W_1; …]`
/// (column-major), the layout of [`BeamformerSet::to_real_vec`].
pub(crate) fn bf_quadratic(consts: &SurrogateConstants) -> Vec<[QuadForm; 2]> {
    let ws = &consts.beamformers;
    let nbs = ws.wc.nrows();
    let blocks: Vec<(usize, bool)> = std::iter::once((ws.wc.ncols(), true))
        .chain(ws.wk.iter().map(|w| (w.ncols(), false)))
        .collect();
    let dim = nbs * blocks.iter().map(|b| b.0).sum::<usize>();
    let form = |h: &ComplexMatrix, bound: &RateBound| {
        let ha = h.adjoint();
        let lin = std::iter::once(&bound.linear_common)
            .chain(&bound.linear_private)
            .map(|l| &ha * l);
        let lin: Vec<ComplexMatrix> = lin.collect();
        let bt = hermitian_part(&(&ha * &bound.b * h));
        let mut q = ComplexMatrix::zeros(dim, dim);
        let mut offset = 0;
        for (cols, is_common) in &blocks {
            for _ in 0..*cols {
                if !is_common || bound.quadratic_common {
                    q.view_mut((offset, offset), (nbs, nbs)).copy_from(&bt);
                }
                offset += nbs;
            }
        }
        QuadForm {
            c: bound.a - consts.sigma2 * re_trace(&bound.b),
            b: stack_columns(lin.iter()),
            q,
        }
    };
    consts
        .channels
        .iter()
        .zip(&consts.users)
        .map(|(h, u)| [form(h, &u.private), form(h, &u.common)])
        .collect()
}

/// Rewrites the surface bounds over the vector of active element
/// coefficients. Elements that do not serve a user's side have zero rows
/// and columns in that user's forms.
pub(crate) fn ris_quadratic(
    consts: &SurrogateConstants,
    cs: &ChannelSet,
    ris: &StarRisState,
) -> Vec<[QuadForm; 2]> {
    let ws = &consts.beamformers;
    let m = ris.len();
    let streams: Vec<&ComplexMatrix> = std::iter::once(&ws.wc).chain(&ws.wk).collect();
    let cascades: Vec<ComplexMatrix> = streams.iter().map(|w| &cs.d * *w).collect();
    let mut grams_private = ComplexMatrix::zeros(m, m);
    for c in &cascades[1..] {
        grams_private += c * c.adjoint();
    }
    let grams_all = &grams_private + &cascades[0] * cascades[0].adjoint();
    (0..consts.users.len())
        .map(|k| {
            let a = &cs.dk[k];
            let serves: Vec<bool> = ris.mask.iter().map(|e| e.serves(cs.side[k])).collect();
            let direct: Vec<ComplexMatrix> = streams.iter().map(|w| &cs.gk[k] * *w).collect();
            let form = |bound: &RateBound| {
                let lin: Vec<&ComplexMatrix> = std::iter::once(&bound.linear_common)
                    .chain(&bound.linear_private)
                    .collect();
                let mut c = bound.a - consts.sigma2 * re_trace(&bound.b);
                let mut mix = ComplexMatrix::zeros(a.nrows(), m);
                for (s, ((l, x0), cas)) in lin.iter().zip(&direct).zip(&cascades).enumerate() {
                    let quadratic = s > 0 || bound.quadratic_common;
                    c += 2.0 * re_inner(l, x0);
                    let mut ms = (*l).clone();
                    if quadratic {
                        let bx = &bound.b * x0;
                        c -= re_inner(x0, &bx);
                        ms -= bx;
                    }
                    mix += ms * cas.adjoint();
                }
                let ah = a.adjoint();
                let left = &ah * &mix;
                let gram = if bound.quadratic_common {
                    &grams_all
                } else {
                    &grams_private
                };
                let aba = &ah * &bound.b * a;
                let mut q = ComplexMatrix::zeros(m, m);
                let mut b = ComplexVector::zeros(m);
                for i in 0..m {
                    if !serves[i] {
                        continue;
                    }
                    b[i] = left[(i, i)];
                    for j in 0..m {
                        if serves[j] {
                            q[(i, j)] = aba[(i, j)] * gram[(j, i)];
                        }
                    }
                }
                QuadForm {
                    c,
                    b,
                    q: hermitian_part(&q),
                }
            };
            let u = &consts.users[k];
            [form(&u.private), form(&u.common)]
        })
        .collect()
}

/// Quadratic-transform weights `η_k = √r_k / p_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaVector(pub Vec<f64>);

pub fn update_eta(report: &RateReport) -> EtaVector {
    EtaVector(
        report
            .r_k
            .iter()
            .zip(&report.p_k)
            .map(|(r, p)| r.max(0.0).sqrt() / p)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{default_mode_mask, generate_channels, random_ris, trial_rng};
    use crate::numerics::{fd_gradient_check, inv_q};
    use crate::rates::{common_rate, evaluate, private_rate};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: Complex64) -> ComplexMatrix {
        ComplexMatrix::from_element(1, 1, v)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> ComplexMatrix {
        ComplexMatrix::from_fn(r, c, |_, _| {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * scale
        })
    }

    fn setup(seed: u64) -> (ScenarioConfig, ChannelSet, StarRisState, BeamformerSet) {
        let mut cfg = ScenarioConfig::with_users(4, seed);
        cfg.ris_elements = 8;
        cfg.power_budget = 10.0;
        let cs = generate_channels(&cfg, &mut trial_rng(seed, 0)).unwrap();
        let mut rng = trial_rng(seed, 1);
        let ris = random_ris(default_mode_mask(8).unwrap(), &mut rng);
        let ws = BeamformerSet::new(
            random_matrix(&mut rng, 2, 2, 0.5),
            (0..4).map(|_| random_matrix(&mut rng, 2, 2, 0.5)).collect(),
        );
        (cfg, cs, ris, ws)
    }

    fn true_rate(
        cfg: &ScenarioConfig,
        h: &ComplexMatrix,
        ws: &BeamformerSet,
        kind: RateKind,
    ) -> f64 {
        let f = FblParams::from_config(cfg).unwrap();
        match kind {
            RateKind::Private(k) => private_rate(h, ws, k, cfg.sigma2, &f).unwrap(),
            RateKind::Common(_) => common_rate(h, ws, cfg.sigma2, &f).unwrap(),
        }
    }

    fn kinds() -> Vec<RateKind> {
        (0..4)
            .flat_map(|k| [RateKind::Private(k), RateKind::Common(k)])
            .collect()
    }

    #[test]
    fn scalar_single_user_constants() {
        // One user, scalar channel h = 1, σ² = 1, private gain g = |w|² = 1.
        let mut cfg = ScenarioConfig::with_users(1, 1);
        cfg.bs_antennas = 1;
        cfg.user_antennas = 1;
        cfg.d_c = 1;
        cfg.d_p = 1;
        cfg.sigma2 = 1.0;
        let h = scalar(Complex64::new(1.0, 0.0));
        let ws = BeamformerSet::new(
            scalar(Complex64::new(0.0, 0.0)),
            vec![scalar(Complex64::new(1.0, 0.0))],
        );
        let c = build(ExpansionKind::Beamforming, vec![h], &ws, &cfg).unwrap();
        let fp = inv_q(cfg.eps_total / 2.0).unwrap() / 16.0;
        // Hand reduction: N = 1, T = 2, v = 2·(1/2) = 1, A_k = 1, B = 1 − 1/2 + fp·(1/2)(1)(1/2),
        // a = ln 2 − 1 − fp/2 − fp·(1 − 2·(1/2)).
        let p = &c.users[0].private;
        assert!((p.v - 1.0).abs() < 1e-12);
        assert!((p.linear_private[0][(0, 0)].re - 1.0).abs() < 1e-12);
        assert!((p.b[(0, 0)].re - (0.5 + fp / 4.0)).abs() < 1e-12);
        assert!((p.a - (2f64.ln() - 1.0 - fp / 2.0)).abs() < 1e-12);
        assert!(!p.degenerate);
        // Common stream is off, so the common bound is degenerate.
        assert!(c.users[0].common.degenerate);
        // K = 1: no cross terms apart from the user's own.
        assert_eq!(p.linear_private.len(), 1);
        let again = build(
            ExpansionKind::Beamforming,
            vec![scalar(Complex64::new(1.0, 0.0))],
            &ws,
            &cfg,
        )
        .unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn bf_surrogate_tight_at_expansion() {
        for seed in 0..5 {
            let (cfg, cs, ris, ws) = setup(seed);
            let c = build_bf_constants(&cs, &ris, &ws, &cfg).unwrap();
            for kind in kinds() {
                let (val, _) = eval_bf_surrogate(&c, &ws, kind).unwrap();
                let truth = true_rate(&cfg, &c.channels[kind.user()], &ws, kind);
                assert!((val - truth).abs() < 1e-6, "{kind:?}: {val} vs {truth}");
            }
        }
    }

    #[test]
    fn bf_surrogate_lower_bounds_rate() {
        let (cfg, cs, ris, ws) = setup(11);
        let c = build_bf_constants(&cs, &ris, &ws, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let w = BeamformerSet::new(
                random_matrix(&mut rng, 2, 2, 0.7),
                (0..4).map(|_| random_matrix(&mut rng, 2, 2, 0.7)).collect(),
            );
            for kind in kinds() {
                let (val, _) = eval_bf_surrogate(&c, &w, kind).unwrap();
                let truth = true_rate(&cfg, &c.channels[kind.user()], &w, kind);
                assert!(val <= truth + 1e-8, "{kind:?}: {val} > {truth}");
            }
        }
    }

    #[test]
    fn bf_gradient_matches_finite_differences() {
        let (cfg, cs, ris, ws) = setup(3);
        let c = build_bf_constants(&cs, &ris, &ws, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let at = BeamformerSet::new(
            random_matrix(&mut rng, 2, 2, 0.5),
            (0..4).map(|_| random_matrix(&mut rng, 2, 2, 0.5)).collect(),
        );
        for kind in kinds() {
            let (_, g) = eval_bf_surrogate(&c, &at, kind).unwrap();
            let f = |x: &[f64]| {
                eval_bf_surrogate(&c, &at.with_real_vec(x).unwrap(), kind)
                    .unwrap()
                    .0
            };
            let err = fd_gradient_check(f, &at.to_real_vec(), &g.to_real_vec()).unwrap();
            assert!(err <= 1e-4, "{kind:?}: {err}");
        }
    }

    fn ris_real(ris: &StarRisState) -> Vec<f64> {
        ris.active_values()
            .iter()
            .flat_map(|z| [z.re, z.im])
            .collect()
    }

    fn ris_from_real(mask: &[crate::channel::ElementMode], x: &[f64]) -> StarRisState {
        let v: Vec<Complex64> = x.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect();
        StarRisState::from_active(mask.to_vec(), &v).unwrap()
    }

    #[test]
    fn ris_surrogate_tight_bounding_and_differentiable() {
        let (cfg, cs, ris, ws) = setup(21);
        let c = build_ris_constants(&cs, &ws, &ris, &cfg).unwrap();
        for kind in kinds() {
            let (val, _) = eval_ris_surrogate(&c, &cs, &ris, kind).unwrap();
            let truth = true_rate(
                &cfg,
                &compose_channel(&cs, &ris, kind.user()).unwrap(),
                &ws,
                kind,
            );
            assert!((val - truth).abs() < 1e-6, "{kind:?}");
        }
        let mut rng = trial_rng(21, 7);
        for _ in 0..200 {
            let mut other = random_ris(ris.mask.clone(), &mut rng);
            let scale: f64 = rng.random();
            other
                .theta_t
                .iter_mut()
                .chain(other.theta_r.iter_mut())
                .for_each(|z| *z *= scale);
            for kind in kinds() {
                let (val, _) = eval_ris_surrogate(&c, &cs, &other, kind).unwrap();
                let truth = true_rate(
                    &cfg,
                    &compose_channel(&cs, &other, kind.user()).unwrap(),
                    &ws,
                    kind,
                );
                assert!(val <= truth + 1e-8, "{kind:?}: {val} > {truth}");
            }
        }
        let probe = random_ris(ris.mask.clone(), &mut rng);
        for kind in kinds() {
            let (_, g) = eval_ris_surrogate(&c, &cs, &probe, kind).unwrap();
            let g_real: Vec<f64> = g.iter().flat_map(|z| [z.re, z.im]).collect();
            let f = |x: &[f64]| {
                eval_ris_surrogate(&c, &cs, &ris_from_real(&ris.mask, x), kind)
                    .unwrap()
                    .0
            };
            let err = fd_gradient_check(f, &ris_real(&probe), &g_real).unwrap();
            assert!(err <= 1e-4, "{kind:?}: {err}");
        }
    }

    #[test]
    fn ris_gradient_zero_for_other_side() {
        let (cfg, cs, ris, ws) = setup(4);
        let c = build_ris_constants(&cs, &ws, &ris, &cfg).unwrap();
        // Users 0 and 1 reflect; elements 0..4 transmit.
        let (_, g) = eval_ris_surrogate(&c, &cs, &ris, RateKind::Private(0)).unwrap();
        assert!(g[..4].iter().all(|z| *z == Complex64::new(0.0, 0.0)));
        assert!(g[4..].iter().any(|z| z.norm() > 0.0));
    }

    #[test]
    fn concave_along_random_directions() {
        let (cfg, cs, ris, ws) = setup(8);
        let c = build_bf_constants(&cs, &ris, &ws, &cfg).unwrap();
        for u in &c.users {
            for b in [&u.private.b, &u.common.b] {
                let eig = nalgebra::SymmetricEigen::new(b.clone());
                assert!(eig.eigenvalues.iter().all(|l| *l >= -1e-10 * b.norm()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = ws.to_real_vec();
        for _ in 0..20 {
            let dir: Vec<f64> = (0..x0.len()).map(|_| rng.random::<f64>() - 0.5).collect();
            for kind in kinds() {
                let at = |t: f64| {
                    let x: Vec<f64> = x0.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
                    eval_bf_surrogate(&c, &ws.with_real_vec(&x).unwrap(), kind)
                        .unwrap()
                        .0
                };
                let t = 0.1;
                let second = at(t) - 2.0 * at(0.0) + at(-t);
                assert!(
                    second <= 1e-10 * (1.0 + at(0.0).abs()),
                    "{kind:?}: {second}"
                );
            }
        }
    }

    #[test]
    fn quadratic_forms_match_direct_evaluation() {
        let (cfg, cs, ris, ws) = setup(13);
        let bf = build_bf_constants(&cs, &ris, &ws, &cfg).unwrap();
        let bf_forms = bf_quadratic(&bf);
        let rc = build_ris_constants(&cs, &ws, &ris, &cfg).unwrap();
        let ris_forms = ris_quadratic(&rc, &cs, &ris);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let w = BeamformerSet::new(
                random_matrix(&mut rng, 2, 2, 0.7),
                (0..4).map(|_| random_matrix(&mut rng, 2, 2, 0.7)).collect(),
            );
            let xw = stack_columns(std::iter::once(&w.wc).chain(&w.wk));
            let theta = random_ris(ris.mask.clone(), &mut rng);
            let xt = ComplexVector::from_vec(theta.active_values());
            for kind in kinds() {
                let slot = matches!(kind, RateKind::Common(_)) as usize;
                let (direct, grad) = eval_bf_surrogate(&bf, &w, kind).unwrap();
                let form = &bf_forms[kind.user()][slot];
                let (val, qx) = form.eval(&xw);
                assert!(
                    (val - direct).abs() < 1e-8 * (1.0 + direct.abs()),
                    "{kind:?}"
                );
                let g = (&form.b - qx) * Complex64::new(2.0, 0.0);
                let expect = stack_columns(std::iter::once(&grad.wc).chain(&grad.wk));
                assert!((g - &expect).norm() <= 1e-8 * (1.0 + expect.norm()));

                let (direct, grad) = eval_ris_surrogate(&rc, &cs, &theta, kind).unwrap();
                let form = &ris_forms[kind.user()][slot];
                let (val, qx) = form.eval(&xt);
                assert!(
                    (val - direct).abs() < 1e-8 * (1.0 + direct.abs()),
                    "{kind:?}"
                );
                let g = (&form.b - qx) * Complex64::new(2.0, 0.0);
                let expect = ComplexVector::from_vec(grad);
                assert!((g - &expect).norm() <= 1e-8 * (1.0 + expect.norm()));
            }
        }
    }

    #[test]
    fn eta_update() {
        let rep = RateReport {
            raw_private: vec![4.0, 0.0],
            raw_common: vec![0.0, 0.0],
            r_kp: vec![4.0, 0.0],
            r_kc: vec![0.0, 0.0],
            common_cap: 0.0,
            q: vec![0.0, 0.0],
            r_k: vec![4.0, 0.0],
            p_k: vec![2.0, 1.0],
            e_k: vec![2.0, 0.0],
            min_ee: 0.0,
        };
        let eta = update_eta(&rep);
        assert_eq!(eta.0, vec![1.0, 0.0]);
        // Quadratic-transform fixed point: 2η√r − η²p = r/p.
        let (r, p) = (3.7f64, 1.9f64);
        let e = r.sqrt() / p;
        assert!((2.0 * e * r.sqrt() - e * e * p - r / p).abs() < 1e-14);
    }

    #[test]
    fn degenerate_private_expansion_is_flagged_and_bounding() {
        let (cfg, cs, ris, mut ws) = setup(2);
        ws.wk[1] = ComplexMatrix::zeros(2, 2);
        let c = build_bf_constants(&cs, &ris, &ws, &cfg).unwrap();
        assert_eq!(c.degenerate_users(), vec![1]);
        let rep = evaluate(&cs, &ris, &ws, &[0.0; 4], &cfg).unwrap();
        let (val, _) = eval_bf_surrogate(&c, &ws, RateKind::Private(1)).unwrap();
        assert!(val <= rep.raw_private[1]);
    }
}
