//! Finite-blocklength common and private rates, the common-rate cap, the
//! per-user power model and per-user energy efficiency.
//!
//! All rates are in nats per channel use. Raw rates may be negative when the
//! dispersion penalty exceeds the capacity term; reported rates are clamped.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{compose_all, ChannelSet, StarRisState};
use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, inv_q, power_of, re_inner, ComplexMatrix, HpdMatrix};

/// Common beamformer `W_c` and private beamformers `W_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerSet {
    pub wc: ComplexMatrix,
    pub wk: Vec<ComplexMatrix>,
}

impl BeamformerSet {
    pub fn new(wc: ComplexMatrix, wk: Vec<ComplexMatrix>) -> Self {
        BeamformerSet { wc, wk }
    }

    pub fn zeros(bs_antennas: usize, d_c: usize, d_p: usize, users: usize) -> Self {
        BeamformerSet {
            wc: ComplexMatrix::zeros(bs_antennas, d_c),
            wk: vec![ComplexMatrix::zeros(bs_antennas, d_p); users],
        }
    }

    pub fn for_config(cfg: &ScenarioConfig) -> Self {
        Self::zeros(cfg.bs_antennas, cfg.d_c, cfg.d_p, cfg.users)
    }

    pub fn users(&self) -> usize {
        self.wk.len()
    }

    /// `Tr(W_c W_c^H) + Σ_k Tr(W_k W_k^H)`.
    pub fn total_power(&self) -> f64 {
        power_of(&self.wc) + self.wk.iter().map(power_of).sum::<f64>()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let f = Complex64::new(factor, 0.0);
        BeamformerSet {
            wc: &self.wc * f,
            wk: self.wk.iter().map(|w| w * f).collect(),
        }
    }

    fn matrices(&self) -> impl Iterator<Item = &ComplexMatrix> {
        std::iter::once(&self.wc).chain(self.wk.iter())
    }

    /// Stacked real/imaginary coordinates: `W_c` first, then each `W_k`,
    /// column-major, `(re, im)` per entry.
    pub fn to_real_vec(&self) -> Vec<f64> {
        self.matrices()
            .flat_map(|m| m.iter().flat_map(|z| [z.re, z.im]))
            .collect()
    }

    /// Inverse of [`BeamformerSet::to_real_vec`] using `self` for the shapes.
    pub fn with_real_vec(&self, x: &[f64]) -> Result<Self> {
        let len: usize = self.matrices().map(|m| 2 * m.len()).sum();
        if x.len() != len {
            return Err(Error::dims(format!(
                "expected {len} coordinates, got {}",
                x.len()
            )));
        }
        let mut offset = 0;
        let mut take = |m: &ComplexMatrix| {
            let out = ComplexMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
                let idx = offset + 2 * (j * m.nrows() + i);
                Complex64::new(x[idx], x[idx + 1])
            });
            offset += 2 * m.len();
            out
        };
        let wc = take(&self.wc);
        let wk = self.wk.iter().map(&mut take).collect();
        Ok(BeamformerSet { wc, wk })
    }

    pub fn validate(&self, budget: f64) -> Result<()> {
        for m in self.matrices() {
            ensure_finite(m, "beamformer")?;
        }
        if self.total_power() > budget * (1.0 + 1e-9) {
            return Err(Error::ConstraintViolation(format!(
                "total power {} exceeds budget {budget}",
                self.total_power()
            )));
        }
        Ok(())
    }
}

/// Blocklengths and per-stage error targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FblParams {
    pub n_c: f64,
    pub n_p: f64,
    pub eps_c: f64,
    pub eps_p: f64,
}

impl FblParams {
    pub fn new(n_c: f64, n_p: f64, eps_c: f64, eps_p: f64) -> Result<Self> {
        if !(n_c >= 1.0 && n_p >= 1.0) {
            return Err(Error::invalid("blocklengths must be at least 1"));
        }
        for eps in [eps_c, eps_p] {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Error::invalid(format!("error target {eps} outside (0, 1)")));
            }
        }
        Ok(FblParams {
            n_c,
            n_p,
            eps_c,
            eps_p,
        })
    }

    pub fn from_config(cfg: &ScenarioConfig) -> Result<Self> {
        let eps_c = cfg.eps_total * cfg.eps_c_share;
        FblParams::new(cfg.n_c, cfg.n_p, eps_c, cfg.eps_total - eps_c)
    }

    /// `Q^{-1}(ε_p) / √n_p`.
    pub fn private_factor(&self) -> Result<f64> {
        Ok(inv_q(self.eps_p)? / self.n_p.sqrt())
    }

    /// `Q^{-1}(ε_c) / √n_c`.
    pub fn common_factor(&self) -> Result<f64> {
        Ok(inv_q(self.eps_c)? / self.n_c.sqrt())
    }
}

/// Per-stream received signal factors `H_k W` for one user.
#[derive(Debug, Clone)]
pub(crate) struct Streams {
    pub common: ComplexMatrix,
    pub private: Vec<ComplexMatrix>,
}

impl Streams {
    pub fn new(h: &ComplexMatrix, ws: &BeamformerSet) -> Self {
        Streams {
            common: h * &ws.wc,
            private: ws.wk.iter().map(|w| h * w).collect(),
        }
    }

    pub fn rx_dim(&self) -> usize {
        self.common.nrows()
    }
}

/// Capacity term and dispersion argument `v` of one FBL rate.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RateTerms {
    pub shannon: f64,
    pub v: f64,
}

impl RateTerms {
    pub fn rate(&self, factor: f64) -> f64 {
        self.shannon - factor * self.v.max(0.0).sqrt()
    }
}

pub(crate) fn private_terms(s: &Streams, k: usize, sigma2: f64) -> Result<RateTerms> {
    let dim = s.rx_dim();
    let total = HpdMatrix::noise_plus_grams(dim, sigma2, s.private.iter()).factor()?;
    let interference = HpdMatrix::noise_plus_grams(
        dim,
        sigma2,
        s.private
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .map(|(_, x)| x),
    )
    .factor()?;
    let xk = &s.private[k];
    Ok(RateTerms {
        shannon: total.logdet() - interference.logdet(),
        v: 2.0 * re_inner(xk, &total.solve(xk)),
    })
}

pub(crate) fn common_terms(s: &Streams, sigma2: f64) -> Result<RateTerms> {
    let dim = s.rx_dim();
    let private = HpdMatrix::noise_plus_grams(dim, sigma2, s.private.iter()).factor()?;
    let all = HpdMatrix::noise_plus_grams(
        dim,
        sigma2,
        s.private.iter().chain(std::iter::once(&s.common)),
    )
    .factor()?;
    Ok(RateTerms {
        shannon: all.logdet() - private.logdet(),
        v: 2.0 * re_inner(&s.common, &all.solve(&s.common)),
    })
}

fn check_dims(h: &ComplexMatrix, ws: &BeamformerSet, k: Option<usize>) -> Result<()> {
    ensure_finite(h, "channel")?;
    if ws.wc.nrows() != h.ncols() || ws.wk.iter().any(|w| w.nrows() != h.ncols()) {
        return Err(Error::dims(format!(
            "channel has {} transmit antennas but beamformers have {} rows",
            h.ncols(),
            ws.wc.nrows()
        )));
    }
    if let Some(k) = k {
        if k >= ws.users() {
            return Err(Error::invalid(format!("user index {k} out of range")));
        }
    }
    Ok(())
}

/// Raw private rate of user `k` after removing the common stream.
pub fn private_rate(
    h: &ComplexMatrix,
    ws: &BeamformerSet,
    k: usize,
    sigma2: f64,
    fbl: &FblParams,
) -> Result<f64> {
    check_dims(h, ws, Some(k))?;
    Ok(private_terms(&Streams::new(h, ws), k, sigma2)?.rate(fbl.private_factor()?))
}

/// Raw rate at which a user with channel `h` decodes the common stream.
pub fn common_rate(
    h: &ComplexMatrix,
    ws: &BeamformerSet,
    sigma2: f64,
    fbl: &FblParams,
) -> Result<f64> {
    check_dims(h, ws, None)?;
    Ok(common_terms(&Streams::new(h, ws), sigma2)?.rate(fbl.common_factor()?))
}

/// `max(0, min_k r_kc)`; zero for an empty list.
pub fn common_cap(rates: &[f64]) -> f64 {
    if rates.is_empty() {
        return 0.0;
    }
    rates.iter().copied().fold(f64::INFINITY, f64::min).max(0.0)
}

/// `P_C + β (Tr(W_c W_c^H)/K + Tr(W_k W_k^H))`.
pub fn user_power(ws: &BeamformerSet, k: usize, static_power: f64, beta: f64) -> f64 {
    static_power + beta * (power_of(&ws.wc) / ws.users() as f64 + power_of(&ws.wk[k]))
}

/// Rate per watt with the rate clamped at zero.
pub fn energy_efficiency(rate: f64, power: f64) -> f64 {
    rate.max(0.0) / power
}

/// Rates, powers and efficiencies of every user at one operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub raw_private: Vec<f64>,
    pub raw_common: Vec<f64>,
    /// Clamped private rates.
    pub r_kp: Vec<f64>,
    /// Clamped common decoding rates.
    pub r_kc: Vec<f64>,
    pub common_cap: f64,
    pub q: Vec<f64>,
    pub r_k: Vec<f64>,
    pub p_k: Vec<f64>,
    pub e_k: Vec<f64>,
    pub min_ee: f64,
}

/// Raw private and common rates for already composed channels.
pub(crate) fn raw_rates(
    hs: &[ComplexMatrix],
    ws: &BeamformerSet,
    cfg: &ScenarioConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let fbl = FblParams::from_config(cfg)?;
    let (fp, fc) = (fbl.private_factor()?, fbl.common_factor()?);
    let mut private = Vec::with_capacity(hs.len());
    let mut common = Vec::with_capacity(hs.len());
    for (k, h) in hs.iter().enumerate() {
        check_dims(h, ws, Some(k))?;
        let s = Streams::new(h, ws);
        private.push(private_terms(&s, k, cfg.sigma2)?.rate(fp));
        common.push(common_terms(&s, cfg.sigma2)?.rate(fc));
    }
    Ok((private, common))
}

pub(crate) fn report_from_raw(
    raw_private: Vec<f64>,
    raw_common: Vec<f64>,
    ws: &BeamformerSet,
    q: &[f64],
    cfg: &ScenarioConfig,
) -> Result<RateReport> {
    let users = raw_private.len();
    if q.len() != users {
        return Err(Error::dims(format!("{} shares for {users} users", q.len())));
    }
    if q.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::ConstraintViolation(
            "common-rate shares must be non-negative".into(),
        ));
    }
    let cap = common_cap(&raw_common);
    let total: f64 = q.iter().sum();
    if total > cap + 1e-9 {
        return Err(Error::ConstraintViolation(format!(
            "shares sum to {total} but the common cap is {cap}"
        )));
    }
    let r_kp: Vec<f64> = raw_private.iter().map(|r| r.max(0.0)).collect();
    let r_kc: Vec<f64> = raw_common.iter().map(|r| r.max(0.0)).collect();
    let r_k: Vec<f64> = r_kp.iter().zip(q).map(|(r, q)| r + q).collect();
    let p_k: Vec<f64> = (0..users)
        .map(|k| user_power(ws, k, cfg.static_power, cfg.beta))
        .collect();
    let e_k: Vec<f64> = r_k
        .iter()
        .zip(&p_k)
        .map(|(r, p)| energy_efficiency(*r, *p))
        .collect();
    let min_ee = e_k.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(RateReport {
        raw_private,
        raw_common,
        r_kp,
        r_kc,
        common_cap: cap,
        q: q.to_vec(),
        r_k,
        p_k,
        e_k,
        min_ee,
    })
}

/// Evaluates every rate, power and efficiency for the given shares.
pub fn evaluate(
    cs: &ChannelSet,
    ris: &StarRisState,
    ws: &BeamformerSet,
    q: &[f64],
    cfg: &ScenarioConfig,
) -> Result<RateReport> {
    let hs = compose_all(cs, ris)?;
    let (private, common) = raw_rates(&hs, ws, cfg)?;
    report_from_raw(private, common, ws, q, cfg)
}
