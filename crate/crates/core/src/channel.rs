//! Channel realizations and composition of the end-to-end user channels.
//!
//! The BS→surface link `D` and the surface→user links `D_k` are Ricean with
//! a uniform-linear-array line-of-sight component; the direct BS→user links
//! `G_k` are Rayleigh. Every link is scaled by a log-distance path loss.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{ScenarioConfig, Side};
use crate::error::{Error, Result};
use crate::numerics::{clamp_unit, project_unit_disk, ComplexMatrix};

/// Operating mode of one surface element under mode switching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementMode {
    Transmit,
    Reflect,
}

impl ElementMode {
    pub fn serves(self, side: Side) -> bool {
        matches!(
            (self, side),
            (ElementMode::Transmit, Side::Transmit) | (ElementMode::Reflect, Side::Reflect)
        )
    }
}

/// First half of the elements transmit-only, second half reflect-only.
pub fn default_mode_mask(elements: usize) -> Result<Vec<ElementMode>> {
    if !elements.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "element count must be even, got {elements}"
        )));
    }
    let half = elements / 2;
    Ok((0..elements)
        .map(|m| {
            if m < half {
                ElementMode::Transmit
            } else {
                ElementMode::Reflect
            }
        })
        .collect())
}

/// Every element reflect-only (a conventional reflecting surface).
pub fn all_reflect_mask(elements: usize) -> Vec<ElementMode> {
    vec![ElementMode::Reflect; elements]
}

/// Transmission and reflection coefficients under a mode mask.
#[derive(Debug, Clone, PartialEq)]
pub struct StarRisState {
    pub theta_t: Vec<Complex64>,
    pub theta_r: Vec<Complex64>,
    pub mask: Vec<ElementMode>,
}

impl StarRisState {
    pub fn zeros(mask: Vec<ElementMode>) -> Self {
        let m = mask.len();
        StarRisState {
            theta_t: vec![Complex64::new(0.0, 0.0); m],
            theta_r: vec![Complex64::new(0.0, 0.0); m],
            mask,
        }
    }

    /// Places one coefficient per element into the vector selected by its mode.
    pub fn from_active(mask: Vec<ElementMode>, values: &[Complex64]) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::dims(format!(
                "{} coefficients for {} elements",
                values.len(),
                mask.len()
            )));
        }
        let mut state = StarRisState::zeros(mask);
        for (m, &v) in values.iter().enumerate() {
            match state.mask[m] {
                ElementMode::Transmit => state.theta_t[m] = v,
                ElementMode::Reflect => state.theta_r[m] = v,
            }
        }
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// The coefficient of each element in its own mode.
    pub fn active_values(&self) -> Vec<Complex64> {
        self.mask
            .iter()
            .enumerate()
            .map(|(m, mode)| match mode {
                ElementMode::Transmit => self.theta_t[m],
                ElementMode::Reflect => self.theta_r[m],
            })
            .collect()
    }

    /// The diagonal seen by users on `side`.
    pub fn coefficients(&self, side: Side) -> &[Complex64] {
        match side {
            Side::Transmit => &self.theta_t,
            Side::Reflect => &self.theta_r,
        }
    }

    /// Projects both vectors onto their masked unit disks.
    pub fn projected(&self) -> StarRisState {
        let t_on: Vec<bool> = self
            .mask
            .iter()
            .map(|&m| m == ElementMode::Transmit)
            .collect();
        let r_on: Vec<bool> = self
            .mask
            .iter()
            .map(|&m| m == ElementMode::Reflect)
            .collect();
        StarRisState {
            theta_t: project_unit_disk(&self.theta_t, &t_on).expect("lengths agree"),
            theta_r: project_unit_disk(&self.theta_r, &r_on).expect("lengths agree"),
            mask: self.mask.clone(),
        }
    }

    /// Checks the mode-switching and unit-amplitude constraints.
    pub fn validate(&self) -> Result<()> {
        let m = self.mask.len();
        if self.theta_t.len() != m || self.theta_r.len() != m {
            return Err(Error::dims(
                "coefficient vectors differ in length from the mask",
            ));
        }
        for i in 0..m {
            let (on, off) = match self.mask[i] {
                ElementMode::Transmit => (self.theta_t[i], self.theta_r[i]),
                ElementMode::Reflect => (self.theta_r[i], self.theta_t[i]),
            };
            if off != Complex64::new(0.0, 0.0) {
                return Err(Error::ConstraintViolation(format!(
                    "element {i} is active in its disabled mode"
                )));
            }
            if !(on.norm() <= 1.0 + 1e-12) {
                return Err(Error::ConstraintViolation(format!(
                    "element {i} exceeds unit amplitude"
                )));
            }
        }
        Ok(())
    }

    /// Re-expresses this state under another mask: elements keep their
    /// coefficient when their mode is unchanged and take `fill` otherwise.
    pub fn remapped(&self, mask: &[ElementMode], fill: &[Complex64]) -> Result<StarRisState> {
        if mask.len() != self.len() || fill.len() != mask.len() {
            return Err(Error::dims("remap requires equal element counts"));
        }
        let old = self.active_values();
        let values: Vec<Complex64> = (0..mask.len())
            .map(|m| {
                if mask[m] == self.mask[m] {
                    clamp_unit(old[m])
                } else {
                    fill[m]
                }
            })
            .collect();
        StarRisState::from_active(mask.to_vec(), &values)
    }
}

/// One realization of every channel matrix in the scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    /// BS→surface, `M × N_BS`.
    pub d: ComplexMatrix,
    /// Surface→user k, `N_u × M`.
    pub dk: Vec<ComplexMatrix>,
    /// BS→user k, `N_u × N_BS`.
    pub gk: Vec<ComplexMatrix>,
    pub side: Vec<Side>,
}

impl ChannelSet {
    pub fn users(&self) -> usize {
        self.gk.len()
    }
}

/// Log-distance path loss as a linear power gain.
pub fn path_loss(distance: f64, pl0_db: f64, exponent: f64) -> Result<f64> {
    if !(distance >= 1.0) {
        return Err(Error::invalid(format!(
            "path-loss distance must be >= 1 m, got {distance}"
        )));
    }
    Ok(10f64.powf(-(pl0_db + 10.0 * exponent * distance.log10()) / 10.0))
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn azimuth(from: &[f64; 3], to: &[f64; 3]) -> f64 {
    (to[1] - from[1]).atan2(to[0] - from[0])
}

/// Half-wavelength ULA response `[e^{jπ n sin φ}]`.
fn steering(len: usize, angle: f64) -> DVector<Complex64> {
    let s = angle.sin();
    DVector::from_fn(len, |n, _| {
        Complex64::from_polar(1.0, std::f64::consts::PI * n as f64 * s)
    })
}

/// Unit-modulus line-of-sight component of the BS→surface link.
pub fn los_bs_ris(cfg: &ScenarioConfig) -> ComplexMatrix {
    let g = &cfg.geometry;
    let arrive = steering(cfg.ris_elements, azimuth(&g.ris, &g.bs));
    let depart = steering(cfg.bs_antennas, azimuth(&g.bs, &g.ris));
    &arrive * depart.adjoint()
}

/// Unit-modulus line-of-sight component of the surface→user-k link.
pub fn los_ris_user(cfg: &ScenarioConfig, k: usize) -> ComplexMatrix {
    let g = &cfg.geometry;
    let user = &g.users[k].position;
    let arrive = steering(cfg.user_antennas, azimuth(user, &g.ris));
    let depart = steering(cfg.ris_elements, azimuth(&g.ris, user));
    &arrive * depart.adjoint()
}

fn complex_gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ComplexMatrix {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    ComplexMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(re * scale, im * scale)
    })
}

fn ricean(rng: &mut ChaCha8Rng, los: ComplexMatrix, factor: f64, gain: f64) -> ComplexMatrix {
    let scatter = complex_gaussian(rng, los.nrows(), los.ncols());
    let los_w = (factor / (1.0 + factor)).sqrt();
    let nlos_w = (1.0 / (1.0 + factor)).sqrt();
    (los * Complex64::new(los_w, 0.0) + scatter * Complex64::new(nlos_w, 0.0))
        * Complex64::new(gain.sqrt(), 0.0)
}

/// Independent generator stream for trial `trial` of an experiment seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Draws one channel realization.
///
/// The direct links are drawn first so that a scenario without a surface
/// sees the same direct channels for every element count.
pub fn generate_channels(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<ChannelSet> {
    cfg.validate()?;
    let g = &cfg.geometry;
    let pl = &cfg.pathloss;
    let gk = g
        .users
        .iter()
        .map(|u| {
            let gain = path_loss(distance(&g.bs, &u.position), pl.pl0_db, pl.exponent_direct)?;
            Ok(complex_gaussian(rng, cfg.user_antennas, cfg.bs_antennas)
                * Complex64::new(gain.sqrt(), 0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let d_gain = path_loss(distance(&g.bs, &g.ris), pl.pl0_db, pl.exponent_ris)?;
    let d = ricean(rng, los_bs_ris(cfg), cfg.rice_factor, d_gain);
    let dk = (0..cfg.users)
        .map(|k| {
            let gain = path_loss(
                distance(&g.ris, &g.users[k].position),
                pl.pl0_db,
                pl.exponent_ris,
            )?;
            Ok(ricean(rng, los_ris_user(cfg, k), cfg.rice_factor, gain))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelSet {
        d,
        dk,
        gk,
        side: cfg.sides(),
    })
}

/// `H_k = D_k diag(θ) D + G_k` with θ taken from the user's half-space.
pub fn compose_channel(cs: &ChannelSet, ris: &StarRisState, k: usize) -> Result<ComplexMatrix> {
    if k >= cs.users() {
        return Err(Error::invalid(format!(
            "user index {k} out of range ({} users)",
            cs.users()
        )));
    }
    let theta = ris.coefficients(cs.side[k]);
    if theta.len() != cs.d.nrows() {
        return Err(Error::dims(format!(
            "{} coefficients for a {}-element surface",
            theta.len(),
            cs.d.nrows()
        )));
    }
    let mut scaled = cs.dk[k].clone();
    for (m, &t) in theta.iter().enumerate() {
        let mut col = scaled.column_mut(m);
        col *= t;
    }
    Ok(&scaled * &cs.d + &cs.gk[k])
}

pub fn compose_all(cs: &ChannelSet, ris: &StarRisState) -> Result<Vec<ComplexMatrix>> {
    (0..cs.users())
        .map(|k| compose_channel(cs, ris, k))
        .collect()
}

/// Unit-modulus coefficients with independent uniform phases under `mask`.
pub fn random_ris(mask: Vec<ElementMode>, rng: &mut impl Rng) -> StarRisState {
    let values: Vec<Complex64> = (0..mask.len())
        .map(|_| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * rng.random::<f64>()))
        .collect();
    StarRisState::from_active(mask, &values).expect("lengths agree")
}
