//! Scenario parameterization: dimensions, powers, blocklength parameters,
//! large-scale propagation model and node placement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which half-space of the surface a user occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Reflect,
    Transmit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLossModel {
    /// Path loss at the 1 m reference distance, in dB.
    #[serde(rename = "pl0_dB")]
    pub pl0_db: f64,
    pub exponent_direct: f64,
    pub exponent_ris: f64,
}

impl Default for PathLossModel {
    fn default() -> Self {
        PathLossModel {
            pl0_db: 30.0,
            exponent_direct: 3.75,
            exponent_ris: 2.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserPlacement {
    pub position: [f64; 3],
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub bs: [f64; 3],
    pub ris: [f64; 3],
    pub users: Vec<UserPlacement>,
}

impl Geometry {
    /// BS at the origin, surface at (40, 2, 0) m, the first ⌈K/2⌉ users
    /// dropped uniformly in a 5 m disk around (45, 5, 0) on the reflection
    /// side and the rest around (45, -5, 0) on the transmission side.
    pub fn default_layout(users: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6765_6f6d);
        let reflect = users.div_ceil(2);
        let placements = (0..users)
            .map(|k| {
                let (center, side) = if k < reflect {
                    ([45.0, 5.0], Side::Reflect)
                } else {
                    ([45.0, -5.0], Side::Transmit)
                };
                let radius = 5.0 * rng.random::<f64>().sqrt();
                let angle = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                UserPlacement {
                    position: [
                        center[0] + radius * angle.cos(),
                        center[1] + radius * angle.sin(),
                        0.0,
                    ],
                    side,
                }
            })
            .collect();
        Geometry {
            bs: [0.0, 0.0, 0.0],
            ris: [40.0, 2.0, 0.0],
            users: placements,
        }
    }
}

/// Full physical and protocol parameterization of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(rename = "K")]
    pub users: usize,
    #[serde(rename = "N_BS")]
    pub bs_antennas: usize,
    #[serde(rename = "N_u")]
    pub user_antennas: usize,
    #[serde(rename = "M")]
    pub ris_elements: usize,
    pub d_c: usize,
    pub d_p: usize,
    /// Noise power in watts.
    pub sigma2: f64,
    /// BS power budget in watts.
    #[serde(rename = "P")]
    pub power_budget: f64,
    /// Static power per user in watts.
    #[serde(rename = "P_C")]
    pub static_power: f64,
    pub beta: f64,
    /// Per-user minimum rate in nats per channel use.
    pub r_th: f64,
    pub n_c: f64,
    pub n_p: f64,
    pub eps_total: f64,
    /// Fraction of `eps_total` assigned to the common stream.
    pub eps_c_share: f64,
    #[serde(rename = "rice_K")]
    pub rice_factor: f64,
    pub pathloss: PathLossModel,
    pub geometry: Geometry,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::with_users(4, 1)
    }
}

impl ScenarioConfig {
    /// Desk-scale defaults (N_BS = N_u = 2, M = 16, n = 256, eps = 1e-5,
    /// P = 1 W) with `users` users in the default layout.
    pub fn with_users(users: usize, seed: u64) -> Self {
        ScenarioConfig {
            users,
            bs_antennas: 2,
            user_antennas: 2,
            ris_elements: 16,
            d_c: 2,
            d_p: 2,
            sigma2: 1e-13,
            power_budget: 1.0,
            static_power: 0.5,
            beta: 2.0,
            r_th: 0.0,
            n_c: 256.0,
            n_p: 256.0,
            eps_total: 1e-5,
            eps_c_share: 0.5,
            rice_factor: 3.0,
            pathloss: PathLossModel::default(),
            geometry: Geometry::default_layout(users, seed),
            seed,
        }
    }

    pub fn sides(&self) -> Vec<Side> {
        self.geometry.users.iter().map(|u| u.side).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.users < 1 {
            return fail("K must be at least 1".into());
        }
        if self.bs_antennas < 1 || self.user_antennas < 1 {
            return fail("antenna counts must be at least 1".into());
        }
        if !self.ris_elements.is_multiple_of(2) {
            return fail(format!("M must be even, got {}", self.ris_elements));
        }
        if self.d_c < 1 || self.d_p < 1 {
            return fail("stream counts must be at least 1".into());
        }
        for (name, v) in [
            ("sigma2", self.sigma2),
            ("P", self.power_budget),
            ("P_C", self.static_power),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return fail(format!("beta must be >= 1, got {}", self.beta));
        }
        if !(self.r_th >= 0.0 && self.r_th.is_finite()) {
            return fail(format!("r_th must be non-negative, got {}", self.r_th));
        }
        if !(self.n_c >= 1.0 && self.n_p >= 1.0) {
            return fail("blocklengths must be at least 1".into());
        }
        if !(self.eps_total > 0.0 && self.eps_total < 1.0) {
            return fail(format!(
                "eps_total must lie in (0, 1), got {}",
                self.eps_total
            ));
        }
        if !(self.eps_c_share > 0.0 && self.eps_c_share < 1.0) {
            return fail(format!(
                "eps_c_share must lie in (0, 1), got {}",
                self.eps_c_share
            ));
        }
        if !(self.rice_factor >= 0.0 && self.rice_factor.is_finite()) {
            return fail(format!(
                "rice_K must be non-negative, got {}",
                self.rice_factor
            ));
        }
        if self.geometry.users.len() != self.users {
            return fail(format!(
                "geometry lists {} users but K = {}",
                self.geometry.users.len(),
                self.users
            ));
        }
        let coords = std::iter::once(&self.geometry.bs)
            .chain(std::iter::once(&self.geometry.ris))
            .chain(self.geometry.users.iter().map(|u| &u.position));
        if coords.flatten().any(|v| !v.is_finite()) {
            return fail("geometry has non-finite coordinates".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_splits_sides() {
        let g = Geometry::default_layout(4, 9);
        let sides: Vec<Side> = g.users.iter().map(|u| u.side).collect();
        assert_eq!(
            sides,
            vec![Side::Reflect, Side::Reflect, Side::Transmit, Side::Transmit]
        );
        for u in &g.users {
            let cy = if u.side == Side::Reflect { 5.0 } else { -5.0 };
            let r = ((u.position[0] - 45.0).powi(2) + (u.position[1] - cy).powi(2)).sqrt();
            assert!(r <= 5.0);
        }
        assert_eq!(g, Geometry::default_layout(4, 9));
    }

    #[test]
    fn validation() {
        assert!(ScenarioConfig::default().validate().is_ok());
        let mut cfg = ScenarioConfig::default();
        cfg.ris_elements = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::default();
        cfg.eps_total = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::default();
        cfg.geometry.users.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_uses_symbol_names() {
        let cfg = ScenarioConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        for key in ["\"K\"", "\"N_BS\"", "\"P_C\"", "\"rice_K\"", "\"pl0_dB\""] {
            assert!(text.contains(key), "missing {key}");
        }
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let bad = text.replacen("\"beta\"", "\"betta\"", 1);
        assert!(serde_json::from_str::<ScenarioConfig>(&bad).is_err());
    }
}
