//! Deterministic virtual mutual-capacitance controller.
//!
//! The simulator stands in for a rooted tablet. It keeps a noise-free "true"
//! device-unit field built by superposing the contributions of every sample
//! on the screen, scales it by a per-cell sensitivity, adds seeded Gaussian
//! noise, and reports deltas against a baseline that an adaptive filter
//! relaxes toward the reading. A conductive film left by drawing up a drop
//! acts as a permanent touch and freezes the baseline.
//!
//! Sign convention: liquids that raise the physical capacitance show up as
//! negative device units; films and container rims show up positive.

mod controller;
mod dataset;
mod scenario;

pub use controller::{contact_radius_cells, drop_footprint, ControllerState, PlacedSample, SampleId, SampleKind};
pub use dataset::{
    simulate_calibration_points,
    adulteration_classes, container_classes, generate_container_dataset, generate_dataset, ClassSpec,
    ContainerClassSpec, DatasetSpec,
};
pub use scenario::{run_scenario, LiquidRef, ScenarioOp};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{DeviceProfile, Frame};
use crate::physics::{predict_physics, CellGeometry, FilmLayer, LiquidProperties, PhysicsFit};

/// Volume at which the drop response is half of its plateau; puts the
/// response at 95 % of the plateau at 500 µL.
pub const HALF_RESPONSE_VOLUME_UL: f64 = 500.0 / 19.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualLiquid {
    pub name: String,
    pub sigma: f64,
    pub eps_r: f64,
    pub surface_tension_mn_m: f64,
}

impl VirtualLiquid {
    pub fn new(name: impl Into<String>, sigma: f64, eps_r: f64, surface_tension_mn_m: f64) -> Result<Self> {
        let liq = Self {
            name: name.into(),
            sigma,
            eps_r,
            surface_tension_mn_m,
        };
        liq.validate()?;
        Ok(liq)
    }

    pub fn validate(&self) -> Result<()> {
        self.properties().validate()?;
        if !(self.surface_tension_mn_m.is_finite() && self.surface_tension_mn_m > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "surface tension must be > 0, got {}",
                self.surface_tension_mn_m
            )));
        }
        Ok(())
    }

    pub fn properties(&self) -> LiquidProperties {
        LiquidProperties {
            sigma: self.sigma,
            eps_r: self.eps_r,
        }
    }

    pub fn tap_water() -> Self {
        Self::new("tap-water", 0.05, 80.0, 72.0).expect("valid preset")
    }

    pub fn di_water() -> Self {
        Self::new("di-water", 5.5e-4, 80.1, 72.0).expect("valid preset")
    }

    pub fn isopropyl_alcohol() -> Self {
        Self::new("ipa", 1e-5, 18.3, 23.0).expect("valid preset")
    }

    pub fn ethanol() -> Self {
        Self::new("ethanol", 1e-5, 24.5, 22.0).expect("valid preset")
    }

    pub fn saline(molar: f64) -> Self {
        Self::new(
            format!("nacl-{molar:e}"),
            5.5e-4 + 12.6 * molar,
            80.1 - 50.0 * molar,
            72.0 + 1.6 * molar,
        )
        .expect("valid preset")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tap-water" => Some(Self::tap_water()),
            "di-water" => Some(Self::di_water()),
            "ipa" => Some(Self::isopropyl_alcohol()),
            "ethanol" => Some(Self::ethanol()),
            _ => None,
        }
    }

    /// Linear blend by volume fraction `frac` of `other` into `self`.
    pub fn mix(&self, other: &VirtualLiquid, frac: f64) -> Self {
        let lerp = |a: f64, b: f64| a + (b - a) * frac;
        Self {
            name: format!("{}+{:.0}%{}", self.name, frac * 100.0, other.name),
            sigma: lerp(self.sigma, other.sigma),
            eps_r: lerp(self.eps_r, other.eps_r),
            surface_tension_mn_m: lerp(self.surface_tension_mn_m, other.surface_tension_mn_m),
        }
    }
}

/// Container base material, which sets how strongly the rim couples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContainerBase {
    PlasticCup,
    GlassVial,
    SmallGlassVial,
}

impl ContainerBase {
    /// Rim reading, in device units, for tap water.
    pub fn rim_coupling(&self) -> f64 {
        match self {
            ContainerBase::PlasticCup => 220.0,
            ContainerBase::GlassVial => 150.0,
            ContainerBase::SmallGlassVial => 110.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub profile: DeviceProfile,
    pub seed: u64,
    /// Per-cell noise standard deviation, device units.
    pub noise_std_map: Vec<f64>,
    /// Per-cell sensitivity in (0, 1].
    pub sensitivity_map: Vec<f64>,
    pub filter_tau_s: f64,
    pub filter_enabled: bool,
    pub saturation: f64,
    /// Centroid reading magnitude of a 500 µL tap-water drop at unit
    /// sensitivity.
    pub drop_gain: f64,
    /// Reading of the conductive film left after drawing up a drop.
    pub film_level: f64,
    /// Raw reference level reported by the controller before any deltas.
    pub reference_level: f64,
    /// Optional insulating film between screen and liquid.
    pub insulating_layer: Option<FilmLayer>,
    /// Round emitted deltas to whole device units, as hardware reports them.
    pub quantize: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        let profile = DeviceProfile::default();
        Self {
            noise_std_map: default_noise_map(profile.rows, profile.cols, 8.0),
            sensitivity_map: default_sensitivity_map(profile.rows, profile.cols),
            profile,
            seed: 0,
            filter_tau_s: 5.0,
            filter_enabled: true,
            saturation: 800.0,
            drop_gain: 200.0,
            film_level: 400.0,
            reference_level: 2000.0,
            insulating_layer: None,
            quantize: false,
        }
    }
}

impl SimConfig {
    /// Uniform sensitivity and uniform noise `noise_std`.
    pub fn uniform(noise_std: f64) -> Self {
        let profile = DeviceProfile::default();
        let n = profile.cells();
        Self {
            noise_std_map: vec![noise_std; n],
            sensitivity_map: vec![1.0; n],
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        let n = self.profile.cells();
        if self.noise_std_map.len() != n || self.sensitivity_map.len() != n {
            return Err(Error::Schema(format!(
                "noise/sensitivity maps must have {n} cells, got {} and {}",
                self.noise_std_map.len(),
                self.sensitivity_map.len()
            )));
        }
        if self.noise_std_map.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidParameter("noise stds must be >= 0".into()));
        }
        if self.sensitivity_map.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::InvalidParameter("sensitivity must lie in (0, 1]".into()));
        }
        if !(1.0..=20.0).contains(&self.filter_tau_s) {
            return Err(Error::InvalidParameter(format!(
                "filter_tau_s must lie in [1, 20] s, got {}",
                self.filter_tau_s
            )));
        }
        if !(self.saturation.is_finite() && self.saturation > 0.0) {
            return Err(Error::InvalidParameter("saturation must be > 0".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> CellGeometry {
        CellGeometry {
            area_mm2: PhysicsFit::reference().area_mm2,
            pitch_mm: self.profile.pitch_mm,
            omega_rad_s: self.profile.omega_rad_s(),
        }
    }

    /// Modelled screen response of a liquid relative to tap water.
    pub fn relative_response(&self, liquid: &VirtualLiquid) -> f64 {
        let fit = PhysicsFit::reference();
        let geo = self.geometry();
        predict_physics(&fit, &liquid.properties(), &geo)
            / predict_physics(&fit, &VirtualLiquid::tap_water().properties(), &geo)
    }

    /// Centroid magnitude (device units, positive) of a drop at unit
    /// sensitivity: liquid response times a saturating volume curve.
    pub fn drop_magnitude(&self, liquid: &VirtualLiquid, volume_ul: f64) -> f64 {
        let volume_curve = |v: f64| v / (v + HALF_RESPONSE_VOLUME_UL);
        let mut m = self.drop_gain * self.relative_response(liquid) * volume_curve(volume_ul) / volume_curve(500.0);
        if let Some(layer) = self.insulating_layer {
            m *= self.layer_attenuation(liquid, &layer);
        }
        m
    }

    fn layer_attenuation(&self, liquid: &VirtualLiquid, layer: &FilmLayer) -> f64 {
        use crate::physics::{c_eff, series_attenuation};
        let geo = self.geometry();
        let c_liquid = c_eff(&liquid.properties(), &geo);
        layer
            .capacitance(geo.area_mm2)
            .and_then(|c_film| series_attenuation(c_liquid, &[c_film]))
            .unwrap_or(1.0)
    }

    pub(crate) fn reference_frame(&self) -> Frame {
        let (rows, cols) = (self.profile.rows, self.profile.cols);
        Frame::from_fn(rows, cols, 0.0, |r, c| {
            let ripple = ((r as f64) * 0.7).sin() * 12.0 + ((c as f64) * 0.45).cos() * 9.0;
            (self.reference_level + ripple).round()
        })
    }
}

/// Centre-heavy noise profile: higher in the middle of the screen, lower at
/// the edges, rescaled so the screen mean equals `mean_std`.
pub fn default_noise_map(rows: usize, cols: usize, mean_std: f64) -> Vec<f64> {
    use std::f64::consts::PI;
    let raw: Vec<f64> = (0..rows)
        .flat_map(|r| {
            (0..cols).map(move |c| {
                let bump = ((PI * (r as f64 + 0.5) / rows as f64).sin() * (PI * (c as f64 + 0.5) / cols as f64).sin()).sqrt();
                0.62 + 0.38 * bump
            })
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|v| v * mean_std / mean).collect()
}

/// Two sensitive lobes left and right of centre, weaker edges and centre.
pub fn default_sensitivity_map(rows: usize, cols: usize) -> Vec<f64> {
    let (cy, w) = (rows as f64 / 2.0, cols as f64);
    let lobes = [w * 0.25, w * 0.75];
    let spread = (w / 8.0).max(1.0);
    (0..rows)
        .flat_map(|r| {
            (0..cols).map(move |c| {
                let g: f64 = lobes
                    .iter()
                    .map(|&cx| {
                        let d2 = ((c as f64 - cx) / spread).powi(2) + ((r as f64 - cy) / (spread * 1.5)).powi(2);
                        (-0.5 * d2).exp()
                    })
                    .sum();
                (0.7 + 0.3 * g).min(1.0)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_map_mean_and_shape() {
        let m = default_noise_map(32, 52, 8.0);
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        assert!((mean - 8.0).abs() < 1e-9);
        let center = m[16 * 52 + 26];
        let corner = m[0];
        assert!(center > corner);
        let max = m.iter().copied().fold(0.0, f64::max);
        let min = m.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(max < 10.0 && min > 5.0, "range {min}..{max}");
    }

    #[test]
    fn sensitivity_map_in_range() {
        let m = default_sensitivity_map(32, 52);
        assert!(m.iter().all(|&s| s > 0.0 && s <= 1.0));
        assert!(m[16 * 52 + 13] > m[16 * 52 + 26]);
        assert!(m[16 * 52 + 39] > m[16 * 52]);
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn drop_magnitude_targets() {
        let cfg = SimConfig::uniform(0.0);
        let tap = VirtualLiquid::tap_water();
        assert!((cfg.drop_magnitude(&tap, 500.0) - 200.0).abs() < 1e-9);
        // saturating in volume
        let m = |v| cfg.drop_magnitude(&tap, v);
        assert!(m(10.0) < m(50.0) && m(50.0) < m(500.0) && m(500.0) < m(1000.0));
        assert!((m(1000.0) - m(500.0)) / m(500.0) < 0.05);
        // conductivity raises, low permittivity lowers the response
        assert!(cfg.drop_magnitude(&VirtualLiquid::saline(1e-2), 500.0) > m(500.0));
        assert!(cfg.drop_magnitude(&VirtualLiquid::isopropyl_alcohol(), 500.0) < m(500.0));
    }

    #[test]
    fn insulating_layers_attenuate_by_thickness() {
        let tap = VirtualLiquid::tap_water();
        let with = |layer| SimConfig { insulating_layer: Some(layer), ..SimConfig::uniform(0.0) }.drop_magnitude(&tap, 500.0);
        let wrap = with(FilmLayer::food_wrap());
        let pet = with(FilmLayer::pet());
        assert!(pet < wrap && wrap < 200.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimConfig::default();
        cfg.filter_tau_s = 25.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::default();
        cfg.noise_std_map.pop();
        assert!(matches!(cfg.validate(), Err(Error::Schema(_))));
        let mut cfg = SimConfig::default();
        cfg.sensitivity_map[0] = 0.0;
        assert!(cfg.validate().is_err());
    }
}
