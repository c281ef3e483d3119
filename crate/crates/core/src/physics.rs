//! Parallel-plate capacitance models for a liquid on a sensing cell, the
//! series thin-film model, and least-squares fits of controller readings
//! against liquid conductivity and permittivity.
//!
//! Geometry is given in millimetres at the interface and converted to SI
//! internally. Capacitances are in farads. Fitted models operate on readings
//! expressed in physical sign (a larger capacitance is a larger value), i.e.
//! the negation of the controller's device units.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vacuum permittivity, F/m.
pub const EPSILON_0: f64 = 8.8541878128e-12;

const MM: f64 = 1e-3;
const MM2: f64 = 1e-6;
const UM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiquidProperties {
    /// Conductivity, S/m.
    pub sigma: f64,
    /// Relative permittivity.
    pub eps_r: f64,
}

impl LiquidProperties {
    pub fn new(sigma: f64, eps_r: f64) -> Result<Self> {
        let liq = Self { sigma, eps_r };
        liq.validate()?;
        Ok(liq)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.eps_r.is_finite() && self.eps_r >= 1.0) {
            return Err(Error::InvalidParameter(format!("eps_r must be >= 1, got {}", self.eps_r)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellGeometry {
    pub area_mm2: f64,
    pub pitch_mm: f64,
    pub omega_rad_s: f64,
}

impl CellGeometry {
    pub fn new(area_mm2: f64, pitch_mm: f64, omega_rad_s: f64) -> Result<Self> {
        let g = Self {
            area_mm2,
            pitch_mm,
            omega_rad_s,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("area_mm2", self.area_mm2),
            ("pitch_mm", self.pitch_mm),
            ("omega_rad_s", self.omega_rad_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Reported fit geometry: 0.7081 mm² electrode area, 4.2 mm pitch,
    /// 100 kHz drive.
    pub fn reference() -> Self {
        Self {
            area_mm2: 0.7081,
            pitch_mm: 4.2,
            omega_rad_s: 2.0 * std::f64::consts::PI * 1.0e5,
        }
    }

    fn with_area(self, area_mm2: f64) -> Self {
        Self { area_mm2, ..self }
    }
}

/// Conductive contribution `σA / (ωd)`.
pub fn c_sigma(liq: &LiquidProperties, geo: &CellGeometry) -> f64 {
    liq.sigma * geo.area_mm2 * MM2 / (geo.omega_rad_s * geo.pitch_mm * MM)
}

/// Dielectric contribution `εr ε₀ A / d`.
pub fn c_epsilon(liq: &LiquidProperties, geo: &CellGeometry) -> f64 {
    liq.eps_r * EPSILON_0 * geo.area_mm2 * MM2 / (geo.pitch_mm * MM)
}

/// Effective capacitance `ε₀ (A/d) (εr + σ/(ωε₀))`.
pub fn c_eff(liq: &LiquidProperties, geo: &CellGeometry) -> f64 {
    EPSILON_0 * (geo.area_mm2 * MM2 / (geo.pitch_mm * MM)) * (liq.eps_r + liq.sigma / (geo.omega_rad_s * EPSILON_0))
}

/// Reciprocal sum `(Σ 1/Cᵢ)⁻¹` of capacitors in series.
pub fn series_capacitance(layers: &[f64]) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::InsufficientData("no capacitances to combine".into()));
    }
    if let Some(c) = layers.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(Error::InvalidParameter(format!("capacitance must be > 0, got {c}")));
    }
    Ok(1.0 / layers.iter().map(|c| 1.0 / c).sum::<f64>())
}

/// An insulating film between screen and liquid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilmLayer {
    pub thickness_um: f64,
    pub eps_r: f64,
}

impl FilmLayer {
    pub fn food_wrap() -> Self {
        Self { thickness_um: 12.7, eps_r: 2.3 }
    }

    pub fn kapton() -> Self {
        Self { thickness_um: 25.4, eps_r: 3.4 }
    }

    pub fn pet() -> Self {
        Self { thickness_um: 88.9, eps_r: 3.2 }
    }

    /// Plate capacitance `εr ε₀ A / δ` of the film over `area_mm2`.
    pub fn capacitance(&self, area_mm2: f64) -> Result<f64> {
        if !(self.thickness_um.is_finite() && self.thickness_um > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "film thickness must be > 0, got {}",
                self.thickness_um
            )));
        }
        Ok(self.eps_r * EPSILON_0 * area_mm2 * MM2 / (self.thickness_um * UM))
    }
}

/// Fraction of the liquid's capacitance that survives a stack of series
/// layers: `C_total / C_liquid`, in `(0, 1)`.
pub fn series_attenuation(c_liquid: f64, layers: &[f64]) -> Result<f64> {
    let mut all = layers.to_vec();
    all.push(c_liquid);
    Ok(series_capacitance(&all)? / c_liquid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsFit {
    pub area_mm2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub r_squared: f64,
}

impl PhysicsFit {
    /// Reported fit of the physics-informed model.
    pub fn reference() -> Self {
        Self {
            area_mm2: 0.7081,
            alpha: 6.1360e12,
            beta: 101.8077,
            gamma: 0.035408,
            r_squared: 0.862,
        }
    }

    /// `α·A`, the only combination of the two identifiable from data (m²).
    pub fn alpha_area_product(&self) -> f64 {
        self.alpha * self.area_mm2 * MM2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
    pub r_squared: f64,
}

impl QuadraticFit {
    /// Reported coefficients of the empirical quadratic model.
    pub fn reference() -> Self {
        Self {
            a: 4.147256,
            b: -0.318624,
            c: -0.007843,
            d: 0.030901,
            e: -0.002721,
            f: 12.1685,
            r_squared: 0.974,
        }
    }

    fn coefficients(&self) -> [f64; 6] {
        [self.a, self.b, self.c, self.d, self.e, self.f]
    }
}

/// `α·C_eff + β + γ εr²`, using the fit's area in place of `geo.area_mm2`.
pub fn predict_physics(fit: &PhysicsFit, liq: &LiquidProperties, geo: &CellGeometry) -> f64 {
    fit.alpha * c_eff(liq, &geo.with_area(fit.area_mm2)) + fit.beta + fit.gamma * liq.eps_r * liq.eps_r
}

fn quadratic_features(liq: &LiquidProperties) -> [f64; 6] {
    let (e, s) = (liq.eps_r, liq.sigma);
    [e, s, e * e, e * s, s * s, 1.0]
}

/// `aε + bσ + cε² + dεσ + eσ² + f`.
pub fn predict_quadratic(fit: &QuadraticFit, liq: &LiquidProperties) -> f64 {
    quadratic_features(liq)
        .iter()
        .zip(fit.coefficients())
        .map(|(x, k)| x * k)
        .sum()
}

/// Coefficient of determination `1 − SS_res/SS_tot`. Defined as 0 (with a
/// warning) when the observations are constant.
pub fn r_squared(predicted: &[f64], observed: &[f64]) -> Result<f64> {
    if predicted.len() != observed.len() || observed.is_empty() {
        return Err(Error::InsufficientData(format!(
            "r_squared needs equal non-empty series, got {} and {}",
            predicted.len(),
            observed.len()
        )));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|o| (o - mean).powi(2)).sum();
    let ss_res: f64 = observed.iter().zip(predicted).map(|(o, p)| (o - p).powi(2)).sum();
    if ss_tot == 0.0 {
        log::warn!("r_squared: observations are constant, reporting 0");
        return Ok(0.0);
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Linear least squares on column-scaled features via SVD, rejecting
/// rank-deficient designs.
fn least_squares(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let scales: Vec<f64> = design
        .column_iter()
        .map(|c| {
            let n = c.norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = design.clone();
    for (j, s) in scales.iter().enumerate() {
        scaled.column_mut(j).unscale_mut(*s);
    }
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < 1e-10 {
        return Err(Error::Degenerate(format!(
            "design matrix is rank deficient (condition {:.3e})",
            smax / smin
        )));
    }
    let x = svd
        .solve(y, 0.0)
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok(DVector::from_iterator(
        x.len(),
        x.iter().zip(&scales).map(|(v, s)| v / s),
    ))
}

/// One observation: liquid properties and a reading (physical sign).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSample {
    pub sigma: f64,
    pub eps_r: f64,
    pub observed: f64,
}

impl FitSample {
    pub fn liquid(&self) -> LiquidProperties {
        LiquidProperties {
            sigma: self.sigma,
            eps_r: self.eps_r,
        }
    }
}

fn check_samples(data: &[FitSample], min: usize) -> Result<()> {
    if data.len() < min {
        return Err(Error::InsufficientData(format!(
            "need at least {min} observations, got {}",
            data.len()
        )));
    }
    for s in data {
        s.liquid().validate()?;
        if !s.observed.is_finite() {
            return Err(Error::NonFinite(format!("observation {s:?}")));
        }
    }
    Ok(())
}

/// Least-squares fit of `α·C_eff + β + γ εr²`.
///
/// For fixed geometry the model is linear in `(α·A, β, γ)`, so it is solved
/// directly. `A` and `α` only enter as a product: the returned fit keeps
/// `geo.area_mm2` as the area and folds the rest into `α`.
pub fn fit_physics_model(data: &[FitSample], geo: &CellGeometry) -> Result<PhysicsFit> {
    geo.validate()?;
    check_samples(data, 4)?;
    let distinct = |f: fn(&FitSample) -> f64| {
        let mut v: Vec<f64> = data.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    if distinct(|s| s.eps_r) < 2 || distinct(|s| s.sigma) < 2 {
        return Err(Error::Degenerate(
            "physics fit needs at least two distinct eps_r and sigma values".into(),
        ));
    }
    // C_eff per unit area (F/m²)
    let per_area = |liq: &LiquidProperties| EPSILON_0 / (geo.pitch_mm * MM) * (liq.eps_r + liq.sigma / (geo.omega_rad_s * EPSILON_0));
    let n = data.len();
    let design = DMatrix::from_fn(n, 3, |i, j| {
        let liq = data[i].liquid();
        match j {
            0 => per_area(&liq),
            1 => 1.0,
            _ => liq.eps_r * liq.eps_r,
        }
    });
    let y = DVector::from_iterator(n, data.iter().map(|s| s.observed));
    let x = least_squares(&design, &y)?;
    let mut fit = PhysicsFit {
        area_mm2: geo.area_mm2,
        alpha: x[0] / (geo.area_mm2 * MM2),
        beta: x[1],
        gamma: x[2],
        r_squared: 0.0,
    };
    let predicted: Vec<f64> = data.iter().map(|s| predict_physics(&fit, &s.liquid(), geo)).collect();
    fit.r_squared = r_squared(&predicted, y.as_slice())?;
    Ok(fit)
}

/// Ordinary least squares on `[ε, σ, ε², εσ, σ², 1]`.
pub fn fit_quadratic_model(data: &[FitSample]) -> Result<QuadraticFit> {
    check_samples(data, 6)?;
    let n = data.len();
    let design = DMatrix::from_fn(n, 6, |i, j| quadratic_features(&data[i].liquid())[j]);
    let y = DVector::from_iterator(n, data.iter().map(|s| s.observed));
    let x = least_squares(&design, &y)?;
    let mut fit = QuadraticFit {
        a: x[0],
        b: x[1],
        c: x[2],
        d: x[3],
        e: x[4],
        f: x[5],
        r_squared: 0.0,
    };
    let predicted: Vec<f64> = data.iter().map(|s| predict_quadratic(&fit, &s.liquid())).collect();
    fit.r_squared = r_squared(&predicted, y.as_slice())?;
    Ok(fit)
}

pub fn read_fit_csv(path: impl AsRef<Path>) -> Result<Vec<FitSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers = rdr.headers()?.clone();
    let expected = ["sigma", "eps_r", "observed"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Schema(format!(
            "fit CSV header must be sigma,eps_r,observed, got {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_fit_csv(data: &[FitSample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path)?;
    for s in data {
        wtr.serialize(s)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Fit output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum FitReport {
    Physics {
        params: PhysicsFit,
        alpha_area_product_m2: f64,
        r_squared: f64,
    },
    Quadratic {
        params: QuadraticFit,
        r_squared: f64,
    },
}

impl From<PhysicsFit> for FitReport {
    fn from(params: PhysicsFit) -> Self {
        FitReport::Physics {
            alpha_area_product_m2: params.alpha_area_product(),
            r_squared: params.r_squared,
            params,
        }
    }
}

impl From<QuadraticFit> for FitReport {
    fn from(params: QuadraticFit) -> Self {
        FitReport::Quadratic {
            r_squared: params.r_squared,
            params,
        }
    }
}

/// A named test liquid with its concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyEntry {
    pub name: String,
    pub concentration: f64,
    pub unit: String,
    pub sigma: f64,
    pub eps_r: f64,
}

/// Sample property table for water/IPA mixtures (0–100 % by volume) and
/// NaCl solutions (5e-5 to 1e-2 M).
///
/// Fixture values: permittivity mixes linearly between water (80.1) and IPA
/// (18.3); NaCl conductivity uses a limiting molar conductivity of
/// 0.0126 S·m²/mol over a 5.5e-4 S/m deionized-water floor. They are not
/// measured data.
pub fn sample_property_table() -> Vec<PropertyEntry> {
    const WATER_EPS: f64 = 80.1;
    const IPA_EPS: f64 = 18.3;
    const DI_SIGMA: f64 = 5.5e-4;
    let mut table: Vec<PropertyEntry> = [0.0, 20.0, 40.0, 60.0, 80.0, 100.0]
        .iter()
        .map(|&pct| PropertyEntry {
            name: format!("ipa-{pct:.0}"),
            concentration: pct,
            unit: "% v/v".into(),
            sigma: DI_SIGMA * (1.0 - pct / 100.0) + 1e-5,
            eps_r: WATER_EPS + (IPA_EPS - WATER_EPS) * pct / 100.0,
        })
        .collect();
    table.extend([5e-5, 1e-4, 1e-3, 1e-2].iter().map(|&molar| PropertyEntry {
        name: format!("nacl-{molar:e}"),
        concentration: molar,
        unit: "M".into(),
        sigma: DI_SIGMA + 0.0126 * molar * 1000.0,
        eps_r: WATER_EPS - 0.5 * molar * 100.0,
    }));
    table
}
