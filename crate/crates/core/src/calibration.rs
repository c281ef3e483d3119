//! Screen-scale sensitivity calibration and noise characterization.
//!
//! Sparse calibration responses `(x, y, s)` are interpolated over the whole
//! grid with a thin-plate-spline radial basis, `S(p) = Σ w_i φ(|p − p_i|)`
//! with `φ(r) = r² ln r`, and inverted into a per-cell compensation factor
//! `min(S) / (S + ε)`.
//!
//! Coordinates are cell indices: `x` is the column, `y` the row, and the
//! interpolant is evaluated at integer cell centers.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{per_pixel_std, temporal_average, Frame};

pub const DEFAULT_LAMBDA: f64 = 3.0;
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub x: f64,
    pub y: f64,
    pub s: f64,
}

/// How the smoothing term enters the weight system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularization {
    /// `(A + λI) w = s`, the usual smoothing-spline form.
    #[default]
    Standard,
    /// `A w = s + λ w`, i.e. `(A − λI) w = s`, as the system is sometimes
    /// written. Kept for comparison; it is poorly conditioned for λ near an
    /// eigenvalue of `A`.
    Literal,
}

/// Thin-plate-spline kernel `r² ln r`, continuous at 0.
pub fn tps_kernel(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

fn distance(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsWeights {
    pub points: Vec<CalibrationPoint>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub regularization: Regularization,
}

impl TpsWeights {
    pub fn evaluate_at(&self, x: f64, y: f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * tps_kernel(distance(x, y, p.x, p.y)))
            .sum()
    }
}

pub fn tps_fit(points: &[CalibrationPoint], lambda: f64) -> Result<TpsWeights> {
    tps_fit_with(points, lambda, Regularization::Standard)
}

pub fn tps_fit_with(
    points: &[CalibrationPoint],
    lambda: f64,
    regularization: Regularization,
) -> Result<TpsWeights> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(
            "thin-plate fit needs at least 2 points".into(),
        ));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(p.x.is_finite() && p.y.is_finite() && p.s.is_finite()))
    {
        return Err(Error::NonFinite(format!("calibration point {p:?}")));
    }
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            if a.x == b.x && a.y == b.y {
                return Err(Error::Degenerate(format!(
                    "duplicate calibration point at ({}, {})",
                    a.x, a.y
                )));
            }
        }
    }

    let n = points.len();
    let shift = match regularization {
        Regularization::Standard => lambda,
        Regularization::Literal => -lambda,
    };
    let system = DMatrix::from_fn(n, n, |i, j| {
        let k = tps_kernel(distance(points[i].x, points[i].y, points[j].x, points[j].y));
        if i == j {
            k + shift
        } else {
            k
        }
    });
    let rhs = DVector::from_iterator(n, points.iter().map(|p| p.s));
    let weights = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("thin-plate weight system is singular".into()))?;
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Degenerate("thin-plate weights are not finite".into()));
    }
    Ok(TpsWeights {
        points: points.to_vec(),
        weights: weights.iter().copied().collect(),
        lambda,
        regularization,
    })
}

/// Interpolated sensitivity over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    pub grid: Frame,
    pub lambda: f64,
    pub epsilon: f64,
}

/// Per-cell multiplicative correction.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensationMap {
    pub grid: Frame,
    pub lambda: f64,
    pub epsilon: f64,
}

/// Evaluates the interpolant at every cell center of a `rows × cols` grid.
pub fn tps_evaluate(weights: &TpsWeights, rows: usize, cols: usize) -> Result<SensitivityMap> {
    if weights.weights.len() != weights.points.len() {
        return Err(Error::Schema(format!(
            "{} weights for {} points",
            weights.weights.len(),
            weights.points.len()
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter("query grid must be non-empty".into()));
    }
    let max_x = (cols - 1) as f64;
    let max_y = (rows - 1) as f64;
    if let Some(p) = weights
        .points
        .iter()
        .find(|p| p.x < 0.0 || p.y < 0.0 || p.x > max_x || p.y > max_y)
    {
        return Err(Error::Schema(format!(
            "calibration point ({}, {}) outside a {rows}x{cols} grid",
            p.x, p.y
        )));
    }
    let grid = Frame::from_fn(rows, cols, 0.0, |r, c| weights.evaluate_at(c as f64, r as f64));
    Ok(SensitivityMap {
        grid,
        lambda: weights.lambda,
        epsilon: 0.0,
    })
}

/// `min(S) / (S + ε)` per cell, with the minimum over the interpolated grid.
pub fn compensation_map(sensitivity: &SensitivityMap, epsilon: f64) -> Result<CompensationMap> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if !sensitivity.grid.is_finite() {
        return Err(Error::NonFinite("sensitivity map".into()));
    }
    if sensitivity.grid.values().iter().any(|&v| v + epsilon == 0.0) {
        return Err(Error::Degenerate("sensitivity + epsilon is zero in some cell".into()));
    }
    let floor = sensitivity.grid.min();
    Ok(CompensationMap {
        grid: sensitivity.grid.map(|v| floor / (v + epsilon)),
        lambda: sensitivity.lambda,
        epsilon,
    })
}

pub fn apply_compensation(frame: &Frame, map: &CompensationMap) -> Result<Frame> {
    frame.zip_with(&map.grid, |v, k| v * k)
}

/// Fits, evaluates and inverts in one go.
pub fn calibrate(
    points: &[CalibrationPoint],
    rows: usize,
    cols: usize,
    lambda: f64,
    epsilon: f64,
) -> Result<(SensitivityMap, CompensationMap)> {
    let weights = tps_fit(points, lambda)?;
    let mut sensitivity = tps_evaluate(&weights, rows, cols)?;
    sensitivity.epsilon = epsilon;
    let compensation = compensation_map(&sensitivity, epsilon)?;
    Ok((sensitivity, compensation))
}

/// Screen-averaged per-pixel standard deviation of sliding `N`-frame means,
/// for `N = 1..=max_window`.
///
/// At least `max_window + 1` frames are needed so the largest window still
/// yields two averages.
pub fn noise_reduction_curve(frames: &[Frame], max_window: usize) -> Result<Vec<(usize, f64)>> {
    if max_window == 0 {
        return Err(Error::InvalidParameter("max_window must be >= 1".into()));
    }
    if frames.len() <= max_window {
        return Err(Error::InsufficientData(format!(
            "{} frames cannot give two {max_window}-frame averages",
            frames.len()
        )));
    }
    (1..=max_window)
        .map(|n| {
            let averages = (n..=frames.len())
                .map(|end| temporal_average(&frames[..end], n))
                .collect::<Result<Vec<_>>>()?;
            Ok((n, per_pixel_std(&averages)?.mean()))
        })
        .collect()
}

pub fn read_points_csv(path: impl AsRef<Path>) -> Result<Vec<CalibrationPoint>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers = rdr.headers()?.clone();
    let expected = ["x", "y", "s"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Schema(format!(
            "calibration CSV header must be x,y,s, got {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    rdr.deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_points_csv(points: &[CalibrationPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path)?;
    for p in points {
        wtr.serialize(p)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Sensitivity,
    Compensation,
}

/// Exported map: frame-style row-major grid with a kind tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    pub kind: MapKind,
    pub rows: usize,
    pub cols: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub timestamp_s: f64,
    pub grid: Vec<f64>,
}

impl MapFile {
    fn from_parts(kind: MapKind, grid: &Frame, lambda: f64, epsilon: f64) -> Self {
        Self {
            kind,
            rows: grid.rows(),
            cols: grid.cols(),
            lambda,
            epsilon,
            timestamp_s: grid.timestamp_s,
            grid: grid.values().to_vec(),
        }
    }

    pub fn frame(&self) -> Result<Frame> {
        Frame::from_vec(self.rows, self.cols, self.grid.clone(), self.timestamp_s)
    }

    pub fn into_compensation(self) -> Result<CompensationMap> {
        if self.kind != MapKind::Compensation {
            return Err(Error::Schema(format!("expected a compensation map, got {:?}", self.kind)));
        }
        Ok(CompensationMap {
            grid: self.frame()?,
            lambda: self.lambda,
            epsilon: self.epsilon,
        })
    }

    pub fn into_sensitivity(self) -> Result<SensitivityMap> {
        if self.kind != MapKind::Sensitivity {
            return Err(Error::Schema(format!("expected a sensitivity map, got {:?}", self.kind)));
        }
        Ok(SensitivityMap {
            grid: self.frame()?,
            lambda: self.lambda,
            epsilon: self.epsilon,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl From<&SensitivityMap> for MapFile {
    fn from(m: &SensitivityMap) -> Self {
        MapFile::from_parts(MapKind::Sensitivity, &m.grid, m.lambda, m.epsilon)
    }
}

impl From<&CompensationMap> for MapFile {
    fn from(m: &CompensationMap) -> Self {
        MapFile::from_parts(MapKind::Compensation, &m.grid, m.lambda, m.epsilon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Gaussian elimination with partial pivoting, independent of nalgebra.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, rows: usize, cols: usize) -> Vec<CalibrationPoint> {
        let mut cells: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
        for i in 0..n {
            let j = rng.gen_range(i..cells.len());
            cells.swap(i, j);
        }
        cells[..n]
            .iter()
            .map(|&(r, c)| CalibrationPoint {
                x: c as f64,
                y: r as f64,
                s: rng.gen_range(20.0..200.0),
            })
            .collect()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(tps_kernel(1.0), 0.0);
        assert_eq!(tps_kernel(0.0), 0.0);
        assert!((tps_kernel(2.0) - 4.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn unit_square_matches_dense_oracle() {
        let pts: Vec<CalibrationPoint> = [(0.0, 0.0, 1.0), (1.0, 0.0, 2.0), (0.0, 1.0, 3.0), (1.0, 1.0, 4.0)]
            .iter()
            .map(|&(x, y, s)| CalibrationPoint { x, y, s })
            .collect();
        let w = tps_fit(&pts, 0.0).unwrap();
        for p in &pts {
            assert!((w.evaluate_at(p.x, p.y) - p.s).abs() < 1e-9);
        }
        let a: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| pts.iter().map(|q| tps_kernel(distance(p.x, p.y, q.x, q.y))).collect())
            .collect();
        let oracle_w = dense_solve(a, pts.iter().map(|p| p.s).collect());
        let center: f64 = pts
            .iter()
            .zip(&oracle_w)
            .map(|(p, w)| w * tps_kernel(distance(0.5, 0.5, p.x, p.y)))
            .sum();
        assert!((w.evaluate_at(0.5, 0.5) - center).abs() < 1e-9);
    }

    #[test]
    fn interpolation_condition_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(&mut rng, 40, 32, 52);
        let w = tps_fit(&pts, 0.0).unwrap();
        for p in &pts {
            assert!((w.evaluate_at(p.x, p.y) - p.s).abs() < 1e-6);
        }
    }

    #[test]
    fn evaluate_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = random_points(&mut rng, 30, 32, 52);
        let w = tps_fit(&pts, 3.0).unwrap();
        let map = tps_evaluate(&w, 32, 52).unwrap();
        for r in 0..32 {
            for c in 0..52 {
                let mut acc = 0.0;
                for (p, wi) in pts.iter().zip(&w.weights) {
                    let d = ((c as f64 - p.x).powi(2) + (r as f64 - p.y).powi(2)).sqrt();
                    acc += wi * if d == 0.0 { 0.0 } else { d * d * d.ln() };
                }
                assert!((map.grid.get(r, c) - acc).abs() < 1e-9);
            }
        }
        // calibration point query with lambda 0
        let w0 = tps_fit(&pts, 0.0).unwrap();
        let m0 = tps_evaluate(&w0, 32, 52).unwrap();
        let p = pts[0];
        assert!((m0.grid.get(p.y as usize, p.x as usize) - p.s).abs() < 1e-6);
    }

    #[test]
    fn symmetric_configuration_gives_symmetric_map() {
        // mirror-symmetric about the vertical center line of a 5x7 grid
        let pts: Vec<CalibrationPoint> = [(1.0, 1.0, 5.0), (5.0, 1.0, 5.0), (3.0, 2.0, 9.0), (0.0, 4.0, 2.0), (6.0, 4.0, 2.0)]
            .iter()
            .map(|&(x, y, s)| CalibrationPoint { x, y, s })
            .collect();
        let map = tps_evaluate(&tps_fit(&pts, 1.0).unwrap(), 5, 7).unwrap();
        for r in 0..5 {
            for c in 0..7 {
                assert!((map.grid.get(r, c) - map.grid.get(r, 6 - c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fit_errors() {
        let p = CalibrationPoint { x: 1.0, y: 1.0, s: 2.0 };
        assert!(matches!(tps_fit(&[p], 0.0), Err(Error::InsufficientData(_))));
        assert!(matches!(tps_fit(&[p, p], 0.0), Err(Error::Degenerate(_))));
        let q = CalibrationPoint { x: f64::NAN, ..p };
        assert!(matches!(tps_fit(&[p, q], 0.0), Err(Error::NonFinite(_))));
        let r = CalibrationPoint { x: 2.0, ..p };
        assert!(tps_fit(&[p, r], -1.0).is_err());
        let far = CalibrationPoint { x: 60.0, y: 1.0, s: 1.0 };
        let w = tps_fit(&[p, far], 0.0).unwrap();
        assert!(tps_evaluate(&w, 32, 52).is_err());
    }

    #[test]
    fn literal_regularization_differs_from_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 12, 10, 10);
        let a = tps_fit_with(&pts, 3.0, Regularization::Standard).unwrap();
        let b = tps_fit_with(&pts, 3.0, Regularization::Literal).unwrap();
        assert_ne!(a.weights, b.weights);
        // (A - λI) w = s
        for (i, p) in pts.iter().enumerate() {
            let lhs = b.evaluate_at(p.x, p.y) - 3.0 * b.weights[i];
            assert!((lhs - p.s).abs() < 1e-6);
        }
    }

    #[test]
    fn residual_grows_with_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let pts = random_points(&mut rng, 25, 16, 16);
            let mut last = -1.0;
            for lambda in [0.0, 1.0, 3.0, 10.0] {
                let w = tps_fit(&pts, lambda).unwrap();
                let res: f64 = pts
                    .iter()
                    .map(|p| (w.evaluate_at(p.x, p.y) - p.s).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(res >= last - 1e-9, "lambda {lambda}: {res} < {last}");
                last = res;
            }
        }
    }

    #[test]
    fn compensation_cases() {
        let uniform = SensitivityMap { grid: Frame::filled(3, 3, 4.0, 0.0), lambda: 0.0, epsilon: 0.0 };
        let c = compensation_map(&uniform, 0.0).unwrap();
        assert!(c.grid.values().iter().all(|&v| v == 1.0));

        let mut g = Frame::filled(2, 2, 3.0, 0.0);
        g.set(0, 0, 2.0);
        g.set(1, 1, 4.0);
        let c = compensation_map(&SensitivityMap { grid: g, lambda: 0.0, epsilon: 0.0 }, 0.0).unwrap();
        assert_eq!(c.grid.get(1, 1), 0.5);
        assert_eq!(c.grid.get(0, 0), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Frame::from_fn(4, 6, 0.0, |_, _| rng.gen_range(0.5..3.0));
        let min = g.values().iter().copied().fold(f64::INFINITY, f64::min);
        let c = compensation_map(&SensitivityMap { grid: g.clone(), lambda: 0.0, epsilon: 0.0 }, 1e-6).unwrap();
        for r in 0..4 {
            for col in 0..6 {
                assert!((c.grid.get(r, col) - min / (g.get(r, col) + 1e-6)).abs() < 1e-15);
                assert!(c.grid.get(r, col) > 0.0 && c.grid.get(r, col) <= 1.0);
            }
        }

        let zero = SensitivityMap { grid: Frame::zeros(2, 2, 0.0), lambda: 0.0, epsilon: 0.0 };
        assert!(matches!(compensation_map(&zero, 0.0), Err(Error::Degenerate(_))));
        assert!(compensation_map(&uniform, -1.0).is_err());
    }

    #[test]
    fn apply_compensation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frame = Frame::from_fn(4, 5, 2.0, |_, _| rng.gen_range(-300.0..300.0));
        let ones = CompensationMap { grid: Frame::filled(4, 5, 1.0, 0.0), lambda: 0.0, epsilon: 0.0 };
        assert_eq!(apply_compensation(&frame, &ones).unwrap().values(), frame.values());
        let map = CompensationMap {
            grid: Frame::from_fn(4, 5, 0.0, |_, _| rng.gen_range(0.1..1.0)),
            lambda: 0.0,
            epsilon: 0.0,
        };
        let z = apply_compensation(&Frame::zeros(4, 5, 0.0), &map).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        let out = apply_compensation(&frame, &map).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                assert_eq!(out.get(r, c), frame.get(r, c) * map.grid.get(r, c));
            }
        }
        assert_eq!(out.timestamp_s, 2.0);
        assert!(apply_compensation(&Frame::zeros(5, 4, 0.0), &map).is_err());
    }

    #[test]
    fn noise_curve_definitions() {
        let constant: Vec<Frame> = (0..6).map(|t| Frame::filled(3, 3, 7.0, t as f64)).collect();
        let curve = noise_reduction_curve(&constant, 5).unwrap();
        assert_eq!(curve.len(), 5);
        assert!(curve.iter().all(|&(_, s)| s == 0.0));
        assert!(noise_reduction_curve(&constant, 6).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frames: Vec<Frame> = (0..10)
            .map(|t| Frame::from_fn(3, 4, t as f64, |_, _| rng.gen_range(-10.0..10.0)))
            .collect();
        let curve = noise_reduction_curve(&frames, 3).unwrap();
        assert_eq!(curve[0].0, 1);
        assert!((curve[0].1 - per_pixel_std(&frames).unwrap().mean()).abs() < 1e-12);
    }

    #[test]
    fn noise_curve_follows_inverse_sqrt() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0, 8.0).unwrap();
        let frames: Vec<Frame> = (0..400)
            .map(|t| Frame::from_fn(16, 16, t as f64, |_, _| noise.sample(&mut rng)))
            .collect();
        let curve = noise_reduction_curve(&frames, 25).unwrap();
        for n in [1usize, 4, 9, 16, 25] {
            let expected = 8.0 / (n as f64).sqrt();
            let got = curve[n - 1].1;
            assert!((got - expected).abs() / expected < 0.15, "N={n}: {got} vs {expected}");
        }
    }

    #[test]
    fn points_csv_roundtrip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.csv");
        let pts = vec![CalibrationPoint { x: 1.0, y: 2.0, s: 3.5 }, CalibrationPoint { x: 4.0, y: 0.0, s: 1.0 }];
        write_points_csv(&pts, &path).unwrap();
        assert_eq!(read_points_csv(&path).unwrap(), pts);
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "a,b,c\n1,2,3\n").unwrap();
        assert!(matches!(read_points_csv(&bad), Err(Error::Schema(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn compensation_scale_invariant(vals in proptest::collection::vec(0.1f64..100.0, 12), k in 0.01f64..50.0) {
                let g = Frame::from_vec(3, 4, vals, 0.0).unwrap();
                let a = compensation_map(&SensitivityMap { grid: g.clone(), lambda: 0.0, epsilon: 0.0 }, 0.0).unwrap();
                let b = compensation_map(&SensitivityMap { grid: g.map(|v| v * k), lambda: 0.0, epsilon: 0.0 }, 0.0).unwrap();
                for (x, y) in a.grid.values().iter().zip(b.grid.values()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn apply_compensation_is_linear(
                f1 in proptest::collection::vec(-800.0f64..800.0, 6),
                f2 in proptest::collection::vec(-800.0f64..800.0, 6),
                m in proptest::collection::vec(0.01f64..1.0, 6),
                a in -2.0f64..2.0,
            ) {
                let map = CompensationMap { grid: Frame::from_vec(2, 3, m, 0.0).unwrap(), lambda: 0.0, epsilon: 0.0 };
                let x = Frame::from_vec(2, 3, f1, 0.0).unwrap();
                let y = Frame::from_vec(2, 3, f2, 0.0).unwrap();
                let lhs = apply_compensation(&x.zip_with(&y, |p, q| a * p + q).unwrap(), &map).unwrap();
                let cx = apply_compensation(&x, &map).unwrap();
                let cy = apply_compensation(&y, &map).unwrap();
                for i in 0..6 {
                    prop_assert!((lhs.values()[i] - (a * cx.values()[i] + cy.values()[i])).abs() < 1e-9);
                }
            }

            #[test]
            fn zero_lambda_reproduces_points(seed in 0u64..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pts = random_points(&mut rng, 15, 12, 12);
                let w = tps_fit(&pts, 0.0).unwrap();
                for p in &pts {
                    prop_assert!((w.evaluate_at(p.x, p.y) - p.s).abs() < 1e-6);
                }
            }
        }
    }
}
