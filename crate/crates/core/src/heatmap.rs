//! Frame and session data model plus the preprocessing arithmetic applied to
//! raw controller output.
//!
//! A controller recording is a reference frame `C_ref` taken once at the
//! start, followed by per-frame deltas `ΔC[n]`. The measured capacitance is
//! `C_ref + ΔC[n]`, and the liquid-induced signal is the measured frame minus
//! the first measured frame.
//!
//! Grids are stored row-major with `(row, col)` indexing, row 0 at the top of
//! the exported file. Values are device units kept as `f64`; rounding only
//! happens when a caller exports to an integer format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sign relation between device units and physical capacitance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SignConvention {
    /// A positive physical capacitance change is reported as a negative
    /// device-unit change.
    #[default]
    #[serde(rename = "device-units-inverted")]
    DeviceUnitsInverted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceProfile {
    pub rows: usize,
    pub cols: usize,
    pub pitch_mm: f64,
    pub frame_period_s: f64,
    pub drive_freq_hz: f64,
    pub sign_convention: SignConvention,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        Self {
            rows: 32,
            cols: 52,
            pitch_mm: 4.2,
            frame_period_s: 0.6,
            drive_freq_hz: 1.0e5,
            sign_convention: SignConvention::DeviceUnitsInverted,
        }
    }
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidParameter(format!(
                "profile grid must be non-empty, got {}x{}",
                self.rows, self.cols
            )));
        }
        for (name, v) in [
            ("pitch_mm", self.pitch_mm),
            ("frame_period_s", self.frame_period_s),
            ("drive_freq_hz", self.drive_freq_hz),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Angular drive frequency ω = 2π·f.
    pub fn omega_rad_s(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.drive_freq_hz
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// One rows×cols grid of device-unit readings at a timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub timestamp_s: f64,
}

impl Frame {
    pub fn zeros(rows: usize, cols: usize, timestamp_s: f64) -> Self {
        Self::filled(rows, cols, 0.0, timestamp_s)
    }

    pub fn filled(rows: usize, cols: usize, value: f64, timestamp_s: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
            timestamp_s,
        }
    }

    /// Builds a frame from row-major values. Fails when the length does not
    /// equal `rows * cols` or any value is non-finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>, timestamp_s: f64) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Schema(format!(
                "grid length {} does not equal rows*cols = {}x{} = {}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "cell ({}, {}) = {}",
                i / cols.max(1),
                i % cols.max(1),
                data[i]
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            timestamp_s,
        })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        timestamp_s: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            rows,
            cols,
            data,
            timestamp_s,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn try_get(&self, row: isize, col: isize) -> Option<f64> {
        if row < 0 || col < 0 || row as usize >= self.rows || col as usize >= self.cols {
            None
        } else {
            Some(self.get(row as usize, col as usize))
        }
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_dims(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::DimensionMismatch {
                expected_rows: rows,
                expected_cols: cols,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }

    pub fn ensure_same_dims(&self, other: &Frame) -> Result<()> {
        other.ensure_dims(self.rows, self.cols)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Frame {
        Frame {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
            timestamp_s: self.timestamp_s,
        }
    }

    /// Element-wise combination; the timestamp is taken from `self`.
    pub fn zip_with(&self, other: &Frame, f: impl Fn(f64, f64) -> f64) -> Result<Frame> {
        self.ensure_same_dims(other)?;
        Ok(Frame {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            timestamp_s: self.timestamp_s,
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn record(&self) -> FrameRecord {
        FrameRecord {
            timestamp_s: self.timestamp_s,
            grid: self.data.clone(),
        }
    }
}

/// Serialized frame: row-major grid, dimensions implied by the owning profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct FrameRecord {
    pub timestamp_s: f64,
    pub grid: Vec<f64>,
}

impl FrameRecord {
    fn into_frame(self, profile: &DeviceProfile) -> Result<Frame> {
        Frame::from_vec(profile.rows, profile.cols, self.grid, self.timestamp_s)
    }
}

/// A recording: device profile, reference frame and ordered delta frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SessionRecord", into = "SessionRecord")]
pub struct Session {
    pub profile: DeviceProfile,
    pub reference: Frame,
    pub deltas: Vec<Frame>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct SessionRecord {
    profile: DeviceProfile,
    reference: FrameRecord,
    deltas: Vec<FrameRecord>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

impl TryFrom<SessionRecord> for Session {
    type Error = Error;

    fn try_from(rec: SessionRecord) -> Result<Self> {
        let reference = rec.reference.into_frame(&rec.profile)?;
        let deltas = rec
            .deltas
            .into_iter()
            .map(|f| f.into_frame(&rec.profile))
            .collect::<Result<Vec<_>>>()?;
        Session::new(rec.profile, reference, deltas, rec.metadata)
    }
}

impl From<Session> for SessionRecord {
    fn from(s: Session) -> Self {
        SessionRecord {
            reference: s.reference.record(),
            deltas: s.deltas.iter().map(Frame::record).collect(),
            profile: s.profile,
            metadata: s.metadata,
        }
    }
}

impl Session {
    pub fn new(
        profile: DeviceProfile,
        reference: Frame,
        deltas: Vec<Frame>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        profile.validate()?;
        reference.ensure_dims(profile.rows, profile.cols)?;
        for d in &deltas {
            d.ensure_dims(profile.rows, profile.cols)?;
        }
        if !reference.is_finite() || deltas.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite("session frame".into()));
        }
        if let Some(w) = deltas
            .windows(2)
            .find(|w| !(w[1].timestamp_s > w[0].timestamp_s))
        {
            return Err(Error::Schema(format!(
                "delta timestamps must be strictly increasing ({} then {})",
                w[0].timestamp_s, w[1].timestamp_s
            )));
        }
        Ok(Self {
            profile,
            reference,
            deltas,
            metadata,
        })
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn measured(&self, n: usize) -> Result<Frame> {
        reconstruct_measured(self, n)
    }

    pub fn sample_delta(&self, n: usize) -> Result<Frame> {
        sample_delta(self, n)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }
}

/// `C_meas[n] = C_ref + ΔC[n]`, timestamped like delta `n`.
pub fn reconstruct_measured(session: &Session, n: usize) -> Result<Frame> {
    let delta = session.deltas.get(n).ok_or(Error::IndexOutOfRange {
        index: n,
        len: session.deltas.len(),
    })?;
    delta.zip_with(&session.reference, |d, r| d + r)
}

/// `ΔC_sample[n] = C_meas[n] − C_meas[0]`.
pub fn sample_delta(session: &Session, n: usize) -> Result<Frame> {
    if n >= session.deltas.len() {
        return Err(Error::IndexOutOfRange {
            index: n,
            len: session.deltas.len(),
        });
    }
    let measured_n = reconstruct_measured(session, n)?;
    if n == 0 {
        return Ok(measured_n.map(|_| 0.0));
    }
    let measured_0 = reconstruct_measured(session, 0)?;
    measured_n.zip_with(&measured_0, |a, b| a - b)
}

fn check_stack(frames: &[Frame]) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InsufficientData("empty frame list".into()))?;
    for f in &frames[1..] {
        first.ensure_same_dims(f)?;
    }
    Ok(())
}

/// Per-cell mean of the last `window` frames, timestamped like the newest.
pub fn temporal_average(frames: &[Frame], window: usize) -> Result<Frame> {
    check_stack(frames)?;
    if window == 0 {
        return Err(Error::InvalidParameter("averaging window must be >= 1".into()));
    }
    if window > frames.len() {
        return Err(Error::InsufficientData(format!(
            "window {window} larger than {} supplied frames",
            frames.len()
        )));
    }
    let tail = &frames[frames.len() - window..];
    let newest = tail.last().expect("window >= 1");
    let mut acc = vec![0.0; newest.len()];
    for f in tail {
        for (a, v) in acc.iter_mut().zip(f.values()) {
            *a += v;
        }
    }
    let inv = 1.0 / window as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Frame::from_vec(newest.rows(), newest.cols(), acc, newest.timestamp_s)
}

/// Per-cell sample standard deviation (divisor N−1).
pub fn per_pixel_std(frames: &[Frame]) -> Result<Frame> {
    check_stack(frames)?;
    if frames.len() < 2 {
        return Err(Error::InsufficientData(
            "per-pixel std needs at least 2 frames".into(),
        ));
    }
    let n = frames.len() as f64;
    let first = &frames[0];
    let mut mean = vec![0.0; first.len()];
    for f in frames {
        for (m, v) in mean.iter_mut().zip(f.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut ss = vec![0.0; first.len()];
    for f in frames {
        for ((s, m), v) in ss.iter_mut().zip(&mean).zip(f.values()) {
            *s += (v - m) * (v - m);
        }
    }
    let std = ss.into_iter().map(|s| (s / (n - 1.0)).sqrt()).collect();
    let newest = frames.last().expect("non-empty");
    Frame::from_vec(first.rows(), first.cols(), std, newest.timestamp_s)
}

/// Writes one frame as comma-separated rows.
pub fn write_frame_csv(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..frame.rows() {
        wtr.write_record((0..frame.cols()).map(|c| frame.get(r, c).to_string()))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_frame_csv(path: impl AsRef<Path>, profile: &DeviceProfile, timestamp_s: f64) -> Result<Frame> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let mut data = Vec::with_capacity(profile.cells());
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != profile.cols {
            return Err(Error::Schema(format!(
                "row {rows} has {} values, expected {}",
                rec.len(),
                profile.cols
            )));
        }
        for field in rec.iter() {
            data.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::Schema(format!("bad value {field:?}: {e}")))?,
            );
        }
        rows += 1;
    }
    if rows != profile.rows {
        return Err(Error::Schema(format!(
            "frame has {rows} rows, expected {}",
            profile.rows
        )));
    }
    Frame::from_vec(profile.rows, profile.cols, data, timestamp_s)
}

/// Sidecar for the CSV session layout: one CSV per frame next to this file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSessionSidecar {
    pub profile: DeviceProfile,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub reference: CsvFrameEntry,
    pub deltas: Vec<CsvFrameEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvFrameEntry {
    pub file: PathBuf,
    pub timestamp_s: f64,
}

/// Loads a session from a sidecar JSON whose frame paths are relative to it.
pub fn load_session_csv(sidecar: impl AsRef<Path>) -> Result<Session> {
    let sidecar = sidecar.as_ref();
    let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let meta: CsvSessionSidecar = serde_json::from_str(&text)?;
    let dir = sidecar.parent().unwrap_or_else(|| Path::new("."));
    let load = |e: &CsvFrameEntry| read_frame_csv(dir.join(&e.file), &meta.profile, e.timestamp_s);
    let reference = load(&meta.reference)?;
    let deltas = meta.deltas.iter().map(load).collect::<Result<Vec<_>>>()?;
    Session::new(meta.profile, reference, deltas, meta.metadata)
}

/// Loads either layout: a self-contained JSON session or a CSV sidecar.
pub fn load_session(path: impl AsRef<Path>) -> Result<Session> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.pointer("/reference/file").is_some() {
        load_session_csv(path)
    } else {
        Ok(serde_json::from_value(value)?)
    }
}

/// Writes `reference.csv`, `delta_NNNNN.csv` and `session.json` into `dir`.
pub fn save_session_csv(session: &Session, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_frame_csv(&session.reference, dir.join("reference.csv"))?;
    let mut deltas = Vec::with_capacity(session.deltas.len());
    for (i, d) in session.deltas.iter().enumerate() {
        let file = PathBuf::from(format!("delta_{i:05}.csv"));
        write_frame_csv(d, dir.join(&file))?;
        deltas.push(CsvFrameEntry {
            file,
            timestamp_s: d.timestamp_s,
        });
    }
    let sidecar = CsvSessionSidecar {
        profile: session.profile.clone(),
        metadata: session.metadata.clone(),
        reference: CsvFrameEntry {
            file: "reference.csv".into(),
            timestamp_s: session.reference.timestamp_s,
        },
        deltas,
    };
    let path = dir.join("session.json");
    fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_profile(rows: usize, cols: usize) -> DeviceProfile {
        DeviceProfile {
            rows,
            cols,
            ..DeviceProfile::default()
        }
    }

    fn random_frame(rng: &mut ChaCha8Rng, rows: usize, cols: usize, t: f64) -> Frame {
        Frame::from_fn(rows, cols, t, |_, _| rng.gen_range(-500.0..500.0))
    }

    fn random_session(seed: u64, n: usize) -> Session {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = DeviceProfile::default();
        let reference = random_frame(&mut rng, p.rows, p.cols, 0.0);
        let deltas = (0..n)
            .map(|i| random_frame(&mut rng, p.rows, p.cols, i as f64 * p.frame_period_s))
            .collect();
        Session::new(p, reference, deltas, BTreeMap::new()).unwrap()
    }

    #[test]
    fn reconstruct_zero_reference_is_identity() {
        let p = small_profile(3, 4);
        let delta = Frame::from_fn(3, 4, 1.5, |r, c| (r * 10 + c) as f64);
        let s = Session::new(p, Frame::zeros(3, 4, 0.0), vec![delta.clone()], BTreeMap::new()).unwrap();
        assert_eq!(reconstruct_measured(&s, 0).unwrap(), delta);
    }

    #[test]
    fn reconstruct_constant_arithmetic() {
        let p = small_profile(2, 2);
        let s = Session::new(
            p,
            Frame::filled(2, 2, 100.0, 0.0),
            vec![Frame::filled(2, 2, -30.0, 0.6)],
            BTreeMap::new(),
        )
        .unwrap();
        let m = reconstruct_measured(&s, 0).unwrap();
        assert!(m.values().iter().all(|&v| v == 70.0));
        assert_eq!(m.timestamp_s, 0.6);
    }

    #[test]
    fn reconstruct_matches_scalar_loop() {
        let s = random_session(1, 3);
        for n in 0..3 {
            let m = reconstruct_measured(&s, n).unwrap();
            for r in 0..32 {
                for c in 0..52 {
                    let expected = s.reference.get(r, c) + s.deltas[n].get(r, c);
                    assert_eq!(m.get(r, c), expected);
                }
            }
        }
        assert!(matches!(
            reconstruct_measured(&s, 3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn sample_delta_cases() {
        let s = random_session(2, 4);
        assert!(sample_delta(&s, 0).unwrap().values().iter().all(|&v| v == 0.0));
        for n in 1..4 {
            let a = reconstruct_measured(&s, n).unwrap();
            let b = reconstruct_measured(&s, 0).unwrap();
            let sd = sample_delta(&s, n).unwrap();
            for r in 0..32 {
                for c in 0..52 {
                    assert_eq!(sd.get(r, c), a.get(r, c) - b.get(r, c));
                }
            }
        }
        assert!(sample_delta(&s, 9).is_err());

        let p = small_profile(2, 3);
        let d = Frame::filled(2, 3, 7.0, 0.0);
        let deltas = (0..5)
            .map(|i| Frame { timestamp_s: i as f64, ..d.clone() })
            .collect();
        let flat = Session::new(p, Frame::filled(2, 3, 3.0, 0.0), deltas, BTreeMap::new()).unwrap();
        for n in 0..5 {
            assert!(sample_delta(&flat, n).unwrap().values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn temporal_average_basics() {
        let f = Frame::filled(2, 2, 3.0, 0.0);
        let frames = vec![f.clone(), f.clone(), f.clone()];
        assert_eq!(temporal_average(&frames, 3).unwrap().values(), f.values());
        let pair = vec![Frame::zeros(2, 2, 0.0), Frame::filled(2, 2, 10.0, 1.0)];
        let avg = temporal_average(&pair, 2).unwrap();
        assert!(avg.values().iter().all(|&v| v == 5.0));
        assert_eq!(avg.timestamp_s, 1.0);
        assert!(temporal_average(&[], 1).is_err());
        assert!(temporal_average(&pair, 3).is_err());
        assert!(temporal_average(&pair, 0).is_err());
        let bad = vec![Frame::zeros(2, 2, 0.0), Frame::zeros(3, 2, 1.0)];
        assert!(matches!(temporal_average(&bad, 2), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn temporal_average_noise_law() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 8.0).unwrap();
        // 100x100 = 10,000 Monte-Carlo cells, 20-frame window
        let frames: Vec<Frame> = (0..20)
            .map(|t| Frame::from_fn(100, 100, t as f64, |_, _| noise.sample(&mut rng)))
            .collect();
        let avg = temporal_average(&frames, 20).unwrap();
        let m = avg.mean();
        let var = avg.values().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (avg.len() - 1) as f64;
        let expected = 8.0 / 20f64.sqrt();
        assert!((var.sqrt() - expected).abs() / expected < 0.15, "std {}", var.sqrt());
    }

    #[test]
    fn per_pixel_std_cases() {
        let f = Frame::filled(2, 2, 4.0, 0.0);
        assert!(per_pixel_std(&[f.clone(), f.clone()]).unwrap().values().iter().all(|&v| v == 0.0));
        let mut g = f.clone();
        g.set(1, 0, 6.0);
        let s = per_pixel_std(&[f.clone(), g]).unwrap();
        assert!((s.get(1, 0) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.get(0, 0), 0.0);
        assert!(per_pixel_std(&[f]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack: Vec<Frame> = (0..7).map(|t| random_frame(&mut rng, 4, 5, t as f64)).collect();
        let s = per_pixel_std(&stack).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                let xs: Vec<f64> = stack.iter().map(|f| f.get(r, c)).collect();
                let mean = xs.iter().sum::<f64>() / 7.0;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
                assert!((s.get(r, c) - var.sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn session_rejects_bad_input() {
        let p = small_profile(2, 2);
        let bad_ts = vec![Frame::zeros(2, 2, 1.0), Frame::zeros(2, 2, 1.0)];
        assert!(Session::new(p.clone(), Frame::zeros(2, 2, 0.0), bad_ts, BTreeMap::new()).is_err());
        let wrong_dims = vec![Frame::zeros(2, 3, 0.0)];
        assert!(Session::new(p.clone(), Frame::zeros(2, 2, 0.0), wrong_dims, BTreeMap::new()).is_err());
        assert!(Frame::from_vec(2, 2, vec![0.0, f64::NAN, 0.0, 0.0], 0.0).is_err());

        let json = r#"{"profile":{"rows":2,"cols":2},"reference":{"timestamp_s":0,"grid":[1,2,3]},"deltas":[]}"#;
        assert_eq!(Session::from_json_str(json).unwrap_err().code(), "schema_violation");
    }

    #[test]
    fn json_and_csv_layouts_agree() {
        let s = random_session(5, 3);
        let back = Session::from_json_str(&s.to_json_string().unwrap()).unwrap();
        assert_eq!(back, s);

        let dir = tempfile::tempdir().unwrap();
        let sidecar = save_session_csv(&s, dir.path()).unwrap();
        let loaded = load_session_csv(sidecar).unwrap();
        assert_eq!(loaded.deltas.len(), 3);
        for (a, b) in loaded.deltas.iter().zip(&s.deltas) {
            assert_eq!(a.values(), b.values());
            assert_eq!(a.timestamp_s, b.timestamp_s);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn grid(len: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-1000.0f64..1000.0, len)
        }

        proptest! {
            #[test]
            fn reconstruct_is_linear(
                r in grid(12), d1 in grid(12), d2 in grid(12),
                a in -3.0f64..3.0, b in -3.0f64..3.0,
            ) {
                let p = small_profile(3, 4);
                let fr = Frame::from_vec(3, 4, r, 0.0).unwrap();
                let f1 = Frame::from_vec(3, 4, d1, 0.0).unwrap();
                let f2 = Frame::from_vec(3, 4, d2, 0.0).unwrap();
                let combo = f1.zip_with(&f2, |x, y| a * x + b * y).unwrap();
                let with_ref = |reference: Frame, delta: Frame| {
                    let s = Session::new(p.clone(), reference, vec![delta], BTreeMap::new()).unwrap();
                    reconstruct_measured(&s, 0).unwrap()
                };
                let lhs = with_ref(fr.clone(), combo);
                let m1 = with_ref(Frame::zeros(3, 4, 0.0), f1);
                let m2 = with_ref(Frame::zeros(3, 4, 0.0), f2);
                for i in 0..12 {
                    let rhs = a * m1.values()[i] + b * m2.values()[i] + fr.values()[i];
                    prop_assert!((lhs.values()[i] - rhs).abs() < 1e-9);
                }
            }

            #[test]
            fn window_one_is_identity(frames in proptest::collection::vec(grid(6), 1..5)) {
                let frames: Vec<Frame> = frames
                    .into_iter()
                    .enumerate()
                    .map(|(i, g)| Frame::from_vec(2, 3, g, i as f64).unwrap())
                    .collect();
                let avg = temporal_average(&frames, 1).unwrap();
                prop_assert_eq!(&avg, frames.last().unwrap());
            }

            #[test]
            fn first_sample_delta_is_zero(seed in 0u64..1000) {
                let s = random_session(seed, 2);
                prop_assert!(sample_delta(&s, 0).unwrap().values().iter().all(|&v| v == 0.0));
            }
        }
    }
}
