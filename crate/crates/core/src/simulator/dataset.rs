use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ContainerBase, ControllerState, SimConfig, VirtualLiquid};
use crate::calibration::CalibrationPoint;
use crate::error::{Error, Result};
use crate::heatmap::Session;

/// Where the priming film is left, away from the sampling area.
const PRIME_CENTER: (f64, f64) = (2.0, 2.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub label: String,
    pub liquid: VirtualLiquid,
    pub volume_ul: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerClassSpec {
    pub label: String,
    pub liquid: VirtualLiquid,
    pub base: ContainerBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub samples_per_class: usize,
    /// Frames recorded before the sample goes down.
    pub pre_frames: usize,
    /// Frames recorded after the sample goes down.
    pub post_frames: usize,
    /// Relative spread of the dispensed volume.
    pub volume_jitter: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            samples_per_class: 8,
            pre_frames: 10,
            post_frames: 50,
            volume_jitter: 0.1,
        }
    }
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        if self.samples_per_class == 0 || self.post_frames == 0 || self.pre_frames < 2 {
            return Err(Error::InvalidParameter(
                "need samples_per_class >= 1, post_frames >= 1 and pre_frames >= 2".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.volume_jitter) {
            return Err(Error::InvalidParameter("volume_jitter must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Two-class adulteration task: a base liquid and the same liquid cut with
/// ethanol. `separation` scales the ethanol fraction (1 gives 25 %); at 0
/// the classes are physically identical.
pub fn adulteration_classes(separation: f64) -> Vec<ClassSpec> {
    let base = VirtualLiquid {
        name: "pure".into(),
        ..VirtualLiquid::tap_water()
    };
    let mut adulterated = base.mix(&VirtualLiquid::ethanol(), 0.25 * separation);
    adulterated.name = "adulterated".into();
    vec![
        ClassSpec {
            label: "pure".into(),
            liquid: base,
            volume_ul: 200.0,
        },
        ClassSpec {
            label: "adulterated".into(),
            liquid: adulterated,
            volume_ul: 200.0,
        },
    ]
}

/// Three liquids in plastic cups.
pub fn container_classes() -> Vec<ContainerClassSpec> {
    [VirtualLiquid::tap_water(), VirtualLiquid::di_water(), VirtualLiquid::ethanol()]
        .into_iter()
        .map(|liquid| ContainerClassSpec {
            label: liquid.name.clone(),
            liquid,
            base: ContainerBase::PlasticCup,
        })
        .collect()
}

fn session_metadata(label: &str, class_index: usize, spec: &DatasetSpec, seed: u64) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("label".into(), label.to_string());
    m.insert("class_index".into(), class_index.to_string());
    m.insert("primed".into(), "true".into());
    m.insert("deposit_frame".into(), spec.pre_frames.to_string());
    m.insert("seed".into(), seed.to_string());
    m
}

/// One session per drop. Each session starts from a primed screen, records
/// `pre_frames` idle frames, deposits one drop and records `post_frames`.
/// Sessions are labelled through metadata (`label`, `center_row`, ...).
pub fn generate_dataset(config: &SimConfig, classes: &[ClassSpec], spec: &DatasetSpec) -> Result<Vec<Session>> {
    spec.validate()?;
    if classes.len() < 2 {
        return Err(Error::InvalidParameter(format!("need >= 2 classes, got {}", classes.len())));
    }
    let (rows, cols) = (config.profile.rows as f64, config.profile.cols as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sessions = Vec::with_capacity(classes.len() * spec.samples_per_class);
    for (ci, class) in classes.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let seed: u64 = rng.gen();
            let center = (rng.gen_range(7.0..rows - 7.0), rng.gen_range(10.0..cols - 8.0));
            let volume = class.volume_ul * (1.0 + rng.gen_range(-spec.volume_jitter..=spec.volume_jitter));
            let mut ctl = ControllerState::new(config.clone().with_seed(seed))?;
            ctl.prime(PRIME_CENTER)?;
            let mut frames = ctl.step_n(spec.pre_frames);
            ctl.deposit_drop(&class.liquid, center, volume)?;
            frames.extend(ctl.step_n(spec.post_frames));
            let mut meta = session_metadata(&class.label, ci, spec, seed);
            meta.insert("kind".into(), "drop".into());
            meta.insert("liquid".into(), class.liquid.name.clone());
            meta.insert("volume_ul".into(), format!("{volume:.3}"));
            meta.insert("center_row".into(), format!("{:.4}", center.0));
            meta.insert("center_col".into(), format!("{:.4}", center.1));
            sessions.push(rebased_session(config, &ctl, frames, meta)?);
        }
    }
    Ok(sessions)
}

/// Container sessions on a primed screen. Radius, fill volume and position
/// vary per sample.
pub fn generate_container_dataset(
    config: &SimConfig,
    classes: &[ContainerClassSpec],
    spec: &DatasetSpec,
) -> Result<Vec<Session>> {
    spec.validate()?;
    if classes.len() < 2 {
        return Err(Error::InvalidParameter(format!("need >= 2 classes, got {}", classes.len())));
    }
    let (rows, cols) = (config.profile.rows as f64, config.profile.cols as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sessions = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let seed: u64 = rng.gen();
            let radius = rng.gen_range(3.0..5.0);
            let volume = rng.gen_range(5_000.0..50_000.0);
            let center = (
                rows / 2.0 + rng.gen_range(-2.0..2.0),
                cols / 2.0 + rng.gen_range(-8.0..8.0),
            );
            let mut ctl = ControllerState::new(config.clone().with_seed(seed))?;
            ctl.prime(PRIME_CENTER)?;
            let mut frames = ctl.step_n(spec.pre_frames);
            ctl.place_container(&class.liquid, center, radius, volume, class.base)?;
            frames.extend(ctl.step_n(spec.post_frames));
            let mut meta = session_metadata(&class.label, ci, spec, seed);
            meta.insert("kind".into(), "container".into());
            meta.insert("liquid".into(), class.liquid.name.clone());
            meta.insert("volume_ul".into(), format!("{volume:.1}"));
            meta.insert("radius_cells".into(), format!("{radius:.4}"));
            meta.insert("center_row".into(), format!("{:.4}", center.0));
            meta.insert("center_col".into(), format!("{:.4}", center.1));
            sessions.push(rebased_session(config, &ctl, frames, meta)?);
        }
    }
    Ok(sessions)
}

/// Session timestamps start at zero when recording begins.
fn rebased_session(
    config: &SimConfig,
    ctl: &ControllerState,
    mut frames: Vec<crate::heatmap::Frame>,
    meta: BTreeMap<String, String>,
) -> Result<Session> {
    let t0 = frames.first().map_or(0.0, |f| f.timestamp_s);
    for f in &mut frames {
        f.timestamp_s -= t0;
    }
    Session::new(config.profile.clone(), ctl.reference_frame(), frames, meta)
}

/// Calibration run: a 500 µL tap-water drop at every grid point on a
/// `stride` lattice, read on the first frame at the nearest cell. The
/// reading is reported as a positive magnitude.
pub fn simulate_calibration_points(config: &SimConfig, stride: usize) -> Result<Vec<CalibrationPoint>> {
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be >= 1".into()));
    }
    let (rows, cols) = (config.profile.rows, config.profile.cols);
    let mut ctl = ControllerState::new(config.clone())?;
    let mut points = Vec::new();
    for r in (0..rows).step_by(stride) {
        for c in (0..cols).step_by(stride) {
            let id = ctl.deposit_drop(&VirtualLiquid::tap_water(), (r as f64, c as f64), 500.0)?;
            let f = ctl.step();
            ctl.remove(id)?;
            // let the filter forget the drop before the next one
            ctl.step_n(60);
            points.push(CalibrationPoint {
                x: c as f64,
                y: r as f64,
                s: -f.get(r, c),
            });
        }
    }
    Ok(points)
}
