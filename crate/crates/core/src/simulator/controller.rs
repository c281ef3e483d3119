use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ContainerBase, SimConfig, VirtualLiquid};
use crate::error::{Error, Result};
use crate::heatmap::Frame;

pub type SampleId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SampleKind {
    Drop {
        liquid: VirtualLiquid,
        volume_ul: f64,
    },
    /// Conductive residue left after drawing up a drop.
    Film,
    Container {
        liquid: VirtualLiquid,
        volume_ul: f64,
        base: ContainerBase,
        radius_cells: f64,
    },
}

/// A sample on the screen and its noise-free contribution to the field.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedSample {
    pub id: SampleId,
    pub kind: SampleKind,
    /// `(row, col)` in cell coordinates.
    pub center: (f64, f64),
    /// Cells wetted by the sample (drops and films only).
    pub footprint: Vec<(usize, usize)>,
    field: Vec<f64>,
}

impl PlacedSample {
    pub fn field(&self) -> &[f64] {
        &self.field
    }
}

/// Contact radius in cells: grows with the cube root of volume and shrinks
/// with surface tension.
pub fn contact_radius_cells(volume_ul: f64, surface_tension_mn_m: f64) -> f64 {
    0.25 * volume_ul.cbrt() * (72.0 / surface_tension_mn_m).sqrt()
}

/// Cells whose centres lie within `radius` of `center`; the nearest cell is
/// always included.
pub fn drop_footprint(center: (f64, f64), radius: f64, rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let nearest = (
        center.0.round().clamp(0.0, (rows - 1) as f64) as usize,
        center.1.round().clamp(0.0, (cols - 1) as f64) as usize,
    );
    let mut cells = Vec::new();
    for_cells_within(center, radius, rows, cols, |r, c, _| cells.push((r, c)));
    if !cells.contains(&nearest) {
        cells.push(nearest);
        cells.sort_unstable();
    }
    cells
}

fn for_cells_within(center: (f64, f64), radius: f64, rows: usize, cols: usize, mut f: impl FnMut(usize, usize, f64)) {
    let r0 = (center.0 - radius).floor().max(0.0) as usize;
    let r1 = ((center.0 + radius).ceil().max(0.0) as usize).min(rows - 1);
    let c0 = (center.1 - radius).floor().max(0.0) as usize;
    let c1 = ((center.1 + radius).ceil().max(0.0) as usize).min(cols - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let d = ((r as f64 - center.0).powi(2) + (c as f64 - center.1).powi(2)).sqrt();
            if d <= radius {
                f(r, c, d);
            }
        }
    }
}

/// Simulated controller: samples on the screen, adaptive baseline, RNG.
#[derive(Debug, Clone)]
pub struct ControllerState {
    config: SimConfig,
    rng: ChaCha8Rng,
    baseline: Vec<f64>,
    samples: Vec<PlacedSample>,
    next_id: SampleId,
    frames_emitted: usize,
}

impl ControllerState {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let n = config.profile.cells();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            baseline: vec![0.0; n],
            samples: Vec::new(),
            next_id: 0,
            frames_emitted: 0,
            config,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn samples(&self) -> &[PlacedSample] {
        &self.samples
    }

    pub fn sample(&self, id: SampleId) -> Option<&PlacedSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn time_s(&self) -> f64 {
        self.frames_emitted as f64 * self.config.profile.frame_period_s
    }

    pub fn baseline(&self) -> &[f64] {
        &self.baseline
    }

    /// The raw reference frame the controller reports alongside deltas.
    pub fn reference_frame(&self) -> Frame {
        self.config.reference_frame()
    }

    /// The filter runs only while enabled and no conductive film is present.
    pub fn filter_active(&self) -> bool {
        self.config.filter_enabled && !self.samples.iter().any(|s| s.kind == SampleKind::Film)
    }

    /// Noise-free field: superposition of all sample contributions.
    pub fn true_field(&self) -> Frame {
        let (rows, cols) = (self.config.profile.rows, self.config.profile.cols);
        let mut out = vec![0.0; rows * cols];
        for s in &self.samples {
            for (o, v) in out.iter_mut().zip(&s.field) {
                *o += v;
            }
        }
        Frame::from_vec(rows, cols, out, self.time_s()).expect("field matches profile")
    }

    fn check_center(&self, center: (f64, f64)) -> Result<()> {
        let (rows, cols) = (self.config.profile.rows as f64, self.config.profile.cols as f64);
        let inside = center.0.is_finite()
            && center.1.is_finite()
            && (-0.5..rows - 0.5).contains(&center.0)
            && (-0.5..cols - 0.5).contains(&center.1);
        if inside {
            Ok(())
        } else {
            Err(Error::Simulation(format!("center {center:?} lies outside the {rows}x{cols} screen")))
        }
    }

    fn push(&mut self, kind: SampleKind, center: (f64, f64), footprint: Vec<(usize, usize)>, field: Vec<f64>) -> SampleId {
        let id = self.next_id;
        self.next_id += 1;
        self.samples.push(PlacedSample {
            id,
            kind,
            center,
            footprint,
            field,
        });
        id
    }

    pub fn deposit_drop(&mut self, liquid: &VirtualLiquid, center: (f64, f64), volume_ul: f64) -> Result<SampleId> {
        liquid.validate()?;
        self.check_center(center)?;
        if !(volume_ul.is_finite() && volume_ul > 0.0) {
            return Err(Error::InvalidParameter(format!("volume must be > 0, got {volume_ul}")));
        }
        let (rows, cols) = (self.config.profile.rows, self.config.profile.cols);
        let magnitude = self.config.drop_magnitude(liquid, volume_ul);
        let radius = contact_radius_cells(volume_ul, liquid.surface_tension_mn_m);
        let footprint = drop_footprint(center, radius, rows, cols);
        let mut field = vec![0.0; rows * cols];
        for_cells_within(center, radius + 1.0, rows, cols, |r, c, d| {
            if d > radius {
                field[r * cols + c] = -0.1 * magnitude;
            }
        });
        for &(r, c) in &footprint {
            let d = ((r as f64 - center.0).powi(2) + (c as f64 - center.1).powi(2)).sqrt();
            let u = if radius > 0.0 { (d / radius).min(1.0) } else { 0.0 };
            field[r * cols + c] = -magnitude * (1.0 - 0.5 * u * u);
        }
        let kind = SampleKind::Drop {
            liquid: liquid.clone(),
            volume_ul,
        };
        Ok(self.push(kind, center, footprint, field))
    }

    /// Draws up a drop, leaving a conductive film over its footprint. The
    /// film keeps the sample id.
    pub fn draw_up(&mut self, id: SampleId) -> Result<SampleId> {
        let film_level = self.config.film_level;
        let cols = self.config.profile.cols;
        let sample = self
            .samples
            .iter_mut()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Simulation(format!("no sample with id {id}")))?;
        if !matches!(sample.kind, SampleKind::Drop { .. }) {
            return Err(Error::Simulation(format!("sample {id} is not a drop")));
        }
        sample.kind = SampleKind::Film;
        sample.field.iter_mut().for_each(|v| *v = 0.0);
        for &(r, c) in &sample.footprint {
            sample.field[r * cols + c] = film_level;
        }
        Ok(id)
    }

    /// Removes any sample, including films; the filter resumes once no film
    /// is left.
    pub fn remove(&mut self, id: SampleId) -> Result<PlacedSample> {
        let pos = self
            .samples
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::Simulation(format!("no sample with id {id}")))?;
        Ok(self.samples.remove(pos))
    }

    /// Places a container. The rim reads positive with a level set by the
    /// base material and the liquid, independent of fill volume; the
    /// interior reads negative and four fringing lobes sit off the corners.
    pub fn place_container(
        &mut self,
        liquid: &VirtualLiquid,
        center: (f64, f64),
        radius_cells: f64,
        volume_ul: f64,
        base: ContainerBase,
    ) -> Result<SampleId> {
        liquid.validate()?;
        self.check_center(center)?;
        if !(radius_cells.is_finite() && radius_cells >= 1.0) {
            return Err(Error::InvalidParameter(format!("container radius must be >= 1 cell, got {radius_cells}")));
        }
        if !(volume_ul.is_finite() && volume_ul > 0.0) {
            return Err(Error::InvalidParameter(format!("volume must be > 0, got {volume_ul}")));
        }
        let (rows, cols) = (self.config.profile.rows, self.config.profile.cols);
        let rim = base.rim_coupling() * self.config.relative_response(liquid);
        let mut field = vec![0.0; rows * cols];
        for_cells_within(center, radius_cells + 0.5, rows, cols, |r, c, d| {
            field[r * cols + c] = if d >= radius_cells - 0.5 { rim } else { -0.3 * rim };
        });
        let offset = (radius_cells + 1.2) / std::f64::consts::SQRT_2;
        for (dr, dc) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
            let lobe = (center.0 + dr * offset, center.1 + dc * offset);
            for_cells_within(lobe, 0.75, rows, cols, |r, c, _| {
                if field[r * cols + c] == 0.0 {
                    field[r * cols + c] = 0.5 * rim;
                }
            });
        }
        let kind = SampleKind::Container {
            liquid: liquid.clone(),
            volume_ul,
            base,
            radius_cells,
        };
        Ok(self.push(kind, center, Vec::new(), field))
    }

    /// Deposits a 500 µL tap-water drop, draws it up and lets the reading
    /// settle. Afterwards the baseline is frozen by the film.
    pub fn prime(&mut self, center: (f64, f64)) -> Result<SampleId> {
        let id = self.deposit_drop(&VirtualLiquid::tap_water(), center, 500.0)?;
        self.step_n(2);
        self.draw_up(id)?;
        self.step_n(2);
        Ok(id)
    }

    /// Emits one delta frame and advances the adaptive filter.
    pub fn step(&mut self) -> Frame {
        let cfg = &self.config;
        let k = 1.0 - (-cfg.profile.frame_period_s / cfg.filter_tau_s).exp();
        let filter = self.filter_active();
        let truth = self.true_field();
        let sat = cfg.saturation;
        let mut out = Vec::with_capacity(truth.len());
        for (i, &t) in truth.values().iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let observed = (cfg.sensitivity_map[i] * t + cfg.noise_std_map[i] * z).clamp(-sat, sat);
            let delta = (observed - self.baseline[i]).clamp(-sat, sat);
            out.push(if cfg.quantize { delta.round() } else { delta });
            if filter {
                self.baseline[i] += k * (observed - self.baseline[i]);
            }
        }
        let frame = Frame::from_vec(cfg.profile.rows, cfg.profile.cols, out, self.time_s()).expect("frame matches profile");
        self.frames_emitted += 1;
        frame
    }

    pub fn step_n(&mut self, n: usize) -> Vec<Frame> {
        (0..n).map(|_| self.step()).collect()
    }
}
