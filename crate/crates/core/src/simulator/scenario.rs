use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ContainerBase, ControllerState, SampleId, SimConfig, VirtualLiquid};
use crate::error::{Error, Result};
use crate::heatmap::Session;

/// A liquid given either by preset name or inline properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LiquidRef {
    Preset(String),
    Custom(VirtualLiquid),
}

impl LiquidRef {
    pub fn resolve(&self) -> Result<VirtualLiquid> {
        match self {
            LiquidRef::Preset(name) => {
                VirtualLiquid::preset(name).ok_or_else(|| Error::InvalidParameter(format!("unknown liquid preset {name:?}")))
            }
            LiquidRef::Custom(l) => {
                l.validate()?;
                Ok(l.clone())
            }
        }
    }
}

/// One step of a scenario script. Samples are referred to by id, which
/// counts up from 0 in creation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ScenarioOp {
    Deposit {
        liquid: LiquidRef,
        center: [f64; 2],
        volume_ul: f64,
    },
    DrawUp {
        sample: SampleId,
    },
    Remove {
        sample: SampleId,
    },
    PlaceContainer {
        liquid: LiquidRef,
        center: [f64; 2],
        radius_cells: f64,
        volume_ul: f64,
        base: ContainerBase,
    },
    /// Deposit and draw up a tap-water drop, leaving a film.
    Prime {
        center: [f64; 2],
    },
    Wait {
        seconds: f64,
    },
    Step {
        frames: usize,
    },
}

/// Runs a script from a fresh controller and records every emitted frame.
pub fn run_scenario(config: &SimConfig, ops: &[ScenarioOp]) -> Result<Session> {
    let mut ctl = ControllerState::new(config.clone())?;
    let mut frames = Vec::new();
    for op in ops {
        match op {
            ScenarioOp::Deposit { liquid, center, volume_ul } => {
                ctl.deposit_drop(&liquid.resolve()?, (center[0], center[1]), *volume_ul)?;
            }
            ScenarioOp::DrawUp { sample } => {
                ctl.draw_up(*sample)?;
            }
            ScenarioOp::Remove { sample } => {
                ctl.remove(*sample)?;
            }
            ScenarioOp::PlaceContainer {
                liquid,
                center,
                radius_cells,
                volume_ul,
                base,
            } => {
                ctl.place_container(&liquid.resolve()?, (center[0], center[1]), *radius_cells, *volume_ul, *base)?;
            }
            ScenarioOp::Prime { center } => {
                let id = ctl.deposit_drop(&VirtualLiquid::tap_water(), (center[0], center[1]), 500.0)?;
                frames.extend(ctl.step_n(2));
                ctl.draw_up(id)?;
            }
            ScenarioOp::Wait { seconds } => {
                if !(seconds.is_finite() && *seconds >= 0.0) {
                    return Err(Error::InvalidParameter(format!("wait must be >= 0 s, got {seconds}")));
                }
                let n = (seconds / config.profile.frame_period_s).round() as usize;
                frames.extend(ctl.step_n(n));
            }
            ScenarioOp::Step { frames: n } => frames.extend(ctl.step_n(*n)),
        }
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("source".to_string(), "scenario".to_string());
    metadata.insert("seed".to_string(), config.seed.to_string());
    Session::new(config.profile.clone(), ctl.reference_frame(), frames, metadata)
}
