//! Session wire protocol: one JSON object per line (or per WebSocket text
//! message), tagged by `type`.

use flood_core::sampler::EmissionRecord;
use flood_core::ControlId;
use serde::{Deserialize, Serialize};

/// Client → service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MessageIn {
    Configure(ConfigOverrides),
    Start {
        #[serde(default, flatten)]
        overrides: ConfigOverrides,
    },
    SetControl { control_id: ControlId },
    Stop,
}

/// Optional per-session settings; unset fields keep the service defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfg_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_unit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_control: Option<ControlId>,
    /// End the session after this many frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_frames: Option<usize>,
    /// Emit `window_state` every this many solver steps (0 disables).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_state_every: Option<usize>,
    /// Sleep between solver steps, for paced demos.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_delay_ms: Option<u64>,
    /// Scripted timeline `[[frame, control], …]`: from `frame` on, frames are
    /// bound to `control`. Replaying a live session's acknowledged switches
    /// this way reproduces its frames exactly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_schedule: Option<Vec<(usize, ControlId)>>,
}

impl ConfigOverrides {
    /// Fields set in `other` win.
    pub fn merge(&mut self, other: &ConfigOverrides) {
        macro_rules! take {
            ($($f:ident),*) => {$(if other.$f.is_some() { self.$f = other.$f.clone(); })*};
        }
        take!(
            seed,
            cfg_scale,
            steps_per_unit,
            sigma0,
            default_control,
            max_frames,
            window_state_every,
            step_delay_ms,
            control_schedule
        );
    }
}

/// Service → client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MessageOut {
    Frame {
        frame_index: usize,
        step_index: usize,
        values: Vec<f64>,
        alpha_snapshot: Vec<f64>,
        control_id: ControlId,
    },
    WindowState {
        t: f64,
        m: usize,
        n: usize,
        /// Controls already bound to frames in `m..n`, oldest first. The
        /// newest frame of the window is bound at the start of the next step.
        pending_controls: Vec<ControlId>,
        /// Control the next activated frame will receive.
        current_control: ControlId,
    },
    /// Echo of a `set_control`: the first frame that will carry it.
    ControlAck {
        control_id: ControlId,
        effective_frame: usize,
    },
    Error { message: String },
    Ended { reason: EndReason, frames: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Stopped,
    MaxFrames,
    Failed,
}

impl MessageOut {
    pub fn frame(rec: EmissionRecord, control_id: ControlId) -> Self {
        MessageOut::Frame {
            frame_index: rec.frame_index,
            step_index: rec.step_index,
            values: rec.values,
            alpha_snapshot: rec.alpha_snapshot,
            control_id,
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        MessageOut::Error {
            message: message.into(),
        }
    }

    /// Serialized form without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("protocol messages serialize")
    }
}

pub fn parse_line(line: &str) -> Result<MessageIn, String> {
    serde_json::from_str(line.trim()).map_err(|e| format!("malformed message: {e}"))
}
