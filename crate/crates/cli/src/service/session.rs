//! Transport-independent session logic. A session reads protocol lines from an
//! inbox channel and writes protocol lines to a bounded outbox; the stream
//! itself steps on a blocking thread so a stalled consumer pauses stepping
//! instead of dropping frames.

use std::sync::mpsc as std_mpsc;
use std::sync::Arc;
use std::time::Duration;

use flood_core::sampler::{SampleConfig, SigmaProfile, StreamState};
use flood_core::schedule::VectorizedSchedule;
use flood_core::{ControlId, DenoiserParams, VelocityField};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use super::protocol::{parse_line, ConfigOverrides, EndReason, MessageIn, MessageOut};

/// Everything a session needs that does not change per connection.
#[derive(Clone)]
pub struct ServiceContext {
    pub model: Arc<DenoiserParams>,
    pub n_s: f64,
    pub defaults: SessionSettings,
}

/// Fully resolved per-session settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSettings {
    pub seed: u64,
    pub cfg_scale: f64,
    pub steps_per_unit: usize,
    pub sigma0: f64,
    pub default_control: ControlId,
    pub max_frames: Option<usize>,
    pub window_state_every: usize,
    pub step_delay_ms: u64,
    pub control_schedule: Vec<(usize, ControlId)>,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            cfg_scale: 1.0,
            steps_per_unit: 16,
            sigma0: 0.0,
            default_control: 0,
            max_frames: None,
            window_state_every: 8,
            step_delay_ms: 0,
            control_schedule: Vec::new(),
        }
    }
}

impl SessionSettings {
    pub fn apply(&self, o: &ConfigOverrides) -> Self {
        let mut s = self.clone();
        if let Some(v) = o.seed {
            s.seed = v;
        }
        if let Some(v) = o.cfg_scale {
            s.cfg_scale = v;
        }
        if let Some(v) = o.steps_per_unit {
            s.steps_per_unit = v;
        }
        if let Some(v) = o.sigma0 {
            s.sigma0 = v;
        }
        if let Some(v) = o.default_control {
            s.default_control = v;
        }
        if o.max_frames.is_some() {
            s.max_frames = o.max_frames;
        }
        if let Some(v) = o.window_state_every {
            s.window_state_every = v;
        }
        if let Some(v) = o.step_delay_ms {
            s.step_delay_ms = v;
        }
        if let Some(v) = &o.control_schedule {
            s.control_schedule = v.clone();
        }
        s
    }

    fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            steps_per_unit: self.steps_per_unit,
            cfg_scale: self.cfg_scale,
            sigma: if self.sigma0 > 0.0 {
                SigmaProfile::Constant { sigma0: self.sigma0 }
            } else {
                SigmaProfile::Off
            },
            seed: self.seed,
            unbounded: true,
            max_context: None,
        }
    }
}

fn check_control(model: &DenoiserParams, id: ControlId) -> Result<(), String> {
    let real = model.config().null_control();
    if id >= real {
        return Err(format!("control id {id} is outside 0..{real}"));
    }
    Ok(())
}

fn validate(ctx: &ServiceContext, s: &SessionSettings) -> Result<(), String> {
    s.sample_config().validate().map_err(|e| e.to_string())?;
    check_control(&ctx.model, s.default_control)?;
    for &(_, c) in &s.control_schedule {
        check_control(&ctx.model, c)?;
    }
    Ok(())
}

enum Command {
    SetControl(ControlId),
    Stop,
}

/// Frame → control bindings ordered by the first frame they apply to.
#[derive(Debug, Clone)]
struct Timeline {
    default: ControlId,
    entries: Vec<(usize, ControlId)>,
}

impl Timeline {
    fn new(default: ControlId, scripted: &[(usize, ControlId)]) -> Self {
        let mut entries = scripted.to_vec();
        entries.sort_by_key(|e| e.0);
        Self { default, entries }
    }

    /// Later insertions win ties with existing entries for the same frame.
    fn insert(&mut self, frame: usize, control: ControlId) {
        let at = self.entries.partition_point(|e| e.0 <= frame);
        self.entries.insert(at, (frame, control));
    }

    fn at(&self, frame: usize) -> ControlId {
        let i = self.entries.partition_point(|e| e.0 <= frame);
        if i == 0 {
            self.default
        } else {
            self.entries[i - 1].1
        }
    }
}

fn send(out: &mpsc::Sender<String>, msg: &MessageOut) -> bool {
    out.blocking_send(msg.to_line()).is_ok()
}

/// Steps one unbounded stream until stopped, `max_frames` is reached, or the
/// consumer goes away.
fn stream_loop(
    ctx: ServiceContext,
    settings: SessionSettings,
    commands: std_mpsc::Receiver<Command>,
    out: mpsc::Sender<String>,
) {
    let model = ctx.model.as_ref();
    let dim = model.config().dim;
    let sched = match VectorizedSchedule::triangular(ctx.n_s, 1) {
        Ok(s) => s,
        Err(e) => {
            send(&out, &MessageOut::error(e.to_string()));
            return;
        }
    };
    let mut state = match StreamState::new(dim, &sched, &settings.sample_config()) {
        Ok(s) => s,
        Err(e) => {
            send(&out, &MessageOut::error(e.to_string()));
            return;
        }
    };
    let mut timeline = Timeline::new(settings.default_control, &settings.control_schedule);
    let end = |out: &mpsc::Sender<String>, reason, frames| {
        send(out, &MessageOut::Ended { reason, frames });
    };
    loop {
        loop {
            match commands.try_recv() {
                Ok(Command::SetControl(id)) => {
                    let effective = state.activated();
                    timeline.insert(effective, id);
                    if !send(
                        &out,
                        &MessageOut::ControlAck {
                            control_id: id,
                            effective_frame: effective,
                        },
                    ) {
                        return;
                    }
                }
                Ok(Command::Stop) => return end(&out, EndReason::Stopped, state.emitted_count()),
                Err(std_mpsc::TryRecvError::Empty) => break,
                Err(std_mpsc::TryRecvError::Disconnected) => return,
            }
        }
        let mut provider = |k: usize| -> Result<ControlId, String> { Ok(timeline.at(k)) };
        let records = match state.step(model as &dyn VelocityField, &mut provider) {
            Ok(r) => r,
            Err(e) => {
                send(&out, &MessageOut::error(e.to_string()));
                return end(&out, EndReason::Failed, state.emitted_count());
            }
        };
        for rec in records {
            let control = state.controls()[rec.frame_index];
            if !send(&out, &MessageOut::frame(rec, control)) {
                return;
            }
            if settings.max_frames.is_some_and(|m| state.emitted_count() >= m) {
                return end(&out, EndReason::MaxFrames, state.emitted_count());
            }
        }
        if settings.window_state_every > 0 && state.steps_taken() % settings.window_state_every == 0 {
            let w = state.window_state();
            let hi = w.n.min(state.activated());
            let msg = MessageOut::WindowState {
                t: w.t,
                m: w.m,
                n: w.n,
                pending_controls: state.controls()[w.m.min(hi)..hi].to_vec(),
                current_control: timeline.at(state.activated()),
            };
            if !send(&out, &msg) {
                return;
            }
        }
        if settings.step_delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(settings.step_delay_ms));
        }
    }
}

struct Running {
    commands: std_mpsc::Sender<Command>,
    handle: JoinHandle<()>,
}

/// Drives one session until the inbox closes.
pub async fn run_session(ctx: ServiceContext, mut inbox: mpsc::Receiver<String>, out: mpsc::Sender<String>) {
    let mut overrides = ConfigOverrides::default();
    let mut running: Option<Running> = None;
    loop {
        let line = if let Some(r) = running.as_mut() {
            tokio::select! {
                line = inbox.recv() => line,
                _ = &mut r.handle => {
                    running = None;
                    continue;
                }
            }
        } else {
            inbox.recv().await
        };
        let Some(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let msg = match parse_line(&line) {
            Ok(m) => m,
            Err(e) => {
                if out.send(MessageOut::error(e).to_line()).await.is_err() {
                    break;
                }
                continue;
            }
        };
        let reply = match msg {
            MessageIn::Configure(o) if running.is_none() => {
                let mut candidate = overrides.clone();
                candidate.merge(&o);
                match validate(&ctx, &ctx.defaults.apply(&candidate)) {
                    Ok(()) => {
                        overrides = candidate;
                        None
                    }
                    Err(e) => Some(e),
                }
            }
            MessageIn::Configure(_) => Some("configure is only accepted before start".to_string()),
            MessageIn::Start { .. } if running.is_some() => Some("session already started".to_string()),
            MessageIn::Start { overrides: o } => {
                let mut all = overrides.clone();
                all.merge(&o);
                let settings = ctx.defaults.apply(&all);
                match validate(&ctx, &settings) {
                    Ok(()) => {
                        let (tx, rx) = std_mpsc::channel();
                        let (c, o2) = (ctx.clone(), out.clone());
                        let handle = tokio::task::spawn_blocking(move || stream_loop(c, settings, rx, o2));
                        running = Some(Running { commands: tx, handle });
                        None
                    }
                    Err(e) => Some(e),
                }
            }
            MessageIn::SetControl { control_id } => match &running {
                None => Some("set_control is only valid after start".to_string()),
                Some(r) => match check_control(&ctx.model, control_id) {
                    Ok(()) => {
                        let _ = r.commands.send(Command::SetControl(control_id));
                        None
                    }
                    Err(e) => Some(e),
                },
            },
            MessageIn::Stop => match running.take() {
                None => Some("no stream is running".to_string()),
                Some(r) => {
                    let _ = r.commands.send(Command::Stop);
                    let _ = r.handle.await;
                    None
                }
            },
        };
        if let Some(e) = reply {
            if out.send(MessageOut::error(e).to_line()).await.is_err() {
                break;
            }
        }
    }
    if let Some(r) = running.take() {
        let _ = r.commands.send(Command::Stop);
        drop(out);
        let _ = r.handle.await;
    }
}
