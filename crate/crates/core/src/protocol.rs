//! Line-delimited JSON evaluation protocol between the simulator and an
//! external policy process.
//!
//! Server to client: `obs` (paths to the rendered depth and segmentation
//! blobs), `result` at the end of each episode, `error` on a protocol
//! violation and `done` after the last episode. Client to server: `action`
//! with grid coordinates `(u, v)` and an orientation class `0..=2`.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::HeatmapConfig;
use crate::heatmap::{decode_heatmap, encode_heatmap, snap_pick, snap_place, Decoded, HeatmapError, HeatmapKind, GRID};
use crate::io::{f32_le_bytes, write_tensor, Meta, TensorSidecar, TENSOR_SCHEMA_VERSION};
use crate::render::{render, Camera, Phase, RenderError};
use crate::shapes::{Category, Variant};
use crate::world::{Orientation, WorldState};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("session already finished")]
    Finished,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMsg {
    Obs { episode: usize, step: usize, phase: Phase, depth_path: String, seg_path: String },
    Result { episode: usize, success: bool, steps: usize },
    Error { message: String },
    Done { episodes: usize, successes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClientMsg {
    Action { u: f64, v: f64, orientation: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub success: bool,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub results: Vec<EpisodeResult>,
    pub meta: Meta,
}

/// Episode loop driven one client message at a time. Each pick-place
/// attempt costs one step whether or not it snaps to a valid action.
pub struct EvalSession {
    category: Category,
    camera: Camera,
    max_steps: usize,
    episodes: usize,
    seed: u64,
    out_dir: PathBuf,
    meta: Meta,
    episode: usize,
    steps: usize,
    phase: Phase,
    held: Option<u32>,
    state: WorldState,
    results: Vec<EpisodeResult>,
}

fn episode_state(category: &Category, seed: u64, episode: usize) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(episode as u64));
    let instances = category.instances();
    let inst = instances.choose(&mut rng).expect("categories are non-empty");
    WorldState::scatter(std::sync::Arc::new(category.workspace()), &inst.piece_set(), 0, &mut rng)
        .expect("an empty table fits every instance")
}

impl EvalSession {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        category: Category,
        camera: Camera,
        episodes: usize,
        max_steps: usize,
        seed: u64,
        out_dir: &Path,
        meta: Meta,
    ) -> Result<Self, ProtocolError> {
        std::fs::create_dir_all(out_dir)?;
        let state = episode_state(&category, seed, 0);
        Ok(EvalSession {
            category,
            camera,
            max_steps,
            episodes,
            seed,
            out_dir: out_dir.to_path_buf(),
            meta,
            episode: 0,
            steps: 0,
            phase: Phase::Pick,
            held: None,
            state,
            results: Vec::new(),
        })
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn held(&self) -> Option<u32> {
        self.held
    }

    pub fn category(&self) -> &Category {
        &self.category
    }

    pub fn is_finished(&self) -> bool {
        self.episode >= self.episodes
    }

    pub fn results(&self) -> &[EpisodeResult] {
        &self.results
    }

    /// Render the current observation to disk and describe it.
    pub fn observe(&self) -> Result<ServerMsg, ProtocolError> {
        if self.is_finished() {
            return Err(ProtocolError::Finished);
        }
        let obs = render(&self.state, self.phase, self.held, &self.camera)?;
        let phase = match self.phase {
            Phase::Pick => "pick",
            Phase::Place => "place",
        };
        let stem = format!("ep{:04}_s{:03}_{phase}", self.episode, self.steps);
        let depth = self.out_dir.join(format!("{stem}_depth.f32"));
        let seg = self.out_dir.join(format!("{stem}_seg.u8"));
        let side = |dtype: &str| TensorSidecar {
            schema_version: TENSOR_SCHEMA_VERSION,
            shape: vec![obs.height, obs.width],
            dtype: dtype.into(),
            camera: Some(serde_json::to_value(&self.camera).expect("camera serializes")),
            meta: self.meta.clone(),
        };
        write_tensor(&depth, &f32_le_bytes(&obs.depth), &side("float32"))?;
        write_tensor(&seg, &obs.segmentation, &side("uint8"))?;
        Ok(ServerMsg::Obs {
            episode: self.episode,
            step: self.steps,
            phase: self.phase,
            depth_path: depth.to_string_lossy().into_owned(),
            seg_path: seg.to_string_lossy().into_owned(),
        })
    }

    fn end_episode(&mut self, success: bool, out: &mut Vec<ServerMsg>) -> Result<(), ProtocolError> {
        let r = EpisodeResult { episode: self.episode, success, steps: self.steps };
        out.push(ServerMsg::Result { episode: r.episode, success, steps: r.steps });
        self.results.push(r);
        self.episode += 1;
        self.steps = 0;
        self.phase = Phase::Pick;
        self.held = None;
        if self.is_finished() {
            let successes = self.results.iter().filter(|r| r.success).count();
            out.push(ServerMsg::Done { episodes: self.episodes, successes });
        } else {
            self.state = episode_state(&self.category, self.seed, self.episode);
            out.push(self.observe()?);
        }
        Ok(())
    }

    /// Handle one raw client line. Malformed messages abort the current
    /// episode as a failure.
    pub fn handle_line(&mut self, line: &str) -> Result<Vec<ServerMsg>, ProtocolError> {
        if self.is_finished() {
            return Err(ProtocolError::Finished);
        }
        match serde_json::from_str::<ClientMsg>(line) {
            Ok(ClientMsg::Action { u, v, orientation }) => match Orientation::from_index(orientation) {
                Some(o) => self.act(u, v, o),
                None => self.violation(format!("orientation {orientation} out of range")),
            },
            Err(e) => self.violation(format!("invalid message: {e}")),
        }
    }

    fn violation(&mut self, message: String) -> Result<Vec<ServerMsg>, ProtocolError> {
        let mut out = vec![ServerMsg::Error { message }];
        self.end_episode(false, &mut out)?;
        Ok(out)
    }

    /// Apply an action for the current phase.
    pub fn act(&mut self, u: f64, v: f64, orientation: Orientation) -> Result<Vec<ServerMsg>, ProtocolError> {
        if self.is_finished() {
            return Err(ProtocolError::Finished);
        }
        let clamp = |x: f64| if x.is_finite() { x.round().clamp(0.0, (GRID - 1) as f64) as usize } else { 0 };
        let d = Decoded { u: clamp(u), v: clamp(v), orientation, score: 1.0 };
        let mut out = Vec::new();
        match self.phase {
            Phase::Pick => match snap_pick(&self.state, &d) {
                Ok(id) => {
                    self.held = Some(id);
                    self.phase = Phase::Place;
                }
                Err(_) => self.steps += 1,
            },
            Phase::Place => {
                let id = self.held.take().expect("place phase holds a primitive");
                self.phase = Phase::Pick;
                self.steps += 1;
                if let Ok(a) = snap_place(&self.state, id, &d) {
                    if let Ok(next) = self.state.apply_action(&a) {
                        self.state = next;
                    }
                }
            }
        }
        if self.phase == Phase::Pick {
            if self.category.classify(&self.state, Variant::Success) {
                self.end_episode(true, &mut out)?;
                return Ok(out);
            }
            if self.steps >= self.max_steps {
                self.end_episode(false, &mut out)?;
                return Ok(out);
            }
        }
        out.push(self.observe()?);
        Ok(out)
    }

    pub fn summary(&self) -> EvalSummary {
        let n = self.results.len();
        let successes = self.results.iter().filter(|r| r.success).count();
        let mean_steps = if n == 0 { 0.0 } else { self.results.iter().map(|r| r.steps as f64).sum::<f64>() / n as f64 };
        EvalSummary {
            episodes: n,
            successes,
            success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
            mean_steps,
            results: self.results.clone(),
            meta: self.meta.clone(),
        }
    }
}

fn send<W: Write>(w: &mut W, msg: &ServerMsg) -> std::io::Result<()> {
    writeln!(w, "{}", serde_json::to_string(msg).expect("message serializes"))?;
    w.flush()
}

/// Run a session over a reader/writer pair until every episode ends or the
/// client closes its side, which fails the remaining episodes.
pub fn serve<R: BufRead, W: Write>(session: &mut EvalSession, reader: R, mut writer: W) -> Result<EvalSummary, ProtocolError> {
    if !session.is_finished() {
        send(&mut writer, &session.observe()?)?;
    }
    let mut lines = reader.lines();
    while !session.is_finished() {
        let msgs = match lines.next() {
            Some(line) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                session.handle_line(&line)?
            }
            None => {
                let mut out = Vec::new();
                while !session.is_finished() {
                    out.clear();
                    session.end_episode(false, &mut out)?;
                }
                out
            }
        };
        for m in &msgs {
            send(&mut writer, m)?;
        }
    }
    Ok(session.summary())
}

/// Action from ground-truth heatmaps of the goal-directed actions, decoded
/// exactly as a learned policy's output would be.
pub fn oracle_action(session: &EvalSession, cfg: &HeatmapConfig) -> ClientMsg {
    let state = session.state();
    let mut acts = session.category().goal_actions(state);
    let kind = match session.phase() {
        Phase::Pick => HeatmapKind::Pick,
        Phase::Place => {
            let held = session.held();
            acts.retain(|a| Some(a.pick_id) == held);
            HeatmapKind::Place
        }
    };
    let top = encode_heatmap(&acts, kind, state, cfg.sigma).ok().and_then(|hm| decode_heatmap(&hm, 1, cfg).into_iter().next());
    match top {
        Some(d) => ClientMsg::Action { u: d.u as f64, v: d.v as f64, orientation: d.orientation.index() },
        None => ClientMsg::Action { u: 0.0, v: 0.0, orientation: 0 },
    }
}

/// Drive a session with the oracle client through the JSON message path.
pub fn run_oracle(session: &mut EvalSession, cfg: &HeatmapConfig) -> Result<EvalSummary, ProtocolError> {
    while !session.is_finished() {
        let line = serde_json::to_string(&oracle_action(session, cfg)).expect("message serializes");
        session.handle_line(&line)?;
    }
    Ok(session.summary())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CameraConfig;

    fn small_camera() -> Camera {
        Camera::from_config(&CameraConfig { width: 32, height: 32, ..CameraConfig::default() })
    }

    #[test]
    fn oracle_builds_a_tower() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = EvalSession::new(Category::tower(3).unwrap(), small_camera(), 2, 10, 1, dir.path(), Meta::new("x", 1)).unwrap();
        let sum = run_oracle(&mut s, &HeatmapConfig::default()).unwrap();
        assert_eq!(sum.successes, 2);
        assert_eq!(sum.mean_steps, 3.0);
    }

    #[test]
    fn malformed_message_fails_the_episode() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = EvalSession::new(Category::tower(2).unwrap(), small_camera(), 1, 10, 1, dir.path(), Meta::new("x", 1)).unwrap();
        let out = s.handle_line("{\"type\":\"obs\"}").unwrap();
        assert!(matches!(out[0], ServerMsg::Error { .. }));
        assert!(matches!(out[1], ServerMsg::Result { success: false, .. }));
        assert!(s.is_finished());
    }
}
