//! Deterministic synthetic street scenes.
//!
//! A horizontal road band separates two sidewalks. Pedestrians that intend
//! to cross walk toward the band (preferring a crosswalk); the others walk
//! along the sidewalk or stand. Vehicles drive in two lanes inside the band.
//! Every sequence is a pure function of `(WorldConfig, seed)`.

mod dataset;
mod render;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    dataset_build, planned_stats, read_annotations, AnnotationFile, IntentCounts, read_frames, write_frames, Dataset, DatasetConfig, Manifest, SequenceEntry,
    SplitStats, FRAMES_MAGIC,
};
pub use render::render_frame;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::grid::{GtObject, INTENT_CROSS, INTENT_NOT_CROSS};
use crate::tensor::Tensor;

pub const N_CLASSES: usize = 4;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Pedestrian,
    Crosswalk,
    Vehicle,
    TrafficLight,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; N_CLASSES] = [
        ObjectClass::Pedestrian,
        ObjectClass::Crosswalk,
        ObjectClass::Vehicle,
        ObjectClass::TrafficLight,
    ];

    pub fn index(self) -> usize {
        match self {
            ObjectClass::Pedestrian => 0,
            ObjectClass::Crosswalk => 1,
            ObjectClass::Vehicle => 2,
            ObjectClass::TrafficLight => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Crosswalk => "crosswalk",
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::TrafficLight => "traffic_light",
        }
    }
}

pub const PEDESTRIAN: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    Cross,
    NotCross,
    NotApplicable,
}

impl Intent {
    /// Intent class index for pedestrians.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Intent::Cross => Some(INTENT_CROSS),
            Intent::NotCross => Some(INTENT_NOT_CROSS),
            Intent::NotApplicable => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// `(y_top, y_bottom)` of the road in pixels.
    pub road_band: (f64, f64),
    pub n_pedestrians: usize,
    pub n_vehicles: usize,
    pub n_crosswalks: usize,
    pub has_traffic_light: bool,
    pub crosser_fraction: f64,
    pub seq_len: usize,
    pub seed: u64,
}

impl WorldConfig {
    /// 192x320 scenes, 8 frames.
    pub fn desk() -> Self {
        WorldConfig {
            image_height: 192,
            image_width: 320,
            road_band: (80.0, 128.0),
            n_pedestrians: 2,
            n_vehicles: 2,
            n_crosswalks: 1,
            has_traffic_light: true,
            crosser_fraction: 0.5,
            seq_len: 8,
            seed: 0,
        }
    }

    /// 352x640 scenes, 15 frames.
    pub fn paper_shape() -> Self {
        WorldConfig {
            image_height: 352,
            image_width: 640,
            road_band: (147.0, 235.0),
            n_pedestrians: 2,
            n_vehicles: 2,
            n_crosswalks: 1,
            has_traffic_light: true,
            crosser_fraction: 0.5,
            seq_len: 15,
            seed: 0,
        }
    }

    /// Size multiplier relative to the 192-pixel desk scene.
    pub fn scale(&self) -> f64 {
        self.image_height as f64 / 192.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height < 32 || self.image_width < 32 {
            return Err(Error::config("image_height", "image must be at least 32x32"));
        }
        let (top, bottom) = self.road_band;
        if !(top >= 0.0 && top < bottom && bottom <= self.image_height as f64) {
            return Err(Error::config(
                "road_band",
                format!("({top}, {bottom}) not within [0, {}]", self.image_height),
            ));
        }
        let s = self.scale();
        if top < 40.0 * s || (self.image_height as f64 - bottom) < 40.0 * s {
            return Err(Error::config("road_band", "each sidewalk needs at least 40 px (scaled)"));
        }
        if !(0.0..=1.0).contains(&self.crosser_fraction) {
            return Err(Error::config("crosser_fraction", "must lie in [0, 1]"));
        }
        if self.seq_len < 2 {
            return Err(Error::config("seq_len", "need at least 2 frames"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub track_id: u32,
    pub class: ObjectClass,
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub velocity: (f64, f64),
    pub intent: Intent,
    /// Unit vector for pedestrians, zero otherwise.
    pub heading: (f64, f64),
}

impl AgentState {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.center.0, self.center.1, self.size.0, self.size.1)
    }

    pub fn to_gt(&self) -> GtObject {
        GtObject {
            bbox: self.bbox(),
            class: self.class.index(),
            intent: self.intent.class_index(),
        }
    }

    /// Agent advanced by `frames` steps of constant velocity.
    pub fn advanced(&self, frames: usize) -> AgentState {
        let f = frames as f64;
        AgentState {
            center: (self.center.0 + f * self.velocity.0, self.center.1 + f * self.velocity.1),
            ..*self
        }
    }
}

/// Everything the renderer needs for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub image_height: usize,
    pub image_width: usize,
    pub road_band: (f64, f64),
    pub agents: Vec<AgentState>,
    /// `Some(true)` when the light shows red.
    pub light_red: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    /// `[3, H, W]` images with values in `[0, 1]`.
    pub frames: Vec<Tensor<f32>>,
    /// Clipped, per-frame agent snapshots.
    pub annotations: Vec<Vec<AgentState>>,
    pub seed: u64,
    pub light_red: Option<bool>,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn final_annotations(&self) -> &[AgentState] {
        self.annotations.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn final_objects(&self) -> Vec<GtObject> {
        self.final_annotations().iter().map(AgentState::to_gt).collect()
    }

    pub fn pedestrian_tracks(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .annotations
            .iter()
            .flatten()
            .filter(|a| a.class == ObjectClass::Pedestrian)
            .map(|a| a.track_id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Box of `track_id` in each frame, `None` where the track is out of view.
    pub fn track_boxes(&self, track_id: u32) -> Vec<Option<BBox>> {
        self.annotations
            .iter()
            .map(|frame| frame.iter().find(|a| a.track_id == track_id).map(AgentState::bbox))
            .collect()
    }

    /// Left-right mirror image of the whole sequence. Crossing stays
    /// crossing: the road runs horizontally.
    pub fn flipped(&self) -> SceneSequence {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let (c, h, w) = (f.dim(0), f.dim(1), f.dim(2));
                let src = f.data();
                let mut out = Vec::with_capacity(src.len());
                for row in 0..c * h {
                    out.extend(src[row * w..(row + 1) * w].iter().rev());
                }
                Tensor::from_vec(&[c, h, w], out).expect("same shape")
            })
            .collect();
        let width = self.frames.first().map_or(0.0, |f| f.dim(2) as f64);
        let annotations = self
            .annotations
            .iter()
            .map(|frame| {
                frame
                    .iter()
                    .map(|a| AgentState {
                        center: (width - a.center.0, a.center.1),
                        velocity: (-a.velocity.0, a.velocity.1),
                        heading: (-a.heading.0, a.heading.1),
                        ..*a
                    })
                    .collect()
            })
            .collect();
        SceneSequence {
            frames,
            annotations,
            seed: self.seed,
            light_red: self.light_red,
        }
    }
}

/// Uniform sample from `[lo, hi)`, `lo` when the range is empty.
fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Pedestrian box size at vertical position `cy` (closer is larger).
pub fn pedestrian_size(cfg: &WorldConfig, cy: f64) -> (f64, f64) {
    let s = cfg.scale();
    let h = s * (24.0 + 16.0 * (cy / cfg.image_height as f64).clamp(0.0, 1.0));
    (0.4 * h, h)
}

/// Initial states of all agents at frame 0 (unclipped).
pub fn spawn_agents(cfg: &WorldConfig, n_crossers: usize, rng: &mut ChaCha8Rng) -> (Vec<AgentState>, Option<bool>) {
    let s = cfg.scale();
    let (iw, ih) = (cfg.image_width as f64, cfg.image_height as f64);
    let (top, bottom) = cfg.road_band;
    let band_h = bottom - top;
    let span = (cfg.seq_len.saturating_sub(1)) as f64;
    let mut agents = Vec::new();
    let mut next_id = 0u32;
    let mut id = || {
        next_id += 1;
        next_id
    };

    // crosswalks, spaced so they do not overlap
    let cw_w = 40.0 * s;
    let mut crosswalk_x: Vec<f64> = Vec::new();
    for _ in 0..cfg.n_crosswalks {
        for _ in 0..50 {
            let x = uniform(rng, cw_w, iw - cw_w);
            if crosswalk_x.iter().all(|&o| (o - x).abs() > 2.0 * cw_w) {
                crosswalk_x.push(x);
                break;
            }
        }
    }
    for &x in &crosswalk_x {
        agents.push(AgentState {
            track_id: id(),
            class: ObjectClass::Crosswalk,
            center: (x, 0.5 * (top + bottom)),
            size: (cw_w, band_h),
            velocity: (0.0, 0.0),
            intent: Intent::NotApplicable,
            heading: (0.0, 0.0),
        });
    }

    let light_red = if cfg.has_traffic_light {
        let x = uniform(rng, 20.0 * s, iw - 20.0 * s);
        agents.push(AgentState {
            track_id: id(),
            class: ObjectClass::TrafficLight,
            center: (x, top - 16.0 * s),
            size: (10.0 * s, 24.0 * s),
            velocity: (0.0, 0.0),
            intent: Intent::NotApplicable,
            heading: (0.0, 0.0),
        });
        Some(rng.random_bool(0.5))
    } else {
        None
    };

    for v in 0..cfg.n_vehicles {
        let upper = v % 2 == 0;
        let w = uniform(rng, 48.0, 64.0) * s;
        let h = uniform(rng, 20.0, 26.0) * s;
        let speed = uniform(rng, 3.0, 8.0) * s;
        let vx = if upper { speed } else { -speed };
        let cy = if upper { top + 0.5 * h + 1.0 } else { bottom - 0.5 * h - 1.0 };
        // keep the vehicle at least half visible at both ends of the sequence
        let (lo, hi) = if upper {
            (0.0, iw - vx * span)
        } else {
            (-vx * span, iw)
        };
        let cx = uniform(rng, lo, hi.max(lo + 1.0));
        agents.push(AgentState {
            track_id: id(),
            class: ObjectClass::Vehicle,
            center: (cx, cy),
            size: (w, h),
            velocity: (vx, 0.0),
            intent: Intent::NotApplicable,
            heading: (0.0, 0.0),
        });
    }

    let mut roles: Vec<bool> = (0..cfg.n_pedestrians).map(|p| p < n_crossers).collect();
    roles.shuffle(rng);
    let mut placed: Vec<(f64, f64)> = Vec::new();
    for crosser in roles {
        let mut agent = None;
        for _attempt in 0..60 {
            let above = rng.random_bool(0.5);
            let toward = if above { 1.0 } else { -1.0 };
            let (cx, cy, vel) = if crosser {
                let speed = uniform(rng, 2.0, 5.0) * s;
                let cx = if !crosswalk_x.is_empty() && rng.random_bool(0.7) {
                    let cw = crosswalk_x[rng.random_range(0..crosswalk_x.len())];
                    cw + uniform(rng, -0.4 * cw_w, 0.4 * cw_w)
                } else {
                    uniform(rng, 12.0 * s, iw - 12.0 * s)
                };
                // start between 2 and 30 px (scaled) from the curb
                let gap = uniform(rng, 2.0, 30.0) * s;
                let (_, h0) = pedestrian_size(cfg, if above { top } else { bottom });
                let cy = if above { top - gap - 0.5 * h0 } else { bottom + gap + 0.5 * h0 };
                let lateral = uniform(rng, -0.25, 0.25) * speed;
                (cx, cy, (lateral, toward * speed))
            } else {
                let (lo, hi) = if above {
                    (24.0 * s, top - 18.0 * s)
                } else {
                    (bottom + 24.0 * s, ih - 22.0 * s)
                };
                let cy = uniform(rng, lo, hi);
                let walking = rng.random_bool(0.5);
                let vx = if walking {
                    let speed = uniform(rng, 2.0, 5.0) * s;
                    if rng.random_bool(0.5) {
                        speed
                    } else {
                        -speed
                    }
                } else {
                    0.0
                };
                let margin = 8.0 * s;
                let (lo_x, hi_x) = if vx >= 0.0 {
                    (margin, iw - margin - vx * span)
                } else {
                    (margin - vx * span, iw - margin)
                };
                (uniform(rng, lo_x, hi_x), cy, (vx, 0.0))
            };
            if placed.iter().all(|&(px, py)| ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() > 22.0 * s) {
                let speed = (vel.0 * vel.0 + vel.1 * vel.1).sqrt();
                let heading = if speed > 0.0 {
                    (vel.0 / speed, vel.1 / speed)
                } else {
                    // standing: faces along the sidewalk or away from the road
                    match rng.random_range(0..3) {
                        0 => (1.0, 0.0),
                        1 => (-1.0, 0.0),
                        _ => (0.0, -toward),
                    }
                };
                placed.push((cx, cy));
                agent = Some(AgentState {
                    track_id: 0,
                    class: ObjectClass::Pedestrian,
                    center: (cx, cy),
                    size: pedestrian_size(cfg, cy),
                    velocity: vel,
                    intent: if crosser { Intent::Cross } else { Intent::NotCross },
                    heading,
                });
                break;
            }
        }
        if let Some(mut a) = agent {
            a.track_id = id();
            agents.push(a);
        }
    }
    (agents, light_red)
}

/// Clipped snapshot of one frame; agents fully outside the image are dropped.
pub fn snapshot(cfg: &WorldConfig, agents: &[AgentState], frame: usize) -> Vec<AgentState> {
    let (iw, ih) = (cfg.image_width as f64, cfg.image_height as f64);
    agents
        .iter()
        .filter_map(|a| {
            let moved = a.advanced(frame);
            let clipped = moved.bbox().clip(iw, ih)?;
            Some(AgentState {
                center: (clipped.cx, clipped.cy),
                size: (clipped.w, clipped.h),
                ..moved
            })
        })
        .collect()
}

/// Generates a sequence with stochastically rounded crosser count.
pub fn generate_sequence(config: &WorldConfig, seed: u64) -> Result<SceneSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_c2055);
    let exact = config.crosser_fraction * config.n_pedestrians as f64;
    let mut n = exact.floor() as usize;
    if rng.random::<f64>() < exact - exact.floor() {
        n += 1;
    }
    generate_with_crossers(config, seed, n.min(config.n_pedestrians))
}

/// Generates a sequence with exactly `n_crossers` crossing pedestrians.
pub fn generate_with_crossers(config: &WorldConfig, seed: u64, n_crossers: usize) -> Result<SceneSequence> {
    config.validate()?;
    if n_crossers > config.n_pedestrians {
        return Err(Error::config("n_crossers", "more crossers than pedestrians"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (agents, light_red) = spawn_agents(config, n_crossers, &mut rng);
    Ok(simulate(config, &agents, light_red, seed))
}

/// Rolls agents forward and renders every frame.
pub fn simulate(config: &WorldConfig, agents: &[AgentState], light_red: Option<bool>, seed: u64) -> SceneSequence {
    let mut frames = Vec::with_capacity(config.seq_len);
    let mut annotations = Vec::with_capacity(config.seq_len);
    for f in 0..config.seq_len {
        let state = WorldState {
            image_height: config.image_height,
            image_width: config.image_width,
            road_band: config.road_band,
            agents: agents.iter().map(|a| a.advanced(f)).collect(),
            light_red,
        };
        frames.push(render_frame(&state));
        annotations.push(snapshot(config, agents, f));
    }
    SceneSequence {
        frames,
        annotations,
        seed,
        light_red,
    }
}

/// Net displacement toward the road band over the whole sequence.
pub fn displacement_toward_road(config: &WorldConfig, agent: &AgentState) -> f64 {
    let mid = 0.5 * (config.road_band.0 + config.road_band.1);
    let span = (config.seq_len - 1) as f64;
    let dy = agent.velocity.1 * span;
    if agent.center.1 < mid {
        dy
    } else {
        -dy
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_identical() {
        let cfg = WorldConfig::desk();
        let a = generate_sequence(&cfg, 42).unwrap();
        let b = generate_sequence(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_sequence(&cfg, 43).unwrap();
        assert_ne!(a.annotations, c.annotations);
    }

    #[test]
    fn pedestrian_count_is_conserved() {
        let mut cfg = WorldConfig::desk();
        cfg.n_pedestrians = 3;
        for seed in 0..20 {
            let seq = generate_sequence(&cfg, seed).unwrap();
            for frame in &seq.annotations {
                let peds = frame.iter().filter(|a| a.class == ObjectClass::Pedestrian).count();
                assert_eq!(peds, 3, "seed {seed}");
            }
        }
    }

    #[test]
    fn crosser_enters_the_band_in_eight_frames() {
        let cfg = WorldConfig::desk();
        let start = cfg.road_band.1 + 40.0;
        let agent = AgentState {
            track_id: 1,
            class: ObjectClass::Pedestrian,
            center: (100.0, start),
            size: pedestrian_size(&cfg, start),
            velocity: (0.0, -5.0),
            intent: Intent::Cross,
            heading: (0.0, -1.0),
        };
        let seq = simulate(&WorldConfig { seq_len: 9, ..cfg.clone() }, &[agent], None, 0);
        let y8 = seq.annotations[8][0].center.1;
        let y0 = seq.annotations[0][0].center.1;
        // centers of clipped boxes equal the true centers while fully visible
        assert!((y0 - y8 - 40.0).abs() < 1e-9);
        assert!(y8 <= cfg.road_band.1);
    }

    #[test]
    fn invalid_config_names_the_field() {
        let mut cfg = WorldConfig::desk();
        cfg.crosser_fraction = 1.5;
        match generate_sequence(&cfg, 0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "crosser_fraction"),
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg = WorldConfig::desk();
        cfg.road_band = (150.0, 100.0);
        assert!(matches!(generate_sequence(&cfg, 0), Err(Error::Config { field, .. }) if field == "road_band"));
        let mut cfg = WorldConfig::desk();
        cfg.seq_len = 1;
        assert!(matches!(generate_sequence(&cfg, 0), Err(Error::Config { field, .. }) if field == "seq_len"));
    }

    #[test]
    fn static_agents_have_zero_velocity_and_no_intent() {
        let cfg = WorldConfig::desk();
        for seed in 0..10 {
            let seq = generate_sequence(&cfg, seed).unwrap();
            for a in seq.annotations.iter().flatten() {
                assert_eq!(a.intent == Intent::NotApplicable, a.class != ObjectClass::Pedestrian);
                if matches!(a.class, ObjectClass::Crosswalk | ObjectClass::TrafficLight) {
                    assert_eq!(a.velocity, (0.0, 0.0));
                }
                assert!(a.size.0 > 0.0 && a.size.1 > 0.0);
            }
        }
    }

    #[test]
    fn flip_mirrors_pixels_and_boxes() {
        let seq = generate_with_crossers(&WorldConfig::desk(), 11, 1).unwrap();
        let f = seq.flipped();
        let back = f.flipped();
        assert_eq!(back.frames, seq.frames);
        for (x, y) in back.annotations.iter().flatten().zip(seq.annotations.iter().flatten()) {
            assert!((x.center.0 - y.center.0).abs() < 1e-9);
            assert_eq!((x.velocity, x.heading, x.track_id), (y.velocity, y.heading, y.track_id));
        }
        let (a, b) = (&seq.frames[3], &f.frames[3]);
        let w = a.dim(2);
        for (y, x) in [(0, 0), (50, 17), (191, 319)] {
            assert_eq!(a.data()[y * w + x], b.data()[y * w + (w - 1 - x)]);
        }
        for (o, m) in seq.final_annotations().iter().zip(f.final_annotations()) {
            assert!((o.bbox().x0() - (w as f64 - m.bbox().x1())).abs() < 1e-9);
            assert_eq!(o.intent, m.intent);
        }
    }
}
