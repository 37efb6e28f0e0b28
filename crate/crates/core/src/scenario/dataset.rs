//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/<seq_id>/frames.bin        "GSQ1", t, C, H, W (u32 LE), f32 LE pixels
//! <root>/<split>/<seq_id>/annotations.json
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_with_crossers, AgentState, Intent, ObjectClass, SceneSequence, WorldConfig};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::tensor::Tensor;

pub const FRAMES_MAGIC: &[u8; 4] = b"GSQ1";
pub const MANIFEST_VERSION: u32 = 1;

/// Per-sequence pedestrian counts repeated in shuffled blocks; the block
/// averages 53 / 25 = 2.12 pedestrians.
pub const PIE_PEDESTRIAN_PATTERN: [usize; 25] = [
    1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3, 4, 4, 4,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub world: WorldConfig,
    pub n_train: usize,
    pub n_test: usize,
    /// Pedestrians per sequence, cycled in shuffled blocks. Empty means
    /// `world.n_pedestrians` for every sequence.
    pub pedestrian_pattern: Vec<usize>,
}

impl DatasetConfig {
    pub fn desk() -> Self {
        DatasetConfig {
            world: WorldConfig::desk(),
            n_train: 200,
            n_test: 50,
            pedestrian_pattern: PIE_PEDESTRIAN_PATTERN.to_vec(),
        }
    }

    /// Same split sizes and pedestrian pattern on 352x640, 15-frame scenes.
    pub fn paper_shape() -> Self {
        DatasetConfig {
            world: WorldConfig::paper_shape(),
            ..Self::desk()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub seed: u64,
    pub n_pedestrians: usize,
    pub n_crossers: usize,
    /// Directory relative to the dataset root.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SplitStats {
    pub sequences: usize,
    pub pedestrians: usize,
    pub crossers: usize,
    pub crosser_fraction: f64,
    pub mean_pedestrians_per_frame: f64,
    /// Annotation counts over all frames, indexed like `ObjectClass::ALL`.
    pub class_counts: Vec<usize>,
    pub intent_counts: IntentCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct IntentCounts {
    pub cross: usize,
    pub not_cross: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub world: WorldConfig,
    pub pedestrian_pattern: Vec<usize>,
    pub train: Vec<SequenceEntry>,
    pub test: Vec<SequenceEntry>,
    pub stats_train: SplitStats,
    pub stats_test: SplitStats,
    /// Output grid of the model the data was generated for, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
}

impl Manifest {
    /// Writes `<dir>/manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serialise");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 40,
        }
    }
}

fn plan_split(cfg: &DatasetConfig, split: Split, n: usize) -> Vec<SequenceEntry> {
    let base = cfg.world.seed;
    let mut counts = Vec::with_capacity(n);
    if cfg.pedestrian_pattern.is_empty() {
        counts.resize(n, cfg.world.n_pedestrians);
    } else {
        let mut block = 0u64;
        while counts.len() < n {
            let mut pattern = cfg.pedestrian_pattern.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(base ^ split.offset() ^ (block << 20) ^ 0xb10c);
            pattern.shuffle(&mut rng);
            counts.extend(pattern);
            block += 1;
        }
        counts.truncate(n);
    }
    // error diffusion keeps the split's crosser fraction on target
    let frac = cfg.world.crosser_fraction;
    let mut cum_peds = 0usize;
    let mut cum_cross = 0usize;
    counts
        .into_iter()
        .enumerate()
        .map(|(idx, n_ped)| {
            cum_peds += n_ped;
            let target = (frac * cum_peds as f64).round() as usize;
            let n_cross = target.saturating_sub(cum_cross).min(n_ped);
            cum_cross += n_cross;
            let id = format!("{}_{:04}", split.name(), idx);
            SequenceEntry {
                path: format!("{}/{}", split.name(), id),
                id,
                seed: base
                    .wrapping_mul(1_000_003)
                    .wrapping_add(split.offset())
                    .wrapping_add(idx as u64),
                n_pedestrians: n_ped,
                n_crossers: n_cross,
            }
        })
        .collect()
}

/// A planned dataset. Sequences are generated on demand from their seeds,
/// or read from disk when a root directory is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: WorldConfig,
    pub train: Vec<SequenceEntry>,
    pub test: Vec<SequenceEntry>,
    pub root: Option<PathBuf>,
}

impl Dataset {
    pub fn plan(cfg: &DatasetConfig) -> Result<Self> {
        cfg.world.validate()?;
        Ok(Dataset {
            world: cfg.world.clone(),
            train: plan_split(cfg, Split::Train, cfg.n_train),
            test: plan_split(cfg, Split::Test, cfg.n_test),
            root: None,
        })
    }

    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.world.validate()?;
        Ok(Dataset {
            world: m.world,
            train: m.train,
            test: m.test,
            root: path.parent().map(Path::to_path_buf),
        })
    }

    pub fn world_for(&self, entry: &SequenceEntry) -> WorldConfig {
        WorldConfig {
            n_pedestrians: entry.n_pedestrians,
            seed: entry.seed,
            ..self.world.clone()
        }
    }

    pub fn generate(&self, entry: &SequenceEntry) -> Result<SceneSequence> {
        generate_with_crossers(&self.world_for(entry), entry.seed, entry.n_crossers)
    }

    /// Reads the sequence from disk when attached to a root, else regenerates it.
    pub fn load(&self, entry: &SequenceEntry) -> Result<SceneSequence> {
        match &self.root {
            Some(root) => {
                let dir = root.join(&entry.path);
                let frames = read_frames(&dir.join("frames.bin"))?;
                let ann = read_annotations(&dir.join("annotations.json"))?;
                if frames.len() != ann.frames.len() {
                    return Err(Error::format(dir, "frame and annotation counts differ"));
                }
                Ok(SceneSequence {
                    frames,
                    annotations: ann.frames,
                    seed: ann.seed,
                    light_red: ann.light_red,
                })
            }
            None => self.generate(entry),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub seq_id: String,
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub light_red: Option<bool>,
    /// One list of clipped agent snapshots per frame.
    pub frames: Vec<Vec<AgentState>>,
}

pub fn write_frames(path: &Path, frames: &[Tensor<f32>]) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Input("cannot write an empty frame list".into()))?;
    let [c, h, w] = [first.dim(0), first.dim(1), first.dim(2)];
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header = Vec::with_capacity(20);
    header.extend_from_slice(FRAMES_MAGIC);
    for v in [frames.len(), c, h, w] {
        header.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut body = Vec::with_capacity(frames.len() * c * h * w * 4);
    for f in frames {
        for v in f.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&header)
        .and_then(|_| out.write_all(&body))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: &Path) -> Result<Vec<Tensor<f32>>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != FRAMES_MAGIC {
        return Err(Error::format(path, "missing GSQ1 header"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, c, h, w) = (u(0), u(1), u(2), u(3));
    let per = c * h * w;
    if bytes.len() != 20 + 4 * t * per {
        return Err(Error::format(path, format!("expected {} pixel bytes", 4 * t * per)));
    }
    Ok((0..t)
        .map(|f| {
            let start = 20 + 4 * f * per;
            let data = bytes[start..start + 4 * per]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Tensor::from_vec(&[c, h, w], data).unwrap()
        })
        .collect())
}

pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn split_stats(seqs: &[(SequenceEntry, Vec<Vec<AgentState>>)]) -> SplitStats {
    let mut stats = SplitStats {
        sequences: seqs.len(),
        class_counts: vec![0; ObjectClass::ALL.len()],
        ..Default::default()
    };
    let mut frames = 0usize;
    let mut ped_instances = 0usize;
    for (_, ann) in seqs {
        let mut tracks = std::collections::BTreeMap::new();
        for frame in ann {
            frames += 1;
            for a in frame {
                stats.class_counts[a.class.index()] += 1;
                if a.class == ObjectClass::Pedestrian {
                    ped_instances += 1;
                    tracks.insert(a.track_id, a.intent);
                }
            }
        }
        for intent in tracks.values() {
            stats.pedestrians += 1;
            match intent {
                Intent::Cross => stats.intent_counts.cross += 1,
                _ => stats.intent_counts.not_cross += 1,
            }
        }
    }
    stats.crossers = stats.intent_counts.cross;
    stats.crosser_fraction = if stats.pedestrians > 0 {
        stats.crossers as f64 / stats.pedestrians as f64
    } else {
        0.0
    };
    stats.mean_pedestrians_per_frame = if frames > 0 {
        ped_instances as f64 / frames as f64
    } else {
        0.0
    };
    stats
}

/// Generates every sequence, writes frames and annotations, and returns the
/// manifest (also written to `<out_dir>/manifest.json`).
pub fn dataset_build(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    let plan = Dataset::plan(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write_split = |entries: &[SequenceEntry]| -> Result<Vec<(SequenceEntry, Vec<Vec<AgentState>>)>> {
        entries
            .par_iter()
            .map(|entry| {
                let seq = plan.generate(entry)?;
                let dir = out_dir.join(&entry.path);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_frames(&dir.join("frames.bin"), &seq.frames)?;
                let ann = AnnotationFile {
                    seq_id: entry.id.clone(),
                    seed: entry.seed,
                    image_height: plan.world.image_height,
                    image_width: plan.world.image_width,
                    light_red: seq.light_red,
                    frames: seq.annotations,
                };
                let path = dir.join("annotations.json");
                let text = serde_json::to_string_pretty(&ann).expect("annotations serialise");
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                Ok((entry.clone(), ann.frames))
            })
            .collect()
    };
    let train = write_split(&plan.train)?;
    let test = write_split(&plan.test)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        world: plan.world.clone(),
        pedestrian_pattern: cfg.pedestrian_pattern.clone(),
        stats_train: split_stats(&train),
        stats_test: split_stats(&test),
        train: plan.train,
        test: plan.test,
        grid: None,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Intent statistics of a planned split computed from regenerated sequences.
pub fn planned_stats(ds: &Dataset, entries: &[SequenceEntry]) -> Result<SplitStats> {
    let seqs: Result<Vec<_>> = entries
        .par_iter()
        .map(|e| Ok((e.clone(), ds.generate(e)?.annotations)))
        .collect();
    Ok(split_stats(&seqs?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::IMAGE_CHANNELS;

    #[test]
    fn pattern_mean_is_pie_average() {
        let sum: usize = PIE_PEDESTRIAN_PATTERN.iter().sum();
        assert_eq!(sum, 53);
        assert!((sum as f64 / 25.0 - 2.12).abs() < 1e-12);
    }

    #[test]
    fn plan_has_distinct_seeds() {
        let cfg = DatasetConfig {
            n_train: 4,
            n_test: 2,
            ..DatasetConfig::desk()
        };
        let ds = Dataset::plan(&cfg).unwrap();
        assert_eq!(ds.train.len(), 4);
        let mut seeds: Vec<u64> = ds.train.iter().chain(&ds.test).map(|e| e.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 6);
    }

    #[test]
    fn frames_round_trip_and_reject_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.bin");
        let frames = vec![Tensor::from_vec(&[IMAGE_CHANNELS, 2, 2], (0..12).map(|v| v as f32 / 12.0).collect()).unwrap(); 3];
        write_frames(&path, &frames).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"GSQ1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 20 + 3 * 12 * 4);
        assert_eq!(read_frames(&path).unwrap(), frames);
        fs::write(&path, b"XXXX0000000000000000").unwrap();
        assert!(matches!(read_frames(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn unwritable_root_is_io_error_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let cfg = DatasetConfig {
            n_train: 1,
            n_test: 0,
            ..DatasetConfig::desk()
        };
        match dataset_build(&cfg, &blocker.join("sub")) {
            Err(Error::Io { path, .. }) => assert!(path.starts_with(&blocker)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
