//! Dataset assembly, per-trajectory seeding and the on-disk container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "BSSMDATA"
//! version    u32
//! task id    u8
//! split id   u8
//! hash       32 bytes SHA-256 of the dataset definition
//! count      u64      trajectories
//! steps      u64      steps per trajectory (frames = steps + 1)
//! d_model    u32
//! channels   d_model × (role u8, name length u8, name bytes)
//! values     count × (steps + 1) × d_model f64, trajectory-major
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChannelRole, TaskConfig, TaskKind, Trajectory};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BSSMDATA";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
    Rollout,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Rollout];

    pub fn id(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
            Split::Rollout => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Rollout => "rollout",
        }
    }

    fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.id() == id)
            .ok_or_else(|| Error::Format(format!("unknown split id {id}")))
    }
}

/// Trajectory counts and step lengths per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub train_count: usize,
    pub test_count: usize,
    pub rollout_count: usize,
    pub train_steps: usize,
    pub test_steps: usize,
    pub rollout_steps: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        Self {
            train_count: 66_000,
            test_count: 5_000,
            rollout_count: 100,
            train_steps: 50,
            test_steps: 50,
            rollout_steps: 250,
        }
    }
}

impl DatasetSizes {
    pub fn desk() -> Self {
        Self {
            train_count: 8_000,
            test_count: 1_000,
            ..Self::default()
        }
    }

    /// Training and test windows sized for context length `l`.
    pub fn with_context(mut self, l: usize) -> Self {
        self.train_steps = l;
        self.test_steps = l;
        self
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Test => self.test_count,
            Split::Rollout => self.rollout_count,
        }
    }

    pub fn steps(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_steps,
            Split::Test => self.test_steps,
            Split::Rollout => self.rollout_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in Split::ALL {
            if self.count(s) < 1 || self.steps(s) < 1 {
                return Err(Error::Config(format!("{} split needs at least one trajectory and step", s.name())));
            }
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trajectory `index` of `split` on its `attempt`-th draw: a
/// splitmix64 chain over the four coordinates, so every trajectory has its
/// own stream and splits never share one.
pub fn sub_seed(master: u64, split: Split, index: u64, attempt: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ u64::from(split.id()));
    h = splitmix64(h ^ index);
    splitmix64(h ^ attempt.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// SHA-256 of the canonical JSON of `value`, as lowercase hex.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn hash_bytes(hex: &str) -> Result<[u8; 32]> {
    if hex.len() != 64 {
        return Err(Error::Format("config hash must be 64 hex digits".into()));
    }
    let mut out = [0u8; 32];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::Format("config hash is not hex".into()))?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: TaskConfig,
    pub sizes: DatasetSizes,
    pub seed: u64,
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub rollout: Vec<Trajectory>,
    /// Rejected draws across all splits.
    pub resamples: usize,
}

impl Dataset {
    pub fn task(&self) -> TaskKind {
        self.config.kind()
    }

    pub fn split(&self, split: Split) -> &[Trajectory] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
            Split::Rollout => &self.rollout,
        }
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(&(&self.config, &self.sizes, self.seed))
    }

    pub fn resample_rate(&self) -> f64 {
        let accepted = self.train.len() + self.test.len() + self.rollout.len();
        self.resamples as f64 / (accepted + self.resamples) as f64
    }
}

/// Generates all three splits deterministically from `seed`.
pub fn build_dataset(config: &TaskConfig, sizes: DatasetSizes, seed: u64) -> Result<Dataset> {
    config.validate()?;
    sizes.validate()?;
    let mut resamples = 0;
    let mut gen_split = |split: Split| -> Result<Vec<Trajectory>> {
        let budget = config.resample_budget();
        (0..sizes.count(split))
            .map(|i| {
                for attempt in 0..budget {
                    let s = sub_seed(seed, split, i as u64, attempt as u64);
                    if let Some(tr) = config.generate_once(sizes.steps(split), s) {
                        return Ok(tr);
                    }
                    resamples += 1;
                }
                Err(Error::ResampleExhausted(budget))
            })
            .collect()
    };
    let train = gen_split(Split::Train)?;
    let test = gen_split(Split::Test)?;
    let rollout = gen_split(Split::Rollout)?;
    log::info!(
        "generated {} dataset (seed {seed}): {resamples} rejected draws",
        config.kind().name()
    );
    Ok(Dataset {
        config: config.clone(),
        sizes,
        seed,
        train,
        test,
        rollout,
        resamples,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitHeader {
    pub task: TaskKind,
    pub split: Split,
    pub config_hash: String,
    pub count: usize,
    pub steps: usize,
    pub d_model: usize,
}

pub fn write_split(path: &Path, header: &SplitHeader, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[header.task.id(), header.split.id()])?;
    w.write_all(&hash_bytes(&header.config_hash)?)?;
    w.write_all(&(trajectories.len() as u64).to_le_bytes())?;
    w.write_all(&(header.steps as u64).to_le_bytes())?;
    w.write_all(&(header.d_model as u32).to_le_bytes())?;
    for ch in header.task.channels() {
        let role = match ch.role {
            ChannelRole::State => 0u8,
            ChannelRole::Input => 1u8,
        };
        w.write_all(&[role, ch.name.len() as u8])?;
        w.write_all(ch.name.as_bytes())?;
    }
    for tr in trajectories {
        if tr.steps() != header.steps || tr.d_model != header.d_model {
            return Err(Error::Format("trajectory does not match split header".into()));
        }
        for v in &tr.frames {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_split(path: &Path) -> Result<(SplitHeader, Vec<Trajectory>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    if &read_array::<8>(&mut r)? != MAGIC {
        return Err(Error::Format(format!("{} is not a dataset file", path.display())));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let [task_id, split_id] = read_array::<2>(&mut r)?;
    let task = TaskKind::from_id(task_id)?;
    let split = Split::from_id(split_id)?;
    let hash: String = read_array::<32>(&mut r)?.iter().map(|b| format!("{b:02x}")).collect();
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let steps = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let d_model = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if d_model != task.d_model() {
        return Err(Error::Format(format!("d_model {d_model} does not match task {}", task.name())));
    }
    for expected in task.channels() {
        let [role, len] = read_array::<2>(&mut r)?;
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let role_ok = match expected.role {
            ChannelRole::State => role == 0,
            ChannelRole::Input => role == 1,
        };
        if !role_ok || name != expected.name.as_bytes() {
            return Err(Error::Format("channel layout does not match task".into()));
        }
    }
    let per = (steps + 1) * d_model;
    let mut trajectories = Vec::with_capacity(count);
    let mut buf = vec![0u8; per * 8];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        let frames = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        trajectories.push(Trajectory::new(d_model, frames)?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after dataset values".into()));
    }
    let header = SplitHeader {
        task,
        split,
        config_hash: hash,
        count,
        steps,
        d_model,
    };
    Ok((header, trajectories))
}

/// Human-readable sidecar written next to the split files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub task: TaskKind,
    pub config: TaskConfig,
    pub sizes: DatasetSizes,
    pub seed: u64,
    pub config_hash: String,
    pub resamples: usize,
    pub resample_rate: f64,
    pub files: Vec<(Split, String)>,
}

impl DatasetManifest {
    pub const FILE: &'static str = "manifest.json";
}

fn split_file(split: Split) -> String {
    format!("{}.bin", split.name())
}

/// Writes the three split containers and the manifest into `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let hash = ds.hash()?;
    let mut files = Vec::new();
    for split in Split::ALL {
        let trs = ds.split(split);
        let header = SplitHeader {
            task: ds.task(),
            split,
            config_hash: hash.clone(),
            count: trs.len(),
            steps: ds.sizes.steps(split),
            d_model: ds.task().d_model(),
        };
        write_split(&dir.join(split_file(split)), &header, trs)?;
        files.push((split, split_file(split)));
    }
    let manifest = DatasetManifest {
        format_version: VERSION,
        task: ds.task(),
        config: ds.config.clone(),
        sizes: ds.sizes,
        seed: ds.seed,
        config_hash: hash,
        resamples: ds.resamples,
        resample_rate: ds.resample_rate(),
        files,
    };
    let path = dir.join(DatasetManifest::FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

impl Dataset {
    /// Loads a directory written by [`write_dataset`], checking that every
    /// split carries the manifest's hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(DatasetManifest::FILE))?)?;
        let mut parts = Vec::new();
        for split in Split::ALL {
            let (header, trs) = read_split(&dir.join(split_file(split)))?;
            if header.config_hash != manifest.config_hash || header.split != split || header.task != manifest.task {
                return Err(Error::Format(format!("{} split does not belong to this manifest", split.name())));
            }
            parts.push(trs);
        }
        let rollout = parts.pop().expect("three splits");
        let test = parts.pop().expect("three splits");
        let train = parts.pop().expect("three splits");
        Ok(Dataset {
            config: manifest.config,
            sizes: manifest.sizes,
            seed: manifest.seed,
            train,
            test,
            rollout,
            resamples: manifest.resamples,
        })
    }
}
