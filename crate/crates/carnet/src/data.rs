//! Demonstration dataset: autopilot roll-outs stored as one directory per
//! episode (8-bit PGM frames + CSV sensor/action tables) plus a window index
//! with the train/val/test assignment.
//!
//! Row `t` of an episode holds the frame observed at step `t`, the sensor
//! readout of the action applied at `t−1` (zeros at t=0), and the expert's
//! action class chosen at `t`. Windows are non-overlapping, intra-episode
//! slices of `window` consecutive rows.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;

use crate::env::{action_sensors, autopilot, Action, Env, FRAME_SIZE};
use crate::model::{WindowBatch, N_ACTIONS};
use crate::rng::{derive_seed, rng_stream, stream};
use crate::tensor::Elem;

pub const SENSOR_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    /// `len` frames of `FRAME_SIZE²` bytes each.
    pub frames: Vec<u8>,
    /// `len × SENSOR_DIM` normalized (steer, throttle, brake).
    pub sensors: Vec<f64>,
    /// Expert class per step.
    pub labels: Vec<usize>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WindowRef {
    pub episode: usize,
    pub start: usize,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub windows: Vec<WindowRef>,
    pub window: usize,
    pub seed: u64,
    pub n_steps: usize,
}

impl Dataset {
    /// Roll the autopilot until `n_steps` rows exist, then index and split
    /// the windows 70/15/15.
    pub fn generate(n_steps: usize, window: usize, seed: u64) -> Dataset {
        assert!(window >= 2 && n_steps >= window);
        let mut episodes = Vec::new();
        let mut total = 0usize;
        let mut ep_idx = 0u64;
        while total < n_steps {
            let mut env = Env::reset(derive_seed(seed, ep_idx));
            ep_idx += 1;
            let mut frames = Vec::new();
            let mut sensors = Vec::new();
            let mut labels = Vec::new();
            let mut prev = Action::COAST; // zero sensor row at t=0
            loop {
                frames.extend_from_slice(&env.observe());
                sensors.extend_from_slice(&action_sensors(&prev));
                let a = autopilot(&env.state);
                labels.push(a.class());
                let res = env.step(a);
                prev = a;
                if res.done || total + labels.len() >= n_steps {
                    break;
                }
            }
            total += labels.len();
            episodes.push(Episode {
                frames,
                sensors,
                labels,
            });
        }

        let mut windows = Vec::new();
        for (ei, ep) in episodes.iter().enumerate() {
            let mut start = 0;
            while start + window <= ep.len() {
                windows.push(WindowRef {
                    episode: ei,
                    start,
                    split: Split::Train,
                });
                start += window;
            }
        }
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng_stream(seed, stream::SPLIT));
        let n = windows.len();
        let n_train = (0.7 * n as f64).round() as usize;
        let n_val = (0.15 * n as f64).round() as usize;
        for (rank, &wi) in order.iter().enumerate() {
            windows[wi].split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        Dataset {
            episodes,
            windows,
            window,
            seed,
            n_steps,
        }
    }

    pub fn windows_of(&self, split: Split) -> Vec<WindowRef> {
        self.windows
            .iter()
            .copied()
            .filter(|w| w.split == split)
            .collect()
    }

    /// Majority-class accuracy over the window labels of a split.
    pub fn majority_baseline(&self, split: Split) -> f64 {
        let mut counts = [0usize; N_ACTIONS];
        let mut total = 0usize;
        for w in self.windows_of(split) {
            let label = self.episodes[w.episode].labels[w.start + self.window - 1];
            counts[label] += 1;
            total += 1;
        }
        if total == 0 {
            return 0.0;
        }
        *counts.iter().max().unwrap() as f64 / total as f64
    }

    /// Assemble a batch from window references.
    pub fn make_batch<E: Elem>(&self, refs: &[WindowRef]) -> WindowBatch<E> {
        let b = refs.len();
        let t = self.window;
        let px = FRAME_SIZE * FRAME_SIZE;
        let mut frames = Vec::with_capacity(b * t * px);
        let mut sensors = Vec::with_capacity(b * t * SENSOR_DIM);
        let mut actions = Vec::with_capacity(b * t * N_ACTIONS);
        let mut labels = Vec::with_capacity(b);
        for w in refs {
            let ep = &self.episodes[w.episode];
            for step in w.start..w.start + t {
                frames.extend(
                    ep.frames[step * px..(step + 1) * px]
                        .iter()
                        .map(|&v| E::from_f64(v as f64 / 255.0)),
                );
                sensors.extend(
                    ep.sensors[step * SENSOR_DIM..(step + 1) * SENSOR_DIM]
                        .iter()
                        .map(|&v| E::from_f64(v)),
                );
                let mut onehot = vec![E::zero(); N_ACTIONS];
                onehot[ep.labels[step]] = E::one();
                actions.extend(onehot);
            }
            labels.push(ep.labels[w.start + t - 1]);
        }
        WindowBatch {
            b,
            t,
            hw: FRAME_SIZE,
            frames,
            sensors: Some(sensors),
            actions: Some(actions),
            labels: Some(labels),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut meta = String::new();
        meta.push_str(&format!("n_steps = {}\n", self.n_steps));
        meta.push_str(&format!("window = {}\n", self.window));
        meta.push_str(&format!("seed = {}\n", self.seed));
        meta.push_str(&format!("episodes = {}\n", self.episodes.len()));
        fs::write(dir.join("dataset.txt"), meta)?;

        for (ei, ep) in self.episodes.iter().enumerate() {
            let ed = dir.join(format!("ep{ei:05}"));
            fs::create_dir_all(&ed)?;
            let px = FRAME_SIZE * FRAME_SIZE;
            for step in 0..ep.len() {
                write_pgm(
                    &ed.join(format!("frame{step:05}.pgm")),
                    &ep.frames[step * px..(step + 1) * px],
                )?;
            }
            let mut s = String::from("steer,throttle,brake\n");
            for row in ep.sensors.chunks(SENSOR_DIM) {
                s.push_str(&format!("{:.6},{:.6},{:.6}\n", row[0], row[1], row[2]));
            }
            fs::write(ed.join("sensors.csv"), s)?;
            let mut a = String::from("class\n");
            for &l in &ep.labels {
                a.push_str(&format!("{l}\n"));
            }
            fs::write(ed.join("actions.csv"), a)?;
        }

        let mut w = String::from("episode,start,split\n");
        for win in &self.windows {
            w.push_str(&format!(
                "{},{},{}\n",
                win.episode,
                win.start,
                win.split.name()
            ));
        }
        fs::write(dir.join("windows.csv"), w)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta = fs::read_to_string(dir.join("dataset.txt"))
            .with_context(|| format!("dataset metadata in {}", dir.display()))?;
        let field = |key: &str| -> Result<u64> {
            for line in meta.lines() {
                if let Some((k, v)) = line.split_once('=') {
                    if k.trim() == key {
                        return Ok(v.trim().parse()?);
                    }
                }
            }
            bail!("dataset.txt missing key '{key}'");
        };
        let n_steps = field("n_steps")? as usize;
        let window = field("window")? as usize;
        let seed = field("seed")?;
        let n_eps = field("episodes")? as usize;

        let mut episodes = Vec::with_capacity(n_eps);
        for ei in 0..n_eps {
            let ed = dir.join(format!("ep{ei:05}"));
            let labels: Vec<usize> = fs::read_to_string(ed.join("actions.csv"))?
                .lines()
                .skip(1)
                .map(|l| l.trim().parse().context("action class"))
                .collect::<Result<_>>()?;
            let sensors: Vec<f64> = fs::read_to_string(ed.join("sensors.csv"))?
                .lines()
                .skip(1)
                .flat_map(|l| l.split(',').map(|v| v.trim().parse::<f64>()).collect::<Vec<_>>())
                .collect::<std::result::Result<_, _>>()?;
            if sensors.len() != labels.len() * SENSOR_DIM {
                bail!("episode {ei}: {} sensor values for {} steps", sensors.len(), labels.len());
            }
            let mut frames = Vec::with_capacity(labels.len() * FRAME_SIZE * FRAME_SIZE);
            for step in 0..labels.len() {
                frames.extend(read_pgm(&ed.join(format!("frame{step:05}.pgm")))?);
            }
            episodes.push(Episode {
                frames,
                sensors,
                labels,
            });
        }

        let mut windows = Vec::new();
        for line in fs::read_to_string(dir.join("windows.csv"))?.lines().skip(1) {
            let mut it = line.split(',');
            let episode = it.next().context("episode column")?.parse()?;
            let start = it.next().context("start column")?.parse()?;
            let split = Split::parse(it.next().context("split column")?.trim())
                .context("split column value")?;
            windows.push(WindowRef {
                episode,
                start,
                split,
            });
        }
        Ok(Dataset {
            episodes,
            windows,
            window,
            seed,
            n_steps,
        })
    }
}

fn write_pgm(path: &Path, pixels: &[u8]) -> Result<()> {
    let f = fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    write!(w, "P5\n{} {}\n255\n", FRAME_SIZE, FRAME_SIZE)?;
    w.write_all(pixels)?;
    Ok(())
}

fn read_pgm(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .with_context(|| path.display().to_string())?
        .read_to_end(&mut bytes)?;
    // header: three whitespace-separated fields after the magic
    let mut pos = 0;
    let mut fields = 0;
    while fields < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields += 1;
    }
    pos += 1; // single whitespace after maxval
    let px = FRAME_SIZE * FRAME_SIZE;
    if bytes.len() < pos + px {
        bail!("{}: truncated PGM", path.display());
    }
    Ok(bytes[pos..pos + px].to_vec())
}

/// A flat collection of single frames for autoencoder pretraining.
pub fn all_frames(ds: &Dataset, split: Split) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for w in ds.windows_of(split) {
        for step in w.start..w.start + ds.window {
            out.push((w.episode, step));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = Dataset::generate(300, 4, 7);
        let b = Dataset::generate(300, 4, 7);
        assert_eq!(a.episodes.len(), b.episodes.len());
        for (x, y) in a.episodes.iter().zip(&b.episodes) {
            assert_eq!(x.frames, y.frames);
            assert_eq!(x.sensors, y.sensors);
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn split_is_a_partition_with_ratios() {
        let ds = Dataset::generate(2000, 4, 1);
        let n = ds.windows.len();
        let tr = ds.windows_of(Split::Train).len();
        let va = ds.windows_of(Split::Val).len();
        let te = ds.windows_of(Split::Test).len();
        assert_eq!(tr + va + te, n);
        assert!((tr as f64 - 0.7 * n as f64).abs() <= 1.0);
        assert!((va as f64 - 0.15 * n as f64).abs() <= 1.0);
    }

    #[test]
    fn windows_stay_inside_episodes() {
        let ds = Dataset::generate(1000, 4, 2);
        for w in &ds.windows {
            assert!(w.start + ds.window <= ds.episodes[w.episode].len());
            assert_eq!(w.start % ds.window, 0);
        }
    }

    #[test]
    fn label_distribution_covers_most_classes() {
        let ds = Dataset::generate(5000, 4, 3);
        let mut seen = [false; 9];
        for ep in &ds.episodes {
            for &l in &ep.labels {
                seen[l] = true;
            }
        }
        assert!(seen.iter().filter(|&&s| s).count() >= 6, "{seen:?}");
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(200, 4, 11);
        ds.save(dir.path()).unwrap();
        let re = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.window, re.window);
        assert_eq!(ds.episodes.len(), re.episodes.len());
        for (a, b) in ds.episodes.iter().zip(&re.episodes) {
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.labels, b.labels);
            for (x, y) in a.sensors.iter().zip(&b.sensors) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert_eq!(ds.windows.len(), re.windows.len());
    }

    #[test]
    fn first_sensor_row_is_zero() {
        let ds = Dataset::generate(100, 4, 5);
        for ep in &ds.episodes {
            assert_eq!(&ep.sensors[..SENSOR_DIM], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn batch_layout() {
        let ds = Dataset::generate(300, 4, 9);
        let refs = ds.windows_of(Split::Train);
        let batch = ds.make_batch::<f32>(&refs[..2]);
        assert_eq!(batch.b, 2);
        assert_eq!(batch.t, 4);
        assert_eq!(batch.frames.len(), 2 * 4 * 64 * 64);
        assert_eq!(batch.sensors.as_ref().unwrap().len(), 2 * 4 * 3);
        assert_eq!(batch.actions.as_ref().unwrap().len(), 2 * 4 * 9);
        assert_eq!(batch.labels.as_ref().unwrap().len(), 2);
    }
}
