//! Trajectory datasets and their on-disk container.
//!
//! A dataset `name` is stored as `name.json` (metadata sidecar) and
//! `name.bin`: little-endian `f64` fields in `[sample, time, channel, row,
//! col]` order, followed by the forcing field `[channel, row, col]` when the
//! problem has one.

use super::gp::{sample_gp_initial, DEFAULT_JITTER, DEFAULT_LENGTH_SCALE};
use super::{PdeProblem, SpectralSolver};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpParams {
    pub length_scale: f64,
    pub jitter: f64,
}

impl Default for GpParams {
    fn default() -> Self {
        GpParams {
            length_scale: DEFAULT_LENGTH_SCALE,
            jitter: DEFAULT_JITTER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub problem: PdeProblem,
    pub gp: GpParams,
    pub samples: usize,
    pub frames: usize,
    pub channels: usize,
    /// Stored grid `[H, W]` (after point sampling).
    pub grid: [usize; 2],
    pub store_stride: usize,
    /// Time between stored frames.
    pub dt: f64,
    /// `(frames - 1) * dt`.
    pub horizon: f64,
    pub seed: u64,
    pub sample_seeds: Vec<u64>,
    pub forcing_seed: Option<u64>,
    pub payload: String,
    /// Byte offset of the forcing field inside the payload.
    pub forcing_offset: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub meta: DatasetMeta,
    /// `[samples, frames, channels, H, W]`
    pub fields: Tensor,
    /// `[channels_f, H, W]` when the problem is forced.
    pub forcing: Option<Tensor>,
}

fn point_sample(x: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h % h_out != 0 || w % w_out != 0 {
        return Err(Error::config(
            "grid",
            format!("stored grid {h_out}x{w_out} must divide the solver grid {h}x{w}"),
        ));
    }
    let (sh, sw) = (h / h_out, w / w_out);
    Ok(Tensor::from_fn(&[c, h_out, w_out], |p| {
        let (ch, i, j) = (p / (h_out * w_out), (p / w_out) % h_out, p % w_out);
        x.data()[(ch * h + i * sh) * w + j * sw]
    }))
}

/// Simulates `samples` trajectories from GP initial conditions.
///
/// Sample `i` uses the seed `derive_seed(seed, "sample", i)`; a forcing
/// draw uses `derive_seed(seed, "forcing", 0)`.
pub fn generate_dataset(
    problem: &PdeProblem,
    samples: usize,
    store_stride: usize,
    grid: [usize; 2],
    gp: GpParams,
    seed: u64,
) -> Result<TrajectoryDataset> {
    problem.validate()?;
    if store_stride == 0 {
        return Err(Error::config("store_stride", "must be at least 1"));
    }
    let n_fine = problem.fine_steps()?;
    let frames = n_fine / store_stride + 1;
    let [hs, ws] = problem.grid;
    let forcing_seed = problem.has_forcing().then(|| derive_seed(seed, "forcing", 0));
    let forcing = match forcing_seed {
        Some(s) => problem.forcing_field(s, &gp)?,
        None => None,
    };
    let solver = SpectralSolver::new(problem, forcing.as_ref())?;
    let mut sample_seeds = Vec::with_capacity(samples);
    let mut data = Vec::with_capacity(samples * frames * grid[0] * grid[1]);
    for i in 0..samples {
        let s = derive_seed(seed, "sample", i as u64);
        sample_seeds.push(s);
        let wrap = |e| Error::Sample {
            sample: i,
            source: Box::new(e),
        };
        let u0 = sample_gp_initial(hs, ws, gp.length_scale, gp.jitter, s).map_err(wrap)?;
        let traj = solver.run(&u0, n_fine, store_stride).map_err(wrap)?;
        for frame in traj.iter().take(frames) {
            data.extend_from_slice(point_sample(frame, grid[0], grid[1])?.data());
        }
    }
    let forcing = forcing
        .map(|f| point_sample(&f, grid[0], grid[1]))
        .transpose()?;
    let dt = problem.fine_dt * store_stride as f64;
    let fields = Tensor::from_vec(&[samples, frames, 1, grid[0], grid[1]], data)?;
    let forcing_offset = forcing.as_ref().map(|_| 8 * fields.numel());
    Ok(TrajectoryDataset {
        meta: DatasetMeta {
            version: DATASET_VERSION,
            problem: problem.clone(),
            gp,
            samples,
            frames,
            channels: 1,
            grid,
            store_stride,
            dt,
            horizon: (frames - 1) as f64 * dt,
            seed,
            sample_seeds,
            forcing_seed,
            payload: String::new(),
            forcing_offset,
        },
        fields,
        forcing,
    })
}

fn sidecar_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

fn f64_bytes(data: &[f64], out: &mut Vec<u8>) {
    out.reserve(8 * data.len());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

impl TrajectoryDataset {
    pub fn samples(&self) -> usize {
        self.meta.samples
    }

    pub fn frames(&self) -> usize {
        self.meta.frames
    }

    /// Frame `t` of sample `s` as `[C, H, W]`.
    pub fn frame(&self, s: usize, t: usize) -> Tensor {
        self.fields.index_axis0(s).index_axis0(t)
    }

    /// First `n` samples (used by data-size sweeps).
    pub fn take(&self, n: usize) -> Result<TrajectoryDataset> {
        if n > self.meta.samples {
            return Err(Error::config(
                "samples",
                format!("requested {n} of {} samples", self.meta.samples),
            ));
        }
        let per = self.fields.numel() / self.meta.samples.max(1);
        let mut shape = self.fields.shape().to_vec();
        shape[0] = n;
        let fields = Tensor::from_vec(&shape, self.fields.data()[..n * per].to_vec())?;
        let mut meta = self.meta.clone();
        meta.samples = n;
        meta.sample_seeds.truncate(n);
        meta.forcing_offset = self.forcing.as_ref().map(|_| 8 * fields.numel());
        Ok(TrajectoryDataset {
            meta,
            fields,
            forcing: self.forcing.clone(),
        })
    }

    /// Writes `base.json` and `base.bin`.
    pub fn write(&self, base: &Path) -> Result<()> {
        let (json, bin) = sidecar_paths(base);
        let mut meta = self.meta.clone();
        meta.payload = bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut bytes = Vec::new();
        f64_bytes(self.fields.data(), &mut bytes);
        if let Some(f) = &self.forcing {
            f64_bytes(f.data(), &mut bytes);
        }
        std::fs::write(&bin, bytes)?;
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        std::fs::write(&json, text)?;
        Ok(())
    }

    /// Reads a dataset written by [`write`](Self::write); `base` may name
    /// either file or omit the extension.
    pub fn read(base: &Path) -> Result<TrajectoryDataset> {
        let (json, _) = sidecar_paths(base);
        let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(&json)?)?;
        if meta.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {}",
                meta.version
            )));
        }
        let bin = json.with_file_name(&meta.payload);
        let bytes = std::fs::read(&bin)?;
        let [h, w] = meta.grid;
        let shape = [meta.samples, meta.frames, meta.channels, h, w];
        let n: usize = shape.iter().product();
        let fields_end = 8 * n;
        if bytes.len() < fields_end {
            return Err(Error::Format("dataset payload is truncated".into()));
        }
        let fields = Tensor::from_vec(&shape, read_f64s(&bytes[..fields_end]))?;
        let forcing = match meta.forcing_offset {
            Some(off) => {
                let end = off + 8 * h * w;
                let chunk = bytes
                    .get(off..end)
                    .ok_or_else(|| Error::Format("forcing field is truncated".into()))?;
                Some(Tensor::from_vec(&[1, h, w], read_f64s(chunk))?)
            }
            None => None,
        };
        let expected = fields_end + forcing.as_ref().map_or(0, |f| 8 * f.numel());
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        Ok(TrajectoryDataset {
            meta,
            fields,
            forcing,
        })
    }
}
