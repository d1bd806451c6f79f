//! Measurement/potential/conductivity training triples: generation,
//! normalization, and a flat-file dataset format.
//!
//! Each sample pairs one phantom's boundary voltage sweep with the smooth
//! internal potential it should map to and the conductivity image that
//! produced both. Arrays live in raw little-endian `f32` blobs next to a
//! JSON manifest, so a directory fully describes a dataset and regenerating
//! with the same seed reproduces it byte for byte.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{EitError, Result};
use crate::fem::{interpolate_to_grid, measure_protocol, solve_continuum, CurrentPattern};
use crate::geometry::{build_grid, build_trimesh, electrode_layout, GridSpec};
use crate::phantom::{rasterize, sample_phantom, sigma_on_mesh, Family, Phantom, PhantomLimits};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const PHANTOMS_FILE: &str = "phantoms.json";
const DV_FILE: &str = "dv.bin";
const U_FILE: &str = "u.bin";
const SIGMA_FILE: &str = "sigma.bin";

/// Everything needed to regenerate a dataset deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub grid_n: usize,
    pub mesh_target_h: f64,
    pub electrodes: usize,
    pub coverage: f64,
    pub contact_impedance: f64,
    /// Relative weight per family, `[one_circle, two_circles, circle_triangle]`.
    pub family_weights: [f64; 3],
    /// Additive Gaussian measurement noise as a fraction of the voltage
    /// spread; zero means clean data.
    pub noise_level: f64,
    /// Train/validation/test fractions.
    pub split_fractions: (f64, f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_samples: 300,
            seed: 7,
            grid_n: 64,
            mesh_target_h: 0.03,
            electrodes: 16,
            coverage: 0.5,
            contact_impedance: 0.01,
            family_weights: [1.0, 1.0, 1.0],
            noise_level: 0.0,
            split_fractions: (0.8, 0.1, 0.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub family: Family,
    pub split: Split,
}

/// Normalization statistics, computed from the training split only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub dv_mean: Vec<f64>,
    pub dv_std: Vec<f64>,
    /// Single global magnitude bound for the potential targets.
    pub u_scale: f64,
    /// Channels whose raw standard deviation collapsed and was clamped.
    pub clamped_channels: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub protocol: String,
    pub records: Vec<SampleRecord>,
    pub stats: NormStats,
    /// Samples that had to be redrawn after a solver failure.
    pub resamples: usize,
    /// Elements (not bytes) per sample in each blob.
    pub dv_stride: usize,
    pub u_stride: usize,
    pub sigma_stride: usize,
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// `(n_samples, dv_stride)`
    pub dv: Array2<f32>,
    /// `(n_samples, grid_n, grid_n)`
    pub u: Array3<f32>,
    pub sigma: Array3<f32>,
    pub phantoms: Vec<Phantom>,
}

impl Dataset {
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn grid(&self) -> Result<GridSpec> {
        build_grid(self.manifest.config.grid_n)
    }
}

/// Deterministic per-sample seed derivation.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Split sizes for `n` samples: train gets the remainder after the
/// validation and test shares round down.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let val = (n as f64 * fractions.1).floor() as usize;
    let test = (n as f64 * fractions.2).floor() as usize;
    (n - val - test, val, test)
}

fn pick_family(rng: &mut ChaCha8Rng, weights: &[f64; 3]) -> Family {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (f, w) in Family::ALL.iter().zip(weights) {
        if x < *w {
            return *f;
        }
        x -= w;
    }
    Family::CircleTriangle
}

/// Additive Gaussian noise scaled to the vector's own spread; Box-Muller on
/// a counter-seeded generator keeps it reproducible.
pub fn add_noise(values: &[f64], level: f64, seed: u64) -> Vec<f64> {
    if level == 0.0 {
        return values.to_vec();
    }
    let n = values.len() as f64;
    let mean: f64 = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    values
        .iter()
        .map(|v| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let gauss = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
            v + level * std * gauss
        })
        .collect()
}

/// Generate a dataset into `dir` (created if missing). Returns the manifest,
/// which is also written alongside the arrays.
pub fn generate_dataset(config: &DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    if config.n_samples < 10 {
        return Err(EitError::InvalidArgument(format!(
            "dataset needs at least 10 samples, got {}",
            config.n_samples
        )));
    }
    let fr = config.split_fractions;
    if !(fr.0 > 0.0 && fr.1 >= 0.0 && fr.2 >= 0.0 && (fr.0 + fr.1 + fr.2 - 1.0).abs() < 1e-9) {
        return Err(EitError::InvalidArgument(format!(
            "split fractions {fr:?} must be nonnegative and sum to 1"
        )));
    }
    if config.family_weights.iter().any(|w| *w < 0.0)
        || config.family_weights.iter().sum::<f64>() <= 0.0
    {
        return Err(EitError::InvalidArgument(format!(
            "bad family weights {:?}",
            config.family_weights
        )));
    }
    let layout = electrode_layout(config.electrodes, config.coverage, config.contact_impedance)?;
    let mesh = build_trimesh(config.mesh_target_h, &layout)?;
    let grid = build_grid(config.grid_n)?;
    let limits = PhantomLimits::default();
    let trig = CurrentPattern::trig_default();

    let n = config.n_samples;
    let dv_stride = crate::fem::frame_len(config.electrodes);
    let u_stride = config.grid_n * config.grid_n;

    let mut dv_all = Vec::with_capacity(n * dv_stride);
    let mut u_all = Vec::with_capacity(n * u_stride);
    let mut sigma_all = Vec::with_capacity(n * u_stride);
    let mut phantoms = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut resamples = 0usize;

    let (n_train, n_val, _) = split_sizes(n, fr);
    for i in 0..n {
        let seed_i = sample_seed(config.seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed_i);
        let family = pick_family(&mut rng, &config.family_weights);
        let mut attempt = 0usize;
        let (phantom, dv, field) = loop {
            let phantom_seed: u64 = rng.gen();
            let result = (|| -> Result<_> {
                let phantom = sample_phantom(phantom_seed, family, &limits)?;
                let sig_mesh = sigma_on_mesh(&phantom, &mesh);
                let dv = measure_protocol(&mesh, &sig_mesh, &layout)?;
                let sol = solve_continuum(&mesh, &sig_mesh, &trig)?;
                let mut field = interpolate_to_grid(&mesh, &sol.u, &grid)?;
                field.regauge(&grid);
                Ok((phantom, dv, field))
            })();
            match result {
                Ok(out) => break out,
                Err(e) => {
                    attempt += 1;
                    resamples += 1;
                    if attempt >= 20 {
                        return Err(EitError::Data(format!(
                            "sample {i} failed {attempt} times; last error: {e}"
                        )));
                    }
                }
            }
        };
        let dv_values = if config.noise_level > 0.0 {
            add_noise(&dv.values, config.noise_level, seed_i ^ 0xA5A5_A5A5_A5A5_A5A5)
        } else {
            dv.values
        };
        dv_all.extend(dv_values.iter().map(|v| *v as f32));
        for i2 in 0..config.grid_n {
            for j2 in 0..config.grid_n {
                u_all.push(field.values[[i2, j2]] as f32);
            }
        }
        let sig_grid = rasterize(&phantom, &grid);
        for i2 in 0..config.grid_n {
            for j2 in 0..config.grid_n {
                sigma_all.push(sig_grid[[i2, j2]] as f32);
            }
        }
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        phantoms.push(phantom);
        records.push(SampleRecord {
            seed: seed_i,
            family,
            split,
        });
    }

    let stats = compute_stats(&records, &dv_all, &u_all, dv_stride, u_stride);
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config: config.clone(),
        protocol: crate::fem::MeasurementFrame::PROTOCOL.to_string(),
        records,
        stats,
        resamples,
        dv_stride,
        u_stride,
        sigma_stride: u_stride,
    };

    fs::create_dir_all(dir).map_err(|e| EitError::io(dir, e))?;
    write_f32(&dir.join(DV_FILE), &dv_all)?;
    write_f32(&dir.join(U_FILE), &u_all)?;
    write_f32(&dir.join(SIGMA_FILE), &sigma_all)?;
    let phantom_json = serde_json::to_string_pretty(&phantoms)
        .map_err(|e| EitError::Data(format!("phantom serialization failed: {e}")))?;
    fs::write(dir.join(PHANTOMS_FILE), phantom_json)
        .map_err(|e| EitError::io(dir.join(PHANTOMS_FILE), e))?;
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| EitError::Data(format!("manifest serialization failed: {e}")))?;
    fs::write(dir.join(MANIFEST_FILE), manifest_json)
        .map_err(|e| EitError::io(dir.join(MANIFEST_FILE), e))?;
    Ok(manifest)
}

fn compute_stats(
    records: &[SampleRecord],
    dv: &[f32],
    u: &[f32],
    dv_stride: usize,
    u_stride: usize,
) -> NormStats {
    let train: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let count = train.len().max(1) as f64;
    let mut dv_mean = vec![0.0f64; dv_stride];
    for &i in &train {
        for c in 0..dv_stride {
            dv_mean[c] += dv[i * dv_stride + c] as f64;
        }
    }
    for m in &mut dv_mean {
        *m /= count;
    }
    let mut dv_std = vec![0.0f64; dv_stride];
    for &i in &train {
        for c in 0..dv_stride {
            let d = dv[i * dv_stride + c] as f64 - dv_mean[c];
            dv_std[c] += d * d;
        }
    }
    let mut clamped = Vec::new();
    for (c, s) in dv_std.iter_mut().enumerate() {
        *s = (*s / count).sqrt();
        if *s < 1e-8 {
            *s = 1e-8;
            clamped.push(c);
        }
    }
    let mut u_scale = 0.0f64;
    for &i in &train {
        for k in 0..u_stride {
            u_scale = u_scale.max((u[i * u_stride + k] as f64).abs());
        }
    }
    if u_scale == 0.0 {
        u_scale = 1.0;
    }
    NormStats {
        dv_mean,
        dv_std,
        u_scale,
        clamped_channels: clamped,
    }
}

/// Standardize one measurement vector against the training statistics.
pub fn normalize_dv(values: &[f64], stats: &NormStats) -> Result<Vec<f64>> {
    if values.len() != stats.dv_mean.len() {
        return Err(EitError::InvalidArgument(format!(
            "measurement length {} does not match stats length {}",
            values.len(),
            stats.dv_mean.len()
        )));
    }
    Ok(values
        .iter()
        .zip(stats.dv_mean.iter().zip(&stats.dv_std))
        .map(|(v, (m, s))| (v - m) / s)
        .collect())
}

pub fn denormalize_dv(values: &[f64], stats: &NormStats) -> Result<Vec<f64>> {
    if values.len() != stats.dv_mean.len() {
        return Err(EitError::InvalidArgument(format!(
            "measurement length {} does not match stats length {}",
            values.len(),
            stats.dv_mean.len()
        )));
    }
    Ok(values
        .iter()
        .zip(stats.dv_mean.iter().zip(&stats.dv_std))
        .map(|(v, (m, s))| v * s + m)
        .collect())
}

/// Scale potentials into roughly [-1, 1] for training targets.
pub fn normalize_u(value: f64, stats: &NormStats) -> f64 {
    value / stats.u_scale
}

pub fn denormalize_u(value: f64, stats: &NormStats) -> f64 {
    value * stats.u_scale
}

fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| EitError::io(path, e))
}

fn read_f32(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| EitError::io(path, e))?;
    if bytes.len() != expect * 4 {
        return Err(EitError::Data(format!(
            "{} holds {} bytes, expected {} ({expect} floats)",
            path.display(),
            bytes.len(),
            expect * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Load a dataset directory written by `generate_dataset`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_json =
        fs::read_to_string(&manifest_path).map_err(|e| EitError::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_json)
        .map_err(|e| EitError::Data(format!("bad manifest {}: {e}", manifest_path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(EitError::Data(format!(
            "manifest version {} unsupported (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let n = manifest.records.len();
    let g = manifest.config.grid_n;
    let dv = read_f32(&dir.join(DV_FILE), n * manifest.dv_stride)?;
    let u = read_f32(&dir.join(U_FILE), n * manifest.u_stride)?;
    let sigma = read_f32(&dir.join(SIGMA_FILE), n * manifest.sigma_stride)?;
    let phantoms_path = dir.join(PHANTOMS_FILE);
    let phantom_json =
        fs::read_to_string(&phantoms_path).map_err(|e| EitError::io(&phantoms_path, e))?;
    let phantoms: Vec<Phantom> = serde_json::from_str(&phantom_json)
        .map_err(|e| EitError::Data(format!("bad phantom list: {e}")))?;
    if phantoms.len() != n {
        return Err(EitError::Data(format!(
            "phantom list has {} entries for {} samples",
            phantoms.len(),
            n
        )));
    }
    Ok(Dataset {
        dv: Array2::from_shape_vec((n, manifest.dv_stride), dv)
            .map_err(|e| EitError::Data(format!("measurement blob shape: {e}")))?,
        u: Array3::from_shape_vec((n, g, g), u)
            .map_err(|e| EitError::Data(format!("potential blob shape: {e}")))?,
        sigma: Array3::from_shape_vec((n, g, g), sigma)
            .map_err(|e| EitError::Data(format!("conductivity blob shape: {e}")))?,
        manifest,
        phantoms,
    })
}
