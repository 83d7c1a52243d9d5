//! Cross-resolution identity dataset generation and persistence.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{gaussian_blur, render, Appearance, IdentitySpec, Latent, Pose};
use super::resample::{downsample, Kernel};
use crate::error::{dim_err, Error, Result};
use crate::rng::{Rng, SeedStream};
use crate::tensor::Tensor;

/// Test-time degradation applied to a copy of every test sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub enabled: bool,
    /// Added to every pixel.
    pub brightness: f64,
    /// Deviations from the image mean are multiplied by this.
    pub contrast: f64,
    /// Gaussian blur sigma in HR pixels.
    pub blur_sigma: f64,
    pub noise_std: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            brightness: 0.2,
            contrast: 0.6,
            blur_sigma: 0.8,
            noise_std: 0.04,
        }
    }
}

impl ShiftConfig {
    pub fn none() -> Self {
        Self {
            enabled: false,
            brightness: 0.0,
            contrast: 1.0,
            blur_sigma: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.brightness.abs() <= 1.0
            && self.contrast > 0.0
            && self.contrast <= 4.0
            && (0.0..=8.0).contains(&self.blur_sigma)
            && (0.0..=1.0).contains(&self.noise_std);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "shift parameters out of range: {self:?}"
            )))
        }
    }

    fn apply(&self, img: &mut [f64], size: usize, rng: &mut Rng) {
        gaussian_blur(img, size, self.blur_sigma);
        let mean = img.iter().sum::<f64>() / img.len() as f64;
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("finite std");
        for v in img.iter_mut() {
            let n = if self.noise_std > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            *v = (mean + self.contrast * (*v - mean) + self.brightness + n).clamp(0.0, 1.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_ids: usize,
    pub samples_per_id: usize,
    /// Trailing samples of each identity held out for testing.
    pub test_per_id: usize,
    pub hr_size: usize,
    pub lr_factor: usize,
    pub kernel: Kernel,
    pub appearance: Appearance,
    pub min_latent_distance: f64,
    /// Pose jitter: translation (in units of half the image), rotation
    /// (radians), relative scale.
    pub jitter_shift: f64,
    pub jitter_rotation: f64,
    pub jitter_scale: f64,
    /// Illumination gain is drawn from `1 ± illumination`.
    pub illumination: f64,
    pub pixel_noise: f64,
    /// Gaussian noise added to low-resolution images after downsampling.
    pub lr_noise: f64,
    pub shift: ShiftConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_ids: 16,
            samples_per_id: 20,
            test_per_id: 8,
            hr_size: 32,
            lr_factor: 4,
            kernel: Kernel::Bicubic,
            appearance: Appearance::default(),
            min_latent_distance: 1.0,
            jitter_shift: 0.12,
            jitter_rotation: 0.2,
            jitter_scale: 0.1,
            illumination: 0.2,
            pixel_noise: 0.03,
            lr_noise: 0.1,
            shift: ShiftConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn lr_size(&self) -> usize {
        self.hr_size / self.lr_factor.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_ids < 2 {
            return bad(format!("need at least 2 identities, got {}", self.num_ids));
        }
        if self.samples_per_id < 2 {
            return bad(format!(
                "need at least 2 samples per identity, got {}",
                self.samples_per_id
            ));
        }
        if self.test_per_id >= self.samples_per_id {
            return bad(format!(
                "test_per_id = {} leaves no training samples out of {}",
                self.test_per_id, self.samples_per_id
            ));
        }
        if self.hr_size == 0 || self.lr_factor == 0 || self.hr_size % self.lr_factor != 0 {
            return bad(format!(
                "lr_factor {} must divide hr_size {}",
                self.lr_factor, self.hr_size
            ));
        }
        let ranges = [
            (
                "appearance.stroke_width",
                self.appearance.stroke_width,
                1e-3,
                1.0,
            ),
            (
                "appearance.blob_amplitude",
                self.appearance.blob_amplitude,
                0.0,
                1.0,
            ),
            (
                "appearance.stroke_amplitude",
                self.appearance.stroke_amplitude,
                0.0,
                1.0,
            ),
            ("min_latent_distance", self.min_latent_distance, 0.0, 4.0),
            ("jitter_shift", self.jitter_shift, 0.0, 0.5),
            ("jitter_rotation", self.jitter_rotation, 0.0, 1.0),
            ("jitter_scale", self.jitter_scale, 0.0, 0.5),
            ("illumination", self.illumination, 0.0, 0.9),
            ("pixel_noise", self.pixel_noise, 0.0, 0.5),
            ("lr_noise", self.lr_noise, 0.0, 0.5),
        ];
        for (name, v, lo, hi) in ranges {
            if !(lo..=hi).contains(&v) {
                return bad(format!("{name} = {v} outside [{lo}, {hi}]"));
            }
        }
        self.shift.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    /// Degraded copy of a test sample.
    TestShifted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub seed: u64,
    /// `[N×1×H×W]`
    pub hr: Tensor,
    /// `[N×1×h×w]`: `downsample(hr)` under the configured kernel, plus
    /// `lr_noise` when set.
    pub lr: Tensor,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub identities: Vec<IdentitySpec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_ids
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn hr_batch(&self, idx: &[usize]) -> Result<Tensor> {
        self.hr.select(idx)
    }

    pub fn lr_batch(&self, idx: &[usize]) -> Result<Tensor> {
        self.lr.select(idx)
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Mean HR pixel value over a split.
    pub fn global_mean(&self, split: Split) -> f64 {
        let per = self.config.hr_size * self.config.hr_size;
        let idx = self.indices(split);
        let total: f64 = idx
            .iter()
            .map(|&i| self.hr.data()[i * per..(i + 1) * per].iter().sum::<f64>())
            .sum();
        total / (idx.len() * per).max(1) as f64
    }
}

const MAX_LATENT_ATTEMPTS: u64 = 10_000;

fn identities(cfg: &DataConfig, stream: SeedStream) -> Result<Vec<IdentitySpec>> {
    let mut out: Vec<IdentitySpec> = Vec::with_capacity(cfg.num_ids);
    for id in 0..cfg.num_ids {
        let id_stream = stream.index(id as u64);
        let mut found = None;
        for attempt in 0..MAX_LATENT_ATTEMPTS {
            let seed = id_stream.index(attempt).seed();
            let latent = Latent::sample(
                &mut <Rng as rand::SeedableRng>::seed_from_u64(seed),
                &cfg.appearance,
            );
            if out
                .iter()
                .all(|o| o.latent.distance(&latent) >= cfg.min_latent_distance)
            {
                found = Some(IdentitySpec { id, seed, latent });
                break;
            }
        }
        out.push(found.ok_or_else(|| {
            Error::Config(format!(
                "could not place identity {id} at latent distance {}",
                cfg.min_latent_distance
            ))
        })?);
    }
    Ok(out)
}

fn sample_image(cfg: &DataConfig, spec: &IdentitySpec, rng: &mut Rng) -> Vec<f64> {
    let mut u = |r: f64| (2.0 * rng.random::<f64>() - 1.0) * r;
    let pose = Pose {
        dx: u(cfg.jitter_shift),
        dy: u(cfg.jitter_shift),
        rotation: u(cfg.jitter_rotation),
        scale: 1.0 + u(cfg.jitter_scale),
    };
    let gain = 1.0 + u(cfg.illumination);
    let mut img = render(&spec.latent, cfg.hr_size, pose, gain);
    let noise = Normal::new(0.0, cfg.pixel_noise).expect("finite std");
    for v in img.iter_mut() {
        let n = if cfg.pixel_noise > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        };
        *v = (*v + n).clamp(0.0, 1.0);
    }
    img
}

/// Generates the dataset. Records are ordered by identity then sample
/// index; shifted copies of the test samples follow in the same order.
pub fn generate_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let root = SeedStream::new(seed);
    let specs = identities(cfg, root.child("identities"))?;
    let size = cfg.hr_size;
    let train_per_id = cfg.samples_per_id - cfg.test_per_id;

    let per_id: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = specs
        .par_iter()
        .map(|spec| {
            let s = root.child("samples").index(spec.id as u64);
            let clean: Vec<Vec<f64>> = (0..cfg.samples_per_id)
                .map(|k| sample_image(cfg, spec, &mut s.index(k as u64).rng("render")))
                .collect();
            let shifted = if cfg.shift.enabled {
                let sh = root.child("shift").index(spec.id as u64);
                clean[train_per_id..]
                    .iter()
                    .enumerate()
                    .map(|(k, img)| {
                        let mut img = img.clone();
                        cfg.shift
                            .apply(&mut img, size, &mut sh.index(k as u64).rng("noise"));
                        img
                    })
                    .collect()
            } else {
                Vec::new()
            };
            (clean, shifted)
        })
        .collect();

    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (id, (clean, _)) in per_id.iter().enumerate() {
        for (k, img) in clean.iter().enumerate() {
            pixels.extend_from_slice(img);
            labels.push(id);
            splits.push(if k < train_per_id {
                Split::Train
            } else {
                Split::Test
            });
        }
    }
    for (id, (_, shifted)) in per_id.iter().enumerate() {
        for img in shifted {
            pixels.extend_from_slice(img);
            labels.push(id);
            splits.push(Split::TestShifted);
        }
    }
    let n = labels.len();
    let hr = Tensor::new(vec![n, 1, size, size], pixels)?;
    let mut lr = downsample(&hr, cfg.lr_factor, cfg.kernel)?;
    if cfg.lr_noise > 0.0 {
        let noise = Normal::new(0.0, cfg.lr_noise).expect("finite std");
        let per = lr.len() / n.max(1);
        let stream = root.child("lr-noise");
        for (i, img) in lr.data_mut().chunks_mut(per).enumerate() {
            let mut rng = stream.index(i as u64).rng("noise");
            for v in img {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        hr,
        lr,
        labels,
        splits,
        identities: specs,
    })
}

pub const DATASET_FORMAT: &str = "aird-dataset 1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const HR_FILE: &str = "hr.bin";
pub const LR_FILE: &str = "lr.bin";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    config: DataConfig,
    num_samples: usize,
    hr_shape: Vec<usize>,
    lr_shape: Vec<usize>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    identities: Vec<IdentitySpec>,
    checksums: std::collections::BTreeMap<String, String>,
}

pub fn f64_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `manifest.json`, `hr.bin` and `lr.bin` into `dir`, returning the
/// file names with their SHA-256 checksums.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<(String, String)>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hr = f64_bytes(ds.hr.data());
    let lr = f64_bytes(ds.lr.data());
    let mut checksums = std::collections::BTreeMap::new();
    checksums.insert(HR_FILE.to_string(), sha256_hex(&hr));
    checksums.insert(LR_FILE.to_string(), sha256_hex(&lr));
    for (name, bytes) in [(HR_FILE, &hr), (LR_FILE, &lr)] {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        seed: ds.seed,
        config: ds.config.clone(),
        num_samples: ds.len(),
        hr_shape: ds.hr.shape().to_vec(),
        lr_shape: ds.lr.shape().to_vec(),
        labels: ds.labels.clone(),
        splits: ds.splits.clone(),
        identities: ds.identities.clone(),
        checksums: checksums.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
    let mut out: Vec<(String, String)> = checksums.into_iter().collect();
    out.push((MANIFEST_FILE.into(), sha256_hex(text.as_bytes())));
    Ok(out)
}

fn read_block(
    dir: &Path,
    name: &str,
    shape: &[usize],
    checksum: Option<&String>,
) -> Result<Tensor> {
    let p = dir.join(name);
    if !p.exists() {
        return Err(Error::MissingArtifact(p));
    }
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    if checksum.map(String::as_str) != Some(sha256_hex(&bytes).as_str()) {
        return Err(Error::Format(format!("{} fails its checksum", p.display())));
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "{} is not a whole number of f64",
            p.display()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mp = dir.join(MANIFEST_FILE);
    if !mp.exists() {
        return Err(Error::MissingArtifact(mp));
    }
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Format(format!(
            "unsupported dataset format {:?}",
            m.format
        )));
    }
    if m.labels.len() != m.num_samples || m.splits.len() != m.num_samples {
        return dim_err("dataset manifest lists inconsistent sample counts");
    }
    let hr = read_block(dir, HR_FILE, &m.hr_shape, m.checksums.get(HR_FILE))?;
    let lr = read_block(dir, LR_FILE, &m.lr_shape, m.checksums.get(LR_FILE))?;
    if hr.shape()[0] != m.num_samples || lr.shape()[0] != m.num_samples {
        return dim_err("image blocks do not match the sample count");
    }
    Ok(Dataset {
        config: m.config,
        seed: m.seed,
        hr,
        lr,
        labels: m.labels,
        splits: m.splits,
        identities: m.identities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(shift: ShiftConfig) -> DataConfig {
        DataConfig {
            num_ids: 4,
            samples_per_id: 6,
            test_per_id: 3,
            shift,
            ..DataConfig::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_dataset(&small(ShiftConfig::default()), 5).unwrap();
        let b = generate_dataset(&small(ShiftConfig::default()), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(ShiftConfig::default()), 6).unwrap();
        assert_ne!(a.hr, c.hr);
    }

    #[test]
    fn layout_and_ranges() {
        let ds = generate_dataset(&small(ShiftConfig::default()), 1).unwrap();
        assert_eq!(ds.len(), 4 * 6 + 4 * 3);
        assert_eq!(ds.hr.shape(), &[36, 1, 32, 32]);
        assert_eq!(ds.lr.shape(), &[36, 1, 8, 8]);
        assert_eq!(ds.indices(Split::Train).len(), 12);
        assert_eq!(ds.indices(Split::TestShifted).len(), 12);
        assert!(ds
            .hr
            .data()
            .iter()
            .chain(ds.lr.data())
            .all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn lr_noise_perturbs_only_the_low_resolution_side() {
        let clean_cfg = DataConfig {
            lr_noise: 0.0,
            ..small(ShiftConfig::none())
        };
        let clean = generate_dataset(&clean_cfg, 4).unwrap();
        assert_eq!(clean.lr, downsample(&clean.hr, 4, Kernel::Bicubic).unwrap());

        let noisy_cfg = DataConfig {
            lr_noise: 0.05,
            ..clean_cfg
        };
        let noisy = generate_dataset(&noisy_cfg, 4).unwrap();
        assert_eq!(noisy.hr, clean.hr);
        // Clamping at 0 and 1 only shrinks the residuals, so the interior
        // pixels carry the configured spread.
        let resid: Vec<f64> = noisy
            .lr
            .data()
            .iter()
            .zip(clean.lr.data())
            .filter(|(_, c)| (0.2..=0.8).contains(*c))
            .map(|(n, c)| n - c)
            .collect();
        let m = resid.iter().sum::<f64>() / resid.len() as f64;
        let sd = (resid.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / resid.len() as f64).sqrt();
        assert!(m.abs() < 0.01, "mean {m}");
        assert!((sd - 0.05).abs() < 0.005, "std {sd}");
    }

    #[test]
    fn identities_are_separated() {
        let ds = generate_dataset(&small(ShiftConfig::none()), 2).unwrap();
        for a in &ds.identities {
            for b in &ds.identities {
                if a.id != b.id {
                    assert!(a.latent.distance(&b.latent) >= ds.config.min_latent_distance);
                }
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = small(ShiftConfig::none());
        c.num_ids = 1;
        assert!(generate_dataset(&c, 0).is_err());
        let mut c = small(ShiftConfig::none());
        c.lr_factor = 3;
        assert!(generate_dataset(&c, 0).is_err());
        let mut c = small(ShiftConfig::none());
        c.test_per_id = 6;
        assert!(generate_dataset(&c, 0).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let ds = generate_dataset(&small(ShiftConfig::default()), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        let hr = dir.path().join(HR_FILE);
        let mut bytes = fs::read(&hr).unwrap();
        bytes[5] ^= 1;
        fs::write(&hr, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }
}
