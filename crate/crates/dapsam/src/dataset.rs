//! Synthetic multi-domain segmentation benchmark.
//!
//! Anatomy (smooth blobs, one or two foreground structures) is a function of
//! `(seed, sample index)` only, so every domain shares identical masks and
//! base intensities; the domain shift is applied to intensities afterwards:
//! contrast, then gamma, then a multiplicative low-frequency bias field, then
//! additive Gaussian noise, then clipping to `[0, 1]`. Intensities are
//! quantized through f32 at generation time so in-memory samples equal their
//! on-disk representation bit for bit.
//!
//! On-disk format:
//!   image  — magic `DAPD`, u8 version=1, u32 H, u32 W (LE), H*W f32 LE
//!   mask   — magic `DAPM`, u8 version=1, u32 H, u32 W (LE), H*W u8
//!   manifest.json — domains, per-domain file lists, config echo, seed

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const IMAGE_MAGIC: &[u8; 4] = b"DAPD";
const MASK_MAGIC: &[u8; 4] = b"DAPM";
const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Intensity exponent applied after contrast.
    pub gamma: f64,
    /// Amplitude of the smooth multiplicative bias field.
    pub bias_amp: f64,
    /// Additive Gaussian noise sigma.
    pub noise_std: f64,
    /// Linear contrast factor around 0.5.
    pub contrast: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("domain name must be nonempty".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config(format!("domain {}: gamma must be > 0", self.name)));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config(format!("domain {}: noise_std must be >= 0", self.name)));
        }
        Ok(())
    }
}

fn default_spacing() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub domains: Vec<DomainSpec>,
    pub samples_per_domain: usize,
    pub image_size: usize,
    /// Label count K including background.
    pub num_labels: usize,
    /// Pixel spacing (mm per pixel, row then column).
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 2],
}

impl SuiteConfig {
    /// Six-domain, two-label suite mirroring a prostate-style benchmark.
    pub fn prostate_style() -> Self {
        let d = |name: &str, gamma: f64, bias_amp: f64, noise_std: f64, contrast: f64| DomainSpec {
            name: name.into(),
            gamma,
            bias_amp,
            noise_std,
            contrast,
        };
        SuiteConfig {
            domains: vec![
                d("A", 1.0, 0.0, 0.02, 1.0),
                d("B", 0.55, 0.25, 0.05, 1.3),
                d("C", 2.0, 0.3, 0.06, 0.65),
                d("D", 0.8, 0.4, 0.1, 1.5),
                d("E", 1.5, 0.15, 0.14, 0.55),
                d("F", 2.4, 0.45, 0.04, 1.15),
            ],
            samples_per_domain: 50,
            image_size: 64,
            num_labels: 2,
            spacing: [1.0, 1.0],
        }
    }

    /// Five-domain, three-label suite mirroring a fundus-style benchmark
    /// (background / disc / cup analogue).
    pub fn fundus_style() -> Self {
        let d = |name: &str, gamma: f64, bias_amp: f64, noise_std: f64, contrast: f64| DomainSpec {
            name: name.into(),
            gamma,
            bias_amp,
            noise_std,
            contrast,
        };
        SuiteConfig {
            domains: vec![
                d("BinRushed", 1.0, 0.05, 0.02, 1.0),
                d("Magrabia", 0.7, 0.2, 0.05, 1.25),
                d("BASE1", 1.6, 0.3, 0.08, 0.7),
                d("BASE2", 0.9, 0.35, 0.12, 1.4),
                d("BASE3", 2.1, 0.2, 0.05, 0.8),
            ],
            samples_per_domain: 50,
            image_size: 64,
            num_labels: 3,
            spacing: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("suite needs at least one domain".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.domains {
            d.validate()?;
            if !seen.insert(&d.name) {
                return Err(Error::Config(format!("duplicate domain name {}", d.name)));
            }
        }
        if self.samples_per_domain == 0 {
            return Err(Error::Config("samples_per_domain must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if self.num_labels < 2 || self.num_labels > 256 {
            return Err(Error::Config("num_labels must be in [2, 256]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DomainSample {
    /// `(H, W)` intensities in `[0, 1]`.
    pub image: Tensor,
    /// Row-major labels in `[0, K)`.
    pub mask: Vec<u8>,
    pub domain: String,
    pub spacing: (f64, f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilePair {
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SuiteConfig,
    pub files: BTreeMap<String, Vec<FilePair>>,
}

#[derive(Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: BTreeMap<String, Vec<DomainSample>>,
}

impl Dataset {
    pub fn num_labels(&self) -> usize {
        self.manifest.config.num_labels
    }

    pub fn image_size(&self) -> usize {
        self.manifest.config.image_size
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.manifest.config.spacing[0], self.manifest.config.spacing[1])
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.samples.keys().cloned().collect()
    }
}

// ---------------------------------------------------------------------------
// anatomy
// ---------------------------------------------------------------------------

struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    amps: [f64; 3],
    phases: [f64; 3],
}

impl Blob {
    fn sample(rng: &mut ChaCha8Rng, size: f64, center_lo: f64, center_hi: f64, r_lo: f64, r_hi: f64, wobble: f64) -> Self {
        let cx = rng.gen_range(center_lo..center_hi) * size;
        let cy = rng.gen_range(center_lo..center_hi) * size;
        let r0 = rng.gen_range(r_lo..r_hi) * size;
        let mut amps = [0.0; 3];
        let mut phases = [0.0; 3];
        for k in 0..3 {
            amps[k] = rng.gen_range(-wobble..wobble);
            phases[k] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        Blob { cx, cy, r0, amps, phases }
    }

    fn scaled(&self, factor: f64) -> Blob {
        Blob {
            cx: self.cx,
            cy: self.cy,
            r0: self.r0 * factor,
            amps: self.amps,
            phases: self.phases,
        }
    }

    /// Distance to the wobbled boundary; negative inside.
    fn signed(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let dist = (dx * dx + dy * dy).sqrt();
        let theta = dy.atan2(dx);
        let mut r = 1.0;
        for k in 0..3 {
            r += self.amps[k] * ((k as f64 + 1.0) * theta + self.phases[k]).cos();
        }
        dist - self.r0 * r
    }
}

/// Low-frequency random field with values in `[-1, 1]`.
fn smooth_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    const WAVES: usize = 4;
    let mut amps = [0.0; WAVES];
    let mut us = [0.0; WAVES];
    let mut vs = [0.0; WAVES];
    let mut phases = [0.0; WAVES];
    let mut total = 0.0;
    for i in 0..WAVES {
        amps[i] = rng.gen_range(0.5..1.0);
        us[i] = rng.gen_range(-2.5..2.5);
        vs[i] = rng.gen_range(-2.5..2.5);
        phases[i] = rng.gen_range(0.0..std::f64::consts::TAU);
        total += amps[i];
    }
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let mut v = 0.0;
            for i in 0..WAVES {
                let arg = std::f64::consts::TAU
                    * (us[i] * c as f64 / size as f64 + vs[i] * r as f64 / size as f64)
                    + phases[i];
                v += amps[i] * arg.sin();
            }
            out[r * size + c] = v / total;
        }
    }
    out
}

fn smooth_edge(signed: f64) -> f64 {
    crate::math::sigmoid(-signed / 1.5)
}

struct Anatomy {
    base: Vec<f64>,
    mask: Vec<u8>,
}

/// Anatomy depends only on `(seed, index)`: identical for every domain.
fn generate_anatomy(seed: u64, index: usize, size: usize, num_labels: usize) -> Anatomy {
    let mut rng = rng::stream(seed, "anatomy", index as u64);
    let fsize = size as f64;

    let main = Blob::sample(&mut rng, fsize, 0.35, 0.65, 0.14, 0.24, 0.13);
    let inner = if num_labels >= 3 {
        let factor = rng.gen_range(0.45..0.62);
        Some(main.scaled(factor))
    } else {
        None
    };
    let second = if num_labels == 2 && rng.gen_bool(0.5) {
        Some(Blob::sample(&mut rng, fsize, 0.15, 0.85, 0.07, 0.12, 0.1))
    } else {
        None
    };
    let texture = smooth_field(&mut rng, size);

    let mut base = vec![0.0; size * size];
    let mut mask = vec![0u8; size * size];
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64, r as f64);
            let i = r * size + c;
            let s_main = main.signed(x, y);
            let mut v = 0.30 + 0.38 * smooth_edge(s_main) + 0.04 * texture[i];
            if s_main < 0.0 {
                mask[i] = 1;
            }
            if let Some(inner) = &inner {
                let s = inner.signed(x, y);
                v += 0.18 * smooth_edge(s);
                if s < 0.0 {
                    mask[i] = 2;
                }
            }
            if let Some(second) = &second {
                let s = second.signed(x, y);
                v += 0.38 * smooth_edge(s);
                if s < 0.0 {
                    mask[i] = 1;
                }
            }
            base[i] = v.clamp(0.0, 1.0);
        }
    }
    Anatomy { base, mask }
}

/// Intensity-only domain shift: contrast, gamma, multiplicative bias field,
/// additive noise, clip, f32 quantization.
fn apply_domain(base: &[f64], spec: &DomainSpec, seed: u64, index: usize, size: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, &format!("domain/{}", spec.name), index as u64);
    let field = smooth_field(&mut rng, size);
    let mut out = Vec::with_capacity(base.len());
    for (i, &v0) in base.iter().enumerate() {
        let mut v = 0.5 + (v0 - 0.5) * spec.contrast;
        v = v.clamp(0.0, 1.0).powf(spec.gamma);
        v *= 1.0 + spec.bias_amp * field[i];
        if spec.noise_std > 0.0 {
            v += spec.noise_std * rng::normal(&mut rng);
        }
        out.push((v.clamp(0.0, 1.0) as f32) as f64);
    }
    out
}

// ---------------------------------------------------------------------------
// file I/O
// ---------------------------------------------------------------------------

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::DataLoad {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_image_file(path: &Path, h: usize, w: usize, data: &[f64]) -> Result<()> {
    debug_assert_eq!(data.len(), h * w);
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(IMAGE_MAGIC)?;
    out.write_all(&[FORMAT_VERSION])?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    for &v in data {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_image_file(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut file = BufReader::new(File::open(path).map_err(|e| load_err(path, e.to_string()))?);
    let mut header = [0u8; 13];
    file.read_exact(&mut header)
        .map_err(|_| load_err(path, "truncated header"))?;
    if &header[0..4] != IMAGE_MAGIC {
        return Err(load_err(path, "bad magic (expected DAPD)"));
    }
    if header[4] != FORMAT_VERSION {
        return Err(load_err(path, format!("unsupported version {}", header[4])));
    }
    let h = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
    let mut bytes = vec![0u8; h * w * 4];
    file.read_exact(&mut bytes)
        .map_err(|_| load_err(path, "truncated pixel data"))?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(load_err(path, "trailing bytes after pixel data"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((h, w, data))
}

pub fn write_mask_file(path: &Path, h: usize, w: usize, data: &[u8]) -> Result<()> {
    debug_assert_eq!(data.len(), h * w);
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MASK_MAGIC)?;
    out.write_all(&[FORMAT_VERSION])?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(data)?;
    Ok(())
}

pub fn read_mask_file(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut file = BufReader::new(File::open(path).map_err(|e| load_err(path, e.to_string()))?);
    let mut header = [0u8; 13];
    file.read_exact(&mut header)
        .map_err(|_| load_err(path, "truncated header"))?;
    if &header[0..4] != MASK_MAGIC {
        return Err(load_err(path, "bad magic (expected DAPM)"));
    }
    if header[4] != FORMAT_VERSION {
        return Err(load_err(path, format!("unsupported version {}", header[4])));
    }
    let h = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
    let mut data = vec![0u8; h * w];
    file.read_exact(&mut data)
        .map_err(|_| load_err(path, "truncated label data"))?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(load_err(path, "trailing bytes after label data"));
    }
    Ok((h, w, data))
}

// ---------------------------------------------------------------------------
// generation / loading / splits
// ---------------------------------------------------------------------------

pub fn generate_domain_suite(
    config: &SuiteConfig,
    seed: u64,
    out_dir: &Path,
    overwrite: bool,
) -> Result<Manifest> {
    config.validate()?;
    if out_dir.exists() {
        let non_empty = out_dir.read_dir()?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::invalid(format!(
                    "output directory {} is not empty (pass overwrite to replace)",
                    out_dir.display()
                )));
            }
            std::fs::remove_dir_all(out_dir)?;
        }
    }
    std::fs::create_dir_all(out_dir)?;

    let size = config.image_size;
    let mut files: BTreeMap<String, Vec<FilePair>> = BTreeMap::new();
    for spec in &config.domains {
        let domain_dir = out_dir.join(&spec.name);
        std::fs::create_dir_all(&domain_dir)?;
        let mut pairs = Vec::with_capacity(config.samples_per_domain);
        for index in 0..config.samples_per_domain {
            let anatomy = generate_anatomy(seed, index, size, config.num_labels);
            let image = apply_domain(&anatomy.base, spec, seed, index, size);
            let image_rel = format!("{}/img_{index:03}.dapd", spec.name);
            let mask_rel = format!("{}/msk_{index:03}.dapm", spec.name);
            write_image_file(&out_dir.join(&image_rel), size, size, &image)?;
            write_mask_file(&out_dir.join(&mask_rel), size, size, &anatomy.mask)?;
            pairs.push(FilePair {
                image: image_rel,
                mask: mask_rel,
            });
        }
        files.insert(spec.name.clone(), pairs);
    }

    let manifest = Manifest {
        seed,
        config: config.clone(),
        files,
    };
    let mut mf = BufWriter::new(File::create(out_dir.join("manifest.json"))?);
    mf.write_all(&serde_json::to_vec_pretty(&manifest)?)?;
    mf.write_all(b"\n")?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_reader(BufReader::new(
        File::open(&manifest_path).map_err(|e| load_err(&manifest_path, e.to_string()))?,
    ))?;
    manifest.config.validate()?;

    let size = manifest.config.image_size;
    let k = manifest.config.num_labels;
    let spacing = (manifest.config.spacing[0], manifest.config.spacing[1]);
    let mut samples: BTreeMap<String, Vec<DomainSample>> = BTreeMap::new();
    for (domain, pairs) in &manifest.files {
        let mut list = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let image_path = dir.join(&pair.image);
            let (h, w, data) = read_image_file(&image_path)?;
            if h != size || w != size {
                return Err(load_err(
                    &image_path,
                    format!("image is {h}x{w}, manifest says {size}x{size}"),
                ));
            }
            if data.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
                return Err(load_err(&image_path, "intensity outside [0, 1]"));
            }
            let mask_path = dir.join(&pair.mask);
            let (mh, mw, mask) = read_mask_file(&mask_path)?;
            if mh != size || mw != size {
                return Err(load_err(
                    &mask_path,
                    format!("mask is {mh}x{mw}, manifest says {size}x{size}"),
                ));
            }
            if let Some(bad) = mask.iter().find(|&&l| l as usize >= k) {
                return Err(load_err(&mask_path, format!("label {bad} out of range for K={k}")));
            }
            list.push(DomainSample {
                image: Tensor::new(vec![size, size], data)?,
                mask,
                domain: domain.clone(),
                spacing,
            });
        }
        samples.insert(domain.clone(), list);
    }
    Ok(Dataset { manifest, samples })
}

/// Train on one domain, test on each remaining domain separately.
pub fn leave_one_out_splits<'a>(
    dataset: &'a Dataset,
    train_domain: &str,
) -> Result<(&'a [DomainSample], Vec<(&'a str, &'a [DomainSample])>)> {
    let train = dataset
        .samples
        .get(train_domain)
        .ok_or_else(|| Error::Inventory(format!("unknown train domain {train_domain}")))?;
    let tests = dataset
        .samples
        .iter()
        .filter(|(name, _)| name.as_str() != train_domain)
        .map(|(name, s)| (name.as_str(), s.as_slice()))
        .collect();
    Ok((train, tests))
}

/// Stack samples into a `(B, H, W, 1)` image tensor and flat label vector.
pub fn batch_tensor(samples: &[&DomainSample]) -> (Tensor, Vec<u8>) {
    assert!(!samples.is_empty());
    let h = samples[0].image.shape()[0];
    let w = samples[0].image.shape()[1];
    let mut data = Vec::with_capacity(samples.len() * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask);
    }
    (
        Tensor::new(vec![samples.len(), h, w, 1], data).unwrap(),
        labels,
    )
}
