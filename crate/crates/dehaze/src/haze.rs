//! Synthetic haze generation via the atmospheric scattering model
//! `I = J*t + A*(1 - t)`, `t = exp(-beta * d)`, plus procedural test
//! scenes and dataset manifests with disjoint train/test sources.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{DehazeError, Result};
use crate::image::{crop_offsets, ImageArray};
use crate::seeds::subseed;
use crate::tensor::Element;

/// `t = exp(-beta * d)` elementwise; `d >= 0`, `beta >= 0`.
pub fn transmission_from_depth<El: Element>(
    depth: &Array2<El>,
    beta: f64,
) -> Result<Array2<El>> {
    if beta < 0.0 {
        return Err(DehazeError::invalid("scattering beta must be non-negative"));
    }
    if depth.iter().any(|&d| d < El::zero()) {
        return Err(DehazeError::invalid("depth must be non-negative"));
    }
    let b = El::of(beta);
    Ok(depth.mapv(|d| (-b * d).exp()))
}

/// Composite haze onto a clear image: per pixel `I = J*t + A*(1-t)`.
pub fn apply_haze<El: Element>(
    clear: &ImageArray<El>,
    t: &Array2<El>,
    a: f64,
) -> Result<ImageArray<El>> {
    let (h, w, c) = clear.data().dim();
    if t.dim() != (h, w) {
        return Err(DehazeError::invalid("transmission map shape mismatch"));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(DehazeError::invalid("atmospheric light must lie in [0,1]"));
    }
    let av = El::of(a);
    let one = El::one();
    let data = ndarray::Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        let tv = t[[i, j]];
        clear.data()[[i, j, k]] * tv + av * (one - tv)
    });
    ImageArray::new(data)
}

/// Recover `J = (I - A*(1-t)) / t`. Only meaningful where `t` is not tiny.
pub fn invert_haze<El: Element>(
    hazy: &ImageArray<El>,
    t: &Array2<El>,
    a: f64,
) -> Result<ImageArray<El>> {
    let (h, w, c) = hazy.data().dim();
    if t.dim() != (h, w) {
        return Err(DehazeError::invalid("transmission map shape mismatch"));
    }
    let av = El::of(a);
    let one = El::one();
    let data = ndarray::Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        let tv = t[[i, j]];
        (hazy.data()[[i, j, k]] - av * (one - tv)) / tv
    });
    ImageArray::new(data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    Ramp,
    Steps,
    Radial,
}

impl SceneKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(SceneKind::Ramp),
            "steps" => Ok(SceneKind::Steps),
            "radial" => Ok(SceneKind::Radial),
            other => Err(DehazeError::invalid(format!("unknown scene kind `{other}`"))),
        }
    }

    pub const ALL: [SceneKind; 3] = [SceneKind::Ramp, SceneKind::Steps, SceneKind::Radial];
}

/// Deterministic synthetic clear image and matching depth field in `[0, 1]`.
pub fn make_procedural_scene<El: Element>(
    kind: SceneKind,
    size: usize,
) -> Result<(ImageArray<El>, Array2<El>)> {
    make_scene_variant(kind, size, 0)
}

/// Variant index shifts colors and texture so a directory of distinct
/// scenes can be generated from the same three depth families.
pub fn make_scene_variant<El: Element>(
    kind: SceneKind,
    size: usize,
    variant: u64,
) -> Result<(ImageArray<El>, Array2<El>)> {
    if size < 32 {
        return Err(DehazeError::invalid("scene size must be at least 32"));
    }
    let n = size as f64;
    let phase = (variant as f64) * 0.618_033_988_749_895 % 1.0;
    let img = ImageArray::from_fn(size, size, 3, |i, j, c| {
        let y = i as f64 / (n - 1.0);
        let x = j as f64 / (n - 1.0);
        let checker = if ((i / 8) + (j / 8)) % 2 == 0 { 0.12 } else { -0.12 };
        let base = match c {
            0 => 0.5 + 0.4 * (std::f64::consts::TAU * (x + phase)).sin(),
            1 => 0.5 + 0.4 * (std::f64::consts::TAU * (y + 0.33 + phase)).cos(),
            _ => 0.5 + 0.4 * (std::f64::consts::TAU * (0.7 * x + 0.3 * y + 2.0 * phase)).sin(),
        };
        (base + checker).clamp(0.0, 1.0)
    })?;
    let depth = Array2::from_shape_fn((size, size), |(i, j)| {
        let y = i as f64 / (n - 1.0);
        let x = j as f64 / (n - 1.0);
        let d = match kind {
            SceneKind::Ramp => x,
            SceneKind::Steps => (4.0 * x).floor().min(3.0) / 3.0,
            SceneKind::Radial => {
                let dy = y - 0.5;
                let dx = x - 0.5;
                (dy * dy + dx * dx).sqrt() / (0.5f64 * std::f64::consts::SQRT_2)
            }
        };
        El::of(d.clamp(0.0, 1.0))
    });
    Ok((img, depth))
}

/// Raw depth container: header of three little-endian u32 (H, W,
/// element-size in bytes), then row-major f32/f64 little-endian data.
pub fn write_depth_raw(depth: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = depth.dim();
    let mut buf = Vec::with_capacity(12 + h * w * 8);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&8u32.to_le_bytes());
    for v in depth.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| DehazeError::io(path.display().to_string(), e))
}

pub fn read_depth_raw(path: &Path) -> Result<Array2<f64>> {
    let mut f =
        fs::File::open(path).map_err(|e| DehazeError::io(path.display().to_string(), e))?;
    let mut header = [0u8; 12];
    f.read_exact(&mut header)
        .map_err(|e| DehazeError::io(path.display().to_string(), e))?;
    let h = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let esize = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if esize != 4 && esize != 8 {
        return Err(DehazeError::invalid(format!(
            "unsupported depth element size {esize}"
        )));
    }
    let mut data = Vec::new();
    f.read_to_end(&mut data)
        .map_err(|e| DehazeError::io(path.display().to_string(), e))?;
    if data.len() != h * w * esize {
        return Err(DehazeError::invalid("depth payload size mismatch"));
    }
    let vals: Vec<f64> = data
        .chunks_exact(esize)
        .map(|c| {
            if esize == 8 {
                f64::from_le_bytes(c.try_into().unwrap())
            } else {
                f32::from_le_bytes(c.try_into().unwrap()) as f64
            }
        })
        .collect();
    Array2::from_shape_vec((h, w), vals).map_err(|_| DehazeError::invalid("bad depth shape"))
}

/// 16-bit grayscale PNG depth, normalized by 65535.
pub fn write_depth_png16(depth: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = depth.dim();
    let buf: Vec<u16> = depth
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer size");
    img.save(path).map_err(|e| DehazeError::Image {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_depth_png16(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| DehazeError::Image {
        path: path.display().to_string(),
        source: e,
    })?;
    let lum = img.to_luma16();
    let (w, h) = lum.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        lum.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0
    }))
}

pub fn read_depth(path: &Path) -> Result<Array2<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("raw") => read_depth_raw(path),
        _ => read_depth_png16(path),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DehazeError::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestRecord {
    pub split: Split,
    pub clear_path: PathBuf,
    pub hazy_path: PathBuf,
    pub atmospheric_light: f64,
    pub beta: f64,
    pub seed: u64,
    pub source_id: String,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Per-record synthesis failures (source id, reason).
    pub failures: Vec<(String, String)>,
}

impl DatasetManifest {
    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn source_ids(&self, split: Split) -> BTreeSet<&str> {
        self.split_records(split)
            .map(|r| r.source_id.as_str())
            .collect()
    }

    pub fn splits_disjoint(&self) -> bool {
        let train = self.source_ids(Split::Train);
        let test = self.source_ids(Split::Test);
        train.intersection(&test).next().is_none()
    }

    /// One record per line: split, clear path, hazy path, A, beta, seed, source id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                r.split.as_str(),
                r.clear_path.display(),
                r.hazy_path.display(),
                r.atmospheric_light,
                r.beta,
                r.seed,
                r.source_id
            ));
        }
        for (id, reason) in &self.failures {
            s.push_str(&format!("# failure {id} {reason}\n"));
        }
        let mut f =
            fs::File::create(path).map_err(|e| DehazeError::io(path.display().to_string(), e))?;
        f.write_all(s.as_bytes())
            .map_err(|e| DehazeError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| DehazeError::io(path.display().to_string(), e))?;
        let mut manifest = DatasetManifest::default();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 7 {
                return Err(DehazeError::invalid(format!(
                    "manifest line {} has {} fields, expected 7",
                    ln + 1,
                    fields.len()
                )));
            }
            manifest.records.push(ManifestRecord {
                split: Split::parse(fields[0])?,
                clear_path: PathBuf::from(fields[1]),
                hazy_path: PathBuf::from(fields[2]),
                atmospheric_light: fields[3]
                    .parse()
                    .map_err(|_| DehazeError::invalid("bad A field"))?,
                beta: fields[4]
                    .parse()
                    .map_err(|_| DehazeError::invalid("bad beta field"))?,
                seed: fields[5]
                    .parse()
                    .map_err(|_| DehazeError::invalid("bad seed field"))?,
                source_id: fields[6].to_string(),
            });
        }
        Ok(manifest)
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisConfig {
    pub source_dir: PathBuf,
    pub out_dir: PathBuf,
    pub train_count: usize,
    pub test_count: usize,
    /// Uniform sampling range for atmospheric light A.
    pub a_range: (f64, f64),
    pub beta_train: (f64, f64),
    pub beta_test: (f64, f64),
    pub crop_size: usize,
    /// Fraction of sorted source ids assigned to the train partition.
    pub train_fraction: f64,
    pub seed: u64,
}

impl SynthesisConfig {
    pub fn new(source_dir: PathBuf, out_dir: PathBuf) -> Self {
        SynthesisConfig {
            source_dir,
            out_dir,
            train_count: 8,
            test_count: 2,
            a_range: (0.6, 1.0),
            beta_train: (0.8, 1.6),
            beta_test: (1.0, 1.6),
            crop_size: 256,
            train_fraction: 0.8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_range = |name: &str, (lo, hi): (f64, f64)| {
            if lo > hi {
                Err(DehazeError::config(format!("{name} range has min > max")))
            } else {
                Ok(())
            }
        };
        check_range("A", self.a_range)?;
        check_range("beta (train)", self.beta_train)?;
        check_range("beta (test)", self.beta_test)?;
        if self.a_range.0 < 0.0 || self.a_range.1 > 1.0 {
            return Err(DehazeError::config("A range must lie within [0,1]"));
        }
        if self.crop_size == 0 {
            return Err(DehazeError::config("crop size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(DehazeError::config("train fraction must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Source image plus depth, discovered as `<id>_clear.png` with
/// `<id>_depth.png` (16-bit) or `<id>_depth.raw` alongside.
struct Source {
    id: String,
    clear: PathBuf,
    depth: Option<PathBuf>,
}

fn scan_sources(dir: &Path) -> Result<Vec<Source>> {
    let mut sources = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| DehazeError::io(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| DehazeError::io(dir.display().to_string(), e))?;
        let path = entry.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n.to_string(),
            None => continue,
        };
        if let Some(id) = name.strip_suffix("_clear.png") {
            let depth_png = dir.join(format!("{id}_depth.png"));
            let depth_raw = dir.join(format!("{id}_depth.raw"));
            let depth = if depth_png.exists() {
                Some(depth_png)
            } else if depth_raw.exists() {
                Some(depth_raw)
            } else {
                None
            };
            sources.push(Source {
                id: id.to_string(),
                clear: path,
                depth,
            });
        }
    }
    sources.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(sources)
}

fn normalize_depth(mut d: Array2<f64>) -> Array2<f64> {
    let max = d.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        d.mapv_inplace(|v| v / max);
    }
    d
}

/// Synthesize hazy/clear pairs and a manifest. Train and test records draw
/// from disjoint partitions of the sorted source ids.
pub fn build_dataset(config: &SynthesisConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let sources = scan_sources(&config.source_dir)?;
    let mut failures: Vec<(String, String)> = Vec::new();
    let usable: Vec<&Source> = sources
        .iter()
        .filter(|s| {
            if s.depth.is_none() {
                failures.push((s.id.clone(), "missing depth map".to_string()));
                false
            } else {
                true
            }
        })
        .collect();

    let n = usable.len();
    let n_train = ((n as f64) * config.train_fraction).round() as usize;
    let (train_sources, test_sources) = usable.split_at(n_train.min(n));
    if config.train_count > 0 && train_sources.is_empty() {
        return Err(DehazeError::config("no source images for the train split"));
    }
    if config.test_count > 0 && test_sources.is_empty() {
        return Err(DehazeError::config(
            "no source images left for the test split (all assigned to train)",
        ));
    }

    let train_dir = config.out_dir.join("train");
    let test_dir = config.out_dir.join("test");
    for d in [&train_dir, &test_dir] {
        fs::create_dir_all(d).map_err(|e| DehazeError::io(d.display().to_string(), e))?;
    }

    let mut manifest = DatasetManifest {
        failures,
        ..Default::default()
    };
    let jobs = [
        (Split::Train, config.train_count, train_sources, config.beta_train, &train_dir),
        (Split::Test, config.test_count, test_sources, config.beta_test, &test_dir),
    ];
    for (split, count, pool, beta_range, dir) in jobs {
        for k in 0..count {
            let rec_seed = subseed(config.seed, &format!("synthesize-{}", split.as_str()), k as u64);
            let mut rng = ChaCha20Rng::seed_from_u64(rec_seed);
            let src = pool[rng.gen_range(0..pool.len())];
            let a = sample_range(&mut rng, config.a_range);
            let beta = sample_range(&mut rng, beta_range);
            let crop_seed: u64 = rng.gen();

            let clear_full = match ImageArray::<f64>::load(&src.clear) {
                Ok(i) => i,
                Err(e) => {
                    manifest.failures.push((src.id.clone(), e.to_string()));
                    continue;
                }
            };
            let depth_full = match read_depth(src.depth.as_ref().unwrap()) {
                Ok(d) => normalize_depth(d),
                Err(e) => {
                    manifest.failures.push((src.id.clone(), e.to_string()));
                    continue;
                }
            };
            if depth_full.dim() != (clear_full.height(), clear_full.width()) {
                manifest
                    .failures
                    .push((src.id.clone(), "depth/clear shape mismatch".to_string()));
                continue;
            }
            let (oy, ox) = match crop_offsets(
                clear_full.height(),
                clear_full.width(),
                config.crop_size,
                crop_seed,
            ) {
                Ok(o) => o,
                Err(e) => {
                    manifest.failures.push((src.id.clone(), e.to_string()));
                    continue;
                }
            };
            let clear = clear_full.crop_at(oy, ox, config.crop_size)?;
            let depth = depth_full
                .slice(ndarray::s![oy..oy + config.crop_size, ox..ox + config.crop_size])
                .to_owned();
            let t = transmission_from_depth(&depth, beta)?;
            let hazy = apply_haze(&clear, &t, a)?;

            let clear_path = dir.join(format!("rec_{k:05}_clear.png"));
            let hazy_path = dir.join(format!("rec_{k:05}_hazy.png"));
            clear.save_png(&clear_path)?;
            hazy.save_png(&hazy_path)?;
            manifest.records.push(ManifestRecord {
                split,
                clear_path,
                hazy_path,
                atmospheric_light: a,
                beta,
                seed: rec_seed,
                source_id: src.id.clone(),
            });
        }
    }
    Ok(manifest)
}

fn sample_range(rng: &mut ChaCha20Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Populate a directory with deterministic procedural scenes.
pub fn write_procedural_sources(dir: &Path, count: usize, size: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DehazeError::io(dir.display().to_string(), e))?;
    for v in 0..count {
        let kind = SceneKind::ALL[v % SceneKind::ALL.len()];
        let (img, depth) = make_scene_variant::<f64>(kind, size, v as u64)?;
        img.save_png(&dir.join(format!("scene{v:03}_clear.png")))?;
        write_depth_png16(&depth, &dir.join(format!("scene{v:03}_depth.png")))?;
    }
    Ok(())
}
