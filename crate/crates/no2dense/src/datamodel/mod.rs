//! On-disk and in-memory representation of annotated scenes, dataset
//! manifests, splits, and normalization statistics.
//!
//! A sample container is one directory per scene: a `meta.json` sidecar plus
//! raw little-endian planes (`s2.raw`, `s5p.raw`, and an optional `lc.raw`
//! land-cover mask). Everything here is plain files so containers can be
//! produced and consumed from any language.

mod synth;

pub use synth::{generate_synthetic, generate_synthetic_with, SynthOptions, SyntheticGenerator};

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of a scene in pixels.
pub const SCENE_SIZE: usize = 200;
/// Number of reflectance bands in a scene.
pub const S2_BANDS: usize = 12;
/// Reflectance bands plus the trace-gas plane.
pub const INPUT_CHANNELS: usize = 13;
/// Number of land-cover classes.
pub const NUM_CLASSES: usize = 11;
/// Pixel (row, col) holding the station measurement, 0-indexed. A 200-pixel
/// grid has no exact center; this convention is fixed once and shared by the
/// sampler.
pub const CENTER_PIXEL: (usize, usize) = (100, 100);

/// A 200x200 multi-band raster stack with one point measurement at
/// [`CENTER_PIXEL`].
#[derive(Debug, Clone)]
pub struct AnnotatedScene {
    /// Top-of-atmosphere reflectance, shape (12, 200, 200).
    pub s2_bands: Array3<f32>,
    /// Tropospheric NO2 column proxy interpolated to the 10 m grid,
    /// shape (1, 200, 200).
    pub s5p_plane: Array3<f32>,
    /// Per-pixel land-cover class in `[0, 10]`, absent when the mask file
    /// is missing from the container.
    pub landcover: Option<Array2<u8>>,
    /// Ground-level NO2 concentration in ug/m3.
    pub no2_value: f32,
    pub station_id: String,
    pub lon: f64,
    pub lat: f64,
    pub region_tag: String,
}

impl AnnotatedScene {
    /// Checks all scene invariants, naming the offending plane on failure.
    pub fn validate(&self) -> Result<()> {
        let sd = self.s2_bands.dim();
        if sd != (S2_BANDS, SCENE_SIZE, SCENE_SIZE) {
            return Err(Error::Validation {
                plane: "s2_bands".into(),
                msg: format!("expected ({S2_BANDS}, {SCENE_SIZE}, {SCENE_SIZE}), got {sd:?}"),
            });
        }
        let pd = self.s5p_plane.dim();
        if pd != (1, SCENE_SIZE, SCENE_SIZE) {
            return Err(Error::Validation {
                plane: "s5p_plane".into(),
                msg: format!("expected (1, {SCENE_SIZE}, {SCENE_SIZE}), got {pd:?}"),
            });
        }
        if let Some(lc) = &self.landcover {
            if lc.dim() != (SCENE_SIZE, SCENE_SIZE) {
                return Err(Error::Validation {
                    plane: "landcover".into(),
                    msg: format!("expected ({SCENE_SIZE}, {SCENE_SIZE}), got {:?}", lc.dim()),
                });
            }
            if let Some(&bad) = lc.iter().find(|&&v| v as usize >= NUM_CLASSES) {
                return Err(Error::Validation {
                    plane: "landcover".into(),
                    msg: format!("class id {bad} outside [0, {}]", NUM_CLASSES - 1),
                });
            }
        }
        if !self.no2_value.is_finite() || self.no2_value < 0.0 {
            return Err(Error::Validation {
                plane: "no2_value".into(),
                msg: format!("must be finite and >= 0, got {}", self.no2_value),
            });
        }
        Ok(())
    }
}

// ── Sample container I/O ─────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct PlaneMeta {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    station_id: String,
    lon: f64,
    lat: f64,
    region_tag: String,
    no2_value: f32,
    planes: Vec<PlaneMeta>,
}

fn read_f32_plane(path: &Path, len: usize) -> Result<Vec<f32>> {
    let file = fs::File::open(path)?;
    let meta_len = file.metadata()?.len();
    if meta_len != (len * 4) as u64 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected {} bytes, found {meta_len}", len * 4),
        });
    }
    let mut reader = BufReader::new(file);
    let mut buf = vec![0f32; len];
    reader.read_f32_into::<LittleEndian>(&mut buf)?;
    Ok(buf)
}

fn write_f32_plane(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = vec![0u8; data.len() * 4];
    LittleEndian::write_f32_into(data, &mut bytes);
    let mut writer = BufWriter::new(fs::File::create(path)?);
    writer.write_all(&bytes)?;
    Ok(())
}

/// Loads a sample container directory into a validated [`AnnotatedScene`].
///
/// The land-cover plane is optional: a container that does not list it, or
/// lists it but lacks the file, yields `landcover: None`.
pub fn load_scene(dir: &Path) -> Result<AnnotatedScene> {
    let meta_path = dir.join("meta.json");
    let meta: SampleMeta = serde_json::from_reader(BufReader::new(
        fs::File::open(&meta_path).map_err(|e| Error::Format {
            path: meta_path.clone(),
            msg: format!("cannot open meta.json: {e}"),
        })?,
    ))
    .map_err(|e| Error::Format {
        path: meta_path.clone(),
        msg: format!("malformed meta.json: {e}"),
    })?;

    let mut s2 = None;
    let mut s5p = None;
    let mut lc = None;
    for plane in &meta.planes {
        let path = dir.join(&plane.file);
        match plane.name.as_str() {
            "s2_bands" => {
                let shape = parse_shape3(&plane.shape, &plane.name)?;
                expect_shape(&plane.shape, &[S2_BANDS, SCENE_SIZE, SCENE_SIZE], "s2_bands")?;
                let data = read_f32_plane(&path, shape.0 * shape.1 * shape.2)?;
                s2 = Some(Array3::from_shape_vec(shape, data).expect("shape checked"));
            }
            "s5p_plane" => {
                let shape = parse_shape3(&plane.shape, &plane.name)?;
                expect_shape(&plane.shape, &[1, SCENE_SIZE, SCENE_SIZE], "s5p_plane")?;
                let data = read_f32_plane(&path, shape.0 * shape.1 * shape.2)?;
                s5p = Some(Array3::from_shape_vec(shape, data).expect("shape checked"));
            }
            "landcover" => {
                if !path.exists() {
                    continue; // declared but missing: treat as absent
                }
                expect_shape(&plane.shape, &[SCENE_SIZE, SCENE_SIZE], "landcover")?;
                let (h, w) = (plane.shape[0], plane.shape[1]);
                let mut buf = vec![0u8; h * w];
                fs::File::open(&path)?.read_exact(&mut buf)?;
                lc = Some(Array2::from_shape_vec((h, w), buf).expect("shape checked"));
            }
            other => {
                return Err(Error::Format {
                    path: meta_path.clone(),
                    msg: format!("unknown plane name {other:?}"),
                })
            }
        }
    }

    let scene = AnnotatedScene {
        s2_bands: s2.ok_or_else(|| Error::Format {
            path: meta_path.clone(),
            msg: "missing s2_bands plane".into(),
        })?,
        s5p_plane: s5p.ok_or_else(|| Error::Format {
            path: meta_path,
            msg: "missing s5p_plane plane".into(),
        })?,
        landcover: lc,
        no2_value: meta.no2_value,
        station_id: meta.station_id,
        lon: meta.lon,
        lat: meta.lat,
        region_tag: meta.region_tag,
    };
    scene.validate()?;
    Ok(scene)
}

fn parse_shape3(shape: &[usize], plane: &str) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::Validation {
            plane: plane.into(),
            msg: format!("expected 3-d shape, got {shape:?}"),
        });
    }
    Ok((shape[0], shape[1], shape[2]))
}

fn expect_shape(shape: &[usize], want: &[usize], plane: &str) -> Result<()> {
    if shape != want {
        return Err(Error::Validation {
            plane: plane.into(),
            msg: format!("expected shape {want:?}, got {shape:?}"),
        });
    }
    Ok(())
}

/// Writes a scene as a sample container directory. Byte-deterministic: the
/// same scene always serializes to identical files.
pub fn save_scene(scene: &AnnotatedScene, dir: &Path) -> Result<()> {
    scene.validate()?;
    fs::create_dir_all(dir)?;
    let mut planes = vec![
        PlaneMeta {
            name: "s2_bands".into(),
            dtype: "f32le".into(),
            shape: vec![S2_BANDS, SCENE_SIZE, SCENE_SIZE],
            file: "s2.raw".into(),
        },
        PlaneMeta {
            name: "s5p_plane".into(),
            dtype: "f32le".into(),
            shape: vec![1, SCENE_SIZE, SCENE_SIZE],
            file: "s5p.raw".into(),
        },
    ];
    if scene.landcover.is_some() {
        planes.push(PlaneMeta {
            name: "landcover".into(),
            dtype: "u8".into(),
            shape: vec![SCENE_SIZE, SCENE_SIZE],
            file: "lc.raw".into(),
        });
    }
    let meta = SampleMeta {
        station_id: scene.station_id.clone(),
        lon: scene.lon,
        lat: scene.lat,
        region_tag: scene.region_tag.clone(),
        no2_value: scene.no2_value,
        planes,
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    fs::write(dir.join("meta.json"), json)?;

    write_f32_plane(
        &dir.join("s2.raw"),
        scene.s2_bands.as_standard_layout().as_slice().expect("contiguous"),
    )?;
    write_f32_plane(
        &dir.join("s5p.raw"),
        scene.s5p_plane.as_standard_layout().as_slice().expect("contiguous"),
    )?;
    if let Some(lc) = &scene.landcover {
        fs::write(
            dir.join("lc.raw"),
            lc.as_standard_layout().as_slice().expect("contiguous"),
        )?;
    }
    Ok(())
}

// ── Manifest and splits ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_path: PathBuf,
    pub station_id: String,
    pub region_tag: String,
    pub split: Option<Split>,
}

/// A lightweight reference to a sample on disk, used as split input.
#[derive(Debug, Clone)]
pub struct SampleRef {
    pub sample_path: PathBuf,
    pub station_id: String,
    pub region_tag: String,
    pub has_landcover: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub normalization_stats_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticGenerator>,
    pub samples: Vec<ManifestEntry>,
    /// Directory that sample paths are relative to. Not serialized; set on
    /// load from the manifest file's location.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut manifest: DatasetManifest =
            serde_json::from_reader(BufReader::new(fs::File::open(path)?))?;
        manifest.root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(path, json)?;
        Ok(())
    }

    /// Absolute path of a sample directory.
    pub fn sample_dir(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.sample_path.is_absolute() {
            entry.sample_path.clone()
        } else {
            self.root.join(&entry.sample_path)
        }
    }

    pub fn stats_path(&self) -> Option<PathBuf> {
        self.normalization_stats_path.as_ref().map(|p| {
            if p.is_absolute() {
                p.clone()
            } else {
                self.root.join(p)
            }
        })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == Some(split))
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.entries(Split::Train).count(),
            self.entries(Split::Val).count(),
            self.entries(Split::Test).count(),
        )
    }
}

/// Scans a dataset directory for sample containers, sorted by directory name.
pub fn scan_dataset_dir(dir: &Path) -> Result<Vec<SampleRef>> {
    let mut refs = Vec::new();
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("meta.json").exists())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let meta: SampleMeta =
            serde_json::from_reader(BufReader::new(fs::File::open(sub.join("meta.json"))?))?;
        let has_landcover = meta
            .planes
            .iter()
            .any(|p| p.name == "landcover" && sub.join(&p.file).exists());
        let rel = sub.strip_prefix(dir).unwrap_or(&sub).to_path_buf();
        refs.push(SampleRef {
            sample_path: rel,
            station_id: meta.station_id,
            region_tag: meta.region_tag,
            has_landcover,
        });
    }
    Ok(refs)
}

/// Split sizes for `n` samples under the 70/15/15 rule: val rounds half up,
/// test rounds half down, train takes the remainder. This reproduces both
/// 2871 -> 2009/431/431 and 10 -> 7/2/1.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let val = (15 * n + 50) / 100;
    let test = (15 * n + 49) / 100;
    (n - val - test, val, test)
}

/// Deterministically partitions samples into train/val/test.
///
/// Samples without a land-cover mask are excluded first. The remaining refs
/// are order-normalized by station id, shuffled under `seed`, and assigned
/// 70/15/15 by [`split_counts`].
pub fn split_dataset(samples: &[SampleRef], seed: u64) -> Result<DatasetManifest> {
    let mut complete: Vec<&SampleRef> = samples.iter().filter(|s| s.has_landcover).collect();
    if complete.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "need at least 10 complete samples to split, found {}",
            complete.len()
        )));
    }
    complete.sort_by(|a, b| a.station_id.cmp(&b.station_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    complete.shuffle(&mut rng);

    let (n_train, n_val, _n_test) = split_counts(complete.len());
    let samples = complete
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            ManifestEntry {
                sample_path: s.sample_path.clone(),
                station_id: s.station_id.clone(),
                region_tag: s.region_tag.clone(),
                split: Some(split),
            }
        })
        .collect();

    Ok(DatasetManifest {
        seed,
        normalization_stats_path: None,
        generator: None,
        samples,
        root: PathBuf::new(),
    })
}

// ── Normalization statistics ─────────────────────────────────────────────────

/// Per-channel and target z-score statistics, computed on the train split
/// only. Stds use the population convention (divide by N), recorded in
/// `std_convention` so checkpoints are self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub channel_mean: Vec<f32>,
    pub channel_std: Vec<f32>,
    pub target_mean: f32,
    pub target_std: f32,
    pub std_convention: String,
}

impl NormStats {
    pub fn load(path: &Path) -> Result<Self> {
        let stats: NormStats = serde_json::from_reader(BufReader::new(fs::File::open(path)?))?;
        stats.validate()?;
        Ok(stats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(path, json)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mean.len() != INPUT_CHANNELS || self.channel_std.len() != INPUT_CHANNELS {
            return Err(Error::Config(format!(
                "normalization stats must cover {INPUT_CHANNELS} channels"
            )));
        }
        if self.channel_std.iter().any(|&s| !(s > 0.0)) || !(self.target_std > 0.0) {
            return Err(Error::Config("normalization stds must be positive".into()));
        }
        Ok(())
    }

    pub fn normalize_target(&self, y: f32) -> f32 {
        (y - self.target_mean) / self.target_std
    }

    pub fn denormalize_target(&self, y_norm: f32) -> f32 {
        y_norm * self.target_std + self.target_mean
    }
}

/// Name of input channel `c` as used in error messages and reports.
pub fn channel_name(c: usize) -> String {
    if c < S2_BANDS {
        format!("s2_band_{c}")
    } else {
        "s5p".to_string()
    }
}

/// Computes per-channel and target normalization statistics over the train
/// split of `manifest`. Any channel with zero variance is an error.
pub fn compute_norm_stats(manifest: &DatasetManifest) -> Result<NormStats> {
    let train: Vec<&ManifestEntry> = manifest.entries(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::EmptySplit("train split is empty".into()));
    }

    let mut sums = [0f64; INPUT_CHANNELS];
    let mut sq_sums = [0f64; INPUT_CHANNELS];
    let mut pixel_count = 0u64;
    let mut y_sum = 0f64;
    let mut y_sq_sum = 0f64;

    for entry in &train {
        let scene = load_scene(&manifest.sample_dir(entry))?;
        for band in 0..S2_BANDS {
            let plane = scene.s2_bands.index_axis(ndarray::Axis(0), band);
            for &v in plane.iter() {
                sums[band] += v as f64;
                sq_sums[band] += (v as f64) * (v as f64);
            }
        }
        for &v in scene.s5p_plane.iter() {
            sums[S2_BANDS] += v as f64;
            sq_sums[S2_BANDS] += (v as f64) * (v as f64);
        }
        pixel_count += (SCENE_SIZE * SCENE_SIZE) as u64;
        y_sum += scene.no2_value as f64;
        y_sq_sum += (scene.no2_value as f64) * (scene.no2_value as f64);
    }

    let n = pixel_count as f64;
    let mut channel_mean = Vec::with_capacity(INPUT_CHANNELS);
    let mut channel_std = Vec::with_capacity(INPUT_CHANNELS);
    for c in 0..INPUT_CHANNELS {
        let mean = sums[c] / n;
        let var = (sq_sums[c] / n - mean * mean).max(0.0);
        if var < 1e-12 {
            return Err(Error::DegenerateStats(channel_name(c)));
        }
        channel_mean.push(mean as f32);
        channel_std.push(var.sqrt() as f32);
    }

    let ny = train.len() as f64;
    let y_mean = y_sum / ny;
    let y_var = (y_sq_sum / ny - y_mean * y_mean).max(0.0);
    if y_var < 1e-12 {
        return Err(Error::DegenerateStats("target".into()));
    }

    Ok(NormStats {
        channel_mean,
        channel_std,
        target_mean: y_mean as f32,
        target_std: y_var.sqrt() as f32,
        std_convention: "population".into(),
    })
}
