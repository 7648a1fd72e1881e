//! Deterministic synthetic-scene generator.
//!
//! Scenes are built from a seeded Voronoi partition of the 11 land-cover
//! classes, class-dependent reflectance spectra plus noise, and a smooth
//! random trace-gas field. The NO2 label is a fixed linear function of the
//! class-fraction vector over the scene's central 8x8 region and the mean of
//! the trace-gas plane, so the mapping from planes to label is learnable by
//! construction and can be re-evaluated exactly as a test oracle.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    save_scene, AnnotatedScene, DatasetManifest, ManifestEntry, CENTER_PIXEL, NUM_CLASSES,
    SCENE_SIZE, S2_BANDS,
};
use crate::error::{Error, Result};

/// Side of the central region whose class fractions drive the label.
const LABEL_REGION: usize = 8;
const VORONOI_SITES: usize = 24;

/// The label-generating function, recorded in the manifest of every
/// synthetic dataset so tests can recompute labels from the planes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticGenerator {
    /// Per-class contribution in ug/m3 at fraction 1.0.
    pub class_weights: Vec<f64>,
    /// Contribution of the trace-gas plane mean.
    pub s5p_coeff: f64,
    pub bias: f64,
}

impl Default for SyntheticGenerator {
    fn default() -> Self {
        SyntheticGenerator {
            class_weights: (0..NUM_CLASSES).map(|i| 6.0 + 2.0 * i as f64).collect(),
            s5p_coeff: 10.0,
            bias: 2.0,
        }
    }
}

impl SyntheticGenerator {
    /// Evaluates the generating function on a scene's planes. This is the
    /// oracle: for every generated scene it reproduces `no2_value` exactly.
    pub fn label_for(&self, landcover: &Array2<u8>, s5p_plane: &Array3<f32>) -> f64 {
        let (cr, cc) = CENTER_PIXEL;
        let half = LABEL_REGION / 2;
        let mut counts = [0u32; NUM_CLASSES];
        for r in (cr - half)..(cr + half) {
            for c in (cc - half)..(cc + half) {
                counts[landcover[[r, c]] as usize] += 1;
            }
        }
        let total = (LABEL_REGION * LABEL_REGION) as f64;
        let class_term: f64 = counts
            .iter()
            .zip(&self.class_weights)
            .map(|(&n, &w)| w * (n as f64 / total))
            .sum();

        let mut s5p_sum = 0f64;
        for &v in s5p_plane.iter() {
            s5p_sum += v as f64;
        }
        let s5p_mean = s5p_sum / (SCENE_SIZE * SCENE_SIZE) as f64;

        class_term + self.s5p_coeff * s5p_mean + self.bias
    }
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub generator: SyntheticGenerator,
    pub region_tag: String,
    pub id_prefix: String,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            generator: SyntheticGenerator::default(),
            region_tag: "SYN".into(),
            id_prefix: "SYN".into(),
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Fixed reflectance spectrum per (class, band), identical across all scenes
/// so class appearance is a stable signal.
fn spectrum(class: usize, band: usize) -> f32 {
    let mut s = (class * S2_BANDS + band) as u64 ^ 0xa076_1d64_78bd_642f;
    let u = splitmix64(&mut s) as f64 / u64::MAX as f64;
    (0.15 + 0.7 * u) as f32
}

fn generate_scene(index: usize, seed: u64, opts: &SynthOptions) -> AnnotatedScene {
    let mut chain = seed ^ 0x6a09_e667_f3bc_c908;
    for _ in 0..=index {
        splitmix64(&mut chain);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(chain);

    // Voronoi partition into classes
    let sites: Vec<(f64, f64, u8)> = (0..VORONOI_SITES)
        .map(|_| {
            (
                rng.gen_range(0.0..SCENE_SIZE as f64),
                rng.gen_range(0.0..SCENE_SIZE as f64),
                rng.gen_range(0..NUM_CLASSES as u8),
            )
        })
        .collect();
    let landcover = Array2::from_shape_fn((SCENE_SIZE, SCENE_SIZE), |(r, c)| {
        let (mut best, mut best_d) = (0u8, f64::INFINITY);
        for &(sr, sc, class) in &sites {
            let d = (sr - r as f64).powi(2) + (sc - c as f64).powi(2);
            if d < best_d {
                best_d = d;
                best = class;
            }
        }
        best
    });

    // class-dependent reflectance plus pixel noise
    let mut s2 = Array3::zeros((S2_BANDS, SCENE_SIZE, SCENE_SIZE));
    for band in 0..S2_BANDS {
        for r in 0..SCENE_SIZE {
            for c in 0..SCENE_SIZE {
                let base = spectrum(landcover[[r, c]] as usize, band);
                let noise: f32 = rng.sample::<f32, _>(rand_distr::StandardNormal) * 0.03;
                s2[[band, r, c]] = base + noise;
            }
        }
    }

    // smooth trace-gas field: positive base plus gaussian bumps
    let bumps: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.gen_range(0.0..SCENE_SIZE as f64),
                rng.gen_range(0.0..SCENE_SIZE as f64),
                rng.gen_range(0.05..0.45),
                rng.gen_range(15.0..50.0),
            )
        })
        .collect();
    let mut s5p = Array3::zeros((1, SCENE_SIZE, SCENE_SIZE));
    for r in 0..SCENE_SIZE {
        for c in 0..SCENE_SIZE {
            let mut v = 0.3;
            for &(br, bc, amp, sigma) in &bumps {
                let d2 = (br - r as f64).powi(2) + (bc - c as f64).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            s5p[[0, r, c]] = v as f32;
        }
    }

    let no2 = opts.generator.label_for(&landcover, &s5p) as f32;
    let lon = rng.gen_range(-10.0..30.0);
    let lat = rng.gen_range(35.0..60.0);

    AnnotatedScene {
        s2_bands: s2,
        s5p_plane: s5p,
        landcover: Some(landcover),
        no2_value: no2,
        station_id: format!("{}-{}-{index:04}", opts.id_prefix, seed),
        lon,
        lat,
        region_tag: opts.region_tag.clone(),
    }
}

/// Writes `n` synthetic sample containers under `out_dir` and returns an
/// unsplit manifest recording the generating function. Deterministic: the
/// same `(n, seed)` always produces byte-identical containers.
pub fn generate_synthetic(n: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    generate_synthetic_with(n, seed, out_dir, &SynthOptions::default())
}

pub fn generate_synthetic_with(
    n: usize,
    seed: u64,
    out_dir: &Path,
    opts: &SynthOptions,
) -> Result<DatasetManifest> {
    if n < 1 {
        return Err(Error::Config("need at least one sample".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let scene = generate_scene(i, seed, opts);
        let rel = PathBuf::from(format!("scene_{i:04}"));
        save_scene(&scene, &out_dir.join(&rel))?;
        samples.push(ManifestEntry {
            sample_path: rel,
            station_id: scene.station_id.clone(),
            region_tag: scene.region_tag.clone(),
            split: None,
        });
    }
    Ok(DatasetManifest {
        seed,
        normalization_stats_path: None,
        generator: Some(opts.generator.clone()),
        samples,
        root: out_dir.to_path_buf(),
    })
}
