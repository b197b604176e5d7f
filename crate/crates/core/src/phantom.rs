//! Synthetic brain-like phantoms with two hippocampus-like ellipsoids.
//!
//! A phantom is a head-shaped ellipsoid with a smooth intensity gradient,
//! two target ellipsoids mirrored about the midsagittal plane (with
//! independent jitter), a few spherical distractor blobs at other
//! intensities, and additive Gaussian noise. The mask is exactly the two
//! target ellipsoids.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{split_counts, Dataset, Sample};
use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Dims, Geometry, Grid3, ScalarVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: Dims,
    /// Mean semi-axes of each target ellipsoid, in voxels.
    pub semi_axes: [f64; 3],
    /// Uniform jitter applied to each semi-axis.
    pub semi_axis_jitter: f64,
    /// Distance of each target from the midsagittal plane, as a fraction of the x extent.
    pub lateral_offset: f64,
    /// Uniform jitter applied to each target center coordinate, in voxels.
    pub center_jitter: f64,
    pub background_intensity: f32,
    pub target_intensity: f32,
    pub distractor_intensities: Vec<f32>,
    pub distractor_count: usize,
    pub distractor_radius: (f64, f64),
    pub noise_std: f32,
    /// Multiplier taking the unit-scale phantom to raw scanner-like values.
    pub raw_scale: f32,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: (64, 64, 64),
            semi_axes: [4.0, 9.0, 5.0],
            semi_axis_jitter: 1.0,
            lateral_offset: 0.2,
            center_jitter: 2.0,
            background_intensity: 0.35,
            target_intensity: 0.75,
            distractor_intensities: vec![0.55, 0.95],
            distractor_count: 4,
            distractor_radius: (2.0, 4.0),
            noise_std: 0.02,
            raw_scale: 1000.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// The same layout on a `dims` grid: every length in voxels is scaled by
    /// the ratio of the smallest extents.
    pub fn scaled_to(&self, dims: Dims) -> Self {
        let old = self.dims.0.min(self.dims.1).min(self.dims.2).max(1) as f64;
        let f = dims.0.min(dims.1).min(dims.2) as f64 / old;
        PhantomConfig {
            dims,
            semi_axes: self.semi_axes.map(|a| a * f),
            semi_axis_jitter: self.semi_axis_jitter * f,
            center_jitter: self.center_jitter * f,
            distractor_radius: (self.distractor_radius.0 * f, self.distractor_radius.1 * f),
            ..self.clone()
        }
    }
}

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        (0..3)
            .map(|i| {
                let d = (p[i] - self.center[i]) / self.semi_axes[i];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }

    fn fits(&self, dims: Dims) -> bool {
        let d = [dims.0, dims.1, dims.2];
        (0..3).all(|i| self.center[i] - self.semi_axes[i] >= 0.0 && self.center[i] + self.semi_axes[i] <= (d[i] - 1) as f64)
    }

    pub fn analytic_volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi_axes.iter().product::<f64>()
    }
}

/// Voxels whose centers lie inside `e`.
pub fn rasterize(e: &Ellipsoid, dims: Dims) -> BinaryMask {
    BinaryMask {
        grid: Grid3::from_fn(dims, |x, y, z| u8::from(e.contains(x, y, z))),
    }
}

/// The two target ellipsoids for `cfg` (left then right).
pub fn target_ellipsoids(cfg: &PhantomConfig, rng: &mut impl Rng) -> Result<[Ellipsoid; 2]> {
    let (nx, ny, nz) = cfg.dims;
    let mid = [(nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0, (nz as f64 - 1.0) / 2.0];
    let offset = cfg.lateral_offset * nx as f64;
    let mut jitter = |amount: f64| {
        if amount > 0.0 {
            rng.random_range(-amount..=amount)
        } else {
            0.0
        }
    };
    let mut make = |side: f64| {
        let semi_axes = cfg.semi_axes.map(|a| (a + jitter(cfg.semi_axis_jitter)).max(1.0));
        let center = [
            mid[0] + side * offset + jitter(cfg.center_jitter),
            mid[1] + jitter(cfg.center_jitter),
            mid[2] + jitter(cfg.center_jitter),
        ];
        Ellipsoid { center, semi_axes }
    };
    let targets = [make(-1.0), make(1.0)];
    for (i, t) in targets.iter().enumerate() {
        if !t.fits(cfg.dims) {
            return Err(Error::Config(format!(
                "target ellipsoid {i} ({t:?}) does not fit inside {:?}",
                cfg.dims
            )));
        }
    }
    let gap = (targets[1].center[0] - targets[1].semi_axes[0]) - (targets[0].center[0] + targets[0].semi_axes[0]);
    if gap < 2.0 {
        return Err(Error::Config(format!(
            "target ellipsoids are only {gap:.2} voxels apart; they must stay disjoint"
        )));
    }
    Ok(targets)
}

/// Builds one phantom volume (raw scale) and its mask.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(ScalarVolume, BinaryMask)> {
    if cfg.dims.0 < 8 || cfg.dims.1 < 8 || cfg.dims.2 < 8 {
        return Err(Error::Config(format!("phantom dims {:?} are too small", cfg.dims)));
    }
    if !(cfg.noise_std >= 0.0) || cfg.distractor_radius.0 <= 0.0 || cfg.distractor_radius.1 < cfg.distractor_radius.0 {
        return Err(Error::Config("invalid noise or distractor settings".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let targets = target_ellipsoids(cfg, &mut rng)?;
    let (nx, ny, nz) = cfg.dims;
    let head = Ellipsoid {
        center: [(nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0, (nz as f64 - 1.0) / 2.0],
        semi_axes: [0.46 * nx as f64, 0.46 * ny as f64, 0.46 * nz as f64],
    };

    let mut distractors: Vec<(Ellipsoid, f32)> = Vec::new();
    let mut attempts = 0;
    while distractors.len() < cfg.distractor_count && attempts < 1000 && !cfg.distractor_intensities.is_empty() {
        attempts += 1;
        let r = rng.random_range(cfg.distractor_radius.0..=cfg.distractor_radius.1);
        let c = [
            rng.random_range(r..nx as f64 - 1.0 - r),
            rng.random_range(r..ny as f64 - 1.0 - r),
            rng.random_range(r..nz as f64 - 1.0 - r),
        ];
        let clear = targets.iter().all(|t| {
            // Stay well away from the inflated target.
            (0..3)
                .map(|i| {
                    let d = (c[i] - t.center[i]) / (t.semi_axes[i] + r + 2.0);
                    d * d
                })
                .sum::<f64>()
                > 1.0
        });
        let inside_head = head.contains(c[0].round() as usize, c[1].round() as usize, c[2].round() as usize);
        if clear && inside_head {
            let intensity = cfg.distractor_intensities[distractors.len() % cfg.distractor_intensities.len()];
            distractors.push((
                Ellipsoid {
                    center: c,
                    semi_axes: [r; 3],
                },
                intensity,
            ));
        }
    }

    let noise = Normal::new(0.0f32, cfg.noise_std).expect("validated std");
    let mut mask = Grid3::zeros(cfg.dims);
    let mut data = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut v = if head.contains(x, y, z) {
                    cfg.background_intensity + 0.1 * (z as f32 / nz as f32) - 0.05 * (y as f32 / ny as f32)
                } else {
                    0.05
                };
                for (d, intensity) in &distractors {
                    if d.contains(x, y, z) {
                        v = *intensity;
                    }
                }
                if targets.iter().any(|t| t.contains(x, y, z)) {
                    v = cfg.target_intensity;
                    mask.set(x, y, z, 1u8);
                }
                data.push((v + noise.sample(&mut rng)) * cfg.raw_scale);
            }
        }
    }
    let volume = ScalarVolume::new(Grid3::from_vec(cfg.dims, data)?, Geometry::default());
    Ok((volume, BinaryMask { grid: mask }))
}

/// Seed of phantom `index` in a dataset seeded with `seed`.
pub fn phantom_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

/// `n` phantoms split 80/10/10 by index.
pub fn generate_dataset(n: usize, base: &PhantomConfig, seed: u64) -> Result<Dataset> {
    let (n_train, n_val, _) = split_counts(n)?;
    let mut dataset = Dataset::default();
    for i in 0..n {
        let cfg = PhantomConfig {
            seed: phantom_seed(seed, i),
            ..base.clone()
        };
        let (volume, mask) = generate_phantom(&cfg)?;
        let sample = Sample::new(format!("phantom_{i:03}"), volume, mask)?;
        if i < n_train {
            dataset.train.push(sample);
        } else if i < n_train + n_val {
            dataset.val.push(sample);
        } else {
            dataset.test.push(sample);
        }
    }
    Ok(dataset)
}
