//! Runtime patch sampling for training.
//!
//! A patch is a square window around a center pixel of slice `k`, stacked
//! with the same window on slices `k − 1` and `k + 1` (Extended-2D input).
//! Most centers lie on the in-slice border of the target mask; the rest are
//! uniform over the whole volume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Grid2, Orientation};
use crate::nn::Tensor4;
use crate::volume::{BinaryMask, ScalarVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub patch_size: usize,
    pub p_random_position: f64,
    pub p_hflip: f64,
    /// Brightness factor is drawn from `[1 − range, 1 + range]`.
    pub brightness_range: f32,
    pub p_noise: f64,
    pub noise_variance: f32,
    pub noise_mean: f32,
    /// Three stacked slices when true, the target slice alone otherwise.
    pub e2d: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch_size: 64,
            p_random_position: 0.2,
            p_hflip: 0.2,
            brightness_range: 0.1,
            p_noise: 0.2,
            noise_variance: 0.0002,
            noise_mean: 0.0,
            e2d: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_random_position", self.p_random_position),
            ("p_hflip", self.p_hflip),
            ("p_noise", self.p_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.patch_size == 0 || self.patch_size % 16 != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of 16",
                self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.brightness_range) {
            return Err(Error::Config(format!(
                "brightness_range {} must lie in [0, 1)",
                self.brightness_range
            )));
        }
        if !(self.noise_variance >= 0.0) || !self.noise_mean.is_finite() {
            return Err(Error::Config("noise parameters must be finite, variance ≥ 0".into()));
        }
        Ok(())
    }

    /// Same sampling, but no flip, brightness or noise.
    pub fn without_augmentation(&self) -> Self {
        SamplerConfig {
            p_hflip: 0.0,
            brightness_range: 0.0,
            p_noise: 0.0,
            ..self.clone()
        }
    }

    pub fn channels(&self) -> usize {
        if self.e2d {
            3
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterMode {
    Border,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub orientation: Orientation,
    pub slice: usize,
    pub center: (usize, usize),
    pub mode: CenterMode,
}

/// Input channels (previous, target, next slice; or the target alone) and
/// the target mask aligned with the center channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub channels: Vec<Grid2<f32>>,
    pub target: Grid2<u8>,
    pub provenance: Provenance,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.target.rows()
    }

    /// Index of the channel aligned with the target.
    pub fn center_channel(&self) -> usize {
        self.channels.len() / 2
    }
}

/// What [`augment`] did to a patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flipped: bool,
    pub brightness: f32,
    pub noised: bool,
}

/// Foreground pixels with at least one background 4-neighbour. Pixels on
/// the slice edge count the outside as background.
pub fn border_set(mask_slice: &Grid2<u8>) -> Vec<(usize, usize)> {
    let (rows, cols) = mask_slice.shape();
    let fg = |r: isize, c: isize| {
        r >= 0
            && c >= 0
            && (r as usize) < rows
            && (c as usize) < cols
            && mask_slice.get(r as usize, c as usize) != 0
    };
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if mask_slice.get(r, c) == 0 {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            if !fg(ri - 1, ci) || !fg(ri + 1, ci) || !fg(ri, ci - 1) || !fg(ri, ci + 1) {
                out.push((r, c));
            }
        }
    }
    out
}

/// A volume/mask pair prepared for repeated sampling in one orientation.
#[derive(Debug, Clone)]
pub struct VolumeSampler<'a> {
    volume: &'a ScalarVolume,
    mask: &'a BinaryMask,
    orientation: Orientation,
    borders: Vec<Vec<(usize, usize)>>,
    border_slices: Vec<usize>,
}

impl<'a> VolumeSampler<'a> {
    pub fn new(volume: &'a ScalarVolume, mask: &'a BinaryMask, orientation: Orientation) -> Result<Self> {
        if volume.dims() != mask.dims() {
            return Err(Error::Shape(format!(
                "volume dims {:?} differ from mask dims {:?}",
                volume.dims(),
                mask.dims()
            )));
        }
        let depth = orientation.depth(volume.dims());
        let borders: Vec<_> = (0..depth)
            .map(|k| border_set(&crate::geometry::slice(&mask.grid, orientation, k)))
            .collect();
        let border_slices = borders
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.is_empty())
            .map(|(k, _)| k)
            .collect();
        Ok(VolumeSampler {
            volume,
            mask,
            orientation,
            borders,
            border_slices,
        })
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn border(&self, k: usize) -> &[(usize, usize)] {
        &self.borders[k]
    }

    /// Total border pixels over all slices.
    pub fn border_count(&self) -> usize {
        self.borders.iter().map(Vec::len).sum()
    }

    /// Draws a patch center and extracts the (un-augmented) patch.
    pub fn sample(&self, cfg: &SamplerConfig, rng: &mut impl Rng) -> Patch {
        let dims = self.volume.dims();
        let depth = self.orientation.depth(dims);
        let (rows, cols) = self.orientation.slice_dims(dims);
        let wants_random = rng.random::<f64>() < cfg.p_random_position;
        let (k, center, mode) = if !wants_random && !self.border_slices.is_empty() {
            let k = self.border_slices[rng.random_range(0..self.border_slices.len())];
            let border = &self.borders[k];
            (k, border[rng.random_range(0..border.len())], CenterMode::Border)
        } else {
            if !wants_random {
                log::debug!("empty mask in {} orientation; falling back to a random center", self.orientation);
            }
            let k = rng.random_range(0..depth);
            let center = (rng.random_range(0..rows), rng.random_range(0..cols));
            (k, center, CenterMode::Random)
        };
        self.extract(cfg, k, center, mode)
    }

    /// Extracts the window of `cfg.patch_size` centered at `center` on slice `k`.
    pub fn extract(&self, cfg: &SamplerConfig, k: usize, center: (usize, usize), mode: CenterMode) -> Patch {
        let depth = self.orientation.depth(self.volume.dims());
        let size = cfg.patch_size;
        let neighbours: Vec<usize> = if cfg.e2d {
            vec![k.saturating_sub(1), k, (k + 1).min(depth - 1)]
        } else {
            vec![k]
        };
        let channels = neighbours
            .iter()
            .map(|&kk| window(&self.volume.grid, self.orientation, kk, center, size))
            .collect();
        let target = window(&self.mask.grid, self.orientation, k, center, size);
        Patch {
            channels,
            target,
            provenance: Provenance {
                orientation: self.orientation,
                slice: k,
                center,
                mode,
            },
        }
    }
}

/// Square window of slice `k` with its top-left at `center − size/2`,
/// zero outside the slice.
fn window<T: Copy + Default>(
    grid: &crate::volume::Grid3<T>,
    orient: Orientation,
    k: usize,
    center: (usize, usize),
    size: usize,
) -> Grid2<T> {
    let (rows, cols) = orient.slice_dims(grid.dims());
    let r0 = center.0 as isize - (size / 2) as isize;
    let c0 = center.1 as isize - (size / 2) as isize;
    Grid2::from_fn(size, size, |i, j| {
        let (r, c) = (r0 + i as isize, c0 + j as isize);
        if r < 0 || c < 0 || r as usize >= rows || c as usize >= cols {
            T::default()
        } else {
            let (x, y, z) = orient.to_volume(k, r as usize, c as usize);
            grid.get(x, y, z)
        }
    })
}

pub fn hflip(patch: &Patch) -> Patch {
    Patch {
        channels: patch.channels.iter().map(Grid2::hflip).collect(),
        target: patch.target.hflip(),
        provenance: patch.provenance,
    }
}

/// Multiplies channels (not the target) by `factor`, clamping to `[0, 1]`.
pub fn scale_brightness(patch: &mut Patch, factor: f32) {
    for ch in &mut patch.channels {
        ch.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = (*v * factor).clamp(0.0, 1.0));
    }
}

/// Adds i.i.d. Gaussian noise to every channel pixel, clamping to `[0, 1]`.
pub fn add_noise(patch: &mut Patch, mean: f32, variance: f32, rng: &mut impl Rng) {
    let normal = Normal::new(mean, variance.sqrt()).expect("validated noise parameters");
    for ch in &mut patch.channels {
        ch.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = (*v + normal.sample(rng)).clamp(0.0, 1.0));
    }
}

/// Flip, then brightness, then noise.
pub fn augment(patch: &Patch, cfg: &SamplerConfig, rng: &mut impl Rng) -> (Patch, Augmentation) {
    let flipped = rng.random::<f64>() < cfg.p_hflip;
    let brightness = if cfg.brightness_range > 0.0 {
        rng.random_range(1.0 - cfg.brightness_range..=1.0 + cfg.brightness_range)
    } else {
        1.0
    };
    let noised = rng.random::<f64>() < cfg.p_noise;
    let mut out = if flipped { hflip(patch) } else { patch.clone() };
    if brightness != 1.0 {
        scale_brightness(&mut out, brightness);
    }
    if noised {
        add_noise(&mut out, cfg.noise_mean, cfg.noise_variance, rng);
    }
    (
        out,
        Augmentation {
            flipped,
            brightness,
            noised,
        },
    )
}

/// Deterministic per-item stream so batches do not depend on how items are
/// scheduled across workers.
pub fn item_rng(batch_seed: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
    rng.set_stream(item as u64);
    rng
}

/// `n` independently sampled and augmented patches; sources are drawn
/// uniformly. Items are split across up to `workers` threads; the result
/// does not depend on the worker count.
pub fn make_minibatch(
    n: usize,
    sources: &[VolumeSampler<'_>],
    cfg: &SamplerConfig,
    workers: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Patch>> {
    if sources.is_empty() {
        return Err(Error::Config("cannot sample from an empty dataset".into()));
    }
    let batch_seed: u64 = rng.random();
    let make = |i: usize| {
        let mut item = item_rng(batch_seed, i);
        let source = &sources[item.random_range(0..sources.len())];
        let patch = source.sample(cfg, &mut item);
        augment(&patch, cfg, &mut item).0
    };
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return Ok((0..n).map(make).collect());
    }
    let chunk = n.div_ceil(workers);
    let make = &make;
    let parts: Vec<Vec<Patch>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| scope.spawn(move || (start..(start + chunk).min(n)).map(make).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("patch worker panicked"))
            .collect()
    });
    Ok(parts.into_iter().flatten().collect())
}

/// Packs patches into a network input batch and flat targets.
pub fn to_tensors(patches: &[Patch]) -> Result<(Tensor4, Vec<f32>)> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Config("empty minibatch".into()))?;
    let (c, size) = (first.channels.len(), first.size());
    let mut input = Tensor4::zeros(patches.len(), c, size, size);
    let mut targets = Vec::with_capacity(patches.len() * size * size);
    for (i, p) in patches.iter().enumerate() {
        if p.channels.len() != c || p.size() != size {
            return Err(Error::Shape("patches in a batch differ in shape".into()));
        }
        for (ch, grid) in p.channels.iter().enumerate() {
            input.image_mut(i, ch).copy_from_slice(grid.as_slice());
        }
        targets.extend(p.target.as_slice().iter().map(|&v| v as f32));
    }
    Ok((input, targets))
}
