//! Tri-planar inference, heatmap fusion and post-processing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, CropWindow, Grid2, Orientation, CROP_SIZE};
use crate::labeling::{largest_components, Connectivity};
use crate::nn::{load_checkpoint, Checkpoint, NetworkParams, Tensor4};
use crate::volume::{BinaryMask, Grid3, HeatmapSource, ProbabilityVolume, ScalarVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    /// Sagittal, coronal, axial.
    pub weights: [f32; 3],
    pub threshold: f32,
    pub connectivity: Connectivity,
    pub keep_components: usize,
    pub crop_size: usize,
    /// Slices per forward pass.
    pub batch_size: usize,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            weights: [1.0 / 3.0; 3],
            threshold: 0.5,
            connectivity: Connectivity::TwentySix,
            keep_components: 2,
            crop_size: CROP_SIZE,
            batch_size: 8,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<()> {
        check_weights(&self.weights)?;
        check_threshold(self.threshold)?;
        if self.keep_components == 0 {
            return Err(Error::Config("keep_components must be at least 1".into()));
        }
        if self.crop_size == 0 || self.batch_size == 0 {
            return Err(Error::Config("crop_size and batch_size must be positive".into()));
        }
        Ok(())
    }
}

fn check_weights(weights: &[f32]) -> Result<()> {
    let sum: f32 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
        return Err(Error::Config(format!(
            "fusion weights {weights:?} must be non-negative and sum to 1"
        )));
    }
    Ok(())
}

fn check_threshold(ths: f32) -> Result<()> {
    if !(ths > 0.0 && ths < 1.0) {
        return Err(Error::Config(format!("threshold {ths} must lie in (0, 1)")));
    }
    Ok(())
}

/// Network input for slice `k`: the centered crop of the slice and, for
/// three-channel networks, of its edge-clamped neighbours.
pub fn slice_input(
    volume: &Grid3<f32>,
    orient: Orientation,
    k: usize,
    channels: usize,
    crop_size: usize,
) -> (Vec<Grid2<f32>>, CropWindow) {
    let depth = orient.depth(volume.dims());
    let ks: Vec<usize> = if channels == 3 {
        vec![k.saturating_sub(1), k, (k + 1).min(depth - 1)]
    } else {
        vec![k]
    };
    let mut window = None;
    let planes = ks
        .into_iter()
        .map(|kk| {
            let (c, w) = geometry::center_crop(&geometry::slice(volume, orient, kk), (crop_size, crop_size));
            window = Some(w);
            c
        })
        .collect();
    (planes, window.expect("at least one channel"))
}

/// Cropped probability maps for every slice of `volume` in `orient`.
pub fn predict_cropped(
    params: &NetworkParams,
    volume: &Grid3<f32>,
    orient: Orientation,
    crop_size: usize,
    batch_size: usize,
) -> Result<Vec<(Grid2<f32>, CropWindow)>> {
    let channels = params.config.in_channels;
    params.config.check_input(channels, crop_size, crop_size)?;
    let depth = orient.depth(volume.dims());
    let mut out = Vec::with_capacity(depth);
    let batch_size = batch_size.max(1);
    for start in (0..depth).step_by(batch_size) {
        let ks: Vec<usize> = (start..(start + batch_size).min(depth)).collect();
        let mut input = Tensor4::zeros(ks.len(), channels, crop_size, crop_size);
        let mut windows = Vec::with_capacity(ks.len());
        for (i, &k) in ks.iter().enumerate() {
            let (planes, window) = slice_input(volume, orient, k, channels, crop_size);
            for (c, plane) in planes.iter().enumerate() {
                input.image_mut(i, c).copy_from_slice(plane.as_slice());
            }
            windows.push(window);
        }
        let probs = params.forward(&input)?;
        for (i, window) in windows.into_iter().enumerate() {
            let map = Grid2::from_vec(crop_size, crop_size, probs.image(i, 0).to_vec())?;
            out.push((map, window));
        }
    }
    Ok(out)
}

/// Full-volume heatmap of one orientation's network.
pub fn predict_orientation(
    params: &NetworkParams,
    orient: Orientation,
    volume: &ScalarVolume,
    cfg: &ConsensusConfig,
) -> Result<ProbabilityVolume> {
    let cropped = predict_cropped(params, &volume.grid, orient, cfg.crop_size, cfg.batch_size)?;
    let slices = cropped
        .iter()
        .map(|(map, window)| geometry::pad_back(map, window))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbabilityVolume {
        grid: geometry::reassemble(&slices, orient)?,
        source: HeatmapSource::Orientation(orient),
    })
}

/// Voxelwise weighted sum of heatmaps.
pub fn fuse(maps: &[&ProbabilityVolume], weights: &[f32]) -> Result<ProbabilityVolume> {
    if maps.is_empty() || maps.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} heatmaps with {} weights",
            maps.len(),
            weights.len()
        )));
    }
    check_weights(weights)?;
    let dims = maps[0].dims();
    if let Some(bad) = maps.iter().find(|m| m.dims() != dims) {
        return Err(Error::Shape(format!(
            "heatmap dims {:?} differ from {:?}",
            bad.dims(),
            dims
        )));
    }
    let mut acc = vec![0.0f32; maps[0].grid.len()];
    for (m, &w) in maps.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(m.grid.as_slice()) {
            *a += w * v;
        }
    }
    acc.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(ProbabilityVolume {
        grid: Grid3::from_vec(dims, acc)?,
        source: HeatmapSource::Fused,
    })
}

/// Foreground where the probability is strictly above `ths`.
pub fn binarize(vol: &ProbabilityVolume, ths: f32) -> BinaryMask {
    BinaryMask {
        grid: vol.grid.map(|v| u8::from(v > ths)),
    }
}

/// Threshold, then keep the largest components.
pub fn postprocess(
    vol: &ProbabilityVolume,
    ths: f32,
    connectivity: Connectivity,
    keep: usize,
) -> Result<BinaryMask> {
    check_threshold(ths)?;
    largest_components(&binarize(vol, ths), connectivity, keep)
}

/// One network per orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub sagittal: NetworkParams,
    pub coronal: NetworkParams,
    pub axial: NetworkParams,
}

impl ModelSet {
    pub fn get(&self, orient: Orientation) -> &NetworkParams {
        match orient {
            Orientation::Sagittal => &self.sagittal,
            Orientation::Coronal => &self.coronal,
            Orientation::Axial => &self.axial,
        }
    }

    /// Conventional checkpoint file for `orient` inside `dir`.
    pub fn checkpoint_path(dir: impl AsRef<Path>, orient: Orientation) -> PathBuf {
        dir.as_ref().join(format!("{}.ckpt", orient.name()))
    }

    /// Loads `sagittal.ckpt`, `coronal.ckpt` and `axial.ckpt` from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let missing: Vec<&str> = Orientation::ALL
            .iter()
            .filter(|&&o| !Self::checkpoint_path(dir, o).is_file())
            .map(|o| o.name())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing checkpoint for {} in {}",
                missing.join(", "),
                dir.display()
            )));
        }
        let load = |o: Orientation| -> Result<NetworkParams> {
            let Checkpoint { params, orientation, .. } = load_checkpoint(Self::checkpoint_path(dir, o))?;
            if let Some(found) = orientation.filter(|&f| f != o) {
                return Err(Error::Checkpoint(format!(
                    "{} checkpoint was trained on the {found} orientation",
                    o.name()
                )));
            }
            Ok(params)
        };
        Ok(ModelSet {
            sagittal: load(Orientation::Sagittal)?,
            coronal: load(Orientation::Coronal)?,
            axial: load(Orientation::Axial)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: BinaryMask,
    /// Sagittal, coronal, axial.
    pub heatmaps: [ProbabilityVolume; 3],
    pub fused: ProbabilityVolume,
}

/// Predicts in all orientations, fuses, thresholds and keeps the largest components.
pub fn segment(volume: &ScalarVolume, models: &ModelSet, cfg: &ConsensusConfig) -> Result<Segmentation> {
    cfg.validate()?;
    let [s, c, a] = Orientation::ALL.map(|o| predict_orientation(models.get(o), o, volume, cfg));
    let heatmaps = [s?, c?, a?];
    let fused = fuse(&[&heatmaps[0], &heatmaps[1], &heatmaps[2]], &cfg.weights)?;
    let mask = postprocess(&fused, cfg.threshold, cfg.connectivity, cfg.keep_components)?;
    Ok(Segmentation { mask, heatmaps, fused })
}
