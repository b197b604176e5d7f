//! VGG11 encoder weight transfer.
//!
//! VGG11's eight 3×3 convolutions form five stages separated by max pools:
//! `[64] [128] [256 256] [512 512] [512 512]`. Stage `s` is copied onto
//! encoder level `s`, its convolutions filling the level's `conv1` then
//! `conv2`. The bottleneck, the decoder and all batch-norm state keep their
//! own initialization.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::TensorArchive;
use super::network::NetworkParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `(out, in)` channels of the VGG11 convolutions.
pub const VGG11_CONVS: [(usize, usize); 8] = [
    (64, 3),
    (128, 64),
    (256, 128),
    (256, 256),
    (512, 256),
    (512, 512),
    (512, 512),
    (512, 512),
];

/// Indices of the convolutions inside torchvision's `vgg11().features`.
pub const VGG11_FEATURE_INDEX: [usize; 8] = [0, 3, 6, 8, 11, 13, 16, 18];

const STAGES: [&[usize]; 5] = [&[0], &[1], &[2, 3], &[4, 5], &[6, 7]];

#[derive(Debug, Clone, PartialEq)]
pub struct Vgg11Weights {
    /// Kernels in `[out, in, 3, 3]` layout, in network order.
    pub convs: Vec<Tensor>,
}

impl Vgg11Weights {
    pub fn new(convs: Vec<Tensor>) -> Result<Self> {
        if convs.len() != VGG11_CONVS.len() {
            return Err(Error::Config(format!(
                "VGG11 has {} convolutions, got {}",
                VGG11_CONVS.len(),
                convs.len()
            )));
        }
        for (i, (t, &(o, c))) in convs.iter().zip(&VGG11_CONVS).enumerate() {
            if t.shape != [o, c, 3, 3] {
                return Err(Error::Config(format!(
                    "VGG11 conv {i} has shape {:?}, expected {:?}",
                    t.shape,
                    [o, c, 3, 3]
                )));
            }
        }
        Ok(Vgg11Weights { convs })
    }

    /// Randomly initialized stand-in with the VGG11 shapes.
    pub fn random(rng: &mut impl Rng) -> Self {
        let convs = VGG11_CONVS
            .iter()
            .map(|&(o, c)| {
                let normal = Normal::new(0.0f32, (2.0 / (c * 9) as f32).sqrt()).expect("finite std");
                Tensor {
                    shape: vec![o, c, 3, 3],
                    data: (0..o * c * 9).map(|_| normal.sample(rng)).collect(),
                }
            })
            .collect();
        Vgg11Weights { convs }
    }

    /// Reads an archive whose tensors are named `features.{i}.weight` after
    /// torchvision's layer indices. Other tensors (biases, classifier) are ignored.
    pub fn from_archive(path: impl AsRef<Path>) -> Result<Self> {
        let archive = TensorArchive::read(path)?;
        let convs = VGG11_FEATURE_INDEX
            .iter()
            .map(|i| {
                let name = format!("features.{i}.weight");
                archive
                    .tensors
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Checkpoint(format!("VGG11 archive lacks `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Vgg11Weights::new(convs)
    }

    pub fn to_archive(&self) -> TensorArchive {
        TensorArchive {
            meta: serde_json::json!({ "model": "vgg11" }),
            tensors: VGG11_FEATURE_INDEX
                .iter()
                .zip(&self.convs)
                .map(|(i, t)| (format!("features.{i}.weight"), t.clone()))
                .collect(),
        }
    }
}

/// (VGG conv index, encoder level, which conv in the block).
fn mapping(depth: usize) -> Vec<(usize, usize, usize)> {
    STAGES
        .iter()
        .enumerate()
        .take(depth)
        .flat_map(|(level, convs)| convs.iter().enumerate().map(move |(j, &v)| (v, level, j)))
        .collect()
}

/// Copies VGG11 kernels into the encoder. Fails without modifying anything
/// if any mapped layer has a different shape.
pub fn transfer_vgg11(params: &NetworkParams, source: &Vgg11Weights) -> Result<NetworkParams> {
    let pairs = mapping(params.config.depth);
    for &(v, level, j) in &pairs {
        let block = &params.encoder[level];
        let target = if j == 0 { &block.conv1 } else { &block.conv2 };
        let src = &source.convs[v];
        if target.shape != src.shape {
            return Err(Error::Transfer {
                layer: format!(
                    "encoder.{level}.conv{}.weight <- features.{}.weight",
                    j + 1,
                    VGG11_FEATURE_INDEX[v]
                ),
                expected: target.shape.clone(),
                found: src.shape.clone(),
            });
        }
    }
    let mut out = params.clone();
    for (v, level, j) in pairs {
        let block = &mut out.encoder[level];
        let target = if j == 0 { &mut block.conv1 } else { &mut block.conv2 };
        target.data.copy_from_slice(&source.convs[v].data);
    }
    Ok(out)
}
