//! Volumetric evaluation, threshold sweeps, single-orientation comparison
//! and the architecture ablation harness.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{fuse, postprocess, predict_orientation, ConsensusConfig, ModelSet};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::Orientation;
use crate::labeling::Connectivity;
use crate::nn::{transfer_vgg11, NetworkConfig, NetworkParams, Vgg11Weights};
use crate::sampler::SamplerConfig;
use crate::training::{train_from, TrainingConfig};
use crate::volume::{BinaryMask, ProbabilityVolume};

/// `2|P∩T| / (|P|+|T|)`; 1.0 when both masks are empty.
pub fn volumetric_dice(pred: &BinaryMask, reference: &BinaryMask) -> Result<f64> {
    if pred.dims() != reference.dims() {
        return Err(Error::Shape(format!(
            "prediction dims {:?} differ from reference dims {:?}",
            pred.dims(),
            reference.dims()
        )));
    }
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.grid.as_slice().iter().zip(reference.grid.as_slice()) {
        let (p, t) = (p != 0, t != 0);
        inter += usize::from(p && t);
        np += usize::from(p);
        nt += usize::from(t);
    }
    Ok(if np + nt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nt) as f64
    })
}

/// 0.1, 0.2, …, 0.9.
pub fn default_thresholds() -> Vec<f32> {
    (1..=9).map(|i| i as f32 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub threshold: f32,
    pub dice: f64,
}

/// Dice after thresholding and component selection at each threshold.
pub fn threshold_sweep(
    fused: &ProbabilityVolume,
    reference: &BinaryMask,
    thresholds: &[f32],
    connectivity: Connectivity,
    keep: usize,
) -> Result<Vec<SweepRow>> {
    thresholds
        .iter()
        .map(|&threshold| {
            let mask = postprocess(fused, threshold, connectivity, keep)?;
            Ok(SweepRow {
                threshold,
                dice: volumetric_dice(&mask, reference)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ths,dice\n");
    for r in rows {
        let _ = writeln!(out, "{:.1},{:.6}", r.threshold, r.dice);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub id: String,
    pub sagittal: f64,
    pub coronal: f64,
    pub axial: f64,
    pub consensus: f64,
}

impl ComparisonRow {
    pub fn single(&self) -> [f64; 3] {
        [self.sagittal, self.coronal, self.axial]
    }
}

/// Dice of each single-orientation mask and of the consensus, per test
/// volume. Every mask gets the same threshold and component selection.
pub fn orientation_vs_consensus(models: &ModelSet, test_set: &[Sample], cfg: &ConsensusConfig) -> Result<Vec<ComparisonRow>> {
    cfg.validate()?;
    if test_set.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    let post = |p: &ProbabilityVolume| postprocess(p, cfg.threshold, cfg.connectivity, cfg.keep_components);
    test_set
        .iter()
        .map(|sample| {
            let maps = Orientation::ALL
                .iter()
                .map(|&o| predict_orientation(models.get(o), o, &sample.volume, cfg))
                .collect::<Result<Vec<_>>>()?;
            let fused = fuse(&[&maps[0], &maps[1], &maps[2]], &cfg.weights)?;
            let d = |p: &ProbabilityVolume| -> Result<f64> { volumetric_dice(&post(p)?, &sample.mask) };
            Ok(ComparisonRow {
                id: sample.id.clone(),
                sagittal: d(&maps[0])?,
                coronal: d(&maps[1])?,
                axial: d(&maps[2])?,
                consensus: d(&fused)?,
            })
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("volume,sagittal,coronal,axial,consensus\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.id, r.sagittal, r.coronal, r.axial, r.consensus
        );
    }
    out
}

pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:<16} {:>9} {:>9} {:>9} {:>9}\n",
        "volume", "sagittal", "coronal", "axial", "consensus"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            r.id, r.sagittal, r.coronal, r.axial, r.consensus
        );
    }
    out
}

/// One row of the architecture ablation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    pub augmentation: bool,
    pub residual: bool,
    pub e2d: bool,
    pub vgg_transfer: bool,
}

/// Patch size used by single-channel runs.
pub const SINGLE_CHANNEL_PATCH: usize = 32;

/// Published consensus test Dice (%) for each flag combination.
const REFERENCE_DICE: [(bool, bool, bool, bool, f64); 5] = [
    (false, false, false, false, 92.78),
    (true, false, false, false, 93.33),
    (true, true, false, false, 94.81),
    (true, true, true, false, 95.53),
    (true, true, true, true, 96.30),
];

impl AblationSpec {
    pub fn new(name: &str, augmentation: bool, residual: bool, e2d: bool, vgg_transfer: bool) -> Self {
        AblationSpec {
            name: name.to_string(),
            augmentation,
            residual,
            e2d,
            vgg_transfer,
        }
    }

    /// The five cumulative configurations, baseline first.
    pub fn standard_rows() -> Vec<AblationSpec> {
        vec![
            AblationSpec::new("baseline", false, false, false, false),
            AblationSpec::new("augmentation", true, false, false, false),
            AblationSpec::new("residual", true, true, false, false),
            AblationSpec::new("e2d", true, true, true, false),
            AblationSpec::new("vgg11", true, true, true, true),
        ]
    }

    pub fn validate(&self, base_width: usize) -> Result<()> {
        if self.vgg_transfer && !self.e2d {
            return Err(Error::Config(format!(
                "ablation `{}`: VGG11 transfer needs three input channels (e2d on)",
                self.name
            )));
        }
        if self.vgg_transfer && base_width != 64 {
            return Err(Error::Config(format!(
                "ablation `{}`: VGG11 transfer needs base_width 64, got {base_width}",
                self.name
            )));
        }
        Ok(())
    }

    /// Published Dice for this flag combination, if it is one of the five rows.
    pub fn reference_dice(&self) -> Option<f64> {
        REFERENCE_DICE
            .iter()
            .find(|r| (r.0, r.1, r.2, r.3) == (self.augmentation, self.residual, self.e2d, self.vgg_transfer))
            .map(|r| r.4)
    }

    /// Network and sampler settings for this row.
    pub fn apply(&self, network: &NetworkConfig, sampler: &SamplerConfig) -> (NetworkConfig, SamplerConfig) {
        let net = NetworkConfig {
            in_channels: if self.e2d { 3 } else { 1 },
            e2d: self.e2d,
            use_residual: self.residual,
            ..network.clone()
        };
        let mut samp = if self.augmentation {
            sampler.clone()
        } else {
            sampler.without_augmentation()
        };
        samp.e2d = self.e2d;
        if !self.e2d {
            samp.patch_size = SINGLE_CHANNEL_PATCH;
        }
        (net, samp)
    }

    /// Parses `name augmentation residual e2d vgg_transfer` with on/off flags.
    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Config(format!(
                "ablation spec `{line}` needs 5 fields: name augmentation residual e2d vgg_transfer"
            )));
        }
        let flag = |s: &str| match s {
            "on" | "1" | "true" | "yes" => Ok(true),
            "off" | "0" | "false" | "no" | "-" => Ok(false),
            other => Err(Error::Config(format!("`{other}` is not an on/off flag"))),
        };
        Ok(AblationSpec::new(fields[0], flag(fields[1])?, flag(fields[2])?, flag(fields[3])?, flag(fields[4])?))
    }

    /// One spec per non-blank, non-`#` line.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(AblationSpec::parse_line)
            .collect()
    }
}

/// Settings shared by every ablation row.
#[derive(Debug, Clone)]
pub struct AblationSettings {
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub sampler: SamplerConfig,
    pub consensus: ConsensusConfig,
    /// Encoder weights for rows with transfer enabled.
    pub vgg: Option<Vgg11Weights>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub spec: AblationSpec,
    /// Mean consensus volumetric Dice over the test split.
    pub test_dice: f64,
    pub per_volume: Vec<f64>,
    pub reference_dice: Option<f64>,
}

/// Trains three orientation models per spec and scores the consensus on the test split.
pub fn run_ablation(specs: &[AblationSpec], data: &Dataset, settings: &AblationSettings) -> Result<Vec<AblationRow>> {
    for spec in specs {
        spec.validate(settings.network.base_width)?;
        if spec.vgg_transfer && settings.vgg.is_none() {
            return Err(Error::Config(format!("ablation `{}` needs VGG11 weights", spec.name)));
        }
    }
    if !specs.is_empty() && data.test.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let (net_cfg, samp_cfg) = spec.apply(&settings.network, &settings.sampler);
        let mut trained = Vec::with_capacity(3);
        for orient in Orientation::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.training.seed);
            rng.set_stream(orient.axis() as u64);
            let mut params = NetworkParams::build(&net_cfg, &mut rng)?;
            if spec.vgg_transfer {
                params = transfer_vgg11(&params, settings.vgg.as_ref().expect("checked above"))?;
            }
            log::info!("ablation `{}`: training {orient}", spec.name);
            let model = train_from(params, &data.train, &data.val, orient, &settings.training, &samp_cfg, |_| {})?;
            trained.push(model.params);
        }
        let axial = trained.pop().expect("three models");
        let coronal = trained.pop().expect("three models");
        let sagittal = trained.pop().expect("three models");
        let models = ModelSet {
            sagittal,
            coronal,
            axial,
        };
        let per_volume = orientation_vs_consensus(&models, &data.test, &settings.consensus)?
            .into_iter()
            .map(|r| r.consensus)
            .collect::<Vec<_>>();
        let test_dice = per_volume.iter().sum::<f64>() / per_volume.len() as f64;
        rows.push(AblationRow {
            spec: spec.clone(),
            test_dice,
            per_volume,
            reference_dice: spec.reference_dice(),
        });
    }
    Ok(rows)
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        "-"
    }
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<14} {:>10} {:>10} {:>12} {:>9} {:>4} {:>5}\n",
        "run", "test dice", "published", "augmentation", "residual", "e2d", "vgg11"
    );
    for r in rows {
        let published = r.reference_dice.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(
            out,
            "{:<14} {:>10.2} {:>10} {:>12} {:>9} {:>4} {:>5}",
            r.spec.name,
            100.0 * r.test_dice,
            published,
            mark(r.spec.augmentation),
            mark(r.spec.residual),
            mark(r.spec.e2d),
            mark(r.spec.vgg_transfer)
        );
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("run,test_dice,published_dice,augmentation,residual,e2d,vgg_transfer\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{},{},{},{},{}",
            r.spec.name,
            r.test_dice,
            r.reference_dice.map_or_else(String::new, |v| format!("{:.4}", v / 100.0)),
            u8::from(r.spec.augmentation),
            u8::from(r.spec.residual),
            u8::from(r.spec.e2d),
            u8::from(r.spec.vgg_transfer)
        );
    }
    out
}
