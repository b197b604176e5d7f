mod common;

use hipseg::consensus::{binarize, fuse, postprocess, predict_orientation, segment, ConsensusConfig, ModelSet};
use hipseg::geometry::CropWindow;
use hipseg::labeling::{keep_largest, label_components, largest_components, Connectivity};
use hipseg::nn::NetworkParams;
use hipseg::volume::HeatmapSource;
use hipseg::{BinaryMask, Grid3, Orientation, ProbabilityVolume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn net(seed: u64) -> NetworkParams {
    NetworkParams::build(&common::tiny_net(2, 2), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn heatmap(grid: Grid3<f32>) -> ProbabilityVolume {
    ProbabilityVolume {
        grid,
        source: HeatmapSource::Fused,
    }
}

fn mask_from(dims: (usize, usize, usize), voxels: &[(usize, usize, usize)]) -> BinaryMask {
    let mut g = Grid3::zeros(dims);
    for &(x, y, z) in voxels {
        g.set(x, y, z, 1u8);
    }
    BinaryMask { grid: g }
}

#[test]
fn heatmaps_cover_the_volume_and_vanish_outside_the_crop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = (181, 217, 181);
    let vol = common::volume(Grid3::from_fn(dims, |_, _, _| rng.random_range(0.0..1.0)));
    let cfg = ConsensusConfig::default();
    let p = net(2);
    for o in Orientation::ALL {
        let map = predict_orientation(&p, o, &vol, &cfg).unwrap();
        assert_eq!(map.dims(), dims);
        assert_eq!(map.source, HeatmapSource::Orientation(o));
        let window = CropWindow::centered(o.slice_dims(dims), (160, 160));
        for k in [0, 90, o.depth(dims) - 1] {
            let (rows, cols) = o.slice_dims(dims);
            for r in 0..rows {
                for c in 0..cols {
                    let (x, y, z) = o.to_volume(k, r, c);
                    let v = map.grid.get(x, y, z);
                    if window.contains(r, c) {
                        assert!(v > 0.0 && v < 1.0);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn silent_network_predicts_one_half() {
    let mut p = net(3);
    p.head_weight.data.iter_mut().for_each(|v| *v = 0.0);
    let vol = common::volume(Grid3::filled((20, 24, 16), 0.7));
    let cfg = ConsensusConfig {
        crop_size: 16,
        ..ConsensusConfig::default()
    };
    let map = predict_orientation(&p, Orientation::Axial, &vol, &cfg).unwrap();
    let window = CropWindow::centered((20, 24), (16, 16));
    for z in 0..16 {
        for x in 0..20 {
            for y in 0..24 {
                let expect = if window.contains(x, y) { 0.5 } else { 0.0 };
                assert_eq!(map.grid.get(x, y, z), expect);
            }
        }
    }
}

#[test]
fn fusion_examples() {
    let one = |v: f32| heatmap(Grid3::filled((2, 1, 1), v));
    let w = [1.0 / 3.0; 3];
    let f = fuse(&[&one(0.9), &one(0.6), &one(0.0)], &w).unwrap();
    assert!((f.grid.get(0, 0, 0) - 0.5).abs() < 1e-6);
    let f = fuse(&[&one(0.8), &one(0.2)], &[0.25, 0.75]).unwrap();
    assert!((f.grid.get(1, 0, 0) - 0.35).abs() < 1e-6);
    assert_eq!(f.source, HeatmapSource::Fused);
    assert!(fuse(&[], &[]).is_err());
    assert!(fuse(&[&one(0.5)], &[0.5, 0.5]).is_err());
    assert!(fuse(&[&one(0.5), &one(0.5)], &[-0.5, 1.5]).is_err());
}

#[test]
fn binarize_is_strict_at_the_threshold() {
    let h = heatmap(Grid3::from_vec((3, 1, 1), vec![0.5, 0.5000001, 0.49]).unwrap());
    assert_eq!(binarize(&h, 0.5).grid.as_slice(), &[0, 1, 0]);
    assert!(postprocess(&h, 1.0, Connectivity::TwentySix, 2).is_err());
    assert!(postprocess(&h, 0.0, Connectivity::TwentySix, 2).is_err());
}

#[test]
fn labeling_examples() {
    let diagonal = mask_from((3, 3, 3), &[(0, 0, 0), (1, 1, 1), (2, 2, 2)]);
    assert_eq!(label_components(&diagonal, Connectivity::Six).sizes.len(), 3);
    assert_eq!(label_components(&diagonal, Connectivity::Eighteen).sizes.len(), 3);
    assert_eq!(label_components(&diagonal, Connectivity::TwentySix).sizes.len(), 1);

    let edge = mask_from((2, 2, 1), &[(0, 0, 0), (1, 1, 0)]);
    assert_eq!(label_components(&edge, Connectivity::Six).sizes.len(), 2);
    assert_eq!(label_components(&edge, Connectivity::Eighteen).sizes.len(), 1);

    let empty = BinaryMask::empty((4, 4, 4));
    assert!(label_components(&empty, Connectivity::TwentySix).sizes.is_empty());
    assert_eq!(largest_components(&empty, Connectivity::TwentySix, 2).unwrap().count(), 0);
    assert!(largest_components(&empty, Connectivity::TwentySix, 0).is_err());

    let full = BinaryMask { grid: Grid3::filled((5, 4, 3), 1) };
    let l = label_components(&full, Connectivity::Six);
    assert_eq!(l.sizes.len(), 1);
    assert_eq!(l.sizes[&1], 60);
}

#[test]
fn labeling_agrees_with_flood_fill_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let dims = (rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..12));
        let density = [0.1, 0.3, 0.5][i % 3];
        let mask = common::random_mask(&mut rng, dims, density);
        for (conn, n) in [(Connectivity::Six, 6), (Connectivity::Eighteen, 18), (Connectivity::TwentySix, 26)] {
            let got = label_components(&mask, conn);
            let (labels, sizes) = common::flood_fill(&mask, n);
            assert!(common::same_partition(got.grid.as_slice(), &labels), "mask {i}, {n}-connectivity");
            assert_eq!(got.grid.as_slice(), &labels[..], "labels follow raster order");
            let got_sizes: Vec<usize> = got.sizes.values().copied().collect();
            assert_eq!(got_sizes, sizes);
        }
    }
}

#[test]
fn keep_largest_examples_and_ties() {
    // Components of sizes 1, 3, 2 in raster order.
    let m = mask_from(
        (9, 1, 1),
        &[(0, 0, 0), (2, 0, 0), (3, 0, 0), (4, 0, 0), (6, 0, 0), (7, 0, 0)],
    );
    let l = label_components(&m, Connectivity::TwentySix);
    assert_eq!(keep_largest(&l, 1).grid.as_slice(), &[0, 0, 1, 1, 1, 0, 0, 0, 0]);
    assert_eq!(keep_largest(&l, 2).grid.as_slice(), &[0, 0, 1, 1, 1, 0, 1, 1, 0]);
    assert_eq!(keep_largest(&l, 5), m);

    // Three singletons: ties go to the components found first.
    let t = mask_from((5, 1, 1), &[(0, 0, 0), (2, 0, 0), (4, 0, 0)]);
    let kept = keep_largest(&label_components(&t, Connectivity::Six), 2);
    assert_eq!(kept.grid.as_slice(), &[1, 0, 1, 0, 0]);
}

#[test]
fn segmentation_is_deterministic_and_a_subset_of_the_threshold_mask() {
    let ball = common::ball(32, 8.0);
    let vol = common::volume(ball.grid.map(|v| 0.2 + 0.6 * v as f32));
    let models = ModelSet {
        sagittal: net(10),
        coronal: net(11),
        axial: net(12),
    };
    let cfg = ConsensusConfig {
        crop_size: 32,
        ..ConsensusConfig::default()
    };
    let a = segment(&vol, &models, &cfg).unwrap();
    let b = segment(&vol, &models, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.mask.is_subset_of(&binarize(&a.fused, 0.5)));
    assert!(label_components(&a.mask, Connectivity::TwentySix).sizes.len() <= 2);
    let manual = fuse(&[&a.heatmaps[0], &a.heatmaps[1], &a.heatmaps[2]], &cfg.weights).unwrap();
    assert_eq!(manual, a.fused);
    let bad = ConsensusConfig {
        weights: [0.5, 0.5, 0.5],
        ..cfg
    };
    assert!(segment(&vol, &models, &bad).is_err());
}

#[test]
fn missing_checkpoints_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let err = ModelSet::load(dir.path()).unwrap_err().to_string();
    assert!(err.contains("sagittal") && err.contains("coronal") && err.contains("axial"), "{err}");
}

fn probs(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..=1.0, n)
}

proptest! {
    #[test]
    fn fusion_ignores_the_order_of_equally_weighted_maps(a in probs(8), b in probs(8), c in probs(8)) {
        let h = |v: &Vec<f32>| heatmap(Grid3::from_vec((2, 2, 2), v.clone()).unwrap());
        let (a, b, c) = (h(&a), h(&b), h(&c));
        let w = [1.0 / 3.0; 3];
        let abc = fuse(&[&a, &b, &c], &w).unwrap();
        let cab = fuse(&[&c, &a, &b], &w).unwrap();
        for (x, y) in abc.grid.as_slice().iter().zip(cab.grid.as_slice()) {
            prop_assert!((x - y).abs() < 1e-6);
            prop_assert!((0.0..=1.0).contains(x));
        }
    }

    #[test]
    fn raising_the_threshold_shrinks_the_mask(v in probs(27), lo in 0.01f32..0.99, d in 0.0f32..0.5) {
        let h = heatmap(Grid3::from_vec((3, 3, 3), v).unwrap());
        let hi = (lo + d).min(0.99);
        prop_assert!(binarize(&h, hi).is_subset_of(&binarize(&h, lo)));
    }

    #[test]
    fn postprocessing_keeps_a_subset(seed in any::<u64>(), keep in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = heatmap(Grid3::from_fn((6, 6, 6), |_, _, _| rng.random_range(0.0..1.0)));
        let out = postprocess(&h, 0.5, Connectivity::Six, keep).unwrap();
        prop_assert!(out.is_subset_of(&binarize(&h, 0.5)));
        prop_assert!(label_components(&out, Connectivity::Six).sizes.len() <= keep);
    }
}
