#![allow(dead_code)]

use std::collections::VecDeque;

use hipseg::nn::NetworkConfig;
use hipseg::{BinaryMask, Geometry, Grid3, ScalarVolume};
use rand::Rng;

pub fn tiny_net(base_width: usize, depth: usize) -> NetworkConfig {
    NetworkConfig {
        base_width,
        depth,
        ..NetworkConfig::default()
    }
}

pub fn volume(grid: Grid3<f32>) -> ScalarVolume {
    ScalarVolume::new(grid, Geometry::with_voxel_size((1.0, 1.0, 1.0)))
}

pub fn random_mask(rng: &mut impl Rng, dims: (usize, usize, usize), density: f64) -> BinaryMask {
    BinaryMask {
        grid: Grid3::from_fn(dims, |_, _, _| u8::from(rng.random_bool(density))),
    }
}

/// Ball of radius `r` around the volume center, identical under any
/// permutation of axes when the dims are a cube.
pub fn ball(n: usize, r: f64) -> BinaryMask {
    let c = (n as f64 - 1.0) / 2.0;
    BinaryMask {
        grid: Grid3::from_fn((n, n, n), |x, y, z| {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
            u8::from(d2 <= r * r)
        }),
    }
}

/// Breadth-first flood fill. Returns a component id per voxel (0 for
/// background) numbered in order of first raster-order discovery, plus the
/// size of each component.
pub fn flood_fill(mask: &BinaryMask, neighbours: u8) -> (Vec<u32>, Vec<usize>) {
    let (nx, ny, nz) = mask.dims();
    let mut offsets = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                let keep = match neighbours {
                    6 => manhattan == 1,
                    18 => manhattan == 1 || manhattan == 2,
                    26 => manhattan > 0,
                    _ => panic!("unsupported connectivity"),
                };
                if keep {
                    offsets.push((dx, dy, dz));
                }
            }
        }
    }
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut labels = vec![0u32; nx * ny * nz];
    let mut sizes = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.grid.get(x, y, z) == 0 || labels[idx(x, y, z)] != 0 {
                    continue;
                }
                let id = sizes.len() as u32 + 1;
                let mut size = 0;
                let mut queue = VecDeque::from([(x, y, z)]);
                labels[idx(x, y, z)] = id;
                while let Some((cx, cy, cz)) = queue.pop_front() {
                    size += 1;
                    for &(dx, dy, dz) in &offsets {
                        let (px, py, pz) = (cx as i64 + dx, cy as i64 + dy, cz as i64 + dz);
                        if px < 0 || py < 0 || pz < 0 || px >= nx as i64 || py >= ny as i64 || pz >= nz as i64 {
                            continue;
                        }
                        let (px, py, pz) = (px as usize, py as usize, pz as usize);
                        if mask.grid.get(px, py, pz) == 1 && labels[idx(px, py, pz)] == 0 {
                            labels[idx(px, py, pz)] = id;
                            queue.push_back((px, py, pz));
                        }
                    }
                }
                sizes.push(size);
            }
        }
    }
    (labels, sizes)
}

/// Whether two labelings describe the same partition of the foreground.
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    use std::collections::HashMap;
    let mut ab: HashMap<u32, u32> = HashMap::new();
    let mut ba: HashMap<u32, u32> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if (x == 0) != (y == 0) {
            return false;
        }
        if x == 0 {
            continue;
        }
        if *ab.entry(x).or_insert(y) != y || *ba.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}
