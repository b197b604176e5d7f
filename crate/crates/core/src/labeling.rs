//! 3D connected-component labeling and component selection.
//!
//! Two-pass raster labeling over a union-find forest. Final labels are
//! assigned in raster order of each component's first voxel, so the output
//! is a pure function of the mask.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Grid3, LabeledVolume};

/// Voxel adjacency: faces (6), faces+edges (18), faces+edges+corners (26).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    /// Neighbour offsets `(dx, dy, dz)` that precede a voxel in raster order.
    fn backward_offsets(self) -> Vec<(isize, isize, isize)> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if (dz, dy, dx) >= (0, 0, 0) {
                        continue;
                    }
                    let taxicab = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => taxicab == 1,
                        Connectivity::Eighteen => taxicab <= 2,
                        Connectivity::TwentySix => true,
                    };
                    if keep {
                        out.push((dx, dy, dz));
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::Config(format!("connectivity must be 6, 18 or 26, got {other}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("connectivity must be 6, 18 or 26, got `{s}`")))?;
        Connectivity::try_from(v)
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        // Slot 0 is reserved for background.
        UnionFind { parent: vec![0] }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Labels maximal connected foreground components.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> LabeledVolume {
    let dims = mask.dims();
    let (nx, ny, nz) = (dims.0 as isize, dims.1 as isize, dims.2 as isize);
    let offsets: Vec<(isize, isize, isize, isize)> = connectivity
        .backward_offsets()
        .into_iter()
        .map(|(dx, dy, dz)| (dx, dy, dz, dx + nx * (dy + ny * dz)))
        .collect();
    let src = mask.grid.as_slice();
    let mut provisional = vec![0u32; src.len()];
    let mut uf = UnionFind::new();

    let mut i = 0isize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if src[i as usize] != 0 {
                    let mut label = 0u32;
                    for &(dx, dy, dz, delta) in &offsets {
                        let (xx, yy, zz) = (x + dx, y + dy, z + dz);
                        if xx < 0 || yy < 0 || zz < 0 || xx >= nx || yy >= ny {
                            continue;
                        }
                        let neighbour = provisional[(i + delta) as usize];
                        if neighbour == 0 {
                            continue;
                        }
                        label = if label == 0 { uf.find(neighbour) } else { uf.union(label, neighbour) };
                    }
                    provisional[i as usize] = if label == 0 { uf.make() } else { label };
                }
                i += 1;
            }
        }
    }

    let mut final_id = vec![0u32; uf.parent.len()];
    let mut next = 0u32;
    let mut sizes = BTreeMap::new();
    let data: Vec<u32> = provisional
        .iter()
        .map(|&p| {
            if p == 0 {
                return 0;
            }
            let root = uf.find(p) as usize;
            if final_id[root] == 0 {
                next += 1;
                final_id[root] = next;
            }
            let id = final_id[root];
            *sizes.entry(id).or_insert(0usize) += 1;
            id
        })
        .collect();
    LabeledVolume {
        grid: Grid3::from_vec(dims, data).expect("dims unchanged"),
        sizes,
    }
}

/// Keeps the `k` largest components; equal sizes go to the lower label id.
pub fn keep_largest(labeled: &LabeledVolume, k: usize) -> BinaryMask {
    let mut ranked: Vec<(u32, usize)> = labeled.sizes.iter().map(|(&id, &n)| (id, n)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep = vec![false; labeled.sizes.keys().max().map_or(1, |&m| m as usize + 1)];
    for &(id, _) in ranked.iter().take(k) {
        keep[id as usize] = true;
    }
    BinaryMask {
        grid: labeled.grid.map(|id| u8::from(id != 0 && keep[id as usize])),
    }
}

/// Labels `mask` and keeps its `k` largest components.
pub fn largest_components(mask: &BinaryMask, connectivity: Connectivity, k: usize) -> Result<BinaryMask> {
    if k == 0 {
        return Err(Error::Config("keep_components must be at least 1".into()));
    }
    Ok(keep_largest(&label_components(mask, connectivity), k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(dims: (usize, usize, usize), voxels: &[(usize, usize, usize)]) -> BinaryMask {
        let mut g = Grid3::zeros(dims);
        for &(x, y, z) in voxels {
            g.set(x, y, z, 1u8);
        }
        BinaryMask { grid: g }
    }

    fn cube(origin: (usize, usize, usize), side: usize) -> Vec<(usize, usize, usize)> {
        let mut v = Vec::new();
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    v.push((origin.0 + x, origin.1 + y, origin.2 + z));
                }
            }
        }
        v
    }

    #[test]
    fn two_cubes() {
        let mut voxels = cube((0, 0, 0), 3);
        voxels.extend(cube((5, 5, 5), 3));
        let lv = label_components(&mask_from((10, 10, 10), &voxels), Connectivity::TwentySix);
        assert_eq!(lv.num_components(), 2);
        assert_eq!(lv.sizes.values().copied().collect::<Vec<_>>(), vec![27, 27]);
    }

    #[test]
    fn empty_mask_has_no_components() {
        let lv = label_components(&BinaryMask::empty((4, 5, 6)), Connectivity::TwentySix);
        assert_eq!(lv.num_components(), 0);
        assert!(lv.grid.as_slice().iter().all(|&v| v == 0));
    }

    #[test]
    fn corner_contact_depends_on_connectivity() {
        let m = mask_from((3, 3, 3), &[(0, 0, 0), (1, 1, 1)]);
        assert_eq!(label_components(&m, Connectivity::TwentySix).num_components(), 1);
        assert_eq!(label_components(&m, Connectivity::Eighteen).num_components(), 2);
        assert_eq!(label_components(&m, Connectivity::Six).num_components(), 2);
        let edge = mask_from((3, 3, 3), &[(0, 0, 0), (1, 1, 0)]);
        assert_eq!(label_components(&edge, Connectivity::Eighteen).num_components(), 1);
    }

    #[test]
    fn u_shape_merges_late() {
        // Two arms that only join at the bottom row; exercises union of labels.
        let m = mask_from(
            (5, 3, 1),
            &[(0, 0, 0), (4, 0, 0), (0, 1, 0), (4, 1, 0), (0, 2, 0), (1, 2, 0), (2, 2, 0), (3, 2, 0), (4, 2, 0)],
        );
        let lv = label_components(&m, Connectivity::Six);
        assert_eq!(lv.num_components(), 1);
        assert_eq!(lv.sizes[&1], 9);
    }

    #[test]
    fn keep_two_largest() {
        let mut voxels = cube((0, 0, 0), 2); // 8
        voxels.extend(cube((4, 0, 0), 3)); // 27
        voxels.extend(cube((0, 5, 0), 4)); // 64
        let m = mask_from((10, 10, 10), &voxels);
        let kept = keep_largest(&label_components(&m, Connectivity::TwentySix), 2);
        assert_eq!(kept.count(), 91);
        assert_eq!(kept.grid.get(0, 0, 0), 0);
        assert!(kept.is_subset_of(&m));
    }

    #[test]
    fn keep_largest_ties_prefer_low_ids() {
        let mut voxels = cube((0, 0, 0), 2);
        voxels.extend(cube((4, 0, 0), 2));
        voxels.extend(cube((0, 4, 0), 2));
        let lv = label_components(&mask_from((8, 8, 3), &voxels), Connectivity::TwentySix);
        let kept = keep_largest(&lv, 2);
        let ids: std::collections::BTreeSet<u32> = lv
            .grid
            .as_slice()
            .iter()
            .zip(kept.grid.as_slice())
            .filter(|(_, &k)| k == 1)
            .map(|(&id, _)| id)
            .collect();
        assert_eq!(ids.into_iter().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn single_component_unchanged() {
        let m = mask_from((6, 6, 6), &cube((1, 1, 1), 3));
        assert_eq!(largest_components(&m, Connectivity::TwentySix, 2).unwrap(), m);
        assert!(largest_components(&m, Connectivity::TwentySix, 0).is_err());
    }

    #[test]
    fn connectivity_parsing() {
        assert_eq!("26".parse::<Connectivity>().unwrap(), Connectivity::TwentySix);
        assert!("8".parse::<Connectivity>().is_err());
    }
}
