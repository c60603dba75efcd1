//! Connected-component labelling of binary masks.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::volgrid::{coords, linear_index, LabelMask};

/// Voxel adjacency: face neighbours only, or faces, edges and corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

impl Connectivity {
    /// Neighbour offsets that precede a voxel in x-fastest scan order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    if manhattan == 0 {
                        continue;
                    }
                    if self == Connectivity::Six && manhattan != 1 {
                        continue;
                    }
                    // strictly earlier in scan order
                    if (dz, dy, dx) < (0, 0, 0) {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        Self { parent: Vec::new() }
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

    /// Links the larger root under the smaller so roots stay the earliest label.
    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Component labels (0 = background, components numbered 1.. in order of
/// their first voxel) and the voxel count of each component.
pub fn label_components(mask: &LabelMask, connectivity: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let dims = mask.dims();
    let offsets = connectivity.backward_offsets();
    let mut provisional = vec![u32::MAX; mask.len()];
    let mut sets = DisjointSet::new();
    for (i, &v) in mask.values().iter().enumerate() {
        if v == 0 {
            continue;
        }
        let [x, y, z] = coords(dims, i);
        let mut label = None;
        for off in &offsets {
            let (nx, ny, nz) = (x as isize + off[0], y as isize + off[1], z as isize + off[2]);
            if nx < 0 || ny < 0 || nz < 0 || nx >= dims[0] as isize || ny >= dims[1] as isize {
                continue;
            }
            let j = linear_index(dims, nx as usize, ny as usize, nz as usize);
            let lj = provisional[j];
            if lj == u32::MAX {
                continue;
            }
            match label {
                None => label = Some(lj),
                Some(l) => sets.union(l, lj),
            }
        }
        provisional[i] = label.unwrap_or_else(|| sets.make());
    }

    // Roots are the smallest provisional label of each set, and provisional
    // labels are issued in scan order, so numbering roots by first
    // appearance numbers components by their minimum linear index.
    let mut final_of_root = vec![0u32; sets.parent.len()];
    let mut sizes = Vec::new();
    let mut labels = vec![0u32; mask.len()];
    for (i, &p) in provisional.iter().enumerate() {
        if p == u32::MAX {
            continue;
        }
        let root = sets.find(p) as usize;
        if final_of_root[root] == 0 {
            sizes.push(0);
            final_of_root[root] = sizes.len() as u32;
        }
        let l = final_of_root[root];
        labels[i] = l;
        sizes[l as usize - 1] += 1;
    }
    (labels, sizes)
}

/// Keeps only the largest connected component; ties go to the component
/// whose first voxel has the smallest linear index.
pub fn largest_component(mask: &LabelMask, connectivity: Connectivity) -> LabelMask {
    let (labels, sizes) = label_components(mask, connectivity);
    let mut best: Option<(usize, u32)> = None;
    for (k, &s) in sizes.iter().enumerate() {
        if best.is_none_or(|(bs, _)| s > bs) {
            best = Some((s, k as u32 + 1));
        }
    }
    let keep = best.map_or(0, |(_, l)| l);
    let values = labels.iter().map(|&l| u8::from(l != 0 && l == keep)).collect();
    LabelMask::new(mask.dims(), values).expect("same geometry")
}
