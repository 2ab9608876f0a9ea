//! 3D connected-component labeling and Chebyshev dilation.

use crate::volume::Mask;
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            6 => Some(Connectivity::Six),
            18 => Some(Connectivity::Eighteen),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    /// Neighbor offsets for this adjacency. 18-connectivity admits Chebyshev-1
    /// neighbors with Manhattan distance <= 2; 26 admits the full cube shell.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::Eighteen => manhattan <= 2,
                        Connectivity::TwentySix => true,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Component labeling of a binary mask. Component ids are 1..=n, assigned in
/// ascending order of each component's first voxel in linear (x-fastest)
/// order, so labelings are deterministic.
#[derive(Debug, Clone)]
pub struct ComponentLabels {
    pub labels: Vec<u32>,
    pub n_components: usize,
    pub voxel_counts: Vec<usize>,
    pub connectivity: Connectivity,
    pub dims: [usize; 3],
}

impl ComponentLabels {
    /// Binary mask of a single component.
    pub fn component_mask(&self, id: u32, spacing: [f64; 3]) -> Mask {
        let data = self.labels.iter().map(|&l| l == id).collect();
        Mask::new(self.dims, spacing, data)
    }
}

pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> ComponentLabels {
    let dims = mask.dims();
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let n = nx * ny * nz;
    let data = mask.data();
    let mut labels = vec![0u32; n];
    let mut voxel_counts = Vec::new();
    let offsets = connectivity.offsets();
    let mut queue = VecDeque::new();
    let mut next = 0u32;

    for start in 0..n {
        if !data[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        let mut count = 0usize;
        while let Some(idx) = queue.pop_front() {
            count += 1;
            let x = (idx % nx) as i64;
            let y = ((idx / nx) % ny) as i64;
            let z = (idx / (nx * ny)) as i64;
            for off in &offsets {
                let (qx, qy, qz) = (x + off[0], y + off[1], z + off[2]);
                if qx < 0
                    || qy < 0
                    || qz < 0
                    || qx >= nx as i64
                    || qy >= ny as i64
                    || qz >= nz as i64
                {
                    continue;
                }
                let qi = qx as usize + nx * (qy as usize + ny * qz as usize);
                if data[qi] && labels[qi] == 0 {
                    labels[qi] = next;
                    queue.push_back(qi);
                }
            }
        }
        voxel_counts.push(count);
    }

    ComponentLabels {
        labels,
        n_components: next as usize,
        voxel_counts,
        connectivity,
        dims,
    }
}

/// Connected components of one label inside an integer label field. Avoids
/// materializing an intermediate mask in the post-processing hot path.
pub fn label_components(
    labels_field: &[i32],
    dims: [usize; 3],
    target: i32,
    connectivity: Connectivity,
) -> ComponentLabels {
    let data: Vec<bool> = labels_field.iter().map(|&l| l == target).collect();
    let mask = Mask::new(dims, [1.0; 3], data);
    connected_components(&mask, connectivity)
}

/// Chebyshev-ball dilation: voxel true iff some originally-true voxel lies
/// within `radius` along every axis. Separable (the Chebyshev ball is a box),
/// one sliding-window pass per axis.
pub fn dilate_mask(mask: &Mask, radius_voxels: usize) -> Mask {
    if radius_voxels == 0 {
        return mask.clone();
    }
    let dims = mask.dims();
    let mut cur = mask.data().to_vec();
    let mut tmp = vec![false; cur.len()];
    for axis in 0..3 {
        dilate_axis(&cur, &mut tmp, dims, axis, radius_voxels);
        std::mem::swap(&mut cur, &mut tmp);
    }
    Mask::new(dims, mask.spacing(), cur)
}

fn dilate_axis(src: &[bool], dst: &mut [bool], dims: [usize; 3], axis: usize, r: usize) {
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let len = dims[axis];
    // iterate over all lines along `axis`
    let (outer1, outer2) = match axis {
        0 => (ny, nz),
        1 => (nx, nz),
        _ => (nx, ny),
    };
    for b in 0..outer2 {
        for a in 0..outer1 {
            let base = match axis {
                0 => nx * (a + ny * b),
                1 => a + nx * ny * b,
                _ => a + nx * b,
            };
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(len - 1);
                let mut v = false;
                for j in lo..=hi {
                    if src[base + j * stride] {
                        v = true;
                        break;
                    }
                }
                dst[base + i * stride] = v;
            }
        }
    }
}
