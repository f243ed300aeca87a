//! Connected-component labelling on 2D/3D boolean grids with a two-pass
//! union–find scan.

/// Neighbourhoods understood by [`label_components`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Connectivity {
    /// 2D edge adjacency.
    Four,
    /// 2D edge or corner adjacency.
    Eight,
    /// 3D face adjacency.
    Six,
}

impl Connectivity {
    /// Neighbours already visited in raster order (x fastest, then y, z).
    fn backward_offsets(self) -> &'static [[isize; 3]] {
        match self {
            Connectivity::Four => &[[-1, 0, 0], [0, -1, 0]],
            Connectivity::Eight => &[[-1, 0, 0], [-1, -1, 0], [0, -1, 0], [1, -1, 0]],
            Connectivity::Six => &[[-1, 0, 0], [0, -1, 0], [0, 0, -1]],
        }
    }
}

/// Component labels (0 = background, components numbered from 1 in order
/// of their first voxel in raster order) and per-component sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub labels: Vec<u32>,
    /// `sizes[l - 1]` is the size of component `l`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Labels the true cells of a grid of shape `[nx, ny, nz]` (x fastest).
pub fn label_components(cells: &[bool], shape: [usize; 3], conn: Connectivity) -> Components {
    let [nx, ny, nz] = shape;
    assert_eq!(cells.len(), nx * ny * nz, "grid shape mismatch");
    let mut provisional = vec![0u32; cells.len()];
    // parent[0] is unused so provisional label 0 can mean background.
    let mut parent: Vec<u32> = vec![0];
    let offsets = conn.backward_offsets();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = x + nx * (y + ny * z);
                if !cells[idx] {
                    continue;
                }
                let mut current = 0u32;
                for off in offsets {
                    let (xx, yy, zz) = (x as isize + off[0], y as isize + off[1], z as isize + off[2]);
                    if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize {
                        continue;
                    }
                    let n = provisional[xx as usize + nx * (yy as usize + ny * zz as usize)];
                    if n == 0 {
                        continue;
                    }
                    if current == 0 {
                        current = find(&mut parent, n);
                    } else {
                        let (a, b) = (find(&mut parent, current), find(&mut parent, n));
                        if a != b {
                            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                            parent[hi as usize] = lo;
                            current = lo;
                        }
                    }
                }
                if current == 0 {
                    current = parent.len() as u32;
                    parent.push(current);
                }
                provisional[idx] = current;
            }
        }
    }
    // Second pass: canonical labels in order of first appearance.
    let mut canonical = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    let mut labels = provisional;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if canonical[root] == 0 {
            sizes.push(0);
            canonical[root] = sizes.len() as u32;
        }
        *l = canonical[root];
        sizes[*l as usize - 1] += 1;
    }
    Components { labels, sizes }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u_shape_merges() {
        #[rustfmt::skip]
        let cells = [
            true, false, true,
            true, false, true,
            true, true,  true,
        ].to_vec();
        let c = label_components(&cells, [3, 3, 1], Connectivity::Four);
        assert_eq!(c.count(), 1);
        assert_eq!(c.sizes, vec![7]);
    }

    #[test]
    fn eight_connectivity_joins_diagonals() {
        let cells = vec![true, false, false, true];
        assert_eq!(label_components(&cells, [2, 2, 1], Connectivity::Four).count(), 2);
        assert_eq!(label_components(&cells, [2, 2, 1], Connectivity::Eight).count(), 1);
        let anti = vec![false, true, true, false];
        assert_eq!(label_components(&anti, [2, 2, 1], Connectivity::Eight).count(), 1);
    }

    #[test]
    fn six_connectivity_stacks_layers() {
        let cells = vec![true, false, false, false, true, false, false, false];
        assert_eq!(label_components(&cells, [2, 2, 2], Connectivity::Six).count(), 1);
        let diag = vec![true, false, false, false, false, true, false, false];
        assert_eq!(label_components(&diag, [2, 2, 2], Connectivity::Six).count(), 2);
    }
}
