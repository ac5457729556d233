//! Hash-grid index over 3D support points.

use std::collections::HashMap;

use crate::sampling::grid_cell as cell_of;
use crate::{CloudError, Point3, Result};

type Cell = [i64; 3];

/// Support points bucketed by integer cells of side `bucket`.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<Point3>,
    bucket: f64,
    cells: HashMap<Cell, Vec<usize>>,
    lo: Cell,
    hi: Cell,
}

pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl SpatialIndex {
    /// `bucket` is normally the query radius, so a ball query touches at
    /// most 27 cells.
    pub fn build(points: &[Point3], bucket: f64) -> Result<Self> {
        if !(bucket > 0.0 && bucket.is_finite()) {
            return Err(CloudError::InvalidParameter(format!("bucket side must be positive, got {bucket}")));
        }
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p, bucket);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            cells.entry(c).or_default().push(i);
        }
        Ok(Self { points: points.to_vec(), bucket, cells, lo, hi })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// Indices within distance `r` of `query`, nearest first (ties by index),
    /// truncated to `cap`.
    pub fn radius_neighbors(&self, query: &Point3, r: f64, cap: usize) -> Vec<usize> {
        if self.points.is_empty() || r < 0.0 {
            return Vec::new();
        }
        let r2 = r * r;
        let mut found: Vec<(f64, usize)> = Vec::new();
        let lo = cell_of(&[query[0] - r, query[1] - r, query[2] - r], self.bucket);
        let hi = cell_of(&[query[0] + r, query[1] + r, query[2] + r], self.bucket);
        let lo = [lo[0].max(self.lo[0]), lo[1].max(self.lo[1]), lo[2].max(self.lo[2])];
        let hi = [hi[0].min(self.hi[0]), hi[1].min(self.hi[1]), hi[2].min(self.hi[2])];
        let span: i128 = (0..3).map(|a| (hi[a] - lo[a] + 1).max(0) as i128).product();
        if span > self.points.len() as i128 {
            for (i, p) in self.points.iter().enumerate() {
                let d = dist2(p, query);
                if d <= r2 {
                    found.push((d, i));
                }
            }
        } else {
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        for &i in self.cells.get(&[x, y, z]).into_iter().flatten() {
                            let d = dist2(&self.points[i], query);
                            if d <= r2 {
                                found.push((d, i));
                            }
                        }
                    }
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(cap);
        found.into_iter().map(|(_, i)| i).collect()
    }

    /// Index of the closest support point, ties to the smallest index.
    pub fn nearest_neighbor(&self, query: &Point3) -> Result<usize> {
        self.k_nearest(query, 1)
            .first()
            .copied()
            .ok_or_else(|| CloudError::InvalidParameter("nearest neighbor query on an empty index".into()))
    }

    /// The `k` closest support points (fewer if the index is smaller), nearest
    /// first, ties by index.
    pub fn k_nearest(&self, query: &Point3, k: usize) -> Vec<usize> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let center = cell_of(query, self.bucket);
        let max_ring = (0..3)
            .map(|a| (center[a] - self.lo[a]).abs().max((self.hi[a] - center[a]).abs()))
            .max()
            .unwrap_or(0);
        let mut found: Vec<(f64, usize)> = Vec::new();
        let mut visited_cells = 0usize;
        for ring in 0..=max_ring {
            if visited_cells > 4 * self.cells.len() + 64 {
                return self.linear_k_nearest(query, k);
            }
            visited_cells += self.visit_ring(center, ring, |i| found.push((dist2(&self.points[i], query), i)));
            if found.len() >= k {
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                // Anything outside rings 0..=ring is at least ring * bucket away.
                let reach = ring as f64 * self.bucket;
                if found[k - 1].0 < reach * reach {
                    break;
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(k);
        found.into_iter().map(|(_, i)| i).collect()
    }

    fn linear_k_nearest(&self, query: &Point3, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> =
            self.points.iter().enumerate().map(|(i, p)| (dist2(p, query), i)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    /// Calls `f` for every point in cells at Chebyshev distance exactly `ring`
    /// from `center`; returns the number of cells examined.
    fn visit_ring(&self, center: Cell, ring: i64, mut f: impl FnMut(usize)) -> usize {
        let mut cells = 0;
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                let edge = dx.abs() == ring || dy.abs() == ring;
                let step = if edge { 1 } else { (2 * ring).max(1) };
                let mut dz = -ring;
                while dz <= ring {
                    cells += 1;
                    let c = [center[0] + dx, center[1] + dy, center[2] + dz];
                    for &i in self.cells.get(&c).into_iter().flatten() {
                        f(i);
                    }
                    dz += step;
                }
            }
        }
        cells
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_query_examples() {
        let idx = SpatialIndex::build(&[[0.1, 0.0, 0.0], [1.0, 0.0, 0.0]], 0.5).unwrap();
        assert_eq!(idx.radius_neighbors(&[0.0; 3], 0.5, 32), vec![0]);
        assert!(idx.radius_neighbors(&[0.0; 3], 0.0, 32).is_empty());
        let empty = SpatialIndex::build(&[], 0.5).unwrap();
        assert!(empty.radius_neighbors(&[0.0; 3], 0.5, 32).is_empty());
        assert!(empty.nearest_neighbor(&[0.0; 3]).is_err());
    }

    #[test]
    fn radius_query_sorts_and_caps() {
        let pts = [[0.3, 0.0, 0.0], [0.1, 0.0, 0.0], [-0.1, 0.0, 0.0], [0.0, 0.2, 0.0]];
        let idx = SpatialIndex::build(&pts, 0.5).unwrap();
        assert_eq!(idx.radius_neighbors(&[0.0; 3], 0.5, 32), vec![1, 2, 3, 0]);
        assert_eq!(idx.radius_neighbors(&[0.0; 3], 0.5, 2), vec![1, 2]);
        assert_eq!(idx.radius_neighbors(&[0.0; 3], 100.0, 3), vec![1, 2, 3]);
    }

    #[test]
    fn nearest_examples() {
        let idx = SpatialIndex::build(&[[4.0, 4.0, 4.0]], 0.5).unwrap();
        assert_eq!(idx.nearest_neighbor(&[0.0; 3]).unwrap(), 0);
        let pts = [[9.0; 3], [8.0; 3], [1.0, 0.0, 0.0], [7.0; 3], [6.0; 3], [-1.0, 0.0, 0.0]];
        let idx = SpatialIndex::build(&pts, 0.5).unwrap();
        assert_eq!(idx.nearest_neighbor(&[0.0; 3]).unwrap(), 2);
        assert_eq!(idx.k_nearest(&[0.0; 3], 3), vec![2, 5, 4]);
        assert_eq!(idx.k_nearest(&[0.0; 3], 10).len(), 6);
    }

    #[test]
    fn invalid_bucket() {
        assert!(SpatialIndex::build(&[], 0.0).is_err());
    }
}
