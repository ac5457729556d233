//! Grid downsampling to cell barycenters.

use std::collections::HashMap;

use crate::{CloudError, Color, LabeledPointCloud, Point3, Result};

/// One barycenter per occupied cubic cell, in order of first occurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct DownsampledCloud {
    pub positions: Vec<Point3>,
    pub colors: Vec<Color>,
    /// Modal member label per cell, ties to the smallest class.
    pub labels: Option<Vec<usize>>,
    /// For each original point, the index of its barycenter.
    pub cell_of_original: Vec<usize>,
    /// Integer cell coordinates `floor(coord / d)` of each barycenter.
    pub cells: Vec<[i64; 3]>,
    pub member_counts: Vec<usize>,
    pub grid_size: f64,
    pub class_count: usize,
}

impl DownsampledCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn as_cloud(&self) -> LabeledPointCloud {
        LabeledPointCloud::new(self.positions.clone(), self.colors.clone(), self.labels.clone(), self.class_count)
            .expect("barycenters of a valid cloud form a valid cloud")
    }
}

pub fn grid_cell(p: &Point3, d: f64) -> [i64; 3] {
    [(p[0] / d).floor() as i64, (p[1] / d).floor() as i64, (p[2] / d).floor() as i64]
}

pub fn grid_downsample(cloud: &LabeledPointCloud, d: f64) -> Result<DownsampledCloud> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(CloudError::InvalidParameter(format!("grid size must be positive, got {d}")));
    }
    let mut slot: HashMap<[i64; 3], usize> = HashMap::new();
    let mut cells = Vec::new();
    let mut cell_of_original = Vec::with_capacity(cloud.len());
    for p in cloud.positions() {
        let c = grid_cell(p, d);
        let next = cells.len();
        let j = *slot.entry(c).or_insert_with(|| {
            cells.push(c);
            next
        });
        cell_of_original.push(j);
    }
    let m = cells.len();
    let mut sum_p = vec![[0.0; 3]; m];
    let mut sum_c = vec![[0.0; 3]; m];
    let mut lo = vec![[f64::INFINITY; 3]; m];
    let mut hi = vec![[f64::NEG_INFINITY; 3]; m];
    let mut counts = vec![0usize; m];
    for (i, &j) in cell_of_original.iter().enumerate() {
        let p = cloud.positions()[i];
        let c = cloud.colors()[i];
        counts[j] += 1;
        for a in 0..3 {
            sum_p[j][a] += p[a];
            sum_c[j][a] += c[a];
            lo[j][a] = lo[j][a].min(p[a]);
            hi[j][a] = hi[j][a].max(p[a]);
        }
    }
    // Clamping the rounded mean to the member range keeps it in the cell.
    let positions = (0..m)
        .map(|j| {
            let n = counts[j] as f64;
            [0, 1, 2].map(|a| (sum_p[j][a] / n).clamp(lo[j][a], hi[j][a]))
        })
        .collect();
    let colors = (0..m)
        .map(|j| {
            let n = counts[j] as f64;
            [0, 1, 2].map(|a| (sum_c[j][a] / n).clamp(0.0, 1.0))
        })
        .collect();
    let labels = cloud.labels().map(|labels| {
        let k = cloud.class_count();
        let mut hist = vec![0usize; m * k];
        for (&j, &l) in cell_of_original.iter().zip(labels) {
            hist[j * k + l] += 1;
        }
        hist.chunks(k.max(1))
            .map(|h| {
                // First maximum, so ties resolve to the smallest class index.
                h.iter().enumerate().fold((0, 0), |best, (c, &n)| if n > best.1 { (c, n) } else { best }).0
            })
            .collect()
    });
    Ok(DownsampledCloud {
        positions,
        colors,
        labels,
        cell_of_original,
        cells,
        member_counts: counts,
        grid_size: d,
        class_count: cloud.class_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[[f64; 3]], labels: &[usize]) -> LabeledPointCloud {
        LabeledPointCloud::new(points.to_vec(), vec![[0.5; 3]; points.len()], Some(labels.to_vec()), 4).unwrap()
    }

    #[test]
    fn singleton() {
        let d = grid_downsample(&cloud(&[[0.05, 0.05, 0.05]], &[2]), 0.2).unwrap();
        assert_eq!(d.positions, vec![[0.05, 0.05, 0.05]]);
        assert_eq!(d.labels, Some(vec![2]));
        assert_eq!(d.cell_of_original, vec![0]);
    }

    #[test]
    fn two_members_average() {
        let d = grid_downsample(&cloud(&[[0.0; 3], [0.1, 0.0, 0.0]], &[1, 0]), 0.2).unwrap();
        assert_eq!(d.positions, vec![[0.05, 0.0, 0.0]]);
        assert_eq!(d.labels, Some(vec![0]));
        assert_eq!(d.member_counts, vec![2]);
    }

    #[test]
    fn distinct_cells() {
        let d = grid_downsample(&cloud(&[[0.0; 3], [0.3, 0.0, 0.0]], &[1, 3]), 0.2).unwrap();
        assert_eq!(d.positions, vec![[0.0; 3], [0.3, 0.0, 0.0]]);
        assert_eq!(d.labels, Some(vec![1, 3]));
        assert_eq!(d.cell_of_original, vec![0, 1]);
    }

    #[test]
    fn modal_label_and_first_occurrence_order() {
        let pts = [[1.0, 0.0, 0.0], [0.0; 3], [1.01, 0.0, 0.0], [0.01, 0.0, 0.0], [1.02, 0.0, 0.0]];
        let d = grid_downsample(&cloud(&pts, &[3, 2, 1, 1, 1]), 0.2).unwrap();
        assert_eq!(d.cells, vec![[5, 0, 0], [0, 0, 0]]);
        assert_eq!(d.labels, Some(vec![1, 1]));
        assert_eq!(d.cell_of_original, vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn negative_coordinates_use_floor() {
        let d = grid_downsample(&cloud(&[[-0.05, 0.0, 0.0], [0.05, 0.0, 0.0]], &[0, 0]), 0.2).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.cells[0], [-1, 0, 0]);
    }

    #[test]
    fn rejects_non_positive_grid() {
        assert!(grid_downsample(&cloud(&[[0.0; 3]], &[0]), 0.0).is_err());
        assert!(grid_downsample(&cloud(&[[0.0; 3]], &[0]), -1.0).is_err());
    }
}
