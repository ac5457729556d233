use crate::{CloudError, Result};

pub type Point3 = [f64; 3];
/// RGB in `[0, 1]`.
pub type Color = [f64; 3];

/// Colored points with optional per-point class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPointCloud {
    positions: Vec<Point3>,
    colors: Vec<Color>,
    labels: Option<Vec<usize>>,
    class_count: usize,
}

impl LabeledPointCloud {
    pub fn new(
        positions: Vec<Point3>,
        colors: Vec<Color>,
        labels: Option<Vec<usize>>,
        class_count: usize,
    ) -> Result<Self> {
        if colors.len() != positions.len() {
            return Err(CloudError::LengthMismatch {
                what: "colors",
                expected: positions.len(),
                got: colors.len(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != positions.len() {
                return Err(CloudError::LengthMismatch { what: "labels", expected: positions.len(), got: l.len() });
            }
            if let Some((record, &label)) = l.iter().enumerate().find(|(_, &c)| c >= class_count) {
                return Err(CloudError::LabelOutOfRange { record, line: None, label, class_count });
            }
        }
        if let Some(record) = positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(CloudError::NonFinite { record, line: None });
        }
        Ok(Self { positions, colors, labels, class_count })
    }

    pub fn empty(class_count: usize, with_labels: bool) -> Self {
        Self { positions: Vec::new(), colors: Vec::new(), labels: with_labels.then(Vec::new), class_count }
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn colors(&self) -> &[Color] {
        &self.colors
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Same points with labels dropped.
    pub fn without_labels(&self) -> Self {
        Self { labels: None, ..self.clone() }
    }

    /// Same colors and labels at new (finite) positions.
    pub fn with_positions(&self, positions: Vec<Point3>) -> Result<Self> {
        Self::new(positions, self.colors.clone(), self.labels.clone(), self.class_count)
    }

    /// Points at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
        }
    }

    /// Per-class point counts (all zeros for an unlabeled cloud).
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in self.labels.iter().flatten() {
            h[l] += 1;
        }
        h
    }

    /// Smallest half-open region containing every point, or `None` when empty.
    pub fn bounding_region(&self) -> Option<BoundingRegion> {
        let first = self.positions.first()?;
        let mut min = [first[0], first[1]];
        let mut max = min;
        for p in &self.positions {
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Some(BoundingRegion { min, max: [max[0].next_up(), max[1].next_up()] })
    }
}

/// Axis-aligned region in the xy-plane, half-open: `min <= (x, y) < max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingRegion {
    min: [f64; 2],
    max: [f64; 2],
}

impl BoundingRegion {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Result<Self> {
        if !(min[0] <= max[0] && min[1] <= max[1]) {
            return Err(CloudError::InvalidParameter(format!("region min {min:?} exceeds max {max:?}")));
        }
        Ok(Self { min, max })
    }

    /// Square of side `size` centred on `center`.
    pub fn centered(center: [f64; 2], size: f64) -> Result<Self> {
        let h = size / 2.0;
        Self::new([center[0] - h, center[1] - h], [center[0] + h, center[1] + h])
    }

    pub fn min(&self) -> [f64; 2] {
        self.min
    }

    pub fn max(&self) -> [f64; 2] {
        self.max
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.min[0] <= x && x < self.max[0] && self.min[1] <= y && y < self.max[1]
    }
}

/// Points whose xy position lies in `region`, in their original order.
pub fn crop(cloud: &LabeledPointCloud, region: &BoundingRegion) -> LabeledPointCloud {
    let keep: Vec<usize> = cloud
        .positions()
        .iter()
        .enumerate()
        .filter(|(_, p)| region.contains(p[0], p[1]))
        .map(|(i, _)| i)
        .collect();
    cloud.select(&keep)
}
