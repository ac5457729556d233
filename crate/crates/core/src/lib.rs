//! Point clouds, aerial rasters and grid sampling.

pub mod aerial;
mod cloud;
pub mod io;
pub mod sampling;
pub mod spatial;

pub use aerial::{complete_image, pixel_of, project_labels, project_to_aerial, AerialRaster, RasterGeometry};
pub use cloud::{crop, BoundingRegion, Color, LabeledPointCloud, Point3};
pub use io::{read_cloud, write_cloud, CloudFormat};
pub use sampling::{grid_downsample, DownsampledCloud};
pub use spatial::SpatialIndex;

#[derive(Debug, thiserror::Error)]
pub enum CloudError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("non-finite coordinate in record {record}{}", at_line(*.line))]
    NonFinite { record: usize, line: Option<usize> },
    #[error("label {label} of record {record}{} is not below class count {class_count}", at_line(*.line))]
    LabelOutOfRange { record: usize, line: Option<usize>, label: usize, class_count: usize },
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("ply: {0}")]
    Ply(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("labels required")]
    LabelsRequired,
    #[error("unsupported: {0}")]
    Unsupported(String),
}

fn at_line(line: Option<usize>) -> String {
    line.map(|l| format!(" (line {l})")).unwrap_or_default()
}

pub type Result<T> = std::result::Result<T, CloudError>;
