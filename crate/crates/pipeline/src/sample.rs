//! Turns a labeled cloud into the inputs of one forward pass: the cropped
//! cloud, its completed aerial raster and its grid-downsampled support set.

use apnet_autograd::Tensor;
use apnet_core::{
    complete_image, crop, grid_downsample, project_to_aerial, AerialRaster, BoundingRegion, DownsampledCloud, LabeledPointCloud,
    RasterGeometry, SpatialIndex,
};
use apnet_model::{SampleInputs, IGNORE};

use crate::config::ExperimentConfig;
use crate::{PipelineError, Result};

pub struct PreparedSample {
    pub inputs: SampleInputs,
    /// The cropped cloud whose points are the fused-head queries.
    pub cloud: LabeledPointCloud,
    pub raster: AerialRaster,
    pub down: DownsampledCloud,
}

/// [`prepare_crop`] at the configured raster size.
pub fn prepare_sample(cloud: &LabeledPointCloud, center: [f64; 2], config: &ExperimentConfig) -> Result<PreparedSample> {
    prepare_crop(cloud, center, config, config.raster.width, config.raster.height)
}

/// Crops a `width x height` pixel footprint centred on `center`, projects and
/// completes its raster, downsamples the points and assembles the model
/// inputs.
pub fn prepare_crop(
    cloud: &LabeledPointCloud,
    center: [f64; 2],
    config: &ExperimentConfig,
    width: usize,
    height: usize,
) -> Result<PreparedSample> {
    let r = &config.raster;
    let (cw, ch) = (r.pixel_size * width as f64, r.pixel_size * height as f64);
    let region = BoundingRegion::new([center[0] - cw / 2.0, center[1] - ch / 2.0], [center[0] + cw / 2.0, center[1] + ch / 2.0])?;
    let geometry = RasterGeometry::new(r.pixel_size, region.min(), width, height)?;
    let cropped = crop(cloud, &region);
    // Points on the far border can still quantize one pixel out of range.
    let keep: Vec<usize> =
        (0..cropped.len()).filter(|&i| geometry.pixel_in_raster(cropped.positions()[i][0], cropped.positions()[i][1]).is_some()).collect();
    let cropped = cropped.select(&keep);
    if cropped.is_empty() {
        return Err(PipelineError::EmptySample(format!("no points inside the raster footprint at {center:?}")));
    }
    let original_labels = cropped.labels().ok_or(apnet_core::CloudError::LabelsRequired)?.to_vec();

    let raster = complete_image(&project_to_aerial(&cropped, geometry), r.completion_passes);
    let image = Tensor::new(vec![height, width, raster.channels], raster.data.clone())?;
    let pixel_labels = raster.label_target(IGNORE)?;

    let down = grid_downsample(&cropped, config.sampling.grid_size)?;
    let down_labels = down.labels.clone().ok_or(apnet_core::CloudError::LabelsRequired)?;
    let zmin = down.positions.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    // Fixed horizontal scale so crops of any size share one feature range.
    let [fw, fh] = config.coverage();
    let (hx, hy) = (fw / 2.0, fh / 2.0);
    let hs = config.sampling.height_scale;
    let mut features = Vec::with_capacity(down.len() * 6);
    for (p, c) in down.positions.iter().zip(&down.colors) {
        features.extend_from_slice(&[(p[0] - center[0]) / hx, (p[1] - center[1]) / hy, (p[2] - zmin) / hs, c[0], c[1], c[2]]);
    }
    let point_features = Tensor::new(vec![down.len(), 6], features)?;

    let index = SpatialIndex::build(&down.positions, config.sampling.grid_size)?;
    let nearest_down = cropped.positions().iter().map(|p| index.nearest_neighbor(p)).collect::<std::result::Result<Vec<_>, _>>()?;

    let inputs = SampleInputs {
        image,
        geometry,
        pixel_labels,
        down_positions: down.positions.clone(),
        point_features,
        down_labels,
        original_positions: cropped.positions().to_vec(),
        original_labels,
        nearest_down,
    };
    Ok(PreparedSample { inputs, cloud: cropped, raster, down })
}
