//! Orthographic top-down projection of a point cloud into a raster, plus
//! null-pixel completion and raster dumps.
//!
//! Pixel `(u, v)` covers world `[x0 + u s, x0 + (u + 1) s) x [y0 + v s, y0 + (v + 1) s)`.
//! Planes are stored row-major with `v` as the row index, so a raster maps
//! directly onto an `H x W x C` tensor.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::{CloudError, LabeledPointCloud, Result};

/// World-to-pixel transform and raster extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterGeometry {
    pub pixel_size: f64,
    pub origin: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl RasterGeometry {
    pub fn new(pixel_size: f64, origin: [f64; 2], width: usize, height: usize) -> Result<Self> {
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(CloudError::InvalidParameter(format!("pixel size must be positive, got {pixel_size}")));
        }
        if width == 0 || height == 0 {
            return Err(CloudError::InvalidParameter(format!("raster size {width}x{height} is empty")));
        }
        if !origin.iter().all(|o| o.is_finite()) {
            return Err(CloudError::InvalidParameter("raster origin must be finite".into()));
        }
        Ok(Self { pixel_size, origin, width, height })
    }

    /// Origin at the cloud's minimum x and y.
    pub fn for_cloud(cloud: &LabeledPointCloud, pixel_size: f64, width: usize, height: usize) -> Result<Self> {
        let region = cloud
            .bounding_region()
            .ok_or_else(|| CloudError::InvalidParameter("cannot place a raster on an empty cloud".into()))?;
        Self::new(pixel_size, region.min(), width, height)
    }

    pub fn pixel_of(&self, x: f64, y: f64) -> (i64, i64) {
        pixel_of(x, y, self.pixel_size, self.origin)
    }

    /// `pixel_of` restricted to pixels inside the raster.
    pub fn pixel_in_raster(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (u, v) = self.pixel_of(x, y);
        (u >= 0 && v >= 0 && (u as usize) < self.width && (v as usize) < self.height).then_some((u as usize, v as usize))
    }

    /// World position of a pixel's center.
    pub fn pixel_center(&self, u: usize, v: usize) -> [f64; 2] {
        [
            (u as f64 + 0.5) * self.pixel_size + self.origin[0],
            (v as f64 + 0.5) * self.pixel_size + self.origin[1],
        ]
    }

    /// Continuous sample coordinate with pixel centers at integers.
    pub fn sample_coord(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin[0]) / self.pixel_size - 0.5, (y - self.origin[1]) / self.pixel_size - 0.5)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Integer pixel of a world position: `floor((x - x0) / s)`, `floor((y - y0) / s)`.
/// The result may lie outside any particular raster.
pub fn pixel_of(x: f64, y: f64, s: f64, origin: [f64; 2]) -> (i64, i64) {
    (((x - origin[0]) / s).floor() as i64, ((y - origin[1]) / s).floor() as i64)
}

/// A fixed-resolution raster of per-pixel channels with validity, height and
/// optional label planes.
#[derive(Clone, Debug, PartialEq)]
pub struct AerialRaster {
    pub geometry: RasterGeometry,
    /// Values per pixel (3 for color, 0 for a label-only raster).
    pub channels: usize,
    /// `height * width * channels` values, zero on null pixels.
    pub data: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    pub valid: Vec<bool>,
    /// Highest z per pixel; `-inf` on null pixels.
    pub heights: Vec<f64>,
    pub class_count: usize,
}

impl AerialRaster {
    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.geometry.width + u
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = self.index(u, v) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn label(&self, u: usize, v: usize) -> Option<usize> {
        let i = self.index(u, v);
        if self.valid[i] {
            self.labels.as_ref().map(|l| l[i])
        } else {
            None
        }
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[self.index(u, v)]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    /// Label plane with null pixels set to `ignore`.
    pub fn label_target(&self, ignore: usize) -> Result<Vec<usize>> {
        let labels = self.labels.as_ref().ok_or(CloudError::LabelsRequired)?;
        Ok(labels.iter().zip(&self.valid).map(|(&l, &ok)| if ok { l } else { ignore }).collect())
    }
}

fn project(cloud: &LabeledPointCloud, geometry: RasterGeometry, with_color: bool) -> AerialRaster {
    let n = geometry.pixel_count();
    let mut winner: Vec<Option<usize>> = vec![None; n];
    let mut heights = vec![f64::NEG_INFINITY; n];
    for (i, p) in cloud.positions().iter().enumerate() {
        let Some((u, v)) = geometry.pixel_in_raster(p[0], p[1]) else { continue };
        let k = v * geometry.width + u;
        // `>=` lets a later point win an equal-height collision.
        if winner[k].is_none() || p[2] >= heights[k] {
            winner[k] = Some(i);
            heights[k] = p[2];
        }
    }
    let channels = if with_color { 3 } else { 0 };
    let mut data = vec![0.0; n * channels];
    if with_color {
        for (k, w) in winner.iter().enumerate() {
            if let Some(i) = *w {
                data[k * 3..k * 3 + 3].copy_from_slice(&cloud.colors()[i]);
            }
        }
    }
    let labels = cloud.labels().map(|l| winner.iter().map(|w| w.map_or(0, |i| l[i])).collect());
    AerialRaster {
        geometry,
        channels,
        data,
        labels,
        valid: winner.iter().map(Option::is_some).collect(),
        heights,
        class_count: cloud.class_count(),
    }
}

/// Keeps the color (and label, when present) of the highest point in each
/// pixel. Points outside the raster are dropped.
pub fn project_to_aerial(cloud: &LabeledPointCloud, geometry: RasterGeometry) -> AerialRaster {
    project(cloud, geometry, true)
}

/// Label-only projection with the same highest-point rule.
pub fn project_labels(cloud: &LabeledPointCloud, geometry: RasterGeometry) -> Result<AerialRaster> {
    if cloud.labels().is_none() {
        return Err(CloudError::LabelsRequired);
    }
    Ok(project(cloud, geometry, false))
}

/// Value a completed pixel inherits: its label when a label plane exists,
/// otherwise the exact channel values.
fn mode_key(raster: &AerialRaster, k: usize) -> Vec<u64> {
    match &raster.labels {
        Some(l) => vec![l[k] as u64],
        None => raster.data[k * raster.channels..(k + 1) * raster.channels].iter().map(|x| x.to_bits()).collect(),
    }
}

/// Fills null pixels that have at least three valid 8-neighbours with the
/// modal neighbour value, copying that neighbour's channels, label and height.
/// Mode ties go to the value held by the highest neighbour, then to the
/// smallest value. Each pass reads only the previous pass's state.
pub fn complete_image(raster: &AerialRaster, passes: usize) -> AerialRaster {
    let mut cur = raster.clone();
    let (w, h) = (raster.width(), raster.height());
    for _ in 0..passes {
        let mut fills: Vec<(usize, usize)> = Vec::new();
        for v in 0..h {
            for u in 0..w {
                let k = v * w + u;
                if cur.valid[k] {
                    continue;
                }
                let mut neighbours = Vec::with_capacity(8);
                for dv in -1i64..=1 {
                    for du in -1i64..=1 {
                        let (nu, nv) = (u as i64 + du, v as i64 + dv);
                        if (du, dv) == (0, 0) || nu < 0 || nv < 0 || nu >= w as i64 || nv >= h as i64 {
                            continue;
                        }
                        let nk = nv as usize * w + nu as usize;
                        if cur.valid[nk] {
                            neighbours.push(nk);
                        }
                    }
                }
                if neighbours.len() < 3 {
                    continue;
                }
                let keys: Vec<Vec<u64>> = neighbours.iter().map(|&nk| mode_key(&cur, nk)).collect();
                let count = |key: &Vec<u64>| keys.iter().filter(|k| *k == key).count();
                let best = (0..neighbours.len())
                    .max_by(|&a, &b| {
                        count(&keys[a])
                            .cmp(&count(&keys[b]))
                            .then(cur.heights[neighbours[a]].total_cmp(&cur.heights[neighbours[b]]))
                            .then(keys[b].cmp(&keys[a]))
                            .then(b.cmp(&a))
                    })
                    .expect("at least three neighbours");
                fills.push((k, neighbours[best]));
            }
        }
        if fills.is_empty() {
            break;
        }
        let prev = cur.clone();
        for (k, src) in fills {
            let c = cur.channels;
            cur.data[k * c..(k + 1) * c].copy_from_slice(&prev.data[src * c..(src + 1) * c]);
            if let Some(l) = cur.labels.as_mut() {
                l[k] = prev.labels.as_ref().expect("same planes")[src];
            }
            cur.heights[k] = prev.heights[src];
            cur.valid[k] = true;
        }
    }
    cur
}

/// Run lengths of the valid mask in row-major order, starting with a
/// (possibly zero) run of null pixels and alternating thereafter.
pub fn encode_mask(valid: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut state = false;
    let mut len = 0;
    for &b in valid {
        if b == state {
            len += 1;
        } else {
            runs.push(len);
            state = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn decode_mask(runs: &[usize]) -> Vec<bool> {
    runs.iter().enumerate().flat_map(|(i, &n)| std::iter::repeat_n(i % 2 == 1, n)).collect()
}

/// Fixed palette for label rasters; null pixels are black.
pub fn class_color(class: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 13] = [
        [85, 107, 47],
        [0, 255, 0],
        [255, 165, 0],
        [41, 49, 101],
        [0, 0, 0],
        [0, 0, 255],
        [255, 0, 255],
        [200, 200, 200],
        [89, 47, 95],
        [255, 0, 0],
        [255, 255, 0],
        [0, 255, 255],
        [0, 191, 255],
    ];
    if class < PALETTE.len() {
        PALETTE[class]
    } else {
        let x = (class as u32).wrapping_mul(2654435761);
        [(x >> 24) as u8, (x >> 16) as u8, (x >> 8) as u8]
    }
}

/// Paths written by [`dump_raster`].
#[derive(Clone, Debug)]
pub struct RasterDump {
    pub header: std::path::PathBuf,
    pub color: Option<std::path::PathBuf>,
    pub labels: Option<std::path::PathBuf>,
    pub label_colors: Option<std::path::PathBuf>,
}

/// Writes `<stem>.txt` (geometry and run-length valid mask), `<stem>.ppm`
/// (color plane), `<stem>-labels.pgm` (raw class indices) and
/// `<stem>-labels.ppm` (palette rendering). Image row `v` is raster row `v`.
pub fn dump_raster(raster: &AerialRaster, dir: &Path, stem: &str) -> Result<RasterDump> {
    fs::create_dir_all(dir)?;
    let (w, h) = (raster.width(), raster.height());
    let g = raster.geometry;
    let mut header = String::new();
    writeln!(header, "aerial-raster 1").unwrap();
    writeln!(header, "width {w}").unwrap();
    writeln!(header, "height {h}").unwrap();
    writeln!(header, "pixel_size {}", g.pixel_size).unwrap();
    writeln!(header, "origin {} {}", g.origin[0], g.origin[1]).unwrap();
    writeln!(header, "class_count {}", raster.class_count).unwrap();
    let runs: Vec<String> = encode_mask(&raster.valid).iter().map(usize::to_string).collect();
    writeln!(header, "valid_rle {}", runs.join(" ")).unwrap();
    let header_path = dir.join(format!("{stem}.txt"));
    fs::write(&header_path, header)?;

    let mut dump = RasterDump { header: header_path, color: None, labels: None, label_colors: None };
    if raster.channels == 3 {
        let bytes: Vec<u8> = raster.data.iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let path = dir.join(format!("{stem}.ppm"));
        write_netpbm(&path, "P6", w, h, &bytes)?;
        dump.color = Some(path);
    }
    if let Some(labels) = &raster.labels {
        if raster.class_count > 255 {
            return Err(CloudError::Unsupported("label dumps with more than 255 classes".into()));
        }
        // Null pixels are written as 255.
        let raw: Vec<u8> = labels.iter().zip(&raster.valid).map(|(&l, &ok)| if ok { l as u8 } else { 255 }).collect();
        let path = dir.join(format!("{stem}-labels.pgm"));
        write_netpbm(&path, "P5", w, h, &raw)?;
        dump.labels = Some(path);
        let rgb: Vec<u8> = labels
            .iter()
            .zip(&raster.valid)
            .flat_map(|(&l, &ok)| if ok { class_color(l) } else { [0, 0, 0] })
            .collect();
        let path = dir.join(format!("{stem}-labels.ppm"));
        write_netpbm(&path, "P6", w, h, &rgb)?;
        dump.label_colors = Some(path);
    }
    Ok(dump)
}

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "{magic}\n{w} {h}\n255\n")?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

/// Geometry, class count and valid mask recovered from a dump header.
pub fn read_raster_header(path: &Path) -> Result<(RasterGeometry, usize, Vec<bool>)> {
    let text = fs::read_to_string(path)?;
    let mut width = None;
    let mut height = None;
    let mut pixel_size = None;
    let mut origin = None;
    let mut class_count = 0;
    let mut runs = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let bad = |m: &str| CloudError::Parse { line: line_no, message: m.to_string() };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("invalid number"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid integer"));
        match fields.as_slice() {
            [] => {}
            ["aerial-raster", "1"] if line_no == 1 => {}
            _ if line_no == 1 => return Err(bad("expected `aerial-raster 1`")),
            ["width", x] => width = Some(int(x)?),
            ["height", x] => height = Some(int(x)?),
            ["pixel_size", x] => pixel_size = Some(num(x)?),
            ["origin", x, y] => origin = Some([num(x)?, num(y)?]),
            ["class_count", x] => class_count = int(x)?,
            ["valid_rle", rest @ ..] => runs = Some(rest.iter().map(|r| int(r)).collect::<Result<Vec<_>>>()?),
            _ => return Err(bad("unrecognised entry")),
        }
    }
    let missing = |what: &str| CloudError::Parse { line: 0, message: format!("raster header lacks `{what}`") };
    let geometry = RasterGeometry::new(
        pixel_size.ok_or_else(|| missing("pixel_size"))?,
        origin.ok_or_else(|| missing("origin"))?,
        width.ok_or_else(|| missing("width"))?,
        height.ok_or_else(|| missing("height"))?,
    )?;
    let mask = decode_mask(&runs.ok_or_else(|| missing("valid_rle"))?);
    if mask.len() != geometry.pixel_count() {
        return Err(CloudError::LengthMismatch { what: "valid mask", expected: geometry.pixel_count(), got: mask.len() });
    }
    Ok((geometry, class_count, mask))
}
