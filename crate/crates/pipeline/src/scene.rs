//! Procedural urban scenes with per-point class labels.
//!
//! A scene is a square patch crossed by one road with a footpath on each
//! side. Buildings, trees and walls stand on the open ground, cars sit on the
//! road and poles on the footpaths. Every surface is sampled at a fixed
//! density, so point counts scale linearly with it.

use apnet_core::{Color, LabeledPointCloud, Point3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{PipelineError, Result};

pub const GROUND: usize = 0;
pub const BUILDING: usize = 1;
pub const VEGETATION: usize = 2;
pub const WALL: usize = 3;
pub const CAR: usize = 4;
pub const STREET_FURNITURE: usize = 5;
pub const ROAD: usize = 6;
pub const FOOTPATH: usize = 7;

pub const CLASS_NAMES: [&str; 8] =
    ["ground", "building", "vegetation", "wall", "car", "street-furniture", "road", "footpath"];
pub const CLASS_COUNT: usize = CLASS_NAMES.len();

const ROAD_WIDTH: f64 = 4.0;
const FOOTPATH_WIDTH: f64 = 1.5;
const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    /// Side of the square scene (meters).
    pub extent: f64,
    /// Points per square meter of sampled surface.
    pub density: f64,
    /// Classes to generate. Ground fills whatever the other classes leave.
    pub classes: Vec<usize>,
    pub buildings: usize,
    pub trees: usize,
    pub walls: usize,
    pub cars: usize,
    pub poles: usize,
    /// Standard deviation of per-point color noise.
    pub color_noise: f64,
    /// Surfaces of an underpopulated class are resampled up to this count.
    pub min_points_per_class: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            extent: 33.0,
            density: 25.0,
            classes: (0..CLASS_COUNT).collect(),
            buildings: 3,
            trees: 5,
            walls: 3,
            cars: 3,
            poles: 5,
            color_noise: 0.05,
            min_points_per_class: 20,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0 && self.extent.is_finite() && self.density > 0.0 && self.density.is_finite()) {
            return Err(PipelineError::Config("scene extent and density must be positive".into()));
        }
        if !(self.color_noise >= 0.0 && self.color_noise.is_finite()) {
            return Err(PipelineError::Config("color noise must be non-negative".into()));
        }
        if self.classes.is_empty() {
            return Err(PipelineError::Config("scene needs at least one class".into()));
        }
        if let Some(c) = self.classes.iter().find(|&&c| c >= CLASS_COUNT) {
            return Err(PipelineError::Config(format!("unknown scene class {c}")));
        }
        let mut sorted = self.classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return Err(PipelineError::Config("scene classes contain duplicates".into()));
        }
        Ok(())
    }

    fn has(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }
}

fn base_color(class: usize) -> Color {
    match class {
        GROUND => [0.42, 0.45, 0.30],
        BUILDING => [0.62, 0.38, 0.32],
        VEGETATION => [0.22, 0.48, 0.20],
        WALL => [0.66, 0.64, 0.60],
        STREET_FURNITURE => [0.30, 0.30, 0.32],
        ROAD => [0.33, 0.33, 0.35],
        FOOTPATH => [0.58, 0.55, 0.50],
        _ => [0.5, 0.5, 0.5],
    }
}

const FACADE: Color = [0.70, 0.62, 0.55];
const TRUNK: Color = [0.35, 0.26, 0.18];
const CAR_PAINT: [Color; 5] =
    [[0.75, 0.10, 0.10], [0.10, 0.20, 0.60], [0.90, 0.90, 0.90], [0.10, 0.10, 0.10], [0.50, 0.50, 0.55]];

#[derive(Clone, Debug)]
enum Shape {
    /// `origin + s * e1 + t * e2` for `s, t` in `[0, 1)`.
    Rect { origin: Point3, e1: Point3, e2: Point3 },
    /// Horizontal rectangle at ground level with noisy height; points under
    /// solid footprints are dropped.
    Ground { min: [f64; 2], max: [f64; 2] },
    Ellipsoid { center: Point3, radii: Point3 },
    Cylinder { base: Point3, radius: f64, height: f64 },
}

impl Shape {
    fn area(&self) -> f64 {
        match self {
            Shape::Rect { e1, e2, .. } => {
                let c = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
                (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
            }
            Shape::Ground { min, max } => (max[0] - min[0]) * (max[1] - min[1]),
            Shape::Ellipsoid { radii: [a, b, c], .. } => {
                // Thomsen's approximation.
                let p = 1.6075;
                let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                4.0 * std::f64::consts::PI * m.powf(1.0 / p)
            }
            Shape::Cylinder { radius, height, .. } => 2.0 * std::f64::consts::PI * radius * height,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, ground_noise: &Normal<f64>) -> Point3 {
        match self {
            Shape::Rect { origin, e1, e2 } => {
                let (s, t): (f64, f64) = (rng.gen(), rng.gen());
                [0, 1, 2].map(|a| origin[a] + s * e1[a] + t * e2[a])
            }
            Shape::Ground { min, max } => {
                [rng.gen_range(min[0]..max[0]), rng.gen_range(min[1]..max[1]), ground_noise.sample(rng)]
            }
            Shape::Ellipsoid { center, radii } => {
                let d: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
                [0, 1, 2].map(|a| center[a] + radii[a] * d[a] / n)
            }
            Shape::Cylinder { base, radius, height } => {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                [base[0] + radius * theta.cos(), base[1] + radius * theta.sin(), base[2] + rng.gen_range(0.0..*height)]
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Surface {
    shape: Shape,
    class: usize,
    color: Color,
}

/// Axis-aligned footprint in scene coordinates.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    min: [f64; 2],
    max: [f64; 2],
}

impl Footprint {
    fn around(center: [f64; 2], half: [f64; 2]) -> Self {
        Self { min: [center[0] - half[0], center[1] - half[1]], max: [center[0] + half[0], center[1] + half[1]] }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.min[0] <= x && x < self.max[0] && self.min[1] <= y && y < self.max[1]
    }

    fn overlaps(&self, other: &Footprint, margin: f64) -> bool {
        self.min[0] < other.max[0] + margin
            && other.min[0] < self.max[0] + margin
            && self.min[1] < other.max[1] + margin
            && other.min[1] < self.max[1] + margin
    }

    fn inside(&self, zone: &Footprint) -> bool {
        self.min[0] >= zone.min[0] && self.max[0] <= zone.max[0] && self.min[1] >= zone.min[1] && self.max[1] <= zone.max[1]
    }
}

struct Layout {
    open: Vec<Footprint>,
    road: Footprint,
    footpaths: Vec<Footprint>,
    taken: Vec<Footprint>,
    solid: Vec<Footprint>,
}

impl Layout {
    /// Draws footprints of the given half size until one fits in some zone of
    /// `zones` without touching earlier placements.
    fn place(&mut self, rng: &mut ChaCha8Rng, zones: &[Footprint], half: [f64; 2], what: &str) -> Result<Footprint> {
        for _ in 0..PLACEMENT_TRIES {
            let zone = zones.choose(rng).ok_or_else(|| infeasible(format!("no free area for {what}")))?;
            let lo = [zone.min[0] + half[0], zone.min[1] + half[1]];
            let hi = [zone.max[0] - half[0], zone.max[1] - half[1]];
            if lo[0] >= hi[0] || lo[1] >= hi[1] {
                continue;
            }
            let f = Footprint::around([rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])], half);
            if f.inside(zone) && !self.taken.iter().any(|t| t.overlaps(&f, 0.5)) {
                self.taken.push(f);
                return Ok(f);
            }
        }
        Err(infeasible(format!("could not place {what}; the scene is too small for the requested content")))
    }
}

fn infeasible(msg: String) -> PipelineError {
    PipelineError::Infeasible(msg)
}

fn tint(rng: &mut ChaCha8Rng, c: Color, amount: f64) -> Color {
    c.map(|x| (x + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

/// Top and side faces of an axis-aligned box resting at height `z0`.
fn box_faces(f: &Footprint, z0: f64, h: f64, class: usize, top: Color, side: Color) -> Vec<Surface> {
    let (x0, y0, x1, y1) = (f.min[0], f.min[1], f.max[0], f.max[1]);
    let (w, l) = (x1 - x0, y1 - y0);
    let up = [0.0, 0.0, h];
    let mut out = vec![Surface {
        shape: Shape::Rect { origin: [x0, y0, z0 + h], e1: [w, 0.0, 0.0], e2: [0.0, l, 0.0] },
        class,
        color: top,
    }];
    for (origin, e1) in [
        ([x0, y0, z0], [w, 0.0, 0.0]),
        ([x0, y1, z0], [w, 0.0, 0.0]),
        ([x0, y0, z0], [0.0, l, 0.0]),
        ([x1, y0, z0], [0.0, l, 0.0]),
    ] {
        out.push(Surface { shape: Shape::Rect { origin, e1, e2: up }, class, color: side });
    }
    out
}

fn build_surfaces(params: &SceneParams, rng: &mut ChaCha8Rng) -> Result<(Vec<Surface>, Vec<Footprint>)> {
    let e = params.extent;
    let streets = params.has(ROAD) || params.has(FOOTPATH) || params.has(CAR) || params.has(STREET_FURNITURE);
    let street_width = ROAD_WIDTH + 2.0 * FOOTPATH_WIDTH;
    if streets && e < street_width + 2.0 {
        return Err(infeasible(format!("extent {e} m cannot hold a {street_width} m street")));
    }
    // The street runs along x; swapping axes at the end gives either orientation.
    let along_x = rng.gen_bool(0.5);
    let mut layout = Layout { open: Vec::new(), road: Footprint::around([0.0; 2], [0.0; 2]), footpaths: Vec::new(), taken: Vec::new(), solid: Vec::new() };
    let mut surfaces = Vec::new();
    let ground_rect = |min: [f64; 2], max: [f64; 2], class: usize, surfaces: &mut Vec<Surface>, rng: &mut ChaCha8Rng| {
        if max[0] > min[0] && max[1] > min[1] && params.has(class) {
            surfaces.push(Surface { shape: Shape::Ground { min, max }, class, color: tint(rng, base_color(class), 0.03) });
        }
    };
    if streets {
        let center = rng.gen_range(0.35 * e..0.65 * e).clamp(street_width / 2.0 + 1.0, e - street_width / 2.0 - 1.0);
        let f0 = center - street_width / 2.0;
        let r0 = f0 + FOOTPATH_WIDTH;
        let r1 = r0 + ROAD_WIDTH;
        let f1 = r1 + FOOTPATH_WIDTH;
        layout.open = vec![Footprint { min: [0.0, 0.0], max: [e, f0] }, Footprint { min: [0.0, f1], max: [e, e] }];
        layout.road = Footprint { min: [0.0, r0], max: [e, r1] };
        layout.footpaths = vec![Footprint { min: [0.0, f0], max: [e, r0] }, Footprint { min: [0.0, r1], max: [e, f1] }];
        ground_rect([0.0, 0.0], [e, f0], GROUND, &mut surfaces, rng);
        ground_rect([0.0, f0], [e, r0], FOOTPATH, &mut surfaces, rng);
        ground_rect([0.0, r0], [e, r1], ROAD, &mut surfaces, rng);
        ground_rect([0.0, r1], [e, f1], FOOTPATH, &mut surfaces, rng);
        ground_rect([0.0, f1], [e, e], GROUND, &mut surfaces, rng);
    } else {
        layout.open = vec![Footprint { min: [0.0, 0.0], max: [e, e] }];
        ground_rect([0.0, 0.0], [e, e], GROUND, &mut surfaces, rng);
    }
    let open = layout.open.clone();

    if params.has(BUILDING) {
        for _ in 0..params.buildings {
            let half = [rng.gen_range(1.5..3.0), rng.gen_range(1.5..3.0)];
            let f = layout.place(rng, &open, half, "building")?;
            let h = rng.gen_range(3.0..8.0);
            let roof = tint(rng, base_color(BUILDING), 0.06);
            let facade = tint(rng, FACADE, 0.06);
            surfaces.extend(box_faces(&f, 0.0, h, BUILDING, roof, facade));
            layout.solid.push(f);
        }
    }
    if params.has(WALL) {
        for _ in 0..params.walls {
            let (len, thick) = (rng.gen_range(1.5..3.0), 0.125);
            let half = if rng.gen_bool(0.5) { [len, thick] } else { [thick, len] };
            let f = layout.place(rng, &open, half, "wall")?;
            let h = rng.gen_range(1.0..2.2);
            let c = tint(rng, base_color(WALL), 0.04);
            surfaces.extend(box_faces(&f, 0.0, h, WALL, c, c));
            layout.solid.push(f);
        }
    }
    if params.has(VEGETATION) {
        for _ in 0..params.trees {
            let radii = [rng.gen_range(1.2..2.2), rng.gen_range(1.2..2.2), rng.gen_range(1.0..1.8)];
            let f = layout.place(rng, &open, [radii[0], radii[1]], "tree")?;
            let c = [(f.min[0] + f.max[0]) / 2.0, (f.min[1] + f.max[1]) / 2.0];
            let trunk = rng.gen_range(1.5..3.0);
            let leaves = tint(rng, base_color(VEGETATION), 0.06);
            surfaces.push(Surface {
                shape: Shape::Ellipsoid { center: [c[0], c[1], trunk + radii[2]], radii },
                class: VEGETATION,
                color: leaves,
            });
            surfaces.push(Surface {
                shape: Shape::Cylinder { base: [c[0], c[1], 0.0], radius: 0.15, height: trunk + radii[2] * 0.5 },
                class: VEGETATION,
                color: TRUNK,
            });
        }
    }
    if params.has(CAR) && params.cars > 0 {
        let lanes = [layout.road];
        for _ in 0..params.cars {
            let f = layout.place(rng, &lanes, [2.0, 0.9], "car")?;
            let base = *CAR_PAINT.choose(rng).expect("palette");
            let paint = tint(rng, base, 0.05);
            surfaces.extend(box_faces(&f, 0.15, 1.35, CAR, paint, paint));
            layout.solid.push(f);
        }
    }
    if params.has(STREET_FURNITURE) && params.poles > 0 {
        let paths = layout.footpaths.clone();
        for _ in 0..params.poles {
            let f = layout.place(rng, &paths, [0.1, 0.1], "pole")?;
            let c = [(f.min[0] + f.max[0]) / 2.0, (f.min[1] + f.max[1]) / 2.0];
            let h = rng.gen_range(2.5..4.0);
            surfaces.push(Surface {
                shape: Shape::Cylinder { base: [c[0], c[1], 0.0], radius: 0.08, height: h },
                class: STREET_FURNITURE,
                color: base_color(STREET_FURNITURE),
            });
        }
    }

    if !along_x {
        for s in &mut surfaces {
            s.shape = swap_shape(&s.shape);
        }
        for f in &mut layout.solid {
            *f = Footprint { min: [f.min[1], f.min[0]], max: [f.max[1], f.max[0]] };
        }
    }
    Ok((surfaces, layout.solid))
}

fn swap_point(p: Point3) -> Point3 {
    [p[1], p[0], p[2]]
}

fn swap_shape(s: &Shape) -> Shape {
    match s {
        Shape::Rect { origin, e1, e2 } => Shape::Rect { origin: swap_point(*origin), e1: swap_point(*e1), e2: swap_point(*e2) },
        Shape::Ground { min, max } => Shape::Ground { min: [min[1], min[0]], max: [max[1], max[0]] },
        Shape::Ellipsoid { center, radii } => Shape::Ellipsoid { center: swap_point(*center), radii: swap_point(*radii) },
        Shape::Cylinder { base, radius, height } => Shape::Cylinder { base: swap_point(*base), radius: *radius, height: *height },
    }
}

/// Deterministic labeled scene for `seed`. Fails when the requested objects
/// do not fit into the scene or a requested class ends up without surfaces.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<LabeledPointCloud> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (surfaces, solid) = build_surfaces(params, &mut rng)?;

    let mut counts: Vec<usize> = surfaces.iter().map(|s| (params.density * s.shape.area()).round() as usize).collect();
    for &class in &params.classes {
        let members: Vec<usize> = (0..surfaces.len()).filter(|&i| surfaces[i].class == class).collect();
        if members.is_empty() {
            return Err(infeasible(format!("class {} requested but no surface carries it", CLASS_NAMES[class])));
        }
        let total: usize = members.iter().map(|&i| counts[i]).sum();
        if total < params.min_points_per_class {
            let area: f64 = members.iter().map(|&i| surfaces[i].shape.area()).sum();
            for &i in &members {
                counts[i] = (params.min_points_per_class as f64 * surfaces[i].shape.area() / area).ceil() as usize;
            }
        }
    }

    let ground_noise = Normal::new(0.0, 0.02).expect("valid normal");
    let color_noise = Normal::new(0.0, params.color_noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    for (surface, &n) in surfaces.iter().zip(&counts) {
        let mut emitted = 0;
        let mut attempts = 0;
        while emitted < n && attempts < 20 * n + 20 {
            attempts += 1;
            let p = surface.shape.sample(&mut rng, &ground_noise);
            if matches!(surface.shape, Shape::Ground { .. }) && solid.iter().any(|f| f.contains(p[0], p[1])) {
                continue;
            }
            let mut c = surface.color;
            if params.color_noise > 0.0 {
                c = c.map(|x| (x + color_noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
            positions.push(p);
            colors.push(c);
            labels.push(surface.class);
            emitted += 1;
        }
    }
    let cloud = LabeledPointCloud::new(positions, colors, Some(labels), CLASS_COUNT)?;
    let hist = cloud.label_histogram();
    if let Some(&c) = params.classes.iter().find(|&&c| hist[c] < params.min_points_per_class) {
        return Err(infeasible(format!(
            "class {} received {} points, fewer than the requested {}",
            CLASS_NAMES[c], hist[c], params.min_points_per_class
        )));
    }
    Ok(cloud)
}
