//! Similarity transforms applied to a cloud before its raster is built, so
//! the two representations stay in exact correspondence.

use apnet_core::{LabeledPointCloud, Point3};
use rand::Rng;

use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    /// Rotation about the vertical axis through the center (radians).
    pub angle: f64,
    /// Mirror y about the center after rotating.
    pub flip_y: bool,
    /// Isotropic scale about the center, applied last.
    pub scale: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { angle: 0.0, flip_y: false, scale: 1.0 };

    /// Uniform angle, a fair coin for the flip and a scale in `[0.9, 1.1]`.
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            angle: rng.gen_range(0.0..std::f64::consts::TAU),
            flip_y: rng.gen_bool(0.5),
            scale: rng.gen_range(0.9..=1.1),
        }
    }

    /// Transforms one point; `center` is the xy pivot. Heights are scaled
    /// about zero.
    pub fn apply_point(&self, p: &Point3, center: [f64; 2]) -> Point3 {
        let (sin, cos) = self.angle.sin_cos();
        let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
        let (mut x, mut y) = if self.angle == 0.0 { (dx, dy) } else { (cos * dx - sin * dy, sin * dx + cos * dy) };
        if self.flip_y {
            y = -y;
        }
        x *= self.scale;
        y *= self.scale;
        [center[0] + x, center[1] + y, p[2] * self.scale]
    }

    pub fn apply(&self, cloud: &LabeledPointCloud, center: [f64; 2]) -> Result<LabeledPointCloud> {
        let moved = cloud.positions().iter().map(|p| self.apply_point(p, center)).collect();
        Ok(cloud.with_positions(moved)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_exact() {
        let p = [3.25, -1.5, 2.0];
        assert_eq!(Augmentation::IDENTITY.apply_point(&p, [10.0, 4.0]), p);
    }

    #[test]
    fn flip_is_an_involution() {
        let flip = Augmentation { flip_y: true, ..Augmentation::IDENTITY };
        let p = [3.25, -1.5, 2.0];
        assert_eq!(flip.apply_point(&flip.apply_point(&p, [1.0, 2.0]), [1.0, 2.0]), p);
    }

    #[test]
    fn draws_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let a = Augmentation::draw(&mut rng);
            assert!((0.9..=1.1).contains(&a.scale));
            assert!((0.0..std::f64::consts::TAU).contains(&a.angle));
        }
    }
}
