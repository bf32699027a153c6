//! Front-facing pinhole depth camera rendered by raycasting the world.
//!
//! Pixel values are axial depth (distance along the optical axis) divided by
//! `max_range`, clipped to `[0, 1]`; misses read 1.0. Row 0 is the top of
//! the image and column 0 its left edge.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::primitives::body_to_world;
use crate::world::{ray_intersect, WorldSpec};
use crate::Vec3;

/// Fixed image resolution (square).
pub const IMAGE_SIZE: usize = 32;
pub const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub horizontal_fov: f64,
    pub vertical_fov: f64,
    pub max_range: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            horizontal_fov: 1.571,
            vertical_fov: 1.047,
            max_range: 20.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn is_valid(&self) -> bool {
        let fov_ok = |f: f64| f > 0.0 && f < std::f64::consts::PI;
        fov_ok(self.horizontal_fov) && fov_ok(self.vertical_fov) && self.max_range > 0.0
    }

    /// Body-frame ray through the centre of pixel `(row, col)`, scaled so its
    /// forward component is 1.
    pub fn pixel_ray(&self, row: usize, col: usize) -> Vec3 {
        let ndc = |i: usize| (i as f64 + 0.5) / IMAGE_SIZE as f64 * 2.0 - 1.0;
        let half_w = (self.horizontal_fov / 2.0).tan();
        let half_h = (self.vertical_fov / 2.0).tan();
        Vec3::new(1.0, -ndc(col) * half_w, -ndc(row) * half_h)
    }
}

/// Normalized 32×32 depth image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pixels: Vec<f64>,
}

impl DepthImage {
    pub fn filled(value: f64) -> Self {
        Self {
            pixels: vec![value; PIXELS],
        }
    }

    /// Wraps raw pixels; rejects wrong sizes and values outside `[0, 1]`.
    pub fn from_pixels(pixels: Vec<f64>) -> Option<Self> {
        (pixels.len() == PIXELS && pixels.iter().all(|v| (0.0..=1.0).contains(v)))
            .then_some(Self { pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * IMAGE_SIZE + col]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn flipped_horizontally(&self) -> Self {
        let mut pixels = self.pixels.clone();
        for row in pixels.chunks_exact_mut(IMAGE_SIZE) {
            row.reverse();
        }
        Self { pixels }
    }

    /// Plain-text PGM (P2), maxval 255.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n");
        for row in self.pixels.chunks_exact(IMAGE_SIZE) {
            let line: Vec<String> = row
                .iter()
                .map(|v| ((v * 255.0).round() as u32).to_string())
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Renders the depth image seen from `position` with the optical axis at `yaw`.
pub fn render(
    world: &WorldSpec,
    position: &Vec3,
    yaw: f64,
    intrinsics: &CameraIntrinsics,
) -> DepthImage {
    let mut pixels = Vec::with_capacity(PIXELS);
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let ray = intrinsics.pixel_ray(row, col);
            let scale = ray.norm();
            let dir = body_to_world(yaw, &(ray / scale));
            let depth = ray_intersect(world, position, &dir)
                // Unit-ray distance to axial depth.
                .map(|d| d / scale)
                .unwrap_or(f64::INFINITY);
            pixels.push(depth.min(intrinsics.max_range) / intrinsics.max_range);
        }
    }
    DepthImage { pixels }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum NoiseModel {
    #[default]
    None,
    Gaussian {
        sigma: f64,
    },
}

/// Additive per-pixel noise, re-clipped to `[0, 1]`.
pub fn add_noise<R: Rng + ?Sized>(image: &DepthImage, model: NoiseModel, rng: &mut R) -> DepthImage {
    match model {
        NoiseModel::Gaussian { sigma } if sigma > 0.0 => {
            let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
            let pixels = image
                .pixels
                .iter()
                .map(|v| (v + normal.sample(rng)).clamp(0.0, 1.0))
                .collect();
            DepthImage { pixels }
        }
        _ => image.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Aabb, Obstacle};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world(obstacles: Vec<Obstacle>) -> WorldSpec {
        WorldSpec {
            name: "cam".into(),
            obstacles,
            path_start: Vec3::zeros(),
            path_end: Vec3::new(1.0, 0.0, 0.0),
            bounds: None,
        }
    }

    fn wall_at(x: f64) -> Obstacle {
        Obstacle::Box(Aabb::new(
            Vec3::new(x, -1e4, -1e4),
            Vec3::new(x + 1.0, 1e4, 1e4),
        ))
    }

    #[test]
    fn empty_world_reads_far() {
        let mut w = world(vec![]);
        w.bounds = Some(Aabb::new(Vec3::repeat(-1e6), Vec3::repeat(1e6)));
        let img = render(&w, &Vec3::zeros(), 0.3, &CameraIntrinsics::default());
        assert!(img.pixels().iter().all(|&v| v == 1.0));
        let img = render(&world(vec![]), &Vec3::zeros(), 0.0, &CameraIntrinsics::default());
        assert!(img.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn flat_wall_has_constant_axial_depth() {
        let img = render(&world(vec![wall_at(10.0)]), &Vec3::zeros(), 0.0, &CameraIntrinsics::default());
        for v in img.pixels() {
            assert!((v - 0.5).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn yaw_turns_the_optical_axis() {
        let w = world(vec![Obstacle::Box(Aabb::new(
            Vec3::new(-1e4, 7.0, -1e4),
            Vec3::new(1e4, 8.0, 1e4),
        ))]);
        let img = render(&w, &Vec3::zeros(), std::f64::consts::FRAC_PI_2, &CameraIntrinsics::default());
        for v in img.pixels() {
            assert!((v - 0.35).abs() < 1e-12);
        }
    }

    #[test]
    fn approaching_a_wall_never_increases_depth() {
        let w = world(vec![wall_at(25.0)]);
        let cam = CameraIntrinsics::default();
        let mut previous = render(&w, &Vec3::zeros(), 0.0, &cam);
        for step in 1..20 {
            let img = render(&w, &Vec3::new(step as f64, 0.0, 0.0), 0.0, &cam);
            for (a, b) in img.pixels().iter().zip(previous.pixels()) {
                assert!(a < b || (*a == 1.0 && *b == 1.0));
            }
            previous = img;
        }
    }

    #[test]
    fn noise_models() {
        let img = render(&world(vec![wall_at(10.0)]), &Vec3::zeros(), 0.0, &CameraIntrinsics::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(add_noise(&img, NoiseModel::None, &mut rng), img);
        assert_eq!(add_noise(&img, NoiseModel::Gaussian { sigma: 0.0 }, &mut rng), img);

        let a = add_noise(&img, NoiseModel::Gaussian { sigma: 0.05 }, &mut ChaCha8Rng::seed_from_u64(7));
        let b = add_noise(&img, NoiseModel::Gaussian { sigma: 0.05 }, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        assert_ne!(a, img);
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));

        let saturated = add_noise(&DepthImage::filled(1.0), NoiseModel::Gaussian { sigma: 0.5 }, &mut rng);
        assert!(saturated.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pgm_encoding() {
        let pgm = DepthImage::filled(0.5).to_pgm();
        let mut lines = pgm.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("32 32"));
        assert_eq!(lines.next(), Some("255"));
        let values: Vec<&str> = lines.flat_map(str::split_whitespace).collect();
        assert_eq!(values.len(), PIXELS);
        assert!(values.iter().all(|v| *v == "128"));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::default().is_valid());
        let bad = CameraIntrinsics {
            horizontal_fov: 3.2,
            ..Default::default()
        };
        assert!(!bad.is_valid());
        assert!(DepthImage::from_pixels(vec![0.5; PIXELS]).is_some());
        assert!(DepthImage::from_pixels(vec![1.5; PIXELS]).is_none());
        assert!(DepthImage::from_pixels(vec![0.5; 10]).is_none());
    }
}
