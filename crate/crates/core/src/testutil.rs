//! Small hand-built scenes for unit tests.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{camera_to_pixel, exact_rotation, normalize_homogeneous, small_rotation_matrix, CameraModel, NormalizedPoint, Pose, RotationVector};
use crate::tracks::{FeatureTracks, Observation, Track};

pub struct Scene {
    pub tracks: FeatureTracks,
    /// Index 0 is the reference frame.
    pub poses: Vec<Pose>,
    pub thetas: Vec<RotationVector>,
    /// Landmarks in the reference frame.
    pub points: Vec<Vector3<f64>>,
}

pub struct SceneSpec {
    pub seed: u64,
    pub landmarks: usize,
    pub frames: usize,
    pub depth: f64,
    pub depth_spread: f64,
    pub rotation: f64,
    pub translation: f64,
    /// Project with the linearized rotation instead of the exact one.
    pub first_order: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            landmarks: 40,
            frames: 6,
            depth: 5.0,
            depth_spread: 0.25,
            rotation: 0.01,
            translation: 0.02,
            first_order: false,
        }
    }
}

pub fn cam() -> CameraModel {
    CameraModel::from_fov(14.9, 1024, 1024).unwrap()
}

/// Frames move along a smooth ramp towards a random final motion.
pub fn scene(spec: &SceneSpec) -> Scene {
    let cam = cam();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut unit = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let theta_n = unit() * spec.rotation;
    let r_n = unit() * spec.translation;
    let mut thetas = vec![RotationVector::zero()];
    let mut poses = vec![Pose::identity()];
    for i in 1..spec.frames {
        let t = i as f64 / (spec.frames - 1) as f64;
        let th = RotationVector(theta_n * t);
        poses.push(Pose::new(exact_rotation(&th), r_n * t));
        thetas.push(th);
    }
    let mut points = Vec::new();
    let mut tracks = Vec::new();
    for j in 0..spec.landmarks {
        let x = rng.random_range(-0.08..0.08);
        let y = rng.random_range(-0.08..0.08);
        let z = spec.depth + rng.random_range(-spec.depth_spread..=spec.depth_spread);
        let p = Vector3::new(x, y, 1.0) * z;
        let obs = (0..spec.frames)
            .map(|i| {
                let q = if spec.first_order {
                    small_rotation_matrix(&thetas[i]) * p + poses[i].translation
                } else {
                    poses[i].transform(&p)
                };
                let n: NormalizedPoint = normalize_homogeneous(&q).unwrap();
                Observation {
                    frame: i,
                    pixel: camera_to_pixel(&cam, n),
                }
            })
            .collect();
        points.push(p);
        tracks.push(Track::new(j as u64, obs));
    }
    Scene {
        tracks: FeatureTracks::new(cam, spec.frames, tracks).unwrap(),
        poses,
        thetas,
        points,
    }
}
