//! Synthetic center-pointing inspection sequences with ground truth.
//!
//! The target is frozen at `c = (0, 0, range)` in the reference camera frame
//! and the camera carries the relative motion: an arc about the target center
//! combined with the apparent motion of the target tumble. The boresight stays
//! on the target center throughout.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Rotation3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    camera_to_pixel, normalize_homogeneous, rotation_log, small_rotation_matrix, CameraModel, PixelPoint, Pose,
};
use crate::tracks::{covisible_subset, FeatureTracks, Observation, Track};

pub const TRUTH_MAGIC: &str = "SFSM-TRUTH v1";

/// Fewest tracks that must survive covisibility in frames 0 and n.
pub const MIN_SURVIVING_TRACKS: usize = 10;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("only {survived} tracks covisible in the first and last frames (need {MIN_SURVIVING_TRACKS})")]
    TooFewTracks { survived: usize },
    #[error("sequence {index}: {source}")]
    Sequence {
        index: usize,
        #[source]
        source: Box<GenerationError>,
    },
    #[error("truth file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How image measurements are produced from the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionModel {
    /// Rigid pinhole projection of the landmarks.
    #[default]
    Rigid,
    /// The linearized small-motion model with a single scaled translation
    /// `r / range` shared by every landmark.
    FirstOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Camera-to-target distance, meters.
    pub range: f64,
    pub fov_deg: f64,
    pub n_frames: usize,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    /// Radius of the landmark cloud, meters.
    pub target_extent: f64,
    pub n_landmarks: usize,
    /// Fraction of landmarks on a plane through the target center.
    pub planar_fraction: f64,
    /// Center-pointing arc rate, deg/s.
    pub arc_rate_deg_s: f64,
    /// Arc axis; random and perpendicular to the boresight when absent.
    pub arc_axis: Option<[f64; 3]>,
    /// Target tumble rate, deg/s.
    pub tumble_rate_deg_s: f64,
    /// Tumble axis; uniformly random when absent.
    pub tumble_axis: Option<[f64; 3]>,
    pub pixel_noise_px: f64,
    pub quantize: bool,
    /// Probability that a track is an outlier (all its measurements random).
    pub outlier_fraction: f64,
    /// Per-frame probability that a track survives into the next frame.
    pub survival: f64,
    pub projection: ProjectionModel,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            range: 100.0,
            fov_deg: 14.9,
            n_frames: 20,
            fps: 10.0,
            width: 1024,
            height: 1024,
            target_extent: 8.0,
            n_landmarks: 200,
            planar_fraction: 0.5,
            arc_rate_deg_s: 1.5,
            arc_axis: None,
            tumble_rate_deg_s: 1.5,
            tumble_axis: None,
            pixel_noise_px: 0.3,
            quantize: true,
            outlier_fraction: 0.05,
            survival: 0.995,
            projection: ProjectionModel::Rigid,
            rng_seed: 42,
        }
    }
}

impl SceneConfig {
    /// Noise-free, outlier-free, dropout-free variant.
    pub fn noiseless(mut self) -> Self {
        self.pixel_noise_px = 0.0;
        self.quantize = false;
        self.outlier_fraction = 0.0;
        self.survival = 1.0;
        self
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let bad = |m: String| Err(GenerationError::InvalidConfig(m));
        if !(self.range > 0.0 && self.range.is_finite()) {
            return bad(format!("range must be positive, got {}", self.range));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad(format!("fov_deg must be in (0, 180), got {}", self.fov_deg));
        }
        if self.n_frames < 2 {
            return bad(format!("n_frames must be at least 2, got {}", self.n_frames));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.target_extent > 0.0 && self.target_extent < self.range) {
            return bad(format!("target_extent must be in (0, range), got {}", self.target_extent));
        }
        if self.n_landmarks == 0 {
            return bad("n_landmarks must be positive".into());
        }
        for (name, v) in [
            ("planar_fraction", self.planar_fraction),
            ("outlier_fraction", self.outlier_fraction),
            ("survival", self.survival),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.pixel_noise_px >= 0.0 && self.pixel_noise_px.is_finite()) {
            return bad(format!("pixel_noise_px must be non-negative, got {}", self.pixel_noise_px));
        }
        if !(self.arc_rate_deg_s.is_finite() && self.tumble_rate_deg_s.is_finite()) {
            return bad("rates must be finite".into());
        }
        for (name, axis) in [("arc_axis", self.arc_axis), ("tumble_axis", self.tumble_axis)] {
            if let Some(a) = axis {
                if !(Vector3::from(a).norm() > 1e-12) {
                    return bad(format!("{name} must be nonzero"));
                }
            }
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<CameraModel, GenerationError> {
        CameraModel::from_fov(self.fov_deg, self.width, self.height)
            .map_err(|e| GenerationError::InvalidConfig(e.to_string()))
    }

    pub fn target_center(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.range)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    /// World-to-camera poses of frames `0..=n`; pose 0 is the identity.
    pub poses: Vec<Pose>,
    /// Landmark positions in the reference frame, indexed by track id.
    pub landmarks: Vec<Vector3<f64>>,
    /// Outlier label per track id.
    pub outliers: Vec<bool>,
    pub config: SceneConfig,
    pub seed: u64,
    /// Angle subtended at the target center by the first and last camera
    /// positions, degrees.
    pub parallax_deg: f64,
}

impl SceneTruth {
    pub fn n(&self) -> usize {
        self.poses.len() - 1
    }
}

fn axis_or_random(axis: Option<[f64; 3]>, rng: &mut ChaCha8Rng, perpendicular_to_z: bool) -> Unit<Vector3<f64>> {
    match axis {
        Some(a) => Unit::new_normalize(Vector3::from(a)),
        None if perpendicular_to_z => {
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Unit::new_normalize(Vector3::new(phase.cos(), phase.sin(), 0.0))
        }
        None => {
            let v: [f64; 3] = UnitSphere.sample(rng);
            Unit::new_normalize(Vector3::from(v))
        }
    }
}

/// Relative camera poses for the configured arc and tumble.
pub fn trajectory(cfg: &SceneConfig, arc_axis: &Unit<Vector3<f64>>, tumble_axis: &Unit<Vector3<f64>>) -> Vec<Pose> {
    let c = cfg.target_center();
    (0..cfg.n_frames)
        .map(|i| {
            let t = i as f64 / cfg.fps;
            let a = (cfg.arc_rate_deg_s * t).to_radians();
            let b = (cfg.tumble_rate_deg_s * t).to_radians();
            // Camera-to-world rotation about the target center.
            let q = Rotation3::from_axis_angle(tumble_axis, -b) * Rotation3::from_axis_angle(arc_axis, a);
            let rot = q.inverse();
            Pose::new(rot, c - rot * c)
        })
        .collect()
}

fn sample_landmarks(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let c = cfg.target_center();
    let normal: [f64; 3] = UnitSphere.sample(rng);
    let normal = Vector3::from(normal);
    let u = normal.cross(&Vector3::x()).try_normalize(1e-6).unwrap_or_else(|| normal.cross(&Vector3::y()).normalize());
    let v = normal.cross(&u);
    let n_plane = (cfg.planar_fraction * cfg.n_landmarks as f64).round() as usize;
    let mut out = Vec::with_capacity(cfg.n_landmarks);
    for j in 0..cfg.n_landmarks {
        let offset = if j < n_plane {
            // Uniform on a disk.
            let r = cfg.target_extent * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            u * (r * a.cos()) + v * (r * a.sin())
        } else {
            // Uniform in a ball.
            loop {
                let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if p.norm_squared() <= 1.0 {
                    break p * cfg.target_extent;
                }
            }
        };
        out.push(c + offset);
    }
    out
}

/// Noise-free image of landmark `y` in frame `i`.
fn ideal_pixel(cfg: &SceneConfig, cam: &CameraModel, poses: &[Pose], y: &Vector3<f64>, i: usize) -> Option<PixelPoint> {
    let q = match cfg.projection {
        ProjectionModel::Rigid => poses[i].transform(y),
        ProjectionModel::FirstOrder => {
            let x0 = y / y.z;
            let theta = rotation_log(&poses[i].rotation);
            small_rotation_matrix(&theta) * x0 + poses[i].translation / cfg.range
        }
    };
    if q.z <= 0.0 {
        return None;
    }
    normalize_homogeneous(&q).ok().map(|x| camera_to_pixel(cam, x))
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<(FeatureTracks, SceneTruth), GenerationError> {
    cfg.validate()?;
    let cam = cfg.camera()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let arc_axis = axis_or_random(cfg.arc_axis, &mut rng, true);
    let tumble_axis = axis_or_random(cfg.tumble_axis, &mut rng, false);
    let poses = trajectory(cfg, &arc_axis, &tumble_axis);
    let landmarks = sample_landmarks(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.pixel_noise_px).map_err(|e| GenerationError::InvalidConfig(e.to_string()))?;
    let (w, h) = (cfg.width as f64, cfg.height as f64);

    let mut tracks = Vec::with_capacity(cfg.n_landmarks);
    let mut outliers = Vec::with_capacity(cfg.n_landmarks);
    for (j, y) in landmarks.iter().enumerate() {
        let is_outlier = rng.random::<f64>() < cfg.outlier_fraction;
        outliers.push(is_outlier);
        let mut obs = Vec::with_capacity(cfg.n_frames);
        for i in 0..cfg.n_frames {
            if i > 0 && rng.random::<f64>() >= cfg.survival {
                break;
            }
            let pixel = if is_outlier {
                PixelPoint::new(rng.random_range(0.0..w), rng.random_range(0.0..h))
            } else {
                let Some(p) = ideal_pixel(cfg, &cam, &poses, y, i) else { break };
                let mut u = p.u + noise.sample(&mut rng);
                let mut v = p.v + noise.sample(&mut rng);
                if cfg.quantize {
                    u = u.round();
                    v = v.round();
                }
                PixelPoint::new(u, v)
            };
            if !cam.contains(pixel) {
                break;
            }
            obs.push(Observation { frame: i, pixel });
        }
        if !obs.is_empty() {
            tracks.push(Track::new(j as u64, obs));
        }
    }

    let n = cfg.n_frames - 1;
    let c = cfg.target_center();
    let last_center = -(poses[n].rotation.inverse() * poses[n].translation);
    let parallax_deg = (c - last_center).angle(&c).to_degrees();

    let ft = FeatureTracks {
        n_frames: cfg.n_frames,
        tracks,
        cam,
        frame_timestamps: Some((0..cfg.n_frames).map(|i| i as f64 / cfg.fps).collect()),
        generator: Some(format!("sfsm-synth {}", env!("CARGO_PKG_VERSION"))),
        seed: Some(cfg.rng_seed),
    };
    let survived = if ft.tracks.is_empty() {
        0
    } else {
        covisible_subset(&ft, 0, n).len()
    };
    if survived < MIN_SURVIVING_TRACKS {
        return Err(GenerationError::TooFewTracks { survived });
    }
    ft.validate().map_err(|e| GenerationError::InvalidConfig(e.to_string()))?;
    let truth = SceneTruth {
        poses,
        landmarks,
        outliers,
        config: cfg.clone(),
        seed: cfg.rng_seed,
        parallax_deg,
    };
    Ok((ft, truth))
}

/// Per-sequence seed: splitmix64 of `master ^ index`.
pub fn sequence_seed(master: u64, index: usize) -> u64 {
    let mut z = (master ^ index as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_benchmark_set(
    base: &SceneConfig,
    n_sequences: usize,
    master_seed: u64,
) -> Result<Vec<(FeatureTracks, SceneTruth)>, GenerationError> {
    if n_sequences == 0 {
        return Err(GenerationError::InvalidConfig("n_sequences must be at least 1".into()));
    }
    base.validate()?;
    (0..n_sequences)
        .into_par_iter()
        .map(|i| {
            let cfg = SceneConfig {
                rng_seed: sequence_seed(master_seed, i),
                ..base.clone()
            };
            generate_scene(&cfg).map_err(|e| GenerationError::Sequence {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn format_truth(truth: &SceneTruth) -> String {
    let mut s = String::new();
    writeln!(s, "{TRUTH_MAGIC}").unwrap();
    writeln!(s, "seed {}", truth.seed).unwrap();
    writeln!(s, "config {}", serde_json::to_string(&truth.config).expect("config serializes")).unwrap();
    writeln!(s, "parallax_deg {:?}", truth.parallax_deg).unwrap();
    writeln!(s, "frames {}", truth.poses.len()).unwrap();
    for (i, p) in truth.poses.iter().enumerate() {
        let q = UnitQuaternion::from_rotation_matrix(&p.rotation);
        let t = p.translation;
        writeln!(s, "pose {i} {:?} {:?} {:?} {:?} {:?} {:?} {:?}", q.w, q.i, q.j, q.k, t.x, t.y, t.z).unwrap();
    }
    writeln!(s, "landmarks {}", truth.landmarks.len()).unwrap();
    for (j, (y, o)) in truth.landmarks.iter().zip(&truth.outliers).enumerate() {
        writeln!(s, "landmark {j} {:?} {:?} {:?} {}", y.x, y.y, y.z, u8::from(*o)).unwrap();
    }
    s
}

pub fn write_truth(truth: &SceneTruth, path: impl AsRef<Path>) -> Result<(), GenerationError> {
    fs::write(path, format_truth(truth))?;
    Ok(())
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<SceneTruth, GenerationError> {
    parse_truth(&fs::read_to_string(path)?)
}

pub fn parse_truth(text: &str) -> Result<SceneTruth, GenerationError> {
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let err = |line: usize, message: &str| GenerationError::Parse {
        line,
        message: message.to_string(),
    };
    let mut next = |what: &str| lines.next().ok_or_else(|| err(0, &format!("unexpected end of file, expected {what}")));
    let (ln, magic) = next("magic")?;
    if magic != TRUTH_MAGIC {
        return Err(err(ln, "bad magic line"));
    }
    let field = |(ln, l): (usize, &str), key: &str| -> Result<String, GenerationError> {
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| err(ln, &format!("expected `{key}`")))
    };
    let num = |ln: usize, s: &str| -> Result<f64, GenerationError> { s.parse().map_err(|_| err(ln, &format!("bad number `{s}`"))) };
    let int = |ln: usize, s: &str| -> Result<usize, GenerationError> { s.parse().map_err(|_| err(ln, &format!("bad integer `{s}`"))) };

    let l = next("seed")?;
    let seed: u64 = field(l, "seed")?.parse().map_err(|_| err(l.0, "bad seed"))?;
    let l = next("config")?;
    let config: SceneConfig = serde_json::from_str(&field(l, "config")?).map_err(|e| err(l.0, &e.to_string()))?;
    let l = next("parallax_deg")?;
    let parallax_deg = num(l.0, &field(l, "parallax_deg")?)?;
    let l = next("frames")?;
    let frames = int(l.0, &field(l, "frames")?)?;
    let mut poses = Vec::with_capacity(frames);
    for i in 0..frames {
        let l = next("pose")?;
        let rest = field(l, "pose")?;
        let f: Vec<&str> = rest.split_whitespace().collect();
        if f.len() != 8 || int(l.0, f[0])? != i {
            return Err(err(l.0, "malformed pose row"));
        }
        let v: Vec<f64> = f[1..].iter().map(|s| num(l.0, s)).collect::<Result<_, _>>()?;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]));
        poses.push(Pose::new(q.to_rotation_matrix(), Vector3::new(v[4], v[5], v[6])));
    }
    let l = next("landmarks")?;
    let m = int(l.0, &field(l, "landmarks")?)?;
    let mut landmarks = Vec::with_capacity(m);
    let mut outliers = Vec::with_capacity(m);
    for j in 0..m {
        let l = next("landmark")?;
        let rest = field(l, "landmark")?;
        let f: Vec<&str> = rest.split_whitespace().collect();
        if f.len() != 5 || int(l.0, f[0])? != j {
            return Err(err(l.0, "malformed landmark row"));
        }
        landmarks.push(Vector3::new(num(l.0, f[1])?, num(l.0, f[2])?, num(l.0, f[3])?));
        outliers.push(match f[4] {
            "0" => false,
            "1" => true,
            _ => return Err(err(l.0, "outlier label must be 0 or 1")),
        });
    }
    if let Some((ln, _)) = lines.next() {
        return Err(err(ln, "trailing content"));
    }
    Ok(SceneTruth {
        poses,
        landmarks,
        outliers,
        config,
        seed,
        parallax_deg,
    })
}
