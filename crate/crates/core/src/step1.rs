//! Rotation and scaled-translation estimation.
//!
//! Under the first-order rotation `R ~ I + [theta]x` and a shared nominal
//! inverse depth `w_bar`, the expected image point of landmark `j` in frame
//! `i` is `<(I + [theta_i]x) x_0j + r_bar_i>` with `r_bar_i = w_bar * r_i`.
//! Clearing the denominator gives two equations per correspondence that are
//! linear in `(theta_i, r_bar_i)`. A 3-point RANSAC between the reference
//! and the last frame selects the inlier set; every frame is then solved in
//! least squares over those inliers.
//!
//! Disabling `estimate_translation` drops the three translation columns and
//! uses a 2-point sample: the small-translation model of the baseline.

use nalgebra::{DMatrix, DVector, SMatrix, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{camera_to_pixel, pixel_to_camera, NormalizedPoint, RotationVector};
use crate::tracks::{covisible_subset, FeatureTracks};

/// Condition number above which a least-squares system is degenerate.
pub const MAX_CONDITION: f64 = 1e10;
const DENOMINATOR_EPS: f64 = 1e-9;
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Step1Error {
    #[error("insufficient correspondences: got {got}, need {need}")]
    InsufficientCorrespondences { got: usize, need: usize },
    #[error("degenerate system (condition number {condition:e})")]
    Degenerate { condition: f64 },
    #[error("degenerate depth: projection denominator {0:e}")]
    DegenerateDepth(f64),
    #[error("insufficient covisible tracks ({found} < {required})")]
    InsufficientCovisible { found: usize, required: usize },
    #[error("ransac failure: best hypothesis has {inliers} inliers, need {required} of {covisible} covisible tracks")]
    TooFewInliers { inliers: usize, required: usize, covisible: usize },
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Step1Error>,
    },
    #[error("invalid step-1 configuration: {0}")]
    InvalidConfig(String),
}

impl Step1Error {
    /// Whether the error stems from the consensus stage (insufficient or
    /// outlier-dominated data) rather than a numerical degeneracy.
    pub fn is_ransac_failure(&self) -> bool {
        matches!(self, Step1Error::InsufficientCovisible { .. } | Step1Error::TooFewInliers { .. })
    }
}

/// Translation scaled by the nominal inverse depth (unitless).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScaledTranslation(pub Vector3<f64>);

impl ScaledTranslation {
    pub fn new(r1: f64, r2: f64, r3: f64) -> Self {
        Self(Vector3::new(r1, r2, r3))
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Step1Config {
    /// Inlier threshold in pixels.
    pub inlier_threshold_px: f64,
    pub ransac_iterations: usize,
    pub sample_size: usize,
    /// Nominal shared inverse depth, 1/m.
    pub w_bar: f64,
    pub rng_seed: u64,
    /// When false, solve for rotation only (small-translation baseline).
    pub estimate_translation: bool,
    /// Replace the fixed iteration count with the confidence-driven one.
    pub adaptive: bool,
    pub confidence: f64,
    pub max_adaptive_iterations: usize,
    pub min_inliers: usize,
    pub min_inlier_fraction: f64,
}

impl Default for Step1Config {
    fn default() -> Self {
        Self {
            inlier_threshold_px: 8.0,
            ransac_iterations: 52,
            sample_size: 3,
            w_bar: 0.01,
            rng_seed: 0,
            estimate_translation: true,
            adaptive: false,
            confidence: 0.999,
            max_adaptive_iterations: 1000,
            min_inliers: 6,
            min_inlier_fraction: 0.2,
        }
    }
}

impl Step1Config {
    /// Configuration of the small-translation baseline: rotation-only model
    /// with a 2-point minimal sample.
    pub fn baseline() -> Self {
        Self {
            estimate_translation: false,
            sample_size: 2,
            ..Self::default()
        }
    }

    fn min_sample(&self) -> usize {
        if self.estimate_translation {
            3
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<(), Step1Error> {
        let bad = |m: String| Err(Step1Error::InvalidConfig(m));
        if !(self.inlier_threshold_px > 0.0) {
            return bad(format!("inlier threshold must be positive, got {}", self.inlier_threshold_px));
        }
        if self.ransac_iterations < 1 {
            return bad("ransac_iterations must be >= 1".into());
        }
        if self.sample_size < self.min_sample() {
            return bad(format!("sample_size must be >= {}", self.min_sample()));
        }
        if !(self.w_bar > 0.0 && self.w_bar.is_finite()) {
            return bad(format!("w_bar must be positive, got {}", self.w_bar));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("confidence must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.min_inlier_fraction) {
            return bad("min_inlier_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

}

/// Per-frame small-motion parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameMotion {
    pub theta: RotationVector,
    pub translation: ScaledTranslation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallMotionEstimate {
    /// Entry `k` describes frame `k + 1`.
    pub frames: Vec<FrameMotion>,
    /// Inlier track indices, sorted.
    pub inliers: Vec<usize>,
    /// Per-frame RMS reprojection residual over the inliers, pixels.
    pub rms_px: Vec<f64>,
    /// Nominal inverse depth the translations are scaled by.
    pub w_bar: f64,
}

impl SmallMotionEstimate {
    pub fn n(&self) -> usize {
        self.frames.len()
    }

    /// Motion of frame `i` (1-based; frame 0 is the identity).
    pub fn frame(&self, i: usize) -> FrameMotion {
        if i == 0 {
            FrameMotion::default()
        } else {
            self.frames[i - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub motion: FrameMotion,
    pub inliers: Vec<usize>,
    /// RMS pixel residual of the winning hypothesis over its inliers.
    pub hypothesis_rms_px: f64,
    pub iterations: usize,
}

/// Expected normalized point for a reference observation `x0` under the
/// linearized motion.
pub fn expected_point(
    theta: &RotationVector,
    rbar: &ScaledTranslation,
    x0: NormalizedPoint,
) -> Result<NormalizedPoint, Step1Error> {
    let t = &theta.0;
    let r = &rbar.0;
    let den = -t.y * x0.x + t.x * x0.y + 1.0 + r.z;
    if den.abs() <= DENOMINATOR_EPS {
        return Err(Step1Error::DegenerateDepth(den));
    }
    let nx = x0.x - t.z * x0.y + t.y + r.x;
    let ny = t.z * x0.x + x0.y - t.x + r.y;
    Ok(NormalizedPoint::new(nx / den, ny / den))
}

/// The two rows contributed by one correspondence, with unknowns ordered
/// `(theta1, theta2, theta3, r_bar1, r_bar2, r_bar3)`.
pub fn correspondence_rows(x0: NormalizedPoint, xi: NormalizedPoint) -> (SMatrix<f64, 2, 6>, Vector2<f64>) {
    #[rustfmt::skip]
    let a = SMatrix::<f64, 2, 6>::new(
        xi.x * x0.y,       -xi.x * x0.x - 1.0,  x0.y, -1.0,  0.0, xi.x,
        xi.y * x0.y + 1.0, -xi.y * x0.x,       -x0.x,  0.0, -1.0, xi.y,
    );
    (a, Vector2::new(x0.x - xi.x, x0.y - xi.y))
}

fn stack_rows(corr: &[(NormalizedPoint, NormalizedPoint)], unknowns: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = DMatrix::zeros(2 * corr.len(), unknowns);
    let mut b = DVector::zeros(2 * corr.len());
    for (k, (x0, xi)) in corr.iter().enumerate() {
        let (rows, rhs) = correspondence_rows(*x0, *xi);
        a.view_mut((2 * k, 0), (2, unknowns)).copy_from(&rows.columns(0, unknowns));
        b.rows_mut(2 * k, 2).copy_from(&rhs);
    }
    (a, b)
}

/// Stacked 2k x 6 system for `k >= 3` correspondences.
pub fn build_linear_system(
    corr: &[(NormalizedPoint, NormalizedPoint)],
) -> Result<(DMatrix<f64>, DVector<f64>), Step1Error> {
    if corr.len() < 3 {
        return Err(Step1Error::InsufficientCorrespondences { got: corr.len(), need: 3 });
    }
    Ok(stack_rows(corr, 6))
}

/// Minimum-norm least-squares solve with a condition-number guard.
fn solve_motion(
    corr: &[(NormalizedPoint, NormalizedPoint)],
    estimate_translation: bool,
) -> Result<FrameMotion, Step1Error> {
    let unknowns = if estimate_translation { 6 } else { 3 };
    let (a, b) = stack_rows(corr, unknowns);
    if a.nrows() < unknowns {
        return Err(Step1Error::Degenerate { condition: f64::INFINITY });
    }
    // Householder QR is backward stable; the singular values of R equal
    // those of A and give the condition number.
    let qr = a.qr();
    let r = qr.r();
    let sv = r.singular_values();
    let smin = sv.min();
    let condition = if smin > 0.0 { sv.max() / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Step1Error::Degenerate { condition });
    }
    let rhs = qr.q().tr_mul(&b);
    let x = r
        .solve_upper_triangular(&rhs)
        .ok_or(Step1Error::Degenerate { condition })?;
    let theta = RotationVector::new(x[0], x[1], x[2]);
    let translation = if estimate_translation {
        ScaledTranslation::new(x[3], x[4], x[5])
    } else {
        ScaledTranslation::zero()
    };
    Ok(FrameMotion { theta, translation })
}

/// Solves a minimal 3-correspondence sample of the full model.
pub fn solve_sample(sample: &[(NormalizedPoint, NormalizedPoint)]) -> Result<FrameMotion, Step1Error> {
    if sample.len() < 3 {
        return Err(Step1Error::InsufficientCorrespondences { got: sample.len(), need: 3 });
    }
    solve_motion(sample, true)
}

struct PairData {
    /// Track indices.
    index: Vec<usize>,
    x0: Vec<NormalizedPoint>,
    xi: Vec<NormalizedPoint>,
    pi: Vec<nalgebra::Vector2<f64>>,
}

fn pair_data(tracks: &FeatureTracks, indices: &[usize], frame_a: usize, frame_b: usize) -> PairData {
    let cam = &tracks.cam;
    let mut d = PairData {
        index: Vec::with_capacity(indices.len()),
        x0: Vec::with_capacity(indices.len()),
        xi: Vec::with_capacity(indices.len()),
        pi: Vec::with_capacity(indices.len()),
    };
    for &k in indices {
        let t = &tracks.tracks[k];
        let (Some(pa), Some(pb)) = (t.observation(frame_a), t.observation(frame_b)) else {
            continue;
        };
        d.index.push(k);
        d.x0.push(pixel_to_camera(cam, pa));
        d.xi.push(pixel_to_camera(cam, pb));
        d.pi.push(Vector2::new(pb.u, pb.v));
    }
    d
}

/// Pixel residual norms of a motion hypothesis; `None` where the projection
/// is degenerate.
fn pixel_errors(tracks: &FeatureTracks, data: &PairData, motion: &FrameMotion) -> Vec<Option<f64>> {
    data.x0
        .iter()
        .zip(&data.pi)
        .map(|(x0, p)| {
            expected_point(&motion.theta, &motion.translation, *x0).ok().map(|x| {
                let q = camera_to_pixel(&tracks.cam, x);
                (Vector2::new(q.u, q.v) - p).norm()
            })
        })
        .collect()
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

fn adaptive_iterations(confidence: f64, inlier_ratio: f64, sample: usize) -> f64 {
    let p = inlier_ratio.powi(sample as i32);
    if p >= 1.0 {
        return 1.0;
    }
    if p <= 0.0 {
        return f64::INFINITY;
    }
    ((1.0 - confidence).ln() / (1.0 - p).ln()).ceil()
}

/// RANSAC between `frame_a` (the reference) and `frame_b`.
///
/// Hypotheses are ranked by inlier count, then by inlier RMS, then by draw
/// order; the winner is re-solved on its full inlier set.
pub fn ransac_frame_pair(
    tracks: &FeatureTracks,
    frame_a: usize,
    frame_b: usize,
    cfg: &Step1Config,
) -> Result<RansacResult, Step1Error> {
    cfg.validate()?;
    let covisible = covisible_subset(tracks, frame_a, frame_b);
    let data = pair_data(tracks, &covisible, frame_a, frame_b);
    let m = data.index.len();
    let need = cfg.sample_size.max(3);
    if m < need {
        return Err(Step1Error::InsufficientCovisible { found: m, required: need });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mu = cfg.inlier_threshold_px;
    // (count, rms, iteration, motion, inliers)
    let mut best: Option<(usize, f64, usize, FrameMotion, Vec<usize>)> = None;
    let mut budget = cfg.ransac_iterations as f64;
    if cfg.adaptive {
        budget = cfg.max_adaptive_iterations as f64;
    }
    let mut iter = 0usize;
    while (iter as f64) < budget {
        let mut hypothesis = None;
        for _ in 0..MAX_REDRAWS {
            let pick = rand::seq::index::sample(&mut rng, m, cfg.sample_size);
            let sample: Vec<_> = pick.iter().map(|k| (data.x0[k], data.xi[k])).collect();
            if let Ok(h) = solve_motion(&sample, cfg.estimate_translation) {
                hypothesis = Some(h);
                break;
            }
        }
        let Some(motion) = hypothesis else {
            iter += 1;
            continue;
        };
        let errs = pixel_errors(tracks, &data, &motion);
        let inl: Vec<usize> = (0..m).filter(|&k| errs[k].is_some_and(|e| e < mu)).collect();
        let score_rms = rms(inl.iter().map(|&k| errs[k].unwrap_or(0.0)));
        let better = match &best {
            None => true,
            Some((c, r, _, _, _)) => inl.len() > *c || (inl.len() == *c && score_rms < *r),
        };
        if better {
            if cfg.adaptive {
                let ratio = inl.len() as f64 / m as f64;
                budget = adaptive_iterations(cfg.confidence, ratio, cfg.sample_size)
                    .min(cfg.max_adaptive_iterations as f64);
            }
            best = Some((inl.len(), score_rms, iter, motion, inl));
        }
        iter += 1;
    }

    let required = cfg.min_inliers.max((cfg.min_inlier_fraction * m as f64).ceil() as usize);
    let (count, score_rms, _, _, inl) = best.unwrap_or((0, 0.0, 0, FrameMotion::default(), Vec::new()));
    if count < required || count < need {
        return Err(Step1Error::TooFewInliers { inliers: count, required, covisible: m });
    }
    let inliers: Vec<usize> = inl.iter().map(|&k| data.index[k]).collect();
    let corr: Vec<_> = inl.iter().map(|&k| (data.x0[k], data.xi[k])).collect();
    let motion = solve_motion(&corr, cfg.estimate_translation).map_err(|e| Step1Error::Frame {
        frame: frame_b,
        source: Box::new(e),
    })?;
    Ok(RansacResult {
        motion,
        inliers,
        hypothesis_rms_px: score_rms,
        iterations: iter,
    })
}

/// Least-squares motion of every frame `1..=n` over the inlier tracks.
pub fn estimate_all_frames(
    tracks: &FeatureTracks,
    inliers: &[usize],
    cfg: &Step1Config,
) -> Result<SmallMotionEstimate, Step1Error> {
    cfg.validate()?;
    let need = if cfg.estimate_translation { 3 } else { 2 };
    let mut frames = Vec::with_capacity(tracks.n_frames - 1);
    let mut rms_px = Vec::with_capacity(tracks.n_frames - 1);
    for i in 1..tracks.n_frames {
        let data = pair_data(tracks, inliers, 0, i);
        if data.index.len() < need {
            return Err(Step1Error::Frame {
                frame: i,
                source: Box::new(Step1Error::InsufficientCorrespondences { got: data.index.len(), need }),
            });
        }
        let corr: Vec<_> = data.x0.iter().copied().zip(data.xi.iter().copied()).collect();
        let motion = solve_motion(&corr, cfg.estimate_translation).map_err(|e| Step1Error::Frame {
            frame: i,
            source: Box::new(e),
        })?;
        let errs = pixel_errors(tracks, &data, &motion);
        rms_px.push(rms(errs.into_iter().map(|e| e.unwrap_or(f64::INFINITY))));
        frames.push(motion);
    }
    let mut inliers = inliers.to_vec();
    inliers.sort_unstable();
    Ok(SmallMotionEstimate {
        frames,
        inliers,
        rms_px,
        w_bar: cfg.w_bar,
    })
}

/// RANSAC on the reference/last frame pair followed by per-frame solves.
pub fn run_step1(tracks: &FeatureTracks, cfg: &Step1Config) -> Result<SmallMotionEstimate, Step1Error> {
    let ransac = ransac_frame_pair(tracks, 0, tracks.last_frame(), cfg)?;
    estimate_all_frames(tracks, &ransac.inliers, cfg)
}
