//! Full bundle adjustment over SO(3) poses, translations and landmarks.
//!
//! Landmarks are either azimuth/elevation directions from the reference
//! camera with a soft-plus inverse range, or (baseline) a raw inverse depth
//! anchored on the reference observation ray.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    direction_vector, direction_vector_partials, exact_rotation, pixel_to_camera, point_to_azel, skew, softplus,
    softplus_derivative, softplus_inverse, CameraModel, GeometryError, PixelPoint, Pose, SoftPlusParams,
};
use crate::optimizer::{self, BlockId, BlockValue, CostFunction, EvalError, LmConfig, OptimizerError, Problem, SolveReport, Termination};
use crate::step2::{map_geometry, Step2Solution, EXTREME_INVERSE_DEPTH, RAW_DEPTH_FLOOR};
use crate::tracks::FeatureTracks;

#[derive(Debug, Error)]
pub enum Step3Error {
    #[error("only {0} landmarks left after filtering (need 3)")]
    InsufficientLandmarks(usize),
    #[error("need at least 2 non-reference frames, got {0}")]
    InsufficientFrames(usize),
    #[error("track {track} is not observed in frame {frame}")]
    MissingObservation { track: usize, frame: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("optimization diverged after {iterations} iterations")]
    Diverged { iterations: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LandmarkModel {
    /// `(omega, psi, phi)` with inverse range `softplus(omega)` and a prior
    /// tying the direction to the reference observation.
    AzimuthElevation { alpha: f64 },
    /// Raw inverse depth on the reference ray, clamped positive, no prior.
    AnchoredInverseDepth,
}

impl Default for LandmarkModel {
    fn default() -> Self {
        LandmarkModel::AzimuthElevation { alpha: SoftPlusParams::default().alpha }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Step3Config {
    pub landmark_model: LandmarkModel,
    /// Isotropic measurement standard deviation, pixels.
    pub pixel_sigma: f64,
    /// Standard deviation of the reference-direction prior, pixels.
    pub prior_sigma: f64,
    /// Include the reference-direction prior (azimuth/elevation model only).
    pub priors: bool,
}

impl Default for Step3Config {
    fn default() -> Self {
        Self {
            landmark_model: LandmarkModel::default(),
            pixel_sigma: 1.0,
            prior_sigma: 1.0,
            priors: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step3Observation {
    pub frame: usize,
    pub landmark: usize,
    pub pixel: PixelPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step3Problem {
    pub cam: CameraModel,
    pub cfg: Step3Config,
    /// Poses of frames `1..=n`.
    pub rotations: Vec<Rotation3<f64>>,
    pub translations: Vec<Vector3<f64>>,
    pub landmarks: Vec<usize>,
    /// Reference observations (pixels) of the landmarks.
    pub reference_pixels: Vec<PixelPoint>,
    /// `[omega, psi, phi]` for azimuth/elevation, `[w]` for anchored.
    pub landmark_params: Vec<Vec<f64>>,
    pub observations: Vec<Step3Observation>,
    /// Step-2 landmarks left out for extreme inverse depth.
    pub dropped: Vec<usize>,
}

impl Step3Problem {
    pub fn n(&self) -> usize {
        self.rotations.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkEstimate {
    pub track: usize,
    pub omega: f64,
    pub psi: f64,
    pub phi: f64,
    /// Inverse range from the reference camera.
    pub rho: f64,
    /// Reference-frame position, meters in the solution's gauge.
    pub point: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub frame: usize,
    pub track: usize,
    pub residual: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitializationSolution {
    /// Poses `0..=n`; pose 0 is the identity.
    pub poses: Vec<Pose>,
    pub landmarks: Vec<LandmarkEstimate>,
    pub dropped: Vec<usize>,
    pub report: SolveReport,
    pub initial_rms_px: f64,
    pub final_rms_px: f64,
    /// Measurement residuals at the solution (reference priors excluded).
    pub residuals: Vec<ResidualRecord>,
    pub per_frame_rms_px: Vec<f64>,
    pub per_landmark_rms_px: Vec<f64>,
    /// Smallest inverse range over all accepted iterates.
    pub min_inverse_depth: f64,
    /// Largest `||R^T R - I||_F` over all accepted iterates.
    pub max_orthonormality_error: f64,
}

/// Seeds the full problem from the step-2 solution.
pub fn init_step3(s2: &Step2Solution, tracks: &FeatureTracks, cfg: &Step3Config) -> Result<Step3Problem, Step3Error> {
    let n = s2.thetas.len();
    if n < 2 {
        return Err(Step3Error::InsufficientFrames(n));
    }
    let mut landmarks = Vec::new();
    let mut reference_pixels = Vec::new();
    let mut landmark_params = Vec::new();
    let mut dropped = Vec::new();
    for (&t, &w) in s2.landmarks.iter().zip(&s2.inverse_depths) {
        let track = &tracks.tracks[t];
        let p0 = track.observation(0).ok_or(Step3Error::MissingObservation { track: t, frame: 0 })?;
        if !(w > EXTREME_INVERSE_DEPTH) {
            log::debug!("step3: dropping track {t} with inverse depth {w:e}");
            dropped.push(t);
            continue;
        }
        let x0 = pixel_to_camera(&tracks.cam, p0).homogeneous();
        let params = match cfg.landmark_model {
            LandmarkModel::AzimuthElevation { alpha } => {
                let (psi, phi, rho) = point_to_azel(&(x0 / w))?;
                vec![softplus_inverse(rho, SoftPlusParams::new(alpha)?)?, psi, phi]
            }
            LandmarkModel::AnchoredInverseDepth => vec![w.max(RAW_DEPTH_FLOOR)],
        };
        landmarks.push(t);
        reference_pixels.push(p0);
        landmark_params.push(params);
    }
    if !dropped.is_empty() {
        log::warn!("step3: dropped {} landmarks with degenerate inverse depth", dropped.len());
    }
    if landmarks.len() < 3 {
        return Err(Step3Error::InsufficientLandmarks(landmarks.len()));
    }
    let mut observations = Vec::new();
    for (l, &t) in landmarks.iter().enumerate() {
        for i in 1..=n {
            let pixel = tracks.tracks[t]
                .observation(i)
                .ok_or(Step3Error::MissingObservation { track: t, frame: i })?;
            observations.push(Step3Observation { frame: i, landmark: l, pixel });
        }
    }
    Ok(Step3Problem {
        cam: tracks.cam,
        cfg: cfg.clone(),
        rotations: s2.thetas.iter().map(exact_rotation).collect(),
        translations: s2.translations.clone(),
        landmarks,
        reference_pixels,
        landmark_params,
        observations,
        dropped,
    })
}

/// Reprojection residual of an azimuth/elevation landmark, blocks
/// `[R, r, (omega, psi, phi)]`.
pub struct Step3Residual {
    pub cam: CameraModel,
    pub pixel: PixelPoint,
    pub softplus: SoftPlusParams,
}

/// Residual and Jacobians with respect to `(R tangent, r, landmark)`.
pub type PoseLandmarkJacobians = (Vector2<f64>, Matrix2x3<f64>, Matrix2x3<f64>, Matrix2x3<f64>);

impl Step3Residual {
    pub fn eval(&self, rot: &Rotation3<f64>, r: &Vector3<f64>, l: &Vector3<f64>) -> Result<PoseLandmarkJacobians, GeometryError> {
        let (omega, psi, phi) = (l[0], l[1], l[2]);
        let m = direction_vector(psi, phi);
        let (m_psi, m_phi) = direction_vector_partials(psi, phi);
        let s = softplus(omega, self.softplus);
        let rm = rot * m;
        let q = rm + r * s;
        let (p, jp) = self.cam.project_with_jacobian(&q)?;
        let e = Vector2::new(self.pixel.u - p.u, self.pixel.v - p.v);
        let dq_rot = -(rot.matrix() * skew(&m));
        let mut dq_l = Matrix3::zeros();
        dq_l.set_column(0, &(r * softplus_derivative(omega, self.softplus)));
        dq_l.set_column(1, &(rot * m_psi));
        dq_l.set_column(2, &(rot * m_phi));
        Ok((e, -jp * dq_rot, -jp * s, -jp * dq_l))
    }
}

impl CostFunction for Step3Residual {
    fn residual_dim(&self) -> usize {
        2
    }

    fn block_dims(&self) -> Vec<usize> {
        vec![3, 3, 3]
    }

    fn evaluate(&self, params: &[&BlockValue], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, EvalError> {
        let (e, jrot, jr, jl) = self
            .eval(params[0].rotation(), &vec3(params[1]), &vec3(params[2]))
            .map_err(map_geometry)?;
        if let Some(j) = jacobians {
            j[0].copy_from(&jrot);
            j[1].copy_from(&jr);
            j[2].copy_from(&jl);
        }
        Ok(DVector::from_column_slice(e.as_slice()))
    }
}

/// Reference-frame prior tying `(psi, phi)` to the reference observation.
/// Block `[(omega, psi, phi)]`.
pub struct PriorResidual {
    pub cam: CameraModel,
    pub pixel: PixelPoint,
}

impl PriorResidual {
    pub fn eval(&self, psi: f64, phi: f64) -> Result<(Vector2<f64>, Matrix2x3<f64>), GeometryError> {
        let m = direction_vector(psi, phi);
        let (m_psi, m_phi) = direction_vector_partials(psi, phi);
        let (p, jp) = self.cam.project_with_jacobian(&m)?;
        let e = Vector2::new(self.pixel.u - p.u, self.pixel.v - p.v);
        let mut dq = Matrix3::zeros();
        dq.set_column(1, &m_psi);
        dq.set_column(2, &m_phi);
        Ok((e, -jp * dq))
    }
}

impl CostFunction for PriorResidual {
    fn residual_dim(&self) -> usize {
        2
    }

    fn block_dims(&self) -> Vec<usize> {
        vec![3]
    }

    fn evaluate(&self, params: &[&BlockValue], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, EvalError> {
        let l = params[0].vector();
        let (e, j) = self.eval(l[1], l[2]).map_err(map_geometry)?;
        if let Some(out) = jacobians {
            out[0].copy_from(&j);
        }
        Ok(DVector::from_column_slice(e.as_slice()))
    }
}

/// Baseline residual: raw inverse depth `w` on the reference ray `x0`.
/// Blocks `[R, r, w]`.
pub struct AnchoredResidual {
    pub cam: CameraModel,
    pub reference: Vector3<f64>,
    pub pixel: PixelPoint,
}

impl AnchoredResidual {
    pub fn eval(
        &self,
        rot: &Rotation3<f64>,
        r: &Vector3<f64>,
        w: f64,
    ) -> Result<(Vector2<f64>, Matrix2x3<f64>, Matrix2x3<f64>, Vector2<f64>), GeometryError> {
        let q = rot * self.reference + r * w;
        let (p, jp) = self.cam.project_with_jacobian(&q)?;
        let e = Vector2::new(self.pixel.u - p.u, self.pixel.v - p.v);
        let dq_rot = -(rot.matrix() * skew(&self.reference));
        Ok((e, -jp * dq_rot, -jp * w, -(jp * r)))
    }
}

impl CostFunction for AnchoredResidual {
    fn residual_dim(&self) -> usize {
        2
    }

    fn block_dims(&self) -> Vec<usize> {
        vec![3, 3, 1]
    }

    fn evaluate(&self, params: &[&BlockValue], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, EvalError> {
        let (e, jrot, jr, jw) = self
            .eval(params[0].rotation(), &vec3(params[1]), params[2].scalar())
            .map_err(map_geometry)?;
        if let Some(j) = jacobians {
            j[0].copy_from(&jrot);
            j[1].copy_from(&jr);
            j[2].copy_from(&jw);
        }
        Ok(DVector::from_column_slice(e.as_slice()))
    }
}

fn vec3(v: &BlockValue) -> Vector3<f64> {
    let v = v.vector();
    Vector3::new(v[0], v[1], v[2])
}

pub struct Step3Blocks {
    pub rotations: Vec<BlockId>,
    pub translations: Vec<BlockId>,
    pub landmarks: Vec<BlockId>,
    /// Residual indices of the measurement factors, in observation order.
    pub measurement_residuals: Vec<usize>,
}

/// Builds the optimizer problem. Landmark blocks are Schur-eliminated.
pub fn build_problem(p: &Step3Problem) -> Result<(Problem, Step3Blocks), Step3Error> {
    let mut problem = Problem::new();
    let rotations: Vec<_> = p.rotations.iter().map(|r| problem.add_rotation_block(*r)).collect();
    let translations: Vec<_> = p
        .translations
        .iter()
        .map(|r| problem.add_vector_block(DVector::from_column_slice(r.as_slice())))
        .collect();
    let landmarks: Vec<_> = p
        .landmark_params
        .iter()
        .map(|v| {
            let id = match p.cfg.landmark_model {
                LandmarkModel::AzimuthElevation { .. } => problem.add_vector_block(DVector::from_column_slice(v)),
                LandmarkModel::AnchoredInverseDepth => problem.add_bounded_scalar(v[0], RAW_DEPTH_FLOOR),
            };
            problem.set_eliminated(id);
            id
        })
        .collect();
    let cov = DMatrix::identity(2, 2) * (p.cfg.pixel_sigma * p.cfg.pixel_sigma);
    let mut measurement_residuals = Vec::with_capacity(p.observations.len());
    for o in &p.observations {
        let blocks = vec![rotations[o.frame - 1], translations[o.frame - 1], landmarks[o.landmark]];
        let cost: Box<dyn CostFunction> = match p.cfg.landmark_model {
            LandmarkModel::AzimuthElevation { alpha } => Box::new(Step3Residual {
                cam: p.cam,
                pixel: o.pixel,
                softplus: SoftPlusParams::new(alpha)?,
            }),
            LandmarkModel::AnchoredInverseDepth => Box::new(AnchoredResidual {
                cam: p.cam,
                reference: pixel_to_camera(&p.cam, p.reference_pixels[o.landmark]).homogeneous(),
                pixel: o.pixel,
            }),
        };
        measurement_residuals.push(problem.add_residual_block(cost, blocks, Some(cov.clone()), true)?);
    }
    if p.cfg.priors && matches!(p.cfg.landmark_model, LandmarkModel::AzimuthElevation { .. }) {
        let prior_cov = DMatrix::identity(2, 2) * (p.cfg.prior_sigma * p.cfg.prior_sigma);
        for (l, id) in landmarks.iter().enumerate() {
            let cost = PriorResidual {
                cam: p.cam,
                pixel: p.reference_pixels[l],
            };
            problem.add_residual_block(Box::new(cost), vec![*id], Some(prior_cov.clone()), true)?;
        }
    }
    Ok((
        problem,
        Step3Blocks {
            rotations,
            translations,
            landmarks,
            measurement_residuals,
        },
    ))
}

fn measurement_rms(problem: &Problem, residuals: &[usize]) -> f64 {
    let mut sum = 0.0;
    for &k in residuals {
        match problem.evaluate_residual(k) {
            Ok(e) => sum += e.norm_squared(),
            Err(_) => return f64::INFINITY,
        }
    }
    (sum / residuals.len().max(1) as f64).sqrt()
}

fn landmark_estimate(p: &Step3Problem, l: usize, v: &DVector<f64>) -> Result<LandmarkEstimate, GeometryError> {
    match p.cfg.landmark_model {
        LandmarkModel::AzimuthElevation { alpha } => {
            let (omega, psi, phi) = (v[0], v[1], v[2]);
            let rho = softplus(omega, SoftPlusParams::new(alpha)?);
            Ok(LandmarkEstimate {
                track: p.landmarks[l],
                omega,
                psi,
                phi,
                rho,
                point: direction_vector(psi, phi) / rho,
            })
        }
        LandmarkModel::AnchoredInverseDepth => {
            let w = v[0];
            let point = pixel_to_camera(&p.cam, p.reference_pixels[l]).homogeneous() / w;
            let (psi, phi, rho) = point_to_azel(&point)?;
            Ok(LandmarkEstimate {
                track: p.landmarks[l],
                omega: w,
                psi,
                phi,
                rho,
                point,
            })
        }
    }
}

fn inverse_depth_of(model: LandmarkModel, v: &DVector<f64>) -> f64 {
    match model {
        LandmarkModel::AzimuthElevation { alpha } => softplus(v[0], SoftPlusParams { alpha }),
        LandmarkModel::AnchoredInverseDepth => v[0],
    }
}

pub fn solve_step3(p: &Step3Problem, lm: &LmConfig) -> Result<InitializationSolution, Step3Error> {
    if p.landmarks.len() < 3 {
        return Err(Step3Error::InsufficientLandmarks(p.landmarks.len()));
    }
    if p.n() < 2 {
        return Err(Step3Error::InsufficientFrames(p.n()));
    }
    let (mut problem, blocks) = build_problem(p)?;
    let initial_rms_px = measurement_rms(&problem, &blocks.measurement_residuals);
    let model = p.cfg.landmark_model;
    let mut min_w = f64::INFINITY;
    let mut max_ortho: f64 = 0.0;
    let report = optimizer::solve_with_observer(&mut problem, lm, |pr| {
        for id in &blocks.landmarks {
            min_w = min_w.min(inverse_depth_of(model, pr.value(*id).vector()));
        }
        for id in &blocks.rotations {
            let m = pr.value(*id).rotation().matrix();
            max_ortho = max_ortho.max((m.transpose() * m - Matrix3::identity()).norm());
        }
    })?;
    if report.termination == Termination::Diverged {
        return Err(Step3Error::Diverged { iterations: report.iterations });
    }

    let mut poses = vec![Pose::identity()];
    for (r, t) in blocks.rotations.iter().zip(&blocks.translations) {
        poses.push(Pose::new(*problem.value(*r).rotation(), vec3(problem.value(*t))));
    }
    let landmarks = blocks
        .landmarks
        .iter()
        .enumerate()
        .map(|(l, id)| landmark_estimate(p, l, problem.value(*id).vector()))
        .collect::<Result<Vec<_>, _>>()?;

    let n = p.n();
    let mut residuals = Vec::with_capacity(p.observations.len());
    let mut frame_sums = vec![(0.0, 0usize); n];
    let mut lm_sums = vec![(0.0, 0usize); p.landmarks.len()];
    for (o, &k) in p.observations.iter().zip(&blocks.measurement_residuals) {
        let e = problem
            .evaluate_residual(k)
            .map_err(|err| OptimizerError::NumericalFailure {
                residual: k,
                blocks: problem.residual_block(k).blocks.iter().map(|b| b.0).collect(),
                reason: err.to_string(),
            })?;
        let s = e.norm_squared();
        frame_sums[o.frame - 1].0 += s;
        frame_sums[o.frame - 1].1 += 1;
        lm_sums[o.landmark].0 += s;
        lm_sums[o.landmark].1 += 1;
        residuals.push(ResidualRecord {
            frame: o.frame,
            track: p.landmarks[o.landmark],
            residual: [e[0], e[1]],
        });
    }
    let rms = |(s, c): (f64, usize)| if c == 0 { 0.0 } else { (s / c as f64).sqrt() };
    Ok(InitializationSolution {
        poses,
        landmarks,
        dropped: p.dropped.clone(),
        initial_rms_px,
        final_rms_px: measurement_rms(&problem, &blocks.measurement_residuals),
        residuals,
        per_frame_rms_px: frame_sums.into_iter().map(rms).collect(),
        per_landmark_rms_px: lm_sums.into_iter().map(rms).collect(),
        min_inverse_depth: min_w,
        max_orthonormality_error: max_ortho,
        report,
    })
}
