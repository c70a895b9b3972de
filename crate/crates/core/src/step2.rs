//! Restricted bundle adjustment over translations and inverse depths with
//! the step-1 rotations held fixed.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    pixel_to_camera, skew, softplus, softplus_derivative, softplus_inverse, CameraModel, GeometryError, PixelPoint,
    RotationVector, SoftPlusParams,
};
use crate::optimizer::{self, BlockId, BlockValue, CostFunction, EvalError, LmConfig, OptimizerError, Problem, SolveReport, Termination};
use crate::step1::SmallMotionEstimate;
use crate::tracks::FeatureTracks;

/// Inverse depths below this are reported as extreme.
pub const EXTREME_INVERSE_DEPTH: f64 = 1e-8;

/// Positivity floor of the raw inverse-depth parameterization.
pub const RAW_DEPTH_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum Step2Error {
    #[error("step-1 estimate has no frames")]
    EmptyEstimate,
    #[error("step-1 estimate has no inlier landmarks")]
    NoLandmarks,
    #[error("track {track} is not observed in frame {frame}")]
    MissingObservation { track: usize, frame: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("optimization diverged after {iterations} iterations")]
    Diverged { iterations: usize },
}

/// How a scalar inverse-depth block maps to the inverse depth itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DepthModel {
    /// `w = softplus(omega)`, unconstrained `omega`.
    SoftPlus { alpha: f64 },
    /// `w` itself, clamped to [`RAW_DEPTH_FLOOR`].
    Raw,
}

impl Default for DepthModel {
    fn default() -> Self {
        DepthModel::SoftPlus { alpha: SoftPlusParams::default().alpha }
    }
}

impl DepthModel {
    pub fn value(self, omega: f64) -> f64 {
        match self {
            DepthModel::SoftPlus { alpha } => softplus(omega, SoftPlusParams { alpha }),
            DepthModel::Raw => omega,
        }
    }

    pub fn derivative(self, omega: f64) -> f64 {
        match self {
            DepthModel::SoftPlus { alpha } => softplus_derivative(omega, SoftPlusParams { alpha }),
            DepthModel::Raw => 1.0,
        }
    }

    /// Parameter value giving inverse depth `w`.
    pub fn parameter(self, w: f64) -> Result<f64, GeometryError> {
        match self {
            DepthModel::SoftPlus { alpha } => softplus_inverse(w, SoftPlusParams { alpha }),
            DepthModel::Raw => Ok(w.max(RAW_DEPTH_FLOOR)),
        }
    }

    pub(crate) fn add_block(self, problem: &mut Problem, param: f64) -> BlockId {
        match self {
            DepthModel::SoftPlus { .. } => problem.add_vector_block(DVector::from_element(1, param)),
            DepthModel::Raw => problem.add_bounded_scalar(param, RAW_DEPTH_FLOOR),
        }
    }

    pub fn validate(self) -> Result<(), GeometryError> {
        match self {
            DepthModel::SoftPlus { alpha } => SoftPlusParams::new(alpha).map(|_| ()),
            DepthModel::Raw => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Step2Config {
    pub depth_model: DepthModel,
    /// Isotropic measurement standard deviation, pixels.
    pub pixel_sigma: f64,
}

impl Default for Step2Config {
    fn default() -> Self {
        Self {
            depth_model: DepthModel::default(),
            pixel_sigma: 1.0,
        }
    }
}

pub(crate) fn map_geometry(e: GeometryError) -> EvalError {
    match e {
        GeometryError::DegenerateDepth(z) | GeometryError::NonPositiveDepth(z) => EvalError::DegenerateDepth(z),
        _ => EvalError::NonFinite,
    }
}

/// One measurement of landmark `j` in frame `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step2Observation {
    pub frame: usize,
    /// Position in the problem's landmark list.
    pub landmark: usize,
    pub pixel: PixelPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step2Problem {
    pub cam: CameraModel,
    pub depth_model: DepthModel,
    pub pixel_sigma: f64,
    /// Rotations of frames `1..=n`.
    pub thetas: Vec<RotationVector>,
    /// Translations of frames `1..=n`.
    pub translations: Vec<Vector3<f64>>,
    /// Track indices of the landmarks.
    pub landmarks: Vec<usize>,
    /// Homogeneous reference-frame normalized points.
    pub reference: Vec<Vector3<f64>>,
    /// Inverse-depth parameters (omega for soft-plus, w for raw).
    pub depth_params: Vec<f64>,
    pub observations: Vec<Step2Observation>,
}

impl Step2Problem {
    pub fn n(&self) -> usize {
        self.thetas.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step2Solution {
    pub thetas: Vec<RotationVector>,
    pub translations: Vec<Vector3<f64>>,
    pub landmarks: Vec<usize>,
    pub depth_params: Vec<f64>,
    /// Solved inverse depths.
    pub inverse_depths: Vec<f64>,
    /// Landmarks whose inverse depth fell below [`EXTREME_INVERSE_DEPTH`].
    pub extreme_landmarks: Vec<usize>,
    /// Smallest inverse depth seen at any accepted iterate.
    pub min_inverse_depth: f64,
    pub initial_rms_px: f64,
    pub final_rms_px: f64,
    pub report: SolveReport,
}

/// Seeds the restricted problem from the step-1 output: translations
/// `rbar / w_bar`, every inverse depth at `w_bar`.
pub fn init_step2(est: &SmallMotionEstimate, tracks: &FeatureTracks, cfg: &Step2Config) -> Result<Step2Problem, Step2Error> {
    if est.frames.is_empty() {
        return Err(Step2Error::EmptyEstimate);
    }
    if est.inliers.is_empty() {
        return Err(Step2Error::NoLandmarks);
    }
    cfg.depth_model.validate()?;
    let n = est.n();
    let omega0 = cfg.depth_model.parameter(est.w_bar)?;
    let mut reference = Vec::with_capacity(est.inliers.len());
    let mut observations = Vec::new();
    for (l, &t) in est.inliers.iter().enumerate() {
        let track = &tracks.tracks[t];
        let p0 = track.observation(0).ok_or(Step2Error::MissingObservation { track: t, frame: 0 })?;
        reference.push(pixel_to_camera(&tracks.cam, p0).homogeneous());
        for i in 1..=n {
            let pixel = track.observation(i).ok_or(Step2Error::MissingObservation { track: t, frame: i })?;
            observations.push(Step2Observation { frame: i, landmark: l, pixel });
        }
    }
    Ok(Step2Problem {
        cam: tracks.cam,
        depth_model: cfg.depth_model,
        pixel_sigma: cfg.pixel_sigma,
        thetas: est.frames.iter().map(|f| f.theta).collect(),
        translations: est.frames.iter().map(|f| f.translation.0 / est.w_bar).collect(),
        landmarks: est.inliers.clone(),
        reference,
        depth_params: vec![omega0; est.inliers.len()],
        observations,
    })
}

/// Reprojection residual for blocks `[theta, r, omega]`.
pub struct Step2Residual {
    pub cam: CameraModel,
    pub reference: Vector3<f64>,
    pub pixel: PixelPoint,
    pub depth_model: DepthModel,
}

impl Step2Residual {
    /// Residual and `(d/dtheta, d/dr, d/domega)`.
    pub fn eval(
        &self,
        theta: &Vector3<f64>,
        r: &Vector3<f64>,
        omega: f64,
    ) -> Result<(nalgebra::Vector2<f64>, nalgebra::Matrix2x3<f64>, nalgebra::Matrix2x3<f64>, nalgebra::Vector2<f64>), GeometryError> {
        let s = self.depth_model.value(omega);
        let q = self.reference + theta.cross(&self.reference) + r * s;
        let (p, jp) = self.cam.project_with_jacobian(&q)?;
        let e = nalgebra::Vector2::new(self.pixel.u - p.u, self.pixel.v - p.v);
        let j_theta = jp * skew(&self.reference);
        let j_r = -jp * s;
        let j_w = -(jp * r) * self.depth_model.derivative(omega);
        Ok((e, j_theta, j_r, j_w))
    }
}

impl CostFunction for Step2Residual {
    fn residual_dim(&self) -> usize {
        2
    }

    fn block_dims(&self) -> Vec<usize> {
        vec![3, 3, 1]
    }

    fn evaluate(&self, params: &[&BlockValue], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, EvalError> {
        let theta = params[0].vector();
        let r = params[1].vector();
        let (e, jt, jr, jw) = self
            .eval(
                &Vector3::new(theta[0], theta[1], theta[2]),
                &Vector3::new(r[0], r[1], r[2]),
                params[2].scalar(),
            )
            .map_err(map_geometry)?;
        if let Some(j) = jacobians {
            j[0].copy_from(&jt);
            j[1].copy_from(&jr);
            j[2].copy_from(&jw);
        }
        Ok(DVector::from_column_slice(e.as_slice()))
    }
}

/// Block handles of a built step-2 problem.
pub struct Step2Blocks {
    pub thetas: Vec<BlockId>,
    pub translations: Vec<BlockId>,
    pub depths: Vec<BlockId>,
}

/// Builds the optimizer problem; rotations constant, depths eliminated.
pub fn build_problem(p: &Step2Problem) -> Result<(Problem, Step2Blocks), OptimizerError> {
    let mut problem = Problem::new();
    let thetas: Vec<_> = p
        .thetas
        .iter()
        .map(|t| {
            let id = problem.add_vector_block(DVector::from_column_slice(t.0.as_slice()));
            problem.set_constant(id);
            id
        })
        .collect();
    let translations: Vec<_> = p
        .translations
        .iter()
        .map(|r| problem.add_vector_block(DVector::from_column_slice(r.as_slice())))
        .collect();
    let depths: Vec<_> = p
        .depth_params
        .iter()
        .map(|&w| {
            let id = p.depth_model.add_block(&mut problem, w);
            problem.set_eliminated(id);
            id
        })
        .collect();
    let cov = DMatrix::identity(2, 2) * (p.pixel_sigma * p.pixel_sigma);
    for o in &p.observations {
        let cost = Step2Residual {
            cam: p.cam,
            reference: p.reference[o.landmark],
            pixel: o.pixel,
            depth_model: p.depth_model,
        };
        problem.add_residual_block(
            Box::new(cost),
            vec![thetas[o.frame - 1], translations[o.frame - 1], depths[o.landmark]],
            Some(cov.clone()),
            true,
        )?;
    }
    Ok((problem, Step2Blocks { thetas, translations, depths }))
}

/// RMS pixel reprojection error of the problem at its current state.
pub fn reprojection_rms(problem: &Problem) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..problem.num_residuals() {
        match problem.evaluate_residual(k) {
            Ok(e) => sum += e.norm_squared(),
            Err(_) => return f64::INFINITY,
        }
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

fn vec3(v: &BlockValue) -> Vector3<f64> {
    let v = v.vector();
    Vector3::new(v[0], v[1], v[2])
}

pub fn solve_step2(p: &Step2Problem, lm: &LmConfig) -> Result<Step2Solution, Step2Error> {
    let (mut problem, blocks) = build_problem(p)?;
    let initial_rms_px = reprojection_rms(&problem);
    let model = p.depth_model;
    let mut min_w = f64::INFINITY;
    let report = optimizer::solve_with_observer(&mut problem, lm, |pr| {
        for id in &blocks.depths {
            min_w = min_w.min(model.value(pr.value(*id).scalar()));
        }
    })?;
    if report.termination == Termination::Diverged {
        return Err(Step2Error::Diverged { iterations: report.iterations });
    }
    let depth_params: Vec<f64> = blocks.depths.iter().map(|id| problem.value(*id).scalar()).collect();
    let inverse_depths: Vec<f64> = depth_params.iter().map(|&w| model.value(w)).collect();
    let extreme_landmarks = inverse_depths
        .iter()
        .enumerate()
        .filter(|(_, w)| **w < EXTREME_INVERSE_DEPTH)
        .map(|(l, _)| p.landmarks[l])
        .collect::<Vec<_>>();
    if !extreme_landmarks.is_empty() {
        log::warn!("step2: {} landmarks with extreme inverse depth", extreme_landmarks.len());
    }
    Ok(Step2Solution {
        thetas: blocks
            .thetas
            .iter()
            .map(|id| RotationVector(vec3(problem.value(*id))))
            .collect(),
        translations: blocks.translations.iter().map(|id| vec3(problem.value(*id))).collect(),
        landmarks: p.landmarks.clone(),
        depth_params,
        inverse_depths,
        extreme_landmarks,
        min_inverse_depth: min_w,
        initial_rms_px,
        final_rms_px: reprojection_rms(&problem),
        report,
    })
}
