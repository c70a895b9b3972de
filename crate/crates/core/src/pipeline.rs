//! Steps 1 to 3 chained, for the proposed method and the small-translation
//! baseline.

use std::fmt::{self, Write as _};
use std::time::Instant;

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::LmConfig;
use crate::step1::{run_step1, SmallMotionEstimate, Step1Config};
use crate::step2::{init_step2, solve_step2, DepthModel, Step2Config, Step2Solution};
use crate::step3::{init_step3, solve_step3, InitializationSolution, LandmarkModel, Step3Config};
use crate::tracks::FeatureTracks;

pub const SOLUTION_MAGIC: &str = "SFSM-SOLUTION v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Proposed,
    HaBaseline,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Proposed, Variant::HaBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::HaBaseline => "ha-baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuccessThresholds {
    /// RMS ATE bound in normalized translation units.
    pub translation: f64,
    pub rotation_deg: f64,
    /// Normalized depth RMSE bound.
    pub depth: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self {
            translation: 1.0,
            rotation_deg: 1.0,
            depth: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub step1: Step1Config,
    pub softplus_alpha: f64,
    /// Isotropic measurement standard deviation, pixels.
    pub pixel_sigma: f64,
    pub lm: LmConfig,
    pub thresholds: SuccessThresholds,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Proposed,
            step1: Step1Config::default(),
            softplus_alpha: 10.0,
            pixel_sigma: 1.0,
            lm: LmConfig::default(),
            thresholds: SuccessThresholds::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
}

/// Per-step configuration after the variant's forced settings are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedPipeline {
    pub variant: Variant,
    pub step1: Step1Config,
    pub step2: Step2Config,
    pub step3: Step3Config,
    pub lm: LmConfig,
    pub thresholds: SuccessThresholds,
}

impl PipelineConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn resolve(&self) -> Result<ResolvedPipeline, ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        if !(self.softplus_alpha > 0.0 && self.softplus_alpha.is_finite()) {
            return Err(invalid(format!("softplus_alpha must be positive, got {}", self.softplus_alpha)));
        }
        if !(self.pixel_sigma > 0.0 && self.pixel_sigma.is_finite()) {
            return Err(invalid(format!("pixel_sigma must be positive, got {}", self.pixel_sigma)));
        }
        self.lm.validate().map_err(|e| invalid(e.to_string()))?;
        let t = &self.thresholds;
        if !(t.translation > 0.0 && t.rotation_deg > 0.0 && t.depth > 0.0) {
            return Err(invalid("thresholds must be positive".into()));
        }
        let mut step1 = self.step1.clone();
        let (step2, step3) = match self.variant {
            Variant::Proposed => (
                Step2Config {
                    depth_model: DepthModel::SoftPlus { alpha: self.softplus_alpha },
                    pixel_sigma: self.pixel_sigma,
                },
                Step3Config {
                    landmark_model: LandmarkModel::AzimuthElevation { alpha: self.softplus_alpha },
                    pixel_sigma: self.pixel_sigma,
                    prior_sigma: self.pixel_sigma,
                    priors: true,
                },
            ),
            Variant::HaBaseline => {
                let base = Step1Config::baseline();
                step1.estimate_translation = base.estimate_translation;
                step1.sample_size = base.sample_size;
                (
                    Step2Config {
                        depth_model: DepthModel::Raw,
                        pixel_sigma: self.pixel_sigma,
                    },
                    Step3Config {
                        landmark_model: LandmarkModel::AnchoredInverseDepth,
                        pixel_sigma: self.pixel_sigma,
                        prior_sigma: self.pixel_sigma,
                        priors: false,
                    },
                )
            }
        };
        step1.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(ResolvedPipeline {
            variant: self.variant,
            step1,
            step2,
            step3,
            lm: self.lm.clone(),
            thresholds: self.thresholds.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Step1,
    Step2,
    Step3,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Step1 => "step1",
            Stage::Step2 => "step2",
            Stage::Step3 => "step3",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineFailure {
    pub stage: Stage,
    pub message: String,
}

impl fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

/// Wall-clock seconds per step; zero for steps that did not run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepTimings {
    pub step1: f64,
    pub step2: f64,
    pub step3: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub estimate: Option<SmallMotionEstimate>,
    pub step2: Option<Step2Solution>,
    pub solution: Option<InitializationSolution>,
    pub failure: Option<PipelineFailure>,
    pub timings: StepTimings,
}

impl PipelineRun {
    /// All three steps ran and both optimizations report convergence.
    pub fn converged(&self) -> bool {
        match (&self.step2, &self.solution) {
            (Some(s2), Some(s3)) => s2.report.termination.converged() && s3.report.termination.converged(),
            _ => false,
        }
    }
}

pub fn run_pipeline(tracks: &FeatureTracks, cfg: &ResolvedPipeline) -> PipelineRun {
    let mut run = PipelineRun {
        estimate: None,
        step2: None,
        solution: None,
        failure: None,
        timings: StepTimings::default(),
    };
    let fail = |stage, e: &dyn fmt::Display| {
        Some(PipelineFailure {
            stage,
            message: e.to_string(),
        })
    };

    let t = Instant::now();
    let est = run_step1(tracks, &cfg.step1);
    run.timings.step1 = t.elapsed().as_secs_f64();
    let est = match est {
        Ok(e) => e,
        Err(e) => {
            run.failure = fail(Stage::Step1, &e);
            return run;
        }
    };

    let t = Instant::now();
    let s2 = init_step2(&est, tracks, &cfg.step2).and_then(|p| solve_step2(&p, &cfg.lm));
    run.timings.step2 = t.elapsed().as_secs_f64();
    run.estimate = Some(est);
    let s2 = match s2 {
        Ok(s) => s,
        Err(e) => {
            run.failure = fail(Stage::Step2, &e);
            return run;
        }
    };

    let t = Instant::now();
    let s3 = init_step3(&s2, tracks, &cfg.step3).and_then(|p| solve_step3(&p, &cfg.lm));
    run.timings.step3 = t.elapsed().as_secs_f64();
    run.step2 = Some(s2);
    match s3 {
        Ok(s) => run.solution = Some(s),
        Err(e) => run.failure = fail(Stage::Step3, &e),
    }
    run
}

fn e17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Text solution file: poses as quaternion (w x y z) and translation,
/// landmarks as `omega psi phi X Y Z`, then a diagnostics block. `header`
/// lines are written as comments after the magic line.
pub fn format_solution(run: &PipelineRun, tracks: &FeatureTracks, header: &[String]) -> String {
    let mut s = String::new();
    writeln!(s, "{SOLUTION_MAGIC}").unwrap();
    for h in header {
        for line in h.lines() {
            writeln!(s, "# {line}").unwrap();
        }
    }
    if let Some(sol) = &run.solution {
        writeln!(s, "frames {}", sol.poses.len()).unwrap();
        for (i, p) in sol.poses.iter().enumerate() {
            let q = UnitQuaternion::from_rotation_matrix(&p.rotation);
            let t = p.translation;
            writeln!(
                s,
                "pose {i} {} {} {} {} {} {} {}",
                e17(q.w),
                e17(q.i),
                e17(q.j),
                e17(q.k),
                e17(t.x),
                e17(t.y),
                e17(t.z)
            )
            .unwrap();
        }
        writeln!(s, "landmarks {}", sol.landmarks.len()).unwrap();
        for l in &sol.landmarks {
            writeln!(
                s,
                "landmark {} {} {} {} {} {} {}",
                tracks.tracks[l.track].id,
                e17(l.omega),
                e17(l.psi),
                e17(l.phi),
                e17(l.point.x),
                e17(l.point.y),
                e17(l.point.z)
            )
            .unwrap();
        }
    }
    writeln!(s, "diagnostics").unwrap();
    match &run.failure {
        Some(f) => writeln!(s, "status failed {f}").unwrap(),
        None if run.converged() => writeln!(s, "status converged").unwrap(),
        None => writeln!(s, "status not-converged").unwrap(),
    }
    if let Some(est) = &run.estimate {
        writeln!(s, "step1 inliers {}", est.inliers.len()).unwrap();
        let worst = est.rms_px.iter().cloned().fold(0.0, f64::max);
        writeln!(s, "step1 max_frame_rms_px {}", e17(worst)).unwrap();
    }
    if let Some(s2) = &run.step2 {
        let r = &s2.report;
        writeln!(
            s,
            "step2 termination {} iterations {} initial_cost {} final_cost {} final_rms_px {}",
            r.termination,
            r.iterations,
            e17(r.initial_cost),
            e17(r.final_cost),
            e17(s2.final_rms_px)
        )
        .unwrap();
    }
    if let Some(s3) = &run.solution {
        let r = &s3.report;
        writeln!(
            s,
            "step3 termination {} iterations {} initial_cost {} final_cost {} final_rms_px {}",
            r.termination,
            r.iterations,
            e17(r.initial_cost),
            e17(r.final_cost),
            e17(s3.final_rms_px)
        )
        .unwrap();
        writeln!(s, "step3 dropped {}", s3.dropped.len()).unwrap();
    }
    s
}
