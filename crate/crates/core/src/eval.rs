//! Scale normalization, error metrics, success classification and the
//! benchmark harness.

use std::fmt::Write as _;
use std::io;

use nalgebra::{Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_log, Pose};
use crate::pipeline::{run_pipeline, PipelineRun, ResolvedPipeline, StepTimings, SuccessThresholds, Variant};
use crate::step3::InitializationSolution;
use crate::synth::SceneTruth;
use crate::tracks::FeatureTracks;

/// Below this last-frame translation norm an estimate cannot be normalized.
pub const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate scale: last-frame translation norm {0:e} is below {MIN_SCALE:e}")]
    DegenerateScale(f64),
    #[error("frame count mismatch: estimate has {estimate} poses, truth has {truth}")]
    FrameMismatch { estimate: usize, truth: usize },
    #[error("need at least one moving frame")]
    NoMotion,
    #[error("benchmark needs at least one sequence")]
    EmptyBenchmark,
    #[error("benchmark needs at least one variant")]
    NoVariants,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Poses and landmarks in the reference frame, in whatever gauge they were
/// produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// World-to-camera poses, frame 0 first.
    pub poses: Vec<Pose>,
    /// Landmark id and reference-frame position.
    pub landmarks: Vec<(u64, Vector3<f64>)>,
}

impl Reconstruction {
    pub fn from_solution(sol: &InitializationSolution, tracks: &FeatureTracks) -> Self {
        Self {
            poses: sol.poses.clone(),
            landmarks: sol.landmarks.iter().map(|l| (tracks.tracks[l.track].id, l.point)).collect(),
        }
    }

    pub fn from_truth(truth: &SceneTruth) -> Self {
        Self {
            poses: truth.poses.clone(),
            landmarks: truth.landmarks.iter().enumerate().map(|(id, p)| (id as u64, *p)).collect(),
        }
    }

    /// Translations and landmark positions multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            poses: self.poses.iter().map(|p| Pose::new(p.rotation, p.translation * s)).collect(),
            landmarks: self.landmarks.iter().map(|(id, p)| (*id, p * s)).collect(),
        }
    }
}

/// A reconstruction divided by its own last-frame translation norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    /// `R_i^T r_i / scale` for frames `1..=n`.
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Rotation3<f64>>,
    /// Landmark id and depth `Z / scale`, sorted by id.
    pub depths: Vec<(u64, f64)>,
    pub scale: f64,
}

pub fn normalize(rec: &Reconstruction) -> Result<Normalized, EvalError> {
    let n = rec.poses.len().checked_sub(1).filter(|&n| n > 0).ok_or(EvalError::NoMotion)?;
    let scale = rec.poses[n].translation.norm();
    if !(scale >= MIN_SCALE) {
        return Err(EvalError::DegenerateScale(scale));
    }
    let positions = rec.poses[1..]
        .iter()
        .map(|p| p.rotation.transpose() * p.translation / scale)
        .collect();
    let rotations = rec.poses[1..].iter().map(|p| p.rotation).collect();
    let mut depths: Vec<(u64, f64)> = rec.landmarks.iter().map(|(id, p)| (*id, p.z / scale)).collect();
    depths.sort_by_key(|(id, _)| *id);
    Ok(Normalized {
        positions,
        rotations,
        depths,
        scale,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub estimate: Normalized,
    pub truth: Normalized,
}

/// Both sides share frame 0 as the identity, so alignment reduces to
/// normalizing each by its own last-frame translation.
pub fn align_and_scale(estimate: &Reconstruction, truth: &Reconstruction) -> Result<AlignedPair, EvalError> {
    if estimate.poses.len() != truth.poses.len() {
        return Err(EvalError::FrameMismatch {
            estimate: estimate.poses.len(),
            truth: truth.poses.len(),
        });
    }
    Ok(AlignedPair {
        estimate: normalize(estimate)?,
        truth: normalize(truth)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub rms_ate: f64,
    pub rms_are_deg: f64,
    pub rms_depth: f64,
    /// Per-frame error norms for frames `1..=n`.
    pub frame_ate: Vec<f64>,
    pub frame_are_deg: Vec<f64>,
    /// Landmarks present on both sides.
    pub landmarks_compared: usize,
}

fn rms(sq: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = sq.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

pub fn compute_errors(pair: &AlignedPair) -> ErrorMetrics {
    let (e, t) = (&pair.estimate, &pair.truth);
    let frame_ate: Vec<f64> = e.positions.iter().zip(&t.positions).map(|(a, b)| (a - b).norm()).collect();
    let frame_are_deg: Vec<f64> = e
        .rotations
        .iter()
        .zip(&t.rotations)
        .map(|(r, rt)| rotation_log(&(rt * r.inverse())).norm().to_degrees())
        .collect();
    let mut depth_sq = Vec::with_capacity(e.depths.len());
    let mut k = 0;
    for (id, z) in &e.depths {
        while k < t.depths.len() && t.depths[k].0 < *id {
            k += 1;
        }
        if k < t.depths.len() && t.depths[k].0 == *id {
            depth_sq.push((z - t.depths[k].1).powi(2));
        }
    }
    ErrorMetrics {
        rms_ate: rms(frame_ate.iter().map(|x| x * x)),
        rms_are_deg: rms(frame_are_deg.iter().map(|x| x * x)),
        rms_depth: rms(depth_sq.iter().copied()),
        landmarks_compared: depth_sq.len(),
        frame_ate,
        frame_are_deg,
    }
}

pub fn evaluate(estimate: &Reconstruction, truth: &Reconstruction) -> Result<ErrorMetrics, EvalError> {
    Ok(compute_errors(&align_and_scale(estimate, truth)?))
}

pub fn classify_success(metrics: &ErrorMetrics, converged: bool, t: &SuccessThresholds) -> bool {
    converged && metrics.rms_ate <= t.translation && metrics.rms_are_deg <= t.rotation_deg && metrics.rms_depth <= t.depth
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub metrics: ErrorMetrics,
    pub converged: bool,
    pub success: bool,
    pub timings: StepTimings,
}

/// `None` when the run produced no solution.
pub fn error_report(
    run: &PipelineRun,
    tracks: &FeatureTracks,
    truth: &SceneTruth,
    thresholds: &SuccessThresholds,
) -> Option<Result<ErrorReport, EvalError>> {
    let sol = run.solution.as_ref()?;
    let est = Reconstruction::from_solution(sol, tracks);
    Some(evaluate(&est, &Reconstruction::from_truth(truth)).map(|metrics| {
        let converged = run.converged();
        ErrorReport {
            success: classify_success(&metrics, converged, thresholds),
            metrics,
            converged,
            timings: run.timings,
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Pipeline repeats per sequence for the timing table; metrics always
    /// come from the first run.
    pub timing_repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { timing_repeats: 3 }
    }
}

/// One sequence under one variant. Holds nothing time dependent, so the
/// CSV built from these rows is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRow {
    pub index: usize,
    pub seed: u64,
    pub variant: Variant,
    pub success: bool,
    pub converged: bool,
    pub failure: Option<String>,
    pub rms_ate: Option<f64>,
    pub rms_are_deg: Option<f64>,
    pub rms_depth: Option<f64>,
    pub landmarks_compared: Option<usize>,
    pub parallax_deg: f64,
    pub step1_inliers: Option<usize>,
    pub step2_iterations: Option<usize>,
    pub step2_termination: Option<String>,
    pub step3_iterations: Option<usize>,
    pub step3_termination: Option<String>,
    pub step3_final_rms_px: Option<f64>,
    pub step3_dropped: Option<usize>,
    /// Smallest landmark inverse depth over every accepted iterate of steps
    /// 2 and 3.
    pub min_inverse_depth: Option<f64>,
    /// Accepted-step cost traces of steps 2 and 3 never increase.
    pub traces_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub index: usize,
    pub seed: u64,
    pub variant: Variant,
    pub repeats: usize,
    pub step1: f64,
    pub step2: f64,
    pub step3: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn sequence_row(index: usize, tracks: &FeatureTracks, truth: &SceneTruth, cfg: &ResolvedPipeline, run: &PipelineRun) -> SequenceRow {
    let report = error_report(run, tracks, truth, &cfg.thresholds);
    let (metrics, eval_failure) = match report {
        Some(Ok(r)) => (Some(r), None),
        Some(Err(e)) => (None, Some(format!("eval: {e}"))),
        None => (None, None),
    };
    let s2 = run.step2.as_ref();
    let s3 = run.solution.as_ref();
    let min_w = match (s2, s3) {
        (Some(a), Some(b)) => Some(a.min_inverse_depth.min(b.min_inverse_depth)),
        (Some(a), None) => Some(a.min_inverse_depth),
        _ => None,
    };
    SequenceRow {
        index,
        seed: truth.seed,
        variant: cfg.variant,
        success: metrics.as_ref().is_some_and(|r| r.success),
        converged: run.converged(),
        failure: run.failure.as_ref().map(|f| f.to_string()).or(eval_failure),
        rms_ate: metrics.as_ref().map(|r| r.metrics.rms_ate),
        rms_are_deg: metrics.as_ref().map(|r| r.metrics.rms_are_deg),
        rms_depth: metrics.as_ref().map(|r| r.metrics.rms_depth),
        landmarks_compared: metrics.as_ref().map(|r| r.metrics.landmarks_compared),
        parallax_deg: truth.parallax_deg,
        step1_inliers: run.estimate.as_ref().map(|e| e.inliers.len()),
        step2_iterations: s2.map(|s| s.report.iterations),
        step2_termination: s2.map(|s| s.report.termination.to_string()),
        step3_iterations: s3.map(|s| s.report.iterations),
        step3_termination: s3.map(|s| s.report.termination.to_string()),
        step3_final_rms_px: s3.map(|s| s.final_rms_px),
        step3_dropped: s3.map(|s| s.dropped.len()),
        min_inverse_depth: min_w,
        traces_monotone: s2.is_none_or(|s| s.report.trace_is_monotone()) && s3.is_none_or(|s| s.report.trace_is_monotone()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSummary {
    pub variant: Variant,
    pub n_sequences: usize,
    pub n_success: usize,
    pub success_rate: f64,
    /// Means over successful sequences; `None` without any.
    pub mean_rms_ate: Option<f64>,
    pub mean_rms_are_deg: Option<f64>,
    pub mean_rms_depth: Option<f64>,
    /// Mean per-step compute time over successful sequences, seconds.
    pub mean_time_step1: Option<f64>,
    pub mean_time_step2: Option<f64>,
    pub mean_time_step3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedMeans {
    pub variant: Variant,
    pub mean_rms_ate: f64,
    pub mean_rms_are_deg: f64,
    pub mean_rms_depth: f64,
}

/// Means restricted to sequences every variant solved; only emitted when
/// there is at least one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedComparison {
    pub n_mutual: usize,
    pub means: Vec<PairedMeans>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSummary {
    pub n_sequences: usize,
    /// Human-readable success criterion the rates were computed with.
    pub success_criterion: String,
    pub population: String,
    pub variants: Vec<VariantSummary>,
    pub paired: Option<PairedComparison>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    /// Variant-major, sequence order within each variant.
    pub rows: Vec<SequenceRow>,
    pub timings: Vec<TimingRow>,
    pub summary: BenchmarkSummary,
}

impl BenchmarkResult {
    pub fn rows_for(&self, variant: Variant) -> impl Iterator<Item = &SequenceRow> {
        self.rows.iter().filter(move |r| r.variant == variant)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn success_criterion(t: &SuccessThresholds) -> String {
    format!(
        "steps 2 and 3 converged, RMS ATE <= {}, RMS ARE <= {} deg, normalized depth RMSE <= {}",
        t.translation, t.rotation_deg, t.depth
    )
}

/// Aggregates rows. Rows of one variant must be in sequence order and every
/// variant must cover the same sequences.
pub fn summarize(rows: &[SequenceRow], timings: &[TimingRow], variants: &[Variant], thresholds: &SuccessThresholds) -> BenchmarkSummary {
    let mut out = Vec::new();
    for &v in variants {
        let vr: Vec<&SequenceRow> = rows.iter().filter(|r| r.variant == v).collect();
        let ok: Vec<&SequenceRow> = vr.iter().copied().filter(|r| r.success).collect();
        let ok_t: Vec<&TimingRow> = timings
            .iter()
            .filter(|t| t.variant == v && ok.iter().any(|r| r.index == t.index))
            .collect();
        let n = vr.len();
        out.push(VariantSummary {
            variant: v,
            n_sequences: n,
            n_success: ok.len(),
            success_rate: if n == 0 { 0.0 } else { 100.0 * ok.len() as f64 / n as f64 },
            mean_rms_ate: mean(ok.iter().filter_map(|r| r.rms_ate)),
            mean_rms_are_deg: mean(ok.iter().filter_map(|r| r.rms_are_deg)),
            mean_rms_depth: mean(ok.iter().filter_map(|r| r.rms_depth)),
            mean_time_step1: mean(ok_t.iter().map(|t| t.step1)),
            mean_time_step2: mean(ok_t.iter().map(|t| t.step2)),
            mean_time_step3: mean(ok_t.iter().map(|t| t.step3)),
        });
    }
    let paired = (variants.len() > 1).then(|| {
        let mutual: Vec<usize> = rows
            .iter()
            .filter(|r| r.variant == variants[0] && r.success)
            .map(|r| r.index)
            .filter(|&i| {
                variants[1..]
                    .iter()
                    .all(|&v| rows.iter().any(|r| r.variant == v && r.index == i && r.success))
            })
            .collect();
        let means = variants
            .iter()
            .map(|&v| {
                let sel: Vec<&SequenceRow> = rows
                    .iter()
                    .filter(|r| r.variant == v && mutual.contains(&r.index))
                    .collect();
                PairedMeans {
                    variant: v,
                    mean_rms_ate: mean(sel.iter().filter_map(|r| r.rms_ate)).unwrap_or(f64::NAN),
                    mean_rms_are_deg: mean(sel.iter().filter_map(|r| r.rms_are_deg)).unwrap_or(f64::NAN),
                    mean_rms_depth: mean(sel.iter().filter_map(|r| r.rms_depth)).unwrap_or(f64::NAN),
                }
            })
            .collect();
        PairedComparison {
            n_mutual: mutual.len(),
            means,
        }
    });
    let paired = paired.filter(|p| p.n_mutual > 0);
    BenchmarkSummary {
        n_sequences: rows.iter().filter(|r| r.variant == variants[0]).count(),
        success_criterion: success_criterion(thresholds),
        population: "means over successful sequences; paired means over sequences every variant solved".into(),
        variants: out,
        paired,
    }
}

/// Runs every variant on every sequence. Sequences are processed in
/// parallel on the current rayon pool; output order does not depend on it.
pub fn run_benchmark(
    sequences: &[(FeatureTracks, SceneTruth)],
    variants: &[ResolvedPipeline],
    cfg: &BenchConfig,
) -> Result<BenchmarkResult, EvalError> {
    if sequences.is_empty() {
        return Err(EvalError::EmptyBenchmark);
    }
    if variants.is_empty() {
        return Err(EvalError::NoVariants);
    }
    let repeats = cfg.timing_repeats.max(1);
    let per_sequence: Vec<Vec<(SequenceRow, TimingRow)>> = sequences
        .par_iter()
        .enumerate()
        .map(|(index, (tracks, truth))| {
            variants
                .iter()
                .map(|v| {
                    let run = run_pipeline(tracks, v);
                    let row = sequence_row(index, tracks, truth, v, &run);
                    let mut t = vec![run.timings];
                    for _ in 1..repeats {
                        t.push(run_pipeline(tracks, v).timings);
                    }
                    let timing = TimingRow {
                        index,
                        seed: truth.seed,
                        variant: v.variant,
                        repeats,
                        step1: median(t.iter().map(|x| x.step1).collect()),
                        step2: median(t.iter().map(|x| x.step2).collect()),
                        step3: median(t.iter().map(|x| x.step3).collect()),
                    };
                    (row, timing)
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for k in 0..variants.len() {
        for seq in &per_sequence {
            rows.push(seq[k].0.clone());
            timings.push(seq[k].1.clone());
        }
    }
    let names: Vec<Variant> = variants.iter().map(|v| v.variant).collect();
    let summary = summarize(&rows, &timings, &names, &variants[0].thresholds);
    Ok(BenchmarkResult { rows, timings, summary })
}

pub fn write_rows_csv<'a, W: io::Write>(rows: impl IntoIterator<Item = &'a SequenceRow>, out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings_csv<'a, W: io::Write>(rows: impl IntoIterator<Item = &'a TimingRow>, out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_rows_csv`]; `#` lines are skipped.
pub fn read_rows_csv<R: io::Read>(input: R) -> Result<Vec<SequenceRow>, EvalError> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(input)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(EvalError::from)
}

pub fn summary_to_json(summary: &BenchmarkSummary) -> Result<String, EvalError> {
    Ok(serde_json::to_string_pretty(summary)?)
}

pub fn summary_from_json(text: &str) -> Result<BenchmarkSummary, EvalError> {
    Ok(serde_json::from_str(text)?)
}

fn cell(x: Option<f64>, digits: usize) -> String {
    match x {
        Some(v) => format!("{v:.digits$}"),
        None => "-".into(),
    }
}

/// Plain-text comparison table, one row per variant.
pub fn render_table(summary: &BenchmarkSummary) -> String {
    let header = [
        "Method",
        "Success Rate (%)",
        "RMS ATE",
        "RMS ARE (deg)",
        "Normalized Depth RMSE Mean",
        "Mean Compute Time step1/step2/step3 (s)",
    ];
    let rows: Vec<[String; 6]> = summary
        .variants
        .iter()
        .map(|v| {
            [
                v.variant.to_string(),
                format!("{:.1}", v.success_rate),
                cell(v.mean_rms_ate, 3),
                cell(v.mean_rms_are_deg, 3),
                cell(v.mean_rms_depth, 3),
                format!(
                    "{} / {} / {}",
                    cell(v.mean_time_step1, 4),
                    cell(v.mean_time_step2, 4),
                    cell(v.mean_time_step3, 4)
                ),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        writeln!(s, "{}", parts.join(" | ").trim_end()).unwrap();
    };
    line(&mut s, header.to_vec());
    writeln!(s, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")).unwrap();
    for r in &rows {
        line(&mut s, r.iter().map(String::as_str).collect());
    }
    writeln!(s, "sequences: {}", summary.n_sequences).unwrap();
    writeln!(s, "success: {}", summary.success_criterion).unwrap();
    writeln!(s, "population: {}", summary.population).unwrap();
    writeln!(s, "mutually successful sequences: {}", summary.paired.as_ref().map_or(0, |p| p.n_mutual)).unwrap();
    if let Some(p) = &summary.paired {
        for m in &p.means {
            writeln!(
                s,
                "  {}: ATE {:.4} ARE {:.4} deg depth {:.4}",
                m.variant, m.mean_rms_ate, m.mean_rms_are_deg, m.mean_rms_depth
            )
            .unwrap();
        }
    }
    s
}
