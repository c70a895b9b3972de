//! Feature tracks: the pipeline's only input, plus the line-oriented text
//! format used to exchange them.
//!
//! ```text
//! SFSM-TRACKS v1
//! camera fx fy cx cy width height
//! frames <n+1>
//! tracks <m>
//! track <id>
//! <frame_idx> <u> <v>
//! ```
//!
//! Optional `generator <text>` and `seed <u64>` lines may follow the magic
//! line, and an optional `timestamps t0 t1 ...` line may follow `frames`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{CameraModel, PixelPoint};

pub const TRACKS_MAGIC: &str = "SFSM-TRACKS v1";

/// Minimum number of tracks seen in both the reference and the last frame.
pub const MIN_COVISIBLE: usize = 3;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error{}: {reason}", track.map(|t| format!(" in track {t}")).unwrap_or_default())]
    Validation { track: Option<usize>, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrackError {
    fn invalid(track: Option<usize>, reason: impl Into<String>) -> Self {
        TrackError::Validation { track, reason: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame: usize,
    pub pixel: PixelPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub observations: Vec<Observation>,
}

impl Track {
    pub fn new(id: u64, observations: Vec<Observation>) -> Self {
        Self { id, observations }
    }

    pub fn observation(&self, frame: usize) -> Option<PixelPoint> {
        self.observations
            .binary_search_by_key(&frame, |o| o.frame)
            .ok()
            .map(|k| self.observations[k].pixel)
    }

    pub fn observes(&self, frame: usize) -> bool {
        self.observation(frame).is_some()
    }

    /// Last observed frame index.
    pub fn last_frame(&self) -> Option<usize> {
        self.observations.last().map(|o| o.frame)
    }
}

/// `m` tracks over frames `0..n_frames`; frame 0 is the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTracks {
    pub n_frames: usize,
    pub tracks: Vec<Track>,
    pub cam: CameraModel,
    pub frame_timestamps: Option<Vec<f64>>,
    pub generator: Option<String>,
    pub seed: Option<u64>,
}

impl FeatureTracks {
    /// Builds and validates a track set.
    pub fn new(cam: CameraModel, n_frames: usize, tracks: Vec<Track>) -> Result<Self, TrackError> {
        let t = Self {
            n_frames,
            tracks,
            cam,
            frame_timestamps: None,
            generator: None,
            seed: None,
        };
        t.validate()?;
        Ok(t)
    }

    /// Index of the last frame, `n`.
    pub fn last_frame(&self) -> usize {
        self.n_frames - 1
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn validate(&self) -> Result<(), TrackError> {
        self.cam
            .validate()
            .map_err(|e| TrackError::invalid(None, e.to_string()))?;
        if self.n_frames < 2 {
            return Err(TrackError::invalid(None, format!("need at least 2 frames, got {}", self.n_frames)));
        }
        if self.tracks.is_empty() {
            return Err(TrackError::invalid(None, "track list is empty"));
        }
        if let Some(ts) = &self.frame_timestamps {
            if ts.len() != self.n_frames || ts.iter().any(|t| !t.is_finite()) {
                return Err(TrackError::invalid(None, "timestamps must be finite, one per frame"));
            }
        }
        let mut ids: Vec<u64> = self.tracks.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(TrackError::invalid(None, "duplicate track ids"));
        }
        for (k, track) in self.tracks.iter().enumerate() {
            let first = track
                .observations
                .first()
                .ok_or_else(|| TrackError::invalid(Some(k), "track has no observations"))?;
            if first.frame != 0 {
                return Err(TrackError::invalid(Some(k), "missing reference-frame (frame 0) observation"));
            }
            if let Some(w) = track.observations.windows(2).find(|w| w[1].frame <= w[0].frame) {
                return Err(TrackError::invalid(
                    Some(k),
                    format!("frame indices not strictly increasing at frame {}", w[1].frame),
                ));
            }
            for (pos, obs) in track.observations.iter().enumerate() {
                if obs.frame != pos {
                    return Err(TrackError::invalid(Some(k), format!("gap before frame {}", obs.frame)));
                }
                if obs.frame >= self.n_frames {
                    return Err(TrackError::invalid(Some(k), format!("frame {} out of range", obs.frame)));
                }
                if !obs.pixel.is_finite() || !self.cam.contains(obs.pixel) {
                    return Err(TrackError::invalid(
                        Some(k),
                        format!("pixel ({}, {}) at frame {} outside image bounds", obs.pixel.u, obs.pixel.v, obs.frame),
                    ));
                }
            }
        }
        let covisible = covisible_subset(self, 0, self.last_frame()).len();
        if covisible < MIN_COVISIBLE {
            return Err(TrackError::invalid(
                None,
                format!("only {covisible} tracks span frames 0..{}, need {MIN_COVISIBLE}", self.last_frame()),
            ));
        }
        Ok(())
    }
}

/// Sorted indices of tracks observed in both frames.
pub fn covisible_subset(tracks: &FeatureTracks, frame_a: usize, frame_b: usize) -> Vec<usize> {
    tracks
        .tracks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.observes(frame_a) && t.observes(frame_b))
        .map(|(k, _)| k)
        .collect()
}

pub fn format_tracks(tracks: &FeatureTracks) -> String {
    let mut out = String::new();
    out.push_str(TRACKS_MAGIC);
    out.push('\n');
    if let Some(g) = &tracks.generator {
        let _ = writeln!(out, "generator {}", g.replace('\n', " "));
    }
    if let Some(s) = tracks.seed {
        let _ = writeln!(out, "seed {s}");
    }
    let c = &tracks.cam;
    let _ = writeln!(out, "camera {:?} {:?} {:?} {:?} {} {}", c.fx, c.fy, c.cx, c.cy, c.width, c.height);
    let _ = writeln!(out, "frames {}", tracks.n_frames);
    if let Some(ts) = &tracks.frame_timestamps {
        out.push_str("timestamps");
        for t in ts {
            let _ = write!(out, " {t:?}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "tracks {}", tracks.tracks.len());
    for t in &tracks.tracks {
        let _ = writeln!(out, "track {}", t.id);
        for o in &t.observations {
            let _ = writeln!(out, "{} {:?} {:?}", o.frame, o.pixel.u, o.pixel.v);
        }
    }
    out
}

pub fn write_tracks(tracks: &FeatureTracks, path: impl AsRef<Path>) -> Result<(), TrackError> {
    tracks.validate()?;
    fs::write(path, format_tracks(tracks))?;
    Ok(())
}

pub fn read_tracks(path: impl AsRef<Path>) -> Result<FeatureTracks, TrackError> {
    let text = fs::read_to_string(path)?;
    parse_tracks(&text)
}

fn parse_err(line: usize, message: impl Into<String>) -> TrackError {
    TrackError::Parse { line, message: message.into() }
}

fn parse_field<T: std::str::FromStr>(line: usize, name: &str, s: Option<&str>) -> Result<T, TrackError> {
    let s = s.ok_or_else(|| parse_err(line, format!("missing field {name}")))?;
    s.parse().map_err(|_| parse_err(line, format!("bad {name} '{s}'")))
}

pub fn parse_tracks(text: &str) -> Result<FeatureTracks, TrackError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (ln, magic) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    if magic != TRACKS_MAGIC {
        return Err(parse_err(ln, format!("unrecognized format line '{magic}'")));
    }

    let mut generator = None;
    let mut seed = None;
    let mut cam = None;
    let mut n_frames = None;
    let mut timestamps = None;
    let n_tracks: usize;
    loop {
        let (ln, line) = lines.next().ok_or_else(|| parse_err(ln, "truncated header"))?;
        let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let mut f = rest.split_whitespace();
        let fixed_arity = !matches!(key, "generator" | "timestamps");
        match key {
            "generator" => generator = Some(rest.trim().to_string()),
            "seed" => seed = Some(parse_field::<u64>(ln, "seed", f.next())?),
            "camera" => {
                let fx = parse_field(ln, "fx", f.next())?;
                let fy = parse_field(ln, "fy", f.next())?;
                let cx = parse_field(ln, "cx", f.next())?;
                let cy = parse_field(ln, "cy", f.next())?;
                let w = parse_field(ln, "width", f.next())?;
                let h = parse_field(ln, "height", f.next())?;
                cam = Some(CameraModel { fx, fy, cx, cy, width: w, height: h });
            }
            "frames" => n_frames = Some(parse_field::<usize>(ln, "frames", f.next())?),
            "timestamps" => {
                let ts: Result<Vec<f64>, _> = f.by_ref().map(|s| parse_field(ln, "timestamp", Some(s))).collect();
                timestamps = Some(ts?);
            }
            "tracks" => {
                n_tracks = parse_field(ln, "tracks", f.next())?;
                break;
            }
            other => return Err(parse_err(ln, format!("unknown header key '{other}'"))),
        }
        if fixed_arity && f.next().is_some() {
            return Err(parse_err(ln, format!("trailing fields after '{key}'")));
        }
    }
    let cam = cam.ok_or_else(|| parse_err(0, "missing camera line"))?;
    let n_frames = n_frames.ok_or_else(|| parse_err(0, "missing frames line"))?;

    let mut tracks: Vec<Track> = Vec::with_capacity(n_tracks);
    for (ln, line) in lines {
        let mut f = line.split_whitespace();
        let first = f.next().unwrap_or_default();
        if first == "track" {
            let id = parse_field(ln, "track id", f.next())?;
            tracks.push(Track::new(id, Vec::new()));
        } else {
            let frame = parse_field(ln, "frame index", Some(first))?;
            let u = parse_field(ln, "u", f.next())?;
            let v = parse_field(ln, "v", f.next())?;
            let track = tracks
                .last_mut()
                .ok_or_else(|| parse_err(ln, "observation before any track line"))?;
            track.observations.push(Observation { frame, pixel: PixelPoint::new(u, v) });
        }
        if f.next().is_some() {
            return Err(parse_err(ln, "trailing fields"));
        }
    }
    if tracks.len() != n_tracks {
        return Err(TrackError::invalid(
            None,
            format!("header declares {n_tracks} tracks, body has {}", tracks.len()),
        ));
    }
    let t = FeatureTracks {
        n_frames,
        tracks,
        cam,
        frame_timestamps: timestamps,
        generator,
        seed,
    };
    t.validate()?;
    Ok(t)
}
