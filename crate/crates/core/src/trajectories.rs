//! On-ground pedestrian track tables (`frame ped x y` rows, meters) and
//! per-frame views of the crowd.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec2;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("scene has no track with at least two observations")]
    EmptyScene,
    #[error("pedestrian {ped} observed twice at frame {frame}")]
    Duplicate { ped: i64, frame: i64 },
    #[error("pedestrian {ped}: frame gap {gap} is not a multiple of stride {stride}")]
    Misaligned { ped: i64, gap: i64, stride: i64 },
    #[error("frame {frame} outside scene span [{first}, {last}]")]
    OutOfRange { frame: i64, first: i64, last: i64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrajectoryError>;

/// Default annotation interval of the public track tables (2.5 fps).
pub const DEFAULT_TIMESTEP: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawTrackRow {
    pub frame_id: i64,
    pub ped_id: i64,
    pub x: f64,
    pub y: f64,
}

/// A loaded scene. Every track is sampled on the scene's frame grid
/// (`frame_id ≡ first_frame (mod stride)`) with no gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    /// Seconds between consecutive grid frames.
    pub timestep: f64,
    /// Frame-id increment between consecutive grid frames.
    pub stride: i64,
    pub tracks: BTreeMap<i64, Vec<(i64, Vec2)>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrowdMember {
    pub ped_id: i64,
    pub position: Vec2,
    /// Meters per second.
    pub velocity: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneStats {
    /// Mean number of grid frames per track.
    pub avg_traj_len: f64,
    pub avg_people: f64,
    pub min_people: usize,
    pub max_people: usize,
    /// Grid frames with at least one pedestrian; empty frames are excluded
    /// from the people-per-frame statistics.
    pub occupied_frames: usize,
    pub tracks: usize,
}

fn parse_integral(field: &str, what: &str, line: usize) -> Result<i64> {
    let value: f64 = field.parse().map_err(|_| TrajectoryError::Parse {
        line,
        message: format!("{what} {field:?} is not a number"),
    })?;
    if !value.is_finite() || value.fract() != 0.0 || value.abs() > 9.0e15 {
        return Err(TrajectoryError::Parse {
            line,
            message: format!("{what} {field:?} is not an integer"),
        });
    }
    Ok(value as i64)
}

fn parse_coord(field: &str, what: &str, line: usize) -> Result<f64> {
    let value: f64 = field.parse().map_err(|_| TrajectoryError::Parse {
        line,
        message: format!("{what} {field:?} is not a number"),
    })?;
    if !value.is_finite() {
        return Err(TrajectoryError::Parse {
            line,
            message: format!("{what} {field:?} is not finite"),
        });
    }
    Ok(value)
}

/// Parses whitespace-separated `frame ped x y` rows. Blank lines and lines
/// starting with `#` are skipped. Line numbers in errors are 1-based.
pub fn parse_rows<R: BufRead>(source: R) -> Result<Vec<RawTrackRow>> {
    let mut rows = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(TrajectoryError::Parse {
                line: line_no,
                message: format!("expected 4 fields (frame ped x y), found {}", fields.len()),
            });
        }
        let frame_id = parse_integral(fields[0], "frame", line_no)?;
        if frame_id < 0 {
            return Err(TrajectoryError::Parse {
                line: line_no,
                message: format!("negative frame {frame_id}"),
            });
        }
        rows.push(RawTrackRow {
            frame_id,
            ped_id: parse_integral(fields[1], "pedestrian id", line_no)?,
            x: parse_coord(fields[2], "x", line_no)?,
            y: parse_coord(fields[3], "y", line_no)?,
        });
    }
    Ok(rows)
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Reads a track table. `stride` is the frame-id increment of one timestep;
/// when `None` it is inferred as the gcd of within-track frame gaps.
pub fn load_track_table<R: BufRead>(
    name: &str,
    source: R,
    timestep: f64,
    stride: Option<i64>,
) -> Result<Scene> {
    let rows = parse_rows(source)?;
    Scene::from_rows(name, &rows, timestep, stride)
}

impl Scene {
    pub fn from_rows(
        name: &str,
        rows: &[RawTrackRow],
        timestep: f64,
        stride: Option<i64>,
    ) -> Result<Scene> {
        if !(timestep > 0.0) || !timestep.is_finite() {
            return Err(TrajectoryError::InvalidArgument(format!(
                "timestep {timestep} must be positive"
            )));
        }
        if let Some(s) = stride {
            if s <= 0 {
                return Err(TrajectoryError::InvalidArgument(format!(
                    "stride {s} must be positive"
                )));
            }
        }
        let mut grouped: BTreeMap<i64, BTreeMap<i64, Vec2>> = BTreeMap::new();
        for r in rows {
            let track = grouped.entry(r.ped_id).or_default();
            if track.insert(r.frame_id, Vec2::new(r.x, r.y)).is_some() {
                return Err(TrajectoryError::Duplicate {
                    ped: r.ped_id,
                    frame: r.frame_id,
                });
            }
        }
        grouped.retain(|_, t| t.len() >= 2);
        if grouped.is_empty() {
            return Err(TrajectoryError::EmptyScene);
        }
        let stride = match stride {
            Some(s) => s,
            None => grouped
                .values()
                .flat_map(|t| {
                    let frames: Vec<i64> = t.keys().copied().collect();
                    frames.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>()
                })
                .fold(0, gcd),
        };

        let mut tracks = BTreeMap::new();
        for (ped, obs) in grouped {
            let obs: Vec<(i64, Vec2)> = obs.into_iter().collect();
            let mut filled = vec![obs[0]];
            for w in obs.windows(2) {
                let ((f0, p0), (f1, p1)) = (w[0], w[1]);
                let gap = f1 - f0;
                if gap % stride != 0 {
                    return Err(TrajectoryError::Misaligned { ped, gap, stride });
                }
                let steps = gap / stride;
                for k in 1..steps {
                    let t = k as f64 / steps as f64;
                    filled.push((f0 + k * stride, p0 + (p1 - p0) * t));
                }
                filled.push((f1, p1));
            }
            tracks.insert(ped, filled);
        }
        Ok(Scene {
            name: name.to_string(),
            timestep,
            stride,
            tracks,
        })
    }

    /// Builds a scene directly from gap-free tracks on a common grid.
    pub fn from_tracks(
        name: &str,
        timestep: f64,
        stride: i64,
        tracks: BTreeMap<i64, Vec<(i64, Vec2)>>,
    ) -> Result<Scene> {
        let rows: Vec<RawTrackRow> = tracks
            .iter()
            .flat_map(|(&ped_id, t)| {
                t.iter().map(move |&(frame_id, p)| RawTrackRow {
                    frame_id,
                    ped_id,
                    x: p.x,
                    y: p.y,
                })
            })
            .collect();
        Scene::from_rows(name, &rows, timestep, Some(stride))
    }

    pub fn first_frame(&self) -> i64 {
        self.tracks.values().map(|t| t[0].0).min().unwrap_or(0)
    }

    pub fn last_frame(&self) -> i64 {
        self.tracks
            .values()
            .map(|t| t[t.len() - 1].0)
            .max()
            .unwrap_or(0)
    }

    /// Grid frames from first to last, inclusive.
    pub fn frames(&self) -> impl Iterator<Item = i64> + '_ {
        let first = self.first_frame();
        let stride = self.stride;
        let n = (self.last_frame() - first) / stride + 1;
        (0..n).map(move |k| first + k * stride)
    }

    pub fn num_frames(&self) -> usize {
        ((self.last_frame() - self.first_frame()) / self.stride + 1) as usize
    }

    fn check_frame(&self, frame: i64) -> Result<()> {
        let (first, last) = (self.first_frame(), self.last_frame());
        if frame < first || frame > last {
            return Err(TrajectoryError::OutOfRange { frame, first, last });
        }
        Ok(())
    }

    /// Position of one pedestrian at a grid frame, if present.
    pub fn position(&self, ped: i64, frame: i64) -> Option<Vec2> {
        let track = self.tracks.get(&ped)?;
        let k = self.track_index(track, frame)?;
        Some(track[k].1)
    }

    fn track_index(&self, track: &[(i64, Vec2)], frame: i64) -> Option<usize> {
        let offset = frame - track[0].0;
        if offset < 0 || offset % self.stride != 0 {
            return None;
        }
        let k = (offset / self.stride) as usize;
        (k < track.len()).then_some(k)
    }

    fn velocity_at(&self, track: &[(i64, Vec2)], k: usize) -> Vec2 {
        let dt = self.timestep;
        let n = track.len();
        if k > 0 && k + 1 < n {
            (track[k + 1].1 - track[k - 1].1) * (1.0 / (2.0 * dt))
        } else if k + 1 < n {
            (track[k + 1].1 - track[k].1) * (1.0 / dt)
        } else {
            (track[k].1 - track[k - 1].1) * (1.0 / dt)
        }
    }

    /// Pedestrians present at `frame`, ordered by id, with velocities from
    /// central differences (one-sided at track ends).
    pub fn crowd_at_frame(&self, frame: i64) -> Result<Vec<CrowdMember>> {
        self.check_frame(frame)?;
        let mut out = Vec::new();
        for (&ped_id, track) in &self.tracks {
            if let Some(k) = self.track_index(track, frame) {
                out.push(CrowdMember {
                    ped_id,
                    position: track[k].1,
                    velocity: self.velocity_at(track, k),
                });
            }
        }
        Ok(out)
    }

    /// Velocity using only the current and previous observation, as
    /// available to a live observer. Zero on a track's first frame.
    pub fn backward_velocity(&self, ped: i64, frame: i64) -> Option<Vec2> {
        let track = self.tracks.get(&ped)?;
        let k = self.track_index(track, frame)?;
        Some(if k == 0 {
            Vec2::ZERO
        } else {
            (track[k].1 - track[k - 1].1) * (1.0 / self.timestep)
        })
    }

    pub fn stats(&self) -> SceneStats {
        scene_stats(self)
    }
}

pub fn scene_stats(scene: &Scene) -> SceneStats {
    let first = scene.first_frame();
    let mut counts = vec![0usize; scene.num_frames()];
    let mut total_len = 0usize;
    for track in scene.tracks.values() {
        total_len += track.len();
        for &(f, _) in track {
            counts[((f - first) / scene.stride) as usize] += 1;
        }
    }
    let occupied: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
    let n = occupied.len().max(1);
    SceneStats {
        avg_traj_len: total_len as f64 / scene.tracks.len().max(1) as f64,
        avg_people: occupied.iter().sum::<usize>() as f64 / n as f64,
        min_people: occupied.iter().copied().min().unwrap_or(0),
        max_people: occupied.iter().copied().max().unwrap_or(0),
        occupied_frames: occupied.len(),
        tracks: scene.tracks.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn load(text: &str, stride: Option<i64>) -> Result<Scene> {
        load_track_table("t", text.as_bytes(), DEFAULT_TIMESTEP, stride)
    }

    #[test]
    fn two_rows_without_gap() {
        let s = load("0 1 0 0\n10 1 4 0\n", Some(10)).unwrap();
        assert_eq!(
            s.tracks[&1],
            vec![(0, Vec2::new(0.0, 0.0)), (10, Vec2::new(4.0, 0.0))]
        );
    }

    #[test]
    fn gap_filled_by_midpoint() {
        let s = load("0 1 0 0\n20 1 2 0\n", Some(10)).unwrap();
        assert_eq!(s.tracks[&1].len(), 3);
        assert_eq!(s.tracks[&1][1], (10, Vec2::new(1.0, 0.0)));
    }

    #[test]
    fn stride_inferred_from_gaps() {
        let s = load("0 1 0 0\n10 1 1 0\n40 1 4 0\n0 2 5 5\n20 2 5 7\n", None).unwrap();
        assert_eq!(s.stride, 10);
        assert_eq!(s.tracks[&1].len(), 5);
        assert_eq!(s.tracks[&2][1], (10, Vec2::new(5.0, 6.0)));
    }

    #[test]
    fn malformed_row_names_line() {
        let err = load("0 1 0 0\na b c\n", None).unwrap_err();
        assert!(
            matches!(err, TrajectoryError::Parse { line: 2, .. }),
            "{err}"
        );
        assert!(err.to_string().contains("line 2"));
        let err = load("0 1 0 0\n1 1 nan 0\n", None).unwrap_err();
        assert!(matches!(err, TrajectoryError::Parse { line: 2, .. }));
    }

    #[test]
    fn float_formatted_ids_accepted() {
        let s = load("780.0 1.0 8.46 3.59\n790.0 1.0 9.57 3.79\n", None).unwrap();
        assert_eq!(s.first_frame(), 780);
        assert_eq!(s.stride, 10);
    }

    #[test]
    fn empty_and_degenerate_tables() {
        assert!(matches!(load("", None), Err(TrajectoryError::EmptyScene)));
        // a single observation cannot define a velocity
        assert!(matches!(
            load("0 1 0 0\n", None),
            Err(TrajectoryError::EmptyScene)
        ));
        assert!(matches!(
            load("0 1 0 0\n0 1 1 1\n", None),
            Err(TrajectoryError::Duplicate { ped: 1, frame: 0 })
        ));
        assert!(matches!(
            load("0 1 0 0\n15 1 1 1\n", Some(10)),
            Err(TrajectoryError::Misaligned { .. })
        ));
    }

    #[test]
    fn short_tracks_dropped() {
        let s = load("0 1 0 0\n10 1 1 0\n0 2 3 3\n", None).unwrap();
        assert_eq!(s.tracks.len(), 1);
    }

    #[test]
    fn velocity_examples() {
        let s = load(
            "0 1 0 0\n1 1 1 0\n2 1 2 0\n0 2 3 3\n1 2 3 3\n2 2 3 3\n",
            Some(1),
        )
        .unwrap();
        let crowd = s.crowd_at_frame(1).unwrap();
        assert_eq!(crowd[0].velocity, Vec2::new(2.5, 0.0));
        assert_eq!(crowd[1].velocity, Vec2::ZERO);
        // one-sided at the ends
        assert_eq!(
            s.crowd_at_frame(0).unwrap()[0].velocity,
            Vec2::new(2.5, 0.0)
        );
        assert_eq!(
            s.crowd_at_frame(2).unwrap()[0].velocity,
            Vec2::new(2.5, 0.0)
        );
        assert_eq!(s.backward_velocity(1, 0), Some(Vec2::ZERO));
        assert_eq!(s.backward_velocity(1, 2), Some(Vec2::new(2.5, 0.0)));
    }

    #[test]
    fn empty_frame_and_out_of_range() {
        let s = load("0 1 0 0\n1 1 1 0\n3 2 0 0\n4 2 1 0\n", Some(1)).unwrap();
        assert!(s.crowd_at_frame(2).unwrap().is_empty());
        assert!(matches!(
            s.crowd_at_frame(5),
            Err(TrajectoryError::OutOfRange { .. })
        ));
        assert!(matches!(
            s.crowd_at_frame(-1),
            Err(TrajectoryError::OutOfRange { .. })
        ));
    }

    #[test]
    fn stats_single_track() {
        let s = load("0 1 0 0\n1 1 1 0\n2 1 2 0\n3 1 3 0\n4 1 4 0\n", Some(1)).unwrap();
        let st = scene_stats(&s);
        assert_eq!(
            (st.avg_traj_len, st.avg_people, st.min_people, st.max_people),
            (5.0, 1.0, 1, 1)
        );
    }

    #[test]
    fn stats_skip_empty_frames() {
        let s = load(
            "0 1 0 0\n1 1 1 0\n0 2 0 0\n1 2 1 0\n5 3 0 0\n6 3 1 0\n",
            Some(1),
        )
        .unwrap();
        let st = scene_stats(&s);
        assert_eq!(st.occupied_frames, 4);
        assert_eq!((st.min_people, st.max_people), (1, 2));
        assert_eq!(st.avg_people, 1.5);
    }

    fn table_strategy() -> impl Strategy<Value = Vec<(i64, i64, f64, f64)>> {
        prop::collection::vec((0i64..30, 0i64..6, -20.0..20.0f64, -20.0..20.0f64), 2..60)
    }

    fn to_text(rows: &[(i64, i64, f64, f64)]) -> String {
        let mut seen = std::collections::HashSet::new();
        rows.iter()
            .filter(|r| seen.insert((r.0, r.1)))
            .map(|r| format!("{} {} {} {}\n", r.0 * 10, r.1, r.2, r.3))
            .collect()
    }

    proptest! {
        #[test]
        fn interpolation_preserves_endpoints(rows in table_strategy()) {
            let text = to_text(&rows);
            if let Ok(s) = load(&text, Some(10)) {
                let raw = parse_rows(text.as_bytes()).unwrap();
                for r in raw {
                    if let Some(track) = s.tracks.get(&r.ped_id) {
                        prop_assert_eq!(s.position(r.ped_id, r.frame_id), Some(Vec2::new(r.x, r.y)));
                        prop_assert!(track.windows(2).all(|w| w[1].0 - w[0].0 == 10));
                    }
                }
            }
        }

        #[test]
        fn crowd_counts_monotone_under_track_addition(rows in table_strategy(), extra in prop::collection::vec((0i64..30, -5.0..5.0f64), 2..10)) {
            let text = to_text(&rows);
            let Ok(base) = load(&text, Some(10)) else { return Ok(()); };
            let mut more = text.clone();
            let mut frames: Vec<i64> = extra.iter().map(|e| e.0).collect();
            frames.sort();
            frames.dedup();
            prop_assume!(frames.len() >= 2);
            for (f, x) in frames.iter().zip(extra.iter().map(|e| e.1)) {
                more.push_str(&format!("{} 99 {x} 0\n", f * 10));
            }
            let bigger = load(&more, Some(10)).unwrap();
            for f in base.frames() {
                let a = base.crowd_at_frame(f).unwrap().len();
                let b = bigger.crowd_at_frame(f).unwrap().len();
                prop_assert!(b >= a);
            }
        }
    }
}
