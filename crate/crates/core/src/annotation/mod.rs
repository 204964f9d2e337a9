//! Coarse-to-fine interaction annotation.
//!
//! A trajectory summary of the target object feeds a coarse prompt; the
//! coarse sentence plus per-second hand contact events feed a fine prompt
//! that yields three phase sentences. Text comes from a pluggable
//! [`LanguageModelClient`]; [`TemplateClient`] is the deterministic default.

mod client;
mod prompt;
mod scoring;
mod template;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use client::{
    prompt_key, EchoClient, HttpClient, HttpClientConfig, LanguageModelClient, LmContext, LmRequest,
    ReplayClient, ReplayEntry,
};
pub use prompt::{build_coarse_prompt, build_fine_prompt, ACTION_LIST};
pub use scoring::{bleu4, rouge_l, rouge_n, score_text, TextScores};
pub use template::{coarse_verbs, TemplateClient, Verb};

use crate::affordance::contact_mask;
use crate::error::{CoreError, Result};
use crate::geometry::{centroid, Point, PointCloudSequence};
use crate::skeleton::JointSequence;

/// Object trajectory digest sampled once per second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub category: String,
    /// Axis-aligned extents of the first frame (m).
    pub size: [f64; 3],
    pub duration_s: f64,
    pub fps: f64,
    /// Frame index of each sample.
    pub sample_frames: Vec<usize>,
    /// Object centroid at each sample.
    pub centers: Vec<Point>,
    /// Lowest point height at each sample.
    pub bottoms: Vec<f64>,
    /// Angle (degrees) of the principal horizontal axis at each sample.
    pub headings_deg: Vec<f64>,
    pub action_list: Vec<String>,
}

/// Angle of the dominant axis of the points' xz spread, in degrees.
fn principal_heading_deg(points: &[Point]) -> f64 {
    let c = centroid(points);
    let (mut sxx, mut szz, mut sxz) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dz) = (p[0] - c[0], p[2] - c[2]);
        sxx += dx * dx;
        szz += dz * dz;
        sxz += dx * dz;
    }
    (0.5 * (2.0 * sxz).atan2(sxx - szz)).to_degrees()
}

pub fn summarize_trajectory(cloud: &PointCloudSequence, category: &str, fps: f64) -> Result<TrajectorySummary> {
    if !(fps > 0.0) {
        return Err(CoreError::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    let l = cloud.frames();
    let (lo, hi) = cloud.bounds(0);
    let sample_frames: Vec<usize> =
        (0..).map(|k| (k as f64 * fps).floor() as usize).take_while(|&f| f < l).collect();
    let centers = sample_frames.iter().map(|&f| cloud.centroid(f)).collect();
    let bottoms = sample_frames.iter().map(|&f| cloud.bounds(f).0[1]).collect();
    let headings_deg = sample_frames.iter().map(|&f| principal_heading_deg(cloud.frame(f))).collect();
    Ok(TrajectorySummary {
        category: category.to_owned(),
        size: [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
        duration_s: l as f64 / fps,
        fps,
        sample_frames,
        centers,
        bottoms,
        headings_deg,
        action_list: ACTION_LIST.iter().map(|s| s.to_string()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hands {
    None,
    Left,
    Right,
    Both,
}

/// Side of the object a hand touches, seen in the object-centered frame
/// (+x is the person's left, +y is up).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "left")]
    Left,
    #[serde(rename = "right")]
    Right,
    #[serde(rename = "top")]
    Top,
    #[serde(rename = "bottom")]
    Bottom,
    #[serde(rename = "left-top")]
    LeftTop,
    #[serde(rename = "left-bottom")]
    LeftBottom,
    #[serde(rename = "right-top")]
    RightTop,
    #[serde(rename = "right-bottom")]
    RightBottom,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::Left,
        Direction::Right,
        Direction::Top,
        Direction::Bottom,
        Direction::LeftTop,
        Direction::LeftBottom,
        Direction::RightTop,
        Direction::RightBottom,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Top => "top",
            Direction::Bottom => "bottom",
            Direction::LeftTop => "left-top",
            Direction::LeftBottom => "left-bottom",
            Direction::RightTop => "right-top",
            Direction::RightBottom => "right-bottom",
        }
    }

    /// Labels a contact offset from the object center. Offsets within 10%
    /// of the extent on an axis count as centered on that axis; if both
    /// axes are centered the larger relative offset decides.
    pub fn from_offset(dx: f64, dy: f64, extent_x: f64, extent_y: f64) -> Direction {
        let ex = extent_x.max(1e-9);
        let ey = extent_y.max(1e-9);
        let horiz = if dx > 0.1 * ex {
            Some(true)
        } else if dx < -0.1 * ex {
            Some(false)
        } else {
            None
        };
        let vert = if dy > 0.1 * ey {
            Some(true)
        } else if dy < -0.1 * ey {
            Some(false)
        } else {
            None
        };
        match (horiz, vert) {
            (Some(true), Some(true)) => Direction::LeftTop,
            (Some(true), Some(false)) => Direction::LeftBottom,
            (Some(false), Some(true)) => Direction::RightTop,
            (Some(false), Some(false)) => Direction::RightBottom,
            (Some(true), None) => Direction::Left,
            (Some(false), None) => Direction::Right,
            (None, Some(true)) => Direction::Top,
            (None, Some(false)) => Direction::Bottom,
            (None, None) => {
                if (dx / ex).abs() >= (dy / ey).abs() {
                    if dx >= 0.0 {
                        Direction::Left
                    } else {
                        Direction::Right
                    }
                } else if dy >= 0.0 {
                    Direction::Top
                } else {
                    Direction::Bottom
                }
            }
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactEvent {
    pub time_s: f64,
    pub frame: usize,
    pub hands: Hands,
    /// Mean position of the contacting hands; the object center when none.
    pub position: Point,
    pub object_center: Point,
    /// One label per contacting hand, left hand first. Empty iff `hands` is none.
    pub directions: Vec<Direction>,
}

/// One event per sampled second from hand-to-object proximity.
///
/// `hands` holds the left and right hand positions (2 joints per frame).
pub fn infer_contact_events(
    hands: &JointSequence,
    cloud: &PointCloudSequence,
    tau: f64,
    fps: f64,
) -> Result<Vec<ContactEvent>> {
    if hands.joints() != 2 {
        return Err(CoreError::Shape(format!("expected 2 hand joints, got {}", hands.joints())));
    }
    if !(fps > 0.0) {
        return Err(CoreError::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    let mask = contact_mask(hands, cloud, tau)?;
    let mut events = Vec::new();
    for f in (0..).map(|k| (k as f64 * fps).floor() as usize).take_while(|&f| f < hands.frames()) {
        let (lo, hi) = cloud.bounds(f);
        let center = cloud.centroid(f);
        let touching: Vec<usize> = (0..2).filter(|&j| mask.get(f, j)).collect();
        let hands_label = match (mask.get(f, 0), mask.get(f, 1)) {
            (false, false) => Hands::None,
            (true, false) => Hands::Left,
            (false, true) => Hands::Right,
            (true, true) => Hands::Both,
        };
        let position = if touching.is_empty() {
            center
        } else {
            let pts: Vec<Point> = touching.iter().map(|&j| hands.get(f, j)).collect();
            centroid(&pts)
        };
        let directions = touching
            .iter()
            .map(|&j| {
                let p = hands.get(f, j);
                Direction::from_offset(p[0] - center[0], p[1] - center[1], hi[0] - lo[0], hi[1] - lo[1])
            })
            .collect();
        events.push(ContactEvent {
            time_s: f as f64 / fps,
            frame: f,
            hands: hands_label,
            position,
            object_center: center,
            directions,
        });
    }
    Ok(events)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub clip_id: String,
    pub coarse_text: String,
    pub fine_text: Vec<String>,
    pub events: Vec<ContactEvent>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.fine_text.len() != 3 {
            return Err(CoreError::PhaseCount(self.fine_text.len()));
        }
        Ok(())
    }
}

/// Splits text at sentence-final `.`, `!` or `?`.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        cur.push(c);
        if matches!(c, '.' | '!' | '?') {
            let s = cur.trim();
            if s.chars().any(char::is_alphanumeric) {
                out.push(s.to_owned());
            }
            cur.clear();
        }
    }
    let s = cur.trim();
    if s.chars().any(char::is_alphanumeric) {
        out.push(s.to_owned());
    }
    out
}

pub fn coarse_request(summary: &TrajectorySummary) -> Result<LmRequest> {
    Ok(LmRequest { prompt: build_coarse_prompt(summary)?, context: LmContext::Coarse { summary: summary.clone() } })
}

pub fn fine_request(coarse: &str, summary: &TrajectorySummary, events: &[ContactEvent]) -> Result<LmRequest> {
    Ok(LmRequest {
        prompt: build_fine_prompt(coarse, summary, events)?,
        context: LmContext::Fine { coarse: coarse.to_owned(), summary: summary.clone(), events: events.to_vec() },
    })
}

fn ask(request: &LmRequest, client: &dyn LanguageModelClient) -> Result<String> {
    client.complete(request).map_err(|e| match e {
        e @ CoreError::LanguageModel { .. } => e,
        other => CoreError::LanguageModel { prompt: request.prompt.clone(), reason: other.to_string() },
    })
}

/// One coarse sentence.
pub fn annotate_coarse(request: &LmRequest, client: &dyn LanguageModelClient) -> Result<String> {
    let text = ask(request, client)?;
    let text = text.trim();
    if text.is_empty() {
        return Err(CoreError::LanguageModel { prompt: request.prompt.clone(), reason: "empty response".into() });
    }
    Ok(text.to_owned())
}

/// Exactly three phase sentences.
pub fn annotate_fine(request: &LmRequest, client: &dyn LanguageModelClient) -> Result<Vec<String>> {
    let text = ask(request, client)?;
    let text = text.split("The fine-grained result:").last().unwrap_or(&text);
    let sentences = split_sentences(text);
    if sentences.len() != 3 {
        return Err(CoreError::PhaseCount(sentences.len()));
    }
    Ok(sentences)
}

/// Full coarse-then-fine annotation of one clip.
pub fn annotate_clip(
    clip_id: &str,
    cloud: &PointCloudSequence,
    hands: &JointSequence,
    category: &str,
    fps: f64,
    tau: f64,
    client: &dyn LanguageModelClient,
) -> Result<AnnotationRecord> {
    let summary = summarize_trajectory(cloud, category, fps)?;
    let coarse = annotate_coarse(&coarse_request(&summary)?, client)?;
    let events = infer_contact_events(hands, cloud, tau, fps)?;
    let fine = annotate_fine(&fine_request(&coarse, &summary, &events)?, client)?;
    Ok(AnnotationRecord { clip_id: clip_id.to_owned(), coarse_text: coarse, fine_text: fine, events })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(center: Point, half: f64) -> Vec<Point> {
        let mut v = Vec::new();
        for &x in &[-half, half] {
            for &y in &[-half, half] {
                for &z in &[-half, half] {
                    v.push([center[0] + x, center[1] + y, center[2] + z]);
                }
            }
        }
        v
    }

    #[test]
    fn static_cube_summary() {
        let frames = (0..30).map(|_| cube([0.0, 0.5, 0.0], 0.5)).collect();
        let cloud = PointCloudSequence::from_frames(frames).unwrap();
        let s = summarize_trajectory(&cloud, "cube", 30.0).unwrap();
        assert_eq!(s.size, [1.0, 1.0, 1.0]);
        assert_eq!(s.duration_s, 1.0);
        assert_eq!(s.sample_frames, vec![0]);
    }

    #[test]
    fn duration_and_sampling() {
        let frames = (0..100).map(|f| cube([0.1 * f as f64, 0.5, 0.0], 0.2)).collect();
        let cloud = PointCloudSequence::from_frames(frames).unwrap();
        let s = summarize_trajectory(&cloud, "box", 30.0).unwrap();
        assert!((s.duration_s - 100.0 / 30.0).abs() < 1e-12);
        assert_eq!(s.sample_frames, vec![0, 30, 60, 90]);
        assert!(s.centers.windows(2).all(|w| w[1][0] > w[0][0]));
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(split_sentences("First, a. Next, b! Finally, c"), vec!["First, a.", "Next, b!", "Finally, c"]);
        assert_eq!(split_sentences("hands,lifting. ."), vec!["hands,lifting."]);
    }

    #[test]
    fn direction_dead_zone() {
        assert_eq!(Direction::from_offset(0.3, 0.3, 1.0, 1.0), Direction::LeftTop);
        assert_eq!(Direction::from_offset(-0.3, 0.05, 1.0, 1.0), Direction::Right);
        assert_eq!(Direction::from_offset(0.05, -0.3, 1.0, 1.0), Direction::Bottom);
        assert_eq!(Direction::from_offset(0.02, 0.01, 1.0, 1.0), Direction::Left);
    }

    #[test]
    fn serde_labels() {
        assert_eq!(serde_json::to_string(&Direction::LeftBottom).unwrap(), "\"left-bottom\"");
        assert_eq!(serde_json::to_string(&Hands::Both).unwrap(), "\"both\"");
    }
}
