use super::client::{LanguageModelClient, LmContext, LmRequest};
use super::{ContactEvent, Direction, Hands, TrajectorySummary};
use crate::error::Result;

/// Vertical travel (m) that counts as lifting or lowering.
const LIFT_M: f64 = 0.1;
/// Horizontal travel (m) that counts as moving.
const SHIFT_M: f64 = 0.2;
/// Axis swing (degrees) that counts as rotating.
const SWING_DEG: f64 = 20.0;
/// Bottom height (m) above which a resting object counts as held.
const OFF_GROUND_M: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verb {
    Lift,
    Rotate,
    Move,
    Push,
    Pull,
    Put,
    Hold,
    Face,
}

impl Verb {
    fn phrase(self, object: &str) -> String {
        match self {
            Verb::Lift => format!("lifts the {object}"),
            Verb::Rotate => format!("rotates the {object}"),
            Verb::Move => format!("moves the {object}"),
            Verb::Push => format!("pushes the {object}"),
            Verb::Pull => format!("pulls the {object}"),
            Verb::Put => format!("puts down the {object}"),
            Verb::Hold => format!("holds the {object}"),
            Verb::Face => format!("faces the {object}"),
        }
    }
}

/// Signed difference of two axis angles, folded into (-90, 90].
fn axis_delta(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    if d > 90.0 {
        d - 180.0
    } else {
        d
    }
}

/// Horizontal verb for an xz displacement, judged against the initial facing (+z).
fn horizontal_verb(dx: f64, dz: f64) -> Verb {
    let h = dx.hypot(dz);
    if dz > 0.5 * h {
        Verb::Push
    } else if dz < -0.5 * h {
        Verb::Pull
    } else {
        Verb::Move
    }
}

struct Motion {
    rise: f64,
    drop: f64,
    dx: f64,
    dz: f64,
    swing: f64,
}

fn motion_between(s: &TrajectorySummary, a: usize, b: usize) -> Motion {
    let ys: Vec<f64> = s.centers[a..=b].iter().map(|c| c[1]).collect();
    let peak = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let swing = s.headings_deg[a..=b].iter().map(|h| axis_delta(*h, s.headings_deg[a]).abs()).fold(0.0, f64::max);
    Motion {
        rise: peak - ys[0],
        drop: peak - ys[ys.len() - 1],
        dx: s.centers[b][0] - s.centers[a][0],
        dz: s.centers[b][2] - s.centers[a][2],
        swing,
    }
}

/// Ordered verb list describing the whole trajectory.
pub fn coarse_verbs(summary: &TrajectorySummary) -> Vec<Verb> {
    let n = summary.centers.len();
    if n == 0 {
        return vec![Verb::Face];
    }
    let m = motion_between(summary, 0, n - 1);
    let lifted = m.rise > LIFT_M;
    let mut verbs = Vec::new();
    if lifted {
        verbs.push(Verb::Lift);
    }
    if m.swing > SWING_DEG {
        verbs.push(Verb::Rotate);
    }
    if m.dx.hypot(m.dz) > SHIFT_M {
        verbs.push(if lifted { Verb::Move } else { horizontal_verb(m.dx, m.dz) });
    }
    if lifted && m.drop > LIFT_M {
        verbs.push(Verb::Put);
    }
    if verbs.is_empty() {
        verbs.push(if summary.bottoms[0] > OFF_GROUND_M { Verb::Hold } else { Verb::Face });
    }
    verbs
}

fn coarse_sentence(summary: &TrajectorySummary) -> String {
    let obj = &summary.category;
    let parts: Vec<String> = coarse_verbs(summary).iter().map(|v| v.phrase(obj)).collect();
    let body = match parts.len() {
        1 => parts[0].clone(),
        2 => format!("{} and {}", parts[0], parts[1]),
        _ => format!("{}, and {}", parts[..parts.len() - 1].join(", "), parts[parts.len() - 1]),
    };
    format!("A person {body}.")
}

fn hands_phrase(h: Hands) -> &'static str {
    match h {
        Hands::Both | Hands::None => "with both hands",
        Hands::Left => "with the left hand",
        Hands::Right => "with the right hand",
    }
}

fn direction_phrase(dirs: &[Direction]) -> String {
    match dirs {
        [] => String::new(),
        [d] => format!(" from the {d} side"),
        [init @ .., last] => {
            let init: Vec<&str> = init.iter().map(|d| d.label()).collect();
            format!(" from the {} and {last} sides", init.join(", "))
        }
    }
}

/// Most frequent contacting-hand state among the events, ties broken toward both hands.
fn dominant_hands(events: &[&ContactEvent]) -> Hands {
    let count = |h: Hands| events.iter().filter(|e| e.hands == h).count();
    [Hands::Both, Hands::Left, Hands::Right]
        .into_iter()
        .map(|h| (count(h), h))
        .filter(|(c, _)| *c > 0)
        .fold(None::<(usize, Hands)>, |best, cur| match best {
            Some(b) if b.0 >= cur.0 => Some(b),
            _ => Some(cur),
        })
        .map_or(Hands::None, |(_, h)| h)
}

const LEADS: [&str; 3] = ["First", "Next", "Finally"];

fn phase_sentence(
    phase: usize,
    summary: &TrajectorySummary,
    events: &[&ContactEvent],
    touched_before: bool,
    range: (usize, usize),
) -> String {
    let lead = LEADS[phase];
    let obj = &summary.category;
    let hands = dominant_hands(events);
    if hands == Hands::None {
        return if touched_before {
            format!("{lead}, the person releases the {obj}, lowering both arms and stepping back.")
        } else {
            match phase {
                0 => format!("{lead}, the person faces the {obj}, standing with both arms relaxed."),
                1 => format!("{lead}, the person steps toward the {obj}, swinging both arms naturally."),
                _ => format!("{lead}, the person reaches toward the {obj}, bending slightly at the knees."),
            }
        };
    }
    let mut dirs: Vec<Direction> = Vec::new();
    for e in events.iter().filter(|e| e.hands == hands) {
        for d in &e.directions {
            if !dirs.contains(d) {
                dirs.push(*d);
            }
        }
    }
    dirs.truncate(2);
    let m = motion_between(summary, range.0, range.1);
    let dy = summary.centers[range.1][1] - summary.centers[range.0][1];
    let shift = m.dx.hypot(m.dz);
    let (verb, legs) = if dy > 0.5 * LIFT_M {
        (format!("lifts the {obj}"), "bending slightly at the knees as both arms raise it")
    } else if dy < -0.5 * LIFT_M {
        (format!("puts down the {obj}"), "bending the knees to lower it")
    } else if m.swing > 0.75 * SWING_DEG {
        (format!("rotates the {obj}"), "turning the torso with both feet planted")
    } else if shift > 0.75 * SHIFT_M {
        let v = if summary.bottoms[range.0] > OFF_GROUND_M {
            Verb::Move
        } else {
            horizontal_verb(m.dx, m.dz)
        };
        (v.phrase(obj), "as both legs move forward")
    } else if touched_before {
        (format!("holds the {obj}"), "keeping both feet planted")
    } else {
        (format!("grasps the {obj}"), "keeping both feet planted")
    };
    format!("{lead}, the person {verb} {}{}, {legs}.", hands_phrase(hands), direction_phrase(&dirs))
}

fn fine_sentences(summary: &TrajectorySummary, events: &[ContactEvent]) -> Vec<String> {
    let total = summary.duration_s.max(f64::EPSILON);
    let n = summary.centers.len().max(1);
    let sample_at = |t: f64| {
        summary
            .sample_frames
            .iter()
            .rposition(|&f| f as f64 / summary.fps <= t + 1e-9)
            .unwrap_or(0)
            .min(n - 1)
    };
    let mut touched = false;
    (0..3)
        .map(|p| {
            let (t0, t1) = (total * p as f64 / 3.0, total * (p + 1) as f64 / 3.0);
            let in_phase: Vec<&ContactEvent> =
                events.iter().filter(|e| e.time_s >= t0 - 1e-9 && (e.time_s < t1 || p == 2)).collect();
            let range = (sample_at(t0), sample_at(t1).max(sample_at(t0)));
            let s = phase_sentence(p, summary, &in_phase, touched, range);
            touched |= in_phase.iter().any(|e| e.hands != Hands::None);
            s
        })
        .collect()
}

/// Rule-based backend answering from the structured request context.
#[derive(Clone, Copy, Debug, Default)]
pub struct TemplateClient;

impl LanguageModelClient for TemplateClient {
    fn complete(&self, request: &LmRequest) -> Result<String> {
        Ok(match &request.context {
            LmContext::Coarse { summary } => coarse_sentence(summary),
            LmContext::Fine { summary, events, .. } => fine_sentences(summary, events).join(" "),
        })
    }
}
