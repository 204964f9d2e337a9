use std::fmt::Write;

use super::{ContactEvent, Hands, TrajectorySummary};
use crate::error::{CoreError, Result};
use crate::geometry::Point;

pub const ACTION_LIST: [&str; 25] = [
    "face", "flip", "grab", "grasp", "hold", "kick", "lift", "move", "pick", "place", "push", "pull", "put",
    "release", "rotate", "set", "slide", "swing", "tilt", "turn", "sit", "bend", "shake", "wave", "drag",
];

const EXPERT: &str = "You are an expert on the interaction between 3D human motion and object.";
const COORDINATES: &str = "Coordinate System: \nThe coordinate system of the 3D scene includes x, y, and z-axes. \
The person moves on the XOZ plane, and the positive y-axis represents height.";

const RULES: &str = "[Start of Rule]\n\
Divide the total movement into three step.\n\
Inference how their arms and legs move.\n\
Inference the hand-object interaction direction, chosen from:\"left\", \"right\", \"top\", \"bottom\",\"left-top\", \"left-bottom\", \"right-top\", and \"right-bottom\".\n\
Make sure each sentence includes key action.\n\
[End of Rule]";

const EXAMPLE: &str = "[Start of Example]\n\
A person lifts the white chair, rotates the white chair, and puts down the white chair.\n\
The fine-grained result:\n\
First, the person faces the back of the white chair, grasps it with both hands from the left-bottom and right-bottom sides, bending slightly at the knees as both arms lift the chair off the ground.\n\
Next, maintaining grip, the person rotates the white chair with both hands,lifting the chair slightly higher.\n\
Finally, the person puts down the white chair, with the right arm pushing from the right-top and the left arm steadying from the left-top, as both legs move forward to reposition.\n\
[End of Example]";

fn vec3(p: &[f64; 3]) -> String {
    format!("[{:.2}, {:.2}, {:.2}]", p[0], p[1], p[2])
}

fn action_list() -> String {
    let quoted: Vec<String> = ACTION_LIST.iter().map(|a| format!("'{a}'")).collect();
    format!("[{}]", quoted.join(", "))
}

fn check_category(summary: &TrajectorySummary) -> Result<()> {
    if summary.category.trim().is_empty() {
        return Err(CoreError::InvalidArgument("object category must not be empty".into()));
    }
    Ok(())
}

fn object_block(summary: &TrajectorySummary) -> String {
    let c = &summary.category;
    format!(
        "Target Object and category:\nThe category of the object is {c}. The size of the {c} is {}.",
        vec3(&summary.size)
    )
}

pub fn build_coarse_prompt(summary: &TrajectorySummary) -> Result<String> {
    check_category(summary)?;
    let centers: Vec<String> = summary.centers.iter().map(vec3).collect();
    let mut p = String::new();
    writeln!(
        p,
        "Instructions: {EXPERT} A person will interact with a object, give me a sentence that how the person \
         will interact with this object based on following information."
    )
    .unwrap();
    writeln!(p, "[start of Given Information]").unwrap();
    writeln!(p, "{COORDINATES}").unwrap();
    writeln!(p, "{}", object_block(summary)).unwrap();
    writeln!(p, "The interaction with this object will last approximately {:.2} seconds.", summary.duration_s).unwrap();
    writeln!(p, "The object center: {}.", centers.join(", ")).unwrap();
    writeln!(p, "Possible actions list: ACTION_LIST = {}", action_list()).unwrap();
    write!(p, "[End of Given Information]").unwrap();
    Ok(p)
}

fn contact_phrase(hands: Hands) -> &'static str {
    match hands {
        Hands::None => "no hand contact",
        Hands::Left => "single contact hand(left)",
        Hands::Right => "single contact hand(right)",
        Hands::Both => "both hand in contact",
    }
}

pub fn build_fine_prompt(coarse: &str, summary: &TrajectorySummary, events: &[ContactEvent]) -> Result<String> {
    check_category(summary)?;
    if coarse.trim().is_empty() {
        return Err(CoreError::InvalidArgument("coarse instruction must not be empty".into()));
    }
    let mut p = String::new();
    writeln!(p, "Instructions: {}", coarse.trim()).unwrap();
    writeln!(
        p,
        "{EXPERT} Given the instruction, give me a sentence that how the person will interact with this object \
         in detailed, including the arm and leg movement in each 3s, make each sentence just include key action."
    )
    .unwrap();
    writeln!(p, "[start of Given Information]").unwrap();
    writeln!(p, "{COORDINATES}").unwrap();
    writeln!(p, "{}", object_block(summary)).unwrap();
    writeln!(p, "The object center with hand contact information in total {:.2} seconds", summary.duration_s).unwrap();
    for e in events {
        let pos: &Point = &e.position;
        writeln!(
            p,
            "At {:.2}s, object center is {}, {} at position {}.",
            e.time_s,
            vec3(&e.object_center),
            contact_phrase(e.hands),
            vec3(pos)
        )
        .unwrap();
    }
    writeln!(p, "[End of Given Information]").unwrap();
    writeln!(p).unwrap();
    writeln!(p, "{RULES}").unwrap();
    writeln!(p).unwrap();
    write!(p, "{EXAMPLE}").unwrap();
    Ok(p)
}
