//! The closed failure taxonomy: eight modes, their reasoning templates and
//! latent frame signatures.

use std::sync::OnceLock;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::rng;

pub const FRAME_DIM: usize = 16;
pub const EP_LEN: usize = 12;
pub const NUM_MODES: usize = 8;

const SIGNATURE_SEED: u64 = 0xA4_0B_51_6E;

pub const SUCCESS_TEMPLATE: &[&str] = &["the", "robot", "succeeded", "at", "the", "task"];

/// Filler prefixes placed before failure templates.
pub const PREFIXES: [&[&str]; 2] = [&["i", "observe"], &["i", "see"]];

const MODE_TABLE: [(&str, &[&str]); NUM_MODES] = [
    ("gripper_not_closed", &["the", "robot", "did", "not", "close", "its", "gripper"]),
    ("offset_y", &["the", "gripper", "moved", "with", "an", "offset", "along", "y"]),
    ("dropped_midway", &["the", "robot", "dropped", "the", "item", "midway"]),
    ("wrong_bin", &["the", "robot", "placed", "the", "item", "in", "the", "wrong", "bin"]),
    ("item_damaged", &["the", "item", "was", "damaged", "during", "transport"]),
    ("collision", &["the", "robot", "collided", "with", "the", "bin"]),
    ("no_grasp", &["the", "robot", "did", "not", "grasp", "the", "item"]),
    ("spillage", &["the", "item", "spilled", "its", "contents"]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct FailureMode {
    pub id: usize,
    pub name: &'static str,
    pub template: &'static [&'static str],
    /// Unit-norm direction added to late frames of failing episodes.
    pub signature: Vec<f64>,
}

/// What a reasoning string describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failure(usize),
}

fn orthonormal_signatures() -> Vec<Vec<f64>> {
    let mut r = rng::stream(SIGNATURE_SEED, &[]);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(NUM_MODES);
    while basis.len() < NUM_MODES {
        let mut v: Vec<f64> = (0..FRAME_DIM).map(|_| r.sample(StandardNormal)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

pub fn failure_modes() -> &'static [FailureMode] {
    static MODES: OnceLock<Vec<FailureMode>> = OnceLock::new();
    MODES.get_or_init(|| {
        orthonormal_signatures()
            .into_iter()
            .zip(MODE_TABLE)
            .enumerate()
            .map(|(id, (signature, (name, template)))| FailureMode {
                id,
                name,
                template,
                signature,
            })
            .collect()
    })
}

pub fn template(outcome: Outcome) -> &'static [&'static str] {
    match outcome {
        Outcome::Success => SUCCESS_TEMPLATE,
        Outcome::Failure(m) => MODE_TABLE[m].1,
    }
}

/// Renders the reference reasoning for an outcome. Failure templates get one
/// of the filler prefixes chosen by `rng`; success is a fixed sentence.
pub fn render_reasoning(outcome: Outcome, rng: &mut rng::Rng) -> Vec<String> {
    let mut out = Vec::new();
    if let Outcome::Failure(_) = outcome {
        let prefix = PREFIXES[rng.random_range(0..PREFIXES.len())];
        out.extend(prefix.iter().map(|s| s.to_string()));
    }
    out.extend(template(outcome).iter().map(|s| s.to_string()));
    out
}
