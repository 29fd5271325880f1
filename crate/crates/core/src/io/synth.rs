//! Procedural locomotion clips with templated prompts: walks along sine
//! paths, figure eights through the origin and jumps.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mseq::{write_meta, write_mseq, ClipMeta};
use crate::error::{Error, Result};
use crate::motion::{
    global_to_relative, rotate_y, BlockKind, FeatureLayout, MotionSequence, RootConvention, RootIntegration, SkeletonSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    SineWalk,
    FigureEight,
    Jump,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [SynthKind::SineWalk, SynthKind::FigureEight, SynthKind::Jump];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "sine-walk" | "sine" => Ok(Self::SineWalk),
            "figure-eight" | "figure8" => Ok(Self::FigureEight),
            "jump" => Ok(Self::Jump),
            other => Err(Error::Invalid(format!("unknown clip kind `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SineWalk => "sine-walk",
            Self::FigureEight => "figure-eight",
            Self::Jump => "jump",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clips: usize,
    pub seed: u64,
    pub fps: f32,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Kinds are assigned round-robin.
    pub kinds: Vec<SynthKind>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clips: 600,
            seed: 0,
            fps: 20.0,
            min_frames: 48,
            max_frames: 64,
            kinds: SynthKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    /// World units, relative root.
    pub motion: MotionSequence<f32>,
    pub prompt: String,
    pub kind: SynthKind,
}

/// Root path and body pose of one frame.
#[derive(Debug, Clone, Copy, Default)]
struct Pose {
    x: f64,
    z: f64,
    heading: f64,
    lift: f64,
    left_hip: f64,
    right_hip: f64,
    left_knee: f64,
    right_knee: f64,
    crouch: f64,
}

fn rot_x(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// Joint rotations relative to the parent for a pose.
fn local_rotations(skel: &SkeletonSpec, pose: &Pose) -> Result<Vec<[[f64; 3]; 3]>> {
    let mut rots = vec![rot_x(0.0); skel.joint_count()];
    let set = |rots: &mut Vec<_>, name: &str, angle: f64| -> Result<()> {
        rots[skel.joint_id(name)?] = rot_x(angle);
        Ok(())
    };
    set(&mut rots, "left_hip", -pose.left_hip - pose.crouch)?;
    set(&mut rots, "right_hip", -pose.right_hip - pose.crouch)?;
    set(&mut rots, "left_knee", pose.left_knee + 2.0 * pose.crouch)?;
    set(&mut rots, "right_knee", pose.right_knee + 2.0 * pose.crouch)?;
    set(&mut rots, "left_ankle", pose.left_hip - pose.left_knee - pose.crouch)?;
    set(&mut rots, "right_ankle", pose.right_hip - pose.right_knee - pose.crouch)?;
    set(&mut rots, "spine1", 0.3 * pose.crouch)?;
    set(&mut rots, "left_shoulder", 0.8 * pose.right_hip)?;
    set(&mut rots, "right_shoulder", 0.8 * pose.left_hip)?;
    set(&mut rots, "left_elbow", -0.3)?;
    set(&mut rots, "right_elbow", -0.3)?;
    Ok(rots)
}

/// Forward kinematics in the facing frame with the pelvis at the origin.
fn body_positions(skel: &SkeletonSpec, rots: &[[[f64; 3]; 3]]) -> Vec<[f64; 3]> {
    let j = skel.joint_count();
    let mut global = vec![rot_x(0.0); j];
    let mut pos = vec![[0.0; 3]; j];
    for k in 0..j {
        if let Some(p) = skel.parents[k] {
            let off = apply(&global[p], skel.rest_offsets[k]);
            pos[k] = [pos[p][0] + off[0], pos[p][1] + off[1], pos[p][2] + off[2]];
            global[k] = matmul(&global[p], &rots[k]);
        } else {
            global[k] = rots[k];
        }
    }
    pos
}

const THIGH: f64 = 0.38;
const SHIN: f64 = 0.40;
const LEG: f64 = THIGH + SHIN;
/// Peak ankle clearance of a swinging foot, meters.
const CLEARANCE: f64 = 0.15;

/// Hip swing and knee flexion that put the ankle at `forward` in front of
/// and `down` below the hip.
fn leg_ik(forward: f64, down: f64) -> (f64, f64) {
    let d = forward.hypot(down).min(LEG - 1e-9);
    let cos_knee = ((d * d - THIGH * THIGH - SHIN * SHIN) / (2.0 * THIGH * SHIN)).clamp(-1.0, 1.0);
    let knee = cos_knee.acos();
    let along = forward.atan2(down);
    let offset = (SHIN * knee.sin()).atan2(THIGH + SHIN * knee.cos());
    (along + offset, knee)
}

/// Planted gait: over the first half of a cycle a foot is on the ground with
/// a straight leg and moves backward in the body frame exactly as fast as
/// the root advances; over the second half it swings forward, leaving and
/// reaching the ground at zero world velocity.
fn gait(pose: &mut Pose, distance: f64, stride: f64) {
    let cycle = (distance / stride).rem_euclid(1.0);
    let reach = stride / 4.0;
    let stance_z = |c: f64| reach - c * stride;
    let swing_z = |u: f64| -reach + 2.0 * reach * u - 2.0 * reach / PI * (TAU * u).sin();
    let (stance_c, swing_u) = if cycle < 0.5 { (cycle, cycle * 2.0) } else { (cycle - 0.5, (cycle - 0.5) * 2.0) };
    let z_st = stance_z(stance_c);
    let down = (LEG * LEG - z_st * z_st).sqrt();
    let stance = ((z_st / LEG).clamp(-1.0, 1.0).asin(), 0.0);
    let lift = CLEARANCE * (PI * swing_u).sin().max(0.0).sqrt();
    let swing = leg_ik(swing_z(swing_u), down - lift);
    let (left, right) = if cycle < 0.5 { (stance, swing) } else { (swing, stance) };
    (pose.left_hip, pose.left_knee) = left;
    (pose.right_hip, pose.right_knee) = right;
}

fn heading_of(dx: f64, dz: f64) -> f64 {
    dx.atan2(dz)
}

fn speed_word(speed: f64) -> &'static str {
    if speed < 1.0 {
        "slowly"
    } else if speed > 1.3 {
        "quickly"
    } else {
        "steadily"
    }
}

fn poses(kind: SynthKind, frames: usize, fps: f64, rng: &mut impl Rng) -> (Vec<Pose>, String) {
    let dt = 1.0 / fps;
    let mut out = vec![Pose::default(); frames];
    match kind {
        SynthKind::SineWalk => {
            let speed = rng.random_range(0.8..1.6);
            let dir = rng.random_range(-PI..PI);
            let amp = rng.random_range(0.15..0.4);
            let wavelength = rng.random_range(3.0..5.0);
            let offset = rng.random_range(0.0..TAU);
            let start = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let (d, n) = ((dir.sin(), dir.cos()), (dir.cos(), -dir.sin()));
            let mut distance = 0.0;
            let mut prev: Option<(f64, f64)> = None;
            for (i, p) in out.iter_mut().enumerate() {
                let s = speed * i as f64 * dt;
                let arg = TAU * s / wavelength + offset;
                let lateral = amp * arg.sin();
                let slope = amp * TAU / wavelength * arg.cos();
                p.x = start.0 + s * d.0 + lateral * n.0;
                p.z = start.1 + s * d.1 + lateral * n.1;
                p.heading = heading_of(d.0 + slope * n.0, d.1 + slope * n.1);
                if let Some((px, pz)) = prev {
                    distance += ((p.x - px).powi(2) + (p.z - pz).powi(2)).sqrt();
                }
                prev = Some((p.x, p.z));
                gait(p, distance, 1.3);
            }
            let prompt = match rng.random_range(0..3) {
                0 => format!("a person walks {} along a sine path", speed_word(speed)),
                1 => format!("someone walks {} in a wavy line", speed_word(speed)),
                _ => "a figure walking in a sine path".to_string(),
            };
            (out, prompt)
        }
        SynthKind::FigureEight => {
            let size = rng.random_range(1.5..2.5);
            let speed = rng.random_range(0.8..1.6);
            let mut phi = rng.random_range(0.0..TAU);
            let spin = rng.random_range(-PI..PI);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut distance = 0.0;
            for (i, p) in out.iter_mut().enumerate() {
                let (lx, lz) = (size * phi.sin(), size * phi.sin() * phi.cos());
                let (tx, tz) = (size * phi.cos(), size * (2.0 * phi).cos());
                let (wx, wz) = rotate_y(spin, lx, lz);
                let (vx, vz) = rotate_y(spin, sign * tx, sign * tz);
                if i > 0 {
                    distance += speed * dt;
                }
                p.x = wx;
                p.z = wz;
                p.heading = heading_of(vx, vz);
                gait(p, distance, 1.2);
                phi += sign * speed * dt / tx.hypot(tz);
            }
            let prompt = match rng.random_range(0..2) {
                0 => "a person walks in a figure eight".to_string(),
                _ => format!("someone traces a figure eight {}", speed_word(speed)),
            };
            (out, prompt)
        }
        SynthKind::Jump => {
            let forward = rng.random_bool(0.5);
            let heading = rng.random_range(-PI..PI);
            let takeoff = rng.random_range(0.6..1.2);
            let air = rng.random_range(0.4..0.6);
            let apex = rng.random_range(0.2..0.5);
            let drift = if forward { rng.random_range(0.8..1.5) } else { 0.0 };
            let start = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let mut travelled = 0.0;
            for (i, p) in out.iter_mut().enumerate() {
                let t = i as f64 * dt;
                let prep = ((t - (takeoff - 0.4)) / 0.4).clamp(0.0, 1.0);
                let land = ((t - takeoff - air) / 0.3).clamp(0.0, 1.0);
                p.crouch = 0.5 * (PI * prep).sin().max(0.0) * (1.0 - land) + 0.5 * (PI * land).sin() * land.min(1.0);
                if t > takeoff && t < takeoff + air {
                    let u = (t - takeoff) / air;
                    p.lift = 4.0 * apex * u * (1.0 - u);
                    p.crouch = 0.0;
                    travelled += drift * dt;
                }
                p.heading = heading;
                p.x = start.0 + travelled * heading.sin();
                p.z = start.1 + travelled * heading.cos();
            }
            let prompt = match (forward, rng.random_range(0..2)) {
                (true, 0) => "a person jumps forward".to_string(),
                (true, _) => "someone leaps forward".to_string(),
                (false, 0) => "a person jumps in place".to_string(),
                (false, _) => "someone jumps straight up".to_string(),
            };
            (out, prompt)
        }
    }
}

/// Builds global-root features for a pose track.
fn features(skel: &SkeletonSpec, layout: &FeatureLayout, track: &[Pose]) -> Result<Array2<f64>> {
    for kind in [BlockKind::LocalPositions, BlockKind::LocalRotations, BlockKind::Velocities, BlockKind::FootContacts] {
        layout.require(kind)?;
    }
    let n = track.len();
    let j = skel.joint_count();
    let mut data = Array2::zeros((n, layout.width()));
    let mut world = vec![vec![[0.0; 3]; j]; n];
    let contact_joints = skel.foot_joints();
    for (i, pose) in track.iter().enumerate() {
        let rots = local_rotations(skel, pose)?;
        let body = body_positions(skel, &rots);
        let drop = contact_joints.iter().map(|&c| -body[c][1]).fold(f64::MIN, f64::max);
        let height = drop + pose.lift;
        data[[i, 0]] = pose.heading;
        data[[i, 1]] = pose.x;
        data[[i, 2]] = pose.z;
        data[[i, 3]] = height;
        for k in 0..j {
            let (wx, wz) = rotate_y(pose.heading, body[k][0], body[k][2]);
            world[i][k] = [pose.x + wx, height + body[k][1], pose.z + wz];
            if let Some(cols) = layout.local_position_columns(k) {
                for (c, v) in cols.zip(body[k]) {
                    data[[i, c]] = v;
                }
            }
            if let Some(cols) = layout.local_rotation_columns(k) {
                let r = rots[k];
                let six = [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]];
                for (c, v) in cols.zip(six) {
                    data[[i, c]] = v;
                }
            }
        }
        for &c in contact_joints {
            let col = layout.contact_column(c).expect("contact block present");
            data[[i, col]] = if world[i][c][1] < 0.05 { 1.0 } else { 0.0 };
        }
    }
    for i in 0..n {
        let (a, b) = if i + 1 < n { (i, i + 1) } else { (i.saturating_sub(1), i) };
        for k in 0..j {
            let d = [0, 1, 2].map(|e| world[b][k][e] - world[a][k][e]);
            let (lx, lz) = rotate_y(-track[i].heading, d[0], d[2]);
            let cols = layout.velocity_columns(k).expect("velocity block present");
            for (c, v) in cols.zip([lx, d[1], lz]) {
                data[[i, c]] = v;
            }
        }
    }
    Ok(data)
}

/// One clip of `frames` frames, stored with a relative root.
pub fn synth_clip(
    kind: SynthKind,
    skel: &SkeletonSpec,
    layout: &FeatureLayout,
    frames: usize,
    fps: f32,
    rng: &mut impl Rng,
) -> Result<SynthClip> {
    if frames < 2 {
        return Err(Error::Invalid("clips need at least two frames".into()));
    }
    let (track, prompt) = poses(kind, frames, fps as f64, rng);
    let global = MotionSequence::from_frames(features(skel, layout, &track)?, fps, RootConvention::GlobalRoot)?;
    let relative = global_to_relative(&global, RootIntegration::Rotated)?;
    Ok(SynthClip {
        motion: relative.cast(),
        prompt,
        kind,
    })
}

pub fn synth_corpus(config: &SynthConfig, skel: &SkeletonSpec, layout: &FeatureLayout) -> Result<Vec<SynthClip>> {
    if config.kinds.is_empty() || config.min_frames < 2 || config.min_frames > config.max_frames {
        return Err(Error::Invalid("need at least one kind and 2 <= min_frames <= max_frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.clips)
        .map(|i| {
            let frames = rng.random_range(config.min_frames..=config.max_frames);
            synth_clip(config.kinds[i % config.kinds.len()], skel, layout, frames, config.fps, &mut rng)
        })
        .collect()
}

/// Writes `clip_00000.mseq` and its sidecar for every clip.
pub fn write_corpus(dir: &Path, clips: &[SynthClip], skel: &SkeletonSpec) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (i, clip) in clips.iter().enumerate() {
        let path = dir.join(format!("clip_{i:05}.mseq"));
        write_mseq(&path, &clip.motion)?;
        write_meta(
            &path,
            &ClipMeta {
                prompt: Some(clip.prompt.clone()),
                skeleton: skel.name.clone(),
            },
        )?;
    }
    Ok(())
}
