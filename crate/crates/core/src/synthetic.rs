//! Synthetic scenes for smoke tests and directional checks.
//!
//! Each scene occupies its own frame range so that a whole dataset can be
//! written to one trajectory file and windowed with
//! [`build_windows`](crate::data::build_windows).

use std::f64::consts::TAU;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{AgentTrack, Point, Unit};

/// Frame spacing between consecutive samples.
pub const FRAME_STEP: i64 = 10;
const SCENE_FRAMES: i64 = 10_000;

fn track(agent_id: String, scene: usize, first_step: usize, points: &[Point]) -> AgentTrack {
    let base = scene as i64 * SCENE_FRAMES;
    AgentTrack {
        agent_id,
        samples: points
            .iter()
            .enumerate()
            .map(|(i, &p)| (base + (first_step + i) as i64 * FRAME_STEP, p))
            .collect(),
        unit: Unit::Meters,
    }
}

fn line(start: Point, step: Point, n: usize) -> Vec<Point> {
    (0..n)
        .map(|k| [start[0] + k as f64 * step[0], start[1] + k as f64 * step[1]])
        .collect()
}

/// Scenes with one target in uniform straight-line motion over `t_h + t_f`
/// steps and one standing bystander during the observation window.
pub fn linear_scenes(
    n: usize,
    t_h: usize,
    t_f: usize,
    step_seconds: f64,
    seed: u64,
) -> Vec<AgentTrack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracks = Vec::with_capacity(2 * n);
    for scene in 0..n {
        let speed = rng.gen_range(0.5..1.5);
        let heading = rng.gen_range(0.0..TAU);
        let origin = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
        let step = [
            speed * step_seconds * heading.cos(),
            speed * step_seconds * heading.sin(),
        ];
        tracks.push(track(
            format!("s{scene}-target"),
            scene,
            0,
            &line(origin, step, t_h + t_f),
        ));

        let r = rng.gen_range(1.0..4.0);
        let a = rng.gen_range(0.0..TAU);
        let spot = [origin[0] + r * a.cos(), origin[1] + r * a.sin()];
        tracks.push(track(
            format!("s{scene}-bystander"),
            scene,
            0,
            &vec![spot; t_h],
        ));
    }
    tracks
}

/// Scenes where a neighbor converges on the target from ahead-left or
/// ahead-right and the target's future bends away from that side. The
/// observed part of the target's path is straight, so the side is only
/// recoverable from the neighbor.
pub fn avoidance_scenes(
    n: usize,
    t_h: usize,
    t_f: usize,
    step_seconds: f64,
    seed: u64,
) -> Vec<AgentTrack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracks = Vec::with_capacity(2 * n);
    for scene in 0..n {
        let speed = rng.gen_range(0.8..1.2);
        let dx = speed * step_seconds;
        let origin = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let side: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let swerve = rng.gen_range(0.8..1.6);

        let target: Vec<Point> = (0..t_h + t_f)
            .map(|k| {
                let x = origin[0] + k as f64 * dx;
                let y = if k < t_h {
                    origin[1]
                } else {
                    let s = (k + 1 - t_h) as f64 / t_f as f64;
                    origin[1] - side * swerve * s * s
                };
                [x, y]
            })
            .collect();
        tracks.push(track(format!("s{scene}-target"), scene, 0, &target));

        // Neighbor ends ahead of the target on `side`, heading for its path.
        let last = target[t_h - 1];
        let ahead = rng.gen_range(1.0..3.0);
        let lateral = rng.gen_range(1.0..2.5);
        let end = [last[0] + ahead, last[1] + side * lateral];
        let goal = [last[0] + ahead + 2.0, last[1]];
        let dir = [goal[0] - end[0], goal[1] - end[1]];
        let norm = dir[0].hypot(dir[1]);
        let nspeed = rng.gen_range(0.8..1.4) * step_seconds;
        let step = [dir[0] / norm * nspeed, dir[1] / norm * nspeed];
        let start = [
            end[0] - (t_h - 1) as f64 * step[0],
            end[1] - (t_h - 1) as f64 * step[1],
        ];
        tracks.push(track(
            format!("s{scene}-neighbor"),
            scene,
            0,
            &line(start, step, t_h),
        ));
    }
    tracks
}

/// Serializes tracks as `frame agent_id x y` lines ordered by frame.
pub fn to_text(tracks: &[AgentTrack]) -> String {
    let mut rows: Vec<(i64, usize, &str, Point)> = tracks
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            t.samples
                .iter()
                .map(move |&(f, p)| (f, i, t.agent_id.as_str(), p))
        })
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut out = String::from("# frame agent_id x y\n");
    for (frame, _, agent, p) in rows {
        writeln!(out, "{frame} {agent} {:?} {:?}", p[0], p[1]).expect("string write");
    }
    out
}
