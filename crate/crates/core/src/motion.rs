//! Scripted activity, ground-truth kinematics and head-mounted IMU synthesis.
//!
//! Heading is yaw-only. The body frame has x forward, y left, z up, and the
//! accelerometer reports specific force, so a device at rest reads
//! `(0, 0, g)`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;
use crate::rng;
use crate::world::{Scene, SegmentGrid};

pub const GRAVITY: f64 = 9.81;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureComponent {
    pub freq_hz: f64,
    /// Body-frame accelerometer amplitude per axis (m/s²).
    pub accel_amp: [f64; 3],
    /// Gyroscope amplitude per axis (rad/s).
    pub gyro_amp: [f64; 3],
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionClass {
    pub id: usize,
    pub name: String,
    /// Anchor type name the action happens at; `None` for walking.
    pub anchor_affinity: Option<String>,
    pub stationary: bool,
    pub signature: Vec<SignatureComponent>,
    /// Probability per second of a short vertical acceleration burst.
    pub burst_prob: f64,
}

fn comp(freq_hz: f64, accel_amp: [f64; 3], gyro_amp: [f64; 3], phase: f64) -> SignatureComponent {
    SignatureComponent { freq_hz, accel_amp, gyro_amp, phase }
}

/// Built-in seven-class catalog. `wash` and `stir` share a head-motion
/// pattern whose frequencies differ by less than the participant spread, so
/// only the location tells them apart.
pub fn default_actions() -> Vec<ActionClass> {
    let a = |id, name: &str, affinity: Option<&str>, signature, burst_prob| ActionClass {
        id,
        name: name.to_string(),
        anchor_affinity: affinity.map(str::to_string),
        stationary: affinity.is_some(),
        signature,
        burst_prob,
    };
    vec![
        a(
            0,
            "walk",
            None,
            vec![comp(1.8, [0.4, 0.0, 1.2], [0.0, 0.05, 0.05], 0.0), comp(0.9, [0.0, 0.3, 0.0], [0.12, 0.0, 0.1], 0.5)],
            0.0,
        ),
        a(1, "look_around", Some("open_floor"), vec![comp(0.4, [0.05, 0.05, 0.0], [0.0, 0.05, 0.6], 0.0)], 0.0),
        a(2, "eat", Some("table"), vec![comp(1.0, [0.3, 0.0, 0.2], [0.0, 0.4, 0.0], 0.0)], 0.1),
        a(3, "chop", Some("counter"), vec![comp(4.0, [0.5, 0.0, 0.4], [0.0, 0.1, 0.0], 0.0)], 0.3),
        a(4, "wash", Some("sink"), vec![comp(2.0, [0.6, 0.2, 0.1], [0.05, 0.15, 0.0], 0.0)], 0.0),
        a(5, "stir", Some("stove"), vec![comp(2.05, [0.6, 0.2, 0.1], [0.05, 0.15, 0.0], 0.0)], 0.0),
        a(6, "reach", Some("cabinet"), vec![comp(0.5, [0.2, 0.0, 0.8], [0.0, 0.5, 0.0], 0.0)], 0.1),
    ]
}

/// Extends the built-in catalog with seeded synthetic stationary classes up
/// to `n` classes, cycling through the anchor types.
pub fn procedural_actions(n: usize, anchor_types: &[String], seed: u64) -> Vec<ActionClass> {
    let mut acts = default_actions();
    let mut rng = rng::stream(seed, &[0xAC7]);
    while acts.len() < n {
        let id = acts.len();
        let affinity = anchor_types[id % anchor_types.len()].clone();
        let f = rng.random_range(0.3..8.0);
        let mut amp = || rng.random_range(0.05..0.6);
        let accel = [amp(), amp(), amp()];
        let gyro = [amp() * 0.5, amp() * 0.5, amp() * 0.5];
        acts.push(ActionClass {
            id,
            name: format!("action_{id}"),
            anchor_affinity: Some(affinity),
            stationary: true,
            signature: vec![comp(f, accel, gyro, 0.0)],
            burst_prob: 0.0,
        });
    }
    acts.truncate(n.max(1));
    acts
}

pub fn validate_actions(actions: &[ActionClass]) -> Result<()> {
    for (i, a) in actions.iter().enumerate() {
        ensure!(a.id == i, Config, "action ids must be 0..n in order, found {} at {i}", a.id);
        ensure!(
            !a.stationary || a.anchor_affinity.is_some(),
            Config,
            "stationary action {} needs an anchor affinity",
            a.name
        );
        for c in &a.signature {
            ensure!((0.3..=8.0).contains(&c.freq_hz), Config, "action {} frequency {} outside [0.3, 8] Hz", a.name, c.freq_hz);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub accel_sigma: f64,
    pub gyro_sigma: f64,
    /// Bias random-walk intensities per √s.
    pub accel_bias_walk: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_init: f64,
    pub gyro_bias_init: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            accel_sigma: 0.05,
            gyro_sigma: 0.01,
            accel_bias_walk: 0.005,
            gyro_bias_walk: 0.001,
            accel_bias_init: 0.03,
            gyro_bias_init: 0.005,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            accel_sigma: 0.0,
            gyro_sigma: 0.0,
            accel_bias_walk: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias_init: 0.0,
            gyro_bias_init: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    pub rate_hz: usize,
    pub speed_mps: f64,
    /// Relative per-walk speed variation, uniform in `1 ± speed_jitter`.
    pub speed_jitter: f64,
    pub accel_mps2: f64,
    /// Mean yaw rate of in-place turns (rad/s).
    pub turn_rate: f64,
    pub stationary_s: [f64; 2],
    pub jitter_m: f64,
    /// Relative spread of per-participant signature frequency and amplitude.
    pub participant_freq_spread: f64,
    pub participant_amp_spread: f64,
    pub burst_amp: f64,
    pub noise: NoiseConfig,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            rate_hz: 50,
            speed_mps: 0.8,
            speed_jitter: 0.2,
            accel_mps2: 0.5,
            turn_rate: PI / 2.0,
            stationary_s: [2.0, 8.0],
            jitter_m: 0.02,
            participant_freq_spread: 0.06,
            participant_amp_spread: 0.2,
            burst_amp: 1.5,
            noise: NoiseConfig::default(),
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.rate_hz >= 2, Config, "rate_hz must be at least 2");
        ensure!(self.speed_mps > 0.0 && self.speed_mps * (1.0 + self.speed_jitter) <= 1.6, Config, "walking speed must stay within (0, 1.6] m/s");
        ensure!((0.0..1.0).contains(&self.speed_jitter), Config, "speed_jitter must be in [0, 1)");
        ensure!(self.accel_mps2 > 0.0 && self.turn_rate > 0.0, Config, "accel and turn rate must be positive");
        ensure!(self.stationary_s[0] > 0.0 && self.stationary_s[0] <= self.stationary_s[1], Config, "bad stationary duration range");
        ensure!((0.0..=0.03).contains(&self.jitter_m), Config, "jitter_m must be within [0, 0.03]");
        Ok(())
    }
}

/// Per-person scaling of action signatures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub id: u64,
    pub freq_scale: f64,
    pub amp_scale: f64,
}

impl Participant {
    pub fn neutral() -> Self {
        Self { id: 0, freq_scale: 1.0, amp_scale: 1.0 }
    }

    pub fn sample(id: u64, cfg: &MotionConfig) -> Self {
        let mut rng = rng::stream(id, &[0x9A27]);
        let f = cfg.participant_freq_spread;
        let a = cfg.participant_amp_spread;
        Self {
            id,
            freq_scale: if f > 0.0 { rng.random_range(1.0 - f..1.0 + f) } else { 1.0 },
            amp_scale: if a > 0.0 { rng.random_range(1.0 - a..1.0 + a) } else { 1.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub action: usize,
    pub start_s: f64,
    pub duration_s: f64,
    /// Stationary: the anchor acted at. Walk: the destination anchor.
    pub target_anchor: Option<usize>,
    /// Optional intermediate point of a walk.
    #[serde(default)]
    pub waypoint: Option<[f64; 2]>,
    #[serde(default)]
    pub speed_mps: Option<f64>,
}

impl Episode {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionScript {
    pub episodes: Vec<Episode>,
    pub start_anchor: usize,
}

impl ActionScript {
    pub fn total_s(&self) -> f64 {
        self.episodes.last().map(Episode::end_s).unwrap_or(0.0)
    }

    pub fn episode_at(&self, t: f64) -> Option<(usize, &Episode)> {
        let i = self.episodes.partition_point(|e| e.end_s() <= t);
        self.episodes.get(i).map(|e| (i, e)).or_else(|| self.episodes.last().map(|e| (self.episodes.len() - 1, e)))
    }

    pub fn action_at(&self, t: f64) -> usize {
        self.episode_at(t).map(|(_, e)| e.action).unwrap_or(0)
    }

    /// One JSON episode per line; the first line records the start anchor.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        let head = serde_json::json!({ "start_anchor": self.start_anchor });
        writeln!(w, "{head}").map_err(|e| Error::io("script", e))?;
        for e in &self.episodes {
            writeln!(w, "{}", serde_json::to_string(e)?).map_err(|e| Error::io("script", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head: serde_json::Value = serde_json::from_str(lines.next().ok_or_else(|| Error::Data("empty script".into()))?)?;
        let start_anchor = head
            .get("start_anchor")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Data("script header lacks start_anchor".into()))? as usize;
        let episodes = lines.map(serde_json::from_str).collect::<std::result::Result<Vec<Episode>, _>>()?;
        Ok(Self { episodes, start_anchor })
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// In-place yaw change with a raised-cosine rate profile.
#[derive(Clone, Copy, Debug)]
struct Turn {
    delta: f64,
    duration: f64,
}

impl Turn {
    fn new(delta: f64, rate: f64) -> Self {
        let duration = if delta.abs() < 1e-9 { 0.0 } else { (delta.abs() / rate).max(0.3) };
        Self { delta, duration }
    }

    /// (heading offset, yaw rate) at `tau` seconds into the turn.
    fn at(&self, tau: f64) -> (f64, f64) {
        if self.duration == 0.0 {
            return (if tau >= 0.0 { self.delta } else { 0.0 }, 0.0);
        }
        let u = (tau / self.duration).clamp(0.0, 1.0);
        let rate = if (0.0..self.duration).contains(&tau) {
            self.delta * PI / (2.0 * self.duration) * (PI * u).sin()
        } else {
            0.0
        };
        (self.delta * (1.0 - (PI * u).cos()) / 2.0, rate)
    }
}

/// Straight-line travel with a trapezoidal (or triangular) speed profile.
#[derive(Clone, Copy, Debug)]
struct Travel {
    from: [f64; 2],
    dir: [f64; 2],
    length: f64,
    v_peak: f64,
    accel: f64,
    t_acc: f64,
    t_cruise: f64,
}

impl Travel {
    fn new(from: [f64; 2], to: [f64; 2], speed: f64, accel: f64) -> Self {
        let length = dist(from, to);
        let dir = if length > 0.0 { [(to[0] - from[0]) / length, (to[1] - from[1]) / length] } else { [1.0, 0.0] };
        let v_peak = speed.min((accel * length).sqrt());
        let t_acc = if v_peak > 0.0 { v_peak / accel } else { 0.0 };
        let d_acc = v_peak * v_peak / (2.0 * accel);
        let t_cruise = if v_peak > 0.0 { ((length - 2.0 * d_acc) / v_peak).max(0.0) } else { 0.0 };
        Self { from, dir, length, v_peak, accel, t_acc, t_cruise }
    }

    fn duration(&self) -> f64 {
        2.0 * self.t_acc + self.t_cruise
    }

    /// (distance, speed, signed acceleration) along the line at `tau`.
    /// Ramps use a raised-cosine acceleration whose mean is `accel`, so ramp
    /// time and ramp distance equal those of a constant-acceleration ramp.
    fn along(&self, tau: f64) -> (f64, f64, f64) {
        let tau = tau.clamp(0.0, self.duration());
        let (a, ta, tc) = (self.accel, self.t_acc, self.t_cruise);
        let ramp = |u: f64| -> (f64, f64, f64) {
            if ta == 0.0 {
                return (0.0, 0.0, 0.0);
            }
            let w = 2.0 * PI / ta;
            let s = a * (0.5 * u * u + ((w * u).cos() - 1.0) / (w * w));
            let v = a * (u - (w * u).sin() / w);
            (s, v, a * (1.0 - (w * u).cos()))
        };
        let d_acc = 0.5 * a * ta * ta;
        if tau < ta {
            ramp(tau)
        } else if tau < ta + tc {
            (d_acc + self.v_peak * (tau - ta), self.v_peak, 0.0)
        } else if tau < 2.0 * ta + tc {
            let (s, v, acc) = ramp(2.0 * ta + tc - tau);
            (self.length - s, v, -acc)
        } else {
            (self.length, 0.0, 0.0)
        }
    }

    fn heading(&self) -> f64 {
        self.dir[1].atan2(self.dir[0])
    }
}

#[derive(Clone, Copy, Debug)]
enum Phase {
    Turn { start: f64, heading0: f64, turn: Turn, at: [f64; 2] },
    Travel { start: f64, heading: f64, travel: Travel },
    Hold { start: f64, duration: f64, heading: f64, at: [f64; 2], sway_dir: [f64; 2], sway_bumps: f64 },
}

/// Piecewise motion plan shared by the script planner and the simulator.
struct Plan {
    phases: Vec<Phase>,
    end_heading: f64,
}

fn walk_phases(start_t: f64, from: [f64; 2], heading: f64, legs: &[[f64; 2]], speed: f64, cfg: &MotionConfig) -> Plan {
    let mut phases = Vec::new();
    let (mut t, mut pos, mut h) = (start_t, from, heading);
    for &to in legs {
        let travel = Travel::new(pos, to, speed, cfg.accel_mps2);
        if travel.length < 1e-9 {
            continue;
        }
        let target = h + wrap_angle(travel.heading() - h);
        let turn = Turn::new(target - h, cfg.turn_rate);
        if turn.duration > 0.0 {
            phases.push(Phase::Turn { start: t, heading0: h, turn, at: pos });
            t += turn.duration;
        }
        h = target;
        phases.push(Phase::Travel { start: t, heading: h, travel });
        t += travel.duration();
        pos = to;
    }
    Plan { phases, end_heading: h }
}

fn plan_duration(p: &Plan, start_t: f64) -> f64 {
    p.phases
        .last()
        .map(|ph| match ph {
            Phase::Turn { start, turn, .. } => start + turn.duration,
            Phase::Travel { start, travel, .. } => start + travel.duration(),
            Phase::Hold { start, duration, .. } => start + duration,
        })
        .unwrap_or(start_t)
        - start_t
}

fn eligible_anchors(scene: &Scene, actions: &[ActionClass]) -> Vec<(usize, Vec<usize>)> {
    scene
        .anchors
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let name = &scene.anchor_type(a).name;
            let acts: Vec<usize> = actions
                .iter()
                .filter(|c| c.stationary && c.anchor_affinity.as_deref() == Some(name.as_str()))
                .map(|c| c.id)
                .collect();
            (!acts.is_empty()).then_some((i, acts))
        })
        .collect()
}

/// Alternates stationary actions at anchors with walks between them.
pub fn plan_script(scene: &Scene, actions: &[ActionClass], cfg: &MotionConfig, total_s: f64, seed: u64) -> Result<ActionScript> {
    ensure!(total_s >= 10.0, Invalid, "script must last at least 10 s, got {total_s}");
    let walk = actions
        .iter()
        .find(|a| !a.stationary)
        .ok_or_else(|| Error::Invalid("action set lacks a walking class".into()))?
        .id;
    let eligible = eligible_anchors(scene, actions);
    ensure!(!eligible.is_empty(), Invalid, "no anchor matches any stationary action");
    let mut rng = rng::stream(seed, &[0x5C41]);
    let mut cur = rng.random_range(0..eligible.len());
    let start_anchor = eligible[cur].0;
    let mut pos = scene.anchors[start_anchor].center;
    let mut heading: Option<f64> = None;
    let mut t = 0.0;
    let mut episodes = Vec::new();
    while t < total_s {
        let (anchor, acts) = &eligible[cur];
        let action = acts[rng.random_range(0..acts.len())];
        let d = rng.random_range(cfg.stationary_s[0]..=cfg.stationary_s[1]);
        let d = d.min(total_s - t);
        episodes.push(Episode { action, start_s: t, duration_s: d, target_anchor: Some(*anchor), waypoint: None, speed_mps: None });
        t += d;
        if t >= total_s {
            break;
        }
        let next = if eligible.len() > 1 {
            let k = rng.random_range(0..eligible.len() - 1);
            if k >= cur {
                k + 1
            } else {
                k
            }
        } else {
            cur
        };
        let dest = scene.anchors[eligible[next].0].center;
        let waypoint = (next == cur).then(|| {
            let l = scene.extent_m;
            [rng.random_range(0.3..l - 0.3), rng.random_range(0.3..l - 0.3)]
        });
        let legs: Vec<[f64; 2]> = waypoint.into_iter().chain(std::iter::once(dest)).collect();
        let speed = cfg.speed_mps * (1.0 + cfg.speed_jitter * rng.random_range(-1.0..=1.0));
        let h0 = *heading.get_or_insert_with(|| {
            let first = legs[0];
            (first[1] - pos[1]).atan2(first[0] - pos[0])
        });
        let plan = walk_phases(t, pos, h0, &legs, speed, cfg);
        let dur = plan_duration(&plan, t).max(1e-3).min(total_s - t);
        heading = Some(plan.end_heading);
        episodes.push(Episode {
            action: walk,
            start_s: t,
            duration_s: dur,
            target_anchor: Some(eligible[next].0),
            waypoint,
            speed_mps: Some(speed),
        });
        t += dur;
        pos = dest;
        cur = next;
    }
    Ok(ActionScript { episodes, start_anchor })
}

/// Ground-truth kinematics sampled at the IMU rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub rate_hz: usize,
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    pub acc: Vec<[f64; 2]>,
    /// Unwrapped yaw (rad) and its rate.
    pub heading: Vec<f64>,
    pub yaw_rate: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.rate_hz as f64
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.rate_hz as f64
    }
}

fn build_plan(scene: &Scene, script: &ActionScript, cfg: &MotionConfig) -> Result<Vec<Phase>> {
    let mut pos = scene
        .anchors
        .get(script.start_anchor)
        .ok_or_else(|| Error::Invalid(format!("start anchor {} not in scene", script.start_anchor)))?
        .center;
    let mut heading: Option<f64> = None;
    let mut phases = Vec::new();
    for (i, e) in script.episodes.iter().enumerate() {
        match e.speed_mps {
            None => {
                let h = heading.unwrap_or_else(|| {
                    script.episodes[i..]
                        .iter()
                        .find_map(|w| w.speed_mps.map(|_| w))
                        .and_then(|w| {
                            let first = w.waypoint.or_else(|| w.target_anchor.map(|a| scene.anchors[a].center))?;
                            Some((first[1] - pos[1]).atan2(first[0] - pos[0]))
                        })
                        .unwrap_or(0.0)
                });
                heading = Some(h);
                let at = e.target_anchor.map(|a| scene.anchors[a].center).unwrap_or(pos);
                let ang = rng::derive(scene.seed, &[0x5A7, i as u64]) as f64 / u64::MAX as f64 * 2.0 * PI;
                let bumps = 1.0 + (rng::derive(scene.seed, &[0xB0B, i as u64]) % 3) as f64;
                phases.push(Phase::Hold {
                    start: e.start_s,
                    duration: e.duration_s,
                    heading: h,
                    at,
                    sway_dir: [ang.cos(), ang.sin()],
                    sway_bumps: bumps,
                });
                pos = at;
            }
            Some(speed) => {
                let dest = e
                    .target_anchor
                    .and_then(|a| scene.anchors.get(a))
                    .ok_or_else(|| Error::Invalid(format!("walk episode {i} lacks a destination")))?
                    .center;
                let legs: Vec<[f64; 2]> = e.waypoint.into_iter().chain(std::iter::once(dest)).collect();
                let h0 = heading.unwrap_or_else(|| (legs[0][1] - pos[1]).atan2(legs[0][0] - pos[0]));
                let plan = walk_phases(e.start_s, pos, h0, &legs, speed, cfg);
                heading = Some(plan.end_heading);
                phases.extend(plan.phases);
                pos = dest;
            }
        }
    }
    Ok(phases)
}

struct State {
    pos: [f64; 2],
    vel: [f64; 2],
    acc: [f64; 2],
    heading: f64,
    yaw_rate: f64,
}

fn phase_state(ph: &Phase, t: f64, jitter: f64) -> State {
    match *ph {
        Phase::Turn { start, heading0, turn, at } => {
            let (dh, rate) = turn.at(t - start);
            State { pos: at, vel: [0.0; 2], acc: [0.0; 2], heading: heading0 + dh, yaw_rate: rate }
        }
        Phase::Travel { start, heading, travel } => {
            let (s, v, a) = travel.along(t - start);
            let d = travel.dir;
            State {
                pos: [travel.from[0] + d[0] * s, travel.from[1] + d[1] * s],
                vel: [d[0] * v, d[1] * v],
                acc: [d[0] * a, d[1] * a],
                heading,
                yaw_rate: 0.0,
            }
        }
        Phase::Hold { start, duration, heading, at, sway_dir, sway_bumps } => {
            // sway = J·u², u = (1 − cos ωτ)/2: zero position, velocity and
            // acceleration at both ends
            let tau = (t - start).clamp(0.0, duration);
            let w = 2.0 * PI * sway_bumps / duration;
            let (c, sn) = ((w * tau).cos(), (w * tau).sin());
            let (u, du, ddu) = ((1.0 - c) / 2.0, w * sn / 2.0, w * w * c / 2.0);
            let s = jitter * u * u;
            let v = 2.0 * jitter * u * du;
            let a = 2.0 * jitter * (du * du + u * ddu);
            State {
                pos: [at[0] + sway_dir[0] * s, at[1] + sway_dir[1] * s],
                vel: [sway_dir[0] * v, sway_dir[1] * v],
                acc: [sway_dir[0] * a, sway_dir[1] * a],
                heading,
                yaw_rate: 0.0,
            }
        }
    }
}

fn phase_start(ph: &Phase) -> f64 {
    match ph {
        Phase::Turn { start, .. } | Phase::Travel { start, .. } | Phase::Hold { start, .. } => *start,
    }
}

/// Samples the scripted motion at the configured IMU rate.
pub fn simulate_trajectory(scene: &Scene, script: &ActionScript, cfg: &MotionConfig) -> Result<Trajectory> {
    let phases = build_plan(scene, script, cfg)?;
    ensure!(!phases.is_empty(), Invalid, "script has no episodes");
    let n = (script.total_s() * cfg.rate_hz as f64 + 1e-9).floor() as usize;
    let mut traj = Trajectory {
        rate_hz: cfg.rate_hz,
        pos: Vec::with_capacity(n),
        vel: Vec::with_capacity(n),
        acc: Vec::with_capacity(n),
        heading: Vec::with_capacity(n),
        yaw_rate: Vec::with_capacity(n),
    };
    let mut pi = 0;
    for k in 0..n {
        let t = k as f64 / cfg.rate_hz as f64;
        while pi + 1 < phases.len() && phase_start(&phases[pi + 1]) <= t {
            pi += 1;
        }
        let st = phase_state(&phases[pi], t, cfg.jitter_m);
        let l = scene.extent_m;
        traj.pos.push([st.pos[0].clamp(0.0, l), st.pos[1].clamp(0.0, l)]);
        traj.vel.push(st.vel);
        traj.acc.push(st.acc);
        traj.heading.push(st.heading);
        traj.yaw_rate.push(st.yaw_rate);
    }
    Ok(traj)
}

/// Raw 6-axis samples `(ax, ay, az, wx, wy, wz)` in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuStream {
    pub rate_hz: usize,
    pub samples: Vec<[f32; 6]>,
}

impl ImuStream {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz as f64
    }

    /// Little-endian: u32 rate, u64 sample count, then 6 f32 per sample.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&(self.rate_hz as u32).to_le_bytes())?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        for s in &self.samples {
            for v in s {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> std::io::Result<Self> {
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        r.read_exact(&mut b8)?;
        let rate_hz = u32::from_le_bytes(b4) as usize;
        let n = u64::from_le_bytes(b8) as usize;
        let mut buf = vec![0u8; n * 24];
        r.read_exact(&mut buf)?;
        let samples = buf
            .chunks_exact(24)
            .map(|c| {
                let mut s = [0f32; 6];
                for (i, v) in s.iter_mut().enumerate() {
                    *v = f32::from_le_bytes([c[4 * i], c[4 * i + 1], c[4 * i + 2], c[4 * i + 3]]);
                }
                s
            })
            .collect();
        Ok(Self { rate_hz, samples })
    }
}

/// Per-episode signature draw: phase offset and amplitude jitter.
struct EpisodeSignature<'a> {
    class: &'a ActionClass,
    start: f64,
    phase: f64,
    amp: f64,
    bursts: Vec<f64>,
}

fn signature_value(sig: &EpisodeSignature, t: f64, p: &Participant, burst_amp: f64) -> ([f64; 3], [f64; 3]) {
    let mut a = [0.0; 3];
    let mut w = [0.0; 3];
    for c in &sig.class.signature {
        let arg = 2.0 * PI * c.freq_hz * p.freq_scale * t + c.phase + sig.phase;
        let s = arg.sin();
        let scale = sig.amp * p.amp_scale;
        for i in 0..3 {
            a[i] += scale * c.accel_amp[i] * s;
            w[i] += scale * c.gyro_amp[i] * s;
        }
    }
    for &b in &sig.bursts {
        let u = (t - b) / 0.3;
        if (0.0..1.0).contains(&u) {
            a[2] += burst_amp * 0.5 * (1.0 - (2.0 * PI * u).cos());
        }
    }
    let _ = sig.start;
    (a, w)
}

/// Synthesizes accelerometer and gyroscope readings along `traj`.
pub fn synthesize_imu(
    traj: &Trajectory,
    script: &ActionScript,
    actions: &[ActionClass],
    participant: &Participant,
    cfg: &MotionConfig,
    seed: u64,
) -> Result<ImuStream> {
    let noise = &cfg.noise;
    let mut sig_rng = rng::stream(seed, &[0x516]);
    let mut noise_rng = rng::stream(seed, &[0x401]);
    let mut bias_rng = rng::stream(seed, &[0xB1A5]);
    let sigs: Vec<EpisodeSignature> = script
        .episodes
        .iter()
        .map(|e| {
            let class = actions
                .get(e.action)
                .ok_or_else(|| Error::Invalid(format!("unknown action {}", e.action)))?;
            let phase = sig_rng.random_range(0.0..2.0 * PI);
            let amp = sig_rng.random_range(0.9..1.1);
            let mut bursts = Vec::new();
            let secs = e.duration_s.ceil() as usize;
            for s in 0..secs {
                if class.burst_prob > 0.0 && sig_rng.random_bool(class.burst_prob.min(1.0)) {
                    bursts.push(e.start_s + s as f64 + sig_rng.random_range(0.0..0.7));
                }
            }
            Ok(EpisodeSignature { class, start: e.start_s, phase, amp, bursts })
        })
        .collect::<Result<_>>()?;

    let dt = 1.0 / traj.rate_hz as f64;
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng, s: f64| -> f64 {
        if s == 0.0 {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        }
    };
    let mut ba = [0.0; 3];
    let mut bw = [0.0; 3];
    for i in 0..3 {
        ba[i] = gauss(&mut bias_rng, noise.accel_bias_init);
        bw[i] = gauss(&mut bias_rng, noise.gyro_bias_init);
    }
    let mut samples = Vec::with_capacity(traj.len());
    let mut ep = 0;
    for k in 0..traj.len() {
        let t = traj.time(k);
        while ep + 1 < script.episodes.len() && script.episodes[ep + 1].start_s <= t {
            ep += 1;
        }
        let (sa, sw) = if sigs.is_empty() { ([0.0; 3], [0.0; 3]) } else { signature_value(&sigs[ep], t, participant, cfg.burst_amp) };
        let (c, s) = (traj.heading[k].cos(), traj.heading[k].sin());
        let [ax, ay] = traj.acc[k];
        let body = [c * ax + s * ay, -s * ax + c * ay, GRAVITY];
        let gyro = [0.0, 0.0, traj.yaw_rate[k]];
        let mut out = [0f32; 6];
        for i in 0..3 {
            out[i] = (body[i] + sa[i] + ba[i] + gauss(&mut noise_rng, noise.accel_sigma)) as f32;
            out[3 + i] = (gyro[i] + sw[i] + bw[i] + gauss(&mut noise_rng, noise.gyro_sigma)) as f32;
        }
        samples.push(out);
        for i in 0..3 {
            ba[i] += gauss(&mut bias_rng, noise.accel_bias_walk * dt.sqrt());
            bw[i] += gauss(&mut bias_rng, noise.gyro_bias_walk * dt.sqrt());
        }
    }
    Ok(ImuStream { rate_hz: traj.rate_hz, samples })
}

/// One second of IMU samples, `rate × 6`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuWindow {
    pub rows: Vec<[f32; 6]>,
}

impl ImuWindow {
    pub fn rate(&self) -> usize {
        self.rows.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.rows.iter().flat_map(|r| r.iter().map(|&v| v as f64)).collect();
        Tensor::new(vec![self.rows.len(), 6], data).expect("rows × 6")
    }
}

/// Splits a stream into whole non-overlapping seconds; the trailing partial
/// second is dropped.
pub fn window_imu(stream: &ImuStream) -> Result<Vec<ImuWindow>> {
    let r = stream.rate_hz;
    ensure!(r > 0 && stream.samples.len() >= r, Invalid, "stream shorter than one second");
    Ok(stream.samples.chunks_exact(r).map(|c| ImuWindow { rows: c.to_vec() }).collect())
}

/// Ground truth for one second of a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondLabel {
    pub t: usize,
    pub segment: usize,
    pub action: usize,
    /// Mean position over the second.
    pub position: [f64; 2],
    /// Heading at the start of the second.
    pub heading: f64,
}

pub fn ground_truth_labels(traj: &Trajectory, script: &ActionScript, grid: &SegmentGrid) -> Vec<SecondLabel> {
    let r = traj.rate_hz;
    (0..traj.len() / r)
        .map(|t| {
            let span = &traj.pos[t * r..(t + 1) * r];
            let n = span.len() as f64;
            let mean = [span.iter().map(|p| p[0]).sum::<f64>() / n, span.iter().map(|p| p[1]).sum::<f64>() / n];
            SecondLabel {
                t,
                segment: grid.segment_of(mean),
                action: script.action_at(t as f64 + 0.5),
                position: mean,
                heading: traj.heading[t * r],
            }
        })
        .collect()
}

/// CSV with header `t,segment,action,x,y,heading`.
pub fn write_labels_csv(labels: &[SecondLabel], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "t,segment,action,x,y,heading")?;
    for l in labels {
        writeln!(w, "{},{},{},{},{},{}", l.t, l.segment, l.action, l.position[0], l.position[1], l.heading)?;
    }
    Ok(())
}

pub fn read_labels_csv(text: &str) -> Result<Vec<SecondLabel>> {
    let bad = |i: usize| Error::Data(format!("malformed label row {i}"));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i));
            }
            let num = |k: usize| f[k].trim().parse::<f64>().map_err(|_| bad(i));
            let int = |k: usize| f[k].trim().parse::<usize>().map_err(|_| bad(i));
            Ok(SecondLabel { t: int(0)?, segment: int(1)?, action: int(2)?, position: [num(3)?, num(4)?], heading: num(5)? })
        })
        .collect()
}
