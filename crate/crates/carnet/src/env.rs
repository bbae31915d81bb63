//! Procedural lane-keeping environment: a kinematic vehicle on a piecewise-
//! constant-curvature road, a perspective grayscale renderer, a scripted
//! autopilot, and the scalar reward.
//!
//! Everything is deterministic given the reset seed: road layout and start
//! state come from a dedicated RNG stream, and rendering is a pure function of
//! the vehicle state, so repeated runs are byte-identical.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::{rng_stream, stream};

pub const DT: f64 = 0.1;
pub const LANE_HALF_WIDTH: f64 = 1.75;
pub const STEER_GAIN: f64 = 2.5;
/// Desired speed: 30 km/h.
pub const S_DES_KMH: f64 = 30.0;
pub const MPS_TO_KMH: f64 = 3.6;
pub const S_DES_MPS: f64 = S_DES_KMH / MPS_TO_KMH;
pub const MAX_EPISODE_STEPS: usize = 1000;

pub const STEER_BINS: [f64; 3] = [-0.2, 0.0, 0.2];
pub const ACCEL_BINS: [f64; 3] = [-3.0, 0.0, 3.0];

/// One of the nine discrete (steer, accel) commands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub steer: f64,
    pub accel: f64,
}

impl Action {
    pub fn from_class(c: usize) -> Action {
        assert!(c < 9, "action class {c} out of range");
        Action {
            steer: STEER_BINS[c / 3],
            accel: ACCEL_BINS[c % 3],
        }
    }

    pub fn class(&self) -> usize {
        3 * nearest_bin(self.steer, &STEER_BINS) + nearest_bin(self.accel, &ACCEL_BINS)
    }

    pub const COAST: Action = Action {
        steer: 0.0,
        accel: 0.0,
    };
}

fn nearest_bin(v: f64, bins: &[f64; 3]) -> usize {
    let mut best = 0;
    let mut dist = (v - bins[0]).abs();
    for (i, &b) in bins.iter().enumerate().skip(1) {
        let d = (v - b).abs();
        if d < dist {
            dist = d;
            best = i;
        }
    }
    best
}

/// Map continuous commands to the 9-way class: nearest bin per axis,
/// class = 3·steer_idx + accel_idx (both axes ascending).
pub fn discretize_action(steer: f64, accel: f64) -> usize {
    3 * nearest_bin(steer, &STEER_BINS) + nearest_bin(accel, &ACCEL_BINS)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EnvState {
    /// Signed meters from lane center.
    pub lateral_offset: f64,
    /// Radians between vehicle heading and lane direction.
    pub heading_error: f64,
    /// Current road curvature (1/m).
    pub curvature: f64,
    /// Speed along the vehicle heading, m/s, ≥ 0.
    pub speed: f64,
    /// Meters traveled along the lane.
    pub odometer: f64,
    pub collided: bool,
    pub out_of_lane: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Events {
    pub collision: bool,
    pub out_of_lane: bool,
}

/// Coefficients of the scalar reward (kept immutable per experiment).
#[derive(Debug, Clone, Copy)]
pub struct RewardConfig {
    pub w_collision: f64,
    pub w_fast: f64,
    pub w_out: f64,
    pub w_steer_sq: f64,
    pub w_lat: f64,
    pub bias: f64,
    pub s_des_kmh: f64,
    /// Flip the sign of the lateral-acceleration term (off by default; the
    /// printed form rewards it).
    pub negate_lat: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            w_collision: 200.0,
            w_fast: 10.0,
            w_out: 40.0,
            w_steer_sq: 5.0,
            w_lat: 0.2,
            bias: -0.1,
            s_des_kmh: S_DES_KMH,
            negate_lat: false,
        }
    }
}

/// r = 200·r_coll + v_lon + 10·(S/S_des)·r_fast + 40·r_out − 5α² + 0.2·r_lat − 0.1
/// with r_coll, r_fast, r_out ∈ {−1, 0}, v_lon the speed projected on the lane,
/// and r_lat = α·v². The speed ratio is computed in km/h so the ×3.6 and the
/// division stay exact for round test speeds.
pub fn reward(state: &EnvState, action: &Action, events: &Events, cfg: &RewardConfig) -> f64 {
    let r_coll = if events.collision { -1.0 } else { 0.0 };
    let r_out = if events.out_of_lane { -1.0 } else { 0.0 };
    let speed_ratio = state.speed * MPS_TO_KMH / cfg.s_des_kmh;
    let r_fast = if speed_ratio > 1.0 { -1.0 } else { 0.0 };
    let v_lon = state.speed * state.heading_error.cos();
    let alpha = action.steer;
    let r_lat = {
        let raw = alpha * state.speed * state.speed;
        if cfg.negate_lat {
            -raw
        } else {
            raw
        }
    };
    cfg.w_collision * r_coll
        + v_lon
        + cfg.w_fast * speed_ratio * r_fast
        + cfg.w_out * r_out
        - cfg.w_steer_sq * alpha * alpha
        + cfg.w_lat * r_lat
        + cfg.bias
}

struct Segment {
    start: f64,
    len: f64,
    kappa: f64,
    /// Absolute odometer position of a lane-blocking obstacle, if any.
    obstacle: Option<f64>,
}

/// Lazily generated road: piecewise-constant curvature segments with rare
/// lane-blocking obstacles.
pub struct Road {
    segs: Vec<Segment>,
    rng: ChaCha8Rng,
}

const OBSTACLE_P: f64 = 0.05;
const OBSTACLE_RADIUS: f64 = 1.5;
pub const MAX_CURVATURE: f64 = 0.05;

impl Road {
    fn new(mut rng: ChaCha8Rng) -> Road {
        // straight opening segment, no obstacle, so every episode starts sane
        let segs = vec![Segment {
            start: 0.0,
            len: 30.0,
            kappa: 0.0,
            obstacle: None,
        }];
        let _ = rng.gen::<u64>(); // decouple from the start-state draws
        Road { segs, rng }
    }

    fn ensure(&mut self, s: f64) {
        while {
            let last = self.segs.last().unwrap();
            last.start + last.len <= s
        } {
            let last = self.segs.last().unwrap();
            let start = last.start + last.len;
            let len = self.rng.gen_range(20.0..40.0);
            let kappa = self.rng.gen_range(-MAX_CURVATURE..MAX_CURVATURE);
            let obstacle = if self.rng.gen_bool(OBSTACLE_P) {
                Some(start + len / 2.0)
            } else {
                None
            };
            self.segs.push(Segment {
                start,
                len,
                kappa,
                obstacle,
            });
        }
    }

    pub fn curvature_at(&mut self, s: f64) -> f64 {
        self.ensure(s);
        self.segs
            .iter()
            .rev()
            .find(|seg| seg.start <= s)
            .map(|seg| seg.kappa)
            .unwrap_or(0.0)
    }

    pub fn obstacle_near(&mut self, s: f64) -> bool {
        self.ensure(s + OBSTACLE_RADIUS);
        self.segs
            .iter()
            .any(|seg| matches!(seg.obstacle, Some(o) if (o - s).abs() < OBSTACLE_RADIUS))
    }
}

/// Rolling resistance (m/s²): makes the expert alternate throttle and coast
/// instead of coasting forever once at speed.
pub const DRAG: f64 = 0.8;

/// One kinematic step. Mutates the state, returns the fresh events.
pub fn step(state: &mut EnvState, road: &mut Road, action: &Action, dt: f64) -> Events {
    let drag = if state.speed > 0.0 { DRAG } else { 0.0 };
    state.speed = (state.speed + (action.accel - drag) * dt).max(0.0);
    state.curvature = road.curvature_at(state.odometer);
    state.heading_error += (STEER_GAIN * action.steer - state.curvature * state.speed) * dt;
    state.lateral_offset += state.speed * state.heading_error.sin() * dt;
    state.odometer += state.speed * dt;

    let mut ev = Events::default();
    if state.lateral_offset.abs() > LANE_HALF_WIDTH && !state.out_of_lane {
        ev.out_of_lane = true;
        state.out_of_lane = true;
    }
    if road.obstacle_near(state.odometer) && !state.collided {
        ev.collision = true;
        state.collided = true;
    }
    ev
}

pub const AUTOPILOT_KP: f64 = 0.6;
pub const AUTOPILOT_KD: f64 = 1.2;

/// Scripted expert: proportional steer on offset and heading, bang-bang speed
/// hold around the desired speed. With drag, the hold settles into a
/// throttle/coast duty cycle rather than coasting indefinitely.
pub fn autopilot(state: &EnvState) -> Action {
    let target = -AUTOPILOT_KP * state.lateral_offset - AUTOPILOT_KD * state.heading_error;
    let steer = STEER_BINS[nearest_bin(target, &STEER_BINS)];
    let accel = if state.speed < 0.98 * S_DES_MPS {
        3.0
    } else if state.speed > 1.04 * S_DES_MPS {
        -3.0
    } else {
        0.0
    };
    Action { steer, accel }
}

/// Speed levels (fractions of the desired speed) shown by the rendered
/// thermometer speedometer; 0.98 and 1.04 are the autopilot's thresholds.
pub const SPEED_LEVELS: [f64; 4] = [0.90, 0.98, 1.04, 1.10];

pub const FRAME_SIZE: usize = 64;
const FOCAL: f64 = 64.0;
const CAM_HEIGHT: f64 = 1.2;
const HORIZON_ROW: usize = 20;
const DASH_PERIOD: f64 = 4.0;

/// Render the vehicle-centric forward view as an 8-bit grayscale frame.
///
/// Ground-plane perspective: each row below the horizon maps to a depth
/// `s = f·h_cam/(row − horizon)`; the lane centerline appears at lateral
/// offset `−d − ψ·s + κ·s²/2` in the vehicle frame. A centered speed bar in
/// the top rows makes the current speed visible in a single frame, and the
/// dashed centerline is phase-locked to the odometer so speed is also visible
/// across frames. The whole image is odd-symmetric in (d, ψ, κ).
pub fn render(state: &EnvState) -> Vec<u8> {
    let n = FRAME_SIZE;
    let mut img = vec![0u8; n * n];
    for row in 0..n {
        for col in 0..n {
            let v = if row <= HORIZON_ROW {
                // sky gradient
                0.15 + 0.15 * (HORIZON_ROW - row) as f64 / HORIZON_ROW as f64
            } else {
                let depth = FOCAL * CAM_HEIGHT / (row - HORIZON_ROW) as f64;
                let x_center = -state.lateral_offset - state.heading_error * depth
                    + 0.5 * state.curvature * depth * depth;
                // pixel's lateral position on the ground plane
                let x_px = (col as f64 + 0.5 - n as f64 / 2.0) * depth / FOCAL;
                let half = LANE_HALF_WIDTH;
                let d_center = (x_px - x_center).abs();
                let d_left = (x_px - (x_center - half)).abs();
                let d_right = (x_px - (x_center + half)).abs();
                // line half-width grows with depth so lines stay ≥ 1 px
                let lw = (0.08 * depth / 2.0).max(0.06);
                if d_left < lw || d_right < lw {
                    0.9
                } else if d_center < lw {
                    let phase = (state.odometer + depth).rem_euclid(DASH_PERIOD);
                    if phase < DASH_PERIOD / 2.0 {
                        1.0
                    } else {
                        0.45
                    }
                } else if d_center < half {
                    0.45
                } else {
                    0.12
                }
            };
            img[row * n + col] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    // thermometer speedometer: block pairs grow outward from the center, one
    // pair per speed level, bracketing the hold band so each throttle/brake
    // threshold is a whole 2×(8×12)-pixel block at full contrast — coarse
    // structure that survives aggressive downsampling
    let ratio = state.speed / S_DES_MPS;
    for (i, &level) in SPEED_LEVELS.iter().enumerate() {
        let val = if ratio > level { 255 } else { 0 };
        for row in 0..12 {
            for k in 0..8 {
                img[row * n + (n / 2 + i * 8 + k)] = val;
                img[row * n + (n / 2 - 1 - i * 8 - k)] = val;
            }
        }
    }
    img
}

/// What one environment step hands back to the agent.
pub struct StepResult {
    pub frame: Vec<u8>,
    /// (steer, throttle, brake) of the action just applied, normalized.
    pub sensors: [f64; 3],
    pub reward: f64,
    pub done: bool,
    pub events: Events,
}

/// Episodic wrapper owning the state, the road, and the step/reward plumbing.
pub struct Env {
    pub state: EnvState,
    pub road: Road,
    pub reward_cfg: RewardConfig,
    pub steps: usize,
    pub max_steps: usize,
    out_reward_given: bool,
}

/// Normalized (steer, throttle, brake) representation of an action.
pub fn action_sensors(a: &Action) -> [f64; 3] {
    [
        a.steer / STEER_BINS[2],
        a.accel.max(0.0) / ACCEL_BINS[2],
        (-a.accel).max(0.0) / ACCEL_BINS[2],
    ]
}

impl Env {
    pub fn reset(seed: u64) -> Env {
        let mut rng = rng_stream(seed, stream::ENV);
        let state = EnvState {
            lateral_offset: rng.gen_range(-0.8..0.8),
            heading_error: rng.gen_range(-0.1..0.1),
            curvature: 0.0,
            speed: S_DES_MPS * rng.gen_range(0.5..1.25),
            odometer: 0.0,
            collided: false,
            out_of_lane: false,
        };
        let road = Road::new(rng);
        Env {
            state,
            road,
            reward_cfg: RewardConfig::default(),
            steps: 0,
            max_steps: MAX_EPISODE_STEPS,
            out_reward_given: false,
        }
    }

    pub fn observe(&self) -> Vec<u8> {
        render(&self.state)
    }

    pub fn step(&mut self, action: Action) -> StepResult {
        let mut events = step(&mut self.state, &mut self.road, &action, DT);
        if events.out_of_lane {
            if self.out_reward_given {
                events.out_of_lane = false;
            } else {
                self.out_reward_given = true;
            }
        }
        let r = reward(&self.state, &action, &events, &self.reward_cfg);
        self.steps += 1;
        let done = self.state.collided || self.state.out_of_lane || self.steps >= self.max_steps;
        StepResult {
            frame: render(&self.state),
            sensors: action_sensors(&action),
            reward: r,
            done,
            events,
        }
    }
}
