//! Fixed-length observation vector read off a scene.
//!
//! Layout (index: meaning):
//!
//! | index  | content                                                        |
//! |--------|----------------------------------------------------------------|
//! | 0      | ego speed                                                      |
//! | 1      | lateral offset from the ego lane centerline (left +)           |
//! | 2      | heading error against the ego lane                             |
//! | 3..9   | (bumper gap, lead speed − ego speed) for left, own, right lane |
//! | 9..25  | four nearest agents: ego-frame (x, y, vx, vy) relative to ego  |
//! | 25..28 | navigation one-hot: keep lane, go left, go right               |
//! | 28     | distance to goal                                               |
//! | 29, 30 | left lane exists, right lane exists                            |
//! | 31     | bumper gap to the nearest vehicle behind in the navigation lane |
//!
//! Distances are clipped to [0, 100] m; missing leads and empty agent slots
//! read as a 100 m gap with zero relative motion.

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Wire};
use crate::error::{Error, Result};
use crate::expert::{gaps_in_lane, step_toward};
use crate::world::{normalize_angle, Scene};

pub const FEATURE_DIM: usize = 32;
pub const SENTINEL_GAP: f64 = 100.0;
pub const AGENT_SLOTS: usize = 4;

/// Per-feature divisors bringing every input to roughly unit scale.
pub const FEATURE_SCALE: [f64; FEATURE_DIM] = {
    let mut s = [1.0; FEATURE_DIM];
    s[0] = 5.0;
    s[1] = 2.0;
    s[2] = 0.3;
    let mut i = 0;
    while i < 3 {
        s[3 + 2 * i] = 25.0;
        s[4 + 2 * i] = 5.0;
        i += 1;
    }
    let mut k = 0;
    while k < AGENT_SLOTS {
        s[9 + 4 * k] = 25.0;
        s[10 + 4 * k] = 10.0;
        s[11 + 4 * k] = 5.0;
        s[12 + 4 * k] = 5.0;
        k += 1;
    }
    s[28] = 50.0;
    s[31] = 25.0;
    s
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NavCommand {
    KeepLane,
    ChangeLeft,
    ChangeRight,
}

impl NavCommand {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFeatures {
    pub values: [f64; FEATURE_DIM],
    pub nav: NavCommand,
}

fn clip_dist(d: f64) -> f64 {
    d.clamp(0.0, SENTINEL_GAP)
}

pub fn featurize(scene: &Scene) -> Result<ObservationFeatures> {
    let (lane, pr) = scene
        .ego_lane()
        .map_err(|_| Error::Featurization("ego is off every lane".into()))?;
    let ego = &scene.ego;
    let v = ego.speed;
    let mut f = [0.0; FEATURE_DIM];
    f[0] = v;
    f[1] = pr.lateral;
    f[2] = normalize_angle(ego.pose.yaw - pr.heading);

    let lanes = [lane.left, Some(lane.id), lane.right];
    for (i, id) in lanes.iter().enumerate() {
        let lead = id.and_then(|id| scene.lane(id)).and_then(|l| gaps_in_lane(scene, l).0);
        let (gap, rel) = match lead {
            Some((g, s)) if g < SENTINEL_GAP => (clip_dist(g), s - v),
            _ => (SENTINEL_GAP, 0.0),
        };
        f[3 + 2 * i] = gap;
        f[4 + 2 * i] = rel;
    }

    let ev = ego.velocity();
    let mut near: Vec<(f64, [f64; 4])> = scene
        .agents
        .iter()
        .map(|a| {
            let local = ego.pose.to_local(a.state.pose.position());
            let av = a.state.velocity();
            let rv = ego.pose.rotate_to_local([av[0] - ev[0], av[1] - ev[1]]);
            (local[0].hypot(local[1]), [local[0], local[1], rv[0], rv[1]])
        })
        .filter(|(d, _)| *d <= SENTINEL_GAP)
        .collect();
    // Total order independent of the agents' storage order.
    near.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1[0].total_cmp(&b.1[0]))
            .then(a.1[1].total_cmp(&b.1[1]))
    });
    for k in 0..AGENT_SLOTS {
        let slot = near.get(k).map_or([SENTINEL_GAP, 0.0, 0.0, 0.0], |(_, s)| *s);
        f[9 + 4 * k..13 + 4 * k].copy_from_slice(&slot);
    }

    let target = scene.route.lanes.last().copied().unwrap_or(lane.id);
    let step = if target == lane.id { None } else { step_toward(scene, lane, target) };
    let nav = match step {
        None => NavCommand::KeepLane,
        Some((_, true)) => NavCommand::ChangeLeft,
        Some((_, false)) => NavCommand::ChangeRight,
    };
    f[25 + nav.index()] = 1.0;
    f[28] = clip_dist(crate::world::geometry::dist(ego.pose.position(), scene.route.goal));
    f[29] = f64::from(u8::from(lane.left.is_some()));
    f[30] = f64::from(u8::from(lane.right.is_some()));
    let nav_lane = step.map_or(lane.id, |(id, _)| id);
    f[31] = scene
        .lane(nav_lane)
        .and_then(|l| gaps_in_lane(scene, l).1)
        .map_or(SENTINEL_GAP, |(g, _)| clip_dist(g));

    if f.iter().any(|x| !x.is_finite()) {
        return Err(Error::Featurization("non-finite feature".into()));
    }
    Ok(ObservationFeatures { values: f, nav })
}

impl ObservationFeatures {
    /// Inputs as the network sees them.
    pub fn scaled(&self) -> [f64; FEATURE_DIM] {
        let mut x = self.values;
        for (v, s) in x.iter_mut().zip(FEATURE_SCALE) {
            *v /= s;
        }
        x
    }
}

impl Wire for NavCommand {
    fn encode(&self, out: &mut Vec<u8>) {
        (self.index() as u8).encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        match u8::decode(r)? {
            0 => Ok(NavCommand::KeepLane),
            1 => Ok(NavCommand::ChangeLeft),
            2 => Ok(NavCommand::ChangeRight),
            t => Err(r.error(format!("unknown navigation command {t}"))),
        }
    }
}

impl Wire for ObservationFeatures {
    fn encode(&self, out: &mut Vec<u8>) {
        self.values.encode(out);
        self.nav.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(ObservationFeatures {
            values: <[f64; FEATURE_DIM]>::decode(r)?,
            nav: NavCommand::decode(r)?,
        })
    }
}
