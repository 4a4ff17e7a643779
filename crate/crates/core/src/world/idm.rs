use serde::{Deserialize, Serialize};

/// Intelligent Driver Model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams {
    /// Desired speed; callers usually override it with the lane limit.
    pub v0: f64,
    pub time_headway: f64,
    pub max_accel: f64,
    pub comfortable_decel: f64,
    pub min_gap: f64,
    pub exponent: f64,
    /// Output floor; the raw model can demand unbounded braking.
    pub max_decel: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            v0: 10.0,
            time_headway: 1.5,
            max_accel: 1.5,
            comfortable_decel: 2.0,
            min_gap: 2.0,
            exponent: 4.0,
            max_decel: 8.0,
        }
    }
}

impl IdmParams {
    pub fn with_v0(mut self, v0: f64) -> Self {
        self.v0 = v0;
        self
    }

    /// Desired dynamic gap s*.
    pub fn desired_gap(&self, v: f64, lead_speed: f64) -> f64 {
        let dv = v - lead_speed;
        let dynamic = v * self.time_headway
            + v * dv / (2.0 * (self.max_accel * self.comfortable_decel).sqrt());
        self.min_gap + dynamic.max(0.0)
    }

    /// Acceleration for speed `v` with an optional leader at bumper gap
    /// `gap` moving at `lead_speed`, clamped to `[-max_decel, max_accel]`.
    pub fn acceleration(&self, v: f64, lead: Option<(f64, f64)>) -> f64 {
        let free = if self.v0 > 0.0 {
            1.0 - (v / self.v0).powf(self.exponent)
        } else {
            -1.0
        };
        let interaction = match lead {
            None => 0.0,
            Some((gap, _)) if gap <= 1e-3 => f64::INFINITY,
            Some((gap, lead_speed)) => (self.desired_gap(v, lead_speed) / gap).powi(2),
        };
        (self.max_accel * (free - interaction)).clamp(-self.max_decel, self.max_accel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn free_road_at_desired_speed_is_zero() {
        let p = IdmParams::default().with_v0(8.0);
        assert!(p.acceleration(8.0, None).abs() < 1e-12);
        assert!((p.acceleration(0.0, None) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_following_case() {
        let p = IdmParams::default().with_v0(8.0);
        // v=8, lead 5 m/s, gap 20 m.
        let s_star = 2.0 + 8.0 * 1.5 + 8.0 * 3.0 / (2.0 * (1.5f64 * 2.0).sqrt());
        let expected = 1.5 * (1.0 - 1.0 - (s_star / 20.0).powi(2));
        assert!((p.acceleration(8.0, Some((20.0, 5.0))) - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn output_is_bounded(v in 0.0..30.0f64, gap in -5.0..200.0f64, lv in 0.0..30.0f64, v0 in 0.0..30.0f64) {
            let p = IdmParams::default().with_v0(v0);
            let a = p.acceleration(v, Some((gap, lv)));
            prop_assert!(a >= -p.max_decel && a <= p.max_accel);
            let f = p.acceleration(v, None);
            prop_assert!(f >= -p.max_decel && f <= p.max_accel);
        }
    }
}
