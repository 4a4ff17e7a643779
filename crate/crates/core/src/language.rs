//! Closed vocabularies for the language half of an action.

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Wire};
use crate::error::{Error, Result};

macro_rules! vocabulary {
    ($(#[$m:meta])* $name:ident { $($variant:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name { $($variant),* }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),*];
            pub const COUNT: usize = Self::ALL.len();

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => stringify!($variant)),* }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

vocabulary! {
    /// High-level driving intent. `EmergencyStop` only appears in enhanced labels.
    MetaAction {
        Follow,
        Decelerate,
        Stop,
        Accelerate,
        LaneChangeLeft,
        LaneChangeRight,
        Wait,
        Start,
        EmergencyStop,
    }
}

vocabulary! {
    /// Why the meta-action was chosen. `CollisionRisk` and
    /// `LeadVehicleClosing` only appear in enhanced labels.
    Reason {
        ClearRoad,
        LeadVehicle,
        Obstacle,
        CrossTraffic,
        GapAvailable,
        NoGap,
        RouteTurn,
        CollisionRisk,
        LeadVehicleClosing,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LanguageAction {
    pub meta: MetaAction,
    pub reason: Reason,
}

impl LanguageAction {
    pub fn new(meta: MetaAction, reason: Reason) -> Self {
        LanguageAction { meta, reason }
    }

    pub fn from_indices(meta: usize, reason: usize) -> Result<Self> {
        match (MetaAction::from_index(meta), Reason::from_index(reason)) {
            (Some(meta), Some(reason)) => Ok(LanguageAction { meta, reason }),
            _ => Err(Error::InvalidInput(format!(
                "language ids ({meta}, {reason}) outside vocabulary"
            ))),
        }
    }
}

impl std::fmt::Display for LanguageAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.meta, self.reason)
    }
}

impl Wire for LanguageAction {
    fn encode(&self, out: &mut Vec<u8>) {
        (self.meta.index() as u8).encode(out);
        (self.reason.index() as u8).encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let at = r.offset();
        let m = u8::decode(r)? as usize;
        let s = u8::decode(r)? as usize;
        LanguageAction::from_indices(m, s).map_err(|_| Error::Parse {
            offset: at,
            message: format!("language ids ({m}, {s}) outside vocabulary"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_round_trip() {
        for (i, m) in MetaAction::ALL.iter().enumerate() {
            assert_eq!(m.index(), i);
            assert_eq!(MetaAction::from_index(i), Some(*m));
        }
        assert_eq!(MetaAction::COUNT, 9);
        assert_eq!(Reason::COUNT, 9);
        assert!(LanguageAction::from_indices(9, 0).is_err());
    }
}
