use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::LossMask;

/// The six training recipes compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Schedule {
    CopyNmt,
    Ts,
    Cp,
    TsPlusCp,
    TsThenCp,
    CpThenTs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub mask: LossMask,
    pub epochs: usize,
}

pub const ML_ONLY: LossMask = LossMask { ml: true, cp: false, ts: false };
const ML_TS: LossMask = LossMask { ml: true, cp: false, ts: true };
const ML_CP: LossMask = LossMask { ml: true, cp: true, ts: false };
const ALL: LossMask = LossMask { ml: true, cp: true, ts: true };

impl Schedule {
    pub const ALL: [Schedule; 6] = [
        Schedule::CopyNmt,
        Schedule::Ts,
        Schedule::Cp,
        Schedule::TsPlusCp,
        Schedule::TsThenCp,
        Schedule::CpThenTs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Schedule::CopyNmt => "CopyNMT",
            Schedule::Ts => "TS",
            Schedule::Cp => "CP",
            Schedule::TsPlusCp => "TS+CP",
            Schedule::TsThenCp => "TS->CP",
            Schedule::CpThenTs => "CP->TS",
        }
    }

    /// Filesystem-safe lowercase name.
    pub fn slug(self) -> &'static str {
        match self {
            Schedule::CopyNmt => "copynmt",
            Schedule::Ts => "ts",
            Schedule::Cp => "cp",
            Schedule::TsPlusCp => "ts+cp",
            Schedule::TsThenCp => "ts-cp",
            Schedule::CpThenTs => "cp-ts",
        }
    }

    /// Loss masks after the cross-entropy warm-up, in order.
    fn reward_masks(self) -> &'static [LossMask] {
        match self {
            Schedule::CopyNmt => &[],
            Schedule::Ts => &[ML_TS],
            Schedule::Cp => &[ML_CP],
            Schedule::TsPlusCp => &[ALL],
            Schedule::TsThenCp => &[ML_TS, ML_CP],
            Schedule::CpThenTs => &[ML_CP, ML_TS],
        }
    }

    pub fn phases(self, warmup_epochs: usize, reward_epochs: usize) -> Vec<Phase> {
        std::iter::once(Phase { mask: ML_ONLY, epochs: warmup_epochs })
            .chain(self.reward_masks().iter().map(|&mask| Phase { mask, epochs: reward_epochs }))
            .collect()
    }

    pub fn uses_classifier(self) -> bool {
        self.reward_masks().iter().any(|m| m.ts)
    }
}

/// Phase list with the standard 10 warm-up and 5 reward epochs.
pub fn schedule_phases(name: &str) -> Result<Vec<Phase>> {
    Ok(name.parse::<Schedule>()?.phases(10, 5))
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('→', "->");
        Schedule::ALL
            .into_iter()
            .find(|k| norm == k.name().to_ascii_lowercase() || norm == k.slug())
            .ok_or_else(|| {
                let names: Vec<&str> = Schedule::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown schedule {s:?}, expected one of {names:?}"))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansions() {
        assert_eq!(schedule_phases("CopyNMT").unwrap(), [Phase { mask: ML_ONLY, epochs: 10 }]);
        assert_eq!(
            schedule_phases("TS→CP").unwrap(),
            [
                Phase { mask: ML_ONLY, epochs: 10 },
                Phase { mask: ML_TS, epochs: 5 },
                Phase { mask: ML_CP, epochs: 5 },
            ]
        );
        assert_eq!(
            schedule_phases("ts+cp").unwrap(),
            [Phase { mask: ML_ONLY, epochs: 10 }, Phase { mask: ALL, epochs: 5 }]
        );
        assert!(matches!(schedule_phases("XYZ"), Err(Error::Config(_))));
    }

    #[test]
    fn names_round_trip() {
        for s in Schedule::ALL {
            assert_eq!(s.name().parse::<Schedule>().unwrap(), s);
            assert_eq!(s.slug().parse::<Schedule>().unwrap(), s);
        }
        assert!(!Schedule::Cp.uses_classifier());
        assert!(Schedule::CpThenTs.uses_classifier());
    }
}
