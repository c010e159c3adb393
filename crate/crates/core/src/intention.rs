//! Aircraft intention from situational context.
//!
//! The joint factorizes as P(κ, A, O) = P(κ) P(A | κ) P(O | κ), and within
//! each evidence group the features are conditionally independent given κ:
//! P(A | κ) = P(motion | κ) P(beacon | κ), P(O | κ) = P(gse | κ) P(ramp | κ).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntentionError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("evidence has zero probability under every intention")]
    DegenerateEvidence,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("smoothing alpha must be finite and >= 0")]
    InvalidAlpha,
}

macro_rules! categorical {
    ($name:ident { $($variant:ident),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "SCREAMING_SNAKE_CASE")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const COUNT: usize = Self::ALL.len();

            #[inline]
            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }
        }

        impl std::str::FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                let quoted = format!("\"{}\"", s.trim().to_ascii_uppercase());
                serde_json::from_str(&quoted)
                    .map_err(|_| format!("unknown {} value '{}'", stringify!($name), s))
            }
        }
    };
}

categorical!(Intention { Proceed, Hold });
categorical!(MotionState { Stopped, Taxiing });
categorical!(Beacon { On, Off });
categorical!(GseState { Clear, Blocking });
categorical!(RampAgent {
    Absent,
    SignalingStop,
    SignalingGo
});

/// Evidence about the aircraft itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AircraftEvidence {
    pub motion_state: MotionState,
    pub beacon: Beacon,
}

/// Evidence about ground equipment and the ramp agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurroundingEvidence {
    pub gse_state: GseState,
    pub ramp_agent: RampAgent,
}

/// One labeled observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub aircraft: AircraftEvidence,
    pub surrounding: SurroundingEvidence,
    pub intention: Intention,
}

/// Every (A, O) combination, 24 in total.
pub fn all_evidence() -> Vec<(AircraftEvidence, SurroundingEvidence)> {
    let mut out = Vec::with_capacity(24);
    for &motion_state in MotionState::ALL {
        for &beacon in Beacon::ALL {
            for &gse_state in GseState::ALL {
                for &ramp_agent in RampAgent::ALL {
                    out.push((
                        AircraftEvidence { motion_state, beacon },
                        SurroundingEvidence { gse_state, ramp_agent },
                    ));
                }
            }
        }
    }
    out
}

/// Prior and conditional tables; rows are indexed by intention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentionModel {
    pub prior: [f64; 2],
    pub motion: [[f64; 2]; 2],
    pub beacon: [[f64; 2]; 2],
    pub gse: [[f64; 2]; 2],
    pub ramp: [[f64; 3]; 2],
    #[serde(default)]
    pub alpha: f64,
}

const ROW_TOL: f64 = 1e-12;

fn check_row(name: &str, row: &[f64]) -> Result<(), IntentionError> {
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(IntentionError::InvalidModel(format!(
            "{name} has a negative or non-finite entry"
        )));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(IntentionError::InvalidModel(format!("{name} sums to {s}")));
    }
    Ok(())
}

fn uniform<const N: usize>() -> [f64; N] {
    [1.0 / N as f64; N]
}

impl IntentionModel {
    /// All tables uniform.
    pub fn uniform() -> Self {
        Self {
            prior: uniform(),
            motion: [uniform(); 2],
            beacon: [uniform(); 2],
            gse: [uniform(); 2],
            ramp: [uniform(); 2],
            alpha: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), IntentionError> {
        check_row("prior", &self.prior)?;
        for k in 0..2 {
            check_row("motion", &self.motion[k])?;
            check_row("beacon", &self.beacon[k])?;
            check_row("gse", &self.gse[k])?;
            check_row("ramp", &self.ramp[k])?;
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(IntentionError::InvalidAlpha);
        }
        Ok(())
    }

    /// Fits smoothed frequency tables. An intention that never occurs (only
    /// possible with `alpha = 0`) gets uniform likelihood rows; its prior is 0.
    pub fn fit(samples: &[Sample], alpha: f64) -> Result<Self, IntentionError> {
        if samples.is_empty() {
            return Err(IntentionError::EmptyDataset);
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(IntentionError::InvalidAlpha);
        }
        let mut class = [0usize; 2];
        let mut motion = [[0usize; 2]; 2];
        let mut beacon = [[0usize; 2]; 2];
        let mut gse = [[0usize; 2]; 2];
        let mut ramp = [[0usize; 3]; 2];
        for s in samples {
            let k = s.intention.index();
            class[k] += 1;
            motion[k][s.aircraft.motion_state.index()] += 1;
            beacon[k][s.aircraft.beacon.index()] += 1;
            gse[k][s.surrounding.gse_state.index()] += 1;
            ramp[k][s.surrounding.ramp_agent.index()] += 1;
        }
        fn smooth<const N: usize>(counts: &[usize; N], total: usize, alpha: f64) -> [f64; N] {
            let denom = total as f64 + alpha * N as f64;
            if denom == 0.0 {
                return uniform();
            }
            std::array::from_fn(|i| (counts[i] as f64 + alpha) / denom)
        }
        Ok(Self {
            prior: smooth(&class, samples.len(), alpha),
            motion: std::array::from_fn(|k| smooth(&motion[k], class[k], alpha)),
            beacon: std::array::from_fn(|k| smooth(&beacon[k], class[k], alpha)),
            gse: std::array::from_fn(|k| smooth(&gse[k], class[k], alpha)),
            ramp: std::array::from_fn(|k| smooth(&ramp[k], class[k], alpha)),
            alpha,
        })
    }

    /// P(A | κ).
    pub fn aircraft_likelihood(&self, k: Intention, a: &AircraftEvidence) -> f64 {
        let i = k.index();
        self.motion[i][a.motion_state.index()] * self.beacon[i][a.beacon.index()]
    }

    /// P(O | κ).
    pub fn surrounding_likelihood(&self, k: Intention, o: &SurroundingEvidence) -> f64 {
        let i = k.index();
        self.gse[i][o.gse_state.index()] * self.ramp[i][o.ramp_agent.index()]
    }

    /// P(κ, A, O).
    pub fn joint(&self, k: Intention, a: &AircraftEvidence, o: &SurroundingEvidence) -> f64 {
        self.prior[k.index()] * self.aircraft_likelihood(k, a) * self.surrounding_likelihood(k, o)
    }

    /// P(κ | A, O), indexed by [`Intention::index`].
    pub fn posterior(&self, a: &AircraftEvidence, o: &SurroundingEvidence) -> Result<[f64; 2], IntentionError> {
        let j: [f64; 2] = std::array::from_fn(|i| self.joint(Intention::ALL[i], a, o));
        let z = j[0] + j[1];
        if !(z > 0.0) || !z.is_finite() {
            return Err(IntentionError::DegenerateEvidence);
        }
        Ok([j[0] / z, j[1] / z])
    }

    /// Posterior argmax; near-ties go to HOLD.
    pub fn classify(&self, a: &AircraftEvidence, o: &SurroundingEvidence) -> Result<Intention, IntentionError> {
        let p = self.posterior(a, o)?;
        let (proceed, hold) = (p[Intention::Proceed.index()], p[Intention::Hold.index()]);
        if proceed - hold > ROW_TOL {
            Ok(Intention::Proceed)
        } else {
            Ok(Intention::Hold)
        }
    }

    /// Draws one labeled sample from the model.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        fn draw<R: Rng + ?Sized>(rng: &mut R, row: &[f64]) -> usize {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            row.len() - 1
        }
        let k = draw(rng, &self.prior);
        Sample {
            intention: Intention::ALL[k],
            aircraft: AircraftEvidence {
                motion_state: MotionState::ALL[draw(rng, &self.motion[k])],
                beacon: Beacon::ALL[draw(rng, &self.beacon[k])],
            },
            surrounding: SurroundingEvidence {
                gse_state: GseState::ALL[draw(rng, &self.gse[k])],
                ramp_agent: RampAgent::ALL[draw(rng, &self.ramp[k])],
            },
        }
    }

    /// Largest total-variation distance between corresponding rows.
    pub fn max_table_tv(&self, o: &IntentionModel) -> f64 {
        fn tv(a: &[f64], b: &[f64]) -> f64 {
            0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
        }
        let mut m = tv(&self.prior, &o.prior);
        for k in 0..2 {
            m = m
                .max(tv(&self.motion[k], &o.motion[k]))
                .max(tv(&self.beacon[k], &o.beacon[k]))
                .max(tv(&self.gse[k], &o.gse[k]))
                .max(tv(&self.ramp[k], &o.ramp[k]));
        }
        m
    }
}

/// Posterior keyed by intention name, as written by the `intent infer` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorReport {
    pub proceed: f64,
    pub hold: f64,
    pub intention: Intention,
}

pub fn infer(
    model: &IntentionModel,
    a: &AircraftEvidence,
    o: &SurroundingEvidence,
) -> Result<PosteriorReport, IntentionError> {
    let p = model.posterior(a, o)?;
    Ok(PosteriorReport {
        proceed: p[Intention::Proceed.index()],
        hold: p[Intention::Hold.index()],
        intention: model.classify(a, o)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(m: MotionState, b: Beacon, g: GseState, r: RampAgent, k: Intention) -> Sample {
        Sample {
            aircraft: AircraftEvidence {
                motion_state: m,
                beacon: b,
            },
            surrounding: SurroundingEvidence {
                gse_state: g,
                ramp_agent: r,
            },
            intention: k,
        }
    }

    fn ten() -> Vec<Sample> {
        use Beacon::*;
        use GseState::*;
        use Intention::*;
        use MotionState::*;
        use RampAgent::*;
        vec![
            sample(Taxiing, On, Clear, SignalingGo, Proceed),
            sample(Taxiing, On, Clear, Absent, Proceed),
            sample(Stopped, On, Clear, SignalingGo, Proceed),
            sample(Taxiing, On, Blocking, SignalingGo, Proceed),
            sample(Stopped, On, Clear, Absent, Proceed),
            sample(Stopped, Off, Blocking, SignalingStop, Hold),
            sample(Stopped, Off, Blocking, Absent, Hold),
            sample(Stopped, Off, Clear, SignalingStop, Hold),
            sample(Taxiing, Off, Blocking, SignalingStop, Hold),
            sample(Stopped, Off, Blocking, SignalingStop, Hold),
        ]
    }

    #[test]
    fn balanced_prior() {
        let m = IntentionModel::fit(&ten(), 0.0).unwrap();
        assert_eq!(m.prior, [0.5, 0.5]);
        m.validate().unwrap();
    }

    #[test]
    fn zero_count_without_smoothing() {
        let m = IntentionModel::fit(&ten(), 0.0).unwrap();
        assert_eq!(m.beacon[Intention::Hold.index()][Beacon::On.index()], 0.0);
        let a = AircraftEvidence {
            motion_state: MotionState::Stopped,
            beacon: Beacon::On,
        };
        let o = SurroundingEvidence {
            gse_state: GseState::Blocking,
            ramp_agent: RampAgent::SignalingGo,
        };
        let p = m.posterior(&a, &o).unwrap();
        assert_eq!(p[Intention::Proceed.index()], 1.0);
    }

    #[test]
    fn add_one_counts() {
        let m = IntentionModel::fit(&ten(), 1.0).unwrap();
        // 5 PROCEED of 10, two intentions: (5 + 1) / (10 + 2)
        assert!((m.prior[0] - 6.0 / 12.0).abs() < 1e-15);
        // PROCEED motion: 3 taxiing, 2 stopped -> stopped (2 + 1) / (5 + 2)
        assert!((m.motion[0][MotionState::Stopped.index()] - 3.0 / 7.0).abs() < 1e-15);
        // HOLD ramp: 4 stop, 1 absent, 0 go -> go (0 + 1) / (5 + 3)
        assert!((m.ramp[1][RampAgent::SignalingGo.index()] - 1.0 / 8.0).abs() < 1e-15);
        assert!((m.ramp[1][RampAgent::SignalingStop.index()] - 5.0 / 8.0).abs() < 1e-15);
        m.validate().unwrap();
    }

    #[test]
    fn empty_dataset_rejected() {
        assert_eq!(IntentionModel::fit(&[], 1.0), Err(IntentionError::EmptyDataset));
        assert_eq!(IntentionModel::fit(&ten(), -1.0), Err(IntentionError::InvalidAlpha));
    }

    #[test]
    fn uniform_joint() {
        let m = IntentionModel::uniform();
        for (a, o) in all_evidence() {
            for &k in Intention::ALL {
                let expected = 0.5 * 0.5 * 0.5 * 0.5 * (1.0 / 3.0);
                assert!((m.joint(k, &a, &o) - expected).abs() < 1e-15);
            }
            assert_eq!(m.posterior(&a, &o).unwrap(), [0.5, 0.5]);
            assert_eq!(m.classify(&a, &o).unwrap(), Intention::Hold);
        }
    }

    #[test]
    fn degenerate_evidence() {
        let mut m = IntentionModel::uniform();
        m.beacon = [[1.0, 0.0], [1.0, 0.0]];
        let a = AircraftEvidence {
            motion_state: MotionState::Stopped,
            beacon: Beacon::Off,
        };
        let o = SurroundingEvidence {
            gse_state: GseState::Clear,
            ramp_agent: RampAgent::Absent,
        };
        assert_eq!(m.joint(Intention::Proceed, &a, &o), 0.0);
        assert_eq!(m.posterior(&a, &o), Err(IntentionError::DegenerateEvidence));
        assert_eq!(m.classify(&a, &o), Err(IntentionError::DegenerateEvidence));
    }

    #[test]
    fn clear_posterior_classifies_proceed() {
        let mut m = IntentionModel::uniform();
        m.prior = [0.9, 0.1];
        let (a, o) = all_evidence()[0];
        assert!((m.posterior(&a, &o).unwrap()[0] - 0.9).abs() < 1e-15);
        assert_eq!(m.classify(&a, &o).unwrap(), Intention::Proceed);
    }

    #[test]
    fn parses_names() {
        assert_eq!("taxiing".parse::<MotionState>().unwrap(), MotionState::Taxiing);
        assert_eq!("SIGNALING_GO".parse::<RampAgent>().unwrap(), RampAgent::SignalingGo);
        assert!("maybe".parse::<Beacon>().is_err());
    }
}
