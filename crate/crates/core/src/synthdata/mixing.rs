use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};

/// Mixing condition: a finite target-to-interferer ratio in dB, or no
/// interferer at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Snr {
    Db(f64),
    Clean,
}

impl Snr {
    /// The six training conditions: 15, 10, 5, 0, -5 dB and clean.
    pub fn training_grid() -> Vec<Snr> {
        vec![
            Snr::Db(15.0),
            Snr::Db(10.0),
            Snr::Db(5.0),
            Snr::Db(0.0),
            Snr::Db(-5.0),
            Snr::Clean,
        ]
    }

    /// The four overlapped test conditions reported in the result tables.
    pub fn test_grid() -> Vec<Snr> {
        vec![Snr::Db(10.0), Snr::Db(5.0), Snr::Db(0.0), Snr::Db(-5.0)]
    }

    pub fn is_clean(self) -> bool {
        matches!(self, Snr::Clean)
    }

    /// Short filesystem-safe tag, e.g. `snr-5` or `clean`.
    pub fn tag(self) -> String {
        match self {
            Snr::Clean => "clean".to_string(),
            Snr::Db(db) => format!("snr{db}"),
        }
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Clean => f.write_str("clean"),
            Snr::Db(db) => write!(f, "{db}"),
        }
    }
}

impl FromStr for Snr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_end_matches("dB").trim_end_matches("db");
        if t.eq_ignore_ascii_case("clean") {
            return Ok(Snr::Clean);
        }
        t.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Snr::Db)
            .ok_or_else(|| Error::Parse(format!("bad SNR `{s}`")))
    }
}

impl From<Snr> for String {
    fn from(s: Snr) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Snr {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub target_id: String,
    pub interferer_id: String,
    pub snr: Snr,
    pub seed: u64,
}

/// A simulated two-speaker mixture. `target` carries the supervision
/// (transcript, alignment, visual stream), truncated to the mixture length.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub spec: MixtureSpec,
    pub audio: Vec<f32>,
    pub target: Utterance,
    /// Interferer after truncation and gain, i.e. `audio - target.audio`.
    pub interferer_scaled: Vec<f32>,
    pub gain: f64,
}

impl Mixture {
    pub fn simulate(spec: MixtureSpec, target: &Utterance, interferer: Option<&Utterance>) -> Result<Mixture> {
        match (spec.snr, interferer) {
            (Snr::Clean, _) => Ok(Mixture {
                audio: target.audio.clone(),
                interferer_scaled: vec![0.0; target.audio.len()],
                target: target.clone(),
                gain: 0.0,
                spec,
            }),
            (Snr::Db(_), None) => Err(Error::Config(format!(
                "mixture {} at {} dB needs an interferer",
                spec.target_id, spec.snr
            ))),
            (snr, Some(interf)) => {
                let (audio, gain) = mix_at_snr(&target.audio, &interf.audio, snr)?;
                let n = audio.len();
                let interferer_scaled = interf.audio[..n]
                    .iter()
                    .map(|&s| (gain * s as f64) as f32)
                    .collect();
                Ok(Mixture {
                    target: target.truncated(n),
                    audio,
                    interferer_scaled,
                    gain,
                    spec,
                })
            }
        }
    }
}

fn mean_power(x: &[f32]) -> f64 {
    x.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / x.len() as f64
}

/// Mixes `interferer` into `target` so that the target-to-interferer power
/// ratio over the overlapping region equals `snr`. Both signals are cut to the
/// shorter length. Returns the mixture and the interferer gain.
pub fn mix_at_snr(target: &[f32], interferer: &[f32], snr: Snr) -> Result<(Vec<f32>, f64)> {
    if target.is_empty() {
        return Err(Error::Empty("target waveform"));
    }
    let snr_db = match snr {
        Snr::Clean => return Ok((target.to_vec(), 0.0)),
        Snr::Db(db) => db,
    };
    if interferer.is_empty() {
        return Err(Error::Empty("interferer waveform"));
    }
    let n = target.len().min(interferer.len());
    let (t, i) = (&target[..n], &interferer[..n]);
    let pt = mean_power(t);
    let pi = mean_power(i);
    if pt == 0.0 {
        return Err(Error::ZeroEnergy("target"));
    }
    if pi == 0.0 {
        return Err(Error::ZeroEnergy("interferer"));
    }
    let gain = (pt / (pi * 10f64.powf(snr_db / 10.0))).sqrt();
    let mixed = t
        .iter()
        .zip(i)
        .map(|(&a, &b)| (a as f64 + gain * b as f64) as f32)
        .collect();
    Ok((mixed, gain))
}

/// `10 log10(sum t^2 / sum (g i)^2)` over the common length.
pub fn measured_snr_db(target: &[f32], interferer: &[f32], gain: f64) -> f64 {
    let n = target.len().min(interferer.len());
    let et: f64 = target[..n].iter().map(|&s| (s as f64).powi(2)).sum();
    let ei: f64 = interferer[..n]
        .iter()
        .map(|&s| (gain * s as f64).powi(2))
        .sum();
    10.0 * (et / ei).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_power_zero_db_gives_unit_gain() {
        let t = [0.5f32, -0.5, 0.5, -0.5];
        let i = [-0.5f32, 0.5, 0.5, -0.5];
        let (_, g) = mix_at_snr(&t, &i, Snr::Db(0.0)).unwrap();
        assert!((g - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_power_ten_db() {
        let t = [0.3f32, -0.3, 0.3];
        let i = [0.3f32, 0.3, -0.3];
        let (_, g) = mix_at_snr(&t, &i, Snr::Db(10.0)).unwrap();
        // 10 log10(P / (g^2 P)) = 10  =>  g = 10^-0.5
        assert!((g - 10f64.powf(-0.5)).abs() < 1e-12);
        assert!((g - 0.31623).abs() < 1e-5);
    }

    #[test]
    fn clean_returns_target() {
        let t = [0.1f32, 0.2, -0.3];
        let (m, g) = mix_at_snr(&t, &[], Snr::Clean).unwrap();
        assert_eq!(m, t.to_vec());
        assert_eq!(g, 0.0);
    }

    #[test]
    fn zero_energy_interferer_rejected() {
        assert!(matches!(
            mix_at_snr(&[0.1, 0.2], &[0.0, 0.0], Snr::Db(5.0)),
            Err(Error::ZeroEnergy("interferer"))
        ));
        assert!(mix_at_snr(&[0.0, 0.0], &[0.1, 0.1], Snr::Db(5.0)).is_err());
    }

    #[test]
    fn truncates_to_shorter() {
        let (m, _) = mix_at_snr(&[0.1; 10], &[0.2; 4], Snr::Db(0.0)).unwrap();
        assert_eq!(m.len(), 4);
        let (m, _) = mix_at_snr(&[0.1; 3], &[0.2; 9], Snr::Db(0.0)).unwrap();
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn snr_parse_and_display() {
        assert_eq!("clean".parse::<Snr>().unwrap(), Snr::Clean);
        assert_eq!("-5".parse::<Snr>().unwrap(), Snr::Db(-5.0));
        assert_eq!("10dB".parse::<Snr>().unwrap(), Snr::Db(10.0));
        assert_eq!(Snr::Db(-5.0).to_string(), "-5");
        assert_eq!(Snr::Db(15.0).to_string(), "15");
        assert!("loud".parse::<Snr>().is_err());
    }

    proptest! {
        #[test]
        fn measured_snr_matches_request(
            t in proptest::collection::vec(-1.0f32..1.0, 8..64),
            i in proptest::collection::vec(-1.0f32..1.0, 8..64),
            snr in -20.0f64..30.0,
        ) {
            prop_assume!(t.iter().any(|&x| x != 0.0) && i.iter().any(|&x| x != 0.0));
            let n = t.len().min(i.len());
            prop_assume!(t[..n].iter().any(|&x| x != 0.0) && i[..n].iter().any(|&x| x != 0.0));
            let (m, g) = mix_at_snr(&t, &i, Snr::Db(snr)).unwrap();
            prop_assert_eq!(m.len(), n);
            prop_assert!((measured_snr_db(&t, &i, g) - snr).abs() < 1e-6);
        }
    }
}
