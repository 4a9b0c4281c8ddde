//! Synthetic check-in corpora with planted mobility profiles.
//!
//! A profile is a daily routine of stages. Each stage lists alternative
//! `(category, bin)` stops with their probabilities, and a day visits one
//! stop per stage in order, so every day has the same number of movements
//! and the expected distribution of each user's movements is known exactly.

use std::io::{self, Read, Write};

use chrono::{Duration, FixedOffset, NaiveDate, TimeZone};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::eval::{jensen_distance, EvalError};
use crate::ingest::{CheckinRecord, DEFAULT_CLASSES, TIME_BINS};

pub const START_DATE: (i32, u32, u32) = (2012, 4, 12);
/// Local offset of generated timestamps, in seconds east of UTC.
pub const OFFSET_SECONDS: i32 = 9 * 3600;
const CENTER: (f64, f64) = (35.6812, 139.7671);

/// A raw category name per class that the default category table maps back
/// to that class.
pub const RAW_NAMES: [&str; 10] = [
    "Home (private)",
    "University",
    "Restaurant",
    "Train Station",
    "Hospital",
    "Office",
    "Salon / Barbershop",
    "Government Building",
    "Park",
    "Other",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("profile {profile}: {reason}")]
    Profile { profile: usize, reason: String },
    #[error("invalid request: {0}")]
    Request(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("labels line {line}: {reason}")]
    Labels { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stop {
    pub probability: f64,
    pub category: usize,
    pub bin: usize,
}

const fn stop(probability: f64, category: usize, bin: usize) -> Stop {
    Stop {
        probability,
        category,
        bin,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MobilityProfile {
    pub id: usize,
    pub name: String,
    pub categories: usize,
    pub bins: usize,
    pub stages: Vec<Vec<Stop>>,
}

/// One transition of a profile with its share of all movements.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelEntry {
    pub origin: usize,
    pub destination: usize,
    pub departure_bin: usize,
    pub duration_bins: usize,
    pub probability: f64,
}

impl MobilityProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |reason: String| SynthError::Profile {
            profile: self.id,
            reason,
        };
        if self.stages.len() < 2 {
            return Err(bad("needs at least two stages".into()));
        }
        let mut prev_max: Option<usize> = None;
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.is_empty() {
                return Err(bad(format!("stage {i} is empty")));
            }
            let total: f64 = stage.iter().map(|s| s.probability).sum();
            if stage.iter().any(|s| !(s.probability > 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(bad(format!(
                    "stage {i} probabilities must be positive and sum to 1"
                )));
            }
            if let Some(s) = stage
                .iter()
                .find(|s| s.category >= self.categories || s.bin >= self.bins)
            {
                return Err(bad(format!(
                    "stage {i} stop {:?} outside the category or bin range",
                    s
                )));
            }
            let lo = stage.iter().map(|s| s.bin).min().unwrap_or(0);
            if prev_max.is_some_and(|m| lo <= m) {
                return Err(bad(format!(
                    "stage {i} does not start after stage {}",
                    i - 1
                )));
            }
            prev_max = stage.iter().map(|s| s.bin).max();
        }
        Ok(())
    }

    pub fn home(&self) -> usize {
        self.stages[0][0].category
    }

    pub fn movements_per_day(&self) -> usize {
        self.stages.len() - 1
    }

    /// Transition probabilities: each consecutive pair of stops weighted by
    /// the chance of taking both, over all movements of a day.
    pub fn kernel(&self) -> Vec<KernelEntry> {
        let per_day = self.movements_per_day() as f64;
        let mut out = Vec::new();
        for w in self.stages.windows(2) {
            for a in &w[0] {
                for b in &w[1] {
                    out.push(KernelEntry {
                        origin: a.category,
                        destination: b.category,
                        departure_bin: a.bin,
                        duration_bins: b.bin - a.bin,
                        probability: a.probability * b.probability / per_day,
                    });
                }
            }
        }
        out
    }

    /// Expected share of movements arriving at each `(category, bin)` cell,
    /// laid out as `category * bins + bin`.
    pub fn joint_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.categories * self.bins];
        for e in self.kernel() {
            m[e.destination * self.bins + e.departure_bin + e.duration_bins] += e.probability;
        }
        m
    }

    /// Copy with the alternatives of every stage re-weighted by random
    /// factors in `[e^-1, e]`.
    pub fn personalize<R: Rng>(&self, rng: &mut R) -> Self {
        let mut p = self.clone();
        for stage in &mut p.stages {
            if stage.len() < 2 {
                continue;
            }
            for s in stage.iter_mut() {
                s.probability *= rng.gen_range(-1.0f64..1.0).exp();
            }
            let total: f64 = stage.iter().map(|s| s.probability).sum();
            stage.iter_mut().for_each(|s| s.probability /= total);
        }
        p
    }

    fn sample_day<R: Rng>(&self, rng: &mut R) -> Vec<(usize, usize)> {
        self.stages
            .iter()
            .map(|stage| {
                let mut u: f64 = rng.gen();
                for s in stage {
                    if u < s.probability {
                        return (s.category, s.bin);
                    }
                    u -= s.probability;
                }
                let last = stage[stage.len() - 1];
                (last.category, last.bin)
            })
            .collect()
    }
}

/// Jensen distance between the arrival `(category, bin)` marginals.
pub fn profile_distance(a: &MobilityProfile, b: &MobilityProfile) -> Result<f64, SynthError> {
    Ok(jensen_distance(&a.joint_marginal(), &b.joint_marginal())?)
}

/// Four routines: commuter, student, evening service worker, retiree.
pub fn default_profiles() -> Vec<MobilityProfile> {
    const RES: usize = 0;
    const EDU: usize = 1;
    const FOOD: usize = 2;
    const TRANS: usize = 3;
    const MED: usize = 4;
    const OFFICE: usize = 5;
    const SERV: usize = 6;
    const GOV: usize = 7;
    const OUT: usize = 8;
    const OTHER: usize = 9;
    let make = |id: usize, name: &str, stages: Vec<Vec<Stop>>| MobilityProfile {
        id,
        name: name.into(),
        categories: DEFAULT_CLASSES.len(),
        bins: TIME_BINS,
        stages,
    };
    vec![
        make(
            0,
            "commuter",
            vec![
                vec![stop(1.0, RES, 14)],
                vec![stop(1.0, TRANS, 16)],
                vec![stop(1.0, OFFICE, 18)],
                vec![stop(0.6, FOOD, 24), stop(0.4, SERV, 24)],
                vec![stop(1.0, OFFICE, 26)],
                vec![stop(0.5, FOOD, 38), stop(0.5, OUT, 38)],
                vec![stop(1.0, RES, 42)],
            ],
        ),
        make(
            1,
            "student",
            vec![
                vec![stop(1.0, RES, 16)],
                vec![stop(1.0, EDU, 18)],
                vec![stop(0.7, FOOD, 23), stop(0.3, SERV, 23)],
                vec![stop(1.0, EDU, 26)],
                vec![stop(0.6, OUT, 34), stop(0.4, OTHER, 34)],
                vec![stop(1.0, RES, 40)],
            ],
        ),
        make(
            2,
            "evening service",
            vec![
                vec![stop(1.0, RES, 20)],
                vec![stop(1.0, TRANS, 22)],
                vec![stop(1.0, SERV, 24)],
                vec![stop(0.5, FOOD, 30), stop(0.5, OTHER, 30)],
                vec![stop(1.0, SERV, 32)],
                vec![stop(0.6, FOOD, 42), stop(0.4, OUT, 42)],
                vec![stop(1.0, RES, 46)],
            ],
        ),
        make(
            3,
            "retiree",
            vec![
                vec![stop(1.0, RES, 17)],
                vec![stop(1.0, OUT, 19)],
                vec![stop(0.5, MED, 21), stop(0.5, GOV, 21)],
                vec![stop(1.0, FOOD, 25)],
                vec![stop(0.6, OUT, 29), stop(0.4, SERV, 29)],
                vec![stop(1.0, RES, 33)],
            ],
        ),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<CheckinRecord>,
    /// `(user_id, profile_id)` per user.
    pub labels: Vec<(String, usize)>,
    /// Expected arrival `(category, bin)` distribution per user, in label
    /// order.
    pub expected_joint: Vec<Vec<f64>>,
}

pub fn user_id(index: usize) -> String {
    format!("u{index:04}")
}

/// Generates `users_per_profile` users per profile, each with `days`
/// consecutive days of check-ins. Users are interleaved across profiles, and
/// every user draws from its own seeded stream.
pub fn generate(
    profiles: &[MobilityProfile],
    users_per_profile: usize,
    days: usize,
    seed: u64,
) -> Result<SynthCorpus, SynthError> {
    if profiles.len() < 2 {
        return Err(SynthError::Request("need at least two profiles".into()));
    }
    if days < 3 {
        return Err(SynthError::Request("need at least three days".into()));
    }
    if users_per_profile == 0 {
        return Err(SynthError::Request(
            "need at least one user per profile".into(),
        ));
    }
    for p in profiles {
        p.validate()?;
        if p.categories > RAW_NAMES.len() {
            return Err(SynthError::Profile {
                profile: p.id,
                reason: format!(
                    "{} categories but only {} raw names",
                    p.categories,
                    RAW_NAMES.len()
                ),
            });
        }
    }
    let offset = FixedOffset::east_opt(OFFSET_SECONDS).expect("valid offset");
    let start =
        NaiveDate::from_ymd_opt(START_DATE.0, START_DATE.1, START_DATE.2).expect("valid date");
    let mut corpus = SynthCorpus {
        records: Vec::new(),
        labels: Vec::new(),
        expected_joint: Vec::new(),
    };
    for index in 0..profiles.len() * users_per_profile {
        let base = &profiles[index % profiles.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let profile = base.personalize(&mut rng);
        let id = user_id(index);
        let center = (
            CENTER.0 + rng.gen_range(-0.05..0.05),
            CENTER.1 + rng.gen_range(-0.05..0.05),
        );
        // One home, one or two venues for every other category.
        let venues: Vec<Vec<(String, f64, f64)>> = (0..profile.categories)
            .map(|c| {
                let n = if c == profile.home() {
                    1
                } else {
                    rng.gen_range(1..=2)
                };
                (0..n)
                    .map(|k| {
                        (
                            format!("{id}-c{c}-v{k}"),
                            center.0 + rng.gen_range(-0.03..0.03),
                            center.1 + rng.gen_range(-0.03..0.03),
                        )
                    })
                    .collect()
            })
            .collect();
        for d in 0..days {
            let date = start + Duration::days(d as i64);
            let midnight = offset
                .from_local_datetime(&date.and_hms_opt(0, 0, 0).expect("midnight"))
                .single()
                .expect("fixed offset is unambiguous");
            for (category, bin) in profile.sample_day(&mut rng) {
                let minute = bin as i64 * 30 + rng.gen_range(0..30);
                let (venue, lat, lon) = &venues[category][rng.gen_range(0..venues[category].len())];
                corpus.records.push(CheckinRecord {
                    user_id: id.clone(),
                    timestamp: midnight + Duration::minutes(minute),
                    latitude: (lat * 1e6).round() / 1e6,
                    longitude: (lon * 1e6).round() / 1e6,
                    venue_id: Some(venue.clone()),
                    raw_category: Some(RAW_NAMES[category].to_string()),
                });
            }
        }
        corpus.labels.push((id, base.id));
        corpus.expected_joint.push(profile.joint_marginal());
    }
    Ok(corpus)
}

pub fn write_labels<W: Write>(mut w: W, labels: &[(String, usize)]) -> io::Result<()> {
    writeln!(w, "user_id,profile_id")?;
    for (u, p) in labels {
        writeln!(w, "{u},{p}")?;
    }
    Ok(())
}

pub fn read_labels<R: Read>(mut r: R) -> Result<Vec<(String, usize)>, SynthError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let (u, p) = line.split_once(',').ok_or_else(|| SynthError::Labels {
            line: i + 1,
            reason: "expected `user_id,profile_id`".into(),
        })?;
        let p = p.trim().parse().map_err(|_| SynthError::Labels {
            line: i + 1,
            reason: format!("bad profile id `{p}`"),
        })?;
        out.push((u.trim().to_string(), p));
    }
    Ok(out)
}

/// Total-variation distance between two distributions given as weights.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    0.5 * p
        .iter()
        .zip(q)
        .map(|(a, b)| (a / sp - b / sq).abs())
        .sum::<f64>()
}
