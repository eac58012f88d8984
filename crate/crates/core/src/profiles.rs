//! Per-user demand, PV and reactive-power series.
//!
//! Energies are kWh per interval, reactive demand is kvar. Users are kept in
//! the order of the user-to-bus map; participant-indexed quantities (surplus,
//! trades) follow the order of [`ProfileSet::participants`].

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{BusInjectionSeries, FeederModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("user {user}: negative demand {value} at t = {t}")]
    NegativeDemand { user: String, t: usize, value: f64 },
    #[error("user {user}: negative PV generation {value} at t = {t}")]
    NegativePV { user: String, t: usize, value: f64 },
    #[error("user {user}: expected {expected} intervals, found {got}")]
    LengthMismatch {
        user: String,
        expected: usize,
        got: usize,
    },
    #[error("user {user}: bus {bus} is not on the feeder")]
    UnknownBus { user: String, bus: usize },
    #[error("user {user}: PV generation {value} at t = {t} on a non-participating user")]
    PVOnNonParticipant { user: String, t: usize, value: f64 },
    #[error("profile rows reference user {user} missing from the user map")]
    UnknownUser { user: String },
    #[error("user {user}: duplicate row for t = {t}")]
    DuplicateRow { user: String, t: usize },
    #[error("user {user}: non-finite value at t = {t}")]
    NonFinite { user: String, t: usize },
    #[error("storage is placed at bus {bus}, which is not on the feeder")]
    UnknownCesBus { bus: usize },
    #[error("storage flow series has {got} entries, expected {expected}")]
    SeriesLength { expected: usize, got: usize },
    #[error("profile csv: {0}")]
    Csv(String),
    #[error("profile csv: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub bus: usize,
    pub participating: bool,
    pub demand: Vec<f64>,
    pub pv: Vec<f64>,
    pub reactive: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub horizon: usize,
    pub users: Vec<UserProfile>,
}

impl ProfileSet {
    pub fn participants(&self) -> impl Iterator<Item = &UserProfile> {
        self.users.iter().filter(|u| u.participating)
    }

    pub fn non_participants(&self) -> impl Iterator<Item = &UserProfile> {
        self.users.iter().filter(|u| !u.participating)
    }

    pub fn participant_count(&self) -> usize {
        self.participants().count()
    }

    /// Grid energy of the non-participating users, `E_N(t) = Σ d_n(t)`.
    pub fn non_participant_energy(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.horizon];
        for u in self.non_participants() {
            for (o, d) in out.iter_mut().zip(&u.demand) {
                *o += d;
            }
        }
        out
    }

    /// Every invariant violation, rather than only the first.
    pub fn violations(&self, model: Option<&FeederModel>) -> Vec<ProfileError> {
        let mut out = Vec::new();
        for u in &self.users {
            let user = u.user_id.clone();
            if let Some(m) = model {
                if !m.has_bus(u.bus) {
                    out.push(ProfileError::UnknownBus {
                        user: user.clone(),
                        bus: u.bus,
                    });
                }
            }
            for len in [u.demand.len(), u.pv.len(), u.reactive.len()] {
                if len != self.horizon {
                    out.push(ProfileError::LengthMismatch {
                        user: user.clone(),
                        expected: self.horizon,
                        got: len,
                    });
                    break;
                }
            }
            for (t, (&d, &g)) in u.demand.iter().zip(&u.pv).enumerate() {
                let t1 = t + 1;
                if !d.is_finite() || !g.is_finite() {
                    out.push(ProfileError::NonFinite {
                        user: user.clone(),
                        t: t1,
                    });
                    continue;
                }
                if d < 0.0 {
                    out.push(ProfileError::NegativeDemand {
                        user: user.clone(),
                        t: t1,
                        value: d,
                    });
                }
                if g < 0.0 {
                    out.push(ProfileError::NegativePV {
                        user: user.clone(),
                        t: t1,
                        value: g,
                    });
                } else if g > 0.0 && !u.participating {
                    out.push(ProfileError::PVOnNonParticipant {
                        user: user.clone(),
                        t: t1,
                        value: g,
                    });
                }
            }
        }
        out
    }

    pub fn validate(&self, model: Option<&FeederModel>) -> Result<(), ProfileError> {
        match self.violations(model).into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ProfileRow {
    t: usize,
    user_id: String,
    demand_kwh: f64,
    pv_kwh: f64,
    #[serde(default)]
    q_kvar: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct UserMapRow {
    user_id: String,
    bus_id: usize,
    participating: BoolFlag,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
struct BoolFlag(bool);

impl TryFrom<String> for BoolFlag {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "y" => Ok(BoolFlag(true)),
            "0" | "false" | "no" | "n" => Ok(BoolFlag(false)),
            other => Err(format!("invalid participation flag {other:?}")),
        }
    }
}

impl From<BoolFlag> for String {
    fn from(b: BoolFlag) -> String {
        if b.0 { "1" } else { "0" }.to_string()
    }
}

/// Parse the long-format profile table (`t,user_id,demand_kwh,pv_kwh[,q_kvar]`,
/// `t` 1-based) together with the `user_id,bus_id,participating` map, without
/// enforcing the value invariants.
pub fn parse_profiles<P: Read, U: Read>(
    profiles: P,
    user_map: U,
    horizon: usize,
) -> Result<ProfileSet, ProfileError> {
    let csv_err = |e: csv::Error| ProfileError::Csv(e.to_string());

    let mut users = Vec::new();
    let mut index = HashMap::new();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(user_map);
    for row in rdr.deserialize::<UserMapRow>() {
        let row = row.map_err(csv_err)?;
        index.insert(row.user_id.clone(), users.len());
        users.push(UserProfile {
            user_id: row.user_id,
            bus: row.bus_id,
            participating: row.participating.0,
            demand: Vec::new(),
            pv: Vec::new(),
            reactive: Vec::new(),
        });
    }

    // Staging with per-slot presence so gaps and duplicates are reported.
    let mut seen: Vec<Vec<bool>> = vec![vec![false; horizon]; users.len()];
    let mut counts = vec![0usize; users.len()];
    for u in users.iter_mut() {
        u.demand = vec![0.0; horizon];
        u.pv = vec![0.0; horizon];
        u.reactive = vec![0.0; horizon];
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(profiles);
    for row in rdr.deserialize::<ProfileRow>() {
        let row = row.map_err(csv_err)?;
        let &k = index
            .get(&row.user_id)
            .ok_or_else(|| ProfileError::UnknownUser {
                user: row.user_id.clone(),
            })?;
        counts[k] += 1;
        if row.t == 0 || row.t > horizon {
            continue;
        }
        let slot = row.t - 1;
        if seen[k][slot] {
            return Err(ProfileError::DuplicateRow {
                user: row.user_id,
                t: row.t,
            });
        }
        seen[k][slot] = true;
        users[k].demand[slot] = row.demand_kwh;
        users[k].pv[slot] = row.pv_kwh;
        users[k].reactive[slot] = row.q_kvar.unwrap_or(0.0);
    }
    for (k, u) in users.iter_mut().enumerate() {
        let filled = seen[k].iter().filter(|&&s| s).count();
        if counts[k] != horizon || filled != horizon {
            // Keep the raw length visible to validation.
            u.demand.truncate(filled.min(counts[k]));
            return Err(ProfileError::LengthMismatch {
                user: u.user_id.clone(),
                expected: horizon,
                got: counts[k],
            });
        }
    }
    Ok(ProfileSet { horizon, users })
}

/// Parse and validate profiles against a feeder.
pub fn load_profiles<P: Read, U: Read>(
    profiles: P,
    user_map: U,
    horizon: usize,
    model: &FeederModel,
) -> Result<ProfileSet, ProfileError> {
    let set = parse_profiles(profiles, user_map, horizon)?;
    set.validate(Some(model))?;
    Ok(set)
}

pub fn load_profiles_files(
    profiles: &Path,
    user_map: &Path,
    horizon: usize,
    model: &FeederModel,
) -> Result<ProfileSet, ProfileError> {
    let open = |p: &Path| {
        std::fs::File::open(p).map_err(|e| ProfileError::Io(format!("{}: {e}", p.display())))
    };
    load_profiles(open(profiles)?, open(user_map)?, horizon, model)
}

/// Render a set back into the two csv tables `(profiles, user_map)`.
pub fn write_profiles(set: &ProfileSet) -> (String, String) {
    let mut prof = String::from("t,user_id,demand_kwh,pv_kwh,q_kvar\n");
    for t in 0..set.horizon {
        for u in &set.users {
            prof.push_str(&format!(
                "{},{},{},{},{}\n",
                t + 1,
                u.user_id,
                u.demand[t],
                u.pv[t],
                u.reactive[t]
            ));
        }
    }
    let mut map = String::from("user_id,bus_id,participating\n");
    for u in &set.users {
        map.push_str(&format!(
            "{},{},{}\n",
            u.user_id,
            u.bus,
            u8::from(u.participating)
        ));
    }
    (prof, map)
}

/// Participant surplus `s_p(t) = g_p(t) - d_p(t)`, time-major over participants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurplusSet {
    pub s: Vec<Vec<f64>>,
    /// `true` when the participant is a surplus user (`s ≥ 0`) at `t`.
    pub surplus_side: Vec<Vec<bool>>,
}

impl SurplusSet {
    pub fn horizon(&self) -> usize {
        self.s.len()
    }

    pub fn participant_count(&self) -> usize {
        self.s.first().map_or(0, Vec::len)
    }

    pub fn total(&self, t: usize) -> f64 {
        self.s[t].iter().sum()
    }

    pub fn surplus_users(&self, t: usize) -> Vec<usize> {
        (0..self.participant_count())
            .filter(|&p| self.surplus_side[t][p])
            .collect()
    }

    pub fn deficit_users(&self, t: usize) -> Vec<usize> {
        (0..self.participant_count())
            .filter(|&p| !self.surplus_side[t][p])
            .collect()
    }
}

pub fn surplus(set: &ProfileSet) -> SurplusSet {
    let parts: Vec<&UserProfile> = set.participants().collect();
    let s: Vec<Vec<f64>> = (0..set.horizon)
        .map(|t| parts.iter().map(|u| u.pv[t] - u.demand[t]).collect())
        .collect();
    let surplus_side = s
        .iter()
        .map(|row| row.iter().map(|&v| v >= 0.0).collect())
        .collect();
    SurplusSet { s, surplus_side }
}

/// Net bus consumption in kWh per interval, before any storage flow:
/// `-Σ_{P_i} s_p + Σ_{N_i} d_n`, and reactive demand in kvar. Time-major.
pub fn bus_energy(
    set: &ProfileSet,
    model: &FeederModel,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), ProfileError> {
    let n = model.bus_count();
    let mut p = vec![vec![0.0; n]; set.horizon];
    let mut q = vec![vec![0.0; n]; set.horizon];
    for u in &set.users {
        if !model.has_bus(u.bus) {
            return Err(ProfileError::UnknownBus {
                user: u.user_id.clone(),
                bus: u.bus,
            });
        }
        for t in 0..set.horizon {
            let net = if u.participating {
                u.demand[t] - u.pv[t]
            } else {
                u.demand[t]
            };
            p[t][u.bus - 1] += net;
            q[t][u.bus - 1] += u.reactive[t];
        }
    }
    Ok((p, q))
}

/// Per-unit bus injections for the feeder. The storage bus additionally
/// carries `e_s(t)/Δt`.
pub fn aggregate_by_bus(
    set: &ProfileSet,
    model: &FeederModel,
    ces_bus: Option<usize>,
    e_s: Option<&[f64]>,
    dt_hours: f64,
) -> Result<BusInjectionSeries, ProfileError> {
    let (energy, reactive) = bus_energy(set, model)?;
    let mut inj = BusInjectionSeries {
        p: energy
            .iter()
            .map(|row| row.iter().map(|e| model.kw_to_pu(e / dt_hours)).collect())
            .collect(),
        q: reactive
            .iter()
            .map(|row| row.iter().map(|&kvar| model.kw_to_pu(kvar)).collect())
            .collect(),
    };
    if let Some(bus) = ces_bus {
        if !model.has_bus(bus) {
            return Err(ProfileError::UnknownCesBus { bus });
        }
        if let Some(flow) = e_s {
            if flow.len() != set.horizon {
                return Err(ProfileError::SeriesLength {
                    expected: set.horizon,
                    got: flow.len(),
                });
            }
            for (row, &e) in inj.p.iter_mut().zip(flow) {
                row[bus - 1] += model.kw_to_pu(e / dt_hours);
            }
        }
    }
    Ok(inj)
}

/// Number of users placed at a bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusAllocation {
    pub bus: usize,
    pub participants: usize,
    pub non_participants: usize,
}

/// Shape parameters for synthetic daily profiles. Powers are kW, times are
/// hours of the day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub horizon: usize,
    pub interval_hours: f64,
    pub allocation: Vec<BusAllocation>,
    pub base_kw: f64,
    pub morning_peak_kw: f64,
    pub morning_hour: f64,
    pub morning_width_h: f64,
    pub evening_peak_kw: f64,
    pub evening_hour: f64,
    pub evening_width_h: f64,
    pub pv_peak_kw: f64,
    pub sunrise_hour: f64,
    pub sunset_hour: f64,
    /// Relative spread of per-user scale factors.
    pub user_spread: f64,
    /// Relative per-interval noise.
    pub jitter: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            horizon: 288,
            interval_hours: 5.0 / 60.0,
            allocation: default_allocation(),
            base_kw: 0.35,
            morning_peak_kw: 0.6,
            morning_hour: 7.5,
            morning_width_h: 1.2,
            evening_peak_kw: 1.7,
            evening_hour: 19.5,
            evening_width_h: 2.0,
            pv_peak_kw: 3.0,
            sunrise_hour: 7.0,
            sunset_hour: 17.5,
            user_spread: 0.25,
            jitter: 0.05,
        }
    }
}

/// Users per bus on the shipped 7-bus feeder: 50 participants spread over
/// the PV buses, and 5 non-participants at bus 6.
pub fn default_allocation() -> Vec<BusAllocation> {
    let a = |bus, participants, non_participants| BusAllocation {
        bus,
        participants,
        non_participants,
    };
    vec![
        a(1, 5, 0),
        a(2, 8, 0),
        a(3, 0, 0),
        a(4, 7, 0),
        a(5, 12, 0),
        a(6, 0, 5),
        a(7, 18, 0),
    ]
}

/// Seasonal presets, scaling PV output, demand and daylight hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Summer,
    Autumn,
    Winter,
    Spring,
}

impl Season {
    pub const ALL: [Season; 4] = [
        Season::Summer,
        Season::Autumn,
        Season::Winter,
        Season::Spring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Season::Summer => "summer",
            Season::Autumn => "autumn",
            Season::Winter => "winter",
            Season::Spring => "spring",
        }
    }

    pub fn apply(self, base: &SynthParams) -> SynthParams {
        // (pv scale, demand scale, sunrise, sunset)
        let (pv, demand, rise, set) = match self {
            Season::Summer => (1.3, 0.85, 6.0, 19.0),
            Season::Autumn => (1.0, 1.0, 7.0, 17.5),
            Season::Winter => (0.55, 1.35, 7.5, 16.5),
            Season::Spring => (1.15, 0.95, 6.5, 18.0),
        };
        SynthParams {
            pv_peak_kw: base.pv_peak_kw * pv,
            base_kw: base.base_kw * demand,
            morning_peak_kw: base.morning_peak_kw * demand,
            evening_peak_kw: base.evening_peak_kw * demand,
            sunrise_hour: rise,
            sunset_hour: set,
            ..base.clone()
        }
    }
}

impl std::str::FromStr for Season {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Season::ALL
            .into_iter()
            .find(|x| x.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown season {s:?}"))
    }
}

fn bump(hour: f64, centre: f64, width: f64) -> f64 {
    let z = (hour - centre) / width;
    (-0.5 * z * z).exp()
}

/// Deterministic synthetic profiles: a morning and an evening demand bump
/// on a base load, and a midday PV half-sine, with seeded per-user scale
/// factors and per-interval jitter.
pub fn synthesize_profiles(seed: u64, params: &SynthParams) -> ProfileSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = params.horizon;
    let dt = params.interval_hours;
    let mut users = Vec::new();
    let mut uid = 0usize;
    let spread = params.user_spread.clamp(0.0, 0.95);
    let jitter = params.jitter.clamp(0.0, 0.95);
    let day = params.sunset_hour - params.sunrise_hour;

    let mut make = |bus: usize, participating: bool, rng: &mut ChaCha8Rng| {
        uid += 1;
        let demand_scale = 1.0 + spread * rng.gen_range(-1.0..1.0);
        let pv_scale = 1.0 + spread * rng.gen_range(-1.0..1.0);
        let shift = rng.gen_range(-0.5..0.5);
        let mut demand = Vec::with_capacity(h);
        let mut pv = Vec::with_capacity(h);
        for t in 0..h {
            let hour = (t as f64 + 0.5) * dt;
            let kw = params.base_kw
                + params.morning_peak_kw
                    * bump(hour, params.morning_hour + shift, params.morning_width_h)
                + params.evening_peak_kw
                    * bump(hour, params.evening_hour + shift, params.evening_width_h);
            let noise = 1.0 + jitter * rng.gen_range(-1.0..1.0);
            demand.push((kw * demand_scale * noise).max(0.0) * dt);

            let g = if participating
                && day > 0.0
                && hour > params.sunrise_hour
                && hour < params.sunset_hour
            {
                let x = (hour - params.sunrise_hour) / day;
                let noise = 1.0 + jitter * rng.gen_range(-1.0..1.0);
                params.pv_peak_kw * pv_scale * (PI * x).sin().powf(1.5) * noise
            } else {
                0.0
            };
            pv.push(g.max(0.0) * dt);
        }
        UserProfile {
            user_id: format!("u{uid:03}"),
            bus,
            participating,
            demand,
            pv,
            reactive: vec![0.0; h],
        }
    };

    for alloc in &params.allocation {
        for _ in 0..alloc.participants {
            users.push(make(alloc.bus, true, &mut rng));
        }
        for _ in 0..alloc.non_participants {
            users.push(make(alloc.bus, false, &mut rng));
        }
    }
    ProfileSet { horizon: h, users }
}
