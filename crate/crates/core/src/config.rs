//! TOML scenario configuration. Paths are resolved against the directory of
//! the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ces::StorageParams;
use crate::feeder::{build_feeder, read_edges_file, FeederModel, FeederSpec};
use crate::leader::LeaderOptions;
use crate::profiles::{load_profiles_files, synthesize_profiles, ProfileSet, Season, SynthParams};
use crate::qp::QpOptions;
use crate::scenarios::{calibrate_phi, price_series, Scenario, ScenarioError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    pub horizon: HorizonConfig,
    pub prices: PriceConfig,
    pub storage: StorageConfig,
    pub network: NetworkConfig,
    pub profiles: ProfileConfig,
    #[serde(default)]
    pub synthetic: SynthParams,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    pub intervals: usize,
    pub interval_hours: f64,
}

/// Grid price `λ_g = φ E + δ`. `φ` is `phi_offpeak` outside the peak window
/// and `phi_ratio · phi_offpeak` inside it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceConfig {
    /// Reference time-of-use prices, cents/kWh.
    pub tou_offpeak: f64,
    pub tou_peak: f64,
    /// 1-based inclusive peak window.
    pub peak_start: usize,
    pub peak_end: usize,
    pub phi_ratio: f64,
    /// When absent, chosen so the spread of baseline grid prices matches the
    /// spread of the reference prices.
    #[serde(default)]
    pub phi_offpeak: Option<f64>,
    /// When absent, the time-weighted mean of the reference prices.
    #[serde(default)]
    pub delta: Option<f64>,
    /// When absent, the off-peak reference price.
    #[serde(default)]
    pub lambda_min: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageConfig {
    pub bus: usize,
    pub capacity_kwh: f64,
    pub min_fraction: f64,
    pub charge_max_kw: f64,
    pub discharge_max_kw: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    #[serde(default = "half")]
    pub initial_fraction: f64,
    #[serde(default = "default_theta")]
    pub cyclical_slack_kwh: f64,
}

fn half() -> f64 {
    0.5
}

fn default_theta() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub feeder: PathBuf,
    pub v0_pu: f64,
    pub v_base_kv: f64,
    pub s_base_kva: f64,
    pub v_min_pu: f64,
    pub v_max_pu: f64,
    /// Transformer rating; bounds `|E(t)|` by `transformer_kva · Δt`.
    pub transformer_kva: f64,
    /// Tightening of the voltage band inside the optimisation.
    #[serde(default)]
    pub voltage_margin_pu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileSource {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub source: ProfileSource,
    #[serde(default)]
    pub season: Option<Season>,
    #[serde(default)]
    pub profiles: Option<PathBuf>,
    #[serde(default)]
    pub user_map: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: Option<usize>,
    pub stackelberg_probes: usize,
    pub nash_resolution: usize,
    pub accept_degenerate: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-8,
            max_iter: None,
            stackelberg_probes: 1000,
            nash_resolution: 200,
            accept_degenerate: false,
        }
    }
}

/// Storage used by the seasonal sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub capacity_kwh: f64,
    pub charge_max_kw: f64,
    pub discharge_max_kw: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            capacity_kwh: 950.0,
            charge_max_kw: 300.0,
            discharge_max_kw: 300.0,
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg = Self::from_toml_str(&text)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, dir))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Every input file the config refers to, resolved against `base`.
    pub fn input_paths(&self, base: &Path) -> Vec<PathBuf> {
        let mut out = vec![base.join(&self.network.feeder)];
        if self.profiles.source == ProfileSource::Files {
            out.extend(self.profiles.profiles.iter().map(|p| base.join(p)));
            out.extend(self.profiles.user_map.iter().map(|p| base.join(p)));
        }
        out
    }

    /// Field-level checks that need no input files.
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        let h = &self.horizon;
        let mut need = |ok: bool, msg: String| {
            if !ok {
                out.push(msg)
            }
        };
        need(h.intervals > 0, "horizon.intervals must be positive".into());
        need(
            h.interval_hours > 0.0 && h.interval_hours.is_finite(),
            "horizon.interval_hours must be positive".into(),
        );
        need(
            h.intervals as f64 * h.interval_hours <= 24.0 + 1e-9,
            format!(
                "horizon covers {} h, more than a day",
                h.intervals as f64 * h.interval_hours
            ),
        );
        let p = &self.prices;
        need(
            1 <= p.peak_start && p.peak_start <= p.peak_end && p.peak_end <= h.intervals,
            format!(
                "peak window [{}, {}] must lie within [1, {}]",
                p.peak_start, p.peak_end, h.intervals
            ),
        );
        need(
            p.phi_ratio > 0.0,
            "prices.phi_ratio must be positive".into(),
        );
        need(
            p.tou_offpeak > 0.0 && p.tou_peak > p.tou_offpeak,
            "need 0 < prices.tou_offpeak < prices.tou_peak".into(),
        );
        if let Some(phi) = p.phi_offpeak {
            need(phi > 0.0, "prices.phi_offpeak must be positive".into());
        }
        if let Some(d) = p.delta {
            need(d > 0.0, "prices.delta must be positive".into());
        }
        let s = &self.storage;
        need(
            (0.0..1.0).contains(&s.min_fraction),
            "storage.min_fraction must lie in [0, 1)".into(),
        );
        need(
            s.initial_fraction >= s.min_fraction && s.initial_fraction <= 1.0,
            "storage.initial_fraction must lie in [min_fraction, 1]".into(),
        );
        if let Err(e) = self
            .storage_params(s.capacity_kwh, s.charge_max_kw, s.discharge_max_kw)
            .validate()
        {
            need(false, format!("storage: {e}"));
        }
        let n = &self.network;
        need(
            n.transformer_kva > 0.0,
            "network.transformer_kva must be positive".into(),
        );
        need(
            n.voltage_margin_pu >= 0.0
                && n.v_min_pu + n.voltage_margin_pu < n.v_max_pu - n.voltage_margin_pu,
            "network.voltage_margin_pu leaves an empty voltage band".into(),
        );
        match self.profiles.source {
            ProfileSource::Files => need(
                self.profiles.profiles.is_some() && self.profiles.user_map.is_some(),
                "profiles.source = \"files\" needs profiles and user_map".into(),
            ),
            ProfileSource::Synthetic => {}
        }
        let sv = &self.solver;
        need(
            sv.tol > 0.0 && sv.tol < 1e-2,
            "solver.tol must lie in (0, 1e-2)".into(),
        );
        need(
            sv.nash_resolution >= 2,
            "solver.nash_resolution must be at least 2".into(),
        );
        out
    }

    fn storage_params(&self, capacity: f64, charge: f64, discharge: f64) -> StorageParams {
        let s = &self.storage;
        StorageParams {
            b0: capacity * s.initial_fraction,
            theta: s.cyclical_slack_kwh,
            ..StorageParams::with_defaults(
                capacity,
                capacity * s.min_fraction,
                charge,
                discharge,
                s.eta_c,
                s.eta_d,
                self.horizon.interval_hours,
            )
        }
    }

    fn synth_params(&self, season: Option<Season>) -> SynthParams {
        let base = SynthParams {
            horizon: self.horizon.intervals,
            interval_hours: self.horizon.interval_hours,
            ..self.synthetic.clone()
        };
        match season.or(self.profiles.season) {
            Some(s) => s.apply(&base),
            None => base,
        }
    }

    /// Load and validate the feeder.
    pub fn feeder_model(&self, base: &Path) -> Result<FeederModel, ConfigError> {
        let n = &self.network;
        let edges = read_edges_file(&base.join(&n.feeder))
            .map_err(|e| ConfigError::Scenario(ScenarioError::Feeder(e)))?;
        build_feeder(&FeederSpec {
            edges,
            v0_pu: n.v0_pu,
            v_base_kv: n.v_base_kv,
            s_base_kva: n.s_base_kva,
            v_min_pu: n.v_min_pu,
            v_max_pu: n.v_max_pu,
        })
        .map_err(|e| ConfigError::Scenario(ScenarioError::Feeder(e)))
    }

    pub fn profile_set(
        &self,
        base: &Path,
        season: Option<Season>,
        model: &FeederModel,
    ) -> Result<ProfileSet, ConfigError> {
        match self.profiles.source {
            ProfileSource::Synthetic => {
                Ok(synthesize_profiles(self.seed, &self.synth_params(season)))
            }
            ProfileSource::Files => {
                let (p, m) = match (&self.profiles.profiles, &self.profiles.user_map) {
                    (Some(p), Some(m)) => (base.join(p), base.join(m)),
                    _ => return Err(ConfigError::Invalid(vec!["profile paths missing".into()])),
                };
                load_profiles_files(&p, &m, self.horizon.intervals, model)
                    .map_err(|e| ConfigError::Scenario(ScenarioError::Profile(e)))
            }
        }
    }

    /// Build the scenario described by the config.
    pub fn scenario(&self, base: &Path) -> Result<Scenario, ConfigError> {
        let s = &self.storage;
        let storage = self.storage_params(s.capacity_kwh, s.charge_max_kw, s.discharge_max_kw);
        let model = self.feeder_model(base)?;
        let profiles = self.profile_set(base, None, &model)?;
        let name = self
            .profiles
            .season
            .map_or("custom", Season::name)
            .to_string();
        self.build(model, name, profiles, storage)
    }

    /// One scenario per season with the sweep's storage sizing. Requires
    /// synthetic profiles.
    pub fn season_scenarios(&self, base: &Path) -> Result<Vec<(Season, Scenario)>, ConfigError> {
        if self.profiles.source != ProfileSource::Synthetic {
            return Err(ConfigError::Invalid(vec![
                "the seasonal sweep needs profiles.source = \"synthetic\"".into(),
            ]));
        }
        let w = &self.sweep;
        let storage = self.storage_params(w.capacity_kwh, w.charge_max_kw, w.discharge_max_kw);
        let model = self.feeder_model(base)?;
        Season::ALL
            .into_iter()
            .map(|season| {
                let profiles = self.profile_set(base, Some(season), &model)?;
                Ok((
                    season,
                    self.build(model.clone(), season.name().to_string(), profiles, storage)?,
                ))
            })
            .collect()
    }

    fn build(
        &self,
        model: FeederModel,
        name: String,
        profiles: ProfileSet,
        storage: StorageParams,
    ) -> Result<Scenario, ConfigError> {
        let issues = self.issues();
        if !issues.is_empty() {
            return Err(ConfigError::Invalid(issues));
        }
        let n = &self.network;

        let h = self.horizon.intervals;
        let dt = self.horizon.interval_hours;
        let p = &self.prices;
        let peak = |t: usize| (p.peak_start..=p.peak_end).contains(&(t + 1));
        let delta = p.delta.unwrap_or_else(|| {
            let n_peak = (0..h).filter(|&t| peak(t)).count() as f64;
            (n_peak * p.tou_peak + (h as f64 - n_peak) * p.tou_offpeak) / h as f64
        });
        let phi_offpeak = match p.phi_offpeak {
            Some(v) => v,
            None => calibrate_phi(
                &profiles,
                h,
                p.peak_start,
                p.peak_end,
                p.phi_ratio,
                p.tou_peak - p.tou_offpeak,
            )?,
        };
        let (phi, delta) =
            price_series(h, p.peak_start, p.peak_end, phi_offpeak, p.phi_ratio, delta);

        let sv = &self.solver;
        let leader = LeaderOptions {
            voltage_constraints: true,
            qp: QpOptions {
                tol: sv.tol,
                max_iter: sv.max_iter,
                ..QpOptions::default()
            },
            nash_resolution: sv.nash_resolution,
            accept_degenerate: sv.accept_degenerate,
            ..LeaderOptions::default()
        };
        let grid_max = n.transformer_kva * dt;
        let sc = Scenario {
            name,
            seed: self.seed,
            dt_hours: dt,
            model,
            profiles,
            ces_bus: self.storage.bus,
            phi,
            delta,
            lambda_min: p.lambda_min.unwrap_or(p.tou_offpeak),
            storage,
            grid_forward_max: grid_max,
            grid_reverse_max: grid_max,
            voltage_margin_pu: n.voltage_margin_pu,
            leader,
            stackelberg_probes: sv.stackelberg_probes,
        };
        sc.check()?;
        Ok(sc)
    }
}
