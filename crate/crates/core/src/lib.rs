//! Community storage pricing on a radial feeder: a storage provider sets a
//! price and a grid schedule, PV-owning households respond, and the provider
//! keeps bus voltages inside their limits.

pub mod ces;
pub mod config;
pub mod feeder;
pub mod followers;
pub mod leader;
pub mod profiles;
pub mod qp;
pub mod scenarios;

pub use ces::{StorageParams, StorageTrajectory};
pub use config::{Config, ConfigError};
pub use feeder::{
    FeederError, FeederModel, FeederSpec, SensitivityPair, SweepSolution, VoltageViolation,
};
pub use followers::{FollowerError, MarketContext, NashCertificate};
pub use leader::{
    EquilibriumResult, LeaderError, LeaderOptions, MarketData, StackelbergCertificate,
    VoltageNetwork,
};
pub use profiles::{ProfileError, ProfileSet, Season, SurplusSet, SynthParams};
pub use qp::{QpError, QpOptions, QpProblem, QpSolution, QpStatus};
pub use scenarios::{ComparisonReport, Mode, ModeResult, Scenario, ScenarioError, SweepReport};
