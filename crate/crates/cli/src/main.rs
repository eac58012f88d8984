use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cesgame_core::config::{Config, ProfileSource};
use cesgame_core::feeder::{build_feeder, read_edges_file, FeederError, FeederSpec};
use cesgame_core::profiles::{parse_profiles, ProfileError};
use cesgame_core::scenarios::{
    compare, normalized_csv, run_modes, season_voltage_csv, seasonal_sweep, series_csv,
    storage_csv, summary_csv, voltage_quantiles_csv, voltages_csv,
};
use cesgame_core::{ComparisonReport, ConfigError, LeaderError, Mode, ModeResult, ScenarioError};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const DEFAULT_OUT: &str = "cesgame-out";

#[derive(Parser)]
#[command(
    name = "cesgame",
    version,
    about = "Community storage pricing game on a radial feeder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config and its input files without solving anything.
    Validate {
        config: PathBuf,
        /// Feeder edge list to use instead of the one named in the config.
        #[arg(long)]
        feeder: Option<PathBuf>,
        /// Profile table to use instead of the one named in the config.
        #[arg(long, requires = "user_map")]
        profiles: Option<PathBuf>,
        #[arg(long, requires = "profiles")]
        user_map: Option<PathBuf>,
    },
    /// Run one or more operating modes and write their results.
    Run {
        config: PathBuf,
        /// baseline, game, game-novolt or centralized; repeat or comma-separate.
        #[arg(long, value_delimiter = ',', default_values_t = Mode::ALL.to_vec())]
        mode: Vec<Mode>,
        #[arg(long, env = "CESGAME_OUT", default_value = DEFAULT_OUT)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Leader perturbation probes per game solve.
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare the results in two or more run directories.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        #[arg(long, env = "CESGAME_OUT", default_value = DEFAULT_OUT)]
        out: PathBuf,
    },
    /// Run every mode for each season with the sweep's storage sizing.
    SweepSeasons {
        config: PathBuf,
        #[arg(long, env = "CESGAME_OUT", default_value = DEFAULT_OUT)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// Exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Code {
    Invariant = 1,
    Parse = 2,
    Certificate = 3,
    Infeasible = 4,
    Incompatible = 5,
}

#[derive(Debug)]
struct Failure {
    code: Code,
    message: String,
}

impl Failure {
    fn new(code: Code, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(Code::Parse, format!("{}: {e}", path.display()))
}

/// `Variant: message`, so diagnostics can be grepped by error kind.
fn diagnostic<E: fmt::Debug + fmt::Display>(path: &Path, e: &E) -> String {
    let debug = format!("{e:?}");
    let kind = debug.split([' ', '(', '{']).next().unwrap_or_default();
    format!("{}: {kind}: {e}", path.display())
}

fn feeder_code(e: &FeederError) -> Code {
    match e {
        FeederError::Csv(_) | FeederError::Io(_) => Code::Parse,
        _ => Code::Invariant,
    }
}

fn profile_code(e: &ProfileError) -> Code {
    match e {
        ProfileError::Csv(_) | ProfileError::Io(_) => Code::Parse,
        _ => Code::Invariant,
    }
}

fn scenario_code(e: &ScenarioError) -> Code {
    match e {
        ScenarioError::Feeder(f) => feeder_code(f),
        ScenarioError::Profile(p) => profile_code(p),
        ScenarioError::InfeasibleScenario { .. }
        | ScenarioError::Leader(LeaderError::InfeasibleScenario { .. }) => Code::Infeasible,
        ScenarioError::Leader(
            LeaderError::CertificateFailure(_)
            | LeaderError::ComplementarityViolation { .. }
            | LeaderError::Solver(_),
        )
        | ScenarioError::Solver(_) => Code::Certificate,
        ScenarioError::IncompatibleResults(_) => Code::Incompatible,
        _ => Code::Invariant,
    }
}

fn config_failure(e: ConfigError) -> Failure {
    let code = match &e {
        ConfigError::Io { .. } | ConfigError::Parse(_) => Code::Parse,
        ConfigError::Invalid(_) => Code::Invariant,
        ConfigError::Scenario(s) => scenario_code(s),
    };
    Failure::new(code, e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

/// Everything needed to repeat a run: the effective config, the digests of
/// the files it read and the tool version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    tool: String,
    version: String,
    command: String,
    config_path: String,
    modes: Vec<Mode>,
    output_dir: String,
    seed: u64,
    inputs: Vec<InputDigest>,
    config: String,
}

fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(config_path: &Path, cfg: &Config, base: &Path) -> Result<Vec<InputDigest>, Failure> {
    std::iter::once(config_path.to_path_buf())
        .chain(cfg.input_paths(base))
        .map(|p| {
            Ok(InputDigest {
                sha256: sha256_file(&p)?,
                path: p.display().to_string(),
            })
        })
        .collect()
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, text)
        .map_err(|e| Failure::new(Code::Invariant, format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("results serialize");
    s.push('\n');
    s
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::new(Code::Invariant, format!("{}: {e}", dir.display())))
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    probes: Option<usize>,
) -> Result<(Config, PathBuf), Failure> {
    let (mut cfg, base) = Config::load(path).map_err(config_failure)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = probes {
        cfg.solver.stackelberg_probes = p;
    }
    Ok((cfg, base))
}

/// Write the manifest before any result, and return the input digests so
/// they can be rechecked once the inputs have been read.
fn start_run(
    command: &str,
    config_path: &Path,
    cfg: &Config,
    base: &Path,
    modes: &[Mode],
    out: &Path,
) -> Result<Vec<InputDigest>, Failure> {
    let inputs = digests(config_path, cfg, base)?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config_path: config_path.display().to_string(),
        modes: modes.to_vec(),
        output_dir: out.display().to_string(),
        seed: cfg.seed,
        inputs: inputs.clone(),
        config: cfg.to_toml(),
    };
    create_dir(out)?;
    write(out, "manifest.json", &to_json(&manifest))?;
    Ok(inputs)
}

fn recheck_inputs(
    config_path: &Path,
    cfg: &Config,
    base: &Path,
    before: &[InputDigest],
) -> Result<(), Failure> {
    if digests(config_path, cfg, base)? != before {
        return Err(Failure::new(
            Code::Invariant,
            "input files changed while the run was reading them",
        ));
    }
    Ok(())
}

fn validate(
    config: &Path,
    feeder: Option<&Path>,
    profiles: Option<(&Path, &Path)>,
) -> Result<(), Failure> {
    let (mut cfg, base) = Config::load(config).map_err(config_failure)?;
    if let Some(f) = feeder {
        cfg.network.feeder = std::path::absolute(f).map_err(|e| io_failure(f, e))?;
    }
    if let Some((p, m)) = profiles {
        cfg.profiles.source = ProfileSource::Files;
        cfg.profiles.profiles = Some(std::path::absolute(p).map_err(|e| io_failure(p, e))?);
        cfg.profiles.user_map = Some(std::path::absolute(m).map_err(|e| io_failure(m, e))?);
    }
    let mut problems: Vec<(Code, String)> = cfg
        .issues()
        .into_iter()
        .map(|i| (Code::Invariant, i))
        .collect();

    let feeder_path = base.join(&cfg.network.feeder);
    let model = match read_edges_file(&feeder_path) {
        Err(e) => {
            problems.push((feeder_code(&e), diagnostic(&feeder_path, &e)));
            None
        }
        Ok(edges) => {
            let n = &cfg.network;
            match build_feeder(&FeederSpec {
                edges,
                v0_pu: n.v0_pu,
                v_base_kv: n.v_base_kv,
                s_base_kva: n.s_base_kva,
                v_min_pu: n.v_min_pu,
                v_max_pu: n.v_max_pu,
            }) {
                Ok(m) => Some(m),
                Err(e) => {
                    problems.push((Code::Invariant, diagnostic(&feeder_path, &e)));
                    None
                }
            }
        }
    };

    if cfg.profiles.source == ProfileSource::Files {
        match (&cfg.profiles.profiles, &cfg.profiles.user_map) {
            (Some(p), Some(m)) => {
                let (p, m) = (base.join(p), base.join(m));
                let opened = fs::File::open(&p).and_then(|pf| Ok((pf, fs::File::open(&m)?)));
                match opened {
                    Err(e) => problems.push((
                        Code::Parse,
                        format!("{} / {}: {e}", p.display(), m.display()),
                    )),
                    Ok((pf, mf)) => match parse_profiles(pf, mf, cfg.horizon.intervals) {
                        Err(e) => problems.push((profile_code(&e), diagnostic(&p, &e))),
                        Ok(set) => {
                            for e in set.violations(model.as_ref()) {
                                problems.push((Code::Invariant, diagnostic(&p, &e)));
                            }
                        }
                    },
                }
            }
            _ => problems.push((
                Code::Invariant,
                "profiles.source = \"files\" needs profiles and user_map".into(),
            )),
        }
    }

    if problems.is_empty() && model.is_some() {
        if let Err(e) = cfg.scenario(&base) {
            let f = config_failure(e);
            problems.push((f.code, f.message));
        }
    }

    for (_, p) in &problems {
        eprintln!("{p}");
    }
    match problems.iter().map(|p| p.0).max() {
        // Any parse failure wins over invariant failures.
        Some(_) if problems.iter().any(|p| p.0 == Code::Parse) => Err(Failure::new(
            Code::Parse,
            format!("{} problem(s) found", problems.len()),
        )),
        Some(code) => Err(Failure::new(
            code,
            format!("{} problem(s) found", problems.len()),
        )),
        None => {
            println!("{}: ok", config.display());
            Ok(())
        }
    }
}

fn write_result(out: &Path, r: &ModeResult) -> Result<(), Failure> {
    let name = r.mode.name();
    write(out, &format!("{name}.json"), &to_json(r))?;
    write(out, &format!("{name}_series.csv"), &series_csv(r))?;
    write(out, &format!("{name}_voltages.csv"), &voltages_csv(r))?;
    if let Some(s) = storage_csv(r) {
        write(out, &format!("{name}_storage.csv"), &s)?;
    }
    if let Some(g) = &r.game {
        let certs = serde_json::json!({ "solve": g.certificates, "stackelberg": g.stackelberg });
        write(out, &format!("{name}_certificates.json"), &to_json(&certs))?;
    }
    if let Some(c) = &r.centralized {
        write(out, &format!("{name}_certificates.json"), &to_json(c))?;
    }
    Ok(())
}

fn describe(r: &ModeResult) -> String {
    let mut s = format!(
        "{}: peak {:.3} kWh, community cost {:.2}, {} voltage violations",
        r.mode,
        r.peak_grid_energy(),
        r.community_cost,
        r.voltage_violations.len()
    );
    if let Some(w) = r.revenue {
        s += &format!(", revenue {w:.2}");
    }
    s
}

fn run(
    config: &Path,
    modes: &[Mode],
    out: &Path,
    seed: Option<u64>,
    probes: Option<usize>,
    jobs: usize,
) -> Result<(), Failure> {
    let (cfg, base) = load_config(config, seed, probes)?;
    let inputs = start_run("run", config, &cfg, &base, modes, out)?;
    let sc = cfg.scenario(&base).map_err(config_failure)?;
    recheck_inputs(config, &cfg, &base, &inputs)?;
    let mut worst: Option<Failure> = None;
    let mut note = |f: Failure| {
        eprintln!("{f}");
        if worst.as_ref().is_none_or(|w| f.code > w.code) {
            worst = Some(f);
        }
    };
    for (mode, res) in modes.iter().zip(run_modes(&sc, modes, jobs.max(1))) {
        match res {
            Ok(r) => {
                write_result(out, &r)?;
                println!("{}", describe(&r));
                if !r.certificates_clean() {
                    note(Failure::new(
                        Code::Certificate,
                        format!("{mode}: certificates are not clean"),
                    ));
                }
            }
            Err(e) => note(Failure::new(scenario_code(&e), format!("{mode}: {e}"))),
        }
    }
    worst.map_or(Ok(()), Err)
}

fn read_run(dir: &Path) -> Result<(RunManifest, Vec<ModeResult>), Failure> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Failure::new(Code::Parse, format!("{}: {e}", path.display())))?;
    for input in &manifest.inputs {
        match sha256_file(Path::new(&input.path)) {
            Ok(d) if d != input.sha256 => eprintln!(
                "warning: {} changed since {} was written",
                input.path,
                path.display()
            ),
            Err(_) => eprintln!("warning: {} is no longer readable", input.path),
            _ => {}
        }
    }
    let mut results = Vec::new();
    for mode in &manifest.modes {
        let path = dir.join(format!("{}.json", mode.name()));
        let Ok(text) = fs::read_to_string(&path) else {
            continue;
        };
        results.push(
            serde_json::from_str(&text)
                .map_err(|e| Failure::new(Code::Parse, format!("{}: {e}", path.display())))?,
        );
    }
    Ok((manifest, results))
}

fn write_report(out: &Path, report: &ComparisonReport) -> Result<(), Failure> {
    write(out, "comparison.json", &to_json(report))?;
    write(out, "summary.csv", &summary_csv(report))?;
    write(out, "voltage_quantiles.csv", &voltage_quantiles_csv(report))
}

fn compare_dirs(dirs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let mut results = Vec::new();
    let mut version: Option<String> = None;
    for dir in dirs {
        let (manifest, rs) = read_run(dir)?;
        if version.get_or_insert_with(|| manifest.version.clone()) != &manifest.version {
            return Err(Failure::new(
                Code::Incompatible,
                format!(
                    "{} was written by version {}",
                    dir.display(),
                    manifest.version
                ),
            ));
        }
        if rs.is_empty() {
            return Err(Failure::new(
                Code::Incompatible,
                format!("{} holds no results", dir.display()),
            ));
        }
        results.extend(rs);
    }
    let report = compare(&results).map_err(|e| Failure::new(scenario_code(&e), e.to_string()))?;
    create_dir(out)?;
    write_report(out, &report)?;
    print!("{}", summary_csv(&report));
    Ok(())
}

fn sweep(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    probes: Option<usize>,
    jobs: usize,
) -> Result<(), Failure> {
    let (cfg, base) = load_config(config, seed, probes)?;
    let inputs = start_run("sweep-seasons", config, &cfg, &base, &Mode::ALL, out)?;
    let scenarios = cfg.season_scenarios(&base).map_err(config_failure)?;
    recheck_inputs(config, &cfg, &base, &inputs)?;
    let report = seasonal_sweep(&scenarios, jobs.max(1))
        .map_err(|e| Failure::new(scenario_code(&e), e.to_string()))?;
    write(out, "sweep.json", &to_json(&report))?;
    write(out, "normalized.csv", &normalized_csv(&report))?;
    write(out, "season_voltages.csv", &season_voltage_csv(&report))?;
    for s in &report.seasons {
        write(
            out,
            &format!("{}_summary.csv", s.season.name()),
            &summary_csv(&s.report),
        )?;
    }
    print!("{}", normalized_csv(&report));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Validate {
            config,
            feeder,
            profiles,
            user_map,
        } => validate(
            config,
            feeder.as_deref(),
            profiles.as_deref().zip(user_map.as_deref()),
        ),
        Command::Run {
            config,
            mode,
            out,
            seed,
            probes,
            jobs,
        } => run(config, mode, out, *seed, *probes, *jobs),
        Command::Compare { dirs, out } => compare_dirs(dirs, out),
        Command::SweepSeasons {
            config,
            out,
            seed,
            probes,
            jobs,
        } => sweep(config, out, *seed, *probes, *jobs),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
