//! Command-line pipeline: `design`, `simulate`, `estimate`, `dca`,
//! `validate` and `report`.
//!
//! Every stage reads and writes files, so stages can be re-run on their own.
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 realization
//! budget not attained.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::archive::{self, read_records, write_hashed, write_records, Manifest, RunInfo};
use crate::blaest::{estimate_mimo, realization_budget, MimoBlaEstimate, MimoConfig, SisoBlaEstimate};
use crate::dca::{
    aggregate, analyze_siso, analyze_wave, groups_by_label, siso_labels, smallsignal_set, smallsignal_validity,
    wave_labels, wave_signals, Analysis, ContributionReport, SourceLabel, DEFAULT_VALIDITY_FACTOR,
};
use crate::error::{Error, Result};
use crate::excitation::{design, design_tickler, DesignRequest, MultisineSpec};
use crate::netmodel::{Network, PortNetwork};
use crate::solver::{run_realizations, Site, SolveMode, SolverConfig, SteadyStateRecord};

/// Environment variable naming the default solver config file.
pub const CONFIG_ENV: &str = "BLADCA_CONFIG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_BUDGET: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "bladca", version, about = "BLA estimation and distortion contribution analysis")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Design a multisine from a request file, or a tickler from a main spec.
    Design(DesignArgs),
    /// Simulate steady-state records for a set of realizations.
    #[command(alias = "run")]
    Simulate(SimulateArgs),
    /// Estimate BLAs from records.
    Estimate(EstimateArgs),
    /// Distortion contribution analysis of records.
    Dca(DcaArgs),
    /// Compare small-signal predictions with the estimated BLAs.
    Validate(ValidateArgs),
    /// Render a saved contribution report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    /// Design request (TOML).
    pub request: Option<PathBuf>,
    /// Design a tickler interleaved with this main spec.
    #[arg(long, requires = "offset_hz", conflicts_with = "request")]
    pub tickler_of: Option<PathBuf>,
    #[arg(long)]
    pub offset_hz: Option<f64>,
    /// Tickler RMS.
    #[arg(long)]
    pub rms: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Freq,
    Time,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Solver config (TOML); defaults to the file named by BLADCA_CONFIG.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub ts: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub netlist: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    /// Number of realizations.
    #[arg(short = 'm', long = "realizations")]
    pub m: usize,
    /// Extra excitation: `spec.toml[@load|@source-current|@source-voltage]`.
    #[arg(long)]
    pub tickler: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep adding realizations until every BLA sigma is below this value.
    #[arg(long)]
    pub target_sigma: Option<f64>,
    /// Upper bound on realizations when a target sigma is set.
    #[arg(long)]
    pub max_m: Option<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub netlist: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Txt,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupBy {
    /// One contribution per distortion source.
    Source,
    /// One per block or sub-circuit.
    Subcircuit,
    /// By name prefix before the first `.`.
    Stage,
}

#[derive(Debug, Args)]
pub struct DcaArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub netlist: PathBuf,
    /// BLAs from `estimate`; estimated from the records when absent.
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    /// Use the small-signal S of every sub-circuit as its BLA.
    #[arg(long)]
    pub small_signal: bool,
    /// Pin an S entry to its small-signal value, e.g. `amp:12`.
    #[arg(long = "override")]
    pub overrides: Vec<String>,
    #[arg(long, value_enum)]
    pub group_by: Option<GroupBy>,
    /// With stage grouping, list the members of a stage separately:
    /// `stage1:split`.
    #[arg(long)]
    pub hierarchy: Vec<String>,
    #[arg(long, value_enum, default_value = "txt")]
    pub format: Format,
    #[arg(long)]
    pub percent: bool,
    /// Report file (JSON).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub netlist: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VALIDITY_FACTOR)]
    pub factor: f64,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub report: PathBuf,
    #[arg(long, value_enum, default_value = "txt")]
    pub format: Format,
    #[arg(long)]
    pub percent: bool,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// Saved BLA estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "view", rename_all = "snake_case")]
pub enum EstimateFile {
    Siso { blas: Vec<SisoBlaEstimate> },
    Wave { blas: Vec<MimoBlaEstimate> },
}

/// Map an error onto an exit code.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() || matches!(e, Error::Structural(m) if m.contains("singular")) {
        EXIT_NUMERICAL
    } else {
        EXIT_INVALID
    }
}

/// Run the CLI on `args` and return the exit code. Messages go to stdout
/// and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        // a global pool can only be built once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Design(a) => cmd_design(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Dca(a) => cmd_dca(&a),
        Command::Validate(a) => cmd_validate(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_spec(path: &Path) -> Result<MultisineSpec> {
    MultisineSpec::from_toml(&read_text(path)?).map_err(|e| locate(e, path))
}

fn locate(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { location, message } => Error::parse(format!("{}: {location}", path.display()), message),
        other => other,
    }
}

pub fn cmd_design(a: &DesignArgs) -> Result<i32> {
    let spec = match (&a.request, &a.tickler_of) {
        (_, Some(main)) => {
            let main = read_spec(main)?;
            let rms = a.rms.ok_or_else(|| Error::domain("--rms is required for a tickler"))?;
            design_tickler(&main, a.offset_hz.expect("clap requires it"), rms, a.seed.unwrap_or(0))?
        }
        (Some(req), None) => {
            let mut r = DesignRequest::read(req)?;
            if let Some(s) = a.seed {
                r.seed = s;
            }
            design(&r)?
        }
        (None, None) => return Err(Error::domain("a request file or --tickler-of is required")),
    };
    let hash = write_hashed(&a.out, &spec.to_toml())?;
    println!(
        "{} lines ({} excited), rms {:.6}, sha256 {hash}",
        spec.grid().len(),
        spec.excited_count(),
        spec.rms()
    );
    Ok(EXIT_OK)
}

/// Solver settings from the config file (flag or environment) and flags.
pub fn solver_config(a: &SolverArgs) -> Result<SolverConfig> {
    let path = a.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => {
            let text = read_text(&p)?;
            toml::from_str(&text).map_err(|e| locate(crate::excitation::toml_error(&text, &e), &p))?
        }
        None => SolverConfig::default(),
    };
    if let Some(t) = a.tol {
        cfg.tol = t;
    }
    if let Some(m) = a.max_iter {
        cfg.max_iter = m;
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Freq => SolveMode::Freq,
            ModeArg::Time => SolveMode::Time,
        };
    }
    if a.ts.is_some() {
        cfg.ts = a.ts;
    }
    Ok(cfg)
}

fn parse_site(s: &str) -> Result<Site> {
    Ok(match s {
        "load" | "current-at-load" => Site::CurrentAtLoad,
        "source-current" | "current-at-source" => Site::CurrentAtSource,
        "source-voltage" | "voltage-at-source" => Site::VoltageAtSource,
        other => return Err(Error::domain(format!("unknown excitation site {other}"))),
    })
}

fn parse_tickler(arg: &str) -> Result<(PathBuf, Site)> {
    match arg.rsplit_once('@') {
        Some((p, site)) => Ok((PathBuf::from(p), parse_site(site)?)),
        None => Ok((PathBuf::from(arg), Site::CurrentAtLoad)),
    }
}

/// Worst BLA standard deviation over all blocks (SISO) or waves (port view).
fn worst_sigma(net: &Network, records: &[SteadyStateRecord]) -> Result<f64> {
    match net {
        Network::Siso(n) => {
            let a = analyze_siso(n, records)?;
            let crate::dca::BlaSet::Siso(v) = &a.bla else { unreachable!() };
            Ok(v.iter().map(|e| e.max_sigma()).fold(0.0, f64::max))
        }
        Network::Port(p) => {
            let (b, a) = wave_signals(p);
            let simo = crate::blaest::estimate_simo(records, 0, &b, &a)?;
            Ok(simo
                .cz
                .iter()
                .flat_map(|c| (0..c.nrows()).map(move |i| c[(i, i)].re.sqrt()))
                .fold(0.0, f64::max))
        }
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let net = Network::read(&a.netlist)?;
    let spec = read_spec(&a.spec)?;
    let cfg = solver_config(&a.solver)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("netlist".to_string(), archive::hash_file(&a.netlist)?);
    inputs.insert("spec".to_string(), archive::hash_file(&a.spec)?);
    let mut ticklers = Vec::new();
    for (i, t) in a.tickler.iter().enumerate() {
        let (path, site) = parse_tickler(t)?;
        inputs.insert(format!("tickler{}", i + 1), archive::hash_file(&path)?);
        ticklers.push((read_spec(&path)?, site));
    }
    if a.m == 0 {
        return Err(Error::domain("at least one realization is required (-m)"));
    }
    let mut records: Vec<SteadyStateRecord> = Vec::new();
    let mut code = EXIT_OK;
    if let Some(target) = a.target_sigma {
        let max_m = a.max_m.unwrap_or(64 * a.m);
        let outcome = realization_budget(
            |m| {
                let more = run_realizations(&net, &spec, &ticklers, records.len()..m, a.seed, &cfg)?;
                records.extend(more);
                worst_sigma(&net, &records)
            },
            target,
            a.m,
            max_m,
        )?;
        println!(
            "budget: M = {}, worst sigma {:.3e}, target {target:.3e} {}",
            outcome.m_used,
            outcome.sigma,
            if outcome.attained { "attained" } else { "NOT attained" }
        );
        if !outcome.attained {
            code = EXIT_BUDGET;
        }
    } else {
        records = run_realizations(&net, &spec, &ticklers, 0..a.m, a.seed, &cfg)?;
    }
    let info = RunInfo {
        seed: a.seed,
        inputs,
        config: serde_json::to_value(&cfg).expect("config serializes"),
        keep_bins: net.analysis_grid().bins().last().map(|k| k + 1),
    };
    let man = write_records(&a.out, &records, &info)?;
    let worst = man.diagnostics.iter().map(|d| d.residual).fold(0.0, f64::max);
    println!(
        "{} realizations written to {} (max residual {worst:.2e}, manifest sha256 {})",
        man.m_count,
        a.out.display(),
        man.hash()
    );
    Ok(code)
}

fn load(records: &Path, netlist: &Path) -> Result<(Network, Vec<SteadyStateRecord>, Manifest)> {
    let net = Network::read(netlist)?;
    let (recs, man) = read_records(records)?;
    if let Some(h) = man.inputs.get("netlist") {
        if *h != archive::hash_file(netlist)? {
            eprintln!("warning: {} differs from the netlist the records were simulated with", netlist.display());
        }
    }
    Ok((net, recs, man))
}

fn mimo_blas(net: &PortNetwork, records: &[SteadyStateRecord]) -> Result<Vec<MimoBlaEstimate>> {
    let (b, a) = wave_signals(net);
    net.port_offsets()
        .iter()
        .zip(net.subcircuits())
        .map(|(&off, sc)| {
            let p = sc.ports();
            let mut e = estimate_mimo(records, &b[off..off + p], &a[off..off + p], &MimoConfig::default())?;
            e.provenance.source = format!("{}: {}", sc.name, e.provenance.source);
            Ok(e)
        })
        .collect()
}

const COND_WARNING: f64 = 1e6;

fn warn_conditioning(blas: &[MimoBlaEstimate]) {
    for e in blas {
        let worst = e.cond.iter().copied().fold(0.0, f64::max);
        if worst > COND_WARNING {
            eprintln!(
                "warning: {}: reference matrix condition number reaches {worst:.1e}; \
                 the excitations may not be independent at every port",
                e.provenance.source
            );
        }
    }
}

fn stamp(p: &mut crate::blaest::Provenance, man: &Manifest) {
    p.record_hashes = vec![man.hash()];
    p.seeds = vec![man.seed];
}

pub fn cmd_estimate(a: &EstimateArgs) -> Result<i32> {
    let (net, recs, man) = load(&a.records, &a.netlist)?;
    let file = match &net {
        Network::Siso(n) => {
            let an = analyze_siso(n, &recs)?;
            let crate::dca::BlaSet::Siso(mut v) = an.bla else { unreachable!() };
            for e in &mut v {
                stamp(&mut e.provenance, &man);
            }
            EstimateFile::Siso { blas: v }
        }
        Network::Port(p) => {
            let mut v = mimo_blas(p, &recs)?;
            warn_conditioning(&v);
            for e in &mut v {
                stamp(&mut e.provenance, &man);
            }
            EstimateFile::Wave { blas: v }
        }
    };
    let text = serde_json::to_string_pretty(&file).expect("estimates serialize") + "\n";
    let hash = write_hashed(&a.out, &text)?;
    let flagged = match &file {
        EstimateFile::Siso { blas } => blas.iter().map(|e| e.flagged.iter().filter(|f| **f).count()).sum::<usize>(),
        EstimateFile::Wave { blas } => blas.iter().map(|e| e.flagged.iter().filter(|f| **f).count()).sum(),
    };
    println!("estimates written to {} ({flagged} flagged bins, sha256 {hash})", a.out.display());
    Ok(EXIT_OK)
}

/// Parse `name:ij` (1-based port indices).
fn parse_override(s: &str) -> Result<(String, usize, usize)> {
    let bad = || Error::domain(format!("override {s} is not of the form name:ij"));
    let (name, ij) = s.rsplit_once(':').ok_or_else(bad)?;
    let d: Vec<usize> = ij.chars().map(|c| c.to_digit(10).map(|x| x as usize)).collect::<Option<_>>().ok_or_else(bad)?;
    match d.as_slice() {
        [i, j] if *i > 0 && *j > 0 => Ok((name.to_string(), i - 1, j - 1)),
        _ => Err(bad()),
    }
}

fn stage_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Groups for the requested aggregation.
pub fn grouping(labels: &[SourceLabel], by: GroupBy, split: &[String]) -> Vec<(String, Vec<usize>)> {
    match by {
        GroupBy::Source => labels.iter().enumerate().map(|(i, l)| (l.name.clone(), vec![i])).collect(),
        GroupBy::Subcircuit => groups_by_label(labels),
        GroupBy::Stage => {
            let staged: Vec<SourceLabel> = labels
                .iter()
                .map(|l| {
                    let st = stage_of(&l.group);
                    SourceLabel {
                        name: l.name.clone(),
                        group: if split.iter().any(|s| s == st) { l.group.clone() } else { st.to_string() },
                    }
                })
                .collect();
            groups_by_label(&staged)
        }
    }
}

fn parse_hierarchy(items: &[String]) -> Result<Vec<String>> {
    items
        .iter()
        .map(|h| match h.rsplit_once(':') {
            Some((name, "split")) => Ok(name.to_string()),
            _ => Err(Error::domain(format!("hierarchy entry {h} is not of the form stage:split"))),
        })
        .collect()
}

pub fn run_dca(a: &DcaArgs) -> Result<(Analysis, ContributionReport)> {
    let (net, recs, man) = load(&a.records, &a.netlist)?;
    let split = parse_hierarchy(&a.hierarchy)?;
    let (mut analysis, labels) = match &net {
        Network::Siso(n) => {
            if a.small_signal || !a.overrides.is_empty() {
                return Err(Error::domain("--small-signal and --override apply to port networks"));
            }
            (analyze_siso(n, &recs)?, siso_labels(n))
        }
        Network::Port(p) => {
            let mut blas = if let Some(path) = &a.estimates {
                let text = read_text(path)?;
                match serde_json::from_str::<EstimateFile>(&text)
                    .map_err(|e| Error::parse(format!("{}: line {}", path.display(), e.line()), e.to_string()))?
                {
                    EstimateFile::Wave { blas } => blas,
                    EstimateFile::Siso { .. } => return Err(Error::structural("SISO estimates for a port network")),
                }
            } else if a.small_signal {
                smallsignal_set(p, &recs[0].reference(0)?.grid().with_label(crate::spectra::BinLabel::Excited))?
            } else {
                mimo_blas(p, &recs)?
            };
            for o in &a.overrides {
                let (name, i, j) = parse_override(o)?;
                let n = p
                    .subcircuits()
                    .iter()
                    .position(|s| s.name == name)
                    .ok_or_else(|| Error::domain(format!("no sub-circuit named {name}")))?;
                let sc = &p.subcircuits()[n];
                let vals: Vec<_> = blas[n].grid.frequencies().iter().map(|&f| sc.small_signal(f)).collect();
                let vals: Vec<_> = vals
                    .iter()
                    .map(|m| m.get((i, j)).copied().ok_or_else(|| Error::domain(format!("{o}: no such S entry"))))
                    .collect::<Result<_>>()?;
                blas[n].override_entry(i, j, &vals, "small-signal value")?;
            }
            (analyze_wave(p, &recs, blas)?, wave_labels(p))
        }
    };
    stamp(&mut analysis.report.provenance, &man);
    let by = a.group_by.unwrap_or(if split.is_empty() { GroupBy::Source } else { GroupBy::Stage });
    let report = match by {
        GroupBy::Source => analysis.report.clone(),
        _ => aggregate(&analysis.report, &grouping(&labels, by, &split))?,
    };
    Ok((analysis, report))
}

fn render(report: &ContributionReport, format: Format, percent: bool) -> Result<String> {
    Ok(match format {
        Format::Txt => report.to_text(percent),
        Format::Csv => report.to_csv(percent),
        Format::Json => report.to_json()? + "\n",
    })
}

pub fn cmd_dca(a: &DcaArgs) -> Result<i32> {
    let (analysis, report) = run_dca(a)?;
    if let crate::dca::BlaSet::Wave(v) = &analysis.bla {
        warn_conditioning(v);
    }
    if let Some(out) = &a.out {
        write_hashed(out, &(report.to_json()? + "\n"))?;
    }
    let worst_eig = analysis.cd.min_eigenvalue.iter().copied().fold(f64::INFINITY, f64::min);
    print!("{}", render(&report, a.format, a.percent)?);
    eprintln!(
        "{} bins, {} excluded, conservation error {:.1e}, most negative C_D eigenvalue {worst_eig:.2e}",
        report.total.len(),
        report.excluded.len(),
        report.conservation_error()
    );
    Ok(EXIT_OK)
}

pub fn cmd_validate(a: &ValidateArgs) -> Result<i32> {
    let (net, recs, _) = load(&a.records, &a.netlist)?;
    let p = net
        .as_port()
        .ok_or_else(|| Error::domain("the small-signal test applies to port networks"))?;
    let grid = recs
        .first()
        .ok_or_else(|| Error::domain("no records"))?
        .reference(0)?
        .grid()
        .with_label(crate::spectra::BinLabel::Excited);
    let v = smallsignal_validity(p, &smallsignal_set(p, &grid)?, &recs, a.factor)?;
    if let Some(out) = &a.out {
        write_hashed(out, &(serde_json::to_string_pretty(&v).expect("verdict serializes") + "\n"))?;
    }
    let invalid: Vec<u64> = v
        .valid
        .iter()
        .zip(v.grid.bins())
        .filter(|(ok, _)| !**ok)
        .map(|(_, k)| *k)
        .collect();
    println!(
        "small-signal S valid on {:.1}% of {} bins (factor {})",
        100.0 * v.valid_fraction(),
        v.valid.len(),
        a.factor
    );
    if !invalid.is_empty() {
        println!("invalid bins: {invalid:?}");
    }
    Ok(EXIT_OK)
}

pub fn cmd_report(a: &ReportArgs) -> Result<i32> {
    let report = ContributionReport::from_json(&read_text(&a.report)?).map_err(|e| locate(e, &a.report))?;
    let text = render(&report, a.format, a.percent)?;
    match &a.out {
        Some(p) => {
            write_hashed(p, &text)?;
        }
        None => print!("{text}"),
    }
    Ok(EXIT_OK)
}
