use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bladca::archive::{read_records, Manifest};
use bladca::blaest::{estimate_mimo, MimoConfig};
use bladca::dca::{analyze_siso, analyze_wave, wave_signals, ContributionReport};
use bladca::excitation::{design_tickler, DesignRequest, MultisineSpec};
use bladca::netmodel::Network;
use bladca::solver::{run_experiment, Site, SolverConfig};

const REQUEST: &str = r#"
f0_hz = 1.0
fmin_hz = 1.0
fmax_hz = 10.0
kind = "full"
rms = 0.3
"#;

const AMP: &str = r#"
view = "port"
z0 = 50.0

[analysis_grid]
f0_hz = 1.0
kmin = 1
kmax = 10

[[subcircuits]]
name = "amp"
block = { kind = "port_block", s = [[0.1, 0.0], [2.0, 0.0]], maps = [{ kind = "polynomial", coeffs = [1.0] }, { kind = "polynomial", coeffs = [1.0, 0.0, -0.05] }] }

[package]
s = [[0, 0, 1, 0], [0, 0, 0, 1], [1, 0, 0, 0], [0, 1, 0, 0]]

[terminations]
gamma_in = 0.2
gamma_out = 0.1
"#;

const CASCADE: &str = r#"
view = "port"
z0 = 50.0

[analysis_grid]
f0_hz = 1.0
kmin = 1
kmax = 10

[[subcircuits]]
name = "s1.a"
block = { kind = "port_block", s = [[0.1, 0.3], [1.5, 0.05]], maps = [{ kind = "polynomial", coeffs = [1.0] }, { kind = "polynomial", coeffs = [1.0, 0.0, -0.3] }] }

[[subcircuits]]
name = "s1.b"
block = { kind = "port_block", s = [[0.05, 0.25], [1.2, 0.1]], maps = [{ kind = "polynomial", coeffs = [1.0, 0.0, -0.2] }, { kind = "polynomial", coeffs = [1.0, 0.0, -0.1] }] }

[[subcircuits]]
name = "s2"
block = { kind = "port_block", s = [[0.0, 0.2], [2.0, 0.1]], maps = [{ kind = "polynomial", coeffs = [1.0] }, { kind = "polynomial", coeffs = [1.0, 0.0, -0.1] }] }

[package]
s = [
  [0, 0, 1, 0, 0, 0, 0, 0],
  [0, 0, 0, 0, 0, 0, 0, 1],
  [1, 0, 0, 0, 0, 0, 0, 0],
  [0, 0, 0, 0, 1, 0, 0, 0],
  [0, 0, 0, 1, 0, 0, 0, 0],
  [0, 0, 0, 0, 0, 0, 1, 0],
  [0, 0, 0, 0, 0, 1, 0, 0],
  [0, 1, 0, 0, 0, 0, 0, 0],
]

[terminations]
gamma_in = 0.1
gamma_out = 0.2
"#;

const CASCADE_SISO: &str = r#"
view = "siso"

[analysis_grid]
f0_hz = 1.0
kmin = 1
kmax = 20

[[blocks]]
name = "exp"
kind = "exp"
gain = 1.0

[[blocks]]
name = "log"
kind = "log"
gain = 1.0

[siso]
a = [1.0, 0.0]
m = [[0.0, 0.0], [-1.0, 0.0]]
b = [0.0, 1.0]
"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        f.write("req.toml", REQUEST);
        f.write("amp.toml", AMP);
        f.write("cascade.toml", CASCADE);
        f.write("siso.toml", CASCADE_SISO);
        f.write("solver.toml", "order_factor = 8\n");
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) {
        fs::write(self.path(name), text).unwrap();
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bladca"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("BLADCA_CONFIG")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// Design, tickler and records for the given netlist.
    fn simulate(&self, netlist: &str, out: &str, m: &str, seed: &str) {
        self.ok(&["design", "req.toml", "-o", "main.toml", "--seed", "3"]);
        self.ok(&["design", "--tickler-of", "main.toml", "--offset-hz", "0.25", "--rms", "0.1", "-o", "t.toml"]);
        self.ok(&[
            "simulate", "--netlist", netlist, "--spec", "main.toml", "--tickler", "t.toml@load", "-m", m, "--seed",
            seed, "-o", out,
        ]);
    }

    fn report(&self, name: &str) -> ContributionReport {
        ContributionReport::from_json(&fs::read_to_string(self.path(name)).unwrap()).unwrap()
    }
}

fn hashes(dir: &Path) -> String {
    let m = Manifest::read(dir).unwrap();
    serde_json::to_string(&m.files).unwrap()
}

#[test]
fn stages_are_deterministic() {
    let f = Fixture::new();
    f.simulate("amp.toml", "a", "12", "5");
    f.simulate("amp.toml", "b", "12", "5");
    assert_eq!(hashes(&f.path("a")), hashes(&f.path("b")));
    assert_eq!(Manifest::read(f.path("a")).unwrap().hash(), Manifest::read(f.path("b")).unwrap().hash());
    f.ok(&["estimate", "--records", "a", "--netlist", "amp.toml", "-o", "ea.json"]);
    f.ok(&["estimate", "--records", "b", "--netlist", "amp.toml", "-o", "eb.json"]);
    assert_eq!(fs::read(f.path("ea.json")).unwrap(), fs::read(f.path("eb.json")).unwrap());
    f.simulate("amp.toml", "c", "12", "6");
    assert_ne!(hashes(&f.path("a")), hashes(&f.path("c")));
}

#[test]
fn thread_count_does_not_change_results() {
    let f = Fixture::new();
    f.simulate("amp.toml", "r", "12", "5");
    f.ok(&["--threads", "1", "dca", "--records", "r", "--netlist", "amp.toml", "-o", "one.json"]);
    f.ok(&["dca", "--records", "r", "--netlist", "amp.toml", "-o", "many.json"]);
    assert_eq!(fs::read(f.path("one.json")).unwrap(), fs::read(f.path("many.json")).unwrap());
}

#[test]
fn staged_pipeline_matches_monolithic_run() {
    let f = Fixture::new();
    f.simulate("amp.toml", "r", "16", "9");
    f.ok(&["estimate", "--records", "r", "--netlist", "amp.toml", "-o", "est.json"]);
    f.ok(&["dca", "--records", "r", "--netlist", "amp.toml", "--estimates", "est.json", "-o", "staged.json"]);
    let staged = f.report("staged.json");

    let net = Network::from_toml(AMP, None).unwrap();
    let p = net.as_port().unwrap();
    let mut req = DesignRequest::from_toml(REQUEST).unwrap();
    req.seed = 3;
    let main = bladca::excitation::design(&req).unwrap();
    let tickler = design_tickler(&main, 0.25, 0.1, 0).unwrap();
    let recs = run_experiment(&net, &main, &[(tickler, Site::CurrentAtLoad)], 16, 9, &SolverConfig::default()).unwrap();
    let (b, a) = wave_signals(p);
    let bla = estimate_mimo(&recs, &b, &a, &MimoConfig::default()).unwrap();
    let mono = analyze_wave(p, &recs, vec![bla]).unwrap().report;

    assert_eq!(staged.grid.bins(), mono.grid.bins());
    let scale = mono.total.iter().copied().fold(0.0, f64::max);
    for b in 0..mono.total.len() {
        assert!((staged.total[b] - mono.total[b]).abs() <= 1e-12 * scale);
        for (x, y) in staged.direct[b].iter().zip(&mono.direct[b]) {
            assert!((x - y).abs() <= 1e-12 * scale);
        }
    }
    assert!(staged.provenance.record_hashes[0] == Manifest::read(f.path("r")).unwrap().hash());
}

#[test]
fn report_stage_reproduces_dca_output() {
    let f = Fixture::new();
    f.simulate("amp.toml", "r", "12", "1");
    let direct = f.ok(&["dca", "--records", "r", "--netlist", "amp.toml", "--format", "csv", "--percent", "-o", "rep.json"]);
    let rendered = f.ok(&["report", "rep.json", "--format", "csv", "--percent"]);
    assert_eq!(direct, rendered);
    let text = f.ok(&["report", "rep.json"]);
    assert!(text.contains("amp:p2"));
}

#[test]
fn grouping_and_hierarchy() {
    let f = Fixture::new();
    f.simulate("cascade.toml", "r", "16", "2");
    f.ok(&["dca", "--records", "r", "--netlist", "cascade.toml", "-o", "src.json"]);
    f.ok(&["dca", "--records", "r", "--netlist", "cascade.toml", "--group-by", "subcircuit", "-o", "sub.json"]);
    f.ok(&["dca", "--records", "r", "--netlist", "cascade.toml", "--group-by", "stage", "-o", "stage.json"]);
    f.ok(&["dca", "--records", "r", "--netlist", "cascade.toml", "--hierarchy", "s1:split", "-o", "split.json"]);
    let src = f.report("src.json");
    let sub = f.report("sub.json");
    let stage = f.report("stage.json");
    let split = f.report("split.json");
    assert_eq!(src.labels.len(), 6);
    assert!(src.excluded.is_empty(), "excluded bins {:?}", src.excluded);
    assert_eq!(src.total.len(), 10);
    assert_eq!(sub.labels, ["s1.a", "s1.b", "s2"]);
    assert_eq!(stage.labels, ["s1", "s2"]);
    assert_eq!(split.labels, sub.labels);
    for r in [&src, &sub, &stage, &split] {
        assert_eq!(r.total, src.total);
        assert!(r.conservation_error() < 1e-12);
    }
    assert!(!stage.tree.is_empty());
}

#[test]
fn override_pins_entry_to_small_signal_value() {
    let f = Fixture::new();
    f.simulate("amp.toml", "r", "12", "4");
    let base = f.ok(&["dca", "--records", "r", "--netlist", "amp.toml", "--format", "json"]);
    let pinned = f.ok(&["dca", "--records", "r", "--netlist", "amp.toml", "--override", "amp:21", "--format", "json"]);
    let small = f.ok(&["dca", "--records", "r", "--netlist", "amp.toml", "--small-signal", "--format", "json"]);
    assert_ne!(base, pinned);
    assert_ne!(pinned, small);
    let r = ContributionReport::from_json(&pinned).unwrap();
    assert!(r.provenance.overrides.iter().any(|o| o.contains("small-signal")));
    let out = f.run(&["dca", "--records", "r", "--netlist", "amp.toml", "--override", "nope:21"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn siso_pipeline_with_config_file() {
    let f = Fixture::new();
    f.write(
        "req.toml",
        "f0_hz = 1.0\nfmin_hz = 1.0\nfmax_hz = 20.0\nkind = \"full\"\nrms = 0.5\n",
    );
    f.ok(&["design", "req.toml", "-o", "main.toml"]);
    f.ok(&[
        "simulate", "--netlist", "siso.toml", "--spec", "main.toml", "-m", "200", "--config", "solver.toml", "-o", "r",
    ]);
    f.ok(&["dca", "--records", "r", "--netlist", "siso.toml", "-o", "rep.json"]);
    let rep = f.report("rep.json");
    assert_eq!(rep.total.len(), 20);
    assert!(rep.excluded.is_empty());
    for b in 0..rep.total.len() {
        let (c1, c2) = (rep.direct[b][0], rep.direct[b][1]);
        assert!(rep.sum(b).abs() < 0.05 * c1.max(c2), "bin {b}: exp/log distortion does not cancel");
    }
    let recs = read_records(f.path("r")).unwrap().0;
    let net = Network::from_toml(CASCADE_SISO, None).unwrap();
    let mono = analyze_siso(net.as_siso().unwrap(), &recs).unwrap().report;
    assert_eq!(mono.total, rep.total);

    let out = Command::new(env!("CARGO_BIN_EXE_bladca"))
        .args(["simulate", "--netlist", "siso.toml", "--spec", "main.toml", "-m", "4", "-o", "env"])
        .current_dir(f.dir.path())
        .env("BLADCA_CONFIG", "solver.toml")
        .output()
        .unwrap();
    assert!(out.status.success());
    let m = Manifest::read(f.path("env")).unwrap();
    assert_eq!(m.config["order_factor"], 8);
}

#[test]
fn validate_reports_fraction() {
    let f = Fixture::new();
    f.simulate("amp.toml", "r", "12", "4");
    let out = f.ok(&["validate", "--records", "r", "--netlist", "amp.toml", "-o", "v.json"]);
    assert!(out.contains("valid on"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("v.json")).unwrap()).unwrap();
    assert_eq!(v["valid"].as_array().unwrap().len(), 10);
}

#[test]
fn missing_f0_names_the_line() {
    let f = Fixture::new();
    f.write("bad.toml", "fmin_hz = 1.0\nfmax_hz = 10.0\nkind = \"full\"\nrms = 0.3\n");
    let out = f.run(&["design", "bad.toml", "-o", "x.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("f0_hz") && err.contains("line"), "{err}");
    assert!(!f.path("x.toml").exists());
}

#[test]
fn invalid_inputs_exit_2() {
    let f = Fixture::new();
    f.ok(&["design", "req.toml", "-o", "main.toml"]);
    let out = f.run(&["simulate", "--netlist", "amp.toml", "--spec", "main.toml", "-m", "0", "-o", "r"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("realization"));
    let out = f.run(&["simulate", "--netlist", "missing.toml", "--spec", "main.toml", "-m", "2", "-o", "r"]);
    assert_eq!(out.status.code(), Some(2));
    let out = f.run(&["dca", "--records", "nowhere", "--netlist", "amp.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let out = f.run(&["simulate", "--netlist", "amp.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tampered_records_are_rejected() {
    let f = Fixture::new();
    f.simulate("amp.toml", "r", "6", "1");
    let m = Manifest::read(f.path("r")).unwrap();
    let file = f.path("r").join(m.signals.values().next().unwrap());
    let text = fs::read_to_string(&file).unwrap();
    fs::write(&file, text.replacen('1', "2", 1)).unwrap();
    let out = f.run(&["estimate", "--records", "r", "--netlist", "amp.toml", "-o", "e.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unmet_budget_exits_4() {
    let f = Fixture::new();
    f.ok(&["design", "req.toml", "-o", "main.toml"]);
    let out = f.run(&[
        "simulate", "--netlist", "amp.toml", "--spec", "main.toml", "-m", "4", "--target-sigma", "1e-12", "--max-m",
        "8", "-o", "r",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(Manifest::read(f.path("r")).unwrap().m_count, 8);
    let out = f.run(&[
        "simulate", "--netlist", "amp.toml", "--spec", "main.toml", "-m", "4", "--target-sigma", "1", "-o", "s",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(Manifest::read(f.path("s")).unwrap().m_count, 4);
}

#[test]
fn spec_roundtrip_through_design() {
    let f = Fixture::new();
    f.ok(&["design", "req.toml", "-o", "main.toml", "--seed", "8"]);
    let spec = MultisineSpec::from_toml(&fs::read_to_string(f.path("main.toml")).unwrap()).unwrap();
    assert_eq!(spec.seed(), 8);
    assert_eq!(spec.excited_count(), 10);
}
