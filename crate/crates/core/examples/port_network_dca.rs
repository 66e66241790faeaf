//! DCA of a three-stage S-parameter cascade with reflecting terminations,
//! reported per port, per sub-circuit and per stage.

use bladca::blaest::{estimate_mimo, MimoConfig};
use bladca::cli::{grouping, GroupBy};
use bladca::dca::{aggregate, analyze_wave, wave_labels, wave_signals};
use bladca::excitation::{design_multisine, design_tickler, MultisineKind};
use bladca::netmodel::Network;
use bladca::solver::{run_experiment, Site, SolverConfig};

const NETLIST: &str = r#"
view = "port"
z0 = 50.0

[analysis_grid]
f0_hz = 1.0
kmin = 1
kmax = 16

[[subcircuits]]
name = "pre.a"
block = { kind = "port_block", s = [[0.1, 0.3], [1.5, 0.05]], maps = [{ kind = "polynomial", coeffs = [1.0] }, { kind = "polynomial", coeffs = [1.0, 0.0, -0.3] }] }

[[subcircuits]]
name = "pre.b"
block = { kind = "port_block", s = [[0.05, 0.25], [1.2, 0.1]], maps = [{ kind = "polynomial", coeffs = [1.0, 0.0, -0.2] }, { kind = "polynomial", coeffs = [1.0, 0.0, -0.1] }] }

[[subcircuits]]
name = "final"
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

fn main() -> bladca::Result<()> {
    let net = Network::from_toml(NETLIST, None)?;
    let p = net.as_port().expect("port view");
    let main = design_multisine(1.0, 1.0, 16.0, 0.5, MultisineKind::Full, 1)?;
    let tick = design_tickler(&main, 0.25, 0.05, 2)?;
    let recs = run_experiment(&net, &main, &[(tick, Site::CurrentAtLoad)], 100, 3, &SolverConfig::default())?;

    let (b, a) = wave_signals(p);
    let mut blas = Vec::new();
    for (&off, sc) in p.port_offsets().iter().zip(p.subcircuits()) {
        let n = sc.ports();
        blas.push(estimate_mimo(&recs, &b[off..off + n], &a[off..off + n], &MimoConfig::default())?);
    }
    let report = analyze_wave(p, &recs, blas)?.report;
    let labels = wave_labels(p);
    println!("per port, conservation error {:.1e}", report.conservation_error());
    print!("{}", report.to_text(true).lines().take(16).collect::<Vec<_>>().join("\n"));
    println!();
    for by in [GroupBy::Subcircuit, GroupBy::Stage] {
        let g = aggregate(&report, &grouping(&labels, by, &[]))?;
        println!("\n{by:?}");
        print!("{}", g.to_text(true).lines().take(6).collect::<Vec<_>>().join("\n"));
        println!();
    }
    let split = aggregate(&report, &grouping(&labels, GroupBy::Stage, &["pre".into()]))?;
    println!("\nstages with pre split: {:?}", split.labels);
    Ok(())
}
