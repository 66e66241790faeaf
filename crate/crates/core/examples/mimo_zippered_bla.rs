//! Two-port S-parameter BLA from a main multisine at the source and an
//! interleaved tickler at the load. The tickler SIMO is interpolated onto
//! the main grid before the two columns are combined.

use bladca::blaest::{estimate_mimo, MimoConfig};
use bladca::dca::wave_signals;
use bladca::excitation::{design_multisine, design_tickler, MultisineKind};
use bladca::netmodel::{Frf, Network, PortBlock, PortNetwork, StaticMap, SubCircuit};
use bladca::solver::{run_experiment, Site, SolverConfig};
use bladca::spectra::{BinLabel, FrequencyGrid};
use num_complex::Complex64 as C;

fn main() -> bladca::Result<()> {
    let s = [[C::new(0.3, 0.1), C::new(0.1, 0.0)], [C::new(2.0, -0.5), C::new(0.0, 0.2)]];
    let frf = s.iter().map(|r| r.iter().map(|&x| Frf::Constant(x)).collect()).collect();
    let block = PortBlock::new(frf, vec![StaticMap::identity(), StaticMap::cubic(-0.02)])?;
    let grid = FrequencyGrid::uniform(1.0, (1..=20).collect(), BinLabel::Excited)?;
    let net = PortNetwork::matched_chain(grid, vec![SubCircuit::nonlinear("amp", block)], 50.0)?;

    let main = design_multisine(1.0, 1.0, 20.0, 2.0, MultisineKind::Full, 1)?;
    let tick = design_tickler(&main, 0.25, 0.02, 2)?;
    let recs = run_experiment(
        &Network::Port(net.clone()),
        &main,
        &[(tick, Site::CurrentAtLoad)],
        400,
        3,
        &SolverConfig::default(),
    )?;
    let (b, a) = wave_signals(&net);
    let est = estimate_mimo(&recs, &b, &a, &MimoConfig::default())?;

    println!("{:>4} {:>22} {:>22} {:>22} {:>22}", "bin", "S11", "S12", "S21", "S22");
    for k in (0..est.grid.len()).step_by(4) {
        let m = &est.s[k];
        let cell = |i: usize, j: usize| {
            format!("{:+.3}{:+.3}j ±{:.0e}", m[(i, j)].re, m[(i, j)].im, est.variance(i, j)[k].sqrt())
        };
        println!("{:>4} {:>22} {:>22} {:>22} {:>22}", est.grid.bins()[k], cell(0, 0), cell(0, 1), cell(1, 0), cell(1, 1));
    }
    println!("small-signal S: {s:?}");
    println!("worst condition number {:.1}", est.cond.iter().copied().fold(0.0, f64::max));
    Ok(())
}
