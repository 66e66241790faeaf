//! Whether the small-signal S of a two-port still predicts its BLA: a weak
//! cubic passes, hard saturation fails.

use bladca::dca::{smallsignal_set, smallsignal_validity, DEFAULT_VALIDITY_FACTOR};
use bladca::excitation::{design_multisine, MultisineKind};
use bladca::netmodel::{Frf, Network, PortBlock, PortNetwork, StaticMap, SubCircuit};
use bladca::solver::{run_experiment, SolverConfig};
use bladca::spectra::{BinLabel, FrequencyGrid};
use num_complex::Complex64 as C;

fn main() -> bladca::Result<()> {
    let grid = FrequencyGrid::uniform(1.0, (1..=40).collect(), BinLabel::Excited)?;
    let spec = design_multisine(1.0, 1.0, 40.0, 50f64.sqrt(), MultisineKind::Full, 30)?;
    let s = [[C::new(0.3, 0.1), C::new(0.1, 0.0)], [C::new(2.0, -0.5), C::new(0.0, 0.2)]];
    for (name, map) in [
        ("weak cubic", StaticMap::cubic(0.03)),
        ("hard saturation", StaticMap::Saturation { limit: 0.3 }),
    ] {
        let frf = s.iter().map(|r| r.iter().map(|&x| Frf::Constant(x)).collect()).collect();
        let block = PortBlock::new(frf, vec![StaticMap::identity(), map])?;
        let net = PortNetwork::matched_chain(grid.clone(), vec![SubCircuit::nonlinear("dut", block)], 50.0)?;
        let recs = run_experiment(&Network::Port(net.clone()), &spec, &[], 200, 31, &SolverConfig::default())?;
        let v = smallsignal_validity(&net, &smallsignal_set(&net, spec.grid())?, &recs, DEFAULT_VALIDITY_FACTOR)?;
        let mut ratio = v.worst_ratio.clone();
        ratio.sort_by(f64::total_cmp);
        println!(
            "{name:<16} valid on {:>5.1}% of bins, median ratio {:.2} (factor {})",
            100.0 * v.valid_fraction(),
            ratio[ratio.len() / 2],
            v.factor
        );
    }
    Ok(())
}
