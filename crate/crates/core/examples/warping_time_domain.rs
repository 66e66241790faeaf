//! Time-domain trapezoidal simulation against the harmonic-balance
//! solution, with and without evaluating the FRFs at warped frequencies.

use bladca::excitation::{design_multisine, draw_realizations, MultisineKind};
use bladca::netmodel::{Frf, Network, NonlinearBlock, SisoFeedbackNetwork, StaticMap};
use bladca::solver::{solve_frequency_domain, solve_time_domain, Excitation, SignalId, SolverConfig};
use bladca::spectra::{BinLabel, FrequencyGrid};

fn main() -> bladca::Result<()> {
    let grid = FrequencyGrid::uniform(1.0, (1..=10).collect(), BinLabel::Excited)?;
    let net = Network::Siso(SisoFeedbackNetwork::chain(
        grid,
        vec![NonlinearBlock::LinearFrf(Frf::lowpass(4.0)), NonlinearBlock::Static(StaticMap::cubic(0.2))],
        1.0,
    )?);
    let spec = design_multisine(1.0, 1.0, 10.0, 1.0, MultisineKind::Full, 40)?;
    let r = draw_realizations(&spec, 1, 41)?.remove(0);
    for ts in [0.01, 0.005, 0.0025] {
        let td = solve_time_domain(&net, &r, ts, 6, &SolverConfig::default())?;
        let y_td = td.signal_on(SignalId::Output, spec.grid())?;
        let mismatch = |warp: Option<f64>| -> bladca::Result<f64> {
            let cfg = SolverConfig {
                warp_ts: warp,
                tol: 1e-14,
                ..SolverConfig::default()
            };
            let fd = solve_frequency_domain(&net, &[Excitation::main(r.clone())], &cfg)?;
            let y = fd.signal_on(SignalId::Output, spec.grid())?;
            Ok(y.iter().zip(&y_td).map(|(x, z)| (x - z).norm() / x.norm()).fold(0.0, f64::max))
        };
        println!("ts = {ts:<7} raw mismatch {:.2e}, warped {:.2e}", mismatch(None)?, mismatch(Some(ts))?);
    }
    Ok(())
}
