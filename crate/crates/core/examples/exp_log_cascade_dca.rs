//! DCA of an exponential followed by its inverse, a logarithm.
//!
//! The cascade is linear, so the two direct contributions cancel against
//! their correlation term although the internal node is heavily distorted.

use bladca::dca::analyze_siso;
use bladca::excitation::{design_multisine, MultisineKind};
use bladca::netmodel::{Network, NonlinearBlock, SisoFeedbackNetwork, StaticMap};
use bladca::solver::{run_experiment, SignalId, SolverConfig};
use bladca::spectra::{BinLabel, FrequencyGrid};

fn main() -> bladca::Result<()> {
    let m_count: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let grid = FrequencyGrid::uniform(1.0, (1..=100).collect(), BinLabel::Excited)?;
    let net = SisoFeedbackNetwork::chain(
        grid,
        vec![
            NonlinearBlock::Static(StaticMap::Exp { gain: 1.0 }),
            NonlinearBlock::Static(StaticMap::Log { gain: 1.0 }),
        ],
        1.0,
    )?;
    let spec = design_multisine(1.0, 1.0, 100.0, 0.5, MultisineKind::Full, 1)?;
    let config = SolverConfig {
        order_factor: 8,
        ..SolverConfig::default()
    };
    let t0 = std::time::Instant::now();
    let recs = run_experiment(&Network::Siso(net.clone()), &spec, &[], m_count, 2, &config)?;
    let solve_time = t0.elapsed();
    let a = analyze_siso(&net, &recs)?;
    let r = &a.report;

    // signal-to-distortion ratio at the node between the blocks
    let g_ri: Vec<_> = a.simo.z.iter().map(|z| z[0]).collect();
    let (mut sig, mut dist) = (0.0, 0.0);
    for rec in &recs {
        let i = rec.signal_on(SignalId::BlockOutput(0), &a.simo.grid)?;
        let rv = rec.reference(0)?;
        for (b, &k) in a.simo.grid.bins().iter().enumerate() {
            let rr = rv.at(k).unwrap();
            sig += (g_ri[b] * rr).norm_sqr();
            dist += (i[b] - g_ri[b] * rr).norm_sqr();
        }
    }
    println!("M = {m_count}, solve time {:.1?}", solve_time);
    println!("SDR at the intermediate node: {:.2} dB", 10.0 * (sig / dist).log10());
    println!("{:>4} {:>12} {:>12} {:>13} {:>12}", "bin", "C[1]", "C[2]", "C[2,1]", "sum");
    for b in (0..r.total.len()).step_by(10) {
        println!(
            "{:>4} {:>12.4e} {:>12.4e} {:>13.4e} {:>12.4e}",
            r.grid.bins()[b],
            r.direct[b][0],
            r.direct[b][1],
            r.correlation[b][0],
            r.sum(b)
        );
    }
    Ok(())
}
