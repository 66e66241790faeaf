//! BLA of a static cubic under Gaussian-like excitation compared with the
//! Bussgang gain 1 + 3 alpha sigma^2.

use bladca::blaest::{estimate_simo, simo_to_siso};
use bladca::excitation::{design_multisine, MultisineKind};
use bladca::netmodel::{Network, NonlinearBlock, SisoFeedbackNetwork, StaticMap};
use bladca::solver::{run_experiment, SignalId, SolverConfig};
use bladca::spectra::{BinLabel, FrequencyGrid};

fn main() -> bladca::Result<()> {
    let (alpha, rms, lines) = (0.1, 0.5, 200u64);
    let m_count: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let grid = FrequencyGrid::uniform(1.0, (1..=lines).collect(), BinLabel::Excited)?;
    let net = SisoFeedbackNetwork::chain(grid, vec![NonlinearBlock::Static(StaticMap::cubic(alpha))], 1.0)?;
    let spec = design_multisine(1.0, 1.0, lines as f64, rms, MultisineKind::Full, 4)?;
    let recs = run_experiment(&Network::Siso(net), &spec, &[], m_count, 5, &SolverConfig::default())?;
    let simo = estimate_simo(&recs, 0, &[SignalId::Output], &[SignalId::BlockInput(0)])?;
    let g = simo_to_siso(&simo, 0, 0)?;

    let n = g.g.len() as f64;
    let mean = g.g.iter().sum::<num_complex::Complex64>() / n;
    let bussgang = 1.0 + 3.0 * alpha * rms * rms;
    // a finite number of lines lowers every bin by 3/4 alpha |A_k|^2
    let amp2 = 2.0 * rms * rms / n;
    println!("M = {m_count}, {lines} lines, alpha = {alpha}, rms = {rms}");
    println!("mean BLA        {:.5}{:+.5}j", mean.re, mean.im);
    println!("Bussgang gain   {bussgang:.5}");
    println!("finite-line     {:.5}", bussgang - 0.75 * alpha * amp2);
    println!("max sigma       {:.2e}", g.max_sigma());
    Ok(())
}
