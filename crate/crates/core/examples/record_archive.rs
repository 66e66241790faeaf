//! Write simulated records to a hashed archive and read them back.

use std::collections::BTreeMap;

use bladca::archive::{read_records, write_records, RunInfo};
use bladca::excitation::{design_multisine, MultisineKind};
use bladca::netmodel::{Network, NonlinearBlock, SisoFeedbackNetwork, StaticMap};
use bladca::solver::{run_experiment, SignalId, SolverConfig};
use bladca::spectra::{BinLabel, FrequencyGrid};

fn main() -> bladca::Result<()> {
    let grid = FrequencyGrid::uniform(1.0, (1..=8).collect(), BinLabel::Excited)?;
    let net = SisoFeedbackNetwork::chain(grid, vec![NonlinearBlock::Static(StaticMap::cubic(0.1))], 1.0)?;
    let spec = design_multisine(1.0, 1.0, 8.0, 0.5, MultisineKind::Full, 1)?;
    let config = SolverConfig::default();
    let recs = run_experiment(&Network::Siso(net), &spec, &[], 4, 2, &config)?;

    let dir = std::env::temp_dir().join(format!("bladca-archive-{}", std::process::id()));
    let info = RunInfo {
        seed: 2,
        inputs: BTreeMap::new(),
        config: serde_json::to_value(&config).expect("config serializes"),
        keep_bins: Some(9),
    };
    let man = write_records(&dir, &recs, &info)?;
    println!("wrote {} realizations to {}", man.m_count, dir.display());
    for (file, sha) in man.files.iter().take(4) {
        println!("  {file:<28} {}", &sha[..16]);
    }
    let (back, man2) = read_records(&dir)?;
    let a = recs[0].signal(SignalId::Output)?;
    let b = back[0].signal(SignalId::Output)?;
    println!("manifest hash {} (re-read {})", &man.hash()[..16], &man2.hash()[..16]);
    println!("output bins 1..8 identical after round trip: {}", a[..9] == b[..9]);
    std::fs::remove_dir_all(&dir).map_err(|e| bladca::Error::io(&dir, e))?;
    Ok(())
}
