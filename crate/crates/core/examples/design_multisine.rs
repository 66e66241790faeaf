//! Multisine design: full, odd and random-odd grids plus an interleaved
//! tickler, with the crest factor of one realization each.

use bladca::excitation::{check_disjoint, design_multisine, design_tickler, draw_realizations, MultisineKind};

fn crest(x: &[f64]) -> f64 {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    x.iter().fold(0.0f64, |m, v| m.max(v.abs())) / rms
}

fn main() -> bladca::Result<()> {
    for kind in [MultisineKind::Full, MultisineKind::Odd, MultisineKind::RandomOdd] {
        let spec = design_multisine(1.0, 1.0, 64.0, 0.5, kind, 7)?;
        let r = &draw_realizations(&spec, 1, 8)?[0];
        let x = r.time_samples(4096);
        println!(
            "{:<10} {:>3} lines, {:>3} excited, {:>2} detection, rms {:.4}, crest factor {:.2}",
            kind.as_str(),
            spec.grid().len(),
            spec.excited_count(),
            spec.detection_grid().len(),
            spec.rms(),
            crest(&x)
        );
    }

    let main = design_multisine(1.0, 1.0, 64.0, 0.5, MultisineKind::Full, 7)?;
    let tick = design_tickler(&main, 0.25, 0.05, 9)?;
    check_disjoint(&[&main, &tick])?;
    let f: Vec<f64> = tick.grid().frequencies().iter().take(4).copied().collect();
    println!("tickler lines start at {f:?} Hz, rms {:.4}", tick.rms());
    println!("{}", main.to_toml().lines().take(6).collect::<Vec<_>>().join("\n"));
    Ok(())
}
