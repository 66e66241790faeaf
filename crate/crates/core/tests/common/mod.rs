#![allow(dead_code)]

use bladca::netmodel::{Frf, NonlinearBlock, PortBlock, PortNetwork, SisoFeedbackNetwork, StaticMap, SubCircuit};
use bladca::spectra::{BinLabel, FrequencyGrid};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type C = Complex64;

pub fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn full_grid(f0: f64, kmax: u64) -> FrequencyGrid {
    FrequencyGrid::uniform(f0, (1..=kmax).collect(), BinLabel::Excited).unwrap()
}

pub fn rand_c(rng: &mut ChaCha8Rng, scale: f64) -> C {
    c(rng.random_range(-scale..scale), rng.random_range(-scale..scale))
}

/// Feedback network of `1..=4` static polynomial blocks with random
/// real and first-order lowpass couplings, redrawn until the small-signal
/// loop is contractive at DC.
pub fn random_siso(rng: &mut ChaCha8Rng, grid: &FrequencyGrid) -> SisoFeedbackNetwork {
    loop {
        let n = rng.random_range(1..=4usize);
        let gains: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let blocks = gains
            .iter()
            .map(|&g| {
                NonlinearBlock::Static(StaticMap::Polynomial(vec![
                    g,
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                ]))
            })
            .collect();
        let mut m_dc = DMatrix::<f64>::zeros(n, n);
        let m: Vec<Vec<Frf>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j || rng.random_bool(0.4) {
                            return Frf::zero();
                        }
                        let k = rng.random_range(-0.4..0.4);
                        m_dc[(i, j)] = k;
                        if rng.random_bool(0.5) {
                            Frf::real(k)
                        } else {
                            let fc = rng.random_range(2.0..30.0);
                            Frf::Rational {
                                num: vec![k],
                                den: vec![1.0, 1.0 / (2.0 * std::f64::consts::PI * fc)],
                            }
                        }
                    })
                    .collect()
            })
            .collect();
        let g = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(gains));
        let loop_gain = (&g * &m_dc).norm();
        if loop_gain > 0.6 {
            continue;
        }
        let a = (0..n).map(|i| Frf::real(if i == 0 { 1.0 } else { rng.random_range(-1.0..1.0) })).collect();
        let b = (0..n).map(|_| Frf::real(rng.random_range(-1.0..1.0))).collect();
        let names = (1..=n).map(|i| format!("b{i}")).collect();
        return SisoFeedbackNetwork::new(grid.clone(), names, blocks, a, m, b).unwrap();
    }
}

pub fn const_s(s: &[[C; 2]; 2]) -> Vec<Vec<Frf>> {
    s.iter().map(|r| r.iter().map(|&x| Frf::Constant(x)).collect()).collect()
}

/// Single two-port in a matched through package.
pub fn two_port(grid: &FrequencyGrid, s: &[[C; 2]; 2], maps: [StaticMap; 2]) -> PortNetwork {
    let block = PortBlock::new(const_s(s), maps.to_vec()).unwrap();
    PortNetwork::matched_chain(grid.clone(), vec![SubCircuit::nonlinear("dut", block)], 50.0).unwrap()
}

pub const S_FIXTURE: [[C; 2]; 2] = [
    [C::new(0.3, 0.1), C::new(0.1, 0.0)],
    [C::new(2.0, -0.5), C::new(0.0, 0.2)],
];

/// Random sub-circuits and package with reflecting terminations.
pub fn random_port_network(rng: &mut ChaCha8Rng, grid: &FrequencyGrid, subs: usize) -> PortNetwork {
    let mut sc = Vec::new();
    for n in 0..subs {
        let p = rng.random_range(1..=2usize);
        let s: Vec<Vec<Frf>> = (0..p).map(|_| (0..p).map(|_| Frf::Constant(rand_c(rng, 0.6))).collect()).collect();
        let lin = SubCircuit::linear(format!("x{n}"), s).unwrap();
        sc.push(lin);
    }
    let p: usize = sc.iter().map(|s| s.ports()).sum();
    let d = p + 2;
    let pkg = (0..d).map(|_| (0..d).map(|_| Frf::Constant(rand_c(rng, 0.45))).collect()).collect();
    let gin = Frf::Constant(rand_c(rng, 0.6));
    let gout = Frf::Constant(rand_c(rng, 0.6));
    PortNetwork::new(grid.clone(), sc, pkg, gin, gout, 50.0).unwrap()
}
