//! Periodic steady-state solves of a network under multisine excitation.
//!
//! The frequency-domain path iterates on the nonlinear remainder of every
//! block with the small-signal loop solved exactly at each harmonic. The
//! time-domain path integrates the network with bilinear (trapezoidal)
//! filters at a fixed step and transforms the last simulated period.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excitation::{derive_seed, draw_realization, MultisineSpec, Realization};
use crate::netmodel::{
    ports, CMat, Frf, Network, NonlinearBlock, PortNetwork, SisoFeedbackNetwork, StaticMap, SubCircuitKind,
};
use crate::spectra::{warp_frequency, FrequencyGrid, UnionGrid};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Largest FFT the frequency-domain path will allocate.
pub const MAX_FFT: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    #[default]
    Freq,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TicklerMode {
    #[default]
    Simultaneous,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Retained micro-harmonics; `None` keeps `order_factor` times the
    /// highest excited one.
    pub harmonic_order: Option<usize>,
    pub order_factor: usize,
    pub damping: f64,
    pub oversample: usize,
    pub mode: SolveMode,
    /// Time step of the time-domain path.
    pub ts: Option<f64>,
    pub periods: usize,
    pub settle_tol: f64,
    pub tickler_mode: TicklerMode,
    /// Evaluate linear dynamics at frequencies warped for this time step.
    pub warp_ts: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-10,
            max_iter: 200,
            harmonic_order: None,
            order_factor: 3,
            damping: 1.0,
            oversample: 8,
            mode: SolveMode::Freq,
            ts: None,
            periods: 10,
            settle_tol: 1e-8,
            tickler_mode: TicklerMode::Simultaneous,
            warp_ts: None,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::domain("tol must be positive and max_iter at least 1"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::domain("damping must lie in ]0, 1]"));
        }
        if self.oversample < 1 || self.order_factor < 1 {
            return Err(Error::domain("oversample and order_factor must be at least 1"));
        }
        Ok(())
    }
}

/// Where an excitation enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// The reference input: `R` of a SISO network, the source voltage of a
    /// port network.
    Main,
    VoltageAtSource,
    CurrentAtSource,
    CurrentAtLoad,
}

#[derive(Debug, Clone)]
pub struct Excitation {
    pub realization: Realization,
    pub site: Site,
}

impl Excitation {
    pub fn main(realization: Realization) -> Self {
        Excitation {
            realization,
            site: Site::Main,
        }
    }
}

/// Signal identifiers in a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SignalId {
    BlockInput(usize),
    BlockOutput(usize),
    Output,
    PortIncident(usize),
    PortReflected(usize),
}

impl fmt::Display for SignalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalId::BlockInput(n) => write!(f, "u{}", n + 1),
            SignalId::BlockOutput(n) => write!(f, "y{}", n + 1),
            SignalId::Output => write!(f, "out"),
            SignalId::PortIncident(j) => write!(f, "a{}", j + 1),
            SignalId::PortReflected(j) => write!(f, "b{}", j + 1),
        }
    }
}

impl std::str::FromStr for SignalId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "out" {
            return Ok(SignalId::Output);
        }
        let bad = || Error::parse("signal", format!("unknown signal `{s}`"));
        let (head, num) = s.split_at(1.min(s.len()));
        let n: usize = num.parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        Ok(match head {
            "u" => SignalId::BlockInput(n - 1),
            "y" => SignalId::BlockOutput(n - 1),
            "a" => SignalId::PortIncident(n - 1),
            "b" => SignalId::PortReflected(n - 1),
            _ => return Err(bad()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    pub iterations: usize,
    pub residual: f64,
    /// Energy above the retained harmonics relative to the total, worst case
    /// over the static-map evaluations of the final iteration.
    pub aliased_residue: f64,
    pub solves: usize,
}

/// Role of a micro-harmonic in a zippered experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinRole {
    /// Excited (or detection) line of reference `r` at grid position `i`.
    Reference { r: usize, i: usize },
    Distortion,
}

/// Steady-state spectra of one realization on the union grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateRecord {
    pub m: usize,
    pub union: UnionGrid,
    /// Main reference then each tickler, on their own grids.
    pub references: Vec<crate::spectra::Spectrum>,
    pub sites: Vec<Site>,
    /// Micro-harmonics `0..=union.harmonics` of every signal.
    pub signals: BTreeMap<SignalId, Vec<Complex64>>,
    pub diagnostics: Diagnostics,
    /// Time step when produced by the time-domain path.
    pub ts: Option<f64>,
}

impl SteadyStateRecord {
    pub fn signal(&self, id: SignalId) -> Result<&[Complex64]> {
        self.signals
            .get(&id)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::structural(format!("record has no signal {id}")))
    }

    /// Values of a signal on the bins of `grid`.
    pub fn signal_on(&self, id: SignalId, grid: &FrequencyGrid) -> Result<Vec<Complex64>> {
        let s = self.signal(id)?;
        Ok(self.union.indices_of(grid)?.into_iter().map(|h| s[h]).collect())
    }

    pub fn reference(&self, r: usize) -> Result<&crate::spectra::Spectrum> {
        self.references
            .get(r)
            .ok_or_else(|| Error::structural(format!("record has no reference {r}")))
    }

    /// Classify every micro-harmonic.
    pub fn bin_roles(&self) -> Result<Vec<BinRole>> {
        let mut roles = vec![BinRole::Distortion; self.union.harmonics + 1];
        for (r, spec) in self.references.iter().enumerate() {
            for (i, h) in self.union.indices_of(spec.grid())?.into_iter().enumerate() {
                roles[h] = BinRole::Reference { r, i };
            }
        }
        Ok(roles)
    }
}

// ----------------------------------------------------------------------------
// real-signal transforms on harmonics 0..=H

struct Transform {
    n: usize,
    h: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Transform {
    fn new(h: usize, oversample: usize) -> Result<Self> {
        if h >= MAX_FFT / 2 {
            return Err(Error::structural(format!("{h} retained harmonics exceed the FFT limit {MAX_FFT}")));
        }
        let n = (2 * oversample * (h + 1)).max(16).next_power_of_two();
        if n > MAX_FFT {
            return Err(Error::structural(format!(
                "{h} retained harmonics need an FFT of {n} points, above the limit {MAX_FFT}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Transform {
            n,
            h,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    fn to_time(&self, x: &[Complex64]) -> Vec<f64> {
        let mut buf = vec![ZERO; self.n];
        buf[0] = Complex64::new(x[0].re, 0.0);
        for k in 1..=self.h {
            buf[k] = x[k] * 0.5;
            buf[self.n - k] = x[k].conj() * 0.5;
        }
        self.inv.process(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// Harmonics `0..=H` of a real sequence and the relative energy above H.
    fn to_harmonics(&self, x: &[f64]) -> (Vec<Complex64>, f64) {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        let scale = 2.0 / self.n as f64;
        let mut out = Vec::with_capacity(self.h + 1);
        out.push(Complex64::new(buf[0].re / self.n as f64, 0.0));
        for k in 1..=self.h {
            out.push(buf[k] * scale);
        }
        let kept: f64 = buf[..=self.h].iter().map(|c| c.norm_sqr()).sum();
        let above: f64 = buf[self.h + 1..=self.n / 2].iter().map(|c| c.norm_sqr()).sum();
        let residue = if kept + above > 0.0 { above / (kept + above) } else { 0.0 };
        (out, residue)
    }

    fn apply_map(&self, map: &StaticMap, x: &[Complex64]) -> Result<(Vec<Complex64>, f64)> {
        let t = self.to_time(x);
        let y = t
            .iter()
            .enumerate()
            .map(|(i, &u)| map.eval(u, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.to_harmonics(&y))
    }
}

fn harmonic_frequencies(union: &UnionGrid, warp_ts: Option<f64>) -> Result<Vec<f64>> {
    (0..=union.harmonics)
        .map(|h| {
            let f = union.frequency(h);
            match warp_ts {
                Some(ts) => {
                    if !(f * ts < 0.5) {
                        return Err(Error::domain(format!(
                            "harmonic at {f} Hz reaches Nyquist for warping step {ts} s"
                        )));
                    }
                    Ok(warp_frequency(f, ts))
                }
                None => Ok(f),
            }
        })
        .collect()
}

fn invert(m: CMat, what: &str, f: f64) -> Result<CMat> {
    m.try_inverse()
        .ok_or_else(|| Error::structural(format!("{what} is singular at {f} Hz")))
}

fn norm2(v: &[Vec<Complex64>]) -> f64 {
    v.iter().flatten().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

fn diff2(a: &[Vec<Complex64>], b: &[Vec<Complex64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

// ----------------------------------------------------------------------------
// prepared (per-harmonic) network data

enum BlockPrep {
    Static(StaticMap),
    Linear(Vec<Complex64>),
    Composed {
        pre: Vec<Complex64>,
        map: StaticMap,
        post: Vec<Complex64>,
    },
}

struct SisoPrep {
    n: usize,
    a: Vec<Vec<Complex64>>,
    m: Vec<CMat>,
    b: Vec<Vec<Complex64>>,
    g0: Vec<Vec<Complex64>>,
    k: Vec<CMat>,
    blocks: Vec<BlockPrep>,
}

enum SubPrep {
    Nonlinear { s_lin: Vec<CMat>, maps: Vec<StaticMap> },
    Linear(Vec<CMat>),
}

struct PortPrep {
    p: usize,
    offsets: Vec<usize>,
    s0: Vec<CMat>,
    k: Vec<CMat>,
    ksrc: Vec<CMat>,
    load_src: Vec<[Complex64; 2]>,
    load_sub: Vec<Vec<Complex64>>,
    volt_inj: Vec<Complex64>,
    cur_inj: Vec<[Complex64; 2]>,
    subs: Vec<SubPrep>,
}

enum Prep {
    Siso(SisoPrep),
    Port(PortPrep),
}

/// Network data evaluated on every retained harmonic of a union grid.
pub struct Prepared {
    union: UnionGrid,
    transform: Transform,
    prep: Prep,
    config: SolverConfig,
}

impl Prepared {
    pub fn new(network: &Network, union: UnionGrid, config: &SolverConfig) -> Result<Self> {
        config.validate()?;
        let transform = Transform::new(union.harmonics, config.oversample)?;
        let freqs = harmonic_frequencies(&union, config.warp_ts)?;
        let prep = match network {
            Network::Siso(net) => Prep::Siso(prepare_siso(net, &freqs)?),
            Network::Port(net) => Prep::Port(prepare_port(net, &freqs)?),
        };
        Ok(Prepared {
            union,
            transform,
            prep,
            config: config.clone(),
        })
    }

    pub fn union(&self) -> &UnionGrid {
        &self.union
    }

    /// Solve for a set of simultaneously applied excitations; the first one
    /// is the main reference.
    pub fn solve(&self, m: usize, excitations: &[Excitation]) -> Result<SteadyStateRecord> {
        let first = excitations
            .first()
            .ok_or_else(|| Error::structural("at least the main excitation is required"))?;
        if first.site != Site::Main {
            return Err(Error::structural("the first excitation must be the main reference"));
        }
        let mut injected: Vec<(Site, Vec<Complex64>)> = Vec::new();
        for ex in excitations {
            let spectrum = ex.realization.spectrum();
            let mut v = vec![ZERO; self.union.harmonics + 1];
            for (h, x) in self.union.indices_of(spectrum.grid())?.into_iter().zip(spectrum.values()) {
                v[h] += *x;
            }
            injected.push((ex.site, v));
        }
        let (signals, diagnostics) = match &self.prep {
            Prep::Siso(p) => {
                if excitations.len() > 1 {
                    return Err(Error::structural("SISO networks accept only the main reference"));
                }
                self.solve_siso(p, &injected[0].1)?
            }
            Prep::Port(p) => self.solve_port(p, &injected)?,
        };
        Ok(SteadyStateRecord {
            m,
            union: self.union,
            references: excitations.iter().map(|e| e.realization.spectrum().clone()).collect(),
            sites: excitations.iter().map(|e| e.site).collect(),
            signals,
            diagnostics,
            ts: None,
        })
    }

    fn eval_block(&self, blk: &BlockPrep, u: &[Complex64]) -> Result<(Vec<Complex64>, f64)> {
        Ok(match blk {
            BlockPrep::Static(map) => self.transform.apply_map(map, u)?,
            BlockPrep::Linear(h) => (u.iter().zip(h).map(|(x, g)| x * g).collect(), 0.0),
            BlockPrep::Composed { pre, map, post } => {
                let v: Vec<Complex64> = u.iter().zip(pre).map(|(x, g)| x * g).collect();
                let (w, res) = self.transform.apply_map(map, &v)?;
                (w.iter().zip(post).map(|(x, g)| x * g).collect(), res)
            }
        })
    }

    fn solve_siso(
        &self,
        p: &SisoPrep,
        r: &[Complex64],
    ) -> Result<(BTreeMap<SignalId, Vec<Complex64>>, Diagnostics)> {
        let nh = self.union.harmonics + 1;
        let n = p.n;
        let inputs = |y: &[Vec<Complex64>]| -> Vec<Vec<Complex64>> {
            (0..n)
                .map(|i| {
                    (0..nh)
                        .map(|h| {
                            let mut u = p.a[h][i] * r[h];
                            for j in 0..n {
                                u -= p.m[h][(i, j)] * y[j][h];
                            }
                            u
                        })
                        .collect()
                })
                .collect()
        };
        // linear solution, then one sweep in block order so that blocks fed
        // by earlier ones start from their actual operating point
        let mut y: Vec<Vec<Complex64>> = vec![vec![ZERO; nh]; n];
        for h in 0..nh {
            for i in 0..n {
                y[i][h] = (0..n).map(|j| p.k[h][(i, j)] * p.g0[h][j] * p.a[h][j] * r[h]).sum();
            }
        }
        for i in 0..n {
            let u = inputs(&y);
            y[i] = self.eval_block(&p.blocks[i], &u[i])?.0;
        }
        let lam = self.config.damping;
        let mut residual = f64::INFINITY;
        for it in 1..=self.config.max_iter {
            let u = inputs(&y);
            let mut rem = Vec::with_capacity(n);
            let mut alias = 0.0f64;
            for i in 0..n {
                let (yb, res) = self.eval_block(&p.blocks[i], &u[i])?;
                alias = alias.max(res);
                rem.push((0..nh).map(|h| yb[h] - p.g0[h][i] * u[i][h]).collect::<Vec<_>>());
            }
            let y_new: Vec<Vec<Complex64>> = (0..n)
                .map(|i| {
                    (0..nh)
                        .map(|h| {
                            (0..n)
                                .map(|j| p.k[h][(i, j)] * (p.g0[h][j] * p.a[h][j] * r[h] + rem[j][h]))
                                .sum()
                        })
                        .collect()
                })
                .collect();
            let scale = norm2(&y_new).max(f64::MIN_POSITIVE);
            residual = diff2(&y_new, &y) / scale;
            if !residual.is_finite() {
                break;
            }
            if residual <= self.config.tol {
                let u = inputs(&y_new);
                let mut signals = BTreeMap::new();
                let out: Vec<Complex64> =
                    (0..nh).map(|h| (0..n).map(|j| p.b[h][j] * y_new[j][h]).sum()).collect();
                for (i, (ui, yi)) in u.into_iter().zip(y_new).enumerate() {
                    signals.insert(SignalId::BlockInput(i), ui);
                    signals.insert(SignalId::BlockOutput(i), yi);
                }
                signals.insert(SignalId::Output, out);
                let diag = Diagnostics {
                    iterations: it,
                    residual,
                    aliased_residue: alias,
                    solves: 1,
                };
                return Ok((signals, diag));
            }
            for i in 0..n {
                for h in 0..nh {
                    let d = (y_new[i][h] - y[i][h]) * lam;
                    y[i][h] += d;
                }
            }
        }
        Err(Error::NonConvergence {
            iterations: self.config.max_iter,
            residual,
            last_iterate: Box::new(y),
        })
    }

    fn eval_subcircuits(&self, p: &PortPrep, a: &[Vec<Complex64>]) -> Result<(Vec<Vec<Complex64>>, f64)> {
        let nh = self.union.harmonics + 1;
        let mut b = vec![vec![ZERO; nh]; p.p];
        let mut alias = 0.0f64;
        for (sub, &off) in p.subs.iter().zip(&p.offsets) {
            match sub {
                SubPrep::Linear(s) => {
                    let q = s[0].nrows();
                    for h in 0..nh {
                        for i in 0..q {
                            b[off + i][h] = (0..q).map(|j| s[h][(i, j)] * a[off + j][h]).sum();
                        }
                    }
                }
                SubPrep::Nonlinear { s_lin, maps } => {
                    let q = maps.len();
                    for (i, map) in maps.iter().enumerate() {
                        let v: Vec<Complex64> = (0..nh)
                            .map(|h| (0..q).map(|j| s_lin[h][(i, j)] * a[off + j][h]).sum())
                            .collect();
                        let (bi, res) = self.transform.apply_map(map, &v)?;
                        alias = alias.max(res);
                        b[off + i] = bi;
                    }
                }
            }
        }
        Ok((b, alias))
    }

    fn solve_port(
        &self,
        p: &PortPrep,
        injected: &[(Site, Vec<Complex64>)],
    ) -> Result<(BTreeMap<SignalId, Vec<Complex64>>, Diagnostics)> {
        let nh = self.union.harmonics + 1;
        // source-element waves at the source (0) and load (1) terminations
        let mut x = vec![[ZERO; 2]; nh];
        for (site, v) in injected {
            for h in 0..nh {
                match site {
                    Site::Main | Site::VoltageAtSource => x[h][0] += p.volt_inj[h] * v[h],
                    Site::CurrentAtSource => x[h][0] += p.cur_inj[h][0] * v[h],
                    Site::CurrentAtLoad => x[h][1] += p.cur_inj[h][1] * v[h],
                }
            }
        }
        let a_lin: Vec<Vec<Complex64>> = (0..p.p)
            .map(|j| {
                (0..nh)
                    .map(|h| p.ksrc[h][(j, 0)] * x[h][0] + p.ksrc[h][(j, 1)] * x[h][1])
                    .collect()
            })
            .collect();
        let mut a = a_lin.clone();
        let lam = self.config.damping;
        let mut residual = f64::INFINITY;
        for it in 1..=self.config.max_iter {
            let (b, alias) = self.eval_subcircuits(p, &a)?;
            let rem: Vec<Vec<Complex64>> = (0..p.p)
                .map(|i| {
                    (0..nh)
                        .map(|h| b[i][h] - (0..p.p).map(|j| p.s0[h][(i, j)] * a[j][h]).sum::<Complex64>())
                        .collect()
                })
                .collect();
            let a_new: Vec<Vec<Complex64>> = (0..p.p)
                .map(|i| {
                    (0..nh)
                        .map(|h| a_lin[i][h] + (0..p.p).map(|j| p.k[h][(i, j)] * rem[j][h]).sum::<Complex64>())
                        .collect()
                })
                .collect();
            let scale = norm2(&a_new).max(f64::MIN_POSITIVE);
            residual = diff2(&a_new, &a) / scale;
            if !residual.is_finite() {
                break;
            }
            if residual <= self.config.tol {
                let (b, _) = self.eval_subcircuits(p, &a_new)?;
                let rem: Vec<Vec<Complex64>> = (0..p.p)
                    .map(|i| {
                        (0..nh)
                            .map(|h| {
                                b[i][h] - (0..p.p).map(|j| p.s0[h][(i, j)] * a_new[j][h]).sum::<Complex64>()
                            })
                            .collect()
                    })
                    .collect();
                let out: Vec<Complex64> = (0..nh)
                    .map(|h| {
                        p.load_src[h][0] * x[h][0]
                            + p.load_src[h][1] * x[h][1]
                            + (0..p.p).map(|j| p.load_sub[h][j] * rem[j][h]).sum::<Complex64>()
                    })
                    .collect();
                let mut signals = BTreeMap::new();
                for (j, (aj, bj)) in a_new.into_iter().zip(b).enumerate() {
                    signals.insert(SignalId::PortIncident(j), aj);
                    signals.insert(SignalId::PortReflected(j), bj);
                }
                signals.insert(SignalId::Output, out);
                let diag = Diagnostics {
                    iterations: it,
                    residual,
                    aliased_residue: alias,
                    solves: 1,
                };
                return Ok((signals, diag));
            }
            for i in 0..p.p {
                for h in 0..nh {
                    let d = (a_new[i][h] - a[i][h]) * lam;
                    a[i][h] += d;
                }
            }
        }
        Err(Error::NonConvergence {
            iterations: self.config.max_iter,
            residual,
            last_iterate: Box::new(a),
        })
    }
}

fn eval_all(f: &Frf, freqs: &[f64]) -> Vec<Complex64> {
    freqs.iter().map(|&x| f.eval(x)).collect()
}

fn prepare_siso(net: &SisoFeedbackNetwork, freqs: &[f64]) -> Result<SisoPrep> {
    let n = net.n_blocks();
    let mut prep = SisoPrep {
        n,
        a: Vec::with_capacity(freqs.len()),
        m: Vec::with_capacity(freqs.len()),
        b: Vec::with_capacity(freqs.len()),
        g0: Vec::with_capacity(freqs.len()),
        k: Vec::with_capacity(freqs.len()),
        blocks: Vec::new(),
    };
    for &f in freqs {
        let a: Vec<Complex64> = net.a_at(f).iter().copied().collect();
        let m = net.m_at(f);
        let b: Vec<Complex64> = net.b_at(f).iter().copied().collect();
        let g0 = net.nominal_gains(f);
        let mut loop_m = CMat::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                loop_m[(i, j)] += g0[i] * m[(i, j)];
            }
        }
        prep.k.push(invert(loop_m, "small-signal loop matrix I + G0 M", f)?);
        prep.a.push(a);
        prep.m.push(m);
        prep.b.push(b);
        prep.g0.push(g0);
    }
    prep.blocks = net
        .blocks()
        .iter()
        .map(|b| match b {
            NonlinearBlock::Static(m) => BlockPrep::Static(m.clone()),
            NonlinearBlock::LinearFrf(h) => BlockPrep::Linear(eval_all(h, freqs)),
            NonlinearBlock::Composed { pre, map, post } => BlockPrep::Composed {
                pre: eval_all(pre, freqs),
                map: map.clone(),
                post: eval_all(post, freqs),
            },
        })
        .collect();
    Ok(prep)
}

fn prepare_port(net: &PortNetwork, freqs: &[f64]) -> Result<PortPrep> {
    let p = net.total_ports();
    let mut prep = PortPrep {
        p,
        offsets: net.port_offsets(),
        s0: Vec::new(),
        k: Vec::new(),
        ksrc: Vec::new(),
        load_src: Vec::new(),
        load_sub: Vec::new(),
        volt_inj: Vec::new(),
        cur_inj: Vec::new(),
        subs: Vec::new(),
    };
    for &f in freqs {
        let s0 = net.small_signal_at(f);
        let winv = invert(net.w_matrix(f, &s0)?, "wave matrix W = C - T", f)?;
        let sub = ports::sub(p, 0);
        prep.k.push(winv.view((sub, sub), (p, p)).into_owned());
        prep.ksrc.push(winv.view((sub, 0), (p, 2)).into_owned());
        prep.load_src.push([winv[(ports::LOAD, 0)], winv[(ports::LOAD, 1)]]);
        prep.load_sub.push((0..p).map(|j| winv[(ports::LOAD, sub + j)]).collect());
        prep.volt_inj.push(net.voltage_injection(f));
        prep.cur_inj.push([
            net.current_injection(ports::SOURCE, f),
            net.current_injection(ports::LOAD, f),
        ]);
        prep.s0.push(s0);
    }
    prep.subs = net
        .subcircuits()
        .iter()
        .map(|sc| match &sc.kind {
            SubCircuitKind::Nonlinear(b) => SubPrep::Nonlinear {
                s_lin: freqs.iter().map(|&f| b.s_lin_at(f)).collect(),
                maps: b.maps().to_vec(),
            },
            SubCircuitKind::Linear(_) => SubPrep::Linear(freqs.iter().map(|&f| sc.small_signal(f)).collect()),
        })
        .collect();
    Ok(prep)
}

fn union_for(grids: &[&FrequencyGrid], config: &SolverConfig) -> Result<UnionGrid> {
    let mut union = UnionGrid::covering(grids, config.order_factor)?;
    if let Some(h) = config.harmonic_order {
        let top = grids
            .iter()
            .map(|g| union.indices_of(g).map(|v| v.into_iter().max().unwrap_or(0)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0);
        if h < top {
            return Err(Error::domain(format!("harmonic order {h} is below the highest excited harmonic {top}")));
        }
        union.harmonics = h;
    }
    Ok(union)
}

/// One frequency-domain solve; the first excitation is the main reference.
pub fn solve_frequency_domain(
    network: &Network,
    excitations: &[Excitation],
    config: &SolverConfig,
) -> Result<SteadyStateRecord> {
    let grids: Vec<&FrequencyGrid> = excitations.iter().map(|e| e.realization.spectrum().grid()).collect();
    let union = union_for(&grids, config)?;
    let m = excitations.first().map(|e| e.realization.index()).unwrap_or(0);
    Prepared::new(network, union, config)?.solve(m, excitations)
}

// ----------------------------------------------------------------------------
// time-domain path

/// Direct-form II transposed IIR filter.
#[derive(Debug, Clone)]
pub struct Iir {
    b: Vec<f64>,
    a: Vec<f64>,
    s: Vec<f64>,
}

impl Iir {
    /// Bilinear (trapezoidal) discretization of a constant or rational FRF.
    pub fn bilinear(frf: &Frf, ts: f64) -> Result<Iir> {
        let (num, den) = match frf {
            Frf::Constant(c) => {
                if c.im != 0.0 {
                    return Err(Error::domain("complex constants have no real-time realization"));
                }
                (vec![c.re], vec![1.0])
            }
            Frf::Rational { num, den } => (num.clone(), den.clone()),
            Frf::Table { .. } => {
                return Err(Error::structural(
                    "tabulated FRFs cannot be integrated in time; use constant or rational entries",
                ))
            }
        };
        let order = num.len().max(den.len()) - 1;
        let c = 2.0 / ts;
        let map = |p: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; order + 1];
            for (i, &coef) in p.iter().enumerate() {
                // (1 - z^-1)^i (1 + z^-1)^(order - i)
                let mut poly = vec![1.0];
                for _ in 0..i {
                    poly = convolve(&poly, &[1.0, -1.0]);
                }
                for _ in 0..order - i {
                    poly = convolve(&poly, &[1.0, 1.0]);
                }
                let scale = coef * c.powi(i as i32);
                for (o, q) in out.iter_mut().zip(poly) {
                    *o += scale * q;
                }
            }
            out
        };
        let mut b = map(&num);
        let mut a = map(&den);
        let a0 = a[0];
        if a0 == 0.0 {
            return Err(Error::domain("bilinear map has a zero leading denominator coefficient"));
        }
        b.iter_mut().for_each(|x| *x /= a0);
        a.iter_mut().for_each(|x| *x /= a0);
        Ok(Iir {
            s: vec![0.0; order],
            b,
            a,
        })
    }

    /// Output for input `x` without advancing the state.
    pub fn peek(&self, x: f64) -> f64 {
        self.b[0] * x + self.s.first().copied().unwrap_or(0.0)
    }

    pub fn commit(&mut self, x: f64) -> f64 {
        let y = self.peek(x);
        let n = self.s.len();
        for i in 0..n {
            let next = if i + 1 < n { self.s[i + 1] } else { 0.0 };
            self.s[i] = self.b[i + 1] * x - self.a[i + 1] * y + next;
        }
        y
    }

    /// Discrete frequency response at `f` Hz.
    pub fn response(&self, f: f64, ts: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f * ts);
        let ev = |c: &[f64]| c.iter().rev().fold(ZERO, |acc, &v| acc * z1 + v);
        ev(&self.b) / ev(&self.a)
    }
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

enum TimeBlock {
    Static(StaticMap),
    Linear(Iir),
    Composed { pre: Iir, map: StaticMap, post: Iir },
}

impl TimeBlock {
    fn peek(&self, u: f64, t: usize) -> Result<f64> {
        Ok(match self {
            TimeBlock::Static(m) => m.eval(u, t)?,
            TimeBlock::Linear(h) => h.peek(u),
            TimeBlock::Composed { pre, map, post } => post.peek(map.eval(pre.peek(u), t)?),
        })
    }

    fn commit(&mut self, u: f64, t: usize) -> Result<f64> {
        Ok(match self {
            TimeBlock::Static(m) => m.eval(u, t)?,
            TimeBlock::Linear(h) => h.commit(u),
            TimeBlock::Composed { pre, map, post } => {
                let v = pre.commit(u);
                post.commit(map.eval(v, t)?)
            }
        })
    }
}

/// Fixed-step trapezoidal simulation of a SISO network over `periods`
/// periods; the last one is transformed.
pub fn solve_time_domain(
    network: &Network,
    excitation: &Realization,
    ts: f64,
    periods: usize,
    config: &SolverConfig,
) -> Result<SteadyStateRecord> {
    let net = network
        .as_siso()
        .ok_or_else(|| Error::structural("the time-domain path supports SISO networks only"))?;
    if !(ts > 0.0) || periods < 2 {
        return Err(Error::domain("time step must be positive and at least two periods simulated"));
    }
    let grid = excitation.spectrum().grid();
    let union = union_for(&[grid], config)?;
    let per = 1.0 / (union.micro_f0() * ts);
    let ns = per.round() as usize;
    if (per - ns as f64).abs() > 1e-9 * per || ns == 0 {
        return Err(Error::domain(format!(
            "period / ts = {per} is not an integer number of samples"
        )));
    }
    if 2 * union.harmonics >= ns {
        return Err(Error::domain(format!(
            "{ns} samples per period cannot carry {} harmonics",
            union.harmonics
        )));
    }
    let n = net.n_blocks();
    let filt = |f: &Frf| Iir::bilinear(f, ts);
    let zero_const = |f: &Frf| matches!(f, Frf::Constant(c) if *c == ZERO);
    let mut a_f: Vec<Option<Iir>> = net.a_entries().iter().map(|f| (!zero_const(f)).then(|| filt(f)).transpose()).collect::<Result<_>>()?;
    let mut m_f: Vec<Vec<Option<Iir>>> = net
        .m_entries()
        .iter()
        .map(|row| row.iter().map(|f| (!zero_const(f)).then(|| filt(f)).transpose()).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut b_f: Vec<Option<Iir>> = net.b_entries().iter().map(|f| (!zero_const(f)).then(|| filt(f)).transpose()).collect::<Result<_>>()?;
    let mut blocks: Vec<TimeBlock> = net
        .blocks()
        .iter()
        .map(|b| {
            Ok(match b {
                NonlinearBlock::Static(m) => TimeBlock::Static(m.clone()),
                NonlinearBlock::LinearFrf(h) => TimeBlock::Linear(filt(h)?),
                NonlinearBlock::Composed { pre, map, post } => TimeBlock::Composed {
                    pre: filt(pre)?,
                    map: map.clone(),
                    post: filt(post)?,
                },
            })
        })
        .collect::<Result<_>>()?;

    // one period of the reference
    let transform = FixedTransform::new(ns);
    let mut rh = vec![ZERO; union.harmonics + 1];
    for (h, x) in union.indices_of(grid)?.into_iter().zip(excitation.spectrum().values()) {
        rh[h] += *x;
    }
    let r = transform.to_time(&rh);

    let total = ns * periods;
    let keep = 2 * ns;
    let mut hist_u = vec![vec![0.0; keep]; n];
    let mut hist_y = vec![vec![0.0; keep]; n];
    let mut hist_out = vec![0.0; keep];
    let mut y = vec![0.0; n];
    let mut u = vec![0.0; n];
    for t in 0..total {
        let rt = r[t % ns];
        let mut converged = false;
        for _ in 0..config.max_iter {
            let mut delta = 0.0f64;
            for i in 0..n {
                let mut ui = a_f[i].as_ref().map_or(0.0, |f| f.peek(rt));
                for j in 0..n {
                    if let Some(f) = &m_f[i][j] {
                        ui -= f.peek(y[j]);
                    }
                }
                u[i] = ui;
                let yi = blocks[i].peek(ui, t % ns)?;
                delta = delta.max((yi - y[i]).abs() / (1.0 + yi.abs()));
                y[i] = yi;
            }
            if delta <= 1e-14 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                iterations: config.max_iter,
                residual: f64::NAN,
                last_iterate: Box::new(vec![y.iter().map(|&v| Complex64::new(v, 0.0)).collect()]),
            });
        }
        for i in 0..n {
            if let Some(f) = a_f[i].as_mut() {
                f.commit(rt);
            }
            for j in 0..n {
                if let Some(f) = m_f[i][j].as_mut() {
                    f.commit(y[j]);
                }
            }
            blocks[i].commit(u[i], t % ns)?;
        }
        let mut out = 0.0;
        for j in 0..n {
            if let Some(f) = b_f[j].as_mut() {
                out += f.commit(y[j]);
            }
        }
        if t + keep >= total {
            let idx = t + keep - total;
            for i in 0..n {
                hist_u[i][idx] = u[i];
                hist_y[i][idx] = y[i];
            }
            hist_out[idx] = out;
        }
    }
    // settling: last two periods of every recorded signal
    let (mut num, mut den) = (0.0, 0.0);
    for sig in hist_u.iter().chain(hist_y.iter()).chain(std::iter::once(&hist_out)) {
        for k in 0..ns {
            num += (sig[ns + k] - sig[k]).powi(2);
            den += sig[ns + k].powi(2);
        }
    }
    let discrepancy = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
    if discrepancy > config.settle_tol {
        return Err(Error::NotSettled { discrepancy });
    }
    let mut signals = BTreeMap::new();
    let harm = |x: &[f64]| transform.to_harmonics(&x[ns..], union.harmonics);
    for i in 0..n {
        signals.insert(SignalId::BlockInput(i), harm(&hist_u[i]));
        signals.insert(SignalId::BlockOutput(i), harm(&hist_y[i]));
    }
    signals.insert(SignalId::Output, harm(&hist_out));
    Ok(SteadyStateRecord {
        m: excitation.index(),
        union,
        references: vec![excitation.spectrum().clone()],
        sites: vec![Site::Main],
        signals,
        diagnostics: Diagnostics {
            iterations: periods,
            residual: discrepancy,
            aliased_residue: 0.0,
            solves: 1,
        },
        ts: Some(ts),
    })
}

/// DFT of exactly one period of `n` samples.
struct FixedTransform {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl FixedTransform {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        FixedTransform {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn to_time(&self, x: &[Complex64]) -> Vec<f64> {
        let mut buf = vec![ZERO; self.n];
        buf[0] = Complex64::new(x[0].re, 0.0);
        for k in 1..x.len() {
            buf[k] += x[k] * 0.5;
            buf[self.n - k] += x[k].conj() * 0.5;
        }
        self.inv.process(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    fn to_harmonics(&self, x: &[f64], h: usize) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        let scale = 2.0 / self.n as f64;
        std::iter::once(Complex64::new(buf[0].re / self.n as f64, 0.0))
            .chain(buf[1..=h].iter().map(|c| c * scale))
            .collect()
    }
}

// ----------------------------------------------------------------------------
// experiments

/// Main excitation plus zippered ticklers, ready to solve realizations.
pub struct Experiment<'a> {
    network: &'a Network,
    main: Arc<MultisineSpec>,
    ticklers: Vec<(Arc<MultisineSpec>, Site)>,
    config: SolverConfig,
    prepared: Option<Prepared>,
    union: UnionGrid,
}

impl<'a> Experiment<'a> {
    pub fn new(
        network: &'a Network,
        main: &MultisineSpec,
        ticklers: &[(MultisineSpec, Site)],
        config: &SolverConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut specs = vec![main];
        specs.extend(ticklers.iter().map(|(s, _)| s));
        crate::excitation::check_disjoint(&specs)?;
        for (i, (_, site)) in ticklers.iter().enumerate() {
            if *site == Site::Main {
                return Err(Error::structural(format!("tickler {} needs an injection site", i + 1)));
            }
        }
        if !ticklers.is_empty() && network.as_siso().is_some() {
            return Err(Error::structural("SISO networks accept no ticklers"));
        }
        let grids: Vec<&FrequencyGrid> = specs.iter().map(|s| s.grid()).collect();
        let union = union_for(&grids, config)?;
        let prepared = match config.mode {
            SolveMode::Freq => Some(Prepared::new(network, union, config)?),
            SolveMode::Time => {
                if !ticklers.is_empty() {
                    return Err(Error::structural("the time-domain path takes the main excitation only"));
                }
                if config.ts.is_none() {
                    return Err(Error::domain("time-domain mode needs a time step ts"));
                }
                None
            }
        };
        Ok(Experiment {
            network,
            main: Arc::new(main.clone()),
            ticklers: ticklers.iter().map(|(s, site)| (Arc::new(s.clone()), *site)).collect(),
            config: config.clone(),
            prepared,
            union,
        })
    }

    pub fn union(&self) -> &UnionGrid {
        &self.union
    }

    fn excitations(&self, m: usize, seed: u64) -> Vec<Excitation> {
        let mut ex = vec![Excitation::main(draw_realization(&self.main, m, derive_seed(seed, "main", 0)))];
        for (r, (spec, site)) in self.ticklers.iter().enumerate() {
            ex.push(Excitation {
                realization: draw_realization(spec, m, derive_seed(seed, "tickler", r as u64 + 1)),
                site: *site,
            });
        }
        ex
    }

    /// Solve realization `m`.
    pub fn realization(&self, m: usize, seed: u64) -> Result<SteadyStateRecord> {
        let ex = self.excitations(m, seed);
        let wrap = |e: Error| Error::Realization { m, source: Box::new(e) };
        let Some(prep) = &self.prepared else {
            let ts = self.config.ts.expect("checked at construction");
            return solve_time_domain(self.network, &ex[0].realization, ts, self.config.periods, &self.config)
                .map_err(wrap);
        };
        if self.config.tickler_mode == TicklerMode::Simultaneous || ex.len() <= 2 {
            return prep.solve(m, &ex).map_err(wrap);
        }
        // one solve per tickler; each tickler's own bins come from its solve
        let mut merged: Option<SteadyStateRecord> = None;
        for r in 1..ex.len() {
            let rec = prep.solve(m, &[ex[0].clone(), ex[r].clone()]).map_err(wrap)?;
            match merged.as_mut() {
                None => merged = Some(rec),
                Some(acc) => {
                    let bins = self.union.indices_of(ex[r].realization.spectrum().grid())?;
                    for (id, v) in rec.signals {
                        let target = acc.signals.get_mut(&id).expect("same network, same signals");
                        for &h in &bins {
                            target[h] = v[h];
                        }
                    }
                    acc.references.push(rec.references[1].clone());
                    acc.sites.push(rec.sites[1]);
                    acc.diagnostics.iterations += rec.diagnostics.iterations;
                    acc.diagnostics.residual = acc.diagnostics.residual.max(rec.diagnostics.residual);
                    acc.diagnostics.aliased_residue =
                        acc.diagnostics.aliased_residue.max(rec.diagnostics.aliased_residue);
                    acc.diagnostics.solves += 1;
                }
            }
        }
        Ok(merged.expect("at least one tickler"))
    }

    /// Solve realizations `range` in parallel; output ordered by `m`.
    pub fn run(&self, range: Range<usize>, seed: u64) -> Result<Vec<SteadyStateRecord>> {
        range.into_par_iter().map(|m| self.realization(m, seed)).collect()
    }
}

/// Solve realizations `range` of an experiment.
pub fn run_realizations(
    network: &Network,
    main: &MultisineSpec,
    ticklers: &[(MultisineSpec, Site)],
    range: Range<usize>,
    seed: u64,
    config: &SolverConfig,
) -> Result<Vec<SteadyStateRecord>> {
    Experiment::new(network, main, ticklers, config)?.run(range, seed)
}

/// `m_count` realizations of main plus ticklers.
pub fn run_experiment(
    network: &Network,
    main: &MultisineSpec,
    ticklers: &[(MultisineSpec, Site)],
    m_count: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<Vec<SteadyStateRecord>> {
    if m_count == 0 {
        return Err(Error::domain("at least one realization is required"));
    }
    run_realizations(network, main, ticklers, 0..m_count, seed, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::excitation::{design_multisine, design_tickler, draw_realizations, MultisineKind};
    use crate::netmodel::{PortBlock, SubCircuit};
    use crate::spectra::{BinLabel, Offset};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn grid(kmax: u64) -> FrequencyGrid {
        FrequencyGrid::uniform(1.0, (1..=kmax).collect(), BinLabel::Excited).unwrap()
    }

    fn single(block: NonlinearBlock, kmax: u64) -> Network {
        Network::Siso(SisoFeedbackNetwork::chain(grid(kmax), vec![block], 1.0).unwrap())
    }

    #[test]
    fn linear_network_one_iteration() {
        let g = grid(20);
        let blocks = vec![
            NonlinearBlock::LinearFrf(Frf::lowpass(5.0)),
            NonlinearBlock::Static(StaticMap::Polynomial(vec![0.5])),
        ];
        let mut net = SisoFeedbackNetwork::chain(g.clone(), blocks.clone(), 1.0).unwrap();
        // add feedback from block 2 to block 1
        let mut m = vec![vec![Frf::zero(), Frf::real(0.3)], vec![Frf::real(-1.0), Frf::zero()]];
        net = SisoFeedbackNetwork::new(
            g,
            net.names().to_vec(),
            blocks,
            vec![Frf::real(1.0), Frf::zero()],
            std::mem::take(&mut m),
            vec![Frf::zero(), Frf::real(1.0)],
        )
        .unwrap();
        let spec = design_multisine(1.0, 1.0, 20.0, 1.0, MultisineKind::Full, 0).unwrap();
        let r = draw_realizations(&spec, 1, 4).unwrap().remove(0);
        let network = Network::Siso(net.clone());
        let rec = solve_frequency_domain(&network, &[Excitation::main(r.clone())], &SolverConfig::default()).unwrap();
        assert_eq!(rec.diagnostics.iterations, 1);
        let out = rec.signal_on(SignalId::Output, spec.grid()).unwrap();
        for (i, (&y, &x)) in out.iter().zip(r.spectrum().values()).enumerate() {
            let f = spec.grid().frequency(i);
            let h = Frf::lowpass(5.0).eval(f);
            let closed = 0.5 * h / (1.0 + 0.3 * 0.5 * h);
            assert_relative_eq!((y - closed * x).norm(), 0.0, epsilon = 1e-12 * x.norm());
        }
        // doubling the input doubles the output
        let spec2 = MultisineSpec::new(
            spec.grid().clone(),
            spec.amplitudes().iter().map(|a| 2.0 * a).collect(),
            MultisineKind::Full,
            3,
            0,
        )
        .unwrap();
        let r2 = draw_realizations(&spec2, 1, 4).unwrap().remove(0);
        let rec2 = solve_frequency_domain(&network, &[Excitation::main(r2)], &SolverConfig::default()).unwrap();
        for (a, b) in rec.signal(SignalId::Output).unwrap().iter().zip(rec2.signal(SignalId::Output).unwrap()) {
            assert!((2.0 * a - b).norm() <= 1e-12 * b.norm().max(1e-300));
        }
    }

    #[test]
    fn cubic_two_tone_intermodulation() {
        // y = u + 0.1 u^3, u = a sin(3 w t + p) + b sin(5 w t + q)
        let (a, b, p, q, alpha) = (0.8, 0.5, 0.3, -1.1, 0.1);
        let g = FrequencyGrid::uniform(1.0, vec![3, 5], BinLabel::Excited).unwrap();
        let spec = Arc::new(MultisineSpec::new(g, vec![a, b], MultisineKind::Odd, 3, 0).unwrap());
        let r = Realization::with_phases(&spec, 0, vec![p, q]).unwrap();
        let net = single(NonlinearBlock::Static(StaticMap::cubic(alpha)), 5);
        let rec = solve_frequency_domain(&net, &[Excitation::main(r)], &SolverConfig::default()).unwrap();
        let y = rec.signal(SignalId::Output).unwrap();
        // oracle: expand (a sin x + b sin y)^3 over the 64 exponential terms
        // of (sum over four complex exponentials)^3
        let terms = [
            (3i64, Complex64::new(0.0, -0.5) * Complex64::from_polar(a, p)),
            (-3, Complex64::new(0.0, 0.5) * Complex64::from_polar(a, -p)),
            (5, Complex64::new(0.0, -0.5) * Complex64::from_polar(b, q)),
            (-5, Complex64::new(0.0, 0.5) * Complex64::from_polar(b, -q)),
        ];
        let mut two_sided = BTreeMap::<i64, Complex64>::new();
        for t1 in &terms {
            for t2 in &terms {
                for t3 in &terms {
                    *two_sided.entry(t1.0 + t2.0 + t3.0).or_insert(ZERO) += t1.1 * t2.1 * t3.1;
                }
            }
        }
        for k in [1u64, 7, 9, 11, 13, 15] {
            let expect = 2.0 * alpha * two_sided[&(k as i64)];
            assert_relative_eq!((y[k as usize] - expect).norm(), 0.0, epsilon = 1e-12);
            assert!(expect.norm() > 1e-6);
        }
        for k in [3u64, 5] {
            let lin = if k == 3 { vals_at(a, p) } else { vals_at(b, q) };
            let expect = lin + 2.0 * alpha * two_sided[&(k as i64)];
            assert_relative_eq!((y[k as usize] - expect).norm(), 0.0, epsilon = 1e-12);
        }
        // even bins stay empty
        for k in (0..y.len()).step_by(2) {
            assert!(y[k].norm() < 1e-13);
        }
    }

    fn vals_at(a: f64, p: f64) -> Complex64 {
        Complex64::from_polar(a, p) * Complex64::new(0.0, -1.0)
    }

    #[test]
    fn example2_internal_sdr() {
        let blocks = vec![
            NonlinearBlock::Static(StaticMap::Exp { gain: 1.0 }),
            NonlinearBlock::Static(StaticMap::Log { gain: 1.0 }),
        ];
        let net = Network::Siso(SisoFeedbackNetwork::chain(grid(100), blocks, 1.0).unwrap());
        let spec = design_multisine(1.0, 1.0, 100.0, 0.5, MultisineKind::Full, 0).unwrap();
        let recs = run_experiment(&net, &spec, &[], 2, 1, &SolverConfig::default()).unwrap();
        // exp/log cancel once the exponential's spectrum is retained far enough
        let mut alias = Vec::new();
        for fac in [3usize, 8] {
            let cfg = SolverConfig {
                order_factor: fac,
                ..SolverConfig::default()
            };
            let rec = &run_experiment(&net, &spec, &[], 1, 1, &cfg).unwrap()[0];
            let out = rec.signal_on(SignalId::Output, spec.grid()).unwrap();
            let worst = out
                .iter()
                .zip(rec.references[0].values())
                .map(|(y, r)| (y - r).norm() / r.norm())
                .fold(0.0, f64::max);
            assert!(worst < if fac == 8 { 1e-12 } else { 1e-3 }, "factor {fac}: {worst}");
            alias.push(rec.diagnostics.aliased_residue);
        }
        assert!(alias[1] < 1e-6 * alias[0]);
        // the intermediate node carries strong distortion on non-excited bins
        let y1 = recs[0].signal(SignalId::BlockOutput(0)).unwrap();
        let beyond: f64 = y1[101..=300].iter().map(|c| c.norm_sqr()).sum();
        assert!(beyond > 1e-3);
    }

    #[test]
    fn even_odd_separation() {
        let spec = design_multisine(1.0, 1.0, 41.0, 0.5, MultisineKind::RandomOdd, 3).unwrap();
        let r = draw_realizations(&spec, 1, 7).unwrap().remove(0);
        let sq = single(NonlinearBlock::Static(StaticMap::Polynomial(vec![0.0, 1.0])), 41);
        let rec = solve_frequency_domain(&sq, &[Excitation::main(r.clone())], &SolverConfig::default()).unwrap();
        let y = rec.signal(SignalId::Output).unwrap();
        let total: f64 = y.iter().map(|c| c.norm_sqr()).sum();
        let odd: f64 = y.iter().skip(1).step_by(2).map(|c| c.norm_sqr()).sum();
        assert!(odd < 1e-12 * total, "odd {odd} total {total}");
    }

    #[test]
    fn log_domain_violation_propagates() {
        let net = single(NonlinearBlock::Static(StaticMap::Log { gain: 1.0 }), 5);
        let spec = design_multisine(1.0, 1.0, 5.0, 1.0, MultisineKind::Full, 0).unwrap();
        let r = draw_realizations(&spec, 1, 0).unwrap().remove(0);
        let e = solve_frequency_domain(&net, &[Excitation::main(r)], &SolverConfig::default()).unwrap_err();
        assert!(matches!(e, Error::Domain(ref m) if m.contains("sample")), "{e}");
    }

    #[test]
    fn non_convergence_reports_residual() {
        // strong positive feedback around a saturation
        let g = grid(5);
        let net = Network::Siso(
            SisoFeedbackNetwork::new(
                g,
                vec!["s".into()],
                vec![NonlinearBlock::Static(StaticMap::Polynomial(vec![1.0, 0.0, 3.0]))],
                vec![Frf::real(1.0)],
                vec![vec![Frf::real(0.9)]],
                vec![Frf::real(1.0)],
            )
            .unwrap(),
        );
        let spec = design_multisine(1.0, 1.0, 5.0, 2.0, MultisineKind::Full, 0).unwrap();
        let r = draw_realizations(&spec, 1, 0).unwrap().remove(0);
        let cfg = SolverConfig {
            max_iter: 5,
            ..SolverConfig::default()
        };
        match solve_frequency_domain(&net, &[Excitation::main(r)], &cfg) {
            Err(Error::NonConvergence { iterations, residual, last_iterate }) => {
                assert_eq!(iterations, 5);
                assert!(!(residual <= cfg.tol));
                assert_eq!(last_iterate.len(), 1);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn bilinear_lowpass_single_tone() {
        let fc = 3.0;
        let ts = 1.0 / 200.0;
        let net = single(NonlinearBlock::LinearFrf(Frf::lowpass(fc)), 10);
        let g = FrequencyGrid::uniform(1.0, vec![7], BinLabel::Excited).unwrap();
        let spec = Arc::new(MultisineSpec::new(g, vec![1.0], MultisineKind::Full, 3, 0).unwrap());
        let r = draw_realization(&spec, 0, 5);
        let cfg = SolverConfig::default();
        let rec = solve_time_domain(&net, &r, ts, 8, &cfg).unwrap();
        assert_eq!(rec.ts, Some(ts));
        let y = rec.signal(SignalId::Output).unwrap()[7];
        let x = r.spectrum().values()[0];
        let fw = warp_frequency(7.0, ts);
        let expect = Frf::lowpass(fc).eval(fw) * x;
        assert!((y - expect).norm() < 1e-9, "{y} vs {expect}");
        // the discrete filter itself matches the warped response
        let iir = Iir::bilinear(&Frf::lowpass(fc), ts).unwrap();
        assert!((iir.response(7.0, ts) - Frf::lowpass(fc).eval(fw)).norm() < 1e-12);
    }

    #[test]
    fn static_network_paths_agree() {
        let net = single(NonlinearBlock::Static(StaticMap::cubic(0.2)), 10);
        let spec = design_multisine(1.0, 1.0, 10.0, 0.7, MultisineKind::Full, 0).unwrap();
        let r = draw_realizations(&spec, 1, 2).unwrap().remove(0);
        let cfg = SolverConfig::default();
        let fd = solve_frequency_domain(&net, &[Excitation::main(r.clone())], &cfg).unwrap();
        let td = solve_time_domain(&net, &r, 1.0 / 128.0, 3, &cfg).unwrap();
        let a = fd.signal(SignalId::Output).unwrap();
        let b = td.signal(SignalId::Output).unwrap();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).norm() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn warp_annotation_value() {
        let f = 10.0;
        let ts = 0.01;
        // k f0 ts = 0.1
        let shift = warp_frequency(f, ts) / f - 1.0;
        assert_relative_eq!(shift, 0.034251515267682513, max_relative = 1e-13);
        assert_relative_eq!(shift, (0.1 * PI).tan() / (0.1 * PI) - 1.0, max_relative = 1e-12);
    }

    #[test]
    fn time_domain_rejects_fractional_periods() {
        let net = single(NonlinearBlock::Static(StaticMap::identity()), 5);
        let spec = design_multisine(1.0, 1.0, 5.0, 1.0, MultisineKind::Full, 0).unwrap();
        let r = draw_realizations(&spec, 1, 0).unwrap().remove(0);
        assert!(solve_time_domain(&net, &r, 0.0301, 3, &SolverConfig::default()).is_err());
    }

    #[test]
    fn unsettled_transient_reported() {
        let net = single(NonlinearBlock::LinearFrf(Frf::lowpass(0.01)), 5);
        let spec = design_multisine(1.0, 1.0, 5.0, 1.0, MultisineKind::Full, 0).unwrap();
        let r = draw_realizations(&spec, 1, 0).unwrap().remove(0);
        let e = solve_time_domain(&net, &r, 1.0 / 64.0, 2, &SolverConfig::default()).unwrap_err();
        assert!(matches!(e, Error::NotSettled { discrepancy } if discrepancy > 1e-8));
    }

    fn two_port(alpha: f64) -> Network {
        let s = vec![
            vec![Frf::real(0.2), Frf::real(0.05)],
            vec![Frf::real(2.0), Frf::real(0.3)],
        ];
        let block = PortBlock::new(s, vec![StaticMap::identity(), StaticMap::cubic(alpha)]).unwrap();
        let g = grid(10);
        Network::Port(PortNetwork::matched_chain(g, vec![SubCircuit::nonlinear("x", block)], 50.0).unwrap())
    }

    #[test]
    fn port_network_linear_solution() {
        let net = two_port(0.0);
        let spec = design_multisine(1.0, 1.0, 10.0, 1.0, MultisineKind::Full, 0).unwrap();
        let r = draw_realizations(&spec, 1, 0).unwrap().remove(0);
        let rec = solve_frequency_domain(&net, &[Excitation::main(r.clone())], &SolverConfig::default()).unwrap();
        assert_eq!(rec.diagnostics.iterations, 1);
        let a1 = rec.signal_on(SignalId::PortIncident(0), spec.grid()).unwrap();
        let out = rec.signal_on(SignalId::Output, spec.grid()).unwrap();
        let b2 = rec.signal_on(SignalId::PortReflected(1), spec.grid()).unwrap();
        let scale = 1.0 / (2.0 * 50f64.sqrt());
        for i in 0..spec.grid().len() {
            let v = r.spectrum().values()[i];
            assert!((a1[i] - v * scale).norm() < 1e-14);
            assert!((out[i] - 2.0 * v * scale).norm() < 1e-14);
            assert!((b2[i] - out[i]).norm() < 1e-14);
        }
    }

    #[test]
    fn tickler_bins_are_separate_and_non_invasive() {
        let net = two_port(0.05);
        let spec = design_multisine(1.0, 1.0, 10.0, 1.0, MultisineKind::Full, 0).unwrap();
        let tick = design_tickler(&spec, 0.25, 1e-3, 0).unwrap();
        let cfg = SolverConfig::default();
        let with = run_experiment(&net, &spec, &[(tick.clone(), Site::CurrentAtLoad)], 1, 9, &cfg).unwrap();
        let without = run_experiment(&net, &spec, &[], 1, 9, &cfg).unwrap();
        assert_eq!(with[0].union.subdivisions, 4);
        let a = with[0].signal_on(SignalId::Output, spec.grid()).unwrap();
        let b = without[0].signal_on(SignalId::Output, spec.grid()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-4 * y.norm());
        }
        let t = with[0].signal_on(SignalId::PortIncident(1), tick.grid()).unwrap();
        assert!(t.iter().all(|v| v.norm() > 0.0));
        let roles = with[0].bin_roles().unwrap();
        assert_eq!(roles[4], BinRole::Reference { r: 0, i: 0 });
        assert_eq!(roles[5], BinRole::Reference { r: 1, i: 0 });
        assert_eq!(roles[6], BinRole::Distortion);
    }

    #[test]
    fn sequential_mode_merges_ticklers() {
        let net = two_port(0.05);
        let spec = design_multisine(1.0, 1.0, 10.0, 1.0, MultisineKind::Full, 0).unwrap();
        let t1 = design_tickler(&spec, 0.25, 1e-3, 0).unwrap();
        let t2 = design_tickler(&spec, -0.25, 1e-3, 0).unwrap();
        let ticks = [(t1.clone(), Site::CurrentAtLoad), (t2.clone(), Site::CurrentAtSource)];
        let cfg = SolverConfig {
            tickler_mode: TicklerMode::Sequential,
            ..SolverConfig::default()
        };
        let rec = &run_experiment(&net, &spec, &ticks, 1, 3, &cfg).unwrap()[0];
        assert_eq!(rec.references.len(), 3);
        assert_eq!(rec.diagnostics.solves, 2);
        assert!(rec.signal_on(SignalId::PortIncident(0), t2.grid()).unwrap().iter().all(|v| v.norm() > 0.0));
    }

    #[test]
    fn experiments_are_deterministic_and_ordered() {
        let net = single(NonlinearBlock::Static(StaticMap::cubic(0.1)), 10);
        let spec = design_multisine(1.0, 1.0, 10.0, 0.5, MultisineKind::Full, 0).unwrap();
        let a = run_experiment(&net, &spec, &[], 6, 42, &SolverConfig::default()).unwrap();
        let b = run_realizations(&net, &spec, &[], 3..6, 42, &SolverConfig::default()).unwrap();
        assert_eq!(a.iter().map(|r| r.m).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(&a[3..], &b[..]);
        assert!(run_experiment(&net, &spec, &[], 0, 42, &SolverConfig::default()).is_err());
    }

    #[test]
    fn colliding_ticklers_rejected() {
        let net = two_port(0.0);
        let spec = design_multisine(1.0, 1.0, 10.0, 1.0, MultisineKind::Full, 0).unwrap();
        let t = design_tickler(&spec, 0.25, 1e-3, 0).unwrap();
        let ticks = [(t.clone(), Site::CurrentAtLoad), (t, Site::CurrentAtSource)];
        assert!(Experiment::new(&net, &spec, &ticks, &SolverConfig::default()).is_err());
    }

    #[test]
    fn oversized_union_rejected() {
        let g = FrequencyGrid::new(1.0, vec![1000], Offset::new(1, 999_983).unwrap(), vec![BinLabel::Excited])
            .unwrap();
        let union = UnionGrid::covering(&[&g], 3).unwrap();
        let net = single(NonlinearBlock::Static(StaticMap::identity()), 5);
        assert!(matches!(Prepared::new(&net, union, &SolverConfig::default()), Err(Error::Structural(_))));
    }

    #[test]
    fn signal_ids_round_trip() {
        for id in [
            SignalId::BlockInput(0),
            SignalId::BlockOutput(3),
            SignalId::Output,
            SignalId::PortIncident(1),
            SignalId::PortReflected(7),
        ] {
            assert_eq!(id.to_string().parse::<SignalId>().unwrap(), id);
        }
        assert!("z1".parse::<SignalId>().is_err());
        assert!("u0".parse::<SignalId>().is_err());
    }
}
