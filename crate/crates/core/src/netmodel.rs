//! Network descriptions: SISO blocks in a linear feedback structure and
//! multi-port sub-circuits embedded in an S-parameter package.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excitation::toml_error;
use crate::spectra::{BinLabel, FrequencyGrid, DEFAULT_Z0};

pub type CMat = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// A frequency-dependent complex coefficient.
#[derive(Debug, Clone, PartialEq)]
pub enum Frf {
    Constant(Complex64),
    /// Ratio of polynomials in `s = j 2 pi f`, coefficients in ascending powers.
    Rational { num: Vec<f64>, den: Vec<f64> },
    /// Tabulated values, linearly interpolated on real and imaginary parts.
    Table { freq_hz: Vec<f64>, values: Vec<Complex64> },
}

impl Frf {
    pub fn real(v: f64) -> Frf {
        Frf::Constant(Complex64::new(v, 0.0))
    }

    pub fn zero() -> Frf {
        Frf::Constant(ZERO)
    }

    /// First-order lowpass `1 / (1 + s / (2 pi fc))`.
    pub fn lowpass(fc: f64) -> Frf {
        Frf::Rational {
            num: vec![1.0],
            den: vec![1.0, 1.0 / (2.0 * PI * fc)],
        }
    }

    pub fn table(freq_hz: Vec<f64>, values: Vec<Complex64>) -> Result<Frf> {
        if freq_hz.is_empty() || freq_hz.len() != values.len() {
            return Err(Error::structural("table needs matching, nonempty frequency and value lists"));
        }
        if freq_hz.windows(2).any(|w| !(w[1] > w[0])) || freq_hz.iter().any(|f| !f.is_finite()) {
            return Err(Error::domain("table frequencies must be finite and strictly increasing"));
        }
        Ok(Frf::Table { freq_hz, values })
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Frf::Constant(_))
    }

    /// Value at `f` Hz. Tables hold their end values outside their span.
    pub fn eval(&self, f: f64) -> Complex64 {
        match self {
            Frf::Constant(c) => *c,
            Frf::Rational { num, den } => {
                let s = Complex64::new(0.0, 2.0 * PI * f);
                polyval(num, s) / polyval(den, s)
            }
            Frf::Table { freq_hz, values } => {
                let n = freq_hz.len();
                if f <= freq_hz[0] {
                    return values[0];
                }
                if f >= freq_hz[n - 1] {
                    return values[n - 1];
                }
                let j = freq_hz.partition_point(|&x| x <= f);
                let (f1, f2) = (freq_hz[j - 1], freq_hz[j]);
                let w = (f - f1) / (f2 - f1);
                values[j - 1] * (1.0 - w) + values[j] * w
            }
        }
    }

    /// True when `f` lies inside the tabulated span (always for non-tables).
    pub fn covers(&self, f: f64) -> bool {
        match self {
            Frf::Table { freq_hz, .. } => {
                let tol = 1e-9 * f.abs().max(1.0);
                f >= freq_hz[0] - tol && f <= freq_hz[freq_hz.len() - 1] + tol
            }
            _ => true,
        }
    }

    fn check_coverage(&self, grid: &FrequencyGrid, location: &str) -> Result<()> {
        for f in grid.frequencies() {
            if !self.covers(f) {
                return Err(Error::parse(
                    location,
                    format!("grid coverage: table does not span the analysis frequency {f} Hz"),
                ));
            }
        }
        if let Frf::Rational { den, .. } = self {
            if den.iter().all(|&d| d == 0.0) {
                return Err(Error::parse(location, "rational denominator is zero"));
            }
        }
        Ok(())
    }
}

fn polyval(coeffs: &[f64], x: Complex64) -> Complex64 {
    coeffs.iter().rev().fold(ZERO, |acc, &c| acc * x + c)
}

/// Memoryless map applied sample by sample.
#[derive(Debug, Clone, PartialEq)]
pub enum StaticMap {
    /// `sum_i c_i u^(i+1)`: coefficients start at the linear term.
    Polynomial(Vec<f64>),
    /// `exp(gain u)`.
    Exp { gain: f64 },
    /// `ln(u) / gain`, the inverse of `Exp` with the same gain.
    Log { gain: f64 },
    /// Hard clip to `[-limit, limit]`.
    Saturation { limit: f64 },
}

impl StaticMap {
    pub fn identity() -> StaticMap {
        StaticMap::Polynomial(vec![1.0])
    }

    pub fn cubic(alpha: f64) -> StaticMap {
        StaticMap::Polynomial(vec![1.0, 0.0, alpha])
    }

    /// Evaluate at sample `index` (used in domain diagnostics).
    pub fn eval(&self, u: f64, index: usize) -> Result<f64> {
        Ok(match self {
            StaticMap::Polynomial(c) => c.iter().rev().fold(0.0, |acc, &ci| (acc + ci) * u),
            StaticMap::Exp { gain } => (gain * u).exp(),
            StaticMap::Log { gain } => {
                if !(u > 0.0) {
                    return Err(Error::domain(format!(
                        "logarithm of nonpositive value {u} at sample {index}"
                    )));
                }
                u.ln() / gain
            }
            StaticMap::Saturation { limit } => u.clamp(-limit, *limit),
        })
    }

    /// Small-signal gain at the nominal operating point: zero input, or one
    /// for the logarithm whose natural input is the output of an exponential.
    pub fn nominal_gain(&self) -> f64 {
        match self {
            StaticMap::Polynomial(c) => c.first().copied().unwrap_or(0.0),
            StaticMap::Exp { gain } => *gain,
            StaticMap::Log { gain } => 1.0 / gain,
            StaticMap::Saturation { .. } => 1.0,
        }
    }

    fn validate(&self, location: &str) -> Result<()> {
        let ok = match self {
            StaticMap::Polynomial(c) => !c.is_empty() && c.iter().all(|x| x.is_finite()),
            StaticMap::Exp { gain } | StaticMap::Log { gain } => gain.is_finite() && *gain != 0.0,
            StaticMap::Saturation { limit } => *limit > 0.0 && limit.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::parse(location, "invalid static map parameters"))
        }
    }
}

/// SISO nonlinear block.
#[derive(Debug, Clone, PartialEq)]
pub enum NonlinearBlock {
    Static(StaticMap),
    LinearFrf(Frf),
    /// `post(f) * map(pre(f) * u)`: a Wiener-Hammerstein structure.
    Composed { pre: Frf, map: StaticMap, post: Frf },
}

impl NonlinearBlock {
    pub fn is_static(&self) -> bool {
        matches!(self, NonlinearBlock::Static(_))
    }

    /// Small-signal FRF at `f`.
    pub fn nominal_gain(&self, f: f64) -> Complex64 {
        match self {
            NonlinearBlock::Static(m) => Complex64::new(m.nominal_gain(), 0.0),
            NonlinearBlock::LinearFrf(h) => h.eval(f),
            NonlinearBlock::Composed { pre, map, post } => pre.eval(f) * post.eval(f) * map.nominal_gain(),
        }
    }

    fn frfs(&self) -> Vec<&Frf> {
        match self {
            NonlinearBlock::Static(_) => vec![],
            NonlinearBlock::LinearFrf(h) => vec![h],
            NonlinearBlock::Composed { pre, post, .. } => vec![pre, post],
        }
    }
}

/// Pointwise evaluation of a static block.
pub fn eval_static(block: &NonlinearBlock, u: f64) -> Result<f64> {
    match block {
        NonlinearBlock::Static(m) => m.eval(u, 0),
        _ => Err(Error::structural("block has dynamics; it is not a static map")),
    }
}

/// Multi-port test fixture: `b_i = f_i((S_lin a)_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PortBlock {
    s_lin: Vec<Vec<Frf>>,
    maps: Vec<StaticMap>,
}

impl PortBlock {
    pub fn new(s_lin: Vec<Vec<Frf>>, maps: Vec<StaticMap>) -> Result<Self> {
        let p = maps.len();
        if p == 0 || s_lin.len() != p || s_lin.iter().any(|r| r.len() != p) {
            return Err(Error::structural("port block needs a square S matrix and one map per port"));
        }
        Ok(PortBlock { s_lin, maps })
    }

    /// Unilateral matched two-port: `b1 = 0`, `b2 = map(a1)`.
    pub fn unilateral(map: StaticMap) -> Self {
        PortBlock {
            s_lin: vec![vec![Frf::zero(), Frf::zero()], vec![Frf::real(1.0), Frf::zero()]],
            maps: vec![StaticMap::identity(), map],
        }
    }

    pub fn ports(&self) -> usize {
        self.maps.len()
    }

    pub fn maps(&self) -> &[StaticMap] {
        &self.maps
    }

    pub fn s_lin(&self) -> &[Vec<Frf>] {
        &self.s_lin
    }

    pub fn s_lin_at(&self, f: f64) -> CMat {
        let p = self.ports();
        CMat::from_fn(p, p, |i, j| self.s_lin[i][j].eval(f))
    }

    /// `diag(f_i'(0)) S_lin`.
    pub fn small_signal(&self, f: f64) -> CMat {
        let mut s = self.s_lin_at(f);
        for (i, m) in self.maps.iter().enumerate() {
            let g = m.nominal_gain();
            s.row_mut(i).iter_mut().for_each(|x| *x *= g);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SubCircuitKind {
    Nonlinear(PortBlock),
    /// A linear S-matrix, for instance an estimated BLA.
    Linear(Vec<Vec<Frf>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubCircuit {
    pub name: String,
    pub kind: SubCircuitKind,
}

impl SubCircuit {
    pub fn nonlinear(name: impl Into<String>, block: PortBlock) -> Self {
        SubCircuit {
            name: name.into(),
            kind: SubCircuitKind::Nonlinear(block),
        }
    }

    pub fn linear(name: impl Into<String>, s: Vec<Vec<Frf>>) -> Result<Self> {
        let p = s.len();
        if p == 0 || s.iter().any(|r| r.len() != p) {
            return Err(Error::structural("sub-circuit S matrix must be square"));
        }
        Ok(SubCircuit {
            name: name.into(),
            kind: SubCircuitKind::Linear(s),
        })
    }

    pub fn ports(&self) -> usize {
        match &self.kind {
            SubCircuitKind::Nonlinear(b) => b.ports(),
            SubCircuitKind::Linear(s) => s.len(),
        }
    }

    pub fn small_signal(&self, f: f64) -> CMat {
        match &self.kind {
            SubCircuitKind::Nonlinear(b) => b.small_signal(f),
            SubCircuitKind::Linear(s) => {
                let p = s.len();
                CMat::from_fn(p, p, |i, j| s[i][j].eval(f))
            }
        }
    }
}

/// `N` SISO blocks with `U = A R - M Y` and `Y_t = B Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct SisoFeedbackNetwork {
    analysis_grid: FrequencyGrid,
    names: Vec<String>,
    blocks: Vec<NonlinearBlock>,
    a: Vec<Frf>,
    m: Vec<Vec<Frf>>,
    b: Vec<Frf>,
}

impl SisoFeedbackNetwork {
    pub fn new(
        analysis_grid: FrequencyGrid,
        names: Vec<String>,
        blocks: Vec<NonlinearBlock>,
        a: Vec<Frf>,
        m: Vec<Vec<Frf>>,
        b: Vec<Frf>,
    ) -> Result<Self> {
        let n = blocks.len();
        if n == 0 {
            return Err(Error::structural("network has no blocks"));
        }
        if names.len() != n {
            return Err(Error::structural("one name per block is required"));
        }
        if a.len() != n || b.len() != n || m.len() != n || m.iter().any(|r| r.len() != n) {
            return Err(Error::structural(format!("dimension mismatch: A, M, B must match N = {n} blocks")));
        }
        let net = SisoFeedbackNetwork {
            analysis_grid,
            names,
            blocks,
            a,
            m,
            b,
        };
        net.check_coverage()?;
        Ok(net)
    }

    /// Open-loop chain: block 1 driven by the reference, block n by block n-1,
    /// output taken from the last block.
    pub fn chain(analysis_grid: FrequencyGrid, blocks: Vec<NonlinearBlock>, input_scale: f64) -> Result<Self> {
        let n = blocks.len();
        let names = (1..=n).map(|i| format!("block{i}")).collect();
        let a = (0..n).map(|i| Frf::real(if i == 0 { input_scale } else { 0.0 })).collect();
        let m = (0..n)
            .map(|i| (0..n).map(|j| Frf::real(if i == j + 1 { -1.0 } else { 0.0 })).collect())
            .collect();
        let b = (0..n).map(|i| Frf::real(if i + 1 == n { 1.0 } else { 0.0 })).collect();
        Self::new(analysis_grid, names, blocks, a, m, b)
    }

    fn check_coverage(&self) -> Result<()> {
        let g = &self.analysis_grid;
        for (i, f) in self.a.iter().enumerate() {
            f.check_coverage(g, &format!("siso.a[{i}]"))?;
        }
        for (i, f) in self.b.iter().enumerate() {
            f.check_coverage(g, &format!("siso.b[{i}]"))?;
        }
        for (i, row) in self.m.iter().enumerate() {
            for (j, f) in row.iter().enumerate() {
                f.check_coverage(g, &format!("siso.m[{i}][{j}]"))?;
            }
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            for f in blk.frfs() {
                f.check_coverage(g, &format!("blocks[{i}]"))?;
            }
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[NonlinearBlock] {
        &self.blocks
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn analysis_grid(&self) -> &FrequencyGrid {
        &self.analysis_grid
    }

    pub fn a_entries(&self) -> &[Frf] {
        &self.a
    }

    pub fn m_entries(&self) -> &[Vec<Frf>] {
        &self.m
    }

    pub fn b_entries(&self) -> &[Frf] {
        &self.b
    }

    pub fn a_at(&self, f: f64) -> CMat {
        CMat::from_fn(self.n_blocks(), 1, |i, _| self.a[i].eval(f))
    }

    pub fn m_at(&self, f: f64) -> CMat {
        let n = self.n_blocks();
        CMat::from_fn(n, n, |i, j| self.m[i][j].eval(f))
    }

    pub fn b_at(&self, f: f64) -> CMat {
        CMat::from_fn(1, self.n_blocks(), |_, j| self.b[j].eval(f))
    }

    /// Diagonal of small-signal block gains.
    pub fn nominal_gains(&self, f: f64) -> Vec<Complex64> {
        self.blocks.iter().map(|b| b.nominal_gain(f)).collect()
    }

    pub fn all_frfs(&self) -> impl Iterator<Item = &Frf> {
        self.a
            .iter()
            .chain(self.b.iter())
            .chain(self.m.iter().flatten())
            .chain(self.blocks.iter().flat_map(|b| b.frfs()))
    }
}

/// Global wave-port indices of the embedding system: source, load, the
/// `P + 2` package ports, then the `P` sub-circuit ports.
pub mod ports {
    pub const SOURCE: usize = 0;
    pub const LOAD: usize = 1;

    pub fn package(i: usize) -> usize {
        2 + i
    }

    pub fn sub(p_total: usize, j: usize) -> usize {
        p_total + 4 + j
    }

    pub fn total(p_total: usize) -> usize {
        2 * p_total + 4
    }
}

/// Sub-circuits embedded in a `(P+2)`-port package between a source and a
/// load. Package ports: source side, load side, then the sub-circuit ports in
/// declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct PortNetwork {
    analysis_grid: FrequencyGrid,
    subcircuits: Vec<SubCircuit>,
    package: Vec<Vec<Frf>>,
    gamma_in: Frf,
    gamma_out: Frf,
    z0: f64,
}

impl PortNetwork {
    pub fn new(
        analysis_grid: FrequencyGrid,
        subcircuits: Vec<SubCircuit>,
        package: Vec<Vec<Frf>>,
        gamma_in: Frf,
        gamma_out: Frf,
        z0: f64,
    ) -> Result<Self> {
        if subcircuits.is_empty() {
            return Err(Error::structural("port network has no sub-circuits"));
        }
        if !(z0 > 0.0 && z0.is_finite()) {
            return Err(Error::domain("z0 must be positive"));
        }
        let p: usize = subcircuits.iter().map(|s| s.ports()).sum();
        if package.len() != p + 2 || package.iter().any(|r| r.len() != p + 2) {
            return Err(Error::structural(format!(
                "dimension mismatch: package must be {0}x{0} for P = {p} sub-circuit ports and 2 external ports",
                p + 2
            )));
        }
        let net = PortNetwork {
            analysis_grid,
            subcircuits,
            package,
            gamma_in,
            gamma_out,
            z0,
        };
        let g = &net.analysis_grid;
        net.gamma_in.check_coverage(g, "terminations.gamma_in")?;
        net.gamma_out.check_coverage(g, "terminations.gamma_out")?;
        for (i, row) in net.package.iter().enumerate() {
            for (j, f) in row.iter().enumerate() {
                f.check_coverage(g, &format!("package.s[{i}][{j}]"))?;
            }
        }
        for (n, sc) in net.subcircuits.iter().enumerate() {
            let entries: Vec<&Frf> = match &sc.kind {
                SubCircuitKind::Nonlinear(b) => b.s_lin.iter().flatten().collect(),
                SubCircuitKind::Linear(s) => s.iter().flatten().collect(),
            };
            for f in entries {
                f.check_coverage(g, &format!("subcircuits[{n}]"))?;
            }
        }
        Ok(net)
    }

    /// Matched (`Gamma = 0`) chain of two-port sub-circuits connected by
    /// ideal through lines.
    pub fn matched_chain(analysis_grid: FrequencyGrid, subcircuits: Vec<SubCircuit>, z0: f64) -> Result<Self> {
        if subcircuits.iter().any(|s| s.ports() != 2) {
            return Err(Error::structural("a matched chain is built from two-ports"));
        }
        let n = subcircuits.len();
        let dim = 2 * n + 2;
        let mut pkg = vec![vec![Frf::zero(); dim]; dim];
        let mut link = |i: usize, j: usize| {
            pkg[i][j] = Frf::real(1.0);
            pkg[j][i] = Frf::real(1.0);
        };
        // source side to the first input, each output to the next input,
        // last output to the load side
        link(0, 2);
        for k in 0..n.saturating_sub(1) {
            link(2 + 2 * k + 1, 2 + 2 * (k + 1));
        }
        link(2 + 2 * (n - 1) + 1, 1);
        Self::new(analysis_grid, subcircuits, pkg, Frf::zero(), Frf::zero(), z0)
    }

    /// The same network with other source and load reflection coefficients.
    pub fn with_terminations(self, gamma_in: Frf, gamma_out: Frf) -> Result<Self> {
        Self::new(self.analysis_grid, self.subcircuits, self.package, gamma_in, gamma_out, self.z0)
    }

    pub fn analysis_grid(&self) -> &FrequencyGrid {
        &self.analysis_grid
    }

    pub fn subcircuits(&self) -> &[SubCircuit] {
        &self.subcircuits
    }

    pub fn z0(&self) -> f64 {
        self.z0
    }

    pub fn gamma_in(&self) -> &Frf {
        &self.gamma_in
    }

    pub fn gamma_out(&self) -> &Frf {
        &self.gamma_out
    }

    /// Total number of sub-circuit ports `P`.
    pub fn total_ports(&self) -> usize {
        self.subcircuits.iter().map(|s| s.ports()).sum()
    }

    /// First sub-circuit port index of every sub-circuit.
    pub fn port_offsets(&self) -> Vec<usize> {
        self.subcircuits
            .iter()
            .scan(0, |acc, s| {
                let start = *acc;
                *acc += s.ports();
                Some(start)
            })
            .collect()
    }

    /// `(sub-circuit, local port)` for each sub-circuit port.
    pub fn port_lineage(&self) -> Vec<(usize, usize)> {
        self.subcircuits
            .iter()
            .enumerate()
            .flat_map(|(n, s)| (0..s.ports()).map(move |p| (n, p)))
            .collect()
    }

    pub fn package_at(&self, f: f64) -> CMat {
        let d = self.package.len();
        CMat::from_fn(d, d, |i, j| self.package[i][j].eval(f))
    }

    /// Block-diagonal small-signal S of all sub-circuits.
    pub fn small_signal_at(&self, f: f64) -> CMat {
        let p = self.total_ports();
        let mut s = CMat::zeros(p, p);
        for (sc, off) in self.subcircuits.iter().zip(self.port_offsets()) {
            let blk = sc.small_signal(f);
            s.view_mut((off, off), (blk.nrows(), blk.ncols())).copy_from(&blk);
        }
        s
    }

    /// Connection matrix: source and load face the external package ports,
    /// internal package port `i` faces sub-circuit port `i`.
    pub fn connection_matrix(&self) -> CMat {
        let p = self.total_ports();
        let mut c = CMat::zeros(ports::total(p), ports::total(p));
        let mut pair = |i: usize, j: usize| {
            c[(i, j)] = ONE;
            c[(j, i)] = ONE;
        };
        pair(ports::SOURCE, ports::package(0));
        pair(ports::LOAD, ports::package(1));
        for j in 0..p {
            pair(ports::package(2 + j), ports::sub(p, j));
        }
        c
    }

    /// `T = blockdiag(Gamma_in, Gamma_out, package, s_sub)` at `f`.
    pub fn t_matrix(&self, f: f64, s_sub: &CMat) -> Result<CMat> {
        let p = self.total_ports();
        if s_sub.nrows() != p || s_sub.ncols() != p {
            return Err(Error::structural(format!("sub-circuit S must be {p}x{p}")));
        }
        let mut t = CMat::zeros(ports::total(p), ports::total(p));
        t[(ports::SOURCE, ports::SOURCE)] = self.gamma_in.eval(f);
        t[(ports::LOAD, ports::LOAD)] = self.gamma_out.eval(f);
        t.view_mut((2, 2), (p + 2, p + 2)).copy_from(&self.package_at(f));
        t.view_mut((p + 4, p + 4), (p, p)).copy_from(s_sub);
        Ok(t)
    }

    /// `W = C - T`.
    pub fn w_matrix(&self, f: f64, s_sub: &CMat) -> Result<CMat> {
        Ok(self.connection_matrix() - self.t_matrix(f, s_sub)?)
    }

    /// Wave emitted by the source element per volt of source voltage.
    pub fn voltage_injection(&self, f: f64) -> Complex64 {
        (ONE - self.gamma_in.eval(f)) / (2.0 * self.z0.sqrt())
    }

    /// Wave emitted by a termination per ampere of a parallel current source.
    pub fn current_injection(&self, site: usize, f: f64) -> Complex64 {
        let gamma = if site == ports::SOURCE {
            self.gamma_in.eval(f)
        } else {
            self.gamma_out.eval(f)
        };
        (ONE + gamma) * (0.5 * self.z0.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Siso(SisoFeedbackNetwork),
    Port(PortNetwork),
}

impl Network {
    pub fn analysis_grid(&self) -> &FrequencyGrid {
        match self {
            Network::Siso(n) => n.analysis_grid(),
            Network::Port(n) => n.analysis_grid(),
        }
    }

    pub fn as_siso(&self) -> Option<&SisoFeedbackNetwork> {
        match self {
            Network::Siso(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_port(&self) -> Option<&PortNetwork> {
        match self {
            Network::Port(n) => Some(n),
            _ => None,
        }
    }

    /// Parse a netlist document. `base` resolves relative file references.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Network> {
        let doc: NetlistDoc = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        doc.into_network(base)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Network> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Network::from_toml(&text, path.parent())
    }

    /// Serialize to a netlist document with every table inline.
    pub fn to_toml(&self) -> String {
        toml::to_string(&NetlistDoc::from_network(self)).expect("netlist serialises")
    }
}

/// Parse a netlist; see [`Network::from_toml`].
pub fn parse_network(text: &str) -> Result<Network> {
    Network::from_toml(text, None)
}

// ----------------------------------------------------------------------------
// Netlist documents

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum FrfDoc {
    Real(f64),
    Complex([f64; 2]),
    Rational { num: Vec<f64>, den: Vec<f64> },
    Table { freq_hz: Vec<f64>, re: Vec<f64>, im: Vec<f64> },
}

impl FrfDoc {
    fn into_frf(self, location: &str) -> Result<Frf> {
        Ok(match self {
            FrfDoc::Real(v) => Frf::real(v),
            FrfDoc::Complex([re, im]) => Frf::Constant(Complex64::new(re, im)),
            FrfDoc::Rational { num, den } => {
                if num.is_empty() || den.is_empty() {
                    return Err(Error::parse(location, "rational entry needs num and den coefficients"));
                }
                Frf::Rational { num, den }
            }
            FrfDoc::Table { freq_hz, re, im } => {
                if re.len() != freq_hz.len() || im.len() != freq_hz.len() {
                    return Err(Error::parse(location, "dimension mismatch: table columns differ in length"));
                }
                let values = re.iter().zip(&im).map(|(&r, &i)| Complex64::new(r, i)).collect();
                Frf::table(freq_hz, values).map_err(|e| Error::parse(location, e.to_string()))?
            }
        })
    }

    fn from_frf(f: &Frf) -> FrfDoc {
        match f {
            Frf::Constant(c) if c.im == 0.0 => FrfDoc::Real(c.re),
            Frf::Constant(c) => FrfDoc::Complex([c.re, c.im]),
            Frf::Rational { num, den } => FrfDoc::Rational {
                num: num.clone(),
                den: den.clone(),
            },
            Frf::Table { freq_hz, values } => FrfDoc::Table {
                freq_hz: freq_hz.clone(),
                re: values.iter().map(|v| v.re).collect(),
                im: values.iter().map(|v| v.im).collect(),
            },
        }
    }
}

fn frf_vec(docs: Vec<FrfDoc>, location: &str) -> Result<Vec<Frf>> {
    docs.into_iter()
        .enumerate()
        .map(|(i, d)| d.into_frf(&format!("{location}[{i}]")))
        .collect()
}

fn frf_matrix(docs: Vec<Vec<FrfDoc>>, location: &str) -> Result<Vec<Vec<Frf>>> {
    docs.into_iter()
        .enumerate()
        .map(|(i, row)| frf_vec(row, &format!("{location}[{i}]")))
        .collect()
}

fn frf_matrix_doc(m: &[Vec<Frf>]) -> Vec<Vec<FrfDoc>> {
    m.iter().map(|r| r.iter().map(FrfDoc::from_frf).collect()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridDoc {
    f0_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bins: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kmin: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kmax: Option<u64>,
}

impl GridDoc {
    fn into_grid(self) -> Result<FrequencyGrid> {
        let bins = match (self.bins, self.kmin, self.kmax) {
            (Some(b), None, None) => b,
            (None, Some(lo), Some(hi)) if lo <= hi => (lo..=hi).collect(),
            _ => {
                return Err(Error::parse(
                    "analysis_grid",
                    "give either `bins` or both `kmin` and `kmax` (kmin <= kmax)",
                ))
            }
        };
        FrequencyGrid::uniform(self.f0_hz, bins, BinLabel::Excited)
            .map_err(|e| Error::parse("analysis_grid", e.to_string()))
    }

    fn from_grid(g: &FrequencyGrid) -> GridDoc {
        GridDoc {
            f0_hz: g.f0(),
            bins: Some(g.bins().to_vec()),
            kmin: None,
            kmax: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SisoDoc {
    a: Vec<FrfDoc>,
    m: Vec<Vec<FrfDoc>>,
    b: Vec<FrfDoc>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackageDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s: Option<Vec<Vec<FrfDoc>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TerminationsDoc {
    #[serde(default = "zero_doc")]
    gamma_in: FrfDoc,
    #[serde(default = "zero_doc")]
    gamma_out: FrfDoc,
}

fn zero_doc() -> FrfDoc {
    FrfDoc::Real(0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubCircuitDoc {
    name: String,
    block: toml::Table,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetlistDoc {
    view: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z0: Option<f64>,
    analysis_grid: GridDoc,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    blocks: Vec<toml::Table>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    siso: Option<SisoDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    subcircuits: Vec<SubCircuitDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    package: Option<PackageDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terminations: Option<TerminationsDoc>,
}

fn field<T: serde::de::DeserializeOwned>(table: &toml::Table, key: &str, location: &str) -> Result<T> {
    let v = table
        .get(key)
        .ok_or_else(|| Error::parse(location, format!("missing key `{key}`")))?;
    v.clone()
        .try_into()
        .map_err(|e: toml::de::Error| Error::parse(format!("{location}.{key}"), e.message().to_string()))
}

fn only_keys(table: &toml::Table, allowed: &[&str], location: &str) -> Result<()> {
    for k in table.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(Error::parse(location, format!("unexpected key `{k}`")));
        }
    }
    Ok(())
}

fn parse_map(table: &toml::Table, location: &str) -> Result<StaticMap> {
    let kind: String = field(table, "kind", location)?;
    let map = match kind.as_str() {
        "polynomial" => {
            only_keys(table, &["kind", "coeffs", "name"], location)?;
            StaticMap::Polynomial(field(table, "coeffs", location)?)
        }
        "exp" => {
            only_keys(table, &["kind", "gain", "name"], location)?;
            StaticMap::Exp {
                gain: field(table, "gain", location)?,
            }
        }
        "log" => {
            only_keys(table, &["kind", "gain", "name"], location)?;
            StaticMap::Log {
                gain: field(table, "gain", location)?,
            }
        }
        "saturation" => {
            only_keys(table, &["kind", "limit", "name"], location)?;
            StaticMap::Saturation {
                limit: field(table, "limit", location)?,
            }
        }
        other => return Err(Error::parse(location, format!("unknown block kind `{other}`"))),
    };
    map.validate(location)?;
    Ok(map)
}

fn map_table(m: &StaticMap) -> toml::Table {
    let mut t = toml::Table::new();
    match m {
        StaticMap::Polynomial(c) => {
            t.insert("kind".into(), "polynomial".into());
            t.insert("coeffs".into(), toml::Value::Array(c.iter().map(|&x| x.into()).collect()));
        }
        StaticMap::Exp { gain } => {
            t.insert("kind".into(), "exp".into());
            t.insert("gain".into(), (*gain).into());
        }
        StaticMap::Log { gain } => {
            t.insert("kind".into(), "log".into());
            t.insert("gain".into(), (*gain).into());
        }
        StaticMap::Saturation { limit } => {
            t.insert("kind".into(), "saturation".into());
            t.insert("limit".into(), (*limit).into());
        }
    }
    t
}

fn to_value<T: Serialize>(v: &T) -> toml::Value {
    toml::Value::try_from(v).expect("value serialises")
}

fn parse_block(table: &toml::Table, location: &str) -> Result<(String, NonlinearBlock)> {
    let name = table
        .get("name")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_default();
    let kind: String = field(table, "kind", location)?;
    let block = match kind.as_str() {
        "linear_frf" => {
            only_keys(table, &["kind", "frf", "name"], location)?;
            let doc: FrfDoc = field(table, "frf", location)?;
            NonlinearBlock::LinearFrf(doc.into_frf(&format!("{location}.frf"))?)
        }
        "composed" => {
            only_keys(table, &["kind", "pre", "map", "post", "name"], location)?;
            let pre: FrfDoc = field(table, "pre", location)?;
            let post: FrfDoc = field(table, "post", location)?;
            let map: toml::Table = field(table, "map", location)?;
            NonlinearBlock::Composed {
                pre: pre.into_frf(&format!("{location}.pre"))?,
                map: parse_map(&map, &format!("{location}.map"))?,
                post: post.into_frf(&format!("{location}.post"))?,
            }
        }
        _ => NonlinearBlock::Static(parse_map(table, location)?),
    };
    Ok((name, block))
}

fn block_table(name: &str, b: &NonlinearBlock) -> toml::Table {
    let mut t = match b {
        NonlinearBlock::Static(m) => map_table(m),
        NonlinearBlock::LinearFrf(h) => {
            let mut t = toml::Table::new();
            t.insert("kind".into(), "linear_frf".into());
            t.insert("frf".into(), to_value(&FrfDoc::from_frf(h)));
            t
        }
        NonlinearBlock::Composed { pre, map, post } => {
            let mut t = toml::Table::new();
            t.insert("kind".into(), "composed".into());
            t.insert("pre".into(), to_value(&FrfDoc::from_frf(pre)));
            t.insert("map".into(), toml::Value::Table(map_table(map)));
            t.insert("post".into(), to_value(&FrfDoc::from_frf(post)));
            t
        }
    };
    t.insert("name".into(), name.into());
    t
}

fn parse_subcircuit(doc: SubCircuitDoc, location: &str) -> Result<SubCircuit> {
    let t = &doc.block;
    let kind: String = field(t, "kind", location)?;
    match kind.as_str() {
        "port_block" => {
            only_keys(t, &["kind", "s", "maps"], location)?;
            let s: Vec<Vec<FrfDoc>> = field(t, "s", location)?;
            let s = frf_matrix(s, &format!("{location}.s"))?;
            let maps: Vec<toml::Table> = field(t, "maps", location)?;
            let maps = maps
                .iter()
                .enumerate()
                .map(|(i, m)| parse_map(m, &format!("{location}.maps[{i}]")))
                .collect::<Result<Vec<_>>>()?;
            let block = PortBlock::new(s, maps)
                .map_err(|e| Error::parse(location, format!("dimension mismatch: {e}")))?;
            Ok(SubCircuit::nonlinear(doc.name, block))
        }
        "linear_s" => {
            only_keys(t, &["kind", "s"], location)?;
            let s: Vec<Vec<FrfDoc>> = field(t, "s", location)?;
            let s = frf_matrix(s, &format!("{location}.s"))?;
            SubCircuit::linear(doc.name, s).map_err(|e| Error::parse(location, format!("dimension mismatch: {e}")))
        }
        other => Err(Error::parse(location, format!("unknown block kind `{other}`"))),
    }
}

fn subcircuit_doc(sc: &SubCircuit) -> SubCircuitDoc {
    let mut t = toml::Table::new();
    match &sc.kind {
        SubCircuitKind::Nonlinear(b) => {
            t.insert("kind".into(), "port_block".into());
            t.insert("s".into(), to_value(&frf_matrix_doc(&b.s_lin)));
            t.insert(
                "maps".into(),
                toml::Value::Array(b.maps.iter().map(|m| toml::Value::Table(map_table(m))).collect()),
            );
        }
        SubCircuitKind::Linear(s) => {
            t.insert("kind".into(), "linear_s".into());
            t.insert("s".into(), to_value(&frf_matrix_doc(s)));
        }
    }
    SubCircuitDoc {
        name: sc.name.clone(),
        block: t,
    }
}

impl NetlistDoc {
    fn into_network(self, base: Option<&Path>) -> Result<Network> {
        let grid = self.analysis_grid.into_grid()?;
        let structural = |loc: &str, e: Error| match e {
            Error::Parse { .. } => e,
            other => Error::parse(loc, other.to_string()),
        };
        match self.view.as_str() {
            "siso" => {
                if self.blocks.is_empty() {
                    return Err(Error::parse("blocks", "network has no blocks"));
                }
                let mut names = Vec::new();
                let mut blocks = Vec::new();
                for (i, t) in self.blocks.iter().enumerate() {
                    let (name, b) = parse_block(t, &format!("blocks[{i}]"))?;
                    names.push(if name.is_empty() { format!("block{}", i + 1) } else { name });
                    blocks.push(b);
                }
                let siso = self.siso.ok_or_else(|| Error::parse("siso", "missing section `siso`"))?;
                let a = frf_vec(siso.a, "siso.a")?;
                let m = frf_matrix(siso.m, "siso.m")?;
                let b = frf_vec(siso.b, "siso.b")?;
                SisoFeedbackNetwork::new(grid, names, blocks, a, m, b)
                    .map(Network::Siso)
                    .map_err(|e| structural("siso", e))
            }
            "port" => {
                if self.subcircuits.is_empty() {
                    return Err(Error::parse("subcircuits", "port network has no sub-circuits"));
                }
                let subs = self
                    .subcircuits
                    .into_iter()
                    .enumerate()
                    .map(|(i, d)| parse_subcircuit(d, &format!("subcircuits[{i}]")))
                    .collect::<Result<Vec<_>>>()?;
                let z0 = self.z0.unwrap_or(DEFAULT_Z0);
                let pkg = self.package.unwrap_or_default();
                let package = match (pkg.s, pkg.file) {
                    (Some(s), None) => frf_matrix(s, "package.s")?,
                    (None, Some(file)) => {
                        let path = match base {
                            Some(b) if file.is_relative() => b.join(&file),
                            _ => file.clone(),
                        };
                        let table = SMatrixTable::read(&path)?;
                        if (table.z0 - z0).abs() > 1e-12 * z0 {
                            return Err(Error::parse("package.file", "package z0 differs from the netlist z0"));
                        }
                        table.to_frfs()
                    }
                    _ => return Err(Error::parse("package", "give exactly one of `s` or `file`")),
                };
                let term = self.terminations.unwrap_or(TerminationsDoc {
                    gamma_in: zero_doc(),
                    gamma_out: zero_doc(),
                });
                let gin = term.gamma_in.into_frf("terminations.gamma_in")?;
                let gout = term.gamma_out.into_frf("terminations.gamma_out")?;
                PortNetwork::new(grid, subs, package, gin, gout, z0)
                    .map(Network::Port)
                    .map_err(|e| structural("package", e))
            }
            other => Err(Error::parse("view", format!("unknown view `{other}` (expected siso or port)"))),
        }
    }

    fn from_network(net: &Network) -> NetlistDoc {
        match net {
            Network::Siso(n) => NetlistDoc {
                view: "siso".into(),
                z0: None,
                analysis_grid: GridDoc::from_grid(n.analysis_grid()),
                blocks: n.names.iter().zip(&n.blocks).map(|(nm, b)| block_table(nm, b)).collect(),
                siso: Some(SisoDoc {
                    a: n.a.iter().map(FrfDoc::from_frf).collect(),
                    m: frf_matrix_doc(&n.m),
                    b: n.b.iter().map(FrfDoc::from_frf).collect(),
                }),
                subcircuits: vec![],
                package: None,
                terminations: None,
            },
            Network::Port(n) => NetlistDoc {
                view: "port".into(),
                z0: Some(n.z0),
                analysis_grid: GridDoc::from_grid(n.analysis_grid()),
                blocks: vec![],
                siso: None,
                subcircuits: n.subcircuits.iter().map(subcircuit_doc).collect(),
                package: Some(PackageDoc {
                    s: Some(frf_matrix_doc(&n.package)),
                    file: None,
                }),
                terminations: Some(TerminationsDoc {
                    gamma_in: FrfDoc::from_frf(&n.gamma_in),
                    gamma_out: FrfDoc::from_frf(&n.gamma_out),
                }),
            },
        }
    }
}

// ----------------------------------------------------------------------------
// Tabulated S-matrix files

/// S-matrix tabulated per frequency.
///
/// Text form: a header `# ports=<n> z0=<ohms>`, then one row per frequency
/// holding `f_hz` followed by the entries in column-major order as `re im`
/// pairs. Lines starting with `!` are comments.
#[derive(Debug, Clone, PartialEq)]
pub struct SMatrixTable {
    pub ports: usize,
    pub z0: f64,
    pub freq_hz: Vec<f64>,
    pub data: Vec<CMat>,
}

impl SMatrixTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ports = None;
        let mut z0 = None;
        let mut freq_hz = Vec::new();
        let mut data = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let loc = format!("line {}", ln + 1);
            let line = line.trim();
            if line.is_empty() || line.starts_with('!') {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                for tok in header.split_whitespace() {
                    match tok.split_once('=') {
                        Some(("ports", v)) => {
                            ports = Some(v.parse::<usize>().map_err(|e| Error::parse(&loc, e.to_string()))?)
                        }
                        Some(("z0", v)) => z0 = Some(v.parse::<f64>().map_err(|e| Error::parse(&loc, e.to_string()))?),
                        _ => return Err(Error::parse(&loc, format!("unknown header token `{tok}`"))),
                    }
                }
                continue;
            }
            let p = ports.ok_or_else(|| Error::parse(&loc, "data before the `# ports=` header"))?;
            let nums = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::parse(&loc, format!("`{t}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if nums.len() != 1 + 2 * p * p {
                return Err(Error::parse(
                    &loc,
                    format!("dimension mismatch: expected {} numbers, found {}", 1 + 2 * p * p, nums.len()),
                ));
            }
            freq_hz.push(nums[0]);
            let m = CMat::from_iterator(p, p, nums[1..].chunks(2).map(|c| Complex64::new(c[0], c[1])));
            data.push(m);
        }
        let ports = ports.ok_or_else(|| Error::parse("header", "missing `# ports=` header"))?;
        let z0 = z0.ok_or_else(|| Error::parse("header", "missing z0 in the header"))?;
        if freq_hz.is_empty() {
            return Err(Error::parse("body", "no frequency rows"));
        }
        if freq_hz.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::parse("body", "frequencies must be strictly increasing"));
        }
        Ok(SMatrixTable {
            ports,
            z0,
            freq_hz,
            data,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# ports={} z0={}\n", self.ports, self.z0);
        for (f, m) in self.freq_hz.iter().zip(&self.data) {
            out.push_str(&format!("{f:.17e}"));
            for v in m.iter() {
                out.push_str(&format!(" {:.17e} {:.17e}", v.re, v.im));
            }
            out.push('\n');
        }
        out
    }

    /// Tabulate a matrix of FRFs on the given frequencies.
    pub fn tabulate(entries: &[Vec<Frf>], freq_hz: Vec<f64>, z0: f64) -> Self {
        let p = entries.len();
        let data = freq_hz
            .iter()
            .map(|&f| CMat::from_fn(p, p, |i, j| entries[i][j].eval(f)))
            .collect();
        SMatrixTable {
            ports: p,
            z0,
            freq_hz,
            data,
        }
    }

    pub fn to_frfs(&self) -> Vec<Vec<Frf>> {
        let p = self.ports;
        (0..p)
            .map(|i| {
                (0..p)
                    .map(|j| Frf::Table {
                        freq_hz: self.freq_hz.clone(),
                        values: self.data.iter().map(|m| m[(i, j)]).collect(),
                    })
                    .collect()
            })
            .collect()
    }
}
