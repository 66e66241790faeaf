//! Frequency grids, complex spectra and the voltage/current to wave transform.
//!
//! Grids are index based: a bin is an integer `k` against the base frequency
//! `f0`, plus an optional rational offset used by zippered (tickler) grids.
//! Keeping offsets rational means main and tickler bins can be merged onto a
//! common micro-grid without any rounding.
//!
//! Spectral values are one-sided peak phasors: a bin value `X` stands for the
//! real signal `Re{X e^{j 2 pi f t}}`. A sine `A sin(2 pi f t + phi)` therefore
//! has phasor `-j A e^{j phi}` and contributes `A^2 / 2` to the mean-square
//! value.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference impedance used when none is given.
pub const DEFAULT_Z0: f64 = 50.0;

/// Largest denominator accepted when converting a float offset to a ratio.
pub const MAX_OFFSET_DENOMINATOR: u64 = 1_000_000;

/// Grid offset as an exact fraction of the base frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Offset {
    pub num: i64,
    pub den: u64,
}

impl Offset {
    pub const ZERO: Offset = Offset { num: 0, den: 1 };

    pub fn new(num: i64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::domain("offset denominator must be nonzero"));
        }
        let g = gcd(num.unsigned_abs(), den).max(1);
        Ok(Offset {
            num: num / g as i64,
            den: den / g,
        })
    }

    /// Best rational approximation of `offset_hz / f0` with a bounded
    /// denominator. Fails when the ratio is not representable to 1e-12.
    pub fn from_hz(offset_hz: f64, f0: f64) -> Result<Self> {
        if !(f0 > 0.0) || !offset_hz.is_finite() {
            return Err(Error::domain("offset needs a finite value and f0 > 0"));
        }
        let x = offset_hz / f0;
        let (num, den) = rational_approx(x, MAX_OFFSET_DENOMINATOR);
        if (num as f64 / den as f64 - x).abs() > 1e-12 * x.abs().max(1.0) {
            return Err(Error::domain(format!(
                "offset {offset_hz} Hz is not a ratio of f0 with denominator <= {MAX_OFFSET_DENOMINATOR}"
            )));
        }
        Offset::new(num, den)
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::fmt::Display for Offset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

pub(crate) fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

pub(crate) fn lcm(a: u64, b: u64) -> u64 {
    if a == 0 || b == 0 {
        return 0;
    }
    a / gcd(a, b) * b
}

fn rational_approx(x: f64, max_den: u64) -> (i64, u64) {
    let sign = if x < 0.0 { -1 } else { 1 };
    let mut v = x.abs();
    let (mut p0, mut q0, mut p1, mut q1) = (0u64, 1u64, 1u64, 0u64);
    for _ in 0..64 {
        let a = v.floor();
        let ai = a as u64;
        let p2 = ai.saturating_mul(p1).saturating_add(p0);
        let q2 = ai.saturating_mul(q1).saturating_add(q0);
        if q2 > max_den {
            break;
        }
        (p0, q0, p1, q1) = (p1, q1, p2, q2);
        let frac = v - a;
        if frac < 1e-15 {
            break;
        }
        v = 1.0 / frac;
    }
    if q1 == 0 {
        return (0, 1);
    }
    (sign * p1 as i64, q1)
}

/// Role of a bin in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinLabel {
    Excited,
    Detection,
    Even,
    OddNonexcited,
    OutOfBand,
}

impl BinLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            BinLabel::Excited => "excited",
            BinLabel::Detection => "detection",
            BinLabel::Even => "even",
            BinLabel::OddNonexcited => "odd-nonexcited",
            BinLabel::OutOfBand => "out-of-band",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "excited" => BinLabel::Excited,
            "detection" => BinLabel::Detection,
            "even" => BinLabel::Even,
            "odd-nonexcited" => BinLabel::OddNonexcited,
            "out-of-band" => BinLabel::OutOfBand,
            other => return Err(Error::domain(format!("unknown bin label `{other}`"))),
        })
    }
}

/// Ordered set of bins `k * f0 + offset`, each with a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    f0: f64,
    bins: Vec<u64>,
    offset: Offset,
    labels: Vec<BinLabel>,
    /// Time step of a trapezoidal simulation whose warping has been applied.
    warp_ts: Option<f64>,
}

impl FrequencyGrid {
    pub fn new(f0: f64, bins: Vec<u64>, offset: Offset, labels: Vec<BinLabel>) -> Result<Self> {
        if !(f0 > 0.0 && f0.is_finite()) {
            return Err(Error::domain(format!("base frequency must be positive, got {f0}")));
        }
        if bins.len() != labels.len() {
            return Err(Error::structural(format!(
                "{} bins but {} labels",
                bins.len(),
                labels.len()
            )));
        }
        if bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::structural("grid bins must be strictly increasing"));
        }
        // |f_eps| < f0/2
        if 2 * offset.num.unsigned_abs() >= offset.den {
            return Err(Error::domain(format!(
                "grid offset {offset} of f0 is outside ]-f0/2, f0/2["
            )));
        }
        if offset.num < 0 && bins.first() == Some(&0) {
            return Err(Error::domain("negative offset on bin 0 gives a negative frequency"));
        }
        Ok(FrequencyGrid {
            f0,
            bins,
            offset,
            labels,
            warp_ts: None,
        })
    }

    /// Grid with the same label on every bin and no offset.
    pub fn uniform(f0: f64, bins: Vec<u64>, label: BinLabel) -> Result<Self> {
        let labels = vec![label; bins.len()];
        Self::new(f0, bins, Offset::ZERO, labels)
    }

    pub fn f0(&self) -> f64 {
        self.f0
    }

    pub fn bins(&self) -> &[u64] {
        &self.bins
    }

    pub fn labels(&self) -> &[BinLabel] {
        &self.labels
    }

    pub fn offset(&self) -> Offset {
        self.offset
    }

    pub fn offset_hz(&self) -> f64 {
        self.offset.as_f64() * self.f0
    }

    pub fn warp_ts(&self) -> Option<f64> {
        self.warp_ts
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Unwarped frequency of bin position `i`.
    pub fn base_frequency(&self, i: usize) -> f64 {
        (self.bins[i] as f64 + self.offset.as_f64()) * self.f0
    }

    /// Frequency of bin position `i`, warped if the grid carries a time step.
    pub fn frequency(&self, i: usize) -> f64 {
        let f = self.base_frequency(i);
        match self.warp_ts {
            Some(ts) => warp_frequency(f, ts),
            None => f,
        }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.frequency(i)).collect()
    }

    pub fn position(&self, k: u64) -> Option<usize> {
        self.bins.binary_search(&k).ok()
    }

    pub fn has_dc(&self) -> bool {
        self.offset.is_zero() && self.bins.first() == Some(&0)
    }

    /// Sub-grid of the bins carrying `label`.
    pub fn with_label(&self, label: BinLabel) -> FrequencyGrid {
        self.filter(|_, l| l == label)
    }

    pub fn filter(&self, mut keep: impl FnMut(u64, BinLabel) -> bool) -> FrequencyGrid {
        let (bins, labels): (Vec<_>, Vec<_>) = self
            .bins
            .iter()
            .zip(&self.labels)
            .filter(|(k, l)| keep(**k, **l))
            .map(|(k, l)| (*k, *l))
            .unzip();
        FrequencyGrid {
            f0: self.f0,
            bins,
            offset: self.offset,
            labels,
            warp_ts: self.warp_ts,
        }
    }

    /// True when both grids describe the same frequencies.
    pub fn same_bins(&self, other: &FrequencyGrid) -> bool {
        self.f0 == other.f0
            && self.offset == other.offset
            && self.bins == other.bins
            && self.warp_ts == other.warp_ts
    }
}

/// Warped frequency of a trapezoidal simulation with time step `ts`.
pub fn warp_frequency(f: f64, ts: f64) -> f64 {
    (PI * f * ts).tan() / (PI * ts)
}

/// Map every bin of `grid` onto the frequency seen by a trapezoidal
/// (bilinear) discretisation with step `ts`. Labels are kept.
pub fn warp_grid(grid: &FrequencyGrid, ts: f64) -> Result<FrequencyGrid> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::domain(format!("time step must be positive, got {ts}")));
    }
    if grid.warp_ts.is_some() {
        return Err(Error::structural("grid is already warped"));
    }
    for i in 0..grid.len() {
        let f = grid.base_frequency(i);
        if f * ts >= 0.5 {
            return Err(Error::domain(format!(
                "bin {} at {f} Hz is at or above Nyquist for ts = {ts}",
                grid.bins[i]
            )));
        }
    }
    let mut out = grid.clone();
    out.warp_ts = Some(ts);
    Ok(out)
}

/// Common micro-grid for a set of (possibly zippered) grids sharing `f0`.
///
/// The micro fundamental is `f0 / subdivisions`, with `subdivisions` the
/// least common multiple of all offset denominators. Harmonics `0..=harmonics`
/// of the micro fundamental are retained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnionGrid {
    pub f0: f64,
    pub subdivisions: u64,
    pub harmonics: usize,
}

impl UnionGrid {
    /// Union of `grids` keeping `order_factor` times the highest bin.
    pub fn covering(grids: &[&FrequencyGrid], order_factor: usize) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::structural("union of zero grids"))?;
        let f0 = first.f0;
        let mut subdivisions = 1u64;
        for g in grids {
            if (g.f0 - f0).abs() > 1e-12 * f0 {
                return Err(Error::structural("grids in one experiment must share f0"));
            }
            subdivisions = lcm(subdivisions, g.offset.den);
        }
        let mut union = UnionGrid {
            f0,
            subdivisions,
            harmonics: 0,
        };
        let mut top = 0u64;
        for g in grids {
            for i in 0..g.len() {
                top = top.max(union.micro_index(g, i)?);
            }
        }
        union.harmonics = (top as usize).max(1) * order_factor.max(1);
        Ok(union)
    }

    pub fn micro_f0(&self) -> f64 {
        self.f0 / self.subdivisions as f64
    }

    /// Micro-grid index of bin position `i` of `grid`.
    pub fn micro_index(&self, grid: &FrequencyGrid, i: usize) -> Result<u64> {
        if self.subdivisions % grid.offset.den != 0 {
            return Err(Error::structural(format!(
                "grid offset {} does not divide the union subdivision {}",
                grid.offset, self.subdivisions
            )));
        }
        let scale = (self.subdivisions / grid.offset.den) as i64;
        let idx = grid.bins[i] as i64 * self.subdivisions as i64 + grid.offset.num * scale;
        u64::try_from(idx).map_err(|_| Error::domain("negative frequency on the union grid"))
    }

    /// Micro-grid indices of every bin of `grid`.
    pub fn indices_of(&self, grid: &FrequencyGrid) -> Result<Vec<usize>> {
        (0..grid.len())
            .map(|i| {
                let idx = self.micro_index(grid, i)? as usize;
                if idx > self.harmonics {
                    return Err(Error::structural(format!(
                        "bin {} lies beyond the retained harmonic order {}",
                        grid.bins[i], self.harmonics
                    )));
                }
                Ok(idx)
            })
            .collect()
    }

    pub fn frequency(&self, h: usize) -> f64 {
        h as f64 * self.micro_f0()
    }

    /// Full micro-grid `0..=harmonics` as a frequency grid against the micro
    /// fundamental, labelled out-of-band.
    pub fn as_grid(&self) -> FrequencyGrid {
        FrequencyGrid {
            f0: self.micro_f0(),
            bins: (0..=self.harmonics as u64).collect(),
            offset: Offset::ZERO,
            labels: vec![BinLabel::OutOfBand; self.harmonics + 1],
            warp_ts: None,
        }
    }
}

/// Physical meaning of spectral values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantityKind {
    Voltage,
    Current,
    IncidentWave,
    ReflectedWave,
    Abstract,
}

impl QuantityKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuantityKind::Voltage => "voltage",
            QuantityKind::Current => "current",
            QuantityKind::IncidentWave => "incident-wave",
            QuantityKind::ReflectedWave => "reflected-wave",
            QuantityKind::Abstract => "abstract",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "voltage" => QuantityKind::Voltage,
            "current" => QuantityKind::Current,
            "incident-wave" => QuantityKind::IncidentWave,
            "reflected-wave" => QuantityKind::ReflectedWave,
            "abstract" => QuantityKind::Abstract,
            other => return Err(Error::domain(format!("unknown quantity kind `{other}`"))),
        })
    }
}

/// Complex phasor values on a frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    grid: FrequencyGrid,
    values: Vec<Complex64>,
    kind: QuantityKind,
}

impl Spectrum {
    pub fn new(grid: FrequencyGrid, values: Vec<Complex64>, kind: QuantityKind) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(Error::structural(format!(
                "spectrum has {} values on a {}-bin grid",
                values.len(),
                grid.len()
            )));
        }
        if grid.has_dc() {
            let dc = values[0];
            if dc.im.abs() > 1e-12 * dc.re.abs().max(1.0) {
                return Err(Error::domain("DC bin must be real"));
            }
        }
        Ok(Spectrum { grid, values, kind })
    }

    pub fn zeros(grid: FrequencyGrid, kind: QuantityKind) -> Self {
        let values = vec![Complex64::new(0.0, 0.0); grid.len()];
        Spectrum { grid, values, kind }
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn kind(&self) -> QuantityKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at integer bin `k`, if the grid contains it.
    pub fn at(&self, k: u64) -> Option<Complex64> {
        self.grid.position(k).map(|i| self.values[i])
    }

    pub fn power(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Same values reinterpreted on a grid with identical bins (e.g. warped).
    pub fn regrid(&self, grid: FrequencyGrid) -> Result<Spectrum> {
        if grid.bins != self.grid.bins {
            return Err(Error::structural("regrid needs identical bin indices"));
        }
        Spectrum::new(grid, self.values.clone(), self.kind)
    }

    /// Columnar text form: a short metadata header, then
    /// `k,f_hz,re,im,label` rows with 17 significant digits.
    pub fn to_columnar(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# bladca-spectrum v1");
        let _ = write!(
            s,
            "# f0_hz={:.16e} offset={} kind={}",
            self.grid.f0,
            self.grid.offset,
            self.kind.as_str()
        );
        if let Some(ts) = self.grid.warp_ts {
            let _ = write!(s, " warp_ts={ts:.16e}");
        }
        s.push('\n');
        s.push_str("k,f_hz,re,im,label\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{:.16e},{:.16e},{:.16e},{}",
                self.grid.bins[i],
                self.grid.frequency(i),
                v.re,
                v.im,
                self.grid.labels[i].as_str()
            );
        }
        s
    }

    pub fn from_columnar(text: &str) -> Result<Spectrum> {
        let mut f0 = None;
        let mut offset = Offset::ZERO;
        let mut kind = QuantityKind::Abstract;
        let mut warp_ts = None;
        let mut bins = Vec::new();
        let mut labels = Vec::new();
        let mut values = Vec::new();
        let mut saw_header = false;
        for (lineno, raw) in text.lines().enumerate() {
            let loc = || format!("line {}", lineno + 1);
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for tok in meta.split_whitespace() {
                    let Some((key, val)) = tok.split_once('=') else {
                        continue;
                    };
                    match key {
                        "f0_hz" => {
                            f0 = Some(val.parse::<f64>().map_err(|e| Error::parse(loc(), e.to_string()))?)
                        }
                        "offset" => {
                            let (n, d) = val
                                .split_once('/')
                                .ok_or_else(|| Error::parse(loc(), "offset must be num/den"))?;
                            let n = n.parse().map_err(|_| Error::parse(loc(), "bad offset numerator"))?;
                            let d = d.parse().map_err(|_| Error::parse(loc(), "bad offset denominator"))?;
                            offset = Offset::new(n, d)?;
                        }
                        "kind" => kind = QuantityKind::parse(val)?,
                        "warp_ts" => {
                            warp_ts = Some(val.parse::<f64>().map_err(|e| Error::parse(loc(), e.to_string()))?)
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if !saw_header {
                let cols: Vec<_> = line.split(',').map(str::trim).collect();
                if cols != ["k", "f_hz", "re", "im", "label"] {
                    return Err(Error::parse(loc(), "expected header k,f_hz,re,im,label"));
                }
                saw_header = true;
                continue;
            }
            let cols: Vec<_> = line.split(',').map(str::trim).collect();
            if cols.len() != 5 {
                return Err(Error::parse(loc(), format!("expected 5 columns, found {}", cols.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(loc(), e.to_string()));
            bins.push(cols[0].parse::<u64>().map_err(|e| Error::parse(loc(), e.to_string()))?);
            values.push(Complex64::new(num(cols[2])?, num(cols[3])?));
            labels.push(BinLabel::parse(cols[4]).map_err(|e| Error::parse(loc(), e.to_string()))?);
        }
        let f0 = f0.ok_or_else(|| Error::parse("header", "missing f0_hz"))?;
        let mut grid = FrequencyGrid::new(f0, bins, offset, labels)?;
        if let Some(ts) = warp_ts {
            grid = warp_grid(&grid, ts)?;
        }
        Spectrum::new(grid, values, kind)
    }

    pub fn write_columnar(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_columnar()).map_err(|e| Error::io(path, e))
    }

    pub fn read_columnar(path: impl AsRef<Path>) -> Result<Spectrum> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Spectrum::from_columnar(&text)
    }
}

/// Incident and reflected waves at one port.
#[derive(Debug, Clone, PartialEq)]
pub struct WavePair {
    pub a: Spectrum,
    pub b: Spectrum,
    pub z0: f64,
}

fn check_z0(z0: f64) -> Result<()> {
    if z0 > 0.0 && z0.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("reference impedance must be positive, got {z0}")))
    }
}

/// Port voltage and current (flowing into the port) to power waves.
pub fn vi_to_waves(v: &Spectrum, i: &Spectrum, z0: f64) -> Result<WavePair> {
    check_z0(z0)?;
    if !v.grid.same_bins(&i.grid) {
        return Err(Error::structural("voltage and current spectra are on different grids"));
    }
    let scale = 1.0 / (2.0 * z0.sqrt());
    let (a, b): (Vec<_>, Vec<_>) = v
        .values
        .iter()
        .zip(&i.values)
        .map(|(&vv, &ii)| ((vv + ii * z0) * scale, (vv - ii * z0) * scale))
        .unzip();
    Ok(WavePair {
        a: Spectrum::new(v.grid.clone(), a, QuantityKind::IncidentWave)?,
        b: Spectrum::new(v.grid.clone(), b, QuantityKind::ReflectedWave)?,
        z0,
    })
}

/// Inverse of [`vi_to_waves`].
pub fn waves_to_vi(w: &WavePair) -> Result<(Spectrum, Spectrum)> {
    check_z0(w.z0)?;
    if !w.a.grid.same_bins(&w.b.grid) {
        return Err(Error::structural("incident and reflected waves are on different grids"));
    }
    let sq = w.z0.sqrt();
    let (v, i): (Vec<_>, Vec<_>) = w
        .a
        .values
        .iter()
        .zip(&w.b.values)
        .map(|(&a, &b)| ((a + b) * sq, (a - b) / sq))
        .unzip();
    Ok((
        Spectrum::new(w.a.grid.clone(), v, QuantityKind::Voltage)?,
        Spectrum::new(w.a.grid.clone(), i, QuantityKind::Current)?,
    ))
}
