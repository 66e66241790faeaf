//! Random-phase multisine design and realization drawing.
//!
//! A multisine `r(t) = sum_k A_k sin(2 pi k f0 t + phi_k)` is described by a
//! [`MultisineSpec`] (grid, amplitudes, kind) and drawn as [`Realization`]s
//! that differ only in their phases. Bin values follow the crate-wide phasor
//! convention, so an excited line holds `-j A_k e^{j phi_k}`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::{BinLabel, FrequencyGrid, Offset, QuantityKind, Spectrum};

pub const DEFAULT_DETECTION_GROUP: usize = 3;

/// Stable sub-seed for `(seed, stage, index)`.
///
/// Mixing is SplitMix64 over an FNV-1a hash of the stage name so the value
/// never depends on the platform or the standard library's hasher.
pub fn derive_seed(seed: u64, stage: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut x = splitmix(seed ^ splitmix(h));
    x = splitmix(x ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultisineKind {
    Full,
    Odd,
    RandomOdd,
    Tickler,
}

impl MultisineKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MultisineKind::Full => "full",
            MultisineKind::Odd => "odd",
            MultisineKind::RandomOdd => "random_odd",
            MultisineKind::Tickler => "tickler",
        }
    }
}

/// Excitation design: candidate lines with labels and amplitudes.
///
/// Detection lines of a random-odd design are part of the grid with zero
/// amplitude; every other bin is excited with a positive amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct MultisineSpec {
    grid: FrequencyGrid,
    amplitudes: Vec<f64>,
    rms_target: f64,
    kind: MultisineKind,
    detection_group_size: usize,
    seed: u64,
}

impl MultisineSpec {
    /// Validated spec from explicit parts. The RMS target is taken from the
    /// amplitudes.
    pub fn new(
        grid: FrequencyGrid,
        amplitudes: Vec<f64>,
        kind: MultisineKind,
        detection_group_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if grid.len() != amplitudes.len() {
            return Err(Error::structural("one amplitude per grid bin is required"));
        }
        if grid.is_empty() {
            return Err(Error::domain("multisine has no lines"));
        }
        for (i, (&a, &label)) in amplitudes.iter().zip(grid.labels()).enumerate() {
            let k = grid.bins()[i];
            match label {
                BinLabel::Excited if !(a > 0.0 && a.is_finite()) => {
                    return Err(Error::domain(format!("excited bin {k} needs a positive amplitude")))
                }
                BinLabel::Detection if a != 0.0 => {
                    return Err(Error::domain(format!("detection bin {k} must carry zero amplitude")))
                }
                BinLabel::Excited | BinLabel::Detection => {}
                other => {
                    return Err(Error::domain(format!(
                        "bin {k} labelled {} cannot be part of an excitation",
                        other.as_str()
                    )))
                }
            }
            if matches!(kind, MultisineKind::Odd | MultisineKind::RandomOdd) && k % 2 == 0 {
                return Err(Error::domain(format!("odd multisine excites even bin {k}")));
            }
        }
        if grid.has_dc() && amplitudes[0] > 0.0 {
            return Err(Error::domain("multisines do not excite DC"));
        }
        match kind {
            MultisineKind::Tickler if grid.offset().is_zero() => {
                return Err(Error::domain("a tickler grid needs a nonzero offset"))
            }
            MultisineKind::Tickler => {}
            _ if !grid.offset().is_zero() => {
                return Err(Error::domain("only tickler grids may be offset"))
            }
            _ => {}
        }
        if !amplitudes.iter().any(|&a| a > 0.0) {
            return Err(Error::domain("multisine has no excited line"));
        }
        let rms_target = rms_of(&amplitudes);
        Ok(MultisineSpec {
            grid,
            amplitudes,
            rms_target,
            kind,
            detection_group_size,
            seed,
        })
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn rms_target(&self) -> f64 {
        self.rms_target
    }

    pub fn kind(&self) -> MultisineKind {
        self.kind
    }

    pub fn detection_group_size(&self) -> usize {
        self.detection_group_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn f0(&self) -> f64 {
        self.grid.f0()
    }

    /// Grid restricted to the excited lines.
    pub fn excited_grid(&self) -> FrequencyGrid {
        self.grid.with_label(BinLabel::Excited)
    }

    pub fn detection_grid(&self) -> FrequencyGrid {
        self.grid.with_label(BinLabel::Detection)
    }

    pub fn excited_count(&self) -> usize {
        self.grid.labels().iter().filter(|l| **l == BinLabel::Excited).count()
    }

    /// RMS value of the periodic signal, `sqrt(sum A_k^2 / 2)`.
    pub fn rms(&self) -> f64 {
        rms_of(&self.amplitudes)
    }

    /// Bins `0..=h_max` labelled by their role under this excitation.
    ///
    /// Odd designs label non-excited bins `even` or `odd-nonexcited`; full
    /// designs label them `out-of-band`.
    pub fn analysis_grid(&self, h_max: u64) -> FrequencyGrid {
        let bins: Vec<u64> = (0..=h_max).collect();
        let labels = bins
            .iter()
            .map(|&k| {
                if let Some(i) = self.grid.position(k) {
                    return self.grid.labels()[i];
                }
                match self.kind {
                    MultisineKind::Odd | MultisineKind::RandomOdd => {
                        if k % 2 == 0 {
                            BinLabel::Even
                        } else {
                            BinLabel::OddNonexcited
                        }
                    }
                    _ => BinLabel::OutOfBand,
                }
            })
            .collect();
        FrequencyGrid::new(self.grid.f0(), bins, Offset::ZERO, labels)
            .expect("analysis grid is well formed")
    }

    /// Structured text form (TOML) of the full design.
    pub fn to_toml(&self) -> String {
        let file = DesignedSpecFile {
            f0_hz: self.grid.f0(),
            kind: self.kind,
            rms: self.rms_target,
            seed: self.seed,
            detection_group_size: self.detection_group_size,
            offset_num: self.grid.offset().num,
            offset_den: self.grid.offset().den,
            bins: self.grid.bins().to_vec(),
            labels: self.grid.labels().iter().map(|l| l.as_str().to_string()).collect(),
            amplitudes: self.amplitudes.clone(),
        };
        toml::to_string(&file).expect("designed spec serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: DesignedSpecFile = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        let labels = file
            .labels
            .iter()
            .map(|s| BinLabel::parse(s))
            .collect::<Result<Vec<_>>>()?;
        let grid = FrequencyGrid::new(
            file.f0_hz,
            file.bins,
            Offset::new(file.offset_num, file.offset_den)?,
            labels,
        )?;
        let spec = MultisineSpec::new(grid, file.amplitudes, file.kind, file.detection_group_size, file.seed)?;
        if (spec.rms() - file.rms).abs() > 1e-9 * file.rms {
            return Err(Error::parse("rms", "stored rms does not match the amplitudes"));
        }
        Ok(spec)
    }
}

fn rms_of(amplitudes: &[f64]) -> f64 {
    (amplitudes.iter().map(|a| a * a).sum::<f64>() / 2.0).sqrt()
}

/// Serialized form of a designed spec.
#[derive(Debug, Serialize, Deserialize)]
struct DesignedSpecFile {
    f0_hz: f64,
    kind: MultisineKind,
    rms: f64,
    seed: u64,
    detection_group_size: usize,
    offset_num: i64,
    offset_den: u64,
    bins: Vec<u64>,
    labels: Vec<String>,
    amplitudes: Vec<f64>,
}

/// Declarative design request, as read from a spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignRequest {
    pub f0_hz: f64,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub kind: MultisineKind,
    pub rms: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_group")]
    pub detection_group_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psd_mask: Option<Vec<f64>>,
}

fn default_group() -> usize {
    DEFAULT_DETECTION_GROUP
}

impl DesignRequest {
    pub fn new(f0_hz: f64, fmin_hz: f64, fmax_hz: f64, rms: f64, kind: MultisineKind, seed: u64) -> Self {
        DesignRequest {
            f0_hz,
            fmin_hz,
            fmax_hz,
            kind,
            rms,
            seed,
            detection_group_size: DEFAULT_DETECTION_GROUP,
            psd_mask: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| toml_error(text, &e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_toml(&text)
    }
}

/// Turn a TOML error into a diagnostic that names the offending line.
pub(crate) fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|span| text[..span.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(1);
    Error::parse(format!("line {line}"), e.message().to_string())
}

fn integer_multiple(f: f64, f0: f64, what: &str) -> Result<u64> {
    let ratio = f / f0;
    let k = ratio.round();
    if !(k >= 0.0) || (ratio - k).abs() > 1e-9 * ratio.abs().max(1.0) {
        return Err(Error::domain(format!("{what} = {f} Hz is not an integer multiple of f0 = {f0} Hz")));
    }
    Ok(k as u64)
}

/// Flat (or mask-shaped) multisine between `fmin` and `fmax`.
pub fn design_multisine(
    f0: f64,
    fmin: f64,
    fmax: f64,
    rms: f64,
    kind: MultisineKind,
    seed: u64,
) -> Result<MultisineSpec> {
    design(&DesignRequest::new(f0, fmin, fmax, rms, kind, seed))
}

/// Design from a full request (group size and optional PSD mask).
pub fn design(req: &DesignRequest) -> Result<MultisineSpec> {
    if !(req.f0_hz > 0.0 && req.f0_hz.is_finite()) {
        return Err(Error::domain("f0 must be positive"));
    }
    if !(req.rms > 0.0 && req.rms.is_finite()) {
        return Err(Error::domain("rms must be positive"));
    }
    let kmin = integer_multiple(req.fmin_hz, req.f0_hz, "fmin")?.max(1);
    let kmax = integer_multiple(req.fmax_hz, req.f0_hz, "fmax")?;
    if kmin > kmax {
        return Err(Error::domain("fmin exceeds fmax: empty grid"));
    }
    let candidates: Vec<u64> = match req.kind {
        MultisineKind::Full => (kmin..=kmax).collect(),
        MultisineKind::Odd | MultisineKind::RandomOdd => (kmin..=kmax).filter(|k| k % 2 == 1).collect(),
        MultisineKind::Tickler => {
            return Err(Error::domain("tickler multisines are designed from a main spec"))
        }
    };
    if candidates.is_empty() {
        return Err(Error::domain("no lines in the requested band"));
    }
    let mut labels = vec![BinLabel::Excited; candidates.len()];
    if req.kind == MultisineKind::RandomOdd {
        let g = req.detection_group_size;
        if g < 2 {
            return Err(Error::domain("detection group size must be at least 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(req.seed, "random-odd", 0));
        for group in labels.chunks_exact_mut(g) {
            let pick = rng.random_range(0..g);
            group[pick] = BinLabel::Detection;
        }
    }
    let shape: Vec<f64> = match &req.psd_mask {
        Some(mask) => {
            if mask.len() != candidates.len() {
                return Err(Error::structural(format!(
                    "psd mask has {} entries for {} candidate lines",
                    mask.len(),
                    candidates.len()
                )));
            }
            mask.clone()
        }
        None => vec![1.0; candidates.len()],
    };
    let mut amplitudes: Vec<f64> = shape
        .iter()
        .zip(&labels)
        .map(|(&s, &l)| if l == BinLabel::Excited { s } else { 0.0 })
        .collect();
    if amplitudes.iter().zip(&labels).any(|(&a, &l)| l == BinLabel::Excited && !(a > 0.0)) {
        return Err(Error::domain("psd mask must be positive on excited lines"));
    }
    let scale = req.rms / rms_of(&amplitudes);
    amplitudes.iter_mut().for_each(|a| *a *= scale);
    let grid = FrequencyGrid::new(req.f0_hz, candidates, Offset::ZERO, labels)?;
    let mut spec = MultisineSpec::new(grid, amplitudes, req.kind, req.detection_group_size, req.seed)?;
    spec.rms_target = req.rms;
    Ok(spec)
}

/// Low-level tickler on the excited lines of `main`, shifted by `f_eps`.
pub fn design_tickler(main: &MultisineSpec, f_eps: f64, rms: f64, seed: u64) -> Result<MultisineSpec> {
    let f0 = main.f0();
    if f_eps == 0.0 || !(f_eps.abs() < f0 / 2.0) {
        return Err(Error::domain(format!("tickler offset {f_eps} Hz must lie in ]0, f0/2[ in magnitude")));
    }
    if !(rms > 0.0 && rms.is_finite()) {
        return Err(Error::domain("rms must be positive"));
    }
    let offset = Offset::from_hz(f_eps, f0)?;
    let bins = main.excited_grid().bins().to_vec();
    let n = bins.len();
    let grid = FrequencyGrid::new(f0, bins, offset, vec![BinLabel::Excited; n])?;
    let amp = rms * (2.0 / n as f64).sqrt();
    let mut spec = MultisineSpec::new(grid, vec![amp; n], MultisineKind::Tickler, 0, seed)?;
    spec.rms_target = rms;
    Ok(spec)
}

/// Check that the main grid and every tickler grid are pairwise disjoint.
pub fn check_disjoint(specs: &[&MultisineSpec]) -> Result<()> {
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            let (ga, gb) = (a.grid(), b.grid());
            if ga.offset() == gb.offset() && ga.bins().iter().any(|k| gb.position(*k).is_some()) {
                return Err(Error::domain(format!(
                    "excitation grids with offset {} collide",
                    ga.offset()
                )));
            }
        }
    }
    Ok(())
}

/// One phase draw of a multisine.
#[derive(Debug, Clone)]
pub struct Realization {
    spec: Arc<MultisineSpec>,
    index: usize,
    phases: Vec<f64>,
    spectrum: Spectrum,
}

impl Realization {
    pub fn spec(&self) -> &MultisineSpec {
        &self.spec
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// Phase per grid bin; detection bins keep a phase but no amplitude.
    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    /// `n` equidistant samples of one period of the base frequency,
    /// evaluated directly from the sine sum.
    pub fn time_samples(&self, n: usize) -> Vec<f64> {
        let grid = self.spec.grid();
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64 / grid.f0();
                self.spec
                    .amplitudes()
                    .iter()
                    .zip(&self.phases)
                    .enumerate()
                    .filter(|(_, (a, _))| **a > 0.0)
                    .map(|(j, (a, p))| a * (2.0 * PI * grid.base_frequency(j) * t + p).sin())
                    .sum()
            })
            .collect()
    }
}

impl Realization {
    /// Realization with explicitly chosen phases, one per grid bin.
    pub fn with_phases(spec: &Arc<MultisineSpec>, m: usize, phases: Vec<f64>) -> Result<Realization> {
        if phases.len() != spec.grid().len() {
            return Err(Error::structural("one phase per grid bin is required"));
        }
        Ok(build_realization(spec, m, phases))
    }
}

/// Realization `m` of `spec`. A pure function of `(spec, m, seed)`.
pub fn draw_realization(spec: &Arc<MultisineSpec>, m: usize, seed: u64) -> Realization {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "phases", m as u64));
    let phases: Vec<f64> = (0..spec.grid().len())
        .map(|_| rng.random::<f64>() * 2.0 * PI)
        .collect();
    build_realization(spec, m, phases)
}

fn build_realization(spec: &Arc<MultisineSpec>, m: usize, phases: Vec<f64>) -> Realization {
    let values = spec
        .amplitudes()
        .iter()
        .zip(&phases)
        .map(|(&a, &p)| {
            if a > 0.0 {
                // A sin(wt + p) = Re{-j A e^{jp} e^{jwt}}
                Complex64::from_polar(a, p) * Complex64::new(0.0, -1.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    let spectrum = Spectrum::new(spec.grid().clone(), values, QuantityKind::Abstract)
        .expect("realization spectrum matches its grid");
    Realization {
        spec: Arc::clone(spec),
        index: m,
        phases,
        spectrum,
    }
}

/// `count` realizations `0..count`.
pub fn draw_realizations(spec: &MultisineSpec, count: usize, seed: u64) -> Result<Vec<Realization>> {
    if count == 0 {
        return Err(Error::domain("at least one realization is required"));
    }
    let spec = Arc::new(spec.clone());
    Ok((0..count).map(|m| draw_realization(&spec, m, seed)).collect())
}
