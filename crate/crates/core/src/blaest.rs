//! Best linear approximation estimates from steady-state records.
//!
//! Every record contributes `Z^(m) = [Y; U] / R` per excited bin of a
//! reference; averaging over realizations gives the SIMO BLA and its sample
//! covariance. SISO BLAs are ratios of SIMO entries, MIMO BLAs combine the
//! SIMO estimates of several (zippered) references.

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::CMat;
use crate::solver::{SignalId, SteadyStateRecord};
use crate::spectra::{BinLabel, FrequencyGrid};

/// Condition number of `G_{R->A}` above which a MIMO bin is flagged.
pub const DEFAULT_COND_THRESHOLD: f64 = 1e8;

/// Which C_Z variant a downstream computation used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CzVariant {
    /// Residuals of `[Y; U] / R`, rescaled by the mean `|R|^2` of the bin.
    NormalizedRescaled,
    /// Residuals of the raw `[Y; U]` spectra.
    Raw,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub m_used: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub record_hashes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cz_variant: Option<CzVariant>,
}

pub(crate) mod cmat_serde {
    use super::CMat;
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    type Rows = Vec<Vec<Complex64>>;

    fn rows(m: &CMat) -> Rows {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    }

    fn matrix(r: Rows) -> Result<CMat, String> {
        let n = r.len();
        let c = r.first().map_or(0, |x| x.len());
        if r.iter().any(|x| x.len() != c) {
            return Err("ragged matrix".into());
        }
        Ok(CMat::from_fn(n, c, |i, j| r[i][j]))
    }

    pub fn serialize<S: Serializer>(v: &[CMat], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<CMat>, D::Error> {
        let raw = Vec::<Rows>::deserialize(d)?;
        raw.into_iter()
            .map(|r| matrix(r).map_err(serde::de::Error::custom))
            .collect()
    }
}

pub(crate) mod cvec_serde {
    use nalgebra::DVector;
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[DVector<Complex64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| x.iter().copied().collect::<Vec<_>>())
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<Complex64>>, D::Error> {
        Ok(Vec::<Vec<Complex64>>::deserialize(d)?
            .into_iter()
            .map(DVector::from_vec)
            .collect())
    }
}

/// Sum of `f(i)` over `0..n` by recursive halving, so the rounding pattern
/// does not depend on how the work is scheduled.
pub(crate) fn pairwise_sum(lo: usize, hi: usize, f: &dyn Fn(usize) -> CMat) -> CMat {
    if hi - lo <= 4 {
        let mut acc = f(lo);
        for i in lo + 1..hi {
            acc += f(i);
        }
        return acc;
    }
    let mid = lo + (hi - lo) / 2;
    pairwise_sum(lo, mid, f) + pairwise_sum(mid, hi, f)
}

/// SIMO BLA from one reference to stacked outputs over inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimoBlaEstimate {
    pub grid: FrequencyGrid,
    pub reference: usize,
    pub outputs: Vec<String>,
    pub inputs: Vec<String>,
    #[serde(with = "cvec_serde")]
    pub z: Vec<DVector<Complex64>>,
    /// Covariance of the mean of `Z^(m)` (reference-normalized).
    #[serde(with = "cmat_serde")]
    pub cz: Vec<CMat>,
    /// The same covariance computed from raw, unnormalized spectra.
    #[serde(with = "cmat_serde")]
    pub cz_raw: Vec<CMat>,
    /// Mean `|R|^2` over realizations per bin.
    pub ref_power: Vec<f64>,
    pub m_used: usize,
    pub provenance: Provenance,
}

impl SimoBlaEstimate {
    pub fn dim(&self) -> usize {
        self.outputs.len() + self.inputs.len()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Largest deviation from Hermitian symmetry, relative to the largest
    /// diagonal entry, over all bins.
    pub fn hermitian_defect(&self) -> f64 {
        self.cz
            .iter()
            .map(|c| {
                let scale = c.diagonal().iter().map(|x| x.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
                (c - c.adjoint()).iter().map(|x| x.norm()).fold(0.0, f64::max) / scale
            })
            .fold(0.0, f64::max)
    }
}

/// Estimate the SIMO BLA from reference `reference` to the stacked
/// `[outputs; inputs]` over the excited bins of that reference.
pub fn estimate_simo(
    records: &[SteadyStateRecord],
    reference: usize,
    outputs: &[SignalId],
    inputs: &[SignalId],
) -> Result<SimoBlaEstimate> {
    let m_count = records.len();
    if m_count < 2 {
        return Err(Error::domain("at least two realizations are needed for a covariance"));
    }
    let first = records[0].reference(reference)?;
    let grid = first.grid().with_label(BinLabel::Excited);
    if grid.is_empty() {
        return Err(Error::domain("the reference has no excited bins"));
    }
    let ids: Vec<SignalId> = outputs.iter().chain(inputs).copied().collect();
    let d = ids.len();
    let nb = grid.len();
    // per record: reference values and signal values on the excited bins
    let per_record: Vec<(Vec<Complex64>, Vec<Vec<Complex64>>)> = records
        .par_iter()
        .map(|rec| {
            let r_spec = rec.reference(reference)?;
            if !r_spec.grid().same_bins(first.grid()) {
                return Err(Error::structural(format!("record {} uses a different reference grid", rec.m)));
            }
            let r: Vec<Complex64> = grid
                .bins()
                .iter()
                .map(|&k| r_spec.at(k).expect("excited bin of the reference grid"))
                .collect();
            for (i, v) in r.iter().enumerate() {
                if v.norm() == 0.0 {
                    return Err(Error::domain(format!(
                        "reference is zero at realization m = {}, bin k = {}",
                        rec.m,
                        grid.bins()[i]
                    )));
                }
            }
            let sig = ids
                .iter()
                .map(|&id| rec.signal_on(id, &grid))
                .collect::<Result<Vec<_>>>()?;
            Ok((r, sig))
        })
        .collect::<Result<_>>()?;

    let mf = m_count as f64;
    let per_bin: Vec<(DVector<Complex64>, CMat, CMat, f64)> = (0..nb)
        .into_par_iter()
        .map(|b| {
            let zm = |m: usize| -> DVector<Complex64> {
                let (r, sig) = &per_record[m];
                DVector::from_fn(d, |i, _| sig[i][b] / r[b])
            };
            let xm = |m: usize| -> DVector<Complex64> {
                let (_, sig) = &per_record[m];
                DVector::from_fn(d, |i, _| sig[i][b])
            };
            let mean = pairwise_sum(0, m_count, &|m| col(zm(m))) / Complex64::from(mf);
            let mean_raw = pairwise_sum(0, m_count, &|m| col(xm(m))) / Complex64::from(mf);
            let norm = Complex64::from(mf * (mf - 1.0));
            let cz = pairwise_sum(0, m_count, &|m| {
                let r = col(zm(m)) - &mean;
                &r * r.adjoint()
            }) / norm;
            let cz_raw = pairwise_sum(0, m_count, &|m| {
                let r = col(xm(m)) - &mean_raw;
                &r * r.adjoint()
            }) / norm;
            let rp = pairwise_sum(0, m_count, &|m| {
                CMat::from_element(1, 1, Complex64::from(per_record[m].0[b].norm_sqr()))
            })[(0, 0)]
                .re
                / mf;
            (mean.column(0).into_owned(), hermitize(cz), hermitize(cz_raw), rp)
        })
        .collect();
    let mut est = SimoBlaEstimate {
        grid,
        reference,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
        z: Vec::with_capacity(nb),
        cz: Vec::with_capacity(nb),
        cz_raw: Vec::with_capacity(nb),
        ref_power: Vec::with_capacity(nb),
        m_used: m_count,
        provenance: Provenance {
            source: format!("simo reference {reference}"),
            m_used: m_count,
            ..Provenance::default()
        },
    };
    for (z, cz, raw, rp) in per_bin {
        est.z.push(z);
        est.cz.push(cz);
        est.cz_raw.push(raw);
        est.ref_power.push(rp);
    }
    Ok(est)
}

fn col(v: DVector<Complex64>) -> CMat {
    let n = v.len();
    CMat::from_vec(n, 1, v.data.into())
}

/// Symmetrize and zero the imaginary part of the diagonal.
pub(crate) fn hermitize(c: CMat) -> CMat {
    let mut h = (&c + c.adjoint()) * Complex64::from(0.5);
    for i in 0..h.nrows() {
        h[(i, i)].im = 0.0;
    }
    h
}

/// SISO BLA `G = G_RY / G_RU` with its variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SisoBlaEstimate {
    pub grid: FrequencyGrid,
    pub g: Vec<Complex64>,
    pub variance: Vec<f64>,
    /// Bins whose denominator vanished; excluded downstream.
    pub flagged: Vec<bool>,
    pub provenance: Provenance,
}

impl SisoBlaEstimate {
    pub fn sigma(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    pub fn max_sigma(&self) -> f64 {
        self.variance
            .iter()
            .zip(&self.flagged)
            .filter(|(_, f)| !**f)
            .map(|(v, _)| v.sqrt())
            .fold(0.0, f64::max)
    }
}

/// SISO BLA from output `out_index` (an index into `outputs`) and input
/// `in_index` (an index into `inputs`) of a SIMO estimate.
pub fn simo_to_siso(simo: &SimoBlaEstimate, out_index: usize, in_index: usize) -> Result<SisoBlaEstimate> {
    let no = simo.outputs.len();
    if out_index >= no || in_index >= simo.inputs.len() {
        return Err(Error::structural("SISO indices outside the SIMO estimate"));
    }
    let (iy, iu) = (out_index, no + in_index);
    let scale = simo.z.iter().map(|z| z[iu].norm()).fold(0.0, f64::max);
    let mut g = Vec::with_capacity(simo.len());
    let mut variance = Vec::with_capacity(simo.len());
    let mut flagged = Vec::with_capacity(simo.len());
    for (z, c) in simo.z.iter().zip(&simo.cz) {
        let (gry, gru) = (z[iy], z[iu]);
        if !(gru.norm() > 1e-14 * scale) {
            g.push(Complex64::new(0.0, 0.0));
            variance.push(0.0);
            flagged.push(true);
            continue;
        }
        let gb = gry / gru;
        // V C V^H with V = [1, -G] on the (y, u) sub-block
        let v = [Complex64::new(1.0, 0.0), -gb];
        let idx = [iy, iu];
        let mut q = Complex64::new(0.0, 0.0);
        for a in 0..2 {
            for b in 0..2 {
                q += v[a] * c[(idx[a], idx[b])] * v[b].conj();
            }
        }
        g.push(gb);
        variance.push((q.re / gru.norm_sqr()).max(0.0));
        flagged.push(false);
    }
    Ok(SisoBlaEstimate {
        grid: simo.grid.clone(),
        g,
        variance,
        flagged,
        provenance: Provenance {
            source: format!(
                "siso from {} over {} ({})",
                simo.outputs[out_index], simo.inputs[in_index], simo.provenance.source
            ),
            m_used: simo.m_used,
            ..simo.provenance.clone()
        },
    })
}

/// Linear interpolation of a SIMO estimate onto `target` frequencies, with
/// nearest-neighbour hold beyond the ends. Covariances of independent
/// neighbours combine with squared weights.
pub fn interpolate_simo(simo: &SimoBlaEstimate, target: &[f64]) -> (Vec<DVector<Complex64>>, Vec<CMat>) {
    let f = simo.grid.frequencies();
    let n = f.len();
    let mut zs = Vec::with_capacity(target.len());
    let mut cs = Vec::with_capacity(target.len());
    for &x in target {
        let j = f.partition_point(|&v| v <= x);
        if j == 0 || n == 1 {
            zs.push(simo.z[0].clone());
            cs.push(simo.cz[0].clone());
        } else if j == n {
            zs.push(simo.z[n - 1].clone());
            cs.push(simo.cz[n - 1].clone());
        } else {
            let w = (x - f[j - 1]) / (f[j] - f[j - 1]);
            let (w1, w2) = (Complex64::from(1.0 - w), Complex64::from(w));
            zs.push(&simo.z[j - 1] * w1 + &simo.z[j] * w2);
            cs.push(&simo.cz[j - 1] * (w1 * w1) + &simo.cz[j] * (w2 * w2));
        }
    }
    (zs, cs)
}

/// MIMO BLA `S = G_RB G_RA^-1` of one sub-circuit on the main grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimoBlaEstimate {
    pub grid: FrequencyGrid,
    pub ports: usize,
    #[serde(with = "cmat_serde")]
    pub s: Vec<CMat>,
    /// Covariance of column-major `vec(S)`.
    #[serde(with = "cmat_serde")]
    pub cov: Vec<CMat>,
    /// Condition number of `G_RA` per bin.
    pub cond: Vec<f64>,
    pub flagged: Vec<bool>,
    pub provenance: Provenance,
}

impl MimoBlaEstimate {
    /// Estimate with known matrices and no uncertainty.
    pub fn from_matrices(grid: FrequencyGrid, s: Vec<CMat>, source: &str) -> Result<Self> {
        let p = s.first().map_or(0, |m| m.nrows());
        if s.len() != grid.len() || s.iter().any(|m| m.nrows() != p || m.ncols() != p) || p == 0 {
            return Err(Error::structural("one square matrix per grid bin is required"));
        }
        let n = s.len();
        Ok(MimoBlaEstimate {
            grid,
            ports: p,
            s,
            cov: vec![CMat::zeros(p * p, p * p); n],
            cond: vec![1.0; n],
            flagged: vec![false; n],
            provenance: Provenance {
                source: source.to_string(),
                ..Provenance::default()
            },
        })
    }

    /// Variance of entry `(i, j)` per bin.
    pub fn variance(&self, i: usize, j: usize) -> Vec<f64> {
        let v = j * self.ports + i;
        self.cov.iter().map(|c| c[(v, v)].re.max(0.0)).collect()
    }

    pub fn entry(&self, i: usize, j: usize) -> Vec<Complex64> {
        self.s.iter().map(|m| m[(i, j)]).collect()
    }

    /// Pin entry `(i, j)` to supplied values (e.g. small-signal S), removing
    /// its uncertainty. Recorded in the provenance.
    pub fn override_entry(&mut self, i: usize, j: usize, values: &[Complex64], reason: &str) -> Result<()> {
        if i >= self.ports || j >= self.ports || values.len() != self.s.len() {
            return Err(Error::structural("override does not match the estimate"));
        }
        let v = j * self.ports + i;
        for ((m, c), &x) in self.s.iter_mut().zip(&mut self.cov).zip(values) {
            m[(i, j)] = x;
            c.row_mut(v).fill(Complex64::new(0.0, 0.0));
            c.column_mut(v).fill(Complex64::new(0.0, 0.0));
        }
        self.provenance
            .overrides
            .push(format!("S[{}][{}] pinned: {reason}", i + 1, j + 1));
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MimoConfig {
    pub cond_threshold: f64,
}

impl Default for MimoConfig {
    fn default() -> Self {
        MimoConfig {
            cond_threshold: DEFAULT_COND_THRESHOLD,
        }
    }
}

fn condition_number(m: &CMat) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// MIMO BLA of a `p`-port sub-circuit from all references of the records.
///
/// `waves_b[i]` and `waves_a[i]` are the reflected and incident waves of
/// port `i`. Reference 0 is the main excitation and fixes the output grid.
pub fn estimate_mimo(
    records: &[SteadyStateRecord],
    waves_b: &[SignalId],
    waves_a: &[SignalId],
    config: &MimoConfig,
) -> Result<MimoBlaEstimate> {
    let p = waves_a.len();
    if p == 0 || waves_b.len() != p {
        return Err(Error::structural("one incident and one reflected wave per port are required"));
    }
    let n_r = records.first().map_or(0, |r| r.references.len());
    if n_r < p {
        return Err(Error::structural(format!(
            "{n_r} references cannot identify a {p}-port BLA (at least {p} are required)"
        )));
    }
    let simos = (0..n_r)
        .map(|r| estimate_simo(records, r, waves_b, waves_a))
        .collect::<Result<Vec<_>>>()?;
    let grid = simos[0].grid.clone();
    let target = grid.frequencies();
    let columns: Vec<(Vec<DVector<Complex64>>, Vec<CMat>)> = simos
        .iter()
        .enumerate()
        .map(|(r, s)| {
            if r == 0 {
                (s.z.clone(), s.cz.clone())
            } else {
                interpolate_simo(s, &target)
            }
        })
        .collect();
    let nb = grid.len();
    let mut est = MimoBlaEstimate {
        grid,
        ports: p,
        s: Vec::with_capacity(nb),
        cov: Vec::with_capacity(nb),
        cond: Vec::with_capacity(nb),
        flagged: Vec::with_capacity(nb),
        provenance: Provenance {
            source: format!("mimo from {n_r} references, linear re/im interpolation of tickler SIMO BLAs"),
            m_used: records.len(),
            ..Provenance::default()
        },
    };
    for b in 0..nb {
        let gz = CMat::from_fn(2 * p, n_r, |i, r| columns[r].0[b][i]);
        let gb = gz.rows(0, p).into_owned();
        let ga = gz.rows(p, p).into_owned();
        let cond = condition_number(&ga);
        let inv = if n_r == p {
            ga.clone().try_inverse()
        } else {
            (&ga * ga.adjoint()).try_inverse().map(|x| ga.adjoint() * x)
        };
        let Some(ga_inv) = inv.filter(|_| cond <= config.cond_threshold) else {
            est.s.push(CMat::zeros(p, p));
            est.cov.push(CMat::zeros(p * p, p * p));
            est.cond.push(cond);
            est.flagged.push(true);
            continue;
        };
        let s = &gb * &ga_inv;
        let mut ims = CMat::zeros(p, 2 * p);
        ims.view_mut((0, 0), (p, p)).fill_with_identity();
        ims.view_mut((0, p), (p, p)).copy_from(&(-&s));
        let t = ga_inv.transpose().kronecker(&ims);
        let mut cg = CMat::zeros(2 * p * n_r, 2 * p * n_r);
        for (r, col) in columns.iter().enumerate() {
            cg.view_mut((2 * p * r, 2 * p * r), (2 * p, 2 * p)).copy_from(&col.1[b]);
        }
        est.cov.push(hermitize(&t * cg * t.adjoint()));
        est.s.push(s);
        est.cond.push(cond);
        est.flagged.push(false);
    }
    Ok(est)
}

/// Block-diagonal S^BLA of all sub-circuits at bin `b`.
pub fn block_diagonal(blocks: &[MimoBlaEstimate], b: usize) -> CMat {
    let p: usize = blocks.iter().map(|m| m.ports).sum();
    let mut s = CMat::zeros(p, p);
    let mut off = 0;
    for m in blocks {
        s.view_mut((off, off), (m.ports, m.ports)).copy_from(&m.s[b]);
        off += m.ports;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetOutcome {
    pub m_used: usize,
    pub sigma: f64,
    pub attained: bool,
}

/// Grow the realization count in batches until `quality(M)` (the worst
/// per-bin standard deviation with `M` realizations) reaches `target_sigma`
/// or `max_m` is used up.
pub fn realization_budget(
    mut quality: impl FnMut(usize) -> Result<f64>,
    target_sigma: f64,
    batch: usize,
    max_m: usize,
) -> Result<BudgetOutcome> {
    if !(target_sigma > 0.0) {
        return Err(Error::domain("target sigma must be positive"));
    }
    if batch < 2 || max_m < batch {
        return Err(Error::domain("batch must be at least 2 and no larger than max_m"));
    }
    let mut m = batch;
    loop {
        let sigma = quality(m)?;
        if sigma <= target_sigma {
            return Ok(BudgetOutcome {
                m_used: m,
                sigma,
                attained: true,
            });
        }
        if m >= max_m {
            return Ok(BudgetOutcome {
                m_used: m,
                sigma,
                attained: false,
            });
        }
        m = (m + batch).min(max_m);
    }
}
