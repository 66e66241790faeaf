//! Distortion contribution analysis.
//!
//! The distortion sources are the residuals `D = Y - G^BLA U` of every
//! sub-system. Their covariance `C_D` is referred to the output through the
//! linearized network `T_out`, and `T_out C_D T_out^H` splits into direct
//! and pairwise correlation terms.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::blaest::{
    block_diagonal, cmat_serde, estimate_simo, hermitize, CzVariant, MimoBlaEstimate, Provenance, SimoBlaEstimate,
    SisoBlaEstimate,
};
use crate::error::{Error, Result};
use crate::netmodel::{ports, CMat, PortNetwork, SisoFeedbackNetwork};
use crate::solver::{SignalId, SteadyStateRecord};
use crate::spectra::FrequencyGrid;

/// Factor on the distortion level below which a small-signal prediction
/// error is accepted.
pub const DEFAULT_VALIDITY_FACTOR: f64 = 10.0;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Siso,
    Wave,
}

/// A distortion source and the sub-system it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceLabel {
    pub name: String,
    pub group: String,
}

/// Signals whose residuals are the distortion sources of a SISO network.
pub fn siso_signals(net: &SisoFeedbackNetwork) -> (Vec<SignalId>, Vec<SignalId>) {
    let n = net.n_blocks();
    ((0..n).map(SignalId::BlockOutput).collect(), (0..n).map(SignalId::BlockInput).collect())
}

/// Reflected and incident waves of all sub-circuit ports.
pub fn wave_signals(net: &PortNetwork) -> (Vec<SignalId>, Vec<SignalId>) {
    let p = net.total_ports();
    ((0..p).map(SignalId::PortReflected).collect(), (0..p).map(SignalId::PortIncident).collect())
}

pub fn siso_labels(net: &SisoFeedbackNetwork) -> Vec<SourceLabel> {
    net.names()
        .iter()
        .map(|n| SourceLabel {
            name: n.clone(),
            group: n.clone(),
        })
        .collect()
}

pub fn wave_labels(net: &PortNetwork) -> Vec<SourceLabel> {
    net.port_lineage()
        .into_iter()
        .map(|(n, p)| {
            let sub = &net.subcircuits()[n].name;
            SourceLabel {
                name: format!("{sub}:p{}", p + 1),
                group: sub.clone(),
            }
        })
        .collect()
}

/// Diagonal SISO set or block-diagonal MIMO set of BLAs.
#[derive(Debug, Clone, PartialEq)]
pub enum BlaSet {
    Siso(Vec<SisoBlaEstimate>),
    Wave(Vec<MimoBlaEstimate>),
}

impl BlaSet {
    pub fn sources(&self) -> usize {
        match self {
            BlaSet::Siso(v) => v.len(),
            BlaSet::Wave(v) => v.iter().map(|m| m.ports).sum(),
        }
    }

    fn grid(&self) -> Option<&FrequencyGrid> {
        match self {
            BlaSet::Siso(v) => v.first().map(|e| &e.grid),
            BlaSet::Wave(v) => v.first().map(|e| &e.grid),
        }
    }

    fn check(&self, grid: &FrequencyGrid) -> Result<()> {
        let ok = match self {
            BlaSet::Siso(v) => v.iter().all(|e| e.grid.same_bins(grid)),
            BlaSet::Wave(v) => v.iter().all(|e| e.grid.same_bins(grid)),
        };
        if !ok || self.sources() == 0 {
            return Err(Error::structural("BLA grids do not match the record grid"));
        }
        Ok(())
    }

    /// `G^BLA` at bin `b` and whether the bin is flagged.
    pub fn matrix(&self, b: usize) -> (CMat, bool) {
        match self {
            BlaSet::Siso(v) => {
                let n = v.len();
                let mut g = CMat::zeros(n, n);
                for (i, e) in v.iter().enumerate() {
                    g[(i, i)] = e.g[b];
                }
                (g, v.iter().any(|e| e.flagged[b]))
            }
            BlaSet::Wave(v) => (block_diagonal(v, b), v.iter().any(|e| e.flagged[b])),
        }
    }

    /// Diagonal SISO BLAs of every block, from a SIMO estimate of the
    /// stacked block outputs over block inputs.
    pub fn siso_from(simo: &SimoBlaEstimate) -> Result<BlaSet> {
        let n = simo.outputs.len();
        if simo.inputs.len() != n {
            return Err(Error::structural("one input per output is required"));
        }
        Ok(BlaSet::Siso(
            (0..n)
                .map(|i| crate::blaest::simo_to_siso(simo, i, i))
                .collect::<Result<_>>()?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionCovariance {
    pub grid: FrequencyGrid,
    pub labels: Vec<SourceLabel>,
    #[serde(with = "cmat_serde")]
    pub cd: Vec<CMat>,
    /// Most negative (or smallest) eigenvalue of `C_D` per bin.
    pub min_eigenvalue: Vec<f64>,
    pub flagged: Vec<bool>,
    pub variant: CzVariant,
    pub m_used: usize,
}

/// `C_D = M [I, -G] C_Z [I, -G]^H` per bin.
///
/// With the normalized variant the result is scaled by the mean `|R|^2` so
/// that it is an absolute distortion power.
pub fn build_cd(
    simo: &SimoBlaEstimate,
    bla: &BlaSet,
    labels: Vec<SourceLabel>,
    variant: CzVariant,
) -> Result<DistortionCovariance> {
    let n = bla.sources();
    if simo.outputs.len() != n || simo.inputs.len() != n || labels.len() != n {
        return Err(Error::structural(format!(
            "dimension mismatch: {n} distortion sources, SIMO estimate has {} outputs and {} inputs",
            simo.outputs.len(),
            simo.inputs.len()
        )));
    }
    let m = simo.m_used;
    if m < 2 * n {
        return Err(Error::structural(format!(
            "{m} realizations cannot give a full-rank covariance of {n} sources (at least 2N = {} are required)",
            2 * n
        )));
    }
    bla.check(&simo.grid)?;
    let mut out = DistortionCovariance {
        grid: simo.grid.clone(),
        labels,
        cd: Vec::with_capacity(simo.len()),
        min_eigenvalue: Vec::with_capacity(simo.len()),
        flagged: Vec::with_capacity(simo.len()),
        variant,
        m_used: m,
    };
    for b in 0..simo.len() {
        let (g, flagged) = bla.matrix(b);
        let mut v = CMat::zeros(n, 2 * n);
        v.view_mut((0, 0), (n, n)).fill_with_identity();
        v.view_mut((0, n), (n, n)).copy_from(&(-g));
        let (cz, scale) = match variant {
            CzVariant::NormalizedRescaled => (&simo.cz[b], m as f64 * simo.ref_power[b]),
            CzVariant::Raw => (&simo.cz_raw[b], m as f64),
        };
        let cd = hermitize(&v * cz * v.adjoint() * Complex64::from(scale));
        let eig = cd.clone().symmetric_eigen().eigenvalues;
        out.min_eigenvalue.push(eig.iter().copied().fold(f64::INFINITY, f64::min));
        out.cd.push(cd);
        out.flagged.push(flagged);
    }
    Ok(out)
}

/// Output referral row per bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputReferral {
    pub grid: FrequencyGrid,
    pub view: View,
    pub t: Vec<Vec<Complex64>>,
    /// Linear reference-to-output response of the linearized network.
    pub g_ryt: Vec<Complex64>,
    pub flagged: Vec<bool>,
}

/// `T_out = B (I + G M)^-1` and `G_RYt = T_out G A`.
pub fn tout_siso(net: &SisoFeedbackNetwork, bla: &BlaSet) -> Result<OutputReferral> {
    let BlaSet::Siso(v) = bla else {
        return Err(Error::structural("the SISO view needs one SISO BLA per block"));
    };
    let n = net.n_blocks();
    if v.len() != n {
        return Err(Error::structural(format!("dimension mismatch: {} BLAs for {n} blocks", v.len())));
    }
    let grid = bla.grid().expect("non-empty").clone();
    let mut out = OutputReferral {
        grid: grid.clone(),
        view: View::Siso,
        t: Vec::with_capacity(grid.len()),
        g_ryt: Vec::with_capacity(grid.len()),
        flagged: Vec::with_capacity(grid.len()),
    };
    for b in 0..grid.len() {
        let f = grid.frequency(b);
        let (g, flagged) = bla.matrix(b);
        let lp = CMat::identity(n, n) + &g * net.m_at(f);
        match lp.try_inverse() {
            Some(inv) if !flagged => {
                let t = net.b_at(f) * inv;
                out.g_ryt.push((&t * &g * net.a_at(f))[(0, 0)]);
                out.t.push(t.iter().copied().collect());
                out.flagged.push(false);
            }
            _ => {
                out.t.push(vec![ZERO; n]);
                out.g_ryt.push(ZERO);
                out.flagged.push(true);
            }
        }
    }
    Ok(out)
}

/// Row of `W^-1` from the sub-circuit ports to the wave incident on the
/// load, with `W = C - T(S^BLA)`.
pub fn tout_wave(net: &PortNetwork, bla: &BlaSet) -> Result<OutputReferral> {
    let BlaSet::Wave(v) = bla else {
        return Err(Error::structural("the wave view needs one MIMO BLA per sub-circuit"));
    };
    check_wave_set(net, v)?;
    let p = net.total_ports();
    let grid = v[0].grid.clone();
    let mut out = OutputReferral {
        grid: grid.clone(),
        view: View::Wave,
        t: Vec::with_capacity(grid.len()),
        g_ryt: Vec::with_capacity(grid.len()),
        flagged: Vec::with_capacity(grid.len()),
    };
    let sub = ports::sub(p, 0);
    for b in 0..grid.len() {
        let f = grid.frequency(b);
        let (s, flagged) = bla.matrix(b);
        match net.w_matrix(f, &s)?.try_inverse() {
            Some(w) if !flagged => {
                out.t.push((0..p).map(|j| w[(ports::LOAD, sub + j)]).collect());
                out.g_ryt.push(w[(ports::LOAD, ports::SOURCE)] * net.voltage_injection(f));
                out.flagged.push(false);
            }
            _ => {
                out.t.push(vec![ZERO; p]);
                out.g_ryt.push(ZERO);
                out.flagged.push(true);
            }
        }
    }
    Ok(out)
}

fn check_wave_set(net: &PortNetwork, v: &[MimoBlaEstimate]) -> Result<()> {
    let subs = net.subcircuits();
    if v.len() != subs.len() || v.iter().zip(subs).any(|(e, s)| e.ports != s.ports()) {
        return Err(Error::structural(
            "dimension mismatch: one MIMO BLA per sub-circuit with matching port count is required",
        ));
    }
    if v.iter().any(|e| !e.grid.same_bins(&v[0].grid)) {
        return Err(Error::structural("MIMO BLAs are on different grids"));
    }
    Ok(())
}

/// Small-signal S of every sub-circuit as a BLA set on `grid`.
pub fn smallsignal_set(net: &PortNetwork, grid: &FrequencyGrid) -> Result<Vec<MimoBlaEstimate>> {
    net.subcircuits()
        .iter()
        .map(|sc| {
            let s = grid.frequencies().iter().map(|&f| sc.small_signal(f)).collect();
            MimoBlaEstimate::from_matrices(grid.clone(), s, &format!("small-signal S of {}", sc.name))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub grid: FrequencyGrid,
    pub labels: Vec<String>,
    /// `(i, j)` with `i > j`, in the order of `correlation` columns.
    pub pairs: Vec<(usize, usize)>,
    pub total: Vec<f64>,
    pub direct: Vec<Vec<f64>>,
    pub correlation: Vec<Vec<f64>>,
    /// Bins left out because a BLA or the network was flagged there.
    pub excluded: Vec<u64>,
    /// Groupings applied, outermost last.
    pub tree: Vec<String>,
    pub provenance: Provenance,
}

fn pairs(n: usize) -> Vec<(usize, usize)> {
    (1..n).flat_map(|i| (0..i).map(move |j| (i, j))).collect()
}

/// Direct terms `[C_D]_ii |T_i|^2` and correlation terms
/// `2 Re{[C_D]_ij T_i T_j^*}`.
pub fn decompose(cd: &DistortionCovariance, t: &OutputReferral) -> Result<ContributionReport> {
    let n = cd.labels.len();
    if !cd.grid.same_bins(&t.grid) || t.t.iter().any(|r| r.len() != n) {
        return Err(Error::structural(format!(
            "dimension mismatch: C_D has {n} sources, T_out rows have {}",
            t.t.first().map_or(0, |r| r.len())
        )));
    }
    let pr = pairs(n);
    let mut keep = Vec::new();
    let mut excluded = Vec::new();
    let mut total = Vec::new();
    let mut direct = Vec::new();
    let mut correlation = Vec::new();
    for b in 0..cd.grid.len() {
        if cd.flagged[b] || t.flagged[b] {
            excluded.push(cd.grid.bins()[b]);
            continue;
        }
        keep.push(b);
        let (c, tr) = (&cd.cd[b], &t.t[b]);
        let mut tot = ZERO;
        for i in 0..n {
            for j in 0..n {
                tot += tr[i] * c[(i, j)] * tr[j].conj();
            }
        }
        total.push(tot.re);
        direct.push((0..n).map(|i| c[(i, i)].re * tr[i].norm_sqr()).collect());
        correlation.push(pr.iter().map(|&(i, j)| 2.0 * (c[(i, j)] * tr[i] * tr[j].conj()).re).collect());
    }
    let grid = cd.grid.filter({
        let bins: Vec<u64> = keep.iter().map(|&b| cd.grid.bins()[b]).collect();
        move |k, _| bins.binary_search(&k).is_ok()
    });
    Ok(ContributionReport {
        grid,
        labels: cd.labels.iter().map(|l| l.name.clone()).collect(),
        pairs: pr,
        total,
        direct,
        correlation,
        excluded,
        tree: Vec::new(),
        provenance: Provenance {
            source: format!("{:?} view", t.view).to_lowercase(),
            m_used: cd.m_used,
            cz_variant: Some(cd.variant),
            ..Provenance::default()
        },
    })
}

/// Merge sources into groups. `groups` lists a name and the member source
/// indices of each group; the groups must partition the sources.
pub fn aggregate(report: &ContributionReport, groups: &[(String, Vec<usize>)]) -> Result<ContributionReport> {
    let n = report.labels.len();
    let mut owner = vec![usize::MAX; n];
    for (g, (name, members)) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::structural(format!("group {name} is empty")));
        }
        for &i in members {
            if i >= n {
                return Err(Error::structural(format!("group {name} names source {i} of {n}")));
            }
            if owner[i] != usize::MAX {
                return Err(Error::structural(format!(
                    "grouping is not a partition: source {} is in two groups",
                    report.labels[i]
                )));
            }
            owner[i] = g;
        }
    }
    if let Some(i) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(Error::structural(format!(
            "grouping is not a partition: source {} is in no group",
            report.labels[i]
        )));
    }
    let ng = groups.len();
    let gp = pairs(ng);
    let index_of = |a: usize, b: usize| a * (a - 1) / 2 + b;
    let mut direct = Vec::with_capacity(report.total.len());
    let mut correlation = Vec::with_capacity(report.total.len());
    for (d, c) in report.direct.iter().zip(&report.correlation) {
        let mut gd = vec![0.0; ng];
        let mut gc = vec![0.0; gp.len()];
        for (i, x) in d.iter().enumerate() {
            gd[owner[i]] += x;
        }
        for (&(i, j), x) in report.pairs.iter().zip(c) {
            let (a, b) = (owner[i], owner[j]);
            if a == b {
                gd[a] += x;
            } else {
                gc[index_of(a.max(b), a.min(b))] += x;
            }
        }
        direct.push(gd);
        correlation.push(gc);
    }
    let mut tree = report.tree.clone();
    tree.push(
        groups
            .iter()
            .map(|(name, m)| {
                let members: Vec<&str> = m.iter().map(|&i| report.labels[i].as_str()).collect();
                format!("{name} = {}", members.join(" + "))
            })
            .collect::<Vec<_>>()
            .join("; "),
    );
    Ok(ContributionReport {
        grid: report.grid.clone(),
        labels: groups.iter().map(|(n, _)| n.clone()).collect(),
        pairs: gp,
        total: report.total.clone(),
        direct,
        correlation,
        excluded: report.excluded.clone(),
        tree,
        provenance: report.provenance.clone(),
    })
}

/// Groups of sources sharing the same `group` label, in first-seen order.
pub fn groups_by_label(labels: &[SourceLabel]) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match out.iter_mut().find(|(g, _)| *g == l.group) {
            Some((_, m)) => m.push(i),
            None => out.push((l.group.clone(), vec![i])),
        }
    }
    out
}

impl ContributionReport {
    pub fn sum(&self, b: usize) -> f64 {
        self.direct[b].iter().sum::<f64>() + self.correlation[b].iter().sum::<f64>()
    }

    /// Worst relative gap between the summed contributions and the total.
    pub fn conservation_error(&self) -> f64 {
        (0..self.total.len())
            .map(|b| {
                let scale = self.direct[b].iter().map(|x| x.abs()).sum::<f64>().max(self.total[b].abs());
                if scale == 0.0 {
                    0.0
                } else {
                    (self.sum(b) - self.total[b]).abs() / scale
                }
            })
            .fold(0.0, f64::max)
    }

    /// Signed percentages of the total, or `None` when the total is too
    /// close to zero to anchor them.
    pub fn percentages(&self, b: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let src: f64 = self.direct[b].iter().sum();
        let tot = self.total[b];
        if !(tot.abs() >= 1e-12 * src) || tot == 0.0 {
            return None;
        }
        let p = |v: &Vec<f64>| v.iter().map(|x| 100.0 * x / tot).collect();
        Some((p(&self.direct[b]), p(&self.correlation[b])))
    }

    pub fn pair_label(&self, k: usize) -> String {
        let (i, j) = self.pairs[k];
        format!("{},{}", self.labels[i], self.labels[j])
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::domain(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(format!("line {}", e.line()), e.to_string()))
    }

    /// Wide table: one row per bin with total, directs and correlations.
    pub fn to_csv(&self, percent: bool) -> String {
        let mut s = String::from("bin,f_hz,total");
        for l in &self.labels {
            let _ = write!(s, ",C[{l}]");
        }
        for k in 0..self.pairs.len() {
            let _ = write!(s, ",C[{}]", self.pair_label(k));
        }
        s.push('\n');
        for b in 0..self.total.len() {
            let _ = write!(s, "{},{:.17e},{:.17e}", self.grid.bins()[b], self.grid.frequency(b), self.total[b]);
            let vals: Vec<f64> = if percent {
                match self.percentages(b) {
                    Some((d, c)) => d.into_iter().chain(c).collect(),
                    None => vec![f64::NAN; self.labels.len() + self.pairs.len()],
                }
            } else {
                self.direct[b].iter().chain(&self.correlation[b]).copied().collect()
            };
            for v in vals {
                if v.is_nan() {
                    s.push_str(",");
                } else {
                    let _ = write!(s, ",{v:.17e}");
                }
            }
            s.push('\n');
        }
        s
    }

    /// Per-frequency table ranked by absolute contribution.
    pub fn to_text(&self, percent: bool) -> String {
        let mut s = String::new();
        for step in &self.tree {
            let _ = writeln!(s, "# grouping: {step}");
        }
        if !self.excluded.is_empty() {
            let _ = writeln!(s, "# excluded bins: {:?}", self.excluded);
        }
        for b in 0..self.total.len() {
            let _ = writeln!(
                s,
                "bin {} ({:.6} Hz)  total {:.6e}",
                self.grid.bins()[b],
                self.grid.frequency(b),
                self.total[b]
            );
            let pct = if percent { self.percentages(b) } else { None };
            let mut rows: Vec<(String, f64, Option<f64>)> = Vec::new();
            for (i, l) in self.labels.iter().enumerate() {
                rows.push((l.clone(), self.direct[b][i], pct.as_ref().map(|p| p.0[i])));
            }
            for k in 0..self.pairs.len() {
                rows.push((self.pair_label(k), self.correlation[b][k], pct.as_ref().map(|p| p.1[k])));
            }
            rows.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
            for (name, v, p) in rows {
                match p {
                    Some(p) => {
                        let _ = writeln!(s, "  {name:<24} {v:>14.6e} {p:>9.2}%");
                    }
                    None => {
                        let _ = writeln!(s, "  {name:<24} {v:>14.6e}");
                    }
                }
            }
            if percent && pct.is_none() {
                let _ = writeln!(s, "  (percentages suppressed: total is negligible)");
            }
        }
        s
    }
}

/// Reference-to-wave FRFs of the linearized network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedFrfs {
    pub grid: FrequencyGrid,
    /// Incident waves at the sub-circuit ports, per bin.
    pub a: Vec<Vec<Complex64>>,
    /// Reflected waves at the sub-circuit ports, per bin.
    pub b: Vec<Vec<Complex64>>,
    pub flagged: Vec<bool>,
}

/// Solve `W a = N` with a unit source voltage and read the sub-circuit
/// waves off the solution.
pub fn predict_reference_frf(net: &PortNetwork, bla: &[MimoBlaEstimate]) -> Result<PredictedFrfs> {
    check_wave_set(net, bla)?;
    let p = net.total_ports();
    let grid = bla[0].grid.clone();
    let mut out = PredictedFrfs {
        grid: grid.clone(),
        a: Vec::with_capacity(grid.len()),
        b: Vec::with_capacity(grid.len()),
        flagged: Vec::with_capacity(grid.len()),
    };
    for b in 0..grid.len() {
        let f = grid.frequency(b);
        let s = block_diagonal(bla, b);
        let flagged = bla.iter().any(|e| e.flagged[b]);
        let mut n = CMat::zeros(ports::total(p), 1);
        n[(ports::SOURCE, 0)] = net.voltage_injection(f);
        match net.w_matrix(f, &s)?.lu().solve(&n) {
            Some(x) if !flagged && x.iter().all(|v| v.is_finite()) => {
                out.a.push((0..p).map(|j| x[(ports::sub(p, j), 0)]).collect());
                out.b.push((0..p).map(|j| x[(ports::package(2 + j), 0)]).collect());
                out.flagged.push(false);
            }
            _ => {
                out.a.push(vec![ZERO; p]);
                out.b.push(vec![ZERO; p]);
                out.flagged.push(true);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityVerdict {
    pub grid: FrequencyGrid,
    pub factor: f64,
    pub valid: Vec<bool>,
    /// Largest ratio of squared prediction error to distortion level over
    /// all waves, per bin.
    pub worst_ratio: Vec<f64>,
}

impl ValidityVerdict {
    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|v| **v).count() as f64 / self.valid.len().max(1) as f64
    }
}

/// Compare the reference-to-wave FRFs predicted with small-signal S against
/// the directly estimated BLAs. A bin is valid when, at every wave, the
/// squared difference stays below `factor` times the distortion level.
pub fn smallsignal_validity(
    net: &PortNetwork,
    smallsignal: &[MimoBlaEstimate],
    records: &[SteadyStateRecord],
    factor: f64,
) -> Result<ValidityVerdict> {
    let (bw, aw) = wave_signals(net);
    let direct = estimate_simo(records, 0, &bw, &aw)?;
    let pred = predict_reference_frf(net, smallsignal)?;
    if !pred.grid.same_bins(&direct.grid) {
        return Err(Error::structural("small-signal S is not given on the excited grid"));
    }
    validity_from(&direct, &pred, factor)
}

pub fn validity_from(direct: &SimoBlaEstimate, pred: &PredictedFrfs, factor: f64) -> Result<ValidityVerdict> {
    let p = pred.a.first().map_or(0, |v| v.len());
    if direct.dim() != 2 * p {
        return Err(Error::structural("direct estimate does not cover all waves"));
    }
    let m = direct.m_used as f64;
    let mut valid = Vec::with_capacity(direct.len());
    let mut worst_ratio = Vec::with_capacity(direct.len());
    for b in 0..direct.len() {
        let predicted: Vec<Complex64> = pred.b[b].iter().chain(&pred.a[b]).copied().collect();
        let mut worst: f64 = 0.0;
        for (i, x) in predicted.iter().enumerate() {
            let z = direct.z[b][i];
            let diff = (x - z).norm();
            if diff <= 1e-12 * z.norm().max(x.norm()) {
                continue;
            }
            let level = m * direct.cz[b][(i, i)].re;
            worst = worst.max(if level > 0.0 { diff * diff / level } else { f64::INFINITY });
        }
        valid.push(!pred.flagged[b] && worst <= factor);
        worst_ratio.push(worst);
    }
    Ok(ValidityVerdict {
        grid: direct.grid.clone(),
        factor,
        valid,
        worst_ratio,
    })
}

/// Everything a DCA run produces for one network.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub simo: SimoBlaEstimate,
    pub bla: BlaSet,
    pub cd: DistortionCovariance,
    pub referral: OutputReferral,
    pub report: ContributionReport,
}

/// SISO-view DCA of a record set.
pub fn analyze_siso(net: &SisoFeedbackNetwork, records: &[SteadyStateRecord]) -> Result<Analysis> {
    let (y, u) = siso_signals(net);
    let simo = estimate_simo(records, 0, &y, &u)?;
    let bla = BlaSet::siso_from(&simo)?;
    let cd = build_cd(&simo, &bla, siso_labels(net), CzVariant::NormalizedRescaled)?;
    let referral = tout_siso(net, &bla)?;
    let report = decompose(&cd, &referral)?;
    Ok(Analysis {
        simo,
        bla,
        cd,
        referral,
        report,
    })
}

/// Wave-view DCA of a record set with the given sub-circuit BLAs.
pub fn analyze_wave(
    net: &PortNetwork,
    records: &[SteadyStateRecord],
    blas: Vec<MimoBlaEstimate>,
) -> Result<Analysis> {
    let (b, a) = wave_signals(net);
    let simo = estimate_simo(records, 0, &b, &a)?;
    let bla = BlaSet::Wave(blas);
    let cd = build_cd(&simo, &bla, wave_labels(net), CzVariant::NormalizedRescaled)?;
    let referral = tout_wave(net, &bla)?;
    let mut report = decompose(&cd, &referral)?;
    if let BlaSet::Wave(v) = &bla {
        for e in v {
            report.provenance.overrides.extend(e.provenance.overrides.iter().cloned());
        }
    }
    Ok(Analysis {
        simo,
        bla,
        cd,
        referral,
        report,
    })
}

/// Reference-to-output BLA and the directly measured distortion power
/// `mean |Y_t - G R|^2` with its standard error, per excited bin.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredDistortion {
    pub grid: FrequencyGrid,
    pub g: Vec<Complex64>,
    pub power: Vec<f64>,
    pub std_error: Vec<f64>,
}

pub fn measure_output_distortion(records: &[SteadyStateRecord]) -> Result<MeasuredDistortion> {
    let simo = estimate_simo(records, 0, &[SignalId::Output], &[])?;
    let m = records.len();
    let mut power = Vec::with_capacity(simo.len());
    let mut std_error = Vec::with_capacity(simo.len());
    let g: Vec<Complex64> = simo.z.iter().map(|z| z[0]).collect();
    let per: Vec<(Vec<Complex64>, Vec<Complex64>)> = records
        .iter()
        .map(|r| {
            let rr = r.reference(0)?;
            let rv = simo.grid.bins().iter().map(|&k| rr.at(k).unwrap_or(ZERO)).collect();
            Ok((r.signal_on(SignalId::Output, &simo.grid)?, rv))
        })
        .collect::<Result<_>>()?;
    for b in 0..simo.len() {
        let e: Vec<f64> = per.iter().map(|(y, r)| (y[b] - g[b] * r[b]).norm_sqr()).collect();
        // unbiased for the residual around an estimated mean
        let mean = e.iter().sum::<f64>() / m as f64 * m as f64 / (m as f64 - 1.0);
        let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0);
        power.push(mean);
        std_error.push((var / m as f64).sqrt());
    }
    Ok(MeasuredDistortion {
        grid: simo.grid,
        g,
        power,
        std_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: Complex64 = Complex64::new(1.0, 0.0);
    use crate::blaest::{estimate_mimo, MimoConfig};
    use crate::excitation::{design_multisine, design_tickler, MultisineKind};
    use crate::netmodel::{Frf, Network, NonlinearBlock, PortBlock, StaticMap, SubCircuit};
    use crate::solver::{run_experiment, Site, SolverConfig};
    use crate::spectra::BinLabel;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn grid(n: u64) -> FrequencyGrid {
        FrequencyGrid::uniform(1.0, (1..=n).collect(), BinLabel::Excited).unwrap()
    }

    fn labels(n: usize) -> Vec<SourceLabel> {
        (0..n)
            .map(|i| SourceLabel {
                name: format!("s{}", i + 1),
                group: format!("s{}", i + 1),
            })
            .collect()
    }

    fn cov_of(cd: Vec<CMat>) -> DistortionCovariance {
        let n = cd[0].nrows();
        let len = cd.len();
        DistortionCovariance {
            grid: grid(len as u64),
            labels: labels(n),
            min_eigenvalue: vec![0.0; len],
            flagged: vec![false; len],
            cd,
            variant: CzVariant::NormalizedRescaled,
            m_used: 2 * n,
        }
    }

    fn referral(t: Vec<Vec<Complex64>>) -> OutputReferral {
        let len = t.len();
        OutputReferral {
            grid: grid(len as u64),
            view: View::Siso,
            t,
            g_ryt: vec![ZERO; len],
            flagged: vec![false; len],
        }
    }

    #[test]
    fn hand_expanded_two_sources() {
        let cd = CMat::from_row_slice(2, 2, &[c(2.0, 0.0), c(1.0, 1.0), c(1.0, -1.0), c(3.0, 0.0)]);
        let r = decompose(&cov_of(vec![cd.clone()]), &referral(vec![vec![c(1.0, 0.0), c(0.0, 1.0)]])).unwrap();
        // matrix product oracle
        let t = CMat::from_row_slice(1, 2, &[c(1.0, 0.0), c(0.0, 1.0)]);
        let tot = (&t * &cd * t.adjoint())[(0, 0)];
        assert_relative_eq!(r.total[0], tot.re, max_relative = 1e-15);
        assert_relative_eq!(r.total[0], 7.0, max_relative = 1e-15);
        assert_eq!(r.direct[0], vec![2.0, 3.0]);
        assert_relative_eq!(r.correlation[0][0], 2.0, max_relative = 1e-15);
        assert_eq!(r.pairs, vec![(1, 0)]);
    }

    #[test]
    fn diagonal_cd_has_no_correlations() {
        let cd = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1.0, 0.0), c(2.0, 0.0), c(0.5, 0.0)]));
        let r = decompose(&cov_of(vec![cd]), &referral(vec![vec![c(0.3, 1.0), c(-2.0, 0.0), c(0.0, 0.1)]])).unwrap();
        assert!(r.correlation[0].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn percentages_suppressed_near_zero_total() {
        let cd = CMat::from_row_slice(2, 2, &[c(1.0, 0.0), c(-1.0, 0.0), c(-1.0, 0.0), c(1.0, 0.0)]);
        let r = decompose(&cov_of(vec![cd]), &referral(vec![vec![ONE, ONE]])).unwrap();
        assert!(r.total[0].abs() < 1e-15);
        assert!(r.percentages(0).is_none());
        assert!(r.to_text(true).contains("suppressed"));
        let csv = r.to_csv(true);
        assert!(csv.lines().nth(1).unwrap().ends_with(",,,"), "{csv}");
    }

    #[test]
    fn scalar_feedback_referral() {
        let g = 3.0;
        let net = SisoFeedbackNetwork::new(
            grid(2),
            vec!["x".into()],
            vec![NonlinearBlock::Static(StaticMap::Polynomial(vec![g]))],
            vec![Frf::real(1.0)],
            vec![vec![Frf::real(1.0)]],
            vec![Frf::real(1.0)],
        )
        .unwrap();
        let bla = BlaSet::Siso(vec![siso_const(grid(2), c(g, 0.0))]);
        let t = tout_siso(&net, &bla).unwrap();
        for (row, gr) in t.t.iter().zip(&t.g_ryt) {
            assert_relative_eq!(row[0].re, 1.0 / (1.0 + g), max_relative = 1e-15);
            assert_relative_eq!(gr.re, g / (1.0 + g), max_relative = 1e-15);
        }
    }

    fn siso_const(grid: FrequencyGrid, g: Complex64) -> SisoBlaEstimate {
        let n = grid.len();
        SisoBlaEstimate {
            grid,
            g: vec![g; n],
            variance: vec![0.0; n],
            flagged: vec![false; n],
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn open_loop_chain_referral() {
        let net = SisoFeedbackNetwork::chain(
            grid(3),
            vec![
                NonlinearBlock::Static(StaticMap::identity()),
                NonlinearBlock::Static(StaticMap::identity()),
            ],
            1.0,
        )
        .unwrap();
        let (g1, g2) = (c(0.7, -0.2), c(1.5, 0.4));
        let bla = BlaSet::Siso(vec![siso_const(grid(3), g1), siso_const(grid(3), g2)]);
        let t = tout_siso(&net, &bla).unwrap();
        for (row, gr) in t.t.iter().zip(&t.g_ryt) {
            assert!((row[0] - g2).norm() < 1e-15 && (row[1] - ONE).norm() < 1e-15);
            assert!((gr - g1 * g2).norm() < 1e-15);
        }
    }

    #[test]
    fn three_block_referral_matches_brute_force() {
        let m = [[0.0, 0.2, -0.1], [-1.0, 0.0, 0.3], [0.1, -0.8, 0.0]];
        let a = [1.0, 0.5, 0.0];
        let b = [0.0, 0.3, 1.0];
        let gs = [c(0.8, 0.1), c(-0.5, 0.9), c(1.1, 0.0)];
        let net = SisoFeedbackNetwork::new(
            grid(1),
            vec!["a".into(), "b".into(), "c".into()],
            (0..3).map(|_| NonlinearBlock::Static(StaticMap::identity())).collect(),
            a.iter().map(|&x| Frf::real(x)).collect(),
            m.iter().map(|r| r.iter().map(|&x| Frf::real(x)).collect()).collect(),
            b.iter().map(|&x| Frf::real(x)).collect(),
        )
        .unwrap();
        let bla = BlaSet::Siso(gs.iter().map(|&g| siso_const(grid(1), g)).collect());
        let t = tout_siso(&net, &bla).unwrap();
        // inject a unit source at block n's output and iterate the loop to
        // convergence by Gauss-Seidel on y = G (-M y) + d
        for n in 0..3 {
            let mut y = [ZERO; 3];
            for _ in 0..2000 {
                for i in 0..3 {
                    let u: Complex64 = -(0..3).map(|j| y[j] * m[i][j]).sum::<Complex64>();
                    y[i] = gs[i] * u + if i == n { ONE } else { ZERO };
                }
            }
            let out: Complex64 = (0..3).map(|j| y[j] * b[j]).sum();
            assert!((out - t.t[0][n]).norm() < 1e-12, "{n}: {out} vs {}", t.t[0][n]);
        }
    }

    fn matched_two_port(s: [[Complex64; 2]; 2], n: u64) -> PortNetwork {
        let frf = |x: Complex64| Frf::Constant(x);
        let block = PortBlock::new(
            s.iter().map(|r| r.iter().map(|&x| frf(x)).collect()).collect(),
            vec![StaticMap::identity(), StaticMap::identity()],
        )
        .unwrap();
        PortNetwork::matched_chain(grid(n), vec![SubCircuit::nonlinear("amp", block)], 50.0).unwrap()
    }

    #[test]
    fn matched_two_port_referral() {
        let s21 = c(2.0, 1.0);
        // a unilateral matched 2-port; W is 8x8 here
        let net = matched_two_port([[ZERO, ZERO], [s21, ZERO]], 2);
        let bla = BlaSet::Wave(smallsignal_set(&net, &grid(2)).unwrap());
        let t = tout_wave(&net, &bla).unwrap();
        assert_eq!(ports::total(2), 8);
        for row in &t.t {
            assert_relative_eq!(row[1].norm(), 1.0, max_relative = 1e-14);
            // the wave leaving the input port is absorbed by the matched source
            assert_eq!(row[0].norm(), 0.0);
        }
        // a reflecting source sends it back through S21
        let gamma = c(0.3, -0.4);
        let refl = net.with_terminations(Frf::Constant(gamma), Frf::zero()).unwrap();
        let t = tout_wave(&refl, &bla).unwrap();
        for row in &t.t {
            assert!((row[0] - gamma * s21).norm() < 1e-15);
        }
        let zero = matched_two_port([[ZERO; 2]; 2], 2);
        let t = tout_wave(&zero, &BlaSet::Wave(smallsignal_set(&zero, &grid(2)).unwrap())).unwrap();
        assert!(t.t.iter().all(|r| r[0].norm() == 0.0));
    }

    #[test]
    fn aggregation() {
        let cd = CMat::from_fn(4, 4, |i, j| {
            if i == j {
                c(1.0 + i as f64, 0.0)
            } else {
                c(0.1 * (i + j) as f64, 0.05 * (i as f64 - j as f64))
            }
        });
        let r = decompose(&cov_of(vec![cd]), &referral(vec![vec![ONE, c(0.0, 1.0), c(0.5, 0.5), c(-1.0, 0.2)]]))
            .unwrap();
        let trivial: Vec<_> = (0..4).map(|i| (r.labels[i].clone(), vec![i])).collect();
        let same = aggregate(&r, &trivial).unwrap();
        assert_eq!(same.direct, r.direct);
        assert_eq!(same.correlation, r.correlation);
        let one = aggregate(&r, &[("all".into(), vec![0, 1, 2, 3])]).unwrap();
        assert_relative_eq!(one.direct[0][0], r.total[0], max_relative = 1e-12);
        let two = aggregate(&r, &[("x".into(), vec![0, 2]), ("y".into(), vec![1, 3])]).unwrap();
        assert_eq!(two.correlation[0].len(), 1);
        assert!(two.conservation_error() < 1e-12);
        assert!(aggregate(&r, &[("x".into(), vec![0, 1]), ("y".into(), vec![1, 2, 3])]).is_err());
        assert!(aggregate(&r, &[("x".into(), vec![0, 1])]).is_err());
        // nested application equals the direct coarse grouping
        let nested = aggregate(&two, &[("all".into(), vec![0, 1])]).unwrap();
        assert_relative_eq!(nested.direct[0][0], one.direct[0][0], max_relative = 1e-12);
        assert_eq!(nested.tree.len(), 2);
    }

    #[test]
    fn six_ports_into_three_stages() {
        let cd = CMat::from_fn(6, 6, |i, j| c(((i * 7 + j * 3) % 5) as f64 - 1.0, (i as f64 - j as f64) * 0.2));
        let cd = &cd * cd.adjoint();
        let r = decompose(&cov_of(vec![cd]), &referral(vec![(0..6).map(|i| c(1.0, 0.1 * i as f64)).collect()])).unwrap();
        let g = aggregate(
            &r,
            &[("st1".into(), vec![0, 1]), ("st2".into(), vec![2, 3]), ("st3".into(), vec![4, 5])],
        )
        .unwrap();
        assert_eq!((g.direct[0].len(), g.correlation[0].len()), (3, 3));
        assert!((g.sum(0) - r.total[0]).abs() <= 1e-12 * r.direct[0].iter().sum::<f64>());
    }

    #[test]
    fn cd_rank_rule_and_linear_zero() {
        let net = SisoFeedbackNetwork::chain(
            grid(8),
            vec![
                NonlinearBlock::LinearFrf(Frf::lowpass(3.0)),
                NonlinearBlock::Static(StaticMap::Polynomial(vec![2.0])),
            ],
            1.0,
        )
        .unwrap();
        let spec = design_multisine(1.0, 1.0, 8.0, 1.0, MultisineKind::Full, 0).unwrap();
        let recs = run_experiment(&Network::Siso(net.clone()), &spec, &[], 4, 1, &SolverConfig::default()).unwrap();
        let a = analyze_siso(&net, &recs).unwrap();
        assert!(a.cd.cd.iter().flatten().all(|x| x.norm() < 1e-25));
        let e = analyze_siso(&net, &recs[..3]).unwrap_err();
        assert!(e.to_string().contains("2N = 4"), "{e}");
    }

    #[test]
    fn single_cubic_cd_matches_residual_variance() {
        let net = SisoFeedbackNetwork::chain(grid(20), vec![NonlinearBlock::Static(StaticMap::cubic(0.2))], 1.0).unwrap();
        let spec = design_multisine(1.0, 1.0, 20.0, 0.7, MultisineKind::Full, 0).unwrap();
        let recs = run_experiment(&Network::Siso(net.clone()), &spec, &[], 40, 9, &SolverConfig::default()).unwrap();
        let a = analyze_siso(&net, &recs).unwrap();
        let BlaSet::Siso(g) = &a.bla else { unreachable!() };
        for b in 0..a.cd.grid.len() {
            let k = a.cd.grid.bins()[b];
            let res: Vec<Complex64> = recs
                .iter()
                .map(|r| {
                    let y = r.signal_on(SignalId::BlockOutput(0), &a.cd.grid).unwrap()[b];
                    let u = r.signal_on(SignalId::BlockInput(0), &a.cd.grid).unwrap()[b];
                    let rr = r.reference(0).unwrap().at(k).unwrap();
                    // residual rotated into the reference frame
                    (y - g[0].g[b] * u) / rr * rr.norm()
                })
                .collect();
            let mean: Complex64 = res.iter().sum::<Complex64>() / res.len() as f64;
            let var = res.iter().map(|x| (x - mean).norm_sqr()).sum::<f64>() / (res.len() - 1) as f64;
            assert_relative_eq!(a.cd.cd[b][(0, 0)].re, var, max_relative = 1e-9);
        }
    }

    #[test]
    fn predicted_frf_through_connection() {
        let s21 = c(0.8, -0.3);
        let net = matched_two_port([[ZERO, ZERO], [s21, ZERO]], 3);
        let pred = predict_reference_frf(&net, &smallsignal_set(&net, &grid(3)).unwrap()).unwrap();
        let inj = 1.0 / (2.0 * 50f64.sqrt());
        for (a, b) in pred.a.iter().zip(&pred.b) {
            assert!((a[0] - inj).norm() < 1e-15);
            assert!((b[1] - s21 * inj).norm() < 1e-15);
            assert!(b[0].norm() < 1e-15 && a[1].norm() < 1e-15);
        }
        let open = net.with_terminations(Frf::real(1.0), Frf::real(0.0)).unwrap();
        let pred = predict_reference_frf(&open, &smallsignal_set(&open, &grid(3)).unwrap()).unwrap();
        assert!(pred.a.iter().chain(&pred.b).flatten().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn validity_of_linear_network() {
        let net = matched_two_port([[c(0.2, 0.0), c(0.1, 0.0)], [c(1.5, 0.5), c(0.3, 0.0)]], 8);
        let spec = design_multisine(1.0, 1.0, 8.0, 1.0, MultisineKind::Full, 0).unwrap();
        let recs = run_experiment(&Network::Port(net.clone()), &spec, &[], 4, 0, &SolverConfig::default()).unwrap();
        let v = smallsignal_validity(&net, &smallsignal_set(&net, spec.grid()).unwrap(), &recs, 1.0).unwrap();
        assert!(v.valid.iter().all(|x| *x));
    }

    #[test]
    fn wave_dca_with_estimated_mimo() {
        let block = PortBlock::new(
            vec![
                vec![Frf::real(0.1), Frf::real(0.05)],
                vec![Frf::Constant(c(2.0, 0.3)), Frf::real(0.2)],
            ],
            vec![StaticMap::identity(), StaticMap::cubic(0.5)],
        )
        .unwrap();
        let net = PortNetwork::matched_chain(grid(12), vec![SubCircuit::nonlinear("amp", block)], 50.0).unwrap();
        let spec = design_multisine(1.0, 1.0, 12.0, 2.0, MultisineKind::Full, 0).unwrap();
        let tick = design_tickler(&spec, 0.25, 0.02, 0).unwrap();
        let recs = run_experiment(
            &Network::Port(net.clone()),
            &spec,
            &[(tick, Site::CurrentAtLoad)],
            16,
            4,
            &SolverConfig::default(),
        )
        .unwrap();
        let (b, a) = wave_signals(&net);
        let mimo = estimate_mimo(&recs, &b, &a, &MimoConfig::default()).unwrap();
        let an = analyze_wave(&net, &recs, vec![mimo]).unwrap();
        assert!(an.report.conservation_error() < 1e-9);
        assert!(an.report.direct.iter().flatten().all(|x| *x >= 0.0));
        let by_sub = aggregate(&an.report, &groups_by_label(&wave_labels(&net))).unwrap();
        assert_eq!(by_sub.labels, vec!["amp".to_string()]);
        let json = an.report.to_json().unwrap();
        assert_eq!(ContributionReport::from_json(&json).unwrap(), an.report);
    }

    proptest! {
        #[test]
        fn conservation_and_permutation(
            entries in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 9),
            t in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 3),
        ) {
            let a = CMat::from_fn(3, 3, |i, j| c(entries[3 * i + j].0, entries[3 * i + j].1));
            let cd = &a * a.adjoint();
            let tv: Vec<Complex64> = t.iter().map(|&(x, y)| c(x, y)).collect();
            let r = decompose(&cov_of(vec![cd.clone()]), &referral(vec![tv.clone()])).unwrap();
            prop_assert!(r.conservation_error() < 1e-9);
            prop_assert!(r.direct[0].iter().all(|x| *x >= 0.0));
            // swap sources 0 and 2
            let perm = [2usize, 1, 0];
            let cp = CMat::from_fn(3, 3, |i, j| cd[(perm[i], perm[j])]);
            let tp: Vec<Complex64> = perm.iter().map(|&i| tv[i]).collect();
            let rp = decompose(&cov_of(vec![cp]), &referral(vec![tp])).unwrap();
            prop_assert!((rp.total[0] - r.total[0]).abs() <= 1e-12 * r.direct[0].iter().sum::<f64>().max(1e-300));
            for i in 0..3 {
                prop_assert!((rp.direct[0][i] - r.direct[0][perm[i]]).abs() < 1e-12);
            }
        }
    }
}
