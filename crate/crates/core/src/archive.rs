//! On-disk record sets and the manifest that ties pipeline stages together.
//!
//! A record directory holds one text file per signal and per reference,
//! each with one line per realization, plus `manifest.json` listing the
//! SHA-256 of every file, the inputs, the seed and the solver settings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::solver::{Diagnostics, SignalId, Site, SteadyStateRecord};
use crate::spectra::{FrequencyGrid, QuantityKind, Spectrum, UnionGrid};

pub const MANIFEST: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<String> {
    let p = path.as_ref();
    Ok(sha256_hex(&fs::read(p).map_err(|e| Error::io(p, e))?))
}

/// Write `text` to `path`, returning its hash.
pub fn write_hashed(path: impl AsRef<Path>, text: &str) -> Result<String> {
    let p = path.as_ref();
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(p, text).map_err(|e| Error::io(p, e))?;
    Ok(sha256_hex(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub grid: FrequencyGrid,
    pub kind: QuantityKind,
    pub site: Site,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub stage: String,
    pub seed: u64,
    pub m_count: usize,
    /// Input artifacts by role, as content hashes.
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub union: UnionGrid,
    /// Micro-harmonics `0..=stored_harmonics` are kept on disk.
    pub stored_harmonics: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
    pub references: Vec<ReferenceEntry>,
    /// Signal name to file.
    pub signals: BTreeMap<String, String>,
    /// Relative path to SHA-256 of every data file.
    pub files: BTreeMap<String, String>,
    pub diagnostics: Vec<Diagnostics>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Manifest> {
        let p = dir.as_ref().join(MANIFEST);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parse(format!("{}: line {}", p.display(), e.line()), e.to_string()))
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

fn push_row(s: &mut String, m: usize, values: &[Complex64]) {
    let _ = write!(s, "{m}");
    for v in values {
        let _ = write!(s, " {:?} {:?}", v.re, v.im);
    }
    s.push('\n');
}

fn parse_rows(path: &Path, expect: usize) -> Result<Vec<(usize, Vec<Complex64>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let loc = || format!("{}: line {}", path.display(), ln + 1);
        let mut it = line.split_ascii_whitespace();
        let m: usize = it
            .next()
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| Error::parse(loc(), "missing realization index"))?;
        let nums: Vec<f64> = it
            .map(|x| x.parse::<f64>().map_err(|e| Error::parse(loc(), e.to_string())))
            .collect::<Result<_>>()?;
        if nums.len() != 2 * expect {
            return Err(Error::parse(loc(), format!("expected {expect} complex values, found {}", nums.len() / 2)));
        }
        rows.push((m, nums.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()));
    }
    Ok(rows)
}

/// What a record directory was produced from.
#[derive(Debug, Clone, Default)]
pub struct RunInfo {
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
    /// Highest base-grid bin to keep; `None` keeps the whole union.
    pub keep_bins: Option<u64>,
}

/// Write records to `dir` and return the manifest.
pub fn write_records(dir: impl AsRef<Path>, records: &[SteadyStateRecord], info: &RunInfo) -> Result<Manifest> {
    let dir = dir.as_ref();
    let first = records.first().ok_or_else(|| Error::domain("no records to write"))?;
    let union = first.union;
    let stored = match info.keep_bins {
        Some(k) => ((k as usize) * union.subdivisions as usize).min(union.harmonics),
        None => union.harmonics,
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    let mut signals = BTreeMap::new();
    for id in first.signals.keys() {
        let name = id.to_string();
        let rel = format!("signals/{name}.txt");
        let mut text = format!("# signal {name}, micro-harmonics 0..={stored}, one realization per line\n");
        for r in records {
            let v = r
                .signals
                .get(id)
                .ok_or_else(|| Error::structural(format!("record {} lacks signal {name}", r.m)))?;
            push_row(&mut text, r.m, &v[..=stored]);
        }
        files.insert(rel.clone(), write_hashed(dir.join(&rel), &text)?);
        signals.insert(name, rel);
    }
    let mut references = Vec::new();
    for (i, (spec0, site)) in first.references.iter().zip(&first.sites).enumerate() {
        let rel = format!("references/r{i}.txt");
        let mut text = format!("# reference {i}, {} bins, one realization per line\n", spec0.len());
        for r in records {
            push_row(&mut text, r.m, r.references[i].values());
        }
        files.insert(rel.clone(), write_hashed(dir.join(&rel), &text)?);
        references.push(ReferenceEntry {
            grid: spec0.grid().clone(),
            kind: spec0.kind(),
            site: *site,
            file: rel,
        });
    }
    let manifest = Manifest {
        tool_version: TOOL_VERSION.to_string(),
        stage: "simulate".into(),
        seed: info.seed,
        m_count: records.len(),
        inputs: info.inputs.clone(),
        config: info.config.clone(),
        union,
        stored_harmonics: stored,
        ts: first.ts,
        references,
        signals,
        files,
        diagnostics: records.iter().map(|r| r.diagnostics).collect(),
    };
    write_hashed(dir.join(MANIFEST), &manifest.to_json())?;
    Ok(manifest)
}

/// Read a record directory, checking every file against its hash.
pub fn read_records(dir: impl AsRef<Path>) -> Result<(Vec<SteadyStateRecord>, Manifest)> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir)?;
    for (rel, hash) in &manifest.files {
        let got = hash_file(dir.join(rel))?;
        if &got != hash {
            return Err(Error::structural(format!("{rel} does not match its manifest hash")));
        }
    }
    let n = manifest.stored_harmonics + 1;
    let mut union = manifest.union;
    union.harmonics = manifest.stored_harmonics;
    let mut records: Vec<SteadyStateRecord> = Vec::with_capacity(manifest.m_count);
    let mut index: BTreeMap<usize, usize> = BTreeMap::new();
    for (name, rel) in &manifest.signals {
        let id: SignalId = name.parse()?;
        for (m, values) in parse_rows(&dir.join(rel), n)? {
            let slot = *index.entry(m).or_insert_with(|| {
                records.push(SteadyStateRecord {
                    m,
                    union,
                    references: Vec::new(),
                    sites: manifest.references.iter().map(|r| r.site).collect(),
                    signals: BTreeMap::new(),
                    diagnostics: Diagnostics::default(),
                    ts: manifest.ts,
                });
                records.len() - 1
            });
            records[slot].signals.insert(id, values);
        }
    }
    for r in &manifest.references {
        for (m, values) in parse_rows(&dir.join(&r.file), r.grid.len())? {
            let slot = *index
                .get(&m)
                .ok_or_else(|| Error::structural(format!("{}: realization {m} has no signals", r.file)))?;
            records[slot].references.push(Spectrum::new(r.grid.clone(), values, r.kind)?);
        }
    }
    if records.len() != manifest.m_count
        || records.iter().any(|r| r.references.len() != manifest.references.len())
    {
        return Err(Error::structural("record files are incomplete"));
    }
    for r in &mut records {
        if let Some(d) = manifest.diagnostics.get(r.m) {
            r.diagnostics = *d;
        }
    }
    records.sort_by_key(|r| r.m);
    Ok((records, manifest))
}

pub fn manifest_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(MANIFEST)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::excitation::{design_multisine, design_tickler, MultisineKind};
    use crate::netmodel::{Frf, Network, PortBlock, PortNetwork, StaticMap, SubCircuit};
    use crate::solver::{run_experiment, SolverConfig};
    use crate::spectra::BinLabel;

    fn records() -> Vec<SteadyStateRecord> {
        let grid = FrequencyGrid::uniform(1.0, (1..=6).collect(), BinLabel::Excited).unwrap();
        let block = PortBlock::new(
            vec![vec![Frf::real(0.1), Frf::zero()], vec![Frf::real(2.0), Frf::real(0.2)]],
            vec![StaticMap::identity(), StaticMap::cubic(0.1)],
        )
        .unwrap();
        let net = Network::Port(PortNetwork::matched_chain(grid, vec![SubCircuit::nonlinear("a", block)], 50.0).unwrap());
        let spec = design_multisine(1.0, 1.0, 6.0, 3.0, MultisineKind::Full, 0).unwrap();
        let tick = design_tickler(&spec, 0.25, 0.01, 0).unwrap();
        run_experiment(&net, &spec, &[(tick, Site::CurrentAtLoad)], 3, 5, &SolverConfig::default()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let recs = records();
        let dir = tempfile::tempdir().unwrap();
        let info = RunInfo {
            seed: 5,
            ..RunInfo::default()
        };
        let man = write_records(dir.path(), &recs, &info).unwrap();
        assert_eq!(man.files.len(), man.signals.len() + 2);
        let (back, man2) = read_records(dir.path()).unwrap();
        assert_eq!(man, man2);
        assert_eq!(back, recs);
    }

    #[test]
    fn truncation_and_tamper_detection() {
        let recs = records();
        let dir = tempfile::tempdir().unwrap();
        let info = RunInfo {
            keep_bins: Some(6),
            ..RunInfo::default()
        };
        let man = write_records(dir.path(), &recs, &info).unwrap();
        assert_eq!(man.stored_harmonics, 6 * man.union.subdivisions as usize);
        let (back, _) = read_records(dir.path()).unwrap();
        let g = recs[0].references[0].grid();
        assert_eq!(
            back[1].signal_on(SignalId::Output, g).unwrap(),
            recs[1].signal_on(SignalId::Output, g).unwrap()
        );
        let f = dir.path().join("signals/out.txt");
        let text = fs::read_to_string(&f).unwrap().replacen("1 ", "1  ", 1);
        fs::write(&f, text).unwrap();
        assert!(matches!(read_records(dir.path()), Err(Error::Structural(_))));
    }

    #[test]
    fn writes_are_deterministic() {
        let recs = records();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = write_records(a.path(), &recs, &RunInfo::default()).unwrap();
        let m2 = write_records(b.path(), &recs, &RunInfo::default()).unwrap();
        assert_eq!(m1.hash(), m2.hash());
        assert_eq!(hash_file(manifest_path(a.path())).unwrap(), hash_file(manifest_path(b.path())).unwrap());
    }
}
