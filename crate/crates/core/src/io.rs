//! Datasets, posterior and predictive files, and run manifests.
//!
//! Datasets are CSV with header `record,u_1..u_N,x_1..x_N,total`. Posterior
//! and predictive samples are newline-delimited JSON: a header object naming
//! the format and version, then one object per draw. Every file is written
//! to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{BlockAcceptance, ChainSamples, PosteriorSamples, SamplerConfig};
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::prediction::{PredictiveRun, PredictiveSamples};
use crate::simplex::AvailabilityVector;

pub const POSTERIOR_FORMAT: &str = "usertransfer-posterior";
pub const PREDICTIVE_FORMAT: &str = "usertransfer-predictive";
pub const FORMAT_VERSION: u32 = 1;

/// One aggregate observation: availability `u` and provider loads `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub u: AvailabilityVector,
    pub x: Vec<f64>,
    /// Total load `M`; equals the sum of `x`.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_providers: usize,
    records: Vec<Record>,
}

/// Allowed gap between a record's summed loads and its declared total.
pub const TOTAL_TOLERANCE: f64 = 1e-3;

fn check_record(row: usize, n: usize, rec: &Record) -> Result<()> {
    let invariant = |msg: String| Error::Invariant { row, msg };
    if rec.u.len() != n || rec.x.len() != n {
        return Err(invariant(format!("expected {n} providers")));
    }
    if rec.u.iter().all(|v| *v == 0.0) {
        return Err(invariant("no provider is available".into()));
    }
    if rec.x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(invariant("loads must be finite and >= 0".into()));
    }
    let sum: f64 = rec.x.iter().sum();
    if !(rec.total > 0.0) || (sum - rec.total).abs() > TOTAL_TOLERANCE {
        return Err(invariant(format!("loads sum to {sum}, total is {}", rec.total)));
    }
    Ok(())
}

impl Dataset {
    pub fn new(n_providers: usize, records: Vec<Record>) -> Result<Self> {
        for (row, rec) in records.iter().enumerate() {
            check_record(row, n_providers, rec)?;
        }
        Ok(Self { n_providers, records })
    }

    /// Builds records from paired availability and load vectors, taking
    /// each record's total as the sum of its loads.
    pub fn from_parts(availability: Vec<AvailabilityVector>, loads: Vec<Vec<f64>>) -> Result<Self> {
        if availability.len() != loads.len() {
            return Err(Error::DimensionMismatch {
                expected: availability.len(),
                found: loads.len(),
            });
        }
        let n = availability.first().map(|u| u.len()).unwrap_or(0);
        let records = availability
            .into_iter()
            .zip(loads)
            .map(|(u, x)| {
                let total = x.iter().sum();
                Record { u, x, total }
            })
            .collect();
        Self::new(n, records)
    }

    pub fn n_providers(&self) -> usize {
        self.n_providers
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// First `ceil(fraction * len)` records and the rest.
    pub fn split(&self, fraction: f64) -> (Dataset, Dataset) {
        let k = ((fraction.clamp(0.0, 1.0) * self.len() as f64).ceil() as usize).min(self.len());
        (self.subset(0..k), self.subset(k..self.len()))
    }

    pub fn subset(&self, idx: impl IntoIterator<Item = usize>) -> Dataset {
        Dataset {
            n_providers: self.n_providers,
            records: idx.into_iter().map(|i| self.records[i].clone()).collect(),
        }
    }

    /// Canonical CSV encoding; floats use the shortest representation that
    /// parses back to the same value.
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let n = self.n_providers;
        let mut header = vec!["record".to_string()];
        header.extend((1..=n).map(|i| format!("u_{i}")));
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.push("total".into());
        w.write_record(&header).expect("in-memory write");
        for (i, r) in self.records.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(r.u.iter().map(|v| v.to_string()));
            row.extend(r.x.iter().map(|v| v.to_string()));
            row.push(r.total.to_string());
            w.write_record(&row).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    /// SHA-256 of the canonical CSV encoding, hex encoded.
    pub fn fingerprint(&self) -> String {
        fingerprint_bytes(&self.to_csv_bytes())
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
            .clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 4 || !cols.len().is_multiple_of(2) || cols[0] != "record" || cols[cols.len() - 1] != "total" {
            return Err(Error::Schema("expected columns record,u_1..u_N,x_1..x_N,total".into()));
        }
        let n = (cols.len() - 2) / 2;
        for i in 0..n {
            if cols[1 + i] != format!("u_{}", i + 1) || cols[1 + n + i] != format!("x_{}", i + 1) {
                return Err(Error::Schema(format!(
                    "unexpected column names near provider {}",
                    i + 1
                )));
            }
        }
        let mut records = Vec::new();
        for (row, result) in rdr.records().enumerate() {
            let line = row + 2;
            let rec = result.map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
            if rec.len() != cols.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} fields, found {}", cols.len(), rec.len()),
                });
            }
            let nums: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|e| Error::Parse {
                        line,
                        msg: format!("{f:?}: {e}"),
                    })
                })
                .collect::<Result<_>>()?;
            let u = AvailabilityVector::new(nums[..n].to_vec()).map_err(|e| Error::Invariant {
                row,
                msg: e.to_string(),
            })?;
            let record = Record {
                u,
                x: nums[n..2 * n].to_vec(),
                total: nums[2 * n],
            };
            check_record(row, n, &record)?;
            records.push(record);
        }
        Ok(Self {
            n_providers: n,
            records,
        })
    }
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a temporary file beside `path` and renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_csv_reader(BufReader::new(file))
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_atomic(path, &dataset.to_csv_bytes())
}

/// Provenance written alongside every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    /// Effective configuration of the run.
    pub config: serde_json::Value,
    /// Fingerprints of input files by role.
    pub inputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// Taken from `SOURCE_DATE_EPOCH` when set, so reruns stay byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config,
            inputs: BTreeMap::new(),
            seeds: BTreeMap::new(),
            created_unix: std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()),
        }
    }
}

/// `data.csv` -> `data.csv.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serialises");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serialises");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[derive(Serialize, Deserialize)]
struct PosteriorHeader {
    format: String,
    version: u32,
    manifest: Option<Manifest>,
    model: ModelConfig,
    sampler: SamplerConfig,
    n_providers: usize,
    dataset_fingerprint: Option<String>,
    acceptance: Vec<Vec<BlockAcceptance>>,
    #[serde(default)]
    divergent: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRecord {
    c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<Vec<f64>>,
    w: Vec<f64>,
    #[serde(rename = "L")]
    l: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DrawLine<T> {
    chain: usize,
    draw: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lp: Option<f64>,
    params: T,
}

#[derive(Deserialize)]
struct FormatProbe {
    format: Option<String>,
    version: Option<u32>,
}

fn check_header(line: &str, format: &str) -> Result<()> {
    let probe: FormatProbe = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if probe.format.as_deref() != Some(format) {
        return Err(Error::Schema(format!(
            "expected a {format} file, found {:?}",
            probe.format
        )));
    }
    match probe.version {
        Some(FORMAT_VERSION) => Ok(()),
        found => Err(Error::Version {
            found: found.unwrap_or(0),
            expected: FORMAT_VERSION,
        }),
    }
}

fn to_json_line<T: Serialize>(out: &mut Vec<u8>, value: &T) {
    serde_json::to_writer(&mut *out, value).expect("value serialises");
    out.push(b'\n');
}

pub fn posterior_to_bytes(posterior: &PosteriorSamples, manifest: Option<&Manifest>) -> Vec<u8> {
    let mut out = Vec::new();
    to_json_line(
        &mut out,
        &PosteriorHeader {
            format: POSTERIOR_FORMAT.into(),
            version: FORMAT_VERSION,
            manifest: manifest.cloned(),
            model: posterior.model.clone(),
            sampler: posterior.sampler.clone(),
            n_providers: posterior.n_providers,
            dataset_fingerprint: posterior.dataset_fingerprint.clone(),
            acceptance: posterior.chains.iter().map(|c| c.acceptance.clone()).collect(),
            divergent: posterior.chains.iter().map(|c| c.divergent).collect(),
        },
    );
    for (chain, samples) in posterior.chains.iter().enumerate() {
        for (draw, p) in samples.draws.iter().enumerate() {
            let params = ParamsRecord {
                c: p.concentration(),
                alpha: p.alpha(),
                beta: match p {
                    ModelParams::Complete(cp) => Some(cp.beta.clone()),
                    ModelParams::Naive(_) => None,
                },
                w: p.mixture_weights().into_inner(),
                l: p.preferences().to_rows(),
            };
            let lp = samples.log_density.get(draw).copied();
            to_json_line(
                &mut out,
                &DrawLine {
                    chain,
                    draw,
                    lp,
                    params,
                },
            );
        }
    }
    out
}

pub fn save_posterior(path: &Path, posterior: &PosteriorSamples, manifest: Option<&Manifest>) -> Result<()> {
    write_atomic(path, &posterior_to_bytes(posterior, manifest))
}

/// Reads a posterior file; also returns the manifest stored in its header.
pub fn load_posterior(path: &Path) -> Result<(PosteriorSamples, Option<Manifest>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_posterior(BufReader::new(file))
}

pub fn read_posterior<R: BufRead>(reader: R) -> Result<(PosteriorSamples, Option<Manifest>)> {
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Schema("empty posterior file".into()))?;
    let first = first.map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    check_header(&first, POSTERIOR_FORMAT)?;
    let header: PosteriorHeader = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let mut chains: Vec<ChainSamples> = header
        .acceptance
        .into_iter()
        .enumerate()
        .map(|(k, acceptance)| ChainSamples {
            draws: Vec::new(),
            log_density: Vec::new(),
            acceptance,
            divergent: header.divergent.get(k).copied().unwrap_or(0),
        })
        .collect();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DrawLine<ParamsRecord> = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let bad = |msg: String| Error::Parse { line: line_no, msg };
        let rec = parsed.params;
        let params = match header.model.variant {
            Variant::Naive => ModelParams::naive(rec.w, rec.l, rec.c),
            Variant::Complete => ModelParams::complete(
                rec.alpha.ok_or_else(|| bad("missing alpha".into()))?,
                rec.beta.ok_or_else(|| bad("missing beta".into()))?,
                rec.l,
                rec.c,
            ),
        }
        .map_err(|e| bad(e.to_string()))?;
        while chains.len() <= parsed.chain {
            chains.push(ChainSamples::default());
        }
        let chain = &mut chains[parsed.chain];
        if parsed.draw != chain.draws.len() {
            return Err(bad(format!(
                "draw {} of chain {} is out of order",
                parsed.draw, parsed.chain
            )));
        }
        chain.draws.push(params);
        if let Some(lp) = parsed.lp {
            chain.log_density.push(lp);
        }
    }
    Ok((
        PosteriorSamples {
            model: header.model,
            sampler: header.sampler,
            n_providers: header.n_providers,
            dataset_fingerprint: header.dataset_fingerprint,
            chains,
        },
        header.manifest,
    ))
}

#[derive(Serialize, Deserialize)]
struct ScenarioInfo {
    scenario: usize,
    u: Vec<f64>,
    total: f64,
    #[serde(default)]
    rejected: usize,
}

#[derive(Serialize, Deserialize)]
struct PredictiveHeader {
    format: String,
    version: u32,
    manifest: Option<Manifest>,
    #[serde(default)]
    shrinkage: Option<f64>,
    scenarios: Vec<ScenarioInfo>,
}

#[derive(Serialize, Deserialize)]
struct LoadLine {
    scenario: usize,
    draw: usize,
    loads: Vec<f64>,
}

pub fn predictive_to_bytes(samples: &PredictiveRun, manifest: Option<&Manifest>) -> Vec<u8> {
    let mut out = Vec::new();
    to_json_line(
        &mut out,
        &PredictiveHeader {
            format: PREDICTIVE_FORMAT.into(),
            version: FORMAT_VERSION,
            manifest: manifest.cloned(),
            shrinkage: samples.shrinkage,
            scenarios: samples
                .scenarios
                .iter()
                .map(|s| ScenarioInfo {
                    scenario: s.scenario,
                    u: s.u.to_vec(),
                    total: s.total,
                    rejected: s.rejected,
                })
                .collect(),
        },
    );
    for set in &samples.scenarios {
        for (draw, loads) in set.draws.iter().enumerate() {
            to_json_line(
                &mut out,
                &LoadLine {
                    scenario: set.scenario,
                    draw,
                    loads: loads.clone(),
                },
            );
        }
    }
    out
}

pub fn save_predictive(path: &Path, samples: &PredictiveRun, manifest: Option<&Manifest>) -> Result<()> {
    write_atomic(path, &predictive_to_bytes(samples, manifest))
}

pub fn load_predictive(path: &Path) -> Result<(PredictiveRun, Option<Manifest>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictive(BufReader::new(file))
}

pub fn read_predictive<R: BufRead>(reader: R) -> Result<(PredictiveRun, Option<Manifest>)> {
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Schema("empty predictive file".into()))?;
    let first = first.map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    check_header(&first, PREDICTIVE_FORMAT)?;
    let header: PredictiveHeader = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let mut sets = Vec::with_capacity(header.scenarios.len());
    let mut index = BTreeMap::new();
    for info in header.scenarios {
        let u = AvailabilityVector::new(info.u).map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        index.insert(info.scenario, sets.len());
        sets.push(PredictiveSamples {
            scenario: info.scenario,
            u,
            total: info.total,
            draws: Vec::new(),
            rejected: info.rejected,
        });
    }
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LoadLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let set = index
            .get(&parsed.scenario)
            .map(|&k| &mut sets[k])
            .ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("unknown scenario {}", parsed.scenario),
            })?;
        if parsed.loads.len() != set.u.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} loads, found {}", set.u.len(), parsed.loads.len()),
            });
        }
        set.draws.push(parsed.loads);
    }
    Ok((
        PredictiveRun {
            scenarios: sets,
            shrinkage: header.shrinkage,
        },
        header.manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset() -> Dataset {
        Dataset::from_parts(
            vec![
                AvailabilityVector::new(vec![1.0, 0.0, 1.0]).unwrap(),
                AvailabilityVector::new(vec![1.0, 1.0, 1.0]).unwrap(),
            ],
            vec![vec![33.3, 0.0, 66.7], vec![0.1 + 0.2, 10.0, 1e-300]],
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = dataset();
        let back = Dataset::from_csv_reader(&d.to_csv_bytes()[..]).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.fingerprint(), d.fingerprint());
    }

    #[test]
    fn csv_errors_carry_locations() {
        let bad_header = "id,u_1,x_1,total\n0,1,5,5\n";
        assert!(matches!(
            Dataset::from_csv_reader(bad_header.as_bytes()),
            Err(Error::Schema(_))
        ));
        let bad_number = "record,u_1,u_2,x_1,x_2,total\n0,1,1,2,3,5\n1,1,1,abc,3,5\n";
        assert!(matches!(
            Dataset::from_csv_reader(bad_number.as_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
        let bad_total = "record,u_1,u_2,x_1,x_2,total\n0,1,1,2,3,6\n";
        assert!(matches!(
            Dataset::from_csv_reader(bad_total.as_bytes()),
            Err(Error::Invariant { row: 0, .. })
        ));
    }

    #[test]
    fn manifest_path_appends_suffix() {
        assert_eq!(
            manifest_path(Path::new("out/data.csv")),
            PathBuf::from("out/data.csv.manifest.json")
        );
    }

    #[test]
    fn posterior_version_is_checked() {
        let line = r#"{"format":"usertransfer-posterior","version":99}"#;
        assert!(matches!(
            read_posterior(line.as_bytes()),
            Err(Error::Version { found: 99, expected: 1 })
        ));
        let line = r#"{"format":"something-else","version":1}"#;
        assert!(matches!(read_posterior(line.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn split_keeps_order() {
        let d = dataset();
        let (a, b) = d.split(0.5);
        assert_eq!(a.records(), &d.records()[..1]);
        assert_eq!(b.records(), &d.records()[1..]);
    }
}
