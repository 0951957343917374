//! On-disk formats. Traces are CSV with `#` metadata lines; everything else
//! is JSON with explicit dimensions and row-major arrays. Floats are written
//! in their shortest round-trip decimal form, so reading a file back gives
//! the exact doubles that were written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use tesqdt::calibration::ProbeCalibration;
use tesqdt::estimation::EfficiencyEstimate;
use tesqdt::{AmplitudeTrace, CountTable, PovmMatrix, Probe, ProbeEnsemble, ReconstructionConfig};

use crate::config::{sha256_hex, PipelineConfig};
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const ENSEMBLE: &str = "ensemble.json";
pub const COUNTS: &str = "counts.json";
pub const FITS: &str = "fits.json";
pub const POVM: &str = "povm.json";
pub const CONVERGENCE: &str = "convergence.csv";
pub const ESTIMATE: &str = "estimate.json";
pub const FIDELITY: &str = "fidelity.csv";
pub const COMPARISON: &str = "comparison.csv";
pub const SWEEP: &str = "sweep.csv";
pub const VALIDATION: &str = "validation.json";

const AMPLITUDE_COLUMN: &str = "amplitude_mv";
const COUNT_COLUMN: &str = "count";

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::schema(format!("{}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Checks the `format` tag common to every JSON artifact.
fn check_format(path: &Path, found: &str, expected: &str) -> CliResult<()> {
    if found != expected {
        return Err(CliError::schema(format!("{}: expected a {expected} file, found {found}", path.display())));
    }
    Ok(())
}

pub fn trace_file_name(probe_id: u32) -> String {
    format!("probe_{probe_id:03}.csv")
}

pub fn truth_file_name(probe_id: u32) -> String {
    format!("probe_{probe_id:03}.truth.csv")
}

/// Metadata carried in the `#` lines of a trace file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceHeader {
    pub probe_id: Option<u32>,
    pub config_hash: Option<String>,
    pub fields: BTreeMap<String, String>,
}

pub fn format_trace(trace: &AmplitudeTrace, metadata: &[(&str, String)]) -> String {
    let mut out = String::with_capacity(trace.len() * 20 + 256);
    out.push_str("# tesqdt amplitude trace\n");
    writeln!(out, "# probe_id: {}", trace.probe_id).unwrap();
    for (k, v) in metadata {
        writeln!(out, "# {k}: {v}").unwrap();
    }
    out.push_str(AMPLITUDE_COLUMN);
    out.push('\n');
    for a in trace.amplitudes() {
        writeln!(out, "{a:?}").unwrap();
    }
    out
}

pub fn format_truth(counts: &[u32], metadata: &[(&str, String)]) -> String {
    let mut out = String::with_capacity(counts.len() * 3 + 256);
    out.push_str("# tesqdt ground-truth detected counts\n");
    for (k, v) in metadata {
        writeln!(out, "# {k}: {v}").unwrap();
    }
    out.push_str(COUNT_COLUMN);
    out.push('\n');
    for c in counts {
        writeln!(out, "{c}").unwrap();
    }
    out
}

fn parse_header(text: &str) -> TraceHeader {
    let mut header = TraceHeader::default();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some((k, v)) = line.trim_start_matches('#').split_once(':') {
            header.fields.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    header.probe_id = header.fields.get("probe_id").and_then(|v| v.parse().ok());
    header.config_hash = header.fields.get("config_hash").cloned();
    header
}

/// Reads the single named column of a `#`-commented CSV file.
fn read_column<T: std::str::FromStr>(path: &Path, text: &str, column: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| CliError::schema(format!("{}: {e}", path.display())))?.clone();
    let idx = headers.iter().position(|h| h == column).ok_or_else(|| {
        CliError::schema(format!(
            "{}: no `{column}` column (found: {})",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::schema(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = record.get(idx).unwrap_or("");
        let value = field.trim().parse::<T>().map_err(|e| {
            CliError::schema(format!("{}: line {line}, field `{column}`: cannot parse {field:?}: {e}", path.display()))
        })?;
        out.push(value);
    }
    Ok(out)
}

pub struct LoadedTrace {
    pub trace: AmplitudeTrace,
    pub header: TraceHeader,
    pub path: PathBuf,
}

/// Reads a trace file and, if present, its truth sidecar.
pub fn read_trace(path: &Path) -> CliResult<LoadedTrace> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let header = parse_header(&text);
    let probe_id = match header.probe_id {
        Some(id) => id,
        None => probe_id_from_name(path).ok_or_else(|| {
            CliError::schema(format!("{}: no probe_id header and none in the file name", path.display()))
        })?,
    };
    let amplitudes: Vec<f64> = read_column(path, &text, AMPLITUDE_COLUMN)?;
    if let Some(i) = amplitudes.iter().position(|a| !a.is_finite()) {
        return Err(CliError::schema(format!("{}: amplitude {} is not finite", path.display(), i + 1)));
    }
    let truth_path = path.with_file_name(truth_file_name(probe_id));
    let truth = if truth_path.exists() {
        let t = fs::read_to_string(&truth_path).map_err(|e| CliError::io(&truth_path, e))?;
        Some(read_column::<u32>(&truth_path, &t, COUNT_COLUMN)?)
    } else {
        None
    };
    let trace = AmplitudeTrace::new(probe_id, amplitudes, truth)
        .map_err(|e| CliError::schema(format!("{}: {e}", path.display())))?;
    Ok(LoadedTrace { trace, header, path: path.to_path_buf() })
}

fn probe_id_from_name(path: &Path) -> Option<u32> {
    path.file_stem()?.to_str()?.strip_prefix("probe_")?.parse().ok()
}

/// Trace files of a directory (`*.csv` except truth sidecars), sorted by name.
pub fn trace_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".csv") && !name.ends_with(".truth.csv") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub probe_id: u32,
    pub mean_photons: f64,
    pub n_pulses: u64,
    pub trace_file: String,
    pub truth_file: String,
    pub trace_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub traces: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FORMAT: &'static str = "tesqdt/manifest";

    pub fn read(path: &Path) -> CliResult<Self> {
        let m: Manifest = read_json(path)?;
        check_format(path, &m.format, Self::FORMAT)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub format: String,
    /// Absent for ensembles written by hand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub probes: Vec<Probe>,
}

impl EnsembleFile {
    pub const FORMAT: &'static str = "tesqdt/ensemble";

    pub fn new(config_hash: &str, ensemble: &ProbeEnsemble) -> Self {
        EnsembleFile {
            format: Self::FORMAT.into(),
            config_hash: Some(config_hash.into()),
            probes: ensemble.probes().to_vec(),
        }
    }

    pub fn read(path: &Path) -> CliResult<(Self, ProbeEnsemble)> {
        let f: EnsembleFile = read_json(path)?;
        check_format(path, &f.format, Self::FORMAT)?;
        let ensemble =
            ProbeEnsemble::new(f.probes.clone()).map_err(|e| CliError::schema(format!("{}: {e}", path.display())))?;
        Ok((f, ensemble))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountsFile {
    pub format: String,
    pub config_hash: String,
    pub method: String,
    pub n_outcomes: usize,
    pub n_probes: usize,
    pub probe_ids: Vec<u32>,
    /// `counts[n * n_probes + j]`.
    pub counts: Vec<u64>,
}

impl CountsFile {
    pub const FORMAT: &'static str = "tesqdt/count_table";

    pub fn new(config_hash: &str, method: &str, table: &CountTable) -> Self {
        CountsFile {
            format: Self::FORMAT.into(),
            config_hash: config_hash.into(),
            method: method.into(),
            n_outcomes: table.n_outcomes(),
            n_probes: table.n_probes(),
            probe_ids: table.probe_ids().to_vec(),
            counts: table.counts_row_major(),
        }
    }

    pub fn read(path: &Path) -> CliResult<(Self, CountTable)> {
        let f: CountsFile = read_json(path)?;
        check_format(path, &f.format, Self::FORMAT)?;
        if f.probe_ids.len() != f.n_probes || f.counts.len() != f.n_outcomes * f.n_probes {
            return Err(CliError::schema(format!(
                "{}: {} probe ids and {} counts do not fit {} outcomes x {} probes",
                path.display(),
                f.probe_ids.len(),
                f.counts.len(),
                f.n_outcomes,
                f.n_probes
            )));
        }
        let table = CountTable::from_row_major(f.n_outcomes, f.probe_ids.clone(), &f.counts)
            .map_err(|e| CliError::schema(format!("{}: {e}", path.display())))?;
        Ok((f, table))
    }
}

/// Calibration report of one probe, with the truth comparison when a
/// sidecar was available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    #[serde(flatten)]
    pub calibration: ProbeCalibration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_counts: Option<Vec<u64>>,
    /// Fraction of events whose assigned outcome differs from the truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misassigned_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedProbe {
    pub probe_id: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitsFile {
    pub format: String,
    pub config_hash: String,
    pub probes: Vec<FitReport>,
    pub failed: Vec<FailedProbe>,
}

impl FitsFile {
    pub const FORMAT: &'static str = "tesqdt/calibration_fits";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PovmFile {
    pub format: String,
    pub config_hash: String,
    pub n_outcomes: usize,
    pub truncation: usize,
    pub last_outcome_cumulative: bool,
    /// `entries[n * truncation + m]`.
    pub entries: Vec<f64>,
    pub reconstruction: ReconstructionConfig,
    pub data_term: f64,
    pub reg_term: f64,
    pub converged: bool,
    pub iterations: usize,
    pub probe_ids: Vec<u32>,
    pub per_probe_residuals: Vec<f64>,
    pub probe_tail_mass: Vec<f64>,
}

impl PovmFile {
    pub const FORMAT: &'static str = "tesqdt/povm";

    pub fn read(path: &Path) -> CliResult<(Self, PovmMatrix)> {
        let f: PovmFile = read_json(path)?;
        check_format(path, &f.format, Self::FORMAT)?;
        let povm = PovmMatrix::new(f.n_outcomes, f.truncation, f.entries.clone(), f.last_outcome_cumulative)
            .map_err(|e| CliError::schema(format!("{}: {e}", path.display())))?;
        Ok((f, povm))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateFile {
    pub format: String,
    pub config_hash: String,
    pub dark_counts: bool,
    pub estimate: EfficiencyEstimate,
}

impl EstimateFile {
    pub const FORMAT: &'static str = "tesqdt/estimate";

    pub fn read(path: &Path) -> CliResult<Self> {
        let f: EstimateFile = read_json(path)?;
        check_format(path, &f.format, Self::FORMAT)?;
        Ok(f)
    }
}

/// Lineage of a trace directory: the manifest's config hash, else the hash
/// recorded in the trace headers, else a digest of the trace contents.
pub fn trace_lineage(traces: &[LoadedTrace], manifest: Option<&Manifest>, force: bool) -> CliResult<String> {
    if let Some(m) = manifest {
        check_lineage(
            traces.iter().filter_map(|t| t.header.config_hash.as_deref()).chain([m.config_hash.as_str()]),
            "trace headers and manifest",
            force,
        )?;
        return Ok(m.config_hash.clone());
    }
    let recorded: Vec<&str> = traces.iter().filter_map(|t| t.header.config_hash.as_deref()).collect();
    if recorded.len() == traces.len() && !recorded.is_empty() {
        check_lineage(recorded.iter().copied(), "trace headers", force)?;
        return Ok(recorded[0].to_string());
    }
    let mut digest = String::new();
    for t in traces {
        let name = t.path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let bytes: Vec<u8> = t.trace.amplitudes().iter().flat_map(|a| a.to_le_bytes()).collect();
        writeln!(digest, "{name} {}", sha256_hex(&bytes)).unwrap();
    }
    Ok(sha256_hex(digest.as_bytes()))
}

/// Fails unless every hash agrees (or `force` is set, which only warns).
pub fn check_lineage<'a>(hashes: impl IntoIterator<Item = &'a str>, what: &str, force: bool) -> CliResult<()> {
    let mut distinct: Vec<&str> = hashes.into_iter().collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() > 1 {
        let short: Vec<String> = distinct.iter().map(|h| h.chars().take(12).collect()).collect();
        let msg = format!("{what} come from different runs (config hashes {})", short.join(", "));
        if force {
            log::warn!("{msg}; continuing because of --force");
        } else {
            return Err(CliError::Lineage(msg));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_round_trips_exactly() {
        let amps = vec![0.1, -2.5e-17, 13.000000000000002, 1.0 / 3.0, -0.0];
        let trace = AmplitudeTrace::new(4, amps.clone(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(trace_file_name(4));
        write_text(&path, &format_trace(&trace, &[("config_hash", "abc".into())])).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back.trace.amplitudes(), &amps[..]);
        assert_eq!(back.header.probe_id, Some(4));
        assert_eq!(back.header.config_hash.as_deref(), Some("abc"));
        assert!(back.trace.truth_counts().is_none());
    }

    #[test]
    fn bad_value_reports_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe_002.csv");
        write_text(&path, "# probe_id: 2\namplitude_mv\n1.0\nabc\n").unwrap();
        let err = read_trace(&path).err().unwrap().to_string();
        assert!(err.contains("line 4") && err.contains("amplitude_mv"), "{err}");
        write_text(&path, "voltage\n1.0\n").unwrap();
        assert!(matches!(read_trace(&path), Err(CliError::Schema(_))));
    }

    #[test]
    fn probe_id_falls_back_to_file_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe_017.csv");
        write_text(&path, "amplitude_mv\n1.0\n").unwrap();
        assert_eq!(read_trace(&path).unwrap().trace.probe_id, 17);
    }

    #[test]
    fn lineage_check() {
        assert!(check_lineage(["a", "a"], "x", false).is_ok());
        assert!(matches!(check_lineage(["a", "b"], "x", false), Err(CliError::Lineage(_))));
        assert!(check_lineage(["a", "b"], "x", true).is_ok());
    }
}
