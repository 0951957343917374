//! One function per subcommand. Each reads its inputs, checks that they
//! belong to the same run, calls the library and writes its artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use tesqdt::calibration::{calibrate_ensemble, BinningMethod};
use tesqdt::estimation::{estimate_eta, estimate_eta_gamma};
use tesqdt::metrics::{
    fidelity_curve, sensitivity_sweep, three_way_comparison, ComparisonTable, FidelitySummary, SweepResult,
};
use tesqdt::photon_stats::{binomial_povm, dark_count_povm};
use tesqdt::sim::simulate_ensemble;
use tesqdt::tomography::reconstruct_povm;
use tesqdt::{CountTable, LinearDetectorModel, PovmMatrix, ProbeEnsemble};

use crate::artifacts::*;
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

/// Rows kept in the convergence log; longer histories are thinned evenly.
const CONVERGENCE_ROWS: usize = 5000;

pub fn simulate(cfg: &PipelineConfig, out: &Path) -> CliResult<()> {
    let ensemble = cfg.ensemble()?;
    let hash = cfg.hash();
    let traces = simulate_ensemble(&cfg.detector, &ensemble, cfg.seed)?;
    create_dir(out)?;
    let entries = traces
        .par_iter()
        .zip(ensemble.probes())
        .map(|(trace, probe)| {
            let meta = [
                ("mean_photons", format!("{:?}", probe.mean_photons)),
                ("n_pulses", probe.n_pulses.to_string()),
                ("seed", cfg.seed.to_string()),
                ("config_hash", hash.clone()),
            ];
            let text = format_trace(trace, &meta);
            let trace_file = trace_file_name(probe.id);
            let truth_file = truth_file_name(probe.id);
            write_text(&out.join(&trace_file), &text)?;
            let truth = trace.truth_counts().expect("simulated traces carry truth");
            write_text(&out.join(&truth_file), &format_truth(truth, &meta[2..]))?;
            Ok(ManifestEntry {
                probe_id: probe.id,
                mean_photons: probe.mean_photons,
                n_pulses: probe.n_pulses,
                trace_file,
                truth_file,
                trace_sha256: crate::config::sha256_hex(text.as_bytes()),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = Manifest {
        format: Manifest::FORMAT.into(),
        config_hash: hash.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        traces: entries,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    write_json(&out.join(ENSEMBLE), &EnsembleFile::new(&hash, &ensemble))?;
    println!("simulated {} traces into {} (config {})", traces.len(), out.display(), &hash[..12]);
    Ok(())
}

/// The configuration recorded with a trace directory, if any.
pub fn manifest_config(trace_dir: &Path) -> CliResult<Option<PipelineConfig>> {
    let path = trace_dir.join(MANIFEST);
    Ok(if path.exists() { Some(Manifest::read(&path)?.config) } else { None })
}

pub fn calibrate(trace_dir: &Path, out: &Path, cfg: &PipelineConfig, skip_failed: bool, force: bool) -> CliResult<()> {
    let files = trace_files(trace_dir)?;
    if files.is_empty() {
        return Err(CliError::schema(format!("{}: no trace files (*.csv)", trace_dir.display())));
    }
    let loaded = files.par_iter().map(|f| read_trace(f)).collect::<CliResult<Vec<_>>>()?;
    let manifest_path = trace_dir.join(MANIFEST);
    let manifest = if manifest_path.exists() { Some(Manifest::read(&manifest_path)?) } else { None };
    let hash = trace_lineage(&loaded, manifest.as_ref(), force)?;

    let traces: Vec<_> = loaded.iter().map(|l| l.trace.clone()).collect();
    let n_out = cfg.n_outcomes();
    let cal = calibrate_ensemble(&traces, n_out, &cfg.calibration, skip_failed)?;
    let method = match cfg.calibration.method {
        BinningMethod::Threshold => "threshold",
        BinningMethod::Area => "area",
    };

    let reports = cal
        .probes
        .iter()
        .map(|p| {
            let trace = traces.iter().find(|t| t.probe_id == p.probe_id).expect("calibrated probe has a trace");
            let truth_counts = trace.truth_histogram(n_out);
            let misassigned_fraction = trace.truth_counts().map(|truth| {
                let wrong = trace
                    .amplitudes()
                    .iter()
                    .zip(truth)
                    .filter(|(&a, &t)| p.thresholds.outcome(a, n_out) != (t as usize).min(n_out - 1))
                    .count();
                wrong as f64 / trace.len() as f64
            });
            FitReport { calibration: p.clone(), truth_counts, misassigned_fraction }
        })
        .collect();
    let failed = cal.failed.iter().map(|(id, e)| FailedProbe { probe_id: *id, error: e.to_string() }).collect();

    create_dir(out)?;
    write_json(&out.join(COUNTS), &CountsFile::new(&hash, method, &cal.table))?;
    write_json(
        &out.join(FITS),
        &FitsFile { format: FitsFile::FORMAT.into(), config_hash: hash.clone(), probes: reports, failed },
    )?;
    println!(
        "calibrated {} of {} traces ({method} binning, {n_out} outcomes) into {}",
        cal.probes.len(),
        traces.len(),
        out.display()
    );
    for (id, e) in &cal.failed {
        println!("  probe {id} skipped: {e}");
    }
    Ok(())
}

struct Inputs {
    hash: String,
    table: CountTable,
    ensemble: ProbeEnsemble,
}

/// Reads a count table and an ensemble and checks that they describe the
/// same probes and the same run.
fn read_inputs(counts: &Path, ensemble: &Path, force: bool) -> CliResult<Inputs> {
    let (counts_file, table) = CountsFile::read(counts)?;
    let (ensemble_file, ensemble) = EnsembleFile::read(ensemble)?;
    if let Some(h) = &ensemble_file.config_hash {
        check_lineage([counts_file.config_hash.as_str(), h.as_str()], "count table and ensemble", force)?;
    }
    if table.n_probes() != ensemble.len() {
        return Err(CliError::schema(format!(
            "count table has {} probes but the ensemble has {}",
            table.n_probes(),
            ensemble.len()
        )));
    }
    if let Some(p) = ensemble.probes().iter().find(|p| table.index_of(p.id).is_none()) {
        return Err(CliError::schema(format!("probe {} of the ensemble is missing from the count table", p.id)));
    }
    Ok(Inputs { hash: counts_file.config_hash, table, ensemble })
}

pub fn reconstruct(counts: &Path, ensemble: &Path, out: &Path, cfg: &PipelineConfig, force: bool) -> CliResult<()> {
    let inputs = read_inputs(counts, ensemble, force)?;
    // The outcome count is fixed by the data.
    let mut rc = cfg.reconstruction.clone();
    if rc.n_outcomes != inputs.table.n_outcomes() {
        log::warn!(
            "configuration asks for {} outcomes; using the count table's {}",
            rc.n_outcomes,
            inputs.table.n_outcomes()
        );
        rc.n_outcomes = inputs.table.n_outcomes();
    }
    let result = reconstruct_povm(&inputs.table, &inputs.ensemble, &rc)?;
    if !result.converged {
        log::warn!("reconstruction stopped after {} iterations without meeting the tolerance", result.iterations);
    }
    let povm_file = PovmFile {
        format: PovmFile::FORMAT.into(),
        config_hash: inputs.hash.clone(),
        n_outcomes: result.povm.n_outcomes(),
        truncation: result.povm.truncation(),
        last_outcome_cumulative: result.povm.last_outcome_cumulative(),
        entries: result.povm.entries().to_vec(),
        reconstruction: rc.clone(),
        data_term: result.data_term,
        reg_term: result.reg_term,
        converged: result.converged,
        iterations: result.iterations,
        probe_ids: inputs.ensemble.ids(),
        per_probe_residuals: result.per_probe_residuals.clone(),
        probe_tail_mass: result.probe_tail_mass.clone(),
    };
    create_dir(out)?;
    write_json(&out.join(POVM), &povm_file)?;
    write_text(&out.join(CONVERGENCE), &convergence_csv(&result.objective_history))?;
    println!(
        "reconstructed {}x{} POVM in {} iterations (data term {:.3e}, converged: {}) into {}",
        povm_file.n_outcomes,
        povm_file.truncation,
        result.iterations,
        result.data_term,
        result.converged,
        out.display()
    );
    Ok(())
}

fn convergence_csv(history: &[f64]) -> String {
    let stride = history.len().div_ceil(CONVERGENCE_ROWS).max(1);
    let mut out = String::from("iteration,objective\n");
    for (i, f) in history.iter().enumerate() {
        if i % stride == 0 || i + 1 == history.len() {
            writeln!(out, "{i},{f:?}").unwrap();
        }
    }
    out
}

pub fn estimate(
    counts: &Path,
    ensemble: &Path,
    out: &Path,
    cfg: &PipelineConfig,
    dark_counts: bool,
    force: bool,
) -> CliResult<()> {
    let inputs = read_inputs(counts, ensemble, force)?;
    let est = if dark_counts {
        estimate_eta_gamma(&inputs.table, &inputs.ensemble, &cfg.estimation)?
    } else {
        estimate_eta(&inputs.table, &inputs.ensemble, &cfg.estimation)?
    };
    create_dir(out)?;
    let file =
        EstimateFile { format: EstimateFile::FORMAT.into(), config_hash: inputs.hash, dark_counts, estimate: est };
    write_json(&out.join(ESTIMATE), &file)?;
    let e = &file.estimate;
    let mut line = format!("eta = {:.6}", e.eta_hat);
    if let Some(se) = e.eta_se {
        write!(line, " +- {se:.6}").unwrap();
    }
    if let (Some(g), Some(u)) = (e.gamma_hat, e.gamma_upper) {
        write!(line, ", gamma = {g:.3e} (upper bound {u:.3e} at {:.0}%)", 100.0 * cfg.estimation.confidence).unwrap();
    }
    println!("{line}; written to {}", out.join(ESTIMATE).display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ProbeSummary {
    probe_id: u32,
    mean_photons: f64,
    max_diff_reconstructed: f64,
    max_diff_linear: f64,
    tv_reconstructed: f64,
    tv_linear: f64,
    linear_outside_bound: bool,
}

#[derive(Debug, Serialize)]
struct ValidationReport {
    format: &'static str,
    config_hash: String,
    eta: f64,
    gamma: f64,
    fidelity_threshold: f64,
    /// Whether `F_m >= fidelity_threshold` for every `m <= split_m`.
    linear: bool,
    failing_columns: Vec<usize>,
    fidelity: FidelitySummary,
    sweep_envelope: FidelitySummary,
    linearity_violations: Vec<u32>,
    probes: Vec<ProbeSummary>,
}

pub fn validate(
    povm: &Path,
    counts: &Path,
    ensemble: &Path,
    estimate: &Path,
    out: &Path,
    cfg: &PipelineConfig,
    force: bool,
) -> CliResult<bool> {
    let inputs = read_inputs(counts, ensemble, force)?;
    let (povm_file, recon) = PovmFile::read(povm)?;
    let est_file = EstimateFile::read(estimate)?;
    check_lineage(
        [inputs.hash.as_str(), povm_file.config_hash.as_str(), est_file.config_hash.as_str()],
        "POVM, count table and estimate",
        force,
    )?;
    if recon.n_outcomes() != inputs.table.n_outcomes() {
        return Err(CliError::schema(format!(
            "POVM has {} outcomes but the count table has {}",
            recon.n_outcomes(),
            inputs.table.n_outcomes()
        )));
    }
    let eta = est_file.estimate.eta_hat;
    let gamma = est_file.estimate.gamma_hat.unwrap_or(0.0);
    let model = LinearDetectorModel::new(eta, gamma)?;
    let model_povm: PovmMatrix = if gamma > 0.0 {
        dark_count_povm(&model, recon.n_outcomes(), recon.truncation())?
    } else {
        binomial_povm(eta, recon.n_outcomes(), recon.truncation())?
    };

    let v = &cfg.validation;
    let curve = fidelity_curve(&recon, &model_povm)?;
    let comparison = three_way_comparison(&inputs.table, &recon, &model, &inputs.ensemble)?;
    let sweep =
        sensitivity_sweep(&inputs.table, &inputs.ensemble, &povm_file.reconstruction, &model_povm, &v.perturbations)?;
    let failing_columns = curve.failures(v.fidelity_threshold, v.split_m);
    let report = ValidationReport {
        format: "tesqdt/validation",
        config_hash: inputs.hash,
        eta,
        gamma,
        fidelity_threshold: v.fidelity_threshold,
        linear: failing_columns.is_empty(),
        failing_columns,
        fidelity: curve.summary(v.split_m),
        sweep_envelope: sweep.envelope_curve().summary(v.split_m),
        linearity_violations: comparison.linearity_violations(),
        probes: comparison
            .probes
            .iter()
            .map(|p| ProbeSummary {
                probe_id: p.probe_id,
                mean_photons: p.mean_photons,
                max_diff_reconstructed: p.max_diff_reconstructed,
                max_diff_linear: p.max_diff_linear,
                tv_reconstructed: p.tv_reconstructed,
                tv_linear: p.tv_linear,
                linear_outside_bound: p.linear_outside_bound,
            })
            .collect(),
    };

    create_dir(out)?;
    write_text(&out.join(FIDELITY), &fidelity_csv(&curve.values, &sweep))?;
    write_text(&out.join(COMPARISON), &comparison_csv(&comparison))?;
    write_text(&out.join(SWEEP), &sweep_csv(&sweep))?;
    write_json(&out.join(VALIDATION), &report)?;
    println!(
        "linearity {}: min F_m over m <= {} is {:.5} at m = {} (threshold {}); sweep envelope min {:.5}; reports in {}",
        if report.linear { "holds" } else { "REJECTED" },
        v.split_m,
        report.fidelity.min_low,
        report.fidelity.argmin_low,
        v.fidelity_threshold,
        report.sweep_envelope.min_low,
        out.display()
    );
    Ok(report.linear)
}

fn fidelity_csv(values: &[f64], sweep: &SweepResult) -> String {
    let mut out = String::from("m,fidelity,sweep_envelope\n");
    for (m, (f, e)) in values.iter().zip(&sweep.envelope).enumerate() {
        writeln!(out, "{m},{f:?},{e:?}").unwrap();
    }
    out
}

fn comparison_csv(table: &ComparisonTable) -> String {
    let mut out = String::from(
        "probe_id,mean_photons,events,n,measured,reconstructed,linear,abs_diff_reconstructed,abs_diff_linear,fluctuation_bound\n",
    );
    for p in &table.probes {
        for n in 0..table.n_outcomes {
            writeln!(
                out,
                "{},{:?},{},{n},{:?},{:?},{:?},{:?},{:?},{:?}",
                p.probe_id,
                p.mean_photons,
                p.events,
                p.measured[n],
                p.reconstructed[n],
                p.linear[n],
                p.abs_diff_reconstructed[n],
                p.abs_diff_linear[n],
                p.fluctuation_bound[n]
            )
            .unwrap();
        }
    }
    out
}

fn sweep_csv(sweep: &SweepResult) -> String {
    let mut out = String::from("energy_scale,attenuation_db,factor,m,fidelity\n");
    for p in &sweep.points {
        for (m, f) in p.fidelities.iter().enumerate() {
            writeln!(out, "{:?},{:?},{:?},{m},{f:?}", p.energy_scale, p.attenuation_db, p.factor).unwrap();
        }
    }
    out
}

/// All five stages from one configuration, each in its own subdirectory.
pub fn run(cfg: &PipelineConfig, out: &Path, skip_failed: bool, dark_counts: bool) -> CliResult<bool> {
    let dir = |name: &str| -> PathBuf { out.join(name) };
    simulate(cfg, &dir("traces"))?;
    calibrate(&dir("traces"), &dir("calibration"), cfg, skip_failed, false)?;
    let counts = dir("calibration").join(COUNTS);
    let ensemble = dir("traces").join(ENSEMBLE);
    reconstruct(&counts, &ensemble, &dir("reconstruction"), cfg, false)?;
    estimate(&counts, &ensemble, &dir("estimate"), cfg, dark_counts, false)?;
    validate(
        &dir("reconstruction").join(POVM),
        &counts,
        &ensemble,
        &dir("estimate").join(ESTIMATE),
        &dir("validation"),
        cfg,
        false,
    )
}
