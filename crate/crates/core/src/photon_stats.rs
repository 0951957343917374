//! Closed-form photon statistics.
//!
//! Coherent probes carry Poisson photon-number statistics; a linear detector
//! thins them binomially; a Poissonian background adds independent dark
//! counts. Everything here works in the truncated Fock basis `m = 0..M-1`
//! with `N` outcomes, the last of which may be cumulative ("N-1 or more").

use serde::{Deserialize, Serialize};
use statrs::function::factorial::{ln_binomial, ln_factorial};

use crate::error::{Error, Result};

/// Tolerance for column-stochastic and normalization checks.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Tail mass above which a truncated Poisson column is renormalized.
pub const TAIL_RENORMALIZE_THRESHOLD: f64 = 1e-9;

/// One coherent probe state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub id: u32,
    /// Mean photon number per pulse, `|alpha|^2`.
    pub mean_photons: f64,
    /// Total attenuation applied to the source, metadata only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attenuation_db: Option<f64>,
    pub n_pulses: u64,
}

/// The set of coherent probes used to sample the detector response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProbeList", into = "ProbeList")]
pub struct ProbeEnsemble {
    probes: Vec<Probe>,
}

#[derive(Serialize, Deserialize)]
struct ProbeList {
    probes: Vec<Probe>,
}

impl TryFrom<ProbeList> for ProbeEnsemble {
    type Error = Error;

    fn try_from(list: ProbeList) -> Result<Self> {
        ProbeEnsemble::new(list.probes)
    }
}

impl From<ProbeEnsemble> for ProbeList {
    fn from(e: ProbeEnsemble) -> Self {
        ProbeList { probes: e.probes }
    }
}

impl ProbeEnsemble {
    pub fn new(probes: Vec<Probe>) -> Result<Self> {
        if probes.is_empty() {
            return Err(Error::config("probe ensemble is empty"));
        }
        let mut ids: Vec<u32> = probes.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("probe ids must be unique"));
        }
        for p in &probes {
            if !p.mean_photons.is_finite() || p.mean_photons < 0.0 {
                return Err(Error::config(format!(
                    "probe {}: mean photon number must be finite and >= 0, got {}",
                    p.id, p.mean_photons
                )));
            }
            if p.n_pulses == 0 {
                return Err(Error::config(format!("probe {}: n_pulses must be positive", p.id)));
            }
            if let Some(a) = p.attenuation_db {
                if !a.is_finite() {
                    return Err(Error::config(format!("probe {}: attenuation is not finite", p.id)));
                }
            }
        }
        let mut attenuated: Vec<(f64, f64, u32)> =
            probes.iter().filter_map(|p| p.attenuation_db.map(|a| (a, p.mean_photons, p.id))).collect();
        attenuated.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in attenuated.windows(2) {
            if w[0].0 < w[1].0 && w[1].1 > w[0].1 {
                return Err(Error::config(format!(
                    "probe {} has more attenuation than probe {} but a larger mean photon number",
                    w[1].2, w[0].2
                )));
            }
        }
        Ok(ProbeEnsemble { probes })
    }

    /// Twenty probes geometrically spaced from 6.5 to 130 photons per pulse,
    /// spanning 76.5 dB down to 63.5 dB of attenuation.
    pub fn paper_default(n_pulses: u64) -> Self {
        Self::geometric(20, 6.5, 130.0, n_pulses)
    }

    /// `k` probes with mean photon numbers geometrically spaced on `[lo, hi]`.
    /// Attenuation metadata is referenced to 63.5 dB at `hi`.
    pub fn geometric(k: usize, lo: f64, hi: f64, n_pulses: u64) -> Self {
        assert!(k >= 1 && lo > 0.0 && hi >= lo);
        let probes = (0..k)
            .map(|j| {
                let t = if k == 1 { 1.0 } else { j as f64 / (k - 1) as f64 };
                let mu = lo * (hi / lo).powf(t);
                Probe {
                    id: j as u32 + 1,
                    mean_photons: mu,
                    attenuation_db: Some(63.5 + 10.0 * (hi / mu).log10()),
                    n_pulses,
                }
            })
            .collect();
        ProbeEnsemble { probes }
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn mean_photons(&self) -> Vec<f64> {
        self.probes.iter().map(|p| p.mean_photons).collect()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.probes.iter().map(|p| p.id).collect()
    }

    /// Copy of the ensemble with every mean photon number multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !factor.is_finite() || factor < 0.0 {
            return Err(Error::domain(format!("scale factor must be >= 0, got {factor}")));
        }
        let probes = self.probes.iter().map(|p| Probe { mean_photons: p.mean_photons * factor, ..p.clone() }).collect();
        Ok(ProbeEnsemble { probes })
    }
}

/// Detection probabilities `Pi[n][m]`: outcome `n` given `m` incident photons.
#[derive(Debug, Clone, PartialEq)]
pub struct PovmMatrix {
    n_outcomes: usize,
    truncation: usize,
    entries: Vec<f64>,
    last_outcome_cumulative: bool,
}

impl PovmMatrix {
    /// Builds a POVM from row-major entries, checking nonnegativity and
    /// per-column normalization.
    pub fn new(n_outcomes: usize, truncation: usize, entries: Vec<f64>, last_outcome_cumulative: bool) -> Result<Self> {
        if n_outcomes == 0 || truncation == 0 {
            return Err(Error::shape("POVM needs at least one outcome and one photon number"));
        }
        if entries.len() != n_outcomes * truncation {
            return Err(Error::shape(format!(
                "expected {}x{} = {} entries, got {}",
                n_outcomes,
                truncation,
                n_outcomes * truncation,
                entries.len()
            )));
        }
        if let Some(i) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("POVM entry {i}")));
        }
        if let Some(i) = entries.iter().position(|&v| v < 0.0) {
            return Err(Error::domain(format!(
                "POVM entry ({}, {}) is negative: {}",
                i / truncation,
                i % truncation,
                entries[i]
            )));
        }
        let povm = PovmMatrix { n_outcomes, truncation, entries, last_outcome_cumulative };
        for m in 0..truncation {
            let s = povm.column_sum(m);
            if (s - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::domain(format!("POVM column {m} sums to {s}, not 1")));
            }
        }
        Ok(povm)
    }

    pub(crate) fn from_parts_unchecked(
        n_outcomes: usize,
        truncation: usize,
        entries: Vec<f64>,
        last_outcome_cumulative: bool,
    ) -> Self {
        debug_assert_eq!(entries.len(), n_outcomes * truncation);
        PovmMatrix { n_outcomes, truncation, entries, last_outcome_cumulative }
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn last_outcome_cumulative(&self) -> bool {
        self.last_outcome_cumulative
    }

    #[inline]
    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.entries[n * self.truncation + m]
    }

    /// Row-major `N x M` entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.entries[n * self.truncation..(n + 1) * self.truncation]
    }

    pub fn column(&self, m: usize) -> Vec<f64> {
        (0..self.n_outcomes).map(|n| self.get(n, m)).collect()
    }

    pub fn column_sum(&self, m: usize) -> f64 {
        (0..self.n_outcomes).map(|n| self.get(n, m)).sum()
    }

    pub(crate) fn same_shape(&self, other: &PovmMatrix) -> Result<()> {
        if self.n_outcomes != other.n_outcomes || self.truncation != other.truncation {
            return Err(Error::shape(format!(
                "POVM shapes differ: {}x{} vs {}x{}",
                self.n_outcomes, self.truncation, other.n_outcomes, other.truncation
            )));
        }
        Ok(())
    }
}

/// Linear detector: binomial loss with efficiency `eta`, plus a Poissonian
/// background of `gamma` mean dark counts per pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearDetectorModel {
    eta: f64,
    gamma: f64,
}

impl LinearDetectorModel {
    pub fn new(eta: f64, gamma: f64) -> Result<Self> {
        check_eta(eta)?;
        check_gamma(gamma)?;
        Ok(LinearDetectorModel { eta, gamma })
    }

    pub fn lossy(eta: f64) -> Result<Self> {
        Self::new(eta, 0.0)
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

pub(crate) fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::domain(format!("efficiency must lie in [0, 1], got {eta}")));
    }
    Ok(())
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::domain(format!("dark-count rate must be finite and >= 0, got {gamma}")));
    }
    Ok(())
}

/// A probability distribution over detector outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    probs: Vec<f64>,
}

impl CountDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::shape("empty distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::domain("probabilities must be finite and nonnegative"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::domain(format!("probabilities sum to {s}, not 1")));
        }
        Ok(CountDistribution { probs })
    }

    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        CountDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// Poisson probability `exp(-mu) mu^m / m!`, evaluated in log space.
pub fn poisson_pmf(mu: f64, m: usize) -> Result<f64> {
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::domain(format!("Poisson mean must be finite and >= 0, got {mu}")));
    }
    Ok(poisson_pmf_unchecked(mu, m))
}

#[inline]
pub(crate) fn poisson_pmf_unchecked(mu: f64, m: usize) -> f64 {
    if mu == 0.0 {
        return if m == 0 { 1.0 } else { 0.0 };
    }
    (-mu + m as f64 * mu.ln() - ln_factorial(m as u64)).exp()
}

/// `P(X >= k)` for `X ~ Poisson(mu)`.
pub fn poisson_upper_tail(mu: f64, k: usize) -> Result<f64> {
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::domain(format!("Poisson mean must be finite and >= 0, got {mu}")));
    }
    Ok(poisson_upper_tail_unchecked(mu, k))
}

pub(crate) fn poisson_upper_tail_unchecked(mu: f64, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if mu == 0.0 {
        return 0.0;
    }
    if (k as f64) <= mu {
        // Tail is at least ~1/2 here, no cancellation to worry about.
        let head: f64 = (0..k).map(|n| poisson_pmf_unchecked(mu, n)).sum();
        return (1.0 - head).max(0.0);
    }
    let mut term = poisson_pmf_unchecked(mu, k);
    let mut sum = term;
    let mut n = k;
    while term > sum * 1e-18 && term > 0.0 {
        n += 1;
        term *= mu / n as f64;
        sum += term;
    }
    sum.min(1.0)
}

/// Binomial probability of `n` successes in `m` trials with success rate `eta`.
pub fn binomial_pmf(m: usize, n: usize, eta: f64) -> f64 {
    if n > m {
        return 0.0;
    }
    if eta == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    if eta == 1.0 {
        return if n == m { 1.0 } else { 0.0 };
    }
    let ln = ln_binomial(m as u64, n as u64) + n as f64 * eta.ln() + (m - n) as f64 * (-eta).ln_1p();
    ln.exp()
}

/// How a probe matrix treats the Poisson mass beyond the truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailPolicy {
    /// Drop it; columns sum to less than one.
    Truncate,
    /// Rescale each column to unit mass when the tail exceeds
    /// [`TAIL_RENORMALIZE_THRESHOLD`].
    Renormalize,
    /// Fold it into the last retained photon number, which then stands for
    /// "M-1 or more photons".
    #[default]
    Absorb,
}

/// Coherent-probe photon statistics `q[m][j]` truncated at `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeMatrix {
    truncation: usize,
    n_probes: usize,
    entries: Vec<f64>,
    tail_mass: Vec<f64>,
}

impl ProbeMatrix {
    /// Builds the plainly truncated matrix from explicit mean photon numbers,
    /// in the given order.
    pub fn from_means(means: &[f64], truncation: usize) -> Result<Self> {
        Self::with_policy(means, truncation, TailPolicy::Truncate)
    }

    /// Builds the matrix, treating the Poisson mass at `m >= M` per `policy`.
    pub fn with_policy(means: &[f64], truncation: usize, policy: TailPolicy) -> Result<Self> {
        if truncation == 0 {
            return Err(Error::domain("truncation must be at least 1"));
        }
        let k = means.len();
        let mut entries = vec![0.0; truncation * k];
        let mut tail_mass = Vec::with_capacity(k);
        for (j, &mu) in means.iter().enumerate() {
            let mut kept = 0.0;
            for m in 0..truncation {
                let q = poisson_pmf(mu, m)?;
                entries[m * k + j] = q;
                kept += q;
            }
            let tail = poisson_upper_tail_unchecked(mu, truncation);
            match policy {
                TailPolicy::Truncate => {}
                TailPolicy::Renormalize => {
                    if tail > TAIL_RENORMALIZE_THRESHOLD && kept > 0.0 {
                        for m in 0..truncation {
                            entries[m * k + j] /= kept;
                        }
                    }
                }
                TailPolicy::Absorb => {
                    entries[(truncation - 1) * k + j] = poisson_upper_tail_unchecked(mu, truncation - 1);
                }
            }
            tail_mass.push(tail);
        }
        Ok(ProbeMatrix { truncation, n_probes: k, entries, tail_mass })
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn n_probes(&self) -> usize {
        self.n_probes
    }

    #[inline]
    pub fn get(&self, m: usize, j: usize) -> f64 {
        self.entries[m * self.n_probes + j]
    }

    /// Row-major `M x K` entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.truncation).map(|m| self.get(m, j)).collect()
    }

    /// Poisson mass at or beyond `M` for each probe.
    pub fn tail_mass(&self) -> &[f64] {
        &self.tail_mass
    }

    /// Indices of probes whose truncated column loses more than `threshold`.
    pub fn truncated_probes(&self, threshold: f64) -> Vec<usize> {
        (0..self.n_probes).filter(|&j| self.tail_mass[j] > threshold).collect()
    }
}

pub fn probe_q_matrix(ensemble: &ProbeEnsemble, truncation: usize) -> Result<ProbeMatrix> {
    ProbeMatrix::from_means(&ensemble.mean_photons(), truncation)
}

/// Writes `1 - sum(rows 0..N-2)` into the last row of each column.
fn cumulate_last_row(entries: &mut [f64], n_outcomes: usize, truncation: usize) {
    let last = n_outcomes - 1;
    for m in 0..truncation {
        let head: f64 = (0..last).map(|n| entries[n * truncation + m]).sum();
        entries[last * truncation + m] = (1.0 - head).clamp(0.0, 1.0);
    }
}

/// POVM of a lossy linear detector without background.
pub fn binomial_povm(eta: f64, n_outcomes: usize, truncation: usize) -> Result<PovmMatrix> {
    check_eta(eta)?;
    check_dims(n_outcomes, truncation)?;
    let mut entries = vec![0.0; n_outcomes * truncation];
    for n in 0..n_outcomes - 1 {
        for m in 0..truncation {
            entries[n * truncation + m] = binomial_pmf(m, n, eta);
        }
    }
    cumulate_last_row(&mut entries, n_outcomes, truncation);
    Ok(PovmMatrix::from_parts_unchecked(n_outcomes, truncation, entries, true))
}

/// POVM of a linear detector with a Poissonian dark-count background:
/// `Pi[n][m] = exp(-gamma) sum_j gamma^j / j! B[n-j][m]`.
pub fn dark_count_povm(model: &LinearDetectorModel, n_outcomes: usize, truncation: usize) -> Result<PovmMatrix> {
    check_dims(n_outcomes, truncation)?;
    let eta = model.eta();
    let gamma = model.gamma();
    let weights: Vec<f64> = (0..n_outcomes).map(|j| poisson_pmf_unchecked(gamma, j)).collect();
    let mut entries = vec![0.0; n_outcomes * truncation];
    for n in 0..n_outcomes - 1 {
        for m in 0..truncation {
            let mut acc = 0.0;
            for (j, w) in weights.iter().enumerate().take(n + 1) {
                acc += w * binomial_pmf(m, n - j, eta);
            }
            entries[n * truncation + m] = acc;
        }
    }
    cumulate_last_row(&mut entries, n_outcomes, truncation);
    Ok(PovmMatrix::from_parts_unchecked(n_outcomes, truncation, entries, true))
}

fn check_dims(n_outcomes: usize, truncation: usize) -> Result<()> {
    if n_outcomes == 0 || truncation == 0 {
        return Err(Error::domain("need at least one outcome and one photon number"));
    }
    Ok(())
}

/// Predicted outcome distribution together with the Poisson mass lost to truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub distribution: CountDistribution,
    pub tail_mass: f64,
    pub renormalized: bool,
}

/// `r_n = sum_m Pi[n][m] q_m(mu)`. When the probe's Poisson mass beyond the
/// truncation exceeds [`TAIL_RENORMALIZE_THRESHOLD`], the result is divided
/// by the retained mass.
pub fn predict_distribution(povm: &PovmMatrix, mu: f64) -> Result<Prediction> {
    let q: Vec<f64> = (0..povm.truncation()).map(|m| poisson_pmf(mu, m)).collect::<Result<_>>()?;
    let kept: f64 = q.iter().sum();
    let tail_mass = poisson_upper_tail_unchecked(mu, povm.truncation());
    let mut r: Vec<f64> =
        (0..povm.n_outcomes()).map(|n| povm.row(n).iter().zip(&q).map(|(p, q)| p * q).sum()).collect();
    let renormalized = tail_mass > TAIL_RENORMALIZE_THRESHOLD;
    if renormalized && kept > 0.0 {
        r.iter_mut().for_each(|v| *v /= kept);
    }
    Ok(Prediction { distribution: CountDistribution::from_vec_unchecked(r), tail_mass, renormalized })
}

/// Outcome distribution of an ideal linear detector, `Poisson(eta mu)`,
/// with the last outcome cumulative.
pub fn linear_prediction(eta: f64, mu: f64, n_outcomes: usize) -> Result<CountDistribution> {
    check_eta(eta)?;
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::domain(format!("mean photon number must be >= 0, got {mu}")));
    }
    Ok(CountDistribution::from_vec_unchecked(poisson_cumulative(eta * mu, n_outcomes)))
}

/// `Poisson(lambda)` over `0..n-1` with the final entry holding `P(X >= n-1)`.
pub(crate) fn poisson_cumulative(lambda: f64, n_outcomes: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n_outcomes - 1).map(|n| poisson_pmf_unchecked(lambda, n)).collect();
    out.push(poisson_upper_tail_unchecked(lambda, n_outcomes - 1));
    out
}

/// Bhattacharyya coefficient `sum sqrt(p q)` of two nonnegative vectors, capped at 1.
pub fn bhattacharyya(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("lengths differ: {} vs {}", p.len(), q.len())));
    }
    let f: f64 = p.iter().zip(q).map(|(a, b)| (a.max(0.0) * b.max(0.0)).sqrt()).sum();
    Ok(f.min(1.0))
}

/// Fidelity `F_m = sum_n sqrt(a[n][m] b[n][m])` between matching columns.
pub fn column_fidelity(a: &PovmMatrix, b: &PovmMatrix, m: usize) -> Result<f64> {
    a.same_shape(b)?;
    if m >= a.truncation() {
        return Err(Error::shape(format!("column {m} out of range (M = {})", a.truncation())));
    }
    bhattacharyya(&a.column(m), &b.column(m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionDistance {
    pub abs_diff: Vec<f64>,
    pub max: f64,
    pub total_variation: f64,
}

pub fn distribution_distance(p: &CountDistribution, q: &CountDistribution) -> Result<DistributionDistance> {
    distance_slices(p.probs(), q.probs())
}

pub(crate) fn distance_slices(p: &[f64], q: &[f64]) -> Result<DistributionDistance> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("lengths differ: {} vs {}", p.len(), q.len())));
    }
    let abs_diff: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).abs()).collect();
    let max = abs_diff.iter().cloned().fold(0.0, f64::max);
    let total_variation = 0.5 * abs_diff.iter().sum::<f64>();
    Ok(DistributionDistance { abs_diff, max, total_variation })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    /// Exact enumeration of which of `m` photons survive loss.
    fn enumerate_loss_patterns(m: usize, eta: f64) -> Vec<f64> {
        let mut out = vec![0.0; m + 1];
        for mask in 0u32..(1u32 << m) {
            let k = mask.count_ones() as usize;
            out[k] += eta.powi(k as i32) * (1.0 - eta).powi((m - k) as i32);
        }
        out
    }

    #[test]
    fn poisson_zero_mean() {
        assert_eq!(poisson_pmf(0.0, 0).unwrap(), 1.0);
        assert_eq!(poisson_pmf(0.0, 1).unwrap(), 0.0);
    }

    #[test]
    fn poisson_unit_mean() {
        // exp(-1) to 19 digits
        assert_close(poisson_pmf(1.0, 1).unwrap(), 0.367_879_441_171_442_32, 1e-15);
    }

    #[test]
    fn poisson_normalization_at_high_mean() {
        let s: f64 = (0..=400).map(|m| poisson_pmf(130.0, m).unwrap()).sum();
        assert_close(s, 1.0, 1e-12);
        assert!(poisson_pmf(130.0, 500).unwrap().is_finite());
    }

    #[test]
    fn poisson_rejects_negative_mean() {
        assert!(matches!(poisson_pmf(-0.1, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn upper_tail_matches_summation() {
        for &mu in &[0.3, 1.581, 6.6, 40.0] {
            for k in [0usize, 1, 5, 11, 30] {
                let direct: f64 = (k..600).map(|n| poisson_pmf(mu, n).unwrap()).sum();
                assert_close(poisson_upper_tail(mu, k).unwrap(), direct, 1e-13);
            }
        }
    }

    #[test]
    fn q_matrix_zero_probe_and_tails() {
        let q = ProbeMatrix::from_means(&[0.0], 5).unwrap();
        assert_eq!(q.column(0), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(q.tail_mass()[0], 0.0);

        let low = ProbeMatrix::from_means(&[6.5], 140).unwrap();
        assert!(low.tail_mass()[0] < 1e-12);

        let high = ProbeMatrix::from_means(&[130.0], 140).unwrap();
        let direct: f64 = (140..800).map(|m| poisson_pmf(130.0, m).unwrap()).sum();
        assert!(high.tail_mass()[0] > 0.0);
        assert_close(high.tail_mass()[0], direct, 1e-12);
        assert_eq!(high.truncated_probes(1e-9), vec![0]);
    }

    #[test]
    fn binomial_identity_and_blind() {
        let id = binomial_povm(1.0, 6, 10).unwrap();
        for m in 0..10 {
            for n in 0..5 {
                assert_eq!(id.get(n, m), if n == m { 1.0 } else { 0.0 });
            }
            assert_eq!(id.get(5, m), if m >= 5 { 1.0 } else { 0.0 });
        }
        let blind = binomial_povm(0.0, 4, 10).unwrap();
        for m in 0..10 {
            assert_eq!(blind.get(0, m), 1.0);
        }
    }

    #[test]
    fn binomial_half_two_photons() {
        let b = binomial_povm(0.5, 4, 5).unwrap();
        assert_close(b.get(1, 2), 0.5, 1e-15);
    }

    #[test]
    fn binomial_matches_loss_enumeration() {
        for &eta in &[0.0, 0.051, 0.3, 0.5, 0.9, 1.0] {
            let n_out = 6;
            let b = binomial_povm(eta, n_out, 13).unwrap();
            for m in 0..=12 {
                let exact = enumerate_loss_patterns(m, eta);
                for n in 0..n_out - 1 {
                    let e = exact.get(n).copied().unwrap_or(0.0);
                    assert_close(b.get(n, m), e, 1e-13);
                }
                let tail: f64 = exact.iter().skip(n_out - 1).sum();
                assert_close(b.get(n_out - 1, m), tail, 1e-13);
            }
        }
    }

    #[test]
    fn binomial_rejects_bad_eta() {
        assert!(binomial_povm(1.2, 3, 3).is_err());
        assert!(binomial_povm(-0.01, 3, 3).is_err());
    }

    #[test]
    fn dark_counts_without_background_equal_binomial() {
        let model = LinearDetectorModel::new(0.051, 0.0).unwrap();
        let d = dark_count_povm(&model, 12, 140).unwrap();
        let b = binomial_povm(0.051, 12, 140).unwrap();
        for (x, y) in d.entries().iter().zip(b.entries()) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn dark_counts_on_blind_detector_are_poisson() {
        let model = LinearDetectorModel::new(0.0, 0.1).unwrap();
        let d = dark_count_povm(&model, 5, 20).unwrap();
        for m in 0..20 {
            for n in 0..4 {
                assert_close(d.get(n, m), poisson_pmf(0.1, n).unwrap(), 1e-15);
            }
        }
    }

    #[test]
    fn dark_count_hand_convolution() {
        let model = LinearDetectorModel::new(0.5, 0.1).unwrap();
        let d = dark_count_povm(&model, 4, 3).unwrap();
        // j=0 term: B_11 = 0.5; j=1 term: 0.1 * B_01 = 0.1 * 0.5
        let expected = (-0.1f64).exp() * (0.5 + 0.1 * 0.5);
        assert_close(d.get(1, 1), expected, 1e-15);
        assert_close(expected, 0.497_660_58, 1e-8);
    }

    #[test]
    fn negative_gamma_rejected() {
        assert!(LinearDetectorModel::new(0.5, -0.03).is_err());
    }

    #[test]
    fn all_povms_column_stochastic() {
        for &(eta, gamma) in &[(0.0, 0.0), (0.051, 0.0), (0.5, 0.2), (1.0, 1.5), (0.9, 3.0)] {
            let model = LinearDetectorModel::new(eta, gamma).unwrap();
            let p = dark_count_povm(&model, 12, 140).unwrap();
            let checked = PovmMatrix::new(12, 140, p.entries().to_vec(), true).unwrap();
            for m in 0..140 {
                assert_close(checked.column_sum(m), 1.0, 1e-12);
            }
        }
    }

    #[test]
    fn predict_identity_detector() {
        let id = binomial_povm(1.0, 8, 60).unwrap();
        let r = predict_distribution(&id, 1.0).unwrap();
        for n in 0..7 {
            assert_close(r.distribution.probs()[n], poisson_pmf(1.0, n).unwrap(), 1e-15);
        }
        assert!(!r.renormalized);
    }

    #[test]
    fn predict_thinned_probe() {
        let b = binomial_povm(0.051, 12, 140).unwrap();
        let r = predict_distribution(&b, 31.0).unwrap();
        let oracle = poisson_cumulative(0.051 * 31.0, 12);
        for (x, y) in r.distribution.probs().iter().zip(&oracle) {
            assert_close(*x, *y, 1e-12);
        }
    }

    #[test]
    fn predict_vacuum_returns_first_column() {
        let model = LinearDetectorModel::new(0.3, 0.4).unwrap();
        let p = dark_count_povm(&model, 6, 30).unwrap();
        let r = predict_distribution(&p, 0.0).unwrap();
        assert_eq!(r.distribution.probs(), p.column(0).as_slice());
    }

    #[test]
    fn predict_renormalizes_truncated_probe() {
        let b = binomial_povm(0.051, 12, 140).unwrap();
        let r = predict_distribution(&b, 130.0).unwrap();
        assert!(r.renormalized);
        assert!(r.tail_mass > 1e-9);
        assert_close(r.distribution.probs().iter().sum(), 1.0, 1e-12);
    }

    #[test]
    fn linear_prediction_cases() {
        let blind = linear_prediction(0.0, 50.0, 5).unwrap();
        assert_eq!(blind.probs(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        let l = linear_prediction(0.051, 87.0, 12).unwrap();
        for n in 0..11 {
            assert_close(l.probs()[n], poisson_pmf(4.437, n).unwrap(), 1e-14);
        }
        let unit = linear_prediction(1.0, 1.0, 12).unwrap();
        assert_close(unit.probs()[3], poisson_pmf(1.0, 3).unwrap(), 1e-16);
        assert_close(unit.probs().iter().sum(), 1.0, 1e-14);
    }

    fn two_column(a: [f64; 2]) -> PovmMatrix {
        PovmMatrix::new(2, 1, a.to_vec(), true).unwrap()
    }

    #[test]
    fn fidelity_cases() {
        let a = two_column([0.5, 0.5]);
        let b = two_column([1.0, 0.0]);
        let c = two_column([0.0, 1.0]);
        assert_close(column_fidelity(&a, &a, 0).unwrap(), 1.0, 1e-15);
        assert_eq!(column_fidelity(&b, &c, 0).unwrap(), 0.0);
        assert_close(column_fidelity(&a, &b, 0).unwrap(), 0.5f64.sqrt(), 1e-15);
        let other = binomial_povm(0.5, 3, 2).unwrap();
        assert!(matches!(column_fidelity(&a, &other, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn distance_cases() {
        let d = |p: Vec<f64>, q: Vec<f64>| {
            distribution_distance(&CountDistribution::new(p).unwrap(), &CountDistribution::new(q).unwrap()).unwrap()
        };
        let same = d(vec![0.2, 0.8], vec![0.2, 0.8]);
        assert_eq!(same.abs_diff, vec![0.0, 0.0]);
        let opposite = d(vec![1.0, 0.0], vec![0.0, 1.0]);
        assert_eq!(opposite.abs_diff, vec![1.0, 1.0]);
        assert_eq!(opposite.total_variation, 1.0);
        let near = d(vec![0.6, 0.4], vec![0.5, 0.5]);
        assert_close(near.abs_diff[0], 0.1, 1e-15);
        assert_close(near.total_variation, 0.1, 1e-15);
        assert_close(near.max, 0.1, 1e-15);
        let short = CountDistribution::new(vec![1.0]).unwrap();
        assert!(distribution_distance(&short, &CountDistribution::new(vec![0.5, 0.5]).unwrap()).is_err());
    }

    #[test]
    fn ensemble_validation() {
        let e = ProbeEnsemble::paper_default(1000);
        assert_eq!(e.len(), 20);
        let mu = e.mean_photons();
        assert_close(mu[0], 6.5, 1e-12);
        assert_close(mu[19], 130.0, 1e-9);
        let att: Vec<f64> = e.probes().iter().map(|p| p.attenuation_db.unwrap()).collect();
        assert_close(att[19], 63.5, 1e-9);
        assert!((att[0] - 76.5).abs() < 0.02);

        let dup = vec![
            Probe { id: 1, mean_photons: 1.0, attenuation_db: None, n_pulses: 1 },
            Probe { id: 1, mean_photons: 2.0, attenuation_db: None, n_pulses: 1 },
        ];
        assert!(ProbeEnsemble::new(dup).is_err());
        assert!(ProbeEnsemble::new(vec![]).is_err());
        let non_monotone = vec![
            Probe { id: 1, mean_photons: 1.0, attenuation_db: Some(70.0), n_pulses: 1 },
            Probe { id: 2, mean_photons: 2.0, attenuation_db: Some(75.0), n_pulses: 1 },
        ];
        assert!(ProbeEnsemble::new(non_monotone).is_err());
    }
}
