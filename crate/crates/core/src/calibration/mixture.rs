use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// Minimum number of events a trace must hold to be calibrated.
pub const MIN_EVENTS: usize = 100;
/// Pearson-reweighting passes after the initial count-weighted fit.
const REWEIGHT_PASSES: usize = 2;
const MIN_LN_WEIGHT: f64 = -4.605_170_185_988_091;

/// One Gaussian peak of the pulse-height spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    /// Area in events.
    pub weight: f64,
    pub mean_mv: f64,
    pub sigma_mv: f64,
}

impl GaussianComponent {
    /// Density in events per mV.
    pub fn density(&self, x: f64) -> f64 {
        let z = (x - self.mean_mv) / self.sigma_mv;
        self.weight * INV_SQRT_2PI * (-0.5 * z * z).exp() / self.sigma_mv
    }

    /// Expected events in `[lo, hi)`.
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        self.weight * normal_interval((lo - self.mean_mv) / self.sigma_mv, (hi - self.mean_mv) / self.sigma_mv)
    }
}

/// Sum-of-Gaussians description of one probe's amplitude histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureFit {
    /// Components in strictly increasing order of mean.
    pub components: Vec<GaussianComponent>,
    /// Pearson chi-square per degree of freedom over the fitted window.
    pub goodness: f64,
    pub bin_width_mv: f64,
    /// Amplitude range `[lo, hi)` the components were fitted on; events above
    /// it belong to peaks beyond the last component.
    pub window_mv: (f64, f64),
    /// Photon-number label of the first component.
    #[serde(default)]
    pub first_outcome: usize,
    /// Levenberg-Marquardt iterations summed over all refits.
    pub iterations: usize,
}

impl GaussianMixtureFit {
    /// Mixture density in events per mV.
    pub fn density(&self, x: f64) -> f64 {
        self.components.iter().map(|c| c.density(x)).sum()
    }

    pub fn means(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.mean_mv).collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }
}

/// Fixed-width histogram of amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Left edge of bin 0, mV.
    pub origin_mv: f64,
    pub bin_width_mv: f64,
    pub counts: Vec<f64>,
}

impl Histogram {
    /// Largest number of bins accepted; guards against stray outliers.
    pub const MAX_BINS: usize = 1 << 21;

    pub fn build(amplitudes: &[f64], bin_width_mv: f64) -> Result<Self> {
        if !(bin_width_mv.is_finite() && bin_width_mv > 0.0) {
            return Err(Error::config(format!("bin width must be positive, got {bin_width_mv}")));
        }
        if amplitudes.is_empty() {
            return Err(Error::Calibration("empty trace".into()));
        }
        let lo = amplitudes.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = amplitudes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // One empty bin of padding on either side.
        let origin = ((lo / bin_width_mv).floor() - 1.0) * bin_width_mv;
        let span = ((hi - origin) / bin_width_mv).floor() + 2.0;
        if span.is_nan() || span > Self::MAX_BINS as f64 {
            return Err(Error::Calibration(format!(
                "amplitude range [{lo}, {hi}] mV needs more than {} bins of {bin_width_mv} mV",
                Self::MAX_BINS
            )));
        }
        let mut counts = vec![0.0; span as usize];
        for &a in amplitudes {
            let i = (((a - origin) / bin_width_mv).floor() as usize).min(counts.len() - 1);
            counts[i] += 1.0;
        }
        Ok(Histogram { origin_mv: origin, bin_width_mv, counts })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.origin_mv + i as f64 * self.bin_width_mv
    }

    pub fn center(&self, i: usize) -> f64 {
        self.origin_mv + (i as f64 + 0.5) * self.bin_width_mv
    }

    /// Bin holding `x`, clamped to the histogram.
    fn index_of(&self, x: f64) -> usize {
        let i = ((x - self.origin_mv) / self.bin_width_mv).floor();
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(self.len() - 1)
        }
    }

    /// Centred moving average over `window` bins (zero outside the range).
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let half = window / 2;
        let n = self.len();
        (0..n)
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half).min(n - 1);
                self.counts[lo..=hi].iter().sum::<f64>() / window.max(1) as f64
            })
            .collect()
    }

    /// Events in bins whose centres lie within `radius` of `x`.
    fn events_near(&self, x: f64, radius: f64) -> f64 {
        let lo = self.index_of(x - radius);
        let hi = self.index_of(x + radius);
        (lo..=hi).filter(|&i| (self.center(i) - x).abs() <= radius).map(|i| self.counts[i]).sum()
    }
}

/// Settings of the peak search and mixture fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakSearch {
    pub bin_width_mv: f64,
    pub max_peaks: usize,
    /// Seeds are smoothed-histogram maxima above this fraction of the tallest bin.
    pub seed_floor: f64,
    /// Components (and ladder candidates) need at least this many events.
    pub min_peak_events: f64,
    pub smoothing_window: usize,
    pub max_iters: usize,
    /// Peak spacing used for ladder completion when the trace itself shows
    /// fewer than two seeds (typically taken from other probes).
    pub spacing_hint: Option<f64>,
}

impl Default for PeakSearch {
    fn default() -> Self {
        PeakSearch {
            bin_width_mv: 1.3,
            max_peaks: 14,
            seed_floor: 0.01,
            min_peak_events: 10.0,
            smoothing_window: 3,
            max_iters: 500,
            spacing_hint: None,
        }
    }
}

/// Fits a sum of Gaussians to the histogram of `amplitudes`.
pub fn fit_peaks(amplitudes: &[f64], bin_width_mv: f64, max_peaks: usize) -> Result<GaussianMixtureFit> {
    fit_peaks_with(amplitudes, &PeakSearch { bin_width_mv, max_peaks, ..PeakSearch::default() })
}

pub fn fit_peaks_with(amplitudes: &[f64], search: &PeakSearch) -> Result<GaussianMixtureFit> {
    if amplitudes.len() < MIN_EVENTS {
        return Err(Error::Calibration(format!("trace has {} events, need at least {MIN_EVENTS}", amplitudes.len())));
    }
    if search.max_peaks == 0 {
        return Err(Error::config("max_peaks must be positive"));
    }
    let hist = Histogram::build(amplitudes, search.bin_width_mv)?;
    let smooth = hist.smoothed(search.smoothing_window);
    let seeds = seed_positions(&hist, &smooth, search.seed_floor);
    if seeds.is_empty() {
        return Err(Error::Calibration("no peaks found in amplitude histogram".into()));
    }
    let mut spacing = median_gap(&seeds).or(search.spacing_hint.filter(|s| s.is_finite() && *s > 0.0));
    let mut previous: Option<Vec<GaussianComponent>> = None;
    let mut iterations = 0;
    loop {
        // Histogram maxima of overlapping peaks are pulled towards each
        // other, so the seed spacing can be biased low; one more ladder pass
        // from the fitted means corrects it.
        let anchors = previous.as_ref().map_or_else(|| seeds.clone(), |c| c.iter().map(|c| c.mean_mv).collect());
        let candidates = match spacing {
            Some(s) => complete_ladder(&hist, &smooth, &anchors, s, search.min_peak_events),
            None => anchors,
        };
        let mut fit = fit_ladder(&hist, &smooth, candidates, previous.as_deref(), spacing, search)?;
        iterations += fit.iterations;
        fit.iterations = iterations;
        let refined = median_gap(&fit.means());
        match (spacing, refined) {
            (Some(s), Some(r)) if previous.is_none() && (r - s).abs() > 0.1 * s => {
                spacing = Some(r);
                previous = Some(fit.components);
            }
            _ => return Ok(fit),
        }
    }
}

/// Fits one component per ladder candidate, then drops duplicates and
/// components below the event floor, refitting until the set is stable.
fn fit_ladder(
    hist: &Histogram,
    smooth: &[f64],
    mut candidates: Vec<f64>,
    previous: Option<&[GaussianComponent]>,
    spacing: Option<f64>,
    search: &PeakSearch,
) -> Result<GaussianMixtureFit> {
    let mut window = (0, hist.len());
    if candidates.len() > search.max_peaks {
        let cut = 0.5 * (candidates[search.max_peaks - 1] + candidates[search.max_peaks]);
        window.1 = hist.index_of(cut).max(1);
        candidates.truncate(search.max_peaks);
    }

    let mut components = initial_components(hist, smooth, &candidates, &seeds_of(&candidates, smooth, hist), spacing);
    if let (Some(prev), Some(s)) = (previous, spacing) {
        for c in components.iter_mut() {
            if let Some(p) = prev.iter().find(|p| (p.mean_mv - c.mean_mv).abs() < 0.25 * s) {
                *c = *p;
            }
        }
    }
    let in_window: f64 = hist.counts[window.0..window.1].iter().sum();
    let bounds = Bounds {
        mean: (hist.edge(window.0), hist.edge(window.1)),
        // A peak wider than about half the spacing would swallow its neighbours.
        sigma: (0.05 * hist.bin_width_mv, spacing.map_or(f64::INFINITY, |s| 0.6 * s)),
        max_ln_weight: (2.0 * in_window).max(1.0).ln(),
    };

    let mut iterations = 0;
    let mut goodness;
    loop {
        let fit = fit_mixture(hist, window, &components, &bounds, search.max_iters)?;
        iterations += fit.iterations;
        goodness = fit.goodness;
        components = fit.components;
        components.sort_by(|a, b| a.mean_mv.total_cmp(&b.mean_mv));
        let duplicate_gap =
            spacing.map_or_else(|| components.iter().map(|c| c.sigma_mv).fold(f64::INFINITY, f64::min), |s| 0.5 * s);
        if drop_duplicate(&mut components, duplicate_gap) {
            continue;
        }
        let before = components.len();
        components.retain(|c| c.weight >= search.min_peak_events);
        if components.is_empty() {
            return Err(Error::Calibration(format!("all fitted peaks fall below {} events", search.min_peak_events)));
        }
        if components.len() == before {
            break;
        }
    }
    if components.windows(2).any(|w| w[0].mean_mv >= w[1].mean_mv) {
        return Err(Error::Calibration("fitted means are not strictly increasing".into()));
    }
    Ok(GaussianMixtureFit {
        components,
        goodness,
        bin_width_mv: hist.bin_width_mv,
        window_mv: (hist.edge(window.0), hist.edge(window.1)),
        first_outcome: 0,
        iterations,
    })
}

/// Local maxima of the smoothed histogram above `floor` times its maximum.
fn seed_positions(hist: &Histogram, smooth: &[f64], floor: f64) -> Vec<f64> {
    let top = smooth.iter().cloned().fold(0.0, f64::max);
    local_maxima(smooth).into_iter().filter(|&i| smooth[i] > floor * top).map(|i| hist.center(i)).collect()
}

/// Indices of strict local maxima, taking the left end of flat tops.
fn local_maxima(v: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        let left = if i == 0 { 0.0 } else { v[i - 1] };
        let right = if j + 1 == v.len() { 0.0 } else { v[j + 1] };
        if v[i] > left && v[i] > right {
            out.push(i);
        }
        i = j + 1;
    }
    out
}

fn median_gap(xs: &[f64]) -> Option<f64> {
    let mut gaps: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    let mid = gaps.len() / 2;
    Some(if gaps.len() % 2 == 1 { gaps[mid] } else { 0.5 * (gaps[mid - 1] + gaps[mid]) })
}

/// Extends the seeds along the equally spaced peak ladder. Candidates in
/// gaps and above the seeds need at least `min_events` events within a
/// quarter spacing (spurious ones are pruned by the fit). Below the lowest
/// seed a candidate must also be a local maximum of the smoothed histogram,
/// since a phantom peak there would shift every photon-number label.
fn complete_ladder(hist: &Histogram, smooth: &[f64], seeds: &[f64], spacing: f64, min_events: f64) -> Vec<f64> {
    let radius = 0.25 * spacing;
    let maxima: Vec<f64> = local_maxima(smooth).into_iter().map(|i| hist.center(i)).collect();
    let populated = |x: f64| hist.events_near(x, radius) >= min_events;
    let accept_below = |x: f64| -> Option<f64> {
        let near = maxima
            .iter()
            .filter(|&&m| (m - x).abs() <= radius)
            .min_by(|a, b| (*a - x).abs().total_cmp(&(*b - x).abs()))?;
        populated(*near).then_some(*near)
    };
    let accept = |x: f64| -> Option<f64> { accept_below(x).or_else(|| populated(x).then_some(x)) };

    let mut out = Vec::with_capacity(seeds.len());
    let mut below = Vec::new();
    let mut x = seeds[0] - spacing;
    while x > hist.origin_mv {
        match accept_below(x) {
            Some(found) => {
                below.push(found);
                x = found - spacing;
            }
            None => break,
        }
    }
    out.extend(below.into_iter().rev());
    for w in seeds.windows(2) {
        out.push(w[0]);
        let steps = ((w[1] - w[0]) / spacing).round() as usize;
        for k in 1..steps {
            if let Some(found) = accept(w[0] + k as f64 * (w[1] - w[0]) / steps as f64) {
                out.push(found);
            }
        }
    }
    out.push(seeds[seeds.len() - 1]);
    let top = hist.edge(hist.len());
    let mut x = seeds[seeds.len() - 1] + spacing;
    while x < top {
        match accept(x) {
            Some(found) => {
                out.push(found);
                x = found + spacing;
            }
            None => break,
        }
    }
    out.dedup_by(|a, b| (*a - *b).abs() < 0.5 * spacing);
    out
}

/// Candidates that are local maxima of the smoothed histogram.
fn seeds_of(candidates: &[f64], smooth: &[f64], hist: &Histogram) -> Vec<bool> {
    let maxima = local_maxima(smooth);
    candidates.iter().map(|&x| maxima.contains(&hist.index_of(x))).collect()
}

/// Starting components. Peaks that show in the histogram get their width
/// from the nearer half-maximum crossing; the others borrow the median of
/// those widths. Areas count the events within two widths.
fn initial_components(
    hist: &Histogram,
    smooth: &[f64],
    candidates: &[f64],
    is_peak: &[bool],
    spacing: Option<f64>,
) -> Vec<GaussianComponent> {
    let cap = spacing.map_or(f64::INFINITY, |s| 0.5 * s);
    let floor = 0.5 * hist.bin_width_mv;
    let widths: Vec<Option<f64>> = candidates
        .iter()
        .zip(is_peak)
        .map(|(&x, &peak)| peak.then(|| half_max_width(hist, smooth, x).clamp(floor, cap.max(floor))))
        .collect();
    let mut known: Vec<f64> = widths.iter().flatten().copied().collect();
    known.sort_by(f64::total_cmp);
    let fallback = known.get(known.len() / 2).copied().unwrap_or(floor.max(cap.min(2.0 * floor)));
    candidates
        .iter()
        .zip(widths)
        .map(|(&x, w)| {
            let sigma = w.unwrap_or(fallback);
            let weight = (hist.events_near(x, (2.0 * sigma).min(cap)) / 0.954_499_736_103_642).max(1.0);
            GaussianComponent { weight, mean_mv: x, sigma_mv: sigma }
        })
        .collect()
}

fn half_max_width(hist: &Histogram, smooth: &[f64], x: f64) -> f64 {
    let i = hist.index_of(x);
    let half = 0.5 * smooth[i];
    let mut left = i;
    while left > 0 && smooth[left - 1] > half && smooth[left - 1] <= smooth[left] {
        left -= 1;
    }
    let mut right = i;
    while right + 1 < smooth.len() && smooth[right + 1] > half && smooth[right + 1] <= smooth[right] {
        right += 1;
    }
    let hwhm = ((i - left).min(right - i) as f64 + 0.5) * hist.bin_width_mv;
    hwhm / 1.177_410_022_515_474_6
}

/// Removes the lighter of the closest pair of components whose means are
/// less than `min_gap` apart (the refit hands its events to the survivor);
/// returns whether anything was removed.
fn drop_duplicate(components: &mut Vec<GaussianComponent>, min_gap: f64) -> bool {
    let pair = components
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].mean_mv - w[0].mean_mv < min_gap)
        .min_by(|(_, a), (_, b)| (a[1].mean_mv - a[0].mean_mv).total_cmp(&(b[1].mean_mv - b[0].mean_mv)))
        .map(|(i, _)| i);
    let Some(i) = pair else { return false };
    let lighter = if components[i].weight < components[i + 1].weight { i } else { i + 1 };
    components.remove(lighter);
    true
}

/// `Phi(b) - Phi(a)` for `a <= b`, evaluated on the side that avoids cancellation.
fn normal_interval(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        0.5 * (erfc(a / std::f64::consts::SQRT_2) - erfc(b / std::f64::consts::SQRT_2))
    } else {
        0.5 * (erfc(-b / std::f64::consts::SQRT_2) - erfc(-a / std::f64::consts::SQRT_2))
    }
}

fn std_normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

struct MixtureFit {
    components: Vec<GaussianComponent>,
    goodness: f64,
    iterations: usize,
}

/// Box on the component parameters; every accepted step is projected into it.
struct Bounds {
    mean: (f64, f64),
    sigma: (f64, f64),
    max_ln_weight: f64,
}

/// Bin-integrated model with parameters `[ln w, mean, ln sigma]` per component.
struct BinModel<'a> {
    hist: &'a Histogram,
    bins: std::ops::Range<usize>,
    bounds: &'a Bounds,
}

impl BinModel<'_> {
    fn unpack(&self, theta: &[f64]) -> Vec<GaussianComponent> {
        theta
            .chunks_exact(3)
            .map(|c| GaussianComponent { weight: c[0].exp(), mean_mv: c[1], sigma_mv: c[2].exp() })
            .collect()
    }

    /// Box of parameter `a`. Below a hundredth of an event a component is
    /// dead weight; that floor stops its log-area from drifting forever.
    fn limits(&self, a: usize) -> (f64, f64) {
        let b = self.bounds;
        match a % 3 {
            0 => (MIN_LN_WEIGHT, b.max_ln_weight.max(MIN_LN_WEIGHT)),
            1 => b.mean,
            _ => (b.sigma.0.ln(), b.sigma.1.ln()),
        }
    }

    fn project(&self, theta: &mut [f64]) {
        for (a, t) in theta.iter_mut().enumerate() {
            let (lo, hi) = self.limits(a);
            *t = t.clamp(lo, hi);
        }
    }

    fn expected(&self, comps: &[GaussianComponent]) -> Vec<f64> {
        self.bins
            .clone()
            .map(|i| {
                let (lo, hi) = (self.hist.edge(i), self.hist.edge(i + 1));
                comps.iter().map(|c| c.mass_between(lo, hi)).sum()
            })
            .collect()
    }

    /// Row-major `bins x params` Jacobian of the expected counts.
    fn jacobian(&self, comps: &[GaussianComponent]) -> DMatrix<f64> {
        let rows = self.bins.len();
        let mut jac = DMatrix::zeros(rows, 3 * comps.len());
        for (r, i) in self.bins.clone().enumerate() {
            let (lo, hi) = (self.hist.edge(i), self.hist.edge(i + 1));
            for (k, c) in comps.iter().enumerate() {
                let (a, b) = ((lo - c.mean_mv) / c.sigma_mv, (hi - c.mean_mv) / c.sigma_mv);
                let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
                jac[(r, 3 * k)] = c.weight * normal_interval(a, b);
                jac[(r, 3 * k + 1)] = c.weight * (pa - pb) / c.sigma_mv;
                jac[(r, 3 * k + 2)] = c.weight * (a * pa - b * pb);
            }
        }
        jac
    }
}

/// Levenberg-Marquardt on the binned counts with Poisson variance weights:
/// first the observed counts, then the model expectation of the previous pass.
fn fit_mixture(
    hist: &Histogram,
    window: (usize, usize),
    start: &[GaussianComponent],
    bounds: &Bounds,
    max_iters: usize,
) -> Result<MixtureFit> {
    let model = BinModel { hist, bins: window.0..window.1, bounds };
    let observed: Vec<f64> = hist.counts[window.0..window.1].to_vec();
    let mut theta: Vec<f64> =
        start.iter().flat_map(|c| [c.weight.max(1e-300).ln(), c.mean_mv, c.sigma_mv.ln()]).collect();
    model.project(&mut theta);

    let mut variance: Vec<f64> = observed.iter().map(|&c| c.max(1.0)).collect();
    let mut iterations = 0;
    for _ in 0..=REWEIGHT_PASSES {
        let (next, used) = levenberg_marquardt(&model, &observed, &variance, theta, max_iters)?;
        theta = next;
        iterations += used;
        let expected = model.expected(&model.unpack(&theta));
        variance = expected.iter().map(|&e| e.max(1.0)).collect();
    }
    let components = model.unpack(&theta);
    let expected = model.expected(&components);
    let chi2: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e).powi(2) / e.max(1.0)).sum();
    let dof = observed.len().saturating_sub(theta.len()).max(1);
    Ok(MixtureFit { components, goodness: chi2 / dof as f64, iterations })
}

fn levenberg_marquardt(
    model: &BinModel,
    observed: &[f64],
    variance: &[f64],
    mut theta: Vec<f64>,
    max_iters: usize,
) -> Result<(Vec<f64>, usize)> {
    let chi2_of = |theta: &[f64]| -> f64 {
        let e = model.expected(&model.unpack(theta));
        observed.iter().zip(&e).zip(variance).map(|((o, e), v)| (o - e).powi(2) / v).sum()
    };
    let p = theta.len();
    let mut chi2 = chi2_of(&theta);
    let mut lambda = 1e-3;
    for iter in 1..=max_iters {
        let comps = model.unpack(&theta);
        let expected = model.expected(&comps);
        let jac = model.jacobian(&comps);
        let mut jtj = DMatrix::<f64>::zeros(p, p);
        let mut jtr = DVector::<f64>::zeros(p);
        for r in 0..observed.len() {
            let w = 1.0 / variance[r];
            let res = observed[r] - expected[r];
            for a in 0..p {
                let ja = jac[(r, a)] * w;
                jtr[a] += ja * res;
                for b in a..p {
                    jtj[(a, b)] += ja * jac[(r, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                jtj[(a, b)] = jtj[(b, a)];
            }
        }
        let diag_floor = 1e-12 * (0..p).map(|a| jtj[(a, a)]).fold(0.0, f64::max).max(1e-300);
        // Parameters resting on a bound with the descent direction pointing
        // out of the box are held fixed for this iteration.
        for a in 0..p {
            let (lo, hi) = model.limits(a);
            if (theta[a] <= lo && jtr[a] < 0.0) || (theta[a] >= hi && jtr[a] > 0.0) {
                for b in 0..p {
                    jtj[(a, b)] = 0.0;
                    jtj[(b, a)] = 0.0;
                }
                jtj[(a, a)] = 1.0;
                jtr[a] = 0.0;
            }
        }

        loop {
            let mut damped = jtj.clone();
            for a in 0..p {
                damped[(a, a)] += lambda * jtj[(a, a)].max(diag_floor);
            }
            let step = damped.cholesky().map(|c| c.solve(&jtr));
            if let Some(step) = step {
                let mut trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, d)| t + d).collect();
                model.project(&mut trial);
                let trial_chi2 = chi2_of(&trial);
                if trial_chi2.is_finite() && trial_chi2 <= chi2 {
                    let gain = chi2 - trial_chi2;
                    let small_step = trial.iter().zip(&theta).all(|(n, t)| (n - t).abs() <= 1e-10 * (1.0 + t.abs()));
                    theta = trial;
                    chi2 = trial_chi2;
                    lambda = (lambda / 10.0).max(1e-12);
                    if gain <= 1e-8 * chi2.max(1e-300) || small_step {
                        return Ok((theta, iter));
                    }
                    break;
                }
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                // No descent direction left: stationary to working precision.
                return Ok((theta, iter));
            }
        }
    }
    Err(Error::Fit { iterations: max_iters, residual: chi2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_sample(n: usize, mean: f64, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean + sigma * z
            })
            .collect()
    }

    #[test]
    fn single_gaussian_mean_unbiased_to_a_tenth_of_its_noise() {
        // A single trial scatters by sigma/sqrt(n); the fit's bias over many
        // replicates must stay below a tenth of that.
        let (n, reps, sigma) = (1000usize, 1600u64, 2.0);
        let mut total = 0.0;
        let mut sq = 0.0;
        for r in 0..reps {
            let xs = gaussian_sample(n, 3.0, sigma, 100 + r);
            let fit = fit_peaks(&xs, 1.3, 14).unwrap();
            assert_eq!(fit.components.len(), 1);
            let err = fit.components[0].mean_mv - 3.0;
            total += err;
            sq += err * err;
        }
        let se = sigma / (n as f64).sqrt();
        let bias = total / reps as f64;
        let rms = (sq / reps as f64).sqrt();
        assert!(bias.abs() < 0.1 * se, "bias {bias} vs {se}");
        assert!(rms < 1.1 * se, "rms {rms} vs {se}");
    }

    #[test]
    fn single_gaussian_recovers_width_and_area() {
        let n = 50_000;
        let fit = fit_peaks(&gaussian_sample(n, 3.0, 2.0, 1), 1.3, 14).unwrap();
        let c = fit.components[0];
        assert!((c.sigma_mv - 2.0).abs() < 0.03, "{c:?}");
        assert!((c.weight - n as f64).abs() < 1.0, "{c:?}");
    }

    #[test]
    fn two_equal_peaks_resolved() {
        let mut xs = gaussian_sample(20_000, 0.0, 2.0, 2);
        xs.extend(gaussian_sample(20_000, 13.0, 2.0, 3));
        let fit = fit_peaks(&xs, 1.3, 14).unwrap();
        assert_eq!(fit.components.len(), 2);
        assert!((fit.components[0].mean_mv - 0.0).abs() < 0.1);
        assert!((fit.components[1].mean_mv - 13.0).abs() < 0.1);
        assert!(fit.goodness < 2.0, "chi2/dof {}", fit.goodness);
    }

    #[test]
    fn weak_end_peaks_found_by_ladder() {
        // 0.5% side peaks sit below the 1% seed floor.
        let mut xs = gaussian_sample(200, 0.0, 2.0, 4);
        xs.extend(gaussian_sample(40_000, 13.0, 2.0, 5));
        xs.extend(gaussian_sample(40_000, 26.0, 2.0, 6));
        xs.extend(gaussian_sample(200, 39.0, 2.0, 7));
        let fit = fit_peaks(&xs, 1.3, 14).unwrap();
        let means = fit.means();
        assert_eq!(means.len(), 4, "{means:?}");
        for (m, t) in means.iter().zip([0.0, 13.0, 26.0, 39.0]) {
            assert!((m - t).abs() < 0.5, "{means:?}");
        }
    }

    #[test]
    fn excess_peaks_are_cut_by_window() {
        let mut xs = Vec::new();
        for k in 0..6 {
            xs.extend(gaussian_sample(10_000, 13.0 * k as f64, 2.0, 10 + k));
        }
        let fit = fit_peaks(&xs, 1.3, 4).unwrap();
        assert_eq!(fit.components.len(), 4);
        assert!((fit.window_mv.1 - 45.5).abs() < 1.3);
        assert!((fit.components[3].weight - 10_000.0).abs() < 300.0);
    }

    #[test]
    fn too_few_events_rejected() {
        let xs = gaussian_sample(99, 0.0, 1.0, 8);
        assert!(matches!(fit_peaks(&xs, 1.3, 14), Err(Error::Calibration(_))));
        let xs = gaussian_sample(500, 0.0, 1.0, 8);
        assert!(fit_peaks(&xs, 0.0, 14).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let xs = gaussian_sample(1000, 0.0, 2.0, 9);
        let hist = Histogram::build(&xs, 0.7).unwrap();
        let bounds = Bounds { mean: (-1e9, 1e9), sigma: (1e-6, 1e9), max_ln_weight: 1e9 };
        let model = BinModel { hist: &hist, bins: 0..hist.len(), bounds: &bounds };
        let theta = vec![6.0f64, 0.3, 0.6, 5.0, 4.0, 0.2];
        let jac = model.jacobian(&model.unpack(&theta));
        for a in 0..theta.len() {
            let h = 1e-6;
            let mut up = theta.clone();
            up[a] += h;
            let mut dn = theta.clone();
            dn[a] -= h;
            let (eu, ed) = (model.expected(&model.unpack(&up)), model.expected(&model.unpack(&dn)));
            for r in 0..hist.len() {
                let fd = (eu[r] - ed[r]) / (2.0 * h);
                assert!((fd - jac[(r, a)]).abs() < 1e-5 * (1.0 + fd.abs()), "param {a} bin {r}");
            }
        }
    }

    #[test]
    fn local_maxima_handles_plateaus_and_edges() {
        assert_eq!(local_maxima(&[3.0, 1.0, 2.0, 2.0, 0.0, 5.0]), vec![0, 2, 5]);
        assert_eq!(local_maxima(&[1.0, 1.0]), vec![0]);
    }
}
