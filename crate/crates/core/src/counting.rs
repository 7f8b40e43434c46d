//! Monte-Carlo model of the gated coincidence measurement and the analysis
//! of the resulting delay histogram.
//!
//! Every gate draws its detection events from independent Poisson streams:
//! pairs detected on both arms, on one arm only, unpolarized noise photons
//! and dark counts. Only gates containing at least one event are visited;
//! the gap to the next such gate is geometric. Each detector keeps its first
//! click inside the gate, and gates with a click on both arms add one
//! `t₁ − t₂` entry to the histogram.
//!
//! Gates are split into fixed-size chunks, each with its own ChaCha stream,
//! so the histogram depends only on the seed and never on the worker count.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CountingError {
    #[error("invalid experiment configuration: {0}")]
    Invalid(String),
    #[error("histogram: {0}")]
    Histogram(String),
    #[error("negative SNR {0}")]
    NegativeSnr(f64),
}

pub const DEFAULT_CHUNK_GATES: u64 = 1 << 20;

fn default_chunk() -> u64 {
    DEFAULT_CHUNK_GATES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pulse_duration_s: f64,
    pub repetition_rate_hz: f64,
    pub acquisition_time_s: f64,
    /// Mean number of pairs emitted per pulse.
    pub pairs_per_pulse: f64,
    /// Noise photons reaching each detector per pulse.
    pub noise_photons_per_pulse: [f64; 2],
    /// Optical transmission from the chip to each detector.
    pub transmission: [f64; 2],
    pub detector_efficiency: f64,
    pub gate_duration_s: f64,
    /// Opening of the gate after the start of the pulse.
    #[serde(default)]
    pub gate_delay_s: f64,
    pub dark_count_probability: f64,
    pub bin_width_s: f64,
    /// RMS Gaussian timing jitter per detection.
    #[serde(default)]
    pub jitter_s: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_chunk")]
    pub chunk_gates: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CountingError> {
        let err = |m: String| Err(CountingError::Invalid(m));
        for (name, v) in [
            ("pulse_duration_s", self.pulse_duration_s),
            ("repetition_rate_hz", self.repetition_rate_hz),
            ("gate_duration_s", self.gate_duration_s),
            ("bin_width_s", self.bin_width_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("acquisition_time_s", self.acquisition_time_s),
            ("pairs_per_pulse", self.pairs_per_pulse),
            ("gate_delay_s", self.gate_delay_s),
            ("jitter_s", self.jitter_s),
            ("noise_photons_per_pulse[0]", self.noise_photons_per_pulse[0]),
            ("noise_photons_per_pulse[1]", self.noise_photons_per_pulse[1]),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("transmission[0]", self.transmission[0]),
            ("transmission[1]", self.transmission[1]),
            ("detector_efficiency", self.detector_efficiency),
            ("dark_count_probability", self.dark_count_probability),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.dark_count_probability >= 1.0 {
            return err("dark_count_probability must be below 1".into());
        }
        if self.gate_delay_s >= self.pulse_duration_s {
            return err("the gate must open during the pulse".into());
        }
        if self.chunk_gates == 0 {
            return err("chunk_gates must be positive".into());
        }
        Ok(())
    }

    pub fn total_gates(&self) -> u64 {
        (self.acquisition_time_s * self.repetition_rate_hz).round() as u64
    }

    /// Overall detection probability of a photon emitted on each arm.
    pub fn arm_efficiency(&self) -> [f64; 2] {
        [0, 1].map(|i| self.transmission[i] * self.detector_efficiency)
    }

    /// Fraction of the pulse covered by the gate.
    pub fn gate_fraction(&self) -> f64 {
        let end = (self.gate_delay_s + self.gate_duration_s).min(self.pulse_duration_s);
        (end - self.gate_delay_s).max(0.0) / self.pulse_duration_s
    }

    /// Probability of at least one click per gate on each arm (no jitter).
    pub fn click_probability(&self) -> [f64; 2] {
        let eta = self.arm_efficiency();
        let g = self.gate_fraction();
        let dark = -(1.0 - self.dark_count_probability).ln();
        [0, 1].map(|i| {
            let rate = (self.pairs_per_pulse * eta[i] + self.noise_photons_per_pulse[i] * self.detector_efficiency) * g + dark;
            1.0 - (-rate).exp()
        })
    }

    /// Expected accidental counts per bin near zero delay for independent
    /// uniform clicks: `N·p₁·p₂·τ_bin/τ_gate`.
    pub fn accidental_counts_per_bin(&self) -> f64 {
        let p = self.click_probability();
        self.total_gates() as f64 * p[0] * p[1] * self.bin_width_s / self.gate_duration_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceHistogram {
    pub bin_width_s: f64,
    /// Lower edge of the first bin.
    pub first_bin_start_s: f64,
    pub counts: Vec<u64>,
    pub total_gates: u64,
    /// Gates with a click on both arms.
    pub coincidence_gates: u64,
    /// Gates with a click on each arm.
    pub singles: [u64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ExperimentConfig>,
}

impl CoincidenceHistogram {
    pub fn bin_start_s(&self, i: usize) -> f64 {
        self.first_bin_start_s + i as f64 * self.bin_width_s
    }

    pub fn bin_center_s(&self, i: usize) -> f64 {
        self.bin_start_s(i) + 0.5 * self.bin_width_s
    }

    pub fn total_counts(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_start_s,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{:e},{c}", self.bin_start_s(i));
        }
        s
    }

    /// Metadata sidecar: everything except the counts.
    pub fn metadata_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("histogram serializes");
        v.as_object_mut().unwrap().remove("counts");
        v["bins"] = self.counts.len().into();
        serde_json::to_string_pretty(&v).expect("metadata serializes")
    }

    /// Read a `bin_start_s,count` CSV with an optional metadata sidecar.
    pub fn from_csv(text: &str, metadata: Option<&str>) -> Result<Self, CountingError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut starts = Vec::new();
        let mut counts = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| CountingError::Histogram(format!("row {}: {e}", i + 1)))?;
            let field = |k: usize| rec.get(k).ok_or_else(|| CountingError::Histogram(format!("row {} has fewer than two columns", i + 1)));
            starts.push(field(0)?.parse::<f64>().map_err(|e| CountingError::Histogram(format!("row {}: {e}", i + 1)))?);
            let c = field(1)?;
            let c = c
                .parse::<u64>()
                .or_else(|_| c.parse::<f64>().map(|v| v.round().max(0.0) as u64))
                .map_err(|e| CountingError::Histogram(format!("row {}: {e}", i + 1)))?;
            counts.push(c);
        }
        if counts.len() < 2 {
            return Err(CountingError::Histogram("need at least two bins".into()));
        }
        let width = starts[1] - starts[0];
        if !(width > 0.0) || starts.windows(2).any(|w| ((w[1] - w[0]) - width).abs() > 1e-6 * width) {
            return Err(CountingError::Histogram("bins must be uniform and increasing".into()));
        }
        let mut h = CoincidenceHistogram {
            bin_width_s: width,
            first_bin_start_s: starts[0],
            total_gates: 0,
            coincidence_gates: counts.iter().sum(),
            singles: [0, 0],
            counts,
            config: None,
        };
        if let Some(meta) = metadata {
            let v: serde_json::Value = serde_json::from_str(meta).map_err(|e| CountingError::Histogram(format!("metadata: {e}")))?;
            if let Some(g) = v.get("total_gates").and_then(|g| g.as_u64()) {
                h.total_gates = g;
            }
            if let Some(g) = v.get("coincidence_gates").and_then(|g| g.as_u64()) {
                h.coincidence_gates = g;
            }
            if let Some(s) = v.get("singles") {
                h.singles = serde_json::from_value(s.clone()).unwrap_or([0, 0]);
            }
            if let Some(c) = v.get("config") {
                h.config = serde_json::from_value(c.clone()).ok();
            }
        }
        Ok(h)
    }
}

/// Event classes of one gate, in sampling order.
#[derive(Clone, Copy)]
enum Event {
    PairBoth,
    PairFirst,
    PairSecond,
    Noise(usize),
    Dark(usize),
}

struct Sampler {
    rates: [f64; 7],
    total: f64,
    pulse: f64,
    gate: (f64, f64),
    jitter: Option<Normal<f64>>,
    half_bins: i64,
    bin: f64,
}

impl Sampler {
    fn new(cfg: &ExperimentConfig) -> Self {
        let eta = cfg.arm_efficiency();
        let mu = cfg.pairs_per_pulse;
        let dark = -(1.0 - cfg.dark_count_probability).ln();
        let rates = [
            mu * eta[0] * eta[1],
            mu * eta[0] * (1.0 - eta[1]),
            mu * (1.0 - eta[0]) * eta[1],
            cfg.noise_photons_per_pulse[0] * cfg.detector_efficiency,
            cfg.noise_photons_per_pulse[1] * cfg.detector_efficiency,
            dark,
            dark,
        ];
        Self {
            total: rates.iter().sum(),
            rates,
            pulse: cfg.pulse_duration_s,
            gate: (cfg.gate_delay_s, cfg.gate_delay_s + cfg.gate_duration_s),
            jitter: (cfg.jitter_s > 0.0).then(|| Normal::new(0.0, cfg.jitter_s).expect("finite jitter")),
            half_bins: (cfg.gate_duration_s / cfg.bin_width_s).ceil() as i64,
            bin: cfg.bin_width_s,
        }
    }

    fn event(&self, rng: &mut ChaCha8Rng) -> Event {
        let mut u = rng.random::<f64>() * self.total;
        for (k, r) in self.rates.iter().enumerate() {
            if u < *r || k == self.rates.len() - 1 {
                return match k {
                    0 => Event::PairBoth,
                    1 => Event::PairFirst,
                    2 => Event::PairSecond,
                    3 => Event::Noise(0),
                    4 => Event::Noise(1),
                    5 => Event::Dark(0),
                    _ => Event::Dark(1),
                };
            }
            u -= r;
        }
        unreachable!()
    }

    /// Number of events in a gate known to contain at least one.
    fn nonzero_count(&self, rng: &mut ChaCha8Rng) -> u64 {
        if self.total > 1.0 {
            let p = Poisson::new(self.total).expect("positive rate");
            loop {
                let n = p.sample(rng) as u64;
                if n > 0 {
                    return n;
                }
            }
        }
        // Inversion of the zero-truncated Poisson law.
        let u = rng.random::<f64>();
        let mut k = 1u64;
        let mut term = self.total * (-self.total).exp() / (1.0 - (-self.total).exp());
        let mut cdf = term;
        while u > cdf && k < 1000 {
            k += 1;
            term *= self.total / k as f64;
            cdf += term;
        }
        k
    }

    fn detect(&self, t: f64, rng: &mut ChaCha8Rng) -> Option<f64> {
        let t = match &self.jitter {
            Some(j) => t + j.sample(rng),
            None => t,
        };
        (t >= self.gate.0 && t < self.gate.1).then_some(t)
    }

    /// Simulate one gate; returns the first click on each arm.
    fn gate(&self, rng: &mut ChaCha8Rng) -> [Option<f64>; 2] {
        let mut first = [None::<f64>; 2];
        let mut click = |arm: usize, t: Option<f64>| {
            if let Some(t) = t {
                first[arm] = Some(first[arm].map_or(t, |f: f64| f.min(t)));
            }
        };
        for _ in 0..self.nonzero_count(rng) {
            let event = self.event(rng);
            match event {
                Event::Dark(arm) => {
                    let t = self.gate.0 + rng.random::<f64>() * (self.gate.1 - self.gate.0);
                    click(arm, Some(t));
                }
                _ => {
                    let t = rng.random::<f64>() * self.pulse;
                    match event {
                        Event::PairBoth => {
                            let a = self.detect(t, rng);
                            let b = self.detect(t, rng);
                            click(0, a);
                            click(1, b);
                        }
                        Event::PairFirst => click(0, self.detect(t, rng)),
                        Event::PairSecond => click(1, self.detect(t, rng)),
                        Event::Noise(arm) => click(arm, self.detect(t, rng)),
                        Event::Dark(_) => unreachable!(),
                    }
                }
            }
        }
        first
    }
}

#[derive(Default)]
struct Tally {
    counts: Vec<u64>,
    coincidence_gates: u64,
    singles: [u64; 2],
}

impl Tally {
    fn merge(mut self, other: Tally) -> Tally {
        if self.counts.is_empty() {
            return other;
        }
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self.coincidence_gates += other.coincidence_gates;
        self.singles[0] += other.singles[0];
        self.singles[1] += other.singles[1];
        self
    }
}

fn simulate_chunk(sampler: &Sampler, seed: u64, chunk: u64, gates: u64) -> Tally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    let bins = (2 * sampler.half_bins + 1) as usize;
    let mut tally = Tally {
        counts: vec![0; bins],
        ..Tally::default()
    };
    if sampler.total <= 0.0 {
        return tally;
    }
    let q = -(-sampler.total).exp_m1();
    let skip = Geometric::new(q).expect("probability in (0, 1]");
    let mut gate = 0u64;
    loop {
        gate = gate.saturating_add(skip.sample(&mut rng));
        if gate >= gates {
            break;
        }
        let clicks = sampler.gate(&mut rng);
        for (arm, c) in clicks.iter().enumerate() {
            if c.is_some() {
                tally.singles[arm] += 1;
            }
        }
        if let [Some(a), Some(b)] = clicks {
            let k = ((a - b) / sampler.bin).round() as i64;
            if k.abs() <= sampler.half_bins {
                tally.counts[(k + sampler.half_bins) as usize] += 1;
                tally.coincidence_gates += 1;
            }
        }
        gate += 1;
    }
    tally
}

/// Simulate the acquisition described by `cfg` with the given seed.
pub fn simulate_coincidences(cfg: &ExperimentConfig, seed: u64) -> Result<CoincidenceHistogram, CountingError> {
    cfg.validate()?;
    let sampler = Sampler::new(cfg);
    let total = cfg.total_gates();
    let chunks = total.div_ceil(cfg.chunk_gates);
    let tally = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let gates = (total - c * cfg.chunk_gates).min(cfg.chunk_gates);
            simulate_chunk(&sampler, seed, c, gates)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Tally::default(), Tally::merge);
    let counts = if tally.counts.is_empty() {
        vec![0; (2 * sampler.half_bins + 1) as usize]
    } else {
        tally.counts
    };
    Ok(CoincidenceHistogram {
        bin_width_s: cfg.bin_width_s,
        first_bin_start_s: -(sampler.half_bins as f64 + 0.5) * cfg.bin_width_s,
        counts,
        total_gates: total,
        coincidence_gates: tally.coincidence_gates,
        singles: tally.singles,
        config: Some(ExperimentConfig {
            seed: Some(seed),
            ..cfg.clone()
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramAnalysis {
    pub peak_delay_s: f64,
    pub fwhm_s: f64,
    pub window_s: (f64, f64),
    pub window_counts: u64,
    /// Fitted accidental counts inside the window.
    pub background_counts: f64,
    pub background_error: f64,
    pub true_coincidences: f64,
    pub snr: f64,
    pub snr_error: f64,
    /// No background in the window; `snr` is then a lower bound.
    pub saturated: bool,
}

/// Peak, half-maximum window, accidental background (linear fit in |Δt|
/// over bins beyond ±3·FWHM of the peak) and SNR of a delay histogram.
pub fn analyze_histogram(h: &CoincidenceHistogram) -> Result<HistogramAnalysis, CountingError> {
    let n = h.counts.len();
    if n < 3 || h.total_counts() == 0 {
        return Err(CountingError::Histogram("histogram is empty".into()));
    }
    let (peak, peak_count) = h
        .counts
        .iter()
        .enumerate()
        .fold((0, 0u64), |acc, (i, &c)| if c > acc.1 { (i, c) } else { acc });
    let mut sorted = h.counts.clone();
    sorted.sort_unstable();
    let floor = sorted[n / 2] as f64;
    let half = floor + (peak_count as f64 - floor) / 2.0;
    let (mut lo, mut hi) = (peak, peak);
    // A peak no higher than the median has no half-maximum contour.
    if peak_count as f64 > floor {
        while lo > 0 && h.counts[lo - 1] as f64 >= half {
            lo -= 1;
        }
        while hi + 1 < n && h.counts[hi + 1] as f64 >= half {
            hi += 1;
        }
    }
    let fwhm_s = (hi - lo + 1) as f64 * h.bin_width_s;
    let peak_delay_s = h.bin_center_s(peak);

    // Weighted straight-line fit of the sidebands against |Δt − peak|.
    let (mut s0, mut s1, mut s2, mut y0, mut y1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut sideband_bins = 0;
    for (i, &c) in h.counts.iter().enumerate() {
        let d = (h.bin_center_s(i) - peak_delay_s).abs();
        if d > 3.0 * fwhm_s {
            let w = 1.0 / (c as f64).max(1.0);
            s0 += w;
            s1 += w * d;
            s2 += w * d * d;
            y0 += w * c as f64;
            y1 += w * d * c as f64;
            sideband_bins += 1;
        }
    }
    if sideband_bins < 2 {
        return Err(CountingError::Histogram("no bins outside ±3·FWHM to estimate the background".into()));
    }
    let det = s0 * s2 - s1 * s1;
    let (a, b, cov) = if det.abs() > 1e-30 * s0 * s2 {
        let a = (s2 * y0 - s1 * y1) / det;
        let b = (s0 * y1 - s1 * y0) / det;
        (a, b, [[s2 / det, -s1 / det], [-s1 / det, s0 / det]])
    } else {
        (y0 / s0, 0.0, [[1.0 / s0, 0.0], [0.0, 0.0]])
    };
    let (mut g0, mut g1, mut background) = (0.0, 0.0, 0.0);
    for i in lo..=hi {
        let d = (h.bin_center_s(i) - peak_delay_s).abs();
        background += (a + b * d).max(0.0);
        g0 += 1.0;
        g1 += d;
    }
    let background_var = g0 * g0 * cov[0][0] + 2.0 * g0 * g1 * cov[0][1] + g1 * g1 * cov[1][1];
    let window_counts: u64 = h.counts[lo..=hi].iter().sum();
    let wc = window_counts as f64;
    let true_coincidences = wc - background;
    let (snr, snr_error, saturated) = if background > 0.0 {
        let snr = true_coincidences / background;
        let var = wc / background.powi(2) + (wc / background.powi(2)).powi(2) * background_var.max(0.0);
        (snr, var.sqrt(), false)
    } else {
        (true_coincidences, wc.sqrt(), true)
    };
    Ok(HistogramAnalysis {
        peak_delay_s,
        fwhm_s,
        window_s: (h.bin_start_s(lo), h.bin_start_s(hi + 1)),
        window_counts,
        background_counts: background,
        background_error: background_var.max(0.0).sqrt(),
        true_coincidences,
        snr,
        snr_error,
        saturated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WernerEstimate {
    pub snr: f64,
    /// Weight of the Bell state, `SNR/(2 + SNR)`.
    pub p: f64,
    /// Fidelity to |ψ+⟩, `(1 + 3P)/4`.
    pub fidelity: f64,
}

pub fn werner_fidelity(snr: f64) -> Result<WernerEstimate, CountingError> {
    if !(snr >= 0.0) {
        return Err(CountingError::NegativeSnr(snr));
    }
    let p = if snr.is_infinite() { 1.0 } else { snr / (2.0 + snr) };
    Ok(WernerEstimate {
        snr,
        p,
        fidelity: (1.0 + 3.0 * p) / 4.0,
    })
}
