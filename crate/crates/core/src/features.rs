//! Window statistics, training-set standardization and class-conditional
//! empirical densities.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{ChannelId, FaultLabel, Window, NUM_CHANNELS};
use crate::stats::{iqr_sorted, mean, sorted_copy, std_dev};

pub const STATS: [&str; 5] = ["mean", "var", "skew", "kurt", "rms"];
pub const STATS_PER_CHANNEL: usize = STATS.len();
pub const NUM_FEATURES: usize = NUM_CHANNELS * STATS_PER_CHANNEL;

/// Second central moment below which skewness and kurtosis are reported as 0.
const DEGENERATE_M2: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub label: FaultLabel,
    pub load_level: f64,
}

/// `"channel.stat"` names in channel-major order.
pub fn feature_names() -> Vec<String> {
    ChannelId::ALL
        .iter()
        .flat_map(|c| STATS.iter().map(move |s| format!("{}.{}", c.name(), s)))
        .collect()
}

/// Index of channel `c`'s first feature.
pub fn channel_offset(c: usize) -> usize {
    c * STATS_PER_CHANNEL
}

/// Feature indices of each channel, in channel order.
pub fn channel_groups() -> Vec<Vec<usize>> {
    (0..NUM_CHANNELS)
        .map(|c| (channel_offset(c)..channel_offset(c + 1)).collect())
        .collect()
}

/// Mean, unbiased variance, skewness, excess kurtosis and RMS of one channel.
pub fn channel_stats(x: &[f64]) -> [f64; STATS_PER_CHANNEL] {
    let n = x.len() as f64;
    let m = mean(x);
    let (mut m2, mut m3, mut m4, mut sq) = (0.0, 0.0, 0.0, 0.0);
    for &v in x {
        let d = v - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
        sq += v * v;
    }
    let var = m2 / (n - 1.0);
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skew, kurt) = if m2 < DEGENERATE_M2 {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    };
    [m, var, skew, kurt, (sq / n).sqrt()]
}

pub fn extract_features(window: &Window) -> Result<FeatureVector> {
    if window.data.len() != NUM_CHANNELS {
        return Err(Error::dim(format!(
            "window has {} channels, expected {NUM_CHANNELS}",
            window.data.len()
        )));
    }
    let len = window.len();
    if len < 4 {
        return Err(Error::invalid(format!(
            "window length {len} too short, need at least 4 samples"
        )));
    }
    let mut values = Vec::with_capacity(NUM_FEATURES);
    for ch in &window.data {
        if ch.len() != len {
            return Err(Error::dim("ragged window channels"));
        }
        if ch.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("window contains non-finite samples"));
        }
        values.extend(channel_stats(ch));
    }
    Ok(FeatureVector {
        values,
        label: window.label,
        load_level: window.load_level,
    })
}

/// Per-feature training mean and (n - 1) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Zero-variance features; they standardize to 0.
    pub flagged: Vec<bool>,
}

impl GlobalStats {
    pub fn num_features(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize_values(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                if self.flagged[j] {
                    0.0
                } else {
                    (v - self.mean[j]) / self.std[j]
                }
            })
            .collect()
    }

    pub fn destandardize_values(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(j, &v)| {
                if self.flagged[j] {
                    self.mean[j]
                } else {
                    v * self.std[j] + self.mean[j]
                }
            })
            .collect()
    }

    pub fn standardize(&self, rows: &[FeatureVector]) -> Vec<FeatureVector> {
        rows.iter()
            .map(|r| FeatureVector {
                values: self.standardize_values(&r.values),
                label: r.label,
                load_level: r.load_level,
            })
            .collect()
    }
}

pub fn fit_global_stats(train: &[FeatureVector]) -> Result<GlobalStats> {
    if train.len() < 2 {
        return Err(Error::invalid(format!(
            "{} training rows, at least 2 required",
            train.len()
        )));
    }
    let f = train[0].values.len();
    if train.iter().any(|r| r.values.len() != f) {
        return Err(Error::dim("feature rows differ in length"));
    }
    let mut means = Vec::with_capacity(f);
    let mut stds = Vec::with_capacity(f);
    let mut flagged = Vec::with_capacity(f);
    let mut column = vec![0.0; train.len()];
    for j in 0..f {
        for (c, r) in column.iter_mut().zip(train) {
            *c = r.values[j];
        }
        let m = mean(&column);
        let s = std_dev(&column);
        means.push(m);
        stds.push(s);
        flagged.push(!(s > 1e-12 * (1.0 + m.abs())));
    }
    Ok(GlobalStats {
        mean: means,
        std: stds,
        flagged,
    })
}

/// Writes a feature table (header: feature names, `label`, `load`).
pub fn write_feature_csv(rows: &[FeatureVector], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = feature_names();
    header.push("label".into());
    header.push("load".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.values.iter().map(f64::to_string).collect();
        rec.push(r.label.to_string());
        rec.push(r.load_level.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DensityKind {
    #[default]
    Histogram,
    Kde,
}

/// Empirical density of one (class, feature) sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Density {
    Histogram {
        edges: Vec<f64>,
        /// Probability mass per bin; sums to 1.
        masses: Vec<f64>,
    },
    Kde {
        samples: Vec<f64>,
        bandwidth: f64,
        support: [f64; 2],
    },
}

const KDE_SUPPORT_BANDWIDTHS: f64 = 8.0;
const KDE_MIN_BANDWIDTH: f64 = 1e-6;

impl Density {
    pub fn support(&self) -> (f64, f64) {
        match self {
            Density::Histogram { edges, .. } => (edges[0], edges[edges.len() - 1]),
            Density::Kde { support, .. } => (support[0], support[1]),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            Density::Histogram { edges, masses } => {
                let last = edges.len() - 1;
                if x < edges[0] || x > edges[last] {
                    return 0.0;
                }
                let bin = edges.partition_point(|&e| e <= x).saturating_sub(1).min(last - 1);
                masses[bin] / (edges[bin + 1] - edges[bin])
            }
            Density::Kde {
                samples, bandwidth, ..
            } => {
                let h = *bandwidth;
                let norm = 1.0 / (samples.len() as f64 * h * (2.0 * PI).sqrt());
                norm * samples
                    .iter()
                    .map(|&s| {
                        let z = (x - s) / h;
                        (-0.5 * z * z).exp()
                    })
                    .sum::<f64>()
            }
        }
    }

    /// Total probability mass.
    pub fn total_mass(&self) -> f64 {
        match self {
            Density::Histogram { masses, .. } => masses.iter().sum(),
            Density::Kde { .. } => 1.0,
        }
    }
}

/// Silverman's rule `0.9 min(sd, IQR / 1.349) n^(-1/5)`, floored at 1e-6.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let sorted = sorted_copy(samples);
    let sd = std_dev(samples);
    let iqr = iqr_sorted(&sorted) / 1.349;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    (0.9 * spread * (samples.len() as f64).powf(-0.2)).max(KDE_MIN_BANDWIDTH)
}

/// Freedman–Diaconis bin count, falling back to Sturges when the IQR is 0.
pub fn default_bin_count(samples: &[f64]) -> usize {
    let sorted = sorted_copy(samples);
    let n = samples.len() as f64;
    let range = sorted[sorted.len() - 1] - sorted[0];
    let iqr = iqr_sorted(&sorted);
    let sturges = (n.log2().ceil() as usize + 1).max(1);
    if iqr <= 0.0 || range <= 0.0 {
        return sturges;
    }
    let width = 2.0 * iqr * n.powf(-1.0 / 3.0);
    ((range / width).ceil() as usize).max(1)
}

pub fn empirical_density(samples: &[f64], kind: DensityKind, bins: Option<usize>) -> Result<Density> {
    if samples.is_empty() {
        return Err(Error::invalid("empirical density of an empty sample set"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite sample"));
    }
    match kind {
        DensityKind::Histogram => {
            let bins = bins.unwrap_or_else(|| default_bin_count(samples));
            if bins == 0 {
                return Err(Error::invalid("histogram needs at least one bin"));
            }
            let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
            let width = (hi - lo) / bins as f64;
            let mut edges: Vec<f64> = (0..bins).map(|i| lo + i as f64 * width).collect();
            edges.push(hi);
            let mut counts = vec![0usize; bins];
            for &s in samples {
                let b = (((s - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            let n = samples.len() as f64;
            Ok(Density::Histogram {
                edges,
                masses: counts.iter().map(|&c| c as f64 / n).collect(),
            })
        }
        DensityKind::Kde => Ok(kde(samples, silverman_bandwidth(samples))),
    }
}

/// Gaussian KDE with an explicit bandwidth.
pub fn kde(samples: &[f64], bandwidth: f64) -> Density {
    let h = bandwidth.max(KDE_MIN_BANDWIDTH);
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Density::Kde {
        samples: samples.to_vec(),
        bandwidth: h,
        support: [lo - KDE_SUPPORT_BANDWIDTHS * h, hi + KDE_SUPPORT_BANDWIDTHS * h],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window_of(f: impl Fn(usize, usize) -> f64, len: usize) -> Window {
        Window {
            data: (0..NUM_CHANNELS)
                .map(|c| (0..len).map(|t| f(c, t)).collect())
                .collect(),
            label: FaultLabel::HEALTHY,
            load_level: 0.5,
        }
    }

    fn fv(values: Vec<f64>) -> FeatureVector {
        FeatureVector {
            values,
            label: FaultLabel::HEALTHY,
            load_level: 0.0,
        }
    }

    #[test]
    fn names_are_unique_and_channel_major() {
        let names = feature_names();
        assert_eq!(names.len(), 35);
        assert_eq!(names[0], "speed.mean");
        assert_eq!(names[6], "torque.var");
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 35);
    }

    #[test]
    fn constant_window_is_degenerate() {
        let fvec = extract_features(&window_of(|_, _| 2.0, 64)).unwrap();
        for c in 0..NUM_CHANNELS {
            let s = &fvec.values[channel_offset(c)..channel_offset(c) + 5];
            assert_eq!(s, &[2.0, 0.0, 0.0, 0.0, 2.0]);
        }
    }

    #[test]
    fn sine_rms() {
        let n = 1000;
        let fvec =
            extract_features(&window_of(|_, t| (2.0 * PI * t as f64 / n as f64).sin(), n)).unwrap();
        assert!((fvec.values[4] - 0.5f64.sqrt()).abs() < 1e-3);
    }

    #[test]
    fn short_window_rejected() {
        assert!(extract_features(&window_of(|_, t| t as f64, 3)).is_err());
        let mut w = window_of(|_, t| t as f64, 8);
        w.data[3][2] = f64::NAN;
        assert!(extract_features(&w).is_err());
    }

    #[test]
    fn two_point_zscore() {
        let stats = fit_global_stats(&[fv(vec![1.0]), fv(vec![3.0])]).unwrap();
        let z = stats.standardize_values(&[1.0]);
        assert!((z[0] + 0.5f64.sqrt()).abs() < 1e-12);
        let z = stats.standardize_values(&[3.0]);
        assert!((z[0] - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(fit_global_stats(&[fv(vec![1.0])]).is_err());
    }

    #[test]
    fn zero_variance_feature_flagged() {
        let rows = [fv(vec![5.0, 1.0]), fv(vec![5.0, 2.0]), fv(vec![5.0, 4.0])];
        let stats = fit_global_stats(&rows).unwrap();
        assert_eq!(stats.flagged, vec![true, false]);
        assert_eq!(stats.standardize_values(&[5.0, 1.0])[0], 0.0);
    }

    #[test]
    fn test_rows_use_training_stats() {
        let stats = fit_global_stats(&[fv(vec![0.0]), fv(vec![2.0])]).unwrap();
        let z = stats.standardize(&[fv(vec![10.0]), fv(vec![11.0])]);
        let sd = 2f64.sqrt();
        assert!((z[0].values[0] - 9.0 / sd).abs() < 1e-12);
        assert!((z[1].values[0] - 10.0 / sd).abs() < 1e-12);
    }

    #[test]
    fn histogram_two_bins() {
        let d = empirical_density(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], DensityKind::Histogram, Some(2))
            .unwrap();
        match d {
            Density::Histogram { masses, edges } => {
                assert_eq!(masses, vec![0.5, 0.5]);
                assert_eq!(edges, vec![0.0, 0.5, 1.0]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn kde_single_sample_peak() {
        let h = 0.3;
        let d = kde(&[1.7], h);
        let peak = d.pdf(1.7);
        assert!((peak - 1.0 / (h * (2.0 * PI).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn silverman_matches_formula() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let sd = std_dev(&xs);
        let iqr = iqr_sorted(&sorted_copy(&xs)) / 1.349;
        let expected = 0.9 * sd.min(iqr) * 50f64.powf(-0.2);
        assert!((silverman_bandwidth(&xs) - expected).abs() < 1e-15);
        assert_eq!(silverman_bandwidth(&[3.0, 3.0]), 1e-6);
    }

    #[test]
    fn empty_samples_rejected() {
        assert!(empirical_density(&[], DensityKind::Kde, None).is_err());
    }

    #[test]
    fn sturges_fallback_when_iqr_zero() {
        let xs = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0];
        assert_eq!(default_bin_count(&xs), 4);
    }

    /// Composite Simpson over the support.
    fn integrate(d: &Density) -> f64 {
        match d {
            Density::Histogram { edges, .. } => {
                // Piecewise constant: integrate exactly bin by bin.
                edges
                    .windows(2)
                    .map(|e| d.pdf(0.5 * (e[0] + e[1])) * (e[1] - e[0]))
                    .sum()
            }
            Density::Kde { .. } => {
                let (lo, hi) = d.support();
                let bw = match d {
                    Density::Kde { bandwidth, .. } => *bandwidth,
                    _ => unreachable!(),
                };
                let n = (((hi - lo) / (bw / 10.0)).ceil() as usize).max(2000) / 2 * 2 + 2;
                let h = (hi - lo) / n as f64;
                let mut acc = d.pdf(lo) + d.pdf(hi);
                for i in 1..n {
                    let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                    acc += w * d.pdf(lo + i as f64 * h);
                }
                acc * h / 3.0
            }
        }
    }

    proptest! {
        #[test]
        fn densities_integrate_to_one(
            xs in prop::collection::vec(-5.0f64..5.0, 1..60),
            use_kde in any::<bool>(),
        ) {
            let kind = if use_kde { DensityKind::Kde } else { DensityKind::Histogram };
            let d = empirical_density(&xs, kind, None).unwrap();
            prop_assert!((integrate(&d) - 1.0).abs() < 1e-6);
            prop_assert!((d.total_mass() - 1.0).abs() < 1e-9);
            if let Density::Histogram { masses, edges } = &d {
                prop_assert!(masses.iter().all(|&m| m >= 0.0));
                prop_assert!(edges.windows(2).all(|e| e[1] > e[0]));
            }
        }

        #[test]
        fn standardize_round_trip(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..20)
        ) {
            let rows: Vec<FeatureVector> = rows.into_iter().map(fv).collect();
            let stats = fit_global_stats(&rows).unwrap();
            for r in &rows {
                let back = stats.destandardize_values(&stats.standardize_values(&r.values));
                for (a, b) in back.iter().zip(&r.values) {
                    prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
                }
            }
        }

        #[test]
        fn standardized_training_moments(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 2), 3..30)
        ) {
            let rows: Vec<FeatureVector> = rows.into_iter().map(fv).collect();
            let stats = fit_global_stats(&rows).unwrap();
            let z = stats.standardize(&rows);
            for j in 0..2 {
                if stats.flagged[j] { continue; }
                let col: Vec<f64> = z.iter().map(|r| r.values[j]).collect();
                prop_assert!(mean(&col).abs() < 1e-9);
                prop_assert!((std_dev(&col) - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn symmetric_samples_have_zero_skew(
            half in prop::collection::vec(0.01f64..100.0, 2..40)
        ) {
            let mut xs: Vec<f64> = half.iter().map(|v| -v).collect();
            xs.extend(half.iter().copied());
            let s = channel_stats(&xs);
            prop_assert!(s[2].abs() < 1e-9);
        }

        #[test]
        fn channel_permutation_permutes_blocks(seed in 0u64..1000) {
            let w = window_of(|c, t| ((c * 31 + t * 7) as f64 + seed as f64).sin() * (c + 1) as f64, 32);
            let mut perm: Vec<usize> = (0..NUM_CHANNELS).collect();
            perm.rotate_left((seed % 7) as usize);
            let permuted = Window {
                data: perm.iter().map(|&c| w.data[c].clone()).collect(),
                ..w.clone()
            };
            let a = extract_features(&w).unwrap().values;
            let b = extract_features(&permuted).unwrap().values;
            for (new_c, &old_c) in perm.iter().enumerate() {
                prop_assert_eq!(
                    &b[channel_offset(new_c)..channel_offset(new_c) + 5],
                    &a[channel_offset(old_c)..channel_offset(old_c) + 5]
                );
            }
        }
    }
}
