//! Histogram reshaping: per-channel CDF matching of a Lab image toward a
//! target histogram, optionally through progressively interpolated targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{compute_histogram, Binning, ChannelHistogram, ColorHistogram, LabImage};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransferError {
    #[error("source and target histograms use different binnings")]
    BinningMismatch,
    #[error("transfer strength {0} is outside [0, 1]")]
    InvalidStrength(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferParams {
    /// 0 leaves the image untouched, 1 applies the full match.
    pub strength: f64,
    /// Number of intermediate matching passes; 0 matches in one step.
    pub smoothing_passes: usize,
    pub binning: Binning,
}

impl Default for TransferParams {
    fn default() -> Self {
        Self {
            strength: 1.0,
            smoothing_passes: 0,
            binning: Binning::default(),
        }
    }
}

impl TransferParams {
    pub fn validate(&self) -> Result<(), TransferError> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(TransferError::InvalidStrength(self.strength));
        }
        Ok(())
    }
}

/// Monotone channel remapping `m(v) = Q_target(F_source(v))` with both the
/// source CDF and the target quantile function linear within bins.
///
/// [`match_channel`] only uses the quantile side; it places samples inside
/// their source bin by rank instead of assuming a uniform spread.
#[derive(Debug, Clone)]
pub struct ChannelMapping {
    source_cdf: Vec<f64>,
    source_density: Vec<f64>,
    target_cdf: Vec<f64>,
    target_density: Vec<f64>,
    lo: f64,
    width: f64,
    bins: crate::color::ChannelBins,
    first_nonempty: usize,
    last_nonempty: usize,
}

impl ChannelMapping {
    pub fn new(source: &ChannelHistogram, target: &ChannelHistogram) -> Result<Self, TransferError> {
        if source.bins != target.bins {
            return Err(TransferError::BinningMismatch);
        }
        let first_nonempty = target.density.iter().position(|d| *d > 0.0).unwrap_or(0);
        let last_nonempty = target
            .density
            .iter()
            .rposition(|d| *d > 0.0)
            .unwrap_or(target.density.len() - 1);
        Ok(Self {
            source_cdf: source.cumulative(),
            source_density: source.density.clone(),
            target_cdf: target.cumulative(),
            target_density: target.density.clone(),
            lo: source.bins.lo,
            width: source.bins.width(),
            bins: source.bins,
            first_nonempty,
            last_nonempty,
        })
    }

    fn source_cdf_at(&self, v: f64) -> f64 {
        let j = self.bins.index(v);
        let frac = ((v - (self.lo + j as f64 * self.width)) / self.width).clamp(0.0, 1.0);
        self.source_cdf[j] + self.source_density[j] * frac
    }

    /// Target value at cumulative mass `u`.
    pub fn quantile(&self, u: f64) -> f64 {
        // First edge whose cumulative mass reaches u; the bin ending there holds u.
        let edge = self.target_cdf.partition_point(|c| *c < u);
        let j = if edge == 0 {
            self.first_nonempty
        } else if edge >= self.target_cdf.len() {
            return self.lo + (self.last_nonempty + 1) as f64 * self.width;
        } else {
            edge - 1
        };
        let start = self.lo + j as f64 * self.width;
        let d = self.target_density[j];
        if d <= 0.0 {
            return start;
        }
        let frac = ((u - self.target_cdf[j]) / d).clamp(0.0, 1.0);
        start + frac * self.width
    }

    pub fn map(&self, v: f64) -> f64 {
        self.quantile(self.source_cdf_at(v))
    }
}

/// `F_source` at every sample: the histogram mass below the sample's bin plus
/// the bin's mass times the sample's midpoint rank among the samples in that
/// bin. Equal values share a position. When `source` is the histogram of
/// `values` this is the exact empirical CDF.
fn sample_cdf(values: &[f32], source: &ChannelHistogram) -> Vec<f64> {
    let bins = source.bins;
    let cdf = source.cumulative();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let bin_of = |i: usize| bins.index(values[order[i]] as f64);

    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let bin = bin_of(start);
        let end = start + order[start..].iter().take_while(|&&o| bins.index(values[o] as f64) == bin).count();
        let count = (end - start) as f64;
        let mut i = start;
        while i < end {
            let v = values[order[i]];
            let j = i + order[i..end].iter().take_while(|&&o| values[o] == v).count();
            let frac = ((i - start) + (j - start)) as f64 / (2.0 * count);
            let u = cdf[bin] + source.density[bin] * frac;
            for &o in &order[i..j] {
                out[o] = u;
            }
            i = j;
        }
        start = end;
    }
    out
}

/// Remaps channel samples toward `target`, blending `(1 − strength)·v + strength·m(v)`.
/// `source` is the histogram the samples were drawn from.
pub fn match_channel(
    values: &[f32],
    source: &ChannelHistogram,
    target: &ChannelHistogram,
    strength: f64,
) -> Result<Vec<f32>, TransferError> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(TransferError::InvalidStrength(strength));
    }
    let mapping = ChannelMapping::new(source, target)?;
    if strength == 0.0 {
        return Ok(values.to_vec());
    }
    Ok(values
        .iter()
        .zip(sample_cdf(values, source))
        .map(|(&v, u)| {
            let v = v as f64;
            ((1.0 - strength) * v + strength * mapping.quantile(u)) as f32
        })
        .collect())
}

/// Output of [`transfer_colors_traced`]: the final image plus the image after each pass.
#[derive(Debug, Clone)]
pub struct TransferTrace {
    pub output: LabImage,
    pub passes: Vec<LabImage>,
}

pub fn transfer_colors(
    source: &LabImage,
    target: &ColorHistogram,
    params: &TransferParams,
) -> Result<LabImage, TransferError> {
    transfer_colors_traced(source, target, params).map(|t| t.output)
}

/// Matches each Lab channel of `source` to `target`. With `n > 0` smoothing
/// passes, pass `t` matches the current image toward `(1 − t/n)·h_source + (t/n)·h_target`;
/// strength is applied once against the original pixels at the end.
pub fn transfer_colors_traced(
    source: &LabImage,
    target: &ColorHistogram,
    params: &TransferParams,
) -> Result<TransferTrace, TransferError> {
    params.validate()?;
    if target.binning != params.binning {
        return Err(TransferError::BinningMismatch);
    }
    let original = compute_histogram(source, &params.binning);
    let mut current = source.clone();
    let mut passes = Vec::new();

    if params.smoothing_passes == 0 {
        for c in 0..3 {
            let values = current.channel(c);
            let mapped = match_channel(&values, &original.channels[c], &target.channels[c], params.strength)?;
            current.set_channel(c, &mapped);
        }
        return Ok(TransferTrace { output: current, passes });
    }

    let n = params.smoothing_passes;
    for t in 1..=n {
        let mix = t as f64 / n as f64;
        let now = compute_histogram(&current, &params.binning);
        for c in 0..3 {
            let goal = interpolate(&original.channels[c], &target.channels[c], mix);
            let values = current.channel(c);
            let mapped = match_channel(&values, &now.channels[c], &goal, 1.0)?;
            current.set_channel(c, &mapped);
        }
        passes.push(current.clone());
    }

    let s = params.strength as f32;
    let blended = source
        .pixels()
        .iter()
        .zip(current.pixels())
        .map(|(a, b)| [0, 1, 2].map(|c| (1.0 - s) * a[c] + s * b[c]))
        .collect();
    let output = LabImage::from_pixels(source.width(), source.height(), blended);
    Ok(TransferTrace { output, passes })
}

fn interpolate(from: &ChannelHistogram, to: &ChannelHistogram, t: f64) -> ChannelHistogram {
    if t >= 1.0 {
        return to.clone();
    }
    ChannelHistogram {
        bins: to.bins,
        density: from
            .density
            .iter()
            .zip(&to.density)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect(),
    }
}

/// Horizontal distance between two channel CDFs, in bins: the smallest `s`
/// with `C_b[i − s] ≤ C_a[i] ≤ C_b[i + s]` at every bin edge `i`.
pub fn cdf_distance_bins(a: &ChannelHistogram, b: &ChannelHistogram) -> usize {
    const TOL: f64 = 1e-9;
    let ca = a.cumulative();
    let cb = b.cumulative();
    let n = ca.len() - 1;
    (0..=n)
        .find(|&s| {
            (0..=n).all(|i| {
                let below = cb[i.saturating_sub(s)];
                let above = cb[(i + s).min(n)];
                below - TOL <= ca[i] && ca[i] <= above + TOL
            })
        })
        .unwrap_or(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::ChannelBins;

    fn l_bins() -> ChannelBins {
        Binning::default().channels[0]
    }

    #[test]
    fn identical_histograms_give_identity() {
        let values: Vec<f32> = (0..500).map(|i| (i as f32 * 0.173) % 100.0).collect();
        let h = ChannelHistogram::from_values(l_bins(), &values);
        let out = match_channel(&values, &h, &h, 1.0).unwrap();
        let w = l_bins().width() as f32;
        for (a, b) in values.iter().zip(&out) {
            assert!((a - b).abs() <= w, "{a} -> {b}");
        }
    }

    #[test]
    fn constant_channel_moves_to_delta() {
        let values = vec![30.0f32; 64];
        let src = ChannelHistogram::from_values(l_bins(), &values);
        let tgt = ChannelHistogram::delta(l_bins(), 70.0);
        let out = match_channel(&values, &src, &tgt, 1.0).unwrap();
        let w = l_bins().width() as f32;
        assert!(out.iter().all(|v| (v - 70.0).abs() <= w), "{:?}", &out[..3]);
    }

    #[test]
    fn zero_strength_is_exact_identity() {
        let values = vec![12.5f32, 40.0, 99.0];
        let src = ChannelHistogram::from_values(l_bins(), &values);
        let tgt = ChannelHistogram::delta(l_bins(), 70.0);
        assert_eq!(match_channel(&values, &src, &tgt, 0.0).unwrap(), values);
    }

    #[test]
    fn mismatched_bins_rejected() {
        let a = ChannelHistogram::delta(l_bins(), 10.0);
        let b = ChannelHistogram::delta(ChannelBins::new(16, 0.0, 100.0).unwrap(), 10.0);
        assert_eq!(match_channel(&[1.0], &a, &b, 1.0), Err(TransferError::BinningMismatch));
        assert_eq!(
            match_channel(&[1.0], &a, &a, 1.5),
            Err(TransferError::InvalidStrength(1.5))
        );
    }

    #[test]
    fn quantile_handles_extremes() {
        let mut density = vec![0.0; 256];
        density[100] = 0.5;
        density[200] = 0.5;
        let tgt = ChannelHistogram { bins: l_bins(), density };
        let src = ChannelHistogram::from_values(l_bins(), &[0.0, 100.0]);
        let m = ChannelMapping::new(&src, &tgt).unwrap();
        let w = l_bins().width();
        assert!((m.map(0.0) - 100.0 * w).abs() < 1e-9);
        assert!((m.map(100.0) - 201.0 * w).abs() < 1e-9);
    }

    #[test]
    fn cdf_distance_counts_shift() {
        let a = ChannelHistogram::delta(l_bins(), 10.0);
        let b = ChannelHistogram::delta(l_bins(), 11.0);
        let shift = l_bins().index(11.0) - l_bins().index(10.0);
        assert_eq!(cdf_distance_bins(&a, &a), 0);
        assert_eq!(cdf_distance_bins(&a, &b), shift);
        assert_eq!(cdf_distance_bins(&b, &a), shift);
    }

    #[test]
    fn progressive_trace_records_each_pass() {
        let img = LabImage::from_pixels(
            16,
            1,
            (0..16).map(|i| [i as f32 * 5.0, 0.0, 0.0]).collect(),
        );
        let target = compute_histogram(
            &LabImage::from_pixels(16, 1, (0..16).map(|i| [20.0 + i as f32 * 4.0, 10.0, -10.0]).collect()),
            &Binning::default(),
        );
        let params = TransferParams { smoothing_passes: 3, ..Default::default() };
        let trace = transfer_colors_traced(&img, &target, &params).unwrap();
        assert_eq!(trace.passes.len(), 3);
        assert_ne!(trace.passes[0], trace.passes[1]);
        assert_eq!(&trace.passes[2], &trace.output);
    }
}
