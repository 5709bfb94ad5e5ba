//! sRGB ↔ CIELab (D65) conversion and per-channel Lab histograms.

use std::sync::OnceLock;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const L_RANGE: (f64, f64) = (0.0, 100.0);
pub const A_RANGE: (f64, f64) = (-128.0, 127.0);
pub const B_RANGE: (f64, f64) = (-128.0, 127.0);

/// Default number of bins per channel.
pub const DEFAULT_BINS: usize = 256;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

// D65 reference white as the image of sRGB white, so (255,255,255) lands on L=100, a=b=0.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ColorError {
    #[error("histograms use different binnings")]
    BinningMismatch,
    #[error("no histograms to blend")]
    EmptyBlend,
    #[error("{histograms} histograms but {weights} weights")]
    WeightCountMismatch { histograms: usize, weights: usize },
    #[error("blend weight {0} is negative or not finite")]
    InvalidWeight(f64),
    #[error("all blend weights are zero")]
    AllZeroWeights,
    #[error("binning needs at least 2 bins per channel and an increasing range")]
    InvalidBinning,
    #[error("histogram channel {channel} has invalid densities")]
    InvalidDensities { channel: usize },
}

/// An image in CIELab, pixels stored row-major as `[L, a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    width: u32,
    height: u32,
    pixels: Vec<[f32; 3]>,
}

impl LabImage {
    /// Builds an image from raw pixels, clamping every channel into its Lab range.
    ///
    /// Panics if the pixel count does not match the dimensions or either dimension is zero.
    pub fn from_pixels(width: u32, height: u32, mut pixels: Vec<[f32; 3]>) -> Self {
        assert!(width > 0 && height > 0, "Lab image must be non-empty");
        assert_eq!(pixels.len(), width as usize * height as usize);
        pixels.iter_mut().for_each(clamp_lab);
        Self { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.pixels.iter().map(|p| p[c]).collect()
    }

    /// Replaces channel `c` with `values`, clamped into range.
    pub fn set_channel(&mut self, c: usize, values: &[f32]) {
        assert_eq!(values.len(), self.pixels.len());
        for (p, &v) in self.pixels.iter_mut().zip(values) {
            p[c] = v;
            clamp_lab(p);
        }
    }

    pub fn mean(&self) -> [f64; 3] {
        let n = self.pixels.len() as f64;
        let mut acc = [0.0f64; 3];
        for p in &self.pixels {
            for c in 0..3 {
                acc[c] += p[c] as f64;
            }
        }
        acc.map(|v| v / n)
    }
}

fn clamp_lab(p: &mut [f32; 3]) {
    let ranges = [L_RANGE, A_RANGE, B_RANGE];
    for (v, (lo, hi)) in p.iter_mut().zip(ranges) {
        *v = if v.is_nan() { 0.0 } else { v.clamp(lo as f32, hi as f32) };
    }
}

fn srgb_decode_table() -> &'static [f64; 256] {
    static TABLE: OnceLock<[f64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; 256];
        for (i, v) in t.iter_mut().enumerate() {
            let c = i as f64 / 255.0;
            *v = if c <= 0.04045 {
                c / 12.92
            } else {
                ((c + 0.055) / 1.055).powf(2.4)
            };
        }
        t
    })
}

fn srgb_encode(linear: f64) -> f64 {
    if linear <= 0.0031308 {
        12.92 * linear
    } else {
        1.055 * linear.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let cube = f * f * f;
    if cube > EPSILON {
        cube
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// Converts one 8-bit sRGB pixel to unclamped CIELab.
pub fn srgb_to_lab_pixel(rgb: [u8; 3]) -> [f64; 3] {
    let table = srgb_decode_table();
    let lin = rgb.map(|c| table[c as usize]);
    let mut f = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        let xyz = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        f[i] = lab_f(xyz / WHITE[i]);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// Converts one Lab pixel to 8-bit sRGB, clamping out-of-gamut results.
pub fn lab_to_srgb_pixel(lab: [f64; 3]) -> [u8; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * WHITE[0],
        lab_f_inv(fy) * WHITE[1],
        lab_f_inv(fz) * WHITE[2],
    ];
    let mut out = [0u8; 3];
    for (o, row) in out.iter_mut().zip(&XYZ_TO_RGB) {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        let v = (srgb_encode(lin.clamp(0.0, 1.0)) * 255.0).round();
        *o = v.clamp(0.0, 255.0) as u8;
    }
    out
}

pub fn rgb_to_lab(image: &RgbImage) -> LabImage {
    let pixels = image
        .pixels()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|p| srgb_to_lab_pixel(p.0).map(|v| v as f32))
        .collect();
    LabImage::from_pixels(image.width(), image.height(), pixels)
}

pub fn lab_to_rgb(image: &LabImage) -> RgbImage {
    let bytes: Vec<u8> = image
        .pixels
        .par_iter()
        .flat_map_iter(|p| lab_to_srgb_pixel(p.map(f64::from)))
        .collect();
    RgbImage::from_raw(image.width, image.height, bytes).expect("pixel buffer matches dimensions")
}

/// Uniform bins over `[lo, hi]`; the top edge belongs to the last bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelBins {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl ChannelBins {
    pub fn new(bins: usize, lo: f64, hi: f64) -> Result<Self, ColorError> {
        if bins < 2 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(ColorError::InvalidBinning);
        }
        Ok(Self { bins, lo, hi })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.width()
    }

    pub fn index(&self, v: f64) -> usize {
        let t = ((v - self.lo) / (self.hi - self.lo) * self.bins as f64).floor();
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(self.bins - 1)
        }
    }
}

/// Per-channel binning for L, a and b.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub channels: [ChannelBins; 3],
}

impl Binning {
    /// `bins` uniform bins over each full Lab channel range.
    pub fn lab(bins: usize) -> Result<Self, ColorError> {
        Ok(Self {
            channels: [
                ChannelBins::new(bins, L_RANGE.0, L_RANGE.1)?,
                ChannelBins::new(bins, A_RANGE.0, A_RANGE.1)?,
                ChannelBins::new(bins, B_RANGE.0, B_RANGE.1)?,
            ],
        })
    }

    /// Short descriptor used in directory names and reports, e.g. `lab256`.
    pub fn key(&self) -> String {
        let [l, a, b] = self.channels;
        let standard = Binning::lab(l.bins).ok();
        if l.bins == a.bins && a.bins == b.bins && standard == Some(*self) {
            format!("lab{}", l.bins)
        } else {
            let ch = |c: ChannelBins| format!("{}[{},{}]", c.bins, c.lo, c.hi);
            format!("lab{}x{}x{}", ch(l), ch(a), ch(b))
        }
    }
}

impl Default for Binning {
    fn default() -> Self {
        Binning::lab(DEFAULT_BINS).expect("default binning is valid")
    }
}

/// Densities of one channel over a [`ChannelBins`] grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelHistogram {
    pub bins: ChannelBins,
    pub density: Vec<f64>,
}

impl ChannelHistogram {
    pub fn from_values(bins: ChannelBins, values: &[f32]) -> Self {
        let mut counts = vec![0u64; bins.bins];
        for &v in values {
            counts[bins.index(v as f64)] += 1;
        }
        let n = values.len().max(1) as f64;
        Self {
            bins,
            density: counts.into_iter().map(|c| c as f64 / n).collect(),
        }
    }

    /// A histogram with all mass in the bin containing `v`.
    pub fn delta(bins: ChannelBins, v: f64) -> Self {
        let mut density = vec![0.0; bins.bins];
        density[bins.index(v)] = 1.0;
        Self { bins, density }
    }

    /// Cumulative mass at each bin edge, length `bins + 1`, starting at 0.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.density.len() + 1);
        out.push(0.0);
        for d in &self.density {
            acc += d;
            out.push(acc);
        }
        out
    }

    fn is_valid(&self) -> bool {
        self.density.len() == self.bins.bins
            && self.density.iter().all(|d| d.is_finite() && *d >= 0.0)
            && (self.density.iter().sum::<f64>() - 1.0).abs() <= 1e-9
    }
}

/// Three per-channel histograms sharing one [`Binning`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorHistogram {
    pub binning: Binning,
    pub channels: [ChannelHistogram; 3],
}

impl ColorHistogram {
    pub fn new(binning: Binning, densities: [Vec<f64>; 3]) -> Result<Self, ColorError> {
        let [l, a, b] = densities;
        let hist = Self {
            binning,
            channels: [
                ChannelHistogram { bins: binning.channels[0], density: l },
                ChannelHistogram { bins: binning.channels[1], density: a },
                ChannelHistogram { bins: binning.channels[2], density: b },
            ],
        };
        hist.validate()?;
        Ok(hist)
    }

    pub fn validate(&self) -> Result<(), ColorError> {
        for (i, ch) in self.channels.iter().enumerate() {
            if ch.bins != self.binning.channels[i] || !ch.is_valid() {
                return Err(ColorError::InvalidDensities { channel: i });
            }
        }
        Ok(())
    }

    /// SHA-256 over the binning and the little-endian bytes of every density.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.binning.key().as_bytes());
        for ch in &self.channels {
            for d in &ch.density {
                hasher.update(d.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

pub fn compute_histogram(image: &LabImage, binning: &Binning) -> ColorHistogram {
    let channels = [0, 1, 2].map(|c| ChannelHistogram::from_values(binning.channels[c], &image.channel(c)));
    ColorHistogram { binning: *binning, channels }
}

/// Convex blend of histograms with weights `w_i = bc_i / Σ bc_j`.
pub fn blend_histograms(
    histograms: &[&ColorHistogram],
    weights: &[f64],
) -> Result<ColorHistogram, ColorError> {
    let first = histograms.first().ok_or(ColorError::EmptyBlend)?;
    if histograms.len() != weights.len() {
        return Err(ColorError::WeightCountMismatch {
            histograms: histograms.len(),
            weights: weights.len(),
        });
    }
    if histograms.iter().any(|h| h.binning != first.binning) {
        return Err(ColorError::BinningMismatch);
    }
    if let Some(&w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(ColorError::InvalidWeight(w));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(ColorError::AllZeroWeights);
    }
    let normalized: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let channels = [0, 1, 2].map(|c| {
        let bins = first.binning.channels[c];
        let mut density = vec![0.0; bins.bins];
        for (h, w) in histograms.iter().zip(&normalized) {
            for (out, d) in density.iter_mut().zip(&h.channels[c].density) {
                *out += w * d;
            }
        }
        ChannelHistogram { bins, density }
    });
    Ok(ColorHistogram { binning: first.binning, channels })
}

/// Convenience for tests and synthetic inputs: a raster filled by `f(x, y)`.
pub fn rgb_from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| Rgb(f(x, y)))
}
