//! Deterministic synthetic images and emotion-annotated fixture databases.
//!
//! Used by the test suites and the benchmark harness; everything here is a
//! pure function of its seed.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::rgb_from_fn;
use crate::emotion::CHANNEL_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Independent per-channel ramps along x, y and the diagonal.
    Ramp,
    /// Smooth gradients plus uniform per-pixel noise.
    Noise,
    /// Two noisy color clusters split by a tilted boundary.
    Bimodal,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Ramp, Pattern::Noise, Pattern::Bimodal];
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// A colorful image of the given pattern; different seeds give different palettes.
pub fn image(pattern: Pattern, width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..90.0));
    let hi: [f64; 3] = std::array::from_fn(|_| rng.gen_range(150.0..255.0));
    let (w, h) = (width.max(2) as f64 - 1.0, height.max(2) as f64 - 1.0);
    match pattern {
        Pattern::Ramp => rgb_from_fn(width, height, |x, y| {
            let t = [x as f64 / w, y as f64 / h, (x as f64 / w + y as f64 / h) / 2.0];
            std::array::from_fn(|c| to_u8(lo[c] + (hi[c] - lo[c]) * t[c]))
        }),
        Pattern::Noise => {
            let amp: f64 = rng.gen_range(20.0..60.0);
            // keep base ± amp inside [0, 255]: clipping would pile pixels onto one value
            let lo = lo.map(|v| amp + v * (90.0 - amp).max(0.0) / 90.0);
            let hi = hi.map(|v| v.min(255.0 - amp));
            let noise: Vec<[f64; 3]> = (0..width as usize * height as usize)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-amp..amp)))
                .collect();
            rgb_from_fn(width, height, |x, y| {
                let t = (x as f64 / w + y as f64 / h) / 2.0;
                let n = noise[(y * width + x) as usize];
                std::array::from_fn(|c| to_u8(lo[c] + (hi[c] - lo[c]) * t + n[c]))
            })
        }
        Pattern::Bimodal => {
            let slope = rng.gen_range(-0.5..0.5);
            let spread: f64 = rng.gen_range(15.0..35.0);
            let lo = lo.map(|v| 2.0 * spread + v * (90.0 - 2.0 * spread) / 90.0);
            let hi = hi.map(|v| v.min(255.0 - 2.0 * spread));
            let noise: Vec<[f64; 3]> = (0..width as usize * height as usize)
                .map(|_| {
                    // sum of two uniforms: a triangular, roughly bell-shaped spread
                    std::array::from_fn(|_| rng.gen_range(-spread..spread) + rng.gen_range(-spread..spread))
                })
                .collect();
            rgb_from_fn(width, height, |x, y| {
                let left = (x as f64) < w / 2.0 + slope * (y as f64 - h / 2.0);
                let base = if left { lo } else { hi };
                let n = noise[(y * width + x) as usize];
                std::array::from_fn(|c| to_u8(base[c] + n[c]))
            })
        }
    }
}

/// Random emotion weights, mostly concentrated on one or two channels.
pub fn emotion_weights(rng: &mut impl Rng) -> [f64; CHANNEL_COUNT] {
    let mut w: [f64; CHANNEL_COUNT] = std::array::from_fn(|_| rng.gen_range(0.0..0.2));
    w[rng.gen_range(0..CHANNEL_COUNT)] += rng.gen_range(0.5..2.0);
    w[rng.gen_range(0..CHANNEL_COUNT)] += rng.gen_range(0.0..1.0);
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Writes `count` images under `dir/images/` and a manifest `dir/manifest.csv`
/// with ids `img0000`, `img0001`, … and random emotion distributions.
pub fn write_fixture(dir: &Path, count: usize, image_size: u32, seed: u64) -> io::Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::from("# synthetic emotion-annotated fixture\nid,path,anger,disgust,fear,joy,sadness,surprise,neutral\n");
    for i in 0..count {
        let pattern = Pattern::ALL[i % Pattern::ALL.len()];
        let img = image(pattern, image_size, image_size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let rel = format!("images/img{i:04}.png");
        img.save(dir.join(&rel)).map_err(io::Error::other)?;
        let p = emotion_weights(&mut rng);
        let cols: Vec<String> = p.iter().map(|v| format!("{v:.12}")).collect();
        manifest.push_str(&format!("img{i:04},{rel},{}\n", cols.join(",")));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest)?;
    Ok(path)
}
