use affect_core::color::{
    blend_histograms, compute_histogram, lab_to_srgb_pixel, rgb_to_lab, srgb_to_lab_pixel, Binning, ColorHistogram,
    LabImage,
};
use proptest::prelude::*;

fn histogram(bins: usize) -> impl Strategy<Value = ColorHistogram> {
    let channel = prop::collection::vec(prop_oneof![2 => 0.0..1.0f64, 1 => Just(0.0)], bins)
        .prop_filter("mass", |v| v.iter().sum::<f64>() > 1e-3)
        .prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        });
    [channel.clone(), channel.clone(), channel]
        .prop_map(move |d| ColorHistogram::new(Binning::lab(bins).unwrap(), d).unwrap())
}

proptest! {
    #[test]
    fn blend_is_a_density(hists in prop::collection::vec(histogram(32), 1..8), seed in any::<u64>()) {
        let weights: Vec<f64> = (0..hists.len()).map(|i| ((seed >> (i * 7)) % 97) as f64 / 97.0 + 0.01).collect();
        let refs: Vec<&ColorHistogram> = hists.iter().collect();
        let out = blend_histograms(&refs, &weights).unwrap();
        for ch in &out.channels {
            prop_assert!((ch.density.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(ch.density.iter().all(|d| *d >= 0.0));
        }
    }

    #[test]
    fn blend_ignores_common_scale(hists in prop::collection::vec(histogram(16), 1..6), scale in 1e-3..1e3f64) {
        let weights: Vec<f64> = (1..=hists.len()).map(|i| i as f64 / 10.0).collect();
        let scaled: Vec<f64> = weights.iter().map(|w| w * scale).collect();
        let refs: Vec<&ColorHistogram> = hists.iter().collect();
        let a = blend_histograms(&refs, &weights).unwrap();
        let b = blend_histograms(&refs, &scaled).unwrap();
        for (x, y) in a.channels.iter().zip(&b.channels) {
            for (p, q) in x.density.iter().zip(&y.density) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_histograms_are_a_fixed_point(h in histogram(24), w in prop::collection::vec(0.01..5.0f64, 2..5)) {
        let refs = vec![&h; w.len()];
        let out = blend_histograms(&refs, &w).unwrap();
        for (x, y) in out.channels.iter().zip(&h.channels) {
            for (p, q) in x.density.iter().zip(&y.density) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn histogram_mass_is_one(w in 1u32..40, h in 1u32..40, seed in any::<u64>()) {
        let img = image::RgbImage::from_fn(w, h, |x, y| {
            let v = seed.wrapping_mul(6364136223846793005).wrapping_add((x * 131 + y * 7) as u64);
            image::Rgb([(v >> 11) as u8, (v >> 23) as u8, (v >> 37) as u8])
        });
        let hist = compute_histogram(&rgb_to_lab(&img), &Binning::default());
        for ch in &hist.channels {
            prop_assert!((ch.density.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_within_one_level(rgb in any::<[u8; 3]>()) {
        let back = lab_to_srgb_pixel(srgb_to_lab_pixel(rgb));
        for c in 0..3 {
            prop_assert!((back[c] as i32 - rgb[c] as i32).abs() <= 1, "{:?} -> {:?}", rgb, back);
        }
    }
}

#[test]
fn lab_image_round_trip_through_f32_storage() {
    let img = image::RgbImage::from_fn(64, 64, |x, y| image::Rgb([(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8]));
    let lab: LabImage = rgb_to_lab(&img);
    let back = affect_core::color::lab_to_rgb(&lab);
    for (a, b) in img.pixels().zip(back.pixels()) {
        for c in 0..3 {
            assert!((a.0[c] as i32 - b.0[c] as i32).abs() <= 1);
        }
    }
}
