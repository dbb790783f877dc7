mod common;

use common::*;
use fedstyle_core::image::ImageTensor;
use fedstyle_core::spectral::{apply_style, extract_style, fft2, ifft2, mean_style, Style};
use proptest::prelude::*;
use rand::Rng;

fn sized_image(seed: u64, lo: usize, hi: usize) -> ImageTensor {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(lo..=hi), r.random_range(lo..=hi));
    random_image(&mut r, 3, h, w)
}

fn odd_window(seed: u64, img: &ImageTensor) -> usize {
    let max = img.height().min(img.width());
    let l = 1 + 2 * rng(seed ^ 7).random_range(0..=(max - 1) / 2);
    l.min(if max % 2 == 0 { max - 1 } else { max })
}

fn energy(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum()
}

#[test]
fn style_matches_direct_dft_on_odd_and_even_sizes() {
    for seed in 0..6 {
        let img = sized_image(seed, 5, 11);
        for l in [1, 3, 5] {
            let fast = extract_style(&img, l).unwrap();
            let slow = brute_style(&img, l);
            let err = fast.values().iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{}x{} l={l}: {err}", img.height(), img.width());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parseval(seed in any::<u64>()) {
        let img = sized_image(seed, 4, 20);
        let spec = fft2(&img).unwrap();
        let n = (img.height() * img.width()) as f64;
        let space = energy(img.values());
        let freq = energy(spec.amplitude()) / n;
        prop_assert!((space - freq).abs() <= 1e-9 * space);
    }

    #[test]
    fn inverse_round_trip(seed in any::<u64>()) {
        let img = sized_image(seed, 2, 20);
        let back = ifft2(&fft2(&img).unwrap(), false).unwrap();
        prop_assert!(back.max_abs_diff(&img) < 1e-9);
    }

    #[test]
    fn restyling_is_idempotent(seed in any::<u64>(), other in any::<u64>()) {
        let img = sized_image(seed, 6, 16);
        let l = odd_window(seed, &img);
        let donor = random_image(&mut rng(other), 3, img.height(), img.width());
        let style = extract_style(&donor, l).unwrap();
        let once = apply_style(&img, &style).unwrap();
        let twice = apply_style(&once, &style).unwrap();
        prop_assert!(twice.max_abs_diff(&once) < 1e-9);
        let carried = extract_style(&once, l).unwrap();
        prop_assert!(carried.distance(&style) < 1e-9 * (1.0 + style.values().iter().cloned().fold(0.0, f64::max)));
    }

    #[test]
    fn style_ignores_circular_shifts(seed in any::<u64>(), dy in 0usize..8, dx in 0usize..8) {
        let img = sized_image(seed, 6, 14);
        let (h, w) = (img.height(), img.width());
        let shifted = ImageTensor::from_fn(3, h, w, |c, y, x| img.get(c, (y + dy) % h, (x + dx) % w)).unwrap();
        let l = odd_window(seed, &img);
        let a = extract_style(&img, l).unwrap();
        let b = extract_style(&shifted, l).unwrap();
        prop_assert!(a.distance(&b) < 1e-9);
    }

    #[test]
    fn style_scales_linearly(seed in any::<u64>(), k in 0.0f64..4.0) {
        let img = sized_image(seed, 6, 12);
        let scaled = ImageTensor::from_fn(3, img.height(), img.width(), |c, y, x| k * img.get(c, y, x)).unwrap();
        let l = odd_window(seed, &img);
        let a = extract_style(&img, l).unwrap();
        let b = extract_style(&scaled, l).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((k * x - y).abs() < 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn mean_style_is_order_free(seed in any::<u64>(), n in 1usize..6) {
        let mut r = rng(seed);
        let styles: Vec<Style> = (0..n)
            .map(|_| Style::new(2, 3, (0..18).map(|_| r.random_range(0.0..10.0)).collect()).unwrap())
            .collect();
        let mut rev = styles.clone();
        rev.reverse();
        let a = mean_style(&styles).unwrap();
        let b = mean_style(&rev).unwrap();
        prop_assert!(a.distance(&b) < 1e-12);
        for (i, v) in a.values().iter().enumerate() {
            let lo = styles.iter().map(|s| s.values()[i]).fold(f64::INFINITY, f64::min);
            let hi = styles.iter().map(|s| s.values()[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn style_bytes_round_trip(seed in any::<u64>()) {
        let img = sized_image(seed, 5, 9);
        let s = extract_style(&img, 3).unwrap();
        prop_assert_eq!(Style::from_bytes(&s.to_bytes()).unwrap(), s);
    }
}
