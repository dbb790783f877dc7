//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use fedstyle_core::clustering::{ClientId, StylePoint};
use fedstyle_core::image::{ImageTensor, LabelMap, IGNORE};
use fedstyle_core::model::{Architecture, Logits, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(c, h, w, |_, _, _| rng.random::<f64>()).unwrap()
}

/// Unshifted DFT of one channel by the defining double sum, as (re, im).
pub fn dft_plane(img: &ImageTensor, c: usize) -> Vec<(f64, f64)> {
    let (h, w) = (img.height(), img.width());
    let mut out = vec![(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    let p = img.get(c, y, x);
                    re += p * a.cos();
                    im += p * a.sin();
                }
            }
            out[u * w + v] = (re, im);
        }
    }
    out
}

/// Amplitudes of the `l x l` block around the zero frequency, frequencies
/// `-l/2..=l/2` on both axes, channel-major then row-major.
pub fn brute_style(img: &ImageTensor, l: usize) -> Vec<f64> {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let half = (l / 2) as isize;
    let mut out = Vec::new();
    for c in 0..img.channels() {
        let plane = dft_plane(img, c);
        for du in -half..=half {
            for dv in -half..=half {
                let u = du.rem_euclid(h) as usize;
                let v = dv.rem_euclid(w) as usize;
                let (re, im) = plane[u * w as usize + v];
                out.push(re.hypot(im));
            }
        }
    }
    out
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance from point `i` to the members of `cluster` other than `i`.
pub fn mean_dist_to(points: &[Vec<f64>], labels: &[usize], i: usize, cluster: usize) -> f64 {
    let others: Vec<usize> = (0..points.len()).filter(|&j| j != i && labels[j] == cluster).collect();
    if others.is_empty() {
        return 0.0;
    }
    others.iter().map(|&j| euclid(&points[i], &points[j])).sum::<f64>() / others.len() as f64
}

pub fn brute_intra(points: &[Vec<f64>], labels: &[usize], i: usize) -> f64 {
    mean_dist_to(points, labels, i, labels[i])
}

pub fn brute_inter(points: &[Vec<f64>], labels: &[usize], i: usize) -> f64 {
    let k = labels.iter().max().unwrap() + 1;
    (0..k)
        .filter(|&c| c != labels[i])
        .map(|c| mean_dist_to(points, labels, i, c))
        .fold(f64::INFINITY, f64::min)
}

pub fn brute_silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        if labels.iter().filter(|&&l| l == labels[i]).count() == 1 {
            continue;
        }
        let a = brute_intra(points, labels, i);
        let b = brute_inter(points, labels, i);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Isotropic Gaussian blobs around `centers`, `per` points each.
pub fn blobs(centers: &[Vec<f64>], per: usize, sigma: f64, seed: u64) -> (Vec<StylePoint>, Vec<usize>) {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for (b, c) in centers.iter().enumerate() {
        for _ in 0..per {
            let v = c.iter().map(|x| x + noise.sample(&mut r)).collect();
            points.push(StylePoint::new(ClientId(points.len() as u32), v));
            truth.push(b);
        }
    }
    (points, truth)
}

/// True when the two labelings induce the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    use std::collections::BTreeMap;
    let mut fwd = BTreeMap::new();
    let mut rev = BTreeMap::new();
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| *fwd.entry(x).or_insert(y) == y && *rev.entry(y).or_insert(x) == x)
}

/// Parameters away from the symmetric initial state (norm scale != 1).
pub fn random_params(arch: Architecture, seed: u64) -> ParamSet {
    let mut p = ParamSet::init(arch, seed);
    let mut r = rng(seed ^ 0xabcdef);
    for v in p.iter_mut() {
        *v += r.random_range(-0.3..0.3);
    }
    p
}

pub fn random_labels(r: &mut impl Rng, h: usize, w: usize, classes: usize, ignore_rate: f64) -> LabelMap {
    let labels = (0..h * w)
        .map(|_| if r.random::<f64>() < ignore_rate { IGNORE } else { r.random_range(0..classes) as u8 })
        .collect();
    LabelMap::new(h, w, labels).unwrap()
}

pub fn random_logits(r: &mut impl Rng, h: usize, w: usize, q: usize) -> Logits {
    Logits::new(h, w, q, (0..q * h * w).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
/// with central differences of step `h`.
pub fn grad_check(params: &ParamSet, analytic: &ParamSet, h: f64, floor: f64, loss: impl Fn(&ParamSet) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for i in 0..params.len() {
        let x = params.get_flat(i);
        p.set_flat(i, x + h);
        let up = loss(&p);
        p.set_flat(i, x - h);
        let down = loss(&p);
        p.set_flat(i, x);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get_flat(i);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}
