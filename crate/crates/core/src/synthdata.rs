//! Synthetic multi-domain segmentation worlds.
//!
//! Every image is a background with axis-aligned rectangles and discs drawn
//! on top, colored by a class palette. A domain then distorts the colors
//! with a low-frequency signature: a multiplicative illumination ramp and an
//! additive per-channel color cast, followed by Gaussian pixel noise. The
//! signature lives in the lowest spatial frequencies, which is exactly what
//! an amplitude-window style measures.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::ClientId;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap};
use crate::seed;
use crate::spectral;

/// Low-frequency color distortion of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSignature {
    /// Additive offset per channel.
    pub cast: Vec<f64>,
    /// Illumination slope across the width and the height; the multiplier at
    /// normalized position `(u, v)` in `[-0.5, 0.5]^2` is `1 + gx u + gy v`.
    pub gradient: [f64; 2],
}

impl StyleSignature {
    pub fn identity(channels: usize) -> Self {
        Self { cast: vec![0.0; channels], gradient: [0.0, 0.0] }
    }

    pub fn vector(&self) -> Vec<f64> {
        self.cast.iter().copied().chain(self.gradient).collect()
    }

    pub fn distance(&self, other: &StyleSignature) -> f64 {
        self.vector()
            .iter()
            .zip(other.vector())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub signature: StyleSignature,
    pub noise_sigma: f64,
    /// Base color per class, `palette[class][channel]`.
    pub palette: Vec<Vec<f64>>,
}

impl DomainSpec {
    pub fn classes(&self) -> usize {
        self.palette.len()
    }

    pub fn channels(&self) -> usize {
        self.palette.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        let ch = self.channels();
        if self.classes() < 2 || ch == 0 || self.classes() > u8::MAX as usize {
            return Err(Error::InvalidInput(format!(
                "domain {} needs 2..255 classes and at least one channel",
                self.domain_id
            )));
        }
        if self.palette.iter().any(|c| c.len() != ch) || self.signature.cast.len() != ch {
            return Err(Error::ShapeMismatch(format!(
                "domain {} palette/cast channel counts disagree",
                self.domain_id
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidInput("noise sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Default five-class RGB palette; class 0 is the background.
pub fn default_palette() -> Vec<Vec<f64>> {
    vec![
        vec![0.50, 0.50, 0.50],
        vec![0.78, 0.30, 0.30],
        vec![0.30, 0.74, 0.34],
        vec![0.30, 0.36, 0.78],
        vec![0.78, 0.72, 0.30],
    ]
}

/// Generation knobs for target domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainParams {
    pub domains: usize,
    /// Minimum pairwise distance of signature amplitude profiles, source included.
    pub separation: f64,
    pub cast_max: f64,
    pub gradient_max: f64,
    pub noise_sigma: f64,
}

impl Default for DomainParams {
    fn default() -> Self {
        Self { domains: 3, separation: 0.25, cast_max: 0.2, gradient_max: 0.3, noise_sigma: 0.04 }
    }
}

/// The source domain: undistorted palette.
pub fn source_domain(palette: Vec<Vec<f64>>, noise_sigma: f64) -> DomainSpec {
    let ch = palette.first().map_or(0, Vec::len);
    DomainSpec { domain_id: usize::MAX, signature: StyleSignature::identity(ch), noise_sigma, palette }
}

/// Window and batch used to measure a signature's amplitude profile.
pub const PROFILE_WINDOW: usize = 3;
const PROFILE_IMAGES: u64 = 16;
const PROFILE_SHAPE: ImageShape = ImageShape { height: 32, width: 32 };
/// Candidate domains must clear `separation` by this factor on the reference
/// profile so that the means of freshly drawn images clear it too.
const PROFILE_MARGIN: f64 = 1.2;
const RESTART_AFTER: usize = 100;
const MAX_ATTEMPTS: usize = 5000;

/// Low-frequency amplitude profile of a signature: the mean style, in
/// per-pixel amplitude units, of a fixed noise-free reference batch rendered
/// under that signature.
pub fn signature_profile(signature: &StyleSignature, palette: &[Vec<f64>]) -> Result<Vec<f64>> {
    let spec = DomainSpec { domain_id: 0, signature: signature.clone(), noise_sigma: 0.0, palette: palette.to_vec() };
    let n = (PROFILE_SHAPE.height * PROFILE_SHAPE.width) as f64;
    let mut acc: Vec<f64> = Vec::new();
    for i in 0..PROFILE_IMAGES {
        let (img, _) = gen_image(&spec, PROFILE_SHAPE, seed::derive(u64::MAX, &[i]))?;
        let style = spectral::extract_style(&img, PROFILE_WINDOW)?;
        acc.resize(style.len(), 0.0);
        for (a, v) in acc.iter_mut().zip(style.values()) {
            *a += v / (n * PROFILE_IMAGES as f64);
        }
    }
    Ok(acc)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draws `params.domains` target domains by rejection sampling so that the
/// amplitude profiles of all signatures, the source's identity included, are
/// pairwise at least `separation` apart.
pub fn gen_domains(params: &DomainParams, palette: &[Vec<f64>], seed: u64) -> Result<Vec<DomainSpec>> {
    if params.domains == 0 {
        return Err(Error::InvalidInput("need at least one target domain".into()));
    }
    let channels = palette.first().map_or(0, Vec::len);
    let mut rng = seed::rng(seed, &[seed::STREAM_WORLD, 0]);
    let mut taken = vec![signature_profile(&StyleSignature::identity(channels), palette)?];
    let mut out = Vec::with_capacity(params.domains);
    let (mut attempts, mut misses) = (0usize, 0usize);
    while out.len() < params.domains {
        attempts += 1;
        // Early picks can crowd out later ones; start over after a run of misses.
        if misses >= RESTART_AFTER {
            taken.truncate(1);
            out.clear();
            misses = 0;
        }
        if attempts > MAX_ATTEMPTS {
            return Err(Error::InvalidInput(format!(
                "cannot place {} domains {} apart within cast {} / gradient {}",
                params.domains, params.separation, params.cast_max, params.gradient_max
            )));
        }
        let sig = StyleSignature {
            cast: (0..channels).map(|_| rng.random_range(-params.cast_max..=params.cast_max)).collect(),
            gradient: [
                rng.random_range(-params.gradient_max..=params.gradient_max),
                rng.random_range(-params.gradient_max..=params.gradient_max),
            ],
        };
        let profile = signature_profile(&sig, palette)?;
        if taken.iter().all(|t| euclid(t, &profile) >= params.separation * PROFILE_MARGIN) {
            misses = 0;
            taken.push(profile);
            out.push(DomainSpec {
                domain_id: out.len(),
                signature: sig,
                noise_sigma: params.noise_sigma,
                palette: palette.to_vec(),
            });
        } else {
            misses += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

/// Renders one labeled image of `spec`.
pub fn gen_image(spec: &DomainSpec, shape: ImageShape, seed: u64) -> Result<(ImageTensor, LabelMap)> {
    spec.validate()?;
    let (h, w) = (shape.height, shape.width);
    if h < 4 || w < 4 {
        return Err(Error::InvalidInput(format!("image {h}x{w} too small to draw shapes")));
    }
    let q = spec.classes();
    let mut rng = seed::rng(seed, &[seed::STREAM_WORLD, 1]);
    let mut labels = LabelMap::filled(h, w, 0);

    for _ in 0..rng.random_range(2..=5) {
        let class = rng.random_range(1..q) as u8;
        let rh = rng.random_range((h / 8).max(1)..=(h / 2).max(1));
        let rw = rng.random_range((w / 8).max(1)..=(w / 2).max(1));
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                labels.set(y, x, class);
            }
        }
    }
    for _ in 0..rng.random_range(1..=3) {
        let class = rng.random_range(1..q) as u8;
        let lo = (h.min(w) as f64 / 10.0).max(1.0);
        let hi = (h.min(w) as f64 / 4.0).max(lo + 1.0);
        let r: f64 = rng.random_range(lo..hi);
        let cy: f64 = rng.random_range(0.0..h as f64);
        let cx: f64 = rng.random_range(0.0..w as f64);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= r * r {
                    labels.set(y, x, class);
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let sig = &spec.signature;
    let img = ImageTensor::from_fn(spec.channels(), h, w, |c, y, x| {
        let u = x as f64 / (w - 1) as f64 - 0.5;
        let v = y as f64 / (h - 1) as f64 - 0.5;
        let illum = 1.0 + sig.gradient[0] * u + sig.gradient[1] * v;
        let base = spec.palette[labels.get(y, x) as usize][c];
        let mut value = base * illum + sig.cast[c];
        if spec.noise_sigma > 0.0 {
            value += noise.sample(&mut rng);
        }
        value.clamp(0.0, 1.0)
    })?;
    Ok((img, labels))
}

/// Federated split: how many clients each domain contributes and how many
/// images each client holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub clients_per_domain: usize,
    /// Inclusive range of images per client.
    pub images_per_client: (usize, usize),
    pub image: ImageShape,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            clients_per_domain: 10,
            images_per_client: (8, 24),
            image: ImageShape { height: 32, width: 32 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub labels: LabelMap,
    pub domain: usize,
}

/// A client's private, unlabeled target data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub id: ClientId,
    pub domain: usize,
    pub images: Vec<ImageTensor>,
}

#[derive(Clone, Debug)]
pub struct World {
    pub source_domain: DomainSpec,
    pub domains: Vec<DomainSpec>,
    pub source: Vec<LabeledImage>,
    /// Held-out source images, for measuring the source/target gap.
    pub source_holdout: Vec<LabeledImage>,
    pub clients: Vec<ClientData>,
    pub test: Vec<LabeledImage>,
}

impl World {
    pub fn total_client_images(&self) -> usize {
        self.clients.iter().map(|c| c.images.len()).sum()
    }
}

/// Sizes of the server-side and evaluation sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSizes {
    pub source: usize,
    pub source_holdout: usize,
    pub test_per_domain: usize,
}

impl Default for WorldSizes {
    fn default() -> Self {
        Self { source: 200, source_holdout: 30, test_per_domain: 20 }
    }
}

const KIND_SOURCE: u64 = 10;
const KIND_HOLDOUT: u64 = 11;
const KIND_CLIENT: u64 = 12;
const KIND_TEST: u64 = 13;
const KIND_COUNTS: u64 = 14;

/// Generates source, federated clients and a domain-stratified test set.
/// Client ids are assigned domain by domain in ascending order.
pub fn gen_world(
    source_domain: &DomainSpec,
    domains: &[DomainSpec],
    split: &SplitSpec,
    sizes: WorldSizes,
    seed: u64,
) -> Result<World> {
    if domains.is_empty() {
        return Err(Error::InvalidInput("world needs at least one target domain".into()));
    }
    let (lo, hi) = split.images_per_client;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidInput(format!("images per client range [{lo}, {hi}] is infeasible")));
    }
    if split.clients_per_domain == 0 || sizes.source == 0 || sizes.test_per_domain == 0 {
        return Err(Error::InvalidInput("world needs clients, source and test images".into()));
    }
    source_domain.validate()?;
    for d in domains {
        d.validate()?;
        if d.classes() != source_domain.classes() || d.channels() != source_domain.channels() {
            return Err(Error::ShapeMismatch("domains disagree on classes or channels".into()));
        }
    }

    let labeled = |spec: &DomainSpec, domain: usize, kind: u64, i: usize| -> Result<LabeledImage> {
        let (image, labels) = gen_image(spec, split.image, seed::derive(seed, &[kind, domain as u64, i as u64]))?;
        Ok(LabeledImage { image, labels, domain })
    };

    let source = (0..sizes.source)
        .map(|i| labeled(source_domain, usize::MAX, KIND_SOURCE, i))
        .collect::<Result<Vec<_>>>()?;
    let source_holdout = (0..sizes.source_holdout)
        .map(|i| labeled(source_domain, usize::MAX, KIND_HOLDOUT, i))
        .collect::<Result<Vec<_>>>()?;

    let mut counts_rng = seed::rng(seed, &[KIND_COUNTS]);
    let mut clients = Vec::new();
    for (g, spec) in domains.iter().enumerate() {
        for _ in 0..split.clients_per_domain {
            let id = ClientId(clients.len() as u32);
            let count = counts_rng.random_range(lo..=hi);
            let images = (0..count)
                .map(|i| {
                    let s = seed::derive(seed, &[KIND_CLIENT, id.0 as u64, i as u64]);
                    gen_image(spec, split.image, s).map(|(img, _)| img)
                })
                .collect::<Result<Vec<_>>>()?;
            clients.push(ClientData { id, domain: g, images });
        }
    }

    let mut test = Vec::with_capacity(domains.len() * sizes.test_per_domain);
    for (g, spec) in domains.iter().enumerate() {
        for i in 0..sizes.test_per_domain {
            test.push(labeled(spec, g, KIND_TEST, i)?);
        }
    }
    Ok(World {
        source_domain: source_domain.clone(),
        domains: domains.to_vec(),
        source,
        source_holdout,
        clients,
        test,
    })
}

/// Everything needed to regenerate a world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub domains: DomainParams,
    pub split: SplitSpec,
    pub sizes: WorldSizes,
    pub palette: Vec<Vec<f64>>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            domains: DomainParams::default(),
            split: SplitSpec::default(),
            sizes: WorldSizes::default(),
            palette: default_palette(),
        }
    }
}

impl WorldSpec {
    pub fn build(&self, seed: u64) -> Result<World> {
        let domains = gen_domains(&self.domains, &self.palette, seed)?;
        let source = source_domain(self.palette.clone(), self.domains.noise_sigma);
        gen_world(&source, &domains, &self.split, self.sizes, seed)
    }
}

#[derive(Serialize)]
struct ManifestEntry {
    split: &'static str,
    index: usize,
    client: Option<u32>,
    domain: Option<usize>,
    image: String,
    labels: Option<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    image_encoding: &'static str,
    label_encoding: &'static str,
    source_domain: &'a DomainSpec,
    domains: &'a [DomainSpec],
    entries: Vec<ManifestEntry>,
}

/// Writes the world as flat binary files plus `manifest.json`.
///
/// Images are planar little-endian f64 (`[channel][row][col]`), labels are
/// one byte per pixel, row-major.
pub fn export_world(world: &World, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    let first = world
        .test
        .first()
        .ok_or_else(|| Error::InvalidInput("world has no test images".into()))?;
    let mut entries = Vec::new();
    let write_image = |name: &str, img: &ImageTensor| -> Result<String> {
        let rel = format!("images/{name}.f64");
        let bytes: Vec<u8> = img.values().iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.join(&rel), bytes)?;
        Ok(rel)
    };
    let write_labels = |name: &str, labels: &LabelMap| -> Result<String> {
        let rel = format!("labels/{name}.u8");
        std::fs::write(dir.join(&rel), labels.labels())?;
        Ok(rel)
    };
    for (split, set) in [("source", &world.source), ("source_holdout", &world.source_holdout), ("test", &world.test)] {
        for (i, li) in set.iter().enumerate() {
            let name = format!("{split}_{i:05}");
            entries.push(ManifestEntry {
                split,
                index: i,
                client: None,
                domain: (li.domain != usize::MAX).then_some(li.domain),
                image: write_image(&name, &li.image)?,
                labels: Some(write_labels(&name, &li.labels)?),
            });
        }
    }
    for client in &world.clients {
        for (i, img) in client.images.iter().enumerate() {
            let name = format!("client_{:04}_{i:03}", client.id.0);
            entries.push(ManifestEntry {
                split: "client",
                index: i,
                client: Some(client.id.0),
                domain: Some(client.domain),
                image: write_image(&name, img)?,
                labels: None,
            });
        }
    }
    let manifest = Manifest {
        format_version: 1,
        channels: first.image.channels(),
        height: first.image.height(),
        width: first.image.width(),
        classes: world.source_domain.classes(),
        image_encoding: "f64-le planar [channel][row][col]",
        label_encoding: "u8 row-major",
        source_domain: &world.source_domain,
        domains: &world.domains,
        entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}
