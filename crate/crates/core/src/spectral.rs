//! 2-D Fourier transforms and amplitude-window styles.
//!
//! Spectra are kept in centered layout: along an axis of length `n` the
//! zero-frequency bin sits at index `n / 2`, i.e. unshifted index `u` is stored
//! at `(u + n / 2) % n` (the same convention as numpy's `fftshift`). A style
//! of window `l` is the `l x l` block of amplitudes centered on that bin.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Largest imaginary part tolerated when returning to the pixel domain.
pub const IMAG_RESIDUE_TOL: f64 = 1e-8;

/// Amplitude and phase of a per-channel 2-D DFT, centered layout, planar.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    channels: usize,
    height: usize,
    width: usize,
    amplitude: Vec<f64>,
    phase: Vec<f64>,
}

impl Spectrum {
    pub fn from_parts(
        channels: usize,
        height: usize,
        width: usize,
        amplitude: Vec<f64>,
        phase: Vec<f64>,
    ) -> Result<Self> {
        let n = channels * height * width;
        if amplitude.len() != n || phase.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "spectrum {channels}x{height}x{width} needs {n} bins, got {} / {}",
                amplitude.len(),
                phase.len()
            )));
        }
        if amplitude.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidInput("amplitudes must be finite and non-negative".into()));
        }
        Ok(Self { channels, height, width, amplitude, phase })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn amplitude(&self) -> &[f64] {
        &self.amplitude
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    /// Amplitude at centered coordinates `(row, col)` of channel `c`.
    pub fn amplitude_at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.amplitude[(c * self.height + row) * self.width + col]
    }

    /// Mutable access to the amplitudes; phase stays untouched.
    pub fn amplitude_mut(&mut self) -> &mut [f64] {
        &mut self.amplitude
    }
}

struct Plans {
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
}

fn plans(height: usize, width: usize, inverse: bool) -> Plans {
    let mut planner = FftPlanner::new();
    if inverse {
        Plans { rows: planner.plan_fft_inverse(width), cols: planner.plan_fft_inverse(height) }
    } else {
        Plans { rows: planner.plan_fft_forward(width), cols: planner.plan_fft_forward(height) }
    }
}

/// In-place unnormalized 2-D transform of one row-major plane.
fn transform_plane(buf: &mut [Complex64], height: usize, width: usize, plans: &Plans) {
    for row in buf.chunks_exact_mut(width) {
        plans.rows.process(row);
    }
    let mut column = vec![Complex64::default(); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = buf[y * width + x];
        }
        plans.cols.process(&mut column);
        for y in 0..height {
            buf[y * width + x] = column[y];
        }
    }
}

#[inline]
fn shifted(u: usize, n: usize) -> usize {
    (u + n / 2) % n
}

/// Per-channel 2-D DFT of `img`, returned as centered amplitude and phase.
pub fn fft2(img: &ImageTensor) -> Result<Spectrum> {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    if h < 2 || w < 2 {
        return Err(Error::InvalidInput(format!("fft2 needs at least 2x2, got {h}x{w}")));
    }
    let plans = plans(h, w, false);
    let n = h * w;
    let mut amplitude = vec![0.0; ch * n];
    let mut phase = vec![0.0; ch * n];
    let mut buf = vec![Complex64::default(); n];
    for c in 0..ch {
        for (b, &v) in buf.iter_mut().zip(img.plane(c)) {
            *b = Complex64::new(v, 0.0);
        }
        transform_plane(&mut buf, h, w, &plans);
        for u in 0..h {
            for v in 0..w {
                let z = buf[u * w + v];
                let idx = c * n + shifted(u, h) * w + shifted(v, w);
                amplitude[idx] = z.norm();
                phase[idx] = z.arg();
            }
        }
    }
    Ok(Spectrum { channels: ch, height: h, width: w, amplitude, phase })
}

/// Inverse of [`fft2`]. Fails if the recombined spectrum is not the transform
/// of a real image (imaginary residue above [`IMAG_RESIDUE_TOL`]).
pub fn ifft2(spec: &Spectrum, clamp: bool) -> Result<ImageTensor> {
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let plans = plans(h, w, true);
    let n = h * w;
    let scale = 1.0 / n as f64;
    let mut values = Vec::with_capacity(ch * n);
    let mut buf = vec![Complex64::default(); n];
    let mut residue: f64 = 0.0;
    for c in 0..ch {
        for u in 0..h {
            for v in 0..w {
                let idx = c * n + shifted(u, h) * w + shifted(v, w);
                buf[u * w + v] = Complex64::from_polar(spec.amplitude[idx], spec.phase[idx]);
            }
        }
        transform_plane(&mut buf, h, w, &plans);
        for z in &buf {
            residue = residue.max((z.im * scale).abs());
            let mut v = z.re * scale;
            if clamp {
                v = v.clamp(0.0, 1.0);
            }
            values.push(v);
        }
    }
    if residue > IMAG_RESIDUE_TOL {
        return Err(Error::NonRealSpectrum(residue));
    }
    ImageTensor::new(ch, h, w, values)
}

/// Flattened centered amplitude window, channel-major then row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    channels: usize,
    window: usize,
    values: Vec<f64>,
}

impl Style {
    pub fn new(channels: usize, window: usize, values: Vec<f64>) -> Result<Self> {
        if window == 0 || window % 2 == 0 {
            return Err(Error::InvalidWindow { window, max: usize::MAX });
        }
        if values.len() != channels * window * window {
            return Err(Error::ShapeMismatch(format!(
                "style with {channels} channels and window {window} needs {} values, got {}",
                channels * window * window,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("style values must be finite and non-negative".into()));
        }
        Ok(Self { channels, window, values })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn distance(&self, other: &Style) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Header: `channels`, `window`, `flags` as little-endian u32; then the
    /// values as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.values.len());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.window as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Format("style record shorter than its header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (channels, window, flags) = (word(0), word(4), word(8));
        if flags != 0 {
            return Err(Error::Format(format!("unsupported style flags {flags:#x}")));
        }
        let payload = &bytes[12..];
        if payload.len() != 8 * channels * window * window {
            return Err(Error::Format(format!(
                "style payload has {} bytes, header implies {}",
                payload.len(),
                8 * channels * window * window
            )));
        }
        let values = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Style::new(channels, window, values)
    }
}

fn check_window(window: usize, height: usize, width: usize) -> Result<()> {
    let max = height.min(width);
    if window == 0 || window % 2 == 0 || window > max {
        return Err(Error::InvalidWindow { window, max });
    }
    Ok(())
}

/// Centered row/column ranges of an `l x l` window.
fn window_origin(window: usize, height: usize, width: usize) -> (usize, usize) {
    let half = window / 2;
    (height / 2 - half, width / 2 - half)
}

fn style_from_spectrum(spec: &Spectrum, window: usize) -> Result<Style> {
    check_window(window, spec.height, spec.width)?;
    let (r0, c0) = window_origin(window, spec.height, spec.width);
    let mut values = Vec::with_capacity(spec.channels * window * window);
    for c in 0..spec.channels {
        for r in 0..window {
            for k in 0..window {
                values.push(spec.amplitude_at(c, r0 + r, c0 + k));
            }
        }
    }
    Ok(Style { channels: spec.channels, window, values })
}

/// Extracts the centered `window x window` amplitude block of every channel.
pub fn extract_style(img: &ImageTensor, window: usize) -> Result<Style> {
    check_window(window, img.height(), img.width())?;
    style_from_spectrum(&fft2(img)?, window)
}

/// Element-wise mean of homogeneous styles.
pub fn mean_style(styles: &[Style]) -> Result<Style> {
    let first = styles
        .first()
        .ok_or_else(|| Error::InvalidInput("mean of an empty style list".into()))?;
    if let Some(bad) = styles
        .iter()
        .find(|s| s.channels != first.channels || s.window != first.window)
    {
        return Err(Error::ShapeMismatch(format!(
            "style {}x{}x{} does not match {}x{}x{}",
            bad.channels, bad.window, bad.window, first.channels, first.window, first.window
        )));
    }
    let mut sum = vec![0.0; first.values.len()];
    for s in styles {
        for (acc, v) in sum.iter_mut().zip(&s.values) {
            *acc += v;
        }
    }
    let n = styles.len() as f64;
    sum.iter_mut().for_each(|v| *v /= n);
    Ok(Style { channels: first.channels, window: first.window, values: sum })
}

/// Overwrites the centered amplitude window of `spec` with `style`.
pub fn swap_amplitude_window(spec: &mut Spectrum, style: &Style) -> Result<()> {
    if style.channels != spec.channels {
        return Err(Error::ShapeMismatch(format!(
            "style has {} channels, image has {}",
            style.channels, spec.channels
        )));
    }
    check_window(style.window, spec.height, spec.width)?;
    let (r0, c0) = window_origin(style.window, spec.height, spec.width);
    let l = style.window;
    let (h, w) = (spec.height, spec.width);
    for c in 0..spec.channels {
        for r in 0..l {
            for k in 0..l {
                spec.amplitude[(c * h + r0 + r) * w + c0 + k] = style.values[(c * l + r) * l + k];
            }
        }
    }
    Ok(())
}

/// Re-renders `img` with the low-frequency amplitudes of `style`, keeping
/// every phase and every amplitude outside the window.
pub fn apply_style(img: &ImageTensor, style: &Style) -> Result<ImageTensor> {
    let mut spec = fft2(img)?;
    swap_amplitude_window(&mut spec, style)?;
    ifft2(&spec, false)
}
