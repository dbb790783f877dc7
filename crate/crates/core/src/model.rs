//! Per-pixel segmentation network with hand-derived gradients.
//!
//! The network is `conv3x3 (same, zero pad) -> per-channel affine -> ReLU ->
//! 1x1 linear head`. Parameters live in three named groups:
//!
//! | group        | layout                                                        |
//! |--------------|---------------------------------------------------------------|
//! | `backbone`   | kernel `[hidden][in][3][3]` row-major, then bias `[hidden]`    |
//! | `norm`       | scale `[hidden]`, then shift `[hidden]`                       |
//! | `classifier` | weights `[classes][hidden]` row-major, then bias `[classes]`  |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap, IGNORE};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn new(in_channels: usize, hidden: usize, classes: usize) -> Result<Self> {
        if in_channels == 0 || hidden == 0 || classes < 2 {
            return Err(Error::InvalidInput(format!(
                "architecture needs channels, hidden >= 1 and classes >= 2, got {in_channels}/{hidden}/{classes}"
            )));
        }
        Ok(Self { in_channels, hidden, classes })
    }

    pub fn group_len(&self, group: Group) -> usize {
        match group {
            Group::Backbone => self.hidden * self.in_channels * 9 + self.hidden,
            Group::Norm => 2 * self.hidden,
            Group::Classifier => self.classes * self.hidden + self.classes,
        }
    }

    /// Tensor shapes inside a group, in storage order.
    pub fn group_shapes(&self, group: Group) -> Vec<Vec<usize>> {
        match group {
            Group::Backbone => vec![vec![self.hidden, self.in_channels, 3, 3], vec![self.hidden]],
            Group::Norm => vec![vec![self.hidden], vec![self.hidden]],
            Group::Classifier => vec![vec![self.classes, self.hidden], vec![self.classes]],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Norm,
    Classifier,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Backbone, Group::Norm, Group::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Norm => "norm",
            Group::Classifier => "classifier",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "backbone" => Ok(Group::Backbone),
            "norm" | "bn" => Ok(Group::Norm),
            "classifier" | "cls" => Ok(Group::Classifier),
            other => Err(Error::UnknownGroup(other.to_string())),
        }
    }
}

/// Set of group names selecting the cluster-specific parameters.
pub type GroupSet = BTreeSet<Group>;

/// Parses `none`, `all`, or a `+`/`,`-separated list of group names.
pub fn parse_group_set(s: &str) -> Result<GroupSet> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" | "none" => Ok(GroupSet::new()),
        "all" => Ok(Group::ALL.into_iter().collect()),
        list => list.split(['+', ',']).map(str::parse).collect(),
    }
}

pub fn format_group_set(set: &GroupSet) -> String {
    if set.is_empty() {
        "none".into()
    } else if set.len() == Group::ALL.len() {
        "all".into()
    } else {
        set.iter().map(|g| g.name()).collect::<Vec<_>>().join("+")
    }
}

/// Full parameter vector of the network, stored per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    arch: Architecture,
    backbone: Vec<f64>,
    norm: Vec<f64>,
    classifier: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            backbone: vec![0.0; arch.group_len(Group::Backbone)],
            norm: vec![0.0; arch.group_len(Group::Norm)],
            classifier: vec![0.0; arch.group_len(Group::Classifier)],
        }
    }

    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`;
    /// norm scale 1 and shift 0.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[seed::STREAM_INIT]);
        let mut p = Self::zeros(arch);
        let conv_bound = 1.0 / ((arch.in_channels * 9) as f64).sqrt();
        for w in &mut p.backbone {
            *w = rng.random_range(-conv_bound..conv_bound);
        }
        let head_bound = 1.0 / (arch.hidden as f64).sqrt();
        for w in &mut p.classifier {
            *w = rng.random_range(-head_bound..head_bound);
        }
        p.norm[..arch.hidden].fill(1.0);
        p
    }

    pub fn from_groups(
        arch: Architecture,
        backbone: Vec<f64>,
        norm: Vec<f64>,
        classifier: Vec<f64>,
    ) -> Result<Self> {
        let p = Self { arch, backbone, norm, classifier };
        for g in Group::ALL {
            if p.group(g).len() != arch.group_len(g) {
                return Err(Error::ShapeMismatch(format!(
                    "group {g} has {} values, architecture needs {}",
                    p.group(g).len(),
                    arch.group_len(g)
                )));
            }
        }
        Ok(p)
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn group(&self, g: Group) -> &[f64] {
        match g {
            Group::Backbone => &self.backbone,
            Group::Norm => &self.norm,
            Group::Classifier => &self.classifier,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut Vec<f64> {
        match g {
            Group::Backbone => &mut self.backbone,
            Group::Norm => &mut self.norm,
            Group::Classifier => &mut self.classifier,
        }
    }

    pub fn len(&self) -> usize {
        self.backbone.len() + self.norm.len() + self.classifier.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn locate(&self, i: usize) -> (Group, usize) {
        let mut i = i;
        for g in Group::ALL {
            let n = self.group(g).len();
            if i < n {
                return (g, i);
            }
            i -= n;
        }
        panic!("flat parameter index out of range");
    }

    /// Value at index `i` of the concatenation backbone ++ norm ++ classifier.
    pub fn get_flat(&self, i: usize) -> f64 {
        let (g, j) = self.locate(i);
        self.group(g)[j]
    }

    pub fn set_flat(&mut self, i: usize, v: f64) {
        let (g, j) = self.locate(i);
        self.group_mut(g)[j] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.backbone.iter().chain(&self.norm).chain(&self.classifier)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.backbone.iter_mut().chain(self.norm.iter_mut()).chain(self.classifier.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn conv_weight(&self, f: usize, c: usize, dy: usize, dx: usize) -> f64 {
        self.backbone[((f * self.arch.in_channels + c) * 3 + dy) * 3 + dx]
    }
}

/// A subset of parameter groups, e.g. the cluster-specific or global part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSlice {
    arch: Architecture,
    groups: BTreeMap<Group, Vec<f64>>,
}

impl ParamSlice {
    pub fn new(arch: Architecture, groups: BTreeMap<Group, Vec<f64>>) -> Result<Self> {
        for (g, v) in &groups {
            if v.len() != arch.group_len(*g) {
                return Err(Error::ShapeMismatch(format!("group {g} has wrong length {}", v.len())));
            }
        }
        Ok(Self { arch, groups })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn groups(&self) -> &BTreeMap<Group, Vec<f64>> {
        &self.groups
    }

    pub fn group(&self, g: Group) -> Option<&[f64]> {
        self.groups.get(&g).map(Vec::as_slice)
    }

    pub fn group_mut(&mut self, g: Group) -> Option<&mut Vec<f64>> {
        self.groups.get_mut(&g)
    }

    pub fn names(&self) -> GroupSet {
        self.groups.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Splits `params` into `(theta, phi)`: theta holds the groups in
/// `cluster_groups`, phi the rest.
pub fn split_params(params: &ParamSet, cluster_groups: &GroupSet) -> (ParamSlice, ParamSlice) {
    let mut theta = BTreeMap::new();
    let mut phi = BTreeMap::new();
    for g in Group::ALL {
        let target = if cluster_groups.contains(&g) { &mut theta } else { &mut phi };
        target.insert(g, params.group(g).to_vec());
    }
    (
        ParamSlice { arch: params.arch, groups: theta },
        ParamSlice { arch: params.arch, groups: phi },
    )
}

/// Like [`split_params`] but takes group names as strings.
pub fn split_params_named(params: &ParamSet, names: &[&str]) -> Result<(ParamSlice, ParamSlice)> {
    let set = names.iter().map(|n| n.parse()).collect::<Result<GroupSet>>()?;
    Ok(split_params(params, &set))
}

/// Reassembles a full parameter set from two disjoint slices.
pub fn merge(theta: &ParamSlice, phi: &ParamSlice) -> Result<ParamSet> {
    if theta.arch != phi.arch {
        return Err(Error::ShapeMismatch("slices come from different architectures".into()));
    }
    let mut out = ParamSet::zeros(theta.arch);
    for g in Group::ALL {
        let v = match (theta.groups.get(&g), phi.groups.get(&g)) {
            (Some(v), None) | (None, Some(v)) => v,
            (Some(_), Some(_)) => {
                return Err(Error::InvalidInput(format!("group {g} present in both slices")))
            }
            (None, None) => return Err(Error::InvalidInput(format!("group {g} missing"))),
        };
        out.group_mut(g).clone_from(v);
    }
    Ok(out)
}

/// Per-pixel class scores, planar `[class][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    height: usize,
    width: usize,
    classes: usize,
    values: Vec<f64>,
}

impl Logits {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidInput("logits need at least two classes".into()));
        }
        if values.len() != height * width * classes {
            return Err(Error::ShapeMismatch(format!(
                "logits {height}x{width}x{classes} need {} values, got {}",
                height * width * classes,
                values.len()
            )));
        }
        Ok(Self { height, width, classes, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, q: usize, pixel: usize) -> f64 {
        self.values[q * self.pixels() + pixel]
    }

    /// Softmax of one pixel written into `out`.
    pub fn softmax_at(&self, pixel: usize, out: &mut [f64]) {
        let n = self.pixels();
        let mut max = f64::NEG_INFINITY;
        for q in 0..self.classes {
            max = max.max(self.values[q * n + pixel]);
        }
        let mut sum = 0.0;
        for q in 0..self.classes {
            let e = (self.values[q * n + pixel] - max).exp();
            out[q] = e;
            sum += e;
        }
        out.iter_mut().for_each(|v| *v /= sum);
    }

    /// Class probabilities, same planar layout.
    pub fn softmax(&self) -> Vec<f64> {
        let n = self.pixels();
        let mut out = vec![0.0; self.values.len()];
        let mut buf = vec![0.0; self.classes];
        for p in 0..n {
            self.softmax_at(p, &mut buf);
            for q in 0..self.classes {
                out[q * n + p] = buf[q];
            }
        }
        out
    }

    /// Arg-max class per pixel (ties to the smaller class).
    pub fn argmax(&self) -> LabelMap {
        let n = self.pixels();
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for q in 1..self.classes {
                    if self.values[q * n + p] > self.values[best * n + p] {
                        best = q;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(self.height, self.width, labels).expect("shape is consistent")
    }

    fn same_shape(&self, other: &Logits) -> bool {
        self.height == other.height && self.width == other.width && self.classes == other.classes
    }
}

/// Intermediate tensors of one forward pass, planar `[hidden][y][x]`.
struct Activations {
    conv: Vec<f64>,
    hidden: Vec<f64>,
    logits: Logits,
}

fn check_image(params: &ParamSet, img: &ImageTensor) -> Result<()> {
    if img.channels() != params.arch.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "image has {} channels, model expects {}",
            img.channels(),
            params.arch.in_channels
        )));
    }
    Ok(())
}

fn forward_full(params: &ParamSet, img: &ImageTensor) -> Result<Activations> {
    check_image(params, img)?;
    let arch = params.arch;
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let conv_bias = &params.backbone[arch.hidden * arch.in_channels * 9..];
    let mut conv = vec![0.0; arch.hidden * n];
    for f in 0..arch.hidden {
        let out = &mut conv[f * n..(f + 1) * n];
        out.fill(conv_bias[f]);
        for c in 0..arch.in_channels {
            let plane = img.plane(c);
            for dy in 0..3 {
                for dx in 0..3 {
                    let k = params.conv_weight(f, c, dy, dx);
                    if k == 0.0 {
                        continue;
                    }
                    // Output pixel (y, x) reads input (y + dy - 1, x + dx - 1).
                    let y_lo = if dy == 0 { 1 } else { 0 };
                    let y_hi = if dy == 2 { h - 1 } else { h };
                    let x_lo = if dx == 0 { 1 } else { 0 };
                    let x_hi = if dx == 2 { w - 1 } else { w };
                    for y in y_lo..y_hi {
                        let src = &plane[(y + dy - 1) * w..];
                        let dst = &mut out[y * w..];
                        for x in x_lo..x_hi {
                            dst[x] += k * src[x + dx - 1];
                        }
                    }
                }
            }
        }
    }
    let (scale, shift) = params.norm.split_at(arch.hidden);
    let mut hidden = vec![0.0; arch.hidden * n];
    for f in 0..arch.hidden {
        for p in 0..n {
            hidden[f * n + p] = (scale[f] * conv[f * n + p] + shift[f]).max(0.0);
        }
    }
    let head_w = &params.classifier[..arch.classes * arch.hidden];
    let head_b = &params.classifier[arch.classes * arch.hidden..];
    let mut logits = vec![0.0; arch.classes * n];
    for q in 0..arch.classes {
        let out = &mut logits[q * n..(q + 1) * n];
        out.fill(head_b[q]);
        for f in 0..arch.hidden {
            let wq = head_w[q * arch.hidden + f];
            if wq == 0.0 {
                continue;
            }
            for (o, hv) in out.iter_mut().zip(&hidden[f * n..(f + 1) * n]) {
                *o += wq * hv;
            }
        }
    }
    Ok(Activations { conv, hidden, logits: Logits::new(h, w, arch.classes, logits)? })
}

pub fn forward(params: &ParamSet, img: &ImageTensor) -> Result<Logits> {
    Ok(forward_full(params, img)?.logits)
}

/// Back-propagates `dlogits` (planar like the logits) to every group.
fn backward(params: &ParamSet, img: &ImageTensor, act: &Activations, dlogits: &[f64]) -> ParamSet {
    let arch = params.arch;
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let mut grad = ParamSet::zeros(arch);

    let head_w = &params.classifier[..arch.classes * arch.hidden];
    {
        let (gw, gb) = grad.classifier.split_at_mut(arch.classes * arch.hidden);
        for q in 0..arch.classes {
            let d = &dlogits[q * n..(q + 1) * n];
            gb[q] = d.iter().sum();
            for f in 0..arch.hidden {
                gw[q * arch.hidden + f] =
                    d.iter().zip(&act.hidden[f * n..(f + 1) * n]).map(|(a, b)| a * b).sum();
            }
        }
    }

    let (scale, _) = params.norm.split_at(arch.hidden);
    let mut dconv = vec![0.0; arch.hidden * n];
    {
        let (gscale, gshift) = grad.norm.split_at_mut(arch.hidden);
        for f in 0..arch.hidden {
            let (mut gs, mut gt) = (0.0, 0.0);
            for p in 0..n {
                if act.hidden[f * n + p] <= 0.0 {
                    continue;
                }
                let mut dh = 0.0;
                for q in 0..arch.classes {
                    dh += head_w[q * arch.hidden + f] * dlogits[q * n + p];
                }
                gs += dh * act.conv[f * n + p];
                gt += dh;
                dconv[f * n + p] = dh * scale[f];
            }
            gscale[f] = gs;
            gshift[f] = gt;
        }
    }

    let (gk, gb) = grad.backbone.split_at_mut(arch.hidden * arch.in_channels * 9);
    for f in 0..arch.hidden {
        let d = &dconv[f * n..(f + 1) * n];
        gb[f] = d.iter().sum();
        for c in 0..arch.in_channels {
            let plane = img.plane(c);
            for dy in 0..3 {
                for dx in 0..3 {
                    let y_lo = if dy == 0 { 1 } else { 0 };
                    let y_hi = if dy == 2 { h - 1 } else { h };
                    let x_lo = if dx == 0 { 1 } else { 0 };
                    let x_hi = if dx == 2 { w - 1 } else { w };
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let src = &plane[(y + dy - 1) * w..];
                        let dr = &d[y * w..];
                        for x in x_lo..x_hi {
                            acc += dr[x] * src[x + dx - 1];
                        }
                    }
                    gk[((f * arch.in_channels + c) * 3 + dy) * 3 + dx] = acc;
                }
            }
        }
    }
    grad
}

/// Adds the pixel-mean cross-entropy gradient w.r.t. logits into `dlogits`,
/// scaled by `weight`; returns the unweighted loss.
fn ce_terms(logits: &Logits, labels: &LabelMap, weight: f64, dlogits: &mut [f64]) -> f64 {
    let n = logits.pixels();
    let valid = labels.labels().iter().filter(|&&l| l != IGNORE).count();
    if valid == 0 {
        return 0.0;
    }
    let inv = 1.0 / valid as f64;
    let mut probs = vec![0.0; logits.classes];
    let mut loss = 0.0;
    for (p, &l) in labels.labels().iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        logits.softmax_at(p, &mut probs);
        loss -= probs[l as usize].ln();
        for q in 0..logits.classes {
            let target = if q == l as usize { 1.0 } else { 0.0 };
            dlogits[q * n + p] += weight * inv * (probs[q] - target);
        }
    }
    loss * inv
}

/// Adds the pixel-mean soft cross-entropy gradient; returns the loss.
fn kd_terms(logits: &Logits, teacher_probs: &[f64], weight: f64, dlogits: &mut [f64]) -> f64 {
    let n = logits.pixels();
    let inv = 1.0 / n as f64;
    let mut probs = vec![0.0; logits.classes];
    let mut loss = 0.0;
    for p in 0..n {
        logits.softmax_at(p, &mut probs);
        for q in 0..logits.classes {
            let t = teacher_probs[q * n + p];
            if t > 0.0 {
                loss -= t * probs[q].ln();
            }
            dlogits[q * n + p] += weight * inv * (probs[q] - t);
        }
    }
    loss * inv
}

fn check_labels(img: &ImageTensor, labels: &LabelMap, classes: usize) -> Result<()> {
    if labels.height() != img.height() || labels.width() != img.width() {
        return Err(Error::ShapeMismatch(format!(
            "labels are {}x{}, image is {}x{}",
            labels.height(),
            labels.width(),
            img.height(),
            img.width()
        )));
    }
    if let Some(&l) = labels.labels().iter().find(|&&l| l != IGNORE && l as usize >= classes) {
        return Err(Error::InvalidInput(format!("label {l} out of range for {classes} classes")));
    }
    Ok(())
}

/// Softmax cross-entropy averaged over non-ignored pixels, with its gradient.
/// An all-ignored map yields zero loss and zero gradient.
pub fn ce_loss_grad(params: &ParamSet, img: &ImageTensor, labels: &LabelMap) -> Result<(f64, ParamSet)> {
    check_labels(img, labels, params.arch.classes)?;
    let act = forward_full(params, img)?;
    let mut d = vec![0.0; act.logits.values.len()];
    let loss = ce_terms(&act.logits, labels, 1.0, &mut d);
    Ok((loss, backward(params, img, &act, &d)))
}

/// Cross-entropy from the teacher's softmax (temperature 1) to the student's,
/// averaged over all pixels.
pub fn kd_loss_grad(params: &ParamSet, img: &ImageTensor, teacher: &Logits) -> Result<(f64, ParamSet)> {
    let act = forward_full(params, img)?;
    if !act.logits.same_shape(teacher) {
        return Err(Error::ShapeMismatch("teacher logits differ in shape from student".into()));
    }
    let mut d = vec![0.0; act.logits.values.len()];
    let loss = kd_terms(&act.logits, &teacher.softmax(), 1.0, &mut d);
    Ok((loss, backward(params, img, &act, &d)))
}

/// Loss terms of one local step.
#[derive(Clone, Debug)]
pub struct LocalLoss {
    pub pseudo: f64,
    pub kd: f64,
    pub total: f64,
    pub grad: ParamSet,
}

/// `L = L_pseudo + lambda_kd * L_kd` with one shared forward/backward pass.
/// Either term may be absent. `kd_probs` are the distillation targets as
/// probabilities in logits layout.
pub fn local_loss_grad(
    params: &ParamSet,
    img: &ImageTensor,
    pseudo: Option<&LabelMap>,
    kd_probs: Option<&[f64]>,
    lambda_kd: f64,
) -> Result<LocalLoss> {
    if let Some(labels) = pseudo {
        check_labels(img, labels, params.arch.classes)?;
    }
    let act = forward_full(params, img)?;
    let mut d = vec![0.0; act.logits.values.len()];
    let pseudo_loss = pseudo.map_or(0.0, |l| ce_terms(&act.logits, l, 1.0, &mut d));
    let kd_loss = match kd_probs {
        Some(t) if t.len() == d.len() => kd_terms(&act.logits, t, lambda_kd, &mut d),
        Some(_) => return Err(Error::ShapeMismatch("distillation target has wrong size".into())),
        None => 0.0,
    };
    Ok(LocalLoss {
        pseudo: pseudo_loss,
        kd: kd_loss,
        total: pseudo_loss + lambda_kd * kd_loss,
        grad: backward(params, img, &act, &d),
    })
}

/// Linear-interpolated quantile of ascending-sorted values, `p` in `[0, 1]`.
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Hard pseudo-labels from teacher logits.
///
/// Each class `q` gets a threshold `min(conf_threshold, quantile_{1 -
/// class_fraction})` of the max-probabilities of pixels whose arg-max is `q`;
/// a pixel keeps its arg-max label iff its max-probability reaches the
/// threshold of that class, otherwise it is `IGNORE`.
pub fn pseudo_label(teacher: &Logits, conf_threshold: f64, class_fraction: f64) -> Result<LabelMap> {
    if !(conf_threshold > 0.0 && conf_threshold < 1.0) {
        return Err(Error::InvalidInput(format!("confidence threshold {conf_threshold} not in (0, 1)")));
    }
    if !(class_fraction > 0.0 && class_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("class fraction {class_fraction} not in (0, 1]")));
    }
    let n = teacher.pixels();
    let mut probs = vec![0.0; teacher.classes];
    let mut best = Vec::with_capacity(n);
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); teacher.classes];
    for p in 0..n {
        teacher.softmax_at(p, &mut probs);
        let mut q_best = 0;
        for q in 1..teacher.classes {
            if probs[q] > probs[q_best] {
                q_best = q;
            }
        }
        best.push((q_best, probs[q_best]));
        per_class[q_best].push(probs[q_best]);
    }
    let thresholds: Vec<f64> = per_class
        .iter_mut()
        .map(|v| {
            if v.is_empty() {
                return conf_threshold;
            }
            v.sort_by(f64::total_cmp);
            conf_threshold.min(sorted_quantile(v, 1.0 - class_fraction))
        })
        .collect();
    let labels = best
        .iter()
        .map(|&(q, conf)| if conf >= thresholds[q] { q as u8 } else { IGNORE })
        .collect();
    LabelMap::new(teacher.height, teacher.width, labels)
}

pub const MOMENTUM: f64 = 0.9;

/// SGD with heavy-ball momentum: `v <- mu * v + g; p <- p - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub velocity: ParamSet,
}

impl Sgd {
    pub fn new(arch: Architecture) -> Self {
        Self { momentum: MOMENTUM, velocity: ParamSet::zeros(arch) }
    }

    pub fn step(&mut self, params: &mut ParamSet, grad: &ParamSet, lr: f64) {
        for ((v, g), p) in self.velocity.iter_mut().zip(grad.iter()).zip(params.iter_mut()) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// One momentum step on fresh copies; the functional form of [`Sgd::step`].
pub fn sgd_step(params: &ParamSet, velocity: &ParamSet, grad: &ParamSet, lr: f64) -> (ParamSet, ParamSet) {
    let mut opt = Sgd { momentum: MOMENTUM, velocity: velocity.clone() };
    let mut p = params.clone();
    opt.step(&mut p, grad, lr);
    (p, opt.velocity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> Architecture {
        Architecture::new(3, 4, 4).unwrap()
    }

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(3, h, w, |_, _, _| rng.random::<f64>()).unwrap()
    }

    /// Direct nested-loop evaluation of the network.
    fn reference_forward(p: &ParamSet, img: &ImageTensor) -> Vec<f64> {
        let a = p.arch();
        let (h, w) = (img.height() as isize, img.width() as isize);
        let n = (h * w) as usize;
        let mut out = vec![0.0; a.classes * n];
        for y in 0..h {
            for x in 0..w {
                let mut hidden = vec![0.0; a.hidden];
                for (f, hv) in hidden.iter_mut().enumerate() {
                    let mut s = p.group(Group::Backbone)[a.hidden * a.in_channels * 9 + f];
                    for c in 0..a.in_channels {
                        for dy in 0..3isize {
                            for dx in 0..3isize {
                                let (yy, xx) = (y + dy - 1, x + dx - 1);
                                if yy < 0 || xx < 0 || yy >= h || xx >= w {
                                    continue;
                                }
                                let k = p.group(Group::Backbone)
                                    [((f * a.in_channels + c) * 3 + dy as usize) * 3 + dx as usize];
                                s += k * img.get(c, yy as usize, xx as usize);
                            }
                        }
                    }
                    let z = p.group(Group::Norm)[f] * s + p.group(Group::Norm)[a.hidden + f];
                    *hv = if z > 0.0 { z } else { 0.0 };
                }
                for q in 0..a.classes {
                    let mut s = p.group(Group::Classifier)[a.classes * a.hidden + q];
                    for (f, hv) in hidden.iter().enumerate() {
                        s += p.group(Group::Classifier)[q * a.hidden + f] * hv;
                    }
                    out[q * n + (y * w + x) as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let img = random_image(1, 5, 6);
        let l = forward(&ParamSet::zeros(arch()), &img).unwrap();
        assert!(l.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_only_head() {
        let mut p = ParamSet::init(arch(), 3);
        let cls = p.group_mut(Group::Classifier);
        let bias = [0.5, -1.0, 2.0, 0.25];
        cls.fill(0.0);
        cls[16..].copy_from_slice(&bias);
        let l = forward(&p, &random_image(2, 4, 4)).unwrap();
        for q in 0..4 {
            for px in 0..16 {
                assert_eq!(l.get(q, px), bias[q]);
            }
        }
    }

    #[test]
    fn forward_matches_naive_loops() {
        for seed in 0..3 {
            let mut p = ParamSet::init(arch(), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for v in p.group_mut(Group::Norm) {
                *v = rng.random_range(-1.0..1.5);
            }
            let img = random_image(seed, 7, 5);
            let fast = forward(&p, &img).unwrap();
            let slow = reference_forward(&p, &img);
            for (a, b) in fast.values().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn channel_mismatch() {
        let img = ImageTensor::zeros(1, 4, 4).unwrap();
        assert!(matches!(forward(&ParamSet::zeros(arch()), &img), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn uniform_logits_give_ln_q() {
        let img = random_image(4, 4, 4);
        let labels = LabelMap::new(4, 4, (0..16).map(|i| (i % 4) as u8).collect()).unwrap();
        let (loss, _) = ce_loss_grad(&ParamSet::zeros(arch()), &img, &labels).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn peaked_correct_logits_have_vanishing_loss() {
        let mut p = ParamSet::zeros(arch());
        p.group_mut(Group::Classifier)[16 + 2] = 60.0;
        let img = random_image(5, 4, 4);
        let (loss, _) = ce_loss_grad(&p, &img, &LabelMap::filled(4, 4, 2)).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn all_ignored_is_zero() {
        let p = ParamSet::init(arch(), 0);
        let (loss, grad) = ce_loss_grad(&p, &random_image(0, 4, 4), &LabelMap::filled(4, 4, IGNORE)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_teacher_bounds_kd() {
        let img = random_image(6, 4, 4);
        let teacher = Logits::new(4, 4, 4, vec![0.0; 64]).unwrap();
        let (at_uniform, _) = kd_loss_grad(&ParamSet::zeros(arch()), &img, &teacher).unwrap();
        assert!((at_uniform - 4f64.ln()).abs() < 1e-12);
        let (other, _) = kd_loss_grad(&ParamSet::init(arch(), 1), &img, &teacher).unwrap();
        assert!(other > 4f64.ln());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = forward(&ParamSet::init(arch(), 9), &random_image(9, 6, 6)).unwrap();
        let probs = l.softmax();
        for p in 0..36 {
            let s: f64 = (0..4).map(|q| probs[q * 36 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_label_without_gates_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Logits::new(4, 4, 3, (0..48).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let pl = pseudo_label(&l, 1e-9, 1.0).unwrap();
        assert_eq!(pl, l.argmax());
    }

    #[test]
    fn low_confidence_pixel_ignored() {
        // Pixel 0: max prob 0.5; the other pixels of class 0 are confident.
        let n = 4;
        let mut values = vec![0.0; 2 * n];
        values[0] = 0.0; // class 0, pixel 0
        values[n] = 0.0; // class 1, pixel 0 -> tie -> argmax 0 with p = 0.5
        for p in 1..n {
            values[p] = 5.0;
        }
        let l = Logits::new(2, 2, 2, values).unwrap();
        let pl = pseudo_label(&l, 0.9, 0.66).unwrap();
        assert_eq!(pl.labels()[0], IGNORE);
        assert!(pl.labels()[1..].iter().all(|&v| v == 0));
    }

    #[test]
    fn pseudo_label_rejects_bad_thresholds() {
        let l = Logits::new(2, 2, 2, vec![0.0; 8]).unwrap();
        assert!(pseudo_label(&l, 0.0, 0.5).is_err());
        assert!(pseudo_label(&l, 0.5, 0.0).is_err());
        assert!(pseudo_label(&l, 0.5, 1.5).is_err());
    }

    #[test]
    fn sgd_cases() {
        let a = arch();
        let p = ParamSet::init(a, 2);
        let zero = ParamSet::zeros(a);
        let (same, _) = sgd_step(&p, &zero, &zero, 0.1);
        assert_eq!(same, p);

        let g = ParamSet::init(a, 3);
        let (stepped, v) = sgd_step(&p, &zero, &g, 0.1);
        assert_eq!(v, g);
        let mut expected = p.clone();
        expected.axpy(-0.1, &g);
        assert!(stepped.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn sgd_three_steps_unrolled() {
        let a = arch();
        let p0 = ParamSet::init(a, 4);
        let grads: Vec<ParamSet> = (10..13).map(|s| ParamSet::init(a, s)).collect();
        let lr = 0.05;
        let mut opt = Sgd::new(a);
        let mut p = p0.clone();
        for g in &grads {
            opt.step(&mut p, g, lr);
        }
        // v1 = g1; v2 = 0.9 g1 + g2; v3 = 0.81 g1 + 0.9 g2 + g3
        for i in 0..p0.len() {
            let (g1, g2, g3) = (grads[0].get_flat(i), grads[1].get_flat(i), grads[2].get_flat(i));
            let expected = p0.get_flat(i) - lr * (g1 + (0.9 * g1 + g2) + (0.81 * g1 + 0.9 * g2 + g3));
            assert!((p.get_flat(i) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn split_cases() {
        let p = ParamSet::init(arch(), 5);
        let (theta, phi) = split_params(&p, &GroupSet::new());
        assert!(theta.is_empty());
        assert_eq!(phi.names().len(), 3);
        assert_eq!(merge(&theta, &phi).unwrap(), p);

        let (theta, phi) = split_params_named(&p, &["classifier"]).unwrap();
        assert_eq!(theta.names(), [Group::Classifier].into_iter().collect());
        assert_eq!(phi.names(), [Group::Backbone, Group::Norm].into_iter().collect());
        assert_eq!(merge(&theta, &phi).unwrap(), p);

        assert!(matches!(split_params_named(&p, &["head"]), Err(Error::UnknownGroup(_))));
        assert!(merge(&phi, &phi).is_err());
    }

    #[test]
    fn group_set_parsing() {
        assert!(parse_group_set("none").unwrap().is_empty());
        assert_eq!(parse_group_set("all").unwrap().len(), 3);
        assert_eq!(parse_group_set("bn").unwrap(), [Group::Norm].into_iter().collect());
        assert_eq!(parse_group_set("cls+backbone").unwrap().len(), 2);
        assert!(parse_group_set("heads").is_err());
        for s in ["none", "all", "norm", "backbone+classifier"] {
            assert_eq!(format_group_set(&parse_group_set(s).unwrap()), s);
        }
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 4.0, 8.0];
        assert_eq!(sorted_quantile(&v, 0.0), 1.0);
        assert_eq!(sorted_quantile(&v, 1.0), 8.0);
        assert!((sorted_quantile(&v, 0.5) - 3.0).abs() < 1e-15);
    }
}
