//! Federated adaptation: server pre-training with pooled client styles,
//! style clustering, local self-training with cluster teachers and
//! distillation, clustered layer-aware aggregation and teacher averaging.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClientId, ClusterPartition, SelectionParams, StylePoint};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap};
use crate::metrics::{mean_std, ConfusionMatrix};
use crate::model::{
    self, format_group_set, merge, split_params, Architecture, Group, GroupSet, ParamSet, ParamSlice, Sgd,
};
use crate::seed;
use crate::spectral::{self, Style};
use crate::synthdata::{ClientData, LabeledImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Fixed,
    /// `lr * (1 + t)^(-exponent)` at round `t`.
    PowerLaw { exponent: f64 },
}

impl LrSchedule {
    pub fn at(&self, base: f64, round: usize) -> f64 {
        match *self {
            LrSchedule::Fixed => base,
            LrSchedule::PowerLaw { exponent } => base * (1.0 + round as f64).powf(-exponent),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub local_batch: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Weight of the distillation term; 0 disables distillation.
    pub lambda_kd: f64,
    pub self_training: bool,
    pub conf_threshold: f64,
    pub class_fraction: f64,
    /// Teacher refresh period, in rounds.
    pub teacher_period: usize,
    /// First round of teacher weight averaging; `>= rounds` disables it.
    pub swat_start: usize,
    pub cluster_groups: GroupSet,
    /// Cluster clients by style; otherwise a single cluster is used.
    pub clustering: bool,
    /// Cluster-count search; `None` uses the defaults for the client count.
    pub selection: Option<SelectionParams>,
    pub style_window: usize,
    /// Stylize source images with the pooled client styles during pre-training.
    pub style_pool: bool,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    /// Probability of leaving a pre-training image unstylized.
    pub p_plain: f64,
    pub hidden: usize,
    /// Stamp wall-clock durations into round records (breaks byte-level
    /// reproducibility of the record stream).
    pub record_wallclock: bool,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 40,
            clients_per_round: 4,
            local_epochs: 1,
            local_batch: 2,
            lr: 0.05,
            lr_schedule: LrSchedule::Fixed,
            lambda_kd: 1.0,
            self_training: true,
            conf_threshold: 0.9,
            class_fraction: 0.66,
            teacher_period: 1,
            swat_start: 10,
            cluster_groups: Group::ALL.into_iter().collect(),
            clustering: true,
            selection: None,
            style_window: 3,
            style_pool: true,
            pretrain_steps: 300,
            pretrain_batch: 4,
            pretrain_lr: 0.05,
            p_plain: 0.2,
            hidden: 8,
            record_wallclock: false,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self, clients: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.teacher_period == 0 {
            return fail("teacher_period must be at least 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > clients {
            return fail(format!("clients_per_round {} must be in 1..={clients}", self.clients_per_round));
        }
        if self.local_batch == 0 || self.pretrain_batch == 0 {
            return fail("batch sizes must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.pretrain_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(self.lambda_kd >= 0.0) {
            return fail("lambda_kd must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.p_plain) {
            return fail("p_plain must lie in [0, 1]".into());
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold < 1.0) {
            return fail("conf_threshold must lie in (0, 1)".into());
        }
        if !(self.class_fraction > 0.0 && self.class_fraction <= 1.0) {
            return fail("class_fraction must lie in (0, 1]".into());
        }
        if self.style_window % 2 == 0 {
            return fail(format!("style_window {} must be odd", self.style_window));
        }
        if self.hidden == 0 {
            return fail("hidden must be at least 1".into());
        }
        Ok(())
    }
}

/// Labeled server-side data. Every image read is counted so tests can check
/// that nothing touches the source after pre-training.
pub struct SourceData {
    images: Vec<LabeledImage>,
    reads: Arc<AtomicUsize>,
}

impl SourceData {
    pub fn new(images: Vec<LabeledImage>) -> Self {
        Self { images, reads: Arc::new(AtomicUsize::new(0)) }
    }

    pub fn read_counter(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.reads)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> &LabeledImage {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.images[i]
    }
}

/// Client-to-server payloads. Nothing else leaves a client.
#[derive(Clone, Debug)]
pub enum ClientMessage {
    MeanStyle { client: ClientId, style: Style },
    Update { client: ClientId, update: ClientUpdate },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    MeanStyle,
    Update,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub client: ClientId,
    pub kind: MessageKind,
    /// Number of reals carried.
    pub payload_len: usize,
}

/// Server-side receiving end; keeps a log of every message it saw.
#[derive(Default, Debug)]
pub struct Inbox {
    pub log: Vec<MessageRecord>,
}

impl Inbox {
    fn receive(&mut self, msg: &ClientMessage) {
        let (client, kind, payload_len) = match msg {
            ClientMessage::MeanStyle { client, style } => (*client, MessageKind::MeanStyle, style.len()),
            ClientMessage::Update { client, update } => (*client, MessageKind::Update, update.params.len()),
        };
        self.log.push(MessageRecord { client, kind, payload_len });
    }
}

/// Mean style of a client's images.
pub fn client_mean_style(images: &[ImageTensor], window: usize) -> Result<Style> {
    let styles = images
        .iter()
        .map(|img| spectral::extract_style(img, window))
        .collect::<Result<Vec<_>>>()?;
    spectral::mean_style(&styles)
}

fn batch_grad(
    params: &ParamSet,
    batch: impl Iterator<Item = Result<(f64, ParamSet)>>,
) -> Result<(f64, ParamSet, usize)> {
    let mut grad = ParamSet::zeros(params.arch());
    let mut loss = 0.0;
    let mut n = 0;
    for item in batch {
        let (l, g) = item?;
        grad.axpy(1.0, &g);
        loss += l;
        n += 1;
    }
    if n > 1 {
        grad.scale(1.0 / n as f64);
        loss /= n as f64;
    }
    Ok((loss, grad, n))
}

/// Supervised pre-training on the source, each image stylized with a style
/// drawn uniformly from `pool` unless a `p_plain` coin leaves it plain.
///
/// Takes the source by value: it is dropped when pre-training ends.
pub fn server_pretrain(source: SourceData, pool: &[Style], arch: Architecture, cfg: &FederationConfig) -> Result<ParamSet> {
    if source.is_empty() {
        return Err(Error::InvalidInput("pre-training needs source images".into()));
    }
    if pool.is_empty() && cfg.style_pool {
        warn!("style pool is empty; pre-training on plain source images");
    }
    let mut params = ParamSet::init(arch, cfg.seed);
    let mut opt = Sgd::new(arch);
    // Image order and stylization draw from separate streams so that the
    // sequence of source images does not depend on the pool.
    let mut order_rng = seed::rng(cfg.seed, &[seed::STREAM_PRETRAIN, 0]);
    let mut style_rng = seed::rng(cfg.seed, &[seed::STREAM_PRETRAIN, 1]);
    for step in 0..cfg.pretrain_steps {
        let picks: Vec<(usize, f64, usize)> = (0..cfg.pretrain_batch)
            .map(|_| {
                let i = order_rng.random_range(0..source.len());
                let coin: f64 = style_rng.random();
                let s = style_rng.random_range(0..pool.len().max(1));
                (i, coin, s)
            })
            .collect();
        let items = picks.iter().map(|&(i, coin, s)| {
            let item = source.get(i);
            let stylized;
            let img = if !pool.is_empty() && coin >= cfg.p_plain {
                stylized = spectral::apply_style(&item.image, &pool[s])?;
                &stylized
            } else {
                &item.image
            };
            model::ce_loss_grad(&params, img, &item.labels)
        });
        let (loss, grad, _) = batch_grad(&params, items)?;
        opt.step(&mut params, &grad, cfg.pretrain_lr);
        if step % 100 == 0 {
            debug!("pretrain step {step}: loss {loss:.4}");
        }
    }
    Ok(params)
}

/// Result of one client's local training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub params: ParamSet,
    pub n_samples: usize,
    pub mean_loss_pseudo: f64,
    pub mean_loss_kd: f64,
    /// Fraction of pixels the pseudo-labeling gate rejected.
    pub ignored_fraction: f64,
}

/// Local adaptation: `local_epochs` passes of SGD on
/// `L_pseudo(teacher) + lambda_kd * L_kd(pretrained)`.
pub fn client_update(
    start: &ParamSet,
    teacher: &ParamSet,
    pretrained: &ParamSet,
    data: &[ImageTensor],
    cfg: &FederationConfig,
    lr: f64,
    seed: u64,
) -> Result<ClientUpdate> {
    if data.is_empty() {
        return Err(Error::InvalidInput("client has no images".into()));
    }
    let mut params = start.clone();
    let use_kd = cfg.lambda_kd > 0.0;
    let mut pseudo: Vec<Option<LabelMap>> = vec![None; data.len()];
    let mut ignored = 0usize;
    if cfg.self_training {
        for (slot, img) in pseudo.iter_mut().zip(data) {
            let labels = model::pseudo_label(&model::forward(teacher, img)?, cfg.conf_threshold, cfg.class_fraction)?;
            ignored += labels.ignored();
            *slot = Some(labels);
        }
        if ignored == data.iter().map(ImageTensor::pixels).sum::<usize>() {
            info!("every pseudo-label was rejected; distillation-only update");
            pseudo.iter_mut().for_each(|p| *p = None);
        }
    }
    let kd_targets: Vec<Option<Vec<f64>>> = data
        .iter()
        .map(|img| -> Result<Option<Vec<f64>>> {
            Ok(if use_kd { Some(model::forward(pretrained, img)?.softmax()) } else { None })
        })
        .collect::<Result<_>>()?;
    let has_loss = use_kd || pseudo.iter().any(Option::is_some);

    let mut rng = seed::rng(seed, &[seed::STREAM_CLIENT]);
    let mut opt = Sgd::new(params.arch());
    let (mut sum_pseudo, mut sum_kd, mut steps) = (0.0, 0.0, 0usize);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.local_epochs {
        if !has_loss {
            break;
        }
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.local_batch) {
            let mut grad = ParamSet::zeros(params.arch());
            for &i in batch {
                let l = model::local_loss_grad(
                    &params,
                    &data[i],
                    pseudo[i].as_ref(),
                    kd_targets[i].as_deref(),
                    cfg.lambda_kd,
                )?;
                grad.axpy(1.0 / batch.len() as f64, &l.grad);
                sum_pseudo += l.pseudo;
                sum_kd += l.kd;
                steps += 1;
            }
            opt.step(&mut params, &grad, lr);
        }
    }
    let total_pixels: usize = data.iter().map(ImageTensor::pixels).sum();
    let denom = steps.max(1) as f64;
    Ok(ClientUpdate {
        params,
        n_samples: data.len(),
        mean_loss_pseudo: sum_pseudo / denom,
        mean_loss_kd: sum_kd / denom,
        ignored_fraction: if cfg.self_training { ignored as f64 / total_pixels as f64 } else { 0.0 },
    })
}

/// Global slice, per-cluster slices, and per-cluster teachers.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModels {
    pub cluster_groups: GroupSet,
    pub phi: ParamSlice,
    pub thetas: Vec<ParamSlice>,
    pub teachers: Vec<ParamSet>,
    /// Averaging counter of each teacher at its last averaging update.
    pub swat_counts: Vec<Option<usize>>,
}

impl ClusterModels {
    /// Every cluster model and every teacher start from `init`.
    pub fn new(init: &ParamSet, clusters: usize, cluster_groups: GroupSet) -> Self {
        let (theta, phi) = split_params(init, &cluster_groups);
        Self {
            cluster_groups,
            phi,
            thetas: vec![theta; clusters],
            teachers: vec![init.clone(); clusters],
            swat_counts: vec![None; clusters],
        }
    }

    pub fn clusters(&self) -> usize {
        self.thetas.len()
    }

    /// `w_c = phi ∪ theta_c`.
    pub fn assemble(&self, cluster: usize) -> Result<ParamSet> {
        merge(&self.thetas[cluster], &self.phi)
    }
}

/// Weighted mean of one group over `(weight, params)` pairs in the given order.
fn weighted_group(items: &[(f64, &ParamSet)], g: Group) -> Vec<f64> {
    let mut acc = vec![0.0; items[0].1.group(g).len()];
    for (w, p) in items {
        for (a, v) in acc.iter_mut().zip(p.group(g)) {
            *a += w * v;
        }
    }
    acc
}

/// Clustered, layer-aware aggregation.
///
/// Global groups are averaged over all updates weighted by sample count;
/// cluster groups are averaged within each cluster. A cluster without
/// updates keeps its previous slice. Sums run in ascending client order.
pub fn aggregate(
    prev: &ClusterModels,
    updates: &[(ClientId, ClientUpdate)],
    partition: &ClusterPartition,
) -> Result<ClusterModels> {
    if updates.is_empty() {
        return Err(Error::InvalidInput("aggregation needs at least one update".into()));
    }
    let mut sorted: Vec<&(ClientId, ClientUpdate)> = updates.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);

    let mut next = prev.clone();
    let total: usize = sorted.iter().map(|(_, u)| u.n_samples).sum();
    let all: Vec<(f64, &ParamSet)> = sorted
        .iter()
        .map(|(_, u)| (u.n_samples as f64 / total as f64, &u.params))
        .collect();
    for g in Group::ALL {
        if !prev.cluster_groups.contains(&g) {
            *next.phi.group_mut(g).expect("phi holds every global group") = weighted_group(&all, g);
        }
    }

    let mut by_cluster: Vec<Vec<&(ClientId, ClientUpdate)>> = vec![Vec::new(); prev.clusters()];
    for item in &sorted {
        by_cluster[partition.cluster_of(item.0)?].push(item);
    }
    for (c, members) in by_cluster.iter().enumerate() {
        if members.is_empty() || prev.cluster_groups.is_empty() {
            continue;
        }
        let n: usize = members.iter().map(|(_, u)| u.n_samples).sum();
        let items: Vec<(f64, &ParamSet)> =
            members.iter().map(|(_, u)| (u.n_samples as f64 / n as f64, &u.params)).collect();
        for &g in &prev.cluster_groups {
            *next.thetas[c].group_mut(g).expect("theta holds every cluster group") = weighted_group(&items, g);
        }
    }
    Ok(next)
}

/// Teacher update after round `t`: nothing unless `t` is a multiple of
/// `period`; a hard copy of the cluster model before `swat_start`; from then
/// on the running mean `(w_g n + w_c) / (n + 1)` with `n = (t - swat_start) / period`.
pub fn teacher_refresh(models: &mut ClusterModels, t: usize, period: usize, swat_start: usize) -> Result<()> {
    if t % period != 0 {
        return Ok(());
    }
    for c in 0..models.clusters() {
        let current = models.assemble(c)?;
        if t < swat_start {
            models.teachers[c] = current;
        } else {
            let n = ((t - swat_start) / period) as f64;
            let teacher = &mut models.teachers[c];
            for (g, w) in teacher.iter_mut().zip(current.iter()) {
                *g = (*g * n + w) / (n + 1.0);
            }
            models.swat_counts[c] = Some((t - swat_start) / period);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
}

impl Evaluation {
    fn from_confusion(cm: &ConfusionMatrix) -> Self {
        Self { miou: cm.miou(), per_class_iou: cm.per_class_iou(), pixel_accuracy: cm.pixel_accuracy() }
    }
}

/// Routes each test image to the cluster with the nearest centroid.
pub fn route_test_images(test: &[LabeledImage], partition: &ClusterPartition, window: usize) -> Result<Vec<usize>> {
    test.par_iter()
        .map(|item| {
            if partition.num_clusters() == 1 {
                return Ok(0);
            }
            clustering::assign_by_style(&spectral::extract_style(&item.image, window)?, partition)
        })
        .collect()
}

fn evaluate_routed(models: &[ParamSet], test: &[LabeledImage], routes: &[usize]) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let classes = models[0].arch().classes;
    let partial: Vec<ConfusionMatrix> = test
        .par_iter()
        .zip(routes)
        .map(|(item, &c)| {
            let mut cm = ConfusionMatrix::new(classes);
            cm.add(&item.labels, &model::forward(&models[c], &item.image)?.argmax())?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(classes);
    partial.iter().for_each(|p| cm.merge(p));
    Ok(Evaluation::from_confusion(&cm))
}

/// Style-routed evaluation of the cluster models on labeled test images.
pub fn evaluate(
    models: &ClusterModels,
    partition: &ClusterPartition,
    test: &[LabeledImage],
    window: usize,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let routes = route_test_images(test, partition, window)?;
    let assembled = (0..models.clusters()).map(|c| models.assemble(c)).collect::<Result<Vec<_>>>()?;
    evaluate_routed(&assembled, test, &routes)
}

/// Evaluation of a single model on every image.
pub fn evaluate_model(params: &ParamSet, test: &[LabeledImage]) -> Result<Evaluation> {
    evaluate_routed(std::slice::from_ref(params), test, &vec![0; test.len()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled_clients: Vec<ClientId>,
    pub mean_loss_pseudo: f64,
    pub mean_loss_kd: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub wallclock_ms: Option<u64>,
}

/// Appends `record` as one JSON line.
pub fn write_jsonl(out: &mut impl std::io::Write, record: &RoundRecord) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Data the orchestrator is given: the source (dropped after pre-training),
/// the clients' private data, and the labeled test set.
pub struct FederatedWorld {
    pub classes: usize,
    pub source: SourceData,
    pub clients: Vec<ClientData>,
    pub test: Vec<LabeledImage>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub partition: ClusterPartition,
    pub selection_range: (usize, usize),
    pub selection_seeds: Vec<u64>,
    pub pretrained: ParamSet,
    pub pretrained_eval: Evaluation,
    pub models: ClusterModels,
    pub records: Vec<RoundRecord>,
    pub final_eval: Evaluation,
    pub messages: Vec<MessageRecord>,
    /// Source reads performed by pre-training.
    pub source_reads: usize,
}

/// Fraction of the final rounds summarized by [`RunOutput::tail_stats`].
pub const TAIL_FRACTION: f64 = 0.1;

/// Number of trailing rounds in the last `fraction` of `rounds` (at least one).
pub fn tail_len(rounds: usize, fraction: f64) -> usize {
    ((rounds as f64 * fraction).ceil() as usize).max(1)
}

impl RunOutput {
    /// Mean and population std of mIoU over the last 10% of rounds; the
    /// pre-trained evaluation when no round ran.
    pub fn tail_stats(&self) -> (f64, f64) {
        if self.records.is_empty() {
            return (self.pretrained_eval.miou, 0.0);
        }
        let k = tail_len(self.records.len(), TAIL_FRACTION);
        let tail: Vec<f64> = self.records[self.records.len() - k..].iter().map(|r| r.miou).collect();
        mean_std(&tail)
    }
}

/// Style-based grouping of the clients.
#[derive(Clone, Debug)]
pub struct ClientClustering {
    pub partition: ClusterPartition,
    pub styles: Vec<Style>,
    /// Searched cluster counts `[min, max)`; `(1, 2)` when clustering was skipped.
    pub selection_range: (usize, usize),
    pub selection_seeds: Vec<u64>,
}

/// Mean style per client, then cluster-count selection on those styles.
/// Falls back to a single cluster when clustering is disabled or there are
/// too few clients to search.
pub fn cluster_clients(clients: &[ClientData], cfg: &FederationConfig) -> Result<ClientClustering> {
    let styles = clients
        .par_iter()
        .map(|c| client_mean_style(&c.images, cfg.style_window))
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<StylePoint> = clients.iter().zip(&styles).map(|(c, s)| StylePoint::from_style(c.id, s)).collect();
    let k = points.len();
    let single = |points| -> Result<ClientClustering> {
        Ok(ClientClustering {
            partition: ClusterPartition::single(points)?,
            styles: styles.clone(),
            selection_range: (1, 2),
            selection_seeds: Vec::new(),
        })
    };
    if !cfg.clustering {
        return single(points);
    }
    let params = cfg.selection.unwrap_or_else(|| SelectionParams::defaults_for(k));
    if !params.is_feasible(k) {
        warn!("{k} clients are too few for cluster selection; using one cluster");
        return single(points);
    }
    let sel = clustering::select_clustering_traced(&points, params, seed::derive(cfg.seed, &[seed::STREAM_KMEANS]))?;
    Ok(ClientClustering {
        partition: sel.partition,
        styles,
        selection_range: (params.min_clusters, params.max_clusters_exclusive),
        selection_seeds: sel.seeds,
    })
}

/// Runs the whole protocol: style upload and clustering, stylized
/// pre-training, then `rounds` rounds of sampling, local adaptation,
/// aggregation and teacher refresh, each followed by an evaluation.
pub fn run(cfg: &FederationConfig, world: FederatedWorld) -> Result<RunOutput> {
    run_with(cfg, world, |_| Ok(()))
}

/// [`run`], handing each round record to `on_round` as soon as it exists.
pub fn run_with(
    cfg: &FederationConfig,
    world: FederatedWorld,
    mut on_round: impl FnMut(&RoundRecord) -> Result<()>,
) -> Result<RunOutput> {
    let FederatedWorld { classes, source, clients, test } = world;
    if clients.is_empty() {
        return Err(Error::InvalidInput("no clients".into()));
    }
    cfg.validate(clients.len())?;
    let first = &source
        .images
        .first()
        .ok_or_else(|| Error::InvalidInput("no source images".into()))?
        .image;
    let arch = Architecture::new(first.channels(), cfg.hidden, classes)?;
    let mut inbox = Inbox::default();

    // Clients -> server: mean styles.
    let ClientClustering { partition, styles, selection_range, selection_seeds } = cluster_clients(&clients, cfg)?;
    for (client, style) in clients.iter().zip(&styles) {
        inbox.receive(&ClientMessage::MeanStyle { client: client.id, style: style.clone() });
    }
    let pool: Vec<Style> = if cfg.style_pool { styles } else { Vec::new() };

    info!(
        "{} clusters (silhouette {:.3}), cluster-specific groups: {}",
        partition.num_clusters(),
        partition.silhouette(),
        format_group_set(&cfg.cluster_groups)
    );

    let reads = source.read_counter();
    let pretrained = server_pretrain(source, &pool, arch, cfg)?;
    let source_reads = reads.load(Ordering::Relaxed);

    let routes = route_test_images(&test, &partition, cfg.style_window)?;
    let pretrained_eval = evaluate_routed(std::slice::from_ref(&pretrained), &test, &vec![0; test.len()])?;
    info!("pre-trained mIoU {:.4}", pretrained_eval.miou);

    let mut models = ClusterModels::new(&pretrained, partition.num_clusters(), cfg.cluster_groups.clone());
    let cluster_of: Vec<usize> = clients
        .iter()
        .map(|c| partition.cluster_of(c.id))
        .collect::<Result<_>>()?;
    let adapt = cfg.self_training || cfg.lambda_kd > 0.0;
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut final_eval = pretrained_eval.clone();

    for t in 0..cfg.rounds {
        let started = Instant::now();
        let lr = cfg.lr_schedule.at(cfg.lr, t);
        let mut sampling = seed::rng(cfg.seed, &[seed::STREAM_SAMPLING, t as u64]);
        let mut sampled: Vec<usize> = index::sample(&mut sampling, clients.len(), cfg.clients_per_round).into_vec();
        sampled.sort_by_key(|&i| clients[i].id);

        let (mut loss_pseudo, mut loss_kd) = (0.0, 0.0);
        if adapt {
            let snapshots = (0..models.clusters()).map(|c| models.assemble(c)).collect::<Result<Vec<_>>>()?;
            let results: Vec<(ClientId, ClientUpdate)> = sampled
                .par_iter()
                .map(|&i| {
                    let c = cluster_of[i];
                    let client = &clients[i];
                    let s = seed::derive(cfg.seed, &[seed::STREAM_CLIENT, t as u64, client.id.0 as u64]);
                    let up = client_update(&snapshots[c], &models.teachers[c], &pretrained, &client.images, cfg, lr, s)?;
                    Ok((client.id, up))
                })
                .collect::<Result<_>>()?;
            for (client, update) in &results {
                inbox.receive(&ClientMessage::Update { client: *client, update: update.clone() });
                loss_pseudo += update.mean_loss_pseudo;
                loss_kd += update.mean_loss_kd;
            }
            loss_pseudo /= results.len() as f64;
            loss_kd /= results.len() as f64;
            models = aggregate(&models, &results, &partition)?;
            teacher_refresh(&mut models, t, cfg.teacher_period, cfg.swat_start)?;
        }

        let assembled = (0..models.clusters()).map(|c| models.assemble(c)).collect::<Result<Vec<_>>>()?;
        let eval = evaluate_routed(&assembled, &test, &routes)?;
        debug!("round {t}: mIoU {:.4} pseudo {loss_pseudo:.4} kd {loss_kd:.4}", eval.miou);
        records.push(RoundRecord {
            round: t,
            sampled_clients: sampled.iter().map(|&i| clients[i].id).collect(),
            mean_loss_pseudo: loss_pseudo,
            mean_loss_kd: loss_kd,
            miou: eval.miou,
            per_class_iou: eval.per_class_iou.clone(),
            wallclock_ms: cfg.record_wallclock.then(|| started.elapsed().as_millis() as u64),
        });
        on_round(records.last().expect("just pushed"))?;
        final_eval = eval;
    }

    Ok(RunOutput {
        partition,
        selection_range,
        selection_seeds,
        pretrained,
        pretrained_eval,
        models,
        records,
        final_eval,
        messages: inbox.log,
        source_reads,
    })
}
