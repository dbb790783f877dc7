//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line with the
//! measured values, bypassing output capture.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use fedstyle_core::clustering::{
    cluster_accuracy, inter_cluster_dist, intra_cluster_dist, select_clustering, silhouette, ClientId,
    ClusterPartition, SelectionParams, StylePoint,
};
use fedstyle_core::experiment::{ExperimentConfig, Toggles};
use fedstyle_core::federation::{
    aggregate, cluster_clients, run_with, teacher_refresh, write_jsonl, ClientUpdate, ClusterModels, FederatedWorld,
    RunOutput,
};
use fedstyle_core::model::{
    ce_loss_grad, kd_loss_grad, local_loss_grad, Architecture, Group, GroupSet, ParamSet,
};
use fedstyle_core::spectral::{apply_style, extract_style, fft2, ifft2};
use rand::Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn line(text: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").unwrap();
    out.flush().unwrap();
}

fn report(criterion: u32, name: &str, pass: bool, detail: &str, elapsed: Duration, limit: Option<Duration>) {
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let verdict = if pass && in_time { "PASS" } else { "FAIL" };
    let limit = limit.map_or(String::new(), |l| format!(" / limit {:.0}s", l.as_secs_f64()));
    line(&format!("[{verdict}] criterion {criterion}: {name}: {detail} ({:.1}s{limit})", elapsed.as_secs_f64()));
    assert!(pass, "criterion {criterion} failed: {detail}");
    assert!(in_time, "criterion {criterion} exceeded its time budget");
}

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_1_spectral_oracles() {
    let start = Instant::now();
    let (mut round_trip, mut parseval, mut window, mut carried, mut idempotent) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(8..=32), r.random_range(8..=32));
        let img = random_image(&mut r, 3, h, w);
        let spec = fft2(&img).unwrap();
        round_trip = round_trip.max(ifft2(&spec, false).unwrap().max_abs_diff(&img));
        let space: f64 = img.values().iter().map(|v| v * v).sum();
        let freq: f64 = spec.amplitude().iter().map(|a| a * a).sum::<f64>() / (h * w) as f64;
        parseval = parseval.max((space - freq).abs() / space);

        let l = 2 * r.random_range(0..=3) + 1;
        let style = extract_style(&img, l).unwrap();
        let scale = 1.0 + style.values().iter().cloned().fold(0.0, f64::max);
        window = window.max(max_err(style.values(), &brute_style(&img, l)) / scale);

        let donor = extract_style(&random_image(&mut r, 3, h, w), l).unwrap();
        let styled = apply_style(&img, &donor).unwrap();
        let dscale = 1.0 + donor.values().iter().cloned().fold(0.0, f64::max);
        carried = carried.max(max_err(extract_style(&styled, l).unwrap().values(), donor.values()) / dscale);
        idempotent = idempotent.max(apply_style(&styled, &donor).unwrap().max_abs_diff(&styled));
    }
    let pass = round_trip < 1e-9 && parseval < 1e-9 && window < 1e-9 && carried < 1e-9 && idempotent < 1e-9;
    report(
        1,
        "spectral oracles on 100 images",
        pass,
        &format!(
            "round trip {round_trip:.1e}, Parseval rel {parseval:.1e}, window vs DFT {window:.1e}, \
             carried style {carried:.1e}, restyle {idempotent:.1e} (tol 1e-9)"
        ),
        start.elapsed(),
        Some(Duration::from_secs(5)),
    );
}

#[test]
fn criterion_2_clustering_oracles() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..200 {
        let mut r = rng(seed);
        let n = r.random_range(2..=12);
        let k = r.random_range(2..=n.min(4));
        let vectors: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { r.random_range(0..k) }).collect();
        let points: Vec<StylePoint> =
            vectors.iter().enumerate().map(|(i, v)| StylePoint::new(ClientId(i as u32), v.clone())).collect();
        let part = ClusterPartition::from_labels(points.clone(), labels.clone()).unwrap();
        for (i, p) in points.iter().enumerate() {
            worst = worst.max((intra_cluster_dist(&part, p.client).unwrap() - brute_intra(&vectors, &labels, i)).abs());
            worst = worst.max((inter_cluster_dist(&part, p.client).unwrap() - brute_inter(&vectors, &labels, i)).abs());
        }
        worst = worst.max((silhouette(&part).unwrap() - brute_silhouette(&vectors, &labels)).abs());
    }

    let centers: Vec<Vec<f64>> = (0..4)
        .map(|b| (0..6).map(|d| if d == b { 10.0 } else if b == 3 { -4.0 } else { 0.0 }).collect())
        .collect();
    let mut recovered = 0;
    for seed in 0..20 {
        let (points, truth) = blobs(&centers, 6, 0.5, seed);
        let part = select_clustering(&points, SelectionParams::defaults_for(points.len()), seed).unwrap();
        if part.num_clusters() == 4 && same_partition(part.labels(), &truth) {
            recovered += 1;
        }
    }
    report(
        2,
        "clustering oracles",
        worst < 1e-12 && recovered == 20,
        &format!("max |distance - brute| {worst:.1e} (tol 1e-12), planted blobs recovered {recovered}/20"),
        start.elapsed(),
        Some(Duration::from_secs(10)),
    );
}

#[test]
fn criterion_3_gradient_checks() {
    let start = Instant::now();
    let (mut ce, mut kd, mut both) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20 {
        let mut r = rng(seed);
        let arch = Architecture::new(r.random_range(1..=3), r.random_range(2..=5), r.random_range(2..=4)).unwrap();
        let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
        let params = random_params(arch, seed);
        let img = random_image(&mut r, arch.in_channels, h, w);
        let labels = random_labels(&mut r, h, w, arch.classes, 0.2);
        let teacher = random_logits(&mut r, h, w, arch.classes);
        let probs = teacher.softmax();
        let lambda = r.random_range(0.1..3.0);

        let (_, g) = ce_loss_grad(&params, &img, &labels).unwrap();
        ce = ce.max(grad_check(&params, &g, 1e-5, 1e-5, |p| ce_loss_grad(p, &img, &labels).unwrap().0));
        let (_, g) = kd_loss_grad(&params, &img, &teacher).unwrap();
        kd = kd.max(grad_check(&params, &g, 1e-5, 1e-5, |p| kd_loss_grad(p, &img, &teacher).unwrap().0));
        let g = local_loss_grad(&params, &img, Some(&labels), Some(&probs), lambda).unwrap().grad;
        both = both.max(grad_check(&params, &g, 1e-5, 1e-5, |p| {
            local_loss_grad(p, &img, Some(&labels), Some(&probs), lambda).unwrap().total
        }));
    }
    report(
        3,
        "finite-difference gradients on 20 instances",
        ce < 1e-4 && kd < 1e-4 && both < 1e-4,
        &format!("max rel err CE {ce:.1e}, KD {kd:.1e}, combined {both:.1e} (tol 1e-4)"),
        start.elapsed(),
        Some(Duration::from_secs(10)),
    );
}

#[test]
fn criterion_4_aggregation_equivalences() {
    let start = Instant::now();
    let arch = Architecture::new(3, 4, 3).unwrap();

    let mut fedavg = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(seed);
        let k = r.random_range(2..8);
        let labels: Vec<usize> = (0..k).map(|i| if i < 2 { i } else { r.random_range(0..2) }).collect();
        let points =
            (0..k).map(|i| StylePoint::new(ClientId(i as u32), vec![labels[i] as f64 * 10.0, i as f64])).collect();
        let part = ClusterPartition::from_labels(points, labels).unwrap();
        let prev = ClusterModels::new(&random_params(arch, seed), 2, GroupSet::new());
        let ups: Vec<(ClientId, ClientUpdate)> = (0..k)
            .map(|i| {
                let params = random_params(arch, seed * 100 + i as u64 + 1);
                let n = r.random_range(1..30);
                (ClientId(i as u32), ClientUpdate { params, n_samples: n, mean_loss_pseudo: 0.0, mean_loss_kd: 0.0, ignored_fraction: 0.0 })
            })
            .collect();
        let total: f64 = ups.iter().map(|(_, u)| u.n_samples as f64).sum();
        let next = aggregate(&prev, &ups, &part).unwrap();
        for c in 0..2 {
            let got = next.assemble(c).unwrap();
            for i in 0..got.len() {
                let oracle: f64 = ups.iter().map(|(_, u)| u.n_samples as f64 * u.params.get_flat(i)).sum::<f64>() / total;
                fedavg = fedavg.max((got.get_flat(i) - oracle).abs());
            }
        }
    }

    // Partial means are integers, so every running mean is exact in floating point.
    let all: GroupSet = Group::ALL.into_iter().collect();
    let mut models = ClusterModels::new(&ParamSet::zeros(arch), 1, all.clone());
    let mut r = rng(99);
    let len = ParamSet::zeros(arch).len();
    let means: Vec<Vec<f64>> =
        (0..5).map(|_| (0..len).map(|_| r.random_range(-50..50) as f64).collect()).collect();
    let mut checkpoints: Vec<ParamSet> = Vec::new();
    let mut swat_exact = true;
    for t in 0..5 {
        let mut w = ParamSet::zeros(arch);
        for i in 0..w.len() {
            let prev = if t == 0 { 0.0 } else { means[t - 1][i] };
            w.set_flat(i, (t + 1) as f64 * means[t][i] - t as f64 * prev);
        }
        let fresh = ClusterModels::new(&w, 1, all.clone());
        models.phi = fresh.phi;
        models.thetas = fresh.thetas;
        teacher_refresh(&mut models, t, 1, 0).unwrap();
        checkpoints.push(w);
        let teacher = &models.teachers[0];
        for i in 0..teacher.len() {
            let mean = checkpoints.iter().map(|c| c.get_flat(i)).sum::<f64>() / checkpoints.len() as f64;
            swat_exact &= teacher.get_flat(i) == mean;
        }
    }
    report(
        4,
        "aggregation equivalences",
        fedavg < 1e-12 && swat_exact,
        &format!("empty cluster groups vs weighted FedAvg {fedavg:.1e} (tol 1e-12), SWAt teacher == checkpoint mean over 5 rounds: {swat_exact}"),
        start.elapsed(),
        None,
    );
}

#[test]
fn criterion_5_cluster_accuracy() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let mut accs = Vec::new();
    for seed in 0..10 {
        let world = cfg.world_for(seed).unwrap();
        let truth: BTreeMap<ClientId, usize> = world.clients.iter().map(|c| (c.id, c.domain)).collect();
        let c = cluster_clients(&world.clients, &cfg.effective(seed)).unwrap();
        accs.push(cluster_accuracy(&c.partition, &truth).unwrap());
    }
    let min = accs.iter().cloned().fold(f64::INFINITY, f64::min);
    report(
        5,
        "cluster accuracy on the default world, 10 seeds",
        min >= 0.95,
        &format!("min {min:.3} (need >= 0.95), per seed {:?}", accs.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>()),
        start.elapsed(),
        Some(Duration::from_secs(30)),
    );
}

fn runs(toggles: Toggles, rounds: Option<usize>) -> Vec<RunOutput> {
    let mut cfg = ExperimentConfig { toggles, ..ExperimentConfig::default() };
    if let Some(r) = rounds {
        cfg.federation.rounds = r;
    }
    SEEDS.iter().map(|&s| cfg.run_seed(s).unwrap()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_6_stylized_pretraining() {
    let start = Instant::now();
    let pre = |fda: bool| -> Vec<f64> {
        runs(Toggles { fda_pretrain: fda, ..Toggles::NONE }, Some(0)).iter().map(|r| r.pretrained_eval.miou).collect()
    };
    let (plain, fda) = (pre(false), pre(true));
    let gain = 100.0 * (mean(&fda) - mean(&plain));
    report(
        6,
        "stylized vs plain pre-training, 5 seeds",
        gain >= 3.0,
        &format!("target mIoU plain {:.4}, stylized {:.4}, gain {gain:.2} points (need >= 3)", mean(&plain), mean(&fda)),
        start.elapsed(),
        Some(Duration::from_secs(180)),
    );
}

/// Criteria 7 and 8 share one set of runs.
#[test]
fn criteria_7_and_8_ablation_ordering_and_stability() {
    let start = Instant::now();
    let st = Toggles { fda_pretrain: true, self_training: true, ..Toggles::NONE };
    let st_kd = Toggles { kd: true, ..st };
    let st_kd_swat = Toggles { swat: true, ..st_kd };
    let full = Toggles::default();
    let variants = [("ST", st), ("ST+KD", st_kd), ("ST+KD+SWAt", st_kd_swat), ("full", full)];
    let tails: Vec<Vec<(f64, f64)>> =
        variants.iter().map(|(_, t)| runs(*t, None).iter().map(RunOutput::tail_stats).collect()).collect();
    let means: Vec<f64> = tails.iter().map(|v| mean(&v.iter().map(|x| x.0).collect::<Vec<_>>())).collect();
    let elapsed = start.elapsed();

    let gap = 100.0 * (means[3] - means[0]);
    let ordered = means[0] < means[1] && means[1] <= means[2] && means[2] <= means[3];
    let listing = variants.iter().zip(&means).map(|((n, _), m)| format!("{n} {m:.4}")).collect::<Vec<_>>().join(", ");
    let pass7 = gap >= 2.0 && ordered;
    let verdict7 = if pass7 && elapsed <= Duration::from_secs(600) { "PASS" } else { "FAIL" };
    line(&format!(
        "[{verdict7}] criterion 7: full vs FedAvg+ST and cumulative ordering: {listing}; gap {gap:.2} points (need >= 2), ordering holds: {ordered} ({:.1}s / limit 600s)",
        elapsed.as_secs_f64()
    ));

    let stable = (0..SEEDS.len()).filter(|&i| tails[2][i].1 <= tails[0][i].1).count();
    let stds = |v: &[(f64, f64)]| v.iter().map(|x| format!("{:.4}", x.1)).collect::<Vec<_>>();
    let pass8 = stable >= 4;
    line(&format!(
        "[{}] criterion 8: last-rounds std with KD+SWAt <= without: {stable}/5 seeds (need >= 4); ST {:?}, ST+KD+SWAt {:?} ({:.1}s)",
        if pass8 { "PASS" } else { "FAIL" },
        stds(&tails[0]),
        stds(&tails[2]),
        elapsed.as_secs_f64()
    ));
    assert!(pass7, "criterion 7 failed");
    assert!(elapsed <= Duration::from_secs(600), "criterion 7 exceeded its time budget");
    assert!(pass8, "criterion 8 failed: {stable}/5 seeds");
}

#[test]
fn criterion_9_determinism() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let record = |seed: u64| -> Vec<u8> {
        let mut bytes = Vec::new();
        let world = FederatedWorld::from(cfg.world_for(seed).unwrap());
        run_with(&cfg.effective(seed), world, |r| write_jsonl(&mut bytes, r)).unwrap();
        bytes
    };
    let (a, b) = (record(7), record(7));
    report(
        9,
        "repeated run gives byte-identical rounds.jsonl",
        !a.is_empty() && a == b,
        &format!("{} bytes, identical: {}", a.len(), a == b),
        start.elapsed(),
        None,
    );
}
