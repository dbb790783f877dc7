//! Experiment configuration: a world, a federation config, ablation toggles
//! and a list of seeds. Each seed is an independent run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{self, FederatedWorld, FederationConfig, RunOutput, SourceData};
use crate::metrics::mean_std;
use crate::model::GroupSet;
use crate::seed;
use crate::synthdata::{World, WorldSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Switches for the components of the method. All on is the full method;
/// all off is the pre-trained source model evaluated as is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// Stylize source images with pooled client styles during pre-training.
    pub fda_pretrain: bool,
    pub self_training: bool,
    pub kd: bool,
    pub swat: bool,
    /// Aggregate `cluster_groups` within style clusters.
    pub cluster_aggr: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { fda_pretrain: true, self_training: true, kd: true, swat: true, cluster_aggr: true }
    }
}

impl Toggles {
    pub const NONE: Toggles =
        Toggles { fda_pretrain: false, self_training: false, kd: false, swat: false, cluster_aggr: false };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    /// Fixed world seed; by default each run's world is generated from its run seed.
    pub world_seed: Option<u64>,
    pub toggles: Toggles,
    pub world: WorldSpec,
    pub federation: FederationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seeds: vec![0],
            world_seed: None,
            toggles: Toggles::default(),
            world: WorldSpec::default(),
            federation: FederationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let clients = self.world.domains.domains * self.world.split.clients_per_domain;
        self.federation.validate(clients)
    }

    /// Federation settings after applying the toggles, for one run seed.
    pub fn effective(&self, run_seed: u64) -> FederationConfig {
        let t = self.toggles;
        let mut f = self.federation.clone();
        f.seed = run_seed;
        f.style_pool = t.fda_pretrain;
        f.self_training = t.self_training;
        if !t.kd {
            f.lambda_kd = 0.0;
        }
        if !t.swat {
            f.swat_start = f.rounds + 1;
        }
        if !t.cluster_aggr {
            f.cluster_groups = GroupSet::new();
        }
        f.clustering = t.cluster_aggr;
        f
    }

    pub fn world_for(&self, run_seed: u64) -> Result<World> {
        let s = self.world_seed.unwrap_or_else(|| seed::derive(run_seed, &[seed::STREAM_WORLD]));
        self.world.build(s)
    }

    pub fn run_seed(&self, run_seed: u64) -> Result<RunOutput> {
        self.validate()?;
        let world = self.world_for(run_seed)?;
        federation::run(&self.effective(run_seed), FederatedWorld::from(world))
    }
}

impl From<World> for FederatedWorld {
    fn from(world: World) -> Self {
        Self {
            classes: world.source_domain.classes(),
            source: SourceData::new(world.source),
            clients: world.clients,
            test: world.test,
        }
    }
}

/// Aggregate over runs: spread across seeds of the final-round mIoU, and
/// the within-run spread over the last rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_miou: f64,
    pub tail_miou_mean: f64,
    pub tail_miou_std: f64,
    pub clusters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<SeedSummary>,
    /// Mean and std over seeds of each run's last-rounds mean mIoU.
    pub miou_mean_over_seeds: f64,
    pub miou_std_over_seeds: f64,
    /// Mean over seeds of the std within each run's last rounds.
    pub miou_std_over_last_rounds: f64,
    /// Mean over seeds of the final per-class IoU (classes never defined are `None`).
    pub per_class_iou: Vec<Option<f64>>,
}

impl Summary {
    pub fn from_runs(runs: &[(u64, &RunOutput)]) -> Self {
        let seeds: Vec<SeedSummary> = runs
            .iter()
            .map(|(seed, out)| {
                let (m, s) = out.tail_stats();
                SeedSummary {
                    seed: *seed,
                    final_miou: out.final_eval.miou,
                    tail_miou_mean: m,
                    tail_miou_std: s,
                    clusters: out.partition.num_clusters(),
                }
            })
            .collect();
        let means: Vec<f64> = seeds.iter().map(|s| s.tail_miou_mean).collect();
        let (mean, std) = mean_std(&means);
        let within: Vec<f64> = seeds.iter().map(|s| s.tail_miou_std).collect();
        let classes = runs.first().map_or(0, |(_, o)| o.final_eval.per_class_iou.len());
        let per_class_iou = (0..classes)
            .map(|q| {
                let v: Vec<f64> = runs.iter().filter_map(|(_, o)| o.final_eval.per_class_iou[q]).collect();
                (!v.is_empty()).then(|| mean_std(&v).0)
            })
            .collect();
        Self {
            runs: seeds,
            miou_mean_over_seeds: mean,
            miou_std_over_seeds: std,
            miou_std_over_last_rounds: mean_std(&within).0,
            per_class_iou,
        }
    }
}
