//! Ablation sweeps: aggregation strategy, attribute count, stage schedule,
//! attribute types and attribute noise with image-conditioned filtering.
//!
//! Every cell trains (or reuses) one model per `(fold, seed)` and reports
//! the novel-class mIoU averaged over those runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregator::{Aggregator, AggregatorConfig, Strategy};
use crate::catalog::{Catalog, CategoryEntry};
use crate::encoders::ToyEncoder;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_fold, AlignmentProbe, AttributeFilter, EvalConfig, FoldSplit, MetricsReport, ModelPredictor,
};
use crate::mask::MaskHeadConfig;
use crate::pipeline::Segmenter;
use crate::synth::{AttributeAxis, SegmentationSample};
use crate::train::{train, TrainConfig, TrainSetup};

/// Ridge penalty of the alignment probe used for filtering.
pub const PROBE_RIDGE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Strategy,
    AttrCount,
    StageCount,
    AttrType,
    NoiseFilter,
}

impl AblationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::Strategy => "strategy",
            AblationKind::AttrCount => "attr_count",
            AblationKind::StageCount => "stage_count",
            AblationKind::AttrType => "attr_type",
            AblationKind::NoiseFilter => "noise_filter",
        }
    }

    /// Values swept when the caller gives none.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationKind::Strategy => &["direct", "pre", "post", "hrchy"],
            AblationKind::AttrCount => &["5", "10", "15"],
            AblationKind::StageCount => &["15-10-5-1", "15-1"],
            AblationKind::AttrType => &["color", "shape", "parts", "others"],
            AblationKind::NoiseFilter => &["0.3"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strategy" => Ok(AblationKind::Strategy),
            "attr_count" => Ok(AblationKind::AttrCount),
            "stage_count" => Ok(AblationKind::StageCount),
            "attr_type" => Ok(AblationKind::AttrType),
            "noise_filter" => Ok(AblationKind::NoiseFilter),
            other => Err(Error::Config(format!(
                "unknown ablation kind `{other}` (expected strategy, attr_count, stage_count, attr_type or noise_filter)"
            ))),
        }
    }
}

/// Parses a stage schedule written as `15-10-5-1` (also accepts `/` or
/// spaces as separators).
pub fn parse_schedule(s: &str) -> Result<Vec<usize>> {
    let counts = s
        .split(|c: char| c == '-' || c == '/' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad cluster count `{p}` in schedule `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    AggregatorConfig::with_schedule(&counts).validate()?;
    Ok(counts)
}

pub fn parse_axis(s: &str) -> Result<AttributeAxis> {
    AttributeAxis::ALL
        .into_iter()
        .find(|a| a.as_str() == s)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown attribute type `{s}` (expected color, shape, parts or others)"
            ))
        })
}

/// Keeps only attributes whose type is in `axes`.
pub fn restrict_catalog(
    catalog: &Catalog,
    types: &BTreeMap<String, AttributeAxis>,
    axes: &BTreeSet<AttributeAxis>,
) -> Result<Catalog> {
    let categories = catalog
        .categories
        .iter()
        .map(|c| {
            let attributes: Vec<String> = c
                .attributes
                .iter()
                .filter(|a| types.get(*a).is_some_and(|t| axes.contains(t)))
                .cloned()
                .collect();
            if attributes.is_empty() {
                return Err(Error::EmptyPool(format!("{} restricted to {axes:?}", c.name)));
            }
            Ok(CategoryEntry {
                attributes,
                ..c.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Catalog {
        dataset_name: catalog.dataset_name.clone(),
        categories,
    })
}

/// Shared inputs of a sweep.
pub struct AblationSetup<'a> {
    pub samples: &'a [SegmentationSample],
    pub catalog: &'a Catalog,
    pub folds: &'a [FoldSplit],
    pub encoder: &'a ToyEncoder,
    /// Type of every attribute string; required by the `attr_type` sweep.
    pub attribute_types: Option<&'a BTreeMap<String, AttributeAxis>>,
    pub strategy: Strategy,
    pub aggregator: AggregatorConfig,
    pub head: MaskHeadConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub progress: Option<&'a dyn Fn(&str)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct ModelKey {
    strategy: Strategy,
    schedule: Vec<usize>,
    fold: usize,
    seed: u64,
}

/// Trained models keyed by strategy, schedule, fold and seed, so sweeps
/// that only change evaluation reuse the same weights.
#[derive(Default)]
pub struct ModelCache {
    models: HashMap<ModelKey, Aggregator>,
}

impl ModelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Adds a model trained elsewhere under the same key scheme.
    pub fn insert(&mut self, model: Aggregator, fold: &FoldSplit, seed: u64) {
        let key = ModelKey {
            strategy: model.strategy,
            schedule: model.config.stage_cluster_counts.clone(),
            fold: fold.fold_id,
            seed,
        };
        self.models.insert(key, model);
    }

    pub fn get_or_train(
        &mut self,
        setup: &AblationSetup<'_>,
        strategy: Strategy,
        aggregator: &AggregatorConfig,
        fold: &FoldSplit,
        seed: u64,
    ) -> Result<&Aggregator> {
        let key = ModelKey {
            strategy,
            schedule: aggregator.stage_cluster_counts.clone(),
            fold: fold.fold_id,
            seed,
        };
        if !self.models.contains_key(&key) {
            if let Some(p) = setup.progress {
                p(&format!(
                    "training {strategy} {:?} fold {} seed {seed}",
                    key.schedule, fold.fold_id
                ));
            }
            let ts = TrainSetup {
                samples: setup.samples,
                catalog: setup.catalog,
                fold,
                encoder: setup.encoder,
                strategy,
                aggregator: aggregator.clone(),
                head: setup.head.clone(),
                out_dir: None,
                extra_echo: None,
            };
            let cfg = TrainConfig {
                seed,
                ..setup.train.clone()
            };
            let model = train(&ts, &cfg)?.model;
            self.models.insert(key.clone(), model);
        }
        Ok(&self.models[&key])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub miou: f64,
    pub miou_std: f64,
    pub runs: Vec<MetricsReport>,
}

impl AblationRow {
    fn from_runs(label: String, runs: Vec<MetricsReport>) -> Self {
        let n = runs.len() as f64;
        let miou = runs.iter().map(|r| r.miou).sum::<f64>() / n;
        let var = runs.iter().map(|r| (r.miou - miou).powi(2)).sum::<f64>() / n;
        Self {
            label,
            miou,
            miou_std: var.sqrt(),
            runs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,label,miou,miou_std,runs\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{}",
                self.kind,
                r.label,
                r.miou,
                r.miou_std,
                r.runs.len()
            );
        }
        out
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Evaluates one configuration cell over every fold and seed.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    setup: &AblationSetup<'_>,
    cache: &mut ModelCache,
    strategy: Strategy,
    aggregator: &AggregatorConfig,
    catalog: &Catalog,
    eval: &EvalConfig,
    filtered: bool,
) -> Result<Vec<MetricsReport>> {
    let mut runs = Vec::new();
    for fold in setup.folds {
        let probe = if filtered {
            Some(AlignmentProbe::fit(
                setup.encoder,
                setup.samples,
                setup.catalog,
                &fold.base_classes,
                PROBE_RIDGE,
            )?)
        } else {
            None
        };
        for &seed in &setup.seeds {
            let model = cache.get_or_train(setup, strategy, aggregator, fold, seed)?;
            let predictor = ModelPredictor {
                segmenter: Segmenter::new(setup.encoder, model, &setup.head)?,
            };
            let filter = probe.as_ref().map(|probe| AttributeFilter {
                encoder: setup.encoder,
                probe,
            });
            let cfg = EvalConfig {
                seed,
                ..eval.clone()
            };
            runs.push(evaluate_fold(
                &predictor,
                setup.samples,
                catalog,
                fold,
                &cfg,
                filter.as_ref(),
            )?);
        }
    }
    Ok(runs)
}

/// Runs one sweep. `values` defaults to [`AblationKind::default_values`]
/// when empty. For `attr_type` the values are attribute types added
/// cumulatively (`color`, `color+shape`, ...); for `noise_filter` each
/// value is a noise rate producing a noisy and a filtered row after one
/// clean reference row.
pub fn run_ablation(
    kind: AblationKind,
    values: &[String],
    setup: &AblationSetup<'_>,
    cache: &mut ModelCache,
) -> Result<AblationTable> {
    if setup.seeds.is_empty() || setup.folds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one fold".into()));
    }
    let values = if values.is_empty() {
        kind.default_values()
    } else {
        values.to_vec()
    };
    let base_agg = &setup.aggregator;
    let mut rows = Vec::new();
    match kind {
        AblationKind::Strategy => {
            for v in &values {
                let strategy: Strategy = v.parse()?;
                let runs = run_cell(setup, cache, strategy, base_agg, setup.catalog, &setup.eval, false)?;
                rows.push(AblationRow::from_runs(strategy.to_string(), runs));
            }
        }
        AblationKind::AttrCount => {
            for v in &values {
                let k: usize = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad attribute count `{v}`")))?;
                let eval = EvalConfig {
                    attributes_per_class: k,
                    ..setup.eval.clone()
                };
                eval.validate()?;
                let runs = run_cell(setup, cache, setup.strategy, base_agg, setup.catalog, &eval, false)?;
                rows.push(AblationRow::from_runs(k.to_string(), runs));
            }
        }
        AblationKind::StageCount => {
            for v in &values {
                let schedule = parse_schedule(v)?;
                let agg = AggregatorConfig {
                    stage_cluster_counts: schedule.clone(),
                    ..base_agg.clone()
                };
                let label = schedule.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("-");
                let runs = run_cell(setup, cache, setup.strategy, &agg, setup.catalog, &setup.eval, false)?;
                rows.push(AblationRow::from_runs(label, runs));
            }
        }
        AblationKind::AttrType => {
            let types = setup.attribute_types.ok_or_else(|| {
                Error::Config("attr_type ablation needs attribute type annotations".into())
            })?;
            let mut axes = BTreeSet::new();
            let mut names = Vec::new();
            for v in &values {
                axes.insert(parse_axis(v)?);
                names.push(v.as_str());
                let catalog = restrict_catalog(setup.catalog, types, &axes)?;
                let runs = run_cell(setup, cache, setup.strategy, base_agg, &catalog, &setup.eval, false)?;
                rows.push(AblationRow::from_runs(names.join("+"), runs));
            }
        }
        AblationKind::NoiseFilter => {
            let clean = EvalConfig {
                noise_rate: 0.0,
                ..setup.eval.clone()
            };
            let runs = run_cell(setup, cache, setup.strategy, base_agg, setup.catalog, &clean, false)?;
            rows.push(AblationRow::from_runs("clean".into(), runs));
            for v in &values {
                let rate: f64 = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad noise rate `{v}`")))?;
                let noisy = EvalConfig {
                    noise_rate: rate,
                    ..setup.eval.clone()
                };
                noisy.validate()?;
                let runs = run_cell(setup, cache, setup.strategy, base_agg, setup.catalog, &noisy, false)?;
                rows.push(AblationRow::from_runs(format!("noise {rate}"), runs));
                let runs = run_cell(setup, cache, setup.strategy, base_agg, setup.catalog, &noisy, true)?;
                rows.push(AblationRow::from_runs(format!("noise {rate} + filter"), runs));
            }
        }
    }
    Ok(AblationTable { kind, rows })
}
