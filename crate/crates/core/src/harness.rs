//! Experiment runner: seeded Monte Carlo sweeps and runtime benchmarks.
//!
//! A sweep is a grid of cells `(value, repetition)`. Cell seeds are
//! `base_seed + rep`; each target layer derives its own mask seed as
//! `cell_seed ^ fnv1a64(layer_name)`, so every cell can be recomputed alone.
//! Cells run on a thread pool of `jobs` workers and the result order does not
//! depend on scheduling.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossbar::CrossbarConfig;
use crate::dataio::{read_idx, read_model, sort_results, LabeledDataset, ResultRow};
use crate::engine::{ModelGraph, Prediction};
use crate::error::{Error, Result};
use crate::faultgen::{
    fnv1a64, gen_bitflip_mask, gen_dynamic_mask, gen_line_fault_mask, gen_stuckat_mask, FaultMask, FaultRng,
    FaultType,
};
use crate::injector::{InjectionSession, Mode};
use crate::scalar::Real;
use crate::tensor::RealTensor;

pub const COMBINED: &str = "combined";

/// Layers receiving faults. A list sweeps each layer on its own; `Combined`
/// injects into every injectable layer at once.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Layers(Vec<String>),
    Combined,
}

impl Target {
    /// `(csv label, layers)` groups, in sweep order.
    pub fn groups(&self, model: &ModelGraph) -> Result<Vec<(String, Vec<String>)>> {
        match self {
            Target::Combined => {
                let all: Vec<String> = model.injectable_layers().map(|l| l.name.clone()).collect();
                if all.is_empty() {
                    return Err(Error::Config(format!("model `{}` has no injectable layers", model.name())));
                }
                Ok(vec![(COMBINED.to_owned(), all)])
            }
            Target::Layers(names) => {
                if names.is_empty() {
                    return Err(Error::Config("no target layer given".into()));
                }
                names
                    .iter()
                    .map(|n| {
                        let l = model.layer(n).ok_or_else(|| Error::UnknownLayer(n.clone()))?;
                        if !l.is_injectable() {
                            return Err(Error::NotInjectable(n.clone()));
                        }
                        Ok((n.clone(), vec![n.clone()]))
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineAxis {
    Rows,
    Cols,
}

impl LineAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            LineAxis::Rows => "rows",
            LineAxis::Cols => "cols",
        }
    }
}

/// What a sweep varies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sweep {
    /// Bit-flip or stuck-at masks over injection rates.
    Rates {
        fault_type: FaultType,
        rates: Vec<f64>,
        #[serde(default = "half")]
        p_one: f64,
    },
    /// Whole faulty rows or columns (bit-flip), over line counts.
    Lines { axis: LineAxis, counts: Vec<usize> },
    /// Dynamic faults at a fixed rate, over sensitization periods.
    Periods { rate: f64, periods: Vec<u64> },
}

fn half() -> f64 {
    0.5
}

impl Sweep {
    fn values(&self) -> usize {
        match self {
            Sweep::Rates { rates, .. } => rates.len(),
            Sweep::Lines { counts, .. } => counts.len(),
            Sweep::Periods { periods, .. } => periods.len(),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Sweep::Rates { fault_type, .. } => fault_type.as_str(),
            Sweep::Lines { axis, .. } => axis.as_str(),
            Sweep::Periods { .. } => FaultType::Dynamic.as_str(),
        }
    }

    fn value_string(&self, i: usize) -> String {
        match self {
            Sweep::Rates { rates, .. } => rates[i].to_string(),
            Sweep::Lines { counts, .. } => counts[i].to_string(),
            Sweep::Periods { periods, .. } => periods[i].to_string(),
        }
    }

    fn validate(&self, cfg: &CrossbarConfig) -> Result<()> {
        let check_rate = |r: f64| {
            if (0.0..=1.0).contains(&r) {
                Ok(())
            } else {
                Err(Error::InvalidRate(r))
            }
        };
        match self {
            Sweep::Rates {
                fault_type,
                rates,
                p_one,
            } => {
                if *fault_type == FaultType::Dynamic {
                    return Err(Error::Config("dynamic faults are swept over periods".into()));
                }
                if !(0.0..=1.0).contains(p_one) {
                    return Err(Error::InvalidProbability(*p_one));
                }
                rates.iter().try_for_each(|&r| check_rate(r))
            }
            Sweep::Lines { axis, counts } => {
                let max = match axis {
                    LineAxis::Rows => cfg.gate_rows,
                    LineAxis::Cols => cfg.gate_cols,
                };
                match counts.iter().find(|&&c| c > max) {
                    Some(c) => Err(Error::Config(format!(
                        "{c} faulty {} requested, crossbar has {max}",
                        axis.as_str()
                    ))),
                    None => Ok(()),
                }
            }
            Sweep::Periods { rate, .. } => check_rate(*rate),
        }
    }
}

/// Everything a sweep needs besides the model and the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub crossbar: CrossbarConfig,
    pub target: Target,
    pub sweep: Sweep,
    pub reps: u64,
    pub seed: u64,
    pub mode: Mode,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.crossbar.validate()?;
        if self.reps == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.sweep.values() == 0 {
            return Err(Error::Config("empty sweep".into()));
        }
        self.sweep.validate(&self.crossbar)
    }
}

/// A sweep bound to files on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Leading images to use; all when absent.
    pub subset: Option<usize>,
    #[serde(flatten)]
    pub sweep: SweepConfig,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(&self) -> Result<(ModelGraph, LabeledDataset<f32>)> {
        let model = read_model(&self.model)?;
        let mut data = read_idx::<f32>(&self.images, &self.labels)?;
        if let Some(n) = self.subset {
            data = data.subset(n);
        }
        data.check_classes(model.class_count())?;
        Ok((model, data))
    }

    pub fn run(&self) -> Result<Vec<ResultRow>> {
        let (model, data) = self.load()?;
        let rows = run(&self.sweep, &model, &data)?;
        if let Some(out) = &self.out {
            crate::dataio::write_results_csv(&rows, out)?;
        }
        Ok(rows)
    }
}

/// Mask seed for one layer of a cell.
pub fn layer_seed(cell_seed: u64, layer: &str) -> u64 {
    cell_seed ^ fnv1a64(layer.as_bytes())
}

/// Masks of one cell. `value` indexes the sweep values.
pub fn cell_masks(sweep: &Sweep, cfg: &CrossbarConfig, layers: &[String], value: usize, cell_seed: u64) -> Result<Vec<FaultMask>> {
    let (r, c) = (cfg.gate_rows, cfg.gate_cols);
    layers
        .iter()
        .map(|name| {
            let seed = layer_seed(cell_seed, name);
            let mask = match sweep {
                Sweep::Rates {
                    fault_type: FaultType::StuckAt,
                    rates,
                    p_one,
                } => gen_stuckat_mask(r, c, rates[value], seed, *p_one)?,
                Sweep::Rates { rates, .. } => gen_bitflip_mask(r, c, rates[value], seed)?,
                Sweep::Lines { axis, counts } => {
                    let mut rng = FaultRng::new(seed);
                    let mut mask = match axis {
                        LineAxis::Rows => gen_line_fault_mask(r, c, &rng.sample_distinct(r, counts[value]), &[])?,
                        LineAxis::Cols => gen_line_fault_mask(r, c, &[], &rng.sample_distinct(c, counts[value]))?,
                    };
                    mask.seed = seed;
                    mask
                }
                Sweep::Periods { rate, periods } => gen_dynamic_mask(r, c, *rate, periods[value], seed)?,
            };
            Ok(mask.with_layer(name.clone()))
        })
        .collect()
}

pub fn accuracy(preds: &[Prediction], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let correct = preds.iter().zip(labels).filter(|(p, &l)| p.class == l).count();
    correct as f64 / preds.len() as f64
}

/// Injected inference over `images` with a fresh session.
pub fn evaluate<T: Real>(
    model: &ModelGraph,
    cfg: CrossbarConfig,
    masks: &[FaultMask],
    mode: Mode,
    images: &[RealTensor<T>],
) -> Result<Vec<Prediction>> {
    InjectionSession::new(model, cfg, masks, mode)?.infer_batch(model, images)
}

struct Cell<'a> {
    label: &'a str,
    layers: &'a [String],
    value: usize,
    rep: u64,
}

fn run_cell<T: Real>(sc: &SweepConfig, model: &ModelGraph, data: &LabeledDataset<T>, cell: &Cell) -> Result<ResultRow> {
    let seed = sc.seed.wrapping_add(cell.rep);
    let start = Instant::now();
    let masks = cell_masks(&sc.sweep, &sc.crossbar, cell.layers, cell.value, seed)?;
    let preds = evaluate(model, sc.crossbar, &masks, sc.mode, &data.images)?;
    let runtime_ms = start.elapsed().as_millis() as u64;
    let (param, rate) = match &sc.sweep {
        Sweep::Rates { rates, .. } => (0, rates[cell.value]),
        Sweep::Lines { counts, .. } => (counts[cell.value] as u64, masks[0].rate),
        Sweep::Periods { rate, periods } => (periods[cell.value], *rate),
    };
    Ok(ResultRow {
        seed,
        layer: cell.label.to_owned(),
        fault_type: sc.sweep.label().to_owned(),
        param,
        rate,
        accuracy: accuracy(&preds, &data.labels),
        images: preds.len(),
        runtime_ms,
    })
}

/// Runs every cell of the sweep. Rows come back in canonical CSV order.
pub fn run<T: Real>(sc: &SweepConfig, model: &ModelGraph, data: &LabeledDataset<T>) -> Result<Vec<ResultRow>> {
    sc.validate()?;
    data.check_classes(model.class_count())?;
    let groups = sc.target.groups(model)?;
    let cells: Vec<Cell> = groups
        .iter()
        .flat_map(|(label, layers)| {
            (0..sc.sweep.values()).flat_map(move |value| {
                (0..sc.reps).map(move |rep| Cell {
                    label,
                    layers,
                    value,
                    rep,
                })
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sc.jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut rows = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                run_cell(sc, model, data, cell).map_err(|e| Error::Cell {
                    value: sc.sweep.value_string(cell.value),
                    rep: cell.rep,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    sort_results(&mut rows);
    Ok(rows)
}

fn expect_sweep(sc: &SweepConfig, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} expected, got {:?}", sc.sweep)))
    }
}

/// Bit-flip or stuck-at injection-rate sweep.
pub fn run_sweep<T: Real>(sc: &SweepConfig, model: &ModelGraph, data: &LabeledDataset<T>) -> Result<Vec<ResultRow>> {
    expect_sweep(sc, matches!(sc.sweep, Sweep::Rates { .. }), "rate sweep")?;
    run(sc, model, data)
}

pub fn run_line_fault_sweep<T: Real>(
    sc: &SweepConfig,
    model: &ModelGraph,
    data: &LabeledDataset<T>,
) -> Result<Vec<ResultRow>> {
    expect_sweep(sc, matches!(sc.sweep, Sweep::Lines { .. }), "row/column sweep")?;
    run(sc, model, data)
}

pub fn run_dynamic_sweep<T: Real>(
    sc: &SweepConfig,
    model: &ModelGraph,
    data: &LabeledDataset<T>,
) -> Result<Vec<ResultRow>> {
    expect_sweep(sc, matches!(sc.sweep, Sweep::Periods { .. }), "period sweep")?;
    run(sc, model, data)
}

/// Per-value mean accuracy over repetitions, in first-seen row order.
pub fn mean_accuracy_by<K: PartialEq + Clone>(rows: &[ResultRow], key: impl Fn(&ResultRow) -> K) -> Vec<(K, f64)> {
    let mut acc: Vec<(K, f64, usize)> = Vec::new();
    for r in rows {
        let k = key(r);
        match acc.iter_mut().find(|(x, _, _)| *x == k) {
            Some(e) => {
                e.1 += r.accuracy;
                e.2 += 1;
            }
            None => acc.push((k, r.accuracy, 1)),
        }
    }
    acc.into_iter().map(|(k, s, n)| (k, s / n as f64)).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchPhase {
    /// `faultfree` or a mode name.
    pub name: String,
    pub images: usize,
    pub seconds: f64,
    pub per_image_ms: f64,
    /// Per-image time relative to fault-free inference.
    pub ratio: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub phases: Vec<BenchPhase>,
    pub total_seconds: f64,
}

fn timed<F: FnOnce() -> Result<Vec<Prediction>>>(f: F) -> Result<(Vec<Prediction>, Duration)> {
    let start = Instant::now();
    let preds = f()?;
    Ok((preds, start.elapsed()))
}

/// Times fault-free inference and each requested mode, sequentially on the
/// calling thread. `limits` caps the image count per mode (useful for the
/// exact path); ratios compare per-image times.
pub fn benchmark<T: Real>(
    model: &ModelGraph,
    data: &LabeledDataset<T>,
    cfg: CrossbarConfig,
    masks: &[FaultMask],
    modes: &[(Mode, Option<usize>)],
) -> Result<BenchReport> {
    let mut raw = Vec::with_capacity(modes.len() + 1);
    let (preds, t) = timed(|| data.images.iter().map(|img| model.infer_image(img)).collect())?;
    raw.push(("faultfree".to_owned(), preds, t));
    for &(mode, limit) in modes {
        let n = limit.unwrap_or(data.len()).min(data.len());
        let (preds, t) = timed(|| evaluate(model, cfg, masks, mode, &data.images[..n]))?;
        raw.push((mode.as_str().to_owned(), preds, t));
    }
    let per_image = |preds: &Vec<Prediction>, t: &Duration| t.as_secs_f64() / preds.len().max(1) as f64;
    let base = per_image(&raw[0].1, &raw[0].2);
    let total: Duration = raw.iter().map(|(_, _, t)| *t).sum();
    let phases = raw
        .iter()
        .map(|(name, preds, t)| {
            let p = per_image(preds, t);
            BenchPhase {
                name: name.clone(),
                images: preds.len(),
                seconds: t.as_secs_f64(),
                per_image_ms: p * 1e3,
                ratio: if base > 0.0 { p / base } else { f64::INFINITY },
                accuracy: accuracy(preds, &data.labels),
            }
        })
        .collect();
    Ok(BenchReport {
        phases,
        total_seconds: total.as_secs_f64(),
    })
}
