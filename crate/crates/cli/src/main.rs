use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use flim::crossbar::capacity_report;
use flim::dataio::{results_to_csv, LabeledDataset, MODEL_MAGIC};
use flim::faultgen::{gen_line_fault_mask, FAULT_FILE_MAGIC};
use flim::harness::{self, benchmark, cell_masks, mean_accuracy_by, ExperimentConfig};
use flim::{
    read_idx, read_model, CrossbarConfig, FaultMask, FaultType, FaultVectorFile, InjectionSession, LineAxis, ModelGraph,
    Mode, ResultRow, Sweep, SweepConfig, Target,
};

/// Fault injection for binary neural networks on memristive XNOR crossbars.
#[derive(Parser)]
#[command(name = "flim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate fault masks and write a fault-vector file.
    Gen(Opts),
    /// Print the manifest of a fault-vector file or model container as JSON.
    Inspect {
        path: PathBuf,
        /// Also print each mask grid.
        #[arg(long)]
        grid: bool,
        #[arg(long, default_value_t = 40)]
        gate_rows: usize,
        #[arg(long, default_value_t = 10)]
        gate_cols: usize,
        #[arg(long, default_value_t = 1)]
        xbars: usize,
    },
    /// Classify a dataset once with faults injected.
    Run(Opts),
    /// Sweep bit-flip or stuck-at injection rates.
    Sweep(Opts),
    /// Sweep the number of faulty rows or columns.
    Lines(Opts),
    /// Sweep the period of dynamic faults at a fixed rate.
    Dynamic(Opts),
    /// Time fault-free inference against the injection modes.
    Bench(Opts),
}

/// Options shared by the subcommands. A JSON file given with `--config`
/// supplies the same keys (snake_case); flags given on the command line win.
#[derive(Args, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
struct Opts {
    /// JSON file with default values for the options below.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Model container (FLIMMD01).
    #[arg(long)]
    model: Option<PathBuf>,
    /// IDX image file.
    #[arg(long)]
    data_images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    data_labels: Option<PathBuf>,
    /// Use only the first N images.
    #[arg(long)]
    subset: Option<usize>,
    /// Gate rows per crossbar [default: 40].
    #[arg(long)]
    gate_rows: Option<usize>,
    /// Gate columns per crossbar [default: 10].
    #[arg(long)]
    gate_cols: Option<usize>,
    /// Crossbars per layer [default: 1].
    #[arg(long)]
    xbars: Option<usize>,
    /// Target layer(s); each is swept on its own.
    #[arg(long, value_delimiter = ',')]
    layer: Vec<String>,
    /// Inject into all binary conv/dense layers at once (the default target).
    #[arg(long, conflicts_with = "layer")]
    combined: bool,
    /// bitflip, stuckat or dynamic.
    #[arg(long = "type")]
    #[serde(rename = "type")]
    fault_type: Option<FaultType>,
    /// Injection rate(s), comma separated.
    #[arg(long, alias = "rate", value_delimiter = ',')]
    #[serde(alias = "rate")]
    rates: Option<Vec<f64>>,
    /// Faulty row counts (sweeps) or row indices (gen).
    #[arg(long, value_delimiter = ',')]
    rows: Option<Vec<usize>>,
    /// Faulty column counts (sweeps) or column indices (gen).
    #[arg(long, value_delimiter = ',')]
    cols: Option<Vec<usize>>,
    /// Dynamic fault period(s): a fault fires every (n+1)-th operation.
    #[arg(long, alias = "period", value_delimiter = ',')]
    #[serde(alias = "period")]
    periods: Option<Vec<u64>>,
    /// Repetitions per sweep value [default: 100].
    #[arg(long)]
    reps: Option<u64>,
    /// Base seed; repetition r uses seed + r [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Probability that a stuck-at fault is stuck at +1 [default: 0.5].
    #[arg(long)]
    p_one: Option<f64>,
    /// exact, fast or featuremap [default: fast].
    #[arg(long)]
    mode: Option<Mode>,
    /// Output file (CSV for sweeps, fault-vector file for gen).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps; 0 uses every core [default: 0].
    #[arg(long)]
    jobs: Option<usize>,
    /// Fault-vector file to inject (run, bench).
    #[arg(long)]
    faults: Option<PathBuf>,
    /// Image cap for the exact mode in bench [default: 100].
    #[arg(long)]
    exact_images: Option<usize>,
}

macro_rules! prefer_flags {
    ($flags:ident, $file:ident; $($field:ident),*) => {
        $( if $flags.$field.is_none() { $flags.$field = $file.$field; } )*
    };
}

impl Opts {
    fn resolve(mut self) -> Result<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let file: Opts = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        prefer_flags!(self, file; model, data_images, data_labels, subset, gate_rows, gate_cols, xbars,
            fault_type, rates, rows, cols, periods, reps, seed, p_one, mode, out, jobs, faults, exact_images);
        if self.layer.is_empty() && !self.combined {
            self.layer = file.layer;
            self.combined = file.combined;
        }
        ensure!(!(self.combined && !self.layer.is_empty()), "--combined and --layer are exclusive");
        Ok(self)
    }

    fn crossbar(&self) -> Result<CrossbarConfig> {
        Ok(CrossbarConfig::new(
            self.gate_rows.unwrap_or(40),
            self.gate_cols.unwrap_or(10),
            self.xbars.unwrap_or(1),
        )?)
    }

    fn target(&self) -> Target {
        if self.layer.is_empty() {
            Target::Combined
        } else {
            Target::Layers(self.layer.clone())
        }
    }

    fn model(&self) -> Result<ModelGraph> {
        let path = self.model.as_ref().context("--model is required")?;
        Ok(read_model(path)?)
    }

    fn paths(&self) -> Result<(PathBuf, PathBuf, PathBuf)> {
        Ok((
            self.model.clone().context("--model is required")?,
            self.data_images.clone().context("--data-images is required")?,
            self.data_labels.clone().context("--data-labels is required")?,
        ))
    }

    fn data(&self, model: &ModelGraph) -> Result<LabeledDataset<f32>> {
        let (_, images, labels) = self.paths()?;
        let mut data = read_idx::<f32>(images, labels)?;
        if let Some(n) = self.subset {
            data = data.subset(n);
        }
        data.check_classes(model.class_count())?;
        Ok(data)
    }

    fn one_rate(&self, default: f64) -> Result<f64> {
        match self.rates.as_deref() {
            None => Ok(default),
            Some([r]) => Ok(*r),
            Some(_) => bail!("exactly one --rate expected"),
        }
    }

    fn one_period(&self) -> Result<u64> {
        match self.periods.as_deref() {
            None => Ok(0),
            Some([p]) => Ok(*p),
            Some(_) => bail!("exactly one --period expected"),
        }
    }

    /// Single-cell fault description used by gen, run and bench.
    fn single_sweep(&self) -> Result<Sweep> {
        let rate = self.one_rate(0.1)?;
        Ok(match self.fault_type.unwrap_or(FaultType::BitFlip) {
            FaultType::Dynamic => Sweep::Periods {
                rate,
                periods: vec![self.one_period()?],
            },
            fault_type => Sweep::Rates {
                fault_type,
                rates: vec![rate],
                p_one: self.p_one.unwrap_or(0.5),
            },
        })
    }

    fn experiment(&self, sweep: Sweep) -> Result<ExperimentConfig> {
        let (model, images, labels) = self.paths()?;
        Ok(ExperimentConfig {
            model,
            images,
            labels,
            subset: self.subset,
            sweep: SweepConfig {
                crossbar: self.crossbar()?,
                target: self.target(),
                sweep,
                reps: self.reps.unwrap_or(100),
                seed: self.seed.unwrap_or(0),
                mode: self.mode.unwrap_or_default(),
                jobs: self.jobs.unwrap_or(0),
            },
            out: self.out.clone(),
        })
    }
}

fn target_layers(model: &ModelGraph, target: &Target) -> Result<Vec<String>> {
    Ok(target.groups(model)?.into_iter().flat_map(|(_, layers)| layers).collect())
}

/// Masks from a fault-vector file, or generated from the options.
fn masks_for(opts: &Opts, model: &ModelGraph) -> Result<(CrossbarConfig, Vec<FaultMask>)> {
    if let Some(path) = &opts.faults {
        let file = FaultVectorFile::read(path)?;
        return Ok((file.config, file.masks));
    }
    let cfg = opts.crossbar()?;
    let layers = target_layers(model, &opts.target())?;
    let masks = cell_masks(&opts.single_sweep()?, &cfg, &layers, 0, opts.seed.unwrap_or(0))?;
    Ok((cfg, masks))
}

fn gen(opts: Opts) -> Result<()> {
    let cfg = opts.crossbar()?;
    let out = opts.out.clone().context("--out is required")?;
    let layers = match (&opts.model, opts.layer.is_empty()) {
        (Some(_), _) => target_layers(&opts.model()?, &opts.target())?,
        (None, false) => opts.layer.clone(),
        (None, true) => bail!("give --layer, or --model to target every injectable layer"),
    };
    let seed = opts.seed.unwrap_or(0);
    let masks = if opts.rows.is_some() || opts.cols.is_some() {
        let (rows, cols) = (opts.rows.clone().unwrap_or_default(), opts.cols.clone().unwrap_or_default());
        layers
            .iter()
            .map(|l| Ok(gen_line_fault_mask(cfg.gate_rows, cfg.gate_cols, &rows, &cols)?.with_layer(l.clone())))
            .collect::<Result<Vec<_>>>()?
    } else {
        cell_masks(&opts.single_sweep()?, &cfg, &layers, 0, seed)?
    };
    let file = FaultVectorFile::new(cfg, masks)?;
    file.write(&out)?;
    for m in &file.masks {
        eprintln!(
            "{}: {} {} faulty gates (seed {})",
            m.layer,
            m.faulty_count(),
            m.fault_type.as_str(),
            m.seed
        );
    }
    Ok(())
}

fn grid_rows(m: &FaultMask) -> Vec<String> {
    (0..m.gate_rows)
        .map(|r| {
            (0..m.gate_cols)
                .map(|c| match (m.is_faulty(r, c), m.fault_type) {
                    (false, _) => '.',
                    (true, FaultType::StuckAt) => {
                        if m.stuck_value(r, c).value() > 0 {
                            '1'
                        } else {
                            '0'
                        }
                    }
                    (true, FaultType::Dynamic) => 'd',
                    (true, FaultType::BitFlip) => 'x',
                })
                .collect()
        })
        .collect()
}

fn inspect(path: &Path, grid: bool, cfg: CrossbarConfig) -> Result<serde_json::Value> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(FAULT_FILE_MAGIC) {
        let file = FaultVectorFile::from_bytes(&bytes)?;
        let masks: Vec<_> = file
            .masks
            .iter()
            .map(|m| {
                let mut v = json!({
                    "layer": m.layer,
                    "type": m.fault_type.as_str(),
                    "rate": m.rate,
                    "seed": m.seed,
                    "period": m.period,
                    "faulty_gates": m.faulty_count(),
                });
                if grid {
                    v["grid"] = json!(grid_rows(m));
                }
                v
            })
            .collect();
        Ok(json!({ "format": "fault-vector", "crossbar": file.config, "masks": masks }))
    } else if bytes.starts_with(MODEL_MAGIC) {
        let model = flim::dataio::model_from_bytes(&bytes)?;
        let layers: Vec<_> = model
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                json!({
                    "name": l.name,
                    "kind": format!("{:?}", l.kind).split(['(', ' ', '{']).next().unwrap_or_default(),
                    "output_shape": model.output_shape(i),
                    "injectable": l.is_injectable(),
                })
            })
            .collect();
        Ok(json!({
            "format": "model",
            "name": model.name(),
            "input_shape": model.input_shape(),
            "class_count": model.class_count(),
            "layers": layers,
            "crossbar": cfg,
            "capacity": capacity_report(&model, &cfg),
        }))
    } else {
        bail!("{}: neither a fault-vector file nor a model container", path.display())
    }
}

fn run_once(opts: Opts) -> Result<serde_json::Value> {
    let model = opts.model()?;
    let data = opts.data(&model)?;
    let (cfg, masks) = masks_for(&opts, &model)?;
    let mode = opts.mode.unwrap_or_default();
    let mut session = InjectionSession::new(&model, cfg, &masks, mode)?;
    let preds = session.infer_batch(&model, &data.images)?;
    if let Some(out) = &opts.out {
        let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
        writeln!(w, "index,label,prediction")?;
        for (i, (p, l)) in preds.iter().zip(&data.labels).enumerate() {
            writeln!(w, "{i},{l},{}", p.class)?;
        }
        w.flush()?;
    }
    let clean = model.infer_batch(&data.images)?;
    Ok(json!({
        "images": preds.len(),
        "mode": mode.as_str(),
        "faulty_gates": masks.iter().map(|m| (m.layer.clone(), m.faulty_count())).collect::<Vec<_>>(),
        "accuracy": harness::accuracy(&preds, &data.labels),
        "fault_free_accuracy": harness::accuracy(&clean, &data.labels),
    }))
}

fn experiment(opts: Opts, sweep: Sweep) -> Result<()> {
    let exp = opts.experiment(sweep)?;
    let rows = exp.run()?;
    if exp.out.is_none() {
        std::io::stdout().write_all(&results_to_csv(&rows)?)?;
    }
    summarize(&rows);
    Ok(())
}

fn summarize(rows: &[ResultRow]) {
    let means = mean_accuracy_by(rows, |r| (r.layer.clone(), r.param, r.rate));
    for ((layer, param, rate), acc) in means {
        eprintln!("{layer:>10} param={param:<3} rate={rate:<6} mean accuracy {:.2}%", 100.0 * acc);
    }
}

fn sweep(opts: Opts) -> Result<()> {
    let fault_type = opts.fault_type.unwrap_or(FaultType::BitFlip);
    ensure!(fault_type != FaultType::Dynamic, "use `flim dynamic` for dynamic faults");
    let rates = opts.rates.clone().context("--rates is required")?;
    let p_one = opts.p_one.unwrap_or(0.5);
    experiment(
        opts,
        Sweep::Rates {
            fault_type,
            rates,
            p_one,
        },
    )
}

fn lines(opts: Opts) -> Result<()> {
    let sweep = match (opts.rows.clone(), opts.cols.clone()) {
        (Some(counts), None) => Sweep::Lines {
            axis: LineAxis::Rows,
            counts,
        },
        (None, Some(counts)) => Sweep::Lines {
            axis: LineAxis::Cols,
            counts,
        },
        _ => bail!("give exactly one of --rows or --cols"),
    };
    experiment(opts, sweep)
}

fn dynamic(opts: Opts) -> Result<()> {
    let rate = opts.one_rate(0.1)?;
    let periods = opts.periods.clone().context("--periods is required")?;
    experiment(opts, Sweep::Periods { rate, periods })
}

fn bench(opts: Opts) -> Result<serde_json::Value> {
    let model = opts.model()?;
    let data = opts.data(&model)?;
    let (cfg, masks) = masks_for(&opts, &model)?;
    let modes = match opts.mode {
        Some(m) => vec![(m, None)],
        None => vec![
            (Mode::Exact, Some(opts.exact_images.unwrap_or(100))),
            (Mode::Fast, None),
            (Mode::FeatureMap, None),
        ],
    };
    let report = benchmark(&model, &data, cfg, &masks, &modes)?;
    Ok(serde_json::to_value(report)?)
}

fn print_json(v: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(o) => gen(o.resolve()?),
        Command::Inspect {
            path,
            grid,
            gate_rows,
            gate_cols,
            xbars,
        } => print_json(inspect(&path, grid, CrossbarConfig::new(gate_rows, gate_cols, xbars)?)?),
        Command::Run(o) => print_json(run_once(o.resolve()?)?),
        Command::Sweep(o) => sweep(o.resolve()?),
        Command::Lines(o) => lines(o.resolve()?),
        Command::Dynamic(o) => dynamic(o.resolve()?),
        Command::Bench(o) => print_json(bench(o.resolve()?)?),
    }
}
