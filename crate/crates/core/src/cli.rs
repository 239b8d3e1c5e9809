//! Command-line driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::engine::{evaluate, train_epoch, Binding, BnPolicy, ModelState, OptimizerConfig, OptimizerState, Tensor, TrainConfig, DEFAULT_SEED};
use crate::error::{Error, Result};
use crate::freezing::{effective_ratio, make_freeze_plan, FreezePlan, FreezeScheme, RejuvenationPolicy};
use crate::hardware::{self, CostParams};
use crate::io::dataset::{default_data_dir, load_dir, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use crate::io::idx::{read_idx, IMAGES_MAGIC};
use crate::io::{load_bundle, save_bundle, synthetic_digits, Dataset, WeightBundle};
use crate::quant::{build_qgraph, fit_pwl, quantized_predict, sample_uniform};
use crate::topology::{build_graph, count_graph, validate_spec, ActivationKind, Core, CoreSet, NetworkSpec};

const SWEEP_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Parser, Debug)]
#[command(name = "semifreddo", version, about = "Partially frozen CNN backbones: train, quantize, estimate")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the network summary, parameter partition and effective ratios.
    Describe(SpecArg),
    /// Build a freeze plan and store it in a bundle.
    PlanFreeze {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long, value_parser = parse_scheme)]
        scheme: FreezeScheme,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Train a bundle, printing one JSON line per epoch.
    Train {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        /// Freeze scheme used when the bundle has no plan yet.
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<FreezeScheme>,
        #[command(flatten)]
        binding: BindingArgs,
        #[arg(long, default_value_t = 0.05)]
        lr: f32,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long)]
        no_rejuvenation: bool,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Test-set loss and accuracy of a bundle.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        binding: BindingArgs,
        /// Score the quantized graph instead of the float weights.
        #[arg(long)]
        quantized: bool,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Quantize the bundle's weights into an int8 graph.
    Quantize {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        binding: BindingArgs,
        /// Training images used to calibrate activation exponents.
        #[arg(long, default_value_t = 256)]
        calibration: usize,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Classify images, one JSON line per input.
    Infer {
        #[arg(long)]
        bundle: PathBuf,
        /// IDX image file.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        binding: BindingArgs,
        #[arg(long)]
        quantized: bool,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Silicon area of a quantized bundle, or of the reference backbone.
    EstimateArea {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Use the relative unit costs without calibrating to 4 mm^2.
        #[arg(long)]
        uncalibrated: bool,
        /// Per-layer breakdown as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Frame rate for a range of tail repeat counts.
    EstimateFps {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        repeats: Vec<usize>,
        #[arg(long, default_value_t = 640)]
        width: usize,
        #[arg(long, default_value_t = 480)]
        height: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Accuracy and area across uniform freeze ratios, as CSV.
    SweepFreeze {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long, default_value_t = 6)]
        epochs: usize,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Fit a piecewise linear approximation and print it as CSV.
    FitActivation {
        #[arg(value_parser = parse_activation)]
        function: ActivationKind,
        segments: usize,
        #[arg(long, default_value_t = -8.0, allow_negative_numbers = true)]
        lo: f64,
        #[arg(long, default_value_t = 8.0, allow_negative_numbers = true)]
        hi: f64,
        #[arg(long, default_value_t = 4097)]
        points: usize,
        /// Write the CSV here and print a JSON summary instead.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic digit set as IDX files.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10000)]
        train: usize,
        #[arg(long, default_value_t = 2000)]
        test: usize,
    },
}

#[derive(Args, Debug)]
struct SpecArg {
    /// `default`, `desk` or a path to a JSON spec.
    #[arg(long = "spec")]
    spec: Option<String>,
}

impl SpecArg {
    fn resolve(&self, fallback: fn() -> NetworkSpec) -> Result<NetworkSpec> {
        match self.spec.as_deref() {
            None => Ok(fallback()),
            Some("default") => Ok(NetworkSpec::default_backbone()),
            Some("desk") => Ok(NetworkSpec::desk(10)),
            Some(path) => NetworkSpec::from_json(&fs::read_to_string(path)?),
        }
    }
}

fn desk10() -> NetworkSpec {
    NetworkSpec::desk(10)
}

#[derive(Args, Debug, Clone, Copy)]
struct BindingArgs {
    /// Core whose output feeds the head.
    #[arg(long, default_value = "frozen", value_parser = parse_core)]
    head: Core,
    /// Run both trainable cores with the cross-core shuffle.
    #[arg(long)]
    joint: bool,
}

impl BindingArgs {
    fn binding(self) -> Binding {
        Binding {
            head: self.head,
            joint: self.joint,
        }
    }
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory with the four IDX files (default: $SEMIFREDDO_DATA_DIR or ./data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate this many synthetic training digits instead (test split is a fifth).
    #[arg(long)]
    synthetic: Option<usize>,
    /// Use at most this many training images.
    #[arg(long)]
    limit: Option<usize>,
}

impl DataArgs {
    fn load(&self, seed: u64, spec: &NetworkSpec) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.synthetic {
            Some(n) => (synthetic_digits(n, seed), synthetic_digits((n / 5).max(1), seed.wrapping_add(1))),
            None => load_dir(&self.data.clone().unwrap_or_else(default_data_dir))?,
        };
        let train = match self.limit {
            Some(l) => train.take(l),
            None => train,
        };
        Ok((fit_input(&train, spec)?, fit_input(&test, spec)?))
    }
}

fn fit_input(data: &Dataset, spec: &NetworkSpec) -> Result<Dataset> {
    if data.images.c != spec.input.channels {
        return Err(Error::ShapeMismatch(format!(
            "data has {} channels, the network expects {}",
            data.images.c, spec.input.channels
        )));
    }
    if data.classes > spec.head.out_channels {
        return Err(Error::LabelOutOfRange {
            label: data.classes - 1,
            classes: spec.head.out_channels,
        });
    }
    data.padded_to(spec.input.height, spec.input.width)
}

fn parse_scheme(s: &str) -> std::result::Result<FreezeScheme, String> {
    let (name, args) = s.split_once(':').unwrap_or((s, ""));
    let nums = || -> std::result::Result<Vec<f64>, String> {
        args.split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|e| format!("{a:?}: {e}")))
            .collect()
    };
    if name == "core-partition" && args.is_empty() {
        return Ok(FreezeScheme::CorePartition);
    }
    let scheme = match (name, nums()?.as_slice()) {
        ("uniform", &[rho]) => FreezeScheme::Uniform { rho },
        ("ramp-down", &[first, last]) => FreezeScheme::RampDown { first, last },
        ("ramp-up", &[first, last]) => FreezeScheme::RampUp { first, last },
        _ => {
            return Err(format!(
                "expected uniform:R, ramp-down:A,B, ramp-up:A,B or core-partition, got {s:?}"
            ))
        }
    };
    scheme.validate().map_err(|e| e.to_string())?;
    Ok(scheme)
}

fn parse_core(s: &str) -> std::result::Result<Core, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_activation(s: &str) -> std::result::Result<ActivationKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parse `argv` (program name first), run, and return the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn line(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Describe(spec) => describe(&spec.resolve(NetworkSpec::default_backbone)?, out),
        Command::PlanFreeze { spec, scheme, bundle } => {
            let mut b = open_or_new(&bundle, &spec)?;
            let graph = build_graph(&b.spec)?;
            let plan = make_freeze_plan(&graph, scheme, seed)?;
            line(
                out,
                &json!({
                    "scheme": plan.scheme,
                    "seed": plan.seed,
                    "effective_ratio": plan.effective_ratio,
                    "layers": plan.layer_ratios(&graph),
                }),
            )?;
            b.plan = Some(plan);
            save_bundle(&bundle, &b)
        }
        Command::Train {
            spec,
            bundle,
            epochs,
            scheme,
            binding,
            lr,
            batch_size,
            no_rejuvenation,
            data,
        } => {
            let mut b = open_or_new(&bundle, &spec)?;
            let graph = build_graph(&b.spec)?;
            let plan = match (&b.plan, scheme) {
                (Some(p), _) => p.clone(),
                (None, s) => make_freeze_plan(&graph, s.unwrap_or(FreezeScheme::Uniform { rho: 0.0 }), seed)?,
            };
            let mut state = match b.weights.take() {
                Some(w) => w,
                None => ModelState::init(&graph, seed),
            };
            state.check(&graph)?;
            let (train, _) = data.load(seed, &b.spec)?;
            let binding = binding.binding();
            let cfg = TrainConfig {
                batch_size,
                optimizer: OptimizerConfig {
                    lr,
                    ..OptimizerConfig::default()
                },
                binding,
                bn_policy: if binding.head == Core::Frozen {
                    BnPolicy::BatchStats
                } else {
                    BnPolicy::FrozenCoreFixed
                },
                rejuvenation: if no_rejuvenation {
                    RejuvenationPolicy::disabled()
                } else {
                    RejuvenationPolicy::default()
                },
            };
            let mut history: Vec<serde_json::Value> = b
                .metrics
                .as_ref()
                .and_then(|m| m.get("epochs"))
                .and_then(|e| e.as_array().cloned())
                .unwrap_or_default();
            let mut opt = OptimizerState::new(&state);
            for _ in 0..epochs {
                let report = train_epoch(&graph, &mut state, &plan, &train, &cfg, &mut opt, history.len())?;
                writeln!(out, "{}", report.to_json_line())?;
                history.push(serde_json::to_value(&report)?);
            }
            b.weights = Some(state);
            b.plan = Some(plan);
            b.qgraph = None;
            b.metrics = Some(json!({ "epochs": history }));
            save_bundle(&bundle, &b)
        }
        Command::Eval {
            bundle,
            binding,
            quantized,
            data,
        } => {
            let b = load_bundle(&bundle, None)?;
            let (_, test) = data.load(seed, &b.spec)?;
            if quantized {
                let qg = b.require_qgraph()?;
                let (correct, total) = quantized_accuracy(qg, &test)?;
                line(
                    out,
                    &json!({ "accuracy": correct as f64 / total as f64, "samples": total, "quantized": true }),
                )
            } else {
                let graph = build_graph(&b.spec)?;
                let r = evaluate(&graph, b.require_weights()?, &test, binding.binding(), 64)?;
                line(out, &r)
            }
        }
        Command::Quantize {
            bundle,
            binding,
            calibration,
            data,
        } => {
            let mut b = load_bundle(&bundle, None)?;
            let graph = build_graph(&b.spec)?;
            let (train, _) = data.load(seed, &b.spec)?;
            let batches = calibration_batches(&train, calibration);
            let plan = b.plan.clone().unwrap_or_else(|| FreezePlan::none(&graph));
            let qg = build_qgraph(&graph, b.require_weights()?, &plan, binding.binding(), &batches)?;
            let census = hardware::census(&qg).0;
            line(out, &json!({ "layers": qg.layers.len(), "census": census }))?;
            b.qgraph = Some(qg);
            save_bundle(&bundle, &b)
        }
        Command::Infer {
            bundle,
            input,
            binding,
            quantized,
            limit,
        } => {
            let b = load_bundle(&bundle, None)?;
            let images = load_images(&input, limit)?;
            let data = Dataset::new(images.clone(), vec![0; images.n], b.spec.head.out_channels.max(2))?;
            let x = fit_input(&data, &b.spec)?.images;
            let scores: Vec<Vec<f32>> = if quantized {
                let qg = b.require_qgraph()?;
                let mut rows = Vec::with_capacity(x.n);
                for start in (0..x.n).step_by(64) {
                    let chunk = x.batch_slice(start, 64.min(x.n - start));
                    rows.extend(quantized_predict(qg, &chunk)?.iter().map(|q| q.dequantize()));
                }
                rows
            } else {
                let graph = build_graph(&b.spec)?;
                let state = b.require_weights()?;
                let mut rows = Vec::with_capacity(x.n);
                for start in (0..x.n).step_by(64) {
                    let chunk = x.batch_slice(start, 64.min(x.n - start));
                    let fwd = crate::engine::forward_pass(&graph, state, &chunk, crate::engine::ExecOptions::eval(binding.binding()))?;
                    let o = fwd.output(&graph);
                    let k = o.c * o.h * o.w;
                    rows.extend(o.data.chunks(k).map(|r| r.to_vec()));
                }
                rows
            };
            for (i, s) in scores.iter().enumerate() {
                line(
                    out,
                    &json!({ "index": i, "prediction": crate::engine::train::argmax(s), "scores": s }),
                )?;
            }
            Ok(())
        }
        Command::EstimateArea {
            spec,
            bundle,
            uncalibrated,
            csv,
        } => {
            let qg = match &bundle {
                Some(path) => load_bundle(path, None)?.require_qgraph()?.clone(),
                None => hardware::reference_qgraph(&spec.resolve(NetworkSpec::default_backbone)?)?,
            };
            let params = if uncalibrated {
                CostParams::default()
            } else {
                hardware::calibrated_default()?
            };
            let report = hardware::estimate_area(&qg, &params)?;
            if let Some(path) = csv {
                report.write_csv(fs::File::create(path)?)?;
            }
            line(
                out,
                &json!({
                    "frozen_scaler_mm2": report.frozen_scaler_mm2,
                    "trainable_mult_mm2": report.trainable_mult_mm2,
                    "sram_mm2": report.sram_mm2,
                    "overhead_mm2": report.overhead_mm2,
                    "total_mm2": report.total_mm2,
                    "reduction_factor": report.reduction_factor,
                    "census": report.census,
                    "baseline": hardware::compare_baseline(&report, &params),
                    "params": params,
                }),
            )
        }
        Command::EstimateFps {
            spec,
            repeats,
            width,
            height,
            csv,
        } => {
            let spec = spec.resolve(NetworkSpec::default_backbone)?;
            let params = CostParams::default();
            let reports = repeats
                .iter()
                .map(|&r| hardware::estimate_fps(&spec, r, (width, height), &params))
                .collect::<Result<Vec<_>>>()?;
            for r in &reports {
                line(out, r)?;
            }
            if let Some(path) = csv {
                hardware::write_fps_csv(&reports, fs::File::create(path)?)?;
            }
            Ok(())
        }
        Command::SweepFreeze { spec, epochs, data } => {
            let spec = spec.resolve(desk10)?;
            let (train, test) = data.load(seed, &spec)?;
            let params = hardware::calibrated_default()?;
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["ratio", "accuracy", "total_mm2"])?;
            for rho in SWEEP_RATIOS {
                let (acc, area) = sweep_point(&spec, rho, epochs, seed, &train, &test, &params)?;
                writeln!(err, "ratio {rho}: accuracy {acc:.4}, {area:.4} mm2")?;
                w.write_record(&[rho.to_string(), acc.to_string(), area.to_string()])?;
            }
            w.flush()?;
            Ok(())
        }
        Command::FitActivation {
            function,
            segments,
            lo,
            hi,
            points,
            out: path,
        } => {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!("empty range [{lo}, {hi}]")));
            }
            let pwl = fit_pwl(&sample_uniform(|x| function.eval(x), lo, hi, points), segments)?;
            match path {
                Some(p) => {
                    pwl.write_csv(fs::File::create(p)?)?;
                    line(
                        out,
                        &json!({ "function": function, "segments": pwl.segments(), "max_error": pwl.max_error }),
                    )
                }
                None => {
                    pwl.write_csv(&mut *out)?;
                    writeln!(err, "max_error={}", pwl.max_error)?;
                    Ok(())
                }
            }
        }
        Command::MakeDataset { out: dir, train, test } => {
            fs::create_dir_all(&dir)?;
            synthetic_digits(train, seed).write_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
            synthetic_digits(test, seed.wrapping_add(1)).write_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
            line(out, &json!({ "dir": dir, "train": train, "test": test }))
        }
    }
}

fn open_or_new(path: &Path, spec: &SpecArg) -> Result<WeightBundle> {
    if path.exists() {
        let expected = spec.spec.as_ref().map(|_| spec.resolve(desk10)).transpose()?;
        load_bundle(path, expected.as_ref())
    } else {
        Ok(WeightBundle::new(spec.resolve(desk10)?))
    }
}

fn describe(spec: &NetworkSpec, out: &mut dyn Write) -> Result<()> {
    let violations = validate_spec(spec);
    if !violations.is_empty() {
        line(out, &json!({ "valid": false, "violations": violations }))?;
        return Err(Error::InvalidSpec(format!("{} violations", violations.len())));
    }
    let graph = build_graph(spec)?;
    let partition = count_graph(&graph, |_| true);
    let plan = make_freeze_plan(&graph, FreezeScheme::CorePartition, 0)?;
    line(
        out,
        &json!({
            "valid": true,
            "topology": spec.topology_hash(),
            "input": spec.input,
            "tail_repeat_count": spec.tail_repeat_count,
            "partition": partition,
            "total_params": partition.total(),
            "single_core_ratio": partition.single_core_ratio(),
            "two_core_ratio": partition.two_core_ratio(),
            "effective_ratio": {
                "frozen_core": effective_ratio(&plan, &graph, CoreSet::FROZEN),
                "one_trainable_core": effective_ratio(&plan, &graph, CoreSet::ONE_TRAINABLE),
                "two_trainable_cores": effective_ratio(&plan, &graph, CoreSet::ALL),
            },
        }),
    )
}

fn load_images(path: &Path, limit: Option<usize>) -> Result<Tensor> {
    let img = read_idx(path, IMAGES_MAGIC)?;
    if img.dims.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected n x h x w images, got dims {:?}", img.dims)));
    }
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    let n = limit.map_or(n, |l| l.min(n));
    let data = img.data[..n * h * w].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(n, 1, h, w, data)
}

fn calibration_batches(train: &Dataset, count: usize) -> Vec<Tensor> {
    let idx: Vec<usize> = (0..count.clamp(1, train.len())).collect();
    idx.chunks(64).map(|c| train.batch(c).0).collect()
}

fn quantized_accuracy(qg: &crate::quant::QGraph, test: &Dataset) -> Result<(usize, usize)> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(64) {
        let (x, labels) = test.batch(chunk);
        let outs = quantized_predict(qg, &x)?;
        correct += outs
            .iter()
            .zip(&labels)
            .filter(|(q, &l)| crate::engine::train::argmax(&q.dequantize()) == l)
            .count();
    }
    Ok((correct, test.len()))
}

fn sweep_point(
    spec: &NetworkSpec,
    rho: f64,
    epochs: usize,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    params: &CostParams,
) -> Result<(f64, f64)> {
    let graph = build_graph(spec)?;
    let plan = make_freeze_plan(&graph, FreezeScheme::Uniform { rho }, seed)?;
    let mut state = ModelState::init(&graph, seed);
    let cfg = TrainConfig::default();
    let mut opt = OptimizerState::new(&state);
    for e in 0..epochs {
        train_epoch(&graph, &mut state, &plan, train, &cfg, &mut opt, e)?;
    }
    let acc = evaluate(&graph, &state, test, cfg.binding, 64)?.accuracy;
    let qg = build_qgraph(&graph, &state, &plan, cfg.binding, &calibration_batches(train, 128))?;
    Ok((acc, hardware::estimate_area(&qg, params)?.total_mm2))
}
