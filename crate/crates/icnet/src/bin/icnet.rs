use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use icnet::ablate::{ablation_csv, evaluate_pairs, variants};
use icnet::checkpoint::{load_checkpoint, save_checkpoint};
use icnet::config::load_config;
use icnet::dataset::{load_dataset, write_synthetic, Dataset, SynthSpec};
use icnet::error::io_err;
use icnet::icvol::{self, Payload};
use icnet::image::export_slice;
use icnet::landmarks::{load_landmarks, save_landmarks};
use icnet::run::{configure_allocator, run_manifest, RunLock, RUN_MANIFEST};
use icnet::IoError;
use icnet_core::eval::{landmark_error, multi_atlas_segment, propagate_landmarks, segmentation_scores};
use icnet_core::losses::{folding_count_per_axis, LossReport};
use icnet_core::network::FcnParams;
use icnet_core::sampler::{warp, warp_nearest};
use icnet_core::trainer::{
    curve_csv, decade_grid, grid_search, refine, select_grid_point, train_with_progress, Split, TrainConfig,
};
use icnet_core::volume::Axis;
use icnet_core::{Error as CoreError, GridShape, LabelMap, Volume};

#[derive(Parser)]
#[command(name = "icnet", version, about = "Unsupervised inverse-consistent deformable registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic population with labels, landmarks and true flows.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `N` for a cube or `DXxDYxDZ`.
        #[arg(long, default_value = "24")]
        shape: String,
        /// The population holds twice this many subjects.
        #[arg(long)]
        pairs: usize,
        #[arg(long, default_value_t = 3.0)]
        max_disp: f64,
        #[arg(long, default_value_t = icnet_core::synth::DEFAULT_BLOBS)]
        blobs: usize,
        out: PathBuf,
    },
    /// Train a network on every volume of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curves: PathBuf,
    },
    /// Predict both flows of a pair.
    Register {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out_flow_ab: Option<PathBuf>,
        #[arg(long)]
        out_flow_ba: Option<PathBuf>,
        /// `A` warped onto `B`.
        #[arg(long)]
        out_warped: Option<PathBuf>,
    },
    /// Multi-atlas segmentation by majority vote.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        atlases: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average of atlas landmarks mapped onto a test volume.
    Landmarks {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        atlases: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlap, surface and landmark metrics as CSV.
    Metrics {
        #[arg(long, requires = "truth")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        truth: Option<PathBuf>,
        #[arg(long, requires = "landmarks_truth")]
        landmarks_pred: Option<PathBuf>,
        #[arg(long, requires = "landmarks_pred")]
        landmarks_truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count folding voxels of a flow.
    Folding {
        #[arg(long)]
        flow: PathBuf,
    },
    /// Train the full, no-inverse and no-anti-folding variants and compare them.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one slice as PGM (scalar) or PPM (flow).
    ExportSlice {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train over a decade grid of alpha and beta.
    GridSearch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Decade exponents `LO:HI` for alpha.
        #[arg(long, default_value = "-5:5")]
        alpha_exp: String,
        /// Decade exponents `LO:HI` for beta.
        #[arg(long, default_value = "-5:5")]
        beta_exp: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct Tuning {
    /// Fine-tune on each pair before predicting.
    #[arg(long)]
    refine: bool,
    /// Source of the loss weights and refinement settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    X,
    Y,
    Z,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        IoError::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    configure_allocator();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("icnet: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("icnet: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Data(m)) => {
            eprintln!("icnet: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("icnet: {m}");
            ExitCode::from(4)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Synth {
            seed,
            shape,
            pairs,
            max_disp,
            blobs,
            out,
        } => synth(seed, &shape, pairs, max_disp, blobs, &out),
        Command::Train {
            data,
            config,
            seed,
            out,
            curves,
        } => train_cmd(&data, config.as_deref(), seed, &out, &curves),
        Command::Register {
            ckpt,
            a,
            b,
            tuning,
            out_flow_ab,
            out_flow_ba,
            out_warped,
        } => register(&ckpt, &a, &b, &tuning, out_flow_ab, out_flow_ba, out_warped),
        Command::Segment {
            ckpt,
            atlases,
            test,
            tuning,
            out,
        } => segment(&ckpt, &atlases, &test, &tuning, &out),
        Command::Landmarks {
            ckpt,
            atlases,
            test,
            tuning,
            out,
        } => landmarks(&ckpt, &atlases, &test, &tuning, &out),
        Command::Metrics {
            pred,
            truth,
            landmarks_pred,
            landmarks_truth,
            out,
        } => metrics(pred.zip(truth), landmarks_pred.zip(landmarks_truth), &out),
        Command::Folding { flow } => folding(&flow),
        Command::Ablate { data, config, out } => ablate(&data, config.as_deref(), &out),
        Command::ExportSlice {
            input,
            axis,
            index,
            out,
        } => export(&input, axis, index, &out),
        Command::GridSearch {
            data,
            config,
            alpha_exp,
            beta_exp,
            out,
        } => grid(&data, config.as_deref(), &alpha_exp, &beta_exp, &out),
    }
}

fn parse_shape(s: &str) -> Result<GridShape, Failure> {
    let dims = s
        .split('x')
        .map(str::parse::<usize>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| Failure::Usage(format!("invalid shape `{s}`")))?;
    match dims[..] {
        [n] => Ok(GridShape::cube(n)?),
        [x, y, z] => Ok(GridShape::new(x, y, z)?),
        _ => Err(Failure::Usage(format!("shape `{s}` needs 1 or 3 extents"))),
    }
}

fn parse_exponents(s: &str) -> Result<(i32, i32), Failure> {
    let bad = || Failure::Usage(format!("invalid exponent range `{s}`, expected LO:HI"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let (lo, hi) = (lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?);
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn config_or_default(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    Ok(match path {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    })
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| IoError::from(io_err(path)(e)).into())
}

fn load_training_set(data: &Path) -> Result<Dataset, Failure> {
    let dataset = load_dataset(data)?;
    if dataset.subjects.len() < 2 {
        return Err(Failure::Data(format!(
            "{}: need at least 2 subjects, found {}",
            data.display(),
            dataset.subjects.len()
        )));
    }
    Ok(dataset)
}

fn synth(seed: u64, shape: &str, pairs: usize, max_disp: f64, blobs: usize, out: &Path) -> Outcome {
    if pairs == 0 {
        return Err(Failure::Usage("--pairs must be at least 1".into()));
    }
    let spec = SynthSpec {
        seed,
        shape: parse_shape(shape)?,
        pairs,
        max_disp,
        blobs,
    };
    let _lock = RunLock::acquire(out)?;
    let dataset = write_synthetic(&spec, out)?;
    println!("wrote {} subjects to {}", dataset.subjects.len(), out.display());
    Ok(())
}

fn print_row(split: Split, iteration: usize, r: &LossReport) {
    eprintln!(
        "{:>6} {:<10} sim {:.4e} smo {:.4e} inv {:.4e} ant {:.4e} total {:.4e} folds {}",
        iteration,
        split.as_str(),
        r.sim,
        r.smo,
        r.inv,
        r.ant,
        r.total,
        r.folding_count
    );
}

fn train_cmd(data: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path, curves: &Path) -> Outcome {
    let mut config = config_or_default(config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let dataset = load_training_set(data)?;
    let _lock = RunLock::acquire(out)?;
    let volumes = dataset.volumes();
    let outcome = train_with_progress(&volumes, &config, |row| {
        if row.split == Split::Validation {
            print_row(row.split, row.iteration, &row.report);
        }
    })?;
    save_checkpoint(&outcome.params, out)?;
    write_text(&out.join(RUN_MANIFEST), &run_manifest(&config, data, volumes.len(), &outcome.split))?;
    write_text(curves, &curve_csv(&outcome.curve))?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

/// Parameters to use for one pair, refined on it when requested.
fn pair_params<'a>(
    params: &'a FcnParams,
    tuning: &Tuning,
    config: &TrainConfig,
    a: &Volume,
    b: &Volume,
) -> Result<Cow<'a, FcnParams>, Failure> {
    if tuning.refine {
        Ok(Cow::Owned(refine(params, config, a, b)?))
    } else {
        Ok(Cow::Borrowed(params))
    }
}

fn register(
    ckpt: &Path,
    a: &Path,
    b: &Path,
    tuning: &Tuning,
    out_ab: Option<PathBuf>,
    out_ba: Option<PathBuf>,
    out_warped: Option<PathBuf>,
) -> Outcome {
    let params = load_checkpoint(ckpt)?;
    let config = config_or_default(tuning.config.as_deref())?;
    let (va, vb) = (icvol::load_volume(a)?, icvol::load_volume(b)?);
    let params = pair_params(&params, tuning, &config, &va, &vb)?;
    let (fab, fba) = params.predict(&va, &vb)?;
    if let Some(p) = out_ab {
        icvol::save_flow(&fab, &p)?;
    }
    if let Some(p) = out_ba {
        icvol::save_flow(&fba, &p)?;
    }
    if let Some(p) = out_warped {
        icvol::save_volume(&warp(&va, &fab)?, &p)?;
    }
    let [ax, ay, az] = folding_count_per_axis(&fab);
    let [bx, by, bz] = folding_count_per_axis(&fba);
    println!("folding_ab {} ({ax} {ay} {az})", ax + ay + az);
    println!("folding_ba {} ({bx} {by} {bz})", bx + by + bz);
    Ok(())
}

fn segment(ckpt: &Path, atlases: &Path, test: &Path, tuning: &Tuning, out: &Path) -> Outcome {
    let params = load_checkpoint(ckpt)?;
    let config = config_or_default(tuning.config.as_deref())?;
    let atlases = load_dataset(atlases)?;
    let target = icvol::load_volume(test)?;
    let mut warped = Vec::new();
    for atlas in &atlases.subjects {
        let Some(labels) = &atlas.labels else { continue };
        let p = pair_params(&params, tuning, &config, &atlas.volume, &target)?;
        let (fab, _) = p.predict(&atlas.volume, &target)?;
        warped.push(warp_nearest(labels, &fab)?);
    }
    if warped.is_empty() {
        return Err(Failure::Data(format!("{}: no atlas has a label map", atlases.dir.display())));
    }
    icvol::save_labels(&multi_atlas_segment(&warped)?, out)?;
    println!("fused {} atlases into {}", warped.len(), out.display());
    Ok(())
}

fn landmarks(ckpt: &Path, atlases: &Path, test: &Path, tuning: &Tuning, out: &Path) -> Outcome {
    let params = load_checkpoint(ckpt)?;
    let config = config_or_default(tuning.config.as_deref())?;
    let atlases = load_dataset(atlases)?;
    let target = icvol::load_volume(test)?;
    let mut mapped = Vec::new();
    for atlas in &atlases.subjects {
        let Some(points) = &atlas.landmarks else { continue };
        let p = pair_params(&params, tuning, &config, &atlas.volume, &target)?;
        let (_, fba) = p.predict(&atlas.volume, &target)?;
        mapped.push((fba, points.clone()));
    }
    if mapped.is_empty() {
        return Err(Failure::Data(format!("{}: no atlas has landmarks", atlases.dir.display())));
    }
    save_landmarks(&propagate_landmarks(&mapped)?, out)?;
    println!("propagated landmarks from {} atlases into {}", mapped.len(), out.display());
    Ok(())
}

fn metrics(labels: Option<(PathBuf, PathBuf)>, points: Option<(PathBuf, PathBuf)>, out: &Path) -> Outcome {
    if labels.is_none() && points.is_none() {
        return Err(Failure::Usage(
            "give --pred/--truth, --landmarks-pred/--landmarks-truth or both".into(),
        ));
    }
    let mut csv = String::from("kind,id,metric,value\n");
    if let Some((pred, truth)) = labels {
        let (pred, truth) = (icvol::load_labels(&pred)?, icvol::load_labels(&truth)?);
        for s in segmentation_scores(&pred, &truth)? {
            let o = s.overlap;
            for (m, v) in [("dsc", o.dsc), ("sen", o.sen), ("ppv", o.ppv)] {
                csv.push_str(&format!("label,{},{m},{v}\n", s.label));
            }
            if let Some(d) = s.surface {
                csv.push_str(&format!("label,{},asd,{}\nlabel,{},hd,{}\n", s.label, d.asd, s.label, d.hd));
            }
        }
    }
    if let Some((pred, truth)) = points {
        let e = landmark_error(&load_landmarks(&pred)?, &load_landmarks(&truth)?)?;
        for (i, v) in e.per_landmark.iter().enumerate() {
            csv.push_str(&format!("landmark,{i},error,{v}\n"));
        }
        csv.push_str(&format!("landmark,all,mean_error,{}\n", e.mean));
    }
    write_text(out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn folding(flow: &Path) -> Outcome {
    let flow = icvol::load_flow(flow)?;
    let [x, y, z] = folding_count_per_axis(&flow);
    println!("folding_count {}\nx {x}\ny {y}\nz {z}", x + y + z);
    Ok(())
}

fn ablate(data: &Path, config: Option<&Path>, out: &Path) -> Outcome {
    let base = config_or_default(config)?;
    let dataset = load_training_set(data)?;
    let _lock = RunLock::acquire(out)?;
    let volumes = dataset.volumes();
    let mut rows = Vec::new();
    for (name, weights) in variants(base.weights) {
        eprintln!("training {name}");
        let config = TrainConfig { weights, ..base.clone() };
        let outcome = train_with_progress(&volumes, &config, |row| {
            if row.split == Split::Validation {
                print_row(row.split, row.iteration, &row.report);
            }
        })?;
        let dir = out.join(name);
        save_checkpoint(&outcome.params, &dir)?;
        write_text(&dir.join(RUN_MANIFEST), &run_manifest(&config, data, volumes.len(), &outcome.split))?;
        write_text(&out.join(format!("{name}_curves.csv")), &curve_csv(&outcome.curve))?;
        let pairs = outcome.split.validation_pairs();
        rows.extend(evaluate_pairs(name, &outcome.params, &volumes, &pairs, &weights, config.reduction)?);
    }
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    println!("{:<16} {:>12} {:>12} {:>12} {:>12} {:>8}", "variant", "sim", "smo", "inv", "ant", "folds");
    for (name, _) in variants(base.weights) {
        let mine: Vec<_> = rows.iter().filter(|r| r.variant == name).collect();
        let mean = LossReport::mean(&mine.iter().map(|r| r.report).collect::<Vec<_>>());
        let folds: usize = mine.iter().map(|r| r.folding_ab + r.folding_ba).sum();
        println!(
            "{name:<16} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {folds:>8}",
            mean.sim, mean.smo, mean.inv, mean.ant
        );
    }
    Ok(())
}

fn export(input: &Path, axis: AxisArg, index: usize, out: &Path) -> Outcome {
    let (header, payload) = icvol::read(input)?;
    let [dx, dy, dz] = header.dims;
    let shape = GridShape::new(dx, dy, dz)?;
    let vol = match payload {
        Payload::Real(data) => Volume::new(shape, header.channels, data)?,
        Payload::Labels(labels) => LabelMap::new(shape, labels)?.to_volume(),
    };
    let axis = match axis {
        AxisArg::X => Axis::X,
        AxisArg::Y => Axis::Y,
        AxisArg::Z => Axis::Z,
    };
    let img = export_slice(&vol, axis, index, out)?;
    println!("{}x{} image written to {}", img.width, img.height, out.display());
    Ok(())
}

fn grid(data: &Path, config: Option<&Path>, alpha_exp: &str, beta_exp: &str, out: &Path) -> Outcome {
    let base = config_or_default(config)?;
    let (alo, ahi) = parse_exponents(alpha_exp)?;
    let (blo, bhi) = parse_exponents(beta_exp)?;
    let dataset = load_training_set(data)?;
    let points = grid_search(&dataset.volumes(), &base, &decade_grid(alo, ahi), &decade_grid(blo, bhi))?;
    let mut csv = String::from("alpha,beta,sim,smo,inv,ant,total,folding_count\n");
    for p in &points {
        let r = &p.validation;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.alpha, p.beta, r.sim, r.smo, r.inv, r.ant, r.total, r.folding_count
        ));
    }
    write_text(out, &csv)?;
    match select_grid_point(&points) {
        Some(p) => println!("selected alpha = {} beta = {}", p.alpha, p.beta),
        None => println!("no fold-free grid point"),
    }
    Ok(())
}
