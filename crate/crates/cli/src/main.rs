use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hello_core::archive::{save_archive, ElementWidth, NamedTensor, TensorArchive, TensorData};
use hello_core::config::{AugmentConfig, LabelArm, PipelineConfig};
use hello_core::downstream::StudentRun;
use hello_core::encoders::{load_pretrained_encoder, ENC_PREFIX};
use hello_core::evalsuite::{cross_arch_eval, gdumb_run, storage_report};
use hello_core::pipeline::{Pipeline, RunOptions, Stage};
use hello_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "hello", version, about = "Online image-to-label projectors for dataset distillation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every stage in order.
    Pipeline(Common),
    /// Generate or import the datasets and build the image encoder.
    MakeData(Common),
    /// Train the weak-teacher trajectory.
    TrainTeachers(Common),
    /// Select the teacher ensemble and fit the projector adapters.
    FitProjector(Common),
    /// Build the synthetic set from observer-ranked patches.
    InitSynthetic(Common),
    /// Refine the synthetic images against the projector encoder.
    UpdateImages(Common),
    /// Train students with online projector labels.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        arm: Option<ArmChoice>,
    },
    /// Train students of several architectures on one synthetic set.
    EvalCrossArch {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "convnet-s,convnet-w")]
        archs: Vec<String>,
    },
    /// Class-incremental evaluation with a distilled memory.
    EvalContinual {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Compare persisted soft-label bytes with the projector artifact.
    ReportStorage(StorageArgs),
    /// Convert a safetensors checkpoint into an encoder archive.
    ImportEncoder(ImportArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// CE weight of the transfer objective.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "rank-enc", allow_negative_numbers = true)]
    rank_enc: Option<i64>,
    #[arg(long = "rank-head", allow_negative_numbers = true)]
    rank_head: Option<i64>,
    /// Inclusive teacher epoch window, `lo,hi`.
    #[arg(long = "teacher-window", value_parser = parse_window)]
    teacher_window: Option<(usize, usize)>,
    /// Downstream epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// CE weight of the student objective.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum)]
    aug: Option<AugChoice>,
    /// Skip stages whose artifacts match the current config.
    #[arg(long)]
    resume: bool,
    /// Use upstream artifacts produced under a different config.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AugChoice {
    Default,
    None,
    FlipShift,
    Mixup,
    Cutmix,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmChoice {
    Online,
    HardOnly,
    OneHotMse,
}

#[derive(Args)]
struct StorageArgs {
    #[command(flatten)]
    common: Common,
    /// Downstream epochs K; with --n-synthetic and --classes the report is
    /// computed from these numbers alone.
    #[arg(long)]
    k: Option<u64>,
    #[arg(long)]
    n_synthetic: Option<u64>,
    #[arg(long)]
    classes: Option<u64>,
    #[arg(long, default_value_t = 4)]
    width: u64,
    #[arg(long, default_value_t = 0)]
    ipc: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "toy-encoder")]
    arch: String,
    /// `channels,height,width`
    #[arg(long, value_delimiter = ',', default_value = "3,32,32")]
    input_shape: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pixel_mean: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pixel_std: Option<Vec<f64>>,
}

fn parse_window(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected `lo,hi`")?;
    let lo = lo.trim().parse().map_err(|_| format!("bad window start {lo:?}"))?;
    let hi = hi.trim().parse().map_err(|_| format!("bad window end {hi:?}"))?;
    Ok((lo, hi))
}

enum Failure {
    Config(Error),
    Stage(&'static str, Error),
    Other(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Stage(..) | Failure::Other(_) => EXIT_STAGE,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e),
            e => Failure::Other(e),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) | Failure::Other(e) => write!(f, "{e}"),
            Failure::Stage(name, e) => write!(f, "stage {name} failed: {e}"),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn rank(v: i64, flag: &str) -> Outcome<usize> {
    usize::try_from(v).map_err(|_| Failure::Config(Error::Config(format!("{flag} must be a positive integer, got {v}"))))
}

fn load_config(c: &Common) -> Outcome<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| Failure::Config(Error::Config(e.to_string())))?,
        None => {
            let mut d = PipelineConfig::default();
            d.apply_env()?;
            d
        }
    };
    if let Some(o) = &c.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.hyper.seed = s;
    }
    if let Some(l) = c.lambda {
        cfg.hyper.lambda_ce = l;
    }
    if let Some(r) = c.rank_enc {
        cfg.transfer.rank_encoder = rank(r, "--rank-enc")?;
    }
    if let Some(r) = c.rank_head {
        cfg.transfer.rank_head = rank(r, "--rank-head")?;
    }
    if let Some(w) = c.teacher_window {
        cfg.teachers.window = w;
    }
    if let Some(k) = c.epochs {
        cfg.hyper.epochs_k = k;
    }
    if let Some(b) = c.beta {
        cfg.hyper.beta_ce = b;
    }
    if let Some(a) = c.aug {
        let none = AugmentConfig::none();
        cfg.downstream.augment = match a {
            AugChoice::Default => AugmentConfig::default(),
            AugChoice::None => none,
            AugChoice::FlipShift => AugmentConfig {
                mixup_prob: 0.0,
                cutmix_prob: 0.0,
                ..AugmentConfig::default()
            },
            AugChoice::Mixup => AugmentConfig {
                mixup_prob: 1.0,
                cutmix_prob: 0.0,
                ..none
            },
            AugChoice::Cutmix => AugmentConfig {
                mixup_prob: 0.0,
                cutmix_prob: 1.0,
                ..none
            },
        };
    }
    Ok(cfg)
}

fn open(c: &Common) -> Outcome<Pipeline> {
    let cfg = load_config(c)?;
    let opts = RunOptions {
        resume: c.resume,
        force: c.force,
    };
    Pipeline::new(cfg, opts).map_err(|e| Failure::Config(Error::Config(e.to_string())))
}

fn run_stages(p: &mut Pipeline, stages: &[Stage]) -> Outcome {
    for &s in stages {
        if p.opts.resume && p.is_current(s) {
            println!("{:<10} current, skipped", s.name());
            continue;
        }
        p.run_stage(s).map_err(|e| Failure::Stage(s.name(), e))?;
        println!("{:<10} done", s.name());
    }
    Ok(())
}

fn cmd_pipeline(c: &Common) -> Outcome {
    let mut p = open(c)?;
    let mut stages: Vec<Stage> = Stage::ALL.to_vec();
    if !p.cfg.synthesis.image_update {
        stages.retain(|s| *s != Stage::Update);
    }
    run_stages(&mut p, &stages)?;
    print_student_summary(&p);
    Ok(())
}

fn print_student_summary(p: &Pipeline) {
    if let Ok(text) = std::fs::read_to_string(p.ws.summary()) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
            println!("student accuracy: mean {} std {} over seeds {}", v["mean"], v["std"], v["seeds"]);
        }
    }
}

fn eval_stage<T>(name: &'static str, r: hello_core::Result<T>) -> Outcome<T> {
    r.map_err(|e| Failure::Stage(name, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text).map_err(|e| Failure::Other(Error::Io { path: path.into(), source: e }))
}

fn cmd_cross_arch(c: &Common, archs: &[String]) -> Outcome {
    let p = open(c)?;
    let name = "eval-cross-arch";
    let syn = eval_stage(name, p.load_synthetic())?;
    let proj = eval_stage(name, p.load_projector())?;
    let test = eval_stage(name, p.load_test())?;
    let run = StudentRun::from_config(&p.cfg);
    let table = eval_stage(name, cross_arch_eval(&syn.data, &proj, archs, &test, &run, &p.cfg.downstream.seeds))?;
    print!("{table}");
    write_json(&p.ws.root.join("cross_arch.json"), &table)
}

fn cmd_continual(c: &Common, steps: usize) -> Outcome {
    let p = open(c)?;
    let name = "eval-continual";
    let train = eval_stage(name, p.load_train())?;
    let test = eval_stage(name, p.load_test())?;
    let proj = eval_stage(name, p.load_projector())?;
    let run = StudentRun::from_config(&p.cfg);
    let r = eval_stage(name, gdumb_run(&train, &test, steps, &proj, &p.cfg.synthesis, &run, p.cfg.hyper.seed))?;
    for (i, (acc, mem)) in r.accuracies.iter().zip(&r.memory_sizes).enumerate() {
        println!("step {:>2}: classes {:?} memory {:>4} accuracy {:.4}", i + 1, r.partition[i], mem, acc);
    }
    write_json(&p.ws.root.join(format!("continual_{steps}.json")), &r)
}

fn cmd_storage(a: &StorageArgs) -> Outcome {
    let report = match (a.k, a.n_synthetic, a.classes) {
        (Some(k), Some(n), Some(c)) => {
            let width = ElementWidth::from_bytes(a.width).map_err(|e| Failure::Config(Error::Config(e.to_string())))?;
            storage_report(k, n, c, width, a.ipc, None, None)?
        }
        (None, None, None) => {
            let p = open(&a.common)?;
            let syn = eval_stage("report-storage", p.load_synthetic())?;
            eval_stage("report-storage", p.storage_report(&syn))?
        }
        _ => return Err(Failure::Config(Error::Config("--k, --n-synthetic and --classes go together".into()))),
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    } else {
        println!("{report}");
    }
    Ok(())
}

fn cmd_import(a: &ImportArgs) -> Outcome {
    let bytes = std::fs::read(&a.input).map_err(|e| Failure::Other(Error::Io { path: a.input.clone(), source: e }))?;
    let st = safetensors::SafeTensors::deserialize(&bytes)
        .map_err(|e| Failure::Other(Error::Validation(format!("{}: {e}", a.input.display()))))?;
    if a.input_shape.len() != 3 {
        return Err(Failure::Config(Error::Config("--input-shape needs three values".into())));
    }
    let channels = a.input_shape[0];
    let mut archive = TensorArchive::new();
    let mut d_f = None;
    for (name, view) in st.tensors() {
        let data = match view.dtype() {
            safetensors::Dtype::F32 => TensorData::F32(
                view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
            ),
            safetensors::Dtype::F64 => TensorData::F64(
                view.data()
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
                    .collect(),
            ),
            other => return Err(Failure::Other(Error::Validation(format!("{name}: unsupported dtype {other:?}")))),
        };
        let key = name.trim_start_matches(ENC_PREFIX).replace('.', "/");
        if key == "fc/weight" && view.shape().len() == 2 {
            d_f = Some(view.shape()[1]);
        }
        archive.insert(format!("{ENC_PREFIX}{key}"), NamedTensor::new(view.shape().to_vec(), data)?)?;
    }
    let d_f = d_f.ok_or_else(|| Failure::Other(Error::MissingWeights(vec![format!("{ENC_PREFIX}fc/weight")])))?;
    let shape: Vec<f64> = a.input_shape.iter().map(|&d| d as f64).collect();
    let mean = a.pixel_mean.clone().unwrap_or_else(|| vec![0.5; channels]);
    let std = a.pixel_std.clone().unwrap_or_else(|| vec![0.25; channels]);
    archive.insert_str("meta/arch", &a.arch)?;
    archive.insert_scalars("meta/d_f", &[d_f as f64], ElementWidth::Eight)?;
    archive.insert_scalars("meta/input_shape", &shape, ElementWidth::Eight)?;
    archive.insert_scalars("meta/pixel_mean", &mean, ElementWidth::Eight)?;
    archive.insert_scalars("meta/pixel_std", &std, ElementWidth::Eight)?;
    let enc = load_pretrained_encoder(&archive, &a.arch)?;
    save_archive(&a.output, &archive)?;
    println!("imported {} ({} tensors) -> {}", enc.id(), st.len(), a.output.display());
    Ok(())
}

fn dispatch(cmd: &Cmd) -> Outcome {
    match cmd {
        Cmd::Pipeline(c) => cmd_pipeline(c),
        Cmd::MakeData(c) => run_stages(&mut open(c)?, &[Stage::Data, Stage::Encoder]),
        Cmd::TrainTeachers(c) => run_stages(&mut open(c)?, &[Stage::Teachers]),
        Cmd::FitProjector(c) => run_stages(&mut open(c)?, &[Stage::Projector]),
        Cmd::InitSynthetic(c) => run_stages(&mut open(c)?, &[Stage::Synthesis]),
        Cmd::UpdateImages(c) => {
            let mut p = open(c)?;
            p.cfg.synthesis.image_update = true;
            let mut p = Pipeline::new(p.cfg.clone(), p.opts)?;
            run_stages(&mut p, &[Stage::Update])
        }
        Cmd::TrainStudent { common, arm } => {
            let mut p = open(common)?;
            if let Some(a) = arm {
                let mut cfg = p.cfg.clone();
                cfg.downstream.arm = match a {
                    ArmChoice::Online => LabelArm::Online,
                    ArmChoice::HardOnly => LabelArm::HardOnly,
                    ArmChoice::OneHotMse => LabelArm::OneHotMse,
                };
                p = Pipeline::new(cfg, p.opts)?;
            }
            run_stages(&mut p, &[Stage::Student])?;
            print_student_summary(&p);
            Ok(())
        }
        Cmd::EvalCrossArch { common, archs } => cmd_cross_arch(common, archs),
        Cmd::EvalContinual { common, steps } => cmd_continual(common, *steps),
        Cmd::ReportStorage(a) => cmd_storage(a),
        Cmd::ImportEncoder(a) => cmd_import(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
