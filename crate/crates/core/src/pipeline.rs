//! End-to-end orchestration. Every stage reads its inputs from and writes its
//! outputs to the run directory, so stages can be rerun independently. A
//! state file records the hash each stage last completed under; resuming
//! skips stages whose hash still matches.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::archive::{load_archive, save_archive, ElementWidth};
use crate::config::PipelineConfig;
use crate::data::{toy_dataset, LabeledDataset, Split, ToyConfig, TOY_CLASS_NAMES};
use crate::downstream::{train_student, EvalTarget, StudentRun};
use crate::encoders::{load_pretrained_encoder, ImageEncoder, ToyTextEncoder, DEFAULT_TEMPLATES};
use crate::error::{Error, Result};
use crate::evalsuite::{mean_std, storage_report, StorageReport};
use crate::projector::{load_artifact, save_projector, Projector};
use crate::rng::{child_rng, streams};
use crate::synthesis::{image_update, init_synthetic, Observer, SyntheticDataset};
use crate::teachers::{select_teachers, train_trajectory, EnsembleManifest, TeacherCheckpoint, TeacherEnsemble};
use crate::transfer::{fit_projector, TransferConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    Encoder,
    Teachers,
    Projector,
    Synthesis,
    Update,
    Student,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Data,
        Stage::Encoder,
        Stage::Teachers,
        Stage::Projector,
        Stage::Synthesis,
        Stage::Update,
        Stage::Student,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Encoder => "encoder",
            Stage::Teachers => "teachers",
            Stage::Projector => "projector",
            Stage::Synthesis => "synthesis",
            Stage::Update => "update",
            Stage::Student => "student",
        }
    }

    /// Stages whose artifacts this one reads.
    pub fn inputs(self) -> &'static [Stage] {
        match self {
            Stage::Data => &[],
            Stage::Encoder => &[Stage::Data],
            Stage::Teachers => &[Stage::Data],
            Stage::Projector => &[Stage::Data, Stage::Encoder, Stage::Teachers],
            Stage::Synthesis => &[Stage::Data, Stage::Encoder, Stage::Projector],
            Stage::Update => &[Stage::Encoder, Stage::Projector, Stage::Synthesis],
            Stage::Student => &[Stage::Data, Stage::Encoder, Stage::Projector, Stage::Synthesis],
        }
    }
}

/// File layout of one run directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data/train.arc")
    }
    pub fn test_data(&self) -> PathBuf {
        self.root.join("data/test.arc")
    }
    pub fn encoder(&self) -> PathBuf {
        self.root.join("encoder/encoder.arc")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("teachers.json")
    }
    pub fn trajectory_log(&self) -> PathBuf {
        self.root.join("teacher/trajectory.json")
    }
    pub fn projector(&self) -> PathBuf {
        self.root.join("projector/projector.arc")
    }
    pub fn transfer_log(&self) -> PathBuf {
        self.root.join("projector/transfer_log.jsonl")
    }
    pub fn synthetic(&self) -> PathBuf {
        self.root.join("synthetic")
    }
    pub fn updated(&self) -> PathBuf {
        self.root.join("synthetic_updated")
    }
    pub fn update_trace(&self) -> PathBuf {
        self.root.join("synthetic_updated/trace.json")
    }
    pub fn student_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("student/seed{seed}"))
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("student/summary.json")
    }
    pub fn storage(&self) -> PathBuf {
        self.root.join("storage.json")
    }
    pub fn state(&self) -> PathBuf {
        self.root.join("stages.json")
    }

    pub fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Data => vec![self.train_data(), self.test_data()],
            Stage::Encoder => vec![self.encoder()],
            Stage::Teachers => vec![self.trajectory_log()],
            Stage::Projector => vec![self.manifest(), self.projector()],
            Stage::Synthesis => vec![self.synthetic().join("synthetic.arc")],
            Stage::Update => vec![self.updated().join("synthetic.arc")],
            Stage::Student => vec![self.summary()],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub config_hash: String,
    pub completed: BTreeMap<Stage, String>,
}

impl StageState {
    pub fn load(path: &Path) -> Result<Self> {
        match fs::read_to_string(path) {
            Ok(t) => Ok(serde_json::from_str(&t)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Reference images per class used to centre the toy encoder.
const REFERENCE_PER_CLASS: usize = 20;
const REFERENCE_SEED: u64 = 0x7e1c_0de5;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Per-stage hashes chained in stage order: each covers the config sections
/// the stage uses plus the previous stage's hash.
pub fn stage_hashes(cfg: &PipelineConfig) -> BTreeMap<Stage, String> {
    let c = cfg;
    let sections = |s: Stage| match s {
        Stage::Data => json!({"data": c.data, "seed": c.hyper.seed}),
        Stage::Encoder => json!({"encoder": c.encoder}),
        // ensemble selection happens in the projector stage, so changing the
        // window does not retrain the trajectory
        Stage::Teachers => {
            let t = &c.teachers;
            json!({
                "arch": t.arch, "epochs": t.total_epochs, "save_every": t.save_every, "batch": t.batch_size,
                "lr": t.lr, "momentum": t.momentum, "wd": t.weight_decay, "width": c.element_width,
            })
        }
        Stage::Projector => json!({
            "transfer": c.transfer, "lambda": c.hyper.lambda_ce,
            "window": c.teachers.window, "count": c.teachers.count, "space": c.teachers.space,
        }),
        Stage::Synthesis => json!({
            "ipc": c.synthesis.ipc, "grid": c.synthesis.grid, "crops": c.synthesis.crops_per_image,
            "crop_min": c.synthesis.crop_min, "crop_max": c.synthesis.crop_max,
            "sources": c.synthesis.sources_per_class, "observer": c.synthesis.observer,
        }),
        Stage::Update => json!({
            "on": c.synthesis.image_update, "steps": c.synthesis.update_steps,
            "lr": c.synthesis.update_lr, "factor": c.synthesis.degrade_factor,
        }),
        Stage::Student => json!({"downstream": c.downstream, "hyper": c.hyper}),
    };
    let mut out = BTreeMap::new();
    let mut prev = String::new();
    for s in Stage::ALL {
        let text = format!("{}|{}|{}", prev, s.name(), sections(s));
        let h = hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string();
        out.insert(s, h.clone());
        prev = h;
    }
    out
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Skip stages whose recorded hash matches.
    pub resume: bool,
    /// Accept upstream artifacts recorded under a different hash.
    pub force: bool,
}

/// What the teachers stage leaves behind besides the checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub saved_epochs: Vec<usize>,
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentSummary {
    pub arm: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub ws: Workspace,
    pub opts: RunOptions,
    hashes: BTreeMap<Stage, String>,
    state: StageState,
}

impl Pipeline {
    /// Validates the config before anything touches the disk.
    pub fn new(cfg: PipelineConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        crate::tune_allocator();
        let ws = Workspace::new(cfg.output_dir.clone());
        let state = StageState::load(&ws.state())?;
        let hashes = stage_hashes(&cfg);
        Ok(Self {
            cfg,
            ws,
            opts,
            hashes,
            state,
        })
    }

    pub fn state(&self) -> &StageState {
        &self.state
    }

    pub fn hash(&self, stage: Stage) -> &str {
        &self.hashes[&stage]
    }

    fn enabled(&self, stage: Stage) -> bool {
        stage != Stage::Update || self.cfg.synthesis.image_update
    }

    pub fn is_current(&self, stage: Stage) -> bool {
        self.state.completed.get(&stage).map(String::as_str) == Some(self.hash(stage))
            && self.ws.outputs(stage).iter().all(|p| p.exists())
    }

    fn check_inputs(&self, stage: Stage) -> Result<()> {
        if self.opts.force {
            return Ok(());
        }
        for &up in stage.inputs() {
            match self.state.completed.get(&up) {
                Some(h) if h == self.hash(up) => {}
                Some(h) => {
                    return Err(Error::State(format!(
                        "{} artifacts were produced under hash {h}, current config expects {}; rerun it or pass --force",
                        up.name(),
                        self.hash(up)
                    )))
                }
                None => {
                    return Err(Error::State(format!(
                        "stage {} needs {} artifacts; run that stage first",
                        stage.name(),
                        up.name()
                    )))
                }
            }
        }
        Ok(())
    }

    /// Runs every enabled stage in order, skipping current ones when resuming.
    pub fn run_all(&mut self) -> Result<Vec<(Stage, bool)>> {
        let mut ran = Vec::new();
        for s in Stage::ALL {
            if !self.enabled(s) {
                continue;
            }
            if self.opts.resume && self.is_current(s) {
                log::info!("stage {} is current, skipping", s.name());
                ran.push((s, false));
                continue;
            }
            self.run_stage(s)?;
            ran.push((s, true));
        }
        Ok(ran)
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        self.check_inputs(stage)?;
        log::info!("stage {} starting", stage.name());
        match stage {
            Stage::Data => self.stage_data()?,
            Stage::Encoder => self.stage_encoder()?,
            Stage::Teachers => self.stage_teachers()?,
            Stage::Projector => self.stage_projector()?,
            Stage::Synthesis => self.stage_synthesis()?,
            Stage::Update => self.stage_update()?,
            Stage::Student => self.stage_student()?,
        }
        self.state.config_hash = self.cfg.hash();
        self.state.completed.insert(stage, self.hash(stage).to_string());
        // downstream records no longer describe what is on disk
        let later: Vec<Stage> = Stage::ALL.iter().copied().filter(|s| *s > stage && s.inputs().contains(&stage)).collect();
        for s in later {
            if self.state.completed.get(&s).map(String::as_str) != Some(self.hash(s)) {
                self.state.completed.remove(&s);
            }
        }
        self.state.save(&self.ws.state())?;
        log::info!("stage {} done", stage.name());
        Ok(())
    }

    fn width(&self) -> ElementWidth {
        self.cfg.element_width
    }

    pub fn load_train(&self) -> Result<LabeledDataset> {
        LabeledDataset::load(self.ws.train_data())
    }

    pub fn load_test(&self) -> Result<LabeledDataset> {
        LabeledDataset::load(self.ws.test_data())
    }

    pub fn load_encoder(&self) -> Result<ImageEncoder> {
        load_pretrained_encoder(&load_archive(self.ws.encoder())?, &self.cfg.encoder.arch)
    }

    pub fn text_encoder(&self) -> Result<ToyTextEncoder> {
        ToyTextEncoder::new(self.cfg.encoder.text_vocab, self.cfg.encoder.embed_dim, self.cfg.hyper.seed)
    }

    pub fn templates(&self) -> Vec<String> {
        if self.cfg.encoder.templates.is_empty() {
            DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()
        } else {
            self.cfg.encoder.templates.clone()
        }
    }

    pub fn load_projector(&self) -> Result<Projector> {
        let art = load_artifact(self.ws.projector())?;
        let expected = self.hash(Stage::Projector);
        if !self.opts.force && art.meta.config_hash != expected {
            return Err(Error::State(format!(
                "projector artifact has config hash {}, current config expects {expected}; pass --force to use it",
                art.meta.config_hash
            )));
        }
        Projector::from_artifact(&art, Arc::new(self.load_encoder()?), &self.text_encoder()?)
    }

    /// The synthetic set the student trains on: the updated one when the
    /// image update is enabled.
    pub fn load_synthetic(&self) -> Result<SyntheticDataset> {
        if self.cfg.synthesis.image_update {
            SyntheticDataset::load(self.ws.updated())
        } else {
            SyntheticDataset::load(self.ws.synthetic())
        }
    }

    fn stage_data(&self) -> Result<()> {
        let d = &self.cfg.data;
        let (train, test) = if d.source == "toy" {
            let toy = ToyConfig {
                classes: d.classes,
                per_class: d.train_per_class,
                size: d.image_size,
                label_noise: d.label_noise,
            };
            let test_cfg = ToyConfig {
                per_class: d.test_per_class,
                label_noise: 0.0,
                ..toy.clone()
            };
            (
                toy_dataset(&toy, Split::Train, self.cfg.hyper.seed)?,
                toy_dataset(&test_cfg, Split::Test, self.cfg.hyper.seed)?,
            )
        } else {
            let tr = LabeledDataset::load(d.train_path.as_ref().expect("validated"))?;
            let te = LabeledDataset::load(d.test_path.as_ref().expect("validated"))?;
            if tr.class_names != te.class_names || tr.image_shape() != te.image_shape() {
                return Err(Error::Validation("train and test archives disagree on classes or image shape".into()));
            }
            (tr, te)
        };
        train.save(self.ws.train_data(), ElementWidth::Eight)?;
        test.save(self.ws.test_data(), ElementWidth::Eight)
    }

    fn stage_encoder(&self) -> Result<()> {
        let e = &self.cfg.encoder;
        let archive = if e.source == "toy" {
            let train = self.load_train()?;
            let reference = if self.cfg.data.source == "toy" {
                // an independent draw from the same generator stands in for
                // the encoder's pretraining domain
                let d = &self.cfg.data;
                let cfg = ToyConfig {
                    classes: d.classes,
                    per_class: REFERENCE_PER_CLASS,
                    size: d.image_size,
                    label_noise: 0.0,
                };
                toy_dataset(&cfg, Split::Train, self.cfg.hyper.seed ^ REFERENCE_SEED)?.images
            } else {
                let n = train.len().min(REFERENCE_PER_CLASS * train.num_classes());
                train.images.slice(ndarray::s![..n, .., .., ..]).to_owned()
            };
            ImageEncoder::toy(train.image_shape(), e.embed_dim, self.cfg.hyper.seed)?
                .centered_on(reference.view())?
                .to_archive(self.width())?
        } else {
            let a = load_archive(&e.source)?;
            load_pretrained_encoder(&a, &e.arch)?;
            a
        };
        save_archive(self.ws.encoder(), &archive)
    }

    fn stage_teachers(&self) -> Result<()> {
        let train = self.load_train()?;
        let t = &self.cfg.teachers;
        let traj = train_trajectory(&train, t, self.cfg.hyper.seed)?;
        for ck in &traj.checkpoints {
            ck.save(&self.ws.root, self.width())?;
        }
        let record = TrajectoryRecord {
            saved_epochs: traj.checkpoints.iter().map(|c| c.epoch).collect(),
            epoch_losses: traj.epoch_losses,
        };
        write_json(&self.ws.trajectory_log(), &record)
    }

    /// Selects the ensemble from the saved trajectory and records it.
    fn select_ensemble(&self) -> Result<TeacherEnsemble> {
        let t = &self.cfg.teachers;
        let path = self.ws.trajectory_log();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: TrajectoryRecord = serde_json::from_str(&text)?;
        let mut checkpoints = Vec::new();
        for &epoch in &record.saved_epochs {
            if epoch >= t.window.0 && epoch <= t.window.1 {
                checkpoints.push(TeacherCheckpoint::load(self.ws.root.join("teacher").join(TeacherCheckpoint::file_name(epoch)))?);
            }
        }
        let ens = select_teachers(&checkpoints, t.window, t.count, t.space)?;
        EnsembleManifest::for_ensemble(&ens).save(self.ws.manifest())?;
        Ok(ens)
    }

    fn stage_projector(&self) -> Result<()> {
        let train = self.load_train()?;
        let encoder = Arc::new(self.load_encoder()?);
        let text = self.text_encoder()?;
        let ens = self.select_ensemble()?;
        let mut p = Projector::from_text(encoder, &text, &train.class_names, &self.templates())?;
        p.meta.config_hash = self.hash(Stage::Projector).to_string();
        let x = &self.cfg.transfer;
        let filter = regex::Regex::new(&x.layer_filter).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = child_rng(self.cfg.hyper.seed, streams::LORA_INIT);
        p.attach_lora(&|n| filter.is_match(n), x.rank_encoder, x.rank_head, x.lora_scale, &mut rng)?;
        let tcfg = TransferConfig::from_sections(&self.cfg.hyper, x, &self.cfg.teachers);
        let (fitted, log) = fit_projector(&p, &train, &ens, &tcfg, self.cfg.hyper.seed)?;
        log.write_jsonl(self.ws.transfer_log())?;
        save_projector(&fitted.artifact()?, self.ws.projector(), self.width())
    }

    fn observer(&self) -> Result<Box<dyn Observer>> {
        let o = &self.cfg.synthesis.observer;
        if o == "projector" {
            return Ok(Box::new(self.load_projector()?));
        }
        let epoch: usize = o
            .strip_prefix("teacher:")
            .and_then(|e| e.parse().ok())
            .ok_or_else(|| Error::Config(format!("bad observer {o:?}")))?;
        let path = self.ws.root.join("teacher").join(TeacherCheckpoint::file_name(epoch));
        Ok(Box::new(TeacherCheckpoint::load(path)?.net))
    }

    fn stage_synthesis(&self) -> Result<()> {
        let train = self.load_train()?;
        let observer = self.observer()?;
        let syn = init_synthetic(&train, observer.as_ref(), &self.cfg.synthesis, self.cfg.hyper.seed)?;
        syn.save(self.ws.synthetic())
    }

    fn stage_update(&self) -> Result<()> {
        let syn = SyntheticDataset::load(self.ws.synthetic())?;
        let p = self.load_projector()?;
        let enc = p.effective_encoder()?;
        let s = &self.cfg.synthesis;
        let (images, trace) = image_update(&syn.data.images, &enc, s.update_steps, s.update_lr, s.degrade_factor)?;
        let mut out = syn.clone();
        out.data.images = images;
        out.save(self.ws.updated())?;
        write_json(&self.ws.update_trace(), &trace)
    }

    fn stage_student(&self) -> Result<()> {
        let syn = self.load_synthetic()?;
        let test = self.load_test()?;
        let p = self.load_projector()?;
        let run = StudentRun::from_config(&self.cfg);
        let mut accs = Vec::new();
        for &seed in &self.cfg.downstream.seeds {
            let eval = EvalTarget { test: &test, classes: None };
            let (student, log) = train_student(&syn.data, Some(&p), Some(eval), &run, seed)?;
            let dir = self.ws.student_dir(seed);
            log.write_jsonl(dir.join("metrics.jsonl"))?;
            save_archive(dir.join("student.arc"), &student.to_archive("net/", self.width())?)?;
            accs.push(log.final_accuracy().unwrap_or(f64::NAN));
        }
        let (mean, std) = mean_std(&accs);
        let summary = StudentSummary {
            arm: format!("{:?}", run.arm).to_lowercase(),
            seeds: self.cfg.downstream.seeds.clone(),
            accuracies: accs,
            mean,
            std,
        };
        log::info!("student accuracy {:.4} +/- {:.4}", mean, std);
        write_json(&self.ws.summary(), &summary)?;
        let report = self.storage_report(&syn)?;
        write_json(&self.ws.storage(), &report)
    }

    /// Hypothetical persisted-label bytes for this run next to the actual
    /// projector artifact size.
    pub fn storage_report(&self, syn: &SyntheticDataset) -> Result<StorageReport> {
        let art = load_artifact(self.ws.projector())?;
        storage_report(
            self.cfg.hyper.epochs_k as u64,
            syn.data.len() as u64,
            syn.data.num_classes() as u64,
            ElementWidth::Four,
            syn.ipc() as u64,
            Some(&art),
            Some(&syn.data),
        )
    }
}

/// Class names for a toy config, in class-id order.
pub fn toy_class_names(classes: usize) -> Vec<String> {
    TOY_CLASS_NAMES[..classes].iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_hash_chain() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.hyper.beta_ce = 0.5;
        let (ha, hb) = (stage_hashes(&a), stage_hashes(&b));
        for s in [Stage::Data, Stage::Encoder, Stage::Teachers, Stage::Projector, Stage::Synthesis, Stage::Update] {
            assert_eq!(ha[&s], hb[&s]);
        }
        assert_ne!(ha[&Stage::Student], hb[&Stage::Student]);
        let mut c = a.clone();
        c.transfer.rank_head = 4;
        let hc = stage_hashes(&c);
        assert_eq!(ha[&Stage::Teachers], hc[&Stage::Teachers]);
        assert_ne!(ha[&Stage::Projector], hc[&Stage::Projector]);
        assert_ne!(ha[&Stage::Student], hc[&Stage::Student]);
    }

    #[test]
    fn invalid_config_rejected_before_io() {
        let mut cfg = PipelineConfig::default();
        cfg.output_dir = PathBuf::from("/nonexistent/should/not/be/created");
        cfg.transfer.rank_encoder = 0;
        assert!(matches!(Pipeline::new(cfg, RunOptions::default()), Err(Error::Config(_))));
        assert!(!Path::new("/nonexistent/should").exists());
    }
}
