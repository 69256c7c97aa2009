//! The `objtraj` command line: one workflow per invocation, each writing a
//! manifest next to its outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::archive::{file_digest, write_atomic};
use crate::backbone::{load_backbone, Backbone};
use crate::config::RunConfig;
use crate::data::{sample_batch, PairedDataset};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorTrainer, StepReport, TSampler};
use crate::image::{load_png, save_png, Image};
use crate::metrics::{evaluate_one, pd_curve, summarize, write_records, EvalRecord};
use crate::objective::{constant_map, ObjectiveMap};
use crate::oos::{
    grid_search_oos, read_map, sroos_infer, write_map, DistanceContext, LpipsWeights, OosGridSpec,
    Resolution,
};
use crate::predictor::{
    build_oos_dataset, predict_map, NamedPair, OoeBatch, Predictor, PredictorContext,
    PredictorLossReport, PredictorTrainer,
};

const PATCH_STREAM: u64 = 0x7061_7463;
const PREDICTOR_STREAM: u64 = 0x6f6f_6531;

pub const GENERATOR_FILE: &str = "generator.safetensors";
pub const TRAINING_FILE: &str = "generator_training.safetensors";
pub const PREDICTOR_FILE: &str = "predictor.safetensors";

#[derive(Debug, Parser)]
#[command(
    name = "objtraj",
    version,
    about = "Objective-trajectory super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory holding checkpoints, maps and tables.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Where `infer` takes its objective map from.
#[derive(Debug, Clone, Copy, PartialEq)]
enum MapSource {
    Predictor,
    Constant(f64),
}

impl FromStr for MapSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "predictor" {
            return Ok(MapSource::Predictor);
        }
        let t: f64 = s
            .parse()
            .map_err(|_| format!("expected `predictor` or a t value in [0, 1], got `{s}`"))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(format!("t = {t} outside [0, 1]"));
        }
        Ok(MapSource::Constant(t))
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the conditional generator on uniformly sampled objectives.
    TrainGen {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the training checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Grid-search per-pixel optimal objectives and write LR-sized maps.
    BuildOosMaps {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Train the objective-map predictor against the frozen generator.
    TrainPredictor {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Super-resolve LR images with a predicted or constant objective map.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        /// An LR PNG or a directory of them.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `predictor` or a constant t.
        #[arg(long, default_value = "predictor")]
        map: MapSource,
    },
    /// Score constant-t, predicted-map and grid-searched outputs.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Mean PSNR and LPIPS of constant-t outputs over a t grid.
    PdCurve {
        #[command(flatten)]
        run: RunArgs,
        /// `start:end:step` or a comma list; defaults to the config's grid.
        #[arg(long)]
        grid: Option<OosGridSpec>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Parse and check a configuration without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainGen { .. } => "train-gen",
            Command::BuildOosMaps { .. } => "build-oos-maps",
            Command::TrainPredictor { .. } => "train-predictor",
            Command::Infer { .. } => "infer",
            Command::Evaluate { .. } => "evaluate",
            Command::PdCurve { .. } => "pd-curve",
            Command::ValidateConfig { .. } => "validate-config",
        }
    }
}

/// Parses `argv` (program name first), runs the workflow and returns the
/// process exit status: 0 on success, 2 on usage errors, 1 otherwise. Errors
/// are reported as one JSON line on stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let name = cli.command.name();
    let argv: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(cli.command, &argv) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let line = serde_json::json!({
                "command": name,
                "error": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            1
        }
    }
}

fn execute(command: Command, argv: &[String]) -> Result<serde_json::Value> {
    let started = Instant::now();
    let name = command.name();
    if let Command::ValidateConfig { config } = &command {
        let cfg = RunConfig::load(config)?;
        return Ok(serde_json::json!({
            "command": name,
            "valid": true,
            "config_digest": cfg.digest()?,
        }));
    }
    let (mut ctx, outcome) = match command {
        Command::TrainGen { run, resume } => {
            let mut ctx = Session::open(&run)?;
            let out = train_gen(&mut ctx, resume)?;
            (ctx, out)
        }
        Command::BuildOosMaps { run, split } => {
            let mut ctx = Session::open(&run)?;
            let out = build_maps(&mut ctx, split)?;
            (ctx, out)
        }
        Command::TrainPredictor { run } => {
            let mut ctx = Session::open(&run)?;
            let out = train_predictor(&mut ctx)?;
            (ctx, out)
        }
        Command::Infer {
            run,
            input,
            out,
            map,
        } => {
            let mut ctx = Session::open(&run)?;
            let o = infer(&mut ctx, &input, &out, map)?;
            (ctx, o)
        }
        Command::Evaluate { run, split } => {
            let mut ctx = Session::open(&run)?;
            let out = evaluate(&mut ctx, split)?;
            (ctx, out)
        }
        Command::PdCurve { run, grid, split } => {
            let mut ctx = Session::open(&run)?;
            let grid = grid.unwrap_or_else(|| ctx.cfg.oos.grid.clone());
            let out = pd(&mut ctx, &grid, split)?;
            (ctx, out)
        }
        Command::ValidateConfig { .. } => unreachable!("handled above"),
    };
    ctx.manifest.wall_time_secs = started.elapsed().as_secs_f64();
    let path = ctx.write_manifest(name, argv)?;
    Ok(serde_json::json!({
        "command": name,
        "manifest": path,
        "outputs": outcome,
    }))
}

/// Everything needed to re-execute a command.
#[derive(Debug, Default, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub code_version: String,
    pub config_digest: String,
    pub config: serde_json::Value,
    pub config_dir: PathBuf,
    pub seeds: BTreeMap<String, u64>,
    pub data_digests: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

struct Session {
    cfg: RunConfig,
    run: PathBuf,
    backbone: Backbone,
    weights: LpipsWeights,
    device: Device,
    manifest: Manifest,
}

impl Session {
    fn open(args: &RunArgs) -> Result<Self> {
        let cfg = RunConfig::load(&args.config)?;
        std::fs::create_dir_all(&args.run).map_err(|e| Error::io(&args.run, e))?;
        let backbone = load_backbone(&cfg.backbone_spec())?;
        let weights = LpipsWeights::uniform(&backbone);
        let mut seeds = BTreeMap::new();
        seeds.insert("run".into(), cfg.seed);
        seeds.insert("generator_init".into(), cfg.generator.seed);
        seeds.insert("predictor_init".into(), cfg.predictor.seed);
        seeds.insert("backbone".into(), cfg.backbone.seed);
        let mut inputs = BTreeMap::new();
        inputs.insert("backbone".into(), backbone.digest().to_string());
        let manifest = Manifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: cfg.digest()?,
            config: serde_json::to_value(&cfg)?,
            config_dir: cfg.base_dir.clone(),
            seeds,
            inputs,
            ..Default::default()
        };
        Ok(Self {
            cfg,
            run: args.run.clone(),
            backbone,
            weights,
            device: Device::Cpu,
            manifest,
        })
    }

    fn distance(&self) -> DistanceContext<'_> {
        DistanceContext {
            backbone: &self.backbone,
            weights: &self.weights,
        }
    }

    fn pairs(&mut self, split: Split) -> Result<Vec<NamedPair>> {
        let dir = match split {
            Split::Train => self.cfg.train_dir(),
            Split::Test => self
                .cfg
                .test_dir()
                .ok_or_else(|| Error::config("data.test is not set"))?,
        };
        let ds = PairedDataset::open(&dir, self.cfg.generator.scale)?;
        for (k, v) in ds.digests() {
            self.manifest
                .data_digests
                .insert(format!("{}/{k}", split.name()), v);
        }
        ds.load()
    }

    /// The trained generator, frozen.
    fn generator(&mut self) -> Result<Generator> {
        let path = self.run.join(GENERATOR_FILE);
        if !path.is_file() {
            return Err(Error::config(format!(
                "no generator checkpoint at {}; run train-gen first",
                path.display()
            )));
        }
        let (g, digest) = Generator::load(&path, DType::F32, &self.device)?;
        if g.config != self.cfg.generator {
            return Err(Error::config(
                "generator checkpoint does not match the config",
            ));
        }
        self.manifest.inputs.insert("generator_file".into(), digest);
        self.manifest
            .inputs
            .insert("generator_params".into(), g.digest()?);
        Ok(g.freeze())
    }

    fn predictor(&mut self) -> Result<Predictor> {
        let path = self.run.join(PREDICTOR_FILE);
        if !path.is_file() {
            return Err(Error::config(format!(
                "no predictor checkpoint at {}; run train-predictor first",
                path.display()
            )));
        }
        let (p, digest) = Predictor::load(&path, &self.backbone, DType::F32, &self.device)?;
        self.manifest.inputs.insert("predictor_file".into(), digest);
        Ok(p)
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(&self.run).unwrap_or(path);
        self.manifest
            .outputs
            .insert(rel.to_string_lossy().into_owned(), file_digest(path)?);
        Ok(())
    }

    fn write_manifest(&mut self, command: &str, argv: &[String]) -> Result<PathBuf> {
        self.manifest.command = command.to_string();
        self.manifest.argv = argv.to_vec();
        let path = self.run.join(format!("{command}.manifest.json"));
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

fn step_row(out: &mut String, r: &StepReport) {
    let m = &r.mean;
    let ts: Vec<f64> = r.per_sample.iter().filter_map(|p| p.t_used).collect();
    let t_mean = ts.iter().sum::<f64>() / ts.len().max(1) as f64;
    let _ = write!(out, "{},{t_mean:.6},{:.8}", r.step, m.rec);
    for p in m.per_levels {
        let _ = write!(out, ",{p:.8}");
    }
    let _ = writeln!(out, ",{:.8},{:.8},{:.8}", m.adv_gen, m.adv_disc, m.combined);
}

pub const GEN_LOG_HEADER: &str =
    "step,t_mean,rec,per1,per2,per3,per4,per5,adv_gen,adv_disc,combined\n";
pub const PRED_LOG_HEADER: &str = "step,l_t,l_rec,l_r,total\n";

fn train_gen(s: &mut Session, resume: bool) -> Result<serde_json::Value> {
    let pairs = s.pairs(Split::Train)?;
    let cfg = s.cfg.clone();
    let trajectory = cfg.trajectory.build()?;
    let ckpt = s.run.join(TRAINING_FILE);
    let log_path = s.run.join("train_gen_log.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PATCH_STREAM);
    let spec = cfg.patch_spec();
    let batch = cfg.train.batch;

    let (mut trainer, mut log) = if resume {
        let tr = GeneratorTrainer::resume(&ckpt, trajectory, cfg.seed, batch, &s.device)?;
        if tr.generator.config != cfg.generator || tr.discriminator.config != cfg.discriminator {
            return Err(Error::config(
                "training checkpoint does not match the config",
            ));
        }
        for _ in 0..tr.generator.step {
            sample_batch(&pairs, None, batch, spec, &mut rng, DType::F32, &s.device)?;
        }
        let log = std::fs::read_to_string(&log_path).unwrap_or_else(|_| GEN_LOG_HEADER.into());
        s.manifest
            .inputs
            .insert("resumed_from".into(), file_digest(&ckpt)?);
        (tr, log)
    } else {
        let g = Generator::new(cfg.generator, DType::F32, &s.device)?;
        let tr = GeneratorTrainer::new(
            g,
            cfg.discriminator,
            cfg.train.gen_adam,
            trajectory,
            cfg.seed,
        )?;
        (tr, GEN_LOG_HEADER.to_string())
    };

    let pretrain = cfg.train.gen_pretrain_steps;
    while trainer.generator.step < pretrain + cfg.train.gen_steps {
        trainer.sampler = if trainer.generator.step < pretrain {
            TSampler::Fixed(0.0)
        } else {
            TSampler::Uniform
        };
        let b = sample_batch(&pairs, None, batch, spec, &mut rng, DType::F32, &s.device)?;
        let report = trainer.step(&b.lr, &b.hr, &s.backbone)?;
        step_row(&mut log, &report);
        if cfg.train.log_every > 0 && report.step % cfg.train.log_every == 0 {
            log::info!(
                "train-gen step {} combined {:.5}",
                report.step,
                report.mean.combined
            );
        }
    }

    write_atomic(&log_path, log.as_bytes())?;
    let gen_path = s.run.join(GENERATOR_FILE);
    trainer.generator.save(&gen_path)?;
    trainer.save(&ckpt)?;
    for p in [&gen_path, &ckpt, &log_path] {
        s.output(p)?;
    }
    Ok(serde_json::json!({
        "steps": trainer.generator.step,
        "generator_params": trainer.generator.digest()?,
    }))
}

fn maps_dir(run: &Path, split: Split) -> PathBuf {
    run.join("oos_maps").join(split.name())
}

fn build_maps(s: &mut Session, split: Split) -> Result<serde_json::Value> {
    let gen = s.generator()?;
    let pairs = s.pairs(split)?;
    let dir = maps_dir(&s.run, split);
    let entries = build_oos_dataset(
        &gen,
        &pairs,
        &s.cfg.oos.grid,
        s.distance(),
        &dir,
        s.cfg.oos.chunk,
    )?;
    let mut index = String::from("id,digest\n");
    for e in &entries {
        let _ = writeln!(index, "{},{}", e.id, e.digest);
        s.output(&e.path)?;
    }
    let index_path = dir.join("index.csv");
    write_atomic(&index_path, index.as_bytes())?;
    s.output(&index_path)?;
    Ok(serde_json::json!({ "maps": entries.len(), "dir": dir }))
}

/// Reads the maps written by `build-oos-maps` for `pairs`, checking they were
/// produced by `generator_digest` on `grid`.
fn load_maps(
    dir: &Path,
    pairs: &[NamedPair],
    generator_digest: &str,
    grid: &OosGridSpec,
) -> Result<Vec<ObjectiveMap>> {
    pairs
        .iter()
        .map(|p| {
            let path = dir.join(format!("{}.png", p.id));
            if !path.is_file() {
                return Err(Error::config(format!(
                    "missing map {}; run build-oos-maps first",
                    path.display()
                )));
            }
            let (map, sidecar) = read_map(&path)?;
            if let Some(sc) = sidecar {
                if sc.generator_digest != generator_digest {
                    return Err(Error::config(format!(
                        "{} was built with a different generator",
                        path.display()
                    )));
                }
                if &sc.grid != grid {
                    return Err(Error::config(format!(
                        "{} was built on a different grid",
                        path.display()
                    )));
                }
            }
            Ok(map)
        })
        .collect()
}

fn pred_row(out: &mut String, step: u64, r: &PredictorLossReport) {
    let _ = writeln!(
        out,
        "{step},{:.8},{:.8},{:.8},{:.8}",
        r.l_t, r.l_rec, r.l_r, r.total
    );
}

fn train_predictor(s: &mut Session) -> Result<serde_json::Value> {
    let gen = s.generator()?;
    let gen_before = gen.digest()?;
    let pairs = s.pairs(Split::Train)?;
    let maps = load_maps(
        &maps_dir(&s.run, Split::Train),
        &pairs,
        &gen_before,
        &s.cfg.oos.grid,
    )?;
    let cfg = s.cfg.clone();
    let predictor = Predictor::new(cfg.predictor, &s.backbone, DType::F32, &s.device)?;
    let mut trainer = PredictorTrainer::new(predictor, cfg.train.pred_adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PREDICTOR_STREAM);
    let mut log = PRED_LOG_HEADER.to_string();
    let ctx = PredictorContext {
        generator: &gen,
        backbone: &s.backbone,
        distance: s.distance(),
        weights: cfg.predictor_loss,
    };
    for step in 1..=cfg.train.pred_steps {
        let b = sample_batch(
            &pairs,
            Some(&maps),
            cfg.train.batch,
            cfg.patch_spec(),
            &mut rng,
            DType::F32,
            &s.device,
        )?;
        let batch = OoeBatch {
            x: b.lr,
            y: b.hr,
            t_star: b.map.expect("maps were supplied"),
        };
        let r = trainer.step(&batch, &ctx)?;
        pred_row(&mut log, step, &r);
        if cfg.train.log_every > 0 && step % cfg.train.log_every == 0 {
            log::info!(
                "train-predictor step {step} total {:.5} l_t {:.5}",
                r.total,
                r.l_t
            );
        }
    }
    let gen_after = gen.digest()?;
    if gen_after != gen_before {
        return Err(Error::config(
            "generator parameters changed during predictor training",
        ));
    }
    let log_path = s.run.join("train_predictor_log.csv");
    write_atomic(&log_path, log.as_bytes())?;
    let path = s.run.join(PREDICTOR_FILE);
    trainer.save(&path)?;
    s.output(&path)?;
    s.output(&log_path)?;
    Ok(serde_json::json!({
        "steps": cfg.train.pred_steps,
        "generator_params": gen_after,
    }))
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let rd = std::fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::config(format!(
            "no PNG images in {}",
            input.display()
        )));
    }
    Ok(out)
}

/// The objective map `infer` applies to `x`.
fn inference_map(
    x: &Image,
    source: MapSource,
    predictor: Option<&Predictor>,
    backbone: &Backbone,
) -> Result<ObjectiveMap> {
    let (_, h, w) = x.dim();
    match (source, predictor) {
        (MapSource::Predictor, Some(p)) => predict_map(x, p, backbone),
        (MapSource::Constant(t), _) => constant_map(t, h, w),
        (MapSource::Predictor, None) => {
            Err(Error::config("predictor map requested without a predictor"))
        }
    }
}

fn infer(
    s: &mut Session,
    input: &Path,
    out: &Path,
    source: MapSource,
) -> Result<serde_json::Value> {
    let gen = s.generator()?;
    let predictor = match source {
        MapSource::Predictor => Some(s.predictor()?),
        MapSource::Constant(_) => None,
    };
    let gen_digest = gen.digest()?;
    let files = png_inputs(input)?;
    for f in &files {
        s.manifest
            .data_digests
            .insert(f.to_string_lossy().into_owned(), file_digest(f)?);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for f in &files {
        let x = load_png(f)?;
        let map = inference_map(&x, source, predictor.as_ref(), &s.backbone)?;
        let sr = gen.super_resolve(&x, &map)?;
        let stem = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let sr_path = out.join(format!("{stem}.png"));
        save_png(&sr_path, &sr)?;
        let map_path = out.join(format!("{stem}_map.png"));
        write_map(
            &map_path,
            map.values(),
            &s.cfg.oos.grid,
            &gen_digest,
            Resolution::Lr,
            Some(stem.clone()),
        )?;
        s.output(&sr_path)?;
        s.output(&map_path)?;
        written.push(sr_path);
    }
    Ok(serde_json::json!({ "images": written }))
}

fn evaluate(s: &mut Session, split: Split) -> Result<serde_json::Value> {
    let gen = s.generator()?;
    let predictor_path = s.run.join(PREDICTOR_FILE);
    let predictor = if predictor_path.is_file() {
        Some(s.predictor()?)
    } else {
        log::warn!(
            "no predictor in {}; skipping predicted maps",
            s.run.display()
        );
        None
    };
    let pairs = s.pairs(split)?;
    let scale = gen.config.scale;
    let ctx = s.distance();
    let mut by_method: BTreeMap<&'static str, Vec<EvalRecord>> = BTreeMap::new();
    for p in &pairs {
        let (_, h, w) = p.lr.dim();
        for (name, t) in [("t0", 0.0), ("t1", 1.0)] {
            let sr = gen.super_resolve(&p.lr, &constant_map(t, h, w)?)?;
            by_method
                .entry(name)
                .or_default()
                .push(evaluate_one(p, &sr, name, scale, ctx)?);
        }
        if let Some(pred) = &predictor {
            let map = predict_map(&p.lr, pred, &s.backbone)?;
            let sr = gen.super_resolve(&p.lr, &map)?;
            by_method
                .entry("ooe")
                .or_default()
                .push(evaluate_one(p, &sr, "ooe", scale, ctx)?);
        }
        let sel = grid_search_oos(&gen, &p.lr, &p.hr, &s.cfg.oos.grid, ctx, s.cfg.oos.chunk)?;
        let sr = sroos_infer(&gen, &p.lr, &sel.selection)?;
        by_method
            .entry("oos")
            .or_default()
            .push(evaluate_one(p, &sr, "oos", scale, ctx)?);
    }
    let dir = s.run.join("eval").join(split.name());
    let mut summary = String::from("map,psnr,ssim,lpips,lr_psnr\n");
    let mut paths = Vec::new();
    for (name, records) in &by_method {
        let path = dir.join(format!("{name}.csv"));
        write_records(&path, records)?;
        let m = summarize(records);
        let _ = writeln!(
            summary,
            "{name},{:.6},{:.6},{:.8},{:.6}",
            m.psnr, m.ssim, m.lpips, m.lr_psnr
        );
        paths.push(path);
    }
    let summary_path = dir.join("summary.csv");
    write_atomic(&summary_path, summary.as_bytes())?;
    paths.push(summary_path);
    for p in &paths {
        s.output(p)?;
    }
    Ok(serde_json::json!({ "tables": paths }))
}

fn pd(s: &mut Session, grid: &OosGridSpec, split: Split) -> Result<serde_json::Value> {
    let gen = s.generator()?;
    let pairs = s.pairs(split)?;
    let curve = pd_curve(&gen, &pairs, grid, s.distance())?;
    let path = s.run.join(format!("pd_curve_{}.csv", split.name()));
    write_atomic(&path, curve.to_csv().as_bytes())?;
    s.output(&path)?;
    Ok(serde_json::json!({ "rows": curve.rows.len(), "table": path }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_source_parsing() {
        assert_eq!("predictor".parse::<MapSource>(), Ok(MapSource::Predictor));
        assert_eq!("0.25".parse::<MapSource>(), Ok(MapSource::Constant(0.25)));
        assert!("1.5".parse::<MapSource>().is_err());
        assert!("oracle".parse::<MapSource>().is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_command(["objtraj", "frobnicate"]), 2);
        assert_eq!(run_command(["objtraj"]), 2);
        assert_eq!(run_command(["objtraj", "train-gen"]), 2);
        assert_eq!(run_command(["objtraj", "--help"]), 0);
    }

    #[test]
    fn missing_config_exits_one() {
        assert_eq!(
            run_command([
                "objtraj",
                "validate-config",
                "--config",
                "/nonexistent/run.toml"
            ]),
            1
        );
    }
}
