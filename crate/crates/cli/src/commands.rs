use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slamp::checkpoint::Checkpoint;
use slamp::data::{
    dataset_hash, dataset_split, generate_dataset, parse_idx, read_dataset, synthetic_digits,
    write_dataset, ImageSet, Splits, Video,
};
use slamp::eval::{
    best_of_n_eval, copy_last_psnr, diversity_average, flow_to_color, plot_curves, sample_rng,
    save_grid, BestOfNOptions, Metric, MetricCurve, Tile,
};
use slamp::model::Model;
use slamp::rollout::{generate, train_loop, BatchFrames, Generation, GuardedFrames, SinkEvent, Trainer};
use slamp::{Error, ExperimentConfig, Tensor};

use crate::manifest::{code_hash, now, RunManifest};
use crate::{Command, Common, DataArg};

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            Error::NonFinite { .. } => 4,
            Error::Checkpoint(_) => 5,
            _ => 1,
        };
        Self::new(code, e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::new(1, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(1, e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::new(1, e)
    }
}

type Outcome<T> = Result<T, Failure>;

/// The split assignment stored next to a dataset.
#[derive(Serialize, Deserialize)]
struct SplitFile {
    seed: u64,
    ratios: [f64; 3],
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

pub fn run(command: Command) -> Outcome<Vec<PathBuf>> {
    match command {
        Command::MakeData { common } => make_data(&common),
        Command::Train {
            common,
            data,
            variant,
            resume,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.model.variant = v;
                cfg.validate()?;
            }
            train(&common, &data, cfg, resume.as_deref())
        }
        Command::Evaluate {
            common,
            data,
            checkpoint,
            n_samples,
        } => evaluate(&common, &data, &checkpoint, n_samples),
        Command::Sample {
            common,
            data,
            checkpoint,
            n_samples,
            video,
        } => sample(&common, &data, &checkpoint, n_samples, video),
        Command::VisualizeFlow {
            common,
            data,
            checkpoint,
            video,
        } => visualize_flow(&common, &data, &checkpoint, video),
    }
}

fn load_config(common: &Common) -> Outcome<ExperimentConfig> {
    let mut cfg = ExperimentConfig::resolve(&common.config)
        .map_err(|e| Failure::new(2, anyhow!(e).context(format!("loading config `{}`", common.config))))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

/// Creates `dir` and proves it is writable.
fn prepare_output(dir: &Path) -> Outcome<()> {
    let probe = dir.join(".write-probe");
    fs::create_dir_all(dir)
        .and_then(|_| fs::write(&probe, b""))
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| Failure::new(3, anyhow!(e).context(format!("output path {} is not writable", dir.display()))))
}

fn source_digits(cfg: &ExperimentConfig) -> Outcome<ImageSet> {
    match &cfg.data.mnist_idx {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(parse_idx(&bytes)?)
        }
        None => Ok(synthetic_digits(cfg.data.synthetic_glyphs, 28, cfg.seed)?),
    }
}

fn finish(
    command: &str,
    cfg: &ExperimentConfig,
    started: f64,
    out: &Path,
    mut artifacts: Vec<PathBuf>,
    inputs: serde_json::Value,
) -> Outcome<Vec<PathBuf>> {
    let manifest = RunManifest {
        command: command.into(),
        config: cfg.clone(),
        seed: cfg.seed,
        code_hash: code_hash(),
        started_unix_s: started,
        finished_unix_s: now(),
        artifacts: artifacts.clone(),
        inputs,
    };
    artifacts.push(manifest.write(out)?);
    Ok(artifacts)
}

fn make_data(common: &Common) -> Outcome<Vec<PathBuf>> {
    let started = now();
    let cfg = load_config(common)?;
    let splits = dataset_split(cfg.data.videos, cfg.data.split, cfg.seed)?;
    if common.dry_run {
        eprintln!(
            "would write {} clips of {}×{}×{} (train {}, val {}, test {}) to {}",
            cfg.data.videos,
            cfg.data.generator.frames,
            cfg.data.generator.canvas,
            cfg.data.generator.canvas,
            splits.train.len(),
            splits.val.len(),
            splits.test.len(),
            common.out.display()
        );
        return Ok(Vec::new());
    }
    prepare_output(&common.out)?;
    let digits = source_digits(&cfg)?;
    let videos = generate_dataset(&cfg.data.generator, &digits, cfg.data.videos, cfg.seed)?;
    write_dataset(&common.out, &videos, cfg.seed, cfg.data.encoding)?;
    let split_path = common.out.join("splits.json");
    let Splits { train, val, test } = splits;
    let file = SplitFile {
        seed: cfg.seed,
        ratios: cfg.data.split,
        train,
        val,
        test,
    };
    fs::write(&split_path, serde_json::to_vec_pretty(&file)?)?;
    let config_path = common.out.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?)?;
    let hash = dataset_hash(&videos);
    finish(
        "make-data",
        &cfg,
        started,
        &common.out,
        vec![common.out.join("header.json"), split_path, config_path],
        serde_json::json!({ "dataset_hash": hash }),
    )
}

struct Dataset {
    videos: Vec<Video>,
    splits: SplitFile,
    hash: String,
}

impl Dataset {
    fn load(data: &DataArg, cfg: &ExperimentConfig) -> Outcome<Self> {
        let (header, videos) = read_dataset(&data.data)
            .map_err(|e| Failure::new(1, anyhow!(e).context(format!("reading dataset {}", data.data.display()))))?;
        if (header.h, header.w, header.channels) != (cfg.model.image_size, cfg.model.image_size, cfg.model.channels) {
            return Err(Failure::new(
                2,
                anyhow!(
                    "dataset frames are {}×{}×{}, the model expects {}×{}×{}",
                    header.channels,
                    header.h,
                    header.w,
                    cfg.model.channels,
                    cfg.model.image_size,
                    cfg.model.image_size
                ),
            ));
        }
        if header.t < cfg.rollout.frames() {
            return Err(Failure::new(
                2,
                anyhow!("clips have {} frames, the rollout needs {}", header.t, cfg.rollout.frames()),
            ));
        }
        let splits: SplitFile = serde_json::from_slice(&fs::read(data.data.join("splits.json"))?)?;
        if let Some(&i) = splits.train.iter().chain(&splits.val).chain(&splits.test).find(|&&i| i >= videos.len()) {
            return Err(Failure::new(1, anyhow!("split index {i} out of range")));
        }
        let hash = dataset_hash(&videos);
        Ok(Self { videos, splits, hash })
    }

    fn pick(&self, indices: &[usize]) -> Vec<Video> {
        indices.iter().map(|&i| self.videos[i].clone()).collect()
    }

    fn test_clip(&self, index: usize) -> Outcome<&Video> {
        let i = *self
            .splits
            .test
            .get(index)
            .ok_or_else(|| Failure::new(2, anyhow!("test split has {} clips, asked for #{index}", self.splits.test.len())))?;
        Ok(&self.videos[i])
    }
}

fn train(common: &Common, data: &DataArg, cfg: ExperimentConfig, resume: Option<&Path>) -> Outcome<Vec<PathBuf>> {
    let started = now();
    let dataset = Dataset::load(data, &cfg)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(|e| Failure::new(5, anyhow!(e).context(format!("loading {}", path.display()))))?;
            ensure_compatible(&cfg, &ckpt)?;
            let mut t = Trainer::resume(&ckpt, cfg.train.optimizer.clone())?;
            t.model.config = cfg.model.clone();
            t
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Trainer::new(Model::new(cfg.model.clone(), &mut rng)?, cfg.train.optimizer.clone())
        }
    };
    let train_set = dataset.pick(&dataset.splits.train);
    let val_set = dataset.pick(&dataset.splits.val);
    if common.dry_run {
        let (losses, norm, _) = trainer.update(&train_set, &cfg.rollout, &cfg.train)?;
        let summary = serde_json::json!({
            "parameters": trainer.model.parameter_count(),
            "variant": cfg.model.variant.to_string(),
            "loss": losses,
            "grad_norm": norm,
        });
        println!("{summary}");
        return Ok(Vec::new());
    }
    prepare_output(&common.out)?;
    let log_path = common.out.join("train.ndjson");
    let log_file = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)?;
    let mut log = BufWriter::new(log_file);
    let best = common.out.join("best.ckpt");
    let latest = common.out.join("latest.ckpt");
    let mut sink = |event: SinkEvent, ckpt: &Checkpoint| -> slamp::Result<()> {
        match event {
            SinkEvent::Best => ckpt.save(&best),
            SinkEvent::Latest => ckpt.save(&latest),
        }
    };
    let result = train_loop(&mut trainer, &train_set, &val_set, &cfg.rollout, &cfg.train, &mut sink, &mut log);
    log.flush()?;
    let summary = match result {
        Ok(s) => s,
        Err(e @ Error::NonFinite { .. }) => {
            let snapshot = common.out.join("nonfinite.ckpt");
            trainer.checkpoint(cfg.train.seed).save(&snapshot)?;
            return Err(Failure::new(
                4,
                anyhow!(e).context(format!("diagnostic snapshot written to {}", snapshot.display())),
            ));
        }
        Err(e) => return Err(e.into()),
    };
    fs::write(common.out.join("config.toml"), cfg.to_toml()?)?;
    let mut artifacts = vec![latest.clone(), log_path, common.out.join("config.toml")];
    if best.exists() {
        artifacts.insert(0, best);
    }
    let ckpt_hash = Checkpoint::load(&latest)?.content_hash()?;
    finish(
        "train",
        &cfg,
        started,
        &common.out,
        artifacts,
        serde_json::json!({
            "dataset": data.data,
            "dataset_hash": dataset.hash,
            "resume": resume,
            "final_step": summary.final_step,
            "best_val_psnr": summary.best_val_psnr,
            "checkpoint_hash": ckpt_hash,
        }),
    )
}

fn ensure_compatible(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Outcome<()> {
    if !ckpt.config.same_architecture(&cfg.model) {
        return Err(Failure::new(
            5,
            anyhow!(
                "checkpoint was built for a different model ({} vs configured {}); check --config and --variant",
                serde_json::to_string(&ckpt.config)?,
                serde_json::to_string(&cfg.model)?
            ),
        ));
    }
    Ok(())
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Outcome<(Model<f32>, Checkpoint)> {
    let ckpt = Checkpoint::load(path).map_err(|e| Failure::new(5, anyhow!(e).context(format!("loading {}", path.display()))))?;
    ensure_compatible(cfg, &ckpt)?;
    let model = ckpt.build_model::<f32>().map_err(|e| Failure::new(5, e))?;
    Ok((model, ckpt))
}

#[derive(Serialize)]
struct Report {
    variant: String,
    n: usize,
    seed: u64,
    t_cond: usize,
    t_pred: usize,
    videos: usize,
    /// Confidence intervals are taken across test videos.
    ci_over: String,
    checkpoint_hash: String,
    dataset_hash: String,
    copy_last_psnr: f64,
    curves: Vec<MetricCurve>,
    best_indices: std::collections::BTreeMap<Metric, Vec<usize>>,
}

fn evaluate(common: &Common, data: &DataArg, checkpoint: &Path, n_samples: Option<usize>) -> Outcome<Vec<PathBuf>> {
    let started = now();
    let mut cfg = load_config(common)?;
    if let Some(n) = n_samples {
        cfg.eval.n_samples = n;
        cfg.validate()?;
    }
    let (model, ckpt) = load_model(&cfg, checkpoint)?;
    let dataset = Dataset::load(data, &cfg)?;
    let mut test = dataset.pick(&dataset.splits.test);
    if cfg.eval.test_videos > 0 {
        test.truncate(cfg.eval.test_videos);
    }
    if common.dry_run {
        eprintln!(
            "would score {} test clips with best-of-{} over {:?}",
            test.len(),
            cfg.eval.n_samples,
            cfg.eval.metrics
        );
        return Ok(Vec::new());
    }
    prepare_output(&common.out)?;
    let refs: Vec<&Video> = test.iter().collect();
    let opts = BestOfNOptions {
        n: cfg.eval.n_samples,
        metrics: cfg.eval.metrics.clone(),
        seed: cfg.seed,
        chunk: cfg.eval.chunk,
    };
    let result = best_of_n_eval(&model, &refs, &cfg.rollout, &opts)?;
    let report = Report {
        variant: cfg.model.variant.to_string(),
        n: result.n,
        seed: result.seed,
        t_cond: cfg.rollout.t_cond,
        t_pred: cfg.rollout.t_pred,
        videos: result.videos,
        ci_over: result.ci_over.clone(),
        checkpoint_hash: ckpt.content_hash()?,
        dataset_hash: dataset.hash.clone(),
        copy_last_psnr: copy_last_psnr(&refs, &cfg.rollout)?,
        curves: result.curves.clone(),
        best_indices: result.best_indices.clone(),
    };
    let report_path = common.out.join("report.json");
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?)?;
    let mut artifacts = vec![report_path];
    for curve in &result.curves {
        let path = common.out.join(format!("{}_curve.png", curve.metric));
        plot_curves(&[curve], &path)?;
        artifacts.push(path);
    }
    finish(
        "evaluate",
        &cfg,
        started,
        &common.out,
        artifacts,
        serde_json::json!({ "checkpoint": checkpoint, "dataset": data.data }),
    )
}

/// `n` generations of one clip; row `s` uses the noise stream of sample `s`.
fn sample_clip(model: &Model<f32>, cfg: &ExperimentConfig, clip: &Tensor<f32>, video: usize, n: usize) -> Outcome<Generation<f32>> {
    let batch = BatchFrames::<f32>::repeat(clip, n)?;
    let guard = GuardedFrames::new(&batch, cfg.rollout.t_cond);
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|s| sample_rng(cfg.seed, video, s)).collect();
    Ok(generate(model, &guard, &cfg.rollout, &mut rngs)?)
}

/// Rows: ground truth, prediction, appearance, motion, mask, flow colour.
/// The first column has no prediction and is left blank.
fn signal_grid(gen: &Generation<f32>, clip: &Tensor<f32>, row: usize, path: &Path) -> Outcome<()> {
    let frames = clip.dim(0);
    let steps = &gen.rollout.steps;
    let graph = &gen.rollout.graph;
    let pick = |f: &dyn Fn(&slamp::rollout::StepVars) -> slamp::graph::Var| -> Vec<Tensor<f32>> {
        steps.iter().map(|s| graph.value(f(s)).index_outer(row)).collect()
    };
    let truth: Vec<Tensor<f32>> = (0..frames).map(|i| clip.index_outer(i)).collect();
    let xhat = pick(&|s| s.x_hat);
    let xp = pick(&|s| s.x_p);
    let xf = pick(&|s| s.x_f);
    let mask = pick(&|s| s.mask);
    let flows = pick(&|s| s.flow);
    let max_mag = flows
        .iter()
        .flat_map(|f| {
            let (a, b) = f.data().split_at(f.len() / 2);
            a.iter().zip(b).map(|(x, y)| (*x as f64).hypot(*y as f64)).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    let colors: Vec<Tensor<f32>> = flows
        .iter()
        .map(|f| flow_to_color(f, Some(max_mag)))
        .collect::<slamp::Result<_>>()?;
    let blank = Tensor::<f32>::zeros(truth[0].shape());
    let white = Tensor::<f32>::full(&[truth[0].dim(1), truth[0].dim(2), 3], 1.0);
    let rows = vec![
        truth.iter().map(Tile::Chw).collect(),
        chw_row(&blank, &xhat),
        chw_row(&blank, &xp),
        chw_row(&blank, &xf),
        chw_row(&blank, &mask),
        std::iter::once(Tile::Hwc(&white)).chain(colors.iter().map(Tile::Hwc)).collect(),
    ];
    save_grid(&rows, path)?;
    Ok(())
}

fn sample(common: &Common, data: &DataArg, checkpoint: &Path, n_samples: Option<usize>, video: usize) -> Outcome<Vec<PathBuf>> {
    let started = now();
    let cfg = load_config(common)?;
    let n = n_samples.unwrap_or(cfg.eval.n_samples);
    if n == 0 {
        return Err(Failure::new(2, anyhow!("--n-samples must be positive")));
    }
    let (model, _) = load_model(&cfg, checkpoint)?;
    let dataset = Dataset::load(data, &cfg)?;
    let clip = dataset.test_clip(video)?.window(0, cfg.rollout.frames())?;
    if common.dry_run {
        eprintln!("would draw {n} samples for test clip #{video}");
        return Ok(Vec::new());
    }
    prepare_output(&common.out)?;
    let gen = sample_clip(&model, &cfg, &clip, video, n)?;
    let mut artifacts = Vec::new();
    for r in 0..n.min(10) {
        let path = common.out.join(format!("sample_{r:03}.png"));
        signal_grid(&gen, &clip, r, &path)?;
        artifacts.push(path);
    }
    let futures: Vec<Tensor<f32>> = (0..n).map(|r| gen.clip(r)).collect();
    let div = diversity_average(&futures)?;
    let peak = div.variance.data().iter().cloned().fold(0.0f32, f32::max);
    let var_scaled = div.variance.map(|v| if peak > 0.0 { v / peak } else { 0.0 });
    let truth: Vec<Tensor<f32>> = (0..cfg.rollout.t_pred).map(|k| clip.index_outer(cfg.rollout.t_cond + k)).collect();
    let means: Vec<Tensor<f32>> = (0..cfg.rollout.t_pred).map(|k| div.mean.index_outer(k)).collect();
    let vars: Vec<Tensor<f32>> = (0..cfg.rollout.t_pred).map(|k| var_scaled.index_outer(k)).collect();
    let path = common.out.join("diversity.png");
    save_grid(
        &[
            truth.iter().map(Tile::Chw).collect(),
            means.iter().map(Tile::Chw).collect(),
            vars.iter().map(Tile::Chw).collect(),
        ],
        &path,
    )?;
    artifacts.push(path);
    finish(
        "sample",
        &cfg,
        started,
        &common.out,
        artifacts,
        serde_json::json!({ "checkpoint": checkpoint, "dataset": data.data, "video": video, "n_samples": n }),
    )
}

fn visualize_flow(common: &Common, data: &DataArg, checkpoint: &Path, video: usize) -> Outcome<Vec<PathBuf>> {
    let started = now();
    let cfg = load_config(common)?;
    let (model, _) = load_model(&cfg, checkpoint)?;
    let dataset = Dataset::load(data, &cfg)?;
    let clip = dataset.test_clip(video)?.window(0, cfg.rollout.frames())?;
    if common.dry_run {
        eprintln!("would render flow fields for test clip #{video}");
        return Ok(Vec::new());
    }
    prepare_output(&common.out)?;
    let gen = sample_clip(&model, &cfg, &clip, video, 1)?;
    let mut artifacts = Vec::new();
    for (j, step) in gen.rollout.steps.iter().enumerate() {
        let flow = gen.rollout.graph.value(step.flow).index_outer(0);
        let color = flow_to_color(&flow, None)?;
        let path = common.out.join(format!("flow_{:03}.png", j + 1));
        save_grid(&[vec![Tile::Chw(&clip.index_outer(j + 1)), Tile::Hwc(&color)]], &path)?;
        artifacts.push(path);
    }
    let size = 65usize;
    let c = (size / 2) as f32;
    let mut wheel = Vec::with_capacity(2 * size * size);
    wheel.extend((0..size * size).map(|i| (i / size) as f32 - c));
    wheel.extend((0..size * size).map(|i| (i % size) as f32 - c));
    let wheel = flow_to_color(&Tensor::new(&[2, size, size], wheel)?, Some(c as f64))?;
    let path = common.out.join("color_wheel.png");
    save_grid(&[vec![Tile::Hwc(&wheel)]], &path)?;
    artifacts.push(path);
    finish(
        "visualize-flow",
        &cfg,
        started,
        &common.out,
        artifacts,
        serde_json::json!({ "checkpoint": checkpoint, "dataset": data.data, "video": video }),
    )
}

fn chw_row<'a>(first: &'a Tensor<f32>, rest: &'a [Tensor<f32>]) -> Vec<Tile<'a>> {
    std::iter::once(Tile::Chw(first)).chain(rest.iter().map(Tile::Chw)).collect()
}
