//! One function per subcommand. Each reads its inputs, writes its outputs under
//! the run directory and finishes with a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cftwin::cfgen::{downsample_cf, generate_pairs, read_dataset, split_train_test, write_dataset, Dataset};
use cftwin::compression::{additivity_table, apply_pruning, distill_finetune, plan_pruning, Calibration, KdRecord};
use cftwin::container::file_checksum;
use cftwin::denoiser::{Checkpoint, Denoiser};
use cftwin::diffusion::{NoiseSchedule, ScheduleConfig};
use cftwin::evalkit::{evaluate, DiffusionReconstructor, EvalRequest, InterpolationBaseline, OracleReconstructor, Reconstructor};
use cftwin::rng::{mix, substream};
use cftwin::sampling::{sample_batch, NetworkPredictor, SampleRequest, UpsampleMethod};
use cftwin::training::{train, write_loss_csv, TrainData, TrainState};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, ReconstructorKind, RunConfig};
use crate::heatmap;

const INIT_TAG: u64 = 0x494e_4954;
pub const TRAIN_FILE: &str = "train.cfds";
pub const TEST_FILE: &str = "test.cfds";
pub const CACHE_ENV: &str = "CF_TWIN_CACHE";

/// Bookkeeping for one command run.
pub struct Run {
    pub command: &'static str,
    pub cfg: RunConfig,
    pub seed: Option<u64>,
    pub out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: String,
    config_hash: String,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Run {
    pub fn new(command: &'static str, cfg: RunConfig, seed: Option<u64>, out: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
        Ok(Self { command, cfg, seed, out, inputs: BTreeMap::new(), outputs: Vec::new() })
    }

    /// Records an input, checksummed before anything is written.
    fn input(&mut self, path: &Path) -> Result<PathBuf> {
        if self.outputs.iter().any(|o| o == path) {
            bail!(ConfigError(format!("{} is both an input and an output", path.display())));
        }
        self.inputs.insert(path.display().to_string(), file_checksum(path)?);
        Ok(path.to_path_buf())
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    /// Writes `<command>.manifest.json` with checksums of everything read and written.
    pub fn finish(self) -> Result<PathBuf> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            let name = p.strip_prefix(&self.out).unwrap_or(p).display().to_string();
            outputs.insert(name, file_checksum(p)?);
        }
        let manifest = Manifest {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.cfg.hash()?,
            seed: self.seed,
            config: serde_json::to_value(&self.cfg)?,
            inputs: self.inputs,
            outputs,
        };
        let path = self.out.join(format!("{}.manifest.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| ConfigError(format!("`inputs.{key}` must be set for this command")).into())
}

fn same_file(a: &Path, b: &Path) -> bool {
    matches!((a.canonicalize(), b.canonicalize()), (Ok(x), Ok(y)) if x == y)
}

fn config_check(r: cftwin::Result<()>, section: &str) -> Result<()> {
    r.map_err(|e| ConfigError(format!("invalid `{section}`: {e}")).into())
}

fn load_split(run: &mut Run, file: &str) -> Result<Dataset> {
    let dir = required(&run.cfg.inputs.data_dir, "data_dir")?.clone();
    let path = run.input(&dir.join(file))?;
    Ok(read_dataset(&path)?)
}

fn load_checkpoint(run: &mut Run, path: &Path) -> Result<Checkpoint> {
    let path = run.input(path)?;
    Ok(Checkpoint::load(&path)?)
}

/// Noise schedule a checkpoint was trained with, falling back to the run's training schedule.
fn schedule_of(ck: &Checkpoint, fallback: &ScheduleConfig) -> Result<NoiseSchedule> {
    let recorded = ck.meta.get("train").and_then(|t| t.get("schedule")).cloned();
    let cfg = match recorded {
        Some(v) => serde_json::from_value(v)?,
        None => *fallback,
    };
    Ok(cfg.build()?)
}

fn hash_json(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

pub fn gen(mut run: Run) -> Result<PathBuf> {
    let cfg = run.cfg.clone();
    config_check(cfg.scenario.validate(), "scenario")?;
    let (train_path, test_path) = (run.output(TRAIN_FILE), run.output(TEST_FILE));
    let split_path = run.output("split.json");
    let cache = std::env::var_os(CACHE_ENV).map(|d| {
        let key = hash_json(&json!({ "scenario": cfg.scenario, "data": cfg.data }));
        PathBuf::from(d).join(key)
    });
    let cached = cache.as_ref().filter(|d| d.join(TRAIN_FILE).is_file() && d.join(TEST_FILE).is_file() && d.join("split.json").is_file());
    if let Some(dir) = cached {
        log::info!("reusing cached dataset in {}", dir.display());
        for (name, dst) in [(TRAIN_FILE, &train_path), (TEST_FILE, &test_path), ("split.json", &split_path)] {
            let src = dir.join(name);
            if name != "split.json" {
                read_dataset(&src)?;
            }
            std::fs::copy(&src, dst).with_context(|| format!("cannot copy {}", src.display()))?;
        }
        return run.finish();
    }
    let all = generate_pairs(&cfg.scenario, &cfg.data)
        .map_err(|e| ConfigError(format!("invalid `scenario` or `data`: {e}")))?;
    let (train_idx, test_idx) = split_train_test(all.len(), cfg.data.seed);
    write_dataset(&all.subset(&train_idx)?, &train_path)?;
    write_dataset(&all.subset(&test_idx)?, &test_path)?;
    std::fs::write(&split_path, serde_json::to_string_pretty(&json!({ "train": train_idx, "test": test_idx }))?)?;
    log::info!("wrote {} train and {} test pairs", train_idx.len(), test_idx.len());
    if let Some(dir) = cache {
        std::fs::create_dir_all(&dir)?;
        for (name, src) in [(TRAIN_FILE, &train_path), (TEST_FILE, &test_path), ("split.json", &split_path)] {
            std::fs::copy(src, dir.join(name))?;
        }
    }
    run.finish()
}

fn check_model_fits(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    config_check(cfg.model.validate(), "model")?;
    if cfg.model.resolution != ds.header.hr_resolution || cfg.model.input_channels != ds.header.channels {
        bail!(ConfigError(format!(
            "`model` expects {}x{} maps with {} channel(s), the data holds {}x{} with {}",
            cfg.model.resolution,
            cfg.model.resolution,
            cfg.model.input_channels,
            ds.header.hr_resolution,
            ds.header.hr_resolution,
            ds.header.channels
        )));
    }
    Ok(())
}

pub fn train_cmd(mut run: Run) -> Result<PathBuf> {
    let cfg = run.cfg.clone();
    config_check(cfg.train.validate(), "train")?;
    let ds = load_split(&mut run, TRAIN_FILE)?;
    let state = match &cfg.inputs.resume {
        Some(p) if same_file(p, &run.out.join("checkpoint.ckpt")) => {
            bail!(ConfigError(format!("resuming from {} would overwrite it; use another --out", p.display())))
        }
        Some(p) => TrainState::from_checkpoint(&load_checkpoint(&mut run, p)?, &cfg.train)?,
        None => {
            check_model_fits(&cfg, &ds)?;
            let model = Denoiser::new(&cfg.model, &mut substream(cfg.train.seed, &[INIT_TAG]))?;
            TrainState::fresh(model, &cfg.train)?
        }
    };
    let data = TrainData::new(&ds, cfg.train.upsample)?;
    let ck_path = run.output("checkpoint.ckpt");
    let ck = train(&cfg.train, &data, state, &mut |ck| {
        log::info!("checkpoint at iteration {}", ck.iteration);
        ck.save(&ck_path).map(|_| ())
    })?;
    ck.save(&ck_path)?;
    write_loss_csv(&run.output("loss.csv"), &ck.loss_trace)?;
    run.finish()
}

pub fn sample_cmd(mut run: Run) -> Result<PathBuf> {
    let cfg = run.cfg.clone();
    let ck = load_checkpoint(&mut run, required(&cfg.inputs.checkpoint, "checkpoint")?)?;
    let model = ck.inference_model()?;
    let sched = schedule_of(&ck, &cfg.train.schedule)?;
    let test = load_split(&mut run, TEST_FILE)?;
    let factor = cfg.sample.factor.unwrap_or(test.header.factor);
    let res = test.header.hr_resolution;
    if factor == 0 || res % factor != 0 {
        bail!(ConfigError(format!("`sample.factor` {factor} does not divide the map side {res}")));
    }
    let count = cfg.sample.count.min(test.len());
    for start in (0..count).step_by(cfg.sample.batch_size.max(1)) {
        let end = (start + cfg.sample.batch_size.max(1)).min(count);
        let mut reqs = Vec::new();
        for i in start..end {
            reqs.push(SampleRequest {
                lr: downsample_cf(&test.pairs[i].0, factor)?,
                target_resolution: model.spec().resolution,
                seed: mix(cfg.sample.seed, &[i as u64]),
                method: cfg.sample.upsample,
                keep_trajectory: false,
            });
        }
        let outs = sample_batch(&mut NetworkPredictor { model: &model }, &reqs, &sched)?;
        for (k, (o, req)) in outs.into_iter().zip(&reqs).enumerate() {
            let i = start + k;
            let mut recon = o.normalized;
            recon.quantize_f32();
            let single = Dataset::new(vec![(recon.clone(), req.lr.clone())], test.header.scenario.clone(), None)?;
            write_dataset(&single, &run.output(&format!("sample-{i:04}.cfds")))?;
            if cfg.sample.png {
                let h = heatmap::render(&[&test.pairs[i].0, &req.lr, &recon], cfg.plot.min_panel_px)?;
                heatmap::write_png(&h, &run.output(&format!("sample-{i:04}.png")))?;
            }
        }
        log::info!("sampled {end}/{count} maps");
    }
    run.finish()
}

pub fn prune_cmd(mut run: Run) -> Result<PathBuf> {
    let cfg = run.cfg.clone();
    let ck = load_checkpoint(&mut run, required(&cfg.inputs.checkpoint, "checkpoint")?)?;
    let teacher = ck.inference_model()?;
    let sched = schedule_of(&ck, &cfg.train.schedule)?;
    let ds = load_split(&mut run, TRAIN_FILE)?;
    let data = TrainData::new(&ds, cfg.train.upsample)?;
    let p = &cfg.prune;
    let calib = Calibration::<f32>::draw(&data, p.calibration_pairs.min(data.len()), p.draws_per_pair, &sched, p.seed)?;
    let plan = plan_pruning(&teacher, &calib, p.ratio).map_err(|e| match e {
        cftwin::Error::Infeasible(_) | cftwin::Error::Domain(_) => anyhow::Error::new(ConfigError(format!("`prune.ratio`: {e}"))),
        e => e.into(),
    })?;
    log::info!("removing {} layers: {} of {} parameters", plan.selection.len(), plan.pruned_params, plan.teacher_params);
    std::fs::write(run.output("plan.json"), serde_json::to_string_pretty(&plan)?)?;
    if p.additivity {
        let table = additivity_table(&teacher, &calib)?;
        std::fs::write(run.output("additivity.json"), serde_json::to_string_pretty(&table)?)?;
    }
    let student = apply_pruning(&teacher, &plan)?;
    let mut out = Checkpoint::from_model(&student);
    out.meta = json!({ "train": ck.meta.get("train"), "plan": { "ratio": plan.ratio, "removed": plan.selection } });
    out.save(&run.output("student.ckpt"))?;
    run.finish()
}

fn write_kd_csv(path: &Path, trace: &[KdRecord]) -> Result<()> {
    let mut s = String::from("iteration,task,okd,fkd,total\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{},{}\n", r.iteration, r.task, r.okd, r.fkd, r.total));
    }
    std::fs::write(path, s).with_context(|| format!("cannot write {}", path.display()))
}

pub fn distill_cmd(mut run: Run) -> Result<PathBuf> {
    let cfg = run.cfg.clone();
    config_check(cfg.distill.validate(), "distill")?;
    let teacher_ck = load_checkpoint(&mut run, required(&cfg.inputs.checkpoint, "checkpoint")?)?;
    let student_ck = load_checkpoint(&mut run, required(&cfg.inputs.student, "student")?)?;
    let teacher = teacher_ck.inference_model()?;
    let student = student_ck.inference_model()?;
    if schedule_of(&teacher_ck, &cfg.distill.schedule)?.config() != cfg.distill.schedule {
        log::warn!("`distill.schedule` differs from the schedule the teacher was trained with");
    }
    let ds = load_split(&mut run, TRAIN_FILE)?;
    let data = TrainData::new(&ds, cfg.distill.upsample)?;
    let (student, trace) = distill_finetune(&teacher, student, &cfg.distill, &data)?;
    let mut out = Checkpoint::from_model(&student);
    out.iteration = cfg.distill.iterations;
    out.meta = json!({ "train": teacher_ck.meta.get("train"), "distill": cfg.distill });
    out.save(&run.output("student.ckpt"))?;
    write_kd_csv(&run.output("kd_loss.csv"), &trace)?;
    run.finish()
}

pub fn eval_cmd(mut run: Run) -> Result<PathBuf> {
    let cfg = run.cfg.clone();
    let test = load_split(&mut run, TEST_FILE)?;
    let count = cfg.eval.count.unwrap_or(test.len()).min(test.len());
    let test = test.subset(&(0..count).collect::<Vec<_>>())?;
    let loaded = match cfg.eval.reconstructor {
        ReconstructorKind::Diffusion => {
            let ck = load_checkpoint(&mut run, required(&cfg.inputs.checkpoint, "checkpoint")?)?;
            Some((ck.inference_model()?, schedule_of(&ck, &cfg.train.schedule)?))
        }
        _ => None,
    };
    let mut rec: Box<dyn Reconstructor + '_> = match (&cfg.eval.reconstructor, &loaded) {
        (ReconstructorKind::Diffusion, Some((model, schedule))) => {
            Box::new(DiffusionReconstructor { model, schedule, method: cfg.eval.upsample })
        }
        (ReconstructorKind::Nearest, _) => Box::new(InterpolationBaseline(UpsampleMethod::Nearest)),
        (ReconstructorKind::Bicubic, _) => Box::new(InterpolationBaseline(UpsampleMethod::Bicubic)),
        _ => Box::new(OracleReconstructor),
    };
    let method = serde_json::to_value(cfg.eval.reconstructor)?.as_str().unwrap_or_default().to_string();
    let mut markdown = String::new();
    for &factor in &cfg.eval.factors {
        let req = EvalRequest {
            test: &test,
            factor,
            seed: cfg.eval.seed,
            method: method.clone(),
            batch: cfg.eval.batch_size,
            ssim_window: cfg.eval.ssim_window,
        };
        let report = evaluate(rec.as_mut(), &req).map_err(|e| match e {
            cftwin::Error::Domain(_) => anyhow::Error::new(ConfigError(format!("`eval.factors`: {e}"))),
            e => e.into(),
        })?;
        log::info!("{}: median NMSE {:.4e}, median SSIM {:.4}", report.task, report.median.nmse, report.median.ssim);
        std::fs::write(run.output(&format!("report-x{factor}.json")), serde_json::to_string_pretty(&report)?)?;
        markdown.push_str(&report.to_markdown());
        markdown.push('\n');
    }
    std::fs::write(run.output("report.md"), markdown)?;
    drop(rec);
    run.finish()
}

pub fn plot_cmd(mut run: Run) -> Result<PathBuf> {
    let cfg = run.cfg.clone();
    let test = load_split(&mut run, TEST_FILE)?;
    let dir = required(&cfg.inputs.samples_dir, "samples_dir")?.clone();
    let mut files: Vec<(usize, PathBuf)> = std::fs::read_dir(&dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let stem = p.file_stem()?.to_str()?.strip_prefix("sample-")?.parse().ok()?;
            (p.extension()? == "cfds").then_some((stem, p))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(ConfigError(format!("no sample-NNNN.cfds files in {}", dir.display())));
    }
    for (i, path) in files {
        let sample = read_dataset(&run.input(&path)?)?;
        let Some(truth) = test.pairs.get(i) else {
            bail!("sample {i} has no matching test map");
        };
        let (recon, cond) = &sample.pairs[0];
        let h = heatmap::render(&[&truth.0, cond, recon], cfg.plot.min_panel_px)?;
        heatmap::write_png(&h, &run.output(&format!("plot-{i:04}.png")))?;
    }
    run.finish()
}

/// Section whose `seed` the `--seed` flag sets for each command.
pub fn seed_section(command: &str) -> Option<&'static str> {
    match command {
        "gen" => Some("data"),
        "train" => Some("train"),
        "prune" => Some("prune"),
        "distill" => Some("distill"),
        "sample" => Some("sample"),
        "eval" => Some("eval"),
        _ => None,
    }
}

/// Seed in effect for `command` after overrides.
pub fn effective_seed(command: &str, cfg: &RunConfig) -> Option<u64> {
    Some(match seed_section(command)? {
        "data" => cfg.data.seed,
        "train" => cfg.train.seed,
        "prune" => cfg.prune.seed,
        "distill" => cfg.distill.seed,
        "sample" => cfg.sample.seed,
        _ => cfg.eval.seed,
    })
}

