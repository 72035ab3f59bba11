use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use xdecomp::dataset::{DatasetConfig, DecompositionSample, SampleId};
use xdecomp::formats::{
    decode_pgm, decode_tensor, image_from_pgm, image_from_tensor, load_dataset, read_checkpoint, read_volume,
    sample_dir_name, save_samples, write_checkpoint, write_dataset_index, write_image, write_volume, DatasetIndex,
    PgmSidecar,
};
use xdecomp::metrics::{evaluate, Decompose, EvenSplit, PeakPolicy};
use xdecomp::model::NetworkConfig;
use xdecomp::projection::{additivity_error, default_step, render_samples, Label, ProjectionImage, TrajectoryConfig};
use xdecomp::trainer::{protocol_splits, run_protocol, TrainConfig};
use xdecomp::volume::{clip_volume, Volume};

use crate::manifest::RunManifest;

/// Seed of the default phantom set when `--seed` is absent.
pub const DEFAULT_SEED: u64 = 1;
/// Largest relative additivity error `render --verify` accepts.
pub const ADDITIVITY_TOLERANCE: f64 = 1e-4;

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Global {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub verify: bool,
    pub out: Option<PathBuf>,
    /// Suppresses progress output on stdout.
    pub quiet: bool,
}

impl Global {
    fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("this command needs --out <DIR>")
    }

    fn say(&self, msg: impl std::fmt::Display) {
        if !self.quiet {
            println!("{msg}");
        }
    }

    fn manifest(&self, command: &str, config: serde_json::Value) -> RunManifest {
        RunManifest::new(command, self.seed, self.threads, config)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn sub_volume_file(k: usize) -> String {
    format!("sub_{k}.xdv")
}

fn run_dir(name: &str) -> String {
    name.replace([':', '/', '\\'], "_")
}

pub fn gen(g: &Global, spec: Option<&Path>) -> Result<()> {
    let out = g.out()?;
    let cfg = match spec {
        Some(p) => read_json::<DatasetConfig>(p)?,
        None => DatasetConfig::desk(3, g.seed.unwrap_or(DEFAULT_SEED)),
    };
    ensure!(!cfg.phantoms.is_empty(), "dataset config lists no phantoms");
    let names: Vec<String> = (0..cfg.phantoms.len()).map(|i| cfg.phantom_name(i)).collect();
    ensure!(
        names.iter().collect::<BTreeSet<_>>().len() == names.len(),
        "phantom seeds must be distinct, got names {names:?}"
    );

    let mut volumes = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let v = cfg.volume(i).with_context(|| format!("generating {name}"))?;
        let plan = cfg.plan(&v)?;
        let parts = clip_volume(&v, &plan).with_context(|| format!("clipping {name}"))?;
        volumes.push((v, parts));
    }

    let mut m = g.manifest("gen", serde_json::to_value(&cfg)?);
    if let Some(p) = spec {
        m.add_input(p)?;
    }
    for name in &names {
        m.outputs.push(format!("{name}/volume.xdv"));
        for k in 0..cfg.components {
            m.outputs.push(format!("{name}/{}", sub_volume_file(k)));
        }
    }
    m.outputs.push("dataset_config.json".into());
    m.write(out)?;

    for (name, (v, parts)) in names.iter().zip(&volumes) {
        if g.verify {
            let mismatched = partition_mismatches(v, parts);
            ensure!(mismatched == 0, "{name}: {mismatched} voxels differ from the sum of the sub-volumes");
            g.say(format!("{name}: partition exact over {} voxels", v.len()));
        }
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        write_volume(&dir.join("volume.xdv"), v)?;
        for (k, p) in parts.iter().enumerate() {
            write_volume(&dir.join(sub_volume_file(k)), p)?;
        }
    }
    write_json(&out.join("dataset_config.json"), &cfg)?;
    log::info!("wrote {} phantoms with {} sub-volumes each to {}", names.len(), cfg.components, out.display());
    Ok(())
}

fn partition_mismatches(v: &Volume, parts: &[Volume]) -> usize {
    (0..v.len())
        .filter(|&i| {
            let s: f32 = parts.iter().map(|p| p.data()[i]).sum();
            s.to_bits() != v.data()[i].to_bits()
        })
        .count()
}

pub fn render(g: &Global, volumes: &Path, trajectory: Option<&Path>) -> Result<()> {
    let out = g.out()?;
    let cfg: DatasetConfig = read_json(&volumes.join("dataset_config.json"))?;
    let traj = match trajectory {
        Some(p) => read_json::<TrajectoryConfig>(p)?,
        None => cfg.trajectory.clone(),
    };
    let poses = traj.poses().context("building the trajectory")?;
    ensure!(!poses.is_empty(), "trajectory has no poses");

    let names: Vec<String> = (0..cfg.phantoms.len()).map(|i| cfg.phantom_name(i)).collect();
    ensure!(!names.is_empty(), "dataset config lists no phantoms");
    let mut loaded = Vec::with_capacity(names.len());
    for name in &names {
        let dir = volumes.join(name);
        let full = read_volume(&dir.join("volume.xdv")).with_context(|| format!("reading {name}/volume.xdv"))?;
        let parts = (0..cfg.components)
            .map(|k| {
                let p = dir.join(sub_volume_file(k));
                let v = read_volume(&p).with_context(|| format!("reading {}", p.display()))?;
                ensure!(v.same_grid(&full), "{} is not on the grid of {name}/volume.xdv", p.display());
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        loaded.push((full, parts));
    }

    let pose_list: Vec<_> = poses
        .iter()
        .enumerate()
        .map(|(view, p)| json!({"view": view, "cranial_deg": p.cranial_deg, "lao_rao_deg": p.lao_rao_deg}))
        .collect();
    let mut m = g.manifest(
        "render",
        json!({"dataset": cfg, "trajectory": traj, "poses": pose_list}),
    );
    m.add_input(volumes)?;
    if let Some(p) = trajectory {
        m.add_input(p)?;
    }
    for name in &names {
        m.outputs.extend((0..poses.len()).map(|v| sample_dir_name(name, v)));
    }
    m.outputs.push("dataset.json".into());
    m.write(out)?;

    let mut all_names = Vec::new();
    let mut index: Option<DatasetIndex> = None;
    let mut worst = 0.0f64;
    for (name, (full, parts)) in names.iter().zip(&loaded) {
        let step = traj.step_mm.unwrap_or_else(|| default_step(full));
        let samples = render_samples(name, full, parts, &poses, step).with_context(|| format!("rendering {name}"))?;
        if g.verify {
            let e = samples.iter().map(additivity_error).fold(0.0, f64::max);
            g.say(format!("{name}: max relative additivity error {e:.3e} over {} samples", samples.len()));
            worst = worst.max(e);
        }
        let described = DatasetIndex::describe(&samples)?;
        index.get_or_insert(described);
        all_names.extend(save_samples(out, &samples)?);
    }
    let mut index = index.expect("at least one phantom");
    index.phantoms = names.clone();
    index.samples = all_names;
    write_dataset_index(out, &index)?;
    log::info!("wrote {} samples to {}", index.samples.len(), out.display());
    if g.verify {
        g.say(format!("additivity: max relative error {worst:.3e} (limit {ADDITIVITY_TOLERANCE:.0e})"));
        ensure!(
            worst <= ADDITIVITY_TOLERANCE,
            "additivity error {worst:.3e} exceeds {ADDITIVITY_TOLERANCE:.0e}"
        );
    }
    Ok(())
}

pub fn train(
    g: &Global,
    data: &Path,
    config: Option<&Path>,
    network: Option<&Path>,
    preset: Preset,
) -> Result<()> {
    let out = g.out()?;
    let mut cfg = match (config, preset) {
        (Some(p), _) => read_json::<TrainConfig>(p)?,
        (None, Preset::Desk) => TrainConfig::desk(),
        (None, Preset::Paper) => TrainConfig::paper(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let samples = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let first = samples.first().context("dataset has no samples")?;
    let net = match network {
        Some(p) => read_json::<NetworkConfig>(p)?,
        None => NetworkConfig {
            input_size: [first.input.height, first.input.width],
            ..NetworkConfig::desk(first.components())
        },
    };
    net.validate()?;
    let init = match &cfg.warm_start {
        Some(p) => {
            let model = read_checkpoint(p).with_context(|| format!("reading warm start {}", p.display()))?;
            ensure!(model.config == net, "warm-start checkpoint was trained with a different network config");
            Some(model.params)
        }
        None => None,
    };
    let run_names: Vec<String> = protocol_splits(cfg.protocol, &samples, cfg.split, cfg.seed)?
        .iter()
        .map(|s| s.name.clone())
        .collect();

    let mut m = g.manifest("train", json!({"train": cfg, "network": net}));
    m.add_input(data)?;
    for p in [config, network].into_iter().flatten().chain(cfg.warm_start.as_deref()) {
        m.add_input(p)?;
    }
    for name in &run_names {
        let dir = run_dir(name);
        m.outputs.extend(["checkpoint.xdc", "record.json", "loss.csv"].map(|f| format!("runs/{dir}/{f}")));
    }
    m.outputs.extend(["report.json", "report.txt", "baseline.json", "baseline.txt"].map(String::from));
    m.write(out)?;

    let outcome = run_protocol(&cfg, &net, &samples, init.as_ref())?;
    let by_id: BTreeMap<SampleId, &DecompositionSample> = samples.iter().map(|s| (s.id(), s)).collect();
    let mut pooled = Vec::new();
    for run in &outcome.runs {
        let dir = format!("runs/{}", run_dir(&run.record.name));
        fs::create_dir_all(out.join(&dir))?;
        let ckpt = format!("{dir}/checkpoint.xdc");
        write_checkpoint(&out.join(&ckpt), &run.model)?;
        let mut record = run.record.clone();
        record.checkpoint = Some(ckpt);
        write_json(&out.join(&dir).join("record.json"), &record)?;
        fs::write(out.join(&dir).join("loss.csv"), record.loss_curve_csv())?;
        pooled.extend(record.test_ids.iter().map(|id| by_id[id].clone()));
        let first = &record.epochs[0];
        let last = record.epochs.last().expect("at least one epoch");
        g.say(format!(
            "{}: loss {:.4} -> {:.4}, best epoch {} (val {:.4})",
            record.name, first.train_loss, last.train_loss, record.best_epoch, record.best_val_loss
        ));
    }
    let baseline = evaluate(&EvenSplit { components: net.components }, &pooled, PeakPolicy::GroundTruthMax)?;
    write_json(&out.join("report.json"), &outcome.overall)?;
    fs::write(out.join("report.txt"), outcome.overall.to_table())?;
    write_json(&out.join("baseline.json"), &baseline)?;
    fs::write(out.join("baseline.txt"), baseline.to_table())?;
    g.say(outcome.overall.to_table());
    g.say(format!(
        "mean PSNR {:.2} dB vs {:.2} dB for the even split",
        outcome.overall.overall().mean_psnr,
        baseline.overall().mean_psnr
    ));
    Ok(())
}

pub fn eval(g: &Global, checkpoint: &Path, data: &Path) -> Result<()> {
    let model = read_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let samples = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    if let Some(out) = &g.out {
        let mut m = g.manifest("eval", json!({"network": model.config, "peak": PeakPolicy::GroundTruthMax}));
        m.add_input(checkpoint)?;
        m.add_input(data)?;
        m.outputs.extend(["report.json", "report.txt"].map(String::from));
        m.write(out)?;
    }
    let report = evaluate(&model, &samples, PeakPolicy::GroundTruthMax)?;
    g.say(report.to_table());
    if let Some(out) = &g.out {
        write_json(&out.join("report.json"), &report)?;
        fs::write(out.join("report.txt"), report.to_table())?;
    }
    Ok(())
}

/// Reads an XDT1 image, or a PGM preview with its `.json` sidecar.
pub fn load_image(path: &Path) -> Result<ProjectionImage> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("xdt") => Ok(image_from_tensor(&decode_tensor(&bytes)?, Label::Total)?),
        Some("pgm") => {
            let sidecar: PgmSidecar = read_json(&path.with_extension("json"))?;
            Ok(image_from_pgm(&decode_pgm(&bytes)?, &sidecar, Label::Total)?)
        }
        _ => bail!("{}: expected a .xdt or .pgm image", path.display()),
    }
}

#[derive(Debug, Serialize)]
struct Deviation {
    max_abs: f64,
    mean_abs: f64,
    rms: f64,
    /// `max_abs` over the input's peak.
    relative_max: f64,
}

pub fn decompose(g: &Global, checkpoint: &Path, image: &Path) -> Result<()> {
    let out = g.out()?;
    let model = read_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let input = load_image(image)?;
    let d = model.config.components;

    let mut m = g.manifest("decompose", json!({"network": model.config}));
    m.add_input(checkpoint)?;
    m.add_input(image)?;
    let stems: Vec<String> = (0..d).map(|i| format!("component_{i}")).chain(["reconstruction".into()]).collect();
    for s in &stems {
        m.outputs.extend(["xdt", "pgm", "json"].map(|e| format!("{s}.{e}")));
    }
    m.outputs.push("deviation.json".into());
    m.write(out)?;

    let components = model.decompose_batch(&[&input])?.remove(0);
    let mut recon = ProjectionImage::zeros(input.width, input.height, Label::Reconstruction);
    recon.pose = input.pose.clone();
    for c in &components {
        for (r, v) in recon.data.iter_mut().zip(&c.data) {
            *r += v;
        }
    }
    let diffs: Vec<f64> = recon.data.iter().zip(&input.data).map(|(&r, &x)| (r as f64 - x as f64).abs()).collect();
    let n = diffs.len() as f64;
    let max_abs = diffs.iter().copied().fold(0.0, f64::max);
    let dev = Deviation {
        max_abs,
        mean_abs: diffs.iter().sum::<f64>() / n,
        rms: (diffs.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
        relative_max: max_abs / (input.max() as f64).max(f64::MIN_POSITIVE),
    };
    for (c, stem) in components.iter().zip(&stems) {
        write_image(out, stem, c)?;
    }
    write_image(out, "reconstruction", &recon)?;
    write_json(&out.join("deviation.json"), &dev)?;
    g.say(format!(
        "wrote {} components and the reconstruction; |sum - input| max {:.4e}, mean {:.4e}",
        d, dev.max_abs, dev.mean_abs
    ));
    Ok(())
}
