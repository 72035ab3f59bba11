//! Checks of the command layer itself, run in a scratch directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use walkdir::WalkDir;

use xdecomp::dataset::DatasetConfig;
use xdecomp::model::{FusionMode, NetworkConfig};
use xdecomp::phantom::PhantomSpec;
use xdecomp::projection::{CameraIntrinsics, TrajectoryConfig};
use xdecomp::selfcheck::CheckResult;
use xdecomp::trainer::{Protocol, TrainConfig};

use crate::commands::{self, Global, Preset};
use crate::manifest::sha256_file;

struct Scratch {
    root: PathBuf,
    spec: PathBuf,
    train: PathBuf,
    network: PathBuf,
}

impl Scratch {
    fn out(&self, cmd: &str) -> PathBuf {
        self.root.join("out").join(cmd)
    }

    fn global(&self, cmd: &str) -> Global {
        Global {
            seed: Some(7),
            threads: None,
            verify: true,
            out: Some(self.out(cmd)),
            quiet: true,
        }
    }
}

fn tiny_trajectory(n_cranial: usize) -> TrajectoryConfig {
    TrajectoryConfig {
        intrinsics: CameraIntrinsics::square(16),
        cranial_range: (0.0, 20.0),
        lao_rao_range: (-20.0, 20.0),
        n_cranial,
        n_lateral: 3,
        step_mm: None,
    }
}

fn prepare(root: &Path) -> Result<Scratch> {
    let inputs = root.join("inputs");
    fs::create_dir_all(&inputs)?;
    let spec = DatasetConfig {
        phantoms: vec![PhantomSpec::thorax(5)],
        dims: [32, 32, 32],
        spacing: [8.0; 3],
        components: 3,
        clip_axis: 1,
        trajectory: tiny_trajectory(2),
    };
    let train = TrainConfig {
        epochs: 2,
        batch_size: 2,
        split: [0.5, 0.25, 0.25],
        protocol: Protocol::IntraOp,
        ..TrainConfig::desk()
    };
    let network = NetworkConfig {
        input_size: [16, 16],
        levels: 2,
        base_channels: 2,
        components: 3,
        dropout_p: 0.5,
        fusion: FusionMode::Learnable,
    };
    let s = Scratch {
        root: root.to_path_buf(),
        spec: inputs.join("spec.json"),
        train: inputs.join("train.json"),
        network: inputs.join("network.json"),
    };
    fs::write(&s.spec, serde_json::to_vec_pretty(&spec)?)?;
    fs::write(&s.train, serde_json::to_vec_pretty(&train)?)?;
    fs::write(&s.network, serde_json::to_vec_pretty(&network)?)?;
    Ok(s)
}

fn pipeline(s: &Scratch) -> Result<()> {
    commands::gen(&s.global("gen"), Some(&s.spec))?;
    commands::render(&s.global("render"), &s.out("gen"), None)?;
    commands::train(&s.global("train"), &s.out("render"), Some(&s.train), Some(&s.network), Preset::Desk)?;
    let ckpt = s.out("train").join("runs/intra_op/checkpoint.xdc");
    commands::eval(&s.global("eval"), &ckpt, &s.out("render"))?;
    let image = s.out("render").join("phantom5_view0000/input.xdt");
    commands::decompose(&s.global("decompose"), &ckpt, &image)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    files.sort();
    files
}

/// Content hashes of every output file; wall-clock fields of training
/// records are zeroed first since they are measurements, not results.
fn snapshot(out: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for f in files_under(out) {
        let rel = f.strip_prefix(out)?.display().to_string();
        let hash = if f.file_name().is_some_and(|n| n == "record.json") {
            let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&f)?)?;
            for e in v["epochs"].as_array_mut().into_iter().flatten() {
                e["wall_time_s"] = 0.0.into();
            }
            crate::manifest::sha256_hex(&serde_json::to_vec(&v)?)
        } else {
            sha256_file(&f)?
        };
        map.insert(rel, hash);
    }
    Ok(map)
}

fn idempotent(s: &Scratch) -> Result<String> {
    pipeline(s)?;
    let first = snapshot(&s.root.join("out"))?;
    pipeline(s)?;
    let second = snapshot(&s.root.join("out"))?;
    let changed: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    ensure!(first.len() == second.len(), "file sets differ between runs");
    ensure!(changed.is_empty(), "outputs differ between identical runs: {changed:?}");
    Ok(format!("{} output files identical across two runs", first.len()))
}

fn confined(s: &Scratch) -> Result<String> {
    let mut checked = 0;
    for f in files_under(&s.root) {
        let rel = f.strip_prefix(&s.root)?;
        if rel.starts_with("inputs") {
            continue;
        }
        let mut parts = rel.components();
        ensure!(
            parts.next().is_some_and(|c| c.as_os_str() == "out"),
            "{} written outside the output root",
            rel.display()
        );
        let cmd = parts.next().context("file directly under the output root")?;
        let out = s.root.join("out").join(cmd);
        let inner = f.strip_prefix(&out)?;
        let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json"))?)?;
        let declared = manifest["outputs"].as_array().cloned().unwrap_or_default();
        let ok = inner == Path::new("manifest.json")
            || declared.iter().filter_map(|d| d.as_str()).any(|d| inner.starts_with(d));
        ensure!(ok, "{} is not declared in its manifest", rel.display());
        checked += 1;
    }
    Ok(format!("{checked} files, all inside their command's out-dir and declared"))
}

fn empty_trajectory(s: &Scratch) -> Result<String> {
    let traj = s.root.join("inputs/empty_trajectory.json");
    fs::write(&traj, serde_json::to_vec(&tiny_trajectory(0))?)?;
    let g = s.global("empty");
    let result = commands::render(&g, &s.out("gen"), Some(&traj));
    ensure!(result.is_err(), "rendering an empty trajectory succeeded");
    ensure!(!s.out("empty").exists(), "failed render left output behind");
    Ok("rejected with no output".into())
}

fn decompose_count(s: &Scratch) -> Result<String> {
    let n = files_under(&s.out("decompose"))
        .iter()
        .filter(|f| f.extension().is_some_and(|e| e == "xdt"))
        .count();
    ensure!(n == 4, "expected d + 1 = 4 images, found {n}");
    Ok("d + 1 = 4 images".into())
}

type CliCheck = fn(&Scratch) -> Result<String>;

/// Names of the command-layer checks, in run order.
pub const CLI_CHECKS: [&str; 4] = ["commands_idempotent", "writes_confined", "empty_trajectory_no_output", "decompose_image_count"];

pub fn run_cli_checks() -> Vec<CheckResult> {
    let checks: [CliCheck; 4] = [idempotent, confined, empty_trajectory, decompose_count];
    let result = |name: &str, r: Result<String>| CheckResult {
        module: "cli".into(),
        name: name.into(),
        passed: r.is_ok(),
        detail: match r {
            Ok(d) => d,
            Err(e) => format!("{e:#}"),
        },
    };
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return CLI_CHECKS.iter().map(|n| result(n, Err(anyhow::anyhow!("creating a scratch directory: {e}")))).collect(),
    };
    let scratch = match prepare(dir.path()) {
        Ok(s) => s,
        Err(e) => return CLI_CHECKS.iter().map(|n| result(n, Err(anyhow::anyhow!("{e:#}")))).collect(),
    };
    CLI_CHECKS.iter().zip(checks).map(|(n, c)| result(n, c(&scratch))).collect()
}
