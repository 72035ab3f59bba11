//! Built-in invariant suite. Every property the library promises has one
//! named check here; the CLI's `selfcheck` command prints the results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::DecompositionSample;
use crate::error::Result;
use crate::losses::{decomposition_loss, total_loss, total_loss_node, LossWeights, NormMode};
use crate::metrics::{psnr, ssim, SSIM_K1};
use crate::model::{build_network, forward, forward_graph, FusionMode, NetworkConfig};
use crate::ndtensor::{grad_check, Fault, GradCheckOptions, GradCheckReport, Graph, Mode, Padding, Tensor, Var};
use crate::phantom::{make_phantom, PhantomSpec};
use crate::projection::{additivity_error, pose_from_angles, render_dataset, render_drr, CameraIntrinsics, Label, ProjectionImage};
use crate::trainer::{
    check_no_leakage, dropout_rng, epoch_order, evaluate_loss, protocol_splits, sgd_step, split_indices, train, Protocol,
    RunSplit, TrainConfig,
};
use crate::volume::{clip_volume, sample_trilinear, ClipPlan, Volume};

#[derive(Clone, Debug, Default)]
pub struct SelfCheckOptions {
    /// Corrupts a backward rule so that gradient checks must fail.
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub module: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

type Outcome = std::result::Result<String, String>;

struct Check {
    module: &'static str,
    name: &'static str,
    run: fn(&SelfCheckOptions) -> Outcome,
}

const CHECKS: &[Check] = &[
    Check { module: "volume", name: "partition_is_exact", run: partition_is_exact },
    Check { module: "volume", name: "trilinear_is_linear", run: trilinear_is_linear },
    Check { module: "volume", name: "phantom_is_reproducible", run: phantom_is_reproducible },
    Check { module: "projection", name: "renderer_is_linear", run: renderer_is_linear },
    Check { module: "projection", name: "projection_is_additive", run: projection_is_additive },
    Check { module: "projection", name: "step_refinement", run: step_refinement },
    Check { module: "projection", name: "render_thread_independent", run: render_thread_independent },
    Check { module: "ndtensor", name: "op_gradients", run: op_gradients },
    Check { module: "ndtensor", name: "fan_out_accumulates", run: fan_out_accumulates },
    Check { module: "ndtensor", name: "dropout_preserves_mean", run: dropout_preserves_mean },
    Check { module: "ndtensor", name: "forward_thread_independent", run: forward_thread_independent },
    Check { module: "model", name: "fixed_sum_is_exact", run: fixed_sum_is_exact },
    Check { module: "model", name: "eval_is_pure", run: eval_is_pure },
    Check { module: "model", name: "network_gradient", run: network_gradient },
    Check { module: "losses", name: "loss_nonnegative_zero_iff_equal", run: loss_nonnegative },
    Check { module: "losses", name: "loss_affine_in_lambda_r", run: loss_affine_in_lambda_r },
    Check { module: "losses", name: "loss_gradients", run: loss_gradients },
    Check { module: "losses", name: "loss_endpoints", run: loss_endpoints },
    Check { module: "metrics", name: "metric_oracles", run: metric_oracles },
    Check { module: "metrics", name: "metrics_symmetric", run: metrics_symmetric },
    Check { module: "metrics", name: "ssim_upper_bound", run: ssim_upper_bound },
    Check { module: "metrics", name: "metrics_scale_invariant", run: metrics_scale_invariant },
    Check { module: "trainer", name: "sgd_recurrence", run: sgd_recurrence },
    Check { module: "trainer", name: "split_sizes", run: split_sizes },
    Check { module: "trainer", name: "no_test_leakage", run: no_test_leakage },
    Check { module: "trainer", name: "recorded_loss_reevaluates", run: recorded_loss_reevaluates },
    Check { module: "trainer", name: "training_deterministic", run: training_deterministic },
];

/// `(module, name)` of every check, in run order.
pub fn check_names() -> Vec<(&'static str, &'static str)> {
    CHECKS.iter().map(|c| (c.module, c.name)).collect()
}

/// Runs every check. A panicking check is reported as failed.
pub fn run_all(opts: &SelfCheckOptions) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|c| {
            let outcome = std::panic::catch_unwind(|| (c.run)(opts))
                .unwrap_or_else(|_| Err("check panicked".to_string()));
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                module: c.module.into(),
                name: c.name.into(),
                passed,
                detail,
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> std::result::Result<R, String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    Ok(pool.install(f))
}

fn random_volume(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Volume {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.random::<f32>() * 0.05).collect();
    let spacing = [2.0, 2.5, 3.0];
    Volume::new(dims, spacing, Volume::centered_origin(dims, spacing), data).expect("valid volume")
}

fn small_phantom(seed: u64, size: usize) -> std::result::Result<Volume, String> {
    let spacing = 320.0 / size as f32;
    e2s(make_phantom(&PhantomSpec::thorax(seed), [size; 3], [spacing; 3]))
}

fn random_plan(v: &Volume, rng: &mut ChaCha8Rng) -> ClipPlan {
    let axis = rng.random_range(0..3);
    let d = rng.random_range(2..5);
    let (lo, hi) = v.extent(axis);
    let mut b: Vec<f64> = (0..d - 1).map(|_| lo + (hi - lo) * rng.random_range(0.05..0.95)).collect();
    b.sort_by(f64::total_cmp);
    b.dedup();
    ClipPlan::new(axis, b)
}

pub fn partition_is_exact(_: &SelfCheckOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = small_phantom(3, 24)?;
    for trial in 0..5 {
        let plan = random_plan(&v, &mut rng);
        let parts = e2s(clip_volume(&v, &plan))?;
        for (i, &x) in v.data().iter().enumerate() {
            let s: f32 = parts.iter().map(|p| p.data()[i]).sum();
            ensure(s == x, || format!("trial {trial}: voxel {i} sums to {s}, volume holds {x}"))?;
        }
    }
    Ok("5 random plans reassemble bit-exactly".into())
}

pub fn trilinear_is_linear(_: &SelfCheckOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (v1, v2) = (random_volume([6, 5, 7], &mut rng), random_volume([6, 5, 7], &mut rng));
    let (a, b) = (0.75f32, 1.5f32);
    let v = e2s(v1.combine(a, &v2, b))?;
    let max = |v: &Volume| v.data().iter().fold(0.0f32, |m, &x| m.max(x)) as f64;
    let tol = 4.0 * f32::EPSILON as f64 * (a as f64 * max(&v1) + b as f64 * max(&v2));
    let (lo, hi) = v.lattice_bounds();
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let p = [0, 1, 2].map(|k| lo[k] + (hi[k] - lo[k]) * rng.random_range(-0.1..1.1));
        let lhs = sample_trilinear(&v, p);
        let rhs = a as f64 * sample_trilinear(&v1, p) + b as f64 * sample_trilinear(&v2, p);
        worst = worst.max((lhs - rhs).abs());
    }
    ensure(worst <= tol, || format!("deviation {worst:e} exceeds 4 ulp ({tol:e})"))?;
    Ok(format!("max deviation {worst:e} (bound {tol:e})"))
}

pub fn phantom_is_reproducible(_: &SelfCheckOptions) -> Outcome {
    let a = small_phantom(5, 24)?;
    let b = single_threaded(|| small_phantom(5, 24))??;
    ensure(a == b, || "phantom differs between runs or thread counts".into())?;
    Ok("identical across runs and thread counts".into())
}

fn small_pose(size: usize, cran: f64, lao: f64) -> crate::projection::CameraPose {
    pose_from_angles(&CameraIntrinsics::square(size), cran, lao)
}

pub fn renderer_is_linear(_: &SelfCheckOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (v1, v2) = (random_volume([12, 12, 12], &mut rng), random_volume([12, 12, 12], &mut rng));
    let (a, b) = (2.0f32, 0.5f32);
    let v = e2s(v1.combine(a, &v2, b))?;
    let pose = small_pose(16, 10.0, 30.0);
    let step = 1.0;
    let (r, r1, r2) = (
        e2s(render_drr(&v, &pose, step))?,
        e2s(render_drr(&v1, &pose, step))?,
        e2s(render_drr(&v2, &pose, step))?,
    );
    let peak = r.max().max(f32::MIN_POSITIVE) as f64;
    let mut worst = 0.0f64;
    for i in 0..r.len() {
        let rhs = a as f64 * r1.data[i] as f64 + b as f64 * r2.data[i] as f64;
        worst = worst.max((r.data[i] as f64 - rhs).abs() / peak);
    }
    ensure(worst <= 1e-5, || format!("relative deviation {worst:e} > 1e-5"))?;
    Ok(format!("max relative deviation {worst:e}"))
}

pub fn projection_is_additive(_: &SelfCheckOptions) -> Outcome {
    let v = small_phantom(7, 32)?;
    let plan = e2s(ClipPlan::uniform(&v, 1, 3))?;
    let poses: Vec<_> = [(0.0, 0.0), (20.0, -40.0), (10.0, 25.0), (5.0, 40.0)]
        .iter()
        .map(|&(c, l)| small_pose(32, c, l))
        .collect();
    let samples = e2s(render_dataset("check", &v, &plan, &poses, 5.0))?;
    let worst = samples.iter().map(additivity_error).fold(0.0, f64::max);
    ensure(worst <= 1e-4, || format!("additivity error {worst:e} > 1e-4"))?;
    Ok(format!("max relative error {worst:e} over {} views", samples.len()))
}

pub fn step_refinement(_: &SelfCheckOptions) -> Outcome {
    let mu = 0.02f32;
    let dims = [10, 10, 10];
    let spacing = [8.0; 3];
    let v = e2s(Volume::new(dims, spacing, Volume::centered_origin(dims, spacing), vec![mu; 1000]))?;
    let pose = small_pose(16, 15.0, -30.0);
    let mut worst = 0.0f64;
    for step in [8.0, 4.0, 2.0] {
        let coarse = e2s(render_drr(&v, &pose, step))?;
        let fine = e2s(render_drr(&v, &pose, step / 2.0))?;
        let diff = coarse
            .data
            .iter()
            .zip(&fine.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        ensure(diff <= mu as f64 * step, || format!("step {step}: change {diff:e} > {:e}", mu as f64 * step))?;
        worst = worst.max(diff / step);
    }
    Ok(format!("max change per mm of step {worst:e}"))
}

pub fn render_thread_independent(_: &SelfCheckOptions) -> Outcome {
    let v = small_phantom(9, 24)?;
    let pose = small_pose(24, 10.0, 10.0);
    let a = e2s(render_drr(&v, &pose, 4.0))?;
    let b = e2s(single_threaded(|| render_drr(&v, &pose, 4.0))?)?;
    ensure(a == b, || "render differs with one thread".into())?;
    Ok("bit-identical with one worker".into())
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Gradient check of a graph using every differentiable operator, on shapes
/// drawn from `seed`.
pub fn op_chain_grad_check(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..3);
    let c = rng.random_range(1..4);
    let h = 2 * rng.random_range(2..4);
    let w = 2 * rng.random_range(2..4);
    let k = rng.random_range(1..4);
    let params = vec![
        rand_tensor(&[k, c, 3, 3], &mut rng),
        rand_tensor(&[k], &mut rng),
        rand_tensor(&[2, k + c, 3, 3], &mut rng),
        rand_tensor(&[2], &mut rng),
        rand_tensor(&[1, c, 1, 1], &mut rng),
        rand_tensor(&[1], &mut rng),
    ];
    let x = rand_tensor(&[n, c, h, w], &mut rng);
    let target = rand_tensor(&[n, 1, h, w], &mut rng);
    let target_small = rand_tensor(&[n, 1, (h - 1) / 2 + 1, (w - 1) / 2 + 1], &mut rng);
    let build = |g: &mut Graph<f64>, p: &[Var]| -> Result<Var> {
        let xv = g.input(x.clone());
        let a = g.conv2d(xv, p[0], p[1], 1, Padding::Same)?;
        let a = g.relu(a);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd5);
        let a = g.dropout(a, 0.25, Mode::Train, &mut drop_rng)?;
        let pooled = g.maxpool2(a)?;
        let up = g.upsample2(pooled)?;
        let cat = g.concat_channels(up, xv)?;
        let y = g.conv2d(cat, p[2], p[3], 1, Padding::Same)?;
        let s = g.channel_sum(y)?;
        let gate = g.conv2d(xv, p[4], p[5], 1, Padding::Valid)?;
        let prod = g.mul(s, gate)?;
        let scaled = g.scale(prod, 0.5);
        let t = g.input(target.clone());
        let l1 = g.sq_diff_sum(scaled, t, 0.3)?;
        let l2 = g.abs_diff_sum(scaled, t, 0.2)?;
        let l3 = g.diff_norm(scaled, t)?;
        let strided = g.conv2d(xv, p[4], p[5], 2, Padding::Same)?;
        let ts = g.input(target_small.clone());
        let l4 = g.sq_diff_sum(strided, ts, 1.0)?;
        let total = g.add(l1, l2)?;
        let total = g.add(total, l3)?;
        let total = g.add(total, l4)?;
        let extra = g.sum(s);
        let extra = g.scale(extra, 1e-2);
        g.add(total, extra)
    };
    let mut opts = GradCheckOptions::for_precision::<f64>(1e-6);
    opts.fault = fault;
    grad_check(&params, build, &opts)
}

pub fn op_gradients(opts: &SelfCheckOptions) -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let r = e2s(op_chain_grad_check(seed, opts.fault))?;
        ensure(r.passed, || format!("seed {seed}: max relative error {:e} > {:e}", r.max_rel_error, r.tol))?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(format!("20 seeds, max relative error {worst:e}"))
}

pub fn fan_out_accumulates(_: &SelfCheckOptions) -> Outcome {
    let mut g = Graph::<f64>::new();
    let x = g.param(e2s(Tensor::new(&[3], vec![1.0, -2.0, 0.5]))?);
    let y = e2s(g.add(x, x))?;
    let s = g.sum(y);
    let grads = e2s(g.backward(s))?;
    let dx = grads.get(x).ok_or("no gradient for x")?;
    ensure(dx.data() == [2.0, 2.0, 2.0], || format!("d(x+x)/dx = {:?}", dx.data()))?;
    Ok("d(x + x)/dx = 2".into())
}

pub fn dropout_preserves_mean(_: &SelfCheckOptions) -> Outcome {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[1_000_000], 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let y = e2s(g.dropout(x, 0.5, Mode::Train, &mut rng))?;
    let mean = g.value(y).data().iter().sum::<f64>() / 1e6;
    ensure((0.99..=1.01).contains(&mean), || format!("mean {mean}"))?;
    let z = e2s(g.dropout(x, 0.5, Mode::Eval, &mut rng))?;
    ensure(z == x, || "eval-mode dropout is not the identity".into())?;
    Ok(format!("train-mode mean {mean:.5}"))
}

fn tiny_net(fusion: FusionMode, size: usize) -> NetworkConfig {
    NetworkConfig {
        input_size: [size, size],
        levels: 2,
        base_channels: 2,
        components: 3,
        dropout_p: 0.5,
        fusion,
    }
}

pub fn forward_thread_independent(_: &SelfCheckOptions) -> Outcome {
    let cfg = tiny_net(FusionMode::Learnable, 16);
    let params = e2s(build_network::<f32>(&cfg, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = Tensor::from_fn(&[4, 1, 16, 16], |_| rng.random::<f32>());
    let run = || {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        forward(&params, &cfg, &x, Mode::Train, &mut r)
    };
    let a = e2s(run())?;
    let b = e2s(single_threaded(run)?)?;
    ensure(a == b, || "forward differs with one worker".into())?;
    Ok("bit-identical with one worker".into())
}

pub fn fixed_sum_is_exact(_: &SelfCheckOptions) -> Outcome {
    let cfg = tiny_net(FusionMode::FixedSum, 16);
    let params = e2s(build_network::<f32>(&cfg, 2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.random::<f32>());
    let (dec, rec) = e2s(forward(&params, &cfg, &x, Mode::Eval, &mut rng))?;
    for n in 0..2 {
        for (p, &r) in rec.plane(n, 0).iter().enumerate() {
            let mut s = dec.plane(n, 0)[p];
            for c in 1..cfg.components {
                s += dec.plane(n, c)[p];
            }
            ensure(s == r, || format!("pixel {p}: Σ components {s} != reconstruction {r}"))?;
        }
    }
    Ok("reconstruction equals Σ components bit-exactly".into())
}

pub fn eval_is_pure(_: &SelfCheckOptions) -> Outcome {
    let cfg = tiny_net(FusionMode::Learnable, 16);
    let params = e2s(build_network::<f32>(&cfg, 3))?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.random::<f32>());
    let a = e2s(forward(&params, &cfg, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(1)))?;
    let b = e2s(forward(&params, &cfg, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(2)))?;
    ensure(a == b, || "eval output depends on the generator".into())?;
    Ok("eval output independent of generator state".into())
}

/// Gradient check of the total objective through the whole network in f64.
pub fn network_grad_check(cfg: &NetworkConfig, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let mut params = build_network::<f64>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Zero biases feeding dead channels put ReLU inputs exactly on the kink;
    // random biases move the check to a generic point.
    let fusion_bias = params.tensors.len() - 1;
    for (i, t) in params.tensors.iter_mut().enumerate() {
        if t.shape().len() == 1 && (i != fusion_bias || cfg.fusion == FusionMode::Learnable) {
            *t = Tensor::from_fn(t.shape(), |_| rng.random_range(-0.1..0.1));
        }
    }
    let [h, w] = cfg.input_size;
    let x = Tensor::from_fn(&[2, 1, h, w], |_| rng.random::<f64>());
    let target = Tensor::from_fn(&[2, cfg.components, h, w], |_| rng.random::<f64>() * 0.5);
    let trainable: Vec<usize> = (0..params.tensors.len()).filter(|&i| params.is_trainable(cfg, i)).collect();
    let frozen = params.clone();
    let build = |g: &mut Graph<f64>, p: &[Var]| -> Result<Var> {
        let mut vars = Vec::with_capacity(frozen.tensors.len());
        let mut it = p.iter();
        for (i, t) in frozen.tensors.iter().enumerate() {
            vars.push(if trainable.contains(&i) { *it.next().expect("trainable var") } else { g.input(t.clone()) });
        }
        let xv = g.input(x.clone());
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
        let (dec, rec) = forward_graph(g, &vars, cfg, xv, Mode::Train, &mut drop_rng)?;
        let tv = g.input(target.clone());
        let (_, _, total) = total_loss_node(g, dec, tv, rec, xv, LossWeights::new(0.5, 0.1)?, NormMode::Mean)?;
        Ok(total)
    };
    let mut opts = GradCheckOptions::for_precision::<f64>(1e-5);
    opts.fault = fault;
    let checked: Vec<Tensor<f64>> = trainable.iter().map(|&i| params.tensors[i].clone()).collect();
    grad_check(&checked, build, &opts)
}

pub fn network_gradient(opts: &SelfCheckOptions) -> Outcome {
    let (mut entries, mut worst) = (0, 0.0f64);
    for fusion in [FusionMode::Learnable, FusionMode::FixedSum] {
        let r = e2s(network_grad_check(&tiny_net(fusion, 16), 0, opts.fault))?;
        ensure(r.passed, || {
            format!("{fusion:?}: max relative error {:e} > {:e} at {:?}", r.max_rel_error, r.tol, r.worst)
        })?;
        entries += r.entries_checked;
        worst = worst.max(r.max_rel_error);
    }
    Ok(format!("both fusion modes, {entries} entries, max relative error {worst:e}"))
}

fn t64(data: Vec<f64>) -> Tensor<f64> {
    let n = data.len();
    Tensor::new(&[n], data).expect("1-d tensor")
}

pub fn loss_nonnegative(_: &SelfCheckOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let w = LossWeights::new(0.5, 0.3).map_err(|e| e.to_string())?;
    for mode in [NormMode::Mean, NormMode::Literal] {
        for _ in 0..50 {
            let v = |rng: &mut ChaCha8Rng| t64((0..12).map(|_| rng.random_range(-2.0..2.0)).collect());
            let (p, t, f, i) = (v(&mut rng), v(&mut rng), v(&mut rng), v(&mut rng));
            let l = e2s(total_loss(&p, &t, &f, &i, w, mode))?;
            ensure(l.total > 0.0, || format!("{mode:?}: loss {} for unequal tensors", l.total))?;
            let z = e2s(total_loss(&p, &p, &f, &f, w, mode))?;
            ensure(z.total == 0.0, || format!("{mode:?}: loss {} for equal tensors", z.total))?;
        }
    }
    Ok("positive on 100 random cases, zero on equal tensors".into())
}

pub fn loss_affine_in_lambda_r(_: &SelfCheckOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let v = |rng: &mut ChaCha8Rng| t64((0..20).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (p, t, f, i) = (v(&mut rng), v(&mut rng), v(&mut rng), v(&mut rng));
    let at = |lr: f64| -> std::result::Result<f64, String> {
        Ok(e2s(total_loss(&p, &t, &f, &i, LossWeights { lambda_r: lr, lambda_d: 0.1 }, NormMode::Mean))?.total)
    };
    let (l0, l1, l2, l3) = (at(0.0)?, at(1.0)?, at(2.0)?, at(3.5)?);
    let slope = l1 - l0;
    ensure(slope > 0.0, || "loss does not increase with lambda_r".into())?;
    for (lr, l) in [(2.0, l2), (3.5, l3)] {
        let pred = l0 + lr * slope;
        ensure((l - pred).abs() <= 1e-12 * l.abs().max(1.0), || format!("lambda_r {lr}: {l} vs affine {pred}"))?;
    }
    Ok(format!("slope {slope:.6}"))
}

pub fn loss_gradients(_: &SelfCheckOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst = 0.0f64;
    for mode in [NormMode::Mean, NormMode::Literal] {
        let target: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Offsets of at least 0.05 keep every |diff| clear of the ℓ1 kink.
        let pred: Vec<f64> = target
            .iter()
            .map(|&t| t + rng.random_range(0.05..0.5) * if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let input: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fused: Vec<f64> = input.iter().map(|&x| x + rng.random_range(-0.5..0.5)).collect();
        let (target, input) = (
            Tensor::new(&[1, 4, 2, 3], target).map_err(|e| e.to_string())?,
            Tensor::new(&[1, 1, 2, 3], input).map_err(|e| e.to_string())?,
        );
        let params = vec![
            Tensor::new(&[1, 4, 2, 3], pred).map_err(|e| e.to_string())?,
            Tensor::new(&[1, 1, 2, 3], fused).map_err(|e| e.to_string())?,
        ];
        let build = |g: &mut Graph<f64>, p: &[Var]| -> Result<Var> {
            let t = g.input(target.clone());
            let i = g.input(input.clone());
            let (_, _, total) = total_loss_node(g, p[0], t, p[1], i, LossWeights::new(0.7, 0.3)?, mode)?;
            Ok(total)
        };
        let r = e2s(grad_check(&params, build, &GradCheckOptions::for_precision::<f64>(1e-6)))?;
        ensure(r.passed, || format!("{mode:?}: max relative error {:e}", r.max_rel_error))?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(format!("max relative error {worst:e}"))
}

pub fn loss_endpoints(_: &SelfCheckOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
    let b: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
    let n = a.len() as f64;
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    let mae = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let (ta, tb) = (t64(a), t64(b));
    let l1 = e2s(decomposition_loss(&ta, &tb, 1.0, NormMode::Mean))?;
    let l0 = e2s(decomposition_loss(&ta, &tb, 0.0, NormMode::Mean))?;
    ensure((l1 - mse).abs() <= 1e-9, || format!("lambda_d = 1 gives {l1}, MSE is {mse}"))?;
    ensure((l0 - mae).abs() <= 1e-9, || format!("lambda_d = 0 gives {l0}, MAE is {mae}"))?;
    let w = LossWeights { lambda_r: 0.0, lambda_d: 0.1 };
    let full = e2s(total_loss(&ta, &tb, &tb, &ta, w, NormMode::Mean))?;
    let dec = e2s(decomposition_loss(&ta, &tb, 0.1, NormMode::Mean))?;
    ensure(full.total == dec, || format!("lambda_r = 0 total {} != decomposition {dec}", full.total))?;
    Ok("MSE, MAE and lambda_r = 0 endpoints match".into())
}

fn image(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f32) -> ProjectionImage {
    let data = (0..w * h).map(|i| f(i % w, i / w)).collect();
    ProjectionImage::new(w, h, data, Label::Total).expect("valid image")
}

fn textured(seed: u64) -> ProjectionImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    image(24, 20, |x, y| (x as f32 * 0.03 + (y as f32 * 0.4).sin()).abs() + rng.random::<f32>() * 0.3)
}

pub fn metric_oracles(_: &SelfCheckOptions) -> Outcome {
    let a = textured(1);
    let b = image(24, 20, |x, y| a.at(x, y) + 0.1);
    let p = e2s(psnr(&a, &b, 1.0))?;
    ensure((p - 20.0).abs() <= 1e-3, || format!("constant offset 0.1 at peak 1 gives {p} dB"))?;
    let s = e2s(ssim(&a, &a, 1.0))?;
    ensure(s == 1.0, || format!("SSIM(a, a) = {s}"))?;
    let peak = 2.0;
    let zero = image(16, 16, |_, _| 0.0);
    let full = image(16, 16, |_, _| peak as f32);
    let c1 = (SSIM_K1 * peak).powi(2);
    let expect = c1 / (peak * peak + c1);
    let got = e2s(ssim(&zero, &full, peak))?;
    ensure((got - expect).abs() <= 1e-9, || format!("SSIM(0, peak) = {got}, expected {expect}"))?;
    Ok(format!("PSNR {p:.4} dB, SSIM(0, peak) {got:.3e}"))
}

pub fn metrics_symmetric(_: &SelfCheckOptions) -> Outcome {
    for seed in 0..5 {
        let (a, b) = (textured(seed), textured(seed + 100));
        let (p1, p2) = (e2s(psnr(&a, &b, 2.0))?, e2s(psnr(&b, &a, 2.0))?);
        let (s1, s2) = (e2s(ssim(&a, &b, 2.0))?, e2s(ssim(&b, &a, 2.0))?);
        ensure((p1 - p2).abs() <= 1e-9 && (s1 - s2).abs() <= 1e-9, || {
            format!("seed {seed}: psnr {p1}/{p2}, ssim {s1}/{s2}")
        })?;
    }
    Ok("5 random pairs".into())
}

pub fn ssim_upper_bound(_: &SelfCheckOptions) -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..10 {
        let (a, b) = (textured(seed), textured(seed + 50));
        let s = e2s(ssim(&a, &b, 2.0))?;
        ensure(s < 1.0, || format!("seed {seed}: SSIM {s} for distinct images"))?;
        worst = worst.max(s);
    }
    Ok(format!("largest SSIM of distinct pairs {worst:.6}"))
}

pub fn metrics_scale_invariant(_: &SelfCheckOptions) -> Outcome {
    let (a, b) = (textured(3), textured(4));
    let k = 7.5f32;
    let scale = |img: &ProjectionImage| image(img.width, img.height, |x, y| img.at(x, y) * k);
    let (sa, sb) = (scale(&a), scale(&b));
    let dp = (e2s(psnr(&a, &b, 2.0))? - e2s(psnr(&sa, &sb, 2.0 * k as f64))?).abs();
    let ds = (e2s(ssim(&a, &b, 2.0))? - e2s(ssim(&sa, &sb, 2.0 * k as f64))?).abs();
    ensure(dp <= 1e-6 && ds <= 1e-6, || format!("PSNR moved {dp:e}, SSIM moved {ds:e}"))?;
    Ok(format!("PSNR change {dp:e}, SSIM change {ds:e}"))
}

pub fn sgd_recurrence(_: &SelfCheckOptions) -> Outcome {
    let mut p = vec![t64(vec![0.0])];
    let mut v = vec![t64(vec![0.0])];
    let g = vec![t64(vec![1.0])];
    e2s(sgd_step(&mut p, &g, &mut v, 0.1, 0.9))?;
    let first = p[0].data()[0];
    e2s(sgd_step(&mut p, &g, &mut v, 0.1, 0.9))?;
    let second = p[0].data()[0] - first;
    ensure((first + 0.1).abs() < 1e-15 && (second + 0.19).abs() < 1e-15, || {
        format!("steps {first}, {second}; expected -0.1, -0.19")
    })?;
    Ok("steps -0.1 then -0.19".into())
}

pub fn split_sizes(_: &SelfCheckOptions) -> Outcome {
    let [a, b, c] = e2s(split_indices(1200, [0.6, 0.2, 0.2], 42))?;
    ensure((a.len(), b.len(), c.len()) == (720, 240, 240), || {
        format!("sizes {}/{}/{}", a.len(), b.len(), c.len())
    })?;
    let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
    all.sort_unstable();
    ensure(all == (0..1200).collect::<Vec<_>>(), || "split is not a partition".into())?;
    Ok("720/240/240, disjoint and exhaustive".into())
}

/// Small samples whose input is exactly the sum of its targets.
pub fn toy_samples(phantoms: usize, views: usize, size: usize, seed: u64) -> Vec<DecompositionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for p in 0..phantoms {
        for view in 0..views {
            let targets: Vec<ProjectionImage> = (0..3)
                .map(|c| {
                    let f = rng.random_range(0.5..1.5);
                    let mut img = image(size, size, |x, y| {
                        f * ((x as f32 * 0.3 + c as f32 + view as f32 * 0.2).sin().abs() + (y as f32 * 0.1))
                    });
                    img.label = Label::Component(c);
                    img
                })
                .collect();
            let input = image(size, size, |x, y| targets.iter().map(|t| t.at(x, y)).sum());
            out.push(DecompositionSample {
                phantom: format!("toy{p}"),
                view,
                input,
                targets,
            });
        }
    }
    out
}

pub fn no_test_leakage(_: &SelfCheckOptions) -> Outcome {
    let samples = toy_samples(3, 10, 4, 1);
    for protocol in [Protocol::IntraOp, Protocol::Lopo] {
        let splits = e2s(protocol_splits(protocol, &samples, [0.6, 0.2, 0.2], 5))?;
        for s in &splits {
            let seen: std::collections::BTreeSet<_> = s.train.iter().chain(&s.val).map(|x| x.id()).collect();
            ensure(s.test.iter().all(|x| !seen.contains(&x.id())), || format!("{} leaks", s.name))?;
        }
    }
    let leaky = RunSplit {
        name: "leaky".into(),
        train: samples[..20].iter().collect(),
        val: samples[20..25].iter().collect(),
        test: samples[19..30].iter().collect(),
    };
    ensure(check_no_leakage(&leaky, Protocol::Lopo).is_err(), || "leaky split was accepted".into())?;
    Ok("both protocols disjoint; leaky split rejected".into())
}

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 3,
        ..TrainConfig::desk()
    }
}

pub fn recorded_loss_reevaluates(_: &SelfCheckOptions) -> Outcome {
    let samples = toy_samples(1, 10, 8, 2);
    let refs: Vec<&DecompositionSample> = samples.iter().collect();
    let (tr, va) = refs.split_at(7);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..toy_train_config()
    };
    let mut net = tiny_net(FusionMode::Learnable, 8);
    net.levels = 1;
    let out = e2s(train(&cfg, &net, tr, va, None))?;
    let params = &out.model.params;
    let mut worst = 0.0f64;
    for (epoch, rec) in out.record.epochs.iter().enumerate() {
        let order = epoch_order(cfg.seed, epoch, tr.len());
        let mut rng = dropout_rng(cfg.seed, epoch);
        let mut acc = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DecompositionSample> = chunk.iter().map(|&i| tr[i]).collect();
            let l = e2s(evaluate_loss(params, &net, &batch, cfg.batch_size, cfg.weights, cfg.norm_mode, Mode::Train, &mut rng))?;
            acc = (acc.0 + l.total * batch.len() as f64, acc.1 + batch.len());
        }
        let again = acc.0 / acc.1 as f64;
        let rel = (again - rec.train_loss).abs() / rec.train_loss.abs().max(f64::MIN_POSITIVE);
        ensure(rel <= 1e-5, || format!("epoch {epoch}: recorded {} vs re-evaluated {again}", rec.train_loss))?;
        worst = worst.max(rel);
    }
    Ok(format!("max relative difference {worst:e}"))
}

pub fn training_deterministic(_: &SelfCheckOptions) -> Outcome {
    let samples = toy_samples(1, 10, 8, 3);
    let refs: Vec<&DecompositionSample> = samples.iter().collect();
    let (tr, va) = refs.split_at(7);
    let mut net = tiny_net(FusionMode::Learnable, 8);
    net.levels = 1;
    let cfg = toy_train_config();
    let a = e2s(train(&cfg, &net, tr, va, None))?;
    let b = e2s(single_threaded(|| train(&cfg, &net, tr, va, None))?)?;
    let curve = |o: &crate::trainer::TrainOutcome| o.record.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
    ensure(curve(&a) == curve(&b), || "loss curves differ".into())?;
    ensure(a.model == b.model, || "checkpoints differ".into())?;
    Ok("identical loss curve and parameters".into())
}
