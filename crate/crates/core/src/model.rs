//! The decomposition network: a U-Net-style encoder-decoder whose head
//! predicts `d` component projections, followed by a 1×1 fusion layer whose
//! output is compared with the input projection.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Decompose;
use crate::ndtensor::{Element, Graph, Mode, Padding, Tensor, Var};
use crate::projection::{Label, ProjectionImage};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Reconstruction is the exact channel sum of the components.
    FixedSum,
    /// Trainable 1×1 convolution initialized to weights 1, bias 0.
    #[default]
    Learnable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Input size as (height, width).
    pub input_size: [usize; 2],
    pub levels: usize,
    pub base_channels: usize,
    pub components: usize,
    pub dropout_p: f64,
    #[serde(default)]
    pub fusion: FusionMode,
}

impl NetworkConfig {
    /// 64×64, three levels, eight base channels.
    pub fn desk(components: usize) -> NetworkConfig {
        NetworkConfig {
            input_size: [64, 64],
            levels: 3,
            base_channels: 8,
            components,
            dropout_p: 0.5,
            fusion: FusionMode::Learnable,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::Config(format!("levels must lie in 1..=8, got {}", self.levels)));
        }
        let div = 1usize << self.levels;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} is not divisible by 2^{} = {div}",
                self.levels
            )));
        }
        if self.components < 2 {
            return Err(Error::Config("the network needs d >= 2 components".into()));
        }
        if self.base_channels == 0 || self.base_channels > 256 {
            return Err(Error::Config("base_channels must lie in 1..=256".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Name and shape of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layer_plan()
            .into_iter()
            .flat_map(|(name, co, ci, k)| {
                [
                    (format!("{name}.weight"), vec![co, ci, k, k]),
                    (format!("{name}.bias"), vec![co]),
                ]
            })
            .collect()
    }

    /// `(name, out_channels, in_channels, kernel)` for every convolution,
    /// in parameter order. The fusion layer comes last.
    fn layer_plan(&self) -> Vec<(String, usize, usize, usize)> {
        let mut plan = Vec::new();
        let mut prev = 1;
        for l in 0..self.levels {
            let c = self.channels(l);
            plan.push((format!("enc{l}.conv0"), c, prev, 3));
            plan.push((format!("enc{l}.conv1"), c, c, 3));
            prev = c;
        }
        let c = self.channels(self.levels);
        plan.push(("bottleneck.conv0".into(), c, prev, 3));
        plan.push(("bottleneck.conv1".into(), c, c, 3));
        prev = c;
        for l in (0..self.levels).rev() {
            let c = self.channels(l);
            plan.push((format!("dec{l}.conv0"), c, prev + c, 3));
            plan.push((format!("dec{l}.conv1"), c, c, 3));
            prev = c;
        }
        plan.push(("head".into(), self.components, prev, 3));
        plan.push(("fusion".into(), 1, self.components, 1));
        plan
    }
}

/// All weights of the network: a kernel and a bias per layer, in the fixed
/// order of [`NetworkConfig`]'s layer plan.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Element> NetworkParams<T> {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> NetworkParams<U> {
        NetworkParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Checks tensor count and shapes against `cfg`.
    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        cfg.validate()?;
        let plan = cfg.layer_plan();
        if self.tensors.len() != 2 * plan.len() || self.names.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, found {}",
                2 * plan.len(),
                self.tensors.len()
            )));
        }
        for (i, (name, co, ci, k)) in plan.iter().enumerate() {
            if self.tensors[2 * i].shape() != [*co, *ci, *k, *k] || self.tensors[2 * i + 1].shape() != [*co] {
                return Err(Error::shape(format!("parameter shapes of layer {name} do not match the config")));
            }
        }
        if cfg.fusion == FusionMode::FixedSum {
            let (w, b) = self.fusion();
            if w.data().iter().any(|&x| x != T::one()) || b.data()[0] != T::zero() {
                return Err(Error::Config("fixed-sum fusion requires weights 1 and bias 0".into()));
            }
        }
        Ok(())
    }

    pub fn fusion(&self) -> (&Tensor<T>, &Tensor<T>) {
        let n = self.tensors.len();
        (&self.tensors[n - 2], &self.tensors[n - 1])
    }

    /// Whether tensor `i` is trained under `cfg`.
    pub fn is_trainable(&self, cfg: &NetworkConfig, i: usize) -> bool {
        cfg.fusion == FusionMode::Learnable || i + 2 < self.tensors.len()
    }
}

/// He-initialized parameters drawn from `seed`; biases start at zero and the
/// fusion layer at weights 1, bias 0.
pub fn build_network<T: Element>(cfg: &NetworkConfig, seed: u64) -> Result<NetworkParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = cfg.layer_plan();
    let mut names = Vec::with_capacity(2 * plan.len());
    let mut tensors = Vec::with_capacity(2 * plan.len());
    for (name, co, ci, k) in plan {
        let shape = [co, ci, k, k];
        let w = if name == "fusion" {
            Tensor::full(&shape, T::one())
        } else {
            let std = (2.0 / (ci * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::param(e.to_string()))?;
            Tensor::from_fn(&shape, |_| T::from_f64(normal.sample(&mut rng)))
        };
        names.push(format!("{name}.weight"));
        tensors.push(w);
        names.push(format!("{name}.bias"));
        tensors.push(Tensor::zeros(&[co]));
    }
    Ok(NetworkParams { names, tensors })
}

/// Adds the parameters to `g`: trainable tensors as parameters, frozen ones
/// as constants.
pub fn register_params<T: Element>(g: &mut Graph<T>, params: &NetworkParams<T>, cfg: &NetworkConfig) -> Vec<Var> {
    params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if params.is_trainable(cfg, i) {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            }
        })
        .collect()
}

/// Builds the forward pass of `x` (B,1,H,W) into `g`. Returns the
/// `(decomposition, reconstruction)` nodes of shapes (B,d,H,W) and (B,1,H,W).
pub fn forward_graph<T: Element>(
    g: &mut Graph<T>,
    vars: &[Var],
    cfg: &NetworkConfig,
    x: Var,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Var, Var)> {
    let [_, c, h, w] = g.value(x).dims4()?;
    if c != 1 || [h, w] != cfg.input_size {
        return Err(Error::shape(format!(
            "network expects (B,1,{},{}), got {:?}",
            cfg.input_size[0],
            cfg.input_size[1],
            g.value(x).shape()
        )));
    }
    let mut layer = 0;
    let mut conv = |g: &mut Graph<T>, input: Var, relu: bool| -> Result<Var> {
        let (wv, bv) = (vars[2 * layer], vars[2 * layer + 1]);
        layer += 1;
        let y = g.conv2d(input, wv, bv, 1, Padding::Same)?;
        Ok(if relu { g.relu(y) } else { y })
    };

    let mut skips = Vec::with_capacity(cfg.levels);
    let mut h = x;
    for _ in 0..cfg.levels {
        h = conv(g, h, true)?;
        h = conv(g, h, true)?;
        skips.push(h);
        h = g.maxpool2(h)?;
    }
    h = conv(g, h, true)?;
    h = conv(g, h, true)?;
    h = g.dropout(h, cfg.dropout_p, mode, rng)?;
    for skip in skips.into_iter().rev() {
        let up = g.upsample2(h)?;
        h = g.concat_channels(up, skip)?;
        h = conv(g, h, true)?;
        h = conv(g, h, true)?;
    }
    let decomposition = conv(g, h, false)?;
    let reconstruction = match cfg.fusion {
        FusionMode::FixedSum => g.channel_sum(decomposition)?,
        FusionMode::Learnable => {
            let n = vars.len();
            g.conv2d(decomposition, vars[n - 2], vars[n - 1], 1, Padding::Valid)?
        }
    };
    Ok((decomposition, reconstruction))
}

/// Runs the network on a batch and returns `(decomposition, reconstruction)`.
pub fn forward<T: Element>(
    params: &NetworkParams<T>,
    cfg: &NetworkConfig,
    x: &Tensor<T>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let vars = register_params(&mut g, params, cfg);
    let xv = g.input(x.clone());
    let (d, r) = forward_graph(&mut g, &vars, cfg, xv, mode, rng)?;
    Ok((g.value(d).clone(), g.value(r).clone()))
}

/// Eval-mode decomposition of a batch of images, clamped at zero.
pub fn predict_batch(
    params: &NetworkParams<f32>,
    cfg: &NetworkConfig,
    images: &[&ProjectionImage],
) -> Result<Vec<Vec<ProjectionImage>>> {
    let [h, w] = cfg.input_size;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::shape(format!(
                "image is {}x{}, network expects {h}x{w}",
                img.height, img.width
            )));
        }
    }
    let data = images.iter().flat_map(|i| i.data.iter().copied()).collect();
    let x = Tensor::new(&[images.len(), 1, h, w], data)?;
    // Eval mode never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (dec, _) = forward(params, cfg, &x, Mode::Eval, &mut rng)?;
    Ok(images
        .iter()
        .enumerate()
        .map(|(n, img)| {
            (0..cfg.components)
                .map(|c| ProjectionImage {
                    width: w,
                    height: h,
                    data: dec.plane(n, c).iter().map(|&v| v.max(0.0)).collect(),
                    pose: img.pose.clone(),
                    label: Label::Component(c),
                })
                .collect()
        })
        .collect())
}

/// Splits one projection into `d` non-negative component projections.
pub fn predict_decomposition(
    params: &NetworkParams<f32>,
    cfg: &NetworkConfig,
    image: &ProjectionImage,
) -> Result<Vec<ProjectionImage>> {
    Ok(predict_batch(params, cfg, &[image])?.remove(0))
}

/// A network configuration together with its single-precision weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: NetworkParams<f32>,
}

impl Model {
    pub fn new(config: NetworkConfig, params: NetworkParams<f32>) -> Result<Self> {
        params.validate(&config)?;
        Ok(Model { config, params })
    }
}

impl Decompose for Model {
    fn decompose_batch(&self, inputs: &[&ProjectionImage]) -> Result<Vec<Vec<ProjectionImage>>> {
        predict_batch(&self.params, &self.config, inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(fusion: FusionMode) -> NetworkConfig {
        NetworkConfig {
            input_size: [16, 16],
            levels: 2,
            base_channels: 4,
            components: 3,
            dropout_p: 0.5,
            fusion,
        }
    }

    fn input(seed: u64, shape: &[usize]) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random::<f32>() * 3.0)
    }

    #[test]
    fn output_shapes() {
        let cfg = NetworkConfig::desk(3);
        let params = build_network::<f32>(&cfg, 1).unwrap();
        params.validate(&cfg).unwrap();
        let x = input(0, &[1, 1, 64, 64]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (d, r) = forward(&params, &cfg, &x, Mode::Train, &mut rng).unwrap();
        assert_eq!(d.shape(), &[1, 3, 64, 64]);
        assert_eq!(r.shape(), &[1, 1, 64, 64]);
        assert!(d.all_finite());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(FusionMode::FixedSum);
        cfg.input_size = [18, 16];
        assert!(matches!(build_network::<f32>(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = small(FusionMode::FixedSum);
        cfg.components = 1;
        assert!(build_network::<f32>(&cfg, 0).is_err());
        let mut cfg = small(FusionMode::FixedSum);
        cfg.dropout_p = 1.0;
        assert!(build_network::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn seeded_build_is_reproducible() {
        let cfg = small(FusionMode::Learnable);
        let a = build_network::<f32>(&cfg, 9).unwrap();
        let b = build_network::<f32>(&cfg, 9).unwrap();
        let c = build_network::<f32>(&cfg, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn no_dropout_train_equals_eval() {
        let mut cfg = small(FusionMode::Learnable);
        cfg.dropout_p = 0.0;
        let params = build_network::<f32>(&cfg, 3).unwrap();
        let x = input(1, &[2, 1, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let train = forward(&params, &cfg, &x, Mode::Train, &mut rng).unwrap();
        let eval = forward(&params, &cfg, &x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(train, eval);
    }

    #[test]
    fn fixed_sum_reconstruction_is_exact_channel_sum() {
        let cfg = small(FusionMode::FixedSum);
        let params = build_network::<f32>(&cfg, 4).unwrap();
        let x = input(2, &[2, 1, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (d, r) = forward(&params, &cfg, &x, Mode::Eval, &mut rng).unwrap();
        for n in 0..2 {
            for p in 0..256 {
                let s = d.plane(n, 0)[p] + d.plane(n, 1)[p] + d.plane(n, 2)[p];
                assert_eq!(r.plane(n, 0)[p], s);
            }
        }
    }

    #[test]
    fn learnable_fusion_starts_as_sum() {
        let cfg = small(FusionMode::Learnable);
        let params = build_network::<f32>(&cfg, 4).unwrap();
        let x = input(2, &[1, 1, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (d, r) = forward(&params, &cfg, &x, Mode::Eval, &mut rng).unwrap();
        for p in 0..256 {
            let s = d.plane(0, 0)[p] + d.plane(0, 1)[p] + d.plane(0, 2)[p];
            assert!((r.plane(0, 0)[p] - s).abs() <= 1e-6 * s.abs().max(1.0));
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let cfg = small(FusionMode::Learnable);
        let params = build_network::<f32>(&cfg, 5).unwrap();
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (d, r) = forward(&params, &cfg, &x, Mode::Train, &mut rng).unwrap();
        assert!(d.data().iter().chain(r.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn prediction_count_and_clamp() {
        let cfg = small(FusionMode::Learnable);
        let params = build_network::<f32>(&cfg, 6).unwrap();
        let img = ProjectionImage::new(16, 16, input(3, &[256]).into_data(), Label::Total).unwrap();
        let out = predict_decomposition(&params, &cfg, &img).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| o.data.iter().all(|&v| v >= 0.0)));
        let wrong = ProjectionImage::zeros(8, 8, Label::Total);
        assert!(matches!(predict_decomposition(&params, &cfg, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn wrong_input_shape() {
        let cfg = small(FusionMode::Learnable);
        let params = build_network::<f32>(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::zeros(&[1, 2, 16, 16]);
        assert!(forward(&params, &cfg, &x, Mode::Eval, &mut rng).is_err());
    }
}
