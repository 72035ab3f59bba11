//! Training objective: elastic-net decomposition loss, reconstruction loss
//! and their weighted sum.
//!
//! The default [`NormMode::Mean`] uses mean squared and mean absolute
//! errors; [`NormMode::Literal`] uses the plain Euclidean and ℓ1 norms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the reconstruction term.
    pub lambda_r: f64,
    /// Share of the squared term in the elastic net; `1 - lambda_d` goes to ℓ1.
    pub lambda_d: f64,
}

impl LossWeights {
    pub fn new(lambda_r: f64, lambda_d: f64) -> Result<Self> {
        let w = LossWeights { lambda_r, lambda_d };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_r >= 0.0) || !self.lambda_r.is_finite() {
            return Err(Error::param(format!("lambda_r must be >= 0, got {}", self.lambda_r)));
        }
        if !(0.0..=1.0).contains(&self.lambda_d) {
            return Err(Error::param(format!("lambda_d must lie in [0, 1], got {}", self.lambda_d)));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_r: 0.5,
            lambda_d: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Mean,
    Literal,
}

/// Loss value with its two parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub decomposition: f64,
    pub reconstruction: f64,
    pub total: f64,
}

fn check_same<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("loss operands {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::shape("loss operands are empty"));
    }
    Ok(())
}

fn sums<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> (f64, f64) {
    a.data().iter().zip(b.data()).fold((0.0, 0.0), |(sq, ab), (&x, &y)| {
        let d = x.as_f64() - y.as_f64();
        (sq + d * d, ab + d.abs())
    })
}

/// Elastic-net loss between predicted and true components.
pub fn decomposition_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, lambda_d: f64, mode: NormMode) -> Result<f64> {
    check_same(pred, target)?;
    if !(0.0..=1.0).contains(&lambda_d) {
        return Err(Error::param(format!("lambda_d must lie in [0, 1], got {lambda_d}")));
    }
    let (sq, ab) = sums(pred, target);
    Ok(match mode {
        NormMode::Mean => {
            let n = pred.numel() as f64;
            lambda_d * (sq / n) + (1.0 - lambda_d) * (ab / n)
        }
        NormMode::Literal => lambda_d * sq.sqrt() + (1.0 - lambda_d) * ab,
    })
}

/// Squared-error penalty between the fused prediction and the input.
pub fn reconstruction_loss<T: Element>(fused: &Tensor<T>, input: &Tensor<T>, mode: NormMode) -> Result<f64> {
    check_same(fused, input)?;
    let (sq, _) = sums(fused, input);
    Ok(match mode {
        NormMode::Mean => sq / fused.numel() as f64,
        NormMode::Literal => sq.sqrt(),
    })
}

/// `decomposition_loss + lambda_r * reconstruction_loss`.
pub fn total_loss<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    fused: &Tensor<T>,
    input: &Tensor<T>,
    weights: LossWeights,
    mode: NormMode,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let decomposition = decomposition_loss(pred, target, weights.lambda_d, mode)?;
    let reconstruction = reconstruction_loss(fused, input, mode)?;
    Ok(LossBreakdown {
        decomposition,
        reconstruction,
        total: decomposition + weights.lambda_r * reconstruction,
    })
}

/// Differentiable decomposition loss node.
pub fn decomposition_loss_node<T: Element>(g: &mut Graph<T>, pred: Var, target: Var, lambda_d: f64, mode: NormMode) -> Result<Var> {
    match mode {
        NormMode::Mean => {
            let n = g.value(pred).numel() as f64;
            let sq = g.sq_diff_sum(pred, target, lambda_d / n)?;
            let ab = g.abs_diff_sum(pred, target, (1.0 - lambda_d) / n)?;
            g.add(sq, ab)
        }
        NormMode::Literal => {
            let l2 = g.diff_norm(pred, target)?;
            let l2 = g.scale(l2, lambda_d);
            let l1 = g.abs_diff_sum(pred, target, 1.0 - lambda_d)?;
            g.add(l2, l1)
        }
    }
}

pub fn reconstruction_loss_node<T: Element>(g: &mut Graph<T>, fused: Var, input: Var, mode: NormMode) -> Result<Var> {
    match mode {
        NormMode::Mean => {
            let n = g.value(fused).numel() as f64;
            g.sq_diff_sum(fused, input, 1.0 / n)
        }
        NormMode::Literal => g.diff_norm(fused, input),
    }
}

/// Graph nodes of the objective: `(decomposition, reconstruction, total)`.
pub fn total_loss_node<T: Element>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    fused: Var,
    input: Var,
    weights: LossWeights,
    mode: NormMode,
) -> Result<(Var, Var, Var)> {
    weights.validate()?;
    let dec = decomposition_loss_node(g, pred, target, weights.lambda_d, mode)?;
    let rec = reconstruction_loss_node(g, fused, input, mode)?;
    let weighted = g.scale(rec, weights.lambda_r);
    let total = g.add(dec, weighted)?;
    Ok((dec, rec, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::{grad_check, GradCheckOptions};

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::new(&[data.len()], data.to_vec()).unwrap()
    }

    fn mse(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
    }

    fn mae(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let a = t(&[1.0, -2.0, 3.5]);
        for ld in [0.0, 0.1, 0.9, 1.0] {
            assert_eq!(decomposition_loss(&a, &a, ld, NormMode::Mean).unwrap(), 0.0);
        }
        let b = total_loss(&a, &a, &a, &a, LossWeights::default(), NormMode::Mean).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn elastic_net_worked_example() {
        let pred = t(&[3.0, 4.0, 0.0, 0.0]);
        let target = t(&[0.0; 4]);
        let l = decomposition_loss(&pred, &target, 0.1, NormMode::Mean).unwrap();
        assert!((l - 2.2).abs() < 1e-12, "{l}");
    }

    #[test]
    fn endpoints_reduce_to_mse_and_mae() {
        let a = [0.3, -1.7, 2.25, 0.0, 5.5];
        let b = [1.0, -1.0, 2.0, 0.5, -0.5];
        let l1 = decomposition_loss(&t(&a), &t(&b), 1.0, NormMode::Mean).unwrap();
        let l0 = decomposition_loss(&t(&a), &t(&b), 0.0, NormMode::Mean).unwrap();
        assert!((l1 - mse(&a, &b)).abs() <= 1e-9);
        assert!((l0 - mae(&a, &b)).abs() <= 1e-9);
    }

    #[test]
    fn reconstruction_examples() {
        let fused = t(&[1.1, 2.1, 3.1]);
        let input = t(&[1.0, 2.0, 3.0]);
        let l = reconstruction_loss(&fused, &input, NormMode::Mean).unwrap();
        assert!((l - 0.01).abs() < 1e-12);
        let doubled = t(&[1.2, 2.2, 3.2]);
        let l2 = reconstruction_loss(&doubled, &input, NormMode::Mean).unwrap();
        assert!((l2 / l - 4.0).abs() < 1e-9);
        assert_eq!(reconstruction_loss(&input, &input, NormMode::Mean).unwrap(), 0.0);
    }

    #[test]
    fn total_combines_terms() {
        let pred = t(&[3.0, 4.0, 0.0, 0.0]);
        let target = t(&[0.0; 4]);
        let fused = t(&[1.1, 2.1, 3.1]);
        let input = t(&[1.0, 2.0, 3.0]);
        let w = LossWeights::new(0.5, 0.1).unwrap();
        let b = total_loss(&pred, &target, &fused, &input, w, NormMode::Mean).unwrap();
        assert!((b.total - 2.205).abs() < 1e-12, "{}", b.total);

        let base = total_loss(&pred, &target, &fused, &input, LossWeights::new(0.0, 0.1).unwrap(), NormMode::Mean).unwrap();
        assert_eq!(base.total, decomposition_loss(&pred, &target, 0.1, NormMode::Mean).unwrap());
    }

    #[test]
    fn literal_norms() {
        let pred = t(&[3.0, 4.0, 0.0, 0.0]);
        let target = t(&[0.0; 4]);
        let l = decomposition_loss(&pred, &target, 0.5, NormMode::Literal).unwrap();
        assert!((l - (0.5 * 5.0 + 0.5 * 7.0)).abs() < 1e-12);
        assert!((reconstruction_loss(&pred, &target, NormMode::Literal).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(decomposition_loss(&t(&[1.0]), &t(&[1.0, 2.0]), 0.5, NormMode::Mean).is_err());
        assert!(decomposition_loss(&t(&[1.0]), &t(&[1.0]), 1.5, NormMode::Mean).is_err());
        assert!(LossWeights::new(-1.0, 0.5).is_err());
        assert!(reconstruction_loss(&t(&[1.0]), &t(&[1.0, 2.0]), NormMode::Mean).is_err());
    }

    #[test]
    fn graph_matches_standalone_and_gradients_check() {
        let pred = t(&[0.31, -1.2, 2.5, 0.05, 1.7, -0.4]);
        let target = t(&[1.0, -1.0, 2.0, 0.5, -0.5, 0.6]);
        let fused = t(&[1.13, 2.21, 2.94]);
        let input = t(&[1.0, 2.0, 3.0]);
        for mode in [NormMode::Mean, NormMode::Literal] {
            let w = LossWeights::new(0.5, 0.1).unwrap();
            let want = total_loss(&pred, &target, &fused, &input, w, mode).unwrap();
            let mut g = Graph::new();
            let (p, tg, f, i) = (g.param(pred.clone()), g.input(target.clone()), g.param(fused.clone()), g.input(input.clone()));
            let (d, r, tot) = total_loss_node(&mut g, p, tg, f, i, w, mode).unwrap();
            assert!((g.value(d).item().unwrap() - want.decomposition).abs() < 1e-12);
            assert!((g.value(r).item().unwrap() - want.reconstruction).abs() < 1e-12);
            assert!((g.value(tot).item().unwrap() - want.total).abs() < 1e-12);

            // All |diff| > 1e-3, away from the ℓ1 kinks.
            let report = grad_check(
                &[pred.clone(), fused.clone()],
                |g, ps| {
                    let tg = g.input(target.clone());
                    let i = g.input(input.clone());
                    Ok(total_loss_node(g, ps[0], tg, ps[1], i, w, mode)?.2)
                },
                &GradCheckOptions::for_precision::<f64>(1e-6),
            )
            .unwrap();
            assert!(report.passed, "{mode:?}: {report:?}");
        }
    }
}
