//! Frozen random weights selected by learned Top-k supermasks.
//!
//! A [`SupermaskTensor`] pairs a frozen weight matrix `W` with a score
//! matrix `S` of the same shape. The forward pass uses `W ⊙ M` where `M`
//! keeps the `k_count` largest scores. `M` is piecewise constant in `S`,
//! so the backward pass routes gradients to `S` with a straight-through
//! node: `∂L/∂S = ∂L/∂(W⊙M) ⊙ W`. `W` never receives a gradient.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitFamily {
    #[serde(alias = "kaiming")]
    KaimingUniform,
    #[serde(alias = "xavier")]
    XavierUniform,
}

/// Weight initializer: a uniform family plus optional `√(1/σ)` std scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitScheme {
    pub family: InitFamily,
    pub sigma_scaling: bool,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme {
            family: InitFamily::KaimingUniform,
            sigma_scaling: true,
        }
    }
}

/// Fan sizes used by the initializers.
///
/// Weights are applied as `y = x · W`, so a `[rows×cols]` matrix has
/// `fan_in = rows` and `fan_out = cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fans {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Fans {
    pub fn of(shape: &[usize]) -> Result<Fans> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape {
                shape: shape.to_vec(),
                reason: "initializer needs positive dimensions".into(),
            });
        }
        Ok(match shape {
            [n] => Fans {
                fan_in: *n,
                fan_out: *n,
            },
            [rows, rest @ ..] => Fans {
                fan_in: *rows,
                fan_out: rest.iter().product(),
            },
            [] => unreachable!(),
        })
    }
}

fn check_sigma(sigma: f32) -> Result<()> {
    if sigma > 0.0 && sigma <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("sigma must be in (0, 1], got {sigma}")))
    }
}

impl InitScheme {
    /// Analytic standard deviation of the scheme for the given fans.
    pub fn std(&self, fans: Fans, sigma: f32) -> f64 {
        let base = match self.family {
            InitFamily::KaimingUniform => (2.0 / fans.fan_in as f64).sqrt(),
            InitFamily::XavierUniform => (2.0 / (fans.fan_in + fans.fan_out) as f64).sqrt(),
        };
        if self.sigma_scaling {
            base * (1.0 / f64::from(sigma)).sqrt()
        } else {
            base
        }
    }

    /// Half-width of the uniform interval with standard deviation `std`.
    pub fn bound(&self, fans: Fans, sigma: f32) -> f64 {
        self.std(fans, sigma) * 3f64.sqrt()
    }
}

fn uniform_tensor(shape: &[usize], bound: f64, seed: u64) -> Result<Tensor> {
    let numel = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = bound as f32;
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..numel).map(|_| dist.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Frozen weights drawn from `scheme`; fans derived from `shape`.
pub fn init_weight(shape: &[usize], scheme: InitScheme, sigma: f32, seed: u64) -> Result<Tensor> {
    init_weight_with_fans(shape, Fans::of(shape)?, scheme, sigma, seed)
}

pub fn init_weight_with_fans(
    shape: &[usize],
    fans: Fans,
    scheme: InitScheme,
    sigma: f32,
    seed: u64,
) -> Result<Tensor> {
    Fans::of(shape)?;
    check_sigma(sigma)?;
    uniform_tensor(shape, scheme.bound(fans, sigma), seed)
}

/// Kaiming-uniform scores with `requires_grad` set.
pub fn init_scores(shape: &[usize], seed: u64) -> Result<Tensor> {
    let fans = Fans::of(shape)?;
    init_scores_with_fans(shape, fans, seed)
}

pub fn init_scores_with_fans(shape: &[usize], fans: Fans, seed: u64) -> Result<Tensor> {
    Fans::of(shape)?;
    let scheme = InitScheme {
        family: InitFamily::KaimingUniform,
        sigma_scaling: false,
    };
    Ok(uniform_tensor(shape, scheme.bound(fans, 1.0), seed)?.with_requires_grad(true))
}

/// `round(σ · numel)`.
pub fn k_count(sigma: f32, numel: usize) -> usize {
    (f64::from(sigma) * numel as f64).round() as usize
}

/// Flat indices of the `k` largest scores; ties go to the lower index.
pub fn topk_indices(scores: &[f32], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    let rank = |a: &usize, b: &usize| -> Ordering {
        scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, rank);
    }
    idx.truncate(k);
    idx
}

/// Binary mask with ones at the `k_count` largest entries of `scores`.
pub fn topk_mask(scores: &Tensor, k_count: usize) -> Tensor {
    let mut mask = Tensor::zeros(scores.shape().to_vec());
    let data = mask.data_mut();
    for i in topk_indices(scores.data(), k_count) {
        data[i] = 1.0;
    }
    mask
}

/// Where a supermask comes from.
#[derive(Clone, Debug)]
pub enum MaskSource {
    /// Recomputed from learnable scores on every forward pass.
    Scores(Tensor),
    /// Fixed binary mask, e.g. loaded from an inference checkpoint.
    Frozen(Tensor),
}

/// Frozen weight, learnable scores and the retention ratio that turns the
/// scores into a mask.
///
/// The weight sits behind an [`Arc`] so several applications of a
/// weight-tied layer can share one allocation.
#[derive(Clone, Debug)]
pub struct SupermaskTensor {
    weight: Arc<Tensor>,
    mask: MaskSource,
    sigma: f32,
    k_count: usize,
}

/// Tape handles produced by [`masked_weight`].
#[derive(Clone, Copy, Debug)]
pub struct MaskedVars {
    pub effective: Var,
    pub weight: Var,
    pub scores: Option<Var>,
}

impl SupermaskTensor {
    pub fn new(weight: Arc<Tensor>, scores: Tensor, sigma: f32) -> Result<Self> {
        check_sigma(sigma)?;
        if weight.shape() != scores.shape() {
            return Err(Error::dim("supermask", weight.shape(), scores.shape()));
        }
        let k_count = k_count(sigma, weight.numel());
        Ok(SupermaskTensor {
            weight,
            mask: MaskSource::Scores(scores.with_requires_grad(true)),
            sigma,
            k_count,
        })
    }

    /// A supermask whose binary mask is fixed. `mask` must be 0/1.
    pub fn frozen(weight: Arc<Tensor>, mask: Tensor, sigma: f32) -> Result<Self> {
        check_sigma(sigma)?;
        if weight.shape() != mask.shape() {
            return Err(Error::dim("supermask", weight.shape(), mask.shape()));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Corrupt("mask entries must be 0 or 1".into()));
        }
        let k_count = mask.data().iter().filter(|&&v| v == 1.0).count();
        Ok(SupermaskTensor {
            weight,
            mask: MaskSource::Frozen(mask),
            sigma,
            k_count,
        })
    }

    pub fn weight(&self) -> &Arc<Tensor> {
        &self.weight
    }

    pub fn shape(&self) -> &[usize] {
        self.weight.shape()
    }

    pub fn numel(&self) -> usize {
        self.weight.numel()
    }

    pub fn sigma(&self) -> f32 {
        self.sigma
    }

    pub fn k_count(&self) -> usize {
        self.k_count
    }

    pub fn scores(&self) -> Option<&Tensor> {
        match &self.mask {
            MaskSource::Scores(s) => Some(s),
            MaskSource::Frozen(_) => None,
        }
    }

    pub fn scores_mut(&mut self) -> Option<&mut Tensor> {
        match &mut self.mask {
            MaskSource::Scores(s) => Some(s),
            MaskSource::Frozen(_) => None,
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.mask, MaskSource::Frozen(_))
    }

    /// Current binary mask.
    pub fn mask(&self) -> Tensor {
        match &self.mask {
            MaskSource::Scores(s) => topk_mask(s, self.k_count),
            MaskSource::Frozen(m) => m.clone(),
        }
    }

    /// Replaces the scores with the mask they currently select.
    pub fn freeze(&mut self) {
        if let MaskSource::Scores(s) = &self.mask {
            self.mask = MaskSource::Frozen(topk_mask(s, self.k_count));
        }
    }

    /// `W ⊙ M` as a plain tensor.
    pub fn effective_weight(&self) -> Tensor {
        let mask = self.mask();
        let data = self
            .weight
            .data()
            .iter()
            .zip(mask.data())
            .map(|(w, m)| w * m)
            .collect();
        Tensor::new(self.shape().to_vec(), data).expect("shapes checked at construction")
    }
}

/// Records `W ⊙ straight_through(M, S)` on the tape.
///
/// With scores present the result is differentiable in `S` only; with a
/// frozen mask the product is recorded as a constant.
pub fn masked_weight(tape: &mut Tape, t: &SupermaskTensor) -> Result<MaskedVars> {
    let weight = tape.constant(Tensor::clone(&t.weight));
    match &t.mask {
        MaskSource::Scores(s) => {
            let scores = tape.leaf(s.clone().with_requires_grad(true));
            let hard = tape.constant(topk_mask(s, t.k_count));
            let st = tape.straight_through(hard, scores)?;
            let effective = tape.mul(weight, st)?;
            Ok(MaskedVars {
                effective,
                weight,
                scores: Some(scores),
            })
        }
        MaskSource::Frozen(_) => {
            let effective = tape.constant(t.effective_weight());
            Ok(MaskedVars {
                effective,
                weight,
                scores: None,
            })
        }
    }
}

/// `log2 C(n, round(σ n))`: the number of distinct masks at retention `σ`.
pub fn search_space_size(n: usize, sigma: f64) -> f64 {
    assert!(n >= 1, "search space needs at least one weight");
    let k = (sigma * n as f64).round().clamp(0.0, n as f64) as usize;
    let k = k.min(n - k);
    if n <= 1 << 16 {
        // Exact up to rounding of each factor.
        (1..=k)
            .map(|i| ((n - k + i) as f64 / i as f64).log2())
            .sum()
    } else {
        use statrs::function::gamma::ln_gamma;
        let (n, k) = (n as f64, k as f64);
        (ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)) / std::f64::consts::LN_2
    }
}
