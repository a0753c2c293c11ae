//! Per-pixel losses for heatmap regression under missing labels.
//!
//! Every loss takes a target heatmap `H` (values in `[0, 1]`) and a raw logit
//! heatmap `x`, and returns the reduced value plus `dL/dx` per pixel. Hill-style
//! terms read the logits through `p+ = sigmoid(x - m)` (positive branch) and
//! `p- = sigmoid(x)` (negative branch); squared-error terms compare `H` with the
//! raw logits. All Hill-family losses are written as minimization objectives:
//!
//! ```text
//! L = sum_p [ -H ln(p+) + R ] (1 - p+)^gamma + (1 - H) (lambda - p-) (p-)^2
//! ```
//!
//! where `R = (H - x)^2` is the reinforcement term of Crag-and-Tail and absent
//! for Hill. With `lambda = 1.5` the negative branch has `dL/dp- = 3 p- (1 - p-)`,
//! which vanishes for confident predictions on unlabeled pixels.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, HeatmapRole};
use crate::scalar::{sigmoid, softplus, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "MSE")]
    Mse,
    Hill,
    CragAndTail,
    #[serde(rename = "MaskedMSE")]
    MaskedMse,
    SoftUncertainRegion,
    #[serde(rename = "HillPlusMSE")]
    HillPlusMse,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [
        LossVariant::Mse,
        LossVariant::Hill,
        LossVariant::CragAndTail,
        LossVariant::MaskedMse,
        LossVariant::SoftUncertainRegion,
        LossVariant::HillPlusMse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Mse => "MSE",
            LossVariant::Hill => "Hill",
            LossVariant::CragAndTail => "CragAndTail",
            LossVariant::MaskedMse => "MaskedMSE",
            LossVariant::SoftUncertainRegion => "SoftUncertainRegion",
            LossVariant::HillPlusMse => "HillPlusMSE",
        }
    }

    /// Whether the loss reads logits only through squared error, so that the
    /// raw output is already on the target's scale.
    pub fn is_mse_family(self) -> bool {
        matches!(self, LossVariant::Mse | LossVariant::MaskedMse)
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = LossVariant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown loss '{s}', expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Which pixels receive the `(H - x)^2` reinforcement term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinforceScope {
    AllPixels,
    PositiveOnly,
}

/// The factor multiplying the positive bracket.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalWeightMode {
    /// `(1 - p+)^gamma`.
    Standard,
    /// The whole positive product is zero; only the negative branch remains.
    OffZero,
    /// `(1 - p+)^v`, independent of `gamma`.
    ExponentOverride(f64),
}

/// Weighting of the negative branch `(1 - H) w (p-)^2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegWeightMode {
    /// `w = lambda - p-`.
    Standard,
    /// `w = 1`.
    ConstantOne,
    /// Negative branch removed.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub lambda: f64,
    pub gamma: f64,
    pub m: f64,
    pub a: f64,
    pub reduction: Reduction,
    pub pos_log_term_on: bool,
    pub reinforce_term_on: bool,
    pub reinforce_scope: ReinforceScope,
    pub focal_weight_mode: FocalWeightMode,
    pub neg_weight_mode: NegWeightMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::CragAndTail,
            lambda: 1.5,
            gamma: 2.0,
            m: 1.0,
            a: 0.5,
            reduction: Reduction::Mean,
            pos_log_term_on: true,
            reinforce_term_on: true,
            reinforce_scope: ReinforceScope::AllPixels,
            focal_weight_mode: FocalWeightMode::Standard,
            neg_weight_mode: NegWeightMode::Standard,
        }
    }
}

impl LossConfig {
    pub fn for_variant(variant: LossVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        check("lambda", self.lambda)?;
        check("gamma", self.gamma)?;
        check("m", self.m)?;
        if !(0.0..=1.0).contains(&self.a) {
            return Err(Error::Config(format!("a must lie in [0, 1], got {}", self.a)));
        }
        if let FocalWeightMode::ExponentOverride(v) = self.focal_weight_mode {
            check("focal exponent override", v)?;
        }
        Ok(())
    }
}

/// Value and `dL/dx` of one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelLoss<T> {
    pub value: T,
    pub grad: T,
}

impl<T: Scalar> PixelLoss<T> {
    fn zero() -> Self {
        Self {
            value: T::zero(),
            grad: T::zero(),
        }
    }

    fn scaled(self, w: T) -> Self {
        Self {
            value: w * self.value,
            grad: w * self.grad,
        }
    }

    fn plus(self, other: Self) -> Self {
        Self {
            value: self.value + other.value,
            grad: self.grad + other.grad,
        }
    }
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn squared_error<T: Scalar>(h: T, x: T) -> PixelLoss<T> {
    let d = x - h;
    PixelLoss {
        value: d * d,
        grad: d + d,
    }
}

/// Hill-family pixel loss; `reinforce` adds the Crag-and-Tail term.
fn hill_family<T: Scalar>(cfg: &LossConfig, h: T, x: T, reinforce: bool) -> PixelLoss<T> {
    let mut out = PixelLoss::zero();

    let exponent = match cfg.focal_weight_mode {
        FocalWeightMode::Standard => Some(cfg.gamma),
        FocalWeightMode::OffZero => None,
        FocalWeightMode::ExponentOverride(v) => Some(v),
    };
    if let Some(g) = exponent {
        let g = c::<T>(g);
        let z = x - c(cfg.m);
        let p_pos = sigmoid(z);
        let one_minus = sigmoid(-z);
        let focal = one_minus.powf(g);
        let d_focal = -g * p_pos * focal;

        let mut bracket = T::zero();
        let mut d_bracket = T::zero();
        if cfg.pos_log_term_on {
            // ln(sigmoid(z)) = -softplus(-z)
            bracket += h * softplus(-z);
            d_bracket -= h * one_minus;
        }
        let reinforce_here = reinforce
            && match cfg.reinforce_scope {
                ReinforceScope::AllPixels => true,
                ReinforceScope::PositiveOnly => h > T::zero(),
            };
        if reinforce_here {
            let d = h - x;
            bracket += d * d;
            d_bracket -= d + d;
        }
        out.value += bracket * focal;
        out.grad += d_bracket * focal + bracket * d_focal;
    }

    let neg = T::one() - h;
    let q = sigmoid(x);
    let dq = q * sigmoid(-x);
    let lambda = c::<T>(cfg.lambda);
    let three = c::<T>(3.0);
    match cfg.neg_weight_mode {
        NegWeightMode::Standard => {
            out.value += neg * (lambda - q) * q * q;
            out.grad += neg * ((lambda + lambda) * q - three * q * q) * dq;
        }
        NegWeightMode::ConstantOne => {
            out.value += neg * q * q;
            out.grad += neg * (q + q) * dq;
        }
        NegWeightMode::Zero => {}
    }
    out
}

fn is_certain<T: Scalar>(h: T, n: usize) -> bool {
    n == 0 || h > T::zero()
}

/// Loss of one pixel with target `h`, logit `x`, and `n` sparse labels in its image.
pub fn pixel_loss<T: Scalar>(cfg: &LossConfig, h: T, x: T, n: usize) -> PixelLoss<T> {
    match cfg.variant {
        LossVariant::Mse => squared_error(h, x),
        LossVariant::Hill => hill_family(cfg, h, x, false),
        LossVariant::CragAndTail => hill_family(cfg, h, x, cfg.reinforce_term_on),
        LossVariant::MaskedMse => {
            let w = if is_certain(h, n) { T::one() } else { c(cfg.a) };
            squared_error(h, x).scaled(w)
        }
        LossVariant::SoftUncertainRegion => {
            let a = c::<T>(cfg.a);
            let mse = squared_error(h, x);
            let hill = hill_family(cfg, h, x, false);
            if is_certain(h, n) {
                mse.plus(hill.scaled(a))
            } else {
                mse.scaled(a).plus(hill)
            }
        }
        LossVariant::HillPlusMse => hill_family(cfg, h, x, false).plus(squared_error(h, x)),
    }
}

/// Reduced loss value and its gradient with respect to the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub total: T,
    pub grad: Heatmap<T>,
}

fn check_inputs<T: Scalar>(target: &Heatmap<T>, pred: &Heatmap<T>) -> Result<()> {
    target.ensure_same_shape(pred)?;
    if target.role() != HeatmapRole::Target {
        return Err(Error::Input(format!(
            "loss target must have the target role, got {:?}",
            target.role()
        )));
    }
    Ok(())
}

fn reduce<T: Scalar>(
    target: &Heatmap<T>,
    pred: &Heatmap<T>,
    cfg: &LossConfig,
    per_pixel: impl Fn(T, T) -> PixelLoss<T>,
) -> Result<LossOutput<T>> {
    check_inputs(target, pred)?;
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&h, &x) in target.values().iter().zip(pred.values()) {
        let px = per_pixel(h, x);
        total += px.value;
        grad.push(px.grad);
    }
    if cfg.reduction == Reduction::Mean && !grad.is_empty() {
        let count = T::from_usize(grad.len()).expect("pixel count fits the scalar type");
        total = total / count;
        grad.iter_mut().for_each(|g| *g = *g / count);
    }
    Ok(LossOutput {
        total,
        grad: Heatmap::from_vec(pred.height(), pred.width(), grad, HeatmapRole::Logit)?,
    })
}

pub fn mse_loss<T: Scalar>(target: &Heatmap<T>, pred: &Heatmap<T>, cfg: &LossConfig) -> Result<LossOutput<T>> {
    reduce(target, pred, cfg, squared_error)
}

pub fn hill_loss<T: Scalar>(target: &Heatmap<T>, pred: &Heatmap<T>, cfg: &LossConfig) -> Result<LossOutput<T>> {
    reduce(target, pred, cfg, |h, x| hill_family(cfg, h, x, false))
}

pub fn crag_and_tail_loss<T: Scalar>(
    target: &Heatmap<T>,
    pred: &Heatmap<T>,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    reduce(target, pred, cfg, |h, x| hill_family(cfg, h, x, cfg.reinforce_term_on))
}

pub fn masked_mse_loss<T: Scalar>(
    target: &Heatmap<T>,
    pred: &Heatmap<T>,
    n: usize,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    let cfg = LossConfig {
        variant: LossVariant::MaskedMse,
        ..*cfg
    };
    reduce(target, pred, &cfg, |h, x| pixel_loss(&cfg, h, x, n))
}

pub fn soft_uncertain_region_loss<T: Scalar>(
    target: &Heatmap<T>,
    pred: &Heatmap<T>,
    n: usize,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    let cfg = LossConfig {
        variant: LossVariant::SoftUncertainRegion,
        ..*cfg
    };
    reduce(target, pred, &cfg, |h, x| pixel_loss(&cfg, h, x, n))
}

pub fn hill_plus_mse_loss<T: Scalar>(
    target: &Heatmap<T>,
    pred: &Heatmap<T>,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    reduce(target, pred, cfg, |h, x| {
        hill_family(cfg, h, x, false).plus(squared_error(h, x))
    })
}

/// Dispatches on `cfg.variant`. `n` is the number of sparse labels in the image.
pub fn evaluate<T: Scalar>(
    target: &Heatmap<T>,
    pred: &Heatmap<T>,
    n: usize,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    match cfg.variant {
        LossVariant::Mse => mse_loss(target, pred, cfg),
        LossVariant::Hill => hill_loss(target, pred, cfg),
        LossVariant::CragAndTail => crag_and_tail_loss(target, pred, cfg),
        LossVariant::MaskedMse => masked_mse_loss(target, pred, n, cfg),
        LossVariant::SoftUncertainRegion => soft_uncertain_region_loss(target, pred, n, cfg),
        LossVariant::HillPlusMse => hill_plus_mse_loss(target, pred, cfg),
    }
}

/// Names of the component-ablation rows, in table order.
pub const ABLATION_ROWS: [&str; 14] = [
    "default",
    "m0",
    "m05",
    "gamma0",
    "gamma1",
    "lambda0",
    "lambda05",
    "lambda1",
    "drop_pos_log",
    "only_reinforce_pos",
    "only_neg_loss",
    "neg_weight_one",
    "no_neg_term",
    "only_pos_hill",
];

/// Crag-and-Tail configuration for one ablation row.
pub fn make_ablation_config(row_name: &str) -> Result<LossConfig> {
    let base = LossConfig::for_variant(LossVariant::CragAndTail);
    let cfg = match row_name {
        "default" => base,
        "m0" => LossConfig { m: 0.0, ..base },
        "m05" => LossConfig { m: 0.5, ..base },
        "gamma0" => LossConfig { gamma: 0.0, ..base },
        "gamma1" => LossConfig { gamma: 1.0, ..base },
        "lambda0" => LossConfig { lambda: 0.0, ..base },
        "lambda05" => LossConfig { lambda: 0.5, ..base },
        "lambda1" => LossConfig { lambda: 1.0, ..base },
        "drop_pos_log" => LossConfig {
            pos_log_term_on: false,
            ..base
        },
        "only_reinforce_pos" => LossConfig {
            pos_log_term_on: false,
            focal_weight_mode: FocalWeightMode::ExponentOverride(0.0),
            ..base
        },
        "only_neg_loss" => LossConfig {
            focal_weight_mode: FocalWeightMode::OffZero,
            ..base
        },
        "neg_weight_one" => LossConfig {
            neg_weight_mode: NegWeightMode::ConstantOne,
            ..base
        },
        "no_neg_term" => LossConfig {
            neg_weight_mode: NegWeightMode::Zero,
            ..base
        },
        "only_pos_hill" => LossConfig {
            neg_weight_mode: NegWeightMode::Zero,
            reinforce_term_on: false,
            ..base
        },
        other => {
            return Err(Error::Config(format!(
                "unknown ablation row '{other}', expected one of {}",
                ABLATION_ROWS.join(", ")
            )))
        }
    };
    Ok(cfg)
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference check of [`pixel_loss`] gradients.
///
/// Samples `trials` pixels with `H` in `[0, 1]` (a quarter of them exactly 0, so
/// the masked branches are exercised), logits in `[-10, 10]` and `n` in
/// `{0, 1, 3}`. Returns the largest relative error.
pub fn finite_difference_gradcheck(cfg: &LossConfig, trials: usize, seed: u64) -> f64 {
    gradcheck_with(cfg, trials, seed, |g| g)
}

/// As [`finite_difference_gradcheck`], passing each analytic gradient through
/// `perturb` first.
pub fn gradcheck_with(cfg: &LossConfig, trials: usize, seed: u64, perturb: impl Fn(f64) -> f64) -> f64 {
    const STEP: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let h = if rng.random_bool(0.25) {
            0.0
        } else {
            rng.random_range(0.0..=1.0)
        };
        let x = rng.random_range(-10.0..=10.0);
        let n = [0usize, 1, 3][rng.random_range(0..3)];
        let analytic = perturb(pixel_loss(cfg, h, x, n).grad);
        let numeric =
            (pixel_loss(cfg, h, x + STEP, n).value - pixel_loss(cfg, h, x - STEP, n).value) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic, numeric));
    }
    worst
}
