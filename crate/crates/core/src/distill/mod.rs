//! Distillation objectives: the composite feature + logit + Dice loss and the
//! NKD / CWD / DIST logit baselines.

pub mod losses;

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use losses::{cwd_loss, dice_loss, dice_score, dist_loss, nkd_loss, pairwise_distance_loss, softplus};

use crate::error::{Error, Result};
use crate::models::StageFeatures;
use crate::nn::layers::Conv2d;
use crate::nn::ParamStore;

/// Weights α₁..α₄ (stage features), β (logits) and γ (Dice).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub alpha: [f64; 4],
    pub beta: f64,
    pub gamma: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            alpha: [0.25; 4],
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.alpha.iter().chain([&self.beta, &self.gamma]);
        if all.into_iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Rfkd,
    Nkd,
    Cwd,
    Dist,
    Scratch,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Rfkd, Strategy::Nkd, Strategy::Cwd, Strategy::Dist, Strategy::Scratch];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Rfkd => "rfkd",
            Strategy::Nkd => "nkd",
            Strategy::Cwd => "cwd",
            Strategy::Dist => "dist",
            Strategy::Scratch => "scratch",
        }
    }

    pub fn default_temperature(self) -> f64 {
        match self {
            Strategy::Nkd => 4.0,
            _ => 1.0,
        }
    }

    /// Whether the objective reads the teacher at all.
    pub fn uses_teacher(self) -> bool {
        self != Strategy::Scratch
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (expected rfkd, nkd, cwd, dist or scratch)")))
    }
}

/// A strategy plus its softening temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyId {
    pub strategy: Strategy,
    pub temperature: f64,
}

impl StrategyId {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            temperature: strategy.default_temperature(),
        }
    }

    pub fn with_temperature(strategy: Strategy, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Config(format!("temperature {temperature} must be positive")));
        }
        Ok(Self { strategy, temperature })
    }
}

/// Learnable 1×1 projections from student to teacher stage widths.
#[derive(Debug)]
pub struct AdapterBank {
    params: ParamStore,
    convs: Vec<Conv2d>,
}

impl AdapterBank {
    pub fn new(student: [usize; 4], teacher: [usize; 4], seed: u64) -> Result<Self> {
        let mut params = ParamStore::new(seed, candle_core::DType::F32);
        let convs = (0..4)
            .map(|i| Conv2d::new(&mut params, &format!("adapter{i}"), student[i], teacher[i], 1, 1, 0, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params, convs })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn project(&self, stage: usize, x: &Tensor) -> Result<Tensor> {
        Ok(self.convs[stage].forward(x)?)
    }
}

/// Raw (unweighted) loss terms of one step plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: [f64; 4],
    pub l2: f64,
    pub l3: f64,
}

impl LossBreakdown {
    /// `Σ αᵢ l1ᵢ + β l2 + γ l3`.
    pub fn weighted_sum(&self, w: &DistillWeights) -> f64 {
        self.l1.iter().zip(&w.alpha).map(|(l, a)| l * a).sum::<f64>() + w.beta * self.l2 + w.gamma * self.l3
    }
}

/// A differentiable total together with its breakdown.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

fn value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// `Σᵢ αᵢ·pw(adapterᵢ(f_sᵢ), f_tᵢ) + β·pw(s, t) + γ·dice_loss(s, mask)`.
///
/// Teacher tensors are detached, so no gradient reaches the teacher.
pub fn rfkd_total_loss(
    student_taps: &StageFeatures,
    teacher_taps: &StageFeatures,
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    mask: &Tensor,
    adapters: &AdapterBank,
    w: &DistillWeights,
) -> Result<LossOutput> {
    w.validate()?;
    let (ss, ts) = (student_taps.stages(), teacher_taps.stages());
    if ss.len() != ts.len() {
        return Err(Error::Shape(format!("{} student stages vs {} teacher stages", ss.len(), ts.len())));
    }
    let mut total = None::<Tensor>;
    let mut add = |t: Tensor, weight: f64| -> Result<()> {
        let t = (t * weight)?;
        total = Some(match total.take() {
            None => t,
            Some(acc) => (acc + t)?,
        });
        Ok(())
    };
    let mut b = LossBreakdown::default();
    for i in 0..4 {
        let projected = adapters.project(i, &ss[i])?;
        if projected.dims() != ts[i].dims() {
            return Err(Error::Shape(format!(
                "stage {} after adapter is {:?}, teacher is {:?}",
                i + 1,
                projected.dims(),
                ts[i].dims()
            )));
        }
        let l = pairwise_distance_loss(&projected, &ts[i])?;
        b.l1[i] = value(&l)?;
        add(l, w.alpha[i])?;
    }
    let l2 = pairwise_distance_loss(student_logits, teacher_logits)?;
    b.l2 = value(&l2)?;
    add(l2, w.beta)?;
    let l3 = dice_loss(student_logits, mask)?;
    b.l3 = value(&l3)?;
    add(l3, w.gamma)?;
    let total = total.expect("six terms");
    b.total = value(&total)?;
    Ok(LossOutput { total, breakdown: b })
}

/// Logit-level baselines: `β·KD(s, t) + γ·dice_loss(s, mask)`.
pub fn baseline_loss(
    strategy: StrategyId,
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    mask: &Tensor,
    w: &DistillWeights,
) -> Result<LossOutput> {
    w.validate()?;
    let kd = match strategy.strategy {
        Strategy::Nkd => nkd_loss(student_logits, teacher_logits, strategy.temperature)?,
        Strategy::Cwd => cwd_loss(student_logits, teacher_logits, strategy.temperature)?,
        Strategy::Dist => dist_loss(student_logits, teacher_logits)?,
        other => return Err(Error::Config(format!("{other} is not a logit baseline"))),
    };
    let dice = dice_loss(student_logits, mask)?;
    let total = ((&kd * w.beta)? + (&dice * w.gamma)?)?;
    let breakdown = LossBreakdown {
        total: value(&total)?,
        l1: [0.0; 4],
        l2: value(&kd)?,
        l3: value(&dice)?,
    };
    Ok(LossOutput { total, breakdown })
}

/// Plain supervised Dice loss, used for the teacher and the scratch student.
pub fn supervised_loss(logits: &Tensor, mask: &Tensor) -> Result<LossOutput> {
    let total = dice_loss(logits, mask)?;
    let l3 = value(&total)?;
    Ok(LossOutput {
        total,
        breakdown: LossBreakdown {
            total: l3,
            l3,
            ..Default::default()
        },
    })
}
