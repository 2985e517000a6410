//! Distillation objective: `(1 − α)·CE(student, label) + α·KL(teacher_T ‖ student_T)`.
//!
//! Hard-label cross-entropy uses the student at temperature 1; the KL term
//! compares both models softened by the same temperature. Teacher logits are
//! constants, so gradients are only ever taken with respect to the student.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("temperature mismatch: teacher at {teacher}, student at {student}")]
    TemperatureMismatch { teacher: f64, student: f64 },
    #[error("class count mismatch: {0} vs {1}")]
    ClassCountMismatch(usize, usize),
    #[error("student assigns zero probability to class {class} where the teacher has {teacher_prob}; KL is infinite")]
    NumericDegeneracy { class: usize, teacher_prob: f64 },
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("batch of {rows} rows but {labels} labels")]
    BatchMismatch { rows: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Teacher,
    Student,
}

/// A temperature-softened probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    pub probs: Vec<f64>,
    pub temperature: f64,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub hard_loss: f64,
    pub kl_loss: f64,
    pub total: f64,
    pub alpha: f64,
    pub temperature: f64,
}

fn check_temperature(t: f64) -> Result<(), LossError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(LossError::NonPositiveTemperature(t))
    }
}

fn check_logits(z: &[f64]) -> Result<(), LossError> {
    if z.is_empty() || !z.iter().all(|v| v.is_finite()) {
        Err(LossError::NonFiniteLogits)
    } else {
        Ok(())
    }
}

/// `log softmax(z / t)`, accurate even when one class dominates.
fn log_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let (k, max) = z
        .iter()
        .copied()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
        );
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, &v)| ((v - max) / t).exp())
        .sum();
    let tail = rest.ln_1p();
    z.iter().map(|&v| (v - max) / t - tail).collect()
}

pub fn softmax_with_temperature(
    logits: &[f64],
    temperature: f64,
    source: Source,
) -> Result<SoftTargets, LossError> {
    check_temperature(temperature)?;
    check_logits(logits)?;
    Ok(SoftTargets {
        probs: log_softmax(logits, temperature)
            .into_iter()
            .map(f64::exp)
            .collect(),
        temperature,
        source,
    })
}

/// `−log softmax(z)[label]` at temperature 1.
pub fn cross_entropy(student_logits: &[f64], label: usize) -> Result<f64, LossError> {
    check_logits(student_logits)?;
    if label >= student_logits.len() {
        return Err(LossError::LabelOutOfRange {
            label,
            classes: student_logits.len(),
        });
    }
    Ok(-log_softmax(student_logits, 1.0)[label])
}

/// `Σ tᵢ log(tᵢ / sᵢ)` with `0·log(0/s) = 0`.
pub fn kl_divergence(teacher: &SoftTargets, student: &SoftTargets) -> Result<f64, LossError> {
    if teacher.temperature != student.temperature {
        return Err(LossError::TemperatureMismatch {
            teacher: teacher.temperature,
            student: student.temperature,
        });
    }
    if teacher.probs.len() != student.probs.len() {
        return Err(LossError::ClassCountMismatch(
            teacher.probs.len(),
            student.probs.len(),
        ));
    }
    let mut kl = 0.0;
    for (class, (&t, &s)) in teacher.probs.iter().zip(&student.probs).enumerate() {
        if t == 0.0 {
            continue;
        }
        if s == 0.0 {
            return Err(LossError::NumericDegeneracy {
                class,
                teacher_prob: t,
            });
        }
        kl += t * (t / s).ln();
    }
    Ok(kl.max(0.0))
}

/// Blended distillation loss for one sample.
pub fn kd_loss(
    student_logits: &[f64],
    teacher_logits: &[f64],
    label: usize,
    alpha: f64,
    temperature: f64,
) -> Result<LossBreakdown, LossError> {
    let objective = KdObjective::new(alpha, temperature)?;
    objective
        .sample(student_logits, Some(teacher_logits), label)
        .map(|(b, _)| b)
}

/// The KD objective with its hyperparameters, producing losses and student-logit gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdObjective {
    pub alpha: f64,
    pub temperature: f64,
    /// Multiply the KL term by `T²`. Off by default.
    pub kl_t_squared: bool,
}

impl KdObjective {
    pub fn new(alpha: f64, temperature: f64) -> Result<Self, LossError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(LossError::InvalidAlpha(alpha));
        }
        check_temperature(temperature)?;
        Ok(KdObjective {
            alpha,
            temperature,
            kl_t_squared: false,
        })
    }

    /// Plain cross-entropy: α = 0.
    pub fn hard_only() -> Self {
        KdObjective {
            alpha: 0.0,
            temperature: 1.0,
            kl_t_squared: false,
        }
    }

    /// Whether the KL term contributes; when it does not, teacher logits are never read.
    pub fn uses_teacher(&self) -> bool {
        self.alpha > 0.0
    }

    fn kl_weight(&self) -> f64 {
        if self.kl_t_squared {
            self.alpha * self.temperature * self.temperature
        } else {
            self.alpha
        }
    }

    /// Loss breakdown and `∂total/∂student_logits` for one sample.
    pub fn sample(
        &self,
        student: &[f64],
        teacher: Option<&[f64]>,
        label: usize,
    ) -> Result<(LossBreakdown, Vec<f64>), LossError> {
        check_logits(student)?;
        let k = student.len();
        if label >= k {
            return Err(LossError::LabelOutOfRange { label, classes: k });
        }
        let log_p = log_softmax(student, 1.0);
        let hard_loss = -log_p[label];
        let mut grad: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
        grad[label] -= 1.0;

        let mut kl_loss = 0.0;
        if self.uses_teacher() {
            let teacher = teacher.ok_or(LossError::ClassCountMismatch(k, 0))?;
            check_logits(teacher)?;
            if teacher.len() != k {
                return Err(LossError::ClassCountMismatch(teacher.len(), k));
            }
            let t = self.temperature;
            let log_t = log_softmax(teacher, t);
            let log_s = log_softmax(student, t);
            kl_loss = log_t
                .iter()
                .zip(&log_s)
                .map(|(&lt, &ls)| {
                    if lt == f64::NEG_INFINITY {
                        0.0
                    } else {
                        lt.exp() * (lt - ls)
                    }
                })
                .sum::<f64>()
                .max(0.0);
            let w = self.kl_weight();
            for (g, (&lt, &ls)) in grad.iter_mut().zip(log_t.iter().zip(&log_s)) {
                *g = (1.0 - self.alpha) * *g + w * (ls.exp() - lt.exp()) / t;
            }
        }
        let total = if self.uses_teacher() {
            (1.0 - self.alpha) * hard_loss + self.kl_weight() * kl_loss
        } else {
            hard_loss
        };
        Ok((
            LossBreakdown {
                hard_loss,
                kl_loss,
                total,
                alpha: self.alpha,
                temperature: self.temperature,
            },
            grad,
        ))
    }

    /// Batch-mean loss and gradient with respect to `student` logits `[N, K]`.
    pub fn batch(
        &self,
        student: &Tensor,
        teacher: Option<&Tensor>,
        labels: &[usize],
    ) -> Result<(LossBreakdown, Tensor), LossError> {
        let rows = student.shape()[0];
        if labels.len() != rows {
            return Err(LossError::BatchMismatch {
                rows,
                labels: labels.len(),
            });
        }
        let inv = 1.0 / rows as f64;
        let mut mean = LossBreakdown {
            alpha: self.alpha,
            temperature: self.temperature,
            ..Default::default()
        };
        let mut grad = Vec::with_capacity(student.len());
        for (i, &label) in labels.iter().enumerate() {
            let t_row = teacher.filter(|_| self.uses_teacher()).map(|t| t.row(i));
            let (b, g) = self.sample(student.row(i), t_row, label)?;
            mean.hard_loss += b.hard_loss * inv;
            mean.kl_loss += b.kl_loss * inv;
            mean.total += b.total * inv;
            grad.extend(g.into_iter().map(|v| v * inv));
        }
        let grad = Tensor::new(student.shape().to_vec(), grad).expect("congruent with logits");
        Ok((mean, grad))
    }
}
