//! Cognition-token self-distillation between the layer-skipping student and
//! its full-depth EMA teacher.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

/// Which features the teacher's cognition token is compared against when
/// building the teacher mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMaskSource {
    /// Student features for both masks.
    #[default]
    Student,
    /// Teacher features for the teacher mask.
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillOptions {
    pub teacher_mask_source: TeacherMaskSource,
    /// Stop gradient through the masks so they act as fixed token weights.
    pub detach_masks: bool,
}

impl Default for DistillOptions {
    fn default() -> Self {
        DistillOptions { teacher_mask_source: TeacherMaskSource::Student, detach_masks: true }
    }
}

/// Token-of-interest weights `σ(f · e / √d)`: `[b, n]`.
pub fn toi_mask(cognition: &Tensor, features: &Tensor) -> Result<Tensor> {
    contract!(features.rank() == 3, "features must be [b, n, d], got {:?}", features.shape());
    let (b, n, d) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    contract!(
        cognition.numel() == d,
        "cognition token width {} does not match feature width {d}",
        cognition.numel()
    );
    Ok(features
        .matmul(&cognition.reshape(&[d, 1])?)?
        .reshape(&[b, n])?
        .scale(1.0 / (d as f64).sqrt())
        .sigmoid())
}

/// Paired student/teacher features with their token weights.
#[derive(Debug, Clone)]
pub struct DistillPair {
    pub student: Tensor,
    /// Always detached.
    pub teacher: Tensor,
    pub mask_student: Tensor,
    pub mask_teacher: Tensor,
    /// `mask_teacher ⊙ mask_student`.
    pub mask: Tensor,
}

impl DistillPair {
    /// Builds masks from both cognition tokens. The teacher side is detached.
    pub fn new(
        student: &Tensor,
        teacher: &Tensor,
        student_cognition: &Tensor,
        teacher_cognition: &Tensor,
        options: &DistillOptions,
    ) -> Result<DistillPair> {
        contract!(
            student.shape() == teacher.shape(),
            "student {:?} and teacher {:?} features differ in shape",
            student.shape(),
            teacher.shape()
        );
        let teacher = teacher.detach();
        let mask_student = toi_mask(student_cognition, student)?;
        let mask_teacher = match options.teacher_mask_source {
            TeacherMaskSource::Student => toi_mask(&teacher_cognition.detach(), student)?,
            TeacherMaskSource::Teacher => toi_mask(&teacher_cognition.detach(), &teacher)?,
        };
        let (mask_student, mask_teacher) = if options.detach_masks {
            (mask_student.detach(), mask_teacher.detach())
        } else {
            (mask_student, mask_teacher)
        };
        let mask = mask_teacher.mul(&mask_student)?;
        Ok(DistillPair { student: student.clone(), teacher, mask_student, mask_teacher, mask })
    }

    /// A pair with a caller-supplied combined mask `[b, n]`.
    pub fn with_mask(student: &Tensor, teacher: &Tensor, mask: &Tensor) -> Result<DistillPair> {
        contract!(student.shape() == teacher.shape(), "feature shapes differ");
        contract!(
            student.rank() == 3 && mask.shape() == &student.shape()[..2],
            "mask {:?} does not cover features {:?}",
            mask.shape(),
            student.shape()
        );
        Ok(DistillPair {
            student: student.clone(),
            teacher: teacher.detach(),
            mask_student: mask.clone(),
            mask_teacher: Tensor::ones(mask.shape()),
            mask: mask.clone(),
        })
    }

    fn expanded_mask(&self) -> Result<Tensor> {
        let d = self.student.shape()[2];
        self.mask.unsqueeze(2)?.expand(2, d)
    }
}

/// `(1/N) ‖M ⊙ f_t − μ(M ⊙ f_s)‖²` with `N = b·n·d`. `projector`, when
/// given, is the learnable `[d, d]` map μ; otherwise μ is the identity.
pub fn cog_mimic_loss(pair: &DistillPair, projector: Option<&Tensor>) -> Result<Tensor> {
    let m = pair.expanded_mask()?;
    let target = m.mul(&pair.teacher)?;
    let mut student = m.mul(&pair.student)?;
    if let Some(p) = projector {
        student = student.matmul(p)?;
    }
    target.mse(&student)
}

/// Mask-weighted mean over tokens of `KL(q ‖ p)`, where `q` and `p` are the
/// per-token softmax distributions of student and teacher features.
pub fn reverse_kl_loss(pair: &DistillPair) -> Result<Tensor> {
    let log_q = pair.student.log_softmax(2)?;
    let log_p = pair.teacher.log_softmax(2)?;
    let q = pair.student.softmax(2)?;
    let kl = q.mul(&log_q.sub(&log_p)?)?.sum_axis(2)?;
    Ok(kl.mul(&pair.mask)?.mean_all())
}

/// `(1 − λ1) · mimic + λ1 · reverse-KL`.
pub fn cog_loss(pair: &DistillPair, lambda1: f64, projector: Option<&Tensor>) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda1) {
        return Err(Error::Config(format!("lambda1 must be in [0, 1], got {lambda1}")));
    }
    let mimic = cog_mimic_loss(pair, projector)?;
    let rkl = reverse_kl_loss(pair)?;
    mimic.scale(1.0 - lambda1).add(&rkl.scale(lambda1))
}

/// `teacher ← α · teacher + (1 − α) · student` for every parameter.
///
/// Teacher tensors stay constants; the trees must match name for name.
pub fn ema_update<T: ParamTree>(teacher: &mut T, student: &T, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("EMA weight must be in [0, 1], got {alpha}")));
    }
    let source = student.named_params();
    let mut i = 0;
    let mut mismatch: Option<String> = None;
    teacher.visit_mut("", &mut |name, t| {
        match source.get(i) {
            Some((n, s)) if *n == name && s.shape() == t.shape() => {
                let data = t.data().iter().zip(s.data()).map(|(tv, sv)| alpha * tv + (1.0 - alpha) * sv).collect();
                *t = Tensor::new(t.shape(), data).expect("shape checked");
            }
            _ => {
                mismatch.get_or_insert(name);
            }
        }
        i += 1;
    });
    if mismatch.is_some() || i != source.len() {
        return Err(Error::Contract(format!("teacher and student trees differ at {mismatch:?}")));
    }
    Ok(())
}
