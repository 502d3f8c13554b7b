//! The free-form noise scheduler family and every concrete instance used by
//! the kernels: per-position functions `alpha(u, t)` equal to 1 at `t = 0`,
//! 0 at `t = 1`, strictly decreasing in between, together with the velocity
//! `A = -d_t alpha / (1 - alpha)` that sets generation-order priority.

use std::sync::Arc;

use crate::core::{MaskedSequence, Sequence};
use crate::error::{Error, Result};
use crate::model::{HeadRole, ModelBundle};

/// The C1 cubic smoothstep `3u^2 - 2u^3`, clamped outside `[0, 1]`.
pub fn smoothstep(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        u * u * (3.0 - 2.0 * u)
    }
}

/// Derivative of [`smoothstep`]: `6u(1 - u)` inside the ramp, 0 outside.
pub fn smoothstep_deriv(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        0.0
    } else {
        6.0 * u * (1.0 - u)
    }
}

/// One scheduler evaluated at a `(position, context, t)` triple.
#[derive(Clone, Copy, Debug)]
pub struct SchedulerEval {
    pub alpha: f64,
    pub dalpha_dt: f64,
    pub velocity: f64,
}

/// Context a scheduler variant may require: nothing, the clean sequence, or
/// the current masked state.
#[derive(Clone, Copy, Debug)]
pub enum SchedulerContext<'a> {
    None,
    Clean(&'a Sequence),
    Masked(&'a MaskedSequence),
}

impl<'a> SchedulerContext<'a> {
    pub fn tokens(&self) -> Option<&'a [usize]> {
        match self {
            SchedulerContext::None => None,
            SchedulerContext::Clean(x) => Some(x.tokens()),
            SchedulerContext::Masked(z) => Some(z.tokens()),
        }
    }
}

/// A closed family of forward/reverse noise schedulers.
#[derive(Clone, Debug)]
pub enum SchedulerSpec {
    /// `alpha = 1 - t`; the classic MDLM schedule, uniform over positions.
    Linear,
    /// `alpha = 1 - t^w` with `w > 0`.
    Polynomial { w: f64 },
    /// Smoothstep windows that concentrate each position's masking in its own
    /// time slot, recovering autoregressive generation as `epsilon -> 0`.
    /// `order[k]` is the position generated k-th; identity order reads left
    /// to right.
    Arm {
        len: usize,
        epsilon: f64,
        order: Vec<usize>,
    },
    /// Block-level windows (BD3LM-style): blocks generate left to right,
    /// positions inside a block share a window.
    Blockwise {
        len: usize,
        blocks: usize,
        epsilon: f64,
    },
    /// Vocabulary-wise polynomial exponents (GenMD4-style fixed scheduler):
    /// position `i` uses the exponent of its clean token.
    VocabWise { exponents: Vec<f64> },
    /// Exponents produced by a scheduler head over model features; the
    /// forward role reads the clean sequence, the reverse role the masked
    /// state.
    Learned {
        model: Arc<ModelBundle>,
        role: HeadRole,
    },
}

impl SchedulerSpec {
    pub fn polynomial(w: f64) -> Result<Self> {
        if !(w > 0.0) {
            return Err(Error::Invalid(format!("polynomial exponent must be > 0, got {w}")));
        }
        Ok(SchedulerSpec::Polynomial { w })
    }

    /// Left-to-right autoregressive windows.
    pub fn arm(len: usize, epsilon: f64) -> Result<Self> {
        Self::arm_ordered(len, epsilon, (0..len).collect())
    }

    /// Autoregressive windows in an arbitrary fixed generation order.
    pub fn arm_ordered(len: usize, epsilon: f64, order: Vec<usize>) -> Result<Self> {
        if len == 0 {
            return Err(Error::Invalid("arm scheduler needs len >= 1".into()));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Invalid(format!("epsilon must lie in (0,1), got {epsilon}")));
        }
        let mut seen = vec![false; len];
        if order.len() != len || order.iter().any(|&p| p >= len || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Invalid("order must be a permutation of 0..len".into()));
        }
        Ok(SchedulerSpec::Arm { len, epsilon, order })
    }

    pub fn blockwise(len: usize, blocks: usize, epsilon: f64) -> Result<Self> {
        if blocks == 0 || len % blocks != 0 {
            return Err(Error::Invalid(format!(
                "blockwise scheduler needs blocks dividing len, got len={len} blocks={blocks}"
            )));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Invalid(format!("epsilon must lie in (0,1), got {epsilon}")));
        }
        Ok(SchedulerSpec::Blockwise { len, blocks, epsilon })
    }

    pub fn vocab_wise(exponents: Vec<f64>) -> Result<Self> {
        if exponents.is_empty() || exponents.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Invalid("vocabulary exponents must all be > 0".into()));
        }
        Ok(SchedulerSpec::VocabWise { exponents })
    }

    pub fn learned(model: Arc<ModelBundle>, role: HeadRole) -> Result<Self> {
        if model.heads_view().is_none() {
            return Err(Error::SchedulerContext(
                "learned scheduler needs a model with scheduler heads".into(),
            ));
        }
        Ok(SchedulerSpec::Learned { model, role })
    }

    /// Whether `eval` requires a clean / masked context.
    pub fn requires_context(&self) -> Option<HeadRole> {
        match self {
            SchedulerSpec::VocabWise { .. } => Some(HeadRole::Forward),
            SchedulerSpec::Learned { role, .. } => Some(*role),
            _ => None,
        }
    }

    /// Window rank (1-based) of a position under autoregressive ordering.
    fn arm_rank(order: &[usize], position: usize) -> usize {
        order.iter().position(|&p| p == position).expect("validated permutation") + 1
    }

    /// alpha and its t-derivative; `t` may be 0 or 1 here (used for boundary
    /// checks), while `eval` restricts to `(0, 1]`.
    fn alpha_dalpha(&self, position: usize, ctx: SchedulerContext, t: f64) -> Result<(f64, f64)> {
        match self {
            SchedulerSpec::Linear => Ok((1.0 - t, -1.0)),
            SchedulerSpec::Polynomial { w } => {
                let tw = t.powf(*w);
                let d = if t == 0.0 { 0.0 } else { -w * tw / t };
                Ok((1.0 - tw, d))
            }
            SchedulerSpec::Arm { len, epsilon, order } => {
                let rank = Self::arm_rank(order, position);
                window_alpha(t, *epsilon, 1.0 - rank as f64 / *len as f64, 1.0 / *len as f64)
            }
            SchedulerSpec::Blockwise { len, blocks, epsilon } => {
                let block_len = len / blocks;
                let b = position / block_len + 1; // 1-based block index
                window_alpha(t, *epsilon, 1.0 - b as f64 / *blocks as f64, 1.0 / *blocks as f64)
            }
            SchedulerSpec::VocabWise { exponents } => {
                let tok = match ctx {
                    SchedulerContext::Clean(x) => x.get(position),
                    _ => {
                        return Err(Error::SchedulerContext(
                            "vocabulary-wise scheduler needs the clean sequence".into(),
                        ))
                    }
                };
                let w = *exponents.get(tok).ok_or_else(|| {
                    Error::SchedulerContext(format!("token {tok} outside exponent table"))
                })?;
                let tw = t.powf(w);
                let d = if t == 0.0 { 0.0 } else { -w * tw / t };
                Ok((1.0 - tw, d))
            }
            SchedulerSpec::Learned { model, role } => {
                let tokens = learned_tokens(*role, ctx)?;
                let e = model.learned_exponents(*role, tokens)?[position];
                let tw = t.powf(e);
                let d = if t == 0.0 { 0.0 } else { -e * tw / t };
                Ok((1.0 - tw, d))
            }
        }
    }

    /// Evaluate at one position. `t` must lie in `(0, 1]`; the boundary value
    /// `alpha(., 0) = 1` is definitional and not produced here.
    pub fn eval(&self, position: usize, ctx: SchedulerContext, t: f64) -> Result<SchedulerEval> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Invalid(format!("time {t} outside (0, 1]")));
        }
        let (alpha, dalpha_dt) = self.alpha_dalpha(position, ctx, t)?;
        Ok(SchedulerEval {
            alpha,
            dalpha_dt,
            velocity: -dalpha_dt / (1.0 - alpha),
        })
    }

    /// Evaluate every position at once; for learned schedulers this runs the
    /// feature extractor a single time.
    pub fn eval_all(&self, len: usize, ctx: SchedulerContext, t: f64) -> Result<Vec<SchedulerEval>> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Invalid(format!("time {t} outside (0, 1]")));
        }
        if let SchedulerSpec::Learned { model, role } = self {
            let tokens = learned_tokens(*role, ctx)?;
            if tokens.len() != len {
                return Err(Error::SchedulerContext(format!(
                    "context length {} does not match requested {len}",
                    tokens.len()
                )));
            }
            let exps = model.learned_exponents(*role, tokens)?;
            return Ok(exps
                .iter()
                .map(|&e| {
                    let tw = t.powf(e);
                    SchedulerEval {
                        alpha: 1.0 - tw,
                        dalpha_dt: -e * tw / t,
                        velocity: e / t,
                    }
                })
                .collect());
        }
        (0..len).map(|i| self.eval(i, ctx, t)).collect()
    }

    /// alpha alone, with the boundary values included (`t` in `[0, 1]`).
    /// Diagnostic use only.
    pub fn alpha_with_boundary(&self, position: usize, ctx: SchedulerContext, t: f64) -> Result<f64> {
        Ok(self.alpha_dalpha(position, ctx, t)?.0)
    }

    /// `(alpha(s), alpha(t))` for every position with `0 <= s < t <= 1`.
    /// The scheduler is instantiated once on the context (one feature pass
    /// for learned heads) and then read at both times.
    pub fn alpha_pair_all(
        &self,
        len: usize,
        ctx: SchedulerContext,
        s: f64,
        t: f64,
    ) -> Result<Vec<(f64, f64)>> {
        if !(s >= 0.0 && s < t && t <= 1.0) {
            return Err(Error::Invalid(format!("need 0 <= s < t <= 1, got s={s} t={t}")));
        }
        if let SchedulerSpec::Learned { model, role } = self {
            let tokens = learned_tokens(*role, ctx)?;
            if tokens.len() != len {
                return Err(Error::SchedulerContext(format!(
                    "context length {} does not match requested {len}",
                    tokens.len()
                )));
            }
            let exps = model.learned_exponents(*role, tokens)?;
            return Ok(exps
                .iter()
                .map(|&e| (1.0 - s.powf(e), 1.0 - t.powf(e)))
                .collect());
        }
        (0..len)
            .map(|i| {
                let a_s = self.alpha_with_boundary(i, ctx, s)?;
                let a_t = self.alpha_with_boundary(i, ctx, t)?;
                Ok((a_s, a_t))
            })
            .collect()
    }
}

fn learned_tokens<'a>(role: HeadRole, ctx: SchedulerContext<'a>) -> Result<&'a [usize]> {
    match (role, ctx) {
        (HeadRole::Forward, SchedulerContext::Clean(x)) => Ok(x.tokens()),
        (HeadRole::Reverse, SchedulerContext::Masked(z)) => Ok(z.tokens()),
        (HeadRole::Forward, _) => Err(Error::SchedulerContext(
            "forward learned scheduler needs the clean sequence".into(),
        )),
        (HeadRole::Reverse, _) => Err(Error::SchedulerContext(
            "reverse learned scheduler needs the masked state".into(),
        )),
    }
}

/// `alpha = 1 - eps*t - (1-eps) * S((t - t_start)/width)` and its derivative.
fn window_alpha(t: f64, epsilon: f64, t_start: f64, width: f64) -> Result<(f64, f64)> {
    let u = (t - t_start) / width;
    let alpha = 1.0 - epsilon * t - (1.0 - epsilon) * smoothstep(u);
    let dalpha = -epsilon - (1.0 - epsilon) * smoothstep_deriv(u) / width;
    Ok((alpha, dalpha))
}

/// Boundary and monotonicity diagnostics for a scheduler over a dense grid.
#[derive(Clone, Debug)]
pub struct ValidityReport {
    /// max over positions/contexts of |alpha(., 0) - 1|
    pub residual_at_zero: f64,
    /// max over positions/contexts of |alpha(., 1)|
    pub residual_at_one: f64,
    /// max forward difference of alpha over the grid; negative when strictly
    /// decreasing
    pub max_forward_difference: f64,
    /// max relative violation of velocity*(1-alpha) = -dalpha/dt
    pub max_velocity_identity_violation: f64,
}

impl ValidityReport {
    pub fn passes(&self) -> bool {
        self.residual_at_zero == 0.0
            && self.residual_at_one.abs() <= 1e-12
            && self.max_forward_difference <= 1e-10
            && self.max_velocity_identity_violation <= 1e-12
    }
}

/// Scans `(0, 1]` with the given grid spacing for every supplied context.
pub fn validate_freeform(
    spec: &SchedulerSpec,
    contexts: &[SchedulerContext],
    len: usize,
    spacing: f64,
) -> Result<ValidityReport> {
    if !(spacing > 0.0 && spacing <= 1e-3) {
        return Err(Error::Invalid(format!(
            "validation grid spacing must be <= 1e-3, got {spacing}"
        )));
    }
    let steps = (1.0 / spacing).ceil() as usize;
    let mut report = ValidityReport {
        residual_at_zero: 0.0,
        residual_at_one: 0.0,
        max_forward_difference: f64::NEG_INFINITY,
        max_velocity_identity_violation: 0.0,
    };
    for &ctx in contexts {
        for i in 0..len {
            let a0 = spec.alpha_with_boundary(i, ctx, 0.0)?;
            report.residual_at_zero = report.residual_at_zero.max((a0 - 1.0).abs());
            let a1 = spec.alpha_with_boundary(i, ctx, 1.0)?;
            report.residual_at_one = report.residual_at_one.max(a1.abs());
            let mut prev = a0;
            for k in 1..=steps {
                let t = (k as f64 * spacing).min(1.0);
                let ev = spec.eval(i, ctx, t)?;
                report.max_forward_difference = report.max_forward_difference.max(ev.alpha - prev);
                prev = ev.alpha;
                let lhs = ev.velocity * (1.0 - ev.alpha);
                let rhs = -ev.dalpha_dt;
                let scale = lhs.abs().max(rhs.abs()).max(1e-300);
                report.max_velocity_identity_violation = report
                    .max_velocity_identity_violation
                    .max((lhs - rhs).abs() / scale);
            }
        }
    }
    Ok(report)
}

/// The guaranteed range of forward/reverse velocity ratios for learned heads:
/// `[(c1-c2)/(c1+c2), (c1+c2)/(c1-c2)]`. Every realized ratio at equal `t`
/// lies inside it because both exponents live in `(c1-c2, c1+c2)`.
pub fn velocity_ratio_bound(c1: f64, c2: f64) -> Result<(f64, f64)> {
    if !(c2 >= 0.0 && c1 > c2) {
        return Err(Error::Invalid(format!(
            "ratio bound needs c1 > c2 >= 0, got c1={c1} c2={c2}"
        )));
    }
    Ok(((c1 - c2) / (c1 + c2), (c1 + c2) / (c1 - c2)))
}
