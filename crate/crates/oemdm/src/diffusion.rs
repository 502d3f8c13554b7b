//! The stochastic kernels: forward corruption, true reverse posterior, the
//! SUBS-constrained parametrized reverse kernel, and the ancestral sampler.

use crate::core::{sample_categorical, MaskedSequence, RandomStream, Sequence, TimeGrid, Vocabulary};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::scheduler::{SchedulerContext, SchedulerSpec};

/// Factorized per-position transition law: one categorical row over the V+1
/// symbols for each position. Unmasked positions carry a point mass.
#[derive(Clone, Debug)]
pub struct PerPositionKernel {
    pub rows: Vec<Vec<f64>>,
}

impl PerPositionKernel {
    /// Every row must be a simplex within 1e-12.
    pub fn max_row_defect(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn forward_context<'a>(spec: &SchedulerSpec, x: &'a Sequence) -> SchedulerContext<'a> {
    match spec.requires_context() {
        Some(_) => SchedulerContext::Clean(x),
        None => SchedulerContext::None,
    }
}

/// One draw from `q(z_t | x)`: each position independently keeps its token
/// with probability `alpha_i(x, t)` and is masked otherwise. Per-position
/// substreams keep the draw independent of evaluation order.
pub fn forward_sample(
    x: &Sequence,
    spec: &SchedulerSpec,
    t: f64,
    rng: &RandomStream,
    vocab: &Vocabulary,
) -> Result<MaskedSequence> {
    let ctx = forward_context(spec, x);
    let evals = spec.eval_all(x.len(), ctx, t)?;
    let tokens = (0..x.len())
        .map(|i| {
            let u = rng.substream("pos", i as u64).next_f64();
            if u < evals[i].alpha {
                x.get(i)
            } else {
                vocab.mask_id()
            }
        })
        .collect();
    MaskedSequence::new(tokens, vocab)
}

/// `log q(z | x)` at time `t`: masked positions contribute `log(1 - alpha_i)`,
/// unmasked ones `log alpha_i`. Exponentiating over the whole masked set of
/// `x` sums to one.
pub fn forward_logprob(
    z: &MaskedSequence,
    x: &Sequence,
    spec: &SchedulerSpec,
    t: f64,
) -> Result<f64> {
    if !z.consistent_with(x) {
        return Err(Error::Membership(
            "masked sequence is not a corruption of the given clean sequence".into(),
        ));
    }
    let ctx = forward_context(spec, x);
    let evals = spec.eval_all(x.len(), ctx, t)?;
    let mut logp = 0.0;
    for i in 0..x.len() {
        let a = evals[i].alpha;
        logp += if z.is_masked(i) { (1.0 - a).ln() } else { a.ln() };
    }
    Ok(logp)
}

/// True reverse posterior `q(z_s | z_t, x)` factorized per position:
/// unmasked positions keep their token; a masked position unmasks to
/// `x_i` with probability `(alpha(s) - alpha(t)) / (1 - alpha(t))`.
pub fn true_posterior_step(
    z_t: &MaskedSequence,
    x: &Sequence,
    spec: &SchedulerSpec,
    s: f64,
    t: f64,
    vocab: &Vocabulary,
) -> Result<PerPositionKernel> {
    if !z_t.consistent_with(x) {
        return Err(Error::Membership(
            "masked sequence is not a corruption of the given clean sequence".into(),
        ));
    }
    let ctx = forward_context(spec, x);
    let pairs = spec.alpha_pair_all(x.len(), ctx, s, t)?;
    let n = vocab.n_symbols();
    let rows = (0..x.len())
        .map(|i| {
            let mut row = vec![0.0; n];
            if z_t.is_masked(i) {
                let (a_s, a_t) = pairs[i];
                let unmask = (a_s - a_t) / (1.0 - a_t);
                row[x.get(i)] = unmask;
                row[vocab.mask_id()] = 1.0 - unmask;
            } else {
                row[z_t.get(i)] = 1.0;
            }
            row
        })
        .collect();
    Ok(PerPositionKernel { rows })
}

/// Applies the SUBS constraints to raw per-position score vectors over the
/// V+1 symbols: the mask coordinate gets probability exactly zero (it is
/// excluded from the softmax), and unmasked positions return a point mass on
/// their current token.
pub fn apply_subs(raw_scores: &[Vec<f64>], z_t: &MaskedSequence) -> Result<Vec<Vec<f64>>> {
    if raw_scores.len() != z_t.len() {
        return Err(Error::Invalid(format!(
            "got {} score rows for a length-{} state",
            raw_scores.len(),
            z_t.len()
        )));
    }
    raw_scores
        .iter()
        .enumerate()
        .map(|(i, scores)| {
            if scores.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("denoiser scores at position {i}")));
            }
            let n = scores.len();
            let mut row = vec![0.0; n];
            if z_t.is_masked(i) {
                let real = &scores[..n - 1];
                let max = real.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (k, &v) in real.iter().enumerate() {
                    let e = (v - max).exp();
                    row[k] = e;
                    sum += e;
                }
                for v in row[..n - 1].iter_mut() {
                    *v /= sum;
                }
            } else {
                row[z_t.get(i)] = 1.0;
            }
            Ok(row)
        })
        .collect()
}

fn check_subs_rows(rows: &[Vec<f64>], z_t: &MaskedSequence, vocab: &Vocabulary) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != vocab.n_symbols() {
            return Err(Error::Invalid(format!("row {i} has wrong width")));
        }
        if row[vocab.mask_id()] != 0.0 {
            return Err(Error::Invalid(format!(
                "denoiser output at position {i} puts mass on the mask symbol"
            )));
        }
        if !z_t.is_masked(i) && row[z_t.get(i)] != 1.0 {
            return Err(Error::Invalid(format!(
                "denoiser output at position {i} violates carry-over"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("denoiser row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// Parametrized reverse transition `p(z_s | z_t)` for a SUBS-constrained
/// denoiser output: a masked position stays masked with probability
/// `(1 - alpha(s)) / (1 - alpha(t))` and otherwise draws a real token from
/// the denoiser row scaled by `(alpha(s) - alpha(t)) / (1 - alpha(t))`.
pub fn reverse_step(
    z_t: &MaskedSequence,
    denoiser_output: &[Vec<f64>],
    spec: &SchedulerSpec,
    s: f64,
    t: f64,
    vocab: &Vocabulary,
) -> Result<PerPositionKernel> {
    check_subs_rows(denoiser_output, z_t, vocab)?;
    let ctx = SchedulerContext::Masked(z_t);
    let pairs = spec.alpha_pair_all(z_t.len(), ctx, s, t)?;
    let n = vocab.n_symbols();
    let rows = (0..z_t.len())
        .map(|i| {
            let mut row = vec![0.0; n];
            if z_t.is_masked(i) {
                let (a_s, a_t) = pairs[i];
                let unmask = (a_s - a_t) / (1.0 - a_t);
                for v in 0..vocab.size() {
                    row[v] = unmask * denoiser_output[i][v];
                }
                row[vocab.mask_id()] = (1.0 - a_s) / (1.0 - a_t);
            } else {
                row[z_t.get(i)] = 1.0;
            }
            row
        })
        .collect();
    Ok(PerPositionKernel { rows })
}

/// Ancestral sampling down the grid, plus the realized trajectory (states at
/// every grid time, last-to-first in time order `t(0) .. t(T)`).
pub fn ancestral_sample_traced(
    model: &ModelBundle,
    reverse_spec: &SchedulerSpec,
    grid: &TimeGrid,
    len: usize,
    rng: &RandomStream,
) -> Result<(Sequence, Vec<MaskedSequence>)> {
    let vocab = model.vocab();
    let mut z = MaskedSequence::all_masked(len, &vocab);
    let mut states = vec![z.clone()];
    for tau in (1..=grid.steps()).rev() {
        let s = grid.s_of(tau);
        let t = grid.t_of(tau);
        let rows = model.denoise(&z);
        let kernel = reverse_step(&z, &rows, reverse_spec, s, t, &vocab)?;
        let step_rng = rng.substream("step", tau as u64);
        for i in 0..len {
            if z.is_masked(i) {
                let mut r = step_rng.substream("pos", i as u64);
                let draw = sample_categorical(&kernel.rows[i], &mut r)?;
                z.set(i, draw);
            }
        }
        states.push(z.clone());
    }
    // Residual masks at t(0) resolve through the reconstruction distribution.
    let rows = model.denoise(&z);
    let mut tokens = z.tokens().to_vec();
    for i in 0..len {
        if z.is_masked(i) {
            let mut r = rng.substream("recon", i as u64);
            tokens[i] = sample_categorical(&rows[i], &mut r)?;
        }
    }
    let endpoint = Sequence::new(tokens, &vocab)?;
    states.reverse(); // index by grid time: states[tau] is the state at t(tau)
    Ok((endpoint, states))
}

/// Ancestral sampling; starts fully masked at `t(T) = 1` and returns a
/// mask-free sequence.
pub fn ancestral_sample(
    model: &ModelBundle,
    reverse_spec: &SchedulerSpec,
    grid: &TimeGrid,
    len: usize,
    rng: &RandomStream,
) -> Result<Sequence> {
    Ok(ancestral_sample_traced(model, reverse_spec, grid, len, rng)?.0)
}
