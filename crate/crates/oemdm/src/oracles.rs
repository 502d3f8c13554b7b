//! Brute-force ground truth on tiny instances: exact path-sum likelihoods of
//! the reverse process, autoregressive factorizations, and numerical checks
//! of the reduction identities and estimator properties.

use rayon::prelude::*;
use serde::Serialize;

use crate::core::{
    enumerate_masked_set, MaskedSequence, RandomStream, Sequence, TimeGrid, Vocabulary,
};
use crate::error::{Error, Result};
use crate::model::heads::{head_forward, norm_sig, norm_sig_backward};
use crate::model::{HeadParams, HeadRole, ModelBundle};
use crate::objective::{loss_breakdown, loss_terms, T_MIN};
use crate::scheduler::{SchedulerContext, SchedulerSpec};

/// Outcome of one numerical proposition check.
#[derive(Clone, Debug, Serialize)]
pub struct PropositionReport {
    pub name: String,
    pub instances: usize,
    pub max_deviation: f64,
    /// `(epsilon, deviation)` points for ladder-style checks.
    pub per_epsilon: Vec<(f64, f64)>,
    /// Fitted log-log slope for ladder-style checks.
    pub slope: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
    pub details: String,
}

impl PropositionReport {
    fn simple(name: &str, instances: usize, max_deviation: f64, tolerance: f64, details: String) -> Self {
        Self {
            name: name.to_string(),
            instances,
            max_deviation,
            per_epsilon: Vec::new(),
            slope: None,
            tolerance,
            pass: max_deviation <= tolerance,
            details,
        }
    }
}

fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 64 {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Log-space sum with pairwise accumulation; `-inf` entries carry zero mass.
fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let shifted: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    m + pairwise_sum(&shifted).ln()
}

/// Per-state tables of the reverse scheduler and denoiser over the masked
/// set of one endpoint: everything a path sum needs, indexed by mask bitmask.
struct StateTables {
    /// alpha_hat[state][tau * len + i] at time t(tau), instantiated on the state
    alpha: Vec<Vec<f64>>,
    /// log confidence of the true token per (state, position)
    log_conf: Vec<Vec<f64>>,
    /// precomputed sum of stay-masked log factors per (state, tau)
    stay_sum: Vec<Vec<f64>>,
    len: usize,
}

fn state_from_bits(x: &Sequence, bits: usize, vocab: &Vocabulary) -> MaskedSequence {
    let tokens = (0..x.len())
        .map(|i| if bits >> i & 1 == 1 { vocab.mask_id() } else { x.get(i) })
        .collect();
    MaskedSequence::new(tokens, vocab).expect("valid state")
}

fn build_tables(
    x: &Sequence,
    model: &ModelBundle,
    rev: &SchedulerSpec,
    grid: &TimeGrid,
) -> Result<StateTables> {
    let vocab = model.vocab();
    let len = x.len();
    let n_states = 1usize << len;
    let steps = grid.steps();
    let mut alpha = Vec::with_capacity(n_states);
    let mut log_conf = Vec::with_capacity(n_states);
    for bits in 0..n_states {
        let z = state_from_bits(x, bits, &vocab);
        let rows = model.denoise(&z);
        log_conf.push((0..len).map(|i| rows[i][x.get(i)].ln()).collect());
        let ctx = match rev.requires_context() {
            Some(HeadRole::Reverse) => SchedulerContext::Masked(&z),
            Some(HeadRole::Forward) => {
                return Err(Error::SchedulerContext(
                    "path sums need a reverse-role or fixed scheduler".into(),
                ))
            }
            None => SchedulerContext::None,
        };
        let mut table = vec![0.0; (steps + 1) * len];
        for tau in 0..=steps {
            let evals = rev.eval_all(len, ctx, grid.t_of(tau))?;
            for i in 0..len {
                table[tau * len + i] = evals[i].alpha;
            }
        }
        alpha.push(table);
    }
    // stay_sum[state][tau] = sum over masked i of ln((1-a[tau-1]) / (1-a[tau]))
    let mut stay_sum = vec![vec![0.0; steps + 1]; n_states];
    for bits in 0..n_states {
        for tau in 1..=steps {
            let mut acc = 0.0;
            for i in 0..len {
                if bits >> i & 1 == 1 {
                    let a_s = alpha[bits][(tau - 1) * len + i];
                    let a_t = alpha[bits][tau * len + i];
                    acc += (1.0 - a_s).ln() - (1.0 - a_t).ln();
                }
            }
            stay_sum[bits][tau] = acc;
        }
    }
    Ok(StateTables {
        alpha,
        log_conf,
        stay_sum,
        len,
    })
}

/// Exact generative probability of endpoint `x` under the discrete-time
/// reverse process: sums the reverse path measure over all `(T+1)^L`
/// absorbing trajectories ending at `x`, in log space.
pub fn exact_likelihood(
    x: &Sequence,
    model: &ModelBundle,
    rev: &SchedulerSpec,
    grid: &TimeGrid,
) -> Result<f64> {
    let len = x.len();
    let steps = grid.steps();
    let paths = ((steps + 1) as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
    if paths > crate::core::MAX_TRAJECTORY_BUDGET {
        return Err(Error::SizeGuard(format!(
            "path sum budget exceeded: (T+1)^L = {}^{len}",
            steps + 1
        )));
    }
    let tables = build_tables(x, model, rev, grid)?;
    let mut log_probs = Vec::with_capacity(paths as usize);
    let mut onsets = vec![0usize; len];
    loop {
        log_probs.push(path_log_prob(&tables, &onsets, steps));
        let mut pos = 0;
        loop {
            if pos == len {
                let total = logsumexp(&log_probs).exp();
                return Ok(total);
            }
            onsets[pos] += 1;
            if onsets[pos] <= steps {
                break;
            }
            onsets[pos] = 0;
            pos += 1;
        }
    }
}

/// Log reverse-path probability of the trajectory where position `i` first
/// becomes masked at grid index `onsets[i]` (onset 0: resolved only by the
/// reconstruction step).
fn path_log_prob(tables: &StateTables, onsets: &[usize], steps: usize) -> f64 {
    let len = tables.len;
    let mut acc = 0.0;
    // mask bitmask at grid index tau: positions with onset <= tau
    let mut mask: usize = (1 << len) - 1;
    for tau in (1..=steps).rev() {
        // positions with onset == tau leave the mask after this reverse step
        acc += tables.stay_sum[mask][tau];
        for i in 0..len {
            if onsets[i] == tau {
                let a_s = tables.alpha[mask][(tau - 1) * len + i];
                let a_t = tables.alpha[mask][tau * len + i];
                let stay = (1.0 - a_s).ln() - (1.0 - a_t).ln();
                let unmask = (a_s - a_t).ln() - (1.0 - a_t).ln() + tables.log_conf[mask][i];
                acc += unmask - stay;
            }
        }
        for i in 0..len {
            if onsets[i] == tau {
                mask &= !(1 << i);
            }
        }
    }
    // reconstruction resolves positions still masked at t(0)
    for i in 0..len {
        if onsets[i] == 0 {
            debug_assert!(mask >> i & 1 == 1);
            acc += tables.log_conf[mask][i];
        }
    }
    acc
}

/// Exact likelihood of every endpoint in `V^L`; the probabilities sum to one.
pub fn exact_likelihood_all(
    model: &ModelBundle,
    rev: &SchedulerSpec,
    grid: &TimeGrid,
    len: usize,
) -> Result<Vec<(Sequence, f64)>> {
    let vocab = model.vocab();
    let v = vocab.size();
    let count = (v as u128).pow(len as u32);
    if count > 1 << 20 {
        return Err(Error::SizeGuard(format!("too many endpoints: {v}^{len}")));
    }
    (0..count as usize)
        .into_par_iter()
        .map(|code| {
            let mut c = code;
            let tokens: Vec<usize> = (0..len)
                .map(|_| {
                    let t = c % v;
                    c /= v;
                    t
                })
                .collect();
            let x = Sequence::new(tokens, &vocab)?;
            let p = exact_likelihood(&x, model, rev, grid)?;
            Ok((x, p))
        })
        .collect()
}

/// Negative log-likelihood of the autoregressive factorization in the given
/// generation order: each factor conditions on the already-revealed prefix,
/// everything else masked.
pub fn arm_factorized_nll(model: &ModelBundle, x: &Sequence, order: &[usize]) -> Result<f64> {
    let vocab = model.vocab();
    let len = x.len();
    let mut z = MaskedSequence::all_masked(len, &vocab);
    let mut nll = 0.0;
    for &pos in order {
        let rows = model.denoise(&z);
        let conf = rows[pos][x.get(pos)];
        if conf == 0.0 {
            return Err(Error::InfiniteLoss(format!(
                "zero factor at position {pos}"
            )));
        }
        nll -= conf.ln();
        z.set(pos, x.get(pos));
    }
    Ok(nll)
}

fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xb = points.iter().map(|p| p.0).sum::<f64>() / n;
    let yb = points.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = points.iter().map(|p| (p.0 - xb) * (p.1 - yb)).sum();
    let den: f64 = points.iter().map(|p| (p.0 - xb) * (p.0 - xb)).sum();
    num / den
}

/// Convergence of the windowed scheduler to the autoregressive product: for
/// each epsilon on the ladder, compares the exact path-sum likelihood under
/// the matched windowed scheduler against the factorized product, then fits
/// the log-log slope (first order in epsilon).
pub fn check_arm_limit(
    model: &ModelBundle,
    x: &Sequence,
    epsilons: &[f64],
    grid: &TimeGrid,
    order: &[usize],
) -> Result<PropositionReport> {
    let len = x.len();
    // every window must hold at least 4 grid indices
    let per_window = (grid.steps() + 1) / len;
    if per_window < 4 {
        return Err(Error::Invalid(format!(
            "grid too coarse: {} indices per window",
            per_window
        )));
    }
    let product = (-arm_factorized_nll(model, x, order)?).exp();
    let mut points = Vec::new();
    for &eps in epsilons {
        let spec = SchedulerSpec::arm_ordered(len, eps, order.to_vec())?;
        let p = exact_likelihood(x, model, &spec, grid)?;
        points.push((eps, (p - product).abs()));
    }
    let monotone = points.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-15);
    let slope = fit_slope(
        &points
            .iter()
            .map(|&(e, d)| (e.ln(), d.max(1e-300).ln()))
            .collect::<Vec<_>>(),
    );
    let slope_ok = (slope - 1.0).abs() <= 0.3;
    let max_dev = points.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(PropositionReport {
        name: "arm-limit".into(),
        instances: epsilons.len(),
        max_deviation: max_dev,
        per_epsilon: points,
        slope: Some(slope),
        tolerance: 0.3,
        pass: monotone && slope_ok,
        details: format!("order {order:?}, product {product:.6e}, monotone {monotone}"),
    })
}

/// Matched linear schedulers: the velocity component vanishes identically and
/// the main component equals the independently coded 1/t-weighted masked
/// cross-entropy, sample by sample.
pub fn check_mdlm_reduction(
    model: &ModelBundle,
    x: &Sequence,
    n: usize,
    rng: &RandomStream,
) -> Result<PropositionReport> {
    let vocab = model.vocab();
    let mut max_rel = 0.0f64;
    let mut velocity_hits = 0usize;
    for k in 0..n {
        let draw = rng.substream("mdlm-sample", k as u64);
        let t = draw.substream("t", 0).next_open_closed(T_MIN, 1.0);
        let z = crate::diffusion::forward_sample(x, &SchedulerSpec::Linear, t, &draw, &vocab)?;
        let rows = model.denoise(&z);
        let evals = SchedulerSpec::Linear.eval_all(x.len(), SchedulerContext::None, t)?;
        let vels: Vec<f64> = evals.iter().map(|e| e.velocity).collect();
        let b = loss_breakdown(&z, x, &rows, &vels, &vels, t)?;
        if b.l_velocity != 0.0 {
            velocity_hits += 1;
        }
        // independent coding of the masked-diffusion loss: (1/t) * masked CE
        let mut independent = 0.0;
        for i in 0..x.len() {
            if z.is_masked(i) {
                independent += -(rows[i][x.get(i)].ln()) / t;
            }
        }
        let rel = (b.l_main - independent).abs() / b.l_main.abs().max(independent.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    let pass = velocity_hits == 0 && max_rel <= 1e-12;
    Ok(PropositionReport {
        name: "mdlm-reduction".into(),
        instances: n,
        max_deviation: max_rel,
        per_epsilon: Vec::new(),
        slope: None,
        tolerance: 1e-12,
        pass,
        details: format!("nonzero velocity terms: {velocity_hits}"),
    })
}

/// The vocabulary-wise scheduler identity: the velocity-form integrand with
/// reweighted prediction equals the native vocabulary-wise integrand exactly.
pub fn check_genmd4_equivalence(
    vocab_exponents: &[f64],
    denoiser_row: &[f64],
    x_token: usize,
    t: f64,
) -> Result<f64> {
    let v = vocab_exponents.len();
    if vocab_exponents.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Invalid("vocabulary velocities must be positive".into()));
    }
    if denoiser_row.len() != v + 1 || denoiser_row[v] != 0.0 {
        return Err(Error::Invalid(
            "denoiser row must cover V+1 symbols with zero mask mass".into(),
        ));
    }
    let conf = denoiser_row[x_token];
    // vocabulary-wise velocities at time t
    let a_gen: Vec<f64> = vocab_exponents.iter().map(|&w| w / t).collect();
    // native integrand: <-A_gen, log(conf) x + x - x_theta>
    let dot_pred: f64 = (0..v).map(|k| a_gen[k] * denoiser_row[k]).sum();
    let native = -a_gen[x_token] * conf.ln() - a_gen[x_token] + dot_pred;
    // velocity-form integrand under the reparametrization
    let a = a_gen[x_token];
    let a_hat = dot_pred;
    let conf_tilde = a_gen[x_token] * conf / a_hat;
    let (main, velocity) = loss_terms(a, a_hat, conf_tilde)?;
    let reparam = main + velocity;
    Ok((native - reparam).abs())
}

/// Randomized sweep of [`check_genmd4_equivalence`].
pub fn genmd4_equivalence_report(trials: usize, rng: &RandomStream) -> Result<PropositionReport> {
    let mut max_dev = 0.0f64;
    for k in 0..trials {
        let mut r = rng.substream("genmd4", k as u64);
        let v = 2 + (r.next_u64() % 4) as usize;
        let exps: Vec<f64> = (0..v).map(|_| 0.2 + 2.8 * r.next_f64()).collect();
        let mut row: Vec<f64> = (0..v).map(|_| 0.05 + r.next_f64()).collect();
        let sum: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= sum;
        }
        row.push(0.0);
        let x_token = (r.next_u64() % v as u64) as usize;
        let t = 0.1 + 0.9 * r.next_f64();
        // the reweighted prediction keeps zero mask mass by construction
        let dev = check_genmd4_equivalence(&exps, &row, x_token, t)?;
        max_dev = max_dev.max(dev);
    }
    Ok(PropositionReport::simple(
        "genmd4-identity",
        trials,
        max_dev,
        1e-12,
        String::new(),
    ))
}

/// Flattened parameter gradient of one scheduler head.
fn head_param_grad_flat(head: &HeadParams, features: &[f64], len: usize, d_e: &[f64], c2: f64) -> Vec<f64> {
    let (scores, cache) = head_forward(head, features, len);
    let d_norm: Vec<f64> = d_e.iter().map(|&g| g * c2).collect();
    let d_scores = norm_sig_backward(&scores, &d_norm);
    let mut grads = head.zeros_like();
    crate::model::heads::head_backward(head, &cache, &d_scores, &mut grads);
    flatten_head(&grads)
}

fn flatten_head(h: &HeadParams) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(&h.ln.gain);
    out.extend_from_slice(&h.ln.bias);
    out.extend_from_slice(&h.attn.wq);
    out.extend_from_slice(&h.attn.wk);
    out.extend_from_slice(&h.attn.wv);
    out.extend_from_slice(&h.attn.wo);
    out.extend_from_slice(&h.w_out);
    out.push(h.b_out);
    out
}

/// Score-function gradient check for the two-sample leave-one-out estimator:
/// the enumerated exact gradient of `E_q[detached loss]` with respect to the
/// forward-head parameters against the empirical mean of the paired
/// surrogate gradient, normalized by the empirical standard error.
pub fn check_rloo_unbiased(
    x: &Sequence,
    model: &ModelBundle,
    t: f64,
    n_pairs: usize,
    rng: &RandomStream,
) -> Result<PropositionReport> {
    let heads = model
        .heads_view()
        .ok_or_else(|| Error::SchedulerContext("rloo check needs scheduler heads".into()))?;
    let vocab = model.vocab();
    let len = x.len();
    let feats_x = model.extract_features(x.tokens());
    let (phi_scores, _) = head_forward(&heads.phi, &feats_x.data, len);
    let e_phi: Vec<f64> = norm_sig(&phi_scores).iter().map(|n| heads.c1 + heads.c2 * n).collect();
    let alphas: Vec<f64> = e_phi.iter().map(|&e| 1.0 - t.powf(e)).collect();
    let vel_fwd: Vec<f64> = e_phi.iter().map(|&e| e / t).collect();

    // d(e_i)/d(phi) rows of the Jacobian, one backward pass per position
    let jac: Vec<Vec<f64>> = (0..len)
        .map(|i| {
            let mut d_e = vec![0.0; len];
            d_e[i] = 1.0;
            head_param_grad_flat(&heads.phi, &feats_x.data, len, &d_e, heads.c2)
        })
        .collect();
    let n_params = jac[0].len();

    // per-state quantities over the masked set of x
    let states = enumerate_masked_set(x, &vocab)?;
    let mut q = Vec::with_capacity(states.len());
    let mut losses = Vec::with_capacity(states.len());
    let mut glogq: Vec<Vec<f64>> = Vec::with_capacity(states.len());
    for z in &states {
        let mut logq = 0.0;
        let mut g = vec![0.0; n_params];
        for i in 0..len {
            let (dlq_dalpha, lq) = if z.is_masked(i) {
                (-1.0 / (1.0 - alphas[i]), (1.0 - alphas[i]).ln())
            } else {
                (1.0 / alphas[i], alphas[i].ln())
            };
            logq += lq;
            let dalpha_de = -(1.0 - alphas[i]) * t.ln();
            let w = dlq_dalpha * dalpha_de;
            for (gp, jp) in g.iter_mut().zip(&jac[i]) {
                *gp += w * jp;
            }
        }
        let rows = model.denoise(z);
        let feats_z = model.extract_features(z.tokens());
        let e_psi = heads.exponents(HeadRole::Reverse, &feats_z);
        let vel_rev: Vec<f64> = e_psi.iter().map(|&e| e / t).collect();
        let b = loss_breakdown(z, x, &rows, &vel_fwd, &vel_rev, t)?;
        q.push(logq.exp());
        losses.push(b.total);
        glogq.push(g);
    }
    let qsum: f64 = q.iter().sum();
    if (qsum - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("state weights sum to {qsum}")));
    }
    // exact score-function gradient
    let mut exact = vec![0.0; n_params];
    for s in 0..states.len() {
        for p in 0..n_params {
            exact[p] += q[s] * losses[s] * glogq[s][p];
        }
    }

    // empirical mean of the paired-surrogate gradient
    let mut mean = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    let state_of = |r: &mut RandomStream| -> usize {
        // same per-position coupling as the forward sampler
        let mut bits = 0usize;
        for i in 0..len {
            if r.substream("pos", i as u64).next_f64() >= alphas[i] {
                bits |= 1 << i;
            }
        }
        bits
    };
    for k in 0..n_pairs {
        let pair = rng.substream("pair", k as u64);
        let s1 = state_of(&mut pair.substream("corrupt", 1));
        let s2 = state_of(&mut pair.substream("corrupt", 2));
        let dl = losses[s1] - losses[s2];
        let kn = k as f64 + 1.0;
        for p in 0..n_params {
            // gradient of 0.5 (logq1 - logq2)(sgd L1 - sgd L2)
            let g = 0.5 * (glogq[s1][p] - glogq[s2][p]) * dl;
            let delta = g - mean[p];
            mean[p] += delta / kn;
            m2[p] += delta * (g - mean[p]);
        }
    }
    let mut worst = 0.0f64;
    for p in 0..n_params {
        let se = (m2[p] / (n_pairs as f64 - 1.0) / n_pairs as f64).sqrt();
        let dev = (mean[p] - exact[p]).abs();
        let normalized = if se > 0.0 {
            dev / se
        } else if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(normalized);
    }
    Ok(PropositionReport::simple(
        "rloo-unbiased",
        n_pairs,
        worst,
        4.0,
        format!("{n_params} coordinates"),
    ))
}

/// Fraction of per-position mask onsets falling outside their block window
/// under the blockwise scheduler; first order in epsilon.
pub fn check_bd3lm_windows(
    epsilon: f64,
    len: usize,
    blocks: usize,
    grid: &TimeGrid,
    n: usize,
    rng: &RandomStream,
) -> Result<PropositionReport> {
    let spec = SchedulerSpec::blockwise(len, blocks, epsilon)?;
    let per_window = (grid.steps() + 1) / blocks;
    if per_window < 4 {
        return Err(Error::Invalid(format!(
            "grid too coarse: {per_window} indices per block window"
        )));
    }
    let block_len = len / blocks;
    let steps = grid.steps();
    // alpha is context-free; tabulate per position and grid index
    let mut alpha = vec![vec![0.0; steps + 1]; len];
    for (i, row) in alpha.iter_mut().enumerate() {
        for (tau, cell) in row.iter_mut().enumerate() {
            *cell = spec
                .eval(i, SchedulerContext::None, grid.t_of(tau))?
                .alpha;
        }
    }
    let mut violations = 0usize;
    for k in 0..n {
        let draw = rng.substream("traj", k as u64);
        for i in 0..len {
            let u = draw.substream("pos", i as u64).next_f64();
            // onset: first grid index where the position is masked
            let mut onset = steps;
            for tau in 0..=steps {
                if u >= alpha[i][tau] {
                    onset = tau;
                    break;
                }
            }
            let b = i / block_len + 1;
            let w_start = 1.0 - b as f64 / blocks as f64;
            let w_end = 1.0 - (b as f64 - 1.0) / blocks as f64;
            // crossing interval (t(onset-1), t(onset)]; outside when disjoint
            let hi = grid.t_of(onset);
            let lo = if onset == 0 { 0.0 } else { grid.t_of(onset - 1) };
            if hi < w_start || lo > w_end {
                violations += 1;
            }
        }
    }
    let fraction = violations as f64 / (n * len) as f64;
    Ok(PropositionReport {
        name: "bd3lm-windows".into(),
        instances: n,
        max_deviation: fraction,
        per_epsilon: vec![(epsilon, fraction)],
        slope: None,
        tolerance: 2.0 * len as f64 * epsilon,
        pass: fraction <= 2.0 * len as f64 * epsilon,
        details: format!("epsilon {epsilon}, blocks {blocks}"),
    })
}

/// Ladder of [`check_bd3lm_windows`] runs with a fitted slope in epsilon.
pub fn bd3lm_window_ladder(
    epsilons: &[f64],
    len: usize,
    blocks: usize,
    grid: &TimeGrid,
    n: usize,
    rng: &RandomStream,
) -> Result<PropositionReport> {
    let mut points = Vec::new();
    for (k, &eps) in epsilons.iter().enumerate() {
        let rep = check_bd3lm_windows(eps, len, blocks, grid, n, &rng.substream("ladder", k as u64))?;
        points.push((eps, rep.per_epsilon[0].1));
    }
    let slope = fit_slope(
        &points
            .iter()
            .map(|&(e, f)| (e.ln(), f.max(1e-12).ln()))
            .collect::<Vec<_>>(),
    );
    let monotone = points.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12);
    let pass = monotone && (slope - 1.0).abs() <= 0.3;
    Ok(PropositionReport {
        name: "bd3lm-window-ladder".into(),
        instances: epsilons.len() * n,
        max_deviation: points.iter().map(|p| p.1).fold(0.0, f64::max),
        per_epsilon: points,
        slope: Some(slope),
        tolerance: 0.3,
        pass,
        details: format!("len {len}, blocks {blocks}"),
    })
}
