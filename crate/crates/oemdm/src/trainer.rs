//! Joint training of the denoiser and both scheduler heads: two corruptions
//! per text, the averaged bound plus the leave-one-out surrogate, one AdamW
//! update over the two learning-rate groups, streamed diagnostics, and a
//! binary checkpoint format with lossless resume.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core::{RandomStream, Sequence};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::grad::{objective_with_gradient, CONFIDENCE_FLOOR};
use crate::model::{
    DropoutCtx, HeadRole, ModelBundle, ModelConfig, NeuralModel, ParamGroup,
};
use crate::objective::nelbo_mc;
use crate::scheduler::SchedulerSpec;

/// Whether the run trains the learned-order model or the fixed-schedule
/// baseline (constant exponent, frozen heads).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Lomdm,
    Mdlm,
}

#[derive(Clone, Debug)]
pub struct TrainingConfig {
    pub model: ModelConfig,
    /// Total batch size B; each step consumes B/2 texts with two corruptions each.
    pub batch: usize,
    pub steps: u64,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub t_min: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Monte Carlo samples per held-out sequence during evaluation.
    pub eval_samples: usize,
    /// Held-out sequences averaged during evaluation.
    pub eval_sequences: usize,
    pub mode: TrainMode,
}

impl TrainingConfig {
    pub fn desk_default(model: ModelConfig, seed: u64) -> Self {
        Self {
            model,
            batch: 16,
            steps: 1000,
            lr_backbone: 3e-4,
            lr_heads: 1e-5,
            warmup: 100,
            weight_decay: 0.0,
            t_min: 1e-4,
            seed,
            eval_every: 200,
            checkpoint_every: 0,
            eval_samples: 16,
            eval_sequences: 64,
            mode: TrainMode::Lomdm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 || self.batch % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size must be even and positive, got {}",
                self.batch
            )));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config(format!("t_min {} outside (0,1)", self.t_min)));
        }
        if self.mode == TrainMode::Mdlm && self.model.c2 != 0.0 {
            return Err(Error::Config(
                "the fixed-schedule baseline requires c2 = 0".into(),
            ));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam over the tensor walk of the model.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub updates: u64,
}

impl AdamState {
    pub fn new(model: &NeuralModel) -> Self {
        let mut m = Vec::new();
        model.for_each_tensor(|_, _, _, vals| m.push(vec![0.0; vals.len()]));
        Self {
            v: m.clone(),
            m,
            updates: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update(
    model: &mut NeuralModel,
    grads: &NeuralModel,
    state: &mut AdamState,
    cfg: &TrainingConfig,
) {
    state.updates += 1;
    let warm = if cfg.warmup == 0 {
        1.0
    } else {
        (state.updates as f64 / cfg.warmup as f64).min(1.0)
    };
    let bias1 = 1.0 - ADAM_BETA1.powi(state.updates as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(state.updates as i32);
    let mut flat_grads: Vec<Vec<f64>> = Vec::new();
    grads.for_each_tensor(|_, _, _, vals| flat_grads.push(vals.to_vec()));
    let heads_frozen = cfg.mode == TrainMode::Mdlm;
    let mut ti = 0;
    model.for_each_tensor_mut(|_, group, vals| {
        let lr = warm
            * match group {
                ParamGroup::Backbone => cfg.lr_backbone,
                ParamGroup::Phi | ParamGroup::Psi => {
                    if heads_frozen {
                        0.0
                    } else {
                        cfg.lr_heads
                    }
                }
            };
        let g = &flat_grads[ti];
        let m = &mut state.m[ti];
        let v = &mut state.v[ti];
        for k in 0..vals.len() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let mhat = m[k] / bias1;
            let vhat = v[k] / bias2;
            vals[k] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + cfg.weight_decay * vals[k]);
        }
        ti += 1;
    });
}

/// One line of the metrics stream (JSON-lines compatible). Correlations are
/// reported only over masked positions and stay `null` when undefined.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub mean_total: f64,
    pub mean_main: f64,
    pub mean_velocity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_nelbo_per_token: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corr_fwd_conf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corr_rev_conf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corr_fwd_rev: Option<f64>,
    pub wall_clock_s: f64,
}

/// Mutable training state: parameters, optimizer moments, step counter.
pub struct TrainerState {
    pub model: NeuralModel,
    pub adam: AdamState,
    pub step: u64,
    pub cfg: TrainingConfig,
    started: Instant,
}

impl TrainerState {
    pub fn init(cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let model = NeuralModel::init(cfg.model.clone(), cfg.seed)?;
        let adam = AdamState::new(&model);
        Ok(Self {
            model,
            adam,
            step: 0,
            cfg,
            started: Instant::now(),
        })
    }
}

/// One optimizer step over `B/2` texts. Per text: sample `t`, corrupt twice
/// under the live forward scheduler, evaluate the surrogate with one cached
/// backbone pass per corruption, and accumulate exact gradients; the batch
/// gradient is the mean, reduced in index order.
pub fn train_step(state: &mut TrainerState, batch: &[Sequence]) -> Result<MetricsRecord> {
    let cfg = &state.cfg;
    let step = state.step;
    let root = RandomStream::new(cfg.seed).substream("train-step", step);
    let dropout_rate = cfg.model.dropout;
    let results: Vec<Result<(crate::model::grad::SurrogateEval, NeuralModel)>> = batch
        .par_iter()
        .enumerate()
        .map(|(idx, x)| {
            let text_rng = root.substream("text", idx as u64);
            let t = text_rng
                .substream("t", 0)
                .next_open_closed(cfg.t_min, 1.0);
            let mut grads = state.model.zeros_like();
            let mut dropout_ctx = if dropout_rate > 0.0 {
                Some(DropoutCtx {
                    rate: dropout_rate,
                    rng: text_rng.substream("dropout", 0),
                })
            } else {
                None
            };
            let eval = objective_with_gradient(
                &state.model,
                x,
                t,
                &text_rng,
                dropout_ctx.as_mut(),
                &mut grads,
            )?;
            Ok((eval, grads))
        })
        .collect();

    let mut total = 0.0;
    let mut main = 0.0;
    let mut velocity = 0.0;
    let mut batch_grads = state.model.zeros_like();
    let n = batch.len() as f64;
    for r in results {
        let (eval, grads) = r.map_err(|e| {
            Error::NonFinite(format!("training step {step} aborted: {e}"))
        })?;
        total += eval.objective / n;
        main += (eval.breakdowns[0].l_main + eval.breakdowns[1].l_main) / (2.0 * n);
        velocity += (eval.breakdowns[0].l_velocity + eval.breakdowns[1].l_velocity) / (2.0 * n);
        let mut gvecs: Vec<Vec<f64>> = Vec::new();
        grads.for_each_tensor(|_, _, _, vals| gvecs.push(vals.to_vec()));
        let mut ti = 0;
        batch_grads.for_each_tensor_mut(|_, _, vals| {
            for (a, b) in vals.iter_mut().zip(&gvecs[ti]) {
                *a += b / n;
            }
            ti += 1;
        });
    }
    if !(total.is_finite() && main.is_finite() && velocity.is_finite()) {
        return Err(Error::NonFinite(format!(
            "training step {step}: loss total={total} main={main} velocity={velocity}"
        )));
    }
    adam_update(&mut state.model, &batch_grads, &mut state.adam, &state.cfg);
    state.step += 1;
    Ok(MetricsRecord {
        step: state.step,
        mean_total: total,
        mean_main: main,
        mean_velocity: velocity,
        val_nelbo_per_token: None,
        ppl_bound: None,
        corr_fwd_conf: None,
        corr_rev_conf: None,
        corr_fwd_rev: None,
        wall_clock_s: state.started.elapsed().as_secs_f64(),
    })
}

/// Evaluation summary on held-out data.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub per_token_nelbo: f64,
    pub stderr: f64,
    pub ppl_bound: f64,
    pub sequences: usize,
}

/// Bound estimate on held-out sequences with fixed evaluation seeds: averages
/// the Monte Carlo bound per token; the perplexity bound is its exponential.
pub fn evaluate(
    model: &NeuralModel,
    held: &Corpus,
    n_mc: usize,
    n_sequences: usize,
    seed: u64,
) -> Result<EvalReport> {
    let bundle = Arc::new(ModelBundle::Neural(model.clone()));
    let fwd = SchedulerSpec::learned(bundle.clone(), HeadRole::Forward)?;
    let rev = SchedulerSpec::learned(bundle.clone(), HeadRole::Reverse)?;
    let root = RandomStream::new(seed).substream("validation", 0);
    let take = n_sequences.min(held.sequences.len());
    if take == 0 {
        return Err(Error::Corpus("no held-out sequences".into()));
    }
    let results: Vec<Result<(f64, f64)>> = held.sequences[..take]
        .par_iter()
        .enumerate()
        .map(|(i, x)| nelbo_mc(x, &bundle, &fwd, &rev, n_mc, &root.substream("seq", i as u64)))
        .collect();
    let mut sum = 0.0;
    let mut var = 0.0;
    let mut tokens = 0.0;
    for r in results {
        let (est, se) = r?;
        sum += est;
        var += se * se;
        tokens += held.length as f64;
    }
    let per_token = sum / tokens;
    let stderr = var.sqrt() / tokens;
    Ok(EvalReport {
        per_token_nelbo: per_token,
        stderr,
        ppl_bound: per_token.exp(),
        sequences: take,
    })
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    // exactly constant inputs have no defined correlation
    if xs.iter().all(|&x| x == xs[0]) || ys.iter().all(|&y| y == ys[0]) {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Pearson correlations among forward velocity, reverse velocity, and
/// denoiser confidence on the true token, pooled over the masked positions
/// of freshly corrupted batch texts. Undefined correlations (fewer than two
/// masked positions, zero variance) are reported as absent, not zero.
pub fn correlation_diagnostics(
    model: &NeuralModel,
    batch: &[Sequence],
    t_min: f64,
    rng: &RandomStream,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let vocab = model.vocab();
    let mut vf = Vec::new();
    let mut vr = Vec::new();
    let mut conf = Vec::new();
    // one shared diffusion time for the whole diagnostic batch, so the
    // velocities compare positions rather than time draws
    let t = rng.substream("t", 0).next_open_closed(t_min, 1.0);
    for (i, x) in batch.iter().enumerate() {
        let draw = rng.substream("corr-text", i as u64);
        let feats_x = model.forward_full(
            &crate::core::MaskedSequence::from_clean(x, &vocab),
            None,
        );
        let heads = model.heads_view();
        let e_phi = heads.exponents(HeadRole::Forward, &feats_x.1);
        let alphas: Vec<f64> = e_phi.iter().map(|&e| 1.0 - t.powf(e)).collect();
        let mut tokens = Vec::with_capacity(x.len());
        for p in 0..x.len() {
            let u = draw.substream("pos", p as u64).next_f64();
            tokens.push(if u < alphas[p] { x.get(p) } else { vocab.mask_id() });
        }
        let z = crate::core::MaskedSequence::new(tokens, &vocab)?;
        let (rows, feats_z, _) = model.forward_full(&z, None);
        let e_psi = heads.exponents(HeadRole::Reverse, &feats_z);
        for p in 0..x.len() {
            if z.is_masked(p) {
                vf.push(e_phi[p] / t);
                vr.push(e_psi[p] / t);
                conf.push(rows[p][x.get(p)].max(CONFIDENCE_FLOOR));
            }
        }
    }
    Ok((
        pearson(&vf, &conf),
        pearson(&vr, &conf),
        pearson(&vf, &vr),
    ))
}

/// Full training outcome: final state plus every emitted metrics record.
pub struct TrainOutcome {
    pub state: TrainerState,
    pub metrics: Vec<MetricsRecord>,
}

/// Runs the configured number of steps with linear warmup, emitting metrics
/// (and optionally JSON lines into `sink`, checkpoints into `ckpt_dir`) at
/// the configured cadences. Fully determined by `(config, corpora)`.
pub fn train(
    cfg: TrainingConfig,
    train_corpus: &Corpus,
    held: &Corpus,
    mut sink: Option<&mut dyn Write>,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_corpus.vocab.size() != cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary {} does not match model vocabulary {}",
            train_corpus.vocab.size(),
            cfg.model.vocab_size
        )));
    }
    if train_corpus.length > cfg.model.max_len {
        return Err(Error::Config(format!(
            "corpus length {} exceeds model max_len {}",
            train_corpus.length, cfg.model.max_len
        )));
    }
    let mut state = TrainerState::init(cfg)?;
    resume_loop(&mut state, train_corpus, held, &mut sink, ckpt_dir)
}

/// Continues training from an existing state to `cfg.steps`; shared by fresh
/// runs and checkpoint resumes so both take identical step trajectories.
pub fn resume_loop(
    state: &mut TrainerState,
    train_corpus: &Corpus,
    held: &Corpus,
    sink: &mut Option<&mut dyn Write>,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut metrics = Vec::new();
    let texts_per_step = state.cfg.batch / 2;
    let selection_root = RandomStream::new(state.cfg.seed).substream("batch-select", 0);
    while state.step < state.cfg.steps {
        let step = state.step;
        let mut pick = selection_root.substream("step", step);
        let batch: Vec<Sequence> = (0..texts_per_step)
            .map(|_| {
                let idx = (pick.next_u64() % train_corpus.sequences.len() as u64) as usize;
                train_corpus.sequences[idx].clone()
            })
            .collect();
        let mut record = train_step(state, &batch)?;
        let due = |every: u64| every > 0 && state.step % every == 0;
        if due(state.cfg.eval_every) || state.step == state.cfg.steps {
            let report = evaluate(
                &state.model,
                held,
                state.cfg.eval_samples,
                state.cfg.eval_sequences,
                state.cfg.seed,
            )?;
            record.val_nelbo_per_token = Some(report.per_token_nelbo);
            record.ppl_bound = Some(report.ppl_bound);
            let corr_rng = RandomStream::new(state.cfg.seed).substream("corr", state.step);
            let (a, b, c) =
                correlation_diagnostics(&state.model, &batch, state.cfg.t_min, &corr_rng)?;
            record.corr_fwd_conf = a;
            record.corr_rev_conf = b;
            record.corr_fwd_rev = c;
        }
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            writeln!(w)?;
        }
        if due(state.cfg.checkpoint_every) {
            if let Some(dir) = ckpt_dir {
                let path = dir.join(format!("step-{:06}.ckpt", state.step));
                save_checkpoint(&path, state, train_corpus)?;
            }
        }
        metrics.push(record);
    }
    if let Some(dir) = ckpt_dir {
        let path = dir.join("final.ckpt");
        save_checkpoint(&path, state, train_corpus)?;
    }
    Ok(TrainOutcome {
        state: TrainerState {
            model: state.model.clone(),
            adam: state.adam.clone(),
            step: state.step,
            cfg: state.cfg.clone(),
            started: state.started,
        },
        metrics,
    })
}

const CKPT_MAGIC: &[u8; 6] = b"OEMDM1";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    seed: u64,
    vocab_size: usize,
    max_len: usize,
    d_model: usize,
    n_blocks: usize,
    n_heads: usize,
    ffn_mult: usize,
    c1: f64,
    c2: f64,
    dropout: f64,
    charmap: Vec<char>,
    pad_id: Option<usize>,
    mode: TrainMode,
}

fn write_array(out: &mut Vec<u8>, name: &str, dims: &[usize], vals: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(8); // 64-bit payload
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes parameters, optimizer moments, and run metadata. The byte
/// layout is fixed, so save -> load -> save reproduces the file exactly.
pub fn save_checkpoint(path: &Path, state: &TrainerState, corpus: &Corpus) -> Result<()> {
    let meta = CheckpointMeta {
        step: state.step,
        seed: state.cfg.seed,
        vocab_size: state.cfg.model.vocab_size,
        max_len: state.cfg.model.max_len,
        d_model: state.cfg.model.d_model,
        n_blocks: state.cfg.model.n_blocks,
        n_heads: state.cfg.model.n_heads,
        ffn_mult: state.cfg.model.ffn_mult,
        c1: state.cfg.model.c1,
        c2: state.cfg.model.c2,
        dropout: state.cfg.model.dropout,
        charmap: corpus.charmap.clone(),
        pad_id: corpus.pad_id,
        mode: state.cfg.mode,
    };
    let meta_json =
        serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    state.model.for_each_tensor(|name, _, dims, vals| {
        arrays.push((name.to_string(), dims.to_vec(), vals.to_vec()));
    });
    let mut ti = 0;
    state.model.for_each_tensor(|name, _, dims, _| {
        arrays.push((
            format!("adam.m.{name}"),
            dims.to_vec(),
            state.adam.m[ti].clone(),
        ));
        arrays.push((
            format!("adam.v.{name}"),
            dims.to_vec(),
            state.adam.v[ti].clone(),
        ));
        ti += 1;
    });
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, dims, vals) in &arrays {
        write_array(&mut out, name, dims, vals);
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Restores a trainer state (parameters, moments, step) and the decode
/// charmap from a checkpoint file.
pub fn load_checkpoint(path: &Path, base_cfg: Option<TrainingConfig>) -> Result<(TrainerState, Vec<char>, Option<usize>)> {
    let buf = std::fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(6, "magic")? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = cur.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = cur.u32("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let model_cfg = ModelConfig {
        vocab_size: meta.vocab_size,
        max_len: meta.max_len,
        d_model: meta.d_model,
        n_blocks: meta.n_blocks,
        n_heads: meta.n_heads,
        ffn_mult: meta.ffn_mult,
        c1: meta.c1,
        c2: meta.c2,
        dropout: meta.dropout,
    };
    let mut cfg = base_cfg.unwrap_or_else(|| TrainingConfig::desk_default(model_cfg.clone(), meta.seed));
    cfg.model = model_cfg;
    cfg.seed = meta.seed;
    cfg.mode = meta.mode;
    let mut model = NeuralModel::init(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&model);

    let n_arrays = cur.u32("array count")? as usize;
    let mut loaded: std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)> =
        std::collections::BTreeMap::new();
    for _ in 0..n_arrays {
        let name_len = cur.u32("name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64("dim")? as usize);
        }
        let flag = cur.take(1, "width flag")?[0];
        if flag != 8 {
            return Err(Error::Checkpoint(format!(
                "array {name}: unsupported width flag {flag}"
            )));
        }
        let count: usize = dims.iter().product();
        let raw = cur.take(count * 8, &format!("payload of {name}"))?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.insert(name, (dims, vals));
    }
    let mut missing: Vec<String> = Vec::new();
    model.for_each_tensor_mut(|name, _, vals| {
        match loaded.get(name) {
            Some((_, data)) if data.len() == vals.len() => vals.copy_from_slice(data),
            Some(_) => missing.push(format!("{name} (shape mismatch)")),
            None => missing.push(name.to_string()),
        }
    });
    let mut ti = 0;
    model.for_each_tensor(|name, _, _, vals| {
        for (prefix, target) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
            let key = format!("{prefix}{name}");
            match loaded.get(&key) {
                Some((_, data)) if data.len() == vals.len() => target[ti].copy_from_slice(data),
                Some(_) => missing.push(format!("{key} (shape mismatch)")),
                None => missing.push(key),
            }
        }
        ti += 1;
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "missing or mismatched arrays: {}",
            missing.join(", ")
        )));
    }
    adam.updates = meta.step;
    Ok((
        TrainerState {
            model,
            adam,
            step: meta.step,
            cfg,
            started: Instant::now(),
        },
        meta.charmap,
        meta.pad_id,
    ))
}

/// Reads a checkpoint and re-serializes it; used by the round-trip checks.
pub fn checkpoint_roundtrip_bytes(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut original = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut original)?;
    let (state, charmap, pad_id) = load_checkpoint(path, None)?;
    let corpus = Corpus {
        sequences: Vec::new(),
        vocab: state.model.vocab(),
        length: state.cfg.model.max_len,
        charmap,
        pad_id,
    };
    let tmp = path.with_extension("resaved");
    save_checkpoint(&tmp, &state, &corpus)?;
    let mut resaved = Vec::new();
    std::fs::File::open(&tmp)?.read_to_end(&mut resaved)?;
    std::fs::remove_file(&tmp)?;
    Ok((original, resaved))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::grammar_corpus;

    fn tiny_cfg(seed: u64, steps: u64, mode: TrainMode) -> TrainingConfig {
        let (c1, c2) = match mode {
            TrainMode::Lomdm => (0.7, 0.65),
            TrainMode::Mdlm => (1.0, 0.0),
        };
        let model = ModelConfig {
            vocab_size: 12,
            max_len: 8,
            d_model: 16,
            n_blocks: 1,
            n_heads: 2,
            ffn_mult: 2,
            c1,
            c2,
            dropout: 0.0,
        };
        TrainingConfig {
            model,
            batch: 8,
            steps,
            lr_backbone: 3e-3,
            lr_heads: 3e-3,
            warmup: 10,
            weight_decay: 0.0,
            t_min: 1e-4,
            seed,
            eval_every: 0,
            checkpoint_every: 0,
            eval_samples: 8,
            eval_sequences: 16,
            mode,
        }
    }

    fn corpora(seed: u64) -> (Corpus, Corpus) {
        let c = grammar_corpus("kv8", 256, 8, seed).unwrap();
        c.split_holdout(32).unwrap()
    }

    #[test]
    fn zero_steps_checkpoint_equals_init() {
        let cfg = tiny_cfg(3, 0, TrainMode::Lomdm);
        let (train_c, held) = corpora(1);
        let out = train(cfg.clone(), &train_c, &held, None, None).unwrap();
        let fresh = NeuralModel::init(cfg.model, cfg.seed).unwrap();
        let mut same = true;
        let mut flat: Vec<f64> = Vec::new();
        fresh.for_each_tensor(|_, _, _, v| flat.extend_from_slice(v));
        let mut i = 0;
        out.state.model.for_each_tensor(|_, _, _, v| {
            for &a in v {
                if a.to_bits() != flat[i].to_bits() {
                    same = false;
                }
                i += 1;
            }
        });
        assert!(same);
    }

    #[test]
    fn deterministic_metrics_across_runs() {
        let (train_c, held) = corpora(2);
        let a = train(tiny_cfg(7, 5, TrainMode::Lomdm), &train_c, &held, None, None).unwrap();
        let b = train(tiny_cfg(7, 5, TrainMode::Lomdm), &train_c, &held, None, None).unwrap();
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ra.mean_total.to_bits(), rb.mean_total.to_bits());
            assert_eq!(ra.mean_velocity.to_bits(), rb.mean_velocity.to_bits());
        }
    }

    #[test]
    fn step_zero_velocity_loss_is_zero() {
        // zero-initialized head output layers: both exponents equal c1
        let (train_c, held) = corpora(3);
        let out = train(tiny_cfg(9, 1, TrainMode::Lomdm), &train_c, &held, None, None).unwrap();
        assert_eq!(out.metrics[0].mean_velocity, 0.0);
    }

    #[test]
    fn mdlm_mode_keeps_heads_frozen() {
        let (train_c, held) = corpora(4);
        let cfg = tiny_cfg(11, 5, TrainMode::Mdlm);
        let init = NeuralModel::init(cfg.model.clone(), cfg.seed).unwrap();
        let out = train(cfg, &train_c, &held, None, None).unwrap();
        let mut init_heads: Vec<f64> = Vec::new();
        init.for_each_tensor(|_, g, _, v| {
            if g != ParamGroup::Backbone {
                init_heads.extend_from_slice(v);
            }
        });
        let mut final_heads: Vec<f64> = Vec::new();
        out.state.model.for_each_tensor(|_, g, _, v| {
            if g != ParamGroup::Backbone {
                final_heads.extend_from_slice(v);
            }
        });
        assert_eq!(init_heads, final_heads);
        // velocity loss identically zero under matched constant exponents
        for r in &out.metrics {
            assert_eq!(r.mean_velocity, 0.0);
        }
    }

    #[test]
    fn checkpoint_roundtrip_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (train_c, held) = corpora(5);
        let out = train(tiny_cfg(13, 3, TrainMode::Lomdm), &train_c, &held, None, None).unwrap();
        let path = dir.path().join("test.ckpt");
        save_checkpoint(&path, &out.state, &train_c).unwrap();
        let (original, resaved) = checkpoint_roundtrip_bytes(&path).unwrap();
        assert_eq!(original, resaved);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let (train_c, held) = corpora(6);
        let out = train(tiny_cfg(17, 1, TrainMode::Lomdm), &train_c, &held, None, None).unwrap();
        let path = dir.path().join("good.ckpt");
        save_checkpoint(&path, &out.state, &train_c).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // truncation
        let bad = dir.path().join("trunc.ckpt");
        std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&bad, None), Err(Error::Checkpoint(_))));
        // magic corruption
        let mut wrong = bytes.clone();
        wrong[0] ^= 0xff;
        std::fs::write(&bad, &wrong).unwrap();
        match load_checkpoint(&bad, None) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("magic")),
            Err(other) => panic!("expected checkpoint error, got {other}"),
            Ok(_) => panic!("expected checkpoint error, got success"),
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let (train_c, held) = corpora(7);
        // uninterrupted: 6 steps
        let full = train(tiny_cfg(19, 6, TrainMode::Lomdm), &train_c, &held, None, None).unwrap();
        // interrupted: 3 steps, checkpoint, resume to 6
        let part = train(tiny_cfg(19, 3, TrainMode::Lomdm), &train_c, &held, None, None).unwrap();
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&path, &part.state, &train_c).unwrap();
        let (mut resumed, _, _) = load_checkpoint(&path, Some(tiny_cfg(19, 6, TrainMode::Lomdm))).unwrap();
        let rest = resume_loop(&mut resumed, &train_c, &held, &mut None, None).unwrap();
        assert_eq!(rest.metrics.len(), 3);
        for (ra, rb) in full.metrics[3..].iter().zip(&rest.metrics) {
            assert_eq!(ra.step, rb.step);
            assert_eq!(ra.mean_total.to_bits(), rb.mean_total.to_bits());
        }
    }

    #[test]
    fn smoke_training_improves_validation_bound() {
        let (train_c, held) = corpora(8);
        let mut cfg = tiny_cfg(23, 120, TrainMode::Lomdm);
        cfg.eval_every = 120;
        let out = train(cfg.clone(), &train_c, &held, None, None).unwrap();
        let initial = {
            let model = NeuralModel::init(cfg.model.clone(), cfg.seed).unwrap();
            evaluate(&model, &held, cfg.eval_samples, cfg.eval_sequences, cfg.seed).unwrap()
        };
        let last = out.metrics.last().unwrap();
        let final_bound = last.val_nelbo_per_token.unwrap();
        assert!(
            final_bound < initial.per_token_nelbo,
            "validation bound {final_bound} vs initial {}",
            initial.per_token_nelbo
        );
    }

    #[test]
    fn correlation_probe_self_corr_and_undefined() {
        // corr(x, x) = 1; constant vector -> undefined
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), Some(1.0));
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(pearson(&[1.0], &[1.0]), None);
    }

    #[test]
    fn correlation_undefined_when_c2_zero() {
        let (train_c, _) = corpora(9);
        let cfg = tiny_cfg(29, 0, TrainMode::Mdlm);
        let model = NeuralModel::init(cfg.model, cfg.seed).unwrap();
        let batch: Vec<Sequence> = train_c.sequences[..4].to_vec();
        let (a, _, c) =
            correlation_diagnostics(&model, &batch, 1e-4, &RandomStream::new(1)).unwrap();
        // constant exponents: zero variance in the forward velocity
        assert_eq!(a, None);
        assert_eq!(c, None);
    }

    #[test]
    fn eval_mc_error_shrinks_with_samples() {
        let (_, held) = corpora(10);
        let cfg = tiny_cfg(31, 0, TrainMode::Lomdm);
        let model = NeuralModel::init(cfg.model, cfg.seed).unwrap();
        let a = evaluate(&model, &held, 8, 16, 3).unwrap();
        let b = evaluate(&model, &held, 32, 16, 3).unwrap();
        let ratio = a.stderr / b.stderr;
        assert!(ratio > 1.2 && ratio < 4.0, "ratio {ratio}");
    }
}
