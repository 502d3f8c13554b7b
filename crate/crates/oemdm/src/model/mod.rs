//! Learnable components: the SUBS-constrained denoiser (tabular for the
//! verification suites, a tiny transformer for training), the stop-gradient
//! feature extractor shared with the scheduler heads, and the normalized
//! sigmoid that centers the learned exponents around `c1`.

pub mod grad;
pub mod heads;
pub mod math;
pub mod neural;
pub mod tabular;

use crate::core::{MaskedSequence, RandomStream, Vocabulary};
use crate::diffusion::apply_subs;
use crate::error::{Error, Result};

pub use heads::{head_forward, norm_sig, HeadParams};
pub use neural::{backbone_forward, Backbone, BackboneCache, DropoutCtx};
pub use tabular::{canonical_feature_dim, canonical_features, TabularDenoiser};

/// Which scheduler head a learned scheduler evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadRole {
    /// `phi`: forward/true-posterior scheduler, conditioned on the clean sequence.
    Forward,
    /// `psi`: parametrized-reverse scheduler, conditioned on the masked state.
    Reverse,
}

/// Parameter groups for the two-learning-rate optimizer and gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Diffusion backbone plus output projection (`theta`).
    Backbone,
    Phi,
    Psi,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub c1: f64,
    pub c2: f64,
    pub dropout: f64,
}

impl ModelConfig {
    /// Smallest configuration that exercises the shared-feature architecture.
    pub fn desk_default(vocab_size: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            max_len,
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            ffn_mult: 4,
            c1: 0.7,
            c2: 0.65,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c2 < 0.0 || self.c1 <= self.c2 {
            return Err(Error::Invalid(format!(
                "need c1 > c2 >= 0 for finite objectives, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size).expect("validated vocab size")
    }
}

/// Backbone hidden states handed to the scheduler heads. The detached flag
/// records the stop-gradient contract: no gradient flows from head losses
/// into the producer of these values.
#[derive(Clone, Debug)]
pub struct Features {
    pub data: Vec<f64>,
    pub len: usize,
    pub dim: usize,
    pub detached: bool,
}

/// The two velocity heads with their range constants.
#[derive(Clone, Debug)]
pub struct SchedulerHeads {
    pub phi: HeadParams,
    pub psi: HeadParams,
    pub c1: f64,
    pub c2: f64,
}

impl SchedulerHeads {
    pub fn init(dim: usize, c1: f64, c2: f64, rng: &mut RandomStream) -> Result<Self> {
        check_c1_c2(c1, c2)?;
        Ok(Self {
            phi: HeadParams::init(dim, &mut rng.substream("phi", 0)),
            psi: HeadParams::init(dim, &mut rng.substream("psi", 0)),
            c1,
            c2,
        })
    }

    /// Random nonzero output layers; for suites that need non-constant
    /// exponents without training.
    pub fn init_active(dim: usize, c1: f64, c2: f64, rng: &mut RandomStream) -> Result<Self> {
        check_c1_c2(c1, c2)?;
        Ok(Self {
            phi: HeadParams::init_active(dim, &mut rng.substream("phi", 0)),
            psi: HeadParams::init_active(dim, &mut rng.substream("psi", 0)),
            c1,
            c2,
        })
    }

    pub fn head(&self, role: HeadRole) -> &HeadParams {
        match role {
            HeadRole::Forward => &self.phi,
            HeadRole::Reverse => &self.psi,
        }
    }

    /// Per-position exponents `c1 + c2 * NormSig(head(features))`, each in
    /// the open interval `(c1 - c2, c1 + c2)` with mean exactly `c1`.
    pub fn exponents(&self, role: HeadRole, features: &Features) -> Vec<f64> {
        debug_assert!(features.detached, "heads consume detached features");
        let (scores, _) = head_forward(self.head(role), &features.data, features.len);
        norm_sig(&scores)
            .iter()
            .map(|n| self.c1 + self.c2 * n)
            .collect()
    }
}

pub fn check_c1_c2(c1: f64, c2: f64) -> Result<()> {
    if !(c2 >= 0.0 && c1 > c2) {
        return Err(Error::Invalid(format!(
            "scheduler head constants need c1 > c2 >= 0, got c1={c1} c2={c2}"
        )));
    }
    Ok(())
}

/// Tabular denoiser paired with optional scheduler heads over the canonical
/// feature encoding.
#[derive(Clone, Debug)]
pub struct TabularModel {
    pub denoiser: TabularDenoiser,
    pub heads: Option<SchedulerHeads>,
}

impl TabularModel {
    pub fn plain(denoiser: TabularDenoiser) -> Self {
        Self {
            denoiser,
            heads: None,
        }
    }

    pub fn with_heads(denoiser: TabularDenoiser, heads: SchedulerHeads) -> Self {
        Self {
            denoiser,
            heads: Some(heads),
        }
    }

    pub fn feature_dim(&self) -> usize {
        canonical_feature_dim(&self.denoiser.vocab(), self.denoiser.len())
    }
}

/// The trainable model: backbone, denoiser output projection, and both
/// scheduler heads.
#[derive(Clone, Debug)]
pub struct NeuralModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub out_w: Vec<f64>, // d x (V+1)
    pub out_b: Vec<f64>, // V+1
    pub phi: HeadParams,
    pub psi: HeadParams,
}

impl NeuralModel {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RandomStream::new(seed).substream("model-init", 0);
        let vocab = cfg.vocab();
        let backbone = Backbone::init(
            vocab.n_symbols(),
            cfg.max_len,
            cfg.d_model,
            cfg.n_blocks,
            cfg.n_heads,
            cfg.ffn_mult,
            &mut rng,
        );
        let out_w = neural::init_linear(cfg.d_model, vocab.n_symbols(), &mut rng.substream("out", 0));
        let out_b = vec![0.0; vocab.n_symbols()];
        let phi = HeadParams::init(cfg.d_model, &mut rng.substream("phi", 0));
        let psi = HeadParams::init(cfg.d_model, &mut rng.substream("psi", 0));
        Ok(Self {
            cfg,
            backbone,
            out_w,
            out_b,
            phi,
            psi,
        })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.cfg.vocab()
    }

    pub fn heads_view(&self) -> SchedulerHeads {
        SchedulerHeads {
            phi: self.phi.clone(),
            psi: self.psi.clone(),
            c1: self.cfg.c1,
            c2: self.cfg.c2,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            backbone: self.backbone.zeros_like(),
            out_w: vec![0.0; self.out_w.len()],
            out_b: vec![0.0; self.out_b.len()],
            phi: self.phi.zeros_like(),
            psi: self.psi.zeros_like(),
        }
    }

    /// Logits from established features: the `theta_MLP` output projection.
    pub fn project_logits(&self, features: &[f64], l: usize) -> Vec<f64> {
        let d = self.cfg.d_model;
        let n = self.vocab().n_symbols();
        let mut logits = math::matmul(features, &self.out_w, l, d, n);
        for i in 0..l {
            for j in 0..n {
                logits[i * n + j] += self.out_b[j];
            }
        }
        logits
    }

    /// One shared backbone pass: SUBS-constrained denoiser rows plus the
    /// detached feature matrix and the cache for the backward pass.
    pub fn forward_full(
        &self,
        z: &MaskedSequence,
        dropout: Option<&mut DropoutCtx>,
    ) -> (Vec<Vec<f64>>, Features, BackboneCache) {
        let l = z.len();
        let (hidden, cache) = backbone_forward(&self.backbone, z.tokens(), dropout);
        let logits = self.project_logits(&hidden, l);
        let vocab = self.vocab();
        let per_pos: Vec<Vec<f64>> = (0..l)
            .map(|i| logits[i * vocab.n_symbols()..(i + 1) * vocab.n_symbols()].to_vec())
            .collect();
        let rows = apply_subs(&per_pos, z).expect("finite logits");
        let features = Features {
            data: hidden,
            len: l,
            dim: self.cfg.d_model,
            detached: true,
        };
        (rows, features, cache)
    }

    /// Walks `(name, group, dims, values)` over every parameter tensor in a
    /// fixed order shared by the optimizer, the checkpoint format, and the
    /// finite-difference suites.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, ParamGroup, &[usize], &[f64])) {
        let d = self.cfg.d_model;
        let sym = self.vocab().n_symbols();
        f("tok_emb", ParamGroup::Backbone, &[sym, d], &self.backbone.tok_emb);
        f(
            "pos_emb",
            ParamGroup::Backbone,
            &[self.cfg.max_len, d],
            &self.backbone.pos_emb,
        );
        for (bi, b) in self.backbone.blocks.iter().enumerate() {
            let p = |s: &str| format!("block{bi}.{s}");
            f(&p("ln1.gain"), ParamGroup::Backbone, &[d], &b.ln1.gain);
            f(&p("ln1.bias"), ParamGroup::Backbone, &[d], &b.ln1.bias);
            f(&p("attn.wq"), ParamGroup::Backbone, &[d, d], &b.attn.wq);
            f(&p("attn.wk"), ParamGroup::Backbone, &[d, d], &b.attn.wk);
            f(&p("attn.wv"), ParamGroup::Backbone, &[d, d], &b.attn.wv);
            f(&p("attn.wo"), ParamGroup::Backbone, &[d, d], &b.attn.wo);
            f(&p("ln2.gain"), ParamGroup::Backbone, &[d], &b.ln2.gain);
            f(&p("ln2.bias"), ParamGroup::Backbone, &[d], &b.ln2.bias);
            let m = b.ffn.hidden;
            f(&p("ffn.w1"), ParamGroup::Backbone, &[d, m], &b.ffn.w1);
            f(&p("ffn.b1"), ParamGroup::Backbone, &[m], &b.ffn.b1);
            f(&p("ffn.w2"), ParamGroup::Backbone, &[m, d], &b.ffn.w2);
            f(&p("ffn.b2"), ParamGroup::Backbone, &[d], &b.ffn.b2);
        }
        f("ln_f.gain", ParamGroup::Backbone, &[d], &self.backbone.ln_f.gain);
        f("ln_f.bias", ParamGroup::Backbone, &[d], &self.backbone.ln_f.bias);
        f("out_w", ParamGroup::Backbone, &[d, sym], &self.out_w);
        f("out_b", ParamGroup::Backbone, &[sym], &self.out_b);
        for (role, head, group) in [
            ("phi", &self.phi, ParamGroup::Phi),
            ("psi", &self.psi, ParamGroup::Psi),
        ] {
            let p = |s: &str| format!("{role}.{s}");
            f(&p("ln.gain"), group, &[d], &head.ln.gain);
            f(&p("ln.bias"), group, &[d], &head.ln.bias);
            f(&p("attn.wq"), group, &[d, d], &head.attn.wq);
            f(&p("attn.wk"), group, &[d, d], &head.attn.wk);
            f(&p("attn.wv"), group, &[d, d], &head.attn.wv);
            f(&p("attn.wo"), group, &[d, d], &head.attn.wo);
            f(&p("w_out"), group, &[d], &head.w_out);
            f(&p("b_out"), group, &[1], std::slice::from_ref(&head.b_out));
        }
    }

    /// Mutable walk in the same order as [`Self::for_each_tensor`].
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, ParamGroup, &mut [f64])) {
        f("tok_emb", ParamGroup::Backbone, &mut self.backbone.tok_emb);
        f("pos_emb", ParamGroup::Backbone, &mut self.backbone.pos_emb);
        for (bi, b) in self.backbone.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("block{bi}.{s}");
            f(&p("ln1.gain"), ParamGroup::Backbone, &mut b.ln1.gain);
            f(&p("ln1.bias"), ParamGroup::Backbone, &mut b.ln1.bias);
            f(&p("attn.wq"), ParamGroup::Backbone, &mut b.attn.wq);
            f(&p("attn.wk"), ParamGroup::Backbone, &mut b.attn.wk);
            f(&p("attn.wv"), ParamGroup::Backbone, &mut b.attn.wv);
            f(&p("attn.wo"), ParamGroup::Backbone, &mut b.attn.wo);
            f(&p("ln2.gain"), ParamGroup::Backbone, &mut b.ln2.gain);
            f(&p("ln2.bias"), ParamGroup::Backbone, &mut b.ln2.bias);
            f(&p("ffn.w1"), ParamGroup::Backbone, &mut b.ffn.w1);
            f(&p("ffn.b1"), ParamGroup::Backbone, &mut b.ffn.b1);
            f(&p("ffn.w2"), ParamGroup::Backbone, &mut b.ffn.w2);
            f(&p("ffn.b2"), ParamGroup::Backbone, &mut b.ffn.b2);
        }
        f("ln_f.gain", ParamGroup::Backbone, &mut self.backbone.ln_f.gain);
        f("ln_f.bias", ParamGroup::Backbone, &mut self.backbone.ln_f.bias);
        f("out_w", ParamGroup::Backbone, &mut self.out_w);
        f("out_b", ParamGroup::Backbone, &mut self.out_b);
        for (role, head, group) in [
            ("phi", &mut self.phi, ParamGroup::Phi),
            ("psi", &mut self.psi, ParamGroup::Psi),
        ] {
            let p = |s: &str| format!("{role}.{s}");
            f(&p("ln.gain"), group, &mut head.ln.gain);
            f(&p("ln.bias"), group, &mut head.ln.bias);
            f(&p("attn.wq"), group, &mut head.attn.wq);
            f(&p("attn.wk"), group, &mut head.attn.wk);
            f(&p("attn.wv"), group, &mut head.attn.wv);
            f(&p("attn.wo"), group, &mut head.attn.wo);
            f(&p("w_out"), group, &mut head.w_out);
            f(&p("b_out"), group, std::slice::from_mut(&mut head.b_out));
        }
    }

    pub fn n_params(&self, group: Option<ParamGroup>) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, g, _, t| {
            if group.map_or(true, |want| want == g) {
                n += t.len();
            }
        });
        n
    }
}

/// A denoiser plus (optionally) scheduler heads, tabular or neural. Shared
/// read-only by the kernels, samplers, and oracles.
#[derive(Clone, Debug)]
pub enum ModelBundle {
    Tabular(TabularModel),
    Neural(NeuralModel),
}

impl ModelBundle {
    pub fn vocab(&self) -> Vocabulary {
        match self {
            ModelBundle::Tabular(m) => m.denoiser.vocab(),
            ModelBundle::Neural(m) => m.vocab(),
        }
    }

    /// SUBS-constrained per-position simplex rows over V+1 symbols. A pure,
    /// time-agnostic function of (parameters, z).
    pub fn denoise(&self, z: &MaskedSequence) -> Vec<Vec<f64>> {
        match self {
            ModelBundle::Tabular(m) => m.denoiser.denoise(z),
            ModelBundle::Neural(m) => m.forward_full(z, None).0,
        }
    }

    /// Backbone hidden states (neural) or the canonical encoding (tabular),
    /// always flagged detached. Numerically identical to the states the
    /// denoiser consumes on the same input.
    pub fn extract_features(&self, tokens: &[usize]) -> Features {
        match self {
            ModelBundle::Tabular(m) => {
                let vocab = m.denoiser.vocab();
                let len = m.denoiser.len();
                Features {
                    data: canonical_features(tokens, &vocab, len),
                    len: tokens.len(),
                    dim: canonical_feature_dim(&vocab, len),
                    detached: true,
                }
            }
            ModelBundle::Neural(m) => {
                let (hidden, _) = backbone_forward(&m.backbone, tokens, None);
                Features {
                    data: hidden,
                    len: tokens.len(),
                    dim: m.cfg.d_model,
                    detached: true,
                }
            }
        }
    }

    pub fn heads_view(&self) -> Option<SchedulerHeads> {
        match self {
            ModelBundle::Tabular(m) => m.heads.clone(),
            ModelBundle::Neural(m) => Some(m.heads_view()),
        }
    }

    /// Learned per-position exponents for the given role on `tokens`.
    pub fn learned_exponents(&self, role: HeadRole, tokens: &[usize]) -> Result<Vec<f64>> {
        let heads = self.heads_view().ok_or_else(|| {
            Error::SchedulerContext("model bundle has no scheduler heads".into())
        })?;
        let features = self.extract_features(tokens);
        Ok(heads.exponents(role, &features))
    }
}

/// Per-position `(alpha, velocity)` of the learned scheduler at time `t`:
/// `alpha_i = 1 - t^{e_i}` and `A_i = e_i / t` with the exponent mean pinned
/// to `c1` by the normalized sigmoid.
pub fn head_velocity(
    heads: &SchedulerHeads,
    role: HeadRole,
    features: &Features,
    t: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Invalid(format!("time {t} outside (0, 1]")));
    }
    Ok(heads
        .exponents(role, features)
        .iter()
        .map(|&e| (1.0 - t.powf(e), e / t))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Sequence;

    #[test]
    fn tabular_uniform_denoise_rows() {
        let vocab = Vocabulary::new(2).unwrap();
        let m = ModelBundle::Tabular(TabularModel::plain(
            TabularDenoiser::uniform(vocab, 2).unwrap(),
        ));
        let z = MaskedSequence::all_masked(2, &vocab);
        for row in m.denoise(&z) {
            assert_eq!(row, vec![0.5, 0.5, 0.0]);
        }
    }

    #[test]
    fn neural_denoise_respects_subs() {
        let cfg = ModelConfig {
            vocab_size: 3,
            max_len: 4,
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            ffn_mult: 2,
            c1: 0.7,
            c2: 0.65,
            dropout: 0.0,
        };
        let m = NeuralModel::init(cfg, 17).unwrap();
        let vocab = m.vocab();
        let z = MaskedSequence::new(vec![3, 1, 3, 2], &vocab).unwrap();
        let (rows, feats, _) = m.forward_full(&z, None);
        for (i, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert_eq!(row[vocab.mask_id()], 0.0);
            if !z.is_masked(i) {
                assert_eq!(row[z.get(i)], 1.0);
            }
        }
        assert!(feats.detached);
    }

    #[test]
    fn denoise_bit_identical_across_calls() {
        let cfg = ModelConfig::desk_default(4, 6);
        let m = NeuralModel::init(cfg, 3).unwrap();
        let vocab = m.vocab();
        let z = MaskedSequence::new(vec![4, 0, 4, 2, 4, 1], &vocab).unwrap();
        let a = m.forward_full(&z, None).0;
        let b = m.forward_full(&z, None).0;
        assert_eq!(a, b);
    }

    #[test]
    fn features_match_denoiser_states() {
        let cfg = ModelConfig::desk_default(3, 5);
        let m = NeuralModel::init(cfg, 21).unwrap();
        let vocab = m.vocab();
        let z = MaskedSequence::new(vec![3, 1, 0, 3, 2], &vocab).unwrap();
        let (_, feats, _) = m.forward_full(&z, None);
        let bundle = ModelBundle::Neural(m);
        let feats2 = bundle.extract_features(z.tokens());
        assert_eq!(feats.data, feats2.data);
    }

    #[test]
    fn tabular_features_canonical() {
        let vocab = Vocabulary::new(2).unwrap();
        let m = ModelBundle::Tabular(TabularModel::plain(
            TabularDenoiser::uniform(vocab, 2).unwrap(),
        ));
        let x = Sequence::new(vec![1, 0], &vocab).unwrap();
        let f = m.extract_features(x.tokens());
        assert_eq!(f.dim, 5);
        assert_eq!(f.data[1], 1.0);
    }

    #[test]
    fn zero_init_heads_give_exponent_c1() {
        let cfg = ModelConfig::desk_default(3, 4);
        let (c1, c2) = (cfg.c1, cfg.c2);
        let m = NeuralModel::init(cfg, 9).unwrap();
        let bundle = ModelBundle::Neural(m);
        let exps = bundle
            .learned_exponents(HeadRole::Forward, &[0, 1, 2, 0])
            .unwrap();
        for e in exps {
            assert_eq!(e, c1);
        }
        let _ = c2;
    }

    #[test]
    fn exponent_range_and_mean() {
        let vocab = Vocabulary::new(2).unwrap();
        let mut rng = RandomStream::new(31);
        let den = TabularDenoiser::uniform(vocab, 3).unwrap();
        let heads = SchedulerHeads::init_active(
            canonical_feature_dim(&vocab, 3),
            0.7,
            0.65,
            &mut rng,
        )
        .unwrap();
        let m = ModelBundle::Tabular(TabularModel::with_heads(den, heads));
        let exps = m.learned_exponents(HeadRole::Reverse, &[2, 0, 1]).unwrap();
        let mean: f64 = exps.iter().sum::<f64>() / exps.len() as f64;
        assert!((mean - 0.7).abs() < 1e-12);
        for e in exps {
            assert!(e > 0.05 && e < 1.35);
        }
    }

    #[test]
    fn head_velocity_closed_form() {
        let vocab = Vocabulary::new(2).unwrap();
        let den = TabularDenoiser::uniform(vocab, 2).unwrap();
        let mut rng = RandomStream::new(2);
        let heads =
            SchedulerHeads::init(canonical_feature_dim(&vocab, 2), 0.7, 0.65, &mut rng).unwrap();
        let m = ModelBundle::Tabular(TabularModel::with_heads(den, heads.clone()));
        let f = m.extract_features(&[0, 1]);
        let va = head_velocity(&heads, HeadRole::Forward, &f, 0.5).unwrap();
        // zero-init head: exponent c1 everywhere
        for (alpha, vel) in va {
            assert!((alpha - (1.0 - 0.5f64.powf(0.7))).abs() < 1e-15);
            assert!((vel - 0.7 / 0.5).abs() < 1e-15);
        }
        assert!(head_velocity(&heads, HeadRole::Forward, &f, 0.0).is_err());
    }

    #[test]
    fn c1_c2_constraint_enforced() {
        let mut rng = RandomStream::new(0);
        assert!(SchedulerHeads::init(4, 0.5, 0.65, &mut rng).is_err());
        assert!(SchedulerHeads::init(4, 0.7, 0.65, &mut rng).is_ok());
    }

    #[test]
    fn tensor_walk_orders_agree() {
        let cfg = ModelConfig::desk_default(3, 4);
        let mut m = NeuralModel::init(cfg, 1).unwrap();
        let mut names_a = Vec::new();
        m.for_each_tensor(|n, _, _, _| names_a.push(n.to_string()));
        let mut names_b = Vec::new();
        m.for_each_tensor_mut(|n, _, _| names_b.push(n.to_string()));
        assert_eq!(names_a, names_b);
        assert!(names_a.len() > 10);
    }
}
