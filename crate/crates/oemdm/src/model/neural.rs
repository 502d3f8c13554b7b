//! The tiny transformer backbone `theta_TF` and its exact backward pass.
//!
//! Everything is f64 and hand-rolled: embeddings, pre-norm attention blocks,
//! a gelu feed-forward, and a final layer norm whose output doubles as the
//! denoiser input and the scheduler feature map.

use crate::core::RandomStream;
use crate::model::math::*;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gain: vec![0.0; dim],
            bias: vec![0.0; dim],
        }
    }
}

const LN_EPS: f64 = 1e-5;

pub struct LnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// y = gain * (x - mean)/std + bias, row-wise over an `l x d` matrix.
pub fn ln_forward(ln: &LayerNorm, x: &[f64], l: usize, d: usize) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; l * d];
    let mut xhat = vec![0.0; l * d];
    let mut inv_std = vec![0.0; l];
    for i in 0..l {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = istd;
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            xhat[i * d + j] = xh;
            y[i * d + j] = ln.gain[j] * xh + ln.bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Backward through layer norm; returns dx and accumulates parameter grads.
pub fn ln_backward(
    ln: &LayerNorm,
    cache: &LnCache,
    dy: &[f64],
    l: usize,
    d: usize,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; l * d];
    for i in 0..l {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dyr[j] * ln.gain[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let dxh = dyr[j] * ln.gain[j];
            dx[i * d + j] =
                cache.inv_std[i] * (dxh - inv_d * sum_dxhat - xh[j] * inv_d * sum_dxhat_xhat);
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub n_heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn init(dim: usize, n_heads: usize, rng: &mut RandomStream) -> Self {
        assert!(dim % n_heads == 0, "dim {dim} not divisible by heads {n_heads}");
        Self {
            wq: init_linear(dim, dim, rng),
            wk: init_linear(dim, dim, rng),
            wv: init_linear(dim, dim, rng),
            wo: init_linear(dim, dim, rng),
            n_heads,
            dim,
        }
    }

    pub fn zeros(dim: usize, n_heads: usize) -> Self {
        Self {
            wq: vec![0.0; dim * dim],
            wk: vec![0.0; dim * dim],
            wv: vec![0.0; dim * dim],
            wo: vec![0.0; dim * dim],
            n_heads,
            dim,
        }
    }
}

/// Scaled uniform by fan-in.
pub fn init_linear(fan_in: usize, fan_out: usize, rng: &mut RandomStream) -> Vec<f64> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| (rng.next_f64() * 2.0 - 1.0) * scale)
        .collect()
}

pub struct AttnCache {
    pub input: Vec<f64>,          // l x d (post-norm input to projections)
    pub q: Vec<f64>,              // l x d
    pub k: Vec<f64>,              // l x d
    pub v: Vec<f64>,              // l x d
    pub probs: Vec<Vec<f64>>,     // per head, l x l
    pub concat: Vec<f64>,         // l x d (pre-Wo)
}

/// Bidirectional multi-head attention over an `l x d` input (no causal mask).
pub fn attn_forward(attn: &Attention, x: &[f64], l: usize) -> (Vec<f64>, AttnCache) {
    let d = attn.dim;
    let nh = attn.n_heads;
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = matmul(x, &attn.wq, l, d, d);
    let k = matmul(x, &attn.wk, l, d, d);
    let v = matmul(x, &attn.wv, l, d, d);
    let mut concat = vec![0.0; l * d];
    let mut probs = Vec::with_capacity(nh);
    for h in 0..nh {
        let off = h * dh;
        let mut scores = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                let mut acc = 0.0;
                for p in 0..dh {
                    acc += q[i * d + off + p] * k[j * d + off + p];
                }
                scores[i * l + j] = acc * scale;
            }
        }
        softmax_rows(&mut scores, l, l);
        for i in 0..l {
            for j in 0..l {
                let pij = scores[i * l + j];
                if pij == 0.0 {
                    continue;
                }
                for p in 0..dh {
                    concat[i * d + off + p] += pij * v[j * d + off + p];
                }
            }
        }
        probs.push(scores);
    }
    let out = matmul(&concat, &attn.wo, l, d, d);
    let cache = AttnCache {
        input: x.to_vec(),
        q,
        k,
        v,
        probs,
        concat,
    };
    (out, cache)
}

pub fn attn_backward(
    attn: &Attention,
    cache: &AttnCache,
    dout: &[f64],
    l: usize,
    grads: &mut Attention,
) -> Vec<f64> {
    let d = attn.dim;
    let nh = attn.n_heads;
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    // out = concat @ Wo
    accum_at_b(&mut grads.wo, &cache.concat, dout, l, d, d);
    let dconcat = matmul_bt(dout, &attn.wo, l, d, d);
    let mut dq = vec![0.0; l * d];
    let mut dk = vec![0.0; l * d];
    let mut dv = vec![0.0; l * d];
    for h in 0..nh {
        let off = h * dh;
        let probs = &cache.probs[h];
        // dP = dC_h @ V_h^T ; dV_h = P^T @ dC_h
        let mut dp = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                let mut acc = 0.0;
                for p in 0..dh {
                    acc += dconcat[i * d + off + p] * cache.v[j * d + off + p];
                }
                dp[i * l + j] = acc;
            }
        }
        for j in 0..l {
            for i in 0..l {
                let pij = probs[i * l + j];
                if pij == 0.0 {
                    continue;
                }
                for p in 0..dh {
                    dv[j * d + off + p] += pij * dconcat[i * d + off + p];
                }
            }
        }
        // softmax backward: dS = P * (dP - rowsum(dP * P))
        let mut ds = vec![0.0; l * l];
        for i in 0..l {
            let mut dot = 0.0;
            for j in 0..l {
                dot += dp[i * l + j] * probs[i * l + j];
            }
            for j in 0..l {
                ds[i * l + j] = probs[i * l + j] * (dp[i * l + j] - dot);
            }
        }
        // S = scale * Q_h K_h^T
        for i in 0..l {
            for j in 0..l {
                let dsij = ds[i * l + j] * scale;
                if dsij == 0.0 {
                    continue;
                }
                for p in 0..dh {
                    dq[i * d + off + p] += dsij * cache.k[j * d + off + p];
                    dk[j * d + off + p] += dsij * cache.q[i * d + off + p];
                }
            }
        }
    }
    accum_at_b(&mut grads.wq, &cache.input, &dq, l, d, d);
    accum_at_b(&mut grads.wk, &cache.input, &dk, l, d, d);
    accum_at_b(&mut grads.wv, &cache.input, &dv, l, d, d);
    let mut dx = matmul_bt(&dq, &attn.wq, l, d, d);
    add_assign(&mut dx, &matmul_bt(&dk, &attn.wk, l, d, d));
    add_assign(&mut dx, &matmul_bt(&dv, &attn.wv, l, d, d));
    dx
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Vec<f64>, // d x m
    pub b1: Vec<f64>, // m
    pub w2: Vec<f64>, // m x d
    pub b2: Vec<f64>, // d
    pub dim: usize,
    pub hidden: usize,
}

impl FeedForward {
    pub fn init(dim: usize, hidden: usize, rng: &mut RandomStream) -> Self {
        Self {
            w1: init_linear(dim, hidden, rng),
            b1: vec![0.0; hidden],
            w2: init_linear(hidden, dim, rng),
            b2: vec![0.0; dim],
            dim,
            hidden,
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: vec![0.0; dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * dim],
            b2: vec![0.0; dim],
            dim,
            hidden,
        }
    }
}

pub struct FfnCache {
    pub input: Vec<f64>,
    pub pre_act: Vec<f64>,
    pub act: Vec<f64>,
}

pub fn ffn_forward(ffn: &FeedForward, x: &[f64], l: usize) -> (Vec<f64>, FfnCache) {
    let (d, m) = (ffn.dim, ffn.hidden);
    let mut pre = matmul(x, &ffn.w1, l, d, m);
    for i in 0..l {
        for j in 0..m {
            pre[i * m + j] += ffn.b1[j];
        }
    }
    let act: Vec<f64> = pre.iter().map(|&h| gelu(h)).collect();
    let mut out = matmul(&act, &ffn.w2, l, m, d);
    for i in 0..l {
        for j in 0..d {
            out[i * d + j] += ffn.b2[j];
        }
    }
    let cache = FfnCache {
        input: x.to_vec(),
        pre_act: pre,
        act,
    };
    (out, cache)
}

pub fn ffn_backward(
    ffn: &FeedForward,
    cache: &FfnCache,
    dout: &[f64],
    l: usize,
    grads: &mut FeedForward,
) -> Vec<f64> {
    let (d, m) = (ffn.dim, ffn.hidden);
    accum_at_b(&mut grads.w2, &cache.act, dout, l, m, d);
    for i in 0..l {
        for j in 0..d {
            grads.b2[j] += dout[i * d + j];
        }
    }
    let dact = matmul_bt(dout, &ffn.w2, l, d, m);
    let mut dpre = vec![0.0; l * m];
    for idx in 0..l * m {
        dpre[idx] = dact[idx] * gelu_prime(cache.pre_act[idx]);
    }
    accum_at_b(&mut grads.w1, &cache.input, &dpre, l, d, m);
    for i in 0..l {
        for j in 0..m {
            grads.b1[j] += dpre[i * m + j];
        }
    }
    matmul_bt(&dpre, &ffn.w1, l, m, d)
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub tok_emb: Vec<f64>, // (V+1) x d
    pub pos_emb: Vec<f64>, // max_len x d
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub dim: usize,
    pub n_symbols: usize,
    pub max_len: usize,
}

impl Backbone {
    pub fn init(
        n_symbols: usize,
        max_len: usize,
        dim: usize,
        n_blocks: usize,
        n_heads: usize,
        ffn_mult: usize,
        rng: &mut RandomStream,
    ) -> Self {
        let r = rng.substream("backbone", 0);
        let blocks = (0..n_blocks)
            .map(|b| {
                let br = r.substream("block", b as u64);
                Block {
                    ln1: LayerNorm::new(dim),
                    attn: Attention::init(dim, n_heads, &mut br.substream("attn", 0)),
                    ln2: LayerNorm::new(dim),
                    ffn: FeedForward::init(dim, ffn_mult * dim, &mut br.substream("ffn", 0)),
                }
            })
            .collect();
        Self {
            tok_emb: init_linear(dim, n_symbols, &mut r.substream("tok", 0)),
            pos_emb: init_linear(dim, max_len, &mut r.substream("pos", 0)),
            blocks,
            ln_f: LayerNorm::new(dim),
            dim,
            n_symbols,
            max_len,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tok_emb: vec![0.0; self.tok_emb.len()],
            pos_emb: vec![0.0; self.pos_emb.len()],
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: LayerNorm::zeros(self.dim),
                    attn: Attention::zeros(self.dim, b.attn.n_heads),
                    ln2: LayerNorm::zeros(self.dim),
                    ffn: FeedForward::zeros(self.dim, b.ffn.hidden),
                })
                .collect(),
            ln_f: LayerNorm::zeros(self.dim),
            ..self.clone()
        }
    }
}

/// Inverted dropout state; `None` disables dropout (all verification suites).
pub struct DropoutCtx {
    pub rate: f64,
    pub rng: RandomStream,
}

fn apply_dropout(
    x: &mut [f64],
    ctx: &mut Option<&mut DropoutCtx>,
    label: &str,
    index: u64,
) -> Option<Vec<f64>> {
    match ctx {
        Some(c) if c.rate > 0.0 => {
            let keep = 1.0 - c.rate;
            let mut r = c.rng.substream(label, index);
            let mask: Vec<f64> = (0..x.len())
                .map(|_| if r.next_f64() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            for (v, m) in x.iter_mut().zip(&mask) {
                *v *= m;
            }
            Some(mask)
        }
        _ => None,
    }
}

pub struct BlockCache {
    pub input: Vec<f64>,
    pub ln1: LnCache,
    pub attn: AttnCache,
    pub drop1: Option<Vec<f64>>,
    pub resid1: Vec<f64>,
    pub ln2: LnCache,
    pub ffn: FfnCache,
    pub drop2: Option<Vec<f64>>,
}

pub struct BackboneCache {
    pub tokens: Vec<usize>,
    pub blocks: Vec<BlockCache>,
    pub ln_f: LnCache,
    pub len: usize,
}

/// Runs the backbone; returns the final-layer-norm hidden states (`l x d`)
/// together with everything the backward pass needs.
pub fn backbone_forward(
    net: &Backbone,
    tokens: &[usize],
    mut dropout: Option<&mut DropoutCtx>,
) -> (Vec<f64>, BackboneCache) {
    let l = tokens.len();
    let d = net.dim;
    assert!(l <= net.max_len, "sequence length {l} exceeds max_len {}", net.max_len);
    let mut x = vec![0.0; l * d];
    for (i, &tok) in tokens.iter().enumerate() {
        debug_assert!(tok < net.n_symbols);
        for j in 0..d {
            x[i * d + j] = net.tok_emb[tok * d + j] + net.pos_emb[i * d + j];
        }
    }
    let mut caches = Vec::with_capacity(net.blocks.len());
    for (bi, block) in net.blocks.iter().enumerate() {
        let input = x.clone();
        let (n1, ln1c) = ln_forward(&block.ln1, &x, l, d);
        let (mut ao, attnc) = attn_forward(&block.attn, &n1, l);
        let drop1 = apply_dropout(&mut ao, &mut dropout, "drop-attn", bi as u64);
        for idx in 0..l * d {
            x[idx] += ao[idx];
        }
        let resid1 = x.clone();
        let (n2, ln2c) = ln_forward(&block.ln2, &x, l, d);
        let (mut fo, ffnc) = ffn_forward(&block.ffn, &n2, l);
        let drop2 = apply_dropout(&mut fo, &mut dropout, "drop-ffn", bi as u64);
        for idx in 0..l * d {
            x[idx] += fo[idx];
        }
        caches.push(BlockCache {
            input,
            ln1: ln1c,
            attn: attnc,
            drop1,
            resid1,
            ln2: ln2c,
            ffn: ffnc,
            drop2,
        });
    }
    let (features, lnfc) = ln_forward(&net.ln_f, &x, l, d);
    (
        features,
        BackboneCache {
            tokens: tokens.to_vec(),
            blocks: caches,
            ln_f: lnfc,
            len: l,
        },
    )
}

/// Accumulates parameter gradients for `d(features)` flowing backward.
pub fn backbone_backward(
    net: &Backbone,
    cache: &BackboneCache,
    dfeatures: &[f64],
    grads: &mut Backbone,
) {
    let l = cache.len;
    let d = net.dim;
    let mut dx = ln_backward(
        &net.ln_f,
        &cache.ln_f,
        dfeatures,
        l,
        d,
        &mut grads.ln_f.gain,
        &mut grads.ln_f.bias,
    );
    for bi in (0..net.blocks.len()).rev() {
        let block = &net.blocks[bi];
        let bc = &cache.blocks[bi];
        let gb = &mut grads.blocks[bi];
        // x2 = resid1 + dropout(ffn(ln2(resid1)))
        let mut dffn_out = dx.clone();
        if let Some(mask) = &bc.drop2 {
            for (v, m) in dffn_out.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        let dn2 = ffn_backward(&block.ffn, &bc.ffn, &dffn_out, l, &mut gb.ffn);
        let dres =
            ln_backward(&block.ln2, &bc.ln2, &dn2, l, d, &mut gb.ln2.gain, &mut gb.ln2.bias);
        add_assign(&mut dx, &dres);
        // resid1 = input + dropout(attn(ln1(input)))
        let mut dattn_out = dx.clone();
        if let Some(mask) = &bc.drop1 {
            for (v, m) in dattn_out.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        let dn1 = attn_backward(&block.attn, &bc.attn, &dattn_out, l, &mut gb.attn);
        let dres =
            ln_backward(&block.ln1, &bc.ln1, &dn1, l, d, &mut gb.ln1.gain, &mut gb.ln1.bias);
        add_assign(&mut dx, &dres);
    }
    for (i, &tok) in cache.tokens.iter().enumerate() {
        for j in 0..d {
            grads.tok_emb[tok * d + j] += dx[i * d + j];
            grads.pos_emb[i * d + j] += dx[i * d + j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_backbone(seed: u64) -> Backbone {
        let mut rng = RandomStream::new(seed);
        Backbone::init(4, 5, 8, 2, 2, 2, &mut rng)
    }

    #[test]
    fn forward_deterministic() {
        let net = tiny_backbone(3);
        let (a, _) = backbone_forward(&net, &[0, 1, 2, 3], None);
        let (b, _) = backbone_forward(&net, &[0, 1, 2, 3], None);
        assert_eq!(a, b);
    }

    /// Central finite differences over a scalar probe of the features;
    /// exercises every layer's backward.
    #[test]
    fn backward_matches_finite_differences() {
        let net = tiny_backbone(11);
        let tokens = vec![0, 3, 1, 2];
        let l = tokens.len();
        let d = net.dim;
        // probe: weighted sum of features with fixed weights
        let weights: Vec<f64> = (0..l * d).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect();
        let probe = |n: &Backbone| -> f64 {
            let (f, _) = backbone_forward(n, &tokens, None);
            f.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = backbone_forward(&net, &tokens, None);
        let mut grads = net.zeros_like();
        backbone_backward(&net, &cache, &weights, &mut grads);

        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut check = |get: &dyn Fn(&Backbone) -> &Vec<f64>,
                         get_mut: &dyn Fn(&mut Backbone) -> &mut Vec<f64>,
                         gslice: &[f64]| {
            let n = get(&net).len();
            let step = (n / 17).max(1);
            for idx in (0..n).step_by(step) {
                let mut plus = net.clone();
                get_mut(&mut plus)[idx] += h;
                let mut minus = net.clone();
                get_mut(&mut minus)[idx] -= h;
                let fd = (probe(&plus) - probe(&minus)) / (2.0 * h);
                let err = (fd - gslice[idx]).abs() / fd.abs().max(gslice[idx].abs()).max(1e-6);
                worst = worst.max(err);
            }
        };
        check(&|n| &n.tok_emb, &|n| &mut n.tok_emb, &grads.tok_emb);
        check(&|n| &n.pos_emb, &|n| &mut n.pos_emb, &grads.pos_emb);
        check(&|n| &n.blocks[0].attn.wq, &|n| &mut n.blocks[0].attn.wq, &grads.blocks[0].attn.wq);
        check(&|n| &n.blocks[0].attn.wo, &|n| &mut n.blocks[0].attn.wo, &grads.blocks[0].attn.wo);
        check(&|n| &n.blocks[1].ffn.w1, &|n| &mut n.blocks[1].ffn.w1, &grads.blocks[1].ffn.w1);
        check(&|n| &n.blocks[1].ffn.b2, &|n| &mut n.blocks[1].ffn.b2, &grads.blocks[1].ffn.b2);
        check(&|n| &n.blocks[0].ln1.gain, &|n| &mut n.blocks[0].ln1.gain, &grads.blocks[0].ln1.gain);
        check(&|n| &n.ln_f.gain, &|n| &mut n.ln_f.gain, &grads.ln_f.gain);
        assert!(worst < 1e-5, "worst relative deviation {worst}");
    }
}
