//! Scheduler heads `g_phi` / `g_psi`: one attention block followed by one
//! linear layer producing a scalar per position. The heads consume backbone
//! features through a stop-gradient, so their backward pass never propagates
//! into the feature producer.

use crate::core::RandomStream;
use crate::model::math::sigmoid;
use crate::model::neural::{
    attn_backward, attn_forward, init_linear, ln_backward, ln_forward, AttnCache, Attention,
    LayerNorm, LnCache,
};

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub ln: LayerNorm,
    pub attn: Attention,
    pub w_out: Vec<f64>, // dim
    pub b_out: f64,
    pub dim: usize,
}

impl HeadParams {
    /// The output layer starts at zero so the initial per-position scores are
    /// identical, which pins the initial exponents to exactly `c1`.
    pub fn init(dim: usize, rng: &mut RandomStream) -> Self {
        Self {
            ln: LayerNorm::new(dim),
            attn: Attention::init(dim, 1, &mut rng.substream("head-attn", 0)),
            w_out: vec![0.0; dim],
            b_out: 0.0,
            dim,
        }
    }

    /// Nonzero output weights; used by the verification suites that need a
    /// non-degenerate scheduler straight away.
    pub fn init_active(dim: usize, rng: &mut RandomStream) -> Self {
        let mut h = Self::init(dim, rng);
        h.w_out = init_linear(dim, 1, &mut rng.substream("head-out", 0));
        h.b_out = 0.0;
        h
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ln: LayerNorm::zeros(self.dim),
            attn: Attention::zeros(self.dim, 1),
            w_out: vec![0.0; self.dim],
            b_out: 0.0,
            dim: self.dim,
        }
    }
}

pub struct HeadCache {
    pub features: Vec<f64>,
    pub ln: LnCache,
    pub attn: AttnCache,
    pub resid: Vec<f64>, // l x dim
    pub len: usize,
}

/// Per-position scalar scores from an `l x dim` feature matrix.
pub fn head_forward(head: &HeadParams, features: &[f64], l: usize) -> (Vec<f64>, HeadCache) {
    let d = head.dim;
    debug_assert_eq!(features.len(), l * d);
    let (normed, lnc) = ln_forward(&head.ln, features, l, d);
    let (attn_out, attnc) = attn_forward(&head.attn, &normed, l);
    let mut resid = features.to_vec();
    for i in 0..l * d {
        resid[i] += attn_out[i];
    }
    let scores = (0..l)
        .map(|i| {
            let row = &resid[i * d..(i + 1) * d];
            row.iter().zip(&head.w_out).map(|(a, b)| a * b).sum::<f64>() + head.b_out
        })
        .collect();
    (
        scores,
        HeadCache {
            features: features.to_vec(),
            ln: lnc,
            attn: attnc,
            resid,
            len: l,
        },
    )
}

/// Accumulates head-parameter gradients for upstream `d(scores)`. The
/// gradient w.r.t. the input features is intentionally dropped (stop-grad).
pub fn head_backward(head: &HeadParams, cache: &HeadCache, dscores: &[f64], grads: &mut HeadParams) {
    let d = head.dim;
    let l = cache.len;
    let mut dresid = vec![0.0; l * d];
    for i in 0..l {
        let ds = dscores[i];
        grads.b_out += ds;
        for j in 0..d {
            grads.w_out[j] += ds * cache.resid[i * d + j];
            dresid[i * d + j] = ds * head.w_out[j];
        }
    }
    let dnormed = attn_backward(&head.attn, &cache.attn, &dresid, l, &mut grads.attn);
    let _dfeatures_ln = ln_backward(
        &head.ln,
        &cache.ln,
        &dnormed,
        l,
        d,
        &mut grads.ln.gain,
        &mut grads.ln.bias,
    );
    // residual path d(features) also dropped: features are detached.
}

/// Per-position sigmoid minus the sequence mean of sigmoids. The output sums
/// to zero and every entry lies strictly inside (-1, 1).
pub fn norm_sig(v: &[f64]) -> Vec<f64> {
    let l = v.len();
    if l == 0 {
        return Vec::new();
    }
    let sig: Vec<f64> = v.iter().map(|&x| sigmoid(x)).collect();
    let mean = sig.iter().sum::<f64>() / l as f64;
    sig.iter().map(|s| s - mean).collect()
}

/// Backward of [`norm_sig`]: d(v_j) = sigma'(v_j) * (dout_j - mean(dout)).
pub fn norm_sig_backward(v: &[f64], dout: &[f64]) -> Vec<f64> {
    let l = v.len();
    let mean_dout = dout.iter().sum::<f64>() / l as f64;
    v.iter()
        .zip(dout)
        .map(|(&x, &dy)| {
            let s = sigmoid(x);
            s * (1.0 - s) * (dy - mean_dout)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_sig_symmetric_zero() {
        assert_eq!(norm_sig(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn norm_sig_pair() {
        let out = norm_sig(&[1.0, -1.0]);
        assert!((out[0] - 0.231058578630005).abs() < 1e-12);
        assert!((out[1] + 0.231058578630005).abs() < 1e-12);
    }

    #[test]
    fn norm_sig_sums_to_zero() {
        let mut rng = RandomStream::new(5);
        for trial in 0..50 {
            let v: Vec<f64> = (0..7)
                .map(|i| rng.substream("v", trial * 10 + i).next_f64() * 8.0 - 4.0)
                .collect();
            let sum: f64 = norm_sig(&v).iter().sum();
            assert!(sum.abs() < 1e-12, "sum {sum}");
        }
    }

    #[test]
    fn norm_sig_range_open() {
        let out = norm_sig(&[50.0, -50.0, 0.0]);
        for o in out {
            assert!(o > -1.0 && o < 1.0);
        }
    }

    #[test]
    fn norm_sig_backward_finite_diff() {
        let v = vec![0.3, -1.2, 0.7, 2.0];
        let dout = vec![1.0, -0.5, 0.25, 0.1];
        let grad = norm_sig_backward(&v, &dout);
        let h = 1e-6;
        for j in 0..v.len() {
            let mut vp = v.clone();
            vp[j] += h;
            let mut vm = v.clone();
            vm[j] -= h;
            let fp: f64 = norm_sig(&vp).iter().zip(&dout).map(|(a, b)| a * b).sum();
            let fm: f64 = norm_sig(&vm).iter().zip(&dout).map(|(a, b)| a * b).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_init_head_gives_constant_scores() {
        let mut rng = RandomStream::new(1);
        let head = HeadParams::init(6, &mut rng);
        let features: Vec<f64> = (0..4 * 6).map(|i| (i as f64).sin()).collect();
        let (scores, _) = head_forward(&head, &features, 4);
        assert!(scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn head_backward_finite_diff() {
        let mut rng = RandomStream::new(8);
        let mut head = HeadParams::init_active(6, &mut rng);
        // perturb output layer so gradients flow everywhere
        head.b_out = 0.1;
        let features: Vec<f64> = (0..3 * 6).map(|i| ((i * 5 % 11) as f64 - 5.0) / 5.0).collect();
        let dscores = vec![1.0, -2.0, 0.5];
        let probe = |h: &HeadParams| -> f64 {
            let (s, _) = head_forward(h, &features, 3);
            s.iter().zip(&dscores).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = head_forward(&head, &features, 3);
        let mut grads = head.zeros_like();
        head_backward(&head, &cache, &dscores, &mut grads);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in 0..head.attn.wq.len() {
            let mut plus = head.clone();
            plus.attn.wq[idx] += h;
            let mut minus = head.clone();
            minus.attn.wq[idx] -= h;
            let fd = (probe(&plus) - probe(&minus)) / (2.0 * h);
            worst = worst.max((fd - grads.attn.wq[idx]).abs());
        }
        for idx in 0..head.w_out.len() {
            let mut plus = head.clone();
            plus.w_out[idx] += h;
            let mut minus = head.clone();
            minus.w_out[idx] -= h;
            let fd = (probe(&plus) - probe(&minus)) / (2.0 * h);
            worst = worst.max((fd - grads.w_out[idx]).abs());
        }
        assert!(worst < 1e-7, "worst abs deviation {worst}");
    }
}
