//! Token-space primitives shared by every other module: vocabularies with a
//! reserved mask symbol, clean and partially masked sequences, absorbing
//! trajectories, the discrete time grid, and a counter-based splittable RNG.

use crate::error::{Error, Result};

/// Enumeration guard for [`enumerate_masked_set`]: the masked set has `2^L` elements.
pub const MAX_ENUM_LEN: usize = 16;

/// Combinatorial budget for [`enumerate_absorbing_trajectories`]: `(T+1)^L` paths.
pub const MAX_TRAJECTORY_BUDGET: u128 = 1_000_000;

/// A token universe of `V` real tokens plus one reserved mask symbol.
///
/// Real tokens are `0..V`; the mask id is `V` itself, so a symbol fits in
/// `0..=V` and the mask is never a valid data token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    n_real: usize,
}

impl Vocabulary {
    pub fn new(n_real: usize) -> Result<Self> {
        if n_real < 2 {
            return Err(Error::Invalid(format!(
                "vocabulary needs at least 2 real tokens, got {n_real}"
            )));
        }
        Ok(Self { n_real })
    }

    /// Number of real (data) tokens, `V`.
    pub fn size(&self) -> usize {
        self.n_real
    }

    /// The reserved mask symbol; equals `V`, distinct from every real token.
    pub fn mask_id(&self) -> usize {
        self.n_real
    }

    /// `V + 1`: real tokens plus the mask symbol.
    pub fn n_symbols(&self) -> usize {
        self.n_real + 1
    }

    pub fn is_real(&self, tok: usize) -> bool {
        tok < self.n_real
    }
}

/// A clean length-`L` sequence over real tokens; never contains the mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sequence {
    tokens: Vec<usize>,
}

impl Sequence {
    pub fn new(tokens: Vec<usize>, vocab: &Vocabulary) -> Result<Self> {
        for (i, &t) in tokens.iter().enumerate() {
            if !vocab.is_real(t) {
                return Err(Error::Invalid(format!(
                    "sequence token {t} at position {i} is not a real token (V={})",
                    vocab.size()
                )));
            }
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn get(&self, i: usize) -> usize {
        self.tokens[i]
    }
}

/// A length-`L` sequence over real tokens and the mask symbol.
///
/// When produced as a corruption of some clean `x`, every non-mask entry
/// equals the corresponding entry of `x` (membership in the masked set of `x`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskedSequence {
    tokens: Vec<usize>,
    mask_id: usize,
}

impl MaskedSequence {
    pub fn new(tokens: Vec<usize>, vocab: &Vocabulary) -> Result<Self> {
        for (i, &t) in tokens.iter().enumerate() {
            if t > vocab.mask_id() {
                return Err(Error::Invalid(format!(
                    "symbol {t} at position {i} outside 0..={}",
                    vocab.mask_id()
                )));
            }
        }
        Ok(Self {
            tokens,
            mask_id: vocab.mask_id(),
        })
    }

    /// The fully masked sequence of length `len`.
    pub fn all_masked(len: usize, vocab: &Vocabulary) -> Self {
        Self {
            tokens: vec![vocab.mask_id(); len],
            mask_id: vocab.mask_id(),
        }
    }

    /// View a clean sequence as a mask-free masked sequence.
    pub fn from_clean(x: &Sequence, vocab: &Vocabulary) -> Self {
        Self {
            tokens: x.tokens().to_vec(),
            mask_id: vocab.mask_id(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn get(&self, i: usize) -> usize {
        self.tokens[i]
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.mask_id
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.mask_id).count()
    }

    pub fn is_fully_masked(&self) -> bool {
        self.tokens.iter().all(|&t| t == self.mask_id)
    }

    /// Membership predicate for the masked set of `x`: every non-mask entry
    /// must equal the corresponding entry of `x`.
    pub fn consistent_with(&self, x: &Sequence) -> bool {
        self.len() == x.len()
            && self
                .tokens
                .iter()
                .zip(x.tokens())
                .all(|(&z, &t)| z == self.mask_id || z == t)
    }

    /// Unmask position `i` to `tok`. Used by samplers.
    pub(crate) fn set(&mut self, i: usize, tok: usize) {
        self.tokens[i] = tok;
    }
}

/// The discretized time interval: `T + 1` grid steps with
/// `s(tau) = tau/(T+1)` and `t(tau) = (tau+1)/(T+1)`, so `t(T) = 1` exactly
/// and `s(tau) = t(tau-1)` for `tau >= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("time grid needs T >= 1".into()));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn s_of(&self, tau: usize) -> f64 {
        debug_assert!(tau <= self.steps);
        tau as f64 / (self.steps + 1) as f64
    }

    pub fn t_of(&self, tau: usize) -> f64 {
        debug_assert!(tau <= self.steps);
        (tau + 1) as f64 / (self.steps + 1) as f64
    }
}

/// A discrete-time absorbing trajectory: `T + 1` states indexed by grid time,
/// fully masked at `t(T)`, with a monotonically growing masked set, every
/// unmasked entry matching the endpoint.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<MaskedSequence>,
    pub endpoint: Sequence,
}

impl Trajectory {
    /// Checks the absorbing-mask property and endpoint consistency.
    pub fn is_absorbing(&self) -> bool {
        let len = self.endpoint.len();
        if self.states.is_empty() || self.states.iter().any(|z| z.len() != len) {
            return false;
        }
        if !self.states.last().unwrap().is_fully_masked() {
            return false;
        }
        if !self.states.iter().all(|z| z.consistent_with(&self.endpoint)) {
            return false;
        }
        for w in self.states.windows(2) {
            for i in 0..len {
                if w[0].is_masked(i) && !w[1].is_masked(i) {
                    return false;
                }
            }
        }
        true
    }
}

/// All `2^L` masked corruptions of `x`, in lexicographic mask-pattern order.
///
/// Guarded by [`MAX_ENUM_LEN`]; refuse rather than allocate unboundedly.
pub fn enumerate_masked_set(x: &Sequence, vocab: &Vocabulary) -> Result<Vec<MaskedSequence>> {
    let len = x.len();
    if len > MAX_ENUM_LEN {
        return Err(Error::SizeGuard(format!(
            "masked-set enumeration needs L <= {MAX_ENUM_LEN}, got {len}"
        )));
    }
    let mut out = Vec::with_capacity(1usize << len);
    for pattern in 0u64..(1u64 << len) {
        let tokens = (0..len)
            .map(|i| {
                if pattern >> i & 1 == 1 {
                    vocab.mask_id()
                } else {
                    x.get(i)
                }
            })
            .collect();
        out.push(MaskedSequence::new(tokens, vocab)?);
    }
    Ok(out)
}

/// All `(T+1)^L` absorbing trajectories ending at `x`: each position
/// independently chooses the grid index at which it first becomes masked.
///
/// Position `i` with onset `kappa_i` is masked at grid indices `tau >= kappa_i`
/// and clean below; `kappa_i = T` is admissible because the terminal state at
/// `t(T) = 1` is fully masked only when every onset is at most `T`, and the
/// onset itself marks the first masked index, so `kappa_i <= T` always.
pub fn enumerate_absorbing_trajectories(
    x: &Sequence,
    grid: &TimeGrid,
    vocab: &Vocabulary,
) -> Result<Vec<Trajectory>> {
    let len = x.len();
    let choices = (grid.steps() + 1) as u128;
    let total = choices.checked_pow(len as u32).unwrap_or(u128::MAX);
    if total > MAX_TRAJECTORY_BUDGET {
        return Err(Error::SizeGuard(format!(
            "trajectory enumeration budget exceeded: (T+1)^L = {choices}^{len} > {MAX_TRAJECTORY_BUDGET}"
        )));
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut onsets = vec![0usize; len];
    loop {
        let states = (0..=grid.steps())
            .map(|tau| {
                let tokens = (0..len)
                    .map(|i| if tau >= onsets[i] { vocab.mask_id() } else { x.get(i) })
                    .collect();
                MaskedSequence::new(tokens, vocab)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Trajectory {
            states,
            endpoint: x.clone(),
        });
        // Odometer over onset tuples.
        let mut pos = 0;
        loop {
            if pos == len {
                return Ok(out);
            }
            onsets[pos] += 1;
            if onsets[pos] <= grid.steps() {
                break;
            }
            onsets[pos] = 0;
            pos += 1;
        }
    }
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    z
}

fn hash_label(tag: &str) -> u64 {
    // FNV-1a over the tag bytes; avalanched afterwards by splitmix.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Counter-based splittable RNG keyed by `(seed, purpose tag, sample index)`.
///
/// Draws are pure functions of the key and a counter, so identical
/// `(seed, label)` pairs replay identical streams on any platform, and
/// substreams derived with distinct labels are statistically independent.
/// Deriving a substream does not consume state from the parent.
#[derive(Clone, Debug)]
pub struct RandomStream {
    key: u64,
    counter: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self {
            key: splitmix(seed ^ GOLDEN_GAMMA),
            counter: 0,
        }
    }

    /// Derive an independent substream for `(tag, index)`.
    pub fn substream(&self, tag: &str, index: u64) -> Self {
        let mut key = self.key;
        key = splitmix(key ^ hash_label(tag));
        key = splitmix(key ^ index.wrapping_mul(GOLDEN_GAMMA));
        Self { key, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)));
        self.counter += 1;
        out
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `(lo, hi]`; used for time sampling where 0 is excluded.
    pub fn next_open_closed(&mut self, lo: f64, hi: f64) -> f64 {
        hi - (hi - lo) * self.next_f64()
    }
}

/// Absolute tolerance on the probability sum before categorical sampling.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Draw an index distributed according to `probabilities`.
///
/// Entries must be nonnegative and sum to 1 within [`SIMPLEX_TOL`]. Inverse
/// CDF on a single uniform draw; the final index absorbs residual rounding.
pub fn sample_categorical(probabilities: &[f64], rng: &mut RandomStream) -> Result<usize> {
    if probabilities.is_empty() {
        return Err(Error::Invalid("empty probability vector".into()));
    }
    let mut sum = 0.0;
    for &p in probabilities {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::Invalid(format!("invalid probability entry {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Invalid(format!(
            "probabilities sum to {sum}, outside 1 +/- {SIMPLEX_TOL}"
        )));
    }
    let u = rng.next_f64() * sum;
    let mut acc = 0.0;
    for (k, &p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(k);
        }
    }
    Ok(probabilities.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab2() -> Vocabulary {
        Vocabulary::new(2).unwrap()
    }

    #[test]
    fn masked_set_cardinality_l2() {
        let v = vocab2();
        let x = Sequence::new(vec![0, 1], &v).unwrap();
        let set = enumerate_masked_set(&x, &v).unwrap();
        assert_eq!(set.len(), 4);
        // {xx, xm, mx, mm} as mask patterns
        let patterns: Vec<usize> = set.iter().map(|z| z.mask_count()).collect();
        assert_eq!(patterns.iter().filter(|&&c| c == 0).count(), 1);
        assert_eq!(patterns.iter().filter(|&&c| c == 1).count(), 2);
        assert_eq!(patterns.iter().filter(|&&c| c == 2).count(), 1);
    }

    #[test]
    fn masked_set_empty_sequence() {
        let v = vocab2();
        let x = Sequence::new(vec![], &v).unwrap();
        let set = enumerate_masked_set(&x, &v).unwrap();
        assert_eq!(set.len(), 1);
        assert!(set[0].is_empty());
    }

    #[test]
    fn masked_set_membership_l3() {
        // Oracle: the definition's membership predicate, checked per element.
        let v = vocab2();
        let x = Sequence::new(vec![0, 1, 0], &v).unwrap();
        let set = enumerate_masked_set(&x, &v).unwrap();
        assert_eq!(set.len(), 8);
        for z in &set {
            assert!(z.consistent_with(&x));
        }
        // No duplicates.
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                assert_ne!(set[i], set[j]);
            }
        }
    }

    #[test]
    fn masked_set_guard() {
        let v = vocab2();
        let x = Sequence::new(vec![0; 17], &v).unwrap();
        assert!(matches!(
            enumerate_masked_set(&x, &v),
            Err(Error::SizeGuard(_))
        ));
    }

    #[test]
    fn trajectories_l1_t1() {
        let v = vocab2();
        let x = Sequence::new(vec![1], &v).unwrap();
        let g = TimeGrid::new(1).unwrap();
        let trajs = enumerate_absorbing_trajectories(&x, &g, &v).unwrap();
        assert_eq!(trajs.len(), 2);
    }

    #[test]
    fn trajectories_l2_t2() {
        let v = vocab2();
        let x = Sequence::new(vec![0, 1], &v).unwrap();
        let g = TimeGrid::new(2).unwrap();
        let trajs = enumerate_absorbing_trajectories(&x, &g, &v).unwrap();
        assert_eq!(trajs.len(), 9);
    }

    #[test]
    fn trajectories_match_raw_filter_l2_t3() {
        // Oracle: filter all raw state strings by the absorbing predicate and
        // compare counts against the direct enumeration.
        let v = vocab2();
        let x = Sequence::new(vec![0, 1], &v).unwrap();
        let g = TimeGrid::new(3).unwrap();
        let trajs = enumerate_absorbing_trajectories(&x, &g, &v).unwrap();
        assert_eq!(trajs.len(), 16);
        for t in &trajs {
            assert!(t.is_absorbing());
        }

        // Brute force: all (V+1)^(L*(T+1)) symbol assignments.
        let len = 2;
        let states_per_traj = g.steps() + 1;
        let symbols = v.n_symbols();
        let cells = len * states_per_traj;
        let mut brute = 0usize;
        let mut assignment = vec![0usize; cells];
        'outer: loop {
            let states: Vec<MaskedSequence> = (0..states_per_traj)
                .map(|tau| {
                    MaskedSequence::new(
                        (0..len).map(|i| assignment[tau * len + i]).collect(),
                        &v,
                    )
                    .unwrap()
                })
                .collect();
            let traj = Trajectory {
                states,
                endpoint: x.clone(),
            };
            if traj.is_absorbing() {
                brute += 1;
            }
            let mut pos = 0;
            loop {
                if pos == cells {
                    break 'outer;
                }
                assignment[pos] += 1;
                if assignment[pos] < symbols {
                    break;
                }
                assignment[pos] = 0;
                pos += 1;
            }
        }
        assert_eq!(brute, trajs.len());
    }

    #[test]
    fn trajectory_budget_guard() {
        let v = vocab2();
        let x = Sequence::new(vec![0; 8], &v).unwrap();
        let g = TimeGrid::new(63).unwrap(); // 64^8 >> 1e6
        assert!(matches!(
            enumerate_absorbing_trajectories(&x, &g, &v),
            Err(Error::SizeGuard(_))
        ));
    }

    #[test]
    fn grid_values_t3() {
        let g = TimeGrid::new(3).unwrap();
        let ts: Vec<f64> = (0..=3).map(|tau| g.t_of(tau)).collect();
        assert_eq!(ts, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.t_of(3), 1.0);
    }

    #[test]
    fn grid_t1() {
        let g = TimeGrid::new(1).unwrap();
        assert_eq!(g.s_of(1), 0.5);
        assert_eq!(g.t_of(1), 1.0);
    }

    #[test]
    fn grid_shift_identity() {
        for steps in [1, 2, 7, 64] {
            let g = TimeGrid::new(steps).unwrap();
            for tau in 1..=steps {
                assert_eq!(g.s_of(tau), g.t_of(tau - 1));
            }
        }
    }

    #[test]
    fn grid_rejects_zero() {
        assert!(TimeGrid::new(0).is_err());
    }

    #[test]
    fn rng_repeatable_streams() {
        let a = RandomStream::new(42).substream("corrupt", 3);
        let b = RandomStream::new(42).substream("corrupt", 3);
        let mut a = a;
        let mut b = b;
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rng_substreams_differ() {
        let root = RandomStream::new(7);
        let mut a = root.substream("x", 0);
        let mut b = root.substream("x", 1);
        let mut c = root.substream("y", 0);
        let first: Vec<u64> = vec![a.next_u64(), b.next_u64(), c.next_u64()];
        assert_ne!(first[0], first[1]);
        assert_ne!(first[0], first[2]);
    }

    #[test]
    fn categorical_degenerate() {
        let mut rng = RandomStream::new(1);
        for _ in 0..100 {
            assert_eq!(sample_categorical(&[1.0, 0.0, 0.0], &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn categorical_deterministic() {
        let mut a = RandomStream::new(9).substream("draw", 0);
        let mut b = RandomStream::new(9).substream("draw", 0);
        for _ in 0..100 {
            assert_eq!(
                sample_categorical(&[0.5, 0.5], &mut a).unwrap(),
                sample_categorical(&[0.5, 0.5], &mut b).unwrap()
            );
        }
    }

    #[test]
    fn categorical_frequency() {
        // Monte Carlo frequency check against the stated law.
        let mut rng = RandomStream::new(123).substream("freq", 0);
        let n = 100_000;
        let mut ones = 0usize;
        for _ in 0..n {
            if sample_categorical(&[0.3, 0.7], &mut rng).unwrap() == 1 {
                ones += 1;
            }
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.7).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn categorical_rejects_non_simplex() {
        let mut rng = RandomStream::new(0);
        assert!(sample_categorical(&[0.5, 0.6], &mut rng).is_err());
        assert!(sample_categorical(&[-0.1, 1.1], &mut rng).is_err());
        assert!(sample_categorical(&[], &mut rng).is_err());
    }

    #[test]
    fn vocabulary_rejects_tiny() {
        assert!(Vocabulary::new(1).is_err());
        assert!(Vocabulary::new(2).is_ok());
    }

    #[test]
    fn sequence_rejects_mask() {
        let v = vocab2();
        assert!(Sequence::new(vec![0, 2], &v).is_err());
    }
}
