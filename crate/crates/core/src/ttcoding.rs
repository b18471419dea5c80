//! Tensor coding layer: a tensor-train factorized embedding table over the
//! `M^d` cells of a `d`-dimensional grid.
//!
//! Core `k` has shape `(r_{k-1}, M, m_k, r_k)` with `r_0 = r_d = 1` and
//! `prod(m_k) = D`. The embedding of a multi-index `(i_1, ..., i_d)` is the
//! chain product of the slices `G_k[:, i_k, :, :]`, contracted left to right,
//! so the `M^d x D` table is never built. Output position ordering follows
//! core order with the first core's `m` index varying slowest.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default entry cap for [`TTCores::materialize`].
pub const MATERIALIZE_CAP: usize = 10_000_000;

/// One 4-way core, row-major `(r_left, axis_len, m, r_right)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Core {
    pub r_left: usize,
    pub axis_len: usize,
    pub m: usize,
    pub r_right: usize,
    pub data: Vec<f64>,
}

impl Core {
    pub fn zeros(r_left: usize, axis_len: usize, m: usize, r_right: usize) -> Self {
        Core {
            r_left,
            axis_len,
            m,
            r_right,
            data: vec![0.0; r_left * axis_len * m * r_right],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.r_left, self.axis_len, self.m, self.r_right]
    }

    /// Size of one grid slice `G[:, i, :, :]`.
    fn slice_len(&self) -> usize {
        self.m * self.r_right
    }

    #[inline]
    fn offset(&self, a: usize, i: usize) -> usize {
        (a * self.axis_len + i) * self.slice_len()
    }

    /// Slice `i` as a contiguous `(r_left, m * r_right)` copy.
    pub fn grid_slice(&self, i: usize) -> Vec<f64> {
        let n = self.slice_len();
        let mut out = Vec::with_capacity(self.r_left * n);
        for a in 0..self.r_left {
            let o = self.offset(a, i);
            out.extend_from_slice(&self.data[o..o + n]);
        }
        out
    }
}

/// The chain of cores; one per physical dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTCores {
    pub cores: Vec<Core>,
}

/// Splits `embed_dim` into `d` factors, as equal as possible, largest first.
/// Factors equal to 1 pad when `embed_dim` has fewer prime factors than `d`.
pub fn plan_factors(d: usize, embed_dim: usize) -> Result<Vec<usize>> {
    if d == 0 {
        return Err(Error::invalid("need at least one dimension"));
    }
    if embed_dim == 0 {
        return Err(Error::invalid("embedding size must be >= 1"));
    }
    let mut primes = Vec::new();
    let mut n = embed_dim;
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            primes.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        primes.push(n);
    }
    // greedy: largest prime onto the currently smallest factor
    let mut factors = vec![1usize; d];
    for &q in primes.iter().rev() {
        let k = (0..d).min_by_key(|&k| (factors[k], k)).unwrap();
        factors[k] *= q;
    }
    factors.sort_unstable_by(|a, b| b.cmp(a));
    Ok(factors)
}

fn ranks(d: usize, rank: usize) -> Vec<usize> {
    (0..=d)
        .map(|k| if k == 0 || k == d { 1 } else { rank })
        .collect()
}

/// Intermediate left states from one forward contraction, kept for backward.
#[derive(Debug, Default)]
pub struct EmbedTrace {
    /// `states[k]` is the `(P_k, r_k)` product of the first `k` slices.
    states: Vec<Vec<f64>>,
}

impl TTCores {
    /// Gaussian cores. Core `k` uses standard deviation `r_{k-1}^{-1/2}` so that
    /// reconstructed entries have unit variance regardless of rank.
    pub fn init(d: usize, axis_len: usize, factors: &[usize], rank: usize, seed: u64) -> Result<Self> {
        Self::check_args(d, axis_len, factors, rank)?;
        let r = ranks(d, rank);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cores = (0..d)
            .map(|k| {
                let normal = Normal::new(0.0, (1.0 / r[k] as f64).sqrt()).unwrap();
                let mut core = Core::zeros(r[k], axis_len, factors[k], r[k + 1]);
                for v in core.data.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
                core
            })
            .collect();
        Ok(TTCores { cores })
    }

    /// Cores with every entry equal to `value`.
    pub fn filled(d: usize, axis_len: usize, factors: &[usize], rank: usize, value: f64) -> Result<Self> {
        Self::check_args(d, axis_len, factors, rank)?;
        let r = ranks(d, rank);
        let cores = (0..d)
            .map(|k| {
                let mut core = Core::zeros(r[k], axis_len, factors[k], r[k + 1]);
                core.data.iter_mut().for_each(|v| *v = value);
                core
            })
            .collect();
        Ok(TTCores { cores })
    }

    fn check_args(d: usize, axis_len: usize, factors: &[usize], rank: usize) -> Result<()> {
        if d == 0 || factors.len() != d {
            return Err(Error::Shape(format!(
                "need one output factor per dimension ({d}), got {}",
                factors.len()
            )));
        }
        if rank == 0 || axis_len < 2 || factors.iter().any(|&m| m == 0) {
            return Err(Error::invalid("rank >= 1, axis_len >= 2 and factors >= 1 required"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.cores.len();
        if d == 0 {
            return Err(Error::Shape("no cores".into()));
        }
        if self.cores[0].r_left != 1 || self.cores[d - 1].r_right != 1 {
            return Err(Error::Shape("boundary ranks must be 1".into()));
        }
        let m = self.axis_len();
        for (k, c) in self.cores.iter().enumerate() {
            if c.axis_len != m {
                return Err(Error::Shape(format!("core {k} has axis length {}, expected {m}", c.axis_len)));
            }
            if c.data.len() != c.r_left * c.axis_len * c.m * c.r_right {
                return Err(Error::Shape(format!("core {k} buffer does not match its shape")));
            }
            if k + 1 < d && c.r_right != self.cores[k + 1].r_left {
                return Err(Error::Shape(format!("rank mismatch between cores {k} and {}", k + 1)));
            }
            if c.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("core {k} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.cores.len()
    }

    pub fn axis_len(&self) -> usize {
        self.cores[0].axis_len
    }

    pub fn embed_dim(&self) -> usize {
        self.cores.iter().map(|c| c.m).product()
    }

    pub fn factors(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.m).collect()
    }

    /// `sum_k r_{k-1} * M * m_k * r_k`.
    pub fn param_count(&self) -> usize {
        self.cores.iter().map(|c| c.data.len()).sum()
    }

    fn check_index(&self, index: &[usize]) -> Result<()> {
        if index.len() != self.dim() {
            return Err(Error::Shape(format!(
                "multi-index has {} entries, expected {}",
                index.len(),
                self.dim()
            )));
        }
        let m = self.axis_len();
        for (k, &i) in index.iter().enumerate() {
            if i >= m {
                return Err(Error::IndexOutOfRange {
                    dim: k,
                    index: i,
                    axis_len: m,
                });
            }
        }
        Ok(())
    }

    /// Embedding vector of one multi-index.
    pub fn embed(&self, index: &[usize]) -> Result<Vec<f64>> {
        self.check_index(index)?;
        let mut trace = EmbedTrace::default();
        self.embed_traced(index, &mut trace);
        Ok(trace.states.pop().unwrap())
    }

    /// Forward contraction recording every intermediate state. Indices must
    /// already be validated.
    pub(crate) fn embed_traced(&self, index: &[usize], trace: &mut EmbedTrace) {
        trace.states.clear();
        trace.states.push(vec![1.0]);
        let mut rows = 1;
        for (core, &i) in self.cores.iter().zip(index) {
            let prev = trace.states.last().unwrap();
            let n = core.slice_len();
            let mut next = vec![0.0; rows * n];
            for p in 0..rows {
                let out = &mut next[p * n..(p + 1) * n];
                for a in 0..core.r_left {
                    let s = prev[p * core.r_left + a];
                    let o = core.offset(a, i);
                    for (dst, g) in out.iter_mut().zip(&core.data[o..o + n]) {
                        *dst += s * g;
                    }
                }
            }
            rows *= core.m;
            trace.states.push(next);
        }
    }

    /// Output of the last [`TTCores::embed_traced`] call.
    pub(crate) fn trace_output(trace: &EmbedTrace) -> &[f64] {
        trace.states.last().unwrap()
    }

    /// Accumulates `d loss / d core` into `grads` given `d loss / d embedding`.
    pub(crate) fn embed_backward(
        &self,
        index: &[usize],
        trace: &EmbedTrace,
        grad_out: &[f64],
        grads: &mut TTCores,
    ) {
        let mut upstream = grad_out.to_vec();
        let mut rows = self.embed_dim();
        for k in (0..self.dim()).rev() {
            let core = &self.cores[k];
            let gcore = &mut grads.cores[k];
            let i = index[k];
            let n = core.slice_len();
            rows /= core.m;
            let prev = &trace.states[k];
            let mut down = vec![0.0; rows * core.r_left];
            for p in 0..rows {
                let up = &upstream[p * n..(p + 1) * n];
                for a in 0..core.r_left {
                    let s = prev[p * core.r_left + a];
                    let o = core.offset(a, i);
                    let g = &core.data[o..o + n];
                    let dg = &mut gcore.data[o..o + n];
                    let mut acc = 0.0;
                    for j in 0..n {
                        dg[j] += s * up[j];
                        acc += up[j] * g[j];
                    }
                    down[p * core.r_left + a] = acc;
                }
            }
            upstream = down;
        }
    }

    /// Full `M^d x D` table, rows in lexicographic multi-index order (last
    /// dimension fastest). Oracle use only.
    pub fn materialize(&self) -> Result<Vec<f64>> {
        self.materialize_capped(MATERIALIZE_CAP)
    }

    pub fn materialize_capped(&self, cap: usize) -> Result<Vec<f64>> {
        let m = self.axis_len();
        let dd = self.embed_dim();
        let entries = (0..self.dim())
            .try_fold(dd, |acc, _| acc.checked_mul(m))
            .unwrap_or(usize::MAX);
        if entries > cap {
            return Err(Error::TooLarge { entries, cap });
        }
        // independent route from embed: build the table core by core as a
        // (rows x cols x rank) tensor and append one physical index at a time
        // (rows: multi-index prefix, cols: output prefix)
        let mut table = vec![1.0];
        let (mut rows, mut cols, mut rank) = (1usize, 1usize, 1usize);
        for core in &self.cores {
            let (m_out, r_next) = (core.m, core.r_right);
            let mut next = vec![0.0; rows * m * cols * m_out * r_next];
            for row in 0..rows {
                for i in 0..m {
                    for col in 0..cols {
                        for a in 0..rank {
                            let s = table[(row * cols + col) * rank + a];
                            for mo in 0..m_out {
                                for b in 0..r_next {
                                    let g = core.data[((a * m + i) * m_out + mo) * r_next + b];
                                    let dst = (((row * m + i) * cols + col) * m_out + mo) * r_next + b;
                                    next[dst] += s * g;
                                }
                            }
                        }
                    }
                }
            }
            table = next;
            rows *= m;
            cols *= m_out;
            rank = r_next;
        }
        Ok(table)
    }

    /// Linear prolongation along the grid axis: `M -> 2M - 1`. Even fine
    /// slices copy coarse slices; odd fine slices average their neighbors.
    pub fn prolong(&self) -> TTCores {
        TTCores {
            cores: self.cores.iter().map(prolong_core).collect(),
        }
    }

    /// Keeps the even grid slices: the left inverse of [`TTCores::prolong`].
    pub fn restrict(&self) -> TTCores {
        TTCores {
            cores: self
                .cores
                .iter()
                .map(|c| {
                    let coarse_len = (c.axis_len + 1) / 2;
                    let mut out = Core::zeros(c.r_left, coarse_len, c.m, c.r_right);
                    let n = c.slice_len();
                    for a in 0..c.r_left {
                        for i in 0..coarse_len {
                            let src = c.offset(a, 2 * i);
                            let dst = out.offset(a, i);
                            out.data[dst..dst + n].copy_from_slice(&c.data[src..src + n]);
                        }
                    }
                    out
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> TTCores {
        TTCores {
            cores: self
                .cores
                .iter()
                .map(|c| Core::zeros(c.r_left, c.axis_len, c.m, c.r_right))
                .collect(),
        }
    }
}

fn prolong_core(c: &Core) -> Core {
    let fine_len = 2 * c.axis_len - 1;
    let mut out = Core::zeros(c.r_left, fine_len, c.m, c.r_right);
    let n = c.slice_len();
    for a in 0..c.r_left {
        for i in 0..c.axis_len {
            let src = c.offset(a, i);
            let dst = out.offset(a, 2 * i);
            out.data[dst..dst + n].copy_from_slice(&c.data[src..src + n]);
            if i + 1 < c.axis_len {
                let nb = c.offset(a, i + 1);
                let mid = out.offset(a, 2 * i + 1);
                for j in 0..n {
                    out.data[mid + j] = 0.5 * (c.data[src + j] + c.data[nb + j]);
                }
            }
        }
    }
    out
}

/// Rows of a row-major `(rows, width)` matrix prolonged with the same
/// even/odd rule as the cores.
pub fn prolong_rows(data: &[f64], rows: usize, width: usize) -> Vec<f64> {
    let fine = 2 * rows - 1;
    let mut out = vec![0.0; fine * width];
    for i in 0..rows {
        let src = &data[i * width..(i + 1) * width];
        out[2 * i * width..(2 * i + 1) * width].copy_from_slice(src);
        if i + 1 < rows {
            let nb = &data[(i + 1) * width..(i + 2) * width];
            let mid = &mut out[(2 * i + 1) * width..(2 * i + 2) * width];
            for j in 0..width {
                mid[j] = 0.5 * (src[j] + nb[j]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_indices(d: usize, m: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..d {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..m).map(move |i| {
                        let mut q = p.clone();
                        q.push(i);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn plan_factors_examples() {
        assert_eq!(plan_factors(3, 729).unwrap(), vec![9, 9, 9]);
        let mut expected = vec![2; 10];
        expected.extend(vec![1; 6]);
        assert_eq!(plan_factors(16, 1024).unwrap(), expected);
        assert_eq!(plan_factors(1, 7).unwrap(), vec![7]);
        assert_eq!(plan_factors(3, 128).unwrap(), vec![8, 4, 4]);
        assert_eq!(plan_factors(2, 1).unwrap(), vec![1, 1]);
        assert!(plan_factors(3, 0).is_err());
        for d in 1..6 {
            for dd in 1..200 {
                let f = plan_factors(d, dd).unwrap();
                assert_eq!(f.iter().product::<usize>(), dd);
                assert!(f.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn all_ones_rank_one() {
        let tt = TTCores::filled(3, 4, &[2, 3, 1], 1, 1.0).unwrap();
        assert_eq!(tt.embed(&[0, 3, 2]).unwrap(), vec![1.0; 6]);
        assert!(tt.materialize().unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rank_one_is_outer_product() {
        let mut tt = TTCores::filled(2, 2, &[2, 3], 1, 0.0).unwrap();
        let u = [2.0, -1.0];
        let v = [0.5, 3.0, 7.0];
        tt.cores[0].data[2..4].copy_from_slice(&u); // slice i=1
        tt.cores[1].data[0..3].copy_from_slice(&v); // slice i=0
        let e = tt.embed(&[1, 0]).unwrap();
        let expected: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        assert_eq!(e, expected);
    }

    #[test]
    fn embed_matches_materialize() {
        for &(d, m, r, dd) in &[(3usize, 3usize, 2usize, 8usize), (4, 3, 3, 16), (1, 5, 4, 6)] {
            let f = plan_factors(d, dd).unwrap();
            let tt = TTCores::init(d, m, &f, r, 42).unwrap();
            let table = tt.materialize().unwrap();
            for (row, idx) in all_indices(d, m).iter().enumerate() {
                let e = tt.embed(idx).unwrap();
                for (a, b) in e.iter().zip(&table[row * dd..(row + 1) * dd]) {
                    assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn d1_materialize_is_core() {
        let tt = TTCores::init(1, 4, &[3], 5, 1).unwrap();
        assert_eq!(tt.materialize().unwrap(), tt.cores[0].data);
    }

    #[test]
    fn permuted_index_changes_output() {
        let tt = TTCores::init(3, 4, &[2, 2, 2], 3, 9).unwrap();
        let a = tt.embed(&[0, 1, 3]).unwrap();
        let b = tt.embed(&[3, 1, 0]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn embed_rejects_bad_index() {
        let tt = TTCores::init(2, 3, &[2, 2], 2, 0).unwrap();
        assert!(matches!(tt.embed(&[0, 3]), Err(Error::IndexOutOfRange { dim: 1, .. })));
        assert!(tt.embed(&[0]).is_err());
    }

    #[test]
    fn materialize_cap() {
        let tt = TTCores::init(4, 9, &[4, 4, 4, 4], 2, 0).unwrap();
        assert!(matches!(tt.materialize_capped(1000), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn init_variance_near_one() {
        use rand::Rng;
        let f = plan_factors(3, 729).unwrap();
        let tt = TTCores::init(3, 5, &f, 16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
        for _ in 0..1000 {
            let idx: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
            for v in tt.embed(&idx).unwrap() {
                s += v;
                s2 += v * v;
                n += 1.0;
            }
        }
        let var = s2 / n - (s / n).powi(2);
        assert!((0.5..=2.0).contains(&var), "variance {var}");
        assert_eq!(tt, TTCores::init(3, 5, &f, 16, 3).unwrap());
    }

    #[test]
    fn param_count_formula() {
        let tt = TTCores::init(4, 5, &[2, 2, 2, 2], 3, 0).unwrap();
        // 1*5*2*3 + 3*5*2*3 + 3*5*2*3 + 3*5*2*1
        assert_eq!(tt.param_count(), 30 + 90 + 90 + 30);
        let tt8 = TTCores::init(8, 5, &[2; 8], 3, 0).unwrap();
        assert_eq!(tt8.param_count(), 30 + 6 * 90 + 30);
    }

    #[test]
    fn prolong_two_slices() {
        let mut core = Core::zeros(1, 2, 2, 1);
        core.data = vec![1.0, 2.0, 3.0, 6.0];
        let tt = TTCores { cores: vec![core] };
        let p = tt.prolong();
        assert_eq!(p.cores[0].data, vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert_eq!(p.cores[0].axis_len, 3);
    }

    #[test]
    fn prolong_preserves_even_embeddings_and_restricts_back() {
        let tt = TTCores::init(3, 3, &[2, 2, 2], 4, 5).unwrap();
        let fine = tt.prolong();
        assert_eq!(fine.axis_len(), 5);
        assert_eq!(fine.restrict(), tt);
        for idx in all_indices(3, 3) {
            let even: Vec<usize> = idx.iter().map(|i| 2 * i).collect();
            assert_eq!(fine.embed(&even).unwrap(), tt.embed(&idx).unwrap());
        }
        let twice = fine.prolong();
        assert_eq!(twice.axis_len(), 4 * 3 - 3);
        assert_eq!(twice.restrict().restrict(), tt);
    }

    #[test]
    fn prolong_adds_no_extrema() {
        let tt = TTCores::init(2, 6, &[3, 2], 2, 8).unwrap();
        let fine = tt.prolong();
        for (c, f) in tt.cores.iter().zip(&fine.cores) {
            for a in 0..c.r_left {
                for j in 0..c.slice_len() {
                    let coarse: Vec<f64> = (0..c.axis_len).map(|i| c.data[c.offset(a, i) + j]).collect();
                    let lo = coarse.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = coarse.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    for i in 0..f.axis_len {
                        let v = f.data[f.offset(a, i) + j];
                        assert!(v >= lo && v <= hi);
                    }
                    for i in 0..c.axis_len - 1 {
                        let mid = f.data[f.offset(a, 2 * i + 1) + j];
                        let (x, y) = (coarse[i], coarse[i + 1]);
                        assert!(mid >= x.min(y) && mid <= x.max(y));
                    }
                }
            }
        }
    }

    #[test]
    fn prolong_rows_rule() {
        let rows = vec![1.0, 10.0, 3.0, 20.0];
        assert_eq!(prolong_rows(&rows, 2, 2), vec![1.0, 10.0, 2.0, 15.0, 3.0, 20.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let tt = TTCores::init(3, 3, &[2, 3, 2], 3, 17).unwrap();
        let indices = [[0usize, 2, 1], [2, 2, 0], [1, 0, 1]];
        let dd = tt.embed_dim();
        let weights: Vec<f64> = (0..dd).map(|j| ((j * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let loss = |t: &TTCores| -> f64 {
            indices
                .iter()
                .map(|idx| {
                    let e = t.embed(idx).unwrap();
                    e.iter().zip(&weights).map(|(a, w)| (a * w).sin()).sum::<f64>()
                })
                .sum()
        };
        let mut grads = tt.zeros_like();
        let mut trace = EmbedTrace::default();
        for idx in &indices {
            tt.embed_traced(idx, &mut trace);
            let e = TTCores::trace_output(&trace).to_vec();
            let g: Vec<f64> = e.iter().zip(&weights).map(|(a, w)| w * (a * w).cos()).collect();
            tt.embed_backward(idx, &trace, &g, &mut grads);
        }
        let h = 1e-6;
        for k in 0..tt.dim() {
            for j in 0..tt.cores[k].data.len() {
                let mut plus = tt.clone();
                plus.cores[k].data[j] += h;
                let mut minus = tt.clone();
                minus.cores[k].data[j] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads.cores[k].data[j];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "core {k} entry {j}: {fd} vs {an}");
            }
        }
    }
}
