//! Linear-chain CRF: log-likelihood via the forward algorithm in log
//! space (differentiable, on-tape) and Viterbi decoding (plain values).
//!
//! CRF parameters are a K×K transition matrix plus learned start and end
//! score vectors. Path score for tags y_1..y_m:
//! start[y_1] + Σ emissions[k][y_k] + Σ transitions[y_k][y_{k+1}] + end[y_m].

use crate::error::NumericError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub struct CrfVars {
    /// K×K, [from][to]
    pub transitions: Var,
    /// 1×K
    pub start: Var,
    /// 1×K
    pub end: Var,
}

/// log p(gold | emissions) = path_score(gold) − logZ.
pub fn crf_log_likelihood(
    tape: &mut Tape,
    emissions: Var,
    crf: &CrfVars,
    gold: &[usize],
) -> Result<Var, NumericError> {
    let m = tape.value(emissions).rows();
    assert_eq!(m, gold.len(), "gold length mismatch");
    assert!(m >= 1);

    // path score of the gold sequence
    let mut score_parts: Vec<Var> = Vec::with_capacity(2 * m + 1);
    score_parts.push(tape.index(crf.start, 0, gold[0])?);
    for (k, &y) in gold.iter().enumerate() {
        score_parts.push(tape.index(emissions, k, y)?);
        if k + 1 < m {
            score_parts.push(tape.index(crf.transitions, y, gold[k + 1])?);
        }
    }
    score_parts.push(tape.index(crf.end, 0, gold[m - 1])?);
    let all = tape.concat_cols(&score_parts)?;
    let path_score = tape.sum(all)?;

    // partition function by the forward recursion in log space
    let e0 = tape.slice_rows(emissions, 0, 1)?;
    let mut alpha = tape.add(crf.start, e0)?;
    for k in 1..m {
        let scores = tape.add_col_broadcast(crf.transitions, alpha)?;
        let lse = tape.logsumexp_rows(scores)?;
        let ek = tape.slice_rows(emissions, k, 1)?;
        alpha = tape.add(lse, ek)?;
    }
    alpha = tape.add(alpha, crf.end)?;
    let log_z = tape.logsumexp_all(alpha)?;

    let neg_z = tape.neg(log_z)?;
    tape.add(path_score, neg_z)
}

/// Max-product decoding. Ties break toward the lowest tag index at every
/// choice, including the final one.
pub fn viterbi_decode(
    emissions: &Tensor,
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
) -> Vec<usize> {
    let (m, k) = emissions.shape();
    assert!(m >= 1);
    let mut delta: Vec<f64> = (0..k).map(|y| start.at(0, y) + emissions.at(0, y)).collect();
    let mut backptr: Vec<Vec<usize>> = Vec::with_capacity(m);
    for step in 1..m {
        let mut next = vec![f64::NEG_INFINITY; k];
        let mut bp = vec![0usize; k];
        for y in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (prev, &d) in delta.iter().enumerate() {
                let s = d + transitions.at(prev, y);
                if s > best {
                    best = s;
                    arg = prev;
                }
            }
            next[y] = best + emissions.at(step, y);
            bp[y] = arg;
        }
        delta = next;
        backptr.push(bp);
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for (y, &d) in delta.iter().enumerate() {
        let s = d + end.at(0, y);
        if s > best {
            best = s;
            last = y;
        }
    }
    let mut path = vec![last; m];
    for step in (1..m).rev() {
        path[step - 1] = backptr[step - 1][path[step]];
    }
    path
}

/// Score of one specific path, plain arithmetic. Shared by Viterbi users
/// and the enumeration oracle in tests.
pub fn path_score(
    emissions: &Tensor,
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
    path: &[usize],
) -> f64 {
    let m = path.len();
    let mut s = start.at(0, path[0]) + end.at(0, path[m - 1]);
    for (k, &y) in path.iter().enumerate() {
        s += emissions.at(k, y);
        if k + 1 < m {
            s += transitions.at(y, path[k + 1]);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive enumeration over all K^m paths: (logZ, argmax path under
    /// lexicographic lowest-index tie rule). Independent of the forward
    /// algorithm and of Viterbi.
    pub fn enumerate_oracle(
        emissions: &Tensor,
        transitions: &Tensor,
        start: &Tensor,
        end: &Tensor,
    ) -> (f64, Vec<usize>) {
        let (m, k) = emissions.shape();
        let total = k.pow(m as u32);
        let mut scores = Vec::with_capacity(total);
        let mut best_score = f64::NEG_INFINITY;
        let mut best_path = vec![0; m];
        for code in 0..total {
            let mut path = vec![0usize; m];
            let mut c = code;
            // most-significant digit first => lexicographic order over paths
            for slot in (0..m).rev() {
                path[slot] = c % k;
                c /= k;
            }
            let s = path_score(emissions, transitions, start, end, &path);
            scores.push(s);
            if s > best_score {
                best_score = s;
                best_path = path;
            }
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        (log_z, best_path)
    }

    fn ll_value(emissions: &Tensor, trans: &Tensor, start: &Tensor, end: &Tensor, gold: &[usize]) -> f64 {
        let mut store = ParamStore::new();
        store.insert("t", trans.clone());
        store.insert("s", start.clone());
        store.insert("e", end.clone());
        let mut tape = Tape::new();
        let em = tape.leaf(emissions.clone()).unwrap();
        let crf = CrfVars {
            transitions: tape.param(&store, "t").unwrap(),
            start: tape.param(&store, "s").unwrap(),
            end: tape.param(&store, "e").unwrap(),
        };
        let ll = crf_log_likelihood(&mut tape, em, &crf, gold).unwrap();
        tape.value(ll).item()
    }

    #[test]
    fn single_position_closed_form() {
        // m=1, K=2, emissions [1,0], zero start/end: ll(0) = 1 − lse(1,0)
        let em = Tensor::new(1, 2, vec![1.0, 0.0]);
        let z = Tensor::zeros(2, 2);
        let v = Tensor::zeros(1, 2);
        let ll = ll_value(&em, &z, &v, &v, &[0]);
        let expect = 1.0 - (1.0f64.exp() + 1.0).ln();
        assert!((ll - expect).abs() < 1e-12);
        assert!((ll + 0.31326).abs() < 1e-5);
    }

    #[test]
    fn all_zero_scores_uniform_paths() {
        let (m, k) = (4, 3);
        let em = Tensor::zeros(m, k);
        let z = Tensor::zeros(k, k);
        let v = Tensor::zeros(1, k);
        let ll = ll_value(&em, &z, &v, &v, &[2, 0, 1, 1]);
        assert!((ll + m as f64 * (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..40 {
            let m = rng.gen_range(1..=5);
            let k = rng.gen_range(1..=4);
            let em = Tensor::rand_uniform(&mut rng, m, k, -2.0, 2.0);
            let tr = Tensor::rand_uniform(&mut rng, k, k, -1.0, 1.0);
            let st = Tensor::rand_uniform(&mut rng, 1, k, -1.0, 1.0);
            let en = Tensor::rand_uniform(&mut rng, 1, k, -1.0, 1.0);
            let (log_z_oracle, best) = enumerate_oracle(&em, &tr, &st, &en);
            let gold: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
            let ll = ll_value(&em, &tr, &st, &en, &gold);
            let log_z = path_score(&em, &tr, &st, &en, &gold) - ll;
            assert!((log_z - log_z_oracle).abs() < 1e-8, "logZ {log_z} vs {log_z_oracle}");
            assert_eq!(viterbi_decode(&em, &tr, &st, &en), best);
        }
    }

    #[test]
    fn viterbi_zero_structure_is_pointwise_argmax() {
        let em = Tensor::new(3, 3, vec![0.1, 0.9, 0.0, 2.0, -1.0, 0.5, 0.0, 0.0, 1.0]);
        let z = Tensor::zeros(3, 3);
        let v = Tensor::zeros(1, 3);
        assert_eq!(viterbi_decode(&em, &z, &v, &v), vec![1, 0, 2]);
    }

    #[test]
    fn viterbi_single_tag() {
        let em = Tensor::new(4, 1, vec![0.3, -1.0, 2.0, 0.0]);
        let z = Tensor::zeros(1, 1);
        let v = Tensor::zeros(1, 1);
        assert_eq!(viterbi_decode(&em, &z, &v, &v), vec![0, 0, 0, 0]);
    }

    #[test]
    fn likelihoods_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k) = (4, 3);
        let em = Tensor::rand_uniform(&mut rng, m, k, -1.5, 1.5);
        let tr = Tensor::rand_uniform(&mut rng, k, k, -1.0, 1.0);
        let st = Tensor::rand_uniform(&mut rng, 1, k, -1.0, 1.0);
        let en = Tensor::rand_uniform(&mut rng, 1, k, -1.0, 1.0);
        let mut total = 0.0;
        for code in 0..k.pow(m as u32) {
            let mut path = vec![0usize; m];
            let mut c = code;
            for slot in (0..m).rev() {
                path[slot] = c % k;
                c /= k;
            }
            total += ll_value(&em, &tr, &st, &en, &path).exp();
        }
        assert!((total - 1.0).abs() < 1e-8, "sum {total}");
    }

    #[test]
    fn emission_column_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, k) = (4, 3);
        let em = Tensor::rand_uniform(&mut rng, m, k, -1.0, 1.0);
        let tr = Tensor::rand_uniform(&mut rng, k, k, -1.0, 1.0);
        let st = Tensor::rand_uniform(&mut rng, 1, k, -1.0, 1.0);
        let en = Tensor::rand_uniform(&mut rng, 1, k, -1.0, 1.0);
        let gold = vec![1, 0, 2, 2];
        let c = 0.37;
        let mut shifted = em.clone();
        for j in 0..k {
            let v = shifted.at(2, j) + c;
            shifted.set(2, j, v);
        }
        assert_eq!(viterbi_decode(&em, &tr, &st, &en), viterbi_decode(&shifted, &tr, &st, &en));
        let ll0 = ll_value(&em, &tr, &st, &en, &gold);
        let ll1 = ll_value(&shifted, &tr, &st, &en, &gold);
        // path score and logZ both shift by c, so ll is unchanged
        let z0 = path_score(&em, &tr, &st, &en, &gold) - ll0;
        let z1 = path_score(&shifted, &tr, &st, &en, &gold) - ll1;
        assert!((z1 - z0 - c).abs() < 1e-9);
    }

    #[test]
    fn logz_dominates_any_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k) = (5, 4);
        let em = Tensor::rand_uniform(&mut rng, m, k, -2.0, 2.0);
        let tr = Tensor::rand_uniform(&mut rng, k, k, -1.0, 1.0);
        let st = Tensor::rand_uniform(&mut rng, 1, k, -1.0, 1.0);
        let en = Tensor::rand_uniform(&mut rng, 1, k, -1.0, 1.0);
        let (log_z, best) = enumerate_oracle(&em, &tr, &st, &en);
        assert!(log_z > path_score(&em, &tr, &st, &en, &best));
    }

    #[test]
    fn gradient_passes_finite_differences() {
        use crate::gradcheck::gradient_check;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k) = (4, 3);
        let mut store = ParamStore::new();
        store.insert("em", Tensor::rand_uniform(&mut rng, m, k, -1.0, 1.0));
        store.insert("t", Tensor::rand_uniform(&mut rng, k, k, -1.0, 1.0));
        store.insert("s", Tensor::rand_uniform(&mut rng, 1, k, -1.0, 1.0));
        store.insert("e", Tensor::rand_uniform(&mut rng, 1, k, -1.0, 1.0));
        let gold = vec![0, 2, 1, 1];
        let mut f = move |s: &ParamStore, t: &mut Tape| {
            let em = t.param(s, "em")?;
            let crf = CrfVars {
                transitions: t.param(s, "t")?,
                start: t.param(s, "s")?,
                end: t.param(s, "e")?,
            };
            let ll = crf_log_likelihood(t, em, &crf, &gold)?;
            t.neg(ll)
        };
        let rep = gradient_check(&mut f, &store, 1e-5).unwrap();
        assert!(rep.max_rel_error < 1e-7, "rel err {}", rep.max_rel_error);
    }
}
