//! Linear-chain CRF over `L` tags.
//!
//! Transition scores live in one `[(L+2) × (L+2)]` table whose row/column
//! `L` is a synthetic START state and `L+1` a synthetic STOP state; entry
//! `[i, j]` scores tag `i` followed by tag `j`. A path `y` scores
//!
//! ```text
//! trans[START, y₁] + Σₖ emit[k, yₖ] + Σₖ trans[yₖ₋₁, yₖ] + trans[y_N, STOP]
//! ```
//!
//! All lattice arithmetic runs in log space with max-shifted log-sum-exp.
//! Hard constraints are `-inf` entries added to the trainable table; they
//! are never trained because no gradient reaches a `-inf` entry.

use crate::corpus::LabelScheme;
use crate::error::{Error, Result};
use crate::graph::{logsumexp_slice, Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn start_index(num_tags: usize) -> usize {
    num_tags
}

pub fn stop_index(num_tags: usize) -> usize {
    num_tags + 1
}

fn check_lattice<T: Scalar>(emissions: &Tensor<T>, transitions: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, l) = (emissions.rows(), emissions.cols());
    if !emissions.is_matrix() || n == 0 {
        return Err(Error::shape("crf", "emissions must be [N x L] with N >= 1"));
    }
    if transitions.shape() != [l + 2, l + 2] {
        return Err(Error::shape(
            "crf",
            format!("transitions {:?} do not match {l} tags", transitions.shape()),
        ));
    }
    Ok((n, l))
}

/// Score of one tag path.
pub fn sequence_score<T: Scalar>(emissions: &Tensor<T>, transitions: &Tensor<T>, tags: &[usize]) -> Result<T> {
    let (n, l) = check_lattice(emissions, transitions)?;
    if tags.len() != n {
        return Err(Error::Invalid(format!("{} tags for {n} positions", tags.len())));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= l) {
        return Err(Error::Invalid(format!("tag index {bad} outside {l} tags")));
    }
    let mut s = transitions.at(start_index(l), tags[0]);
    for (k, &t) in tags.iter().enumerate() {
        s += emissions.at(k, t);
        if k > 0 {
            s += transitions.at(tags[k - 1], t);
        }
    }
    Ok(s + transitions.at(tags[n - 1], stop_index(l)))
}

/// Forward log scores `α[k, j]`: best-of-all (log-sum) over prefixes ending
/// in tag `j` at position `k`, emission included.
fn forward_table<T: Scalar>(emissions: &Tensor<T>, transitions: &Tensor<T>, n: usize, l: usize) -> Vec<Vec<T>> {
    let start = start_index(l);
    let mut alpha = vec![vec![T::zero(); l]; n];
    for j in 0..l {
        alpha[0][j] = transitions.at(start, j) + emissions.at(0, j);
    }
    let mut buf = vec![T::zero(); l];
    for k in 1..n {
        for j in 0..l {
            for i in 0..l {
                buf[i] = alpha[k - 1][i] + transitions.at(i, j);
            }
            alpha[k][j] = logsumexp_slice(&buf) + emissions.at(k, j);
        }
    }
    alpha
}

fn backward_table<T: Scalar>(emissions: &Tensor<T>, transitions: &Tensor<T>, n: usize, l: usize) -> Vec<Vec<T>> {
    let stop = stop_index(l);
    let mut beta = vec![vec![T::zero(); l]; n];
    for i in 0..l {
        beta[n - 1][i] = transitions.at(i, stop);
    }
    let mut buf = vec![T::zero(); l];
    for k in (0..n - 1).rev() {
        for i in 0..l {
            for j in 0..l {
                buf[j] = transitions.at(i, j) + emissions.at(k + 1, j) + beta[k + 1][j];
            }
            beta[k][i] = logsumexp_slice(&buf);
        }
    }
    beta
}

/// `log Σ_y exp(score(y))` via the forward recursion.
pub fn log_partition<T: Scalar>(emissions: &Tensor<T>, transitions: &Tensor<T>) -> Result<T> {
    let (n, l) = check_lattice(emissions, transitions)?;
    let alpha = forward_table(emissions, transitions, n, l);
    let stop = stop_index(l);
    let last: Vec<T> = (0..l).map(|j| alpha[n - 1][j] + transitions.at(j, stop)).collect();
    Ok(logsumexp_slice(&last))
}

/// Per-position tag posteriors `P(y_k = j | x)` via forward-backward.
pub fn marginals<T: Scalar>(emissions: &Tensor<T>, transitions: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, l) = check_lattice(emissions, transitions)?;
    let alpha = forward_table(emissions, transitions, n, l);
    let beta = backward_table(emissions, transitions, n, l);
    let stop = stop_index(l);
    let last: Vec<T> = (0..l).map(|j| alpha[n - 1][j] + transitions.at(j, stop)).collect();
    let log_z = logsumexp_slice(&last);
    if log_z == T::neg_infinity() {
        return Err(Error::Numeric("every tag path has score -inf".into()));
    }
    let mut out = Tensor::zeros(n, l);
    for k in 0..n {
        for j in 0..l {
            out.set(k, j, (alpha[k][j] + beta[k][j] - log_z).exp());
        }
    }
    Ok(out)
}

/// Highest-scoring path and its score. Ties go to the lowest tag index, both
/// at every back-pointer and for the final tag.
pub fn viterbi<T: Scalar>(emissions: &Tensor<T>, transitions: &Tensor<T>) -> Result<(Vec<usize>, T)> {
    let (n, l) = check_lattice(emissions, transitions)?;
    let (start, stop) = (start_index(l), stop_index(l));
    let mut delta: Vec<T> = (0..l).map(|j| transitions.at(start, j) + emissions.at(0, j)).collect();
    let mut back = vec![vec![0usize; l]; n];
    let mut next = vec![T::zero(); l];
    for k in 1..n {
        for j in 0..l {
            let mut best = 0;
            let mut best_score = delta[0] + transitions.at(0, j);
            for i in 1..l {
                let s = delta[i] + transitions.at(i, j);
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            back[k][j] = best;
            next[j] = best_score + emissions.at(k, j);
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    let mut score = delta[0] + transitions.at(0, stop);
    for j in 1..l {
        let s = delta[j] + transitions.at(j, stop);
        if s > score {
            last = j;
            score = s;
        }
    }
    if score == T::neg_infinity() || score.is_nan() {
        return Err(Error::Numeric("no tag path has a finite score".into()));
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for k in (1..n).rev() {
        path[k - 1] = back[k][path[k]];
    }
    Ok((path, score))
}

/// `0` for transitions the scheme allows, `-inf` elsewhere, including every
/// move into START or out of STOP.
pub fn build_constraint_mask<T: Scalar>(scheme: &LabelScheme) -> Tensor<T> {
    let l = scheme.num_tags();
    let (start, stop) = (start_index(l), stop_index(l));
    let mut m = Tensor::filled(l + 2, l + 2, T::neg_infinity());
    for i in 0..l + 2 {
        for j in 0..l + 2 {
            if i == stop || j == start {
                continue;
            }
            let prev = (i != start).then_some(i);
            let next = (j != stop).then_some(j);
            if prev.is_none() && next.is_none() {
                continue;
            }
            if scheme.transition_allowed(prev, next) {
                m.set(i, j, T::zero());
            }
        }
    }
    m
}

/// Negative log-likelihood `log Z − score(gold)` recorded on the graph, so
/// gradients reach both emissions and transitions.
pub fn nll_loss<T: Scalar>(g: &mut Graph<'_, T>, emissions: Var, transitions: Var, gold: &[usize]) -> Result<Var> {
    let gold_score = sequence_score(g.value(emissions), g.value(transitions), gold)?;
    if gold_score == T::neg_infinity() {
        return Err(Error::Data(
            "gold tag sequence uses a transition forbidden by the constraint mask".into(),
        ));
    }
    let (n, l) = g.shape(emissions);
    let (start, stop) = (start_index(l), stop_index(l));

    let top = g.slice(transitions, 0, 0, l)?;
    let inner = g.slice(top, 1, 0, l)?;
    let start_row = g.row(transitions, start)?;
    let start_row = g.slice(start_row, 1, 0, l)?;
    let stop_col = g.slice(top, 1, stop, 1)?;

    let e0 = g.row(emissions, 0)?;
    let mut alpha = g.add(start_row, e0)?;
    for k in 1..n {
        let col = g.reshape(alpha, l, 1)?;
        let scores = g.add(inner, col)?;
        let reduced = g.logsumexp(scores, 0)?;
        let ek = g.row(emissions, k)?;
        alpha = g.add(reduced, ek)?;
    }
    let col = g.reshape(alpha, l, 1)?;
    let fin = g.add(col, stop_col)?;
    let log_z = g.logsumexp(fin, 0)?;

    let emit_at: Vec<(usize, usize)> = gold.iter().enumerate().map(|(k, &t)| (k, t)).collect();
    let mut trans_at = vec![(start, gold[0])];
    trans_at.extend(gold.windows(2).map(|w| (w[0], w[1])));
    trans_at.push((gold[n - 1], stop));
    let ge = g.gather(emissions, &emit_at)?;
    let ge = g.sum(ge);
    let gt = g.gather(transitions, &trans_at)?;
    let gt = g.sum(gt);
    let gold_total = g.add(ge, gt)?;
    g.sub(log_z, gold_total)
}

/// Trainable transition table plus an optional constraint mask.
#[derive(Clone, Debug)]
pub struct CrfHead<T: Scalar> {
    pub transitions: ParamId,
    pub num_tags: usize,
    pub mask: Option<Tensor<T>>,
}

impl<T: Scalar> CrfHead<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, scheme: &LabelScheme, constrained: bool) -> Result<Self> {
        let l = scheme.num_tags();
        let transitions = store.add(format!("{name}.transitions"), Tensor::zeros(l + 2, l + 2))?;
        Ok(Self {
            transitions,
            num_tags: l,
            mask: constrained.then(|| build_constraint_mask(scheme)),
        })
    }

    pub fn parameter_count(num_tags: usize) -> usize {
        (num_tags + 2) * (num_tags + 2)
    }

    /// Effective transition scores on the graph (trainable table + mask).
    pub fn transitions_var<'p>(&self, g: &mut Graph<'p, T>) -> Result<Var> {
        let t = g.param(self.transitions);
        match &self.mask {
            Some(m) => {
                let mv = g.constant(m.clone());
                g.add(t, mv)
            }
            None => Ok(t),
        }
    }

    /// Effective transition scores as a plain tensor.
    pub fn effective_transitions(&self, store: &ParamStore<T>) -> Tensor<T> {
        let mut t = store.get(self.transitions).clone();
        if let Some(m) = &self.mask {
            for (a, &b) in t.data_mut().iter_mut().zip(m.data()) {
                *a += b;
            }
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SchemeKind;
    use crate::rng::RngStream;

    /// Every path of length `n` over `l` tags.
    fn all_paths(n: usize, l: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..l).map(move |t| {
                        let mut q = p.clone();
                        q.push(t);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn naive_score(e: &Tensor<f64>, t: &Tensor<f64>, y: &[usize]) -> f64 {
        let l = e.cols();
        let mut s = t.at(l, y[0]) + t.at(y[y.len() - 1], l + 1);
        for k in 0..y.len() {
            s += e.at(k, y[k]);
            if k > 0 {
                s += t.at(y[k - 1], y[k]);
            }
        }
        s
    }

    fn random_lattice(rng: &mut RngStream, n: usize, l: usize) -> (Tensor<f64>, Tensor<f64>) {
        let e = Tensor::matrix(n, l, (0..n * l).map(|_| rng.uniform(-2.0, 2.0)).collect());
        let t = Tensor::matrix(l + 2, l + 2, (0..(l + 2) * (l + 2)).map(|_| rng.uniform(-2.0, 2.0)).collect());
        (e, t)
    }

    #[test]
    fn single_position_score() {
        let e = Tensor::matrix(1, 2, vec![0.7, -0.3]);
        let t = Tensor::zeros(4, 4);
        assert_eq!(sequence_score(&e, &t, &[0]).unwrap(), 0.7);
        assert!(sequence_score(&e, &t, &[2]).is_err());
    }

    #[test]
    fn uniform_single_position() {
        let e = Tensor::<f64>::zeros(1, 2);
        let t = Tensor::zeros(4, 4);
        assert!((log_partition(&e, &t).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(marginals(&e, &t).unwrap().data(), &[0.5, 0.5]);
        let (path, _) = viterbi(&Tensor::<f64>::zeros(4, 3), &Tensor::zeros(5, 5)).unwrap();
        assert_eq!(path, vec![0, 0, 0, 0]);
    }

    #[test]
    fn integer_scores_match_enumeration() {
        let mut rng = RngStream::new(8);
        let e = Tensor::matrix(3, 2, (0..6).map(|_| rng.below(7) as f64 - 3.0).collect());
        let t = Tensor::matrix(4, 4, (0..16).map(|_| rng.below(7) as f64 - 3.0).collect());
        let scores: Vec<f64> = all_paths(3, 2).iter().map(|y| naive_score(&e, &t, y)).collect();
        assert_eq!(scores.len(), 8);
        let brute = logsumexp_slice(&scores);
        assert!((log_partition(&e, &t).unwrap() - brute).abs() < 1e-10);
    }

    #[test]
    fn masked_path_scores() {
        let e = Tensor::<f64>::zeros(2, 2);
        let mut t = Tensor::filled(4, 4, f64::NEG_INFINITY);
        // only 1 -> 0 survives
        t.set(2, 1, 0.5);
        t.set(1, 0, 0.25);
        t.set(0, 3, 0.125);
        assert_eq!(log_partition(&e, &t).unwrap(), 0.875);
        assert_eq!(sequence_score(&e, &t, &[0, 0]).unwrap(), f64::NEG_INFINITY);
        let m = marginals(&e, &t).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(viterbi(&e, &t).unwrap().0, vec![1, 0]);
        assert!(viterbi(&e, &Tensor::filled(4, 4, f64::NEG_INFINITY)).is_err());
    }

    #[test]
    fn random_instances_match_brute_force() {
        let mut rng = RngStream::new(21);
        for _ in 0..100 {
            let n = 1 + rng.below(5);
            let l = 1 + rng.below(4);
            let (e, t) = random_lattice(&mut rng, n, l);
            let paths = all_paths(n, l);
            let scores: Vec<f64> = paths.iter().map(|y| naive_score(&e, &t, y)).collect();
            let z = logsumexp_slice(&scores);
            assert!((log_partition(&e, &t).unwrap() - z).abs() < 1e-10);
            let total: f64 = scores.iter().map(|s| (s - z).exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
            let (best, best_score) = viterbi(&e, &t).unwrap();
            let (bi, bs) = scores
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
            assert_eq!(best, paths[bi]);
            assert!((best_score - bs).abs() < 1e-10);
            assert!((sequence_score(&e, &t, &best).unwrap() - best_score).abs() < 1e-12);
        }
    }

    #[test]
    fn emission_shift_moves_partition_not_argmax() {
        let mut rng = RngStream::new(4);
        let (e, t) = random_lattice(&mut rng, 4, 3);
        let shifted = e.map(|x| x + 1.5);
        let z0 = log_partition(&e, &t).unwrap();
        let z1 = log_partition(&shifted, &t).unwrap();
        assert!((z1 - z0 - 4.0 * 1.5).abs() < 1e-12);
        assert_eq!(viterbi(&e, &t).unwrap().0, viterbi(&shifted, &t).unwrap().0);
    }

    #[test]
    fn mask_examples() {
        let s = LabelScheme::new(SchemeKind::Bioes, ["LOC", "PER"]);
        let m = build_constraint_mask::<f64>(&s);
        let i = |t: &str| s.index(t).unwrap();
        assert_eq!(m.at(i("B-LOC"), i("I-PER")), f64::NEG_INFINITY);
        assert_eq!(m.at(i("B-LOC"), i("E-LOC")), 0.0);
        assert_eq!(m.at(i("S-PER"), i("B-LOC")), 0.0);
        let l = s.num_tags();
        assert_eq!(m.at(start_index(l), i("I-LOC")), f64::NEG_INFINITY);
        assert_eq!(m.at(i("B-PER"), stop_index(l)), f64::NEG_INFINITY);
        assert_eq!(m.at(start_index(l), i("S-PER")), 0.0);
    }

    #[test]
    fn nll_matches_partition_minus_gold() {
        let mut rng = RngStream::new(2);
        let (e, t) = random_lattice(&mut rng, 4, 3);
        let gold = [0, 2, 1, 1];
        let mut g = Graph::<f64>::new();
        let ev = g.constant(e.clone());
        let tv = g.constant(t.clone());
        let loss = nll_loss(&mut g, ev, tv, &gold).unwrap();
        let expected = log_partition(&e, &t).unwrap() - sequence_score(&e, &t, &gold).unwrap();
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);

        // uniform, N = 1, L = 2
        let mut g = Graph::<f64>::new();
        let ev = g.constant(Tensor::zeros(1, 2));
        let tv = g.constant(Tensor::zeros(4, 4));
        let loss = nll_loss(&mut g, ev, tv, &[1]).unwrap();
        assert!((g.value(loss).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn nll_vanishes_with_large_margins() {
        let gold = [1, 0, 2];
        let mut e = Tensor::<f64>::zeros(3, 3);
        for (k, &y) in gold.iter().enumerate() {
            e.set(k, y, 50.0);
        }
        let mut g = Graph::<f64>::new();
        let ev = g.constant(e);
        let tv = g.constant(Tensor::zeros(5, 5));
        let loss = nll_loss(&mut g, ev, tv, &gold).unwrap();
        assert!(g.value(loss).data()[0] < 1e-20);
    }

    #[test]
    fn nll_rejects_illegal_gold() {
        let s = LabelScheme::new(SchemeKind::Bioes, ["LOC"]);
        let mask = build_constraint_mask::<f64>(&s);
        let mut g = Graph::<f64>::new();
        let ev = g.constant(Tensor::zeros(2, s.num_tags()));
        let tv = g.constant(mask);
        let gold = s.encode(&["I-LOC", "E-LOC"]).unwrap();
        assert!(matches!(nll_loss(&mut g, ev, tv, &gold), Err(Error::Data(_))));
    }

    #[test]
    fn nll_gradient_is_marginals_minus_gold() {
        let mut rng = RngStream::new(17);
        for _ in 0..20 {
            let n = 1 + rng.below(5);
            let l = 1 + rng.below(4);
            let (e, t) = random_lattice(&mut rng, n, l);
            let gold: Vec<usize> = (0..n).map(|_| rng.below(l)).collect();
            let mut store = ParamStore::<f64>::new();
            let eid = store.add("e", e.clone()).unwrap();
            let mut g = Graph::with_params(&store);
            let ev = g.param(eid);
            let tv = g.constant(t.clone());
            let loss = nll_loss(&mut g, ev, tv, &gold).unwrap();
            let grads = g.backward(loss).unwrap();
            let ge = grads.get(&store, eid).unwrap();
            let m = marginals(&e, &t).unwrap();
            for k in 0..n {
                for j in 0..l {
                    let expect = m.at(k, j) - if gold[k] == j { 1.0 } else { 0.0 };
                    assert!((ge.at(k, j) - expect).abs() < 1e-8);
                }
            }
        }
    }
}
