//! Recurrent cells.
//!
//! Gate equations, with `x` the input row and `h` (or the projected `r` for
//! LSTMP) the previous output:
//!
//! GRU
//! ```text
//! z = σ(x·W_z + h·U_z + b_z)          r = σ(x·W_r + h·U_r + b_r)
//! n = tanh(x·W_n + (r ⊙ h)·U_n + b_n)
//! h' = n + z ⊙ (h − n)                 (= (1 − z) ⊙ n + z ⊙ h)
//! ```
//! LSTM
//! ```text
//! [i f o] = σ(x·W + h·U + b)[0..3h]    g = tanh(x·W + h·U + b)[3h..4h]
//! c' = f ⊙ c + i ⊙ g                   h' = o ⊙ tanh(c')
//! ```
//! LSTMP is the LSTM above with output `r' = h'·P` (`P: [h × p]`); `r'`
//! replaces `h` in the recurrence.
//!
//! Parameter counts: GRU `3(d·h + h·h + h)`, LSTM `4(d·h + h·h + h)`,
//! LSTMP `4(d·h + p·h + h) + h·p`.

use serde::{Deserialize, Serialize};

use super::xavier;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
    Lstmp,
}

impl CellKind {
    /// Number of gate blocks.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm | CellKind::Lstmp => 4,
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            "lstmp" => Ok(CellKind::Lstmp),
            other => Err(Error::Invalid(format!("unknown cell kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CellState {
    /// Output fed back into the recurrence (`h`, or `r` for LSTMP).
    pub h: Var,
    /// LSTM memory cell.
    pub c: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub projection_dim: Option<usize>,
    w: ParamId,
    u: ParamId,
    b: ParamId,
    u_cand: Option<ParamId>,
    proj: Option<ParamId>,
}

impl RecurrentCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: CellKind,
        input_dim: usize,
        hidden_dim: usize,
        projection_dim: Option<usize>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let (h, d) = (hidden_dim, input_dim);
        if h == 0 || d == 0 {
            return Err(Error::Invalid(format!("{name}: zero-sized cell ({d} -> {h})")));
        }
        let projection_dim = match (kind, projection_dim) {
            (CellKind::Lstmp, Some(p)) if p > 0 => Some(p),
            (CellKind::Lstmp, _) => {
                return Err(Error::Invalid(format!("{name}: LSTMP needs a projection size")))
            }
            (_, Some(_)) => {
                return Err(Error::Invalid(format!("{name}: projection only applies to LSTMP")))
            }
            (_, None) => None,
        };
        let rec = projection_dim.unwrap_or(h);
        let k = kind.gates();
        let w = store.add(format!("{name}.w"), xavier(d, k * h, rng))?;
        let (u, u_cand) = match kind {
            CellKind::Gru => {
                let u = store.add(format!("{name}.u"), xavier(h, 2 * h, rng))?;
                let un = store.add(format!("{name}.u_cand"), xavier(h, h, rng))?;
                (u, Some(un))
            }
            _ => (store.add(format!("{name}.u"), xavier(rec, k * h, rng))?, None),
        };
        let mut bias = Tensor::zeros(1, k * h);
        if kind != CellKind::Gru {
            for j in h..2 * h {
                bias.set(0, j, T::one());
            }
        }
        let b = store.add(format!("{name}.b"), bias)?;
        let proj = match projection_dim {
            Some(p) => Some(store.add(format!("{name}.proj"), xavier(h, p, rng))?),
            None => None,
        };
        Ok(Self {
            kind,
            input_dim,
            hidden_dim,
            projection_dim,
            w,
            u,
            b,
            u_cand,
            proj,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.projection_dim.unwrap_or(self.hidden_dim)
    }

    pub fn parameter_count(kind: CellKind, d: usize, h: usize, p: Option<usize>) -> usize {
        match kind {
            CellKind::Gru => 3 * (d * h + h * h + h),
            CellKind::Lstm => 4 * (d * h + h * h + h),
            CellKind::Lstmp => {
                let p = p.unwrap_or(h);
                4 * (d * h + p * h + h) + h * p
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.w, self.u, self.b];
        v.extend(self.u_cand);
        v.extend(self.proj);
        v
    }

    pub fn zero_state<T: Scalar>(&self, g: &mut Graph<'_, T>) -> CellState {
        let h = g.constant(Tensor::zeros(1, self.output_dim()));
        let c = match self.kind {
            CellKind::Gru => None,
            _ => Some(g.constant(Tensor::zeros(1, self.hidden_dim))),
        };
        CellState { h, c }
    }

    /// Input projection `X·W + b` for every row at once.
    pub fn project_inputs<T: Scalar>(&self, g: &mut Graph<'_, T>, xs: Var) -> Result<Var> {
        let (_, d) = g.shape(xs);
        if d != self.input_dim {
            return Err(Error::shape(
                "cell_step",
                format!("input width {d}, cell expects {}", self.input_dim),
            ));
        }
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(xs, w)?;
        g.add(xw, b)
    }

    /// One step from an input row `x: [1 × input_dim]`.
    pub fn step<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, state: CellState) -> Result<CellState> {
        let xw = self.project_inputs(g, x)?;
        self.step_projected(g, xw, state)
    }

    /// One step from an already projected input row `x·W + b`.
    pub fn step_projected<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        xw: Var,
        state: CellState,
    ) -> Result<CellState> {
        let h = self.hidden_dim;
        let u = g.param(self.u);
        match self.kind {
            CellKind::Gru => {
                let hu = g.matmul(state.h, u)?;
                let xzr = g.slice(xw, 1, 0, 2 * h)?;
                let pre = g.add(xzr, hu)?;
                let zr = g.sigmoid(pre);
                let z = g.slice(zr, 1, 0, h)?;
                let r = g.slice(zr, 1, h, h)?;
                let rh = g.mul(r, state.h)?;
                let un = g.param(self.u_cand.expect("gru candidate weights"));
                let rhu = g.matmul(rh, un)?;
                let xn = g.slice(xw, 1, 2 * h, h)?;
                let npre = g.add(xn, rhu)?;
                let n = g.tanh(npre);
                let diff = g.sub(state.h, n)?;
                let zd = g.mul(z, diff)?;
                let out = g.add(n, zd)?;
                Ok(CellState { h: out, c: None })
            }
            CellKind::Lstm | CellKind::Lstmp => {
                let hu = g.matmul(state.h, u)?;
                let pre = g.add(xw, hu)?;
                let sig_pre = g.slice(pre, 1, 0, 3 * h)?;
                let sig = g.sigmoid(sig_pre);
                let cand_pre = g.slice(pre, 1, 3 * h, h)?;
                let cand = g.tanh(cand_pre);
                let i = g.slice(sig, 1, 0, h)?;
                let f = g.slice(sig, 1, h, h)?;
                let o = g.slice(sig, 1, 2 * h, h)?;
                let c_prev = state.c.expect("lstm cell state");
                let fc = g.mul(f, c_prev)?;
                let ig = g.mul(i, cand)?;
                let c = g.add(fc, ig)?;
                let tc = g.tanh(c);
                let mut hout = g.mul(o, tc)?;
                if let Some(p) = self.proj {
                    let pv = g.param(p);
                    hout = g.matmul(hout, pv)?;
                }
                Ok(CellState { h: hout, c: Some(c) })
            }
        }
    }

    /// Runs the cell over the rows of `xs` from a zero state, left to right or
    /// right to left. Output row `k` is the state after consuming row `k`.
    pub fn scan<T: Scalar>(&self, g: &mut Graph<'_, T>, xs: Var, reverse: bool) -> Result<(Var, CellState)> {
        let (n, _) = g.shape(xs);
        let xw = self.project_inputs(g, xs)?;
        let mut state = self.zero_state(g);
        let mut outs = vec![state.h; n];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        for t in order {
            let row = g.row(xw, t)?;
            state = self.step_projected(g, row, state)?;
            outs[t] = state.h;
        }
        let all = if n == 1 { outs[0] } else { g.concat(&outs, 0)? };
        Ok((all, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn zero_cell(kind: CellKind, proj: Option<usize>) -> (ParamStore<f64>, RecurrentCell) {
        let mut store = ParamStore::new();
        let cell = RecurrentCell::new(&mut store, "c", kind, 3, 4, proj, &mut RngStream::new(0)).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).fill(0.0);
        }
        (store, cell)
    }

    #[test]
    fn zero_params_keep_zero_state() {
        for kind in [CellKind::Gru, CellKind::Lstm] {
            let (store, cell) = zero_cell(kind, None);
            let mut g = Graph::with_params(&store);
            let x = g.constant(Tensor::row_vector(vec![0.0; 3]));
            let s0 = cell.zero_state(&mut g);
            let s1 = cell.step(&mut g, x, s0).unwrap();
            assert!(g.value(s1.h).data().iter().all(|&v| v == 0.0));
            if let Some(c) = s1.c {
                assert!(g.value(c).data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn parameter_counts_match_formula() {
        let mut rng = RngStream::new(1);
        for (kind, proj) in [(CellKind::Gru, None), (CellKind::Lstm, None), (CellKind::Lstmp, Some(2))] {
            let mut store = ParamStore::<f64>::new();
            RecurrentCell::new(&mut store, "c", kind, 5, 7, proj, &mut rng).unwrap();
            assert_eq!(store.num_elements(), RecurrentCell::parameter_count(kind, 5, 7, proj));
        }
        assert_eq!(RecurrentCell::parameter_count(CellKind::Lstmp, 5, 7, Some(2)), 4 * (35 + 14 + 7) + 14);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (store, cell) = zero_cell(CellKind::Gru, None);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::row_vector(vec![0.0; 5]));
        let s0 = cell.zero_state(&mut g);
        assert!(cell.step(&mut g, x, s0).is_err());
    }

    #[test]
    fn lstmp_output_is_projection_sized() {
        let mut store = ParamStore::<f64>::new();
        let cell = RecurrentCell::new(&mut store, "c", CellKind::Lstmp, 3, 6, Some(2), &mut RngStream::new(3)).unwrap();
        let mut g = Graph::with_params(&store);
        let xs = g.constant(Tensor::matrix(4, 3, (0..12).map(|i| i as f64 * 0.1).collect()));
        let (out, _) = cell.scan(&mut g, xs, false).unwrap();
        assert_eq!(g.shape(out), (4, 2));
    }

    #[test]
    fn cell_gradients_match_finite_differences() {
        for (kind, proj) in [(CellKind::Gru, None), (CellKind::Lstm, None), (CellKind::Lstmp, Some(3))] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = RngStream::new(11);
            let cell = RecurrentCell::new(&mut store, "c", kind, 3, 4, proj, &mut rng).unwrap();
            let xs = store.add("xs", crate::layers::xavier(5, 3, &mut rng)).unwrap();
            let report = gradcheck::check(&mut store, 1e-5, |g| {
                let x = g.param(xs);
                let (out, _) = cell.scan(g, x, kind == CellKind::Lstm)?;
                let sq = g.mul(out, out)?;
                let t = g.tanh(sq);
                Ok(g.sum(t))
            })
            .unwrap();
            assert!(report.passes(1e-4), "{kind:?}: {report:?}");
        }
    }
}
