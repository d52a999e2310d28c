use super::{dropout, CellKind, Phase, RecurrentCell};
use crate::error::Result;
use crate::graph::{Graph, ParamStore, Var};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Bidirectional recurrent layer. Position `k` of the output is
/// `[→h_k ; ←h_k]`; dropout applies to the layer input only, never to the
/// recurrent connections.
#[derive(Clone, Debug)]
pub struct BiLayer {
    pub fwd: RecurrentCell,
    pub bwd: RecurrentCell,
    pub input_dropout: f64,
}

impl BiLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: CellKind,
        input_dim: usize,
        hidden_dim: usize,
        projection_dim: Option<usize>,
        input_dropout: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let fwd = RecurrentCell::new(store, &format!("{name}.fwd"), kind, input_dim, hidden_dim, projection_dim, rng)?;
        let bwd = RecurrentCell::new(store, &format!("{name}.bwd"), kind, input_dim, hidden_dim, projection_dim, rng)?;
        Ok(Self {
            fwd,
            bwd,
            input_dropout,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.output_dim() + self.bwd.output_dim()
    }

    pub fn parameter_count(kind: CellKind, d: usize, h: usize, p: Option<usize>) -> usize {
        2 * RecurrentCell::parameter_count(kind, d, h, p)
    }

    /// `xs: [N × d]` → `[N × output_dim]`.
    pub fn run<T: Scalar>(&self, g: &mut Graph<'_, T>, xs: Var, phase: &mut Phase) -> Result<Var> {
        let xs = dropout(g, xs, self.input_dropout, phase)?;
        let (f, _) = self.fwd.scan(g, xs, false)?;
        let (b, _) = self.bwd.scan(g, xs, true)?;
        g.concat(&[f, b], 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn layer(seed: u64) -> (ParamStore<f64>, BiLayer) {
        let mut store = ParamStore::new();
        let l = BiLayer::new(&mut store, "l", CellKind::Gru, 3, 4, None, 0.0, &mut RngStream::new(seed)).unwrap();
        (store, l)
    }

    fn inputs(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed);
        Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.uniform(-1.0, 1.0)).collect())
    }

    #[test]
    fn single_position() {
        let (store, l) = layer(1);
        let mut g = Graph::with_params(&store);
        let x = g.constant(inputs(1, 2));
        let out = l.run(&mut g, x, &mut Phase::Eval).unwrap();
        assert_eq!(g.shape(out), (1, 8));
    }

    #[test]
    fn tied_directions_mirror_on_palindromes() {
        let (mut store, l) = layer(5);
        // tie the backward cell to the forward one
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        for n in names.iter().filter(|n| n.starts_with("l.bwd")) {
            let src = store.by_name(&n.replace("l.bwd", "l.fwd")).unwrap().clone();
            let id = store.id_of(n).unwrap();
            *store.get_mut(id) = src;
        }
        let half = inputs(3, 9);
        let mut rows: Vec<Vec<f64>> = (0..3).map(|r| half.row(r).to_vec()).collect();
        rows.push(rows[1].clone());
        rows.push(rows[0].clone());
        let pal = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(pal);
        let out = l.run(&mut g, x, &mut Phase::Eval).unwrap();
        let v = g.value(out);
        let n = 5;
        for k in 0..n {
            let fwd = &v.row(k)[..4];
            let bwd = &v.row(n - 1 - k)[4..];
            assert_eq!(fwd, bwd, "position {k}");
        }
    }

    #[test]
    fn causality_of_each_half() {
        let (store, l) = layer(3);
        let base = inputs(5, 4);
        let run = |x: Tensor<f64>| {
            let mut g = Graph::with_params(&store);
            let xv = g.constant(x);
            let out = l.run(&mut g, xv, &mut Phase::Eval).unwrap();
            g.value(out).clone()
        };
        let a = run(base.clone());
        let mut perturbed = base.clone();
        perturbed.set(2, 1, perturbed.at(2, 1) + 0.5);
        let b = run(perturbed);
        for k in 0..5 {
            let fwd_same = a.row(k)[..4] == b.row(k)[..4];
            let bwd_same = a.row(k)[4..] == b.row(k)[4..];
            assert_eq!(fwd_same, k < 2, "forward half at {k}");
            assert_eq!(bwd_same, k > 2, "backward half at {k}");
        }
    }

    #[test]
    fn eval_mode_ignores_dropout() {
        let mut store = ParamStore::<f64>::new();
        let l = BiLayer::new(&mut store, "l", CellKind::Lstm, 3, 2, None, 0.5, &mut RngStream::new(1)).unwrap();
        let x = inputs(4, 2);
        let mut g1 = Graph::with_params(&store);
        let a = g1.constant(x.clone());
        let o1 = l.run(&mut g1, a, &mut Phase::Eval).unwrap();
        let mut g2 = Graph::with_params(&store);
        let b = g2.constant(x);
        let o2 = l.run(&mut g2, b, &mut Phase::Eval).unwrap();
        assert_eq!(g1.value(o1), g2.value(o2));
    }
}
