//! Minimal dense neural-network toolkit: tensors, a differentiable tape,
//! parameter storage and the Adam optimizer.

pub mod check;
mod graph;
mod layers;
mod params;
mod tensor;

pub use graph::{sigmoid, softplus, Gradients, Graph, NodeId};
pub use layers::{LayerNorm, Linear, MultiHeadAttention};
pub use params::{Adam, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::check::check_gradients;
    use super::*;

    fn random_store(shapes: &[(usize, usize)], seed: u64) -> (ParamStore, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| store.add_normal(format!("p{i}"), r, c, 0.7, &mut rng))
            .collect();
        (store, ids)
    }

    fn assert_checks(store: &mut ParamStore, ids: &[ParamId], build: impl FnMut(&mut Graph, &ParamStore) -> NodeId) {
        for c in check_gradients(store, ids, 1e-5, build) {
            assert!(c.passes(1e-5), "{} rel error {}", c.param, c.max_rel_error);
        }
    }

    #[test]
    fn elementwise_and_matmul_ops_have_correct_gradients() {
        let (mut store, ids) = random_store(&[(4, 3), (3, 5), (1, 5), (1, 5)], 1);
        let p = ids.clone();
        assert_checks(&mut store, &ids, move |g, s| {
            let a = g.param(s, p[0]);
            let b = g.param(s, p[1]);
            let m = g.matmul(a, b);
            let bias = g.param(s, p[2]);
            let m = g.add_row(m, bias);
            let gain = g.param(s, p[3]);
            let m = g.mul_row(m, gain);
            let t = g.tanh(m);
            let sp = g.softplus(t);
            let sc = g.scale(sp, 1.7);
            let sum = g.add(sc, t);
            g.sum(sum)
        });
    }

    #[test]
    fn layer_norm_and_attention_gradients() {
        let (mut store, ids) = random_store(&[(6, 8), (6, 8), (6, 8), (6, 8)], 2);
        let p = ids.clone();
        assert_checks(&mut store, &ids, move |g, s| {
            let q = g.param(s, p[0]);
            let k = g.param(s, p[1]);
            let v = g.param(s, p[2]);
            let att = g.block_attention(q, k, v, 3, 2);
            let ln = g.layer_norm(att);
            let w = g.param(s, p[3]);
            let prod = g.add(ln, w);
            let t = g.tanh(prod);
            g.sum(t)
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let (mut store, ids) = random_store(&[(6, 2), (6, 3), (4, 7)], 3);
        let p = ids.clone();
        assert_checks(&mut store, &ids, move |g, s| {
            let a = g.param(s, p[0]);
            let b = g.param(s, p[1]);
            let c = g.concat_cols(vec![a, b]);
            let u = g.unfold(c, 3, 3);
            let m = g.block_mean(u, 2);
            let gathered = g.gather_rows(c, vec![5, 0, 0, 2]);
            let r = g.concat_rows(vec![gathered, c]);
            let r = g.reshape(r, 5, 10);
            let t1 = g.tanh(r);
            let x = g.param(s, p[2]);
            let x = g.relu(x);
            let lhs = g.sum(t1);
            let mt = g.tanh(m);
            let rhs = g.sum(mt);
            let xs = g.sum(x);
            let tot = g.add(lhs, rhs);
            let tot = g.add(tot, xs);
            g.mse(tot, vec![0.3])
        });
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (store, ids) = random_store(&[(10, 8)], 4);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]);
        let att = g.block_attention(x, x, x, 5, 4);
        for m in g.attention_weights(att).unwrap() {
            for r in 0..5 {
                let s: f64 = m.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_moves_towards_minimum() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::filled(1, 1, 3.0));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..300 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let l = g.mse(x, vec![-1.0]);
            let grads = g.backward(l);
            opt.step(&mut store, grads.params());
        }
        assert!((store.value(id).data[0] + 1.0).abs() < 1e-2);
    }
}
