//! Small building blocks shared by the backbone, decoder and heads.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

/// `y = x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: String,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = format!("{prefix}.weight");
        let b = format!("{prefix}.bias");
        store.insert(&w, xavier(fan_in, fan_out, rng));
        store.insert(&b, Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    /// Handle to parameters that already exist in the store.
    pub fn existing(prefix: &str) -> Self {
        Self {
            w: format!("{prefix}.weight"),
            b: format!("{prefix}.bias"),
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> &str {
        &self.b
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Var {
        let shape = g.shape(x);
        let (rows, cols) = crate::tensor::rows_cols(&shape);
        let x2 = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, &[rows, cols])
        };
        let y = g.matmul(x2, p.get(&self.w));
        let y = g.add_row(y, p.get(&self.b));
        if shape.len() == 2 {
            y
        } else {
            let mut out = shape.clone();
            *out.last_mut().unwrap() = g.shape(y)[1];
            g.reshape(y, &out)
        }
    }

    /// Same map on plain values, outside any graph.
    pub fn apply(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let w = store.get(&self.w).expect("linear weight");
        let b = store.get(&self.b).expect("linear bias");
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        let mut out = Vec::with_capacity(rows * fan_out);
        for _ in 0..rows {
            out.extend_from_slice(b.data());
        }
        crate::tensor::gemm(rows, fan_in, fan_out, x, false, w.data(), false, 1.0, &mut out);
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gamma = format!("{prefix}.gamma");
        let beta = format!("{prefix}.beta");
        store.insert(&gamma, Tensor::full(&[dim], 1.0));
        store.insert(&beta, Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.get(&self.gamma), p.get(&self.beta), LN_EPS)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// inputs. Positional terms, when given, are added to the keys only.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(
            heads > 0 && dim % heads == 0,
            "dim {dim} not divisible by {heads} heads"
        );
        Self {
            q: Linear::new(store, &format!("{prefix}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{prefix}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{prefix}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{prefix}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn output_projection(&self) -> &Linear {
        &self.out
    }

    /// `queries`: `[Nq, C]`, `memory`: `[Nk, C]`, `allowed`: optional row-major
    /// `Nq×Nk` mask (true = may attend). Returns `[Nq, C]`.
    pub fn forward(
        &self,
        g: &Graph,
        p: &Bound,
        queries: Var,
        memory: Var,
        key_pos: Option<&Tensor>,
        allowed: Option<&[bool]>,
    ) -> Var {
        let q = self.q.forward(g, p, queries);
        let keyed = match key_pos {
            Some(pos) => g.add_const(memory, pos),
            None => memory,
        };
        let k = self.k.forward(g, p, keyed);
        let v = self.v.forward(g, p, memory);
        let d = self.dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let per_head: Vec<Var> = (0..self.heads)
            .map(|h| {
                let (qh, kh, vh) = if self.heads == 1 {
                    (q, k, v)
                } else {
                    (
                        g.slice_cols(q, h * d, d),
                        g.slice_cols(k, h * d, d),
                        g.slice_cols(v, h * d, d),
                    )
                };
                let scores = g.scale(g.matmul_t(qh, false, kh, true), scale);
                let attn = g.softmax_rows(scores, allowed);
                g.matmul(attn, vh)
            })
            .collect();
        let merged = if per_head.len() == 1 {
            per_head[0]
        } else {
            g.concat_cols(&per_head)
        };
        self.out.forward(g, p, merged)
    }
}

/// Position-wise two-layer perceptron `C → hidden → out` with a ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, out, rng),
        }
    }

    pub fn output_projection(&self) -> &Linear {
        &self.fc2
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Var {
        let h = g.relu(self.fc1.forward(g, p, x));
        self.fc2.forward(g, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_apply_matches_graph_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 4, 3, &mut rng);
        store.get_mut("l.bias").unwrap().data_mut()[1] = 0.7;
        let x = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let xv = g.constant(x.clone());
        let y = lin.forward(&g, &p, xv);
        assert_eq!(g.shape(y), vec![2, 5, 3]);
        let plain = lin.apply(&store, x.data(), 10);
        let gv = g.value_of(y);
        for (a, b) in gv.data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        // With identity value/output maps, each output row lies in the convex
        // hull of the memory rows.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 1, &mut rng);
        let eye = Tensor::new(&[4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect());
        *store.get_mut("a.v.weight").unwrap() = eye.clone();
        *store.get_mut("a.out.weight").unwrap() = eye;
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let q = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let mem = Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let m = g.constant(mem);
        let y = mha.forward(&g, &p, q, m, None, Some(&[true, true, false, true, true, false]));
        let v = g.value_of(y);
        for r in 0..3 {
            let row = v.row(r);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            assert!(row[2].abs() < 1e-12 && row[3].abs() < 1e-12);
        }
        // Row 1 may only see memory entry 1, row 2 only entry 0.
        assert!((v.row(1)[1] - 1.0).abs() < 1e-12);
        assert!((v.row(2)[0] - 1.0).abs() < 1e-12);
    }
}
