//! Building blocks shared by the encoder, the decoder and the toy backend.
//!
//! Every layer reads its weights from a [`Bind`] by name, so the same code
//! runs frozen (inference, frozen towers) or trainable.

mod grid;

use std::sync::Arc;

use rand::Rng;

pub use grid::TokenGrid;

use crate::scalar::Scalar;
use crate::tape::{Bind, Graph, NodeId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    inputs: usize,
    outputs: usize,
    bias: bool,
    rng: &mut R,
) {
    store.normal(&format!("{name}.w"), outputs, inputs, (1.0 / inputs as f64).sqrt(), true, rng);
    if bias {
        store.zeros(&format!("{name}.b"), 1, outputs, true);
    }
}

/// Adds LoRA factors to an existing linear layer: `A` Gaussian, `B` zero.
pub fn init_lora<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, rank: usize, rng: &mut R) {
    let (outputs, inputs) = store.get(&format!("{name}.w")).expect("base weight").dim();
    store.normal(&format!("{name}.lora_a"), rank, inputs, (1.0 / inputs as f64).sqrt(), true, rng);
    store.zeros(&format!("{name}.lora_b"), outputs, rank, true);
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) {
    store.filled(&format!("{name}.g"), 1, dim, T::one(), true);
    store.zeros(&format!("{name}.b"), 1, dim, true);
}

/// `x·Wᵀ + b`, plus `s·(x·Aᵀ)·Bᵀ` when LoRA factors are present.
pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bind<T>, name: &str, x: NodeId, lora_scale: f64) -> NodeId {
    let w = p.node(g, &format!("{name}.w"));
    let mut y = g.matmul_nt(x, w);
    let bias = format!("{name}.b");
    if p.has(&bias) {
        let b = p.node(g, &bias);
        y = g.add_row(y, b);
    }
    let a_name = format!("{name}.lora_a");
    if p.has(&a_name) {
        let a = p.node(g, &a_name);
        let b = p.node(g, &format!("{name}.lora_b"));
        let xa = g.matmul_nt(x, a);
        let d = g.matmul_nt(xa, b);
        let d = g.scale(d, T::of(lora_scale));
        y = g.add(y, d);
    }
    y
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, p: &Bind<T>, name: &str, x: NodeId) -> NodeId {
    let gamma = p.node(g, &format!("{name}.g"));
    let beta = p.node(g, &format!("{name}.b"));
    g.layer_norm(x, gamma, beta, T::of(LN_EPS))
}

/// Pre-norm transformer block: attention over `groups`, then a GELU MLP.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

pub fn init_block<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, spec: BlockSpec, rng: &mut R) {
    let d = spec.dim;
    init_layer_norm(store, &format!("{name}.ln1"), d);
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{name}.attn.{proj}"), d, d, true, rng);
    }
    init_layer_norm(store, &format!("{name}.ln2"), d);
    init_linear(store, &format!("{name}.mlp.fc1"), d, d * spec.mlp_ratio, true, rng);
    init_linear(store, &format!("{name}.mlp.fc2"), d * spec.mlp_ratio, d, true, rng);
}

/// Names of the attention projections of a block; these carry LoRA adapters.
pub fn attention_projections(name: &str) -> [String; 4] {
    ["q", "k", "v", "o"].map(|p| format!("{name}.attn.{p}"))
}

pub fn block<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bind<T>,
    name: &str,
    x: NodeId,
    groups: &Arc<Vec<Vec<usize>>>,
    heads: usize,
    lora_scale: f64,
) -> NodeId {
    let h = layer_norm(g, p, &format!("{name}.ln1"), x);
    let q = linear(g, p, &format!("{name}.attn.q"), h, lora_scale);
    let k = linear(g, p, &format!("{name}.attn.k"), h, lora_scale);
    let v = linear(g, p, &format!("{name}.attn.v"), h, lora_scale);
    let a = g.attention(q, k, v, Arc::clone(groups), heads);
    let o = linear(g, p, &format!("{name}.attn.o"), a, lora_scale);
    let x = g.add(x, o);
    let h = layer_norm(g, p, &format!("{name}.ln2"), x);
    let h = linear(g, p, &format!("{name}.mlp.fc1"), h, lora_scale);
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{name}.mlp.fc2"), h, lora_scale);
    g.add(x, h)
}

/// 2×2 patch merging: concat the four neighbours, normalise, project `4d → 2d`.
pub fn init_merge<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) {
    init_layer_norm(store, &format!("{name}.ln"), 4 * dim);
    init_linear(store, &format!("{name}.proj"), 4 * dim, 2 * dim, false, rng);
}

pub fn merge<T: Scalar>(g: &mut Graph<T>, p: &Bind<T>, name: &str, x: NodeId, grid: TokenGrid) -> (NodeId, TokenGrid) {
    let parts: Vec<NodeId> = grid
        .merge_sources()
        .into_iter()
        .map(|src| g.gather_rows(x, Arc::new(src)))
        .collect();
    let cat = g.concat_cols(&parts);
    let h = layer_norm(g, p, &format!("{name}.ln"), cat);
    (linear(g, p, &format!("{name}.proj"), h, 0.0), grid.merged())
}

/// Patch expanding: project `d → 2d`, split into four `d/2` tokens on a 2×2
/// neighbourhood, normalise.
pub fn init_expand<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) {
    init_linear(store, &format!("{name}.proj"), dim, 2 * dim, false, rng);
    init_layer_norm(store, &format!("{name}.ln"), dim / 2);
}

pub fn expand<T: Scalar>(g: &mut Graph<T>, p: &Bind<T>, name: &str, x: NodeId, grid: TokenGrid) -> (NodeId, TokenGrid) {
    let y = linear(g, p, &format!("{name}.proj"), x, 0.0);
    let q = g.shape(y).1 / 4;
    let parts: Vec<NodeId> = (0..4).map(|k| g.slice_cols(y, k * q, (k + 1) * q)).collect();
    let stacked = g.concat_rows(&parts);
    let out = g.gather_rows(stacked, Arc::new(grid.expand_permutation()));
    (layer_norm(g, p, &format!("{name}.ln"), out), grid.expanded())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lora_with_zero_b_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f64>::new();
        init_linear(&mut s, "l", 6, 5, true, &mut rng);
        let x = Array2::from_shape_fn((3, 6), |(i, j)| (i as f64 - j as f64) * 0.3);
        let run = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let y = linear(&mut g, &Bind::frozen(s), "l", xi, 1.0);
            g.value(y).clone()
        };
        let plain = run(&s);
        init_lora(&mut s, "l", 2, &mut rng);
        assert_eq!(run(&s), plain);
    }

    #[test]
    fn merge_then_expand_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::<f64>::new();
        init_merge(&mut s, "m", 8, &mut rng);
        init_expand(&mut s, "e", 16, &mut rng);
        let grid = TokenGrid::new(4, 6, 2);
        let mut g = Graph::new();
        let x = g.input(Array2::from_elem((grid.tokens(), 8), 0.5));
        let (m, mg) = merge(&mut g, &Bind::frozen(&s), "m", x, grid);
        assert_eq!(g.shape(m), (12, 16));
        let (e, eg) = expand(&mut g, &Bind::frozen(&s), "e", m, mg);
        assert_eq!(g.shape(e), (48, 8));
        assert_eq!(eg, grid);
    }
}
