//! Layer descriptors: the building blocks the models are assembled from.
//!
//! A `BlockSpec` names its parameters, can initialize them into a store, and
//! records its forward computation on a graph. Weights are initialized
//! uniform in +/- sqrt(6 / (fan_in + fan_out)), biases and norm offsets at
//! zero, norm gains at one.

use super::array::{DenseArray, Element};
use super::graph::{Graph, NodeId};
use super::rng::Rng;
use super::store::ParamStore;
use crate::error::{CoreError, Result};

/// One differentiable block.
#[derive(Clone, Debug)]
pub enum BlockSpec {
    /// `[.., in_dim] -> [.., out_dim]`, weight `{name}.w`, bias `{name}.b`.
    Affine {
        name: String,
        in_dim: usize,
        out_dim: usize,
    },
    /// Learned linear resampling of the token axis:
    /// `[b, tokens_in, d] -> [b, tokens_out, d]`, weight `{name}.w`.
    TokenResample {
        name: String,
        tokens_in: usize,
        tokens_out: usize,
    },
    Silu,
    /// Normalization over the last axis, `{name}.gamma` / `{name}.beta`.
    LayerNorm { name: String, dim: usize },
    /// Scaled dot-product attention over the token axis, `heads` heads with
    /// per-head projections `{name}.q{h}/.k{h}/.v{h}/.o{h}`, no biases.
    Attention {
        name: String,
        dim: usize,
        heads: usize,
    },
    /// Two affines with a SiLU between: `{name}.fc1`, `{name}.fc2`.
    Mlp {
        name: String,
        dim: usize,
        hidden: usize,
    },
}

fn init_weight<T: Element>(rng: &mut Rng, rows: usize, cols: usize) -> DenseArray<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    DenseArray::from_fn(&[rows, cols], || T::from_f64(rng.uniform_symmetric(limit)))
}

/// Insert a weight `{name}.w` and zero bias `{name}.b`.
pub fn init_affine<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) -> Result<()> {
    store.insert(&format!("{name}.w"), init_weight(rng, in_dim, out_dim))?;
    store.insert(&format!("{name}.b"), DenseArray::zeros(&[out_dim]))?;
    Ok(())
}

/// Record `x @ w + b` for an affine named `name`.
pub fn affine_forward<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

impl BlockSpec {
    pub fn affine(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        BlockSpec::Affine {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn token_resample(name: impl Into<String>, tokens_in: usize, tokens_out: usize) -> Self {
        BlockSpec::TokenResample {
            name: name.into(),
            tokens_in,
            tokens_out,
        }
    }

    pub fn layer_norm(name: impl Into<String>, dim: usize) -> Self {
        BlockSpec::LayerNorm {
            name: name.into(),
            dim,
        }
    }

    pub fn attention(name: impl Into<String>, dim: usize, heads: usize) -> Self {
        BlockSpec::Attention {
            name: name.into(),
            dim,
            heads,
        }
    }

    pub fn mlp(name: impl Into<String>, dim: usize, hidden: usize) -> Self {
        BlockSpec::Mlp {
            name: name.into(),
            dim,
            hidden,
        }
    }

    /// Create this block's parameters in the store.
    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        match self {
            BlockSpec::Affine {
                name,
                in_dim,
                out_dim,
            } => init_affine(store, rng, name, *in_dim, *out_dim),
            BlockSpec::TokenResample {
                name,
                tokens_in,
                tokens_out,
            } => {
                store.insert(
                    &format!("{name}.w"),
                    init_weight(rng, *tokens_in, *tokens_out),
                )?;
                Ok(())
            }
            BlockSpec::Silu => Ok(()),
            BlockSpec::LayerNorm { name, dim } => {
                store.insert(&format!("{name}.gamma"), DenseArray::filled(&[*dim], T::one()))?;
                store.insert(&format!("{name}.beta"), DenseArray::zeros(&[*dim]))?;
                Ok(())
            }
            BlockSpec::Attention { name, dim, heads } => {
                if *heads == 0 || dim % heads != 0 {
                    return Err(CoreError::invalid(format!(
                        "attention '{name}': dim {dim} not divisible by heads {heads}"
                    )));
                }
                let head_dim = dim / heads;
                for h in 0..*heads {
                    store.insert(&format!("{name}.q{h}"), init_weight(rng, *dim, head_dim))?;
                    store.insert(&format!("{name}.k{h}"), init_weight(rng, *dim, head_dim))?;
                    store.insert(&format!("{name}.v{h}"), init_weight(rng, *dim, head_dim))?;
                    store.insert(&format!("{name}.o{h}"), init_weight(rng, head_dim, *dim))?;
                }
                Ok(())
            }
            BlockSpec::Mlp { name, dim, hidden } => {
                init_affine(store, rng, &format!("{name}.fc1"), *dim, *hidden)?;
                init_affine(store, rng, &format!("{name}.fc2"), *hidden, *dim)?;
                Ok(())
            }
        }
    }

    fn check_input<T: Element>(&self, g: &Graph<T>, x: NodeId) -> Result<()> {
        let shape = g.value(x).shape();
        let ok = match self {
            BlockSpec::Affine { in_dim, .. } => shape.last() == Some(in_dim),
            BlockSpec::TokenResample { tokens_in, .. } => {
                shape.len() == 3 && shape[1] == *tokens_in
            }
            BlockSpec::Silu => true,
            BlockSpec::LayerNorm { dim, .. } => shape.last() == Some(dim),
            BlockSpec::Attention { dim, .. } => shape.len() == 3 && shape[2] == *dim,
            BlockSpec::Mlp { dim, .. } => shape.last() == Some(dim),
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::shape(
                format!("block '{}'", self.describe()),
                format!("input shape {:?} does not match declaration", shape),
            ))
        }
    }

    fn describe(&self) -> String {
        match self {
            BlockSpec::Affine {
                name,
                in_dim,
                out_dim,
            } => format!("{name}: affine {in_dim}->{out_dim}"),
            BlockSpec::TokenResample {
                name,
                tokens_in,
                tokens_out,
            } => format!("{name}: resample {tokens_in}->{tokens_out} tokens"),
            BlockSpec::Silu => "silu".into(),
            BlockSpec::LayerNorm { name, dim } => format!("{name}: layer_norm({dim})"),
            BlockSpec::Attention { name, dim, heads } => {
                format!("{name}: attention dim {dim}, {heads} heads")
            }
            BlockSpec::Mlp { name, dim, hidden } => format!("{name}: mlp {dim}->{hidden}->{dim}"),
        }
    }

    /// Record the forward computation on `g`.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        self.check_input(g, x)?;
        match self {
            BlockSpec::Affine { name, .. } => affine_forward(g, store, name, x),
            BlockSpec::TokenResample { name, .. } => {
                let w = g.param(store, &format!("{name}.w"))?;
                let xt = g.transpose_last2(x)?; // [b, d, m_in]
                let yt = g.matmul(xt, w)?; // [b, d, m_out]
                g.transpose_last2(yt)
            }
            BlockSpec::Silu => g.silu(x),
            BlockSpec::LayerNorm { name, .. } => {
                let gamma = g.param(store, &format!("{name}.gamma"))?;
                let beta = g.param(store, &format!("{name}.beta"))?;
                g.layer_norm(x, gamma, beta)
            }
            BlockSpec::Attention { name, dim, heads } => {
                let head_dim = dim / heads;
                let scale = 1.0 / (head_dim as f64).sqrt();
                let mut acc: Option<NodeId> = None;
                for h in 0..*heads {
                    let wq = g.param(store, &format!("{name}.q{h}"))?;
                    let wk = g.param(store, &format!("{name}.k{h}"))?;
                    let wv = g.param(store, &format!("{name}.v{h}"))?;
                    let wo = g.param(store, &format!("{name}.o{h}"))?;
                    let q = g.matmul(x, wq)?;
                    let k = g.matmul(x, wk)?;
                    let v = g.matmul(x, wv)?;
                    let kt = g.transpose_last2(k)?;
                    let scores = g.bmm(q, kt)?;
                    let scaled = g.scale(scores, scale)?;
                    let attn = g.softmax_last(scaled)?;
                    let ctx = g.bmm(attn, v)?;
                    let proj = g.matmul(ctx, wo)?;
                    acc = Some(match acc {
                        Some(prev) => g.add(prev, proj)?,
                        None => proj,
                    });
                }
                Ok(acc.expect("heads >= 1"))
            }
            BlockSpec::Mlp { name, .. } => {
                let h = affine_forward(g, store, &format!("{name}.fc1"), x)?;
                let h = g.silu(h)?;
                affine_forward(g, store, &format!("{name}.fc2"), h)
            }
        }
    }
}

/// Run a single block outside any larger graph: builds a throwaway tape,
/// records the block, and returns the output value. Deterministic for fixed
/// parameters and input.
pub fn forward_block<T: Element>(
    input: &DenseArray<T>,
    params: &ParamStore<T>,
    spec: &BlockSpec,
) -> Result<DenseArray<T>> {
    let mut g = Graph::new();
    let x = g.input(input.clone())?;
    let y = spec.forward(&mut g, params, x)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine_store(w: Vec<f32>, b: Vec<f32>, in_dim: usize, out_dim: usize) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        store
            .insert("t.w", DenseArray::from_vec(&[in_dim, out_dim], w).unwrap())
            .unwrap();
        store
            .insert("t.b", DenseArray::from_vec(&[out_dim], b).unwrap())
            .unwrap();
        store
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let store = affine_store(vec![0.3, -0.7, 1.1, 0.2, 0.4, -0.5], vec![0.0, 0.0], 3, 2);
        let spec = BlockSpec::affine("t", 3, 2);
        let out = forward_block(&DenseArray::zeros(&[2, 3]), &store, &spec).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weight_zero_bias_is_identity() {
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let store = affine_store(eye, vec![0.0; 3], 3, 3);
        let spec = BlockSpec::affine("t", 3, 3);
        let input = DenseArray::from_vec(&[2, 3], vec![1.5, -2.0, 0.25, 3.0, 4.0, -1.0]).unwrap();
        let out = forward_block(&input, &store, &spec).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn affine_matches_explicit_matrix_product() {
        // Seeded 2x3 input through a 3->4 affine, against a by-hand product.
        let mut rng = Rng::new(99);
        let mut store = ParamStore::new();
        init_affine::<f32>(&mut store, &mut rng, "t", 3, 4).unwrap();
        let input = DenseArray::from_fn(&[2, 3], || rng.normal_f32());
        let spec = BlockSpec::affine("t", 3, 4);
        let out = forward_block(&input, &store, &spec).unwrap();

        let w = store.get("t.w").unwrap();
        let b = store.get("t.b").unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 0.0f64;
                for k in 0..3 {
                    s += input.data()[i * 3 + k] as f64 * w.data()[k * 4 + j] as f64;
                }
                s += b.data()[j] as f64;
                let got = out.data()[i * 4 + j] as f64;
                assert!((got - s).abs() < 1e-6, "({i},{j}): {got} vs {s}");
            }
        }
    }

    #[test]
    fn shape_error_names_block() {
        let store = affine_store(vec![0.0; 6], vec![0.0; 2], 3, 2);
        let spec = BlockSpec::affine("t", 3, 2);
        let err = forward_block(&DenseArray::zeros(&[2, 5]), &store, &spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("t: affine 3->2") && msg.contains("[2, 5]"), "{msg}");
    }

    #[test]
    fn token_resample_uniform_weights_average_tokens() {
        let mut store = ParamStore::new();
        store
            .insert("agg.w", DenseArray::filled(&[4, 1], 0.25f32))
            .unwrap();
        let spec = BlockSpec::token_resample("agg", 4, 1);
        // All tokens identical: the resampled token equals the shared one.
        let token = [1.0f32, -2.0, 0.5];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&token);
        }
        let input = DenseArray::from_vec(&[1, 4, 3], data).unwrap();
        let out = forward_block(&input, &store, &spec).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3]);
        for (got, want) in out.data().iter().zip(token) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_preserves_shape_and_is_deterministic() {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        let spec = BlockSpec::attention("att", 8, 2);
        spec.init(&mut store, &mut rng).unwrap();
        let input = DenseArray::from_fn(&[2, 5, 8], || rng.normal_f32());
        let a = forward_block(&input, &store, &spec).unwrap();
        let b = forward_block(&input, &store, &spec).unwrap();
        assert_eq!(a.shape(), input.shape());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        let spec = BlockSpec::attention("att", 8, 3);
        assert!(spec.init(&mut store, &mut rng).is_err());
    }
}
