//! Partial-level gated feed-forward network.
//!
//! Instead of one wide FFN over the full model width, a single *small* FFN
//! (`d_k → r·d_k → d_k`, ReLU) is applied to every attention head output,
//! sharing its weights across heads. Each head's result is then modulated by
//! a per-head gate computed from the sub-layer input, and the gated head
//! outputs are fused back to model width through the output projection.
//!
//! Sharing one small FFN across `h` heads keeps the total hidden dimension at
//! `h·r·d_k` while spending only `2·d_k·(r·d_k)` weights — the parameter
//! argument that motivates the whole design (see the decomposition test at
//! the bottom of this file).

use crate::rng::Rng;
use crate::tensor::{Activation, Tensor};

/// Gate activation choice. `relu` is the default; `identity` passes the raw
/// projection through (used by ablations and the reduction tests).
pub type GateSigma = Activation;

/// Parameters of one partial-level gated FFN: the shared small FFN plus one
/// gate projection per head.
pub struct PgffnParams {
    pub h: usize,
    pub d: usize,
    pub d_k: usize,
    pub r: usize,
    pub sigma: GateSigma,
    pub w1: Tensor, // [d_k, r·d_k]
    pub b1: Tensor, // [r·d_k]
    pub w2: Tensor, // [r·d_k, d_k]
    pub b2: Tensor, // [d_k]
    pub gates: Vec<Tensor>, // h × [d, d_k], no bias
    /// Diagnostic switch: when set, gating is skipped entirely (equivalent to
    /// all-ones gates). Used by reduction and equivalence tests.
    pub gates_forced_open: bool,
}

impl PgffnParams {
    pub fn init(h: usize, d: usize, d_k: usize, r: usize, sigma: GateSigma, rng: &mut Rng) -> PgffnParams {
        assert!(r >= 1, "expansion ratio must be at least 1");
        let hidden = r * d_k;
        PgffnParams {
            h,
            d,
            d_k,
            r,
            sigma,
            w1: Tensor::xavier_param(d_k, hidden, rng),
            b1: Tensor::zeros_param(vec![hidden]),
            w2: Tensor::xavier_param(hidden, d_k, rng),
            b2: Tensor::zeros_param(vec![d_k]),
            gates: (0..h).map(|_| Tensor::xavier_param(d, d_k, rng)).collect(),
            gates_forced_open: false,
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
        for (i, g) in self.gates.iter().enumerate() {
            out.push((format!("{prefix}.gate.{i}"), g.clone()));
        }
    }

    /// Parameter count of the shared small FFN alone (weights + biases).
    pub fn small_ffn_param_count(d_k: usize, r: usize) -> usize {
        2 * d_k * (r * d_k) + r * d_k + d_k
    }
}

/// Apply the shared small FFN to rows of width `d_k`. `relu_dropout` (with
/// its RNG) applies inverted dropout to the post-ReLU hidden activations;
/// `hidden_probe` receives a copy of those activations (pre-dropout) for the
/// activation-statistics metrics.
pub fn small_ffn(
    x: &Tensor,
    p: &PgffnParams,
    relu_dropout: f64,
    rng: Option<&mut Rng>,
    hidden_probe: Option<&mut Vec<f64>>,
) -> Tensor {
    let hidden = x.matmul(&p.w1).add_bias(&p.b1).relu();
    if let Some(probe) = hidden_probe {
        probe.extend_from_slice(&hidden.data());
    }
    let hidden = match (relu_dropout > 0.0, rng) {
        (true, Some(r)) => hidden.dropout(relu_dropout, r),
        _ => hidden,
    };
    hidden.matmul(&p.w2).add_bias(&p.b2)
}

/// Per-head gates from the (pre-normalized) sub-layer input:
/// `G[i] = σ(x_norm · W_G[i])`, returned as `[h, t, d_k]`.
pub fn generate_gates(x_norm: &Tensor, p: &PgffnParams) -> Tensor {
    let per_head: Vec<Tensor> = p.gates.iter().map(|w| x_norm.matmul(w)).collect();
    Tensor::stack(&per_head).activation(p.sigma)
}

/// The full partial-level gated FFN: run every head output through the
/// shared small FFN and modulate with the per-head gates.
///
/// `heads` is `[h, t, d_k]` (attention output, pre-fusion); `x_norm` is the
/// `[t, d]` normalized sub-layer input the gates are computed from. Dropout
/// (rate `relu_dropout`) applies to the FFN hidden layer and to the gate
/// activations, both inverted; pass 0.0 / `None` for evaluation.
pub fn pg_ffn(
    heads: &Tensor,
    x_norm: &Tensor,
    p: &PgffnParams,
    relu_dropout: f64,
    mut rng: Option<&mut Rng>,
    hidden_probe: Option<&mut Vec<f64>>,
) -> Tensor {
    let shape = heads.shape().to_vec();
    assert_eq!(shape.len(), 3, "pg_ffn expects [h, t, d_k]");
    let (h, t, d_k) = (shape[0], shape[1], shape[2]);
    assert_eq!(h, p.h, "pg_ffn: head count mismatch");
    assert_eq!(d_k, p.d_k, "pg_ffn: head width mismatch");

    // One big matmul covers all heads: the small FFN weights are shared.
    let merged = heads.reshape(vec![h * t, d_k]);
    let ffn_out = small_ffn(&merged, p, relu_dropout, rng.as_deref_mut(), hidden_probe)
        .reshape(vec![h, t, d_k]);

    if p.gates_forced_open {
        return ffn_out;
    }
    let gates = generate_gates(x_norm, p);
    let gates = match (relu_dropout > 0.0, rng) {
        (true, Some(r)) => gates.dropout(relu_dropout, r),
        _ => gates,
    };
    gates.mul(&ffn_out)
}

/// Fuse per-head outputs back to model width: concatenate heads along the
/// feature axis and project, `[h, t, d_k] → [t, h·d_k] → [t, d]`.
pub fn fuse_heads(o: &Tensor, w_o: &Tensor) -> Tensor {
    o.merge_heads().matmul(w_o)
}

/// Weight data that turns the small FFN into an exact identity: the hidden
/// layer computes `[relu(x), relu(-x)]` and the output layer reassembles
/// `relu(x) - relu(-x) = x`. Requires `r ≥ 2`; biases must be zero. Both
/// branches only pass values through or negate them, so the identity is exact
/// in floating point.
pub fn identity_ffn_data(d_k: usize, r: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(r >= 2, "identity construction needs hidden width ≥ 2·d_k");
    let hidden = r * d_k;
    let mut w1 = vec![0.0; d_k * hidden];
    let mut w2 = vec![0.0; hidden * d_k];
    for i in 0..d_k {
        w1[i * hidden + i] = 1.0;
        w1[i * hidden + d_k + i] = -1.0;
        w2[i * d_k + i] = 1.0;
        w2[(d_k + i) * d_k + i] = -1.0;
    }
    (w1, w2)
}
