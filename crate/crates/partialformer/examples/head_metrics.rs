//! Probe a forward pass and compute the behavioral metrics: head-output
//! diversity, token uniformity across encoder depth, and FFN activation rates.
//!
//!     cargo run --example head_metrics

use partialformer::analysis::{encoder_ffn_param_count, ffn_activation_stats, head_diversity, token_uniformity};
use partialformer::model::{ForwardCtx, Model, ModelConfig, Probe};

fn main() -> partialformer::Result<()> {
    let cfg: ModelConfig = serde_json::from_value(serde_json::json!({
        "arch": "partialformer", "n_enc": 4, "m_dec": 2, "d": 48, "d_k": 8,
        "h_enc": 8, "h_dec": 6, "vocab_size": 50, "max_len": 32,
        "dropout": 0.0, "attn_dropout": 0.0, "relu_dropout": 0.0, "seed": 21,
    }))
    .expect("model config is well-formed");
    let model = Model::new(cfg.clone())?;

    let src: Vec<usize> = (0..12).map(|i| 4 + (i * 7) % 40).collect();
    let tgt_in: Vec<usize> = (0..9).map(|i| 4 + (i * 11) % 40).collect();
    let mut probe = Probe::default();
    model.forward(&src, &tgt_in, &mut ForwardCtx::probed(&mut probe))?;

    println!(
        "captured {} head sets, {} hidden sets, {} encoder states",
        probe.head_outputs.len(),
        probe.ffn_hidden.len(),
        probe.encoder_states.len()
    );

    let (d_output, skipped) = head_diversity(&probe.head_outputs);
    println!(
        "d_output = {:.4}  ({} zero-norm head pairs skipped)",
        d_output.expect("heads produced non-zero outputs"),
        skipped
    );

    // Per-layer uniformity shows how similar token states become with depth.
    for state in &probe.encoder_states {
        let (u, _) = token_uniformity(std::slice::from_ref(state));
        println!("token uniformity {:<18} {:+.4}", state.label, u.expect("multi-token probe"));
    }

    let enc_hidden: Vec<_> =
        probe.ffn_hidden.iter().filter(|h| h.label.starts_with("encoder.")).cloned().collect();
    let ffn = ffn_activation_stats(&enc_hidden, encoder_ffn_param_count(&cfg))
        .expect("encoder captured hidden activations");
    println!(
        "ffn: n_act {:.1} of hidden {} (R_act {:.3}, eta {:.2e}) over {} tokens",
        ffn.n_act, ffn.hidden_dim, ffn.r_act, ffn.eta_ffn, ffn.tokens
    );
    Ok(())
}
