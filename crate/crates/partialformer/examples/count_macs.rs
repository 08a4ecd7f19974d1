//! Multiply-accumulate accounting for one translation: encoder once over the
//! source, full-recompute autoregressive decoding over the target.
//!
//!     cargo run --example count_macs

use partialformer::analysis::{count_macs, MACS_CONVENTION};
use partialformer::model::ModelConfig;

fn from_json(v: serde_json::Value) -> ModelConfig {
    serde_json::from_value(v).expect("geometry is well-formed")
}

fn main() {
    let base = from_json(serde_json::json!({
        "arch": "vanilla", "n_enc": 6, "m_dec": 6, "d": 512, "d_k": 64,
        "h_enc": 8, "h_dec": 8, "vocab_size": 34040, "max_len": 256,
    }));
    let slim = from_json(serde_json::json!({
        "arch": "partialformer", "n_enc": 24, "m_dec": 6, "d": 360, "d_k": 45,
        "h_enc": 30, "h_dec": 16, "vocab_size": 34040, "max_len": 256,
    }));

    println!("convention: {MACS_CONVENTION}\n");
    for (label, cfg) in [("transformer 6-6/512", &base), ("partialformer 24-6/360 heads 30-16", &slim)] {
        let m = count_macs(cfg, 20, 20);
        println!("{label} @ 20/20 tokens");
        println!("  total              {:>16}", m.total);
        println!("  encoder            {:>16}", m.encoder);
        println!("  decoder            {:>16}", m.decoder);
        println!("  global attention   {:>16}", m.global_attention);
        println!("  output projection  {:>16}", m.output_projection);
    }

    // Decoding dominates: every emitted token reruns the decoder over the
    // whole prefix, so cost grows quadratically in target length.
    println!("partialformer total by target length (src fixed at 20):");
    for tgt in [5usize, 10, 20, 40] {
        println!("  tgt {:>3}  {:>16}", tgt, count_macs(&slim, 20, tgt).total);
    }
}
