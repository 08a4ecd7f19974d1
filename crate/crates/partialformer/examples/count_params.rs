//! Closed-form parameter accounting for the shipped preset geometries,
//! cross-checked against a live model built at a smaller width.
//!
//!     cargo run --example count_params

use partialformer::analysis::count_params;
use partialformer::model::{Arch, Model, ModelConfig};

fn preset(arch: Arch, n: usize, m: usize, d: usize, d_k: usize, h_enc: usize, h_dec: usize) -> ModelConfig {
    serde_json::from_value(serde_json::json!({
        "arch": arch, "n_enc": n, "m_dec": m, "d": d, "d_k": d_k,
        "h_enc": h_enc, "h_dec": h_dec, "vocab_size": 34040, "max_len": 256,
    }))
    .expect("preset geometry is well-formed")
}

fn main() -> partialformer::Result<()> {
    let rows = [
        ("transformer 6-6/512", preset(Arch::Vanilla, 6, 6, 512, 64, 8, 8)),
        ("transformer 24-6/512", preset(Arch::Vanilla, 24, 6, 512, 64, 8, 8)),
        ("partialformer 24-6/512, heads 8-8", preset(Arch::Partialformer, 24, 6, 512, 64, 8, 8)),
        ("partialformer 24-6/512, heads 24-16", preset(Arch::Partialformer, 24, 6, 512, 64, 24, 16)),
        ("partialformer 24-6/360, heads 30-16", preset(Arch::Partialformer, 24, 6, 360, 45, 30, 16)),
        ("gated-ffn transformer 6-6/512", preset(Arch::VanillaPgffn, 6, 6, 512, 64, 8, 8)),
    ];

    println!("{:<40} {:>12} {:>12} {:>12}", "geometry", "total", "per enc", "per dec");
    for (label, cfg) in &rows {
        let p = count_params(cfg);
        println!(
            "{:<40} {:>12} {:>12} {:>12}",
            label, p.total, p.per_encoder_layer, p.per_decoder_layer
        );
    }

    // The closed forms are exact, not estimates: build a small model and
    // compare against the number of floats actually allocated.
    let mut small = preset(Arch::Partialformer, 2, 2, 64, 16, 6, 3);
    small.vocab_size = 101;
    let model = Model::new(small.clone())?;
    let closed = count_params(&small).total;
    let live = model.param_count();
    assert_eq!(closed, live);
    println!("\nclosed-form check on a 2-2/64 model: {closed} == {live} allocated floats");
    Ok(())
}
