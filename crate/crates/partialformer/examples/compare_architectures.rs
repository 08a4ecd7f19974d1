//! Side-by-side accounting for the three architectures at one width: the
//! vanilla baseline, the unified-sublayer model, and the vanilla hybrid that
//! only swaps its wide FFNs for per-head gated small FFNs.
//!
//!     cargo run --example compare_architectures

use partialformer::analysis::{count_macs, count_params};
use partialformer::model::{Arch, ModelConfig};

fn main() {
    let mut rows = Vec::new();
    for arch in [Arch::Vanilla, Arch::Partialformer, Arch::VanillaPgffn] {
        // Vanilla attention requires h = d / d_k; the other two can widen the
        // encoder head count beyond it (head scaling).
        let h_enc = if arch == Arch::Partialformer { 12 } else { 8 };
        let cfg: ModelConfig = serde_json::from_value(serde_json::json!({
            "arch": arch, "n_enc": 6, "m_dec": 6, "d": 256, "d_k": 32,
            "h_enc": h_enc, "h_dec": 8, "vocab_size": 8000, "max_len": 128,
        }))
        .expect("geometry is well-formed");
        rows.push((arch, cfg));
    }

    println!(
        "{:<16} {:>6} {:>12} {:>12} {:>14} {:>14}",
        "arch", "heads", "params", "per enc", "macs @ 20/20", "enc share"
    );
    for (arch, cfg) in &rows {
        let p = count_params(cfg);
        let m = count_macs(cfg, 20, 20);
        println!(
            "{:<16} {:>6} {:>12} {:>12} {:>14} {:>13.1}%",
            arch.as_str(),
            format!("{}-{}", cfg.h_enc, cfg.h_dec),
            p.total,
            p.per_encoder_layer,
            m.total,
            100.0 * m.encoder as f64 / m.total as f64,
        );
    }

    let vanilla = count_params(&rows[0].1).total;
    let unified = count_params(&rows[1].1).total;
    println!(
        "\nreplacing wide FFNs with shared per-head FFNs saves {:.0}% of the budget",
        100.0 * (1.0 - unified as f64 / vanilla as f64)
    );
}
