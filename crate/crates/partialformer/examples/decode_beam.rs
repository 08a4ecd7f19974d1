//! Beam search versus greedy decoding on a briefly trained model, and the
//! effect of the length-penalty exponent on hypothesis ranking.
//!
//!     cargo run --example decode_beam

use partialformer::model::{Model, ModelConfig};
use partialformer::training::{beam_decode, encoder_input, greedy_decode, train, TaskSpec, TrainConfig};

fn main() -> partialformer::Result<()> {
    let model_cfg: ModelConfig = serde_json::from_value(serde_json::json!({
        "arch": "partialformer", "n_enc": 2, "m_dec": 2, "d": 32, "d_k": 8,
        "h_enc": 4, "h_dec": 4, "vocab_size": 16, "max_len": 16,
        "dropout": 0.0, "attn_dropout": 0.0, "relu_dropout": 0.0, "seed": 11,
    }))
    .expect("model config is well-formed");
    let task: TaskSpec = serde_json::from_value(serde_json::json!({
        "kind": "reverse", "vocab_size": 16, "min_len": 2, "max_len": 5,
        "n_train": 512, "n_eval": 32, "seed": 11,
    }))
    .expect("task spec is well-formed");
    let train_cfg: TrainConfig = serde_json::from_value(serde_json::json!({
        "lr_peak": 1e-2, "warmup_steps": 40, "total_steps": 1000,
        "batch_tokens": 256, "eval_every": 50, "seed": 11,
    }))
    .expect("train config is well-formed");

    let mut model = Model::new(model_cfg)?;
    train(&mut model, &task, &train_cfg)?;

    let src = vec![5usize, 9, 6, 12];
    let enc_in = encoder_input(&src);
    println!("source {:?} (reverse task)\n", src);

    for alpha in [0.6, 1.0, 1.3] {
        let greedy = greedy_decode(&model, &enc_in, alpha, 10)?;
        let beams = beam_decode(&model, &enc_in, 4, alpha, 10)?;
        println!("alpha = {alpha}");
        println!("  greedy  {:?}  score {:.4}", greedy.tokens, greedy.score);
        for (i, h) in beams.iter().enumerate() {
            let tag = if h.truncated { "  [truncated]" } else { "" };
            println!("  beam {}  {:?}  score {:.4}{}", i + 1, h.tokens, h.score, tag);
        }
        // The best beam never scores below greedy: greedy is the beam-1 path.
        assert!(beams[0].score >= greedy.score - 1e-12);
    }
    Ok(())
}
