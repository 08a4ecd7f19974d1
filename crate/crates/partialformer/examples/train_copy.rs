//! Train a small encoder-decoder on the copy task and watch held-out loss
//! fall and token accuracy rise, then decode one example greedily.
//!
//!     cargo run --example train_copy

use partialformer::model::{Model, ModelConfig};
use partialformer::training::{encoder_input, greedy_decode, make_task, train, TaskSpec, TrainConfig};

fn main() -> partialformer::Result<()> {
    let model_cfg: ModelConfig = serde_json::from_value(serde_json::json!({
        "arch": "partialformer", "n_enc": 2, "m_dec": 2, "d": 32, "d_k": 8,
        "h_enc": 4, "h_dec": 4, "vocab_size": 24, "max_len": 24,
        "dropout": 0.0, "attn_dropout": 0.0, "relu_dropout": 0.0, "seed": 7,
    }))
    .expect("model config is well-formed");
    let task: TaskSpec = serde_json::from_value(serde_json::json!({
        "kind": "copy", "vocab_size": 24, "min_len": 3, "max_len": 8,
        "n_train": 512, "n_eval": 64, "seed": 7,
    }))
    .expect("task spec is well-formed");
    let train_cfg: TrainConfig = serde_json::from_value(serde_json::json!({
        "lr_peak": 1e-2, "warmup_steps": 60, "total_steps": 600,
        "batch_tokens": 512, "eval_every": 100, "target_accuracy": 0.995, "seed": 7,
    }))
    .expect("train config is well-formed");

    let mut model = Model::new(model_cfg)?;
    let summary = train(&mut model, &task, &train_cfg)?;

    println!("step      lr        eval loss  token accuracy");
    for r in &summary.history {
        println!("{:<8}  {:.2e}  {:<9.4}  {:.3}", r.step, r.lr, r.loss, r.token_accuracy);
    }
    println!(
        "finished after {} steps{}\n",
        summary.steps_run,
        if summary.stopped_early { " (accuracy target reached early)" } else { "" }
    );

    let probe = make_task(&task)?.eval.into_iter().next().expect("eval split is non-empty");
    let hyp = greedy_decode(&model, &encoder_input(&probe.src), 1.0, 12)?;
    println!("source : {:?}", probe.src);
    println!("decoded: {:?}  (score {:.4})", hyp.tokens, hyp.score);
    Ok(())
}
