//! Keep a ring of recent parameter snapshots during training and average
//! them into a single model — often slightly better than the last step alone.
//!
//!     cargo run --example average_checkpoints

use partialformer::model::{Model, ModelConfig};
use partialformer::training::{average_snapshots, evaluate, make_task, restore, train, TaskSpec, TrainConfig};

fn main() -> partialformer::Result<()> {
    let model_cfg: ModelConfig = serde_json::from_value(serde_json::json!({
        "arch": "vanilla_pgffn", "n_enc": 2, "m_dec": 2, "d": 32, "d_k": 8,
        "h_enc": 4, "h_dec": 4, "vocab_size": 20, "max_len": 20,
        "dropout": 0.0, "attn_dropout": 0.0, "relu_dropout": 0.0, "seed": 3,
    }))
    .expect("model config is well-formed");
    let task: TaskSpec = serde_json::from_value(serde_json::json!({
        "kind": "copy", "vocab_size": 20, "min_len": 2, "max_len": 6,
        "n_train": 256, "n_eval": 64, "seed": 3,
    }))
    .expect("task spec is well-formed");
    let train_cfg: TrainConfig = serde_json::from_value(serde_json::json!({
        "lr_peak": 1e-2, "warmup_steps": 30, "total_steps": 240, "batch_tokens": 256,
        "eval_every": 60, "checkpoint_every": 20, "average_last_k": 5, "seed": 3,
    }))
    .expect("train config is well-formed");

    let mut model = Model::new(model_cfg.clone())?;
    let summary = train(&mut model, &task, &train_cfg)?;
    let steps: Vec<usize> = summary.checkpoints.iter().map(|c| c.step).collect();
    println!("ring holds the last {} snapshots: steps {:?}", steps.len(), steps);

    let snaps: Vec<_> = summary.checkpoints.iter().map(|c| c.params.clone()).collect();
    let averaged = Model::new(model_cfg)?;
    restore(&averaged, &average_snapshots(&snaps)?)?;

    let eval = make_task(&task)?.eval;
    let (final_loss, final_acc) = evaluate(&model, &eval, train_cfg.label_smoothing)?;
    let (avg_loss, avg_acc) = evaluate(&averaged, &eval, train_cfg.label_smoothing)?;
    println!("final step : loss {final_loss:.4}  accuracy {final_acc:.3}");
    println!("ring mean  : loss {avg_loss:.4}  accuracy {avg_acc:.3}");
    Ok(())
}
