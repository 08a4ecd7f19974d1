//! Verify every backward gradient against central finite differences on a
//! tiny unified-sublayer model with head scaling and global attention active.
//!
//!     cargo run --example gradient_check

use partialformer::model::{ForwardCtx, Model, ModelConfig};
use partialformer::tensor::{gradient_mismatch, numeric_gradient};
use partialformer::training::{decoder_io, label_smoothed_ce};

fn main() -> partialformer::Result<()> {
    let cfg: ModelConfig = serde_json::from_value(serde_json::json!({
        "arch": "partialformer", "n_enc": 1, "m_dec": 1, "d": 12, "d_k": 4,
        "h_enc": 4, "h_dec": 2, "vocab_size": 9, "max_len": 8,
        "dropout": 0.0, "attn_dropout": 0.0, "relu_dropout": 0.0, "seed": 5,
    }))
    .expect("model config is well-formed");
    let model = Model::new(cfg)?;

    let src = vec![4usize, 7, 5];
    let (tgt_in, labels) = decoder_io(&[6usize, 4, 8]);
    let loss_of = |model: &Model| -> f64 {
        let logits = model.forward(&src, &tgt_in, &mut ForwardCtx::eval()).expect("forward succeeds");
        label_smoothed_ce(&logits, &labels, 0.1).item()
    };

    // One backward sweep populates every parameter's gradient.
    let logits = model.forward(&src, &tgt_in, &mut ForwardCtx::eval())?;
    let loss = label_smoothed_ce(&logits, &labels, 0.1);
    loss.backward();

    let mut worst = (0.0f64, String::new());
    for (name, param) in model.params() {
        let analytic = param.grad_clone().expect("backward reached every parameter");
        let numeric = numeric_gradient(param, 1e-5, || loss_of(&model));
        let err = gradient_mismatch(&analytic, &numeric);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }

    println!("checked {} parameter tensors", model.params().len());
    println!("worst relative error {:.3e} at {}", worst.0, worst.1);
    assert!(worst.0 < 1e-4, "gradient mismatch too large");
    println!("all gradients match finite differences");
    Ok(())
}
