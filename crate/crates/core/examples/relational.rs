//! Trains one model on the synthetic relational task and prints the learning
//! curve. Arguments are `key=value` overrides of the model, training and
//! (with a `synth.` prefix) data configurations.
//!
//! ```text
//! cargo run --release -p hlstcm-core --example relational -- variant=b3 epochs=50 lr=0.002
//! ```

use hlstcm_core::data::{generate_synthetic, SynthConfig};
use hlstcm_core::model::{HlstcmConfig, HlstcmParams};
use hlstcm_core::train::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = HlstcmConfig::default();
    let mut cfg = TrainConfig { epochs: 100, lr: 5e-3, decay: 0.99, eval_every: 5, ..TrainConfig::default() };
    let mut synth = SynthConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or(format!("expected key=value, got '{arg}'"))?;
        let known = match k.strip_prefix("synth.") {
            Some(sk) => synth.set(sk, v)?,
            None => config.set(k, v)? || cfg.set(k, v)?,
        };
        if !known {
            return Err(format!("unknown key '{k}'").into());
        }
    }
    config.resolve_groups();
    let (train, test) = generate_synthetic(&synth)?;
    let mut trainer = Trainer::new(HlstcmParams::init(&config, cfg.seed)?);
    trainer.run(&config, &cfg, &train, Some(&test), |m| {
        if let Some(acc) = m.test_acc {
            println!(
                "epoch {:4}  loss {:.4}  train {:.3}  test {:.3}  lr {:.2e}  {:.2}s",
                m.epoch, m.loss, m.train_acc, acc, m.lr, m.seconds
            );
        }
    })?;
    let ev = hlstcm_core::train::evaluate(&trainer.params, &config, &test)?;
    println!("confusion {:?}", ev.confusion);
    Ok(())
}
