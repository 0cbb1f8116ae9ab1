//! Scratch probe for training-speed and learnability measurements.
//! Run explicitly: cargo test -p arbor-core --test probe_learnability -- --ignored --nocapture

use arbor_core::encoder::{Encoder, EncoderConfig};
use arbor_core::pipeline::{stream_rng, train_stage, ParseTask, TrainSchedule};
use arbor_core::synth::{random_attachment_baseline, toy_treebank};
use arbor_core::tokenizer::{train_bpe, MIN_VOCAB};

#[test]
#[ignore]
fn probe_toy_learnability() {
    let seed = 42u64;
    let mut data_rng = stream_rng(seed, 900);
    let train = toy_treebank(400, 3, 9, &mut data_rng);
    let dev = toy_treebank(50, 3, 9, &mut data_rng);
    let test = toy_treebank(50, 3, 9, &mut data_rng);

    let corpus: Vec<Vec<String>> = train.iter().map(|s| s.forms()).collect();
    let vocab = train_bpe(&corpus, MIN_VOCAB + 64).unwrap();

    let cfg = EncoderConfig {
        layers: 4,
        hidden: 128,
        heads: 4,
        ffn: 512,
        max_len: 48,
        dropout: 0.1,
        vocab_size: vocab.size(),
    };
    let mut encoder = Encoder::new(cfg.clone(), &mut stream_rng(seed, 0));
    let mut task = ParseTask::new(&train, &dev, &vocab, cfg.hidden, cfg.dropout, &mut stream_rng(seed, 2)).unwrap();

    let schedule = TrainSchedule {
        max_epochs: std::env::var("PROBE_EPOCHS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(3),
        ..TrainSchedule::treebank()
    };

    let t0 = std::time::Instant::now();
    let report = train_stage(&mut encoder, &mut task, &schedule, seed.wrapping_add(11)).unwrap();
    let elapsed = t0.elapsed();
    println!(
        "epochs={} steps={} time={:.1?} ({:.0} ms/step)",
        report.epochs_run,
        report.update_steps,
        elapsed,
        elapsed.as_millis() as f64 / report.update_steps as f64
    );
    println!(
        "dev loss: initial {:.4} best {:.4} final {:.4}",
        report.initial_dev_loss, report.best_dev_loss, report.final_dev_loss
    );
    println!("measurements: {:?}", report.measurements);
    let eval = task.evaluate(&encoder, &test, &vocab, false).unwrap();
    println!(
        "test UAS {:.1} LAS {:.1} tree_rate {:.1} (baseline UAS {:.1})",
        eval.uas,
        eval.las,
        eval.tree_rate,
        random_attachment_baseline(&test)
    );
}
