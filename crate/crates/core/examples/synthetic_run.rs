//! Pre-trains on a synthetic corpus and prints zero-shot and few-shot accuracy.
//!
//! Arguments: seed, epochs, learning rate, loss mask.

use std::time::Instant;

use graphtext::corpus::CorpusConfig;
use graphtext::experiment::Evaluator;
use graphtext::graph_encoder::GraphInputs;
use graphtext::model::{DualEncoder, ModelConfig};
use graphtext::pretrain::{pretrain, PretrainConfig};
use graphtext::prompt::{DiscretePrompt, PromptConfig};
use graphtext::tasks::{generate_synthetic_corpus, SyntheticConfig};

fn main() -> graphtext::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-5);
    let mask = args.get(4).cloned().unwrap_or_else(|| "L1,L2,L3".into());
    let t0 = Instant::now();
    let corpus = generate_synthetic_corpus(&SyntheticConfig { seed, ..Default::default() }, &CorpusConfig::default())?;
    println!("corpus built in {:.1}s, vocab {}", t0.elapsed().as_secs_f64(), corpus.vocab.len());
    let inputs = GraphInputs::from_corpus(&corpus)?;
    let mut model = DualEncoder::new(ModelConfig::default().for_corpus(&corpus), corpus.feature_dim(), seed)?;
    let cfg = PretrainConfig {
        epochs,
        learning_rate: lr,
        seed,
        loss_mask: mask.parse()?,
        ..PretrainConfig::default()
    };
    let log = pretrain(&mut model, &corpus, &inputs, &cfg, |_| {})?;
    for e in &log.epochs {
        println!(
            "epoch {} L1 {:.3} L2 {:.3} L3 {:.3} total {:.3} {:.1}s",
            e.epoch, e.mean_text_node, e.mean_text_summary, e.mean_node_summary, e.mean_total, e.seconds
        );
    }
    let ev = Evaluator::new(&model, &corpus)?;
    let zs = ev.zero_shot(&DiscretePrompt::label_only(), 5, 20, seed)?;
    println!("zero-shot acc {:.3}", zs.accuracy().mean);
    for k in 1..=5 {
        let t = Instant::now();
        let (fs, base) = ev.few_shot(&PromptConfig::default(), 5, k, 20, seed)?;
        println!(
            "{k}-shot acc {:.3} (label-only same queries {:.3}) {:.1}s",
            fs.accuracy().mean,
            base.accuracy().mean,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
