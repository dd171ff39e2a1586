use std::time::Instant;

use tg_core::eval::eval_perplexity;
use tg_core::exec::Mode;
use tg_core::model::{ModelConfig, Variant};
use tg_core::synth::{generate_corpus, word_count, SynthSpec};
use tg_core::textpipe::{prepare_corpus, PrepOptions};
use tg_core::training::{train, TrainConfig, TrainData};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_docs: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(300);
    let epochs: usize = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(1);

    let corpus = generate_corpus(&SynthSpec {
        n_docs,
        min_sentences: 8,
        max_sentences: 12,
        seed: 424,
    });
    println!("corpus words: {}", word_count(&corpus));
    let t0 = Instant::now();
    let prep = prepare_corpus(
        &corpus,
        None,
        None,
        &PrepOptions {
            target_vocab: 2048,
            lexical_cap: 32,
            valid_frac: 0.05,
            test_frac: 0.05,
            seed: 424,
        },
        Mode::Sequential,
    )
    .unwrap();
    println!(
        "prep: {:.1}s; train {} docs / {} sentences / {} lexical tokens; valid {} docs; vocab {}",
        t0.elapsed().as_secs_f64(),
        prep.train.docs.len(),
        prep.train.n_sentences(),
        prep.train.lexical_tokens(),
        prep.valid.docs.len(),
        prep.vocab.size()
    );

    for variant in [Variant::Tg, Variant::TgDetach] {
        let model = ModelConfig {
            vocab_size: prep.vocab.size(),
            n_layers: 6,
            d_model: 64,
            n_heads: 4,
            ffn_mult: 4,
            lexical_cap: 32,
            memory_capacity: 8,
            sentence_layer: 4,
            context_window: 512,
            variant,
            dropout_token: 0.0,
            dropout_sentence_rep: 0.0,
            dropout_attention: 0.0,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            peak_lr: 1e-3,
            epochs_max: epochs,
            early_stop_patience: 50,
            batch_budget: 4096,
            max_streams: 64,
            log_every: 25,
            seed: 99,
            ..TrainConfig::default()
        };
        let t = Instant::now();
        let report = train::<f32>(
            &model,
            &tc,
            &TrainData {
                train: &prep.train.docs,
                valid: &prep.valid.docs,
            },
            None,
            Mode::Sequential,
        )
        .unwrap();
        let test = eval_perplexity(&report.best_params, &prep.test.docs, Mode::Sequential).unwrap();
        println!(
            "{}: {:.1}s, steps {}, sentence steps {}, best val ppl {:.3} (epoch {}), test ppl {:.3}",
            variant,
            t.elapsed().as_secs_f64(),
            report.optimizer_steps,
            report.sentence_steps,
            report.best_val_ppl,
            report.best_epoch,
            test.ppl
        );
    }
}
