use std::time::Instant;

use rand::SeedableRng as _;
use tg_core::autodiff::{Graph, Rng};
use tg_core::model::{stream_training_loss, Ctx, ForwardOpts, ModelConfig, Params, Variant};
use tg_core::textpipe::package_ids;

fn main() {
    let cfg = ModelConfig {
        vocab_size: 2048,
        n_layers: 6,
        d_model: 64,
        n_heads: 4,
        ffn_mult: 4,
        lexical_cap: 32,
        memory_capacity: 8,
        sentence_layer: 4,
        context_window: 512,
        variant: Variant::Tg,
        dropout_token: 0.0,
        dropout_sentence_rep: 0.0,
        dropout_attention: 0.0,
        ..ModelConfig::default()
    };
    let params: Params<f32> = Params::init(&cfg, 0).unwrap();
    let stream: Vec<_> = (0..10)
        .map(|i| {
            let ids: Vec<u32> = (0..22).map(|j| 4 + ((i * 31 + j * 7) % 2000) as u32).collect();
            package_ids(&ids, cfg.effective_cap(), i == 9).unwrap()
        })
        .collect();

    // Warm up, then time forward+backward over the stream.
    for round in 0..4 {
        let start = Instant::now();
        let mut steps = 0usize;
        let iters = 8;
        for _ in 0..iters {
            let mut g: Graph<f32> = Graph::new();
            let bound = params.bind(&mut g, true);
            let opts = ForwardOpts::train(tg_core::model::DropoutRates::zero());
            let ctx = Ctx { cfg: &cfg, schema: &params.schema, bound: &bound, opts: &opts };
            let mut rng = Rng::seed_from_u64(0);
            let out = stream_training_loss(&mut g, ctx, &stream, 1.0, &mut rng).unwrap();
            let _ = g.backward(out.loss).unwrap();
            steps += stream.len();
        }
        let dt = start.elapsed().as_secs_f64();
        println!(
            "round {}: {:.1} ms/sentence-step ({} steps in {:.2}s)",
            round,
            1000.0 * dt / steps as f64,
            steps,
            dt
        );
    }
}
