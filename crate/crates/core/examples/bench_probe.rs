//! Rough single-core throughput probe for sizing experiment budgets:
//! simulated-model decoding rates and transformer training step times.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selfadd_core::decoding::{fast_answer, least_to_most, simplify_then_guess};
use selfadd_core::learner::{Transformer, TransformerConfig};
use selfadd_core::model::CompletionModel;
use selfadd_core::oracle::{oracle_add, sample_problem};
use selfadd_core::simlab::SimModel;
use selfadd_core::taskfmt::TemplateSet;

fn main() {
    let template = TemplateSet::by_name("compact").unwrap();
    let sim = SimModel::perfect(template.clone(), 9);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let problems: Vec<_> = (0..20_000).map(|_| sample_problem(4, &mut rng)).collect();
    let start = Instant::now();
    let mut checks = 0usize;
    for p in &problems {
        let truth = oracle_add(p);
        checks += usize::from(fast_answer(&sim, p, &template).as_ref() == Some(&truth));
        checks += usize::from(least_to_most(&sim, p, &template).0.as_ref() == Some(&truth));
        checks += usize::from(simplify_then_guess(&sim, p, &template, 5).0.decision.as_ref() == Some(&truth));
    }
    let per = start.elapsed().as_secs_f64() / problems.len() as f64;
    println!(
        "sim strategies: {:.2} us/problem (all three), {checks} hits, est len-4 exhaustive {:.0} s",
        per * 1e6,
        per * 162_000_000.0
    );

    for (batch, width, layers) in [(64usize, 128, 4), (256, 128, 4)] {
        let config = TransformerConfig {
            width,
            layers,
            heads: 4,
            ff_width: 4 * width,
            max_seq_len: 64,
            learning_rate: 1e-3,
            seed: 0,
            ..TransformerConfig::default()
        };
        let mut model = Transformer::<f32>::new(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs: Vec<(String, String)> = (0..batch)
            .map(|_| {
                let p = sample_problem(4, &mut rng);
                let ex = template.render_fast(&p, &oracle_add(&p));
                (ex.prompt, ex.target)
            })
            .collect();
        model.train_batch(&pairs).unwrap();
        let start = Instant::now();
        let steps = 10;
        for _ in 0..steps {
            model.train_batch(&pairs).unwrap();
        }
        let per = start.elapsed().as_secs_f64() / steps as f64;
        println!(
            "transformer w{width} l{layers} batch {batch}: {:.3} s/step ({:.0} steps/hour)",
            per,
            3600.0 / per
        );
    }
}
