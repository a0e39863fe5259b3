use adp_core::losses::{total_loss, LossConfig};
use adp_core::model::{build_branched_model, BlockKind, Mode, ModelConfig};
use adp_core::selftest::gradient_error;
use adp_core::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn tiny(block_kind: BlockKind) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        tokens: 3,
        width: 4,
        hidden_mult: 2,
        trunk_blocks: 2,
        clone_depth: 1,
        branches: 2,
        classes: 3,
        block_kind,
        dymain_blocks: 1,
        ..ModelConfig::default()
    }
}

/// Every parameter of a tiny branched model, through DyMAIN, both
/// branches, and all three loss terms.
fn check(block_kind: BlockKind, seed: u64) -> f64 {
    let config = tiny(block_kind);
    let model = build_branched_model(config.clone(), seed).unwrap();
    let mut rng = StdRng::seed_from_u64(seed);
    let n = 4;
    let tokens = Tensor::new(
        vec![n, config.tokens, config.input_dim],
        (0..n * config.tokens * config.input_dim)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect(),
    )
    .unwrap();
    let labels = [0, 0, 1, 1];
    let loss_config = LossConfig {
        margin: 5.0, // keeps every hinge active, away from its kink
        ..LossConfig::default()
    };
    let inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    gradient_error(&inputs, |tape, vars| {
        let out = model.forward(tape, vars, &tokens, Mode::Train)?;
        Ok(total_loss(&out.features, &out.logits, &labels, &loss_config)?.total)
    })
    .unwrap()
}

#[test]
fn tiny_model_matches_finite_differences() {
    for seed in 0..3 {
        for kind in [BlockKind::TokenMixLite, BlockKind::ResidualChannelMlp] {
            let err = check(kind, seed);
            assert!(err < 1e-4, "{kind:?}, seed {seed}: relative error {err:e}");
        }
    }
}
