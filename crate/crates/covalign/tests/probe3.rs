//! Stability/quality grid for pretraining with the intra-domain term on;
//! `cargo test --release --test probe3 -- --ignored --nocapture`.

use covalign::model::ModelConfig;
use covalign::selftrain::*;
use covalign::synthdata::benchmark::default_benchmark;
use covalign::synthdata::generate;

#[test]
#[ignore]
fn pretrain_grid() {
    let (src_spec, tgt_spec) = default_benchmark();
    let src = generate(&src_spec, 24, 1).unwrap();
    let src_val = generate(&src_spec, 16, 2).unwrap();
    let tgt_val = generate(&tgt_spec, 16, 3).unwrap();

    for lr in [0.0025, 0.005, 0.01] {
        for seed in [0u64, 1, 2] {
            let cfg = RunConfig {
                model: ModelConfig::default(),
                sgd: SgdSettings {
                    base_lr: lr,
                    ..SgdSettings::default()
                },
                stage: StageConfig {
                    max_stages: 1,
                    iters_per_stage: 700,
                    batch_size: 4,
                    pseudo_confidence_threshold: None,
                    loss_weights: [1.0, 0.0, 1.0, 0.0],
                },
                cr: Default::default(),
                recipe: Default::default(),
                seed,
            };
            let mut tr = Trainer::new(cfg);
            tr.pretrain(&src).unwrap();
            let last = tr.trace.last().unwrap();
            let diverged = last.l_ce_s > 5.0;
            let val = evaluate_miou(&tr.model, &src_val).unwrap();
            let tgt = evaluate_miou(&tr.model, &tgt_val).unwrap();
            println!(
                "lr={lr} seed={seed}: final ce={:.3} intra={:.3} src-val={val:.3} tgt-val={tgt:.3}{}",
                last.l_ce_s,
                last.l_intra,
                if diverged { "  DIVERGED" } else { "" }
            );
        }
    }
}
