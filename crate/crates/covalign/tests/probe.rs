//! Manual experiment probes; run with `cargo test --test probe -- --ignored --nocapture`.

use covalign::model::ModelConfig;
use covalign::selftrain::*;
use covalign::synthdata::benchmark::default_benchmark;
use covalign::synthdata::generate;

#[test]
#[ignore]
fn pretrain_dynamics() {
    let (src_spec, tgt_spec) = default_benchmark();
    let src = generate(&src_spec, 24, 1).unwrap();
    let src_val = generate(&src_spec, 16, 2).unwrap();
    let tgt_val = generate(&tgt_spec, 16, 3).unwrap();

    for (lr, iters, weights) in [
        (0.01, 600, [1.0, 0.0, 0.0, 0.0]),
        (0.01, 600, [1.0, 0.0, 1.0, 0.0]),
        (0.02, 600, [1.0, 0.0, 1.0, 0.0]),
    ] {
        let cfg = RunConfig {
            model: ModelConfig::default(),
            sgd: SgdSettings {
                base_lr: lr,
                ..SgdSettings::default()
            },
            stage: StageConfig {
                max_stages: 1,
                iters_per_stage: iters,
                batch_size: 4,
                pseudo_confidence_threshold: None,
                loss_weights: weights,
            },
            cr: Default::default(),
            recipe: Default::default(),
            seed: 0,
        };
        let mut tr = Trainer::new(cfg);
        tr.pretrain(&src).unwrap();
        let every = iters / 10;
        for (i, row) in tr.trace.iter().enumerate() {
            if i % every == 0 {
                println!(
                    "lr={lr} w={:?} it={i:4} ce_s={:.4} intra={:.4} lr_t={:.5}", weights,
                    row.l_ce_s, row.l_intra, row.lr
                );
            }
        }
        let train_miou = evaluate_miou(&tr.model, &src).unwrap();
        let val_miou = evaluate_miou(&tr.model, &src_val).unwrap();
        let tgt_miou = evaluate_miou(&tr.model, &tgt_val).unwrap();
        println!("lr={lr}: train mIoU {train_miou:.4}  src-val {val_miou:.4}  tgt-val {tgt_miou:.4}\n");
    }
}
