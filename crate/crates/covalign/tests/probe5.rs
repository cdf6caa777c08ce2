//! Post-pretraining gradient balance across the four loss terms;
//! `cargo test --release --test probe5 -- --ignored --nocapture`.

use covalign::align::{ccr_loss, icr_loss, mse_align_loss, CrConfig};
use covalign::cfp::{pool_group, pool_group_mass_normalized};
use covalign::model::ModelConfig;
use covalign::selftrain::*;
use covalign::synthdata::benchmark::default_benchmark;
use covalign::synthdata::{generate, IGNORE_LABEL};
use covalign::tensor::{Tape, Tensor};

#[test]
#[ignore]
fn gradient_balance_after_pretrain() {
    let (src_spec, tgt_spec) = default_benchmark();
    let src = generate(&src_spec, 32, 11).unwrap();
    let tgt = generate(&tgt_spec, 32, 1011).unwrap();

    let cfg = RunConfig {
        model: ModelConfig::default(),
        sgd: SgdSettings::default(),
        stage: StageConfig {
            max_stages: 1,
            iters_per_stage: 400,
            batch_size: 4,
            pseudo_confidence_threshold: None,
            loss_weights: [1.0, 0.0, 1.0, 0.0],
        },
        cr: Default::default(),
        recipe: Default::default(),
        seed: 3,
    };
    let mut tr = Trainer::new(cfg);
    tr.pretrain(&src).unwrap();
    let model = &tr.model;
    let cr = CrConfig::default();

    let grad_norm = |m: &covalign::model::SegModel| -> f64 {
        m.params()
            .iter()
            .map(|p| {
                p.grad()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                    .unwrap_or(0.0)
            })
            .sum::<f64>()
            .sqrt()
    };

    let pseudo = generate_pseudo_labels(model, &tgt, None, 1);

    let tape = Tape::new();
    let fwd = |idx: &[usize], data: &[covalign::synthdata::SceneSample]| -> Vec<(Tensor, Tensor)> {
        idx.iter()
            .map(|&i| {
                let x = data[i].image.to_tensor();
                let feat = model.encode(&tape, &x);
                let logits = model.classify_coarse(&tape, &feat);
                (feat, logits)
            })
            .collect()
    };
    let sf = fwd(&[0, 1, 2, 3], &src);
    let tf = fwd(&[0, 1, 2, 3], &tgt);

    // CE source
    let mut acc: Option<Tensor> = None;
    for (b, (_, logits)) in sf.iter().enumerate() {
        let up = tape.upsample_bilinear(logits, 32, 32);
        let pred = tape.softmax_channel(&up);
        let ce = cross_entropy(&tape, &pred, src[b].labels.pixels(), IGNORE_LABEL);
        acc = Some(match acc {
            None => ce.value,
            Some(a) => tape.add(&a, &ce.value),
        });
    }
    let ce_s = tape.scalar_mul(&acc.unwrap(), 0.25);
    tape.backward(&ce_s);
    println!("CE_s  value={:.4} grad_norm={:.4}", ce_s.item(), grad_norm(model));
    model.zero_grads();

    // CE target vs pseudo
    let mut acc: Option<Tensor> = None;
    for (b, (_, logits)) in tf.iter().enumerate() {
        let up = tape.upsample_bilinear(logits, 32, 32);
        let pred = tape.softmax_channel(&up);
        let ce = cross_entropy(&tape, &pred, pseudo.map(b), IGNORE_LABEL);
        acc = Some(match acc {
            None => ce.value,
            Some(a) => tape.add(&a, &ce.value),
        });
    }
    let ce_t = tape.scalar_mul(&acc.unwrap(), 0.25);
    tape.backward(&ce_t);
    println!("CE_t  value={:.4} grad_norm={:.4}", ce_t.item(), grad_norm(model));
    model.zero_grads();

    // ICR
    let grp = |items: &[(Tensor, Tensor)]| -> Vec<(Tensor, Tensor)> {
        items
            .iter()
            .map(|(f, l)| (f.clone(), tape.softmax_channel(l).detach()))
            .collect()
    };
    let icr = icr_loss(
        &tape,
        &pool_group(&tape, &grp(&sf[..2])),
        &pool_group(&tape, &grp(&sf[2..])),
        &cr,
    );
    tape.backward(&icr.value);
    println!("ICR   value={:.4} grad_norm={:.4}", icr.value.item(), grad_norm(model));
    model.zero_grads();

    // CCR
    let src_items: Vec<(Tensor, Tensor)> = sf
        .iter()
        .map(|(f, l)| (f.detach(), tape.softmax_channel(l).detach()))
        .collect();
    let ccr = ccr_loss(
        &tape,
        &pool_group(&tape, &src_items),
        &pool_group(&tape, &grp(&tf)),
        &cr,
    );
    tape.backward(&ccr.value);
    println!("CCR   value={:.4} grad_norm={:.4}", ccr.value.item(), grad_norm(model));
    model.zero_grads();

    // MSE cross
    let src_c = pool_group_mass_normalized(&tape, &src_items).detach();
    let tgt_c = pool_group_mass_normalized(&tape, &grp(&tf));
    let mse = mse_align_loss(&tape, &src_c, &tgt_c);
    tape.backward(&mse.value);
    println!("MSE   value={:.4} grad_norm={:.4}", mse.value.item(), grad_norm(model));
    model.zero_grads();
}
