mod common;

use common::blob;
use spmkd_core::crwt::{evaluate, fit_regression};
use spmkd_core::losses::l2_loss_var;
use spmkd_core::{
    run_crwt, train_phase1, train_phase2, transfer_weights, Error, HeadMode, LossConfig, ModelConfig, PressureMap,
    SpmkdModel, TrainConfig, TrainingSet,
};

fn maps(cfg: &ModelConfig, n: usize) -> Vec<PressureMap> {
    let s = cfg.input_size;
    (0..n)
        .map(|i| PressureMap::new(s, s, blob(s, 18.0 + 5.0 * i as f64, 30.0 - 3.0 * i as f64, 12.0)).unwrap())
        .collect()
}

fn regression_model(cfg: &ModelConfig, seed: u64) -> SpmkdModel<f32> {
    let mut c = cfg.clone();
    c.decoder.head = HeadMode::Regression;
    SpmkdModel::new(&c, seed).unwrap()
}

#[test]
fn zero_beta_equals_plain_l2_trajectory() {
    let cfg = ModelConfig::micro();
    let set = TrainingSet::<f32>::from_maps(&maps(&cfg, 3), &cfg).unwrap();
    let tc = TrainConfig {
        seed: 11,
        phase2_epochs: 4,
        batch_size: 2,
        loss: LossConfig { beta: 0.0, ..LossConfig::default() },
        ..TrainConfig::default()
    };
    let mut a = regression_model(&cfg, 1);
    let (_, ra) = train_phase2(&mut a, &set, &tc).unwrap();
    let mut b = regression_model(&cfg, 1);
    let rb = fit_regression(&mut b, &set, &tc, 4, &mut |t, p, y| l2_loss_var(t, p, y)).unwrap();
    assert_eq!(ra, rb);
    for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
        assert!(pa.value.bit_eq(&pb.value), "{}", pa.name);
    }
}

#[test]
fn phase_one_overfits_a_single_sample() {
    let cfg = ModelConfig::desk(0.25);
    let set = TrainingSet::<f32>::from_maps(&maps(&cfg, 1), &cfg).unwrap();
    let tc = TrainConfig { seed: 2, phase1_epochs: 200, batch_size: 1, ..TrainConfig::default() };
    let mut model = SpmkdModel::<f32>::new(&cfg, 2).unwrap();
    let (ckpt, res) = train_phase1(&mut model, &set, &tc).unwrap();
    assert_eq!(model.predict(&[&set.inputs[0]]).unwrap().shape(), &[1, 2, 64, 64]);
    assert_eq!(ckpt.phase, "classification");
    let eval = evaluate(&model, &set, &tc, 200).unwrap();
    assert!(eval.fscore > 0.95, "f-score {}", eval.fscore);
    // loose monotone trend: no 50-epoch window ends more than 10% above its start
    for w in res.losses.windows(50) {
        assert!(w[49] <= w[0] * 1.1, "{} -> {}", w[0], w[49]);
    }
}

#[test]
fn transfer_then_regression_output_shape() {
    let cfg = ModelConfig::micro();
    let set = TrainingSet::<f32>::from_maps(&maps(&cfg, 2), &cfg).unwrap();
    let tc = TrainConfig { phase1_epochs: 1, phase2_epochs: 1, batch_size: 2, ..TrainConfig::default() };
    let mut model = SpmkdModel::<f32>::new(&cfg, 0).unwrap();
    let (ckpt, _) = train_phase1(&mut model, &set, &tc).unwrap();
    let mut fresh = SpmkdModel::<f32>::new(&cfg, 99).unwrap();
    transfer_weights(&ckpt, &mut fresh, 5).unwrap();
    assert_eq!(fresh.predict(&[&set.inputs[0]]).unwrap().shape(), &[1, 1, 16, 16]);
    let (_, res) = train_phase2(&mut fresh, &set, &tc).unwrap();
    assert_eq!(res.rows.len(), 1);
}

#[test]
fn transfer_into_a_different_architecture_lists_mismatches() {
    let cfg = ModelConfig::micro();
    let ckpt = spmkd_core::Checkpoint::from_store(&SpmkdModel::<f32>::new(&cfg, 0).unwrap().params, "classification", 1, 0);
    let mut other = cfg.clone();
    other.encoder.k = 3;
    let mut model = SpmkdModel::<f32>::new(&other, 0).unwrap();
    let before = model.params.clone();
    match transfer_weights(&ckpt, &mut model, 1) {
        Err(Error::Transfer { mismatched }) => {
            assert!(mismatched.iter().any(|m| m.starts_with("encoder.heatmap.weight")));
            assert!(mismatched.iter().any(|m| m.starts_with("decoder.stem")));
        }
        other => panic!("{other:?}"),
    }
    for ((_, a), (_, b)) in model.params.iter().zip(before.iter()) {
        assert!(a.value.bit_eq(&b.value));
    }
}

#[test]
fn crwt_off_uses_the_whole_budget_in_regression() {
    let cfg = ModelConfig::micro();
    let set = TrainingSet::<f32>::from_maps(&maps(&cfg, 2), &cfg).unwrap();
    let tc = TrainConfig { phase1_epochs: 2, phase2_epochs: 3, batch_size: 2, crwt: false, ..TrainConfig::default() };
    let run = run_crwt(&cfg, &set, &tc).unwrap();
    assert!(run.phase1.is_none());
    assert_eq!(run.phase2.rows.len(), 5);
    assert_eq!(run.model.head_mode(), HeadMode::Regression);
}

#[test]
fn divergence_is_reported() {
    let cfg = ModelConfig::micro();
    let set = TrainingSet::<f32>::from_maps(&maps(&cfg, 1), &cfg).unwrap();
    let tc = TrainConfig { phase2_epochs: 3, batch_size: 1, ..TrainConfig::default() };
    let mut model = regression_model(&cfg, 0);
    let err = fit_regression(&mut model, &set, &tc, 3, &mut |t, p, y| {
        let l = l2_loss_var(t, p, y)?;
        Ok(t.scale(l, f32::INFINITY))
    })
    .unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 1, .. }), "{err}");
}
