mod common;

use common::{small_dataset, small_synth, tiny_train};
use stzero::data::{synth_dataset, Checkpoint, SynthConfig};
use stzero::embedder::Split;
use stzero::model::Model;
use stzero::train::{
    build_graphs, dataset_dims, evaluate_split, predict_columns, resume, train, SplitSelection,
    TrainConfig, TrainState,
};
use stzero::Error;

#[test]
fn zero_epochs_returns_the_initialization() {
    let ds = small_dataset();
    let cfg = tiny_train(0);
    let (state, log) = train(&ds, &cfg).unwrap();
    assert!(log.is_empty());
    assert_eq!(state.model, Model::init(&cfg, dataset_dims(&ds)).unwrap());
    let fresh = TrainState::new(&cfg, dataset_dims(&ds)).unwrap();
    assert_eq!(
        Checkpoint::from_state(&state).to_bytes(),
        Checkpoint::from_state(&fresh).to_bytes()
    );
}

#[test]
fn same_seed_gives_identical_checkpoints_and_reports() {
    let ds = small_dataset();
    let run = || {
        let (state, log) = train(&ds, &tiny_train(3)).unwrap();
        let report = evaluate_split(
            &state.model,
            &ds,
            state.config.graph(),
            SplitSelection::Unseen,
        )
        .unwrap();
        (
            Checkpoint::from_state(&state).to_bytes(),
            serde_json::to_string(&log).unwrap(),
            serde_json::to_string(&report).unwrap(),
        )
    };
    assert_eq!(run(), run());
    let (other, _) = train(
        &ds,
        &TrainConfig {
            seed: 6,
            ..tiny_train(3)
        },
    )
    .unwrap();
    assert_ne!(Checkpoint::from_state(&other).to_bytes(), run().0);
}

#[test]
fn unseen_columns_are_never_read() {
    let ds = small_dataset();
    let mut poisoned = ds.clone();
    let unseen = ds.split_indices(Split::Unseen);
    for s in &mut poisoned.slides {
        for w in 0..s.n() {
            for &c in &unseen {
                s.expression.set(w, c, f64::NAN);
            }
        }
    }
    let (a, log_a) = train(&ds, &tiny_train(3)).unwrap();
    let (b, log_b) = train(&poisoned, &tiny_train(3)).unwrap();
    assert_eq!(
        Checkpoint::from_state(&a).to_bytes(),
        Checkpoint::from_state(&b).to_bytes()
    );
    assert_eq!(log_a, log_b);
}

#[test]
fn non_finite_seen_target_names_the_step() {
    let mut ds = small_dataset();
    for s in &mut ds.slides {
        s.expression.set(0, 0, f64::NAN);
    }
    let cfg = TrainConfig {
        genes_per_step: 6,
        ..tiny_train(2)
    };
    match train(&ds, &cfg) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("epoch 0, step 0"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn loss_decreases_over_first_epochs_on_noiseless_data() {
    let ds = synth_dataset(&SynthConfig {
        noise_sigma: 0.0,
        ..small_synth()
    })
    .unwrap()
    .dataset;
    let (_, log) = train(
        &ds,
        &TrainConfig {
            genes_per_step: 6,
            ..tiny_train(5)
        },
    )
    .unwrap();
    let losses: Vec<f64> = log.iter().map(|e| e.mean_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn zero_head_is_the_null_model() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        zero_head: true,
        ..tiny_train(0)
    };
    let model = Model::init(&cfg, dataset_dims(&ds)).unwrap();
    for split in [SplitSelection::Seen, SplitSelection::Unseen] {
        let rep = evaluate_split(&model, &ds, cfg.graph(), split).unwrap();
        assert_eq!(rep.pcc_m, Some(0.0));
    }
}

#[test]
fn seen_and_all_agree_when_every_gene_is_seen() {
    let mut ds = small_dataset();
    for g in &mut ds.genes {
        g.split = Split::Seen;
    }
    let (state, _) = train(&ds, &tiny_train(1)).unwrap();
    let seen = evaluate_split(
        &state.model,
        &ds,
        state.config.graph(),
        SplitSelection::Seen,
    )
    .unwrap();
    let all = evaluate_split(&state.model, &ds, state.config.graph(), SplitSelection::All).unwrap();
    assert_eq!(
        serde_json::to_string(&seen).unwrap(),
        serde_json::to_string(&all).unwrap()
    );
    assert!(matches!(
        evaluate_split(
            &state.model,
            &ds,
            state.config.graph(),
            SplitSelection::Unseen
        ),
        Err(Error::Config(_))
    ));
}

#[test]
fn single_gene_prediction_equals_batched_prediction_bitwise() {
    let ds = small_dataset();
    let (state, _) = train(&ds, &tiny_train(2)).unwrap();
    let graphs = build_graphs(&ds, state.config.graph()).unwrap();
    let all: Vec<usize> = (0..ds.n_genes()).collect();
    let batched = predict_columns(&state.model, &ds, &graphs, &all).unwrap();
    for c in all {
        let single = predict_columns(&state.model, &ds, &graphs, &[c]).unwrap();
        for (b, s) in batched.iter().zip(&single) {
            assert_eq!(b.column(c), s.column(0));
        }
    }
}

#[test]
fn resume_continues_from_saved_state() {
    let ds = small_dataset();
    let (state, _) = train(&ds, &tiny_train(2)).unwrap();
    let mut back = Checkpoint::from_bytes(&Checkpoint::from_state(&state).to_bytes())
        .unwrap()
        .to_state()
        .unwrap();
    assert_eq!(back.epochs_done, 2);
    assert_eq!(back.optimizer.step, 2 * ds.slides.len() as u64);
    back.config.epochs = 4;
    let log = resume(&ds, &mut back, |_| {}).unwrap();
    assert_eq!(log.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![2, 3]);
    assert_eq!(back.epochs_done, 4);
}

#[test]
fn mismatched_dims_and_bad_configs_are_config_errors() {
    let ds = small_dataset();
    let (state, _) = train(&ds, &tiny_train(0)).unwrap();
    let other = synth_dataset(&SynthConfig {
        d_e: 9,
        ..small_synth()
    })
    .unwrap()
    .dataset;
    assert!(matches!(
        evaluate_split(
            &state.model,
            &other,
            state.config.graph(),
            SplitSelection::All
        ),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        train(
            &ds,
            &TrainConfig {
                heads: 3,
                ..tiny_train(1)
            }
        ),
        Err(Error::Config(_))
    ));
    let mut none_seen = ds.clone();
    for g in &mut none_seen.genes {
        g.split = Split::Unseen;
    }
    assert!(matches!(
        train(&none_seen, &tiny_train(1)),
        Err(Error::Config(_))
    ));
}
