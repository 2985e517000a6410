mod common;

use gradistill::data::checkpoint::encode_checkpoint;
use gradistill::data::igcache::{read_ig_cache, IgCache};
use gradistill::data::Dataset;
use gradistill::harness::grid::{rank_cells, render_grid_csv};
use gradistill::harness::{
    grid_search, run_ablation, train, GridSearchSpace, Mode, TrainConfig, TrainInputs,
};
use gradistill::ig::{precompute_dataset, IGConfig};
use gradistill::models::{Architecture, Model};

struct Fixture {
    train: Dataset,
    val: Dataset,
    teacher: Model,
    cache: IgCache,
    _dir: tempfile::TempDir,
}

fn fixture(n: usize) -> Fixture {
    let train_set = common::synthetic_dataset(n, 2, 21);
    let val = common::synthetic_dataset(60, 2, 22);
    let teacher_cfg = TrainConfig {
        mode: Mode::Baseline,
        architecture: Architecture::MicroTeacher,
        epochs: 1,
        batch_size: 32,
        seed: 1,
        ..TrainConfig::default()
    };
    let teacher = train(&teacher_cfg, &TrainInputs::new(&train_set))
        .unwrap()
        .model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ig.gdig");
    precompute_dataset(
        &teacher,
        &train_set,
        &IGConfig::with_steps(8),
        &path,
        2,
        false,
    )
    .unwrap();
    Fixture {
        train: train_set,
        val,
        teacher,
        cache: read_ig_cache(&path).unwrap(),
        _dir: dir,
    }
}

fn student_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        architecture: Architecture::MicroStudent,
        epochs: 2,
        batch_size: 32,
        seed: 7,
        ..TrainConfig::default()
    }
}

impl Fixture {
    fn inputs(&self) -> TrainInputs<'_> {
        TrainInputs {
            teacher: Some(&self.teacher),
            attributions: Some(&self.cache),
            ..TrainInputs::new(&self.train)
        }
    }
}

#[test]
fn degenerate_modes_collapse_to_baseline() {
    let f = fixture(400);
    let baseline = train(&student_config(Mode::Baseline), &f.inputs())
        .unwrap()
        .model;
    let expected = encode_checkpoint(&baseline).unwrap();
    let cases = [
        (Mode::Kd, 0.0, 0.1),
        (Mode::Ig, 0.01, 0.0),
        (Mode::KdIg, 0.0, 0.0),
    ];
    for (mode, alpha, p) in cases {
        let config = TrainConfig {
            alpha,
            overlay_p: p,
            ..student_config(mode)
        };
        let model = train(&config, &f.inputs()).unwrap().model;
        assert!(
            encode_checkpoint(&model).unwrap() == expected,
            "{mode} alpha={alpha} p={p}"
        );
    }
}

#[test]
fn live_modes_diverge_from_baseline() {
    let f = fixture(200);
    let baseline = train(&student_config(Mode::Baseline), &f.inputs())
        .unwrap()
        .model;
    for (mode, alpha, p) in [(Mode::Kd, 0.5, 0.0), (Mode::Ig, 0.0, 0.5)] {
        let config = TrainConfig {
            alpha,
            overlay_p: p,
            ..student_config(mode)
        };
        let model = train(&config, &f.inputs()).unwrap().model;
        assert_ne!(model, baseline, "{mode}");
    }
}

#[test]
fn training_loss_decreases() {
    let data = common::synthetic_dataset(400, 2, 31);
    for seed in 0..3 {
        let config = TrainConfig {
            epochs: 3,
            seed,
            ..student_config(Mode::Baseline)
        };
        let report = train(&config, &TrainInputs::new(&data)).unwrap().report;
        let losses: Vec<f64> = report.epochs.iter().map(|e| e.loss_total).collect();
        assert!(
            losses.windows(2).all(|w| w[1] < w[0]),
            "seed {seed}: {losses:?}"
        );
    }
}

#[test]
fn single_cell_grid_matches_direct_training() {
    let f = fixture(96);
    let base = TrainConfig {
        alpha: 0.3,
        temperature: 2.0,
        overlay_p: 0.2,
        ..student_config(Mode::KdIg)
    };
    let inputs = TrainInputs {
        validation: Some(&f.val),
        ..f.inputs()
    };
    let space = GridSearchSpace::parse("", &base, base.epochs).unwrap();
    let cells = grid_search(&space, &base, &inputs, None).unwrap();
    let direct = train(&base, &inputs).unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(Some(cells[0].val_acc), direct.validation_accuracy);
    assert_eq!(
        cells[0].final_loss,
        direct.report.epochs.last().unwrap().loss_total
    );
}

#[test]
fn full_grid_has_27_rows_in_rank_order() {
    let f = fixture(64);
    let base = TrainConfig {
        epochs: 1,
        ..student_config(Mode::KdIg)
    };
    let inputs = TrainInputs {
        validation: Some(&f.val),
        ..f.inputs()
    };
    let space = GridSearchSpace::parse("T=1,2.5,5;alpha=0,0.01,0.5;p=0,0.1,0.5", &base, 1).unwrap();
    let cells = grid_search(&space, &base, &inputs, None).unwrap();
    assert_eq!(cells.len(), 27);
    let mut reranked = cells.clone();
    rank_cells(&mut reranked);
    assert_eq!(render_grid_csv(&reranked), render_grid_csv(&cells));
    assert!(cells.windows(2).all(|w| w[0].val_acc >= w[1].val_acc));
}

#[test]
fn ablation_without_distillation_or_overlay_is_flat() {
    let f = fixture(96);
    let base = TrainConfig {
        alpha: 0.0,
        overlay_p: 0.0,
        ..student_config(Mode::Baseline)
    };
    let inputs = TrainInputs {
        test: Some(&f.val),
        ..f.inputs()
    };
    let report = run_ablation(&base, &inputs).unwrap();
    let base_acc = report.accuracy(Mode::Baseline).unwrap();
    for mode in Mode::ALL {
        assert_eq!(report.accuracy(mode), Some(base_acc), "{mode}");
        assert_eq!(report.delta_pp(mode), Some(0.0));
    }
}

#[test]
fn distill_modes_ignore_a_missing_cache_only_when_not_overlaying() {
    let f = fixture(32);
    let inputs = TrainInputs {
        teacher: Some(&f.teacher),
        ..TrainInputs::new(&f.train)
    };
    let config = TrainConfig {
        epochs: 1,
        ..student_config(Mode::Kd)
    };
    assert!(train(&config, &inputs).is_ok());
    let overlaying = TrainConfig {
        epochs: 1,
        ..student_config(Mode::KdIg)
    };
    assert!(train(&overlaying, &inputs).is_err());
}
