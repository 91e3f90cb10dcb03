use densefocus::experiments::cdf::{loss_cdf, Polarity};
use densefocus::experiments::metrics::{average_precision, classification_metrics};
use densefocus::experiments::sweep::{sweep, Setting, SweepConfig, TrainingDefaults};
use densefocus::experiments::synth::{
    gen_classification, gen_toy_detection, SyntheticTaskConfig, TaskMode,
};
use densefocus::loss::LossConfig;
use densefocus::model::Architecture;
use proptest::prelude::*;

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![-5.0..5.0f64, Just(0.0)], n),
            prop::collection::vec(any::<bool>(), n)
                .prop_filter("needs a positive", |l| l.iter().any(|x| *x)),
        )
    })
}

proptest! {
    #[test]
    fn ap_is_bounded_and_rank_invariant((scores, labels) in scored_labels()) {
        let ap = average_precision(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        let squashed: Vec<f64> = scores.iter().map(|s| 3.0 * s.tanh() + 1.0).collect();
        prop_assert!((average_precision(&squashed, &labels).unwrap() - ap).abs() < 1e-12);
        let prevalence = labels.iter().filter(|l| **l).count() as f64 / labels.len() as f64;
        let flat = vec![0.5; labels.len()];
        prop_assert!((average_precision(&flat, &labels).unwrap() - prevalence).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_gives_unit_ap((scores, labels) in scored_labels()) {
        let ideal: Vec<f64> = labels.iter().zip(&scores).map(|(l, s)| if *l { 10.0 + s } else { s - 10.0 }).collect();
        prop_assert_eq!(average_precision(&ideal, &labels).unwrap(), 1.0);
        let m = classification_metrics(&ideal, &labels, 0.0).unwrap();
        prop_assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn cdf_curves_are_normalised((scores, labels) in scored_labels()) {
        prop_assume!(labels.iter().any(|l| !*l));
        let curves = loss_cdf(&scores, &labels, &[0.0, 1.0, 2.0]).unwrap();
        prop_assert_eq!(curves.len(), 6);
        for c in &curves {
            prop_assert!((c.cumulative.last().unwrap() - 1.0).abs() < 1e-12);
            prop_assert!(c.losses.windows(2).all(|w| w[0] <= w[1]));
            let top = c.concentration(0.1);
            prop_assert!((0.1 - 1e-12..=1.0 + 1e-12).contains(&top));
        }
        prop_assert!(curves[..3].iter().all(|c| c.polarity == Polarity::Positive));
    }
}

#[test]
fn concentration_grows_with_gamma_on_spread_logits() {
    let logits: Vec<f64> = (0..1000).map(|i| -8.0 + 8.0 * (i as f64 / 999.0)).collect();
    let mut labels = vec![false; 1000];
    labels[0] = true;
    let curves = loss_cdf(&logits, &labels, &[0.0, 0.5, 1.0, 2.0]).unwrap();
    let neg: Vec<f64> = curves
        .iter()
        .filter(|c| c.polarity == Polarity::Negative)
        .map(|c| c.concentration(0.1))
        .collect();
    assert!(neg.windows(2).all(|w| w[0] < w[1]), "{neg:?}");
}

#[test]
fn balanced_separable_task_is_learnable() {
    let task = SyntheticTaskConfig {
        imbalance_ratio: 1.0,
        num_positives: 300,
        overlap_hardness: 0.0,
        seed: 2,
        ..Default::default()
    };
    let training = TrainingDefaults {
        iterations: 300,
        architecture: Architecture::Linear,
        ..Default::default()
    };
    let settings = vec![
        Setting::new(LossConfig::ce()),
        Setting::new(LossConfig::focal(2.0, Some(0.25))),
    ];
    let report = sweep(&SweepConfig::new(task, training, settings, 1, 0), 1).unwrap();
    for c in &report.cells {
        assert!(c.mean.f1 > 0.95, "{}: {:?}", c.name, c.mean);
    }
}

#[test]
fn imbalanced_counts() {
    let set = gen_classification(&SyntheticTaskConfig {
        num_positives: 20,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(set.labels.len(), 20_020);
    assert_eq!(set.num_positives(), 20);
    assert_eq!(set.boxes.len(), 20_020);
}

#[test]
fn toy_detection_has_foreground_anchors() {
    let mut task = SyntheticTaskConfig {
        mode: TaskMode::ToyDetection,
        seed: 4,
        ..Default::default()
    };
    task.detection.num_images = 3;
    let set = gen_toy_detection(&task).unwrap();
    assert_eq!(set.images.len(), 3);
    for im in &set.images {
        assert!(!im.objects.is_empty());
        assert!(im.assignment.num_foreground() > 0);
        assert_eq!(im.features.rows, set.anchors.len());
    }
    let data = set.to_training_set();
    assert!(data.regression);
    assert_eq!(data.samples.len(), 3);
}
