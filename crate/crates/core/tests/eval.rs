use brainalign::eval::*;
use brainalign::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn unit_box() -> impl Strategy<Value = BoundingBox> {
    (0.0f64..0.9, 0.0f64..0.9, 0.01f64..0.1, 0.01f64..0.1).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h))
}

fn labeled(labels: Vec<String>) -> impl Strategy<Value = (Vec<LabeledBox>, Vec<LabeledBox>)> {
    let n = labels.len();
    prop::collection::vec((0..n, 0..n, unit_box(), unit_box()), 1..40).prop_map(move |rows| {
        rows.into_iter()
            .map(|(lp, lg, bp, bg)| {
                (
                    LabeledBox {
                        label: labels[lp].clone(),
                        bbox: bp,
                    },
                    LabeledBox {
                        label: labels[lg].clone(),
                        bbox: bg,
                    },
                )
            })
            .unzip()
    })
}

fn all_labels() -> Vec<String> {
    SalienceTaxonomy::default()
        .classes()
        .map(|(l, _)| l.to_string())
        .collect()
}

fn embeddings(seed: u64, n: usize, d: usize, noise: f64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = new_rng(seed);
    let image = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
    let brain = image.mapv(|v| v + noise * rng.random_range(-1.0..1.0));
    (brain, image)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accuracy_falls_with_threshold((preds, gts) in labeled(all_labels())) {
        let report = grounding_accuracy(&preds, &gts, &SalienceTaxonomy::default(), &[0.1, 0.3, 0.5, 0.7, 0.9]).unwrap();
        for cat in Category::ALL {
            let acc = &report.get(cat).accuracy;
            prop_assert!(acc.windows(2).all(|w| w[1] <= w[0]), "{cat}: {acc:?}");
        }
    }

    #[test]
    fn category_counts_add_up((preds, gts) in labeled(all_labels())) {
        let report = grounding_accuracy(&preds, &gts, &SalienceTaxonomy::default(), &DEFAULT_THRESHOLDS).unwrap();
        let c = |k| report.get(k).count;
        prop_assert_eq!(c(Category::A), gts.len());
        prop_assert_eq!(c(Category::A), c(Category::S) + c(Category::I));
        prop_assert_eq!(c(Category::S), c(Category::SC) + c(Category::SO));
    }

    #[test]
    fn scaling_leaves_retrieval_unchanged(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let (brain, image) = embeddings(seed, 40, 6, 0.8);
        let a = retrieval_report(brain.view(), image.view(), 10, 2, seed).unwrap();
        let b = retrieval_report((&brain * scale).view(), image.view(), 10, 2, seed).unwrap();
        prop_assert_eq!(a.forward_acc, b.forward_acc);
        prop_assert_eq!(a.backward_acc, b.backward_acc);
        prop_assert_eq!(a.exemplar_acc, b.exemplar_acc);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in unit_box(), b in unit_box()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_and_rouge_stay_in_unit_range(cand in "[a-c ]{0,20}", reference in "[a-c ]{1,20}") {
        for k in 1..=4 {
            let b = bleu_k(&cand, std::slice::from_ref(&reference), k).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }
        prop_assert!((0.0..=1.0 + 1e-12).contains(&rouge_l(&cand, &reference)));
    }
}

#[test]
fn trained_free_embeddings_sit_between_chance_and_one() {
    let (brain, image) = embeddings(7, 300, 16, 1.0);
    let report = retrieval_report(brain.view(), image.view(), DEFAULT_POOL, 5, 1).unwrap();
    assert!(report.forward_acc > 1.0 / 300.0 && report.forward_acc < 1.0);
    assert_eq!(report.pool_size, 300);
    assert_eq!(report.count, 300);
}

#[test]
fn caption_report_mixes_native_and_unavailable() {
    let cands = vec!["a dog runs on grass".to_string()];
    let refs = vec![vec!["a dog runs on the grass".to_string()]];
    let metrics: Vec<String> = ["bleu1", "rouge_l", "cider"].iter().map(|s| s.to_string()).collect();
    let report = caption_report(&cands, &refs, &metrics, &ScorerRegistry::default()).unwrap();
    assert!(matches!(report.metrics["bleu1"], MetricValue::Value(v) if v > 0.7));
    assert!(matches!(report.metrics["cider"], MetricValue::Unavailable(_)));
}
