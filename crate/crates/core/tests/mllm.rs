use brainalign::datahub::export_features;
use brainalign::mllm_bridge::*;
use brainalign::*;

#[test]
fn exported_features_bind_into_every_builtin_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feats.bin");
    export_features(&[FeatureGrid::zeros(2, 3)], &path).unwrap();
    let image = FeatureRef {
        path: path.display().to_string(),
        index: 0,
    };
    let fields = PromptFields {
        image: Some(image.clone()),
        expr: Some("the red car".into()),
        question: Some("what is on the table?".into()),
    };
    let registry = PromptRegistry::builtin();
    for task in Task::ALL {
        assert!(!registry.templates(task).is_empty(), "{task:?} has no templates");
        for template in registry.templates(task) {
            let prompt = render_prompt(template, &fields, DEFAULT_SYSTEM_MESSAGE).unwrap();
            assert!(prompt.starts_with(DEFAULT_SYSTEM_MESSAGE));
            assert!(prompt.contains(&image.to_string()));
            assert!(prompt.ends_with("assistant:"));
            assert!(!prompt.contains("<image>"));
        }
    }
}

#[test]
fn grounded_answer_feeds_grounding_metrics() {
    let answer = "a man [0.1,0.2,0.5,0.9] is riding a horse [0.3,0.4,0.95,1.0]";
    let spans = parse_grounded_response(answer);
    assert_eq!(spans.len(), 2);
    let preds: Vec<LabeledBox> = spans
        .iter()
        .zip(["person", "horse"])
        .map(|(s, label)| LabeledBox {
            label: label.into(),
            bbox: s.bbox,
        })
        .collect();
    let report = brainalign::eval::grounding_accuracy(
        &preds,
        &preds,
        &brainalign::eval::SalienceTaxonomy::default(),
        &brainalign::eval::DEFAULT_THRESHOLDS,
    )
    .unwrap();
    assert_eq!(report.get(brainalign::eval::Category::SC).count, 2);
    assert_eq!(report.get(brainalign::eval::Category::A).accuracy, vec![1.0; 3]);
}

#[test]
fn out_of_range_coordinates_are_clamped_with_a_warning() {
    let parsed = parse_grounded_detailed("a kite [0.2,-0.1,1.3,0.5]");
    assert_eq!(parsed.pairs.len(), 1);
    assert_eq!(parsed.pairs[0].bbox, BoundingBox::new(0.2, 0.0, 1.0, 0.5));
    assert!(!parsed.warnings.is_empty());
}
