use projbnn_py::{generate, pipeline};

#[test]
fn sine_labels_follow_tasks() {
    let doc: serde_json::Value = serde_json::from_str(&generate("sine", 1, 3, 4).unwrap()).unwrap();
    assert_eq!(doc["x"].as_array().unwrap().len(), 12);
    let labels: Vec<u64> = doc["labels"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(labels, [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
}

#[test]
fn toy_rbf_has_no_labels() {
    let doc: serde_json::Value = serde_json::from_str(&generate("toy-rbf", 0, 0, 0).unwrap()).unwrap();
    assert!(doc["labels"].is_null());
    assert_eq!(generate("toy-rbf", 0, 0, 0).unwrap(), generate("toy-rbf", 0, 0, 0).unwrap());
}

#[test]
fn unknown_kind_is_rejected() {
    assert!(matches!(generate("spiral", 0, 1, 1), Err(projbnn::Error::InvalidArgument(_))));
}

#[test]
fn bad_config_and_method_are_config_errors() {
    assert!(pipeline(Some("{\"fge\": {\"snapshot\": 3}}"), None, None, None, None).is_err());
    assert!(pipeline(None, None, Some(-1.0), None, None).is_err());
    assert!(pipeline(None, None, Some(0.01), Some("nope"), None).is_err());
}

#[test]
fn bbb_run_returns_metrics() {
    let m: serde_json::Value =
        serde_json::from_str(&pipeline(None, Some(2), Some(0.01), Some("bbb"), None).unwrap()).unwrap();
    assert_eq!(m["method"], "bbb");
    assert!(m["test_rmse"].as_f64().unwrap().is_finite());
}
