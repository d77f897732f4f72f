use flmlab_wasm::{dependency_matrix, query_keys, rate_sweep};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn ar_matrix_is_lower_triangular() {
    let v = parse(&dependency_matrix("ar", 3, 0.0, 0));
    let bits: Vec<u64> = v["bits"].as_array().unwrap().iter().map(|b| b.as_u64().unwrap()).collect();
    assert_eq!(bits, [0, 0, 0, 1, 0, 0, 1, 1, 0]);
    assert_eq!(v["r_pred"], 1.0);
}

#[test]
fn flm_spans_match_bits() {
    let v = parse(&dependency_matrix("flm", 8, 0.4, 3));
    let spans = v["spans"].as_array().unwrap();
    assert_eq!(spans.len(), 8);
    for (k, s) in spans.iter().enumerate() {
        let (s0, e0) = (s[0].as_u64().unwrap() as usize, s[1].as_u64().unwrap() as usize);
        for j in 1..=8 {
            let bit = v["bits"][k * 8 + j - 1].as_u64().unwrap();
            assert_eq!(bit == 1, j < s0 || j > e0);
        }
    }
    assert_eq!(v["r_pred"], 1.0);
}

#[test]
fn same_seed_same_matrix() {
    assert_eq!(dependency_matrix("mlm", 10, 0.4, 5), dependency_matrix("mlm", 10, 0.4, 5));
}

#[test]
fn errors_are_reported_as_json() {
    assert!(parse(&dependency_matrix("xlnet", 4, 0.1, 0))["error"].is_string());
    assert!(parse(&query_keys(5, 3, 4, 4))["error"].is_string());
}

#[test]
fn key_sets_split_by_side() {
    let v = parse(&query_keys(5, 3, 2, 4));
    assert_eq!(v["l2r"], serde_json::json!([1]));
    assert_eq!(v["r2l"], serde_json::json!([5]));
}

#[test]
fn sweep_keeps_flm_prediction_rate_at_one() {
    let v = parse(&rate_sweep(12, 20, 0));
    let pts = v.as_array().unwrap();
    assert_eq!(pts.len(), 28);
    for p in pts.iter().filter(|p| p["kind"] == "flm") {
        assert_eq!(p["r_pred"], 1.0);
    }
    for p in pts.iter().filter(|p| p["kind"] == "mlm") {
        assert!((p["r_pred"].as_f64().unwrap() - p["mean_r_corr"].as_f64().unwrap()).abs() < 1e-12);
    }
}
