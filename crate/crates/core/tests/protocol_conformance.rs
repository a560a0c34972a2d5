//! Replays tests/fixtures/protocol_conformance.jsonl against the reference
//! server loop. Set OCCAM_CONFORMANCE_SERVER to a command to also replay it
//! against an external stdio server (schema checks only).

use occam::embedding::BaselineEmbedder;
use occam::imaging::RleMask;
use occam::prompting::MockProvider;
use occam::protocol::{serve, StdioTransport, Transport};
use serde_json::Value;

fn cases() -> Vec<Value> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/protocol_conformance.jsonl");
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// `expected` is a structural subset of `actual`.
fn subset(expected: &Value, actual: &Value) -> bool {
    match (expected, actual) {
        (Value::Object(e), Value::Object(a)) => e
            .iter()
            .all(|(k, v)| a.get(k).is_some_and(|av| subset(v, av))),
        (Value::Array(e), Value::Array(a)) => {
            e.len() == a.len() && e.iter().zip(a).all(|(x, y)| subset(x, y))
        }
        _ => expected == actual,
    }
}

fn check_schema(case: &Value, resp: &Value, embed_dim: &mut Option<usize>) {
    let req = &case["request"];
    if case.get("error").and_then(Value::as_bool) == Some(true) {
        assert_eq!(resp["id"], req["id"], "{resp}");
        assert!(resp["error"].is_string(), "expected an error for {req}: {resp}");
        return;
    }
    assert!(resp.get("error").is_none(), "unexpected error for {req}: {resp}");
    match req["op"].as_str().unwrap() {
        "hello" => {
            let caps = &resp["caps"];
            for k in ["segment", "embed", "deterministic"] {
                assert!(caps[k].is_boolean(), "caps.{k}: {resp}");
            }
            *embed_dim = caps["embed_dim"].as_u64().map(|d| d as usize);
        }
        "segment" => {
            assert_eq!(resp["id"], req["id"]);
            let n_points = req["points"].as_array().unwrap().len();
            let masks = resp["masks"].as_array().expect("masks array");
            for m in masks {
                assert!((m["point_index"].as_u64().unwrap() as usize) < n_points);
                assert!(m["score"].as_f64().unwrap().is_finite());
                let rle: RleMask = serde_json::from_value(m["rle"].clone()).unwrap();
                rle.decode().unwrap();
            }
        }
        "embed" => {
            assert_eq!(resp["id"], req["id"]);
            let v = resp["vector"].as_array().expect("vector array");
            assert_eq!(Some(v.len()), *embed_dim);
            assert!(v.iter().all(|x| x.as_f64().is_some_and(f64::is_finite)));
        }
        op => panic!("fixture has unknown op {op}"),
    }
}

#[test]
fn reference_server_conforms() {
    let cases = cases();
    let input: String = cases
        .iter()
        .map(|c| format!("{}\n", c["request"]))
        .collect();
    let mut out = Vec::new();
    serve(
        input.as_bytes(),
        &mut out,
        Some(&MockProvider::default()),
        Some(&BaselineEmbedder::default()),
    )
    .unwrap();
    let responses: Vec<Value> = std::str::from_utf8(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(responses.len(), cases.len());
    let mut dim = None;
    for (case, resp) in cases.iter().zip(&responses) {
        check_schema(case, resp, &mut dim);
        assert!(subset(&case["expect"], resp), "expected {} got {resp}", case["expect"]);
    }
    assert_eq!(dim, Some(BaselineEmbedder::DIM));
}

#[test]
fn external_server_conforms() {
    let Ok(cmd) = std::env::var("OCCAM_CONFORMANCE_SERVER") else {
        return;
    };
    let transport = StdioTransport::spawn(&cmd).unwrap();
    let mut dim = None;
    for case in cases() {
        let req = &case["request"];
        let resp = transport.call(req["op"].as_str().unwrap(), req).unwrap();
        check_schema(&case, &resp, &mut dim);
    }
}
