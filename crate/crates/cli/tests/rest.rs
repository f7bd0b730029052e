mod common;

use reqwest::StatusCode;
use serde_json::{json, Value};

use common::Server;
use ovinet_cli::api::ErrorBody;
use ovinet_core::device::DeviceConfig;
use ovinet_core::platform::{default_rules, DeviceRecord, Platform, RiskCell, RpcRecord, RpcStatus, TimeSeriesPoint};
use ovinet_core::Scenario;

const DAY_S: f64 = 86_400.0;

fn poc_server(days: f64) -> (Server, Scenario) {
    let scn = Scenario::poc28();
    let s = Server::start(Some(&scn), &[]);
    s.advance(days * DAY_S);
    (s, scn)
}

fn error_of(resp: reqwest::blocking::Response) -> (StatusCode, ErrorBody) {
    let status = resp.status();
    (status, resp.json().expect("machine-readable error body"))
}

#[test]
fn series_and_device_queries_reflect_the_script() {
    let (s, scn) = poc_server(2.0);
    let dev = &scn.devices[0];
    let id = &dev.config.device_id;

    let list: Vec<DeviceRecord> = s.http.get(s.url("/devices")).send().unwrap().json().unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(&list[0].info.device_id, id);

    let one: DeviceRecord = s.http.get(s.url(&format!("/devices/{id}"))).send().unwrap().json().unwrap();
    assert_eq!(one, list[0]);

    let from = scn.start.to_rfc3339();
    let to = (scn.start + chrono::Duration::days(2)).to_rfc3339();
    let pts: Vec<TimeSeriesPoint> = s
        .http
        .get(s.url(&format!("/devices/{id}/series")))
        .query(&[("key", "egg_count"), ("from", &from), ("to", &to)])
        .send()
        .unwrap()
        .json()
        .unwrap();
    let per_day = (24 / dev.config.reading_period_h) as usize;
    let expected: Vec<f64> = dev.counts[..2]
        .iter()
        .flat_map(|c| std::iter::repeat_n(*c as f64, per_day))
        .collect();
    let got: Vec<f64> = pts.iter().map(|p| p.value.as_f64().unwrap()).collect();
    assert_eq!(got, expected);

    let direct = s.sim.lock().unwrap().platform().query_series(id, "egg_count".parse().unwrap(), scn.start, scn.start + chrono::Duration::days(2)).unwrap();
    assert_eq!(pts, direct);
}

#[test]
fn errors_carry_status_and_body() {
    let (s, scn) = poc_server(0.5);
    let id = &scn.devices[0].config.device_id;

    let (st, body) = error_of(s.http.get(s.url("/devices/nope")).send().unwrap());
    assert_eq!((st, body.error.as_str()), (StatusCode::NOT_FOUND, "not_found"));

    let (st, body) = error_of(
        s.http
            .get(s.url(&format!("/devices/{id}/series")))
            .query(&[("from", "2023-03-02T00:00:00Z"), ("to", "2023-03-01T00:00:00Z")])
            .send()
            .unwrap(),
    );
    assert_eq!((st, body.error.as_str()), (StatusCode::BAD_REQUEST, "bad_request"));

    let (st, _) = error_of(s.http.get(s.url(&format!("/devices/{id}/series?key=weight"))).send().unwrap());
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let (st, _) = error_of(s.http.get(s.url("/riskmap?grid=0")).send().unwrap());
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let (st, _) = error_of(s.http.get(s.url("/rpc/rpc-999")).send().unwrap());
    assert_eq!(st, StatusCode::NOT_FOUND);

    let (st, _) = error_of(
        s.http
            .post(s.url("/devices/nope/rpc"))
            .json(&json!({"kind": "read_on_demand"}))
            .send()
            .unwrap(),
    );
    assert_eq!(st, StatusCode::NOT_FOUND);

    let (st, _) = error_of(
        s.http
            .post(s.url(&format!("/devices/{id}/rpc")))
            .json(&json!({"kind": "self_destruct"}))
            .send()
            .unwrap(),
    );
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[test]
fn registration_statuses() {
    let s = Server::start(None, &[]);
    let cfg = DeviceConfig::example_wifi("trap-x");
    let r = s.http.post(s.url("/devices")).json(&cfg).send().unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    let r = s.http.post(s.url("/devices")).json(&cfg).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);

    let mut moved = cfg.clone();
    moved.site.address = "elsewhere".into();
    let (st, body) = error_of(s.http.post(s.url("/devices")).json(&moved).send().unwrap());
    assert_eq!((st, body.error.as_str()), (StatusCode::CONFLICT, "conflict"));

    let mut bad = cfg.clone();
    bad.device_id = String::new();
    let (st, body) = error_of(s.http.post(s.url("/devices")).json(&bad).send().unwrap());
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(body.fields.iter().any(|f| f.field == "device_id"), "{body:?}");

    let (st, _) = error_of(
        s.http
            .post(s.url("/devices"))
            .header("content-type", "application/json")
            .body("{")
            .send()
            .unwrap(),
    );
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[test]
fn rpc_status_is_queryable_until_answered() {
    let (s, scn) = poc_server(2.0);
    let id = &scn.devices[0].config.device_id;
    let r = s
        .http
        .post(s.url(&format!("/devices/{id}/rpc")))
        .json(&json!({"kind": "read_on_demand"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::ACCEPTED);
    let rec: RpcRecord = r.json().unwrap();
    assert_eq!(rec.status, RpcStatus::Pending);

    s.advance(30.0);
    let done: RpcRecord = s
        .http
        .get(s.url(&format!("/rpc/{}", rec.request_id)))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(done.status, RpcStatus::Answered);
    // Day three has begun, so the trap holds day three's eggs.
    assert_eq!(done.egg_count(), Some(scn.devices[0].counts[2]));
}

#[test]
fn alarms_and_riskmap() {
    let (s, scn) = poc_server(2.0);
    let alarms: Vec<Value> = s.http.get(s.url("/alarms")).send().unwrap().json().unwrap();
    assert_eq!(alarms.len(), s.sim.lock().unwrap().platform().alarms().len());

    let cells: Vec<RiskCell> = s.http.get(s.url("/riskmap?grid=1000")).send().unwrap().json().unwrap();
    assert_eq!(cells.len(), 1);
    let c = &cells[0];
    assert_eq!(c.trap_count, 1);
    // Daily maxima of the two elapsed days, summed over the only trap.
    let expected = (scn.devices[0].counts[0] + scn.devices[0].counts[1]) as f64;
    assert_eq!(c.eggs_per_trap, expected);
    assert_eq!(c.positive_trap_fraction, 1.0);
}

#[test]
fn export_replays_to_the_same_store() {
    let (s, _) = poc_server(3.0);
    let r = s.http.get(s.url("/export")).send().unwrap();
    assert_eq!(r.headers()["content-type"], "application/x-ndjson");
    let text = r.text().unwrap();
    assert_eq!(text, s.sim.lock().unwrap().platform().export_jsonl());
    for line in text.lines() {
        serde_json::from_str::<Value>(line).expect("each line is a JSON record");
    }
    let again = Platform::replay(&text, default_rules()).unwrap();
    assert_eq!(again.export_jsonl(), text);
}

#[test]
fn clock_follows_advance() {
    let s = Server::start(None, &[]);
    let t0: Value = s.http.get(s.url("/sim/clock")).send().unwrap().json().unwrap();
    s.advance(90.0);
    let t1: Value = s.http.get(s.url("/sim/clock")).send().unwrap().json().unwrap();
    let parse = |v: &Value| chrono::DateTime::parse_from_rfc3339(v["now"].as_str().unwrap()).unwrap();
    assert_eq!((parse(&t1) - parse(&t0)).num_seconds(), 90);
    let r = s.http.post(s.url("/sim/advance?seconds=-1")).send().unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
}
