use std::sync::Arc;

use annotate_server::api::{DocSummary, DocView, Proposal};
use annotate_server::{router, AnnotationRecord, Stats, Store};
use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use hgcn::corpus::{parse_dataset, parse_records, AnnotatedSentence, Provenance};
use hgcn::scope::{ExclusionPolicy, Lexicon, OpinionRule};
use hgcn::toy::{self, ToyOptions};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const EXAMPLE: &str = r#"{"tokens":["Great","food","but","the","service","was","dreadful","!"],"ptb":"(ROOT (S (NP (JJ Great) (NN food)) (CC but) (S (NP (DT the) (NN service)) (VP (VBD was) (ADJP (JJ dreadful)))) (. !)))","conllu":"1\tGreat\t_\tJJ\t_\t_\t2\tamod\t_\t_\n2\tfood\t_\tNN\t_\t_\t0\troot\t_\t_\n3\tbut\t_\tCC\t_\t_\t7\tcc\t_\t_\n4\tthe\t_\tDT\t_\t_\t5\tdet\t_\t_\n5\tservice\t_\tNN\t_\t_\t7\tnsubj\t_\t_\n6\twas\t_\tVBD\t_\t_\t7\tcop\t_\t_\n7\tdreadful\t_\tJJ\t_\t_\t2\tconj\t_\t_\n8\t!\t_\t.\t_\t_\t2\tpunct\t_\t_","targets":[{"span":[1,1],"polarity":"positive"},{"span":[4,4],"polarity":"negative"}]}"#;

fn app(dir: &std::path::Path, data: &[AnnotatedSentence]) -> (Router, Arc<Store>) {
    let store = Store::open(
        dir,
        data,
        Lexicon::new(toy::lexicon_words()),
        ExclusionPolicy::default(),
        OpinionRule::Nearest,
    )
    .unwrap();
    let store = Arc::new(store);
    (router(Arc::clone(&store), None), store)
}

fn example_app(dir: &std::path::Path) -> Router {
    app(dir, &parse_dataset(EXAMPLE).unwrap()).0
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value, Option<String>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let etag = resp
        .headers()
        .get(header::ETAG)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value, etag)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn tags(s: &str) -> Vec<String> {
    s.split(' ').map(String::from).collect()
}

#[tokio::test]
async fn pre_annotate_proposes_great_food() {
    let dir = tempfile::tempdir().unwrap();
    let app = example_app(dir.path());
    let (status, body, _) = call(&app, post("/api/docs/0/targets/0/pre-annotate", json!({}))).await;
    assert_eq!(status, StatusCode::OK);
    let p: Proposal = serde_json::from_value(body).unwrap();
    assert_eq!(p.bio, tags("B I O O O O O O"));
    assert_eq!(p.provenance, Provenance::Auto);
    assert_eq!(p.opinion_spans, vec![[0, 0]]);
}

#[tokio::test]
async fn pre_annotate_does_not_persist() {
    let dir = tempfile::tempdir().unwrap();
    let app = example_app(dir.path());
    call(&app, post("/api/docs/0/targets/0/scope", json!({"bio": tags("B I I I I I I O")}))).await;
    let (_, before, _) = call(&app, get("/api/docs/0")).await;
    call(&app, post("/api/docs/0/targets/0/pre-annotate", json!({}))).await;
    let (_, after, _) = call(&app, get("/api/docs/0")).await;
    assert_eq!(before, after);
}

#[tokio::test]
async fn orphan_inside_is_unprocessable() {
    let dir = tempfile::tempdir().unwrap();
    let app = example_app(dir.path());
    let (status, body, _) = call(&app, post("/api/docs/0/targets/0/scope", json!({"bio": tags("I I O O O O O O")}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("I without preceding B"), "{body}");
}

#[tokio::test]
async fn unknown_ids_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let app = example_app(dir.path());
    assert_eq!(call(&app, get("/api/docs/9")).await.0, StatusCode::NOT_FOUND);
    let (status, _, _) = call(&app, post("/api/docs/0/targets/5/scope", json!({"bio": tags("B I O O O O O O")}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = call(&app, post("/api/docs/3/targets/0/pre-annotate", json!({}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn save_then_get_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let app = example_app(dir.path());
    let bio = tags("O O O O B I I O");
    let (status, body, etag) = call(&app, post("/api/docs/0/targets/1/scope", json!({"bio": bio}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(etag.as_deref(), Some("\"1\""));
    let saved: AnnotationRecord = serde_json::from_value(body).unwrap();
    assert_eq!(saved.provenance, Provenance::Human);

    let (_, doc, _) = call(&app, get("/api/docs/0")).await;
    let doc: DocView = serde_json::from_value(doc).unwrap();
    assert_eq!(doc.targets[1].annotation, saved);
    assert_eq!(doc.targets[1].annotation.bio, bio);
    assert_eq!(doc.targets[1].text, "service");
    assert_eq!(doc.tokens.len(), 8);
}

#[tokio::test]
async fn stale_if_match_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let app = example_app(dir.path());
    let first = Request::post("/api/docs/0/targets/0/scope")
        .header(header::CONTENT_TYPE, "application/json")
        .header(header::IF_MATCH, "\"0\"")
        .body(Body::from(json!({"bio": tags("B I I O O O O O")}).to_string()))
        .unwrap();
    assert_eq!(call(&app, first).await.0, StatusCode::OK);
    // A second annotator still holding version 0.
    let second = Request::post("/api/docs/0/targets/0/scope")
        .header(header::CONTENT_TYPE, "application/json")
        .header(header::IF_MATCH, "\"0\"")
        .body(Body::from(json!({"bio": tags("B I O O O O O O")}).to_string()))
        .unwrap();
    let (status, body, _) = call(&app, second).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(body["error"].as_str().unwrap().contains("version"));
    let (status, _, _) = call(&app, post("/api/docs/0/targets/0/scope", json!({"bio": tags("B I O O O O O O"), "version": 0}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn listing_reports_completion() {
    let dir = tempfile::tempdir().unwrap();
    let app = example_app(dir.path());
    for k in 0..2 {
        let (_, docs, _) = call(&app, get("/api/docs")).await;
        let docs: Vec<DocSummary> = serde_json::from_value(docs).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].human, k);
        assert!(!docs[0].complete);
        let bio = if k == 0 { "B I O O O O O O" } else { "O O O B I I I O" };
        call(&app, post(&format!("/api/docs/0/targets/{k}/scope"), json!({"bio": tags(bio)}))).await;
    }
    let (_, docs, _) = call(&app, get("/api/docs")).await;
    assert_eq!(docs[0]["complete"], json!(true));
}

#[tokio::test]
async fn injected_crash_keeps_previous_record() {
    let dir = tempfile::tempdir().unwrap();
    let (app, store) = app(dir.path(), &parse_dataset(EXAMPLE).unwrap());
    let (_, before, _) = call(&app, get("/api/docs/0")).await;
    store.set_write_hook(Some(Arc::new(|_| Err(std::io::Error::other("power loss")))));
    let (status, _, _) = call(&app, post("/api/docs/0/targets/0/scope", json!({"bio": tags("B I I O O O O O")}))).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    store.set_write_hook(None);
    let (_, after, _) = call(&app, get("/api/docs/0")).await;
    assert_eq!(before, after);
}

#[tokio::test]
async fn gets_have_no_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let app = example_app(dir.path());
    let snapshot = || {
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
            .collect();
        files.sort();
        files
    };
    let before = snapshot();
    for uri in ["/api/docs", "/api/docs/0", "/api/export", "/api/stats"] {
        assert_eq!(call(&app, get(uri)).await.0, StatusCode::OK);
    }
    assert_eq!(before, snapshot());
}

/// Pre-annotate, move one boundary, save, export and reload.
#[tokio::test]
async fn headless_annotation_loop() {
    let dir = tempfile::tempdir().unwrap();
    let records = toy::generate(&ToyOptions {
        size: 12,
        ..Default::default()
    });
    // Drop the generator's gold scopes so every record starts from the pre-annotator.
    let text = hgcn::corpus::records_to_jsonl(
        &records
            .into_iter()
            .map(|mut r| {
                for t in &mut r.targets {
                    t.scope_bio = None;
                    t.opinion_spans = None;
                }
                r
            })
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let data = parse_dataset(&text).unwrap();
    let (app, _) = app(dir.path(), &data);

    let (_, stats, _) = call(&app, get("/api/stats")).await;
    let stats: Stats = serde_json::from_value(stats).unwrap();
    assert_eq!(stats.total, 24);
    assert_eq!(stats.human, 0);

    let mut edited = 0;
    for id in [0usize, 3, 7] {
        let (status, proposal, _) = call(&app, post(&format!("/api/docs/{id}/targets/0/pre-annotate"), json!({}))).await;
        assert_eq!(status, StatusCode::OK);
        let proposal: Proposal = serde_json::from_value(proposal).unwrap();
        let (_, doc, _) = call(&app, get(&format!("/api/docs/{id}"))).await;
        let doc: DocView = serde_json::from_value(doc).unwrap();
        assert_eq!(doc.targets[0].annotation.bio, proposal.bio);

        // Extend the scope by one token to the right, or shrink it from the
        // right when it already reaches the end.
        let mut bio = proposal.bio.clone();
        let last = bio.iter().rposition(|t| t != "O").unwrap();
        let target_end = doc.targets[0].span[1];
        if last + 1 < bio.len() {
            bio[last + 1] = "I".into();
        } else if last > target_end {
            bio[last] = "O".into();
        } else {
            let first = bio.iter().position(|t| t != "O").unwrap();
            bio[first] = "O".into();
            bio[first + 1] = "B".into();
        }
        assert_ne!(bio, proposal.bio);
        let version = doc.targets[0].annotation.version;
        let (status, saved, _) = call(
            &app,
            post(&format!("/api/docs/{id}/targets/0/scope"), json!({"bio": bio, "version": version})),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{saved}");
        edited += 1;

        let (_, doc, _) = call(&app, get(&format!("/api/docs/{id}"))).await;
        assert_eq!(doc["targets"][0]["annotation"]["bio"], json!(bio));
        assert_eq!(doc["targets"][0]["annotation"]["provenance"], json!("human"));
    }

    let (status, export, _) = call(&app, get("/api/export")).await;
    assert_eq!(status, StatusCode::OK);
    let text = export.to_string();
    let records = parse_records(&text).unwrap();
    let reloaded = parse_dataset(&text).unwrap();
    assert_eq!(reloaded.len(), 12);
    assert!(reloaded.iter().flat_map(|s| &s.targets).all(|t| t.scope.is_some()));
    let human = records
        .iter()
        .flat_map(|r| &r.targets)
        .filter(|t| t.provenance == Some(Provenance::Human))
        .count();
    assert_eq!(human, edited);

    let (_, stats, _) = call(&app, get("/api/stats")).await;
    let stats: Stats = serde_json::from_value(stats).unwrap();
    assert_eq!(stats.human, edited);
    assert_eq!(stats.adjustment_ratio, edited as f64 / 24.0);
}
