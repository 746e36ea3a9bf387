use std::path::Path;

use attn_distill::labels::{read_records, write_records, LabelRecord, RecordSource};
use attn_distill::tiler::tile_raster;
use attn_distill::{ClassName, PatchId, SheetId};
use attn_distill_review::{router, AppState, PatchPage, ReviewConfig, SheetStats};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use image::{Rgb, RgbImage};
use tower::ServiceExt;

/// A 5×5 grid of 64 px patches with an llm label for both classes on every patch.
fn fixture(dir: &Path, labeled: bool) -> ReviewConfig {
    let raster = RgbImage::from_fn(320, 320, |x, y| Rgb([x as u8, y as u8, 128]));
    let sheet = SheetId::new("s1").unwrap();
    let tiles = tile_raster(&raster, &sheet, 64, &dir.join("patches")).unwrap();
    let mut records = Vec::new();
    if labeled {
        for e in &tiles.entries {
            for class in ClassName::ALL {
                records.push(LabelRecord {
                    patch_id: e.patch_id.clone(),
                    class,
                    present: Some(e.row == 0),
                    source: RecordSource::Llm,
                    reason: Some("symbols".into()),
                });
            }
        }
    }
    write_records(&dir.join("labels.jsonl"), &records).unwrap();
    ReviewConfig::new(dir.join("labels.jsonl"), dir.join("patches"))
}

fn app(cfg: &ReviewConfig) -> Router {
    router(AppState::load(cfg).unwrap(), cfg)
}

async fn send(app: &Router, method: &str, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json<T: serde::de::DeserializeOwned>(app: &Router, uri: &str) -> T {
    let (status, body) = send(app, "GET", uri, "").await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

#[tokio::test]
async fn empty_store_lists_no_sheets_and_exports_nothing() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("patches")).unwrap();
    let cfg = ReviewConfig::new(dir.path().join("labels.jsonl"), dir.path().join("patches"));
    let app = app(&cfg);
    let sheets: Vec<SheetStats> = get_json(&app, "/sheets").await;
    assert!(sheets.is_empty());
    let (status, body) = send(&app, "GET", "/export/labels", "").await;
    assert_eq!(status, StatusCode::OK);
    assert!(body.is_empty());
}

#[tokio::test]
async fn full_sheet_has_full_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&fixture(dir.path(), true));
    let sheets: Vec<SheetStats> = get_json(&app, "/sheets").await;
    assert_eq!(sheets.len(), 1);
    assert_eq!(sheets[0].patches, 25);
    assert_eq!(sheets[0].labels, 50);
    assert_eq!(sheets[0].coverage, 1.0);
    assert_eq!(sheets[0].human_overrides, 0);
}

#[tokio::test]
async fn pages_are_row_major() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&fixture(dir.path(), true));
    let p1: PatchPage = get_json(&app, "/sheets/s1/patches?class=wood").await;
    assert_eq!(p1.items.len(), 20);
    assert_eq!(p1.total, 25);
    assert_eq!(p1.items[0].patch_id.to_string(), "s1_0_0");
    assert_eq!(p1.items[5].patch_id.to_string(), "s1_1_0");
    assert_eq!(p1.items[0].label, Some(true));
    assert_eq!(p1.items[5].label, Some(false));
    assert_eq!(p1.items[0].image_url, "/patches/s1_0_0/image");
    let p2: PatchPage = get_json(&app, "/sheets/s1/patches?class=wood&page=2&page_size=20").await;
    assert_eq!(p2.items.len(), 5);
    assert_eq!(p2.items[4].patch_id.to_string(), "s1_4_4");
}

#[tokio::test]
async fn not_found_and_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&fixture(dir.path(), true));
    let cases = [
        ("GET", "/sheets/nope/patches?class=wood", "", StatusCode::NOT_FOUND),
        ("GET", "/sheets/s1/patches?class=river", "", StatusCode::NOT_FOUND),
        ("GET", "/sheets/s1/patches", "", StatusCode::BAD_REQUEST),
        ("GET", "/sheets/s1/patches?class=wood&page=0", "", StatusCode::BAD_REQUEST),
        ("POST", "/patches/s1_9_9/labels/wood", r#"{"present":true}"#, StatusCode::NOT_FOUND),
        ("POST", "/patches/garbage/labels/wood", r#"{"present":true}"#, StatusCode::NOT_FOUND),
        ("POST", "/patches/s1_0_0/labels/river", r#"{"present":true}"#, StatusCode::NOT_FOUND),
        ("POST", "/patches/s1_0_0/labels/wood", r#"{"present":"yes"}"#, StatusCode::BAD_REQUEST),
        ("POST", "/patches/s1_0_0/labels/wood", "not json", StatusCode::BAD_REQUEST),
        ("POST", "/patches/s1_0_0/labels/wood", "{}", StatusCode::BAD_REQUEST),
        ("GET", "/patches/s1_0_0/overlay/wood", "", StatusCode::NOT_FOUND),
    ];
    for (method, uri, body, want) in cases {
        let (status, _) = send(&app, method, uri, body).await;
        assert_eq!(status, want, "{method} {uri} {body}");
    }
}

#[tokio::test]
async fn flip_is_durable_idempotent_and_keeps_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), true);
    let app1 = app(&cfg);
    let uri = "/patches/s1_0_0/labels/wood";
    let (s1, b1) = send(&app1, "POST", uri, r#"{"present":false}"#).await;
    let (s2, b2) = send(&app1, "POST", uri, r#"{"present":false}"#).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(b1, b2);
    let label: attn_distill::CoarseLabel = serde_json::from_slice(&b1).unwrap();
    assert!(!label.present);
    assert_eq!(label.source, attn_distill::LabelSource::Human);

    let sheets: Vec<SheetStats> = get_json(&app1, "/sheets").await;
    assert_eq!((sheets[0].labels, sheets[0].human_overrides), (50, 1));

    // A fresh service over the same files sees the correction.
    let app2 = app(&cfg);
    let page: PatchPage = get_json(&app2, "/sheets/s1/patches?class=wood&page_size=1").await;
    assert_eq!(page.items[0].label, Some(false));
    assert_eq!(page.items[0].source, Some(attn_distill::LabelSource::Human));

    // The llm record stays in the base file; the log holds exactly one correction.
    let base = read_records(&cfg.labels).unwrap();
    let id: PatchId = "s1_0_0".parse().unwrap();
    assert!(base
        .iter()
        .any(|r| r.patch_id == id && r.class == ClassName::Wood && r.present == Some(true)));
    let log = read_records(&attn_distill::labels::corrections_path(&cfg.labels)).unwrap();
    assert_eq!(log.len(), 1);
}

#[tokio::test]
async fn export_round_trips_through_the_trainer_reader() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), true);
    let app = app(&cfg);
    send(&app, "POST", "/patches/s1_1_1/labels/settlement", r#"{"present":true}"#).await;
    let (status, body) = send(&app, "GET", "/export/labels", "").await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    assert_eq!(text.lines().count(), 50);

    let exported = dir.path().join("export.jsonl");
    std::fs::write(&exported, &text).unwrap();
    let labels = attn_distill::labels::load_effective(&exported).unwrap();
    assert_eq!(labels.len(), 50);
    let flipped = labels
        .iter()
        .find(|l| l.patch.to_string() == "s1_1_1" && l.class_name == ClassName::Settlement)
        .unwrap();
    assert!(flipped.present);
    assert_eq!(flipped.source, attn_distill::LabelSource::Human);

    // The trainer's dataset loader prefers the human label.
    let data = attn_distill::trainer::load_dataset(&labels, &dir.path().join("patches"), ClassName::Settlement).unwrap();
    assert_eq!(data.len(), 25);
    assert_eq!(data.iter().filter(|e| e.target).count(), 6);
}

#[tokio::test]
async fn serves_images_and_overlays() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path(), true);
    let maps = dir.path().join("maps");
    std::fs::create_dir_all(maps.join("wood")).unwrap();
    let id: PatchId = "s1_2_3".parse().unwrap();
    let map = attn_distill::AttentionMap::new(id.clone(), ClassName::Wood, 1, 1, vec![1.0]).unwrap();
    let file = attn_distill::attnmap::MapFile { map, probability: 0.9, gated: false };
    std::fs::write(
        maps.join("wood").join(attn_distill::attnmap::map_file_name(&id, ClassName::Wood)),
        serde_json::to_vec(&file).unwrap(),
    )
    .unwrap();
    cfg.maps = Some(maps);
    let app = app(&cfg);

    let (status, body) = send(&app, "GET", "/patches/s1_2_3/image", "").await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let img = image::load_from_memory(&body).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (64, 64));
    assert_eq!(img.get_pixel(0, 0), &Rgb([192, 128, 128]));

    let page: PatchPage = get_json(&app, "/sheets/s1/patches?class=wood&page=1&page_size=25").await;
    let rec = page.items.iter().find(|r| r.patch_id == id).unwrap();
    assert_eq!(rec.overlay_url.as_deref(), Some("/patches/s1_2_3/overlay/wood"));
    assert!(page.items.iter().filter(|r| r.overlay_url.is_some()).count() == 1);

    let (status, a) = send(&app, "GET", "/patches/s1_2_3/overlay/wood", "").await;
    assert_eq!(status, StatusCode::OK);
    let (_, b) = send(&app, "GET", "/patches/s1_2_3/overlay/wood", "").await;
    assert_eq!(a, b);
    let over = image::load_from_memory(&a).unwrap().to_rgb8();
    assert_ne!(over.get_pixel(0, 0), &Rgb([192, 128, 128]));
}

#[tokio::test]
async fn cors_allows_the_ui_origin() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&fixture(dir.path(), false));
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/patches/s1_0_0/labels/wood")
        .header("origin", attn_distill_review::DEFAULT_UI_ORIGIN)
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let res = app.oneshot(req).await.unwrap();
    assert_eq!(
        res.headers().get("access-control-allow-origin").unwrap(),
        attn_distill_review::DEFAULT_UI_ORIGIN
    );
}
