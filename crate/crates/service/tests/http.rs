use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use blendfield::fields::AnalyticScene;
use blendfield::geometry::{project_box_edges, RoiBox};
use blendfield::guidance::MockScorer;
use blendfield::math::Vec3;
use blendfield::raster::Resolution;
use blendfield::renderer::io::{decode_depth, encode_png};
use blendfield::trainer::{train, TrainConfig};
use blendfield_service::api::{edit_config, router, AppState, RenderResponse, RoiResponse};
use blendfield_service::jobs::{default_target, JobState, JobStatus, ScorerSpec};
use blendfield_service::scene::{EditDescriptor, Scene, WirePose, TEST_SCENE};
use http_body_util::BodyExt;
use tower::ServiceExt;

fn service() -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::new(
        vec![Scene::test_scene()],
        ScorerSpec::Mock { target: None, seed: 5 },
    ));
    (router(state.clone()), state)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: serde_json::Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

fn pose() -> WirePose {
    WirePose {
        position: Vec3::new(0.5, 0.6, 3.5),
        look_at: Vec3::new(0.0, -0.5, 0.5),
        up: Vec3::new(0.0, 1.0, 0.0),
        afov_deg: 55.0,
    }
}

fn enc(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

fn pose_query() -> String {
    enc(&serde_json::to_string(&pose()).unwrap())
}

fn edit() -> EditDescriptor {
    EditDescriptor {
        scene_id: TEST_SCENE.into(),
        roi: AnalyticScene::test_scene_empty_roi(),
        blend: blendfield::blending::BlendMode::Replace,
        caption: "a red disc".into(),
        ema_center: None,
        generator: None,
        texture_only: false,
    }
}

fn small_train(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        resolution: Resolution::square(8),
        samples_per_ray: 8,
        generator_arch: blendfield::fields::MlpArch {
            depth: 2,
            width: 16,
            color_width: 8,
            pos_freqs: 2,
            dir_freqs: 1,
        },
        ..Default::default()
    }
}

async fn status(app: &Router, id: &str) -> JobStatus {
    let (code, body) = get(app, &format!("/edits/{id}/status")).await;
    assert_eq!(code, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

async fn wait_done(app: &Router, id: &str) -> Vec<u64> {
    let start = Instant::now();
    let mut steps = Vec::new();
    loop {
        let s = status(app, id).await;
        steps.push(s.step);
        if s.state != JobState::Running {
            assert_eq!(s.state, JobState::Done, "{:?}", s.error);
            return steps;
        }
        assert!(start.elapsed() < Duration::from_secs(300), "job did not finish");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

#[tokio::test]
async fn lists_scenes() {
    let (app, _) = service();
    let (code, body) = get(&app, "/scenes").await;
    assert_eq!(code, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v[0]["id"], TEST_SCENE);
    assert_eq!(v[0]["scene_type"], "full-orbit");
}

#[tokio::test]
async fn render_is_repeatable_and_matches_direct_render() {
    let (app, _) = service();
    let uri = format!("/render?scene={TEST_SCENE}&pose={}&res=24x16", pose_query());
    let (c1, a) = get(&app, &uri).await;
    let (c2, b) = get(&app, &uri).await;
    assert_eq!((c1, c2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);

    let r: RenderResponse = serde_json::from_slice(&a).unwrap();
    assert_eq!((r.width, r.height), (24, 16));
    let direct = Scene::test_scene()
        .render(&pose().to_pose().unwrap(), Some(Resolution::new(24, 16)), 123)
        .unwrap();
    let b64 = base64::engine::general_purpose::STANDARD;
    assert_eq!(b64.decode(&r.png_base64).unwrap(), encode_png(&direct.rgb).unwrap());
    let depth = decode_depth(&b64.decode(&r.depth_base64).unwrap()).unwrap();
    assert_eq!(depth.resolution(), Resolution::new(24, 16));
    for (d, e) in depth.values.iter().zip(&direct.depth.values) {
        assert_eq!(*d, *e as f32 as f64);
    }

    let (code, png) = get(&app, &format!("{uri}&format=png")).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(png, encode_png(&direct.rgb).unwrap());
}

#[tokio::test]
async fn render_errors() {
    let (app, _) = service();
    let degenerate = enc(r#"{"position":[0,0,0],"look_at":[0,0,0],"afov_deg":50}"#);
    let cases = [
        ("/render".to_string(), StatusCode::BAD_REQUEST),
        ("/render?scene=nope".to_string(), StatusCode::NOT_FOUND),
        (format!("/render?scene={TEST_SCENE}&pose={degenerate}"), StatusCode::BAD_REQUEST),
        (format!("/render?scene={TEST_SCENE}&pose=%7Bbad"), StatusCode::BAD_REQUEST),
        (format!("/render?scene={TEST_SCENE}&res=513"), StatusCode::BAD_REQUEST),
        (format!("/render?scene={TEST_SCENE}&res=0x4"), StatusCode::BAD_REQUEST),
        (format!("/render?scene={TEST_SCENE}&res=8&format=gif"), StatusCode::BAD_REQUEST),
        (format!("/render?scene={TEST_SCENE}&seed=x"), StatusCode::BAD_REQUEST),
    ];
    for (uri, want) in cases {
        let (code, body) = get(&app, &uri).await;
        assert_eq!(code, want, "{uri}");
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert!(v["message"].is_string());
    }
    let (code, _) = get(&app, &format!("/render?scene={TEST_SCENE}&res=512x1")).await;
    assert_eq!(code, StatusCode::OK);
}

#[tokio::test]
async fn roi_passes_through_edge_projection() {
    let (app, _) = service();
    let roi = AnalyticScene::test_scene_empty_roi();
    let body = serde_json::json!({"scene": TEST_SCENE, "roi": roi, "pose": pose(), "res": "32", "samples_per_edge": 9});
    let (code, bytes) = post(&app, "/roi", body).await;
    assert_eq!(code, StatusCode::OK);
    let r: RoiResponse = serde_json::from_slice(&bytes).unwrap();

    let p = pose().to_pose().unwrap();
    let depth = Scene::test_scene()
        .render(&p, Some(Resolution::square(32)), 123)
        .unwrap()
        .occlusion_depth();
    assert_eq!(r.edges, project_box_edges(&roi, &p, &depth, 9));
    assert!(r.edges.iter().any(|e| e.visible));

    // A box behind the red sphere loses edges to occlusion.
    let hidden = RoiBox::new(Vec3::new(-0.6, -0.5, -1.0), Vec3::splat(0.3)).unwrap();
    let front = WirePose {
        position: Vec3::new(-0.6, -0.5, 3.0),
        look_at: Vec3::new(-0.6, -0.5, 0.0),
        ..pose()
    };
    let req = |occlusion: bool| serde_json::json!({"scene": TEST_SCENE, "roi": hidden, "pose": front, "res": "32", "occlusion": occlusion});
    let (_, a) = post(&app, "/roi", req(true)).await;
    let (_, b) = post(&app, "/roi", req(false)).await;
    let (a, b): (RoiResponse, RoiResponse) = (serde_json::from_slice(&a).unwrap(), serde_json::from_slice(&b).unwrap());
    assert_eq!(a.edges.len(), b.edges.len());
    assert!(b.edges.iter().all(|e| e.visible));
    assert!(a.edges.iter().filter(|e| !e.visible).count() > a.edges.len() / 2);
}

#[tokio::test]
async fn roi_errors() {
    let (app, _) = service();
    let bad_box = serde_json::json!({"scene": TEST_SCENE, "roi": {"center": [0, 0, 0], "dims": [1, -1, 1]}, "pose": pose()});
    assert_eq!(post(&app, "/roi", bad_box).await.0, StatusCode::BAD_REQUEST);
    let roi = AnalyticScene::test_scene_empty_roi();
    let unknown = serde_json::json!({"scene": "nope", "roi": roi, "pose": pose()});
    assert_eq!(post(&app, "/roi", unknown).await.0, StatusCode::NOT_FOUND);
    let bad_pose = serde_json::json!({"scene": TEST_SCENE, "roi": roi, "pose": {"position": [0, 0, 0], "look_at": [1, 0, 0], "afov_deg": 190}});
    assert_eq!(post(&app, "/roi", bad_pose).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(
        send(&app, Request::post("/roi").body(Body::from("{")).unwrap()).await.0,
        StatusCode::BAD_REQUEST
    );
}

#[tokio::test]
async fn edit_job_runs_and_matches_direct_training() {
    let (app, _) = service();
    let (code, body) = post(&app, "/edits", serde_json::json!({"id": "e1", "edit": edit(), "train": small_train(12)})).await;
    assert_eq!(code, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    let steps = wait_done(&app, "e1").await;
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    let s = status(&app, "e1").await;
    assert_eq!((s.step, s.total_steps), (12, 12));
    assert!(s.last.is_some());

    let scene = Scene::test_scene();
    let cfg = edit_config(small_train(12), &edit(), &scene);
    let scorer = MockScorer::with_target(&default_target(cfg.resolution), "a red disc", 5);
    let direct = train(&scene.field, &edit().roi, "a red disc", &cfg, &scorer, None).unwrap();
    assert_eq!(s.ema_center, direct.summary.ema_center);

    let uri = format!("/edits/e1/render?pose={}&res=16&format=png", pose_query());
    let (code, png) = get(&app, &uri).await;
    assert_eq!(code, StatusCode::OK);
    let trained = EditDescriptor {
        ema_center: Some(direct.summary.ema_center),
        ..edit()
    };
    let expected = scene
        .render_edited(&trained, &direct.state.generator, &pose().to_pose().unwrap(), Some(Resolution::square(16)), 123)
        .unwrap();
    assert_eq!(png, encode_png(&expected.rgb).unwrap());
}

#[tokio::test]
async fn concurrent_edits_are_isolated() {
    let (app, _) = service();
    let target = base64::engine::general_purpose::STANDARD
        .encode(encode_png(&blendfield::raster::Image::filled(Resolution::square(8), [0.1, 0.2, 0.9])).unwrap());
    let (c1, _) = post(&app, "/edits", serde_json::json!({"id": "a", "edit": edit(), "train": small_train(8)})).await;
    let (c2, _) = post(
        &app,
        "/edits",
        serde_json::json!({"id": "b", "edit": edit(), "train": small_train(8), "target_png_base64": target}),
    )
    .await;
    assert_eq!((c1, c2), (StatusCode::CREATED, StatusCode::CREATED));
    wait_done(&app, "a").await;
    wait_done(&app, "b").await;
    let (sa, sb) = (status(&app, "a").await, status(&app, "b").await);
    assert_ne!(sa.last, sb.last);

    // Job "a" alone reproduces the same history as when run beside "b".
    let (app2, _) = service();
    post(&app2, "/edits", serde_json::json!({"id": "a", "edit": edit(), "train": small_train(8)})).await;
    wait_done(&app2, "a").await;
    assert_eq!(status(&app2, "a").await.last, sa.last);
}

#[tokio::test]
async fn edit_errors() {
    let (app, state) = service();
    let (code, _) = post(&app, "/edits", serde_json::json!({"id": "long", "edit": edit(), "train": small_train(100_000)})).await;
    assert_eq!(code, StatusCode::CREATED);
    let (code, body) = post(&app, "/edits", serde_json::json!({"id": "long", "edit": edit(), "train": small_train(5)})).await;
    assert_eq!(code, StatusCode::CONFLICT, "{}", String::from_utf8_lossy(&body));
    let (code, _) = send(&app, Request::delete("/edits/long").body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::OK);
    let start = Instant::now();
    while state.jobs.lock().unwrap()["long"].is_running() {
        assert!(start.elapsed() < Duration::from_secs(60));
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    assert_eq!(status(&app, "long").await.state, JobState::Cancelled);
    // A finished id may be trained again.
    let (code, _) = post(&app, "/edits", serde_json::json!({"id": "long", "edit": edit(), "train": small_train(2)})).await;
    assert_eq!(code, StatusCode::CREATED);
    wait_done(&app, "long").await;

    assert_eq!(get(&app, "/edits/nope/status").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/edits/nope/render").await.0, StatusCode::NOT_FOUND);
    let mut outside = edit();
    outside.roi = RoiBox::new(Vec3::new(0.0, 0.0, 1.9), Vec3::splat(0.5)).unwrap();
    assert_eq!(post(&app, "/edits", serde_json::json!({"edit": outside})).await.0, StatusCode::BAD_REQUEST);
    let mut other = edit();
    other.scene_id = "nope".into();
    assert_eq!(post(&app, "/edits", serde_json::json!({"edit": other})).await.0, StatusCode::NOT_FOUND);
    assert_eq!(
        post(&app, "/edits", serde_json::json!({"id": "bad id", "edit": edit()})).await.0,
        StatusCode::BAD_REQUEST
    );
    let (code, body) = post(&app, "/edits", serde_json::json!({"edit": edit(), "train": small_train(1)})).await;
    assert_eq!(code, StatusCode::CREATED);
    let id: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert!(id["id"].as_str().unwrap().starts_with("edit-"));
}
