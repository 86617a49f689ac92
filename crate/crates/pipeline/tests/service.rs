mod common;

use std::net::TcpStream;
use std::sync::atomic::Ordering;
use std::time::Duration;

use splatstereo::geometry::Camera;
use splatstereo_pipeline::protocol::{decode_frame_message, FrameHeader, Pose};
use splatstereo_pipeline::service::{Server, ServerHandle};
use splatstereo_pipeline::{Encoding, PipelineConfig};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

use common::{nudged, small_toy};

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

fn start(frames: usize) -> (ServerHandle, Camera) {
    let toy = small_toy(frames);
    let server = Server::bind("127.0.0.1:0", toy.dataset, PipelineConfig::default()).unwrap();
    (server.spawn().unwrap(), toy.held_out)
}

fn connect(handle: &ServerHandle) -> Client {
    let (ws, _) = tungstenite::connect(format!("ws://{}", handle.addr)).unwrap();
    if let MaybeTlsStream::Plain(s) = ws.get_ref() {
        s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    }
    ws
}

fn pose_json(camera: &Camera, frame: usize, encoding: Option<&str>) -> String {
    let mut v = serde_json::to_value(Pose::from_camera(camera)).unwrap();
    v["type"] = "pose".into();
    v["frame"] = frame.into();
    if let Some(e) = encoding {
        v["encoding"] = e.into();
    }
    v.to_string()
}

enum Reply {
    Frame(FrameHeader, image::DynamicImage),
    Text(serde_json::Value),
}

fn next(ws: &mut Client) -> Reply {
    loop {
        match ws.read().unwrap() {
            Message::Binary(b) => {
                let (header, bytes) = decode_frame_message(&b).unwrap();
                return Reply::Frame(header, image::load_from_memory(bytes).unwrap());
            }
            Message::Text(t) => return Reply::Text(serde_json::from_str(&t).unwrap()),
            _ => continue,
        }
    }
}

#[test]
fn pose_gets_one_frame_with_stats() {
    let (handle, held_out) = start(1);
    let mut ws = connect(&handle);
    ws.send(Message::text(pose_json(&held_out, 0, None))).unwrap();
    let Reply::Frame(h, img) = next(&mut ws) else { panic!("expected a frame") };
    assert_eq!(h.kind, "frame");
    assert_eq!(h.frame, 0);
    assert_eq!(h.encoding, Encoding::Jpeg);
    assert!(h.t_src_ms > 0.0 && h.t_render_ms > 0.0);
    assert_eq!(h.cache_hit, Some(false));
    assert_eq!((img.width(), img.height()), (96, 72));

    ws.send(Message::text(pose_json(&nudged(&held_out, 0.01), 0, Some("png")))).unwrap();
    let Reply::Frame(h, _) = next(&mut ws) else { panic!("expected a frame") };
    assert_eq!(h.encoding, Encoding::Png);
    assert_eq!(h.cache_hit, Some(true));

    ws.send(Message::text(r#"{"type":"ping"}"#)).unwrap();
    let Reply::Text(v) = next(&mut ws) else { panic!("expected pong") };
    assert_eq!(v["type"], "pong");
    ws.close(None).unwrap();
    handle.stop().unwrap();
}

#[test]
fn malformed_messages_get_an_error_and_the_session_survives() {
    let (handle, held_out) = start(1);
    let mut ws = connect(&handle);
    for bad in [
        "not json".to_string(),
        r#"{"type":"teleport"}"#.to_string(),
        r#"{"type":"pose","R":[1,0,0],"t":[0,0,0],"fov_deg":60,"width":8,"height":8,"frame":0}"#.to_string(),
        // rotation that is not orthonormal
        r#"{"type":"pose","R":[2,0,0,0,1,0,0,0,1],"t":[0,0,2],"fov_deg":60,"width":8,"height":8,"frame":0}"#.to_string(),
        pose_json(&held_out, 9, None),
    ] {
        ws.send(Message::text(bad)).unwrap();
        let Reply::Text(v) = next(&mut ws) else { panic!("expected an error reply") };
        assert_eq!(v["type"], "error");
        assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
    ws.send(Message::binary(vec![1, 2, 3])).unwrap();
    assert!(matches!(next(&mut ws), Reply::Text(v) if v["type"] == "error"));
    ws.send(Message::text(pose_json(&held_out, 0, None))).unwrap();
    assert!(matches!(next(&mut ws), Reply::Frame(..)));
    assert_eq!(handle.stats.errors_sent.load(Ordering::SeqCst), 6);
    handle.stop().unwrap();
}

fn flood(n: usize) {
    let (handle, held_out) = start(1);
    let mut ws = connect(&handle);
    // warm the cache so every render is cheap
    ws.send(Message::text(pose_json(&held_out, 0, None))).unwrap();
    assert!(matches!(next(&mut ws), Reply::Frame(..)));
    for i in 0..n {
        let dx = 0.02 * (i as f64 / n as f64 - 0.5);
        ws.send(Message::text(pose_json(&nudged(&held_out, dx), 0, None))).unwrap();
    }
    ws.send(Message::text(r#"{"type":"ping"}"#)).unwrap();
    let mut frames = 0;
    loop {
        match next(&mut ws) {
            Reply::Frame(..) => frames += 1,
            Reply::Text(v) if v["type"] == "pong" => break,
            Reply::Text(v) => panic!("{v}"),
        }
    }
    // coalescing happens before the ping is read, so the count is final here;
    // the pose still pending at the ping is rendered after the pong
    let coalesced = handle.stats.poses_coalesced.load(Ordering::SeqCst) as usize;
    while frames + coalesced < n {
        assert!(matches!(next(&mut ws), Reply::Frame(..)));
        frames += 1;
    }
    let s = &handle.stats;
    assert_eq!(s.poses_received.load(Ordering::SeqCst) as usize, n + 1);
    assert_eq!(frames + 1 + coalesced, n + 1, "frames {frames} coalesced {coalesced}");
    assert!(coalesced > 0, "nothing coalesced");
    assert!(s.max_pending.load(Ordering::SeqCst) <= 1);
    handle.stop().unwrap();
}

#[test]
fn pose_flood_is_coalesced() {
    flood(100);
}

#[test]
fn thousand_pose_flood_keeps_one_pending() {
    flood(1000);
}

#[test]
fn clients_have_independent_sessions() {
    let (handle, held_out) = start(2);
    let mut a = connect(&handle);
    let mut b = connect(&handle);
    a.send(Message::text(pose_json(&held_out, 0, None))).unwrap();
    b.send(Message::text(pose_json(&held_out, 1, None))).unwrap();
    let Reply::Frame(ha, ia) = next(&mut a) else { panic!() };
    let Reply::Frame(hb, ib) = next(&mut b) else { panic!() };
    assert_eq!((ha.frame, hb.frame), (0, 1));
    assert_ne!(ia.to_rgb8().into_raw(), ib.to_rgb8().into_raw());
    // each client keeps its own cache: b's frame 1 stage does not evict a's
    a.send(Message::text(pose_json(&nudged(&held_out, 0.01), 0, None))).unwrap();
    let Reply::Frame(ha, _) = next(&mut a) else { panic!() };
    assert_eq!(ha.cache_hit, Some(true));
    drop(b);
    a.send(Message::text(r#"{"type":"ping"}"#)).unwrap();
    assert!(matches!(next(&mut a), Reply::Text(v) if v["type"] == "pong"));
    assert_eq!(handle.stats.connections.load(Ordering::SeqCst), 2);
    handle.stop().unwrap();
}
