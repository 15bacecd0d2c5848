//! Endpoint behaviour, run identically over every shipped driver.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use fedsim_core::sfm::frame::{read_frame, FLAG_FINAL};
use fedsim_core::sfm::{
    chunk_payload, driver_for, Body, ChunkSize, Connection, ContentKind, Endpoint, FileBody,
    Frame, FrameType, Message, Role, SfmConfig, SfmError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

static NEXT: AtomicUsize = AtomicUsize::new(0);

const DRIVERS: [&str; 2] = ["inproc", "tcp"];

fn address(driver: &str) -> String {
    match driver {
        "tcp" => "127.0.0.1:0".into(),
        _ => format!("messaging-{}", NEXT.fetch_add(1, Ordering::Relaxed)),
    }
}

fn raw_pair(driver: &str) -> (Connection, Connection) {
    let d = driver_for(driver).unwrap();
    let acceptor = d.listen(&address(driver)).unwrap();
    let addr = acceptor.local_address();
    let accepted = thread::spawn(move || acceptor.accept().unwrap());
    let client = d.connect(&addr).unwrap();
    (client, accepted.join().unwrap())
}

fn pair_with(driver: &str, config: SfmConfig) -> (Endpoint, Endpoint) {
    let (c, s) = raw_pair(driver);
    (
        Endpoint::new(c, Role::Initiator, config.clone()),
        Endpoint::new(s, Role::Acceptor, config),
    )
}

fn small_chunks() -> SfmConfig {
    SfmConfig::default().with_chunk_size(ChunkSize::new(4096).unwrap())
}

fn send_async(ep: &Arc<Endpoint>, msg: Message) -> thread::JoinHandle<Result<fedsim_core::sfm::SendReceipt, SfmError>> {
    let ep = ep.clone();
    thread::spawn(move || ep.send_message(msg))
}

#[test]
fn empty_blob_round_trip_with_ack() {
    for driver in DRIVERS {
        let (a, b) = pair_with(driver, SfmConfig::default());
        let a = Arc::new(a);
        let h = send_async(&a, Message::blob("empty", vec![]));
        let got = b.recv_message(Some(Duration::from_secs(10))).unwrap();
        let receipt = h.join().unwrap().unwrap();
        assert_eq!(receipt.frames, 1, "{driver}");
        assert_eq!(receipt.payload_bytes, 0);
        assert_eq!(got.topic, "empty");
        assert_eq!(got.bytes().unwrap().len(), 0);
        assert_eq!(got.header("total-size"), Some("0"));
        // HELLO + one DATA frame, then the ACK back
        assert_eq!(a.stats().frames_sent, 2);
        assert_eq!(b.stats().frames_sent, 1);
    }
}

#[test]
fn random_blobs_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for driver in DRIVERS {
        let (a, b) = pair_with(driver, small_chunks());
        let a = Arc::new(a);
        for _ in 0..20 {
            let len = rng.random_range(0..200_000);
            let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let h = send_async(&a, Message::blob("r", payload.clone()).with_header("k", "v"));
            let got = b.recv_message(Some(Duration::from_secs(10))).unwrap();
            h.join().unwrap().unwrap();
            assert_eq!(got.header("k"), Some("v"));
            assert_eq!(got.content_kind(), ContentKind::Blob);
            assert_eq!(got.into_bytes().unwrap(), payload, "{driver} len {len}");
        }
    }
}

#[test]
fn both_directions_and_concurrent_streams() {
    for driver in DRIVERS {
        let (a, b) = pair_with(driver, small_chunks());
        let (a, b) = (Arc::new(a), Arc::new(b));
        let payloads: Vec<Vec<u8>> = (0..4u8).map(|i| vec![i; 50_000 + i as usize * 999]).collect();
        let senders: Vec<_> = payloads
            .iter()
            .map(|p| send_async(&a, Message::object("obj", p.clone())))
            .collect();
        let back = send_async(&b, Message::blob("reverse", vec![9; 70_000]));
        let mut got: Vec<Vec<u8>> = (0..4)
            .map(|_| b.recv_message(Some(Duration::from_secs(10))).unwrap().into_bytes().unwrap())
            .collect();
        got.sort_by_key(|v| v[0]);
        assert_eq!(got, payloads, "{driver}");
        let rev = a.recv_message(Some(Duration::from_secs(10))).unwrap();
        assert_eq!(rev.into_bytes().unwrap(), vec![9; 70_000]);
        for s in senders {
            s.join().unwrap().unwrap();
        }
        back.join().unwrap().unwrap();
    }
}

#[test]
fn file_stream_is_bit_identical_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.bin");
    let len = 3 * 1024 * 1024 + 123;
    {
        let mut f = std::fs::File::create(&src).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut buf = vec![0u8; len];
        rng.fill(&mut buf[..]);
        f.write_all(&buf).unwrap();
    }
    let expect = Sha256::digest(std::fs::read(&src).unwrap());
    for driver in DRIVERS {
        let mut config = small_chunks();
        config.window = 4;
        config.spill_dir = Some(dir.path().to_owned());
        let (a, b) = pair_with(driver, config);
        let a = Arc::new(a);
        let h = send_async(&a, Message::file("f", FileBody::open(&src).unwrap()));
        let got = b.recv_message(Some(Duration::from_secs(30))).unwrap();
        h.join().unwrap().unwrap();
        assert_eq!(got.content_kind(), ContentKind::File);
        let Body::File(file) = &got.body else { panic!("file body expected") };
        assert!(file.path().starts_with(dir.path()));
        assert_eq!(Sha256::digest(std::fs::read(file.path()).unwrap()), expect);
        assert!(a.stats().sender_peak_buffer <= 4 * 4096, "{:?}", a.stats());
        assert!(b.stats().receiver_peak_buffer <= 4096 + 64 * 1024, "{:?}", b.stats());
        let spilled = file.path().to_owned();
        drop(got);
        assert!(!spilled.exists(), "spill file removed on drop");
    }
}

#[test]
fn stream_body_with_short_source_aborts_both_sides() {
    for driver in DRIVERS {
        let (a, b) = pair_with(driver, small_chunks());
        let short: Box<dyn Read + Send> = Box::new(std::io::Cursor::new(vec![1u8; 10_000]));
        let err = a
            .send_message(Message::stream("s", short, 20_000, ContentKind::Blob))
            .unwrap_err();
        assert!(matches!(err, SfmError::Io(_)), "{driver}: {err:?}");
        let err = b.recv_message(Some(Duration::from_secs(5))).unwrap_err();
        assert!(matches!(err, SfmError::PeerError { .. }), "{driver}: {err:?}");
        assert!(!b.is_closed());
    }
}

#[test]
fn corrupted_frame_yields_crc_error_then_stream_recovers() {
    for driver in DRIVERS {
        let (c, s) = raw_pair(driver);
        let receiver = Endpoint::new(s, Role::Acceptor, small_chunks());
        let (mut r, mut w, _shutdown) = c.into_parts();
        let chunk = ChunkSize::new(4096).unwrap();

        let bad = Message::blob("bad", vec![5; 9000]);
        let hello = Frame::new(FrameType::Hello, 0, 1, 0, hello_block(&bad), vec![]);
        let mut frames: Vec<Frame> = chunk_payload(&vec![5; 9000], chunk, 1).collect();
        frames[1].payload[0] ^= 1;
        hello.write_to(&mut w).unwrap();
        for f in &frames {
            f.write_to(&mut w).unwrap();
        }
        let good = Message::blob("good", vec![6; 5000]);
        Frame::new(FrameType::Hello, 0, 3, 0, hello_block(&good), vec![]).write_to(&mut w).unwrap();
        for f in chunk_payload(&vec![6; 5000], chunk, 3) {
            f.write_to(&mut w).unwrap();
        }
        w.flush().unwrap();

        let err = receiver.recv_message(Some(Duration::from_secs(5))).unwrap_err();
        assert!(matches!(err, SfmError::CrcMismatch { stream_id: 1, seq: 1 }), "{err:?}");
        let ok = receiver.recv_message(Some(Duration::from_secs(5))).unwrap();
        assert_eq!(ok.topic, "good");

        // the receiver told us about stream 1 and acknowledged stream 3
        let mut seen = Vec::new();
        while seen.len() < 2 {
            let f = read_frame(&mut r).unwrap().unwrap();
            seen.push((f.frame_type, f.stream_id));
        }
        assert!(seen.contains(&(FrameType::Error, 1)), "{seen:?}");
        assert!(seen.contains(&(FrameType::Ack, 3)), "{seen:?}");
    }
}

fn hello_block(m: &Message) -> Vec<u8> {
    let mut out = format!(
        "msg-id={}\ntopic={}\ncontent-kind=blob\ntotal-size={}\n",
        m.msg_id,
        m.topic,
        m.total_size()
    );
    for (k, v) in &m.headers {
        if k != "content-kind" && k != "total-size" {
            out.push_str(&format!("{k}={v}\n"));
        }
    }
    out.into_bytes()
}

#[test]
fn missing_ack_times_out() {
    for driver in DRIVERS {
        let (c, s) = raw_pair(driver);
        let mut config = small_chunks();
        config.ack_timeout = Duration::from_millis(200);
        let sender = Endpoint::new(c, Role::Initiator, config);
        let (mut r, _w, _) = s.into_parts();
        let drain = thread::spawn(move || {
            let mut n = 0;
            while let Ok(Some(_)) = read_frame(&mut r) {
                n += 1;
            }
            n
        });
        let err = sender.send_message(Message::blob("x", vec![1; 100])).unwrap_err();
        assert!(matches!(err, SfmError::Timeout), "{driver}: {err:?}");
        drop(sender);
        assert_eq!(drain.join().unwrap(), 3, "HELLO, DATA, END");
    }
}

#[test]
fn peer_drop_closes_connection() {
    for driver in DRIVERS {
        let (a, b) = pair_with(driver, SfmConfig::default());
        drop(a);
        let err = b.recv_message(Some(Duration::from_secs(5))).unwrap_err();
        assert!(matches!(err, SfmError::ConnectionClosed), "{driver}: {err:?}");
        assert!(matches!(
            b.recv_message(Some(Duration::from_secs(1))),
            Err(SfmError::ConnectionClosed)
        ));
        assert!(matches!(
            b.send_message(Message::blob("x", vec![1])),
            Err(SfmError::ConnectionClosed)
        ));
    }
}

#[test]
fn silent_peer_hits_idle_timeout() {
    for driver in DRIVERS {
        let (c, s) = raw_pair(driver);
        let ep = Endpoint::new(
            c,
            Role::Initiator,
            SfmConfig::default().with_heartbeat(Duration::from_millis(100)),
        );
        let (mut r, _w, _) = s.into_parts();
        let beats = thread::spawn(move || {
            let mut beats = 0;
            while let Ok(Some(f)) = read_frame(&mut r) {
                if f.frame_type == FrameType::Heartbeat {
                    beats += 1;
                }
            }
            beats
        });
        let started = Instant::now();
        let err = ep.recv_message(Some(Duration::from_secs(5))).unwrap_err();
        assert!(matches!(err, SfmError::Timeout), "{driver}: {err:?}");
        assert!(started.elapsed() < Duration::from_secs(2));
        drop(ep);
        assert!(beats.join().unwrap() >= 1);
    }
}

#[test]
fn heartbeats_keep_quiet_connections_alive() {
    for driver in DRIVERS {
        let config = SfmConfig::default().with_heartbeat(Duration::from_millis(50));
        let (a, b) = pair_with(driver, config);
        thread::sleep(Duration::from_millis(400));
        assert!(!a.is_closed() && !b.is_closed(), "{driver}");
        let a = Arc::new(a);
        let h = send_async(&a, Message::blob("late", vec![1, 2, 3]));
        assert_eq!(b.recv_message(Some(Duration::from_secs(5))).unwrap().topic, "late");
        h.join().unwrap().unwrap();
    }
}

#[test]
fn final_flag_on_last_frame_only() {
    let frames: Vec<_> = chunk_payload(&[0u8; 10_000], ChunkSize::new(4096).unwrap(), 1).collect();
    let flags: Vec<_> = frames.iter().map(|f| f.flags & FLAG_FINAL != 0).collect();
    assert_eq!(flags, vec![false, false, true]);
}
