//! Event datagrams: encoding, escaping, the 1400-byte cap and decode errors.
//!
//!     cargo run --example wire_format

use hostguard::detection::{DetectionEvent, EventKind};
use hostguard::rules::Action;
use hostguard::wire::{decode_event, encode_event, EventRecord, MAX_DATAGRAM};

fn main() {
    let mut rec = EventRecord::new(
        1,
        DetectionEvent {
            ts: 1_700_000_000_000,
            host_id: "h1".into(),
            conn_id: "c42".into(),
            src: "10.0.2.10:8080".parse().unwrap(),
            dst: "198.51.100.23:51000".parse().unwrap(),
            real_src: None,
            app_name: "tomcat".into(),
            app_version: "5.5".into(),
            sid: 1002,
            rev: 1,
            msg: "a=b\nc|d 100%".into(),
            severity: 1,
            kind: EventKind::InsideServerAttacking,
            quarantine: true,
            action: Action::Alert,
            match_offset: 105,
        },
    );
    let dgram = encode_event(&rec);
    print!("{}", String::from_utf8_lossy(&dgram));
    assert_eq!(decode_event(&dgram).unwrap(), rec);

    rec.event.msg = "x".repeat(4096);
    let big = encode_event(&rec);
    let back = decode_event(&big).unwrap();
    println!("\n4 KiB msg -> {} bytes (cap {MAX_DATAGRAM}), trunc={}, msg kept {} bytes", big.len(), back.truncated, back.event.msg.len());

    for bad in [
        String::from_utf8(dgram.clone()).unwrap().replace("HGEV1", "HGEV2"),
        String::from_utf8(dgram.clone()).unwrap().replace("sid=1002\n", ""),
        String::from_utf8(dgram.clone()).unwrap().replace("quar=1", "quar=0"),
    ] {
        println!("rejected: {}", decode_event(bad.as_bytes()).unwrap_err());
    }
}
