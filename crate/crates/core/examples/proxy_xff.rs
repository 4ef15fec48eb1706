//! Resolving the real client behind a proxy from X-Forwarded-For.
//!
//!     cargo run --example proxy_xff

use hostguard::agent::{load_trace, run_replay, AgentConfig, ReplayOptions};
use hostguard::detection::extract_xff;
use hostguard::rules::parse_ruleset;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

fn main() {
    for head in [
        &b"GET / HTTP/1.1\r\nX-Forwarded-For: 203.0.113.9\r\n\r\n"[..],
        b"GET / HTTP/1.1\r\nX-Forwarded-For: 203.0.113.9, 198.51.100.2\r\nX-Forwarded-For: 192.0.2.1\r\n\r\n",
        b"GET / HTTP/1.1\r\nX-Forwarded-For: [2001:db8::7]:4711\r\n\r\n",
        b"GET / HTTP/1.1\r\nbroken header\r\nX-Forwarded-For: 203.0.113.9\r\n\r\n",
        b"\x16\x03\x01\x02\x00\x01",
    ] {
        println!("{:<70} -> {:?}", String::from_utf8_lossy(head).escape_debug().to_string(), extract_xff(head));
    }

    let rs = parse_ruleset(&std::fs::read_to_string(format!("{FIXTURES}/rules/rules.v1.txt")).unwrap(), 1).unwrap();
    for trace in ["proxy_xff", "proxy_noxff"] {
        let cfg = AgentConfig::load(format!("{FIXTURES}/config/web-03.toml").as_ref()).unwrap();
        let events = load_trace(format!("{FIXTURES}/traces/{trace}.trc").as_ref()).unwrap();
        let replay = run_replay(&events, rs.clone(), cfg, &ReplayOptions::default()).unwrap();
        for rec in replay.records {
            let real = rec.event.real_src.map_or("-".to_string(), |ip| ip.to_string());
            println!("{trace}: sid={} src={} realsrc={real}", rec.event.sid, rec.event.src);
        }
    }
}
