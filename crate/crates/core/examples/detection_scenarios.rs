//! The four client/server, inbound/outbound scenarios, replayed through one
//! agent each, with the resulting event kinds and quarantine flags.
//!
//!     cargo run --example detection_scenarios

use hostguard::agent::{load_trace, run_replay, AgentConfig, ReplayOptions};
use hostguard::rules::parse_ruleset;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

fn main() {
    let rules = std::fs::read_to_string(format!("{FIXTURES}/rules/rules.v1.txt")).unwrap();
    let rs = parse_ruleset(&rules, 1).unwrap();
    let scenarios = [
        ("client_outbound", "desk-01", "inside client victimized"),
        ("client_inbound", "web-01", "inside server attacking"),
        ("server_outbound", "desk-02", "inside client attacking"),
        ("server_inbound", "web-02", "inside server victimized"),
    ];
    for (trace, host, label) in scenarios {
        let cfg = AgentConfig::load(format!("{FIXTURES}/config/{host}.toml").as_ref()).unwrap();
        let events = load_trace(format!("{FIXTURES}/traces/{trace}.trc").as_ref()).unwrap();
        let replay = run_replay(&events, rs.clone(), cfg, &ReplayOptions::default()).unwrap();
        println!("{trace} ({label}):");
        for rec in &replay.records {
            let ev = &rec.event;
            println!(
                "  seq={} sid={} kind={} quar={} src={} dst={} app={}/{} @{}",
                rec.seq,
                ev.sid,
                ev.kind.code(),
                u8::from(ev.quarantine),
                ev.src,
                ev.dst,
                ev.app_name,
                ev.app_version,
                ev.match_offset
            );
        }
    }
}
