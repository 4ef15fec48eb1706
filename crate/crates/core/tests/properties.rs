mod common;

use std::net::{IpAddr, SocketAddr};
use std::sync::Arc;

use proptest::prelude::*;

use common::brute_force;
use hostguard::collector::Store;
use hostguard::detection::{DetectionEvent, EventKind};
use hostguard::escape::{escape, unescape, FIELD, TABLE};
use hostguard::rules::{parse_ruleset, render_ruleset, Action, CompiledMatcher, RuleClass};
use hostguard::wire::{decode_event, encode_event, EventRecord, MAX_DATAGRAM};

type ContentSpec = (String, bool, Option<u64>, Option<u64>, Option<u64>, Option<u64>);

fn content() -> impl Strategy<Value = ContentSpec> {
    (
        "[abAB]{1,3}",
        any::<bool>(),
        proptest::option::weighted(0.2, 0u64..16),
        proptest::option::weighted(0.2, 0u64..64),
        proptest::option::weighted(0.4, 0u64..8),
        proptest::option::weighted(0.4, 1u64..16),
    )
}

fn rule_text(sid: usize, contents: &[ContentSpec], server: bool) -> String {
    let mut opts = String::new();
    for (i, (bytes, nocase, offset, depth, distance, within)) in contents.iter().enumerate() {
        opts.push_str(&format!("content:\"{bytes}\"; "));
        if *nocase {
            opts.push_str("nocase; ");
        }
        if let Some(o) = offset {
            opts.push_str(&format!("offset:{o}; "));
        }
        if let Some(d) = depth {
            opts.push_str(&format!("depth:{}; ", d + bytes.len() as u64));
        }
        if i > 0 {
            if let Some(d) = distance {
                opts.push_str(&format!("distance:{d}; "));
            }
            if let Some(w) = within {
                opts.push_str(&format!("within:{}; ", w + bytes.len() as u64));
            }
        }
    }
    let class = if server { "web-server" } else { "web-client" };
    format!("alert tcp any any -> any any (msg:\"p{sid}\"; {opts}classtype:{class}; sid:{sid};)")
}

fn ruleset_text() -> impl Strategy<Value = String> {
    proptest::collection::vec((proptest::collection::vec(content(), 1..4), any::<bool>()), 1..6).prop_map(|rules| {
        rules
            .iter()
            .enumerate()
            .map(|(i, (c, server))| rule_text(i + 1, c, *server))
            .collect::<Vec<_>>()
            .join("\n")
    })
}

fn record() -> impl Strategy<Value = EventRecord> {
    let text = || "[a-zA-Z0-9 %=|\\n\\r\\t\u{e9}\u{65e5}]{0,40}";
    (
        (1u64..u64::MAX, any::<u64>(), "[a-z0-9-]{1,20}", "[a-z0-9]{1,20}"),
        (any::<[u8; 4]>(), any::<u16>(), any::<[u8; 16]>(), any::<u16>(), proptest::option::of(any::<[u8; 4]>())),
        (text(), text(), any::<u32>(), any::<u32>(), "[ -~]{0,600}", 1u8..=4),
        (0usize..4, any::<bool>(), any::<u64>()),
    )
        .prop_map(|((seq, ts, host, conn), (src, sport, dst, dport, real), (app, ver, sid, rev, msg, sev), (k, drop, off))| {
            let kind = EventKind::ALL[k];
            EventRecord::new(
                seq,
                DetectionEvent {
                    ts,
                    host_id: host,
                    conn_id: conn,
                    src: SocketAddr::new(IpAddr::from(src), sport),
                    dst: SocketAddr::new(IpAddr::from(dst), dport),
                    real_src: real.map(IpAddr::from),
                    app_name: app,
                    app_version: ver,
                    sid,
                    rev,
                    msg,
                    severity: sev,
                    kind,
                    quarantine: kind.is_attacking(),
                    action: if drop { Action::Drop } else { Action::Alert },
                    match_offset: off,
                },
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matcher_agrees_with_brute_force(
        text in ruleset_text(),
        data in proptest::collection::vec(prop::sample::select(b"abAx".to_vec()), 0..512),
        cuts in proptest::collection::vec(1usize..48, 1..64),
    ) {
        let rs = parse_ruleset(&text, 1).unwrap();
        let oracle = brute_force(&rs.rules, &data);
        let m = Arc::new(CompiledMatcher::compile(&rs, &[]));
        let scanned: std::collections::BTreeSet<_> = m.scan(&data).into_iter().map(|f| (f.offset, f.sid)).collect();
        prop_assert_eq!(&scanned, &oracle);

        let mut chunked = std::collections::BTreeSet::new();
        for class in RuleClass::ALL {
            let mut s = m.stream(class, None);
            let (mut pos, mut i) = (0, 0);
            while pos < data.len() {
                let n = cuts[i % cuts.len()].min(data.len() - pos);
                let lb = &data[pos.saturating_sub(m.lookbehind())..pos];
                for f in s.feed(pos as u64, lb, &data[pos..pos + n]) {
                    prop_assert!(chunked.insert((f.offset, f.sid)));
                }
                pos += n;
                i += 1;
            }
        }
        prop_assert_eq!(chunked, oracle);
    }

    #[test]
    fn rules_render_then_parse_is_identity(text in ruleset_text()) {
        let rs = parse_ruleset(&text, 3).unwrap();
        let again = parse_ruleset(&render_ruleset(&rs), 3).unwrap();
        prop_assert_eq!(&again, &rs);
        prop_assert_eq!(render_ruleset(&again), render_ruleset(&rs));
    }

    #[test]
    fn escape_round_trips(s in "\\PC{0,64}|[%=|\\n\\r\\t]{0,16}") {
        for set in [FIELD, TABLE] {
            let e = escape(&s, set);
            prop_assert!(!e.chars().any(|c| c != '%' && set.contains(&c)));
            prop_assert_eq!(unescape(&e, set), Some(s.clone()));
        }
    }

    #[test]
    fn wire_round_trips_within_cap(rec in record()) {
        let bytes = encode_event(&rec);
        prop_assert!(bytes.len() <= MAX_DATAGRAM);
        prop_assert_eq!(encode_event(&rec), bytes.clone());
        let back = decode_event(&bytes).unwrap();
        if !back.truncated {
            prop_assert_eq!(&back, &rec);
        }
        prop_assert_eq!(encode_event(&back), bytes);
    }

    #[test]
    fn collector_ignores_redelivery(recs in proptest::collection::vec(record(), 1..12), dups in proptest::collection::vec(any::<prop::sample::Index>(), 0..12)) {
        let recs: Vec<EventRecord> = recs
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r.seq = i as u64 + 1;
                r.event.host_id = "h1".into();
                r
            })
            .collect();
        let datagrams: Vec<Vec<u8>> = recs.iter().map(encode_event).collect();
        let dir = tempfile::tempdir().unwrap();
        let (once, twice) = (dir.path().join("once"), dir.path().join("twice"));
        let mut a = Store::open(&once).unwrap();
        let mut b = Store::open(&twice).unwrap();
        for d in &datagrams {
            a.ingest_datagram(d).unwrap();
            b.ingest_datagram(d).unwrap();
        }
        for i in &dups {
            b.ingest_datagram(i.get(&datagrams)).unwrap();
        }
        for file in ["events.log", "quarantine.tsv"] {
            prop_assert_eq!(std::fs::read(once.join(file)).unwrap(), std::fs::read(twice.join(file)).unwrap());
        }
        prop_assert_eq!(b.gap_stats("h1").unwrap().duplicates, dups.len() as u64);
        prop_assert!(b.audit().is_ok());
    }
}
