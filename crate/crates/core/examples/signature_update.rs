//! A signature server on a local port, an agent pulling v2 over it, and a
//! corrupted transfer being refused.
//!
//!     cargo run --example signature_update

use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use hostguard::agent::{Agent, AgentConfig, Outputs};
use hostguard::rules::parse_ruleset;
use hostguard::sigupdate::{check_and_fetch, read_response, serve, Catalog};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

fn main() {
    let catalog = Arc::new(Catalog::load(format!("{FIXTURES}/sigupdate").as_ref()).unwrap());
    println!("server has versions {:?}, advertises CURRENT {}", catalog.versions, catalog.current());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let server = {
        let (catalog, stop) = (Arc::clone(&catalog), Arc::clone(&stop));
        std::thread::spawn(move || serve(listener, catalog, &stop))
    };

    let v1 = parse_ruleset(&std::fs::read_to_string(format!("{FIXTURES}/sigupdate/rules.v1.txt")).unwrap(), 1).unwrap();
    let cfg = AgentConfig::load(format!("{FIXTURES}/config/web-02.toml").as_ref()).unwrap();
    let mut agent = Agent::new(cfg, v1, Outputs::default()).unwrap();

    match check_and_fetch(agent.ruleset().version, addr).unwrap() {
        Some(bundle) => {
            println!("fetched v{} ({} bytes, sha256 {})", bundle.version, bundle.bytes.len(), bundle.digest_hex());
            let report = agent.apply_ruleset_update(bundle.ruleset).unwrap();
            println!("swap: {report:?}");
        }
        None => println!("already current"),
    }
    println!("second check: {:?}", check_and_fetch(agent.ruleset().version, addr).unwrap().map(|b| b.version));

    // Flip one byte in the middle of the rules text.
    let mut resp = catalog.latest.as_ref().unwrap().response_to(1);
    let mid = resp.len() / 2;
    resp[mid] ^= 0x01;
    println!("tampered transfer: {}", read_response(&mut &resp[..], 1).unwrap_err());

    stop.store(true, Ordering::Relaxed);
    server.join().unwrap().unwrap();
}
