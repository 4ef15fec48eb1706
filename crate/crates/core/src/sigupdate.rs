//! Signature distribution over TCP.
//!
//! ```text
//! client: HGSIG1 CHECK <v>\n
//! server: HGSIG1 CURRENT <m>\n
//!         (if m > v) BEGIN <m> <nbytes> <sha256hex>\n <bytes> \nEND\n
//! ```
//!
//! The server publishes the highest `rules.v<N>.txt` in its directory.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rules::{parse_ruleset, RuleSet, RuleSetError};

pub const PROTO: &str = "HGSIG1";
/// Largest bundle a client accepts.
pub const MAX_BUNDLE: usize = 16 << 20;
const MAX_LINE: u64 = 256;
const IO_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureBundle {
    pub version: u64,
    pub bytes: Vec<u8>,
    pub digest: [u8; 32],
    pub ruleset: RuleSet,
}

impl SignatureBundle {
    /// Parses `bytes` as the ruleset of `version`.
    pub fn from_bytes(version: u64, bytes: Vec<u8>) -> Result<Self, BundleError> {
        let text = std::str::from_utf8(&bytes).map_err(|_| BundleError::NotUtf8)?;
        let ruleset = parse_ruleset(text, version)?;
        let digest = Sha256::digest(&bytes).into();
        Ok(SignatureBundle {
            version,
            bytes,
            digest,
            ruleset,
        })
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }

    /// The response a server sends to a client holding `client_version`.
    pub fn response_to(&self, client_version: u64) -> Vec<u8> {
        let mut out = format!("{PROTO} CURRENT {}\n", self.version).into_bytes();
        if self.version > client_version {
            out.extend_from_slice(
                format!("BEGIN {} {} {}\n", self.version, self.bytes.len(), self.digest_hex()).as_bytes(),
            );
            out.extend_from_slice(&self.bytes);
            out.extend_from_slice(b"\nEND\n");
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("not UTF-8")]
    NotUtf8,
    #[error(transparent)]
    Rules(#[from] RuleSetError),
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("reading {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bundle {}: {reason}", path.display())]
    BadBundle { path: PathBuf, reason: String },
}

/// Version number encoded in a bundle file name, if it looks like one.
fn bundle_version(name: &str) -> Option<Result<u64, String>> {
    let digits = name.strip_prefix("rules.v")?.strip_suffix(".txt")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Some(Err("version is not a number".into()));
    }
    if digits.starts_with('0') {
        return Some(Err("version must be positive, without leading zeros".into()));
    }
    Some(digits.parse().map_err(|_| "version out of range".to_string()))
}

/// What a signature server publishes.
#[derive(Debug, Clone)]
pub struct Catalog {
    /// Every valid bundle, by ascending version.
    pub versions: Vec<u64>,
    pub latest: Option<Arc<SignatureBundle>>,
}

impl Catalog {
    /// Reads and validates every bundle in `dir`.
    pub fn load(dir: &Path) -> Result<Catalog, ServerError> {
        let io_err = |path: &Path, source| ServerError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut found = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
            let entry = entry.map_err(|e| io_err(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let path = entry.path();
            match bundle_version(&name) {
                None => continue,
                Some(Err(reason)) => return Err(ServerError::BadBundle { path, reason }),
                Some(Ok(v)) => found.push((v, path)),
            }
        }
        found.sort();
        let mut latest = None;
        for (v, path) in &found {
            let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
            let bundle = SignatureBundle::from_bytes(*v, bytes).map_err(|e| ServerError::BadBundle {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            latest = Some(Arc::new(bundle));
        }
        Ok(Catalog {
            versions: found.into_iter().map(|(v, _)| v).collect(),
            latest,
        })
    }

    pub fn current(&self) -> u64 {
        self.latest.as_ref().map_or(0, |b| b.version)
    }

    /// Answers one client request.
    pub fn respond(&self, request: &str) -> Option<Vec<u8>> {
        let v = request
            .strip_suffix('\n')?
            .strip_prefix(PROTO)?
            .strip_prefix(" CHECK ")
            .and_then(parse_number)?;
        Some(match &self.latest {
            Some(b) => b.response_to(v),
            None => format!("{PROTO} CURRENT 0\n").into_bytes(),
        })
    }
}

fn handle(catalog: &Catalog, stream: TcpStream) -> io::Result<()> {
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_write_timeout(Some(IO_TIMEOUT))?;
    let mut reader = BufReader::new(stream.try_clone()?).take(MAX_LINE);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut stream = stream;
    match catalog.respond(&line) {
        Some(resp) => stream.write_all(&resp),
        None => {
            log::warn!("bad request {:?}", line.trim_end());
            Ok(())
        }
    }
}

/// Accepts clients on `listener` until `shutdown` is set.
pub fn serve(listener: TcpListener, catalog: Arc<Catalog>, shutdown: &AtomicBool) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    while !shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                stream.set_nonblocking(false)?;
                let catalog = Arc::clone(&catalog);
                std::thread::spawn(move || {
                    if let Err(e) = handle(&catalog, stream) {
                        log::warn!("client {peer}: {e}");
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(20)),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("signature server i/o: {0}")]
    Io(#[from] io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("response ended early")]
    Truncated,
    #[error("digest mismatch")]
    DigestMismatch,
    #[error("served bundle does not parse: {0}")]
    Bundle(#[from] BundleError),
}

/// Decimal without sign or leading zeros.
fn parse_number(s: &str) -> Option<u64> {
    let canonical = !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'));
    canonical.then(|| s.parse().ok()).flatten()
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String, FetchError> {
    let mut buf = Vec::new();
    r.take(MAX_LINE).read_until(b'\n', &mut buf)?;
    if buf.last() != Some(&b'\n') {
        return Err(if (buf.len() as u64) < MAX_LINE {
            FetchError::Truncated
        } else {
            FetchError::Protocol("line too long".into())
        });
    }
    buf.pop();
    String::from_utf8(buf).map_err(|_| FetchError::Protocol("line is not UTF-8".into()))
}

/// Reads a server response to `CHECK current`.
pub fn read_response<R: BufRead>(r: &mut R, current: u64) -> Result<Option<SignatureBundle>, FetchError> {
    let line = read_line(r)?;
    let m = line
        .strip_prefix(PROTO)
        .and_then(|s| s.strip_prefix(" CURRENT "))
        .and_then(parse_number)
        .ok_or_else(|| FetchError::Protocol(format!("expected CURRENT, got {line:?}")))?;
    if m <= current {
        return Ok(None);
    }
    let line = read_line(r)?;
    let parts: Vec<&str> = line.split(' ').collect();
    let (version, len, digest) = match parts.as_slice() {
        ["BEGIN", v, n, d] => (parse_number(v), parse_number(n), *d),
        _ => return Err(FetchError::Protocol(format!("expected BEGIN, got {line:?}"))),
    };
    if version != Some(m) {
        return Err(FetchError::Protocol("BEGIN version differs from CURRENT".into()));
    }
    let len = len
        .filter(|&n| n as usize <= MAX_BUNDLE)
        .ok_or_else(|| FetchError::Protocol("bad bundle length".into()))? as usize;
    let digest: [u8; 32] = (digest.len() == 64 && digest.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')))
        .then(|| hex::decode(digest).ok())
        .flatten()
        .and_then(|d| d.try_into().ok())
        .ok_or_else(|| FetchError::Protocol("bad digest".into()))?;

    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FetchError::Truncated,
        _ => FetchError::Io(e),
    })?;
    let mut trailer = [0u8; 5];
    r.read_exact(&mut trailer).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FetchError::Truncated,
        _ => FetchError::Io(e),
    })?;
    if &trailer != b"\nEND\n" {
        return Err(FetchError::Protocol("missing END".into()));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(FetchError::Protocol("data after END".into()));
    }
    let actual: [u8; 32] = Sha256::digest(&bytes).into();
    if actual != digest {
        return Err(FetchError::DigestMismatch);
    }
    Ok(Some(SignatureBundle::from_bytes(m, bytes)?))
}

/// Asks the server at `addr` for anything newer than `current`.
pub fn check_and_fetch(current: u64, addr: SocketAddr) -> Result<Option<SignatureBundle>, FetchError> {
    let mut stream = TcpStream::connect_timeout(&addr, IO_TIMEOUT)?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.write_all(format!("{PROTO} CHECK {current}\n").as_bytes())?;
    stream.flush()?;
    read_response(&mut BufReader::new(stream), current)
}
