//! Cold-data repository: an object-store-like key/blob interface backed by a
//! local directory (or memory for pure simulation runs), with an
//! asynchronous bounded write queue drained by a background writer.
//!
//! Every ingested blob lands here regardless of hot/cold classification, so
//! the cache layers can always fall back to a re-fetch.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, SyncSender};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;

use thiserror::Error;

use crate::model::{BlobKind, BlobRecord, CacheKey, ClientId, MetadataRecord, RoundId};

/// Default bound on queued, not-yet-written blobs; senders block beyond it.
pub const DEFAULT_QUEUE_DEPTH: usize = 1024;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("key not found: {0}")]
    NotFound(CacheKey),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("background write failed: {0}")]
    WriteFailed(String),
    #[error("malformed blob data: {0}")]
    Codec(String),
    #[error("blob key does not match put key")]
    KeyMismatch,
    #[error("store is shut down")]
    Closed,
}

/// Monotonic operation counters, feeding the cost model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub puts: u64,
    pub gets: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

#[derive(Default)]
struct Counters {
    puts: AtomicU64,
    gets: AtomicU64,
    bytes_in: AtomicU64,
    bytes_out: AtomicU64,
}

// Serialized form: weights length, weights, accounted size, metadata JSON
// length, metadata JSON. All integers little-endian; the JSON is canonical
// (sorted keys) so encoding is bit-exact across platforms.
pub fn encode_blob(blob: &BlobRecord) -> Vec<u8> {
    let meta = serde_json::to_vec(&blob.meta).expect("metadata serializes");
    let mut buf = Vec::with_capacity(16 + blob.weights.len() * 8 + meta.len());
    buf.extend_from_slice(&(blob.weights.len() as u64).to_le_bytes());
    for w in &blob.weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf.extend_from_slice(&blob.size_bytes.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf
}

pub fn decode_blob(key: &CacheKey, bytes: &[u8]) -> Result<BlobRecord, StoreError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], StoreError> {
        let end = *pos + n;
        let slice = bytes.get(*pos..end).ok_or_else(|| StoreError::Codec("truncated".into()))?;
        *pos = end;
        Ok(slice)
    };
    let n = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    if n > bytes.len() / 8 {
        return Err(StoreError::Codec(format!("weight count {n} exceeds payload")));
    }
    let mut weights = Vec::with_capacity(n);
    for _ in 0..n {
        weights.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
    }
    let size_bytes = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let mlen = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let meta: MetadataRecord = serde_json::from_slice(take(&mut pos, mlen)?)
        .map_err(|e| StoreError::Codec(e.to_string()))?;
    Ok(BlobRecord { key: key.clone(), weights, size_bytes, meta })
}

enum Backend {
    Dir(PathBuf),
    Memory(Mutex<HashMap<CacheKey, Vec<u8>>>),
}

fn encode_component(s: &str) -> String {
    if s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-') {
        s.to_string()
    } else {
        let mut out = String::with_capacity(s.len() * 3);
        for b in s.bytes() {
            if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' {
                out.push(b as char);
            } else {
                out.push_str(&format!("%{b:02X}"));
            }
        }
        out
    }
}

fn decode_component(s: &str) -> Option<String> {
    let mut out = Vec::with_capacity(s.len());
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

impl Backend {
    fn blob_path(root: &Path, key: &CacheKey) -> PathBuf {
        root.join(key.round.to_string())
            .join(format!("{}.{}", encode_component(key.client.as_str()), key.kind.token()))
    }

    fn write(&self, key: &CacheKey, bytes: &[u8], meta_json: &[u8]) -> Result<(), StoreError> {
        match self {
            Backend::Dir(root) => {
                let path = Self::blob_path(root, key);
                fs::create_dir_all(path.parent().unwrap())?;
                fs::write(&path, bytes)?;
                // sidecar with the human-readable metadata
                fs::write(path.with_extension(format!("{}.meta.json", key.kind.token())), meta_json)?;
                Ok(())
            }
            Backend::Memory(map) => {
                map.lock().unwrap().insert(key.clone(), bytes.to_vec());
                Ok(())
            }
        }
    }

    fn read(&self, key: &CacheKey) -> Result<Option<Vec<u8>>, StoreError> {
        match self {
            Backend::Dir(root) => match fs::read(Self::blob_path(root, key)) {
                Ok(bytes) => Ok(Some(bytes)),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(e.into()),
            },
            Backend::Memory(map) => Ok(map.lock().unwrap().get(key).cloned()),
        }
    }

    fn list(&self, round: RoundId) -> Result<BTreeSet<CacheKey>, StoreError> {
        match self {
            Backend::Dir(root) => {
                let dir = root.join(round.to_string());
                let mut keys = BTreeSet::new();
                let entries = match fs::read_dir(&dir) {
                    Ok(e) => e,
                    Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(keys),
                    Err(e) => return Err(e.into()),
                };
                for entry in entries {
                    let name = entry?.file_name();
                    let name = name.to_string_lossy();
                    if name.ends_with(".meta.json") {
                        continue;
                    }
                    let Some((client_part, ext)) = name.rsplit_once('.') else { continue };
                    let Some(kind) = BlobKind::from_token(ext) else { continue };
                    let Some(client) = decode_component(client_part) else { continue };
                    if let Ok(client) = ClientId::new(client) {
                        keys.insert(CacheKey { client, round, kind });
                    }
                }
                Ok(keys)
            }
            Backend::Memory(map) => Ok(map
                .lock()
                .unwrap()
                .keys()
                .filter(|k| k.round == round)
                .cloned()
                .collect()),
        }
    }
}

enum WriteCmd {
    Put { key: CacheKey, seq: u64 },
    Flush(SyncSender<()>),
}

struct Pending {
    blob: Arc<BlobRecord>,
    seq: u64,
}

/// The persistent store. `put` enqueues onto a bounded queue drained by one
/// background writer; queued blobs are already visible to `get`/`list`, and
/// `flush` is a barrier guaranteeing they reached the backend.
pub struct PersistentStore {
    backend: Arc<Backend>,
    pending: Arc<Mutex<HashMap<CacheKey, Pending>>>,
    write_error: Arc<Mutex<Option<String>>>,
    tx: Mutex<Option<SyncSender<WriteCmd>>>,
    writer: Mutex<Option<JoinHandle<()>>>,
    counters: Counters,
    seq: AtomicU64,
}

impl PersistentStore {
    /// Directory-backed store rooted at `root` (config key `store.root`).
    pub fn open_dir(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self::start(Backend::Dir(root), DEFAULT_QUEUE_DEPTH))
    }

    /// Purely in-memory store, used when no `store.root` is configured.
    pub fn in_memory() -> Self {
        Self::start(Backend::Memory(Mutex::new(HashMap::new())), DEFAULT_QUEUE_DEPTH)
    }

    pub fn with_queue_depth(self, depth: usize) -> Self {
        // restart the writer with the requested bound
        self.shutdown();
        let backend = Arc::clone(&self.backend);
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        let handle = Self::spawn_writer(
            backend,
            Arc::clone(&self.pending),
            Arc::clone(&self.write_error),
            rx,
        );
        *self.tx.lock().unwrap() = Some(tx);
        *self.writer.lock().unwrap() = Some(handle);
        self
    }

    fn start(backend: Backend, depth: usize) -> Self {
        let backend = Arc::new(backend);
        let pending = Arc::new(Mutex::new(HashMap::new()));
        let write_error = Arc::new(Mutex::new(None));
        let (tx, rx) = mpsc::sync_channel(depth);
        let handle = Self::spawn_writer(
            Arc::clone(&backend),
            Arc::clone(&pending),
            Arc::clone(&write_error),
            rx,
        );
        Self {
            backend,
            pending,
            write_error,
            tx: Mutex::new(Some(tx)),
            writer: Mutex::new(Some(handle)),
            counters: Counters::default(),
            seq: AtomicU64::new(0),
        }
    }

    fn spawn_writer(
        backend: Arc<Backend>,
        pending: Arc<Mutex<HashMap<CacheKey, Pending>>>,
        write_error: Arc<Mutex<Option<String>>>,
        rx: Receiver<WriteCmd>,
    ) -> JoinHandle<()> {
        std::thread::spawn(move || {
            while let Ok(cmd) = rx.recv() {
                match cmd {
                    WriteCmd::Put { key, seq } => {
                        let blob = match pending.lock().unwrap().get(&key) {
                            Some(p) => Arc::clone(&p.blob),
                            None => continue, // already written by a newer command
                        };
                        let bytes = encode_blob(&blob);
                        let meta_json = serde_json::to_vec_pretty(&blob.meta).unwrap_or_default();
                        if let Err(e) = backend.write(&key, &bytes, &meta_json) {
                            write_error.lock().unwrap().get_or_insert(e.to_string());
                        }
                        let mut pending = pending.lock().unwrap();
                        if pending.get(&key).is_some_and(|p| p.seq == seq) {
                            pending.remove(&key);
                        }
                    }
                    WriteCmd::Flush(ack) => {
                        let _ = ack.send(());
                    }
                }
            }
        })
    }

    /// Enqueues a durable write. Blocks when the queue is full. The blob is
    /// immediately visible to `get` and `list`.
    pub fn put(&self, key: &CacheKey, blob: BlobRecord) -> Result<(), StoreError> {
        if blob.key != *key {
            return Err(StoreError::KeyMismatch);
        }
        self.check_write_error()?;
        let encoded_len = 24 + blob.weights.len() as u64 * 8;
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        self.pending
            .lock()
            .unwrap()
            .insert(key.clone(), Pending { blob: Arc::new(blob), seq });
        let tx = self.tx.lock().unwrap().clone();
        match tx {
            Some(tx) => tx
                .send(WriteCmd::Put { key: key.clone(), seq })
                .map_err(|_| StoreError::Closed)?,
            None => return Err(StoreError::Closed),
        }
        self.counters.puts.fetch_add(1, Ordering::Relaxed);
        self.counters.bytes_in.fetch_add(encoded_len, Ordering::Relaxed);
        Ok(())
    }

    /// Byte-identical read-back of the stored blob, or `NotFound` signalling
    /// a cold miss the caller must surface.
    pub fn get(&self, key: &CacheKey) -> Result<BlobRecord, StoreError> {
        let blob = self.fetch(key)?.ok_or_else(|| StoreError::NotFound(key.clone()))?;
        self.counters.gets.fetch_add(1, Ordering::Relaxed);
        self.counters
            .bytes_out
            .fetch_add(24 + blob.weights.len() as u64 * 8, Ordering::Relaxed);
        Ok(blob)
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.fetch(key).ok().flatten().is_some()
    }

    fn fetch(&self, key: &CacheKey) -> Result<Option<BlobRecord>, StoreError> {
        if let Some(p) = self.pending.lock().unwrap().get(key) {
            return Ok(Some((*p.blob).clone()));
        }
        match self.backend.read(key)? {
            Some(bytes) => Ok(Some(decode_blob(key, &bytes)?)),
            None => Ok(None),
        }
    }

    /// Exact key set stored for one round, including queued writes.
    pub fn list(&self, round: RoundId) -> Result<BTreeSet<CacheKey>, StoreError> {
        let mut keys = self.backend.list(round)?;
        keys.extend(self.pending.lock().unwrap().keys().filter(|k| k.round == round).cloned());
        Ok(keys)
    }

    /// Barrier: returns once every previously enqueued write reached the
    /// backend, propagating the first background write error if any.
    pub fn flush(&self) -> Result<(), StoreError> {
        let tx = self.tx.lock().unwrap().clone();
        if let Some(tx) = tx {
            let (ack_tx, ack_rx) = mpsc::sync_channel(1);
            tx.send(WriteCmd::Flush(ack_tx)).map_err(|_| StoreError::Closed)?;
            ack_rx.recv().map_err(|_| StoreError::Closed)?;
        }
        self.check_write_error()
    }

    fn check_write_error(&self) -> Result<(), StoreError> {
        match self.write_error.lock().unwrap().take() {
            Some(msg) => Err(StoreError::WriteFailed(msg)),
            None => Ok(()),
        }
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            puts: self.counters.puts.load(Ordering::Relaxed),
            gets: self.counters.gets.load(Ordering::Relaxed),
            bytes_in: self.counters.bytes_in.load(Ordering::Relaxed),
            bytes_out: self.counters.bytes_out.load(Ordering::Relaxed),
        }
    }

    fn shutdown(&self) {
        self.tx.lock().unwrap().take();
        if let Some(handle) = self.writer.lock().unwrap().take() {
            let _ = handle.join();
        }
    }
}

impl Drop for PersistentStore {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl std::fmt::Debug for PersistentStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PersistentStore").field("stats", &self.stats()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClientId;

    use proptest::prelude::*;

    fn key(client: &str, round: u64, kind: BlobKind) -> CacheKey {
        CacheKey { client: ClientId::new(client).unwrap(), round: RoundId::new(round), kind }
    }

    fn blob(k: &CacheKey, weights: Vec<f64>) -> BlobRecord {
        BlobRecord {
            key: k.clone(),
            weights,
            size_bytes: 1024,
            meta: MetadataRecord {
                round: k.round,
                client: Some(k.client.clone()),
                ..Default::default()
            },
        }
    }

    #[test]
    fn round_trip_after_flush_dir_backend() {
        let dir = tempfile::tempdir().unwrap();
        let store = PersistentStore::open_dir(dir.path()).unwrap();
        let k = key("c1", 0, BlobKind::ModelUpdate);
        let b = blob(&k, vec![1.0, -2.5, 3.25]);
        store.put(&k, b.clone()).unwrap();
        store.flush().unwrap();
        assert!(store.pending.lock().unwrap().is_empty());
        assert_eq!(store.get(&k).unwrap(), b);
        // a second store over the same root sees the same bytes
        drop(store);
        let reopened = PersistentStore::open_dir(dir.path()).unwrap();
        assert_eq!(reopened.get(&k).unwrap(), b);
    }

    #[test]
    fn queued_put_is_visible_before_flush() {
        let store = PersistentStore::in_memory();
        let k = key("c9", 3, BlobKind::Metadata);
        store.put(&k, blob(&k, vec![])).unwrap();
        assert!(store.contains(&k));
        assert!(store.list(RoundId::new(3)).unwrap().contains(&k));
    }

    #[test]
    fn overwrite_is_last_writer_wins() {
        let dir = tempfile::tempdir().unwrap();
        let store = PersistentStore::open_dir(dir.path()).unwrap();
        let k = key("c1", 5, BlobKind::ModelUpdate);
        store.put(&k, blob(&k, vec![1.0])).unwrap();
        store.put(&k, blob(&k, vec![2.0, 2.0])).unwrap();
        store.flush().unwrap();
        assert_eq!(store.get(&k).unwrap().weights, vec![2.0, 2.0]);
    }

    #[test]
    fn get_of_missing_key_is_not_found() {
        let store = PersistentStore::in_memory();
        let k = key("nope", 1, BlobKind::ModelUpdate);
        assert!(matches!(store.get(&k), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn list_returns_exactly_the_round_keys() {
        let dir = tempfile::tempdir().unwrap();
        let store = PersistentStore::open_dir(dir.path()).unwrap();
        // oracle: remember exactly what was inserted per round
        let mut round0 = BTreeSet::new();
        for i in 0..1000 {
            let round = i % 4;
            let k = key(&format!("c{i}"), round, BlobKind::ModelUpdate);
            store.put(&k, blob(&k, vec![i as f64])).unwrap();
            if round == 0 {
                round0.insert(k);
            }
        }
        store.flush().unwrap();
        assert_eq!(store.list(RoundId::new(0)).unwrap(), round0);
        assert!(store.list(RoundId::new(99)).unwrap().is_empty());
    }

    #[test]
    fn hostile_client_ids_are_path_safe() {
        let dir = tempfile::tempdir().unwrap();
        let store = PersistentStore::open_dir(dir.path()).unwrap();
        let k = key("../../etc/passwd", 2, BlobKind::ModelUpdate);
        let b = blob(&k, vec![7.0]);
        store.put(&k, b.clone()).unwrap();
        store.flush().unwrap();
        assert_eq!(store.get(&k).unwrap(), b);
        assert_eq!(store.list(RoundId::new(2)).unwrap().len(), 1);
        assert_eq!(store.list(RoundId::new(2)).unwrap().iter().next().unwrap(), &k);
    }

    #[test]
    fn put_with_mismatched_key_is_rejected() {
        let store = PersistentStore::in_memory();
        let k1 = key("a", 0, BlobKind::ModelUpdate);
        let k2 = key("b", 0, BlobKind::ModelUpdate);
        assert!(matches!(store.put(&k1, blob(&k2, vec![])), Err(StoreError::KeyMismatch)));
    }

    #[test]
    fn write_failures_surface_on_flush() {
        let dir = tempfile::tempdir().unwrap();
        let store = PersistentStore::open_dir(dir.path()).unwrap();
        // remove the root out from under the writer and make a file collide
        // with the round directory
        fs::remove_dir_all(dir.path()).unwrap();
        fs::write(dir.path(), b"").ok();
        let k = key("c1", 0, BlobKind::ModelUpdate);
        store.put(&k, blob(&k, vec![1.0])).unwrap();
        let flushed = store.flush();
        if fs::metadata(dir.path()).map(|m| m.is_file()).unwrap_or(false) {
            assert!(matches!(flushed, Err(StoreError::WriteFailed(_))));
        }
    }

    #[test]
    fn concurrent_puts_and_reads() {
        let store = Arc::new(PersistentStore::in_memory());
        let mut handles = Vec::new();
        for t in 0..4 {
            let store = Arc::clone(&store);
            handles.push(std::thread::spawn(move || {
                for i in 0..200 {
                    let k = key(&format!("t{t}-{i}"), i % 7, BlobKind::ModelUpdate);
                    store.put(&k, blob(&k, vec![t as f64, i as f64])).unwrap();
                    assert!(store.contains(&k));
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        store.flush().unwrap();
        assert_eq!(store.stats().puts, 800);
        let total: usize = (0..7).map(|r| store.list(RoundId::new(r)).unwrap().len()).sum();
        assert_eq!(total, 800);
    }

    #[test]
    fn stats_are_monotonic() {
        let store = PersistentStore::in_memory();
        let k = key("c1", 0, BlobKind::ModelUpdate);
        let before = store.stats();
        store.put(&k, blob(&k, vec![1.0])).unwrap();
        store.get(&k).unwrap();
        let after = store.stats();
        assert!(after.puts > before.puts && after.gets > before.gets);
        assert!(after.bytes_in > 0 && after.bytes_out > 0);
    }

    proptest! {
        #[test]
        fn codec_round_trips(
            weights in proptest::collection::vec(-1e6f64..1e6, 0..64),
            size in 1u64..1_000_000_000,
            lr in 0.0001f64..1.0,
        ) {
            let k = key("cX", 7, BlobKind::ModelUpdate);
            let mut meta = MetadataRecord { round: k.round, client: Some(k.client.clone()), ..Default::default() };
            meta.hyperparameters.insert("lr".into(), lr);
            let b = BlobRecord { key: k.clone(), weights, size_bytes: size, meta };
            let decoded = decode_blob(&k, &encode_blob(&b)).unwrap();
            prop_assert_eq!(decoded, b);
        }
    }
}
