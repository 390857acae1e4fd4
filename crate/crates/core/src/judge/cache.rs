//! Content-addressed verdict cache: a directory of JSONL shards keyed by
//! request hash. Hits are answered from memory without touching the inner
//! judge, so a warmed cache makes pipeline re-runs byte-identical and
//! network-free.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Judge, JudgeError, JudgeRequest, JudgeVerdict};

#[derive(Serialize, Deserialize)]
struct CacheLine {
    hash: String,
    verdict: JudgeVerdict,
}

pub struct CachedJudge<J> {
    inner: J,
    dir: PathBuf,
    entries: Mutex<HashMap<String, JudgeVerdict>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<J: Judge> CachedJudge<J> {
    pub fn open(inner: J, dir: impl Into<PathBuf>) -> Result<Self, JudgeError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut entries = HashMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().map(|e| e == "jsonl").unwrap_or(false) {
                for line in fs::read_to_string(&path)?.lines() {
                    if let Ok(parsed) = serde_json::from_str::<CacheLine>(line) {
                        entries.insert(parsed.hash, parsed.verdict);
                    }
                }
            }
        }
        Ok(Self {
            inner,
            dir,
            entries: Mutex::new(entries),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn persist(&self, hash: &str, verdict: &JudgeVerdict) -> Result<(), JudgeError> {
        // Shard by hash prefix; a whole line is appended in one write.
        let shard = self.dir.join(format!("{}.jsonl", &hash[..2]));
        let line = serde_json::to_string(&CacheLine {
            hash: hash.to_string(),
            verdict: verdict.clone(),
        })
        .expect("verdict serializes");
        let mut f = fs::OpenOptions::new().create(true).append(true).open(shard)?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}

impl<J: Judge> Judge for CachedJudge<J> {
    fn complete(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        let hash = req.request_hash();
        if let Some(v) = self.entries.lock().unwrap().get(&hash) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(v.clone());
        }
        let verdict = self.inner.complete(req)?;
        self.persist(&hash, &verdict)?;
        self.entries
            .lock()
            .unwrap()
            .insert(hash, verdict.clone());
        self.misses.fetch_add(1, Ordering::Relaxed);
        Ok(verdict)
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::mock::MockJudge;
    use crate::judge::{JudgeOps, JudgeTask, ParsedVerdict};
    use std::sync::atomic::AtomicUsize;

    struct Counting {
        inner: MockJudge,
        calls: AtomicUsize,
    }
    impl Judge for Counting {
        fn complete(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.complete(req)
        }
        fn model_name(&self) -> &str {
            "mock"
        }
    }

    #[test]
    fn repeat_calls_hit_cache_without_inner_calls() {
        let dir = tempfile::tempdir().unwrap();
        let counting = Counting {
            inner: MockJudge::new(),
            calls: AtomicUsize::new(0),
        };
        let cached = CachedJudge::open(counting, dir.path().join("cache")).unwrap();
        let ops = JudgeOps::new(&cached);
        let first = ops.compare("a b c", "a b c").unwrap();
        let second = ops.compare("a b c", "a b c").unwrap();
        assert_eq!(first, second);
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 1);
        assert_eq!(cached.hits(), 1);
    }

    #[test]
    fn cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache");
        let req = JudgeRequest {
            task: JudgeTask::Paraphrase,
            payloads: vec!["The tide of Korel is high.".into()],
            temperature: 0.7,
            seed: 9,
            model: "mock".into(),
        };
        let v1 = {
            let cached = CachedJudge::open(MockJudge::new(), &path).unwrap();
            cached.complete(&req).unwrap()
        };
        let counting = Counting {
            inner: MockJudge::new(),
            calls: AtomicUsize::new(0),
        };
        let cached = CachedJudge::open(counting, &path).unwrap();
        let v2 = cached.complete(&req).unwrap();
        assert_eq!(v1.raw_text, v2.raw_text);
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 0);
        match v2.parsed {
            Some(ParsedVerdict::Texts(_)) => {}
            other => panic!("unexpected parse {other:?}"),
        }
    }
}
