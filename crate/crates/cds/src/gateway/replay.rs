//! Fixture-backed chat clients for offline, reproducible runs.
//!
//! A fixture directory holds one JSON file per request, named by the
//! request digest: `<digest>.json` containing
//! `{"completions": [...], "model_id": "..."}`. [`ReplayClient`] serves
//! requests from such a directory and fails on anything unseen, which
//! makes a pipeline run a pure function of its inputs and seed.
//! [`RecordingClient`] wraps a live client and writes the fixture for
//! every request it forwards.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{request_digest, ChatClient, ChatRequest, ChatResponse, ClientError};

/// On-disk fixture record.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Fixture {
    completions: Vec<String>,
    #[serde(default = "default_model_id")]
    model_id: String,
}

fn default_model_id() -> String {
    "replay".to_string()
}

/// Serves completions from recorded fixtures; offline and deterministic.
pub struct ReplayClient {
    dir: PathBuf,
}

impl ReplayClient {
    /// Open a fixture directory. The directory must exist; individual
    /// fixtures are read lazily per request.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ClientError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(ClientError::Transport {
                message: format!("fixture directory {} does not exist", dir.display()),
                transient: false,
            });
        }
        Ok(Self { dir })
    }

    fn fixture_path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }
}

impl ChatClient for ReplayClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let digest = request_digest(request);
        let path = self.fixture_path(&digest);
        let text = fs::read_to_string(&path).map_err(|e| ClientError::Transport {
            message: format!(
                "no fixture {digest} in {} ({e}); first user message: {:?}",
                self.dir.display(),
                request
                    .messages
                    .iter()
                    .find(|m| m.role == super::Role::User)
                    .map(|m| m.content.chars().take(80).collect::<String>())
                    .unwrap_or_default()
            ),
            transient: false,
        })?;
        let fixture: Fixture = serde_json::from_str(&text).map_err(|e| ClientError::Malformed {
            message: format!("fixture {digest} is not valid JSON: {e}"),
        })?;
        Ok(ChatResponse {
            completions: fixture.completions,
            model_id: fixture.model_id,
            usage: None,
        })
    }
}

/// Wraps a live client and records every response as a replay fixture.
///
/// Existing fixtures are left untouched, so re-recording a run only adds
/// files for requests that were never seen before.
pub struct RecordingClient {
    inner: Box<dyn ChatClient>,
    dir: PathBuf,
    // serializes fixture writes so concurrent identical requests don't race
    write_lock: Mutex<()>,
}

impl RecordingClient {
    pub fn new(inner: Box<dyn ChatClient>, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir, write_lock: Mutex::new(()) })
    }

    fn record(&self, digest: &str, response: &ChatResponse) -> std::io::Result<()> {
        let _guard = self.write_lock.lock().expect("fixture write lock");
        let path = self.dir.join(format!("{digest}.json"));
        if path.exists() {
            return Ok(());
        }
        let fixture = Fixture {
            completions: response.completions.clone(),
            model_id: response.model_id.clone(),
        };
        let text = serde_json::to_string_pretty(&fixture).expect("fixture serializes");
        fs::write(path, text + "\n")
    }
}

impl ChatClient for RecordingClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let response = self.inner.complete(request)?;
        let digest = request_digest(request);
        self.record(&digest, &response).map_err(|e| ClientError::Transport {
            message: format!("failed to write fixture {digest}: {e}"),
            transient: false,
        })?;
        Ok(response)
    }
}

/// Write a fixture for `request` by hand; used to seed fixture sets in
/// tests and examples without a live endpoint.
pub fn write_fixture(
    dir: &Path,
    request: &ChatRequest,
    completions: Vec<String>,
    model_id: &str,
) -> std::io::Result<String> {
    fs::create_dir_all(dir)?;
    let digest = request_digest(request);
    let fixture = Fixture { completions, model_id: model_id.to_string() };
    let text = serde_json::to_string_pretty(&fixture).expect("fixture serializes");
    fs::write(dir.join(format!("{digest}.json")), text + "\n")?;
    Ok(digest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Message, SamplingParams};
    use tempfile::tempdir;

    fn request(content: &str) -> ChatRequest {
        ChatRequest::new(vec![Message::user(content)], SamplingParams::evaluation(), 1).unwrap()
    }

    #[test]
    fn replay_round_trips_recorded_fixture() {
        let dir = tempdir().unwrap();
        let req = request("what is 2+2?");
        write_fixture(dir.path(), &req, vec!["#### 4".into()], "test-model").unwrap();
        let client = ReplayClient::open(dir.path()).unwrap();
        let resp = client.complete(&req).unwrap();
        assert_eq!(resp.completions, vec!["#### 4".to_string()]);
        assert_eq!(resp.model_id, "test-model");
    }

    #[test]
    fn missing_fixture_is_non_transient() {
        let dir = tempdir().unwrap();
        let client = ReplayClient::open(dir.path()).unwrap();
        let err = client.complete(&request("never recorded")).unwrap_err();
        match err {
            ClientError::Transport { transient, message } => {
                assert!(!transient);
                assert!(message.contains("no fixture"));
            }
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn recording_then_replaying_matches_live_response() {
        struct Canned;
        impl ChatClient for Canned {
            fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, ClientError> {
                Ok(ChatResponse {
                    completions: vec!["a".into(), "b".into()],
                    model_id: "canned".into(),
                    usage: None,
                })
            }
        }
        let dir = tempdir().unwrap();
        let recorder = RecordingClient::new(Box::new(Canned), dir.path()).unwrap();
        let req = request("record me");
        let live = recorder.complete(&req).unwrap();
        let replay = ReplayClient::open(dir.path()).unwrap();
        let replayed = replay.complete(&req).unwrap();
        assert_eq!(replayed.completions, live.completions);
        assert_eq!(replayed.model_id, "canned");
    }

    #[test]
    fn open_requires_existing_directory() {
        let dir = tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert!(ReplayClient::open(&missing).is_err());
    }
}
