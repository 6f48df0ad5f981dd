use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ChatRequest;

/// One-line metadata header preceding the raw reply in a cache file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub key: String,
    pub provider_id: String,
    pub model_id: String,
    pub request_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub header: CacheHeader,
    pub reply: String,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CacheFormatError {
    #[error("cache entry is not UTF-8")]
    NotUtf8,
    #[error("cache entry has no header line")]
    MissingHeader,
    #[error("bad cache header: {0}")]
    BadHeader(String),
}

impl CacheEntry {
    /// `<header json>\n<reply bytes>`; the reply is stored raw.
    pub fn encode(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        out.push_str(&self.reply);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CacheFormatError> {
        let text = std::str::from_utf8(bytes).map_err(|_| CacheFormatError::NotUtf8)?;
        let (head, reply) = text.split_once('\n').ok_or(CacheFormatError::MissingHeader)?;
        let header: CacheHeader = serde_json::from_str(head).map_err(|e| CacheFormatError::BadHeader(e.to_string()))?;
        Ok(Self {
            header,
            reply: reply.to_string(),
        })
    }
}

/// Content-addressed directory of replies, one `<key>.txt` file per entry.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    pub fn get(&self, key: &str) -> io::Result<Option<CacheEntry>> {
        let bytes = match fs::read(self.path_for(key)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        let entry = CacheEntry::decode(&bytes)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{key}: {e}")))?;
        if entry.header.key != key {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{key}: header names key {}", entry.header.key),
            ));
        }
        Ok(Some(entry))
    }

    pub fn put(&self, key: &str, request: &ChatRequest, reply: &str) -> io::Result<()> {
        let entry = CacheEntry {
            header: CacheHeader {
                key: key.to_string(),
                provider_id: request.provider_id.clone(),
                model_id: request.model_id.clone(),
                request_tag: request.request_tag.clone(),
            },
            reply: reply.to_string(),
        };
        self.write_entry(&entry)
    }

    /// Write via a temp file and rename so concurrent writers never expose a
    /// partial entry.
    pub fn write_entry(&self, entry: &CacheEntry) -> io::Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(entry.encode().as_bytes())?;
        tmp.flush()?;
        tmp.persist(self.path_for(&entry.header.key)).map_err(|e| e.error)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn missing_entry_is_none() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        assert!(cache.get("abc").unwrap().is_none());
    }

    #[test]
    fn header_without_newline_rejected() {
        assert_eq!(CacheEntry::decode(b"{\"key\":1}"), Err(CacheFormatError::MissingHeader));
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(reply in ".*", tag in "[a-z:_]{0,20}") {
            let entry = CacheEntry {
                header: CacheHeader {
                    key: "k".into(),
                    provider_id: "p".into(),
                    model_id: "m".into(),
                    request_tag: tag,
                },
                reply,
            };
            prop_assert_eq!(CacheEntry::decode(entry.encode().as_bytes()).unwrap(), entry);
        }
    }
}
