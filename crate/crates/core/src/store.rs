//! On-disk pool file and cross-process locking.
//!
//! The file is a JSON object `{schema_version, generation, rules}` plus a
//! `recency` map of per-rule write-back generations. Writers take an
//! exclusive lock on a sibling `<file>.lock` for the whole
//! load-modify-save cycle and replace the file atomically.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::pool::{GlobalRulePool, PoolEntry, DEFAULT_CAPACITY};
use crate::rule::{CompressionRule, RuleError};

pub const POOL_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("pool file {0} does not exist")]
    Missing(PathBuf),
    #[error("pool file {path} is corrupt at byte {offset}: {message}")]
    Corrupt {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("pool file {path} has schema_version {found}, expected {expected}")]
    SchemaMismatch {
        path: PathBuf,
        found: Value,
        expected: u64,
    },
    #[error("pool file {path}: rule #{index}: {source}")]
    BadRule {
        path: PathBuf,
        index: usize,
        #[source]
        source: RuleError,
    },
    #[error("pool file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PoolError + '_ {
    move |source| PoolError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Byte offset of a 1-based line/column position in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Parses pool file contents. `path` is only used in errors.
pub fn parse_pool(text: &str, path: &Path) -> Result<GlobalRulePool, PoolError> {
    let corrupt = |offset: usize, message: String| PoolError::Corrupt {
        path: path.to_path_buf(),
        offset,
        message,
    };
    let doc: Value = serde_json::from_str(text)
        .map_err(|e| corrupt(byte_offset(text, e.line(), e.column()), e.to_string()))?;
    let Value::Object(obj) = doc else {
        return Err(corrupt(0, "top level is not an object".into()));
    };
    let version = obj.get("schema_version").cloned().unwrap_or(Value::Null);
    if version.as_u64() != Some(POOL_SCHEMA_VERSION) {
        return Err(PoolError::SchemaMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: POOL_SCHEMA_VERSION,
        });
    }
    let generation = obj
        .get("generation")
        .and_then(Value::as_u64)
        .ok_or_else(|| corrupt(0, "`generation` must be a non-negative integer".into()))?;
    let capacity = match obj.get("capacity") {
        None => DEFAULT_CAPACITY,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| corrupt(0, "`capacity` must be a non-negative integer".into()))?
            as usize,
    };
    let rules = obj
        .get("rules")
        .and_then(Value::as_array)
        .ok_or_else(|| corrupt(0, "`rules` must be an array".into()))?;
    let recency = obj.get("recency").and_then(Value::as_object);

    let mut pool = GlobalRulePool::empty(capacity);
    pool.generation = generation;
    for (index, value) in rules.iter().enumerate() {
        let rule = CompressionRule::from_value(value).map_err(|source| PoolError::BadRule {
            path: path.to_path_buf(),
            index,
            source,
        })?;
        let last_write_back = recency
            .and_then(|m| m.get(&rule.rule_id))
            .and_then(Value::as_u64)
            .unwrap_or(0);
        pool.entries.insert(
            rule.rule_id.clone(),
            PoolEntry {
                rule,
                last_write_back,
            },
        );
    }
    Ok(pool)
}

/// Serializes a pool to its file form, rules in id order.
pub fn render_pool(pool: &GlobalRulePool) -> String {
    let rules: Vec<Value> = pool.rules().map(CompressionRule::to_value).collect();
    let recency: Map<String, Value> = pool
        .entries
        .iter()
        .map(|(id, e)| (id.clone(), json!(e.last_write_back)))
        .collect();
    let doc = json!({
        "schema_version": POOL_SCHEMA_VERSION,
        "generation": pool.generation(),
        "capacity": pool.capacity(),
        "rules": rules,
        "recency": recency,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("pool serializes");
    text.push('\n');
    text
}

/// Loads a pool file. A missing file yields the seed pool.
pub fn load_pool(path: &Path) -> Result<GlobalRulePool, PoolError> {
    match load_existing_pool(path) {
        Err(PoolError::Missing(_)) => Ok(GlobalRulePool::seeded()),
        other => other,
    }
}

/// Loads a pool file that must exist.
pub fn load_existing_pool(path: &Path) -> Result<GlobalRulePool, PoolError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(PoolError::Missing(path.to_path_buf())),
        Err(e) => return Err(io_err(path)(e)),
    };
    parse_pool(&text, path)
}

/// Writes the pool atomically: a temporary file in the same directory is
/// renamed over the target.
pub fn save_pool(pool: &GlobalRulePool, path: &Path) -> Result<(), PoolError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(path))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(render_pool(pool).as_bytes())
        .map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

/// A pool file shared by several processes.
#[derive(Debug, Clone)]
pub struct PoolStore {
    path: PathBuf,
}

impl PoolStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn lock_path(&self) -> PathBuf {
        let mut name = self.path.clone().into_os_string();
        name.push(".lock");
        PathBuf::from(name)
    }

    fn open_lock(&self) -> Result<File, PoolError> {
        let lock_path = self.lock_path();
        if let Some(dir) = lock_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(&self.path))?;
        }
        OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))
    }

    /// Loads under a shared lock; a missing file yields the seed pool.
    pub fn load(&self) -> Result<GlobalRulePool, PoolError> {
        let lock = self.open_lock()?;
        lock.lock_shared().map_err(io_err(&self.path))?;
        let pool = load_pool(&self.path);
        drop(lock);
        pool
    }

    /// Runs `f` on the current pool under the exclusive lock and saves the
    /// result.
    pub fn update<R>(&self, f: impl FnOnce(&mut GlobalRulePool) -> R) -> Result<R, PoolError> {
        let lock = self.open_lock()?;
        lock.lock().map_err(io_err(&self.path))?;
        let mut pool = load_pool(&self.path)?;
        let out = f(&mut pool);
        save_pool(&pool, &self.path)?;
        drop(lock);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::{RuleOutcome, WriteBackParams};

    #[test]
    fn fresh_directory_gives_seed_pool() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.json");
        let pool = load_pool(&path).unwrap();
        assert_eq!(pool.len(), 6);
        assert_eq!(pool.generation(), 0);
        assert!(matches!(load_existing_pool(&path), Err(PoolError::Missing(_))));
    }

    #[test]
    fn save_load_round_trip_keeps_recency() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/pool.json");
        let mut pool = GlobalRulePool::seeded();
        pool.write_back(
            &[RuleOutcome::success("seed_openssl", 2, 0.9)],
            &WriteBackParams::default(),
        );
        save_pool(&pool, &path).unwrap();
        let back = load_pool(&path).unwrap();
        assert_eq!(back, pool);
        assert_eq!(back.last_write_back("seed_openssl"), Some(1));
        assert_eq!(render_pool(&back), std::fs::read_to_string(&path).unwrap());
    }

    #[test]
    fn corrupt_file_names_offset() {
        let path = Path::new("p.json");
        let err = parse_pool("{\"schema_version\": 1,\n \"generation\": }", path).unwrap_err();
        match err {
            PoolError::Corrupt { offset, .. } => assert_eq!(offset, 37),
            other => panic!("{other:?}"),
        }
        let err = parse_pool("{\"schema_version\": 7, \"generation\": 0, \"rules\": []}", path).unwrap_err();
        assert!(matches!(err, PoolError::SchemaMismatch { .. }));
        let err = parse_pool(
            "{\"schema_version\": 1, \"generation\": 0, \"rules\": [{\"rule_id\": 3}]}",
            path,
        )
        .unwrap_err();
        assert!(matches!(err, PoolError::BadRule { index: 0, .. }));
    }

    #[test]
    fn update_is_locked_read_modify_write() {
        let dir = tempfile::tempdir().unwrap();
        let store = PoolStore::new(dir.path().join("pool.json"));
        let generation = store
            .update(|p| {
                p.write_back(
                    &[RuleOutcome::success("seed_git_noise", 1, 1.0)],
                    &WriteBackParams::default(),
                )
                .generation
            })
            .unwrap();
        assert_eq!(generation, 1);
        assert!(store.lock_path().ends_with("pool.json.lock"));
        assert_eq!(
            store.load().unwrap().get("seed_git_noise").unwrap().times_applied,
            11
        );
    }
}
