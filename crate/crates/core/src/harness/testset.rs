use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{read_batch_csv, sample_batch, write_batch_csv, NetworkState};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

pub const TEST_SET_FORMAT: &str = "cecil-testset 1";

/// Sidecar written next to a test-set CSV.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSetManifest {
    pub format: String,
    pub n: usize,
    pub size: usize,
    pub seed: u64,
}

/// `tests.csv` → `tests.manifest.toml`
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.toml")
}

/// The states a test set with this seed contains.
pub fn generate_test_set(n: usize, size: usize, seed: u64) -> Vec<NetworkState> {
    sample_batch(size, n, &mut rng::stream(seed, streams::TEST_SET))
}

/// Samples a test set, writes it as CSV (one row-major matrix per row) and
/// records the seed in the sidecar manifest.
pub fn make_test_set(n: usize, size: usize, seed: u64, path: impl AsRef<Path>) -> Result<Vec<NetworkState>> {
    if n == 0 || size == 0 {
        return Err(Error::config("test set needs N >= 1 and at least one sample"));
    }
    let path = path.as_ref();
    let states = generate_test_set(n, size, seed);
    write_batch_csv(File::create(path)?, &states)?;
    let manifest = TestSetManifest {
        format: TEST_SET_FORMAT.into(),
        n,
        size,
        seed,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(manifest_path(path), text)?;
    Ok(states)
}

/// Reads a test set and its manifest, checking that they agree.
pub fn load_test_set(path: impl AsRef<Path>) -> Result<(Vec<NetworkState>, TestSetManifest)> {
    let path = path.as_ref();
    let side = manifest_path(path);
    let text = fs::read_to_string(&side)?;
    let manifest: TestSetManifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    if manifest.format != TEST_SET_FORMAT {
        return Err(Error::Format(format!("unsupported test set format {:?}", manifest.format)));
    }
    let states = read_batch_csv(File::open(path)?)?;
    let n = states.first().map_or(0, NetworkState::size);
    if states.len() != manifest.size || n != manifest.n {
        return Err(Error::Format(format!(
            "{} holds {} states of size {n}, manifest says {} of size {}",
            path.display(),
            states.len(),
            manifest.size,
            manifest.n
        )));
    }
    Ok((states, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tests.csv");
        let made = make_test_set(3, 40, 9, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 41);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 9);
        let (loaded, manifest) = load_test_set(&path).unwrap();
        assert_eq!(loaded, made);
        assert_eq!(loaded, generate_test_set(manifest.n, manifest.size, manifest.seed));
        assert_eq!(manifest.seed, 9);
    }

    #[test]
    fn manifest_must_agree() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        make_test_set(2, 5, 1, &path).unwrap();
        fs::write(
            manifest_path(&path),
            "format = \"cecil-testset 1\"\nn = 2\nsize = 6\nseed = 1\n",
        )
        .unwrap();
        assert!(matches!(load_test_set(&path), Err(Error::Format(_))));
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(manifest_path(Path::new("a/b.csv")), PathBuf::from("a/b.manifest.toml"));
    }
}
