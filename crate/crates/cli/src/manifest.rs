//! Content-hash manifest of an output directory, in `sha256sum` format so
//! `sha256sum -c MANIFEST.sha256` verifies it.

use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "MANIFEST.sha256";

/// `(file name, hex digest)` for every regular file in `dir` except the
/// manifest, sorted by name.
pub fn entries(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !entry.file_type()?.is_file() || name == MANIFEST_NAME {
            continue;
        }
        let bytes = std::fs::read(entry.path()).with_context(|| format!("reading {}", entry.path().display()))?;
        out.push((name, hex::encode(Sha256::digest(&bytes))));
    }
    out.sort();
    Ok(out)
}

pub fn write(dir: &Path) -> Result<()> {
    let text: String = entries(dir)?.iter().map(|(name, hash)| format!("{hash}  {name}\n")).collect();
    std::fs::write(dir.join(MANIFEST_NAME), text).context("writing manifest")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_sorted_hashes_and_skips_itself() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), "b").unwrap();
        std::fs::write(dir.path().join("a.txt"), "").unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        write(dir.path()).unwrap();
        write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(
            text,
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855  a.txt\n\
             3e23e8160039594a33894f6564e1b1348bbd7a0088d42c4acb73eeaed59c009d  b.txt\n"
        );
    }
}
