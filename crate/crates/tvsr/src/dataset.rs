//! Synthetic datasets on disk: thin and thick volumes in the native container
//! plus a tab-separated manifest (`id, thin path, thick path, split`).

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use tvsr_core::synth::{assign_splits, gen_case, Acquisition, PhantomSpec, Split};

use crate::container::write_volume;
use crate::error::{read_file, write_file, Error, Result};

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThickMode {
    /// Simulated acquisition: z-blur, slab average and noise.
    Real,
    /// Decimation of the thin volume.
    Pseudo,
}

impl ThickMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real" => Some(ThickMode::Real),
            "pseudo" => Some(ThickMode::Pseudo),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    pub thin: PathBuf,
    pub thick: PathBuf,
    pub split: Split,
}

/// Train/validation/test counts: a fifth each for validation and test.
pub fn default_split(n: usize) -> (usize, usize, usize) {
    (n - 2 * (n / 5), n / 5, n / 5)
}

pub fn manifest_text(entries: &[Entry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\t{}\n", e.id, e.thin.display(), e.thick.display(), e.split.name()))
        .collect()
}

/// Generates `counts` cases under `out`, returning the manifest entries with
/// paths relative to `out`.
pub fn make_dataset(
    counts: (usize, usize, usize),
    spec: &PhantomSpec,
    acq: Acquisition,
    scale: usize,
    mode: ThickMode,
    out: &Path,
) -> Result<Vec<Entry>> {
    let n = counts.0 + counts.1 + counts.2;
    let splits = assign_splits(counts, spec.seed);
    let cases: Vec<_> = (0..n)
        .into_par_iter()
        .map(|id| gen_case(spec, scale, acq, id))
        .collect::<Result<_, _>>()?;
    let mut entries = Vec::with_capacity(n);
    for (case, split) in cases.into_iter().zip(splits) {
        let id = format!("{:04}", case.id);
        let thin = PathBuf::from("thin").join(format!("{id}.tvsr"));
        let thick = PathBuf::from("thick").join(format!("{id}.tvsr"));
        write_volume(&case.thin, &out.join(&thin))?;
        let t = match mode {
            ThickMode::Real => &case.real_thick,
            ThickMode::Pseudo => &case.pseudo_thick,
        };
        write_volume(t, &out.join(&thick))?;
        entries.push(Entry { id, thin, thick, split });
    }
    write_file(&out.join(MANIFEST), manifest_text(&entries).as_bytes())?;
    Ok(entries)
}

/// Reads a manifest; relative paths are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<Entry>> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| Error::Data(format!("{}: manifest is not UTF-8", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Data(format!("{}:{}: expected id, thin, thick, split", path.display(), n + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        let [id, thin, thick, split] = cols[..] else { return Err(bad()) };
        let split = Split::parse(split).ok_or_else(bad)?;
        out.push(Entry { id: id.to_string(), thin: base.join(thin), thick: base.join(thick), split });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_of_ten() {
        assert_eq!(default_split(10), (6, 2, 2));
        assert_eq!(default_split(3), (3, 0, 0));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec { dims: (11, 12, 12), primitives: 3, seed: 4, ..PhantomSpec::default() };
        let entries = make_dataset((2, 1, 1), &spec, Acquisition::default(), 5, ThickMode::Real, dir.path()).unwrap();
        let back = read_manifest(&dir.path().join(MANIFEST)).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in entries.iter().zip(&back) {
            assert_eq!((&a.id, a.split), (&b.id, b.split));
            assert_eq!(dir.path().join(&a.thin), b.thin);
            assert!(b.thick.exists());
        }
    }
}
