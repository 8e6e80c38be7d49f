//! Parameter snapshots on disk.
//!
//! A checkpoint is two files. The data file is little-endian binary: the
//! magic bytes `DLPO`, a `u32` format version, a `u64` parameter count,
//! then the raw 64-bit floats of θ — nothing else, so a snapshot restores
//! bit for bit. Next to it, `<path>.meta` is a small `key = value` text
//! sidecar recording the seven layout dimensions (enough to rebuild the
//! [`DenoiserLayout`]) and an FNV-1a hash of the run configuration for
//! provenance.
//!
//! Writes are atomic: bytes go to a `.tmp` sibling first and are renamed
//! into place, so a crash mid-write never leaves a half-written file under
//! the real name. Corruption (bad magic, version, count, truncation,
//! non-finite values, malformed sidecar) is reported distinctly from plain
//! I/O failure so callers can exit with the documented codes.

use crate::denoiser::{DenoiserError, DenoiserLayout, DenoiserParams};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Magic bytes opening every checkpoint data file.
pub const FILE_MAGIC: [u8; 4] = *b"DLPO";

/// Current checkpoint format version.
pub const FORMAT_VERSION: u32 = 1;

/// Errors from saving and loading checkpoints.
#[derive(Debug, Error)]
pub enum CheckpointError {
    /// Plain filesystem failure (missing file, permissions, ...).
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// The data file does not start with the checkpoint magic bytes.
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    /// The data file uses a format version this build cannot read.
    #[error("unsupported checkpoint format version {0}")]
    BadVersion(u32),
    /// The recorded parameter count disagrees with the sidecar layout.
    #[error("checkpoint holds {got} parameters but the sidecar layout needs {expected}")]
    WrongCount { expected: u64, got: u64 },
    /// The data section ends before the recorded count of floats.
    #[error("checkpoint data is truncated")]
    Truncated,
    /// The data section continues past the recorded count of floats.
    #[error("checkpoint has trailing bytes after the parameter data")]
    TrailingBytes,
    /// A stored parameter is NaN or infinite.
    #[error("checkpoint parameter {0} is not finite")]
    NonFiniteValue(usize),
    /// The sidecar is missing a key, repeats one, or fails to parse.
    #[error("bad checkpoint sidecar: {0}")]
    BadSidecar(String),
    /// The sidecar describes an invalid layout.
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

impl CheckpointError {
    /// True for damaged-artifact errors, false for plain I/O failure.
    /// Callers map the former to the corrupt-checkpoint exit code and the
    /// latter to the generic I/O one.
    pub fn is_corruption(&self) -> bool {
        !matches!(self, CheckpointError::Io(_))
    }
}

/// Convenience alias for checkpoint results.
pub type CheckpointResult<T> = Result<T, CheckpointError>;

/// 64-bit FNV-1a hash, used to fingerprint run configurations in sidecars.
pub fn fnv1a64(data: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &byte in data {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// The sidecar filename for a checkpoint path: `.meta` appended to the
/// full name (`model.ckpt` → `model.ckpt.meta`).
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}

/// Prefixes an I/O error with the path it concerns.
fn at_path(path: &Path) -> impl Fn(std::io::Error) -> std::io::Error + '_ {
    move |e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
}

/// Writes `bytes` to a `.tmp` sibling and renames it over `path`.
fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(at_path(&tmp))?;
    fs::rename(&tmp, path).map_err(at_path(path))
}

/// Saves θ and its layout atomically: the binary data file at `path`, the
/// text sidecar at `path.meta`. `config_hash` is stored for provenance
/// (hash the canonical config text with [`fnv1a64`]).
pub fn save_checkpoint(
    path: &Path,
    params: &DenoiserParams,
    config_hash: u64,
) -> CheckpointResult<()> {
    let l = &params.layout;
    let mut data = Vec::with_capacity(16 + params.theta.len() * 8);
    data.extend_from_slice(&FILE_MAGIC);
    data.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    data.extend_from_slice(&(params.theta.len() as u64).to_le_bytes());
    for v in &params.theta {
        data.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &data)?;

    let meta = format!(
        "n = {}\nk = {}\nt_steps = {}\nd_c = {}\nd_t = {}\nh1 = {}\nh2 = {}\nconfig_hash = {:016x}\n",
        l.n, l.k, l.t_steps, l.d_c, l.d_t, l.h1, l.h2, config_hash
    );
    atomic_write(&sidecar_path(path), meta.as_bytes())?;
    Ok(())
}

/// The eight sidecar fields, in file order.
const SIDECAR_KEYS: [&str; 8] = [
    "n", "k", "t_steps", "d_c", "d_t", "h1", "h2", "config_hash",
];

/// Parses the sidecar into a layout and the stored config hash.
fn read_sidecar(path: &Path) -> CheckpointResult<(DenoiserLayout, u64)> {
    let text = fs::read_to_string(path).map_err(at_path(path))?;
    let mut values: [Option<&str>; 8] = [None; 8];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CheckpointError::BadSidecar(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim();
        let slot = SIDECAR_KEYS
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| {
                CheckpointError::BadSidecar(format!("line {}: unknown key {key:?}", lineno + 1))
            })?;
        if values[slot].is_some() {
            return Err(CheckpointError::BadSidecar(format!(
                "line {}: duplicate key {key:?}",
                lineno + 1
            )));
        }
        values[slot] = Some(value.trim());
    }

    let field = |slot: usize| -> CheckpointResult<&str> {
        values[slot].ok_or_else(|| {
            CheckpointError::BadSidecar(format!("missing key {:?}", SIDECAR_KEYS[slot]))
        })
    };
    let dim = |slot: usize| -> CheckpointResult<usize> {
        field(slot)?.parse().map_err(|_| {
            CheckpointError::BadSidecar(format!("key {:?} is not an integer", SIDECAR_KEYS[slot]))
        })
    };
    let layout = DenoiserLayout::new(
        dim(0)?,
        dim(1)?,
        dim(2)?,
        dim(3)?,
        dim(4)?,
        dim(5)?,
        dim(6)?,
    )?;
    let config_hash = u64::from_str_radix(field(7)?, 16)
        .map_err(|_| CheckpointError::BadSidecar("config_hash is not hexadecimal".into()))?;
    Ok((layout, config_hash))
}

/// Loads a checkpoint saved by [`save_checkpoint`], restoring θ bit for
/// bit, and returns it with the stored config hash.
///
/// The data file is validated before the sidecar is consulted, so a file
/// that is not a checkpoint at all reports corruption rather than a
/// missing-sidecar error.
pub fn load_checkpoint(path: &Path) -> CheckpointResult<(DenoiserParams, u64)> {
    let bytes = fs::read(path).map_err(at_path(path))?;

    if bytes.len() < 4 || bytes[..4] != FILE_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));

    // A valid data file whose sidecar vanished is a broken pair, not an
    // io failure: the caller pointed at a real checkpoint.
    let meta = sidecar_path(path);
    if !meta.exists() {
        return Err(CheckpointError::BadSidecar(format!(
            "missing sidecar {}",
            meta.display()
        )));
    }
    let (layout, config_hash) = read_sidecar(&meta)?;
    let expected = layout.param_count() as u64;
    if count != expected {
        return Err(CheckpointError::WrongCount {
            expected,
            got: count,
        });
    }
    let data = &bytes[16..];
    let need = (count as usize) * 8;
    if data.len() < need {
        return Err(CheckpointError::Truncated);
    }
    if data.len() > need {
        return Err(CheckpointError::TrailingBytes);
    }
    let mut theta = Vec::with_capacity(count as usize);
    for (i, chunk) in data.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        if !v.is_finite() {
            return Err(CheckpointError::NonFiniteValue(i));
        }
        theta.push(v);
    }
    Ok((DenoiserParams::from_theta(layout, theta)?, config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{stream_rng, Phase};

    fn params() -> DenoiserParams {
        let layout = DenoiserLayout::new(6, 3, 4, 2, 2, 5, 4).unwrap();
        DenoiserParams::init(layout, &mut stream_rng(1, Phase::Init, 0, 0))
    }

    #[test]
    fn fnv1a64_matches_the_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn save_and_load_round_trip_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = params();
        save_checkpoint(&path, &p, 0xdeadbeefcafef00d).unwrap();
        let (loaded, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.layout, p.layout);
        assert_eq!(hash, 0xdeadbeefcafef00d);
        for (a, b) in p.theta.iter().zip(&loaded.theta) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // The temporary files were renamed away.
        assert!(!dir.path().join("model.ckpt.tmp").exists());
        assert!(!dir.path().join("model.ckpt.meta.tmp").exists());
    }

    #[test]
    fn saving_twice_overwrites_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = params();
        save_checkpoint(&path, &p, 1).unwrap();
        let mut p2 = p.clone();
        p2.theta[0] = 42.0;
        save_checkpoint(&path, &p2, 2).unwrap();
        let (loaded, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.theta[0], 42.0);
        assert_eq!(hash, 2);
    }

    #[test]
    fn corruption_is_distinguished_from_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        let missing = load_checkpoint(&path).unwrap_err();
        assert!(matches!(missing, CheckpointError::Io(_)));
        assert!(!missing.is_corruption());

        save_checkpoint(&path, &params(), 0).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let bad = load_checkpoint(&path).unwrap_err();
        assert!(matches!(bad, CheckpointError::BadMagic));
        assert!(bad.is_corruption());
    }

    #[test]
    fn version_count_truncation_and_trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params(), 0).unwrap();
        let original = fs::read(&path).unwrap();

        let mut wrong_version = original.clone();
        wrong_version[4..8].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&path, &wrong_version).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadVersion(7))
        ));

        let mut wrong_count = original.clone();
        wrong_count[8..16].copy_from_slice(&3u64.to_le_bytes());
        fs::write(&path, &wrong_count).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::WrongCount { got: 3, .. })
        ));

        fs::write(&path, &original[..original.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated)
        ));

        let mut padded = original.clone();
        padded.extend_from_slice(&[0u8; 8]);
        fs::write(&path, &padded).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::TrailingBytes)
        ));
    }

    #[test]
    fn non_finite_parameters_are_rejected_with_their_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params(), 0).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let offset = 16 + 5 * 8;
        bytes[offset..offset + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::NonFiniteValue(5))
        ));
    }

    #[test]
    fn sidecar_problems_are_reported_as_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params(), 0).unwrap();
        let meta = sidecar_path(&path);

        let original = fs::read_to_string(&meta).unwrap();

        fs::write(&meta, original.replace("h1", "hx")).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, CheckpointError::BadSidecar(_)));
        assert!(err.is_corruption());

        fs::write(&meta, original.replace("n = 6", "n = six")).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadSidecar(_))
        ));

        fs::write(&meta, original.lines().skip(1).collect::<Vec<_>>().join("\n")).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadSidecar(_))
        ));

        // A sidecar describing a different layout turns into a count
        // mismatch against the stored data.
        fs::write(&meta, original.replace("h1 = 5", "h1 = 9")).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::WrongCount { .. })
        ));

        // A vanished sidecar next to a valid data file is a broken pair,
        // not a missing checkpoint.
        fs::remove_file(&meta).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, CheckpointError::BadSidecar(_)));
        assert!(err.is_corruption());
    }

    #[test]
    fn sidecar_path_appends_to_the_full_filename() {
        assert_eq!(
            sidecar_path(Path::new("runs/model.ckpt")),
            PathBuf::from("runs/model.ckpt.meta")
        );
    }
}
