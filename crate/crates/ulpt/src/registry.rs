//! Binary prompt checkpoints and the multi-task registry built on them.
//!
//! The format exploits the one property that makes tiny prompts cheap to
//! keep around: the projection is never stored, only its seed. A version 1
//! file is
//!
//! ```text
//! offset  size  field
//!      0     4  magic "ULPT"
//!      4     2  version, u16 LE (currently 1)
//!      6     1  mode tag, u8
//!      7     4  n, u32 LE
//!     11     4  r, u32 LE
//!     15     4  d, u32 LE
//!     19     8  projection seed, u64 LE
//!     27   8*k  float payload, f64 LE: z row-major, then the scale vector
//!               (modes that train it), then the shift vector (likewise)
//!   27+8k     4  CRC-32 (IEEE) of the float payload, u32 LE
//! ```
//!
//! The checksum covers the floats only. Integrity of the trained numbers is
//! what matters; editing the seed bytes produces a file that still loads
//! but expands to a different prompt, which is the honest interpretation of
//! such an edit (the seed is an input, not a measurement).
//!
//! Modes that train the projection itself (dpt, tune-p) cannot round-trip
//! through a seed and are rejected by this format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Result, UlptError};
use crate::numerics::matrix::{Matrix, Vector};
use crate::numerics::rng::Seed;
use crate::reparam::{
    build_projection, up_project, Mode, ProjectionMatrix, PromptConfig, UlptParams,
};
use crate::training::PromptState;

pub const MAGIC: [u8; 4] = *b"ULPT";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 27;
pub const FILE_EXTENSION: &str = "ulpt";

const fn build_crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u32;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

const CRC_TABLE: [u32; 256] = build_crc_table();

/// CRC-32 (IEEE 802.3, reflected). Reference: crc32("123456789") =
/// 0xCBF43926.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = (crc >> 8) ^ CRC_TABLE[((crc ^ b as u32) & 0xFF) as usize];
    }
    crc ^ 0xFFFF_FFFF
}

/// Everything needed to rebuild a trained prompt: explicit trained floats
/// plus the seed of the frozen projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptCheckpoint {
    pub mode: Mode,
    pub n: usize,
    pub r: usize,
    pub d: usize,
    pub proj_seed: Seed,
    pub z: Matrix,
    /// Present exactly when the mode trains a scale.
    pub s: Option<Vector>,
    /// Present exactly when the mode trains a shift.
    pub b: Option<Vector>,
}

impl PromptCheckpoint {
    /// Captures a trained state. Modes whose projection is itself trained
    /// cannot be reconstructed from a seed and are rejected.
    pub fn from_state(state: &PromptState) -> Result<PromptCheckpoint> {
        let config = &state.config;
        if config.mode.trains_projection() {
            return Err(UlptError::Format(format!(
                "mode {} trains its projection; a seed cannot reproduce it, so \
                 format v1 cannot store it",
                config.mode
            )));
        }
        Ok(PromptCheckpoint {
            mode: config.mode,
            n: config.n,
            r: config.r,
            d: config.d,
            proj_seed: state.proj.seed,
            z: state.params.z.clone(),
            s: config.mode.trains_scale().then(|| state.params.s.clone()),
            b: config.mode.trains_shift().then(|| state.params.b.clone()),
        })
    }

    /// Number of stored floats; equals the mode's trainable parameter
    /// count for every storable mode.
    pub fn stored_floats(&self) -> usize {
        self.mode.param_count(self.n, self.r, self.d)
    }

    /// Exact on-disk size in bytes.
    pub fn byte_size(&self) -> usize {
        HEADER_LEN + 8 * self.stored_floats() + 4
    }

    fn validate(&self) -> Result<()> {
        if self.mode.trains_projection() {
            return Err(UlptError::Format(format!(
                "mode {} is not storable in format v1",
                self.mode
            )));
        }
        if self.z.rows() != self.n || self.z.cols() != self.r {
            return Err(UlptError::Dimension(format!(
                "z is {}x{} but the header says {}x{}",
                self.z.rows(),
                self.z.cols(),
                self.n,
                self.r
            )));
        }
        if self.mode.trains_scale() != self.s.is_some()
            || self.mode.trains_shift() != self.b.is_some()
        {
            return Err(UlptError::Format(format!(
                "stored vectors do not match what mode {} trains",
                self.mode
            )));
        }
        for v in [&self.s, &self.b].into_iter().flatten() {
            if v.len() != self.d {
                return Err(UlptError::Dimension(format!(
                    "per-dimension vector has length {}, expected {}",
                    v.len(),
                    self.d
                )));
            }
        }
        if self.n > u32::MAX as usize || self.r > u32::MAX as usize || self.d > u32::MAX as usize {
            return Err(UlptError::Format(
                "dimensions exceed the format's u32 fields".to_string(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.byte_size());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.mode.as_u8());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.r as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&self.proj_seed.0.to_le_bytes());

        let payload_start = out.len();
        for v in self.z.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for vec in [&self.s, &self.b].into_iter().flatten() {
            for v in vec.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32(&out[payload_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PromptCheckpoint> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(UlptError::Truncated {
                needed: HEADER_LEN + 4,
                got: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("slice of length 4");
        if magic != MAGIC {
            return Err(UlptError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().expect("length 2"));
        if version != FORMAT_VERSION {
            return Err(UlptError::UnsupportedVersion(version));
        }
        let mode = Mode::from_u8(bytes[6])?;
        if mode.trains_projection() {
            return Err(UlptError::Format(format!(
                "mode {mode} is not storable in format v1"
            )));
        }
        let n = u32::from_le_bytes(bytes[7..11].try_into().expect("length 4")) as usize;
        let r = u32::from_le_bytes(bytes[11..15].try_into().expect("length 4")) as usize;
        let d = u32::from_le_bytes(bytes[15..19].try_into().expect("length 4")) as usize;
        let proj_seed = Seed(u64::from_le_bytes(
            bytes[19..27].try_into().expect("length 8"),
        ));

        let floats = mode.param_count(n, r, d) as u128;
        let expected = HEADER_LEN as u128 + 8 * floats + 4;
        if (bytes.len() as u128) < expected {
            return Err(UlptError::Truncated {
                needed: expected as usize,
                got: bytes.len(),
            });
        }
        if (bytes.len() as u128) > expected {
            return Err(UlptError::Format(format!(
                "{} trailing bytes after the checksum",
                bytes.len() as u128 - expected
            )));
        }

        let payload = &bytes[HEADER_LEN..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("length 4"));
        let computed = crc32(payload);
        if stored != computed {
            return Err(UlptError::CrcMismatch { stored, computed });
        }

        let mut floats_iter = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("length 8")));
        let mut take = |count: usize| -> Vec<f64> { floats_iter.by_ref().take(count).collect() };
        let z = Matrix::from_vec(n, r, take(n * r))?;
        let s = mode
            .trains_scale()
            .then(|| Vector::from_vec(take(d)))
            .transpose()?;
        let b = mode
            .trains_shift()
            .then(|| Vector::from_vec(take(d)))
            .transpose()?;

        let ckpt = PromptCheckpoint {
            mode,
            n,
            r,
            d,
            proj_seed,
            z,
            s,
            b,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Writes atomically: the bytes land in a sibling temp file that is
    /// renamed over the target, so readers never observe a half-written
    /// checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PromptCheckpoint> {
        let bytes = fs::read(path)?;
        PromptCheckpoint::from_bytes(&bytes)
    }

    /// Rebuilds full parameters and the projection. Untrained scale and
    /// shift come back as their neutral values (ones and zeros), and the
    /// projection is regenerated from the stored seed.
    pub fn reconstruct(&self) -> Result<(UlptParams, ProjectionMatrix)> {
        self.validate()?;
        let config = PromptConfig::new(self.n, self.r, self.d, self.proj_seed, self.mode)?;
        let proj = build_projection(&config)?;
        let params = UlptParams {
            z: self.z.clone(),
            s: self
                .s
                .clone()
                .unwrap_or_else(|| Vector::filled(self.d, 1.0)),
            b: self
                .b
                .clone()
                .unwrap_or_else(|| Vector::filled(self.d, 0.0)),
        };
        Ok((params, proj))
    }

    /// The expanded n-by-d prompt this checkpoint denotes.
    pub fn expand(&self) -> Result<Matrix> {
        let (params, proj) = self.reconstruct()?;
        up_project(&params, &proj)
    }
}

/// Storage bookkeeping for one task's prompt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegistryEntry {
    pub mode: Mode,
    pub n: usize,
    pub r: usize,
    pub d: usize,
    /// Floats actually stored.
    pub stored_floats: usize,
    /// Floats a dense n-by-d prompt would need.
    pub dense_floats: usize,
    pub file_bytes: usize,
}

impl RegistryEntry {
    pub fn of(ckpt: &PromptCheckpoint) -> RegistryEntry {
        RegistryEntry {
            mode: ckpt.mode,
            n: ckpt.n,
            r: ckpt.r,
            d: ckpt.d,
            stored_floats: ckpt.stored_floats(),
            dense_floats: ckpt.n * ckpt.d,
            file_bytes: ckpt.byte_size(),
        }
    }
}

/// A named collection of prompt checkpoints for one frozen base model.
/// Ordered by task name so reports serialize identically across runs.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TaskRegistry {
    pub entries: BTreeMap<String, RegistryEntry>,
}

/// Aggregate storage accounting across a registry.
#[derive(Debug, Clone, Serialize)]
pub struct RegistryReport {
    pub tasks: usize,
    pub stored_floats: u64,
    pub dense_floats: u64,
    /// stored / dense; the punchline number.
    pub storage_ratio: f64,
    pub file_bytes: u64,
    pub entries: BTreeMap<String, RegistryEntry>,
}

impl TaskRegistry {
    pub fn new() -> TaskRegistry {
        TaskRegistry::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, ckpt: &PromptCheckpoint) {
        self.entries.insert(name.into(), RegistryEntry::of(ckpt));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads every `.ulpt` file in a directory, keyed by file stem.
    pub fn scan_dir(dir: &Path) -> Result<TaskRegistry> {
        let mut registry = TaskRegistry::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(FILE_EXTENSION) {
                continue;
            }
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("unnamed")
                .to_string();
            let ckpt = PromptCheckpoint::load(&path)?;
            registry.insert(name, &ckpt);
        }
        Ok(registry)
    }

    pub fn report(&self) -> RegistryReport {
        let stored: u64 = self.entries.values().map(|e| e.stored_floats as u64).sum();
        let dense: u64 = self.entries.values().map(|e| e.dense_floats as u64).sum();
        let bytes: u64 = self.entries.values().map(|e| e.file_bytes as u64).sum();
        RegistryReport {
            tasks: self.entries.len(),
            stored_floats: stored,
            dense_floats: dense,
            storage_ratio: if dense == 0 {
                f64::NAN
            } else {
                stored as f64 / dense as f64
            },
            file_bytes: bytes,
            entries: self.entries.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng64;
    use crate::training::PromptState;

    fn random_state(mode: Mode, n: usize, r: usize, d: usize, seed: u64) -> PromptState {
        let config = PromptConfig::new(n, r, d, Seed(seed), mode).unwrap();
        let mut state = PromptState::init(&config, Seed(seed + 1)).unwrap();
        // Perturb every trainable piece so round trips exercise real data.
        let mut rng = Rng64::new(Seed(seed + 2));
        let mut flat = state.flatten_trainables();
        for v in &mut flat {
            *v += rng.next_gaussian();
        }
        state.set_trainables(&flat);
        state
    }

    #[test]
    fn crc32_matches_the_published_check_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn golden_file_bytes_are_stable() {
        // Independently assembled 55-byte file: mode ulpt, n=r=d=1,
        // seed 7, z=[0.5], s=[1.5], b=[-0.25]; CRC computed with an
        // external implementation.
        let golden: Vec<u8> = {
            let hex = "554c50540100000100000001000000010000000700000000000000\
                       000000000000e03f000000000000f83f000000000000d0bfcfd4e43d";
            (0..hex.len())
                .step_by(2)
                .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).unwrap())
                .collect()
        };
        let ckpt = PromptCheckpoint {
            mode: Mode::Ulpt,
            n: 1,
            r: 1,
            d: 1,
            proj_seed: Seed(7),
            z: Matrix::from_vec(1, 1, vec![0.5]).unwrap(),
            s: Some(Vector::from_vec(vec![1.5]).unwrap()),
            b: Some(Vector::from_vec(vec![-0.25]).unwrap()),
        };
        assert_eq!(ckpt.to_bytes().unwrap(), golden);
        let back = PromptCheckpoint::from_bytes(&golden).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn round_trips_are_bit_identical_across_storable_modes() {
        let storable = [
            Mode::Ulpt,
            Mode::UlptNoScale,
            Mode::UlptNoShiftNoScale,
            Mode::VanillaPt,
        ];
        for trial in 0..50u64 {
            let mode = storable[(trial % 4) as usize];
            let state = random_state(mode, 3 + (trial as usize % 5), 2, 6, 100 + trial);
            let ckpt = PromptCheckpoint::from_state(&state).unwrap();
            let bytes = ckpt.to_bytes().unwrap();
            assert_eq!(bytes.len(), ckpt.byte_size());
            let back = PromptCheckpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ckpt, "trial {trial} ({mode})");
            // Bit-identical expansion, not merely close.
            assert_eq!(back.expand().unwrap(), ckpt.expand().unwrap());
        }
    }

    #[test]
    fn expansion_matches_the_live_state() {
        let state = random_state(Mode::Ulpt, 4, 2, 8, 500);
        let ckpt = PromptCheckpoint::from_state(&state).unwrap();
        assert_eq!(ckpt.expand().unwrap(), state.forward().unwrap());
    }

    #[test]
    fn projection_training_modes_are_rejected() {
        for mode in [Mode::DptLearnableP, Mode::TunePFrozenZ] {
            let state = random_state(mode, 3, 2, 6, 600);
            let err = PromptCheckpoint::from_state(&state).unwrap_err();
            assert!(
                matches!(err, UlptError::Format(_)),
                "expected a format rejection, got {err:?}"
            );
        }
    }

    #[test]
    fn each_corruption_gets_its_own_error() {
        let state = random_state(Mode::Ulpt, 3, 2, 6, 700);
        let bytes = PromptCheckpoint::from_state(&state)
            .unwrap()
            .to_bytes()
            .unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            PromptCheckpoint::from_bytes(&bad_magic).unwrap_err(),
            UlptError::BadMagic(_)
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            PromptCheckpoint::from_bytes(&bad_version).unwrap_err(),
            UlptError::UnsupportedVersion(9)
        ));

        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(
            PromptCheckpoint::from_bytes(truncated).unwrap_err(),
            UlptError::Truncated { .. }
        ));

        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 3] ^= 0xFF;
        assert!(matches!(
            PromptCheckpoint::from_bytes(&flipped).unwrap_err(),
            UlptError::CrcMismatch { .. }
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            PromptCheckpoint::from_bytes(&trailing).unwrap_err(),
            UlptError::Format(_)
        ));
    }

    #[test]
    fn seed_tampering_loads_but_expands_differently() {
        // The checksum deliberately excludes the seed: the trained floats
        // are intact, so the file loads, but the prompt it denotes changes.
        let state = random_state(Mode::Ulpt, 3, 2, 6, 800);
        let original = PromptCheckpoint::from_state(&state).unwrap();
        let mut bytes = original.to_bytes().unwrap();
        bytes[19] ^= 0x01;
        let tampered = PromptCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(tampered.z, original.z, "trained floats untouched");
        assert_ne!(tampered.proj_seed, original.proj_seed);
        assert_ne!(
            tampered.expand().unwrap(),
            original.expand().unwrap(),
            "a different seed denotes a different prompt"
        );
    }

    #[test]
    fn flagship_shape_arithmetic() {
        // n=100 prompt tokens at width 768 with r=2: 100*2 + 2*768 = 1736
        // floats, 27 + 8*1736 + 4 = 13919 bytes.
        let state = random_state(Mode::Ulpt, 100, 2, 768, 900);
        let ckpt = PromptCheckpoint::from_state(&state).unwrap();
        assert_eq!(ckpt.stored_floats(), 1736);
        assert_eq!(ckpt.byte_size(), 13919);
        assert_eq!(ckpt.to_bytes().unwrap().len(), 13919);
    }

    #[test]
    fn registry_ratio_for_a_thousand_tasks() {
        let state = random_state(Mode::Ulpt, 100, 2, 768, 1000);
        let ckpt = PromptCheckpoint::from_state(&state).unwrap();
        let mut registry = TaskRegistry::new();
        for i in 0..1000 {
            registry.insert(format!("task-{i:04}"), &ckpt);
        }
        let report = registry.report();
        assert_eq!(report.tasks, 1000);
        assert_eq!(report.stored_floats, 1_736_000);
        assert_eq!(report.dense_floats, 76_800_000);
        assert!((report.storage_ratio - 1_736_000.0 / 76_800_000.0).abs() < 1e-12);
    }

    #[test]
    fn save_load_and_directory_scan() {
        let dir = tempfile::tempdir().unwrap();
        let mut expected = Vec::new();
        for (i, mode) in [Mode::Ulpt, Mode::UlptNoScale, Mode::VanillaPt]
            .into_iter()
            .enumerate()
        {
            let state = random_state(mode, 2 + i, 2, 5, 1100 + i as u64);
            let ckpt = PromptCheckpoint::from_state(&state).unwrap();
            let path = dir.path().join(format!("task-{i}.{FILE_EXTENSION}"));
            ckpt.save(&path).unwrap();
            assert_eq!(PromptCheckpoint::load(&path).unwrap(), ckpt);
            expected.push((format!("task-{i}"), RegistryEntry::of(&ckpt)));
        }
        // A non-checkpoint file in the directory is ignored.
        fs::write(dir.path().join("notes.txt"), b"not a checkpoint").unwrap();

        let registry = TaskRegistry::scan_dir(dir.path()).unwrap();
        assert_eq!(registry.len(), 3);
        for (name, entry) in expected {
            assert_eq!(registry.entries.get(&name), Some(&entry), "{name}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        /// Any storable checkpoint survives serialization: the decoded
        /// struct is equal and its expansion reproduces the live forward
        /// pass bit for bit.
        #[test]
        fn any_storable_checkpoint_survives_a_byte_round_trip(
            mode_ix in 0usize..4,
            n in 1usize..7,
            d in 2usize..17,
            r in 1usize..17,
            seed in 0u64..1_000_000,
        ) {
            use proptest::prelude::prop_assert_eq;
            let storable = [
                Mode::Ulpt,
                Mode::UlptNoScale,
                Mode::UlptNoShiftNoScale,
                Mode::VanillaPt,
            ];
            let state = random_state(storable[mode_ix], n, r.min(d), d, seed);
            let ckpt = PromptCheckpoint::from_state(&state).unwrap();
            let loaded = PromptCheckpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(&loaded, &ckpt);

            let before = state.forward().unwrap();
            let after = loaded.expand().unwrap();
            for i in 0..before.rows() {
                for (a, b) in before.row(i).iter().zip(after.row(i)) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
