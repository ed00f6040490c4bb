//! Embedded query-response tensors: data model, validation, and binary I/O.
//!
//! A [`ResponseTensor`] holds the embedded responses of `N` agents at `T`
//! timepoints to `M` queries with `R` replicates each, every response being a
//! `p`-dimensional vector. Values are stored flat in `[t][n][m][r][p]` order
//! (time-major), so the `(t, n)` slot layout matches the block layout of the
//! distance matrix built from it.
//!
//! The on-disk format is a little-endian header (magic `TDKP`, version,
//! dtype flag, five counts) followed by the raw values, plus a JSON sidecar
//! manifest at `<path>.manifest.json`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TDKP";
pub const FORMAT_VERSION: u16 = 1;
/// Fixed header size: magic + version + dtype + five u64 counts.
pub const HEADER_BYTES: usize = 4 + 2 + 1 + 5 * 8;

/// On-disk float width. Internal computation is always in f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn flag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            0 => Ok(Precision::F32),
            1 => Ok(Precision::F64),
            other => Err(Error::Format(format!("unknown dtype flag {other}"))),
        }
    }

    pub fn value_bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Dense `N x T x M x R x p` tensor of embedded query responses.
///
/// Immutable after construction; cheap to share read-only across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTensor {
    n_agents: usize,
    n_times: usize,
    n_queries: usize,
    n_replicates: usize,
    dim: usize,
    precision: Precision,
    values: Vec<f64>,
}

impl ResponseTensor {
    pub fn new(
        n_agents: usize,
        n_times: usize,
        n_queries: usize,
        n_replicates: usize,
        dim: usize,
        values: Vec<f64>,
        precision: Precision,
    ) -> Result<Self> {
        let counts = [n_agents, n_times, n_queries, n_replicates, dim];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Validation(format!(
                "all five counts must be >= 1, got N={n_agents} T={n_times} M={n_queries} \
                 R={n_replicates} p={dim}"
            )));
        }
        let expected = n_agents * n_times * n_queries * n_replicates * dim;
        if values.len() != expected {
            return Err(Error::Validation(format!(
                "values length {} does not match N*T*M*R*p = {}",
                values.len(),
                expected
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {} at flat index {pos}",
                values[pos]
            )));
        }
        Ok(Self {
            n_agents,
            n_times,
            n_queries,
            n_replicates,
            dim,
            precision,
            values,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_replicates(&self) -> usize {
        self.n_replicates
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row index of slot `(t, n)` in the block distance matrix: `t * N + n`.
    pub fn slot(&self, time: usize, agent: usize) -> usize {
        time * self.n_agents + agent
    }

    /// Number of `(t, n)` slots, `T * N`.
    pub fn n_slots(&self) -> usize {
        self.n_agents * self.n_times
    }

    fn flat_index(&self, time: usize, agent: usize, query: usize, replicate: usize) -> usize {
        ((((time * self.n_agents) + agent) * self.n_queries + query) * self.n_replicates
            + replicate)
            * self.dim
    }

    fn check_indices(&self, agent: usize, time: usize) -> Result<()> {
        if agent >= self.n_agents {
            return Err(Error::IndexOutOfRange(format!(
                "agent {agent} >= N = {}",
                self.n_agents
            )));
        }
        if time >= self.n_times {
            return Err(Error::IndexOutOfRange(format!(
                "time {time} >= T = {}",
                self.n_times
            )));
        }
        Ok(())
    }

    /// The `p`-vector for one replicate.
    pub fn replicate(&self, time: usize, agent: usize, query: usize, replicate: usize) -> &[f64] {
        let start = self.flat_index(time, agent, query, replicate);
        &self.values[start..start + self.dim]
    }

    /// The per-query mean over replicates, `X-bar_n^(t)`: row `m` is the
    /// arithmetic mean of the `R` replicate vectors for query `m`.
    pub fn mean_responses(&self, agent: usize, time: usize) -> Result<MeanResponseMatrix> {
        self.check_indices(agent, time)?;
        let mut values = vec![0.0; self.n_queries * self.dim];
        let inv_r = 1.0 / self.n_replicates as f64;
        for m in 0..self.n_queries {
            let row = &mut values[m * self.dim..(m + 1) * self.dim];
            for r in 0..self.n_replicates {
                let rep = self.replicate(time, agent, m, r);
                for (acc, &v) in row.iter_mut().zip(rep) {
                    *acc += v;
                }
            }
            for acc in row.iter_mut() {
                *acc *= inv_r;
            }
        }
        Ok(MeanResponseMatrix {
            rows: self.n_queries,
            cols: self.dim,
            values,
        })
    }

    /// Mean matrices for every `(t, n)` slot, in slot order.
    pub fn all_mean_responses(&self) -> Vec<MeanResponseMatrix> {
        let mut out = Vec::with_capacity(self.n_slots());
        for t in 0..self.n_times {
            for n in 0..self.n_agents {
                // indices are in range by construction
                out.push(self.mean_responses(n, t).expect("valid slot"));
            }
        }
        out
    }
}

/// `M x p` matrix of per-query mean responses for one `(agent, time)` slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanResponseMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub values: Vec<f64>,
}

impl MeanResponseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Validation(format!(
                "mean matrix length {} does not match {rows}x{cols}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "non-finite entry in mean matrix".to_string(),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.values[m * self.cols..(m + 1) * self.cols]
    }

    /// Frobenius distance to another matrix of the same shape.
    pub fn frobenius_distance(&self, other: &MeanResponseMatrix) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Analysis metadata stored next to the binary tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub agent_ids: Vec<String>,
    pub time_labels: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_labels: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl TensorManifest {
    /// Default manifest with generated agent/time labels.
    pub fn generated(n_agents: usize, n_times: usize) -> Self {
        Self {
            agent_ids: (0..n_agents).map(|n| format!("agent_{n}")).collect(),
            time_labels: (0..n_times).map(|t| format!("t{t}")).collect(),
            group_labels: None,
            seed: None,
        }
    }

    pub fn validate_against(&self, tensor: &ResponseTensor) -> Result<()> {
        if self.agent_ids.len() != tensor.n_agents() {
            return Err(Error::Validation(format!(
                "manifest has {} agent_ids for N = {}",
                self.agent_ids.len(),
                tensor.n_agents()
            )));
        }
        if self.time_labels.len() != tensor.n_times() {
            return Err(Error::Validation(format!(
                "manifest has {} time_labels for T = {}",
                self.time_labels.len(),
                tensor.n_times()
            )));
        }
        if let Some(groups) = &self.group_labels {
            if groups.len() != tensor.n_agents() {
                return Err(Error::Validation(format!(
                    "manifest has {} group_labels for N = {}",
                    groups.len(),
                    tensor.n_agents()
                )));
            }
            if let Some(&bad) = groups.iter().find(|&&g| g >= tensor.n_agents()) {
                return Err(Error::Validation(format!(
                    "group label {bad} out of range for N = {}",
                    tensor.n_agents()
                )));
            }
        }
        Ok(())
    }
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.json");
    os.into()
}

/// Write the binary tensor plus its JSON sidecar manifest.
///
/// The tensor is validated before any file is created, so a validation
/// failure leaves no partial output behind.
pub fn save_tensor(tensor: &ResponseTensor, manifest: &TensorManifest, path: &Path) -> Result<()> {
    manifest.validate_against(tensor)?;

    let mut buf: Vec<u8> =
        Vec::with_capacity(HEADER_BYTES + tensor.values.len() * tensor.precision.value_bytes());
    buf.extend_from_slice(&MAGIC);
    buf.write_u16::<LittleEndian>(FORMAT_VERSION)?;
    buf.write_u8(tensor.precision.flag())?;
    for count in [
        tensor.n_agents,
        tensor.n_times,
        tensor.n_queries,
        tensor.n_replicates,
        tensor.dim,
    ] {
        buf.write_u64::<LittleEndian>(count as u64)?;
    }
    match tensor.precision {
        Precision::F32 => {
            for &v in &tensor.values {
                buf.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Precision::F64 => {
            for &v in &tensor.values {
                buf.write_f64::<LittleEndian>(v)?;
            }
        }
    }
    fs::write(path, &buf)?;

    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(manifest_path(path), json)?;
    Ok(())
}

/// Read a binary tensor and its sidecar manifest.
pub fn load_tensor(path: &Path) -> Result<(ResponseTensor, TensorManifest)> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; HEADER_BYTES];
    file.read_exact(&mut header)
        .map_err(|_| Error::Format("file shorter than header".to_string()))?;

    let mut cursor = &header[..];
    let mut magic = [0u8; 4];
    cursor.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic bytes {magic:02x?}, expected {MAGIC:02x?}"
        )));
    }
    let version = cursor.read_u16::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let precision = Precision::from_flag(cursor.read_u8()?)?;
    let mut counts = [0usize; 5];
    for c in counts.iter_mut() {
        *c = cursor.read_u64::<LittleEndian>()? as usize;
    }
    let [n_agents, n_times, n_queries, n_replicates, dim] = counts;

    let n_values = n_agents
        .checked_mul(n_times)
        .and_then(|x| x.checked_mul(n_queries))
        .and_then(|x| x.checked_mul(n_replicates))
        .and_then(|x| x.checked_mul(dim))
        .ok_or_else(|| Error::Format("count product overflows".to_string()))?;
    let expected_bytes = (n_values * precision.value_bytes()) as u64;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() as u64 != expected_bytes {
        return Err(Error::Length {
            expected: expected_bytes,
            actual: payload.len() as u64,
        });
    }

    let mut values = Vec::with_capacity(n_values);
    let mut cursor = &payload[..];
    match precision {
        Precision::F32 => {
            for _ in 0..n_values {
                values.push(cursor.read_f32::<LittleEndian>()? as f64);
            }
        }
        Precision::F64 => {
            for _ in 0..n_values {
                values.push(cursor.read_f64::<LittleEndian>()?);
            }
        }
    }

    let tensor = ResponseTensor::new(
        n_agents,
        n_times,
        n_queries,
        n_replicates,
        dim,
        values,
        precision,
    )?;

    let manifest_json = fs::read_to_string(manifest_path(path))?;
    let manifest: TensorManifest = serde_json::from_str(&manifest_json)?;
    manifest.validate_against(&tensor)?;
    Ok((tensor, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_tensor(values: Vec<f64>, shape: [usize; 5]) -> ResponseTensor {
        let [n, t, m, r, p] = shape;
        ResponseTensor::new(n, t, m, r, p, values, Precision::F64).unwrap()
    }

    #[test]
    fn roundtrip_identity_scalar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scalar.tdkp");
        let tensor = small_tensor(vec![0.0], [1, 1, 1, 1, 1]);
        let manifest = TensorManifest::generated(1, 1);
        save_tensor(&tensor, &manifest, &path).unwrap();
        let (loaded, loaded_manifest) = load_tensor(&path).unwrap();
        assert_eq!(loaded, tensor);
        assert_eq!(loaded_manifest, manifest);
    }

    #[test]
    fn roundtrip_seeded_random_tensor_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("random.tdkp");
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let shape = [3, 2, 4, 5, 6];
        let len: usize = shape.iter().product();
        let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let tensor = small_tensor(values, shape);
        let manifest = TensorManifest {
            agent_ids: vec!["a".into(), "b".into(), "c".into()],
            time_labels: vec!["2020".into(), "2021".into()],
            group_labels: Some(vec![0, 1, 0]),
            seed: Some(42),
        };
        save_tensor(&tensor, &manifest, &path).unwrap();
        let (loaded, loaded_manifest) = load_tensor(&path).unwrap();
        // bit-for-bit
        for (a, b) in loaded.values().iter().zip(tensor.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(loaded_manifest, manifest);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tdkp");
        let mut bytes = vec![0u8; HEADER_BYTES + 8];
        bytes[..4].copy_from_slice(b"XXXX");
        fs::write(&path, &bytes).unwrap();
        match load_tensor(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.tdkp");
        let tensor = small_tensor(vec![1.0, 2.0], [2, 1, 1, 1, 1]);
        save_tensor(&tensor, &TensorManifest::generated(2, 1), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_tensor(&path) {
            Err(Error::Length { .. }) => {}
            other => panic!("expected length error, got {other:?}"),
        }
    }

    #[test]
    fn nan_rejected_and_no_file_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.tdkp");
        let err = ResponseTensor::new(1, 1, 1, 1, 1, vec![f64::NAN], Precision::F64).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(!path.exists());
        // the same check guards save_tensor via construction, and manifests
        // that disagree with the tensor shape are rejected before writing
        let tensor = small_tensor(vec![1.0], [1, 1, 1, 1, 1]);
        let bad_manifest = TensorManifest::generated(2, 1);
        assert!(save_tensor(&tensor, &bad_manifest, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn file_size_matches_format_spec() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sized.tdkp");
        let shape = [2, 2, 1, 1, 2];
        let len: usize = shape.iter().product();
        let tensor = small_tensor((0..len).map(|i| i as f64).collect(), shape);
        save_tensor(&tensor, &TensorManifest::generated(2, 2), &path).unwrap();
        let meta = fs::metadata(&path).unwrap();
        assert_eq!(meta.len() as usize, HEADER_BYTES + len * 8);
        assert_eq!(HEADER_BYTES, 47);
    }

    #[test]
    fn f32_precision_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.tdkp");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..8).map(|_| rng.gen::<f32>() as f64).collect();
        let tensor =
            ResponseTensor::new(2, 2, 1, 1, 2, values.clone(), Precision::F32).unwrap();
        save_tensor(&tensor, &TensorManifest::generated(2, 2), &path).unwrap();
        let (loaded, _) = load_tensor(&path).unwrap();
        assert_eq!(loaded.precision(), Precision::F32);
        assert_eq!(loaded.values(), tensor.values());
        let meta = fs::metadata(&path).unwrap();
        assert_eq!(meta.len() as usize, HEADER_BYTES + 8 * 4);
    }

    #[test]
    fn mean_of_constant_replicates_is_the_constant() {
        // every replicate equals (1.5, -2.0)
        let reps = 4;
        let mut values = Vec::new();
        for _ in 0..reps {
            values.extend_from_slice(&[1.5, -2.0]);
        }
        let tensor = small_tensor(values, [1, 1, 1, reps, 2]);
        let mean = tensor.mean_responses(0, 0).unwrap();
        assert_eq!(mean.row(0), &[1.5, -2.0]);
    }

    #[test]
    fn mean_of_two_points() {
        let tensor = small_tensor(vec![0.0, 0.0, 2.0, 4.0], [1, 1, 1, 2, 2]);
        let mean = tensor.mean_responses(0, 0).unwrap();
        assert_eq!(mean.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn mean_matches_brute_force_summation() {
        let shape = [1, 1, 3, 7, 4];
        let len: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tensor = small_tensor(values, shape);
        let mean = tensor.mean_responses(0, 0).unwrap();
        for m in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for r in 0..7 {
                    acc += tensor.replicate(0, 0, m, r)[j];
                }
                let expected = acc / 7.0;
                assert!((mean.row(m)[j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_is_linear_in_the_tensor() {
        let shape = [1, 1, 2, 3, 2];
        let len: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = values.iter().map(|v| 2.5 * v).collect();
        let t1 = small_tensor(values, shape);
        let t2 = small_tensor(scaled, shape);
        let m1 = t1.mean_responses(0, 0).unwrap();
        let m2 = t2.mean_responses(0, 0).unwrap();
        for (a, b) in m1.values.iter().zip(&m2.values) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_ignores_replicate_order() {
        let shape = [1, 1, 1, 4, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reps: Vec<[f64; 2]> = (0..4)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let forward: Vec<f64> = reps.iter().flatten().copied().collect();
        let reversed: Vec<f64> = reps.iter().rev().flatten().copied().collect();
        let m1 = small_tensor(forward, shape).mean_responses(0, 0).unwrap();
        let m2 = small_tensor(reversed, shape).mean_responses(0, 0).unwrap();
        for (a, b) in m1.values.iter().zip(&m2.values) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn index_bounds_are_checked() {
        let tensor = small_tensor(vec![0.0], [1, 1, 1, 1, 1]);
        assert!(matches!(
            tensor.mean_responses(1, 0),
            Err(Error::IndexOutOfRange(_))
        ));
        assert!(matches!(
            tensor.mean_responses(0, 1),
            Err(Error::IndexOutOfRange(_))
        ));
    }
}
