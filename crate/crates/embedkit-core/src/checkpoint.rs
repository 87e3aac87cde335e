//! Checkpoint archives and weight merging.
//!
//! An archive is a named map of tensors serialized into a single buffer: a
//! short UTF-8 text header (magic line, payload checksum, one line per
//! tensor) followed by the raw little-endian payload. The format is
//! bit-exact — `decode(encode(a)) == a` — and the checksum covers
//! everything after the checksum line, so a corrupted byte anywhere in the
//! tensor table or payload is caught at load time.
//!
//! Merging supports weighted linear combination of any number of archives
//! and spherical interpolation between two. All merge arithmetic runs in
//! f64 regardless of archive dtype; f32 archives round once when the output
//! tensor is constructed.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

// Float transcendentals (exp, ln, ...) for pure no_std graphs. Whenever any
// crate in the build graph links std (tests, the std companion crate), the
// inherent f64 methods shadow these and the import sits idle; both states
// are expected.
#[allow(unused_imports)]
use num_traits::Float;

use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::tensor::{l2_norm, DenseTensor};

const MAGIC: &str = "embedkit checkpoint v1";

/// Storage precision of one archived tensor. Values always live in f64 in
/// memory; `F32` means the tensor was rounded to f32 on construction and is
/// stored as 4-byte words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::MalformedArchive(format!("unknown dtype {other:?}"))),
        }
    }
}

/// One tensor as stored in an archive. For `F32` the data is rounded
/// through f32 at construction, so the in-memory values are exactly what a
/// save/load round trip reproduces.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ArchiveTensor {
    pub fn new(dtype: DType, shape: Vec<usize>, mut data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::EmptyInput("archive tensor shape"));
        }
        let numel: usize = shape.iter().product();
        if numel == 0 || numel != data.len() {
            return Err(Error::ShapeMismatch {
                context: "archive tensor data",
                expected: vec![numel],
                actual: vec![data.len()],
            });
        }
        if let DType::F32 = dtype {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("archive tensor data"));
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn from_dense(t: &DenseTensor, dtype: DType) -> Result<Self> {
        Self::new(dtype, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn to_dense(&self) -> Result<DenseTensor> {
        DenseTensor::new(self.shape.clone(), self.data.clone())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn byte_len(&self) -> usize {
        self.data.len() * self.dtype.size_bytes()
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self.dtype {
            DType::F32 => {
                for &v in &self.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }

    fn read_payload(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let data: Vec<f64> = match dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Self::new(dtype, shape, data)
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::EmptyInput("tensor name"));
    }
    if name.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(Error::invalid(
            "tensor name",
            format!("{name:?} contains whitespace or control characters"),
        ));
    }
    Ok(())
}

/// A named, ordered (sorted by name) collection of tensors with a bit-exact
/// byte encoding. The empty archive is valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointArchive {
    tensors: BTreeMap<String, ArchiveTensor>,
}

impl CheckpointArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArchiveTensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.get(name)
    }

    /// Names in sorted order — also the payload order of [`encode`].
    ///
    /// [`encode`]: CheckpointArchive::encode
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArchiveTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Snapshot encoder weights into an archive at the given precision.
    pub fn from_weights(weights: &EncoderWeights, dtype: DType) -> Result<Self> {
        let mut archive = Self::new();
        for (name, t) in weights.tensors() {
            archive.insert(name.clone(), ArchiveTensor::from_dense(t, dtype)?)?;
        }
        Ok(archive)
    }

    /// Rebuild encoder weights, validating the archive against the config's
    /// exact name set and shapes.
    pub fn to_weights(&self, config: &EncoderConfig) -> Result<EncoderWeights> {
        let mut tensors = BTreeMap::new();
        for (name, t) in &self.tensors {
            tensors.insert(name.clone(), t.to_dense()?);
        }
        EncoderWeights::from_tensors(tensors, config)
    }

    /// Serialize: a text header (magic, checksum, one `tensor` line per
    /// entry in sorted-name order, `end`) followed by the contiguous
    /// little-endian payload. The checksum is SHA-256 over every byte after
    /// the checksum line.
    pub fn encode(&self) -> Vec<u8> {
        let mut table = String::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let dims = t
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            table.push_str(&format!(
                "tensor {name} {} {dims} {} {}\n",
                t.dtype.as_str(),
                payload.len(),
                t.byte_len(),
            ));
            t.write_payload(&mut payload);
        }
        table.push_str("end\n");

        let mut hasher = Sha256::new();
        hasher.update(table.as_bytes());
        hasher.update(&payload);
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }

        let mut out = Vec::with_capacity(MAGIC.len() + 80 + table.len() + payload.len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(format!("checksum sha256 {hex}\n").as_bytes());
        out.extend_from_slice(table.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Parse and verify an encoded archive. Structural problems surface as
    /// [`Error::MalformedArchive`]; any corrupted byte under the checksum
    /// (tensor table or payload) surfaces as [`Error::ChecksumMismatch`].
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        fn next_line(bytes: &[u8], cursor: usize) -> Result<(String, usize)> {
            let rest = &bytes[cursor..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::MalformedArchive("unterminated header line".into()))?;
            let line = core::str::from_utf8(&rest[..nl])
                .map_err(|_| Error::MalformedArchive("header is not UTF-8".into()))?;
            Ok((line.to_string(), cursor + nl + 1))
        }

        let mut cursor = 0usize;
        let (magic, after) = next_line(bytes, cursor)?;
        if magic != MAGIC {
            return Err(Error::MalformedArchive(format!(
                "bad magic line {magic:?}"
            )));
        }
        cursor = after;

        let (checksum_line, after) = next_line(bytes, cursor)?;
        let expected_hex = checksum_line
            .strip_prefix("checksum sha256 ")
            .ok_or_else(|| Error::MalformedArchive("missing checksum line".into()))?
            .to_string();
        if expected_hex.len() != 64 || !expected_hex.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(Error::MalformedArchive("checksum is not 64 hex digits".into()));
        }
        cursor = after;
        let covered_from = cursor;

        // Tensor table: name, dtype, dims, offset, length per line.
        let mut entries: Vec<(String, DType, Vec<usize>, usize, usize)> = Vec::new();
        loop {
            let (line, after) = next_line(bytes, cursor)?;
            cursor = after;
            if line == "end" {
                break;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 6 || fields[0] != "tensor" {
                return Err(Error::MalformedArchive(format!(
                    "bad tensor line {line:?}"
                )));
            }
            let name = fields[1].to_string();
            validate_name(&name)?;
            let dtype = DType::parse(fields[2])?;
            let dims: Vec<usize> = fields[3]
                .split('x')
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| Error::MalformedArchive(format!("bad dims in {line:?}")))
                })
                .collect::<Result<_>>()?;
            let offset: usize = fields[4]
                .parse()
                .map_err(|_| Error::MalformedArchive(format!("bad offset in {line:?}")))?;
            let length: usize = fields[5]
                .parse()
                .map_err(|_| Error::MalformedArchive(format!("bad length in {line:?}")))?;
            entries.push((name, dtype, dims, offset, length));
        }

        let payload = &bytes[cursor..];
        let mut hasher = Sha256::new();
        hasher.update(&bytes[covered_from..]);
        let digest = hasher.finalize();
        let mut actual_hex = String::with_capacity(64);
        for b in digest {
            actual_hex.push_str(&format!("{b:02x}"));
        }
        if actual_hex != expected_hex.to_ascii_lowercase() {
            return Err(Error::ChecksumMismatch {
                expected: expected_hex,
                actual: actual_hex,
            });
        }

        let mut archive = Self::new();
        let mut expected_offset = 0usize;
        for (name, dtype, dims, offset, length) in entries {
            if offset != expected_offset {
                return Err(Error::MalformedArchive(format!(
                    "tensor {name} at offset {offset}, expected contiguous {expected_offset}"
                )));
            }
            let numel: usize = dims.iter().product();
            if length != numel * dtype.size_bytes() {
                return Err(Error::MalformedArchive(format!(
                    "tensor {name} length {length} does not match shape"
                )));
            }
            let end = offset
                .checked_add(length)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| {
                    Error::MalformedArchive(format!("tensor {name} overruns the payload"))
                })?;
            let tensor = ArchiveTensor::read_payload(dtype, dims, &payload[offset..end])?;
            archive.insert(name, tensor)?;
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(Error::MalformedArchive(format!(
                "payload has {} trailing bytes",
                payload.len() - expected_offset
            )));
        }
        Ok(archive)
    }
}

/// How to combine input archives. Linear takes one weight per input;
/// spherical interpolation takes exactly two inputs and a position t.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "method"))]
pub enum MergeSpec {
    Linear { weights: Vec<f64> },
    Slerp { t: f64 },
}

impl MergeSpec {
    pub fn validate(&self, num_inputs: usize) -> Result<()> {
        if num_inputs < 2 {
            return Err(Error::invalid(
                "inputs",
                format!("merging needs at least 2 archives, got {num_inputs}"),
            ));
        }
        match self {
            MergeSpec::Linear { weights } => {
                if weights.len() != num_inputs {
                    return Err(Error::invalid(
                        "weights",
                        format!("{} weights for {num_inputs} archives", weights.len()),
                    ));
                }
                let sum: f64 = weights.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::invalid(
                        "weights",
                        format!("weights sum to {sum}, expected 1"),
                    ));
                }
                Ok(())
            }
            MergeSpec::Slerp { t } => {
                if num_inputs != 2 {
                    return Err(Error::invalid(
                        "inputs",
                        format!("spherical interpolation takes exactly 2 archives, got {num_inputs}"),
                    ));
                }
                if !(0.0..=1.0).contains(t) || !t.is_finite() {
                    return Err(Error::invalid("t", format!("{t} is outside [0, 1]")));
                }
                Ok(())
            }
        }
    }
}

/// Check that every archive carries the same tensors: same name set, and
/// per name the same dtype and shape.
fn check_signatures(inputs: &[&CheckpointArchive]) -> Result<()> {
    let first = inputs[0];
    for other in &inputs[1..] {
        for (name, t) in first.iter() {
            let o = other
                .get(name)
                .ok_or_else(|| Error::UnknownName(name.to_string()))?;
            if o.dtype() != t.dtype() {
                return Err(Error::invalid(
                    "dtype",
                    format!("tensor {name} mixes {} and {}", t.dtype().as_str(), o.dtype().as_str()),
                ));
            }
            if o.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    context: "merge input tensor",
                    expected: t.shape().to_vec(),
                    actual: o.shape().to_vec(),
                });
            }
        }
        for (name, _) in other.iter() {
            if first.get(name).is_none() {
                return Err(Error::UnknownName(name.to_string()));
            }
        }
    }
    Ok(())
}

/// Weighted sum of archives, one weight per input, weights summing to 1
/// (within 1e-12). Per element, the weighted terms are summed in a
/// canonical sorted order, so permuting the (archive, weight) pairs cannot
/// change the result even at the bit level; zero-weight inputs contribute
/// no term at all.
pub fn merge_linear(inputs: &[&CheckpointArchive], weights: &[f64]) -> Result<CheckpointArchive> {
    MergeSpec::Linear {
        weights: weights.to_vec(),
    }
    .validate(inputs.len())?;
    check_signatures(inputs)?;

    let mut out = CheckpointArchive::new();
    for (name, first) in inputs[0].iter() {
        let mut slices: Vec<(&[f64], f64)> = Vec::with_capacity(inputs.len());
        for (archive, &w) in inputs.iter().zip(weights) {
            if w != 0.0 {
                slices.push((archive.get(name).unwrap().data(), w));
            }
        }
        let n = first.data().len();
        let mut data = Vec::with_capacity(n);
        let mut terms: Vec<f64> = Vec::with_capacity(slices.len());
        for i in 0..n {
            terms.clear();
            for &(s, w) in &slices {
                terms.push(w * s[i]);
            }
            terms.sort_by(f64::total_cmp);
            data.push(terms.iter().sum());
        }
        out.insert(
            name,
            ArchiveTensor::new(first.dtype(), first.shape().to_vec(), data)?,
        )?;
    }
    Ok(out)
}

/// Spherical interpolation between two archives. Each tensor is flattened
/// to a vector; with ω the angle between the two, the result is
/// `[sin((1−t)ω)·u + sin(tω)·v] / sin ω`. Angles within 1e-6 of 0 or π
/// fall back to linear interpolation for that tensor, since the sin ω
/// division degenerates. Endpoints are exact: t=0 returns `a`'s tensors
/// bitwise, t=1 returns `b`'s.
pub fn merge_slerp(
    a: &CheckpointArchive,
    b: &CheckpointArchive,
    t: f64,
) -> Result<CheckpointArchive> {
    MergeSpec::Slerp { t }.validate(2)?;
    check_signatures(&[a, b])?;

    let mut out = CheckpointArchive::new();
    for (name, ta) in a.iter() {
        let tb = b.get(name).unwrap();
        let (u, v) = (ta.data(), tb.data());
        let (nu, nv) = (l2_norm(u), l2_norm(v));
        if nu == 0.0 || nv == 0.0 {
            return Err(Error::ZeroNorm("spherical merge input tensor"));
        }
        let mut dot = 0.0;
        for i in 0..u.len() {
            dot += u[i] * v[i];
        }
        let cos = (dot / (nu * nv)).clamp(-1.0, 1.0);
        let omega = cos.acos();

        let (ca, cb) = if omega < 1e-6 || omega > core::f64::consts::PI - 1e-6 {
            (1.0 - t, t)
        } else {
            let sin_omega = omega.sin();
            (
                ((1.0 - t) * omega).sin() / sin_omega,
                (t * omega).sin() / sin_omega,
            )
        };

        let data: Vec<f64> = if cb == 0.0 {
            u.iter().map(|&x| ca * x).collect()
        } else if ca == 0.0 {
            v.iter().map(|&x| cb * x).collect()
        } else {
            u.iter().zip(v).map(|(&x, &y)| ca * x + cb * y).collect()
        };
        out.insert(name, ArchiveTensor::new(ta.dtype(), ta.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Dispatch a merge over a validated spec.
pub fn merge(inputs: &[&CheckpointArchive], spec: &MergeSpec) -> Result<CheckpointArchive> {
    spec.validate(inputs.len())?;
    match spec {
        MergeSpec::Linear { weights } => merge_linear(inputs, weights),
        MergeSpec::Slerp { t } => merge_slerp(inputs[0], inputs[1], *t),
    }
}
