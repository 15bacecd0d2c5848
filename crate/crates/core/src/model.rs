//! Model parameters, metrics and the `FLM1` binary container.
//!
//! Container layout (structural integers big-endian, element data little-endian):
//!
//! ```text
//! "FLM1" | version u8 | current_round u32 | total_rounds u32 | num_samples u64
//! param_count u32  { name_len u16 | name | dtype u8 | ndim u8 | dim u64 * ndim | data_len u64 | data }
//! metric_count u32 { name_len u16 | name | value f64 (LE) }
//! meta_count u32   { key_len u16 | key | value_len u16 | value }
//! ```

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use indexmap::IndexMap;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FLM1";
pub const VERSION: u8 = 1;
/// Bytes before the first parameter entry plus the two trailing section counts.
pub const FIXED_HEADER_LEN: u64 = 4 + 1 + 4 + 4 + 8 + 4 + 4 + 4;
/// Per-parameter bytes excluding the name, the dims and the element data.
pub const PARAM_ENTRY_OVERHEAD: u64 = 2 + 1 + 1 + 8;
pub const METRIC_ENTRY_OVERHEAD: u64 = 2 + 8;
pub const META_ENTRY_OVERHEAD: u64 = 2 + 2;
pub const MAX_NAME_LEN: usize = 255;
pub const MAX_META_VALUE_LEN: usize = u16::MAX as usize;
pub const MAX_NDIM: usize = u8::MAX as usize;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid name {0:?}: must be non-empty and at most 255 bytes")]
    InvalidName(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("meta value for {0:?} exceeds 65535 bytes")]
    ValueTooLong(String),
    #[error("shape {0:?} overflows 64-bit element or byte count")]
    ShapeOverflow(Vec<u64>),
    #[error("tensor rank {0} exceeds 255")]
    RankTooLarge(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("input truncated while reading {0}")]
    TruncatedInput(&'static str),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("length mismatch for {name:?}: expected {expected} bytes, found {found}")]
    LengthMismatch { name: String, expected: u64, found: u64 },
    #[error("{0} trailing bytes after container")]
    TrailingBytes(u64),
    #[error("string is not valid UTF-8")]
    InvalidUtf8,
    #[error("element count {found} does not match shape {shape:?}")]
    ElementCount { shape: Vec<u64>, found: usize },
    #[error("aggregate key {0:?} not present in global model")]
    KeyMismatch(String),
    #[error("shape or dtype mismatch for {0:?}")]
    ShapeMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F32,
    F64,
    I64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I64 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I64),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decodes little-endian element bytes. `bytes.len()` must be a multiple of the dtype size.
    pub fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I64 => TensorData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(bytes.to_vec()),
        }
    }

    fn write_le<W: Write>(&self, w: &mut W) -> io::Result<()> {
        const BLOCK: usize = 8192;
        let mut buf = Vec::with_capacity(BLOCK * 8);
        macro_rules! emit {
            ($v:expr) => {
                for block in $v.chunks(BLOCK) {
                    buf.clear();
                    for x in block {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                    w.write_all(&buf)?;
                }
            };
        }
        match self {
            TensorData::F32(v) => emit!(v),
            TensorData::F64(v) => emit!(v),
            TensorData::I64(v) => emit!(v),
            TensorData::U8(v) => w.write_all(v)?,
        }
        Ok(())
    }

    fn bits_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            _ => false,
        }
    }
}

/// Number of elements for `shape`, or `None` on 64-bit overflow. The empty shape is a scalar.
pub fn element_count(shape: &[u64]) -> Option<u64> {
    shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

/// A dense row-major tensor. Equality compares float payloads by bit pattern.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<u64>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<u64>, data: TensorData) -> Result<Self> {
        if shape.len() > MAX_NDIM {
            return Err(ModelError::RankTooLarge(shape.len()));
        }
        let count = element_count(&shape).ok_or_else(|| ModelError::ShapeOverflow(shape.clone()))?;
        if count
            .checked_mul(data.dtype().size() as u64)
            .is_none()
        {
            return Err(ModelError::ShapeOverflow(shape));
        }
        if count != data.len() as u64 {
            return Err(ModelError::ElementCount {
                shape,
                found: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: TensorData::F64(vec![value]),
        }
    }

    /// A rank-1 `F64` tensor.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len() as u64],
            data: TensorData::F64(values),
        }
    }

    pub fn from_f64(shape: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, TensorData::F64(values))
    }

    pub fn from_f32(shape: Vec<u64>, values: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(values))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn byte_len(&self) -> u64 {
        self.data.len() as u64 * self.dtype().size() as u64
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Element values widened to `f64`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Builds a tensor of this tensor's shape and dtype from `f64` values, narrowing as needed.
    /// Integer dtypes round to nearest and saturate.
    pub fn with_f64_values(&self, values: Vec<f64>) -> Result<Tensor> {
        let data = match self.dtype() {
            DType::F64 => TensorData::F64(values),
            DType::F32 => TensorData::F32(values.into_iter().map(|x| x as f32).collect()),
            DType::I64 => TensorData::I64(values.into_iter().map(|x| x.round() as i64).collect()),
            DType::U8 => TensorData::U8(values.into_iter().map(|x| x.round() as u8).collect()),
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn same_layout(&self, other: &Tensor) -> bool {
        self.dtype() == other.dtype() && self.shape == other.shape
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data.bits_eq(&other.data)
    }
}

pub type ParamMap = IndexMap<String, Tensor>;

/// The unit exchanged between server and clients.
#[derive(Debug, Clone, Default)]
pub struct FLModel {
    pub params: ParamMap,
    pub metrics: BTreeMap<String, f64>,
    pub meta: BTreeMap<String, String>,
    pub current_round: u32,
    pub total_rounds: u32,
    /// Aggregation weight; 0 excludes the model from weighted averaging.
    pub num_samples: u64,
}

impl PartialEq for FLModel {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.metrics.len() == other.metrics.len()
            && self
                .metrics
                .iter()
                .zip(&other.metrics)
                .all(|((ka, va), (kb, vb))| ka == kb && va.to_bits() == vb.to_bits())
            && self.meta == other.meta
            && self.current_round == other.current_round
            && self.total_rounds == other.total_rounds
            && self.num_samples == other.num_samples
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.len() > MAX_NAME_LEN {
        return Err(ModelError::InvalidName(name.to_owned()));
    }
    Ok(())
}

impl FLModel {
    pub fn new(params: ParamMap) -> Self {
        FLModel {
            params,
            ..Default::default()
        }
    }

    /// A model carrying only metrics, as returned by validation tasks.
    pub fn metrics_only(metrics: BTreeMap<String, f64>, num_samples: u64) -> Self {
        FLModel {
            metrics,
            num_samples,
            ..Default::default()
        }
    }

    pub fn with_rounds(mut self, current_round: u32, total_rounds: u32) -> Self {
        self.current_round = current_round;
        self.total_rounds = total_rounds;
        self
    }

    /// Checks name rules and tensor layout. A round counter equal to `total_rounds`
    /// marks a finished job and is accepted.
    pub fn validate(&self) -> Result<()> {
        for (name, tensor) in &self.params {
            check_name(name)?;
            if tensor.shape().len() > MAX_NDIM {
                return Err(ModelError::RankTooLarge(tensor.shape().len()));
            }
        }
        for name in self.metrics.keys() {
            check_name(name)?;
        }
        for (key, value) in &self.meta {
            check_name(key)?;
            if value.len() > MAX_META_VALUE_LEN {
                return Err(ModelError::ValueTooLong(key.clone()));
            }
        }
        Ok(())
    }

    pub fn param_bytes(&self) -> u64 {
        self.params.values().map(Tensor::byte_len).sum()
    }
}

/// Encoded size of one parameter entry, `None` on overflow.
pub fn param_entry_len(name_len: usize, dtype: DType, shape: &[u64]) -> Option<u64> {
    let data = element_count(shape)?.checked_mul(dtype.size() as u64)?;
    PARAM_ENTRY_OVERHEAD
        .checked_add(name_len as u64)?
        .checked_add(8 * shape.len() as u64)?
        .checked_add(data)
}

/// Analytic size of `encode_model(model)`.
pub fn encoded_len(model: &FLModel) -> u64 {
    let params: u64 = model
        .params
        .iter()
        .map(|(n, t)| param_entry_len(n.len(), t.dtype(), t.shape()).unwrap_or(u64::MAX))
        .sum();
    let metrics: u64 = model
        .metrics
        .keys()
        .map(|k| METRIC_ENTRY_OVERHEAD + k.len() as u64)
        .sum();
    let meta: u64 = model
        .meta
        .iter()
        .map(|(k, v)| META_ENTRY_OVERHEAD + k.len() as u64 + v.len() as u64)
        .sum();
    FIXED_HEADER_LEN + params + metrics + meta
}

/// Header fields that precede the parameter entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub current_round: u32,
    pub total_rounds: u32,
    pub num_samples: u64,
    pub param_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamHeader {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub data_len: u64,
}

/// Incremental writer for the container; lets callers stream element data without
/// materializing whole tensors.
pub struct ModelWriter<W: Write> {
    inner: W,
    written: u64,
}

impl<W: Write> ModelWriter<W> {
    pub fn new(inner: W) -> Self {
        ModelWriter { inner, written: 0 }
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes)?;
        self.written += bytes.len() as u64;
        Ok(())
    }

    fn put_str(&mut self, s: &str) -> Result<()> {
        self.put(&(s.len() as u16).to_be_bytes())?;
        self.put(s.as_bytes())
    }

    pub fn write_header(&mut self, header: &ContainerHeader) -> Result<()> {
        self.put(MAGIC)?;
        self.put(&[VERSION])?;
        self.put(&header.current_round.to_be_bytes())?;
        self.put(&header.total_rounds.to_be_bytes())?;
        self.put(&header.num_samples.to_be_bytes())?;
        self.put(&header.param_count.to_be_bytes())
    }

    /// Writes a parameter entry header; exactly `data_len` element bytes must follow
    /// via [`ModelWriter::write_data`].
    pub fn write_param_header(&mut self, name: &str, dtype: DType, shape: &[u64]) -> Result<u64> {
        check_name(name)?;
        if shape.len() > MAX_NDIM {
            return Err(ModelError::RankTooLarge(shape.len()));
        }
        let data_len = element_count(shape)
            .and_then(|c| c.checked_mul(dtype.size() as u64))
            .ok_or_else(|| ModelError::ShapeOverflow(shape.to_vec()))?;
        self.put_str(name)?;
        self.put(&[dtype.code(), shape.len() as u8])?;
        for dim in shape {
            self.put(&dim.to_be_bytes())?;
        }
        self.put(&data_len.to_be_bytes())?;
        Ok(data_len)
    }

    pub fn write_data(&mut self, bytes: &[u8]) -> Result<()> {
        self.put(bytes)
    }

    pub fn write_tensor(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        self.write_param_header(name, tensor.dtype(), tensor.shape())?;
        let mut counting = CountingWriter {
            inner: &mut self.inner,
            count: 0,
        };
        tensor.data.write_le(&mut counting)?;
        self.written += counting.count;
        Ok(())
    }

    pub fn write_trailer(
        &mut self,
        metrics: &BTreeMap<String, f64>,
        meta: &BTreeMap<String, String>,
    ) -> Result<()> {
        self.put(&(metrics.len() as u32).to_be_bytes())?;
        for (name, value) in metrics {
            check_name(name)?;
            self.put_str(name)?;
            self.put(&value.to_le_bytes())?;
        }
        self.put(&(meta.len() as u32).to_be_bytes())?;
        for (key, value) in meta {
            check_name(key)?;
            if value.len() > MAX_META_VALUE_LEN {
                return Err(ModelError::ValueTooLong(key.clone()));
            }
            self.put_str(key)?;
            self.put_str(value)?;
        }
        Ok(())
    }

    pub fn bytes_written(&self) -> u64 {
        self.written
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

struct CountingWriter<'a, W: Write> {
    inner: &'a mut W,
    count: u64,
}

impl<W: Write> Write for CountingWriter<'_, W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.count += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Writes `model` to `w`, returning the number of bytes written.
pub fn encode_model_to<W: Write>(model: &FLModel, w: W) -> Result<u64> {
    model.validate()?;
    let mut writer = ModelWriter::new(w);
    writer.write_header(&ContainerHeader {
        current_round: model.current_round,
        total_rounds: model.total_rounds,
        num_samples: model.num_samples,
        param_count: model.params.len() as u32,
    })?;
    for (name, tensor) in &model.params {
        writer.write_tensor(name, tensor)?;
    }
    writer.write_trailer(&model.metrics, &model.meta)?;
    Ok(writer.bytes_written())
}

pub fn encode_model(model: &FLModel) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(encoded_len(model).min(usize::MAX as u64) as usize);
    encode_model_to(model, &mut out)?;
    Ok(out)
}

/// Incremental reader mirroring [`ModelWriter`].
pub struct ModelReader<R: Read> {
    inner: R,
}

impl<R: Read> ModelReader<R> {
    pub fn new(inner: R) -> Self {
        ModelReader { inner }
    }

    fn take<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| eof(e, what))?;
        Ok(buf)
    }

    fn read_u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take::<1>(what)?[0])
    }

    fn read_u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(what)?))
    }

    fn read_u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(what)?))
    }

    fn read_u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(what)?))
    }

    fn read_string(&mut self, what: &'static str) -> Result<String> {
        let len = self.read_u16(what)? as usize;
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf).map_err(|e| eof(e, what))?;
        String::from_utf8(buf).map_err(|_| ModelError::InvalidUtf8)
    }

    pub fn read_header(&mut self) -> Result<ContainerHeader> {
        let magic: [u8; 4] = self.take("magic")?;
        if &magic != MAGIC {
            return Err(ModelError::BadMagic(magic));
        }
        let version = self.read_u8("version")?;
        if version != VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        Ok(ContainerHeader {
            current_round: self.read_u32("header")?,
            total_rounds: self.read_u32("header")?,
            num_samples: self.read_u64("header")?,
            param_count: self.read_u32("header")?,
        })
    }

    pub fn read_param_header(&mut self) -> Result<ParamHeader> {
        let name = self.read_string("param name")?;
        check_name(&name)?;
        let code = self.read_u8("dtype")?;
        let dtype = DType::from_code(code).ok_or(ModelError::UnknownDtype(code))?;
        let ndim = self.read_u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.read_u64("shape")?);
        }
        let data_len = self.read_u64("data length")?;
        let expected = element_count(&shape)
            .and_then(|c| c.checked_mul(dtype.size() as u64))
            .ok_or_else(|| ModelError::ShapeOverflow(shape.clone()))?;
        if expected != data_len {
            return Err(ModelError::LengthMismatch {
                name,
                expected,
                found: data_len,
            });
        }
        Ok(ParamHeader {
            name,
            dtype,
            shape,
            data_len,
        })
    }

    /// Reads exactly `len` element bytes without trusting `len` for the initial allocation.
    pub fn read_data(&mut self, len: u64) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(len.min(1 << 26) as usize);
        let got = (&mut self.inner).take(len).read_to_end(&mut buf)?;
        if got as u64 != len {
            return Err(ModelError::TruncatedInput("tensor data"));
        }
        Ok(buf)
    }

    pub fn read_tensor(&mut self, header: &ParamHeader) -> Result<Tensor> {
        let bytes = self.read_data(header.data_len)?;
        Tensor::new(
            header.shape.clone(),
            TensorData::from_le_bytes(header.dtype, &bytes),
        )
    }

    pub fn read_trailer(&mut self) -> Result<(BTreeMap<String, f64>, BTreeMap<String, String>)> {
        let mut metrics = BTreeMap::new();
        for _ in 0..self.read_u32("metric count")? {
            let name = self.read_string("metric name")?;
            check_name(&name)?;
            let value = f64::from_le_bytes(self.take("metric value")?);
            metrics.insert(name, value);
        }
        let mut meta = BTreeMap::new();
        for _ in 0..self.read_u32("meta count")? {
            let key = self.read_string("meta key")?;
            check_name(&key)?;
            let value = self.read_string("meta value")?;
            meta.insert(key, value);
        }
        Ok((metrics, meta))
    }

    pub fn into_inner(self) -> R {
        self.inner
    }
}

fn eof(e: io::Error, what: &'static str) -> ModelError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        ModelError::TruncatedInput(what)
    } else {
        ModelError::Io(e)
    }
}

/// Reads one container from `r`; does not check for trailing input.
pub fn decode_model_from<R: Read>(r: R) -> Result<FLModel> {
    let mut reader = ModelReader::new(r);
    let header = reader.read_header()?;
    let mut params = ParamMap::new();
    for _ in 0..header.param_count {
        let ph = reader.read_param_header()?;
        let tensor = reader.read_tensor(&ph)?;
        if params.contains_key(&ph.name) {
            return Err(ModelError::DuplicateName(ph.name));
        }
        params.insert(ph.name, tensor);
    }
    let (metrics, meta) = reader.read_trailer()?;
    Ok(FLModel {
        params,
        metrics,
        meta,
        current_round: header.current_round,
        total_rounds: header.total_rounds,
        num_samples: header.num_samples,
    })
}

pub fn decode_model(bytes: &[u8]) -> Result<FLModel> {
    let mut cursor = bytes;
    let model = decode_model_from(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(ModelError::TrailingBytes(cursor.len() as u64));
    }
    Ok(model)
}

/// Replaces the global parameters present in `aggregate` and advances the round counter.
pub fn model_linear_update(global: &FLModel, aggregate: &ParamMap) -> Result<FLModel> {
    for (name, tensor) in aggregate {
        let current = global
            .params
            .get(name)
            .ok_or_else(|| ModelError::KeyMismatch(name.clone()))?;
        if !current.same_layout(tensor) {
            return Err(ModelError::ShapeMismatch(name.clone()));
        }
    }
    let mut next = global.clone();
    for (name, tensor) in aggregate {
        next.params[name.as_str()] = tensor.clone();
    }
    next.current_round = global.current_round.saturating_add(1);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> FLModel {
        let mut params = ParamMap::new();
        params.insert("a".into(), Tensor::scalar(1.5));
        params.insert(
            "w".into(),
            Tensor::from_f32(vec![2, 2], vec![1.0, -2.0, f32::NAN, f32::INFINITY]).unwrap(),
        );
        params.insert(
            "idx".into(),
            Tensor::new(vec![3], TensorData::I64(vec![-1, 0, i64::MAX])).unwrap(),
        );
        params.insert(
            "empty".into(),
            Tensor::new(vec![0, 4], TensorData::U8(vec![])).unwrap(),
        );
        let mut m = FLModel::new(params).with_rounds(1, 3);
        m.num_samples = 42;
        m.metrics.insert("accuracy".into(), 0.75);
        m.metrics.insert("nan".into(), f64::NAN);
        m.meta.insert("site".into(), "site-1".into());
        m
    }

    #[test]
    fn empty_model_is_header_only() {
        let bytes = encode_model(&FLModel::default()).unwrap();
        assert_eq!(bytes.len() as u64, FIXED_HEADER_LEN);
        assert_eq!(&bytes[..4], b"FLM1");
        assert_eq!(decode_model(&bytes).unwrap(), FLModel::default());
    }

    #[test]
    fn scalar_round_trip_is_bit_exact() {
        let mut params = ParamMap::new();
        params.insert("a".into(), Tensor::scalar(1.5));
        let m = FLModel::new(params);
        let back = decode_model(&encode_model(&m).unwrap()).unwrap();
        assert_eq!(back.params["a"].as_f64().unwrap()[0].to_bits(), 1.5f64.to_bits());
        assert_eq!(back, m);
    }

    #[test]
    fn encoding_matches_size_law() {
        let m = sample_model();
        assert_eq!(encode_model(&m).unwrap().len() as u64, encoded_len(&m));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_model(&sample_model()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(ModelError::BadMagic(_))));
    }

    #[test]
    fn every_truncation_fails_cleanly() {
        let bytes = encode_model(&sample_model()).unwrap();
        for cut in 0..bytes.len() {
            let err = decode_model(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, ModelError::TruncatedInput(_)),
                "cut at {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn unknown_dtype_and_length_mismatch() {
        let mut params = ParamMap::new();
        params.insert("p".into(), Tensor::vector(vec![1.0, 2.0]));
        let bytes = encode_model(&FLModel::new(params)).unwrap();
        // name_len(2) + "p" puts the dtype byte right after the fixed prefix.
        let dtype_at = (FIXED_HEADER_LEN - 8) as usize + 3;
        let mut bad = bytes.clone();
        bad[dtype_at] = 9;
        assert!(matches!(decode_model(&bad), Err(ModelError::UnknownDtype(9))));

        let len_at = dtype_at + 2 + 8;
        let mut bad = bytes.clone();
        bad[len_at + 7] = 15;
        assert!(matches!(
            decode_model(&bad),
            Err(ModelError::LengthMismatch { expected: 16, found: 15, .. })
        ));

        let mut bad = bytes;
        bad.push(0);
        assert!(matches!(decode_model(&bad), Err(ModelError::TrailingBytes(1))));
    }

    #[test]
    fn invalid_names_rejected() {
        let mut params = ParamMap::new();
        params.insert(String::new(), Tensor::scalar(0.0));
        assert!(matches!(
            encode_model(&FLModel::new(params)),
            Err(ModelError::InvalidName(_))
        ));
        let mut params = ParamMap::new();
        params.insert("x".repeat(256), Tensor::scalar(0.0));
        assert!(matches!(
            encode_model(&FLModel::new(params)),
            Err(ModelError::InvalidName(_))
        ));
        let mut params = ParamMap::new();
        params.insert("x".repeat(255), Tensor::scalar(0.0));
        assert!(encode_model(&FLModel::new(params)).is_ok());
    }

    #[test]
    fn shape_overflow_rejected() {
        let err = Tensor::new(vec![u64::MAX, 2], TensorData::F32(vec![])).unwrap_err();
        assert!(matches!(err, ModelError::ShapeOverflow(_)));
        // Element count fits but the byte count does not.
        let err = Tensor::new(vec![1 << 62], TensorData::F64(vec![])).unwrap_err();
        assert!(matches!(err, ModelError::ShapeOverflow(_)));
    }

    #[test]
    fn large_model_sizes_fit_in_64_bit_lengths() {
        // 64 keys, each an F32 array of 2 GiB.
        let per_key_elems = 2u64 * (1 << 30) / 4;
        let total: u64 = (0..64)
            .map(|i| param_entry_len(format!("key_{i}").len(), DType::F32, &[per_key_elems]).unwrap())
            .sum::<u64>()
            + FIXED_HEADER_LEN;
        let data = 64 * 2 * (1u64 << 30);
        assert_eq!(data, 128 * (1u64 << 30));
        assert!(total > data && total - data < 64 * 64);
    }

    #[test]
    fn linear_update_replaces_and_advances() {
        let mut params = ParamMap::new();
        params.insert("w".into(), Tensor::vector(vec![0.0, 0.0]));
        params.insert("b".into(), Tensor::scalar(5.0));
        let global = FLModel::new(params).with_rounds(0, 3);

        let same = model_linear_update(&global, &global.params).unwrap();
        assert_eq!(same.params, global.params);
        assert_eq!(same.current_round, 1);

        let mut agg = ParamMap::new();
        agg.insert("w".into(), Tensor::vector(vec![1.0, 2.0]));
        let next = model_linear_update(&global, &agg).unwrap();

        // map-merge oracle
        let mut merged: std::collections::HashMap<_, _> =
            global.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        merged.extend(agg.iter().map(|(k, v)| (k.clone(), v.clone())));
        assert_eq!(next.params.len(), merged.len());
        for (k, v) in &next.params {
            assert_eq!(&merged[k], v);
        }
        assert_eq!(next.params["w"].as_f64().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_update_rejects_unknown_or_reshaped_keys() {
        let mut params = ParamMap::new();
        params.insert("w".into(), Tensor::vector(vec![0.0, 0.0]));
        let global = FLModel::new(params);
        let mut agg = ParamMap::new();
        agg.insert("z".into(), Tensor::scalar(1.0));
        assert!(matches!(
            model_linear_update(&global, &agg),
            Err(ModelError::KeyMismatch(_))
        ));
        let mut agg = ParamMap::new();
        agg.insert("w".into(), Tensor::vector(vec![1.0]));
        assert!(matches!(
            model_linear_update(&global, &agg),
            Err(ModelError::ShapeMismatch(_))
        ));
    }
}
