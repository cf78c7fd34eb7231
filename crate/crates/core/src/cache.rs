//! Per-layer KV cache: packed quantized history plus a full-precision window
//! of recent pivotal context (RPC).
//!
//! Every append recomputes the window size as `floor(r * current_rpc)` where
//! `current_rpc` is the tail length after the new tokens land. Everything
//! older than the window is aged out into packed groups: Keys in whole groups
//! of `group_size` tokens (their groups run along the token axis), Values
//! token by token. Aging reads straight out of the tail and writes codes
//! directly into the packed store.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, QuantSpec, QuantizedGroups};
use crate::tensor::Tensor4;
use crate::wire;

/// Window ratio used for high-bit (3/4) layers.
pub const RPC_RATIO_HIGH: f64 = 0.2;
/// Window ratio used for 2-bit layers.
pub const RPC_RATIO_LOW: f64 = 0.1;

pub fn default_rpc_ratio(bits: u32) -> f64 {
    if bits >= 3 {
        RPC_RATIO_HIGH
    } else {
        RPC_RATIO_LOW
    }
}

/// `floor(r * current_rpc)`.
pub fn rpc_target(current_rpc: usize, r: f64) -> usize {
    // The epsilon keeps products such as 0.29 * 100 from landing one below
    // the exact integer; it is far below the spacing of any real count.
    (r * current_rpc as f64 + 1e-9).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantConfig {
    pub layer_index: usize,
    pub key_bits: u32,
    pub value_bits: u32,
    pub key_rpc_ratio: f64,
    pub value_rpc_ratio: f64,
    pub group_size: usize,
}

impl LayerQuantConfig {
    /// Bits with the default ratio for their tier (0.2 for 3/4 bits, 0.1 for 2).
    pub fn tiered(layer_index: usize, key_bits: u32, value_bits: u32, group_size: usize) -> Self {
        Self {
            layer_index,
            key_bits,
            value_bits,
            key_rpc_ratio: default_rpc_ratio(key_bits),
            value_rpc_ratio: default_rpc_ratio(value_bits),
            group_size,
        }
    }

    /// Ratio 1 on both paths: nothing is ever quantized.
    pub fn full_precision(layer_index: usize, group_size: usize) -> Self {
        Self {
            layer_index,
            key_bits: 4,
            value_bits: 4,
            key_rpc_ratio: 1.0,
            value_rpc_ratio: 1.0,
            group_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, bits) in [("key_bits", self.key_bits), ("value_bits", self.value_bits)] {
            if !(2..=4).contains(&bits) {
                return Err(Error::Config(format!(
                    "layer {}: {name} = {bits}, expected 2, 3 or 4",
                    self.layer_index
                )));
            }
        }
        for (name, r) in [
            ("key_rpc_ratio", self.key_rpc_ratio),
            ("value_rpc_ratio", self.value_rpc_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!(
                    "layer {}: {name} = {r} outside [0, 1]",
                    self.layer_index
                )));
            }
        }
        if self.group_size == 0 {
            return Err(Error::Config(format!(
                "layer {}: group_size must be positive",
                self.layer_index
            )));
        }
        Ok(())
    }

    pub fn key_spec(&self) -> QuantSpec {
        QuantSpec::key(self.key_bits, self.group_size).expect("validated config")
    }

    pub fn value_spec(&self) -> QuantSpec {
        QuantSpec::value(self.value_bits, self.group_size).expect("validated config")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheDims {
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl CacheDims {
    /// Elements per token across batch and heads.
    pub fn frame(&self) -> usize {
        self.batch * self.heads * self.head_dim
    }
}

/// Full-precision tokens stored token-major as `[T, B, nh, D]` frames so the
/// oldest tokens can be dropped from the front.
#[derive(Debug, Clone, PartialEq)]
pub struct TailBuffer {
    dims: CacheDims,
    data: Vec<f32>,
}

impl TailBuffer {
    fn new(dims: CacheDims) -> Self {
        Self {
            dims,
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dims.frame().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, t: usize, b: usize, h: usize) -> &[f32] {
        let d = self.dims.head_dim;
        let start = t * self.dims.frame() + (b * self.dims.heads + h) * d;
        &self.data[start..start + d]
    }

    #[inline]
    pub fn get(&self, t: usize, b: usize, h: usize, d: usize) -> f32 {
        self.data[t * self.dims.frame() + (b * self.dims.heads + h) * self.dims.head_dim + d]
    }

    fn push_tensor(&mut self, x: &Tensor4) {
        self.data.reserve(x.data().len());
        for t in 0..x.tokens() {
            for b in 0..x.batch() {
                for h in 0..x.heads() {
                    self.data.extend_from_slice(x.row(b, h, t));
                }
            }
        }
    }

    fn drain_front(&mut self, tokens: usize) {
        self.data.drain(..tokens * self.dims.frame());
    }

    fn elements(&self) -> usize {
        self.data.len()
    }
}

/// What one path (Key or Value) did during an append.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PathStep {
    pub current_rpc: usize,
    pub target: usize,
    pub quantized: usize,
    pub tail: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RpcStep {
    pub step: usize,
    pub appended: usize,
    pub key: PathStep,
    pub value: PathStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MemoryReport {
    pub packed_payload_bits: u64,
    pub metadata_bits: u64,
    pub tail_bits: u64,
    pub total_bits: u64,
    pub fp16_baseline_bits: u64,
    pub compression_ratio: f64,
}

impl MemoryReport {
    pub fn from_parts(payload: u64, metadata: u64, tail: u64, baseline: u64) -> Self {
        let total = payload + metadata + tail;
        Self {
            packed_payload_bits: payload,
            metadata_bits: metadata,
            tail_bits: tail,
            total_bits: total,
            fp16_baseline_bits: baseline,
            // An empty cache compresses nothing; report 1 rather than 0/0.
            compression_ratio: if total == 0 {
                1.0
            } else {
                baseline as f64 / total as f64
            },
        }
    }

    /// Sums reports, e.g. across layers.
    pub fn combine<'a>(reports: impl IntoIterator<Item = &'a MemoryReport>) -> Self {
        let (mut p, mut m, mut t, mut b) = (0, 0, 0, 0);
        for r in reports {
            p += r.packed_payload_bits;
            m += r.metadata_bits;
            t += r.tail_bits;
            b += r.fp16_baseline_bits;
        }
        Self::from_parts(p, m, t, b)
    }
}

/// Bits charged per group: a 16-bit scale and a 16-bit minimum.
pub const METADATA_BITS_PER_GROUP: u64 = 32;
/// Bits charged per full-precision element.
pub const FP16_BITS: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct KVLayerCache {
    config: LayerQuantConfig,
    dims: CacheDims,
    key_groups: Vec<QuantizedGroups>,
    value_groups: Vec<QuantizedGroups>,
    key_tail: TailBuffer,
    value_tail: TailBuffer,
    total_tokens: usize,
    history: Vec<RpcStep>,
}

impl KVLayerCache {
    pub fn new(config: LayerQuantConfig, dims: CacheDims) -> Result<Self> {
        config.validate()?;
        if dims.batch == 0 || dims.heads == 0 || dims.head_dim == 0 {
            return Err(Error::Shape(format!("degenerate cache dims {dims:?}")));
        }
        Ok(Self {
            config,
            dims,
            key_groups: Vec::new(),
            value_groups: Vec::new(),
            key_tail: TailBuffer::new(dims),
            value_tail: TailBuffer::new(dims),
            total_tokens: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &LayerQuantConfig {
        &self.config
    }

    pub fn dims(&self) -> CacheDims {
        self.dims
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn key_segments(&self) -> &[QuantizedGroups] {
        &self.key_groups
    }

    pub fn value_segments(&self) -> &[QuantizedGroups] {
        &self.value_groups
    }

    pub fn key_tail(&self) -> &TailBuffer {
        &self.key_tail
    }

    pub fn value_tail(&self) -> &TailBuffer {
        &self.value_tail
    }

    pub fn quantized_key_tokens(&self) -> usize {
        self.key_groups.iter().map(|g| g.tokens()).sum()
    }

    pub fn quantized_value_tokens(&self) -> usize {
        self.value_groups.iter().map(|g| g.tokens()).sum()
    }

    /// Window trajectory, one entry per append.
    pub fn history(&self) -> &[RpcStep] {
        &self.history
    }

    fn check_shape(&self, x: &Tensor4, what: &str) -> Result<()> {
        let [b, h, t, d] = x.shape();
        if b != self.dims.batch || h != self.dims.heads || d != self.dims.head_dim || t == 0 {
            return Err(Error::Shape(format!(
                "{what} shape {:?} incompatible with cache dims {:?}",
                x.shape(),
                self.dims
            )));
        }
        Ok(())
    }

    /// Appends `t` new tokens (prefill when `t > 1`, decode when `t == 1`)
    /// and applies the window shrink rule to each path independently.
    pub fn append(&mut self, new_keys: &Tensor4, new_values: &Tensor4) -> Result<RpcStep> {
        self.check_shape(new_keys, "keys")?;
        self.check_shape(new_values, "values")?;
        if new_keys.tokens() != new_values.tokens() {
            return Err(Error::Shape(format!(
                "{} key tokens vs {} value tokens",
                new_keys.tokens(),
                new_values.tokens()
            )));
        }
        let t = new_keys.tokens();
        self.key_tail.push_tensor(new_keys);
        self.value_tail.push_tensor(new_values);
        self.total_tokens += t;

        let gs = self.config.group_size;
        let dims = self.dims;

        let key_current = self.key_tail.len();
        let key_target = rpc_target(key_current, self.config.key_rpc_ratio);
        let key_age = (key_current - key_target) / gs * gs;
        if key_age > 0 {
            let tail = &self.key_tail;
            let seg = quant::quantize_keys_with(
                [dims.batch, dims.heads, key_age, dims.head_dim],
                self.config.key_spec(),
                |b, h, t, d| tail.get(t, b, h, d),
            )?;
            self.key_groups.push(seg);
            self.key_tail.drain_front(key_age);
        }

        let value_current = self.value_tail.len();
        let value_target = rpc_target(value_current, self.config.value_rpc_ratio);
        let value_age = value_current - value_target;
        if value_age > 0 {
            let tail = &self.value_tail;
            let seg = quant::quantize_values_with(
                [dims.batch, dims.heads, value_age, dims.head_dim],
                self.config.value_spec(),
                |b, h, t, d| tail.get(t, b, h, d),
            )?;
            self.value_groups.push(seg);
            self.value_tail.drain_front(value_age);
        }

        let step = RpcStep {
            step: self.history.len(),
            appended: t,
            key: PathStep {
                current_rpc: key_current,
                target: key_target,
                quantized: key_age,
                tail: self.key_tail.len(),
            },
            value: PathStep {
                current_rpc: value_current,
                target: value_target,
                quantized: value_age,
                tail: self.value_tail.len(),
            },
        };
        self.history.push(step);
        Ok(step)
    }

    pub fn memory_usage(&self) -> MemoryReport {
        let segments = self.key_groups.iter().chain(&self.value_groups);
        let (payload, groups) = segments.fold((0u64, 0u64), |(p, g), s| {
            (p + s.payload_bits(), g + s.group_count() as u64)
        });
        let tail = (self.key_tail.elements() + self.value_tail.elements()) as u64 * FP16_BITS;
        let baseline = self.total_tokens as u64 * self.dims.frame() as u64 * FP16_BITS * 2;
        MemoryReport::from_parts(payload, groups * METADATA_BITS_PER_GROUP, tail, baseline)
    }

    /// Reconstructs the logical `[B, nh, total_tokens, D]` Key and Value
    /// tensors. Allocates the whole cache; meant for tests and the
    /// reference attention path.
    pub fn snapshot_dequantized(&self) -> (Tensor4, Tensor4) {
        (
            self.snapshot_path(&self.key_groups, &self.key_tail),
            self.snapshot_path(&self.value_groups, &self.value_tail),
        )
    }

    fn snapshot_path(&self, segments: &[QuantizedGroups], tail: &TailBuffer) -> Tensor4 {
        let CacheDims {
            batch,
            heads,
            head_dim,
        } = self.dims;
        let mut out = Tensor4::zeros([batch, heads, self.total_tokens, head_dim]);
        let mut t0 = 0;
        for seg in segments {
            let dense = seg.dequantize();
            for b in 0..batch {
                for h in 0..heads {
                    for t in 0..seg.tokens() {
                        out.row_mut(b, h, t0 + t).copy_from_slice(dense.row(b, h, t));
                    }
                }
            }
            t0 += seg.tokens();
        }
        for t in 0..tail.len() {
            for b in 0..batch {
                for h in 0..heads {
                    out.row_mut(b, h, t0 + t).copy_from_slice(tail.row(t, b, h));
                }
            }
        }
        out
    }

    /// Versioned dump, little-endian:
    ///
    /// ```text
    /// "KVQC" u16:version=1
    /// u32:layer_index u8:key_bits u8:value_bits f64:key_rpc f64:value_rpc u32:group_size
    /// u32:batch u32:heads u32:head_dim u64:total_tokens
    /// u32:n_key_segments   segment*   (see QuantizedGroups::write_to)
    /// u32:n_value_segments segment*
    /// u32:key_tail_tokens   f32* token-major [T, B, nh, D]
    /// u32:value_tail_tokens f32*
    /// ```
    ///
    /// The append history is not part of the dump.
    pub fn write_dump(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"KVQC")?;
        wire::put_u16(w, 1)?;
        let c = &self.config;
        wire::put_len(w, c.layer_index)?;
        wire::put_u8(w, c.key_bits as u8)?;
        wire::put_u8(w, c.value_bits as u8)?;
        wire::put_f64(w, c.key_rpc_ratio)?;
        wire::put_f64(w, c.value_rpc_ratio)?;
        wire::put_len(w, c.group_size)?;
        wire::put_len(w, self.dims.batch)?;
        wire::put_len(w, self.dims.heads)?;
        wire::put_len(w, self.dims.head_dim)?;
        wire::put_u64(w, self.total_tokens as u64)?;
        for segs in [&self.key_groups, &self.value_groups] {
            wire::put_len(w, segs.len())?;
            for s in segs {
                s.write_to(w)?;
            }
        }
        for tail in [&self.key_tail, &self.value_tail] {
            wire::put_len(w, tail.len())?;
            for &x in &tail.data {
                wire::put_f32(w, x)?;
            }
        }
        Ok(())
    }

    pub fn read_dump(r: &mut impl Read) -> Result<Self> {
        wire::expect_magic(r, b"KVQC", 1)?;
        let config = LayerQuantConfig {
            layer_index: wire::get_len(r)?,
            key_bits: wire::get_u8(r)? as u32,
            value_bits: wire::get_u8(r)? as u32,
            key_rpc_ratio: wire::get_f64(r)?,
            value_rpc_ratio: wire::get_f64(r)?,
            group_size: wire::get_len(r)?,
        };
        let dims = CacheDims {
            batch: wire::get_len(r)?,
            heads: wire::get_len(r)?,
            head_dim: wire::get_len(r)?,
        };
        let mut cache = Self::new(config, dims)?;
        cache.total_tokens = wire::get_u64(r)? as usize;
        for (segs, spec) in [
            (&mut cache.key_groups, config.key_spec()),
            (&mut cache.value_groups, config.value_spec()),
        ] {
            let n = wire::get_len(r)?;
            for _ in 0..n {
                let seg = QuantizedGroups::read_from(r)?;
                let [b, h, _, d] = seg.shape();
                if seg.spec() != spec || [b, h, d] != [dims.batch, dims.heads, dims.head_dim] {
                    return Err(Error::Format("segment does not match cache config".into()));
                }
                segs.push(seg);
            }
        }
        for tail in [&mut cache.key_tail, &mut cache.value_tail] {
            let n = wire::get_len(r)? * dims.frame();
            tail.data.reserve(n);
            for _ in 0..n {
                tail.data.push(wire::get_f32(r)?);
            }
        }
        if cache.quantized_key_tokens() + cache.key_tail.len() != cache.total_tokens
            || cache.quantized_value_tokens() + cache.value_tail.len() != cache.total_tokens
        {
            return Err(Error::Format("token counts do not add up".into()));
        }
        Ok(cache)
    }
}
