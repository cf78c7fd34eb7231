//! Group-wise asymmetric quantization of Key and Value tensors.
//!
//! Keys are grouped per channel: the `[B, nh, T, D]` tensor is viewed as
//! `[B * nh * D, T]` and every row is cut into runs of `group_size`
//! consecutive tokens. Values are grouped per token: every `(b, h, t)` row of
//! `D` channels is cut into runs of `group_size` channels, the last run
//! possibly shorter.
//!
//! Each group stores `min_val` and `scale = (max - min) / q_max`. With the
//! `Mixed3` layout the field maximum depends on the packed position, so the
//! step used for an element is `scale * 7 / q_max(position)`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::bitpack::{Layout, PackedBuffer, PackedWriter};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use crate::wire;

pub const DEFAULT_GROUP_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    PerChannelKey,
    PerTokenValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub grouping: Grouping,
    pub group_size: usize,
}

impl QuantSpec {
    pub fn new(bits: u32, grouping: Grouping, group_size: usize) -> Result<Self> {
        Layout::for_bits(bits)?;
        if group_size == 0 {
            return Err(Error::Config("group_size must be positive".into()));
        }
        Ok(Self {
            bits,
            grouping,
            group_size,
        })
    }

    pub fn key(bits: u32, group_size: usize) -> Result<Self> {
        Self::new(bits, Grouping::PerChannelKey, group_size)
    }

    pub fn value(bits: u32, group_size: usize) -> Result<Self> {
        Self::new(bits, Grouping::PerTokenValue, group_size)
    }

    pub fn layout(&self) -> Layout {
        Layout::for_bits(self.bits).expect("validated at construction")
    }

    /// Group-level q_max the scale is computed against.
    pub fn qmax(&self) -> u32 {
        nominal_qmax(self.bits)
    }
}

/// `2^b - 1` for uniform widths, 7 for `Mixed3`.
pub fn nominal_qmax(bits: u32) -> u32 {
    if bits == 3 {
        crate::bitpack::MIXED3_QMAX
    } else {
        (1 << bits) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMeta {
    pub scale: f32,
    pub min_val: f32,
}

impl GroupMeta {
    fn from_range(lo: f32, hi: f32, q_max: u32) -> Self {
        let scale = ((hi as f64 - lo as f64) / q_max as f64) as f32;
        Self { scale, min_val: lo }
    }

    /// Quantization step for a field whose maximum is `q_max`, given the
    /// group was scaled against `nominal`.
    #[inline]
    pub fn step_for(&self, q_max: u32, nominal: u32) -> f32 {
        if q_max == nominal {
            self.scale
        } else {
            self.scale * nominal as f32 / q_max as f32
        }
    }

    #[inline]
    pub fn dequantize(&self, code: u32, step: f32) -> f32 {
        code as f32 * step + self.min_val
    }
}

pub fn compute_meta(group: &[f32], q_max: u32) -> Result<GroupMeta> {
    if group.is_empty() {
        return Err(Error::EmptyGroup);
    }
    if q_max == 0 {
        return Err(Error::Config("q_max must be at least 1".into()));
    }
    let (lo, hi) = min_max(group.iter().copied());
    Ok(GroupMeta::from_range(lo, hi, q_max))
}

fn min_max(values: impl Iterator<Item = f32>) -> (f32, f32) {
    values.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    })
}

/// `clip(round((x - min) / step), 0, q_max)`; a zero step maps to code 0.
#[inline]
pub fn quantize_element(x: f32, min_val: f32, step: f32, q_max: u32) -> u32 {
    if step == 0.0 {
        return 0;
    }
    // f64::round is half-away-from-zero.
    let q = ((x as f64 - min_val as f64) / step as f64).round();
    q.clamp(0.0, q_max as f64) as u32
}

pub fn quantize_group(group: &[f32], meta: GroupMeta, q_max: u32) -> Vec<u32> {
    group
        .iter()
        .map(|&x| quantize_element(x, meta.min_val, meta.scale, q_max))
        .collect()
}

pub fn dequantize_group(codes: &[u32], meta: GroupMeta) -> Vec<f32> {
    codes
        .iter()
        .map(|&q| meta.dequantize(q, meta.scale))
        .collect()
}

/// A quantized `[B, nh, T, D]` segment: per-group metadata plus packed codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGroups {
    spec: QuantSpec,
    shape: [usize; 4],
    meta: Vec<GroupMeta>,
    codes: PackedBuffer,
}

impl QuantizedGroups {
    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn tokens(&self) -> usize {
        self.shape[2]
    }

    pub fn meta(&self) -> &[GroupMeta] {
        &self.meta
    }

    pub fn codes(&self) -> &PackedBuffer {
        &self.codes
    }

    pub fn group_count(&self) -> usize {
        self.meta.len()
    }

    pub fn payload_bits(&self) -> u64 {
        self.codes.payload_bits()
    }

    /// Groups along one row of the grouping axis.
    fn groups_per_row(&self) -> usize {
        let [_, _, t, d] = self.shape;
        match self.spec.grouping {
            Grouping::PerChannelKey => t / self.spec.group_size,
            Grouping::PerTokenValue => d.div_ceil(self.spec.group_size),
        }
    }

    /// `(code index, group index)` for element `(b, h, t, d)`.
    #[inline]
    fn locate(&self, b: usize, h: usize, t: usize, d: usize) -> (usize, usize) {
        let [_, nh, tt, dd] = self.shape;
        let gs = self.spec.group_size;
        match self.spec.grouping {
            Grouping::PerChannelKey => {
                let row = (b * nh + h) * dd + d;
                (row * tt + t, row * (tt / gs) + t / gs)
            }
            Grouping::PerTokenValue => {
                let row = (b * nh + h) * tt + t;
                (row * dd + d, row * dd.div_ceil(gs) + d / gs)
            }
        }
    }

    /// Dequantizes a single element straight from the packed store.
    #[inline]
    pub fn value_at(&self, b: usize, h: usize, t: usize, d: usize) -> f32 {
        let (ci, gi) = self.locate(b, h, t, d);
        let layout = self.codes.layout();
        let meta = self.meta[gi];
        let step = meta.step_for(layout.qmax_at(ci), self.spec.qmax());
        meta.dequantize(self.codes.code(ci), step)
    }

    /// `out[i] += weight * x_i` over one grouping row: the `T` tokens of
    /// Key channel `(b, h, d)`, read straight from the packed codes. Yields
    /// exactly the values of [`Self::value_at`].
    pub fn accumulate_key_channel(&self, b: usize, h: usize, d: usize, weight: f32, out: &mut [f32]) {
        debug_assert_eq!(self.spec.grouping, Grouping::PerChannelKey);
        let [_, nh, tt, dd] = self.shape;
        debug_assert_eq!(out.len(), tt);
        let row = (b * nh + h) * dd + d;
        self.accumulate_row(row * tt, row * self.groups_per_row(), weight, out);
    }

    /// `out[d] += weight * x_d` over the `D` channels of Value token `(b, h, t)`.
    pub fn accumulate_value_token(&self, b: usize, h: usize, t: usize, weight: f32, out: &mut [f32]) {
        debug_assert_eq!(self.spec.grouping, Grouping::PerTokenValue);
        let [_, nh, tt, dd] = self.shape;
        debug_assert_eq!(out.len(), dd);
        let row = (b * nh + h) * tt + t;
        self.accumulate_row(row * dd, row * self.groups_per_row(), weight, out);
    }

    /// A grouping row is a contiguous run of codes whose groups start at the
    /// row start, so metadata changes every `group_size` codes.
    #[inline]
    fn accumulate_row(&self, code0: usize, group0: usize, weight: f32, out: &mut [f32]) {
        let nominal = self.spec.qmax();
        let mut codes = self.codes.iter_from(code0);
        for (k, chunk) in out.chunks_mut(self.spec.group_size).enumerate() {
            let meta = self.meta[group0 + k];
            for o in chunk {
                let (code, q_max) = codes.next().expect("row lies inside the segment");
                *o += weight * meta.dequantize(code, meta.step_for(q_max, nominal));
            }
        }
    }

    /// Materializes the whole segment, group by group.
    pub fn dequantize(&self) -> Tensor4 {
        let [bsz, nh, tt, dd] = self.shape;
        let gs = self.spec.group_size;
        let layout = self.codes.layout();
        let nominal = self.spec.qmax();
        let codes = self.codes.unpack_all();
        let mut out = Tensor4::zeros(self.shape);
        let gpr = self.groups_per_row();
        let mut start = 0usize;
        for (gi, meta) in self.meta.iter().enumerate() {
            let row = gi / gpr;
            let chunk = gi % gpr;
            let len = match self.spec.grouping {
                Grouping::PerChannelKey => gs,
                Grouping::PerTokenValue => gs.min(dd - chunk * gs),
            };
            for k in 0..len {
                let ci = start + k;
                let x = meta.dequantize(codes[ci], meta.step_for(layout.qmax_at(ci), nominal));
                match self.spec.grouping {
                    Grouping::PerChannelKey => {
                        let (bh, d) = (row / dd, row % dd);
                        out.set(bh / nh, bh % nh, chunk * gs + k, d, x);
                    }
                    Grouping::PerTokenValue => {
                        let (bh, t) = (row / tt, row % tt);
                        out.set(bh / nh, bh % nh, t, chunk * gs + k, x);
                    }
                }
            }
            start += len;
        }
        debug_assert_eq!(start, bsz * nh * tt * dd);
        out
    }

    /// Binary layout, all integers little-endian:
    ///
    /// ```text
    /// "KVQG" u16:version=1 u8:bits u8:grouping(0=key,1=value) u32:group_size
    /// u32 x4:shape u32:group_count u32:code_count u32:word_count
    /// group_count x (f32:scale f32:min_val)
    /// word_count x u32
    /// ```
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"KVQG")?;
        wire::put_u16(w, 1)?;
        wire::put_u8(w, self.codes.layout_tag())?;
        wire::put_u8(
            w,
            match self.spec.grouping {
                Grouping::PerChannelKey => 0,
                Grouping::PerTokenValue => 1,
            },
        )?;
        wire::put_len(w, self.spec.group_size)?;
        for s in self.shape {
            wire::put_len(w, s)?;
        }
        wire::put_len(w, self.meta.len())?;
        wire::put_len(w, self.codes.len())?;
        wire::put_len(w, self.codes.words().len())?;
        for m in &self.meta {
            wire::put_f32(w, m.scale)?;
            wire::put_f32(w, m.min_val)?;
        }
        for &word in self.codes.words() {
            wire::put_u32(w, word)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        wire::expect_magic(r, b"KVQG", 1)?;
        let layout = PackedBuffer::layout_from_tag(wire::get_u8(r)?)?;
        let grouping = match wire::get_u8(r)? {
            0 => Grouping::PerChannelKey,
            1 => Grouping::PerTokenValue,
            g => return Err(Error::Format(format!("unknown grouping tag {g}"))),
        };
        let spec = QuantSpec::new(layout.bits(), grouping, wire::get_len(r)?)?;
        let mut shape = [0usize; 4];
        for s in &mut shape {
            *s = wire::get_len(r)?;
        }
        let groups = wire::get_len(r)?;
        let code_count = wire::get_len(r)?;
        let word_count = wire::get_len(r)?;
        let mut meta = Vec::with_capacity(groups);
        for _ in 0..groups {
            let scale = wire::get_f32(r)?;
            let min_val = wire::get_f32(r)?;
            meta.push(GroupMeta { scale, min_val });
        }
        let mut words = Vec::with_capacity(word_count);
        for _ in 0..word_count {
            words.push(wire::get_u32(r)?);
        }
        let codes = PackedBuffer::from_parts(words, layout, code_count)?;
        let out = Self {
            spec,
            shape,
            meta,
            codes,
        };
        let elements: usize = shape.iter().product();
        if code_count != elements || out.meta.len() != expected_groups(&spec, shape) {
            return Err(Error::Format(format!(
                "segment header inconsistent with shape {shape:?}"
            )));
        }
        Ok(out)
    }
}

fn expected_groups(spec: &QuantSpec, shape: [usize; 4]) -> usize {
    let [b, nh, t, d] = shape;
    match spec.grouping {
        Grouping::PerChannelKey => b * nh * d * (t / spec.group_size),
        Grouping::PerTokenValue => b * nh * t * d.div_ceil(spec.group_size),
    }
}

/// Streams one group: a min/max scan, then each code goes straight into the
/// packed writer.
fn emit_group(
    writer: &mut PackedWriter,
    nominal: u32,
    len: usize,
    get: impl Fn(usize) -> f32,
) -> Result<GroupMeta> {
    let (lo, hi) = min_max((0..len).map(&get));
    let meta = GroupMeta::from_range(lo, hi, nominal);
    for k in 0..len {
        let q_max = writer.next_qmax();
        let step = meta.step_for(q_max, nominal);
        writer.push(quantize_element(get(k), meta.min_val, step, q_max))?;
    }
    Ok(meta)
}

/// Per-channel Key quantization over an arbitrary element source.
pub(crate) fn quantize_keys_with(
    shape: [usize; 4],
    spec: QuantSpec,
    get: impl Fn(usize, usize, usize, usize) -> f32,
) -> Result<QuantizedGroups> {
    if spec.grouping != Grouping::PerChannelKey {
        return Err(Error::Config("key quantization needs per-channel grouping".into()));
    }
    let [bsz, nh, tt, dd] = shape;
    let gs = spec.group_size;
    if tt % gs != 0 {
        return Err(Error::Shape(format!(
            "key chunk of {tt} tokens is not a multiple of group size {gs}"
        )));
    }
    let nominal = spec.qmax();
    let mut writer = PackedWriter::with_capacity(spec.layout(), bsz * nh * tt * dd);
    let mut meta = Vec::with_capacity(bsz * nh * dd * (tt / gs));
    for b in 0..bsz {
        for h in 0..nh {
            for d in 0..dd {
                for g in 0..tt / gs {
                    let base = g * gs;
                    meta.push(emit_group(&mut writer, nominal, gs, |k| get(b, h, base + k, d))?);
                }
            }
        }
    }
    Ok(QuantizedGroups {
        spec,
        shape,
        meta,
        codes: writer.finish(),
    })
}

/// Per-token Value quantization over an arbitrary element source.
pub(crate) fn quantize_values_with(
    shape: [usize; 4],
    spec: QuantSpec,
    get: impl Fn(usize, usize, usize, usize) -> f32,
) -> Result<QuantizedGroups> {
    if spec.grouping != Grouping::PerTokenValue {
        return Err(Error::Config("value quantization needs per-token grouping".into()));
    }
    let [bsz, nh, tt, dd] = shape;
    let gs = spec.group_size;
    let nominal = spec.qmax();
    let mut writer = PackedWriter::with_capacity(spec.layout(), bsz * nh * tt * dd);
    let mut meta = Vec::with_capacity(bsz * nh * tt * dd.div_ceil(gs));
    for b in 0..bsz {
        for h in 0..nh {
            for t in 0..tt {
                for g in 0..dd.div_ceil(gs) {
                    let base = g * gs;
                    let len = gs.min(dd - base);
                    meta.push(emit_group(&mut writer, nominal, len, |k| get(b, h, t, base + k))?);
                }
            }
        }
    }
    Ok(QuantizedGroups {
        spec,
        shape,
        meta,
        codes: writer.finish(),
    })
}

pub fn quantize_key_tensor(keys: &Tensor4, spec: QuantSpec) -> Result<QuantizedGroups> {
    quantize_keys_with(keys.shape(), spec, |b, h, t, d| keys.get(b, h, t, d))
}

pub fn quantize_value_tensor(values: &Tensor4, spec: QuantSpec) -> Result<QuantizedGroups> {
    quantize_values_with(values.shape(), spec, |b, h, t, d| values.get(b, h, t, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-3.0f32..3.0))
    }

    #[test]
    fn meta_examples() {
        let m = compute_meta(&[0.0, 1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(m, GroupMeta { scale: 1.0, min_val: 0.0 });
        let c = compute_meta(&[5.0, 5.0, 5.0], 3).unwrap();
        assert_eq!(c, GroupMeta { scale: 0.0, min_val: 5.0 });
        assert!(matches!(compute_meta(&[], 3), Err(Error::EmptyGroup)));
    }

    #[test]
    fn meta_matches_direct_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let g: Vec<f32> = (0..32).map(|_| rng.random_range(-10.0f32..10.0)).collect();
            let mut lo = g[0];
            let mut hi = g[0];
            for &x in &g {
                if x < lo {
                    lo = x;
                }
                if x > hi {
                    hi = x;
                }
            }
            let m = compute_meta(&g, 15).unwrap();
            assert_eq!(m.min_val, lo);
            assert_eq!(m.scale, ((hi as f64 - lo as f64) / 15.0) as f32);
        }
    }

    #[test]
    fn quantize_group_examples() {
        let meta = GroupMeta { scale: 1.0, min_val: 0.0 };
        assert_eq!(quantize_group(&[0.0, 1.0, 1.4, 3.0], meta, 3), vec![0, 1, 1, 3]);
        let c = compute_meta(&[5.0; 3], 3).unwrap();
        assert_eq!(quantize_group(&[5.0; 3], c, 3), vec![0, 0, 0]);
        let m = compute_meta(&[-1.0, 0.0, 2.0], 3).unwrap();
        assert_eq!(m, GroupMeta { scale: 1.0, min_val: -1.0 });
        assert_eq!(quantize_group(&[-1.0, 0.0, 2.0], m, 3), vec![0, 1, 3]);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(quantize_element(0.5, 0.0, 1.0, 3), 1);
        assert_eq!(quantize_element(2.5, 0.0, 1.0, 3), 3);
        assert_eq!(quantize_element(1.49, 0.0, 1.0, 3), 1);
    }

    #[test]
    fn dequantize_group_examples() {
        let out = dequantize_group(&[0, 1, 1, 3], GroupMeta { scale: 1.0, min_val: 0.0 });
        assert_eq!(out, vec![0.0, 1.0, 1.0, 3.0]);
        let err = out
            .iter()
            .zip([0.0f32, 1.0, 1.4, 3.0])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!((err - 0.4).abs() < 1e-6 && err <= 0.5);
        let c = dequantize_group(&[0, 0, 0], GroupMeta { scale: 0.0, min_val: 5.0 });
        assert_eq!(c, vec![5.0; 3]);
    }

    #[test]
    fn key_constant_channel_is_lossless() {
        let keys = Tensor4::from_fn([1, 1, 32, 2], |_, _, t, d| if d == 0 { 1.25 } else { t as f32 * 0.37 });
        let q = quantize_key_tensor(&keys, QuantSpec::key(2, 32).unwrap()).unwrap();
        let back = q.dequantize();
        for t in 0..32 {
            assert_eq!(back.get(0, 0, t, 0), 1.25);
        }
        assert_eq!(q.group_count(), 2);
    }

    #[test]
    fn key_rejects_partial_chunk_and_wrong_grouping() {
        let keys = Tensor4::zeros([1, 1, 40, 4]);
        assert!(matches!(
            quantize_key_tensor(&keys, QuantSpec::key(4, 32).unwrap()),
            Err(Error::Shape(_))
        ));
        assert!(quantize_key_tensor(&keys, QuantSpec::value(4, 8).unwrap()).is_err());
        assert!(quantize_value_tensor(&keys, QuantSpec::key(4, 8).unwrap()).is_err());
    }

    fn check_bound(orig: &Tensor4, q: &QuantizedGroups) {
        let back = q.dequantize();
        let [b, nh, t, d] = orig.shape();
        for bi in 0..b {
            for h in 0..nh {
                for ti in 0..t {
                    for di in 0..d {
                        let (ci, gi) = q.locate(bi, h, ti, di);
                        let meta = q.meta()[gi];
                        let step = meta.step_for(q.codes().layout().qmax_at(ci), q.spec().qmax());
                        let x = orig.get(bi, h, ti, di);
                        let err = (x - back.get(bi, h, ti, di)).abs();
                        assert!(err <= step / 2.0 + 1e-6, "err {err} step {step}");
                        assert_eq!(back.get(bi, h, ti, di), q.value_at(bi, h, ti, di));
                    }
                }
            }
        }
    }

    #[test]
    fn key_and_value_error_bound_all_bits() {
        for bits in [1, 2, 3, 4] {
            let keys = random_tensor([2, 2, 64, 8], bits as u64);
            check_bound(&keys, &quantize_key_tensor(&keys, QuantSpec::key(bits, 32).unwrap()).unwrap());
            let vals = random_tensor([2, 2, 5, 40], 10 + bits as u64);
            check_bound(&vals, &quantize_value_tensor(&vals, QuantSpec::value(bits, 32).unwrap()).unwrap());
        }
    }

    #[test]
    fn value_partial_group_has_its_own_meta() {
        let vals = random_tensor([1, 1, 3, 40], 9);
        let q = quantize_value_tensor(&vals, QuantSpec::value(4, 32).unwrap()).unwrap();
        assert_eq!(q.group_count(), 6);
        let tail: Vec<f32> = vals.row(0, 0, 1)[32..].to_vec();
        let direct = compute_meta(&tail, 15).unwrap();
        assert_eq!(q.meta()[3], direct);
    }

    #[test]
    fn value_constant_token_is_lossless() {
        let vals = Tensor4::from_fn([1, 1, 1, 32], |_, _, _, _| -0.75);
        for bits in [2, 3, 4] {
            let q = quantize_value_tensor(&vals, QuantSpec::value(bits, 32).unwrap()).unwrap();
            assert_eq!(q.dequantize(), vals);
        }
    }

    #[test]
    fn value_token_isolation() {
        let vals = random_tensor([1, 2, 6, 32], 4);
        let mut bumped = vals.clone();
        for d in 0..32 {
            let x = bumped.get(0, 1, 3, d);
            bumped.set(0, 1, 3, d, x * 5.0 + 1.0);
        }
        let spec = QuantSpec::value(2, 32).unwrap();
        let a = quantize_value_tensor(&vals, spec).unwrap();
        let b = quantize_value_tensor(&bumped, spec).unwrap();
        let changed_group = 6 + 3;
        for g in 0..a.group_count() {
            if g != changed_group {
                assert_eq!(a.meta()[g], b.meta()[g]);
            }
        }
        for t in 0..6 {
            for h in 0..2 {
                if (h, t) == (1, 3) {
                    continue;
                }
                for d in 0..32 {
                    let (ci, _) = a.locate(0, h, t, d);
                    assert_eq!(a.codes().code(ci), b.codes().code(ci));
                }
            }
        }
    }

    #[test]
    fn more_bits_never_hurt_key_error() {
        let keys = random_tensor([1, 2, 64, 16], 77);
        let sse = |bits| {
            let q = quantize_key_tensor(&keys, QuantSpec::key(bits, 32).unwrap()).unwrap();
            let back = q.dequantize();
            keys.data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
        };
        assert!(sse(4) <= sse(2));
    }

    #[test]
    fn mixed3_tail_position_uses_coarser_step() {
        // Group of 11 spanning exactly one block: position 10 gets q_max 3.
        let vals = Tensor4::from_fn([1, 1, 1, 11], |_, _, _, d| d as f32 / 10.0);
        let q = quantize_value_tensor(&vals, QuantSpec::value(3, 11).unwrap()).unwrap();
        let meta = q.meta()[0];
        let range = 1.0f32;
        assert!((meta.step_for(3, 7) - range / 3.0).abs() < 1e-6);
        let back = q.dequantize();
        let err = (back.get(0, 0, 0, 10) - 1.0).abs();
        assert!(err <= range / 3.0 / 2.0 + 1e-6);
        assert!(q.codes().code(10) <= 3);
    }

    #[test]
    fn segment_serialization_roundtrip_and_golden_bytes() {
        let vals = Tensor4::from_vec([1, 1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let q = quantize_value_tensor(&vals, QuantSpec::value(2, 4).unwrap()).unwrap();
        let mut bytes = Vec::new();
        q.write_to(&mut bytes).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"KVQG");
        expected.extend_from_slice(&[1, 0, 2, 1]);
        expected.extend_from_slice(&4u32.to_le_bytes());
        for s in [1u32, 1, 1, 4] {
            expected.extend_from_slice(&s.to_le_bytes());
        }
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&4u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&0.0f32.to_le_bytes());
        // codes 0,1,2,3 LSB-first at 2 bits: 0b11_10_01_00
        expected.extend_from_slice(&0xE4u32.to_le_bytes());
        assert_eq!(bytes, expected);
        let back = QuantizedGroups::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, q);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(QuantizedGroups::read_from(&mut bad.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn serialization_roundtrip(seed in any::<u64>(), bits in 1u32..=4, t in 1usize..4, key in any::<bool>()) {
            let q = if key {
                let keys = random_tensor([1, 2, 8 * t, 3], seed);
                quantize_key_tensor(&keys, QuantSpec::key(bits, 8).unwrap()).unwrap()
            } else {
                let vals = random_tensor([2, 1, t, 13], seed);
                quantize_value_tensor(&vals, QuantSpec::value(bits, 5).unwrap()).unwrap()
            };
            let mut bytes = Vec::new();
            q.write_to(&mut bytes).unwrap();
            prop_assert_eq!(QuantizedGroups::read_from(&mut bytes.as_slice()).unwrap(), q);
        }
    }
}
