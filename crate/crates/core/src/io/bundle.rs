//! Weight bundle: a little-endian container of CRC-checked sections.
//!
//! ```text
//! "SFRD" | u16 version | u16 reserved | [u8; 32] topology hash | u32 sections
//! sections x { [u8; 4] tag | u64 offset | u64 length | u32 crc32 }
//! payloads, in table order
//! ```

use std::fs;
use std::path::Path;

use crate::engine::{BnStats, ModelState, ParamTensor};
use crate::error::{Error, Result};
use crate::freezing::{FreezePlan, FreezeScheme};
use crate::quant::QGraph;
use crate::topology::{NetworkSpec, TopologyHash};

pub const MAGIC: [u8; 4] = *b"SFRD";
pub const FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 2 + 32 + 4;
const ENTRY_LEN: usize = 4 + 8 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionTag {
    Spec,
    FloatWeights,
    FreezePlan,
    QGraph,
    Metrics,
}

impl SectionTag {
    pub const ALL: [SectionTag; 5] = [
        SectionTag::Spec,
        SectionTag::FloatWeights,
        SectionTag::FreezePlan,
        SectionTag::QGraph,
        SectionTag::Metrics,
    ];

    pub fn bytes(self) -> [u8; 4] {
        match self {
            SectionTag::Spec => *b"SPEC",
            SectionTag::FloatWeights => *b"FWTS",
            SectionTag::FreezePlan => *b"FRZP",
            SectionTag::QGraph => *b"QGRF",
            SectionTag::Metrics => *b"METR",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SectionTag::Spec => "SPEC",
            SectionTag::FloatWeights => "FLOAT_WEIGHTS",
            SectionTag::FreezePlan => "FREEZE_PLAN",
            SectionTag::QGraph => "QGRAPH",
            SectionTag::Metrics => "METRICS",
        }
    }

    fn from_bytes(b: [u8; 4]) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.bytes() == b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub spec: NetworkSpec,
    pub weights: Option<ModelState>,
    pub plan: Option<FreezePlan>,
    pub qgraph: Option<QGraph>,
    pub metrics: Option<serde_json::Value>,
}

impl WeightBundle {
    pub fn new(spec: NetworkSpec) -> Self {
        Self {
            spec,
            weights: None,
            plan: None,
            qgraph: None,
            metrics: None,
        }
    }

    pub fn topology(&self) -> TopologyHash {
        self.spec.topology_hash()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let topology = self.topology();
        let mut sections: Vec<(SectionTag, Vec<u8>)> = vec![(SectionTag::Spec, serde_json::to_vec(&self.spec)?)];
        if let Some(w) = &self.weights {
            if w.topology != topology {
                return Err(Error::TopologyMismatch {
                    expected: topology.to_hex(),
                    found: w.topology.to_hex(),
                });
            }
            sections.push((SectionTag::FloatWeights, encode_weights(w)));
        }
        if let Some(p) = &self.plan {
            sections.push((SectionTag::FreezePlan, encode_plan(p)?));
        }
        if let Some(q) = &self.qgraph {
            if q.topology != topology {
                return Err(Error::TopologyMismatch {
                    expected: topology.to_hex(),
                    found: q.topology.to_hex(),
                });
            }
            sections.push((SectionTag::QGraph, serde_json::to_vec(q)?));
        }
        if let Some(m) = &self.metrics {
            sections.push((SectionTag::Metrics, serde_json::to_vec(m)?));
        }

        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&topology.0);
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        let mut offset = (HEADER_LEN + ENTRY_LEN * sections.len()) as u64;
        for (tag, payload) in &sections {
            out.extend_from_slice(&tag.bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
            offset += payload.len() as u64;
        }
        for (_, payload) in &sections {
            out.extend_from_slice(payload);
        }
        Ok(out)
    }

    /// Parse and verify a bundle. With `expected`, the stored topology must
    /// match that spec.
    pub fn from_bytes(bytes: &[u8], expected: Option<&NetworkSpec>) -> Result<Self> {
        if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
            return Err(Error::NotABundle);
        }
        let mut r = Reader::new(bytes, "bundle header");
        r.skip(4)?;
        let version = r.u16()?;
        if version > FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        r.skip(2)?;
        let topology = TopologyHash(r.array()?);
        if let Some(spec) = expected {
            let want = spec.topology_hash();
            if want != topology {
                return Err(Error::TopologyMismatch {
                    expected: want.to_hex(),
                    found: topology.to_hex(),
                });
            }
        }
        let count = r.u32()? as usize;

        let mut payloads: Vec<(SectionTag, &[u8])> = Vec::with_capacity(count.min(SectionTag::ALL.len()));
        for _ in 0..count {
            let raw: [u8; 4] = r.array()?;
            let offset = r.u64()?;
            let len = r.u64()?;
            let crc = r.u32()?;
            let label = String::from_utf8_lossy(&raw).into_owned();
            let tag = SectionTag::from_bytes(raw).ok_or_else(|| Error::malformed("bundle", format!("unknown section tag {label:?}")))?;
            let start = usize::try_from(offset).map_err(|_| Error::CorruptSection(tag.name().into()))?;
            let end = usize::try_from(len)
                .ok()
                .and_then(|l| start.checked_add(l))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::CorruptSection(tag.name().into()))?;
            let payload = &bytes[start..end];
            if crc32fast::hash(payload) != crc {
                return Err(Error::CorruptSection(tag.name().into()));
            }
            if payloads.iter().any(|(t, _)| *t == tag) {
                return Err(Error::malformed("bundle", format!("duplicate section {}", tag.name())));
            }
            payloads.push((tag, payload));
        }
        let find = |tag: SectionTag| payloads.iter().find(|(t, _)| *t == tag).map(|(_, p)| *p);

        let spec: NetworkSpec = serde_json::from_slice(find(SectionTag::Spec).ok_or_else(|| Error::MissingSection("SPEC".into()))?)?;
        if spec.topology_hash() != topology {
            return Err(Error::TopologyMismatch {
                expected: topology.to_hex(),
                found: spec.topology_hash().to_hex(),
            });
        }
        let weights = find(SectionTag::FloatWeights)
            .map(|p| decode_weights(p, topology))
            .transpose()?;
        let plan = find(SectionTag::FreezePlan).map(decode_plan).transpose()?;
        let qgraph: Option<QGraph> = find(SectionTag::QGraph).map(serde_json::from_slice).transpose()?;
        let metrics = find(SectionTag::Metrics).map(serde_json::from_slice).transpose()?;
        Ok(Self {
            spec,
            weights,
            plan,
            qgraph,
            metrics,
        })
    }

    pub fn require_weights(&self) -> Result<&ModelState> {
        self.weights
            .as_ref()
            .ok_or_else(|| Error::MissingSection(SectionTag::FloatWeights.name().into()))
    }

    pub fn require_plan(&self) -> Result<&FreezePlan> {
        self.plan
            .as_ref()
            .ok_or_else(|| Error::MissingSection(SectionTag::FreezePlan.name().into()))
    }

    pub fn require_qgraph(&self) -> Result<&QGraph> {
        self.qgraph
            .as_ref()
            .ok_or_else(|| Error::MissingSection(SectionTag::QGraph.name().into()))
    }
}

pub fn save_bundle(path: impl AsRef<Path>, bundle: &WeightBundle) -> Result<()> {
    fs::write(path, bundle.to_bytes()?)?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>, expected: Option<&NetworkSpec>) -> Result<WeightBundle> {
    WeightBundle::from_bytes(&fs::read(path)?, expected)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::malformed(self.what, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn skip(&mut self, n: usize) -> Result<()> {
        self.take(n).map(|_| ())
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len() - self.pos)
            .ok_or_else(|| Error::malformed(self.what, format!("length {n} exceeds the section")))
    }

    /// A count whose bound is enforced by the reads that follow.
    fn count(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::malformed(self.what, format!("count {n} does not fit")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::malformed(self.what, "length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::malformed(self.what, format!("{} trailing bytes", self.bytes.len() - self.pos)))
        }
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_weights(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&state.seed.to_le_bytes());
    out.extend_from_slice(&(state.params.len() as u64).to_le_bytes());
    for p in &state.params {
        out.extend_from_slice(&(p.id.len() as u64).to_le_bytes());
        out.extend_from_slice(p.id.as_bytes());
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(p.data.len() as u64).to_le_bytes());
        put_f32s(&mut out, &p.data);
    }
    out.extend_from_slice(&(state.bn_stats.len() as u64).to_le_bytes());
    for s in &state.bn_stats {
        out.extend_from_slice(&(s.mean.len() as u64).to_le_bytes());
        put_f32s(&mut out, &s.mean);
        put_f32s(&mut out, &s.var);
    }
    out
}

fn decode_weights(bytes: &[u8], topology: TopologyHash) -> Result<ModelState> {
    let mut r = Reader::new(bytes, "FLOAT_WEIGHTS section");
    let seed = r.u64()?;
    let n = r.len()?;
    let mut params = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let id_len = r.len()?;
        let id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|e| Error::malformed(r.what, e.to_string()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.count()).collect::<Result<Vec<_>>>()?;
        let count = r.count()?;
        if shape.iter().product::<usize>() != count {
            return Err(Error::malformed(r.what, format!("tensor {id} has {count} values for shape {shape:?}")));
        }
        params.push(ParamTensor {
            id,
            shape,
            data: r.f32s(count)?,
        });
    }
    let nb = r.len()?;
    let mut bn_stats = Vec::with_capacity(nb.min(4096));
    for _ in 0..nb {
        let c = r.count()?;
        let mean = r.f32s(c)?;
        let var = r.f32s(c)?;
        bn_stats.push(BnStats { mean, var });
    }
    r.finish()?;
    Ok(ModelState {
        topology,
        seed,
        params,
        bn_stats,
    })
}

/// Masks are packed LSB first, one byte-aligned run per tensor.
fn encode_plan(plan: &FreezePlan) -> Result<Vec<u8>> {
    let scheme = serde_json::to_vec(&plan.scheme)?;
    let mut out = Vec::new();
    out.extend_from_slice(&(scheme.len() as u64).to_le_bytes());
    out.extend_from_slice(&scheme);
    out.extend_from_slice(&plan.seed.to_le_bytes());
    out.extend_from_slice(&plan.effective_ratio.to_le_bytes());
    out.extend_from_slice(&(plan.masks.len() as u64).to_le_bytes());
    for mask in &plan.masks {
        out.extend_from_slice(&(mask.len() as u64).to_le_bytes());
        for chunk in mask.chunks(8) {
            out.push(chunk.iter().enumerate().fold(0u8, |b, (i, &m)| b | (u8::from(m) << i)));
        }
    }
    Ok(out)
}

fn decode_plan(bytes: &[u8]) -> Result<FreezePlan> {
    let mut r = Reader::new(bytes, "FREEZE_PLAN section");
    let scheme_len = r.len()?;
    let scheme: FreezeScheme = serde_json::from_slice(r.take(scheme_len)?)?;
    let seed = r.u64()?;
    let effective_ratio = f64::from_le_bytes(r.array()?);
    let n = r.len()?;
    let mut masks = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = r.count()?;
        let packed = r.take(len.div_ceil(8))?;
        masks.push((0..len).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect());
    }
    r.finish()?;
    Ok(FreezePlan {
        scheme,
        seed,
        masks,
        effective_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::freezing::make_freeze_plan;
    use crate::topology::build_graph;

    fn sample() -> WeightBundle {
        let spec = NetworkSpec::desk(10);
        let graph = build_graph(&spec).unwrap();
        let mut state = ModelState::init(&graph, 5);
        state.params[0].data[0] = f32::from_bits(0x3f80_0001);
        state.params[0].data[1] = -0.0;
        let plan = make_freeze_plan(&graph, FreezeScheme::Uniform { rho: 0.3 }, 9).unwrap();
        WeightBundle {
            spec,
            weights: Some(state),
            plan: Some(plan),
            qgraph: None,
            metrics: Some(serde_json::json!({"epochs": 2})),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let b = sample();
        let bytes = b.to_bytes().unwrap();
        let back = WeightBundle::from_bytes(&bytes, Some(&b.spec)).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let w = back.weights.unwrap();
        assert_eq!(w.params[0].data[0].to_bits(), 0x3f80_0001);
        assert_eq!(w.params[0].data[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn flipped_byte_names_section() {
        let bytes = sample().to_bytes().unwrap();
        let mut r = Reader::new(&bytes, "t");
        r.skip(HEADER_LEN + ENTRY_LEN + 4).unwrap();
        let fw_offset = r.u64().unwrap() as usize;
        let mut bad = bytes.clone();
        bad[fw_offset + 20] ^= 0x40;
        match WeightBundle::from_bytes(&bad, None) {
            Err(Error::CorruptSection(name)) => assert_eq!(name, "FLOAT_WEIGHTS"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_errors() {
        let b = sample();
        let bytes = b.to_bytes().unwrap();
        assert!(matches!(WeightBundle::from_bytes(b"PK\x03\x04 not a bundle at all .........................", None), Err(Error::NotABundle)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            WeightBundle::from_bytes(&v2, None),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));
        let other = NetworkSpec::desk(7);
        assert!(matches!(
            WeightBundle::from_bytes(&bytes, Some(&other)),
            Err(Error::TopologyMismatch { .. })
        ));
    }

    #[test]
    fn missing_sections_reported() {
        let b = WeightBundle::new(NetworkSpec::desk(10));
        let back = WeightBundle::from_bytes(&b.to_bytes().unwrap(), None).unwrap();
        assert!(matches!(back.require_weights(), Err(Error::MissingSection(_))));
        assert!(matches!(back.require_qgraph(), Err(Error::MissingSection(_))));
    }
}
