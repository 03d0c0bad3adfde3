//! Little-endian binary formats: `UPAK1` checkpoints, `UPCD1` point clouds
//! and `UAMP1` attention-map dumps, plus a plain-text XYZ importer.

use std::path::Path;

use upa_core::analysis::AttentionMap;
use upa_core::geometry::{Point, PointCloud};
use upa_core::tensor::ParamStore;

use crate::error::{self, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"UPAK1";
pub const CLOUD_MAGIC: &[u8; 5] = b"UPCD1";
pub const MAP_MAGIC: &[u8; 5] = b"UAMP1";

const HAS_FEATURES: u8 = 1;
const HAS_POINT_LABELS: u8 = 2;
const HAS_CLOUD_LABEL: u8 = 4;

/// Cursor over a byte buffer whose errors carry the failing offset.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, magic: &[u8; 5]) -> Result<()> {
        let at = self.pos;
        let got = self.take(5, "magic")?;
        if got != magic {
            return Err(Error::parse(
                at,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// A `u64` used as a count or size, bounded so later allocations stay sane.
    pub fn size(&mut self, what: &str, max: u64) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        if v > max {
            return Err(Error::parse(at, format!("{what} {v} exceeds {max}")));
        }
        Ok(v as usize)
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::parse(self.pos, "size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if !self.at_end() {
            return Err(Error::parse(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Remaining-bytes bound for counts read from a buffer of `len` bytes.
fn bound(len: usize) -> u64 {
    len as u64
}

// ---- UPAK1 -------------------------------------------------------------------

/// One named tensor from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for (name, t) in store.iter() {
        put_u64(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u64(&mut out, d);
        }
        put_f64s(&mut out, t.data());
    }
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader::new(buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let mut records = Vec::new();
    while !r.at_end() {
        let len = r.size("name length", bound(buf.len()))?;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::parse(at, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.size("rank", 8)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.size("dimension", bound(buf.len()))?);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let at = r.offset();
        let n = n.filter(|&n| n <= buf.len()).ok_or_else(|| Error::parse(at, "tensor too large"))?;
        let data = r.f64s(n, "tensor data")?;
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

/// Loads every record into `store`, which must hold exactly the same
/// parameter names and shapes.
pub fn load_checkpoint(buf: &[u8], store: &mut ParamStore) -> Result<()> {
    let records = decode_checkpoint(buf)?;
    if records.len() != store.len() {
        return Err(Error::config(format!(
            "checkpoint has {} tensors, model expects {}",
            records.len(),
            store.len()
        )));
    }
    for r in records {
        store
            .load(&r.name, &r.shape, r.data)
            .map_err(|e| Error::config(format!("checkpoint does not match the model: {e}")))?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    error::write(path, encode_checkpoint(store))
}

pub fn read_checkpoint(path: &Path, store: &mut ParamStore) -> Result<()> {
    load_checkpoint(&error::read(path)?, store)
}

// ---- UPCD1 -------------------------------------------------------------------

pub fn encode_cloud(pc: &PointCloud) -> Vec<u8> {
    let mut out = CLOUD_MAGIC.to_vec();
    put_u64(&mut out, pc.len());
    put_u64(&mut out, if pc.features.is_some() { pc.feature_dim } else { 0 });
    let mut flags = 0;
    if pc.features.is_some() {
        flags |= HAS_FEATURES;
    }
    if pc.point_labels.is_some() {
        flags |= HAS_POINT_LABELS;
    }
    if pc.cloud_label.is_some() {
        flags |= HAS_CLOUD_LABEL;
    }
    out.push(flags);
    put_f64s(&mut out, &pc.flat_positions());
    if let Some(f) = &pc.features {
        put_f64s(&mut out, f);
    }
    if let Some(l) = &pc.point_labels {
        l.iter().for_each(|&v| put_u64(&mut out, v));
    }
    if let Some(c) = pc.cloud_label {
        put_u64(&mut out, c);
    }
    out
}

pub fn decode_cloud(buf: &[u8]) -> Result<PointCloud> {
    let mut r = Reader::new(buf);
    r.magic(CLOUD_MAGIC)?;
    let n = r.size("point count", bound(buf.len()))?;
    let d = r.size("feature width", bound(buf.len()))?;
    let at = r.offset();
    let flags = r.u8("flags")?;
    if flags & !(HAS_FEATURES | HAS_POINT_LABELS | HAS_CLOUD_LABEL) != 0 {
        return Err(Error::parse(at, format!("unknown flag bits {flags:#04x}")));
    }
    if (flags & HAS_FEATURES != 0) != (d > 0) {
        return Err(Error::parse(at, "feature flag disagrees with feature width"));
    }
    let at = r.offset();
    let pos = r.f64s(n * 3, "positions")?;
    let positions: Vec<Point> = pos.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let mut pc = PointCloud::new(positions).map_err(|e| Error::parse(at, e.to_string()))?;
    if flags & HAS_FEATURES != 0 {
        let at = r.offset();
        let f = r.f64s(n * d, "features")?;
        pc = pc.with_features(d, f).map_err(|e| Error::parse(at, e.to_string()))?;
    }
    if flags & HAS_POINT_LABELS != 0 {
        let labels = (0..n)
            .map(|_| r.size("point label", u32::MAX as u64))
            .collect::<Result<Vec<_>>>()?;
        pc = pc.with_point_labels(labels)?;
    }
    if flags & HAS_CLOUD_LABEL != 0 {
        pc = pc.with_cloud_label(r.size("cloud label", u32::MAX as u64)?);
    }
    r.finish()?;
    Ok(pc)
}

pub fn save_cloud(path: &Path, pc: &PointCloud) -> Result<()> {
    error::write(path, encode_cloud(pc))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    decode_cloud(&error::read(path)?)
}

/// Parses whitespace-separated `x y z [label]` lines. Blank lines and lines
/// starting with `#` are skipped; either every point has a label or none.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    let mut labelled = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(Error::parse(at, format!("expected 3 or 4 fields, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(at, format!("bad coordinate `{f}`")))?;
        }
        if *labelled.get_or_insert(fields.len() == 4) != (fields.len() == 4) {
            return Err(Error::parse(at, "labels must be given for every point or none"));
        }
        if let Some(f) = fields.get(3) {
            labels.push(f.parse::<usize>().map_err(|_| Error::parse(at, format!("bad label `{f}`")))?);
        }
        positions.push(p);
    }
    if positions.is_empty() {
        return Err(Error::parse(text.len(), "no points"));
    }
    let pc = PointCloud::new(positions)?;
    if labels.is_empty() {
        Ok(pc)
    } else {
        Ok(pc.with_point_labels(labels)?)
    }
}

// ---- UAMP1 -------------------------------------------------------------------

/// Dense dump; sparse maps are embedded over the full key axis.
pub fn encode_map(map: &AttentionMap) -> Vec<u8> {
    let mut out = MAP_MAGIC.to_vec();
    put_u64(&mut out, map.stage as usize);
    put_u64(&mut out, map.heads());
    put_u64(&mut out, map.queries());
    put_u64(&mut out, map.keys());
    put_f64s(&mut out, &map.dense_probs());
    out
}

pub fn decode_map(buf: &[u8]) -> Result<AttentionMap> {
    let mut r = Reader::new(buf);
    r.magic(MAP_MAGIC)?;
    let stage = r.size("stage id", u32::MAX as u64)? as u32;
    let h = r.size("head count", bound(buf.len()))?;
    let m = r.size("query count", bound(buf.len()))?;
    let k = r.size("key count", bound(buf.len()))?;
    let at = r.offset();
    let n = h
        .checked_mul(m)
        .and_then(|v| v.checked_mul(k))
        .filter(|&n| n <= buf.len())
        .ok_or_else(|| Error::parse(at, "map dimensions too large"))?;
    let probs = r.f64s(n, "probabilities")?;
    r.finish()?;
    AttentionMap::dense(stage, h, m, k, probs).map_err(|e| Error::parse(at, e.to_string()))
}

pub fn save_map(path: &Path, map: &AttentionMap) -> Result<()> {
    error::write(path, encode_map(map))
}

pub fn read_map(path: &Path) -> Result<AttentionMap> {
    decode_map(&error::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use upa_core::tensor::Tensor;

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(vec![2, 3], (0..6).map(|v| v as f64 * 0.5).collect()).unwrap());
        s.add("ß", Tensor::new(vec![1], vec![-1.25]).unwrap());
        let bytes = encode_checkpoint(&s);
        assert_eq!(&bytes[..5], b"UPAK1");
        assert_eq!(bytes.len(), 5 + (8 + 8 + 8 + 16 + 48) + (8 + 2 + 8 + 8 + 8));
        let mut t = s.clone();
        let ids: Vec<_> = t.ids().collect();
        for id in ids {
            t.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 9.0);
        }
        load_checkpoint(&bytes, &mut t).unwrap();
        assert_eq!(encode_checkpoint(&t), bytes);
    }

    #[test]
    fn checkpoint_errors_carry_offsets() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let bytes = encode_checkpoint(&s);
        match decode_checkpoint(&bytes[..bytes.len() - 3]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5 + 8 + 1 + 8 + 8),
            other => panic!("{other:?}"),
        }
        match decode_checkpoint(b"UPAK2") {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut other = ParamStore::new();
        other.add("v", Tensor::new(vec![2], vec![0.0; 2]).unwrap());
        assert!(matches!(load_checkpoint(&bytes, &mut other), Err(Error::Config(_))));
    }

    #[test]
    fn cloud_round_trip() {
        let pc = PointCloud::new(vec![[0.0, 1.0, 2.0], [-1.5, 0.25, 3.0]])
            .unwrap()
            .with_features(2, vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .with_point_labels(vec![3, 1])
            .unwrap()
            .with_cloud_label(7);
        let bytes = encode_cloud(&pc);
        assert_eq!(bytes[5 + 16], 7);
        assert_eq!(decode_cloud(&bytes).unwrap(), pc);
        let bare = PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(decode_cloud(&encode_cloud(&bare)).unwrap(), bare);
        let mut bad = bytes.clone();
        bad[5 + 16] = 0x80;
        assert!(matches!(decode_cloud(&bad), Err(Error::Parse { offset: 21, .. })));
        assert!(matches!(decode_cloud(&bytes[..40]), Err(Error::Parse { offset: 22, .. })));
    }

    #[test]
    fn xyz_import() {
        let pc = parse_xyz("# header\n0 0 0 1\n1 2 3 0\n\n").unwrap();
        assert_eq!(pc.positions, vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        assert_eq!(pc.point_labels, Some(vec![1, 0]));
        assert!(parse_xyz("1 2 3\n").unwrap().point_labels.is_none());
        match parse_xyz("1 2 3\n4 5 x\n") {
            Err(Error::Parse { offset: 6, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_xyz("1 2 3 0\n4 5 6\n").is_err());
        assert!(parse_xyz("1 2 3\n4 5 6 0\n").is_err());
    }

    #[test]
    fn map_round_trip() {
        let map = AttentionMap::dense(2, 1, 2, 3, vec![0.5, 0.5, 0.0, 0.1, 0.2, 0.7]).unwrap();
        let bytes = encode_map(&map);
        assert_eq!(bytes.len(), 5 + 32 + 48);
        assert_eq!(decode_map(&bytes).unwrap(), map);
        let sparse = AttentionMap::sparse(1, 1, 4, 2, vec![0, 3, 2, 1], vec![0.25, 0.75, 1.0, 0.0]).unwrap();
        let dense = decode_map(&encode_map(&sparse)).unwrap();
        assert_eq!(dense.row(0, 0), &[0.25, 0.0, 0.0, 0.75]);
        let mut bad = bytes.clone();
        bad[5 + 32..5 + 40].copy_from_slice(&2.0f64.to_le_bytes());
        assert!(matches!(decode_map(&bad), Err(Error::Parse { offset: 37, .. })));
    }
}
