//! Binary container for a [`HierRep`] plus its text metadata sidecar.
//!
//! Layout (all integers 32-bit little-endian):
//!
//! ```text
//! magic "OFHR" | version | endian tag 0x01020304 | H | W | N_p | N_m
//! patch index map   H·W u32, row-major, null = 0xFFFFFFFF
//! membership        N_p rows of ceil(N_m/8) bytes, bit k of a row = mask k (LSB first)
//! correlation       N_p·N_p u32, row-major
//! crc32 of everything above
//! ```

use super::{BitMatrix, CorrelationMatrix, HierRep, PatchPartition, NULL_PATCH};
use crate::error::{Error, Result};

pub const HIERREP_MAGIC: &[u8; 4] = b"OFHR";
pub const HIERREP_VERSION: u32 = 1;
const ENDIAN_TAG: u32 = 0x0102_0304;

pub fn serialize_hierrep(rep: &HierRep) -> Vec<u8> {
    let p = &rep.partition;
    let (n_p, n_m) = (p.num_patches(), p.num_masks());
    let row_bytes = n_m.div_ceil(8);
    let mut out = Vec::with_capacity(32 + 4 * p.patch_index_map.len() + n_p * row_bytes + 4 * n_p * n_p);
    out.extend_from_slice(HIERREP_MAGIC);
    for v in [
        HIERREP_VERSION,
        ENDIAN_TAG,
        p.height as u32,
        p.width as u32,
        n_p as u32,
        n_m as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &id in &p.patch_index_map {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for r in 0..n_p {
        let row = p.membership.row(r);
        for b in 0..row_bytes {
            out.push((row[b / 8] >> ((b % 8) * 8)) as u8);
        }
    }
    for &v in rep.correlation.votes() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("hierrep", "truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn deserialize_hierrep(bytes: &[u8]) -> Result<HierRep> {
    if bytes.len() < 4 + 6 * 4 + 4 {
        return Err(Error::format("hierrep", "file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != HIERREP_MAGIC {
        return Err(Error::format("hierrep", "bad magic"));
    }
    let version = r.u32()?;
    if version != HIERREP_VERSION {
        return Err(Error::format(
            "hierrep",
            format!("unsupported version {version} (expected {HIERREP_VERSION})"),
        ));
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::format("hierrep", "checksum mismatch"));
    }
    if r.u32()? != ENDIAN_TAG {
        return Err(Error::format("hierrep", "endianness tag mismatch"));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n_p = r.u32()? as usize;
    let n_m = r.u32()? as usize;

    let mut patch_index_map = Vec::with_capacity(w * h);
    let mut pixel_counts = vec![0u32; n_p];
    for _ in 0..w * h {
        let id = r.u32()?;
        if id != NULL_PATCH {
            let c = pixel_counts
                .get_mut(id as usize)
                .ok_or_else(|| Error::format("hierrep", format!("patch id {id} >= N_p {n_p}")))?;
            *c += 1;
        }
        patch_index_map.push(id);
    }
    let row_bytes = n_m.div_ceil(8);
    let mut membership = BitMatrix::new(n_p, n_m);
    for p in 0..n_p {
        let row = r.take(row_bytes)?;
        for k in 0..n_m {
            if (row[k / 8] >> (k % 8)) & 1 == 1 {
                membership.set(p, k);
            }
        }
    }
    let mut votes = Vec::with_capacity(n_p * n_p);
    for _ in 0..n_p * n_p {
        votes.push(r.u32()?);
    }
    if r.pos != body.len() {
        return Err(Error::format("hierrep", "trailing bytes"));
    }
    Ok(HierRep {
        partition: PatchPartition {
            width: w,
            height: h,
            patch_index_map,
            membership,
            pixel_counts,
        },
        correlation: CorrelationMatrix::from_votes(n_p, votes)?,
    })
}

/// Text sidecar: source image id, a digest of the masks the representation
/// was built from, and one provenance line per mask.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HierRepMeta {
    pub source_image: String,
    pub masks_digest: String,
    pub mask_provenance: Vec<String>,
}

impl HierRepMeta {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "hierrep-meta {HIERREP_VERSION}\nsource_image {}\nmasks_digest {}\nmask_count {}\n",
            self.source_image,
            self.masks_digest,
            self.mask_provenance.len()
        );
        for (k, p) in self.mask_provenance.iter().enumerate() {
            s.push_str(&format!("mask {k} {p}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut meta = HierRepMeta::default();
        let mut lines = text.lines();
        match lines.next().map(|l| l.split_whitespace().collect::<Vec<_>>()) {
            Some(h) if h.len() == 2 && h[0] == "hierrep-meta" && h[1] == HIERREP_VERSION.to_string() => {}
            _ => return Err(Error::format("hierrep sidecar", "bad header")),
        }
        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "source_image" => meta.source_image = rest.to_string(),
                "masks_digest" => meta.masks_digest = rest.to_string(),
                "mask_count" => {}
                "mask" => {
                    let (_, prov) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.mask_provenance.push(prov.to_string());
                }
                "" => {}
                other => {
                    return Err(Error::format("hierrep sidecar", format!("unknown key {other:?}")))
                }
            }
        }
        Ok(meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hier2d::MaskSet;
    use crate::mask::Mask;

    fn sample() -> HierRep {
        let a = Mask::from_fn(9, 5, |x, _| x < 6);
        let b = Mask::from_fn(9, 5, |x, y| x > 2 && y > 1);
        HierRep::build(&MaskSet::new(9, 5, vec![a, b]).unwrap()).unwrap()
    }

    #[test]
    fn round_trip() {
        let rep = sample();
        assert_eq!(deserialize_hierrep(&serialize_hierrep(&rep)).unwrap(), rep);
    }

    #[test]
    fn header_layout() {
        let bytes = serialize_hierrep(&sample());
        assert_eq!(&bytes[..4], b"OFHR");
        assert_eq!(&bytes[8..12], &[0x04, 0x03, 0x02, 0x01]);
        // null pixels (x >= 6, y <= 1) encode as 0xFFFFFFFF
        let first_null = 28 + 4 * 8;
        assert_eq!(&bytes[first_null..first_null + 4], &[0xFF; 4]);
    }

    #[test]
    fn corrupt_payload_fails_checksum() {
        let mut bytes = serialize_hierrep(&sample());
        bytes[40] ^= 1;
        let err = deserialize_hierrep(&bytes).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = serialize_hierrep(&sample());
        bytes[4] = 9;
        let err = deserialize_hierrep(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn sidecar_round_trip() {
        let meta = HierRepMeta {
            source_image: "view-003".into(),
            masks_digest: "abcd".into(),
            mask_provenance: vec!["object 1".into(), "part 1.2".into()],
        };
        assert_eq!(HierRepMeta::from_text(&meta.to_text()).unwrap(), meta);
    }
}
