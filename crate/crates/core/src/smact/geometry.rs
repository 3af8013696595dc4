use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::trace::VirtAddr;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GeometryError {
    #[error("{0} must be a nonzero power of two")]
    NotPowerOfTwo(&'static str),
    #[error("entries ({entries}) must be a multiple of ways ({ways})")]
    Ways { entries: usize, ways: usize },
    #[error("slab of {slab} bytes holds more than 64 chunks of {chunk} bytes")]
    MaskWidth { slab: u64, chunk: u64 },
    #[error("chunk ({chunk}) larger than slab ({slab})")]
    ChunkLargerThanSlab { slab: u64, chunk: u64 },
    #[error("physically-tagged SMACT is not implemented")]
    PhysicallyTagged,
    #[error("bad geometry `{0}`, expected <entries>x<ways>[/<slab>/<chunk>]")]
    Syntax(String),
}

/// Shape of the table: capacity, associativity and the two destination
/// granularities (slab per entry, chunk per mask bit).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SmactGeometry {
    pub entries: usize,
    pub ways: usize,
    pub slab_bytes: u64,
    pub chunk_bytes: u64,
    /// Reserved for a physically-tagged variant; must stay false.
    #[serde(default)]
    pub physically_tagged: bool,
}

impl Default for SmactGeometry {
    fn default() -> Self {
        SmactGeometry {
            entries: 512,
            ways: 8,
            slab_bytes: 4096,
            chunk_bytes: 64,
            physically_tagged: false,
        }
    }
}

/// An address cut into table fields. Recombining `tag`, `index` and
/// `slab_offset` gives back the original address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressSplit {
    pub tag: u64,
    pub index: usize,
    pub slab_offset: u64,
    pub chunk_bit: u32,
}

impl SmactGeometry {
    pub fn with_entries(entries: usize) -> Self {
        SmactGeometry { entries, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.physically_tagged {
            return Err(GeometryError::PhysicallyTagged);
        }
        if self.ways == 0 || self.entries == 0 || !self.entries.is_multiple_of(self.ways) {
            return Err(GeometryError::Ways { entries: self.entries, ways: self.ways });
        }
        if !self.sets().is_power_of_two() {
            return Err(GeometryError::NotPowerOfTwo("set count"));
        }
        if !self.slab_bytes.is_power_of_two() {
            return Err(GeometryError::NotPowerOfTwo("slab size"));
        }
        if !self.chunk_bytes.is_power_of_two() {
            return Err(GeometryError::NotPowerOfTwo("chunk size"));
        }
        if self.chunk_bytes > self.slab_bytes {
            return Err(GeometryError::ChunkLargerThanSlab {
                slab: self.slab_bytes,
                chunk: self.chunk_bytes,
            });
        }
        if self.slab_bytes / self.chunk_bytes > 64 {
            return Err(GeometryError::MaskWidth { slab: self.slab_bytes, chunk: self.chunk_bytes });
        }
        Ok(())
    }

    pub fn sets(&self) -> usize {
        self.entries / self.ways.max(1)
    }

    pub fn offset_bits(&self) -> u32 {
        self.slab_bytes.trailing_zeros()
    }

    pub fn index_bits(&self) -> u32 {
        self.sets().trailing_zeros()
    }

    pub fn tag_bits(&self) -> u32 {
        64 - self.offset_bits() - self.index_bits()
    }

    pub fn chunks_per_slab(&self) -> u32 {
        (self.slab_bytes / self.chunk_bytes) as u32
    }

    /// The same table with one chunk per slab: every entry tracks a single
    /// chunk and the mask degenerates to one bit.
    pub fn without_bitmask(&self) -> Self {
        SmactGeometry { slab_bytes: self.chunk_bytes, ..*self }
    }

    pub fn split(&self, a: VirtAddr) -> AddressSplit {
        let off_bits = self.offset_bits();
        let idx_bits = self.index_bits();
        let slab_offset = a.0 & (self.slab_bytes - 1);
        AddressSplit {
            tag: a.0.checked_shr(off_bits + idx_bits).unwrap_or(0),
            index: ((a.0 >> off_bits) & (self.sets() as u64 - 1)) as usize,
            slab_offset,
            chunk_bit: (slab_offset / self.chunk_bytes) as u32,
        }
    }

    pub fn slab_base(&self, tag: u64, index: usize) -> u64 {
        let off_bits = self.offset_bits();
        (tag.checked_shl(off_bits + self.index_bits()).unwrap_or(0)) | ((index as u64) << off_bits)
    }
}

pub fn split_address(a: VirtAddr, g: &SmactGeometry) -> AddressSplit {
    g.split(a)
}

impl fmt::Display for SmactGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}/{}/{}", self.entries, self.ways, self.slab_bytes, self.chunk_bytes)
    }
}

impl FromStr for SmactGeometry {
    type Err = GeometryError;

    /// `512x8` or `512x8/4096/64`.
    fn from_str(s: &str) -> Result<Self, GeometryError> {
        let bad = || GeometryError::Syntax(s.to_string());
        let mut parts = s.trim().split('/');
        let shape = parts.next().ok_or_else(bad)?;
        let (e, w) = shape.split_once('x').ok_or_else(bad)?;
        let mut g = SmactGeometry {
            entries: e.parse().map_err(|_| bad())?,
            ways: w.parse().map_err(|_| bad())?,
            ..SmactGeometry::default()
        };
        match (parts.next(), parts.next(), parts.next()) {
            (None, None, None) => {}
            (Some(slab), Some(chunk), None) => {
                g.slab_bytes = slab.parse().map_err(|_| bad())?;
                g.chunk_bytes = chunk.parse().map_err(|_| bad())?;
            }
            _ => return Err(bad()),
        }
        g.validate()?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_field_widths() {
        let g = SmactGeometry::default();
        g.validate().unwrap();
        assert_eq!(g.sets(), 64);
        assert_eq!((g.offset_bits(), g.index_bits(), g.tag_bits()), (12, 6, 46));
    }

    #[test]
    fn split_zero_and_one_slab() {
        let g = SmactGeometry::default();
        let s = g.split(VirtAddr(0));
        assert_eq!((s.tag, s.index, s.slab_offset, s.chunk_bit), (0, 0, 0, 0));
        let s = g.split(VirtAddr(0x1000));
        assert_eq!((s.tag, s.index, s.slab_offset, s.chunk_bit), (0, 1, 0, 0));
    }

    #[test]
    fn split_frozen_example() {
        // Expected fields computed independently: off = a & 0xfff, chunk = off / 64,
        // index = (a >> 12) & 0x3f, tag = a >> 18.
        let s = SmactGeometry::default().split(VirtAddr(0x0000_7F12_3456_7ABC));
        assert_eq!(s.slab_offset, 0xABC);
        assert_eq!(s.chunk_bit, 42);
        assert_eq!(s.index, 0x27);
        assert_eq!(s.tag, 0x1FC4_8D15);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut g = SmactGeometry { entries: 96, ..Default::default() };
        assert_eq!(g.validate(), Err(GeometryError::NotPowerOfTwo("set count")));
        g = SmactGeometry { slab_bytes: 8192, ..Default::default() };
        assert!(matches!(g.validate(), Err(GeometryError::MaskWidth { .. })));
        g = SmactGeometry { physically_tagged: true, ..Default::default() };
        assert_eq!(g.validate(), Err(GeometryError::PhysicallyTagged));
        assert!(SmactGeometry::default().without_bitmask().validate().is_ok());
    }

    #[test]
    fn parses_and_prints() {
        let g: SmactGeometry = "128x8".parse().unwrap();
        assert_eq!(g.entries, 128);
        assert_eq!(g.to_string(), "128x8/4096/64");
        assert_eq!("128x8/4096/64".parse::<SmactGeometry>().unwrap(), g);
        assert!("128".parse::<SmactGeometry>().is_err());
    }
}
