//! Wire format of a module:
//!
//! ```text
//! u16 origin | u16 birth task | u32 serial | u8 flags | u8 ndims | ndims x u32 dims | f32 LE params
//! ```
//!
//! `dims` is the weight shape `(width, width)`; the bias adds `width` floats.

use super::{Module, ModuleId};
use crate::error::{DclError, Result};
use crate::payload::Payload;

const FLAG_VIA_DROPOUT: u8 = 1;

pub fn serialize_module(module: &Module) -> Payload {
    let mut bytes = Vec::with_capacity(18 + 4 * module.params.len());
    bytes.extend_from_slice(&module.id.origin.to_le_bytes());
    bytes.extend_from_slice(&module.id.birth_task.to_le_bytes());
    bytes.extend_from_slice(&module.id.serial.to_le_bytes());
    bytes.push(if module.via_dropout { FLAG_VIA_DROPOUT } else { 0 });
    bytes.push(2);
    for _ in 0..2 {
        bytes.extend_from_slice(&(module.width as u32).to_le_bytes());
    }
    for p in &module.params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    Payload::Module {
        bytes,
        floats: module.params.len() as u64,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| DclError::Truncated(format!("module payload ends at byte {}", self.bytes.len())))?;
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a module for a library of the given `width`.
pub fn deserialize_module(payload: &Payload, width: usize) -> Result<Module> {
    let Payload::Module { bytes, .. } = payload else {
        return Err(DclError::Payload("expected a module payload".into()));
    };
    let mut r = Reader { bytes, pos: 0 };
    let id = ModuleId {
        origin: r.u16()?,
        birth_task: r.u16()?,
        serial: r.u32()?,
    };
    let flags = r.take(1)?[0];
    let ndims = r.take(1)?[0] as usize;
    let dims = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    if dims != [width, width] {
        return Err(DclError::Payload(format!(
            "module shape {dims:?} does not fit library width {width}"
        )));
    }
    let n = width * width + width;
    let raw = r.take(4 * n)?;
    if r.pos != bytes.len() {
        return Err(DclError::Payload(format!(
            "{} trailing bytes after module",
            bytes.len() - r.pos
        )));
    }
    let params = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Module {
        id,
        via_dropout: flags & FLAG_VIA_DROPOUT != 0,
        width,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Module {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = ModuleId {
            origin: 4,
            birth_task: 2,
            serial: 9,
        };
        let mut m = Module::xavier(id, 6, &mut rng);
        m.via_dropout = true;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sample();
        let p = serialize_module(&m);
        assert_eq!(p.floats(), 42);
        assert_eq!(deserialize_module(&p, 6).unwrap(), m);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let p = serialize_module(&sample());
        assert!(matches!(deserialize_module(&p, 8), Err(DclError::Payload(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let Payload::Module { mut bytes, floats } = serialize_module(&sample()) else {
            unreachable!()
        };
        bytes.truncate(bytes.len() - 3);
        let p = Payload::Module { bytes, floats };
        assert!(matches!(deserialize_module(&p, 6), Err(DclError::Truncated(_))));
    }
}
