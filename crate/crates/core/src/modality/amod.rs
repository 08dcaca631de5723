//! `AMOD` bundle files, little-endian:
//!
//! ```text
//! magic "AMOD" | version u16
//! 4 x (channels u16 | height u16 | width u16 | f32 data, planar)
//! label u8 | id length u32 | id UTF-8 bytes
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::ModalityBundle;
use crate::error::{Error, Result};
use crate::trackio::{Frame, Label};

pub const AMOD_MAGIC: &[u8; 4] = b"AMOD";
pub const AMOD_VERSION: u16 = 1;

fn fmt_err(e: std::io::Error) -> Error {
    Error::Format(format!("AMOD: {e}"))
}

fn write_block<W: Write>(w: &mut W, f: &Frame) -> std::io::Result<()> {
    for d in [f.channels(), f.height(), f.width()] {
        w.write_u16::<LE>(d as u16)?;
    }
    for &v in f.data() {
        w.write_f32::<LE>(v)?;
    }
    Ok(())
}

fn read_block<R: Read>(r: &mut R) -> Result<Frame> {
    let c = r.read_u16::<LE>().map_err(fmt_err)? as usize;
    let h = r.read_u16::<LE>().map_err(fmt_err)? as usize;
    let w = r.read_u16::<LE>().map_err(fmt_err)? as usize;
    let mut data = vec![0.0f32; c * h * w];
    r.read_f32_into::<LE>(&mut data).map_err(fmt_err)?;
    Frame::new(h, w, c, data)
}

pub fn write_bundle<W: Write>(w: &mut W, b: &ModalityBundle) -> Result<()> {
    for f in b.tensors() {
        if f.height() > u16::MAX as usize || f.width() > u16::MAX as usize {
            return Err(Error::Format("AMOD extents must fit in u16".into()));
        }
    }
    let inner = |w: &mut W| -> std::io::Result<()> {
        w.write_all(AMOD_MAGIC)?;
        w.write_u16::<LE>(AMOD_VERSION)?;
        for f in b.tensors() {
            write_block(w, f)?;
        }
        w.write_u8(b.label.as_u8())?;
        w.write_u32::<LE>(b.id.len() as u32)?;
        w.write_all(b.id.as_bytes())
    };
    inner(w).map_err(fmt_err)
}

pub fn read_bundle<R: Read>(r: &mut R) -> Result<ModalityBundle> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(fmt_err)?;
    if &magic != AMOD_MAGIC {
        return Err(Error::Format(format!("bad AMOD magic {magic:?}")));
    }
    let version = r.read_u16::<LE>().map_err(fmt_err)?;
    if version != AMOD_VERSION {
        return Err(Error::Format(format!("unsupported AMOD version {version}")));
    }
    let rp_c1000 = read_block(r)?;
    let rp_c1 = read_block(r)?;
    let flow_far = read_block(r)?;
    let flow_near = read_block(r)?;
    let label = r.read_u8().map_err(fmt_err)?;
    let label = Label::from_u8(label).ok_or_else(|| Error::Format(format!("bad label {label}")))?;
    let len = r.read_u32::<LE>().map_err(fmt_err)? as usize;
    let mut id = vec![0u8; len];
    r.read_exact(&mut id).map_err(fmt_err)?;
    let id = String::from_utf8(id).map_err(|e| Error::Format(format!("AMOD id: {e}")))?;
    Ok(ModalityBundle {
        rp_c1000,
        rp_c1,
        flow_far,
        flow_near,
        label,
        id,
    })
}
