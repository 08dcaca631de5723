//! Binary checkpoints: `FUSN`, a version, a tensor count, then named tensor
//! records, then an optional Adam state.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::adam::{AdamConfig, AdamState};
use super::fusion::FusionNet;
use super::layers::{BatchNorm2d, Conv2d};
use super::simplenet::{Block, SimpleNet};
use super::Tensor;
use crate::error::{Error, Result};

pub const FUSN_MAGIC: &[u8; 4] = b"FUSN";
pub const FUSN_VERSION: u16 = 1;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_u16::<LE>(name.len() as u16)?;
    w.write_all(name.as_bytes())?;
    w.write_u8(t.shape().len() as u8)?;
    for &e in t.shape() {
        w.write_u32::<LE>(e as u32)?;
    }
    for &v in t.data() {
        w.write_f32::<LE>(v)?;
    }
    Ok(())
}

fn read_record<R: Read>(r: &mut R) -> Result<(String, Tensor<f32>)> {
    let io = |e: std::io::Error| fmt_err(format!("truncated checkpoint: {e}"));
    let n = r.read_u16::<LE>().map_err(io)? as usize;
    let mut name = vec![0u8; n];
    r.read_exact(&mut name).map_err(io)?;
    let name = String::from_utf8(name).map_err(|_| fmt_err("tensor name is not UTF-8"))?;
    let rank = r.read_u8().map_err(io)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u32::<LE>().map_err(io)? as usize);
    }
    let len: usize = shape.iter().product();
    if len > 1 << 28 {
        return Err(fmt_err(format!("tensor {name} is implausibly large")));
    }
    let mut data = vec![0f32; len];
    r.read_f32_into::<LE>(&mut data).map_err(io)?;
    Ok((name, Tensor::from_vec(&shape, data)?))
}

pub fn write_checkpoint<W: Write>(w: &mut W, net: &FusionNet<f32>, adam: Option<&AdamState<f32>>) -> Result<()> {
    let io = |e: std::io::Error| fmt_err(format!("write failed: {e}"));
    let named = net.named();
    w.write_all(FUSN_MAGIC).map_err(io)?;
    w.write_u16::<LE>(FUSN_VERSION).map_err(io)?;
    w.write_u32::<LE>(named.len() as u32).map_err(io)?;
    for (name, t) in &named {
        write_record(w, name, t).map_err(io)?;
    }
    match adam {
        None => w.write_u8(0).map_err(io)?,
        Some(st) => {
            w.write_u8(1).map_err(io)?;
            w.write_u64::<LE>(st.step).map_err(io)?;
            for v in [st.config.lr, st.config.beta1, st.config.beta2, st.config.eps] {
                w.write_f64::<LE>(v).map_err(io)?;
            }
            let names = net.trainable_names();
            w.write_u32::<LE>(names.len() as u32).map_err(io)?;
            for ((name, m), v) in names.iter().zip(&st.m).zip(&st.v) {
                write_record(w, &format!("adam.m.{name}"), m).map_err(io)?;
                write_record(w, &format!("adam.v.{name}"), v).map_err(io)?;
            }
        }
    }
    Ok(())
}

fn take(map: &mut BTreeMap<String, Tensor<f32>>, name: &str) -> Result<Tensor<f32>> {
    map.remove(name).ok_or_else(|| fmt_err(format!("checkpoint lacks tensor {name}")))
}

fn conv(map: &mut BTreeMap<String, Tensor<f32>>, prefix: &str, pad: usize) -> Result<Conv2d<f32>> {
    let weight = take(map, &format!("{prefix}.weight"))?;
    let bias = take(map, &format!("{prefix}.bias"))?;
    let s = weight.shape();
    if s.len() != 4 || s[2] != s[3] || bias.shape() != [s[0]] {
        return Err(fmt_err(format!("{prefix} has inconsistent shapes")));
    }
    Ok(Conv2d { weight, bias, pad })
}

fn rebuild(mut map: BTreeMap<String, Tensor<f32>>) -> Result<FusionNet<f32>> {
    let mut backbones = Vec::new();
    while map.contains_key(&format!("backbone{}.head.weight", backbones.len())) {
        let p = format!("backbone{}", backbones.len());
        let mut blocks = Vec::new();
        while map.contains_key(&format!("{p}.block{}.conv.weight", blocks.len())) {
            let q = format!("{p}.block{}", blocks.len());
            let conv = conv(&mut map, &format!("{q}.conv"), 1)?;
            let c = conv.out_channels();
            if blocks.last().is_some_and(|b: &Block<f32>| b.conv.out_channels() != conv.in_channels()) {
                return Err(fmt_err(format!("{q} does not chain with the previous block")));
            }
            let bn = BatchNorm2d {
                gamma: take(&mut map, &format!("{q}.bn.gamma"))?,
                beta: take(&mut map, &format!("{q}.bn.beta"))?,
                running_mean: take(&mut map, &format!("{q}.bn.running_mean"))?,
                running_var: take(&mut map, &format!("{q}.bn.running_var"))?,
            };
            let bn_shapes = [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var];
            if bn_shapes.iter().any(|t| t.shape() != [c]) {
                return Err(fmt_err(format!("{q}.bn has the wrong width")));
            }
            blocks.push(Block { conv, bn });
        }
        if blocks.is_empty() {
            return Err(fmt_err(format!("{p} has no blocks")));
        }
        let head = conv(&mut map, &format!("{p}.head"), 0)?;
        if head.in_channels() != blocks.last().expect("nonempty").conv.out_channels() {
            return Err(fmt_err(format!("{p}.head does not chain with the last block")));
        }
        backbones.push(SimpleNet { blocks, head });
    }
    if backbones.is_empty() {
        return Err(fmt_err("checkpoint has no backbones"));
    }
    let shape = backbones[0].shape();
    if backbones.iter().any(|b| b.shape() != shape) {
        return Err(fmt_err("backbones differ in shape"));
    }
    let fc_weight = take(&mut map, "fc.weight")?;
    let fc_bias = take(&mut map, "fc.bias")?;
    if fc_weight.shape() != [1, 3 * shape.embed_dim] || fc_bias.shape() != [1] {
        return Err(fmt_err("fc layer does not match the embedding width"));
    }
    if let Some(extra) = map.keys().next() {
        return Err(fmt_err(format!("unexpected tensor {extra}")));
    }
    Ok(FusionNet {
        backbones,
        fc_weight,
        fc_bias,
    })
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(FusionNet<f32>, Option<AdamState<f32>>)> {
    let io = |e: std::io::Error| fmt_err(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != FUSN_MAGIC {
        return Err(fmt_err("not a FUSN checkpoint"));
    }
    let version = r.read_u16::<LE>().map_err(io)?;
    if version != FUSN_VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }
    let count = r.read_u32::<LE>().map_err(io)?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_record(r)?;
        if map.insert(name.clone(), t).is_some() {
            return Err(fmt_err(format!("duplicate tensor {name}")));
        }
    }
    let net = rebuild(map)?;
    let adam = match r.read_u8().map_err(io)? {
        0 => None,
        1 => {
            let step = r.read_u64::<LE>().map_err(io)?;
            let mut f = [0f64; 4];
            r.read_f64_into::<LE>(&mut f).map_err(io)?;
            let config = AdamConfig {
                lr: f[0],
                beta1: f[1],
                beta2: f[2],
                eps: f[3],
            };
            let names = net.trainable_names();
            let n = r.read_u32::<LE>().map_err(io)? as usize;
            if n != names.len() {
                return Err(fmt_err("adam state does not match the parameters"));
            }
            let params = net.trainable();
            let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for (name, p) in names.iter().zip(&params) {
                for (kind, dst) in [("m", &mut m), ("v", &mut v)] {
                    let (got, t) = read_record(r)?;
                    if got != format!("adam.{kind}.{name}") || t.shape() != p.shape() {
                        return Err(fmt_err(format!("unexpected adam record {got}")));
                    }
                    dst.push(t);
                }
            }
            Some(AdamState { config, step, m, v })
        }
        other => return Err(fmt_err(format!("bad adam flag {other}"))),
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io)? != 0 {
        return Err(fmt_err("trailing bytes after checkpoint"));
    }
    Ok((net, adam))
}

pub fn save_checkpoint(path: &Path, net: &FusionNet<f32>, adam: Option<&AdamState<f32>>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, net, adam)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(FusionNet<f32>, Option<AdamState<f32>>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}
