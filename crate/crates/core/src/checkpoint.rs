//! Binary checkpoints of [`NetworkParams`]: magic `PSMC`, version, the
//! architecture, online tensors, optimizer state, then target tensors. All
//! values little-endian; tensor lengths follow from the architecture.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{read_array, read_f64s, write_f64s, ByteReader};
use crate::network::{ArchSpec, BnFlags, LrSchedule, NetworkParams, OnlineNetwork, OptimizerState};
use crate::numerics::RngState;

const MAGIC: &[u8; 4] = b"PSMC";
const VERSION: u32 = 1;

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_widths<W: Write>(w: &mut W, widths: &[usize]) -> Result<()> {
    write_u64(w, widths.len() as u64)?;
    widths.iter().try_for_each(|&x| write_u64(w, x as u64))
}

fn read_widths<R: Read>(r: &mut ByteReader<R>) -> Result<Vec<usize>> {
    let n = r.u64()?;
    if n > 1 << 16 {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    (0..n).map(|_| Ok(r.u64()? as usize)).collect()
}

fn write_tensors<W: Write>(w: &mut W, tensors: Vec<&[f64]>) -> Result<()> {
    tensors.into_iter().try_for_each(|t| write_f64s(w, t))
}

fn read_into<R: Read>(r: &mut ByteReader<R>, tensors: Vec<&mut [f64]>) -> Result<()> {
    for t in tensors {
        let values = read_f64s(r, t.len())?;
        t.copy_from_slice(&values);
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(params: &NetworkParams, mut w: W) -> Result<()> {
    let a = &params.arch;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_u64(&mut w, a.input_dim as u64)?;
    write_widths(&mut w, &a.encoder)?;
    write_widths(&mut w, &a.projector)?;
    write_widths(&mut w, &a.predictor)?;
    let bn = a.batch_norm;
    w.write_all(&[bn.encoder as u8, bn.projector as u8, bn.predictor as u8])?;

    write_tensors(&mut w, params.online.tensors())?;

    let o = &params.optimizer;
    write_u64(&mut w, o.step)?;
    write_u64(&mut w, o.epoch)?;
    let s = &o.schedule;
    write_f64s(
        &mut w,
        &[
            o.momentum,
            o.weight_decay,
            s.start_lr,
            s.peak_lr,
            s.floor_lr,
            s.warmup_epochs,
            s.total_epochs,
        ],
    )?;
    write_u64(&mut w, o.buffers.len() as u64)?;
    write_tensors(&mut w, o.buffers.iter().map(Vec::as_slice).collect())?;

    write_tensors(&mut w, params.target.tensors())?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<NetworkParams> {
    let mut r = ByteReader::new(r);
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let input_dim = r.u64()? as usize;
    let encoder = read_widths(&mut r)?;
    let projector = read_widths(&mut r)?;
    let predictor = read_widths(&mut r)?;
    let flag = |b: u8| match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Format(format!("bad batch-norm flag {b}"))),
    };
    let [e, p, q] = r.bytes::<3>()?;
    let arch = ArchSpec {
        input_dim,
        encoder,
        projector,
        predictor,
        batch_norm: BnFlags {
            encoder: flag(e)?,
            projector: flag(p)?,
            predictor: flag(q)?,
        },
    };
    arch.validate()
        .map_err(|e| Error::Format(format!("bad architecture: {e}")))?;

    let mut online = OnlineNetwork::init(&arch, &mut RngState::new(0))?;
    read_into(&mut r, online.tensors_mut())?;

    let step = r.u64()?;
    let epoch = r.u64()?;
    let h = read_f64s(&mut r, 7)?;
    let schedule = LrSchedule {
        start_lr: h[2],
        peak_lr: h[3],
        floor_lr: h[4],
        warmup_epochs: h[5],
        total_epochs: h[6],
    };
    let mut optimizer = OptimizerState::new(&online, h[0], h[1], schedule);
    optimizer.step = step;
    optimizer.epoch = epoch;
    let buffers = r.u64()? as usize;
    if buffers != optimizer.buffers.len() {
        return Err(Error::Format(format!(
            "expected {} optimizer buffers, found {buffers}",
            optimizer.buffers.len()
        )));
    }
    read_into(
        &mut r,
        optimizer
            .buffers
            .iter_mut()
            .map(Vec::as_mut_slice)
            .collect(),
    )?;

    let mut target = online.branch.clone();
    read_into(&mut r, target.tensors_mut())?;
    r.expect_eof()?;
    Ok(NetworkParams {
        arch,
        online,
        target,
        optimizer,
    })
}

pub fn save_checkpoint(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> NetworkParams {
        let mut p =
            NetworkParams::init(ArchSpec::desk(6), 3, 0.9, 1e-3, LrSchedule::new(2.0, 10.0))
                .unwrap();
        p.optimizer.step = 17;
        p.optimizer.epoch = 4;
        let mut rng = RngState::new(8);
        for b in &mut p.optimizer.buffers {
            b.iter_mut().for_each(|v| *v = rng.normal());
        }
        for t in p.target.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.normal() * 1e-3);
        }
        p
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let p = params();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, p);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_corrupt_files() {
        let mut buf = Vec::new();
        write_checkpoint(&params(), &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut longer = buf.clone();
        longer.push(0);
        assert!(read_checkpoint(&longer[..]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
    }
}
