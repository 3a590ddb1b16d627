//! Parameter checkpoints.
//!
//! Layout: a text manifest followed by the raw parameter data.
//!
//! ```text
//! PARAMS 1
//! <count>
//! <name> <d0>x<d1>.. <offset> <len>     (one line per tensor, offsets in f64 elements)
//! END
//! <little-endian f64 data>
//! ```

use std::io::{BufRead, BufReader, Read, Write};

use super::{ParamStore, Tensor};
use crate::{Error, Result};

const MAGIC: &str = "PARAMS 1";

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "scalar" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::Format(format!("bad shape `{s}`"))))
        .collect()
}

pub fn save_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{}", store.len())?;
    let mut offset = 0;
    for (_, name, t) in store.iter() {
        writeln!(w, "{name} {} {offset} {}", shape_str(t.shape()), t.numel())?;
        offset += t.numel();
    }
    writeln!(w, "END")?;
    for (_, _, t) in store.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(r: R) -> Result<ParamStore> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("checkpoint manifest truncated".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(Error::Format("missing checkpoint magic".into()));
    }
    let count: usize = next_line(&mut r)?
        .parse()
        .map_err(|_| Error::Format("bad parameter count".into()))?;
    let mut entries = Vec::with_capacity(count);
    let mut expected_offset = 0;
    for _ in 0..count {
        let l = next_line(&mut r)?;
        let fields: Vec<&str> = l.split_whitespace().collect();
        let [name, shape, offset, len] = fields[..] else {
            return Err(Error::Format(format!("bad manifest line `{l}`")));
        };
        let shape = parse_shape(shape)?;
        let offset: usize = offset.parse().map_err(|_| Error::Format(format!("bad offset in `{l}`")))?;
        let len: usize = len.parse().map_err(|_| Error::Format(format!("bad length in `{l}`")))?;
        if offset != expected_offset || shape.iter().product::<usize>() != len {
            return Err(Error::Format(format!("inconsistent manifest line `{l}`")));
        }
        expected_offset += len;
        entries.push((name.to_string(), shape, len));
    }
    if next_line(&mut r)? != "END" {
        return Err(Error::Format("missing END marker".into()));
    }
    let mut store = ParamStore::new();
    let mut buf = [0u8; 8];
    for (name, shape, len) in entries {
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        store.add(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}
