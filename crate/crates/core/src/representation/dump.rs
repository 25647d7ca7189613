//! Representation dump files:
//! `DIFRC-REP v1 d=<d> kind=<conditional|denoising>\n` followed by records
//! of a little-endian `u32` class id and `d` little-endian `f32` values.

use std::io::{BufRead, BufReader, Read, Write};

use super::extract::RepresentationKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationDump {
    pub d: usize,
    pub kind: RepresentationKind,
    pub records: Vec<(u32, Vec<f64>)>,
}

impl RepresentationDump {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "DIFRC-REP v1 d={} kind={}", self.d, self.kind.as_str())?;
        for (label, v) in &self.records {
            if v.len() != self.d {
                return Err(Error::Shape(format!(
                    "record has {} values, dump declares d={}",
                    v.len(),
                    self.d
                )));
            }
            w.write_all(&label.to_le_bytes())?;
            for &x in v {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let header = header.trim_end_matches('\n');
        let mut parts = header.split(' ');
        if parts.next() != Some("DIFRC-REP") || parts.next() != Some("v1") {
            return Err(Error::Corrupt("bad representation dump header".into()));
        }
        let d: usize = parts
            .next()
            .and_then(|p| p.strip_prefix("d="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Corrupt("dump header has no d".into()))?;
        let kind = match parts.next().and_then(|p| p.strip_prefix("kind=")) {
            Some("conditional") => RepresentationKind::Conditional,
            Some("denoising") => RepresentationKind::Denoising,
            _ => return Err(Error::Corrupt("dump header has no valid kind".into())),
        };
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let rec = 4 + 4 * d;
        if body.len() % rec != 0 {
            return Err(Error::Corrupt("dump body is truncated".into()));
        }
        let records = body
            .chunks_exact(rec)
            .map(|c| {
                let label = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                let v = c[4..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect();
                (label, v)
            })
            .collect();
        Ok(Self { d, kind, records })
    }
}
