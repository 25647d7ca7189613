//! Binary checkpoint container.
//!
//! ```text
//! DIFRC1\n
//! kind=<kind>\n
//! <key>=<value>\n ...
//! param=<name>:<count>\n ...
//! end\n
//! <little-endian f32 values of every param, in manifest order>
//! ```

use std::io::{BufRead, BufReader, Read, Write};

use super::schedule::NoiseSchedule;
use super::unet::{DenoiserConfig, DenoiserNet};
use crate::error::{Error, Result};
use crate::representation::PromptEmbedding;
use crate::rng::{stream, Stream};

pub const MAGIC: &[u8] = b"DIFRC1";

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, Vec<f64>)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Corrupt(format!("manifest is missing `{key}`")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Corrupt(format!("manifest `{key}` is not an integer")))
    }

    fn meta_list(&self, key: &str) -> Result<Vec<usize>> {
        self.meta(key)?
            .split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Corrupt(format!("manifest `{key}` is not an integer list")))
            })
            .collect()
    }

    pub fn param(&self, name: &str) -> Result<&[f64]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Corrupt(format!("checkpoint has no parameter `{name}`")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(b"\n")?;
        writeln!(w, "kind={}", self.kind)?;
        for (k, v) in &self.meta {
            writeln!(w, "{k}={v}")?;
        }
        for (name, vals) in &self.params {
            writeln!(w, "param={name}:{}", vals.len())?;
        }
        w.write_all(b"end\n")?;
        for (_, vals) in &self.params {
            for &v in vals {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<()> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(Error::Corrupt("checkpoint manifest truncated".into()));
            }
            if line.ends_with('\n') {
                line.pop();
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line.as_bytes() != MAGIC {
            return Err(Error::Corrupt("bad checkpoint magic".into()));
        }
        let mut kind = None;
        let mut meta = Vec::new();
        let mut shapes = Vec::new();
        loop {
            next_line(&mut r, &mut line)?;
            if line == "end" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Corrupt(format!("bad manifest line `{line}`")))?;
            match k {
                "kind" => kind = Some(v.to_string()),
                "param" => {
                    let (name, count) = v
                        .rsplit_once(':')
                        .ok_or_else(|| Error::Corrupt(format!("bad param line `{line}`")))?;
                    let count: usize = count
                        .parse()
                        .map_err(|_| Error::Corrupt(format!("bad param count `{count}`")))?;
                    shapes.push((name.to_string(), count));
                }
                _ => meta.push((k.to_string(), v.to_string())),
            }
        }
        let kind = kind.ok_or_else(|| Error::Corrupt("manifest has no kind".into()))?;
        let mut params = Vec::with_capacity(shapes.len());
        for (name, count) in shapes {
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Corrupt(format!("parameter `{name}` truncated")))?;
            let vals = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.push((name, vals));
        }
        Ok(Self { kind, meta, params })
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl DenoiserNet {
    /// Builds a net with the given parameter vector.
    pub fn with_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        let mut net = DenoiserNet::new(config, &mut stream(0, Stream::Denoiser, &[]))?;
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "denoiser needs {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }
}

/// Packs a denoiser, its prompt table and schedule length into a container.
pub fn denoiser_container(net: &DenoiserNet, table: &PromptEmbedding, schedule: &NoiseSchedule) -> Container {
    let c = net.config();
    let mut out = Container::new("denoiser");
    out.meta = vec![
        ("image_size".into(), c.image_size.to_string()),
        ("in_channels".into(), c.in_channels.to_string()),
        ("enc_channels".into(), join(&c.enc_channels)),
        ("tap_channels".into(), join(&c.tap_channels)),
        ("emb_width".into(), c.emb_width.to_string()),
        ("time_features".into(), c.time_features.to_string()),
        ("cond_width".into(), c.cond_width.to_string()),
        ("T".into(), schedule.steps().to_string()),
        ("num_classes".into(), table.num_classes().to_string()),
    ];
    for spec in net.layout() {
        out.params
            .push((spec.name.clone(), net.params[spec.range.clone()].to_vec()));
    }
    out.params.push(("prompt.table".into(), table.table.clone()));
    out
}

/// Inverse of [`denoiser_container`]; returns the net, prompt table and the
/// schedule length recorded in the manifest.
pub fn denoiser_from_container(c: &Container) -> Result<(DenoiserNet, PromptEmbedding, usize)> {
    if c.kind != "denoiser" {
        return Err(Error::Corrupt(format!("expected a denoiser checkpoint, got `{}`", c.kind)));
    }
    let list3 = |k: &str| -> Result<[usize; 3]> {
        c.meta_list(k)?
            .try_into()
            .map_err(|_| Error::Corrupt(format!("`{k}` needs 3 entries")))
    };
    let list4 = |k: &str| -> Result<[usize; 4]> {
        c.meta_list(k)?
            .try_into()
            .map_err(|_| Error::Corrupt(format!("`{k}` needs 4 entries")))
    };
    let config = DenoiserConfig {
        image_size: c.meta_usize("image_size")?,
        in_channels: c.meta_usize("in_channels")?,
        enc_channels: list3("enc_channels")?,
        tap_channels: list4("tap_channels")?,
        emb_width: c.meta_usize("emb_width")?,
        time_features: c.meta_usize("time_features")?,
        cond_width: c.meta_usize("cond_width")?,
    };
    let mut net = DenoiserNet::new(config, &mut stream(0, Stream::Denoiser, &[]))?;
    let specs = net.layout().to_vec();
    for spec in specs {
        let vals = c.param(&spec.name)?;
        if vals.len() != spec.range.len() {
            return Err(Error::Corrupt(format!("parameter `{}` has wrong length", spec.name)));
        }
        net.params[spec.range.clone()].copy_from_slice(vals);
    }
    let classes = c.meta_usize("num_classes")?;
    let table = PromptEmbedding::from_table(classes, net.cond_width(), c.param("prompt.table")?.to_vec())?;
    Ok((net, table, c.meta_usize("T")?))
}
