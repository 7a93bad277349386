//! On-disk container shared by checkpoints, subject volumes, and attribution
//! maps: a textual header followed by raw little-endian IEEE-754 32-bit
//! floats.
//!
//! Layout, byte for byte:
//!
//! ```text
//! swin4d-container v1 <kind>\n
//! meta <key> = <value>\n          (zero or more, order preserved)
//! entry <name> <d0>x<d1>x... <offset>\n   (offset counted in f32 elements)
//! data\n
//! <raw f32 little-endian payload>
//! ```
//!
//! Entries appear in manifest order and their payloads are stored back to
//! back, so `offset` of entry `k+1` equals `offset + len` of entry `k`.
//! Round-tripping a container reproduces the file bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &str = "swin4d-container";
pub const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.get_meta(key)
            .ok_or_else(|| Error::CheckpointFormat(format!("missing meta key `{key}`")))
    }

    pub fn push_entry(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require_entry(&self, name: &str) -> Result<&Entry> {
        self.entry(name)
            .ok_or_else(|| Error::CheckpointFormat(format!("missing entry `{name}`")))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "{MAGIC} {VERSION} {}\n", self.kind)?;
        for (k, v) in &self.meta {
            writeln!(w, "meta {k} = {v}")?;
        }
        let mut offset = 0usize;
        for e in &self.entries {
            let dims = e
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            writeln!(w, "entry {} {} {}", e.name, dims, offset)?;
            offset += e.data.len();
        }
        writeln!(w, "data")?;
        for e in &self.entries {
            for v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let mut first = line.trim_end().splitn(3, ' ');
        match (first.next(), first.next(), first.next()) {
            (Some(MAGIC), Some(VERSION), Some(kind)) => {
                let mut c = Container::new(kind);
                let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::new();
                loop {
                    let mut line = String::new();
                    if r.read_line(&mut line)? == 0 {
                        return Err(Error::CheckpointFormat("missing data section".into()));
                    }
                    let line = line.trim_end();
                    if line == "data" {
                        break;
                    }
                    if let Some(rest) = line.strip_prefix("meta ") {
                        let (k, v) = rest.split_once(" = ").ok_or_else(|| {
                            Error::CheckpointFormat(format!("malformed meta line `{line}`"))
                        })?;
                        c.set_meta(k, v);
                    } else if let Some(rest) = line.strip_prefix("entry ") {
                        let parts: Vec<&str> = rest.split(' ').collect();
                        if parts.len() != 3 {
                            return Err(Error::CheckpointFormat(format!(
                                "malformed entry line `{line}`"
                            )));
                        }
                        let shape: Vec<usize> = parts[1]
                            .split('x')
                            .map(|d| {
                                d.parse().map_err(|_| {
                                    Error::CheckpointFormat(format!("bad shape `{}`", parts[1]))
                                })
                            })
                            .collect::<Result<_>>()?;
                        let offset: usize = parts[2].parse().map_err(|_| {
                            Error::CheckpointFormat(format!("bad offset `{}`", parts[2]))
                        })?;
                        manifest.push((parts[0].to_string(), shape, offset));
                    } else {
                        return Err(Error::CheckpointFormat(format!(
                            "unexpected header line `{line}`"
                        )));
                    }
                }
                let mut payload = Vec::new();
                r.read_to_end(&mut payload)?;
                if payload.len() % 4 != 0 {
                    return Err(Error::CheckpointFormat(format!(
                        "payload length {} not a multiple of 4",
                        payload.len()
                    )));
                }
                let floats: Vec<f32> = payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                let mut expected_offset = 0usize;
                for (name, shape, offset) in manifest {
                    let len: usize = shape.iter().product();
                    if offset != expected_offset {
                        return Err(Error::CheckpointFormat(format!(
                            "entry `{name}` offset {offset}, expected {expected_offset}"
                        )));
                    }
                    if offset + len > floats.len() {
                        return Err(Error::CheckpointFormat(format!(
                            "entry `{name}` overruns payload"
                        )));
                    }
                    c.push_entry(&name, &shape, floats[offset..offset + len].to_vec());
                    expected_offset = offset + len;
                }
                if expected_offset != floats.len() {
                    return Err(Error::CheckpointFormat(format!(
                        "{} trailing floats after last entry",
                        floats.len() - expected_offset
                    )));
                }
                Ok(c)
            }
            _ => Err(Error::CheckpointFormat(format!(
                "not a container file: `{}`",
                line.trim_end()
            ))),
        }
    }
}
