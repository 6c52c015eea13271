//! Parameter checkpoints.
//!
//! Layout: a UTF-8 header of newline-terminated lines
//!
//! ```text
//! DFCKPT 1
//! meta {"free":"form json"}        (optional, single line)
//! section main 2
//! param fc1.w 3x4
//! param fc1.b 4
//! end
//! ```
//!
//! followed by every tensor's values as little-endian `f64`, in the order the
//! `param` lines appear. Scalars are written with shape `scalar`.

use std::io::Write;
use std::path::Path;

use super::{AutodiffError, ParamStore, Tensor};

const MAGIC: &str = "DFCKPT 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Option<String>,
    pub sections: Vec<(String, ParamStore)>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&ParamStore> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    /// Inserts or replaces a section, keeping the position of an existing one.
    pub fn set_section(&mut self, name: &str, params: ParamStore) {
        match self.sections.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = params,
            None => self.sections.push((name.to_string(), params)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        if let Some(m) = &self.meta {
            header.push_str("meta ");
            header.push_str(&m.replace('\n', " "));
            header.push('\n');
        }
        for (name, params) in &self.sections {
            header.push_str(&format!("section {} {}\n", name, params.len()));
            for (pname, t) in params.names().iter().zip(params.tensors()) {
                let dims = if t.shape().is_empty() {
                    "scalar".to_string()
                } else {
                    t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
                };
                header.push_str(&format!("param {} {}\n", pname, dims));
            }
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for (_, params) in &self.sections {
            for t in params.tensors() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AutodiffError> {
        let bad = |offset: usize, reason: &str| AutodiffError::MalformedCheckpoint {
            offset,
            reason: reason.to_string(),
        };
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<(usize, String), AutodiffError> {
            let start = *pos;
            let end = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad(start, "unterminated header line"))?;
            let line = std::str::from_utf8(&bytes[start..start + end])
                .map_err(|_| bad(start, "header is not UTF-8"))?
                .to_string();
            *pos = start + end + 1;
            Ok((start, line))
        };

        let (off, first) = next_line(&mut pos)?;
        if first != MAGIC {
            return Err(bad(off, "bad magic"));
        }
        let mut ckpt = Checkpoint::default();
        // (section name, param names, shapes)
        let mut layout: Vec<(String, Vec<(String, Vec<usize>)>)> = Vec::new();
        loop {
            let (off, line) = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            if let Some(m) = line.strip_prefix("meta ") {
                ckpt.meta = Some(m.to_string());
            } else if let Some(rest) = line.strip_prefix("section ") {
                let mut it = rest.split_whitespace();
                let name = it.next().ok_or_else(|| bad(off, "section without name"))?;
                layout.push((name.to_string(), Vec::new()));
            } else if let Some(rest) = line.strip_prefix("param ") {
                let mut it = rest.split_whitespace();
                let (Some(name), Some(dims)) = (it.next(), it.next()) else {
                    return Err(bad(off, "param line needs name and shape"));
                };
                let shape = if dims == "scalar" {
                    vec![]
                } else {
                    dims.split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad(off, "bad shape"))?
                };
                let sec = layout.last_mut().ok_or_else(|| bad(off, "param before any section"))?;
                sec.1.push((name.to_string(), shape));
            } else {
                return Err(bad(off, "unknown header line"));
            }
        }
        for (name, entries) in layout {
            let mut store = ParamStore::new();
            for (pname, shape) in entries {
                let n: usize = shape.iter().product();
                let need = n * 8;
                if pos + need > bytes.len() {
                    return Err(bad(pos, "truncated tensor data"));
                }
                let data = bytes[pos..pos + need]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                pos += need;
                store.add(pname, Tensor::new(shape, data)?);
            }
            ckpt.sections.push((name, store));
        }
        if pos != bytes.len() {
            return Err(bad(pos, "trailing bytes after tensor data"));
        }
        Ok(ckpt)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), AutodiffError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, AutodiffError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut main = ParamStore::new();
        main.add("fc.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap());
        main.add("fc.b", Tensor::from_vec(vec![0.5, 0.25, 0.125]));
        main.add("s", Tensor::scalar(9.0));
        let mut refiner = ParamStore::new();
        refiner.add("r.w", Tensor::from_vec(vec![4.0]));
        Checkpoint {
            meta: Some("{\"d\":1}".into()),
            sections: vec![("main".into(), main), ("refiner".into(), refiner)],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn truncated_data_reports_offset() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, AutodiffError::MalformedCheckpoint { .. }), "{err}");
        let err = Checkpoint::from_bytes(b"DFCKPT 1\nsection main 1\n").unwrap_err();
        assert!(matches!(err, AutodiffError::MalformedCheckpoint { .. }));
        assert!(Checkpoint::from_bytes(b"NOPE\n").is_err());
    }

    #[test]
    fn set_section_replaces_in_place() {
        let mut c = sample();
        let mut p = ParamStore::new();
        p.add("x", Tensor::scalar(1.0));
        c.set_section("main", p.clone());
        assert_eq!(c.sections[0].0, "main");
        assert_eq!(c.section("main"), Some(&p));
        assert!(c.section("other").is_none());
    }
}
