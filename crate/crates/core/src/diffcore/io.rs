//! Tensor container on disk.
//!
//! A container is two files sharing a stem:
//!
//! * `<stem>.bin`: the values of every entry, concatenated in header order,
//!   as little-endian IEEE-754 binary64.
//! * `<stem>.hdr`: UTF-8 text. First line `# dualkd-tensors v1`, then one
//!   line per entry: `name<TAB>dtype<TAB>[d0,d1,...]` where dtype is the
//!   payload type (always `f64`) and the bracketed list is the shape
//!   (`[]` for a scalar).

use std::fs;
use std::path::{Path, PathBuf};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &str = "# dualkd-tensors v1";

pub type NamedTensor<T> = (String, Tensor<T>);

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut bin = stem.as_os_str().to_owned();
    bin.push(".bin");
    let mut hdr = stem.as_os_str().to_owned();
    hdr.push(".hdr");
    (PathBuf::from(bin), PathBuf::from(hdr))
}

pub fn save_tensors<T: Scalar>(stem: &Path, entries: &[NamedTensor<T>]) -> Result<()> {
    let (bin, hdr) = paths(stem);
    let mut header = String::from(MAGIC);
    header.push('\n');
    let total: usize = entries.iter().map(|(_, t)| t.numel()).sum();
    let mut payload = Vec::with_capacity(total * 8);
    for (name, t) in entries {
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(Error::Data(format!("invalid tensor name {name:?}")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("{name}\tf64\t[{}]\n", dims.join(",")));
        for v in t.data() {
            payload.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
        }
    }
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))?;
    fs::write(&hdr, header).map_err(|e| Error::io(&hdr, e))?;
    Ok(())
}

pub fn load_tensors<T: Scalar>(stem: &Path) -> Result<Vec<NamedTensor<T>>> {
    let (bin, hdr) = paths(stem);
    let header = fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
    let payload = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Data(format!(
            "{} is not a tensor header",
            hdr.display()
        )));
    }
    let mut out = Vec::new();
    let mut offset = 0usize;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dtype, shape] = fields[..] else {
            return Err(Error::Data(format!("malformed header line {line:?}")));
        };
        if dtype != "f64" {
            return Err(Error::Data(format!("unsupported payload dtype {dtype}")));
        }
        let inner = shape
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| Error::Data(format!("malformed shape {shape:?}")))?;
        let dims = if inner.is_empty() {
            Vec::new()
        } else {
            inner
                .split(',')
                .map(|d| d.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("bad extent in {shape:?}: {e}")))?
        };
        let n: usize = dims.iter().product();
        let end = offset + n * 8;
        if end > payload.len() {
            return Err(Error::Data(format!("payload too short for entry {name}")));
        }
        let data = payload[offset..end]
            .chunks_exact(8)
            .map(|b| T::from_f64_lossy(f64::from_le_bytes(b.try_into().unwrap())))
            .collect();
        offset = end;
        out.push((name.to_string(), Tensor::new(dims, data)?));
    }
    if offset != payload.len() {
        return Err(Error::Data(format!(
            "payload has {} trailing bytes",
            payload.len() - offset
        )));
    }
    Ok(out)
}
