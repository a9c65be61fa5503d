//! On-disk container shared by datasets, checkpoints and metrics files.
//!
//! Layout:
//!
//! ```text
//! <magic>\n
//! format_version=<u32>\n
//! <key>=<value>\n ...                      (free-form metadata, insertion order)
//! array.<name>=<dtype>;<offset>;<bytes>;<d0,d1,...>\n ...
//! blob_len=<bytes>\n
//! blob_crc32=<8 hex digits>\n
//! end_manifest\n
//! <blob>
//! ```
//!
//! Arrays are little-endian `f32` or raw `u8`, row-major, packed in the blob at
//! the listed byte offsets.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated inside the manifest")]
    Truncated,
    #[error("blob checksum mismatch: {0}")]
    Checksum(String),
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("missing {0}")]
    Missing(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::U8 => "u8",
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: DType,
    pub offset: usize,
    pub bytes: usize,
    pub shape: Vec<usize>,
}

/// A parsed (or under-construction) container.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub magic: String,
    pub version: u32,
    meta: Vec<(String, String)>,
    arrays: Vec<ArrayEntry>,
    blob: Vec<u8>,
}

const END: &str = "end_manifest";

impl Container {
    pub fn new(magic: &str, version: u32) -> Self {
        Self { magic: magic.to_string(), version, ..Default::default() }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!key.contains(['=', '\n']) && !value.contains('\n'));
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, FormatError> {
        self.get(key).ok_or_else(|| FormatError::Missing(format!("manifest key {key}")))
    }

    pub fn parse_key<T: std::str::FromStr>(&self, key: &str) -> Result<T, FormatError> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| FormatError::Malformed(format!("{key}={raw}")))
    }

    pub fn meta(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn arrays(&self) -> &[ArrayEntry] {
        &self.arrays
    }

    pub fn has_array(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }

    fn push_array(&mut self, name: &str, dtype: DType, shape: &[usize], bytes: &[u8]) {
        self.arrays.push(ArrayEntry {
            name: name.to_string(),
            dtype,
            offset: self.blob.len(),
            bytes: bytes.len(),
            shape: shape.to_vec(),
        });
        self.blob.extend_from_slice(bytes);
    }

    pub fn add_f32(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array {name}");
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.push_array(name, DType::F32, shape, &bytes);
    }

    pub fn add_u8(&mut self, name: &str, shape: &[usize], data: &[u8]) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array {name}");
        self.push_array(name, DType::U8, shape, data);
    }

    fn entry(&self, name: &str, dtype: DType) -> Result<&ArrayEntry, FormatError> {
        let e = self
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| FormatError::Missing(format!("array {name}")))?;
        if e.dtype != dtype {
            return Err(FormatError::Malformed(format!("array {name} has dtype {}", e.dtype.name())));
        }
        Ok(e)
    }

    pub fn f32_array(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>), FormatError> {
        let e = self.entry(name, DType::F32)?;
        let raw = &self.blob[e.offset..e.offset + e.bytes];
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok((e.shape.clone(), data))
    }

    pub fn u8_array(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>), FormatError> {
        let e = self.entry(name, DType::U8)?;
        Ok((e.shape.clone(), self.blob[e.offset..e.offset + e.bytes].to_vec()))
    }

    fn manifest_text(&self) -> String {
        let mut s = format!("{}\nformat_version={}\n", self.magic, self.version);
        for (k, v) in &self.meta {
            s.push_str(&format!("{k}={v}\n"));
        }
        for a in &self.arrays {
            let shape: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!(
                "array.{}={};{};{};{}\n",
                a.name,
                a.dtype.name(),
                a.offset,
                a.bytes,
                shape.join(",")
            ));
        }
        s.push_str(&format!("blob_len={}\n", self.blob.len()));
        s.push_str(&format!("blob_crc32={:08x}\n", crc32fast::hash(&self.blob)));
        s.push_str(END);
        s.push('\n');
        s
    }

    /// CRC32 of the manifest text, a short identity for the whole file.
    pub fn fingerprint(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.manifest_text().as_bytes()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.manifest_text().into_bytes();
        out.extend_from_slice(&self.blob);
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path, magic: &str, version: u32) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?, magic, version)
    }

    pub fn from_bytes(bytes: &[u8], magic: &str, version: u32) -> Result<Self, FormatError> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str, FormatError> {
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or(FormatError::Truncated)?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| FormatError::Malformed("non-utf8 manifest".into()))
        };

        let found_magic = next_line()?;
        if found_magic != magic {
            return Err(FormatError::BadMagic { expected: magic.into(), found: found_magic.into() });
        }
        let mut c = Container::new(magic, 0);
        let mut blob_len = None;
        let mut blob_crc = None;
        loop {
            let line = next_line()?;
            if line == END {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| FormatError::Malformed(line.to_string()))?;
            match k {
                "format_version" => {
                    let found: u32 = v.parse().map_err(|_| FormatError::Malformed(line.to_string()))?;
                    if found != version {
                        return Err(FormatError::VersionMismatch { found, expected: version });
                    }
                    c.version = found;
                }
                "blob_len" => blob_len = Some(v.parse::<usize>().map_err(|_| FormatError::Malformed(line.into()))?),
                "blob_crc32" => {
                    blob_crc = Some(u32::from_str_radix(v, 16).map_err(|_| FormatError::Malformed(line.into()))?)
                }
                _ => match k.strip_prefix("array.") {
                    Some(name) => c.arrays.push(parse_array(name, v)?),
                    None => c.meta.push((k.to_string(), v.to_string())),
                },
            }
        }
        if c.version != version {
            return Err(FormatError::Missing("format_version".into()));
        }
        let blob_len = blob_len.ok_or_else(|| FormatError::Missing("blob_len".into()))?;
        let blob_crc = blob_crc.ok_or_else(|| FormatError::Missing("blob_crc32".into()))?;
        let blob = &bytes[pos..];
        if blob.len() != blob_len {
            return Err(FormatError::Checksum(format!("blob holds {} bytes, manifest declares {blob_len}", blob.len())));
        }
        let actual = crc32fast::hash(blob);
        if actual != blob_crc {
            return Err(FormatError::Checksum(format!("expected {blob_crc:08x}, computed {actual:08x}")));
        }
        for a in &c.arrays {
            let expect = a.shape.iter().product::<usize>() * a.dtype.width();
            if a.bytes != expect || a.offset + a.bytes > blob_len {
                return Err(FormatError::Malformed(format!("array {} extent", a.name)));
            }
        }
        c.blob = blob.to_vec();
        Ok(c)
    }
}

fn parse_array(name: &str, spec: &str) -> Result<ArrayEntry, FormatError> {
    let bad = || FormatError::Malformed(format!("array.{name}={spec}"));
    let parts: Vec<&str> = spec.split(';').collect();
    let [dtype, offset, bytes, shape] = parts.as_slice() else { return Err(bad()) };
    let dtype = match *dtype {
        "f32" => DType::F32,
        "u8" => DType::U8,
        _ => return Err(bad()),
    };
    let shape = shape
        .split(',')
        .map(|d| d.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| bad())?;
    Ok(ArrayEntry {
        name: name.to_string(),
        dtype,
        offset: offset.parse().map_err(|_| bad())?,
        bytes: bytes.parse().map_err(|_| bad())?,
        shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("TEST", 3);
        c.set("seed", 7);
        c.add_f32("w", &[2, 2], &[1.0, -2.5, 0.0, 3.25]);
        c.add_u8("labels", &[3], &[1, 2, 9]);
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes(), "TEST", 3).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.f32_array("w").unwrap().1, vec![1.0, -2.5, 0.0, 3.25]);
        assert_eq!(back.parse_key::<u64>("seed").unwrap(), 7);
    }

    #[test]
    fn flipped_blob_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 5] ^= 0x40;
        assert!(matches!(Container::from_bytes(&bytes, "TEST", 3), Err(FormatError::Checksum(_))));
    }

    #[test]
    fn short_blob_fails_checksum() {
        let mut bytes = sample().to_bytes();
        bytes.pop();
        assert!(matches!(Container::from_bytes(&bytes, "TEST", 3), Err(FormatError::Checksum(_))));
    }

    #[test]
    fn cut_manifest_is_truncated() {
        let bytes = sample().to_bytes();
        let cut = bytes.windows(4).position(|w| w == b"blob").unwrap();
        assert!(matches!(Container::from_bytes(&bytes[..cut], "TEST", 3), Err(FormatError::Truncated)));
    }

    #[test]
    fn other_version_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Container::from_bytes(&bytes, "TEST", 4),
            Err(FormatError::VersionMismatch { found: 3, expected: 4 })
        ));
    }
}
