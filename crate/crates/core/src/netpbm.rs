//! Binary PPM (P6) and PGM (P5) with maxval 255, plus the JSON dataset
//! manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn write_ppm<W: Write>(mut w: W, image: &Image) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Format(format!(
            "PPM needs 3 channels, image has {}",
            image.channels()
        )));
    }
    write!(w, "P6\n{} {}\n255\n", image.width(), image.height())?;
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn write_pgm<W: Write>(mut w: W, labels: &LabelMap) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", labels.width(), labels.height())?;
    w.write_all(labels.data())?;
    w.flush()?;
    Ok(())
}

struct Header {
    width: usize,
    height: usize,
}

/// Parse `magic width height maxval` followed by exactly one whitespace byte.
fn read_header(bytes: &[u8], magic: &str) -> Result<(Header, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(Error::Format(format!("expected magic {magic}")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("malformed header: missing field {}", i + 1)));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ASCII digits");
        *field = text
            .parse()
            .map_err(|_| Error::Format(format!("malformed header: {text} out of range")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed header: no whitespace after maxval".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    Ok((Header { width, height }, pos + 1))
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    let available = bytes.len().saturating_sub(offset);
    if available < len {
        return Err(Error::Format(format!("truncated payload: {available} of {len} bytes")));
    }
    Ok(&bytes[offset..offset + len])
}

pub fn read_ppm<R: Read>(mut r: R) -> Result<Image> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (h, offset) = read_header(&bytes, "P6")?;
    let data = payload(&bytes, offset, h.width * h.height * 3)?;
    Image::new(
        h.height,
        h.width,
        3,
        data.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

pub fn read_pgm<R: Read>(mut r: R) -> Result<LabelMap> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (h, offset) = read_header(&bytes, "P5")?;
    let data = payload(&bytes, offset, h.width * h.height)?;
    LabelMap::new(h.height, h.width, data.to_vec())
}

pub fn save_ppm(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    write_ppm(BufWriter::new(File::create(path)?), image)
}

pub fn save_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write_pgm(BufWriter::new(File::create(path)?), labels)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
    read_ppm(BufReader::new(File::open(path)?))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    read_pgm(BufReader::new(File::open(path)?))
}

/// Image and label files of a dataset plus its labeled split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: Vec<String>,
    pub labels: Vec<String>,
    pub labeled_indices: Vec<usize>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if m.images.len() != m.labels.len() {
            return Err(Error::Format("manifest has unequal image and label counts".into()));
        }
        if let Some(&i) = m.labeled_indices.iter().find(|&&i| i >= m.images.len()) {
            return Err(Error::Format(format!("labeled index {i} out of range")));
        }
        Ok(m)
    }
}
