//! Binary PPM (P6, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use super::render::Image;
use super::ToyError;
use crate::tensor::Tensor;

pub fn encode(img: &Image) -> Result<Vec<u8>, ToyError> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(ToyError::Invalid(format!("PPM needs an H×W×3 image, got {s:?}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Image, ToyError> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ToyError::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(ToyError::Format(format!("expected P6 with maxval 255, got {} / {}", fields[0], fields[3])));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| ToyError::Format(format!("bad PPM dimension {s:?}")));
    let (w, h) = (dim(&fields[1])?, dim(&fields[2])?);
    let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| ToyError::Format("truncated PPM body".into()))?;
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new([h, w, 3], data).expect("length checked"))
}

pub fn write(path: &Path, img: &Image) -> Result<(), ToyError> {
    fs::write(path, encode(img)?).map_err(|e| ToyError::io(path, e))
}

pub fn read(path: &Path) -> Result<Image, ToyError> {
    decode(&fs::read(path).map_err(|e| ToyError::io(path, e))?)
}
