use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{connected_components, generate, split_counts, DomainSample, DomainSpec, LabelMap};
use crate::align::DomainLabel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(format_err(path, "file too short for a netpbm header"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text
            .parse()
            .map_err(|_| format_err(path, "malformed netpbm header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(path, "malformed netpbm header"));
    }
    let maxval = fields[2] as u32;
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        magic,
        width: fields[0] as usize,
        height: fields[1] as usize,
        maxval,
        offset: pos + 1,
    })
}

fn read_samples(bytes: &[u8], h: &Header, channels: usize, path: &Path) -> Result<Vec<u32>> {
    let wide = h.maxval > 255;
    let n = h.width * h.height * channels;
    let need = n * if wide { 2 } else { 1 };
    let body = &bytes[h.offset..];
    if body.len() < need {
        return Err(format_err(path, format!("expected {need} bytes of pixel data, found {}", body.len())));
    }
    Ok(if wide {
        body[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
    } else {
        body[..n].iter().map(|&b| b as u32).collect()
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Binary PPM (P6) to a `3 x H x W` tensor in `[0, 1]`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let h = parse_header(&bytes, path)?;
    if &h.magic != b"P6" {
        return Err(format_err(path, "not a binary PPM (P6) file"));
    }
    let raw = read_samples(&bytes, &h, 3, path)?;
    let (hw, m) = (h.width * h.height, h.maxval as f64);
    Ok(Tensor::from_fn([3, h.height, h.width], |i| {
        let (c, p) = (i / hw, i % hw);
        raw[p * 3 + c] as f64 / m
    }))
}

/// Binary PGM (P5, 8 or 16 bit) as raw sample values plus maxval.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(LabelMap, u32)> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let h = parse_header(&bytes, path)?;
    if &h.magic != b"P5" {
        return Err(format_err(path, "not a binary PGM (P5) file"));
    }
    let raw = read_samples(&bytes, &h, 1, path)?;
    Ok((LabelMap::from_vec(h.height, h.width, raw), h.maxval))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn quantise(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `3 x H x W` tensor in `[0, 1]` to an 8-bit P6 file.
pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor<f64>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("write_ppm", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(quantise(image.data()[c * h * w + p]));
        }
    }
    write_file(path.as_ref(), &out)
}

/// Values in `[0, 1]` (any shape ending in `H x W`) to an 8-bit P5 file.
pub fn write_pgm8(path: impl AsRef<Path>, values: &[f64], height: usize, width: usize) -> Result<()> {
    assert_eq!(values.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantise(v)));
    write_file(path.as_ref(), &out)
}

/// Instance labels as a 16-bit P5 file.
pub fn write_pgm16(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    if labels.max_label() > u16::MAX as u32 {
        return Err(format_err(path, "more than 65535 instances"));
    }
    let (h, w) = (labels.height, labels.width);
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &l in &labels.labels {
        out.extend((l as u16).to_be_bytes());
    }
    write_file(path, &out)
}

fn partner(image: &Path, suffix: &str) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    image.with_file_name(format!("{stem}{suffix}.pgm"))
}

/// Loads one image with its `_mask.pgm` partner, using a `_inst.pgm`
/// instance map when present and 8-connected components otherwise.
fn load_pair(image_path: &Path, mask_path: &Path, label: DomainLabel) -> Result<DomainSample> {
    let image = read_ppm(image_path)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h != w || h % 4 != 0 {
        return Err(format_err(image_path, format!("unsupported size {w}x{h}: must be square and divisible by 4")));
    }
    if !mask_path.exists() {
        return Err(format_err(image_path, format!("missing mask partner {}", mask_path.display())));
    }
    let (mask, maxval) = read_pgm(mask_path)?;
    if (mask.height, mask.width) != (h, w) {
        return Err(format_err(mask_path, format!("mask is {}x{}, image is {w}x{h}", mask.width, mask.height)));
    }
    let fg: Vec<bool> = mask.labels.iter().map(|&v| v as f64 / maxval as f64 >= 0.5).collect();
    let inst_path = partner(image_path, "_inst");
    let instances = if inst_path.exists() {
        let (mut inst, _) = read_pgm(&inst_path)?;
        if (inst.height, inst.width) != (h, w) {
            return Err(format_err(&inst_path, "instance map size differs from image"));
        }
        for (l, &f) in inst.labels.iter_mut().zip(&fg) {
            if !f {
                *l = 0;
            }
        }
        inst.relabel_contiguous();
        inst
    } else {
        connected_components(&fg, h, w, 1)
    };
    Ok(DomainSample::new(image, instances, label))
}

/// Every `<stem>.ppm` in `dir` (sorted by name) with its `<stem>_mask.pgm`.
pub fn load_pairs(dir: impl AsRef<Path>, label: DomainLabel) -> Result<Vec<DomainSample>> {
    let dir = dir.as_ref();
    let mut images: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    images.sort();
    images
        .iter()
        .map(|img| load_pair(img, &partner(img, "_mask"), label))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub domain_id: u32,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

/// Tab-separated `domain_id  image  mask  [split]` lines; relative paths are
/// resolved against the manifest's directory. Rows without a split are train.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.domain_id,
                e.image.display(),
                e.mask.display(),
                e.split
            ));
        }
        out
    }

    pub fn parse(text: &str, root: &Path, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(format_err(path, format!("line {}: expected 3 or 4 tab-separated columns", n + 1)));
            }
            let domain_id = cols[0]
                .trim()
                .parse()
                .map_err(|_| format_err(path, format!("line {}: bad domain id {:?}", n + 1, cols[0])))?;
            let split = match cols.get(3) {
                Some(s) => s.trim().parse().map_err(|e: Error| format_err(path, format!("line {}: {e}", n + 1)))?,
                None => Split::Train,
            };
            entries.push(ManifestEntry {
                domain_id,
                image: PathBuf::from(cols[1]),
                mask: PathBuf::from(cols[2]),
                split,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn domains(&self) -> Vec<u32> {
        let mut d: Vec<u32> = self.entries.iter().map(|e| e.domain_id).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    /// Samples of `split` (all splits when `None`), tagged against `primary_id`.
    pub fn load_samples(&self, split: Option<Split>, primary_id: u32) -> Result<Vec<DomainSample>> {
        self.entries
            .iter()
            .filter(|e| split.map_or(true, |s| e.split == s))
            .map(|e| {
                load_pair(
                    &self.resolve(&e.image),
                    &self.resolve(&e.mask),
                    DomainLabel::new(e.domain_id, primary_id),
                )
            })
            .collect()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::parse(&text, &root, path)
}

/// Generates `count` samples per spec under `out/<name>/`, writes images,
/// masks, instance maps and `out/manifest.tsv` with 70/10/20 splits.
pub fn write_dataset(out: impl AsRef<Path>, specs: &[DomainSpec], seed: u64, count: usize) -> Result<Manifest> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = Manifest {
        root: out.to_path_buf(),
        entries: Vec::new(),
    };
    for spec in specs {
        let samples = generate(spec, seed, count)?;
        let (train, val, _) = split_counts(count);
        for (i, s) in samples.iter().enumerate() {
            let stem = format!("{}_{i:04}", spec.name);
            let image = PathBuf::from(&spec.name).join(format!("{stem}.ppm"));
            let mask = PathBuf::from(&spec.name).join(format!("{stem}_mask.pgm"));
            let inst = PathBuf::from(&spec.name).join(format!("{stem}_inst.pgm"));
            write_ppm(out.join(&image), &s.image)?;
            write_pgm8(out.join(&mask), s.mask.data(), s.size(), s.size())?;
            write_pgm16(out.join(&inst), &s.instances)?;
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            manifest.entries.push(ManifestEntry {
                domain_id: spec.domain_id,
                image,
                mask,
                split,
            });
        }
    }
    let path = out.join("manifest.tsv");
    write_file(&path, manifest.to_text().as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment_parses() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let h = parse_header(bytes, Path::new("x")).unwrap();
        assert_eq!((h.width, h.height, h.maxval), (2, 1, 255));
        assert_eq!(&bytes[h.offset..], b"\x00\xff");
    }

    #[test]
    fn three_column_manifest_defaults_to_train() {
        let m = Manifest::parse("0\ta.ppm\ta_mask.pgm\n", Path::new("/d"), Path::new("m")).unwrap();
        assert_eq!(m.entries[0].split, Split::Train);
        assert_eq!(m.resolve(&m.entries[0].image), PathBuf::from("/d/a.ppm"));
        assert!(Manifest::parse("0\ta.ppm\n", Path::new("/d"), Path::new("m")).is_err());
    }
}
