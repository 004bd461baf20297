//! On-disk formats: 16-bit PNG maps, `.meta` pose sidecars, dataset
//! directories, palette exports, and atomic file writes.
//!
//! PNG scale: a stored sample `s` (0..=65535) encodes pressure
//! `s / 65535 · FULL_SCALE`.

use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use spmkd_core::{Posture, PressureMap};

use crate::error::{Error, IoContext, Result};
use crate::generator::{generate_sample, sample_seed, GeneratorConfig, SkeletonPose, SyntheticSample, JOINT_NAMES};

/// Pressure represented by the PNG sample value 65535.
pub const FULL_SCALE: f64 = 2.0;
pub const MANIFEST: &str = "manifest.txt";
pub const SAMPLES_DIR: &str = "samples";
const MANIFEST_FORMAT: &str = "spmkd-dataset/1";
const META_HEADER: &str = "spmkd-meta/1";
/// Every `VAL_EVERY`-th sample (index ≡ VAL_EVERY-1) is assigned to validation.
pub const VAL_EVERY: usize = 5;
const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Write via a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).at(dir)?;
    tmp.write_all(bytes).at(path)?;
    tmp.as_file().sync_all().at(path)?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_owned(), source: e.error })?;
    Ok(())
}

fn parse_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse { path: path.to_owned(), offset: offset as u64, detail: detail.into() }
}

pub fn encode_png16(map: &PressureMap) -> Result<Vec<u8>> {
    let mut samples = Vec::with_capacity(map.values.len() * 2);
    for (i, &v) in map.values.iter().enumerate() {
        let q = (v as f64 / FULL_SCALE * 65535.0).round();
        if !(0.0..=65535.0).contains(&q) {
            return Err(Error::Data(format!("pressure {v} at index {i} exceeds the PNG full scale {FULL_SCALE}")));
        }
        samples.extend_from_slice(&(q as u16).to_be_bytes());
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, map.width as u32, map.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        enc.set_compression(png::Compression::Balanced);
        let mut w = enc.write_header().map_err(|e| Error::Data(format!("png encode: {e}")))?;
        w.write_image_data(&samples).map_err(|e| Error::Data(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Chunk-level validation; returns the offset of the first IDAT chunk.
fn check_chunks(path: &Path, bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 8 || bytes[..8] != PNG_SIGNATURE {
        return Err(parse_err(path, 0, "missing PNG signature"));
    }
    let mut off = 8;
    let mut first_idat = None;
    loop {
        if off + 12 > bytes.len() {
            return Err(parse_err(path, off, "truncated chunk header"));
        }
        let len = u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let kind = &bytes[off + 4..off + 8];
        let end = off + 8 + len;
        if end + 4 > bytes.len() {
            return Err(parse_err(path, off, format!("chunk length {len} runs past end of file")));
        }
        let crc = u32::from_be_bytes(bytes[end..end + 4].try_into().unwrap());
        if crc32fast::hash(&bytes[off + 4..end]) != crc {
            return Err(parse_err(path, end, format!("CRC mismatch in {} chunk", String::from_utf8_lossy(kind))));
        }
        if off == 8 && kind != b"IHDR" {
            return Err(parse_err(path, off, "first chunk is not IHDR"));
        }
        if kind == b"IDAT" && first_idat.is_none() {
            first_idat = Some(off);
        }
        off = end + 4;
        if kind == b"IEND" {
            break;
        }
    }
    if off != bytes.len() {
        return Err(parse_err(path, off, "trailing bytes after IEND"));
    }
    first_idat.ok_or_else(|| parse_err(path, off, "no IDAT chunk"))
}

/// Reads a 16-bit grayscale PNG at the fixed scale.
pub fn decode_png16(path: &Path, bytes: &[u8]) -> Result<PressureMap> {
    let idat = check_chunks(path, bytes)?;
    // IHDR data starts at 16: width, height, bit depth (24), colour type (25)
    if bytes[24] != 16 || bytes[25] != 0 {
        return Err(parse_err(path, 24, format!("expected 16-bit grayscale, got depth {} colour type {}", bytes[24], bytes[25])));
    }
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| parse_err(path, 8, e.to_string()))?;
    let (w, h) = (reader.info().width as usize, reader.info().height as usize);
    let mut buf = vec![0u8; w * h * 2];
    reader.next_frame(&mut buf).map_err(|e| parse_err(path, idat, e.to_string()))?;
    let values = buf
        .chunks_exact(2)
        .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0 * FULL_SCALE) as f32)
        .collect();
    let mut map = PressureMap::new(h, w, values)?;
    map.source = Some(path.display().to_string());
    Ok(map)
}

pub fn load_png16(path: &Path) -> Result<PressureMap> {
    decode_png16(path, &fs::read(path).at(path)?)
}

pub fn encode_meta(pose: &SkeletonPose, seed: u64) -> String {
    let mut s = format!("{META_HEADER}\nseed={seed}\nposture={}\n", pose.posture.as_str());
    for (name, p) in JOINT_NAMES.iter().zip(&pose.joints) {
        s.push_str(&format!("{name}={},{}\n", p[0], p[1]));
    }
    s
}

/// Parses a sidecar; errors carry the byte offset of the offending line.
pub fn decode_meta(path: &Path, text: &str) -> Result<(SkeletonPose, u64)> {
    let mut seed = None;
    let mut posture = None;
    let mut joints: [Option<[f64; 2]>; 14] = [None; 14];
    let mut off = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let at = off;
        off += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if i == 0 {
            if line != META_HEADER {
                return Err(parse_err(path, at, format!("expected header {META_HEADER:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(parse_err(path, at, "expected key=value"));
        };
        match key {
            "seed" => seed = Some(value.parse::<u64>().map_err(|e| parse_err(path, at, format!("seed: {e}")))?),
            "posture" => {
                posture = Some(Posture::parse(value).ok_or_else(|| parse_err(path, at, format!("unknown posture {value:?}")))?)
            }
            _ => {
                let j = JOINT_NAMES.iter().position(|n| *n == key).ok_or_else(|| parse_err(path, at, format!("unknown key {key:?}")))?;
                if joints[j].is_some() {
                    return Err(parse_err(path, at, format!("duplicate joint {key}")));
                }
                let xy: Vec<f64> = value
                    .split(',')
                    .map(|c| c.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(path, at, format!("{key}: {e}")))?;
                if xy.len() != 2 || !xy.iter().all(|c| (0.0..=1.0).contains(c)) {
                    return Err(parse_err(path, at, format!("{key}: expected two coordinates in [0, 1]")));
                }
                joints[j] = Some([xy[0], xy[1]]);
            }
        }
    }
    if off == 0 {
        return Err(parse_err(path, 0, "empty sidecar"));
    }
    let seed = seed.ok_or_else(|| parse_err(path, off, "missing seed"))?;
    let posture = posture.ok_or_else(|| parse_err(path, off, "missing posture"))?;
    let mut out = [[0.0; 2]; 14];
    for (j, slot) in joints.iter().enumerate() {
        out[j] = slot.ok_or_else(|| parse_err(path, off, format!("missing joint {}", JOINT_NAMES[j])))?;
    }
    Ok((SkeletonPose { joints: out, posture }, seed))
}

pub fn meta_path(png: &Path) -> PathBuf {
    png.with_extension("meta")
}

/// Writes `<stem>.png` and, when a pose is present, `<stem>.meta`.
pub fn save_sample(sample: &SyntheticSample, png_path: &Path) -> Result<()> {
    write_atomic(png_path, &encode_png16(&sample.map)?)?;
    if let Some(pose) = &sample.pose {
        write_atomic(&meta_path(png_path), encode_meta(pose, sample.seed.unwrap_or(0)).as_bytes())?;
    }
    Ok(())
}

/// A missing sidecar yields the map with no pose.
pub fn load_sample(png_path: &Path) -> Result<SyntheticSample> {
    let map = load_png16(png_path)?;
    let meta = meta_path(png_path);
    match fs::read(&meta) {
        Ok(bytes) => {
            let text = String::from_utf8(bytes).map_err(|e| parse_err(&meta, e.utf8_error().valid_up_to(), "invalid UTF-8"))?;
            let (pose, seed) = decode_meta(&meta, &text)?;
            Ok(SyntheticSample { map, pose: Some(pose), seed: Some(seed) })
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(SyntheticSample { map, pose: None, seed: None }),
        Err(e) => Err(Error::Io { path: meta, source: e }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn for_index(i: usize) -> Split {
        if i % VAL_EVERY == VAL_EVERY - 1 {
            Split::Val
        } else {
            Split::Train
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub generator_hash: u64,
    pub splits: Vec<Split>,
}

impl Manifest {
    pub fn encode(&self) -> String {
        let mut s = format!(
            "format={MANIFEST_FORMAT}\ncount={}\nseed={}\ngenerator_hash={:016x}\n",
            self.count, self.seed, self.generator_hash
        );
        for (i, sp) in self.splits.iter().enumerate() {
            s.push_str(&format!("split.{i:06}={}\n", sp.as_str()));
        }
        s
    }

    pub fn decode(path: &Path, text: &str) -> Result<Manifest> {
        let (mut format, mut count, mut seed, mut hash) = (None, None, None, None);
        let mut splits = Vec::new();
        let mut off = 0;
        for line in text.split_inclusive('\n') {
            let at = off;
            off += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| parse_err(path, at, "expected key=value"))?;
            let bad = |what: &str| parse_err(path, at, format!("invalid {what} {v:?}"));
            match k {
                "format" if v == MANIFEST_FORMAT => format = Some(()),
                "format" => return Err(bad("format")),
                "count" => count = Some(v.parse::<usize>().map_err(|_| bad("count"))?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad("seed"))?),
                "generator_hash" => hash = Some(u64::from_str_radix(v, 16).map_err(|_| bad("hash"))?),
                _ if k.starts_with("split.") => {
                    let idx: usize = k[6..].parse().map_err(|_| parse_err(path, at, format!("invalid key {k:?}")))?;
                    if idx != splits.len() {
                        return Err(parse_err(path, at, format!("split index {idx}, expected {}", splits.len())));
                    }
                    splits.push(match v {
                        "train" => Split::Train,
                        "val" => Split::Val,
                        _ => return Err(bad("split")),
                    });
                }
                _ => return Err(parse_err(path, at, format!("unknown key {k:?}"))),
            }
        }
        let missing = |what: &str| parse_err(path, off, format!("missing {what}"));
        format.ok_or_else(|| missing("format"))?;
        let count = count.ok_or_else(|| missing("count"))?;
        if splits.len() != count {
            return Err(parse_err(path, off, format!("{} split entries for count {count}", splits.len())));
        }
        Ok(Manifest { count, seed: seed.ok_or_else(|| missing("seed"))?, generator_hash: hash.ok_or_else(|| missing("generator_hash"))?, splits })
    }
}

pub fn sample_path(root: &Path, index: usize) -> PathBuf {
    root.join(SAMPLES_DIR).join(format!("{index:06}.png"))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    /// Loads the manifest and every listed sample.
    pub fn open(root: &Path) -> Result<Dataset> {
        let mpath = root.join(MANIFEST);
        let text = fs::read_to_string(&mpath).at(&mpath)?;
        let manifest = Manifest::decode(&mpath, &text)?;
        let samples = (0..manifest.count).into_par_iter().map(|i| load_sample(&sample_path(root, i))).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { root: root.to_owned(), manifest, samples })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SyntheticSample> {
        self.samples.iter().zip(&self.manifest.splits).filter(move |(_, s)| **s == split).map(|(x, _)| x)
    }

    pub fn maps(&self) -> Vec<PressureMap> {
        self.samples.iter().map(|s| s.map.clone()).collect()
    }
}

/// Generates `count` samples in parallel and writes the dataset directory.
/// The output bytes do not depend on thread scheduling.
pub fn generate_dataset(root: &Path, count: usize, seed: u64, cfg: &GeneratorConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = root.join(SAMPLES_DIR);
    fs::create_dir_all(&dir).at(&dir)?;
    (0..count).into_par_iter().try_for_each(|i| {
        let s = generate_sample(sample_seed(seed, i), cfg)?;
        save_sample(&s, &sample_path(root, i))
    })?;
    let manifest =
        Manifest { count, seed, generator_hash: cfg.hash(), splits: (0..count).map(Split::for_index).collect() };
    write_atomic(&root.join(MANIFEST), manifest.encode().as_bytes())?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Palette {
    /// Pressure above zero is white, everything else black.
    Binary,
    /// Grey level proportional to pressure; lighter is greater.
    Intensity,
}

impl Palette {
    pub fn parse(s: &str) -> Option<Palette> {
        match s {
            "binary" => Some(Palette::Binary),
            "intensity" => Some(Palette::Intensity),
            _ => None,
        }
    }

    /// 8-bit grey levels for a panel of values.
    pub fn apply(self, values: &[f32]) -> Result<Vec<u8>> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at index {i}")));
        }
        Ok(match self {
            Palette::Binary => values.iter().map(|&v| if v > 0.0 { 255 } else { 0 }).collect(),
            Palette::Intensity => {
                let m = values.iter().copied().fold(0.0f32, f32::max);
                values
                    .iter()
                    .map(|&v| if m > 0.0 { (v.max(0.0) as f64 / m as f64 * 255.0).round() as u8 } else { 0 })
                    .collect()
            }
        })
    }
}

/// A row-major grid of values to draw.
pub struct Panel<'a> {
    pub height: usize,
    pub width: usize,
    pub values: &'a [f32],
}

impl<'a> From<&'a PressureMap> for Panel<'a> {
    fn from(m: &'a PressureMap) -> Self {
        Panel { height: m.height, width: m.width, values: &m.values }
    }
}

fn encode_gray8(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Data(format!("png encode: {e}")))?;
        w.write_image_data(pixels).map_err(|e| Error::Data(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// 8-bit grayscale rendering of one map.
pub fn export_png(panel: &Panel, path: &Path, palette: Palette) -> Result<()> {
    let px = palette.apply(panel.values)?;
    write_atomic(path, &encode_gray8(panel.width, panel.height, &px)?)
}

/// Panels side by side, each scaled (nearest neighbour) to the tallest
/// panel's height, separated by a 4-pixel grey gutter.
pub fn export_side_by_side(panels: &[Panel], path: &Path, palette: Palette) -> Result<()> {
    const GUTTER: usize = 4;
    let h = panels.iter().map(|p| p.height).max().ok_or_else(|| Error::Data("no panels".into()))?;
    let scaled: Vec<(usize, Vec<u8>, usize)> = panels
        .iter()
        .map(|p| {
            let w = p.width * h / p.height;
            palette.apply(p.values).map(|px| (w, px, p.height))
        })
        .collect::<Result<_>>()?;
    let total_w = scaled.iter().map(|s| s.0).sum::<usize>() + GUTTER * (panels.len() - 1);
    let mut img = vec![128u8; total_w * h];
    let mut x0 = 0;
    for (p, (w, px, ph)) in panels.iter().zip(&scaled) {
        for y in 0..h {
            for x in 0..*w {
                img[y * total_w + x0 + x] = px[(y * ph / h) * p.width + x * p.width / w];
            }
        }
        x0 += w + GUTTER;
    }
    write_atomic(path, &encode_gray8(total_w, h, &img)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let m = Manifest { count: 3, seed: 9, generator_hash: 0xabc, splits: vec![Split::Train, Split::Val, Split::Train] };
        assert_eq!(Manifest::decode(Path::new("m"), &m.encode()).unwrap(), m);
    }

    #[test]
    fn manifest_errors_point_at_the_line() {
        let text = "format=spmkd-dataset/1\ncount=x\n";
        match Manifest::decode(Path::new("m"), text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 23),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn palettes() {
        assert_eq!(Palette::Binary.apply(&[0.0, 0.1, 0.0, 5.0]).unwrap(), vec![0, 255, 0, 255]);
        assert_eq!(Palette::Intensity.apply(&[0.0, 1.0, 2.0]).unwrap(), vec![0, 128, 255]);
        assert_eq!(Palette::Intensity.apply(&[0.0; 4]).unwrap(), vec![0; 4]);
        assert_eq!(Palette::Intensity.apply(&[3.0; 4]).unwrap(), vec![255; 4]);
        assert!(Palette::Binary.apply(&[f32::NAN]).is_err());
    }
}
