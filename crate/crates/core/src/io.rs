//! Readers and writers for PFM, KITTI 16-bit disparity PNG, 8-bit PNG/PPM/PGM
//! images and the `DAFW` weights container.
//!
//! Every format has a byte-level `encode_*`/`decode_*` pair; the path-based
//! functions are thin wrappers around them.

use std::fs;
use std::path::Path;

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// PFM

/// Byte cursor over an ASCII-headed binary file.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Header { bytes, pos: 0 }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Skips whitespace and `#` comment lines (PNM allows them).
    fn skip_space_and_comments(&mut self) {
        loop {
            self.skip_space();
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(start, format!("non-ASCII {what}")))
    }

    fn number<N: std::str::FromStr>(&mut self, what: &str) -> Result<N> {
        let start = self.pos;
        let tok = self.token(what)?;
        tok.parse()
            .map_err(|_| Error::format(start, format!("invalid {what} {tok:?}")))
    }

    /// Consumes the single whitespace byte that separates header from payload.
    fn end_of_header(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::format(self.pos, "header not terminated by whitespace")),
        }
    }
}

/// Decodes a PFM file into a `1×H×W` (`Pf`) or `3×H×W` (`PF`) tensor.
///
/// Only the sign of the scale is used: negative means little-endian.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut hd = Header::new(bytes);
    let channels = match hd.token("PFM magic")? {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format(0, format!("bad PFM magic {other:?}"))),
    };
    hd.skip_space();
    let width: usize = hd.number("width")?;
    hd.skip_space();
    let height: usize = hd.number("height")?;
    hd.skip_space();
    let scale_pos = hd.pos;
    let scale: f64 = hd.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(scale_pos, "PFM scale must be finite and nonzero"));
    }
    let little = scale < 0.0;
    let start = hd.end_of_header()?;
    let count = width * height * channels;
    let need = count * 4;
    let avail = bytes.len() - start;
    if avail < need {
        return Err(Error::format(
            bytes.len(),
            format!("truncated PFM payload: need {need} bytes after offset {start}, have {avail}"),
        ));
    }
    let payload = &bytes[start..start + need];
    let plane = width * height;
    let mut data = vec![0.0f32; count];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let pix = i / channels;
        let c = i % channels;
        let file_row = pix / width;
        let x = pix % width;
        let y = height - 1 - file_row;
        data[c * plane + y * width + x] = v;
    }
    Tensor::new(vec![channels, height, width], data)
}

/// Encodes a `1×H×W` or `3×H×W` tensor as little-endian PFM (scale `-1.0`).
pub fn encode_pfm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3()?;
    let magic = match c {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::config(format!("PFM holds 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(c * h * w * 4);
    let plane = w * h;
    let data = t.data();
    for file_row in 0..h {
        let y = h - 1 - file_row;
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&data[ch * plane + y * w + x].to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_pfm(&read_bytes(path.as_ref())?)
}

pub fn write_pfm(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm(t)?)
}

// ---------------------------------------------------------------------------
// PNG helpers

struct DecodedPng {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode_png(bytes: &[u8], expand: bool) -> Result<DecodedPng> {
    let mut dec = png::Decoder::new(bytes);
    if expand {
        dec.set_transformations(png::Transformations::EXPAND);
    }
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::format(0, format!("PNG: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(0, format!("PNG: {e}")))?;
    buf.truncate(info.buffer_size());
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data: buf,
    })
}

fn encode_png(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format(0, format!("PNG: {e}")))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::format(0, format!("PNG: {e}")))?;
    }
    Ok(out)
}

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

// ---------------------------------------------------------------------------
// KITTI disparity PNG

/// Decodes a KITTI disparity PNG: 16-bit grayscale, `disp = code / 256`,
/// code 0 marks an invalid pixel.
pub fn decode_kitti_disp_png(bytes: &[u8]) -> Result<DisparityMap<f32>> {
    let png = decode_png(bytes, false)?;
    if png.color != png::ColorType::Grayscale || png.depth != png::BitDepth::Sixteen {
        return Err(Error::format(
            0,
            format!(
                "KITTI disparity must be 16-bit grayscale, got {:?} at {:?}",
                png.color, png.depth
            ),
        ));
    }
    let (w, h) = (png.width, png.height);
    let mut values = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for px in png.data.chunks_exact(2) {
        let code = u16::from_be_bytes([px[0], px[1]]);
        valid.push(code != 0);
        values.push(code as f32 / 256.0);
    }
    DisparityMap::new(w, h, values, valid)
}

/// KITTI code of one disparity value: `round(d·256)` clamped to `1..=65535`;
/// invalid pixels become 0.
pub fn kitti_code(disp: f32, valid: bool) -> u16 {
    if !valid || !disp.is_finite() {
        return 0;
    }
    (disp as f64 * 256.0).round().clamp(0.0, 65535.0) as u16
}

pub fn encode_kitti_disp_png(map: &DisparityMap<f32>) -> Result<Vec<u8>> {
    let mut raw = Vec::with_capacity(map.values().len() * 2);
    for (&d, &ok) in map.values().iter().zip(map.valid()) {
        raw.extend_from_slice(&kitti_code(d, ok).to_be_bytes());
    }
    encode_png(
        map.width(),
        map.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &raw,
    )
}

pub fn read_kitti_disp_png(path: impl AsRef<Path>) -> Result<DisparityMap<f32>> {
    decode_kitti_disp_png(&read_bytes(path.as_ref())?)
}

pub fn write_kitti_disp_png(map: &DisparityMap<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_kitti_disp_png(map)?)
}

// ---------------------------------------------------------------------------
// 8-bit images

/// Planar 8-bit image as decoded from disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub samples: Vec<u8>,
}

impl Image8 {
    /// `3×H×W` tensor in `[0, 1]`; grayscale is replicated.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut data = vec![0.0f32; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                let s = if self.channels == 1 {
                    self.samples[p]
                } else {
                    self.samples[p * self.channels + c]
                };
                data[c * plane + p] = s as f32 / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("consistent dims")
    }
}

fn decode_pnm(bytes: &[u8]) -> Result<Image8> {
    let mut hd = Header::new(bytes);
    let channels = match hd.token("PNM magic")? {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format(0, format!("unsupported PNM type {other:?}"))),
    };
    hd.skip_space_and_comments();
    let width: usize = hd.number("width")?;
    hd.skip_space_and_comments();
    let height: usize = hd.number("height")?;
    hd.skip_space_and_comments();
    let max_pos = hd.pos;
    let maxval: u32 = hd.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            max_pos,
            format!("only 8-bit PNM (maxval 255) is supported, got maxval {maxval}"),
        ));
    }
    let start = hd.end_of_header()?;
    let need = width * height * channels;
    if bytes.len() - start < need {
        return Err(Error::format(bytes.len(), "truncated PNM payload"));
    }
    Ok(Image8 {
        width,
        height,
        channels,
        samples: bytes[start..start + need].to_vec(),
    })
}

fn decode_png8(bytes: &[u8]) -> Result<Image8> {
    let png = decode_png(bytes, true)?;
    if png.depth != png::BitDepth::Eight {
        return Err(Error::format(
            0,
            format!("only 8-bit PNG images are supported, got {:?}", png.depth),
        ));
    }
    let (src_c, keep) = match png.color {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(Error::format(0, "palette PNG was not expanded"));
        }
    };
    let samples = if src_c == keep {
        png.data
    } else {
        png.data
            .chunks_exact(src_c)
            .flat_map(|px| px[..keep].to_vec())
            .collect()
    };
    Ok(Image8 {
        width: png.width,
        height: png.height,
        channels: keep,
        samples,
    })
}

/// Decodes an 8-bit PNG, binary PGM (`P5`) or binary PPM (`P6`).
pub fn decode_image8(bytes: &[u8]) -> Result<Image8> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png8(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(Error::format(0, "unrecognised image format (expected PNG, PGM or PPM)"))
    }
}

/// Reads an image as a `3×H×W` tensor in `[0, 1]`. No standardization is applied.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    Ok(decode_image8(&read_bytes(path.as_ref())?)?.to_tensor())
}

/// Quantizes `[0,1]` values to 8-bit codes.
pub fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (`P6`) from a `3×H×W` tensor in `[0, 1]`.
pub fn encode_ppm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::config(format!("PPM expects 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize8(t.data()[ch * plane + p]));
        }
    }
    Ok(out)
}

pub fn write_ppm(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_ppm(t)?)
}

/// Binary PGM (`P5`) from raw 8-bit samples.
pub fn encode_pgm(width: usize, height: usize, samples: &[u8]) -> Result<Vec<u8>> {
    if samples.len() != width * height {
        return Err(Error::config("PGM sample count does not match dimensions"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    Ok(out)
}

/// 8-bit PNG or PGM evaluation mask: nonzero samples are included.
pub fn read_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let img = decode_image8(&read_bytes(path.as_ref())?)?;
    let mask = img
        .samples
        .chunks_exact(img.channels)
        .map(|px| px[0] != 0)
        .collect();
    Ok((img.width, img.height, mask))
}

// ---------------------------------------------------------------------------
// Weights

const WEIGHTS_MAGIC: &[u8; 4] = b"DAFW";
const WEIGHTS_VERSION: u32 = 1;

/// Ordered set of named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightsFile {
    entries: Vec<(String, Tensor<f32>)>,
}

impl WeightsFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::config(format!("duplicate tensor name {name:?}")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::config("tensor name longer than 65535 bytes"));
        }
        if t.rank() > u8::MAX as usize {
            return Err(Error::config("tensor rank above 255"));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != WEIGHTS_MAGIC {
            return Err(Error::format(0, "bad weights magic (expected DAFW)"));
        }
        let version = cur.u32("version")?;
        if version != WEIGHTS_VERSION {
            return Err(Error::format(4, format!("unsupported weights version {version}")));
        }
        let count = cur.u32("tensor count")?;
        let mut wf = WeightsFile::new();
        for _ in 0..count {
            let name_at = cur.pos;
            let len = cur.u16("name length")? as usize;
            let name = std::str::from_utf8(cur.take(len, "name")?)
                .map_err(|_| Error::format(name_at + 2, "tensor name is not UTF-8"))?
                .to_string();
            let rank = cur.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32("extent")? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = cur.take(n * 4, "tensor payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if wf.get(&name).is_some() {
                return Err(Error::format(name_at, format!("duplicate tensor name {name:?}")));
            }
            wf.entries.push((name, Tensor::new(shape, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(cur.pos, "trailing bytes after last tensor"));
        }
        Ok(wf)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<WeightsFile> {
    WeightsFile::decode(&read_bytes(path.as_ref())?)
}

pub fn write_weights(wf: &WeightsFile, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &wf.encode())
}

/// Reads a disparity map by extension: `.png` as KITTI, anything else as PFM.
/// PFM values that are non-finite or `>= max_disp` are marked invalid.
pub fn read_disparity(path: impl AsRef<Path>, max_disp: f32) -> Result<DisparityMap<f32>> {
    let path = path.as_ref();
    if has_png_extension(path) {
        let mut m = read_kitti_disp_png(path)?;
        let vals: Vec<f32> = m.values().to_vec();
        for (ok, d) in m.valid_mut().iter_mut().zip(vals) {
            *ok = *ok && d < max_disp;
        }
        Ok(m)
    } else {
        let t = read_pfm(path)?;
        let (c, h, w) = t.dims3()?;
        if c != 1 {
            return Err(Error::format(0, "disparity PFM must be single-channel (Pf)"));
        }
        DisparityMap::from_ground_truth(w, h, t.into_data(), max_disp)
    }
}

/// Writes a disparity map by extension: `.png` as KITTI, anything else as PFM.
pub fn write_disparity(map: &DisparityMap<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if has_png_extension(path) {
        write_kitti_disp_png(map, path)
    } else {
        write_pfm(&map.to_tensor(), path)
    }
}

pub fn has_png_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}
