//! Bit-exact binary formats: OCT1 tiles and CKP1 checkpoints.
//!
//! Both formats are little-endian. Writes go through a temp file plus rename
//! so no partial artifact survives an interrupted run.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::tile::{BandSet, Tile, TileMeta};

pub const OCT1_MAGIC: &[u8; 4] = b"OCT1";
pub const CKP1_MAGIC: &[u8; 4] = b"CKP1";

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub(crate) fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn i16(&mut self, v: i16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.offset(),
                format!("truncated: need {n} bytes, {} remain", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub(crate) fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.offset(), "trailing bytes after payload"));
        }
        Ok(())
    }
}

pub fn encode_tile(tile: &Tile) -> Result<Vec<u8>> {
    tile.validate()?;
    let mut w = Writer::new();
    w.bytes(OCT1_MAGIC);
    w.u16(1); // version
    w.u16(tile.bands.count() as u16);
    w.u16(tile.height as u16);
    w.u16(tile.width as u16);
    w.i16(tile.meta.year);
    w.u8(tile.meta.month);
    let mut region = tile.meta.region.as_bytes().to_vec();
    if region.len() > 7 || !region.iter().all(u8::is_ascii) {
        return Err(Error::Validation(format!("region code {:?} not 7-byte ASCII", tile.meta.region)));
    }
    region.resize(7, b' ');
    w.bytes(&region);
    w.f64(tile.meta.lat);
    w.f64(tile.meta.lon);
    for name in tile.bands.names() {
        let b = name.as_bytes();
        if b.len() > 255 {
            return Err(Error::Validation(format!("band name {name} too long")));
        }
        w.u8(b.len() as u8);
        w.bytes(b);
    }
    for &v in &tile.planes {
        w.f32(v);
    }
    let hw = tile.height * tile.width;
    for band in 0..tile.bands.count() {
        let bits = &tile.validity[band * hw..(band + 1) * hw];
        for chunk in bits.chunks(8) {
            let mut byte = 0u8;
            for (i, &b) in chunk.iter().enumerate() {
                if b {
                    byte |= 1 << i;
                }
            }
            w.u8(byte);
        }
    }
    Ok(w.buf)
}

/// Write a tile in the OCT1 format; returns the byte count written.
pub fn write_tile(tile: &Tile, path: &Path) -> Result<usize> {
    let bytes = encode_tile(tile)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len())
}

pub fn decode_tile(buf: &[u8]) -> Result<Tile> {
    let mut r = Reader::new(buf);
    let magic = r.take(4)?;
    if magic != OCT1_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected OCT1")));
    }
    let version = r.u16()?;
    if version != 1 {
        return Err(Error::format(4, format!("unsupported OCT1 version {version}")));
    }
    let c = r.u16()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let year = r.i16()?;
    let month = r.u8()?;
    let region_off = r.offset();
    let region_raw = r.take(7)?;
    let region = std::str::from_utf8(region_raw)
        .map_err(|_| Error::format(region_off, "region code not ASCII"))?
        .trim_end()
        .to_string();
    let lat = r.f64()?;
    let lon = r.f64()?;
    let mut names = Vec::with_capacity(c);
    for _ in 0..c {
        let len = r.u8()? as usize;
        let off = r.offset();
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(off, "band name not ASCII"))?
            .to_string();
        names.push(name);
    }
    let hw = h * w;
    let mut planes = Vec::with_capacity(c * hw);
    for _ in 0..c * hw {
        planes.push(r.f32()?);
    }
    let plane_bytes = hw.div_ceil(8);
    let mut validity = Vec::with_capacity(c * hw);
    for band in 0..c {
        let off = r.offset();
        let packed = r.take(plane_bytes)?;
        for i in 0..hw {
            validity.push(packed[i / 8] >> (i % 8) & 1 == 1);
        }
        // verify validity/NaN agreement with a byte offset pointing at the plane
        for i in 0..hw {
            let v = planes[band * hw + i];
            let ok = validity[band * hw + i];
            if ok && !v.is_finite() {
                return Err(Error::format(off, format!("valid pixel {i} of band {band} stores {v}")));
            }
            if !ok && !v.is_nan() {
                return Err(Error::format(off, format!("invalid pixel {i} of band {band} stores {v}")));
            }
        }
    }
    r.done()?;
    let bands = BandSet::new(names)?;
    Tile::new(bands, h, w, planes, validity, TileMeta { region, year, month, lat, lon })
}

pub fn read_tile(path: &Path) -> Result<Tile> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_tile(&buf)
}

/// Expected OCT1 file size for given geometry (used by tests and manifests).
pub fn oct1_file_size(band_names: &[String], h: usize, w: usize) -> usize {
    let header = 4 + 2 + 2 + 2 + 2 + 2 + 1 + 7 + 8 + 8;
    let names: usize = band_names.iter().map(|n| 1 + n.len()).sum();
    let c = band_names.len();
    header + names + c * h * w * 4 + c * (h * w).div_ceil(8)
}

/// Named, shaped parameters plus normalization statistics.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub version: u16,
    pub profile: String,
    pub band_mean: Vec<f64>,
    pub band_std: Vec<f64>,
    pub params: ParamSet,
}

impl ModelCheckpoint {
    pub fn validate(&self) -> Result<()> {
        if self.band_mean.len() != self.band_std.len() {
            return Err(Error::Validation("mean/std count mismatch".into()));
        }
        for (i, &s) in self.band_std.iter().enumerate() {
            if !(s > 0.0) {
                return Err(Error::Validation(format!("band {i} std {s} not positive")));
            }
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let mut w = Writer::new();
    w.bytes(CKP1_MAGIC);
    w.u16(ckpt.version);
    let name = ckpt.profile.as_bytes();
    w.u8(name.len() as u8);
    w.bytes(name);
    w.u16(ckpt.band_mean.len() as u16);
    for (&m, &s) in ckpt.band_mean.iter().zip(&ckpt.band_std) {
        w.f32(m as f32);
        w.f32(s as f32);
    }
    w.u32(ckpt.params.len() as u32);
    for e in ckpt.params.entries() {
        let nb = e.name.as_bytes();
        w.u16(nb.len() as u16);
        w.bytes(nb);
        w.u8(e.tensor.shape().len() as u8);
        for &d in e.tensor.shape() {
            w.u32(d as u32);
        }
        for &v in e.tensor.data() {
            w.f32(v as f32);
        }
    }
    Ok(w.buf)
}

pub fn write_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<usize> {
    let bytes = encode_checkpoint(ckpt)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len())
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ModelCheckpoint> {
    let mut r = Reader::new(buf);
    let magic = r.take(4)?;
    if magic != CKP1_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected CKP1")));
    }
    let version = r.u16()?;
    let nlen = r.u8()? as usize;
    let off = r.offset();
    let profile = std::str::from_utf8(r.take(nlen)?)
        .map_err(|_| Error::format(off, "profile name not ASCII"))?
        .to_string();
    let bands = r.u16()? as usize;
    let mut band_mean = Vec::with_capacity(bands);
    let mut band_std = Vec::with_capacity(bands);
    for _ in 0..bands {
        band_mean.push(r.f32()? as f64);
        band_std.push(r.f32()? as f64);
    }
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let off = r.offset();
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::format(off, "parameter name not ASCII"))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f32()? as f64);
        }
        params.insert(&name, Tensor::new(shape, data)?);
    }
    r.done()?;
    let ckpt = ModelCheckpoint { version, profile, band_mean, band_std, params };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_checkpoint(&buf)
}
