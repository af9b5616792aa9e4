//! Shard container: `"OVSH" | version u16 | count u64 | (len u32 | record)* | crc32 u32`.
//! All integers little-endian; the CRC covers every preceding byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::probe::{Color, PlacedShape, ShapeKind};
use super::{CaptionedImage, ProbeMeta};
use crate::error::{Error, Result, ShardError};

pub const MAGIC: &[u8; 4] = b"OVSH";
pub const VERSION: u16 = 1;
/// Upper bound on one encoded record, guarding allocation on corrupt lengths.
pub const MAX_RECORD_BYTES: u32 = 64 << 20;

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

/// Encodes one record body (without the length prefix).
pub fn encode_record(rec: &CaptionedImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(rec.png.len() + 64);
    out.extend_from_slice(&rec.id.to_le_bytes());
    put_bytes(&mut out, &rec.png);
    put_bytes(&mut out, rec.caption_original.as_bytes());
    put_bytes(&mut out, rec.caption_synthetic.as_bytes());
    match &rec.meta {
        None => out.push(0),
        Some(meta) => {
            out.push(1);
            out.push(meta.label.unwrap_or(u8::MAX));
            out.push(meta.layout.len() as u8);
            for s in &meta.layout {
                out.extend_from_slice(&[s.row, s.col, s.color as u8, s.shape as u8]);
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("field overruns record")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn bytes(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn text(&mut self, what: &str) -> std::result::Result<String, String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| format!("{what} is not UTF-8"))
    }
}

/// Decodes one record body; `index` is only used in error messages.
pub fn decode_record(body: &[u8], index: u64) -> std::result::Result<CaptionedImage, ShardError> {
    let malformed = |reason: String| ShardError::MalformedRecord { index, reason };
    let mut c = Cursor { buf: body, pos: 0 };
    let id = u64::from_le_bytes(c.take(8).map_err(malformed)?.try_into().expect("8 bytes"));
    let png = c.bytes().map_err(malformed)?.to_vec();
    let caption_original = c.text("original caption").map_err(malformed)?;
    let caption_synthetic = c.text("synthetic caption").map_err(malformed)?;
    let meta = match c.u8().map_err(malformed)? {
        0 => None,
        1 => {
            let label = match c.u8().map_err(malformed)? {
                u8::MAX => None,
                l => Some(l),
            };
            let n = c.u8().map_err(malformed)?;
            let mut layout = Vec::with_capacity(usize::from(n));
            for _ in 0..n {
                let f = c.take(4).map_err(malformed)?;
                let color = Color::from_index(f[2]).ok_or_else(|| malformed(format!("color index {}", f[2])))?;
                let shape = ShapeKind::from_index(f[3]).ok_or_else(|| malformed(format!("shape index {}", f[3])))?;
                layout.push(PlacedShape { row: f[0], col: f[1], color, shape });
            }
            Some(ProbeMeta { label, layout })
        }
        flag => return Err(malformed(format!("meta flag {flag}"))),
    };
    if c.pos != body.len() {
        return Err(malformed(format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok(CaptionedImage { id, png, caption_original, caption_synthetic, meta })
}

/// Serialises records into a complete shard image.
pub fn encode_shard(records: &[CaptionedImage]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_shard_to(&mut out, records)?;
    Ok(out)
}

pub fn write_shard_to<W: Write>(w: W, records: &[CaptionedImage]) -> Result<()> {
    if records.is_empty() {
        return Err(ShardError::Empty.into());
    }
    let mut w = CrcWriter { inner: w, crc: crc32fast::Hasher::new() };
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (i, rec) in records.iter().enumerate() {
        let body = encode_record(rec);
        if body.len() > MAX_RECORD_BYTES as usize {
            return Err(Error::Data(format!("record {i} is {} bytes, above the {MAX_RECORD_BYTES} limit", body.len())));
        }
        w.write_all(&(body.len() as u32).to_le_bytes())?;
        w.write_all(&body)?;
    }
    let crc = w.crc.clone().finalize();
    w.inner.write_all(&crc.to_le_bytes())?;
    w.inner.flush()?;
    Ok(())
}

/// Writes a shard file and returns its size in bytes.
pub fn write_shard(path: impl AsRef<Path>, records: &[CaptionedImage]) -> Result<u64> {
    let path = path.as_ref();
    let file = File::create(path)?;
    write_shard_to(BufWriter::new(file), records)?;
    Ok(std::fs::metadata(path)?.len())
}

struct CrcWriter<W> {
    inner: W,
    crc: crc32fast::Hasher,
}

impl<W: Write> Write for CrcWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.crc.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Streaming reader holding at most one record in memory.
///
/// Yields records in file order. The checksum and declared count are checked
/// after the last record, so a corrupt shard surfaces as a final `Err` item.
pub struct ShardReader<R> {
    inner: R,
    crc: crc32fast::Hasher,
    declared: u64,
    parsed: u64,
    done: bool,
}

impl<R: Read> ShardReader<R> {
    pub fn new(mut inner: R) -> std::result::Result<Self, ShardError> {
        let mut crc = crc32fast::Hasher::new();
        let mut head = [0u8; 14];
        let got = read_full(&mut inner, &mut head).map_err(|_| ShardError::Truncated("header"))?;
        if got < 4 || &head[..4] != MAGIC {
            return Err(ShardError::BadMagic);
        }
        if got < head.len() {
            return Err(ShardError::Truncated("header"));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VERSION {
            return Err(ShardError::UnsupportedVersion(version));
        }
        crc.update(&head);
        let declared = u64::from_le_bytes(head[6..14].try_into().expect("8 bytes"));
        Ok(ShardReader { inner, crc, declared, parsed: 0, done: false })
    }

    pub fn declared_count(&self) -> u64 {
        self.declared
    }

    fn exact(&mut self, n: usize, what: &'static str) -> std::result::Result<Vec<u8>, ShardError> {
        let mut buf = Vec::new();
        (&mut self.inner).take(n as u64).read_to_end(&mut buf).map_err(|_| ShardError::Truncated(what))?;
        if buf.len() < n {
            return Err(ShardError::Truncated(what));
        }
        Ok(buf)
    }

    fn next_record(&mut self) -> std::result::Result<CaptionedImage, ShardError> {
        let len_bytes = self.exact(4, "record length")?;
        self.crc.update(&len_bytes);
        let len = u32::from_le_bytes(len_bytes[..].try_into().expect("4 bytes"));
        if len > MAX_RECORD_BYTES {
            return Err(ShardError::MalformedRecord { index: self.parsed, reason: format!("length {len} over limit") });
        }
        let body = self.exact(len as usize, "record body")?;
        self.crc.update(&body);
        let rec = decode_record(&body, self.parsed)?;
        self.parsed += 1;
        Ok(rec)
    }

    fn finish(&mut self) -> std::result::Result<(), ShardError> {
        let stored = u32::from_le_bytes(self.exact(4, "checksum")?[..].try_into().expect("4 bytes"));
        let computed = self.crc.clone().finalize();
        if stored != computed {
            return Err(ShardError::ChecksumMismatch { stored, computed });
        }
        let mut extra = [0u8; 1];
        if read_full(&mut self.inner, &mut extra).map_err(|_| ShardError::Truncated("trailer"))? != 0 {
            return Err(ShardError::CountMismatch { declared: self.declared, parsed: self.parsed + 1 });
        }
        Ok(())
    }
}

impl<R: Read> Iterator for ShardReader<R> {
    type Item = std::result::Result<CaptionedImage, ShardError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = if self.parsed < self.declared {
            match self.next_record() {
                Ok(rec) => return Some(Ok(rec)),
                Err(e) => Err(e),
            }
        } else {
            match self.finish() {
                Ok(()) => {
                    self.done = true;
                    return None;
                }
                Err(e) => Err(e),
            }
        };
        self.done = true;
        Some(item)
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..])? {
            0 => break,
            n => got += n,
        }
    }
    Ok(got)
}

pub fn decode_shard(bytes: &[u8]) -> std::result::Result<Vec<CaptionedImage>, ShardError> {
    ShardReader::new(bytes)?.collect()
}

/// Reads and fully validates a shard file.
pub fn read_shard(path: impl AsRef<Path>) -> Result<Vec<CaptionedImage>> {
    let path = path.as_ref();
    let shard_err = |source| Error::Shard { path: path.to_path_buf(), source };
    let file = BufReader::new(File::open(path)?);
    ShardReader::new(file).map_err(shard_err)?.collect::<std::result::Result<_, _>>().map_err(shard_err)
}

/// Opens a shard for streaming.
pub fn open_shard(path: impl AsRef<Path>) -> Result<ShardReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = BufReader::new(File::open(path)?);
    ShardReader::new(file).map_err(|source| Error::Shard { path: path.to_path_buf(), source })
}
