//! KVTR: a flat little-endian recording of per-frame, per-layer K/V blocks.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "KVTR"
//!      4     4  version (1)
//!      8     4  num_layers
//!     12     4  num_heads
//!     16     4  head_dim
//!     20     4  tokens_per_frame
//!     24     4  grid_rows
//!     28     4  grid_cols
//!     32     8  num_frames
//!     40     4  reserved (0)
//!     44        frames: for each layer, K then V as [head][token][dim] f32
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Frame, FrameGeometry, KvBlock, ModelDims, TensorF32};

pub const MAGIC: [u8; 4] = *b"KVTR";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 44;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub version: u32,
    pub num_layers: u32,
    pub num_heads: u32,
    pub head_dim: u32,
    pub tokens_per_frame: u32,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub num_frames: u64,
}

impl TraceHeader {
    pub fn new(dims: &ModelDims, geometry: &FrameGeometry, num_frames: u64) -> Self {
        Self {
            version: VERSION,
            num_layers: dims.num_layers() as u32,
            num_heads: dims.num_heads() as u32,
            head_dim: dims.head_dim() as u32,
            tokens_per_frame: geometry.tokens_per_frame() as u32,
            grid_rows: geometry.grid_rows() as u32,
            grid_cols: geometry.grid_cols() as u32,
            num_frames,
        }
    }

    pub fn dims(&self) -> Result<ModelDims> {
        ModelDims::new(
            self.num_layers as usize,
            self.num_heads as usize,
            self.head_dim as usize,
        )
        .map_err(|e| Error::Format(format!("trace header dims: {e}")))
    }

    pub fn geometry(&self) -> Result<FrameGeometry> {
        if u64::from(self.grid_rows) * u64::from(self.grid_cols) != u64::from(self.tokens_per_frame) {
            return Err(Error::Format(format!(
                "trace header grid {}x{} does not match {} tokens per frame",
                self.grid_rows, self.grid_cols, self.tokens_per_frame
            )));
        }
        FrameGeometry::new(self.grid_rows as usize, self.grid_cols as usize)
            .map_err(|e| Error::Format(format!("trace header geometry: {e}")))
    }

    /// f32 values in one K (or V) block.
    fn block_len(&self) -> u64 {
        u64::from(self.num_heads) * u64::from(self.tokens_per_frame) * u64::from(self.head_dim)
    }

    pub fn frame_bytes(&self) -> Option<u64> {
        self.block_len()
            .checked_mul(2 * u64::from(self.num_layers))?
            .checked_mul(4)
    }

    /// Exact file size implied by the header.
    pub fn total_bytes(&self) -> Option<u64> {
        self.frame_bytes()?
            .checked_mul(self.num_frames)?
            .checked_add(HEADER_LEN)
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN as usize] {
        let mut out = [0u8; HEADER_LEN as usize];
        out[0..4].copy_from_slice(&MAGIC);
        let words = [
            self.version,
            self.num_layers,
            self.num_heads,
            self.head_dim,
            self.tokens_per_frame,
            self.grid_rows,
            self.grid_cols,
        ];
        for (i, w) in words.iter().enumerate() {
            out[4 + 4 * i..8 + 4 * i].copy_from_slice(&w.to_le_bytes());
        }
        out[32..40].copy_from_slice(&self.num_frames.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; HEADER_LEN as usize]) -> Result<Self> {
        if bytes[0..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"KVTR\"",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let reserved = u32::from_le_bytes(bytes[40..44].try_into().unwrap());
        if reserved != 0 {
            return Err(Error::Format(format!("reserved header word is {reserved}, expected 0")));
        }
        let header = Self {
            version,
            num_layers: word(1),
            num_heads: word(2),
            head_dim: word(3),
            tokens_per_frame: word(4),
            grid_rows: word(5),
            grid_cols: word(6),
            num_frames: u64::from_le_bytes(bytes[32..40].try_into().unwrap()),
        };
        header.dims()?;
        header.geometry()?;
        Ok(header)
    }
}

/// Streaming writer; `num_frames` is patched into the header on `finish`.
#[derive(Debug)]
pub struct TraceWriter<W: Write + Seek> {
    inner: W,
    header: TraceHeader,
    dims: ModelDims,
    geometry: FrameGeometry,
    frames: u64,
}

impl TraceWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, dims: ModelDims, geometry: FrameGeometry) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), dims, geometry)
    }
}

impl<W: Write + Seek> TraceWriter<W> {
    pub fn new(mut inner: W, dims: ModelDims, geometry: FrameGeometry) -> Result<Self> {
        let header = TraceHeader::new(&dims, &geometry, 0);
        inner.write_all(&header.to_bytes())?;
        Ok(Self {
            inner,
            header,
            dims,
            geometry,
            frames: 0,
        })
    }

    pub fn write_frame(&mut self, frame: &Frame) -> Result<()> {
        frame.validate(&self.dims, &self.geometry)?;
        let mut buf = Vec::with_capacity(self.header.frame_bytes().unwrap_or(0) as usize);
        for block in &frame.layers {
            for x in block.keys.data().iter().chain(block.values.data()) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        self.inner.write_all(&buf)?;
        self.frames += 1;
        Ok(())
    }

    /// Patch the frame count and flush. Returns the total byte count.
    pub fn finish(mut self) -> Result<u64> {
        self.header.num_frames = self.frames;
        self.inner.seek(SeekFrom::Start(32))?;
        self.inner.write_all(&self.frames.to_le_bytes())?;
        self.inner.seek(SeekFrom::End(0))?;
        self.inner.flush()?;
        Ok(self.header.total_bytes().expect("sizes fit in memory already written"))
    }
}

/// Write a whole trace; the frame count must match `header.num_frames`.
pub fn write_trace<'a>(
    path: impl AsRef<Path>,
    header: &TraceHeader,
    frames: impl IntoIterator<Item = &'a Frame>,
) -> Result<u64> {
    if header.version != VERSION {
        return Err(Error::Version(header.version));
    }
    let dims = header.dims()?;
    let geometry = header.geometry()?;
    let mut w = TraceWriter::create(path, dims, geometry)?;
    for frame in frames {
        w.write_frame(frame)?;
    }
    if w.frames != header.num_frames {
        return Err(Error::Dimension(format!(
            "header declares {} frames but {} were supplied",
            header.num_frames, w.frames
        )));
    }
    w.finish()
}

/// Frame iterator over an open trace; holds at most one frame in memory.
#[derive(Debug)]
pub struct TraceReader<R: Read = BufReader<File>> {
    header: TraceHeader,
    dims: ModelDims,
    inner: R,
    remaining: u64,
    failed: bool,
}

/// Open and validate a trace: magic, version, geometry and exact file size.
pub fn read_trace(path: impl AsRef<Path>) -> Result<TraceReader> {
    let file = File::open(path)?;
    let actual = file.metadata()?.len();
    let mut inner = BufReader::new(file);
    let mut bytes = [0u8; HEADER_LEN as usize];
    let got = read_up_to(&mut inner, &mut bytes)?;
    if got < 4 || bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"KVTR\"",
            String::from_utf8_lossy(&bytes[..got.min(4)])
        )));
    }
    if (got as u64) < HEADER_LEN {
        return Err(Error::Corruption {
            expected: HEADER_LEN,
            actual,
        });
    }
    let header = TraceHeader::from_bytes(&bytes)?;
    let expected = header
        .total_bytes()
        .ok_or_else(|| Error::Format("trace size overflows 64 bits".into()))?;
    if expected != actual {
        return Err(Error::Corruption { expected, actual });
    }
    Ok(TraceReader {
        dims: header.dims()?,
        header,
        inner,
        remaining: header.num_frames,
        failed: false,
    })
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

impl<R: Read> TraceReader<R> {
    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    fn read_block(&mut self, buf: &mut [u8]) -> Result<TensorF32> {
        self.inner.read_exact(buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let shape = vec![
            self.dims.num_heads(),
            self.header.tokens_per_frame as usize,
            self.dims.head_dim(),
        ];
        TensorF32::new(shape, data).map_err(|e| Error::Format(format!("trace payload: {e}")))
    }

    fn read_frame(&mut self) -> Result<Frame> {
        let mut buf = vec![0u8; self.header.block_len() as usize * 4];
        let mut layers = Vec::with_capacity(self.dims.num_layers());
        for _ in 0..self.dims.num_layers() {
            let keys = self.read_block(&mut buf)?;
            let values = self.read_block(&mut buf)?;
            layers.push(KvBlock::new(keys, values)?);
        }
        Ok(Frame { layers })
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Result<Frame>> {
        if self.remaining == 0 || self.failed {
            return None;
        }
        let frame = self.read_frame();
        self.remaining -= 1;
        self.failed = frame.is_err();
        Some(frame)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = usize::try_from(self.remaining).unwrap_or(usize::MAX);
        (0, Some(n))
    }
}
