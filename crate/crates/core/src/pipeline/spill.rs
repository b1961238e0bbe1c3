//! Sorted shuffle runs, held in memory or spilled to temporary files.
//!
//! Spill file layout (engine-internal, version 1): magic `BDS\x01`, then
//! records of (u64 key, u32 len, len bytes), little-endian, sorted by
//! (key, payload).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use tempfile::NamedTempFile;

use super::records::Records;
use crate::error::{Error, Result};

const SPILL_MAGIC: &[u8; 4] = b"BDS\x01";

pub(crate) enum Run {
    Memory(Records),
    File { file: NamedTempFile, records: u64 },
}

impl Run {
    /// Writes an already sorted buffer to a fresh temporary file.
    pub fn spill(sorted: &Records, dir: Option<&Path>) -> Result<Run> {
        let mut builder = tempfile::Builder::new();
        builder.prefix("bdg-spill-");
        let file = match dir {
            Some(d) => builder.tempfile_in(d)?,
            None => builder.tempfile()?,
        };
        {
            let mut w = BufWriter::new(file.as_file());
            w.write_all(SPILL_MAGIC)?;
            for (k, v) in sorted.iter() {
                w.write_all(&k.to_le_bytes())?;
                w.write_all(&(v.len() as u32).to_le_bytes())?;
                w.write_all(v)?;
            }
            w.flush()?;
        }
        Ok(Run::File {
            file,
            records: sorted.len() as u64,
        })
    }

    pub fn cursor(&self) -> Result<Box<dyn Cursor + '_>> {
        Ok(match self {
            Run::Memory(r) => Box::new(MemCursor { run: r, pos: 0 }),
            Run::File { file, .. } => Box::new(FileCursor::open(file.path())?),
        })
    }
}

/// Forward-only reader over one sorted run, consumed a key group at a time.
pub(crate) trait Cursor {
    fn peek(&self) -> Option<u64>;
    /// Consumes the group at the head; its payloads go to `keep` if given.
    fn advance_group(&mut self, keep: Option<&mut Records>) -> Result<()>;
}

struct MemCursor<'a> {
    run: &'a Records,
    pos: usize,
}

impl Cursor for MemCursor<'_> {
    fn peek(&self) -> Option<u64> {
        (self.pos < self.run.len()).then(|| self.run.key(self.pos))
    }

    fn advance_group(&mut self, mut keep: Option<&mut Records>) -> Result<()> {
        let Some(key) = self.peek() else {
            return Ok(());
        };
        while self.pos < self.run.len() && self.run.key(self.pos) == key {
            if let Some(k) = keep.as_deref_mut() {
                k.push(key, self.run.value(self.pos));
            }
            self.pos += 1;
        }
        Ok(())
    }
}

struct FileCursor {
    reader: BufReader<File>,
    head: Option<(u64, Vec<u8>)>,
}

impl FileCursor {
    fn open(path: &Path) -> Result<Self> {
        let mut reader = BufReader::with_capacity(1 << 16, File::open(path)?);
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if &magic != SPILL_MAGIC {
            return Err(Error::pipeline("corrupt spill file header"));
        }
        let mut c = FileCursor { reader, head: None };
        c.head = c.read_one()?;
        Ok(c)
    }

    fn read_one(&mut self) -> Result<Option<(u64, Vec<u8>)>> {
        let mut key = [0u8; 8];
        match self.reader.read_exact(&mut key) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let mut len = [0u8; 4];
        self.reader.read_exact(&mut len)?;
        let mut value = vec![0u8; u32::from_le_bytes(len) as usize];
        self.reader.read_exact(&mut value)?;
        Ok(Some((u64::from_le_bytes(key), value)))
    }
}

impl Cursor for FileCursor {
    fn peek(&self) -> Option<u64> {
        self.head.as_ref().map(|(k, _)| *k)
    }

    fn advance_group(&mut self, mut keep: Option<&mut Records>) -> Result<()> {
        let Some(key) = self.peek() else {
            return Ok(());
        };
        while let Some((k, v)) = self.head.take() {
            if k != key {
                self.head = Some((k, v));
                break;
            }
            if let Some(out) = keep.as_deref_mut() {
                out.push(k, &v);
            }
            self.head = self.read_one()?;
        }
        Ok(())
    }
}
