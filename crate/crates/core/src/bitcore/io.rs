//! Code files (`BDG\x01`) and real-vector files (`BDR\x01`).
//!
//! Code file: magic, u64 n, u32 d_bits, then n rows of
//! (u64 label, d_bits / 8 bytes of packed code).
//! Real file: magic, u64 n, u32 D, then n rows of (u64 label, D f32).
//! All integers and floats are little-endian.

use std::path::Path;

use super::{Dataset, Label, RealTable};
use crate::codec::{read_file, to_u32, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const CODE_MAGIC: &[u8; 4] = b"BDG\x01";
pub const REAL_MAGIC: &[u8; 4] = b"BDR\x01";

pub fn encode_codes(data: &Dataset) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(CODE_MAGIC)
        .u64(data.len() as u64)
        .u32(to_u32(data.d_bits(), "d_bits")?);
    for (label, code) in data.iter() {
        w.u64(label.0).words(code);
    }
    Ok(w.buf)
}

pub fn decode_codes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes, "code file");
    r.expect_magic(CODE_MAGIC)?;
    let n = r.u64()?;
    let d_bits = r.u32()? as usize;
    if d_bits == 0 || d_bits % 64 != 0 {
        return Err(Error::format(format!(
            "code file: d_bits {d_bits} is not a positive multiple of 64"
        )));
    }
    let wpc = d_bits / 64;
    let n = r.count(n, 8 + d_bits / 8)?;
    let mut labels = Vec::with_capacity(n);
    let mut words = Vec::with_capacity(n * wpc);
    for _ in 0..n {
        labels.push(Label(r.u64()?));
        r.words(wpc, &mut words)?;
    }
    r.finish()?;
    Dataset::new(d_bits, labels, words).map_err(|e| Error::format(format!("code file: {e}")))
}

pub fn write_codes(data: &Dataset, path: &Path) -> Result<()> {
    write_file(path, &encode_codes(data)?)
}

pub fn read_codes(path: &Path) -> Result<Dataset> {
    decode_codes(&read_file(path)?)
}

pub fn encode_reals(table: &RealTable) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(REAL_MAGIC)
        .u64(table.len() as u64)
        .u32(to_u32(table.dim(), "dimension")?);
    for (label, row) in table.labels().iter().zip(table.rows()) {
        w.u64(label.0).f32s(row);
    }
    Ok(w.buf)
}

pub fn decode_reals(bytes: &[u8]) -> Result<RealTable> {
    let mut r = Reader::new(bytes, "real vector file");
    r.expect_magic(REAL_MAGIC)?;
    let n = r.u64()?;
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(Error::format("real vector file: zero dimension"));
    }
    let n = r.count(n, 8 + 4 * dim)?;
    let mut labels = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * dim);
    for _ in 0..n {
        labels.push(Label(r.u64()?));
        r.f32s(dim, &mut values)?;
    }
    r.finish()?;
    RealTable::new(dim, labels, values)
        .map_err(|e| Error::format(format!("real vector file: {e}")))
}

pub fn write_reals(table: &RealTable, path: &Path) -> Result<()> {
    write_file(path, &encode_reals(table)?)
}

pub fn read_reals(path: &Path) -> Result<RealTable> {
    decode_reals(&read_file(path)?)
}

/// Text input: one vector per line, `label,v1,...,vD`, no header.
pub fn read_reals_csv(path: &Path) -> Result<RealTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for (line, rec) in reader.records().enumerate() {
        let bad = |what: &str| Error::format(format!("{}:{}: {what}", path.display(), line + 1));
        let rec = rec.map_err(|e| bad(&e.to_string()))?;
        let d = rec.len().saturating_sub(1);
        if d == 0 || *dim.get_or_insert(d) != d {
            return Err(bad("inconsistent or empty row"));
        }
        labels.push(Label(rec[0].parse().map_err(|_| bad("bad label"))?));
        for v in rec.iter().skip(1) {
            values.push(v.parse::<f32>().map_err(|_| bad("bad value"))?);
        }
    }
    let dim = dim.ok_or_else(|| Error::format(format!("{}: no rows", path.display())))?;
    RealTable::new(dim, labels, values).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Reads a code file and, when given, the matching real-vector file.
pub fn read_dataset(codes: &Path, reals: Option<&Path>) -> Result<Dataset> {
    let data = read_codes(codes)?;
    match reals {
        Some(p) => data
            .with_reals(read_reals(p)?)
            .map_err(|e| Error::format(format!("{}: {e}", p.display()))),
        None => Ok(data),
    }
}

/// Writes the code file and, if the dataset carries real vectors, the real file.
pub fn write_dataset(data: &Dataset, codes: &Path, reals: Option<&Path>) -> Result<()> {
    write_codes(data, codes)?;
    if let (Some(table), Some(p)) = (data.reals(), reals) {
        write_reals(table, p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcore::BitCode;
    use proptest::prelude::*;

    fn three() -> Dataset {
        Dataset::new(
            128,
            vec![Label(0), Label(1), Label(2)],
            vec![1, 2, 3, 4, u64::MAX, 0],
        )
        .unwrap()
    }

    #[test]
    fn reals_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.csv");
        std::fs::write(&p, "3, 1.5, -2\n9,0,0.25\n").unwrap();
        let t = read_reals_csv(&p).unwrap();
        assert_eq!(t.labels(), &[Label(3), Label(9)]);
        assert_eq!(t.values(), &[1.5, -2.0, 0.0, 0.25]);
        std::fs::write(&p, "3,1\n4,1,2\n").unwrap();
        assert!(matches!(read_reals_csv(&p), Err(Error::Format(_))));
    }

    #[test]
    fn round_trip_three_records() {
        let ds = three();
        let bytes = encode_codes(&ds).unwrap();
        assert_eq!(decode_codes(&bytes).unwrap(), ds);
        assert_eq!(encode_codes(&decode_codes(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn bit_zero_is_low_bit_of_first_byte() {
        let mut c = BitCode::zeros(64).unwrap();
        c.set(0, true);
        c.set(9, true);
        let ds = Dataset::from_codes(64, vec![(Label(7), c)]).unwrap();
        let bytes = encode_codes(&ds).unwrap();
        assert_eq!(&bytes[24..26], &[0b0000_0001, 0b0000_0010]);
    }

    #[test]
    fn empty_file_is_format_error() {
        assert!(matches!(decode_codes(&[]), Err(Error::Format(_))));
        assert!(matches!(decode_reals(&[]), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_rows_are_format_error() {
        let labels: Vec<Label> = (0..10).map(Label).collect();
        let ds = Dataset::new(64, labels, (0..10).collect()).unwrap();
        let bytes = encode_codes(&ds).unwrap();
        // drop the last row: header still says 10
        let cut = &bytes[..bytes.len() - 16];
        assert!(matches!(decode_codes(cut), Err(Error::Format(_))));
        // and a partially written row
        assert!(matches!(
            decode_codes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bad_magic_and_width() {
        let mut bytes = encode_codes(&three()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_codes(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_codes(&three()).unwrap();
        bytes[12..16].copy_from_slice(&100u32.to_le_bytes());
        assert!(matches!(decode_codes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn reals_round_trip() {
        let t = RealTable::new(3, vec![Label(4), Label(9)], vec![1.0, -2.5, 3.0, 0.0, 0.5, 7.25])
            .unwrap();
        let bytes = encode_reals(&t).unwrap();
        assert_eq!(decode_reals(&bytes).unwrap(), t);
    }

    proptest! {
        #[test]
        fn code_file_round_trip(words in proptest::collection::vec(any::<u64>(), 0..40), wpc in 1usize..3) {
            let n = words.len() / wpc;
            let words = words[..n * wpc].to_vec();
            let labels = (0..n as u64).map(|i| Label(i * 3 + 1)).collect();
            let ds = Dataset::new(wpc * 64, labels, words).unwrap();
            let bytes = encode_codes(&ds).unwrap();
            let back = decode_codes(&bytes).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(encode_codes(&back).unwrap(), bytes);
        }
    }
}
