//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BCDI" | version: u32 | entries: u32
//! per entry (sorted by name):
//!     name_len: u16 | name: UTF-8 | rank: u8 | dims: u32 * rank | values: f64 * prod(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NnError, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BCDI";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<(), NnError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let count = u32::try_from(store.len())
        .map_err(|_| NnError::Format("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, p) in store.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| NnError::Format(format!("parameter name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = p.value.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| NnError::Format(format!("rank too large for {name}")))?;
        w.write_all(&[rank])?;
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| NnError::Format(format!("dimension too large in {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], NnError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore, NnError> {
    let mut magic = Vec::with_capacity(4);
    (&mut r).take(4).read_to_end(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NnError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            "BCDI"
        )));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| NnError::Format(format!("parameter name is not UTF-8: {e}")))?;
        let rank = read_array::<1, _>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        if store.contains(&name) {
            return Err(NnError::Format(format!("duplicate entry {name}")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), NnError> {
    write_checkpoint(store, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, NnError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert_normal("enc.w", &[3, 4], 1.0, 1);
        s.insert("bias", Tensor::from_vec(vec![0.1, -2.5e-300, f64::MAX]));
        s.insert("k", Tensor::zeros(&[2, 1, 3]));
        s
    }

    #[test]
    fn byte_layout_is_fixed() {
        let mut s = ParamStore::new();
        s.insert("ab", Tensor::from_vec(vec![1.0]));
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        let mut expected = b"BCDI".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u16.to_le_bytes());
        expected.extend(b"ab");
        expected.push(1);
        expected.extend(1u32.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut a = Vec::new();
        write_checkpoint(&sample(), &mut a).unwrap();
        let restored = read_checkpoint(&a[..]).unwrap();
        let mut b = Vec::new();
        write_checkpoint(&restored, &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(restored.get("enc.w").unwrap(), sample().get("enc.w").unwrap());
    }

    #[test]
    fn empty_input_is_a_format_error() {
        assert!(matches!(read_checkpoint(&[][..]), Err(NnError::Format(_))));
        assert!(matches!(read_checkpoint(&b"NOPE0000"[..]), Err(NnError::Format(_))));
    }

    #[test]
    fn wrong_version_is_a_format_error() {
        let mut buf = b"BCDI".to_vec();
        buf.extend(9u32.to_le_bytes());
        buf.extend(0u32.to_le_bytes());
        assert!(matches!(read_checkpoint(&buf[..]), Err(NnError::Format(_))));
    }

    #[test]
    fn truncated_payload_is_an_io_error() {
        let mut buf = Vec::new();
        write_checkpoint(&sample(), &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(&buf[..]), Err(NnError::Io(_))));
    }
}
