//! Binary weight snapshots.
//!
//! Layout, all integers little-endian:
//! magic "DWGT" | version u32 | tensor count u32, then per tensor:
//! name length u32 | UTF-8 name | four u32 dims | f32 payload in row-major
//! (N,C,H,W) order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NnError, Scalar, Tensor4};

pub const WEIGHT_MAGIC: [u8; 4] = *b"DWGT";
pub const WEIGHT_VERSION: u32 = 1;
/// Reserved tensor name whose payload is a UTF-8 config string stored as
/// byte-valued floats in a (1,1,1,len) tensor.
pub const CONFIG_TENSOR_NAME: &str = "__config__";

const MAX_NAME_LEN: u32 = 1 << 16;
const MAX_TENSORS: u32 = 1 << 20;
const MAX_DIM: u32 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub name: String,
    pub dims: [u32; 4],
    pub data: Vec<f32>,
}

impl WeightRecord {
    pub fn from_tensor<S: Scalar>(name: &str, t: &Tensor4<S>) -> Self {
        let (n, c, h, w) = t.dims();
        WeightRecord {
            name: name.to_string(),
            dims: [n as u32, c as u32, h as u32, w as u32],
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn from_vec(name: &str, values: &[f32]) -> Self {
        WeightRecord {
            name: name.to_string(),
            dims: [1, 1, 1, values.len() as u32],
            data: values.to_vec(),
        }
    }

    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor4<S>, NnError> {
        let [n, c, h, w] = self.dims;
        Tensor4::new(
            n as usize,
            c as usize,
            h as usize,
            w as usize,
            self.data.iter().map(|&v| S::from_f64(v as f64)).collect(),
        )
    }

    /// Encodes a UTF-8 string as the reserved config pseudo-tensor.
    pub fn config(text: &str) -> Self {
        WeightRecord {
            name: CONFIG_TENSOR_NAME.to_string(),
            dims: [1, 1, 1, text.len() as u32],
            data: text.bytes().map(|b| b as f32).collect(),
        }
    }

    /// Decodes a config pseudo-tensor back into its string.
    pub fn config_text(&self) -> Result<String, NnError> {
        if self.name != CONFIG_TENSOR_NAME {
            return Err(NnError::WeightFormat(format!(
                "tensor {:?} is not the config record",
                self.name
            )));
        }
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..256.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(NnError::WeightFormat(format!("config byte {v} out of range")))
                }
            })
            .collect::<Result<_, _>>()?;
        String::from_utf8(bytes)
            .map_err(|e| NnError::WeightFormat(format!("config is not UTF-8: {e}")))
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// Finds the config pseudo-tensor among loaded records.
pub fn find_config(records: &[WeightRecord]) -> Option<Result<String, NnError>> {
    records
        .iter()
        .find(|r| r.name == CONFIG_TENSOR_NAME)
        .map(|r| r.config_text())
}

pub fn save_weights<P: AsRef<Path>>(path: P, records: &[WeightRecord]) -> Result<(), NnError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&WEIGHT_MAGIC)?;
    out.write_all(&WEIGHT_VERSION.to_le_bytes())?;
    out.write_all(&(records.len() as u32).to_le_bytes())?;
    for rec in records {
        if rec.data.len() != rec.numel() {
            return Err(NnError::WeightFormat(format!(
                "tensor {:?}: {} values for dims {:?}",
                rec.name,
                rec.data.len(),
                rec.dims
            )));
        }
        let name = rec.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        for d in rec.dims {
            out.write_all(&d.to_le_bytes())?;
        }
        for v in &rec.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn load_weights<P: AsRef<Path>>(path: P) -> Result<Vec<WeightRecord>, NnError> {
    let mut inp = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic)?;
    if magic != WEIGHT_MAGIC {
        return Err(NnError::WeightFormat(format!(
            "bad magic {magic:?}, expected {WEIGHT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut inp)?;
    if version != WEIGHT_VERSION {
        return Err(NnError::WeightFormat(format!(
            "unsupported version {version}, expected {WEIGHT_VERSION}"
        )));
    }
    let count = read_u32(&mut inp)?;
    if count > MAX_TENSORS {
        return Err(NnError::WeightFormat(format!("implausible tensor count {count}")));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut inp)?;
        if name_len > MAX_NAME_LEN {
            return Err(NnError::WeightFormat(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len as usize];
        inp.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| NnError::WeightFormat(format!("tensor name is not UTF-8: {e}")))?;
        let mut dims = [0u32; 4];
        for d in &mut dims {
            *d = read_u32(&mut inp)?;
            if *d > MAX_DIM {
                return Err(NnError::WeightFormat(format!(
                    "tensor {name:?}: implausible dim {d}"
                )));
            }
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let mut data = vec![0f32; numel];
        let mut buf = [0u8; 4];
        for v in &mut data {
            inp.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        records.push(WeightRecord { name, dims, data });
    }
    let mut trailing = [0u8; 1];
    if inp.read(&mut trailing)? != 0 {
        return Err(NnError::WeightFormat("trailing bytes after last tensor".into()));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_dims_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dwgt");
        let t = Tensor4::<f32>::random_uniform(2, 3, 4, 5, -2.0, 2.0, 9);
        let records = vec![
            WeightRecord::config("arch=fcn8;width=16"),
            WeightRecord::from_tensor("enc0.weight", &t),
            WeightRecord::from_vec("enc0.bias", &[0.25, -0.5, 1.0]),
        ];
        save_weights(&path, &records).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back, records);
        let restored: Tensor4<f32> = back[1].to_tensor().unwrap();
        assert_eq!(restored, t);
        assert_eq!(
            find_config(&back).unwrap().unwrap(),
            "arch=fcn8;width=16"
        );
    }

    #[test]
    fn f64_tensors_roundtrip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dwgt");
        let t = Tensor4::<f64>::random_uniform(1, 2, 3, 3, -1.0, 1.0, 10);
        save_weights(&path, &[WeightRecord::from_tensor("w", &t)]).unwrap();
        let back: Tensor4<f64> = load_weights(&path).unwrap()[0].to_tensor().unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_corrupted_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dwgt");
        save_weights(&path, &[WeightRecord::from_vec("w", &[1.0])]).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad_magic = dir.path().join("bad_magic.dwgt");
        std::fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(load_weights(&bad_magic), Err(NnError::WeightFormat(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        let bad_version = dir.path().join("bad_version.dwgt");
        std::fs::write(&bad_version, &bytes).unwrap();
        assert!(matches!(load_weights(&bad_version), Err(NnError::WeightFormat(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        let trailing = dir.path().join("trailing.dwgt");
        std::fs::write(&trailing, &bytes).unwrap();
        assert!(matches!(load_weights(&trailing), Err(NnError::WeightFormat(_))));

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("truncated.dwgt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load_weights(&truncated).is_err());
    }

    #[test]
    fn config_text_validates_payload() {
        let rec = WeightRecord::config("hello");
        assert_eq!(rec.config_text().unwrap(), "hello");
        assert_eq!(rec.dims, [1, 1, 1, 5]);

        let not_config = WeightRecord::from_vec("w", &[1.0]);
        assert!(not_config.config_text().is_err());

        let mut broken = WeightRecord::config("hi");
        broken.data[0] = 0.5;
        assert!(broken.config_text().is_err());
    }
}
