//! Bit-exact artifact file formats.
//!
//! `BDXP` checkpoint: magic `"BDXP"`, format version `u16`, architecture
//! descriptor as length-prefixed UTF-8, class count `u32`, then each
//! parameter in declaration order: length-prefixed name, rank `u8`, dims as
//! `u32`s, raw little-endian `f32` data.
//!
//! `BDXD` dataset: magic `"BDXD"`, version `u16`, class count `u32`, sample
//! count `u32`, sample rank `u8` + dims, raw `f32` pixels, then `u8` labels.
//!
//! All integers are little-endian. Loaders reject unknown magic or version.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Architecture, Network};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BDXP";
pub const DATASET_MAGIC: &[u8; 4] = b"BDXD";
pub const FORMAT_VERSION: u16 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Cursor { buf, pos: 0, what }
    }

    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            what: self.what.into(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("invalid UTF-8 string"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }

    fn check_header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(self.err(format!("bad magic {got:?}")));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(self.err(format!("unsupported format version {version}")));
        }
        Ok(())
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Serialize a network to the BDXP byte layout.
pub fn network_to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_string(&mut out, net.architecture().descriptor());
    out.extend_from_slice(&(net.num_classes() as u32).to_le_bytes());
    for p in net.params() {
        push_string(&mut out, &p.name);
        out.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut cur = Cursor::new(bytes, "BDXP checkpoint");
    cur.check_header(CHECKPOINT_MAGIC)?;
    let descriptor = cur.string()?;
    let classes = cur.u32()? as usize;
    let arch = Architecture::from_descriptor(&descriptor)?;
    if arch.num_classes != classes {
        return Err(cur.err(format!(
            "descriptor says {} classes but header says {classes}",
            arch.num_classes
        )));
    }
    // seed is irrelevant: every parameter is overwritten below
    let mut net = Network::new(arch, 0)?;
    let mut tensors = Vec::with_capacity(net.params().len());
    for expected in net.params() {
        let name = cur.string()?;
        if name != expected.name {
            return Err(cur.err(format!(
                "parameter {name:?} does not match declaration order ({:?})",
                expected.name
            )));
        }
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let data = cur.f32s(count)?;
        tensors.push(Tensor::new(shape, data)?);
    }
    cur.done()?;
    net.set_params(tensors)?;
    Ok(net)
}

pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    write_atomic(path, &network_to_bytes(net))
}

pub fn load_network(path: &Path) -> Result<Network> {
    let bytes = read_file(path)?;
    network_from_bytes(&bytes)
}

/// Serialize a dataset to the BDXD byte layout. Labels are stored as `u8`,
/// so at most 256 classes are representable.
pub fn dataset_to_bytes(dataset: &LabeledDataset) -> Result<Vec<u8>> {
    if dataset.num_classes() > 256 {
        return Err(Error::Config(
            "BDXD stores u8 labels; more than 256 classes unsupported".into(),
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    let shape = dataset.sample_shape()?;
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in dataset.inputs() {
        if x.shape() != shape {
            return Err(Error::InputShape {
                expected: format!("{shape:?} for every sample"),
                got: format!("{:?}", x.shape()),
            });
        }
        for &v in x.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for i in 0..dataset.len() {
        out.push(dataset.label(i) as u8);
    }
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut cur = Cursor::new(bytes, "BDXD dataset");
    cur.check_header(DATASET_MAGIC)?;
    let classes = cur.u32()? as usize;
    let n = cur.u32()? as usize;
    let rank = cur.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32()? as usize);
    }
    let per: usize = shape.iter().product();
    let mut inputs = Vec::with_capacity(n);
    for _ in 0..n {
        inputs.push(Tensor::new(shape.clone(), cur.f32s(per)?)?);
    }
    let labels: Vec<usize> = cur.take(n)?.iter().map(|&b| b as usize).collect();
    cur.done()?;
    LabeledDataset::new(inputs, labels, classes)
}

pub fn save_dataset(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    write_atomic(path, &dataset_to_bytes(dataset)?)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let bytes = read_file(path)?;
    dataset_from_bytes(&bytes)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Dependency(path.display().to_string())
            } else {
                Error::io(path.display().to_string(), e)
            }
        })?;
    Ok(buf)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes))
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_dataset;
    use proptest::prelude::*;

    #[test]
    fn network_round_trip_is_bit_exact() {
        let arch = Architecture::small_cnn_sized(1, 8, 8, 4, 4, 8).unwrap();
        let net = Network::new(arch, 42).unwrap();
        let bytes = network_to_bytes(&net);
        let loaded = network_from_bytes(&bytes).unwrap();
        assert_eq!(loaded.params(), net.params());
        assert_eq!(network_to_bytes(&loaded), bytes, "save-load-save is stable");
    }

    #[test]
    fn unknown_magic_and_version_are_rejected() {
        let arch = Architecture::mlp(1, 2, 2, &[], 2).unwrap();
        let net = Network::new(arch, 0).unwrap();
        let mut bytes = network_to_bytes(&net);
        bytes[0] = b'X';
        assert!(matches!(
            network_from_bytes(&bytes),
            Err(Error::Parse { .. })
        ));
        let mut bytes = network_to_bytes(&net);
        bytes[4] = 99;
        assert!(matches!(
            network_from_bytes(&bytes),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn truncated_checkpoint_is_a_parse_error() {
        let arch = Architecture::mlp(1, 2, 2, &[], 2).unwrap();
        let net = Network::new(arch, 0).unwrap();
        let bytes = network_to_bytes(&net);
        for cut in [3usize, 7, 11, bytes.len() - 1] {
            assert!(matches!(
                network_from_bytes(&bytes[..cut]),
                Err(Error::Parse { .. })
            ));
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let d = make_synthetic_dataset(4, 6, [3, 8, 8], 77).unwrap();
        let bytes = dataset_to_bytes(&d).unwrap();
        let loaded = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(loaded, d);
        assert_eq!(dataset_to_bytes(&loaded).unwrap(), bytes);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn random_mlp_checkpoints_round_trip(seed in 0u64..1000, hidden in 1usize..12, classes in 2usize..6) {
            let arch = Architecture::mlp(1, 3, 3, &[hidden], classes).unwrap();
            let net = Network::new(arch, seed).unwrap();
            let loaded = network_from_bytes(&network_to_bytes(&net)).unwrap();
            prop_assert_eq!(loaded.params(), net.params());
        }
    }
}
