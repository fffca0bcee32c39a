//! Binary weight ("PICW") and dataset ("PICD") containers. All integers
//! and payloads are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{write_file, Error, Result};
use crate::model::{LayerParams, ModelState};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"PICW";
pub const DATASET_MAGIC: &[u8; 4] = b"PICD";
pub const WEIGHTS_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(format!("truncated {what} at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| Error::format(format!("{what} too large")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Named tensors in the order they appear in a weight container.
pub type WeightEntries = Vec<(String, Tensor<f32>)>;

pub fn encode_weights(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(entries.len()).map_err(|_| Error::format("too many entries"))?.to_le_bytes());
    for (name, tensor) in entries {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::format(format!("name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            let d = u32::try_from(d).map_err(|_| Error::format(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightEntries> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != WEIGHTS_MAGIC {
        return Err(Error::format("not a weight container (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::format(format!("unsupported weight container version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    // every entry needs at least 2 + 1 + 1 bytes
    if count > r.remaining() / 4 {
        return Err(Error::format(format!("entry count {count} exceeds container size")));
    }
    let mut entries = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format("entry name is not UTF-8"))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(format!("{name}: unsupported dtype code {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::format(format!("{name}: rank {rank} outside 1..=4")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u32("dimension")? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| Error::format(format!("{name}: size overflows")))?;
            dims.push(d);
        }
        if numel.checked_mul(4).is_none_or(|b| b > r.remaining()) {
            return Err(Error::format(format!("{name}: payload of {numel} values exceeds container")));
        }
        let data = r.f32s(numel, "payload")?;
        let tensor = Tensor::new(dims, data).map_err(|e| Error::format(format!("{name}: {e}")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::format(format!("duplicate entry {name}")));
        }
        entries.push((name, tensor));
    }
    if r.remaining() != 0 {
        return Err(Error::format(format!("{} trailing bytes after last entry", r.remaining())));
    }
    Ok(entries)
}

/// Entry names: `<layer>.weight`, `<layer>.bias`, `<layer>.act_max`.
pub fn state_entries(state: &ModelState) -> WeightEntries {
    let mut out = Vec::new();
    for (id, p) in &state.params {
        out.push((format!("{id}.weight"), p.weight.clone()));
        out.push((format!("{id}.bias"), p.bias.clone()));
    }
    for (id, &r) in &state.act_max {
        out.push((format!("{id}.act_max"), Tensor::new(vec![1], vec![r]).expect("scalar")));
    }
    out
}

pub fn state_from_entries(entries: WeightEntries) -> Result<ModelState> {
    let mut weights = BTreeMap::new();
    let mut biases = BTreeMap::new();
    let mut act_max = BTreeMap::new();
    for (name, tensor) in entries {
        let (layer, field) =
            name.split_once('.').ok_or_else(|| Error::format(format!("entry name {name:?} is not <layer>.<field>")))?;
        let id: u32 = layer.parse().map_err(|_| Error::format(format!("entry {name:?}: bad layer id")))?;
        match field {
            "weight" => {
                weights.insert(id, tensor);
            }
            "bias" => {
                biases.insert(id, tensor);
            }
            "act_max" if tensor.len() == 1 => {
                act_max.insert(id, tensor.data()[0]);
            }
            _ => return Err(Error::format(format!("unknown entry {name:?}"))),
        }
    }
    let mut params = BTreeMap::new();
    for (id, weight) in weights {
        let bias = biases.remove(&id).ok_or_else(|| Error::format(format!("layer {id}: weight without bias")))?;
        params.insert(id, LayerParams { weight, bias });
    }
    if let Some(id) = biases.keys().next() {
        return Err(Error::format(format!("layer {id}: bias without weight")));
    }
    Ok(ModelState { params, act_max, rng_seed: 0 })
}

pub fn encode_state(state: &ModelState) -> Result<Vec<u8>> {
    encode_weights(&state_entries(state))
}

pub fn decode_state(bytes: &[u8]) -> Result<ModelState> {
    state_from_entries(decode_weights(bytes)?)
}

pub fn write_state(path: &Path, state: &ModelState) -> Result<()> {
    write_file(path, encode_state(state)?)
}

pub fn read_state(path: &Path) -> Result<ModelState> {
    decode_state(&std::fs::read(path).map_err(Error::at(path))?)
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let dims = [data.len(), data.channels, data.height, data.width];
    let mut out = Vec::with_capacity(20 + data.images.len() * 4 + data.len() * 2);
    out.extend_from_slice(DATASET_MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &data.images {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &data.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::format("not a dataset container (bad magic)"));
    }
    let n = r.u32("image count")? as usize;
    let c = r.u32("channels")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::format(format!("image dimensions {c}x{h}x{w} must be positive")));
    }
    let values = [n, c, h, w]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("dataset size overflows"))?;
    let expected = values
        .checked_mul(4)
        .and_then(|b| b.checked_add(n.checked_mul(2)?))
        .ok_or_else(|| Error::format("dataset size overflows"))?;
    if expected != r.remaining() {
        return Err(Error::format(format!(
            "header announces {expected} payload bytes, container holds {}",
            r.remaining()
        )));
    }
    let images = r.f32s(values, "images")?;
    let labels = r.take(n * 2, "labels")?.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Dataset::new(c, h, w, images, labels)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_file(path, encode_dataset(data)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path).map_err(Error::at(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::spec::desk_network;

    #[test]
    fn weight_header_layout() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode_weights(&[("3.bias".into(), t)]).unwrap();
        let mut expected = b"PICW".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&6u16.to_le_bytes());
        expected.extend_from_slice(b"3.bias");
        expected.extend_from_slice(&[0, 1]);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn state_round_trip() {
        let spec = desk_network(3);
        let mut state = init_model(&spec, 5).unwrap();
        state.act_max.insert(3, 2.5);
        let back = decode_state(&encode_state(&state).unwrap()).unwrap();
        assert_eq!(back.params, state.params);
        assert_eq!(back.act_max, state.act_max);
    }

    #[test]
    fn rejects_corrupt_weights() {
        let spec = desk_network(3);
        let bytes = encode_state(&init_model(&spec, 5).unwrap()).unwrap();
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_weights(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_weights(&bad).is_err());
        let mut huge = bytes;
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_weights(&huge).is_err());
    }

    #[test]
    fn dataset_layout_and_checks() {
        let ds = Dataset::new(1, 1, 2, vec![0.5, 1.5, 2.0, 3.0], vec![1, 0]).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(&bytes[..4], b"PICD");
        assert_eq!(bytes.len(), 4 + 16 + 16 + 4);
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
        assert!(decode_dataset(&bytes[..bytes.len() - 2]).is_err());
        let mut lying = bytes;
        lying[4..8].copy_from_slice(&3u32.to_le_bytes());
        assert!(decode_dataset(&lying).is_err());
    }
}
