//! The `AGEN` tensor container used for models and networks.
//!
//! Layout: magic `AGEN`, u16 version, u32 tensor count, then per tensor a
//! u16-length-prefixed ASCII name, u8 rank, u32 dims and little-endian f64
//! data. All integers are little-endian.

use std::fs;
use std::path::Path;

use glimpse_core::approxnet::ApproxNetParams;
use glimpse_core::brbm::BrbmParams;
use glimpse_core::gdbn::GdbnModel;
use glimpse_core::grbm::GrbmParams;
use glimpse_core::matrix::Matrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AGEN";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: &str, dims: &[usize], data: &[f64]) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: data.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn push(&mut self, name: &str, dims: &[usize], data: &[f64]) {
        self.tensors.push(Tensor::new(name, dims, data));
    }

    pub fn get(&self, name: &str) -> std::result::Result<&Tensor, String> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| format!("missing tensor '{name}'"))
    }

    fn get_shaped(&self, name: &str, dims: &[usize]) -> std::result::Result<&[f64], String> {
        let t = self.get(name)?;
        let want: Vec<u32> = dims.iter().map(|&d| d as u32).collect();
        if t.dims != want {
            return Err(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                t.dims, want
            ));
        }
        Ok(&t.data)
    }

    fn get_vec(&self, name: &str) -> std::result::Result<&[f64], String> {
        let t = self.get(name)?;
        if t.dims.len() != 1 {
            return Err(format!("tensor '{name}' must be a vector"));
        }
        Ok(&t.data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic (expected AGEN)".into());
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(format!("unsupported AGEN version {version}"));
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .ok()
                .filter(|s| s.is_ascii())
                .ok_or("tensor name is not ASCII")?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let dims: Vec<u32> = (0..rank)
                .map(|_| r.array().map(u32::from_le_bytes))
                .collect::<std::result::Result<_, _>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or("tensor size overflows")?;
            if n > (bytes.len() - r.pos) / 8 {
                return Err(format!("tensor '{name}' is truncated"));
            }
            let data = (0..n)
                .map(|_| r.array().map(f64::from_le_bytes))
                .collect::<std::result::Result<_, _>>()?;
            tensors.push(Tensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after last tensor".into());
        }
        Ok(Self { tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|m| Error::format(path, m))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or("unexpected end of file")?;
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("slice length"))
    }
}

fn dims_of(t: &Tensor, idx: usize) -> usize {
    t.dims.get(idx).copied().unwrap_or(0) as usize
}

/// Both layers plus patch geometry. Fast weights are not stored.
pub fn model_to_container(m: &GdbnModel) -> Container {
    let mut c = Container::default();
    let geometry = [
        m.patch_width as f64,
        m.patch_height as f64,
        m.channels as f64,
    ];
    c.push("geometry", &[3], &geometry);
    let (d, h1, h2) = (m.visible(), m.hidden1(), m.hidden2());
    c.push("layer1.W", &[d, h1], m.layer1.w.as_slice());
    c.push("layer1.b", &[d], &m.layer1.b);
    c.push("layer1.c", &[h1], &m.layer1.c);
    c.push("layer1.log_sigma", &[d], &m.layer1.log_sigma);
    c.push("layer2.W", &[h1, h2], m.layer2.w.as_slice());
    c.push("layer2.b", &[h1], &m.layer2.b);
    c.push("layer2.c", &[h2], &m.layer2.c);
    c
}

pub fn model_from_container(c: &Container) -> std::result::Result<GdbnModel, String> {
    let g = c.get_shaped("geometry", &[3])?;
    if g.iter().any(|x| !(x.fract() == 0.0 && *x >= 1.0)) {
        return Err("geometry must hold positive integers".into());
    }
    let (w, h, ch) = (g[0] as usize, g[1] as usize, g[2] as usize);
    let w1 = c.get("layer1.W")?;
    let (d, h1) = (dims_of(w1, 0), dims_of(w1, 1));
    let w2 = c.get("layer2.W")?;
    let h2 = dims_of(w2, 1);
    let mut l1 = GrbmParams::zeros(d, h1);
    l1.w = Matrix::from_vec(d, h1, c.get_shaped("layer1.W", &[d, h1])?.to_vec())
        .map_err(|e| e.to_string())?;
    l1.b = c.get_shaped("layer1.b", &[d])?.to_vec();
    l1.c = c.get_shaped("layer1.c", &[h1])?.to_vec();
    l1.log_sigma = c.get_shaped("layer1.log_sigma", &[d])?.to_vec();
    let mut l2 = BrbmParams::zeros(h1, h2);
    l2.w = Matrix::from_vec(h1, h2, c.get_shaped("layer2.W", &[h1, h2])?.to_vec())
        .map_err(|e| e.to_string())?;
    l2.b = c.get_shaped("layer2.b", &[h1])?.to_vec();
    l2.c = c.get_shaped("layer2.c", &[h2])?.to_vec();
    let model = GdbnModel::new(l1, l2, w, h, ch).map_err(|e| e.to_string())?;
    if !(model.layer1.is_finite() && model.layer2.is_finite()) {
        return Err("model contains non-finite values".into());
    }
    Ok(model)
}

pub fn net_to_container(p: &ApproxNetParams) -> Container {
    use glimpse_core::approxnet::{FLAT, KERNEL_V, KERNEL_X, MAPS, OUTPUTS};
    let (ch, h) = (p.channels, p.hidden);
    let mut c = Container::default();
    c.push("conv_x.W", &[MAPS, ch, KERNEL_X, KERNEL_X], &p.conv_x_w);
    c.push("conv_x.b", &[MAPS], &p.conv_x_b);
    c.push("conv_v.W", &[MAPS, ch, KERNEL_V, KERNEL_V], &p.conv_v_w);
    c.push("conv_v.b", &[MAPS], &p.conv_v_b);
    c.push("fc1.W", &[FLAT, h], p.fc1_w.as_slice());
    c.push("fc1.b", &[h], &p.fc1_b);
    c.push("fc2.W", &[OUTPUTS, h], p.fc2_w.as_slice());
    c.push("fc2.b", &[OUTPUTS], &p.fc2_b);
    c.push("output_scale", &[OUTPUTS], &p.output_scale);
    c
}

pub fn net_from_container(c: &Container) -> std::result::Result<ApproxNetParams, String> {
    use glimpse_core::approxnet::{FLAT, KERNEL_V, KERNEL_X, MAPS, OUTPUTS};
    let cx = c.get("conv_x.W")?;
    let ch = dims_of(cx, 1);
    let h = dims_of(c.get("fc1.W")?, 1);
    if ch == 0 || h == 0 {
        return Err("network has empty layers".into());
    }
    let mut p = ApproxNetParams::zeros(ch, h);
    p.conv_x_w = c
        .get_shaped("conv_x.W", &[MAPS, ch, KERNEL_X, KERNEL_X])?
        .to_vec();
    p.conv_x_b = c.get_shaped("conv_x.b", &[MAPS])?.to_vec();
    p.conv_v_w = c
        .get_shaped("conv_v.W", &[MAPS, ch, KERNEL_V, KERNEL_V])?
        .to_vec();
    p.conv_v_b = c.get_shaped("conv_v.b", &[MAPS])?.to_vec();
    p.fc1_w = Matrix::from_vec(FLAT, h, c.get_shaped("fc1.W", &[FLAT, h])?.to_vec())
        .map_err(|e| e.to_string())?;
    p.fc1_b = c.get_shaped("fc1.b", &[h])?.to_vec();
    p.fc2_w = Matrix::from_vec(OUTPUTS, h, c.get_shaped("fc2.W", &[OUTPUTS, h])?.to_vec())
        .map_err(|e| e.to_string())?;
    p.fc2_b = c.get_shaped("fc2.b", &[OUTPUTS])?.to_vec();
    let s = c.get_vec("output_scale")?;
    if s.len() != OUTPUTS {
        return Err("output_scale must have 4 entries".into());
    }
    p.output_scale.copy_from_slice(s);
    if !p.is_finite() {
        return Err("network contains non-finite values".into());
    }
    Ok(p)
}

pub fn save_model(path: &Path, m: &GdbnModel) -> Result<()> {
    model_to_container(m).write(path)
}

pub fn load_model(path: &Path) -> Result<GdbnModel> {
    model_from_container(&Container::read(path)?).map_err(|m| Error::format(path, m))
}

pub fn save_net(path: &Path, p: &ApproxNetParams) -> Result<()> {
    net_to_container(p).write(path)
}

pub fn load_net(path: &Path) -> Result<ApproxNetParams> {
    net_from_container(&Container::read(path)?).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut c = Container::default();
        c.push("ab", &[2], &[1.0, -2.0]);
        let b = c.encode();
        assert_eq!(&b[..4], b"AGEN");
        assert_eq!(&b[4..6], &1u16.to_le_bytes());
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(&b[10..12], &2u16.to_le_bytes());
        assert_eq!(&b[12..14], b"ab");
        assert_eq!(b[14], 1);
        assert_eq!(&b[15..19], &2u32.to_le_bytes());
        assert_eq!(&b[19..27], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 35);
        assert_eq!(Container::decode(&b).unwrap(), c);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut c = Container::default();
        c.push("x", &[3], &[1.0, 2.0, 3.0]);
        let b = c.encode();
        assert!(Container::decode(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Container::decode(&extra).is_err());
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(Container::decode(&magic).is_err());
        assert!(model_from_container(&c).is_err());
        assert!(net_from_container(&c).is_err());
    }

    #[test]
    fn model_and_net_round_trip() {
        let mut l1 = GrbmParams::zeros(6, 3);
        l1.w = Matrix::from_fn(6, 3, |r, c| (r * 3 + c) as f64 * 0.1 - 0.4);
        l1.b = vec![0.5; 6];
        l1.log_sigma = vec![-1.0; 6];
        let mut l2 = BrbmParams::zeros(3, 2);
        l2.c = vec![0.25, -0.5];
        let m = GdbnModel::new(l1, l2, 3, 2, 1).unwrap();
        let back =
            model_from_container(&Container::decode(&model_to_container(&m).encode()).unwrap())
                .unwrap();
        assert_eq!(back, m);

        let net = ApproxNetParams::new(1, 5, 3);
        let back =
            net_from_container(&Container::decode(&net_to_container(&net).encode()).unwrap())
                .unwrap();
        assert_eq!(back, net);
    }
}
