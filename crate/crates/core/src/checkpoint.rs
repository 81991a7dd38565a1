//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "MSPL"                 4 bytes magic
//! version                u32 (currently 1)
//! count                  u32 primitives
//! band_count             u8
//! bands                  band_count x u8 (0 RGB, 1 G, 2 R, 3 RE, 4 NIR)
//! count x record:
//!   mean                 3 x f32
//!   quaternion (w,x,y,z) 4 x f32
//!   log_scale            3 x f32
//!   logit_opacity        f32
//!   sh                   channels x 16 x f32, channels in band order
//! ```

use std::fs;
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use crate::band::{Band, BandSet};
use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSPL";
pub const VERSION: u32 = 1;

pub fn encode(cloud: &GaussianCloud) -> Vec<u8> {
    let stride = cloud.sh_stride();
    let mut out = Vec::with_capacity(16 + cloud.len() * (11 + stride) * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    out.push(cloud.bands().len() as u8);
    for b in cloud.bands().iter() {
        out.push(b.rank() as u8);
    }
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for i in 0..cloud.len() {
        cloud.means[i].iter().for_each(|&v| put(v));
        cloud.rotations[i].iter().for_each(|&v| put(v));
        cloud.log_scales[i].iter().for_each(|&v| put(v));
        put(cloud.logit_opacities[i]);
        cloud.sh[i * stride..(i + 1) * stride].iter().for_each(|&v| put(v));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

pub fn decode(bytes: &[u8]) -> Result<GaussianCloud> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let nb = r.take(1)?[0] as usize;
    let mut bands = Vec::with_capacity(nb);
    for &code in r.take(nb)? {
        let band = *Band::ALL
            .get(code as usize)
            .ok_or_else(|| Error::Checkpoint(format!("unknown band code {code}")))?;
        bands.push(band);
    }
    let set = BandSet::new(&bands).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut cloud = GaussianCloud::empty(set);
    let stride = cloud.sh_stride();
    for _ in 0..count {
        cloud.means.push(Vector3::new(r.f32()?, r.f32()?, r.f32()?));
        cloud.rotations.push(Vector4::new(r.f32()?, r.f32()?, r.f32()?, r.f32()?));
        cloud.log_scales.push(Vector3::new(r.f32()?, r.f32()?, r.f32()?));
        cloud.logit_opacities.push(r.f32()?);
        for _ in 0..stride {
            let v = r.f32()?;
            cloud.sh.push(v);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(cloud)
}

pub fn save(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    fs::write(path, encode(cloud))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GaussianCloud> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Primitive;

    fn sample(bands: BandSet) -> GaussianCloud {
        let mut c = GaussianCloud::empty(bands);
        let channels = c.channels();
        for i in 0..3 {
            let f = i as f64;
            c.push(Primitive {
                mean: Vector3::new(f, -f, 0.5),
                rotation: Vector4::new(1.0, 0.0, 0.25 * f, 0.0),
                log_scale: Vector3::new(-1.0, -2.0, -3.0),
                logit_opacity: 0.75,
                sh: (0..channels * 16).map(|k| k as f64 * 0.125).collect(),
            });
        }
        c
    }

    #[test]
    fn roundtrip_of_f32_exact_values() {
        for bands in [BandSet::all(), BandSet::single(Band::Nir)] {
            let c = sample(bands);
            let bytes = encode(&c);
            assert_eq!(&bytes[..4], b"MSPL");
            let back = decode(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn record_size() {
        let c = sample(BandSet::all());
        let header = 4 + 4 + 4 + 1 + 5;
        assert_eq!(encode(&c).len(), header + 3 * (11 + 7 * 16) * 4);
    }

    #[test]
    fn empty_cloud() {
        let c = GaussianCloud::empty(BandSet::all());
        assert_eq!(decode(&encode(&c)).unwrap().len(), 0);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode(&sample(BandSet::all()));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
