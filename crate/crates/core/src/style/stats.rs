//! Captured style statistics and their `.nmsa` binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NMSA" | version u32 | fingerprint u64 | timestep u32 | layers u32
//! per layer: heads u32 | tokens u32 | head_dim u32
//!            keys   f32[heads·tokens·head_dim]
//!            values f32[heads·tokens·head_dim]
//!            mu     f32[heads·head_dim]
//!            sigma  f32[heads·head_dim]
//! style id: len u32 | utf-8 bytes
//! ```

use crate::denoiser::DenoiserConfig;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Tensor, SIGMA_FLOOR};

pub const MAGIC: [u8; 4] = *b"NMSA";
pub const FORMAT_VERSION: u32 = 1;

/// Keys, values and feature moments captured at one transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStatistics {
    keys: Tensor,
    values: Tensor,
    mu: Tensor,
    sigma: Tensor,
}

impl LayerStatistics {
    /// `keys`/`values` are `[heads, tokens, head_dim]`; `mu`/`sigma` are
    /// `[heads·head_dim]` with every sigma at least [`SIGMA_FLOOR`].
    pub fn new(keys: Tensor, values: Tensor, mu: Tensor, sigma: Tensor) -> Result<Self> {
        let [heads, tokens, head_dim] = match *keys.shape() {
            [h, n, d] => [h, n, d],
            _ => return Err(shape_err("LayerStatistics", format!("keys {:?}", keys.shape()))),
        };
        if values.shape() != keys.shape() {
            return Err(shape_err(
                "LayerStatistics",
                format!("keys {:?} vs values {:?}", keys.shape(), values.shape()),
            ));
        }
        if tokens == 0 {
            return Err(shape_err("LayerStatistics", "no style tokens"));
        }
        let dim = heads * head_dim;
        if mu.shape() != [dim] || sigma.shape() != [dim] {
            return Err(shape_err(
                "LayerStatistics",
                format!("moments {:?}/{:?}, expected [{dim}]", mu.shape(), sigma.shape()),
            ));
        }
        if sigma.data().iter().any(|&s| s.is_nan() || s < SIGMA_FLOOR) {
            return Err(Error::Format("sigma below floor".into()));
        }
        Ok(Self {
            keys,
            values,
            mu,
            sigma,
        })
    }

    pub fn heads(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.keys.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.keys.shape()[2]
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn sigma(&self) -> &Tensor {
        &self.sigma
    }

    /// `[tokens, head_dim]` keys of head `h`.
    pub fn head_keys(&self, h: usize) -> Tensor {
        head_slice(&self.keys, h)
    }

    pub fn head_values(&self, h: usize) -> Tensor {
        head_slice(&self.values, h)
    }
}

fn head_slice(t: &Tensor, h: usize) -> Tensor {
    let (n, d) = (t.shape()[1], t.shape()[2]);
    let data = t.data()[h * n * d..(h + 1) * n * d].to_vec();
    Tensor::new(&[n, d], data).expect("slice length matches")
}

/// Per-layer statistics captured from one noised style latent.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStatistics {
    fingerprint: u64,
    timestep: u32,
    style_id: String,
    layers: Vec<LayerStatistics>,
}

impl StyleStatistics {
    pub fn new(
        fingerprint: u64,
        timestep: u32,
        style_id: impl Into<String>,
        layers: Vec<LayerStatistics>,
    ) -> Self {
        Self {
            fingerprint,
            timestep,
            style_id: style_id.into(),
            layers,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Diffusion timestep the style latent was noised to before capture.
    pub fn timestep(&self) -> u32 {
        self.timestep
    }

    pub fn style_id(&self) -> &str {
        &self.style_id
    }

    pub fn layers(&self) -> &[LayerStatistics] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> Result<&LayerStatistics> {
        self.layers.get(l).ok_or_else(|| Error::OutOfRange {
            what: "layer",
            value: l.to_string(),
            range: format!("0..{}", self.layers.len()),
        })
    }

    /// Check that these statistics were captured with `config`.
    pub fn check_compatible(&self, config: &DenoiserConfig) -> Result<()> {
        let expected = config.fingerprint();
        if self.fingerprint != expected {
            return Err(Error::ConfigMismatch {
                expected,
                found: self.fingerprint,
            });
        }
        if self.layers.len() != config.layers {
            return Err(shape_err(
                "StyleStatistics",
                format!("{} layers, model has {}", self.layers.len(), config.layers),
            ));
        }
        for (l, s) in self.layers.iter().enumerate() {
            if s.heads() != config.heads || s.head_dim() != config.head_dim() {
                return Err(shape_err(
                    "StyleStatistics",
                    format!(
                        "layer {l}: {} heads x {} dims, model has {} x {}",
                        s.heads(),
                        s.head_dim(),
                        config.heads,
                        config.head_dim()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&self.timestep.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            for d in [l.heads(), l.tokens(), l.head_dim()] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for t in [&l.keys, &l.values, &l.mu, &l.sigma] {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&(self.style_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.style_id.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let fingerprint = r.u64()?;
        let timestep = r.u32()?;
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let heads = r.u32()? as usize;
            let tokens = r.u32()? as usize;
            let head_dim = r.u32()? as usize;
            let kv = heads
                .checked_mul(tokens)
                .and_then(|x| x.checked_mul(head_dim))
                .ok_or_else(|| Error::Format("layer dims overflow".into()))?;
            let keys = Tensor::new(&[heads, tokens, head_dim], r.f32s(kv)?)?;
            let values = Tensor::new(&[heads, tokens, head_dim], r.f32s(kv)?)?;
            let mu = Tensor::new(&[heads * head_dim], r.f32s(heads * head_dim)?)?;
            let sigma = Tensor::new(&[heads * head_dim], r.f32s(heads * head_dim)?)?;
            layers.push(LayerStatistics::new(keys, values, mu, sigma)?);
        }
        let id_len = r.u32()? as usize;
        let style_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::Format("style id is not utf-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            fingerprint,
            timestep,
            style_id,
            layers,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format("length overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
