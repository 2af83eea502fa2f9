//! Binary checkpoints holding a network and a CRF model.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CCRF"  u32 version
//! u32 label count
//! u32 input channels, u32 layer count, per layer: u8 kind + u32 fields
//!     (0 conv: kernel, in, out; 1 relu; 2 max-pool: kernel; 3 softmax)
//! u64 parameter count, f64 values (per conv: weights then bias)
//! u32 class count, per class: i32 dx, i32 dy
//! u64 table value count, f64 values (class by class, row-major)
//! ```

use std::path::Path;

use crate::error::{CrfError, Result};
use crate::model::{GridCrfModel, LabelSpace, OffsetClass, PairwiseTable};
use crate::net::{LayerSpec, NetworkSpec, ParameterSet, UnaryNet};

pub const MAGIC: &[u8; 4] = b"CCRF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: UnaryNet,
    pub model: GridCrfModel,
}

impl Checkpoint {
    pub fn new(net: UnaryNet, model: GridCrfModel) -> Result<Self> {
        net.spec.validate_for(model.labels())?;
        Ok(Checkpoint { net, model })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.model.labels().count() as u32);
        let spec = &self.net.spec;
        put_u32(&mut out, spec.input_channels as u32);
        put_u32(&mut out, spec.layers.len() as u32);
        for layer in &spec.layers {
            match *layer {
                LayerSpec::Conv {
                    kernel_size,
                    in_channels,
                    out_channels,
                } => {
                    out.push(0);
                    for v in [kernel_size, in_channels, out_channels] {
                        put_u32(&mut out, v as u32);
                    }
                }
                LayerSpec::Relu => out.push(1),
                LayerSpec::MaxPool { kernel_size } => {
                    out.push(2);
                    put_u32(&mut out, kernel_size as u32);
                }
                LayerSpec::Softmax => out.push(3),
            }
        }
        out.extend_from_slice(&(self.net.params.len() as u64).to_le_bytes());
        for v in self.net.params.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, self.model.classes().len() as u32);
        for c in self.model.classes() {
            out.extend_from_slice(&c.dx.to_le_bytes());
            out.extend_from_slice(&c.dy.to_le_bytes());
        }
        let values: usize = self.model.tables().iter().map(|t| t.values().len()).sum();
        out.extend_from_slice(&(values as u64).to_le_bytes());
        for t in self.model.tables() {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CrfError::format("magic", "not a CCRF checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CrfError::format("version", format!("unsupported version {version}")));
        }
        let labels = LabelSpace::new(r.u32("label count")? as usize)
            .map_err(|_| CrfError::format("label count", "must be positive"))?;

        let input_channels = r.u32("input channels")? as usize;
        let n_layers = r.u32("layer count")? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let kind = r.take(1, "layer kind")?[0];
            layers.push(match kind {
                0 => LayerSpec::Conv {
                    kernel_size: r.u32("kernel size")? as usize,
                    in_channels: r.u32("in channels")? as usize,
                    out_channels: r.u32("out channels")? as usize,
                },
                1 => LayerSpec::Relu,
                2 => LayerSpec::MaxPool {
                    kernel_size: r.u32("kernel size")? as usize,
                },
                3 => LayerSpec::Softmax,
                k => return Err(CrfError::format("layer kind", format!("unknown kind {k}"))),
            });
        }
        let spec = NetworkSpec { input_channels, layers };
        spec.validate_for(labels)
            .map_err(|e| CrfError::format("network spec", e.to_string()))?;

        let mut params = ParameterSet::zeros(&spec);
        let n_params = r.u64("parameter count")?;
        if n_params != params.len() as u64 {
            return Err(CrfError::format(
                "parameter count",
                format!("spec needs {}, file has {n_params}", params.len()),
            ));
        }
        for p in params.iter_mut() {
            *p = r.f64("parameters")?;
        }

        let n_classes = r.u32("class count")? as usize;
        let mut classes = Vec::with_capacity(n_classes.min(1024));
        for _ in 0..n_classes {
            let dx = r.i32("offset class")?;
            let dy = r.i32("offset class")?;
            classes.push(OffsetClass::new(dx, dy).map_err(|e| CrfError::format("offset class", e.to_string()))?);
        }
        let l = labels.count();
        let n_values = r.u64("table value count")?;
        if n_values != (n_classes * l * l) as u64 {
            return Err(CrfError::format(
                "table value count",
                format!("expected {}, found {n_values}", n_classes * l * l),
            ));
        }
        let mut tables = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let values = (0..l * l).map(|_| r.f64("tables")).collect::<Result<Vec<_>>>()?;
            tables.push(PairwiseTable::from_values(labels, values)?);
        }
        if r.pos != bytes.len() {
            return Err(CrfError::format("trailer", format!("{} unexpected bytes", bytes.len() - r.pos)));
        }
        let model = GridCrfModel::with_tables(labels, classes, tables)
            .map_err(|e| CrfError::format("offset class", e.to_string()))?;
        Ok(Checkpoint {
            net: UnaryNet::new(spec, params)?,
            model,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CrfError::format(field, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        self.array(field).map(u32::from_le_bytes)
    }

    fn i32(&mut self, field: &str) -> Result<i32> {
        self.array(field).map(i32::from_le_bytes)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        self.array(field).map(u64::from_le_bytes)
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        self.array(field).map(f64::from_le_bytes)
    }
}
