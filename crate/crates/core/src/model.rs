//! Linear encoder/head model `x ↦ z = Wᵀx ↦ logits = Uᵀz (+ b)`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_model::BlockLayout;
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Zeros,
    ScaledNormal { std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitDescriptor {
    pub init: Init,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// `W`, `m × d`.
    pub encoder: Matrix,
    /// `U`, `d × K`.
    pub head: Matrix,
    pub head_bias: Option<Vec<f64>>,
    /// When set, `W = I` and is never updated.
    pub identity_encoder: bool,
    pub layout: BlockLayout,
    pub init: InitDescriptor,
}

fn fill(rows: usize, cols: usize, init: Init, seed: u64, tag: u64) -> Matrix {
    match init {
        Init::Zeros => Matrix::zeros(rows, cols),
        Init::ScaledNormal { std } => {
            let mut r = rng::stream(seed, &[tag]);
            let data = (0..rows * cols).map(|_| std * r.standard_normal()).collect();
            Matrix::from_vec(rows, cols, data).expect("sized")
        }
    }
}

const STREAM_ENCODER: u64 = 0x454E_4300;
const STREAM_HEAD: u64 = 0x4845_4144;

/// Encoder and head both initialized by `init`, each from its own stream.
pub fn init_model(layout: BlockLayout, d: usize, k: usize, init: Init, seed: u64) -> Result<LinearModel> {
    let m = layout.total();
    if m == 0 || d == 0 || k == 0 {
        return Err(Error::arg("shape", format!("m, d, K must be positive (got {m}, {d}, {k})")));
    }
    if let Init::ScaledNormal { std } = init {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::arg("init", "std must be finite and non-negative"));
        }
    }
    Ok(LinearModel {
        encoder: fill(m, d, init, seed, STREAM_ENCODER),
        head: fill(d, k, init, seed, STREAM_HEAD),
        head_bias: None,
        identity_encoder: false,
        layout,
        init: InitDescriptor { init, seed },
    })
}

/// Fixed identity encoder (`d = m`); only the head is trainable.
pub fn init_identity_model(layout: BlockLayout, k: usize, head_init: Init, seed: u64) -> Result<LinearModel> {
    let mut model = init_model(layout, layout.total(), k, head_init, seed)?;
    model.encoder = Matrix::identity(layout.total());
    model.identity_encoder = true;
    Ok(model)
}

impl LinearModel {
    pub fn input_dim(&self) -> usize {
        self.encoder.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.head.cols()
    }

    pub fn with_head_bias(mut self) -> Self {
        self.head_bias = Some(vec![0.0; self.num_classes()]);
        self
    }

    /// `(z, logits)` for the rows of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "features have {} columns, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let z = if self.identity_encoder {
            x.clone()
        } else {
            x.matmul(&self.encoder)?
        };
        let mut logits = z.matmul(&self.head)?;
        if let Some(b) = &self.head_bias {
            for r in 0..logits.rows() {
                for (l, bk) in logits.row_mut(r).iter_mut().zip(b) {
                    *l += bk;
                }
            }
        }
        Ok((z, logits))
    }

    /// Trainable parameters, flattened as `[W (unless identity), U, b?]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        if !self.identity_encoder {
            p.extend_from_slice(self.encoder.as_slice());
        }
        p.extend_from_slice(self.head.as_slice());
        if let Some(b) = &self.head_bias {
            p.extend_from_slice(b);
        }
        p
    }

    pub fn num_params(&self) -> usize {
        let enc = if self.identity_encoder { 0 } else { self.encoder.as_slice().len() };
        enc + self.head.as_slice().len() + self.head_bias.as_ref().map_or(0, Vec::len)
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters for a model with {}",
                p.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        if !self.identity_encoder {
            let n = self.encoder.as_slice().len();
            self.encoder.as_mut_slice().copy_from_slice(&p[..n]);
            off = n;
        }
        let n = self.head.as_slice().len();
        self.head.as_mut_slice().copy_from_slice(&p[off..off + n]);
        off += n;
        if let Some(b) = &mut self.head_bias {
            b.copy_from_slice(&p[off..]);
        }
        Ok(())
    }

    pub fn encoder_norm(&self) -> f64 {
        self.encoder.frobenius_norm()
    }

    pub fn head_norm(&self) -> f64 {
        self.head.frobenius_norm()
    }

    /// Text snapshot: `#`-prefixed header lines naming each tensor and its
    /// shape, followed by its rows as tab-separated shortest round-trip floats.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let l = self.layout;
        writeln!(w, "# paircfr-model\tv1")?;
        writeln!(w, "# layout\t{}\t{}\t{}", l.dim_r1, l.dim_r2, l.dim_s)?;
        writeln!(w, "# identity_encoder\t{}", self.identity_encoder)?;
        writeln!(w, "# init\t{}", serde_json::to_string(&self.init).expect("plain data"))?;
        let mut tensor = |name: &str, m: &Matrix| -> std::io::Result<()> {
            writeln!(w, "# {name}\t{}\t{}", m.rows(), m.cols())?;
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(f64::to_string).collect();
                writeln!(w, "{}", row.join("\t"))?;
            }
            Ok(())
        };
        tensor("encoder", &self.encoder)?;
        tensor("head", &self.head)?;
        if let Some(b) = &self.head_bias {
            tensor("bias", &Matrix::from_vec(1, b.len(), b.clone()).expect("sized"))?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("truncated model snapshot".into()))?
                .map_err(|e| Error::io("reading model snapshot", e))
        };
        let bad = |what: &str| Error::Parse(format!("model snapshot: {what}"));
        if next()? != "# paircfr-model\tv1" {
            return Err(bad("unknown header"));
        }
        let dims: Vec<usize> = next()?
            .strip_prefix("# layout\t")
            .ok_or_else(|| bad("layout"))?
            .split('\t')
            .map(|v| v.parse().map_err(|_| bad("layout")))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(bad("layout"));
        }
        let identity_encoder = match next()?.strip_prefix("# identity_encoder\t") {
            Some("true") => true,
            Some("false") => false,
            _ => return Err(bad("identity_encoder")),
        };
        let init: InitDescriptor =
            serde_json::from_str(next()?.strip_prefix("# init\t").ok_or_else(|| bad("init"))?)?;
        let mut read_tensor = |name: &str| -> Result<Option<Matrix>> {
            let header = match next() {
                Ok(h) => h,
                Err(_) if name == "bias" => return Ok(None),
                Err(e) => return Err(e),
            };
            let rest = header
                .strip_prefix(&format!("# {name}\t"))
                .ok_or_else(|| bad(name))?;
            let (rows, cols) = rest.split_once('\t').ok_or_else(|| bad(name))?;
            let (rows, cols): (usize, usize) = (
                rows.parse().map_err(|_| bad(name))?,
                cols.parse().map_err(|_| bad(name))?,
            );
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                for v in next()?.split('\t') {
                    data.push(v.parse::<f64>().map_err(|_| bad(name))?);
                }
            }
            Matrix::from_vec(rows, cols, data).map(Some)
        };
        let encoder = read_tensor("encoder")?.ok_or_else(|| bad("encoder"))?;
        let head = read_tensor("head")?.ok_or_else(|| bad("head"))?;
        let head_bias = read_tensor("bias")?.map(Matrix::into_vec);
        let layout = BlockLayout::new(dims[0], dims[1], dims[2])?;
        if encoder.rows() != layout.total() || head.rows() != encoder.cols() {
            return Err(bad("inconsistent shapes"));
        }
        Ok(Self {
            encoder,
            head,
            head_bias,
            identity_encoder,
            layout,
            init,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_snapshot(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_snapshot(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> BlockLayout {
        BlockLayout::new(2, 2, 2).unwrap()
    }

    #[test]
    fn zeros_init_is_all_zero() {
        let m = init_model(layout(), 3, 2, Init::Zeros, 1).unwrap();
        assert!(m.params().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = init_model(layout(), 3, 2, Init::ScaledNormal { std: 0.1 }, 5).unwrap();
        let b = init_model(layout(), 3, 2, Init::ScaledNormal { std: 0.1 }, 5).unwrap();
        let c = init_model(layout(), 3, 2, Init::ScaledNormal { std: 0.1 }, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn scaled_normal_std() {
        let m = init_model(BlockLayout::new(100, 0, 0).unwrap(), 100, 1, Init::ScaledNormal { std: 0.01 }, 3)
            .unwrap();
        let p = m.encoder.as_slice();
        let n = p.len() as f64;
        let mean = p.iter().sum::<f64>() / n;
        let sd = (p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.01).abs() < 0.05 * 0.01, "sd {sd}");
    }

    #[test]
    fn identity_forward_returns_features() {
        let l = BlockLayout::new(3, 0, 0).unwrap();
        let mut m = init_identity_model(l, 3, Init::Zeros, 0).unwrap();
        m.head = Matrix::identity(3);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 4.0]]).unwrap();
        let (z, logits) = m.forward(&x).unwrap();
        assert_eq!(z, x);
        assert_eq!(logits, x);
        assert_eq!(m.num_params(), 9);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = init_model(layout(), 3, 2, Init::Zeros, 1).unwrap();
        assert!(m.forward(&Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn params_roundtrip() {
        let mut m = init_model(layout(), 3, 2, Init::ScaledNormal { std: 1.0 }, 2)
            .unwrap()
            .with_head_bias();
        let mut p = m.params();
        p.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        m.set_params(&p).unwrap();
        assert_eq!(m.params(), p);
        assert_eq!(m.head_bias.as_ref().unwrap(), &vec![24.0, 25.0]);
    }

    #[test]
    fn snapshot_roundtrip() {
        let m = init_model(layout(), 3, 2, Init::ScaledNormal { std: 0.3 }, 8)
            .unwrap()
            .with_head_bias();
        let mut buf = Vec::new();
        m.write_snapshot(&mut buf).unwrap();
        let back = LinearModel::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let m = init_model(layout(), 3, 2, Init::Zeros, 8).unwrap();
        let mut buf = Vec::new();
        m.write_snapshot(&mut buf).unwrap();
        assert_eq!(LinearModel::read_snapshot(buf.as_slice()).unwrap(), m);
    }
}
