use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::normal;

/// Low-rank residual `B A` on one linear layer (`rows x cols`). `B` starts
/// at zero so a fresh adapter leaves the layer unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    pub layer: String,
    pub rows: usize,
    pub cols: usize,
    /// `rank x cols`, row-major.
    pub a: Vec<f64>,
    /// `rows x rank`, row-major.
    pub b: Vec<f64>,
}

/// A set of adapter pairs over the layers of a frozen base backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub pairs: Vec<AdapterPair>,
}

impl AdapterPair {
    fn new(layer: &str, rows: usize, cols: usize, rank: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (cols as f64).sqrt();
        Self {
            layer: layer.to_string(),
            rows,
            cols,
            a: (0..rank * cols).map(|_| s * normal(rng)).collect(),
            b: vec![0.0; rows * rank],
        }
    }

    pub fn rank(&self) -> usize {
        self.a.len() / self.cols
    }

    /// Adds `B (A x)` to `out` and returns `A x` for the backward pass.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) -> Vec<f64> {
        let r = self.rank();
        let ax: Vec<f64> = (0..r)
            .map(|k| self.a[k * self.cols..(k + 1) * self.cols].iter().zip(x).map(|(a, v)| a * v).sum())
            .collect();
        if self.b.iter().any(|&v| v != 0.0) {
            for (i, o) in out.iter_mut().enumerate() {
                let row = &self.b[i * r..(i + 1) * r];
                *o += row.iter().zip(&ax).map(|(b, v)| b * v).sum::<f64>();
            }
        }
        ax
    }

    /// Accumulates `dA`, `dB` and (optionally) the input gradient.
    pub fn backward(
        &self,
        x: &[f64],
        ax: &[f64],
        dout: &[f64],
        da: &mut [f64],
        db: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        let r = self.rank();
        // bt_d = B^T dout
        let mut bt_d = vec![0.0; r];
        for (i, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &self.b[i * r..(i + 1) * r];
            for k in 0..r {
                bt_d[k] += row[k] * d;
                db[i * r + k] += d * ax[k];
            }
        }
        for k in 0..r {
            for (j, &xv) in x.iter().enumerate() {
                da[k * self.cols + j] += bt_d[k] * xv;
            }
        }
        if let Some(dx) = dx {
            for k in 0..r {
                let row = &self.a[k * self.cols..(k + 1) * self.cols];
                for (j, a) in row.iter().enumerate() {
                    dx[j] += a * bt_d[k];
                }
            }
        }
    }
}

impl LowRankAdapter {
    /// One pair per `(name, rows, cols)` layer.
    pub fn new(layers: &[(&str, usize, usize)], rank: usize, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("adapter rank must be >= 1"));
        }
        for &(name, rows, cols) in layers {
            if rank > rows.min(cols) {
                return Err(Error::invalid(format!(
                    "adapter rank {rank} exceeds the width of layer '{name}' ({rows}x{cols})"
                )));
            }
        }
        Ok(Self {
            rank,
            pairs: layers.iter().map(|&(n, r, c)| AdapterPair::new(n, r, c, rank, rng)).collect(),
        })
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.pairs.iter().flat_map(|p| [vec![0.0; p.a.len()], vec![0.0; p.b.len()]]).collect()
    }

    /// Flat tensors in `[a0, b0, a1, b1, ...]` order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.pairs.iter_mut().flat_map(|p| [p.a.as_mut_slice(), p.b.as_mut_slice()]).collect()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.pairs.iter().flat_map(|p| [p.a.as_slice(), p.b.as_slice()]).collect()
    }
}
