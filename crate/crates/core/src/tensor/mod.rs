//! Dense 4-D tensors and a reverse-mode autodiff tape.
//!
//! Values are stored NCHW, row-major, in 32-bit floats. A [`Tape`] records
//! every forward op together with the inputs its backward rule needs;
//! [`Tape::backward`] walks it in reverse and accumulates gradients into the
//! [`ParamStore`] that owns the trainable parameters.

mod conv;
mod params;
mod tape;

pub use conv::{conv2d_forward, conv_transpose2d_forward, conv_transpose_output_extent};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{softplus, Gradients, Tape, Var};

use crate::error::{Error, Result};

pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("data", numel, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    /// A `[1, n, 1, 1]` tensor, the layout used for per-channel vectors.
    pub fn vector(values: &[f32]) -> Self {
        Tensor {
            shape: [1, values.len(), 1, 1],
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((b * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(b, c, h, w)]
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch item `b` as a standalone `[1, C, H, W]` tensor.
    pub fn batch_item(&self, b: usize) -> Tensor {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Stacks equally-shaped `[1, C, H, W]` tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("cannot stack an empty list".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape[1..] != first.shape[1..] || t.shape[0] != 1 {
                return Err(Error::dim("channels", c, t.shape[1]));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [items.len(), c, h, w],
            data,
        })
    }

    /// Crops the spatial extent to `[h, w]` from the top-left corner.
    pub fn crop(&self, h: usize, w: usize) -> Tensor {
        let [b, c, hs, ws] = self.shape;
        assert!(h <= hs && w <= ws, "crop larger than tensor");
        let mut out = Tensor::zeros([b, c, h, w]);
        for bc in 0..b * c {
            for y in 0..h {
                let src = (bc * hs + y) * ws;
                let dst = (bc * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    /// Replication padding on the bottom and right edges.
    pub fn pad_replicate(&self, pad_h: usize, pad_w: usize) -> Tensor {
        let [b, c, hs, ws] = self.shape;
        let (h, w) = (hs + pad_h, ws + pad_w);
        let mut out = Tensor::zeros([b, c, h, w]);
        for bc in 0..b * c {
            for y in 0..h {
                let sy = y.min(hs - 1);
                for x in 0..w {
                    let sx = x.min(ws - 1);
                    out.data[(bc * h + y) * w + x] = self.data[(bc * hs + sy) * ws + sx];
                }
            }
        }
        out
    }
}
