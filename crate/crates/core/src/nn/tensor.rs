use super::ops::Act;
use crate::error::{Error, Result};

/// Dense parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "{} values do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub(crate) fn scaled(mut self, k: f32) -> Self {
        self.data.iter_mut().for_each(|v| *v *= k);
        self
    }
}

/// Batch of images in `N × C × H × W` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn image(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.h * self.w;
        let start = (n * self.c + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn image_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let hw = self.h * self.w;
        let start = (n * self.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub(crate) fn to_channel_major(&self) -> Act {
        let mut act = Act::zeros(self.c, self.n, self.h, self.w);
        let hw = self.h * self.w;
        for n in 0..self.n {
            for c in 0..self.c {
                let dst = c * act.plane() + n * hw;
                act.data[dst..dst + hw].copy_from_slice(self.image(n, c));
            }
        }
        act
    }

    pub(crate) fn from_channel_major(act: &Act) -> Self {
        let mut t = Tensor4::zeros(act.n, act.c, act.h, act.w);
        let hw = act.hw();
        for n in 0..act.n {
            for c in 0..act.c {
                let src = c * act.plane() + n * hw;
                t.image_mut(n, c).copy_from_slice(&act.data[src..src + hw]);
            }
        }
        t
    }
}
