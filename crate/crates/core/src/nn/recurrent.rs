//! Convolutional recurrent units over time and cascade iterations.

use candle_core::Tensor;

use super::layers::{conv_seq, fold_time, unfold_time, Conv2d};
use super::params::Builder;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// `h_t = ReLU(conv_x(x_t) + conv_t(h_{t∓1}) + conv_i(h_iter_t))`.
///
/// The iteration branch is only built for units that receive a hidden
/// state from a previous cascade.
#[derive(Debug, Clone)]
pub struct Crnnti {
    pub conv_x: Conv2d,
    pub conv_t: Conv2d,
    pub conv_i: Option<Conv2d>,
    pub direction: Direction,
}

impl Crnnti {
    pub fn new(b: &mut Builder, channels: usize, dilation: usize, direction: Direction, with_iter: bool) -> Result<Self> {
        let conv_i = if with_iter {
            Some(Conv2d::new(&mut b.sub("conv_i"), channels, channels, dilation, 1, false)?)
        } else {
            None
        };
        Ok(Self {
            conv_x: Conv2d::new(&mut b.sub("conv_x"), channels, channels, dilation, 1, true)?,
            conv_t: Conv2d::new(&mut b.sub("conv_t"), channels, channels, dilation, 1, false)?,
            conv_i,
            direction,
        })
    }

    /// One recurrence step on single-frame tensors `[B,C,H,W]`.
    pub fn step(&self, x_t: &Tensor, h_prev_time: &Tensor, h_prev_iter: Option<&Tensor>) -> Result<Tensor> {
        let mut pre = (self.conv_x.forward(x_t)? + self.conv_t.forward(h_prev_time)?)?;
        if let (Some(conv), Some(h)) = (&self.conv_i, h_prev_iter) {
            pre = (pre + conv.forward(h)?)?;
        }
        Ok(pre.relu()?)
    }

    /// Runs the unit over a `[B,T,C,H,W]` sequence. `h_iter` is the same
    /// level's output from the previous cascade, if any.
    pub fn forward(&self, x: &Tensor, h_iter: Option<&Tensor>) -> Result<Tensor> {
        let (b, t, ..) = x.dims5()?;
        if let Some(h) = h_iter {
            if h.dims() != x.dims() {
                return Err(Error::Shape {
                    expected: x.dims().to_vec(),
                    actual: h.dims().to_vec(),
                });
            }
        }
        // input and iteration branches do not depend on the recurrence, so
        // they are evaluated for all frames at once
        let mut drive = conv_seq(&self.conv_x, x)?;
        if let (Some(conv), Some(h)) = (&self.conv_i, h_iter) {
            drive = (drive + unfold_time(&conv.forward(&fold_time(h)?)?, b, t)?)?;
        }
        let order: Vec<usize> = match self.direction {
            Direction::Forward => (0..t).collect(),
            Direction::Backward => (0..t).rev().collect(),
        };
        let mut outputs: Vec<Option<Tensor>> = vec![None; t];
        let mut prev: Option<Tensor> = None;
        for &f in &order {
            let d = drive.narrow(1, f, 1)?.squeeze(1)?;
            let pre = match &prev {
                Some(h) => (d + self.conv_t.forward(h)?)?,
                None => d,
            };
            let h = pre.relu()?;
            outputs[f] = Some(h.clone());
            prev = Some(h);
        }
        let frames: Vec<Tensor> = outputs.into_iter().map(|o| o.expect("every frame visited")).collect();
        Ok(Tensor::stack(&frames, 1)?)
    }
}

/// Forward and backward units with independent weights; outputs summed.
#[derive(Debug, Clone)]
pub struct Bcrnnti {
    pub forward_unit: Crnnti,
    pub backward_unit: Crnnti,
}

impl Bcrnnti {
    pub fn new(b: &mut Builder, channels: usize, dilation: usize, with_iter: bool) -> Result<Self> {
        Ok(Self {
            forward_unit: Crnnti::new(&mut b.sub("fwd"), channels, dilation, Direction::Forward, with_iter)?,
            backward_unit: Crnnti::new(&mut b.sub("bwd"), channels, dilation, Direction::Backward, with_iter)?,
        })
    }

    pub fn forward(&self, x: &Tensor, h_iter: Option<&Tensor>) -> Result<Tensor> {
        Ok((self.forward_unit.forward(x, h_iter)? + self.backward_unit.forward(x, h_iter)?)?)
    }
}
