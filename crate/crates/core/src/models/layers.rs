//! Parameterized building blocks shared by the world models.

use rand::Rng;
use slotlab_tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::Result;

/// Fully connected layer, weights `[out, in]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    /// Uniform fan-in initialization `U(-1/√in, 1/√in)`, or all zeros.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fin: usize,
        fout: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let (w, b) = if zero {
            (Tensor::zeros(&[fout, fin]), Tensor::zeros(&[fout]))
        } else {
            let bound = 1.0 / (fin as f64).sqrt();
            (
                Tensor::uniform(&[fout, fin], bound, rng),
                Tensor::uniform(&[fout], bound, rng),
            )
        };
        Self {
            w: store.add(format!("{name}.weight"), w),
            b: store.add(format!("{name}.bias"), b),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.linear(x, p[self.w], Some(p[self.b]))?)
    }
}

/// `x → linear → layer_norm → relu → linear`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HiddenMlp {
    pub fc1: Dense,
    pub gain: ParamId,
    pub offset: ParamId,
    pub fc2: Dense,
}

impl HiddenMlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        [fin, hidden, fout]: [usize; 3],
        zero_output: bool,
        rng: &mut R,
    ) -> Self {
        let fc1 = Dense::new(store, &format!("{name}.fc1"), fin, hidden, false, rng);
        let gain = store.add(format!("{name}.ln.gain"), Tensor::full(&[hidden], T::one()));
        let offset = store.add(format!("{name}.ln.offset"), Tensor::zeros(&[hidden]));
        let fc2 = Dense::new(store, &format!("{name}.fc2"), hidden, fout, zero_output, rng);
        Self {
            fc1,
            gain,
            offset,
            fc2,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.layer_norm(h, p[self.gain], p[self.offset])?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, p, h)
    }
}

/// 2-d convolution with bias, kernel `[out, in, k, k]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Self {
            w: store.add(
                format!("{name}.weight"),
                Tensor::uniform(&[cout, cin, kernel, kernel], bound, rng),
            ),
            b: store.add(format!("{name}.bias"), Tensor::uniform(&[cout], bound, rng)),
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.padding)?)
    }
}

/// Transposed convolution with bias, kernel `[in, out, k, k]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvTranspose {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvTranspose {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cout * kernel * kernel) as f64).sqrt();
        Self {
            w: store.add(
                format!("{name}.weight"),
                Tensor::uniform(&[cin, cout, kernel, kernel], bound, rng),
            ),
            b: store.add(format!("{name}.bias"), Tensor::uniform(&[cout], bound, rng)),
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv_transpose2d(x, p[self.w], Some(p[self.b]), self.stride, 0)?)
    }
}
