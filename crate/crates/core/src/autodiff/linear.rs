use super::gemm::{gemm, Mat};
use super::{GradSink, Op, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

impl Tape {
    /// Affine map over the last axis: `y = x·wᵀ + b` with `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        ensure!(ws.len() == 2, Dimension, "linear weight must be 2-D, got {:?}", ws);
        let (dout, din) = (ws[0], ws[1]);
        ensure!(
            xs.last() == Some(&din),
            Dimension,
            "linear expects last extent {din}, input has shape {:?}",
            xs
        );
        if let Some(b) = b {
            ensure!(
                self.shape(b) == [dout],
                Dimension,
                "linear bias must have shape [{dout}], got {:?}",
                self.shape(b)
            );
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            1.0,
            Mat::new(self.value(x).data(), rows, din),
            Mat::new(self.value(w).data(), dout, din).t(),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }
}

pub(super) fn linear_backward(
    tape: &Tape,
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let ws = tape.shape(w);
    let (dout, din) = (ws[0], ws[1]);
    let xv = tape.value(x).data();
    let wv = tape.value(w).data();
    let rows = xv.len() / din;
    if let Some(dx) = sink.slot(x) {
        gemm(1.0, Mat::new(g, rows, dout), Mat::new(wv, dout, din), 1.0, dx);
    }
    if let Some(dw) = sink.slot(w) {
        gemm(1.0, Mat::new(g, rows, dout).t(), Mat::new(xv, rows, din), 1.0, dw);
    }
    if let Some(b) = b {
        if let Some(db) = sink.slot(b) {
            for row in g.chunks(dout) {
                db.iter_mut().zip(row).for_each(|(d, &gi)| *d += gi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 2.0]);
    }

    #[test]
    fn identity_weight_passes_through() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = tape.constant(Tensor::new(&[2, 2, 3], data.clone()).unwrap());
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
        assert_eq!(tape.shape(y), &[2, 2, 3]);
    }

    #[test]
    fn extent_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let w = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(matches!(tape.linear(x, w, None), Err(crate::Error::Dimension(_))));
    }
}
