//! Dense tensors, small feed-forward networks and reverse-mode
//! differentiation with respect to both parameters and inputs.

mod activation;
mod mlp;
mod tape;

pub use activation::{Activation, MAX_DERIVATIVE_ORDER};
pub use mlp::{time_embedding, Mlp, NetSpec};
pub use tape::{Tape, Var};

use crate::Result;

/// Row-major dense matrix; batches hold one sample per row.
pub type Mat = ndarray::Array2<f64>;

/// Value and gradient of a scalar function with respect to its input.
pub fn grad_input<F>(x: &Mat, f: F) -> Result<(f64, Mat)>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(xv)?;
    let g = tape.gradient(y, &[xv]);
    Ok((y.item(), (*g[0].value()).clone()))
}

/// Value and gradient of a scalar function with respect to a parameter list.
pub fn grad_params<F>(params: &[Mat], f: F) -> Result<(f64, Vec<Mat>)>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let y = f(&leaves)?;
    let grads = tape
        .gradient(y, &leaves)
        .into_iter()
        .map(|g| (*g.value()).clone())
        .collect();
    Ok((y.item(), grads))
}

/// Central finite-difference gradient of `f` at `x`, entry by entry.
///
/// Independent of the tape; used to validate it.
pub fn central_difference(x: &Mat, h: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut grad = Mat::zeros(x.dim());
    let mut probe = x.clone();
    for (idx, g) in grad.iter_mut().enumerate() {
        let orig = x.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        *g = (fp - fm) / (2.0 * h);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over a list of tensors.
pub fn relative_error(a: &[Mat], b: &[Mat], floor: f64) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        diff += (x - y).mapv(|v| v * v).sum();
        na += x.mapv(|v| v * v).sum();
        nb += y.mapv(|v| v * v).sum();
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(floor)
}
