//! Central finite differences, used as the independent oracle for every
//! backward rule.

use super::{no_grad, Tensor};

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i` of `x`.
pub fn finite_difference_oracle<F>(mut f: F, x: &Tensor, step: f32) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    no_grad(|| {
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += step;
            let mut minus = base.clone();
            minus[i] -= step;
            // Divide by the perturbation f32 actually realized, not the nominal 2h.
            let span = (plus[i] - minus[i]) as f64;
            let fp = f(&Tensor::from_vec(x.shape(), plus).expect("same shape"));
            let fm = f(&Tensor::from_vec(x.shape(), minus).expect("same shape"));
            grad.push(((fp - fm) / span) as f32);
        }
    });
    Tensor::from_vec(x.shape(), grad).expect("same shape")
}

/// Same oracle, but perturbs the values of an existing tensor in place (for
/// parameters buried inside a model) and restores them afterwards. `indices`
/// selects which coordinates to probe; `None` probes all of them.
pub fn finite_difference_in_place<F>(mut f: F, param: &Tensor, step: f32, indices: Option<&[usize]>) -> Vec<(usize, f32)>
where
    F: FnMut() -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..param.numel()).collect();
            &all
        }
    };
    no_grad(|| {
        indices
            .iter()
            .map(|&i| {
                let orig = param.data()[i];
                let (hi, lo) = (orig + step, orig - step);
                param.data_mut()[i] = hi;
                let fp = f();
                param.data_mut()[i] = lo;
                let fm = f();
                param.data_mut()[i] = orig;
                (i, ((fp - fm) / (hi - lo) as f64) as f32)
            })
            .collect()
    })
}

/// Largest coordinate-wise `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f32], b: &[f32], floor: f32) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f32::max)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`: the error of a whole gradient tensor relative
/// to its size. Robust to the f32 rounding noise that dominates coordinates
/// whose true derivative is near zero.
pub fn relative_norm_error(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(&x, &y)| x as f64 - y as f64));
    let scale = norm(&mut a.iter().map(|&x| x as f64)).max(norm(&mut b.iter().map(|&x| x as f64)));
    if scale == 0.0 {
        0.0
    } else {
        (diff / scale) as f32
    }
}
