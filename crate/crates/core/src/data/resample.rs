use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Linear interpolation of an `[L_in, F]` matrix onto `l_ts` evenly spaced
/// points along time; both endpoints are kept.
pub fn resample_to_length(x: &Tensor, l_ts: usize) -> Result<Tensor> {
    if x.rank() != 2 || x.rows() < 2 {
        return Err(Error::shape(
            "resample_to_length",
            format!("need at least 2 time steps, got {:?}", x.shape()),
        ));
    }
    if l_ts < 2 {
        return Err(Error::Config(format!("target length must be >= 2, got {l_ts}")));
    }
    let (l_in, f) = (x.rows(), x.cols());
    if l_in == l_ts {
        return Ok(x.clone());
    }
    let mut out = vec![0.0; l_ts * f];
    let step = (l_in - 1) as f64 / (l_ts - 1) as f64;
    for j in 0..l_ts {
        let pos = j as f64 * step;
        let lo = (pos.floor() as usize).min(l_in - 2);
        let frac = pos - lo as f64;
        for c in 0..f {
            let (a, b) = (x.get2(lo, c), x.get2(lo + 1, c));
            out[j * f + c] = if frac == 0.0 { a } else if frac == 1.0 { b } else { a + frac * (b - a) };
        }
    }
    Tensor::matrix(l_ts, f, out)
}
