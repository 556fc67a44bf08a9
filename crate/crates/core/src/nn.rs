//! Parameterised layers built on the autodiff tape.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeom, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor_io::{read_matrix, write_matrix};

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Weight of shape `(cout, cin * k * k)` with bias `(cout, 1)`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        (cin, cout): (usize, usize),
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        Self {
            w: ps.add(format!("{name}.weight"), uniform(cout, fan_in, bound, rng)),
            b: ps.add(format!("{name}.bias"), Matrix::zeros(cout, 1)),
            kernel,
            stride,
        }
    }

    pub fn forward<'p>(&self, t: &mut Tape<'p>, ps: &'p ParamSet, x: Var, height: usize, width: usize) -> Var {
        let (w, b) = (t.param(ps, self.w), t.param(ps, self.b));
        let geom = ConvGeom {
            height,
            width,
            kernel: self.kernel,
            stride: self.stride,
        };
        t.conv2d(x, w, b, geom)
    }
}

/// Row-vector linear map: `(n, in) -> (n, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, din: usize, dout: usize, bias: bool, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = gain * (3.0 / din as f64).sqrt();
        Self {
            w: ps.add(format!("{name}.weight"), uniform(din, dout, bound, rng)),
            b: bias.then(|| ps.add(format!("{name}.bias"), Matrix::zeros(1, dout))),
        }
    }

    pub fn forward<'p>(&self, t: &mut Tape<'p>, ps: &'p ParamSet, x: Var) -> Var {
        let w = t.param(ps, self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(ps, b);
                t.add_row_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Matrix::filled(channels, 1, 1.0)),
            beta: ps.add(format!("{name}.beta"), Matrix::zeros(channels, 1)),
            groups,
        }
    }

    pub fn forward<'p>(&self, t: &mut Tape<'p>, ps: &'p ParamSet, x: Var) -> Var {
        let (g, b) = (t.param(ps, self.gamma), t.param(ps, self.beta));
        t.group_norm(x, g, b, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Matrix::filled(1, width, 1.0)),
            beta: ps.add(format!("{name}.beta"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward<'p>(&self, t: &mut Tape<'p>, ps: &'p ParamSet, x: Var) -> Var {
        let (g, b) = (t.param(ps, self.gamma), t.param(ps, self.beta));
        t.layer_norm(x, g, b)
    }
}

/// Writes one tensor file per parameter, named after the parameter.
pub fn save_params(dir: impl AsRef<Path>, ps: &ParamSet) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, m) in ps.iter() {
        write_matrix(dir.join(format!("{name}.tns")), m)?;
    }
    Ok(())
}

/// Overwrites every parameter of `ps` from `dir`, checking shapes.
pub fn load_params(dir: impl AsRef<Path>, ps: &mut ParamSet) -> Result<()> {
    let dir = dir.as_ref();
    for id in ps.ids().collect::<Vec<_>>() {
        let name = ps.name(id).to_string();
        let m = read_matrix(dir.join(format!("{name}.tns")))?;
        let expected = ps.get(id).shape();
        if m.shape() != expected {
            return Err(Error::Integrity(format!(
                "parameter {name} has shape {:?}, architecture expects {expected:?}",
                m.shape()
            )));
        }
        if !m.is_finite() {
            return Err(Error::Integrity(format!("parameter {name} holds non-finite values")));
        }
        *ps.get_mut(id) = m;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn params_round_trip_through_a_directory() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        Conv::new(&mut ps, "c", (2, 3), 3, 1, 1.0, &mut rng);
        Linear::new(&mut ps, "l", 4, 5, true, 1.0, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        save_params(dir.path(), &ps).unwrap();

        let mut other = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Conv::new(&mut other, "c", (2, 3), 3, 1, 1.0, &mut rng);
        Linear::new(&mut other, "l", 4, 5, true, 1.0, &mut rng);
        load_params(dir.path(), &mut other).unwrap();
        for ((_, a), (_, b)) in ps.iter().zip(other.iter()) {
            assert_eq!(a, b);
        }

        let mut wrong = ParamSet::new();
        Conv::new(&mut wrong, "c", (3, 3), 3, 1, 1.0, &mut rng);
        assert!(matches!(load_params(dir.path(), &mut wrong), Err(Error::Integrity(_))));
    }
}
