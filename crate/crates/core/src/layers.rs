//! Parameter declarations and the small set of layers every model part
//! shares: linear maps, layer norm, 3x3x3 convolution and stride-`f`
//! transposed convolution over cubic token grids.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::volume::voxel_index;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    FanIn(usize),
    Zeros,
    Ones,
}

/// Ordered list of parameter declarations.
#[derive(Clone, Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.specs.push((name.into(), shape.to_vec(), init));
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.add(format!("{prefix}.weight"), &[fan_in, fan_out], Init::FanIn(fan_in));
        self.add(format!("{prefix}.bias"), &[fan_out], Init::Zeros);
    }

    pub fn linear_no_bias(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.add(format!("{prefix}.weight"), &[fan_in, fan_out], Init::FanIn(fan_in));
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.add(format!("{prefix}.gain"), &[dim], Init::Ones);
        self.add(format!("{prefix}.bias"), &[dim], Init::Zeros);
    }

    /// 3x3x3 convolution, stored as an im2col matrix `[27 cin, cout]`.
    pub fn conv3(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.linear(prefix, 27 * cin, cout);
    }

    /// Transposed convolution with kernel = stride = `f`.
    pub fn tconv(&mut self, prefix: &str, cin: usize, cout: usize, f: usize) {
        self.add(format!("{prefix}.weight"), &[cin, f * f * f * cout], Init::FanIn(cin));
        self.add(format!("{prefix}.bias"), &[cout], Init::Zeros);
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.specs.iter().map(|(n, _, _)| n.clone()).collect()
    }

    /// Initializes every declared tensor in declaration order.
    pub fn build<T: Real, R: Rng>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for (name, shape, init) in &self.specs {
            let t = match init {
                Init::FanIn(f) => uniform_fan_in(rng, shape, *f),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, T::one()),
            };
            store.insert(name.clone(), t);
        }
        store
    }

    /// Overrides the initializer of an already declared tensor.
    pub fn set_init(&mut self, name: &str, init: Init) {
        if let Some(spec) = self.specs.iter_mut().find(|(n, _, _)| n == name) {
            spec.2 = init;
        }
    }
}

pub fn linear<'g, T: Real>(g: &'g Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    x.matmul(w)?.add_row(b)
}

pub fn linear_no_bias<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var<'g, T>,
) -> Result<Var<'g, T>> {
    x.matmul(g.param(store, &format!("{prefix}.weight"))?)
}

pub fn layer_norm<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var<'g, T>,
    eps: f64,
) -> Result<Var<'g, T>> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    x.layer_norm(gain, bias, eps)
}

/// im2col indices for a zero-padded 3x3x3 neighbourhood on an `extent^3`
/// grid with `channels` features per cell.
pub fn im2col3_indices(extent: usize, channels: usize) -> Rc<[u32]> {
    let dims = [extent; 3];
    let e = extent as isize;
    let mut idx = Vec::with_capacity(extent.pow(3) * 27 * channels);
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                            let inside = (0..e).contains(&nx) && (0..e).contains(&ny) && (0..e).contains(&nz);
                            for c in 0..channels {
                                idx.push(if inside {
                                    (voxel_index(dims, nx as usize, ny as usize, nz as usize) * channels + c) as u32
                                } else {
                                    GATHER_ZERO
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// 3x3x3 convolution, stride 1, zero padding, on `[extent^3, cin]`.
pub fn conv3<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var<'g, T>,
    extent: usize,
) -> Result<Var<'g, T>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[0] != extent.pow(3) {
        return Err(Error::Dimension(format!("conv3 input {shape:?} on extent {extent}")));
    }
    let cin = shape[1];
    let cols = x.gather(&[shape[0], 27 * cin], im2col3_indices(extent, cin))?;
    linear(g, store, prefix, cols)
}

/// Indices rearranging `[extent^3, f^3 * cout]` into `[(f extent)^3, cout]`.
pub fn depth_to_space_indices(extent: usize, f: usize, cout: usize) -> Rc<[u32]> {
    let out_e = extent * f;
    let mut idx = Vec::with_capacity(out_e.pow(3) * cout);
    for z in 0..out_e {
        for y in 0..out_e {
            for x in 0..out_e {
                let tok = voxel_index([extent; 3], x / f, y / f, z / f);
                let sub = voxel_index([f; 3], x % f, y % f, z % f);
                for c in 0..cout {
                    idx.push((tok * f * f * f * cout + sub * cout + c) as u32);
                }
            }
        }
    }
    idx.into()
}

/// Transposed convolution with kernel = stride = `f`: `[E^3, cin]` to
/// `[(fE)^3, cout]`.
pub fn tconv<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var<'g, T>,
    extent: usize,
    f: usize,
) -> Result<Var<'g, T>> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let cout = b.len();
    if w.shape()[1] != f * f * f * cout {
        return Err(Error::Dimension(format!("{prefix}: weight {:?} for stride {f}", w.shape())));
    }
    let y = x.matmul(w)?;
    let out_e = extent * f;
    y.gather(&[out_e.pow(3), cout], depth_to_space_indices(extent, f, cout))?.add_row(b)
}

/// Mean over rows: `[N, d] -> [1, d]`.
pub fn mean_rows<'g, T: Real>(g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let n = x.shape()[0];
    let w = g.leaf(Tensor::full(&[1, n], T::from_f64_lossy(1.0 / n as f64)));
    w.matmul(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv3_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new();
        pb.conv3("c", 2, 3);
        let mut store: ParamStore<f64> = pb.build(&mut rng);
        store.insert("c.bias", Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap());
        let e = 3;
        let x = Tensor::from_fn(&[27, 2], |i| (i as f64 * 0.37).sin());
        let g = Graph::new();
        let out = conv3(&g, &store, "c", g.leaf(x.clone()), e).unwrap().value();
        let w = store.get("c.weight").unwrap();
        for z in 0..e {
            for y in 0..e {
                for xx in 0..e {
                    for co in 0..3 {
                        let mut acc = [0.1, -0.2, 0.3][co];
                        let mut k = 0;
                        for dz in -1i32..=1 {
                            for dy in -1i32..=1 {
                                for dx in -1i32..=1 {
                                    let (nx, ny, nz) = (xx as i32 + dx, y as i32 + dy, z as i32 + dz);
                                    for ci in 0..2 {
                                        if [nx, ny, nz].iter().all(|&v| (0..e as i32).contains(&v)) {
                                            let src = voxel_index([e; 3], nx as usize, ny as usize, nz as usize);
                                            acc += x.at(&[src, ci]) * w.at(&[k * 2 + ci, co]);
                                        }
                                    }
                                    k += 1;
                                }
                            }
                        }
                        let got = out.at(&[voxel_index([e; 3], xx, y, z), co]);
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn tconv_places_each_subvoxel() {
        let mut store = ParamStore::<f64>::new();
        // cin = 1, cout = 1, f = 2: weight row holds the 8 sub-voxel gains
        store.insert("t.weight", Tensor::from_fn(&[1, 8], |i| i as f64));
        store.insert("t.bias", Tensor::zeros(&[1]));
        let g = Graph::new();
        let x = g.leaf(Tensor::from_f64(&[1, 1], &[2.0]).unwrap());
        let out = tconv(&g, &store, "t", x, 1, 2).unwrap().value();
        for z in 0..2 {
            for y in 0..2 {
                for xx in 0..2 {
                    let i = voxel_index([2; 3], xx, y, z);
                    assert_eq!(out.at(&[i, 0]), 2.0 * i as f64);
                }
            }
        }
    }

    #[test]
    fn builder_is_deterministic() {
        let mut pb = ParamBuilder::new();
        pb.linear("a", 3, 4);
        pb.layer_norm("n", 4);
        let a: ParamStore<f32> = pb.build(&mut ChaCha8Rng::seed_from_u64(5));
        let b: ParamStore<f32> = pb.build(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.get("n.gain").unwrap().data(), &[1.0; 4]);
    }
}
