//! Deterministic stand-in for a diffusion U-Net feature extractor.
//!
//! The noised input `x + sigma_t * eps` (eps seeded from the image id and
//! timestep, `sigma_t = noise_scale * t / max_timestep`) is average-pooled into
//! a coarse grid of cells, each cell described by a 2x2 sub-pool of RGB values.
//! A fixed random 3x3 convolution over those cell descriptors plus a
//! prompt-dependent bias, followed by tanh, gives the output features.

use ndarray::{s, Array1, Array2, Array3};
use rand_distr::{Distribution, StandardNormal};

use crate::domain::{FeatureMap, Image};
use crate::error::{Error, Result};
use crate::util::{gaussian_matrix, rng_from};

const SUB: usize = 2;
const CELL_IN: usize = SUB * SUB * 3;

#[derive(Debug, Clone)]
pub struct MockDiffusion {
    stride: usize,
    max_timestep: u32,
    noise_scale: f64,
    seed: u64,
    kernel: Array2<f64>,
    feature_dim: usize,
}

impl MockDiffusion {
    pub fn new(feature_dim: usize, stride: usize, layer: usize, noise_scale: f64, seed: u64) -> Result<Self> {
        if feature_dim == 0 || stride < SUB {
            return Err(Error::ConfigInvalid(format!("mock-diffusion needs dim > 0 and stride >= {SUB}")));
        }
        let mut rng = rng_from(&["mock-diffusion", &seed.to_string(), &layer.to_string()]);
        let fan_in = 9 * CELL_IN;
        let kernel = gaussian_matrix(feature_dim, fan_in, 3.0 / (fan_in as f64).sqrt(), &mut rng);
        Ok(Self { stride, max_timestep: 1000, noise_scale, seed, kernel, feature_dim })
    }

    pub fn max_timestep(&self) -> u32 {
        self.max_timestep
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len()
    }

    /// Output grid for a given input size: `ceil(size / stride)` per axis.
    pub fn grid_for(&self, input: (usize, usize)) -> (usize, usize) {
        (input.0.div_ceil(self.stride), input.1.div_ceil(self.stride))
    }

    pub fn noise_sigma(&self, timestep: u32) -> f64 {
        self.noise_scale * f64::from(timestep) / f64::from(self.max_timestep)
    }

    /// `image` must already be at the configured input size. The returned map
    /// describes an image of `describes` pixels.
    pub fn extract(&self, image: &Image, timestep: u32, prompt: &str, describes: (usize, usize)) -> Result<FeatureMap> {
        if timestep >= self.max_timestep {
            return Err(Error::InvalidTimestep { timestep, max: self.max_timestep });
        }
        let (h, w) = image.size();
        let (gh, gw) = self.grid_for((h, w));
        let sigma = self.noise_sigma(timestep);
        let mut px = image.pixels().mapv(|v| f64::from(v) - 0.5);
        if sigma > 0.0 {
            let mut rng = rng_from(&["mock-diffusion-noise", &self.seed.to_string(), image.id(), &timestep.to_string()]);
            px.mapv_inplace(|v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                v + sigma * e
            });
        }
        // pooled cell descriptors: gh x gw x (SUB*SUB*3)
        let mut cells = Array3::<f64>::zeros((gh, gw, CELL_IN));
        let sub_rows = gh * SUB;
        let sub_cols = gw * SUB;
        for sr in 0..sub_rows {
            let y0 = sr * h / sub_rows;
            let y1 = ((sr + 1) * h / sub_rows).max(y0 + 1).min(h);
            for sc in 0..sub_cols {
                let x0 = sc * w / sub_cols;
                let x1 = ((sc + 1) * w / sub_cols).max(x0 + 1).min(w);
                let block = px.slice(s![y0..y1, x0..x1, ..]);
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for ch in 0..3 {
                    let mean = block.slice(s![.., .., ch]).sum() / n;
                    cells[[sr / SUB, sc / SUB, ((sr % SUB) * SUB + sc % SUB) * 3 + ch]] = mean;
                }
            }
        }
        let bias = self.prompt_bias(prompt);
        let mut inputs = Array2::<f64>::zeros((gh * gw, 9 * CELL_IN));
        for r in 0..gh {
            for c in 0..gw {
                let mut row = inputs.row_mut(r * gw + c);
                for (k, (dr, dc)) in (-1i64..=1).flat_map(|a| (-1i64..=1).map(move |b| (a, b))).enumerate() {
                    let rr = r as i64 + dr;
                    let cc = c as i64 + dc;
                    if rr < 0 || cc < 0 || rr >= gh as i64 || cc >= gw as i64 {
                        continue;
                    }
                    row.slice_mut(s![k * CELL_IN..(k + 1) * CELL_IN])
                        .assign(&cells.slice(s![rr as usize, cc as usize, ..]));
                }
            }
        }
        let mut out = inputs.dot(&self.kernel.t());
        for mut row in out.rows_mut() {
            row += &bias;
            row.mapv_inplace(f64::tanh);
        }
        FeatureMap::from_matrix(&out, (gh, gw), describes)
    }

    fn prompt_bias(&self, prompt: &str) -> Array1<f64> {
        let mut rng = rng_from(&["mock-diffusion-prompt", &self.seed.to_string(), prompt]);
        gaussian_matrix(1, self.feature_dim, 0.1, &mut rng).row(0).to_owned()
    }
}
