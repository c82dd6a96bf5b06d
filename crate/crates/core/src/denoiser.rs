//! Conditional noise-prediction network.
//!
//! Input is the augmented cloud: noisy coordinates with the latent condition
//! attached column-wise. The network is a shared per-point MLP:
//!
//! ```text
//! h0  = silu(W_in [x, z, temb])                      N × W
//! g   = max_rows(h0)                                 W
//! v   = voxel_gather(x, h0, G)         (optional)    N × W
//! h1  = silu(W_1 [h0, g, temb, v])                   N × W
//! hl  = silu(W_l h(l-1))               l = 2..depth
//! eps = W_out [h_depth, x, z]                        N × 3
//! ```
//!
//! Every cross-point interaction goes through a max or a cell mean, so
//! permuting the input rows permutes the output rows.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Grads, Linear, ParamStore};
use crate::rng;

/// Noisy coordinates (columns 0..3) joined with the latent condition.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedCloud {
    entries: Array2<f64>,
}

impl AugmentedCloud {
    pub fn new(coords: ArrayView2<'_, f64>, latent: ArrayView2<'_, f64>) -> Result<Self> {
        if coords.ncols() != 3 {
            return Err(Error::shape(format!("coordinates need 3 columns, got {}", coords.ncols())));
        }
        if coords.nrows() != latent.nrows() {
            return Err(Error::shape(format!(
                "coordinates have {} rows but the latent has {}",
                coords.nrows(),
                latent.nrows()
            )));
        }
        let entries = nn::hcat(&[coords, latent]);
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("augmented cloud has non-finite entries"));
        }
        Ok(AugmentedCloud { entries })
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn coords(&self) -> ArrayView2<'_, f64> {
        self.entries.slice(s![.., ..3])
    }

    pub fn latent(&self) -> ArrayView2<'_, f64> {
        self.entries.slice(s![.., 3..])
    }

    pub fn n_points(&self) -> usize {
        self.entries.nrows()
    }

    pub fn latent_channels(&self) -> usize {
        self.entries.ncols() - 3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub hidden_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub voxel_branch: bool,
    pub voxel_grid: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            hidden_width: 128,
            depth: 2,
            time_embed_dim: 32,
            voxel_branch: false,
            voxel_grid: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.depth == 0 {
            return Err(Error::invalid("denoiser hidden_width and depth must be >= 1"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("time_embed_dim must be a positive even number"));
        }
        if self.voxel_branch && self.voxel_grid < 2 {
            return Err(Error::invalid("voxel_grid must be >= 2 when the voxel branch is on"));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of timestep `t`: pairs `(sin(t w_j), cos(t w_j))`
/// with `w_j = T^(-j / (dim/2))`, so the slowest pair spans the schedule.
pub fn time_embedding(t: usize, dim: usize, num_steps: usize) -> Result<Array1<f64>> {
    if t == 0 || t > num_steps {
        return Err(Error::invalid(format!("timestep {t} outside [1, {num_steps}]")));
    }
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid("time embedding dimension must be positive and even"));
    }
    let half = dim / 2;
    let base = (num_steps.max(2)) as f64;
    let mut out = Array1::zeros(dim);
    for j in 0..half {
        let w = base.powf(-(j as f64) / half as f64);
        out[2 * j] = (t as f64 * w).sin();
        out[2 * j + 1] = (t as f64 * w).cos();
    }
    Ok(out)
}

fn voxel_cells(coords: ArrayView2<'_, f64>, grid: usize) -> Vec<usize> {
    let cell = |v: f64| {
        let u = (v.clamp(-1.0, 1.0) + 1.0) * 0.5 * grid as f64;
        (u.floor() as usize).min(grid - 1)
    };
    coords
        .rows()
        .into_iter()
        .map(|r| (cell(r[0]) * grid + cell(r[1])) * grid + cell(r[2]))
        .collect()
}

fn cell_mean_gather(cells: &[usize], values: ArrayView2<'_, f64>, grid: usize) -> Array2<f64> {
    let f = values.ncols();
    let mut sums = Array2::<f64>::zeros((grid * grid * grid, f));
    let mut counts = vec![0usize; grid * grid * grid];
    for (i, &c) in cells.iter().enumerate() {
        let mut row = sums.row_mut(c);
        row += &values.row(i);
        counts[c] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums.row_mut(c).mapv_inplace(|v| v / n as f64);
        }
    }
    sums.select(Axis(0), cells)
}

/// Mean-pools `values` into a G³ grid over `[-1, 1]³` (coordinates are
/// clamped) and hands each point back the mean of its own cell.
///
/// The map is a symmetric linear projection in `values`, so it is also its
/// own adjoint for backpropagation.
pub fn voxel_gather(coords: ArrayView2<'_, f64>, values: ArrayView2<'_, f64>, grid: usize) -> Array2<f64> {
    assert!(grid >= 1, "voxel grid must be >= 1");
    cell_mean_gather(&voxel_cells(coords, grid), values, grid)
}

#[derive(Clone, Debug)]
struct Layers {
    input: Linear,
    mix: Linear,
    deep: Vec<Linear>,
    output: Linear,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    latent_channels: usize,
    num_steps: usize,
    params: ParamStore,
    layers: Layers,
}

impl PartialEq for Denoiser {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.latent_channels == other.latent_channels
            && self.num_steps == other.num_steps
            && self.params == other.params
    }
}

/// Intermediate values retained for [`Denoiser::backward`].
#[derive(Clone, Debug)]
pub struct DenoiserCache {
    input: Array2<f64>,
    pre0: Array2<f64>,
    h0_arg: Vec<usize>,
    cells: Option<Vec<usize>>,
    mix_in: Array2<f64>,
    pres: Vec<Array2<f64>>,
    hiddens: Vec<Array2<f64>>,
    out_in: Array2<f64>,
}

impl Denoiser {
    pub fn init(config: &DenoiserConfig, latent_channels: usize, num_steps: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_steps == 0 {
            return Err(Error::invalid("denoiser needs a schedule with >= 1 step"));
        }
        let mut rng = rng::rng_from(seed, &[rng::stream::DENOISER_INIT]);
        let mut params = ParamStore::new();
        let w = config.hidden_width;
        let te = config.time_embed_dim;
        let input = Linear::new(&mut params, "denoiser.input", 3 + latent_channels + te, w, &mut rng);
        let mix_in = 2 * w + te + if config.voxel_branch { w } else { 0 };
        let mix = Linear::new(&mut params, "denoiser.mix", mix_in, w, &mut rng);
        let deep = (1..config.depth)
            .map(|l| Linear::new(&mut params, &format!("denoiser.deep{l}"), w, w, &mut rng))
            .collect();
        let output = Linear::new(&mut params, "denoiser.output", w + 3 + latent_channels, 3, &mut rng);
        Ok(Denoiser {
            config: config.clone(),
            latent_channels,
            num_steps,
            params,
            layers: Layers {
                input,
                mix,
                deep,
                output,
            },
        })
    }

    pub fn with_params(
        config: &DenoiserConfig,
        latent_channels: usize,
        num_steps: usize,
        params: &ParamStore,
    ) -> Result<Self> {
        let mut d = Self::init(config, latent_channels, num_steps, 0)?;
        d.params.load_from(params)?;
        Ok(d)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn predict_noise(&self, aug: &AugmentedCloud, t: usize) -> Result<Array2<f64>> {
        Ok(self.forward(aug, t)?.0)
    }

    pub fn forward(&self, aug: &AugmentedCloud, t: usize) -> Result<(Array2<f64>, DenoiserCache)> {
        if aug.latent_channels() != self.latent_channels {
            return Err(Error::shape(format!(
                "denoiser expects {} latent channels, got {}",
                self.latent_channels,
                aug.latent_channels()
            )));
        }
        let p = &self.params;
        let l = &self.layers;
        let n = aug.n_points();
        let temb = time_embedding(t, self.config.time_embed_dim, self.num_steps)?;
        let temb_rows = nn::broadcast_rows(temb.view(), n);

        let input = nn::hcat(&[aug.entries().view(), temb_rows.view()]);
        let pre0 = l.input.forward(p, input.view());
        let h0 = nn::silu(pre0.view());
        let (g, h0_arg) = nn::column_max(h0.view());
        let g_rows = nn::broadcast_rows(g.view(), n);
        let cells = self
            .config
            .voxel_branch
            .then(|| voxel_cells(aug.coords(), self.config.voxel_grid));
        let mix_in = match &cells {
            Some(c) => {
                let v = cell_mean_gather(c, h0.view(), self.config.voxel_grid);
                nn::hcat(&[h0.view(), g_rows.view(), temb_rows.view(), v.view()])
            }
            None => nn::hcat(&[h0.view(), g_rows.view(), temb_rows.view()]),
        };
        let mut pres = Vec::with_capacity(self.config.depth);
        let mut hiddens = Vec::with_capacity(self.config.depth);
        let pre = l.mix.forward(p, mix_in.view());
        hiddens.push(nn::silu(pre.view()));
        pres.push(pre);
        for lin in &l.deep {
            let pre = lin.forward(p, hiddens.last().unwrap().view());
            hiddens.push(nn::silu(pre.view()));
            pres.push(pre);
        }
        let out_in = nn::hcat(&[hiddens.last().unwrap().view(), aug.entries().view()]);
        let out = l.output.forward(p, out_in.view());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("denoiser produced non-finite output".into()));
        }
        let cache = DenoiserCache {
            input,
            pre0,
            h0_arg,
            cells,
            mix_in,
            pres,
            hiddens,
            out_in,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the latent columns of the input (N × C).
    pub fn backward(&self, cache: &DenoiserCache, d_out: ArrayView2<'_, f64>, grads: &mut Grads) -> Array2<f64> {
        let p = &self.params;
        let l = &self.layers;
        let w = self.config.hidden_width;
        let c = self.latent_channels;
        let te = self.config.time_embed_dim;

        let d_out_in = l.output.backward(p, cache.out_in.view(), d_out, grads);
        let mut d_latent = d_out_in.slice(s![.., w + 3..w + 3 + c]).to_owned();
        let mut d_h = d_out_in.slice(s![.., ..w]).to_owned();

        for (i, lin) in l.deep.iter().enumerate().rev() {
            let d_pre = nn::silu_backward(cache.pres[i + 1].view(), d_h.view());
            d_h = lin.backward(p, cache.hiddens[i].view(), d_pre.view(), grads);
        }
        let d_pre = nn::silu_backward(cache.pres[0].view(), d_h.view());
        let d_mix_in = l.mix.backward(p, cache.mix_in.view(), d_pre.view(), grads);

        let mut d_h0 = d_mix_in.slice(s![.., ..w]).to_owned();
        let d_g = d_mix_in.slice(s![.., w..2 * w]).sum_axis(Axis(0));
        nn::column_max_backward(d_g.view(), &cache.h0_arg, &mut d_h0);
        if let Some(cells) = &cache.cells {
            let d_v = d_mix_in.slice(s![.., 2 * w + te..]);
            d_h0 += &cell_mean_gather(cells, d_v, self.config.voxel_grid);
        }
        let d_pre0 = nn::silu_backward(cache.pre0.view(), d_h0.view());
        let d_input = l.input.backward(p, cache.input.view(), d_pre0.view(), grads);
        d_latent += &d_input.slice(s![.., 3..3 + c]);
        d_latent
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::rng_from(seed, &[]);
        Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0))
    }

    #[test]
    fn time_embedding_properties() {
        let a = time_embedding(1, 32, 100).unwrap();
        let b = time_embedding(100, 32, 100).unwrap();
        assert!(a.iter().chain(b.iter()).all(|v| (-1.0..=1.0).contains(v)));
        let diff = (&a - &b).mapv(|v| v * v).sum().sqrt();
        assert!(diff > 0.1);
        assert_eq!(time_embedding(7, 32, 100).unwrap(), time_embedding(7, 32, 100).unwrap());
        assert!(time_embedding(0, 32, 100).is_err());
        assert!(time_embedding(101, 32, 100).is_err());
        assert!(time_embedding(5, 7, 100).is_err());
    }

    #[test]
    fn time_embedding_injective_on_default_range() {
        let embs: Vec<_> = (1..=100).map(|t| time_embedding(t, 32, 100).unwrap()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d = (&embs[i] - &embs[j]).mapv(|v| v * v).sum();
                assert!(d > 1e-6, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn voxel_single_cell_is_global_mean() {
        let coords = random(10, 3, 1);
        let vals = random(10, 2, 2);
        let out = voxel_gather(coords.view(), vals.view(), 1);
        let mean = vals.mean_axis(Axis(0)).unwrap();
        for r in out.rows() {
            for (a, b) in r.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn voxel_separate_cells_keep_own_value() {
        let coords = array![[-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]];
        let vals = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(voxel_gather(coords.view(), vals.view(), 2), vals);
    }

    #[test]
    fn voxel_same_cell_order_invariant_and_clamped() {
        let coords = array![[0.2, 0.2, 0.2], [0.3, 0.4, 0.1], [5.0, 5.0, 5.0]];
        let vals = array![[1.0], [3.0], [10.0]];
        let out = voxel_gather(coords.view(), vals.view(), 2);
        assert_eq!(out[[0, 0]], out[[1, 0]]);
        // out-of-box point clamps into the same positive octant cell
        assert!((out[[2, 0]] - 14.0 / 3.0).abs() < 1e-12);
        let swapped = voxel_gather(coords.select(Axis(0), &[1, 0, 2]).view(), vals.select(Axis(0), &[1, 0, 2]).view(), 2);
        assert_eq!(swapped[[0, 0]], out[[1, 0]]);
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig { time_embed_dim: 5, ..Default::default() }.validate().is_err());
        assert!(DenoiserConfig { voxel_branch: true, voxel_grid: 1, ..Default::default() }.validate().is_err());
        assert!(DenoiserConfig::default().validate().is_ok());
    }

    #[test]
    fn rejects_non_finite_and_wrong_width() {
        let x = array![[f64::NAN, 0.0, 0.0]];
        let z = array![[0.0, 0.0]];
        assert!(AugmentedCloud::new(x.view(), z.view()).is_err());
        let d = Denoiser::init(&DenoiserConfig::default(), 4, 100, 1).unwrap();
        let aug = AugmentedCloud::new(array![[0.0, 0.0, 0.0]].view(), z.view()).unwrap();
        assert!(d.predict_noise(&aug, 1).is_err());
    }

    #[test]
    fn output_shape_and_equivariance() {
        for voxel in [false, true] {
            let cfg = DenoiserConfig { hidden_width: 16, voxel_branch: voxel, ..Default::default() };
            let d = Denoiser::init(&cfg, 5, 100, 3).unwrap();
            let x = random(25, 3, 4);
            let z = random(25, 5, 5);
            let aug = AugmentedCloud::new(x.view(), z.view()).unwrap();
            let out = d.predict_noise(&aug, 37).unwrap();
            assert_eq!(out.dim(), (25, 3));
            let mut perm: Vec<usize> = (0..25).collect();
            perm.shuffle(&mut rng::rng_from(6, &[]));
            let aug_p = AugmentedCloud::new(x.select(Axis(0), &perm).view(), z.select(Axis(0), &perm).view()).unwrap();
            let out_p = d.predict_noise(&aug_p, 37).unwrap();
            let expect = out.select(Axis(0), &perm);
            for (a, b) in out_p.iter().zip(expect.iter()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn small_perturbations_stay_small() {
        let d = Denoiser::init(&DenoiserConfig::default(), 8, 100, 9).unwrap();
        let x = random(32, 3, 10);
        let z = random(32, 8, 11);
        let base = d.predict_noise(&AugmentedCloud::new(x.view(), z.view()).unwrap(), 50).unwrap();
        let xp = &x + &random(32, 3, 12).mapv(|v| v * 1e-6);
        let moved = d.predict_noise(&AugmentedCloud::new(xp.view(), z.view()).unwrap(), 50).unwrap();
        let worst = (&moved - &base).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-3);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for voxel in [false, true] {
            let cfg = DenoiserConfig {
                hidden_width: 16,
                depth: 2,
                time_embed_dim: 4,
                voxel_branch: voxel,
                voxel_grid: 2,
            };
            let d = Denoiser::init(&cfg, 3, 10, 13).unwrap();
            let x = random(8, 3, 14);
            let z = random(8, 3, 15);
            let eps = random(8, 3, 16);
            let loss = |den: &Denoiser, zz: &Array2<f64>| {
                let aug = AugmentedCloud::new(x.view(), zz.view()).unwrap();
                let out = den.predict_noise(&aug, 4).unwrap();
                crate::diffusion::diffusion_loss(out.view(), eps.view()).unwrap()
            };
            let aug = AugmentedCloud::new(x.view(), z.view()).unwrap();
            let (out, cache) = d.forward(&aug, 4).unwrap();
            let d_out = (&out - &eps).mapv(|v| 2.0 * v / out.len() as f64);
            let mut g = d.params().zero_grads();
            let d_z = d.backward(&cache, d_out.view(), &mut g);
            let h = 1e-6;
            let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            let mut worst: f64 = 0.0;
            for (ti, t) in g.tensors().iter().enumerate() {
                for idx in ndarray::indices(t.raw_dim()) {
                    let mut plus = d.clone();
                    plus.params.tensors_mut().nth(ti).unwrap()[idx] += h;
                    let mut minus = d.clone();
                    minus.params.tensors_mut().nth(ti).unwrap()[idx] -= h;
                    let fd = (loss(&plus, &z) - loss(&minus, &z)) / (2.0 * h);
                    worst = worst.max(rel(fd, t[idx]));
                }
            }
            for idx in ndarray::indices(z.raw_dim()) {
                let mut zp = z.clone();
                zp[idx] += h;
                let mut zm = z.clone();
                zm[idx] -= h;
                let fd = (loss(&d, &zp) - loss(&d, &zm)) / (2.0 * h);
                worst = worst.max(rel(fd, d_z[idx]));
            }
            assert!(worst < 1e-4, "voxel={voxel} worst={worst}");
        }
    }
}
