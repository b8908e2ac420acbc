//! The additive shape model: a template SDF network `T` plus one displacement
//! subnetwork per covariate.
//!
//! Each subnetwork `f_i(p, c_i, z)` is zero-anchored,
//! `g_i(p, c_i, z) = f_i(p, c_i, z) - f_i(p, 0, z)`, so a centered covariate
//! contributes no displacement. The displacements add,
//! `d = sum_i g_i`, and the shape field is `phi(p, c, z) = T(p + d)`. Each
//! `g_i` depends on its own covariate only, so per-covariate effects stay
//! separable by construction.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{
    self, forward, forward_tangent, from_f64, mlp_init, vjp, DiffFloat, InputSlice, MlpSpec, Seed,
    Tape, VjpOptions, OMEGA0_DEFAULT,
};
use crate::rng::derive_rng;
use crate::{Error, Result};

/// Architecture dimensions shared by the template and the subnetworks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Spatial dimension D (2 or 3).
    pub spatial: usize,
    /// Covariate count N.
    pub covariates: usize,
    /// Latent dimension L.
    pub latent: usize,
    /// Number of linear layers per network.
    pub layers: usize,
    /// Hidden width.
    pub hidden: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.spatial) {
            return Err(Error::Config(format!(
                "spatial dimension must be 2 or 3, got {}",
                self.spatial
            )));
        }
        if self.covariates == 0 {
            return Err(Error::Config("at least one covariate required".into()));
        }
        if self.latent == 0 || self.hidden == 0 {
            return Err(Error::Config("latent and hidden widths must be positive".into()));
        }
        if self.layers < 3 {
            return Err(Error::Config(format!(
                "at least 3 layers required, got {}",
                self.layers
            )));
        }
        Ok(())
    }

    /// Middle-layer index receiving the (p, c_i) skip concatenation.
    pub fn skip_layer(&self) -> usize {
        self.layers.div_ceil(2).min(self.layers - 2)
    }

    pub fn template_spec(&self) -> Result<MlpSpec> {
        let mut widths = vec![self.spatial];
        widths.extend(std::iter::repeat(self.hidden).take(self.layers - 1));
        widths.push(1);
        MlpSpec::plain(widths, OMEGA0_DEFAULT)
    }

    pub fn subnet_spec(&self) -> Result<MlpSpec> {
        let mut widths = vec![self.spatial + 1 + self.latent];
        widths.extend(std::iter::repeat(self.hidden).take(self.layers - 1));
        widths.push(self.spatial);
        MlpSpec::new(
            widths,
            Some(self.skip_layer()),
            InputSlice::new(0, self.spatial + 1),
            OMEGA0_DEFAULT,
        )
    }
}

/// Per-covariate affine normalization fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateNormalizer {
    pub centers: Vec<f64>,
    pub scales: Vec<f64>,
    /// Observed raw range, kept so out-of-range queries can be flagged.
    pub raw_min: Vec<f64>,
    pub raw_max: Vec<f64>,
}

impl CovariateNormalizer {
    /// Identity normalizer for `n` covariates.
    pub fn identity(n: usize) -> Self {
        Self {
            centers: vec![0.0; n],
            scales: vec![1.0; n],
            raw_min: vec![f64::NEG_INFINITY; n],
            raw_max: vec![f64::INFINITY; n],
        }
    }

    /// Fits centers to the mean and scales to the max absolute deviation,
    /// mapping the training range into roughly [-1, 1].
    pub fn fit(per_shape: &[Vec<f64>], n_covariates: usize) -> Result<Self> {
        if per_shape.is_empty() {
            return Err(Error::Config("cannot fit a normalizer on an empty set".into()));
        }
        let n = n_covariates;
        let mut centers = vec![0.0; n];
        for row in per_shape {
            if row.len() != n {
                return Err(Error::Dimension(format!(
                    "covariate row has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (c, v) in centers.iter_mut().zip(row) {
                *c += v;
            }
        }
        for c in centers.iter_mut() {
            *c /= per_shape.len() as f64;
        }
        let mut scales = vec![0.0f64; n];
        let mut raw_min = vec![f64::INFINITY; n];
        let mut raw_max = vec![f64::NEG_INFINITY; n];
        for row in per_shape {
            for i in 0..n {
                scales[i] = scales[i].max((row[i] - centers[i]).abs());
                raw_min[i] = raw_min[i].min(row[i]);
                raw_max[i] = raw_max[i].max(row[i]);
            }
        }
        for s in scales.iter_mut() {
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Ok(Self {
            centers,
            scales,
            raw_min,
            raw_max,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.centers.iter().zip(&self.scales))
            .map(|(v, (c, s))| (v - c) / s)
            .collect()
    }

    pub fn denormalize(&self, norm: &[f64]) -> Vec<f64> {
        norm.iter()
            .zip(self.centers.iter().zip(&self.scales))
            .map(|(v, (c, s))| v * s + c)
            .collect()
    }

    /// True per covariate when `raw` lies inside the observed training range.
    pub fn in_range(&self, raw: &[f64]) -> Vec<bool> {
        raw.iter()
            .enumerate()
            .map(|(i, v)| *v >= self.raw_min[i] && *v <= self.raw_max[i])
            .collect()
    }
}

/// The trained (or initializing) model: template network, per-covariate
/// subnetworks, and the covariate normalizer. Immutable during evaluation;
/// training replaces parameter snapshots wholesale.
#[derive(Clone, Debug)]
pub struct NaisrModel<F: DiffFloat> {
    pub dims: ModelDims,
    pub template_spec: MlpSpec,
    pub subnet_spec: MlpSpec,
    pub template_params: Vec<F>,
    pub subnet_params: Vec<Vec<F>>,
    pub normalizer: CovariateNormalizer,
    pub covariate_names: Vec<String>,
}

/// Gradients of a scalar objective with respect to everything trainable.
#[derive(Clone, Debug)]
pub struct PhiGrads<F: DiffFloat> {
    pub template: Vec<F>,
    pub subnets: Vec<Vec<F>>,
    pub z: Array1<F>,
    pub c: Array1<F>,
}

/// Forward bundle kept alive for the reverse pass during training.
pub struct PhiForward<F: DiffFloat> {
    /// Field values, one per point.
    pub values: Array1<F>,
    /// Spatial gradient of the field, `n x D`.
    pub grad: Array2<F>,
    subnet_tapes: Vec<Tape<F>>,
    template_tape: Tape<F>,
    n: usize,
}

impl<F: DiffFloat> NaisrModel<F> {
    /// Freshly initialized model; parameters are drawn per network from
    /// streams derived from `seed`.
    pub fn init(
        dims: ModelDims,
        normalizer: CovariateNormalizer,
        covariate_names: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        if normalizer.len() != dims.covariates || covariate_names.len() != dims.covariates {
            return Err(Error::Config(format!(
                "normalizer ({}) and names ({}) must cover {} covariates",
                normalizer.len(),
                covariate_names.len(),
                dims.covariates
            )));
        }
        let template_spec = dims.template_spec()?;
        let subnet_spec = dims.subnet_spec()?;
        let mut seeder = derive_rng(seed, "model.init", 0);
        let template_params = mlp_init(&template_spec, seeder.random())?;
        let subnet_params = (0..dims.covariates)
            .map(|_| mlp_init(&subnet_spec, seeder.random()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dims,
            template_spec,
            subnet_spec,
            template_params,
            subnet_params,
            normalizer,
            covariate_names,
        })
    }

    pub fn spatial(&self) -> usize {
        self.dims.spatial
    }

    pub fn n_covariates(&self) -> usize {
        self.dims.covariates
    }

    pub fn latent_dim(&self) -> usize {
        self.dims.latent
    }

    /// Total trainable network parameter count (template + subnets).
    pub fn param_count(&self) -> usize {
        self.template_spec.param_count()
            + self.dims.covariates * self.subnet_spec.param_count()
    }

    fn check_point_dim(&self, width: usize) -> Result<()> {
        if width != self.dims.spatial {
            return Err(Error::Dimension(format!(
                "points have {} coordinates, model is {}-dimensional",
                width, self.dims.spatial
            )));
        }
        Ok(())
    }

    fn check_cz(&self, c: &[F], z: &ArrayView1<F>) -> Result<()> {
        if c.len() != self.dims.covariates {
            return Err(Error::Dimension(format!(
                "covariate vector has {} entries, model has {}",
                c.len(),
                self.dims.covariates
            )));
        }
        if z.len() != self.dims.latent {
            return Err(Error::Dimension(format!(
                "latent code has {} entries, model expects {}",
                z.len(),
                self.dims.latent
            )));
        }
        Ok(())
    }

    /// Template signed distance values at a batch of points.
    pub fn template_eval_batch(&self, points: &ArrayView2<F>) -> Result<Array1<F>> {
        self.check_point_dim(points.ncols())?;
        let y = forward(&self.template_spec, &self.template_params, points)?;
        Ok(y.column(0).to_owned())
    }

    pub fn template_eval(&self, p: &[F]) -> Result<F> {
        let pts = ArrayView2::from_shape((1, p.len()), p).unwrap();
        Ok(self.template_eval_batch(&pts)?[0])
    }

    /// Subnetwork input `(p, c_i, z)` for a batch of points.
    fn subnet_input(&self, points: &ArrayView2<F>, c_i: F, z: &ArrayView1<F>) -> Array2<F> {
        let n = points.nrows();
        let d = self.dims.spatial;
        let width = d + 1 + self.dims.latent;
        let mut x = Array2::zeros((n, width));
        x.slice_mut(s![.., ..d]).assign(points);
        x.column_mut(d).fill(c_i);
        for (mut row, _) in x.slice_mut(s![.., d + 1..]).rows_mut().into_iter().zip(0..n) {
            row.assign(z);
        }
        x
    }

    /// Zero-anchored displacement of covariate `i`:
    /// `g_i = f_i(p, c_i, z) - f_i(p, 0, z)`. The two branches run the same
    /// code path on identically shaped inputs, so `c_i = 0` cancels bit for
    /// bit.
    pub fn subnet_disp_batch(
        &self,
        i: usize,
        points: &ArrayView2<F>,
        c_i: F,
        z: &ArrayView1<F>,
    ) -> Result<Array2<F>> {
        if i >= self.dims.covariates {
            return Err(Error::Config(format!(
                "covariate index {i} out of range ({} covariates)",
                self.dims.covariates
            )));
        }
        self.check_point_dim(points.ncols())?;
        if z.len() != self.dims.latent {
            return Err(Error::Dimension(format!(
                "latent code has {} entries, model expects {}",
                z.len(),
                self.dims.latent
            )));
        }
        let xc = self.subnet_input(points, c_i, z);
        let x0 = self.subnet_input(points, F::zero(), z);
        let u = forward(&self.subnet_spec, &self.subnet_params[i], &xc.view())?;
        let v = forward(&self.subnet_spec, &self.subnet_params[i], &x0.view())?;
        Ok(u - v)
    }

    pub fn subnet_disp(&self, i: usize, p: &[F], c_i: F, z: &ArrayView1<F>) -> Result<Vec<F>> {
        let pts = ArrayView2::from_shape((1, p.len()), p).unwrap();
        Ok(self.subnet_disp_batch(i, &pts, c_i, z)?.row(0).to_vec())
    }

    /// Total displacement `d = sum_i g_i`, accumulated in covariate order.
    pub fn total_disp_batch(
        &self,
        points: &ArrayView2<F>,
        c: &[F],
        z: &ArrayView1<F>,
    ) -> Result<Array2<F>> {
        self.check_cz(c, z)?;
        let mut total = Array2::zeros((points.nrows(), self.dims.spatial));
        for (i, &ci) in c.iter().enumerate() {
            total += &self.subnet_disp_batch(i, points, ci, z)?;
        }
        Ok(total)
    }

    pub fn total_disp(&self, p: &[F], c: &[F], z: &ArrayView1<F>) -> Result<Vec<F>> {
        let pts = ArrayView2::from_shape((1, p.len()), p).unwrap();
        Ok(self.total_disp_batch(&pts, c, z)?.row(0).to_vec())
    }

    /// Deformed-template field `phi(p, c, z) = T(p + d)`.
    pub fn phi_batch(&self, points: &ArrayView2<F>, c: &[F], z: &ArrayView1<F>) -> Result<Array1<F>> {
        let disp = self.total_disp_batch(points, c, z)?;
        let warped = points + &disp;
        self.template_eval_batch(&warped.view())
    }

    pub fn phi_eval(&self, p: &[F], c: &[F], z: &ArrayView1<F>) -> Result<F> {
        let pts = ArrayView2::from_shape((1, p.len()), p).unwrap();
        Ok(self.phi_batch(&pts, c, z)?[0])
    }

    /// Single-covariate field `phi_i(p, c_i, z) = T(p + g_i)`; never reads
    /// any other covariate.
    pub fn phi_i_batch(
        &self,
        i: usize,
        points: &ArrayView2<F>,
        c_i: F,
        z: &ArrayView1<F>,
    ) -> Result<Array1<F>> {
        let disp = self.subnet_disp_batch(i, points, c_i, z)?;
        let warped = points + &disp;
        self.template_eval_batch(&warped.view())
    }

    pub fn phi_i_eval(&self, i: usize, p: &[F], c_i: F, z: &ArrayView1<F>) -> Result<F> {
        let pts = ArrayView2::from_shape((1, p.len()), p).unwrap();
        Ok(self.phi_i_batch(i, &pts, c_i, z)?[0])
    }

    /// Field values together with the exact spatial gradient
    /// `grad phi = grad T(p~) . (I + J_d)`, propagated forward-mode.
    pub fn phi_with_grad_batch(
        &self,
        points: &ArrayView2<F>,
        c: &[F],
        z: &ArrayView1<F>,
    ) -> Result<(Array1<F>, Array2<F>)> {
        let fwd = self.phi_train_batch(points, c, z)?;
        Ok((fwd.values, fwd.grad))
    }

    pub fn phi_grad_p(&self, p: &[F], c: &[F], z: &ArrayView1<F>) -> Result<Vec<F>> {
        let pts = ArrayView2::from_shape((1, p.len()), p).unwrap();
        let (_, g) = self.phi_with_grad_batch(&pts, c, z)?;
        Ok(g.row(0).to_vec())
    }

    /// Tangent-carrying forward pass for training: evaluates the whole
    /// composition, keeps the tapes, and exposes values plus spatial
    /// gradient. The two zero-anchoring branches of each subnetwork run
    /// stacked in one batch of `2n` rows.
    pub fn phi_train_batch(
        &self,
        points: &ArrayView2<F>,
        c: &[F],
        z: &ArrayView1<F>,
    ) -> Result<PhiForward<F>> {
        self.check_point_dim(points.ncols())?;
        self.check_cz(c, z)?;
        let n = points.nrows();
        let d = self.dims.spatial;

        let mut disp = Array2::<F>::zeros((n, d));
        // jd[k] is the tangent of the total displacement along spatial
        // direction k.
        let mut jd: Vec<Array2<F>> = vec![Array2::zeros((n, d)); d];
        let mut subnet_tapes = Vec::with_capacity(self.dims.covariates);
        for (i, &ci) in c.iter().enumerate() {
            let xc = self.subnet_input(points, ci, z);
            let x0 = self.subnet_input(points, F::zero(), z);
            let stacked = ndarray::concatenate(Axis(0), &[xc.view(), x0.view()]).unwrap();
            let (y, t, tape) = forward_tangent(
                &self.subnet_spec,
                &self.subnet_params[i],
                &stacked.view(),
                Seed::UnitColumns { start: 0, dim: d },
            )?;
            let (u, v) = y.view().split_at(Axis(0), n);
            disp += &(&u - &v);
            for k in 0..d {
                let (tu, tv) = t[k].view().split_at(Axis(0), n);
                jd[k] += &(&tu - &tv);
            }
            subnet_tapes.push(tape);
        }

        let warped = points + &disp;
        // Template seeds: identity plus the displacement Jacobian.
        let seeds: Vec<Array2<F>> = (0..d)
            .map(|k| {
                let mut sd = jd[k].clone();
                let mut col = sd.column_mut(k);
                col += F::one();
                sd
            })
            .collect();
        let (s, ts, template_tape) = forward_tangent(
            &self.template_spec,
            &self.template_params,
            &warped.view(),
            Seed::Dense(&seeds),
        )?;
        let values = s.column(0).to_owned();
        let mut grad = Array2::zeros((n, d));
        for k in 0..d {
            grad.column_mut(k).assign(&ts[k].column(0));
        }
        Ok(PhiForward {
            values,
            grad,
            subnet_tapes,
            template_tape,
            n,
        })
    }

    /// Reverse pass over a taped forward. `value_bar` and `grad_bar` are the
    /// cotangents of the field values and spatial gradients; parameter
    /// gradients are skipped when `accumulate_params` is false (latent-only
    /// optimization).
    pub fn phi_vjp(
        &self,
        fwd: &PhiForward<F>,
        value_bar: &ArrayView1<F>,
        grad_bar: &ArrayView2<F>,
        accumulate_params: bool,
    ) -> Result<PhiGrads<F>> {
        let n = fwd.n;
        let d = self.dims.spatial;
        if value_bar.len() != n || grad_bar.dim() != (n, d) {
            return Err(Error::Dimension(format!(
                "cotangent shapes {:?}/{:?} do not match {} points in {}d",
                value_bar.len(),
                grad_bar.dim(),
                n,
                d
            )));
        }
        let mut grads = PhiGrads {
            template: vec![F::zero(); self.template_spec.param_count()],
            subnets: vec![vec![F::zero(); self.subnet_spec.param_count()]; self.dims.covariates],
            z: Array1::zeros(self.dims.latent),
            c: Array1::zeros(self.dims.covariates),
        };

        let y_bar = value_bar.to_owned().insert_axis(Axis(1));
        let t_bar: Vec<Array2<F>> = (0..d)
            .map(|k| grad_bar.column(k).to_owned().insert_axis(Axis(1)))
            .collect();
        let (warp_bar, seed_bar) = vjp(
            &self.template_spec,
            &self.template_params,
            &fwd.template_tape,
            &y_bar,
            &t_bar,
            &VjpOptions {
                accumulate_params,
                want_input_grad: true,
                want_seed_grad: true,
            },
            &mut grads.template,
        )?;
        let disp_bar = warp_bar.unwrap();
        let jd_bar = seed_bar.unwrap();

        // Stacked cotangents: +1 on the covariate branch, -1 on the
        // zero-anchor branch.
        let mut y_bar2 = Array2::<F>::zeros((2 * n, d));
        y_bar2.slice_mut(s![..n, ..]).assign(&disp_bar);
        y_bar2.slice_mut(s![n.., ..]).assign(&disp_bar.mapv(|v| -v));
        let t_bar2: Vec<Array2<F>> = (0..d)
            .map(|k| {
                let mut tb = Array2::<F>::zeros((2 * n, d));
                tb.slice_mut(s![..n, ..]).assign(&jd_bar[k]);
                tb.slice_mut(s![n.., ..]).assign(&jd_bar[k].mapv(|v| -v));
                tb
            })
            .collect();

        for i in 0..self.dims.covariates {
            let (x_bar, _) = vjp(
                &self.subnet_spec,
                &self.subnet_params[i],
                &fwd.subnet_tapes[i],
                &y_bar2,
                &t_bar2,
                &VjpOptions {
                    accumulate_params,
                    want_input_grad: true,
                    want_seed_grad: false,
                },
                &mut grads.subnets[i],
            )?;
            let x_bar = x_bar.unwrap();
            // c_i enters only the covariate branch; its zero-anchor column is
            // a structural constant.
            grads.c[i] = x_bar.slice(s![..n, d]).sum();
            grads.z += &x_bar.slice(s![.., d + 1..]).sum_axis(Axis(0));
        }
        Ok(grads)
    }
}

/// Checksum over all network parameters; used to assert that inference does
/// not mutate a model.
pub fn param_checksum<F: DiffFloat>(model: &NaisrModel<F>) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in &model.template_params {
        h.update(p.to_f64().unwrap().to_le_bytes());
    }
    for sub in &model.subnet_params {
        for p in sub {
            h.update(p.to_f64().unwrap().to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Small helper used across tests and inference: latent code drawn from
/// N(0, sigma^2) on a derived stream.
pub fn sample_latent<F: DiffFloat>(latent_dim: usize, sigma: f64, seed: u64, tag: &str) -> Array1<F> {
    use rand_distr::{Distribution, Normal};
    let mut rng = derive_rng(seed, tag, 0);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Array1::from_iter((0..latent_dim).map(|_| from_f64::<F>(normal.sample(&mut rng))))
}

// Re-exported so callers do not need to reach into diffnet for the common
// case of building model-compatible specs by hand.
pub use diffnet::InputSlice as ModelInputSlice;

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(seed: u64) -> NaisrModel<f64> {
        let dims = ModelDims {
            spatial: 2,
            covariates: 2,
            latent: 8,
            layers: 4,
            hidden: 12,
        };
        NaisrModel::init(
            dims,
            CovariateNormalizer::identity(2),
            vec!["alpha".into(), "beta".into()],
            seed,
        )
        .unwrap()
    }

    fn probe_points(n: usize, seed: u64) -> Array2<f64> {
        use rand::Rng;
        let mut rng = derive_rng(seed, "test.points", 0);
        Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_covariate_gives_exact_zero_displacement() {
        let model = small_model(1);
        let z = sample_latent::<f64>(8, 0.5, 3, "test.z");
        let pts = probe_points(16, 0);
        let g = model.subnet_disp_batch(0, &pts.view(), 0.0, &z.view()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_covariates_reduce_phi_to_template() {
        let model = small_model(2);
        let z = sample_latent::<f64>(8, 0.5, 4, "test.z");
        let pts = probe_points(16, 1);
        let phi = model.phi_batch(&pts.view(), &[0.0, 0.0], &z.view()).unwrap();
        let t = model.template_eval_batch(&pts.view()).unwrap();
        assert_eq!(phi, t);
    }

    #[test]
    fn total_disp_is_exact_sum_of_subnet_disps() {
        let model = small_model(3);
        let z = sample_latent::<f64>(8, 0.5, 5, "test.z");
        let pts = probe_points(8, 2);
        let c = [0.37, -0.81];
        let total = model.total_disp_batch(&pts.view(), &c, &z.view()).unwrap();
        let mut sum = model.subnet_disp_batch(0, &pts.view(), c[0], &z.view()).unwrap();
        sum += &model.subnet_disp_batch(1, &pts.view(), c[1], &z.view()).unwrap();
        assert_eq!(total, sum);
    }

    #[test]
    fn phi_i_ignores_other_covariates() {
        let model = small_model(4);
        let z = sample_latent::<f64>(8, 0.5, 6, "test.z");
        let p = [0.2, -0.4];
        let a = model.phi_i_eval(0, &p, 0.6, &z.view()).unwrap();
        // phi_i has no c_j argument at all; the equivalent full evaluation
        // with c_j varied must match through the c_j = 0 path.
        let via_full_a = model.phi_eval(&p, &[0.6, 0.0], &z.view()).unwrap();
        assert_eq!(a, via_full_a);
        let c0 = model.phi_i_eval(0, &p, 0.0, &z.view()).unwrap();
        assert_eq!(c0, model.template_eval(&p).unwrap());
    }

    #[test]
    fn subnet_disp_is_locally_lipschitz() {
        let model = small_model(5);
        let z = sample_latent::<f64>(8, 0.5, 7, "test.z");
        let p = [0.1, 0.3];
        let g0 = model.subnet_disp(0, &p, 0.5, &z.view()).unwrap();
        let eps = 1e-6;
        let g1 = model.subnet_disp(0, &[p[0] + eps, p[1]], 0.5, &z.view()).unwrap();
        // Measure the local slope with a larger step, then require the small
        // step to respect it with margin.
        let h = 1e-3;
        let gh = model.subnet_disp(0, &[p[0] + h, p[1]], 0.5, &z.view()).unwrap();
        let slope = ((gh[0] - g0[0]).powi(2) + (gh[1] - g0[1]).powi(2)).sqrt() / h;
        let delta = ((g1[0] - g0[0]).powi(2) + (g1[1] - g0[1]).powi(2)).sqrt();
        assert!(delta <= (slope + 1.0) * eps * 10.0, "delta {delta}, slope {slope}");
    }

    #[test]
    fn evaluations_are_pure() {
        let model = small_model(6);
        let z = sample_latent::<f64>(8, 0.5, 8, "test.z");
        let p = [0.25, -0.15];
        let c = [0.3, 0.9];
        assert_eq!(
            model.phi_eval(&p, &c, &z.view()).unwrap(),
            model.phi_eval(&p, &c, &z.view()).unwrap()
        );
        assert_eq!(
            model.template_eval(&p).unwrap(),
            model.template_eval(&p).unwrap()
        );
    }

    #[test]
    fn fresh_model_is_finite_on_the_box() {
        let model = small_model(7);
        let z = Array1::<f64>::zeros(8);
        let pts = probe_points(64, 3);
        let phi = model.phi_batch(&pts.view(), &[0.5, -0.5], &z.view()).unwrap();
        assert!(phi.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn phi_grad_matches_finite_differences() {
        let model = small_model(8);
        let z = sample_latent::<f64>(8, 0.5, 9, "test.z");
        let c = [0.4, -0.7];
        let pts = probe_points(6, 4);
        let (_, grad) = model.phi_with_grad_batch(&pts.view(), &c, &z.view()).unwrap();
        let h = 1e-6;
        for r in 0..pts.nrows() {
            let p = [pts[[r, 0]], pts[[r, 1]]];
            for k in 0..2 {
                let mut pp = p;
                pp[k] += h;
                let mut pm = p;
                pm[k] -= h;
                let fp = model.phi_eval(&pp, &c, &z.view()).unwrap();
                let fm = model.phi_eval(&pm, &c, &z.view()).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let an = grad[[r, k]];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-12);
                assert!(rel < 1e-5, "point {r} dir {k}: analytic {an}, fd {fd}");
            }
        }
    }

    #[test]
    fn grad_output_has_spatial_length() {
        let model = small_model(9);
        let z = Array1::<f64>::zeros(8);
        let g = model.phi_grad_p(&[0.0, 0.0], &[0.1, 0.1], &z.view()).unwrap();
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn normalizer_round_trips() {
        let rows = vec![vec![10.0, -3.0], vec![20.0, 1.0], vec![12.0, 0.5]];
        let norm = CovariateNormalizer::fit(&rows, 2).unwrap();
        for row in &rows {
            let n = norm.normalize(row);
            assert!(n.iter().all(|v| v.abs() <= 1.0 + 1e-12));
            let back = norm.denormalize(&n);
            for (a, b) in back.iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(norm.in_range(&[15.0, 0.0]), vec![true, true]);
        assert_eq!(norm.in_range(&[25.0, 0.0]), vec![false, true]);
    }

    #[test]
    fn out_of_range_covariate_index_is_config_error() {
        let model = small_model(10);
        let z = Array1::<f64>::zeros(8);
        assert!(matches!(
            model.subnet_disp(2, &[0.0, 0.0], 0.1, &z.view()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn skip_layer_matches_middle_convention() {
        let d8 = ModelDims { spatial: 3, covariates: 1, latent: 4, layers: 8, hidden: 8 };
        assert_eq!(d8.skip_layer(), 4);
        let d5 = ModelDims { spatial: 2, covariates: 1, latent: 4, layers: 5, hidden: 8 };
        assert_eq!(d5.skip_layer(), 3);
        let d6 = ModelDims { spatial: 3, covariates: 1, latent: 4, layers: 6, hidden: 8 };
        assert_eq!(d6.skip_layer(), 3);
    }
}
