//! Training objective.
//!
//! On-surface points carry an Eikonal term (|grad phi| should be 1), a
//! Dirichlet term (phi should vanish), and a Neumann term (grad phi should
//! align with the surface normal). Off-surface points carry a Dirichlet term
//! against their target signed distance and the same Eikonal term. The
//! latent code is penalized by its squared norm. Per-point terms are
//! lambda-weighted and averaged over the sampled points of each kind.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::diffnet::{from_f64, DiffFloat};
use crate::model::{NaisrModel, PhiGrads};
use crate::{Error, Result};

/// Loss term weights. Defaults follow the per-shape point counts: the
/// Eikonal weight splits 10 over all points, the on-surface Dirichlet weight
/// is 30 over the on-surface count, and so on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    pub sigma_lat: f64,
}

impl LossWeights {
    pub fn from_counts(n_pts: usize, n_on: usize, n_off: usize, latent_dim: usize) -> Self {
        Self {
            lambda1: 10.0 / n_pts as f64,
            lambda2: 30.0 / n_on as f64,
            lambda3: 10.0 / n_on as f64,
            lambda4: 100.0 / n_off as f64,
            lambda5: 10.0 / n_pts as f64,
            lambda6: 2.0 / latent_dim as f64,
            sigma_lat: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
        ];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        if !(self.sigma_lat.is_finite() && self.sigma_lat > 0.0) {
            return Err(Error::Config(format!(
                "sigma_lat must be positive, got {}",
                self.sigma_lat
            )));
        }
        Ok(())
    }
}

/// One shape's sampled points for a training or inference step.
#[derive(Clone, Debug)]
pub struct PointBatch<F: DiffFloat> {
    pub on_points: Array2<F>,
    pub on_normals: Array2<F>,
    pub off_points: Array2<F>,
    pub off_sdf: Array1<F>,
}

impl<F: DiffFloat> PointBatch<F> {
    pub fn new(
        on_points: Array2<F>,
        on_normals: Array2<F>,
        off_points: Array2<F>,
        off_sdf: Array1<F>,
    ) -> Result<Self> {
        if on_points.dim() != on_normals.dim() {
            return Err(Error::Dimension(format!(
                "{} on-surface points with {} normals",
                on_points.nrows(),
                on_normals.nrows()
            )));
        }
        if off_points.nrows() != off_sdf.len() {
            return Err(Error::Dimension(format!(
                "{} off-surface points with {} target distances",
                off_points.nrows(),
                off_sdf.len()
            )));
        }
        let tol = from_f64::<F>(1e-6);
        for (i, row) in on_normals.rows().into_iter().enumerate() {
            let norm = row.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b).sqrt();
            if (norm - F::one()).abs() > tol {
                return Err(Error::Validation(format!(
                    "normal {i} has length {norm}, expected unit"
                )));
            }
        }
        Ok(Self {
            on_points,
            on_normals,
            off_points,
            off_sdf,
        })
    }

    pub fn n_on(&self) -> usize {
        self.on_points.nrows()
    }

    pub fn n_off(&self) -> usize {
        self.off_points.nrows()
    }
}

/// Diagnostics accumulated while evaluating the losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossStats {
    /// On-surface points whose field gradient had zero length; their
    /// alignment term is pinned to 1.
    pub degenerate_gradients: usize,
}

/// On-surface loss from already-evaluated field values and gradients:
/// mean over points of
/// `lambda1 |(|g|) - 1| + lambda2 |phi| + lambda3 (1 - cos(g, n))`.
pub fn on_surface_terms<F: DiffFloat>(
    values: &ArrayView1<F>,
    grads: &ArrayView2<F>,
    normals: &ArrayView2<F>,
    weights: &LossWeights,
) -> (F, LossStats) {
    let n = values.len();
    if n == 0 {
        return (F::zero(), LossStats::default());
    }
    let l1 = from_f64::<F>(weights.lambda1);
    let l2 = from_f64::<F>(weights.lambda2);
    let l3 = from_f64::<F>(weights.lambda3);
    let mut stats = LossStats::default();
    let mut sum = F::zero();
    for j in 0..n {
        let g = grads.row(j);
        let norm = g.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b).sqrt();
        let eik = (norm - F::one()).abs();
        let dir = values[j].abs();
        let neu = if norm > F::zero() {
            let dot = g
                .iter()
                .zip(normals.row(j).iter())
                .map(|(a, b)| *a * *b)
                .fold(F::zero(), |a, b| a + b);
            F::one() - dot / norm
        } else {
            stats.degenerate_gradients += 1;
            F::one()
        };
        sum += l1 * eik + l2 * dir + l3 * neu;
    }
    (sum / from_f64::<F>(n as f64), stats)
}

/// Off-surface loss from already-evaluated values and gradients:
/// mean over points of `lambda4 |phi - s_tgt| + lambda5 |(|g|) - 1|`.
pub fn off_surface_terms<F: DiffFloat>(
    values: &ArrayView1<F>,
    grads: &ArrayView2<F>,
    s_tgt: &ArrayView1<F>,
    weights: &LossWeights,
) -> F {
    let n = values.len();
    if n == 0 {
        return F::zero();
    }
    let l4 = from_f64::<F>(weights.lambda4);
    let l5 = from_f64::<F>(weights.lambda5);
    let mut sum = F::zero();
    for j in 0..n {
        let g = grads.row(j);
        let norm = g.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b).sqrt();
        sum += l4 * (values[j] - s_tgt[j]).abs() + l5 * (norm - F::one()).abs();
    }
    sum / from_f64::<F>(n as f64)
}

/// On-surface loss of a model on a batch.
pub fn on_surface_loss<F: DiffFloat>(
    model: &NaisrModel<F>,
    batch: &PointBatch<F>,
    c: &[F],
    z: &ArrayView1<F>,
    weights: &LossWeights,
) -> Result<F> {
    let (values, grads) = model.phi_with_grad_batch(&batch.on_points.view(), c, z)?;
    Ok(on_surface_terms(&values.view(), &grads.view(), &batch.on_normals.view(), weights).0)
}

/// Off-surface loss of a model on a batch.
pub fn off_surface_loss<F: DiffFloat>(
    model: &NaisrModel<F>,
    batch: &PointBatch<F>,
    c: &[F],
    z: &ArrayView1<F>,
    weights: &LossWeights,
) -> Result<F> {
    let (values, grads) = model.phi_with_grad_batch(&batch.off_points.view(), c, z)?;
    Ok(off_surface_terms(&values.view(), &grads.view(), &batch.off_sdf.view(), weights))
}

/// Latent regularizer `lambda6 / sigma^2 * |z|^2`.
pub fn latent_loss<F: DiffFloat>(z: &ArrayView1<F>, weights: &LossWeights) -> F {
    let sq = z.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b);
    from_f64::<F>(weights.lambda6 / (weights.sigma_lat * weights.sigma_lat)) * sq
}

/// Per-shape total: latent + on-surface + off-surface, added in that order.
pub fn total_loss<F: DiffFloat>(
    model: &NaisrModel<F>,
    batch: &PointBatch<F>,
    c: &[F],
    z: &ArrayView1<F>,
    weights: &LossWeights,
) -> Result<F> {
    let lat = latent_loss(z, weights);
    let on = on_surface_loss(model, batch, c, z, weights)?;
    let off = off_surface_loss(model, batch, c, z, weights)?;
    Ok(lat + on + off)
}

fn sign<F: DiffFloat>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// One fused forward/backward pass of the per-shape loss: returns the loss
/// value, gradients with respect to network parameters (unless
/// `accumulate_params` is false), the latent code, and the covariates, plus
/// degeneracy diagnostics. The gradient is exact, including the paths
/// through the spatial gradient of the field.
pub fn total_loss_backward<F: DiffFloat>(
    model: &NaisrModel<F>,
    batch: &PointBatch<F>,
    c: &[F],
    z: &ArrayView1<F>,
    weights: &LossWeights,
    accumulate_params: bool,
) -> Result<(F, PhiGrads<F>, LossStats)> {
    let n_on = batch.n_on();
    let n_off = batch.n_off();
    let n = n_on + n_off;
    let d = model.spatial();
    if n == 0 {
        return Err(Error::Config("empty point batch".into()));
    }
    let all = concatenate(Axis(0), &[batch.on_points.view(), batch.off_points.view()]).unwrap();
    let fwd = model.phi_train_batch(&all.view(), c, z)?;
    if let Some(j) = fwd
        .values
        .iter()
        .position(|v| !v.is_finite())
        .or_else(|| (0..n).find(|&j| fwd.grad.row(j).iter().any(|v| !v.is_finite())))
    {
        return Err(Error::Numerical(format!("non-finite field value at point {j}")));
    }

    let values = &fwd.values;
    let grads = &fwd.grad;
    let on_vals = values.slice(s![..n_on]);
    let on_grads = grads.slice(s![..n_on, ..]);
    let off_vals = values.slice(s![n_on..]);
    let off_grads = grads.slice(s![n_on.., ..]);

    let lat = latent_loss(z, weights);
    let (on, stats) =
        on_surface_terms(&on_vals, &on_grads, &batch.on_normals.view(), weights);
    let off = off_surface_terms(&off_vals, &off_grads, &batch.off_sdf.view(), weights);
    let loss = lat + on + off;

    // Per-point cotangents.
    let mut value_bar = Array1::<F>::zeros(n);
    let mut grad_bar = Array2::<F>::zeros((n, d));
    let inv_on = if n_on > 0 { from_f64::<F>(1.0 / n_on as f64) } else { F::zero() };
    let inv_off = if n_off > 0 { from_f64::<F>(1.0 / n_off as f64) } else { F::zero() };
    let l1 = from_f64::<F>(weights.lambda1);
    let l2 = from_f64::<F>(weights.lambda2);
    let l3 = from_f64::<F>(weights.lambda3);
    let l4 = from_f64::<F>(weights.lambda4);
    let l5 = from_f64::<F>(weights.lambda5);

    for j in 0..n_on {
        let g = grads.row(j);
        let norm = g.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b).sqrt();
        value_bar[j] = inv_on * l2 * sign(values[j]);
        if norm > F::zero() {
            let eik_coef = inv_on * l1 * sign(norm - F::one()) / norm;
            let nrm = batch.on_normals.row(j);
            let dot = g.iter().zip(nrm.iter()).map(|(a, b)| *a * *b).fold(F::zero(), |a, b| a + b);
            // d(1 - <g, n>/|g|)/dg = -(n/|g| - <g,n> g / |g|^3)
            let inv_norm = F::one() / norm;
            let inv_norm3 = inv_norm * inv_norm * inv_norm;
            for k in 0..d {
                let neu_term = -(nrm[k] * inv_norm - dot * g[k] * inv_norm3);
                grad_bar[[j, k]] = eik_coef * g[k] + inv_on * l3 * neu_term;
            }
        }
    }
    for (jj, j) in (n_on..n).enumerate() {
        let g = grads.row(j);
        let norm = g.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b).sqrt();
        value_bar[j] = inv_off * l4 * sign(values[j] - batch.off_sdf[jj]);
        if norm > F::zero() {
            let eik_coef = inv_off * l5 * sign(norm - F::one()) / norm;
            for k in 0..d {
                grad_bar[[j, k]] = eik_coef * g[k];
            }
        }
    }

    let mut grads_out = model.phi_vjp(&fwd, &value_bar.view(), &grad_bar.view(), accumulate_params)?;
    let lat_coef = from_f64::<F>(2.0 * weights.lambda6 / (weights.sigma_lat * weights.sigma_lat));
    ndarray::Zip::from(&mut grads_out.z).and(z).for_each(|g, &zv| *g += lat_coef * zv);
    Ok((loss, grads_out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_latent, CovariateNormalizer, ModelDims};
    use ndarray::array;

    fn weights_default() -> LossWeights {
        LossWeights::from_counts(750, 500, 250, 256)
    }

    #[test]
    fn default_weights_follow_counts() {
        let w = weights_default();
        assert_eq!(w.lambda1, 10.0 / 750.0);
        assert_eq!(w.lambda2, 0.06);
        assert_eq!(w.lambda3, 0.02);
        assert_eq!(w.lambda4, 0.4);
        assert_eq!(w.lambda5, 10.0 / 750.0);
        assert_eq!(w.lambda6, 2.0 / 256.0);
        assert_eq!(w.sigma_lat, 0.01);
    }

    #[test]
    fn perfect_sdf_scores_zero_on_surface() {
        let w = weights_default();
        let values = array![0.0, 0.0];
        let grads = array![[1.0, 0.0], [0.0, 1.0]];
        let normals = array![[1.0, 0.0], [0.0, 1.0]];
        let (loss, stats) =
            on_surface_terms(&values.view(), &grads.view(), &normals.view(), &w);
        assert_eq!(loss, 0.0);
        assert_eq!(stats.degenerate_gradients, 0);
    }

    #[test]
    fn single_point_on_surface_plugin() {
        // phi = 0.1 with a unit aligned gradient leaves only the Dirichlet
        // term: 0.06 * 0.1.
        let w = weights_default();
        let values = array![0.1f64];
        let grads = array![[1.0, 0.0]];
        let normals = array![[1.0, 0.0]];
        let (loss, _) = on_surface_terms(&values.view(), &grads.view(), &normals.view(), &w);
        assert!((loss - 0.006).abs() < 1e-15, "got {loss}");
    }

    #[test]
    fn antiparallel_normal_pays_two_lambda3() {
        let w = weights_default();
        let values = array![0.0];
        let grads = array![[1.0, 0.0]];
        let normals = array![[-1.0, 0.0]];
        let (loss, _) = on_surface_terms(&values.view(), &grads.view(), &normals.view(), &w);
        assert!((loss - 2.0 * w.lambda3).abs() < 1e-15, "got {loss}");
    }

    #[test]
    fn degenerate_gradient_pins_alignment_term() {
        let w = weights_default();
        let values = array![0.0];
        let grads = array![[0.0, 0.0]];
        let normals = array![[1.0, 0.0]];
        let (loss, stats) = on_surface_terms(&values.view(), &grads.view(), &normals.view(), &w);
        // Eikonal |0 - 1| = 1 plus the pinned alignment term 1.
        assert!((loss - (w.lambda1 + w.lambda3)).abs() < 1e-15);
        assert_eq!(stats.degenerate_gradients, 1);
    }

    #[test]
    fn single_point_off_surface_plugin() {
        let w = weights_default();
        let values = array![0.2f64];
        let grads = array![[1.0, 0.0]];
        let tgt = array![0.5];
        let loss = off_surface_terms(&values.view(), &grads.view(), &tgt.view(), &w);
        assert!((loss - 0.12).abs() < 1e-15, "got {loss}");
    }

    #[test]
    fn off_surface_matching_targets_scores_zero() {
        let w = weights_default();
        let values = array![0.5, -0.25];
        let grads = array![[0.6, 0.8], [1.0, 0.0]];
        let tgt = array![0.5, -0.25];
        let loss = off_surface_terms(&values.view(), &grads.view(), &tgt.view(), &w);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn off_surface_loss_is_order_invariant() {
        let w = weights_default();
        let values = array![0.2, -0.4, 0.9];
        let grads = array![[1.0, 0.0], [0.2, 0.4], [0.0, 1.5]];
        let tgt = array![0.1, 0.2, 0.3];
        let a: f64 = off_surface_terms(&values.view(), &grads.view(), &tgt.view(), &w);
        let values2 = array![0.9, 0.2, -0.4];
        let grads2 = array![[0.0, 1.5], [1.0, 0.0], [0.2, 0.4]];
        let tgt2 = array![0.3, 0.1, 0.2];
        let b = off_surface_terms(&values2.view(), &grads2.view(), &tgt2.view(), &w);
        assert!((a - b).abs() < 1e-15 * a.abs().max(1.0));
    }

    #[test]
    fn latent_loss_plugin() {
        let w = weights_default();
        // |z|^2 = 1 with lambda6 = 2/256 and sigma = 0.01.
        let z = array![1.0f64];
        assert!((latent_loss(&z.view(), &w) - 78.125).abs() < 1e-12);
        let z0 = array![0.0f64, 0.0];
        assert_eq!(latent_loss(&z0.view(), &w), 0.0);
        let z2 = array![2.0f64];
        assert!((latent_loss(&z2.view(), &w) - 4.0 * 78.125).abs() < 1e-11);
    }

    fn tiny_model(seed: u64) -> NaisrModel<f64> {
        let dims = ModelDims {
            spatial: 2,
            covariates: 2,
            latent: 4,
            layers: 4,
            hidden: 8,
        };
        NaisrModel::init(
            dims,
            CovariateNormalizer::identity(2),
            vec!["a".into(), "b".into()],
            seed,
        )
        .unwrap()
    }

    fn tiny_batch(seed: u64) -> PointBatch<f64> {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(seed, "test.batch", 0);
        let n_on = 5;
        let n_off = 3;
        let on_points = Array2::from_shape_fn((n_on, 2), |_| rng.random_range(-1.0..1.0));
        let on_normals = Array2::from_shape_fn((n_on, 2), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let off_points = Array2::from_shape_fn((n_off, 2), |_| rng.random_range(-1.0..1.0));
        let off_sdf = Array1::from_shape_fn(n_off, |_| rng.random_range(-0.5..0.5));
        PointBatch::new(on_points, on_normals, off_points, off_sdf).unwrap()
    }

    #[test]
    fn total_is_exact_sum_of_components() {
        let model = tiny_model(1);
        let batch = tiny_batch(2);
        let z = sample_latent::<f64>(4, 0.3, 5, "test.z");
        let c = [0.4, -0.2];
        let w = weights_default();
        let total = total_loss(&model, &batch, &c, &z.view(), &w).unwrap();
        let lat = latent_loss(&z.view(), &w);
        let on = on_surface_loss(&model, &batch, &c, &z.view(), &w).unwrap();
        let off = off_surface_loss(&model, &batch, &c, &z.view(), &w).unwrap();
        assert_eq!(total, lat + on + off);
        assert!(total >= 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let model = tiny_model(3);
        let batch = tiny_batch(4);
        let z = sample_latent::<f64>(4, 0.3, 6, "test.z");
        let c = [0.45, -0.35];
        let w = weights_default();

        let (loss0, grads, _) =
            total_loss_backward(&model, &batch, &c, &z.view(), &w, true).unwrap();
        assert!(loss0.is_finite());

        let eval = |m: &NaisrModel<f64>, cv: &[f64], zv: &ArrayView1<f64>| -> f64 {
            total_loss_backward(m, &batch, cv, zv, &w, false).unwrap().0
        };

        // Guard against |.| kinks: the FD step must not cross a sign change.
        let (values, gr) = model
            .phi_with_grad_batch(
                &concatenate(Axis(0), &[batch.on_points.view(), batch.off_points.view()])
                    .unwrap()
                    .view(),
                &c,
                &z.view(),
            )
            .unwrap();
        for (j, v) in values.iter().enumerate() {
            assert!(v.abs() > 1e-3, "point {j} too close to a Dirichlet kink");
            let norm = gr.row(j).iter().map(|g| g * g).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() > 1e-3, "point {j} too close to the Eikonal kink");
        }

        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-10);

        // Parameter gradients (subsample for speed).
        let mut m = model.clone();
        let n_t = m.template_params.len();
        for idx in (0..n_t).step_by(17) {
            let orig = m.template_params[idx];
            m.template_params[idx] = orig + h;
            let lp = eval(&m, &c, &z.view());
            m.template_params[idx] = orig - h;
            let lm = eval(&m, &c, &z.view());
            m.template_params[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.template[idx];
            assert!(rel(an, fd) < 1e-3 || (an - fd).abs() < 1e-9, "template[{idx}]: {an} vs {fd}");
        }
        for s in 0..2 {
            let n_s = m.subnet_params[s].len();
            for idx in (0..n_s).step_by(23) {
                let orig = m.subnet_params[s][idx];
                m.subnet_params[s][idx] = orig + h;
                let lp = eval(&m, &c, &z.view());
                m.subnet_params[s][idx] = orig - h;
                let lm = eval(&m, &c, &z.view());
                m.subnet_params[s][idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.subnets[s][idx];
                assert!(
                    rel(an, fd) < 1e-3 || (an - fd).abs() < 1e-9,
                    "subnet{s}[{idx}]: {an} vs {fd}"
                );
            }
        }
        // Latent gradient.
        let mut zp = z.clone();
        for idx in 0..4 {
            let orig = zp[idx];
            zp[idx] = orig + h;
            let lp = eval(&model, &c, &zp.view());
            zp[idx] = orig - h;
            let lm = eval(&model, &c, &zp.view());
            zp[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.z[idx];
            assert!(rel(an, fd) < 1e-3, "z[{idx}]: {an} vs {fd}");
        }
        // Covariate gradient.
        for idx in 0..2 {
            let mut cp = c;
            cp[idx] = c[idx] + h;
            let lp = eval(&model, &cp, &z.view());
            cp[idx] = c[idx] - h;
            let lm = eval(&model, &cp, &z.view());
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.c[idx];
            assert!(rel(an, fd) < 1e-3, "c[{idx}]: {an} vs {fd}");
        }
    }

    #[test]
    fn zero_lambda4_ignores_targets() {
        let model = tiny_model(5);
        let batch = tiny_batch(6);
        let z = sample_latent::<f64>(4, 0.3, 7, "test.z");
        let c = [0.2, 0.1];
        let mut w = weights_default();
        w.lambda4 = 0.0;
        let (l1, g1, _) = total_loss_backward(&model, &batch, &c, &z.view(), &w, true).unwrap();
        let mut batch2 = batch.clone();
        batch2.off_sdf.mapv_inplace(|v| v + 0.7);
        let (l2, g2, _) = total_loss_backward(&model, &batch2, &c, &z.view(), &w, true).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1.template, g2.template);
        assert_eq!(g1.z, g2.z);
        assert_eq!(g1.c, g2.c);
        for (a, b) in g1.subnets.iter().zip(&g2.subnets) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn unit_normal_validation() {
        let on = array![[0.0, 0.0]];
        let bad = array![[0.5, 0.5]];
        let off = Array2::<f64>::zeros((0, 2));
        let sdf = Array1::<f64>::zeros(0);
        assert!(matches!(
            PointBatch::new(on, bad, off, sdf),
            Err(Error::Validation(_))
        ));
    }
}
