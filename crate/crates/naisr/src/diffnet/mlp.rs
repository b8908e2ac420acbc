//! Batched MLP evaluation: values, forward-mode spatial tangents, and the
//! reverse pass that accumulates parameter and input gradients for losses
//! depending on both outputs and Jacobians (mixed second derivatives).
//!
//! Shapes follow one convention: point batches are `n x width` matrices, and
//! tangents are carried as one `n x width` matrix per spatial direction.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};

use super::{from_f64, DiffFloat, InputSlice, MlpSpec};
use crate::{Error, Result};

/// Tangent seeding for a forward pass.
#[derive(Clone, Copy)]
pub enum Seed<'a, F: DiffFloat> {
    /// Tangent `d` is the unit vector on input column `start + d`; used when
    /// differentiating with respect to a spatial slice of the input itself.
    UnitColumns { start: usize, dim: usize },
    /// Explicit tangent matrices (`n x input_width` each); used when the
    /// input is itself a function of upstream quantities.
    Dense(&'a [Array2<F>]),
}

pub(crate) struct LayerTape<F: DiffFloat> {
    /// Post-concat layer input, `n x layer_in`.
    input: Array2<F>,
    /// Dense tangent inputs, one per direction; empty for a unit-seeded
    /// first layer.
    tin: Vec<Array2<F>>,
    /// sin of the scaled pre-activation (sine layers only).
    sinq: Option<Array2<F>>,
    /// cos of the scaled pre-activation (sine layers only).
    cosq: Option<Array2<F>>,
    /// `W . J_in` per direction (sine layers only).
    m: Vec<Array2<F>>,
}

/// Saved intermediates of one tangent-carrying forward pass.
pub struct Tape<F: DiffFloat> {
    layers: Vec<LayerTape<F>>,
    dim: usize,
    n: usize,
    seed_unit: Option<usize>,
}

impl<F: DiffFloat> Tape<F> {
    pub fn n_points(&self) -> usize {
        self.n
    }
}

pub struct VjpOptions {
    /// Accumulate weight/bias gradients (skippable when only input gradients
    /// are needed, e.g. latent-only optimization).
    pub accumulate_params: bool,
    /// Return the cotangent of the input matrix.
    pub want_input_grad: bool,
    /// Return the cotangent of the dense tangent seeds.
    pub want_seed_grad: bool,
}

fn layer_views<'a, F: DiffFloat>(
    spec: &MlpSpec,
    params: &'a [F],
    k: usize,
) -> (ArrayView2<'a, F>, ArrayView1<'a, F>) {
    let off = spec.layer_offset(k);
    let (win, wout) = (spec.layer_in(k), spec.layer_out(k));
    let w = ArrayView2::from_shape((wout, win), &params[off..off + win * wout]).unwrap();
    let b = ArrayView1::from_shape(wout, &params[off + win * wout..off + win * wout + wout]).unwrap();
    (w, b)
}

fn check_args<F: DiffFloat>(spec: &MlpSpec, params: &[F], x: &ArrayView2<F>) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::Dimension(format!(
            "parameter vector has {} entries, spec implies {}",
            params.len(),
            spec.param_count()
        )));
    }
    if x.ncols() != spec.input_width() {
        return Err(Error::Dimension(format!(
            "input width {} does not match spec input width {}",
            x.ncols(),
            spec.input_width()
        )));
    }
    Ok(())
}

/// Applies `sin(omega q)` in place and returns `cos(omega q)`.
fn sin_cos_inplace<F: DiffFloat>(q: &mut Array2<F>, omega: F) -> Array2<F> {
    let mut c = Array2::zeros(q.raw_dim());
    Zip::from(&mut *q).and(&mut c).for_each(|qv, cv| {
        let (s, co) = (omega * *qv).sin_cos_fast();
        *qv = s;
        *cv = co;
    });
    c
}

/// Row-broadcast of a weight column to `n` rows.
fn broadcast_col<F: DiffFloat>(col: ArrayView1<F>, n: usize) -> Array2<F> {
    col.broadcast((n, col.len())).unwrap().to_owned()
}

/// Indicator block for the skip-slice tangent of a unit seed.
fn unit_slice_block<F: DiffFloat>(n: usize, slice: InputSlice, col: usize) -> Array2<F> {
    let mut block = Array2::zeros((n, slice.len));
    if col >= slice.start && col < slice.end() {
        block.column_mut(col - slice.start).fill(F::one());
    }
    block
}

/// Value-only batched forward pass.
pub fn forward<F: DiffFloat>(spec: &MlpSpec, params: &[F], x: &ArrayView2<F>) -> Result<Array2<F>> {
    check_args(spec, params, x)?;
    let omega: F = from_f64(spec.omega0);
    let mut a = x.to_owned();
    for k in 0..spec.n_layers() {
        let (w, b) = layer_views(spec, params, k);
        let input = if spec.skip_layer == Some(k) {
            let sl = spec.skip_slice;
            concatenate(Axis(1), &[a.view(), x.slice(s![.., sl.start..sl.end()])]).unwrap()
        } else {
            a
        };
        let mut q = input.dot(&w.t());
        q += &b;
        if spec.is_sine(k) {
            q.mapv_inplace(|v| (omega * v).sin_fast());
        }
        a = q;
    }
    Ok(a)
}

/// Batched forward pass carrying tangents for `seed.dim` directions.
///
/// Returns the outputs, the output tangents (exact Jacobian columns when the
/// seeds are unit columns), and the tape for [`vjp`].
pub fn forward_tangent<F: DiffFloat>(
    spec: &MlpSpec,
    params: &[F],
    x: &ArrayView2<F>,
    seed: Seed<'_, F>,
) -> Result<(Array2<F>, Vec<Array2<F>>, Tape<F>)> {
    check_args(spec, params, x)?;
    let n = x.nrows();
    let omega: F = from_f64(spec.omega0);
    let (dim, seed_unit) = match seed {
        Seed::UnitColumns { start, dim } => {
            if start + dim > spec.input_width() {
                return Err(Error::Dimension(format!(
                    "tangent slice {}..{} outside input width {}",
                    start,
                    start + dim,
                    spec.input_width()
                )));
            }
            (dim, Some(start))
        }
        Seed::Dense(seeds) => {
            for sd in seeds {
                if sd.dim() != (n, spec.input_width()) {
                    return Err(Error::Dimension(format!(
                        "seed shape {:?} does not match input {:?}",
                        sd.dim(),
                        (n, spec.input_width())
                    )));
                }
            }
            (seeds.len(), None)
        }
    };

    let mut a = x.to_owned();
    let mut t: Vec<Array2<F>> = match seed {
        Seed::Dense(seeds) => seeds.to_vec(),
        Seed::UnitColumns { .. } => Vec::new(),
    };
    let mut layers = Vec::with_capacity(spec.n_layers());

    for k in 0..spec.n_layers() {
        let (w, b) = layer_views(spec, params, k);
        let sl = spec.skip_slice;
        let (input, tin): (Array2<F>, Vec<Array2<F>>) = if spec.skip_layer == Some(k) {
            let inp =
                concatenate(Axis(1), &[a.view(), x.slice(s![.., sl.start..sl.end()])]).unwrap();
            let tin = (0..dim)
                .map(|d| {
                    let tail = match seed {
                        Seed::UnitColumns { start, .. } => unit_slice_block(n, sl, start + d),
                        Seed::Dense(seeds) => {
                            seeds[d].slice(s![.., sl.start..sl.end()]).to_owned()
                        }
                    };
                    concatenate(Axis(1), &[t[d].view(), tail.view()]).unwrap()
                })
                .collect();
            (inp, tin)
        } else {
            (a, std::mem::take(&mut t))
        };

        let mut q = input.dot(&w.t());
        q += &b;
        let m: Vec<Array2<F>> = if k == 0 && seed_unit.is_some() {
            let start = seed_unit.unwrap();
            (0..dim).map(|d| broadcast_col(w.column(start + d), n)).collect()
        } else {
            tin.iter().map(|td| td.dot(&w.t())).collect()
        };

        if spec.is_sine(k) {
            let cosq = sin_cos_inplace(&mut q, omega);
            let sinq = q;
            a = sinq.clone();
            t = m
                .iter()
                .map(|md| {
                    let mut td = md.clone();
                    Zip::from(&mut td).and(&cosq).for_each(|tv, &cv| *tv = omega * cv * *tv);
                    td
                })
                .collect();
            layers.push(LayerTape {
                input,
                tin,
                sinq: Some(sinq),
                cosq: Some(cosq),
                m,
            });
        } else {
            a = q;
            t = m;
            layers.push(LayerTape {
                input,
                tin,
                sinq: None,
                cosq: None,
                m: Vec::new(),
            });
        }
    }

    Ok((a, t, Tape { layers, dim, n, seed_unit }))
}

/// Reverse pass over a taped forward: accumulates exact parameter gradients
/// (including paths through the tangent computation) and returns input and
/// seed cotangents on request.
pub fn vjp<F: DiffFloat>(
    spec: &MlpSpec,
    params: &[F],
    tape: &Tape<F>,
    y_bar: &Array2<F>,
    t_bar_out: &[Array2<F>],
    opts: &VjpOptions,
    grad_params: &mut [F],
) -> Result<(Option<Array2<F>>, Option<Vec<Array2<F>>>)> {
    if grad_params.len() != spec.param_count() {
        return Err(Error::Dimension(format!(
            "gradient vector has {} entries, spec implies {}",
            grad_params.len(),
            spec.param_count()
        )));
    }
    if t_bar_out.len() != tape.dim {
        return Err(Error::Dimension(format!(
            "{} output tangent cotangents for a tape with {} directions",
            t_bar_out.len(),
            tape.dim
        )));
    }
    if opts.want_seed_grad && tape.seed_unit.is_some() {
        return Err(Error::Config(
            "seed gradients are only defined for dense seeds".into(),
        ));
    }
    let n = tape.n;
    let dim = tape.dim;
    let omega: F = from_f64(spec.omega0);
    let omega2 = omega * omega;

    let mut a_bar = y_bar.clone();
    let mut t_bar: Vec<Array2<F>> = t_bar_out.to_vec();
    let mut x_bar = opts
        .want_input_grad
        .then(|| Array2::<F>::zeros((n, spec.input_width())));
    let mut seed_bar = opts
        .want_seed_grad
        .then(|| vec![Array2::<F>::zeros((n, spec.input_width())); dim]);

    for k in (0..spec.n_layers()).rev() {
        let lt = &tape.layers[k];
        let (w, _) = layer_views(spec, params, k);
        let (q_bar, m_bar): (Array2<F>, Vec<Array2<F>>) = if spec.is_sine(k) {
            let sinq = lt.sinq.as_ref().unwrap();
            let cosq = lt.cosq.as_ref().unwrap();
            let m_bar: Vec<Array2<F>> = t_bar
                .iter()
                .map(|tb| {
                    let mut mb = tb.clone();
                    Zip::from(&mut mb).and(cosq).for_each(|mv, &cv| *mv = omega * cv * *mv);
                    mb
                })
                .collect();
            // q_bar = omega cos . a_bar - omega^2 sin . sum_d m[d] . t_bar[d]
            let mut acc = Array2::<F>::zeros(a_bar.raw_dim());
            for d in 0..dim {
                Zip::from(&mut acc)
                    .and(&lt.m[d])
                    .and(&t_bar[d])
                    .for_each(|av, &mv, &tv| *av += mv * tv);
            }
            let mut q_bar = Array2::<F>::zeros(a_bar.raw_dim());
            Zip::from(&mut q_bar)
                .and(cosq)
                .and(sinq)
                .and(&a_bar)
                .and(&acc)
                .for_each(|qv, &cv, &sv, &av, &accv| {
                    *qv = omega * cv * av - omega2 * sv * accv;
                });
            (q_bar, m_bar)
        } else {
            (
                std::mem::replace(&mut a_bar, Array2::zeros((0, 0))),
                std::mem::take(&mut t_bar),
            )
        };

        let off = spec.layer_offset(k);
        let (win, wout) = (spec.layer_in(k), spec.layer_out(k));
        if opts.accumulate_params {
            let mut wgrad =
                ArrayViewMut2::from_shape((wout, win), &mut grad_params[off..off + win * wout])
                    .unwrap();
            general_mat_mul(F::one(), &q_bar.t(), &lt.input, F::one(), &mut wgrad);
            if k == 0 && tape.seed_unit.is_some() {
                let start = tape.seed_unit.unwrap();
                for (d, mb) in m_bar.iter().enumerate() {
                    let colsum = mb.sum_axis(Axis(0));
                    let mut col = wgrad.column_mut(start + d);
                    col += &colsum;
                }
            } else {
                for (d, mb) in m_bar.iter().enumerate() {
                    general_mat_mul(F::one(), &mb.t(), &lt.tin[d], F::one(), &mut wgrad);
                }
            }
            let bsum = q_bar.sum_axis(Axis(0));
            for (g, v) in grad_params[off + win * wout..off + win * wout + wout]
                .iter_mut()
                .zip(bsum.iter())
            {
                *g += *v;
            }
        }

        let need_in = k > 0 || opts.want_input_grad;
        let in_bar = need_in.then(|| q_bar.dot(&w));
        let unit_first = k == 0 && tape.seed_unit.is_some();
        let need_tin = (k > 0 || opts.want_seed_grad) && !unit_first;
        let tin_bar: Option<Vec<Array2<F>>> =
            need_tin.then(|| m_bar.iter().map(|mb| mb.dot(&w)).collect());

        if k == 0 {
            if let (Some(xb), Some(ib)) = (x_bar.as_mut(), in_bar.as_ref()) {
                *xb += ib;
            }
            if let (Some(sb), Some(tb)) = (seed_bar.as_mut(), tin_bar.as_ref()) {
                for (s, t) in sb.iter_mut().zip(tb) {
                    *s += t;
                }
            }
        } else if spec.skip_layer == Some(k) {
            let wprev = spec.layer_widths[k];
            let sl = spec.skip_slice;
            let ib = in_bar.unwrap();
            let (left, right) = ib.view().split_at(Axis(1), wprev);
            a_bar = left.to_owned();
            if let Some(xb) = x_bar.as_mut() {
                let mut xs = xb.slice_mut(s![.., sl.start..sl.end()]);
                xs += &right;
            }
            let tb = tin_bar.unwrap();
            t_bar = tb
                .iter()
                .map(|tbd| tbd.slice(s![.., ..wprev]).to_owned())
                .collect();
            if let Some(sb) = seed_bar.as_mut() {
                for (sbd, tbd) in sb.iter_mut().zip(&tb) {
                    let mut ss = sbd.slice_mut(s![.., sl.start..sl.end()]);
                    ss += &tbd.slice(s![.., wprev..]);
                }
            }
        } else {
            a_bar = in_bar.unwrap();
            t_bar = tin_bar.unwrap();
        }
    }

    Ok((x_bar, seed_bar))
}

/// Single-input forward evaluation (the scalar contract; batching is the
/// vectorized form of the same function).
pub fn mlp_forward<F: DiffFloat>(spec: &MlpSpec, params: &[F], input: &[F]) -> Result<Vec<F>> {
    if input.len() != spec.input_width() {
        return Err(Error::Dimension(format!(
            "input length {} does not match spec input width {}",
            input.len(),
            spec.input_width()
        )));
    }
    let x = ArrayView2::from_shape((1, input.len()), input).unwrap();
    let y = forward(spec, params, &x)?;
    Ok(y.row(0).to_vec())
}

/// Single-input forward with the exact Jacobian with respect to the spatial
/// input slice. The Jacobian has one row per output and one column per
/// spatial direction.
pub fn mlp_forward_jac<F: DiffFloat>(
    spec: &MlpSpec,
    params: &[F],
    input: &[F],
    spatial: InputSlice,
) -> Result<(Vec<F>, Array2<F>)> {
    if input.len() != spec.input_width() {
        return Err(Error::Dimension(format!(
            "input length {} does not match spec input width {}",
            input.len(),
            spec.input_width()
        )));
    }
    if spatial.end() > spec.input_width() {
        return Err(Error::Dimension(format!(
            "spatial slice {}..{} outside input width {}",
            spatial.start,
            spatial.end(),
            spec.input_width()
        )));
    }
    let x = ArrayView2::from_shape((1, input.len()), input).unwrap();
    let (y, t, _) = forward_tangent(
        spec,
        params,
        &x,
        Seed::UnitColumns {
            start: spatial.start,
            dim: spatial.len,
        },
    )?;
    let out = spec.output_width();
    let mut jac = Array2::zeros((out, spatial.len));
    for (d, td) in t.iter().enumerate() {
        for r in 0..out {
            jac[[r, d]] = td[[0, r]];
        }
    }
    Ok((y.row(0).to_vec(), jac))
}

/// Scalar loss over per-point outputs and Jacobian slabs, returning the loss
/// value and its cotangents. Implemented by closures in tests and by the
/// shape losses.
pub trait PointLoss<F: DiffFloat> {
    fn eval(&self, outputs: &Array2<F>, jacobians: &[Array2<F>]) -> (F, Array2<F>, Vec<Array2<F>>);
}

impl<F, T> PointLoss<F> for T
where
    F: DiffFloat,
    T: Fn(&Array2<F>, &[Array2<F>]) -> (F, Array2<F>, Vec<Array2<F>>),
{
    fn eval(&self, outputs: &Array2<F>, jacobians: &[Array2<F>]) -> (F, Array2<F>, Vec<Array2<F>>) {
        self(outputs, jacobians)
    }
}

fn first_nonfinite_row<F: DiffFloat>(m: &Array2<F>) -> Option<usize> {
    m.rows()
        .into_iter()
        .position(|r| r.iter().any(|v| !v.is_finite()))
}

/// Evaluates a batch, applies the loss functional, and returns the exact
/// gradient of the scalar loss with respect to every parameter (including
/// contributions through the Jacobian slabs) and with respect to the inputs.
pub fn loss_backward<F: DiffFloat>(
    spec: &MlpSpec,
    params: &[F],
    inputs: &Array2<F>,
    spatial: InputSlice,
    loss: &dyn PointLoss<F>,
) -> Result<(F, Vec<F>, Array2<F>)> {
    let (y, t, tape) = forward_tangent(
        spec,
        params,
        &inputs.view(),
        Seed::UnitColumns {
            start: spatial.start,
            dim: spatial.len,
        },
    )?;
    if let Some(i) = first_nonfinite_row(&y).or_else(|| t.iter().find_map(|td| first_nonfinite_row(td))) {
        return Err(Error::Numerical(format!("non-finite network value at point {i}")));
    }
    let (value, y_bar, t_bar) = loss.eval(&y, &t);
    let mut grad = vec![F::zero(); spec.param_count()];
    let (x_bar, _) = vjp(
        spec,
        params,
        &tape,
        &y_bar,
        &t_bar,
        &VjpOptions {
            accumulate_params: true,
            want_input_grad: true,
            want_seed_grad: false,
        },
        &mut grad,
    )?;
    Ok((value, grad, x_bar.unwrap()))
}
