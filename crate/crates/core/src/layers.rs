//! Differentiable building blocks of the generator.
//!
//! Every `*_fwd` returns its output together with a cache, and the matching
//! `*_bwd` consumes that cache. Parameter gradients are *accumulated* into
//! caller-owned buffers, so a whole unrolled sequence can be backpropagated
//! without intermediate allocations per parameter. Callers zero those
//! buffers once per optimizer step.

use serde::{Deserialize, Serialize};

use crate::error::{FaeError, Result};
use crate::linalg::{concat, log_softmax, sigmoid, softmax, Matrix, Vector};

/// Structure imposed on a learned factor matrix Σ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaShape {
    #[default]
    Full,
    Diagonal,
}

fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.rows(), m.cols())
}

// ---------------------------------------------------------------------------
// Factored linear map: out = U · Σ · V · h

#[derive(Clone, Debug)]
pub struct FactoredCache {
    input: Vector,
    projected: Vector,
    mixed: Vector,
}

pub struct FactoredGrads<'a> {
    pub du: &'a mut Matrix,
    pub dsigma: &'a mut Matrix,
    pub dv: &'a mut Matrix,
}

pub fn factored_linear_fwd(
    u: &Matrix,
    sigma: &Matrix,
    v: &Matrix,
    h: &Vector,
) -> Result<(Vector, FactoredCache)> {
    if sigma.rows() != sigma.cols() || sigma.rows() != v.rows() {
        return Err(FaeError::shape("factored_linear Σ/V", shape_str(sigma), shape_str(v)));
    }
    if u.cols() != sigma.cols() {
        return Err(FaeError::shape("factored_linear U/Σ", shape_str(u), shape_str(sigma)));
    }
    let projected = v.matvec(h)?;
    let mixed = sigma.matvec(&projected)?;
    let out = u.matvec(&mixed)?;
    Ok((
        out,
        FactoredCache {
            input: h.clone(),
            projected,
            mixed,
        },
    ))
}

/// Returns the gradient with respect to `h`.
pub fn factored_linear_bwd(
    u: &Matrix,
    sigma: &Matrix,
    v: &Matrix,
    cache: &FactoredCache,
    d_out: &Vector,
    sigma_shape: SigmaShape,
    grads: FactoredGrads<'_>,
) -> Result<Vector> {
    if d_out.dim() != u.rows() {
        return Err(FaeError::shape("factored_linear_bwd", shape_str(u), d_out.dim()));
    }
    grads.du.add_outer(d_out, &cache.mixed)?;
    let d_mixed = u.matvec_t(d_out)?;
    match sigma_shape {
        SigmaShape::Full => grads.dsigma.add_outer(&d_mixed, &cache.projected)?,
        SigmaShape::Diagonal => {
            if grads.dsigma.shape() != sigma.shape() {
                return Err(FaeError::shape(
                    "factored_linear_bwd dΣ",
                    shape_str(grads.dsigma),
                    shape_str(sigma),
                ));
            }
            for i in 0..sigma.rows() {
                let g = grads.dsigma.get(i, i) + d_mixed[i] * cache.projected[i];
                grads.dsigma.set(i, i, g);
            }
        }
    }
    let d_projected = sigma.matvec_t(&d_mixed)?;
    grads.dv.add_outer(&d_projected, &cache.input)?;
    v.matvec_t(&d_projected)
}

// ---------------------------------------------------------------------------
// Additive attention over a set of encoded views.
//
//   a_j = Wa · tanh(Wv · view_j + Wz · h_prev),  alpha = softmax(a)
//   h_a = Σ_j alpha_j · view_j

#[derive(Clone, Debug)]
pub struct AttentionCache {
    views: Vec<Vector>,
    h_prev: Vector,
    hidden: Vec<Vector>,
    alpha: Vector,
}

impl AttentionCache {
    pub fn alpha(&self) -> &Vector {
        &self.alpha
    }
}

pub struct AttentionGrads<'a> {
    pub dwa: &'a mut Matrix,
    pub dwv: &'a mut Matrix,
    pub dwz: &'a mut Matrix,
}

pub fn attention_fwd(
    wa: &Matrix,
    wv: &Matrix,
    wz: &Matrix,
    views: &[Vector],
    h_prev: &Vector,
) -> Result<(Vector, Vector, AttentionCache)> {
    let first = views
        .first()
        .ok_or_else(|| FaeError::Input("attention over an empty view list".into()))?;
    let dim = first.dim();
    if let Some(bad) = views.iter().find(|v| v.dim() != dim) {
        return Err(FaeError::shape("attention views", dim, bad.dim()));
    }
    if wa.rows() != 1 || wa.cols() != wv.rows() || wv.rows() != wz.rows() {
        return Err(FaeError::shape(
            "attention weights",
            shape_str(wa),
            format!("{} / {}", shape_str(wv), shape_str(wz)),
        ));
    }
    let query = wz.matvec(h_prev)?;
    let mut hidden = Vec::with_capacity(views.len());
    let mut scores = Vec::with_capacity(views.len());
    for view in views {
        let mut pre = wv.matvec(view)?;
        pre.axpy(1.0, &query)?;
        let z: Vector = pre.as_slice().iter().map(|x| x.tanh()).collect();
        scores.push(wa.matvec(&z)?[0]);
        hidden.push(z);
    }
    let alpha = softmax(&Vector::from(scores))?;
    let mut h_a = Vector::zeros(dim);
    for (view, &w) in views.iter().zip(alpha.as_slice()) {
        h_a.axpy(w, view)?;
    }
    let cache = AttentionCache {
        views: views.to_vec(),
        h_prev: h_prev.clone(),
        hidden,
        alpha: alpha.clone(),
    };
    Ok((alpha, h_a, cache))
}

/// Returns `(d_views, d_h_prev)`.
pub fn attention_bwd(
    wa: &Matrix,
    wv: &Matrix,
    wz: &Matrix,
    cache: &AttentionCache,
    d_alpha: Option<&Vector>,
    d_ha: &Vector,
    grads: AttentionGrads<'_>,
) -> Result<(Vec<Vector>, Vector)> {
    let m = cache.views.len();
    if d_ha.dim() != cache.views[0].dim() {
        return Err(FaeError::shape("attention_bwd d_ha", cache.views[0].dim(), d_ha.dim()));
    }
    if let Some(da) = d_alpha {
        if da.dim() != m {
            return Err(FaeError::shape("attention_bwd d_alpha", m, da.dim()));
        }
    }
    let alpha = cache.alpha.as_slice();
    let mut d_views: Vec<Vector> = Vec::with_capacity(m);
    let mut d_alpha_total = Vec::with_capacity(m);
    for (j, view) in cache.views.iter().enumerate() {
        let extra = d_alpha.map_or(0.0, |da| da[j]);
        d_alpha_total.push(extra + d_ha.dot(view)?);
        d_views.push(d_ha.scale(alpha[j]));
    }
    let mean: f64 = alpha.iter().zip(&d_alpha_total).map(|(a, d)| a * d).sum();
    let mut d_h_prev = Vector::zeros(cache.h_prev.dim());
    let mut d_pre_sum = Vector::zeros(wz.rows());
    for j in 0..m {
        let d_score = alpha[j] * (d_alpha_total[j] - mean);
        if d_score == 0.0 {
            continue;
        }
        let z = &cache.hidden[j];
        grads.dwa.add_outer(&Vector::from(vec![d_score]), z)?;
        let d_pre: Vector = wa
            .row(0)
            .iter()
            .zip(z.as_slice())
            .map(|(w, zi)| d_score * w * (1.0 - zi * zi))
            .collect();
        grads.dwv.add_outer(&d_pre, &cache.views[j])?;
        d_views[j].axpy(1.0, &wv.matvec_t(&d_pre)?)?;
        d_pre_sum.axpy(1.0, &d_pre)?;
    }
    grads.dwz.add_outer(&d_pre_sum, &cache.h_prev)?;
    d_h_prev.axpy(1.0, &wz.matvec_t(&d_pre_sum)?)?;
    Ok((d_views, d_h_prev))
}

// ---------------------------------------------------------------------------
// LSTM cell over the concatenation [input ; h_prev].

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_input: Matrix,
    pub w_forget: Matrix,
    pub w_output: Matrix,
    pub w_cell: Matrix,
    pub b_input: Vector,
    pub b_forget: Vector,
    pub b_output: Vector,
    pub b_cell: Vector,
}

impl LstmCellParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Matrix::zeros(hidden_dim, input_dim + hidden_dim);
        let b = || Vector::zeros(hidden_dim);
        LstmCellParams {
            input_dim,
            hidden_dim,
            w_input: w(),
            w_forget: w(),
            w_output: w(),
            w_cell: w(),
            b_input: b(),
            b_forget: b(),
            b_output: b(),
            b_cell: b(),
        }
    }

    fn gates(&self) -> [(&Matrix, &Vector); 4] {
        [
            (&self.w_input, &self.b_input),
            (&self.w_forget, &self.b_forget),
            (&self.w_output, &self.b_output),
            (&self.w_cell, &self.b_cell),
        ]
    }

    fn gates_mut(&mut self) -> [(&mut Matrix, &mut Vector); 4] {
        [
            (&mut self.w_input, &mut self.b_input),
            (&mut self.w_forget, &mut self.b_forget),
            (&mut self.w_output, &mut self.b_output),
            (&mut self.w_cell, &mut self.b_cell),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    joined: Vector,
    c_prev: Vector,
    input_gate: Vector,
    forget_gate: Vector,
    output_gate: Vector,
    candidate: Vector,
    tanh_c: Vector,
}

pub fn lstm_cell_fwd(
    p: &LstmCellParams,
    input: &Vector,
    h_prev: &Vector,
    c_prev: &Vector,
) -> Result<(Vector, Vector, LstmCache)> {
    if input.dim() != p.input_dim || h_prev.dim() != p.hidden_dim || c_prev.dim() != p.hidden_dim {
        return Err(FaeError::shape(
            "lstm_cell_fwd",
            format!("cell({}->{})", p.input_dim, p.hidden_dim),
            format!("input {}, h {}, c {}", input.dim(), h_prev.dim(), c_prev.dim()),
        ));
    }
    let joined = concat(input, h_prev);
    let [gi, gf, go, gc] = p.gates();
    let affine = |(w, b): (&Matrix, &Vector)| -> Result<Vector> {
        let mut z = w.matvec(&joined)?;
        z.axpy(1.0, b)?;
        Ok(z)
    };
    let input_gate: Vector = affine(gi)?.as_slice().iter().map(|&x| sigmoid(x)).collect();
    let forget_gate: Vector = affine(gf)?.as_slice().iter().map(|&x| sigmoid(x)).collect();
    let output_gate: Vector = affine(go)?.as_slice().iter().map(|&x| sigmoid(x)).collect();
    let candidate: Vector = affine(gc)?.as_slice().iter().map(|x| x.tanh()).collect();
    let n = p.hidden_dim;
    let c: Vector = (0..n)
        .map(|k| forget_gate[k] * c_prev[k] + input_gate[k] * candidate[k])
        .collect();
    let tanh_c: Vector = c.as_slice().iter().map(|x| x.tanh()).collect();
    let h: Vector = (0..n).map(|k| output_gate[k] * tanh_c[k]).collect();
    let cache = LstmCache {
        joined,
        c_prev: c_prev.clone(),
        input_gate,
        forget_gate,
        output_gate,
        candidate,
        tanh_c,
    };
    Ok((h, c, cache))
}

/// Returns `(d_input, d_h_prev, d_c_prev)`; parameter gradients go into `grads`.
pub fn lstm_cell_bwd(
    p: &LstmCellParams,
    cache: &LstmCache,
    dh: &Vector,
    dc: &Vector,
    grads: &mut LstmCellParams,
) -> Result<(Vector, Vector, Vector)> {
    let n = p.hidden_dim;
    if dh.dim() != n || dc.dim() != n {
        return Err(FaeError::shape("lstm_cell_bwd", n, format!("dh {}, dc {}", dh.dim(), dc.dim())));
    }
    let mut d_pre: [Vec<f64>; 4] = Default::default();
    let mut d_c_prev = Vector::zeros(n);
    for k in 0..n {
        let (i, f, o, g) = (
            cache.input_gate[k],
            cache.forget_gate[k],
            cache.output_gate[k],
            cache.candidate[k],
        );
        let tc = cache.tanh_c[k];
        let d_o = dh[k] * tc;
        let d_c = dc[k] + dh[k] * o * (1.0 - tc * tc);
        let d_i = d_c * g;
        let d_f = d_c * cache.c_prev[k];
        let d_g = d_c * i;
        d_c_prev[k] = d_c * f;
        d_pre[0].push(d_i * i * (1.0 - i));
        d_pre[1].push(d_f * f * (1.0 - f));
        d_pre[2].push(d_o * o * (1.0 - o));
        d_pre[3].push(d_g * (1.0 - g * g));
    }
    let mut d_joined = Vector::zeros(p.input_dim + n);
    for ((w, _), ((dw, db), d)) in p
        .gates()
        .into_iter()
        .zip(grads.gates_mut().into_iter().zip(d_pre))
    {
        let d = Vector::from(d);
        dw.add_outer(&d, &cache.joined)?;
        db.axpy(1.0, &d)?;
        d_joined.axpy(1.0, &w.matvec_t(&d)?)?;
    }
    let (d_input, d_h_prev) = d_joined.split(p.input_dim)?;
    Ok((d_input, d_h_prev, d_c_prev))
}

// ---------------------------------------------------------------------------
// Output head: h_s = tanh(Wg·[h_fwd ; h_bwd] + bg), logits = Wo·h_s + bo

#[derive(Clone, Debug)]
pub struct CombineCache {
    joined: Vector,
    fwd_dim: usize,
    h_s: Vector,
}

pub struct CombineGrads<'a> {
    pub dwg: &'a mut Matrix,
    pub dbg: &'a mut Vector,
    pub dwo: &'a mut Matrix,
    pub dbo: &'a mut Vector,
}

pub fn combine_output_fwd(
    wg: &Matrix,
    bg: &Vector,
    wo: &Matrix,
    bo: &Vector,
    h_fwd: &Vector,
    h_bwd: &Vector,
) -> Result<(Vector, Vector, CombineCache)> {
    if wg.cols() != h_fwd.dim() + h_bwd.dim() {
        return Err(FaeError::shape(
            "combine_output_fwd",
            shape_str(wg),
            format!("[{} ; {}]", h_fwd.dim(), h_bwd.dim()),
        ));
    }
    let joined = concat(h_fwd, h_bwd);
    let mut pre = wg.matvec(&joined)?;
    pre.axpy(1.0, bg)?;
    let h_s: Vector = pre.as_slice().iter().map(|x| x.tanh()).collect();
    let mut logits = wo.matvec(&h_s)?;
    logits.axpy(1.0, bo)?;
    Ok((
        h_s.clone(),
        logits,
        CombineCache {
            joined,
            fwd_dim: h_fwd.dim(),
            h_s,
        },
    ))
}

/// `d_hs_extra` is the gradient reaching `h_s` from outside the head (the
/// next step's attention query). Returns `(d_h_fwd, d_h_bwd)`.
pub fn combine_output_bwd(
    wg: &Matrix,
    wo: &Matrix,
    cache: &CombineCache,
    d_logits: &Vector,
    d_hs_extra: Option<&Vector>,
    grads: CombineGrads<'_>,
) -> Result<(Vector, Vector)> {
    if d_logits.dim() != wo.rows() {
        return Err(FaeError::shape("combine_output_bwd", shape_str(wo), d_logits.dim()));
    }
    grads.dwo.add_outer(d_logits, &cache.h_s)?;
    grads.dbo.axpy(1.0, d_logits)?;
    let mut d_hs = wo.matvec_t(d_logits)?;
    if let Some(extra) = d_hs_extra {
        d_hs.axpy(1.0, extra)?;
    }
    let d_pre: Vector = d_hs
        .as_slice()
        .iter()
        .zip(cache.h_s.as_slice())
        .map(|(d, h)| d * (1.0 - h * h))
        .collect();
    grads.dwg.add_outer(&d_pre, &cache.joined)?;
    grads.dbg.axpy(1.0, &d_pre)?;
    let d_joined = wg.matvec_t(&d_pre)?;
    d_joined.split(cache.fwd_dim)
}

/// Negative log-likelihood of `target` under `softmax(logits)`, and its
/// gradient with respect to the logits.
pub fn nll_loss(logits: &Vector, target: usize) -> Result<(f64, Vector)> {
    if target >= logits.dim() {
        return Err(FaeError::Input(format!(
            "target index {target} out of range for {} logits",
            logits.dim()
        )));
    }
    let log_p = log_softmax(logits)?;
    let mut d: Vector = log_p.as_slice().iter().map(|x| x.exp()).collect();
    d[target] -= 1.0;
    Ok((-log_p[target], d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{diag, matmul, SeededRng};

    const STEP: f64 = 1e-5;

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / (1e-8f64).max(a.abs() + n.abs())
    }

    fn rand_m(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, rng.draw_uniform(-1.0, 1.0, r * c).into_vec()).unwrap()
    }

    fn rand_v(rng: &mut SeededRng, n: usize) -> Vector {
        rng.draw_uniform(-1.0, 1.0, n)
    }

    /// Central differences of `loss` with respect to every entry of `x`.
    fn numeric_grad(x: &mut [f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + STEP;
                let up = loss(x);
                x[i] = orig - STEP;
                let down = loss(x);
                x[i] = orig;
                (up - down) / (2.0 * STEP)
            })
            .collect()
    }

    fn assert_close_grads(name: &str, analytic: &[f64], numeric: &[f64], tol: f64) {
        assert_eq!(analytic.len(), numeric.len(), "{name}");
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let e = rel_err(*a, *n);
            assert!(e < tol, "{name}[{i}]: analytic {a} vs numeric {n} (rel {e})");
        }
    }

    fn with_entries(m: &Matrix, data: &[f64]) -> Matrix {
        Matrix::from_vec(m.rows(), m.cols(), data.to_vec()).unwrap()
    }

    #[test]
    fn factored_one_hot_sigma_selects_component() {
        let h = Vector::from(vec![1.5, -2.0, 3.0]);
        let sigma = diag(&Vector::one_hot(3, 1).unwrap());
        let (out, _) =
            factored_linear_fwd(&Matrix::identity(3), &sigma, &Matrix::identity(3), &h).unwrap();
        assert_eq!(out.as_slice(), &[0.0, -2.0, 0.0]);
    }

    #[test]
    fn factored_matches_triple_product() {
        let mut rng = SeededRng::new(5);
        let (u, s, v) = (rand_m(&mut rng, 5, 3), rand_m(&mut rng, 3, 3), rand_m(&mut rng, 3, 4));
        let h = rand_v(&mut rng, 4);
        let (out, _) = factored_linear_fwd(&u, &s, &v, &h).unwrap();
        let oracle = matmul(&matmul(&u, &s).unwrap(), &v).unwrap().matvec(&h).unwrap();
        for (a, b) in out.as_slice().iter().zip(oracle.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let (plain, _) = factored_linear_fwd(&u, &Matrix::identity(3), &v, &h).unwrap();
        let two_layer = u.matvec(&v.matvec(&h).unwrap()).unwrap();
        assert_eq!(plain, two_layer);
    }

    #[test]
    fn factored_rank_one_with_one_hot_diagonal() {
        let mut rng = SeededRng::new(6);
        let (u, v) = (rand_m(&mut rng, 4, 3), rand_m(&mut rng, 3, 5));
        let h = rand_v(&mut rng, 5);
        let i = 2;
        let (out, _) =
            factored_linear_fwd(&u, &diag(&Vector::one_hot(3, i).unwrap()), &v, &h).unwrap();
        let coef: f64 = v.row(i).iter().zip(h.as_slice()).map(|(a, b)| a * b).sum();
        for r in 0..4 {
            assert_eq!(out[r], u.get(r, i) * coef);
        }
    }

    #[test]
    fn factored_shape_errors() {
        let h = Vector::zeros(4);
        let bad = factored_linear_fwd(&Matrix::zeros(2, 3), &Matrix::zeros(3, 3), &Matrix::zeros(3, 5), &h);
        assert!(bad.is_err());
        let bad = factored_linear_fwd(&Matrix::zeros(2, 2), &Matrix::zeros(3, 3), &Matrix::zeros(3, 4), &h);
        assert!(bad.is_err());
    }

    fn factored_grads(
        u: &Matrix,
        s: &Matrix,
        v: &Matrix,
        h: &Vector,
        d_out: &Vector,
        shape: SigmaShape,
    ) -> (Matrix, Matrix, Matrix, Vector) {
        let (_, cache) = factored_linear_fwd(u, s, v, h).unwrap();
        let (mut du, mut ds, mut dv) = (
            Matrix::zeros(u.rows(), u.cols()),
            Matrix::zeros(s.rows(), s.cols()),
            Matrix::zeros(v.rows(), v.cols()),
        );
        let dh = factored_linear_bwd(
            u,
            s,
            v,
            &cache,
            d_out,
            shape,
            FactoredGrads { du: &mut du, dsigma: &mut ds, dv: &mut dv },
        )
        .unwrap();
        (du, ds, dv, dh)
    }

    #[test]
    fn factored_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(7);
        let (u, s, v) = (rand_m(&mut rng, 5, 3), rand_m(&mut rng, 3, 3), rand_m(&mut rng, 3, 4));
        let h = rand_v(&mut rng, 4);
        let d_out = rand_v(&mut rng, 5);
        let (du, ds, dv, dh) = factored_grads(&u, &s, &v, &h, &d_out, SigmaShape::Full);
        let loss = |u: &Matrix, s: &Matrix, v: &Matrix, h: &Vector| {
            factored_linear_fwd(u, s, v, h).unwrap().0.dot(&d_out).unwrap()
        };
        let mut x = u.as_slice().to_vec();
        let n = numeric_grad(&mut x, |d| loss(&with_entries(&u, d), &s, &v, &h));
        assert_close_grads("dU", du.as_slice(), &n, 1e-6);
        let mut x = s.as_slice().to_vec();
        let n = numeric_grad(&mut x, |d| loss(&u, &with_entries(&s, d), &v, &h));
        assert_close_grads("dSigma", ds.as_slice(), &n, 1e-6);
        let mut x = v.as_slice().to_vec();
        let n = numeric_grad(&mut x, |d| loss(&u, &s, &with_entries(&v, d), &h));
        assert_close_grads("dV", dv.as_slice(), &n, 1e-6);
        let mut x = h.as_slice().to_vec();
        let n = numeric_grad(&mut x, |d| loss(&u, &s, &v, &Vector::from(d.to_vec())));
        assert_close_grads("dh", dh.as_slice(), &n, 1e-6);
    }

    #[test]
    fn factored_backward_zero_upstream_and_diagonal_mode() {
        let mut rng = SeededRng::new(8);
        let (u, s, v) = (rand_m(&mut rng, 4, 3), rand_m(&mut rng, 3, 3), rand_m(&mut rng, 3, 2));
        let h = rand_v(&mut rng, 2);
        let (du, ds, dv, dh) = factored_grads(&u, &s, &v, &h, &Vector::zeros(4), SigmaShape::Full);
        assert!(du.as_slice().iter().chain(ds.as_slice()).chain(dv.as_slice()).chain(dh.as_slice()).all(|&x| x == 0.0));

        let d_out = rand_v(&mut rng, 4);
        let (_, ds_diag, _, _) = factored_grads(&u, &s, &v, &h, &d_out, SigmaShape::Diagonal);
        let (_, ds_full, _, _) = factored_grads(&u, &s, &v, &h, &d_out, SigmaShape::Full);
        for r in 0..3 {
            for c in 0..3 {
                if r == c {
                    assert_eq!(ds_diag.get(r, c), ds_full.get(r, c));
                } else {
                    assert_eq!(ds_diag.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn attention_single_and_identical_views() {
        let mut rng = SeededRng::new(9);
        let (wa, wv, wz) = (rand_m(&mut rng, 1, 4), rand_m(&mut rng, 4, 3), rand_m(&mut rng, 4, 2));
        let view = rand_v(&mut rng, 3);
        let hp = rand_v(&mut rng, 2);
        let (alpha, h_a, _) = attention_fwd(&wa, &wv, &wz, std::slice::from_ref(&view), &hp).unwrap();
        assert_eq!(alpha.as_slice(), &[1.0]);
        assert_eq!(h_a, view);

        let (alpha, h_a, _) = attention_fwd(&wa, &wv, &wz, &[view.clone(), view.clone()], &hp).unwrap();
        assert_eq!(alpha.as_slice(), &[0.5, 0.5]);
        for (a, b) in h_a.as_slice().iter().zip(view.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(attention_fwd(&wa, &wv, &wz, &[], &hp).is_err());
    }

    #[test]
    fn attention_matches_direct_recomputation() {
        let mut rng = SeededRng::new(10);
        let (wa, wv, wz) = (rand_m(&mut rng, 1, 5), rand_m(&mut rng, 5, 4), rand_m(&mut rng, 5, 3));
        let views: Vec<Vector> = (0..3).map(|_| rand_v(&mut rng, 4)).collect();
        let hp = rand_v(&mut rng, 3);
        let (alpha, h_a, _) = attention_fwd(&wa, &wv, &wz, &views, &hp).unwrap();

        // Oracle: scalar loops, no shared helpers.
        let mut scores = [0.0; 3];
        for j in 0..3 {
            for a in 0..5 {
                let mut pre = 0.0;
                for d in 0..4 {
                    pre += wv.get(a, d) * views[j][d];
                }
                for d in 0..3 {
                    pre += wz.get(a, d) * hp[d];
                }
                scores[j] += wa.get(0, a) * pre.tanh();
            }
        }
        let total: f64 = scores.iter().map(|s| s.exp()).sum();
        let w: Vec<f64> = scores.iter().map(|s| s.exp() / total).collect();
        for d in 0..4 {
            let expect: f64 = (0..3).map(|j| w[j] * views[j][d]).sum();
            assert!((h_a[d] - expect).abs() < 1e-12);
        }
        for j in 0..3 {
            assert!((alpha[j] - w[j]).abs() < 1e-12);
        }
        // Convex hull, coordinatewise.
        for d in 0..4 {
            let lo = views.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
            let hi = views.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
            assert!(h_a[d] >= lo - 1e-15 && h_a[d] <= hi + 1e-15);
        }
    }

    struct AttnCase {
        wa: Matrix,
        wv: Matrix,
        wz: Matrix,
        views: Vec<Vector>,
        hp: Vector,
        d_alpha: Vector,
        d_ha: Vector,
    }

    impl AttnCase {
        fn loss(&self) -> f64 {
            let (alpha, h_a, _) = attention_fwd(&self.wa, &self.wv, &self.wz, &self.views, &self.hp).unwrap();
            alpha.dot(&self.d_alpha).unwrap() + h_a.dot(&self.d_ha).unwrap()
        }

        fn grads(&self) -> (Matrix, Matrix, Matrix, Vec<Vector>, Vector) {
            let (_, _, cache) = attention_fwd(&self.wa, &self.wv, &self.wz, &self.views, &self.hp).unwrap();
            let mut dwa = Matrix::zeros(self.wa.rows(), self.wa.cols());
            let mut dwv = Matrix::zeros(self.wv.rows(), self.wv.cols());
            let mut dwz = Matrix::zeros(self.wz.rows(), self.wz.cols());
            let (dviews, dhp) = attention_bwd(
                &self.wa,
                &self.wv,
                &self.wz,
                &cache,
                Some(&self.d_alpha),
                &self.d_ha,
                AttentionGrads { dwa: &mut dwa, dwv: &mut dwv, dwz: &mut dwz },
            )
            .unwrap();
            (dwa, dwv, dwz, dviews, dhp)
        }
    }

    fn attn_case(seed: u64, m: usize) -> AttnCase {
        let mut rng = SeededRng::new(seed);
        AttnCase {
            wa: rand_m(&mut rng, 1, 4),
            wv: rand_m(&mut rng, 4, 3),
            wz: rand_m(&mut rng, 4, 5),
            views: (0..m).map(|_| rand_v(&mut rng, 3)).collect(),
            hp: rand_v(&mut rng, 5),
            d_alpha: rand_v(&mut rng, m),
            d_ha: rand_v(&mut rng, 3),
        }
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        for (seed, m) in [(11, 2), (12, 3)] {
            let mut case = attn_case(seed, m);
            let (dwa, dwv, dwz, dviews, dhp) = case.grads();
            let mut x = case.wa.as_slice().to_vec();
            let n = numeric_grad(&mut x, |d| {
                case.wa.as_mut_slice().copy_from_slice(d);
                case.loss()
            });
            case.wa.as_mut_slice().copy_from_slice(&x);
            assert_close_grads("dWa", dwa.as_slice(), &n, 1e-6);

            let mut x = case.wv.as_slice().to_vec();
            let n = numeric_grad(&mut x, |d| {
                case.wv.as_mut_slice().copy_from_slice(d);
                case.loss()
            });
            case.wv.as_mut_slice().copy_from_slice(&x);
            assert_close_grads("dWv", dwv.as_slice(), &n, 1e-6);

            let mut x = case.wz.as_slice().to_vec();
            let n = numeric_grad(&mut x, |d| {
                case.wz.as_mut_slice().copy_from_slice(d);
                case.loss()
            });
            case.wz.as_mut_slice().copy_from_slice(&x);
            assert_close_grads("dWz", dwz.as_slice(), &n, 1e-6);

            let mut x = case.hp.as_slice().to_vec();
            let n = numeric_grad(&mut x, |d| {
                case.hp.as_mut_slice().copy_from_slice(d);
                case.loss()
            });
            case.hp.as_mut_slice().copy_from_slice(&x);
            assert_close_grads("dh_prev", dhp.as_slice(), &n, 1e-6);

            for j in 0..m {
                let mut x = case.views[j].as_slice().to_vec();
                let n = numeric_grad(&mut x, |d| {
                    case.views[j].as_mut_slice().copy_from_slice(d);
                    case.loss()
                });
                case.views[j].as_mut_slice().copy_from_slice(&x);
                assert_close_grads("dview", dviews[j].as_slice(), &n, 1e-6);
            }
        }
    }

    #[test]
    fn attention_backward_zero_upstream_and_locality() {
        let mut case = attn_case(13, 2);
        case.d_alpha = Vector::zeros(2);
        case.d_ha = Vector::zeros(3);
        let (dwa, dwv, dwz, dviews, dhp) = case.grads();
        let all_zero = |s: &[f64]| s.iter().all(|&x| x == 0.0);
        assert!(all_zero(dwa.as_slice()) && all_zero(dwv.as_slice()) && all_zero(dwz.as_slice()));
        assert!(dviews.iter().all(|v| all_zero(v.as_slice())) && all_zero(dhp.as_slice()));

        // A slot that was never handed to attention cannot influence it.
        let case = attn_case(14, 2);
        let before = case.grads();
        let mut padded = case.views.clone();
        padded.push(Vector::filled(3, 42.0));
        let after = AttnCase { views: padded[..2].to_vec(), ..case }.grads();
        assert_eq!(before.0, after.0);
        assert_eq!(before.1, after.1);
        assert_eq!(before.3, after.3);
    }

    #[test]
    fn lstm_zero_params() {
        let p = LstmCellParams::zeros(2, 3);
        let (h, c, _) = lstm_cell_fwd(&p, &Vector::zeros(2), &Vector::zeros(3), &Vector::zeros(3)).unwrap();
        assert!(h.as_slice().iter().chain(c.as_slice()).all(|&x| x == 0.0));

        let v = Vector::from(vec![1.0, -2.0, 0.5]);
        let (h, c, cache) = lstm_cell_fwd(&p, &Vector::zeros(2), &Vector::zeros(3), &v).unwrap();
        for k in 0..3 {
            assert_eq!(c[k], 0.5 * v[k]);
            assert_eq!(h[k], 0.5 * (0.5 * v[k]).tanh());
        }
        let dc = Vector::from(vec![0.3, -1.0, 2.0]);
        let mut g = LstmCellParams::zeros(2, 3);
        let (_, _, dcp) = lstm_cell_bwd(&p, &cache, &Vector::zeros(3), &dc, &mut g).unwrap();
        for k in 0..3 {
            assert_eq!(dcp[k], 0.5 * dc[k]);
        }
    }

    fn rand_lstm(rng: &mut SeededRng, input: usize, hidden: usize) -> LstmCellParams {
        let mut p = LstmCellParams::zeros(input, hidden);
        for (w, b) in p.gates_mut() {
            let wd = rng.draw_uniform(-0.8, 0.8, w.as_slice().len());
            w.as_mut_slice().copy_from_slice(wd.as_slice());
            let bd = rng.draw_uniform(-0.5, 0.5, b.dim());
            b.as_mut_slice().copy_from_slice(bd.as_slice());
        }
        p
    }

    #[test]
    fn lstm_matches_gate_by_gate_oracle() {
        let mut rng = SeededRng::new(15);
        let p = rand_lstm(&mut rng, 3, 4);
        let (x, hp, cp) = (rand_v(&mut rng, 3), rand_v(&mut rng, 4), rand_v(&mut rng, 4));
        let (h, c, _) = lstm_cell_fwd(&p, &x, &hp, &cp).unwrap();
        let z: Vec<f64> = x.as_slice().iter().chain(hp.as_slice()).copied().collect();
        let pre = |w: &Matrix, b: &Vector, k: usize| -> f64 {
            b[k] + (0..7).map(|j| w.get(k, j) * z[j]).sum::<f64>()
        };
        let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
        for k in 0..4 {
            let i = sig(pre(&p.w_input, &p.b_input, k));
            let f = sig(pre(&p.w_forget, &p.b_forget, k));
            let o = sig(pre(&p.w_output, &p.b_output, k));
            let g = pre(&p.w_cell, &p.b_cell, k).tanh();
            let ck = f * cp[k] + i * g;
            assert!((c[k] - ck).abs() < 1e-12);
            assert!((h[k] - o * ck.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(16);
        let mut p = rand_lstm(&mut rng, 3, 3);
        let (x, hp, cp) = (rand_v(&mut rng, 3), rand_v(&mut rng, 3), rand_v(&mut rng, 3));
        let (wh, wc) = (rand_v(&mut rng, 3), rand_v(&mut rng, 3));
        let loss = |p: &LstmCellParams, x: &Vector, hp: &Vector, cp: &Vector| {
            let (h, c, _) = lstm_cell_fwd(p, x, hp, cp).unwrap();
            h.dot(&wh).unwrap() + c.dot(&wc).unwrap()
        };
        let (_, _, cache) = lstm_cell_fwd(&p, &x, &hp, &cp).unwrap();
        let mut g = LstmCellParams::zeros(3, 3);
        let (dx, dhp, dcp) = lstm_cell_bwd(&p, &cache, &wh, &wc, &mut g).unwrap();

        for gate in 0..4 {
            let analytic_w = g.gates()[gate].0.as_slice().to_vec();
            let mut xw = p.gates()[gate].0.as_slice().to_vec();
            let n = numeric_grad(&mut xw, |d| {
                p.gates_mut()[gate].0.as_mut_slice().copy_from_slice(d);
                loss(&p, &x, &hp, &cp)
            });
            p.gates_mut()[gate].0.as_mut_slice().copy_from_slice(&xw);
            assert_close_grads("dW", &analytic_w, &n, 1e-6);

            let analytic_b = g.gates()[gate].1.as_slice().to_vec();
            let mut xb = p.gates()[gate].1.as_slice().to_vec();
            let n = numeric_grad(&mut xb, |d| {
                p.gates_mut()[gate].1.as_mut_slice().copy_from_slice(d);
                loss(&p, &x, &hp, &cp)
            });
            p.gates_mut()[gate].1.as_mut_slice().copy_from_slice(&xb);
            assert_close_grads("db", &analytic_b, &n, 1e-6);
        }
        let mut xi = x.as_slice().to_vec();
        let n = numeric_grad(&mut xi, |d| loss(&p, &Vector::from(d.to_vec()), &hp, &cp));
        assert_close_grads("d_input", dx.as_slice(), &n, 1e-6);
        let mut xi = hp.as_slice().to_vec();
        let n = numeric_grad(&mut xi, |d| loss(&p, &x, &Vector::from(d.to_vec()), &cp));
        assert_close_grads("d_h_prev", dhp.as_slice(), &n, 1e-6);
        let mut xi = cp.as_slice().to_vec();
        let n = numeric_grad(&mut xi, |d| loss(&p, &x, &hp, &Vector::from(d.to_vec())));
        assert_close_grads("d_c_prev", dcp.as_slice(), &n, 1e-6);

        let mut g0 = LstmCellParams::zeros(3, 3);
        let (a, b, c) = lstm_cell_bwd(&p, &cache, &Vector::zeros(3), &Vector::zeros(3), &mut g0).unwrap();
        assert_eq!(g0, LstmCellParams::zeros(3, 3));
        assert!(a.as_slice().iter().chain(b.as_slice()).chain(c.as_slice()).all(|&v| v == 0.0));
    }

    #[test]
    fn combine_output_cases() {
        let (wg, bg) = (Matrix::zeros(2, 4), Vector::zeros(2));
        let (wo, bo) = (Matrix::zeros(5, 2), Vector::zeros(5));
        let hf = Vector::from(vec![0.3, -0.7]);
        let hb = Vector::from(vec![1.1, 0.2]);
        let (hs, logits, _) = combine_output_fwd(&wg, &bg, &wo, &bo, &hf, &hb).unwrap();
        assert!(hs.as_slice().iter().chain(logits.as_slice()).all(|&x| x == 0.0));
        let p = softmax(&logits).unwrap();
        assert!(p.as_slice().iter().all(|&x| x == 0.2));

        let proj = Matrix::from_rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]).unwrap();
        let (hs, _, _) = combine_output_fwd(&proj, &bg, &wo, &bo, &hf, &hb).unwrap();
        assert_eq!(hs, tanh_of(&hf));

        let mut rng = SeededRng::new(17);
        let (wg, bg, wo, bo) = (rand_m(&mut rng, 3, 4), rand_v(&mut rng, 3), rand_m(&mut rng, 5, 3), rand_v(&mut rng, 5));
        let (hs, logits, _) = combine_output_fwd(&wg, &bg, &wo, &bo, &hf, &hb).unwrap();
        let joined = [hf[0], hf[1], hb[0], hb[1]];
        for r in 0..3 {
            let expect = (bg[r] + (0..4).map(|c| wg.get(r, c) * joined[c]).sum::<f64>()).tanh();
            assert!((hs[r] - expect).abs() < 1e-12);
        }
        for r in 0..5 {
            let expect = bo[r] + (0..3).map(|c| wo.get(r, c) * hs[c]).sum::<f64>();
            assert!((logits[r] - expect).abs() < 1e-12);
        }
        assert!(combine_output_fwd(&Matrix::zeros(3, 3), &bg, &wo, &bo, &hf, &hb).is_err());
    }

    fn tanh_of(v: &Vector) -> Vector {
        v.as_slice().iter().map(|x| x.tanh()).collect()
    }

    #[test]
    fn combine_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(18);
        let (mut wg, mut bg, mut wo, mut bo) =
            (rand_m(&mut rng, 3, 4), rand_v(&mut rng, 3), rand_m(&mut rng, 5, 3), rand_v(&mut rng, 5));
        let (hf, hb) = (rand_v(&mut rng, 2), rand_v(&mut rng, 2));
        let (w_logit, w_hs) = (rand_v(&mut rng, 5), rand_v(&mut rng, 3));
        let loss = |wg: &Matrix, bg: &Vector, wo: &Matrix, bo: &Vector, hf: &Vector, hb: &Vector| {
            let (hs, logits, _) = combine_output_fwd(wg, bg, wo, bo, hf, hb).unwrap();
            logits.dot(&w_logit).unwrap() + hs.dot(&w_hs).unwrap()
        };
        let (_, _, cache) = combine_output_fwd(&wg, &bg, &wo, &bo, &hf, &hb).unwrap();
        let (mut dwg, mut dbg, mut dwo, mut dbo) =
            (Matrix::zeros(3, 4), Vector::zeros(3), Matrix::zeros(5, 3), Vector::zeros(5));
        let (dhf, dhb) = combine_output_bwd(
            &wg,
            &wo,
            &cache,
            &w_logit,
            Some(&w_hs),
            CombineGrads { dwg: &mut dwg, dbg: &mut dbg, dwo: &mut dwo, dbo: &mut dbo },
        )
        .unwrap();

        let mut x = wg.as_slice().to_vec();
        let n = numeric_grad(&mut x, |d| {
            wg.as_mut_slice().copy_from_slice(d);
            loss(&wg, &bg, &wo, &bo, &hf, &hb)
        });
        wg.as_mut_slice().copy_from_slice(&x);
        assert_close_grads("dWg", dwg.as_slice(), &n, 1e-6);
        let mut x = bg.as_slice().to_vec();
        let n = numeric_grad(&mut x, |d| {
            bg.as_mut_slice().copy_from_slice(d);
            loss(&wg, &bg, &wo, &bo, &hf, &hb)
        });
        bg.as_mut_slice().copy_from_slice(&x);
        assert_close_grads("dbg", dbg.as_slice(), &n, 1e-6);
        let mut x = wo.as_slice().to_vec();
        let n = numeric_grad(&mut x, |d| {
            wo.as_mut_slice().copy_from_slice(d);
            loss(&wg, &bg, &wo, &bo, &hf, &hb)
        });
        wo.as_mut_slice().copy_from_slice(&x);
        assert_close_grads("dWo", dwo.as_slice(), &n, 1e-6);
        let mut x = bo.as_slice().to_vec();
        let n = numeric_grad(&mut x, |d| {
            bo.as_mut_slice().copy_from_slice(d);
            loss(&wg, &bg, &wo, &bo, &hf, &hb)
        });
        bo.as_mut_slice().copy_from_slice(&x);
        assert_close_grads("dbo", dbo.as_slice(), &n, 1e-6);
        let mut x = hf.as_slice().to_vec();
        let n = numeric_grad(&mut x, |d| loss(&wg, &bg, &wo, &bo, &Vector::from(d.to_vec()), &hb));
        assert_close_grads("dh_fwd", dhf.as_slice(), &n, 1e-6);
        let mut x = hb.as_slice().to_vec();
        let n = numeric_grad(&mut x, |d| loss(&wg, &bg, &wo, &bo, &hf, &Vector::from(d.to_vec())));
        assert_close_grads("dh_bwd", dhb.as_slice(), &n, 1e-6);
    }

    #[test]
    fn nll_loss_cases() {
        let (loss, d) = nll_loss(&Vector::filled(4, 0.7), 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!(d.sum().abs() < 1e-12);

        let (loss, _) = nll_loss(&Vector::from(vec![10.0, -10.0]), 0).unwrap();
        let expect = (-20f64).exp().ln_1p();
        assert!((loss - expect).abs() / expect < 1e-6, "{loss} vs {expect}");

        assert!(nll_loss(&Vector::zeros(3), 3).is_err());

        let mut rng = SeededRng::new(19);
        for _ in 0..50 {
            let logits = rng.draw_gaussian(0.0, 5.0, 7);
            let (loss, d) = nll_loss(&logits, rng.index(7)).unwrap();
            assert!(loss >= 0.0);
            assert!(d.sum().abs() < 1e-12);
        }
    }
}
