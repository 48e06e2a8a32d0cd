//! Learned predictors with hand-derived gradients.
//!
//! Both networks run on batches of equal-length prefixes: `steps[t]` is a
//! `d x B` matrix holding state `t` of every example as a column. Parameters
//! live in one flat vector, each block stored column-major.

use nalgebra::{DMatrix, DMatrixView, DVector};

use super::Arch;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
    pub total: usize,
}

impl ParamLayout {
    fn from_shapes(shapes: &[(&'static str, usize, usize)]) -> Self {
        let mut offset = 0;
        let blocks = shapes
            .iter()
            .map(|&(name, rows, cols)| {
                let b = ParamBlock { name, rows, cols, offset };
                offset += rows * cols;
                b
            })
            .collect();
        Self { blocks, total: offset }
    }

    pub fn block(&self, name: &str) -> &ParamBlock {
        self.blocks.iter().find(|b| b.name == name).unwrap_or_else(|| panic!("no parameter block {name}"))
    }

    pub fn view<'a>(&self, params: &'a [f64], name: &str) -> DMatrixView<'a, f64> {
        let b = self.block(name);
        DMatrixView::from_slice(&params[b.offset..b.offset + b.rows * b.cols], b.rows, b.cols)
    }

    fn add_into(&self, grad: &mut [f64], name: &str, m: &DMatrix<f64>) {
        let b = self.block(name);
        debug_assert_eq!((m.nrows(), m.ncols()), (b.rows, b.cols));
        for (g, x) in grad[b.offset..b.offset + b.rows * b.cols].iter_mut().zip(m.as_slice()) {
            *g += x;
        }
    }
}

/// Parameter layout of a learned architecture; `None` for closed forms.
pub fn layout(arch: Arch, d: usize, hidden: usize, attention: usize) -> Option<ParamLayout> {
    match arch {
        Arch::Attention => Some(ParamLayout::from_shapes(&[
            ("w_h", attention, d),
            ("w_q", attention, d),
            ("b_a", attention, 1),
            ("v_a", attention, 1),
            ("w_o", d, 2 * d),
        ])),
        Arch::Gru => Some(ParamLayout::from_shapes(&[
            ("w_z", hidden, d),
            ("u_z", hidden, hidden),
            ("b_z", hidden, 1),
            ("w_r", hidden, d),
            ("u_r", hidden, hidden),
            ("b_r", hidden, 1),
            ("w_n", hidden, d),
            ("u_n", hidden, hidden),
            ("b_n", hidden, 1),
            ("w_head", d, hidden),
            ("b_head", d, 1),
        ])),
        _ => None,
    }
}

/// Fan-in used for the uniform `±1/sqrt(fan_in)` initialization of a block.
pub fn fan_in(arch: Arch, block: &ParamBlock, d: usize, hidden: usize) -> usize {
    match (arch, block.name) {
        (Arch::Attention, "v_a") => block.rows,
        (Arch::Attention, _) => block.cols.max(d),
        (Arch::Gru, "b_head") => hidden,
        (Arch::Gru, name) if name.starts_with('b') => d,
        _ => block.cols,
    }
}

fn add_bias(m: &mut DMatrix<f64>, bias: &DMatrixView<'_, f64>) {
    for mut col in m.column_iter_mut() {
        col += bias.column(0);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn row_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), 1);
    for col in m.column_iter() {
        out.column_mut(0).axpy(1.0, &col, 1.0);
    }
    out
}

struct AttentionCache {
    hidden: Vec<DMatrix<f64>>,
    alpha: DMatrix<f64>,
    context: DMatrix<f64>,
    z_norms: Vec<f64>,
    out: DMatrix<f64>,
}

fn attention_forward(layout: &ParamLayout, p: &[f64], steps: &[DMatrix<f64>]) -> AttentionCache {
    let (w_h, w_q, b_a, v_a, w_o) =
        (layout.view(p, "w_h"), layout.view(p, "w_q"), layout.view(p, "b_a"), layout.view(p, "v_a"), layout.view(p, "w_o"));
    let len = steps.len();
    let d = steps[0].nrows();
    let b = steps[0].ncols();
    let last = &steps[len - 1];
    let query = &w_q * last;
    let mut hidden = Vec::with_capacity(len);
    let mut alpha = DMatrix::zeros(len, b);
    for (t, x) in steps.iter().enumerate() {
        let mut a = &w_h * x + &query;
        add_bias(&mut a, &b_a);
        let h = a.map(f64::tanh);
        let s = v_a.transpose() * &h;
        alpha.set_row(t, &s.row(0));
        hidden.push(h);
    }
    for mut col in alpha.column_iter_mut() {
        let m = col.max();
        col.apply(|x| *x = (*x - m).exp());
        let total = col.sum();
        col /= total;
    }
    let mut context = DMatrix::zeros(d, b);
    for (t, x) in steps.iter().enumerate() {
        for j in 0..b {
            context.column_mut(j).axpy(alpha[(t, j)], &x.column(j), 1.0);
        }
    }
    let z = w_o.columns(0, d) * &context + w_o.columns(d, d) * last;
    let mut out = z;
    let mut z_norms = Vec::with_capacity(b);
    for mut col in out.column_iter_mut() {
        let n = col.norm().max(NORM_EPS);
        z_norms.push(n);
        col /= n;
    }
    AttentionCache { hidden, alpha, context, z_norms, out }
}

fn attention_backward(layout: &ParamLayout, p: &[f64], steps: &[DMatrix<f64>], cache: &AttentionCache, d_out: &DMatrix<f64>) -> Vec<f64> {
    let (w_h, v_a, w_o) = (layout.view(p, "w_h"), layout.view(p, "v_a"), layout.view(p, "w_o"));
    let _ = w_h;
    let len = steps.len();
    let d = steps[0].nrows();
    let b = steps[0].ncols();
    let last = &steps[len - 1];
    let mut grad = vec![0.0; layout.total];

    // through the unit normalization
    let mut dz = d_out.clone();
    for j in 0..b {
        let y = cache.out.column(j);
        let proj = y.dot(&d_out.column(j));
        let mut col = dz.column_mut(j);
        col.axpy(-proj, &y, 1.0);
        col /= cache.z_norms[j];
    }
    let mut dw_o = DMatrix::zeros(d, 2 * d);
    dw_o.columns_mut(0, d).copy_from(&(&dz * cache.context.transpose()));
    dw_o.columns_mut(d, d).copy_from(&(&dz * last.transpose()));
    layout.add_into(&mut grad, "w_o", &dw_o);

    let d_context = w_o.columns(0, d).transpose() * &dz;
    let mut d_alpha = DMatrix::zeros(len, b);
    for (t, x) in steps.iter().enumerate() {
        for j in 0..b {
            d_alpha[(t, j)] = d_context.column(j).dot(&x.column(j));
        }
    }
    let mut d_scores = DMatrix::zeros(len, b);
    for j in 0..b {
        let mean: f64 = (0..len).map(|t| cache.alpha[(t, j)] * d_alpha[(t, j)]).sum();
        for t in 0..len {
            d_scores[(t, j)] = cache.alpha[(t, j)] * (d_alpha[(t, j)] - mean);
        }
    }
    let a = v_a.nrows();
    let mut dw_h = DMatrix::zeros(a, d);
    let mut d_query = DMatrix::zeros(a, b);
    let mut dv_a = DMatrix::zeros(a, 1);
    for (t, x) in steps.iter().enumerate() {
        let h = &cache.hidden[t];
        let ds = d_scores.row(t);
        dv_a += h * ds.transpose();
        let mut da = &v_a * ds;
        da.zip_apply(h, |g, hv| *g *= 1.0 - hv * hv);
        dw_h += &da * x.transpose();
        d_query += &da;
    }
    layout.add_into(&mut grad, "v_a", &dv_a);
    layout.add_into(&mut grad, "w_h", &dw_h);
    layout.add_into(&mut grad, "w_q", &(&d_query * last.transpose()));
    layout.add_into(&mut grad, "b_a", &row_sums(&d_query));
    grad
}

struct GruStep {
    h_prev: DMatrix<f64>,
    z: DMatrix<f64>,
    r: DMatrix<f64>,
    n: DMatrix<f64>,
}

struct GruCache {
    steps: Vec<GruStep>,
    h_last: DMatrix<f64>,
    out: DMatrix<f64>,
}

fn gru_forward(layout: &ParamLayout, p: &[f64], steps: &[DMatrix<f64>]) -> GruCache {
    let v = |n: &str| layout.view(p, n);
    let (w_z, u_z, b_z) = (v("w_z"), v("u_z"), v("b_z"));
    let (w_r, u_r, b_r) = (v("w_r"), v("u_r"), v("b_r"));
    let (w_n, u_n, b_n) = (v("w_n"), v("u_n"), v("b_n"));
    let hidden = u_z.nrows();
    let b = steps[0].ncols();
    let mut h = DMatrix::zeros(hidden, b);
    let mut cache = Vec::with_capacity(steps.len());
    for x in steps {
        let mut z = &w_z * x + &u_z * &h;
        add_bias(&mut z, &b_z);
        z.apply(|e| *e = sigmoid(*e));
        let mut r = &w_r * x + &u_r * &h;
        add_bias(&mut r, &b_r);
        r.apply(|e| *e = sigmoid(*e));
        let rh = r.component_mul(&h);
        let mut n = &w_n * x + &u_n * &rh;
        add_bias(&mut n, &b_n);
        n.apply(|e| *e = e.tanh());
        let mut h_new = n.clone();
        h_new.zip_zip_apply(&z, &h, |hn, zv, hp| *hn = (1.0 - zv) * *hn + zv * hp);
        cache.push(GruStep { h_prev: h, z, r, n });
        h = h_new;
    }
    let mut out = &v("w_head") * &h;
    add_bias(&mut out, &v("b_head"));
    GruCache { steps: cache, h_last: h, out }
}

fn gru_backward(layout: &ParamLayout, p: &[f64], steps: &[DMatrix<f64>], cache: &GruCache, d_out: &DMatrix<f64>) -> Vec<f64> {
    let v = |n: &str| layout.view(p, n);
    let (u_z, u_r, u_n, w_head) = (v("u_z"), v("u_r"), v("u_n"), v("w_head"));
    let hidden = u_z.nrows();
    let d = steps[0].nrows();
    let mut grad = vec![0.0; layout.total];
    layout.add_into(&mut grad, "w_head", &(d_out * cache.h_last.transpose()));
    layout.add_into(&mut grad, "b_head", &row_sums(d_out));

    let mut dw = [DMatrix::zeros(hidden, d), DMatrix::zeros(hidden, d), DMatrix::zeros(hidden, d)];
    let mut du = [DMatrix::zeros(hidden, hidden), DMatrix::zeros(hidden, hidden), DMatrix::zeros(hidden, hidden)];
    let mut db = [DMatrix::zeros(hidden, 1), DMatrix::zeros(hidden, 1), DMatrix::zeros(hidden, 1)];
    let mut dh = w_head.transpose() * d_out;
    for (x, s) in steps.iter().zip(&cache.steps).rev() {
        // h = (1 - z) * n + z * h_prev
        let mut dn = dh.component_mul(&s.z.map(|zv| 1.0 - zv));
        let mut dz = dh.clone();
        dz.zip_zip_apply(&s.h_prev, &s.n, |g, hp, nv| *g *= hp - nv);
        let mut dh_prev = dh.component_mul(&s.z);

        dn.zip_apply(&s.n, |g, nv| *g *= 1.0 - nv * nv);
        let rh = s.r.component_mul(&s.h_prev);
        dw[2] += &dn * x.transpose();
        du[2] += &dn * rh.transpose();
        db[2] += row_sums(&dn);
        let d_rh = u_n.transpose() * &dn;
        let mut dr = d_rh.component_mul(&s.h_prev);
        dh_prev += d_rh.component_mul(&s.r);

        dz.zip_apply(&s.z, |g, zv| *g *= zv * (1.0 - zv));
        dw[0] += &dz * x.transpose();
        du[0] += &dz * s.h_prev.transpose();
        db[0] += row_sums(&dz);
        dh_prev += u_z.transpose() * &dz;

        dr.zip_apply(&s.r, |g, rv| *g *= rv * (1.0 - rv));
        dw[1] += &dr * x.transpose();
        du[1] += &dr * s.h_prev.transpose();
        db[1] += row_sums(&dr);
        dh_prev += u_r.transpose() * &dr;

        dh = dh_prev;
    }
    for (k, gate) in ["z", "r", "n"].iter().enumerate() {
        layout.add_into(&mut grad, &format!("w_{gate}"), &dw[k]);
        layout.add_into(&mut grad, &format!("u_{gate}"), &du[k]);
        layout.add_into(&mut grad, &format!("b_{gate}"), &db[k]);
    }
    grad
}

/// Raw network outputs, one column per example.
pub fn forward(arch: Arch, layout: &ParamLayout, params: &[f64], steps: &[DMatrix<f64>]) -> DMatrix<f64> {
    match arch {
        Arch::Attention => attention_forward(layout, params, steps).out,
        Arch::Gru => gru_forward(layout, params, steps).out,
        _ => unreachable!("closed-form predictors have no network"),
    }
}

/// Summed regression loss over the batch and, if requested, its gradient.
pub fn loss_and_grad(
    arch: Arch,
    layout: &ParamLayout,
    params: &[f64],
    steps: &[DMatrix<f64>],
    targets: &DMatrix<f64>,
    lambda: f64,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let b = targets.ncols();
    let (out, attention, gru) = match arch {
        Arch::Attention => {
            let c = attention_forward(layout, params, steps);
            (c.out.clone(), Some(c), None)
        }
        Arch::Gru => {
            let c = gru_forward(layout, params, steps);
            (c.out.clone(), None, Some(c))
        }
        _ => unreachable!("closed-form predictors have no network"),
    };
    let mut total = 0.0;
    let mut d_out = DMatrix::zeros(out.nrows(), b);
    for j in 0..b {
        let raw = out.column(j);
        let target = targets.column(j);
        let (loss, g) = super::loss_with_grad(raw.as_slice(), target.as_slice(), lambda);
        total += loss;
        d_out.set_column(j, &DVector::from_vec(g));
    }
    if !want_grad {
        return (total, None);
    }
    let grad = match (attention, gru) {
        (Some(c), _) => attention_backward(layout, params, steps, &c, &d_out),
        (_, Some(c)) => gru_backward(layout, params, steps, &c, &d_out),
        _ => unreachable!(),
    };
    (total, Some(grad))
}

/// Packs equal-length prefixes into per-step `d x B` matrices.
pub fn stack_steps(prefixes: &[&[Vec<f64>]]) -> Vec<DMatrix<f64>> {
    let len = prefixes[0].len();
    let d = prefixes[0][0].len();
    (0..len)
        .map(|t| {
            let mut m = DMatrix::zeros(d, prefixes.len());
            for (j, p) in prefixes.iter().enumerate() {
                debug_assert_eq!(p.len(), len);
                m.set_column(j, &DVector::from_column_slice(&p[t]));
            }
            m
        })
        .collect()
}

pub fn stack_columns(vectors: &[&[f64]]) -> DMatrix<f64> {
    let d = vectors[0].len();
    let mut m = DMatrix::zeros(d, vectors.len());
    for (j, v) in vectors.iter().enumerate() {
        m.set_column(j, &DVector::from_column_slice(v));
    }
    m
}
