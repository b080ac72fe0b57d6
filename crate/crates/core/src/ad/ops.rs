//! Tape operations with hand-derived backward steps.
//!
//! Generic array ops live here; the fused statistics kernels
//! (`mahalanobis_diag`, `weighted_var`, `pair_gauss_logdf`) get dedicated
//! nodes because composing them from primitives would either need rank-3
//! intermediates or a cancellation-prone expansion. Every backward here is
//! covered by finite-difference checks in the test suite.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2};

use super::tape::{BackStep, NodeId, Tape};

pub(crate) fn v1(a: &ArrayD<f64>) -> ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("1-d node")
}

pub(crate) fn v2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d node")
}

impl Tape {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a) + self.value(b);
        self.push_op(
            out,
            &[a, b],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    if t.wants(a) {
                        grads.accum(a, g.clone());
                    }
                    if t.wants(b) {
                        grads.accum(b, g.clone());
                    }
                }),
            },
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a) - self.value(b);
        self.push_op(
            out,
            &[a, b],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    if t.wants(a) {
                        grads.accum(a, g.clone());
                    }
                    if t.wants(b) {
                        grads.accum(b, -g);
                    }
                }),
            },
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a) * self.value(b);
        self.push_op(
            out,
            &[a, b],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    if t.wants(a) {
                        grads.accum(a, g * t.value(b));
                    }
                    if t.wants(b) {
                        grads.accum(b, g * t.value(a));
                    }
                }),
            },
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a) + c;
        self.push_op(
            out,
            &[a],
            BackStep {
                run: Box::new(move |_t, _v, g, grads| grads.accum(a, g.clone())),
            },
        )
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a) * c;
        self.push_op(
            out,
            &[a],
            BackStep {
                run: Box::new(move |_t, _v, g, grads| grads.accum(a, g * c)),
            },
        )
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.mul_scalar(a, -1.0)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(f64::ln);
        self.push_op(
            out,
            &[a],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    grads.accum(a, g / t.value(a));
                }),
            },
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(f64::exp);
        self.push_op(
            out,
            &[a],
            BackStep {
                run: Box::new(move |_t, v, g, grads| grads.accum(a, g * v)),
            },
        )
    }

    pub fn sqr(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(|x| x * x);
        self.push_op(
            out,
            &[a],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    grads.accum(a, g * &(t.value(a) * 2.0));
                }),
            },
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push_op(
            out,
            &[a],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    let mask = t.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    grads.accum(a, g * &mask);
                }),
            },
        )
    }

    /// Elementwise clamp; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push_op(
            out,
            &[a],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    let mask = t
                        .value(a)
                        .mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                    grads.accum(a, g * &mask);
                }),
            },
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let orig: Vec<usize> = self.value(a).shape().to_vec();
        let out = self
            .value(a)
            .clone()
            .into_shape_with_order(shape)
            .expect("reshape: element count mismatch")
            .into_dyn();
        self.push_op(
            out,
            &[a],
            BackStep {
                run: Box::new(move |_t, _v, g, grads| {
                    let back = g
                        .clone()
                        .into_shape_with_order(orig.as_slice())
                        .expect("reshape backward")
                        .into_dyn();
                    grads.accum(a, back);
                }),
            },
        )
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = v2(self.value(a)).dot(&v2(self.value(b))).into_dyn();
        self.push_op(
            out,
            &[a, b],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    let gm = v2(g);
                    if t.wants(a) {
                        grads.accum(a, gm.dot(&v2(t.value(b)).t()).into_dyn());
                    }
                    if t.wants(b) {
                        grads.accum(b, v2(t.value(a)).t().dot(&gm).into_dyn());
                    }
                }),
            },
        )
    }

    /// `a[m,k] · b[n,k]ᵀ`; the transposed-weight form used by linear layers.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = v2(self.value(a)).dot(&v2(self.value(b)).t()).into_dyn();
        self.push_op(
            out,
            &[a, b],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    let gm = v2(g);
                    if t.wants(a) {
                        grads.accum(a, gm.dot(&v2(t.value(b))).into_dyn());
                    }
                    if t.wants(b) {
                        grads.accum(b, gm.t().dot(&v2(t.value(a))).into_dyn());
                    }
                }),
            },
        )
    }

    /// `a[l,k]ᵀ · b[l,n]`; used for responsibility-weighted sums.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = v2(self.value(a)).t().dot(&v2(self.value(b))).into_dyn();
        self.push_op(
            out,
            &[a, b],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    let gm = v2(g);
                    if t.wants(a) {
                        grads.accum(a, v2(t.value(b)).dot(&gm.t()).into_dyn());
                    }
                    if t.wants(b) {
                        grads.accum(b, v2(t.value(a)).dot(&gm).into_dyn());
                    }
                }),
            },
        )
    }

    /// Broadcast-add a row vector `v[n]` to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let out = (&v2(self.value(a)) + &v1(self.value(v))).into_dyn();
        self.push_op(
            out,
            &[a, v],
            BackStep {
                run: Box::new(move |t, _val, g, grads| {
                    if t.wants(a) {
                        grads.accum(a, g.clone());
                    }
                    if t.wants(v) {
                        grads.accum(v, v2(g).sum_axis(Axis(0)).into_dyn());
                    }
                }),
            },
        )
    }

    /// Divide each row `i` of `a[m,n]` by `v[i]`.
    pub fn div_col(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let am = v2(self.value(a));
        let vv = v1(self.value(v));
        let mut out = am.to_owned();
        for (mut row, &d) in out.rows_mut().into_iter().zip(vv.iter()) {
            row.mapv_inplace(|x| x / d);
        }
        self.push_op(
            out.into_dyn(),
            &[a, v],
            BackStep {
                run: Box::new(move |t, val, g, grads| {
                    let gm = v2(g);
                    let vv = v1(t.value(v));
                    if t.wants(a) {
                        let mut da = gm.to_owned();
                        for (mut row, &d) in da.rows_mut().into_iter().zip(vv.iter()) {
                            row.mapv_inplace(|x| x / d);
                        }
                        grads.accum(a, da.into_dyn());
                    }
                    if t.wants(v) {
                        let outm = v2(val);
                        let mut dv = Array1::<f64>::zeros(vv.len());
                        for i in 0..vv.len() {
                            let s: f64 = gm.row(i).iter().zip(outm.row(i)).map(|(x, y)| x * y).sum();
                            dv[i] = -s / vv[i];
                        }
                        grads.accum(v, dv.into_dyn());
                    }
                }),
            },
        )
    }

    /// Scale each row `k` of `a[m,n]` by `v[k]`.
    pub fn mul_col(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let am = v2(self.value(a));
        let vv = v1(self.value(v));
        let mut out = am.to_owned();
        for (mut row, &c) in out.rows_mut().into_iter().zip(vv.iter()) {
            row.mapv_inplace(|x| x * c);
        }
        self.push_op(
            out.into_dyn(),
            &[a, v],
            BackStep {
                run: Box::new(move |t, _val, g, grads| {
                    let gm = v2(g);
                    let vv = v1(t.value(v));
                    if t.wants(a) {
                        let mut da = gm.to_owned();
                        for (mut row, &c) in da.rows_mut().into_iter().zip(vv.iter()) {
                            row.mapv_inplace(|x| x * c);
                        }
                        grads.accum(a, da.into_dyn());
                    }
                    if t.wants(v) {
                        let am = v2(t.value(a));
                        let mut dv = Array1::<f64>::zeros(vv.len());
                        for i in 0..vv.len() {
                            dv[i] = gm.row(i).iter().zip(am.row(i)).map(|(x, y)| x * y).sum();
                        }
                        grads.accum(v, dv.into_dyn());
                    }
                }),
            },
        )
    }

    /// Repeat a row vector `v[n]` as `m` identical rows.
    pub fn tile_row(&mut self, v: NodeId, m: usize) -> NodeId {
        let vv = v1(self.value(v)).to_owned();
        let n = vv.len();
        let out = Array2::from_shape_fn((m, n), |(_, j)| vv[j]).into_dyn();
        self.push_op(
            out,
            &[v],
            BackStep {
                run: Box::new(move |_t, _val, g, grads| {
                    grads.accum(v, v2(g).sum_axis(Axis(0)).into_dyn());
                }),
            },
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let shape = self.value(a).raw_dim();
        self.push_op(
            ndarray::arr1(&[s]).into_dyn(),
            &[a],
            BackStep {
                run: Box::new(move |_t, _v, g, grads| {
                    let g0 = g.iter().next().copied().unwrap();
                    grads.accum(a, ArrayD::from_elem(shape.clone(), g0));
                }),
            },
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Column sums of `a[m,n]` -> `[n]`.
    pub fn sum_axis0(&mut self, a: NodeId) -> NodeId {
        let out = v2(self.value(a)).sum_axis(Axis(0)).into_dyn();
        let m = self.value(a).shape()[0];
        self.push_op(
            out,
            &[a],
            BackStep {
                run: Box::new(move |_t, _v, g, grads| {
                    let gv = v1(g);
                    let da = Array2::from_shape_fn((m, gv.len()), |(_, j)| gv[j]);
                    grads.accum(a, da.into_dyn());
                }),
            },
        )
    }

    /// Row sums of `a[m,n]` -> `[m]`.
    pub fn sum_axis1(&mut self, a: NodeId) -> NodeId {
        let out = v2(self.value(a)).sum_axis(Axis(1)).into_dyn();
        let n = self.value(a).shape()[1];
        self.push_op(
            out,
            &[a],
            BackStep {
                run: Box::new(move |_t, _v, g, grads| {
                    let gv = v1(g);
                    let da = Array2::from_shape_fn((gv.len(), n), |(i, _)| gv[i]);
                    grads.accum(a, da.into_dyn());
                }),
            },
        )
    }

    /// Row-wise softmax of `a[m,n]`.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let am = v2(self.value(a));
        let mut out = am.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push_op(
            out.into_dyn(),
            &[a],
            BackStep {
                run: Box::new(move |_t, val, g, grads| {
                    let sm = v2(val);
                    let gm = v2(g);
                    let mut da = Array2::<f64>::zeros(sm.raw_dim());
                    for i in 0..sm.nrows() {
                        let dot: f64 = gm.row(i).iter().zip(sm.row(i)).map(|(x, y)| x * y).sum();
                        for j in 0..sm.ncols() {
                            da[[i, j]] = sm[[i, j]] * (gm[[i, j]] - dot);
                        }
                    }
                    grads.accum(a, da.into_dyn());
                }),
            },
        )
    }

    /// Row-wise log-sum-exp of `a[m,n]` -> `[m]`.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let am = v2(self.value(a));
        let out = Array1::from_iter(am.rows().into_iter().map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
        }));
        self.push_op(
            out.into_dyn(),
            &[a],
            BackStep {
                run: Box::new(move |t, val, g, grads| {
                    let am = v2(t.value(a));
                    let lse = v1(val);
                    let gv = v1(g);
                    let mut da = Array2::<f64>::zeros(am.raw_dim());
                    for i in 0..am.nrows() {
                        for j in 0..am.ncols() {
                            da[[i, j]] = gv[i] * (am[[i, j]] - lse[i]).exp();
                        }
                    }
                    grads.accum(a, da.into_dyn());
                }),
            },
        )
    }

    /// Diagonal of a square matrix -> `[n]`.
    pub fn diag(&mut self, a: NodeId) -> NodeId {
        let am = v2(self.value(a));
        assert_eq!(am.nrows(), am.ncols(), "diag needs a square matrix");
        let out = Array1::from_iter((0..am.nrows()).map(|i| am[[i, i]])).into_dyn();
        let n = am.nrows();
        self.push_op(
            out,
            &[a],
            BackStep {
                run: Box::new(move |_t, _v, g, grads| {
                    let gv = v1(g);
                    let mut da = Array2::<f64>::zeros((n, n));
                    for i in 0..n {
                        da[[i, i]] = gv[i];
                    }
                    grads.accum(a, da.into_dyn());
                }),
            },
        )
    }

    /// `Q[i,k] = Σ_j (z[i,j] − mu[k,j])² · exp(−s[k,j])` for `z[L,d]`,
    /// `mu[K,d]`, `s[K,d]`; the per-sample squared Mahalanobis distance to
    /// each diagonal-covariance component.
    pub fn mahalanobis_diag(&mut self, z: NodeId, mu: NodeId, s: NodeId) -> NodeId {
        let zm = v2(self.value(z));
        let mum = v2(self.value(mu));
        let sm = v2(self.value(s));
        let (l, d) = zm.dim();
        let k = mum.nrows();
        assert_eq!(mum.ncols(), d);
        assert_eq!(sm.dim(), (k, d));
        let mut q = Array2::<f64>::zeros((l, k));
        for i in 0..l {
            for c in 0..k {
                let mut acc = 0.0;
                for j in 0..d {
                    let diff = zm[[i, j]] - mum[[c, j]];
                    acc += diff * diff * (-sm[[c, j]]).exp();
                }
                q[[i, c]] = acc;
            }
        }
        self.push_op(
            q.into_dyn(),
            &[z, mu, s],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    let zm = v2(t.value(z));
                    let mum = v2(t.value(mu));
                    let sm = v2(t.value(s));
                    let gm = v2(g);
                    let (l, d) = zm.dim();
                    let k = mum.nrows();
                    let mut dz = Array2::<f64>::zeros((l, d));
                    let mut dmu = Array2::<f64>::zeros((k, d));
                    let mut ds = Array2::<f64>::zeros((k, d));
                    for i in 0..l {
                        for c in 0..k {
                            let gi = gm[[i, c]];
                            if gi == 0.0 {
                                continue;
                            }
                            for j in 0..d {
                                let inv = (-sm[[c, j]]).exp();
                                let diff = zm[[i, j]] - mum[[c, j]];
                                dz[[i, j]] += gi * 2.0 * diff * inv;
                                dmu[[c, j]] -= gi * 2.0 * diff * inv;
                                ds[[c, j]] -= gi * diff * diff * inv;
                            }
                        }
                    }
                    if t.wants(z) {
                        grads.accum(z, dz.into_dyn());
                    }
                    if t.wants(mu) {
                        grads.accum(mu, dmu.into_dyn());
                    }
                    if t.wants(s) {
                        grads.accum(s, ds.into_dyn());
                    }
                }),
            },
        )
    }

    /// Responsibility-weighted per-dimension variance around given means:
    /// `V[k,j] = Σ_i γ[i,k]·(z[i,j] − mu[k,j])² / denom[k]`.
    pub fn weighted_var(&mut self, gamma: NodeId, z: NodeId, mu: NodeId, denom: NodeId) -> NodeId {
        let gm = v2(self.value(gamma));
        let zm = v2(self.value(z));
        let mum = v2(self.value(mu));
        let dn = v1(self.value(denom));
        let (l, k) = gm.dim();
        let d = zm.ncols();
        assert_eq!(zm.nrows(), l);
        assert_eq!(mum.dim(), (k, d));
        assert_eq!(dn.len(), k);
        let mut var = Array2::<f64>::zeros((k, d));
        for i in 0..l {
            for c in 0..k {
                let w = gm[[i, c]];
                for j in 0..d {
                    let diff = zm[[i, j]] - mum[[c, j]];
                    var[[c, j]] += w * diff * diff;
                }
            }
        }
        for c in 0..k {
            for j in 0..d {
                var[[c, j]] /= dn[c];
            }
        }
        self.push_op(
            var.into_dyn(),
            &[gamma, z, mu, denom],
            BackStep {
                run: Box::new(move |t, val, g, grads| {
                    let gmm = v2(t.value(gamma));
                    let zm = v2(t.value(z));
                    let mum = v2(t.value(mu));
                    let dn = v1(t.value(denom));
                    let vm = v2(val);
                    let gr = v2(g);
                    let (l, k) = gmm.dim();
                    let d = zm.ncols();
                    let mut dgamma = Array2::<f64>::zeros((l, k));
                    let mut dz = Array2::<f64>::zeros((l, d));
                    let mut dmu = Array2::<f64>::zeros((k, d));
                    let mut ddenom = Array1::<f64>::zeros(k);
                    for i in 0..l {
                        for c in 0..k {
                            let w = gmm[[i, c]];
                            let mut dg_acc = 0.0;
                            for j in 0..d {
                                let diff = zm[[i, j]] - mum[[c, j]];
                                let gcj = gr[[c, j]] / dn[c];
                                dg_acc += gr[[c, j]] * diff * diff / dn[c];
                                dz[[i, j]] += gcj * 2.0 * w * diff;
                                dmu[[c, j]] -= gcj * 2.0 * w * diff;
                            }
                            dgamma[[i, c]] = dg_acc;
                        }
                    }
                    for c in 0..k {
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += gr[[c, j]] * vm[[c, j]];
                        }
                        ddenom[c] = -acc / dn[c];
                    }
                    if t.wants(gamma) {
                        grads.accum(gamma, dgamma.into_dyn());
                    }
                    if t.wants(z) {
                        grads.accum(z, dz.into_dyn());
                    }
                    if t.wants(mu) {
                        grads.accum(mu, dmu.into_dyn());
                    }
                    if t.wants(denom) {
                        grads.accum(denom, ddenom.into_dyn());
                    }
                }),
            },
        )
    }

    /// Pairwise conditional Gaussian log-densities:
    /// `M[i,j] = log N(zb[j]; mu[i], diag(exp(lv[i])))` for `mu`, `lv`,
    /// `zb` all `[N,d]`. Row `i` conditions on sample `i`, column `j`
    /// evaluates sample `j`'s background latent.
    pub fn pair_gauss_logdf(&mut self, mu: NodeId, lv: NodeId, zb: NodeId) -> NodeId {
        let mum = v2(self.value(mu));
        let lvm = v2(self.value(lv));
        let zbm = v2(self.value(zb));
        let (n, d) = mum.dim();
        assert_eq!(lvm.dim(), (n, d));
        assert_eq!(zbm.dim(), (n, d));
        const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
        let mut m = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            // Per-row constant: −½ Σ lv − d·½ln2π
            let lv_sum: f64 = lvm.row(i).sum();
            let row_const = -0.5 * lv_sum - d as f64 * HALF_LN_2PI;
            for j in 0..n {
                let mut quad = 0.0;
                for t in 0..d {
                    let diff = zbm[[j, t]] - mum[[i, t]];
                    quad += diff * diff * (-lvm[[i, t]]).exp();
                }
                m[[i, j]] = row_const - 0.5 * quad;
            }
        }
        self.push_op(
            m.into_dyn(),
            &[mu, lv, zb],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    let mum = v2(t.value(mu));
                    let lvm = v2(t.value(lv));
                    let zbm = v2(t.value(zb));
                    let gm = v2(g);
                    let (n, d) = mum.dim();
                    let mut dmu = Array2::<f64>::zeros((n, d));
                    let mut dlv = Array2::<f64>::zeros((n, d));
                    let mut dzb = Array2::<f64>::zeros((n, d));
                    for i in 0..n {
                        for j in 0..n {
                            let gij = gm[[i, j]];
                            if gij == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                let inv = (-lvm[[i, k]]).exp();
                                let diff = zbm[[j, k]] - mum[[i, k]];
                                dmu[[i, k]] += gij * diff * inv;
                                dlv[[i, k]] += gij * (-0.5 + 0.5 * diff * diff * inv);
                                dzb[[j, k]] -= gij * diff * inv;
                            }
                        }
                    }
                    if t.wants(mu) {
                        grads.accum(mu, dmu.into_dyn());
                    }
                    if t.wants(lv) {
                        grads.accum(lv, dlv.into_dyn());
                    }
                    if t.wants(zb) {
                        grads.accum(zb, dzb.into_dyn());
                    }
                }),
            },
        )
    }
}
