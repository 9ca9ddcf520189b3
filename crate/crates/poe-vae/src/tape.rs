//! Reverse-mode automatic differentiation over a fixed op vocabulary.
//!
//! The tape is purpose-built for the networks and losses in this crate: the
//! layer ops (dense, convolution, transposed convolution, embedding, batch
//! norm, the three activations) plus fused Gaussian ops (product-of-experts
//! fusion, closed-form KL, reparameterized sampling, Bernoulli and Gaussian
//! log-likelihoods) and a handful of structural ops. There is no graph
//! compiler: values are computed eagerly as nodes are pushed, and
//! [`Tape::backward`] walks the nodes in reverse.
//!
//! Gaussian-parameter tensors follow one convention throughout: shape
//! `[B, 2L]` with columns `0..L` the means and `L..2L` the log-variances.
//!
//! Shape mismatches are programmer errors and panic; input validation
//! belongs to the public APIs that build tapes.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};

use crate::gauss::LOG_VAR_CLAMP;

pub type Tensor = ArrayD<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub(crate) enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        // cached normalization: xhat and per-feature 1/sqrt(var+eps)
        xhat: Tensor,
        inv_std: Array1<f64>,
        // eval mode freezes the statistics, changing the input gradient
        frozen_stats: bool,
    },
    Relu {
        x: Var,
    },
    Elu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    SumAll {
        x: Var,
    },
    MeanAxis0 {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    ClampLogVar {
        g: Var,
    },
    PoeFuse {
        experts: Vec<Var>,
    },
    KlDiag {
        q: Var,
        p: Var,
    },
    Reparam {
        g: Var,
        noise: Array2<f64>,
    },
    BernoulliLoglik {
        logits: Var,
        target: Tensor,
    },
    GaussLogPdf {
        g: Var,
        z: Var,
    },
    LogMeanExpAxis0 {
        x: Var,
    },
    SelectRows {
        sources: Vec<Var>,
        pick: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients with respect to tape nodes, produced by [`Tape::backward`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Extracts a 0-dimensional node's value.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.ndim(), 0, "scalar() on non-scalar node");
        *t.first().unwrap()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        // several ops index flat slices, so every node holds standard layout
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input: gradients are not tracked through it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable parameter: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn view2(&self, v: Var) -> ArrayView2<'_, f64> {
        self.value(v)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("expected a rank-2 tensor")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.view2(x);
        let wv = self.view2(w);
        assert_eq!(xv.ncols(), wv.nrows(), "linear: inner dims disagree");
        let mut y = xv.dot(&wv);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), y.ncols());
            let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y += &b1;
        }
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push(y.into_dyn(), Op::Linear { x, w, b }, needs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [B,C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,kh,kw]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = conv_out(h, kh, stride, pad);
        let wo = conv_out(wd, kw, stride, pad);
        let w_mat = self
            .value(w)
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap()
            .to_owned();
        let bias = self
            .value(b)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let mut out = Array2::<f64>::zeros((batch, o * ho * wo));
        let x_flat = self.value(x).as_slice().unwrap();
        let plane = c * h * wd;
        for bi in 0..batch {
            let cols = im2col(
                &x_flat[bi * plane..(bi + 1) * plane],
                c,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            );
            let y = w_mat.dot(&cols); // [O, Ho*Wo]
            let mut row = out.row_mut(bi);
            let row = row.as_slice_mut().unwrap();
            for (oc, yrow) in y.outer_iter().enumerate() {
                let base = oc * ho * wo;
                let bo = bias[oc];
                for (i, v) in yrow.iter().enumerate() {
                    row[base + i] = v + bo;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = out
            .into_shape_with_order(IxDyn(&[batch, o, ho, wo]))
            .unwrap();
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d input must be [B,C,H,W]");
        assert_eq!(ws.len(), 4, "conv_transpose2d weight must be [C,O,kh,kw]");
        assert_eq!(xs[1], ws[0], "conv_transpose2d channel mismatch");
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[1], ws[2], ws[3]);
        let ho = convt_out(h, kh, stride, pad);
        let wo = convt_out(wd, kw, stride, pad);
        let w_mat = self
            .value(w)
            .view()
            .into_shape_with_order((c, o * kh * kw))
            .unwrap()
            .to_owned();
        let bias = self
            .value(b)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let x_flat = self.value(x).as_slice().unwrap();
        let plane = c * h * wd;
        let mut out = vec![0.0; batch * o * ho * wo];
        for bi in 0..batch {
            let x_mat =
                ArrayView2::from_shape((c, h * wd), &x_flat[bi * plane..(bi + 1) * plane]).unwrap();
            let cols = w_mat.t().dot(&x_mat); // [O*kh*kw, H*W]
            let img = col2im(&cols, o, ho, wo, kh, kw, stride, pad, h, wd);
            let base = bi * o * ho * wo;
            for (i, v) in img.iter().enumerate() {
                out[base + i] = *v;
            }
            for oc in 0..o {
                let bo = bias[oc];
                for i in 0..ho * wo {
                    out[base + oc * ho * wo + i] += bo;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::from_shape_vec(IxDyn(&[batch, o, ho, wo]), out).unwrap();
        self.push(value, Op::ConvT2d { x, w, b, stride, pad }, needs)
    }

    /// Row lookup into an embedding table; `indices` selects one row per
    /// batch element.
    pub fn embedding(&mut self, table: Var, indices: Vec<usize>) -> Var {
        let t = self.view2(table);
        let e = t.ncols();
        let mut out = Array2::<f64>::zeros((indices.len(), e));
        for (row, &ix) in indices.iter().enumerate() {
            out.row_mut(row).assign(&t.row(ix));
        }
        let needs = self.needs(table);
        self.push(out.into_dyn(), Op::Embedding { table, indices }, needs)
    }

    /// Batch normalization over the feature axis ([B,F]) or channel axis
    /// ([B,C,H,W]). `stats`: `None` normalizes with the batch statistics
    /// (training mode) and returns them; `Some((mean, var))` freezes the
    /// statistics (eval mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: Option<(Array1<f64>, Array1<f64>)>,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let xs = self.value(x).shape().to_vec();
        let features = match xs.len() {
            2 => xs[1],
            4 => xs[1],
            _ => panic!("batch_norm expects rank 2 or 4"),
        };
        let frozen_stats = stats.is_some();
        let (mean, var) = match stats {
            Some((m, v)) => (m, v),
            None => batch_stats(self.value(x), features),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = normalize(self.value(x), &mean, &inv_std, features);
        let g = self
            .value(gamma)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let bvec = self
            .value(beta)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let value = affine_features(&xhat, &g, &bvec, features);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.clone(),
                frozen_stats,
            },
            needs,
        );
        (out, mean, var)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| if v > 0.0 { v } else { v.exp_m1() });
        let needs = self.needs(x);
        self.push(value, Op::Elu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) - self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) * self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).mapv(|v| c * v);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = ndarray::arr0(self.value(x).sum()).into_dyn();
        let needs = self.needs(x);
        self.push(value, Op::SumAll { x }, needs)
    }

    /// Mean over the leading axis: `[B] -> scalar`, `[K,B] -> [B]`.
    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean_axis0 on empty axis");
        let needs = self.needs(x);
        self.push(value, Op::MeanAxis0 { x }, needs)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let needs = self.needs(x);
        self.push(value, Op::Reshape { x }, needs)
    }

    /// Clamps the log-variance columns of a `[B, 2L]` Gaussian-parameter
    /// tensor to the gauss-core range; means pass through untouched.
    pub fn clamp_log_var(&mut self, g: Var) -> Var {
        let v = self.view2(g);
        let l = gauss_latent(v.ncols());
        let mut value = v.to_owned();
        for mut row in value.outer_iter_mut() {
            for d in l..2 * l {
                row[d] = row[d].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
            }
        }
        let needs = self.needs(g);
        self.push(value.into_dyn(), Op::ClampLogVar { g }, needs)
    }

    /// Product-of-experts fusion of `[B, 2L]` Gaussian-parameter tensors.
    /// Expert log-variances are clamped before exponentiation.
    pub fn poe_fuse(&mut self, experts: &[Var]) -> Var {
        assert!(!experts.is_empty(), "poe_fuse needs at least one expert");
        let first = self.view2(experts[0]);
        let (b, cols) = (first.nrows(), first.ncols());
        let l = gauss_latent(cols);
        for &e in experts {
            assert_eq!(self.view2(e).dim(), (b, cols), "poe_fuse shape mismatch");
        }
        let mut out = Array2::<f64>::zeros((b, cols));
        for bi in 0..b {
            for d in 0..l {
                let mut precision = 0.0;
                let mut weighted = 0.0;
                for &e in experts {
                    let row = self.view2(e);
                    let lv = row[(bi, l + d)].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                    let p = (-lv).exp();
                    precision += p;
                    weighted += p * row[(bi, d)];
                }
                out[(bi, d)] = weighted / precision;
                out[(bi, l + d)] = -precision.ln();
            }
        }
        let needs = experts.iter().any(|&e| self.needs(e));
        self.push(
            out.into_dyn(),
            Op::PoeFuse {
                experts: experts.to_vec(),
            },
            needs,
        )
    }

    /// Closed-form KL(q || p) per batch row for `[B, 2L]` parameter tensors.
    pub fn kl_diag(&mut self, q: Var, p: Var) -> Var {
        let qv = self.view2(q);
        let pv = self.view2(p);
        assert_eq!(qv.dim(), pv.dim(), "kl_diag shape mismatch");
        let l = gauss_latent(qv.ncols());
        let b = qv.nrows();
        let mut out = Array1::<f64>::zeros(b);
        for bi in 0..b {
            let mut acc = 0.0;
            for d in 0..l {
                let lq = qv[(bi, l + d)].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                let lp = pv[(bi, l + d)].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                let diff = qv[(bi, d)] - pv[(bi, d)];
                acc += 0.5 * ((lq - lp).exp() + diff * diff * (-lp).exp() - 1.0 + lp - lq);
            }
            out[bi] = acc;
        }
        let needs = self.needs(q) || self.needs(p);
        self.push(out.into_dyn(), Op::KlDiag { q, p }, needs)
    }

    /// Reparameterized sample `mean + exp(log_var/2) ⊙ noise`, `[B, 2L] ->
    /// [B, L]`. Callers pass posteriors whose log-variances are already
    /// clamped (fusion and `clamp_log_var` guarantee this).
    pub fn reparam(&mut self, g: Var, noise: Array2<f64>) -> Var {
        let gv = self.view2(g);
        let l = gauss_latent(gv.ncols());
        assert_eq!(noise.dim(), (gv.nrows(), l), "reparam noise shape mismatch");
        let mut out = Array2::<f64>::zeros((gv.nrows(), l));
        for bi in 0..gv.nrows() {
            for d in 0..l {
                out[(bi, d)] = gv[(bi, d)] + (0.5 * gv[(bi, l + d)]).exp() * noise[(bi, d)];
            }
        }
        let needs = self.needs(g);
        self.push(out.into_dyn(), Op::Reparam { g, noise }, needs)
    }

    /// Stable Bernoulli log-likelihood per batch row: logits `[B, ...]`
    /// against constant targets of the same shape, summed over features.
    pub fn bernoulli_loglik(&mut self, logits: Var, target: Tensor) -> Var {
        assert_eq!(self.value(logits).shape(), target.shape());
        let b = self.value(logits).shape()[0];
        let feat = self.value(logits).len() / b;
        let lv = self.value(logits).as_slice().unwrap();
        let tv = target.as_slice().unwrap();
        let mut out = Array1::<f64>::zeros(b);
        for bi in 0..b {
            let mut acc = 0.0;
            for i in 0..feat {
                let l = lv[bi * feat + i];
                let t = tv[bi * feat + i];
                acc += t * l - crate::gauss::softplus(l);
            }
            out[bi] = acc;
        }
        let needs = self.needs(logits);
        self.push(out.into_dyn(), Op::BernoulliLoglik { logits, target }, needs)
    }

    /// Diagonal-Gaussian log-density of `z` `[B, L]` under `g` `[B, 2L]`,
    /// per batch row.
    pub fn gauss_log_pdf(&mut self, g: Var, z: Var) -> Var {
        let gv = self.view2(g);
        let zv = self.view2(z);
        let l = gauss_latent(gv.ncols());
        assert_eq!(zv.dim(), (gv.nrows(), l), "gauss_log_pdf shape mismatch");
        const LN_2PI: f64 = 1.837_877_066_409_345_6;
        let mut out = Array1::<f64>::zeros(gv.nrows());
        for bi in 0..gv.nrows() {
            let mut acc = 0.0;
            for d in 0..l {
                let lv = gv[(bi, l + d)].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                let diff = zv[(bi, d)] - gv[(bi, d)];
                acc += -0.5 * (LN_2PI + lv + diff * diff * (-lv).exp());
            }
            out[bi] = acc;
        }
        let needs = self.needs(g) || self.needs(z);
        self.push(out.into_dyn(), Op::GaussLogPdf { g, z }, needs)
    }

    /// log of the mean of exponentials over the leading axis, computed
    /// stably as `m + ln(Σ exp(x−m) / K)`: `[K, B] -> [B]`. Identical rows
    /// reproduce the row exactly (the K-fold count cancels inside the log).
    pub fn logmeanexp_axis0(&mut self, x: Var) -> Var {
        let xv = self.view2(x);
        let (k, b) = xv.dim();
        let mut out = Array1::<f64>::zeros(b);
        for bi in 0..b {
            let col = xv.column(bi);
            let m = col.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            out[bi] = m + (col.iter().map(|&v| (v - m).exp()).sum::<f64>() / k as f64).ln();
        }
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::LogMeanExpAxis0 { x }, needs)
    }

    /// Row-wise multiplexer: output row `b` is row `b` of
    /// `sources[pick[b]]`. Routes each row's gradient to the chosen source.
    pub fn select_rows(&mut self, sources: &[Var], pick: Vec<usize>) -> Var {
        assert!(!sources.is_empty());
        let first = self.view2(sources[0]);
        let dim = first.dim();
        for &s in sources {
            assert_eq!(self.view2(s).dim(), dim, "select_rows shape mismatch");
        }
        assert_eq!(pick.len(), dim.0);
        let mut out = Array2::<f64>::zeros(dim);
        for (bi, &src) in pick.iter().enumerate() {
            out.row_mut(bi).assign(&self.view2(sources[src]).row(bi));
        }
        let needs = sources.iter().any(|&s| self.needs(s));
        self.push(
            out.into_dyn(),
            Op::SelectRows {
                sources: sources.to_vec(),
                pick,
            },
            needs,
        )
    }

    /// Global average pooling `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let flat = self.value(x).as_slice().unwrap();
        let mut out = Array2::<f64>::zeros((b, c));
        let area = h * w;
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * area;
                out[(bi, ci)] = flat[base..base + area].iter().sum::<f64>() / area as f64;
            }
        }
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::GlobalAvgPool { x }, needs)
    }

    /// Per-row softmax cross-entropy against integer labels: `[B, C] -> [B]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let lv = self.view2(logits);
        assert_eq!(lv.nrows(), labels.len());
        let mut out = Array1::<f64>::zeros(lv.nrows());
        for (bi, row) in lv.outer_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            out[bi] = lse - row[labels[bi]];
        }
        let needs = self.needs(logits);
        self.push(out.into_dyn(), Op::SoftmaxCrossEntropy { logits, labels }, needs)
    }

    /// Runs reverse-mode accumulation from a scalar seed node.
    pub fn backward(&self, seed: Var) -> Grads {
        assert_eq!(self.value(seed).ndim(), 0, "backward seed must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(ndarray::arr0(1.0).into_dyn());
        for i in (0..=seed.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if !matches!(self.nodes[i].op, Op::Leaf) {
                // interior gradients are no longer needed
                grads[i] = None;
            } else {
                grads[i] = Some(g);
            }
        }
        Grads(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let gy = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if self.needs(*x) {
                    let wv = self.view2(*w);
                    self.accumulate(grads, *x, gy.dot(&wv.t()).into_dyn());
                }
                if self.needs(*w) {
                    let xv = self.view2(*x);
                    self.accumulate(grads, *w, xv.t().dot(&gy).into_dyn());
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.accumulate(grads, *b, gy.sum_axis(Axis(0)).into_dyn());
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.backprop_conv2d(*x, *w, *b, *stride, *pad, g, grads);
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                self.backprop_convt2d(*x, *w, *b, *stride, *pad, g, grads);
            }
            Op::Embedding { table, indices } => {
                if self.needs(*table) {
                    let gy = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let mut gt = Array2::<f64>::zeros(self.view2(*table).dim());
                    for (row, &ix) in indices.iter().enumerate() {
                        let mut target = gt.row_mut(ix);
                        target += &gy.row(row);
                    }
                    self.accumulate(grads, *table, gt.into_dyn());
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                frozen_stats,
            } => {
                let features = inv_std.len();
                let gamma_v = self
                    .value(*gamma)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                if self.needs(*gamma) {
                    let mut dg = Array1::<f64>::zeros(features);
                    reduce_features(g, xhat, features, &mut dg);
                    self.accumulate(grads, *gamma, dg.into_dyn());
                }
                if self.needs(*beta) {
                    let ones = Tensor::ones(IxDyn(xhat.shape()));
                    let mut db = Array1::<f64>::zeros(features);
                    reduce_features(g, &ones, features, &mut db);
                    self.accumulate(grads, *beta, db.into_dyn());
                }
                if self.needs(*x) {
                    let n = (xhat.len() / features) as f64;
                    // dxhat = g * gamma (broadcast over features)
                    let dxhat = broadcast_mul(g, &gamma_v.to_owned(), features);
                    let dx = if *frozen_stats {
                        broadcast_mul(&dxhat, inv_std, features)
                    } else {
                        let mut sum_d = Array1::<f64>::zeros(features);
                        let ones = Tensor::ones(IxDyn(xhat.shape()));
                        reduce_features(&dxhat, &ones, features, &mut sum_d);
                        let mut sum_dx = Array1::<f64>::zeros(features);
                        reduce_features(&dxhat, xhat, features, &mut sum_dx);
                        let mut dx = dxhat;
                        apply_bn_input_grad(&mut dx, xhat, &sum_d, &sum_dx, inv_std, n, features);
                        dx
                    };
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Relu { x } => {
                let mask = self.value(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *x, g * &mask);
            }
            Op::Elu { x } => {
                let deriv = self.value(*x).mapv(|v| if v > 0.0 { 1.0 } else { v.exp() });
                self.accumulate(grads, *x, g * &deriv);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].value;
                let deriv = y.mapv(|s| s * (1.0 - s));
                self.accumulate(grads, *x, g * &deriv);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.mapv(|v| c * v));
            }
            Op::SumAll { x } => {
                let gs = *g.first().unwrap();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_elem(IxDyn(&shape), gs));
            }
            Op::MeanAxis0 { x } => {
                let shape = self.value(*x).shape().to_vec();
                let n = shape[0] as f64;
                let mut gx = Tensor::zeros(IxDyn(&shape));
                for mut lane in gx.axis_iter_mut(Axis(0)) {
                    lane.assign(&g.mapv(|v| v / n));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    let slice = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    self.accumulate(grads, p, slice);
                    offset += len;
                }
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                let gx = g
                    .view()
                    .into_shape_with_order(IxDyn(&shape))
                    .unwrap()
                    .to_owned();
                self.accumulate(grads, *x, gx);
            }
            Op::ClampLogVar { g: inp } => {
                let v = self.view2(*inp);
                let l = gauss_latent(v.ncols());
                let gy = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut gx = gy.to_owned();
                for (bi, row) in v.outer_iter().enumerate() {
                    for d in l..2 * l {
                        if row[d].abs() > LOG_VAR_CLAMP {
                            gx[(bi, d)] = 0.0;
                        }
                    }
                }
                self.accumulate(grads, *inp, gx.into_dyn());
            }
            Op::PoeFuse { experts } => {
                self.backprop_poe(experts, i, g, grads);
            }
            Op::KlDiag { q, p } => {
                self.backprop_kl(*q, *p, g, grads);
            }
            Op::Reparam { g: gp, noise } => {
                if self.needs(*gp) {
                    let gv = self.view2(*gp);
                    let l = gauss_latent(gv.ncols());
                    let gy = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let mut gx = Array2::<f64>::zeros(gv.dim());
                    for bi in 0..gv.nrows() {
                        for d in 0..l {
                            gx[(bi, d)] = gy[(bi, d)];
                            gx[(bi, l + d)] =
                                gy[(bi, d)] * 0.5 * (0.5 * gv[(bi, l + d)]).exp() * noise[(bi, d)];
                        }
                    }
                    self.accumulate(grads, *gp, gx.into_dyn());
                }
            }
            Op::BernoulliLoglik { logits, target } => {
                if self.needs(*logits) {
                    let shape = self.value(*logits).shape().to_vec();
                    let b = shape[0];
                    let feat: usize = shape[1..].iter().product();
                    let lv = self.value(*logits).as_slice().unwrap();
                    let tv = target.as_slice().unwrap();
                    let gy = g.as_slice().unwrap();
                    let mut gx = vec![0.0; lv.len()];
                    for bi in 0..b {
                        for k in 0..feat {
                            let idx = bi * feat + k;
                            gx[idx] = gy[bi] * (tv[idx] - sigmoid(lv[idx]));
                        }
                    }
                    self.accumulate(grads, *logits, Tensor::from_shape_vec(IxDyn(&shape), gx).unwrap());
                }
            }
            Op::GaussLogPdf { g: gp, z } => {
                let gv = self.view2(*gp);
                let zv = self.view2(*z);
                let l = gauss_latent(gv.ncols());
                let gy = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gg = Array2::<f64>::zeros(gv.dim());
                let mut gz = Array2::<f64>::zeros(zv.dim());
                for bi in 0..gv.nrows() {
                    for d in 0..l {
                        let raw_lv = gv[(bi, l + d)];
                        let lv = raw_lv.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                        let inv_var = (-lv).exp();
                        let diff = zv[(bi, d)] - gv[(bi, d)];
                        gz[(bi, d)] = gy[bi] * (-diff * inv_var);
                        gg[(bi, d)] = gy[bi] * (diff * inv_var);
                        if raw_lv.abs() <= LOG_VAR_CLAMP {
                            gg[(bi, l + d)] = gy[bi] * (-0.5) * (1.0 - diff * diff * inv_var);
                        }
                    }
                }
                if self.needs(*gp) {
                    self.accumulate(grads, *gp, gg.into_dyn());
                }
                if self.needs(*z) {
                    self.accumulate(grads, *z, gz.into_dyn());
                }
            }
            Op::LogMeanExpAxis0 { x } => {
                let xv = self.view2(*x);
                let gy = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gx = Array2::<f64>::zeros(xv.dim());
                for bi in 0..xv.ncols() {
                    let col = xv.column(bi);
                    let m = col.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                    let denom: f64 = col.iter().map(|&v| (v - m).exp()).sum();
                    for k in 0..xv.nrows() {
                        gx[(k, bi)] = gy[bi] * (xv[(k, bi)] - m).exp() / denom;
                    }
                }
                self.accumulate(grads, *x, gx.into_dyn());
            }
            Op::SelectRows { sources, pick } => {
                let gy = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                for (si, &s) in sources.iter().enumerate() {
                    if !self.needs(s) {
                        continue;
                    }
                    let mut gs = Array2::<f64>::zeros(self.view2(s).dim());
                    let mut any = false;
                    for (bi, &src) in pick.iter().enumerate() {
                        if src == si {
                            gs.row_mut(bi).assign(&gy.row(bi));
                            any = true;
                        }
                    }
                    if any {
                        self.accumulate(grads, s, gs.into_dyn());
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x).shape().to_vec();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let gy = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let area = (h * w) as f64;
                let mut gx = vec![0.0; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        let v = gy[(bi, ci)] / area;
                        let base = (bi * c + ci) * h * w;
                        for s in &mut gx[base..base + h * w] {
                            *s = v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_shape_vec(IxDyn(&xs), gx).unwrap());
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let lv = self.view2(*logits);
                    let gy = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    let mut gx = Array2::<f64>::zeros(lv.dim());
                    for (bi, row) in lv.outer_iter().enumerate() {
                        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        for (ci, &v) in row.iter().enumerate() {
                            let softmax = (v - m).exp() / denom;
                            let indicator = if ci == labels[bi] { 1.0 } else { 0.0 };
                            gx[(bi, ci)] = gy[bi] * (softmax - indicator);
                        }
                    }
                    self.accumulate(grads, *logits, gx.into_dyn());
                }
            }
        }
    }

    fn backprop_conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = conv_out(h, kh, stride, pad);
        let wo = conv_out(wd, kw, stride, pad);
        let w_mat = self
            .value(w)
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap()
            .to_owned();
        let x_flat = self.value(x).as_slice().unwrap();
        let g_flat = g.as_slice().unwrap();
        let plane = c * h * wd;
        let out_plane = o * ho * wo;
        let mut dw = Array2::<f64>::zeros((o, c * kh * kw));
        let mut db = Array1::<f64>::zeros(o);
        let mut dx = vec![0.0; batch * plane];
        for bi in 0..batch {
            let gy =
                ArrayView2::from_shape((o, ho * wo), &g_flat[bi * out_plane..(bi + 1) * out_plane])
                    .unwrap();
            if self.needs(w) {
                let cols = im2col(
                    &x_flat[bi * plane..(bi + 1) * plane],
                    c,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    pad,
                    ho,
                    wo,
                );
                dw += &gy.dot(&cols.t());
            }
            if self.needs(b) {
                db += &gy.sum_axis(Axis(1));
            }
            if self.needs(x) {
                let dcols = w_mat.t().dot(&gy); // [C*kh*kw, Ho*Wo]
                let img = col2im(&dcols, c, h, wd, kh, kw, stride, pad, ho, wo);
                for (idx, v) in img.iter().enumerate() {
                    dx[bi * plane + idx] += *v;
                }
            }
        }
        if self.needs(w) {
            self.accumulate(
                grads,
                w,
                dw.into_shape_with_order(IxDyn(&ws)).unwrap(),
            );
        }
        if self.needs(b) {
            self.accumulate(grads, b, db.into_dyn());
        }
        if self.needs(x) {
            self.accumulate(grads, x, Tensor::from_shape_vec(IxDyn(&xs), dx).unwrap());
        }
    }

    fn backprop_convt2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[1], ws[2], ws[3]);
        let ho = convt_out(h, kh, stride, pad);
        let wo = convt_out(wd, kw, stride, pad);
        let w_mat = self
            .value(w)
            .view()
            .into_shape_with_order((c, o * kh * kw))
            .unwrap()
            .to_owned();
        let x_flat = self.value(x).as_slice().unwrap();
        let g_flat = g.as_slice().unwrap();
        let plane = c * h * wd;
        let out_plane = o * ho * wo;
        let mut dw = Array2::<f64>::zeros((c, o * kh * kw));
        let mut db = Array1::<f64>::zeros(o);
        let mut dx = vec![0.0; batch * plane];
        for bi in 0..batch {
            let gy_img = &g_flat[bi * out_plane..(bi + 1) * out_plane];
            // gather the output gradient back into column form over the
            // input grid (the adjoint of the forward scatter)
            let dcols = im2col(gy_img, o, ho, wo, kh, kw, stride, pad, h, wd);
            if self.needs(x) {
                let dxm = w_mat.dot(&dcols); // [C, H*W]
                for (idx, v) in dxm.iter().enumerate() {
                    dx[bi * plane + idx] += *v;
                }
            }
            if self.needs(w) {
                let x_mat =
                    ArrayView2::from_shape((c, h * wd), &x_flat[bi * plane..(bi + 1) * plane])
                        .unwrap();
                dw += &x_mat.dot(&dcols.t());
            }
            if self.needs(b) {
                for oc in 0..o {
                    db[oc] += gy_img[oc * ho * wo..(oc + 1) * ho * wo].iter().sum::<f64>();
                }
            }
        }
        if self.needs(w) {
            self.accumulate(grads, w, dw.into_shape_with_order(IxDyn(&ws)).unwrap());
        }
        if self.needs(b) {
            self.accumulate(grads, b, db.into_dyn());
        }
        if self.needs(x) {
            self.accumulate(grads, x, Tensor::from_shape_vec(IxDyn(&xs), dx).unwrap());
        }
    }

    fn backprop_poe(&self, experts: &[Var], node: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.nodes[node]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let l = gauss_latent(out.ncols());
        let gy = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for &e in experts {
            if !self.needs(e) {
                continue;
            }
            let ev = self.view2(e);
            let mut ge = Array2::<f64>::zeros(ev.dim());
            for bi in 0..ev.nrows() {
                for d in 0..l {
                    let raw_lv = ev[(bi, l + d)];
                    let lv = raw_lv.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                    let p = (-lv).exp();
                    // out precision = exp(-out_lv)
                    let ratio = p * out[(bi, l + d)].exp(); // p_i / out_prec
                    let dmu = gy[(bi, d)];
                    let dlv = gy[(bi, l + d)];
                    ge[(bi, d)] = dmu * ratio;
                    if raw_lv.abs() <= LOG_VAR_CLAMP {
                        ge[(bi, l + d)] =
                            ratio * (dmu * (out[(bi, d)] - ev[(bi, d)]) + dlv);
                    }
                }
            }
            self.accumulate(grads, e, ge.into_dyn());
        }
    }

    fn backprop_kl(&self, q: Var, p: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let qv = self.view2(q);
        let pv = self.view2(p);
        let l = gauss_latent(qv.ncols());
        let gy = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut gq = Array2::<f64>::zeros(qv.dim());
        let mut gp = Array2::<f64>::zeros(pv.dim());
        for bi in 0..qv.nrows() {
            for d in 0..l {
                let raw_lq = qv[(bi, l + d)];
                let raw_lp = pv[(bi, l + d)];
                let lq = raw_lq.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                let lp = raw_lp.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                let diff = qv[(bi, d)] - pv[(bi, d)];
                let inv_vp = (-lp).exp();
                let ratio = (lq - lp).exp();
                let s = gy[bi];
                gq[(bi, d)] = s * diff * inv_vp;
                gp[(bi, d)] = -s * diff * inv_vp;
                if raw_lq.abs() <= LOG_VAR_CLAMP {
                    gq[(bi, l + d)] = s * 0.5 * (ratio - 1.0);
                }
                if raw_lp.abs() <= LOG_VAR_CLAMP {
                    gp[(bi, l + d)] = s * 0.5 * (1.0 - ratio - diff * diff * inv_vp);
                }
            }
        }
        if self.needs(q) {
            self.accumulate(grads, q, gq.into_dyn());
        }
        if self.needs(p) {
            self.accumulate(grads, p, gp.into_dyn());
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn gauss_latent(cols: usize) -> usize {
    assert!(cols % 2 == 0, "Gaussian parameter tensors must be [B, 2L]");
    cols / 2
}

pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "convolution kernel larger than input");
    (size + 2 * pad - k) / stride + 1
}

pub(crate) fn convt_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    let full = (size - 1) * stride + k;
    assert!(full > 2 * pad, "transposed convolution output underflow");
    full - 2 * pad
}

/// Unfolds `[C,H,W]` (flat slice) into `[C*kh*kw, ho*wo]` patch columns.
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    let cols_slice = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let row_base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let in_base = ci * h * w + ii as usize * w;
                    let out_base = row_base + oi * wo;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols_slice[out_base + oj] = x[in_base + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch columns back into a `[C,H,W]`
/// image.
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut img = vec![0.0; c * h * w];
    let cols_slice = cols.as_slice().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let row_base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let img_base = ci * h * w + ii as usize * w;
                    let col_base = row_base + oi * wo;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        img[img_base + jj as usize] += cols_slice[col_base + oj];
                    }
                }
            }
        }
    }
    img
}

fn batch_stats(x: &Tensor, features: usize) -> (Array1<f64>, Array1<f64>) {
    let n = (x.len() / features) as f64;
    let mut mean = Array1::<f64>::zeros(features);
    let ones = Tensor::ones(IxDyn(x.shape()));
    reduce_features(x, &ones, features, &mut mean);
    mean.mapv_inplace(|v| v / n);
    let mut var = Array1::<f64>::zeros(features);
    for_each_feature(x, features, |f, v| {
        let d = v - mean[f];
        var[f] += d * d;
    });
    var.mapv_inplace(|v| v / n);
    (mean, var)
}

fn normalize(x: &Tensor, mean: &Array1<f64>, inv_std: &Array1<f64>, features: usize) -> Tensor {
    let mut out = x.clone();
    map_features(&mut out, features, |f, v| (v - mean[f]) * inv_std[f]);
    out
}

fn affine_features(xhat: &Tensor, gamma: &Array1<f64>, beta: &Array1<f64>, features: usize) -> Tensor {
    let mut out = xhat.clone();
    map_features(&mut out, features, |f, v| gamma[f] * v + beta[f]);
    out
}

fn broadcast_mul(x: &Tensor, scale: &Array1<f64>, features: usize) -> Tensor {
    let mut out = x.clone();
    map_features(&mut out, features, |f, v| v * scale[f]);
    out
}

fn apply_bn_input_grad(
    dx: &mut Tensor,
    xhat: &Tensor,
    sum_d: &Array1<f64>,
    sum_dx: &Array1<f64>,
    inv_std: &Array1<f64>,
    n: f64,
    features: usize,
) {
    let xh = xhat.as_slice().unwrap();
    let shape = dx.shape().to_vec();
    let dxs = dx.as_slice_mut().unwrap();
    each_feature_index(&shape, features, |idx, f| {
        dxs[idx] = inv_std[f] / n * (n * dxs[idx] - sum_d[f] - xh[idx] * sum_dx[f]);
    });
}

/// Σ over non-feature positions of a(x)·b(x), accumulated per feature.
fn reduce_features(a: &Tensor, b: &Tensor, features: usize, out: &mut Array1<f64>) {
    let av = a.as_slice().unwrap();
    let bv = b.as_slice().unwrap();
    each_feature_index(&a.shape().to_vec(), features, |idx, f| {
        out[f] += av[idx] * bv[idx];
    });
}

fn for_each_feature(x: &Tensor, features: usize, mut f: impl FnMut(usize, f64)) {
    let xs = x.as_slice().unwrap();
    each_feature_index(&x.shape().to_vec(), features, |idx, feat| f(feat, xs[idx]));
}

fn map_features(x: &mut Tensor, features: usize, f: impl Fn(usize, f64) -> f64) {
    let shape = x.shape().to_vec();
    let xs = x.as_slice_mut().unwrap();
    each_feature_index(&shape, features, |idx, feat| {
        xs[idx] = f(feat, xs[idx]);
    });
}

fn each_feature_index(shape: &[usize], features: usize, mut f: impl FnMut(usize, usize)) {
    match shape.len() {
        2 => {
            let (b, feat) = (shape[0], shape[1]);
            assert_eq!(feat, features);
            for bi in 0..b {
                for fi in 0..feat {
                    f(bi * feat + fi, fi);
                }
            }
        }
        4 => {
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            assert_eq!(c, features);
            let area = h * w;
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * area;
                    for s in 0..area {
                        f(base + s, ci);
                    }
                }
            }
        }
        _ => panic!("batch norm supports rank 2 or 4 only"),
    }
}
