//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every forward op appends a node holding its output and whatever it needs
//! for the backward pass. `Tape::backward` walks the list in reverse and
//! accumulates vector-Jacobian products into the parents that require
//! gradients. Heavy ops (attention, causal 3-D convolution) are fused so the
//! tape stays short.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{attention_backward, attention_forward, AttnShape};
use crate::conv::{conv3d_backward, conv3d_forward, ConvGeom};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{gemm, Mat, Tensor};

const LN_EPS: f64 = 1e-6;
const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBcast {
        x: Var,
        s: Var,
        groups: usize,
    },
    MulBcast {
        x: Var,
        s: Var,
        groups: usize,
    },
    Modulate {
        x: Var,
        scale: Var,
        shift: Var,
        groups: usize,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Silu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    HeadL2Norm {
        x: Var,
        heads: usize,
        inv_norm: Vec<T>,
    },
    HeadScale {
        x: Var,
        temps: Var,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        shape: AttnShape,
        scale: T,
        probs: Vec<T>,
    },
    Gather {
        x: Var,
        idx: Rc<[u32]>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
    },
    Reshape(Var),
    Mean(Var),
    Mse(Var, Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one forward computation.
///
/// A tape optionally borrows a [`ParamStore`]; `param` turns stored weights
/// into leaves (once per tape) so their gradients can be collected after
/// `backward`.
pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    train: bool,
}

impl<'p, T: Real> Tape<'p, T> {
    /// A tape with no parameter store.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            train: true,
        }
    }

    /// A tape whose parameter leaves require gradients.
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: vec![None; params.len()],
            train: true,
        }
    }

    /// A tape whose parameter leaves are constants; nothing records grads.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            train: false,
            ..Self::with_params(params)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.train,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a fresh constant: no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let value = store.get(id).clone();
        let v = self.leaf(value);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .expect("add shapes");
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .expect("sub shapes");
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .expect("mul shapes");
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Broadcast geometry: `s` is `[G, D]` (or `[D]`), `x` is viewed as
    /// `[G, R, D]`.
    fn bcast_dims(&self, x: Var, s: Var) -> (usize, usize, usize) {
        let sv = self.value(s);
        let d = sv.last_dim();
        let g = sv.numel() / d;
        let n = self.value(x).numel();
        assert!(
            n.is_multiple_of(g * d),
            "broadcast {:?} over {:?}",
            sv.shape(),
            self.shape(x)
        );
        (g, n / (g * d), d)
    }

    pub fn add_bcast(&mut self, x: Var, s: Var) -> Var {
        let (g, r, d) = self.bcast_dims(x, s);
        let mut out = self.value(x).clone();
        let sd = self.data(s).to_vec();
        for (gi, chunk) in out.data_mut().chunks_mut(r * d).enumerate() {
            let row = &sd[gi * d..(gi + 1) * d];
            for xs in chunk.chunks_mut(d) {
                for (o, &b) in xs.iter_mut().zip(row) {
                    *o += b;
                }
            }
        }
        self.push(out, Op::AddBcast { x, s, groups: g }, &[x, s])
    }

    pub fn mul_bcast(&mut self, x: Var, s: Var) -> Var {
        let (g, r, d) = self.bcast_dims(x, s);
        let mut out = self.value(x).clone();
        let sd = self.data(s).to_vec();
        for (gi, chunk) in out.data_mut().chunks_mut(r * d).enumerate() {
            let row = &sd[gi * d..(gi + 1) * d];
            for xs in chunk.chunks_mut(d) {
                for (o, &b) in xs.iter_mut().zip(row) {
                    *o *= b;
                }
            }
        }
        self.push(out, Op::MulBcast { x, s, groups: g }, &[x, s])
    }

    /// `x·(1 + scale) + shift` with per-group `scale`/`shift` of shape `[G, D]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (g, r, d) = self.bcast_dims(x, scale);
        assert_eq!(self.shape(scale), self.shape(shift), "modulate scale/shift");
        let mut out = self.value(x).clone();
        let sc = self.data(scale).to_vec();
        let sh = self.data(shift).to_vec();
        for (gi, chunk) in out.data_mut().chunks_mut(r * d).enumerate() {
            let srow = &sc[gi * d..(gi + 1) * d];
            let brow = &sh[gi * d..(gi + 1) * d];
            for xs in chunk.chunks_mut(d) {
                for j in 0..d {
                    xs[j] = xs[j] * (T::one() + srow[j]) + brow[j];
                }
            }
        }
        self.push(
            out,
            Op::Modulate {
                x,
                scale,
                shift,
                groups: g,
            },
            &[x, scale, shift],
        )
    }

    /// `a` viewed as `[M, K]` (K = trailing axis) times `b` of shape `[K, N]`.
    /// The result keeps `a`'s leading axes with trailing axis `N`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (bk, n) = {
            let bs = self.shape(b);
            assert_eq!(bs.len(), 2, "matmul rhs must be 2-D");
            (bs[0], bs[1])
        };
        let av = self.value(a);
        let k = av.last_dim();
        assert_eq!(
            k,
            bk,
            "matmul inner dim {:?} x {:?}",
            av.shape(),
            self.shape(b)
        );
        let m = av.numel() / k;
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = crate::tensor::matmul(av.data(), self.data(b), m, k, n);
        let out = Tensor::from_vec(&shape, out).expect("matmul shape");
        self.push(out, Op::MatMul { a, b }, &[a, b])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_fwd);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Parameter-free layer norm over the trailing axis.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(xv.numel() / d);
        let eps = T::of(LN_EPS);
        let inv_d = T::one() / T::of(d as f64);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        self.push(out, Op::LayerNorm { x, rstd }, &[x])
    }

    /// L2-normalises each of the `heads` equal segments of every row.
    pub fn head_l2_norm(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        assert!(
            d.is_multiple_of(heads),
            "width {d} not divisible by {heads} heads"
        );
        let dh = d / heads;
        let mut out = xv.clone();
        let mut inv_norm = Vec::with_capacity(xv.numel() / dh);
        for seg in out.data_mut().chunks_mut(dh) {
            let n2 = seg.iter().map(|&v| v * v).sum::<T>();
            let inv = T::one() / (n2 + T::of(L2_EPS)).sqrt();
            for v in seg.iter_mut() {
                *v *= inv;
            }
            inv_norm.push(inv);
        }
        self.push(out, Op::HeadL2Norm { x, heads, inv_norm }, &[x])
    }

    /// Multiplies head segment `h` of every row by `temps[h]`.
    pub fn head_scale(&mut self, x: Var, temps: Var, heads: usize) -> Var {
        let tv = self.data(temps).to_vec();
        assert_eq!(tv.len(), heads, "one temperature per head");
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        let dh = d / heads;
        for row in out.data_mut().chunks_mut(d) {
            for (h, seg) in row.chunks_mut(dh).enumerate() {
                for v in seg.iter_mut() {
                    *v *= tv[h];
                }
            }
        }
        self.push(out, Op::HeadScale { x, temps, heads }, &[x, temps])
    }

    /// Multi-head attention batched over windows.
    ///
    /// `q` is `[W, Lq, D]`, `k`/`v` are `[W, Lk, D]`. `bias` (`[H, Lq, Lk]`)
    /// and `mask` (`[Lq, Lk]`, `true` = may attend) are shared by all
    /// windows. Scores are `scale · q·kᵀ + bias`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mask: Option<Rc<[bool]>>,
        heads: usize,
        scale: T,
    ) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        assert_eq!(qs.len(), 3, "attention expects [W, L, D]");
        assert_eq!(ks, self.shape(v), "k/v shapes");
        assert_eq!(qs[0], ks[0], "window counts");
        assert_eq!(qs[2], ks[2], "q/k width");
        let shape = AttnShape {
            windows: qs[0],
            lq: qs[1],
            lk: ks[1],
            width: qs[2],
            heads,
            mask,
        };
        let bias_data = bias.map(|b| {
            assert_eq!(
                self.shape(b),
                &[heads, shape.lq, shape.lk][..],
                "bias shape"
            );
            self.data(b)
        });
        let (out, probs) = attention_forward(
            &shape,
            self.data(q),
            self.data(k),
            self.data(v),
            bias_data,
            scale,
        )?;
        let out = Tensor::from_vec(&qs, out).expect("attention out");
        let mut parents = vec![q, k, v];
        parents.extend(bias);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                shape,
                scale,
                probs,
            },
            &parents,
        ))
    }

    /// `out[i] = x[idx[i]]` over flattened storage.
    pub fn gather(&mut self, x: Var, idx: Rc<[u32]>, shape: &[usize]) -> Var {
        let xd = self.data(x);
        let data: Vec<T> = idx.iter().map(|&i| xd[i as usize]).collect();
        let out = Tensor::from_vec(shape, data).expect("gather shape");
        self.push(out, Op::Gather { x, idx }, &[x])
    }

    /// Concatenates along `axis`; all parts must agree on every other axis.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank");
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat shape {:?} vs {:?}", s, first);
            }
            shape[axis] += s[axis];
        }
        let mut data = Vec::with_capacity(shape.iter().product());
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| self.value(p).numel() / outer)
            .collect();
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&shape, data).expect("concat");
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape).expect("reshape");
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = T::of(self.value(x).mean());
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mse shapes");
        let n = av.numel().max(1);
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| ((x - y) * (x - y)).as_f64())
            .sum::<f64>();
        self.push(Tensor::scalar(T::of(s / n as f64)), Op::Mse(a, b), &[a, b])
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        assert_eq!(self.value(x).numel(), geom.input_len(), "conv input size");
        assert_eq!(self.value(w).numel(), geom.weight_len(), "conv weight size");
        assert_eq!(self.value(b).numel(), geom.cout, "conv bias size");
        let out = conv3d_forward(&geom, self.data(x), self.data(w), self.data(b));
        let out = Tensor::from_vec(&geom.output_shape(), out).expect("conv out");
        self.push(out, Op::Conv3d { x, w, b, geom }, &[x, w, b])
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(ad) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (o, &x) in ga.iter_mut().zip(g) {
                    *o += x * *s;
                }
            }),
            Op::AddBcast { x, s, groups } => {
                acc(*x, &mut |gx| add_into(gx, g));
                let d = self.value(*s).last_dim();
                let per = g.len() / groups;
                acc(*s, &mut |gs| {
                    for (gi, chunk) in g.chunks(per).enumerate() {
                        let row = &mut gs[gi * d..(gi + 1) * d];
                        for gr in chunk.chunks(d) {
                            add_into(row, gr);
                        }
                    }
                });
            }
            Op::MulBcast { x, s, groups } => {
                let d = self.value(*s).last_dim();
                let per = g.len() / groups;
                let sd = self.data(*s);
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for (gi, (gc, oc)) in g.chunks(per).zip(gx.chunks_mut(per)).enumerate() {
                        let row = &sd[gi * d..(gi + 1) * d];
                        for (gr, orow) in gc.chunks(d).zip(oc.chunks_mut(d)) {
                            for j in 0..d {
                                orow[j] += gr[j] * row[j];
                            }
                        }
                    }
                });
                acc(*s, &mut |gs| {
                    for (gi, (gc, xc)) in g.chunks(per).zip(xd.chunks(per)).enumerate() {
                        let row = &mut gs[gi * d..(gi + 1) * d];
                        for (gr, xr) in gc.chunks(d).zip(xc.chunks(d)) {
                            for j in 0..d {
                                row[j] += gr[j] * xr[j];
                            }
                        }
                    }
                });
            }
            Op::Modulate {
                x,
                scale,
                shift,
                groups,
            } => {
                let d = self.value(*scale).last_dim();
                let per = g.len() / groups;
                let sd = self.data(*scale);
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for (gi, (gc, oc)) in g.chunks(per).zip(gx.chunks_mut(per)).enumerate() {
                        let row = &sd[gi * d..(gi + 1) * d];
                        for (gr, orow) in gc.chunks(d).zip(oc.chunks_mut(d)) {
                            for j in 0..d {
                                orow[j] += gr[j] * (T::one() + row[j]);
                            }
                        }
                    }
                });
                acc(*scale, &mut |gs| {
                    for (gi, (gc, xc)) in g.chunks(per).zip(xd.chunks(per)).enumerate() {
                        let row = &mut gs[gi * d..(gi + 1) * d];
                        for (gr, xr) in gc.chunks(d).zip(xc.chunks(d)) {
                            for j in 0..d {
                                row[j] += gr[j] * xr[j];
                            }
                        }
                    }
                });
                acc(*shift, &mut |gb| {
                    for (gi, gc) in g.chunks(per).enumerate() {
                        let row = &mut gb[gi * d..(gi + 1) * d];
                        for gr in gc.chunks(d) {
                            add_into(row, gr);
                        }
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (k, n) = (self.shape(*b)[0], self.shape(*b)[1]);
                let m = self.value(*a).numel() / k;
                let ad = self.data(*a);
                let bd = self.data(*b);
                acc(*a, &mut |ga| {
                    gemm(
                        T::one(),
                        g,
                        Mat::dense(0, m, n),
                        bd,
                        Mat::dense(0, k, n).t(),
                        T::one(),
                        ga,
                        Mat::dense(0, m, k),
                    );
                });
                acc(*b, &mut |gb| {
                    gemm(
                        T::one(),
                        ad,
                        Mat::dense(0, m, k).t(),
                        g,
                        Mat::dense(0, m, n),
                        T::one(),
                        gb,
                        Mat::dense(0, k, n),
                    );
                });
            }
            Op::Silu(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(ad) {
                        let s = T::one() / (T::one() + (-x).exp());
                        *o += gv * s * (T::one() + x * (T::one() - s));
                    }
                });
            }
            Op::Gelu(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(ad) {
                        *o += gv * gelu_grad(x);
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let inv_d = T::one() / T::of(d as f64);
                acc(*x, &mut |gx| {
                    for (((gr, yr), or), &r) in g
                        .chunks(d)
                        .zip(y.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .zip(rstd.iter())
                    {
                        let mg = gr.iter().copied().sum::<T>() * inv_d;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for j in 0..d {
                            or[j] += r * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::HeadL2Norm { x, heads, inv_norm } => {
                let y = node.value.data();
                let dh = node.value.last_dim() / heads;
                acc(*x, &mut |gx| {
                    for (((gs, ys), os), &inv) in g
                        .chunks(dh)
                        .zip(y.chunks(dh))
                        .zip(gx.chunks_mut(dh))
                        .zip(inv_norm.iter())
                    {
                        let dot = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..dh {
                            os[j] += (gs[j] - ys[j] * dot) * inv;
                        }
                    }
                });
            }
            Op::HeadScale { x, temps, heads } => {
                let tv = self.data(*temps);
                let xd = self.data(*x);
                let d = node.value.last_dim();
                let dh = d / heads;
                acc(*x, &mut |gx| {
                    for (gr, or) in g.chunks(d).zip(gx.chunks_mut(d)) {
                        for h in 0..*heads {
                            for j in h * dh..(h + 1) * dh {
                                or[j] += gr[j] * tv[h];
                            }
                        }
                    }
                });
                acc(*temps, &mut |gt| {
                    for (gr, xr) in g.chunks(d).zip(xd.chunks(d)) {
                        for h in 0..*heads {
                            for j in h * dh..(h + 1) * dh {
                                gt[h] += gr[j] * xr[j];
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                shape,
                scale,
                probs,
            } => {
                let mut gq = self
                    .wants(*q)
                    .then(|| vec![T::zero(); self.value(*q).numel()]);
                let mut gk = self
                    .wants(*k)
                    .then(|| vec![T::zero(); self.value(*k).numel()]);
                let mut gv = self
                    .wants(*v)
                    .then(|| vec![T::zero(); self.value(*v).numel()]);
                let mut gb = bias
                    .filter(|b| self.wants(*b))
                    .map(|b| vec![T::zero(); self.value(b).numel()]);
                attention_backward(
                    shape,
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    *scale,
                    g,
                    gq.as_deref_mut(),
                    gk.as_deref_mut(),
                    gv.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (var, part) in [(Some(*q), gq), (Some(*k), gk), (Some(*v), gv), (*bias, gb)] {
                    if let (Some(var), Some(part)) = (var, part) {
                        acc(var, &mut |slot| add_into(slot, &part));
                    }
                }
            }
            Op::Gather { x, idx } => acc(*x, &mut |gx| {
                for (&i, &gv) in idx.iter().zip(g) {
                    gx[i as usize] += gv;
                }
            }),
            Op::Concat { parts, outer } => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| self.value(p).numel() / outer)
                    .collect();
                let total: usize = widths.iter().sum();
                let mut start = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    acc(p, &mut |gp| {
                        for o in 0..*outer {
                            add_into(
                                &mut gp[o * w..(o + 1) * w],
                                &g[o * total + start..o * total + start + w],
                            );
                        }
                    });
                    start += w;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Mean(x) => {
                let n = T::of(self.value(*x).numel() as f64);
                let gv = g[0] / n;
                acc(*x, &mut |gx| {
                    for o in gx.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Mse(a, b) => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                let c = g[0] * T::of(2.0 / ad.len().max(1) as f64);
                acc(*a, &mut |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(ad).zip(bd) {
                        *o += c * (x - y);
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(ad).zip(bd) {
                        *o -= c * (x - y);
                    }
                });
            }
            Op::Conv3d { x, w, b, geom } => {
                let mut gx = self.wants(*x).then(|| vec![T::zero(); geom.input_len()]);
                let mut gw = self.wants(*w).then(|| vec![T::zero(); geom.weight_len()]);
                let mut gb = self.wants(*b).then(|| vec![T::zero(); geom.cout]);
                conv3d_backward(
                    geom,
                    self.data(*x),
                    self.data(*w),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (var, part) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(part) = part {
                        acc(var, &mut |slot| add_into(slot, &part));
                    }
                }
            }
        }
    }

    /// Parameter gradients indexed by [`ParamId`]; `None` for parameters
    /// that were never touched.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.param_vars
            .iter()
            .map(|pv| {
                pv.and_then(|v| {
                    grads
                        .get(v)
                        .map(|g| Tensor::from_vec(self.shape(v), g.to_vec()).expect("grad shape"))
                })
            })
            .collect()
    }
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    let th = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0 * 0.044715) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(build: &dyn Fn(&mut Tape<f64>, Var) -> Var, x: &[f64], shape: &[usize]) {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_vec(shape, x.to_vec()).unwrap());
        let out = build(&mut tape, v);
        let grads = tape.backward(out);
        let analytic = grads.get(v).unwrap().to_vec();
        let f = |xs: &[f64]| {
            let mut t = Tape::new();
            let v = t.leaf(Tensor::from_vec(shape, xs.to_vec()).unwrap());
            let o = build(&mut t, v);
            t.value(o).data()[0]
        };
        let num = numeric_grad(&f, x);
        for (a, n) in analytic.iter().zip(&num) {
            assert!(
                (a - n).abs() < 1e-6 * (1.0 + n.abs()),
                "analytic {a} vs numeric {n}"
            );
        }
    }

    fn sample(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| ((i * 7919 % 23) as f64 / 11.0) - 1.0)
            .collect()
    }

    #[test]
    fn elementwise_grads() {
        let x = sample(12);
        check(
            &|t, v| {
                let s = t.silu(v);
                t.mean(s)
            },
            &x,
            &[3, 4],
        );
        check(
            &|t, v| {
                let s = t.gelu(v);
                let m = t.mul(s, v);
                t.mean(m)
            },
            &x,
            &[3, 4],
        );
        check(
            &|t, v| {
                let l = t.layer_norm(v);
                let m = t.mul(l, v);
                t.mean(m)
            },
            &x,
            &[3, 4],
        );
        check(
            &|t, v| {
                let l = t.head_l2_norm(v, 2);
                let m = t.mul(l, v);
                t.mean(m)
            },
            &x,
            &[3, 4],
        );
    }

    #[test]
    fn broadcast_and_matmul_grads() {
        let x = sample(12);
        check(
            &|t, v| {
                let s = t
                    .constant(Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap());
                let r = t.reshape(v, &[2, 2, 3]);
                let m = t.mul_bcast(r, s);
                let a = t.add_bcast(m, s);
                let md = t.modulate(a, s, s);
                let w = t.reshape(v, &[3, 4]);
                let mm = t.matmul(md, w);
                let sq = t.mul(mm, mm);
                t.mean(sq)
            },
            &x,
            &[12],
        );
    }

    #[test]
    fn gather_concat_grads() {
        let x = sample(6);
        check(
            &|t, v| {
                let idx: Rc<[u32]> = Rc::from(vec![5u32, 0, 0, 3, 2, 1]);
                let g = t.gather(v, idx, &[2, 3]);
                let c = t.concat(&[g, g], 1);
                let sq = t.mul(c, c);
                let w = t.constant(Tensor::from_f64(&[2, 6], &sample(12)).unwrap());
                let p = t.mul(sq, w);
                t.mean(p)
            },
            &x,
            &[6],
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.leaf(Tensor::full(&[3], 2.0));
        let d = tape.detach(a);
        let s = tape.mul(a, d);
        let l = tape.mean(s);
        let g = tape.backward(l);
        assert!(g.get(d).is_none());
        for &v in g.get(a).unwrap() {
            assert!((v - 2.0 / 3.0).abs() < 1e-6);
        }
    }
}
