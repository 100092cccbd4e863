//! Trainable layers with explicit forward and backward passes.
//!
//! Layers hold only [`ParamId`]s; values live in a [`ParamSet`] and gradients
//! accumulate into a detached [`Grads`]. Forward passes return whatever cache
//! their backward pass needs.

use super::array::NumArray;
use super::ops::{self, dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, relu, sigmoid};
use super::param::{orthogonal_blocks, uniform, Grads, ParamId, ParamSet};
use super::SeededRng;
use crate::error::{Error, Result};

/// Half-width of the uniform initializer for non-recurrent weights.
pub const INIT_SCALE: f64 = 0.05;

/// Half-width for embedding tables, large enough that symbols are told
/// apart by the encoder from the first step.
pub const EMBED_INIT_SCALE: f64 = 0.5;

/// `y = x·w + b` for `x: [n, din]`, `w: [din, dout]`, `b: [dout]`.
pub fn affine(x: &NumArray, w: &NumArray, b: &NumArray) -> Result<NumArray> {
    if w.rank() != 2 || x.rank() != 2 || b.rank() != 1 {
        return Err(Error::shape("affine", "expected x:[n,din], w:[din,dout], b:[dout]"));
    }
    let (n, din) = (x.rows(), x.cols());
    let dout = w.shape()[1];
    if w.shape()[0] != din || b.len() != dout {
        return Err(Error::shape(
            "affine",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut y = NumArray::zeros(&[n, dout]);
    for i in 0..n {
        y.row_mut(i).copy_from_slice(b.data());
    }
    gemm_acc(x.data(), w.data(), y.data_mut(), n, din, dout);
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut SeededRng) -> Result<Self> {
        let w = ps.add(format!("{name}.w"), uniform(&[din, dout], INIT_SCALE, rng))?;
        let b = ps.add(format!("{name}.b"), NumArray::zeros(&[dout]))?;
        Ok(Linear { w, b, din, dout })
    }

    pub fn forward(&self, ps: &ParamSet, x: &NumArray) -> Result<NumArray> {
        affine(x, ps.value(self.w), ps.value(self.b))
    }

    pub fn backward(&self, ps: &ParamSet, x: &NumArray, dy: &NumArray, g: &mut Grads) -> NumArray {
        let n = x.rows();
        gemm_tn_acc(x.data(), dy.data(), g.get_mut(self.w), n, self.din, self.dout);
        let gb = g.get_mut(self.b);
        for i in 0..n {
            ops::axpy(1.0, dy.row(i), gb);
        }
        let mut dx = NumArray::zeros(&[n, self.din]);
        gemm_nt_acc(
            dy.data(),
            ps.value(self.w).data(),
            dx.data_mut(),
            n,
            self.dout,
            self.din,
        );
        dx
    }

    pub fn forward_vec(&self, ps: &ParamSet, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.din);
        let mut y = ps.value(self.b).data().to_vec();
        ops::vecmat_acc(x, ps.value(self.w).data(), &mut y);
        y
    }

    pub fn backward_vec(&self, ps: &ParamSet, x: &[f64], dy: &[f64], g: &mut Grads) -> Vec<f64> {
        ops::outer_acc(x, dy, g.get_mut(self.w));
        ops::axpy(1.0, dy, g.get_mut(self.b));
        let mut dx = vec![0.0; self.din];
        ops::matvec_acc(ps.value(self.w).data(), dy, &mut dx);
        dx
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(ps: &mut ParamSet, name: &str, vocab: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        let table = ps.add(format!("{name}.table"), uniform(&[vocab, dim], EMBED_INIT_SCALE, rng))?;
        Ok(Embedding { table, vocab, dim })
    }

    pub fn forward(&self, ps: &ParamSet, tokens: &[usize]) -> Result<NumArray> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence("embedding lookup"));
        }
        let table = ps.value(self.table);
        let mut out = NumArray::zeros(&[tokens.len(), self.dim]);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= self.vocab {
                return Err(Error::UnknownSymbol {
                    id: tok,
                    vocab: self.vocab,
                });
            }
            out.row_mut(i).copy_from_slice(table.row(tok));
        }
        Ok(out)
    }

    pub fn backward(&self, tokens: &[usize], dy: &NumArray, g: &mut Grads) {
        let gt = g.get_mut(self.table);
        for (i, &tok) in tokens.iter().enumerate() {
            ops::axpy(1.0, dy.row(i), &mut gt[tok * self.dim..(tok + 1) * self.dim]);
        }
    }
}

/// Gated recurrent unit with the reset gate applied to the previous state
/// before the candidate transform:
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// ñ  = tanh(x·Wn + (r ⊙ h)·Un + bn)
/// h' = (1 − z) ⊙ h + z ⊙ ñ
/// ```
///
/// `wx` is `[din, 3h]`, `wh` is `[h, 3h]` and `b` is `[3h]`, gate blocks in
/// the order z, r, n.
#[derive(Clone, Debug)]
pub struct Gru {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct GruStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    pub h: Vec<f64>,
}

impl Gru {
    pub fn new(ps: &mut ParamSet, name: &str, din: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        let wx = ps.add(format!("{name}.wx"), uniform(&[din, 3 * hidden], INIT_SCALE, rng))?;
        let wh = ps.add(format!("{name}.wh"), orthogonal_blocks(hidden, 3, rng))?;
        let b = ps.add(format!("{name}.b"), NumArray::zeros(&[3 * hidden]))?;
        Ok(Gru { wx, wh, b, din, hidden })
    }

    pub fn step(&self, ps: &ParamSet, x: &[f64], h_prev: &[f64]) -> GruStep {
        let hd = self.hidden;
        debug_assert_eq!(x.len(), self.din);
        debug_assert_eq!(h_prev.len(), hd);
        let wh = ps.value(self.wh).data();

        let mut a = ps.value(self.b).data().to_vec();
        ops::vecmat_acc(x, ps.value(self.wx).data(), &mut a);

        // Recurrent contribution to the z and r blocks.
        for (p, &hp) in h_prev.iter().enumerate() {
            if hp == 0.0 {
                continue;
            }
            let row = &wh[p * 3 * hd..p * 3 * hd + 2 * hd];
            ops::axpy(hp, row, &mut a[..2 * hd]);
        }
        let z: Vec<f64> = a[..hd].iter().map(|&v| sigmoid(v)).collect();
        let r: Vec<f64> = a[hd..2 * hd].iter().map(|&v| sigmoid(v)).collect();

        let mut an = a[2 * hd..].to_vec();
        for p in 0..hd {
            let rh = r[p] * h_prev[p];
            if rh == 0.0 {
                continue;
            }
            let row = &wh[p * 3 * hd + 2 * hd..(p + 1) * 3 * hd];
            ops::axpy(rh, row, &mut an);
        }
        let n: Vec<f64> = an.iter().map(|v| v.tanh()).collect();
        let h = (0..hd).map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * n[i]).collect();
        GruStep {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            n,
            h,
        }
    }

    /// Returns `(dx, dh_prev)`.
    pub fn step_backward(&self, ps: &ParamSet, c: &GruStep, dh: &[f64], g: &mut Grads) -> (Vec<f64>, Vec<f64>) {
        let hd = self.hidden;
        let wh = ps.value(self.wh).data();
        let mut dh_prev: Vec<f64> = (0..hd).map(|i| dh[i] * (1.0 - c.z[i])).collect();
        let mut da = vec![0.0; 3 * hd];
        for i in 0..hd {
            let dz = dh[i] * (c.n[i] - c.h_prev[i]);
            da[i] = dz * c.z[i] * (1.0 - c.z[i]);
            let dn = dh[i] * c.z[i];
            da[2 * hd + i] = dn * (1.0 - c.n[i] * c.n[i]);
        }

        // Candidate block: rh = r ⊙ h_prev feeds Un.
        {
            let gwh = g.get_mut(self.wh);
            let (da_zr, da_n) = da.split_at_mut(2 * hd);
            let da_n = &*da_n;
            for p in 0..hd {
                let rh = c.r[p] * c.h_prev[p];
                let row = &wh[p * 3 * hd + 2 * hd..(p + 1) * 3 * hd];
                let drh = dot(row, da_n);
                let dr = drh * c.h_prev[p];
                dh_prev[p] += drh * c.r[p];
                da_zr[hd + p] = dr * c.r[p] * (1.0 - c.r[p]);
                if rh != 0.0 {
                    ops::axpy(rh, da_n, &mut gwh[p * 3 * hd + 2 * hd..(p + 1) * 3 * hd]);
                }
            }
        }
        {
            let gwh = g.get_mut(self.wh);
            let da_zr = &da[..2 * hd];
            for p in 0..hd {
                let hp = c.h_prev[p];
                let row = &wh[p * 3 * hd..p * 3 * hd + 2 * hd];
                dh_prev[p] += dot(row, da_zr);
                if hp != 0.0 {
                    ops::axpy(hp, da_zr, &mut gwh[p * 3 * hd..p * 3 * hd + 2 * hd]);
                }
            }
        }
        ops::outer_acc(&c.x, &da, g.get_mut(self.wx));
        ops::axpy(1.0, &da, g.get_mut(self.b));
        let mut dx = vec![0.0; self.din];
        ops::matvec_acc(ps.value(self.wx).data(), &da, &mut dx);
        (dx, dh_prev)
    }
}

/// Bidirectional GRU over a `[T, din]` sequence; both directions start from
/// a zero state.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

#[derive(Clone, Debug)]
pub struct BiGruCache {
    fwd: Vec<GruStep>,
    /// `bwd[i]` processed time index `T - 1 - i`.
    bwd: Vec<GruStep>,
}

impl BiGru {
    pub fn new(ps: &mut ParamSet, name: &str, din: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(BiGru {
            fwd: Gru::new(ps, &format!("{name}.fwd"), din, hidden, rng)?,
            bwd: Gru::new(ps, &format!("{name}.bwd"), din, hidden, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    /// Returns per-step states `[T, 2h]`, the final state
    /// `[last forward ; last backward]` and the cache.
    pub fn forward(&self, ps: &ParamSet, x: &NumArray) -> Result<(NumArray, NumArray, BiGruCache)> {
        if x.rank() != 2 || x.rows() == 0 {
            return Err(Error::EmptySequence("bigru_sequence"));
        }
        if x.cols() != self.fwd.din {
            return Err(Error::shape(
                "bigru_sequence",
                format!("input width {} != {}", x.cols(), self.fwd.din),
            ));
        }
        let t_len = x.rows();
        let hd = self.hidden();
        let mut states = NumArray::zeros(&[t_len, 2 * hd]);
        let mut fwd = Vec::with_capacity(t_len);
        let mut h = vec![0.0; hd];
        for t in 0..t_len {
            let s = self.fwd.step(ps, x.row(t), &h);
            h.clone_from(&s.h);
            states.row_mut(t)[..hd].copy_from_slice(&s.h);
            fwd.push(s);
        }
        let mut bwd = Vec::with_capacity(t_len);
        let mut h = vec![0.0; hd];
        for t in (0..t_len).rev() {
            let s = self.bwd.step(ps, x.row(t), &h);
            h.clone_from(&s.h);
            states.row_mut(t)[hd..].copy_from_slice(&s.h);
            bwd.push(s);
        }
        let mut fin = fwd[t_len - 1].h.clone();
        fin.extend_from_slice(&bwd[t_len - 1].h);
        Ok((states, NumArray::vector(&fin), BiGruCache { fwd, bwd }))
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &BiGruCache,
        dstates: &NumArray,
        dfinal: &[f64],
        g: &mut Grads,
    ) -> NumArray {
        let t_len = cache.fwd.len();
        let hd = self.hidden();
        let mut dx = NumArray::zeros(&[t_len, self.fwd.din]);

        let mut dh = dfinal[..hd].to_vec();
        for t in (0..t_len).rev() {
            ops::axpy(1.0, &dstates.row(t)[..hd], &mut dh);
            let (dxt, dprev) = self.fwd.step_backward(ps, &cache.fwd[t], &dh, g);
            ops::axpy(1.0, &dxt, dx.row_mut(t));
            dh = dprev;
        }

        let mut dh = dfinal[hd..].to_vec();
        for i in (0..t_len).rev() {
            let t = t_len - 1 - i;
            ops::axpy(1.0, &dstates.row(t)[hd..], &mut dh);
            let (dxt, dprev) = self.bwd.step_backward(ps, &cache.bwd[i], &dh, g);
            ops::axpy(1.0, &dxt, dx.row_mut(t));
            dh = dprev;
        }
        dx
    }
}

/// 1-D convolution over time with "same" padding: a width-`k` kernel looks at
/// `(k-1)/2` frames to the left and `k/2` to the right, zero padded.
/// `w` is `[k, din, dout]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub width: usize,
    pub din: usize,
    pub dout: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        width: usize,
        din: usize,
        dout: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidArgument("convolution width must be >= 1".into()));
        }
        let w = ps.add(format!("{name}.w"), uniform(&[width, din, dout], INIT_SCALE, rng))?;
        let b = ps.add(format!("{name}.b"), NumArray::zeros(&[dout]))?;
        Ok(Conv1d { w, b, width, din, dout })
    }

    fn pad_left(&self) -> usize {
        (self.width - 1) / 2
    }

    /// Valid `(tap, out_start, in_start, len)` windows for a length-`t` input.
    fn windows(&self, t_len: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let pl = self.pad_left() as isize;
        (0..self.width).filter_map(move |i| {
            let shift = i as isize - pl;
            let out_start = (-shift).max(0) as usize;
            let out_end = (t_len as isize - shift).min(t_len as isize);
            if out_end <= out_start as isize {
                return None;
            }
            let in_start = (out_start as isize + shift) as usize;
            Some((i, out_start, in_start, out_end as usize - out_start))
        })
    }

    pub fn forward(&self, ps: &ParamSet, x: &NumArray) -> Result<NumArray> {
        if x.rank() != 2 || x.cols() != self.din {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?}, expected [T, {}]", x.shape(), self.din),
            ));
        }
        let t_len = x.rows();
        let w = ps.value(self.w).data();
        let mut y = NumArray::zeros(&[t_len, self.dout]);
        for t in 0..t_len {
            y.row_mut(t).copy_from_slice(ps.value(self.b).data());
        }
        let tap = self.din * self.dout;
        for (i, out_start, in_start, len) in self.windows(t_len) {
            gemm_acc(
                &x.data()[in_start * self.din..(in_start + len) * self.din],
                &w[i * tap..(i + 1) * tap],
                &mut y.data_mut()[out_start * self.dout..(out_start + len) * self.dout],
                len,
                self.din,
                self.dout,
            );
        }
        Ok(y)
    }

    pub fn backward(&self, ps: &ParamSet, x: &NumArray, dy: &NumArray, g: &mut Grads) -> NumArray {
        let t_len = x.rows();
        let tap = self.din * self.dout;
        let w = ps.value(self.w).data();
        let mut dx = NumArray::zeros(&[t_len, self.din]);
        {
            let gb = g.get_mut(self.b);
            for t in 0..t_len {
                ops::axpy(1.0, dy.row(t), gb);
            }
        }
        for (i, out_start, in_start, len) in self.windows(t_len) {
            let xs = &x.data()[in_start * self.din..(in_start + len) * self.din];
            let dys = &dy.data()[out_start * self.dout..(out_start + len) * self.dout];
            gemm_tn_acc(
                xs,
                dys,
                &mut g.get_mut(self.w)[i * tap..(i + 1) * tap],
                len,
                self.din,
                self.dout,
            );
            gemm_nt_acc(
                dys,
                &w[i * tap..(i + 1) * tap],
                &mut dx.data_mut()[in_start * self.din..(in_start + len) * self.din],
                len,
                self.dout,
                self.din,
            );
        }
        dx
    }
}

/// Bank of ReLU convolutions of widths `1..=K`, concatenated on channels.
#[derive(Clone, Debug)]
pub struct ConvBank {
    pub convs: Vec<Conv1d>,
    pub channels: usize,
}

impl ConvBank {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        k: usize,
        din: usize,
        channels: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if k < 1 {
            return Err(Error::InvalidArgument("conv bank needs K >= 1".into()));
        }
        let convs = (1..=k)
            .map(|width| Conv1d::new(ps, &format!("{name}.k{width}"), width, din, channels, rng))
            .collect::<Result<_>>()?;
        Ok(ConvBank { convs, channels })
    }

    pub fn out_dim(&self) -> usize {
        self.convs.len() * self.channels
    }

    pub fn forward(&self, ps: &ParamSet, x: &NumArray) -> Result<NumArray> {
        let t_len = x.rows();
        let c = self.channels;
        let od = self.out_dim();
        let mut out = NumArray::zeros(&[t_len, od]);
        for (j, conv) in self.convs.iter().enumerate() {
            let y = conv.forward(ps, x)?;
            for t in 0..t_len {
                let dst = &mut out.row_mut(t)[j * c..(j + 1) * c];
                for (d, s) in dst.iter_mut().zip(y.row(t)) {
                    *d = relu(*s);
                }
            }
        }
        Ok(out)
    }

    /// `out` is the forward result; its zeros mark inactive ReLUs.
    pub fn backward(&self, ps: &ParamSet, x: &NumArray, out: &NumArray, dy: &NumArray, g: &mut Grads) -> NumArray {
        let t_len = x.rows();
        let c = self.channels;
        let mut dx = NumArray::zeros(&[t_len, x.cols()]);
        for (j, conv) in self.convs.iter().enumerate() {
            let mut dpre = NumArray::zeros(&[t_len, c]);
            for t in 0..t_len {
                let o = &out.row(t)[j * c..(j + 1) * c];
                let d = &dy.row(t)[j * c..(j + 1) * c];
                for ((dp, ov), dv) in dpre.row_mut(t).iter_mut().zip(o).zip(d) {
                    *dp = if *ov > 0.0 { *dv } else { 0.0 };
                }
            }
            dx.add_assign(&conv.backward(ps, x, &dpre, g));
        }
        dx
    }
}

/// Width-2, stride-1 max pooling that keeps the sequence length:
/// `y[t] = max(x[t], x[t+1])` with the last frame paired with itself.
/// Ties go to the earlier frame. Returns the source frame of every output.
pub fn maxpool1d_same(x: &NumArray) -> Result<(NumArray, Vec<usize>)> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::EmptySequence("maxpool1d_same"));
    }
    let (t_len, d) = (x.rows(), x.cols());
    let mut y = NumArray::zeros(&[t_len, d]);
    let mut src = vec![0; t_len * d];
    for t in 0..t_len {
        let nxt = (t + 1).min(t_len - 1);
        for c in 0..d {
            let (a, b) = (x.get2(t, c), x.get2(nxt, c));
            let (v, s) = if b > a { (b, nxt) } else { (a, t) };
            y.data_mut()[t * d + c] = v;
            src[t * d + c] = s;
        }
    }
    Ok((y, src))
}

pub fn maxpool1d_same_backward(src: &[usize], dy: &NumArray) -> NumArray {
    let (t_len, d) = (dy.rows(), dy.cols());
    let mut dx = NumArray::zeros(&[t_len, d]);
    for t in 0..t_len {
        for c in 0..d {
            dx.data_mut()[src[t * d + c] * d + c] += dy.get2(t, c);
        }
    }
    dx
}

/// `y = T(x) ⊙ H(x) + (1 − T(x)) ⊙ x` with `H = relu(affine)` and
/// `T = sigmoid(affine)`.
#[derive(Clone, Debug)]
pub struct Highway {
    pub transform: Linear,
    pub gate: Linear,
}

#[derive(Clone, Debug)]
pub struct HighwayCache {
    h: NumArray,
    t: NumArray,
}

impl Highway {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Highway {
            transform: Linear::new(ps, &format!("{name}.h"), dim, dim, rng)?,
            gate: Linear::new(ps, &format!("{name}.t"), dim, dim, rng)?,
        })
    }

    pub fn forward(&self, ps: &ParamSet, x: &NumArray) -> Result<(NumArray, HighwayCache)> {
        if x.rank() != 2 || x.cols() != self.transform.din {
            return Err(Error::shape(
                "highway_layer",
                format!("input {:?}, expected width {}", x.shape(), self.transform.din),
            ));
        }
        let mut h = self.transform.forward(ps, x)?;
        h.data_mut().iter_mut().for_each(|v| *v = relu(*v));
        let mut t = self.gate.forward(ps, x)?;
        t.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut y = x.clone();
        for ((yv, hv), tv) in y.data_mut().iter_mut().zip(h.data()).zip(t.data()) {
            *yv = tv * hv + (1.0 - tv) * *yv;
        }
        Ok((y, HighwayCache { h, t }))
    }

    pub fn backward(&self, ps: &ParamSet, x: &NumArray, c: &HighwayCache, dy: &NumArray, g: &mut Grads) -> NumArray {
        let n = x.len();
        let mut dx = NumArray::zeros(x.shape());
        let mut dh_pre = NumArray::zeros(x.shape());
        let mut dt_pre = NumArray::zeros(x.shape());
        for i in 0..n {
            let (xv, hv, tv, d) = (x.data()[i], c.h.data()[i], c.t.data()[i], dy.data()[i]);
            dx.data_mut()[i] = d * (1.0 - tv);
            dh_pre.data_mut()[i] = if hv > 0.0 { d * tv } else { 0.0 };
            dt_pre.data_mut()[i] = d * (hv - xv) * tv * (1.0 - tv);
        }
        dx.add_assign(&self.transform.backward(ps, x, &dh_pre, g));
        dx.add_assign(&self.gate.backward(ps, x, &dt_pre, g));
        dx
    }
}
