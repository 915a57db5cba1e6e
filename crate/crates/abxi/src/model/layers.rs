//! Layer primitives with explicit forward caches and hand-written backward
//! passes. All activations are `T x d` row-major matrices in f64; gradients
//! are accumulated into parameter structs of the same shape as the layers.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-8;

/// Execution context for one forward pass: dropout is active only in
/// training mode, and then draws from the provided stream.
pub struct RunCtx<'a> {
    pub training: bool,
    pub p_drop: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> RunCtx<'a> {
    pub fn eval() -> RunCtx<'static> {
        RunCtx {
            training: false,
            p_drop: 0.0,
            rng: None,
        }
    }

    pub fn train(p_drop: f64, rng: &'a mut ChaCha8Rng) -> RunCtx<'a> {
        RunCtx {
            training: true,
            p_drop,
            rng: Some(rng),
        }
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-p) so eval needs
    /// no rescaling. Returns the output and the mask used (identity when
    /// dropout is inactive).
    pub fn dropout(&mut self, x: &Array2<f64>) -> (Array2<f64>, DropMask) {
        if !self.training || self.p_drop == 0.0 {
            return (x.clone(), DropMask(None));
        }
        let p = self.p_drop;
        let scale = 1.0 / (1.0 - p);
        let rng = self
            .rng
            .as_deref_mut()
            .expect("training-mode dropout needs an rng stream");
        let mask = Array2::from_shape_fn(x.dim(), |_| {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                scale
            }
        });
        ((x * &mask), DropMask(Some(mask)))
    }
}

/// Multiplicative dropout mask; `None` means identity.
#[derive(Debug, Clone)]
pub struct DropMask(pub Option<Array2<f64>>);

impl DropMask {
    pub fn apply(&self, dy: &Array2<f64>) -> Array2<f64> {
        match &self.0 {
            Some(mask) => dy * mask,
            None => dy.clone(),
        }
    }
}

pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LnParams {
    pub fn new(dim: usize) -> Self {
        LnParams {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LnParams {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer normalization: y = gamma * (x - mean) / sqrt(var + eps) + beta.
pub fn ln_forward(p: &LnParams, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * is);
        *s = is;
    }
    let y = &xhat * &p.gamma + &p.beta;
    (y, LnCache { xhat, inv_std })
}

pub fn ln_backward(
    p: &LnParams,
    cache: &LnCache,
    dy: &Array2<f64>,
    grads: &mut LnParams,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    grads.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grads.beta += &dy.sum_axis(Axis(0));
    let dyh = dy * &p.gamma;
    let mean_dyh = dyh.mean_axis(Axis(1)).expect("nonempty rows");
    let mean_dyh_xhat = (&dyh * &cache.xhat).mean_axis(Axis(1)).expect("nonempty");
    let mut dx = dyh;
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let m1 = mean_dyh[i];
        let m2 = mean_dyh_xhat[i];
        let is = cache.inv_std[i];
        for (v, xh) in row.iter_mut().zip(cache.xhat.row(i)) {
            *v = is * (*v - m1 - xh * m2);
        }
    }
    let _ = d;
    dx
}

// ---------------------------------------------------------------------------
// Swish activation (x * sigmoid(beta x)), shared by the FFN and projectors
// ---------------------------------------------------------------------------

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: f64, beta: f64) -> f64 {
    x * sigmoid(beta * x)
}

/// d/dx swish(x) = sig(bx) * (1 + bx * (1 - sig(bx))).
pub fn swish_grad(x: f64, beta: f64) -> f64 {
    let s = sigmoid(beta * x);
    s * (1.0 + beta * x * (1.0 - s))
}

// ---------------------------------------------------------------------------
// Low-rank adapter: y = (x . down^T) . up^T
// ---------------------------------------------------------------------------

/// Low-rank additive adapter. `down` is r x d, `up` is d x r; `up` starts at
/// zero so a fresh unit is an exact no-op.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams {
    pub down: Array2<f64>,
    pub up: Array2<f64>,
}

impl LoraParams {
    pub fn init(rank: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        LoraParams {
            down: gaussian_matrix(rank, dim, 0.02, rng),
            up: Array2::zeros((dim, rank)),
        }
    }

    pub fn zeros(rank: usize, dim: usize) -> Self {
        LoraParams {
            down: Array2::zeros((rank, dim)),
            up: Array2::zeros((dim, rank)),
        }
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct LoraCache {
    pub x: Array2<f64>,
    pub mid: Array2<f64>,
}

pub fn lora_forward(p: &LoraParams, x: &Array2<f64>) -> Result<(Array2<f64>, LoraCache)> {
    if x.ncols() != p.down.ncols() {
        return Err(Error::Shape(format!(
            "low-rank adapter expects width {}, got {}",
            p.down.ncols(),
            x.ncols()
        )));
    }
    let mid = x.dot(&p.down.t());
    let y = mid.dot(&p.up.t());
    Ok((
        y,
        LoraCache {
            x: x.clone(),
            mid,
        },
    ))
}

pub fn lora_backward(
    p: &LoraParams,
    cache: &LoraCache,
    dy: &Array2<f64>,
    grads: &mut LoraParams,
) -> Array2<f64> {
    grads.up += &dy.t().dot(&cache.mid);
    let dmid = dy.dot(&p.up);
    grads.down += &dmid.t().dot(&cache.x);
    dmid.dot(&p.down)
}

// ---------------------------------------------------------------------------
// Gated projector: y = Drop((swish(x W1) (*) x W2) W3)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub w3: Array2<f64>,
}

impl ProjectorParams {
    pub fn init(dim: usize, inner: usize, rng: &mut ChaCha8Rng) -> Self {
        ProjectorParams {
            w1: gaussian_matrix(dim, inner, 0.02, rng),
            w2: gaussian_matrix(dim, inner, 0.02, rng),
            w3: gaussian_matrix(inner, dim, 0.02, rng),
        }
    }

    pub fn zeros(dim: usize, inner: usize) -> Self {
        ProjectorParams {
            w1: Array2::zeros((dim, inner)),
            w2: Array2::zeros((dim, inner)),
            w3: Array2::zeros((inner, dim)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProjCache {
    pub x: Array2<f64>,
    pub pre: Array2<f64>,
    pub gate: Array2<f64>,
    pub act: Array2<f64>,
    pub inner_mask: DropMask,
}

/// `inner_drop` controls the projector's own trailing dropout; the branch
/// dropout written around projector calls is applied by the caller.
pub fn proj_forward(
    p: &ProjectorParams,
    x: &Array2<f64>,
    beta: f64,
    ctx: &mut RunCtx,
    inner_drop: bool,
) -> (Array2<f64>, ProjCache) {
    let pre = x.dot(&p.w1);
    let gate = x.dot(&p.w2);
    let act = pre.mapv(|v| swish(v, beta));
    let y0 = (&act * &gate).dot(&p.w3);
    let (y, inner_mask) = if inner_drop {
        ctx.dropout(&y0)
    } else {
        (y0, DropMask(None))
    };
    (
        y,
        ProjCache {
            x: x.clone(),
            pre,
            gate,
            act,
            inner_mask,
        },
    )
}

pub fn proj_backward(
    p: &ProjectorParams,
    beta: f64,
    cache: &ProjCache,
    dy: &Array2<f64>,
    grads: &mut ProjectorParams,
) -> Array2<f64> {
    let dy0 = cache.inner_mask.apply(dy);
    let gated = &cache.act * &cache.gate;
    grads.w3 += &gated.t().dot(&dy0);
    let dgated = dy0.dot(&p.w3.t());
    let dact = &dgated * &cache.gate;
    let dgate = &dgated * &cache.act;
    let dpre = &dact * &cache.pre.mapv(|v| swish_grad(v, beta));
    grads.w1 += &cache.x.t().dot(&dpre);
    grads.w2 += &cache.x.t().dot(&dgate);
    dpre.dot(&p.w1.t()) + dgate.dot(&p.w2.t())
}

// ---------------------------------------------------------------------------
// Position-wise feed-forward: y = swish(x W1 + b1) W2 + b2
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl FfnParams {
    pub fn init(dim: usize, inner: usize, rng: &mut ChaCha8Rng) -> Self {
        FfnParams {
            w1: gaussian_matrix(dim, inner, 0.02, rng),
            b1: Array1::zeros(inner),
            w2: gaussian_matrix(inner, dim, 0.02, rng),
            b2: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize, inner: usize) -> Self {
        FfnParams {
            w1: Array2::zeros((dim, inner)),
            b1: Array1::zeros(inner),
            w2: Array2::zeros((inner, dim)),
            b2: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    pub x: Array2<f64>,
    pub pre: Array2<f64>,
    pub act: Array2<f64>,
}

pub fn ffn_forward(p: &FfnParams, x: &Array2<f64>, beta: f64) -> (Array2<f64>, FfnCache) {
    let pre = x.dot(&p.w1) + &p.b1;
    let act = pre.mapv(|v| swish(v, beta));
    let y = act.dot(&p.w2) + &p.b2;
    (
        y,
        FfnCache {
            x: x.clone(),
            pre,
            act,
        },
    )
}

pub fn ffn_backward(
    p: &FfnParams,
    beta: f64,
    cache: &FfnCache,
    dy: &Array2<f64>,
    grads: &mut FfnParams,
) -> Array2<f64> {
    grads.w2 += &cache.act.t().dot(dy);
    grads.b2 += &dy.sum_axis(Axis(0));
    let dact = dy.dot(&p.w2.t());
    let dpre = &dact * &cache.pre.mapv(|v| swish_grad(v, beta));
    grads.w1 += &cache.x.t().dot(&dpre);
    grads.b1 += &dpre.sum_axis(Axis(0));
    dpre.dot(&p.w1.t())
}

// ---------------------------------------------------------------------------
// Multi-head attention, causal with key-side PAD masking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

impl AttnParams {
    pub fn init(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AttnParams {
            w_q: gaussian_matrix(dim, dim, 0.02, rng),
            w_k: gaussian_matrix(dim, dim, 0.02, rng),
            w_v: gaussian_matrix(dim, dim, 0.02, rng),
            w_o: gaussian_matrix(dim, dim, 0.02, rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        AttnParams {
            w_q: Array2::zeros((dim, dim)),
            w_k: Array2::zeros((dim, dim)),
            w_v: Array2::zeros((dim, dim)),
            w_o: Array2::zeros((dim, dim)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    pub x: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmax probabilities, one T x T matrix per head; masked and
    /// empty-key rows are all zero.
    pub probs: Vec<Array2<f64>>,
    pub concat: Array2<f64>,
}

/// Causal multi-head attention. Query rows may be PAD (they still attend);
/// PAD keys are masked out everywhere. A query with no attendable key
/// yields a zero output row. `attn_macs` tallies multiply-accumulates
/// actually performed on valid (query, key) pairs.
pub fn mha_forward(
    p: &AttnParams,
    x: &Array2<f64>,
    key_valid: &[bool],
    n_heads: usize,
    attn_macs: &mut u64,
) -> (Array2<f64>, MhaCache) {
    let t = x.nrows();
    let d = x.ncols();
    debug_assert_eq!(key_valid.len(), t);
    debug_assert_eq!(d % n_heads, 0);
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = x.dot(&p.w_q);
    let k = x.dot(&p.w_k);
    let v = x.dot(&p.w_v);

    let mut concat = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols.clone()]);
        let vh = v.slice(ndarray::s![.., cols.clone()]);
        let mut ph = Array2::zeros((t, t));
        for i in 0..t {
            let valid: Vec<usize> = (0..=i).filter(|&j| key_valid[j]).collect();
            if valid.is_empty() {
                continue;
            }
            *attn_macs += (valid.len() * dh * 2) as u64;
            let mut scores: Vec<f64> = valid
                .iter()
                .map(|&j| qh.row(i).dot(&kh.row(j)) * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            for (&j, s) in valid.iter().zip(&scores) {
                ph[[i, j]] = s / denom;
            }
            for (c, out) in concat
                .slice_mut(ndarray::s![i..i + 1, cols.clone()])
                .iter_mut()
                .enumerate()
            {
                let mut acc = 0.0;
                for &j in &valid {
                    acc += ph[[i, j]] * vh[[j, c]];
                }
                *out = acc;
            }
        }
        probs.push(ph);
    }

    let y = concat.dot(&p.w_o);
    (
        y,
        MhaCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

pub fn mha_backward(
    p: &AttnParams,
    cache: &MhaCache,
    dy: &Array2<f64>,
    n_heads: usize,
    grads: &mut AttnParams,
) -> Array2<f64> {
    let t = dy.nrows();
    let d = dy.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    grads.w_o += &cache.concat.t().dot(dy);
    let dconcat = dy.dot(&p.w_o.t());

    let mut dq = Array2::zeros((t, d));
    let mut dk = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    for h in 0..n_heads {
        let cols = ndarray::s![.., h * dh..(h + 1) * dh];
        let ph = &cache.probs[h];
        let dout = dconcat.slice(cols);
        let vh = cache.v.slice(cols);
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);

        let dprobs = dout.dot(&vh.t());
        dv.slice_mut(cols).assign(&ph.t().dot(&dout));

        // Softmax backward per row; zero rows (masked) stay zero.
        let row_dot = (ph * &dprobs).sum_axis(Axis(1));
        let mut dscores = dprobs;
        for i in 0..t {
            let rd = row_dot[i];
            for j in 0..t {
                dscores[[i, j]] = ph[[i, j]] * (dscores[[i, j]] - rd);
            }
        }
        dq.slice_mut(cols).assign(&(dscores.dot(&kh) * scale));
        dk.slice_mut(cols).assign(&(dscores.t().dot(&qh) * scale));
    }

    grads.w_q += &cache.x.t().dot(&dq);
    grads.w_k += &cache.x.t().dot(&dk);
    grads.w_v += &cache.x.t().dot(&dv);
    dq.dot(&p.w_q.t()) + dk.dot(&p.w_k.t()) + dv.dot(&p.w_v.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::arr2;

    fn finite_diff<F: FnMut(&Array2<f64>) -> f64>(
        x: &Array2<f64>,
        mut f: F,
        eps: f64,
    ) -> Array2<f64> {
        let mut grad = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += eps;
            let fp = f(&xp);
            let mut xm = x.clone();
            xm[[r, c]] -= eps;
            let fm = f(&xm);
            grad[[r, c]] = (fp - fm) / (2.0 * eps);
        }
        grad
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs()) + 1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let p = LnParams::new(6);
        let mut rng = stream(1, "ln", 0, 0);
        let x = gaussian_matrix(4, 6, 1.0, &mut rng);
        let (_, cache) = ln_forward(&p, &x);
        for row in cache.xhat.rows() {
            let mean = row.sum() / 6.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layernorm_input_grads_match_finite_differences() {
        let mut rng = stream(2, "ln", 0, 0);
        let p = LnParams {
            gamma: Array1::from_vec(vec![1.1, 0.9, 1.3, 0.8]),
            beta: Array1::from_vec(vec![0.1, -0.2, 0.0, 0.3]),
        };
        let x = gaussian_matrix(3, 4, 1.0, &mut rng);
        let w = gaussian_matrix(3, 4, 1.0, &mut rng);
        let loss = |x: &Array2<f64>| {
            let (y, _) = ln_forward(&p, x);
            (&y * &w).sum()
        };
        let (_, cache) = ln_forward(&p, &x);
        let mut gp = LnParams::zeros(4);
        let dx = ln_backward(&p, &cache, &w, &mut gp);
        let fd = finite_diff(&x, loss, 1e-6);
        assert!(max_rel_err(&dx, &fd) < 1e-6, "err {}", max_rel_err(&dx, &fd));
    }

    #[test]
    fn lora_zero_init_is_identity_zero_and_hand_case_matches() {
        let mut rng = stream(3, "lora", 0, 0);
        let fresh = LoraParams::init(2, 4, &mut rng);
        let x = gaussian_matrix(3, 4, 1.0, &mut rng);
        let (y, _) = lora_forward(&fresh, &x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));

        // d=2, r=1: down=[[1,2]], up=[[1],[3]], x=(1,1) -> mid=3 -> y=(3,9).
        let p = LoraParams {
            down: arr2(&[[1.0, 2.0]]),
            up: arr2(&[[1.0], [3.0]]),
        };
        let x = arr2(&[[1.0, 1.0]]);
        let (y, _) = lora_forward(&p, &x).unwrap();
        assert_eq!(y, arr2(&[[3.0, 9.0]]));

        let (z, _) = lora_forward(&p, &Array2::zeros((2, 2))).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));

        assert!(lora_forward(&p, &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn lora_grads_match_finite_differences() {
        let mut rng = stream(4, "lora", 0, 0);
        let p = LoraParams {
            down: gaussian_matrix(2, 5, 0.5, &mut rng),
            up: gaussian_matrix(5, 2, 0.5, &mut rng),
        };
        let x = gaussian_matrix(3, 5, 1.0, &mut rng);
        let w = gaussian_matrix(3, 5, 1.0, &mut rng);
        let (_, cache) = lora_forward(&p, &x).unwrap();
        let mut gp = LoraParams::zeros(2, 5);
        let dx = lora_backward(&p, &cache, &w, &mut gp);
        let fd = finite_diff(&x, |x| (&lora_forward(&p, x).unwrap().0 * &w).sum(), 1e-6);
        assert!(max_rel_err(&dx, &fd) < 1e-6);
    }

    #[test]
    fn swish_values() {
        assert_eq!(swish(0.0, 1.0), 0.0);
        assert!((swish(1.0, 1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn projector_zero_w3_gives_zero_and_grads_check() {
        let mut rng = stream(5, "proj", 0, 0);
        let mut p = ProjectorParams::init(4, 6, &mut rng);
        p.w3.fill(0.0);
        let x = gaussian_matrix(3, 4, 1.0, &mut rng);
        let (y, _) = proj_forward(&p, &x, 1.0, &mut RunCtx::eval(), true);
        assert!(y.iter().all(|&v| v == 0.0));

        let p = ProjectorParams::init(4, 6, &mut rng);
        let w = gaussian_matrix(3, 4, 1.0, &mut rng);
        let (_, cache) = proj_forward(&p, &x, 1.0, &mut RunCtx::eval(), true);
        let mut gp = ProjectorParams::zeros(4, 6);
        let dx = proj_backward(&p, 1.0, &cache, &w, &mut gp);
        let fd = finite_diff(
            &x,
            |x| {
                let (y, _) = proj_forward(&p, x, 1.0, &mut RunCtx::eval(), true);
                (&y * &w).sum()
            },
            1e-6,
        );
        assert!(max_rel_err(&dx, &fd) < 1e-5);
    }

    #[test]
    fn ffn_grads_match_finite_differences() {
        let mut rng = stream(6, "ffn", 0, 0);
        let p = FfnParams::init(4, 8, &mut rng);
        let x = gaussian_matrix(3, 4, 1.0, &mut rng);
        let w = gaussian_matrix(3, 4, 1.0, &mut rng);
        let (_, cache) = ffn_forward(&p, &x, 1.0);
        let mut gp = FfnParams::zeros(4, 8);
        let dx = ffn_backward(&p, 1.0, &cache, &w, &mut gp);
        let fd = finite_diff(&x, |x| (&ffn_forward(&p, x, 1.0).0 * &w).sum(), 1e-6);
        assert!(max_rel_err(&dx, &fd) < 1e-5);
    }

    #[test]
    fn attention_is_causal_and_masks_pad_keys() {
        let mut rng = stream(7, "mha", 0, 0);
        let p = AttnParams::init(4, &mut rng);
        let x = gaussian_matrix(5, 4, 1.0, &mut rng);
        let valid = vec![false, true, true, false, true];
        let mut macs = 0;
        let (_, cache) = mha_forward(&p, &x, &valid, 2, &mut macs);
        for ph in &cache.probs {
            // Row 0 has no valid key (its only candidate is PAD): all zero.
            assert!(ph.row(0).iter().all(|&v| v == 0.0));
            for i in 1..5 {
                for j in 0..5 {
                    if j > i || !valid[j] {
                        assert_eq!(ph[[i, j]], 0.0);
                    }
                }
                let s: f64 = ph.row(i).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(macs > 0);
    }

    #[test]
    fn attention_grads_match_finite_differences() {
        let mut rng = stream(8, "mha", 0, 0);
        let p = AttnParams::init(4, &mut rng);
        let x = gaussian_matrix(4, 4, 1.0, &mut rng);
        let w = gaussian_matrix(4, 4, 1.0, &mut rng);
        let valid = vec![true, false, true, true];
        let mut macs = 0;
        let (_, cache) = mha_forward(&p, &x, &valid, 2, &mut macs);
        let mut gp = AttnParams::zeros(4);
        let dx = mha_backward(&p, &cache, &w, 2, &mut gp);
        let fd = finite_diff(
            &x,
            |x| {
                let mut m = 0;
                (&mha_forward(&p, x, &valid, 2, &mut m).0 * &w).sum()
            },
            1e-6,
        );
        assert!(max_rel_err(&dx, &fd) < 1e-5, "err {}", max_rel_err(&dx, &fd));

        // Weight grads against finite differences on w_q.
        let fd_wq = {
            let mut grad = Array2::zeros(p.w_q.dim());
            for idx in 0..p.w_q.len() {
                let (r, c) = (idx / 4, idx % 4);
                for (sign, slot) in [(1.0, 0), (-1.0, 1)] {
                    let mut pp = p.clone();
                    pp.w_q[[r, c]] += sign * 1e-6;
                    let mut m = 0;
                    let val = (&mha_forward(&pp, &x, &valid, 2, &mut m).0 * &w).sum();
                    if slot == 0 {
                        grad[[r, c]] = val;
                    } else {
                        grad[[r, c]] = (grad[[r, c]] - val) / (2.0 * 1e-6);
                    }
                }
            }
            grad
        };
        assert!(max_rel_err(&gp.w_q, &fd_wq) < 1e-5);
    }

    #[test]
    fn dropout_scales_and_masks() {
        let mut rng = stream(9, "drop", 0, 0);
        let x = Array2::ones((20, 20));
        let mut ctx = RunCtx::train(0.4, &mut rng);
        let (y, mask) = ctx.dropout(&x);
        let kept = y.iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 0 && kept < 400);
        for &v in y.iter() {
            assert!(v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12);
        }
        let dy = Array2::ones((20, 20));
        let dx = mask.apply(&dy);
        assert_eq!(dx, y);

        let (y_eval, mask_eval) = RunCtx::eval().dropout(&x);
        assert_eq!(y_eval, x);
        assert!(mask_eval.0.is_none());
    }
}
