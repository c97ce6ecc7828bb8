//! Small convolutional actor-critic.
//!
//! Input is a channel-last stack of the one-hot crop plus one constant plane per
//! controlled metric. Three strided 3x3 convolutions with tanh feed a dense
//! trunk, then a policy head (one logit per action) and a scalar value head.
//! Parameters live in one flat `Vec<f64>` described by a shape manifest, which
//! keeps the optimiser and the checkpoint format trivial.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::Observation;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 64, 64],
            kernel: 3,
            stride: 2,
            hidden: 256,
        }
    }
}

/// Per-sample input geometry, channel-last.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
struct ConvGeom {
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.in_c
    }
}

/// Architecture: geometry and parameter layout, no weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub config: NetConfig,
    pub input: InputShape,
    pub actions: usize,
    convs: Vec<ConvGeom>,
    flat: usize,
    slots: Vec<ParamSlot>,
    n_params: usize,
}

struct Cache {
    cols: Vec<Array2<f64>>,
    acts: Vec<Array2<f64>>,
    flat: Array2<f64>,
    hidden: Array2<f64>,
}

pub struct ForwardPass {
    pub logits: Array2<f64>,
    pub values: Array1<f64>,
    cache: Cache,
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

impl PolicyNet {
    pub fn new(config: NetConfig, input: InputShape, actions: usize) -> Self {
        let pad = config.kernel / 2;
        let mut convs = Vec::new();
        let (mut h, mut w, mut c) = (input.height, input.width, input.channels);
        for &oc in &config.conv_channels {
            let g = ConvGeom {
                in_h: h,
                in_w: w,
                in_c: c,
                out_h: conv_out(h, config.kernel, config.stride, pad),
                out_w: conv_out(w, config.kernel, config.stride, pad),
                out_c: oc,
                k: config.kernel,
                stride: config.stride,
                pad,
            };
            (h, w, c) = (g.out_h, g.out_w, oc);
            convs.push(g);
        }
        let flat = h * w * c;
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let slot = ParamSlot {
                name,
                shape,
                offset,
            };
            offset += slot.len();
            slots.push(slot);
        };
        for (i, g) in convs.iter().enumerate() {
            add(format!("conv{i}.weight"), vec![g.out_c, g.patch()]);
            add(format!("conv{i}.bias"), vec![g.out_c]);
        }
        add("trunk.weight".into(), vec![config.hidden, flat]);
        add("trunk.bias".into(), vec![config.hidden]);
        add("policy.weight".into(), vec![actions, config.hidden]);
        add("policy.bias".into(), vec![actions]);
        add("value.weight".into(), vec![1, config.hidden]);
        add("value.bias".into(), vec![1]);
        Self {
            config,
            input,
            actions,
            convs,
            flat,
            slots,
            n_params: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    fn slot(&self, i: usize) -> &ParamSlot {
        &self.slots[i]
    }

    fn matrix<'a>(&self, params: &'a [f64], i: usize) -> ArrayView2<'a, f64> {
        let s = self.slot(i);
        ArrayView2::from_shape(
            (s.shape[0], s.shape[1]),
            &params[s.offset..s.offset + s.len()],
        )
        .expect("slot shape matches its length")
    }

    fn vector<'a>(&self, params: &'a [f64], i: usize) -> &'a [f64] {
        let s = self.slot(i);
        &params[s.offset..s.offset + s.len()]
    }

    /// Orthogonal initialisation; the policy head is scaled down so the initial
    /// action distribution is close to uniform.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.n_params];
        let n_conv = self.convs.len();
        for (i, slot) in self.slots.iter().enumerate() {
            if slot.shape.len() != 2 {
                continue; // biases start at zero
            }
            let gain = if i == 2 * n_conv + 2 { 0.01 } else { 1.0 };
            let m = orthogonal(slot.shape[0], slot.shape[1], gain, &mut rng);
            params[slot.offset..slot.offset + slot.len()].copy_from_slice(&m);
        }
        for v in params.iter_mut() {
            *v = *v as f32 as f64;
        }
        params
    }

    /// Channel-last features for one observation.
    pub fn encode(&self, obs: &Observation) -> Vec<f64> {
        let v = &obs.map_view;
        let c = v.channels + obs.condition.len();
        debug_assert_eq!(c, self.input.channels);
        let mut out = Vec::with_capacity(v.height * v.width * c);
        for cell in v.data.chunks_exact(v.channels) {
            out.extend(cell.iter().map(|x| *x as f64));
            out.extend(obs.condition.iter().map(|x| *x as f64));
        }
        out
    }

    /// Runs a batch of `n` stacked inputs.
    pub fn forward(&self, params: &[f64], input: &[f64], n: usize) -> ForwardPass {
        assert_eq!(
            input.len(),
            n * self.input.len(),
            "input batch has the wrong size"
        );
        let mut cols = Vec::with_capacity(self.convs.len());
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.convs.len());
        for (i, g) in self.convs.iter().enumerate() {
            let src: &[f64] = if i == 0 {
                input
            } else {
                acts[i - 1].as_slice().expect("contiguous activations")
            };
            let col = im2col(src, n, g);
            let w = self.matrix(params, 2 * i);
            let b = self.vector(params, 2 * i + 1);
            let mut z = col.dot(&w.t());
            for mut row in z.rows_mut() {
                for (v, bias) in row.iter_mut().zip(b) {
                    *v = (*v + bias).tanh();
                }
            }
            cols.push(col);
            acts.push(z);
        }
        let last = acts.last().expect("at least one conv layer");
        let flat = last
            .view()
            .into_shape_with_order((n, self.flat))
            .expect("conv output flattens per sample")
            .to_owned();
        let k = 2 * self.convs.len();
        let mut hidden = flat.dot(&self.matrix(params, k).t());
        let hb = self.vector(params, k + 1);
        for mut row in hidden.rows_mut() {
            for (v, b) in row.iter_mut().zip(hb) {
                *v = (*v + b).tanh();
            }
        }
        let mut logits = hidden.dot(&self.matrix(params, k + 2).t());
        let pb = self.vector(params, k + 3);
        for mut row in logits.rows_mut() {
            for (v, b) in row.iter_mut().zip(pb) {
                *v += b;
            }
        }
        let vb = self.vector(params, k + 5)[0];
        let values = hidden
            .dot(&self.matrix(params, k + 4).t())
            .column(0)
            .mapv(|v| v + vb);
        ForwardPass {
            logits,
            values,
            cache: Cache {
                cols,
                acts,
                flat,
                hidden,
            },
        }
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradients at the logits and values of `pass`.
    pub fn backward(
        &self,
        params: &[f64],
        pass: &ForwardPass,
        dlogits: &Array2<f64>,
        dvalues: &Array1<f64>,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; self.n_params];
        let k = 2 * self.convs.len();
        let cache = &pass.cache;
        let n = dlogits.nrows();

        let mut put = |slot: &ParamSlot, g: &[f64]| {
            for (dst, v) in grad[slot.offset..slot.offset + slot.len()]
                .iter_mut()
                .zip(g)
            {
                *dst += v;
            }
        };

        // heads
        let dpw = dlogits.t().dot(&cache.hidden);
        put(self.slot(k + 2), dpw.as_slice().expect("contiguous"));
        put(
            self.slot(k + 3),
            dlogits.sum_axis(Axis(0)).as_slice().expect("contiguous"),
        );
        let dv2 = dvalues
            .view()
            .into_shape_with_order((n, 1))
            .expect("column");
        let dvw = dv2.t().dot(&cache.hidden);
        put(self.slot(k + 4), dvw.as_slice().expect("contiguous"));
        put(self.slot(k + 5), &[dvalues.sum()]);

        let mut dh = dlogits.dot(&self.matrix(params, k + 2));
        dh += &dv2.dot(&self.matrix(params, k + 4));
        dh.zip_mut_with(&cache.hidden, |d, h| *d *= 1.0 - h * h);

        // trunk
        let dtw = dh.t().dot(&cache.flat);
        put(self.slot(k), dtw.as_slice().expect("contiguous"));
        put(
            self.slot(k + 1),
            dh.sum_axis(Axis(0)).as_slice().expect("contiguous"),
        );
        let dflat = dh.dot(&self.matrix(params, k));
        let last = self.convs.last().expect("at least one conv layer");
        let mut dact = dflat
            .into_shape_with_order((n * last.positions(), last.out_c))
            .expect("flat gradient reshapes to conv output");

        for (i, g) in self.convs.iter().enumerate().rev() {
            dact.zip_mut_with(&cache.acts[i], |d, a| *d *= 1.0 - a * a);
            let dw = dact.t().dot(&cache.cols[i]);
            put(self.slot(2 * i), dw.as_slice().expect("contiguous"));
            put(
                self.slot(2 * i + 1),
                dact.sum_axis(Axis(0)).as_slice().expect("contiguous"),
            );
            if i > 0 {
                let dcols = dact.dot(&self.matrix(params, 2 * i));
                let prev = &self.convs[i - 1];
                let mut dprev = Array2::zeros((n * prev.positions(), prev.out_c));
                col2im(&dcols, n, g, dprev.as_slice_mut().expect("contiguous"));
                dact = dprev;
            }
        }
        grad
    }
}

fn im2col(src: &[f64], n: usize, g: &ConvGeom) -> Array2<f64> {
    let patch = g.patch();
    let mut out = Array2::zeros((n * g.positions(), patch));
    let buf = out.as_slice_mut().expect("fresh array is contiguous");
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let dst = &mut buf[row * patch..(row + 1) * patch];
                for ky in 0..g.k {
                    let Some(iy) = (oy * g.stride + ky)
                        .checked_sub(g.pad)
                        .filter(|y| *y < g.in_h)
                    else {
                        continue;
                    };
                    for kx in 0..g.k {
                        let Some(ix) = (ox * g.stride + kx)
                            .checked_sub(g.pad)
                            .filter(|x| *x < g.in_w)
                        else {
                            continue;
                        };
                        let s = ((b * g.in_h + iy) * g.in_w + ix) * g.in_c;
                        let d = (ky * g.k + kx) * g.in_c;
                        dst[d..d + g.in_c].copy_from_slice(&src[s..s + g.in_c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im(dcols: &Array2<f64>, n: usize, g: &ConvGeom, dst: &mut [f64]) {
    let patch = g.patch();
    let buf = dcols.as_slice().expect("contiguous");
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let src = &buf[row * patch..(row + 1) * patch];
                for ky in 0..g.k {
                    let Some(iy) = (oy * g.stride + ky)
                        .checked_sub(g.pad)
                        .filter(|y| *y < g.in_h)
                    else {
                        continue;
                    };
                    for kx in 0..g.k {
                        let Some(ix) = (ox * g.stride + kx)
                            .checked_sub(g.pad)
                            .filter(|x| *x < g.in_w)
                        else {
                            continue;
                        };
                        let d = ((b * g.in_h + iy) * g.in_w + ix) * g.in_c;
                        let s = (ky * g.k + kx) * g.in_c;
                        for c in 0..g.in_c {
                            dst[d + c] += src[s + c];
                        }
                    }
                }
            }
        }
    }
}

/// Random matrix with orthonormal rows (or columns, whichever is shorter), times `gain`.
fn orthogonal<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (short, long) = if rows <= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    // `short` orthonormal vectors of length `long`
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for u in &basis {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain
                * if rows <= cols {
                    basis[r][c]
                } else {
                    basis[c][r]
                };
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Selects rows of a stacked input.
pub fn gather_rows(input: &[f64], row_len: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * row_len);
    for &i in idx {
        out.extend_from_slice(&input[i * row_len..(i + 1) * row_len]);
    }
    out
}
