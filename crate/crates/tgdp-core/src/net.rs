//! Dense feedforward networks with reverse-mode parameter/input gradients and
//! a forward-over-reverse path for nested (second-order) differentiation.
//!
//! Parameters live in one flat vector, layer-major: for each layer the weight
//! matrix (out x in, row-major) followed by the bias. Batched evaluation runs
//! on ndarray matrices so the heavy lifting is plain f64 GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    SiLU,
    Identity,
}

impl Activation {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::SiLU => z * sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// First derivative.
    #[inline]
    pub fn d1(self, z: f64) -> f64 {
        match self {
            Activation::SiLU => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }

    /// Second derivative (needed by the forward-over-reverse pass).
    #[inline]
    pub fn d2(self, z: f64) -> f64 {
        match self {
            Activation::SiLU => {
                let s = sigmoid(z);
                let sp = s * (1.0 - s);
                2.0 * sp + z * sp * (1.0 - 2.0 * s)
            }
            Activation::Identity => 0.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
pub struct DenseNetwork {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    /// (weight offset, bias offset) per layer into `params`.
    offsets: Vec<(usize, usize)>,
}

/// Forward-pass intermediates kept for the backward pass.
pub struct ForwardCache {
    /// acts[0] is the input; acts[l] the post-activation of layer l-1.
    acts: Vec<Array2<f64>>,
    /// Pre-activations per layer.
    zs: Vec<Array2<f64>>,
}

impl DenseNetwork {
    /// Zero-initialized network. `activations` has one entry per layer
    /// (`layer_sizes.len() - 1` layers).
    pub fn new(layer_sizes: Vec<usize>, activations: Vec<Activation>) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output sizes");
        assert!(layer_sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        assert_eq!(
            activations.len(),
            layer_sizes.len() - 1,
            "one activation per layer required"
        );
        let mut offsets = Vec::new();
        let mut count = 0;
        for l in 0..layer_sizes.len() - 1 {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            offsets.push((count, count + fan_in * fan_out));
            count += fan_in * fan_out + fan_out;
        }
        DenseNetwork { layer_sizes, activations, params: vec![0.0; count], offsets }
    }

    /// MLP with SiLU hidden layers and identity output.
    pub fn mlp(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut acts = vec![Activation::SiLU; hidden.len()];
        acts.push(Activation::Identity);
        DenseNetwork::new(sizes, acts)
    }

    /// Fan-in scaled Gaussian weights (std sqrt(2/fan_in)), zero biases.
    pub fn init_kaiming<R: Rng>(&mut self, rng: &mut R) {
        for l in 0..self.num_layers() {
            let fan_in = self.layer_sizes[l];
            let std = (2.0 / fan_in as f64).sqrt();
            let (w0, b0) = self.offsets[l];
            for w in &mut self.params[w0..b0] {
                let z: f64 = rng.sample(StandardNormal);
                *w = std * z;
            }
            let b_end = b0 + self.layer_sizes[l + 1];
            for b in &mut self.params[b0..b_end] {
                *b = 0.0;
            }
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.params.len(), "parameter vector length mismatch");
        self.params.copy_from_slice(p);
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (w0, b0) = self.offsets[layer];
        ArrayView2::from_shape(
            (self.layer_sizes[layer + 1], self.layer_sizes[layer]),
            &self.params[w0..b0],
        )
        .unwrap()
    }

    fn bias(&self, layer: usize) -> &[f64] {
        let (_, b0) = self.offsets[layer];
        &self.params[b0..b0 + self.layer_sizes[layer + 1]]
    }

    fn grad_views<'a>(
        &self,
        grad: &'a mut [f64],
        layer: usize,
    ) -> (ArrayViewMut2<'a, f64>, &'a mut [f64]) {
        let (w0, b0) = self.offsets[layer];
        let out = self.layer_sizes[layer + 1];
        let (w_slice, rest) = grad[w0..].split_at_mut(b0 - w0);
        let w = ArrayViewMut2::from_shape((out, self.layer_sizes[layer]), w_slice).unwrap();
        (w, &mut rest[..out])
    }

    fn affine(&self, layer: usize, a: &Array2<f64>) -> Array2<f64> {
        let mut z = a.dot(&self.weights(layer).t());
        let b = self.bias(layer);
        for mut row in z.rows_mut() {
            for (v, bi) in row.iter_mut().zip(b) {
                *v += bi;
            }
        }
        z
    }

    /// Batched forward pass; rows are samples.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.input_dim(), "input width mismatch");
        let mut a = x.clone();
        for l in 0..self.num_layers() {
            let mut z = self.affine(l, &a);
            z.mapv_inplace(|v| self.activations[l].value(v));
            a = z;
        }
        a
    }

    /// Single-sample forward.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
        self.forward_batch(&xm).row(0).to_vec()
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, ForwardCache) {
        assert_eq!(x.ncols(), self.input_dim(), "input width mismatch");
        let mut acts = vec![x.clone()];
        let mut zs = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            let z = self.affine(l, acts.last().unwrap());
            let mut a = z.clone();
            a.mapv_inplace(|v| self.activations[l].value(v));
            zs.push(z);
            acts.push(a);
        }
        let out = acts.last().unwrap().clone();
        (out, ForwardCache { acts, zs })
    }

    /// Reverse pass. Accumulates parameter gradients of sum_i <dout_i, net(x_i)>
    /// into `grad` (+=) and returns the input gradient when requested.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dout: &Array2<f64>,
        grad: Option<&mut [f64]>,
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.params.len(), "gradient buffer length mismatch");
        }
        let mut grad = grad;
        let mut delta = dout.clone();
        for l in (0..self.num_layers()).rev() {
            // dZ = delta .* act'(z)
            ndarray::Zip::from(&mut delta).and(&cache.zs[l]).for_each(|d, &z| {
                *d *= self.activations[l].d1(z);
            });
            if let Some(g) = grad.as_deref_mut() {
                let (mut dw, db) = self.grad_views(g, l);
                general_mat_mul(1.0, &delta.t(), &cache.acts[l].view(), 1.0, &mut dw);
                for (j, b) in db.iter_mut().enumerate() {
                    *b += delta.column(j).sum();
                }
            }
            if l > 0 || want_input_grad {
                delta = delta.dot(&self.weights(l));
            }
        }
        want_input_grad.then_some(delta)
    }

    /// Parameter gradient of a scalar loss given by `loss(outputs) -> (value, d loss/d outputs)`.
    pub fn param_gradient<F>(&self, x: &Array2<f64>, loss: F) -> (f64, Vec<f64>)
    where
        F: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
    {
        let (y, cache) = self.forward_cached(x);
        let (value, dout) = loss(&y);
        assert!(value.is_finite(), "non-finite loss value");
        let mut grad = vec![0.0; self.param_count()];
        self.backward(&cache, &dout, Some(&mut grad), false);
        (value, grad)
    }

    /// Scalar-output convenience: values and full input gradients per row.
    pub fn value_and_input_grad(&self, x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
        assert_eq!(self.output_dim(), 1, "scalar-output network required");
        let (y, cache) = self.forward_cached(x);
        let dout = Array2::ones((x.nrows(), 1));
        let dx = self.backward(&cache, &dout, None, true).unwrap();
        (y.column(0).to_owned(), dx)
    }

    /// Forward-over-reverse pass for nested differentiation.
    ///
    /// Runs the network on dual inputs (x, xdot) and accumulates into `grad`
    /// the parameter gradient of
    ///   sum_i [ <seed_primal_i, net(x_i)> + <seed_dual_i, D_{xdot_i} net(x_i)> ],
    /// where D_u net is the directional input derivative. Returns the primal
    /// outputs and the tangents.
    pub fn dual_backward(
        &self,
        x: &Array2<f64>,
        xdot: &Array2<f64>,
        seed_primal: &Array2<f64>,
        seed_dual: &Array2<f64>,
        grad: &mut [f64],
    ) -> (Array2<f64>, Array2<f64>) {
        assert_eq!(x.dim(), xdot.dim(), "tangent shape mismatch");
        assert_eq!(grad.len(), self.params.len(), "gradient buffer length mismatch");
        let layers = self.num_layers();
        // dual forward
        let mut acts = vec![x.clone()];
        let mut dacts = vec![xdot.clone()];
        let mut zs = Vec::with_capacity(layers);
        let mut dzs = Vec::with_capacity(layers);
        for l in 0..layers {
            let z = self.affine(l, acts.last().unwrap());
            let zdot = dacts.last().unwrap().dot(&self.weights(l).t());
            let mut a = z.clone();
            a.mapv_inplace(|v| self.activations[l].value(v));
            let mut adot = zdot.clone();
            ndarray::Zip::from(&mut adot).and(&z).for_each(|ad, &zv| {
                *ad *= self.activations[l].d1(zv);
            });
            zs.push(z);
            dzs.push(zdot);
            acts.push(a);
            dacts.push(adot);
        }
        let y = acts.last().unwrap().clone();
        let ydot = dacts.last().unwrap().clone();

        // joint reverse pass over (value, tangent) state
        let mut delta = seed_primal.clone();
        let mut ddelta = seed_dual.clone();
        for l in (0..layers).rev() {
            let act = self.activations[l];
            // cotangent on z picks up both the primal path (act') and the
            // tangent path (act'' * zdot); cotangent on zdot is ddelta * act'.
            let mut dz = delta;
            ndarray::Zip::from(&mut dz)
                .and(&zs[l])
                .and(&ddelta)
                .and(&dzs[l])
                .for_each(|d, &z, &dd, &zd| {
                    *d = *d * act.d1(z) + dd * act.d2(z) * zd;
                });
            let mut dzdot = ddelta;
            ndarray::Zip::from(&mut dzdot).and(&zs[l]).for_each(|d, &z| {
                *d *= act.d1(z);
            });
            {
                let (mut dw, db) = self.grad_views(grad, l);
                general_mat_mul(1.0, &dz.t(), &acts[l].view(), 1.0, &mut dw);
                general_mat_mul(1.0, &dzdot.t(), &dacts[l].view(), 1.0, &mut dw);
                for (j, b) in db.iter_mut().enumerate() {
                    *b += dz.column(j).sum();
                }
            }
            delta = dz.dot(&self.weights(l));
            ddelta = dzdot.dot(&self.weights(l));
        }
        (y, ydot)
    }
}

/// Central finite differences of a scalar function of the parameter vector;
/// test helper used to validate every differentiation path.
pub fn finite_difference<F>(params: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut g = vec![0.0; p.len()];
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = f(&p);
        p[i] = orig - step;
        let down = f(&p);
        p[i] = orig;
        g[i] = (up - down) / (2.0 * step);
    }
    g
}
