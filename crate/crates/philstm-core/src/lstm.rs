//! One LSTM level: gate parameters, single-step transition, full-sequence
//! forward with cached activations, and the exact backward pass.
//!
//! The transition is bias-free: i = sigma(W_i x + U_i h_prev) and likewise for
//! f and o, u = tanh(W_u x + U_u h_prev), c = i*u + f*c_prev, h = o*tanh(c).

use crate::linalg::{init_params, matvec, matvec_t, sigmoid, Mat, Rng, Vector};

/// The eight K x K transition matrices of one LSTM level.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_i: Mat,
    pub w_f: Mat,
    pub w_o: Mat,
    pub w_u: Mat,
    pub u_i: Mat,
    pub u_f: Mat,
    pub u_o: Mat,
    pub u_u: Mat,
}

impl LstmParams {
    pub fn zeros(k: usize) -> LstmParams {
        LstmParams {
            w_i: Mat::zeros(k, k),
            w_f: Mat::zeros(k, k),
            w_o: Mat::zeros(k, k),
            w_u: Mat::zeros(k, k),
            u_i: Mat::zeros(k, k),
            u_f: Mat::zeros(k, k),
            u_o: Mat::zeros(k, k),
            u_u: Mat::zeros(k, k),
        }
    }

    pub fn init(rng: &mut Rng, k: usize, scale: f64) -> LstmParams {
        LstmParams {
            w_i: init_params(rng, k, k, scale),
            w_f: init_params(rng, k, k, scale),
            w_o: init_params(rng, k, k, scale),
            w_u: init_params(rng, k, k, scale),
            u_i: init_params(rng, k, k, scale),
            u_f: init_params(rng, k, k, scale),
            u_o: init_params(rng, k, k, scale),
            u_u: init_params(rng, k, k, scale),
        }
    }

    pub fn k(&self) -> usize {
        self.w_i.rows()
    }

    /// Matrices in serialization order: W_i, W_f, W_o, W_u, U_i, U_f, U_o, U_u.
    pub fn mats(&self) -> [&Mat; 8] {
        [
            &self.w_i, &self.w_f, &self.w_o, &self.w_u, &self.u_i, &self.u_f, &self.u_o,
            &self.u_u,
        ]
    }

    pub fn mats_mut(&mut self) -> [&mut Mat; 8] {
        [
            &mut self.w_i,
            &mut self.w_f,
            &mut self.w_o,
            &mut self.w_u,
            &mut self.u_i,
            &mut self.u_f,
            &mut self.u_o,
            &mut self.u_u,
        ]
    }

    pub fn add_assign(&mut self, other: &LstmParams) {
        for (a, b) in self.mats_mut().into_iter().zip(other.mats()) {
            a.add_assign(b);
        }
    }
}

/// Hidden state and memory cell of one LSTM level.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(k: usize) -> LstmState {
        LstmState {
            h: Vector::zeros(k),
            c: Vector::zeros(k),
        }
    }
}

/// Activations of one step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StepCache {
    pub x: Vector,
    pub i: Vector,
    pub f: Vector,
    pub o: Vector,
    pub u: Vector,
    pub c: Vector,
    pub h: Vector,
}

impl StepCache {
    pub fn state(&self) -> LstmState {
        LstmState {
            h: self.h.clone(),
            c: self.c.clone(),
        }
    }
}

/// One LSTM transition. Panics on dimension mismatch.
pub fn lstm_step(p: &LstmParams, x: &Vector, prev: &LstmState) -> (LstmState, StepCache) {
    let k = p.k();
    assert_eq!(x.len(), k, "lstm_step: input length {} != K {}", x.len(), k);
    assert_eq!(prev.h.len(), k, "lstm_step: state length mismatch");

    let gate = |w: &Mat, u: &Mat| {
        let mut a = matvec(w, x);
        a.add_assign(&matvec(u, &prev.h));
        a
    };
    let i = gate(&p.w_i, &p.u_i).map(sigmoid);
    let f = gate(&p.w_f, &p.u_f).map(sigmoid);
    let o = gate(&p.w_o, &p.u_o).map(sigmoid);
    let u = gate(&p.w_u, &p.u_u).map(f64::tanh);

    let mut c = i.clone();
    c.hadamard_assign(&u);
    let mut fc = f.clone();
    fc.hadamard_assign(&prev.c);
    c.add_assign(&fc);

    let mut h = o.clone();
    h.hadamard_assign(&c.map(f64::tanh));

    let cache = StepCache {
        x: x.clone(),
        i,
        f,
        o,
        u,
        c: c.clone(),
        h: h.clone(),
    };
    (LstmState { h, c }, cache)
}

/// Run a full sequence from `initial`, caching every step.
pub fn lstm_forward(p: &LstmParams, inputs: &[Vector], initial: &LstmState) -> Vec<StepCache> {
    let mut caches = Vec::with_capacity(inputs.len());
    let mut state = initial.clone();
    for x in inputs {
        let (next, cache) = lstm_step(p, x, &state);
        caches.push(cache);
        state = next;
    }
    caches
}

/// Exact single-step backward. Accumulates parameter gradients into `grads`
/// and returns `(dx, dprev)` for the input and predecessor state. `dh`/`dc`
/// are the upstream gradients on this step's outputs.
pub fn step_backward(
    p: &LstmParams,
    cache: &StepCache,
    prev: &LstmState,
    dh: &Vector,
    dc_in: &Vector,
    grads: &mut LstmParams,
) -> (Vector, LstmState) {
    let k = p.k();

    // h = o * tanh(c)
    let tanh_c = cache.c.map(f64::tanh);
    let mut d_o = dh.clone();
    d_o.hadamard_assign(&tanh_c);
    let mut dc = dc_in.clone();
    for j in 0..k {
        dc.0[j] += dh.0[j] * cache.o.0[j] * (1.0 - tanh_c.0[j] * tanh_c.0[j]);
    }

    // c = i*u + f*c_prev
    let mut d_i = dc.clone();
    d_i.hadamard_assign(&cache.u);
    let mut d_u = dc.clone();
    d_u.hadamard_assign(&cache.i);
    let mut d_f = dc.clone();
    d_f.hadamard_assign(&prev.c);
    let mut dc_prev = dc;
    dc_prev.hadamard_assign(&cache.f);

    // pre-activation gradients
    let da_i = gate_back(&d_i, &cache.i, true);
    let da_f = gate_back(&d_f, &cache.f, true);
    let da_o = gate_back(&d_o, &cache.o, true);
    let da_u = gate_back(&d_u, &cache.u, false);

    let mut dx = Vector::zeros(k);
    let mut dh_prev = Vector::zeros(k);
    for (da, w, u) in [
        (&da_i, &p.w_i, &p.u_i),
        (&da_f, &p.w_f, &p.u_f),
        (&da_o, &p.w_o, &p.u_o),
        (&da_u, &p.w_u, &p.u_u),
    ] {
        dx.add_assign(&matvec_t(w, da));
        dh_prev.add_assign(&matvec_t(u, da));
    }
    // parameter gradients: dW = da x^T, dU = da h_prev^T
    grads.w_i.add_outer_scaled(&da_i, &cache.x, 1.0);
    grads.w_f.add_outer_scaled(&da_f, &cache.x, 1.0);
    grads.w_o.add_outer_scaled(&da_o, &cache.x, 1.0);
    grads.w_u.add_outer_scaled(&da_u, &cache.x, 1.0);
    grads.u_i.add_outer_scaled(&da_i, &prev.h, 1.0);
    grads.u_f.add_outer_scaled(&da_f, &prev.h, 1.0);
    grads.u_o.add_outer_scaled(&da_o, &prev.h, 1.0);
    grads.u_u.add_outer_scaled(&da_u, &prev.h, 1.0);

    (
        dx,
        LstmState {
            h: dh_prev,
            c: dc_prev,
        },
    )
}

fn gate_back(d: &Vector, activated: &Vector, is_sigmoid: bool) -> Vector {
    let mut out = d.clone();
    for j in 0..out.len() {
        let a = activated.0[j];
        out.0[j] *= if is_sigmoid { a * (1.0 - a) } else { 1.0 - a * a };
    }
    out
}

/// Gradients from a full-sequence backward pass.
pub struct BackwardResult {
    pub params: LstmParams,
    /// Gradient w.r.t. each input vector, in step order.
    pub inputs: Vec<Vector>,
    /// Gradient w.r.t. the initial state.
    pub initial: LstmState,
}

/// Backward over a cached sequence. `grads_h[t]` is the upstream gradient on
/// `h_t`; `grad_h_final`/`grad_c_final` are extra gradients on the terminal
/// state. Panics if `grads_h` and `caches` disagree in length.
pub fn lstm_backward(
    p: &LstmParams,
    caches: &[StepCache],
    initial: &LstmState,
    grads_h: &[Vector],
    grad_h_final: &Vector,
    grad_c_final: &Vector,
) -> BackwardResult {
    assert_eq!(
        caches.len(),
        grads_h.len(),
        "lstm_backward: {} caches but {} per-step gradients",
        caches.len(),
        grads_h.len()
    );
    let k = p.k();
    let mut params = LstmParams::zeros(k);
    let mut inputs = vec![Vector::zeros(k); caches.len()];

    let mut dh = grad_h_final.clone();
    let mut dc = grad_c_final.clone();
    for t in (0..caches.len()).rev() {
        dh.add_assign(&grads_h[t]);
        let prev = if t == 0 {
            initial.clone()
        } else {
            caches[t - 1].state()
        };
        let (dx, dprev) = step_backward(p, &caches[t], &prev, &dh, &dc, &mut params);
        inputs[t] = dx;
        dh = dprev.h;
        dc = dprev.c;
    }
    BackwardResult {
        params,
        inputs,
        initial: LstmState { h: dh, c: dc },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::init_vector;

    #[test]
    fn zero_params_zero_state_gives_zero_output() {
        let p = LstmParams::zeros(3);
        let x = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let (state, cache) = lstm_step(&p, &x, &LstmState::zeros(3));
        assert_eq!(state.h.0, vec![0.0; 3]);
        assert_eq!(state.c.0, vec![0.0; 3]);
        // gates sit at 0.5, u at 0
        assert!(cache.i.0.iter().all(|&v| v == 0.5));
        assert!(cache.u.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_halve_previous_cell() {
        let p = LstmParams::zeros(2);
        let prev = LstmState {
            h: Vector::zeros(2),
            c: Vector::from_vec(vec![0.8, -0.4]),
        };
        let (state, _) = lstm_step(&p, &Vector::zeros(2), &prev);
        for j in 0..2 {
            let c0 = prev.c.0[j];
            assert!((state.c.0[j] - 0.5 * c0).abs() < 1e-15);
            assert!((state.h.0[j] - 0.5 * (0.5 * c0).tanh()).abs() < 1e-15);
        }
    }

    /// Independent scalar re-implementation of the transition equations,
    /// reading raw matrix entries with explicit loops.
    fn oracle_step(p: &LstmParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = x.len();
        let pre = |w: &Mat, u: &Mat, j: usize| -> f64 {
            let mut s = 0.0;
            for m in 0..k {
                s += w.get(j, m) * x[m] + u.get(j, m) * h_prev[m];
            }
            s
        };
        let mut h = vec![0.0; k];
        let mut c = vec![0.0; k];
        for j in 0..k {
            let i = 1.0 / (1.0 + (-pre(&p.w_i, &p.u_i, j)).exp());
            let f = 1.0 / (1.0 + (-pre(&p.w_f, &p.u_f, j)).exp());
            let o = 1.0 / (1.0 + (-pre(&p.w_o, &p.u_o, j)).exp());
            let u = pre(&p.w_u, &p.u_u, j).tanh();
            c[j] = i * u + f * c_prev[j];
            h[j] = o * c[j].tanh();
        }
        (h, c)
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let mut rng = Rng::new(11);
        let p = LstmParams::init(&mut rng, 2, 0.5);
        let x = init_vector(&mut rng, 2, 1.0);
        let prev = LstmState {
            h: init_vector(&mut rng, 2, 0.5),
            c: init_vector(&mut rng, 2, 0.5),
        };
        let (state, _) = lstm_step(&p, &x, &prev);
        let (h, c) = oracle_step(&p, x.as_slice(), prev.h.as_slice(), prev.c.as_slice());
        for j in 0..2 {
            assert!((state.h.0[j] - h[j]).abs() < 1e-14);
            assert!((state.c.0[j] - c[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Rng::new(3);
        let p = LstmParams::init(&mut rng, 4, 0.2);
        let inputs: Vec<Vector> = (0..5).map(|_| init_vector(&mut rng, 4, 1.0)).collect();
        let a = lstm_forward(&p, &inputs, &LstmState::zeros(4));
        let b = lstm_forward(&p, &inputs, &LstmState::zeros(4));
        for (ca, cb) in a.iter().zip(&b) {
            assert_eq!(ca.h.0, cb.h.0);
            assert_eq!(ca.c.0, cb.c.0);
        }
    }

    #[test]
    fn gate_ranges() {
        let mut rng = Rng::new(17);
        let p = LstmParams::init(&mut rng, 6, 2.0);
        let inputs: Vec<Vector> = (0..6).map(|_| init_vector(&mut rng, 6, 3.0)).collect();
        for cache in lstm_forward(&p, &inputs, &LstmState::zeros(6)) {
            for j in 0..6 {
                assert!(cache.i.0[j] > 0.0 && cache.i.0[j] < 1.0);
                assert!(cache.f.0[j] > 0.0 && cache.f.0[j] < 1.0);
                assert!(cache.o.0[j] > 0.0 && cache.o.0[j] < 1.0);
                assert!(cache.u.0[j] > -1.0 && cache.u.0[j] < 1.0);
                assert!(cache.h.0[j].abs() < 1.0);
            }
        }
    }

    #[test]
    #[should_panic(expected = "lstm_step")]
    fn dimension_mismatch_panics() {
        let p = LstmParams::zeros(3);
        lstm_step(&p, &Vector::zeros(2), &LstmState::zeros(3));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(5);
        let p = LstmParams::init(&mut rng, 3, 0.3);
        let inputs: Vec<Vector> = (0..4).map(|_| init_vector(&mut rng, 3, 1.0)).collect();
        let caches = lstm_forward(&p, &inputs, &LstmState::zeros(3));
        let zeros = vec![Vector::zeros(3); 4];
        let res = lstm_backward(
            &p,
            &caches,
            &LstmState::zeros(3),
            &zeros,
            &Vector::zeros(3),
            &Vector::zeros(3),
        );
        for m in res.params.mats() {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
        assert!(res.inputs.iter().all(|v| v.0.iter().all(|&x| x == 0.0)));
    }

    /// Loss used by the finite-difference checks: a fixed random weighting of
    /// every h_t plus the final state.
    fn weighted_loss(caches: &[StepCache], w: &[Vector], wh: &Vector, wc: &Vector) -> f64 {
        let mut loss = 0.0;
        for (cache, wt) in caches.iter().zip(w) {
            loss += cache.h.dot(wt);
        }
        if let Some(last) = caches.last() {
            loss += last.h.dot(wh) + last.c.dot(wc);
        }
        loss
    }

    fn fd_check(k: usize, t: usize, seed: u64) -> f64 {
        let mut rng = Rng::new(seed);
        let p = LstmParams::init(&mut rng, k, 0.4);
        let inputs: Vec<Vector> = (0..t).map(|_| init_vector(&mut rng, k, 1.0)).collect();
        let w: Vec<Vector> = (0..t).map(|_| init_vector(&mut rng, k, 1.0)).collect();
        let wh = init_vector(&mut rng, k, 1.0);
        let wc = init_vector(&mut rng, k, 1.0);
        let initial = LstmState::zeros(k);

        let caches = lstm_forward(&p, &inputs, &initial);
        let res = lstm_backward(&p, &caches, &initial, &w, &wh, &wc);

        let eps = 1e-5;
        let mut max_rel = 0.0f64;
        let mut check = |analytic: f64, mut reeval: Box<dyn FnMut(f64) -> f64>| {
            let up = reeval(eps);
            let down = reeval(-eps);
            let fd = (up - down) / (2.0 * eps);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        };

        // parameter gradients
        for mi in 0..8 {
            for idx in 0..(k * k) {
                let analytic = res.params.mats()[mi].data()[idx];
                let p0 = p.clone();
                let inputs0 = inputs.clone();
                let (w0, wh0, wc0, init0) = (w.clone(), wh.clone(), wc.clone(), initial.clone());
                check(
                    analytic,
                    Box::new(move |delta| {
                        let mut pp = p0.clone();
                        pp.mats_mut()[mi].data_mut()[idx] += delta;
                        let caches = lstm_forward(&pp, &inputs0, &init0);
                        weighted_loss(&caches, &w0, &wh0, &wc0)
                    }),
                );
            }
        }
        // input gradients
        for t0 in 0..t {
            for j in 0..k {
                let analytic = res.inputs[t0].0[j];
                let p0 = p.clone();
                let inputs0 = inputs.clone();
                let (w0, wh0, wc0, init0) = (w.clone(), wh.clone(), wc.clone(), initial.clone());
                check(
                    analytic,
                    Box::new(move |delta| {
                        let mut xs = inputs0.clone();
                        xs[t0].0[j] += delta;
                        let caches = lstm_forward(&p0, &xs, &init0);
                        weighted_loss(&caches, &w0, &wh0, &wc0)
                    }),
                );
            }
        }
        // initial-state gradients
        for (which, j) in [(0, 0), (0, k - 1), (1, 0), (1, k - 1)] {
            let analytic = if which == 0 {
                res.initial.h.0[j]
            } else {
                res.initial.c.0[j]
            };
            let p0 = p.clone();
            let inputs0 = inputs.clone();
            let (w0, wh0, wc0, init0) = (w.clone(), wh.clone(), wc.clone(), initial.clone());
            check(
                analytic,
                Box::new(move |delta| {
                    let mut init = init0.clone();
                    if which == 0 {
                        init.h.0[j] += delta;
                    } else {
                        init.c.0[j] += delta;
                    }
                    let caches = lstm_forward(&p0, &inputs0, &init);
                    weighted_loss(&caches, &w0, &wh0, &wc0)
                }),
            );
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences_single_step() {
        let rel = fd_check(4, 1, 21);
        assert!(rel < 1e-5, "max relative error {rel}");
    }

    #[test]
    fn gradients_match_finite_differences_sequence() {
        for seed in [1, 2, 3] {
            let rel = fd_check(8, 5, seed);
            assert!(rel < 1e-4, "seed {seed}: max relative error {rel}");
        }
    }

    #[test]
    fn truncated_backward_equals_prefix() {
        let mut rng = Rng::new(33);
        let k = 4;
        let p = LstmParams::init(&mut rng, k, 0.4);
        let inputs: Vec<Vector> = (0..6).map(|_| init_vector(&mut rng, k, 1.0)).collect();
        let w: Vec<Vector> = (0..3).map(|_| init_vector(&mut rng, k, 1.0)).collect();
        let initial = LstmState::zeros(k);

        let full_caches = lstm_forward(&p, &inputs, &initial);
        let mut grads_full = w.clone();
        grads_full.extend(vec![Vector::zeros(k); 3]);
        let full = lstm_backward(
            &p,
            &full_caches,
            &initial,
            &grads_full,
            &Vector::zeros(k),
            &Vector::zeros(k),
        );

        let prefix_caches = lstm_forward(&p, &inputs[..3], &initial);
        let prefix = lstm_backward(
            &p,
            &prefix_caches,
            &initial,
            &w,
            &Vector::zeros(k),
            &Vector::zeros(k),
        );

        for (a, b) in full.params.mats().into_iter().zip(prefix.params.mats()) {
            assert_eq!(a.data(), b.data());
        }
        for t in 0..3 {
            assert_eq!(full.inputs[t].0, prefix.inputs[t].0);
        }
    }
}
