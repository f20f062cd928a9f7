//! Attention-gated mean-field CRF fusion of graph and convolution features.
//!
//! One mean-field iteration, in order:
//!
//! 1. `A_hat = H_c * (K conv H_g)`
//! 2. `A_bar = sigmoid(-A_hat)`
//! 3. `H_g   = K conv H_g`
//! 4. `Hbar_c = A_bar * H_g`
//! 5. `H_c   = X_c + Hbar_c`
//!
//! `K` is a single shape-preserving 3D kernel shared by all iterations. `*` is
//! the elementwise product, so attention is per voxel and per channel. Every
//! feature map is `[1, C, D, H, W]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{conv3d, ConvKernel};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Mean-field iterations used unless configured otherwise.
pub const DEFAULT_ITERATIONS: usize = 5;
/// Kernel size of the pairwise message-passing convolution.
pub const DEFAULT_KERNEL_SIZE: usize = 3;

/// Upper bound on the operator norm of a zero-padded convolution with
/// `[O, I, k, k, k]` weights: the sum over taps of each tap's Frobenius
/// norm. Each tap is a shift (norm at most 1) times an `O x I` matrix.
pub fn gain_bound(w: &Tensor) -> f64 {
    tap_norms(w).iter().sum()
}

fn tap_norms(w: &Tensor) -> Vec<f64> {
    let s = w.shape();
    let taps: usize = s[2..].iter().product();
    let mut n = vec![0.0; taps];
    for (i, v) in w.data().iter().enumerate() {
        n[i % taps] += v * v;
    }
    n.iter_mut().for_each(|x| *x = x.sqrt());
    n
}

/// Rescales `w` so that its gain bound does not exceed `bound`; kernels
/// already inside the bound are returned unchanged. A bound below 1 makes
/// the repeated message convolution a contraction.
pub fn bound_kernel(w: &Tensor, bound: f64) -> Tensor {
    let b = gain_bound(w);
    if b <= bound {
        w.clone()
    } else {
        w.map(|v| v * bound / b).expect("same shape")
    }
}

/// Gradient of `bound_kernel` pulled back from `g`.
pub(crate) fn bound_kernel_grad(w: &Tensor, bound: f64, g: &[f64]) -> Vec<f64> {
    let norms = tap_norms(w);
    let b: f64 = norms.iter().sum();
    if b <= bound {
        return g.to_vec();
    }
    let taps = norms.len();
    let r = bound / b;
    let gw: f64 = g.iter().zip(w.data()).map(|(x, y)| x * y).sum();
    w.data()
        .iter()
        .zip(g)
        .enumerate()
        .map(|(i, (&v, &gi))| {
            let n = norms[i % taps];
            let db = if n > 0.0 { v / n } else { 0.0 };
            r * gi - r / b * gw * db
        })
        .collect()
}

/// Iteration count and the pairwise kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfConfig {
    iterations: usize,
    kernel: ConvKernel,
}

impl CrfConfig {
    pub fn new(iterations: usize, kernel: ConvKernel) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Config("CRF needs at least one mean-field iteration".into()));
        }
        if !kernel.is_shape_preserving() {
            return Err(Error::Config(format!(
                "CRF kernel must be shape-preserving (stride 1, pad (k-1)/2); got k={} stride={} pad={}",
                kernel.size(),
                kernel.stride(),
                kernel.padding()
            )));
        }
        if kernel.in_channels() != kernel.out_channels() {
            return Err(Error::dim("crf", "kernel channels", kernel.in_channels(), kernel.out_channels()));
        }
        if kernel.bias().is_some() {
            return Err(Error::Config("CRF pairwise kernel carries no bias".into()));
        }
        Ok(CrfConfig { iterations, kernel })
    }

    /// Stride-1, zero-bias kernel over `[C, C, k, k, k]` weights.
    pub fn from_weights(iterations: usize, weights: Tensor) -> Result<Self> {
        Self::new(iterations, ConvKernel::same(weights, None)?)
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn kernel(&self) -> &ConvKernel {
        &self.kernel
    }

    pub fn with_iterations(&self, iterations: usize) -> Result<Self> {
        Self::new(iterations, self.kernel.clone())
    }
}

/// Hidden graph features, hidden convolution features and attention.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfState {
    pub h_g: Tensor,
    pub h_c: Tensor,
    pub attention: Tensor,
    pub iteration: usize,
}

/// Energy terms of a state; `total` is their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub unary_g: f64,
    pub unary_c: f64,
    pub pairwise: f64,
    pub total: f64,
}

/// Result of running the full mean-field loop.
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    /// Final `H_c`.
    pub fused: Tensor,
    pub final_state: CrfState,
    /// Energy after each iteration.
    pub trajectory: Vec<EnergyReport>,
    /// Free energy after each iteration.
    pub free_energy: Vec<f64>,
    /// `||H_c(t) - H_c(t-1)||` for each iteration, with `H_c(0) = X_c`.
    pub deltas: Vec<f64>,
}

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, "shape", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    if a.rank() != 5 {
        return Err(Error::dim(op, "rank", 5, a.rank()));
    }
    Ok(())
}

pub fn init_state(x_c: &Tensor, x_g: &Tensor) -> Result<CrfState> {
    check_pair("crf init", x_c, x_g)?;
    Ok(CrfState {
        h_g: x_g.clone(),
        h_c: x_c.clone(),
        attention: Tensor::full(x_c.shape(), 0.5)?,
        iteration: 0,
    })
}

/// Gaussian unary potential `-sum_n 0.5 * ||h_n - x_n||^2`.
pub fn unary_energy(h: &Tensor, x: &Tensor) -> Result<f64> {
    Ok(-0.5 * h.sub(x)?.sum_squares())
}

/// `sum_n h_c(n) . sum_m K(n, m) a(m) h_g(m)`: the graph message is gated by
/// the attention at the sending voxel, then contracted with `h_c`.
pub fn pairwise_energy(state: &CrfState, kernel: &ConvKernel) -> Result<f64> {
    check_pair("pairwise_energy", &state.h_c, &state.h_g)?;
    check_pair("pairwise_energy", &state.h_c, &state.attention)?;
    let msg = conv3d(&state.attention.mul(&state.h_g)?, kernel)?;
    check_pair("pairwise_energy", &state.h_c, &msg)?;
    Ok(state.h_c.data().iter().zip(msg.data()).map(|(h, m)| h * m).sum())
}

pub fn energy(state: &CrfState, x_c: &Tensor, x_g: &Tensor, kernel: &ConvKernel) -> Result<EnergyReport> {
    let unary_g = unary_energy(&state.h_g, x_g)?;
    let unary_c = unary_energy(&state.h_c, x_c)?;
    let pairwise = pairwise_energy(state, kernel)?;
    Ok(EnergyReport {
        unary_g,
        unary_c,
        pairwise,
        total: unary_g + unary_c + pairwise,
    })
}

/// Clamp applied to attention before taking logarithms.
pub const ENTROPY_EPS: f64 = 1e-12;

/// `sum [a ln a + (1 - a) ln(1 - a)]` over all attention entries.
pub fn attention_neg_entropy(attention: &Tensor) -> f64 {
    attention
        .data()
        .iter()
        .map(|&a| {
            let a = a.clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS);
            a * a.ln() + (1.0 - a) * (1.0 - a).ln()
        })
        .sum()
}

/// Free energy at the mean-field point estimates: the energy of the current
/// means plus the Bernoulli attention term. The Gaussian latents have fixed
/// unit variance, so their entropy is a constant and is left out.
pub fn free_energy(state: &CrfState, x_c: &Tensor, x_g: &Tensor, kernel: &ConvKernel) -> Result<f64> {
    Ok(energy(state, x_c, x_g, kernel)?.total + attention_neg_entropy(&state.attention))
}

/// Tape handles of one mean-field iteration.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub h_g: Var,
    pub h_c: Var,
    pub attention: Var,
}

/// One iteration recorded on `tape`.
pub fn mf_step_on(tape: &mut Tape, h_g: Var, h_c: Var, x_c: Var, kernel: Var) -> Result<StepVars> {
    let pad = tape.shape(kernel).get(2).copied().unwrap_or(1) / 2;
    let msg = tape.conv3d(h_g, kernel, None, 1, pad)?;
    let a_hat = tape.mul(h_c, msg)?;
    let neg = tape.scale(a_hat, -1.0)?;
    let attention = tape.sigmoid(neg)?;
    let h_g = msg;
    let h_bar = tape.mul(attention, h_g)?;
    let h_c = tape.add(x_c, h_bar)?;
    Ok(StepVars { h_g, h_c, attention })
}

/// The whole loop on `tape`; returns every iteration's handles.
pub fn fuse_on(tape: &mut Tape, x_c: Var, x_g: Var, kernel: Var, iterations: usize) -> Result<Vec<StepVars>> {
    if iterations == 0 {
        return Err(Error::Config("CRF needs at least one mean-field iteration".into()));
    }
    if tape.shape(x_c) != tape.shape(x_g) {
        return Err(Error::dim(
            "crf fuse",
            "shape",
            format!("{:?}", tape.shape(x_c)),
            format!("{:?}", tape.shape(x_g)),
        ));
    }
    let mut steps = Vec::with_capacity(iterations);
    let (mut h_g, mut h_c) = (x_g, x_c);
    for _ in 0..iterations {
        let s = mf_step_on(tape, h_g, h_c, x_c, kernel)?;
        (h_g, h_c) = (s.h_g, s.h_c);
        steps.push(s);
    }
    Ok(steps)
}

/// Advances `state` by one iteration.
pub fn mf_step(state: &CrfState, x_c: &Tensor, x_g: &Tensor, config: &CrfConfig) -> Result<CrfState> {
    if state.iteration >= config.iterations {
        return Err(Error::Contract(format!(
            "mean-field step {} exceeds configured {} iterations",
            state.iteration + 1,
            config.iterations
        )));
    }
    check_pair("mf_step", x_c, x_g)?;
    check_pair("mf_step", x_c, &state.h_c)?;
    check_pair("mf_step", x_c, &state.h_g)?;
    let mut tape = Tape::new();
    let h_g = tape.constant(state.h_g.clone());
    let h_c = tape.constant(state.h_c.clone());
    let xc = tape.constant(x_c.clone());
    let k = tape.constant(config.kernel.weights().clone());
    let s = mf_step_on(&mut tape, h_g, h_c, xc, k)?;
    Ok(CrfState {
        h_g: tape.value(s.h_g).clone(),
        h_c: tape.value(s.h_c).clone(),
        attention: tape.value(s.attention).clone(),
        iteration: state.iteration + 1,
    })
}

/// Runs `config.iterations` steps from [`init_state`], recording diagnostics.
pub fn fuse(x_c: &Tensor, x_g: &Tensor, config: &CrfConfig) -> Result<Fusion> {
    let mut state = init_state(x_c, x_g)?;
    let mut trajectory = Vec::with_capacity(config.iterations);
    let mut free = Vec::with_capacity(config.iterations);
    let mut deltas = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let next = mf_step(&state, x_c, x_g, config)?;
        deltas.push(next.h_c.sub(&state.h_c)?.norm());
        trajectory.push(energy(&next, x_c, x_g, &config.kernel)?);
        free.push(free_energy(&next, x_c, x_g, &config.kernel)?);
        state = next;
    }
    Ok(Fusion {
        fused: state.h_c.clone(),
        final_state: state,
        trajectory,
        free_energy: free,
        deltas,
    })
}

/// One Jacobi sweep of the closed-form marginal updates:
///
/// ```text
/// a'   = sigmoid(-h_c * (K conv (a * h_g)))
/// h_g' = x_g + a' * (K conv h_c)
/// h_c' = x_c + K conv (a * h_g)
/// ```
///
/// `fuse` does not use this; it exists to compare the derived updates
/// against the convolutional loop.
pub fn equation_form_step(state: &CrfState, x_c: &Tensor, x_g: &Tensor, kernel: &ConvKernel) -> Result<CrfState> {
    check_pair("equation_form_step", x_c, x_g)?;
    let gated = state.attention.mul(&state.h_g)?;
    let msg_g = conv3d(&gated, kernel)?;
    let attention = state.h_c.mul(&msg_g)?.map(|v| crate::ops::nn::sigmoid_scalar(-v))?;
    let msg_c = conv3d(&state.h_c, kernel)?;
    let h_g = x_g.add(&attention.mul(&msg_c)?)?;
    let h_c = x_c.add(&msg_g)?;
    Ok(CrfState {
        h_g,
        h_c,
        attention,
        iteration: state.iteration + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn zero_config(c: usize, iterations: usize) -> CrfConfig {
        CrfConfig::from_weights(iterations, Tensor::zeros(&[c, c, 3, 3, 3]).unwrap()).unwrap()
    }

    #[test]
    fn unary_cases() {
        let x = Tensor::from_fn(&[1, 2, 2, 2, 2], |i| i as f64).unwrap();
        assert_eq!(unary_energy(&x, &x).unwrap(), 0.0);
        let h = x.map(|v| v + 1.0).unwrap();
        assert_eq!(unary_energy(&h, &x).unwrap(), -8.0);
    }

    #[test]
    fn pairwise_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x_c = random(&[1, 2, 3, 3, 3], &mut rng);
        let x_g = random(&[1, 2, 3, 3, 3], &mut rng);
        let s = init_state(&x_c, &x_g).unwrap();
        assert_eq!(pairwise_energy(&s, zero_config(2, 1).kernel()).unwrap(), 0.0);
        let mut s0 = s.clone();
        s0.attention = Tensor::zeros(s.attention.shape()).unwrap();
        let k = ConvKernel::same(random(&[2, 2, 3, 3, 3], &mut rng), None).unwrap();
        assert_eq!(pairwise_energy(&s0, &k).unwrap(), 0.0);
    }

    #[test]
    fn zero_kernel_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x_c = random(&[1, 2, 3, 4, 2], &mut rng);
        let x_g = random(&[1, 2, 3, 4, 2], &mut rng);
        let cfg = zero_config(2, 1);
        let s = mf_step(&init_state(&x_c, &x_g).unwrap(), &x_c, &x_g, &cfg).unwrap();
        assert_eq!(s.h_c, x_c);
        assert!(s.attention.data().iter().all(|&a| a == 0.5));
        assert!(s.h_g.data().iter().all(|&a| a == 0.0));
        assert_eq!(s.iteration, 1);
        assert!(matches!(mf_step(&s, &x_c, &x_g, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_inputs_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::zeros(&[1, 2, 3, 3, 3]).unwrap();
        let cfg = CrfConfig::from_weights(3, random(&[2, 2, 3, 3, 3], &mut rng)).unwrap();
        let f = fuse(&z, &z, &cfg).unwrap();
        assert!(f.fused.data().iter().all(|&v| v == 0.0));
        assert!(f.final_state.attention.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn init_state_copies_and_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x_c = random(&[1, 1, 2, 2, 2], &mut rng);
        let x_g = random(&[1, 1, 2, 2, 2], &mut rng);
        let a = init_state(&x_c, &x_g).unwrap();
        assert_eq!(a, init_state(&x_c, &x_g).unwrap());
        assert_eq!((&a.h_c, &a.h_g, a.iteration), (&x_c, &x_g, 0));
        assert!(a.attention.data().iter().all(|&v| v == 0.5));
        assert!(init_state(&x_c, &random(&[1, 1, 2, 2, 3], &mut rng)).is_err());
    }

    #[test]
    fn fuse_is_state_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x_c = random(&[1, 2, 4, 3, 3], &mut rng);
        let x_g = random(&[1, 2, 4, 3, 3], &mut rng);
        let w = random(&[2, 2, 3, 3, 3], &mut rng).scale(0.1).unwrap();
        let seven = fuse(&x_c, &x_g, &CrfConfig::from_weights(7, w.clone()).unwrap()).unwrap();
        let cfg7 = CrfConfig::from_weights(7, w).unwrap();
        let mut s = init_state(&x_c, &x_g).unwrap();
        for _ in 0..5 {
            s = mf_step(&s, &x_c, &x_g, &cfg7).unwrap();
        }
        for _ in 0..2 {
            s = mf_step(&s, &x_c, &x_g, &cfg7).unwrap();
        }
        assert_eq!(s.h_c, seven.fused);
        assert_eq!(seven.deltas.len(), 7);
        assert_eq!(seven.trajectory.len(), 7);
    }

    #[test]
    fn free_energy_reduces_to_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(&[1, 1, 2, 3, 2], &mut rng);
        let s = init_state(&x, &x).unwrap();
        let fe = free_energy(&s, &x, &x, zero_config(1, 1).kernel()).unwrap();
        assert!((fe + 12.0 * 2f64.ln()).abs() < 1e-12);
        let mut hard = s.clone();
        hard.attention = Tensor::ones(s.attention.shape()).unwrap();
        assert!(free_energy(&hard, &x, &x, zero_config(1, 1).kernel()).unwrap().is_finite());
    }

    #[test]
    fn energy_report_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x_c = random(&[1, 2, 3, 3, 3], &mut rng);
        let x_g = random(&[1, 2, 3, 3, 3], &mut rng);
        let cfg = CrfConfig::from_weights(2, random(&[2, 2, 3, 3, 3], &mut rng)).unwrap();
        let f = fuse(&x_c, &x_g, &cfg).unwrap();
        for e in f.trajectory {
            assert!((e.total - (e.unary_g + e.unary_c + e.pairwise)).abs() < 1e-12);
        }
    }

    #[test]
    fn equation_form_agrees_when_attention_is_uniform() {
        // With X_c = 0 the first attention is exactly 0.5 in both routes,
        // so the H_c updates coincide.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x_c = Tensor::zeros(&[1, 2, 3, 4, 3]).unwrap();
        let x_g = random(&[1, 2, 3, 4, 3], &mut rng);
        let cfg = CrfConfig::from_weights(1, random(&[2, 2, 3, 3, 3], &mut rng)).unwrap();
        let s0 = init_state(&x_c, &x_g).unwrap();
        let alg = mf_step(&s0, &x_c, &x_g, &cfg).unwrap();
        let eq = equation_form_step(&s0, &x_c, &x_g, cfg.kernel()).unwrap();
        assert!(alg.h_c.max_abs_diff(&eq.h_c).unwrap() < 1e-12);
        assert_eq!(alg.attention, eq.attention);
        // The graph update differs: the loop convolves H_g, the closed form
        // re-anchors it on X_g.
        assert_eq!(eq.h_g, x_g);
        assert!(alg.h_g.max_abs_diff(&x_g).unwrap() > 1e-3);
    }

    #[test]
    fn config_validation() {
        assert!(CrfConfig::from_weights(0, Tensor::zeros(&[1, 1, 3, 3, 3]).unwrap()).is_err());
        let k = ConvKernel::new(Tensor::zeros(&[1, 1, 3, 3, 3]).unwrap(), None, 1, 0).unwrap();
        assert!(CrfConfig::new(1, k).is_err());
        assert!(CrfConfig::from_weights(1, Tensor::zeros(&[2, 1, 3, 3, 3]).unwrap()).is_err());
    }
}
