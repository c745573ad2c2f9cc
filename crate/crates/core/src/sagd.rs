//! Stochastic average gradient descent over minibatches.
//!
//! Each minibatch keeps the gradient from its most recent visit. The step
//! follows the running sum of those stored gradients, scaled by `ε/(K·L)`,
//! and the iterate is then clamped to be non-negative.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::math::{stream_rng, streams};

/// Iterations between Lipschitz line searches.
pub const LINE_SEARCH_EVERY: u64 = 20;
/// Upper bound on doublings within one line search.
pub const MAX_DOUBLINGS: usize = 60;

/// Per-iteration decay factor applied to `L` between line searches.
pub fn lipschitz_decay() -> f64 {
    2f64.powf(-1.0 / 150.0)
}

/// Image indices belonging to one minibatch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Minibatch {
    pub indices: Vec<usize>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Splits `0..k` into `ceil(k / batch_size)` shuffled batches whose sizes
/// differ by at most one.
pub fn partition_minibatches(k: usize, batch_size: usize, seed: u64) -> Result<Vec<Minibatch>> {
    if k == 0 {
        return Err(Error::InvalidArgument("cannot partition an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut stream_rng(seed, streams::BATCH_ORDER, u64::MAX, 0));
    let count = k.div_ceil(batch_size);
    let base = k / count;
    let extra = k % count;
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for b in 0..count {
        let len = base + usize::from(b < extra);
        let mut indices = order[start..start + len].to_vec();
        indices.sort_unstable();
        out.push(Minibatch { indices });
        start += len;
    }
    Ok(out)
}

/// Order in which batches are visited during epoch `epoch`.
pub fn epoch_order(batch_count: usize, epoch: u64, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..batch_count).collect();
    order.shuffle(&mut stream_rng(seed, streams::BATCH_ORDER, epoch, 1));
    order
}

/// Step-size multiplier `max(1/16, 2^{1−⌊τ/150⌋})`.
pub fn epsilon_schedule(tau: u64) -> f64 {
    let e = (tau / 150).min(64) as i32;
    (2f64.powi(1 - e)).max(1.0 / 16.0)
}

/// Optimizer state for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SagdState {
    pub v: Vec<f64>,
    pub grad_memory: Vec<Vec<f64>>,
    pub running_sum: Vec<f64>,
    pub lipschitz: f64,
    pub tau: u64,
}

impl SagdState {
    pub fn new(v: Vec<f64>, batch_count: usize, lipschitz: f64) -> Result<Self> {
        if batch_count == 0 {
            return Err(Error::InvalidArgument("need at least one batch".into()));
        }
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::InvalidArgument(format!("L must be positive, got {lipschitz}")));
        }
        let n = v.len();
        Ok(Self {
            v,
            grad_memory: vec![vec![0.0; n]; batch_count],
            running_sum: vec![0.0; n],
            lipschitz,
            tau: 0,
        })
    }

    pub fn batch_count(&self) -> usize {
        self.grad_memory.len()
    }

    /// Largest relative gap between the running sum and a fresh sum of the
    /// stored gradients.
    pub fn running_sum_drift(&self) -> f64 {
        let fresh = self.recomputed_sum();
        let scale = fresh.iter().map(|x| x.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        fresh
            .iter()
            .zip(&self.running_sum)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale
    }

    fn recomputed_sum(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.v.len()];
        for g in &self.grad_memory {
            s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        s
    }

    /// Replaces the running sum by the exact sum of stored gradients and
    /// returns the drift that was removed.
    pub fn resync(&mut self) -> f64 {
        let drift = self.running_sum_drift();
        self.running_sum = self.recomputed_sum();
        if drift > 0.0 {
            log::debug!("running sum resynced at tau={} (drift {drift:e})", self.tau);
        }
        drift
    }

    /// Direction of the next step: stored-gradient sum with batch `k`
    /// refreshed to `batch_grad`, plus the prior gradient.
    pub fn step_direction(&self, k: usize, batch_grad: &[f64], prior_grad: &[f64]) -> Vec<f64> {
        let mem = &self.grad_memory[k];
        (0..self.v.len())
            .map(|i| (self.running_sum[i] - mem[i] + batch_grad[i]) + prior_grad[i])
            .collect()
    }
}

fn check_finite(name: &str, g: &[f64]) -> Result<()> {
    if let Some((i, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numerical(format!("{name} has non-finite entry {v} at index {i}")));
    }
    Ok(())
}

/// One SAG update with batch `k`:
/// `ĝ ← ĝ − dV_k + g`, `dV_k ← g`, `V ← max(0, V − ε/(K·L)·(ĝ + ∇))`.
pub fn sagd_step(state: &mut SagdState, k: usize, batch_grad: &[f64], prior_grad: &[f64], epsilon: f64) -> Result<()> {
    let n = state.v.len();
    if k >= state.batch_count() {
        return Err(Error::InvalidArgument(format!("batch {k} out of range")));
    }
    if batch_grad.len() != n || prior_grad.len() != n {
        return Err(Error::InvalidArgument("gradient length does not match the iterate".into()));
    }
    if !(state.lipschitz > 0.0) {
        return Err(Error::Numerical(format!("L must be positive, got {}", state.lipschitz)));
    }
    check_finite("batch gradient", batch_grad)?;
    check_finite("prior gradient", prior_grad)?;
    let step = epsilon / (state.batch_count() as f64 * state.lipschitz);
    let mem = &mut state.grad_memory[k];
    for i in 0..n {
        state.running_sum[i] = (state.running_sum[i] - mem[i]) + batch_grad[i];
        mem[i] = batch_grad[i];
        let v = state.v[i] - step * (state.running_sum[i] + prior_grad[i]);
        state.v[i] = v.max(0.0);
    }
    state.tau += 1;
    Ok(())
}

/// Doubles `L` until `f(V) − f(V − dV/L) ≥ ‖dV‖²/(2L)`.
pub fn lipschitz_line_search<F>(mut f: F, v: &[f64], dv: &[f64], lipschitz: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let norm2: f64 = dv.iter().map(|x| x * x).sum();
    if norm2 == 0.0 {
        return Ok(lipschitz);
    }
    let f0 = f(v)?;
    if !f0.is_finite() {
        return Err(Error::Numerical(format!("objective is {f0} at the current iterate")));
    }
    let mut l = lipschitz;
    let mut trial = vec![0.0; v.len()];
    for _ in 0..=MAX_DOUBLINGS {
        for ((t, a), d) in trial.iter_mut().zip(v).zip(dv) {
            *t = a - d / l;
        }
        let f1 = f(&trial)?;
        if f1.is_finite() && f0 - f1 >= norm2 / (2.0 * l) {
            return Ok(l);
        }
        l *= 2.0;
    }
    Err(Error::Numerical(format!(
        "line search did not satisfy the Lipschitz condition after {MAX_DOUBLINGS} doublings; gradient and objective disagree"
    )))
}

/// First estimate of `L`: halves `l0` while the Lipschitz test still holds,
/// or doubles it until it does, and returns the smallest passing value.
pub fn calibrate_lipschitz<F>(mut f: F, v: &[f64], dv: &[f64], l0: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let norm2: f64 = dv.iter().map(|x| x * x).sum();
    if norm2 == 0.0 {
        return Ok(l0);
    }
    let f0 = f(v)?;
    let mut trial = vec![0.0; v.len()];
    let mut passes = |l: f64, f: &mut F| -> Result<bool> {
        for ((t, a), d) in trial.iter_mut().zip(v).zip(dv) {
            *t = a - d / l;
        }
        let f1 = f(&trial)?;
        Ok(f1.is_finite() && f0 - f1 >= norm2 / (2.0 * l))
    };
    if passes(l0, &mut f)? {
        let mut l = l0;
        for _ in 0..MAX_DOUBLINGS {
            if !passes(l / 2.0, &mut f)? {
                break;
            }
            l /= 2.0;
        }
        Ok(l)
    } else {
        lipschitz_line_search(f, v, dv, 2.0 * l0)
    }
}

/// Staircase schedule for the band limit driven by held-out error plateaus.
#[derive(Clone, Debug, PartialEq)]
pub struct RhoSchedule {
    pub rho: f64,
    pub rho_max: f64,
    pub window: u64,
    pub tolerance: f64,
    history: Vec<(u64, f64)>,
}

/// Outcome of feeding a held-out error to [`RhoSchedule::observe`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RhoEvent {
    Continue,
    Increase(f64),
    Converged,
}

impl RhoSchedule {
    pub fn new(rho_min: f64, rho_max: f64, nyquist: f64) -> Result<Self> {
        if !(rho_min > 0.0 && rho_min <= rho_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < rho_min <= rho_max, got {rho_min} and {rho_max}"
            )));
        }
        if rho_max > nyquist * (1.0 + 1e-12) {
            return Err(Error::AboveNyquist { rho: rho_max, nyquist });
        }
        Ok(Self {
            rho: rho_min,
            rho_max,
            window: 100,
            tolerance: 0.005,
            history: Vec::new(),
        })
    }

    pub fn with_window(mut self, window: u64, tolerance: f64) -> Self {
        self.window = window;
        self.tolerance = tolerance;
        self
    }

    pub fn history(&self) -> &[(u64, f64)] {
        &self.history
    }

    pub fn restore_history(&mut self, history: Vec<(u64, f64)>) {
        self.history = history;
    }

    /// True when the error improved by less than the tolerance relative to
    /// the latest record at least one window old.
    pub fn plateaued(&self) -> bool {
        let Some(&(tau, err)) = self.history.last() else {
            return false;
        };
        let old = self
            .history
            .iter()
            .rev()
            .find(|(t, _)| tau >= t + self.window)
            .map(|&(_, e)| e);
        match old {
            Some(e0) => (e0 - err) < self.tolerance * e0.abs(),
            None => false,
        }
    }

    /// Records the held-out error at iteration `tau` and decides whether the
    /// band limit should grow.
    pub fn observe(&mut self, tau: u64, error: f64) -> RhoEvent {
        self.history.push((tau, error));
        if !self.plateaued() {
            return RhoEvent::Continue;
        }
        if self.rho >= self.rho_max {
            return RhoEvent::Converged;
        }
        self.rho = (2.0 * self.rho).min(self.rho_max);
        self.history.clear();
        RhoEvent::Increase(self.rho)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn epsilon_values() {
        assert_eq!(epsilon_schedule(0), 2.0);
        assert_eq!(epsilon_schedule(149), 2.0);
        assert_eq!(epsilon_schedule(150), 1.0);
        assert_eq!(epsilon_schedule(10_000), 1.0 / 16.0);
        assert_eq!(epsilon_schedule(u64::MAX), 1.0 / 16.0);
    }

    #[test]
    fn partition_sizes() {
        let b = partition_minibatches(400, 200, 1).unwrap();
        assert_eq!(b.iter().map(Minibatch::len).collect::<Vec<_>>(), vec![200, 200]);
        let b = partition_minibatches(401, 200, 1).unwrap();
        assert_eq!(b.iter().map(Minibatch::len).collect::<Vec<_>>(), vec![134, 134, 133]);
        assert!(partition_minibatches(0, 200, 1).is_err());
        assert!(partition_minibatches(10, 0, 1).is_err());
        assert_eq!(partition_minibatches(401, 200, 9).unwrap(), partition_minibatches(401, 200, 9).unwrap());
    }

    #[test]
    fn fixed_point_when_everything_is_zero() {
        let v0 = vec![0.5, 1.0, 0.0];
        let mut s = SagdState::new(v0.clone(), 3, 1.0).unwrap();
        sagd_step(&mut s, 1, &[0.0; 3], &[0.0; 3], 2.0).unwrap();
        assert_eq!(s.v, v0);
    }

    #[test]
    fn single_batch_is_projected_gradient_descent() {
        let mut s = SagdState::new(vec![1.0, 0.2], 1, 4.0).unwrap();
        sagd_step(&mut s, 0, &[2.0, 4.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(s.v, vec![1.0 - 0.5, 0.0]);
        sagd_step(&mut s, 0, &[-2.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(s.v, vec![1.0, 0.0]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = SagdState::new(vec![1.0], 1, 1.0).unwrap();
        let e = sagd_step(&mut s, 0, &[f64::NAN], &[0.0], 1.0).unwrap_err();
        assert!(e.is_numerical());
    }

    #[test]
    fn line_search_quadratic() {
        for a in [0.3, 1.0, 7.5] {
            let f = |x: &[f64]| Ok(a * x[0] * x[0]);
            let x = [1.3];
            let l = lipschitz_line_search(f, &x, &[2.0 * a * x[0]], 0.01).unwrap();
            assert!(l >= 2.0 * a * 0.5 && l <= 2.0 * 2.0 * a, "a={a} L={l}");
            // already satisfied
            let l2 = lipschitz_line_search(f, &x, &[2.0 * a * x[0]], 4.0 * a).unwrap();
            assert_eq!(l2, 4.0 * a);
        }
    }

    #[test]
    fn calibration_brackets_the_constant() {
        for (a, l0) in [(0.3, 1e3), (5.0, 1e-4), (1.0, 2.0)] {
            let f = |x: &[f64]| Ok(a * x[0] * x[0]);
            let x = [0.7];
            let l = calibrate_lipschitz(f, &x, &[2.0 * a * x[0]], l0).unwrap();
            assert!(l >= a && l <= 4.0 * a, "a={a} l0={l0} L={l}");
        }
    }

    #[test]
    fn line_search_gives_up_on_inconsistent_gradient() {
        // descent along +x on an increasing function never satisfies the test
        let f = |x: &[f64]| Ok(x[0]);
        let e = lipschitz_line_search(f, &[0.0], &[-1.0], 1.0).unwrap_err();
        assert!(e.is_numerical());
    }

    #[test]
    fn decay_factor() {
        let d = lipschitz_decay();
        assert!((d.powi(150) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn memory_refreshed_once_per_epoch() {
        let batches = 5;
        let mut s = SagdState::new(vec![1.0; 4], batches, 1.0).unwrap();
        for epoch in 0..3u64 {
            let order = epoch_order(batches, epoch, 11);
            let mut seen = vec![0; batches];
            for &k in &order {
                let g = vec![(epoch * 10 + k as u64) as f64; 4];
                sagd_step(&mut s, k, &g, &[0.0; 4], 1e-3).unwrap();
                seen[k] += 1;
            }
            assert!(seen.iter().all(|&c| c == 1));
            for k in 0..batches {
                assert_eq!(s.grad_memory[k][0], (epoch * 10 + k as u64) as f64);
            }
        }
    }

    #[test]
    fn running_sum_drift_stays_small() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 50;
        let mut s = SagdState::new(vec![1.0; n], 7, 1e6).unwrap();
        for t in 0..1000 {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
            sagd_step(&mut s, t % 7, &g, &vec![0.0; n], 1.0).unwrap();
            if t % 100 == 99 {
                assert!(s.resync() < 1e-6);
            }
        }
        assert!(s.running_sum_drift() < 1e-6);
    }

    #[test]
    fn rho_staircase() {
        let mut r = RhoSchedule::new(0.05, 0.2, 0.25).unwrap().with_window(10, 0.005);
        // steady improvement never triggers
        for t in 0..50 {
            assert_eq!(r.observe(t, 10.0 - 0.1 * t as f64), RhoEvent::Continue);
        }
        assert_eq!(r.rho, 0.05);
        let mut events = Vec::new();
        for t in 50..200 {
            match r.observe(t, 5.0) {
                RhoEvent::Continue => {}
                e => events.push((t, e)),
            }
        }
        assert_eq!(events[0], (60, RhoEvent::Increase(0.1)));
        assert_eq!(events[1], (71, RhoEvent::Increase(0.2)));
        assert_eq!(events[2], (82, RhoEvent::Converged));
        assert!(RhoSchedule::new(0.1, 0.3, 0.25).is_err());
    }

    #[test]
    fn paper_band_limits_as_fraction_of_nyquist() {
        let nyquist: f64 = 1.0 / (2.0 * 2.8);
        assert!(((1.0 / 40.0) / nyquist - 0.14).abs() < 1e-12);
        assert!(((1.0 / 10.0) / nyquist - 0.56).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn partition_covers_every_index_once(k in 1usize..600, size in 1usize..250, seed in 0u64..100) {
            let b = partition_minibatches(k, size, seed).unwrap();
            let mut all: Vec<usize> = b.iter().flat_map(|m| m.indices.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..k).collect::<Vec<_>>());
            let max = b.iter().map(Minibatch::len).max().unwrap();
            let min = b.iter().map(Minibatch::len).min().unwrap();
            prop_assert!(max - min <= 1);
            prop_assert!(max <= size);
        }

        #[test]
        fn iterate_stays_non_negative(g in proptest::collection::vec(-10.0f64..10.0, 8), eps in 0.01f64..4.0) {
            let mut s = SagdState::new(vec![0.3; 8], 2, 0.5).unwrap();
            sagd_step(&mut s, 1, &g, &[0.0; 8], eps).unwrap();
            prop_assert!(s.v.iter().all(|&v| v >= 0.0));
        }
    }
}
