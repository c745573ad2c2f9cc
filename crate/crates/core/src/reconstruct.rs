//! The reconstruction loop: SAGD over minibatches with importance-sampled
//! marginal-likelihood gradients and a band limit that grows whenever the
//! held-out error stops improving.

use std::sync::Arc;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{direction_marginal_average, epoch_kl, rremse, HeldOutSet};
use crate::imaging::Projector;
use crate::importance::{
    direction_distribution, ess, is_marginal, migrate_state, sample_image, update_state, Factor, ImageSamples,
    ImportanceState, IsEstimate, SchemeKernels, DEFAULT_S0,
};
use crate::likelihood::{GradientAccumulator, ObservedImage, ShiftTable, SliceSet};
use crate::math::{stream_rng, streams};
use crate::priors::{neg_log_prior_extended, neg_log_prior_grad_raw, PriorSpec};
use crate::quadrature::{upgrade_scheme, QuadratureScheme, ShiftPrior};
use crate::sagd::{
    calibrate_lipschitz, epoch_order, epsilon_schedule, lipschitz_decay, lipschitz_line_search, partition_minibatches,
    sagd_step, Minibatch, RhoEvent, RhoSchedule, SagdState,
};
use crate::simulator::{random_balls, render_balls};
use crate::volume::{DensityVolume, DiskLattice};

/// Fixed number of ordered gradient chunks per batch.
const GRADIENT_CHUNKS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum InitSpec {
    /// Random sum of balls, rescaled to the power of the data.
    SphereSum { count: usize },
    Volume(DensityVolume),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    pub batch_size: usize,
    pub max_iters: u64,
    /// Band limits in cycles/Å.
    pub rho_min: f64,
    pub rho_max: f64,
    pub footprint: usize,
    pub s0: f64,
    pub prior: PriorSpec,
    /// Shift prior standard deviation in Å; zero disables shifts.
    pub shift_sigma: f64,
    pub held_out: usize,
    pub eval_every: u64,
    pub plateau_window: u64,
    pub plateau_tolerance: f64,
    pub line_search_every: u64,
    pub initial_lipschitz: f64,
    pub resync_every: u64,
    /// Images used for the epoch-to-epoch KL diagnostic.
    pub kl_images: usize,
    /// Use the dataset-averaged direction distribution as `ψ`.
    pub average_psi: bool,
    pub seed: u64,
    pub init: InitSpec,
}

impl ReconConfig {
    pub fn new(rho_min: f64, rho_max: f64, seed: u64) -> Self {
        Self {
            batch_size: 200,
            max_iters: 5000,
            rho_min,
            rho_max,
            footprint: 4,
            s0: DEFAULT_S0,
            prior: PriorSpec::Uniform,
            shift_sigma: 0.0,
            held_out: 100,
            eval_every: 10,
            plateau_window: 100,
            plateau_tolerance: 0.005,
            line_search_every: crate::sagd::LINE_SEARCH_EVERY,
            initial_lipschitz: 1.0,
            resync_every: 100,
            kl_images: 200,
            average_psi: false,
            seed,
            init: InitSpec::SphereSum { count: 10 },
        }
    }

    pub fn validate(&self, nyquist: f64) -> Result<()> {
        RhoSchedule::new(self.rho_min, self.rho_max, nyquist)?;
        self.prior.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.eval_every == 0 || self.line_search_every == 0 || self.resync_every == 0 {
            return bad("eval_every, line_search_every and resync_every must be at least 1");
        }
        if !(self.s0 > 0.0) {
            return bad("s0 must be positive");
        }
        if !(self.initial_lipschitz > 0.0) {
            return bad("initial_lipschitz must be positive");
        }
        if !(self.shift_sigma >= 0.0) {
            return bad("shift_sigma must be >= 0");
        }
        if let InitSpec::SphereSum { count: 0 } = self.init {
            return bad("sphere-sum initialization needs at least one sphere");
        }
        Ok(())
    }
}

/// One row of the per-iteration diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagRow {
    pub iteration: u64,
    pub epoch: u64,
    pub rho: f64,
    pub epsilon: f64,
    pub lipschitz: f64,
    pub objective: f64,
    pub mean_fraction: f64,
    pub mean_ess: [f64; 3],
    pub heldout_rremse: Option<f64>,
    pub epoch_kl: Option<f64>,
    pub line_search: bool,
}

impl DiagRow {
    pub const HEADER: &'static str = "iteration,epoch,rho,epsilon,lipschitz,objective,mean_fraction,ess_direction,ess_inplane,ess_shift,heldout_rremse,epoch_kl,line_search";

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{}",
            self.iteration,
            self.epoch,
            self.rho,
            self.epsilon,
            self.lipschitz,
            self.objective,
            self.mean_fraction,
            self.mean_ess[0],
            self.mean_ess[1],
            self.mean_ess[2],
            opt(self.heldout_rremse),
            opt(self.epoch_kl),
            u8::from(self.line_search)
        )
    }
}

/// Why the loop stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    Converged,
}

/// Everything that evolves during a run; enough to resume bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineState {
    pub sagd: SagdState,
    pub rho: f64,
    pub generation: u64,
    pub states: Vec<ImportanceState>,
    pub held_out_states: Vec<ImportanceState>,
    pub held_out_visits: u64,
    pub rho_history: Vec<(u64, f64)>,
    /// Direction distributions of the KL images at the last epoch boundary,
    /// tagged with the scheme generation they belong to.
    pub kl_prev: Option<(u64, Vec<Vec<f64>>)>,
    pub force_line_search: bool,
    pub calibrated: bool,
    pub converged: bool,
    pub diagnostics: Vec<DiagRow>,
}

/// Outcome of a completed run.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub volume: DensityVolume,
    pub diagnostics: Vec<DiagRow>,
    pub stop: StopReason,
    pub rho: f64,
}

pub struct Reconstructor {
    pub config: ReconConfig,
    train: Vec<crate::volume::ParticleImage>,
    batches: Vec<Minibatch>,
    projector: Projector,
    scheme: QuadratureScheme,
    kernels: SchemeKernels,
    lattice: Arc<DiskLattice>,
    table: ShiftTable,
    observed: Vec<ObservedImage>,
    held: HeldOutSet,
    schedule: RhoSchedule,
    psi: Option<Vec<f64>>,
    n: usize,
    voxel_size: f64,
    pub state: EngineState,
}

fn shift_prior(sigma: f64) -> ShiftPrior {
    ShiftPrior::new(sigma)
}

impl Reconstructor {
    /// Splits off the held-out images, initializes the volume and sets up
    /// the quadrature at `rho_min`.
    pub fn new(dataset: Dataset, config: ReconConfig) -> Result<Self> {
        config.validate(dataset.nyquist())?;
        let (n, px) = (dataset.n, dataset.pixel_size);
        let (train, test) = if config.held_out > 0 {
            dataset.split_held_out(config.held_out)?
        } else {
            let d = dataset.clone();
            (dataset, d)
        };
        let projector = Projector::new(n, config.footprint)?;
        let scheme = QuadratureScheme::new(config.rho_min, n, px, shift_prior(config.shift_sigma))?;
        let batches = partition_minibatches(train.len(), config.batch_size, config.seed)?;
        let init = match &config.init {
            InitSpec::Volume(v) => {
                if v.n() != n {
                    return Err(Error::InvalidArgument(format!("initial volume has side {}, data {n}", v.n())));
                }
                v.clone()
            }
            InitSpec::SphereSum { count } => sphere_sum_init(&train.images, &projector, config.rho_min, *count, config.seed)?,
        };
        let sagd = SagdState::new(init.into_vec(), batches.len(), config.initial_lipschitz)?;
        let generation = scheme.generation;
        let state = EngineState {
            sagd,
            rho: config.rho_min,
            generation,
            states: vec![ImportanceState::new(generation); train.len()],
            held_out_states: vec![ImportanceState::new(generation); test.len()],
            held_out_visits: 0,
            rho_history: Vec::new(),
            kl_prev: None,
            force_line_search: true,
            calibrated: false,
            converged: false,
            diagnostics: Vec::new(),
        };
        Self::assemble(train.images, test.images, batches, projector, config, state, n, px)
    }

    /// Rebuilds a run from a checkpointed state.
    pub fn resume(dataset: Dataset, config: ReconConfig, state: EngineState) -> Result<Self> {
        config.validate(dataset.nyquist())?;
        let (n, px) = (dataset.n, dataset.pixel_size);
        let (train, test) = if config.held_out > 0 {
            dataset.split_held_out(config.held_out)?
        } else {
            let d = dataset.clone();
            (dataset, d)
        };
        if state.states.len() != train.len() || state.held_out_states.len() != test.len() {
            return Err(Error::InvalidArgument("checkpoint does not match the dataset".into()));
        }
        if state.sagd.v.len() != n * n * n {
            return Err(Error::InvalidArgument("checkpoint volume does not match the box size".into()));
        }
        let projector = Projector::new(n, config.footprint)?;
        let batches = partition_minibatches(train.len(), config.batch_size, config.seed)?;
        if batches.len() != state.sagd.batch_count() {
            return Err(Error::InvalidArgument("checkpoint batch count does not match the configuration".into()));
        }
        Self::assemble(train.images, test.images, batches, projector, config, state, n, px)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        train: Vec<crate::volume::ParticleImage>,
        test: Vec<crate::volume::ParticleImage>,
        batches: Vec<Minibatch>,
        projector: Projector,
        config: ReconConfig,
        state: EngineState,
        n: usize,
        px: f64,
    ) -> Result<Self> {
        let mut scheme = QuadratureScheme::new(state.rho, n, px, shift_prior(config.shift_sigma))?;
        scheme.generation = state.generation;
        let kernels = SchemeKernels::new(&scheme);
        let lattice = DiskLattice::new(n, px, state.rho)?;
        let table = ShiftTable::new(&scheme.shifts, &lattice);
        let observed = observe_all(&train, &lattice)?;
        let held = HeldOutSet::restore(test, state.held_out_states.clone(), config.seed, state.held_out_visits);
        let mut schedule = RhoSchedule::new(config.rho_min, config.rho_max, 0.5 / px)?
            .with_window(config.plateau_window, config.plateau_tolerance);
        schedule.rho = state.rho;
        schedule.restore_history(state.rho_history.clone());
        let mut r = Self {
            config,
            train,
            batches,
            projector,
            scheme,
            kernels,
            lattice,
            table,
            observed,
            held,
            schedule,
            psi: None,
            n,
            voxel_size: px,
            state,
        };
        r.refresh_psi()?;
        Ok(r)
    }

    pub fn scheme(&self) -> &QuadratureScheme {
        &self.scheme
    }

    pub fn batches(&self) -> &[Minibatch] {
        &self.batches
    }

    pub fn volume(&self) -> DensityVolume {
        DensityVolume::from_vec(self.n, self.voxel_size, self.state.sagd.v.clone()).expect("iterate has cube shape")
    }

    pub fn tau(&self) -> u64 {
        self.state.sagd.tau
    }

    pub fn done(&self) -> bool {
        self.state.converged || self.tau() >= self.config.max_iters
    }

    fn refresh_psi(&mut self) -> Result<()> {
        self.psi = if self.config.average_psi && self.state.states.iter().any(|s| s.last_seen.is_some()) {
            Some(direction_marginal_average(&self.state.states, self.kernels.get(Factor::Direction))?)
        } else {
            None
        };
        Ok(())
    }

    fn batch_samples(&self, batch: &[usize], tau: u64) -> Result<Vec<ImageSamples>> {
        batch
            .par_iter()
            .map(|&i| {
                let mut rng = stream_rng(self.config.seed, streams::IMPORTANCE, i as u64, tau);
                sample_image(
                    &self.state.states[i],
                    &self.scheme,
                    &self.kernels,
                    self.psi.as_deref(),
                    self.config.s0,
                    &mut rng,
                )
            })
            .collect()
    }

    fn slices_for(&self, v: &[f64], samples: &[ImageSamples]) -> Result<SliceSet> {
        let vol = DensityVolume::from_vec(self.n, self.voxel_size, v.to_vec())?;
        let prepared = self.projector.prepare(&vol)?;
        let mut slices = SliceSet::new(self.scheme.orientation_count(), &self.lattice);
        let needed: Vec<usize> = samples.iter().flat_map(|s| s.orientations(&self.scheme).indices).collect();
        slices.ensure(&self.projector, &prepared, &self.scheme, &needed);
        Ok(slices)
    }

    fn estimates(&self, batch: &[usize], samples: &[ImageSamples], slices: &SliceSet) -> Vec<IsEstimate> {
        batch
            .par_iter()
            .zip(samples)
            .map(|(&i, s)| is_marginal(&self.observed[i], slices, &self.table, &self.scheme, s))
            .collect()
    }

    /// `Σ_i −log Ẑ_i(v) + prior(v)/K` for the batch, with fixed samples.
    fn batch_objective(&self, v: &[f64], batch: &[usize], samples: &[ImageSamples]) -> Result<f64> {
        let slices = self.slices_for(v, samples)?;
        let est = self.estimates(batch, samples, &slices);
        let data: f64 = est.iter().map(|e| -e.log_marginal).sum();
        let prior = neg_log_prior_extended(v, &self.config.prior)?;
        Ok(data + prior / self.batches.len() as f64)
    }

    fn batch_gradient(&self, batch: &[usize], est: &[IsEstimate], slices: &SliceSet) -> Result<Vec<f64>> {
        let per = batch.len().div_ceil(GRADIENT_CHUNKS).max(1);
        let idx: Vec<usize> = (0..batch.len()).collect();
        let partials: Vec<GradientAccumulator> = idx
            .par_chunks(per)
            .map(|chunk| {
                let mut acc = GradientAccumulator::new();
                for &a in chunk {
                    let i = batch[a];
                    acc.add_image(&self.observed[i], &est[a].pose_logliks, slices, &self.table, 1.0);
                }
                acc
            })
            .collect();
        let mut total = GradientAccumulator::new();
        for p in partials {
            total.merge(p);
        }
        let g = total.backproject(&self.projector, &self.scheme, &self.lattice, self.voxel_size);
        self.projector.prepare_adjoint(&g)
    }

    fn epoch_boundary(&mut self) -> Result<Option<f64>> {
        let count = self.config.kl_images.min(self.train.len());
        if count == 0 {
            return Ok(None);
        }
        let kernel = self.kernels.get(Factor::Direction);
        let curr: Vec<Vec<f64>> = self.state.states[..count]
            .par_iter()
            .map(|s| direction_distribution(s, kernel))
            .collect();
        let kl = match &self.state.kl_prev {
            Some((g, prev)) if *g == self.scheme.generation => {
                let vals = prev
                    .iter()
                    .zip(&curr)
                    .map(|(p, c)| epoch_kl(p, c))
                    .collect::<Result<Vec<f64>>>()?;
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
            _ => None,
        };
        self.state.kl_prev = Some((self.scheme.generation, curr));
        self.refresh_psi()?;
        Ok(kl)
    }

    fn upgrade(&mut self, new_rho: f64) -> Result<()> {
        let (scheme, map) = upgrade_scheme(&self.scheme, new_rho)?;
        let g = scheme.generation;
        self.state.states = self.state.states.iter().map(|s| migrate_state(s, &map, g)).collect();
        self.held.migrate(|s| migrate_state(s, &map, g));
        self.lattice = DiskLattice::new(self.n, self.voxel_size, new_rho)?;
        self.table = ShiftTable::new(&scheme.shifts, &self.lattice);
        self.observed = observe_all(&self.train, &self.lattice)?;
        self.kernels = SchemeKernels::new(&scheme);
        self.scheme = scheme;
        self.state.rho = new_rho;
        self.state.generation = g;
        self.state.force_line_search = true;
        self.refresh_psi()?;
        log::info!("band limit raised to {new_rho} (generation {g})");
        Ok(())
    }

    /// Held-out RREMSE at the current iterate.
    pub fn held_out_rremse(&mut self) -> Result<f64> {
        let vol = self.volume();
        let prepared = self.projector.prepare(&vol)?;
        let tau = self.tau();
        let est = self.held.evaluate(&self.projector, &prepared, &self.scheme, tau)?;
        self.state.held_out_states = self.held.states.clone();
        self.state.held_out_visits = self.held.visits();
        rremse(&est)
    }

    /// Runs one SAGD iteration.
    pub fn step(&mut self) -> Result<()> {
        let tau = self.tau();
        let bcount = self.batches.len() as u64;
        let epoch = tau / bcount;
        let pos = (tau % bcount) as usize;
        let kl = if pos == 0 && epoch > 0 { self.epoch_boundary()? } else { None };
        let k = epoch_order(self.batches.len(), epoch, self.config.seed)[pos];
        let batch = self.batches[k].indices.clone();

        let samples = self.batch_samples(&batch, tau)?;
        let slices = self.slices_for(&self.state.sagd.v, &samples)?;
        let est = self.estimates(&batch, &samples, &slices);
        if let Some((a, e)) = est.iter().enumerate().find(|(_, e)| !e.log_marginal.is_finite()) {
            return Err(Error::Numerical(format!(
                "marginal likelihood of image {} is {} at iteration {tau}",
                batch[a], e.log_marginal
            )));
        }
        let grad = self.batch_gradient(&batch, &est, &slices)?;
        drop(slices);
        let prior_grad = neg_log_prior_grad_raw(&self.state.sagd.v, &self.config.prior)?;

        let search = self.state.force_line_search || tau % self.config.line_search_every == 0;
        if search {
            let kf = self.batches.len() as f64;
            let dv: Vec<f64> = grad.iter().zip(&prior_grad).map(|(g, p)| g + p / kf).collect();
            let v = self.state.sagd.v.clone();
            let f = |x: &[f64]| self.batch_objective(x, &batch, &samples);
            let l = if self.state.calibrated {
                lipschitz_line_search(f, &v, &dv, self.state.sagd.lipschitz)?
            } else {
                calibrate_lipschitz(f, &v, &dv, self.state.sagd.lipschitz)?
            };
            self.state.sagd.lipschitz = l;
            self.state.calibrated = true;
            self.state.force_line_search = false;
        }
        let lipschitz = self.state.sagd.lipschitz;
        sagd_step(&mut self.state.sagd, k, &grad, &prior_grad, epsilon_schedule(tau))?;
        if !search {
            self.state.sagd.lipschitz *= lipschitz_decay();
        }
        if self.state.sagd.tau % self.config.resync_every == 0 {
            let drift = self.state.sagd.resync();
            if drift > 1e-8 {
                log::warn!("running gradient sum drifted by {drift:e}; resynced");
            }
        }

        let nb = est.len() as f64;
        let mut mean_ess = [0.0; 3];
        for s in &samples {
            for (m, d) in mean_ess.iter_mut().zip(&s.distributions) {
                *m += ess(&d.q) / nb;
            }
        }
        let mean_fraction = est.iter().map(|e| e.fraction_evaluated).sum::<f64>() / nb;
        let objective = est.iter().map(|e| -e.log_marginal).sum::<f64>() / nb;
        for ((&i, e), _) in batch.iter().zip(est).zip(&samples) {
            self.state.states[i] = update_state(&self.state.states[i], e.phi, tau);
        }

        let mut row = DiagRow {
            iteration: tau,
            epoch,
            rho: self.scheme.rho,
            epsilon: epsilon_schedule(tau),
            lipschitz,
            objective,
            mean_fraction,
            mean_ess,
            heldout_rremse: None,
            epoch_kl: kl,
            line_search: search,
        };
        let next = self.tau();
        if next % self.config.eval_every == 0 {
            let r = self.held_out_rremse()?;
            row.heldout_rremse = Some(r);
            let event = self.schedule.observe(next, r);
            self.state.rho_history = self.schedule.history().to_vec();
            match event {
                RhoEvent::Continue => {}
                RhoEvent::Increase(rho) => self.upgrade(rho)?,
                RhoEvent::Converged => self.state.converged = true,
            }
        }
        self.state.diagnostics.push(row);
        Ok(())
    }

    /// Iterates until convergence or the iteration cap, calling `after_step`
    /// after every iteration (used for checkpointing).
    pub fn run_with<F>(mut self, mut after_step: F) -> Result<Reconstruction>
    where
        F: FnMut(&Reconstructor) -> Result<()>,
    {
        while !self.done() {
            if let Err(e) = self.step() {
                after_step(&self)?;
                return Err(e);
            }
            after_step(&self)?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> Reconstruction {
        let stop = if self.state.converged {
            StopReason::Converged
        } else {
            StopReason::MaxIterations
        };
        Reconstruction {
            volume: self.volume(),
            rho: self.state.rho,
            diagnostics: self.state.diagnostics,
            stop,
        }
    }
}

fn observe_all(images: &[crate::volume::ParticleImage], lattice: &Arc<DiskLattice>) -> Result<Vec<ObservedImage>> {
    images.par_iter().map(|p| ObservedImage::from_particle(p, lattice)).collect()
}

/// Random sum-of-balls volume scaled so that its projections carry the
/// signal power of the data at band limit `rho`.
pub fn sphere_sum_init(
    images: &[crate::volume::ParticleImage],
    projector: &Projector,
    rho: f64,
    count: usize,
    seed: u64,
) -> Result<DensityVolume> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images to initialize from".into()))?;
    let (n, px) = (first.n(), first.pixel_size());
    let mut rng = stream_rng(seed, streams::INIT, 0, 0);
    let balls = random_balls(n, px, count, &mut rng);
    let v0 = render_balls(n, px, &balls);
    let prepared = projector.prepare(&v0)?;
    let lattice = DiskLattice::new(n, px, rho)?;
    let rotations: Vec<_> = (0..images.len())
        .map(|_| crate::simulator::uniform_quaternion(&mut rng).to_rotation_matrix().into_inner())
        .collect();
    let powers: Vec<(f64, f64)> = images
        .par_iter()
        .zip(&rotations)
        .map(|(p, r)| {
            let obs = ObservedImage::from_particle(p, &lattice)?;
            let model = projector.forward_model(&prepared, r, [0.0, 0.0], &p.ctf, &lattice)?;
            let m = lattice.len() as f64;
            Ok((obs.image.norm_sqr() - m * p.noise_sigma * p.noise_sigma, model.norm_sqr()))
        })
        .collect::<Result<_>>()?;
    let data: f64 = powers.iter().map(|p| p.0).sum();
    let model: f64 = powers.iter().map(|p| p.1).sum();
    let scale = if data > 0.0 && model > 0.0 {
        (data / model).sqrt()
    } else {
        log::warn!("data power not above the noise floor; keeping unit sphere density");
        1.0
    };
    let mut v = v0;
    v.data_mut().iter_mut().for_each(|x| *x *= scale);
    Ok(v)
}

/// Runs a full reconstruction without checkpoints.
pub fn run_reconstruction(dataset: Dataset, config: ReconConfig) -> Result<Reconstruction> {
    Reconstructor::new(dataset, config)?.run_with(|_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{phantom_geometric, simulate_dataset, GeometricKind, SimConfig};

    fn small_dataset() -> Dataset {
        let truth = phantom_geometric(16, 4.0, GeometricKind::Lobes, 3).unwrap();
        simulate_dataset(&truth, &SimConfig::new(40, 1.0, 22.0, 5)).unwrap().dataset
    }

    fn small_config() -> ReconConfig {
        let mut cfg = ReconConfig::new(1.0 / 32.0, 1.0 / 16.0, 2);
        cfg.batch_size = 10;
        cfg.held_out = 8;
        cfg.eval_every = 2;
        cfg.max_iters = 6;
        cfg
    }

    #[test]
    fn zero_iterations_return_the_initial_volume() {
        let init = phantom_geometric(16, 4.0, GeometricKind::Blocks, 1).unwrap();
        let mut cfg = small_config();
        cfg.max_iters = 0;
        cfg.init = InitSpec::Volume(init.clone());
        let rec = run_reconstruction(small_dataset(), cfg).unwrap();
        assert_eq!(rec.volume, init);
        assert!(rec.diagnostics.is_empty());
        assert_eq!(rec.stop, StopReason::MaxIterations);
    }

    #[test]
    fn runs_are_deterministic() {
        let a = run_reconstruction(small_dataset(), small_config()).unwrap();
        let b = run_reconstruction(small_dataset(), small_config()).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.diagnostics, b.diagnostics);
        assert!(a.volume.data().iter().all(|v| *v >= 0.0));
        let mut other = small_config();
        other.seed = 3;
        assert_ne!(run_reconstruction(small_dataset(), other).unwrap().volume, a.volume);
    }

    #[test]
    fn plateau_raises_band_limit_then_converges() {
        let mut cfg = small_config();
        cfg.plateau_window = 2;
        cfg.plateau_tolerance = 10.0;
        cfg.max_iters = 40;
        let mut r = Reconstructor::new(small_dataset(), cfg).unwrap();
        assert_eq!(r.scheme().generation, 0);
        while !r.done() {
            r.step().unwrap();
        }
        assert_eq!(r.state.rho, 1.0 / 16.0);
        assert_eq!(r.scheme().generation, 1);
        assert!(r.state.states.iter().all(|s| s.generation == 1));
        let rec = r.finish();
        assert_eq!(rec.stop, StopReason::Converged);
        assert!(rec.diagnostics.len() < 40);
        // the line search reruns after the band limit changes
        let up = rec.diagnostics.iter().position(|d| d.rho == 1.0 / 16.0).unwrap();
        assert!(rec.diagnostics[up].line_search);
    }

    #[test]
    fn resume_continues_bit_exactly() {
        let full = run_reconstruction(small_dataset(), small_config()).unwrap();
        let mut part = Reconstructor::new(small_dataset(), small_config()).unwrap();
        for _ in 0..3 {
            part.step().unwrap();
        }
        let resumed = Reconstructor::resume(small_dataset(), small_config(), part.state.clone()).unwrap();
        let rec = resumed.run_with(|_| Ok(())).unwrap();
        assert_eq!(rec.volume, full.volume);
        assert_eq!(rec.diagnostics, full.diagnostics);
    }

    #[test]
    fn resume_rejects_mismatched_state() {
        let r = Reconstructor::new(small_dataset(), small_config()).unwrap();
        let mut cfg = small_config();
        cfg.batch_size = 5;
        assert!(Reconstructor::resume(small_dataset(), cfg, r.state.clone()).is_err());
        let mut cfg = small_config();
        cfg.held_out = 4;
        assert!(Reconstructor::resume(small_dataset(), cfg, r.state).is_err());
    }

    #[test]
    fn invalid_configurations() {
        let d = small_dataset();
        let mut cfg = small_config();
        cfg.rho_max = 1.0;
        assert!(Reconstructor::new(d.clone(), cfg).is_err());
        let mut cfg = small_config();
        cfg.batch_size = 0;
        assert!(Reconstructor::new(d.clone(), cfg).is_err());
        let mut cfg = small_config();
        cfg.init = InitSpec::Volume(DensityVolume::zeros(8, 4.0).unwrap());
        assert!(Reconstructor::new(d, cfg).is_err());
    }
}
