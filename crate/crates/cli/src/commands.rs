use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cryorecon::dataset::Dataset;
use cryorecon::evaluation::{direction_marginal_average, evaluate_volume, write_direction_csv};
use cryorecon::imaging::Projector;
use cryorecon::importance::{Factor, SchemeKernels};
use cryorecon::io::checkpoint::{read_checkpoint, write_checkpoint};
use cryorecon::io::config::KeyValues;
use cryorecon::io::ctf_table::write_ctf_table;
use cryorecon::io::manifest::{write_stack, write_truth, DatasetManifest};
use cryorecon::io::mrc::{read_mrc, read_volume, write_volume};
use cryorecon::io::write_diagnostics;
use cryorecon::priors::{default_lambda, PriorSpec};
use cryorecon::reconstruct::{sphere_sum_init, InitSpec, ReconConfig, Reconstructor};
use cryorecon::simulator::{
    phantom_geometric, phantom_spheres, simulate_dataset, GeometricKind, PoseDistribution, SimConfig,
};
use cryorecon::volume::ParticleImage;
use cryorecon::Error;

use crate::options::{parse_overrides, require_path, resolve, take_path, usage, CliError};

const RESOLVED: &str = "config.resolved";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Lib(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn make_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| io_err(p, e))
}

fn get<T: FromStr>(kv: &KeyValues, key: &str) -> Result<T, CliError> {
    usage(kv.require(key))
}

fn get_f64(kv: &KeyValues, key: &str, allow_inf: bool) -> Result<f64, CliError> {
    usage(kv.get_f64(key, allow_inf))?.ok_or_else(|| CliError::Usage(format!("missing key '{key}'")))
}

fn get_bool(kv: &KeyValues, key: &str) -> Result<bool, CliError> {
    usage(kv.get_bool(key))?.ok_or_else(|| CliError::Usage(format!("missing key '{key}'")))
}

const SIMULATE_KEYS: &[&str] = &[
    "n",
    "pixel_size",
    "count",
    "snr",
    "sigma_t",
    "phantom",
    "spheres",
    "phantom_seed",
    "defocus_min",
    "defocus_max",
    "cs_mm",
    "kv",
    "amp_contrast",
    "bfactor",
    "ctf",
    "support_radius",
    "poses",
    "max_latitude_deg",
    "seed",
];

pub fn simulate(out: Option<PathBuf>, config: Option<PathBuf>, rest: &[String]) -> Result<(), CliError> {
    let mut over = parse_overrides(rest)?;
    let out = require_path(take_path(&mut over, "out", out), "out")?;
    let config = take_path(&mut over, "config", config);
    let mut kv = resolve(config, &over, SIMULATE_KEYS)?;
    kv.set_default("n", 64);
    kv.set_default("pixel_size", 3.0);
    kv.set_default("count", 2000);
    kv.set_default("snr", 0.05);
    kv.set_default("sigma_t", 0.0);
    kv.set_default("phantom", "lobes");
    kv.set_default("spheres", 12);
    kv.set_default("seed", 0);
    let seed: u64 = get(&kv, "seed")?;
    kv.set_default("phantom_seed", seed);
    kv.set_default("defocus_min", 10000.0);
    kv.set_default("defocus_max", 25000.0);
    kv.set_default("cs_mm", 2.7);
    kv.set_default("kv", 300.0);
    kv.set_default("amp_contrast", 0.07);
    kv.set_default("bfactor", 0.0);
    kv.set_default("ctf", true);
    kv.set_default("poses", "uniform");
    kv.set_default("max_latitude_deg", 15.0);
    let n: usize = get(&kv, "n")?;
    let px = get_f64(&kv, "pixel_size", false)?;
    kv.set_default("support_radius", 0.35 * n as f64 * px);

    let phantom_seed: u64 = get(&kv, "phantom_seed")?;
    let phantom = match kv.raw("phantom").unwrap_or_default() {
        "spheres" => usage(phantom_spheres(n, px, get(&kv, "spheres")?, phantom_seed))?,
        other => {
            let kind = GeometricKind::from_str(other)
                .map_err(|_| CliError::Usage(format!("unknown phantom '{other}' (lobes, blocks, spheres)")))?;
            usage(phantom_geometric(n, px, kind, phantom_seed))?
        }
    };
    let mut cfg = SimConfig::new(
        get(&kv, "count")?,
        get_f64(&kv, "snr", true)?,
        get_f64(&kv, "support_radius", false)?,
        seed,
    );
    cfg.sigma_t = get_f64(&kv, "sigma_t", false)?;
    cfg.defocus_min = get_f64(&kv, "defocus_min", false)?;
    cfg.defocus_max = get_f64(&kv, "defocus_max", false)?;
    cfg.cs_mm = get_f64(&kv, "cs_mm", false)?;
    cfg.kv = get_f64(&kv, "kv", false)?;
    cfg.amp_contrast = get_f64(&kv, "amp_contrast", false)?;
    cfg.bfactor = get_f64(&kv, "bfactor", false)?;
    cfg.ctf = get_bool(&kv, "ctf")?;
    cfg.poses = match kv.raw("poses").unwrap_or_default() {
        "uniform" => PoseDistribution::Uniform,
        "equatorial" => PoseDistribution::Equatorial {
            max_latitude: get_f64(&kv, "max_latitude_deg", false)?.to_radians(),
        },
        other => return Err(CliError::Usage(format!("unknown pose distribution '{other}' (uniform, equatorial)"))),
    };
    usage(cfg.validate())?;

    make_dir(&out)?;
    kv.write(out.join(RESOLVED))?;
    let sim = simulate_dataset(&phantom, &cfg)?;
    write_volume(out.join("phantom.mrc"), &phantom)?;
    write_stack(out.join("particles.mrcs"), &sim.dataset.images)?;
    write_truth(out.join("truth.csv"), &sim.truth)?;
    let mut manifest = DatasetManifest::new(out.join("particles.mrcs"));
    if cfg.ctf {
        let ctfs: Vec<_> = sim.dataset.images.iter().map(|im| im.ctf).collect();
        write_ctf_table(out.join("ctf.csv"), &ctfs)?;
        manifest.ctf = Some(out.join("ctf.csv"));
    }
    manifest.truth = Some(out.join("truth.csv"));
    manifest.noise_sigma = Some(sim.noise_sigma);
    manifest.particle_radius = Some(cfg.support_radius);
    manifest.seed = Some(seed);
    manifest.n = Some(n);
    manifest.count = Some(cfg.count);
    manifest.write(out.join("manifest.txt"))?;
    log::info!(
        "wrote {} images ({n}px, {px} Å) to {}; noise sigma {:.4e}",
        cfg.count,
        out.display(),
        sim.noise_sigma
    );
    Ok(())
}

const RECONSTRUCT_KEYS: &[&str] = &[
    "batch_size",
    "max_iters",
    "rho_min",
    "rho_max",
    "footprint",
    "s0",
    "prior",
    "prior_lambda",
    "prior_lambda_fraction",
    "prior_sigma_car",
    "shift_sigma",
    "held_out",
    "eval_every",
    "plateau_window",
    "plateau_tolerance",
    "line_search_every",
    "initial_lipschitz",
    "resync_every",
    "kl_images",
    "average_psi",
    "seed",
    "init",
    "init_spheres",
    "checkpoint_every",
];

/// Keys whose change does not invalidate a checkpoint.
const RESUMABLE_KEYS: &[&str] = &["max_iters", "checkpoint_every"];

fn load_manifest(path: &Path) -> Result<(DatasetManifest, Dataset), CliError> {
    if !path.exists() {
        return Err(CliError::Lib(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        }));
    }
    let m = DatasetManifest::read(path)?;
    let ds = m.load()?;
    Ok((m, ds))
}

fn comparable(kv: &KeyValues) -> String {
    let mut c = kv.clone();
    for k in RESUMABLE_KEYS {
        c.remove(k);
    }
    c.to_text()
}

pub fn reconstruct(
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    resume: bool,
    rest: &[String],
) -> Result<(), CliError> {
    let mut over = parse_overrides(rest)?;
    let manifest_path = require_path(take_path(&mut over, "manifest", manifest), "manifest")?;
    let out = require_path(take_path(&mut over, "out", out), "out")?;
    let config = take_path(&mut over, "config", config);
    let resume = resume || usage(over.get_bool("resume"))?.unwrap_or(false);
    over.remove("resume");
    let mut kv = resolve(config, &over, RECONSTRUCT_KEYS)?;
    let (m, dataset) = load_manifest(&manifest_path)?;
    let n = dataset.n;
    let nyquist = dataset.nyquist();

    let defaults = ReconConfig::new(0.125 * nyquist, 0.5 * nyquist, m.seed.unwrap_or(0));
    kv.set_default("seed", defaults.seed);
    kv.set_default("rho_min", defaults.rho_min);
    kv.set_default("rho_max", defaults.rho_max);
    kv.set_default("batch_size", defaults.batch_size);
    kv.set_default("max_iters", defaults.max_iters);
    kv.set_default("footprint", defaults.footprint);
    kv.set_default("s0", defaults.s0);
    kv.set_default("prior", "uniform");
    kv.set_default("prior_lambda_fraction", 0.01);
    kv.set_default("shift_sigma", defaults.shift_sigma);
    kv.set_default("held_out", defaults.held_out.min(dataset.len() / 10).max(1));
    kv.set_default("eval_every", defaults.eval_every);
    kv.set_default("plateau_window", defaults.plateau_window);
    kv.set_default("plateau_tolerance", defaults.plateau_tolerance);
    kv.set_default("line_search_every", defaults.line_search_every);
    kv.set_default("initial_lipschitz", defaults.initial_lipschitz);
    kv.set_default("resync_every", defaults.resync_every);
    kv.set_default("kl_images", defaults.kl_images);
    kv.set_default("average_psi", defaults.average_psi);
    kv.set_default("init", "spheres");
    kv.set_default("init_spheres", 10);
    kv.set_default("checkpoint_every", 50);

    let mut cfg = ReconConfig::new(
        get_f64(&kv, "rho_min", false)?,
        get_f64(&kv, "rho_max", false)?,
        get(&kv, "seed")?,
    );
    cfg.batch_size = get(&kv, "batch_size")?;
    cfg.max_iters = get(&kv, "max_iters")?;
    cfg.footprint = get(&kv, "footprint")?;
    cfg.s0 = get_f64(&kv, "s0", false)?;
    cfg.shift_sigma = get_f64(&kv, "shift_sigma", false)?;
    cfg.held_out = get(&kv, "held_out")?;
    cfg.eval_every = get(&kv, "eval_every")?;
    cfg.plateau_window = get(&kv, "plateau_window")?;
    cfg.plateau_tolerance = get_f64(&kv, "plateau_tolerance", false)?;
    cfg.line_search_every = get(&kv, "line_search_every")?;
    cfg.initial_lipschitz = get_f64(&kv, "initial_lipschitz", false)?;
    cfg.resync_every = get(&kv, "resync_every")?;
    cfg.kl_images = get(&kv, "kl_images")?;
    cfg.average_psi = get_bool(&kv, "average_psi")?;
    let checkpoint_every: u64 = get(&kv, "checkpoint_every")?;
    if cfg.held_out >= dataset.len() {
        return Err(CliError::Usage(format!(
            "held_out = {} leaves no training images out of {}",
            cfg.held_out,
            dataset.len()
        )));
    }

    // The initial volume fixes the signal scale behind the default prior strength.
    let init = match kv.raw("init").unwrap_or_default() {
        "spheres" => {
            let (train, _) = dataset.clone().split_held_out(cfg.held_out)?;
            let projector = usage(Projector::new(n, cfg.footprint))?;
            sphere_sum_init(&train.images, &projector, cfg.rho_min, get(&kv, "init_spheres")?, cfg.seed)?
        }
        path => read_volume(path)?,
    };
    let scale = init.data().iter().copied().fold(0.0, f64::max);
    let lambda = match usage(kv.get_f64("prior_lambda", false))? {
        Some(l) => l,
        None => default_lambda(scale.max(f64::MIN_POSITIVE), get_f64(&kv, "prior_lambda_fraction", false)?),
    };
    let sigma_car = usage(kv.get_f64("prior_sigma_car", false))?.unwrap_or(0.1 * scale);
    let kind = kv.raw("prior").unwrap_or_default().to_string();
    cfg.prior = usage(PriorSpec::from_parts(&kind, lambda, sigma_car))?;
    match cfg.prior {
        PriorSpec::Exponential { lambda } => kv.set("prior_lambda", lambda.to_string()),
        PriorSpec::Car { sigma } => kv.set("prior_sigma_car", sigma.to_string()),
        PriorSpec::Uniform => {}
    }
    cfg.init = InitSpec::Volume(init);
    usage(cfg.validate(nyquist))?;

    make_dir(&out)?;
    let checkpoint = out.join("checkpoint.cfrg");
    let tag = comparable(&kv);
    let test_images = dataset.images[dataset.len() - cfg.held_out..].to_vec();
    let engine = if resume {
        let (state, saved) = read_checkpoint(&checkpoint)?;
        if saved != tag {
            return Err(CliError::Usage(format!(
                "{} was written with a different configuration",
                checkpoint.display()
            )));
        }
        log::info!("resuming at iteration {}", state.sagd.tau);
        Reconstructor::resume(dataset, cfg, state)?
    } else {
        Reconstructor::new(dataset, cfg)?
    };
    kv.write(out.join(RESOLVED))?;
    log::info!(
        "{} training batches, rho {:.4}..{:.4} 1/Å, {} orientations at start",
        engine.batches().len(),
        engine.config.rho_min,
        engine.config.rho_max,
        engine.scheme().orientation_count()
    );

    let diag_path = out.join("diagnostics.csv");
    let directions_path = out.join("directions.csv");
    let mut last_logged = 0u64;
    let result = engine.run_with(|r| {
        let tau = r.tau();
        if let Some(row) = r.state.diagnostics.last() {
            if let Some(e) = row.heldout_rremse {
                if tau >= last_logged + 50 || r.done() {
                    last_logged = tau;
                    log::info!(
                        "iteration {tau}: rho {:.4}, held-out RREMSE {e:.4}, evaluated fraction {:.3}",
                        row.rho,
                        row.mean_fraction
                    );
                }
            }
        }
        if tau % checkpoint_every == 0 || r.done() {
            write_checkpoint(&checkpoint, &r.state, &tag)?;
            write_diagnostics(&diag_path, &r.state.diagnostics)?;
        }
        if r.done() {
            write_directions(&directions_path, r)?;
        }
        Ok(())
    });
    // on failure the callback has already saved the checkpoint and diagnostics
    let engine_out = result?;
    write_volume(out.join("volume.mrc"), &engine_out.volume)?;
    write_diagnostics(&diag_path, &engine_out.diagnostics)?;
    write_held_out(&out, &m, &test_images)?;
    log::info!(
        "stopped ({:?}) after {} iterations at rho {:.4}; volume written to {}",
        engine_out.stop,
        engine_out.diagnostics.len(),
        engine_out.rho,
        out.join("volume.mrc").display()
    );
    Ok(())
}

/// Writes the held-out images as their own dataset so `evaluate` can use them.
fn write_held_out(out: &Path, m: &DatasetManifest, test: &[ParticleImage]) -> Result<(), CliError> {
    write_stack(out.join("heldout.mrcs"), test)?;
    let mut hm = DatasetManifest::new(out.join("heldout.mrcs"));
    if m.ctf.is_some() {
        let ctfs: Vec<_> = test.iter().map(|im| im.ctf).collect();
        write_ctf_table(out.join("heldout_ctf.csv"), &ctfs)?;
        hm.ctf = Some(out.join("heldout_ctf.csv"));
    }
    hm.noise_sigma = test.first().map(|im| im.noise_sigma);
    hm.seed = m.seed;
    hm.n = test.first().map(|im| im.n());
    hm.count = Some(test.len());
    hm.write(out.join("heldout_manifest.txt"))?;
    Ok(())
}

/// Dataset-averaged posterior over viewing directions of the training images.
fn write_directions(path: &Path, r: &Reconstructor) -> cryorecon::Result<()> {
    let kernels = SchemeKernels::new(r.scheme());
    let probs = direction_marginal_average(&r.state.states, kernels.get(Factor::Direction))?;
    let f = fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_direction_csv(BufWriter::new(f), &r.scheme().directions, &probs).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

const EVALUATE_KEYS: &[&str] = &["rho", "shift_sigma", "footprint", "diagnostics"];

pub fn evaluate(
    volume: Option<PathBuf>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    rest: &[String],
) -> Result<(), CliError> {
    let mut over = parse_overrides(rest)?;
    let volume = require_path(take_path(&mut over, "volume", volume), "volume")?;
    let manifest = require_path(take_path(&mut over, "manifest", manifest), "manifest")?;
    let out = require_path(take_path(&mut over, "out", out), "out")?;
    let config = take_path(&mut over, "config", config);
    let mut kv = resolve(config, &over, EVALUATE_KEYS)?;
    let v = read_volume(&volume)?;
    let (_, dataset) = load_manifest(&manifest)?;
    kv.set_default("rho", 0.5 * dataset.nyquist());
    kv.set_default("shift_sigma", 0.0);
    kv.set_default("footprint", 4);
    let epoch_kl = match kv.raw("diagnostics") {
        Some(p) => read_epoch_kl(Path::new(p))?,
        None => Vec::new(),
    };
    let report = evaluate_volume(
        &v,
        &dataset.images,
        get_f64(&kv, "rho", false)?,
        get_f64(&kv, "shift_sigma", false)?,
        get(&kv, "footprint")?,
        epoch_kl,
    )?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        make_dir(dir)?;
        kv.write(dir.join("evaluate.config.resolved"))?;
    }
    let f = fs::File::create(&out).map_err(|e| io_err(&out, e))?;
    report.write(BufWriter::new(f)).map_err(|e| io_err(&out, e))?;
    println!("rremse = {:.6}", report.rremse);
    Ok(())
}

fn read_epoch_kl(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let col = header
        .split(',')
        .position(|h| h == "epoch_kl")
        .ok_or_else(|| CliError::Lib(Error::Format {
            path: path.to_path_buf(),
            message: "no epoch_kl column".into(),
        }))?;
    Ok(lines
        .filter_map(|l| l.split(',').nth(col))
        .filter(|c| !c.is_empty())
        .filter_map(|c| c.parse().ok())
        .collect())
}

pub fn info(path: &Path) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::Lib(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        }));
    }
    let head = fs::read(path).map_err(|e| io_err(path, e))?;
    let is_mrc = head.len() >= 1024 && &head[208..212] == b"MAP ";
    if is_mrc {
        let m = read_mrc(path)?;
        let (min, max, mean) = summary(m.data.iter().map(|&v| v as f64));
        if m.nx == m.ny && m.ny == m.nz {
            println!("kind = volume");
            println!("N = {}", m.nx);
            println!("voxel_size = {}", m.voxel_size());
        } else {
            println!("kind = stack");
            println!("N = {}", m.nx);
            println!("images = {}", m.nz);
            println!("pixel_size = {}", m.voxel_size());
        }
        println!("min = {min:e}");
        println!("max = {max:e}");
        println!("mean = {mean:e}");
    } else {
        let (m, ds) = load_manifest(path)?;
        let (min, max, mean) = summary(ds.images.iter().flat_map(|im: &ParticleImage| im.data().iter().copied()));
        println!("kind = dataset");
        println!("stack = {}", m.stack.display());
        println!("N = {}", ds.n);
        println!("images = {}", ds.len());
        println!("pixel_size = {}", ds.pixel_size);
        println!("noise_sigma = {:e}", ds.images[0].noise_sigma);
        println!("ctf = {}", if m.ctf.is_some() { "table" } else { "none" });
        println!("min = {min:e}");
        println!("max = {max:e}");
        println!("mean = {mean:e}");
    }
    Ok(())
}

fn summary(values: impl Iterator<Item = f64>) -> (f64, f64, f64) {
    let (mut min, mut max, mut sum, mut count) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for v in values {
        min = min.min(v);
        max = max.max(v);
        sum += v;
        count += 1;
    }
    (min, max, sum / count.max(1) as f64)
}
