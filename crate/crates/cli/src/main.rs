//! `rotequiv`: reproducible experiments over rotation-equivariant networks.
//!
//! Every subcommand writes its CSV output and a `manifest.toml` (resolved
//! configuration, seed, versions) into `--out`. Exit codes: 0 success or
//! strict, 1 a property violation was found, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rotequiv::harness::{
    check_strictness, gen_dataset, gen_split, report, robustness_sweep, run_gradcheck, sampling_mismatch_demo,
    stagewise_error, train, DatasetSpec, Split, TrainConfig, TrainState, TrainingHistory,
};
use rotequiv::model::{Checkpoint, Model, NetworkConfig};
use rotequiv::tensor::io::write_pgm;
use rotequiv::{Error, Rng, Tensor};

const STRICT_EPS: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "rotequiv", version, about = "Rotation-equivariant CNN experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Run {
    /// Seed for every random choice of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Network configuration (TOML); defaults to the built-in strict network.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `stages.*.downsample_mode=approx`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty()
    }

    fn resolve(&self) -> rotequiv::Result<NetworkConfig> {
        let base = match &self.config {
            Some(p) => NetworkConfig::load(p)?,
            None => NetworkConfig::default(),
        };
        let cfg = base.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Training images [default: 2000].
    #[arg(long)]
    n_train: Option<usize>,
    /// Test images [default: 500].
    #[arg(long)]
    n_test: Option<usize>,
    /// Image side in pixels [default: 64].
    #[arg(long)]
    image_size: Option<usize>,
    /// Additive Gaussian noise [default: 0.05].
    #[arg(long)]
    noise_std: Option<f64>,
    /// Draw angles from [0, max) degrees instead of the full circle.
    #[arg(long)]
    max_angle: Option<f64>,
}

impl DataArgs {
    fn given(&self) -> bool {
        self.n_train.is_some()
            || self.n_test.is_some()
            || self.image_size.is_some()
            || self.noise_std.is_some()
            || self.max_angle.is_some()
    }

    fn spec(&self, seed: u64, default_size: usize) -> DatasetSpec {
        let d = DatasetSpec::default();
        DatasetSpec {
            n_train: self.n_train.unwrap_or(d.n_train),
            n_test: self.n_test.unwrap_or(d.n_test),
            image_size: self.image_size.unwrap_or(default_size),
            seed,
            noise_std: self.noise_std.unwrap_or(d.noise_std),
            max_angle_deg: self.max_angle,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Static strictness check of every downsampling layer.
    Check {
        #[command(flatten)]
        run: Run,
        #[command(flatten)]
        config: ConfigArgs,
        /// Input extent to check; defaults to the configured one.
        #[arg(long)]
        input_size: Option<usize>,
    },
    /// Stagewise equivariance error on random inputs.
    EquivError {
        #[command(flatten)]
        run: Run,
        #[command(flatten)]
        config: ConfigArgs,
        /// Rotation angles in degrees, multiples of 90.
        #[arg(long, value_delimiter = ',', default_value = "90,180,270", allow_hyphen_values = true)]
        angles: Vec<f64>,
        /// Number of random inputs.
        #[arg(long, default_value_t = 10)]
        samples: usize,
        /// Measure a trained model instead of a fresh one.
        #[arg(long, conflicts_with_all = ["config", "overrides"])]
        checkpoint: Option<PathBuf>,
    },
    /// Train on the synthetic shape dataset.
    Train {
        #[command(flatten)]
        run: Run,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Total epochs [default: 20].
        #[arg(long)]
        epochs: Option<usize>,
        /// [default: 32]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Peak learning rate [default: 2.5e-4].
        #[arg(long)]
        lr: Option<f64>,
        /// [default: 0.05]
        #[arg(long)]
        weight_decay: Option<f64>,
        /// Weight of the angle loss [default: 1].
        #[arg(long)]
        angle_loss_weight: Option<f64>,
        /// Test images used for the per-epoch equivariance error [default: 8].
        #[arg(long)]
        eps_samples: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Accuracy and angle error on rotated test images.
    Robustness {
        #[command(flatten)]
        run: Run,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rotation angles in degrees.
        #[arg(long, value_delimiter = ',', default_value = "0,90,180,270", allow_hyphen_values = true)]
        angles: Vec<f64>,
        /// Test images [default: 500].
        #[arg(long)]
        n_test: Option<usize>,
        /// Additive Gaussian noise [default: 0.05].
        #[arg(long)]
        noise_std: Option<f64>,
    },
    /// Stride-2 sampling points before and after a quarter turn.
    MismatchDemo {
        #[command(flatten)]
        run: Run,
        /// Half the image side.
        #[arg(long, default_value_t = 2)]
        n: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[command(flatten)]
        run: Run,
        /// Operation name, `all`, or `model`.
        #[arg(long, default_value = "all")]
        op: String,
        /// Random points per operation.
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
    /// Render the synthetic dataset to disk.
    GenData {
        #[command(flatten)]
        run: Run,
        #[command(flatten)]
        data: DataArgs,
    },
}

enum Outcome {
    Ok,
    Finding,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: Vec<String>,
    seed: u64,
    rotequiv_version: &'static str,
    checkpoint_format: &'static str,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fingerprint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    network: Option<&'a NetworkConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<&'a DatasetSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    training: Option<&'a TrainConfig>,
}

impl<'a> Manifest<'a> {
    fn new(command: &'a str, seed: u64) -> Self {
        Manifest {
            command,
            args: std::env::args().collect(),
            seed,
            rotequiv_version: env!("CARGO_PKG_VERSION"),
            checkpoint_format: "RQEVCKP1",
            outputs: Vec::new(),
            fingerprint: None,
            network: None,
            dataset: None,
            training: None,
        }
    }

    fn write(&self, out: &Path) -> rotequiv::Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("manifest: {e}")))?;
        report::write_text(&out.join("manifest.toml"), &text)
    }
}

fn write_output(out: &Path, name: &str, text: &str, manifest: &mut Manifest) -> rotequiv::Result<()> {
    report::write_text(&out.join(name), text)?;
    manifest.outputs.push(name.to_string());
    Ok(())
}

fn load_model(path: &Path) -> rotequiv::Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let (model, _) = TrainState::from_checkpoint(&ck)?;
    Ok((model, ck))
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn cmd_check(run: &Run, config: &ConfigArgs, input_size: Option<usize>) -> rotequiv::Result<Outcome> {
    let cfg = config.resolve()?;
    let report = check_strictness(&cfg, input_size.unwrap_or(cfg.input_size))?;
    println!("{:<24} {:>9} {:>2} {:>2} {:>7}  verdict", "layer", "padded_in", "k", "s", "residue");
    for l in &report.layers {
        println!("{:<24} {:>9} {:>2} {:>2} {:>7}  {:?}", l.name, l.padded_in, l.k, l.s, l.residue, l.verdict);
    }
    let mut manifest = Manifest::new("check", run.seed);
    manifest.network = Some(&cfg);
    write_output(&run.out, "strictness.csv", &report.to_csv()?, &mut manifest)?;
    manifest.write(&run.out)?;
    match report.first_failure() {
        None => {
            println!("strict: every downsampling layer satisfies (padded_in - k) mod s = 0");
            Ok(Outcome::Ok)
        }
        Some(l) => {
            println!(
                "not strict: first flagged layer {} (padded_in {}, k {}, s {}, residue {})",
                l.name, l.padded_in, l.k, l.s, l.residue
            );
            Ok(Outcome::Finding)
        }
    }
}

fn cmd_equiv_error(
    run: &Run,
    config: &ConfigArgs,
    angles: &[f64],
    samples: usize,
    checkpoint: Option<&Path>,
) -> rotequiv::Result<Outcome> {
    if samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    for &a in angles {
        rotequiv::harness::quarter_turns_for_angle(a)?;
    }
    let model = match checkpoint {
        Some(p) => load_model(p)?.0,
        None => Model::build(&config.resolve()?, &mut Rng::new(run.seed))?,
    };
    let cfg = model.config().clone();
    let x = Tensor::<f32>::randn(&[samples, cfg.in_channels, cfg.input_size, cfg.input_size], &mut Rng::new(run.seed).fork(1));
    let report = stagewise_error(&model, &x, angles)?;
    println!("{:<6} {:>14}", "stage", "worst eps_norm");
    for s in report.stages() {
        println!("{:<6} {:>14.3e}", s, report.worst(&s).unwrap_or(0.0));
    }
    let strict = check_strictness(&cfg, cfg.input_size)?.is_strict();
    let worst = report.worst_overall();
    let mut manifest = Manifest::new("equiv-error", run.seed);
    manifest.network = Some(&cfg);
    manifest.fingerprint = Some(model.fingerprint());
    write_output(&run.out, "equiv_error.csv", &report.to_csv()?, &mut manifest)?;
    manifest.write(&run.out)?;
    if strict && worst > STRICT_EPS {
        println!("violation: configuration is strict but worst normalized error is {worst:.3e} > {STRICT_EPS:e}");
        return Ok(Outcome::Finding);
    }
    Ok(Outcome::Ok)
}

struct TrainArgs<'a> {
    run: &'a Run,
    config: &'a ConfigArgs,
    data: &'a DataArgs,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    angle_loss_weight: Option<f64>,
    eps_samples: Option<usize>,
    resume: Option<&'a Path>,
}

/// Run settings stored in checkpoints so a resumed run sees the same data.
fn store_settings(ck: &mut Checkpoint, spec: &DatasetSpec, tc: &TrainConfig) {
    let m = &mut ck.meta;
    m.insert("data.n_train".into(), spec.n_train.to_string());
    m.insert("data.n_test".into(), spec.n_test.to_string());
    m.insert("data.image_size".into(), spec.image_size.to_string());
    m.insert("data.noise_std".into(), spec.noise_std.to_string());
    m.insert("data.max_angle_deg".into(), spec.max_angle_deg.map_or("none".into(), |a| a.to_string()));
    m.insert("train.batch_size".into(), tc.batch_size.to_string());
    m.insert("train.epochs".into(), tc.epochs.to_string());
    m.insert("train.angle_loss_weight".into(), tc.angle_loss_weight.to_string());
    m.insert("train.eps_samples".into(), tc.eps_samples.to_string());
}

fn stored_settings(ck: &Checkpoint) -> rotequiv::Result<(DatasetSpec, TrainConfig)> {
    let max_angle: String = ck.meta_parse("data.max_angle_deg")?;
    let spec = DatasetSpec {
        n_train: ck.meta_parse("data.n_train")?,
        n_test: ck.meta_parse("data.n_test")?,
        image_size: ck.meta_parse("data.image_size")?,
        seed: ck.meta_parse("seed")?,
        noise_std: ck.meta_parse("data.noise_std")?,
        max_angle_deg: match max_angle.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|_| Error::Checkpoint(format!("bad data.max_angle_deg {s:?}")))?),
        },
    };
    let tc = TrainConfig {
        epochs: ck.meta_parse("train.epochs")?,
        batch_size: ck.meta_parse("train.batch_size")?,
        seed: spec.seed,
        angle_loss_weight: ck.meta_parse("train.angle_loss_weight")?,
        eps_samples: ck.meta_parse("train.eps_samples")?,
        ..TrainConfig::default()
    };
    Ok((spec, tc))
}

fn cmd_train(a: TrainArgs) -> rotequiv::Result<Outcome> {
    let run = a.run;
    let (mut model, resume, spec, mut tc) = match a.resume {
        Some(path) => {
            if a.config.given() || a.data.given() || a.batch_size.is_some() || a.lr.is_some() {
                return Err(usage("--resume takes configuration, data and optimizer settings from the checkpoint"));
            }
            if a.weight_decay.is_some() || a.angle_loss_weight.is_some() || a.eps_samples.is_some() {
                return Err(usage("--resume takes configuration, data and optimizer settings from the checkpoint"));
            }
            let ck = Checkpoint::load(path)?;
            let (model, state) = TrainState::from_checkpoint(&ck)?;
            let (spec, mut tc) = stored_settings(&ck)?;
            if spec.seed != run.seed {
                return Err(usage(format!("checkpoint was trained with --seed {}", spec.seed)));
            }
            tc.optimizer = state.optim.config;
            (model, Some(state), spec, tc)
        }
        None => {
            let cfg = a.config.resolve()?;
            let spec = a.data.spec(run.seed, cfg.input_size);
            if spec.image_size != cfg.input_size {
                return Err(usage(format!(
                    "--image-size {} differs from the network input_size {}",
                    spec.image_size, cfg.input_size
                )));
            }
            let mut tc = TrainConfig {
                seed: run.seed,
                ..TrainConfig::default()
            };
            if let Some(v) = a.batch_size {
                tc.batch_size = v;
            }
            if let Some(v) = a.lr {
                tc.optimizer.lr = v;
            }
            if let Some(v) = a.weight_decay {
                tc.optimizer.weight_decay = v;
            }
            if let Some(v) = a.angle_loss_weight {
                tc.angle_loss_weight = v;
            }
            if let Some(v) = a.eps_samples {
                tc.eps_samples = v;
            }
            (Model::build(&cfg, &mut Rng::new(run.seed))?, None, spec, tc)
        }
    };
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    let data = gen_dataset(&spec)?;
    let out = run.out.clone();
    let ck_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(|e| Error::Io { path: ck_dir.clone(), source: e })?;
    let mut written = Vec::new();
    let result = train(&mut model, &data, &tc, resume, &mut |m, s| {
        let mut ck = s.to_checkpoint(m, run.seed);
        store_settings(&mut ck, &spec, &tc);
        let name = format!("epoch_{:03}.ckpt", s.epoch);
        ck.save(&ck_dir.join(&name))?;
        ck.save(&out.join("last.ckpt"))?;
        report::write_text(&out.join("training.csv"), &s.history.to_csv()?)?;
        let r = s.history.records.last().expect("a record per epoch");
        println!(
            "epoch {:>3}  loss {:.4}  acc {:.3}  angle err {:.2} deg  eps {}",
            r.epoch,
            r.loss,
            r.accuracy,
            r.angular_error_deg,
            r.eps.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(" ")
        );
        written.push(format!("checkpoints/{name}"));
        Ok(())
    });
    let mut manifest = Manifest::new("train", run.seed);
    let cfg = model.config().clone();
    manifest.network = Some(&cfg);
    manifest.dataset = Some(&spec);
    manifest.training = Some(&tc);
    manifest.fingerprint = Some(model.fingerprint());
    manifest.outputs = written;
    manifest.outputs.extend(["last.ckpt".to_string(), "training.csv".to_string()]);
    let outcome = match result {
        Ok(state) => {
            write_output(&out, "training_eps.svg", &eps_chart(&state.history), &mut manifest)?;
            Outcome::Ok
        }
        Err(e @ Error::Diverged { .. }) => {
            println!("{e}");
            Outcome::Finding
        }
        Err(e) => return Err(e),
    };
    manifest.write(&out)?;
    Ok(outcome)
}

fn eps_chart(history: &TrainingHistory) -> String {
    let stages = history.records.first().map_or(0, |r| r.eps.len());
    let series: Vec<_> = (0..stages)
        .map(|s| {
            let pts = history.records.iter().map(|r| (r.epoch as f64, r.eps[s].max(1e-12))).collect();
            (format!("S{s}"), pts)
        })
        .collect();
    report::line_chart_svg("Equivariance error per stage", "epoch", &series, true)
}

fn cmd_robustness(
    run: &Run,
    checkpoint: &Path,
    angles: &[f64],
    n_test: Option<usize>,
    noise_std: Option<f64>,
) -> rotequiv::Result<Outcome> {
    let (model, _) = load_model(checkpoint)?;
    let cfg = model.config().clone();
    let spec = DataArgs {
        n_test,
        noise_std,
        ..DataArgs::default()
    }
    .spec(run.seed, cfg.input_size);
    let test = gen_split(&spec, Split::Test, spec.n_test)?;
    let curve = robustness_sweep(&model, &test, angles, 50)?;
    println!("{:>9} {:>9} {:>16}", "angle", "accuracy", "angle err (deg)");
    for p in &curve.points {
        println!("{:>9.2} {:>9.4} {:>16.3}", p.angle_deg, p.accuracy, p.mean_angular_error_deg);
    }
    let mut manifest = Manifest::new("robustness", run.seed);
    manifest.network = Some(&cfg);
    manifest.dataset = Some(&spec);
    manifest.fingerprint = Some(model.fingerprint());
    write_output(&run.out, "robustness.csv", &curve.to_csv()?, &mut manifest)?;
    manifest.write(&run.out)?;

    let grid: Vec<&Vec<usize>> = angles
        .iter()
        .zip(&curve.predictions)
        .filter(|(a, _)| (*a / 90.0).fract() == 0.0)
        .map(|(_, p)| p)
        .collect();
    let flat = grid.windows(2).all(|w| w[0] == w[1]);
    if check_strictness(&cfg, cfg.input_size)?.is_strict() && !flat {
        println!("violation: strict model predicts different classes across 90-degree rotations");
        return Ok(Outcome::Finding);
    }
    Ok(Outcome::Ok)
}

fn cmd_mismatch_demo(run: &Run, n: usize) -> rotequiv::Result<Outcome> {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let demo = sampling_mismatch_demo(n);
    println!("{}", demo.summary());
    if n <= 4 {
        let fmt = |pts: &[(usize, usize)]| pts.iter().map(|(x, y)| format!("({x},{y})")).collect::<Vec<_>>().join(" ");
        println!("pre  {}", fmt(&demo.pre));
        println!("post {}", fmt(&demo.post));
    }
    let mut csv = String::from("set,x,y\n");
    for (set, pts) in [("pre", &demo.pre), ("post", &demo.post)] {
        for (x, y) in pts {
            csv.push_str(&format!("{set},{x},{y}\n"));
        }
    }
    let mut manifest = Manifest::new("mismatch-demo", run.seed);
    write_output(&run.out, "mismatch.csv", &csv, &mut manifest)?;
    manifest.write(&run.out)?;
    Ok(if demo.parity_disjoint() && demo.points_disjoint() {
        Outcome::Ok
    } else {
        Outcome::Finding
    })
}

fn cmd_gradcheck(run: &Run, op: &str, points: usize) -> rotequiv::Result<Outcome> {
    if points == 0 {
        return Err(usage("--points must be at least 1"));
    }
    let results = run_gradcheck(op, points, run.seed)?;
    println!("{:<26} {:>8} {:>12} {:>12}  pass", "op", "step", "rel err", "normwise");
    for r in &results {
        println!("{:<26} {:>8.0e} {:>12.3e} {:>12.3e}  {}", r.op, r.step, r.max_rel_error, r.max_normwise_error, r.pass);
    }
    let mut manifest = Manifest::new("gradcheck", run.seed);
    write_output(&run.out, "gradcheck.csv", &report::rows_to_csv(&results)?, &mut manifest)?;
    manifest.write(&run.out)?;
    let failed = results.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        println!("{failed} of {} checks above tolerance", results.len());
        return Ok(Outcome::Finding);
    }
    Ok(Outcome::Ok)
}

fn cmd_gen_data(run: &Run, data: &DataArgs) -> rotequiv::Result<Outcome> {
    let spec = data.spec(run.seed, DatasetSpec::default().image_size);
    let ds = gen_dataset(&spec)?;
    let mut manifest = Manifest::new("gen-data", run.seed);
    manifest.dataset = Some(&spec);
    for (name, s) in [("train", &ds.train), ("test", &ds.test)] {
        let mut csv = String::from("index,label,class,theta_deg,symmetry_order\n");
        for i in 0..s.len() {
            let class = rotequiv::harness::ShapeClass::ALL[s.labels[i]].name();
            csv.push_str(&format!("{i},{},{class},{},{}\n", s.labels[i], s.thetas[i].to_degrees(), s.orders[i]));
        }
        write_output(&run.out, &format!("{name}_labels.csv"), &csv, &mut manifest)?;
        let bytes: Vec<u8> = s.images.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = format!("{name}_images.f32");
        let path = run.out.join(&file);
        std::fs::write(&path, bytes).map_err(|e| Error::Io { path, source: e })?;
        manifest.outputs.push(file);
    }
    let size = spec.image_size;
    for i in 0..ds.train.len().min(8) {
        let plane = Tensor::new(vec![size, size], ds.train.images.data()[i * size * size..(i + 1) * size * size].to_vec())?;
        let file = format!("preview_{i}.pgm");
        write_pgm(&plane, &run.out.join(&file))?;
        manifest.outputs.push(file);
    }
    manifest.write(&run.out)?;
    println!(
        "wrote {} train and {} test images of {size}x{size} (little-endian f32, [n, 1, {size}, {size}]) to {}",
        ds.train.len(),
        ds.test.len(),
        run.out.display()
    );
    Ok(Outcome::Ok)
}

fn dispatch(cli: Cli) -> rotequiv::Result<Outcome> {
    match &cli.cmd {
        Cmd::Check { run, config, input_size } => cmd_check(run, config, *input_size),
        Cmd::EquivError {
            run,
            config,
            angles,
            samples,
            checkpoint,
        } => cmd_equiv_error(run, config, angles, *samples, checkpoint.as_deref()),
        Cmd::Train {
            run,
            config,
            data,
            epochs,
            batch_size,
            lr,
            weight_decay,
            angle_loss_weight,
            eps_samples,
            resume,
        } => cmd_train(TrainArgs {
            run,
            config,
            data,
            epochs: *epochs,
            batch_size: *batch_size,
            lr: *lr,
            weight_decay: *weight_decay,
            angle_loss_weight: *angle_loss_weight,
            eps_samples: *eps_samples,
            resume: resume.as_deref(),
        }),
        Cmd::Robustness {
            run,
            checkpoint,
            angles,
            n_test,
            noise_std,
        } => cmd_robustness(run, checkpoint, angles, *n_test, *noise_std),
        Cmd::MismatchDemo { run, n } => cmd_mismatch_demo(run, *n),
        Cmd::Gradcheck { run, op, points } => cmd_gradcheck(run, op, *points),
        Cmd::GenData { run, data } => cmd_gen_data(run, data),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Finding) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Diverged { .. } => 1,
                _ => 2,
            })
        }
    }
}
