//! Batch CLI over the sleep-staging library: corpus synthesis, encoding,
//! operating-point sweeps, training, inference, and efficiency reports.

mod config;
mod pipeline;

use clap::{Parser, Subcommand};
use config::RunConfig;
use neurosleep::efficiency::{self, ops_report_csv, ops_report_row};
use neurosleep::encoder::{self, event_density};
use neurosleep::network::{self, ModelConfig, ModelParams, Mode};
use neurosleep::operating_point::{grid_search, sweep_table_csv};
use neurosleep::signal_io::{
    self, EpochLabels, Recording, Stage, SynthComponent, SynthSpec, EPOCH_SECONDS,
};
use neurosleep::training::{
    self, confusion_csv, cv_split, history_csv, per_class_csv, Sample,
};
use neurosleep::{Error, Result};
use pipeline::ManifestEntry;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "neurosleep",
    version,
    about = "Event-driven single-channel EEG sleep staging"
)]
struct Cli {
    /// TOML run configuration; every key is optional, unknown keys abort.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Model profile: desk | paper_scale.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,

    /// A1: feed dense z-scored signal rows instead of event rasters.
    #[arg(long, global = true)]
    dense_input: bool,

    /// A2: single widened convolution branch.
    #[arg(long, global = true)]
    single_branch: bool,

    /// A4: classify the attention output directly, no integrator state.
    #[arg(long, global = true)]
    no_elif: bool,

    /// Output directory for emitted files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled synthetic corpus plus a manifest.
    Synth {
        #[arg(long, default_value_t = 20)]
        subjects: usize,
        /// 30 s epochs per subject.
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 100.0)]
        fs: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Encode one NSIG recording into an NEVT event stream.
    Encode {
        input: PathBuf,
        /// Defaults to <out>/<input stem>.nevt.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Grid-search encoder operating points over a corpus.
    Sweep {
        /// NSIG files; may be combined with --manifest.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Per-epoch stage predictions for one recording.
    Infer {
        /// NSIG or NEVT input, detected by magic.
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to <out>/predictions.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Subject-wise cross-validated training over a corpus manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Train only the first N folds of the plan.
        #[arg(long)]
        max_folds: Option<usize>,
    },
    /// Parameter/FLOPs/effective-ops report.
    Ops {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// NSIG recording for measured input sparsity and spike rate.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Defaults to <out>/ops.csv.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Measure wall-clock latency (off by default: timing is not
        /// reproducible, so the report stays byte-stable without it).
        #[arg(long)]
        measure_latency: bool,
    },
    /// Forward-pass wall-clock latency to stdout; writes no files.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<u8> {
    let run_cfg = RunConfig::load(cli.config.as_deref())?;
    std::fs::create_dir_all(&cli.out)?;
    match &cli.cmd {
        Cmd::Synth {
            subjects,
            epochs,
            fs,
            noise,
        } => cmd_synth(cli, &run_cfg, *subjects, *epochs, *fs, *noise),
        Cmd::Encode { input, output } => cmd_encode(cli, &run_cfg, input, output.as_deref()),
        Cmd::Sweep { inputs, manifest } => {
            cmd_sweep(cli, &run_cfg, inputs, manifest.as_deref())
        }
        Cmd::Infer {
            input,
            checkpoint,
            output,
        } => cmd_infer(cli, &run_cfg, input, checkpoint, output.as_deref()),
        Cmd::Train {
            manifest,
            max_folds,
        } => cmd_train(cli, &run_cfg, manifest, *max_folds),
        Cmd::Ops {
            checkpoint,
            input,
            output,
            measure_latency,
        } => cmd_ops(
            cli,
            &run_cfg,
            checkpoint.as_deref(),
            input.as_deref(),
            output.as_deref(),
            *measure_latency,
        ),
        Cmd::Bench {
            checkpoint,
            samples,
            warmup,
        } => cmd_bench(cli, &run_cfg, checkpoint.as_deref(), *samples, *warmup),
    }
}

fn model_config(cli: &Cli, run: &RunConfig) -> Result<ModelConfig> {
    run.model_config(
        &cli.profile,
        cli.dense_input,
        cli.single_branch,
        cli.no_elif,
    )
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Center frequencies (Hz) of the five synthetic stage classes.
const CLASS_BANDS: [f64; 5] = [0.6, 1.3, 2.1, 3.0, 4.0];

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    splitmix(splitmix(a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15)) ^ c)
}

fn cmd_synth(
    cli: &Cli,
    _run: &RunConfig,
    subjects: usize,
    epochs: usize,
    fs: f64,
    noise: f64,
) -> Result<u8> {
    if subjects == 0 || epochs == 0 {
        return Err(Error::parameter("subjects and epochs must be positive"));
    }
    let mut manifest = Vec::with_capacity(subjects);
    for s in 0..subjects {
        let subject_id = format!("s{s:03}");
        let mut samples = Vec::new();
        let mut labels = Vec::with_capacity(epochs);
        for e in 0..epochs {
            let seed = mix_seed(cli.seed, s as u64, e as u64);
            let class = (seed % 5) as usize;
            let spec = SynthSpec {
                duration_s: EPOCH_SECONDS,
                fs,
                components: vec![SynthComponent {
                    center_hz: CLASS_BANDS[class],
                    bandwidth_hz: 0.2,
                    amplitude: 1.0,
                }],
                noise_amplitude: noise,
                seed: splitmix(seed),
            };
            samples.extend_from_slice(&signal_io::synth_signal(&spec)?.samples);
            labels.push(Stage::from_code(class as u8)?);
        }
        let rec = Recording {
            samples,
            fs,
            channel: "synth".into(),
            subject_id: subject_id.clone(),
            session_id: String::new(),
            start_offset: None,
        };
        let sig_name = format!("{subject_id}.nsig");
        let lab_name = format!("{subject_id}_labels.csv");
        signal_io::save_signal(cli.out.join(&sig_name), &rec)?;
        signal_io::save_labels(
            cli.out.join(&lab_name),
            &EpochLabels {
                labels,
                epoch_duration: EPOCH_SECONDS,
            },
        )?;
        manifest.push((subject_id, sig_name, lab_name));
    }
    std::fs::write(
        cli.out.join("manifest.csv"),
        pipeline::manifest_csv(&manifest),
    )?;
    println!(
        "wrote {subjects} subjects x {epochs} epochs (fs={fs} Hz) to {}",
        cli.out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// encode
// ---------------------------------------------------------------------------

fn cmd_encode(cli: &Cli, run: &RunConfig, input: &Path, output: Option<&Path>) -> Result<u8> {
    let rec = signal_io::load_signal(input)?;
    let prep = pipeline::preprocess(&rec, run)?;
    let stream = pipeline::encode_recording(&prep, run)?;
    let out_path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = input
                .file_stem()
                .ok_or_else(|| Error::parameter("input path has no file stem"))?;
            cli.out.join(Path::new(stem).with_extension("nevt"))
        }
    };
    encoder::save_events(&out_path, &stream)?;
    let d = event_density(&stream)?;
    println!(
        "rho_combined={:.6} rho_slow={:.6} rho_fast={:.6} events={} -> {}",
        d.combined,
        d.slow,
        d.fast,
        stream.slow_events.len() + stream.fast_events.len(),
        out_path.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn cmd_sweep(
    cli: &Cli,
    run: &RunConfig,
    inputs: &[PathBuf],
    manifest: Option<&Path>,
) -> Result<u8> {
    let mut paths: Vec<PathBuf> = inputs.to_vec();
    if let Some(m) = manifest {
        paths.extend(pipeline::load_manifest(m)?.into_iter().map(|e| e.signal_path));
    }
    if paths.is_empty() {
        return Err(Error::parameter("sweep needs NSIG inputs or --manifest"));
    }
    let mut signals = Vec::with_capacity(paths.len());
    let mut fs: Option<f64> = None;
    for p in &paths {
        let prep = pipeline::preprocess(&signal_io::load_signal(p)?, run)?;
        match fs {
            None => fs = Some(prep.fs),
            Some(f) if (f - prep.fs).abs() < 1e-9 => {}
            Some(f) => {
                return Err(Error::parameter(format!(
                    "mixed sampling rates in corpus: {f} vs {} ({})",
                    prep.fs,
                    p.display()
                )))
            }
        }
        signals.push(prep.samples);
    }
    let result = grid_search(
        &signals,
        fs.unwrap(),
        &run.sweep_grid()?,
        &run.fidelity_thresholds()?,
        &run.encoder_config()?,
    )?;
    let table_path = cli.out.join("sweep.csv");
    std::fs::write(&table_path, sweep_table_csv(&result))?;
    match result.selected {
        Some(op) => {
            println!(
                "selected k_slow={:.1} k_fast={:.1} rho={:.6} snr_db={:.3} nmse={:.6} corr={:.6} -> {}",
                op.k_slow,
                op.k_fast,
                op.rho,
                op.snr,
                op.nmse,
                op.corr,
                table_path.display()
            );
            Ok(0)
        }
        None => {
            println!("no feasible operating point -> {}", table_path.display());
            Ok(1)
        }
    }
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

pub const PREDICTIONS_HEADER: &str =
    "epoch_index,predicted_stage,prob_W,prob_N1,prob_N2,prob_N3,prob_REM";

fn cmd_infer(
    cli: &Cli,
    run: &RunConfig,
    input: &Path,
    checkpoint: &Path,
    output: Option<&Path>,
) -> Result<u8> {
    let (params, model) = network::load_checkpoint(checkpoint)?;
    let bytes = std::fs::read(input)?;
    let batch = match bytes.get(..4) {
        Some(m) if m == signal_io::NSIG_MAGIC => {
            let rec = signal_io::decode_nsig(&bytes)?;
            pipeline::batch_for_recording(&rec, run, &model)?
        }
        Some(m) if m == encoder::NEVT_MAGIC => {
            if model.dense_input {
                return Err(Error::parameter(
                    "dense-input model needs an NSIG signal, not an event stream",
                ));
            }
            let stream = encoder::decode_nevt(&bytes)?;
            let b = pipeline::event_batch(&stream)?;
            if !b.rasters.is_empty() && b.t_b != model.t_b {
                return Err(Error::parameter(format!(
                    "event stream yields t_b={} but the checkpoint expects {}",
                    b.t_b, model.t_b
                )));
            }
            b
        }
        _ => {
            return Err(Error::format(format!(
                "{}: not an NSIG or NEVT file",
                input.display()
            )))
        }
    };
    if model.dense_input {
        println!("insd=1.000000");
    } else if batch.mask.iter().any(|&m| m) {
        println!(
            "insd={:.6}",
            efficiency::measure_insd(&batch.rasters, &batch.mask)?
        );
    }
    let mut csv = String::from(PREDICTIONS_HEADER);
    csv.push('\n');
    for e in 0..batch.rasters.len() {
        let win = pipeline::window_for_epoch(&batch, e, model.window_radius, model.t_b);
        let out = network::forward(&win, &params, &model, Mode::Eval)?;
        csv.push_str(&format!(
            "{},{}",
            batch.epoch_indices[e],
            Stage::from_code(out.predicted as u8)?.name()
        ));
        for p in &out.probs {
            csv.push_str(&format!(",{p:.6}"));
        }
        csv.push('\n');
    }
    let out_path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cli.out.join("predictions.csv"));
    std::fs::write(&out_path, csv)?;
    println!("{} epochs -> {}", batch.rasters.len(), out_path.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn subject_samples(
    entries: &[ManifestEntry],
    run: &RunConfig,
    model: &ModelConfig,
) -> Result<HashMap<String, Vec<Sample>>> {
    let mut map = HashMap::new();
    for entry in entries {
        let rec = signal_io::load_signal(&entry.signal_path)?;
        let labels = signal_io::load_labels(&entry.labels_path)?;
        let batch = pipeline::batch_for_recording(&rec, run, model)?;
        let samples = pipeline::samples_for_recording(&batch, &labels, model);
        if samples.is_empty() {
            return Err(Error::parameter(format!(
                "subject {} contributes no labeled epochs",
                entry.subject_id
            )));
        }
        map.insert(entry.subject_id.clone(), samples);
    }
    Ok(map)
}

fn gather(map: &HashMap<String, Vec<Sample>>, ids: &[String]) -> Vec<Sample> {
    ids.iter()
        .flat_map(|id| map[id].iter().cloned())
        .collect()
}

fn cmd_train(
    cli: &Cli,
    run: &RunConfig,
    manifest: &Path,
    max_folds: Option<usize>,
) -> Result<u8> {
    let model = model_config(cli, run)?;
    let tc = run.train_config(cli.seed)?;
    let entries = pipeline::load_manifest(manifest)?;
    let ids: Vec<String> = entries.iter().map(|e| e.subject_id.clone()).collect();
    let plan = cv_split(&ids, run.train.folds, run.train.val_fraction, cli.seed)?;

    let mut folds_csv = String::from("fold,role,subject_id\n");
    for (f, fold) in plan.folds.iter().enumerate() {
        for (role, list) in [("train", &fold.train), ("val", &fold.val), ("test", &fold.test)] {
            for id in list {
                folds_csv.push_str(&format!("{f},{role},{id}\n"));
            }
        }
    }
    std::fs::write(cli.out.join("folds.csv"), folds_csv)?;

    let map = subject_samples(&entries, run, &model)?;
    let n_folds = max_folds
        .unwrap_or(plan.folds.len())
        .min(plan.folds.len());
    let mut accs = Vec::new();
    let mut f1s = Vec::new();
    let mut kappas: Vec<Option<f64>> = Vec::new();
    for (f, fold) in plan.folds.iter().enumerate().take(n_folds) {
        let train_set = gather(&map, &fold.train);
        let val_set = gather(&map, &fold.val);
        let test_set = gather(&map, &fold.test);
        let result = training::train(&train_set, &val_set, &model, &tc)?;
        network::save_checkpoint(cli.out.join(format!("fold{f}.nckp")), &result.params, &model)?;
        std::fs::write(
            cli.out.join(format!("fold{f}_history.csv")),
            history_csv(&result.history),
        )?;
        let mut preds = Vec::with_capacity(test_set.len());
        let mut truth = Vec::with_capacity(test_set.len());
        for s in &test_set {
            preds.push(network::forward(&s.window, &result.params, &model, Mode::Eval)?.predicted);
            truth.push(s.label);
        }
        let report = training::evaluate(&preds, &truth)?;
        std::fs::write(
            cli.out.join(format!("fold{f}_confusion.csv")),
            confusion_csv(&report),
        )?;
        std::fs::write(
            cli.out.join(format!("fold{f}_metrics.csv")),
            per_class_csv(&report),
        )?;
        println!(
            "fold {f}: test_accuracy={:.4} macro_f1={:.4} kappa={} (best epoch {})",
            report.accuracy,
            report.macro_f1,
            report
                .kappa
                .map_or("NA".to_string(), |k| format!("{k:.4}")),
            result.best_epoch
        );
        accs.push(report.accuracy);
        f1s.push(report.macro_f1);
        kappas.push(report.kappa);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let kappa_cell = if kappas.iter().all(Option::is_some) {
        format!(
            "{:.6}",
            mean(&kappas.iter().map(|k| k.unwrap()).collect::<Vec<_>>())
        )
    } else {
        "NA".to_string()
    };
    std::fs::write(
        cli.out.join("mean_metrics.csv"),
        format!(
            "metric,value\nfolds,{}\naccuracy,{:.6}\nmacro_f1,{:.6}\nkappa,{kappa_cell}\n",
            n_folds,
            mean(&accs),
            mean(&f1s)
        ),
    )?;
    println!(
        "mean over {n_folds} folds: accuracy={:.4} macro_f1={:.4}",
        mean(&accs),
        mean(&f1s)
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// ops / bench
// ---------------------------------------------------------------------------

fn load_or_init(
    cli: &Cli,
    run: &RunConfig,
    checkpoint: Option<&Path>,
) -> Result<(ModelParams, ModelConfig)> {
    match checkpoint {
        Some(p) => network::load_checkpoint(p),
        None => {
            let cfg = model_config(cli, run)?;
            let params = network::init_params(&cfg, cli.seed)?;
            Ok((params, cfg))
        }
    }
}

fn cmd_ops(
    cli: &Cli,
    run: &RunConfig,
    checkpoint: Option<&Path>,
    input: Option<&Path>,
    output: Option<&Path>,
    measure_latency: bool,
) -> Result<u8> {
    let (params, cfg) = load_or_init(cli, run, checkpoint)?;
    let breakdown = efficiency::count_flops(&cfg)?;
    let batch = match input {
        Some(p) => Some(pipeline::batch_for_recording(
            &signal_io::load_signal(p)?,
            run,
            &cfg,
        )?),
        None => None,
    };
    let insd = if cfg.dense_input {
        1.0
    } else {
        match &batch {
            Some(b) if b.mask.iter().any(|&m| m) => {
                efficiency::measure_insd(&b.rasters, &b.mask)?
            }
            _ => 1.0, // no measurement input: report the conservative bound
        }
    };
    let spike_rate = if cfg.no_elif {
        None
    } else {
        let mut states: Vec<Vec<f64>> = Vec::new();
        match &batch {
            Some(b) => {
                for e in 0..b.rasters.len() {
                    let win = pipeline::window_for_epoch(b, e, cfg.window_radius, cfg.t_b);
                    let out = network::forward(&win, &params, &cfg, Mode::Eval)?;
                    states.extend(out.h_seq.into_iter().map(|(_, h)| h));
                }
            }
            None => {
                let n = 2 * cfg.window_radius + 1;
                let win = network::WindowInput {
                    rasters: vec![vec![0.0; 2 * cfg.t_b]; n],
                    mask: vec![true; n],
                    center: n / 2,
                };
                let out = network::forward(&win, &params, &cfg, Mode::Eval)?;
                states.extend(out.h_seq.into_iter().map(|(_, h)| h));
            }
        }
        Some(network::spike_stats(&states, cfg.fire_threshold)?)
    };
    let latency = if measure_latency {
        Some(efficiency::bench_latency(&params, &cfg, 20, 3)?)
    } else {
        None
    };
    let mut name = cli.profile.clone();
    if cfg.dense_input {
        name.push_str("+a1");
    }
    if cfg.single_branch {
        name.push_str("+a2");
    }
    if cfg.no_elif {
        name.push_str("+a4");
    }
    let row = ops_report_row(&name, &breakdown, insd, spike_rate, latency)?;
    let out_path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cli.out.join("ops.csv"));
    std::fs::write(&out_path, ops_report_csv(&[row.clone()]))?;
    println!(
        "params={} flops_total={:.6e} effective_ops={:.6e} insd={:.6} -> {}",
        row.params,
        row.flops_total,
        row.effective_ops,
        row.insd,
        out_path.display()
    );
    Ok(0)
}

fn cmd_bench(
    cli: &Cli,
    run: &RunConfig,
    checkpoint: Option<&Path>,
    samples: usize,
    warmup: usize,
) -> Result<u8> {
    let (params, cfg) = load_or_init(cli, run, checkpoint)?;
    let (median, p90) = efficiency::bench_latency(&params, &cfg, samples, warmup)?;
    println!("latency_ms_median={median:.3} latency_ms_p90={p90:.3}");
    Ok(0)
}
