use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use m3fuse_core::losses::LossReport;
use m3fuse_harness::checks::{gradcheck_suite, iou_fuzz};
use m3fuse_harness::evaluate::{compute_metrics, detect_scenes, Metrics};
use m3fuse_harness::io::{load_checkpoint, read_scenes, save_checkpoint, write_csv, write_line, write_scenes};
use m3fuse_harness::synth::generate_scenes;
use m3fuse_harness::train::{build_model, Trainer};
use m3fuse_harness::{HarnessError, PipelineConfig, Scene};

#[derive(Parser)]
#[command(name = "m3fuse", about = "Multi-representation transformer fusion for 3D detection")]
struct Cli {
    /// Pipeline configuration (TOML). Defaults to the built-in desk config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, env = "M3FUSE_SEED")]
    seed: Option<u64>,
    /// Scene-level worker threads.
    #[arg(long, global = true, env = "M3FUSE_WORKERS", default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic scenes as `<id>.bin` / `<id>.txt` pairs.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Trains on a scene directory (or freshly generated scenes).
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also checkpoint every N steps (0: only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Writes metrics.csv and pr.csv for a checkpoint.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every differentiable stage.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Rotated IoU against a Monte-Carlo estimate.
    IouFuzz {
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 3e-3)]
        tol: f64,
    },
    /// Runs inference on one scene and dumps boxes next to the labels.
    Demo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turns a run directory into plot-ready loss and PR curves.
    PlotData {
        /// Directory holding loss.csv and/or pr.csv.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Smoothing window for the loss curve.
        #[arg(long, default_value_t = 50)]
        window: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn scenes(cfg: &PipelineConfig, data: Option<&Path>) -> Result<Vec<Scene>, HarnessError> {
    match data {
        Some(dir) => read_scenes(dir, &cfg.anchors.class_names),
        None => generate_scenes(cfg, cfg.seed, cfg.synth.scenes),
    }
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Gen { out, scenes } => {
            let n = scenes.unwrap_or(cfg.synth.scenes);
            let generated = generate_scenes(&cfg, cfg.seed, n)?;
            create_dir(out)?;
            write_scenes(out, &generated, &cfg.anchors.class_names)?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::Train {
            data,
            out,
            steps,
            resume,
            checkpoint_every,
        } => train(&cfg, cli.workers, data.as_deref(), out, *steps, resume.as_deref(), *checkpoint_every)?,
        Command::Eval { data, checkpoint, out } => {
            let scenes = scenes(&cfg, data.as_deref())?;
            let (model, mut store) = build_model(&cfg)?;
            load_checkpoint(checkpoint, &mut store, None)?;
            let dets = detect_scenes(&model, &store, &scenes)?;
            let metrics = compute_metrics(&cfg, &scenes, &dets);
            create_dir(out)?;
            write_metrics(out, &metrics)?;
            for r in metrics.rows.iter().filter(|r| r.subset == "all") {
                println!("{:>8} {:>8} {:.4}", r.class, r.metric, r.value);
            }
        }
        Command::Gradcheck { step, tol } => {
            let results = gradcheck_suite(cfg.seed, *step, *tol)?;
            let mut failed = 0;
            for r in &results {
                let ok = r.report.passed();
                failed += usize::from(!ok);
                println!(
                    "{:<16} {} max_rel_error {:.3e} over {} entries ({:.1?}){}",
                    r.name,
                    if ok { "PASS" } else { "FAIL" },
                    r.report.max_rel_error,
                    r.report.checked,
                    r.elapsed,
                    match &r.report.worst {
                        Some((name, i)) if !ok => format!(" worst {name}[{i}]"),
                        _ => String::new(),
                    }
                );
            }
            if failed > 0 {
                return Err(HarnessError::Validation(format!("{failed} gradient checks failed")));
            }
        }
        Command::IouFuzz { pairs, samples, tol } => {
            let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
            let r = iou_fuzz(*pairs, *samples, cfg.seed, threads);
            println!(
                "{} pairs: max |bev - mc| {:.2e}, max |3d - mc| {:.2e}, round trip {:.2e}",
                r.pairs, r.max_bev_error, r.max_3d_error, r.max_round_trip_error
            );
            if r.max_bev_error > *tol || r.max_3d_error > *tol || r.max_round_trip_error > 1e-9 {
                return Err(HarnessError::Validation("iou fuzz out of tolerance".into()));
            }
        }
        Command::Demo {
            checkpoint,
            data,
            scene,
            out,
        } => {
            let all = scenes(&cfg, data.as_deref())?;
            let s = all
                .get(*scene)
                .ok_or_else(|| HarnessError::Validation(format!("scene {scene} out of range ({} scenes)", all.len())))?;
            let (model, mut store) = build_model(&cfg)?;
            load_checkpoint(checkpoint, &mut store, None)?;
            let dets = detect_scenes(&model, &store, std::slice::from_ref(s))?;
            let names = &cfg.anchors.class_names;
            let mut rows: Vec<Vec<String>> = s
                .labels
                .iter()
                .map(|l| box_row("label", &names[l.class], &l.bbox, l.points_inside as f64))
                .collect();
            rows.extend(dets[0].iter().map(|d| box_row("detection", &names[d.class], &d.bbox, d.confidence)));
            write_csv(out, &["kind", "class", "x", "y", "z", "l", "h", "w", "theta", "score"], &rows)?;
            println!("scene {}: {} labels, {} detections", s.id, s.labels.len(), dets[0].len());
        }
        Command::PlotData { run, out, window } => plot_data(run, out, *window)?,
    }
    Ok(())
}

fn box_row(kind: &str, class: &str, b: &m3fuse_core::geometry::Box7, score: f64) -> Vec<String> {
    let mut row = vec![kind.to_string(), class.to_string()];
    row.extend([b.x, b.y, b.z, b.l, b.h, b.w, b.theta, score].map(|v| v.to_string()));
    row
}

fn write_metrics(out: &Path, metrics: &Metrics) -> Result<(), HarnessError> {
    write_csv(&out.join("metrics.csv"), &Metrics::HEADER, &metrics.table())?;
    write_csv(&out.join("pr.csv"), &Metrics::CURVE_HEADER, &metrics.curve_table())
}

fn train(
    cfg: &PipelineConfig,
    workers: usize,
    data: Option<&Path>,
    out: &Path,
    steps: Option<usize>,
    resume: Option<&Path>,
    checkpoint_every: usize,
) -> Result<(), HarnessError> {
    let scenes = scenes(cfg, data)?;
    let mut trainer = Trainer::new(cfg.clone(), &scenes, workers)?;
    if let Some(path) = resume {
        load_checkpoint(path, &mut trainer.store, Some(&mut trainer.adam))?;
    }
    create_dir(out)?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| HarnessError::io(&cfg_path, e))?;

    let loss_path = out.join("loss.csv");
    let fresh = resume.is_none() || !loss_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&loss_path)
        .map_err(|e| HarnessError::io(&loss_path, e))?;
    let mut sink = BufWriter::new(file);
    if fresh {
        write_line(&mut sink, LossReport::CSV_HEADER, &loss_path)?;
    }

    let total = steps.unwrap_or(cfg.optim.steps);
    let ckpt = out.join("checkpoint.bin");
    let mut sink_err = None;
    while trainer.step_count() < total {
        let stop = match checkpoint_every {
            0 => total,
            k => ((trainer.step_count() / k + 1) * k).min(total),
        };
        trainer.run(stop, |step, report| {
            if sink_err.is_none() {
                sink_err = write_line(&mut sink, &report.csv_row(step), &loss_path).err();
            }
            if (step + 1) % 100 == 0 {
                println!("step {:>6} loss {:.4}", step + 1, report.total);
            }
        })?;
        if let Some(e) = sink_err.take() {
            return Err(e);
        }
        save_checkpoint(&ckpt, &trainer.store, Some(&trainer.adam))?;
    }
    std::io::Write::flush(&mut sink).map_err(|e| HarnessError::io(&loss_path, e))?;
    println!("trained {} steps; checkpoint at {}", trainer.step_count(), ckpt.display());
    Ok(())
}

fn read_table(path: &Path) -> Result<Vec<csv::StringRecord>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))?;
    r.records()
        .collect::<Result<_, _>>()
        .map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))
}

fn plot_data(run: &Path, out: &Path, window: usize) -> Result<(), HarnessError> {
    create_dir(out)?;
    let mut wrote = 0;
    let loss = run.join("loss.csv");
    if loss.exists() {
        let records = read_table(&loss)?;
        let total: Vec<f64> = records
            .iter()
            .map(|r| r.get(5).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN))
            .collect();
        let w = window.max(1);
        let rows: Vec<Vec<String>> = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let lo = (i + 1).saturating_sub(w);
                let mean = total[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64;
                vec![r[0].to_string(), total[i].to_string(), mean.to_string()]
            })
            .collect();
        write_csv(&out.join("loss_curve.csv"), &["step", "total", "smoothed"], &rows)?;
        wrote += 1;
    }
    let pr = run.join("pr.csv");
    if pr.exists() {
        let records = read_table(&pr)?;
        let mut groups: Vec<(String, Vec<Vec<String>>)> = Vec::new();
        for r in &records {
            let key = format!("{}_{}", &r[0], &r[1]);
            let row = vec![r[2].to_string(), r[3].to_string()];
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, rows)) => rows.push(row),
                None => groups.push((key, vec![row])),
            }
        }
        for (key, rows) in &groups {
            write_csv(&out.join(format!("pr_{key}.csv")), &["recall", "precision"], rows)?;
            wrote += 1;
        }
    }
    if wrote == 0 {
        return Err(HarnessError::Validation(format!("no loss.csv or pr.csv in {}", run.display())));
    }
    println!("wrote {wrote} curve files to {}", out.display());
    Ok(())
}
