use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msdetr::config::{ExperimentConfig, FusionStrategy};
use msdetr::dataset::read_dataset;
use msdetr::gradcheck::{run_suite, TOLERANCE};
use msdetr::harness::{
    ablate_fusion, ablation_csv, dump_points, eval_csv, generate_dataset, points_csv, run_eval, BranchChoice, Variant,
};
use msdetr::msca::WeightKind;
use msdetr::synth::SceneConfig;
use msdetr::train::{load_model, train};
use msdetr::Result;

#[derive(Parser)]
#[command(name = "msdetr", version, about = "Visible/thermal set-prediction detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic train/test dataset.
    GenData(GenData),
    /// Train a model and write checkpoint.bin, epoch_log.csv and config.toml.
    Train(Train),
    /// Evaluate a checkpoint on a split.
    Eval(Eval),
    /// Compare fusion strategies over several seeds.
    Ablate(Ablate),
    /// Write the sampling points of the top-scoring queries of one scene.
    DumpPoints(DumpPoints),
    /// Run the finite-difference gradient checks.
    GradCheck(GradCheck),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    /// TOML scene configuration; flags below override it.
    #[arg(long)]
    scene_config: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    shift_min: Option<i32>,
    #[arg(long)]
    shift_max: Option<i32>,
}

/// Overrides applied on top of an optional TOML experiment file.
#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    fusion: Option<FusionStrategy>,
    /// Disable modality-balanced optimization.
    #[arg(long)]
    no_mbo: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    val_scenes: Option<usize>,
}

impl ExperimentArgs {
    fn build(&self, seed: Option<u64>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = &self.data_root {
            cfg.data.root = v.clone();
        }
        if let Some(v) = self.fusion {
            cfg.model.fusion = v;
        }
        if self.no_mbo {
            cfg.mbo_enabled = false;
        }
        macro_rules! set {
            ($field:ident => $($path:tt)+) => {
                if let Some(v) = self.$field {
                    cfg.$($path)+ = v;
                }
            };
        }
        set!(epochs => optim.epochs);
        set!(lr => optim.lr);
        set!(batch_size => optim.batch_size);
        set!(queries => model.queries);
        set!(d_model => model.d_model);
        set!(encoder_layers => model.encoder_layers);
        set!(decoder_layers => model.decoder_layers);
        set!(val_scenes => data.val_scenes);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args)]
struct Eval {
    /// Directory of a training run (checkpoint.bin + config.toml).
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// V, F, T or all.
    #[arg(long, default_value = "F")]
    branch: BranchChoice,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    /// First seed; runs use `seed..seed + seeds`.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args)]
struct DumpPoints {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    scene: String,
    #[arg(long, default_value_t = 3)]
    top_q: usize,
    /// Joint or per-modality weights.
    #[arg(long, default_value = "modal")]
    kind: String,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn run_config(run: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&run.join("config.toml"))
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::GenData(a) => {
            let mut sc = match &a.scene_config {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?)
                    .map_err(|e| msdetr::Error::Config(format!("{}: {e}", p.display())))?,
                None => SceneConfig::default(),
            };
            sc.seed = a.seed;
            if let Some(s) = a.size {
                sc.height = s;
                sc.width = s;
            }
            if let Some(v) = a.shift_min {
                sc.shift_x[0] = v;
            }
            if let Some(v) = a.shift_max {
                sc.shift_x[1] = v;
            }
            generate_dataset(&sc, a.train, a.test, &a.out_dir)?;
            std::fs::write(
                a.out_dir.join("scene_config.toml"),
                toml::to_string(&sc).expect("serializable"),
            )?;
            println!("wrote {} train and {} test scenes to {}", a.train, a.test, a.out_dir.display());
        }
        Command::Train(a) => {
            let cfg = a.exp.build(Some(a.seed))?;
            let out = train(&cfg)?;
            for r in &out.log {
                let mr = r.val_mr.map_or("-".into(), |v| format!("{v:.4}"));
                println!("epoch {:>3}  loss {:.4}  val_mr {mr}", r.epoch, r.total_loss);
            }
            println!("run written to {}", cfg.out_dir.display());
        }
        Command::Eval(a) => {
            let cfg = run_config(&a.run)?;
            let model = load_model(&cfg.model, &a.run.join("checkpoint.bin"))?;
            let root = a.data_root.unwrap_or(cfg.data.root.clone());
            let split = a.split.unwrap_or(cfg.data.test_split.clone());
            let scenes = read_dataset(&root, &split)?;
            let out_dir = a.out_dir.unwrap_or_else(|| a.run.join("eval"));
            let rows = run_eval(&model, &scenes, a.branch, &cfg.eval, &out_dir)?;
            print!("{}", eval_csv(&rows));
        }
        Command::Ablate(a) => {
            let cfg = a.exp.build(Some(a.seed))?;
            let train_set = read_dataset(&cfg.data.root, &cfg.data.train_split)?;
            let test_set = read_dataset(&cfg.data.root, &cfg.data.test_split)?;
            let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
            let rows = ablate_fusion(&cfg, &Variant::standard(), &seeds, &train_set, &test_set)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let text = ablation_csv(&rows);
            std::fs::write(cfg.out_dir.join("ablation.csv"), &text)?;
            print!("{text}");
        }
        Command::DumpPoints(a) => {
            let cfg = run_config(&a.run)?;
            let model = load_model(&cfg.model, &a.run.join("checkpoint.bin"))?;
            let root = a.data_root.unwrap_or(cfg.data.root.clone());
            let split = a.split.unwrap_or(cfg.data.test_split.clone());
            let scenes = read_dataset(&root, &split)?;
            let scene = scenes
                .iter()
                .find(|s| s.image_id() == a.scene)
                .ok_or_else(|| msdetr::Error::Config(format!("no scene {} in {split}", a.scene)))?;
            let kind = match a.kind.to_ascii_lowercase().as_str() {
                "joint" => WeightKind::Joint,
                "modal" => WeightKind::Modal,
                k => return Err(msdetr::Error::Config(format!("unknown weight kind {k}"))),
            };
            let rows = dump_points(&model, scene, a.top_q, kind)?;
            let out_dir = a.out_dir.unwrap_or_else(|| a.run.join("points"));
            std::fs::create_dir_all(&out_dir)?;
            let path = out_dir.join(format!("points_{}.csv", a.scene));
            std::fs::write(&path, points_csv(&rows))?;
            println!("{} points written to {}", rows.len(), path.display());
        }
        Command::GradCheck(a) => {
            let reports = run_suite(a.seed, a.points)?;
            let mut ok = true;
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                ok &= r.passed();
                println!(
                    "{status} {:<16} points={:<3} dims={:<5} max_rel_err={:.3e} (tol {TOLERANCE:e})",
                    r.name, r.points, r.dims, r.max_rel_err
                );
            }
            if let Some(dir) = a.out_dir {
                std::fs::create_dir_all(&dir)?;
                let lines: Vec<String> = reports
                    .iter()
                    .map(|r| serde_json::to_string(r).expect("serializable"))
                    .collect();
                std::fs::write(dir.join("grad_check.jsonl"), lines.join("\n") + "\n")?;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}
