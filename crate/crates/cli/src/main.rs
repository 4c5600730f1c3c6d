use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gface_cli::commands::{
    self, bc_probability, combined_probability, gradient_fd_suite, grid_select,
    kfda_eigen_oracle, laplace_stationarity_check, latent_codebook, train_fe_stack,
    train_predictor, validation_record, woodbury_exactness_check, TrainMode,
};
use gface_cli::config::{default_config_toml, load_config, Config};
use gface_cli::eval::{kfold_eval, paired_t_one_sided};
use gface_cli::synth::gen_domains;
use gface_core::kfda::{build_kfda, kfda_dense};
use gface_core::model_io::{load_codebook, load_model, save_codebook, save_model};
use gface_core::pairfile::{load_pairs, save_pairs};
use gface_core::pipeline::{extract_dataset, FacePair};
use gface_core::{Error, Predictor, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "gface",
    version,
    about = "Multi-task Gaussian process face verification: training, evaluation, clustering, and feature extraction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a default configuration file to stdout or a file
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic verification pair files for all domains
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Directory receiving target.pairs and source<k>.pairs
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and save it as a JSON document
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Target-domain pair file
        #[arg(long)]
        pairs: PathBuf,
        /// Source-domain pair files, repeatable
        #[arg(long = "source")]
        sources: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = TrainMode::Bc)]
        mode: TrainMode,
    },
    /// Cross-validated evaluation, or scoring of a saved model
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long = "source")]
        sources: Vec<PathBuf>,
        /// Score this saved model on the pairs instead of cross-validating
        #[arg(long)]
        model: Option<PathBuf>,
        /// Also evaluate the extractor-plus-classifier combination
        #[arg(long)]
        combined: bool,
        /// Write the pooled ROC curve to this CSV file
        #[arg(long)]
        roc: Option<PathBuf>,
        /// Pick beta and sigma (and anchors) on a held-out split first
        #[arg(long)]
        grid: bool,
    },
    /// Cluster a trained model's latent space into a codebook
    Cluster {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write codebook features of pairs as CSV
    Extract {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic training gradients against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 6)]
        instances: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run the numerical oracle battery
    Selfcheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            let _ = writeln!(std::io::stderr(), "error: {err}");
            let code = match err {
                Error::Numerical(_) | Error::Optimization(_) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::InitConfig { out } => {
            let text = default_config_toml();
            match out {
                Some(path) => {
                    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                        fs::create_dir_all(dir)?;
                    }
                    fs::write(path, text)?;
                }
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { config, out_dir } => cmd_synth(&config, &out_dir),
        Command::Train { config, pairs, sources, out, mode } => {
            cmd_train(&config, &pairs, &sources, &out, mode)
        }
        Command::Eval { config, pairs, sources, model, combined, roc, grid } => {
            cmd_eval(&config, &pairs, &sources, model.as_deref(), combined, roc.as_deref(), grid)
        }
        Command::Cluster { config, model, out } => cmd_cluster(&config, &model, &out),
        Command::Extract { config, model, codebook, pairs, out } => {
            cmd_extract(&config, &model, &codebook, &pairs, &out)
        }
        Command::Gradcheck { instances, seed } => cmd_gradcheck(instances, seed),
        Command::Selfcheck => cmd_selfcheck(),
    }
}

fn load_sources(paths: &[PathBuf]) -> Result<Vec<Vec<FacePair>>> {
    paths.iter().map(load_pairs).collect()
}

fn cmd_synth(config_path: &Path, out_dir: &Path) -> Result<ExitCode> {
    let config = load_config(config_path)?;
    fs::create_dir_all(out_dir)?;
    let mut spec = config.synth.clone();
    spec.sources = config.synth.sources;
    let data = gen_domains(&spec);
    let target_path = out_dir.join("target.pairs");
    save_pairs(&target_path, &data.target)?;
    println!("wrote {} ({} pairs)", target_path.display(), data.target.len());
    for (i, source) in data.sources.iter().enumerate() {
        let path = out_dir.join(format!("source{}.pairs", i + 1));
        save_pairs(&path, source)?;
        println!("wrote {} ({} pairs)", path.display(), source.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    config_path: &Path,
    pairs_path: &Path,
    source_paths: &[PathBuf],
    out: &Path,
    mode: TrainMode,
) -> Result<ExitCode> {
    let config = load_config(config_path)?;
    let target = load_pairs(pairs_path)?;
    let sources = load_sources(source_paths)?;

    let predictor = train_predictor(&target, &sources, mode, &config)?;
    let validation = match mode {
        TrainMode::Bc => Some(validation_record(&predictor, &target, &config)?),
        TrainMode::Fe => None,
    };
    let model = &predictor.model;
    println!("rounds: {}", model.trace.len());
    if let Some(last) = model.trace.last() {
        println!("objective: {last:.6}");
    }
    println!("converged: {}", model.converged);
    if let Some(v) = &validation {
        println!("validation_accuracy: {:.6}", v.accuracy);
        println!("validation_auc: {:.6}", v.auc);
    }
    save_model(out, model, validation)?;
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn write_roc_csv(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let mut out = String::from("fpr,tpr\n");
    for (fpr, tpr) in points {
        out.push_str(&format!("{fpr:.6},{tpr:.6}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

fn cmd_eval(
    config_path: &Path,
    pairs_path: &Path,
    source_paths: &[PathBuf],
    model_path: Option<&Path>,
    combined: bool,
    roc_path: Option<&Path>,
    grid: bool,
) -> Result<ExitCode> {
    let mut config = load_config(config_path)?;
    let target = load_pairs(pairs_path)?;
    let sources = load_sources(source_paths)?;

    if let Some(path) = model_path {
        return cmd_eval_saved(path, &target, &config);
    }

    if grid || config.eval.grid_search {
        config = grid_select(&target, &sources, &config)?;
        println!(
            "grid_selected: beta={} sigma={} anchors={}",
            config.model.beta, config.model.kfda_sigma, config.model.n_anchors
        );
    }

    let config_text = toml::to_string_pretty(&config)
        .map_err(|e| Error::format(format!("config reserialization: {e}")))?;
    let k = config.eval.k_folds;
    let seed = config.model.seed;
    let threshold = config.pipeline.threshold;

    let bc_report = kfold_eval(&target, k, seed, threshold, &config_text, |train| {
        let predictor = train_predictor(train, &sources, TrainMode::Bc, &config)?;
        let cfg = config.clone();
        Ok(Box::new(move |pair: &FacePair| bc_probability(&predictor, pair, &cfg))
            as Box<dyn Fn(&FacePair) -> Result<f64>>)
    })?;
    println!("mode: classifier");
    print!("{}", bc_report.render());

    if let Some(path) = roc_path {
        write_roc_csv(path, &bc_report.roc)?;
        println!("wrote {}", path.display());
    }

    if combined {
        let combined_report = kfold_eval(&target, k, seed, threshold, &config_text, |train| {
            let stack = train_fe_stack(train, &sources, &config)?;
            let cfg = config.clone();
            Ok(Box::new(move |pair: &FacePair| combined_probability(&stack, pair, &cfg))
                as Box<dyn Fn(&FacePair) -> Result<f64>>)
        })?;
        println!("mode: combined");
        print!("{}", combined_report.render());
        let diffs: Vec<f64> = combined_report
            .fold_accuracy
            .iter()
            .zip(&bc_report.fold_accuracy)
            .map(|(c, b)| c - b)
            .collect();
        println!("combined_minus_classifier_p: {:.4}", paired_t_one_sided(&diffs)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval_saved(model_path: &Path, target: &[FacePair], config: &Config) -> Result<ExitCode> {
    let (model, stored) = load_model(model_path)?;
    let predictor = Predictor::new(model)?;
    let record = validation_record(&predictor, target, config)?;
    println!("accuracy: {:.6}", record.accuracy);
    println!("auc: {:.6}", record.auc);
    println!("n_pairs: {}", record.n_pairs);
    if let Some(stored) = stored {
        let matches = (record.accuracy - stored.accuracy).abs() <= 1e-12
            && (record.auc - stored.auc).abs() <= 1e-12
            && record.n_pairs == stored.n_pairs;
        println!("validation_match: {matches}");
        if !matches {
            let _ = writeln!(
                std::io::stderr(),
                "stored validation (accuracy {:.6}, auc {:.6}, {} pairs) not reproduced",
                stored.accuracy,
                stored.auc,
                stored.n_pairs
            );
            return Ok(ExitCode::from(3));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_cluster(config_path: &Path, model_path: &Path, out: &Path) -> Result<ExitCode> {
    let config = load_config(config_path)?;
    let (model, _) = load_model(model_path)?;
    let predictor = Predictor::new(model)?;
    let codebook = latent_codebook(&predictor, &config)?;
    println!("clusters: {}", codebook.entries.len());
    for (i, entry) in codebook.entries.iter().enumerate() {
        println!(
            "cluster {i}: weight {:.4} probability {:.4} variance {:.6}",
            entry.weight, entry.probability, entry.variance
        );
    }
    save_codebook(out, &codebook)?;
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_extract(
    config_path: &Path,
    model_path: &Path,
    codebook_path: &Path,
    pairs_path: &Path,
    out: &Path,
) -> Result<ExitCode> {
    load_config(config_path)?;
    let (model, _) = load_model(model_path)?;
    let predictor = Predictor::new(model)?;
    let codebook = load_codebook(codebook_path)?;
    let pairs = load_pairs(pairs_path)?;
    let data = extract_dataset(&pairs, &predictor, &codebook)?;

    let mut text = String::from("label");
    for j in 0..data.x.ncols() {
        text.push_str(&format!(",f{j}"));
    }
    text.push('\n');
    for i in 0..data.len() {
        text.push_str(&format!("{}", data.y[i]));
        for j in 0..data.x.ncols() {
            text.push_str(&format!(",{}", data.x[(i, j)]));
        }
        text.push('\n');
    }
    fs::write(out, text)?;
    println!("wrote {} ({} rows, {} features)", out.display(), data.len(), data.x.ncols());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(instances: usize, seed: u64) -> Result<ExitCode> {
    if instances == 0 {
        return Err(Error::contract("gradcheck needs at least one instance"));
    }
    let report = gradient_fd_suite(instances, seed)?;
    println!(
        "gradcheck: {} instances, max rel error theta {:.3e}, latent {:.3e}, {:.2}s",
        report.instances, report.max_rel_theta, report.max_rel_z, report.seconds
    );
    if report.passed(1e-4) {
        println!("gradcheck: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck: FAIL (tolerance 1e-4)");
        Ok(ExitCode::from(3))
    }
}

fn cmd_selfcheck() -> Result<ExitCode> {
    let mut failures = 0usize;
    let mut report = |name: &str, ok: bool, detail: String| {
        println!("{}: {} ({detail})", name, if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    let op = woodbury_exactness_check(32, 11)?;
    report("woodbury_exactness", op.max() <= 1e-8, format!("max rel {:.3e}", op.max()));

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst_kfda: f64 = 0.0;
    for _ in 0..20 {
        let n = 4 + rng.random_range(0..9);
        let b = DMatrix::from_fn(n, n + 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let mut k = &b * b.transpose();
        for i in 0..n {
            k[(i, i)] += 0.5;
        }
        let y = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let lambda = 10f64.powf(-3.0 + 2.0 * rng.random::<f64>());
        let st = build_kfda(&y)?;
        let eval = kfda_dense(&k, &st, lambda)?;
        let oracle = kfda_eigen_oracle(&k, &y, lambda)?;
        worst_kfda = worst_kfda.max((eval.j_star - oracle).abs() / oracle.abs().max(1e-12));
    }
    report("kfda_eigen_oracle", worst_kfda <= 1e-6, format!("max rel {worst_kfda:.3e}"));

    let worst_mode = laplace_stationarity_check(10, 7)?;
    report("laplace_stationarity", worst_mode <= 1e-8, format!("max residual {worst_mode:.3e}"));

    let grad = gradient_fd_suite(4, 13)?;
    report(
        "gradient_fd",
        grad.passed(1e-4),
        format!("theta {:.3e} latent {:.3e}", grad.max_rel_theta, grad.max_rel_z),
    );

    let blobs = commands::three_blob_benchmark(45)?;
    report(
        "clustering_blobs",
        blobs.rand_index >= 0.95 && blobs.descent_ok,
        format!("rand index {:.3}, {} clusters", blobs.rand_index, blobs.n_clusters),
    );

    if failures == 0 {
        println!("selfcheck: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("selfcheck: FAIL ({failures} checks)");
        Ok(ExitCode::from(3))
    }
}
