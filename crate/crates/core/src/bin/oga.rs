use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use oga_core::embedding::{
    generate_synthetic, save_embedding_set, save_text_classifier, EmbeddingFormat, SyntheticSpec,
};
use oga_core::harness::{
    dump_caches, render_report, run_experiment, write_atomic, write_outputs, ExperimentConfig,
    ExperimentReport, ReportFormat,
};
use oga_core::Result;

#[derive(Parser)]
#[command(name = "oga", version, about = "Online Gaussian adaptation benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment matrix from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Also write the final cache of the first seed for every cache-based cell.
        #[arg(long)]
        dump_cache: Option<PathBuf>,
    },
    /// Generate a synthetic embedding set and matching text classifier.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0.3)]
        dispersion: f64,
        #[arg(long, default_value_t = 0.15)]
        text_noise: f64,
        #[arg(long, default_value = "binary")]
        format: String,
        /// Output prefix; writes `<out>.ogae` and `<out>.ogat` (or `.csv` / `.text.csv`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render a JSON report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, dump_cache } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let report = run_experiment(&cfg)?;
            let written = write_outputs(&cfg, &report)?;
            if written.is_empty() {
                print!("{}", render_report(&report, ReportFormat::Markdown)?);
            }
            for p in written {
                eprintln!("wrote {}", p.display());
            }
            if let Some(dir) = dump_cache {
                for p in dump_caches(&cfg, &dir)? {
                    eprintln!("wrote {}", p.display());
                }
            }
        }
        Command::Synth {
            seed,
            k,
            d,
            per_class,
            dispersion,
            text_noise,
            format,
            out,
        } => {
            let format = match format.as_str() {
                "binary" => EmbeddingFormat::Binary,
                "csv" => EmbeddingFormat::Csv,
                other => {
                    return Err(oga_core::OgaError::Config(format!("unknown format {other:?}")))
                }
            };
            let spec = SyntheticSpec::new(seed, k, d, per_class, dispersion, text_noise);
            let (set, clf) = generate_synthetic(&spec)?;
            let (emb_ext, clf_ext) = match format {
                EmbeddingFormat::Binary => ("ogae", "ogat"),
                EmbeddingFormat::Csv => ("csv", "text.csv"),
            };
            let emb_path = out.with_extension(emb_ext);
            let clf_path = out.with_extension(clf_ext);
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| oga_core::OgaError::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })?;
            }
            save_embedding_set(&set, &emb_path, format)?;
            save_text_classifier(&clf, &clf_path, format)?;
            eprintln!("wrote {} and {}", emb_path.display(), clf_path.display());
        }
        Command::Report { input, format, out } => {
            let text = std::fs::read_to_string(&input).map_err(|e| oga_core::OgaError::Io {
                path: input.clone(),
                source: e,
            })?;
            let report = ExperimentReport::from_json(&text)?;
            let rendered = render_report(&report, format.parse()?)?;
            match out {
                Some(path) => write_atomic(&path, rendered.as_bytes())?,
                None => print!("{rendered}"),
            }
        }
    }
    Ok(())
}
