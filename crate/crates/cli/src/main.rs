use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slt::config::{DecodeSweepConfig, RunConfig};
use slt::data::{
    generate_synthetic, load_corpus, load_split, load_vocabularies, make_batch, Sample, Split, SyntheticConfig,
};
use slt::decoding::DecodeConfig;
use slt::embeddings::FeatureSequence;
use slt::evaluation::{evaluate, pipeline, sweep, EvalOptions};
use slt::model::{max_output_len, SignTransformer};
use slt::numerics::Tensor;
use slt::training::{checkpoint, train, OutputDir};
use slt::{Error, Result};

#[derive(Parser)]
#[command(name = "slt", version, about = "Joint sign language recognition and translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (train/dev/test manifests and feature files).
    GenSynthetic(GenArgs),
    /// Train a model; writes best.ckpt, train_log.jsonl and config.toml.
    Train(TrainArgs),
    /// Score a checkpoint on one split, or sweep decoding settings on dev.
    Evaluate(EvaluateArgs),
    /// Decode a single feature file or gloss sequence.
    Translate(TranslateArgs),
    /// Recognize glosses with one checkpoint and translate them with a
    /// gloss2text checkpoint.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training samples; dev and test get a tenth of this each.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 20)]
    gloss_vocab: usize,
    #[arg(long, default_value_t = 16)]
    d_in: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set optim.lr=5e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_r: Option<f64>,
    #[arg(long)]
    lambda_t: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Translation beam width; 0 is greedy.
    #[arg(long, default_value_t = 0)]
    beam: usize,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// CTC prefix beam width; 0 or 1 is best path.
    #[arg(long, default_value_t = 0)]
    ctc_beam: usize,
    #[arg(long, default_value_t = 60)]
    max_len: usize,
}

impl DecodeArgs {
    fn options(&self) -> Result<EvalOptions> {
        if !(0.0..=2.0).contains(&self.alpha) || self.max_len == 0 {
            return Err(Error::Config(format!(
                "--alpha must lie in [0, 2] and --max-len must be positive, got {} and {}",
                self.alpha, self.max_len
            )));
        }
        Ok(EvalOptions {
            ctc_beam_width: self.ctc_beam,
            decode: DecodeConfig {
                beam_width: self.beam,
                alpha: self.alpha,
                max_len: self.max_len,
            },
            batch_size: 32,
        })
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Pick beam width and alpha on dev, then score test with them.
    #[arg(long)]
    sweep: bool,
    /// Sweep grid: comma-separated beam widths.
    #[arg(long, value_delimiter = ',', default_values_t = DecodeSweepConfig::default().beam_widths)]
    beam_widths: Vec<usize>,
    /// Sweep grid: comma-separated length-penalty exponents.
    #[arg(long, value_delimiter = ',', default_values_t = DecodeSweepConfig::default().alphas)]
    alphas: Vec<f64>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file (`.sltf`) for sign-input checkpoints.
    #[arg(long, conflicts_with = "glosses")]
    features: Option<PathBuf>,
    /// Whitespace-separated glosses for gloss2text checkpoints.
    #[arg(long)]
    glosses: Option<String>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    recognizer: PathBuf,
    #[arg(long)]
    translator: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Feed the reference glosses to the translator instead of recognizing.
    #[arg(long)]
    oracle_glosses: bool,
    #[command(flatten)]
    decode: DecodeArgs,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Compatibility(_) => 3,
        _ => 1,
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what}: {} does not exist", path.display())))
    }
}

fn require_manifest(corpus: &Path, split: Split) -> Result<()> {
    require_file(&slt::data::corpus::manifest_path(corpus, split), "corpus")
}

fn load_checkpoint(path: &Path, what: &str) -> Result<SignTransformer> {
    require_file(path, what)?;
    Ok(checkpoint::load(path)?.0)
}

/// The checkpoint must use the vocabularies derived from this corpus.
fn check_vocabularies(model: &SignTransformer, corpus: &Path) -> Result<()> {
    require_manifest(corpus, Split::Train)?;
    let vocabs = load_vocabularies(corpus)?;
    if vocabs.gloss != model.vocabs.gloss || vocabs.text != model.vocabs.text {
        return Err(Error::Compatibility(format!(
            "checkpoint vocabularies differ from those of {}",
            corpus.display()
        )));
    }
    Ok(())
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        seed: a.seed,
        n_samples: a.samples,
        gloss_vocab: a.gloss_vocab,
        d_in: a.d_in,
    };
    let corpus = generate_synthetic(&a.out, &cfg)?;
    for split in Split::ALL {
        println!("{split}={}", corpus.split(split).len());
    }
    Ok(())
}

fn train_overrides(a: &TrainArgs) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for item in &a.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    let quoted = |s: &str| format!("{s:?}");
    let path = |p: &Path| quoted(&p.display().to_string());
    let flags: [(&str, Option<String>); 15] = [
        ("protocol", a.protocol.as_deref().map(quoted)),
        ("corpus", a.corpus.as_deref().map(path)),
        ("output", a.output.as_deref().map(path)),
        ("seed", a.seed.map(|v| v.to_string())),
        ("loss.lambda_r", a.lambda_r.map(|v| format!("{v:?}"))),
        ("loss.lambda_t", a.lambda_t.map(|v| format!("{v:?}"))),
        ("optim.lr", a.lr.map(|v| format!("{v:?}"))),
        ("optim.batch_size", a.batch_size.map(|v| v.to_string())),
        ("optim.max_iterations", a.max_iterations.map(|v| v.to_string())),
        ("optim.eval_every", a.eval_every.map(|v| v.to_string())),
        ("model.d_model", a.d_model.map(|v| v.to_string())),
        ("model.heads", a.heads.map(|v| v.to_string())),
        ("model.layers", a.layers.map(|v| v.to_string())),
        ("model.d_ff", a.d_ff.map(|v| v.to_string())),
        ("model.dropout", a.dropout.map(|v| format!("{v:?}"))),
    ];
    out.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_owned(), v))));
    Ok(out)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let overrides = train_overrides(&a)?;
    let cfg = match &a.config {
        Some(path) => {
            require_file(path, "config")?;
            RunConfig::load(path, &overrides)?
        }
        None => RunConfig::from_toml("", &overrides)?,
    };
    cfg.check_paths()?;
    let corpus = load_corpus(&cfg.corpus, Split::Train)?;
    let dev = load_split(&cfg.corpus, Split::Dev, &corpus.vocabs)?;
    let out = OutputDir::create(&cfg.output)?;
    let config_path = cfg.output.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::Io {
        path: config_path.clone(),
        source: e,
    })?;
    let outcome = train(&cfg, &corpus.samples, &dev, corpus.vocabs, Some(&out))?;
    println!("iterations={}", outcome.state.iteration);
    println!("stop={:?}", outcome.stop);
    println!("checkpoint={}", out.checkpoint().display());
    for line in outcome.best_eval.to_kv().lines() {
        println!("dev.{line}");
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint, "checkpoint")?;
    check_vocabularies(&model, &a.corpus)?;
    println!("protocol={}", model.protocol);
    if a.sweep {
        require_manifest(&a.corpus, Split::Dev)?;
        require_manifest(&a.corpus, Split::Test)?;
        let grid = DecodeSweepConfig {
            beam_widths: a.beam_widths,
            alphas: a.alphas,
            ctc_beam_width: a.decode.ctc_beam.max(1),
            max_len: a.decode.max_len,
        };
        grid.validate()?;
        let dev = load_split(&a.corpus, Split::Dev, &model.vocabs)?;
        let test = load_split(&a.corpus, Split::Test, &model.vocabs)?;
        print!("{}", sweep(&model, &dev, &test, &grid)?.to_kv());
    } else {
        require_manifest(&a.corpus, a.split)?;
        let samples = load_split(&a.corpus, a.split, &model.vocabs)?;
        println!("split={}", a.split);
        print!("{}", evaluate(&model, &samples, &a.decode.options()?)?.to_kv());
    }
    Ok(())
}

fn translate_cmd(a: TranslateArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint, "checkpoint")?;
    let opts = a.decode.options()?;
    let (features, glosses) = match (&a.features, &a.glosses, model.protocol.uses_features()) {
        (Some(path), None, true) => {
            require_file(path, "features")?;
            (slt::data::sltf::read_features(path)?, Vec::new())
        }
        (None, Some(text), false) => {
            let tokens: Vec<&str> = text.split_whitespace().collect();
            if tokens.is_empty() {
                return Err(Error::Config("--glosses is empty".into()));
            }
            (Tensor::zeros(&[1, model.d_in]), model.vocabs.gloss.encode_all(&tokens))
        }
        (_, _, true) => return Err(Error::Config(format!("{} checkpoints need --features", model.protocol))),
        (_, _, false) => return Err(Error::Config(format!("{} checkpoints need --glosses", model.protocol))),
    };
    if features.cols() != model.d_in {
        return Err(Error::Compatibility(format!(
            "features have width {}, checkpoint expects {}",
            features.cols(),
            model.d_in
        )));
    }
    let sample = Sample {
        id: "input".into(),
        features: FeatureSequence::new(features)?,
        glosses,
        sentence: Vec::new(),
    };
    let batch = make_batch(&[&sample])?;
    let mut estimate = sample.frames();
    if model.protocol.recognizes() {
        let recognized = model.recognize(&batch, opts.ctc_beam_width)?.remove(0);
        estimate = recognized.len();
        println!("glosses={}", model.vocabs.gloss.decode(&recognized)?.join(" "));
    } else if !model.protocol.uses_features() {
        estimate = sample.glosses.len();
    }
    if model.protocol.translates() {
        let cap = max_output_len(estimate, opts.decode.max_len);
        let h = model.translate(&batch, &opts.decode, &[cap])?.remove(0);
        println!("sentence={}", model.vocabs.text.decode(h.words())?.join(" "));
    }
    Ok(())
}

fn pipeline_cmd(a: PipelineArgs) -> Result<()> {
    let recognizer = load_checkpoint(&a.recognizer, "recognizer checkpoint")?;
    let translator = load_checkpoint(&a.translator, "translator checkpoint")?;
    check_vocabularies(&recognizer, &a.corpus)?;
    require_manifest(&a.corpus, a.split)?;
    let samples = load_split(&a.corpus, a.split, &recognizer.vocabs)?;
    let report = pipeline(&recognizer, &translator, &samples, &a.decode.options()?, a.oracle_glosses)?;
    println!("split={}", a.split);
    println!("oracle_glosses={}", a.oracle_glosses);
    print!("{}", report.to_kv());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
