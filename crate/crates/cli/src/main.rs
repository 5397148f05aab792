use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use avsr::config::RunConfig;
use avsr::decoder::{aggregate, render_table, render_tsv, score_wer, WerReport};
use avsr::experiment::{
    examples_for, load_records, run_experiment, Cell, DataCondition, Dataset, FrontEnd, Grid, Lab,
    Recognizer, SystemKind,
};
use avsr::features::{logmel, save_features, upsample_visual};
use avsr::fusion::{self, ForwardOptions};
use avsr::gradcheck::{run_suite, Precision, SuiteConfig};
use avsr::io::{wav, write_atomic};
use avsr::separation::{apply_mask, si_snr, MaskModel, Provenance};
use avsr::seqtrain::{render_log, Criterion};
use avsr::synthdata::{build_corpus, mix_at_snr, measured_snr_db, CorpusInfo, Manifest, Snr, Split};
use avsr::tdnn::FusionMode;

#[derive(Parser)]
#[command(name = "avsr", version, about = "Audio-visual overlapped speech recognition on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: clean utterances plus their mixtures.
    Synth(SynthArgs),
    /// Mix two WAV files at a requested SNR.
    Mix(MixArgs),
    /// Write log-mel and upsampled visual feature files for a corpus.
    Features(FeaturesArgs),
    /// Train one recognizer.
    Train(TrainArgs),
    /// Decode a corpus split with a checkpoint.
    Decode(DecodeArgs),
    /// Score a hypothesis file.
    Score(ScoreArgs),
    /// Enhance mixtures with an oracle or learned time-frequency mask.
    Separate(SeparateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train and score a grid of systems.
    Experiment(ExperimentArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed; overrides `seeds.root`.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds.root = s;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Audio,
    Visual,
    Concat,
    Vgate,
    Avgate,
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Audio => FusionMode::Audio,
            FusionArg::Visual => FusionMode::Visual,
            FusionArg::Concat => FusionMode::Concat,
            FusionArg::Vgate => FusionMode::Vgate,
            FusionArg::Avgate => FusionMode::Avgate,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Lfmmi,
    Ce,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Lfmmi => Criterion::Lfmmi,
            CriterionArg::Ce => Criterion::Ce,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Oracle,
    Learned,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Table1,
    Tables,
    All,
}

impl From<GridArg> for Grid {
    fn from(g: GridArg) -> Self {
        match g {
            GridArg::Table1 => Grid::Table1,
            GridArg::Tables => Grid::Tables,
            GridArg::All => Grid::All,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory (default: the configured corpus path).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MixArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "WAV")]
    target: PathBuf,
    #[arg(long, value_name = "WAV")]
    interferer: PathBuf,
    /// Target-to-interferer ratio in dB, or `clean`.
    #[arg(long, value_name = "DB", allow_hyphen_values = true)]
    snr: Snr,
    #[arg(long, value_name = "WAV")]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory (default: the configured corpus path).
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: Split,
    /// Mixture conditions to include; `clean` selects the clean utterances.
    #[arg(long, value_name = "LIST", value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<Snr>>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory (default: the configured corpus path).
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// Checkpoint and log directory (default: `paths.out`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    /// Concatenate the visual features with the gated output.
    #[arg(long)]
    plus_concat: bool,
    #[arg(long, value_enum)]
    criterion: Option<CriterionArg>,
    /// Add the overlapped training mixtures at these SNRs (mult* training).
    #[arg(long, value_name = "LIST", value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<Snr>>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Corpus directory (default: the one named in the checkpoint's config).
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, value_name = "LIST", value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<Snr>>,
    /// Hypothesis file (TSV: id, condition, reference, hypothesis).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Directory receiving one gate trace (`<id>.gates`) per utterance.
    #[arg(long, value_name = "PATH")]
    dump_gates: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    /// Hypothesis file written by `decode`.
    #[arg(long, value_name = "PATH")]
    hyps: PathBuf,
    #[arg(long, default_value = "system")]
    system: String,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long, default_value = "-")]
    data: String,
    /// Only score these conditions.
    #[arg(long, value_name = "LIST", value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<Snr>>,
    /// Report TSV.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SeparateArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory (default: the configured corpus path).
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, value_name = "LIST", value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<Snr>>,
    #[arg(long, value_enum, default_value = "oracle")]
    mask: MaskArg,
    /// Mask estimator checkpoint; trained and saved to `<out>/masknet.ckpt`
    /// when absent.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Receives `<id>.wav` (enhanced audio) and `<id>.mask` per mixture.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "both")]
    precision: PrecisionArg,
    /// Also write the report here.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "tables")]
    grid: GridArg,
    /// Run directory, or a `.tsv` path that receives the report (the run
    /// directory is then `<stem>-run` next to it).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Test conditions of the Table 2/3 grid.
    #[arg(long, value_name = "LIST", value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<Snr>>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Mix(a) => mix(a),
        Command::Features(a) => features(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Score(a) => score(a),
        Command::Separate(a) => separate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Experiment(a) => experiment(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn corpus_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag.unwrap_or_else(|| cfg.paths.corpus_dir());
    if !dir.join("manifest.tsv").is_file() {
        bail!("no corpus at {} (run `avsr synth` first)", dir.display());
    }
    Ok(dir)
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let cfg = a.common.load()?;
    let dir = a.out.unwrap_or_else(|| cfg.paths.corpus_dir());
    let info = build_corpus(&cfg.corpus, cfg.seeds.corpus_seed(), &dir, a.common.force)?;
    let manifest = Manifest::load(&dir.join("manifest.tsv"))?;
    println!(
        "wrote {} records ({} symbols, seed {}) to {}",
        manifest.records.len(),
        info.symbols.len(),
        info.seed,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn mix(a: MixArgs) -> Result<ExitCode> {
    if a.out.exists() && !a.common.force {
        bail!("{} exists (use --force to overwrite)", a.out.display());
    }
    let target = wav::read_wav(&a.target)?;
    let interferer = wav::read_wav(&a.interferer)?;
    let n = target.len().min(interferer.len());
    let (target, interferer) = (&target[..n], &interferer[..n]);
    let (mixed, gain) = mix_at_snr(target, interferer, a.snr)?;
    wav::write_wav(&a.out, &mixed)?;
    if a.snr.is_clean() {
        println!("wrote {} (clean, {n} samples)", a.out.display());
    } else {
        let measured = measured_snr_db(target, interferer, gain);
        println!("wrote {} ({n} samples, gain {gain:.6}, measured SNR {measured:.6} dB)", a.out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn features(a: FeaturesArgs) -> Result<ExitCode> {
    let cfg = a.common.load()?;
    let dir = corpus_dir(&cfg, a.corpus)?;
    let info = CorpusInfo::load(&dir)?;
    let manifest = Manifest::load(&dir.join("manifest.tsv"))?;
    let records: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| r.split == a.split)
        .filter(|r| match (&a.snr, r.snr()) {
            (None, _) => true,
            (Some(list), None) => list.contains(&Snr::Clean),
            (Some(list), Some(s)) => list.contains(&s),
        })
        .collect();
    let loaded = load_records(&manifest, &info.symbols, records)?;
    fs::create_dir_all(&a.out)?;
    for r in &loaded {
        let x = logmel(&r.audio)?;
        let v = upsample_visual(&r.visual, x.rows())?;
        for (suffix, m) in [("fbank", &x), ("visual", &v)] {
            let path = a.out.join(format!("{}.{suffix}", r.record.id));
            if path.exists() && !a.common.force {
                bail!("{} exists (use --force to overwrite)", path.display());
            }
            save_features(&path, m)?;
        }
    }
    println!("wrote features for {} records to {}", loaded.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = a.common.load()?;
    if let Some(out) = a.out {
        cfg.paths.out = out;
    }
    let corpus = corpus_dir(&cfg, a.corpus)?;
    if let Some(f) = a.fusion {
        cfg.arch.fusion = f.into();
    }
    if a.plus_concat {
        cfg.arch.plus_concat = true;
    }
    if let Some(c) = a.criterion {
        cfg.train.criterion = c.into();
    }
    cfg.experiment.clean_epochs = cfg.train.epochs;
    cfg.experiment.mult_epochs = cfg.train.epochs;
    cfg.paths.corpus = fs::canonicalize(&corpus)?;
    cfg.validate()?;
    let out = cfg.paths.out.clone();
    if out.join("best.ckpt").exists() && !a.common.force {
        bail!("{} already holds a trained model (use --force to overwrite)", out.display());
    }
    let system = SystemKind::integrated(cfg.arch.fusion, cfg.arch.plus_concat);
    let cell = Cell {
        system,
        data: if a.snr.is_some() { DataCondition::Mult } else { DataCondition::Clean },
        criterion: cfg.train.criterion,
        eval: Vec::new(),
    };
    let data = Dataset::load(&corpus, cfg.features.normalize)?;
    let lab = Lab::new(cfg, data);
    let (outcome, _) = lab.train_cell(&cell, Some(&out), a.snr.as_deref())?;
    let step0 = outcome.log.first().ok_or_else(|| anyhow!("empty training log"))?;
    println!("step 0 loss {:.9}", step0.loss);
    print!("{}", render_log(&outcome.log));
    println!(
        "best epoch {} (dev WER {:.2}%) -> {}",
        outcome.best_epoch,
        outcome.best_dev_wer,
        out.join("best.ckpt").display()
    );
    Ok(ExitCode::SUCCESS)
}

const HYPS_HEADER: &str = "id\tcondition\treference\thypothesis";

fn decode(a: DecodeArgs) -> Result<ExitCode> {
    let rec = Recognizer::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let corpus = corpus_dir(&rec.config, a.corpus)?;
    let info = CorpusInfo::load(&corpus)?;
    if info.symbols.len() != rec.net.dims.pdfs {
        bail!(
            "checkpoint has {} outputs but the corpus has {} symbols",
            rec.net.dims.pdfs,
            info.symbols.len()
        );
    }
    let manifest = Manifest::load(&corpus.join("manifest.tsv"))?;
    let examples = examples_for(&manifest, &info.symbols, &rec.norms, a.split, a.snr.as_deref())?;
    let den = rec.denominator(&info)?;
    if let Some(dir) = &a.dump_gates {
        if !rec.net.arch.fusion.is_gated() {
            bail!("--dump-gates needs a gated system, checkpoint is `{}`", rec.net.arch.fusion);
        }
        fs::create_dir_all(dir)?;
    }
    let mut hyps = String::from(HYPS_HEADER);
    hyps.push('\n');
    let mut scored = Vec::with_capacity(examples.len());
    for (cond, ex) in &examples {
        let hyp = rec.decode(ex, &den)?;
        if let Some(dir) = &a.dump_gates {
            let out = fusion::run(&rec.net, &rec.params, ex.x.as_ref(), ex.v.as_ref(), ForwardOptions::default())?;
            if let Some(trace) = out.trace {
                trace.write(&dir.join(format!("{}.gates", ex.id)))?;
            }
        }
        let _ = writeln!(
            hyps,
            "{}\t{cond}\t{}\t{}",
            ex.id,
            info.symbols.names(&ex.transcript).join(" "),
            info.symbols.names(&hyp).join(" ")
        );
        scored.push((cond.clone(), score_wer(&ex.transcript, &hyp)?));
    }
    if let Some(p) = &a.out {
        write_atomic(p, hyps.as_bytes())?;
    }
    let label = a.checkpoint.display().to_string();
    let rows = aggregate(&label, &rec.net.arch.fusion.to_string(), "-", &scored);
    print!("{}", render_table(&rows));
    Ok(ExitCode::SUCCESS)
}

fn score(a: ScoreArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.hyps).with_context(|| format!("reading {}", a.hyps.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(HYPS_HEADER) {
        bail!("{}: not a hypothesis file (expected header `{HYPS_HEADER}`)", a.hyps.display());
    }
    let wanted: Option<Vec<String>> = a.snr.map(|l| l.iter().map(Snr::to_string).collect());
    let mut scored: Vec<(String, WerReport)> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            bail!("{}:{}: expected 4 fields, found {}", a.hyps.display(), n + 2, f.len());
        }
        if wanted.as_ref().is_some_and(|w| !w.iter().any(|c| c == f[1])) {
            continue;
        }
        let reference: Vec<&str> = f[2].split_whitespace().collect();
        let hyp: Vec<&str> = f[3].split_whitespace().collect();
        scored.push((f[1].to_string(), score_wer(&reference, &hyp)?));
    }
    let fusion = a.fusion.map_or_else(|| "-".to_string(), |f| FusionMode::from(f).to_string());
    let rows = aggregate(&a.system, &fusion, &a.data, &scored);
    if let Some(p) = &a.out {
        write_atomic(p, render_tsv(&rows).as_bytes())?;
    }
    print!("{}", render_table(&rows));
    Ok(ExitCode::SUCCESS)
}

fn separate(a: SeparateArgs) -> Result<ExitCode> {
    let cfg = a.common.load()?;
    let corpus = corpus_dir(&cfg, a.corpus)?;
    fs::create_dir_all(&a.out)?;
    let data = Dataset::load(&corpus, cfg.features.normalize)?;
    let snrs: Vec<Snr> = a.snr.unwrap_or_else(|| cfg.corpus.snrs(a.split).to_vec());
    let overlapped: Vec<Snr> = snrs.into_iter().filter(|s| !s.is_clean()).collect();
    let mixes = data.mixtures(a.split, &overlapped);
    let front = match a.mask {
        MaskArg::Oracle => FrontEnd::Oracle,
        MaskArg::Learned => FrontEnd::Learned,
    };
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.out.join("masknet.ckpt"));
    if matches!(a.mask, MaskArg::Learned) {
        if let Some(p) = &a.checkpoint {
            MaskModel::load(p).with_context(|| format!("loading {}", p.display()))?;
        }
    }
    let lab = Lab::new(cfg, data).with_masknet_path(ckpt);
    let mut enhanced = Vec::with_capacity(mixes.len());
    for m in &mixes {
        let mask = match front {
            FrontEnd::Oracle => avsr::experiment::oracle_mask_for(&lab.data, m)?,
            FrontEnd::Learned => avsr::separation::learned_mask(lab.masknet()?, &m.audio, &m.visual)?,
        };
        let provenance = match front {
            FrontEnd::Oracle => Provenance::Oracle,
            FrontEnd::Learned => Provenance::Learned,
        };
        let out = apply_mask(&m.audio, &mask, provenance)?;
        for (path, is_wav) in [(format!("{}.wav", m.record.id), true), (format!("{}.mask", m.record.id), false)] {
            let path = a.out.join(path);
            if path.exists() && !a.common.force {
                bail!("{} exists (use --force to overwrite)", path.display());
            }
            if is_wav {
                wav::write_wav(&path, &out.audio)?;
            } else {
                mask.write(&path)?;
            }
        }
        enhanced.push(out.audio);
    }
    println!("condition\tn\tsi_snr_mixture\tsi_snr_enhanced");
    for snr in &overlapped {
        let (mut before, mut after, mut n) = (0.0, 0.0, 0usize);
        for (m, e) in mixes.iter().zip(&enhanced).filter(|(m, _)| m.snr() == Some(*snr)) {
            let Some(info) = &m.record.mix else { continue };
            let Some(target) = lab.data.utterances(a.split).iter().find(|u| u.record.id == info.target_id) else {
                continue;
            };
            let t = &target.audio[..m.audio.len()];
            before += si_snr(t, &m.audio)?;
            after += si_snr(t, e)?;
            n += 1;
        }
        if n > 0 {
            println!("{snr}\t{n}\t{:.3}\t{:.3}", before / n as f64, after / n as f64);
        }
    }
    println!("wrote {} enhanced mixtures ({}) to {}", mixes.len(), front_name(front), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn front_name(f: FrontEnd) -> &'static str {
    match f {
        FrontEnd::Oracle => "oracle",
        FrontEnd::Learned => "learned",
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let root = a.common.seed.unwrap_or(7);
    let precisions: &[Precision] = match a.precision {
        PrecisionArg::F32 => &[Precision::F32],
        PrecisionArg::F64 => &[Precision::F64],
        PrecisionArg::Both => &[Precision::F32, Precision::F64],
    };
    let mut text = String::new();
    let mut ok = true;
    for &p in precisions {
        let report = run_suite(root, p, SuiteConfig::default())?;
        ok &= report.all_passed();
        text.push_str(&report.render());
    }
    let _ = writeln!(text, "{}", if ok { "ALL PASS" } else { "FAILURES" });
    print!("{text}");
    if let Some(p) = &a.out {
        write_atomic(p, text.as_bytes())?;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn experiment(a: ExperimentArgs) -> Result<ExitCode> {
    let mut cfg = a.common.load()?;
    let mut report_copy = None;
    if let Some(out) = a.out {
        if out.extension().is_some_and(|e| e == "tsv") {
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            cfg.paths.out = out.with_file_name(format!("{stem}-run"));
            report_copy = Some(out);
        } else {
            cfg.paths.out = out;
        }
    }
    if let Some(snrs) = a.snr {
        cfg.experiment.test_snrs = snrs;
    }
    cfg.validate()?;
    let report = run_experiment(&cfg, a.grid.into(), a.common.force)?;
    if let Some(p) = &report_copy {
        write_atomic(p, report.tsv.as_bytes())?;
    }
    print!("{}", report.table);
    eprintln!("report: {}", report_copy.unwrap_or_else(|| cfg.paths.out.join("report.tsv")).display());
    Ok(ExitCode::SUCCESS)
}
