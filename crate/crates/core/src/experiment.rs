//! Experiment harness: loads a generated corpus, trains every system of a
//! grid and scores it per test condition.
//!
//! A run directory looks like
//!
//! ```text
//! <out>/config.toml            effective configuration
//! <out>/corpus/                generated corpus (manifest.tsv, corpus.toml, ...)
//! <out>/masknet.ckpt           learned mask estimator, when a grid needs it
//! <out>/systems/<cell>/        best.ckpt, epoch-NNN.ckpt, train_log.tsv,
//!                              rows.tsv, cell.hash
//! <out>/report.tsv, report.txt
//! ```
//!
//! A cell whose `cell.hash` matches the current configuration is not
//! retrained; its `rows.tsv` is reused.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use crate::autodiff::{Checkpoint, ParamSet};
use crate::config::RunConfig;
use crate::decoder::{aggregate, render_table, render_tsv, score_wer, WerReport, WerRow};
use crate::error::{Error, Result};
use crate::features::{logmel, upsample_visual, NormStats};
use crate::io::{read_alignment, rawmat, wav, write_atomic};
use crate::matrix::Matrix;
use crate::separation::{apply_mask, learned_mask, oracle_irm, train_masknet, MaskModel, Provenance, TfMask};
use crate::seqtrain::{
    build_denominator, decode_one, pretrain_frontend, train, CheckpointSink, Criterion, Example, HmmGraph, HmmTopology,
    TrainConfig, TrainOutcome,
};
use crate::synthdata::{build_corpus, CorpusInfo, Manifest, Record, RecordKind, Snr, Split, SymbolSet};
use crate::tdnn::{ArchConfig, Dims, FusionMode, Network};
use crate::util::{derive_seed, par_map, tag};
use crate::NUM_MEL_BINS;

/// An utterance or mixture read back from a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRecord {
    pub record: Record,
    pub audio: Vec<f32>,
    /// 25 fps visual stream.
    pub visual: Matrix,
    pub alignment: Vec<usize>,
    pub transcript: Vec<usize>,
}

impl LoadedRecord {
    pub fn snr(&self) -> Option<Snr> {
        self.record.snr()
    }
}

pub fn load_records<'a>(
    manifest: &Manifest,
    symbols: &SymbolSet,
    records: impl IntoIterator<Item = &'a Record>,
) -> Result<Vec<LoadedRecord>> {
    let records: Vec<&Record> = records.into_iter().collect();
    let missing = manifest.missing_files(records.iter().copied());
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    par_map(&records, |r| -> Result<LoadedRecord> {
        let names: Vec<&str> = r.transcript.iter().map(String::as_str).collect();
        Ok(LoadedRecord {
            record: (*r).clone(),
            audio: wav::read_wav(&manifest.resolve(&r.audio))?,
            visual: rawmat::read(&manifest.resolve(&r.visual), rawmat::Magic::Visual)?,
            alignment: read_alignment(&manifest.resolve(&r.alignment))?,
            transcript: symbols.indices(&names)?,
        })
    })
    .into_iter()
    .collect()
}

/// Normalization statistics of both input streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Norms {
    pub audio: NormStats,
    pub visual: NormStats,
}

impl Norms {
    pub fn identity(visual_dim: usize) -> Self {
        Self {
            audio: NormStats::identity(NUM_MEL_BINS),
            visual: NormStats::identity(visual_dim),
        }
    }

    /// Statistics of log-mel frames and upsampled visual frames.
    pub fn estimate(records: &[LoadedRecord]) -> Result<Self> {
        let raw = par_map(records, |r| raw_features(&r.audio, &r.visual))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            audio: NormStats::estimate(raw.iter().map(|f| &f.0))?,
            visual: NormStats::estimate(raw.iter().map(|f| &f.1))?,
        })
    }

    pub fn named(&self) -> Vec<(String, NormStats)> {
        vec![
            ("audio".to_string(), self.audio.clone()),
            ("visual".to_string(), self.visual.clone()),
        ]
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let get = |n: &str| {
            ck.norm(n)
                .cloned()
                .ok_or_else(|| Error::format(path, format!("checkpoint has no `{n}` statistics")))
        };
        Ok(Self {
            audio: get("audio")?,
            visual: get("visual")?,
        })
    }
}

/// Log-mel frames and the visual stream upsampled to the same frame count.
fn raw_features(audio: &[f32], visual_25fps: &Matrix) -> Result<(Matrix, Matrix)> {
    let x = logmel(audio)?;
    let v = upsample_visual(visual_25fps, x.rows())?;
    Ok((x, v))
}

/// Normalized network inputs for one recording.
pub fn make_example(
    id: &str,
    audio: &[f32],
    visual_25fps: &Matrix,
    alignment: &[usize],
    transcript: &[usize],
    norms: &Norms,
) -> Result<Example> {
    let (x, v) = raw_features(audio, visual_25fps)?;
    if x.rows() != alignment.len() {
        return Err(Error::Length(format!(
            "{id}: {} acoustic frames but {} alignment labels",
            x.rows(),
            alignment.len()
        )));
    }
    Ok(Example {
        id: id.to_string(),
        x: Some(norms.audio.normalize(&x)?),
        v: Some(norms.visual.normalize(&v)?),
        alignment: alignment.to_vec(),
        transcript: transcript.to_vec(),
    })
}

/// Examples for `records`, optionally with replacement audio (enhanced
/// signals) in the same order.
pub fn make_examples(records: &[LoadedRecord], audio: Option<&[Vec<f32>]>, norms: &Norms) -> Result<Vec<Example>> {
    let idx: Vec<usize> = (0..records.len()).collect();
    par_map(&idx, |&i| {
        let r = &records[i];
        let a = audio.map_or(r.audio.as_slice(), |a| a[i].as_slice());
        make_example(&r.record.id, a, &r.visual, &r.alignment, &r.transcript, norms)
    })
    .into_iter()
    .collect()
}

/// A corpus loaded into memory with its feature statistics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub info: CorpusInfo,
    pub norms: Norms,
    utts: HashMap<Split, Vec<LoadedRecord>>,
    mixes: HashMap<Split, Vec<LoadedRecord>>,
}

impl Dataset {
    /// Loads every record of the corpus in `dir`. Normalization statistics
    /// come from the clean training utterances.
    pub fn load(dir: &Path, normalize: bool) -> Result<Self> {
        let info = CorpusInfo::load(dir)?;
        let manifest = Manifest::load(&dir.join("manifest.tsv"))?;
        let mut utts = HashMap::new();
        let mut mixes = HashMap::new();
        for split in Split::ALL {
            utts.insert(split, load_records(&manifest, &info.symbols, manifest.utterances(split))?);
            mixes.insert(split, load_records(&manifest, &info.symbols, manifest.mixtures(split, None))?);
        }
        let norms = if normalize {
            Norms::estimate(&utts[&Split::Train])?
        } else {
            Norms::identity(info.symbols.visual_dim())
        };
        Ok(Self {
            info,
            norms,
            utts,
            mixes,
        })
    }

    pub fn utterances(&self, split: Split) -> &[LoadedRecord] {
        &self.utts[&split]
    }

    /// Mixtures of `split` whose condition is in `snrs`, in `snrs` order.
    pub fn mixtures(&self, split: Split, snrs: &[Snr]) -> Vec<LoadedRecord> {
        snrs.iter()
            .flat_map(|s| self.mixes[&split].iter().filter(move |r| r.snr() == Some(*s)))
            .cloned()
            .collect()
    }

    /// Overlapped (non-clean) mixtures of `split`.
    pub fn overlapped(&self, split: Split) -> Vec<LoadedRecord> {
        self.mixes[&split].iter().filter(|r| r.snr().is_some_and(|s| !s.is_clean())).cloned().collect()
    }

    pub fn dims(&self) -> Dims {
        Dims {
            audio: NUM_MEL_BINS,
            visual: self.info.symbols.visual_dim(),
            pdfs: self.info.symbols.len(),
        }
    }

    fn target_audio(&self, split: Split, id: &str) -> Result<&[f32]> {
        self.utts[&split]
            .iter()
            .find(|r| r.record.id == id)
            .map(|r| r.audio.as_slice())
            .ok_or_else(|| Error::MissingFiles(vec![id.to_string()]))
    }
}

/// Ideal ratio mask of a mixture record, using `mixture - target` as the
/// scaled interferer.
pub fn oracle_mask_for(data: &Dataset, mix: &LoadedRecord) -> Result<TfMask> {
    let info = mix.record.mix.as_ref().ok_or(Error::Empty("mixture metadata"))?;
    let target = data.target_audio(mix.record.split, &info.target_id)?;
    let n = mix.audio.len();
    if target.len() < n {
        return Err(Error::Length(format!("{}: target shorter than mixture", mix.record.id)));
    }
    let target = &target[..n];
    let interferer: Vec<f32> = mix.audio.iter().zip(target).map(|(m, t)| m - t).collect();
    oracle_irm(target, &interferer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrontEnd {
    Oracle,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SystemKind {
    Integrated { fusion: FusionMode, plus_concat: bool },
    /// Mask-based enhancement followed by a concatenation AVSR recognizer.
    Pipelined(FrontEnd),
}

impl SystemKind {
    pub const INTEGRATED: [SystemKind; 7] = [
        SystemKind::Integrated { fusion: FusionMode::Audio, plus_concat: false },
        SystemKind::Integrated { fusion: FusionMode::Visual, plus_concat: false },
        SystemKind::Integrated { fusion: FusionMode::Concat, plus_concat: false },
        SystemKind::Integrated { fusion: FusionMode::Vgate, plus_concat: false },
        SystemKind::Integrated { fusion: FusionMode::Vgate, plus_concat: true },
        SystemKind::Integrated { fusion: FusionMode::Avgate, plus_concat: false },
        SystemKind::Integrated { fusion: FusionMode::Avgate, plus_concat: true },
    ];

    pub fn integrated(fusion: FusionMode, plus_concat: bool) -> Self {
        SystemKind::Integrated { fusion, plus_concat }
    }

    pub fn fusion(self) -> FusionMode {
        match self {
            SystemKind::Integrated { fusion, .. } => fusion,
            SystemKind::Pipelined(_) => FusionMode::Concat,
        }
    }

    pub fn arch(self, base: &ArchConfig) -> ArchConfig {
        let plus_concat = matches!(self, SystemKind::Integrated { plus_concat: true, .. });
        ArchConfig {
            fusion: self.fusion(),
            plus_concat,
            ..base.clone()
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SystemKind::Integrated { fusion, plus_concat } => {
                write!(f, "{fusion}{}", if *plus_concat { "+concat" } else { "" })
            }
            SystemKind::Pipelined(FrontEnd::Oracle) => f.write_str("pipelined-oracle"),
            SystemKind::Pipelined(FrontEnd::Learned) => f.write_str("pipelined-learned"),
        }
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pipelined-oracle" => return Ok(SystemKind::Pipelined(FrontEnd::Oracle)),
            "pipelined-learned" => return Ok(SystemKind::Pipelined(FrontEnd::Learned)),
            _ => {}
        }
        let (base, plus_concat) = match s.strip_suffix("+concat") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let fusion: FusionMode = base.parse()?;
        if plus_concat && !fusion.is_gated() {
            return Err(Error::Parse(format!("`{s}`: +concat needs a gated system")));
        }
        Ok(SystemKind::Integrated { fusion, plus_concat })
    }
}

/// Training data of a system: clean utterances only, or clean plus
/// overlapped (integrated) / enhanced (pipelined) mixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataCondition {
    Clean,
    Mult,
}

/// One trained-and-scored system of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub system: SystemKind,
    pub data: DataCondition,
    pub criterion: Criterion,
    /// Test conditions; [`Snr::Clean`] scores the clean test utterances.
    pub eval: Vec<Snr>,
}

impl Cell {
    /// System column of the report.
    pub fn system_label(&self) -> String {
        match self.criterion {
            Criterion::Lfmmi => self.system.to_string(),
            Criterion::Ce => format!("{}-ce", self.system),
        }
    }

    /// `clean`, `mult` (pipelined: clean + enhanced) or `mult*` (clean +
    /// overlapped).
    pub fn data_label(&self) -> &'static str {
        match (self.data, self.system) {
            (DataCondition::Clean, _) => "clean",
            (DataCondition::Mult, SystemKind::Pipelined(_)) => "mult",
            (DataCondition::Mult, SystemKind::Integrated { .. }) => "mult*",
        }
    }

    /// Seeds initialization and shuffling. Excludes the criterion, so
    /// LF-MMI and CE systems of the same layout start from the same weights.
    pub fn seed_key(&self) -> String {
        format!("{}_{}", self.system, self.data_label().replace('*', "star"))
    }

    /// Filesystem-safe unique name.
    pub fn key(&self) -> String {
        let data = self.data_label().replace('*', "star");
        let eval: Vec<String> = self.eval.iter().map(|s| s.tag()).collect();
        format!("{}_{}_{}", self.system_label(), data, eval.join("-"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// Audio-only LF-MMI vs CE and visual-only, clean-trained, clean test.
    Table1,
    /// Every system x {clean, mult}, overlapped test conditions.
    Tables,
    All,
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Grid::Table1),
            "tables" => Ok(Grid::Tables),
            "all" => Ok(Grid::All),
            _ => Err(Error::Parse(format!("unknown grid `{s}` (table1, tables, all)"))),
        }
    }
}

impl Grid {
    pub fn cells(self, cfg: &RunConfig) -> Vec<Cell> {
        let mut cells = Vec::new();
        if matches!(self, Grid::Table1 | Grid::All) {
            let audio = SystemKind::integrated(FusionMode::Audio, false);
            let visual = SystemKind::integrated(FusionMode::Visual, false);
            for (system, criterion) in [(audio, Criterion::Lfmmi), (audio, Criterion::Ce), (visual, Criterion::Lfmmi)] {
                cells.push(Cell {
                    system,
                    data: DataCondition::Clean,
                    criterion,
                    eval: vec![Snr::Clean],
                });
            }
        }
        if matches!(self, Grid::Tables | Grid::All) {
            let systems = SystemKind::INTEGRATED
                .into_iter()
                .chain([SystemKind::Pipelined(FrontEnd::Oracle), SystemKind::Pipelined(FrontEnd::Learned)]);
            for system in systems {
                for data in [DataCondition::Clean, DataCondition::Mult] {
                    cells.push(Cell {
                        system,
                        data,
                        criterion: Criterion::Lfmmi,
                        eval: cfg.experiment.test_snrs.clone(),
                    });
                }
            }
        }
        cells
    }
}

/// A recognizer ready for decoding.
#[derive(Debug, Clone)]
pub struct Recognizer {
    pub config: RunConfig,
    pub net: Network,
    pub params: ParamSet<f32>,
    pub norms: Norms,
}

impl Recognizer {
    /// Rebuilds a recognizer from a checkpoint alone, using its embedded
    /// configuration.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config = RunConfig::from_toml(&ck.config).map_err(|e| Error::format(path, e.to_string()))?;
        let norms = Norms::from_checkpoint(&ck, path)?;
        let dims = Dims {
            audio: norms.audio.dim(),
            visual: norms.visual.dim(),
            pdfs: config.corpus.num_symbols,
        };
        let net = Network::from_params(&config.arch, dims, &ck.params)?;
        Ok(Self {
            config,
            net,
            params: ck.params,
            norms,
        })
    }

    pub fn denominator(&self, info: &CorpusInfo) -> Result<HmmGraph> {
        let topo = HmmTopology::new(self.net.dims.pdfs, self.config.train.p_self)?;
        build_denominator(&info.bigram, &topo)
    }

    pub fn decode(&self, ex: &Example, den: &HmmGraph) -> Result<Vec<usize>> {
        decode_one(&self.net, &self.params, ex.x.as_ref(), ex.v.as_ref(), den, self.config.train.lm_scale)
    }
}

/// Decodes `(condition, example)` pairs and aggregates them into per-condition
/// rows plus `AVE` and `POOLED`.
pub fn evaluate(
    rec: &Recognizer,
    den: &HmmGraph,
    examples: &[(String, Example)],
    system: &str,
    data_condition: &str,
) -> Result<Vec<WerRow>> {
    let scored = par_map(examples, |(cond, ex)| -> Result<(String, WerReport)> {
        let hyp = rec.decode(ex, den)?;
        Ok((cond.clone(), score_wer(&ex.transcript, &hyp)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(system, &rec.net.arch.fusion.to_string(), data_condition, &scored))
}

/// Outcome of one grid cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub rows: Vec<WerRow>,
    pub best_dev_wer: f64,
    pub best_epoch: usize,
    pub recognizer: Recognizer,
}

impl CellResult {
    pub fn wer(&self, snr: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.snr == snr).map(|r| r.wer)
    }
}

/// Shared state of a run: the dataset plus lazily built resources reused
/// across cells (pretrained visual front-end, mask estimator, enhanced
/// audio).
pub struct Lab {
    pub config: RunConfig,
    pub data: Dataset,
    frontend: OnceLock<ParamSet<f32>>,
    masknet: OnceLock<MaskModel>,
    masknet_path: Option<PathBuf>,
    enhanced: Mutex<HashMap<(FrontEnd, Split), Arc<Vec<Vec<f32>>>>>,
}

impl Lab {
    pub fn new(config: RunConfig, data: Dataset) -> Self {
        Self {
            config,
            data,
            frontend: OnceLock::new(),
            masknet: OnceLock::new(),
            masknet_path: None,
            enhanced: Default::default(),
        }
    }

    /// Caches the mask estimator at `path`; an existing file is reused.
    pub fn with_masknet_path(mut self, path: PathBuf) -> Self {
        self.masknet_path = Some(path);
        self
    }

    fn seed(&self, what: &str) -> u64 {
        derive_seed(self.config.seeds.root, &[tag(what)])
    }

    fn train_config(&self, cell: &Cell) -> TrainConfig {
        TrainConfig {
            criterion: cell.criterion,
            epochs: match cell.data {
                DataCondition::Clean => self.config.experiment.clean_epochs,
                DataCondition::Mult => self.config.experiment.mult_epochs,
            },
            ..self.config.train.clone()
        }
    }

    /// Visual front-end weights after visual-only frame classification on
    /// the clean training utterances.
    pub fn pretrained_frontend(&self) -> Result<&ParamSet<f32>> {
        if let Some(p) = self.frontend.get() {
            return Ok(p);
        }
        let arch = SystemKind::integrated(FusionMode::Visual, false).arch(&self.config.arch);
        let seed = self.seed("pretrain");
        let (net, mut params) = Network::build::<f32>(&arch, self.data.dims(), seed)?;
        let examples = make_examples(self.data.utterances(Split::Train), None, &self.data.norms)?;
        let epochs = self.config.experiment.pretrain_epochs;
        pretrain_frontend(&net, &mut params, &examples, epochs, &self.config.train, seed)?;
        Ok(self.frontend.get_or_init(|| params))
    }

    /// The learned mask estimator, trained on the overlapped training
    /// mixtures against their oracle masks.
    pub fn masknet(&self) -> Result<&MaskModel> {
        if let Some(m) = self.masknet.get() {
            return Ok(m);
        }
        if let Some(p) = self.masknet_path.as_ref().filter(|p| p.is_file()) {
            if let Ok(m) = MaskModel::load(p) {
                if m.net.config == self.config.separation {
                    return Ok(self.masknet.get_or_init(|| m));
                }
            }
        }
        let mixes = self.data.overlapped(Split::Train);
        let raw = par_map(&mixes, |m| -> Result<(Vec<f32>, Matrix, TfMask)> {
            Ok((m.audio.clone(), m.visual.clone(), oracle_mask_for(&self.data, m)?))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (model, report) = train_masknet(&self.config.separation, &raw, self.seed("masknet"))?;
        log::info!("mask estimator epoch losses: {:?}", report.epoch_losses);
        if let Some(p) = &self.masknet_path {
            model.save(p)?;
        }
        Ok(self.masknet.get_or_init(|| model))
    }

    /// Separates `records` with `front`.
    pub fn enhance(&self, front: FrontEnd, records: &[LoadedRecord]) -> Result<Vec<Vec<f32>>> {
        let model = match front {
            FrontEnd::Oracle => None,
            FrontEnd::Learned => Some(self.masknet()?),
        };
        par_map(records, |r| -> Result<Vec<f32>> {
            let (mask, provenance) = match model {
                None => (oracle_mask_for(&self.data, r)?, Provenance::Oracle),
                Some(m) => (learned_mask(m, &r.audio, &r.visual)?, Provenance::Learned),
            };
            Ok(apply_mask(&r.audio, &mask, provenance)?.audio)
        })
        .into_iter()
        .collect()
    }

    fn enhanced_overlapped(&self, front: FrontEnd, split: Split) -> Result<Arc<Vec<Vec<f32>>>> {
        let key = (front, split);
        if let Some(v) = self.enhanced.lock().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let v = Arc::new(self.enhance(front, &self.data.overlapped(split))?);
        self.enhanced.lock().expect("cache lock").insert(key, v.clone());
        Ok(v)
    }

    /// Training and dev examples of a cell. `Mult` cells add every
    /// overlapped mixture, or only those at `snrs` when given.
    pub fn training_data(&self, cell: &Cell, snrs: Option<&[Snr]>) -> Result<(Vec<Example>, Vec<Example>)> {
        let norms = &self.data.norms;
        let mut sets = Vec::with_capacity(2);
        for split in [Split::Train, Split::Dev] {
            let mut ex = make_examples(self.data.utterances(split), None, norms)?;
            if cell.data == DataCondition::Mult {
                let mixes = match snrs {
                    None => self.data.overlapped(split),
                    Some(list) => {
                        let overlapped: Vec<Snr> = list.iter().copied().filter(|s| !s.is_clean()).collect();
                        self.data.mixtures(split, &overlapped)
                    }
                };
                let extra = match (cell.system, snrs) {
                    (SystemKind::Integrated { .. }, _) => make_examples(&mixes, None, norms)?,
                    (SystemKind::Pipelined(front), None) => {
                        let audio = self.enhanced_overlapped(front, split)?;
                        make_examples(&mixes, Some(&audio), norms)?
                    }
                    (SystemKind::Pipelined(front), Some(_)) => {
                        let audio = self.enhance(front, &mixes)?;
                        make_examples(&mixes, Some(&audio), norms)?
                    }
                };
                ex.extend(extra);
            }
            sets.push(ex);
        }
        let dev = thin(sets.pop().expect("dev"), self.config.experiment.dev_limit);
        let train = sets.pop().expect("train");
        Ok((train, dev))
    }

    /// Test examples of a cell, labelled by condition.
    pub fn test_data(&self, cell: &Cell) -> Result<Vec<(String, Example)>> {
        let norms = &self.data.norms;
        let mut out = Vec::new();
        for &snr in &cell.eval {
            let records: Vec<LoadedRecord> = if snr.is_clean() {
                self.data.utterances(Split::Test).to_vec()
            } else {
                self.data.mixtures(Split::Test, &[snr])
            };
            let examples = match cell.system {
                SystemKind::Integrated { .. } => make_examples(&records, None, norms)?,
                SystemKind::Pipelined(_) if snr.is_clean() => make_examples(&records, None, norms)?,
                SystemKind::Pipelined(front) => {
                    let audio = self.enhance(front, &records)?;
                    make_examples(&records, Some(&audio), norms)?
                }
            };
            out.extend(examples.into_iter().map(|e| (snr.to_string(), e)));
        }
        Ok(out)
    }

    /// Effective configuration of a cell, as embedded in its checkpoints.
    pub fn cell_config(&self, cell: &Cell) -> RunConfig {
        let mut c = self.config.clone();
        c.arch = cell.system.arch(&self.config.arch);
        c.train = self.train_config(cell);
        c
    }

    /// Trains one cell on its training data (restricted to `train_snrs`
    /// when given). With `dir`, checkpoints and the training log are
    /// written there.
    pub fn train_cell(
        &self,
        cell: &Cell,
        dir: Option<&Path>,
        train_snrs: Option<&[Snr]>,
    ) -> Result<(TrainOutcome, Recognizer)> {
        let config = self.cell_config(cell);
        let key = cell.seed_key();
        let (net, mut params) = Network::build::<f32>(&config.arch, self.data.dims(), self.seed(&key))?;
        if net.frontend.is_some() && self.config.experiment.pretrain_epochs > 0 {
            let pre = self.pretrained_frontend()?;
            for p in params.iter_mut().filter(|p| p.name.starts_with("frontend.")) {
                p.value = pre.by_name(&p.name).expect("front-end layouts match").value.clone();
            }
        }
        let (train_set, dev_set) = self.training_data(cell, train_snrs)?;
        let sink = dir.map(|d| CheckpointSink {
            dir: d.to_path_buf(),
            config_text: config.to_toml(),
            norms: self.data.norms.named(),
        });
        log::info!("training {} on {} utterances", cell.key(), train_set.len());
        let outcome = train(
            &net,
            params,
            &self.data.info.bigram,
            &train_set,
            &dev_set,
            &config.train,
            self.seed(&format!("{key}/train")),
            sink.as_ref(),
        )?;
        let recognizer = Recognizer {
            config,
            net,
            params: outcome.best.clone(),
            norms: self.data.norms.clone(),
        };
        Ok((outcome, recognizer))
    }

    /// Trains and scores one cell.
    pub fn run_cell(&self, cell: &Cell, dir: Option<&Path>) -> Result<CellResult> {
        let (outcome, recognizer) = self.train_cell(cell, dir, None)?;
        let den = recognizer.denominator(&self.data.info)?;
        let rows = evaluate(&recognizer, &den, &self.test_data(cell)?, &cell.system_label(), cell.data_label())?;
        Ok(CellResult {
            cell: cell.clone(),
            rows,
            best_dev_wer: outcome.best_dev_wer,
            best_epoch: outcome.best_epoch,
            recognizer,
        })
    }
}

/// Every `ceil(n / limit)`-th example, so a capped dev set still spans all
/// conditions.
fn thin(examples: Vec<Example>, limit: usize) -> Vec<Example> {
    if limit == 0 || examples.len() <= limit {
        return examples;
    }
    let stride = examples.len().div_ceil(limit);
    examples.into_iter().step_by(stride).collect()
}

/// Generates the corpus of `cfg` unless an identical one already exists.
pub fn ensure_corpus(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let dir = cfg.paths.corpus_dir();
    let wanted = CorpusInfo::new(cfg.corpus.clone(), cfg.seeds.corpus_seed())?;
    if dir.join("manifest.tsv").is_file() {
        if let Ok(existing) = CorpusInfo::load(&dir) {
            if existing == wanted && !force {
                return Ok(dir);
            }
        }
        if !force {
            return Err(Error::Config(format!(
                "{} holds a different corpus (use --force to regenerate)",
                dir.display()
            )));
        }
    }
    build_corpus(&cfg.corpus, cfg.seeds.corpus_seed(), &dir, true)?;
    Ok(dir)
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<WerRow>,
    pub tsv: String,
    pub table: String,
}

/// Runs `grid` under `cfg.paths.out`, skipping cells whose stored hash
/// matches. With `force`, the corpus and every cell are regenerated.
pub fn run_experiment(cfg: &RunConfig, grid: Grid, force: bool) -> Result<ExperimentReport> {
    let out = &cfg.paths.out;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let corpus = ensure_corpus(cfg, force)?;
    let data = Dataset::load(&corpus, cfg.features.normalize)?;
    let masknet_path = out.join("masknet.ckpt");
    if force && masknet_path.exists() {
        fs::remove_file(&masknet_path)?;
    }
    let lab = Lab::new(cfg.clone(), data).with_masknet_path(masknet_path);
    let mut rows = Vec::new();
    for cell in grid.cells(cfg) {
        let dir = out.join("systems").join(cell.key());
        let hash = cfg.hash(&cell.key());
        let hash_path = dir.join("cell.hash");
        let rows_path = dir.join("rows.tsv");
        if !force && fs::read_to_string(&hash_path).is_ok_and(|h| h.trim() == hash) && rows_path.is_file() {
            log::info!("{}: up to date, skipping", cell.key());
            rows.extend(crate::decoder::parse_tsv(&fs::read_to_string(&rows_path)?)?);
            continue;
        }
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let result = lab.run_cell(&cell, Some(&dir))?;
        write_atomic(&rows_path, render_tsv(&result.rows).as_bytes())?;
        write_atomic(&hash_path, format!("{hash}\n").as_bytes())?;
        rows.extend(result.rows);
    }
    let tsv = render_tsv(&rows);
    let table = render_table(&rows);
    write_atomic(&out.join("report.tsv"), tsv.as_bytes())?;
    write_atomic(&out.join("report.txt"), table.as_bytes())?;
    Ok(ExperimentReport { rows, tsv, table })
}

/// Records of `split` (mixtures restricted to `snrs` when given; `clean`
/// selects the clean utterances) as examples, for decoding outside a grid.
pub fn examples_for(
    manifest: &Manifest,
    symbols: &SymbolSet,
    norms: &Norms,
    split: Split,
    snrs: Option<&[Snr]>,
) -> Result<Vec<(String, Example)>> {
    let records: Vec<&Record> = manifest
        .records
        .iter()
        .filter(|r| r.split == split)
        .filter(|r| match (snrs, r.kind) {
            (None, _) => true,
            (Some(list), RecordKind::Utt) => list.contains(&Snr::Clean) && !manifest_has_clean_mixes(manifest, split),
            (Some(list), RecordKind::Mix) => r.snr().is_some_and(|s| list.contains(&s)),
        })
        .collect();
    let loaded = load_records(manifest, symbols, records)?;
    let examples = make_examples(&loaded, None, norms)?;
    Ok(loaded
        .iter()
        .zip(examples)
        .map(|(r, e)| (r.snr().unwrap_or(Snr::Clean).to_string(), e))
        .collect())
}

fn manifest_has_clean_mixes(manifest: &Manifest, split: Split) -> bool {
    manifest.mixtures(split, Some(&[Snr::Clean])).next().is_some()
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn tiny_config(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.corpus.num_train = 6;
        cfg.corpus.num_dev = 3;
        cfg.corpus.num_test = 3;
        cfg.arch.hidden = 8;
        cfg.arch.bottleneck = 4;
        cfg.arch.audio_layers = 1;
        cfg.arch.visual_layers = 1;
        cfg.arch.fusion_layers = 1;
        cfg.arch.recog_layers = 1;
        cfg.arch.frontend_layers = 1;
        cfg.experiment.pretrain_epochs = 1;
        cfg.experiment.clean_epochs = 1;
        cfg.experiment.mult_epochs = 1;
        cfg.paths.out = out.to_path_buf();
        cfg
    }

    #[test]
    fn system_names_round_trip() {
        let all = SystemKind::INTEGRATED
            .into_iter()
            .chain([SystemKind::Pipelined(FrontEnd::Oracle), SystemKind::Pipelined(FrontEnd::Learned)]);
        for s in all {
            assert_eq!(s.to_string().parse::<SystemKind>().unwrap(), s);
        }
        assert!("concat+concat".parse::<SystemKind>().is_err());
        assert!("nonsense".parse::<SystemKind>().is_err());
    }

    #[test]
    fn grid_cells_have_unique_keys() {
        let cfg = RunConfig::default();
        let cells = Grid::All.cells(&cfg);
        assert_eq!(cells.len(), 3 + 9 * 2);
        let keys: HashSet<String> = cells.iter().map(Cell::key).collect();
        assert_eq!(keys.len(), cells.len());
        assert_eq!(Grid::Table1.cells(&cfg).len() + Grid::Tables.cells(&cfg).len(), cells.len());
    }

    #[test]
    fn criteria_share_initialization_but_not_keys() {
        let cell = |criterion| Cell {
            system: SystemKind::integrated(FusionMode::Audio, false),
            data: DataCondition::Clean,
            criterion,
            eval: vec![Snr::Clean],
        };
        let (a, b) = (cell(Criterion::Lfmmi), cell(Criterion::Ce));
        assert_eq!(a.seed_key(), b.seed_key());
        assert_ne!(a.key(), b.key());
        assert_eq!(b.system_label(), "audio-ce");
    }

    #[test]
    fn tiny_cell_trains_and_scores() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let corpus = ensure_corpus(&cfg, false).unwrap();
        // an identical corpus is reused, a different one is refused
        assert_eq!(ensure_corpus(&cfg, false).unwrap(), corpus);
        let mut other = cfg.clone();
        other.corpus.num_test = 4;
        assert!(ensure_corpus(&other, false).is_err());

        let data = Dataset::load(&corpus, true).unwrap();
        let lab = Lab::new(cfg.clone(), data);
        let cell = Cell {
            system: SystemKind::integrated(FusionMode::Vgate, true),
            data: DataCondition::Mult,
            criterion: Criterion::Lfmmi,
            eval: vec![Snr::Db(0.0), Snr::Db(-5.0)],
        };
        let out = dir.path().join("cell");
        let res = lab.run_cell(&cell, Some(&out)).unwrap();
        let labels: Vec<&str> = res.rows.iter().map(|r| r.snr.as_str()).collect();
        assert_eq!(labels, ["0", "-5", "AVE", "POOLED"]);
        assert!(res.rows.iter().all(|r| r.wer.is_finite() && r.wer >= 0.0));
        assert!(out.join("best.ckpt").is_file());

        let rec = Recognizer::load(&out.join("best.ckpt")).unwrap();
        assert_eq!(rec.net.arch.fusion, FusionMode::Vgate);
        assert!(rec.net.arch.plus_concat);
        let den = rec.denominator(&lab.data.info).unwrap();
        let again = evaluate(&rec, &den, &lab.test_data(&cell).unwrap(), "x", "mult*").unwrap();
        let wers = |rows: &[WerRow]| rows.iter().map(|r| r.wer).collect::<Vec<_>>();
        assert_eq!(wers(&again), wers(&res.rows));
    }
}
