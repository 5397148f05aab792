use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    synthesize_utterance, Bigram, Manifest, MixInfo, Mixture, MixtureSpec, Record, RecordKind, Snr,
    Split, SymbolSet, Utterance,
};
use crate::error::{Error, Result};
use crate::io::{rawmat, wav, write_alignment, write_atomic};
use crate::util::{derive_seed, par_map, rng, tag};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const INFO_FILE: &str = "corpus.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    pub train_snrs: Vec<Snr>,
    pub dev_snrs: Vec<Snr>,
    pub test_snrs: Vec<Snr>,
    pub mixtures_per_condition: usize,
    pub min_transcript_len: usize,
    pub max_transcript_len: usize,
    /// Standard deviation of the white noise added to every utterance.
    pub noise_level: f64,
    pub num_symbols: usize,
    pub num_visemes: usize,
    pub visual_dim: usize,
    pub duration_range_ms: (u32, u32),
    pub bigram_sharpness: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let mut test_snrs = Snr::test_grid();
        test_snrs.push(Snr::Clean);
        Self {
            num_train: 400,
            num_dev: 50,
            num_test: 50,
            train_snrs: Snr::training_grid(),
            dev_snrs: Snr::training_grid(),
            test_snrs,
            mixtures_per_condition: 1,
            min_transcript_len: 3,
            max_transcript_len: 8,
            noise_level: 0.005,
            num_symbols: 12,
            num_visemes: 6,
            visual_dim: 8,
            duration_range_ms: (120, 280),
            bigram_sharpness: 2.0,
        }
    }
}

impl CorpusConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.num_train,
            Split::Dev => self.num_dev,
            Split::Test => self.num_test,
        }
    }

    pub fn snrs(&self, split: Split) -> &[Snr] {
        match split {
            Split::Train => &self.train_snrs,
            Split::Dev => &self.dev_snrs,
            Split::Test => &self.test_snrs,
        }
    }

    pub fn symbol_set(&self) -> SymbolSet {
        let mut set = SymbolSet::standard(self.num_symbols, self.num_visemes, self.visual_dim);
        set.duration_range_ms = self.duration_range_ms;
        set
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_transcript_len == 0 || self.min_transcript_len > self.max_transcript_len {
            return Err(Error::Config(format!(
                "bad transcript length range {}..={}",
                self.min_transcript_len, self.max_transcript_len
            )));
        }
        if self.mixtures_per_condition == 0 {
            return Err(Error::Config("mixtures_per_condition must be >= 1".into()));
        }
        if self.num_visemes == 0 || self.num_visemes >= self.num_symbols {
            return Err(Error::Config("need fewer viseme classes than symbols".into()));
        }
        self.symbol_set().validate()
    }
}

/// Everything needed to interpret a generated corpus, stored next to its
/// manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub seed: u64,
    pub config: CorpusConfig,
    pub symbols: SymbolSet,
    pub bigram: Bigram,
}

impl CorpusInfo {
    pub fn new(config: CorpusConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let symbols = config.symbol_set();
        let bigram = Bigram::random(
            config.num_symbols,
            config.bigram_sharpness,
            &mut rng(derive_seed(seed, &[tag("bigram")])),
        );
        Ok(Self {
            seed,
            config,
            symbols,
            bigram,
        })
    }

    pub fn load(corpus_dir: &Path) -> Result<Self> {
        let path = corpus_dir.join(INFO_FILE);
        let text = fs::read_to_string(&path)?;
        toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("corpus info serializes")
    }

    /// Deterministically synthesizes utterance `index` of `split`.
    pub fn utterance(&self, split: Split, index: usize) -> Result<Utterance> {
        let split_tag = tag(split.as_str());
        let mut text_rng = rng(derive_seed(self.seed, &[split_tag, index as u64, tag("text")]));
        let len = text_rng.random_range(self.config.min_transcript_len..=self.config.max_transcript_len);
        let transcript = self.bigram.sample(len, &mut text_rng);
        let id = format!("{split}-u{index:05}");
        synthesize_utterance(
            &id,
            &transcript,
            &self.symbols,
            self.config.noise_level,
            derive_seed(self.seed, &[split_tag, index as u64, tag("synth")]),
        )
    }

    /// Mixture specs for every (utterance, condition, repeat) of a split.
    pub fn mixture_plan(&self, split: Split, utts: &[Utterance]) -> Result<Vec<(usize, Option<usize>, MixtureSpec)>> {
        let mut plan = Vec::new();
        let split_tag = tag(split.as_str());
        for (i, target) in utts.iter().enumerate() {
            for (c, &snr) in self.config.snrs(split).iter().enumerate() {
                for k in 0..self.config.mixtures_per_condition {
                    let seed = derive_seed(self.seed, &[split_tag, i as u64, c as u64, k as u64, tag("mix")]);
                    let interferer = if snr.is_clean() {
                        None
                    } else {
                        Some(pick_interferer(utts, i, seed)?)
                    };
                    let spec = MixtureSpec {
                        target_id: target.id.clone(),
                        interferer_id: interferer.map_or_else(|| "-".to_string(), |j| utts[j].id.clone()),
                        snr,
                        seed,
                    };
                    plan.push((i, interferer, spec));
                }
            }
        }
        Ok(plan)
    }
}

/// Prefers interferers at least as long as the target so the target keeps
/// its full transcript after truncation.
fn pick_interferer(utts: &[Utterance], target: usize, seed: u64) -> Result<usize> {
    let need = utts[target].audio.len();
    let mut candidates: Vec<usize> = (0..utts.len())
        .filter(|&j| j != target && utts[j].audio.len() >= need)
        .collect();
    if candidates.is_empty() {
        candidates = (0..utts.len()).filter(|&j| j != target).collect();
    }
    if candidates.is_empty() {
        return Err(Error::Config(
            "overlapped conditions need at least two utterances per split".into(),
        ));
    }
    let mut r = rng(seed);
    Ok(candidates[r.random_range(0..candidates.len())])
}

fn mixture_id(spec: &MixtureSpec, repeats: usize) -> String {
    let mut id = format!("{}-{}", spec.target_id, spec.snr.tag());
    if repeats > 1 {
        id.push_str(&format!("-{}", spec.seed % 100_000));
    }
    id
}

struct Written {
    record: Record,
}

fn write_example(
    out_dir: &Path,
    rel_dir: &str,
    id: &str,
    kind: RecordKind,
    split: Split,
    audio: &[f32],
    utt: &Utterance,
    names: &[String],
    mix: Option<MixInfo>,
) -> Result<Written> {
    let rel = |ext: &str| PathBuf::from(format!("{rel_dir}/{id}.{ext}"));
    let (a, v, l) = (rel("wav"), rel("vis"), rel("ali"));
    wav::write_wav(&out_dir.join(&a), audio)?;
    rawmat::write(&out_dir.join(&v), rawmat::Magic::Visual, &utt.visual)?;
    write_alignment(&out_dir.join(&l), &utt.alignment)?;
    Ok(Written {
        record: Record {
            kind,
            split,
            id: id.to_string(),
            audio: a,
            visual: v,
            transcript: utt.transcript.iter().map(|&s| names[s].clone()).collect(),
            alignment: l,
            mix,
        },
    })
}

/// Generates the corpus under `out_dir`: per-utterance WAV/visual/alignment
/// files for clean utterances and their mixtures, `corpus.toml` and
/// `manifest.tsv`. Interferers are always drawn from the target's own split.
pub fn build_corpus(config: &CorpusConfig, seed: u64, out_dir: &Path, force: bool) -> Result<CorpusInfo> {
    let info = CorpusInfo::new(config.clone(), seed)?;
    if out_dir.exists() {
        if !force {
            return Err(Error::OutputExists(out_dir.to_path_buf()));
        }
        fs::remove_dir_all(out_dir)?;
    }
    let names = info.symbols.symbols.clone();
    let mut manifest = Manifest {
        base_dir: out_dir.to_path_buf(),
        records: Vec::new(),
    };
    for split in Split::ALL {
        let n = config.count(split);
        let utt_dir = format!("{split}/utt");
        let mix_dir = format!("{split}/mix");
        fs::create_dir_all(out_dir.join(&utt_dir))?;
        fs::create_dir_all(out_dir.join(&mix_dir))?;

        let indices: Vec<usize> = (0..n).collect();
        let utts = par_map(&indices, |&i| info.utterance(split, i))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let written = par_map(&utts, |u| {
            write_example(out_dir, &utt_dir, &u.id, RecordKind::Utt, split, &u.audio, u, &names, None)
        });
        for w in written {
            manifest.records.push(w?.record);
        }

        let plan = info.mixture_plan(split, &utts)?;
        let repeats = config.mixtures_per_condition;
        let written = par_map(&plan, |(ti, ii, spec)| -> Result<Written> {
            let mix = Mixture::simulate(spec.clone(), &utts[*ti], ii.map(|j| &utts[j]))?;
            let id = mixture_id(spec, repeats);
            let info = MixInfo {
                target_id: spec.target_id.clone(),
                interferer_id: spec.interferer_id.clone(),
                snr: spec.snr,
            };
            write_example(out_dir, &mix_dir, &id, RecordKind::Mix, split, &mix.audio, &mix.target, &names, Some(info))
        });
        for w in written {
            manifest.records.push(w?.record);
        }
    }
    write_atomic(&out_dir.join(INFO_FILE), info.to_toml().as_bytes())?;
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest.render().as_bytes())?;
    Ok(info)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            num_train: 4,
            num_dev: 2,
            num_test: 0,
            max_transcript_len: 4,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn counts_and_sections() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("c");
        build_corpus(&small(), 3, &out, false).unwrap();
        let m = Manifest::load(&out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.utterances(Split::Train).count(), 4);
        assert_eq!(m.mixtures(Split::Train, None).count(), 4 * 6);
        assert_eq!(m.mixtures(Split::Dev, None).count(), 2 * 6);
        assert_eq!(m.records.iter().filter(|r| r.split == Split::Test).count(), 0);
        let text = fs::read_to_string(out.join(MANIFEST_FILE)).unwrap();
        assert!(text.ends_with("# test\n"));
        assert!(m.missing_files(&m.records).is_empty());
        let info = CorpusInfo::load(&out).unwrap();
        assert_eq!(info.config, small());
    }

    #[test]
    fn interferers_stay_within_split() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("c");
        let cfg = CorpusConfig { num_test: 3, ..small() };
        build_corpus(&cfg, 11, &out, false).unwrap();
        let m = Manifest::load(&out.join(MANIFEST_FILE)).unwrap();
        for r in &m.records {
            if let Some(mix) = &r.mix {
                assert!(mix.target_id.starts_with(r.split.as_str()));
                if !mix.snr.is_clean() {
                    assert!(mix.interferer_id.starts_with(r.split.as_str()));
                    assert_ne!(mix.interferer_id, mix.target_id);
                }
            }
        }
    }

    #[test]
    fn existing_dir_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("c");
        fs::create_dir_all(&out).unwrap();
        assert!(matches!(
            build_corpus(&small(), 1, &out, false),
            Err(Error::OutputExists(_))
        ));
        build_corpus(&small(), 1, &out, true).unwrap();
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        build_corpus(&small(), 5, &a, false).unwrap();
        build_corpus(&small(), 5, &b, false).unwrap();
        for f in [MANIFEST_FILE, INFO_FILE, "train/mix/train-u00001-snr-5.wav", "dev/utt/dev-u00001.vis"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }
}
