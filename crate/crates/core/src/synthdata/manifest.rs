//! Line-delimited corpus manifest.
//!
//! Each split starts with a `# <split>` header line. Records are
//! tab-separated:
//!
//! ```text
//! UTT  id  audio  visual  transcript  alignment
//! MIX  id  audio  visual  transcript  alignment  target_id  interferer_id  snr_db
//! ```
//!
//! Transcripts are space-separated symbols; paths are relative to the
//! manifest's directory; `snr_db` is a number or `clean`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Snr;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Utt,
    Mix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixInfo {
    pub target_id: String,
    pub interferer_id: String,
    pub snr: Snr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub kind: RecordKind,
    pub split: Split,
    pub id: String,
    pub audio: PathBuf,
    pub visual: PathBuf,
    pub transcript: Vec<String>,
    pub alignment: PathBuf,
    pub mix: Option<MixInfo>,
}

impl Record {
    pub fn snr(&self) -> Option<Snr> {
        self.mix.as_ref().map(|m| m.snr)
    }

    fn to_line(&self) -> String {
        let kind = match self.kind {
            RecordKind::Utt => "UTT",
            RecordKind::Mix => "MIX",
        };
        let mut fields = vec![
            kind.to_string(),
            self.id.clone(),
            path_str(&self.audio),
            path_str(&self.visual),
            self.transcript.join(" "),
            path_str(&self.alignment),
        ];
        if let Some(m) = &self.mix {
            fields.push(m.target_id.clone());
            fields.push(m.interferer_id.clone());
            fields.push(m.snr.to_string());
        }
        fields.join("\t")
    }
}

fn path_str(p: &Path) -> String {
    // manifests always use forward slashes
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    /// Directory that relative record paths are resolved against.
    pub base_dir: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Manifest::parse(&text, base).map_err(|e| match e {
            Error::Parse(reason) => Error::format(path, reason),
            other => other,
        })
    }

    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Manifest> {
        let mut split = None;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                split = Some(header.parse::<Split>()?);
                continue;
            }
            let bad = |msg: &str| Error::Parse(format!("line {}: {msg}", lineno + 1));
            let split = split.ok_or_else(|| bad("record before any `# <split>` header"))?;
            let f: Vec<&str> = line.split('\t').collect();
            let kind = match f[0] {
                "UTT" if f.len() == 6 => RecordKind::Utt,
                "MIX" if f.len() == 9 => RecordKind::Mix,
                "UTT" | "MIX" => return Err(bad("wrong field count")),
                other => return Err(bad(&format!("unknown record type `{other}`"))),
            };
            let mix = match kind {
                RecordKind::Utt => None,
                RecordKind::Mix => Some(MixInfo {
                    target_id: f[6].to_string(),
                    interferer_id: f[7].to_string(),
                    snr: f[8].parse()?,
                }),
            };
            records.push(Record {
                kind,
                split,
                id: f[1].to_string(),
                audio: PathBuf::from(f[2]),
                visual: PathBuf::from(f[3]),
                transcript: f[4].split_whitespace().map(str::to_string).collect(),
                alignment: PathBuf::from(f[5]),
                mix,
            });
        }
        Ok(Manifest { base_dir, records })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for split in Split::ALL {
            out.push_str(&format!("# {split}\n"));
            for r in self.records.iter().filter(|r| r.split == split) {
                out.push_str(&r.to_line());
                out.push('\n');
            }
        }
        out
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn utterances(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records
            .iter()
            .filter(move |r| r.split == split && r.kind == RecordKind::Utt)
    }

    /// Mixture records of `split`, optionally restricted to the given
    /// conditions.
    pub fn mixtures<'a>(&'a self, split: Split, snrs: Option<&'a [Snr]>) -> impl Iterator<Item = &'a Record> {
        self.records.iter().filter(move |r| {
            r.split == split
                && r.kind == RecordKind::Mix
                && match (snrs, r.snr()) {
                    (None, _) => true,
                    (Some(list), Some(s)) => list.contains(&s),
                    (Some(_), None) => false,
                }
        })
    }

    /// Ids whose audio, visual or alignment files are missing on disk.
    pub fn missing_files<'a>(&self, records: impl IntoIterator<Item = &'a Record>) -> Vec<String> {
        records
            .into_iter()
            .filter(|r| {
                [&r.audio, &r.visual, &r.alignment]
                    .iter()
                    .any(|p| !self.resolve(p).is_file())
            })
            .map(|r| r.id.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "# train\n\
UTT\ttrain-u00000\ttrain/u0.wav\ttrain/u0.vis\ta c b\ttrain/u0.ali\n\
MIX\ttrain-m0\ttrain/m0.wav\ttrain/m0.vis\ta c b\ttrain/m0.ali\ttrain-u00000\ttrain-u00001\t-5\n\
MIX\ttrain-m1\ttrain/m1.wav\ttrain/m1.vis\ta c b\ttrain/m1.ali\ttrain-u00000\t-\tclean\n\
# dev\n\
# test\n";

    #[test]
    fn parse_and_render_are_inverse() {
        let m = Manifest::parse(SAMPLE, PathBuf::from("/c")).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.records[1].snr(), Some(Snr::Db(-5.0)));
        assert_eq!(m.records[2].snr(), Some(Snr::Clean));
        assert_eq!(m.records[0].transcript, vec!["a", "c", "b"]);
        assert_eq!(m.render(), SAMPLE);
        assert_eq!(m.mixtures(Split::Train, Some(&[Snr::Clean])).count(), 1);
        assert_eq!(m.mixtures(Split::Test, None).count(), 0);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Manifest::parse("UTT\tx\ta\tb\tc\td\n", PathBuf::new()).is_err());
        assert!(Manifest::parse("# train\nFOO\tx\n", PathBuf::new()).is_err());
        assert!(Manifest::parse("# train\nMIX\tx\ta\tb\tc\td\n", PathBuf::new()).is_err());
    }
}
