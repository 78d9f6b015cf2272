//! Corpus manifests: which subjects exist, where their files live and which
//! split each belongs to.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::nifti::{ingest_nifti, read_nifti, read_nifti_labels, write_nifti, write_nifti_labels, IngestOptions};
use super::patches::Subject;
use super::phantom::{generate_phantom, NormStats, PhantomSpec};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum SubjectSource {
    /// Generated from a phantom spec; the files hold already z-scored volumes.
    Phantom { spec: PhantomSpec },
    /// Real data; volumes are z-scored when loaded.
    Nifti,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SubjectFiles {
    pub t1: PathBuf,
    pub t2: PathBuf,
    pub seg: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub id: String,
    pub split: Split,
    pub source: SubjectSource,
    /// Relative paths resolve against the manifest's directory.
    pub files: SubjectFiles,
    pub t1_stats: NormStats,
    pub t2_stats: NormStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub subjects: Vec<SubjectRecord>,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("manifest version {} is not {MANIFEST_VERSION}", self.version)));
        }
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Config(format!("subject id {} appears more than once", s.id)));
            }
            let st = [s.t1_stats.mean, s.t1_stats.std, s.t2_stats.mean, s.t2_stats.std];
            if st.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("subject {} has non-finite normalization statistics", s.id)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SubjectRecord> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let m: CorpusManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Reads a subject's volumes from disk.
pub fn load_subject(manifest_dir: &Path, rec: &SubjectRecord) -> Result<Subject> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { manifest_dir.join(p) };
    let (t1, t2) = match rec.source {
        SubjectSource::Phantom { .. } => (read_nifti(resolve(&rec.files.t1))?, read_nifti(resolve(&rec.files.t2))?),
        SubjectSource::Nifti => {
            let o = IngestOptions::default();
            (ingest_nifti(resolve(&rec.files.t1), &o)?, ingest_nifti(resolve(&rec.files.t2), &o)?)
        }
    };
    let seg = read_nifti_labels(resolve(&rec.files.seg))?;
    Subject::new(rec.id.clone(), t1, t2, seg)
}

/// Subject counts for train, val and test, in the 8/2/2 proportion.
pub fn split_counts(n: usize) -> Result<[usize; 3]> {
    if n < 3 {
        return Err(Error::Config(format!(
            "cannot form train/val/test splits from {n} subject(s); use at least 3 (the default is 12)"
        )));
    }
    let held = ((n as f64 / 6.0).round() as usize).max(1);
    Ok([n - 2 * held, held, held])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub num_subjects: usize,
    /// Subject `i` uses phantom seed `seed + i`.
    pub seed: u64,
    pub phantom: PhantomSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { num_subjects: 12, seed: 0, phantom: PhantomSpec::default() }
    }
}

pub fn subject_id(i: usize) -> String {
    format!("sub-{i:03}")
}

/// Generates phantom subjects in memory, with their manifest records.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<(SubjectRecord, Subject)>> {
    let counts = split_counts(cfg.num_subjects)?;
    cfg.phantom.validate()?;
    let mut out = Vec::with_capacity(cfg.num_subjects);
    for i in 0..cfg.num_subjects {
        let split = if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        let spec = PhantomSpec { seed: cfg.seed.wrapping_add(i as u64), ..cfg.phantom.clone() };
        let p = generate_phantom(&spec)?;
        let id = subject_id(i);
        let rec = SubjectRecord {
            id: id.clone(),
            split,
            source: SubjectSource::Phantom { spec },
            files: SubjectFiles {
                t1: format!("{id}_t1.nii.gz").into(),
                t2: format!("{id}_t2.nii.gz").into(),
                seg: format!("{id}_seg.nii.gz").into(),
            },
            t1_stats: p.stats[0],
            t2_stats: p.stats[1],
        };
        out.push((rec, Subject::new(id, p.t1, p.t2, p.seg)?));
    }
    Ok(out)
}

/// Writes a phantom corpus and its manifest into `dir`.
pub fn write_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<CorpusManifest> {
    let subjects = generate_corpus(cfg)?;
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(subjects.len());
    for (rec, s) in subjects {
        write_nifti(dir.join(&rec.files.t1), &s.t1)?;
        write_nifti(dir.join(&rec.files.t2), &s.t2)?;
        write_nifti_labels(dir.join(&rec.files.seg), &s.seg, s.t1.spacing())?;
        records.push(rec);
    }
    let m = CorpusManifest { version: MANIFEST_VERSION, subjects: records };
    m.validate()?;
    m.save(dir.join(MANIFEST_FILE))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_follow_ratio() {
        assert_eq!(split_counts(12).unwrap(), [8, 2, 2]);
        assert_eq!(split_counts(3).unwrap(), [1, 1, 1]);
        assert_eq!(split_counts(24).unwrap(), [16, 4, 4]);
        let e = split_counts(1).unwrap_err().to_string();
        assert!(e.contains("at least 3"), "{e}");
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { num_subjects: 3, seed: 4, phantom: PhantomSpec { grid_shape: [16, 16, 16], ..PhantomSpec::default() } };
        let m = write_corpus(dir.path(), &cfg).unwrap();
        assert_eq!(m.subjects.len(), 3);
        assert_eq!(m.split(Split::Train).count(), 1);
        let loaded = CorpusManifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m);
        let s = load_subject(dir.path(), &loaded.subjects[2]).unwrap();
        let direct = generate_phantom(&PhantomSpec { seed: 6, ..cfg.phantom.clone() }).unwrap();
        assert_eq!(s.t1.data(), direct.t1.data());
        assert_eq!(s.seg, direct.seg);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let cfg = CorpusConfig { num_subjects: 3, phantom: PhantomSpec { grid_shape: [16, 16, 16], ..PhantomSpec::default() }, ..CorpusConfig::default() };
        let mut recs: Vec<SubjectRecord> = generate_corpus(&cfg).unwrap().into_iter().map(|(r, _)| r).collect();
        recs[1].id = recs[0].id.clone();
        let m = CorpusManifest { version: MANIFEST_VERSION, subjects: recs };
        assert!(m.validate().is_err());
    }

    #[test]
    fn missing_manifest_is_file_not_found() {
        assert!(matches!(CorpusManifest::load("/nonexistent/manifest.json"), Err(Error::FileNotFound(_))));
    }
}
