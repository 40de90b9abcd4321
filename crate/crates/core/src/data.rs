//! Segments, datasets, trials and the file formats that carry them.
//!
//! Three on-disk formats are handled here:
//!
//! * embedding archives, either binary (`DPLDAEMB` magic, version byte,
//!   little-endian `u32` dimension, then per record a `u32`-length-prefixed
//!   UTF-8 segment id followed by the little-endian `f64` components) or a
//!   line-oriented text form (`segment_id v1 v2 ... vD`);
//! * the tab-separated metadata table with header
//!   `segment_id speaker_id session_id domain condition_label`;
//! * tab-separated trial lists `enroll_id test_id [tgt|imp]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"DPLDAEMB";
pub const EMBEDDING_VERSION: u8 = 1;
pub const METADATA_HEADER: [&str; 5] = [
    "segment_id",
    "speaker_id",
    "session_id",
    "domain",
    "condition_label",
];

/// One embedding with its speaker, session, domain and condition labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub segment_id: String,
    pub speaker_id: String,
    pub session_id: String,
    pub domain: String,
    /// Absent on evaluation data whose conditions are unknown.
    pub condition_label: Option<String>,
    pub embedding: Vec<f64>,
}

/// A validated collection of segments sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SegmentRecord>,
    dim: usize,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Validates `records` and builds the id index. Row numbers in errors are
    /// 1-based positions in `records`.
    pub fn new(records: Vec<SegmentRecord>) -> Result<Self> {
        let dim = records
            .first()
            .map(|r| r.embedding.len())
            .ok_or_else(|| Error::invalid("dataset has no records"))?;
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let row = i + 1;
            if r.embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    row,
                    id: r.segment_id.clone(),
                    expected: dim,
                    found: r.embedding.len(),
                });
            }
            if r.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    row,
                    id: r.segment_id.clone(),
                });
            }
            if index.insert(r.segment_id.clone(), i).is_some() {
                return Err(Error::DuplicateSegment {
                    row,
                    id: r.segment_id.clone(),
                });
            }
        }
        Ok(Self {
            records,
            dim,
            index,
        })
    }

    pub fn records(&self) -> &[SegmentRecord] {
        &self.records
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn position(&self, segment_id: &str) -> Option<usize> {
        self.index.get(segment_id).copied()
    }

    pub fn get(&self, segment_id: &str) -> Result<&SegmentRecord> {
        self.position(segment_id)
            .map(|i| &self.records[i])
            .ok_or_else(|| Error::UnknownSegment(segment_id.to_owned()))
    }

    /// Speaker ids in sorted order.
    pub fn speakers(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.speaker_id.as_str()).collect()
    }

    /// Domains in sorted order.
    pub fn domains(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.domain.as_str()).collect()
    }

    /// Record indices grouped by speaker, speakers in sorted order.
    pub fn by_speaker(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.speaker_id.as_str()).or_default().push(i);
        }
        map
    }

    /// Number of distinct sessions per speaker.
    pub fn sessions_per_speaker(&self) -> BTreeMap<&str, usize> {
        let mut sessions: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for r in &self.records {
            sessions
                .entry(r.speaker_id.as_str())
                .or_default()
                .insert(r.session_id.as_str());
        }
        sessions.into_iter().map(|(k, v)| (k, v.len())).collect()
    }

    /// Subset holding only speakers with at least two sessions, the
    /// population usable for PLDA-style training.
    pub fn multi_session_subset(&self) -> Result<Dataset> {
        let sessions = self.sessions_per_speaker();
        let dropped = sessions.values().filter(|&&n| n < 2).count();
        if dropped > 0 {
            log::warn!("dropping {dropped} single-session speakers from training data");
        }
        self.filter(|r| sessions[r.speaker_id.as_str()] >= 2)
    }

    pub fn filter(&self, mut keep: impl FnMut(&SegmentRecord) -> bool) -> Result<Dataset> {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Dataset::new(records)
    }

    /// Errors unless every record carries a condition label.
    pub fn require_condition_labels(&self) -> Result<()> {
        match self
            .records
            .iter()
            .position(|r| r.condition_label.is_none())
        {
            None => Ok(()),
            Some(i) => Err(Error::invalid(format!(
                "row {}: segment `{}` has no condition label (required on training data)",
                i + 1,
                self.records[i].segment_id
            ))),
        }
    }

    /// Concatenates two datasets of equal dimension.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Dataset::new(records)
    }
}

/// Target or impostor key for a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrialLabel {
    Target,
    Impostor,
}

impl TrialLabel {
    pub fn is_target(self) -> bool {
        self == TrialLabel::Target
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "tgt",
            TrialLabel::Impostor => "imp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tgt" | "target" => Some(TrialLabel::Target),
            "imp" | "impostor" | "nontarget" => Some(TrialLabel::Impostor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: Option<TrialLabel>,
}

pub type TrialSet = Vec<Trial>;

/// Raw scores and, once calibrated, LLRs for a list of trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub trials: Vec<Trial>,
    pub raw_score: Vec<f64>,
    pub llr: Option<Vec<f64>>,
}

impl ScoreSet {
    /// `(score, is_target)` pairs for labelled trials; uses LLRs when present
    /// and `use_llr` is set, raw scores otherwise.
    pub fn labelled(&self, use_llr: bool) -> Vec<(f64, bool)> {
        let values = match (&self.llr, use_llr) {
            (Some(l), true) => l,
            _ => &self.raw_score,
        };
        self.trials
            .iter()
            .zip(values)
            .filter_map(|(t, &v)| t.label.map(|l| (v, l.is_target())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialPolicy {
    Exhaustive,
    ExhaustiveExcludingSameSession,
}

/// All unordered segment pairs in dataset order, labelled by speaker
/// identity; the excluding policy drops pairs that share a session id.
pub fn build_trials(dataset: &Dataset, policy: TrialPolicy) -> TrialSet {
    let recs = dataset.records();
    let mut trials = Vec::new();
    for i in 0..recs.len() {
        for j in i + 1..recs.len() {
            let (a, b) = (&recs[i], &recs[j]);
            if policy == TrialPolicy::ExhaustiveExcludingSameSession && a.session_id == b.session_id
            {
                continue;
            }
            let label = if a.speaker_id == b.speaker_id {
                TrialLabel::Target
            } else {
                TrialLabel::Impostor
            };
            trials.push(Trial {
                enroll_id: a.segment_id.clone(),
                test_id: b.segment_id.clone(),
                label: Some(label),
            });
        }
    }
    trials
}

// ---------------------------------------------------------------------------
// Embedding archives

/// Writes the binary embedding archive.
pub fn write_embeddings(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(16 + dataset.len() * (16 + 8 * dataset.dim()));
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.push(EMBEDDING_VERSION);
    buf.extend_from_slice(&(dataset.dim() as u32).to_le_bytes());
    for r in dataset.records() {
        buf.extend_from_slice(&(r.segment_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.segment_id.as_bytes());
        for v in &r.embedding {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an embedding archive, binary or text, as `(segment_id, vector)`
/// rows. Dimension consistency is enforced later by [`Dataset::new`] so that
/// errors name the row.
pub fn read_embeddings(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(EMBEDDING_MAGIC) {
        parse_binary_embeddings(path, &bytes)
    } else {
        parse_text_embeddings(path, &bytes)
    }
}

fn parse_binary_embeddings(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Vec<f64>)>> {
    let corrupt = |msg: String| Error::Parse {
        path: path.to_owned(),
        line: 0,
        msg,
    };
    let mut cur = &bytes[EMBEDDING_MAGIC.len()..];
    let mut byte = [0u8; 1];
    cur.read_exact(&mut byte)
        .map_err(|_| corrupt("truncated header".into()))?;
    if byte[0] != EMBEDDING_VERSION {
        return Err(corrupt(format!(
            "unsupported embedding archive version {} (expected {EMBEDDING_VERSION})",
            byte[0]
        )));
    }
    let mut word = [0u8; 4];
    cur.read_exact(&mut word)
        .map_err(|_| corrupt("truncated header".into()))?;
    let dim = u32::from_le_bytes(word) as usize;
    let mut rows = Vec::new();
    while !cur.is_empty() {
        let row = rows.len() + 1;
        cur.read_exact(&mut word)
            .map_err(|_| corrupt(format!("record {row}: truncated id length")))?;
        let len = u32::from_le_bytes(word) as usize;
        if cur.len() < len + 8 * dim {
            return Err(corrupt(format!("record {row}: truncated")));
        }
        let id = std::str::from_utf8(&cur[..len])
            .map_err(|_| corrupt(format!("record {row}: segment id is not UTF-8")))?
            .to_owned();
        cur = &cur[len..];
        let values = cur[..8 * dim]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cur = &cur[8 * dim..];
        rows.push((id, values));
    }
    Ok(rows)
}

fn parse_text_embeddings(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Parse {
        path: path.to_owned(),
        line: 0,
        msg: "neither a binary archive nor UTF-8 text".into(),
    })?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields.next().unwrap().to_owned();
        let values = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_owned(),
                    line: n + 1,
                    msg: format!("cannot parse `{f}` as a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, values));
    }
    Ok(rows)
}

/// Writes the text embedding form (shortest round-trip decimal formatting).
pub fn write_embeddings_text(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = String::new();
    for r in dataset.records() {
        out.push_str(&r.segment_id);
        for v in &r.embedding {
            out.push(' ');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Metadata table

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataRow {
    pub segment_id: String,
    pub speaker_id: String,
    pub session_id: String,
    pub domain: String,
    pub condition_label: Option<String>,
}

pub fn read_metadata(path: &Path) -> Result<Vec<MetadataRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_owned(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if n == 0 {
            let header: Vec<&str> = line.split('\t').collect();
            if header != METADATA_HEADER {
                return Err(parse_err(
                    1,
                    format!("expected header `{}`", METADATA_HEADER.join("\t")),
                ));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 4 || f.len() > 5 {
            return Err(parse_err(
                n + 1,
                format!("expected 5 tab-separated fields, found {}", f.len()),
            ));
        }
        let condition_label = f
            .get(4)
            .filter(|s| !s.is_empty() && **s != "-")
            .map(|s| s.to_string());
        rows.push(MetadataRow {
            segment_id: f[0].to_owned(),
            speaker_id: f[1].to_owned(),
            session_id: f[2].to_owned(),
            domain: f[3].to_owned(),
            condition_label,
        });
    }
    Ok(rows)
}

pub fn write_metadata(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = METADATA_HEADER.join("\t");
    out.push('\n');
    for r in dataset.records() {
        let label = r.condition_label.as_deref().unwrap_or("-");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.segment_id, r.speaker_id, r.session_id, r.domain, label
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Joins an embedding archive with its metadata table into a validated
/// dataset. Record order follows the embedding archive.
pub fn load_dataset(embedding_path: &Path, metadata_path: &Path) -> Result<Dataset> {
    let rows = read_embeddings(embedding_path)?;
    let meta = read_metadata(metadata_path)?;
    let mut by_id: HashMap<&str, &MetadataRow> = HashMap::with_capacity(meta.len());
    for m in &meta {
        by_id.insert(m.segment_id.as_str(), m);
    }
    let mut seen = HashMap::with_capacity(rows.len());
    let mut records = Vec::with_capacity(rows.len());
    let dim = rows.first().map(|r| r.1.len()).unwrap_or(0);
    for (i, (id, embedding)) in rows.into_iter().enumerate() {
        let row = i + 1;
        if embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                row,
                id,
                expected: dim,
                found: embedding.len(),
            });
        }
        if seen.insert(id.clone(), row).is_some() {
            return Err(Error::DuplicateSegment { row, id });
        }
        let m = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::MissingMetadata {
                row,
                id: id.clone(),
            })?;
        records.push(SegmentRecord {
            segment_id: id,
            speaker_id: m.speaker_id.clone(),
            session_id: m.session_id.clone(),
            domain: m.domain.clone(),
            condition_label: m.condition_label.clone(),
            embedding,
        });
    }
    Dataset::new(records)
}

/// Writes the binary archive and the metadata table.
pub fn save_dataset(dataset: &Dataset, embedding_path: &Path, metadata_path: &Path) -> Result<()> {
    write_embeddings(embedding_path, dataset)?;
    write_metadata(metadata_path, dataset)
}

// ---------------------------------------------------------------------------
// Trial lists

pub fn read_trials(path: &Path) -> Result<TrialSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut trials = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| Error::Parse {
            path: path.to_owned(),
            line: n + 1,
            msg,
        };
        if f.len() < 2 || f.len() > 3 {
            return Err(err(format!("expected 2 or 3 fields, found {}", f.len())));
        }
        if n == 0 && f[0] == "enroll_id" {
            continue;
        }
        if f[0] == f[1] {
            return Err(err(format!("trial pairs segment `{}` with itself", f[0])));
        }
        let label = match f.get(2) {
            None => None,
            Some(s) => Some(TrialLabel::parse(s).ok_or_else(|| err(format!("bad label `{s}`")))?),
        };
        trials.push(Trial {
            enroll_id: f[0].to_owned(),
            test_id: f[1].to_owned(),
            label,
        });
    }
    Ok(trials)
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut out = String::new();
    for t in trials {
        out.push_str(&t.enroll_id);
        out.push('\t');
        out.push_str(&t.test_id);
        if let Some(l) = t.label {
            out.push('\t');
            out.push_str(l.as_str());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, spk: &str, ses: &str, emb: Vec<f64>) -> SegmentRecord {
        SegmentRecord {
            segment_id: id.into(),
            speaker_id: spk.into(),
            session_id: ses.into(),
            domain: "d".into(),
            condition_label: Some("c".into()),
            embedding: emb,
        }
    }

    fn write_meta(dir: &Path, ids: &[&str]) -> std::path::PathBuf {
        let p = dir.join("meta.tsv");
        let mut s = METADATA_HEADER.join("\t") + "\n";
        for id in ids {
            s += &format!("{id}\tspk_{id}\tses_{id}\tdom\tcond\n");
        }
        fs::write(&p, s).unwrap();
        p
    }

    #[test]
    fn loads_text_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let emb = dir.path().join("emb.txt");
        fs::write(&emb, "s1 1 2 3 4\ns2 0.5 0 0 1\ns3 -1 -2 -3 -4\n").unwrap();
        let meta = write_meta(dir.path(), &["s1", "s2", "s3"]);
        let ds = load_dataset(&emb, &meta).unwrap();
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.get("s2").unwrap().embedding, vec![0.5, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let emb = dir.path().join("emb.txt");
        fs::write(&emb, "s1 1 2 3 4\ns2 1 2 3 4\ns3 1 2 3 4 5\n").unwrap();
        let meta = write_meta(dir.path(), &["s1", "s2", "s3"]);
        match load_dataset(&emb, &meta) {
            Err(Error::DimensionMismatch {
                row,
                id,
                expected,
                found,
            }) => {
                assert_eq!((row, id.as_str(), expected, found), (3, "s3", 4, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_missing_and_nonfinite() {
        let dir = tempfile::tempdir().unwrap();
        let emb = dir.path().join("emb.txt");
        let meta = write_meta(dir.path(), &["s1", "s2"]);
        fs::write(&emb, "s1 1 2\ns1 3 4\n").unwrap();
        assert!(matches!(
            load_dataset(&emb, &meta),
            Err(Error::DuplicateSegment { row: 2, .. })
        ));
        fs::write(&emb, "s1 1 2\ns9 3 4\n").unwrap();
        assert!(matches!(
            load_dataset(&emb, &meta),
            Err(Error::MissingMetadata { row: 2, .. })
        ));
        fs::write(&emb, "s1 1 2\ns2 NaN 4\n").unwrap();
        assert!(matches!(
            load_dataset(&emb, &meta),
            Err(Error::NonFinite { row: 2, .. })
        ));
    }

    #[test]
    fn missing_condition_label_allowed_but_flagged_for_training() {
        let dir = tempfile::tempdir().unwrap();
        let emb = dir.path().join("emb.txt");
        fs::write(&emb, "s1 1 2\n").unwrap();
        let meta = dir.path().join("meta.tsv");
        fs::write(&meta, METADATA_HEADER.join("\t") + "\ns1\ta\tsa\tdom\t-\n").unwrap();
        let ds = load_dataset(&emb, &meta).unwrap();
        assert_eq!(ds.records()[0].condition_label, None);
        assert!(ds.require_condition_labels().is_err());
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let meta = dir.path().join("meta.tsv");
        fs::write(&meta, "id\tspeaker\n").unwrap();
        assert!(matches!(
            read_metadata(&meta),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn trials_three_segments() {
        let ds = Dataset::new(vec![
            rec("a", "A", "1", vec![1.0]),
            rec("b", "A", "2", vec![1.0]),
            rec("c", "B", "3", vec![1.0]),
        ])
        .unwrap();
        let t = build_trials(&ds, TrialPolicy::Exhaustive);
        assert_eq!(t.len(), 3);
        assert_eq!(
            t.iter()
                .filter(|t| t.label == Some(TrialLabel::Target))
                .count(),
            1
        );
    }

    #[test]
    fn same_session_pairs_excluded() {
        let ds = Dataset::new(vec![
            rec("a", "A", "1", vec![1.0]),
            rec("b", "A", "1", vec![1.0]),
        ])
        .unwrap();
        assert!(build_trials(&ds, TrialPolicy::ExhaustiveExcludingSameSession).is_empty());
        assert_eq!(build_trials(&ds, TrialPolicy::Exhaustive).len(), 1);
    }

    #[test]
    fn trial_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trials.tsv");
        let trials = vec![
            Trial {
                enroll_id: "a".into(),
                test_id: "b".into(),
                label: Some(TrialLabel::Target),
            },
            Trial {
                enroll_id: "a".into(),
                test_id: "c".into(),
                label: None,
            },
        ];
        write_trials(&p, &trials).unwrap();
        assert_eq!(read_trials(&p).unwrap(), trials);
    }

    #[test]
    fn truncated_binary_archive_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(vec![rec("a", "A", "1", vec![1.0, 2.0])]).unwrap();
        let p = dir.path().join("emb.bin");
        write_embeddings(&p, &ds).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::Parse { .. })));
    }
}
