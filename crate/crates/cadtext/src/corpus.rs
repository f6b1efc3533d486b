//! Corpus ingestion and preprocessing for assembly/part-name metadata.
//!
//! The pipeline mirrors the usual shape of CAD text dumps: load JSONL,
//! clean each name with an ordered rule set, drop records that clean down
//! to nothing, deduplicate, and split train/val/test deterministically.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One assembly: a name plus the ordered list of its part names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyRecord {
    /// Stable identifier; synthesized from the line number when the input
    /// does not carry one.
    pub id: String,
    pub assembly_name: String,
    pub part_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl AssemblyRecord {
    /// The comma-joined part-names string used as the second side of
    /// contrastive pairs and zero-shot queries.
    pub fn parts_text(&self) -> String {
        self.part_names.join(", ")
    }
}

/// One substitution rule: every regex match is replaced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleaningRule {
    pub id: String,
    pub pattern: String,
    pub replacement: String,
}

/// Ordered cleaning rule set. Application order is fixed: lowercase,
/// pattern rules, extension stripping, whitespace collapse, character
/// filtering, stopstring removal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleaningRules {
    pub lowercase: bool,
    pub rules: Vec<CleaningRule>,
    /// File extensions stripped (repeatedly) from the end of a token.
    pub strip_extensions: Vec<String>,
    /// Names that are dropped when they are the *entire* cleaned string.
    pub stopstrings: Vec<String>,
}

impl Default for CleaningRules {
    fn default() -> Self {
        CleaningRules {
            lowercase: true,
            rules: vec![CleaningRule {
                id: "escape-artifacts".into(),
                // Runs like `\x2\00e9\x0\` left behind by hex-escaped
                // non-ASCII characters.
                pattern: r"\\[\\x0-9a-f]*".into(),
                replacement: String::new(),
            }],
            strip_extensions: [".step", ".stp", ".sldprt", ".sldasm", ".iges", ".igs", ".stl"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            stopstrings: vec!["untitled".into(), "copy of".into()],
        }
    }
}

/// Compiled form of [`CleaningRules`]; build once, apply many.
pub struct Cleaner {
    rules: CleaningRules,
    compiled: Vec<(Regex, String)>,
}

impl Cleaner {
    pub fn new(rules: CleaningRules) -> Result<Self> {
        let compiled = rules
            .rules
            .iter()
            .map(|r| {
                Regex::new(&r.pattern)
                    .map(|re| (re, r.replacement.clone()))
                    .map_err(|e| Error::Config(format!("rule {}: bad pattern: {e}", r.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Cleaner { rules, compiled })
    }

    /// Clean one text. Total function: may return the empty string.
    pub fn clean_text(&self, raw: &str) -> String {
        let mut text = if self.rules.lowercase {
            raw.to_lowercase()
        } else {
            raw.to_string()
        };
        for (re, replacement) in &self.compiled {
            text = re.replace_all(&text, replacement.as_str()).into_owned();
        }
        // Extension stripping works token-wise so "2238 375.step" drops
        // only the suffix of the final token.
        let stripped: Vec<String> = text
            .split_whitespace()
            .map(|tok| {
                let mut tok = tok.to_string();
                loop {
                    let before = tok.len();
                    for ext in &self.rules.strip_extensions {
                        if let Some(rest) = tok.strip_suffix(ext.as_str()) {
                            tok = rest.to_string();
                        }
                    }
                    if tok.len() == before {
                        break;
                    }
                }
                tok
            })
            .collect();
        let text = stripped.join(" ");
        let text = filter_chars(&text);
        let text = collapse_whitespace(&text);
        if self.rules.stopstrings.iter().any(|s| s == &text) {
            return String::new();
        }
        text
    }

    /// Clean a record in place; returns `None` when the assembly name or
    /// the whole part list cleans down to empty.
    pub fn clean_record(&self, record: &AssemblyRecord) -> Option<AssemblyRecord> {
        let assembly_name = self.clean_text(&record.assembly_name);
        if assembly_name.is_empty() {
            return None;
        }
        let part_names: Vec<String> = record
            .part_names
            .iter()
            .map(|p| self.clean_text(p))
            .filter(|p| !p.is_empty())
            .collect();
        if part_names.is_empty() {
            return None;
        }
        let description = record
            .description
            .as_ref()
            .map(|d| self.clean_text(d))
            .filter(|d| !d.is_empty());
        Some(AssemblyRecord {
            id: record.id.clone(),
            assembly_name,
            part_names,
            description,
        })
    }
}

/// Keep alphanumerics (any script), spaces, hyphens, and periods that sit
/// between two digits ("11.78" survives, "sleeve." does not).
fn filter_chars(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        let keep = c.is_alphanumeric()
            || c == ' '
            || c == '-'
            || (c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && i + 1 < chars.len()
                && chars[i + 1].is_ascii_digit());
        if keep {
            out.push(c);
        }
    }
    out
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Convenience wrapper over [`Cleaner::clean_text`] for one-off use.
pub fn clean_text(raw: &str, rules: &CleaningRules) -> Result<String> {
    Ok(Cleaner::new(rules.clone())?.clean_text(raw))
}

/// Remove duplicate part names within each record (first occurrence wins),
/// then drop records whose (assembly name, part-name multiset) repeats an
/// earlier record. First-seen order is preserved.
pub fn dedup_corpus(records: &[AssemblyRecord]) -> Vec<AssemblyRecord> {
    let mut seen: HashSet<(String, Vec<String>)> = HashSet::new();
    let mut out = Vec::new();
    for record in records {
        let mut parts = Vec::new();
        let mut part_seen = HashSet::new();
        for p in &record.part_names {
            if part_seen.insert(p.clone()) {
                parts.push(p.clone());
            }
        }
        let mut key_parts = parts.clone();
        key_parts.sort();
        if seen.insert((record.assembly_name.clone(), key_parts)) {
            out.push(AssemblyRecord {
                id: record.id.clone(),
                assembly_name: record.assembly_name.clone(),
                part_names: parts,
                description: record.description.clone(),
            });
        }
    }
    out
}

/// Train/val/test fractions plus the seed that fixes membership.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train_fraction: train,
            val_fraction: val,
            test_fraction: test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {f}")));
            }
        }
        let sum = self.train_fraction + self.val_fraction + self.test_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// FNV-1a over (id, seed); stable across builds, unlike the std hasher.
fn split_hash(id: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    for b in seed.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Largest-remainder apportionment of `n` slots over the three fractions.
fn split_sizes(n: usize, spec: &SplitSpec) -> [usize; 3] {
    let fracs = [spec.train_fraction, spec.val_fraction, spec.test_fraction];
    let mut sizes = [0usize; 3];
    let mut remainders = [0f64; 3];
    let mut assigned = 0;
    for i in 0..3 {
        let exact = fracs[i] * n as f64;
        sizes[i] = exact.floor() as usize;
        remainders[i] = exact - exact.floor();
        assigned += sizes[i];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].partial_cmp(&remainders[a]).unwrap().then(a.cmp(&b)));
    let mut leftover = n - assigned;
    for &i in &order {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    sizes
}

/// Deterministic disjoint split. Records are ranked by a hash of
/// (id, seed), so adding records perturbs membership only near the
/// boundaries instead of reshuffling everything.
pub fn split_corpus(
    records: &[AssemblyRecord],
    spec: &SplitSpec,
) -> Result<(Vec<AssemblyRecord>, Vec<AssemblyRecord>, Vec<AssemblyRecord>)> {
    spec.validate()?;
    let sizes = split_sizes(records.len(), spec);
    let mut ranked: Vec<(u64, &str, usize)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (split_hash(&r.id, spec.seed), r.id.as_str(), i))
        .collect();
    ranked.sort();
    let ranked: Vec<usize> = ranked.into_iter().map(|(_, _, i)| i).collect();
    // 0 = train, 1 = val, 2 = test
    let mut membership = vec![2u8; records.len()];
    for (rank, &idx) in ranked.iter().enumerate() {
        membership[idx] = if rank < sizes[0] {
            0
        } else if rank < sizes[0] + sizes[1] {
            1
        } else {
            2
        };
    }
    let pick = |m: u8| -> Vec<AssemblyRecord> {
        records
            .iter()
            .zip(&membership)
            .filter(|(_, &mm)| mm == m)
            .map(|(r, _)| r.clone())
            .collect()
    };
    Ok((pick(0), pick(1), pick(2)))
}

/// Funnel counters reported by preprocessing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CorpusStats {
    pub n_raw: usize,
    pub n_after_clean_dedup: usize,
    pub n_unique_assembly_names: usize,
    pub part_count_histogram: BTreeMap<usize, usize>,
}

/// Count raw vs. surviving records; histogram is over the survivors.
pub fn compute_stats(before: &[AssemblyRecord], after: &[AssemblyRecord]) -> CorpusStats {
    let unique: HashSet<&str> = after.iter().map(|r| r.assembly_name.as_str()).collect();
    let mut histogram = BTreeMap::new();
    for r in after {
        *histogram.entry(r.part_names.len()).or_insert(0) += 1;
    }
    CorpusStats {
        n_raw: before.len(),
        n_after_clean_dedup: after.len(),
        n_unique_assembly_names: unique.len(),
        part_count_histogram: histogram,
    }
}

/// Outcome of loading a JSONL corpus: records in file order plus per-line
/// errors for the lines that failed to parse.
#[derive(Debug)]
pub struct LoadReport {
    pub records: Vec<AssemblyRecord>,
    /// (1-based line number, message)
    pub errors: Vec<(usize, String)>,
}

#[derive(Deserialize)]
struct RawRecord {
    assembly_name: String,
    part_names: Vec<String>,
    #[serde(default)]
    description: Option<String>,
    #[serde(default)]
    id: Option<String>,
}

/// Load a JSONL corpus. Malformed lines are reported with their line
/// number and skipped; an unreadable file is fatal.
pub fn load_corpus(path: &Path) -> Result<LoadReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawRecord>(&line) {
            Ok(raw) => records.push(AssemblyRecord {
                id: raw.id.unwrap_or_else(|| line_no.to_string()),
                assembly_name: raw.assembly_name,
                part_names: raw.part_names,
                description: raw.description,
            }),
            Err(e) => errors.push((line_no, e.to_string())),
        }
    }
    Ok(LoadReport { records, errors })
}

/// Write records as JSONL, one object per line, in order.
pub fn save_corpus(records: &[AssemblyRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Full preprocessing pass: clean, drop emptied records, dedup.
pub fn preprocess(
    records: &[AssemblyRecord],
    rules: &CleaningRules,
) -> Result<(Vec<AssemblyRecord>, CorpusStats)> {
    let cleaner = Cleaner::new(rules.clone())?;
    let cleaned: Vec<AssemblyRecord> =
        records.iter().filter_map(|r| cleaner.clean_record(r)).collect();
    let deduped = dedup_corpus(&cleaned);
    let stats = compute_stats(records, &deduped);
    Ok((deduped, stats))
}
