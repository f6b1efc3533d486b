//! Auxiliary-sentence construction for the binary pair-classification
//! task: five splitting schemes over a record's part list plus negative
//! sampling from a distractor pool.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::AssemblyRecord;
use crate::error::{Error, Result};

/// How a record's name/parts are divided between the two sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SentenceCase {
    /// name | all parts
    BaseCase,
    /// name + first part | remaining parts
    Case1,
    /// name + all but last part | last part
    Case2,
    /// name + first half of parts | second half
    Case3,
    /// name + description | all parts
    Case4,
}

impl SentenceCase {
    pub const ALL: [SentenceCase; 5] = [
        SentenceCase::BaseCase,
        SentenceCase::Case1,
        SentenceCase::Case2,
        SentenceCase::Case3,
        SentenceCase::Case4,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SentenceCase::BaseCase => "base",
            SentenceCase::Case1 => "case1",
            SentenceCase::Case2 => "case2",
            SentenceCase::Case3 => "case3",
            SentenceCase::Case4 => "case4",
        }
    }

    /// Minimum part count a record needs for this case.
    fn min_parts(&self) -> usize {
        match self {
            SentenceCase::BaseCase | SentenceCase::Case4 => 1,
            _ => 2,
        }
    }
}

impl FromStr for SentenceCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "base" | "basecase" => Ok(SentenceCase::BaseCase),
            "case1" => Ok(SentenceCase::Case1),
            "case2" => Ok(SentenceCase::Case2),
            "case3" => Ok(SentenceCase::Case3),
            "case4" => Ok(SentenceCase::Case4),
            other => Err(Error::Config(format!(
                "unknown sentence case '{other}'; valid cases: base, case1, case2, case3, case4"
            ))),
        }
    }
}

/// One labelled sentence pair; label 1 = related, 0 = not related.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    #[serde(rename = "a")]
    pub sentence_a: String,
    #[serde(rename = "b")]
    pub sentence_b: String,
    pub label: u8,
    pub source_id: String,
}

/// Why a record could not produce a pair for a given case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Skip {
    TooFewParts,
    MissingDescription,
}

/// Canonical first-sentence prefix; frozen so datasets are reproducible
/// byte for byte.
fn template(assembly_name: &str) -> String {
    format!("an assembly named '{assembly_name}', containing the following parts:")
}

fn join(parts: &[String]) -> String {
    parts.join(", ")
}

/// Sentence halves for a record under a case; used for both the positive
/// pair and the b-side of negatives.
fn halves(record: &AssemblyRecord, case: SentenceCase) -> std::result::Result<(String, String), Skip> {
    let n = record.part_names.len();
    if n < case.min_parts() {
        return Err(Skip::TooFewParts);
    }
    let head = template(&record.assembly_name);
    let (a, b) = match case {
        SentenceCase::BaseCase => (head, join(&record.part_names)),
        SentenceCase::Case1 => (
            format!("{head} {}", record.part_names[0]),
            join(&record.part_names[1..]),
        ),
        SentenceCase::Case2 => (
            format!("{head} {}", join(&record.part_names[..n - 1])),
            record.part_names[n - 1].clone(),
        ),
        SentenceCase::Case3 => {
            // Odd counts put the extra part on the first sentence.
            let split = n.div_ceil(2);
            (
                format!("{head} {}", join(&record.part_names[..split])),
                join(&record.part_names[split..]),
            )
        }
        SentenceCase::Case4 => {
            let desc = record.description.as_deref().ok_or(Skip::MissingDescription)?;
            (format!("{head} {desc}"), join(&record.part_names))
        }
    };
    Ok((a, b))
}

/// Build the positive pair (label 1) for a record.
pub fn build_positive(
    record: &AssemblyRecord,
    case: SentenceCase,
) -> std::result::Result<SentencePair, Skip> {
    let (sentence_a, sentence_b) = halves(record, case)?;
    Ok(SentencePair {
        sentence_a,
        sentence_b,
        label: 1,
        source_id: record.id.clone(),
    })
}

/// Build a negative pair (label 0): the first sentence stays truthful,
/// the second is the case's b-side taken from a uniformly sampled other
/// record.
pub fn sample_negative<R: Rng>(
    record: &AssemblyRecord,
    pool: &[AssemblyRecord],
    case: SentenceCase,
    rng: &mut R,
) -> Result<SentencePair> {
    if pool.len() < 2 {
        return Err(Error::Data("negative sampling needs a pool of at least 2 records".into()));
    }
    let (sentence_a, _) = halves(record, case)
        .map_err(|_| Error::Data(format!("record {} not eligible for {}", record.id, case.name())))?;
    let candidates: Vec<usize> = pool
        .iter()
        .enumerate()
        .filter(|(_, r)| r.id != record.id && halves(r, case).is_ok())
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Data(format!(
            "no eligible distractor for record {} under {}",
            record.id,
            case.name()
        )));
    }
    let distractor = &pool[candidates[rng.random_range(0..candidates.len())]];
    let (_, sentence_b) = halves(distractor, case).expect("candidate checked eligible");
    Ok(SentencePair {
        sentence_a,
        sentence_b,
        label: 0,
        source_id: record.id.clone(),
    })
}

/// Result of building a pair dataset; records skipped for the case are
/// counted rather than silently dropped.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub pairs: Vec<SentencePair>,
    pub skipped_records: usize,
}

/// Build a shuffled dataset of positives and sampled negatives at
/// `negatives_per_positive` per eligible record.
pub fn build_pair_dataset(
    records: &[AssemblyRecord],
    case: SentenceCase,
    negatives_per_positive: usize,
    seed: u64,
) -> Result<PairDataset> {
    if negatives_per_positive == 0 {
        return Err(Error::Config("negatives_per_positive must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    let mut eligible: Vec<&AssemblyRecord> = Vec::new();
    for record in records {
        match build_positive(record, case) {
            Ok(pair) => {
                pairs.push(pair);
                eligible.push(record);
            }
            Err(_) => skipped += 1,
        }
    }
    if !eligible.is_empty() {
        if eligible.len() < 2 {
            return Err(Error::Data(
                "need at least 2 eligible records to sample negatives".into(),
            ));
        }
        for record in &eligible {
            for _ in 0..negatives_per_positive {
                pairs.push(sample_negative(record, records, case, &mut rng)?);
            }
        }
    }
    pairs.shuffle(&mut rng);
    Ok(PairDataset {
        pairs,
        skipped_records: skipped,
    })
}

/// Write pairs as JSONL: {"a": ..., "b": ..., "label": 0|1, "source_id": ...}.
pub fn save_pairs(pairs: &[SentencePair], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<SentencePair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: SentencePair = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if pair.label > 1 {
            return Err(Error::Data(format!("{}:{}: label must be 0 or 1", path.display(), i + 1)));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_holder() -> AssemblyRecord {
        AssemblyRecord {
            id: "lh".into(),
            assembly_name: "line holder".into(),
            part_names: vec![
                "top line holder".into(),
                "bottom line holder".into(),
                "rod carrying tube".into(),
                "rod shaft".into(),
            ],
            description: None,
        }
    }

    #[test]
    fn base_case_layout() {
        let pair = build_positive(&line_holder(), SentenceCase::BaseCase).unwrap();
        assert_eq!(
            pair.sentence_a,
            "an assembly named 'line holder', containing the following parts:"
        );
        assert_eq!(
            pair.sentence_b,
            "top line holder, bottom line holder, rod carrying tube, rod shaft"
        );
        assert_eq!(pair.label, 1);
    }

    #[test]
    fn case2_keeps_last_part_for_second_sentence() {
        let pair = build_positive(&line_holder(), SentenceCase::Case2).unwrap();
        assert!(pair.sentence_a.contains("line holder"));
        assert!(pair.sentence_a.contains("top line holder, bottom line holder, rod carrying tube"));
        assert_eq!(pair.sentence_b, "rod shaft");
    }

    #[test]
    fn case3_splits_in_half_with_extra_on_first() {
        let pair = build_positive(&line_holder(), SentenceCase::Case3).unwrap();
        assert_eq!(pair.sentence_b, "rod carrying tube, rod shaft");
        let mut record = line_holder();
        record.part_names.push("end cap".into());
        let pair = build_positive(&record, SentenceCase::Case3).unwrap();
        // n=5 puts 3 parts on the first sentence.
        assert_eq!(pair.sentence_b, "rod shaft, end cap");
    }

    #[test]
    fn case1_skips_single_part_records() {
        let record = AssemblyRecord {
            id: "1".into(),
            assembly_name: "sleeve".into(),
            part_names: vec!["cap".into()],
            description: None,
        };
        assert_eq!(build_positive(&record, SentenceCase::Case1), Err(Skip::TooFewParts));
        assert!(build_positive(&record, SentenceCase::BaseCase).is_ok());
    }

    #[test]
    fn case4_requires_description() {
        let mut record = line_holder();
        assert_eq!(
            build_positive(&record, SentenceCase::Case4),
            Err(Skip::MissingDescription)
        );
        record.description = Some("holds fishing line".into());
        let pair = build_positive(&record, SentenceCase::Case4).unwrap();
        assert!(pair.sentence_a.ends_with("holds fishing line"));
        assert_eq!(
            pair.sentence_b,
            "top line holder, bottom line holder, rod carrying tube, rod shaft"
        );
    }

    /// Cases 1-3: the part content of both sentences concatenated must
    /// recover the record's full part list with no loss or duplication.
    #[test]
    fn split_cases_cover_part_list_exactly() {
        for n in 2..=7 {
            let record = AssemblyRecord {
                id: "r".into(),
                assembly_name: "gear box".into(),
                part_names: (0..n).map(|i| format!("part{i}")).collect(),
                description: None,
            };
            for case in [SentenceCase::Case1, SentenceCase::Case2, SentenceCase::Case3] {
                let pair = build_positive(&record, case).unwrap();
                let a_parts = pair
                    .sentence_a
                    .split("parts: ")
                    .nth(1)
                    .unwrap_or("");
                let combined = if a_parts.is_empty() {
                    pair.sentence_b.clone()
                } else {
                    format!("{a_parts}, {}", pair.sentence_b)
                };
                assert_eq!(combined, record.part_names.join(", "), "{case:?} n={n}");
            }
        }
    }

    #[test]
    fn negative_uses_other_record_and_label_zero() {
        let a = line_holder();
        let b = AssemblyRecord {
            id: "other".into(),
            assembly_name: "bed frame".into(),
            part_names: vec!["side panel".into(), "slat".into()],
            description: None,
        };
        let pool = vec![a.clone(), b.clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let pair = sample_negative(&a, &pool, SentenceCase::BaseCase, &mut rng).unwrap();
            assert_eq!(pair.label, 0);
            assert_eq!(pair.source_id, "lh");
            // Forced choice: the only eligible distractor is `other`.
            assert_eq!(pair.sentence_b, "side panel, slat");
        }
    }

    #[test]
    fn negative_pool_of_one_errors() {
        let a = line_holder();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_negative(&a, &[a.clone()], SentenceCase::BaseCase, &mut rng).is_err());
    }

    #[test]
    fn negatives_are_deterministic_for_a_seed() {
        let records = sample_records(30);
        let d1 = build_pair_dataset(&records, SentenceCase::Case2, 1, 9).unwrap();
        let d2 = build_pair_dataset(&records, SentenceCase::Case2, 1, 9).unwrap();
        assert_eq!(d1.pairs, d2.pairs);
    }

    #[test]
    fn negative_sampling_is_roughly_uniform() {
        let records = sample_records(100);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = vec![0usize; records.len()];
        let draws = 10_000usize;
        for _ in 0..draws {
            let pair = sample_negative(&records[0], &records, SentenceCase::BaseCase, &mut rng).unwrap();
            let hit = records
                .iter()
                .position(|r| r.id != "r0" && pair.sentence_b == r.part_names.join(", "))
                .unwrap();
            counts[hit] += 1;
        }
        let p = 1.0 / 99.0;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi_square = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            if i == 0 {
                assert_eq!(c, 0, "source must never be its own distractor");
            } else {
                assert!(
                    (c as f64 - expected).abs() <= 4.0 * sigma,
                    "distractor {i} drawn {c} times, expected {expected:.1} ± {:.1}",
                    4.0 * sigma
                );
                chi_square += (c as f64 - expected).powi(2) / expected;
            }
        }
        // 98 degrees of freedom; 150 sits past the 99.9th percentile.
        assert!(chi_square < 150.0, "chi-square {chi_square} too far from uniform");
    }

    #[test]
    fn dataset_balance_and_ratio() {
        let records = sample_records(100);
        let d = build_pair_dataset(&records, SentenceCase::BaseCase, 1, 7).unwrap();
        assert_eq!(d.pairs.len(), 200);
        assert_eq!(d.pairs.iter().filter(|p| p.label == 1).count(), 100);
        let d2 = build_pair_dataset(&records, SentenceCase::BaseCase, 2, 7).unwrap();
        assert_eq!(d2.pairs.len(), 300);
        assert_eq!(d2.pairs.iter().filter(|p| p.label == 0).count(), 200);
    }

    #[test]
    fn dataset_shuffle_is_a_permutation() {
        let records = sample_records(50);
        let mut d1 = build_pair_dataset(&records, SentenceCase::Case3, 1, 1).unwrap().pairs;
        let mut d2 = build_pair_dataset(&records, SentenceCase::Case3, 1, 2).unwrap().pairs;
        // Different seeds give different negative draws, so compare only
        // the positives, which must form the same multiset.
        d1.retain(|p| p.label == 1);
        d2.retain(|p| p.label == 1);
        let key = |p: &SentencePair| (p.source_id.clone(), p.sentence_a.clone());
        d1.sort_by_key(key);
        d2.sort_by_key(key);
        assert_eq!(d1, d2);
    }

    #[test]
    fn dataset_skips_ineligible_records() {
        let mut records = sample_records(10);
        records[0].part_names.truncate(1);
        let d = build_pair_dataset(&records, SentenceCase::Case1, 1, 7).unwrap();
        assert_eq!(d.skipped_records, 1);
        assert_eq!(d.pairs.len(), 18);
    }

    #[test]
    fn pairs_roundtrip_jsonl() {
        let records = sample_records(10);
        let d = build_pair_dataset(&records, SentenceCase::BaseCase, 1, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        save_pairs(&d.pairs, &path).unwrap();
        let loaded = load_pairs(&path).unwrap();
        assert_eq!(loaded, d.pairs);
    }

    fn sample_records(n: usize) -> Vec<AssemblyRecord> {
        (0..n)
            .map(|i| AssemblyRecord {
                id: format!("r{i}"),
                assembly_name: format!("assembly {i}"),
                part_names: vec![format!("part {i} a"), format!("part {i} b"), format!("part {i} c")],
                description: None,
            })
            .collect()
    }
}
