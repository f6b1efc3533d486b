//! 100-way zero-shot assembly-name prediction: batch the test records,
//! encode both sides, take cosine similarities (rows are unit vectors),
//! rank each part-names string against the batch's assembly names, and
//! aggregate top-k accuracy. Similarity matrices can be exported as CSV
//! and PGM for visual inspection.

use std::io::Write as IoWrite;
use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::corpus::AssemblyRecord;
use crate::error::{Error, Result};
use crate::training::ModelBundle;

/// Anything that maps a text to a fixed-width embedding row.
pub trait TextEmbedder: Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

impl TextEmbedder for ModelBundle {
    fn embed(&self, text: &str) -> Vec<f64> {
        self.embed_text(text)
    }
}

/// One evaluation group: which records it holds and how the part-names
/// rows are shuffled relative to the assembly-name rows.
#[derive(Debug, Clone)]
pub struct EvalBatchSpec {
    /// Positions into the test set, in assembly-row order.
    pub indices: Vec<usize>,
    /// Part row `k` belongs to the record at `indices[permutation[k]]`.
    pub permutation: Vec<usize>,
}

/// Shuffle the test set by seed and cut consecutive groups of `batch_n`;
/// the trailing remainder is dropped. Part order within each group gets
/// its own shuffle.
pub fn make_batches(n_records: usize, batch_n: usize, seed: u64) -> Result<Vec<EvalBatchSpec>> {
    if batch_n < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_n}")));
    }
    if n_records < batch_n {
        return Err(Error::Data(format!(
            "test set has {n_records} records but batches need {batch_n}; \
             rerun with a smaller batch size (--n)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_records).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(n_records / batch_n);
    for group in order.chunks(batch_n) {
        if group.len() < batch_n {
            break;
        }
        let mut permutation: Vec<usize> = (0..batch_n).collect();
        permutation.shuffle(&mut rng);
        batches.push(EvalBatchSpec {
            indices: group.to_vec(),
            permutation,
        });
    }
    Ok(batches)
}

/// N×N similarity scores with the record ids labeling each side.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub scores: Matrix,
    /// Assembly-name rows.
    pub row_ids: Vec<String>,
    /// Part-names columns (in permuted order).
    pub col_ids: Vec<String>,
}

/// Rank of the true assembly for each part column, 0-based; ties resolve
/// toward the lower assembly index.
pub fn rank_batch(scores: &Matrix, permutation: &[usize]) -> Vec<usize> {
    let n = scores.nrows();
    assert_eq!(scores.ncols(), n);
    assert_eq!(permutation.len(), n);
    let mut ranks = Vec::with_capacity(n);
    for k in 0..n {
        let true_idx = permutation[k];
        let true_score = scores[[true_idx, k]];
        let mut rank = 0usize;
        for i in 0..n {
            if i == true_idx {
                continue;
            }
            let s = scores[[i, k]];
            if s > true_score || (s == true_score && i < true_idx) {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    ranks
}

/// Fraction of ranks below `k`. `k` must be in 1..=n.
pub fn topk_accuracy(ranks: &[usize], k: usize, n: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("top-k needs 1 <= k <= {n}, got {k}")));
    }
    if ranks.is_empty() {
        return Ok(0.0);
    }
    Ok(ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchReport {
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub ranks: Vec<usize>,
}

/// Top-k keyed the way the results table reads: "1", "5", "10".
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopK {
    #[serde(rename = "1")]
    pub top1: f64,
    #[serde(rename = "5")]
    pub top5: f64,
    #[serde(rename = "10")]
    pub top10: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_batches: usize,
    pub topk: TopK,
    pub per_batch: Vec<BatchReport>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = std::io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, self)?;
        writer.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn batch_topk(ranks: &[usize], n: usize) -> Result<(f64, f64, f64)> {
    // A batch smaller than k saturates: top-k with k >= N counts all.
    let k5 = 5.min(n);
    let k10 = 10.min(n);
    Ok((
        topk_accuracy(ranks, 1, n)?,
        topk_accuracy(ranks, k5, n)?,
        topk_accuracy(ranks, k10, n)?,
    ))
}

/// Full protocol: batch, encode both sides, score, rank, aggregate.
/// Returns the report plus one similarity matrix per batch for export.
pub fn evaluate(
    embedder: &dyn TextEmbedder,
    records: &[AssemblyRecord],
    batch_n: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<SimilarityMatrix>)> {
    let specs = make_batches(records.len(), batch_n, seed)?;
    let mut per_batch = Vec::with_capacity(specs.len());
    let mut matrices = Vec::with_capacity(specs.len());
    for spec in &specs {
        let assembly_rows: Vec<Vec<f64>> = spec
            .indices
            .par_iter()
            .map(|&i| embedder.embed(&records[i].assembly_name))
            .collect();
        let part_rows: Vec<Vec<f64>> = spec
            .permutation
            .par_iter()
            .map(|&p| embedder.embed(&records[spec.indices[p]].parts_text()))
            .collect();
        let d = assembly_rows
            .first()
            .map(|r| r.len())
            .ok_or_else(|| Error::Runtime("empty batch".into()))?;
        if assembly_rows.iter().chain(&part_rows).any(|r| r.len() != d) {
            return Err(Error::Runtime("embedder returned inconsistent dimensions".into()));
        }
        let flat =
            |rows: &[Vec<f64>]| Matrix::from_shape_vec((rows.len(), d), rows.concat()).unwrap();
        let a = flat(&assembly_rows);
        let p = flat(&part_rows);
        let scores = a.dot(&p.t());
        let ranks = rank_batch(&scores, &spec.permutation);
        let (top1, top5, top10) = batch_topk(&ranks, batch_n)?;
        matrices.push(SimilarityMatrix {
            scores,
            row_ids: spec.indices.iter().map(|&i| records[i].id.clone()).collect(),
            col_ids: spec
                .permutation
                .iter()
                .map(|&pi| records[spec.indices[pi]].id.clone())
                .collect(),
        });
        per_batch.push(BatchReport {
            top1,
            top5,
            top10,
            ranks,
        });
    }
    let n_batches = per_batch.len();
    let mean = |pick: fn(&BatchReport) -> f64| {
        per_batch.iter().map(pick).sum::<f64>() / n_batches as f64
    };
    let report = EvalReport {
        n_batches,
        topk: TopK {
            top1: mean(|b| b.top1),
            top5: mean(|b| b.top5),
            top10: mean(|b| b.top10),
        },
        per_batch,
    };
    Ok((report, matrices))
}

/// CSV with id headers: first row names the part columns, first column
/// names the assembly rows.
pub fn export_similarity_csv(sim: &SimilarityMatrix, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Runtime(format!("cannot write {}: {e}", path.display())))?;
    let mut header = vec![String::new()];
    header.extend(sim.col_ids.iter().cloned());
    writer.write_record(&header).map_err(|e| Error::Runtime(e.to_string()))?;
    for (row_id, row) in sim.row_ids.iter().zip(sim.scores.rows()) {
        let mut record = vec![row_id.clone()];
        record.extend(row.iter().map(|v| v.to_string()));
        writer.write_record(&record).map_err(|e| Error::Runtime(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Re-import a matrix written by [`export_similarity_csv`].
pub fn load_similarity_csv(path: &Path) -> Result<SimilarityMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(e.to_string()))?;
        rows.push(record.iter().map(|f| f.to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: empty similarity csv", path.display())));
    }
    let col_ids: Vec<String> = rows[0][1..].to_vec();
    let n_rows = rows.len() - 1;
    let n_cols = col_ids.len();
    let mut scores = Matrix::zeros((n_rows, n_cols));
    let mut row_ids = Vec::with_capacity(n_rows);
    for (r, row) in rows[1..].iter().enumerate() {
        row_ids.push(row[0].clone());
        for c in 0..n_cols {
            scores[[r, c]] = row[c + 1]
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("{}: bad float: {e}", path.display())))?;
        }
    }
    Ok(SimilarityMatrix {
        scores,
        row_ids,
        col_ids,
    })
}

/// Grayscale PGM (P2) with min-max normalization: the largest entry maps
/// to 255, the smallest to 0.
pub fn export_similarity_pgm(sim: &SimilarityMatrix, path: &Path) -> Result<()> {
    let min = sim.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = sim.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "P2").map_err(|e| Error::io(path, e))?;
    writeln!(w, "{} {}", sim.scores.ncols(), sim.scores.nrows()).map_err(|e| Error::io(path, e))?;
    writeln!(w, "255").map_err(|e| Error::io(path, e))?;
    for row in sim.scores.axis_iter(Axis(0)) {
        let line: Vec<String> = row
            .iter()
            .map(|v| (((v - min) / span) * 255.0).round().to_string())
            .collect();
        writeln!(w, "{}", line.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlab::oracle_rank;
    use rand::Rng;

    /// Deterministic pseudo-embedder: a unit vector derived from the text
    /// bytes alone, so equal texts get equal embeddings.
    struct HashEmbedder {
        dim: usize,
    }

    impl TextEmbedder for HashEmbedder {
        fn embed(&self, text: &str) -> Vec<f64> {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in text.as_bytes() {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100000001b3);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let mut v: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            v
        }
    }

    fn records(n: usize) -> Vec<AssemblyRecord> {
        (0..n)
            .map(|i| AssemblyRecord {
                id: format!("r{i}"),
                assembly_name: format!("assembly {i}"),
                part_names: vec![format!("assembly {i}")],
                description: None,
            })
            .collect()
    }

    #[test]
    fn make_batches_counts_and_drops_remainder() {
        let batches = make_batches(12_321, 100, 7).unwrap();
        assert_eq!(batches.len(), 123);
        let covered: usize = batches.iter().map(|b| b.indices.len()).sum();
        assert_eq!(covered, 12_300);
        assert_eq!(make_batches(200, 100, 7).unwrap().len(), 2);
    }

    #[test]
    fn make_batches_too_small_suggests_smaller_n() {
        let err = make_batches(50, 100, 7).unwrap_err();
        assert!(err.to_string().contains("smaller"));
    }

    #[test]
    fn make_batches_is_seed_deterministic() {
        let a = make_batches(500, 100, 3).unwrap();
        let b = make_batches(500, 100, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.indices, y.indices);
            assert_eq!(x.permutation, y.permutation);
        }
        let c = make_batches(500, 100, 4).unwrap();
        assert_ne!(a[0].indices, c[0].indices);
    }

    #[test]
    fn rank_batch_identity_dominant() {
        let n = 10;
        let s = Matrix::from_shape_fn((n, n), |(i, j)| f64::from(u8::from(i == j)));
        let perm: Vec<usize> = (0..n).collect();
        let ranks = rank_batch(&s, &perm);
        assert_eq!(ranks, vec![0; n]);
        assert_eq!(topk_accuracy(&ranks, 1, n).unwrap(), 1.0);
    }

    #[test]
    fn rank_batch_all_equal_uses_index_tiebreak() {
        // With every score tied, the true assembly is outranked exactly by
        // the lower-index assemblies, so top-1 hits only where the
        // permuted true index is 0: exactly once per batch.
        let n = 3;
        let s = Matrix::ones((n, n));
        for perm in [[0usize, 1, 2], [2, 0, 1], [1, 2, 0]] {
            let ranks = rank_batch(&s, &perm);
            for (k, &p) in perm.iter().enumerate() {
                assert_eq!(ranks[k], p);
            }
            assert_eq!(topk_accuracy(&ranks, 1, n).unwrap(), 1.0 / 3.0);
        }
    }

    #[test]
    fn rank_batch_matches_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(2..30);
            let d = rng.random_range(2..10);
            let a = Matrix::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
            let p = Matrix::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let fast = rank_batch(&a.dot(&p.t()), &perm);
            let oracle = oracle_rank(&a, &p, &perm);
            assert_eq!(fast, oracle);
        }
    }

    #[test]
    fn rank_batch_is_scale_invariant_and_permutation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 12;
        let s = Matrix::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let identity: Vec<usize> = (0..n).collect();
        let base = rank_batch(&s, &identity);
        let scaled = rank_batch(&(&s * 2.5), &identity);
        assert_eq!(base, scaled);
        // Permuting the part columns while tracking the permutation gives
        // each record the same rank.
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut shuffled = Matrix::zeros((n, n));
        for k in 0..n {
            for i in 0..n {
                shuffled[[i, k]] = s[[i, perm[k]]];
            }
        }
        let permuted = rank_batch(&shuffled, &perm);
        for k in 0..n {
            assert_eq!(permuted[k], base[perm[k]]);
        }
    }

    #[test]
    fn topk_accuracy_examples_and_errors() {
        assert_eq!(topk_accuracy(&[0, 4, 10], 5, 20).unwrap(), 2.0 / 3.0);
        assert_eq!(topk_accuracy(&[0, 0, 0], 1, 20).unwrap(), 1.0);
        assert!(topk_accuracy(&[0], 0, 20).is_err());
        assert!(topk_accuracy(&[0], 21, 20).is_err());
    }

    #[test]
    fn topk_is_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 50;
        let ranks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let t1 = topk_accuracy(&ranks, 1, n).unwrap();
        let t5 = topk_accuracy(&ranks, 5, n).unwrap();
        let t10 = topk_accuracy(&ranks, 10, n).unwrap();
        assert!(t1 <= t5 && t5 <= t10);
    }

    #[test]
    fn evaluate_identical_texts_give_perfect_top1() {
        // Every record's parts string equals its assembly name, so with a
        // deterministic embedder the diagonal carries similarity 1.
        let embedder = HashEmbedder { dim: 16 };
        let (report, sims) = evaluate(&embedder, &records(40), 20, 9).unwrap();
        assert_eq!(report.n_batches, 2);
        assert_eq!(report.topk.top1, 1.0);
        // Aggregate accuracy is the unweighted mean of per-batch values.
        let mean: f64 =
            report.per_batch.iter().map(|b| b.top5).sum::<f64>() / report.n_batches as f64;
        assert!((report.topk.top5 - mean).abs() < 1e-12);
        for s in &sims {
            assert!(s.scores.iter().all(|v| (-1.0 - 1e-6..=1.0 + 1e-6).contains(v)));
        }
    }

    #[test]
    fn evaluate_report_json_shape() {
        let embedder = HashEmbedder { dim: 8 };
        let (report, _) = evaluate(&embedder, &records(20), 10, 1).unwrap();
        let value = serde_json::to_value(&report).unwrap();
        assert!(value["topk"]["1"].is_number());
        assert!(value["topk"]["5"].is_number());
        assert!(value["topk"]["10"].is_number());
        assert_eq!(value["per_batch"].as_array().unwrap().len(), report.n_batches);
        assert!(value["per_batch"][0]["ranks"].is_array());
    }

    #[test]
    fn similarity_csv_roundtrip() {
        let sim = SimilarityMatrix {
            scores: ndarray::array![[1.0, 0.25], [-0.5, 0.125]],
            row_ids: vec!["a1".into(), "a2".into()],
            col_ids: vec!["p1".into(), "p2".into()],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim.csv");
        export_similarity_csv(&sim, &path).unwrap();
        let loaded = load_similarity_csv(&path).unwrap();
        assert_eq!(loaded.row_ids, sim.row_ids);
        assert_eq!(loaded.col_ids, sim.col_ids);
        for (a, b) in sim.scores.iter().zip(loaded.scores.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn similarity_pgm_range() {
        let sim = SimilarityMatrix {
            scores: ndarray::array![[1.0, 0.0], [0.0, 1.0]],
            row_ids: vec!["a".into(), "b".into()],
            col_ids: vec!["c".into(), "d".into()],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim.pgm");
        export_similarity_pgm(&sim, &path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = content.lines().collect();
        assert_eq!(lines[0], "P2");
        assert_eq!(lines[1], "2 2");
        assert_eq!(lines[2], "255");
        assert_eq!(lines[3], "255 0");
        assert_eq!(lines[4], "0 255");
    }

    #[test]
    fn random_unit_embeddings_hit_chance_rates() {
        // Small version of the chance calibration: top-k ≈ k/N.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 20;
        let trials = 400;
        let mut top1 = 0.0;
        for _ in 0..trials {
            let unit = |rng: &mut ChaCha8Rng| {
                let mut m = Matrix::from_shape_fn((n, 8), |_| rng.random_range(-1.0..1.0));
                for mut row in m.rows_mut() {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.mapv_inplace(|v| v / norm);
                }
                m
            };
            let a = unit(&mut rng);
            let p = unit(&mut rng);
            let identity: Vec<usize> = (0..n).collect();
            let ranks = rank_batch(&a.dot(&p.t()), &identity);
            top1 += topk_accuracy(&ranks, 1, n).unwrap();
        }
        top1 /= trials as f64;
        assert!((top1 - 1.0 / n as f64).abs() < 0.02, "top1 {top1}");
    }
}
