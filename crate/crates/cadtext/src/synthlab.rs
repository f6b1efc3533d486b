//! Deterministic synthetic corpora with a controllable assembly↔parts
//! signal, plus brute-force reference implementations used as oracles by
//! the test suite.
//!
//! The oracles are deliberately written as plain scalar loops with no code
//! shared with the fast paths they check.

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::AssemblyRecord;

/// One concept pool; assemblies drawn from a theme take their head word
/// from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThemePool {
    pub name: String,
    pub head_words: Vec<String>,
}

/// Generator configuration. `overlap_strength` is the probability that a
/// part name carries its assembly's head word; the rest draw from the
/// noise pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_assemblies: usize,
    pub themes: Vec<ThemePool>,
    pub modifiers: Vec<String>,
    pub part_nouns: Vec<String>,
    pub noise_words: Vec<String>,
    pub min_parts: usize,
    pub max_parts: usize,
    pub overlap_strength: f64,
    pub with_descriptions: bool,
    pub seed: u64,
}

impl SynthSpec {
    /// Desk-scale default: ~1,840-token vocabulary, 2..=8 parts per
    /// assembly. Head words are numerous enough that a 100-item batch
    /// rarely repeats one, which keeps the zero-shot signal clean.
    pub fn new(n_assemblies: usize, overlap_strength: f64, seed: u64) -> Self {
        let theme_stems: [(&str, [&str; 10]); 8] = [
            ("fasteners", ["bolt", "screw", "nut", "rivet", "washer", "anchor", "stud", "clamp", "dowel", "peg"]),
            ("furniture", ["chair", "table", "shelf", "desk", "bench", "stool", "cabinet", "drawer", "frame", "rack"]),
            ("electronics", ["board", "sensor", "relay", "switch", "probe", "module", "socket", "diode", "chip", "coil"]),
            ("drivetrain", ["gear", "pulley", "sprocket", "belt", "chain", "axle", "rotor", "cam", "crank", "hub"]),
            ("plumbing", ["valve", "pipe", "fitting", "nozzle", "manifold", "gasket", "union", "elbow", "tee", "plug"]),
            ("optics", ["lens", "mirror", "prism", "filter", "aperture", "mount", "barrel", "reticle", "ocular", "stage"]),
            ("robotics", ["servo", "gripper", "joint", "linkage", "actuator", "encoder", "chassis", "wheel", "arm", "mast"]),
            ("fixtures", ["jig", "vise", "stop", "guide", "locator", "cradle", "pallet", "nest", "post", "block"]),
        ];
        let themes = theme_stems
            .iter()
            .map(|(name, stems)| ThemePool {
                name: name.to_string(),
                head_words: stems
                    .iter()
                    .flat_map(|stem| (1..=15).map(move |n| format!("{stem}{n}")))
                    .collect(),
            })
            .collect();
        let mut modifiers: Vec<String> = (1..=80).map(|n| format!("v{n}")).collect();
        modifiers.extend((1..=80).map(|n| format!("mk{n}")));
        modifiers.extend(
            ["small", "large", "mini", "micro", "heavy", "slim", "compact", "standard",
             "short", "long", "wide", "narrow", "left", "right", "upper", "lower",
             "front", "rear", "inner", "outer", "single", "double", "triple", "spare",
             "basic", "custom", "solid", "hollow", "fixed", "mobile", "rigid", "soft",
             "round", "square", "flat", "angled", "coarse", "fine", "light", "dense"]
                .iter()
                .map(|s| s.to_string()),
        );
        let part_nouns = [
            "bracket", "housing", "plate", "shaft", "bearing", "spacer", "panel", "cover",
            "flange", "bushing", "collar", "lever", "knob", "hinge", "rail", "clip",
            "strut", "boss", "rib", "web", "cap", "base", "stem", "yoke",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let noise_stems = ["widget", "item", "misc", "blank", "stock", "temp", "piece", "filler", "extra", "scrap"];
        let noise_words = noise_stems
            .iter()
            .flat_map(|stem| (1..=40).map(move |n| format!("{stem}{n}")))
            .collect();
        SynthSpec {
            n_assemblies,
            themes,
            modifiers,
            part_nouns,
            noise_words,
            min_parts: 2,
            max_parts: 8,
            overlap_strength,
            with_descriptions: false,
            seed,
        }
    }
}

/// Generate a seeded corpus. Assembly name = "<head> <modifier>"; each
/// part is "<noun> <head>" with probability `overlap_strength`, else
/// "<noun> <noise>".
pub fn generate(spec: &SynthSpec) -> Vec<AssemblyRecord> {
    assert!(!spec.themes.is_empty() && spec.themes.iter().all(|t| !t.head_words.is_empty()));
    assert!(!spec.modifiers.is_empty() && !spec.part_nouns.is_empty() && !spec.noise_words.is_empty());
    assert!((0.0..=1.0).contains(&spec.overlap_strength));
    assert!(spec.min_parts >= 1 && spec.min_parts <= spec.max_parts);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n_assemblies);
    for i in 0..spec.n_assemblies {
        let theme = &spec.themes[rng.random_range(0..spec.themes.len())];
        let head = theme.head_words.choose(&mut rng).unwrap();
        let modifier = spec.modifiers.choose(&mut rng).unwrap();
        let n_parts = rng.random_range(spec.min_parts..=spec.max_parts);
        let mut part_names = Vec::with_capacity(n_parts);
        for _ in 0..n_parts {
            let noun = spec.part_nouns.choose(&mut rng).unwrap();
            if rng.random_bool(spec.overlap_strength) {
                part_names.push(format!("{noun} {head}"));
            } else {
                let noise = spec.noise_words.choose(&mut rng).unwrap();
                part_names.push(format!("{noun} {noise}"));
            }
        }
        let description = if spec.with_descriptions {
            Some(format!("{} unit built around the {head} core", theme.name))
        } else {
            None
        };
        records.push(AssemblyRecord {
            id: format!("synth-{i:05}"),
            assembly_name: format!("{head} {modifier}"),
            part_names,
            description,
        });
    }
    records
}

/// Reference ranking: scalar loops over raw embedding rows. `permutation`
/// maps part row `k` to its true assembly row. Ties break toward the
/// lower assembly index.
pub fn oracle_rank(assembly_rows: &Array2<f64>, part_rows: &Array2<f64>, permutation: &[usize]) -> Vec<usize> {
    let n = assembly_rows.nrows();
    assert_eq!(part_rows.nrows(), n);
    assert_eq!(permutation.len(), n);
    let d = assembly_rows.ncols();
    let mut ranks = Vec::with_capacity(n);
    for k in 0..n {
        let true_idx = permutation[k];
        let mut true_score = 0.0;
        for c in 0..d {
            true_score += assembly_rows[[true_idx, c]] * part_rows[[k, c]];
        }
        let mut rank = 0;
        for i in 0..n {
            if i == true_idx {
                continue;
            }
            let mut score = 0.0;
            for c in 0..d {
                score += assembly_rows[[i, c]] * part_rows[[k, c]];
            }
            if score > true_score || (score == true_score && i < true_idx) {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    ranks
}

/// Reference dedup: all-pairs comparison, no hashing. Keeps the first of
/// each (assembly name, part multiset) group and removes repeated part
/// names within a record.
pub fn oracle_dedup(records: &[AssemblyRecord]) -> Vec<AssemblyRecord> {
    // Within-record dedup by pairwise scan.
    let mut reduced: Vec<AssemblyRecord> = Vec::with_capacity(records.len());
    for r in records {
        let mut parts: Vec<String> = Vec::new();
        for p in &r.part_names {
            let mut dup = false;
            for q in &parts {
                if q == p {
                    dup = true;
                    break;
                }
            }
            if !dup {
                parts.push(p.clone());
            }
        }
        reduced.push(AssemblyRecord {
            id: r.id.clone(),
            assembly_name: r.assembly_name.clone(),
            part_names: parts,
            description: r.description.clone(),
        });
    }
    let same_multiset = |a: &[String], b: &[String]| -> bool {
        if a.len() != b.len() {
            return false;
        }
        let mut used = vec![false; b.len()];
        for x in a {
            let mut found = false;
            for (j, y) in b.iter().enumerate() {
                if !used[j] && x == y {
                    used[j] = true;
                    found = true;
                    break;
                }
            }
            if !found {
                return false;
            }
        }
        true
    };
    let mut out: Vec<AssemblyRecord> = Vec::new();
    for r in &reduced {
        let mut dup = false;
        for kept in &out {
            if kept.assembly_name == r.assembly_name && same_multiset(&kept.part_names, &r.part_names) {
                dup = true;
                break;
            }
        }
        if !dup {
            out.push(r.clone());
        }
    }
    out
}
