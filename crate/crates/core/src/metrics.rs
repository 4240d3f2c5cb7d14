//! Token and sequence measures: family-weighted PER, WER, embedding
//! cosine, repetition detection and n-gram frequency tables.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{format_num, LayerCurve, LensReport, TRAJECTORY_K};
use crate::model::is_special;
use crate::vocab::Vocabulary;

pub const SAME_FAMILY_COST: f64 = 0.5;

/// Phoneme inventory with a family per phoneme. Phonemes are referred to
/// by their index in the inventory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhonemeFamilies {
    symbols: Vec<String>,
    family_of: Vec<usize>,
    family_names: Vec<String>,
}

impl PhonemeFamilies {
    /// Anonymous inventory: phoneme `i` belongs to family `families[i]`.
    pub fn from_ids(families: Vec<usize>) -> Self {
        let n_fam = families.iter().max().map_or(0, |m| m + 1);
        Self {
            symbols: (0..families.len()).map(|i| format!("p{i}")).collect(),
            family_of: families,
            family_names: (0..n_fam).map(|i| format!("f{i}")).collect(),
        }
    }

    /// Family file: `phoneme<TAB>family` per line, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, line) in data_lines(text) {
            let mut cols = line.split('\t');
            let (Some(sym), Some(fam), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::Parse(format!(
                    "families line {n}: expected 2 tab-separated fields"
                )));
            };
            let (sym, fam) = (sym.trim(), fam.trim());
            if out.id(sym).is_some() {
                return Err(Error::Parse(format!(
                    "families line {n}: phoneme {sym:?} listed twice"
                )));
            }
            let f = match out.family_names.iter().position(|x| x == fam) {
                Some(f) => f,
                None => {
                    out.family_names.push(fam.to_string());
                    out.family_names.len() - 1
                }
            };
            out.symbols.push(sym.to_string());
            out.family_of.push(f);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn family(&self, phoneme: usize) -> Result<usize> {
        self.family_of
            .get(phoneme)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown phoneme id {phoneme}")))
    }

    pub fn family_name(&self, phoneme: usize) -> Result<&str> {
        Ok(&self.family_names[self.family(phoneme)?])
    }

    fn substitution(&self, a: usize, b: usize) -> f64 {
        if a == b {
            0.0
        } else if self.family_of[a] == self.family_of[b] {
            SAME_FAMILY_COST
        } else {
            1.0
        }
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub language: String,
    pub acoustic: bool,
    pub phonemes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeLexicon {
    pub families: PhonemeFamilies,
    pub entries: BTreeMap<String, LexiconEntry>,
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" => Some(true),
        "0" | "false" | "no" | "n" => Some(false),
        _ => None,
    }
}

impl PhonemeLexicon {
    /// Lexicon file: `token<TAB>language<TAB>acoustic<TAB>phonemes`, the
    /// last field space-separated phoneme symbols (empty for non-acoustic
    /// tokens).
    pub fn parse(lexicon: &str, families: PhonemeFamilies) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in data_lines(lexicon) {
            let cols: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(Error::Parse(format!(
                    "lexicon line {n}: expected 4 tab-separated fields"
                )));
            }
            let acoustic = parse_flag(cols[2]).ok_or_else(|| {
                Error::Parse(format!("lexicon line {n}: bad acoustic flag {:?}", cols[2]))
            })?;
            let phonemes = cols
                .get(3)
                .map_or("", |s| *s)
                .split_whitespace()
                .map(|p| {
                    families.id(p).ok_or_else(|| {
                        Error::Parse(format!("lexicon line {n}: phoneme {p:?} has no family"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if !acoustic && !phonemes.is_empty() {
                return Err(Error::Parse(format!(
                    "lexicon line {n}: non-acoustic token with phonemes"
                )));
            }
            let token = cols[0].to_string();
            let entry = LexiconEntry {
                language: cols[1].trim().to_string(),
                acoustic,
                phonemes,
            };
            if entries.insert(token.clone(), entry).is_some() {
                return Err(Error::Parse(format!(
                    "lexicon line {n}: duplicate token {token:?}"
                )));
            }
        }
        Ok(Self { families, entries })
    }

    pub fn load(lexicon: impl AsRef<Path>, families: impl AsRef<Path>) -> Result<Self> {
        let fam = PhonemeFamilies::parse(&std::fs::read_to_string(families)?)?;
        Self::parse(&std::fs::read_to_string(lexicon)?, fam)
    }

    /// Phonemes of an acoustic token; `None` for unknown or non-acoustic
    /// tokens.
    pub fn acoustic_phonemes(&self, token: &str) -> Option<&[usize]> {
        self.entries
            .get(token)
            .filter(|e| e.acoustic && !e.phonemes.is_empty())
            .map(|e| e.phonemes.as_slice())
    }
}

/// Minimum total edit cost: insertion and deletion 1, substitution 0.5
/// within a family and 1 across families.
pub fn alignment_cost(
    reference: &[usize],
    hypothesis: &[usize],
    families: &PhonemeFamilies,
) -> Result<f64> {
    for &p in reference.iter().chain(hypothesis) {
        families.family(p)?;
    }
    let m = hypothesis.len();
    let mut prev: Vec<f64> = (0..=m).map(|j| j as f64).collect();
    let mut cur = vec![0.0; m + 1];
    for (i, &a) in reference.iter().enumerate() {
        cur[0] = (i + 1) as f64;
        for (j, &b) in hypothesis.iter().enumerate() {
            let sub = prev[j] + families.substitution(a, b);
            let del = prev[j + 1] + 1.0;
            let ins = cur[j] + 1.0;
            cur[j + 1] = sub.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PerValue {
    /// Cost divided by reference length.
    Rate(f64),
    /// Empty reference: raw cost (= hypothesis length), not normalised.
    EmptyReference(f64),
    /// Both sequences empty.
    Undefined,
}

impl PerValue {
    pub fn rate(self) -> Option<f64> {
        match self {
            PerValue::Rate(r) => Some(r),
            _ => None,
        }
    }
}

pub fn per(
    reference: &[usize],
    hypothesis: &[usize],
    families: &PhonemeFamilies,
) -> Result<PerValue> {
    let cost = alignment_cost(reference, hypothesis, families)?;
    Ok(match (reference.is_empty(), hypothesis.is_empty()) {
        (true, true) => PerValue::Undefined,
        (true, false) => PerValue::EmptyReference(cost),
        _ => PerValue::Rate(cost / reference.len() as f64),
    })
}

/// Levenshtein distance over words divided by reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidInput(
            "WER undefined for an empty reference".into(),
        ));
    }
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0; m + 1];
    for (i, a) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, b) in hypothesis.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(a != b))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m] as f64 / reference.len() as f64)
}

/// WER over the non-special content of two token-id sequences.
pub fn token_wer(reference: &[u32], hypothesis: &[u32]) -> Result<f64> {
    let content = |s: &[u32]| {
        s.iter()
            .copied()
            .filter(|&t| !is_special(t))
            .collect::<Vec<_>>()
    };
    wer(&content(reference), &content(hypothesis))
}

/// Cosine similarity; `None` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Some(c.clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub language: Option<String>,
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(vectors: HashMap<String, Vec<f64>>, language: Option<String>) -> Result<Self> {
        let dim = vectors.values().next().map_or(0, Vec::len);
        for (t, v) in &vectors {
            if v.len() != dim {
                return Err(Error::Parse(format!(
                    "embedding for {t:?} has dim {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Parse(format!("embedding for {t:?} is not finite")));
            }
        }
        Ok(Self {
            language,
            dim,
            vectors,
        })
    }

    /// Lines `token<TAB>f1 f2 …`; `#lang <tag>` sets the language.
    pub fn parse(text: &str) -> Result<Self> {
        let mut language = None;
        let mut vectors = HashMap::new();
        for (n, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end())) {
            if let Some(tag) = line.strip_prefix("#lang") {
                language = Some(tag.trim().to_string());
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (token, rest) = line.split_once('\t').ok_or_else(|| {
                Error::Parse(format!("embedding line {n}: expected token<TAB>values"))
            })?;
            let v = rest
                .split_whitespace()
                .map(|x| {
                    x.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("embedding line {n}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vectors.insert(token.to_string(), v).is_some() {
                return Err(Error::Parse(format!(
                    "embedding line {n}: duplicate token {token:?}"
                )));
            }
        }
        Self::new(vectors, language)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionLoop {
    pub ngram: Vec<u32>,
    pub count: usize,
    /// Offset into the non-special content of the sequence.
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionVerdict {
    pub repeating: bool,
    pub found: Option<RepetitionLoop>,
}

pub const REPETITION_N_MAX: usize = 5;
pub const REPETITION_MIN_REPEATS: usize = 4;

/// Looks for an n-gram (n ≤ `n_max`) of non-special tokens repeated at
/// least `min_repeats` times back to back. Among loops, the one covering
/// the most tokens wins, then the shorter n-gram, then the earlier start.
pub fn detect_repetition(sequence: &[u32], n_max: usize, min_repeats: usize) -> RepetitionVerdict {
    let content: Vec<u32> = sequence
        .iter()
        .copied()
        .filter(|&t| !is_special(t))
        .collect();
    let mut best: Option<RepetitionLoop> = None;
    for n in 1..=n_max.min(content.len()) {
        for start in 0..=content.len() - n {
            let gram = &content[start..start + n];
            let mut count = 1;
            while start + (count + 1) * n <= content.len()
                && &content[start + count * n..start + (count + 1) * n] == gram
            {
                count += 1;
            }
            if count < min_repeats.max(1) {
                continue;
            }
            let better = best
                .as_ref()
                .is_none_or(|b| count * n > b.count * b.ngram.len());
            if better {
                best = Some(RepetitionLoop {
                    ngram: gram.to_vec(),
                    count,
                    start,
                });
            }
        }
    }
    RepetitionVerdict {
        repeating: best.is_some(),
        found: best,
    }
}

pub fn has_repetition(sequence: &[u32]) -> bool {
    detect_repetition(sequence, REPETITION_N_MAX, REPETITION_MIN_REPEATS).repeating
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramCount {
    pub ngram: Vec<u32>,
    pub count: usize,
    /// Number of sequences containing the n-gram at least once.
    pub doc_freq: usize,
}

/// Counts of non-special token n-grams with `n` in `n_range`, sorted by
/// count, then document frequency (both descending), then n-gram.
pub fn ngram_frequency(
    corpus: &[Vec<u32>],
    n_range: std::ops::RangeInclusive<usize>,
) -> Result<Vec<NgramCount>> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let mut table: HashMap<Vec<u32>, (usize, usize)> = HashMap::new();
    for seq in corpus {
        let content: Vec<u32> = seq.iter().copied().filter(|&t| !is_special(t)).collect();
        let mut seen = std::collections::HashSet::new();
        for n in n_range.clone().filter(|&n| n >= 1) {
            for gram in content.windows(n) {
                let e = table.entry(gram.to_vec()).or_default();
                e.0 += 1;
                if seen.insert(gram.to_vec()) {
                    e.1 += 1;
                }
            }
        }
    }
    let mut out: Vec<NgramCount> = table
        .into_iter()
        .map(|(ngram, (count, doc_freq))| NgramCount {
            ngram,
            count,
            doc_freq,
        })
        .collect();
    out.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(b.doc_freq.cmp(&a.doc_freq))
            .then(a.ngram.cmp(&b.ngram))
    });
    Ok(out)
}

/// A per-layer curve plus how many comparisons were dropped at each layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludingCurve {
    pub curve: LayerCurve,
    pub excluded: Vec<usize>,
}

/// Mean PER between each step's selected token and every top-5
/// candidate, per layer. Steps whose selected token is special or has no
/// acoustic lexicon entry are skipped; candidates without one are counted
/// as excluded.
pub fn layer_per_curve(
    reports: &[LensReport],
    vocab: &Vocabulary,
    lexicon: &PhonemeLexicon,
) -> Result<ExcludingCurve> {
    layer_curve(reports, |selected, candidate| {
        if is_special(selected) {
            return Ok(Comparison::SkipStep);
        }
        let Some(r) = lexicon.acoustic_phonemes(vocab.token(selected)) else {
            return Ok(Comparison::SkipStep);
        };
        if is_special(candidate) {
            return Ok(Comparison::Excluded);
        }
        let Some(h) = lexicon.acoustic_phonemes(vocab.token(candidate)) else {
            return Ok(Comparison::Excluded);
        };
        Ok(match per(r, h, &lexicon.families)?.rate() {
            Some(v) => Comparison::Value(v),
            None => Comparison::Excluded,
        })
    })
}

/// Mean cosine similarity between the selected token and each top-5
/// candidate. Special tokens and tokens missing from the table are
/// excluded, as are zero vectors; punctuation is kept.
pub fn cosine_curve(
    reports: &[LensReport],
    vocab: &Vocabulary,
    table: &EmbeddingTable,
) -> Result<ExcludingCurve> {
    layer_curve(reports, |selected, candidate| {
        if is_special(selected) {
            return Ok(Comparison::SkipStep);
        }
        let Some(a) = table.get(vocab.token(selected)) else {
            return Ok(Comparison::SkipStep);
        };
        if is_special(candidate) {
            return Ok(Comparison::Excluded);
        }
        let Some(b) = table.get(vocab.token(candidate)) else {
            return Ok(Comparison::Excluded);
        };
        Ok(cosine(a, b).map_or(Comparison::Excluded, Comparison::Value))
    })
}

enum Comparison {
    Value(f64),
    Excluded,
    SkipStep,
}

fn layer_curve(
    reports: &[LensReport],
    mut compare: impl FnMut(u32, u32) -> Result<Comparison>,
) -> Result<ExcludingCurve> {
    let n_layers = reports.iter().map(LensReport::n_layers).max().unwrap_or(0);
    let mut samples = vec![Vec::new(); n_layers];
    let mut excluded = vec![0; n_layers];
    for r in reports {
        'steps: for (s, layers) in r.projections.iter().enumerate() {
            let selected = r.selected[s];
            for (l, proj) in layers.iter().enumerate() {
                for c in proj.top_ids(TRAJECTORY_K.min(proj.logits.len())) {
                    match compare(selected, c)? {
                        Comparison::Value(v) => samples[l].push(v),
                        Comparison::Excluded => excluded[l] += 1,
                        Comparison::SkipStep => continue 'steps,
                    }
                }
            }
        }
    }
    for (l, n) in excluded.iter().enumerate() {
        if *n > 0 {
            log::info!("layer {}: {n} candidate comparisons excluded", l + 1);
        }
    }
    Ok(ExcludingCurve {
        curve: LayerCurve::from_samples(&samples),
        excluded,
    })
}

/// Per-layer PER and cosine curves with WER and repetition results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per: Option<ExcludingCurve>,
    pub cosine: Option<ExcludingCurve>,
    pub wer: Vec<f64>,
    pub repetition: Vec<RepetitionVerdict>,
}

impl MetricReport {
    /// Layer table: `layer,per_mean,per_sem,per_n,per_excluded,cos_mean,cos_sem,cos_n,cos_excluded`.
    pub fn layer_csv(&self) -> String {
        let n = [&self.per, &self.cosine]
            .iter()
            .filter_map(|c| c.as_ref().map(|c| c.curve.mean.len()))
            .max()
            .unwrap_or(0);
        let cells = |c: &Option<ExcludingCurve>, l: usize| -> [String; 4] {
            match c {
                Some(c) if l < c.curve.mean.len() => [
                    format_num(c.curve.mean[l]),
                    format_num(c.curve.sem[l]),
                    c.curve.count[l].to_string(),
                    c.excluded[l].to_string(),
                ],
                _ => Default::default(),
            }
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "layer",
            "per_mean",
            "per_sem",
            "per_n",
            "per_excluded",
            "cos_mean",
            "cos_sem",
            "cos_n",
            "cos_excluded",
        ])
        .expect("in-memory write");
        for l in 0..n {
            let mut row = vec![(l + 1).to_string()];
            row.extend(cells(&self.per, l));
            row.extend(cells(&self.cosine, l));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::{LensProjection, SaturationRule};

    fn fam() -> PhonemeFamilies {
        PhonemeFamilies::parse("k\tplosive\nt\tplosive\na\tvowel\nu\tvowel\nm\tnasal\n").unwrap()
    }

    fn ids(f: &PhonemeFamilies, s: &str) -> Vec<usize> {
        s.split_whitespace().map(|p| f.id(p).unwrap()).collect()
    }

    #[test]
    fn per_examples() {
        let f = fam();
        assert_eq!(
            per(&ids(&f, "k a t"), &ids(&f, "k a t"), &f).unwrap(),
            PerValue::Rate(0.0)
        );
        assert_eq!(
            per(&ids(&f, "k a t"), &ids(&f, "k u t"), &f).unwrap(),
            PerValue::Rate(0.5 / 3.0)
        );
        assert_eq!(
            per(&ids(&f, "k a t"), &ids(&f, "k a"), &f).unwrap(),
            PerValue::Rate(1.0 / 3.0)
        );
        assert_eq!(
            per(&ids(&f, "k a t"), &ids(&f, "k m t"), &f).unwrap(),
            PerValue::Rate(1.0 / 3.0)
        );
        assert_eq!(
            per(&[], &ids(&f, "k a"), &f).unwrap(),
            PerValue::EmptyReference(2.0)
        );
        assert_eq!(per(&[], &[], &f).unwrap(), PerValue::Undefined);
        assert!(per(&[0], &[9], &f).is_err());
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 0.0);
        assert_eq!(wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap(), 1.0 / 3.0);
        assert_eq!(wer(&["a"], &["a", "b"]).unwrap(), 1.0);
        assert!(wer::<&str>(&[], &["a"]).is_err());
        assert_eq!(token_wer(&[0, 5, 6, 1], &[0, 5, 1]).unwrap(), 0.5);
    }

    #[test]
    fn cosine_examples() {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - r).abs() < 1e-15);
        assert!((cosine(&[0.0, 1.0], &[1.0, 1.0]).unwrap() - r).abs() < 1e-15);
        assert_eq!(cosine(&[2.0, 3.0], &[2.0, 3.0]), Some(1.0));
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), None);
    }

    #[test]
    fn repetition_examples() {
        let ha = [0, 7, 7, 7, 7, 7, 1];
        let v = detect_repetition(&ha, 5, 4);
        assert!(v.repeating);
        assert_eq!(v.found.as_ref().unwrap().ngram, vec![7]);
        assert_eq!(v.found.unwrap().count, 5);
        assert!(!detect_repetition(&[4, 5, 6], 5, 4).repeating);
        let ab = [4, 5, 4, 5, 4, 5, 4, 5];
        let v = detect_repetition(&ab, 5, 4).found.unwrap();
        assert_eq!((v.ngram, v.count, v.start), (vec![4, 5], 4, 0));
        let mut wrapped = vec![0, 2];
        wrapped.extend(ab);
        wrapped.extend([1, 2]);
        assert_eq!(
            detect_repetition(&wrapped, 5, 4),
            detect_repetition(&ab, 5, 4)
        );
    }

    #[test]
    fn ngram_examples() {
        let t = ngram_frequency(&[vec![4, 5]], 1..=1).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|c| c.count == 1 && c.doc_freq == 1));
        let mut corpus = Vec::new();
        for i in 0..400u32 {
            let mut doc = vec![0, 10 + i % 7];
            if i < 390 {
                doc.extend([4, 5, 6]);
            }
            doc.push(1);
            corpus.push(doc);
        }
        let t = ngram_frequency(&corpus, 3..=3).unwrap();
        assert_eq!(t[0].ngram, vec![4, 5, 6]);
        assert_eq!(t[0].doc_freq, 390);
        assert!(ngram_frequency(&[], 1..=2).is_err());
    }

    #[test]
    fn lexicon_parsing() {
        let lex = PhonemeLexicon::parse("cat\ten\t1\tk a t\n,\ten\t0\t\n", fam()).unwrap();
        assert_eq!(lex.acoustic_phonemes("cat").unwrap().len(), 3);
        assert!(lex.acoustic_phonemes(",").is_none());
        assert!(PhonemeLexicon::parse("x\ten\t1\tz\n", fam()).is_err());
        assert!(PhonemeLexicon::parse("x\ten\t0\tk\n", fam()).is_err());
        let e = EmbeddingTable::parse("#lang en\ncat\t1 0\ndog\t0 1\n").unwrap();
        assert_eq!(e.language.as_deref(), Some("en"));
        assert!(EmbeddingTable::parse("a\t1 2\nb\t1\n").is_err());
    }

    /// Report whose single step has the given per-layer logits.
    fn report(selected: u32, logits: Vec<Vec<f64>>) -> LensReport {
        let projections = vec![logits
            .into_iter()
            .enumerate()
            .map(|(l, logits)| LensProjection {
                step: 0,
                layer: l + 1,
                logits,
                topk: vec![],
            })
            .collect::<Vec<_>>()];
        LensReport {
            tokens: vec![0, selected],
            selected: vec![selected],
            projections,
            saturation: vec![1],
            rule: SaturationRule::Stable,
            selected_prob: vec![],
        }
    }

    #[test]
    fn per_curve_hand_computed() {
        // tokens 4=cat (k a t), 5=cut (k u t), 6=mat (m a t), 7=","
        let vocab = Vocabulary::new(
            ["<bos>", "<eos>", "<pad>", "<unk>", "cat", "cut", "mat", ","]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        let lex = PhonemeLexicon::parse(
            "cat\ten\t1\tk a t\ncut\ten\t1\tk u t\nmat\ten\t1\tm a t\n,\ten\t0\t\n",
            fam(),
        )
        .unwrap();
        // Layer 1 top-5: cat, cut, mat, "," and EOS. Layer 2 top-5: four
        // specials and ",".
        let l1 = vec![0.0, 0.1, 0.0, 0.0, 5.0, 4.0, 3.0, 2.0];
        let l2 = vec![9.0, 8.0, 7.0, 6.0, 0.0, 0.0, 0.0, 5.0];
        let c = layer_per_curve(&[report(4, vec![l1.clone(), l2.clone()])], &vocab, &lex).unwrap();
        // cat-cat 0, cat-cut 0.5/3, cat-mat 1/3
        assert!((c.curve.mean[0] - (0.0 + 0.5 / 3.0 + 1.0 / 3.0) / 3.0).abs() < 1e-12);
        assert_eq!(c.excluded[0], 2);
        assert!(c.curve.mean[1].is_nan());
        assert_eq!((c.curve.count[1], c.excluded[1]), (0, 5));

        let table = EmbeddingTable::parse("cat\t1 0\ncut\t0 1\nmat\t1 1\n,\t0 0\n").unwrap();
        let c = cosine_curve(&[report(4, vec![l1, l2])], &vocab, &table).unwrap();
        let expect = (1.0 + 0.0 + std::f64::consts::FRAC_1_SQRT_2) / 3.0;
        assert!((c.curve.mean[0] - expect).abs() < 1e-12);
        assert_eq!(c.excluded[0], 2);
        let csv = MetricReport {
            per: None,
            cosine: Some(c),
            wer: vec![],
            repetition: vec![],
        }
        .layer_csv();
        assert!(csv.starts_with("layer,per_mean"));
        assert_eq!(csv.lines().count(), 3);
    }
}
