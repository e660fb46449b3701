//! Corpus-level question evaluation and preference-record analysis.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::vocab::tokenize;
use crate::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalInstance {
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

/// Candidates with their references, validated non-empty.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCorpus {
    instances: Vec<EvalInstance>,
}

impl EvalCorpus {
    pub fn new(instances: Vec<EvalInstance>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Input("empty evaluation corpus".into()));
        }
        if let Some(bad) = instances.iter().find(|i| i.references.is_empty()) {
            return Err(Error::Input(format!("instance {} has no references", bad.id)));
        }
        Ok(Self { instances })
    }

    pub fn instances(&self) -> &[EvalInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Suffix stripper shared by METEOR-lite and CIDEr.
pub fn stem(word: &str) -> String {
    let n = word.chars().count();
    let strip = |suffix: &str| word[..word.len() - suffix.len()].to_string();
    if n > 5 && word.ends_with("ing") {
        strip("ing")
    } else if n > 4 && word.ends_with("ed") {
        strip("ed")
    } else if n > 4 && word.ends_with("es") {
        strip("es")
    } else if n > 3 && word.ends_with('s') && !word.ends_with("ss") {
        strip("s")
    } else {
        word.to_string()
    }
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with clipped counts, closest-reference brevity penalty and no smoothing.
pub fn bleu(corpus: &EvalCorpus, n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Input(format!("BLEU order {n} outside 1..=4")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for inst in corpus.instances() {
        let cand = tokenize(&inst.candidate);
        let refs: Vec<Vec<String>> = inst.references.iter().map(|r| tokenize(r)).collect();
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty references");
        for k in 1..=n {
            let counts = ngram_counts(&cand, k);
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, k)).collect();
            for (gram, &c) in &counts {
                let max_ref = ref_counts.iter().map(|rc| rc.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[k - 1] += c.min(max_ref);
            }
            total[k - 1] += cand.len().saturating_sub(k - 1);
        }
    }
    if c_len == 0 || matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / n as f64;
    let bp = (1.0 - r_len as f64 / c_len as f64).min(0.0).exp();
    Ok(bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    for x in a {
        let mut cur = vec![0; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn rouge_l_sentence(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    let l = lcs(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean over instances of the best LCS F-measure against any reference.
pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64> {
    let sum: f64 = corpus
        .instances()
        .iter()
        .map(|i| i.references.iter().map(|r| rouge_l_sentence(&i.candidate, r)).fold(0.0, f64::max))
        .sum();
    Ok(sum / corpus.len() as f64)
}

/// Maximum number of stem matches and the fewest chunks achieving it.
fn align(cand: &[String], refr: &[String]) -> (usize, usize) {
    let max_matches = {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        for w in cand {
            counts.entry(w).or_default().0 += 1;
        }
        for w in refr {
            counts.entry(w).or_default().1 += 1;
        }
        counts.values().map(|&(a, b)| a.min(b)).sum::<usize>()
    };
    if max_matches == 0 {
        return (0, 0);
    }
    // remaining[i]: matches still possible from candidate position i onwards (upper bound)
    let mut remaining = vec![0; cand.len() + 1];
    for i in (0..cand.len()).rev() {
        remaining[i] = remaining[i + 1] + usize::from(refr.contains(&cand[i]));
    }

    struct Search<'a> {
        cand: &'a [String],
        refr: &'a [String],
        target: usize,
        remaining: Vec<usize>,
        used: Vec<bool>,
        best: usize,
    }

    impl Search<'_> {
        fn go(&mut self, i: usize, prev: Option<usize>, matches: usize, chunks: usize) {
            if chunks >= self.best || matches + self.remaining[i].min(self.target - matches) < self.target {
                return;
            }
            if matches == self.target {
                self.best = chunks;
                return;
            }
            for j in 0..self.refr.len() {
                if !self.used[j] && self.refr[j] == self.cand[i] {
                    self.used[j] = true;
                    let extends = prev.is_some_and(|p| p + 1 == j);
                    self.go(i + 1, Some(j), matches + 1, chunks + usize::from(!extends));
                    self.used[j] = false;
                }
            }
            self.go(i + 1, None, matches, chunks);
        }
    }

    let mut s = Search {
        cand,
        refr,
        target: max_matches,
        remaining,
        used: vec![false; refr.len()],
        best: usize::MAX,
    };
    s.go(0, None, 0, 0);
    (max_matches, s.best)
}

pub fn meteor_sentence(candidate: &str, reference: &str) -> f64 {
    let stems = |s: &str| tokenize(s).iter().map(|w| stem(w)).collect::<Vec<_>>();
    let (c, r) = (stems(candidate), stems(reference));
    let (m, chunks) = align(&c, &r);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// Exact and stem unigram matching with a fragmentation penalty; no synonyms.
pub fn meteor_lite(corpus: &EvalCorpus) -> Result<f64> {
    let sum: f64 = corpus
        .instances()
        .iter()
        .map(|i| i.references.iter().map(|r| meteor_sentence(&i.candidate, r)).fold(0.0, f64::max))
        .sum();
    Ok(sum / corpus.len() as f64)
}

type Grams = Vec<HashMap<Vec<String>, f64>>;

fn stem_grams(text: &str) -> Grams {
    let toks: Vec<String> = tokenize(text).iter().map(|w| stem(w)).collect();
    (1..=4)
        .map(|n| ngram_counts(&toks, n).into_iter().map(|(g, c)| (g.to_vec(), c as f64)).collect())
        .collect()
}

/// TF-IDF n-gram cosine (n = 1..4) against each reference, averaged, times 10.
/// Document frequency counts instances whose references contain the n-gram.
pub fn cider(corpus: &EvalCorpus) -> Result<f64> {
    Ok(cider_per_instance(corpus)?.iter().sum::<f64>() / corpus.len() as f64)
}

pub fn cider_per_instance(corpus: &EvalCorpus) -> Result<Vec<f64>> {
    if corpus.len() < 2 {
        return Err(Error::Input("CIDEr needs at least two instances".into()));
    }
    let cands: Vec<Grams> = corpus.instances().iter().map(|i| stem_grams(&i.candidate)).collect();
    let refs: Vec<Vec<Grams>> =
        corpus.instances().iter().map(|i| i.references.iter().map(|r| stem_grams(r)).collect()).collect();
    let mut df: HashMap<&[String], f64> = HashMap::new();
    for inst in &refs {
        let mut seen: Vec<&[String]> = inst.iter().flatten().flat_map(|m| m.keys().map(Vec::as_slice)).collect();
        seen.sort();
        seen.dedup();
        for g in seen {
            *df.entry(g).or_default() += 1.0;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    let weigh = |m: &HashMap<Vec<String>, f64>| -> (HashMap<Vec<String>, f64>, f64) {
        let v: HashMap<Vec<String>, f64> = m
            .iter()
            .map(|(g, &tf)| (g.clone(), tf * (log_n - df.get(g.as_slice()).copied().unwrap_or(0.0).max(1.0).ln())))
            .collect();
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        (v, norm)
    };
    let mut scores = Vec::with_capacity(corpus.len());
    for (cand, rs) in cands.iter().zip(&refs) {
        let mut per_n = 0.0;
        for n in 0..4 {
            let (cv, cn) = weigh(&cand[n]);
            let mut sim = 0.0;
            for r in rs {
                let (rv, rn) = weigh(&r[n]);
                if cn > 0.0 && rn > 0.0 {
                    let dot: f64 = cv.iter().map(|(g, x)| x * rv.get(g).copied().unwrap_or(0.0)).sum();
                    sim += dot / (cn * rn);
                }
            }
            per_n += sim / rs.len() as f64;
        }
        scores.push(CIDER_SCALE * per_n / 4.0);
    }
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub cider: f64,
}

pub fn evaluate(corpus: &EvalCorpus) -> Result<MetricsReport> {
    Ok(MetricsReport {
        bleu1: bleu(corpus, 1)?,
        bleu2: bleu(corpus, 2)?,
        bleu3: bleu(corpus, 3)?,
        bleu4: bleu(corpus, 4)?,
        rouge_l: rouge_l(corpus)?,
        meteor_lite: meteor_lite(corpus)?,
        cider: cider(corpus)?,
    })
}

// ---------------------------------------------------------------------------
// Preference analysis

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    Similar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub question_a: String,
    pub question_b: String,
    pub choice: Choice,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub n_similar: usize,
}

impl HistogramBin {
    pub fn total(&self) -> usize {
        self.n_a + self.n_b + self.n_similar
    }

    /// Shares of A, B and Similar; zeros for an empty bin.
    pub fn proportions(&self) -> [f64; 3] {
        let t = self.total();
        if t == 0 {
            return [0.0; 3];
        }
        [self.n_a, self.n_b, self.n_similar].map(|c| c as f64 / t as f64)
    }

    fn add(&mut self, c: Choice) {
        match c {
            Choice::A => self.n_a += 1,
            Choice::B => self.n_b += 1,
            Choice::Similar => self.n_similar += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceHistogram {
    pub bins: Vec<HistogramBin>,
    pub totals: HistogramBin,
}

/// BLEU-1 of `a` against `b` as its only reference.
pub fn pair_similarity(a: &str, b: &str) -> Result<f64> {
    let corpus = EvalCorpus::new(vec![EvalInstance { id: String::new(), candidate: a.into(), references: vec![b.into()] }])?;
    bleu(&corpus, 1)
}

/// Bins records by pair similarity into `bins` equal-width bins over `[0, 1]`.
pub fn preference_histogram(records: &[PreferenceRecord], bins: usize) -> Result<PreferenceHistogram> {
    if records.is_empty() {
        return Err(Error::Input("no preference records".into()));
    }
    if bins == 0 {
        return Err(Error::Input("need at least one bin".into()));
    }
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|k| HistogramBin { bin_low: k as f64 / bins as f64, bin_high: (k + 1) as f64 / bins as f64, ..Default::default() })
        .collect();
    let mut totals = HistogramBin { bin_low: 0.0, bin_high: 1.0, ..Default::default() };
    for r in records {
        let s = pair_similarity(&r.question_a, &r.question_b)?;
        let k = ((s * bins as f64).floor() as usize).min(bins - 1);
        out[k].add(r.choice);
        totals.add(r.choice);
    }
    Ok(PreferenceHistogram { bins: out, totals })
}

pub fn parse_preferences(reader: impl BufRead) -> Result<Vec<PreferenceRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::record(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PreferenceRecord = serde_json::from_str(&line).map_err(|e| Error::record(lineno, e.to_string()))?;
        if tokenize(&r.question_a).is_empty() || tokenize(&r.question_b).is_empty() {
            return Err(Error::record(lineno, "empty question"));
        }
        out.push(r);
    }
    Ok(out)
}
