//! Condition embeddings: storage and file formats, caption templates, the
//! image/text similarity filter, and a deterministic synthetic encoder that
//! maps landmark histograms into a shared text/image space.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::{class_coverage, Camera, GaussianScene, RenderSettings};

pub const PROMPT_PREFIX: &str = "A view of ";
pub const MAX_NOUNS: usize = 10;
pub const BACKGROUND_CLASS: &str = "background";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            _ => Err(Error::data(format!("unknown modality '{s}'"))),
        }
    }
}

/// Which caption (or the image) an embedding came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Nouns,
    Short,
    Mid,
    Long,
    Image,
}

impl Granularity {
    pub const TEXT: [Granularity; 4] = [
        Granularity::Nouns,
        Granularity::Short,
        Granularity::Mid,
        Granularity::Long,
    ];

    pub fn level(self) -> Level {
        match self {
            Granularity::Nouns => Level::Low,
            Granularity::Short | Granularity::Mid | Granularity::Long => Level::High,
            Granularity::Image => Level::Max,
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            Granularity::Image => Modality::Image,
            _ => Modality::Text,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Nouns => "nouns",
            Granularity::Short => "short",
            Granularity::Mid => "mid",
            Granularity::Long => "long",
            Granularity::Image => "image",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Granularity::Nouns,
            Granularity::Short,
            Granularity::Mid,
            Granularity::Long,
            Granularity::Image,
        ]
        .into_iter()
        .find(|g| g.as_str() == s)
        .ok_or_else(|| Error::config(format!("unknown granularity '{s}'")))
    }
}

/// Reporting level: noun lists are Low, sentences High, image embeddings
/// Max.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Low,
    High,
    Max,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Low => "Low",
            Level::High => "High",
            Level::Max => "Max",
        }
    }
}

/// Unit-norm condition vector with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEmbedding {
    pub vector: Vec<f64>,
    pub modality: Modality,
    pub granularity: Granularity,
}

impl ConditionEmbedding {
    /// Normalizes `vector`; rejects empty, zero or non-finite input.
    pub fn new(vector: Vec<f64>, granularity: Granularity) -> Result<Self> {
        Ok(ConditionEmbedding {
            vector: normalized(vector)?,
            modality: granularity.modality(),
            granularity,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

impl AsRef<[f64]> for ConditionEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.vector
    }
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::data("embedding has non-finite components"));
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return Err(Error::EmptyContent);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Dot product of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: impl AsRef<[f64]>, b: impl AsRef<[f64]>) -> f64 {
    let (a, b) = (a.as_ref(), b.as_ref());
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}

/// Indices of `(image, text)` pairs whose similarity reaches `threshold`.
pub fn filter_captions<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    pairs: &[(A, B)],
    threshold: f64,
) -> Vec<usize> {
    pairs
        .iter()
        .enumerate()
        .filter(|(_, (i, t))| cosine_similarity(i, t) >= threshold)
        .map(|(k, _)| k)
        .collect()
}

pub fn format_noun_prompt(nouns: &[String]) -> Result<String> {
    if nouns.is_empty() {
        return Err(Error::data("noun prompt needs at least one noun"));
    }
    Ok(format!("{PROMPT_PREFIX}{}", nouns.join(", ")))
}

pub fn parse_noun_prompt(prompt: &str) -> Result<Vec<String>> {
    let body = prompt
        .strip_prefix(PROMPT_PREFIX)
        .ok_or_else(|| Error::data(format!("prompt does not start with '{PROMPT_PREFIX}'")))?;
    let nouns: Vec<String> = body.split(", ").map(str::to_string).collect();
    if nouns.iter().any(|n| n.is_empty()) {
        return Err(Error::data("empty noun in prompt"));
    }
    Ok(nouns)
}

/// Captions for one record, from terse to detailed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub id: String,
    pub nouns: Vec<String>,
    pub short: String,
    pub mid: String,
    pub long: String,
}

impl CaptionSet {
    pub fn validate(&self) -> Result<()> {
        if self.nouns.len() > MAX_NOUNS {
            return Err(Error::data(format!(
                "record {}: {} nouns (at most {MAX_NOUNS})",
                self.id,
                self.nouns.len()
            )));
        }
        Ok(())
    }

    /// Text for one granularity; the noun level uses the prompt template.
    pub fn text(&self, g: Granularity) -> Result<String> {
        match g {
            Granularity::Nouns => format_noun_prompt(&self.nouns),
            Granularity::Short => Ok(self.short.clone()),
            Granularity::Mid => Ok(self.mid.clone()),
            Granularity::Long => Ok(self.long.clone()),
            Granularity::Image => Err(Error::config("captions have no image granularity")),
        }
    }
}

const NUMBER_WORDS: [&str; 10] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

fn count_word(n: usize) -> String {
    NUMBER_WORDS
        .get(n.wrapping_sub(1))
        .map_or_else(|| n.to_string(), |w| w.to_string())
}

fn quantity(token: &str) -> Option<f64> {
    if token == "a" || token == "an" {
        return Some(1.0);
    }
    if let Some(i) = NUMBER_WORDS.iter().position(|w| *w == token) {
        return Some(i as f64 + 1.0);
    }
    token.parse::<u32>().ok().map(f64::from)
}

fn plural(name: &str, n: usize) -> String {
    if n == 1 {
        name.to_string()
    } else if name.ends_with('s') || name.ends_with("ch") || name.ends_with("sh") {
        format!("{name}es")
    } else {
        format!("{name}s")
    }
}

/// Quantization levels used by the short, mid and long sentences.
fn levels(g: Granularity) -> usize {
    match g {
        Granularity::Short => 2,
        Granularity::Mid => 4,
        _ => 7,
    }
}

fn sentence(counts: &[(String, u32)], g: Granularity) -> String {
    let top = counts.iter().map(|(_, c)| *c).max().unwrap_or(1).max(1) as f64;
    let l = levels(g) as f64;
    let parts: Vec<String> = counts
        .iter()
        .map(|(name, c)| {
            let q = ((l * *c as f64 / top).ceil() as usize).clamp(1, levels(g));
            format!("{} {}", count_word(q), plural(name, q))
        })
        .collect();
    let list = match parts.as_slice() {
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
        [] => unreachable!(),
    };
    format!("{PROMPT_PREFIX}{list}.")
}

/// Template captions from per-class visibility counts. Classes are listed
/// by decreasing count; the noun list keeps at most ten.
pub fn captions_from_counts(
    id: &str,
    class_names: &[String],
    counts: &[u32],
) -> Result<CaptionSet> {
    let mut visible: Vec<(String, u32)> = class_names
        .iter()
        .zip(counts)
        .filter(|(_, c)| **c > 0)
        .map(|(n, c)| (n.clone(), *c))
        .collect();
    if visible.is_empty() {
        return Err(Error::EmptyContent);
    }
    visible.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(CaptionSet {
        id: id.to_string(),
        nouns: visible
            .iter()
            .take(MAX_NOUNS)
            .map(|(n, _)| n.clone())
            .collect(),
        short: sentence(&visible, Granularity::Short),
        mid: sentence(&visible, Granularity::Mid),
        long: sentence(&visible, Granularity::Long),
    })
}

/// Class names with a fixed random orthonormal direction each.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVocabulary {
    pub classes: Vec<String>,
    pub dim: usize,
    pub seed: u64,
    columns: Vec<Vec<f64>>,
}

impl SyntheticVocabulary {
    pub fn new(classes: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::config("vocabulary needs at least one class"));
        }
        if dim < classes.len() {
            return Err(Error::config(format!(
                "embedding dimension {dim} is smaller than the class count {}",
                classes.len()
            )));
        }
        let mut sorted = classes.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("duplicate class name in vocabulary"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(classes.len());
        while columns.len() < classes.len() {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            // two passes of Gram-Schmidt keep the basis orthogonal to ~1 ulp
            for _ in 0..2 {
                for c in &columns {
                    let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                columns.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        Ok(SyntheticVocabulary {
            classes,
            dim,
            seed,
            columns,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn column(&self, class: usize) -> &[f64] {
        &self.columns[class]
    }
}

/// `normalize(P sqrt(h))` for a non-negative class histogram `h`.
pub fn synthetic_encode(histogram: &[f64], vocab: &SyntheticVocabulary) -> Result<Vec<f64>> {
    if histogram.len() != vocab.len() {
        return Err(Error::config(format!(
            "histogram has {} bins, vocabulary has {} classes",
            histogram.len(),
            vocab.len()
        )));
    }
    if histogram.iter().any(|h| !(*h >= 0.0 && h.is_finite())) {
        return Err(Error::data(
            "histogram entries must be finite and non-negative",
        ));
    }
    let mut out = vec![0.0; vocab.dim];
    for (c, h) in histogram.iter().enumerate() {
        if *h > 0.0 {
            let w = h.sqrt();
            out.iter_mut()
                .zip(vocab.column(c))
                .for_each(|(o, p)| *o += w * p);
        }
    }
    normalized(out)
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Class counts mentioned in `text`. A class noun (singular or plural)
/// counts the quantity word right before it, or 1 without one.
pub fn text_histogram(text: &str, vocab: &SyntheticVocabulary) -> Vec<f64> {
    let toks = tokens(text);
    let names: Vec<Vec<String>> = vocab.classes.iter().map(|c| tokens(c)).collect();
    let mut hist = vec![0.0; vocab.len()];
    let mut i = 0;
    while i < toks.len() {
        let hit = names.iter().enumerate().find_map(|(c, name)| {
            let n = name.len();
            if n == 0 || i + n > toks.len() {
                return None;
            }
            let head_ok = toks[i..i + n - 1] == name[..n - 1];
            let last = &toks[i + n - 1];
            let stem = &name[n - 1];
            let tail_ok = last == stem || *last == plural(stem, 2);
            (head_ok && tail_ok).then_some((c, n))
        });
        match hit {
            Some((c, n)) => {
                let q = i
                    .checked_sub(1)
                    .and_then(|j| quantity(&toks[j]))
                    .unwrap_or(1.0);
                hist[c] += q;
                i += n;
            }
            None => i += 1,
        }
    }
    hist
}

/// Synthetic text encoder: parse class mentions, then [`synthetic_encode`].
pub fn encode_text(
    text: &str,
    vocab: &SyntheticVocabulary,
    g: Granularity,
) -> Result<ConditionEmbedding> {
    let v = synthetic_encode(&text_histogram(text, vocab), vocab)?;
    Ok(ConditionEmbedding {
        vector: v,
        modality: Modality::Text,
        granularity: g,
    })
}

/// Maps a rendered view to an embedding.
pub trait ViewEncoder: Sync {
    fn dim(&self) -> usize;
    fn encode_view(&self, scene: &GaussianScene, cam: &Camera) -> Result<Vec<f64>>;
}

/// Image encoder for synthetic scenes: the histogram is each class's share
/// of the image (summed blend weights) plus a down-weighted background bin.
/// Pixels are weighted towards the image centre so that framing a landmark
/// raises its share smoothly.
#[derive(Clone, Debug)]
pub struct CoverageEncoder {
    pub vocab: SyntheticVocabulary,
    pub background_weight: f64,
    /// Width of the centre weighting relative to the shorter half-side;
    /// `None` weights all pixels equally.
    pub fovea: Option<f64>,
    pub settings: RenderSettings,
}

impl CoverageEncoder {
    pub const DEFAULT_BACKGROUND_WEIGHT: f64 = 0.25;
    pub const DEFAULT_FOVEA: f64 = 0.6;

    pub fn new(vocab: SyntheticVocabulary) -> Self {
        CoverageEncoder {
            vocab,
            background_weight: Self::DEFAULT_BACKGROUND_WEIGHT,
            fovea: Some(Self::DEFAULT_FOVEA),
            settings: RenderSettings::default(),
        }
    }

    /// Vocabulary for a scene's classes plus the background bin.
    pub fn vocabulary_for(
        scene_classes: &[String],
        dim: usize,
        seed: u64,
    ) -> Result<SyntheticVocabulary> {
        let mut names = scene_classes.to_vec();
        names.push(BACKGROUND_CLASS.to_string());
        SyntheticVocabulary::new(names, dim, seed)
    }

    pub fn histogram(&self, scene: &GaussianScene, cam: &Camera) -> Result<Vec<f64>> {
        let (_, cov) = class_coverage(scene, cam, &self.settings, self.fovea)?;
        let mut hist = vec![0.0; self.vocab.len()];
        for (c, share) in cov.per_class.iter().enumerate() {
            if *share <= 0.0 {
                continue;
            }
            let slot = match scene.class_names.get(c) {
                Some(name) => self.vocab.class_index(name),
                None => (c < self.vocab.len()).then_some(c),
            }
            .ok_or_else(|| Error::data(format!("scene class {c} is not in the vocabulary")))?;
            hist[slot] += share;
        }
        if let Some(bg) = self.vocab.class_index(BACKGROUND_CLASS) {
            hist[bg] += self.background_weight * cov.background;
        }
        Ok(hist)
    }
}

impl ViewEncoder for CoverageEncoder {
    fn dim(&self) -> usize {
        self.vocab.dim
    }

    fn encode_view(&self, scene: &GaussianScene, cam: &Camera) -> Result<Vec<f64>> {
        synthetic_encode(&self.histogram(scene, cam)?, &self.vocab)
    }
}

/// Rows of an embedding file, already unit-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub modality: Modality,
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    /// Record ids from the `.ids` sidecar, when present.
    pub ids: Option<Vec<String>>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn conditions(&self, g: Granularity) -> Vec<ConditionEmbedding> {
        self.vectors
            .iter()
            .map(|v| ConditionEmbedding {
                vector: v.clone(),
                modality: self.modality,
                granularity: g,
            })
            .collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.as_ref()?.iter().position(|i| i == id)
    }
}

/// Path of the id sidecar for an embedding file.
pub fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

/// Reads `EMB v1 <count> <dim> <modality>` followed by little-endian f32
/// rows, plus the optional `.ids` sidecar.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| parse_err("missing header line".into()))?;
    let header =
        std::str::from_utf8(&bytes[..nl]).map_err(|_| parse_err("header is not UTF-8".into()))?;
    let tok: Vec<&str> = header.split_whitespace().collect();
    let (count, dim, modality) = match tok.as_slice() {
        ["EMB", "v1", c, d, m] => (
            c.parse::<usize>()
                .map_err(|_| parse_err(format!("bad count '{c}'")))?,
            d.parse::<usize>()
                .map_err(|_| parse_err(format!("bad dimension '{d}'")))?,
            Modality::parse(m).map_err(|e| parse_err(e.to_string()))?,
        ),
        _ => {
            return Err(parse_err(format!(
                "expected 'EMB v1 <count> <dim> <modality>', got '{header}'"
            )))
        }
    };
    if dim == 0 {
        return Err(parse_err("dimension must be positive".into()));
    }
    let body = &bytes[nl + 1..];
    let row_bytes = 4 * dim;
    if body.len() % row_bytes != 0 || body.len() / row_bytes != count {
        let row = body.len() / row_bytes;
        return Err(Error::data(format!(
            "{}: row {row} does not hold {dim} values ({} bytes for {count} rows)",
            path.display(),
            body.len()
        )));
    }
    let mut vectors = Vec::with_capacity(count);
    for (r, chunk) in body.chunks_exact(row_bytes).enumerate() {
        let v: Vec<f64> = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let v =
            normalized(v).map_err(|e| Error::data(format!("{}: row {r}: {e}", path.display())))?;
        vectors.push(v);
    }
    let sidecar = ids_path(path);
    let ids = if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let ids: Vec<String> = text.lines().map(str::to_string).collect();
        if ids.len() != count {
            return Err(Error::data(format!(
                "{}: {} ids for {count} rows",
                sidecar.display(),
                ids.len()
            )));
        }
        Some(ids)
    } else {
        None
    };
    Ok(EmbeddingTable {
        modality,
        dim,
        vectors,
        ids,
    })
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let mut out = format!(
        "EMB v1 {} {} {}\n",
        table.vectors.len(),
        table.dim,
        table.modality.as_str()
    )
    .into_bytes();
    for (r, v) in table.vectors.iter().enumerate() {
        if v.len() != table.dim {
            return Err(Error::data(format!(
                "row {r} has dimension {}, expected {}",
                v.len(),
                table.dim
            )));
        }
        for x in v {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    if let Some(ids) = &table.ids {
        let sidecar = ids_path(path);
        let mut text = ids.join("\n");
        text.push('\n');
        std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(())
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionSet>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: CaptionSet = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        c.validate()?;
        out.push(c);
    }
    Ok(out)
}

pub fn write_captions(path: &Path, captions: &[CaptionSet]) -> Result<()> {
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for c in captions {
        let line = serde_json::to_string(c).map_err(|e| Error::data(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
