//! Human-edited counterfactual text tables turned into [`PairedDataset`]s
//! through signed feature hashing.
//!
//! Hashing is specified byte-for-byte:
//!
//! 1. Text segments (NLI premise and hypothesis) are joined by `[SEP]`.
//! 2. Each segment is lowercased and split on every non-alphanumeric
//!    character; empty pieces are dropped. Segments are rejoined with the
//!    reserved token `[sep]`, which no word can produce.
//! 3. Unigrams are tokens; bigrams are adjacent tokens joined by one space.
//! 4. Each n-gram is hashed with 64-bit FNV-1a (offset `0xcbf29ce484222325`,
//!    prime `0x100000001b3`), first over the 8 little-endian bytes of the
//!    hash seed, then over the n-gram's UTF-8 bytes.
//! 5. Index is `hash mod dim`; the value added is `−1` when bit 63 is set,
//!    else `+1`.
//! 6. With L2 normalization, nonzero vectors are scaled to unit norm.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature_model::{BlockLayout, PairedDataset, Provenance, Role, Sample};

/// Separator placed between text segments of one record.
pub const SEGMENT_SEPARATOR: &str = "[SEP]";
/// Token emitted between segments by [`tokenize`].
pub const SEPARATOR_TOKEN: &str = "[sep]";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CadRecord {
    pub text: String,
    pub label: usize,
    pub pair_id: u64,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    L2,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashFeaturizer {
    pub dim: usize,
    /// Subset of `{1, 2}`.
    pub ngram_orders: Vec<usize>,
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for HashFeaturizer {
    fn default() -> Self {
        Self {
            dim: 256,
            ngram_orders: vec![1, 2],
            normalization: Normalization::L2,
            seed: 0,
        }
    }
}

impl HashFeaturizer {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || !self.dim.is_power_of_two() {
            return Err(Error::arg("dim", format!("must be a power of two ≥ 2, got {}", self.dim)));
        }
        if self.ngram_orders.is_empty() || self.ngram_orders.iter().any(|&n| n != 1 && n != 2) {
            return Err(Error::arg("ngram_orders", "must be a non-empty subset of {1, 2}"));
        }
        Ok(())
    }

    fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("featurizer serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// How counterfactuals are linked to their originals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pairing {
    /// Rows sharing a pair id form a group. Roles come from the role column
    /// if declared, else the first row of each pair id is the original.
    Column,
    /// Each original is immediately followed by its `k` counterfactuals.
    OrderBased { k: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CadSchema {
    /// One column (sentiment) or two (premise, hypothesis).
    pub text_columns: Vec<String>,
    pub label_column: String,
    #[serde(default)]
    pub pair_id_column: Option<String>,
    #[serde(default)]
    pub role_column: Option<String>,
    /// Label string → class id.
    pub label_table: BTreeMap<String, usize>,
    #[serde(default = "default_pairing")]
    pub pairing: Pairing,
    #[serde(default = "default_original")]
    pub original_value: String,
    #[serde(default = "default_counterfactual")]
    pub counterfactual_value: String,
}

fn default_pairing() -> Pairing {
    Pairing::Column
}
fn default_original() -> String {
    "original".into()
}
fn default_counterfactual() -> String {
    "counterfactual".into()
}

impl CadSchema {
    /// `Negative`/`Positive` sentiment with `text`, `label`, `pair_id`
    /// and `role` columns.
    pub fn sentiment() -> Self {
        Self {
            text_columns: vec!["text".into()],
            label_column: "label".into(),
            pair_id_column: Some("pair_id".into()),
            role_column: Some("role".into()),
            label_table: [("Negative".to_string(), 0), ("Positive".to_string(), 1)].into(),
            pairing: Pairing::Column,
            original_value: default_original(),
            counterfactual_value: default_counterfactual(),
        }
    }

    /// Premise/hypothesis pairs with contradiction/entailment/neutral labels.
    pub fn nli() -> Self {
        Self {
            text_columns: vec!["premise".into(), "hypothesis".into()],
            label_table: [
                ("contradiction".to_string(), 0),
                ("entailment".to_string(), 1),
                ("neutral".to_string(), 2),
            ]
            .into(),
            ..Self::sentiment()
        }
    }

    /// Class count implied by the label table.
    pub fn num_classes(&self) -> usize {
        self.label_table.values().max().map_or(0, |m| m + 1)
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Parse(format!("missing column {name:?}")))
}

pub fn parse_cad_table(path: &Path, schema: &CadSchema) -> Result<Vec<CadRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_cad_reader(f, schema)
}

/// Parses a headed TSV into validated records, in file order.
pub fn parse_cad_reader<R: Read>(reader: R, schema: &CadSchema) -> Result<Vec<CadRecord>> {
    if schema.text_columns.is_empty() {
        return Err(Error::arg("text_columns", "at least one text column is required"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let text_cols = schema
        .text_columns
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let label_col = column(&headers, &schema.label_column)?;
    let role_col = schema.role_column.as_deref().map(|c| column(&headers, c)).transpose()?;
    let pair_col = match schema.pairing {
        Pairing::Column => Some(column(
            &headers,
            schema
                .pair_id_column
                .as_deref()
                .ok_or_else(|| Error::arg("pair_id_column", "column pairing needs a pair id column"))?,
        )?),
        Pairing::OrderBased { k } => {
            if k == 0 {
                return Err(Error::arg("k", "order-based pairing needs k ≥ 1"));
            }
            None
        }
    };
    let num_classes = schema.num_classes();

    let mut records = Vec::new();
    let mut pair_keys: HashMap<String, u64> = HashMap::new();
    let mut originals: HashMap<u64, usize> = HashMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let text = text_cols.iter().map(|&i| field(i)).collect::<Vec<_>>().join(&format!(" {SEGMENT_SEPARATOR} "));
        if text_cols.iter().all(|&i| field(i).is_empty()) {
            return Err(Error::Parse(format!("line {line}: empty text")));
        }
        let label_str = field(label_col);
        let label = *schema
            .label_table
            .get(label_str)
            .ok_or_else(|| Error::Parse(format!("line {line}: unknown label {label_str:?}")))?;
        if label >= num_classes {
            return Err(Error::Parse(format!("line {line}: label id {label} out of range")));
        }
        let (pair_id, role) = match schema.pairing {
            Pairing::OrderBased { k } => {
                let role = if row % (k + 1) == 0 { Role::Original } else { Role::Counterfactual };
                ((row / (k + 1)) as u64, role)
            }
            Pairing::Column => {
                let key = field(pair_col.expect("column pairing"));
                if key.is_empty() {
                    return Err(Error::Parse(format!("line {line}: empty pair id")));
                }
                let next = pair_keys.len() as u64;
                let seen = pair_keys.contains_key(key);
                let id = *pair_keys.entry(key.to_string()).or_insert(next);
                let role = match role_col {
                    Some(c) => {
                        let v = field(c);
                        if v == schema.original_value {
                            Role::Original
                        } else if v == schema.counterfactual_value {
                            Role::Counterfactual
                        } else {
                            return Err(Error::Parse(format!("line {line}: unknown role {v:?}")));
                        }
                    }
                    None if seen => Role::Counterfactual,
                    None => Role::Original,
                };
                (id, role)
            }
        };
        if role == Role::Original && originals.insert(pair_id, records.len()).is_some() {
            return Err(Error::Parse(format!("line {line}: second original for pair {pair_id}")));
        }
        records.push(CadRecord {
            text,
            label,
            pair_id,
            role,
        });
    }
    if let Some(r) = records
        .iter()
        .find(|r| r.role == Role::Counterfactual && !originals.contains_key(&r.pair_id))
    {
        return Err(Error::Parse(format!(
            "dangling counterfactual: no original with pair_id {}",
            r.pair_id
        )));
    }
    Ok(records)
}

/// Lowercased alphanumeric tokens, segments separated by [`SEPARATOR_TOKEN`].
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for (i, segment) in text.split(SEGMENT_SEPARATOR).enumerate() {
        if i > 0 {
            tokens.push(SEPARATOR_TOKEN.to_string());
        }
        let lower = segment.to_lowercase();
        tokens.extend(
            lower
                .split(|c: char| !c.is_alphanumeric())
                .filter(|t| !t.is_empty())
                .map(str::to_string),
        );
    }
    tokens
}

pub fn fnv1a_salted(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub fn hash_featurize(text: &str, f: &HashFeaturizer) -> Result<Vec<f64>> {
    f.validate()?;
    let tokens = tokenize(text);
    let mut v = vec![0.0; f.dim];
    let mask = (f.dim - 1) as u64;
    let mut add = |gram: &str| {
        let h = fnv1a_salted(f.seed, gram.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h & mask) as usize] += sign;
    };
    if f.ngram_orders.contains(&1) {
        tokens.iter().for_each(|t| add(t));
    }
    if f.ngram_orders.contains(&2) {
        for w in tokens.windows(2) {
            add(&format!("{} {}", w[0], w[1]));
        }
    }
    if f.normalization == Normalization::L2 {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(v)
}

/// Single pseudo-block layout (`dim_r1 = dim`), samples in record order.
pub fn build_text_dataset(records: &[CadRecord], featurizer: &HashFeaturizer, num_classes: usize) -> Result<PairedDataset> {
    featurizer.validate()?;
    if records.is_empty() {
        return Err(Error::arg("records", "no records"));
    }
    let originals: HashMap<u64, usize> = records
        .iter()
        .filter(|r| r.role == Role::Original)
        .map(|r| (r.pair_id, r.label))
        .collect();
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        if r.text.trim().is_empty() {
            return Err(Error::arg("records", format!("pair {} has empty text", r.pair_id)));
        }
        let source_label = match r.role {
            Role::Original => r.label,
            Role::Counterfactual => {
                let orig = *originals.get(&r.pair_id).ok_or_else(|| {
                    Error::arg("records", format!("dangling counterfactual: no original with pair_id {}", r.pair_id))
                })?;
                if orig == r.label {
                    return Err(Error::arg(
                        "records",
                        format!("inconsistent pair labels: pair {} counterfactual shares label {orig}", r.pair_id),
                    ));
                }
                orig
            }
        };
        samples.push(Sample {
            x: hash_featurize(&r.text, featurizer)?,
            label: r.label,
            role: r.role,
            pair_id: r.pair_id,
            source_label,
        });
    }
    PairedDataset::new(
        BlockLayout::single(featurizer.dim)?,
        num_classes,
        samples,
        None,
        Provenance {
            spec_hash: format!("hash:{}", featurizer.fingerprint()),
            seed: featurizer.seed,
            mode: "text".into(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unigram(dim: usize, normalization: Normalization) -> HashFeaturizer {
        HashFeaturizer {
            dim,
            ngram_orders: vec![1],
            normalization,
            seed: 0,
        }
    }

    #[test]
    fn fnv_reference_values() {
        // unsalted FNV-1a 64 of "a" and "" for reference, salt of 8 zero bytes applied here
        let unsalted = |bytes: &[u8]| {
            bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
        };
        assert_eq!(unsalted(b""), 0xcbf29ce484222325);
        assert_eq!(unsalted(b"a"), 0xaf63dc4c8601ec8c);
        let mut salted = vec![0u8; 8];
        salted.extend_from_slice(b"a");
        assert_eq!(fnv1a_salted(0, b"a"), unsalted(&salted));
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Don't STOP-now!"), vec!["don", "t", "stop", "now"]);
        assert_eq!(tokenize("A man [SEP] a sep"), vec!["a", "man", "[sep]", "a", "sep"]);
        assert!(tokenize("  ...").is_empty());
    }

    #[test]
    fn featurize_basics() {
        let f = unigram(64, Normalization::None);
        let a = hash_featurize("good movie", &f).unwrap();
        assert_eq!(a, hash_featurize("good movie", &f).unwrap());
        assert_ne!(a, hash_featurize("bad movie", &f).unwrap());
        assert_eq!(hash_featurize("", &f).unwrap(), vec![0.0; 64]);
        let l2 = hash_featurize("a fine, fine film", &unigram(64, Normalization::L2)).unwrap();
        let n: f64 = l2.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-12);
        assert!(HashFeaturizer { dim: 12, ..f.clone() }.validate().is_err());
        assert!(HashFeaturizer { ngram_orders: vec![3], ..f }.validate().is_err());
    }

    #[test]
    fn two_row_fixture() {
        let tsv = "pair_id\trole\tlabel\ttext\np1\toriginal\tPositive\tgreat film\np1\tcounterfactual\tNegative\tawful film\n";
        let recs = parse_cad_reader(tsv.as_bytes(), &CadSchema::sentiment()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].pair_id, recs[1].pair_id);
        let ds = build_text_dataset(&recs, &HashFeaturizer { dim: 8, ..HashFeaturizer::default() }, 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.groups().len(), 1);
        assert_eq!(ds.groups()[0].counterfactuals, vec![1]);
    }

    #[test]
    fn parse_errors() {
        let s = CadSchema::sentiment();
        let mixed = "pair_id\trole\tlabel\ttext\n1\toriginal\tMixed\tmeh\n";
        assert!(parse_cad_reader(mixed.as_bytes(), &s).unwrap_err().to_string().contains("unknown label"));
        let missing = "pair_id\tlabel\ttext\n1\tPositive\tok\n";
        assert!(parse_cad_reader(missing.as_bytes(), &s).unwrap_err().to_string().contains("missing column"));
        let dangling = "pair_id\trole\tlabel\ttext\n1\tcounterfactual\tPositive\tok\n";
        assert!(parse_cad_reader(dangling.as_bytes(), &s).unwrap_err().to_string().contains("dangling"));
    }

    #[test]
    fn first_occurrence_and_order_pairing() {
        let mut s = CadSchema::sentiment();
        s.role_column = None;
        let tsv = "pair_id\tlabel\ttext\nx\tPositive\tnice\ny\tNegative\tbad\nx\tNegative\tnasty\n";
        let recs = parse_cad_reader(tsv.as_bytes(), &s).unwrap();
        assert_eq!(recs.iter().map(|r| r.role).collect::<Vec<_>>(), vec![Role::Original, Role::Original, Role::Counterfactual]);
        assert_eq!(recs[2].pair_id, recs[0].pair_id);

        let mut nli = CadSchema::nli();
        nli.pair_id_column = None;
        nli.role_column = None;
        nli.pairing = Pairing::OrderBased { k: 4 };
        let mut tsv = String::from("premise\thypothesis\tlabel\n");
        for (i, l) in ["entailment", "contradiction", "neutral", "contradiction", "neutral"].iter().enumerate() {
            tsv.push_str(&format!("a dog runs {i}\tan animal moves\t{l}\n"));
        }
        let recs = parse_cad_reader(tsv.as_bytes(), &nli).unwrap();
        assert!(recs[0].text.contains(SEGMENT_SEPARATOR));
        let ds = build_text_dataset(&recs, &HashFeaturizer::default(), 3).unwrap();
        assert_eq!(ds.groups()[0].len(), 5);
    }

    #[test]
    fn shared_label_rejected() {
        let tsv = "pair_id\trole\tlabel\ttext\n1\toriginal\tPositive\tgood\n1\tcounterfactual\tPositive\tfine\n";
        let recs = parse_cad_reader(tsv.as_bytes(), &CadSchema::sentiment()).unwrap();
        let err = build_text_dataset(&recs, &HashFeaturizer::default(), 2).unwrap_err();
        assert!(err.to_string().contains("inconsistent pair labels"));
    }
}
