//! Role-aware checkpoint merges ("forgetting").
//!
//! A forgetting strategy decides, for each of the six role cells
//! (encoder/middle/decoder × attention/other), whether the model used for
//! sampling keeps the *finetuned* value of a parameter or reverts to the
//! *original* pretrained one. Merging is pure selection: every output tensor
//! is bit-identical to one of its two inputs.
//!
//! | strategy      | enc attn | enc other | mid attn | mid other | dec attn | dec other |
//! |---------------|----------|-----------|----------|-----------|----------|-----------|
//! | `none`        | ft       | ft        | ft       | ft        | ft       | ft        |
//! | `encoderattn` | ft       | **orig**  | ft       | ft        | ft       | ft        |
//! | `decoderattn` | ft       | ft        | ft       | ft        | ft       | **orig**  |
//!
//! `encoderattn` keeps the newly learned encoder self/cross-attention and the
//! whole decoder; it forgets the rest of the encoder, which carries the
//! memorized spatial layout. `decoderattn` is its mirror image.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::backend::{load_checkpoint_file, LayerKind, ParameterRole, ParameterSnapshot, Region};
use crate::error::{Error, Result};

/// Which checkpoint a role cell takes its values from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Original,
    Finetuned,
}

/// A user-defined decision for every role cell.
///
/// Serialized as `{"encoder_attn": "finetuned", "encoder_other": "original", ...}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CustomRule(BTreeMap<ParameterRole, Source>);

impl CustomRule {
    pub fn new(cells: BTreeMap<ParameterRole, Source>) -> Result<Self> {
        if let Some(missing) = ParameterRole::ALL.iter().find(|r| !cells.contains_key(r)) {
            return Err(Error::contract(format!("custom rule does not cover {missing}")));
        }
        Ok(CustomRule(cells))
    }

    pub fn from_fn(mut f: impl FnMut(ParameterRole) -> Source) -> Self {
        CustomRule(ParameterRole::ALL.into_iter().map(|r| (r, f(r))).collect())
    }

    /// Parses a rule file: six cell keys mapped to `"original"` or `"finetuned"`.
    pub fn from_json(json: &str) -> Result<Self> {
        let raw: BTreeMap<String, Source> = serde_json::from_str(json)
            .map_err(|e| Error::contract(format!("bad custom rule: {e}")))?;
        let mut cells = BTreeMap::new();
        for (key, source) in raw {
            let role = ParameterRole::from_cell_key(&key)
                .ok_or_else(|| Error::contract(format!("unknown role cell {key:?}")))?;
            cells.insert(role, source);
        }
        Self::new(cells)
    }

    pub fn get(&self, role: ParameterRole) -> Source {
        self.0[&role]
    }
}

impl Serialize for CustomRule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, Source> = self.0.iter().map(|(r, src)| (r.cell_key(), *src)).collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CustomRule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        CustomRule::from_json(&value.to_string()).map_err(de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum ForgettingStrategy {
    /// Keep every finetuned value.
    #[default]
    None,
    /// For structure edits: forget encoder non-attention parameters.
    EncoderAttn,
    /// For appearance edits: forget decoder non-attention parameters.
    DecoderAttn,
    Custom(CustomRule),
}

impl ForgettingStrategy {
    /// Wire name of the strategy kind.
    pub fn name(&self) -> &'static str {
        match self {
            ForgettingStrategy::None => "none",
            ForgettingStrategy::EncoderAttn => "encoderattn",
            ForgettingStrategy::DecoderAttn => "decoderattn",
            ForgettingStrategy::Custom(_) => "custom",
        }
    }

    pub fn is_default_forgetting(&self) -> bool {
        matches!(self, ForgettingStrategy::EncoderAttn | ForgettingStrategy::DecoderAttn)
    }

    /// Parses CLI names: `none`, `encoderattn`, `decoderattn`, or
    /// `custom:<rule-file.json>` (the file is read here).
    pub fn parse_cli(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("custom:") {
            let json = std::fs::read_to_string(path)
                .map_err(|e| Error::contract(format!("cannot read rule file {path}: {e}")))?;
            return Ok(ForgettingStrategy::Custom(CustomRule::from_json(&json)?));
        }
        s.parse()
    }
}

impl FromStr for ForgettingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ForgettingStrategy::None),
            "encoderattn" => Ok(ForgettingStrategy::EncoderAttn),
            "decoderattn" => Ok(ForgettingStrategy::DecoderAttn),
            other => Err(Error::contract(format!(
                "unknown forgetting strategy {other:?} (expected none, encoderattn, decoderattn or custom:<file>)"
            ))),
        }
    }
}

impl fmt::Display for ForgettingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Built-in strategies are plain strings; custom ones are `{"custom": rule}`.
impl Serialize for ForgettingStrategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ForgettingStrategy::Custom(rule) => {
                let mut map = BTreeMap::new();
                map.insert("custom", rule);
                map.serialize(s)
            }
            other => s.serialize_str(other.name()),
        }
    }
}

impl<'de> Deserialize<'de> for ForgettingStrategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Wire {
            Name(String),
            Custom { custom: CustomRule },
        }
        match Wire::deserialize(d)? {
            Wire::Name(name) => name.parse().map_err(de::Error::custom),
            Wire::Custom { custom } => Ok(ForgettingStrategy::Custom(custom)),
        }
    }
}

/// The per-cell decision of a strategy; always total.
pub fn decision_table(strategy: &ForgettingStrategy) -> BTreeMap<ParameterRole, Source> {
    ParameterRole::ALL
        .into_iter()
        .map(|role| (role, decide(strategy, role)))
        .collect()
}

fn decide(strategy: &ForgettingStrategy, role: ParameterRole) -> Source {
    let forgotten = match strategy {
        ForgettingStrategy::None => None,
        ForgettingStrategy::EncoderAttn => Some(Region::Encoder),
        ForgettingStrategy::DecoderAttn => Some(Region::Decoder),
        ForgettingStrategy::Custom(rule) => return rule.get(role),
    };
    match forgotten {
        Some(region) if role.region == region && role.kind == LayerKind::Other => Source::Original,
        _ => Source::Finetuned,
    }
}

/// Builds the snapshot used for sampling by selecting, per parameter,
/// the original or finetuned tensor.
pub fn apply_strategy(
    original: &ParameterSnapshot,
    finetuned: &ParameterSnapshot,
    strategy: &ForgettingStrategy,
) -> Result<ParameterSnapshot> {
    original.check_compatible(finetuned)?;
    let table = decision_table(strategy);
    let mut entries = BTreeMap::new();
    for (name, tensor, role) in finetuned.iter() {
        let chosen = match table[&role] {
            Source::Finetuned => tensor,
            Source::Original => original.get(name).expect("compatible snapshots share names"),
        };
        entries.insert(name.to_owned(), chosen.clone());
    }
    ParameterSnapshot::new(entries, finetuned.roles().clone())
}

/// Merges two checkpoint files without constructing a backend.
pub fn merge_checkpoint_files(
    original: &Path,
    finetuned: &Path,
    strategy: &ForgettingStrategy,
) -> Result<ParameterSnapshot> {
    apply_strategy(&load_checkpoint_file(original)?, &load_checkpoint_file(finetuned)?, strategy)
}

/// Largest absolute elementwise difference per parameter.
pub fn diff_checkpoints(
    original: &ParameterSnapshot,
    finetuned: &ParameterSnapshot,
) -> Result<BTreeMap<String, f64>> {
    original.check_compatible(finetuned)?;
    Ok(original
        .iter()
        .map(|(name, a, _)| {
            let b = finetuned.get(name).expect("compatible snapshots share names");
            let max = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| (x as f64 - y as f64).abs())
                .fold(0.0, f64::max);
            (name.to_owned(), max)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Tensor;

    fn cell(region: Region, kind: LayerKind) -> ParameterRole {
        ParameterRole::new(region, kind)
    }

    fn pair() -> (ParameterSnapshot, ParameterSnapshot) {
        let names = [
            "encoder.0.conv.weight",
            "encoder.0.selfattn.q",
            "middle.conv.bias",
            "middle.crossattn.k",
            "decoder.0.conv.weight",
            "decoder.0.crossattn.v",
        ];
        let make = |offset: f32| {
            let entries = names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), Tensor::new(vec![2], vec![i as f32 + offset, -(i as f32) - offset]).unwrap()))
                .collect();
            ParameterSnapshot::from_named(entries).unwrap()
        };
        (make(0.0), make(0.5))
    }

    #[test]
    fn built_in_tables() {
        let enc = decision_table(&ForgettingStrategy::EncoderAttn);
        assert_eq!(enc[&cell(Region::Encoder, LayerKind::Other)], Source::Original);
        assert_eq!(enc.values().filter(|s| **s == Source::Original).count(), 1);

        let dec = decision_table(&ForgettingStrategy::DecoderAttn);
        assert_eq!(dec[&cell(Region::Decoder, LayerKind::Other)], Source::Original);
        assert_eq!(dec.values().filter(|s| **s == Source::Original).count(), 1);

        assert!(decision_table(&ForgettingStrategy::None).values().all(|s| *s == Source::Finetuned));
    }

    #[test]
    fn none_keeps_finetuned_and_self_merge_is_identity() {
        let (o, f) = pair();
        assert!(apply_strategy(&o, &f, &ForgettingStrategy::None).unwrap().bits_eq(&f));
        for s in [ForgettingStrategy::None, ForgettingStrategy::EncoderAttn, ForgettingStrategy::DecoderAttn] {
            assert!(apply_strategy(&o, &o, &s).unwrap().bits_eq(&o));
        }
    }

    #[test]
    fn merge_is_idempotent() {
        let (o, f) = pair();
        for s in [ForgettingStrategy::EncoderAttn, ForgettingStrategy::DecoderAttn] {
            let once = apply_strategy(&o, &f, &s).unwrap();
            let twice = apply_strategy(&o, &once, &s).unwrap();
            assert!(once.bits_eq(&twice));
        }
    }

    #[test]
    fn encoderattn_forgets_only_encoder_other() {
        let (o, f) = pair();
        let m = apply_strategy(&o, &f, &ForgettingStrategy::EncoderAttn).unwrap();
        let d = diff_checkpoints(&o, &m).unwrap();
        assert_eq!(d["encoder.0.conv.weight"], 0.0);
        assert_eq!(d["encoder.0.selfattn.q"], 0.5);
        assert_eq!(d["decoder.0.conv.weight"], 0.5);
    }

    #[test]
    fn incompatible_snapshots_are_rejected() {
        let (o, _) = pair();
        let other = ParameterSnapshot::from_named(
            [("encoder.0.conv.weight".to_owned(), Tensor::new(vec![1], vec![0.0]).unwrap())].into(),
        )
        .unwrap();
        assert!(matches!(apply_strategy(&o, &other, &ForgettingStrategy::None), Err(Error::Contract(_))));
        assert!(diff_checkpoints(&o, &other).is_err());
    }

    #[test]
    fn custom_rules_must_be_total() {
        let partial = r#"{"encoder_attn": "original"}"#;
        assert!(matches!(CustomRule::from_json(partial), Err(Error::Contract(_))));
        let bad_key = r#"{"encoder_attn": "original", "bogus": "finetuned"}"#;
        assert!(CustomRule::from_json(bad_key).is_err());
        let full = CustomRule::from_fn(|r| if r.region == Region::Middle { Source::Original } else { Source::Finetuned });
        let json = serde_json::to_string(&full).unwrap();
        assert_eq!(CustomRule::from_json(&json).unwrap(), full);
    }

    #[test]
    fn strategy_wire_names() {
        assert_eq!(serde_json::to_string(&ForgettingStrategy::EncoderAttn).unwrap(), r#""encoderattn""#);
        let s: ForgettingStrategy = serde_json::from_str(r#""decoderattn""#).unwrap();
        assert_eq!(s, ForgettingStrategy::DecoderAttn);
        let custom = ForgettingStrategy::Custom(CustomRule::from_fn(|_| Source::Original));
        let json = serde_json::to_string(&custom).unwrap();
        assert!(json.starts_with(r#"{"custom":{"decoder_attn":"original""#), "{json}");
        assert_eq!(serde_json::from_str::<ForgettingStrategy>(&json).unwrap(), custom);
        assert!(serde_json::from_str::<ForgettingStrategy>(r#""encoder""#).is_err());
        assert!("EncoderAttn".parse::<ForgettingStrategy>().is_err());
    }

    #[test]
    fn cli_custom_reads_rule_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rule.json");
        let rule = CustomRule::from_fn(|r| if r.kind == LayerKind::Attention { Source::Original } else { Source::Finetuned });
        std::fs::write(&path, serde_json::to_string(&rule).unwrap()).unwrap();
        let parsed = ForgettingStrategy::parse_cli(&format!("custom:{}", path.display())).unwrap();
        assert_eq!(parsed, ForgettingStrategy::Custom(rule));
        assert!(ForgettingStrategy::parse_cli("custom:/nonexistent.json").is_err());
        assert!(ForgettingStrategy::parse_cli("sideways").is_err());
    }
}
