//! Named parameter storage, trainable-subset selection, checkpointing, and
//! weight-change measurement.
//!
//! Checkpoints are JSON with full `f64` round-tripping, so save/load is
//! bit-exact and reruns from a checkpoint are reproducible.

use crate::tensor::Tensor;
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Role of a parameter tensor; selection of the fine-tuned subset keys off
/// this instead of name patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Cross-attention query projection.
    AttnQ,
    /// Cross-attention key projection.
    AttnK,
    /// Cross-attention value projection.
    AttnV,
    /// Any other denoiser weight.
    Backbone,
    /// Text-encoder weight (including the token embedding table).
    TextEncoder,
}

impl ParamKind {
    /// Stable lowercase label, used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            ParamKind::AttnQ => "attn_q",
            ParamKind::AttnK => "attn_k",
            ParamKind::AttnV => "attn_v",
            ParamKind::Backbone => "backbone",
            ParamKind::TextEncoder => "text_encoder",
        }
    }
}

/// Which cross-attention projections to fine-tune.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSelector {
    /// Key and value projections. The default: keys and values carry the
    /// text conditioning, and queries can stay frozen.
    #[default]
    Kv,
    /// Query and value projections.
    Qv,
    /// Query, key, and value projections.
    Qkv,
    /// Every denoiser weight, attention or not.
    All,
}

/// Full description of the trainable subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableSelection {
    pub selector: ParamSelector,
    pub include_text_encoder: bool,
}

impl Default for TrainableSelection {
    fn default() -> Self {
        TrainableSelection { selector: ParamSelector::Kv, include_text_encoder: true }
    }
}

impl TrainableSelection {
    pub fn matches(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::TextEncoder => self.include_text_encoder,
            ParamKind::AttnQ => {
                matches!(self.selector, ParamSelector::Qv | ParamSelector::Qkv | ParamSelector::All)
            }
            ParamKind::AttnK => {
                matches!(self.selector, ParamSelector::Kv | ParamSelector::Qkv | ParamSelector::All)
            }
            ParamKind::AttnV => true,
            ParamKind::Backbone => matches!(self.selector, ParamSelector::All),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub kind: ParamKind,
    pub data: ArrayD<f64>,
}

/// Ordered name -> tensor map. Iteration order is the lexicographic name
/// order, which keeps optimizer traversal and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    kind: ParamKind,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredCheckpoint {
    format: String,
    params: BTreeMap<String, StoredParam>,
}

const CHECKPOINT_FORMAT: &str = "attnguide-params-v1";

/// Frobenius-norm relative change of one parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightChange {
    pub name: String,
    pub kind: ParamKind,
    pub rate: f64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, data: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), ParamEntry { kind, data }).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }

    /// Bind every parameter into the autodiff graph: leaves for the selected
    /// subset, constants for the rest. Rebuilt once per training step.
    pub fn bind(&self, selection: &TrainableSelection) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(name, entry)| {
                let t = if selection.matches(entry.kind) {
                    Tensor::leaf(entry.data.clone())
                } else {
                    Tensor::constant(entry.data.clone())
                };
                (name.clone(), t)
            })
            .collect()
    }

    /// Bind everything as constants; used for sampling and evaluation
    /// passes where no gradients are wanted.
    pub fn bind_frozen(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(name, entry)| (name.clone(), Tensor::constant(entry.data.clone())))
            .collect()
    }

    pub fn trainable_names(&self, selection: &TrainableSelection) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| selection.matches(e.kind))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let stored = StoredCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            params: self
                .entries
                .iter()
                .map(|(name, e)| {
                    (
                        name.clone(),
                        StoredParam {
                            kind: e.kind,
                            shape: e.data.shape().to_vec(),
                            values: e.data.iter().cloned().collect(),
                        },
                    )
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&stored)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let stored: StoredCheckpoint = serde_json::from_str(&text)?;
        if stored.format != CHECKPOINT_FORMAT {
            return Err(Error::validation(format!(
                "unsupported checkpoint format {:?}",
                stored.format
            )));
        }
        let mut store = ParamStore::new();
        for (name, p) in stored.params {
            let len: usize = p.shape.iter().product();
            if p.values.len() != len {
                return Err(Error::validation(format!(
                    "parameter {name}: {} values for shape {:?}",
                    p.values.len(),
                    p.shape
                )));
            }
            let data = ArrayD::from_shape_vec(IxDyn(&p.shape), p.values)
                .map_err(|e| Error::validation(format!("parameter {name}: {e}")))?;
            store.insert(name, p.kind, data);
        }
        Ok(store)
    }

    /// Per-parameter relative change `|theta' - theta|_F / |theta|_F`
    /// against a baseline store. The stores must describe the same model;
    /// a zero-norm baseline tensor has no meaningful relative change and is
    /// reported as an error.
    pub fn weight_change_vs(&self, baseline: &ParamStore) -> Result<Vec<WeightChange>> {
        self.weight_change_filtered(baseline, |_| true)
    }

    /// Weight change restricted to parameters of the given kinds. Used for
    /// reports over the attention projections, where zero-initialized biases
    /// elsewhere in the model would otherwise poison the computation.
    pub fn weight_change_by_kind(
        &self,
        baseline: &ParamStore,
        kinds: &[ParamKind],
    ) -> Result<Vec<WeightChange>> {
        self.weight_change_filtered(baseline, |k| kinds.contains(&k))
    }

    fn weight_change_filtered(
        &self,
        baseline: &ParamStore,
        keep: impl Fn(ParamKind) -> bool,
    ) -> Result<Vec<WeightChange>> {
        if self.entries.len() != baseline.entries.len()
            || !self.entries.keys().eq(baseline.entries.keys())
        {
            return Err(Error::validation("parameter stores have different layouts"));
        }
        let mut out = Vec::with_capacity(self.entries.len());
        for ((name, cur), (_, base)) in self.entries.iter().zip(baseline.entries.iter()) {
            if !keep(cur.kind) {
                continue;
            }
            if cur.data.shape() != base.data.shape() {
                return Err(Error::validation(format!("parameter {name}: shape changed")));
            }
            let base_norm = base.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            if base_norm == 0.0 {
                return Err(Error::validation(format!(
                    "parameter {name}: zero baseline norm, relative change undefined"
                )));
            }
            let diff_norm = cur
                .data
                .iter()
                .zip(base.data.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            out.push(WeightChange { name: name.clone(), kind: cur.kind, rate: diff_norm / base_norm });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn arr(vals: &[f64]) -> ArrayD<f64> {
        arr1(vals).into_dyn()
    }

    #[test]
    fn selector_table() {
        use ParamKind::*;
        use ParamSelector::*;
        let cases = [
            (Kv, AttnQ, false),
            (Kv, AttnK, true),
            (Kv, AttnV, true),
            (Kv, Backbone, false),
            (Qv, AttnQ, true),
            (Qv, AttnK, false),
            (Qv, AttnV, true),
            (Qkv, AttnQ, true),
            (Qkv, AttnK, true),
            (Qkv, AttnV, true),
            (Qkv, Backbone, false),
            (All, Backbone, true),
            (All, AttnQ, true),
        ];
        for (sel, kind, expect) in cases {
            let s = TrainableSelection { selector: sel, include_text_encoder: true };
            assert_eq!(s.matches(kind), expect, "{sel:?} / {kind:?}");
        }
        let no_text = TrainableSelection { selector: Kv, include_text_encoder: false };
        assert!(!no_text.matches(TextEncoder));
        let with_text = TrainableSelection { selector: Kv, include_text_encoder: true };
        assert!(with_text.matches(TextEncoder));
    }

    #[test]
    fn default_selection_is_kv_with_text() {
        let d = TrainableSelection::default();
        assert_eq!(d.selector, ParamSelector::Kv);
        assert!(d.include_text_encoder);
    }

    #[test]
    fn weight_change_hand_values() {
        let mut base = ParamStore::new();
        base.insert("a", ParamKind::AttnK, arr(&[1.0, 0.0]));
        base.insert("b", ParamKind::AttnV, arr(&[3.0, 4.0]));
        let mut cur = ParamStore::new();
        cur.insert("a", ParamKind::AttnK, arr(&[0.0, 1.0]));
        cur.insert("b", ParamKind::AttnV, arr(&[6.0, 8.0]));
        let changes = cur.weight_change_vs(&base).unwrap();
        assert!((changes[0].rate - 2f64.sqrt()).abs() < 1e-15);
        assert!((changes[1].rate - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weight_change_zero_for_identical_and_errs_on_zero_norm() {
        let mut base = ParamStore::new();
        base.insert("a", ParamKind::Backbone, arr(&[0.5, -0.5]));
        let changes = base.weight_change_vs(&base.clone()).unwrap();
        assert_eq!(changes[0].rate, 0.0);

        let mut zero = ParamStore::new();
        zero.insert("a", ParamKind::Backbone, arr(&[0.0, 0.0]));
        assert!(matches!(base.weight_change_vs(&zero), Err(Error::Validation(_))));
    }

    #[test]
    fn kind_filter_skips_other_parameters() {
        let mut base = ParamStore::new();
        base.insert("bias", ParamKind::Backbone, arr(&[0.0, 0.0]));
        base.insert("wk", ParamKind::AttnK, arr(&[1.0, 0.0]));
        let mut cur = base.clone();
        cur.get_mut("wk").unwrap().data = arr(&[0.0, 1.0]);
        // full-store computation hits the zero-norm bias; the filtered one
        // only sees the projection
        assert!(cur.weight_change_vs(&base).is_err());
        let changes = cur.weight_change_by_kind(&base, &[ParamKind::AttnK]).unwrap();
        assert_eq!(changes.len(), 1);
        assert!((changes[0].rate - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn mismatched_layouts_are_rejected() {
        let mut a = ParamStore::new();
        a.insert("x", ParamKind::Backbone, arr(&[1.0]));
        let mut b = ParamStore::new();
        b.insert("y", ParamKind::Backbone, arr(&[1.0]));
        assert!(a.weight_change_vs(&b).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.insert(
            "tricky",
            ParamKind::AttnV,
            arr(&[
                0.1 + 0.2,
                1e-300,
                -0.0,
                f64::MIN_POSITIVE,
                1.0 / 3.0,
                123_456_789.123_456_79,
            ]),
        );
        store.insert("plain", ParamKind::TextEncoder, arr(&[1.0, 2.0]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        store.save_json(&path).unwrap();
        let loaded = ParamStore::load_json(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (name, entry) in store.iter() {
            let other = &loaded.get(name).unwrap().data;
            assert_eq!(entry.data.shape(), other.shape());
            for (a, b) in entry.data.iter().zip(other.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "bit mismatch in {name}");
            }
            assert_eq!(entry.kind, loaded.get(name).unwrap().kind);
        }
    }

    #[test]
    fn corrupt_checkpoint_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"format":"attnguide-params-v1","params":{"a":{"kind":"attn_q","shape":[3],"values":[1.0]}}}"#).unwrap();
        assert!(matches!(ParamStore::load_json(&path), Err(Error::Validation(_))));
        std::fs::write(&path, r#"{"format":"other","params":{}}"#).unwrap();
        assert!(matches!(ParamStore::load_json(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn bind_splits_leaves_and_constants() {
        let mut store = ParamStore::new();
        store.insert("k", ParamKind::AttnK, arr(&[1.0]));
        store.insert("q", ParamKind::AttnQ, arr(&[1.0]));
        store.insert("body", ParamKind::Backbone, arr(&[1.0]));
        let bound = store.bind(&TrainableSelection::default());
        assert!(bound["k"].requires_grad());
        assert!(!bound["q"].requires_grad());
        assert!(!bound["body"].requires_grad());
        assert_eq!(store.trainable_names(&TrainableSelection::default()), vec!["k"]);
    }
}
