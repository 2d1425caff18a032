//! Prompt trigger: maps a text instruction to the watermark to inject.
//!
//! A deterministic token-hash bag-of-words embedder stands in for a
//! pretrained text encoder (the backend is a single function, so a
//! drop-in replacement only has to produce fixed-dimension vectors). A
//! linear trigger layer (identity-initialized, optionally fine-tuned
//! with cross-entropy over softmax scores) maps prompt embeddings into
//! the registry embedding space; selection is the argmax of dot
//! products, with the `[U]` token overriding to a user-supplied
//! watermark. Registries are immutable values: registration returns a
//! new registry.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::WatermarkImage;
use crate::nn::Linear;
use crate::rng::SeedRng;

/// Token marking a user-supplied watermark override.
pub const USER_TOKEN: &str = "[U]";
/// Token conventionally marking pre-defined watermark injection.
pub const PREDEFINED_TOKEN: &str = "[V]";
/// Registry id reported for user-supplied watermarks.
pub const USER_ID: &str = "user";

/// Default embedding dimensionality (both text and registry sides).
pub const EMBED_DIM: usize = 64;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Deterministic token-hash bag-of-words embedding: each token hashes to
/// a pseudo-random unit direction; the prompt embedding is the
/// normalized sum.
pub fn embed_text(prompt: &str, dim: usize) -> Result<Vec<f64>> {
    if prompt.trim().is_empty() {
        return Err(Error::domain("empty prompt".to_string()));
    }
    let mut acc = vec![0.0; dim];
    for token in prompt
        .to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '[' || c == ']'))
        .filter(|t| !t.is_empty())
    {
        let mut rng = SeedRng::new(fnv1a(token.as_bytes()), 6);
        let dir = rng.normal_vec(dim);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, d) in acc.iter_mut().zip(&dir) {
            *a += d / norm;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for a in &mut acc {
            *a /= norm;
        }
    }
    Ok(acc)
}

/// Registry-side image embedder: mean-centred, normalized luma
/// thumbnail (side = sqrt(dim)).
pub fn embed_watermark_image(wm: &WatermarkImage, dim: usize) -> Vec<f64> {
    let side = (dim as f64).sqrt() as usize;
    let thumb = wm.as_image().resize_bilinear(side);
    let mut v = thumb.luma01();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in &mut v {
        *x -= mean;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v.truncate(dim);
    v.resize(dim, 0.0);
    v
}

#[derive(Clone, Debug)]
pub struct TriggerEntry {
    pub id: String,
    pub watermark: WatermarkImage,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TriggerRegistry {
    entries: Vec<TriggerEntry>,
    /// Linear prompt-trigger layer; identity unless fine-tuned.
    pub trigger: Linear,
    pub dim: usize,
}

impl TriggerRegistry {
    pub fn new(dim: usize) -> Self {
        TriggerRegistry {
            entries: Vec::new(),
            trigger: Linear::identity(dim),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TriggerEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&TriggerEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Copy-on-write registration; duplicate ids are conflicts.
    pub fn register_watermark(&self, id: &str, watermark: WatermarkImage) -> Result<TriggerRegistry> {
        if id == USER_ID {
            return Err(Error::Conflict(format!("id '{USER_ID}' is reserved")));
        }
        if self.entries.iter().any(|e| e.id == id) {
            return Err(Error::Conflict(format!("watermark id '{id}' already registered")));
        }
        let embedding = embed_watermark_image(&watermark, self.dim);
        let mut next = self.clone();
        next.entries.push(TriggerEntry {
            id: id.to_string(),
            watermark,
            embedding,
        });
        next.entries.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(next)
    }

    /// Raw scores (trigger-mapped prompt embedding dotted with each
    /// entry embedding) in entry order.
    pub fn scores(&self, prompt: &str) -> Result<Vec<(String, f64)>> {
        let e = embed_text(prompt, self.dim)?;
        let mapped = self.trigger.forward(&e, 1);
        Ok(self
            .entries
            .iter()
            .map(|entry| {
                let s = mapped
                    .iter()
                    .zip(&entry.embedding)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
                (entry.id.clone(), s)
            })
            .collect())
    }

    /// Softmax of [`Self::scores`]; the reported "probabilities". The
    /// argmax is unchanged by the softmax.
    pub fn probabilities(&self, prompt: &str) -> Result<Vec<(String, f64)>> {
        let scores = self.scores(prompt)?;
        let max = scores.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|(_, s)| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(scores
            .iter()
            .zip(exps)
            .map(|((id, _), e)| (id.clone(), e / z))
            .collect())
    }
}

/// Highest-probability watermark for a prompt, with the `[U]` override
/// taking precedence whenever its preconditions hold. Ties break toward
/// the lexicographically smallest id.
pub fn trigger_select(
    prompt: &str,
    registry: &TriggerRegistry,
    user_wm: Option<&WatermarkImage>,
) -> Result<(WatermarkImage, String)> {
    if prompt.contains(USER_TOKEN) {
        return match user_wm {
            Some(wm) => Ok((wm.clone(), USER_ID.to_string())),
            None => Err(Error::domain(format!(
                "prompt contains {USER_TOKEN} but no user watermark was provided"
            ))),
        };
    }
    if registry.is_empty() {
        return Err(Error::state("watermark registry is empty".to_string()));
    }
    let scores = registry.scores(prompt)?;
    // entries are kept sorted by id, so strict improvement implements
    // the lexicographic tie-break
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i].1 > scores[best].1 {
            best = i;
        }
    }
    let entry = &registry.entries[best];
    Ok((entry.watermark.clone(), entry.id.clone()))
}

/// Supervised fine-tune of the linear trigger layer on
/// (prompt, watermark-id) pairs: cross-entropy over softmax scores.
pub fn train_trigger(
    registry: &TriggerRegistry,
    pairs: &[(String, String)],
    epochs: usize,
    lr: f64,
) -> Result<TriggerRegistry> {
    if registry.is_empty() {
        return Err(Error::state("registry is empty".to_string()));
    }
    let mut reg = registry.clone();
    let dim = reg.dim;
    for _ in 0..epochs {
        for (prompt, id) in pairs {
            let target = reg
                .entries
                .iter()
                .position(|e| &e.id == id)
                .ok_or_else(|| Error::domain(format!("unknown id '{id}' in training pair")))?;
            let e = embed_text(prompt, dim)?;
            let mapped = reg.trigger.forward(&e, 1);
            let scores: Vec<f64> = reg
                .entries
                .iter()
                .map(|entry| {
                    mapped
                        .iter()
                        .zip(&entry.embedding)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            // d(xent)/d(mapped) = sum_j (p_j - y_j) * g_j
            let mut dmapped = vec![0.0; dim];
            for (j, entry) in reg.entries.iter().enumerate() {
                let p = exps[j] / z;
                let y = if j == target { 1.0 } else { 0.0 };
                for (dm, g) in dmapped.iter_mut().zip(&entry.embedding) {
                    *dm += (p - y) * g;
                }
            }
            // W -= lr * dmapped * e^T
            for r in 0..dim {
                for c in 0..dim {
                    reg.trigger.w.data[r * dim + c] -= lr * dmapped[r] * e[c];
                }
            }
        }
    }
    Ok(reg)
}

// --------------------------------------------------------- persistence

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    file: String,
    embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TriggerWeights {
    dim: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Persist as a directory: one PNG per watermark plus `index.jsonl`
/// ({id, file, embedding} lines) and the trigger layer weights.
pub fn save_registry(reg: &TriggerRegistry, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut index = String::new();
    for entry in &reg.entries {
        let file = format!("{}.png", entry.id);
        crate::image::save_image(entry.watermark.as_image(), dir.join(&file))?;
        index.push_str(
            &serde_json::to_string(&IndexEntry {
                id: entry.id.clone(),
                file,
                embedding: entry.embedding.clone(),
            })
            .unwrap(),
        );
        index.push('\n');
    }
    std::fs::write(dir.join("index.jsonl"), index)?;
    let weights = TriggerWeights {
        dim: reg.dim,
        w: reg.trigger.w.data.clone(),
        b: reg.trigger.b.data.clone(),
    };
    std::fs::write(
        dir.join("trigger.json"),
        serde_json::to_string(&weights).unwrap(),
    )?;
    Ok(())
}

pub fn load_registry(dir: impl AsRef<Path>, resolution: usize) -> Result<TriggerRegistry> {
    let dir = dir.as_ref();
    let index = std::fs::read_to_string(dir.join("index.jsonl"))
        .map_err(|e| Error::state(format!("registry index missing: {e}")))?;
    let mut entries = Vec::new();
    let mut dim = EMBED_DIM;
    for line in index.lines().filter(|l| !l.trim().is_empty()) {
        let e: IndexEntry =
            serde_json::from_str(line).map_err(|err| Error::Format(format!("index: {err}")))?;
        let img = crate::image::load_image(dir.join(&e.file), resolution)?;
        dim = e.embedding.len();
        entries.push(TriggerEntry {
            id: e.id,
            watermark: WatermarkImage(img),
            embedding: e.embedding,
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let trigger = match std::fs::read_to_string(dir.join("trigger.json")) {
        Ok(text) => {
            let w: TriggerWeights =
                serde_json::from_str(&text).map_err(|e| Error::Format(format!("trigger: {e}")))?;
            let mut lin = Linear::identity(w.dim);
            lin.w.data = w.w;
            lin.b.data = w.b;
            lin
        }
        Err(_) => Linear::identity(dim),
    };
    Ok(TriggerRegistry {
        entries,
        trigger,
        dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_watermark, WatermarkFamily};

    fn wm(i: usize) -> WatermarkImage {
        synth_watermark(WatermarkFamily::QrLike, 32, 9, i).unwrap()
    }

    fn toy_registry() -> TriggerRegistry {
        let reg = TriggerRegistry::new(EMBED_DIM);
        let reg = reg.register_watermark("wm-b", wm(1)).unwrap();
        reg.register_watermark("wm-a", wm(2)).unwrap()
    }

    #[test]
    fn embedding_contract() {
        let a = embed_text("a photo of a church", EMBED_DIM).unwrap();
        let b = embed_text("a photo of a church", EMBED_DIM).unwrap();
        assert_eq!(a, b, "same prompt, same vector");
        assert_eq!(a.len(), EMBED_DIM);
        let c = embed_text("a photo of a garden", EMBED_DIM).unwrap();
        assert_ne!(a, c, "one content token must change the vector");
        assert!(embed_text("   ", EMBED_DIM).is_err());
    }

    #[test]
    fn registration_rules() {
        let reg = TriggerRegistry::new(EMBED_DIM);
        assert!(reg.is_empty());
        let reg = reg.register_watermark("x", wm(0)).unwrap();
        assert_eq!(reg.len(), 1);
        assert!(matches!(
            reg.register_watermark("x", wm(1)),
            Err(Error::Conflict(_))
        ));
        // the original registry value is untouched (copy-on-write)
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn argmax_selection_and_scale_invariance() {
        let mut reg = TriggerRegistry::new(2);
        reg.entries.push(TriggerEntry {
            id: "e1".to_string(),
            watermark: wm(0),
            embedding: vec![1.0, 0.0],
        });
        reg.entries.push(TriggerEntry {
            id: "e2".to_string(),
            watermark: wm(1),
            embedding: vec![0.0, 1.0],
        });
        // mapped prompt embedding (0.9, 0.1) -> entry 1
        let scores: Vec<f64> = vec![0.9, 0.1];
        let pick = |s: &[f64]| -> &str {
            let mut best = 0;
            for i in 1..s.len() {
                if s[i] > s[best] {
                    best = i;
                }
            }
            &reg.entries[best].id
        };
        assert_eq!(pick(&scores), "e1");
        let scaled: Vec<f64> = scores.iter().map(|s| s * 5.0).collect();
        assert_eq!(pick(&scaled), pick(&scores), "argmax invariant under scaling");
    }

    #[test]
    fn user_token_override() {
        let reg = toy_registry();
        let avatar = wm(7);
        let (selected, id) = trigger_select(
            "edit this personal photo with my avatar watermark [U]",
            &reg,
            Some(&avatar),
        )
        .unwrap();
        assert_eq!(id, USER_ID);
        assert_eq!(&selected, &avatar);

        let err = trigger_select("add [U] please", &reg, None).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn deterministic_selection_and_tie_break() {
        let reg = toy_registry();
        let a = trigger_select("a photo with watermark [V]", &reg, None).unwrap();
        let b = trigger_select("a photo with watermark [V]", &reg, None).unwrap();
        assert_eq!(a.1, b.1);

        // force a perfect tie: identical embeddings
        let mut tied = TriggerRegistry::new(2);
        for id in ["zz", "aa"] {
            tied.entries.push(TriggerEntry {
                id: id.to_string(),
                watermark: wm(3),
                embedding: vec![1.0, 0.0],
            });
        }
        tied.entries.sort_by(|x, y| x.id.cmp(&y.id));
        let (_, id) = trigger_select("anything", &tied, None).unwrap();
        assert_eq!(id, "aa", "lexicographically smallest id wins ties");

        let empty = TriggerRegistry::new(2);
        assert!(matches!(
            trigger_select("anything", &empty, None),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn trained_trigger_selects_paired_watermark() {
        let reg = toy_registry();
        let pairs = vec![
            ("the alpha logo mark".to_string(), "wm-a".to_string()),
            ("the beta logo mark".to_string(), "wm-b".to_string()),
        ];
        let reg = train_trigger(&reg, &pairs, 200, 0.5).unwrap();
        let (_, id_a) = trigger_select("the alpha logo mark", &reg, None).unwrap();
        let (_, id_b) = trigger_select("the beta logo mark", &reg, None).unwrap();
        assert_eq!(id_a, "wm-a");
        assert_eq!(id_b, "wm-b");
    }

    #[test]
    fn registry_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let reg = toy_registry();
        save_registry(&reg, dir.path()).unwrap();
        let loaded = load_registry(dir.path(), 32).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.entries()[0].id, "wm-a");
        // embeddings persist exactly
        assert_eq!(loaded.entries()[0].embedding, reg.entries()[0].embedding);
    }
}
