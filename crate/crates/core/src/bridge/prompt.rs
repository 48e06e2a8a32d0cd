//! Prompt assembly and the injection bundle handed to a generator runtime.
//!
//! A bundle is a JSON header plus an adjacent little-endian f32 file holding
//! the token embedding that replaces the marker token's input embedding.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BridgeError, TokenEmbedding};

pub const DEFAULT_MARKER: &str = "<PREF_TOKEN>";

const ZERO_WIDTH_SPACE: char = '\u{200B}';

const TEMPLATE_HEAD: &str = "[System]\n\
You are a personalized writing assistant that produces reviews in the user's individual style.\n\
\n\
[User context]\n\
The user has interacted with this platform across many sessions. A compact latent representation of their current preference follows.\n\
\n\
Based on this user's preference trajectory, their current preference is represented as: ";

const TEMPLATE_TASK: &str = "[Task]\n\
Write a review for this item in the user's current style. Output only the review text.\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub text: String,
    pub marker: String,
    /// Offset of the marker in Unicode scalar values.
    pub marker_offset: usize,
    pub warnings: Vec<String>,
}

/// Breaks every occurrence of `marker` in item text with a zero-width space.
fn escape_marker(field: &str, marker: &str, label: &str, warnings: &mut Vec<String>) -> String {
    if !field.contains(marker) {
        return field.to_string();
    }
    let mut broken = String::new();
    let mut chars = marker.chars();
    broken.extend(chars.next());
    broken.push(ZERO_WIDTH_SPACE);
    broken.extend(chars);
    warnings.push(format!("item {label} contained the marker {marker:?}; escaped"));
    field.replace(marker, &broken)
}

pub fn assemble_prompt(title: &str, description: &str, marker: &str) -> Result<AssembledPrompt, BridgeError> {
    if title.trim().is_empty() || description.trim().is_empty() {
        return Err(BridgeError::Bundle("title and description must be non-empty".into()));
    }
    if marker.is_empty() || TEMPLATE_HEAD.contains(marker) || TEMPLATE_TASK.contains(marker) || "[Target item]\nTitle: Description: ".contains(marker) {
        return Err(BridgeError::Bundle(format!("marker {marker:?} collides with the template")));
    }
    let mut warnings = Vec::new();
    let title = escape_marker(title, marker, "title", &mut warnings);
    let description = escape_marker(description, marker, "description", &mut warnings);
    let marker_offset = TEMPLATE_HEAD.chars().count();
    let text = format!("{TEMPLATE_HEAD}{marker}\n\n[Target item]\nTitle: {title}\nDescription: {description}\n\n{TEMPLATE_TASK}");
    Ok(AssembledPrompt { text, marker: marker.to_string(), marker_offset, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionBundle {
    pub prompt: String,
    pub marker: String,
    pub marker_offset: usize,
    pub token_dim: usize,
    pub model_hash: String,
    pub state_hash: String,
    /// File name of the vector, relative to the header.
    pub vector_file: String,
    #[serde(skip)]
    pub vector: Vec<f32>,
}

impl InjectionBundle {
    pub fn new(prompt: &AssembledPrompt, token: &TokenEmbedding, vector_file: &str) -> Self {
        Self {
            prompt: prompt.text.clone(),
            marker: prompt.marker.clone(),
            marker_offset: prompt.marker_offset,
            token_dim: token.vector.len(),
            model_hash: token.model_hash.clone(),
            state_hash: token.state_hash.clone(),
            vector_file: vector_file.to_string(),
            vector: token.vector.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), BridgeError> {
        let bad = |m: String| Err(BridgeError::Bundle(m));
        if self.prompt.matches(&self.marker).count() != 1 {
            return bad(format!("prompt must contain the marker exactly once, found {}", self.prompt.matches(&self.marker).count()));
        }
        let at: String = self.prompt.chars().skip(self.marker_offset).take(self.marker.chars().count()).collect();
        if at != self.marker {
            return bad(format!("marker not found at offset {}", self.marker_offset));
        }
        if self.vector.len() != self.token_dim {
            return bad(format!("vector has {} values, header says {}", self.vector.len(), self.token_dim));
        }
        if self.vector.iter().any(|x| !x.is_finite()) {
            return bad("vector has non-finite values".into());
        }
        Ok(())
    }
}

fn vector_path(header: &Path, name: &str) -> PathBuf {
    header.parent().map_or_else(|| PathBuf::from(name), |p| p.join(name))
}

pub fn write_bundle(bundle: &InjectionBundle, header_path: &Path) -> Result<(), BridgeError> {
    bundle.validate()?;
    let json = serde_json::to_vec_pretty(bundle).expect("bundle header serializes");
    std::fs::write(header_path, json).map_err(|e| BridgeError::io(header_path, e))?;
    let bytes: Vec<u8> = bundle.vector.iter().flat_map(|x| x.to_le_bytes()).collect();
    let vp = vector_path(header_path, &bundle.vector_file);
    std::fs::write(&vp, bytes).map_err(|e| BridgeError::io(&vp, e))
}

pub fn read_bundle(header_path: &Path) -> Result<InjectionBundle, BridgeError> {
    let json = std::fs::read(header_path).map_err(|e| BridgeError::io(header_path, e))?;
    let mut bundle: InjectionBundle = serde_json::from_slice(&json).map_err(|e| BridgeError::Bundle(format!("header: {e}")))?;
    let vp = vector_path(header_path, &bundle.vector_file);
    let bytes = std::fs::read(&vp).map_err(|e| BridgeError::io(&vp, e))?;
    if bytes.len() != bundle.token_dim * 4 {
        return Err(crate::format::FormatError::Malformed(format!("vector file has {} bytes, expected {}", bytes.len(), bundle.token_dim * 4)).into());
    }
    bundle.vector = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
    bundle.validate()?;
    Ok(bundle)
}
