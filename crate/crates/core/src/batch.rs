//! Samples, modality identities and presence masks.

use serde::{Deserialize, Serialize};

use crate::error::{DcerError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Video, Modality::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
            Modality::Text => "text",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "audio" | "a" => Ok(Modality::Audio),
            "video" | "v" => Ok(Modality::Video),
            "text" | "t" => Ok(Modality::Text),
            other => Err(DcerError::Input(format!("unknown modality {other:?}"))),
        }
    }
}

/// Which of the three modalities are observed for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Presence(pub [bool; 3]);

impl Presence {
    pub const ALL: Presence = Presence([true; 3]);

    pub fn only(m: Modality) -> Presence {
        let mut flags = [false; 3];
        flags[m.index()] = true;
        Presence(flags)
    }

    /// Modalities present in both.
    pub fn intersect(self, other: Presence) -> Presence {
        Presence([0, 1, 2].map(|i| self.0[i] && other.0[i]))
    }

    pub fn has(self, m: Modality) -> bool {
        self.0[m.index()]
    }

    pub fn count(self) -> usize {
        self.0.iter().filter(|&&p| p).count()
    }

    pub fn is_complete(self) -> bool {
        self.count() == 3
    }

    pub fn present(self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|&m| self.has(m)).collect()
    }

    pub fn missing(self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|&m| !self.has(m)).collect()
    }

    /// Parses a comma-separated subset such as `audio,text` or `a+t`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut flags = [false; 3];
        for part in s.split([',', '+']).filter(|p| !p.trim().is_empty()) {
            flags[Modality::parse(part)?.index()] = true;
        }
        if flags.iter().all(|f| !f) {
            return Err(DcerError::Input(format!("empty modality subset {s:?}")));
        }
        Ok(Presence(flags))
    }

    pub fn label(self) -> String {
        self.present()
            .iter()
            .map(|m| &m.name()[..1])
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Text is either token ids or precomputed per-token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub enum TextInput {
    Tokens(Vec<usize>),
    Embeddings(Tensor),
}

/// One labelled example with raw per-modality features.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: f32,
    /// `T_a × D_a`
    pub audio: Tensor,
    /// `T_v × D_v`
    pub video: Tensor,
    pub text: TextInput,
}

/// Samples together with the presence mask the model is told about.
#[derive(Debug, Clone)]
pub struct ModalityBatch {
    pub samples: Vec<Sample>,
    pub presence: Vec<Presence>,
}

impl ModalityBatch {
    pub fn complete(samples: Vec<Sample>) -> Self {
        let presence = vec![Presence::ALL; samples.len()];
        ModalityBatch { samples, presence }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f32> {
        self.samples.iter().map(|s| s.label).collect()
    }
}
