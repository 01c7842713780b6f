//! NIR-derived vegetation indices, botanic-aware prompt assembly, and the
//! deterministic text-embedding stub that stands in for a pretrained
//! vision-language encoder.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::rng::{fnv1a64, standard_normal};
use rand_core::SeedableRng;

/// Denominator guard for the normalized indices.
pub const EPS_IDX: f64 = 1e-8;

/// Canonical weather metadata keys, in serialization order.
pub const WEATHER_KEYS: [&str; 11] = [
    "temp",
    "dew",
    "humidity",
    "precip",
    "precipprob",
    "cloudcover",
    "solarradiation",
    "uvindex",
    "windgust",
    "windspeed",
    "visibility",
];

#[derive(Debug, Clone, PartialEq)]
pub enum SpectraError {
    MissingWeatherKeys(Vec<String>),
    UnexpectedWeatherKeys(Vec<String>),
    EmptyPrompt,
    ShapeMismatch,
    NotRegistered,
}

impl core::fmt::Display for SpectraError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SpectraError::MissingWeatherKeys(keys) => {
                write!(f, "missing weather keys: {}", keys.join(", "))
            }
            SpectraError::UnexpectedWeatherKeys(keys) => {
                write!(f, "unexpected weather keys: {}", keys.join(", "))
            }
            SpectraError::EmptyPrompt => write!(f, "prompt is empty"),
            SpectraError::ShapeMismatch => write!(f, "spectral bands have mismatched shapes"),
            SpectraError::NotRegistered => write!(f, "NIR band is not registered to RGB"),
        }
    }
}

impl core::error::Error for SpectraError {}

/// A registered NIR + RGB reflectance pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPair {
    pub width: usize,
    pub height: usize,
    /// `height * width` NIR reflectance in [0, 1].
    pub nir: Vec<f64>,
    /// `height * width * 3` RGB reflectance in [0, 1].
    pub rgb: Vec<f64>,
    /// Bands must be registered (pixel-aligned) before index computation.
    pub registered: bool,
}

impl SpectralPair {
    pub fn new(width: usize, height: usize, nir: Vec<f64>, rgb: Vec<f64>) -> Result<Self, SpectraError> {
        if nir.len() != width * height || rgb.len() != width * height * 3 {
            return Err(SpectraError::ShapeMismatch);
        }
        Ok(Self { width, height, nir, rgb, registered: true })
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.rgb.chunks_exact(3).map(|px| px[c]).collect()
    }

    fn check(&self) -> Result<(), SpectraError> {
        if !self.registered {
            return Err(SpectraError::NotRegistered);
        }
        Ok(())
    }

    pub fn ndvi(&self) -> Result<Vec<f64>, SpectraError> {
        self.check()?;
        Ok(ndvi(&self.nir, &self.channel(0)))
    }

    pub fn ndwi(&self) -> Result<Vec<f64>, SpectraError> {
        self.check()?;
        Ok(ndwi(&self.channel(1), &self.nir))
    }

    pub fn chlorophyll_index(&self) -> Result<Vec<f64>, SpectraError> {
        self.check()?;
        Ok(chlorophyll_index(&self.nir, &self.channel(1)))
    }
}

/// Normalized difference vegetation index `(NIR - R) / (NIR + R)`.
pub fn ndvi(nir: &[f64], red: &[f64]) -> Vec<f64> {
    assert_eq!(nir.len(), red.len(), "bands must be registered");
    nir.iter().zip(red).map(|(&n, &r)| (n - r) / (n + r + EPS_IDX)).collect()
}

/// Normalized difference water index `(G - NIR) / (G + NIR)`.
pub fn ndwi(green: &[f64], nir: &[f64]) -> Vec<f64> {
    assert_eq!(green.len(), nir.len(), "bands must be registered");
    green.iter().zip(nir).map(|(&g, &n)| (g - n) / (g + n + EPS_IDX)).collect()
}

/// Green chlorophyll index `NIR / G - 1`.
pub fn chlorophyll_index(nir: &[f64], green: &[f64]) -> Vec<f64> {
    assert_eq!(nir.len(), green.len(), "bands must be registered");
    nir.iter().zip(green).map(|(&n, &g)| n / (g + EPS_IDX) - 1.0).collect()
}

/// Mean/min/max summary of an index map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl IndexStats {
    pub fn of(values: &[f64]) -> Self {
        assert!(!values.is_empty());
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        Self { mean: sum / values.len() as f64, min, max }
    }
}

/// Everything the prompt template substitutes.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMetadata {
    pub img_description: String,
    pub ndvi: IndexStats,
    pub ndwi: IndexStats,
    pub chlorophyll: IndexStats,
    pub weather: BTreeMap<String, f64>,
}

fn stats_block(name: &str, s: &IndexStats) -> String {
    alloc::format!("{name} mean {:.3}, min {:.3}, max {:.3}", s.mean, s.min, s.max)
}

/// Fills the botanic-aware prompt template. Byte-identical output for
/// identical metadata; index statistics are formatted to three decimals and
/// weather values to one.
pub fn assemble_prompt(meta: &PromptMetadata) -> Result<String, SpectraError> {
    let missing: Vec<String> = WEATHER_KEYS
        .iter()
        .filter(|k| !meta.weather.contains_key(**k))
        .map(|k| String::from(*k))
        .collect();
    if !missing.is_empty() {
        return Err(SpectraError::MissingWeatherKeys(missing));
    }
    let unexpected: Vec<String> = meta
        .weather
        .keys()
        .filter(|k| !WEATHER_KEYS.contains(&k.as_str()))
        .cloned()
        .collect();
    if !unexpected.is_empty() {
        return Err(SpectraError::UnexpectedWeatherKeys(unexpected));
    }

    let nir_info = alloc::format!(
        "{}; {}; {}",
        stats_block("NDVI:", &meta.ndvi),
        stats_block("NDWI:", &meta.ndwi),
        stats_block("chlorophyll index:", &meta.chlorophyll)
    );
    let weather_info = WEATHER_KEYS
        .iter()
        .map(|k| alloc::format!("{k}: {:.1}", meta.weather[*k]))
        .collect::<Vec<_>>()
        .join(", ");

    Ok(alloc::format!(
        "You are a multimodal plant understanding expert specializing in 3D reconstruction under challenging visual and environmental conditions. \
Your task is to generate a single coherent paragraph by synthesizing (i) image description, (ii) NIR-based indices (NDVI, NDWI, chlorophyll index), and (iii) weather metadata, highlighting structural and physiological features to support cross-modal attention in downstream reconstruction.\n\
\n\
The provided data are as follows:\n\
\n\
Image Description: {}\n\
\n\
NIR Information: {}\n\
\n\
Weather Information: {}\n\
\n\
Instructions:\n\
- Do not simply concatenate the inputs. Instead, synthesize them into a natural and cohesive narrative.\n\
- Evaluate whether the weather conditions and image description are semantically aligned (e.g., indoor/outdoor consistency). Use only the relevant components.\n\
- Embed physiological and environmental data meaningfully rather than listing raw numbers (e.g., say \"under high humidity\" instead of \"81%\").\n\
- Emphasize attributes that affect visual appearance and 3D geometry, such as occlusion, lighting variation, leaf texture, or overlapping structures.\n\
- Limit your output to a paragraph (max 200 words) in fluent and formal English.\n\
- Do not include explanations, metadata, or any extra text. Output only the final paragraph.\n\
\n\
The final rewritten description is:\n",
        meta.img_description, nir_info, weather_info
    ))
}

/// Token-level text features.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    /// `len() * channels` row-major, each row unit-norm.
    pub tokens: Vec<f64>,
    pub token_strings: Vec<String>,
    pub channels: usize,
}

impl TextEmbedding {
    pub fn len(&self) -> usize {
        self.token_strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_strings.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.channels..(i + 1) * self.channels]
    }
}

/// Embeds one token: a byte-wise 64-bit hash seeds a generator that fills
/// `channels` reals, unit-normalized. Identical tokens always map to
/// identical rows, on any platform.
pub fn embed_token(token: &str, channels: usize) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(fnv1a64(token.as_bytes()));
    let mut row: Vec<f64> = (0..channels).map(|_| standard_normal(&mut rng)).collect();
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in &mut row {
            *x /= norm;
        }
    } else {
        row[0] = 1.0;
    }
    row
}

/// Deterministic text-embedding stub: lowercase, split at non-alphanumeric
/// boundaries, truncate to `max_tokens`, hash-embed each token.
pub fn embed_text(prompt: &str, channels: usize, max_tokens: usize) -> Result<TextEmbedding, SpectraError> {
    if prompt.trim().is_empty() {
        return Err(SpectraError::EmptyPrompt);
    }
    let lowered = prompt.to_lowercase();
    let mut token_strings: Vec<String> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect();
    if token_strings.is_empty() {
        return Err(SpectraError::EmptyPrompt);
    }
    token_strings.truncate(max_tokens.max(1));

    let mut tokens = Vec::with_capacity(token_strings.len() * channels);
    for t in &token_strings {
        tokens.extend_from_slice(&embed_token(t, channels));
    }
    Ok(TextEmbedding { tokens, token_strings, channels })
}
