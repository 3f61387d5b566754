//! Run configuration: `key = value` lines, '#' comments, unknown keys rejected.

use std::path::PathBuf;

use vnsa_core::branches::SparseConfig;
use vnsa_core::dense::HeadLayout;
use vnsa_core::error::{Error, Result};
use vnsa_core::gating::{Modality, ModalitySpans, Span};

/// Which positions the vision branch covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpanSpec {
    AllVision,
    AllText,
    /// 1-based inclusive vision ranges; everything else is text.
    Ranges(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub block_size: usize,
    pub select_blocks: usize,
    pub window: usize,
    pub seq_len: usize,
    pub tokens_per_frame: Option<usize>,
    pub frames: Option<usize>,
    pub seed: u64,
    pub vision_spans: SpanSpec,
    pub fixtures_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Constant gates overriding the MLP, e.g. "0,0,1" to isolate the window.
    pub gate_override: Option<[f32; 3]>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            heads: 28,
            kv_heads: 4,
            head_dim: 128,
            block_size: 64,
            select_blocks: 32,
            window: 256,
            seq_len: 256,
            tokens_per_frame: None,
            frames: None,
            seed: 42,
            vision_spans: SpanSpec::AllVision,
            fixtures_dir: PathBuf::from("fixtures"),
            out_dir: PathBuf::from("out"),
            gate_override: None,
        }
    }
}

impl RunConfig {
    pub fn layout(&self) -> Result<HeadLayout> {
        HeadLayout::new(self.heads, self.kv_heads, self.head_dim)
    }

    pub fn sparse(&self) -> Result<SparseConfig> {
        SparseConfig::new(self.block_size, self.select_blocks, self.window)
    }

    pub fn hidden_width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Full modality cover of 1..=seq_len implied by the span spec.
    pub fn modality_spans(&self) -> Result<ModalitySpans> {
        match &self.vision_spans {
            SpanSpec::AllVision => ModalitySpans::uniform(self.seq_len, Modality::Vision),
            SpanSpec::AllText => ModalitySpans::uniform(self.seq_len, Modality::Text),
            SpanSpec::Ranges(ranges) => {
                let mut spans = Vec::new();
                let mut cursor = 1usize;
                for &(start, end) in ranges {
                    if start < cursor {
                        return Err(Error::Validation(format!(
                            "vision spans must be ascending and disjoint; {start}-{end} overlaps"
                        )));
                    }
                    if end > self.seq_len || start > end {
                        return Err(Error::Validation(format!(
                            "vision span {start}-{end} outside 1..={}",
                            self.seq_len
                        )));
                    }
                    if start > cursor {
                        spans.push(Span {
                            start: cursor,
                            end: start - 1,
                            modality: Modality::Text,
                        });
                    }
                    spans.push(Span {
                        start,
                        end,
                        modality: Modality::Vision,
                    });
                    cursor = end + 1;
                }
                if cursor <= self.seq_len {
                    spans.push(Span {
                        start: cursor,
                        end: self.seq_len,
                        modality: Modality::Text,
                    });
                }
                ModalitySpans::new(spans, self.seq_len)
            }
        }
    }
}

fn config_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn parse_usize(line: usize, key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| config_err(line, format!("{key}: expected an unsigned integer, got '{value}'")))
}

fn parse_ranges(line: usize, value: &str) -> Result<SpanSpec> {
    match value {
        "none" => return Ok(SpanSpec::AllText),
        "all" => return Ok(SpanSpec::AllVision),
        _ => {}
    }
    let mut ranges = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        let (a, b) = part.split_once('-').ok_or_else(|| {
            config_err(line, format!("vision_spans: expected 'start-end', got '{part}'"))
        })?;
        let start = parse_usize(line, "vision_spans", a.trim())?;
        let end = parse_usize(line, "vision_spans", b.trim())?;
        ranges.push((start, end));
    }
    Ok(SpanSpec::Ranges(ranges))
}

fn parse_gate_override(line: usize, value: &str) -> Result<Option<[f32; 3]>> {
    if value == "none" {
        return Ok(None);
    }
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(config_err(line, "gate_override: expected three comma-separated values"));
    }
    let mut triple = [0.0f32; 3];
    for (slot, part) in triple.iter_mut().zip(parts.iter()) {
        let v: f32 = part
            .parse()
            .map_err(|_| config_err(line, format!("gate_override: bad value '{part}'")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(config_err(line, format!("gate_override: {v} outside [0, 1]")));
        }
        *slot = v;
    }
    Ok(Some(triple))
}

/// Parse and validate a configuration: one `key = value` per line, '#' starts
/// a comment, unknown keys are rejected with their line number.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seq_len_set = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| config_err(line, format!("expected 'key = value', got '{content}'")))?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "heads" => cfg.heads = parse_usize(line, key, value)?,
            "kv_heads" => cfg.kv_heads = parse_usize(line, key, value)?,
            "head_dim" => cfg.head_dim = parse_usize(line, key, value)?,
            "block_size" => cfg.block_size = parse_usize(line, key, value)?,
            "select_blocks" => cfg.select_blocks = parse_usize(line, key, value)?,
            "window" => cfg.window = parse_usize(line, key, value)?,
            "seq_len" => {
                cfg.seq_len = parse_usize(line, key, value)?;
                seq_len_set = true;
            }
            "tokens_per_frame" => cfg.tokens_per_frame = Some(parse_usize(line, key, value)?),
            "frames" => cfg.frames = Some(parse_usize(line, key, value)?),
            "seed" => {
                cfg.seed = value.parse().map_err(|_| {
                    config_err(line, format!("seed: expected an unsigned integer, got '{value}'"))
                })?
            }
            "vision_spans" => cfg.vision_spans = parse_ranges(line, value)?,
            "fixtures_dir" => cfg.fixtures_dir = PathBuf::from(value),
            "out_dir" => cfg.out_dir = PathBuf::from(value),
            "gate_override" => cfg.gate_override = parse_gate_override(line, value)?,
            _ => return Err(config_err(line, format!("unknown key '{key}'"))),
        }
    }

    match (cfg.tokens_per_frame, cfg.frames) {
        (Some(t), Some(f)) => {
            let derived = t * f;
            if seq_len_set && cfg.seq_len != derived {
                return Err(Error::Validation(format!(
                    "seq_len {} contradicts tokens_per_frame * frames = {derived}",
                    cfg.seq_len
                )));
            }
            cfg.seq_len = derived;
        }
        (None, None) => {}
        _ => {
            return Err(Error::Validation(
                "tokens_per_frame and frames must be given together".into(),
            ))
        }
    }

    if cfg.block_size == 0 {
        return Err(Error::Validation("block_size must be at least 1".into()));
    }
    if cfg.seq_len == 0 {
        return Err(Error::Validation("seq_len must be at least 1".into()));
    }
    cfg.layout()?;
    cfg.sparse()?;
    cfg.modality_spans()?;
    Ok(cfg)
}
