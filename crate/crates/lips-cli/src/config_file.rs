//! Model config files: flat `key = value` text with bracketed section
//! headers, `#`/`;` comments, and an optional `preset = <name>` base that
//! later keys override.
//!
//! ```text
//! preset = lips_full
//! input_h = 64
//! input_w = 64
//!
//! [pixel]
//! depth = 2
//! ```

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lips_core::config::ModelConfig;
use lips_core::presets::Preset;

pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    let mut section = String::new();
    let mut saw_key = false;

    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                bail!("line {ln}: unterminated section header `{line}`");
            };
            section = name.trim().to_string();
            match section.as_str() {
                "routing" | "pixel" | "query" => continue,
                other => bail!("line {ln}: unknown section `[{other}]`"),
            }
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {ln}: expected `key = value`, got `{line}`");
        };
        let (key, value) = (key.trim(), value.trim());
        if key == "preset" {
            if !section.is_empty() || saw_key {
                bail!("line {ln}: `preset` must be the first entry");
            }
            cfg = Preset::from_name(value)
                .with_context(|| format!("line {ln}: unknown preset `{value}`"))?
                .model_config();
            saw_key = true;
            continue;
        }
        apply_key(&mut cfg, &section, key, value)
            .with_context(|| format!("line {ln}: key `{key}`"))?;
        saw_key = true;
    }

    cfg.validate()?;
    Ok(cfg)
}

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn apply_key(cfg: &mut ModelConfig, section: &str, key: &str, value: &str) -> Result<()> {
    match (section, key) {
        ("", "input_h") => cfg.input_h = int(value)?,
        ("", "input_w") => cfg.input_w = int(value)?,
        ("", "seed") => cfg.seed = value.parse().context("expected an unsigned integer")?,
        ("", "encoder_channels") => cfg.encoder_channels = fixed_list(value)?,
        ("routing", "selected_levels") => cfg.routing.selected_levels = int_list(value)?,
        ("routing", "output_channels") => cfg.routing.output_channels = int(value)?,
        ("routing", "compression_strides") => cfg.routing.compression_strides = fixed_list(value)?,
        ("pixel", "depth") => cfg.pixel.depth = int(value)?,
        ("pixel", "width") => cfg.pixel.width = int(value)?,
        ("pixel", "heads") => cfg.pixel.heads = int(value)?,
        ("pixel", "points_per_level") => cfg.pixel.points_per_level = int(value)?,
        ("pixel", "ffn_dim") => cfg.pixel.ffn_dim = int(value)?,
        ("pixel", "mask_feature_strides") => cfg.pixel.mask_feature_strides = int_list(value)?,
        ("query", "num_queries") => cfg.query.num_queries = int(value)?,
        ("query", "num_layers") => cfg.query.num_layers = int(value)?,
        ("query", "hidden_dim") => cfg.query.hidden_dim = int(value)?,
        ("query", "num_classes") => cfg.query.num_classes = int(value)?,
        ("query", "heads") => cfg.query.heads = int(value)?,
        ("query", "ffn_dim") => cfg.query.ffn_dim = int(value)?,
        ("query", "mask_threshold") => {
            cfg.query.mask_threshold = value.parse().context("expected a float")?
        }
        ("", other) => bail!("unknown top-level key `{other}`"),
        (section, other) => bail!("unknown key `{other}` in section `[{section}]`"),
    }
    Ok(())
}

fn int(value: &str) -> Result<usize> {
    value.parse().context("expected an unsigned integer")
}

fn int_list(value: &str) -> Result<Vec<usize>> {
    let items: Result<Vec<usize>> = value
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|tok| !tok.is_empty())
        .map(|tok| tok.parse::<usize>().with_context(|| format!("bad list entry `{tok}`")))
        .collect();
    let items = items?;
    if items.is_empty() {
        bail!("expected a non-empty integer list");
    }
    Ok(items)
}

fn fixed_list<const N: usize>(value: &str) -> Result<[usize; N]> {
    let items = int_list(value)?;
    let len = items.len();
    items.try_into().map_err(|_| anyhow::anyhow!("expected exactly {N} entries, got {len}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let text = "\
# toy setup
input_h = 64
input_w = 128
seed = 9
encoder_channels = 8, 16, 32, 64

[routing]
selected_levels = 1 2
output_channels = 32

[pixel]
width = 32
ffn_dim = 64
mask_feature_strides = 8 16 32

[query]
hidden_dim = 32   ; must match the pixel width
num_queries = 7
";
        let cfg = parse_config(text).unwrap();
        assert_eq!((cfg.input_h, cfg.input_w, cfg.seed), (64, 128, 9));
        assert_eq!(cfg.encoder_channels, [8, 16, 32, 64]);
        assert_eq!(cfg.routing.selected_levels, vec![1, 2]);
        assert_eq!(cfg.pixel.width, 32);
        assert_eq!(cfg.query.num_queries, 7);
    }

    #[test]
    fn preset_base_with_overrides() {
        let cfg = parse_config("preset = lips_2\ninput_h = 64\ninput_w = 64\n").unwrap();
        assert_eq!(cfg.routing.selected_levels, vec![1, 2]);
        assert_eq!(cfg.pixel.width, 128);
        assert_eq!((cfg.input_h, cfg.input_w), (64, 64));
        assert!(parse_config("input_h = 64\npreset = lips_2\n").is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_invalid_results() {
        assert!(parse_config("bogus = 1\n").is_err());
        assert!(parse_config("[pixel]\nbogus = 1\n").is_err());
        assert!(parse_config("[weird]\n").is_err());
        // Parses but fails model validation: width mismatch.
        assert!(parse_config("[pixel]\nwidth = 64\n").is_err());
    }
}
