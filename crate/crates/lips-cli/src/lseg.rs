//! LSEG segmentation files and the category table CSV.
//!
//! LSEG layout (UTF-8 text): line 1 `H W`; line 2 the segment count `S`;
//! `S` lines of `id category_id is_thing(0|1)`; then `H` lines of `W`
//! space-separated segment ids (0 = void). Parse errors carry the
//! offending line number.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lips_core::panoptic::{Category, CategoryTable, PanopticSegmentation, SegmentInfo};

pub fn write_lseg(path: &Path, seg: &PanopticSegmentation) -> Result<()> {
    seg.validate()?;
    let mut text = String::new();
    let _ = writeln!(text, "{} {}", seg.h, seg.w);
    let _ = writeln!(text, "{}", seg.segments.len());
    for s in &seg.segments {
        let _ = writeln!(text, "{} {} {}", s.id, s.category_id, u8::from(s.is_thing));
    }
    for row in seg.id_map.chunks(seg.w) {
        let line: Vec<String> = row.iter().map(u32::to_string).collect();
        let _ = writeln!(text, "{}", line.join(" "));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_lseg(path: &Path) -> Result<PanopticSegmentation> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_lseg(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_lseg(text: &str) -> Result<PanopticSegmentation> {
    let mut lines = text.lines().enumerate();
    let mut next_line = |what: &str| -> Result<(usize, &str)> {
        lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .with_context(|| format!("unexpected end of file, expected {what}"))
    };

    let (ln, header) = next_line("the `H W` header")?;
    let dims = parse_fields::<usize>(header, ln, "header")?;
    let [h, w] = dims.as_slice() else {
        bail!("line {ln}: header must be `H W`, got {} fields", dims.len());
    };
    let (h, w) = (*h, *w);
    if h == 0 || w == 0 {
        bail!("line {ln}: canvas {h} x {w} is empty");
    }

    let (ln, count) = next_line("the segment count")?;
    let count: usize = count
        .trim()
        .parse()
        .with_context(|| format!("line {ln}: segment count must be an integer"))?;

    let mut segments = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, line) = next_line("a segment record")?;
        let fields = parse_fields::<u32>(line, ln, "segment record")?;
        let [id, category_id, thing] = fields.as_slice() else {
            bail!("line {ln}: segment records are `id category_id is_thing`");
        };
        if *id == 0 {
            bail!("line {ln}: segment id 0 is reserved for void");
        }
        if *thing > 1 {
            bail!("line {ln}: is_thing must be 0 or 1, got {thing}");
        }
        segments.push(SegmentInfo { id: *id, category_id: *category_id, is_thing: *thing == 1 });
    }

    let mut id_map = Vec::with_capacity(h * w);
    for row in 0..h {
        let (ln, line) = next_line("an id-map row")?;
        let ids = parse_fields::<u32>(line, ln, "id-map row")?;
        if ids.len() != w {
            bail!("line {ln}: id-map row {row} holds {} ids, expected {w}", ids.len());
        }
        id_map.extend_from_slice(&ids);
    }
    if let Some((ln, line)) = lines.next() {
        if !line.trim().is_empty() {
            bail!("line {ln}: trailing content after the id map");
        }
    }

    let seg = PanopticSegmentation { h, w, id_map, segments };
    seg.validate()?;
    Ok(seg)
}

fn parse_fields<T: std::str::FromStr>(line: &str, ln: usize, what: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<T>().with_context(|| format!("line {ln}: bad {what} field `{tok}`"))
        })
        .collect()
}

/// Reads a `id,name,is_thing` CSV; a header row is recognized and skipped.
pub fn read_categories(path: &Path) -> Result<CategoryTable> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut categories = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() || (ln == 1 && line.eq_ignore_ascii_case("id,name,is_thing")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, name, thing] = fields.as_slice() else {
            bail!("{}: line {ln}: expected `id,name,is_thing`", path.display());
        };
        let id: u32 = id
            .parse()
            .with_context(|| format!("{}: line {ln}: bad category id `{id}`", path.display()))?;
        let is_thing = match *thing {
            "0" => false,
            "1" => true,
            other => bail!("{}: line {ln}: is_thing must be 0 or 1, got `{other}`", path.display()),
        };
        categories.push(Category { id, name: (*name).into(), is_thing });
    }
    Ok(CategoryTable::new(categories)?)
}

pub fn write_categories(path: &Path, table: &CategoryTable) -> Result<()> {
    let mut text = String::from("id,name,is_thing\n");
    for cat in table.iter() {
        let _ = writeln!(text, "{},{},{}", cat.id, cat.name, u8::from(cat.is_thing));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PanopticSegmentation {
        PanopticSegmentation {
            h: 2,
            w: 3,
            id_map: vec![1, 1, 0, 2, 2, 2],
            segments: vec![
                SegmentInfo { id: 1, category_id: 7, is_thing: true },
                SegmentInfo { id: 2, category_id: 3, is_thing: false },
            ],
        }
    }

    #[test]
    fn round_trips_segmentations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.lseg");
        let seg = sample();
        write_lseg(&path, &seg).unwrap();
        assert_eq!(read_lseg(&path).unwrap(), seg);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let short_row = "2 3\n1\n1 7 1\n1 1 0\n1 1\n";
        let err = parse_lseg(short_row).unwrap_err();
        assert!(format!("{err:#}").contains("line 5"), "{err:#}");

        let bad_header = "2 x\n0\n0 0\n0 0\n";
        let err = parse_lseg(bad_header).unwrap_err();
        assert!(format!("{err:#}").contains("line 1"), "{err:#}");

        let bad_flag = "1 1\n1\n1 2 7\n1\n";
        let err = parse_lseg(bad_flag).unwrap_err();
        assert!(format!("{err:#}").contains("line 3"), "{err:#}");
    }

    #[test]
    fn categories_round_trip_and_reject_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cats.csv");
        fs::write(&path, "id,name,is_thing\n1,wall,0\n2,person,1\n").unwrap();
        let table = read_categories(&path).unwrap();
        assert_eq!(table.len(), 2);
        assert!(!table.by_id(1).unwrap().is_thing);
        assert!(table.by_id(2).unwrap().is_thing);

        write_categories(&path, &table).unwrap();
        assert_eq!(read_categories(&path).unwrap().len(), 2);

        fs::write(&path, "1,wall\n").unwrap();
        let err = read_categories(&path).unwrap_err();
        assert!(format!("{err:#}").contains("line 1"), "{err:#}");
    }
}
