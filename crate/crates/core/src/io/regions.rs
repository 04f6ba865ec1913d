//! Annotated region files: one `image_id x0 y0 x1 y1 class_id` line per
//! region, coordinates normalized to `[0, 1]`.

use crate::error::{Error, Result};
use crate::region::RegionBox;

const WHAT: &str = "regions file";

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedRegion {
    pub image: usize,
    pub bx: RegionBox,
    pub class: usize,
}

pub fn parse(text: &str) -> Result<Vec<AnnotatedRegion>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let n = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { what: WHAT, line: n, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, got {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad integer `{s}`")));
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number `{s}`")));
        let bx = RegionBox::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?).map_err(|e| err(e.to_string()))?;
        out.push(AnnotatedRegion {
            image: int(f[0])?,
            bx,
            class: int(f[5])?,
        });
    }
    Ok(out)
}

pub fn format(regions: &[AnnotatedRegion]) -> String {
    regions
        .iter()
        .map(|r| format!("{} {} {} {} {} {}\n", r.image, r.bx.x0, r.bx.y0, r.bx.x1, r.bx.y1, r.class))
        .collect()
}
