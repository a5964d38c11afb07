use std::collections::BTreeSet;
use std::path::Path;

use super::{EvalPair, MetricReport};
use crate::data::read_png;
use crate::{Error, Result};

fn pngs(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let name = e.map_err(|e| Error::file(dir, e))?.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            out.insert(name);
        }
    }
    Ok(out)
}

/// Scores a single image or every same-named PNG in two (or three)
/// directories. `original` feeds LOE; without it LOE compares against the
/// reference.
pub fn evaluate_paths(
    reference: &Path,
    candidate: &Path,
    original: Option<&Path>,
    metrics: &[&str],
) -> Result<MetricReport> {
    let mut report = MetricReport::new(metrics)?;
    let names: Vec<(String, std::path::PathBuf, std::path::PathBuf, Option<std::path::PathBuf>)> = if reference.is_dir()
    {
        let (r, c) = (pngs(reference)?, pngs(candidate)?);
        let unmatched: Vec<String> = r.symmetric_difference(&c).cloned().collect();
        if !unmatched.is_empty() {
            return Err(Error::Unmatched(unmatched));
        }
        r.into_iter()
            .map(|n| (n.clone(), reference.join(&n), candidate.join(&n), original.map(|o| o.join(&n))))
            .collect()
    } else {
        let id = reference.file_name().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        vec![(id, reference.to_path_buf(), candidate.to_path_buf(), original.map(Path::to_path_buf))]
    };
    for (id, r, c, o) in names {
        let (r, c) = (read_png(&r, 3)?, read_png(&c, 3)?);
        let o = o.map(|p| read_png(&p, 3)).transpose()?;
        report.push(id, &EvalPair { reference: &r, candidate: &c, original: o.as_ref() })?;
    }
    report.metadata.push(("reference".into(), reference.display().to_string()));
    report.metadata.push(("candidate".into(), candidate.display().to_string()));
    Ok(report)
}
