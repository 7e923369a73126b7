use std::io::Write;
use std::path::PathBuf;

use anyhow::bail;
use clap::Args;
use difftrack::io::{load_tracks, save_distances};
use difftrack::metrics::{pairwise_hausdorff, DEFAULT_RANKS};
use difftrack::percentile_report;

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Pair only the first min(count_a, count_b) streamlines.
    #[arg(long)]
    pub crop_to_shorter: bool,
    /// Per-pair distance table.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &CompareArgs, out: &mut dyn Write) -> anyhow::Result<bool> {
    let mut a = load_tracks(&args.a)?;
    let mut b = load_tracks(&args.b)?;
    if a.len() != b.len() {
        if !args.crop_to_shorter {
            bail!(
                "{} holds {} streamlines but {} holds {}; pass --crop-to-shorter to pair the first {}",
                args.a.display(),
                a.len(),
                args.b.display(),
                b.len(),
                a.len().min(b.len())
            );
        }
        let n = a.len().min(b.len());
        a.truncate(n);
        b.truncate(n);
    }
    let d = pairwise_hausdorff(&a, &b)?;
    save_distances(&args.out, &d)?;
    writeln!(out, "pairs: {}", d.len())?;
    if d.is_empty() {
        return Ok(true);
    }
    let r = percentile_report(&d, &DEFAULT_RANKS)?;
    for (p, v) in &r.percentiles {
        writeln!(out, "p{p}: {v} mm")?;
    }
    writeln!(out, "below 1 mm: {}", r.below_1mm)?;
    Ok(true)
}
