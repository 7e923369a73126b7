use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use difftrack::io::{load_mask, load_seeds, load_volume, save_seeds, save_tracks};
use difftrack::{
    crop_to_valid_indexed, propagate_parallel, sample_directions, sample_seeds, BinaryMask, FodVolume, NewtonConstants,
    SeedBatch, Streamline, TerminationReason, TrackingParams,
};

use crate::args::TrackingFlags;

/// Seeds tracked per parallel work item.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Args)]
pub struct TrackArgs {
    /// FOD image (4-D float32 NIfTI).
    #[arg(long)]
    pub fod: PathBuf,
    /// Tracking mask.
    #[arg(long)]
    pub mask: PathBuf,
    /// Seed table (index,x,y,z,dx,dy,dz) instead of random seeding.
    #[arg(long, conflicts_with_all = ["n", "seed_mask", "retry_until_n"])]
    pub seeds: Option<PathBuf>,
    /// Number of random seeds.
    #[arg(long, required_unless_present = "seeds")]
    pub n: Option<usize>,
    /// Mask to draw random seeds from (defaults to the tracking mask).
    #[arg(long)]
    pub seed_mask: Option<PathBuf>,
    #[command(flatten)]
    pub tracking: TrackingFlags,
    /// Random seed for seed positions and directions.
    #[arg(long, default_value_t = 0)]
    pub rng: u64,
    /// Output track file.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the seeds that were tracked to this table.
    #[arg(long)]
    pub save_seeds: Option<PathBuf>,
    /// Draw further seed batches until --n streamlines are kept.
    #[arg(long)]
    pub retry_until_n: bool,
    /// Batches drawn before --retry-until-n gives up.
    #[arg(long, default_value_t = 100)]
    pub max_rounds: usize,
}

/// Seed for retry round `r`; round 0 uses the base seed itself.
fn round_seed(base: u64, r: usize) -> u64 {
    base ^ (r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct Outcome {
    kept: Vec<Streamline>,
    tried: SeedBatch,
    counts: Vec<usize>,
    backward_counts: Option<Vec<usize>>,
}

impl Outcome {
    /// Tracks `seeds` and records the results. With a target `limit`, seeds
    /// after the one that produced the last needed streamline are dropped.
    fn track(
        &mut self,
        seeds: SeedBatch,
        limit: Option<usize>,
        fod: &FodVolume,
        mask: &BinaryMask,
        params: &TrackingParams,
        k: &NewtonConstants,
    ) -> anyhow::Result<()> {
        let batch = propagate_parallel(fod, mask, &seeds, params, k, CHUNK)?;
        let kept = crop_to_valid_indexed(&batch, params);
        let used = match limit {
            Some(need) if kept.len() >= need => kept[need - 1].0 + 1,
            _ => seeds.len(),
        };
        tally(&mut self.counts, &batch.termination_reasons[..used]);
        if let (Some(c), Some(b)) = (self.backward_counts.as_mut(), batch.backward_reasons.as_ref()) {
            tally(c, &b[..used]);
        }
        self.kept
            .extend(kept.into_iter().filter(|(i, _)| *i < used).map(|(_, s)| s));
        self.tried.positions.extend_from_slice(&seeds.positions[..used]);
        self.tried.directions.extend_from_slice(&seeds.directions[..used]);
        self.tried.accepted.extend_from_slice(&seeds.accepted[..used]);
        Ok(())
    }
}

fn tally(counts: &mut [usize], reasons: &[TerminationReason]) {
    for r in reasons {
        counts[TerminationReason::ALL.iter().position(|x| x == r).unwrap()] += 1;
    }
}

pub fn run(a: &TrackArgs, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<bool> {
    let fod = load_volume(&a.fod)?;
    let mask = load_mask(&a.mask)?;
    mask.check_compatible(&fod)
        .context("tracking mask does not match the FOD image")?;
    let params = a.tracking.params(a.rng);
    params.validate()?;
    let k = NewtonConstants::default();

    let mut o = Outcome {
        kept: Vec::new(),
        tried: SeedBatch::new(vec![], vec![])?,
        counts: vec![0; 6],
        backward_counts: params.bidirectional.then(|| vec![0; 6]),
    };
    if let Some(path) = &a.seeds {
        o.track(load_seeds(path)?, None, &fod, &mask, &params, &k)?;
    } else {
        let n = a.n.unwrap_or(0);
        let seed_mask = match &a.seed_mask {
            Some(p) => load_mask(p)?,
            None => mask.clone(),
        };
        let draw = |r: usize| -> anyhow::Result<SeedBatch> {
            let s = round_seed(a.rng, r);
            Ok(SeedBatch::new(
                sample_seeds(&seed_mask, n, s)?,
                sample_directions(n, s),
            )?)
        };
        if a.retry_until_n {
            if a.max_rounds == 0 {
                bail!("--max-rounds must be at least 1");
            }
            let mut r = 0;
            while o.kept.len() < n && r < a.max_rounds {
                let need = n - o.kept.len();
                o.track(draw(r)?, Some(need), &fod, &mask, &params, &k)?;
                r += 1;
            }
            if o.kept.len() < n {
                writeln!(
                    err,
                    "warning: kept {} of {n} streamlines after {r} seed batches",
                    o.kept.len()
                )?;
            }
        } else {
            o.track(draw(0)?, None, &fod, &mask, &params, &k)?;
        }
    }

    save_tracks(&a.out, &o.kept)?;
    if let Some(p) = &a.save_seeds {
        save_seeds(p, &o.tried)?;
    }
    writeln!(out, "seeds: {}", o.tried.len())?;
    writeln!(out, "kept: {}", o.kept.len())?;
    for (r, c) in TerminationReason::ALL.iter().zip(&o.counts) {
        writeln!(out, "{r}: {c}")?;
    }
    if let Some(b) = &o.backward_counts {
        for (r, c) in TerminationReason::ALL.iter().zip(b) {
            writeln!(out, "backward {r}: {c}")?;
        }
    }
    Ok(true)
}
