//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each and exits nonzero if any failed.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use difftrack::io::tck::{parse_tracks, tracks_to_bytes};
use difftrack::metrics::DEFAULT_RANKS;
use difftrack::{
    cartesian_to_angles, find_peaks_batch, gradcheck, hausdorff, percentile_report, propagate_batch,
    propagate_bidirectional, random_coefficients, random_volume, sample_directions, sample_seeds,
    track_sequential_reference, Affine, BinaryMask, FodVolume, GradcheckConfig, NewtonConstants, SeedBatch, ShBasis,
    Streamline, SynthKind, SynthParams, TerminationReason, TrackingParams, Vec3,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn angle_deg(a: Vec3, b: Vec3) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos().to_degrees()
}

fn normalize(v: Vec3) -> Vec3 {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = dot(v, v);
        if n > 1e-4 && n <= 1.0 {
            return normalize(v);
        }
    }
}

/// A unit vector at `angle` radians from `u` in a random direction.
fn tilt(u: Vec3, angle: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    let mut w = random_unit(rng);
    while dot(w, u).abs() > 0.9 {
        w = random_unit(rng);
    }
    let e = normalize(cross(u, w));
    let (s, c) = angle.sin_cos();
    normalize([c * u[0] + s * e[0], c * u[1] + s * e[1], c * u[2] + s * e[2]])
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    dot(d, d).sqrt()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn check<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// 1 -------------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    // Oblique lobe: along the z axis every direction sits at the pole of the
    // angle chart, where the step is ill-conditioned and central differences
    // at h = 1e-4 only resolve small partials to a few parts in 1e4.
    let axis = normalize([1.0, 0.5, 0.3]);
    let sp = SynthParams {
        kind: SynthKind::SingleLobe,
        dims: [16, 16, 16],
        lmax: 8,
        axis,
        ..Default::default()
    };
    let vol = check(sp.volume())?;
    let mask = check(sp.full_mask())?;
    let params = TrackingParams {
        step_size: 0.5,
        max_points: 25,
        min_length: 0.0,
        ..Default::default()
    };
    let k = NewtonConstants::default();
    let config = GradcheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut partials, mut excluded, mut steps_min) = (0.0f64, 0, 0, usize::MAX);
    for i in 0..10 {
        let seed: Vec3 = std::array::from_fn(|j| 7.5 - 6.0 * axis[j] + rng.random_range(-1.5..1.5));
        let dir = tilt(axis, rng.random_range(0.0..15f64.to_radians()), &mut rng);
        let pre = check(propagate_batch(
            &vol,
            &mask,
            &check(SeedBatch::new(vec![seed], vec![dir]))?,
            &params,
            &k,
        ))?;
        let last = pre.valid_lengths[0] - 1;
        steps_min = steps_min.min(last);
        ensure(last >= 20, || format!("seed {i}: only {last} steps"))?;
        let r = check(gradcheck(&vol, &mask, seed, dir, last, i % 3, &params, &k, &config))?;
        ensure(!r.entries.is_empty(), || format!("seed {i}: no partials"))?;
        worst = worst.max(r.max_rel_err);
        partials += r.entries.len();
        excluded += r.excluded.len();
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "max rel_err {worst:.2e} over {partials} partials ({excluded} excluded), >= {steps_min} steps, {:.1} s",
        elapsed.as_secs_f64()
    );
    ensure(worst <= 1e-4 && elapsed <= Duration::from_secs(300), || detail.clone())?;
    Ok(detail)
}

// 2 -------------------------------------------------------------------------

fn fibonacci(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), r * t.sin(), z]
        })
        .collect()
}

fn amp(basis: &ShBasis, c: &[f64], d: Vec3) -> f64 {
    let a = cartesian_to_angles(d).unwrap();
    basis.eval(a.el, a.az).iter().zip(c).map(|(y, c)| y * c).sum()
}

/// Dense-grid maximum refined by a shrinking tangent-plane pattern search.
fn grid_maximum(basis: &ShBasis, grid: &[Vec3], rows: &[Vec<f64>], c: &[f64]) -> Vec3 {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, row) in rows.iter().enumerate() {
        let v: f64 = row.iter().zip(c).map(|(y, c)| y * c).sum();
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    let mut u = grid[best];
    let mut r = 1f64.to_radians();
    while r > 1e-9 {
        let e1 = normalize(cross(
            u,
            if u[0].abs() < 0.9 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 1.0, 0.0]
            },
        ));
        let e2 = cross(u, e1);
        let mut moved = false;
        for (a, b) in [
            (1.0, 0.0),
            (-1.0, 0.0),
            (0.0, 1.0),
            (0.0, -1.0),
            (0.7, 0.7),
            (-0.7, 0.7),
            (0.7, -0.7),
            (-0.7, -0.7),
        ] {
            let v = normalize(std::array::from_fn(|i| u[i] + r * (a * e1[i] + b * e2[i])));
            let val = amp(basis, c, v);
            if val > best_v {
                best_v = val;
                u = v;
                moved = true;
            }
        }
        if !moved {
            r *= 0.5;
        }
    }
    u
}

fn peak_oracle() -> Outcome {
    let n = 1000;
    let lmax = 8;
    let basis = check(ShBasis::new(lmax))?;
    let grid = fibonacci(40_000);
    let rows: Vec<Vec<f64>> = grid
        .par_iter()
        .map(|&d| {
            let a = cartesian_to_angles(d).unwrap();
            basis.eval(a.el, a.az)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let fods: Vec<Vec<f64>> = (0..n)
        .map(|_| random_coefficients(lmax, 0.02, &mut rng).unwrap())
        .collect();
    let maxima: Vec<Vec3> = fods.par_iter().map(|c| grid_maximum(&basis, &grid, &rows, c)).collect();
    let inits: Vec<Vec3> = maxima
        .iter()
        .map(|&m| tilt(m, rng.random_range(0.0..20f64.to_radians()), &mut rng))
        .collect();

    let dims = [10, 10, 10];
    let vol = check(FodVolume::new(dims, lmax, fods.concat(), [1.0; 3], Affine::identity()))?;
    let positions: Vec<Vec3> = (0..n)
        .map(|i| [(i % 10) as f64, ((i / 10) % 10) as f64, (i / 100) as f64])
        .collect();
    let t = Instant::now();
    let batch = check(find_peaks_batch(&vol, &positions, &inits, &NewtonConstants::default()))?;
    let elapsed = t.elapsed();
    let within = batch
        .directions
        .iter()
        .zip(&maxima)
        .filter(|(d, m)| angle_deg(**d, **m) <= 0.5)
        .count();
    let frac = within as f64 / n as f64;
    let detail = format!(
        "{within}/{n} within 0.5 deg ({:.1}%), batched Newton {:.2} s",
        100.0 * frac,
        elapsed.as_secs_f64()
    );
    ensure(frac >= 0.99 && elapsed <= Duration::from_secs(60), || detail.clone())?;
    Ok(detail)
}

// 3 -------------------------------------------------------------------------

fn equivalence_case(
    vol: &FodVolume,
    mask: &BinaryMask,
    seeds: &SeedBatch,
    p: &TrackingParams,
    counts: &mut [usize; 6],
) -> Result<usize, String> {
    let k = NewtonConstants::default();
    let b = check(propagate_batch(vol, mask, seeds, p, &k))?;
    for i in 0..seeds.len() {
        let r = check(track_sequential_reference(
            vol,
            mask,
            seeds.positions[i],
            seeds.directions[i],
            p,
            &k,
        ))?;
        ensure(r.reason == b.termination_reasons[i], || {
            format!(
                "seed {i}: reference {} vs batched {}",
                r.reason, b.termination_reasons[i]
            )
        })?;
        let same = r.points.len() == b.valid_lengths[i]
            && r.points
                .iter()
                .zip(b.valid(i))
                .all(|(a, c)| a.map(f64::to_bits) == c.map(f64::to_bits));
        ensure(same, || format!("seed {i}: valid prefixes differ"))?;
        counts[TerminationReason::ALL.iter().position(|x| *x == r.reason).unwrap()] += 1;
    }
    Ok(seeds.len())
}

fn batched_scalar_equivalence() -> Outcome {
    let mut counts = [0usize; 6];
    let mut total = 0;

    let bent = SynthParams {
        kind: SynthKind::BentLobe,
        dims: [24, 12, 12],
        axis: [1.0, 0.3, 0.2],
        bend_start: 6,
        bend_rate: 0.2,
        amplitude_slope: 0.02,
        ..Default::default()
    };
    let vol = check(bent.volume())?;
    let mask = BinaryMask::from_fn(bent.dims, check(bent.affine())?, |v| v[0] <= 18 && v[1] >= 1);
    let mut pos = check(sample_seeds(&mask, 390, 31))?;
    pos.extend((0..10).map(|i| [-3.0 + i as f64, 30.0, 5.0]));
    let seeds = check(SeedBatch::new(pos, sample_directions(400, 31)))?;
    let p = TrackingParams {
        step_size: 0.5,
        amplitude_threshold: 0.3,
        angle_threshold: 12f64.to_radians(),
        max_points: 60,
        min_length: 0.0,
        ..Default::default()
    };
    total += equivalence_case(&vol, &mask, &seeds, &p, &mut counts)?;

    let vol = check(random_volume([10, 10, 10], 6, 0.03, 32))?;
    let mask = BinaryMask::from_fn([10, 10, 10], Affine::identity(), |v| {
        v.iter().all(|&c| (1..9).contains(&c))
    });
    let seeds = check(SeedBatch::new(
        check(sample_seeds(&mask, 400, 33))?,
        sample_directions(400, 33),
    ))?;
    let p = TrackingParams {
        step_size: 0.7,
        amplitude_threshold: 0.15,
        angle_threshold: 35f64.to_radians(),
        max_points: 30,
        min_length: 0.0,
        ..Default::default()
    };
    total += equivalence_case(&vol, &mask, &seeds, &p, &mut counts)?;

    let cross = SynthParams {
        kind: SynthKind::TwoCrossing,
        dims: [12, 12, 12],
        axis: [0.0, 0.3, 1.0],
        ..Default::default()
    };
    let vol = check(cross.volume())?;
    let mask = check(cross.full_mask())?;
    let seeds = check(SeedBatch::new(
        check(sample_seeds(&mask, 200, 34))?,
        sample_directions(200, 34),
    ))?;
    let p = TrackingParams {
        max_points: 9,
        min_length: 0.0,
        ..Default::default()
    };
    total += equivalence_case(&vol, &mask, &seeds, &p, &mut counts)?;

    let hist: Vec<String> = TerminationReason::ALL
        .iter()
        .zip(counts)
        .map(|(r, c)| format!("{r} {c}"))
        .collect();
    ensure(total == 1000, || format!("{total} seeds"))?;
    Ok(format!("{total}/1000 seeds bit-identical ({})", hist.join(", ")))
}

// 4 -------------------------------------------------------------------------

fn straight_field() -> Outcome {
    let mut worst = 0.0f64;
    let mut lines = 0;
    for (axis, dims) in [([1.0, 0.0, 0.0], [112, 6, 6]), ([1.0, 0.2, 0.1], [112, 30, 16])] {
        let axis = normalize(axis);
        let sp = SynthParams {
            kind: SynthKind::SingleLobe,
            dims,
            axis,
            origin: [-20.0, 5.0, 1.5],
            ..Default::default()
        };
        let vol = check(sp.volume())?;
        let mask = check(sp.full_mask())?;
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let pos: Vec<Vec3> = (0..50)
            .map(|_| {
                let v = [
                    rng.random_range(1.0..7.0),
                    rng.random_range(1.0..4.0),
                    rng.random_range(1.0..4.0),
                ];
                vol.voxel_to_world(v)
            })
            .collect();
        let seeds = check(SeedBatch::new(pos, vec![axis; 50]))?;
        let p = TrackingParams {
            step_size: 1.0,
            max_points: 101,
            min_length: 0.0,
            ..Default::default()
        };
        let b = check(propagate_batch(&vol, &mask, &seeds, &p, &NewtonConstants::default()))?;
        for i in 0..seeds.len() {
            ensure(b.valid_lengths[i] == 101, || {
                format!("line {i} has {} points", b.valid_lengths[i])
            })?;
            let x0 = seeds.positions[i];
            for (t, q) in b.valid(i).iter().enumerate() {
                let expect = std::array::from_fn(|c| x0[c] + t as f64 * axis[c]);
                worst = worst.max(dist(*q, expect));
            }
            lines += 1;
        }
    }
    let detail = format!("{lines} lines of 100 steps, max deviation {worst:.2e} mm");
    ensure(worst <= 1e-6, || detail.clone())?;
    Ok(detail)
}

// 5 -------------------------------------------------------------------------

struct Case {
    name: &'static str,
    vol: FodVolume,
    mask: BinaryMask,
    params: TrackingParams,
    seeds: Vec<Vec3>,
    dir: Vec3,
    expect: Box<dyn Fn(Vec3) -> (TerminationReason, usize)>,
}

fn straight_x(dims: [usize; 3], slope: f64) -> SynthParams {
    SynthParams {
        kind: SynthKind::SingleLobe,
        dims,
        axis: [1.0, 0.0, 0.0],
        amplitude_slope: slope,
        ..Default::default()
    }
}

fn base_params() -> TrackingParams {
    TrackingParams {
        step_size: 1.0,
        max_points: 40,
        min_length: 0.0,
        ..Default::default()
    }
}

/// Seeds at integer x with fractional y and z.
fn seeds_at(xs: &[f64]) -> Vec<Vec3> {
    let mut v = Vec::new();
    for &x in xs {
        for (y, z) in [(2.0, 2.0), (1.3, 2.6), (2.75, 1.1)] {
            v.push([x, y, z]);
        }
    }
    v
}

fn termination_cases() -> Result<Vec<Case>, String> {
    let mut cases = Vec::new();

    // Mask ends after voxel column 7: last point x = 7 (rounding keeps 7.4).
    let sp = straight_x([20, 5, 5], 0.0);
    cases.push(Case {
        name: "ExitMask",
        vol: check(sp.volume())?,
        mask: BinaryMask::from_fn(sp.dims, check(sp.affine())?, |v| v[0] <= 7),
        params: base_params(),
        seeds: seeds_at(&[1.0, 2.0, 4.4]),
        dir: [1.0, 0.0, 0.0],
        expect: Box::new(|s| {
            let last = (7.5 - s[0]).ceil() as usize - 1;
            (TerminationReason::ExitMask, last + 1)
        }),
    });

    // Image ends at x = 9; a point in (9, 9.5) is still in the mask and the
    // next check leaves the image.
    let sp = straight_x([10, 5, 5], 0.0);
    cases.push(Case {
        name: "ExitImage",
        vol: check(sp.volume())?,
        mask: check(sp.full_mask())?,
        params: base_params(),
        seeds: seeds_at(&[1.25, 0.3, 3.1]),
        dir: [1.0, 0.0, 0.0],
        expect: Box::new(|s| {
            // first t with x0 + t > 9; that point is kept since x0 + t < 9.5
            let t = (9.0 - s[0]).floor() as usize + 1;
            (TerminationReason::ExitImage, t + 1)
        }),
    });

    // Amplitude falls as 1 - 0.05 x; cutoff 0.6 is crossed at x = 8.
    let sp = straight_x([20, 5, 5], 0.05);
    cases.push(Case {
        name: "Model",
        vol: check(sp.volume())?,
        mask: check(sp.full_mask())?,
        params: TrackingParams {
            amplitude_threshold: 0.6,
            ..base_params()
        },
        seeds: seeds_at(&[2.3, 0.5, 5.9]),
        dir: [1.0, 0.0, 0.0],
        expect: Box::new(|s| {
            let t = (0..).find(|&t| 1.0 - 0.05 * (s[0] + t as f64) < 0.6).unwrap();
            (TerminationReason::Model, t + 1)
        }),
    });

    // The lobe turns by 0.3 rad (17.2 deg) between columns 8 and 9.
    let sp = SynthParams {
        kind: SynthKind::BentLobe,
        dims: [16, 6, 6],
        axis: [1.0, 0.0, 0.0],
        bend_start: 8,
        bend_rate: 0.3,
        ..Default::default()
    };
    cases.push(Case {
        name: "HighCurvature",
        vol: check(sp.volume())?,
        mask: check(sp.full_mask())?,
        params: TrackingParams {
            angle_threshold: 10f64.to_radians(),
            ..base_params()
        },
        seeds: seeds_at(&[3.0, 5.0, 8.0]),
        dir: [1.0, 0.0, 0.0],
        expect: Box::new(|s| (TerminationReason::HighCurvature, (9.0 - s[0]) as usize + 1)),
    });

    let sp = straight_x([30, 5, 5], 0.0);
    cases.push(Case {
        name: "LengthExceed",
        vol: check(sp.volume())?,
        mask: check(sp.full_mask())?,
        params: TrackingParams {
            max_points: 7,
            ..base_params()
        },
        seeds: seeds_at(&[1.0, 4.5, 9.2]),
        dir: [1.0, 0.0, 0.0],
        expect: Box::new(|_| (TerminationReason::LengthExceed, 7)),
    });

    cases.push(Case {
        name: "SeedRejected",
        vol: check(sp.volume())?,
        mask: check(sp.full_mask())?,
        params: TrackingParams {
            amplitude_threshold: 1.5,
            ..base_params()
        },
        seeds: seeds_at(&[1.0, 4.5, 9.2]),
        dir: [1.0, 0.0, 0.0],
        expect: Box::new(|_| (TerminationReason::SeedRejected, 1)),
    });
    Ok(cases)
}

fn termination_coverage() -> Outcome {
    let k = NewtonConstants::default();
    let mut total = 0;
    let mut summary = Vec::new();
    for case in termination_cases()? {
        let n = case.seeds.len();
        let seeds = check(SeedBatch::new(case.seeds.clone(), vec![case.dir; n]))?;
        let b = check(propagate_batch(&case.vol, &case.mask, &seeds, &case.params, &k))?;
        for i in 0..n {
            let (reason, len) = (case.expect)(case.seeds[i]);
            ensure(b.termination_reasons[i] == reason && b.valid_lengths[i] == len, || {
                format!(
                    "{} seed {:?}: got {} at L={}, expected {reason} at L={len}",
                    case.name, case.seeds[i], b.termination_reasons[i], b.valid_lengths[i]
                )
            })?;
        }
        total += n;
        summary.push(case.name);
    }
    Ok(format!(
        "{total}/{total} reason and index matches ({})",
        summary.join(", ")
    ))
}

// 6 -------------------------------------------------------------------------

fn padding_contract() -> Outcome {
    let pool: Vec<FodVolume> = (0..16)
        .map(|s| {
            let v = random_volume([7, 6, 5], 4, 0.03, 600 + s).unwrap();
            // shift the grid so no valid point sits at the world origin
            FodVolume::new(
                v.dims(),
                v.lmax(),
                v.coeffs().to_vec(),
                [1.0; 3],
                Affine::scaling([1.0; 3], [10.0, 20.0, 30.0]).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let runs = 10_000;
    let failures: Vec<String> = (0..runs as u64)
        .into_par_iter()
        .filter_map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(run);
            let vol = &pool[rng.random_range(0..pool.len())];
            let lo: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..2));
            let mask = BinaryMask::from_fn(vol.dims(), vol.affine().clone(), |v| (0..3).all(|i| v[i] >= lo[i]));
            let n = rng.random_range(1..8);
            let seeds = SeedBatch::new(sample_seeds(&mask, n, run).unwrap(), sample_directions(n, run)).unwrap();
            let step = rng.random_range(0.1..1.6);
            let p = TrackingParams {
                step_size: step,
                amplitude_threshold: rng.random_range(0.0..0.5),
                angle_threshold: rng.random_range(5.0..90.0f64).to_radians(),
                max_points: rng.random_range(2..25),
                min_length: 0.0,
                max_length: 1e3,
                bidirectional: rng.random_bool(0.5),
                rng_seed: run,
            };
            let k = NewtonConstants::default();
            let b = if p.bidirectional {
                propagate_bidirectional(vol, &mask, &seeds, &p, &k)
            } else {
                propagate_batch(vol, &mask, &seeds, &p, &k)
            };
            let b = match b {
                Ok(b) => b,
                Err(e) => return Some(format!("run {run}: {e}")),
            };
            let stride = if p.bidirectional {
                2 * p.max_points - 1
            } else {
                p.max_points
            };
            if b.stride != stride || b.points.len() != n * stride {
                return Some(format!("run {run}: shape {} x {}", b.len(), b.stride));
            }
            for i in 0..n {
                let l = b.valid_lengths[i];
                let zero_at = |q: &Vec3| *q == [0.0; 3];
                let row = b.row(i);
                let bad_pad = row.iter().enumerate().any(|(j, q)| zero_at(q) != (j >= l));
                if bad_pad {
                    return Some(format!("run {run} streamline {i}: padding does not start at L={l}"));
                }
                if let Some(w) = b.valid(i).windows(2).find(|w| (dist(w[0], w[1]) - step).abs() > 1e-9) {
                    return Some(format!("run {run} streamline {i}: spacing {}", dist(w[0], w[1])));
                }
            }
            None
        })
        .collect();
    ensure(failures.is_empty(), || {
        format!("{} failures, first: {}", failures.len(), failures[0])
    })?;
    Ok(format!("{runs} random runs, no violations"))
}

// 7 -------------------------------------------------------------------------

fn brute_hausdorff(a: &Streamline, b: &Streamline) -> f64 {
    let one = |x: &Streamline, y: &Streamline| {
        x.points()
            .iter()
            .map(|p| y.points().iter().map(|q| dist(*p, *q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one(a, b).max(one(b, a))
}

fn random_polyline(rng: &mut ChaCha8Rng) -> Streamline {
    let n = rng.random_range(1..150);
    let mut p = [
        rng.random_range(-50.0..50.0),
        rng.random_range(-50.0..50.0),
        rng.random_range(-50.0..50.0),
    ];
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        pts.push(p);
        let d = random_unit(rng);
        p = std::array::from_fn(|i| p[i] + d[i] * rng.random_range(0.1..2.0));
    }
    Streamline::new(pts).unwrap()
}

fn hausdorff_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let mut dists = Vec::new();
    for _ in 0..1000 {
        let a = random_polyline(&mut rng);
        let b = random_polyline(&mut rng);
        let h = hausdorff(&a, &b);
        worst = worst.max((h - brute_hausdorff(&a, &b)).abs());
        ensure(hausdorff(&a, &a) == 0.0, || "identity pair is nonzero".into())?;
        dists.push(h);
    }
    let report = check(percentile_report(&dists, &DEFAULT_RANKS))?;
    let mut sorted = dists.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &p in &DEFAULT_RANKS {
        let rank = ((p as f64 / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
        ensure(report.percentiles[&p] == sorted[rank - 1], || {
            format!("p{p} differs from the sorted oracle")
        })?;
    }
    let id = check(percentile_report(&[0.0; 10], &DEFAULT_RANKS))?;
    ensure(id.percentiles.values().all(|&v| v == 0.0), || {
        "identity percentiles nonzero".into()
    })?;
    let detail = format!("1000 pairs, max |fast - brute| {worst:.1e} mm, percentiles match the sort oracle");
    ensure(worst <= 1e-12, || detail.clone())?;
    Ok(detail)
}

// 8 -------------------------------------------------------------------------

/// Reader written from the published tck description alone: key/value header
/// lines up to END, then float32 triplets with NaN separators up to an Inf
/// terminator.
fn grammar_reader(bytes: &[u8]) -> Option<Vec<Vec<[f32; 3]>>> {
    let text_end = bytes.windows(4).position(|w| w == b"END\n")? + 4;
    let text = std::str::from_utf8(&bytes[..text_end]).ok()?;
    let mut lines = text.lines();
    if lines.next()? != "mrtrix tracks" {
        return None;
    }
    let mut offset = None;
    let mut count = None;
    for l in lines {
        if let Some((k, v)) = l.split_once(':') {
            match k.trim() {
                "file" => offset = v.trim().strip_prefix('.')?.trim().parse::<usize>().ok(),
                "count" => count = v.trim().parse::<usize>().ok(),
                "datatype" if v.trim() != "Float32LE" => return None,
                _ => {}
            }
        }
    }
    let mut tracks = Vec::new();
    let mut cur = Vec::new();
    for c in bytes[offset?..].chunks_exact(12) {
        let v: [f32; 3] = std::array::from_fn(|i| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()));
        if v[0].is_infinite() {
            break;
        } else if v[0].is_nan() {
            tracks.push(std::mem::take(&mut cur));
        } else {
            cur.push(v);
        }
    }
    (tracks.len() == count?).then_some(tracks)
}

fn interchange() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut files = Vec::new();
    for n in [0usize, 1, 3, 17] {
        let s: Vec<Streamline> = (0..n)
            .map(|_| {
                let len = rng.random_range(1..40);
                let pts = (0..len)
                    .map(|_| std::array::from_fn(|_| rng.random_range(-120.0f32..120.0) as f64))
                    .collect();
                Streamline::new(pts).unwrap()
            })
            .collect();
        let bytes = tracks_to_bytes(&s);
        let back = check(parse_tracks(&bytes))?;
        let exact = back.len() == s.len()
            && back.iter().zip(&s).all(|(a, b)| {
                a.len() == b.len()
                    && a.points()
                        .iter()
                        .zip(b.points())
                        .all(|(p, q)| p.map(f64::to_bits) == q.map(f64::to_bits))
            });
        ensure(exact, || format!("{n}-streamline file did not round-trip"))?;
        ensure(tracks_to_bytes(&back) == bytes, || {
            "rewrite is not byte-identical".into()
        })?;
        let third = grammar_reader(&bytes).ok_or("grammar reader rejected our file")?;
        let same = third.len() == s.len()
            && third
                .iter()
                .zip(&s)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b.points()).all(|(p, q)| p.map(f64::from) == *q));
        ensure(same, || "grammar reader disagrees".into())?;
        files.push((s, bytes));
    }

    // Corruptions no writer output can match: truncations and bit flips in
    // header text or sentinel triplets.
    let (mut rejected, mut tried) = (0, 0);
    let mut escaped = Vec::new();
    for i in 0..1000 {
        let (s, good) = &files[1 + i % 3];
        let header_len = good.windows(4).position(|w| w == b"END\n").unwrap() + 4;
        let mut sentinel_bytes: Vec<usize> = Vec::new();
        let mut at = header_len;
        for t in s {
            at += 12 * t.len();
            sentinel_bytes.extend(at..at + 12);
            at += 12;
        }
        sentinel_bytes.extend(at..at + 12);
        let bad = if i % 2 == 0 {
            good[..rng.random_range(0..good.len())].to_vec()
        } else {
            let pos = if rng.random_bool(0.5) {
                rng.random_range(0..header_len)
            } else {
                sentinel_bytes[rng.random_range(0..sentinel_bytes.len())]
            };
            let mut b = good.clone();
            b[pos] ^= 1 << rng.random_range(0..8);
            b
        };
        tried += 1;
        match panic::catch_unwind(|| parse_tracks(&bad)) {
            Ok(Err(_)) => rejected += 1,
            Ok(Ok(_)) => escaped.push(format!("corruption {i} accepted")),
            Err(_) => escaped.push(format!("corruption {i} panicked")),
        }
    }
    // arbitrary flips anywhere must not crash (payload flips may stay valid)
    let mut crashes = 0;
    for i in 0..1000 {
        let (_, good) = &files[1 + i % 3];
        let mut b = good.clone();
        let pos = rng.random_range(0..b.len());
        b[pos] ^= 1 << rng.random_range(0..8);
        if panic::catch_unwind(|| parse_tracks(&b)).is_err() {
            crashes += 1;
        }
    }
    ensure(escaped.is_empty() && crashes == 0, || {
        format!(
            "{} escaped ({}), {crashes} crashes",
            escaped.len(),
            escaped.first().cloned().unwrap_or_default()
        )
    })?;
    Ok(format!(
        "round trips exact, grammar reader agrees, {rejected}/{tried} corruptions rejected, no crashes"
    ))
}

// 9 -------------------------------------------------------------------------

fn cli(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["difftrack"];
    full.extend_from_slice(args);
    let code = difftrack_cli::run(full, &mut out, &mut err);
    if code != 0 {
        return Err(format!("exit {code}: {}", String::from_utf8_lossy(&err)));
    }
    Ok(String::from_utf8_lossy(&out).into_owned())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |f: &str| dir.path().join(f).to_string_lossy().into_owned();
    let (fod, mask) = (p("fod.nii"), p("mask.nii"));
    cli(&[
        "synth",
        "--kind",
        "bent-lobe",
        "--dims",
        "24,14,14",
        "--axis",
        "1,0.4,0.3",
        "--bend-start",
        "6",
        "--bend-rate",
        "6",
        "--out",
        &fod,
        "--mask-out",
        &mask,
    ])?;
    let mut outputs = Vec::new();
    for (threads, bidi) in [
        ("1", false),
        ("4", false),
        ("1", false),
        ("3", false),
        ("1", true),
        ("4", true),
    ] {
        let out = p(&format!("t{}.tck", outputs.len()));
        let mut args = vec![
            "--threads",
            threads,
            "track",
            "--fod",
            &fod,
            "--mask",
            &mask,
            "--n",
            "500",
            "--rng",
            "1234",
            "--step",
            "0.5",
            "--minlen",
            "2",
            "--maxlen",
            "30",
            "--angle",
            "30",
            "--out",
            &out,
        ];
        if bidi {
            args.push("--bidirectional");
        }
        cli(&args)?;
        outputs.push((bidi, std::fs::read(&out).map_err(|e| e.to_string())?));
    }
    let uni: Vec<&Vec<u8>> = outputs.iter().filter(|o| !o.0).map(|o| &o.1).collect();
    let bi: Vec<&Vec<u8>> = outputs.iter().filter(|o| o.0).map(|o| &o.1).collect();
    ensure(uni.windows(2).all(|w| w[0] == w[1]), || {
        "unidirectional outputs differ".into()
    })?;
    ensure(bi.windows(2).all(|w| w[0] == w[1]), || {
        "bidirectional outputs differ".into()
    })?;
    let kept = check(parse_tracks(uni[0]))?.len();
    ensure(kept > 0, || "no streamlines kept".into())?;
    Ok(format!(
        "6 runs over 1, 3 and 4 threads byte-identical ({kept} streamlines)"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("peak-finding oracle", peak_oracle),
        ("batched/scalar equivalence", batched_scalar_equivalence),
        ("straight-field exactness", straight_field),
        ("termination coverage", termination_coverage),
        ("padding/shape contract", padding_contract),
        ("Hausdorff oracle", hausdorff_oracle),
        ("interchange", interchange),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let t = Instant::now();
        let r = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {} {name}: PASS ({d}) [{secs:.1} s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({d}) [{secs:.1} s]", i + 1);
            }
        }
    }
    let _ = panic::take_hook();
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
