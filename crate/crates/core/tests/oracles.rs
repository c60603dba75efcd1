//! Library results checked against independent brute-force oracles.

use std::collections::{BTreeSet, VecDeque};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cavseg::evalstat::{box_stats, dice, jaccard, make_folds, wilcoxon_signed_rank, FoldMode, WilcoxonMethod};
use cavseg::pipeline::{largest_component, sample_patches, ChannelSelection, Connectivity, SamplerConfig};
use cavseg::volgrid::{coords, linear_index, Case, LabelMask, SequenceId, Volume3};

const N16: [usize; 3] = [16, 16, 16];

fn random_mask(dims: [usize; 3], density: f64, seed: u64) -> LabelMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let values = (0..n).map(|_| u8::from(rng.gen_bool(density))).collect();
    LabelMask::new(dims, values).unwrap()
}

fn neighbours(dims: [usize; 3], i: usize, full: bool) -> Vec<usize> {
    let [x, y, z] = coords(dims, i);
    let mut out = Vec::new();
    for dx in -1i64..=1 {
        for dy in -1i64..=1 {
            for dz in -1i64..=1 {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                if manhattan == 0 || (!full && manhattan != 1) {
                    continue;
                }
                let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if nx < 0 || ny < 0 || nz < 0 || nx >= dims[0] as i64 || ny >= dims[1] as i64 || nz >= dims[2] as i64 {
                    continue;
                }
                out.push(linear_index(dims, nx as usize, ny as usize, nz as usize));
            }
        }
    }
    out
}

/// BFS flood fill from every unvisited voxel in linear order; ties keep the
/// component found first.
fn flood_fill_largest(mask: &LabelMask, full: bool) -> Vec<u8> {
    let dims = mask.dims();
    let v = mask.values();
    let mut seen = vec![false; v.len()];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..v.len() {
        if v[start] == 0 || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            for j in neighbours(dims, i, full) {
                if v[j] != 0 && !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                    queue.push_back(j);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let mut out = vec![0u8; v.len()];
    for i in best {
        out[i] = 1;
    }
    out
}

fn is_single_component(mask: &LabelMask, full: bool) -> bool {
    let v = mask.values();
    let Some(start) = v.iter().position(|&x| x != 0) else {
        return true;
    };
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(i) = queue.pop_front() {
        for j in neighbours(mask.dims(), i, full) {
            if v[j] != 0 && seen.insert(j) {
                queue.push_back(j);
            }
        }
    }
    seen.len() == mask.count()
}

fn connectivity(full: bool) -> Connectivity {
    if full {
        Connectivity::TwentySix
    } else {
        Connectivity::Six
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn largest_component_matches_flood_fill(seed in any::<u64>(), density in 0.05f64..0.6, full in any::<bool>()) {
        let mask = random_mask(N16, density, seed);
        let got = largest_component(&mask, connectivity(full));
        prop_assert_eq!(got.values(), &flood_fill_largest(&mask, full)[..]);
        prop_assert!(got.values().iter().zip(mask.values()).all(|(&g, &m)| g <= m));
        prop_assert!(is_single_component(&got, full));
        prop_assert_eq!(&largest_component(&got, connectivity(full)), &got);
    }

    #[test]
    fn dice_jaccard_identity(seed in any::<u64>(), da in 0.0f64..0.5, db in 0.0f64..0.5) {
        let a = random_mask([7, 5, 6], da, seed);
        let b = random_mask([7, 5, 6], db, seed ^ 0xABCD);
        let d = dice(&a, &b).unwrap();
        let j = jaccard(&a, &b).unwrap();
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn folds_partition(n in 1usize..60, k in 1usize..8, seed in any::<u64>(), by_patient in any::<bool>(), per in 1usize..5) {
        prop_assume!(k <= n);
        prop_assume!(!by_patient || k <= n.div_ceil(per));
        let cases: Vec<(String, String)> = (0..n).map(|i| (format!("c{i:03}"), format!("p{}", i / per))).collect();
        let mode = if by_patient { FoldMode::ByPatient } else { FoldMode::ByVolume };
        let split = make_folds(&cases, k, mode, seed).unwrap();
        let mut all: Vec<String> = (0..k).flat_map(|f| split.members(f)).collect();
        all.sort();
        let mut expected: Vec<String> = cases.iter().map(|c| c.0.clone()).collect();
        expected.sort();
        prop_assert_eq!(all, expected);
        prop_assert_eq!(split.sizes().iter().sum::<usize>(), n);
        if by_patient {
            for (c, p) in &cases {
                for (c2, p2) in &cases {
                    if p == p2 {
                        prop_assert_eq!(split.fold_of(c), split.fold_of(c2));
                    }
                }
            }
        } else {
            let sizes = split.sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn box_stats_counts(values in prop::collection::vec(-10.0f64..10.0, 1..80), spike in prop::option::of(50.0f64..1e3)) {
        let mut values = values;
        if let Some(s) = spike {
            values.push(s);
        }
        let b = box_stats(&values).unwrap();
        let inside = values.iter().filter(|&&v| v >= b.whisker_low && v <= b.whisker_high).count();
        prop_assert_eq!(inside + b.outliers.len(), values.len());
        prop_assert!(b.q1 <= b.median && b.median <= b.q3);
    }

    #[test]
    fn wilcoxon_rescaling_invariance(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40), scale in 0.01f64..100.0) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let sa: Vec<f64> = a.iter().map(|v| v * scale).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * scale).collect();
        match (wilcoxon_signed_rank(&a, &b), wilcoxon_signed_rank(&sa, &sb)) {
            (Ok(r), Ok(s)) => {
                prop_assert_eq!(r.statistic, s.statistic);
                prop_assert!((r.p_two_sided - s.p_two_sided).abs() < 1e-12);
            }
            (Err(_), Err(_)) => {}
            (r, s) => prop_assert!(false, "{r:?} vs {s:?}"),
        }
    }
}

/// `min(1, 2 P(W+ <= W))` by enumerating every sign assignment of the ranks.
fn enumerated_p(diffs: &[f64]) -> (f64, f64) {
    let mags: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks: Vec<f64> = mags
        .iter()
        .map(|&m| {
            let below = mags.iter().filter(|&&o| o < m).count() as f64;
            let equal = mags.iter().filter(|&&o| o == m).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w = w_plus.min(total - w_plus);
    let n = diffs.len();
    let mut hits = 0u64;
    for signs in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|&i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s <= w + 1e-9 {
            hits += 1;
        }
    }
    (w, (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0))
}

#[test]
fn wilcoxon_exact_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    for trial in 0..500 {
        let n = 1 + trial % 12;
        // coarse values force tied magnitudes in many trials
        let coarse = trial % 3 == 0;
        let diffs: Vec<f64> = (0..n)
            .map(|_| {
                let mag = if coarse { f64::from(rng.gen_range(1..4u8)) } else { rng.gen_range(0.01..1.0) };
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let r = wilcoxon_signed_rank(&diffs, &vec![0.0; n]).unwrap();
        let (w, p) = enumerated_p(&diffs);
        assert_eq!(r.method, WilcoxonMethod::Exact);
        assert_eq!(r.n_effective, n);
        assert!((r.statistic - w).abs() < 1e-12, "trial {trial}: W {} vs {w}", r.statistic);
        assert!((r.p_two_sided - p).abs() < 1e-12, "trial {trial}: p {} vs {p}", r.p_two_sided);
    }
}

#[test]
fn largest_component_tie_keeps_first() {
    let mut values = vec![0u8; 16 * 16 * 16];
    for &(x0, y0, z0) in &[(9, 9, 9), (1, 1, 1)] {
        for dx in 0..3 {
            for dy in 0..3 {
                for dz in 0..3 {
                    values[linear_index(N16, x0 + dx, y0 + dy, z0 + dz)] = 1;
                }
            }
        }
    }
    let mask = LabelMask::new(N16, values).unwrap();
    for full in [false, true] {
        let got = largest_component(&mask, connectivity(full));
        assert_eq!(got.count(), 27);
        assert!(got.get(1, 1, 1) && !got.get(9, 9, 9));
        assert_eq!(got.values(), &flood_fill_largest(&mask, full)[..]);
    }
}

fn blob_case(dims: [usize; 3], seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = [0, 1, 2].map(|a| rng.gen_range(2..dims[a] - 2));
    let r = rng.gen_range(1.0..2.5);
    let n = dims.iter().product();
    let mut mask = vec![0u8; n];
    for (i, m) in mask.iter_mut().enumerate() {
        let p = coords(dims, i);
        let d2: f64 = (0..3).map(|a| (p[a] as f64 - c[a] as f64).powi(2)).sum();
        *m = u8::from(d2 <= r * r);
    }
    let vol = Volume3::from_values(dims, (0..n).map(|i| i as f32).collect()).unwrap();
    Case::new("c", "p", 0, [vol.clone(), vol.clone(), vol.clone(), vol], Some(LabelMask::new(dims, mask).unwrap()))
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampler_quota_and_validity(seed in any::<u64>(), k in 1usize..40, fg in 0.0f64..=1.0, p in 2usize..7) {
        let case = blob_case([20, 18, 16], seed);
        let cfg = SamplerConfig { patch_size: [p, p, p], fg_fraction: fg, seed };
        let patches = sample_patches(&case, &ChannelSelection::single(SequenceId::FLAIR), k, &cfg).unwrap();
        prop_assert_eq!(patches.len(), k);
        let quota = (fg * k as f64).round() as usize;
        let with_fg = patches.iter().filter(|q| q.label.data().iter().sum::<f64>() >= 1.0).count();
        prop_assert_eq!(with_fg, quota);
        for (i, q) in patches.iter().enumerate() {
            prop_assert!((0..3).all(|a| q.origin[a] + p <= case.dims()[a]));
            let label_sum: f64 = q.label.data().iter().sum();
            prop_assert_eq!(q.foreground, i < quota);
            if q.foreground {
                prop_assert!(label_sum >= 1.0);
            } else {
                prop_assert!(!q.fallback);
                prop_assert_eq!(label_sum, 0.0);
            }
        }
    }
}
